//! Fake quantization, calibration, and the two competing gradient rules for
//! the learned quantization scale.
//!
//! A k-bit symmetric quantizer maps x to s * round(clamp(x/s, l_min, l_max))
//! with l_min = -(2^(k-1)) + 1 and l_max = 2^(k-1). Rounding ties go away
//! from zero. The scale s is learnable: during QAT its update direction
//! comes either from the straight-through rule (sum of -x/s + round(x/s))
//! or from the squared-quantization-error rule (2 * sum of (Q[x]-x) *
//! round(x/s)), which descends the quantization MSE directly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Quantization bit-width. Only 4- and 8-bit codes exist in this toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitWidth {
    Int4,
    Int8,
}

impl BitWidth {
    pub fn bits(self) -> u32 {
        match self {
            BitWidth::Int4 => 4,
            BitWidth::Int8 => 8,
        }
    }

    /// Lower clamp bound: -(2^(k-1)) + 1.
    pub fn l_min(self) -> i32 {
        -(1 << (self.bits() - 1)) + 1
    }

    /// Upper clamp bound: 2^(k-1).
    pub fn l_max(self) -> i32 {
        1 << (self.bits() - 1)
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            4 => Ok(BitWidth::Int4),
            8 => Ok(BitWidth::Int8),
            other => Err(Error::contract(format!("unsupported bit-width {}", other))),
        }
    }
}

/// How the scale gradient is computed during QAT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    Ste,
    Mse,
}

/// Learning-rate group a scale belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrGroup {
    WeightScale,
    ActivationScale,
}

/// One scale for the whole tensor, or one per matrix row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerRow,
}

pub const SCALE_FLOOR: f32 = 1e-8;

/// A learnable quantization scale with its bit-width and bookkeeping tags.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantScale {
    values: Vec<f32>,
    bits: BitWidth,
    granularity: Granularity,
    pub grad_mode: GradMode,
    pub lr_group: LrGroup,
}

impl QuantScale {
    pub fn new(
        values: Vec<f32>,
        bits: BitWidth,
        granularity: Granularity,
        grad_mode: GradMode,
        lr_group: LrGroup,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("scale vector is empty"));
        }
        if granularity == Granularity::PerTensor && values.len() != 1 {
            return Err(Error::contract("per-tensor scale must hold one value"));
        }
        if values.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::contract("quantization scale must be positive and finite"));
        }
        Ok(Self { values, bits, granularity, grad_mode, lr_group })
    }

    pub fn per_tensor(s: f32, bits: BitWidth) -> Result<Self> {
        Self::new(vec![s], bits, Granularity::PerTensor, GradMode::Mse, LrGroup::ActivationScale)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn l_min(&self) -> i32 {
        self.bits.l_min()
    }

    pub fn l_max(&self) -> i32 {
        self.bits.l_max()
    }

    /// Scale applying to row `row` of a tensor with `rows` rows.
    pub fn for_row(&self, row: usize) -> f32 {
        match self.granularity {
            Granularity::PerTensor => self.values[0],
            Granularity::PerRow => self.values[row],
        }
    }

    /// Applies an additive update and clamps every component to the positive
    /// floor. Called by the optimizer after each step.
    pub fn apply_update(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::shape(format!(
                "scale update length {} vs {}",
                delta.len(),
                self.values.len()
            )));
        }
        for (s, d) in self.values.iter_mut().zip(delta) {
            *s = (*s + d).max(SCALE_FLOOR);
        }
        Ok(())
    }

    fn check_rows(&self, x: &Tensor) -> Result<()> {
        if self.granularity == Granularity::PerRow && self.values.len() != x.rows() {
            return Err(Error::shape(format!(
                "per-row scale has {} entries for {} rows",
                self.values.len(),
                x.rows()
            )));
        }
        Ok(())
    }
}

/// round half away from zero; f32::round has exactly that tie rule.
#[inline]
fn round_code(v: f32, l_min: i32, l_max: i32) -> i32 {
    let clamped = v.clamp(l_min as f32, l_max as f32);
    clamped.round() as i32
}

/// s * round(clamp(x/s, l_min, l_max)), elementwise.
pub fn fake_quantize(x: &Tensor, qs: &QuantScale) -> Result<Tensor> {
    qs.check_rows(x)?;
    let (l_min, l_max) = (qs.l_min(), qs.l_max());
    let mut out = x.clone();
    let cols = cols_of(x);
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let s = qs.for_row(idx / cols);
        *v = s * round_code(*v / s, l_min, l_max) as f32;
    }
    Ok(out)
}

/// Integer codes of a tensor; row-major, same shape as the source.
#[derive(Debug, Clone, PartialEq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<i32>,
}

/// round(clamp(x/s, l_min, l_max)) as integer codes. The identity
/// fake_quantize(x) == s * quantize_int(x) holds exactly.
pub fn quantize_int(x: &Tensor, qs: &QuantScale) -> Result<IntTensor> {
    qs.check_rows(x)?;
    let (l_min, l_max) = (qs.l_min(), qs.l_max());
    let cols = cols_of(x);
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| round_code(v / qs.for_row(idx / cols), l_min, l_max))
        .collect();
    Ok(IntTensor { shape: x.shape().to_vec(), codes })
}

/// Straight-through scale gradient: sum_i (-x_i/s + round(x_i/s)).
/// Per-row granularity sums within each row.
pub fn scale_grad_ste(x: &Tensor, qs: &QuantScale) -> Result<Vec<f32>> {
    qs.check_rows(x)?;
    per_scale_sum(x, qs, |v, s, l_min, l_max| {
        let code = round_code(v / s, l_min, l_max);
        -(v as f64) / (s as f64) + code as f64
    })
}

/// Quantization-MSE scale gradient: 2 * sum_i (Q[x_i]-x_i) * round(x_i/s).
/// Clamped elements use the clamped code as the multiplier.
pub fn scale_grad_mse(x: &Tensor, qs: &QuantScale) -> Result<Vec<f32>> {
    qs.check_rows(x)?;
    per_scale_sum(x, qs, |v, s, l_min, l_max| {
        let code = round_code(v / s, l_min, l_max);
        let q = s * code as f32;
        2.0 * ((q - v) as f64) * code as f64
    })
}

fn per_scale_sum(
    x: &Tensor,
    qs: &QuantScale,
    term: impl Fn(f32, f32, i32, i32) -> f64,
) -> Result<Vec<f32>> {
    let (l_min, l_max) = (qs.l_min(), qs.l_max());
    let cols = cols_of(x);
    let mut sums = vec![0.0f64; qs.values().len()];
    for (idx, &v) in x.data().iter().enumerate() {
        let row = idx / cols;
        let slot = match qs.granularity() {
            Granularity::PerTensor => 0,
            Granularity::PerRow => row,
        };
        sums[slot] += term(v, qs.for_row(row), l_min, l_max);
    }
    Ok(sums.into_iter().map(|v| v as f32).collect())
}

/// Clipped straight-through gradient for the quantizer input: upstream
/// passes where l_min <= x/s <= l_max, zero outside.
pub fn input_grad_ste(upstream: &Tensor, x: &Tensor, qs: &QuantScale) -> Result<Tensor> {
    if upstream.shape() != x.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", upstream.shape(), x.shape())));
    }
    qs.check_rows(x)?;
    let (l_min, l_max) = (qs.l_min() as f32, qs.l_max() as f32);
    let cols = cols_of(x);
    let mut out = upstream.clone();
    for (idx, (g, &v)) in out.data_mut().iter_mut().zip(x.data()).enumerate() {
        let ratio = v / qs.for_row(idx / cols);
        if !(l_min..=l_max).contains(&ratio) {
            *g = 0.0;
        }
    }
    Ok(out)
}

fn cols_of(x: &Tensor) -> usize {
    let c = x.cols();
    if c == 0 {
        x.len().max(1)
    } else {
        c
    }
}

/// How weight calibration normalizes the absolute maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightCalib {
    /// s = max|w| / l_max: the largest weight maps to the largest code.
    #[default]
    MaxOverLmax,
    /// s = max|w| literally; codes collapse into [-1, 1]. Kept for fidelity
    /// experiments against the unnormalized reading of the rule.
    LiteralMax,
}

/// Weight-scale calibration from the absolute maximum, per tensor or per row.
pub fn calibrate_weight(
    w: &Tensor,
    bits: BitWidth,
    granularity: Granularity,
    mode: WeightCalib,
    grad_mode: GradMode,
) -> Result<QuantScale> {
    if w.is_empty() {
        return Err(Error::Calibration("empty weight tensor".into()));
    }
    let l_max = bits.l_max() as f32;
    let norm = |amax: f32| -> f32 {
        let s = match mode {
            WeightCalib::MaxOverLmax => amax / l_max,
            WeightCalib::LiteralMax => amax,
        };
        s.max(SCALE_FLOOR)
    };
    let values = match granularity {
        Granularity::PerTensor => {
            let amax = w.data().iter().fold(0.0f32, |m, &v| m.max(v.abs()));
            vec![norm(amax)]
        }
        Granularity::PerRow => (0..w.rows())
            .map(|i| norm(w.row(i).iter().fold(0.0f32, |m, &v| m.max(v.abs()))))
            .collect(),
    };
    QuantScale::new(values, bits, granularity, grad_mode, LrGroup::WeightScale)
}

/// Capacity of the exact calibration reservoir before uniform sampling
/// kicks in; large enough to resolve the 99.99th percentile.
pub const RESERVOIR_CAPACITY: usize = 1_000_000;

pub const ACTIVATION_PERCENTILE: f64 = 0.9999;

/// Streaming collector of |activation| samples. Exact up to the capacity,
/// then uniform reservoir sampling (deterministic for a seeded instance).
#[derive(Debug, Clone)]
pub struct CalibStats {
    reservoir: Vec<f32>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl CalibStats {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self { reservoir: Vec::new(), seen: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn observe(&mut self, x: &Tensor) {
        for &v in x.data() {
            self.observe_value(v.abs());
        }
    }

    pub fn observe_value(&mut self, abs_v: f32) {
        self.seen += 1;
        if self.reservoir.len() < RESERVOIR_CAPACITY {
            self.reservoir.push(abs_v);
        } else {
            // Algorithm R: replace a random slot with probability cap/seen.
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < RESERVOIR_CAPACITY {
                self.reservoir[j as usize] = abs_v;
            }
        }
    }

    pub fn sample_count(&self) -> u64 {
        self.seen
    }

    /// Nearest-rank percentile of the retained samples.
    pub fn percentile(&self, q: f64) -> Result<f32> {
        if self.reservoir.is_empty() {
            return Err(Error::Calibration("no activation samples collected".into()));
        }
        let mut sorted = self.reservoir.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let n = sorted.len();
        let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
        Ok(sorted[rank - 1])
    }
}

/// Activation-scale calibration: s = (99.99th percentile of |a|) / l_max.
pub fn calibrate_activation(
    stats: &CalibStats,
    bits: BitWidth,
    grad_mode: GradMode,
) -> Result<QuantScale> {
    let p = stats.percentile(ACTIVATION_PERCENTILE)?;
    let s = (p / bits.l_max() as f32).max(SCALE_FLOOR);
    QuantScale::new(vec![s], bits, Granularity::PerTensor, grad_mode, LrGroup::ActivationScale)
}
