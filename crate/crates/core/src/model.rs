//! The L-layer Transformer encoder with per-layer precision assignment.
//!
//! Each layer is post-layernorm: multi-head attention, residual + LN, then
//! a GELU feed-forward block, residual + LN. Six GEMMs per layer carry fake
//! quantization when the layer's precision is int8/int4: the Q/K/V and
//! attention-output projections and the two FFN matrices. Attention score
//! and attention-times-value products, softmax, GELU and layernorm always
//! run in float32, as do embeddings and the classifier head.
//!
//! The backward pass is written out manually against the cached forward
//! trace; the trace also exposes the per-head attention distributions and
//! value vectors that distillation losses consume.

use crate::error::{Error, Result};
use crate::quant::{
    fake_quantize, input_grad_ste, quantize_int, scale_grad_mse, scale_grad_ste, GradMode,
    QuantScale,
};
use crate::tensor::{
    self, gelu, gelu_backward, layernorm, layernorm_backward, linear, matmul, softmax_rows,
    softmax_rows_backward, Tensor,
};
use rand::Rng;

pub const LAYERNORM_EPS: f32 = 1e-12;

/// Size hyperparameters of the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} must be divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.num_classes == 0 {
            return Err(Error::Config("vocab_size, max_seq_len, num_classes must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-layer numeric precision of the six quantized GEMMs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Float32,
    Int8,
    Int4,
}

impl Precision {
    pub fn bit_width(self) -> Option<crate::quant::BitWidth> {
        match self {
            Precision::Float32 => None,
            Precision::Int8 => Some(crate::quant::BitWidth::Int8),
            Precision::Int4 => Some(crate::quant::BitWidth::Int4),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Float32 => "float32",
            Precision::Int8 => "int8",
            Precision::Int4 => "int4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "float32" | "fp32" | "float" => Ok(Precision::Float32),
            "int8" => Ok(Precision::Int8),
            "int4" => Ok(Precision::Int4),
            other => Err(Error::Config(format!("unknown precision '{}'", other))),
        }
    }
}

/// Per-layer precision assignment. The embedding table and classifier head
/// are always float32 and are not part of the plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerBitConfig {
    pub per_layer: Vec<Precision>,
}

impl LayerBitConfig {
    pub fn all_float(layers: usize) -> Self {
        Self { per_layer: vec![Precision::Float32; layers] }
    }

    pub fn is_all_float(&self) -> bool {
        self.per_layer.iter().all(|&p| p == Precision::Float32)
    }

    pub fn precision(&self, layer: usize) -> Precision {
        self.per_layer[layer]
    }
}

/// The six quantized GEMM positions inside one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GemmSlot {
    Query,
    Key,
    Value,
    AttnOut,
    Ffn1,
    Ffn2,
}

pub const GEMM_SLOTS: [GemmSlot; 6] = [
    GemmSlot::Query,
    GemmSlot::Key,
    GemmSlot::Value,
    GemmSlot::AttnOut,
    GemmSlot::Ffn1,
    GemmSlot::Ffn2,
];

impl GemmSlot {
    pub fn index(self) -> usize {
        match self {
            GemmSlot::Query => 0,
            GemmSlot::Key => 1,
            GemmSlot::Value => 2,
            GemmSlot::AttnOut => 3,
            GemmSlot::Ffn1 => 4,
            GemmSlot::Ffn2 => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GemmSlot::Query => "wq",
            GemmSlot::Key => "wk",
            GemmSlot::Value => "wv",
            GemmSlot::AttnOut => "wo",
            GemmSlot::Ffn1 => "w1",
            GemmSlot::Ffn2 => "w2",
        }
    }
}

/// Weights and biases of one encoder layer. Weight matrices are stored
/// [out_features x in_features], one row per output feature.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl LayerParams {
    pub fn weight(&self, slot: GemmSlot) -> &Tensor {
        match slot {
            GemmSlot::Query => &self.wq,
            GemmSlot::Key => &self.wk,
            GemmSlot::Value => &self.wv,
            GemmSlot::AttnOut => &self.wo,
            GemmSlot::Ffn1 => &self.w1,
            GemmSlot::Ffn2 => &self.w2,
        }
    }

    pub fn bias(&self, slot: GemmSlot) -> &Tensor {
        match slot {
            GemmSlot::Query => &self.bq,
            GemmSlot::Key => &self.bk,
            GemmSlot::Value => &self.bv,
            GemmSlot::AttnOut => &self.bo,
            GemmSlot::Ffn1 => &self.b1,
            GemmSlot::Ffn2 => &self.b2,
        }
    }

    fn weight_mut(&mut self, slot: GemmSlot) -> &mut Tensor {
        match slot {
            GemmSlot::Query => &mut self.wq,
            GemmSlot::Key => &mut self.wk,
            GemmSlot::Value => &mut self.wv,
            GemmSlot::AttnOut => &mut self.wo,
            GemmSlot::Ffn1 => &mut self.w1,
            GemmSlot::Ffn2 => &mut self.w2,
        }
    }

    fn bias_mut(&mut self, slot: GemmSlot) -> &mut Tensor {
        match slot {
            GemmSlot::Query => &mut self.bq,
            GemmSlot::Key => &mut self.bk,
            GemmSlot::Value => &mut self.bv,
            GemmSlot::AttnOut => &mut self.bo,
            GemmSlot::Ffn1 => &mut self.b1,
            GemmSlot::Ffn2 => &mut self.b2,
        }
    }
}

/// All trainable tensors of the encoder plus embeddings and classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl EncoderParams {
    /// Random initialization: N(0, init_std^2) weights/embeddings, zero
    /// biases, identity layernorm.
    pub fn init(config: &EncoderConfig, init_std: f32, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let di = config.intermediate;
        fn layer_init<R: Rng>(d: usize, di: usize, std: f32, rng: &mut R) -> LayerParams {
            LayerParams {
                wq: Tensor::randn(&[d, d], std, rng),
                bq: Tensor::zeros(&[d]),
                wk: Tensor::randn(&[d, d], std, rng),
                bk: Tensor::zeros(&[d]),
                wv: Tensor::randn(&[d, d], std, rng),
                bv: Tensor::zeros(&[d]),
                wo: Tensor::randn(&[d, d], std, rng),
                bo: Tensor::zeros(&[d]),
                w1: Tensor::randn(&[di, d], std, rng),
                b1: Tensor::zeros(&[di]),
                w2: Tensor::randn(&[d, di], std, rng),
                b2: Tensor::zeros(&[d]),
                ln1_gamma: Tensor::full(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::full(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
            }
        }
        let layers = (0..config.layers).map(|_| layer_init(d, di, init_std, rng)).collect();
        Ok(Self {
            token_embedding: Tensor::randn(&[config.vocab_size, d], init_std, rng),
            position_embedding: Tensor::randn(&[config.max_seq_len, d], init_std, rng),
            layers,
            head_w: Tensor::randn(&[config.num_classes, d], init_std, rng),
            head_b: Tensor::zeros(&[config.num_classes]),
        })
    }

    /// Same shapes as `self`, all zeros. Gradient and moment buffers.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    /// Every tensor in a fixed traversal order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend([
                &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.w1, &l.b1, &l.w2,
                &l.b2, &l.ln1_gamma, &l.ln1_beta, &l.ln2_gamma, &l.ln2_beta,
            ]);
        }
        out.extend([&self.head_w, &self.head_b]);
        out
    }

    /// Mutable view in the same order as `tensors`.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> =
            vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
                &mut l.ln1_gamma,
                &mut l.ln1_beta,
                &mut l.ln2_gamma,
                &mut l.ln2_beta,
            ]);
        }
        out.extend([&mut self.head_w, &mut self.head_b]);
        out
    }

    /// (name, tensor) pairs in traversal order; names key the checkpoint.
    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let named: [(&str, &Tensor); 16] = [
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
                ("ln1_gamma", &l.ln1_gamma),
                ("ln1_beta", &l.ln1_beta),
                ("ln2_gamma", &l.ln2_gamma),
                ("ln2_beta", &l.ln2_beta),
            ];
            for (n, t) in named {
                out.push((format!("layer{}.{}", i, n), t));
            }
        }
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    pub fn validate_shapes(&self, config: &EncoderConfig) -> Result<()> {
        config.validate()?;
        let d = config.hidden;
        let di = config.intermediate;
        let check = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::shape(format!(
                    "{}: expected {:?}, got {:?}",
                    name,
                    shape,
                    t.shape()
                )));
            }
            Ok(())
        };
        check("token_embedding", &self.token_embedding, &[config.vocab_size, d])?;
        check("position_embedding", &self.position_embedding, &[config.max_seq_len, d])?;
        if self.layers.len() != config.layers {
            return Err(Error::shape(format!(
                "{} layers, config says {}",
                self.layers.len(),
                config.layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layer{}.{}", i, n);
            check(&p("wq"), &l.wq, &[d, d])?;
            check(&p("wk"), &l.wk, &[d, d])?;
            check(&p("wv"), &l.wv, &[d, d])?;
            check(&p("wo"), &l.wo, &[d, d])?;
            check(&p("w1"), &l.w1, &[di, d])?;
            check(&p("w2"), &l.w2, &[d, di])?;
            check(&p("bq"), &l.bq, &[d])?;
            check(&p("bk"), &l.bk, &[d])?;
            check(&p("bv"), &l.bv, &[d])?;
            check(&p("bo"), &l.bo, &[d])?;
            check(&p("b1"), &l.b1, &[di])?;
            check(&p("b2"), &l.b2, &[d])?;
            check(&p("ln1_gamma"), &l.ln1_gamma, &[d])?;
            check(&p("ln1_beta"), &l.ln1_beta, &[d])?;
            check(&p("ln2_gamma"), &l.ln2_gamma, &[d])?;
            check(&p("ln2_beta"), &l.ln2_beta, &[d])?;
        }
        check("head_w", &self.head_w, &[config.num_classes, d])?;
        check("head_b", &self.head_b, &[config.num_classes])?;
        Ok(())
    }
}

/// Activation + weight scales of one quantized GEMM.
#[derive(Debug, Clone, PartialEq)]
pub struct GemmQs {
    pub act: QuantScale,
    pub weight: QuantScale,
}

/// Scales for one quantized layer, indexed by `GemmSlot`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQs {
    pub slots: Vec<GemmQs>,
}

impl LayerQs {
    pub fn slot(&self, slot: GemmSlot) -> &GemmQs {
        &self.slots[slot.index()]
    }

    pub fn slot_mut(&mut self, slot: GemmSlot) -> &mut GemmQs {
        &mut self.slots[slot.index()]
    }
}

/// Quantization scales for the whole encoder; `None` for float32 layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QsSet {
    pub layers: Vec<Option<LayerQs>>,
}

impl QsSet {
    pub fn empty(layers: usize) -> Self {
        Self { layers: vec![None; layers] }
    }

    pub fn layer(&self, l: usize) -> Option<&LayerQs> {
        self.layers.get(l).and_then(|x| x.as_ref())
    }

    /// All scales in a fixed order, for the optimizer and checkpoints.
    pub fn scale_entries_mut(&mut self) -> Vec<&mut QuantScale> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut().flatten() {
            for gq in &mut layer.slots {
                out.push(&mut gq.act);
                out.push(&mut gq.weight);
            }
        }
        out
    }

    pub fn scale_entries(&self) -> Vec<&QuantScale> {
        let mut out = Vec::new();
        for layer in self.layers.iter().flatten() {
            for gq in &layer.slots {
                out.push(&gq.act);
                out.push(&gq.weight);
            }
        }
        out
    }
}

/// One effective weight per GEMM slot: the raw float tensor, or the
/// fake-quantized tensor the GEMM actually multiplies with.
#[derive(Debug, Clone)]
pub enum EffWeight {
    Raw,
    Quantized(Tensor),
}

/// Per-step snapshot of the weights each GEMM multiplies with. Weights are
/// quantized once per step, not per example.
#[derive(Debug, Clone)]
pub struct EffectiveWeights {
    pub layers: Vec<Vec<EffWeight>>,
}

impl EffectiveWeights {
    pub fn build(params: &EncoderParams, plan: &LayerBitConfig, qs: &QsSet) -> Result<Self> {
        if plan.per_layer.len() != params.layers.len() {
            return Err(Error::shape(format!(
                "plan covers {} layers, model has {}",
                plan.per_layer.len(),
                params.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(params.layers.len());
        for (l, lp) in params.layers.iter().enumerate() {
            let mut slots = Vec::with_capacity(6);
            for slot in GEMM_SLOTS {
                let eff = match (plan.precision(l), qs.layer(l)) {
                    (Precision::Float32, _) => EffWeight::Raw,
                    (_, Some(lqs)) => {
                        let gq = lqs.slot(slot);
                        EffWeight::Quantized(fake_quantize(lp.weight(slot), &gq.weight)?)
                    }
                    (p, None) => {
                        return Err(Error::Contract(format!(
                            "layer {} is {} but has no quantization scales",
                            l,
                            p.name()
                        )))
                    }
                };
                slots.push(eff);
            }
            layers.push(slots);
        }
        Ok(Self { layers })
    }

    pub fn weight<'a>(&'a self, params: &'a EncoderParams, l: usize, slot: GemmSlot) -> &'a Tensor {
        match &self.layers[l][slot.index()] {
            EffWeight::Raw => params.layers[l].weight(slot),
            EffWeight::Quantized(t) => t,
        }
    }

    /// Mutable access to a quantized slot; used by gradient-check harnesses
    /// that perturb the effective weight directly.
    pub fn quantized_mut(&mut self, l: usize, slot: GemmSlot) -> Option<&mut Tensor> {
        match &mut self.layers[l][slot.index()] {
            EffWeight::Raw => None,
            EffWeight::Quantized(t) => Some(t),
        }
    }
}

/// Cached activations of one layer's forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub input: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Per-head attention distributions, each row-stochastic [T x T].
    pub attn: Vec<Tensor>,
    /// Concatenated per-head outputs [T x hidden].
    pub concat: Tensor,
    pub mha_out: Tensor,
    pub r1: Tensor,
    pub h1: Tensor,
    pub ffn_pre: Tensor,
    pub ffn_act: Tensor,
    pub ffn_out: Tensor,
    pub r2: Tensor,
}

impl LayerTrace {
    /// Value vectors of head `a`: columns [a*d_k, (a+1)*d_k) of v.
    pub fn head_values(&self, a: usize, head_dim: usize) -> Tensor {
        self.v.col_slice(a * head_dim, (a + 1) * head_dim)
    }

    /// Output of head `a` before the attention-output projection.
    pub fn head_out(&self, a: usize, head_dim: usize) -> Tensor {
        self.concat.col_slice(a * head_dim, (a + 1) * head_dim)
    }
}

/// Forward trace of one example.
#[derive(Debug, Clone)]
pub struct ExampleTrace {
    pub tokens: Vec<u32>,
    pub embedded: Tensor,
    pub layers: Vec<LayerTrace>,
    pub final_hidden: Tensor,
    pub pooled: Tensor,
}

/// Forward trace of a batch; also the cache the backward pass consumes.
#[derive(Debug, Clone)]
pub struct Trace {
    pub examples: Vec<ExampleTrace>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    pub trace: bool,
    /// Capture a per-GEMM checksum of activation codes; lets gradient-check
    /// harnesses detect rounding-boundary crossings between two evaluations.
    pub code_checksum: bool,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub trace: Option<Trace>,
    pub code_checksums: Option<Vec<i64>>,
}

/// Borrowed bundle of everything a forward/backward pass needs.
#[derive(Clone, Copy)]
pub struct Model<'a> {
    pub config: &'a EncoderConfig,
    pub params: &'a EncoderParams,
    pub plan: &'a LayerBitConfig,
    pub qs: &'a QsSet,
    pub eff: &'a EffectiveWeights,
}

struct QuantCtx<'a> {
    checksums: Option<&'a mut Vec<i64>>,
}

impl Model<'_> {
    pub fn forward(&self, batch: &[Vec<u32>], opts: ForwardOpts) -> Result<ForwardOutput> {
        let cfg = self.config;
        let mut logits = Tensor::zeros(&[batch.len(), cfg.num_classes]);
        let mut traces = Vec::new();
        let mut checksums: Option<Vec<i64>> =
            if opts.code_checksum { Some(Vec::new()) } else { None };
        for (b, tokens) in batch.iter().enumerate() {
            let (row, trace) = self.forward_example(
                tokens,
                opts.trace,
                &mut QuantCtx { checksums: checksums.as_mut() },
            )?;
            logits.row_mut(b).copy_from_slice(row.data());
            if let Some(t) = trace {
                traces.push(t);
            }
        }
        Ok(ForwardOutput {
            logits,
            trace: if opts.trace { Some(Trace { examples: traces }) } else { None },
            code_checksums: checksums,
        })
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        let cfg = self.config;
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                cfg.max_seq_len
            )));
        }
        let d = cfg.hidden;
        let mut h = Tensor::zeros(&[tokens.len(), d]);
        for (t, &tok) in tokens.iter().enumerate() {
            if tok as usize >= cfg.vocab_size {
                return Err(Error::Data(format!(
                    "token id {} out of range (vocab {})",
                    tok, cfg.vocab_size
                )));
            }
            let row = h.row_mut(t);
            let emb = self.params.token_embedding.row(tok as usize);
            let pos = self.params.position_embedding.row(t);
            for ((o, &e), &p) in row.iter_mut().zip(emb).zip(pos) {
                *o = e + p;
            }
        }
        Ok(h)
    }

    fn forward_example(
        &self,
        tokens: &[u32],
        capture: bool,
        ctx: &mut QuantCtx,
    ) -> Result<(Tensor, Option<ExampleTrace>)> {
        let embedded = self.embed(tokens)?;
        let mut h = embedded.clone();
        let mut layer_traces = Vec::new();
        for l in 0..self.params.layers.len() {
            let (next, trace) = self.layer_forward(l, &h, capture, ctx)?;
            h = next;
            if let Some(t) = trace {
                layer_traces.push(t);
            }
        }
        let pooled = Tensor::new(vec![1, self.config.hidden], h.mean_rows().data().to_vec())?;
        let logits = linear(&pooled, &self.params.head_w, &self.params.head_b)?;
        let trace = if capture {
            Some(ExampleTrace {
                tokens: tokens.to_vec(),
                embedded,
                layers: layer_traces,
                final_hidden: h,
                pooled,
            })
        } else {
            None
        };
        Ok((logits, trace))
    }

    /// The quantized GEMM: fake-quantize the input when the slot has scales,
    /// multiply by the effective weight, add the float bias.
    fn q_linear(&self, l: usize, slot: GemmSlot, x: &Tensor, ctx: &mut QuantCtx) -> Result<Tensor> {
        let lp = &self.params.layers[l];
        let w = self.eff.weight(self.params, l, slot);
        match self.qs.layer(l) {
            Some(lqs) if self.plan.precision(l) != Precision::Float32 => {
                let gq = lqs.slot(slot);
                let xq = fake_quantize(x, &gq.act)?;
                if let Some(sums) = ctx.checksums.as_deref_mut() {
                    let codes = quantize_int(x, &gq.act)?;
                    let mut acc = 0i64;
                    for (i, &c) in codes.codes.iter().enumerate() {
                        acc += ((i % 97) as i64 + 1) * c as i64;
                    }
                    sums.push(acc);
                }
                linear(&xq, w, lp.bias(slot))
            }
            _ => linear(x, w, lp.bias(slot)),
        }
    }

    fn layer_forward(
        &self,
        l: usize,
        h: &Tensor,
        capture: bool,
        ctx: &mut QuantCtx,
    ) -> Result<(Tensor, Option<LayerTrace>)> {
        let cfg = self.config;
        let lp = &self.params.layers[l];
        let (heads, dk) = (cfg.heads, cfg.head_dim());
        let seq = h.rows();

        let q = self.q_linear(l, GemmSlot::Query, h, ctx)?;
        let k = self.q_linear(l, GemmSlot::Key, h, ctx)?;
        let v = self.q_linear(l, GemmSlot::Value, h, ctx)?;

        let inv_sqrt_dk = 1.0 / (dk as f32).sqrt();
        let mut concat = Tensor::zeros(&[seq, cfg.hidden]);
        let mut attn = Vec::with_capacity(heads);
        for a in 0..heads {
            let (lo, hi) = (a * dk, (a + 1) * dk);
            let qa = q.col_slice(lo, hi);
            let ka = k.col_slice(lo, hi);
            let va = v.col_slice(lo, hi);
            let scores = matmul(&qa, &ka.transpose()?)?.scale(inv_sqrt_dk);
            let a_dist = softmax_rows(&scores);
            let oa = matmul(&a_dist, &va)?;
            concat.set_col_slice(lo, &oa);
            attn.push(a_dist);
        }
        let mha_out = self.q_linear(l, GemmSlot::AttnOut, &concat, ctx)?;
        let r1 = h.add(&mha_out)?;
        let h1 = layernorm(&r1, &lp.ln1_gamma, &lp.ln1_beta, LAYERNORM_EPS)?;

        let ffn_pre = self.q_linear(l, GemmSlot::Ffn1, &h1, ctx)?;
        let ffn_act = gelu(&ffn_pre);
        let ffn_out = self.q_linear(l, GemmSlot::Ffn2, &ffn_act, ctx)?;
        let r2 = h1.add(&ffn_out)?;
        let h_next = layernorm(&r2, &lp.ln2_gamma, &lp.ln2_beta, LAYERNORM_EPS)?;

        let trace = if capture {
            Some(LayerTrace {
                input: h.clone(),
                q,
                k,
                v,
                attn,
                concat,
                mha_out,
                r1,
                h1,
                ffn_pre,
                ffn_act,
                ffn_out,
                r2,
            })
        } else {
            None
        };
        Ok((h_next, trace))
    }
}

/// Gradients flowing into traced features: the logits plus optional
/// injections at per-layer attention distributions, value vectors and head
/// outputs (distillation losses produce these).
#[derive(Debug, Clone)]
pub struct TraceGrads {
    pub logits: Tensor,
    pub layers: Vec<LayerInjection>,
}

#[derive(Debug, Clone, Default)]
pub struct LayerInjection {
    /// [example][head] gradients w.r.t. the attention distributions.
    pub attn: Option<Vec<Vec<Tensor>>>,
    /// [example][head] gradients w.r.t. the per-head value vectors.
    pub values: Option<Vec<Vec<Tensor>>>,
    /// [example][head] gradients w.r.t. the per-head outputs.
    pub head_out: Option<Vec<Vec<Tensor>>>,
}

impl TraceGrads {
    pub fn from_logits(logits: Tensor, layers: usize) -> Self {
        Self { logits, layers: vec![LayerInjection::default(); layers] }
    }
}

/// Scale gradients parallel to a `QsSet`.
#[derive(Debug, Clone, Default)]
pub struct ScaleGrads {
    pub layers: Vec<Option<LayerScaleGrads>>,
}

#[derive(Debug, Clone)]
pub struct LayerScaleGrads {
    pub slots: Vec<SlotScaleGrads>,
}

#[derive(Debug, Clone, Default)]
pub struct SlotScaleGrads {
    pub act: Vec<f32>,
    pub weight: Vec<f32>,
}

fn scale_grad(x: &Tensor, qs: &QuantScale) -> Result<Vec<f32>> {
    match qs.grad_mode {
        GradMode::Ste => scale_grad_ste(x, qs),
        GradMode::Mse => scale_grad_mse(x, qs),
    }
}

fn add_into(acc: &mut Vec<f32>, v: Vec<f32>) {
    if acc.is_empty() {
        *acc = v;
    } else {
        for (a, b) in acc.iter_mut().zip(v) {
            *a += b;
        }
    }
}

impl Model<'_> {
    /// Full backward pass over a captured trace. Returns parameter gradients
    /// (same shapes as the params) and scale gradients.
    ///
    /// Weight gradients flow through the straight-through estimator of each
    /// fake-quant node. Scale gradients use each scale's own grad_mode rule;
    /// they depend only on the tensor the quantizer saw, with
    /// activation-scale gradients summed over the batch.
    pub fn backward(
        &self,
        trace: &Trace,
        grads_in: &TraceGrads,
    ) -> Result<(EncoderParams, ScaleGrads)> {
        let cfg = self.config;
        let n_layers = self.params.layers.len();
        if trace.examples.is_empty() {
            return Err(Error::Contract("backward requires a captured trace".into()));
        }
        if grads_in.logits.rows() != trace.examples.len() {
            return Err(Error::shape(format!(
                "logit grads for {} examples, trace has {}",
                grads_in.logits.rows(),
                trace.examples.len()
            )));
        }
        if grads_in.layers.len() != n_layers {
            return Err(Error::shape(format!(
                "injections for {} layers, model has {}",
                grads_in.layers.len(),
                n_layers
            )));
        }
        let mut grads = self.params.zeros_like();
        // Accumulated d(effective weight) per slot; masked into raw-weight
        // gradients at the end (the mask is constant within a step).
        let mut eff_w_grads: Vec<Vec<Option<Tensor>>> =
            (0..n_layers).map(|_| vec![None; 6]).collect();
        let mut scale_grads = ScaleGrads {
            layers: self
                .plan
                .per_layer
                .iter()
                .map(|&p| {
                    if p == Precision::Float32 {
                        None
                    } else {
                        Some(LayerScaleGrads { slots: vec![SlotScaleGrads::default(); 6] })
                    }
                })
                .collect(),
        };

        for (ex_idx, ex) in trace.examples.iter().enumerate() {
            let dlogits =
                Tensor::new(vec![1, cfg.num_classes], grads_in.logits.row(ex_idx).to_vec())?;
            // classifier head + mean pooling
            let (dpooled, dhead_w, dhead_b) =
                tensor::linear_backward(&dlogits, &ex.pooled, &self.params.head_w)?;
            grads.head_w.add_assign(&dhead_w)?;
            grads.head_b.add_assign(&dhead_b)?;
            let seq = ex.final_hidden.rows();
            let mut dh = Tensor::zeros(&[seq, cfg.hidden]);
            let inv_t = 1.0 / seq as f32;
            for t in 0..seq {
                let row = dh.row_mut(t);
                for (o, &g) in row.iter_mut().zip(dpooled.data()) {
                    *o = g * inv_t;
                }
            }

            for l in (0..n_layers).rev() {
                dh = self.layer_backward(
                    l,
                    ex_idx,
                    &ex.layers[l],
                    dh,
                    &grads_in.layers[l],
                    &mut grads,
                    &mut eff_w_grads,
                    &mut scale_grads,
                )?;
            }

            // embeddings
            for (t, &tok) in ex.tokens.iter().enumerate() {
                let g = dh.row(t).to_vec();
                for (o, v) in grads.token_embedding.row_mut(tok as usize).iter_mut().zip(&g) {
                    *o += v;
                }
                for (o, v) in grads.position_embedding.row_mut(t).iter_mut().zip(&g) {
                    *o += v;
                }
            }
        }

        // Mask accumulated effective-weight gradients through the STE and
        // attach the once-per-step weight-scale gradients.
        for l in 0..n_layers {
            for slot in GEMM_SLOTS {
                if let Some(dw_eff) = eff_w_grads[l][slot.index()].take() {
                    let raw_w = self.params.layers[l].weight(slot);
                    let dw = match self.qs.layer(l) {
                        Some(lqs) if self.plan.precision(l) != Precision::Float32 => {
                            let gq = lqs.slot(slot);
                            if let Some(lsg) = scale_grads.layers[l].as_mut() {
                                lsg.slots[slot.index()].weight = scale_grad(raw_w, &gq.weight)?;
                            }
                            input_grad_ste(&dw_eff, raw_w, &gq.weight)?
                        }
                        _ => dw_eff,
                    };
                    grads.layers[l].weight_mut(slot).add_assign(&dw)?;
                }
            }
        }
        Ok((grads, scale_grads))
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        l: usize,
        ex_idx: usize,
        lt: &LayerTrace,
        dh_next: Tensor,
        inj: &LayerInjection,
        grads: &mut EncoderParams,
        eff_w_grads: &mut [Vec<Option<Tensor>>],
        scale_grads: &mut ScaleGrads,
    ) -> Result<Tensor> {
        let cfg = self.config;
        let lp = &self.params.layers[l];
        let (heads, dk) = (cfg.heads, cfg.head_dim());

        // LN2
        let (dr2, dg2, db2) = layernorm_backward(&dh_next, &lt.r2, &lp.ln2_gamma, LAYERNORM_EPS)?;
        grads.layers[l].ln2_gamma.add_assign(&dg2)?;
        grads.layers[l].ln2_beta.add_assign(&db2)?;

        // FFN
        let dffn_act = self.q_linear_backward(
            l,
            GemmSlot::Ffn2,
            &dr2,
            &lt.ffn_act,
            grads,
            eff_w_grads,
            scale_grads,
        )?;
        let dffn_pre = gelu_backward(&dffn_act, &lt.ffn_pre);
        let dh1_ffn = self.q_linear_backward(
            l,
            GemmSlot::Ffn1,
            &dffn_pre,
            &lt.h1,
            grads,
            eff_w_grads,
            scale_grads,
        )?;
        let mut dh1 = dr2; // residual branch
        dh1.add_assign(&dh1_ffn)?;

        // LN1
        let (dr1, dg1, db1) = layernorm_backward(&dh1, &lt.r1, &lp.ln1_gamma, LAYERNORM_EPS)?;
        grads.layers[l].ln1_gamma.add_assign(&dg1)?;
        grads.layers[l].ln1_beta.add_assign(&db1)?;

        // attention-output projection
        let dconcat = self.q_linear_backward(
            l,
            GemmSlot::AttnOut,
            &dr1,
            &lt.concat,
            grads,
            eff_w_grads,
            scale_grads,
        )?;

        // per-head attention
        let seq = lt.input.rows();
        let inv_sqrt_dk = 1.0 / (dk as f32).sqrt();
        let mut dq_full = Tensor::zeros(&[seq, cfg.hidden]);
        let mut dk_full = Tensor::zeros(&[seq, cfg.hidden]);
        let mut dv_full = Tensor::zeros(&[seq, cfg.hidden]);
        for a in 0..heads {
            let (lo, hi) = (a * dk, (a + 1) * dk);
            let qa = lt.q.col_slice(lo, hi);
            let ka = lt.k.col_slice(lo, hi);
            let va = lt.v.col_slice(lo, hi);
            let a_dist = &lt.attn[a];

            let mut d_oa = dconcat.col_slice(lo, hi);
            if let Some(ho) = &inj.head_out {
                d_oa.add_assign(&ho[ex_idx][a])?;
            }
            let mut d_attn = matmul(&d_oa, &va.transpose()?)?;
            if let Some(at) = &inj.attn {
                d_attn.add_assign(&at[ex_idx][a])?;
            }
            let mut d_va = matmul(&a_dist.transpose()?, &d_oa)?;
            if let Some(vals) = &inj.values {
                d_va.add_assign(&vals[ex_idx][a])?;
            }
            let d_scores = softmax_rows_backward(&d_attn, a_dist).scale(inv_sqrt_dk);
            let d_qa = matmul(&d_scores, &ka)?;
            let d_ka = matmul(&d_scores.transpose()?, &qa)?;
            dq_full.set_col_slice(lo, &d_qa);
            dk_full.set_col_slice(lo, &d_ka);
            dv_full.set_col_slice(lo, &d_va);
        }

        // Q/K/V projections; input gradient is their sum plus the residual.
        let mut dh = dr1;
        for (slot, d_out) in
            [(GemmSlot::Query, &dq_full), (GemmSlot::Key, &dk_full), (GemmSlot::Value, &dv_full)]
        {
            let dx = self.q_linear_backward(
                l,
                slot,
                d_out,
                &lt.input,
                grads,
                eff_w_grads,
                scale_grads,
            )?;
            dh.add_assign(&dx)?;
        }
        Ok(dh)
    }

    /// Backward through one (possibly fake-quantized) GEMM. Returns dx.
    #[allow(clippy::too_many_arguments)]
    fn q_linear_backward(
        &self,
        l: usize,
        slot: GemmSlot,
        dy: &Tensor,
        x_raw: &Tensor,
        grads: &mut EncoderParams,
        eff_w_grads: &mut [Vec<Option<Tensor>>],
        scale_grads: &mut ScaleGrads,
    ) -> Result<Tensor> {
        let w_eff = self.eff.weight(self.params, l, slot);
        let quantized = self.plan.precision(l) != Precision::Float32;
        let (dx_raw, dw_eff, db);
        if quantized {
            let gq = self.qs.layer(l).expect("quantized layer has scales").slot(slot);
            let xq = fake_quantize(x_raw, &gq.act)?;
            let (dx_hat, dw, dbias) = tensor::linear_backward(dy, &xq, w_eff)?;
            if let Some(lsg) = scale_grads.layers[l].as_mut() {
                let g = scale_grad(x_raw, &gq.act)?;
                add_into(&mut lsg.slots[slot.index()].act, g);
            }
            dx_raw = input_grad_ste(&dx_hat, x_raw, &gq.act)?;
            dw_eff = dw;
            db = dbias;
        } else {
            let (dx, dw, dbias) = tensor::linear_backward(dy, x_raw, w_eff)?;
            dx_raw = dx;
            dw_eff = dw;
            db = dbias;
        }
        let slot_acc = &mut eff_w_grads[l][slot.index()];
        match slot_acc {
            Some(acc) => acc.add_assign(&dw_eff)?,
            None => *slot_acc = Some(dw_eff),
        }
        grads.layers[l].bias_mut(slot).add_assign(&db)?;
        Ok(dx_raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{Granularity, LrGroup, WeightCalib};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(layers: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            hidden: 8,
            heads: 2,
            intermediate: 16,
            vocab_size: 11,
            max_seq_len: 6,
            num_classes: 3,
        }
    }

    fn float_model_parts(
        cfg: &EncoderConfig,
        seed: u64,
    ) -> (EncoderParams, LayerBitConfig, QsSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParams::init(cfg, 0.2, &mut rng).unwrap();
        let plan = LayerBitConfig::all_float(cfg.layers);
        let qs = QsSet::empty(cfg.layers);
        (params, plan, qs)
    }

    /// Generously calibrated scales for every slot of every layer: weights
    /// from their own max, activations from a probe forward's max.
    pub(crate) fn calibrated_qs(
        cfg: &EncoderConfig,
        params: &EncoderParams,
        precision: Precision,
        batch: &[Vec<u32>],
    ) -> QsSet {
        let bits = precision.bit_width().unwrap();
        let float_plan = LayerBitConfig::all_float(cfg.layers);
        let empty = QsSet::empty(cfg.layers);
        let eff = EffectiveWeights::build(params, &float_plan, &empty).unwrap();
        let model = Model { config: cfg, params, plan: &float_plan, qs: &empty, eff: &eff };
        let out = model.forward(batch, ForwardOpts { trace: true, ..Default::default() }).unwrap();
        let trace = out.trace.unwrap();

        let mut layers = Vec::new();
        for l in 0..cfg.layers {
            let mut slots = Vec::new();
            for slot in GEMM_SLOTS {
                let w = params.layers[l].weight(slot);
                let wqs = crate::quant::calibrate_weight(
                    w,
                    bits,
                    Granularity::PerRow,
                    WeightCalib::MaxOverLmax,
                    GradMode::Mse,
                )
                .unwrap();
                let mut amax = 0.0f32;
                for ex in &trace.examples {
                    let x = match slot {
                        GemmSlot::Query | GemmSlot::Key | GemmSlot::Value => &ex.layers[l].input,
                        GemmSlot::AttnOut => &ex.layers[l].concat,
                        GemmSlot::Ffn1 => &ex.layers[l].h1,
                        GemmSlot::Ffn2 => &ex.layers[l].ffn_act,
                    };
                    amax = x.data().iter().fold(amax, |m, &v| m.max(v.abs()));
                }
                let s = (amax / bits.l_max() as f32).max(crate::quant::SCALE_FLOOR);
                let aqs = QuantScale::new(
                    vec![s],
                    bits,
                    Granularity::PerTensor,
                    GradMode::Mse,
                    LrGroup::ActivationScale,
                )
                .unwrap();
                slots.push(GemmQs { act: aqs, weight: wqs });
            }
            layers.push(Some(LayerQs { slots }));
        }
        QsSet { layers }
    }

    fn batch(cfg: &EncoderConfig, n: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..cfg.max_seq_len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect()
            })
            .collect()
    }

    #[test]
    fn single_token_attention_is_identity_distribution() {
        let cfg = tiny_config(1);
        let (params, plan, qs) = float_model_parts(&cfg, 1);
        let eff = EffectiveWeights::build(&params, &plan, &qs).unwrap();
        let model = Model { config: &cfg, params: &params, plan: &plan, qs: &qs, eff: &eff };
        let out =
            model.forward(&[vec![3]], ForwardOpts { trace: true, ..Default::default() }).unwrap();
        let trace = out.trace.unwrap();
        for a in &trace.examples[0].layers[0].attn {
            assert_eq!(a.shape(), &[1, 1]);
            assert_eq!(a.data(), &[1.0]);
        }
    }

    #[test]
    fn zero_qk_weights_give_uniform_attention() {
        let cfg = tiny_config(1);
        let (mut params, plan, qs) = float_model_parts(&cfg, 2);
        params.layers[0].wq.data_mut().fill(0.0);
        params.layers[0].wk.data_mut().fill(0.0);
        let eff = EffectiveWeights::build(&params, &plan, &qs).unwrap();
        let model = Model { config: &cfg, params: &params, plan: &plan, qs: &qs, eff: &eff };
        let out = model
            .forward(&[vec![1, 2, 3, 4]], ForwardOpts { trace: true, ..Default::default() })
            .unwrap();
        let trace = out.trace.unwrap();
        for a in &trace.examples[0].layers[0].attn {
            for &v in a.data() {
                assert!((v - 0.25).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_matches_direct_formula_oracle() {
        let cfg = tiny_config(1);
        let (params, plan, qs) = float_model_parts(&cfg, 3);
        let eff = EffectiveWeights::build(&params, &plan, &qs).unwrap();
        let model = Model { config: &cfg, params: &params, plan: &plan, qs: &qs, eff: &eff };
        let tokens = vec![1u32, 5, 9];
        let out = model
            .forward(&[tokens.clone()], ForwardOpts { trace: true, ..Default::default() })
            .unwrap();
        let trace = out.trace.unwrap();
        let lt = &trace.examples[0].layers[0];
        let dk = cfg.head_dim();
        for a in 0..cfg.heads {
            let qa = lt.q.col_slice(a * dk, (a + 1) * dk);
            let ka = lt.k.col_slice(a * dk, (a + 1) * dk);
            // standalone oracle: softmax(q k^T / sqrt(dk)) row by row in f64
            for i in 0..3 {
                let mut scores = Vec::new();
                for j in 0..3 {
                    let mut s = 0.0f64;
                    for c in 0..dk {
                        s += qa.at(i, c) as f64 * ka.at(j, c) as f64;
                    }
                    scores.push(s / (dk as f64).sqrt());
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for j in 0..3 {
                    let want = exps[j] / sum;
                    assert!(
                        ((lt.attn[a].at(i, j) as f64) - want).abs() < 1e-5,
                        "head {} ({}, {})",
                        a,
                        i,
                        j
                    );
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = tiny_config(2);
        let (params, plan, qs) = float_model_parts(&cfg, 4);
        let eff = EffectiveWeights::build(&params, &plan, &qs).unwrap();
        let model = Model { config: &cfg, params: &params, plan: &plan, qs: &qs, eff: &eff };
        let out = model
            .forward(&batch(&cfg, 3, 5), ForwardOpts { trace: true, ..Default::default() })
            .unwrap();
        for ex in &out.trace.unwrap().examples {
            for lt in &ex.layers {
                for a in &lt.attn {
                    for i in 0..a.rows() {
                        let s: f32 = a.row(i).iter().sum();
                        assert!((s - 1.0).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn capture_does_not_change_logits() {
        let cfg = tiny_config(2);
        let (params, plan, qs) = float_model_parts(&cfg, 6);
        let eff = EffectiveWeights::build(&params, &plan, &qs).unwrap();
        let model = Model { config: &cfg, params: &params, plan: &plan, qs: &qs, eff: &eff };
        let b = batch(&cfg, 4, 7);
        let with = model.forward(&b, ForwardOpts { trace: true, ..Default::default() }).unwrap();
        let without = model.forward(&b, ForwardOpts::default()).unwrap();
        assert_eq!(with.logits.data(), without.logits.data());
    }

    #[test]
    fn forward_deterministic_across_runs() {
        let cfg = tiny_config(2);
        let (params, plan, qs) = float_model_parts(&cfg, 8);
        let eff = EffectiveWeights::build(&params, &plan, &qs).unwrap();
        let model = Model { config: &cfg, params: &params, plan: &plan, qs: &qs, eff: &eff };
        let b = batch(&cfg, 4, 9);
        let o1 = model.forward(&b, ForwardOpts::default()).unwrap();
        let o2 = model.forward(&b, ForwardOpts::default()).unwrap();
        assert_eq!(o1.logits.data(), o2.logits.data());
    }

    #[test]
    fn zero_layer_config_is_head_of_pooled_embeddings() {
        let cfg = tiny_config(0);
        let (params, plan, qs) = float_model_parts(&cfg, 10);
        let eff = EffectiveWeights::build(&params, &plan, &qs).unwrap();
        let model = Model { config: &cfg, params: &params, plan: &plan, qs: &qs, eff: &eff };
        let tokens = vec![1u32, 2, 3];
        let out = model.forward(&[tokens.clone()], ForwardOpts::default()).unwrap();
        // oracle: head(mean(embeddings))
        let emb = model.embed(&tokens).unwrap();
        let pooled = Tensor::new(vec![1, cfg.hidden], emb.mean_rows().data().to_vec()).unwrap();
        let want = linear(&pooled, &params.head_w, &params.head_b).unwrap();
        assert_eq!(out.logits.data(), want.data());
    }

    #[test]
    fn out_of_range_token_errors() {
        let cfg = tiny_config(1);
        let (params, plan, qs) = float_model_parts(&cfg, 11);
        let eff = EffectiveWeights::build(&params, &plan, &qs).unwrap();
        let model = Model { config: &cfg, params: &params, plan: &plan, qs: &qs, eff: &eff };
        assert!(model.forward(&[vec![99]], ForwardOpts::default()).is_err());
        assert!(model.forward(&[vec![0; 7]], ForwardOpts::default()).is_err());
    }

    #[test]
    fn all_float_plan_is_bit_identical_to_reference_path() {
        // A populated scale set must not change anything while the plan says
        // float32: precision alone disables the quantization path.
        let cfg = tiny_config(2);
        let (params, plan, qs) = float_model_parts(&cfg, 12);
        let b = batch(&cfg, 3, 13);
        let eff = EffectiveWeights::build(&params, &plan, &qs).unwrap();
        let model = Model { config: &cfg, params: &params, plan: &plan, qs: &qs, eff: &eff };
        let reference = model.forward(&b, ForwardOpts::default()).unwrap();

        let qs2 = calibrated_qs(&cfg, &params, Precision::Int8, &b);
        let eff2 = EffectiveWeights::build(&params, &plan, &qs2).unwrap();
        let model2 = Model { config: &cfg, params: &params, plan: &plan, qs: &qs2, eff: &eff2 };
        let with_scales = model2.forward(&b, ForwardOpts::default()).unwrap();
        assert_eq!(reference.logits.data(), with_scales.logits.data());
    }

    #[test]
    fn int8_beats_int4_and_both_stay_close_to_float() {
        let cfg = tiny_config(2);
        let (params, _, _) = float_model_parts(&cfg, 14);
        let b = batch(&cfg, 4, 15);

        let float_plan = LayerBitConfig::all_float(cfg.layers);
        let empty = QsSet::empty(cfg.layers);
        let eff = EffectiveWeights::build(&params, &float_plan, &empty).unwrap();
        let fmodel =
            Model { config: &cfg, params: &params, plan: &float_plan, qs: &empty, eff: &eff };
        let float_h =
            fmodel.forward(&b, ForwardOpts { trace: true, ..Default::default() }).unwrap();

        let mut rms = Vec::new();
        for precision in [Precision::Int8, Precision::Int4] {
            let plan = LayerBitConfig { per_layer: vec![precision; cfg.layers] };
            let qs = calibrated_qs(&cfg, &params, precision, &b);
            let eff_q = EffectiveWeights::build(&params, &plan, &qs).unwrap();
            let qmodel = Model { config: &cfg, params: &params, plan: &plan, qs: &qs, eff: &eff_q };
            let out =
                qmodel.forward(&b, ForwardOpts { trace: true, ..Default::default() }).unwrap();
            // compare final hidden states, which see every quantized GEMM
            let ft = float_h.trace.as_ref().unwrap();
            let qt = out.trace.unwrap();
            let mut err = 0.0f64;
            let mut n = 0usize;
            for (fe, qe) in ft.examples.iter().zip(&qt.examples) {
                let d = fe.final_hidden.sub(&qe.final_hidden).unwrap();
                err += d.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                n += d.len();
            }
            rms.push((err / n as f64).sqrt());
        }
        assert!(rms[0] < 0.05, "int8 rms {} too large", rms[0]);
        assert!(rms[1] > rms[0], "int4 rms {} not larger than int8 {}", rms[1], rms[0]);
    }

    #[test]
    fn quantized_plan_keeps_trace_shapes() {
        let cfg = tiny_config(2);
        let (params, _, _) = float_model_parts(&cfg, 16);
        let b = batch(&cfg, 2, 17);
        let shapes = |plan: &LayerBitConfig, qs: &QsSet| -> Vec<Vec<usize>> {
            let eff = EffectiveWeights::build(&params, plan, qs).unwrap();
            let model = Model { config: &cfg, params: &params, plan, qs, eff: &eff };
            let out = model.forward(&b, ForwardOpts { trace: true, ..Default::default() }).unwrap();
            let mut all = Vec::new();
            for ex in out.trace.unwrap().examples {
                for lt in ex.layers {
                    all.push(lt.q.shape().to_vec());
                    all.push(lt.concat.shape().to_vec());
                    for a in lt.attn {
                        all.push(a.shape().to_vec());
                    }
                    all.push(lt.ffn_pre.shape().to_vec());
                }
            }
            all
        };
        let float_plan = LayerBitConfig::all_float(cfg.layers);
        let qs4 = calibrated_qs(&cfg, &params, Precision::Int4, &b);
        let plan4 = LayerBitConfig { per_layer: vec![Precision::Int4; cfg.layers] };
        assert_eq!(shapes(&float_plan, &QsSet::empty(cfg.layers)), shapes(&plan4, &qs4));
    }

    #[test]
    fn zero_upstream_gradient_zeroes_parameter_grads() {
        let cfg = tiny_config(2);
        let (params, plan, qs) = float_model_parts(&cfg, 18);
        let eff = EffectiveWeights::build(&params, &plan, &qs).unwrap();
        let model = Model { config: &cfg, params: &params, plan: &plan, qs: &qs, eff: &eff };
        let b = batch(&cfg, 2, 19);
        let out = model.forward(&b, ForwardOpts { trace: true, ..Default::default() }).unwrap();
        let zeros = TraceGrads::from_logits(Tensor::zeros(&[2, cfg.num_classes]), cfg.layers);
        let (grads, _) = model.backward(out.trace.as_ref().unwrap(), &zeros).unwrap();
        for t in grads.tensors() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scale_gradients_are_local_even_with_zero_upstream() {
        // The scale rules depend only on the quantizer's input, so a zero
        // upstream signal still produces the quantization-error gradient.
        let cfg = tiny_config(2);
        let (params, _, _) = float_model_parts(&cfg, 22);
        let b = batch(&cfg, 2, 23);
        let plan = LayerBitConfig { per_layer: vec![Precision::Int8; cfg.layers] };
        let qs = calibrated_qs(&cfg, &params, Precision::Int8, &b);
        let eff = EffectiveWeights::build(&params, &plan, &qs).unwrap();
        let model = Model { config: &cfg, params: &params, plan: &plan, qs: &qs, eff: &eff };
        let out = model.forward(&b, ForwardOpts { trace: true, ..Default::default() }).unwrap();
        let zeros = TraceGrads::from_logits(Tensor::zeros(&[2, cfg.num_classes]), cfg.layers);
        let (grads, scale_grads) = model.backward(out.trace.as_ref().unwrap(), &zeros).unwrap();
        for t in grads.tensors() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        let lsg = scale_grads.layers[0].as_ref().unwrap();
        let w = params.layers[0].weight(GemmSlot::Query);
        let want = scale_grad(w, &qs.layer(0).unwrap().slot(GemmSlot::Query).weight).unwrap();
        assert_eq!(lsg.slots[GemmSlot::Query.index()].weight, want);
    }

    // Quick f32 finite-difference smoke test of the full backward; the
    // rigorous f64-reference check lives in the acceptance suite.
    #[test]
    fn backward_roughly_matches_f32_finite_differences() {
        let cfg = tiny_config(2);
        let (params, plan, qs) = float_model_parts(&cfg, 30);
        let b = batch(&cfg, 2, 31);
        let labels = [0usize, 2usize];

        let loss_of = |p: &EncoderParams| -> f64 {
            let eff = EffectiveWeights::build(p, &plan, &qs).unwrap();
            let model = Model { config: &cfg, params: p, plan: &plan, qs: &qs, eff: &eff };
            let out = model.forward(&b, ForwardOpts::default()).unwrap();
            let probs = softmax_rows(&out.logits);
            let mut loss = 0.0f64;
            for (i, &lab) in labels.iter().enumerate() {
                loss -= (probs.at(i, lab).max(1e-12) as f64).ln();
            }
            loss / labels.len() as f64
        };

        let eff = EffectiveWeights::build(&params, &plan, &qs).unwrap();
        let model = Model { config: &cfg, params: &params, plan: &plan, qs: &qs, eff: &eff };
        let out = model.forward(&b, ForwardOpts { trace: true, ..Default::default() }).unwrap();
        let probs = softmax_rows(&out.logits);
        let mut dlogits = probs.clone();
        for (i, &lab) in labels.iter().enumerate() {
            let row = dlogits.row_mut(i);
            row[lab] -= 1.0;
            for v in row.iter_mut() {
                *v /= labels.len() as f32;
            }
        }
        let tg = TraceGrads::from_logits(dlogits, cfg.layers);
        let (grads, _) = model.backward(out.trace.as_ref().unwrap(), &tg).unwrap();

        // spot-check a spread of parameters in every tensor
        let grad_list = grads.tensors();
        let param_list = params.tensors();
        let h = 2e-3f32;
        for (ti, g) in grad_list.iter().enumerate() {
            let n = g.len();
            for &idx in &[0usize, n / 2, n - 1] {
                let mut pp = params.clone();
                pp.tensors_mut()[ti].data_mut()[idx] += h;
                let lp = loss_of(&pp);
                let mut pm = params.clone();
                pm.tensors_mut()[ti].data_mut()[idx] -= h;
                let lm = loss_of(&pm);
                let fd = (lp - lm) / (2.0 * h as f64);
                let gv = g.data()[idx] as f64;
                let denom = fd.abs().max(gv.abs()).max(5e-3);
                assert!(
                    (fd - gv).abs() / denom < 3e-2,
                    "tensor {} ({} elems) idx {}: fd {} vs grad {}",
                    ti,
                    param_list[ti].len(),
                    idx,
                    fd,
                    gv
                );
            }
        }
    }

    #[test]
    fn backward_errors_without_matching_injections() {
        let cfg = tiny_config(2);
        let (params, plan, qs) = float_model_parts(&cfg, 20);
        let eff = EffectiveWeights::build(&params, &plan, &qs).unwrap();
        let model = Model { config: &cfg, params: &params, plan: &plan, qs: &qs, eff: &eff };
        let b = batch(&cfg, 2, 21);
        let out = model.forward(&b, ForwardOpts { trace: true, ..Default::default() }).unwrap();
        let bad = TraceGrads { logits: Tensor::zeros(&[2, cfg.num_classes]), layers: vec![] };
        assert!(model.backward(out.trace.as_ref().unwrap(), &bad).is_err());
    }
}
