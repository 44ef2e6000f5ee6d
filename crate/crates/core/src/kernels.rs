//! Integer inference kernels: nibble-packed int4 matrices, int8 matrices,
//! exact int4/int8 GEMM with i32 accumulation, and the dequantizing
//! epilogue that turns accumulators back into floats.
//!
//! Code ranges follow the symmetric k-bit quantizer: [-7, 8] for int4 and
//! [-127, 128] for int8. Neither +8 nor +128 fits plain two's complement at
//! its width, so the all-ones-sign pattern (0x8 nibble, 0x80 byte) encodes
//! the positive endpoint; the would-be minimum (-8 / -128) is not a valid
//! code and is rejected at pack/encode time.
//!
//! Both GEMMs decode their operands into i16 panels and share one blocked
//! i32 inner kernel, so the int4 path pays only the O(m*k + n*k) unpack cost
//! over int8 and stays bit-exact against a naive unpack-then-multiply
//! oracle (integer addition is order-independent).

use crate::error::{Error, Result};
use crate::quant::IntTensor;
use crate::tensor::Tensor;

/// Row-major i32 matrix, the GEMM accumulator type.
#[derive(Debug, Clone, PartialEq)]
pub struct Int32Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl Int32Matrix {
    pub fn at(&self, i: usize, j: usize) -> i32 {
        self.data[i * self.cols + j]
    }
}

#[inline]
fn encode_nibble(code: i32) -> u8 {
    (code & 0x0F) as u8
}

#[inline]
pub fn decode_nibble(n: u8) -> i32 {
    if n == 0x8 {
        8
    } else if n & 0x8 != 0 {
        n as i32 - 16
    } else {
        n as i32
    }
}

#[inline]
pub fn encode_i8(code: i32) -> Result<i8> {
    match code {
        128 => Ok(i8::MIN),
        -127..=127 => Ok(code as i8),
        _ => Err(Error::contract(format!("int8 code {} outside [-127, 128]", code))),
    }
}

#[inline]
pub fn decode_i8(b: i8) -> i32 {
    if b == i8::MIN {
        128
    } else {
        b as i32
    }
}

/// Nibble-packed int4 matrix: two codes per byte, low nibble = even column,
/// odd trailing nibble zero-padded. Row scales dequantize the codes.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedInt4Matrix {
    rows: usize,
    cols: usize,
    bytes: Vec<u8>,
    row_scales: Vec<f32>,
}

impl PackedInt4Matrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn row_scales(&self) -> &[f32] {
        &self.row_scales
    }

    /// Storage used by the codes themselves: rows * ceil(cols/2) bytes.
    pub fn code_bytes(&self) -> usize {
        self.bytes.len()
    }

    pub fn get(&self, i: usize, j: usize) -> i32 {
        let byte = self.bytes[i * self.cols.div_ceil(2) + j / 2];
        let nib = if j % 2 == 0 { byte & 0x0F } else { byte >> 4 };
        decode_nibble(nib)
    }

    pub fn unpack(&self) -> IntTensor {
        let mut codes = Vec::with_capacity(self.rows * self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                codes.push(self.get(i, j));
            }
        }
        IntTensor { shape: vec![self.rows, self.cols], codes }
    }

    pub(crate) fn from_parts(
        rows: usize,
        cols: usize,
        bytes: Vec<u8>,
        row_scales: Vec<f32>,
    ) -> Result<Self> {
        if bytes.len() != rows * cols.div_ceil(2) || row_scales.len() != rows {
            return Err(Error::shape("packed int4 buffer sizes inconsistent".to_string()));
        }
        Ok(Self { rows, cols, bytes, row_scales })
    }

    fn decode_row_i16(&self, i: usize, out: &mut [i16]) {
        let stride = self.cols.div_ceil(2);
        let row = &self.bytes[i * stride..(i + 1) * stride];
        for j in 0..self.cols {
            let byte = row[j / 2];
            let nib = if j % 2 == 0 { byte & 0x0F } else { byte >> 4 };
            out[j] = decode_nibble(nib) as i16;
        }
    }
}

/// Packs integer codes in [-7, 8] into nibbles. Out-of-range codes error.
pub fn pack_int4(codes: &IntTensor, row_scales: Vec<f32>) -> Result<PackedInt4Matrix> {
    if codes.shape.len() != 2 {
        return Err(Error::shape("pack_int4 expects a 2-D code matrix".to_string()));
    }
    let (rows, cols) = (codes.shape[0], codes.shape[1]);
    if row_scales.len() != rows {
        return Err(Error::shape(format!(
            "{} row scales for {} rows",
            row_scales.len(),
            rows
        )));
    }
    if let Some(&bad) = codes.codes.iter().find(|&&c| !(-7..=8).contains(&c)) {
        return Err(Error::contract(format!("int4 code {} outside [-7, 8]", bad)));
    }
    let stride = cols.div_ceil(2);
    let mut bytes = vec![0u8; rows * stride];
    for i in 0..rows {
        for j in 0..cols {
            let nib = encode_nibble(codes.codes[i * cols + j]);
            let b = &mut bytes[i * stride + j / 2];
            if j % 2 == 0 {
                *b |= nib;
            } else {
                *b |= nib << 4;
            }
        }
    }
    Ok(PackedInt4Matrix { rows, cols, bytes, row_scales })
}

/// Int8 code matrix with per-row scales. i8::MIN in storage encodes +128.
#[derive(Debug, Clone, PartialEq)]
pub struct Int8Matrix {
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
    row_scales: Vec<f32>,
}

impl Int8Matrix {
    pub fn from_codes(codes: &IntTensor, row_scales: Vec<f32>) -> Result<Self> {
        if codes.shape.len() != 2 {
            return Err(Error::shape("Int8Matrix expects a 2-D code matrix".to_string()));
        }
        let (rows, cols) = (codes.shape[0], codes.shape[1]);
        if row_scales.len() != rows {
            return Err(Error::shape(format!(
                "{} row scales for {} rows",
                row_scales.len(),
                rows
            )));
        }
        let encoded = codes.codes.iter().map(|&c| encode_i8(c)).collect::<Result<Vec<i8>>>()?;
        Ok(Self { rows, cols, codes: encoded, row_scales })
    }

    pub(crate) fn from_raw(
        rows: usize,
        cols: usize,
        codes: Vec<i8>,
        row_scales: Vec<f32>,
    ) -> Result<Self> {
        if codes.len() != rows * cols || row_scales.len() != rows {
            return Err(Error::shape("int8 buffer sizes inconsistent".to_string()));
        }
        Ok(Self { rows, cols, codes, row_scales })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_scales(&self) -> &[f32] {
        &self.row_scales
    }

    pub fn code_bytes(&self) -> usize {
        self.codes.len()
    }

    pub fn raw_codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn get(&self, i: usize, j: usize) -> i32 {
        decode_i8(self.codes[i * self.cols + j])
    }

    pub fn unpack(&self) -> IntTensor {
        IntTensor {
            shape: vec![self.rows, self.cols],
            codes: self.codes.iter().map(|&b| decode_i8(b)).collect(),
        }
    }

    fn decode_row_i16(&self, i: usize, out: &mut [i16]) {
        for (o, &b) in out.iter_mut().zip(&self.codes[i * self.cols..(i + 1) * self.cols]) {
            *o = decode_i8(b) as i16;
        }
    }
}

// Largest reduction depth that provably cannot overflow i32 accumulation.
fn check_k_bound(k: usize, max_abs: i64) -> Result<()> {
    let bound = (i32::MAX as i64) / (max_abs * max_abs);
    if k as i64 > bound {
        return Err(Error::Bound(format!(
            "reduction depth {} exceeds overflow-safe bound {} for |code| <= {}",
            k, bound, max_abs
        )));
    }
    Ok(())
}

/// out[i][j] = sum_k a[i][k] * b[j][k]; `b` is stored transposed (one row
/// per output column). Exact i32 arithmetic.
pub fn gemm_int4(a: &PackedInt4Matrix, b: &PackedInt4Matrix) -> Result<Int32Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!("inner dims {} vs {}", a.cols, b.cols)));
    }
    check_k_bound(a.cols, 8)?;
    let mut a16 = vec![0i16; a.rows * a.cols];
    for i in 0..a.rows {
        a.decode_row_i16(i, &mut a16[i * a.cols..(i + 1) * a.cols]);
    }
    let mut b16 = vec![0i16; b.rows * b.cols];
    for i in 0..b.rows {
        b.decode_row_i16(i, &mut b16[i * b.cols..(i + 1) * b.cols]);
    }
    Ok(gemm_i16(&a16, &b16, a.rows, b.rows, a.cols))
}

/// int8 variant of `gemm_int4`; same layout conventions.
pub fn gemm_int8(a: &Int8Matrix, b: &Int8Matrix) -> Result<Int32Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!("inner dims {} vs {}", a.cols, b.cols)));
    }
    check_k_bound(a.cols, 128)?;
    let mut a16 = vec![0i16; a.rows * a.cols];
    for i in 0..a.rows {
        a.decode_row_i16(i, &mut a16[i * a.cols..(i + 1) * a.cols]);
    }
    let mut b16 = vec![0i16; b.rows * b.cols];
    for i in 0..b.rows {
        b.decode_row_i16(i, &mut b16[i * b.cols..(i + 1) * b.cols]);
    }
    Ok(gemm_i16(&a16, &b16, a.rows, b.rows, a.cols))
}

// Shared inner kernel over decoded i16 panels. Unit-stride dot products the
// compiler can widen; integer adds reorder freely without changing results.
fn gemm_i16(a: &[i16], b: &[i16], m: usize, n: usize, k: usize) -> Int32Matrix {
    let mut out = vec![0i32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0i32;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += (x as i32) * (y as i32);
            }
            *o = acc;
        }
    }
    Int32Matrix { rows: m, cols: n, data: out }
}

/// float out[i][j] = acc[i][j] * s_a[i] * s_b[j] + bias[j].
/// A scale slice of length 1 broadcasts over its axis.
pub fn dequantize_epilogue(
    acc: &Int32Matrix,
    a_scales: &[f32],
    b_scales: &[f32],
    bias: Option<&[f32]>,
) -> Result<Tensor> {
    let scale_at = |scales: &[f32], i: usize| -> f32 {
        if scales.len() == 1 {
            scales[0]
        } else {
            scales[i]
        }
    };
    if a_scales.len() != 1 && a_scales.len() != acc.rows {
        return Err(Error::shape(format!("{} row scales for {} rows", a_scales.len(), acc.rows)));
    }
    if b_scales.len() != 1 && b_scales.len() != acc.cols {
        return Err(Error::shape(format!("{} col scales for {} cols", b_scales.len(), acc.cols)));
    }
    if let Some(b) = bias {
        if b.len() != acc.cols {
            return Err(Error::shape(format!("bias len {} for {} cols", b.len(), acc.cols)));
        }
    }
    let mut out = vec![0.0f32; acc.rows * acc.cols];
    for i in 0..acc.rows {
        let sa = scale_at(a_scales, i);
        for j in 0..acc.cols {
            let v = acc.data[i * acc.cols + j] as f32 * sa * scale_at(b_scales, j);
            out[i * acc.cols + j] = v + bias.map_or(0.0, |b| b[j]);
        }
    }
    Tensor::new(vec![acc.rows, acc.cols], out)
}
