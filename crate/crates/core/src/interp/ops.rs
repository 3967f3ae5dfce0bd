//! Kernels for the supported operators.

use super::RunError;
use crate::qmath::{to_fp16, ElemType, QTensor, TensorData, F16};

/// Upper bound on any intermediate tensor, guarding against hostile shapes.
pub const MAX_ELEMENTS: usize = 1 << 26;

fn checked_len(shape: &[usize]) -> Result<usize, String> {
    crate::qmath::shape_len(shape)
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| format!("output shape {shape:?} is too large"))
}

fn fits_i32(v: i64) -> Option<i32> {
    i32::try_from(v).ok()
}

fn scalar_zero_point(zp: Option<&QTensor>) -> Result<i64, String> {
    match zp {
        None => Ok(0),
        Some(t) => t
            .to_i64_vec()
            .filter(|v| v.len() == 1)
            .map(|v| v[0])
            .ok_or_else(|| "zero point must be an integer scalar".to_string()),
    }
}

/// `MatMulInteger`: `[.., M, K] x [K, N] -> [.., M, N]`, exact 64-bit
/// accumulation with an int32 fit check.
pub(crate) fn matmul_integer(
    a: &QTensor,
    b: &QTensor,
    a_zp: Option<&QTensor>,
    b_zp: Option<&QTensor>,
) -> Result<QTensor, RunError> {
    let plain = |m: String| RunError::Unsupported(m);
    let av = a.to_i64_vec().ok_or_else(|| plain("A must be integer".into()))?;
    let bv = b.to_i64_vec().ok_or_else(|| plain("B must be integer".into()))?;
    let azp = scalar_zero_point(a_zp).map_err(plain)?;
    let bzp = scalar_zero_point(b_zp).map_err(plain)?;
    if b.rank() != 2 {
        return Err(plain(format!("B must be rank 2, got {:?}", b.shape())));
    }
    let (k, n) = (b.shape()[0], b.shape()[1]);
    let (batch_shape, m, ka) = match a.shape() {
        [ka] => (&[][..], 1, *ka),
        [rest @ .., m, ka] => (rest, *m, *ka),
        [] => return Err(plain("A must have rank >= 1".into())),
    };
    if ka != k {
        return Err(RunError::Shape(format!(
            "MatMulInteger inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out_shape: Vec<usize> = batch_shape.to_vec();
    if a.rank() > 1 {
        out_shape.push(m);
    }
    out_shape.push(n);
    let total = checked_len(&out_shape).map_err(RunError::Shape)?;
    let batches = total / (m * n).max(1);

    let mut out = Vec::with_capacity(total);
    for bi in 0..batches {
        let a_base = bi * m * k;
        for row in 0..m {
            for col in 0..n {
                let mut acc: i64 = 0;
                for kk in 0..k {
                    acc += (av[a_base + row * k + kk] - azp) * (bv[kk * n + col] - bzp);
                }
                out.push(fits_i32(acc).ok_or(RunError::Overflow(String::new()))?);
            }
        }
    }
    Ok(QTensor::from_i32(out_shape, out).expect("length matches shape"))
}

pub(crate) struct ConvParams {
    pub strides: [usize; 2],
    pub pads: [usize; 4],
}

/// `ConvInteger`: NCHW cross-correlation, group 1, dilation 1. Padding takes
/// the input zero point, so padded taps contribute nothing.
pub(crate) fn conv_integer(
    x: &QTensor,
    w: &QTensor,
    x_zp: Option<&QTensor>,
    w_zp: Option<&QTensor>,
    p: &ConvParams,
) -> Result<QTensor, RunError> {
    let plain = |m: String| RunError::Unsupported(m);
    let xv = x.to_i64_vec().ok_or_else(|| plain("X must be integer".into()))?;
    let wv = w.to_i64_vec().ok_or_else(|| plain("W must be integer".into()))?;
    let xzp = scalar_zero_point(x_zp).map_err(plain)?;
    let wzp = scalar_zero_point(w_zp).map_err(plain)?;
    let (&[n, c, h, wd], &[m, wc, kh, kw]) = (x.shape(), w.shape()) else {
        return Err(plain(format!(
            "ConvInteger needs rank-4 X and W, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    };
    if c != wc {
        return Err(RunError::Shape(format!("input has {c} channels, weights expect {wc}")));
    }
    let [sh, sw] = p.strides;
    let [pt, pl, pb, pr] = p.pads;
    let ph = h.checked_add(pt).and_then(|v| v.checked_add(pb));
    let pw = wd.checked_add(pl).and_then(|v| v.checked_add(pr));
    let (Some(ph), Some(pw)) = (ph, pw) else {
        return Err(RunError::Shape("padding overflows".into()));
    };
    if ph < kh || pw < kw || sh == 0 || sw == 0 {
        return Err(RunError::Shape("kernel does not fit the padded input".into()));
    }
    let oh = (ph - kh) / sh + 1;
    let ow = (pw - kw) / sw + 1;
    let out_shape = vec![n, m, oh, ow];
    let total = checked_len(&out_shape).map_err(RunError::Shape)?;

    let mut out = Vec::with_capacity(total);
    for b in 0..n {
        for oc in 0..m {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc: i64 = 0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * sh + ky) as isize - pt as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx) as isize - pl as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * c + ic) * h + iy as usize) * wd + ix as usize;
                                let wi = ((oc * c + ic) * kh + ky) * kw + kx;
                                acc += (xv[xi] - xzp) * (wv[wi] - wzp);
                            }
                        }
                    }
                    out.push(fits_i32(acc).ok_or(RunError::Overflow(String::new()))?);
                }
            }
        }
    }
    Ok(QTensor::from_i32(out_shape, out).expect("length matches shape"))
}

/// Multidirectional (numpy) broadcast shape.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        let off = rank - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    (0..rank)
        .map(|i| match (dim(a, i), dim(b, i)) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each output element, the flat index into an operand of `shape`.
fn broadcast_indices(out: &[usize], shape: &[usize]) -> Vec<usize> {
    let total: usize = out.iter().product();
    let off = out.len() - shape.len();
    // operand strides aligned to the output rank; broadcast dims get 0
    let mut strides = vec![0usize; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let mut idx = vec![0usize; out.len()];
    let mut result = Vec::with_capacity(total);
    for _ in 0..total {
        result.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    result
}

#[derive(Clone, Copy)]
pub(crate) enum Binary {
    Add,
    Mul,
}

pub(crate) fn binary(op: Binary, a: &QTensor, b: &QTensor) -> Result<QTensor, RunError> {
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        RunError::Shape(format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
    })?;
    checked_len(&shape).map_err(RunError::Shape)?;
    let ia = broadcast_indices(&shape, a.shape());
    let ib = broadcast_indices(&shape, b.shape());
    let data = match (a.data(), b.data()) {
        (TensorData::I32(x), TensorData::I32(y)) => {
            let mut out = Vec::with_capacity(ia.len());
            for (&i, &j) in ia.iter().zip(&ib) {
                let v = match op {
                    Binary::Add => x[i].checked_add(y[j]),
                    Binary::Mul => x[i].checked_mul(y[j]),
                };
                out.push(v.ok_or(RunError::Overflow(String::new()))?);
            }
            TensorData::I32(out)
        }
        (TensorData::F32(x), TensorData::F32(y)) => TensorData::F32(
            ia.iter()
                .zip(&ib)
                .map(|(&i, &j)| match op {
                    Binary::Add => x[i] + y[j],
                    Binary::Mul => x[i] * y[j],
                })
                .collect(),
        ),
        (TensorData::F16(x), TensorData::F16(y)) => TensorData::F16(
            ia.iter()
                .zip(&ib)
                .map(|(&i, &j)| {
                    let (p, q) = (x[i].to_f32(), y[j].to_f32());
                    // binary16 products are exact in f32; sums are exact in f64
                    match op {
                        Binary::Add => to_fp16((p as f64 + q as f64) as f32),
                        Binary::Mul => to_fp16(p * q),
                    }
                })
                .collect(),
        ),
        _ => {
            return Err(RunError::Unsupported(format!(
                "operands {} and {} are not a supported pair",
                a.dtype(),
                b.dtype()
            )))
        }
    };
    Ok(QTensor::new(shape, data).expect("length matches shape"))
}

/// `Cast`. Integer to float rounds to nearest even; `inexact` counts int32
/// values beyond 2^24 that did not survive exactly.
pub(crate) fn cast(x: &QTensor, to: ElemType, inexact: &mut usize) -> QTensor {
    let n = x.len();
    let as_f32 = |i: usize| -> f32 {
        match x.data() {
            TensorData::I8(v) => v[i] as f32,
            TensorData::U8(v) => v[i] as f32,
            TensorData::I32(v) => v[i] as f32,
            TensorData::F32(v) => v[i],
            TensorData::F16(v) => v[i].to_f32(),
        }
    };
    if let TensorData::I32(v) = x.data() {
        if to.is_float() {
            *inexact += v.iter().filter(|&&i| (i as f32) as i64 != i as i64).count();
        }
    }
    let as_i64 = |i: usize| -> i64 {
        match x.data() {
            TensorData::I8(v) => v[i] as i64,
            TensorData::U8(v) => v[i] as i64,
            TensorData::I32(v) => v[i] as i64,
            // truncation toward zero, saturating
            TensorData::F32(v) => v[i] as i64,
            TensorData::F16(v) => v[i].to_f32() as i64,
        }
    };
    let data = match to {
        ElemType::F32 => TensorData::F32((0..n).map(as_f32).collect()),
        ElemType::F16 => TensorData::F16((0..n).map(|i| to_fp16(as_f32(i))).collect()),
        ElemType::I8 => TensorData::I8((0..n).map(|i| as_i64(i) as i8).collect()),
        ElemType::U8 => TensorData::U8((0..n).map(|i| as_i64(i) as u8).collect()),
        ElemType::I32 => TensorData::I32((0..n).map(|i| as_i64(i) as i32).collect()),
    };
    QTensor::new(x.shape().to_vec(), data).expect("same length")
}

/// `QuantizeLinear` with per-tensor scale and zero point:
/// `saturate(round_half_even(x / scale) + zero_point)`.
pub(crate) fn quantize_linear(x: &QTensor, scale: f32, zp: Option<&QTensor>) -> Result<QTensor, RunError> {
    let out_type = zp.map_or(ElemType::U8, QTensor::dtype);
    let zero = scalar_zero_point(zp).map_err(RunError::Unsupported)? as f32;
    let (lo, hi) = out_type
        .int_range()
        .filter(|_| matches!(out_type, ElemType::I8 | ElemType::U8))
        .ok_or_else(|| RunError::Unsupported(format!("zero point type {out_type}")))?;
    let mut codes = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = match x.data() {
            TensorData::F32(v) => v[i],
            TensorData::F16(v) => v[i].to_f32(),
            TensorData::I32(v) => v[i] as f32,
            _ => return Err(RunError::Unsupported(format!("QuantizeLinear on {}", x.dtype()))),
        };
        if v.is_nan() {
            return Err(RunError::Domain(String::new()));
        }
        let q = (v / scale).round_ties_even() + zero;
        codes.push(q.clamp(lo as f32, hi as f32) as i32);
    }
    let data = match out_type {
        ElemType::I8 => TensorData::I8(codes.into_iter().map(|c| c as i8).collect()),
        _ => TensorData::U8(codes.into_iter().map(|c| c as u8).collect()),
    };
    Ok(QTensor::new(x.shape().to_vec(), data).expect("same length"))
}

pub(crate) fn relu(x: &QTensor) -> QTensor {
    let data = match x.data() {
        TensorData::I8(v) => TensorData::I8(v.iter().map(|&a| a.max(0)).collect()),
        TensorData::U8(v) => TensorData::U8(v.clone()),
        TensorData::I32(v) => TensorData::I32(v.iter().map(|&a| a.max(0)).collect()),
        TensorData::F32(v) => TensorData::F32(v.iter().map(|&a| if a < 0.0 { 0.0 } else { a }).collect()),
        TensorData::F16(v) => TensorData::F16(
            v.iter()
                .map(|&a| if a.to_f32() < 0.0 { F16::from_bits(0) } else { a })
                .collect(),
        ),
    };
    QTensor::new(x.shape().to_vec(), data).expect("same length")
}

pub(crate) fn sigmoid_f32(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Elementwise float function; binary16 inputs are widened, evaluated in
/// f32 and rounded back.
pub(crate) fn unary_float(x: &QTensor, f: fn(f32) -> f32) -> Result<QTensor, RunError> {
    let data = match x.data() {
        TensorData::F32(v) => TensorData::F32(v.iter().map(|&a| f(a)).collect()),
        TensorData::F16(v) => TensorData::F16(v.iter().map(|&a| to_fp16(f(a.to_f32()))).collect()),
        _ => return Err(RunError::Unsupported(format!("float activation on {}", x.dtype()))),
    };
    Ok(QTensor::new(x.shape().to_vec(), data).expect("same length"))
}
