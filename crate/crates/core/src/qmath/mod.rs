//! Symmetric quantization arithmetic.
//!
//! Real values relate to their quantized codes by `x = scale * x_q` with a
//! zero offset of 0. Everything here rounds half to even and saturates to
//! the target integer range.

mod fp16;
mod rescale;
mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fp16::{f64_to_fp16, from_fp16, to_fp16, F16};
pub use rescale::{
    apply_rescale_float, apply_rescale_int, decompose_rescale, exp2_neg_f32, neg_pow2_exponent,
    normalize_rescale, rescale_multiplier, RescaleSpec, MAX_QUANT_SCALE, MAX_SHIFT_BITS,
};
pub use tensor::{shape_len, ElemType, QTensor, TensorData};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("abs-max {0} is not a positive finite range")]
    InvalidRange(f32),
    #[error("scale {0} is not positive and finite")]
    InvalidScale(f32),
    #[error("NaN at element {index} cannot be quantized")]
    Domain { index: usize },
    #[error("{0} is not a quantized target type (expected int8 or uint8)")]
    UnsupportedTarget(ElemType),
    #[error("expected a {expected} tensor, got {got}")]
    DTypeMismatch { expected: String, got: ElemType },
    #[error("payload has {got} elements but the shape needs {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("shape element count overflows")]
    ShapeOverflow,
    #[error("multiplier {0} is not positive and finite")]
    InvalidMultiplier(f64),
    #[error("multiplier {0} >= 2^24 would need a left shift")]
    MultiplierTooLarge(f64),
    #[error("multiplier {0} needs a shift beyond 149 bits")]
    MultiplierTooSmall(f64),
    #[error("quant_scale {0} exceeds 2^24")]
    QuantScaleTooLarge(u32),
    #[error("shift of {0} bits is not representable as an f32 factor")]
    ShiftTooLarge(u32),
}

/// Real units per quantization step. Always positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f32", into = "f32")]
pub struct Scale(f32);

impl Scale {
    pub fn new(value: f32) -> Result<Scale, QuantError> {
        if value > 0.0 && value.is_finite() {
            Ok(Scale(value))
        } else {
            Err(QuantError::InvalidScale(value))
        }
    }

    pub fn value(self) -> f32 {
        self.0
    }
}

impl TryFrom<f32> for Scale {
    type Error = QuantError;

    fn try_from(v: f32) -> Result<Scale, QuantError> {
        Scale::new(v)
    }
}

impl From<Scale> for f32 {
    fn from(s: Scale) -> f32 {
        s.0
    }
}

fn check_target(target: ElemType) -> Result<(), QuantError> {
    match target {
        ElemType::I8 | ElemType::U8 => Ok(()),
        other => Err(QuantError::UnsupportedTarget(other)),
    }
}

/// Map `[-abs_max, abs_max]` onto the full grid: `abs_max / 127` for int8,
/// `abs_max / 255` for uint8.
pub fn compute_symmetric_scale(abs_max: f32, target: ElemType) -> Result<Scale, QuantError> {
    check_target(target)?;
    if !(abs_max > 0.0) || !abs_max.is_finite() {
        return Err(QuantError::InvalidRange(abs_max));
    }
    let steps = if target == ElemType::I8 { 127.0 } else { 255.0 };
    Scale::new(abs_max / steps).map_err(|_| QuantError::InvalidRange(abs_max))
}

/// `round_half_even(x / scale)` saturated to the int8 or uint8 range.
pub fn round_clip(x: f32, scale: Scale, zero_point_dtype: ElemType) -> Result<i32, QuantError> {
    check_target(zero_point_dtype)?;
    if x.is_nan() {
        return Err(QuantError::Domain { index: 0 });
    }
    let (lo, hi) = zero_point_dtype.int_range().expect("integer target");
    let q = (x / scale.value()).round_ties_even();
    Ok(q.clamp(lo as f32, hi as f32) as i32)
}

/// Elementwise [`round_clip`] of an f32 tensor.
pub fn quantize_tensor(x: &QTensor, scale: Scale, target: ElemType) -> Result<QTensor, QuantError> {
    check_target(target)?;
    let values = x.as_f32().ok_or(QuantError::DTypeMismatch {
        expected: "float32".into(),
        got: x.dtype(),
    })?;
    let mut codes = Vec::with_capacity(values.len());
    for (index, &v) in values.iter().enumerate() {
        codes.push(round_clip(v, scale, target).map_err(|_| QuantError::Domain { index })?);
    }
    let data = match target {
        ElemType::I8 => TensorData::I8(codes.into_iter().map(|c| c as i8).collect()),
        _ => TensorData::U8(codes.into_iter().map(|c| c as u8).collect()),
    };
    QTensor::new(x.shape().to_vec(), data)
}

/// `scale * x_q` elementwise, in f32.
pub fn dequantize_tensor(xq: &QTensor, scale: Scale) -> Result<QTensor, QuantError> {
    let codes = xq.to_i64_vec().ok_or(QuantError::DTypeMismatch {
        expected: "int8, uint8 or int32".into(),
        got: xq.dtype(),
    })?;
    let s = scale.value();
    let values = codes.into_iter().map(|c| s * c as f32).collect();
    QTensor::from_f32(xq.shape().to_vec(), values)
}

/// A quantized bias and the number of elements that hit the int32 rails.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBias {
    pub tensor: QTensor,
    pub saturated: usize,
}

/// Quantize a bias onto the accumulator grid `scale_w * scale_x`.
///
/// Saturation is not an error: it is logged as a warning and counted, since
/// it points at a calibration problem rather than a malformed model.
pub fn quantize_bias(b: &QTensor, scale_w: Scale, scale_x: Scale) -> Result<QuantizedBias, QuantError> {
    let values = b.as_f32().ok_or(QuantError::DTypeMismatch {
        expected: "float32".into(),
        got: b.dtype(),
    })?;
    let step = scale_w.value() as f64 * scale_x.value() as f64;
    let mut saturated = 0;
    let mut out = Vec::with_capacity(values.len());
    for (index, &v) in values.iter().enumerate() {
        if v.is_nan() {
            return Err(QuantError::Domain { index });
        }
        let q = (v as f64 / step).round_ties_even();
        if q < i32::MIN as f64 || q > i32::MAX as f64 {
            saturated += 1;
        }
        out.push(q.clamp(i32::MIN as f64, i32::MAX as f64) as i32);
    }
    if saturated > 0 {
        log::warn!("{saturated} bias element(s) saturated to the int32 range");
    }
    Ok(QuantizedBias {
        tensor: QTensor::from_i32(b.shape().to_vec(), out)?,
        saturated,
    })
}
