//! Typed N-D tensors used for every quantized and float payload.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::fp16::F16;
use super::QuantError;

/// Element type of a tensor payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ElemType {
    I8,
    U8,
    I32,
    F32,
    F16,
}

impl ElemType {
    pub const ALL: [ElemType; 5] = [
        ElemType::I8,
        ElemType::U8,
        ElemType::I32,
        ElemType::F32,
        ElemType::F16,
    ];

    /// `TensorProto.DataType` code.
    pub fn onnx_code(self) -> i32 {
        match self {
            ElemType::F32 => 1,
            ElemType::U8 => 2,
            ElemType::I8 => 3,
            ElemType::I32 => 6,
            ElemType::F16 => 10,
        }
    }

    pub fn from_onnx_code(code: i64) -> Option<ElemType> {
        match code {
            1 => Some(ElemType::F32),
            2 => Some(ElemType::U8),
            3 => Some(ElemType::I8),
            6 => Some(ElemType::I32),
            10 => Some(ElemType::F16),
            _ => None,
        }
    }

    /// Name used in text documents.
    pub fn name(self) -> &'static str {
        match self {
            ElemType::I8 => "int8",
            ElemType::U8 => "uint8",
            ElemType::I32 => "int32",
            ElemType::F32 => "float32",
            ElemType::F16 => "float16",
        }
    }

    pub fn from_name(name: &str) -> Option<ElemType> {
        ElemType::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn size_bytes(self) -> usize {
        match self {
            ElemType::I8 | ElemType::U8 => 1,
            ElemType::F16 => 2,
            ElemType::I32 | ElemType::F32 => 4,
        }
    }

    /// Inclusive integer range, `None` for float types.
    pub fn int_range(self) -> Option<(i64, i64)> {
        match self {
            ElemType::I8 => Some((i8::MIN as i64, i8::MAX as i64)),
            ElemType::U8 => Some((0, u8::MAX as i64)),
            ElemType::I32 => Some((i32::MIN as i64, i32::MAX as i64)),
            ElemType::F32 | ElemType::F16 => None,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, ElemType::F32 | ElemType::F16)
    }
}

impl fmt::Display for ElemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Flat row-major payload. The variant determines the element type.
#[derive(Debug, Clone)]
pub enum TensorData {
    I8(Vec<i8>),
    U8(Vec<u8>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    F16(Vec<F16>),
}

impl TensorData {
    pub fn dtype(&self) -> ElemType {
        match self {
            TensorData::I8(_) => ElemType::I8,
            TensorData::U8(_) => ElemType::U8,
            TensorData::I32(_) => ElemType::I32,
            TensorData::F32(_) => ElemType::F32,
            TensorData::F16(_) => ElemType::F16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::I8(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Little-endian raw bytes, the form used for ONNX `raw_data`.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::I8(v) => v.iter().map(|&x| x as u8).collect(),
            TensorData::U8(v) => v.clone(),
            TensorData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F16(v) => v.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect(),
        }
    }

    /// Inverse of [`TensorData::to_le_bytes`]; `None` if the length is not a
    /// multiple of the element size.
    pub fn from_le_bytes(dtype: ElemType, bytes: &[u8]) -> Option<TensorData> {
        if !bytes.len().is_multiple_of(dtype.size_bytes()) {
            return None;
        }
        Some(match dtype {
            ElemType::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
            ElemType::U8 => TensorData::U8(bytes.to_vec()),
            ElemType::I32 => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            ElemType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            ElemType::F16 => TensorData::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| F16::from_bits(u16::from_le_bytes([c[0], c[1]])))
                    .collect(),
            ),
        })
    }

    /// Element `i` widened to f64 (exact for every supported type).
    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            TensorData::I8(v) => v[i] as f64,
            TensorData::U8(v) => v[i] as f64,
            TensorData::I32(v) => v[i] as f64,
            TensorData::F32(v) => v[i] as f64,
            TensorData::F16(v) => v[i].to_f32() as f64,
        }
    }
}

/// Payload equality is bitwise, so `-0.0 != 0.0` and NaN payloads compare
/// by their bits.
impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::I8(a), TensorData::I8(b)) => a == b,
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            (TensorData::I32(a), TensorData::I32(b)) => a == b,
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F16(a), TensorData::F16(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for TensorData {}

/// A typed tensor with a row-major payload. An empty shape is a scalar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    shape: Vec<usize>,
    data: TensorData,
}

/// Product of the extents, `None` on overflow.
pub fn shape_len(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl QTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<QTensor, QuantError> {
        let expected = shape_len(&shape).ok_or(QuantError::ShapeOverflow)?;
        if expected != data.len() {
            return Err(QuantError::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(QTensor { shape, data })
    }

    pub fn from_i8(shape: Vec<usize>, v: Vec<i8>) -> Result<QTensor, QuantError> {
        QTensor::new(shape, TensorData::I8(v))
    }

    pub fn from_u8(shape: Vec<usize>, v: Vec<u8>) -> Result<QTensor, QuantError> {
        QTensor::new(shape, TensorData::U8(v))
    }

    pub fn from_i32(shape: Vec<usize>, v: Vec<i32>) -> Result<QTensor, QuantError> {
        QTensor::new(shape, TensorData::I32(v))
    }

    pub fn from_f32(shape: Vec<usize>, v: Vec<f32>) -> Result<QTensor, QuantError> {
        QTensor::new(shape, TensorData::F32(v))
    }

    pub fn from_f16(shape: Vec<usize>, v: Vec<F16>) -> Result<QTensor, QuantError> {
        QTensor::new(shape, TensorData::F16(v))
    }

    pub fn scalar_f32(v: f32) -> QTensor {
        QTensor {
            shape: vec![],
            data: TensorData::F32(vec![v]),
        }
    }

    /// Zero scalar of an integer type, used as a QuantizeLinear zero point.
    pub fn zero_point(dtype: ElemType) -> QTensor {
        let data = match dtype {
            ElemType::I8 => TensorData::I8(vec![0]),
            ElemType::U8 => TensorData::U8(vec![0]),
            ElemType::I32 => TensorData::I32(vec![0]),
            ElemType::F32 => TensorData::F32(vec![0.0]),
            ElemType::F16 => TensorData::F16(vec![F16::from_bits(0)]),
        };
        QTensor {
            shape: vec![],
            data,
        }
    }

    pub fn dtype(&self) -> ElemType {
        self.data.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same payload under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<QTensor, QuantError> {
        QTensor::new(shape, self.data.clone())
    }

    /// The single element of a one-element tensor, widened to f64.
    pub fn scalar_value(&self) -> Option<f64> {
        (self.len() == 1).then(|| self.data.get_f64(0))
    }

    pub fn as_i8(&self) -> Option<&[i8]> {
        match &self.data {
            TensorData::I8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f16(&self) -> Option<&[F16]> {
        match &self.data {
            TensorData::F16(v) => Some(v),
            _ => None,
        }
    }

    /// Integer payload widened to i64; `None` for float tensors.
    pub fn to_i64_vec(&self) -> Option<Vec<i64>> {
        match &self.data {
            TensorData::I8(v) => Some(v.iter().map(|&x| x as i64).collect()),
            TensorData::U8(v) => Some(v.iter().map(|&x| x as i64).collect()),
            TensorData::I32(v) => Some(v.iter().map(|&x| x as i64).collect()),
            _ => None,
        }
    }
}
