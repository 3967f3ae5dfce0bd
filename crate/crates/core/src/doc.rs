//! JSON documents: tensors, fp32 models, calibration profiles, layer
//! descriptors and reports.
//!
//! Tensor document:
//!
//! ```json
//! {"name": "x", "dtype": "int8", "shape": [1, 2], "data": [1, 2]}
//! ```
//!
//! A file may hold one tensor or an array of them. `dtype` is one of
//! `int8`, `uint8`, `int32`, `float32`, `float16`. Integer data must be
//! integral and in range; float data is rounded to the element type on load
//! and must stay finite. Non-finite values produced by a run are written as
//! `null`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::patterns::{ActivationSpec, HwLayerDescriptor, LayerKind, RescaleCodification};
use crate::qmath::{f64_to_fp16, ElemType, QTensor, TensorData};
use crate::quantizer::{CalibrationProfile, FloatModelSpec};

#[derive(Debug, Error)]
pub enum DocError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("tensor `{name}`: {reason}")]
    Tensor { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDocument {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(TensorDocument),
    Many(Vec<TensorDocument>),
}

impl TensorDocument {
    pub fn to_tensor(&self) -> Result<QTensor, DocError> {
        let fail = |reason: String| DocError::Tensor {
            name: self.name.clone(),
            reason,
        };
        let dtype = ElemType::from_name(&self.dtype).ok_or_else(|| fail(format!("unknown dtype `{}`", self.dtype)))?;
        if crate::qmath::shape_len(&self.shape) != Some(self.data.len()) {
            return Err(fail(format!("{} values for shape {:?}", self.data.len(), self.shape)));
        }
        let ints = || -> Result<Vec<i64>, DocError> {
            let (lo, hi) = dtype.int_range().expect("integer type");
            self.data
                .iter()
                .map(|&v| {
                    if v.fract() != 0.0 || v < lo as f64 || v > hi as f64 {
                        Err(fail(format!("{v} is not a valid {dtype}")))
                    } else {
                        Ok(v as i64)
                    }
                })
                .collect()
        };
        let data = match dtype {
            ElemType::I8 => TensorData::I8(ints()?.into_iter().map(|v| v as i8).collect()),
            ElemType::U8 => TensorData::U8(ints()?.into_iter().map(|v| v as u8).collect()),
            ElemType::I32 => TensorData::I32(ints()?.into_iter().map(|v| v as i32).collect()),
            ElemType::F32 => TensorData::F32(self.data.iter().map(|&v| v as f32).collect()),
            ElemType::F16 => TensorData::F16(self.data.iter().map(|&v| f64_to_fp16(v)).collect()),
        };
        let data = QTensor::new(self.shape.clone(), data).expect("length checked");
        if let Some(i) = (0..data.len()).find(|&i| !data.data().get_f64(i).is_finite()) {
            return Err(fail(format!("{} overflows {dtype}", self.data[i])));
        }
        Ok(data)
    }

    pub fn from_tensor(name: &str, t: &QTensor) -> TensorDocument {
        TensorDocument {
            name: name.into(),
            dtype: t.dtype().name().into(),
            shape: t.shape().to_vec(),
            data: (0..t.len()).map(|i| t.data().get_f64(i)).collect(),
        }
    }
}

/// Parse a tensor file: one document or an array of them.
pub fn parse_tensors(text: &[u8]) -> Result<Vec<(String, QTensor)>, DocError> {
    let docs = match serde_json::from_slice::<OneOrMany>(text) {
        Ok(OneOrMany::One(d)) => vec![d],
        Ok(OneOrMany::Many(v)) => v,
        // retry as a single document for a precise error message
        Err(_) => vec![serde_json::from_slice::<TensorDocument>(text)?],
    };
    docs.iter().map(|d| Ok((d.name.clone(), d.to_tensor()?))).collect()
}

/// Render tensors as an array of documents, one element per line.
pub fn render_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a QTensor)>) -> String {
    let lines: Vec<String> = tensors
        .into_iter()
        .map(|(name, t)| {
            let data = match t.data() {
                TensorData::F32(v) => serde_json::to_string(v),
                // shortest f32 text that widens back to the same binary16
                TensorData::F16(v) => serde_json::to_string(&v.iter().map(|h| h.to_f32()).collect::<Vec<_>>()),
                _ => serde_json::to_string(&t.to_i64_vec().expect("integer")),
            }
            .expect("numbers serialize");
            format!(
                "  {{\"name\": {}, \"dtype\": \"{}\", \"shape\": {}, \"data\": {}}}",
                serde_json::to_string(name).expect("string"),
                t.dtype().name(),
                serde_json::to_string(t.shape()).expect("shape"),
                data
            )
        })
        .collect();
    format!("[\n{}\n]\n", lines.join(",\n"))
}

pub fn parse_model(text: &[u8]) -> Result<FloatModelSpec, DocError> {
    Ok(serde_json::from_slice(text)?)
}

pub fn parse_profile(text: &[u8]) -> Result<CalibrationProfile, DocError> {
    Ok(serde_json::from_slice(text)?)
}

/// Pretty JSON with a trailing newline.
pub fn render<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

fn sha256(t: &QTensor) -> String {
    hex::encode(Sha256::digest(t.data().to_le_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescriptorDocument {
    pub name: String,
    pub kind: &'static str,
    pub input_dtype: ElemType,
    pub output_dtype: ElemType,
    pub weight_shape: Vec<usize>,
    pub bias_shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strides: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pads: Option<[usize; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_shape: Option<[usize; 2]>,
    pub codification: RescaleCodification,
    pub quant_scale: u32,
    pub shift_bits: u32,
    pub multiplier: f64,
    pub activation: ActivationSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tanh_input_bound: Option<f32>,
    pub weight_sha256: String,
    pub bias_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<i64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<i64>>,
}

impl DescriptorDocument {
    pub fn new(d: &HwLayerDescriptor, include_data: bool) -> DescriptorDocument {
        let conv = match &d.kind {
            LayerKind::Conv2D(a) => Some(a),
            LayerKind::FullyConnected => None,
        };
        DescriptorDocument {
            name: d.name.clone(),
            kind: if conv.is_some() { "conv2d" } else { "fully_connected" },
            input_dtype: d.input_dtype,
            output_dtype: d.output_dtype,
            weight_shape: d.weights.shape().to_vec(),
            bias_shape: d.bias.shape().to_vec(),
            strides: conv.map(|a| a.strides),
            pads: conv.map(|a| a.pads),
            kernel_shape: conv.map(|a| a.kernel_shape),
            codification: d.codification,
            quant_scale: d.rescale.quant_scale(),
            shift_bits: d.rescale.shift_bits(),
            multiplier: d.rescale.multiplier(),
            activation: d.activation,
            tanh_input_bound: d.activation.input_bound(),
            weight_sha256: sha256(&d.weights),
            bias_sha256: sha256(&d.bias),
            weights: include_data.then(|| d.weights.to_i64_vec().expect("int8")),
            bias: include_data.then(|| d.bias.to_i64_vec().expect("int32")),
        }
    }
}
