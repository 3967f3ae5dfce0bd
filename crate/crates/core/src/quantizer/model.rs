//! The fp32 side: a small sequential network description.

use serde::{Deserialize, Serialize};

use super::QuantizeError;
use crate::qmath::QTensor;

/// Dense f32 tensor as it appears in model documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloatTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> FloatTensor {
        FloatTensor { shape, data }
    }

    pub fn to_qtensor(&self) -> Option<QTensor> {
        QTensor::from_f32(self.shape.clone(), self.data.clone()).ok()
    }

    pub fn abs_max(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloatLayerKind {
    /// Weights `[out, in]`.
    FullyConnected,
    /// Weights `[out_ch, in_ch, kH, kW]`.
    Conv2d,
}

/// Activation requested for a layer. Unset scales and bounds take defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FloatActivation {
    #[default]
    None,
    Relu,
    TanhI8 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input_bound: Option<f32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        y_scale: Option<f32>,
    },
    TanhF16 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        y_scale: Option<f32>,
    },
    SigmoidF16 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        y_scale: Option<f32>,
    },
}

impl FloatActivation {
    pub fn apply(&self, x: f32) -> f32 {
        match self {
            FloatActivation::None => x,
            FloatActivation::Relu => x.max(0.0),
            FloatActivation::TanhI8 { .. } | FloatActivation::TanhF16 { .. } => x.tanh(),
            FloatActivation::SigmoidF16 { .. } => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloatLayer {
    pub name: String,
    pub kind: FloatLayerKind,
    pub weights: FloatTensor,
    pub bias: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strides: Option<[usize; 2]>,
    /// `[top, left, bottom, right]`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pads: Option<[usize; 4]>,
    #[serde(default)]
    pub activation: FloatActivation,
}

impl FloatLayer {
    pub fn fully_connected(name: &str, weights: FloatTensor, bias: Vec<f32>, activation: FloatActivation) -> FloatLayer {
        FloatLayer {
            name: name.into(),
            kind: FloatLayerKind::FullyConnected,
            weights,
            bias,
            strides: None,
            pads: None,
            activation,
        }
    }

    pub fn conv2d(
        name: &str,
        weights: FloatTensor,
        bias: Vec<f32>,
        strides: [usize; 2],
        pads: [usize; 4],
        activation: FloatActivation,
    ) -> FloatLayer {
        FloatLayer {
            name: name.into(),
            kind: FloatLayerKind::Conv2d,
            weights,
            bias,
            strides: Some(strides),
            pads: Some(pads),
            activation,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape.first().copied().unwrap_or(0)
    }

    pub fn strides(&self) -> [usize; 2] {
        self.strides.unwrap_or([1, 1])
    }

    pub fn pads(&self) -> [usize; 4] {
        self.pads.unwrap_or([0; 4])
    }

    /// Output shape for `input`, or why it does not fit.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        let w = &self.weights.shape;
        match self.kind {
            FloatLayerKind::FullyConnected => {
                let [out, inp] = w[..] else {
                    return Err(format!("weights must be [out, in], got {w:?}"));
                };
                match input {
                    [.., k] if input.len() >= 2 && *k == inp => {
                        let mut s = input.to_vec();
                        *s.last_mut().expect("rank >= 2") = out;
                        Ok(s)
                    }
                    _ => Err(format!("input {input:?} does not end in {inp} features")),
                }
            }
            FloatLayerKind::Conv2d => {
                let [out, c, kh, kw] = w[..] else {
                    return Err(format!("weights must be [out, in, kH, kW], got {w:?}"));
                };
                let &[n, ic, h, wd] = input else {
                    return Err(format!("conv input must be N x C x H x W, got {input:?}"));
                };
                if ic != c {
                    return Err(format!("weights expect {c} channels, input has {ic}"));
                }
                let [sh, sw] = self.strides();
                let [pt, pl, pb, pr] = self.pads();
                if sh == 0 || sw == 0 {
                    return Err("strides must be positive".into());
                }
                let (ph, pw) = (h + pt + pb, wd + pl + pr);
                if ph < kh || pw < kw {
                    return Err("kernel larger than padded input".into());
                }
                Ok(vec![n, out, (ph - kh) / sh + 1, (pw - kw) / sw + 1])
            }
        }
    }
}

/// A sequential fp32 network: one input, layers applied in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloatModelSpec {
    pub name: String,
    pub input: InputSpec,
    pub layers: Vec<FloatLayer>,
}

impl FloatModelSpec {
    /// Shapes of every layer output, checking that the layers chain.
    pub fn check(&self) -> Result<Vec<Vec<usize>>, QuantizeError> {
        let bad = |reason: String| QuantizeError::Model(reason);
        if self.layers.is_empty() {
            return Err(bad("model has no layers".into()));
        }
        if self.input.name.is_empty() {
            return Err(bad("input name is empty".into()));
        }
        let mut names = std::collections::HashSet::new();
        let mut shape = self.input.shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let fail = |r: String| bad(format!("layer `{}`: {r}", layer.name));
            if layer.name.is_empty() || layer.name.contains('/') || layer.name == self.input.name {
                return Err(fail("layer names must be non-empty, slash-free and distinct from the input".into()));
            }
            if !names.insert(layer.name.as_str()) {
                return Err(fail("duplicate layer name".into()));
            }
            if crate::qmath::shape_len(&layer.weights.shape) != Some(layer.weights.data.len()) {
                return Err(fail("weight data does not match its shape".into()));
            }
            if layer.bias.len() != layer.out_channels() {
                return Err(fail(format!("bias needs {} values, got {}", layer.out_channels(), layer.bias.len())));
            }
            if layer.kind == FloatLayerKind::FullyConnected && (layer.strides.is_some() || layer.pads.is_some()) {
                return Err(fail("strides and pads only apply to conv2d".into()));
            }
            if !layer.weights.data.iter().chain(&layer.bias).all(|v| v.is_finite()) {
                return Err(fail("parameters must be finite".into()));
            }
            if let FloatActivation::TanhI8 { input_bound: Some(b), .. } = layer.activation {
                if !(b > 0.0 && b.is_finite()) {
                    return Err(fail(format!("tanh input bound {b} must be positive")));
                }
            }
            shape = layer.output_shape(&shape).map_err(fail)?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }
}
