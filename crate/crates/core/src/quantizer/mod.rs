//! Post-training quantization: max-range calibration, weight and bias
//! quantization, rescale decomposition, graph emission.

mod model;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphir::GraphIR;
use crate::patterns::{
    build_model, ActivationSpec, BuildError, ConvAttrs, GraphInput, HwLayerDescriptor, LayerKind, RescaleCodification,
    DEFAULT_TANH_INPUT_BOUND,
};
use crate::qmath::{
    compute_symmetric_scale, quantize_bias, quantize_tensor, rescale_multiplier, ElemType, QTensor, QuantError,
    Scale,
};
use crate::validate::run_reference;

pub use model::{FloatActivation, FloatLayer, FloatLayerKind, FloatModelSpec, FloatTensor, InputSpec};

/// Metadata key holding the scale of the graph input.
pub const META_INPUT_SCALE: &str = "quant.input_scale";
/// Metadata key holding the scale of the graph output.
pub const META_OUTPUT_SCALE: &str = "quant.output_scale";

/// Output scale of int8 tanh when the model does not set one.
pub const DEFAULT_TANH_Y_SCALE: f32 = 1.0 / 127.0;
/// Output scale of uint8 sigmoid when the model does not set one.
pub const DEFAULT_SIGMOID_Y_SCALE: f32 = 1.0 / 255.0;

#[derive(Debug, Error)]
pub enum QuantizeError {
    #[error("calibration: tensor `{tensor}`: {reason}")]
    Calibration { tensor: String, reason: String },
    #[error("model: {0}")]
    Model(String),
    #[error("layer `{layer}`: {source}")]
    Quant {
        layer: String,
        #[source]
        source: QuantError,
    },
    #[error(transparent)]
    Build(#[from] BuildError),
}

/// Largest absolute value seen per tensor: the graph input (by its name)
/// and every layer output after its activation (by layer name).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationProfile {
    pub abs_max: BTreeMap<String, f32>,
}

impl CalibrationProfile {
    fn record(&mut self, name: &str, t: &QTensor) {
        let m = t.as_f32().expect("reference is f32").iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let slot = self.abs_max.entry(name.to_string()).or_insert(0.0);
        *slot = slot.max(m);
    }

    fn scale(&self, tensor: &str) -> Result<Scale, QuantizeError> {
        let m = *self.abs_max.get(tensor).ok_or_else(|| QuantizeError::Calibration {
            tensor: tensor.into(),
            reason: "no calibration entry".into(),
        })?;
        compute_symmetric_scale(m, ElemType::I8).map_err(|_| QuantizeError::Calibration {
            tensor: tensor.into(),
            reason: format!("range {m} is degenerate"),
        })
    }
}

/// Max-range profiling over the fp32 reference.
pub fn calibrate(model: &FloatModelSpec, samples: &[QTensor]) -> Result<CalibrationProfile, QuantizeError> {
    if samples.is_empty() {
        return Err(QuantizeError::Calibration {
            tensor: model.input.name.clone(),
            reason: "no samples".into(),
        });
    }
    let mut profile = CalibrationProfile::default();
    for x in samples {
        let values = run_reference(model, x).map_err(|e| QuantizeError::Model(e.to_string()))?;
        profile.record(&model.input.name, x);
        for (layer, y) in model.layers.iter().zip(&values) {
            profile.record(&layer.name, y);
        }
    }
    for (name, &m) in &profile.abs_max {
        if !(m > 0.0) || !m.is_finite() {
            return Err(QuantizeError::Calibration {
                tensor: name.clone(),
                reason: format!("range {m} is degenerate"),
            });
        }
    }
    Ok(profile)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub kind: FloatLayerKind,
    pub activation: &'static str,
    pub weight_abs_max: f32,
    pub weight_scale: Scale,
    pub input_scale: Scale,
    /// Scale of the grid the rescale lands on; `None` means real units.
    pub rescale_target_scale: Option<Scale>,
    pub output_scale: Scale,
    pub output_dtype: ElemType,
    pub multiplier: f32,
    pub quant_scale: u32,
    pub shift_bits: u32,
    pub represented_multiplier: f64,
    pub bias_saturated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantReport {
    pub model: String,
    pub codification: RescaleCodification,
    pub input_scale: Scale,
    pub output_scale: Scale,
    pub layers: Vec<LayerReport>,
}

fn default_scale(v: Option<f32>, fallback: f32, layer: &str) -> Result<Scale, QuantizeError> {
    Scale::new(v.unwrap_or(fallback)).map_err(|source| QuantizeError::Quant {
        layer: layer.into(),
        source,
    })
}

/// Quantize every layer and emit the codified graph.
pub fn quantize_model(
    model: &FloatModelSpec,
    profile: &CalibrationProfile,
    codification: RescaleCodification,
) -> Result<(GraphIR, QuantReport), QuantizeError> {
    model.check()?;
    let input_scale = profile.scale(&model.input.name)?;
    let mut sx = input_scale;
    let mut input_dtype = ElemType::I8;
    let mut descs = Vec::with_capacity(model.layers.len());
    let mut layers = Vec::with_capacity(model.layers.len());

    for layer in &model.layers {
        let name = layer.name.as_str();
        let q = |source: QuantError| QuantizeError::Quant {
            layer: name.into(),
            source,
        };
        let w_max = layer.weights.abs_max();
        let sw = compute_symmetric_scale(w_max, ElemType::I8).map_err(|_| QuantizeError::Calibration {
            tensor: format!("{name}/weights"),
            reason: "weights are all zero".into(),
        })?;
        let w = layer.weights.to_qtensor().expect("checked shape");
        let wq = quantize_tensor(&w, sw, ElemType::I8).map_err(q)?;
        let bias = QTensor::from_f32(vec![layer.bias.len()], layer.bias.clone()).expect("1-d");
        let bq = quantize_bias(&bias, sw, sx).map_err(q)?;

        let (activation, target, sy) = match layer.activation {
            FloatActivation::None => (ActivationSpec::None, Some(profile.scale(name)?), None),
            FloatActivation::Relu => (ActivationSpec::Relu, Some(profile.scale(name)?), None),
            FloatActivation::TanhI8 { input_bound, y_scale } => {
                let ys = default_scale(y_scale, DEFAULT_TANH_Y_SCALE, name)?;
                let act = ActivationSpec::tanh_i8(input_bound.unwrap_or(DEFAULT_TANH_INPUT_BOUND), ys).map_err(q)?;
                let ActivationSpec::TanhI8 { x_step, .. } = act else { unreachable!() };
                (act, Some(Scale::new(x_step).map_err(q)?), Some(ys))
            }
            FloatActivation::TanhF16 { y_scale } => {
                let ys = default_scale(y_scale, DEFAULT_TANH_Y_SCALE, name)?;
                (ActivationSpec::TanhF16 { y_scale: ys }, None, Some(ys))
            }
            FloatActivation::SigmoidF16 { y_scale } => {
                let ys = default_scale(y_scale, DEFAULT_SIGMOID_Y_SCALE, name)?;
                (ActivationSpec::SigmoidF16 { y_scale: ys }, None, Some(ys))
            }
        };
        // no target grid: the float activations take the rescale in real units
        let multiplier = rescale_multiplier(sw, sx, target.unwrap_or(Scale::new(1.0).expect("one")));
        let rescale = codification.rescale_for(multiplier as f64).map_err(q)?;

        let (kind, weights) = match layer.kind {
            FloatLayerKind::FullyConnected => (LayerKind::FullyConnected, transpose(&wq)),
            FloatLayerKind::Conv2d => {
                let s = wq.shape();
                (
                    LayerKind::Conv2D(ConvAttrs {
                        strides: layer.strides(),
                        pads: layer.pads(),
                        kernel_shape: [s[2], s[3]],
                    }),
                    wq,
                )
            }
        };
        let out_scale = sy.or(target).expect("every activation has an output scale");
        layers.push(LayerReport {
            name: name.into(),
            kind: layer.kind,
            activation: activation.name(),
            weight_abs_max: w_max,
            weight_scale: sw,
            input_scale: sx,
            rescale_target_scale: target,
            output_scale: out_scale,
            output_dtype: activation.output_dtype(),
            multiplier,
            quant_scale: rescale.quant_scale(),
            shift_bits: rescale.shift_bits(),
            represented_multiplier: rescale.represented(),
            bias_saturated: bq.saturated,
        });
        descs.push(HwLayerDescriptor {
            name: name.into(),
            kind,
            weights,
            bias: bq.tensor,
            rescale,
            codification,
            activation,
            input_dtype,
            output_dtype: activation.output_dtype(),
        });
        sx = out_scale;
        input_dtype = activation.output_dtype();
    }

    let input = GraphInput {
        name: model.input.name.clone(),
        shape: model.input.shape.clone(),
    };
    let mut g = build_model(&descs, &input)?;
    g.name = model.name.clone();
    g.metadata.insert(META_INPUT_SCALE.into(), input_scale.value().to_string());
    g.metadata.insert(META_OUTPUT_SCALE.into(), sx.value().to_string());
    let report = QuantReport {
        model: model.name.clone(),
        codification,
        input_scale,
        output_scale: sx,
        layers,
    };
    Ok((g, report))
}

/// A scale recorded in the graph metadata.
pub fn graph_scale(g: &GraphIR, key: &str) -> Option<Scale> {
    g.metadata.get(key)?.parse::<f32>().ok().and_then(|v| Scale::new(v).ok())
}

fn transpose(w: &QTensor) -> QTensor {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let v = w.as_i8().expect("int8 weights");
    let t = (0..cols).flat_map(|c| (0..rows).map(move |r| v[r * cols + c])).collect();
    QTensor::from_i8(vec![cols, rows], t).expect("same length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphir::OpType;

    fn identity_model(activation: FloatActivation) -> FloatModelSpec {
        FloatModelSpec {
            name: "id".into(),
            input: InputSpec {
                name: "x".into(),
                shape: vec![1, 1],
            },
            layers: vec![FloatLayer::fully_connected(
                "fc",
                FloatTensor::new(vec![1, 1], vec![1.0]),
                vec![0.0],
                activation,
            )],
        }
    }

    fn profile(pairs: &[(&str, f32)]) -> CalibrationProfile {
        CalibrationProfile {
            abs_max: pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        }
    }

    #[test]
    fn identity_scales() {
        let (_, report) = quantize_model(
            &identity_model(FloatActivation::None),
            &profile(&[("x", 127.0), ("fc", 127.0)]),
            RescaleCodification::TwoMul,
        )
        .unwrap();
        let l = &report.layers[0];
        assert_eq!(l.weight_scale.value(), 1.0 / 127.0);
        assert_eq!(l.input_scale.value(), 1.0);
        assert_eq!(l.output_scale.value(), 1.0);
        assert_eq!(l.multiplier, 1.0 / 127.0);
    }

    #[test]
    fn zero_weights_fail_calibration() {
        let mut m = identity_model(FloatActivation::None);
        m.layers[0].weights.data[0] = 0.0;
        let err = quantize_model(&m, &profile(&[("x", 1.0), ("fc", 1.0)]), RescaleCodification::TwoMul).unwrap_err();
        assert!(matches!(err, QuantizeError::Calibration { .. }), "{err}");
    }

    #[test]
    fn calibration_takes_the_max_over_samples() {
        let m = identity_model(FloatActivation::Relu);
        let s = |v: f32| QTensor::from_f32(vec![1, 1], vec![v]).unwrap();
        let p = calibrate(&m, &[s(1.0), s(-2.0), s(0.5)]).unwrap();
        assert_eq!(p.abs_max["x"], 2.0);
        assert_eq!(p.abs_max["fc"], 1.0);
        assert!(calibrate(&m, &[]).is_err());
        // relu of only negatives leaves a zero range
        assert!(matches!(
            calibrate(&m, &[s(-1.0)]),
            Err(QuantizeError::Calibration { tensor, .. }) if tensor == "fc"
        ));
    }

    #[test]
    fn relu_layer_emits_relu() {
        let (g, _) = quantize_model(
            &identity_model(FloatActivation::Relu),
            &profile(&[("x", 1.0), ("fc", 1.0)]),
            RescaleCodification::OneMul,
        )
        .unwrap();
        assert!(g.nodes.iter().any(|n| n.op_type == OpType::Relu));
        assert_eq!(graph_scale(&g, META_INPUT_SCALE).unwrap().value(), 1.0 / 127.0);
    }
}
