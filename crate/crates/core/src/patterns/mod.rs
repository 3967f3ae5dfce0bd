//! Codified layer patterns.
//!
//! A quantized layer is emitted as a fixed chain of standard operators:
//!
//! ```text
//! MatMulInteger | ConvInteger      int8 x int8 -> int32
//! Add (int32 bias)
//! Cast -> float
//! Mul quant_scale, Mul 2^-N        (two-Mul form)   or   Mul multiplier   (one-Mul form)
//! [activation stage]
//! QuantizeLinear                   round + saturate; zero point dtype picks int8/uint8
//! ```
//!
//! [`build_model`] emits the chain from [`HwLayerDescriptor`]s and [`extract`]
//! recovers the descriptors from any graph that follows it.

mod build;
mod extract;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphir::{Diagnostic, GraphError};
use crate::qmath::{decompose_rescale, ElemType, QTensor, QuantError, RescaleSpec, Scale};

pub use build::{build_conv, build_fc, build_model, GraphBuilder, GraphInput};
pub use extract::extract;

/// Default tanh input bound: tanh(4) is within 7e-4 of 1.
pub const DEFAULT_TANH_INPUT_BOUND: f32 = 4.0;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("layer `{layer}`: {reason}")]
    Descriptor { layer: String, reason: String },
    #[error("layer `{layer}` expects {expected} input but the previous layer produces {got}")]
    DtypeChain {
        layer: String,
        expected: ElemType,
        got: ElemType,
    },
    #[error("layer `{layer}`: input shape {shape:?} does not fit: {reason}")]
    Shape {
        layer: String,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("model has no layers")]
    Empty,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("graph is not valid: {}", .0.first().map(|d| d.to_string()).unwrap_or_default())]
    Invalid(Vec<Diagnostic>),
    #[error("pattern mismatch at node {node}: {reason}")]
    Mismatch { node: String, reason: String },
    #[error("bad rescale codification at node {node}: {reason}")]
    Codification { node: String, reason: String },
}

/// How the rescale multiplier is written into the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RescaleCodification {
    /// `Mul(quant_scale)` then `Mul(2^-N)`: the integer form is explicit.
    TwoMul,
    /// A single `Mul(multiplier)`; the toolchain derives the integer form.
    OneMul,
}

impl RescaleCodification {
    /// The rescale this codification round-trips through a graph.
    ///
    /// One Mul stores the multiplier as an f32 and the integer form is
    /// re-derived from it; two Muls store the integer form and the multiplier
    /// is whatever it represents.
    pub fn rescale_for(self, multiplier: f64) -> Result<RescaleSpec, QuantError> {
        match self {
            RescaleCodification::OneMul => decompose_rescale(multiplier as f32 as f64),
            RescaleCodification::TwoMul => decompose_rescale(multiplier).map(|s| s.exact()),
        }
    }

    fn is_canonical(self, spec: &RescaleSpec) -> bool {
        match self {
            RescaleCodification::TwoMul => spec.multiplier() == spec.represented(),
            RescaleCodification::OneMul => {
                let m32 = spec.multiplier() as f32;
                m32 as f64 == spec.multiplier()
                    && (decompose_rescale(m32 as f64) == Ok(*spec))
            }
        }
    }
}

/// Activation stage between the rescale and the final QuantizeLinear.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationSpec {
    None,
    Relu,
    /// int8 in, int8 out: the rescale lands on an int8 grid with step
    /// `x_step` covering `[-input_bound, input_bound]`, tanh runs in float
    /// and the result is requantized with `y_scale`.
    TanhI8 { x_step: f32, y_scale: Scale },
    /// Rescale to real units, tanh in binary16, requantize to int8.
    TanhF16 { y_scale: Scale },
    /// Rescale to real units, sigmoid in binary16, requantize to uint8.
    SigmoidF16 { y_scale: Scale },
}

impl ActivationSpec {
    /// int8 tanh covering `[-input_bound, input_bound]`.
    pub fn tanh_i8(input_bound: f32, y_scale: Scale) -> Result<ActivationSpec, QuantError> {
        let step = Scale::new(input_bound / 127.0).map_err(|_| QuantError::InvalidRange(input_bound))?;
        Ok(ActivationSpec::TanhI8 {
            x_step: step.value(),
            y_scale,
        })
    }

    pub fn input_bound(&self) -> Option<f32> {
        match self {
            ActivationSpec::TanhI8 { x_step, .. } => Some(x_step * 127.0),
            _ => None,
        }
    }

    pub fn y_scale(&self) -> Option<Scale> {
        match self {
            ActivationSpec::TanhI8 { y_scale, .. }
            | ActivationSpec::TanhF16 { y_scale }
            | ActivationSpec::SigmoidF16 { y_scale } => Some(*y_scale),
            _ => None,
        }
    }

    /// Only sigmoid produces uint8; every other stage produces int8.
    pub fn output_dtype(&self) -> ElemType {
        match self {
            ActivationSpec::SigmoidF16 { .. } => ElemType::U8,
            _ => ElemType::I8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationSpec::None => "none",
            ActivationSpec::Relu => "relu",
            ActivationSpec::TanhI8 { .. } => "tanh_i8",
            ActivationSpec::TanhF16 { .. } => "tanh_f16",
            ActivationSpec::SigmoidF16 { .. } => "sigmoid_f16",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub strides: [usize; 2],
    /// `[top, left, bottom, right]`
    pub pads: [usize; 4],
    pub kernel_shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Weights `[in, out]`, the MatMulInteger right-hand operand.
    FullyConnected,
    /// Weights `[out_ch, in_ch, kH, kW]`.
    Conv2D(ConvAttrs),
}

/// Everything a hardware toolchain needs to run one quantized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HwLayerDescriptor {
    pub name: String,
    pub kind: LayerKind,
    pub weights: QTensor,
    /// One int32 per output channel, shape `[out]`.
    pub bias: QTensor,
    pub rescale: RescaleSpec,
    pub codification: RescaleCodification,
    pub activation: ActivationSpec,
    pub input_dtype: ElemType,
    pub output_dtype: ElemType,
}

impl HwLayerDescriptor {
    pub fn out_channels(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected => self.weights.shape().get(1).copied().unwrap_or(0),
            LayerKind::Conv2D(_) => self.weights.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn in_channels(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected => self.weights.shape().first().copied().unwrap_or(0),
            LayerKind::Conv2D(_) => self.weights.shape().get(1).copied().unwrap_or(0),
        }
    }

    /// Check the descriptor invariants.
    pub fn check(&self) -> Result<(), BuildError> {
        let fail = |reason: String| BuildError::Descriptor {
            layer: self.name.clone(),
            reason,
        };
        if self.name.is_empty() {
            return Err(fail("layer name is empty".into()));
        }
        if self.weights.dtype() != ElemType::I8 {
            return Err(fail(format!("weights must be int8, got {}", self.weights.dtype())));
        }
        let rank = self.weights.rank();
        match &self.kind {
            LayerKind::FullyConnected if rank != 2 => {
                return Err(fail(format!("fully connected weights must be rank 2, got {rank}")))
            }
            LayerKind::Conv2D(attrs) => {
                if rank != 4 {
                    return Err(fail(format!("conv weights must be rank 4, got {rank}")));
                }
                if attrs.kernel_shape[..] != self.weights.shape()[2..] {
                    return Err(fail(format!(
                        "kernel_shape {:?} disagrees with weights {:?}",
                        attrs.kernel_shape,
                        self.weights.shape()
                    )));
                }
                if attrs.strides.contains(&0) {
                    return Err(fail("strides must be positive".into()));
                }
            }
            _ => {}
        }
        if self.weights.is_empty() {
            return Err(fail("weights are empty".into()));
        }
        if self.bias.dtype() != ElemType::I32 || self.bias.shape() != [self.out_channels()] {
            return Err(fail(format!(
                "bias must be int32 of shape [{}], got {} {:?}",
                self.out_channels(),
                self.bias.dtype(),
                self.bias.shape()
            )));
        }
        if self.rescale.quant_scale() == 0 {
            return Err(fail("rescale is zero".into()));
        }
        if !self.codification.is_canonical(&self.rescale) {
            return Err(fail(format!(
                "rescale {:?} cannot round-trip through {:?}",
                self.rescale, self.codification
            )));
        }
        if let ActivationSpec::TanhI8 { x_step, .. } = self.activation {
            if !(x_step > 0.0) || !x_step.is_finite() {
                return Err(fail(format!("tanh input step {x_step} must be positive")));
            }
        }
        if !matches!(self.input_dtype, ElemType::I8 | ElemType::U8) {
            return Err(fail(format!("input must be int8 or uint8, got {}", self.input_dtype)));
        }
        if self.output_dtype != self.activation.output_dtype() {
            return Err(fail(format!(
                "{} activation produces {}, descriptor says {}",
                self.activation.name(),
                self.activation.output_dtype(),
                self.output_dtype
            )));
        }
        Ok(())
    }
}
