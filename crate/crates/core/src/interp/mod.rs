//! Reference interpreter for the closed operator set.
//!
//! Integer kernels accumulate in 64 bits and fail on int32 overflow instead
//! of wrapping. Float kernels round once per operation, the way an ONNX
//! runtime on IEEE hardware does.

mod ops;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graphir::{Diagnostic, Dim, GraphError, GraphIR, NodeIR, OpType};
use crate::qmath::{round_clip, ElemType, QTensor, Scale};

pub use ops::MAX_ELEMENTS;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("graph failed validation: {}", .0.first().map(|d| d.to_string()).unwrap_or_default())]
    Invalid(Vec<Diagnostic>),
    #[error("input binding: {0}")]
    Binding(String),
    #[error("int32 overflow in node `{0}`")]
    Overflow(String),
    #[error("NaN reached QuantizeLinear in node `{0}`")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl RunError {
    fn at(self, node: &str) -> RunError {
        match self {
            RunError::Overflow(n) if n.is_empty() => RunError::Overflow(node.into()),
            RunError::Domain(n) if n.is_empty() => RunError::Domain(node.into()),
            RunError::Shape(m) => RunError::Shape(format!("node `{node}`: {m}")),
            RunError::Unsupported(m) => RunError::Unsupported(format!("node `{node}`: {m}")),
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Graph outputs by name.
    pub outputs: BTreeMap<String, QTensor>,
    /// int32 values that a Cast to float could not represent exactly.
    pub cast_inexact: usize,
    /// Every value computed by a node, only filled by [`run_traced`].
    pub intermediates: BTreeMap<String, QTensor>,
}

/// Execute `g` on `inputs`. The graph is validated first.
pub fn run(g: &GraphIR, inputs: &BTreeMap<String, QTensor>) -> Result<RunOutput, RunError> {
    execute(g, inputs, false)
}

/// Like [`run`], also keeping every intermediate value.
pub fn run_traced(g: &GraphIR, inputs: &BTreeMap<String, QTensor>) -> Result<RunOutput, RunError> {
    execute(g, inputs, true)
}

fn execute(g: &GraphIR, inputs: &BTreeMap<String, QTensor>, trace: bool) -> Result<RunOutput, RunError> {
    if let Err(GraphError::Invalid(d)) = g.ensure_valid() {
        return Err(RunError::Invalid(d));
    }
    let mut env: BTreeMap<&str, QTensor> = BTreeMap::new();
    for (name, t) in &g.initializers {
        env.insert(name, t.clone());
    }
    for vi in &g.inputs {
        let t = inputs
            .get(&vi.name)
            .ok_or_else(|| RunError::Binding(format!("missing input `{}`", vi.name)))?;
        if t.dtype() != vi.dtype {
            return Err(RunError::Binding(format!(
                "input `{}` must be {}, got {}",
                vi.name,
                vi.dtype,
                t.dtype()
            )));
        }
        if let Some(dims) = &vi.shape {
            let fits = dims.len() == t.rank()
                && dims.iter().zip(t.shape()).all(|(d, &s)| match d {
                    Dim::Value(v) => *v == s,
                    _ => true,
                });
            if !fits {
                return Err(RunError::Binding(format!(
                    "input `{}` has shape {:?}, graph declares {:?}",
                    vi.name,
                    t.shape(),
                    dims
                )));
            }
        }
        env.insert(&vi.name, t.clone());
    }

    let mut cast_inexact = 0;
    let mut intermediates = BTreeMap::new();
    for node in &g.nodes {
        let y = eval(node, &env, &mut cast_inexact).map_err(|e| e.at(&node.name))?;
        let out = node.outputs[0].as_str();
        if trace {
            intermediates.insert(out.to_string(), y.clone());
        }
        env.insert(out, y);
    }

    let mut outputs = BTreeMap::new();
    for vi in &g.outputs {
        let t = env.get(vi.name.as_str()).expect("validated graph defines its outputs");
        outputs.insert(vi.name.clone(), t.clone());
    }
    Ok(RunOutput {
        outputs,
        cast_inexact,
        intermediates,
    })
}

fn eval(node: &NodeIR, env: &BTreeMap<&str, QTensor>, cast_inexact: &mut usize) -> Result<QTensor, RunError> {
    let arg = |i: usize| -> Option<&QTensor> { node.input(i).map(|n| &env[n]) };
    let req = |i: usize| -> &QTensor { arg(i).expect("validated arity") };
    match &node.op_type {
        OpType::MatMulInteger => ops::matmul_integer(req(0), req(1), arg(2), arg(3)),
        OpType::ConvInteger => {
            let ints = |name: &str| node.attr_ints(name).unwrap_or(&[]);
            let mut p = ops::ConvParams {
                strides: [1, 1],
                pads: [0; 4],
            };
            for (dst, &v) in p.strides.iter_mut().zip(ints("strides")) {
                *dst = v as usize;
            }
            for (dst, &v) in p.pads.iter_mut().zip(ints("pads")) {
                *dst = v as usize;
            }
            ops::conv_integer(req(0), req(1), arg(2), arg(3), &p)
        }
        OpType::Add => ops::binary(ops::Binary::Add, req(0), req(1)),
        OpType::Mul => ops::binary(ops::Binary::Mul, req(0), req(1)),
        OpType::Cast => {
            let to = node
                .attr_int("to")
                .and_then(ElemType::from_onnx_code)
                .ok_or_else(|| RunError::Unsupported("Cast target".into()))?;
            Ok(ops::cast(req(0), to, cast_inexact))
        }
        OpType::QuantizeLinear => {
            let scale = req(1)
                .scalar_value()
                .map(|s| s as f32)
                .filter(|s| *s > 0.0 && s.is_finite())
                .ok_or_else(|| RunError::Unsupported("scale must be a positive finite scalar".into()))?;
            ops::quantize_linear(req(0), scale, arg(2))
        }
        OpType::Relu => Ok(ops::relu(req(0))),
        OpType::Tanh => ops::unary_float(req(0), f32::tanh),
        OpType::Sigmoid => ops::unary_float(req(0), ops::sigmoid_f32),
        OpType::Other(op) => Err(RunError::Unsupported(format!("operator {op}"))),
    }
}

/// The int8 tanh stage as a table: entry `i + 128` is
/// `round_clip(tanh(i * x_step), y_scale, int8)` for `i` in `-128..=127`.
pub fn tanh_i8_lut(x_step: Scale, y_scale: Scale) -> [i8; 256] {
    let mut lut = [0i8; 256];
    for (slot, i) in lut.iter_mut().zip(-128i32..=127) {
        let t = (i as f32 * x_step.value()).tanh();
        *slot = round_clip(t, y_scale, ElemType::I8).expect("tanh of a finite value") as i8;
    }
    lut
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{build_model, ActivationSpec, GraphInput, HwLayerDescriptor, LayerKind, RescaleCodification};
    use crate::qmath::RescaleSpec;

    fn fig1(rescale: RescaleSpec, activation: ActivationSpec) -> GraphIR {
        let desc = HwLayerDescriptor {
            name: "fc".into(),
            kind: LayerKind::FullyConnected,
            weights: QTensor::from_i8(vec![2, 1], vec![3, 4]).unwrap(),
            bias: QTensor::from_i32(vec![1], vec![5]).unwrap(),
            rescale,
            codification: RescaleCodification::TwoMul,
            output_dtype: activation.output_dtype(),
            activation,
            input_dtype: ElemType::I8,
        };
        let input = GraphInput {
            name: "x".into(),
            shape: vec![1, 2],
        };
        build_model(&[desc], &input).unwrap()
    }

    fn run_x(g: &GraphIR, x: QTensor) -> QTensor {
        let inputs = BTreeMap::from([("x".to_string(), x)]);
        run(g, &inputs).unwrap().outputs.into_values().next().unwrap()
    }

    #[test]
    fn fig1_hand_values() {
        let x = QTensor::from_i8(vec![1, 2], vec![1, 2]).unwrap();
        let g = fig1(RescaleSpec::from_parts(1, 0).unwrap(), ActivationSpec::None);
        assert_eq!(run_x(&g, x.clone()).as_i8().unwrap(), &[16]);
        let g = fig1(RescaleSpec::from_parts(1, 2).unwrap(), ActivationSpec::None);
        assert_eq!(run_x(&g, x).as_i8().unwrap(), &[4]);
    }

    fn sigmoid_at_zero(y_scale: f32) -> u8 {
        // pre-activation 0: x = [0, 0], b = 0
        let mut g = fig1(
            RescaleSpec::from_parts(1, 0).unwrap(),
            ActivationSpec::SigmoidF16 {
                y_scale: Scale::new(y_scale).unwrap(),
            },
        );
        g.initializers.insert("fc/bias".into(), QTensor::from_i32(vec![1], vec![0]).unwrap());
        let y = run_x(&g, QTensor::from_i8(vec![1, 2], vec![0, 0]).unwrap());
        y.as_u8().unwrap()[0]
    }

    #[test]
    fn sigmoid_at_zero_quantizes_by_f32_division() {
        // the f32 nearest 1/255 is slightly above it, so 0.5 / s is 127.49999, not a tie
        assert_eq!(0.5f32 / (1.0f32 / 255.0), 127.49999);
        assert_eq!(sigmoid_at_zero(1.0 / 255.0), 127);
        // a genuine tie: 0.5 / 1 goes to the even neighbour
        assert_eq!(sigmoid_at_zero(1.0), 0);
        assert_eq!(sigmoid_at_zero(1.0 / 256.0), 128);
    }

    #[test]
    fn tanh_lut_values() {
        let lut = tanh_i8_lut(Scale::new(4.0 / 127.0).unwrap(), Scale::new(1.0 / 127.0).unwrap());
        assert_eq!(lut[128], 0);
        assert_eq!(lut[128 + 127], 127);
        for i in 1..=127 {
            assert_eq!(lut[128 - i], -lut[128 + i], "i = {i}");
        }
    }

    #[test]
    fn overflow_names_the_node() {
        let mut g = fig1(RescaleSpec::from_parts(1, 0).unwrap(), ActivationSpec::None);
        g.initializers
            .insert("fc/bias".into(), QTensor::from_i32(vec![1], vec![i32::MAX]).unwrap());
        let inputs = BTreeMap::from([("x".to_string(), QTensor::from_i8(vec![1, 2], vec![1, 2]).unwrap())]);
        match run(&g, &inputs) {
            Err(RunError::Overflow(node)) => assert_eq!(node, "fc/bias_add"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn binding_errors() {
        let g = fig1(RescaleSpec::from_parts(1, 0).unwrap(), ActivationSpec::None);
        assert!(matches!(run(&g, &BTreeMap::new()), Err(RunError::Binding(_))));
        let wrong = BTreeMap::from([("x".to_string(), QTensor::from_u8(vec![1, 2], vec![1, 2]).unwrap())]);
        assert!(matches!(run(&g, &wrong), Err(RunError::Binding(_))));
        let shape = BTreeMap::from([("x".to_string(), QTensor::from_i8(vec![2, 1], vec![1, 2]).unwrap())]);
        assert!(matches!(run(&g, &shape), Err(RunError::Binding(_))));
    }
}
