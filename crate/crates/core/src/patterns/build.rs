use std::collections::HashSet;

use super::{ActivationSpec, BuildError, HwLayerDescriptor, LayerKind, RescaleCodification};
use crate::graphir::{AttrValue, GraphIR, NodeIR, OpType, ValueInfo};
use crate::qmath::{ElemType, QTensor};

/// The single graph input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphInput {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Accumulates nodes and initializers for one graph.
#[derive(Debug)]
pub struct GraphBuilder {
    graph: GraphIR,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>) -> GraphBuilder {
        GraphBuilder {
            graph: GraphIR::new(name),
        }
    }

    pub fn initializer(&mut self, name: String, t: QTensor) -> String {
        self.graph.initializers.insert(name.clone(), t);
        name
    }

    pub fn node(&mut self, node: NodeIR) {
        self.graph.nodes.push(node);
    }

    pub fn nodes(&self) -> &[NodeIR] {
        &self.graph.nodes
    }

    pub fn finish(self) -> GraphIR {
        self.graph
    }

    fn op(&mut self, op: OpType, name: String, inputs: &[&str], output: &str) {
        self.node(
            NodeIR::new(op, name)
                .with_inputs(inputs.iter().copied())
                .with_outputs([output]),
        );
    }

    fn cast(&mut self, name: String, input: &str, output: &str, to: ElemType) {
        self.node(
            NodeIR::new(OpType::Cast, name)
                .with_inputs([input])
                .with_outputs([output])
                .with_attr("to", AttrValue::Int(to.onnx_code() as i64)),
        );
    }

    fn quantize(&mut self, name: String, input: &str, scale: String, zp: String, output: &str) {
        self.op(OpType::QuantizeLinear, name, &[input, &scale, &zp], output);
    }
}

/// Append a fully connected layer reading `input` and writing `output`.
pub fn build_fc(
    b: &mut GraphBuilder,
    desc: &HwLayerDescriptor,
    input: &str,
    output: &str,
) -> Result<(), BuildError> {
    if desc.kind != LayerKind::FullyConnected {
        return Err(BuildError::Descriptor {
            layer: desc.name.clone(),
            reason: "build_fc needs a fully connected descriptor".into(),
        });
    }
    desc.check()?;
    emit_layer(b, desc, input, output);
    Ok(())
}

/// Append a 2-D convolution layer reading `input` and writing `output`.
pub fn build_conv(
    b: &mut GraphBuilder,
    desc: &HwLayerDescriptor,
    input: &str,
    output: &str,
) -> Result<(), BuildError> {
    if !matches!(desc.kind, LayerKind::Conv2D(_)) {
        return Err(BuildError::Descriptor {
            layer: desc.name.clone(),
            reason: "build_conv needs a conv descriptor".into(),
        });
    }
    desc.check()?;
    emit_layer(b, desc, input, output);
    Ok(())
}

fn emit_layer(b: &mut GraphBuilder, desc: &HwLayerDescriptor, input: &str, output: &str) {
    let p = desc.name.as_str();
    let weight = b.initializer(format!("{p}/weight"), desc.weights.clone());

    let acc_raw;
    match &desc.kind {
        LayerKind::FullyConnected => {
            acc_raw = format!("{p}/matmul_out");
            b.op(OpType::MatMulInteger, format!("{p}/matmul"), &[input, &weight], &acc_raw);
        }
        LayerKind::Conv2D(attrs) => {
            acc_raw = format!("{p}/conv_out");
            let ints = |v: &[usize]| AttrValue::Ints(v.iter().map(|&x| x as i64).collect());
            b.node(
                NodeIR::new(OpType::ConvInteger, format!("{p}/conv"))
                    .with_inputs([input, weight.as_str()])
                    .with_outputs([acc_raw.as_str()])
                    .with_attr("kernel_shape", ints(&attrs.kernel_shape))
                    .with_attr("pads", ints(&attrs.pads))
                    .with_attr("strides", ints(&attrs.strides)),
            );
        }
    }

    let bias_t = match desc.kind {
        LayerKind::FullyConnected => desc.bias.clone(),
        // broadcast over N, H, W
        LayerKind::Conv2D(_) => desc
            .bias
            .reshaped(vec![1, desc.out_channels(), 1, 1])
            .expect("bias length checked"),
    };
    let bias = b.initializer(format!("{p}/bias"), bias_t);
    let acc = format!("{p}/acc");
    b.op(OpType::Add, format!("{p}/bias_add"), &[&acc_raw, &bias], &acc);

    let acc_f32 = format!("{p}/acc_f32");
    b.cast(format!("{p}/cast"), &acc, &acc_f32, ElemType::F32);

    let rescaled = format!("{p}/rescaled");
    match desc.codification {
        RescaleCodification::TwoMul => {
            let qs = b.initializer(
                format!("{p}/quant_scale"),
                QTensor::scalar_f32(desc.rescale.quant_scale() as f32),
            );
            let shift = b.initializer(
                format!("{p}/quant_shift"),
                QTensor::scalar_f32(desc.rescale.shift_factor()),
            );
            let scaled = format!("{p}/scaled");
            b.op(OpType::Mul, format!("{p}/rescale_scale"), &[&acc_f32, &qs], &scaled);
            b.op(OpType::Mul, format!("{p}/rescale_shift"), &[&scaled, &shift], &rescaled);
        }
        RescaleCodification::OneMul => {
            let m = b.initializer(
                format!("{p}/multiplier"),
                QTensor::scalar_f32(desc.rescale.multiplier() as f32),
            );
            b.op(OpType::Mul, format!("{p}/rescale"), &[&acc_f32, &m], &rescaled);
        }
    }

    let unit_scale = |b: &mut GraphBuilder, suffix: &str| {
        b.initializer(format!("{p}/{suffix}"), QTensor::scalar_f32(1.0))
    };
    let zero = |b: &mut GraphBuilder, suffix: &str, dtype: ElemType| {
        b.initializer(format!("{p}/{suffix}"), QTensor::zero_point(dtype))
    };

    match desc.activation {
        ActivationSpec::None => {
            let s = unit_scale(b, "out_scale");
            let z = zero(b, "out_zero_point", desc.output_dtype);
            b.quantize(format!("{p}/quantize"), &rescaled, s, z, output);
        }
        ActivationSpec::Relu => {
            let relu_out = format!("{p}/relu_out");
            b.op(OpType::Relu, format!("{p}/relu"), &[&rescaled], &relu_out);
            let s = unit_scale(b, "out_scale");
            let z = zero(b, "out_zero_point", desc.output_dtype);
            b.quantize(format!("{p}/quantize"), &relu_out, s, z, output);
        }
        ActivationSpec::TanhI8 { x_step, y_scale } => {
            let s = unit_scale(b, "out_scale");
            let z = zero(b, "out_zero_point", ElemType::I8);
            let act_in = format!("{p}/act_in");
            b.quantize(format!("{p}/act_quantize"), &rescaled, s, z, &act_in);
            let act_in_f32 = format!("{p}/act_in_f32");
            b.cast(format!("{p}/act_cast"), &act_in, &act_in_f32, ElemType::F32);
            let step = b.initializer(format!("{p}/act_step"), QTensor::scalar_f32(x_step));
            let act_x = format!("{p}/act_x");
            b.op(OpType::Mul, format!("{p}/act_scale"), &[&act_in_f32, &step], &act_x);
            let tanh_out = format!("{p}/tanh_out");
            b.op(OpType::Tanh, format!("{p}/tanh"), &[&act_x], &tanh_out);
            let ys = b.initializer(format!("{p}/y_scale"), QTensor::scalar_f32(y_scale.value()));
            let yz = zero(b, "y_zero_point", ElemType::I8);
            b.quantize(format!("{p}/quantize"), &tanh_out, ys, yz, output);
        }
        ActivationSpec::TanhF16 { y_scale } | ActivationSpec::SigmoidF16 { y_scale } => {
            let (op, stem) = match desc.activation {
                ActivationSpec::TanhF16 { .. } => (OpType::Tanh, "tanh"),
                _ => (OpType::Sigmoid, "sigmoid"),
            };
            let half_in = format!("{p}/rescaled_f16");
            b.cast(format!("{p}/to_f16"), &rescaled, &half_in, ElemType::F16);
            let half_out = format!("{p}/{stem}_out");
            b.op(op, format!("{p}/{stem}"), &[&half_in], &half_out);
            // QuantizeLinear at opset 13 takes float or int32 input, not float16
            let act_out = format!("{p}/act_out");
            b.cast(format!("{p}/to_f32"), &half_out, &act_out, ElemType::F32);
            let ys = b.initializer(format!("{p}/y_scale"), QTensor::scalar_f32(y_scale.value()));
            let yz = zero(b, "y_zero_point", desc.output_dtype);
            b.quantize(format!("{p}/quantize"), &act_out, ys, yz, output);
        }
    }
}

/// Output shape of a layer for a given input shape.
pub(crate) fn layer_output_shape(desc: &HwLayerDescriptor, input: &[usize]) -> Result<Vec<usize>, BuildError> {
    let fail = |reason: String| BuildError::Shape {
        layer: desc.name.clone(),
        shape: input.to_vec(),
        reason,
    };
    match &desc.kind {
        LayerKind::FullyConnected => {
            if input.len() < 2 {
                return Err(fail("fully connected input needs rank >= 2".into()));
            }
            let k = *input.last().expect("rank >= 2");
            if k != desc.in_channels() {
                return Err(fail(format!("expects {} features, got {k}", desc.in_channels())));
            }
            let mut out = input.to_vec();
            *out.last_mut().expect("rank >= 2") = desc.out_channels();
            Ok(out)
        }
        LayerKind::Conv2D(a) => {
            if input.len() != 4 {
                return Err(fail("conv input must be N x C x H x W".into()));
            }
            if input[1] != desc.in_channels() {
                return Err(fail(format!("expects {} channels, got {}", desc.in_channels(), input[1])));
            }
            let spatial = |i: usize| -> Result<usize, BuildError> {
                let padded = input[2 + i] + a.pads[i] + a.pads[2 + i];
                if padded < a.kernel_shape[i] {
                    return Err(fail("kernel larger than padded input".into()));
                }
                Ok((padded - a.kernel_shape[i]) / a.strides[i] + 1)
            };
            Ok(vec![input[0], desc.out_channels(), spatial(0)?, spatial(1)?])
        }
    }
}

/// Assemble a complete graph: one input, the layers in order, one output.
/// Every quantization parameter ends up as an initializer.
pub fn build_model(layers: &[HwLayerDescriptor], input: &GraphInput) -> Result<GraphIR, BuildError> {
    let first = layers.first().ok_or(BuildError::Empty)?;
    let mut names = HashSet::new();
    for desc in layers {
        if !names.insert(desc.name.as_str()) {
            return Err(BuildError::Descriptor {
                layer: desc.name.clone(),
                reason: "layer name is used twice".into(),
            });
        }
    }

    let mut b = GraphBuilder::new("preq");
    let mut value = input.name.clone();
    let mut dtype = first.input_dtype;
    let mut shape = input.shape.clone();
    for desc in layers {
        if desc.input_dtype != dtype {
            return Err(BuildError::DtypeChain {
                layer: desc.name.clone(),
                expected: desc.input_dtype,
                got: dtype,
            });
        }
        desc.check()?;
        shape = layer_output_shape(desc, &shape)?;
        let out = format!("{}/out", desc.name);
        emit_layer(&mut b, desc, &value, &out);
        value = out;
        dtype = desc.output_dtype;
    }

    let mut g = b.finish();
    g.inputs.push(ValueInfo::new(&input.name, first.input_dtype, &input.shape));
    g.outputs.push(ValueInfo::new(value, dtype, &shape));
    g.ensure_valid()?;
    Ok(g)
}
