use std::collections::HashMap;

use super::{
    ActivationSpec, ConvAttrs, ExtractError, HwLayerDescriptor, LayerKind, RescaleCodification,
};
use crate::graphir::{GraphIR, NodeIR, OpType, Severity};
use crate::qmath::{
    decompose_rescale, neg_pow2_exponent, ElemType, QTensor, RescaleSpec, Scale, MAX_QUANT_SCALE,
};

/// Recover the layer descriptors from a graph that follows the codified
/// patterns, walking from the graph input to the graph output. Every node
/// must belong to some layer.
pub fn extract(g: &GraphIR) -> Result<Vec<HwLayerDescriptor>, ExtractError> {
    let diags = crate::graphir::validate(g);
    if diags.iter().any(|d| d.severity == Severity::Error) {
        return Err(ExtractError::Invalid(diags));
    }
    let graph_level = |reason: &str| ExtractError::Mismatch {
        node: "<graph>".into(),
        reason: reason.into(),
    };
    let [input] = g.inputs.as_slice() else {
        return Err(graph_level("expected exactly one graph input"));
    };
    let [output] = g.outputs.as_slice() else {
        return Err(graph_level("expected exactly one graph output"));
    };

    let mut m = Matcher::new(g, input.name.clone());
    let mut dtype = input.dtype;
    let mut layers = Vec::new();
    while m.value != output.name {
        let desc = m.layer(dtype)?;
        dtype = desc.output_dtype;
        layers.push(desc);
    }
    if let Some(i) = m.visited.iter().position(|v| !v) {
        return Err(ExtractError::Mismatch {
            node: g.nodes[i].label(i),
            reason: "node is not part of any layer pattern".into(),
        });
    }
    if layers.is_empty() {
        return Err(graph_level("graph contains no layers"));
    }
    Ok(layers)
}

struct Matcher<'g> {
    g: &'g GraphIR,
    consumers: HashMap<&'g str, Vec<usize>>,
    visited: Vec<bool>,
    /// The value the walk has reached.
    value: String,
}

impl<'g> Matcher<'g> {
    fn new(g: &'g GraphIR, start: String) -> Matcher<'g> {
        let mut consumers: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, n) in g.nodes.iter().enumerate() {
            for input in &n.inputs {
                consumers.entry(input.as_str()).or_default().push(i);
            }
        }
        Matcher {
            g,
            consumers,
            visited: vec![false; g.nodes.len()],
            value: start,
        }
    }

    fn mismatch(&self, i: usize, reason: impl Into<String>) -> ExtractError {
        ExtractError::Mismatch {
            node: self.g.nodes[i].label(i),
            reason: reason.into(),
        }
    }

    fn codification(&self, i: usize, reason: impl Into<String>) -> ExtractError {
        ExtractError::Codification {
            node: self.g.nodes[i].label(i),
            reason: reason.into(),
        }
    }

    /// The only node reading the current value.
    fn peek(&self) -> Result<(usize, &'g NodeIR), ExtractError> {
        match self.consumers.get(self.value.as_str()).map(Vec::as_slice) {
            Some([i]) => Ok((*i, &self.g.nodes[*i])),
            Some([i, ..]) => Err(self.mismatch(
                *i,
                format!("value `{}` fans out to several nodes", self.value),
            )),
            _ => Err(ExtractError::Mismatch {
                node: "<graph>".into(),
                reason: format!("value `{}` is never consumed", self.value),
            }),
        }
    }

    /// Consume the next node, which must be `op` reading the current value.
    /// Returns its index, the node and the other (non-current) input if any.
    fn step(&mut self, op: OpType) -> Result<(usize, &'g NodeIR, Option<&'g str>), ExtractError> {
        let (i, node) = self.peek()?;
        if node.op_type != op {
            return Err(self.mismatch(i, format!("expected {op}, found {}", node.op_type)));
        }
        let other = match node.inputs.iter().position(|x| *x == self.value) {
            Some(0) => node.input(1),
            Some(1) if matches!(op, OpType::Add | OpType::Mul) => node.input(0),
            _ => return Err(self.mismatch(i, format!("`{}` is not the data input", self.value))),
        };
        self.visited[i] = true;
        self.value = node.outputs[0].clone();
        Ok((i, node, other))
    }

    fn init(&self, i: usize, name: Option<&str>, what: &str) -> Result<&'g QTensor, ExtractError> {
        name.and_then(|n| self.g.initializers.get(n))
            .ok_or_else(|| self.mismatch(i, format!("{what} must be an initializer")))
    }

    fn scalar_f32(&self, i: usize, name: Option<&str>, what: &str) -> Result<f32, ExtractError> {
        let t = self.init(i, name, what)?;
        match t.as_f32() {
            Some([v]) => Ok(*v),
            _ => Err(self.mismatch(i, format!("{what} must be a float scalar"))),
        }
    }

    fn check_zero(&self, i: usize, name: Option<&str>) -> Result<Option<ElemType>, ExtractError> {
        if name.is_none() {
            return Ok(None);
        }
        let t = self.init(i, name, "zero point")?;
        if t.scalar_value() != Some(0.0) {
            return Err(self.mismatch(i, "zero point must be 0"));
        }
        Ok(Some(t.dtype()))
    }

    fn cast_to(&mut self, to: ElemType) -> Result<(), ExtractError> {
        let (i, node, _) = self.step(OpType::Cast)?;
        if node.attr_int("to") != Some(to.onnx_code() as i64) {
            return Err(self.mismatch(i, format!("expected a Cast to {to}")));
        }
        Ok(())
    }

    /// QuantizeLinear with a scalar scale; returns (scale, output dtype).
    fn quantize(&mut self) -> Result<(usize, f32, ElemType), ExtractError> {
        let (i, node, _) = self.step(OpType::QuantizeLinear)?;
        let scale = self.scalar_f32(i, node.input(1), "y_scale")?;
        let dtype = self.check_zero(i, node.input(2))?.unwrap_or(ElemType::U8);
        Ok((i, scale, dtype))
    }

    fn layer(&mut self, input_dtype: ElemType) -> Result<HwLayerDescriptor, ExtractError> {
        let (head_i, head) = self.peek()?;
        let kind_op = match head.op_type {
            OpType::MatMulInteger | OpType::ConvInteger => head.op_type.clone(),
            _ => {
                return Err(self.mismatch(
                    head_i,
                    format!("expected MatMulInteger or ConvInteger, found {}", head.op_type),
                ))
            }
        };
        let (_, head, weight_name) = self.step(kind_op.clone())?;
        let weights = self.init(head_i, weight_name, "weight")?.clone();
        self.check_zero(head_i, head.input(2))?;
        self.check_zero(head_i, head.input(3))?;

        let kind = if kind_op == OpType::MatMulInteger {
            if weights.rank() != 2 {
                return Err(self.mismatch(head_i, "MatMulInteger weights must be rank 2"));
            }
            LayerKind::FullyConnected
        } else {
            if weights.rank() != 4 {
                return Err(self.mismatch(head_i, "ConvInteger weights must be rank 4"));
            }
            let pair = |name: &str, default: [usize; 2]| -> [usize; 2] {
                head.attr_ints(name)
                    .map(|v| [v[0] as usize, v[1] as usize])
                    .unwrap_or(default)
            };
            let pads = head
                .attr_ints("pads")
                .map(|v| [v[0] as usize, v[1] as usize, v[2] as usize, v[3] as usize])
                .unwrap_or([0; 4]);
            let ws = weights.shape();
            LayerKind::Conv2D(ConvAttrs {
                strides: pair("strides", [1, 1]),
                pads,
                kernel_shape: pair("kernel_shape", [ws[2], ws[3]]),
            })
        };
        let out_ch = match kind {
            LayerKind::FullyConnected => weights.shape()[1],
            LayerKind::Conv2D(_) => weights.shape()[0],
        };

        let (add_i, _, bias_name) = self.step(OpType::Add)?;
        let bias = self.init(add_i, bias_name, "bias")?;
        let bias_ok = bias.dtype() == ElemType::I32
            && match kind {
                LayerKind::FullyConnected => bias.shape() == [out_ch],
                LayerKind::Conv2D(_) => {
                    bias.shape() == [1, out_ch, 1, 1] || bias.shape() == [out_ch, 1, 1]
                }
            };
        if !bias_ok {
            return Err(self.mismatch(
                add_i,
                format!("bias {:?} does not match {out_ch} output channels", bias.shape()),
            ));
        }
        let bias = bias.reshaped(vec![out_ch]).expect("element count checked");

        self.cast_to(ElemType::F32)?;
        let (codification, rescale) = self.rescale()?;
        let activation = self.activation()?;
        let output_dtype = activation.1;

        Ok(HwLayerDescriptor {
            name: layer_name(head),
            kind,
            weights,
            bias,
            rescale,
            codification,
            activation: activation.0,
            input_dtype,
            output_dtype,
        })
    }

    fn rescale(&mut self) -> Result<(RescaleCodification, RescaleSpec), ExtractError> {
        let (first_i, _, c) = self.step(OpType::Mul)?;
        let first_c = self.scalar_f32(first_i, c, "rescale constant")?;

        let second = match self.peek() {
            Ok((i, n)) if n.op_type == OpType::Mul => {
                let other = n.inputs.iter().find(|x| **x != self.value).map(String::as_str);
                self.g.initializers.get(other.unwrap_or("")).map(|_| i)
            }
            _ => None,
        };
        match second {
            Some(_) => {
                let (shift_i, _, c2) = self.step(OpType::Mul)?;
                let shift_c = self.scalar_f32(shift_i, c2, "shift constant")?;
                if !(first_c >= 1.0 && first_c <= MAX_QUANT_SCALE as f32 && first_c.fract() == 0.0) {
                    return Err(self.codification(
                        first_i,
                        format!("quant_scale {first_c} is not an integer in [1, 2^24]"),
                    ));
                }
                let n = neg_pow2_exponent(shift_c).ok_or_else(|| {
                    self.codification(shift_i, format!("quant_shift {shift_c} is not 2^-N"))
                })?;
                let spec = RescaleSpec::from_parts(first_c as u32, n)
                    .map_err(|e| self.codification(shift_i, e.to_string()))?;
                Ok((RescaleCodification::TwoMul, spec))
            }
            None => {
                let spec = decompose_rescale(first_c as f64)
                    .map_err(|e| self.codification(first_i, e.to_string()))?;
                Ok((RescaleCodification::OneMul, spec))
            }
        }
    }

    fn activation(&mut self) -> Result<(ActivationSpec, ElemType), ExtractError> {
        let (i, next) = self.peek()?;
        match next.op_type {
            OpType::Relu => {
                self.step(OpType::Relu)?;
                let (qi, scale, dtype) = self.quantize()?;
                self.expect_unit(qi, scale)?;
                if dtype != ElemType::I8 {
                    return Err(self.mismatch(qi, "relu layers produce int8"));
                }
                Ok((ActivationSpec::Relu, dtype))
            }
            OpType::QuantizeLinear => {
                let (qi, scale, dtype) = self.quantize()?;
                self.expect_unit(qi, scale)?;
                let tanh_follows = matches!(self.peek(), Ok((_, n)) if n.op_type == OpType::Cast);
                if !tanh_follows {
                    if dtype != ElemType::I8 {
                        return Err(self.mismatch(qi, "layers without activation produce int8"));
                    }
                    return Ok((ActivationSpec::None, dtype));
                }
                if dtype != ElemType::I8 {
                    return Err(self.mismatch(qi, "int8 tanh input must be int8"));
                }
                self.cast_to(ElemType::F32)?;
                let (mi, _, c) = self.step(OpType::Mul)?;
                let x_step = self.scalar_f32(mi, c, "tanh input step")?;
                if !(x_step > 0.0) || !x_step.is_finite() {
                    return Err(self.mismatch(mi, "tanh input step must be positive"));
                }
                self.step(OpType::Tanh)?;
                let (yi, y_scale, out) = self.quantize()?;
                let y_scale = self.positive(yi, y_scale)?;
                if out != ElemType::I8 {
                    return Err(self.mismatch(yi, "int8 tanh output must be int8"));
                }
                Ok((ActivationSpec::TanhI8 { x_step, y_scale }, out))
            }
            OpType::Cast => {
                self.cast_to(ElemType::F16)?;
                let (ai, act) = self.peek()?;
                let op = act.op_type.clone();
                if !matches!(op, OpType::Tanh | OpType::Sigmoid) {
                    return Err(self.mismatch(ai, format!("expected Tanh or Sigmoid, found {op}")));
                }
                self.step(op.clone())?;
                self.cast_to(ElemType::F32)?;
                let (yi, y_scale, out) = self.quantize()?;
                let y_scale = self.positive(yi, y_scale)?;
                match (op, out) {
                    (OpType::Tanh, ElemType::I8) => Ok((ActivationSpec::TanhF16 { y_scale }, out)),
                    (OpType::Sigmoid, ElemType::U8) => {
                        Ok((ActivationSpec::SigmoidF16 { y_scale }, out))
                    }
                    (_, out) => Err(self.mismatch(yi, format!("unexpected {out} output for {}", act.op_type))),
                }
            }
            _ => Err(self.mismatch(
                i,
                format!("expected an activation or QuantizeLinear, found {}", next.op_type),
            )),
        }
    }

    fn expect_unit(&self, i: usize, scale: f32) -> Result<(), ExtractError> {
        if scale != 1.0 {
            return Err(self.mismatch(
                i,
                format!("rounding QuantizeLinear must have scale 1, found {scale}"),
            ));
        }
        Ok(())
    }

    fn positive(&self, i: usize, v: f32) -> Result<Scale, ExtractError> {
        Scale::new(v).map_err(|e| self.mismatch(i, e.to_string()))
    }
}

/// Layer name from the head node's `<layer>/<stage>` name.
fn layer_name(head: &NodeIR) -> String {
    match head.name.rsplit_once('/') {
        Some((layer, _)) if !layer.is_empty() => layer.to_string(),
        _ if !head.name.is_empty() => head.name.clone(),
        _ => head.outputs[0].clone(),
    }
}
