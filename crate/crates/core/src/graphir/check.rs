use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::{AttrValue, GraphIR, NodeIR, OpType, MIN_OPSET_VERSION};
use crate::qmath::ElemType;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    /// Offending node, `None` for graph-level problems.
    pub node: Option<String>,
    pub severity: Severity,
    pub message: String,
}

impl Diagnostic {
    fn error(node: Option<String>, message: impl Into<String>) -> Diagnostic {
        Diagnostic {
            node,
            severity: Severity::Error,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        match &self.node {
            Some(n) => write!(f, "{sev}: node {n}: {}", self.message),
            None => write!(f, "{sev}: {}", self.message),
        }
    }
}

/// Check topology, single assignment, operator set, arities and dtype flow.
/// An empty result means the graph is well formed.
pub fn validate(g: &GraphIR) -> Vec<Diagnostic> {
    check(g).0
}

/// Element type of every value whose type could be inferred: graph inputs,
/// initializers and node outputs.
pub fn value_types(g: &GraphIR) -> BTreeMap<String, ElemType> {
    check(g)
        .1
        .into_iter()
        .filter_map(|(name, t)| Some((name.to_string(), t?)))
        .collect()
}

fn check(g: &GraphIR) -> (Vec<Diagnostic>, HashMap<&str, Option<ElemType>>) {
    let mut diags = Vec::new();
    if g.opset_version < MIN_OPSET_VERSION {
        diags.push(Diagnostic::error(
            None,
            format!(
                "opset {} predates the integer operators (need >= {MIN_OPSET_VERSION})",
                g.opset_version
            ),
        ));
    }

    // None marks a value whose type could not be inferred.
    let mut types: HashMap<&str, Option<ElemType>> = HashMap::new();
    for vi in &g.inputs {
        if types.insert(&vi.name, Some(vi.dtype)).is_some() {
            diags.push(Diagnostic::error(
                None,
                format!("graph input `{}` is declared twice", vi.name),
            ));
        }
    }
    for (name, t) in &g.initializers {
        if types.insert(name, Some(t.dtype())).is_some() {
            diags.push(Diagnostic::error(
                None,
                format!("initializer `{name}` redefines a graph input"),
            ));
        }
    }

    for (index, node) in g.nodes.iter().enumerate() {
        let label = node.label(index);
        let before = diags.len();
        let err = |msg: String| Diagnostic::error(Some(label.clone()), msg);

        let Some((min_in, max_in, n_out)) = node.op_type.arity() else {
            diags.push(err(format!("unsupported operator `{}`", node.op_type)));
            define_outputs(node, &mut types, None, &label, &mut diags);
            continue;
        };
        if node.inputs.len() < min_in || node.inputs.len() > max_in {
            diags.push(err(format!(
                "{} takes {min_in}..={max_in} inputs, got {}",
                node.op_type,
                node.inputs.len()
            )));
        }
        if node.outputs.len() != n_out {
            diags.push(err(format!(
                "{} produces {n_out} output(s), got {}",
                node.op_type,
                node.outputs.len()
            )));
        }

        let mut in_types = Vec::with_capacity(node.inputs.len());
        for (i, name) in node.inputs.iter().enumerate() {
            if name.is_empty() {
                if i < min_in {
                    diags.push(err(format!("required input {i} is empty")));
                }
                in_types.push(None);
                continue;
            }
            match types.get(name.as_str()) {
                Some(t) => in_types.push(*t),
                None => {
                    diags.push(err(format!("input `{name}` is not defined before use")));
                    in_types.push(None);
                }
            }
        }

        let out_type = if diags.len() == before {
            match infer(node, &in_types, g) {
                Ok(t) => Some(t),
                Err(msg) => {
                    diags.push(err(msg));
                    None
                }
            }
        } else {
            None
        };
        define_outputs(node, &mut types, out_type, &label, &mut diags);
    }

    let mut seen = std::collections::HashSet::new();
    for vi in &g.outputs {
        if !seen.insert(vi.name.as_str()) {
            diags.push(Diagnostic::error(
                None,
                format!("graph output `{}` is declared twice", vi.name),
            ));
        }
        match types.get(vi.name.as_str()) {
            None => diags.push(Diagnostic::error(
                None,
                format!("graph output `{}` is never produced", vi.name),
            )),
            Some(Some(t)) if *t != vi.dtype => diags.push(Diagnostic::error(
                None,
                format!(
                    "graph output `{}` is declared {} but computed as {t}",
                    vi.name, vi.dtype
                ),
            )),
            _ => {}
        }
    }
    (diags, types)
}

fn define_outputs<'g>(
    node: &'g NodeIR,
    types: &mut HashMap<&'g str, Option<ElemType>>,
    t: Option<ElemType>,
    label: &str,
    diags: &mut Vec<Diagnostic>,
) {
    for out in &node.outputs {
        if out.is_empty() {
            diags.push(Diagnostic::error(Some(label.to_string()), "empty output name"));
        } else if types.insert(out, t).is_some() {
            diags.push(Diagnostic::error(
                Some(label.to_string()),
                format!("value `{out}` is assigned more than once"),
            ));
        }
    }
}

fn expect(t: Option<ElemType>, allowed: &[ElemType], what: &str) -> Result<ElemType, String> {
    match t {
        Some(t) if allowed.contains(&t) => Ok(t),
        Some(t) => Err(format!(
            "{what} must be one of [{}], got {t}",
            allowed.iter().map(|a| a.name()).collect::<Vec<_>>().join(", ")
        )),
        None => Err(format!("{what} has no inferable type")),
    }
}

fn is_scalar_init(g: &GraphIR, name: Option<&str>) -> bool {
    name.and_then(|n| g.initializers.get(n))
        .is_none_or(|t| t.len() == 1)
}

const INT8S: [ElemType; 2] = [ElemType::I8, ElemType::U8];
const ARITH: [ElemType; 3] = [ElemType::I32, ElemType::F32, ElemType::F16];

fn infer(node: &NodeIR, t: &[Option<ElemType>], g: &GraphIR) -> Result<ElemType, String> {
    let opt = |i: usize| t.get(i).copied().flatten();
    match &node.op_type {
        OpType::MatMulInteger | OpType::ConvInteger => {
            let a = expect(opt(0), &INT8S, "data input")?;
            let b = expect(opt(1), &[ElemType::I8], "weight input")?;
            for (i, want) in [(2, a), (3, b)] {
                if node.input(i).is_some() {
                    expect(opt(i), &[want], "zero point")?;
                    if !is_scalar_init(g, node.input(i)) {
                        return Err("only per-tensor zero points are supported".into());
                    }
                }
            }
            if node.op_type == OpType::ConvInteger {
                check_conv_attrs(node)?;
            }
            Ok(ElemType::I32)
        }
        OpType::Add | OpType::Mul => {
            let a = expect(opt(0), &ARITH, "operand A")?;
            expect(opt(1), &[a], "operand B")?;
            Ok(a)
        }
        OpType::Cast => match node.attributes.get("to") {
            Some(AttrValue::Int(code)) => ElemType::from_onnx_code(*code)
                .ok_or_else(|| format!("Cast to unsupported element type {code}")),
            _ => Err("Cast needs an integer `to` attribute".into()),
        },
        OpType::QuantizeLinear => {
            expect(opt(0), &[ElemType::F32, ElemType::I32, ElemType::F16], "x")?;
            expect(opt(1), &[ElemType::F32], "y_scale")?;
            if !is_scalar_init(g, node.input(1)) {
                return Err("only per-tensor y_scale is supported".into());
            }
            if node.input(2).is_some() {
                if !is_scalar_init(g, node.input(2)) {
                    return Err("only per-tensor y_zero_point is supported".into());
                }
                expect(opt(2), &INT8S, "y_zero_point")
            } else {
                Ok(ElemType::U8)
            }
        }
        OpType::Relu => expect(
            opt(0),
            &[ElemType::I8, ElemType::I32, ElemType::F32, ElemType::F16],
            "Relu input",
        ),
        OpType::Tanh | OpType::Sigmoid => {
            expect(opt(0), &[ElemType::F32, ElemType::F16], "activation input")
        }
        OpType::Other(name) => Err(format!("unsupported operator `{name}`")),
    }
}

fn check_conv_attrs(node: &NodeIR) -> Result<(), String> {
    for (name, value) in &node.attributes {
        match (name.as_str(), value) {
            ("strides", AttrValue::Ints(v)) => {
                if v.len() != 2 || v.iter().any(|&s| s < 1) {
                    return Err(format!("strides {v:?} must be two positive values"));
                }
            }
            ("pads", AttrValue::Ints(v)) => {
                if v.len() != 4 || v.iter().any(|&p| p < 0) {
                    return Err(format!("pads {v:?} must be four non-negative values"));
                }
            }
            ("kernel_shape", AttrValue::Ints(v)) => {
                if v.len() != 2 || v.iter().any(|&k| k < 1) {
                    return Err(format!("kernel_shape {v:?} must be two positive values"));
                }
            }
            ("dilations", AttrValue::Ints(v)) => {
                if v.iter().any(|&d| d != 1) {
                    return Err("dilations other than 1 are not supported".into());
                }
            }
            ("group", AttrValue::Int(1)) => {}
            ("group", _) => return Err("group must be 1".into()),
            ("auto_pad", AttrValue::String(s)) if s == "NOTSET" => {}
            (other, _) => return Err(format!("unsupported ConvInteger attribute `{other}`")),
        }
    }
    Ok(())
}
