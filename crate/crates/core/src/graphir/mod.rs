//! In-memory model for the ONNX operator subset used by pre-quantized
//! layers, with structural validation and ONNX wire-format I/O.

mod check;
mod codec;
mod wire;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::qmath::{ElemType, QTensor};

pub use check::{validate, value_types, Diagnostic, Severity};
pub use codec::{parse, serialize};

/// Opset emitted by the builders.
pub const OPSET_VERSION: i64 = 13;
/// First opset that has MatMulInteger and ConvInteger.
pub const MIN_OPSET_VERSION: i64 = 10;
pub const IR_VERSION: i64 = 7;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed model at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported operator(s): {}", .0.join(", "))]
    UnsupportedOps(Vec<String>),
    #[error("graph failed validation: {}", first_error(.0))]
    Invalid(Vec<Diagnostic>),
}

fn first_error(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .find(|d| d.severity == Severity::Error)
        .map(|d| d.to_string())
        .unwrap_or_default()
}

/// The closed operator set. Anything else is carried as `Other` so that
/// validation can name it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpType {
    MatMulInteger,
    ConvInteger,
    Add,
    Mul,
    Cast,
    QuantizeLinear,
    Relu,
    Tanh,
    Sigmoid,
    Other(String),
}

impl OpType {
    pub fn parse(name: &str) -> OpType {
        match name {
            "MatMulInteger" => OpType::MatMulInteger,
            "ConvInteger" => OpType::ConvInteger,
            "Add" => OpType::Add,
            "Mul" => OpType::Mul,
            "Cast" => OpType::Cast,
            "QuantizeLinear" => OpType::QuantizeLinear,
            "Relu" => OpType::Relu,
            "Tanh" => OpType::Tanh,
            "Sigmoid" => OpType::Sigmoid,
            other => OpType::Other(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            OpType::MatMulInteger => "MatMulInteger",
            OpType::ConvInteger => "ConvInteger",
            OpType::Add => "Add",
            OpType::Mul => "Mul",
            OpType::Cast => "Cast",
            OpType::QuantizeLinear => "QuantizeLinear",
            OpType::Relu => "Relu",
            OpType::Tanh => "Tanh",
            OpType::Sigmoid => "Sigmoid",
            OpType::Other(s) => s,
        }
    }

    pub fn is_supported(&self) -> bool {
        !matches!(self, OpType::Other(_))
    }

    /// (min inputs, max inputs, outputs)
    pub(crate) fn arity(&self) -> Option<(usize, usize, usize)> {
        match self {
            OpType::MatMulInteger | OpType::ConvInteger => Some((2, 4, 1)),
            OpType::Add | OpType::Mul => Some((2, 2, 1)),
            OpType::QuantizeLinear => Some((2, 3, 1)),
            OpType::Cast | OpType::Relu | OpType::Tanh | OpType::Sigmoid => Some((1, 1, 1)),
            OpType::Other(_) => None,
        }
    }
}

impl fmt::Display for OpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Node attribute payload.
#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Float(f32),
    Int(i64),
    Ints(Vec<i64>),
    Tensor(QTensor),
    /// Only seen on third-party models (e.g. `auto_pad`).
    String(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeIR {
    pub op_type: OpType,
    pub name: String,
    /// An empty string marks an omitted optional input.
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub attributes: BTreeMap<String, AttrValue>,
}

impl NodeIR {
    pub fn new(op_type: OpType, name: impl Into<String>) -> NodeIR {
        NodeIR {
            op_type,
            name: name.into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_inputs<S: Into<String>>(mut self, inputs: impl IntoIterator<Item = S>) -> NodeIR {
        self.inputs = inputs.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_outputs<S: Into<String>>(mut self, outputs: impl IntoIterator<Item = S>) -> NodeIR {
        self.outputs = outputs.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_attr(mut self, name: &str, value: AttrValue) -> NodeIR {
        self.attributes.insert(name.to_string(), value);
        self
    }

    /// Input `i` if present and non-empty.
    pub fn input(&self, i: usize) -> Option<&str> {
        self.inputs.get(i).map(String::as_str).filter(|s| !s.is_empty())
    }

    pub fn attr_int(&self, name: &str) -> Option<i64> {
        match self.attributes.get(name) {
            Some(AttrValue::Int(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn attr_ints(&self, name: &str) -> Option<&[i64]> {
        match self.attributes.get(name) {
            Some(AttrValue::Ints(v)) => Some(v),
            _ => None,
        }
    }

    /// Name used in diagnostics: the node name, or op type and position.
    pub(crate) fn label(&self, index: usize) -> String {
        if self.name.is_empty() {
            format!("#{index} ({})", self.op_type)
        } else {
            self.name.clone()
        }
    }
}

/// One dimension of a declared value shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dim {
    Value(usize),
    Param(String),
    Unknown,
}

/// Declared graph input or output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueInfo {
    pub name: String,
    pub dtype: ElemType,
    /// `None` when the model leaves the rank unspecified.
    pub shape: Option<Vec<Dim>>,
}

impl ValueInfo {
    pub fn new(name: impl Into<String>, dtype: ElemType, shape: &[usize]) -> ValueInfo {
        ValueInfo {
            name: name.into(),
            dtype,
            shape: Some(shape.iter().map(|&d| Dim::Value(d)).collect()),
        }
    }

    /// Concrete extents, if every dimension is fixed.
    pub fn fixed_shape(&self) -> Option<Vec<usize>> {
        self.shape.as_ref()?.iter().map(|d| match d {
            Dim::Value(v) => Some(*v),
            _ => None,
        }).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphIR {
    pub name: String,
    pub nodes: Vec<NodeIR>,
    pub initializers: BTreeMap<String, QTensor>,
    pub inputs: Vec<ValueInfo>,
    pub outputs: Vec<ValueInfo>,
    pub opset_version: i64,
    /// `ModelProto.metadata_props`.
    pub metadata: BTreeMap<String, String>,
}

impl GraphIR {
    pub fn new(name: impl Into<String>) -> GraphIR {
        GraphIR {
            name: name.into(),
            nodes: Vec::new(),
            initializers: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            opset_version: OPSET_VERSION,
            metadata: BTreeMap::new(),
        }
    }

    /// Nodes that read `value`, in graph order.
    pub fn consumers<'a>(&'a self, value: &'a str) -> impl Iterator<Item = (usize, &'a NodeIR)> + 'a {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.inputs.iter().any(|i| i == value))
    }

    pub fn producer(&self, value: &str) -> Option<(usize, &NodeIR)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.outputs.iter().any(|o| o == value))
    }

    /// Fail with [`GraphError::Invalid`] if validation reports any error.
    pub fn ensure_valid(&self) -> Result<(), GraphError> {
        let diags = validate(self);
        if diags.iter().any(|d| d.severity == Severity::Error) {
            Err(GraphError::Invalid(diags))
        } else {
            Ok(())
        }
    }
}
