//! `ModelProto` encoding and decoding for the supported subset.
//!
//! Field numbers follow `onnx.proto`:
//!
//! ```text
//! ModelProto      ir_version=1 producer_name=2 graph=7 opset_import=8 metadata_props=14
//! OperatorSetId   domain=1 version=2
//! GraphProto      node=1 name=2 initializer=5 input=11 output=12
//! NodeProto       input=1 output=2 name=3 op_type=4 attribute=5 domain=7
//! AttributeProto  name=1 f=2 i=3 s=4 t=5 ints=8 type=20
//! TensorProto     dims=1 data_type=2 float_data=4 int32_data=5 name=8 raw_data=9 data_location=14
//! ValueInfoProto  name=1 type=2
//! TypeProto       tensor_type=1 { elem_type=1 shape=2 { dim=1 { dim_value=1 dim_param=2 } } }
//! StringStringEntryProto key=1 value=2
//! ```

use std::collections::BTreeMap;

use super::wire::{err, Reader, Writer};
use super::{AttrValue, Dim, GraphError, GraphIR, NodeIR, OpType, ValueInfo, IR_VERSION};
use crate::qmath::{ElemType, QTensor, TensorData, F16};

const PRODUCER: &str = "preq";

// AttributeProto.AttributeType
const ATTR_FLOAT: i64 = 1;
const ATTR_INT: i64 = 2;
const ATTR_STRING: i64 = 3;
const ATTR_TENSOR: i64 = 4;
const ATTR_INTS: i64 = 7;

/// Encode a validated graph as an ONNX model. Equal graphs give equal bytes.
pub fn serialize(g: &GraphIR) -> Result<Vec<u8>, GraphError> {
    g.ensure_valid()?;
    let mut w = Writer::default();
    w.int(1, IR_VERSION);
    w.string(2, PRODUCER);
    w.message(7, |w| write_graph(w, g));
    w.message(8, |w| w.int(2, g.opset_version));
    for (key, value) in &g.metadata {
        w.message(14, |w| {
            w.string(1, key);
            w.string(2, value);
        });
    }
    Ok(w.into_bytes())
}

fn write_graph(w: &mut Writer, g: &GraphIR) {
    for node in &g.nodes {
        w.message(1, |w| write_node(w, node));
    }
    w.string(2, &g.name);
    for (name, t) in &g.initializers {
        w.message(5, |w| write_tensor(w, name, t));
    }
    for vi in &g.inputs {
        w.message(11, |w| write_value_info(w, vi));
    }
    for vi in &g.outputs {
        w.message(12, |w| write_value_info(w, vi));
    }
}

fn write_node(w: &mut Writer, node: &NodeIR) {
    for i in &node.inputs {
        w.string(1, i);
    }
    for o in &node.outputs {
        w.string(2, o);
    }
    if !node.name.is_empty() {
        w.string(3, &node.name);
    }
    w.string(4, node.op_type.as_str());
    for (name, value) in &node.attributes {
        w.message(5, |w| {
            w.string(1, name);
            match value {
                AttrValue::Float(f) => {
                    w.float(2, *f);
                    w.int(20, ATTR_FLOAT);
                }
                AttrValue::Int(i) => {
                    w.int(3, *i);
                    w.int(20, ATTR_INT);
                }
                AttrValue::String(s) => {
                    w.string(4, s);
                    w.int(20, ATTR_STRING);
                }
                AttrValue::Tensor(t) => {
                    w.message(5, |w| write_tensor(w, "", t));
                    w.int(20, ATTR_TENSOR);
                }
                AttrValue::Ints(v) => {
                    for i in v {
                        w.int(8, *i);
                    }
                    w.int(20, ATTR_INTS);
                }
            }
        });
    }
}

fn write_tensor(w: &mut Writer, name: &str, t: &QTensor) {
    for &d in t.shape() {
        w.int(1, d as i64);
    }
    w.int(2, t.dtype().onnx_code() as i64);
    if !name.is_empty() {
        w.string(8, name);
    }
    w.bytes(9, &t.data().to_le_bytes());
}

fn write_value_info(w: &mut Writer, vi: &ValueInfo) {
    w.string(1, &vi.name);
    w.message(2, |w| {
        w.message(1, |w| {
            w.int(1, vi.dtype.onnx_code() as i64);
            if let Some(shape) = &vi.shape {
                w.message(2, |w| {
                    for d in shape {
                        w.message(1, |w| match d {
                            Dim::Value(v) => w.int(1, *v as i64),
                            Dim::Param(p) => w.string(2, p),
                            Dim::Unknown => {}
                        });
                    }
                });
            }
        });
    });
}

/// Decode an ONNX model. Unknown fields are skipped; operators outside the
/// supported set are an error listing every offending op type.
pub fn parse(bytes: &[u8]) -> Result<GraphIR, GraphError> {
    if bytes.is_empty() {
        return Err(err(0, "empty input"));
    }
    let mut r = Reader::new(bytes, 0);
    let mut graph = None;
    let mut opset = None;
    let mut metadata = BTreeMap::new();
    while let Some((field, value, at)) = r.next()? {
        match field {
            7 => {
                let (data, offset) = value.as_bytes(at)?;
                graph = Some(parse_graph(data, offset)?);
            }
            8 => {
                let (data, offset) = value.as_bytes(at)?;
                let (domain, version) = parse_opset(data, offset)?;
                if domain.is_empty() || domain == "ai.onnx" {
                    opset = Some(version);
                }
            }
            14 => {
                let (data, offset) = value.as_bytes(at)?;
                let (k, v) = parse_string_pair(data, offset)?;
                metadata.insert(k, v);
            }
            _ => {}
        }
    }
    let mut g = graph.ok_or_else(|| err(bytes.len(), "model has no graph"))?;
    g.opset_version = opset.ok_or_else(|| err(bytes.len(), "model imports no default-domain opset"))?;
    g.metadata = metadata;

    let mut unsupported: Vec<String> = g
        .nodes
        .iter()
        .filter(|n| !n.op_type.is_supported())
        .map(|n| n.op_type.to_string())
        .collect();
    if !unsupported.is_empty() {
        unsupported.sort();
        unsupported.dedup();
        return Err(GraphError::UnsupportedOps(unsupported));
    }
    Ok(g)
}

fn parse_opset(data: &[u8], base: usize) -> Result<(String, i64), GraphError> {
    let mut r = Reader::new(data, base);
    let mut domain = String::new();
    let mut version = 0;
    while let Some((field, value, at)) = r.next()? {
        match field {
            1 => domain = value.as_string(at)?,
            2 => version = value.as_int(at)?,
            _ => {}
        }
    }
    Ok((domain, version))
}

fn parse_string_pair(data: &[u8], base: usize) -> Result<(String, String), GraphError> {
    let mut r = Reader::new(data, base);
    let (mut k, mut v) = (String::new(), String::new());
    while let Some((field, value, at)) = r.next()? {
        match field {
            1 => k = value.as_string(at)?,
            2 => v = value.as_string(at)?,
            _ => {}
        }
    }
    Ok((k, v))
}

fn parse_graph(data: &[u8], base: usize) -> Result<GraphIR, GraphError> {
    let mut g = GraphIR::new("");
    let mut r = Reader::new(data, base);
    while let Some((field, value, at)) = r.next()? {
        match field {
            1 => {
                let (d, o) = value.as_bytes(at)?;
                g.nodes.push(parse_node(d, o)?);
            }
            2 => g.name = value.as_string(at)?,
            5 => {
                let (d, o) = value.as_bytes(at)?;
                let (name, t) = parse_tensor(d, o)?;
                if g.initializers.insert(name.clone(), t).is_some() {
                    return Err(err(at, format!("initializer `{name}` appears twice")));
                }
            }
            11 => {
                let (d, o) = value.as_bytes(at)?;
                g.inputs.push(parse_value_info(d, o)?);
            }
            12 => {
                let (d, o) = value.as_bytes(at)?;
                g.outputs.push(parse_value_info(d, o)?);
            }
            _ => {}
        }
    }
    Ok(g)
}

fn parse_node(data: &[u8], base: usize) -> Result<NodeIR, GraphError> {
    let mut r = Reader::new(data, base);
    let mut node = NodeIR::new(OpType::Other(String::new()), "");
    let mut op_type = String::new();
    let mut domain = String::new();
    while let Some((field, value, at)) = r.next()? {
        match field {
            1 => node.inputs.push(value.as_string(at)?),
            2 => node.outputs.push(value.as_string(at)?),
            3 => node.name = value.as_string(at)?,
            4 => op_type = value.as_string(at)?,
            5 => {
                let (d, o) = value.as_bytes(at)?;
                let (name, attr) = parse_attribute(d, o)?;
                node.attributes.insert(name, attr);
            }
            7 => domain = value.as_string(at)?,
            _ => {}
        }
    }
    node.op_type = if domain.is_empty() || domain == "ai.onnx" {
        OpType::parse(&op_type)
    } else {
        OpType::Other(format!("{domain}::{op_type}"))
    };
    Ok(node)
}

fn parse_attribute(data: &[u8], base: usize) -> Result<(String, AttrValue), GraphError> {
    let mut r = Reader::new(data, base);
    let mut name = String::new();
    let mut kind = None;
    let mut f = None;
    let mut i = None;
    let mut s = None;
    let mut t = None;
    let mut ints = Vec::new();
    let mut saw_ints = false;
    while let Some((field, value, at)) = r.next()? {
        match field {
            1 => name = value.as_string(at)?,
            2 => f = Some(value.as_float(at)?),
            3 => i = Some(value.as_int(at)?),
            4 => s = Some(value.as_string(at)?),
            5 => {
                let (d, o) = value.as_bytes(at)?;
                t = Some(parse_tensor(d, o)?.1);
            }
            8 => {
                saw_ints = true;
                value.push_ints(at, &mut ints)?;
            }
            20 => kind = Some(value.as_int(at)?),
            _ => {}
        }
    }
    // fall back on whichever payload is present when `type` is missing
    let kind = kind.unwrap_or(match () {
        _ if t.is_some() => ATTR_TENSOR,
        _ if saw_ints => ATTR_INTS,
        _ if s.is_some() => ATTR_STRING,
        _ if f.is_some() => ATTR_FLOAT,
        _ => ATTR_INT,
    });
    let value = match kind {
        ATTR_FLOAT => AttrValue::Float(f.unwrap_or(0.0)),
        ATTR_INT => AttrValue::Int(i.unwrap_or(0)),
        ATTR_STRING => AttrValue::String(s.unwrap_or_default()),
        ATTR_TENSOR => AttrValue::Tensor(
            t.ok_or_else(|| err(base, format!("tensor attribute `{name}` has no tensor")))?,
        ),
        ATTR_INTS => AttrValue::Ints(ints),
        other => {
            return Err(err(
                base,
                format!("attribute `{name}` has unsupported type {other}"),
            ))
        }
    };
    Ok((name, value))
}

fn parse_tensor(data: &[u8], base: usize) -> Result<(String, QTensor), GraphError> {
    let mut r = Reader::new(data, base);
    let mut dims = Vec::new();
    let mut data_type = None;
    let mut name = String::new();
    let mut raw = None;
    let mut floats = Vec::new();
    let mut int32s = Vec::new();
    while let Some((field, value, at)) = r.next()? {
        match field {
            1 => value.push_ints(at, &mut dims)?,
            2 => data_type = Some(value.as_int(at)?),
            4 => value.push_floats(at, &mut floats)?,
            5 => value.push_ints(at, &mut int32s)?,
            8 => name = value.as_string(at)?,
            9 => raw = Some(value.as_bytes(at)?.0),
            14 if value.as_int(at)? != 0 => {
                return Err(err(at, format!("tensor `{name}` uses external data")))
            }
            _ => {}
        }
    }
    let code = data_type.ok_or_else(|| err(base, format!("tensor `{name}` has no data_type")))?;
    let dtype = ElemType::from_onnx_code(code)
        .ok_or_else(|| err(base, format!("tensor `{name}` has unsupported data_type {code}")))?;
    let shape = dims
        .iter()
        .map(|&d| usize::try_from(d))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| err(base, format!("tensor `{name}` has a negative dimension")))?;

    let payload = match raw {
        Some(bytes) => TensorData::from_le_bytes(dtype, bytes)
            .ok_or_else(|| err(base, format!("tensor `{name}` raw_data has a partial element")))?,
        None => typed_payload(dtype, floats, int32s)
            .ok_or_else(|| err(base, format!("tensor `{name}` holds values outside {dtype}")))?,
    };
    let t = QTensor::new(shape, payload)
        .map_err(|e| err(base, format!("tensor `{name}`: {e}")))?;
    Ok((name, t))
}

fn typed_payload(dtype: ElemType, floats: Vec<f32>, int32s: Vec<i64>) -> Option<TensorData> {
    let ints = |lo: i64, hi: i64| int32s.iter().all(|&v| (lo..=hi).contains(&v));
    Some(match dtype {
        ElemType::F32 => TensorData::F32(floats),
        ElemType::I8 if ints(-128, 127) => TensorData::I8(int32s.iter().map(|&v| v as i8).collect()),
        ElemType::U8 if ints(0, 255) => TensorData::U8(int32s.iter().map(|&v| v as u8).collect()),
        // int32 values arrive sign-extended or as raw 32-bit patterns
        ElemType::I32 => TensorData::I32(int32s.iter().map(|&v| v as i32).collect()),
        ElemType::F16 if ints(0, 0xffff) => {
            TensorData::F16(int32s.iter().map(|&v| F16::from_bits(v as u16)).collect())
        }
        _ => return None,
    })
}

fn parse_value_info(data: &[u8], base: usize) -> Result<ValueInfo, GraphError> {
    let mut r = Reader::new(data, base);
    let mut name = String::new();
    let mut tensor_type = None;
    while let Some((field, value, at)) = r.next()? {
        match field {
            1 => name = value.as_string(at)?,
            2 => {
                let (d, o) = value.as_bytes(at)?;
                let mut tr = Reader::new(d, o);
                while let Some((f, v, a)) = tr.next()? {
                    if f == 1 {
                        let (d, o) = v.as_bytes(a)?;
                        tensor_type = Some(parse_tensor_type(d, o)?);
                    }
                }
            }
            _ => {}
        }
    }
    let (code, shape) =
        tensor_type.ok_or_else(|| err(base, format!("value `{name}` is not a tensor")))?;
    let dtype = ElemType::from_onnx_code(code)
        .ok_or_else(|| err(base, format!("value `{name}` has unsupported elem_type {code}")))?;
    Ok(ValueInfo { name, dtype, shape })
}

fn parse_tensor_type(data: &[u8], base: usize) -> Result<(i64, Option<Vec<Dim>>), GraphError> {
    let mut r = Reader::new(data, base);
    let mut elem = 0;
    let mut shape = None;
    while let Some((field, value, at)) = r.next()? {
        match field {
            1 => elem = value.as_int(at)?,
            2 => {
                let (d, o) = value.as_bytes(at)?;
                let mut dims = Vec::new();
                let mut sr = Reader::new(d, o);
                while let Some((f, v, a)) = sr.next()? {
                    if f == 1 {
                        let (d, o) = v.as_bytes(a)?;
                        dims.push(parse_dim(d, o)?);
                    }
                }
                shape = Some(dims);
            }
            _ => {}
        }
    }
    Ok((elem, shape))
}

fn parse_dim(data: &[u8], base: usize) -> Result<Dim, GraphError> {
    let mut r = Reader::new(data, base);
    let mut dim = Dim::Unknown;
    while let Some((field, value, at)) = r.next()? {
        match field {
            1 => {
                let v = value.as_int(at)?;
                dim = Dim::Value(
                    usize::try_from(v).map_err(|_| err(at, "negative dim_value"))?,
                );
            }
            2 => dim = Dim::Param(value.as_string(at)?),
            _ => {}
        }
    }
    Ok(dim)
}
