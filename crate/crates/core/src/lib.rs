//! Pre-quantized int8 models codified with standard ONNX operators.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod doc;
pub mod graphir;
pub mod interp;
pub mod patterns;
pub mod qmath;
pub mod quantizer;
pub mod validate;
