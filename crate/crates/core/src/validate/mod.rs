//! fp32 reference execution and quantized-versus-reference error reports.

use std::collections::BTreeMap;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::graphir::GraphIR;
use crate::interp::{run, RunError};
use crate::qmath::{quantize_tensor, QTensor, QuantError};
use crate::quantizer::{graph_scale, FloatLayer, FloatLayerKind, FloatModelSpec, META_INPUT_SCALE, META_OUTPUT_SCALE};

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("no samples to compare")]
    NoSamples,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model does not match graph: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Plain forward pass. Sums are accumulated in f64 and rounded to f32 once
/// per output element. Returns every layer output, after activation.
pub fn run_reference(model: &FloatModelSpec, input: &QTensor) -> Result<Vec<QTensor>, ValidateError> {
    let shapes = model.check().map_err(|e| ValidateError::Shape(e.to_string()))?;
    if input.shape() != model.input.shape {
        return Err(ValidateError::Shape(format!(
            "input has shape {:?}, model expects {:?}",
            input.shape(),
            model.input.shape
        )));
    }
    let mut x = input
        .as_f32()
        .ok_or_else(|| ValidateError::Shape(format!("input must be float32, got {}", input.dtype())))?
        .to_vec();
    let mut shape = model.input.shape.clone();
    let mut outs = Vec::with_capacity(model.layers.len());
    for (layer, out_shape) in model.layers.iter().zip(shapes) {
        let mut y = match layer.kind {
            FloatLayerKind::FullyConnected => dense(layer, &x),
            FloatLayerKind::Conv2d => conv(layer, &x, &shape, &out_shape),
        };
        for v in &mut y {
            *v = layer.activation.apply(*v);
        }
        outs.push(QTensor::from_f32(out_shape.clone(), y.clone()).expect("shape from check"));
        x = y;
        shape = out_shape;
    }
    Ok(outs)
}

fn dense(layer: &FloatLayer, x: &[f32]) -> Vec<f32> {
    let (out, inp) = (layer.weights.shape[0], layer.weights.shape[1]);
    let w = &layer.weights.data;
    x.chunks(inp)
        .flat_map(|row| {
            (0..out).map(move |o| {
                let acc: f64 = row.iter().zip(&w[o * inp..(o + 1) * inp]).map(|(&a, &b)| a as f64 * b as f64).sum();
                (acc + layer.bias[o] as f64) as f32
            })
        })
        .collect()
}

fn conv(layer: &FloatLayer, x: &[f32], shape: &[usize], out_shape: &[usize]) -> Vec<f32> {
    let (c, h, wd) = (shape[1], shape[2], shape[3]);
    let (m, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let (kh, kw) = (layer.weights.shape[2], layer.weights.shape[3]);
    let [sh, sw] = layer.strides();
    let [pt, pl, _, _] = layer.pads();
    let w = &layer.weights.data;
    let mut y = Vec::with_capacity(out_shape.iter().product());
    for b in 0..shape[0] {
        for oc in 0..m {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = layer.bias[oc] as f64;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * sh + ky) as isize - pt as isize;
                                let ix = (ox * sw + kx) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    y.push(acc as f32);
                }
            }
        }
    }
    y
}

fn sqnr_repr<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

/// Quantized output against the reference, in real units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub output: String,
    pub samples: usize,
    pub elements: usize,
    pub output_scale: f32,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    /// `max_abs_error / output_scale`
    pub max_error_steps: f64,
    /// Infinite when there is no error at all.
    #[serde(serialize_with = "sqnr_repr")]
    pub sqnr_db: f64,
    /// Input elements clipped by input quantization.
    pub input_saturated: usize,
    /// Output codes sitting on either rail of their type.
    pub output_saturated: usize,
    pub cast_inexact: usize,
}

/// Sum after sorting, so that the result does not depend on sample order.
fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Quantize each sample with the graph's input scale, run the graph,
/// dequantize with its output scale and compare against [`run_reference`].
pub fn compare(model: &FloatModelSpec, g: &GraphIR, samples: &[QTensor]) -> Result<ErrorReport, ValidateError> {
    if samples.is_empty() {
        return Err(ValidateError::NoSamples);
    }
    let scale = |key: &str| {
        graph_scale(g, key).ok_or_else(|| ValidateError::Mismatch(format!("graph metadata lacks a valid `{key}`")))
    };
    let (sx, sy) = (scale(META_INPUT_SCALE)?, scale(META_OUTPUT_SCALE)?);
    let ([input], [output]) = (&g.inputs[..], &g.outputs[..]) else {
        return Err(ValidateError::Mismatch("graph must have one input and one output".into()));
    };
    let (lo, hi) = output
        .dtype
        .int_range()
        .ok_or_else(|| ValidateError::Mismatch(format!("output type {} is not integer", output.dtype)))?;

    let mut errs = Vec::new();
    let mut signal = Vec::new();
    let (mut input_saturated, mut output_saturated, mut cast_inexact) = (0, 0, 0);
    for x in samples {
        let reference = run_reference(model, x)?.pop().expect("model has layers");
        let (rlo, rhi) = input.dtype.int_range().unwrap_or((0, 0));
        let xv = x.as_f32().expect("checked by run_reference");
        input_saturated += xv
            .iter()
            .filter(|&&v| {
                let q = (v / sx.value()).round_ties_even();
                q < rlo as f32 || q > rhi as f32
            })
            .count();
        let xq = quantize_tensor(x, sx, input.dtype)?;
        let result = run(g, &BTreeMap::from([(input.name.clone(), xq)]))?;
        cast_inexact += result.cast_inexact;
        let y = &result.outputs[&output.name];
        if y.shape() != reference.shape() {
            return Err(ValidateError::Mismatch(format!(
                "graph output shape {:?}, reference {:?}",
                y.shape(),
                reference.shape()
            )));
        }
        let codes = y.to_i64_vec().expect("integer output");
        output_saturated += codes.iter().filter(|&&c| c == lo || c == hi).count();
        for (&c, &r) in codes.iter().zip(reference.as_f32().expect("f32")) {
            let deq = (sy.value() * c as f32) as f64;
            errs.push((deq - r as f64).abs());
            signal.push(r as f64 * r as f64);
        }
    }
    let elements = errs.len();
    let max_abs_error = errs.iter().copied().fold(0.0, f64::max);
    let err_power = ordered_sum(errs.iter().map(|e| e * e).collect());
    let mean_abs_error = ordered_sum(errs) / elements.max(1) as f64;
    let sig_power = ordered_sum(signal);
    let sqnr_db = if err_power == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (sig_power / err_power).log10()
    };
    Ok(ErrorReport {
        output: output.name.clone(),
        samples: samples.len(),
        elements,
        output_scale: sy.value(),
        max_abs_error,
        mean_abs_error,
        max_error_steps: max_abs_error / sy.value() as f64,
        sqnr_db,
        input_saturated,
        output_saturated,
        cast_inexact,
    })
}
