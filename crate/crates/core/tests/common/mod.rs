//! Generators and brute-force oracles shared by the integration tests. The
//! oracles deliberately avoid the library's kernels: integer sums are plain
//! loops, binary16 rounding comes from the `half` crate.
#![allow(dead_code)]

use half::f16;
use preq::patterns::{
    ActivationSpec, ConvAttrs, GraphInput, HwLayerDescriptor, LayerKind, RescaleCodification,
};
use preq::qmath::{ElemType, QTensor, Scale};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn log_uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (r.gen_range(lo.ln()..hi.ln())).exp()
}

pub fn random_i8(r: &mut ChaCha8Rng, n: usize) -> Vec<i8> {
    (0..n).map(|_| r.gen()).collect()
}

pub fn random_codes(r: &mut ChaCha8Rng, dtype: ElemType, shape: Vec<usize>) -> QTensor {
    let n = shape.iter().product();
    match dtype {
        ElemType::U8 => QTensor::from_u8(shape, (0..n).map(|_| r.gen()).collect()).unwrap(),
        _ => QTensor::from_i8(shape, random_i8(r, n)).unwrap(),
    }
}

pub fn random_activation(r: &mut ChaCha8Rng) -> ActivationSpec {
    match r.gen_range(0..5) {
        0 => ActivationSpec::None,
        1 => ActivationSpec::Relu,
        2 => {
            let ys = Scale::new(if r.gen() { 1.0 / 127.0 } else { r.gen_range(0.005..0.01) }).unwrap();
            ActivationSpec::tanh_i8(r.gen_range(1.0..6.0), ys).unwrap()
        }
        3 => ActivationSpec::TanhF16 {
            y_scale: Scale::new(r.gen_range(1.0 / 200.0..1.0 / 100.0)).unwrap(),
        },
        _ => ActivationSpec::SigmoidF16 {
            y_scale: Scale::new(r.gen_range(1.0 / 300.0..1.0 / 250.0)).unwrap(),
        },
    }
}

pub fn random_codification(r: &mut ChaCha8Rng) -> RescaleCodification {
    if r.gen() {
        RescaleCodification::TwoMul
    } else {
        RescaleCodification::OneMul
    }
}

/// A multiplier that maps typical accumulators for `fan_in` inputs onto the
/// activation's working range.
pub fn plausible_multiplier(r: &mut ChaCha8Rng, act: &ActivationSpec, fan_in: usize) -> f64 {
    let typical_acc = 128.0 * 128.0 * (fan_in as f64).sqrt() / 2.0;
    let target = match act {
        ActivationSpec::TanhF16 { .. } | ActivationSpec::SigmoidF16 { .. } => 4.0,
        _ => 100.0,
    };
    (target / typical_acc) * log_uniform(r, 0.25, 4.0)
}

pub fn fc_layer(
    r: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    input_dtype: ElemType,
    activation: ActivationSpec,
    codification: RescaleCodification,
) -> HwLayerDescriptor {
    let m = plausible_multiplier(r, &activation, fan_in);
    HwLayerDescriptor {
        name: name.into(),
        kind: LayerKind::FullyConnected,
        weights: QTensor::from_i8(vec![fan_in, fan_out], random_i8(r, fan_in * fan_out)).unwrap(),
        bias: QTensor::from_i32(vec![fan_out], (0..fan_out).map(|_| r.gen_range(-40000..=40000)).collect()).unwrap(),
        rescale: codification.rescale_for(m).unwrap(),
        codification,
        output_dtype: activation.output_dtype(),
        activation,
        input_dtype,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_layer(
    r: &mut ChaCha8Rng,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    attrs: ConvAttrs,
    input_dtype: ElemType,
    activation: ActivationSpec,
    codification: RescaleCodification,
) -> HwLayerDescriptor {
    let [kh, kw] = attrs.kernel_shape;
    let fan_in = in_ch * kh * kw;
    let m = plausible_multiplier(r, &activation, fan_in);
    HwLayerDescriptor {
        name: name.into(),
        kind: LayerKind::Conv2D(attrs),
        weights: QTensor::from_i8(vec![out_ch, in_ch, kh, kw], random_i8(r, out_ch * fan_in)).unwrap(),
        bias: QTensor::from_i32(vec![out_ch], (0..out_ch).map(|_| r.gen_range(-40000..=40000)).collect()).unwrap(),
        rescale: codification.rescale_for(m).unwrap(),
        codification,
        output_dtype: activation.output_dtype(),
        activation,
        input_dtype,
    }
}

fn random_conv_attrs(r: &mut ChaCha8Rng, h: usize, w: usize) -> ConvAttrs {
    loop {
        let kernel_shape = [r.gen_range(1..=3), r.gen_range(1..=3)];
        let pads = [r.gen_range(0..=1), r.gen_range(0..=1), r.gen_range(0..=1), r.gen_range(0..=1)];
        let strides = [r.gen_range(1..=2), r.gen_range(1..=2)];
        if h + pads[0] + pads[2] >= kernel_shape[0] && w + pads[1] + pads[3] >= kernel_shape[1] {
            return ConvAttrs {
                strides,
                pads,
                kernel_shape,
            };
        }
    }
}

/// A random valid layer chain with every activation and both codifications
/// possible. Returns the layers and the graph input.
pub fn random_model(r: &mut ChaCha8Rng) -> (Vec<HwLayerDescriptor>, GraphInput) {
    let mut layers = Vec::new();
    let mut dtype = ElemType::I8;
    let conv_first = r.gen_bool(0.4);
    let mut shape = if conv_first {
        vec![1, r.gen_range(1..=3), r.gen_range(2..=6), r.gen_range(2..=6)]
    } else {
        vec![r.gen_range(1..=3), r.gen_range(1..=8)]
    };
    let input = GraphInput {
        name: "x".into(),
        shape: shape.clone(),
    };
    if conv_first {
        for _ in 0..r.gen_range(1..=2) {
            let attrs = random_conv_attrs(r, shape[2], shape[3]);
            let act = random_activation(r);
            let cod = random_codification(r);
            let out_ch = r.gen_range(1..=3);
            let d = conv_layer(r, &format!("l{}", layers.len()), shape[1], out_ch, attrs, dtype, act, cod);
            let oh = (shape[2] + attrs.pads[0] + attrs.pads[2] - attrs.kernel_shape[0]) / attrs.strides[0] + 1;
            let ow = (shape[3] + attrs.pads[1] + attrs.pads[3] - attrs.kernel_shape[1]) / attrs.strides[1] + 1;
            shape = vec![1, out_ch, oh, ow];
            dtype = d.output_dtype;
            layers.push(d);
        }
    }
    for _ in 0..r.gen_range(if conv_first { 0 } else { 1 }..=2) {
        let fan_in = *shape.last().unwrap();
        let fan_out = r.gen_range(1..=8);
        let act = random_activation(r);
        let cod = random_codification(r);
        let d = fc_layer(r, &format!("l{}", layers.len()), fan_in, fan_out, dtype, act, cod);
        *shape.last_mut().unwrap() = fan_out;
        dtype = d.output_dtype;
        layers.push(d);
    }
    (layers, input)
}

/// `round_half_even(x / scale)` clamped to the target range.
pub fn oracle_round_clip(x: f32, scale: f32, dtype: ElemType) -> i64 {
    let (lo, hi) = match dtype {
        ElemType::I8 => (-128.0, 127.0),
        ElemType::U8 => (0.0, 255.0),
        _ => panic!("not a quantized type"),
    };
    (x / scale).round_ties_even().clamp(lo, hi) as i64
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// The int32 accumulator `W_q . X_q + B_q` by plain loops.
pub fn oracle_accumulate(d: &HwLayerDescriptor, x: &[i64], shape: &[usize]) -> (Vec<i64>, Vec<usize>) {
    let w = d.weights.to_i64_vec().unwrap();
    let b = d.bias.to_i64_vec().unwrap();
    match &d.kind {
        LayerKind::FullyConnected => {
            let (k, n) = (d.weights.shape()[0], d.weights.shape()[1]);
            let rows = x.len() / k;
            let mut y = Vec::new();
            for row in 0..rows {
                for col in 0..n {
                    let mut acc = b[col];
                    for i in 0..k {
                        acc += x[row * k + i] * w[i * n + col];
                    }
                    y.push(acc);
                }
            }
            let mut s = shape.to_vec();
            *s.last_mut().unwrap() = n;
            (y, s)
        }
        LayerKind::Conv2D(a) => {
            let (nb, c, h, wd) = (shape[0], shape[1], shape[2], shape[3]);
            let (m, kh, kw) = (d.weights.shape()[0], a.kernel_shape[0], a.kernel_shape[1]);
            let oh = (h + a.pads[0] + a.pads[2] - kh) / a.strides[0] + 1;
            let ow = (wd + a.pads[1] + a.pads[3] - kw) / a.strides[1] + 1;
            let mut y = Vec::new();
            for bi in 0..nb {
                for oc in 0..m {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b[oc];
                            for ic in 0..c {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy = (oy * a.strides[0] + ky) as i64 - a.pads[0] as i64;
                                        let ix = (ox * a.strides[1] + kx) as i64 - a.pads[1] as i64;
                                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                            continue;
                                        }
                                        let xv = x[((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                        acc += xv * w[((oc * c + ic) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                            y.push(acc);
                        }
                    }
                }
            }
            (y, vec![nb, m, oh, ow])
        }
    }
}

/// The f32 rescale chain as the graph writes it.
pub fn oracle_rescale(d: &HwLayerDescriptor, acc: i64) -> f32 {
    assert!(i32::try_from(acc).is_ok(), "accumulator must fit int32");
    let a = acc as f32;
    match d.codification {
        RescaleCodification::TwoMul => {
            let shift = (2f64).powi(-(d.rescale.shift_bits() as i32)) as f32;
            (a * d.rescale.quant_scale() as f32) * shift
        }
        RescaleCodification::OneMul => a * d.rescale.multiplier() as f32,
    }
}

/// Activation stage and final quantization, given the rescaled value.
pub fn oracle_activation(d: &HwLayerDescriptor, v: f32) -> i64 {
    match d.activation {
        ActivationSpec::None => oracle_round_clip(v, 1.0, d.output_dtype),
        ActivationSpec::Relu => oracle_round_clip(v.max(0.0), 1.0, d.output_dtype),
        ActivationSpec::TanhI8 { x_step, y_scale } => {
            let q = oracle_round_clip(v, 1.0, ElemType::I8);
            let t = (q as f32 * x_step).tanh();
            oracle_round_clip(t, y_scale.value(), ElemType::I8)
        }
        ActivationSpec::TanhF16 { y_scale } => {
            let h = f16::from_f32(v).to_f32();
            let t = f16::from_f32(h.tanh()).to_f32();
            oracle_round_clip(t, y_scale.value(), ElemType::I8)
        }
        ActivationSpec::SigmoidF16 { y_scale } => {
            let h = f16::from_f32(v).to_f32();
            let t = f16::from_f32(sigmoid(h)).to_f32();
            oracle_round_clip(t, y_scale.value(), ElemType::U8)
        }
    }
}

pub fn oracle_layer(d: &HwLayerDescriptor, x: &[i64], shape: &[usize]) -> (Vec<i64>, Vec<usize>) {
    let (acc, s) = oracle_accumulate(d, x, shape);
    (acc.iter().map(|&a| oracle_activation(d, oracle_rescale(d, a))).collect(), s)
}

pub fn oracle_model(layers: &[HwLayerDescriptor], x: &QTensor) -> (Vec<i64>, Vec<usize>) {
    let mut v = x.to_i64_vec().unwrap();
    let mut s = x.shape().to_vec();
    for d in layers {
        (v, s) = oracle_layer(d, &v, &s);
    }
    (v, s)
}
