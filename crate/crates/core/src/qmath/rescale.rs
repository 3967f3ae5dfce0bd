//! Rescale multipliers and their integer-scale + right-shift decomposition.

use serde::{Deserialize, Serialize};

use super::{QuantError, Scale};

/// Largest integer scale: every integer up to 2^24 is exact as an f32.
pub const MAX_QUANT_SCALE: u32 = 1 << 24;

/// Largest shift whose factor 2^-N is still representable as an f32
/// (the smallest subnormal).
pub const MAX_SHIFT_BITS: u32 = 149;

/// A rescale multiplier together with its hardware form
/// `quant_scale * 2^-shift_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RescaleSpec {
    multiplier: f64,
    quant_scale: u32,
    shift_bits: u32,
}

impl RescaleSpec {
    /// Spec whose multiplier is exactly `quant_scale * 2^-shift_bits`.
    pub fn from_parts(quant_scale: u32, shift_bits: u32) -> Result<RescaleSpec, QuantError> {
        if quant_scale > MAX_QUANT_SCALE {
            return Err(QuantError::QuantScaleTooLarge(quant_scale));
        }
        if shift_bits > MAX_SHIFT_BITS {
            return Err(QuantError::ShiftTooLarge(shift_bits));
        }
        Ok(RescaleSpec {
            multiplier: exact_value(quant_scale, shift_bits),
            quant_scale,
            shift_bits,
        })
    }

    pub fn multiplier(&self) -> f64 {
        self.multiplier
    }

    pub fn quant_scale(&self) -> u32 {
        self.quant_scale
    }

    pub fn shift_bits(&self) -> u32 {
        self.shift_bits
    }

    /// The value the integer form represents, `quant_scale * 2^-shift_bits`.
    pub fn represented(&self) -> f64 {
        exact_value(self.quant_scale, self.shift_bits)
    }

    /// The shift factor 2^-N as an f32, as stored in a graph.
    pub fn shift_factor(&self) -> f32 {
        exp2_neg_f32(self.shift_bits).expect("shift_bits bounded at construction")
    }

    /// Same integer form with the multiplier replaced by the represented value.
    pub fn exact(&self) -> RescaleSpec {
        RescaleSpec {
            multiplier: self.represented(),
            ..*self
        }
    }
}

fn exact_value(quant_scale: u32, shift_bits: u32) -> f64 {
    // shift_bits <= 149 keeps 2^-N a normal f64
    quant_scale as f64 * 2f64.powi(-(shift_bits as i32))
}

/// 2^-n as an f32, exact for every n in 0..=149.
pub fn exp2_neg_f32(n: u32) -> Option<f32> {
    match n {
        0..=126 => Some(f32::from_bits((127 - n) << 23)),
        127..=149 => Some(f32::from_bits(1 << (149 - n))),
        _ => None,
    }
}

/// If `x` is exactly 2^-n for some n in 0..=149, return n.
pub fn neg_pow2_exponent(x: f32) -> Option<u32> {
    if !(x > 0.0) || x > 1.0 || !x.is_finite() {
        return None;
    }
    let bits = x.to_bits();
    let exp = bits >> 23;
    let man = bits & 0x007f_ffff;
    if exp == 0 {
        // subnormal: exactly one bit set
        (man.count_ones() == 1).then(|| 149 - man.trailing_zeros())
    } else {
        (man == 0).then(|| 127 - exp)
    }
}

/// `(scale_w * scale_x) / scale_y`, evaluated in f32.
pub fn rescale_multiplier(scale_w: Scale, scale_x: Scale, scale_y: Scale) -> f32 {
    (scale_w.value() * scale_x.value()) / scale_y.value()
}

/// Decompose a multiplier into `quant_scale * 2^-N` with the largest N such
/// that `floor(m * 2^N) <= 2^24`, so the integer scale keeps as many bits as
/// an f32 can carry exactly.
pub fn decompose_rescale(multiplier: f64) -> Result<RescaleSpec, QuantError> {
    if !(multiplier > 0.0) || !multiplier.is_finite() {
        return Err(QuantError::InvalidMultiplier(multiplier));
    }
    let limit = MAX_QUANT_SCALE as f64;
    if multiplier >= limit {
        return Err(QuantError::MultiplierTooLarge(multiplier));
    }
    // multiplication by a power of two is exact in f64 away from overflow
    let mut n = 0u32;
    while (multiplier * 2f64.powi(n as i32 + 1)).floor() <= limit {
        n += 1;
        if n > MAX_SHIFT_BITS {
            return Err(QuantError::MultiplierTooSmall(multiplier));
        }
    }
    let quant_scale = (multiplier * 2f64.powi(n as i32)).floor() as u32;
    Ok(RescaleSpec {
        multiplier,
        quant_scale,
        shift_bits: n,
    })
}

/// Strip common factors of two: the reduced form of the same value.
pub fn normalize_rescale(spec: RescaleSpec) -> RescaleSpec {
    let mut out = spec;
    while out.quant_scale > 0 && out.quant_scale.is_multiple_of(2) && out.shift_bits > 0 {
        out.quant_scale /= 2;
        out.shift_bits -= 1;
    }
    out
}

/// Integer rescale: 64-bit product then an arithmetic (flooring) right shift.
pub fn apply_rescale_int(acc: i32, spec: &RescaleSpec) -> i64 {
    let prod = acc as i64 * spec.quant_scale as i64;
    // |prod| < 2^55, so a shift of 63 already yields 0 or -1
    prod >> spec.shift_bits.min(63)
}

/// The float rescale chain a two-Mul graph evaluates: three f32 values
/// multiplied left to right, each product rounded to f32.
pub fn apply_rescale_float(acc: i32, spec: &RescaleSpec) -> f32 {
    (acc as f32) * (spec.quant_scale as f32) * spec.shift_factor()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_third_constant() {
        let spec = decompose_rescale(1.0 / 3.0).unwrap();
        assert_eq!((spec.quant_scale(), spec.shift_bits()), (11184810, 25));
        assert_eq!(spec.multiplier(), 1.0 / 3.0);
    }

    #[test]
    fn quarter_and_identity() {
        let q = decompose_rescale(0.25).unwrap();
        assert_eq!((q.quant_scale(), q.shift_bits()), (16777216, 26));
        let n = normalize_rescale(q);
        assert_eq!((n.quant_scale(), n.shift_bits()), (1, 2));
        assert_eq!(n.multiplier(), 0.25);

        let one = decompose_rescale(1.0).unwrap();
        assert_eq!((one.quant_scale(), one.shift_bits()), (16777216, 24));
        let n = normalize_rescale(one);
        assert_eq!((n.quant_scale(), n.shift_bits()), (1, 0));
    }

    #[test]
    fn normalize_single_reduction() {
        let s = RescaleSpec::from_parts(11184810, 25).unwrap();
        let n = normalize_rescale(s);
        assert_eq!((n.quant_scale(), n.shift_bits()), (5592405, 24));
        assert_eq!(n.represented(), s.represented());
        let fixed = RescaleSpec::from_parts(1, 0).unwrap();
        assert_eq!(normalize_rescale(fixed), fixed);
    }

    #[test]
    fn decompose_errors() {
        assert!(matches!(
            decompose_rescale(16777216.0),
            Err(QuantError::MultiplierTooLarge(_))
        ));
        assert!(matches!(
            decompose_rescale(0.0),
            Err(QuantError::InvalidMultiplier(_))
        ));
        assert!(matches!(
            decompose_rescale(f64::NAN),
            Err(QuantError::InvalidMultiplier(_))
        ));
        assert!(matches!(
            decompose_rescale(1e-45),
            Err(QuantError::MultiplierTooSmall(_))
        ));
        // just below the limit needs no shift at all
        let s = decompose_rescale(16777215.5).unwrap();
        assert_eq!((s.quant_scale(), s.shift_bits()), (16777215, 0));
    }

    #[test]
    fn integer_rescale() {
        let quarter = RescaleSpec::from_parts(1, 2).unwrap();
        assert_eq!(apply_rescale_int(300, &quarter), 75);
        let third = RescaleSpec::from_parts(11184810, 25).unwrap();
        // floor(1118481000 / 2^25) = floor(33.33..) and floor(-33.33..)
        assert_eq!(apply_rescale_int(100, &third), 33);
        assert_eq!(apply_rescale_int(-100, &third), -34);
        let tiny = RescaleSpec::from_parts(1, 140).unwrap();
        assert_eq!(apply_rescale_int(i32::MAX, &tiny), 0);
        assert_eq!(apply_rescale_int(-1, &tiny), -1);
    }

    #[test]
    fn float_rescale() {
        let quarter = RescaleSpec::from_parts(1, 2).unwrap();
        assert_eq!(apply_rescale_float(300, &quarter), 75.0);
        let third = RescaleSpec::from_parts(11184810, 25).unwrap();
        assert_eq!(apply_rescale_float(0, &third), 0.0);
        // f32(100 * 11184810) = 1118481024 (step 128 near 2^30), then an exact /2^25
        let got = apply_rescale_float(100, &third);
        assert_eq!(got, (1118481024.0f64 / 33554432.0) as f32);
        assert!((got - 33.33334).abs() < 1e-5);
    }

    #[test]
    fn pow2_helpers() {
        for n in 0..=MAX_SHIFT_BITS {
            let f = exp2_neg_f32(n).unwrap();
            assert_eq!(f as f64, 2f64.powi(-(n as i32)));
            assert_eq!(neg_pow2_exponent(f), Some(n));
        }
        assert_eq!(exp2_neg_f32(150), None);
        assert_eq!(neg_pow2_exponent(0.3), None);
        assert_eq!(neg_pow2_exponent(2.0), None);
        assert_eq!(neg_pow2_exponent(0.0), None);
        assert_eq!(neg_pow2_exponent(-0.5), None);
        assert_eq!(neg_pow2_exponent(f32::from_bits(3)), None);
    }

    #[test]
    fn multiplier_in_f32() {
        let half = Scale::new(0.5).unwrap();
        let one = Scale::new(1.0).unwrap();
        assert_eq!(rescale_multiplier(half, half, one), 0.25);
        assert_eq!(rescale_multiplier(one, one, one), 1.0);
        let s = Scale::new(1.0 / 127.0).unwrap();
        let m = rescale_multiplier(s, s, s);
        assert!((m - 1.0 / 127.0).abs() <= f32::EPSILON * m);
    }
}
