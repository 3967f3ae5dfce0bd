//! IEEE 754 binary16 storage type with round-to-nearest-even narrowing.

use std::fmt;

/// A binary16 value held as its bit pattern. Equality is bitwise.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct F16(u16);

impl F16 {
    pub const ONE: F16 = F16(0x3c00);
    pub const INFINITY: F16 = F16(0x7c00);
    pub const MAX: F16 = F16(0x7bff);

    pub const fn from_bits(bits: u16) -> F16 {
        F16(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    pub fn from_f32(x: f32) -> F16 {
        F16(f32_to_f16_bits(x))
    }

    pub fn to_f32(self) -> f32 {
        f16_bits_to_f32(self.0)
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7c00 == 0x7c00 && self.0 & 0x03ff != 0
    }

    pub fn is_finite(self) -> bool {
        self.0 & 0x7c00 != 0x7c00
    }
}

impl fmt::Debug for F16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F16({})", self.to_f32())
    }
}

impl fmt::Display for F16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

/// Narrow to binary16, round-to-nearest-even; overflow goes to infinity.
pub fn to_fp16(x: f32) -> F16 {
    F16::from_f32(x)
}

/// Narrow an f64 to binary16 with a single rounding.
///
/// The intermediate f32 is rounded to odd, which keeps enough sticky
/// information for the second rounding to be correct.
pub fn f64_to_fp16(x: f64) -> F16 {
    let a = x as f32;
    if !a.is_finite() || a as f64 == x {
        return to_fp16(a);
    }
    let mut bits = a.to_bits();
    if (a as f64).abs() > x.abs() {
        bits -= 1;
    }
    to_fp16(f32::from_bits(bits | 1))
}

/// Widen binary16 to f32. Exact.
pub fn from_fp16(h: F16) -> f32 {
    h.to_f32()
}

fn f32_to_f16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let man = bits & 0x007f_ffff;

    if exp == 0xff {
        if man == 0 {
            return sign | 0x7c00;
        }
        // keep the top payload bits, force quiet
        return sign | 0x7e00 | (man >> 13) as u16;
    }

    let e = exp - 127 + 15;
    if e >= 0x1f {
        return sign | 0x7c00;
    }

    if e <= 0 {
        // subnormal result (or zero); below half the smallest subnormal
        if e < -10 {
            return sign;
        }
        let m = man | 0x0080_0000;
        let shift = (14 - e) as u32;
        let mut half = m >> shift;
        let rem = m & ((1 << shift) - 1);
        let halfway = 1 << (shift - 1);
        if rem > halfway || (rem == halfway && half & 1 == 1) {
            half += 1;
        }
        return sign | half as u16;
    }

    let mut h = ((e as u32) << 10) | (man >> 13);
    let rem = man & 0x1fff;
    if rem > 0x1000 || (rem == 0x1000 && h & 1 == 1) {
        // a carry out of the mantissa bumps the exponent, up to infinity
        h += 1;
    }
    sign | h as u16
}

fn f16_bits_to_f32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = ((h >> 10) & 0x1f) as u32;
    let man = (h & 0x03ff) as u32;

    let bits = match exp {
        0 if man == 0 => sign,
        0 => {
            // normalise the subnormal
            let lz = man.leading_zeros() - 21;
            let man = (man << lz) & 0x03ff;
            let e = 127 - 15 + 1 - lz;
            sign | (e << 23) | (man << 13)
        }
        0x1f => sign | 0x7f80_0000 | (man << 13),
        _ => sign | ((exp + 127 - 15) << 23) | (man << 13),
    };
    f32::from_bits(bits)
}
