//! Deterministic elementary functions.
//!
//! The golden-hash and bitwise-reproducibility contracts require identical
//! results on every platform, but `f64::exp` and friends go through the
//! system libm, whose last-ulp behavior varies between implementations.
//! Everything here is built from IEEE add/mul/div/sqrt plus fixed
//! polynomial coefficients, so results are bit-stable everywhere.
//!
//! Accuracy targets are ~1e-15 relative; the polynomial reductions follow
//! the classic fdlibm layouts.

const LN2_HI: f64 = 6.93147180369123816490e-01;
const LN2_LO: f64 = 1.90821492927058770002e-10;
const LOG2E: f64 = std::f64::consts::LOG2_E;

/// e^x. Saturates to 0 / +inf outside the representable range.
pub fn exp(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x > 709.782712893384 {
        return f64::INFINITY;
    }
    if x < -745.2 {
        return 0.0;
    }
    let k = (x * LOG2E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series on |r| <= ln(2)/2; degree 12 is exact to double precision.
    let mut p = 1.0 / 479_001_600.0; // 1/12!
    for &inv in &[
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + inv;
    }
    scale_by_power_of_two(p, k as i32)
}

/// x * 2^k without going through libm.
fn scale_by_power_of_two(x: f64, k: i32) -> f64 {
    if k >= -1021 && k <= 1023 {
        let factor = f64::from_bits(((k + 1023) as u64) << 52);
        x * factor
    } else if k > 1023 {
        let big = f64::from_bits((2046u64) << 52);
        scale_by_power_of_two(x * big, k - 1023)
    } else {
        let small = f64::from_bits(2u64 << 52); // 2^-1021
        scale_by_power_of_two(x * small, k + 1021)
    }
}

/// Natural logarithm. ln(0) = -inf, ln(x<0) = NaN.
pub fn ln(x: f64) -> f64 {
    if x.is_nan() || x < 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return f64::NEG_INFINITY;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    let mut bits = x.to_bits();
    let mut e = 0i64;
    // Normalize subnormals.
    if bits < (1u64 << 52) {
        let scaled = x * f64::from_bits((1023u64 + 54) << 52);
        bits = scaled.to_bits();
        e -= 54;
    }
    e += ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | (1023u64 << 52)); // [1,2)
    if m > std::f64::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    // atanh series: ln(m) = 2*(s + s^3/3 + s^5/5 + ...), |s| <= 0.1716.
    let s = (m - 1.0) / (m + 1.0);
    let z = s * s;
    let mut sum = 0.0;
    for k in (1..=10).rev() {
        let n = (2 * k + 1) as f64;
        sum = sum * z + 1.0 / n;
    }
    let ln_m = 2.0 * (s + s * z * sum);
    let ef = e as f64;
    ef * LN2_HI + (ef * LN2_LO + ln_m)
}

// pi/2 split into 33-bit chunks so n * PIO2_1 is exact for |n| < 2^20.
const PIO2_1: f64 = 1.57079632673412561417e+00;
const PIO2_1T: f64 = 6.07710050650619224932e-11;
const PIO2_2T: f64 = 2.02226624879595063154e-21;

/// Argument reduction mod pi/2; returns (r, quadrant). Accurate for
/// |x| < 2^20, far beyond any argument used in this crate.
fn reduce_pio2(x: f64) -> (f64, i64) {
    let n = (x * std::f64::consts::FRAC_2_PI).round();
    let t = x - n * PIO2_1;
    let r = (t - n * PIO2_1T) - n * PIO2_2T;
    (r, n as i64)
}

/// Polynomial for sin on |r| <= pi/4 (Taylor to r^13).
fn sin_poly(r: f64) -> f64 {
    let z = r * r;
    let mut q = -1.0 / 6_227_020_800.0; // -1/13!
    q = q * z + 1.0 / 39_916_800.0;
    q = q * z - 1.0 / 362_880.0;
    q = q * z + 1.0 / 5_040.0;
    q = q * z - 1.0 / 120.0;
    q = q * z + 1.0 / 6.0;
    r - r * z * q
}

/// Polynomial for cos on |r| <= pi/4 (Taylor to r^14).
fn cos_poly(r: f64) -> f64 {
    let z = r * r;
    let mut q = -1.0 / 87_178_291_200.0; // -1/14!
    q = q * z + 1.0 / 479_001_600.0;
    q = q * z - 1.0 / 3_628_800.0;
    q = q * z + 1.0 / 40_320.0;
    q = q * z - 1.0 / 720.0;
    q = q * z + 1.0 / 24.0;
    q = q * z - 0.5;
    1.0 + z * q
}

pub fn sin(x: f64) -> f64 {
    let (r, n) = reduce_pio2(x);
    match n.rem_euclid(4) {
        0 => sin_poly(r),
        1 => cos_poly(r),
        2 => -sin_poly(r),
        _ => -cos_poly(r),
    }
}

pub fn cos(x: f64) -> f64 {
    let (r, n) = reduce_pio2(x);
    match n.rem_euclid(4) {
        0 => cos_poly(r),
        1 => -sin_poly(r),
        2 => -cos_poly(r),
        _ => sin_poly(r),
    }
}

// fdlibm atan: reduction anchors and polynomial coefficients.
const ATAN_HI: [f64; 4] = [
    4.63647609000806093515e-01,
    7.85398163397448278999e-01,
    9.82793723247329054082e-01,
    1.57079632679489655800e+00,
];
const ATAN_LO: [f64; 4] = [
    2.26987774529616870924e-17,
    3.06161699786838301793e-17,
    1.39033110312309984516e-17,
    6.12323399573676603587e-17,
];
const AT: [f64; 11] = [
    3.33333333333329318027e-01,
    -1.99999999998764832476e-01,
    1.42857142725034663711e-01,
    -1.11111104054623557880e-01,
    9.09088713343650656196e-02,
    -7.69187620504482999495e-02,
    6.66107313738753120669e-02,
    -5.83357013379057348645e-02,
    4.97687799461593236017e-02,
    -3.65315727442169155270e-02,
    1.62858201153657823623e-02,
];

pub fn atan(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let sign = x < 0.0;
    let mut t = x.abs();
    let id: i32;
    if t < 0.4375 {
        if t < 1e-30 {
            return x;
        }
        id = -1;
    } else if t < 0.6875 {
        id = 0;
        t = (2.0 * t - 1.0) / (2.0 + t);
    } else if t < 1.1875 {
        id = 1;
        t = (t - 1.0) / (t + 1.0);
    } else if t < 2.4375 {
        id = 2;
        t = (t - 1.5) / (1.0 + 1.5 * t);
    } else if t <= 1e300 {
        id = 3;
        t = -1.0 / t;
    } else {
        id = 3;
        t = 0.0;
    }
    let z = t * t;
    let w = z * z;
    let s1 = z * (AT[0] + w * (AT[2] + w * (AT[4] + w * (AT[6] + w * (AT[8] + w * AT[10])))));
    let s2 = w * (AT[1] + w * (AT[3] + w * (AT[5] + w * (AT[7] + w * AT[9]))));
    let r = if id < 0 {
        t - t * (s1 + s2)
    } else {
        ATAN_HI[id as usize] - ((t * (s1 + s2) - ATAN_LO[id as usize]) - t)
    };
    if sign {
        -r
    } else {
        r
    }
}

/// Four-quadrant arctangent with result in (-pi, pi]. A zero `y` is treated
/// as +0 so the upper-boundary convention holds for y=0, x<0.
pub fn atan2(y: f64, x: f64) -> f64 {
    let y = if y == 0.0 { 0.0 } else { y };
    if x > 0.0 {
        atan(y / x)
    } else if x < 0.0 {
        if y >= 0.0 {
            atan(y / x) + std::f64::consts::PI
        } else {
            atan(y / x) - std::f64::consts::PI
        }
    } else if y > 0.0 {
        std::f64::consts::FRAC_PI_2
    } else if y < 0.0 {
        -std::f64::consts::FRAC_PI_2
    } else {
        0.0
    }
}

/// x^y for x >= 0 via exp(y ln x); 0^y = 0 for y > 0, 1 for y == 0.
pub fn pow(x: f64, y: f64) -> f64 {
    debug_assert!(x >= 0.0, "pow domain: x = {x}");
    if y == 0.0 {
        return 1.0;
    }
    if x == 0.0 {
        return if y > 0.0 { 0.0 } else { f64::INFINITY };
    }
    exp(y * ln(x))
}

pub fn tanh(x: f64) -> f64 {
    if x > 20.0 {
        return 1.0;
    }
    if x < -20.0 {
        return -1.0;
    }
    let e2 = exp(2.0 * x);
    (e2 - 1.0) / (e2 + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn exp_matches_std() {
        let mut rng = Rng::new(1);
        for _ in 0..20_000 {
            let x = rng.range(-40.0, 40.0);
            assert!(rel(exp(x), x.exp()) < 1e-14, "exp({x})");
        }
        assert_eq!(exp(0.0), 1.0);
        assert_eq!(exp(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn ln_matches_std() {
        let mut rng = Rng::new(2);
        for _ in 0..20_000 {
            let x = exp(rng.range(-30.0, 30.0));
            assert!(rel(ln(x), x.ln()) < 1e-13, "ln({x})");
        }
        assert_eq!(ln(1.0), 0.0);
        assert_eq!(ln(0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn ln_exp_round_trip() {
        let mut rng = Rng::new(3);
        for _ in 0..10_000 {
            let x = rng.range(-50.0, 50.0);
            assert!((ln(exp(x)) - x).abs() < 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn trig_matches_std() {
        let mut rng = Rng::new(4);
        for _ in 0..20_000 {
            let x = rng.range(-200.0, 200.0);
            assert!((sin(x) - x.sin()).abs() < 1e-13, "sin({x})");
            assert!((cos(x) - x.cos()).abs() < 1e-13, "cos({x})");
        }
        assert_eq!(sin(0.0), 0.0);
        assert_eq!(cos(0.0), 1.0);
    }

    #[test]
    fn atan2_matches_std_and_range() {
        let mut rng = Rng::new(5);
        for _ in 0..20_000 {
            let y = rng.range(-100.0, 100.0);
            let x = rng.range(-100.0, 100.0);
            let got = atan2(y, x);
            assert!((got - y.atan2(x)).abs() < 1e-13, "atan2({y},{x})");
            assert!(got > -std::f64::consts::PI - 1e-15 && got <= std::f64::consts::PI + 1e-15);
        }
        // Upper-boundary convention: angle of the negative real axis is +pi.
        assert!((atan2(0.0, -1.0) - std::f64::consts::PI).abs() < 1e-15);
        assert!((atan2(-0.0, -1.0) - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn pow_matches_std() {
        let mut rng = Rng::new(6);
        for _ in 0..10_000 {
            let x = rng.range(1e-4, 1.0);
            let y = rng.range(0.5, 4.0);
            assert!(rel(pow(x, y), x.powf(y)) < 1e-12, "pow({x},{y})");
        }
        assert_eq!(pow(0.0, 2.2), 0.0);
        assert_eq!(pow(0.7, 0.0), 1.0);
    }

    #[test]
    fn tanh_matches_std() {
        let mut rng = Rng::new(7);
        for _ in 0..10_000 {
            let x = rng.range(-30.0, 30.0);
            assert!((tanh(x) - x.tanh()).abs() < 1e-14, "tanh({x})");
        }
    }
}
