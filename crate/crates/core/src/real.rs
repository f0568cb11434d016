//! Scalar abstraction shared by the inference kernels.
//!
//! Training and verification run at `f64`; the inference path may run at
//! `f32`, where `fast_exp` and `fast_ln` switch to branch-free polynomials
//! that the compiler can vectorize.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

pub trait Real: Float + Default + Debug + Send + Sync + Sum + 'static {
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn fast_exp(self) -> Self;

    /// Natural logarithm of a positive, finite input.
    fn fast_ln(self) -> Self;

    /// Replaces every element with its exponential.
    #[inline]
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.fast_exp();
        }
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn fast_exp(self) -> Self {
        self.exp()
    }

    #[inline]
    fn fast_ln(self) -> Self {
        self.ln()
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn fast_exp(self) -> Self {
        exp_f32(self)
    }

    #[inline(always)]
    fn fast_ln(self) -> Self {
        ln_f32(self)
    }
}

/// Cody-Waite range reduction plus a degree-6 polynomial. Relative error is
/// below 2e-7 over the clamped domain; inputs under -87 saturate near the
/// smallest normal instead of flushing to zero.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    let x = x.max(-87.0).min(88.0);
    // Adding ROUND leaves round(x / ln 2) in the low mantissa bits, which
    // avoids a float-to-int conversion and keeps the loop vectorizable.
    let shifted = x * std::f32::consts::LOG2_E + ROUND;
    let n = shifted - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let bits = shifted.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127) << 23;
    p * f32::from_bits(bits)
}

/// Runs `f` in a context compiled for AVX2 and FMA when the CPU has them.
///
/// Callers pass closures over `#[inline(always)]` kernels so the vector
/// loops get wide code generation without requiring a native build.
#[inline(always)]
pub fn with_simd<R>(f: impl FnOnce() -> R) -> R {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx2,fma")]
        unsafe fn wide<R>(f: impl FnOnce() -> R) -> R {
            f()
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: both target features were detected at runtime.
            return unsafe { wide(f) };
        }
    }
    f()
}

/// Splits off the binary exponent, folds the mantissa into
/// `[sqrt(1/2), sqrt(2))` and evaluates the `atanh` series for `ln m`.
/// Non-positive inputs are treated as the smallest normal.
#[inline(always)]
pub fn ln_f32(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    let bits = x.max(f32::MIN_POSITIVE).to_bits();
    let mut e = ((bits >> 23) & 0xff) as i32 - 127;
    let mut m = f32::from_bits((bits & 0x007f_ffff) | 0x3f80_0000);
    let big = m > std::f32::consts::SQRT_2;
    m = if big { m * 0.5 } else { m };
    e += big as i32;
    let t = (m - 1.0) / (m + 1.0);
    let t2 = t * t;
    let series = 2.0 * t * (1.0 + t2 * (1.0 / 3.0 + t2 * (0.2 + t2 * (1.0 / 7.0 + t2 * (1.0 / 9.0)))));
    let ef = e as f32;
    ef * LN2_HI + (series + ef * LN2_LO)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_tracks_libm() {
        let mut worst = 0.0f64;
        let mut x = -80.0f32;
        while x < 80.0 {
            let rel = ((exp_f32(x) as f64) - (x as f64).exp()).abs() / (x as f64).exp();
            worst = worst.max(rel);
            x += 0.0137;
        }
        assert!(worst < 4e-7, "worst relative error {worst}");
    }

    #[test]
    fn fast_ln_tracks_libm() {
        let mut worst = 0.0f64;
        let mut x = 1e-7f32;
        while x < 1e4 {
            let exact = (x as f64).ln();
            let err = (ln_f32(x) as f64 - exact).abs() / exact.abs().max(1.0);
            worst = worst.max(err);
            x *= 1.0137;
        }
        assert!(worst < 4e-7, "worst error {worst}");
        assert_eq!(ln_f32(1.0), 0.0);
        assert!(ln_f32(0.0).is_finite());
    }

    #[test]
    fn fast_exp_of_zero_is_one() {
        assert_eq!(exp_f32(0.0), 1.0);
    }

    #[test]
    fn fast_exp_saturates_without_nan() {
        assert!(exp_f32(-1e4) > 0.0);
        assert!(exp_f32(1e4).is_finite());
        assert!(exp_f32(-1e4) < 1e-37);
    }
}
