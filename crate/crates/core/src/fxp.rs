//! 32-bit fixed point with 17 fractional bits (Q15.17) and a wide accumulator.
//!
//! Every narrowing rounds half to even. Overflow saturates to the range limits and is
//! reported through the `bool` half of the `overflowing_*` return values, so callers can
//! keep a sticky flag without any global state.

use std::fmt;
use std::ops::Neg;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of fractional bits in [`Fxp32`].
pub const FRAC_BITS: u32 = 17;

const ONE_RAW: i32 = 1 << FRAC_BITS;

/// Shifts `v` right by `shift` bits, rounding half to even.
#[inline]
pub(crate) fn round_shift(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    let q = v >> shift;
    let rem = v - (q << shift);
    let half = 1i128 << (shift - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Divides with rounding half to even. `den` must be non-zero.
#[inline]
pub(crate) fn round_div(num: i128, den: i128) -> i128 {
    let (num, den) = if den < 0 { (-num, -den) } else { (num, den) };
    let q = num.div_euclid(den);
    let rem = num.rem_euclid(den);
    let twice = 2 * rem;
    if twice > den || (twice == den && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

#[inline]
pub(crate) fn saturate_i32(v: i128) -> (i32, bool) {
    if v > i32::MAX as i128 {
        (i32::MAX, true)
    } else if v < i32::MIN as i128 {
        (i32::MIN, true)
    } else {
        (v as i32, false)
    }
}

/// A Q15.17 value: `raw / 2^17`, range `[-2^14, 2^14 - 2^-17]`.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fxp32(i32);

impl Fxp32 {
    pub const ZERO: Fxp32 = Fxp32(0);
    pub const ONE: Fxp32 = Fxp32(ONE_RAW);
    pub const HALF: Fxp32 = Fxp32(ONE_RAW / 2);
    pub const MIN: Fxp32 = Fxp32(i32::MIN);
    pub const MAX: Fxp32 = Fxp32(i32::MAX);
    /// One unit in the last place, 2^-17.
    pub const ULP: Fxp32 = Fxp32(1);

    #[inline]
    pub const fn from_raw(raw: i32) -> Self {
        Fxp32(raw)
    }

    #[inline]
    pub const fn raw(self) -> i32 {
        self.0
    }

    #[inline]
    pub const fn from_int(v: i16) -> Self {
        Fxp32((v as i32) << FRAC_BITS)
    }

    /// Nearest representable value, ties to even. Errors when `|x| >= 2^14` or `x` is NaN.
    pub fn from_real(x: f64) -> Result<Self> {
        if !x.is_finite() || x.abs() >= 16384.0 {
            return Err(Error::OutOfRange { value: x });
        }
        let scaled = (x * ONE_RAW as f64).round_ties_even();
        // |x| < 2^14 can still round up to 2^31 right below the limit.
        let (raw, sat) = saturate_i32(scaled as i128);
        if sat {
            return Err(Error::OutOfRange { value: x });
        }
        Ok(Fxp32(raw))
    }

    /// Like [`from_real`](Self::from_real) but clamps out-of-range input.
    pub fn from_real_saturating(x: f64) -> Self {
        if x.is_nan() {
            return Fxp32::ZERO;
        }
        let scaled = (x * ONE_RAW as f64).round_ties_even();
        if scaled >= i32::MAX as f64 {
            Fxp32::MAX
        } else if scaled <= i32::MIN as f64 {
            Fxp32::MIN
        } else {
            Fxp32(scaled as i32)
        }
    }

    #[inline]
    pub fn to_real(self) -> f64 {
        self.0 as f64 / ONE_RAW as f64
    }

    #[inline]
    pub fn overflowing_add(self, rhs: Fxp32) -> (Fxp32, bool) {
        let (v, sat) = saturate_i32(self.0 as i128 + rhs.0 as i128);
        (Fxp32(v), sat)
    }

    #[inline]
    pub fn overflowing_sub(self, rhs: Fxp32) -> (Fxp32, bool) {
        let (v, sat) = saturate_i32(self.0 as i128 - rhs.0 as i128);
        (Fxp32(v), sat)
    }

    /// Exact 64-bit product narrowed by 17 bits.
    #[inline]
    pub fn overflowing_mul(self, rhs: Fxp32) -> (Fxp32, bool) {
        let p = self.0 as i64 * rhs.0 as i64;
        let (v, sat) = saturate_i32(round_shift(p as i128, FRAC_BITS));
        (Fxp32(v), sat)
    }

    /// `(self * 2^17) / den`, rounded half to even.
    pub fn overflowing_div(self, den: Fxp32) -> Result<(Fxp32, bool)> {
        if den.0 == 0 {
            return Err(Error::DivisionByZero);
        }
        let q = round_div((self.0 as i128) << FRAC_BITS, den.0 as i128);
        let (v, sat) = saturate_i32(q);
        Ok((Fxp32(v), sat))
    }

    #[inline]
    pub fn saturating_add(self, rhs: Fxp32) -> Fxp32 {
        self.overflowing_add(rhs).0
    }

    #[inline]
    pub fn saturating_sub(self, rhs: Fxp32) -> Fxp32 {
        self.overflowing_sub(rhs).0
    }

    #[inline]
    pub fn saturating_mul(self, rhs: Fxp32) -> Fxp32 {
        self.overflowing_mul(rhs).0
    }

    /// Division that reports saturation as an error.
    pub fn try_div(self, den: Fxp32) -> Result<Fxp32> {
        match self.overflowing_div(den)? {
            (v, false) => Ok(v),
            (_, true) => Err(Error::Saturated { op: "fxp_div" }),
        }
    }

    #[inline]
    pub fn abs(self) -> Fxp32 {
        Fxp32(self.0.saturating_abs())
    }

    #[inline]
    pub fn is_negative(self) -> bool {
        self.0 < 0
    }
}

impl Neg for Fxp32 {
    type Output = Fxp32;

    #[inline]
    fn neg(self) -> Fxp32 {
        Fxp32(self.0.saturating_neg())
    }
}

impl fmt::Debug for Fxp32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fxp32({} = {})", self.0, self.to_real())
    }
}

impl fmt::Display for Fxp32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_real(), f)
    }
}

/// Converts a float slice, failing on the first out-of-range element.
pub fn vec_from_real(xs: &[f64]) -> Result<Vec<Fxp32>> {
    xs.iter().map(|&x| Fxp32::from_real(x)).collect()
}

pub fn vec_to_real(xs: &[Fxp32]) -> Vec<f64> {
    xs.iter().map(|x| x.to_real()).collect()
}

/// Product-format accumulator: signed 64 bits with 34 fractional bits.
///
/// Sums of Fxp32 products are exact until [`narrow`](Self::narrow) or
/// [`narrow_scaled`](Self::narrow_scaled); overflow of the 64-bit register is sticky.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Fxp64Acc {
    raw: i64,
    overflowed: bool,
}

impl Fxp64Acc {
    pub const FRAC_BITS: u32 = 2 * FRAC_BITS;

    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn raw(&self) -> i64 {
        self.raw
    }

    #[inline]
    pub fn overflowed(&self) -> bool {
        self.overflowed
    }

    #[inline]
    pub fn mac(&mut self, a: Fxp32, b: Fxp32) {
        let p = a.0 as i64 * b.0 as i64;
        match self.raw.checked_add(p) {
            Some(v) => self.raw = v,
            None => {
                self.raw = if p > 0 { i64::MAX } else { i64::MIN };
                self.overflowed = true;
            }
        }
    }

    /// Single rounding down to Q15.17.
    pub fn narrow(&self) -> (Fxp32, bool) {
        let (v, sat) = saturate_i32(round_shift(self.raw as i128, FRAC_BITS));
        (Fxp32(v), sat || self.overflowed)
    }

    /// Multiplies by `scale` at full width, then rounds once to Q15.17.
    pub fn narrow_scaled(&self, scale: Fxp32) -> (Fxp32, bool) {
        let p = self.raw as i128 * scale.0 as i128;
        let (v, sat) = saturate_i32(round_shift(p, Self::FRAC_BITS));
        (Fxp32(v), sat || self.overflowed)
    }
}

/// `scale * sum(a_i * b_i)` with exact accumulation and one final rounding.
///
/// Panics if the slices differ in length.
pub fn dot(a: &[Fxp32], b: &[Fxp32], scale: Fxp32) -> (Fxp32, bool) {
    assert_eq!(a.len(), b.len(), "dot operands differ in length");
    let mut acc = Fxp64Acc::new();
    for (&x, &y) in a.iter().zip(b) {
        acc.mac(x, y);
    }
    acc.narrow_scaled(scale)
}

/// Unit-range fixed point with 30 fractional bits, range `[-2, 2)`.
///
/// Holds cosines and sines for the rotary embedding, where Q15.17 angle quantization
/// compounds linearly with position.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Q30(i32);

impl Q30 {
    pub const FRAC_BITS: u32 = 30;
    pub const ZERO: Q30 = Q30(0);
    pub const ONE: Q30 = Q30(1 << 30);

    #[inline]
    pub const fn from_raw(raw: i32) -> Self {
        Q30(raw)
    }

    #[inline]
    pub const fn raw(self) -> i32 {
        self.0
    }

    /// Nearest value, ties to even, clamped to the representable range.
    pub fn from_real(x: f64) -> Self {
        let scaled = (x * (1u64 << 30) as f64).round_ties_even();
        Q30(scaled.clamp(i32::MIN as f64, i32::MAX as f64) as i32)
    }

    #[inline]
    pub fn to_real(self) -> f64 {
        self.0 as f64 / (1u64 << 30) as f64
    }

    /// Rounds a Q2.60 product sum back to Q2.30.
    #[inline]
    pub(crate) fn from_wide(v: i128) -> Self {
        Q30(saturate_i32(round_shift(v, 30)).0)
    }

    #[inline]
    pub fn mul_round(self, rhs: Q30) -> Q30 {
        Q30::from_wide(self.0 as i128 * rhs.0 as i128)
    }
}

impl fmt::Debug for Q30 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q30({} = {})", self.0, self.to_real())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fx(x: f64) -> Fxp32 {
        Fxp32::from_real(x).unwrap()
    }

    #[test]
    fn from_real_examples() {
        assert_eq!(fx(1.0).raw(), 131072);
        assert_eq!(fx(0.0).raw(), 0);
        // 7e-6 * 2^17 = 0.917504, nearest integer 1
        assert_eq!(fx(7.0e-6).raw(), 1);
        assert!((fx(7.0e-6).to_real() - 7.0e-6).abs() < 2f64.powi(-18));
        assert!(Fxp32::from_real(16384.0).is_err());
        assert!(Fxp32::from_real(-16384.0).is_err());
        assert!(Fxp32::from_real(f64::NAN).is_err());
    }

    #[test]
    fn from_real_ties_to_even() {
        assert_eq!(fx(0.5 / 131072.0).raw(), 0);
        assert_eq!(fx(1.5 / 131072.0).raw(), 2);
        assert_eq!(fx(-2.5 / 131072.0).raw(), -2);
    }

    #[test]
    fn mul_examples() {
        let x = fx(-3.140625);
        assert_eq!(Fxp32::ONE.overflowing_mul(x), (x, false));
        assert_eq!(fx(0.5).overflowing_mul(fx(0.5)), (fx(0.25), false));
        // 196608^2 = 38654705664; >> 17 = 294912 exactly
        assert_eq!(fx(1.5).overflowing_mul(fx(1.5)).0.raw(), 294912);
        assert_eq!(fx(2.25).raw(), 294912);
    }

    #[test]
    fn mul_rounds_half_to_even() {
        // 1 ulp * 0.5 = half an ulp -> 0; 3 ulp * 0.5 = 1.5 ulp -> 2
        assert_eq!(Fxp32::ULP.overflowing_mul(Fxp32::HALF).0.raw(), 0);
        assert_eq!(Fxp32::from_raw(3).overflowing_mul(Fxp32::HALF).0.raw(), 2);
        assert_eq!(Fxp32::from_raw(-3).overflowing_mul(Fxp32::HALF).0.raw(), -2);
    }

    #[test]
    fn mul_saturates_with_flag() {
        let big = fx(200.0);
        assert_eq!(big.overflowing_mul(big), (Fxp32::MAX, true));
        assert_eq!(big.overflowing_mul(-big), (Fxp32::MIN, true));
        assert_eq!(Fxp32::MAX.overflowing_add(Fxp32::ULP), (Fxp32::MAX, true));
    }

    #[test]
    fn div_examples() {
        assert_eq!(fx(1.0).try_div(fx(2.0)).unwrap(), fx(0.5));
        let x = fx(-7.25);
        assert_eq!(x.try_div(x).unwrap(), Fxp32::ONE);
        let third = fx(1.0).try_div(fx(3.0)).unwrap();
        // exact rational oracle: round(2^17 / 3) = 43691
        assert_eq!(third.raw(), 43691);
        assert!((third.to_real() - 1.0 / 3.0).abs() <= 2f64.powi(-17));
        assert!(matches!(x.try_div(Fxp32::ZERO), Err(Error::DivisionByZero)));
        assert!(matches!(fx(10000.0).try_div(fx(0.01)), Err(Error::Saturated { .. })));
    }

    #[test]
    fn dot_examples() {
        let z = vec![Fxp32::ZERO; 4];
        assert_eq!(dot(&z, &z, Fxp32::ONE), (Fxp32::ZERO, false));
        let mut e1 = z.clone();
        e1[0] = Fxp32::ONE;
        assert_eq!(dot(&e1, &e1, Fxp32::ONE), (Fxp32::ONE, false));
    }

    #[test]
    fn dot_matches_float_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a: Vec<Fxp32> = (0..8).map(|_| fx(rng.gen_range(-4.0..4.0))).collect();
            let b: Vec<Fxp32> = (0..8).map(|_| fx(rng.gen_range(-4.0..4.0))).collect();
            let scale = fx(rng.gen_range(0.05..1.0));
            let expect: f64 = a.iter().zip(&b).map(|(x, y)| x.to_real() * y.to_real()).sum::<f64>() * scale.to_real();
            let (got, sat) = dot(&a, &b, scale);
            assert!(!sat);
            assert!((got.to_real() - expect).abs() <= 2f64.powi(-15), "{got:?} vs {expect}");
        }
    }

    #[test]
    fn accumulator_overflow_is_sticky() {
        let mut acc = Fxp64Acc::new();
        for _ in 0..8 {
            acc.mac(Fxp32::MAX, Fxp32::MAX);
        }
        assert!(acc.overflowed());
        acc.mac(Fxp32::MIN, Fxp32::MAX);
        assert!(acc.overflowed());
        assert!(acc.narrow().1);
    }

    #[test]
    fn q30_basics() {
        assert_eq!(Q30::from_real(1.0), Q30::ONE);
        assert_eq!(Q30::ONE.mul_round(Q30::from_real(-0.25)), Q30::from_real(-0.25));
        assert!((Q30::from_real(0.123456789).to_real() - 0.123456789).abs() < 1e-9);
    }

    fn any_fxp() -> impl Strategy<Value = Fxp32> {
        any::<i32>().prop_map(Fxp32::from_raw)
    }

    proptest! {
        #[test]
        fn mul_commutes(a in any_fxp(), b in any_fxp()) {
            prop_assert_eq!(a.overflowing_mul(b), b.overflowing_mul(a));
        }

        #[test]
        fn real_round_trip(x in any_fxp()) {
            prop_assert_eq!(Fxp32::from_real(x.to_real()).unwrap(), x);
        }

        #[test]
        fn mul_error_within_half_ulp(a in -50_000_000i32..50_000_000, b in -50_000_000i32..50_000_000) {
            let (a, b) = (Fxp32::from_raw(a), Fxp32::from_raw(b));
            let (p, sat) = a.overflowing_mul(b);
            prop_assume!(!sat);
            prop_assert!((p.to_real() - a.to_real() * b.to_real()).abs() <= 2f64.powi(-18));
        }

        #[test]
        fn dot_is_order_independent(
            pairs in proptest::collection::vec((any::<i32>(), any::<i32>()), 1..64),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let pairs: Vec<(Fxp32, Fxp32)> = pairs
                .into_iter()
                .map(|(x, y)| (Fxp32::from_raw(x >> 12), Fxp32::from_raw(y >> 12)))
                .collect();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let split = |p: &[(Fxp32, Fxp32)]| -> (Vec<Fxp32>, Vec<Fxp32>) { p.iter().copied().unzip() };
            let (a1, b1) = split(&pairs);
            let (a2, b2) = split(&shuffled);
            prop_assert_eq!(dot(&a1, &b1, Fxp32::ONE), dot(&a2, &b2, Fxp32::ONE));
        }

        #[test]
        fn div_within_one_ulp(n in -100_000_000i32..100_000_000, d in 1_000i32..100_000_000) {
            let (n, d) = (Fxp32::from_raw(n), Fxp32::from_raw(d));
            let q = n.try_div(d).unwrap();
            prop_assert!((q.to_real() - n.to_real() / d.to_real()).abs() <= 2f64.powi(-17));
        }
    }
}
