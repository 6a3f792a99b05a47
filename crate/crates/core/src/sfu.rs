//! Special function unit: the non-MAC vector operations of a decode layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expo::ExpLut;
use crate::fxp::{round_div, round_shift, saturate_i32, Fxp32, Fxp64Acc, FRAC_BITS};

/// RMS norm epsilon when a configuration leaves it out: one ulp.
pub const DEFAULT_EPS: Fxp32 = Fxp32::ULP;

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch { what, expected, got });
    }
    Ok(())
}

/// Exact elementwise sum of INT32 partials.
pub fn em_add(a: &[i32], b: &[i32]) -> Result<Vec<i32>> {
    check_len("em_add operand", a.len(), b.len())?;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.checked_add(y).ok_or(Error::Saturated { op: "em_add" }))
        .collect()
}

/// Elementwise Q15.17 sum, used for residual connections.
pub fn fxp_add(a: &[Fxp32], b: &[Fxp32]) -> Result<Vec<Fxp32>> {
    check_len("residual operand", a.len(), b.len())?;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match x.overflowing_add(y) {
            (v, false) => Ok(v),
            (_, true) => Err(Error::Saturated { op: "residual add" }),
        })
        .collect()
}

pub fn hadamard(a: &[Fxp32], b: &[Fxp32]) -> Result<Vec<Fxp32>> {
    check_len("hadamard operand", a.len(), b.len())?;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match x.overflowing_mul(y) {
            (v, false) => Ok(v),
            (_, true) => Err(Error::Saturated { op: "hadamard" }),
        })
        .collect()
}

/// Logistic function. `e = exp(-|x|)` comes from the shared table at 34 fractional
/// bits, then `1 / (1 + e)`, reflected as `e / (1 + e)` for negative `x`, is rounded
/// once.
pub fn sigmoid(x: Fxp32, lut: &ExpLut) -> Result<Fxp32> {
    let e = lut.exp_nonpos_q34(-x.abs()) as i128;
    let den = (1i128 << (2 * FRAC_BITS)) + e;
    let num = if x.is_negative() { e } else { 1i128 << (2 * FRAC_BITS) };
    Ok(Fxp32::from_raw(round_div(num << FRAC_BITS, den) as i32))
}

/// `x * sigmoid(x)` with a single rounding, which keeps it monotone on the grid
/// wherever the real function is.
pub fn silu(x: &[Fxp32], lut: &ExpLut) -> Result<Vec<Fxp32>> {
    let one = 1i128 << (2 * FRAC_BITS);
    x.iter()
        .map(|&v| {
            let e = lut.exp_nonpos_q34(-v.abs()) as i128;
            let num = v.raw() as i128 * if v.is_negative() { e } else { one };
            let (y, sat) = saturate_i32(round_div(num, one + e));
            if sat {
                return Err(Error::Saturated { op: "silu" });
            }
            Ok(Fxp32::from_raw(y))
        })
        .collect()
}

/// Seeds for `1/sqrt(m)` over `m in [1, 4)`, at cell midpoints.
fn inv_sqrt_seed(idx: usize) -> Fxp32 {
    const SEEDS: usize = 64;
    let m = 1.0 + 3.0 * (idx as f64 + 0.5) / SEEDS as f64;
    Fxp32::from_real_saturating(1.0 / m.sqrt())
}

/// `1/sqrt(v)` for a positive Q.34 value: even-power normalization into `[1, 4)`,
/// a 64-entry seed table and two Newton iterations.
pub fn inv_sqrt_wide(v: i128) -> Result<Fxp32> {
    if v <= 0 {
        return Err(Error::DivisionByZero);
    }
    let frac = Fxp64Acc::FRAC_BITS as i32;
    // v = m * 4^k with m in [1, 4) as Q.34
    let msb = 127 - v.leading_zeros() as i32;
    let k = (msb - frac).div_euclid(2);
    let shift = 2 * k;
    let m_wide = if shift >= 0 { v >> shift } else { v << -shift };
    // Q.34 -> Q15.17 mantissa; m < 4 always fits
    let m = Fxp32::from_raw(round_shift(m_wide, FRAC_BITS) as i32);
    let one = 1i64 << FRAC_BITS;
    let idx = (((m.raw() as i64 - one) * 64) / (3 * one)).clamp(0, 63) as usize;
    let mut y = inv_sqrt_seed(idx);
    let three_halves = Fxp32::from_raw((3 << FRAC_BITS) / 2);
    for _ in 0..2 {
        let half_t = m.saturating_mul(y.saturating_mul(y)).raw() / 2;
        y = y.saturating_mul(three_halves.saturating_sub(Fxp32::from_raw(half_t)));
    }
    // 1/sqrt(v) = y * 2^-k
    let raw = if k >= 0 {
        round_shift(y.raw() as i128, k as u32)
    } else {
        (y.raw() as i128) << (-k) as u32
    };
    match saturate_i32(raw) {
        (r, false) => Ok(Fxp32::from_raw(r)),
        (_, true) => Err(Error::Saturated { op: "inv_sqrt" }),
    }
}

/// `x_i * gamma_i / sqrt(mean(x^2) + eps)`.
pub fn rms_norm(x: &[Fxp32], gamma: &[Fxp32], eps: Fxp32) -> Result<Vec<Fxp32>> {
    if x.is_empty() {
        return Err(Error::ShapeMismatch {
            what: "rms_norm input",
            expected: 1,
            got: 0,
        });
    }
    check_len("rms_norm gamma", x.len(), gamma.len())?;
    let sum_sq: i128 = x.iter().map(|v| v.raw() as i128 * v.raw() as i128).sum();
    // exact mean would need a rational; truncating at Q.34 costs < 2^-34
    let mean = sum_sq / x.len() as i128;
    let eps_wide = (eps.raw() as i128) << FRAC_BITS;
    let inv = inv_sqrt_wide(mean + eps_wide)?;
    x.iter()
        .zip(gamma)
        .map(|(&v, &g)| {
            let (n, s1) = v.overflowing_mul(inv);
            let (y, s2) = n.overflowing_mul(g);
            if s1 || s2 {
                Err(Error::Saturated { op: "rms_norm" })
            } else {
                Ok(y)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Int32,
    Fxp32,
    Int8,
}

impl Precision {
    fn frac_bits(self) -> u32 {
        match self {
            Precision::Fxp32 => FRAC_BITS,
            Precision::Int32 | Precision::Int8 => 0,
        }
    }

    fn bounds(self) -> (i128, i128) {
        match self {
            Precision::Int32 | Precision::Fxp32 => (i32::MIN as i128, i32::MAX as i128),
            Precision::Int8 => (-127, 127),
        }
    }
}

/// A vector tagged with its element format.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tensor {
    Int32(Vec<i32>),
    Fxp32(Vec<Fxp32>),
    Int8(Vec<i8>),
}

impl Tensor {
    pub fn precision(&self) -> Precision {
        match self {
            Tensor::Int32(_) => Precision::Int32,
            Tensor::Fxp32(_) => Precision::Fxp32,
            Tensor::Int8(_) => Precision::Int8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Tensor::Int32(v) => v.len(),
            Tensor::Fxp32(v) => v.len(),
            Tensor::Int8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn raw_iter(&self) -> Box<dyn Iterator<Item = i128> + '_> {
        match self {
            Tensor::Int32(v) => Box::new(v.iter().map(|&x| x as i128)),
            Tensor::Fxp32(v) => Box::new(v.iter().map(|x| x.raw() as i128)),
            Tensor::Int8(v) => Box::new(v.iter().map(|&x| x as i128)),
        }
    }

    pub fn into_fxp32(self) -> Option<Vec<Fxp32>> {
        match self {
            Tensor::Fxp32(v) => Some(v),
            _ => None,
        }
    }

    pub fn into_int8(self) -> Option<Vec<i8>> {
        match self {
            Tensor::Int8(v) => Some(v),
            _ => None,
        }
    }

    pub fn into_int32(self) -> Option<Vec<i32>> {
        match self {
            Tensor::Int32(v) => Some(v),
            _ => None,
        }
    }
}

/// Multiplies by `scale`, then rounds half to even onto the target grid.
///
/// INT8 saturates at +-127; saturation anywhere is reported as an error.
pub fn cast(x: &Tensor, to: Precision, scale: Fxp32) -> Result<Tensor> {
    let shift = x.precision().frac_bits() + FRAC_BITS - to.frac_bits();
    let (lo, hi) = to.bounds();
    let mut sat = false;
    let vals: Vec<i128> = x
        .raw_iter()
        .map(|r| {
            let v = round_shift(r * scale.raw() as i128, shift);
            if v < lo || v > hi {
                sat = true;
            }
            v.clamp(lo, hi)
        })
        .collect();
    if sat {
        return Err(Error::Saturated { op: "cast" });
    }
    Ok(match to {
        Precision::Int32 => Tensor::Int32(vals.into_iter().map(|v| v as i32).collect()),
        Precision::Fxp32 => Tensor::Fxp32(vals.into_iter().map(|v| Fxp32::from_raw(v as i32)).collect()),
        Precision::Int8 => Tensor::Int8(vals.into_iter().map(|v| v as i8).collect()),
    })
}

/// `127 / max|x|` for a non-zero maximum; the multiplier that maps `x` onto INT8 codes.
pub(crate) fn int8_gain(max_abs: Fxp32) -> Result<Fxp32> {
    let q = round_div((127i128 << FRAC_BITS) << FRAC_BITS, max_abs.raw() as i128);
    match saturate_i32(q) {
        (r, false) => Ok(Fxp32::from_raw(r)),
        (_, true) => Err(Error::Saturated { op: "int8 gain" }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::{vec_from_real, vec_to_real};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use swiftkv_oracle::layer::{rms_norm_ref, silu_ref};

    fn fx(x: f64) -> Fxp32 {
        Fxp32::from_real(x).unwrap()
    }

    fn lut() -> &'static ExpLut {
        ExpLut::shared()
    }

    #[test]
    fn em_add_examples() {
        assert_eq!(em_add(&[0, 0], &[5, -9]).unwrap(), vec![5, -9]);
        assert_eq!(em_add(&[1, 2], &[1, 2]).unwrap(), vec![2, 4]);
        assert!(em_add(&[i32::MAX], &[1]).is_err());
        assert!(em_add(&[1], &[1, 2]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<i32> = (0..4096).map(|_| rng.gen_range(-1 << 20..1 << 20)).collect();
        let b: Vec<i32> = (0..4096).map(|_| rng.gen_range(-1 << 20..1 << 20)).collect();
        let want: Vec<i32> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| ((*x as i64) + (*y as i64)) as i32)
            .collect();
        assert_eq!(em_add(&a, &b).unwrap(), want);
    }

    #[test]
    fn hadamard_examples() {
        let a = vec_from_real(&[1.5, -2.25, 7.0]).unwrap();
        assert_eq!(hadamard(&a, &[Fxp32::ONE; 3]).unwrap(), a);
        assert_eq!(hadamard(&a, &[Fxp32::ZERO; 3]).unwrap(), vec![Fxp32::ZERO; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let (x, y) = (fx(rng.gen_range(-8.0..8.0)), fx(rng.gen_range(-8.0..8.0)));
            let p = hadamard(&[x], &[y]).unwrap()[0].to_real();
            assert!((p - x.to_real() * y.to_real()).abs() <= 2f64.powi(-16));
        }
    }

    #[test]
    fn silu_examples() {
        assert_eq!(silu(&[Fxp32::ZERO], lut()).unwrap(), vec![Fxp32::ZERO]);
        let y = silu(&[fx(16.0), fx(-16.0)], lut()).unwrap();
        assert!((y[0].to_real() - silu_ref(16.0)).abs() <= 1e-3);
        assert!((y[1].to_real() - silu_ref(-16.0)).abs() <= 1e-3);
        let mut raw = -8 << FRAC_BITS;
        while raw <= 8 << FRAC_BITS {
            let x = Fxp32::from_raw(raw);
            let got = silu(&[x], lut()).unwrap()[0].to_real();
            assert!((got - silu_ref(x.to_real())).abs() <= 2e-4, "{x:?}");
            raw += 1013;
        }
    }

    #[test]
    fn silu_monotone_from_minus_one() {
        let mut prev = silu(&[-Fxp32::ONE], lut()).unwrap()[0];
        let mut violations = Vec::new();
        for raw in (-(1 << FRAC_BITS) + 1)..=(4 << FRAC_BITS) {
            let y = silu(&[Fxp32::from_raw(raw)], lut()).unwrap()[0];
            if y < prev {
                violations.push((raw, prev.raw() - y.raw()));
            }
            prev = y;
        }
        assert!(
            violations.is_empty(),
            "{} violations, first {:?}",
            violations.len(),
            &violations[..violations.len().min(5)]
        );
    }

    #[test]
    fn rms_norm_examples() {
        let y = rms_norm(&[Fxp32::ONE; 16], &[Fxp32::ONE; 16], Fxp32::ZERO).unwrap();
        assert!(y.iter().all(|v| (v.raw() - Fxp32::ONE.raw()).abs() <= 2));
        assert!(rms_norm(&[Fxp32::ZERO; 4], &[Fxp32::ONE; 4], Fxp32::ZERO).is_err());
        assert!(rms_norm(&[], &[], DEFAULT_EPS).is_err());
    }

    #[test]
    fn rms_norm_scale_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x: Vec<Fxp32> = (0..64).map(|_| fx(rng.gen_range(-4.0..4.0))).collect();
            let x2: Vec<Fxp32> = x.iter().map(|v| Fxp32::from_raw(v.raw() * 2)).collect();
            let g = vec![Fxp32::ONE; 64];
            let a = rms_norm(&x, &g, Fxp32::ZERO).unwrap();
            let b = rms_norm(&x2, &g, Fxp32::ZERO).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p.raw() - q.raw()).abs() <= 4);
            }
        }
    }

    #[test]
    fn rms_norm_matches_float_and_has_unit_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xr: Vec<f64> = (0..4096).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let gr: Vec<f64> = (0..4096).map(|_| rng.gen_range(0.5..1.5)).collect();
        let x = vec_from_real(&xr).unwrap();
        let g = vec_from_real(&gr).unwrap();
        let got = vec_to_real(&rms_norm(&x, &g, DEFAULT_EPS).unwrap());
        let want = rms_norm_ref(&vec_to_real(&x), &vec_to_real(&g), DEFAULT_EPS.to_real());
        let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-3, "{err}");

        let unit = vec_to_real(&rms_norm(&x, &vec![Fxp32::ONE; 4096], Fxp32::ZERO).unwrap());
        let rms = (unit.iter().map(|v| v * v).sum::<f64>() / 4096.0).sqrt();
        assert!((rms - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn inv_sqrt_accuracy() {
        for v in [2f64.powi(-17), 1e-3, 0.25, 1.0, 2.0, 3.999, 17.0, 1000.0, 12345.0] {
            let wide = (v * 2f64.powi(34)).round() as i128;
            let got = inv_sqrt_wide(wide).unwrap().to_real();
            let want = 1.0 / v.sqrt();
            assert!((got - want).abs() <= 1e-5 * want + 2f64.powi(-16), "v={v} got={got}");
        }
    }

    #[test]
    fn cast_examples() {
        let x = Tensor::Fxp32(vec_from_real(&[1.25, -3.5]).unwrap());
        assert_eq!(cast(&x, Precision::Fxp32, Fxp32::ONE).unwrap(), x);
        let one = Tensor::Fxp32(vec![Fxp32::ONE]);
        assert_eq!(
            cast(&one, Precision::Int8, Fxp32::from_int(127)).unwrap(),
            Tensor::Int8(vec![127])
        );
        assert!(cast(&one, Precision::Int8, Fxp32::from_int(128)).is_err());
        let acc = Tensor::Int32(vec![3, -4]);
        assert_eq!(
            cast(&acc, Precision::Fxp32, Fxp32::HALF).unwrap(),
            Tensor::Fxp32(vec_from_real(&[1.5, -2.0]).unwrap())
        );
    }

    #[test]
    fn int8_round_trip_with_matched_scales() {
        for scale in [1.0 / 127.0, 0.0123, 0.5, 3.0] {
            let s = fx(scale);
            let inv = Fxp32::ONE.try_div(s).unwrap();
            let codes: Vec<i8> = (-127..=127).collect();
            let f = cast(&Tensor::Int8(codes.clone()), Precision::Fxp32, s).unwrap();
            let back = cast(&f, Precision::Int8, inv).unwrap();
            assert_eq!(back, Tensor::Int8(codes), "scale {scale}");
        }
    }
}
