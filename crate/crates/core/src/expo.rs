//! Exponential of non-positive arguments as `2^(n + f)`: the integer part `n` is a right
//! shift, the fractional part `f in (-1, 0]` comes from a 32-entry table with linear
//! interpolation over the low 12 fractional bits.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::fxp::{round_shift, Fxp32, FRAC_BITS};

/// Table cells; the index is the top 5 fractional bits of `|f|`.
pub const CELLS: usize = 32;
/// Fractional bits left for interpolation inside a cell.
pub const CELL_BITS: u32 = FRAC_BITS - 5;

/// `log2(e)` rounded to Q15.17.
pub const LOG2_E: Fxp32 = Fxp32::from_raw(189_097);

const ONE: i32 = 1 << FRAC_BITS;
const CELL_MASK: i32 = (1 << CELL_BITS) - 1;

/// Interpolation table for `2^f`, `f in (-1, 0]`.
///
/// `entries[i] = 2^(-i/32)`. `slopes[i]` is the per-unit slope applied to the in-cell
/// remainder `g in [0, 1/32)`: the secant between adjacent entries, steepened to the
/// minimax value over the 4096 representable remainders. The line is floored at the next
/// entry, which keeps the curve monotone and continuous across cell boundaries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpLut {
    entries: [Fxp32; CELLS],
    slopes: [Fxp32; CELLS],
}

impl ExpLut {
    pub fn build() -> Self {
        let mut entries = [Fxp32::ZERO; CELLS];
        for (i, e) in entries.iter_mut().enumerate() {
            *e = Fxp32::from_real_saturating((-(i as f64) / CELLS as f64).exp2());
        }
        let slopes = std::array::from_fn(|i| fit_slope(&entries, i));
        ExpLut { entries, slopes }
    }

    /// Process-wide table, built on first use.
    pub fn shared() -> &'static ExpLut {
        static LUT: OnceLock<ExpLut> = OnceLock::new();
        LUT.get_or_init(ExpLut::build)
    }

    pub fn entries(&self) -> &[Fxp32; CELLS] {
        &self.entries
    }

    pub fn slopes(&self) -> &[Fxp32; CELLS] {
        &self.slopes
    }

    /// `(index, raw entry, raw slope)` rows for cross-checking a hardware table.
    pub fn rows(&self) -> impl Iterator<Item = (usize, i32, i32)> + '_ {
        (0..CELLS).map(|i| (i, self.entries[i].raw(), self.slopes[i].raw()))
    }

    /// `2^f` for `f in (-1, 0]`.
    pub fn exp2_frac(&self, f: Fxp32) -> Result<Fxp32> {
        if f.raw() > 0 || f.raw() <= -ONE {
            return Err(Error::Domain {
                op: "exp2_frac",
                value: f.to_real(),
            });
        }
        Ok(self.interpolate(-f.raw()))
    }

    /// `exp(x)` for `x <= 0`. Results below the shift range flush to zero.
    pub fn exp_nonpos(&self, x: Fxp32) -> Result<Fxp32> {
        if x.raw() > 0 {
            return Err(Error::Domain {
                op: "exp_nonpos",
                value: x.to_real(),
            });
        }
        Ok(self.exp_nonpos_unchecked(x))
    }

    #[inline]
    pub(crate) fn exp_nonpos_unchecked(&self, x: Fxp32) -> Fxp32 {
        debug_assert!(x.raw() <= 0);
        // Saturation only happens far below the underflow cutoff.
        let y = x.saturating_mul(LOG2_E).raw() as i64;
        let mag = -y;
        let shift = mag >> FRAC_BITS;
        if shift >= 31 {
            return Fxp32::ZERO;
        }
        // y = n + f with n = -shift and f = -(mag mod 1) in (-1, 0]
        let frac_mag = (mag & (ONE as i64 - 1)) as i32;
        let frac = self.interpolate(frac_mag);
        Fxp32::from_raw(round_shift(frac.raw() as i128, shift as u32) as i32)
    }

    /// `exp(x)` for `x <= 0` with 34 fractional bits. Same table and decomposition as
    /// [`exp_nonpos`](Self::exp_nonpos), but `x * log2(e)`, the interpolation and the
    /// shift keep their low bits, so the result moves smoothly with `x`.
    pub(crate) fn exp_nonpos_q34(&self, x: Fxp32) -> i64 {
        debug_assert!(x.raw() <= 0);
        const WIDE: u32 = 2 * FRAC_BITS;
        let mag = -(x.raw() as i64) * LOG2_E.raw() as i64;
        let shift = mag >> WIDE;
        if shift >= 62 - WIDE as i64 {
            return 0;
        }
        let frac = mag & ((1i64 << WIDE) - 1);
        let i = (frac >> (WIDE - 5)) as usize;
        let g = frac & ((1i64 << (WIDE - 5)) - 1);
        let base = (self.entries[i].raw() as i64) << FRAC_BITS;
        let line = base + round_shift(self.slopes[i].raw() as i128 * g as i128, FRAC_BITS) as i64;
        let floor = (cell_floor(&self.entries, i).raw() as i64) << FRAC_BITS;
        round_shift(line.max(floor) as i128, shift as u32) as i64
    }

    /// `2^(-mag)` for a Q15.17 magnitude `mag in [0, 1)`.
    #[inline]
    fn interpolate(&self, mag: i32) -> Fxp32 {
        let i = (mag >> CELL_BITS) as usize;
        let g = Fxp32::from_raw(mag & CELL_MASK);
        eval_cell(&self.entries, self.slopes[i], i, g)
    }
}

impl Default for ExpLut {
    fn default() -> Self {
        ExpLut::shared().clone()
    }
}

#[inline]
fn cell_floor(entries: &[Fxp32; CELLS], i: usize) -> Fxp32 {
    if i + 1 < CELLS {
        entries[i + 1]
    } else {
        Fxp32::HALF
    }
}

#[inline]
fn eval_cell(entries: &[Fxp32; CELLS], slope: Fxp32, i: usize, g: Fxp32) -> Fxp32 {
    let line = entries[i].saturating_add(slope.saturating_mul(g));
    line.max(cell_floor(entries, i))
}

/// Minimax slope for one cell, searched from the secant towards steeper values.
fn fit_slope(entries: &[Fxp32; CELLS], i: usize) -> Fxp32 {
    let lo = -(i as f64) / CELLS as f64;
    let hi = -((i + 1) as f64) / CELLS as f64;
    let secant = Fxp32::from_real_saturating((hi.exp2() - lo.exp2()) * CELLS as f64);
    let cell = 1usize << CELL_BITS;
    let truth: Vec<f64> = (0..cell)
        .map(|g| (-(((i << CELL_BITS) + g) as f64) / ONE as f64).exp2())
        .collect();
    let worst = |slope: Fxp32, bound: f64| -> f64 {
        let mut max = 0.0f64;
        for (g, &t) in truth.iter().enumerate() {
            let y = eval_cell(entries, slope, i, Fxp32::from_raw(g as i32)).to_real();
            let e = ((y - t) / t).abs();
            if e > max {
                max = e;
                if max >= bound {
                    break;
                }
            }
        }
        max
    };
    let span = secant.raw().abs() / 256;
    let mut best = (secant, worst(secant, f64::INFINITY));
    for k in 1..=span {
        let cand = Fxp32::from_raw(secant.raw() - k);
        let e = worst(cand, best.1);
        if e < best.1 {
            best = (cand, e);
        }
    }
    best.0
}

/// Convenience wrapper over the shared table.
pub fn exp_nonpos(x: Fxp32) -> Result<Fxp32> {
    ExpLut::shared().exp_nonpos(x)
}
