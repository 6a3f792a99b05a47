//! Rotary positional embedding.
//!
//! [`rope_reference`] rotates directly by `m * theta_j` in float64. [`RopeCache`] is the
//! decode-time path: it caches `(cos m theta_j, sin m theta_j)` and moves to `m + 1`
//! with the angle-addition identity against the constants `(cos theta_j, sin theta_j)`,
//! four multiplies per channel pair, so no trigonometric function is evaluated after
//! construction.
//!
//! Cosines and sines are held in [`Q30`]; a periodic magnitude renormalization keeps
//! the recurrence on the unit circle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fxp::{round_shift, saturate_i32, Fxp32, Q30};

pub const DEFAULT_BASE: f64 = 10000.0;
/// Steps between magnitude renormalizations of the cached angles.
pub const DEFAULT_RENORM_PERIOD: u64 = 1024;

/// `base^(-2j/d)` for pair `j`.
pub fn theta(j: usize, d: usize, base: f64) -> f64 {
    base.powf(-2.0 * j as f64 / d as f64)
}

/// Float64 rotation of each pair `(x[2j], x[2j+1])` by `position * theta_j`.
pub fn rope_reference(x: &[f64], position: f64, base: f64) -> Vec<f64> {
    let d = x.len();
    assert!(d % 2 == 0, "rotary dimension must be even");
    let mut out = Vec::with_capacity(d);
    for (j, pair) in x.chunks_exact(2).enumerate() {
        let (s, c) = (position * theta(j, d, base)).sin_cos();
        out.push(pair[0] * c - pair[1] * s);
        out.push(pair[0] * s + pair[1] * c);
    }
    out
}

/// Multiply counts, split by purpose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RopeOps {
    pub angle_muls: u64,
    pub rotate_muls: u64,
    pub renorm_muls: u64,
}

/// Per-head cached angles at position `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeCache {
    a: Vec<Q30>,
    b: Vec<Q30>,
    cos_m: Vec<Q30>,
    sin_m: Vec<Q30>,
    m: u64,
    base: f64,
    renorm_period: u64,
    ops: RopeOps,
}

impl RopeCache {
    /// Cache at position 0: `cos = 1`, `sin = 0`.
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        RopeCache::at_position(head_dim, base, 0)
    }

    /// Cache anchored at position `m`, from float64 `cos`/`sin`. Used after prefill.
    pub fn at_position(head_dim: usize, base: f64, m: u64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary dimension {head_dim} must be even and positive"
            )));
        }
        if base.is_nan() || base <= 1.0 {
            return Err(Error::Config(format!("rotary base {base} must exceed 1")));
        }
        let pairs = head_dim / 2;
        let mut cache = RopeCache {
            a: Vec::with_capacity(pairs),
            b: Vec::with_capacity(pairs),
            cos_m: Vec::with_capacity(pairs),
            sin_m: Vec::with_capacity(pairs),
            m,
            base,
            renorm_period: DEFAULT_RENORM_PERIOD,
            ops: RopeOps::default(),
        };
        for j in 0..pairs {
            let th = theta(j, head_dim, base);
            let (s, c) = th.sin_cos();
            cache.a.push(Q30::from_real(c));
            cache.b.push(Q30::from_real(s));
            let (sm, cm) = if m == 0 { (0.0, 1.0) } else { (m as f64 * th).sin_cos() };
            cache.cos_m.push(Q30::from_real(cm));
            cache.sin_m.push(Q30::from_real(sm));
        }
        Ok(cache)
    }

    /// Sets the renormalization period; 0 disables it.
    pub fn with_renorm_period(mut self, period: u64) -> Self {
        self.renorm_period = period;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.a.len() * 2
    }

    pub fn position(&self) -> u64 {
        self.m
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn ops(&self) -> RopeOps {
        self.ops
    }

    pub fn cos_m(&self) -> &[Q30] {
        &self.cos_m
    }

    pub fn sin_m(&self) -> &[Q30] {
        &self.sin_m
    }

    /// `(j, raw a_j, raw b_j)` rows of the Q2.30 angle constants.
    pub fn constant_rows(&self) -> impl Iterator<Item = (usize, i32, i32)> + '_ {
        self.a
            .iter()
            .zip(&self.b)
            .enumerate()
            .map(|(j, (a, b))| (j, a.raw(), b.raw()))
    }

    /// Moves the cached angles from `m` to `m + 1`.
    fn advance(&mut self) {
        for j in 0..self.a.len() {
            let (a, b) = (self.a[j].raw() as i128, self.b[j].raw() as i128);
            let (c, s) = (self.cos_m[j].raw() as i128, self.sin_m[j].raw() as i128);
            self.cos_m[j] = Q30::from_wide(a * c - b * s);
            self.sin_m[j] = Q30::from_wide(a * s + b * c);
        }
        self.ops.angle_muls += 4 * self.a.len() as u64;
        self.m += 1;
        if self.renorm_period > 0 && self.m % self.renorm_period == 0 {
            self.renormalize();
        }
    }

    /// Scales each `(cos, sin)` by `1/sqrt(cos^2 + sin^2)`, two Newton iterations
    /// seeded at 1.
    fn renormalize(&mut self) {
        const ONE: i128 = 1 << 30;
        for j in 0..self.a.len() {
            let (c, s) = (self.cos_m[j].raw() as i128, self.sin_m[j].raw() as i128);
            let r2 = round_shift(c * c + s * s, 30);
            let mut y = ONE;
            for _ in 0..2 {
                let y2 = round_shift(y * y, 30);
                let half_t = round_shift(r2 * y2, 31);
                y = round_shift(y * (3 * ONE / 2 - half_t), 30);
            }
            self.cos_m[j] = Q30::from_wide(c * y);
            self.sin_m[j] = Q30::from_wide(s * y);
        }
        // 2 squares, 3 per Newton iteration, 2 rescales
        self.ops.renorm_muls += 10 * self.a.len() as u64;
    }

    fn rotate(&mut self, x: &[Fxp32]) -> Result<Vec<Fxp32>> {
        if x.len() != self.head_dim() {
            return Err(Error::ShapeMismatch {
                what: "rotary input",
                expected: self.head_dim(),
                got: x.len(),
            });
        }
        let mut out = Vec::with_capacity(x.len());
        let mut sat = false;
        for (j, pair) in x.chunks_exact(2).enumerate() {
            let (c, s) = (self.cos_m[j].raw() as i128, self.sin_m[j].raw() as i128);
            let (x0, x1) = (pair[0].raw() as i128, pair[1].raw() as i128);
            let (r0, s0) = saturate_i32(round_shift(x0 * c - x1 * s, Q30::FRAC_BITS));
            let (r1, s1) = saturate_i32(round_shift(x0 * s + x1 * c, Q30::FRAC_BITS));
            out.push(Fxp32::from_raw(r0));
            out.push(Fxp32::from_raw(r1));
            sat |= s0 | s1;
        }
        self.ops.rotate_muls += 2 * x.len() as u64;
        if sat {
            return Err(Error::Saturated { op: "rope rotation" });
        }
        Ok(out)
    }

    /// Rotates `q` to position `m + 1` and advances the cache.
    pub fn rope_step(&mut self, q: &[Fxp32]) -> Result<Vec<Fxp32>> {
        if q.len() != self.head_dim() {
            return Err(Error::ShapeMismatch {
                what: "rotary input",
                expected: self.head_dim(),
                got: q.len(),
            });
        }
        self.advance();
        self.rotate(q)
    }

    /// Rotates the query and key of the same new token with one cache advance.
    pub fn rope_pair(&mut self, q: &[Fxp32], k: &[Fxp32]) -> Result<(Vec<Fxp32>, Vec<Fxp32>)> {
        if k.len() != self.head_dim() {
            return Err(Error::ShapeMismatch {
                what: "rotary key",
                expected: self.head_dim(),
                got: k.len(),
            });
        }
        let q_rot = self.rope_step(q)?;
        let k_rot = self.rotate(k)?;
        Ok((q_rot, k_rot))
    }
}
