//! Single-pass decode attention over a KV cache.
//!
//! Each cached `(k_t, v_t)` is read once. The scan keeps a running maximum `mu` of the
//! scaled scores, a normalizer `z` and a weighted value sum `y`; the division by `z`
//! happens once after the last token. Exponentials only ever see non-positive
//! arguments, so they come from [`ExpLut::exp_nonpos`].

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expo::ExpLut;
use crate::fxp::{self, Fxp32};

/// Read access to cached keys and values, one token at a time.
pub trait KvSource {
    fn head_dim(&self) -> usize;
    fn len(&self) -> usize;
    fn key(&self, t: usize) -> &[Fxp32];
    fn value(&self, t: usize) -> &[Fxp32];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Append-only per-head store of rotated keys and values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvCache {
    head_dim: usize,
    keys: Vec<Fxp32>,
    values: Vec<Fxp32>,
}

impl KvCache {
    pub fn new(head_dim: usize) -> Self {
        assert!(head_dim > 0, "head_dim must be positive");
        KvCache {
            head_dim,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn with_capacity(head_dim: usize, tokens: usize) -> Self {
        let mut c = KvCache::new(head_dim);
        c.keys.reserve(tokens * head_dim);
        c.values.reserve(tokens * head_dim);
        c
    }

    pub fn append(&mut self, key: &[Fxp32], value: &[Fxp32]) -> Result<()> {
        for (what, v) in [("key", key), ("value", value)] {
            if v.len() != self.head_dim {
                return Err(Error::ShapeMismatch {
                    what,
                    expected: self.head_dim,
                    got: v.len(),
                });
            }
        }
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        Ok(())
    }
}

impl KvSource for KvCache {
    fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn len(&self) -> usize {
        self.keys.len() / self.head_dim
    }

    #[inline]
    fn key(&self, t: usize) -> &[Fxp32] {
        &self.keys[t * self.head_dim..(t + 1) * self.head_dim]
    }

    #[inline]
    fn value(&self, t: usize) -> &[Fxp32] {
        &self.values[t * self.head_dim..(t + 1) * self.head_dim]
    }
}

/// Wraps a source and counts every key and value read.
#[derive(Debug)]
pub struct CountingSource<'a, S: ?Sized> {
    inner: &'a S,
    key_reads: Cell<u64>,
    value_reads: Cell<u64>,
}

impl<'a, S: KvSource + ?Sized> CountingSource<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        CountingSource {
            inner,
            key_reads: Cell::new(0),
            value_reads: Cell::new(0),
        }
    }

    pub fn key_reads(&self) -> u64 {
        self.key_reads.get()
    }

    pub fn value_reads(&self) -> u64 {
        self.value_reads.get()
    }
}

impl<S: KvSource + ?Sized> KvSource for CountingSource<'_, S> {
    fn head_dim(&self) -> usize {
        self.inner.head_dim()
    }

    fn len(&self) -> usize {
        self.inner.len()
    }

    fn key(&self, t: usize) -> &[Fxp32] {
        self.key_reads.set(self.key_reads.get() + 1);
        self.inner.key(t)
    }

    fn value(&self, t: usize) -> &[Fxp32] {
        self.value_reads.set(self.value_reads.get() + 1);
        self.inner.value(t)
    }
}

/// `1/sqrt(d)` rounded to Q15.17.
pub fn inv_sqrt_dim(d: usize) -> Fxp32 {
    Fxp32::from_real_saturating(1.0 / (d as f64).sqrt())
}

/// `q . k / sqrt(d)` with exact accumulation.
pub fn score(q: &[Fxp32], k: &[Fxp32], inv_sqrt_d: Fxp32) -> (Fxp32, bool) {
    fxp::dot(q, k, inv_sqrt_d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// First token: `mu = s`, `z = 1`, `y = v`.
    Init,
    /// `s <= mu`: accumulate with `beta = exp(s - mu)`.
    Beta,
    /// `s > mu`: rescale by `alpha = exp(mu - s)` and take `s` as the new maximum.
    Alpha,
}

/// One per-token record of the scan, for matching against a hardware trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    pub score_raw: i32,
    pub branch: Branch,
    /// Raw `alpha` or `beta`; 1.0 for the first token.
    pub factor_raw: i32,
    pub z_raw: i32,
}

/// Running `(mu, z, y)` of one head's scan plus the token count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwiftKvState {
    mu: Fxp32,
    z: Fxp32,
    y: Vec<Fxp32>,
    t: u64,
    saturated: bool,
}

impl SwiftKvState {
    pub fn new(head_dim: usize) -> Self {
        SwiftKvState {
            mu: Fxp32::ZERO,
            z: Fxp32::ZERO,
            y: vec![Fxp32::ZERO; head_dim],
            t: 0,
            saturated: false,
        }
    }

    /// Running maximum; `None` before the first token.
    pub fn mu(&self) -> Option<Fxp32> {
        (self.t > 0).then_some(self.mu)
    }

    pub fn z(&self) -> Fxp32 {
        self.z
    }

    pub fn y(&self) -> &[Fxp32] {
        &self.y
    }

    pub fn tokens(&self) -> u64 {
        self.t
    }

    /// Sticky: set once any update saturated.
    pub fn saturated(&self) -> bool {
        self.saturated
    }

    /// Folds one `(s_t, v_t)` into the state.
    pub fn step(&mut self, s: Fxp32, v: &[Fxp32], lut: &ExpLut) -> TraceRecord {
        assert_eq!(v.len(), self.y.len(), "value length differs from head_dim");
        self.t += 1;
        let (branch, factor) = if self.t == 1 {
            self.mu = s;
            self.z = Fxp32::ONE;
            self.y.copy_from_slice(v);
            (Branch::Init, Fxp32::ONE)
        } else if s <= self.mu {
            let (diff, d_sat) = s.overflowing_sub(self.mu);
            let beta = lut.exp_nonpos_unchecked(diff);
            let (z, z_sat) = self.z.overflowing_add(beta);
            self.z = z;
            let mut sat = d_sat || z_sat;
            for (y, &vi) in self.y.iter_mut().zip(v) {
                let (p, p_sat) = beta.overflowing_mul(vi);
                let (sum, s_sat) = y.overflowing_add(p);
                *y = sum;
                sat |= p_sat | s_sat;
            }
            self.saturated |= sat;
            (Branch::Beta, beta)
        } else {
            let (diff, d_sat) = self.mu.overflowing_sub(s);
            let alpha = lut.exp_nonpos_unchecked(diff);
            let (scaled, m_sat) = alpha.overflowing_mul(self.z);
            let (z, z_sat) = scaled.overflowing_add(Fxp32::ONE);
            self.z = z;
            self.mu = s;
            let mut sat = d_sat || m_sat || z_sat;
            for (y, &vi) in self.y.iter_mut().zip(v) {
                let (p, p_sat) = alpha.overflowing_mul(*y);
                let (sum, s_sat) = p.overflowing_add(vi);
                *y = sum;
                sat |= p_sat | s_sat;
            }
            self.saturated |= sat;
            (Branch::Alpha, alpha)
        };
        TraceRecord {
            t: self.t,
            score_raw: s.raw(),
            branch,
            factor_raw: factor.raw(),
            z_raw: self.z.raw(),
        }
    }

    /// `y / z`, elementwise.
    pub fn finalize(&self) -> Result<Vec<Fxp32>> {
        if self.t == 0 {
            return Err(Error::EmptyCache);
        }
        if self.saturated {
            return Err(Error::Saturated { op: "swiftkv update" });
        }
        self.y.iter().map(|&y| y.try_div(self.z)).collect()
    }
}

/// Attention output of `q` against every entry of `cache`, in one forward scan.
pub fn attend<S: KvSource + ?Sized>(q: &[Fxp32], cache: &S, lut: &ExpLut) -> Result<Vec<Fxp32>> {
    attend_with(q, cache, lut, |_| {})
}

/// [`attend`] that also hands every per-token record to `trace`.
pub fn attend_with<S, F>(q: &[Fxp32], cache: &S, lut: &ExpLut, mut trace: F) -> Result<Vec<Fxp32>>
where
    S: KvSource + ?Sized,
    F: FnMut(TraceRecord),
{
    let d = cache.head_dim();
    if q.len() != d {
        return Err(Error::ShapeMismatch {
            what: "query",
            expected: d,
            got: q.len(),
        });
    }
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    let inv_sqrt_d = inv_sqrt_dim(d);
    let mut state = SwiftKvState::new(d);
    for t in 0..cache.len() {
        let (s, sat) = score(q, cache.key(t), inv_sqrt_d);
        if sat {
            return Err(Error::Saturated { op: "attention score" });
        }
        trace(state.step(s, cache.value(t), lut));
    }
    state.finalize()
}
