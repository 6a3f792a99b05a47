//! Functional simulator of one decode step through a pre-norm transformer layer:
//! dispatch, quantized QKV GEMV, per-head rotary embedding and single-pass attention,
//! concat, output projection, gated SiLU FFN, residual adds.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{attend_with, CountingSource, KvCache, TraceRecord};
use crate::error::{Error, Result};
use crate::expo::ExpLut;
use crate::fxp::Fxp32;
use crate::quant::{gemv_fxp, quantize_activation_fxp, QuantizedActivation, QuantizedMatrix};
use crate::rope::{RopeCache, DEFAULT_BASE};
use crate::sfu::{self, DEFAULT_EPS};

/// Where in the layer dataflow an error happened.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    AttnNorm,
    QkvGemv,
    Rope,
    KvAppend,
    Attention,
    OutProj,
    AttnResidual,
    FfnNorm,
    FfnGemv,
    Activation,
    DownProj,
    FfnResidual,
    FinalNorm,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::AttnNorm => "attention rms_norm",
            Stage::QkvGemv => "qkv gemv",
            Stage::Rope => "rope",
            Stage::KvAppend => "kv append",
            Stage::Attention => "attention",
            Stage::OutProj => "output gemv",
            Stage::AttnResidual => "attention residual",
            Stage::FfnNorm => "ffn rms_norm",
            Stage::FfnGemv => "gate/up gemv",
            Stage::Activation => "silu/hadamard",
            Stage::DownProj => "down gemv",
            Stage::FfnResidual => "ffn residual",
            Stage::FinalNorm => "final rms_norm",
        };
        f.write_str(name)
    }
}

fn default_rope_base() -> f64 {
    DEFAULT_BASE
}
fn default_processors() -> usize {
    32
}
fn default_chunk_width() -> usize {
    128
}
fn default_eps() -> Fxp32 {
    DEFAULT_EPS
}

/// Layer geometry. `eps` is stored as a raw Q15.17 integer in JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_processors")]
    pub n_processors: usize,
    #[serde(default = "default_chunk_width")]
    pub chunk_width: usize,
    #[serde(default = "default_eps")]
    pub eps: Fxp32,
}

impl LayerConfig {
    /// `d_model = 64`, 4 heads of 16, FFN 128, dispatched over 4 processors of width 16.
    pub fn toy() -> Self {
        LayerConfig {
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            rope_base: DEFAULT_BASE,
            n_processors: 4,
            chunk_width: 16,
            eps: DEFAULT_EPS,
        }
    }

    /// 4096-wide geometry with 32 heads of 128 and the default dispatch.
    pub fn llama2_7b() -> Self {
        LayerConfig {
            d_model: 4096,
            n_heads: 32,
            ffn_dim: 11008,
            rope_base: DEFAULT_BASE,
            n_processors: 32,
            chunk_width: 128,
            eps: DEFAULT_EPS,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return fail("d_model, n_heads and ffn_dim must be positive".into());
        }
        if self.n_processors == 0 || self.chunk_width == 0 || self.chunk_width % 2 != 0 {
            return fail("n_processors must be positive and chunk_width even and positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        let lane = self.chunk_width * self.n_processors;
        if self.d_model % lane != 0 {
            return fail(format!(
                "d_model {} not divisible by chunk_width * n_processors = {lane}",
                self.d_model
            ));
        }
        if self.ffn_dim % self.chunk_width != 0 {
            return fail(format!(
                "ffn_dim {} not divisible by chunk_width {}",
                self.ffn_dim, self.chunk_width
            ));
        }
        let dh = self.d_head();
        if dh > self.chunk_width || dh % 2 != 0 {
            return fail(format!(
                "d_head {dh} must be even and at most chunk_width {}",
                self.chunk_width
            ));
        }
        if self.rope_base.is_nan() || self.rope_base <= 1.0 {
            return fail(format!("rope_base {} must exceed 1", self.rope_base));
        }
        if self.eps.raw() <= 0 {
            return fail("eps must be positive".into());
        }
        Ok(())
    }

    fn chunks(&self, in_dim: usize) -> usize {
        in_dim / self.chunk_width
    }
}

/// Splits `x` into `n` contiguous equal chunks.
pub fn dispatch_split<T: Clone>(x: &[T], n: usize) -> Result<Vec<Vec<T>>> {
    if n == 0 || x.len() % n != 0 {
        return Err(Error::NotDivisible { len: x.len(), parts: n });
    }
    Ok(x.chunks(x.len() / n).map(<[T]>::to_vec).collect())
}

/// Inverse of [`dispatch_split`].
pub fn concat<T: Clone>(parts: &[Vec<T>]) -> Vec<T> {
    parts.concat()
}

/// Quantized weights and norm gains of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: QuantizedMatrix,
    pub wk: QuantizedMatrix,
    pub wv: QuantizedMatrix,
    pub wo: QuantizedMatrix,
    pub w_gate: QuantizedMatrix,
    pub w_up: QuantizedMatrix,
    pub w_down: QuantizedMatrix,
    pub attn_norm: Vec<Fxp32>,
    pub ffn_norm: Vec<Fxp32>,
}

impl LayerWeights {
    /// All-zero matrices and unit norm gains: the layer reduces to its residual path.
    pub fn zeros(cfg: &LayerConfig) -> Result<Self> {
        let (d, f) = (cfg.d_model, cfg.ffn_dim);
        Ok(LayerWeights {
            wq: QuantizedMatrix::zeros(d, d)?,
            wk: QuantizedMatrix::zeros(d, d)?,
            wv: QuantizedMatrix::zeros(d, d)?,
            wo: QuantizedMatrix::zeros(d, d)?,
            w_gate: QuantizedMatrix::zeros(f, d)?,
            w_up: QuantizedMatrix::zeros(f, d)?,
            w_down: QuantizedMatrix::zeros(d, f)?,
            attn_norm: vec![Fxp32::ONE; d],
            ffn_norm: vec![Fxp32::ONE; d],
        })
    }

    /// `(name, matrix)` pairs in a fixed order.
    pub fn matrices(&self) -> [(&'static str, &QuantizedMatrix); 7] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    pub fn check(&self, cfg: &LayerConfig) -> Result<()> {
        let (d, f) = (cfg.d_model, cfg.ffn_dim);
        let want = [(d, d), (d, d), (d, d), (d, d), (f, d), (f, d), (d, f)];
        for ((_, m), (o, i)) in self.matrices().iter().zip(want) {
            if m.out_dim() != o {
                return Err(Error::ShapeMismatch {
                    what: "weight rows",
                    expected: o,
                    got: m.out_dim(),
                });
            }
            if m.in_dim() != i {
                return Err(Error::ShapeMismatch {
                    what: "weight columns",
                    expected: i,
                    got: m.in_dim(),
                });
            }
        }
        for g in [&self.attn_norm, &self.ffn_norm] {
            if g.len() != d {
                return Err(Error::ShapeMismatch {
                    what: "norm gain",
                    expected: d,
                    got: g.len(),
                });
            }
        }
        Ok(())
    }
}

/// Result of one layer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub output: Vec<Fxp32>,
    /// Concatenated per-head attention outputs, before the output projection.
    pub attention: Vec<Fxp32>,
    /// Cached `(k, v)` entries read across all heads.
    pub kv_reads: u64,
}

/// Per-layer decode state: one KV cache and one rotary cache per head.
#[derive(Clone, Debug)]
pub struct LayerState {
    pub weights: LayerWeights,
    kv: Vec<KvCache>,
    rope: Vec<RopeCache>,
}

impl LayerState {
    pub fn new(cfg: &LayerConfig, weights: LayerWeights) -> Result<Self> {
        cfg.validate()?;
        weights.check(cfg)?;
        let dh = cfg.d_head();
        Ok(LayerState {
            weights,
            kv: (0..cfg.n_heads).map(|_| KvCache::new(dh)).collect(),
            rope: (0..cfg.n_heads)
                .map(|_| RopeCache::new(dh, cfg.rope_base))
                .collect::<Result<_>>()?,
        })
    }

    /// Tokens held by every head cache.
    pub fn cache_len(&self) -> usize {
        use crate::attention::KvSource;
        self.kv[0].len()
    }

    pub fn head_caches(&self) -> &[KvCache] {
        &self.kv
    }

    /// Loads float keys, already rotated to positions `1..=P`, and values for every
    /// head, then anchors the rotary caches at position `P`.
    pub fn prefill(&mut self, cfg: &LayerConfig, keys: &[Vec<Vec<f64>>], values: &[Vec<Vec<f64>>]) -> Result<()> {
        if keys.len() != cfg.n_heads || values.len() != cfg.n_heads {
            return Err(Error::ShapeMismatch {
                what: "prefill heads",
                expected: cfg.n_heads,
                got: keys.len().min(values.len()),
            });
        }
        let p = keys[0].len();
        let dh = cfg.d_head();
        let mut kv = Vec::with_capacity(cfg.n_heads);
        for (hk, hv) in keys.iter().zip(values) {
            if hk.len() != p || hv.len() != p {
                return Err(Error::Config("prefill heads differ in length".into()));
            }
            let mut cache = KvCache::with_capacity(dh, p);
            for (k, v) in hk.iter().zip(hv) {
                cache.append(&crate::fxp::vec_from_real(k)?, &crate::fxp::vec_from_real(v)?)?;
            }
            kv.push(cache);
        }
        self.kv = kv;
        self.rope = (0..cfg.n_heads)
            .map(|_| RopeCache::at_position(dh, cfg.rope_base, p as u64))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// One decode step. Appends exactly one `(k, v)` per head.
    pub fn decode_step(&mut self, cfg: &LayerConfig, layer: usize, x: &[Fxp32], lut: &ExpLut) -> Result<StepOutput> {
        self.decode_step_traced(cfg, layer, x, lut, &mut |_, _| {})
    }

    /// As [`decode_step`](Self::decode_step), reporting every attention recurrence step
    /// as `(head, record)`.
    pub fn decode_step_traced(
        &mut self,
        cfg: &LayerConfig,
        layer: usize,
        x: &[Fxp32],
        lut: &ExpLut,
        trace: &mut dyn FnMut(usize, &TraceRecord),
    ) -> Result<StepOutput> {
        if x.len() != cfg.d_model {
            return Err(Error::ShapeMismatch {
                what: "layer input",
                expected: cfg.d_model,
                got: x.len(),
            });
        }
        let w = &self.weights;
        let at = |stage: Stage| move |e: Error| e.at(layer, stage);
        let gemv = |m: &QuantizedMatrix, a: &QuantizedActivation| gemv_fxp(m, a, cfg.chunks(m.in_dim()));

        let h = sfu::rms_norm(x, &w.attn_norm, cfg.eps).map_err(at(Stage::AttnNorm))?;
        let hq = quantize_activation_fxp(&h).map_err(at(Stage::QkvGemv))?;
        let q = gemv(&w.wq, &hq).map_err(at(Stage::QkvGemv))?;
        let k = gemv(&w.wk, &hq).map_err(at(Stage::QkvGemv))?;
        let v = gemv(&w.wv, &hq).map_err(at(Stage::QkvGemv))?;

        let qs = dispatch_split(&q, cfg.n_heads)?;
        let ks = dispatch_split(&k, cfg.n_heads)?;
        let vs = dispatch_split(&v, cfg.n_heads)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut kv_reads = 0u64;
        for head in 0..cfg.n_heads {
            let (q_rot, k_rot) = self.rope[head]
                .rope_pair(&qs[head], &ks[head])
                .map_err(at(Stage::Rope))?;
            self.kv[head].append(&k_rot, &vs[head]).map_err(at(Stage::KvAppend))?;
            let src = CountingSource::new(&self.kv[head]);
            let out = attend_with(&q_rot, &src, lut, |r| trace(head, &r)).map_err(at(Stage::Attention))?;
            debug_assert_eq!(src.key_reads(), src.value_reads());
            kv_reads += src.key_reads();
            heads.push(out);
        }
        let attention = concat(&heads);

        let w = &self.weights;
        let aq = quantize_activation_fxp(&attention).map_err(at(Stage::OutProj))?;
        let o = gemv(&w.wo, &aq).map_err(at(Stage::OutProj))?;
        let x1 = sfu::fxp_add(x, &o).map_err(at(Stage::AttnResidual))?;

        let h2 = sfu::rms_norm(&x1, &w.ffn_norm, cfg.eps).map_err(at(Stage::FfnNorm))?;
        let h2q = quantize_activation_fxp(&h2).map_err(at(Stage::FfnGemv))?;
        let gate = gemv(&w.w_gate, &h2q).map_err(at(Stage::FfnGemv))?;
        let up = gemv(&w.w_up, &h2q).map_err(at(Stage::FfnGemv))?;
        let act = sfu::silu(&gate, lut)
            .and_then(|g| sfu::hadamard(&g, &up))
            .map_err(at(Stage::Activation))?;
        let actq = quantize_activation_fxp(&act).map_err(at(Stage::DownProj))?;
        let down = gemv(&w.w_down, &actq).map_err(at(Stage::DownProj))?;
        let output = sfu::fxp_add(&x1, &down).map_err(at(Stage::FfnResidual))?;

        Ok(StepOutput {
            output,
            attention,
            kv_reads,
        })
    }
}

/// A stack of layers with an optional final RMS norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: LayerConfig,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Option<Vec<Fxp32>>,
}

/// Output of one decoder step through the whole stack.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub hidden: Vec<Fxp32>,
    pub kv_reads: u64,
}

/// Multi-layer decode driver. Each step's output is the next step's input.
#[derive(Clone, Debug)]
pub struct Decoder {
    config: LayerConfig,
    layers: Vec<LayerState>,
    final_norm: Option<Vec<Fxp32>>,
    lut: &'static ExpLut,
}

impl Decoder {
    pub fn new(model: Model) -> Result<Self> {
        let Model {
            config,
            layers,
            final_norm,
        } = model;
        if layers.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        if let Some(g) = &final_norm {
            if g.len() != config.d_model {
                return Err(Error::ShapeMismatch {
                    what: "final norm gain",
                    expected: config.d_model,
                    got: g.len(),
                });
            }
        }
        let layers = layers
            .into_iter()
            .map(|w| LayerState::new(&config, w))
            .collect::<Result<_>>()?;
        Ok(Decoder {
            config,
            layers,
            final_norm,
            lut: ExpLut::shared(),
        })
    }

    pub fn config(&self) -> &LayerConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn cache_len(&self) -> usize {
        self.layers[0].cache_len()
    }

    /// Loads float prefill caches, indexed `[layer][head][token]`.
    pub fn prefill(&mut self, keys: &[Vec<Vec<Vec<f64>>>], values: &[Vec<Vec<Vec<f64>>>]) -> Result<()> {
        if keys.len() != self.layers.len() || values.len() != self.layers.len() {
            return Err(Error::ShapeMismatch {
                what: "prefill layers",
                expected: self.layers.len(),
                got: keys.len().min(values.len()),
            });
        }
        for (l, state) in self.layers.iter_mut().enumerate() {
            state.prefill(&self.config, &keys[l], &values[l])?;
        }
        Ok(())
    }

    pub fn step(&mut self, x: &[Fxp32]) -> Result<DecodeOutput> {
        self.step_traced(x, &mut |_, _, _| {})
    }

    /// One step through every layer, reporting `(layer, head, record)` traces.
    pub fn step_traced(
        &mut self,
        x: &[Fxp32],
        trace: &mut dyn FnMut(usize, usize, &TraceRecord),
    ) -> Result<DecodeOutput> {
        let mut h = x.to_vec();
        let mut kv_reads = 0;
        for (l, state) in self.layers.iter_mut().enumerate() {
            let out = state.decode_step_traced(&self.config, l, &h, self.lut, &mut |head, r| trace(l, head, r))?;
            kv_reads += out.kv_reads;
            h = out.output;
        }
        if let Some(g) = &self.final_norm {
            let last = self.layers.len() - 1;
            h = sfu::rms_norm(&h, g, self.config.eps).map_err(|e| e.at(last, Stage::FinalNorm))?;
        }
        Ok(DecodeOutput { hidden: h, kv_reads })
    }

    /// Runs `n_tokens` steps from `x0`, feeding each output back as the next input.
    pub fn run_decode(&mut self, x0: &[Fxp32], n_tokens: usize) -> Result<Vec<Vec<Fxp32>>> {
        let mut outputs = Vec::with_capacity(n_tokens);
        let mut x = x0.to_vec();
        for _ in 0..n_tokens {
            let out = self.step(&x)?.hidden;
            x.clone_from(&out);
            outputs.push(out);
        }
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize_weights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_weights(cfg: &LayerConfig, rng: &mut ChaCha8Rng, gain: f64) -> LayerWeights {
        let mut mat = |o: usize, i: usize| {
            let w: Vec<f64> = (0..o * i)
                .map(|_| rng.gen_range(-1.0..1.0) * gain / (i as f64).sqrt())
                .collect();
            quantize_weights(&w, o, i).unwrap()
        };
        let (d, f) = (cfg.d_model, cfg.ffn_dim);
        LayerWeights {
            wq: mat(d, d),
            wk: mat(d, d),
            wv: mat(d, d),
            wo: mat(d, d),
            w_gate: mat(f, d),
            w_up: mat(f, d),
            w_down: mat(d, f),
            attn_norm: vec![Fxp32::ONE; d],
            ffn_norm: vec![Fxp32::ONE; d],
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, d: usize) -> Vec<Fxp32> {
        (0..d)
            .map(|_| Fxp32::from_real(rng.gen_range(-2.0..2.0)).unwrap())
            .collect()
    }

    #[test]
    fn split_examples() {
        let x: Vec<i32> = (0..4096).collect();
        assert_eq!(dispatch_split(&x, 1).unwrap(), vec![x.clone()]);
        let parts = dispatch_split(&x, 32).unwrap();
        assert_eq!(parts.len(), 32);
        for (i, p) in parts.iter().enumerate() {
            assert_eq!(p.len(), 128);
            assert_eq!(p[0], 128 * i as i32);
        }
        assert_eq!(concat(&parts), x);
        assert!(matches!(dispatch_split(&x, 3), Err(Error::NotDivisible { .. })));
        assert!(dispatch_split(&x, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LayerConfig::toy().validate().is_ok());
        assert!(LayerConfig::llama2_7b().validate().is_ok());
        let mut c = LayerConfig::toy();
        c.d_model = 48;
        assert!(c.validate().is_err());
        let mut c = LayerConfig::toy();
        c.n_heads = 2;
        assert!(c.validate().is_err(), "d_head 32 exceeds chunk_width 16");
        let json = r#"{"d_model":64,"n_heads":4,"ffn_dim":128,"n_processors":4,"chunk_width":16}"#;
        let parsed: LayerConfig = serde_json::from_str(json).unwrap();
        assert_eq!(parsed, LayerConfig::toy());
    }

    #[test]
    fn zero_weights_are_identity() {
        let cfg = LayerConfig::toy();
        let mut state = LayerState::new(&cfg, LayerWeights::zeros(&cfg).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            let x = random_input(&mut rng, cfg.d_model);
            let out = state.decode_step(&cfg, 0, &x, ExpLut::shared()).unwrap();
            assert_eq!(out.output, x);
        }
    }

    #[test]
    fn cache_grows_by_one_and_reads_once() {
        let cfg = LayerConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut state = LayerState::new(&cfg, random_weights(&cfg, &mut rng, 0.5)).unwrap();
        for t in 1..=6 {
            let x = random_input(&mut rng, cfg.d_model);
            let out = state.decode_step(&cfg, 0, &x, ExpLut::shared()).unwrap();
            assert_eq!(state.cache_len(), t);
            assert!(state
                .head_caches()
                .iter()
                .all(|c| crate::attention::KvSource::len(c) == t));
            assert_eq!(out.kv_reads, (cfg.n_heads * t) as u64);
        }
    }

    #[test]
    fn head_permutation_is_bit_exact() {
        let cfg = LayerConfig::toy();
        let dh = cfg.d_head();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_weights(&cfg, &mut rng, 0.7);
        let perm = [2usize, 0, 3, 1];
        let rows: Vec<usize> = perm.iter().flat_map(|&h| h * dh..(h + 1) * dh).collect();
        let mut wp = w.clone();
        wp.wq = w.wq.select_rows(&rows);
        wp.wk = w.wk.select_rows(&rows);
        wp.wv = w.wv.select_rows(&rows);
        let mut a = LayerState::new(&cfg, w).unwrap();
        let mut b = LayerState::new(&cfg, wp).unwrap();
        for _ in 0..5 {
            let x = random_input(&mut rng, cfg.d_model);
            let oa = a.decode_step(&cfg, 0, &x, ExpLut::shared()).unwrap();
            let ob = b.decode_step(&cfg, 0, &x, ExpLut::shared()).unwrap();
            let heads_a = dispatch_split(&oa.attention, cfg.n_heads).unwrap();
            let heads_b = dispatch_split(&ob.attention, cfg.n_heads).unwrap();
            for (slot, &h) in perm.iter().enumerate() {
                assert_eq!(heads_b[slot], heads_a[h]);
            }
        }
    }

    #[test]
    fn saturation_carries_provenance() {
        let cfg = LayerConfig::toy();
        let mut w = LayerWeights::zeros(&cfg).unwrap();
        w.ffn_norm = vec![Fxp32::from_int(16000); cfg.d_model];
        w.w_down = quantize_weights(&vec![1.0; cfg.d_model * cfg.ffn_dim], cfg.d_model, cfg.ffn_dim).unwrap();
        w.w_gate = quantize_weights(&vec![1.0; cfg.ffn_dim * cfg.d_model], cfg.ffn_dim, cfg.d_model).unwrap();
        w.w_up = w.w_gate.clone();
        let mut state = LayerState::new(&cfg, w).unwrap();
        let x = vec![Fxp32::ONE; cfg.d_model];
        let err = state.decode_step(&cfg, 3, &x, ExpLut::shared()).unwrap_err();
        assert!(matches!(err, Error::Stage { layer: 3, .. }), "{err}");
    }

    #[test]
    fn run_decode_loops_back() {
        let cfg = LayerConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layers = (0..2).map(|_| random_weights(&cfg, &mut rng, 0.5)).collect();
        let model = Model {
            config: cfg.clone(),
            layers,
            final_norm: Some(vec![Fxp32::ONE; cfg.d_model]),
        };
        let x0 = random_input(&mut rng, cfg.d_model);
        let mut dec = Decoder::new(model.clone()).unwrap();
        assert!(dec.run_decode(&x0, 0).unwrap().is_empty());
        let outs = dec.run_decode(&x0, 5).unwrap();
        assert_eq!(outs.len(), 5);
        assert_eq!(dec.cache_len(), 5);

        let mut again = Decoder::new(model).unwrap();
        let mut x = x0.clone();
        for want in &outs {
            let got = again.step(&x).unwrap().hidden;
            assert_eq!(&got, want);
            x = got;
        }
    }

    #[test]
    fn prefill_sets_lengths_and_positions() {
        let cfg = LayerConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model {
            config: cfg.clone(),
            layers: vec![random_weights(&cfg, &mut rng, 0.5)],
            final_norm: None,
        };
        let mut dec = Decoder::new(model).unwrap();
        let dh = cfg.d_head();
        let make = |rng: &mut ChaCha8Rng| -> Vec<Vec<Vec<Vec<f64>>>> {
            vec![(0..cfg.n_heads)
                .map(|_| {
                    (0..7)
                        .map(|_| (0..dh).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .collect()
                })
                .collect()]
        };
        let (k, v) = (make(&mut rng), make(&mut rng));
        dec.prefill(&k, &v).unwrap();
        assert_eq!(dec.cache_len(), 7);
        let x = random_input(&mut rng, cfg.d_model);
        let out = dec.step(&x).unwrap();
        assert_eq!(dec.cache_len(), 8);
        assert_eq!(out.kv_reads, (cfg.n_heads * 8) as u64);
    }
}
