//! Float64 twin of one pre-norm decoder layer: attention and a gated SiLU FFN, each
//! wrapped in a residual connection.

use crate::attention::softmax_attention_ref;
use crate::rope::rope_ref;

#[derive(Clone, Debug, PartialEq)]
pub struct RefConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub rope_base: f64,
    pub eps: f64,
}

impl RefConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Row-major `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        self.data
            .chunks(self.cols)
            .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefLayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
}

impl RefLayerWeights {
    pub fn zeros(cfg: &RefConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.ffn_dim);
        RefLayerWeights {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            w_gate: Matrix::zeros(f, d),
            w_up: Matrix::zeros(f, d),
            w_down: Matrix::zeros(d, f),
            attn_norm: vec![1.0; d],
            ffn_norm: vec![1.0; d],
        }
    }
}

/// Rotated keys and values of one head.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefCache {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl RefCache {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

pub fn rms_norm_ref(x: &[f64], gamma: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gamma).map(|(v, g)| v * inv * g).collect()
}

pub fn silu_ref(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// One decode step through the layer. Appends one `(k, v)` to every head cache; the
/// new token sits at position `cache_len + 1`.
pub fn reference_layer(cfg: &RefConfig, w: &RefLayerWeights, x: &[f64], caches: &mut [RefCache]) -> Vec<f64> {
    assert_eq!(x.len(), cfg.d_model);
    assert_eq!(caches.len(), cfg.n_heads);
    let dh = cfg.d_head();
    let h = rms_norm_ref(x, &w.attn_norm, cfg.eps);
    let q = w.wq.matvec(&h);
    let k = w.wk.matvec(&h);
    let v = w.wv.matvec(&h);
    let mut attn = Vec::with_capacity(cfg.d_model);
    for (head, cache) in caches.iter_mut().enumerate() {
        let span = head * dh..(head + 1) * dh;
        let pos = (cache.len() + 1) as f64;
        let qh = rope_ref(&q[span.clone()], pos, cfg.rope_base);
        cache.keys.push(rope_ref(&k[span.clone()], pos, cfg.rope_base));
        cache.values.push(v[span].to_vec());
        attn.extend(softmax_attention_ref(&qh, &cache.keys, &cache.values));
    }
    let o = w.wo.matvec(&attn);
    let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    let h2 = rms_norm_ref(&x1, &w.ffn_norm, cfg.eps);
    let gate = w.w_gate.matvec(&h2);
    let up = w.w_up.matvec(&h2);
    let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu_ref(*g) * u).collect();
    let down = w.w_down.matvec(&act);
    x1.iter().zip(&down).map(|(a, b)| a + b).collect()
}

/// Layer stack with an optional final RMS norm, mirroring the fixed-point decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct RefModel {
    pub config: RefConfig,
    pub layers: Vec<RefLayerWeights>,
    pub final_norm: Option<Vec<f64>>,
    pub caches: Vec<Vec<RefCache>>,
}

impl RefModel {
    pub fn new(config: RefConfig, layers: Vec<RefLayerWeights>, final_norm: Option<Vec<f64>>) -> Self {
        let caches = vec![vec![RefCache::default(); config.n_heads]; layers.len()];
        RefModel {
            config,
            layers,
            final_norm,
            caches,
        }
    }

    pub fn step(&mut self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (w, caches) in self.layers.iter().zip(self.caches.iter_mut()) {
            h = reference_layer(&self.config, w, &h, caches);
        }
        match &self.final_norm {
            Some(g) => rms_norm_ref(&h, g, self.config.eps),
            None => h,
        }
    }
}
