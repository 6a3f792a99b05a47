//! Float64 twin of a fixed-point model, built from its dequantized weights.

use swiftkv::fxp::vec_to_real;
use swiftkv::{Model, QuantizedMatrix};
use swiftkv_oracle::layer::{Matrix, RefConfig, RefLayerWeights, RefModel};

fn dense(m: &QuantizedMatrix) -> Matrix {
    Matrix::new(m.out_dim(), m.in_dim(), m.dequantize())
}

pub fn reference_of(model: &Model) -> RefModel {
    let c = &model.config;
    let config = RefConfig {
        d_model: c.d_model,
        n_heads: c.n_heads,
        ffn_dim: c.ffn_dim,
        rope_base: c.rope_base,
        eps: c.eps.to_real(),
    };
    let layers = model
        .layers
        .iter()
        .map(|w| RefLayerWeights {
            wq: dense(&w.wq),
            wk: dense(&w.wk),
            wv: dense(&w.wv),
            wo: dense(&w.wo),
            w_gate: dense(&w.w_gate),
            w_up: dense(&w.w_up),
            w_down: dense(&w.w_down),
            attn_norm: vec_to_real(&w.attn_norm),
            ffn_norm: vec_to_real(&w.ffn_norm),
        })
        .collect();
    RefModel::new(config, layers, model.final_norm.as_deref().map(vec_to_real))
}

/// Per-layer, per-head float keys and values of the reference caches, shaped for
/// [`swiftkv::Decoder::prefill`].
pub type CacheRows = Vec<Vec<Vec<Vec<f64>>>>;

pub fn cache_rows(reference: &RefModel) -> (CacheRows, CacheRows) {
    let keys = reference
        .caches
        .iter()
        .map(|l| l.iter().map(|c| c.keys.clone()).collect())
        .collect();
    let values = reference
        .caches
        .iter()
        .map(|l| l.iter().map(|c| c.values.clone()).collect())
        .collect();
    (keys, values)
}
