//! Shared helpers for integration tests: float64 twins of fixed-point models and a
//! teacher-forced fidelity run.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swiftkv::fxp::{vec_from_real, vec_to_real};
use swiftkv::{Decoder, Model, QuantizedMatrix};
use swiftkv_oracle::layer::{Matrix, RefConfig, RefLayerWeights, RefModel};
use swiftkv_oracle::metrics::{argmax, cosine_similarity};

fn dense(m: &QuantizedMatrix) -> Matrix {
    Matrix::new(m.out_dim(), m.in_dim(), m.dequantize())
}

/// Float64 model on the dequantized weights of `model`.
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

pub struct Fidelity {
    pub steps: usize,
    pub argmax_agree: usize,
    pub min_cosine: f64,
}

impl Fidelity {
    pub fn agreement(&self) -> f64 {
        self.argmax_agree as f64 / self.steps as f64
    }
}

/// Runs `prefill` random prompt vectors through the reference, loads its caches into
/// the decoder, then decodes `steps` tokens with the reference teacher-forced on the
/// decoder's inputs.
pub fn fidelity_run(model: &Model, seed: u64, prefill: usize, steps: usize) -> Fidelity {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.config.d_model;
    let mut reference = reference_of(model);
    let mut decoder = Decoder::new(model.clone()).unwrap();
    for _ in 0..prefill {
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        reference.step(&x);
    }
    if prefill > 0 {
        let keys: Vec<Vec<Vec<Vec<f64>>>> = reference
            .caches
            .iter()
            .map(|l| l.iter().map(|c| c.keys.clone()).collect())
            .collect();
        let values: Vec<Vec<Vec<Vec<f64>>>> = reference
            .caches
            .iter()
            .map(|l| l.iter().map(|c| c.values.clone()).collect())
            .collect();
        decoder.prefill(&keys, &values).unwrap();
    }
    let x0: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut x = vec_from_real(&x0).unwrap();
    let mut agree = 0;
    let mut min_cosine = f64::INFINITY;
    for _ in 0..steps {
        let want = reference.step(&vec_to_real(&x));
        let got = decoder.step(&x).unwrap().hidden;
        let got_real = vec_to_real(&got);
        if argmax(&got_real) == argmax(&want) {
            agree += 1;
        }
        min_cosine = min_cosine.min(cosine_similarity(&got_real, &want));
        x = got;
    }
    Fidelity {
        steps,
        argmax_agree: agree,
        min_cosine,
    }
}
