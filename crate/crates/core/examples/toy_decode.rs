//! A two-layer toy model decoding 32 tokens, each output fed back as the next input,
//! with a float64 twin on the dequantized weights for comparison.
//!
//! Run with `cargo run --example toy_decode`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swiftkv::bundle::toy_model;
use swiftkv::fxp::{vec_from_real, vec_to_real};
use swiftkv::{Decoder, QuantizedMatrix};
use swiftkv_oracle::layer::{Matrix, RefConfig, RefLayerWeights, RefModel};
use swiftkv_oracle::metrics::{argmax, cosine_similarity};

fn dense(m: &QuantizedMatrix) -> Matrix {
    Matrix::new(m.out_dim(), m.in_dim(), m.dequantize())
}

fn main() -> swiftkv::Result<()> {
    let model = toy_model(0)?;
    let c = model.config.clone();
    println!(
        "toy model: d_model {}, {} heads, ffn {}, {} layers",
        c.d_model,
        c.n_heads,
        c.ffn_dim,
        model.layers.len()
    );

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
    let ref_config = RefConfig {
        d_model: c.d_model,
        n_heads: c.n_heads,
        ffn_dim: c.ffn_dim,
        rope_base: c.rope_base,
        eps: c.eps.to_real(),
    };
    let mut reference = RefModel::new(ref_config, layers, model.final_norm.as_deref().map(vec_to_real));
    let mut decoder = Decoder::new(model)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut x = vec_from_real(&(0..c.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())?;
    let mut agree = 0;
    for token in 0..32 {
        // The reference gets the decoder's own input so one flip does not cascade.
        let want = reference.step(&vec_to_real(&x));
        let step = decoder.step(&x)?;
        let got = vec_to_real(&step.hidden);
        let same = argmax(&got) == argmax(&want);
        agree += usize::from(same);
        if token % 8 == 0 {
            println!(
                "token {token:>2}: argmax {:>2} (ref {:>2}), cosine {:.6}, kv reads {}",
                argmax(&got),
                argmax(&want),
                cosine_similarity(&got, &want),
                step.kv_reads
            );
        }
        x = step.hidden;
    }
    println!("argmax agreement over 32 tokens: {agree}/32");
    Ok(())
}
