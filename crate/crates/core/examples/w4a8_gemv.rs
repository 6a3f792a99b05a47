//! W4A8 GEMV: 4-bit weights with per-row scales, 8-bit activations, chunked integer
//! accumulation and dequantization to Q15.17. Also round-trips an SKVW weight file.
//!
//! Run with `cargo run --example w4a8_gemv`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swiftkv::fxp::vec_to_real;
use swiftkv::quant::{gemv_chunked, gemv_fxp, quantize_activation, quantize_weights};
use swiftkv::QuantizedMatrix;
use swiftkv_oracle::metrics::relative_l2;

fn main() -> swiftkv::Result<()> {
    let (out_dim, in_dim) = (256, 1024);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w: Vec<f64> = (0..out_dim * in_dim).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let x: Vec<f64> = (0..in_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();

    let wq = quantize_weights(&w, out_dim, in_dim)?;
    let xq = quantize_activation(&x)?;
    println!("weights: {} bytes packed ({} floats)", wq.byte_size(), w.len());

    // Splitting the dot products into chunks never changes the integer result.
    let whole = gemv_chunked(&wq, &xq, 1)?;
    for chunks in [2, 8, 64] {
        assert_eq!(gemv_chunked(&wq, &xq, chunks)?, whole);
    }
    println!("chunked accumulators match for 1, 2, 8 and 64 chunks");

    let y = vec_to_real(&gemv_fxp(&wq, &xq, 8)?);
    let exact: Vec<f64> = (0..out_dim)
        .map(|r| (0..in_dim).map(|c| w[r * in_dim + c] * x[c]).sum())
        .collect();
    println!("relative L2 error vs float GEMV: {:.4}", relative_l2(&y, &exact));

    let path = std::env::temp_dir().join(format!("w4a8_example_{}.skvw", std::process::id()));
    wq.save(&path)?;
    let back = QuantizedMatrix::load(&path)?;
    std::fs::remove_file(&path).ok();
    println!("SKVW round trip identical: {}", back == wq);
    Ok(())
}
