//! One decode-attention query answered in a single pass over the KV cache, compared
//! against a float64 softmax, with the per-token scan trace and read counts.
//!
//! Run with `cargo run --example single_pass_attention`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swiftkv::fxp::{vec_from_real, vec_to_real};
use swiftkv::{attend, attend_with, Branch, CountingSource, ExpLut, KvCache, KvSource};
use swiftkv_oracle::attention::softmax_attention_ref;
use swiftkv_oracle::metrics::max_abs_diff;

fn main() -> swiftkv::Result<()> {
    let (d, t) = (64, 512);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut random_row = || vec_from_real(&(0..d).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<_>>());

    let mut cache = KvCache::with_capacity(d, t);
    for _ in 0..t {
        let (k, v) = (random_row()?, random_row()?);
        cache.append(&k, &v)?;
    }
    let q = random_row()?;
    let lut = ExpLut::shared();

    // Each cached row is read exactly once.
    let counted = CountingSource::new(&cache);
    let out = attend(&q, &counted, lut)?;
    println!(
        "d = {d}, T = {t}: {} key reads, {} value reads",
        counted.key_reads(),
        counted.value_reads()
    );

    let keys: Vec<Vec<f64>> = (0..t).map(|i| vec_to_real(cache.key(i))).collect();
    let values: Vec<Vec<f64>> = (0..t).map(|i| vec_to_real(cache.value(i))).collect();
    let want = softmax_attention_ref(&vec_to_real(&q), &keys, &values);
    println!(
        "max-abs error vs float64 softmax: {:.3e}",
        max_abs_diff(&vec_to_real(&out), &want)
    );

    // The trace shows when a new running maximum forces a rescale.
    let mut rescales = Vec::new();
    attend_with(&q, &cache, lut, |r| {
        if r.branch == Branch::Alpha {
            rescales.push(r.t);
        }
    })?;
    println!("{} rescales, at tokens {:?}", rescales.len(), rescales);
    println!("first outputs: {:?}", &out[..4]);
    Ok(())
}
