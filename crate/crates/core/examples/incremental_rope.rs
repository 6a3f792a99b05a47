//! Rotary embedding advanced one position at a time with four multiplies per pair,
//! against a direct cos/sin evaluation at each position.
//!
//! Run with `cargo run --example incremental_rope`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swiftkv::fxp::{vec_from_real, vec_to_real};
use swiftkv::rope::{rope_reference, DEFAULT_BASE};
use swiftkv::RopeCache;
use swiftkv_oracle::metrics::max_abs_diff;

fn main() -> swiftkv::Result<()> {
    let d = 128;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cache = RopeCache::new(d, DEFAULT_BASE)?;
    let mut worst = 0.0f64;
    for m in 1..=4096u64 {
        let x = vec_from_real(&(0..d).map(|_| rng.gen_range(-8.0..8.0)).collect::<Vec<_>>())?;
        let got = cache.rope_step(&x)?;
        let err = max_abs_diff(
            &vec_to_real(&got),
            &rope_reference(&vec_to_real(&x), m as f64, DEFAULT_BASE),
        );
        worst = worst.max(err);
        if m.is_power_of_two() && m >= 256 {
            println!("position {m:>5}: max-abs error so far {worst:.3e}");
        }
    }
    let ops = cache.ops();
    println!(
        "angle-update multiplies: {} ({} per pair per step)",
        ops.angle_muls,
        ops.angle_muls / (4096 * 64)
    );
    println!("operation counts: {ops:?}");

    // A cache can also start at an arbitrary position, e.g. after a prefill.
    let resumed = RopeCache::at_position(d, DEFAULT_BASE, 4096)?;
    println!("resumed cache position: {}", resumed.position());
    Ok(())
}
