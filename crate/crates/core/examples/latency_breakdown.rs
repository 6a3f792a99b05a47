//! Per-token decode latency by phase for the 7B and 6B geometries, with the weight
//! streaming roofline and the attention share as context grows.
//!
//! Run with `cargo run --example latency_breakdown`.

use swiftkv::cyclemodel::{self, measured, HwConfig, ModelGeometry};

fn main() {
    let cfg = HwConfig::default();
    for geom in [ModelGeometry::llama2_7b(), ModelGeometry::chatglm_6b()] {
        let report = cyclemodel::model_token_latency(&geom, 512, &cfg);
        println!(
            "{} at N = 512: {:.2} ms per token, {:.1} tokens/s",
            geom.name,
            report.latency_s * 1e3,
            report.tokens_per_s
        );
        for (phase, cycles) in &report.phases {
            println!(
                "  {phase:<14} {cycles:>9} cycles  {:>6.2}%",
                100.0 * report.share(phase)
            );
        }
        if let Some(roof) = &report.roofline {
            println!(
                "  roofline: {:.2} GB of weights, memory {:.2} ms, compute {:.2} ms",
                roof.weight_bytes as f64 / 1e9,
                roof.memory_s * 1e3,
                roof.compute_s * 1e3
            );
        }
    }
    println!(
        "measured attention share (7B, N = 512): {:.2}%",
        100.0 * measured::ATTENTION_SHARE
    );

    let geom = ModelGeometry::llama2_7b();
    println!("\nattention share by context length (7B)");
    for n in [128, 512, 2048, 8192, 32768] {
        let share = cyclemodel::model_token_latency(&geom, n, &cfg).attention_share();
        println!("  N = {n:>5}: {:>6.2}%", 100.0 * share);
    }
}
