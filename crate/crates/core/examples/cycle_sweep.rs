//! Attention cycle counts for the four methods over context length, and the N = 512
//! speedups next to the measured board ratios.
//!
//! Run with `cargo run --example cycle_sweep`.

use swiftkv::cyclemodel::{self, HwConfig, Method};

fn main() {
    let cfg = HwConfig::default();
    let blocks = [8, 16, 32];
    let ns = [64, 128, 256, 512, 1024, 2048, 4096, 8192];
    let rows = cyclemodel::sweep(&Method::ALL, &ns, &blocks, 128, &cfg);

    println!(
        "{:>6} {:>10} {:>10} {:>12} {:>10}",
        "N", "swiftkv", "streaming", "flash (best)", "native"
    );
    for &n in &ns {
        let best = |m: Method| {
            rows.iter()
                .filter(|r| r.method == m && r.n == n)
                .map(|r| r.cycles)
                .min()
                .unwrap()
        };
        println!(
            "{n:>6} {:>10} {:>10} {:>12} {:>10}",
            best(Method::Swiftkv),
            best(Method::Streaming),
            best(Method::Flash),
            best(Method::Native)
        );
    }

    println!("\nspeedup over native at N = 512");
    for s in cyclemodel::speedup_summary(512, &blocks, 128, &cfg) {
        let measured = s.measured.map_or("-".to_string(), |m| format!("{m:.2}x"));
        println!("{:>10}: model {:.2}x, measured {measured}", s.method.name(), s.model);
    }
    println!("\nGEMV throughput: {:.1} GOPS", cyclemodel::gemv_gops(&cfg));
}
