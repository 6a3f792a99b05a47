//! The 32-entry exponential table: its constants, a dense accuracy sweep, and
//! `exp(x)` for a few non-positive arguments.
//!
//! Run with `cargo run --example exp_lut`.

use swiftkv::{ExpLut, Fxp32};

fn main() -> swiftkv::Result<()> {
    let lut = ExpLut::shared();

    println!("{:>5} {:>10} {:>10}", "index", "entry", "slope");
    for (i, entry, slope) in lut.rows().step_by(4) {
        println!("{i:>5} {entry:>10} {slope:>10}");
    }

    // Every Q15.17 point in (-1, 0].
    let mut worst = (0.0f64, 0);
    for raw in 0..(1 << 17) {
        let f = Fxp32::from_raw(-raw);
        let rel = (lut.exp2_frac(f)?.to_real() / f.to_real().exp2() - 1.0).abs();
        if rel > worst.0 {
            worst = (rel, raw);
        }
    }
    println!(
        "\n2^f over 131072 points: max relative error {:.3e} at f = {:.6}",
        worst.0,
        -(worst.1 as f64) / (1 << 17) as f64
    );

    println!("\n{:>8} {:>14} {:>14}", "x", "table", "exp(x)");
    for x in [0.0, -0.5, -1.0, -2.5, -5.0, -10.0, -21.0, -22.0] {
        let got = lut.exp_nonpos(Fxp32::from_real(x)?)?;
        println!("{x:>8.2} {:>14.8} {:>14.8}", got.to_real(), x.exp());
    }
    Ok(())
}
