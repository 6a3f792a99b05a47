//! The special-function ops used between GEMVs: RMSNorm, SiLU, sigmoid, the
//! element-wise product and precision casts.
//!
//! Run with `cargo run --example sfu_ops`.

use swiftkv::fxp::{vec_from_real, vec_to_real};
use swiftkv::sfu::{cast, fxp_add, hadamard, rms_norm, sigmoid, silu, Precision, Tensor};
use swiftkv::{ExpLut, Fxp32};

fn main() -> swiftkv::Result<()> {
    let lut = ExpLut::shared();
    let x = vec_from_real(&[-3.0, -1.0, -0.25, 0.0, 0.5, 2.0, 6.0, 1.5])?;
    let gamma = vec![Fxp32::ONE; x.len()];

    let normed = rms_norm(&x, &gamma, Fxp32::from_real(1e-5)?)?;
    println!("rms_norm: {:?}", vec_to_real(&normed));

    let act = silu(&x, lut)?;
    let reference: Vec<f64> = vec_to_real(&x).iter().map(|v| v / (1.0 + (-v).exp())).collect();
    println!("silu:     {:?}", vec_to_real(&act));
    println!("float:    {reference:?}");
    println!("sigmoid(0.5) = {}", sigmoid(Fxp32::HALF, lut)?);

    // The FFN gate: silu(gate) * up, then a residual add.
    let up = vec_from_real(&[0.5; 8])?;
    let gated = hadamard(&act, &up)?;
    println!("gated + x: {:?}", vec_to_real(&fxp_add(&gated, &x)?));

    // Casting to INT8 with gain 127 / max|x| is how activations enter the GEMV.
    let gain = Fxp32::from_real(127.0 / 6.0)?;
    let codes = cast(&Tensor::Fxp32(x), Precision::Int8, gain)?;
    println!("int8 codes: {:?}", codes.into_int8().unwrap_or_default());
    Ok(())
}
