//! `verify <suite>`: seeded property and oracle checks with a JSON report.

use std::path::Path;

use clap::ValueEnum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use swiftkv::fxp::{vec_from_real, vec_to_real};
use swiftkv::rope::rope_reference;
use swiftkv::{attend, bundle, CountingSource, Decoder, ExpLut, Fxp32, KvCache, LayerConfig, RopeCache};
use swiftkv_oracle::attention::{flash_decode_ref, online_softmax_ref, softmax_attention_ref};
use swiftkv_oracle::metrics::{argmax, cosine_similarity, max_abs_diff};

use crate::reference::{cache_rows, reference_of};
use crate::{CmdResult, Failure, Format};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Exp,
    Fxp,
    Rope,
    Attention,
    Pipeline,
}

#[derive(clap::Args, Debug)]
pub struct VerifyArgs {
    #[arg(value_enum)]
    suite: Suite,
    /// Head dimension (rope, attention).
    #[arg(long)]
    d: Option<usize>,
    /// Context length for attention, positions for rope, decode steps for pipeline.
    #[arg(long)]
    n: Option<usize>,
    /// Number of random instances (attention) or operand pairs (fxp).
    #[arg(long)]
    cases: Option<usize>,
    /// Inputs are drawn uniformly from [-range, range] (attention).
    #[arg(long, default_value_t = 4.0)]
    range: f64,
}

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    measured: f64,
    /// How `measured` is compared with `bound`.
    relation: &'static str,
    bound: f64,
    pass: bool,
}

fn at_most(name: &'static str, measured: f64, bound: f64) -> Check {
    Check {
        name,
        measured,
        relation: "<=",
        bound,
        pass: measured <= bound,
    }
}

fn at_least(name: &'static str, measured: f64, bound: f64) -> Check {
    Check {
        name,
        measured,
        relation: ">=",
        bound,
        pass: measured >= bound,
    }
}

#[derive(Serialize)]
struct Report {
    suite: Suite,
    seed: u64,
    parameters: serde_json::Value,
    checks: Vec<Check>,
    pass: bool,
}

pub fn run(
    seed: u64,
    config: Option<&Path>,
    out: Option<&Path>,
    format: Option<Format>,
    args: &VerifyArgs,
) -> CmdResult {
    crate::json_only(format, "verify")?;
    if args.d == Some(0) || args.n == Some(0) || args.cases == Some(0) {
        return Err(anyhow::anyhow!("--d, --n and --cases must be positive").into());
    }
    if !(args.range > 0.0 && args.range <= 8.0) {
        return Err(anyhow::anyhow!("--range must lie in (0, 8]").into());
    }
    let (parameters, checks) = match args.suite {
        Suite::Exp => exp_suite(),
        Suite::Fxp => fxp_suite(seed, args.cases.unwrap_or(100_000)),
        Suite::Rope => rope_suite(seed, args.d.unwrap_or(128), args.n.unwrap_or(4096))?,
        Suite::Attention => attention_suite(seed, args)?,
        Suite::Pipeline => {
            let cfg = match config {
                Some(p) => crate::read_json(p)?,
                None => LayerConfig::toy(),
            };
            pipeline_suite(seed, cfg, args.n.unwrap_or(100))?
        }
    };
    let pass = checks.iter().all(|c| c.pass);
    let report = Report {
        suite: args.suite,
        seed,
        parameters,
        checks,
        pass,
    };
    crate::write_json(out, &report)?;
    if pass {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn exp_suite() -> (serde_json::Value, Vec<Check>) {
    let lut = ExpLut::shared();
    let worst = (0..1 << 17)
        .into_par_iter()
        .map(|raw| {
            let f = Fxp32::from_raw(-raw);
            (lut.exp2_frac(f).unwrap().to_real() / f.to_real().exp2() - 1.0).abs()
        })
        .reduce(|| 0.0, f64::max);
    // exp over [-24, 0] on every raw point must never increase.
    let lo = -24 << 17;
    let increases = (lo..0)
        .into_par_iter()
        .filter(|&raw| {
            lut.exp_nonpos(Fxp32::from_raw(raw)).unwrap() > lut.exp_nonpos(Fxp32::from_raw(raw + 1)).unwrap()
        })
        .count();
    let one = lut.exp_nonpos(Fxp32::ZERO).unwrap();
    let tail = lut.exp_nonpos(Fxp32::from_int(-22)).unwrap();
    (
        serde_json::json!({"points": 1 << 17}),
        vec![
            at_most("exp2_frac_max_relative_error", worst, 5.86e-5),
            at_most("exp_nonpos_increases", increases as f64, 0.0),
            at_most("exp_zero_error_ulp", (one.raw() - Fxp32::ONE.raw()).abs() as f64, 0.0),
            at_most("exp_underflow_raw", tail.raw() as f64, 0.0),
        ],
    )
}

fn fxp_suite(seed: u64, cases: usize) -> (serde_json::Value, Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_ulp = 0.5 / (1u32 << 17) as f64;
    let (mut conv, mut mul, mut div, mut add) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let (a, b) = (rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
        let (fa, fb) = (Fxp32::from_real(a).unwrap(), Fxp32::from_real(b).unwrap());
        conv = conv.max((fa.to_real() - a).abs());
        let (ra, rb) = (fa.to_real(), fb.to_real());
        add = add.max((fa.saturating_add(fb).to_real() - (ra + rb)).abs());
        mul = mul.max((fa.saturating_mul(fb).to_real() - ra * rb).abs());
        if rb.abs() >= 1.0 {
            div = div.max((fa.try_div(fb).unwrap().to_real() - ra / rb).abs());
        }
    }
    let (sat, flag) = Fxp32::MAX.overflowing_add(Fxp32::ONE);
    let (neg, neg_flag) = Fxp32::MIN.overflowing_mul(Fxp32::from_int(2));
    let saturation_misses = [sat == Fxp32::MAX && flag, neg == Fxp32::MIN && neg_flag]
        .iter()
        .filter(|ok| !**ok)
        .count();
    (
        serde_json::json!({"cases": cases, "operand_range": [-100.0, 100.0]}),
        vec![
            at_most("from_real_abs_error", conv, half_ulp),
            at_most("add_abs_error", add, 0.0),
            at_most("mul_abs_error", mul, half_ulp),
            at_most("div_abs_error", div, half_ulp),
            at_most("saturation_misses", saturation_misses as f64, 0.0),
        ],
    )
}

fn rope_suite(seed: u64, d: usize, n: usize) -> anyhow::Result<(serde_json::Value, Vec<Check>)> {
    let base = swiftkv::rope::DEFAULT_BASE;
    let mut cache = RopeCache::new(d, base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for m in 1..=n {
        let x = vec_from_real(&(0..d).map(|_| rng.gen_range(-8.0..8.0)).collect::<Vec<_>>())?;
        let got = vec_to_real(&cache.rope_step(&x)?);
        worst = worst.max(max_abs_diff(&got, &rope_reference(&vec_to_real(&x), m as f64, base)));
    }
    let per_pair_step = cache.ops().angle_muls as f64 / (n as f64 * (d / 2) as f64);
    Ok((
        serde_json::json!({"d": d, "n": n, "base": base}),
        vec![
            at_most("max_abs_error", worst, 1e-3),
            at_most("angle_muls_per_pair_step", per_pair_step, 4.0),
        ],
    ))
}

fn attention_suite(seed: u64, args: &VerifyArgs) -> anyhow::Result<(serde_json::Value, Vec<Check>)> {
    let (d, n, cases, range) = (
        args.d.unwrap_or(128),
        args.n.unwrap_or(512),
        args.cases.unwrap_or(1),
        args.range,
    );
    let lut = ExpLut::shared();
    let per_case: Vec<anyhow::Result<(f64, f64, u64)>> = (0..cases)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut row = || vec_from_real(&(0..d).map(|_| rng.gen_range(-range..range)).collect::<Vec<_>>());
            let mut cache = KvCache::with_capacity(d, n);
            let (mut keys, mut values) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for _ in 0..n {
                let (k, v) = (row()?, row()?);
                cache.append(&k, &v)?;
                keys.push(vec_to_real(&k));
                values.push(vec_to_real(&v));
            }
            let q = row()?;
            let qr = vec_to_real(&q);
            let counted = CountingSource::new(&cache);
            let got = vec_to_real(&attend(&q, &counted, lut)?);
            let want = softmax_attention_ref(&qr, &keys, &values);
            let reads = counted.key_reads().max(counted.value_reads());
            let oracle = [
                online_softmax_ref(&qr, &keys, &values),
                flash_decode_ref(&qr, &keys, &values, 32),
            ]
            .iter()
            .map(|r| max_abs_diff(r, &want))
            .fold(0.0, f64::max);
            Ok((max_abs_diff(&got, &want), oracle, reads))
        })
        .collect();
    let per_case: Vec<_> = per_case.into_iter().collect::<anyhow::Result<_>>()?;
    let worst = per_case.iter().map(|c| c.0).fold(0.0, f64::max);
    let oracle = per_case.iter().map(|c| c.1).fold(0.0, f64::max);
    let reads = per_case.iter().map(|c| c.2).max().unwrap_or(0);
    Ok((
        serde_json::json!({"d": d, "n": n, "cases": cases, "range": range}),
        vec![
            at_most("max_abs_error", worst, 1e-4),
            at_most("kv_reads_per_row", reads as f64 / n as f64, 1.0),
            at_most("oracle_disagreement", oracle, 1e-10),
        ],
    ))
}

fn pipeline_suite(seed: u64, cfg: LayerConfig, steps: usize) -> anyhow::Result<(serde_json::Value, Vec<Check>)> {
    const PREFILL: usize = 8;
    let model = bundle::generate(
        &cfg,
        &bundle::GeneratorOptions {
            seed,
            ..bundle::GeneratorOptions::default()
        },
    )?;
    let d = cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reference = reference_of(&model);
    for _ in 0..PREFILL {
        reference.step(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
    }
    let (keys, values) = cache_rows(&reference);
    let mut decoder = Decoder::new(model)?;
    decoder.prefill(&keys, &values)?;
    let mut replay = decoder.clone();
    let x0 = vec_from_real(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())?;

    let (mut agree, mut min_cos, mut extra_reads) = (0usize, f64::INFINITY, 0u64);
    let mut outputs = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for _ in 0..steps {
        let heads = (decoder.layers().len() * cfg.n_heads) as u64;
        let expected_reads = heads * (decoder.cache_len() as u64 + 1);
        let want = reference.step(&vec_to_real(&x));
        let step = decoder.step(&x)?;
        extra_reads += step.kv_reads.abs_diff(expected_reads);
        let got = vec_to_real(&step.hidden);
        agree += usize::from(argmax(&got) == argmax(&want));
        min_cos = min_cos.min(cosine_similarity(&got, &want));
        outputs.push(step.hidden.clone());
        x = step.hidden;
    }
    let replayed = replay.run_decode(&x0, steps)?;
    let mismatched = outputs.iter().zip(&replayed).filter(|(a, b)| a != b).count();
    Ok((
        serde_json::json!({"config": cfg, "prefill": PREFILL, "steps": steps, "layers": 2}),
        vec![
            at_least("argmax_agreement", agree as f64 / steps as f64, 0.95),
            at_least("min_cosine", min_cos, 0.99),
            at_most("kv_read_excess", extra_reads as f64, 0.0),
            at_most("replay_mismatches", mismatched as f64, 0.0),
        ],
    ))
}
