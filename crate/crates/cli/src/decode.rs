//! `decode`: loads a bundle, optionally prefills a random prompt, and writes one JSON
//! line per generated token (plus one line per head and token with `--trace`).

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use swiftkv::fxp::{vec_from_real, vec_to_real};
use swiftkv::{bundle, Decoder, Fxp32, TraceRecord};
use swiftkv_oracle::metrics::{argmax, cosine_similarity};

use crate::reference::{cache_rows, reference_of};
use crate::{sink, CmdResult, Format};

#[derive(clap::Args, Debug)]
pub struct DecodeArgs {
    /// Bundle directory written by `gen-model`.
    bundle: PathBuf,
    /// Number of tokens to decode.
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    /// Random prompt vectors pushed through the float reference and loaded as the
    /// starting cache.
    #[arg(long, default_value_t = 0)]
    prefill: usize,
    /// Also write every head's per-token scan records.
    #[arg(long)]
    trace: bool,
    /// Run the float64 reference alongside and add cosine/argmax agreement fields.
    #[arg(long)]
    compare_ref: bool,
}

#[derive(Serialize)]
struct TokenLine {
    token: usize,
    position: usize,
    output_raw: Vec<i32>,
    kv_reads: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    cosine: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    argmax_agree: Option<bool>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    token: usize,
    layer: usize,
    head: usize,
    trace: &'a TraceRecord,
}

pub fn run(seed: u64, out: Option<&Path>, format: Option<Format>, args: &DecodeArgs) -> CmdResult {
    crate::json_only(format, "decode")?;
    let model = bundle::load(&args.bundle).with_context(|| format!("loading bundle {}", args.bundle.display()))?;
    let d = model.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let needs_ref = args.compare_ref || args.prefill > 0;
    let mut reference = needs_ref.then(|| reference_of(&model));
    let mut decoder = Decoder::new(model)?;
    if let Some(r) = reference.as_mut().filter(|_| args.prefill > 0) {
        for _ in 0..args.prefill {
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            r.step(&x);
        }
        let (keys, values) = cache_rows(r);
        decoder.prefill(&keys, &values)?;
    }
    let x0: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut x: Vec<Fxp32> = vec_from_real(&x0)?;

    let mut w = sink(out)?;
    for token in 0..args.tokens {
        let position = decoder.cache_len() + 1;
        let want = reference
            .as_mut()
            .filter(|_| args.compare_ref)
            .map(|r| r.step(&vec_to_real(&x)));
        let step = if args.trace {
            let mut records = Vec::new();
            let step = decoder.step_traced(&x, &mut |layer, head, rec| records.push((layer, head, *rec)))?;
            for (layer, head, rec) in &records {
                serde_json::to_writer(
                    &mut w,
                    &TraceLine {
                        token,
                        layer: *layer,
                        head: *head,
                        trace: rec,
                    },
                )?;
                writeln!(w)?;
            }
            step
        } else {
            decoder.step(&x)?
        };
        let got = vec_to_real(&step.hidden);
        let line = TokenLine {
            token,
            position,
            output_raw: step.hidden.iter().map(|v| v.raw()).collect(),
            kv_reads: step.kv_reads,
            cosine: want.as_ref().map(|r| cosine_similarity(&got, r)),
            argmax_agree: want.as_ref().map(|r| argmax(&got) == argmax(r)),
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
        x = step.hidden;
    }
    w.flush()?;
    Ok(())
}
