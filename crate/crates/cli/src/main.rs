//! `swiftkv` command-line front end: accuracy suites, cycle-model sweeps and reports,
//! bundle decode and table dumps. Exit status is 0 on success, 1 when a verification
//! check fails and 2 on bad arguments, unreadable inputs or other errors.

mod decode;
mod reference;
mod verify;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use swiftkv::cyclemodel::{self, measured, HwConfig, Method, ModelGeometry};
use swiftkv::{bundle, ExpLut, LayerConfig, RopeCache};

#[derive(Parser, Debug)]
#[command(
    name = "swiftkv",
    version,
    about = "Single-pass decode attention: verification, sweeps and reports"
)]
struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON config: hardware parameters for sweep/report, layer geometry for gen-model
    /// and verify pipeline.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write the result here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format for tabular commands.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a property/oracle suite and print a JSON report.
    Verify(verify::VerifyArgs),
    /// Cycle-model sweep over context lengths, as CSV rows plus an N = 512 speedup summary.
    Sweep(SweepArgs),
    /// Decode tokens through a model bundle and print JSON lines.
    Decode(decode::DecodeArgs),
    /// Per-token latency breakdown or GEMV throughput for a model geometry, as JSON.
    Report(ReportArgs),
    /// The 32 exp table entries and slopes as raw Q15.17.
    DumpLut,
    /// The per-pair rotary angle constants as raw Q2.30.
    DumpRope(DumpRopeArgs),
    /// Generate a deterministic random model bundle.
    GenModel(GenModelArgs),
}

#[derive(clap::Args, Debug)]
struct SweepArgs {
    /// Comma-separated methods out of swiftkv, streaming, flash, native.
    #[arg(long, value_delimiter = ',', default_value = "swiftkv,streaming,flash,native")]
    methods: Vec<String>,
    /// Context lengths as `lo:hi` (multiples of 32 plus powers of two) or `lo:hi:step`.
    /// A range with lo > hi is empty.
    #[arg(long, default_value = "64:8192")]
    n_range: String,
    /// Comma-separated flash block sizes.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    blocks: Vec<u64>,
    #[arg(long, default_value_t = 128)]
    d_head: u64,
    /// Context length of the speedup summary.
    #[arg(long, default_value_t = 512)]
    summary_n: u64,
    /// Write the summary CSV here; by default it goes to stderr.
    #[arg(long)]
    summary_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ReportKind {
    LatencyBreakdown,
    Gops,
}

#[derive(clap::Args, Debug)]
struct ReportArgs {
    #[arg(value_enum)]
    kind: ReportKind,
    /// Model geometry: llama2-7b or chatglm-6b.
    #[arg(long, default_value = "llama2-7b")]
    geometry: String,
    /// Context length.
    #[arg(long, default_value_t = 512)]
    n: u64,
}

#[derive(clap::Args, Debug)]
struct DumpRopeArgs {
    #[arg(long, default_value_t = 128)]
    d_head: usize,
    #[arg(long, default_value_t = 10_000.0)]
    base: f64,
}

#[derive(clap::Args, Debug)]
struct GenModelArgs {
    /// Number of decoder layers.
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Weight standard deviation times sqrt(fan_in) for the attention matrices.
    #[arg(long, default_value_t = 1.0)]
    attn_gain: f64,
    /// The same for the FFN matrices.
    #[arg(long, default_value_t = 1.0)]
    ffn_gain: f64,
}

/// Error that carries its exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or unusable inputs.
    Usage(anyhow::Error),
    /// A verification check did not hold.
    Check,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.into())
    }
}

pub type CmdResult = Result<(), Failure>;

/// Opens `--out` or stdout.
pub fn sink(out: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn hw_config(path: Option<&Path>) -> anyhow::Result<HwConfig> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => HwConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn json_only(format: Option<Format>, cmd: &str) -> anyhow::Result<()> {
    if format == Some(Format::Csv) {
        bail!("{cmd} only writes JSON");
    }
    Ok(())
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> anyhow::Result<()> {
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn parse_range(s: &str) -> anyhow::Result<Vec<u64>> {
    let parts: Vec<u64> = s
        .split(':')
        .map(|p| p.trim().parse::<u64>().with_context(|| format!("bad n-range {s:?}")))
        .collect::<anyhow::Result<_>>()?;
    match parts[..] {
        [lo, hi] if lo > hi => Ok(Vec::new()),
        [lo, hi] => Ok(cyclemodel::sweep_grid(lo, hi)),
        [_, _, 0] => bail!("n-range step must be positive"),
        [lo, hi, step] => Ok((lo..=hi).step_by(step as usize).collect()),
        _ => bail!("n-range must be lo:hi or lo:hi:step, got {s:?}"),
    }
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> CmdResult {
    let cfg = hw_config(cli.config.as_deref())?;
    let methods: Vec<Method> = args
        .methods
        .iter()
        .map(|m| Method::parse(m.trim()).with_context(|| format!("unknown method {m:?}")))
        .collect::<anyhow::Result<_>>()?;
    if args.blocks.contains(&0) {
        return Err(anyhow::anyhow!("block sizes must be positive").into());
    }
    let ns = parse_range(&args.n_range)?;
    if ns.contains(&0) {
        return Err(anyhow::anyhow!("context lengths must be positive").into());
    }
    // Points are independent; chunks run in parallel and rows are re-sorted before output.
    let mut rows: Vec<_> = ns
        .par_chunks(256)
        .flat_map_iter(|chunk| cyclemodel::sweep(&methods, chunk, &args.blocks, args.d_head, &cfg))
        .collect();
    rows.sort_by_key(|r| (r.n, r.method, r.block_size));
    let summary = cyclemodel::speedup_summary(args.summary_n, &args.blocks, args.d_head, &cfg);

    match cli.format.unwrap_or(Format::Csv) {
        Format::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                rows: &'a [cyclemodel::SweepRow],
                summary: &'a [cyclemodel::SpeedupSummary],
            }
            write_json(
                cli.out.as_deref(),
                &Out {
                    rows: &rows,
                    summary: &summary,
                },
            )?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(sink(cli.out.as_deref())?);
            w.write_record(["method", "N", "block_size", "cycles", "latency_us", "speedup_vs_native"])?;
            for r in &rows {
                w.write_record([
                    r.method.name().to_string(),
                    r.n.to_string(),
                    r.block_size.map(|b| b.to_string()).unwrap_or_default(),
                    r.cycles.to_string(),
                    format!("{:.6}", r.latency_us),
                    format!("{:.6}", r.speedup_vs_native),
                ])?;
            }
            w.flush()?;
            let summary_sink: Box<dyn Write> = match &args.summary_out {
                Some(p) => sink(Some(p))?,
                None => Box::new(io::stderr().lock()),
            };
            let mut s = csv::Writer::from_writer(summary_sink);
            s.write_record(["method", "N", "block_size", "model", "measured"])?;
            for r in &summary {
                s.write_record([
                    r.method.name().to_string(),
                    r.n.to_string(),
                    r.block_size.map(|b| b.to_string()).unwrap_or_default(),
                    format!("{:.4}", r.model),
                    r.measured.map(|m| format!("{m:.2}")).unwrap_or_default(),
                ])?;
            }
            s.flush()?;
        }
    }
    Ok(())
}

fn cmd_report(cli: &Cli, args: &ReportArgs) -> CmdResult {
    json_only(cli.format, "report")?;
    let cfg = hw_config(cli.config.as_deref())?;
    let geom = ModelGeometry::preset(&args.geometry).with_context(|| {
        format!(
            "unknown geometry {:?} (expected llama2-7b or chatglm-6b)",
            args.geometry
        )
    })?;
    let report = cyclemodel::model_token_latency(&geom, args.n, &cfg);
    let value = match args.kind {
        ReportKind::LatencyBreakdown => {
            let shares: std::collections::BTreeMap<&str, f64> =
                report.phases.keys().map(|k| (k.as_str(), report.share(k))).collect();
            serde_json::json!({
                "kind": "latency_breakdown",
                "geometry": geom,
                "N": args.n,
                "phases_cycles": report.phases,
                "phase_shares": shares,
                "attention_share": {
                    "model": report.attention_share(),
                    "measured": measured::ATTENTION_SHARE,
                },
                "token_latency_ms": {
                    "model": report.latency_s * 1e3,
                    "measured": measured::TOKEN_LATENCY_MS,
                },
                "total_cycles": report.total_cycles,
                "tokens_per_s": report.tokens_per_s,
                "roofline": report.roofline,
            })
        }
        ReportKind::Gops => {
            let model = cyclemodel::gemv_gops(&cfg);
            serde_json::json!({
                "kind": "gops",
                "geometry": geom.name,
                "N": args.n,
                "gemv_gops": {
                    "model": model,
                    "measured": measured::GEMV_GOPS,
                    "relative_difference": model / measured::GEMV_GOPS - 1.0,
                },
                "gemv_width": cfg.gemv_width(),
                "token_gops": report.gops,
                "tokens_per_s": report.tokens_per_s,
            })
        }
    };
    write_json(cli.out.as_deref(), &value)?;
    Ok(())
}

fn cmd_dump_lut(cli: &Cli) -> CmdResult {
    let lut = ExpLut::shared();
    match cli.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(sink(cli.out.as_deref())?);
            w.write_record(["index", "raw_entry", "raw_slope"])?;
            for (i, e, s) in lut.rows() {
                w.serialize((i, e, s))?;
            }
            w.flush()?;
        }
        Format::Json => {
            let rows: Vec<_> = lut
                .rows()
                .map(|(i, e, s)| serde_json::json!({"index": i, "raw_entry": e, "raw_slope": s}))
                .collect();
            write_json(cli.out.as_deref(), &rows)?;
        }
    }
    Ok(())
}

fn cmd_dump_rope(cli: &Cli, args: &DumpRopeArgs) -> CmdResult {
    let cache = RopeCache::new(args.d_head, args.base)?;
    match cli.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(sink(cli.out.as_deref())?);
            w.write_record(["pair", "raw_cos", "raw_sin"])?;
            for row in cache.constant_rows() {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        Format::Json => {
            let rows: Vec<_> = cache
                .constant_rows()
                .map(|(j, c, s)| serde_json::json!({"pair": j, "raw_cos": c, "raw_sin": s}))
                .collect();
            write_json(cli.out.as_deref(), &rows)?;
        }
    }
    Ok(())
}

fn cmd_gen_model(cli: &Cli, args: &GenModelArgs) -> CmdResult {
    let Some(dir) = cli.out.as_deref() else {
        return Err(anyhow::anyhow!("gen-model needs --out <dir>").into());
    };
    let config: LayerConfig = match cli.config.as_deref() {
        Some(p) => read_json(p)?,
        None => LayerConfig::toy(),
    };
    let opts = bundle::GeneratorOptions {
        n_layers: args.layers,
        seed: cli.seed,
        attn_gain: args.attn_gain,
        ffn_gain: args.ffn_gain,
        ..bundle::GeneratorOptions::default()
    };
    let model = bundle::generate(&config, &opts)?;
    bundle::save(&model, dir)?;
    Ok(())
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("SWIFTKV_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("SWIFTKV_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    init_threads()?;
    match &cli.command {
        Command::Verify(a) => verify::run(cli.seed, cli.config.as_deref(), cli.out.as_deref(), cli.format, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::Decode(a) => decode::run(cli.seed, cli.out.as_deref(), cli.format, a),
        Command::Report(a) => cmd_report(cli, a),
        Command::DumpLut => cmd_dump_lut(cli),
        Command::DumpRope(a) => cmd_dump_rope(cli, a),
        Command::GenModel(a) => cmd_gen_model(cli, a),
    }
}

/// The error chain joined by ": ", skipping causes a message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

fn main() -> ExitCode {
    // clap exits with status 2 on its own for malformed arguments.
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}
