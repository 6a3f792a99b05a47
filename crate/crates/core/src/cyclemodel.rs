//! Parametric latency model of the processor array: single-pass attention, three
//! baseline attention schedules, GEMV, and a whole-token breakdown with a roofline
//! bound. Every function is a pure function of its arguments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Board-measured figures, reported next to model numbers and never asserted.
pub mod measured {
    /// Attention speedups over the native baseline at N = 512.
    pub const SPEEDUP_SWIFTKV: f64 = 7.16;
    pub const SPEEDUP_STREAMING: f64 = 2.15;
    pub const SPEEDUP_FLASH: f64 = 1.46;
    /// Attention share of decode latency for the 7B geometry.
    pub const ATTENTION_SHARE: f64 = 0.0319;
    pub const GEMV_GOPS: f64 = 1836.0;
    pub const TOKEN_LATENCY_MS: f64 = 12.3;
}

fn d_processors() -> u64 {
    32
}
fn d_dsp_per_processor() -> u64 {
    128
}
fn d_dsp_per_mul() -> u64 {
    4
}
fn d_freq() -> f64 {
    225e6
}
fn d_fill() -> u64 {
    8
}
fn d_exp() -> u64 {
    3
}
fn d_div() -> u64 {
    8
}
fn d_hbm() -> Option<f64> {
    Some(460e9)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HwConfig {
    #[serde(default = "d_processors")]
    pub n_processors: u64,
    #[serde(default = "d_dsp_per_processor")]
    pub dsp_per_processor: u64,
    #[serde(default = "d_dsp_per_mul")]
    pub dsp_per_fxp_mul: u64,
    #[serde(default = "d_freq")]
    pub freq_hz: f64,
    #[serde(default = "d_fill")]
    pub pipeline_fill: u64,
    #[serde(default = "d_exp")]
    pub exp_latency: u64,
    #[serde(default = "d_div")]
    pub div_latency: u64,
    #[serde(default = "d_hbm")]
    pub hbm_bytes_per_s: Option<f64>,
}

impl Default for HwConfig {
    fn default() -> Self {
        HwConfig {
            n_processors: d_processors(),
            dsp_per_processor: d_dsp_per_processor(),
            dsp_per_fxp_mul: d_dsp_per_mul(),
            freq_hz: d_freq(),
            pipeline_fill: d_fill(),
            exp_latency: d_exp(),
            div_latency: d_div(),
            hbm_bytes_per_s: d_hbm(),
        }
    }
}

/// `x > 0`, and false for NaN.
fn positive(x: f64) -> bool {
    x > 0.0
}

impl HwConfig {
    pub fn validate(&self) -> Result<()> {
        let ints = [
            self.n_processors,
            self.dsp_per_processor,
            self.dsp_per_fxp_mul,
            self.pipeline_fill,
            self.exp_latency,
            self.div_latency,
        ];
        if ints.contains(&0) {
            return Err(Error::Config("hardware parameters must be positive".into()));
        }
        if self.dsp_per_processor % self.dsp_per_fxp_mul != 0 {
            return Err(Error::Config(
                "dsp_per_processor must be a multiple of dsp_per_fxp_mul".into(),
            ));
        }
        if !positive(self.freq_hz) || self.hbm_bytes_per_s.is_some_and(|b| !positive(b)) {
            return Err(Error::Config("frequency and bandwidth must be positive".into()));
        }
        Ok(())
    }

    /// Q15.17 multipliers in one processor.
    pub fn muls_per_processor(&self) -> u64 {
        self.dsp_per_processor / self.dsp_per_fxp_mul
    }

    /// Cycles for one `d_head` dot product on one processor.
    pub fn dot_steps(&self, d_head: u64) -> u64 {
        d_head.div_ceil(self.muls_per_processor())
    }

    /// Widest dot product the array completes per cycle.
    pub fn gemv_width(&self) -> u64 {
        self.n_processors * self.dsp_per_processor
    }

    fn finalize(&self, d_head: u64) -> u64 {
        self.div_latency + d_head
    }

    pub fn seconds(&self, cycles: u64) -> f64 {
        cycles as f64 / self.freq_hz
    }
}

/// One score per `steps` cycles, the exponential and the branch hidden behind the next
/// dot product, one pipelined divide pass at the end.
pub fn cycles_swiftkv(n: u64, d_head: u64, cfg: &HwConfig) -> u64 {
    n * cfg.dot_steps(d_head) + cfg.pipeline_fill + cfg.finalize(d_head)
}

/// Materialized scores: score pass, max pass, exp/sum pass, PV pass, normalize.
pub fn cycles_native(n: u64, d_head: u64, cfg: &HwConfig) -> u64 {
    let steps = cfg.dot_steps(d_head);
    let score = n * steps;
    let max = n;
    let exp_sum = n + cfg.exp_latency;
    let pv = n * steps;
    score + max + exp_sum + pv + cfg.finalize(d_head) + cfg.pipeline_fill
}

/// Blockwise two-level softmax. A partial last block costs a full block.
pub fn cycles_flash_block(n: u64, d_head: u64, block: u64, cfg: &HwConfig) -> u64 {
    let block = block.max(1);
    let per_block = block * cfg.dot_steps(d_head) + block + cfg.exp_latency + d_head;
    n.div_ceil(block) * per_block + cfg.pipeline_fill + cfg.finalize(d_head)
}

/// Online softmax with an unconditional per-token rescale serialized behind each score.
pub fn cycles_streaming(n: u64, d_head: u64, cfg: &HwConfig) -> u64 {
    n * (cfg.dot_steps(d_head) + cfg.exp_latency) + cfg.pipeline_fill + cfg.finalize(d_head)
}

/// One output element per cycle; inputs wider than the array take extra passes.
pub fn cycles_gemv(out_dim: u64, in_dim: u64, cfg: &HwConfig) -> u64 {
    (out_dim + cfg.pipeline_fill) * in_dim.div_ceil(cfg.gemv_width()).max(1)
}

/// Peak GEMV throughput in GOPS: `2 * width * freq`.
pub fn gemv_gops(cfg: &HwConfig) -> f64 {
    2.0 * cfg.gemv_width() as f64 * cfg.freq_hz / 1e9
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Swiftkv,
    Streaming,
    Flash,
    Native,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Swiftkv, Method::Streaming, Method::Flash, Method::Native];

    pub fn name(self) -> &'static str {
        match self {
            Method::Swiftkv => "swiftkv",
            Method::Streaming => "streaming",
            Method::Flash => "flash",
            Method::Native => "native",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Measured speedup over native at N = 512, where one exists.
    pub fn measured_speedup(self) -> Option<f64> {
        match self {
            Method::Swiftkv => Some(measured::SPEEDUP_SWIFTKV),
            Method::Streaming => Some(measured::SPEEDUP_STREAMING),
            Method::Flash => Some(measured::SPEEDUP_FLASH),
            Method::Native => None,
        }
    }
}

/// One line of an attention sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    #[serde(rename = "N")]
    pub n: u64,
    pub block_size: Option<u64>,
    pub cycles: u64,
    pub latency_us: f64,
    pub speedup_vs_native: f64,
}

/// Cycle counts for every method and context length. Flash gets one row per block
/// size. Rows are ordered by `(N, method, block_size)`.
pub fn sweep(methods: &[Method], ns: &[u64], blocks: &[u64], d_head: u64, cfg: &HwConfig) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &n in ns {
        let native = cycles_native(n, d_head, cfg);
        let mut push = |method, block_size, cycles: u64| {
            rows.push(SweepRow {
                method,
                n,
                block_size,
                cycles,
                latency_us: cfg.seconds(cycles) * 1e6,
                speedup_vs_native: native as f64 / cycles as f64,
            })
        };
        for &m in methods {
            match m {
                Method::Swiftkv => push(m, None, cycles_swiftkv(n, d_head, cfg)),
                Method::Streaming => push(m, None, cycles_streaming(n, d_head, cfg)),
                Method::Native => push(m, None, native),
                Method::Flash => {
                    for &b in blocks {
                        push(m, Some(b), cycles_flash_block(n, d_head, b, cfg));
                    }
                }
            }
        }
    }
    rows.sort_by_key(|r| (r.n, r.method, r.block_size));
    rows
}

/// Model speedup over native next to the measured one, per method. Flash uses its
/// fastest block size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupSummary {
    pub method: Method,
    #[serde(rename = "N")]
    pub n: u64,
    pub block_size: Option<u64>,
    pub model: f64,
    pub measured: Option<f64>,
}

pub fn speedup_summary(n: u64, blocks: &[u64], d_head: u64, cfg: &HwConfig) -> Vec<SpeedupSummary> {
    let native = cycles_native(n, d_head, cfg) as f64;
    let best_flash = blocks.iter().map(|&b| (cycles_flash_block(n, d_head, b, cfg), b)).min();
    let mut out = vec![
        SpeedupSummary {
            method: Method::Swiftkv,
            n,
            block_size: None,
            model: native / cycles_swiftkv(n, d_head, cfg) as f64,
            measured: Method::Swiftkv.measured_speedup(),
        },
        SpeedupSummary {
            method: Method::Streaming,
            n,
            block_size: None,
            model: native / cycles_streaming(n, d_head, cfg) as f64,
            measured: Method::Streaming.measured_speedup(),
        },
    ];
    if let Some((cycles, b)) = best_flash {
        out.push(SpeedupSummary {
            method: Method::Flash,
            n,
            block_size: Some(b),
            model: native / cycles as f64,
            measured: Method::Flash.measured_speedup(),
        });
    }
    out
}

/// Decoder shape for whole-token latency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub name: String,
    pub n_layers: u64,
    pub d_model: u64,
    pub n_heads: u64,
    pub ffn_dim: u64,
    /// Output projection rows; `None` leaves the head out.
    #[serde(default)]
    pub vocab: Option<u64>,
}

impl ModelGeometry {
    pub fn llama2_7b() -> Self {
        ModelGeometry {
            name: "llama2-7b".into(),
            n_layers: 32,
            d_model: 4096,
            n_heads: 32,
            ffn_dim: 11008,
            vocab: Some(32000),
        }
    }

    pub fn chatglm_6b() -> Self {
        ModelGeometry {
            name: "chatglm-6b".into(),
            n_layers: 28,
            d_model: 4096,
            n_heads: 32,
            ffn_dim: 13696,
            vocab: Some(65024),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "llama2-7b" => Some(ModelGeometry::llama2_7b()),
            "chatglm-6b" => Some(ModelGeometry::chatglm_6b()),
            _ => None,
        }
    }

    pub fn d_head(&self) -> u64 {
        self.d_model / self.n_heads.max(1)
    }

    /// `(out, in)` of every per-layer matrix.
    fn layer_matrices(&self) -> [(u64, u64); 7] {
        let (d, f) = (self.d_model, self.ffn_dim);
        [(d, d), (d, d), (d, d), (d, d), (f, d), (f, d), (d, f)]
    }

    /// W4A8 storage: half a byte per weight plus a 4-byte scale per row.
    pub fn weight_bytes(&self) -> u64 {
        let bytes = |(o, i): (u64, u64)| o * i / 2 + 4 * o;
        let layer: u64 = self.layer_matrices().into_iter().map(bytes).sum();
        layer * self.n_layers + self.vocab.map_or(0, |v| bytes((v, self.d_model)))
    }

    /// Multiply-accumulates counted as two operations each.
    pub fn gemv_ops(&self) -> u64 {
        let layer: u64 = self.layer_matrices().into_iter().map(|(o, i)| 2 * o * i).sum();
        layer * self.n_layers + self.vocab.map_or(0, |v| 2 * v * self.d_model)
    }
}

/// Latency bound from compute and weight traffic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roofline {
    pub weight_bytes: u64,
    pub compute_s: f64,
    pub memory_s: f64,
    pub latency_s: f64,
    pub memory_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub geometry: String,
    #[serde(rename = "N")]
    pub n: u64,
    /// Cycles per phase summed over layers.
    pub phases: BTreeMap<String, u64>,
    pub total_cycles: u64,
    pub latency_s: f64,
    pub tokens_per_s: f64,
    pub gops: f64,
    pub roofline: Option<Roofline>,
}

impl CycleReport {
    pub fn share(&self, phase: &str) -> f64 {
        self.phases.get(phase).copied().unwrap_or(0) as f64 / self.total_cycles as f64
    }

    pub fn attention_share(&self) -> f64 {
        self.share("attention")
    }
}

/// Whole-token decode latency. Heads run in parallel, so attention costs one head's
/// cycles per layer. Each SFU op streams `d_model` elements; a layer issues two norms,
/// two residual adds, SiLU and the Hadamard product.
pub fn model_token_latency(geom: &ModelGeometry, n: u64, cfg: &HwConfig) -> CycleReport {
    const SFU_OPS_PER_LAYER: u64 = 6;
    let (d, f, l) = (geom.d_model, geom.ffn_dim, geom.n_layers);
    let gemv = |o, i| cycles_gemv(o, i, cfg);
    let mut phases = BTreeMap::new();
    phases.insert("qkv_gemv".to_string(), 3 * gemv(d, d) * l);
    phases.insert("o_gemv".to_string(), gemv(d, d) * l);
    phases.insert("ffn_gemv".to_string(), (2 * gemv(f, d) + gemv(d, f)) * l);
    phases.insert("attention".to_string(), cycles_swiftkv(n, geom.d_head(), cfg) * l);
    phases.insert("sfu".to_string(), SFU_OPS_PER_LAYER * d * l);
    if let Some(v) = geom.vocab {
        phases.insert("lm_head_gemv".to_string(), gemv(v, d));
    }
    let total_cycles = phases.values().sum();
    let compute_s = cfg.seconds(total_cycles);
    let roofline = cfg.hbm_bytes_per_s.map(|bw| {
        let weight_bytes = geom.weight_bytes();
        let memory_s = weight_bytes as f64 / bw;
        Roofline {
            weight_bytes,
            compute_s,
            memory_s,
            latency_s: compute_s.max(memory_s),
            memory_bound: memory_s > compute_s,
        }
    });
    let latency_s = roofline.as_ref().map_or(compute_s, |r| r.latency_s);
    CycleReport {
        geometry: geom.name.clone(),
        n,
        phases,
        total_cycles,
        latency_s,
        tokens_per_s: 1.0 / latency_s,
        gops: geom.gemv_ops() as f64 / latency_s / 1e9,
        roofline,
    }
}

/// Powers of two and multiples of 32 in `[lo, hi]`, ascending.
pub fn sweep_grid(lo: u64, hi: u64) -> Vec<u64> {
    let mut ns: Vec<u64> = (lo..=hi).filter(|n| n % 32 == 0 || n.is_power_of_two()).collect();
    ns.dedup();
    ns
}
