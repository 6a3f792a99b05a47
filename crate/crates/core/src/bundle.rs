//! Model bundles on disk and a deterministic toy-model generator.
//!
//! A bundle is a directory holding `config.json`, one SKVW file per matrix named
//! `layer{l}.{matrix}.skvw`, and raw little-endian Q15.17 gain vectors named
//! `layer{l}.{attn_norm,ffn_norm}.fxp` plus an optional `final_norm.fxp`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fxp::Fxp32;
use crate::pipeline::{LayerConfig, LayerWeights, Model};
use crate::quant::{quantize_weights, QuantizedMatrix};

pub const CONFIG_FILE: &str = "config.json";
const FORMAT_VERSION: u32 = 1;

/// Contents of `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub format_version: u32,
    #[serde(flatten)]
    pub layer: LayerConfig,
    pub n_layers: usize,
    pub final_norm: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_owned(),
        source,
    }
}

fn matrix_path(dir: &Path, layer: usize, name: &str) -> PathBuf {
    dir.join(format!("layer{layer}.{name}.skvw"))
}

fn gain_path(dir: &Path, layer: Option<usize>, name: &str) -> PathBuf {
    match layer {
        Some(l) => dir.join(format!("layer{l}.{name}.fxp")),
        None => dir.join(format!("{name}.fxp")),
    }
}

fn write_gain(path: &Path, g: &[Fxp32]) -> Result<()> {
    let bytes: Vec<u8> = g.iter().flat_map(|v| v.raw().to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn read_gain(path: &Path, len: usize) -> Result<Vec<Fxp32>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() != 4 * len {
        return Err(Error::Format {
            path: path.to_owned(),
            reason: format!("expected {} bytes, found {}", 4 * len, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| Fxp32::from_raw(i32::from_le_bytes(c.try_into().unwrap())))
        .collect())
}

/// Writes `model` into `dir`, creating it if needed.
pub fn save(model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let config = BundleConfig {
        format_version: FORMAT_VERSION,
        layer: model.config.clone(),
        n_layers: model.layers.len(),
        final_norm: model.final_norm.is_some(),
    };
    let cfg_path = dir.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(&config).map_err(|source| Error::Json {
        path: cfg_path.clone(),
        source,
    })?;
    std::fs::write(&cfg_path, json + "\n").map_err(io_err(&cfg_path))?;
    for (l, w) in model.layers.iter().enumerate() {
        for (name, m) in w.matrices() {
            m.save(&matrix_path(dir, l, name))?;
        }
        write_gain(&gain_path(dir, Some(l), "attn_norm"), &w.attn_norm)?;
        write_gain(&gain_path(dir, Some(l), "ffn_norm"), &w.ffn_norm)?;
    }
    if let Some(g) = &model.final_norm {
        write_gain(&gain_path(dir, None, "final_norm"), g)?;
    }
    Ok(())
}

pub fn load_config(dir: &Path) -> Result<BundleConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let config: BundleConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    if config.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path,
            reason: format!("unsupported format_version {}", config.format_version),
        });
    }
    config.layer.validate()?;
    Ok(config)
}

/// Reads a bundle and checks every shape against its config.
pub fn load(dir: &Path) -> Result<Model> {
    let config = load_config(dir)?;
    let d = config.layer.d_model;
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let m = |name: &str| QuantizedMatrix::load(&matrix_path(dir, l, name));
        let w = LayerWeights {
            wq: m("wq")?,
            wk: m("wk")?,
            wv: m("wv")?,
            wo: m("wo")?,
            w_gate: m("w_gate")?,
            w_up: m("w_up")?,
            w_down: m("w_down")?,
            attn_norm: read_gain(&gain_path(dir, Some(l), "attn_norm"), d)?,
            ffn_norm: read_gain(&gain_path(dir, Some(l), "ffn_norm"), d)?,
        };
        w.check(&config.layer)?;
        layers.push(w);
    }
    let final_norm = if config.final_norm {
        Some(read_gain(&gain_path(dir, None, "final_norm"), d)?)
    } else {
        None
    };
    Ok(Model {
        config: config.layer,
        layers,
        final_norm,
    })
}

/// Knobs for [`generate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorOptions {
    pub n_layers: usize,
    pub seed: u64,
    /// Standard deviation of a weight times the square root of its fan-in, for the
    /// attention matrices.
    pub attn_gain: f64,
    /// The same for the FFN matrices.
    pub ffn_gain: f64,
    /// Standard deviation of the norm gains around one.
    pub norm_jitter: f64,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions {
            n_layers: 2,
            seed: 0,
            attn_gain: 1.0,
            ffn_gain: 1.0,
            norm_jitter: 0.05,
        }
    }
}

/// Random model with Gaussian weights, quantized to W4. Deterministic in the seed.
pub fn generate(config: &LayerConfig, opts: &GeneratorOptions) -> Result<Model> {
    config.validate()?;
    if opts.n_layers == 0 {
        return Err(Error::Config("n_layers must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (d, f) = (config.d_model, config.ffn_dim);
    let matrix = |rng: &mut ChaCha8Rng, out: usize, inp: usize, gain: f64| -> Result<QuantizedMatrix> {
        let normal = Normal::new(0.0, gain / (inp as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
        let w: Vec<f64> = (0..out * inp).map(|_| normal.sample(rng)).collect();
        quantize_weights(&w, out, inp)
    };
    let jitter = Normal::new(1.0, opts.norm_jitter.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let gain =
        |rng: &mut ChaCha8Rng| -> Result<Vec<Fxp32>> { (0..d).map(|_| Fxp32::from_real(jitter.sample(rng))).collect() };
    let mut layers = Vec::with_capacity(opts.n_layers);
    for _ in 0..opts.n_layers {
        layers.push(LayerWeights {
            wq: matrix(&mut rng, d, d, opts.attn_gain)?,
            wk: matrix(&mut rng, d, d, opts.attn_gain)?,
            wv: matrix(&mut rng, d, d, opts.attn_gain)?,
            wo: matrix(&mut rng, d, d, opts.attn_gain)?,
            w_gate: matrix(&mut rng, f, d, opts.ffn_gain)?,
            w_up: matrix(&mut rng, f, d, opts.ffn_gain)?,
            w_down: matrix(&mut rng, d, f, opts.ffn_gain)?,
            attn_norm: gain(&mut rng)?,
            ffn_norm: gain(&mut rng)?,
        });
    }
    let final_norm = Some(gain(&mut rng)?);
    Ok(Model {
        config: config.clone(),
        layers,
        final_norm,
    })
}

/// Two-layer toy model on [`LayerConfig::toy`].
pub fn toy_model(seed: u64) -> Result<Model> {
    generate(
        &LayerConfig::toy(),
        &GeneratorOptions {
            seed,
            ..GeneratorOptions::default()
        },
    )
}
