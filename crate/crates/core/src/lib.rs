//! Single-pass decode attention in Q15.17 fixed point, with the pieces of a decode
//! layer around it: a table-driven exponential, incremental rotary embedding, W4A8
//! chunked GEMV, special-function ops, a layer simulator and a cycle model.
//!
//! Start with [`attention::attend`] for the kernel, [`pipeline::Decoder`] for whole
//! layers, and [`cyclemodel`] for latency estimates. The `examples/` directory has one
//! runnable program per capability.

pub mod attention;
pub mod bundle;
pub mod cyclemodel;
pub mod error;
pub mod expo;
pub mod fxp;
pub mod pipeline;
pub mod quant;
pub mod rope;
pub mod sfu;

pub use attention::{attend, attend_with, Branch, CountingSource, KvCache, KvSource, SwiftKvState, TraceRecord};
pub use cyclemodel::{CycleReport, HwConfig, Method, ModelGeometry};
pub use error::{Error, Result};
pub use expo::ExpLut;
pub use fxp::{Fxp32, Fxp64Acc, Q30};
pub use pipeline::{Decoder, LayerConfig, LayerState, LayerWeights, Model, Stage, StepOutput};
pub use quant::{QuantizedActivation, QuantizedMatrix};
pub use rope::RopeCache;
