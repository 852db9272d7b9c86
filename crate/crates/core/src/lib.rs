//! Discrete-event simulator for LLM inference serving.
//!
//! Batches are priced by a tiled-GPU cost model ([`cost_model`]), scheduled
//! by one of seven policies ([`sched`]) and executed by a deterministic
//! event loop ([`engine`]). [`analysis`] turns the cost model into service
//! time bounds and stability verdicts, and [`metrics`] reduces a run to
//! TTFT/TBT/throughput figures.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix it to
//! `f64` for everyday use and to `Ratio<i64>` for exact arithmetic.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod cost_model;
pub mod engine;
pub mod metrics;
pub mod scalar;
pub mod sched;
pub mod workload;

pub use cost_model::{BatchPlan, CostModel, DecodeItem, GpuSpec, LinearRate, ModelSpec, PrefillItem, TileConfig};
pub use engine::{run, Router, SimConfig, SimResult};
pub use scalar::Scalar;
pub use sched::{NodeRole, PolicyConfig, PrefillOrder};
pub use workload::{LengthDistribution, Request, RequestId, SloClass};

pub type Seconds = f64;
pub type Exact = num_rational::Ratio<i64>;

pub type CostModelF64 = CostModel<f64>;
pub type GpuSpecF64 = GpuSpec<f64>;
pub type ModelSpecF64 = ModelSpec<f64>;
pub type SimConfigF64 = SimConfig<f64>;
pub type SimResultF64 = SimResult<f64>;
pub type RequestF64 = Request<f64>;
pub type PolicyConfigF64 = PolicyConfig<f64>;

pub type CostModelExact = CostModel<Exact>;
