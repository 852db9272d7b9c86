//! Scheduling policies.
//!
//! A scheduler sees a [`SchedulerView`] of one node at a batch boundary and
//! answers with the next batch or `Idle`. Output lengths are not part of the
//! view.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{BatchPlan, DecodeItem, PrefillItem, TileConfig};
use crate::scalar::Scalar;
use crate::workload::RequestId;

mod alt_cycle;
mod distserve;
mod prefill_priority;
mod rad;
mod request_level;
mod sarathi;
mod slai;

pub use alt_cycle::AltCycle;
pub use distserve::{DistServeDecode, DistServePrefill};
pub use prefill_priority::PrefillPriority;
pub use rad::Rad;
pub use request_level::RequestLevel;
pub use sarathi::Sarathi;
pub use slai::{is_critical, last_schedulable_time, OffsetPolicy, Slai};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedError {
    #[error("invalid scheduler configuration: {0}")]
    Config(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("token budget {budget} cannot hold {needed} decode iterations")]
    Budget { budget: u64, needed: u64 },
}

/// A request waiting for (or partway through) its prefill phase.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefillEntry<T> {
    pub id: RequestId,
    pub arrival_time: T,
    pub prompt_len: u64,
    /// Next prompt token to process, 1-based. `> 1` means the prefill has
    /// started and holds KV memory.
    pub next_index: u64,
    pub class: String,
    pub tbt_slo: T,
}

impl<T> PrefillEntry<T> {
    pub fn remaining(&self) -> u64 {
        self.prompt_len + 1 - self.next_index
    }

    pub fn started(&self) -> bool {
        self.next_index > 1
    }
}

/// A request in its decode phase.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeEntry<T> {
    pub id: RequestId,
    pub arrival_time: T,
    pub prompt_len: u64,
    /// Token index of the next decode iteration.
    pub index: u64,
    pub class: String,
    pub tbt_slo: T,
    /// Emit time of the most recent token.
    pub last_emit: T,
}

#[derive(Debug, Clone, Serialize)]
pub struct SchedulerView<'a, T> {
    pub clock: T,
    /// In arrival order.
    pub prefill_queue: &'a [PrefillEntry<T>],
    /// In order of entering the decode phase.
    pub decode_set: &'a [DecodeEntry<T>],
    pub mean_batch_time: T,
    pub kv_tokens_used: u64,
    pub kv_token_capacity: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchFlags {
    pub end_of_cycle: bool,
    pub prefill_exhausted: bool,
}

impl BatchFlags {
    pub fn any(&self) -> bool {
        self.end_of_cycle || self.prefill_exhausted
    }
}

impl fmt::Display for BatchFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.end_of_cycle, self.prefill_exhausted) {
            (false, false) => write!(f, "-"),
            (true, false) => write!(f, "end_of_cycle"),
            (false, true) => write!(f, "prefill_exhausted"),
            (true, true) => write!(f, "end_of_cycle|prefill_exhausted"),
        }
    }
}

/// Side information reported with a decision.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bookkeeping {
    pub flags: BatchFlags,
    /// A new cycle starts at this decision point.
    pub cycle_reset: bool,
    pub requests_in_cycle: Option<u32>,
    /// Decode iterations classified critical at this decision point.
    pub critical: Vec<RequestId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerDecision {
    pub plan: Option<BatchPlan>,
    pub notes: Bookkeeping,
}

impl SchedulerDecision {
    pub fn idle() -> Self {
        SchedulerDecision {
            plan: None,
            notes: Bookkeeping::default(),
        }
    }

    pub fn batch(plan: BatchPlan) -> Self {
        SchedulerDecision {
            plan: Some(plan),
            notes: Bookkeeping::default(),
        }
    }

    pub fn is_idle(&self) -> bool {
        self.plan.is_none()
    }
}

pub trait Scheduler<T: Scalar>: Send {
    fn name(&self) -> &'static str;
    fn next(&mut self, view: &SchedulerView<'_, T>) -> Result<SchedulerDecision, SchedError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillOrder {
    #[default]
    Fcfs,
    Spf,
}

impl std::str::FromStr for PrefillOrder {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fcfs" => Ok(PrefillOrder::Fcfs),
            "spf" => Ok(PrefillOrder::Spf),
            other => Err(format!("unknown prefill order {other:?}, expected fcfs|spf")),
        }
    }
}

impl fmt::Display for PrefillOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrefillOrder::Fcfs => "fcfs",
            PrefillOrder::Spf => "spf",
        })
    }
}

pub const POLICY_NAMES: [&str; 7] = [
    "rad",
    "alt_cycle",
    "request_level",
    "sarathi",
    "vllm",
    "slai",
    "distserve",
];

/// Policy selection plus every per-policy parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyConfig<T> {
    Rad { n: u32 },
    AltCycle { n: u32 },
    RequestLevel { b: u32 },
    Sarathi {
        token_budget: u64,
        order: PrefillOrder,
        max_active: Option<u64>,
    },
    Vllm {
        token_budget: u64,
        max_active: Option<u64>,
    },
    Slai {
        token_budget: u64,
        alpha: u64,
        beta: u64,
        offset: OffsetPolicy<T>,
        order: PrefillOrder,
        priority_paying: bool,
    },
    DistServe { chunked: bool },
}

impl<T: Scalar> PolicyConfig<T> {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyConfig::Rad { .. } => "rad",
            PolicyConfig::AltCycle { .. } => "alt_cycle",
            PolicyConfig::RequestLevel { .. } => "request_level",
            PolicyConfig::Sarathi { .. } => "sarathi",
            PolicyConfig::Vllm { .. } => "vllm",
            PolicyConfig::Slai { .. } => "slai",
            PolicyConfig::DistServe { .. } => "distserve",
        }
    }

    /// Short label including the prefill order where it matters.
    pub fn label(&self) -> String {
        match self {
            PolicyConfig::Sarathi { order, .. } => format!("sarathi-{order}"),
            PolicyConfig::Slai { order, offset, .. } => match offset {
                OffsetPolicy::Fixed(_) => format!("slai-{order}"),
                OffsetPolicy::Dynamic { .. } => format!("slai-{order}-dyn"),
            },
            other => other.name().to_string(),
        }
    }

    pub fn is_disaggregated(&self) -> bool {
        matches!(self, PolicyConfig::DistServe { .. })
    }

    /// Build the scheduler for a node of the given role.
    pub fn build(&self, tile: TileConfig, role: NodeRole) -> Result<Box<dyn Scheduler<T>>, SchedError> {
        if self.is_disaggregated() != (role != NodeRole::Unified) {
            return Err(SchedError::Config(format!(
                "policy {} cannot run on a {role:?} node",
                self.name()
            )));
        }
        Ok(match self {
            PolicyConfig::Rad { n } => Box::new(Rad::new(*n, tile)?),
            PolicyConfig::AltCycle { n } => Box::new(AltCycle::new(*n, tile)?),
            PolicyConfig::RequestLevel { b } => Box::new(RequestLevel::new(*b, tile)?),
            PolicyConfig::Sarathi {
                token_budget,
                order,
                max_active,
            } => Box::new(Sarathi::new(*token_budget, *order, *max_active, tile)?),
            PolicyConfig::Vllm {
                token_budget,
                max_active,
            } => Box::new(PrefillPriority::new(*token_budget, *max_active, tile)?),
            PolicyConfig::Slai {
                token_budget,
                alpha,
                beta,
                offset,
                order,
                priority_paying,
            } => Box::new(Slai::new(
                *token_budget,
                *alpha,
                *beta,
                *offset,
                *order,
                *priority_paying,
                tile,
            )?),
            PolicyConfig::DistServe { chunked } => match role {
                NodeRole::Prefill => Box::new(DistServePrefill::new(*chunked, tile)),
                _ => Box::new(DistServeDecode::new(tile)),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Unified,
    Prefill,
    Decode,
}

pub(crate) fn chunk_of<T>(entry: &PrefillEntry<T>, limit: u64) -> PrefillItem {
    PrefillItem {
        request: entry.id,
        start: entry.next_index,
        chunk: limit.min(entry.remaining()),
    }
}

pub(crate) fn decode_of<T>(entry: &DecodeEntry<T>) -> DecodeItem {
    DecodeItem {
        request: entry.id,
        index: entry.index,
    }
}

/// Indices of `queue` ordered for admission of new prefills.
pub(crate) fn admission_order<T: Scalar>(queue: &[PrefillEntry<T>], order: PrefillOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..queue.len()).filter(|&k| !queue[k].started()).collect();
    if order == PrefillOrder::Spf {
        idx.sort_by_key(|&k| (queue[k].prompt_len, queue[k].id));
    }
    idx
}
