//! Experiment configuration: TOML file sections, built-in presets and
//! resolution into runtime types.
//!
//! Every key is optional. Missing keys take the preset or documented
//! default, and [`ExperimentConfig::fill_defaults`] makes the effective
//! configuration explicit so it can be written next to the results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{parse_pair_key, CostModel, CostModelError, GpuSpec, LinearRate, ModelSpec, TileConfig};
use crate::engine::{Router, SimConfig};
use crate::scalar::Scalar;
use crate::sched::{NodeRole, OffsetPolicy, PolicyConfig, PrefillOrder, POLICY_NAMES};
use crate::workload::{
    paying_free_classes, LengthDistribution, LengthKind, LengthTarget, SloClass, WorkloadError, DEFAULT_MAX_TOTAL_LEN,
};

pub const CONFIG_ENV: &str = "SERVESIM_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown policy {0:?}; valid policies: {valid}", valid = POLICY_NAMES.join(", "))]
    UnknownPolicy(String),
    #[error("unknown preset {0:?}; valid presets: toy, reference")]
    UnknownPreset(String),
    #[error("invalid value for {key}: {msg}")]
    Invalid { key: &'static str, msg: String },
    #[error(transparent)]
    Cost(#[from] CostModelError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

fn invalid(key: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, msg: msg.into() }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSection {
    /// `toy` (unit rates, 2x2x2 tiles) or `reference` (Ada-class card)
    pub preset: Option<String>,
    pub sm_count: Option<u32>,
    pub out_tiles: Option<Vec<[u32; 2]>>,
    pub red_tiles: Option<Vec<u32>>,
    /// keyed `"t_row x t_col x t_red"`, tile-pairs/s per SM
    pub gemm_rate: Option<BTreeMap<String, f64>>,
    pub gemv_tile: Option<[u32; 2]>,
    /// keyed `"t_row x t_col"`
    pub gemv_rate: Option<BTreeMap<String, f64>>,
    pub nonlinear_rate: Option<f64>,
    pub optimal_tile: Option<String>,
    pub kv_token_capacity: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub n_layers: Option<u32>,
    pub d_attn: Option<u32>,
    pub d_model: Option<u32>,
    pub d_ff: Option<u32>,
    pub d_out: Option<u32>,
    /// direct linear-layer rate for every tile
    pub lin_rate: Option<f64>,
    /// per-tile linear-layer rates
    pub lin_rate_table: Option<BTreeMap<String, f64>>,
    /// derive the linear-layer rate from the dimensions
    pub lin_rate_derived: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    /// `lognormal`, `chat`, `deterministic` or `empirical`
    pub kind: Option<String>,
    pub prompt_median: Option<f64>,
    pub prompt_p90: Option<f64>,
    pub output_median: Option<f64>,
    pub output_p90: Option<f64>,
    pub prompt_len: Option<u64>,
    pub output_len: Option<u64>,
    pub pairs: Option<Vec<[u64; 2]>>,
    pub prompt_cap: Option<u64>,
    pub output_cap: Option<u64>,
    pub max_total_len: Option<u64>,
    pub round_to_lcm: Option<bool>,
    pub lambda: Option<f64>,
    pub horizon: Option<f64>,
    pub seed: Option<u64>,
    /// read requests from this CSV instead of generating them
    pub trace: Option<PathBuf>,
    pub paying_frac: Option<f64>,
    pub paying_slo: Option<f64>,
    pub free_slo: Option<f64>,
    pub classes: Option<Vec<SloClass<f64>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub name: Option<String>,
    pub n: Option<u32>,
    pub b: Option<u32>,
    pub token_budget: Option<u64>,
    pub max_active: Option<u64>,
    pub alpha: Option<u64>,
    pub beta: Option<u64>,
    pub delta: Option<f64>,
    pub dynamic_offset: Option<bool>,
    pub delta_low: Option<f64>,
    pub delta_high: Option<f64>,
    pub mem_threshold: Option<f64>,
    pub prefill_order: Option<PrefillOrder>,
    pub priority_paying: Option<bool>,
    pub chunked: Option<bool>,
    pub kv_transfer_delay: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub nodes: Option<usize>,
    /// distserve only; defaults to 1
    pub prefill_nodes: Option<usize>,
    pub router: Option<Router>,
    /// stop at the workload horizon instead of draining
    pub stop_at_horizon: Option<bool>,
    pub seed: Option<u64>,
    pub aligned_prompts: Option<bool>,
    pub warmup_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Option<Vec<f64>>,
    pub policies: Option<Vec<String>>,
    pub orders: Option<Vec<PrefillOrder>>,
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub ttft_limit: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub gpu: GpuSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub workload: WorkloadSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

pub mod presets {
    //! Built-in hardware and model descriptions.

    use super::*;

    /// Unit rates, a single 2x2x2 tile, every dimension 2.
    pub fn toy_gpu<T: Scalar>() -> GpuSpec<T> {
        let tile = TileConfig::new(2, 2, 2);
        GpuSpec {
            sm_count: 1,
            out_tiles: vec![(2, 2)],
            red_tiles: vec![2],
            gemm_rate: BTreeMap::from([(tile, T::one())]),
            gemv_tile: (2, 2),
            gemv_rate: BTreeMap::from([((2, 2), T::one())]),
            nonlinear_rate: T::one(),
            optimal_tile: tile,
            kv_token_capacity: 1 << 40,
        }
    }

    pub fn toy_model<T: Scalar>() -> ModelSpec<T> {
        ModelSpec {
            n_layers: 1,
            d_attn: 2,
            d_model: 2,
            d_ff: 2,
            d_out: 2,
            lin_rate: Some(LinearRate::Uniform(T::one())),
        }
    }

    pub fn toy<T: Scalar>() -> CostModel<T> {
        CostModel::new(toy_gpu(), toy_model()).expect("toy preset is valid")
    }

    /// A workstation-class card described as one aggregated unit (`s = 1`)
    /// with whole-device rates. The optimal tile is 128x256x64, so
    /// `t_col = t_lcm = 256`.
    pub fn reference_gpu() -> GpuSpec<f64> {
        let rates = [
            ("128x256x64", 1.8e7),
            ("128x256x32", 2.8e7),
            ("256x128x64", 1.7e7),
            ("256x128x32", 2.7e7),
            ("128x128x64", 2.8e7),
            ("128x128x32", 5.0e7),
            ("64x64x64", 1.2e8),
            ("64x64x32", 2.2e8),
        ];
        GpuSpec {
            sm_count: 1,
            out_tiles: vec![(128, 256), (256, 128), (128, 128), (64, 64)],
            red_tiles: vec![32, 64],
            gemm_rate: rates
                .iter()
                .map(|(k, v)| (k.parse().expect("preset tile key"), *v))
                .collect(),
            gemv_tile: (64, 64),
            gemv_rate: BTreeMap::from([((64, 64), 1.0e8)]),
            nonlinear_rate: 2.0e6,
            optimal_tile: TileConfig::new(128, 256, 64),
            kv_token_capacity: 1 << 20,
        }
    }

    /// 7B-class decoder: 32 layers, 4096 model width, 1024-wide grouped
    /// attention, 14336 FFN, 32000 vocabulary. Linear rate derived.
    pub fn reference_model() -> ModelSpec<f64> {
        ModelSpec {
            n_layers: 32,
            d_attn: 1024,
            d_model: 4096,
            d_ff: 14336,
            d_out: 32000,
            lin_rate: None,
        }
    }

    pub fn reference() -> CostModel<f64> {
        CostModel::new(reference_gpu(), reference_model()).expect("reference preset is valid")
    }
}

fn tile_map(m: &BTreeMap<TileConfig, f64>) -> BTreeMap<String, f64> {
    m.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replace every unset key with its preset or default value.
    pub fn fill_defaults(&mut self) -> Result<(), ConfigError> {
        let g = &mut self.gpu;
        let base = match g.preset.get_or_insert_with(|| "toy".into()).as_str() {
            "toy" => presets::toy_gpu::<f64>(),
            "reference" => presets::reference_gpu(),
            other => return Err(ConfigError::UnknownPreset(other.into())),
        };
        g.sm_count.get_or_insert(base.sm_count);
        g.out_tiles
            .get_or_insert_with(|| base.out_tiles.iter().map(|&(a, b)| [a, b]).collect());
        g.red_tiles.get_or_insert_with(|| base.red_tiles.clone());
        g.gemm_rate.get_or_insert_with(|| tile_map(&base.gemm_rate));
        g.gemv_tile.get_or_insert([base.gemv_tile.0, base.gemv_tile.1]);
        g.gemv_rate.get_or_insert_with(|| {
            base.gemv_rate
                .iter()
                .map(|((a, b), v)| (format!("{a}x{b}"), *v))
                .collect()
        });
        g.nonlinear_rate.get_or_insert(base.nonlinear_rate);
        g.optimal_tile.get_or_insert_with(|| base.optimal_tile.to_string());
        g.kv_token_capacity.get_or_insert(base.kv_token_capacity);

        let preset = g.preset.clone().expect("set above");
        let m = &mut self.model;
        let base = match m.preset.get_or_insert(preset).as_str() {
            "toy" => presets::toy_model::<f64>(),
            "reference" => presets::reference_model(),
            other => return Err(ConfigError::UnknownPreset(other.into())),
        };
        m.n_layers.get_or_insert(base.n_layers);
        m.d_attn.get_or_insert(base.d_attn);
        m.d_model.get_or_insert(base.d_model);
        m.d_ff.get_or_insert(base.d_ff);
        m.d_out.get_or_insert(base.d_out);
        if m.lin_rate.is_none() && m.lin_rate_table.is_none() && m.lin_rate_derived != Some(true) {
            match base.lin_rate {
                Some(LinearRate::Uniform(v)) => m.lin_rate = Some(v),
                Some(LinearRate::PerTile(t)) => m.lin_rate_table = Some(tile_map(&t)),
                None => m.lin_rate_derived = Some(true),
            }
        }
        m.lin_rate_derived.get_or_insert(false);

        let w = &mut self.workload;
        let kind = w.kind.get_or_insert_with(|| "chat".into()).clone();
        match kind.as_str() {
            "chat" => {
                w.prompt_median.get_or_insert(1730.0);
                w.prompt_p90.get_or_insert(5696.0);
                w.output_median.get_or_insert(415.0);
                w.output_p90.get_or_insert(834.0);
            }
            "lognormal" | "deterministic" | "empirical" => {}
            other => return Err(invalid("workload.kind", format!("unknown kind {other:?}"))),
        }
        w.max_total_len.get_or_insert(DEFAULT_MAX_TOTAL_LEN);
        let total = w.max_total_len.expect("set above");
        w.prompt_cap.get_or_insert(total - 1);
        w.output_cap.get_or_insert(total - 1);
        w.round_to_lcm.get_or_insert(false);
        w.lambda.get_or_insert(1.0);
        w.horizon.get_or_insert(1000.0);
        w.seed.get_or_insert(0);
        if w.classes.is_none() {
            w.paying_frac.get_or_insert(0.05);
            w.paying_slo.get_or_insert(0.1);
            w.free_slo.get_or_insert(0.5);
        }

        let p = &mut self.policy;
        let name = p.name.get_or_insert_with(|| "rad".into()).clone();
        if !POLICY_NAMES.contains(&name.as_str()) {
            return Err(ConfigError::UnknownPolicy(name));
        }
        p.n.get_or_insert(16);
        p.b.get_or_insert(8);
        p.token_budget.get_or_insert(512);
        p.alpha.get_or_insert(128);
        p.beta.get_or_insert(128);
        p.delta.get_or_insert(10.0);
        p.dynamic_offset.get_or_insert(false);
        p.delta_low.get_or_insert(5.0);
        p.delta_high.get_or_insert(10.0);
        p.mem_threshold.get_or_insert(0.96);
        p.prefill_order.get_or_insert(PrefillOrder::Fcfs);
        p.priority_paying.get_or_insert(false);
        p.chunked.get_or_insert(false);
        p.kv_transfer_delay.get_or_insert(0.0);

        let s = &mut self.sim;
        s.nodes.get_or_insert(if name == "distserve" { 2 } else { 1 });
        s.prefill_nodes.get_or_insert(1);
        s.router.get_or_insert(Router::UniformRandom);
        s.stop_at_horizon.get_or_insert(true);
        s.seed.get_or_insert(0);
        s.aligned_prompts.get_or_insert(false);
        s.warmup_fraction.get_or_insert(0.1);

        let sw = &mut self.sweep;
        sw.lambdas.get_or_insert_with(|| vec![self.workload.lambda.expect("set above")]);
        sw.policies.get_or_insert_with(|| vec![name.clone()]);
        sw.orders.get_or_insert_with(|| vec![self.policy.prefill_order.expect("set above")]);
        sw.seeds.get_or_insert_with(|| vec![self.workload.seed.expect("set above")]);
        sw.output_dir.get_or_insert_with(|| PathBuf::from("out"));
        sw.jobs.get_or_insert(0);
        sw.ttft_limit.get_or_insert(0.5);
        Ok(())
    }

    fn filled(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut c = self.clone();
        c.fill_defaults()?;
        Ok(c)
    }

    pub fn cost_model(&self) -> Result<CostModel<f64>, ConfigError> {
        let c = self.filled()?;
        let g = &c.gpu;
        let parse_tiles = |m: &BTreeMap<String, f64>| -> Result<BTreeMap<TileConfig, f64>, ConfigError> {
            m.iter().map(|(k, v)| Ok((k.parse::<TileConfig>()?, *v))).collect()
        };
        let gpu = GpuSpec {
            sm_count: g.sm_count.expect("filled"),
            out_tiles: g.out_tiles.clone().expect("filled").into_iter().map(|[a, b]| (a, b)).collect(),
            red_tiles: g.red_tiles.clone().expect("filled"),
            gemm_rate: parse_tiles(g.gemm_rate.as_ref().expect("filled"))?,
            gemv_tile: {
                let [a, b] = g.gemv_tile.expect("filled");
                (a, b)
            },
            gemv_rate: g
                .gemv_rate
                .as_ref()
                .expect("filled")
                .iter()
                .map(|(k, v)| Ok((parse_pair_key(k)?, *v)))
                .collect::<Result<_, ConfigError>>()?,
            nonlinear_rate: g.nonlinear_rate.expect("filled"),
            optimal_tile: g.optimal_tile.as_ref().expect("filled").parse()?,
            kv_token_capacity: g.kv_token_capacity.expect("filled"),
        };
        let m = &c.model;
        let lin_rate = if let Some(t) = &m.lin_rate_table {
            Some(LinearRate::PerTile(parse_tiles(t)?))
        } else {
            m.lin_rate.map(LinearRate::Uniform)
        };
        if lin_rate.is_some() && m.lin_rate_derived == Some(true) {
            log::warn!("model.lin_rate and model.lin_rate_derived both set; using the given rate");
        }
        let model = ModelSpec {
            n_layers: m.n_layers.expect("filled"),
            d_attn: m.d_attn.expect("filled"),
            d_model: m.d_model.expect("filled"),
            d_ff: m.d_ff.expect("filled"),
            d_out: m.d_out.expect("filled"),
            lin_rate,
        };
        Ok(CostModel::new(gpu, model)?)
    }

    pub fn length_distribution(&self, t_lcm: u64) -> Result<LengthDistribution, ConfigError> {
        let c = self.filled()?;
        let w = &c.workload;
        let need = |v: Option<f64>, key: &'static str| v.ok_or_else(|| invalid(key, "required for this workload kind"));
        let kind = match w.kind.as_deref().expect("filled") {
            "chat" | "lognormal" => LengthKind::TruncatedLognormal {
                prompt: LengthTarget {
                    median: need(w.prompt_median, "workload.prompt_median")?,
                    p90: need(w.prompt_p90, "workload.prompt_p90")?,
                },
                output: LengthTarget {
                    median: need(w.output_median, "workload.output_median")?,
                    p90: need(w.output_p90, "workload.output_p90")?,
                },
            },
            "deterministic" => LengthKind::Deterministic {
                prompt: w
                    .prompt_len
                    .ok_or_else(|| invalid("workload.prompt_len", "required for deterministic lengths"))?,
                output: w
                    .output_len
                    .ok_or_else(|| invalid("workload.output_len", "required for deterministic lengths"))?,
            },
            "empirical" => LengthKind::Empirical {
                pairs: w
                    .pairs
                    .clone()
                    .ok_or_else(|| invalid("workload.pairs", "required for empirical lengths"))?
                    .into_iter()
                    .map(|[p, o]| (p, o))
                    .collect(),
            },
            other => return Err(invalid("workload.kind", format!("unknown kind {other:?}"))),
        };
        Ok(LengthDistribution::new(
            kind,
            w.prompt_cap.expect("filled"),
            w.output_cap.expect("filled"),
            w.max_total_len.expect("filled"),
            (w.round_to_lcm == Some(true)).then_some(t_lcm),
        )?)
    }

    pub fn classes(&self) -> Result<Vec<SloClass<f64>>, ConfigError> {
        let c = self.filled()?;
        let w = &c.workload;
        let classes = match &w.classes {
            Some(v) => v.clone(),
            None => {
                let frac = w.paying_frac.expect("filled");
                if !(0.0..=1.0).contains(&frac) {
                    return Err(invalid("workload.paying_frac", "must be in [0, 1]"));
                }
                paying_free_classes(frac, w.paying_slo.expect("filled"), w.free_slo.expect("filled"))
            }
        };
        crate::workload::validate_classes(&classes)?;
        Ok(classes)
    }

    pub fn policy_config(&self) -> Result<PolicyConfig<f64>, ConfigError> {
        let c = self.filled()?;
        let p = &c.policy;
        let name = p.name.clone().expect("filled");
        let order = p.prefill_order.expect("filled");
        Ok(match name.as_str() {
            "rad" => PolicyConfig::Rad { n: p.n.expect("filled") },
            "alt_cycle" => PolicyConfig::AltCycle { n: p.n.expect("filled") },
            "request_level" => PolicyConfig::RequestLevel { b: p.b.expect("filled") },
            "sarathi" => PolicyConfig::Sarathi {
                token_budget: p.token_budget.expect("filled"),
                order,
                max_active: p.max_active,
            },
            "vllm" => PolicyConfig::Vllm {
                token_budget: p.token_budget.expect("filled"),
                max_active: p.max_active,
            },
            "slai" => PolicyConfig::Slai {
                token_budget: p.token_budget.expect("filled"),
                alpha: p.alpha.expect("filled"),
                beta: p.beta.expect("filled"),
                offset: if p.dynamic_offset == Some(true) {
                    OffsetPolicy::Dynamic {
                        low: p.delta_low.expect("filled"),
                        high: p.delta_high.expect("filled"),
                        threshold: p.mem_threshold.expect("filled"),
                    }
                } else {
                    OffsetPolicy::Fixed(p.delta.expect("filled"))
                },
                order,
                priority_paying: p.priority_paying.expect("filled"),
            },
            "distserve" => PolicyConfig::DistServe {
                chunked: p.chunked.expect("filled"),
            },
            _ => return Err(ConfigError::UnknownPolicy(name)),
        })
    }

    pub fn sim_config(&self) -> Result<SimConfig<f64>, ConfigError> {
        let c = self.filled()?;
        let cost = c.cost_model()?;
        let policy = c.policy_config()?;
        let s = &c.sim;
        let nodes = s.nodes.expect("filled");
        if nodes == 0 {
            return Err(invalid("sim.nodes", "must be >= 1"));
        }
        let mut cfg = SimConfig::new(cost, policy, nodes);
        if cfg.policy.is_disaggregated() {
            let pn = s.prefill_nodes.expect("filled");
            if pn == 0 || pn >= nodes {
                return Err(invalid("sim.prefill_nodes", "distserve needs 1 <= prefill_nodes < nodes"));
            }
            cfg.roles = (0..nodes)
                .map(|k| if k < pn { NodeRole::Prefill } else { NodeRole::Decode })
                .collect();
        }
        cfg.router = s.router.expect("filled");
        cfg.seed = s.seed.expect("filled");
        cfg.aligned_prompts = s.aligned_prompts.expect("filled");
        cfg.kv_transfer_delay = c.policy.kv_transfer_delay.expect("filled");
        if s.stop_at_horizon == Some(true) {
            cfg.horizon = c.workload.horizon;
        }
        let w = s.warmup_fraction.expect("filled");
        if !(0.0..1.0).contains(&w) {
            return Err(invalid("sim.warmup_fraction", "must be in [0, 1)"));
        }
        cfg.validate().map_err(|e| invalid("sim", e.to_string()))?;
        Ok(cfg)
    }
}
