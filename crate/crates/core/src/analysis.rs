//! Service-time bounds and capacity calculations.
//!
//! `t_star_r` is the least GPU time any schedule can spend on one request,
//! `t_bar_r` its expectation over a length distribution, and `t_max` the
//! worst unbatched, worst-tiled time for a request within the length caps.
//! From these, `capacity_check` decides whether an arrival rate is provably
//! stable or unstable on `r` nodes, and `assert_bounds` checks a finished
//! simulation against the drain-time, queue-length and cycle-time bounds.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::cost_model::{CostModel, CostModelError};
use crate::engine::SimResult;
use crate::scalar::Scalar;
use crate::workload::LengthDistribution;

/// Two-sided 99% normal quantile.
const Z99: f64 = 2.575_829_303_548_901;
const REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("prompt length {prompt_len} is not a multiple of t_lcm = {t_lcm}")]
    Divisibility { prompt_len: u64, t_lcm: u64 },
    #[error("lengths must be >= 1")]
    ZeroLength,
    #[error("at least one sample is required")]
    NoSamples,
    #[error(transparent)]
    Cost(#[from] CostModelError),
}

/// `sum_{i=1}^{m} ceil(i / t)`
fn sum_ceil(m: u64, t: u64) -> u64 {
    let q = m / t;
    let rem = m % t;
    t * q * (q + 1) / 2 + rem * (q + 1)
}

/// Per-layer decode attention summed over token indices `lo..=hi`.
pub fn decode_sa_sum<T: Scalar>(cost: &CostModel<T>, lo: u64, hi: u64) -> T {
    if hi < lo {
        return T::zero();
    }
    let (tr, tc) = cost.gpu.gemv_tile;
    let (tr, tc) = (tr as u64, tc as u64);
    let d = cost.model.d_attn as u64;
    let below = lo - 1;
    let pairs = (d / tc) * (sum_ceil(hi, tr) - sum_ceil(below, tr)) + (d / tr) * (sum_ceil(hi, tc) - sum_ceil(below, tc));
    let mu = cost
        .gpu
        .gemv_rate_for(cost.gpu.gemv_tile.0, cost.gpu.gemv_tile.1)
        .expect("validated gemv tile");
    T::from_count(pairs) / mu
}

/// Least total GPU time to serve a request of the given lengths.
///
/// With `strict`, the prompt must be a multiple of `t_lcm`.
pub fn t_star_r<T: Scalar>(cost: &CostModel<T>, prompt_len: u64, output_len: u64, strict: bool) -> Result<T, AnalysisError> {
    if prompt_len == 0 || output_len == 0 {
        return Err(AnalysisError::ZeroLength);
    }
    let opt = cost.optimal_tile();
    let t_lcm = opt.lcm();
    if strict && !prompt_len.is_multiple_of(t_lcm) {
        return Err(AnalysisError::Divisibility { prompt_len, t_lcm });
    }
    let total = T::from_count(prompt_len + output_len);
    let linear = total / (cost.lin_rate(opt)? * T::from_count(opt.t_col as u64));
    let nonlinear = total / cost.gpu.nonlinear_rate;
    let n = T::from_count(cost.model.n_layers as u64);
    let decode = n * decode_sa_sum(cost, prompt_len + 1, prompt_len + output_len);
    let d = T::from_count(cost.model.d_attn as u64);
    let prefill = n * d * T::from_count(prompt_len) * T::from_count(prompt_len + t_lcm)
        / (cost.gpu.sm() * cost.gpu.rate(opt)? * T::from_count(opt.volume()));
    Ok(linear + nonlinear + decode + prefill)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TBarEstimate<T> {
    pub mean: T,
    /// 99% confidence half-width; zero when computed exactly.
    pub half_width: f64,
    pub samples: usize,
    pub exact: bool,
}

/// Expected `t_star_r` over `dist`: exact for finite distributions,
/// Monte Carlo with `n_samples` draws otherwise.
pub fn t_bar_r<T: Scalar>(
    cost: &CostModel<T>,
    dist: &LengthDistribution,
    n_samples: usize,
    seed: u64,
) -> Result<TBarEstimate<T>, AnalysisError> {
    if let Some(points) = dist.support() {
        let mut sum = T::zero();
        for &(p, o) in &points {
            sum += t_star_r(cost, p, o, false)?;
        }
        return Ok(TBarEstimate {
            mean: sum / T::from_count(points.len() as u64),
            half_width: 0.0,
            samples: points.len(),
            exact: true,
        });
    }
    if n_samples == 0 {
        return Err(AnalysisError::NoSamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = T::zero();
    let mut s1 = 0.0f64;
    let mut s2 = 0.0f64;
    for _ in 0..n_samples {
        let (p, o) = dist.sample(&mut rng);
        let t = t_star_r(cost, p, o, false)?;
        sum += t;
        let x = t.to_f64_lossy();
        s1 += x;
        s2 += x * x;
    }
    let n = n_samples as f64;
    let var = if n_samples > 1 {
        ((s2 - s1 * s1 / n) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(TBarEstimate {
        mean: sum / T::from_count(n_samples as u64),
        half_width: Z99 * (var / n).sqrt(),
        samples: n_samples,
        exact: false,
    })
}

/// Worst single-request time within the length caps.
pub fn t_max<T: Scalar>(cost: &CostModel<T>, prompt_cap: u64, output_cap: u64) -> Result<T, AnalysisError> {
    if prompt_cap == 0 || output_cap == 0 {
        return Err(AnalysisError::ZeroLength);
    }
    let len = prompt_cap + output_cap;
    let total = T::from_count(len);
    let n = T::from_count(cost.model.n_layers as u64);
    let common = total / cost.gpu.nonlinear_rate + n * decode_sa_sum(cost, 1, len);
    let mut best: Option<T> = None;
    for tile in cost.gpu.tiles() {
        let v = total / cost.lin_rate(tile)? + common;
        best = Some(best.map_or(v, |b| b.max_of(v)));
    }
    Ok(best.expect("tile set is nonempty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Verdict {
    StableGuaranteed { epsilon: f64 },
    UnstableGuaranteed,
    IndeterminateBoundary,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::StableGuaranteed { .. } => write!(f, "stable-guaranteed"),
            Verdict::UnstableGuaranteed => write!(f, "unstable-guaranteed"),
            Verdict::IndeterminateBoundary => write!(f, "indeterminate-boundary"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityReport {
    pub lambda: f64,
    pub nodes: u32,
    pub t_bar_r: f64,
    pub t_bar_r_half_width: f64,
    pub t_max: f64,
    pub t_col: u64,
    /// `lambda * t_bar_r`
    pub load: f64,
    pub margin: f64,
    pub verdict: Verdict,
    pub rad_min_n: Option<u64>,
    /// `r / t_bar_r`, the largest stable rate.
    pub max_stable_rate: f64,
}

impl CapacityReport {
    /// Pure arithmetic from precomputed `t_bar_r` and `t_max`.
    ///
    /// A margin within `1e-12 * r` of zero counts as the boundary.
    pub fn from_parts(lambda: f64, nodes: u32, t_bar_r: f64, t_max: f64, t_col: u64) -> Self {
        let r = nodes as f64;
        let load = lambda * t_bar_r;
        let margin = r - load;
        let tol = 1e-12 * r;
        let (verdict, rad_min_n) = if margin > tol {
            let eps = margin / r;
            let bound = (t_col.saturating_sub(1)) as f64 * t_max / (eps * t_bar_r);
            let n = (bound.floor() as u64).saturating_add(1).max(1);
            (Verdict::StableGuaranteed { epsilon: eps }, Some(n))
        } else if margin < -tol {
            (Verdict::UnstableGuaranteed, None)
        } else {
            (Verdict::IndeterminateBoundary, None)
        };
        CapacityReport {
            lambda,
            nodes,
            t_bar_r,
            t_bar_r_half_width: 0.0,
            t_max,
            t_col,
            load,
            margin,
            verdict,
            rad_min_n,
            max_stable_rate: r / t_bar_r,
        }
    }

    pub fn epsilon(&self) -> Option<f64> {
        match self.verdict {
            Verdict::StableGuaranteed { epsilon } => Some(epsilon),
            _ => None,
        }
    }

    /// Flat `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("lambda", self.lambda.to_string());
        kv("nodes", self.nodes.to_string());
        kv("t_bar_r", self.t_bar_r.to_string());
        kv("t_bar_r_ci99_half_width", self.t_bar_r_half_width.to_string());
        kv("t_max", self.t_max.to_string());
        kv("t_col", self.t_col.to_string());
        kv("load", self.load.to_string());
        kv("margin", self.margin.to_string());
        kv("verdict", self.verdict.to_string());
        kv(
            "epsilon",
            self.epsilon().map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
        );
        kv(
            "rad_min_n",
            self.rad_min_n.map(|n| n.to_string()).unwrap_or_else(|| "-".into()),
        );
        kv("max_stable_rate", self.max_stable_rate.to_string());
        s
    }

    pub const CSV_HEADER: &'static str =
        "lambda,nodes,t_bar_r,t_bar_r_half_width,t_max,t_col,load,margin,verdict,epsilon,rad_min_n,max_stable_rate";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.lambda,
            self.nodes,
            self.t_bar_r,
            self.t_bar_r_half_width,
            self.t_max,
            self.t_col,
            self.load,
            self.margin,
            self.verdict,
            self.epsilon().map(|e| e.to_string()).unwrap_or_default(),
            self.rad_min_n.map(|n| n.to_string()).unwrap_or_default(),
            self.max_stable_rate
        )
    }
}

/// Stability verdict for rate `lambda` on `nodes` nodes under `dist`.
pub fn capacity_check<T: Scalar>(
    cost: &CostModel<T>,
    dist: &LengthDistribution,
    lambda: f64,
    nodes: u32,
    n_samples: usize,
    seed: u64,
) -> Result<CapacityReport, AnalysisError> {
    let tbar = t_bar_r(cost, dist, n_samples, seed)?;
    let (pc, oc) = dist.caps();
    let tmax = t_max(cost, pc, oc)?;
    let mut rep = CapacityReport::from_parts(lambda, nodes.max(1), tbar.mean.to_f64_lossy(), tmax.to_f64_lossy(), cost.t_col());
    rep.t_bar_r_half_width = tbar.half_width;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub name: &'static str,
    pub passed: bool,
    pub checked: usize,
    pub violations: usize,
    /// Smallest slack seen, relative to the bound; negative means violated.
    pub worst_slack: f64,
    pub detail: String,
}

impl BoundCheck {
    fn vacuous(name: &'static str, why: &str) -> Self {
        BoundCheck {
            name,
            passed: true,
            checked: 0,
            violations: 0,
            worst_slack: f64::INFINITY,
            detail: why.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub drain: BoundCheck,
    pub queue: BoundCheck,
    pub cycle: BoundCheck,
}

impl BoundsReport {
    pub fn all_passed(&self) -> bool {
        self.drain.passed && self.queue.passed && self.cycle.passed
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in [&self.drain, &self.queue, &self.cycle] {
            s.push_str(&format!(
                "bound.{}.passed = {}\nbound.{}.checked = {}\nbound.{}.violations = {}\nbound.{}.worst_slack = {}\nbound.{}.detail = {}\n",
                c.name, c.passed, c.name, c.checked, c.name, c.violations, c.name, c.worst_slack, c.name, c.detail
            ));
        }
        s
    }
}

/// Inputs for [`assert_bounds`] beyond the simulation itself.
#[derive(Debug, Clone, Copy)]
pub struct BoundsContext<T> {
    /// Expected per-request time; only used by the cycle bound.
    pub t_bar_r: Option<T>,
    /// Worst-case request time; `None` derives it from the largest observed
    /// lengths.
    pub t_max: Option<T>,
    /// RAD's cycle quota; enables the cycle bound.
    pub rad_n: Option<u32>,
}

impl<T> Default for BoundsContext<T> {
    fn default() -> Self {
        BoundsContext {
            t_bar_r: None,
            t_max: None,
            rad_n: None,
        }
    }
}

pub fn assert_bounds<T: Scalar>(
    result: &SimResult<T>,
    cost: &CostModel<T>,
    ctx: &BoundsContext<T>,
) -> Result<BoundsReport, AnalysisError> {
    let r = T::from_count(result.nodes as u64);
    let arrived: Vec<_> = result.requests.iter().filter(|q| q.arrived).collect();

    let drain = {
        let mut work = T::zero();
        let mut last = T::zero();
        let mut count = 0;
        for q in arrived.iter().filter(|q| q.completion.is_some()) {
            work += t_star_r(cost, q.prompt_len, q.output_len, false)?;
            last = last.max_of(q.completion.expect("filtered"));
            count += 1;
        }
        if count == 0 {
            BoundCheck::vacuous("drain", "no completed requests")
        } else {
            let bound = (work / r).to_f64_lossy();
            let t = last.to_f64_lossy();
            let slack = (t - bound) / bound.abs().max(f64::MIN_POSITIVE);
            let ok = t >= bound * (1.0 - REL_TOL);
            BoundCheck {
                name: "drain",
                passed: ok,
                checked: count,
                violations: usize::from(!ok),
                worst_slack: slack,
                detail: format!("last completion {t} vs lower bound {bound} over {count} requests"),
            }
        }
    };

    let queue = if result.queue.is_empty() {
        BoundCheck::vacuous("queue", "no events")
    } else {
        let tmax = match ctx.t_max {
            Some(v) => v,
            None => {
                let pc = arrived.iter().map(|q| q.prompt_len).max().unwrap_or(1);
                let oc = arrived.iter().map(|q| q.output_len).max().unwrap_or(1);
                t_max(cost, pc, oc)?
            }
        };
        let mut in_order: Vec<_> = arrived.clone();
        in_order.sort_by(|a, b| a.arrival.partial_cmp(&b.arrival).unwrap_or(std::cmp::Ordering::Equal));
        let mut prefix = Vec::with_capacity(in_order.len() + 1);
        prefix.push(T::zero());
        let mut acc = T::zero();
        for q in &in_order {
            acc += t_star_r(cost, q.prompt_len, q.output_len, false)?;
            prefix.push(acc);
        }
        let mut worst = f64::INFINITY;
        let mut violations = 0;
        let mut at = 0.0;
        for s in &result.queue {
            let work = prefix[(s.arrived as usize).min(in_order.len())] / r;
            let lhs = T::from_count(s.pending as u64) * tmax + s.time;
            let l = lhs.to_f64_lossy();
            let w = work.to_f64_lossy();
            let slack = (l - w) / w.abs().max(1.0);
            if slack < worst {
                worst = slack;
                at = s.time.to_f64_lossy();
            }
            if l < w - REL_TOL * w.abs().max(1.0) {
                violations += 1;
            }
        }
        BoundCheck {
            name: "queue",
            passed: violations == 0,
            checked: result.queue.len(),
            violations,
            worst_slack: worst,
            detail: format!("t_max {tmax}, tightest sample at t={at}"),
        }
    };

    let cycle = match (ctx.rad_n, ctx.t_bar_r) {
        (Some(n), Some(tbar)) => {
            let tmax = match ctx.t_max {
                Some(v) => v,
                None => {
                    let pc = arrived.iter().map(|q| q.prompt_len).max().unwrap_or(1);
                    let oc = arrived.iter().map(|q| q.output_len).max().unwrap_or(1);
                    t_max(cost, pc, oc)?
                }
            };
            let full: Vec<_> = result
                .cycles
                .iter()
                .filter(|c| c.end.is_some() && c.pending_at_start >= n)
                .collect();
            if full.is_empty() {
                BoundCheck::vacuous("cycle", "no finished cycle started with n pending")
            } else {
                let durs: Vec<f64> = full
                    .iter()
                    .map(|c| (c.end.expect("filtered") - c.start).to_f64_lossy())
                    .collect();
                let m = durs.len() as f64;
                let mean = durs.iter().sum::<f64>() / m;
                let sd = if durs.len() > 1 {
                    (durs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
                } else {
                    0.0
                };
                let t_col = cost.t_col().saturating_sub(1) as f64;
                let bound = n as f64 * tbar.to_f64_lossy() + t_col * tmax.to_f64_lossy();
                let allowance = 3.0 * sd / m.sqrt();
                let miscount = full.iter().filter(|c| c.completed != n).count();
                let ok = mean <= bound + allowance && miscount == 0;
                BoundCheck {
                    name: "cycle",
                    passed: ok,
                    checked: full.len(),
                    violations: usize::from(mean > bound + allowance) + miscount,
                    worst_slack: (bound + allowance - mean) / bound,
                    detail: format!(
                        "mean cycle {mean} vs bound {bound} + {allowance} over {} cycles; {miscount} cycles did not complete exactly n={n}",
                        full.len()
                    ),
                }
            }
        }
        _ => BoundCheck::vacuous("cycle", "not a RAD run"),
    };

    Ok(BoundsReport { drain, queue, cycle })
}
