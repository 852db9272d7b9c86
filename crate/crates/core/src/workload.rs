//! Request traces: Poisson arrivals, length sampling, SLO classes, CSV I/O.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// 90th percentile of the standard normal.
const Z90: f64 = 1.281_551_565_544_600_4;
const FIT_SAMPLES: usize = 100_000;
const FIT_SEED: u64 = 0x05ee_df17;
const FIT_TOLERANCE: f64 = 0.01;
const FIT_MAX_ITERS: usize = 40;

pub const DEFAULT_MAX_TOTAL_LEN: u64 = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request<T> {
    pub id: RequestId,
    pub arrival_time: T,
    pub prompt_len: u64,
    /// Hidden from schedulers; only the engine reads it, as a stop condition.
    pub output_len: u64,
    pub class: String,
    pub tbt_slo: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloClass<T> {
    pub name: String,
    pub tbt_slo: T,
    pub probability: f64,
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("cannot fit length distribution: {0}")]
    Fit(String),
    #[error("invalid workload parameter: {0}")]
    Invalid(String),
    #[error("trace row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("trace row {row}: {msg}")]
    Validation { row: usize, msg: String },
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// Median / 90th-percentile target for one length marginal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthTarget {
    pub median: f64,
    pub p90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthKind {
    Empirical { pairs: Vec<(u64, u64)> },
    TruncatedLognormal { prompt: LengthTarget, output: LengthTarget },
    Deterministic { prompt: u64, output: u64 },
}

/// Fitted log-space parameters for both marginals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LognormalFit {
    pub prompt_mu: f64,
    pub prompt_sigma: f64,
    pub output_mu: f64,
    pub output_sigma: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthDistribution {
    pub kind: LengthKind,
    pub prompt_cap: u64,
    pub output_cap: u64,
    pub max_total_len: u64,
    /// When set, prompts are rounded up to a multiple of this value.
    pub round_to_lcm: Option<u64>,
    fit: Option<LognormalFit>,
}

impl LengthDistribution {
    pub fn new(
        kind: LengthKind,
        prompt_cap: u64,
        output_cap: u64,
        max_total_len: u64,
        round_to_lcm: Option<u64>,
    ) -> Result<Self, WorkloadError> {
        if prompt_cap == 0 || output_cap == 0 {
            return Err(WorkloadError::Invalid("length caps must be >= 1".into()));
        }
        if max_total_len < 2 {
            return Err(WorkloadError::Invalid("max_total_len must be >= 2".into()));
        }
        if round_to_lcm == Some(0) {
            return Err(WorkloadError::Invalid("round_to_lcm must be >= 1".into()));
        }
        let mut dist = LengthDistribution {
            kind,
            prompt_cap,
            output_cap,
            max_total_len,
            round_to_lcm,
            fit: None,
        };
        match &dist.kind {
            LengthKind::Deterministic { prompt, output } => {
                dist.check_pair(*prompt, *output)?;
            }
            LengthKind::Empirical { pairs } => {
                if pairs.is_empty() {
                    return Err(WorkloadError::Invalid("empirical distribution has no pairs".into()));
                }
                for &(p, o) in pairs {
                    dist.check_pair(p, o)?;
                }
            }
            LengthKind::TruncatedLognormal { .. } => {
                dist.fit = Some(dist.fit_lognormal()?);
            }
        }
        Ok(dist)
    }

    pub fn deterministic(prompt: u64, output: u64) -> Result<Self, WorkloadError> {
        Self::new(
            LengthKind::Deterministic { prompt, output },
            prompt.max(1),
            output.max(1),
            (prompt + output).max(DEFAULT_MAX_TOTAL_LEN),
            None,
        )
    }

    pub fn empirical(pairs: Vec<(u64, u64)>) -> Result<Self, WorkloadError> {
        let pc = pairs.iter().map(|p| p.0).max().unwrap_or(1).max(1);
        let oc = pairs.iter().map(|p| p.1).max().unwrap_or(1).max(1);
        let total = pairs.iter().map(|p| p.0 + p.1).max().unwrap_or(2).max(2);
        Self::new(LengthKind::Empirical { pairs }, pc, oc, total, None)
    }

    /// Lognormal marginals with the given medians and 90th percentiles,
    /// default caps.
    pub fn lognormal(prompt: LengthTarget, output: LengthTarget) -> Result<Self, WorkloadError> {
        Self::new(
            LengthKind::TruncatedLognormal { prompt, output },
            DEFAULT_MAX_TOTAL_LEN - 1,
            DEFAULT_MAX_TOTAL_LEN - 1,
            DEFAULT_MAX_TOTAL_LEN,
            None,
        )
    }

    /// Prompt and decode length statistics of the reference conversation
    /// workload.
    pub fn chat() -> Result<Self, WorkloadError> {
        Self::lognormal(
            LengthTarget {
                median: 1730.0,
                p90: 5696.0,
            },
            LengthTarget {
                median: 415.0,
                p90: 834.0,
            },
        )
    }

    pub fn fit(&self) -> Option<LognormalFit> {
        self.fit
    }

    fn check_pair(&self, p: u64, o: u64) -> Result<(), WorkloadError> {
        let p = self.apply_rounding(p);
        if p == 0 || o == 0 {
            return Err(WorkloadError::Invalid(format!("lengths ({p}, {o}) must be >= 1")));
        }
        if p > self.prompt_cap || o > self.output_cap || p + o > self.max_total_len {
            return Err(WorkloadError::Invalid(format!(
                "lengths ({p}, {o}) exceed caps ({}, {}, total {})",
                self.prompt_cap, self.output_cap, self.max_total_len
            )));
        }
        Ok(())
    }

    fn apply_rounding(&self, p: u64) -> u64 {
        match self.round_to_lcm {
            Some(l) => round_to_lcm(p, l, self.prompt_cap),
            None => p,
        }
    }

    /// Largest prompt and output lengths this distribution can produce.
    pub fn caps(&self) -> (u64, u64) {
        match &self.kind {
            LengthKind::Deterministic { prompt, output } => (self.apply_rounding(*prompt), *output),
            LengthKind::Empirical { pairs } => (
                pairs.iter().map(|p| self.apply_rounding(p.0)).max().unwrap_or(1),
                pairs.iter().map(|p| p.1).max().unwrap_or(1),
            ),
            LengthKind::TruncatedLognormal { .. } => (self.prompt_cap, self.output_cap),
        }
    }

    /// Exact support with weights, when the distribution is finite.
    pub fn support(&self) -> Option<Vec<(u64, u64)>> {
        match &self.kind {
            LengthKind::Deterministic { prompt, output } => Some(vec![(self.apply_rounding(*prompt), *output)]),
            LengthKind::Empirical { pairs } => {
                Some(pairs.iter().map(|&(p, o)| (self.apply_rounding(p), o)).collect())
            }
            LengthKind::TruncatedLognormal { .. } => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (u64, u64) {
        match &self.kind {
            LengthKind::Deterministic { prompt, output } => (self.apply_rounding(*prompt), *output),
            LengthKind::Empirical { pairs } => {
                let (p, o) = pairs[rng.random_range(0..pairs.len())];
                (self.apply_rounding(p), o)
            }
            LengthKind::TruncatedLognormal { .. } => {
                let fit = self.fit.expect("lognormal distribution is fitted at construction");
                self.sample_lognormal(rng, &fit)
            }
        }
    }

    fn sample_lognormal<R: Rng + ?Sized>(&self, rng: &mut R, fit: &LognormalFit) -> (u64, u64) {
        let pd = LogNormal::new(fit.prompt_mu, fit.prompt_sigma).expect("finite lognormal");
        let od = LogNormal::new(fit.output_mu, fit.output_sigma).expect("finite lognormal");
        loop {
            let p = draw_len(&pd, rng, self.prompt_cap);
            let o = draw_len(&od, rng, self.output_cap);
            let p = self.apply_rounding(p);
            if p + o <= self.max_total_len {
                return (p, o);
            }
        }
    }

    /// Calibrate log-space parameters so that the truncated, integer-valued
    /// samples hit the target median and P90.
    fn fit_lognormal(&self) -> Result<LognormalFit, WorkloadError> {
        let (pt, ot) = match &self.kind {
            LengthKind::TruncatedLognormal { prompt, output } => (*prompt, *output),
            _ => unreachable!("fit called on non-lognormal kind"),
        };
        for (name, t, cap) in [("prompt", pt, self.prompt_cap), ("output", ot, self.output_cap)] {
            if !(t.median >= 1.0 && t.median.is_finite() && t.p90.is_finite()) {
                return Err(WorkloadError::Fit(format!("{name} median {} must be finite and >= 1", t.median)));
            }
            if t.p90 <= t.median {
                return Err(WorkloadError::Fit(format!(
                    "{name} p90 {} must exceed median {}",
                    t.p90, t.median
                )));
            }
            if t.p90 >= cap as f64 {
                return Err(WorkloadError::Fit(format!("{name} p90 {} is not below cap {cap}", t.p90)));
            }
        }
        let mut adj = [pt, ot];
        let targets = [pt, ot];
        let mut last = [(0.0, 0.0); 2];
        for iter in 1..=FIT_MAX_ITERS {
            let mut params = [(0.0, 0.0); 2];
            for k in 0..2 {
                if adj[k].p90 <= adj[k].median || adj[k].median <= 0.0 || !adj[k].p90.is_finite() {
                    return Err(WorkloadError::Fit(format!(
                        "calibration diverged at iteration {iter}: adjusted target {:?}",
                        adj[k]
                    )));
                }
                let mu = adj[k].median.ln();
                params[k] = (mu, (adj[k].p90.ln() - mu) / Z90);
            }
            let fit = LognormalFit {
                prompt_mu: params[0].0,
                prompt_sigma: params[0].1,
                output_mu: params[1].0,
                output_sigma: params[1].1,
                iterations: iter,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(FIT_SEED);
            let mut ps = Vec::with_capacity(FIT_SAMPLES);
            let mut os = Vec::with_capacity(FIT_SAMPLES);
            for _ in 0..FIT_SAMPLES {
                let (p, o) = self.sample_lognormal(&mut rng, &fit);
                ps.push(p);
                os.push(o);
            }
            let measured = [median_p90(&mut ps), median_p90(&mut os)];
            let ok = (0..2).all(|k| {
                rel(measured[k].0, targets[k].median) <= FIT_TOLERANCE
                    && rel(measured[k].1, targets[k].p90) <= FIT_TOLERANCE
            });
            if ok {
                return Ok(fit);
            }
            last = measured;
            for k in 0..2 {
                adj[k].median *= targets[k].median / measured[k].0;
                adj[k].p90 *= targets[k].p90 / measured[k].1;
            }
        }
        Err(WorkloadError::Fit(format!(
            "no convergence after {FIT_MAX_ITERS} iterations: prompt (median, p90) = {:?} vs {:?}, output = {:?} vs {:?}",
            last[0], pt, last[1], ot
        )))
    }
}

fn draw_len<R: Rng + ?Sized>(d: &LogNormal<f64>, rng: &mut R, cap: u64) -> u64 {
    loop {
        let x = d.sample(rng).round();
        if x <= cap as f64 {
            return (x as u64).max(1);
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b
}

fn median_p90(xs: &mut [u64]) -> (f64, f64) {
    xs.sort_unstable();
    let n = xs.len();
    let at = |p: f64| xs[((p * n as f64).ceil() as usize).clamp(1, n) - 1] as f64;
    (at(0.5), at(0.9))
}

/// Smallest multiple of `t_lcm` that is `>= prompt_len`, capped at `cap`.
pub fn round_to_lcm(prompt_len: u64, t_lcm: u64, cap: u64) -> u64 {
    prompt_len.div_ceil(t_lcm).saturating_mul(t_lcm).min(cap)
}

/// Draw a Poisson trace over `[0, horizon)`.
///
/// Arrivals, lengths and classes use separate ChaCha streams of the same
/// seed, so changing `rate` keeps the length sequence fixed.
pub fn generate_trace<T: Scalar>(
    seed: u64,
    horizon: f64,
    rate: f64,
    dist: &LengthDistribution,
    classes: &[SloClass<T>],
) -> Result<Vec<Request<T>>, WorkloadError> {
    if !(rate >= 0.0 && rate.is_finite()) {
        return Err(WorkloadError::Invalid(format!("arrival rate {rate} must be finite and >= 0")));
    }
    if !(horizon > 0.0) {
        return Err(WorkloadError::Invalid(format!("horizon {horizon} must be > 0")));
    }
    validate_classes(classes)?;
    let mut out = Vec::new();
    if rate == 0.0 {
        return Ok(out);
    }
    let mut arr_rng = ChaCha8Rng::seed_from_u64(seed);
    arr_rng.set_stream(1);
    let mut len_rng = ChaCha8Rng::seed_from_u64(seed);
    len_rng.set_stream(2);
    let mut cls_rng = ChaCha8Rng::seed_from_u64(seed);
    cls_rng.set_stream(3);
    let exp = Exp::new(rate).map_err(|e| WorkloadError::Invalid(e.to_string()))?;
    let mut t = 0.0f64;
    loop {
        t += exp.sample(&mut arr_rng);
        if t >= horizon {
            break;
        }
        let (prompt_len, output_len) = dist.sample(&mut len_rng);
        let class = pick_class(classes, cls_rng.random::<f64>());
        out.push(Request {
            id: RequestId(out.len() as u64),
            arrival_time: T::from_f64_lossy(t),
            prompt_len,
            output_len,
            class: class.name.clone(),
            tbt_slo: class.tbt_slo,
        });
    }
    Ok(out)
}

fn pick_class<T>(classes: &[SloClass<T>], u: f64) -> &SloClass<T> {
    let mut acc = 0.0;
    for c in classes {
        acc += c.probability;
        if u < acc {
            return c;
        }
    }
    classes.last().expect("at least one class")
}

pub fn validate_classes<T: Scalar>(classes: &[SloClass<T>]) -> Result<(), WorkloadError> {
    if classes.is_empty() {
        return Err(WorkloadError::Invalid("at least one SLO class is required".into()));
    }
    let total: f64 = classes.iter().map(|c| c.probability).sum();
    if (total - 1.0).abs() > 1e-9 || classes.iter().any(|c| c.probability < 0.0) {
        return Err(WorkloadError::Invalid(format!(
            "class probabilities must be >= 0 and sum to 1, got {total}"
        )));
    }
    for c in classes {
        if c.tbt_slo <= T::zero() {
            return Err(WorkloadError::Invalid(format!("class {} has tbt_slo <= 0", c.name)));
        }
    }
    Ok(())
}

/// Single class with an effectively unbounded TBT target.
pub fn default_classes<T: Scalar>() -> Vec<SloClass<T>> {
    vec![SloClass {
        name: "default".into(),
        tbt_slo: T::from_count(1_000_000),
        probability: 1.0,
    }]
}

/// Paying / free-tier split with TBT targets `paying_slo` and `free_slo`.
pub fn paying_free_classes<T: Scalar>(paying_frac: f64, paying_slo: T, free_slo: T) -> Vec<SloClass<T>> {
    vec![
        SloClass {
            name: "paying".into(),
            tbt_slo: paying_slo,
            probability: paying_frac,
        },
        SloClass {
            name: "free".into(),
            tbt_slo: free_slo,
            probability: 1.0 - paying_frac,
        },
    ]
}

/// Decimal seconds that round-trip exactly and carry at least six
/// fractional digits.
pub fn fmt_seconds(x: f64) -> String {
    let mut s = format!("{x}");
    if !x.is_finite() {
        return s;
    }
    match s.find('.') {
        Some(dot) => {
            let frac = s.len() - dot - 1;
            for _ in frac..6 {
                s.push('0');
            }
        }
        None => s.push_str(".000000"),
    }
    s
}

const TRACE_HEADER: [&str; 5] = ["id", "arrival_time_s", "prompt_len", "output_len", "class"];

pub fn write_trace<T: Scalar, W: Write>(requests: &[Request<T>], w: W) -> Result<(), WorkloadError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(TRACE_HEADER)?;
    for r in requests {
        wr.write_record([
            r.id.0.to_string(),
            fmt_seconds(r.arrival_time.to_f64_lossy()),
            r.prompt_len.to_string(),
            r.output_len.to_string(),
            r.class.clone(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn save_trace<T: Scalar>(requests: &[Request<T>], path: &Path) -> Result<(), WorkloadError> {
    let f = std::fs::File::create(path)?;
    write_trace(requests, std::io::BufWriter::new(f))
}

/// Parse a trace; class names resolve against `classes` for their TBT
/// target. Rows are numbered from 1, excluding the header.
pub fn read_trace<T: Scalar, R: Read>(r: R, classes: &[SloClass<T>]) -> Result<Vec<Request<T>>, WorkloadError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rd.headers()?.clone();
    if header.iter().map(str::trim).ne(TRACE_HEADER.iter().copied()) {
        return Err(WorkloadError::Parse {
            row: 0,
            msg: format!("expected header {:?}", TRACE_HEADER.join(",")),
        });
    }
    let mut out: Vec<Request<T>> = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    let mut ids = std::collections::HashSet::new();
    for (k, rec) in rd.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| WorkloadError::Parse { row, msg: e.to_string() })?;
        if rec.len() != 5 {
            return Err(WorkloadError::Parse {
                row,
                msg: format!("expected 5 fields, found {}", rec.len()),
            });
        }
        let perr = |field: &str| WorkloadError::Parse {
            row,
            msg: format!("bad {field} value"),
        };
        let id: u64 = rec[0].trim().parse().map_err(|_| perr("id"))?;
        let t: f64 = rec[1].trim().parse().map_err(|_| perr("arrival_time_s"))?;
        let prompt_len: u64 = rec[2].trim().parse().map_err(|_| perr("prompt_len"))?;
        let output_len: u64 = rec[3].trim().parse().map_err(|_| perr("output_len"))?;
        let class = rec[4].trim().to_string();
        if !t.is_finite() || t < 0.0 {
            return Err(WorkloadError::Validation {
                row,
                msg: format!("arrival time {t} must be finite and >= 0"),
            });
        }
        if t < prev {
            return Err(WorkloadError::Validation {
                row,
                msg: format!("arrival time {t} decreases (previous {prev})"),
            });
        }
        prev = t;
        if prompt_len == 0 || output_len == 0 {
            return Err(WorkloadError::Validation {
                row,
                msg: "prompt_len and output_len must be >= 1".into(),
            });
        }
        if !ids.insert(id) {
            return Err(WorkloadError::Validation {
                row,
                msg: format!("duplicate id {id}"),
            });
        }
        let slo = classes
            .iter()
            .find(|c| c.name == class)
            .ok_or_else(|| WorkloadError::Validation {
                row,
                msg: format!("unknown class {class:?}"),
            })?;
        out.push(Request {
            id: RequestId(id),
            arrival_time: T::from_f64_lossy(t),
            prompt_len,
            output_len,
            class,
            tbt_slo: slo.tbt_slo,
        });
    }
    Ok(out)
}

pub fn load_trace<T: Scalar>(path: &Path, classes: &[SloClass<T>]) -> Result<Vec<Request<T>>, WorkloadError> {
    let f = std::fs::File::open(path)?;
    read_trace(std::io::BufReader::new(f), classes)
}
