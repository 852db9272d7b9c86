//! Latency and throughput statistics derived from a finished simulation.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::engine::{QueueSample, RequestRecord, SimResult};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("percentile of an empty sample set")]
    Empty,
    #[error("percentile rank {0} outside (0, 1]")]
    BadRank(f64),
    #[error("window holds {0} samples, need at least 2 distinct times")]
    DegenerateWindow(usize),
}

pub fn ttft<T: Scalar>(r: &RequestRecord<T>) -> Option<T> {
    r.first_token.map(|t| t - r.arrival)
}

/// Gaps between consecutive output tokens.
pub fn tbt_series<T: Scalar>(r: &RequestRecord<T>) -> Vec<T> {
    r.emits.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Nearest-rank percentile: the `ceil(p * n)`-th smallest sample.
pub fn percentile<T: Copy + PartialOrd>(samples: &[T], p: f64) -> Result<T, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(MetricsError::BadRank(p));
    }
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    Ok(v[rank - 1])
}

/// Least-squares slope of the pending count over samples with time in
/// `[from, to]`.
pub fn stability_slope<T: Scalar>(queue: &[QueueSample<T>], from: T, to: T) -> Result<f64, MetricsError> {
    let pts: Vec<(f64, f64)> = queue
        .iter()
        .filter(|s| s.time >= from && s.time <= to)
        .map(|s| (s.time.to_f64_lossy(), s.pending as f64))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return Err(MetricsError::DegenerateWindow(pts.len()));
    }
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mq = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    if sxx == 0.0 {
        return Err(MetricsError::DegenerateWindow(pts.len()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mq)).sum();
    Ok(sxy / sxx)
}

/// Number of times the pending count drops from positive to zero.
pub fn returns_to_zero<T>(queue: &[QueueSample<T>]) -> usize {
    queue.windows(2).filter(|w| w[0].pending > 0 && w[1].pending == 0).count()
}

/// Time-weighted mean of the pending count over `[0, end]`.
pub fn time_average_queue<T: Scalar>(queue: &[QueueSample<T>], end: T) -> f64 {
    let end = end.to_f64_lossy();
    if queue.is_empty() || end <= 0.0 {
        return 0.0;
    }
    let mut area = 0.0;
    for w in queue.windows(2) {
        let (a, b) = (w[0].time.to_f64_lossy(), w[1].time.to_f64_lossy().min(end));
        if b > a {
            area += w[0].pending as f64 * (b - a);
        }
    }
    let last = queue[queue.len() - 1];
    let lt = last.time.to_f64_lossy();
    if end > lt {
        area += last.pending as f64 * (end - lt);
    }
    area / end
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStats {
    pub class: String,
    /// Arrived after the warm-up cut.
    pub requests: usize,
    pub completed: usize,
    /// Arrived but never produced a first token.
    pub censored: usize,
    pub ttft_median: Option<f64>,
    pub ttft_mean: Option<f64>,
    pub tbt_p99: Option<f64>,
    pub tbt_samples: usize,
    pub tbt_violation_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyAggregate {
    pub classes: Vec<ClassStats>,
    pub all: ClassStats,
    pub throughput: f64,
    pub queue_slope: Option<f64>,
    pub horizon: f64,
    pub warmup_cut: f64,
}

fn class_stats<T: Scalar>(name: &str, reqs: &[&RequestRecord<T>]) -> ClassStats {
    let ttfts: Vec<f64> = reqs.iter().filter_map(|r| ttft(r)).map(|t| t.to_f64_lossy()).collect();
    let mut tbts = Vec::new();
    let mut viol = 0usize;
    for r in reqs {
        for g in tbt_series(r) {
            if g > r.tbt_slo {
                viol += 1;
            }
            tbts.push(g.to_f64_lossy());
        }
    }
    ClassStats {
        class: name.to_string(),
        requests: reqs.len(),
        completed: reqs.iter().filter(|r| r.completion.is_some()).count(),
        censored: reqs.iter().filter(|r| r.first_token.is_none()).count(),
        ttft_median: percentile(&ttfts, 0.5).ok(),
        ttft_mean: (!ttfts.is_empty()).then(|| ttfts.iter().sum::<f64>() / ttfts.len() as f64),
        tbt_p99: percentile(&tbts, 0.99).ok(),
        tbt_samples: tbts.len(),
        tbt_violation_rate: (!tbts.is_empty()).then(|| viol as f64 / tbts.len() as f64),
    }
}

/// Per-class and cluster statistics. Requests arriving in the first
/// `warmup_fraction` of the horizon are left out of latency figures; the
/// queue slope covers the whole run.
pub fn aggregate<T: Scalar>(result: &SimResult<T>, warmup_fraction: f64) -> LatencyAggregate {
    let horizon = result.end_time.to_f64_lossy();
    let cut = warmup_fraction.clamp(0.0, 1.0) * horizon;
    let measured: Vec<&RequestRecord<T>> = result
        .requests
        .iter()
        .filter(|r| r.arrived && r.arrival.to_f64_lossy() >= cut)
        .collect();
    let mut names: Vec<&str> = Vec::new();
    for r in &result.requests {
        if !names.contains(&r.class.as_str()) {
            names.push(&r.class);
        }
    }
    let classes = names
        .iter()
        .map(|name| {
            let sub: Vec<&RequestRecord<T>> = measured.iter().copied().filter(|r| r.class == *name).collect();
            class_stats(name, &sub)
        })
        .collect();
    let completed = result.requests.iter().filter(|r| r.completion.is_some()).count();
    let throughput = if horizon > 0.0 { completed as f64 / horizon } else { 0.0 };
    let queue_slope = stability_slope(&result.queue, T::zero(), result.end_time).ok();
    LatencyAggregate {
        classes,
        all: class_stats("all", &measured),
        throughput,
        queue_slope,
        horizon,
        warmup_cut: cut,
    }
}

pub const METRICS_HEADER: [&str; 10] = [
    "run_id",
    "policy",
    "lambda",
    "class",
    "ttft_median_s",
    "ttft_mean_s",
    "tbt_p99_s",
    "viol_rate",
    "throughput_rps",
    "queue_slope",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl LatencyAggregate {
    /// One CSV row per class plus the cluster-wide `all` row.
    pub fn csv_rows(&self, run_id: &str, policy: &str, lambda: f64) -> Vec<[String; 10]> {
        self.classes
            .iter()
            .chain(std::iter::once(&self.all))
            .map(|c| self.row(run_id, policy, lambda, c))
            .collect()
    }

    pub fn row(&self, run_id: &str, policy: &str, lambda: f64, c: &ClassStats) -> [String; 10] {
        [
            run_id.to_string(),
            policy.to_string(),
            lambda.to_string(),
            c.class.clone(),
            opt(c.ttft_median),
            opt(c.ttft_mean),
            opt(c.tbt_p99),
            opt(c.tbt_violation_rate),
            self.throughput.to_string(),
            opt(self.queue_slope),
        ]
    }

    pub fn write_csv<W: Write>(&self, w: W, run_id: &str, policy: &str, lambda: f64) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(METRICS_HEADER)?;
        for row in self.csv_rows(run_id, policy, lambda) {
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Flat `key = value` block.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "horizon_s = {}\nwarmup_cut_s = {}\nthroughput_rps = {}\nqueue_slope = {}\n",
            self.horizon,
            self.warmup_cut,
            self.throughput,
            opt(self.queue_slope)
        );
        for c in self.classes.iter().chain(std::iter::once(&self.all)) {
            let p = format!("class.{}", c.class);
            s.push_str(&format!(
                "{p}.requests = {}\n{p}.completed = {}\n{p}.censored = {}\n{p}.ttft_median_s = {}\n{p}.ttft_mean_s = {}\n{p}.tbt_p99_s = {}\n{p}.tbt_violation_rate = {}\n",
                c.requests,
                c.completed,
                c.censored,
                opt(c.ttft_median),
                opt(c.ttft_mean),
                opt(c.tbt_p99),
                opt(c.tbt_violation_rate)
            ));
        }
        s
    }
}

/// Largest swept rate whose median TTFT stays within `limit`, with the
/// neighbouring pair that brackets the crossing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CapacityEstimate {
    pub largest_ok: Option<f64>,
    pub bracket: Option<(f64, f64)>,
}

pub fn serving_capacity(points: &[(f64, Option<f64>)], limit: f64) -> CapacityEstimate {
    let mut pts: Vec<(f64, bool)> = points
        .iter()
        .map(|&(l, m)| (l, m.is_some_and(|v| v <= limit)))
        .collect();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let largest_ok = pts.iter().filter(|p| p.1).map(|p| p.0).next_back();
    let bracket = largest_ok.and_then(|l| pts.iter().find(|p| p.0 > l && !p.1).map(|p| (l, p.0)));
    CapacityEstimate { largest_ok, bracket }
}
