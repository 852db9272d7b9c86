use std::cmp::Ordering;

use crate::cost_model::{BatchPlan, TileConfig};
use crate::scalar::Scalar;

use super::{chunk_of, decode_of, DecodeEntry, PrefillOrder, SchedError, Scheduler, SchedulerDecision, SchedulerView};

/// How far ahead of its deadline a decode iteration turns critical, in units
/// of the mean batch time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OffsetPolicy<T> {
    Fixed(T),
    /// `low` while KV utilisation is below `threshold`, `high` at or above.
    Dynamic { low: T, high: T, threshold: f64 },
}

impl<T: Scalar> OffsetPolicy<T> {
    pub fn delta(&self, kv_used: u64, kv_capacity: u64) -> T {
        match *self {
            OffsetPolicy::Fixed(d) => d,
            OffsetPolicy::Dynamic { low, high, threshold } => {
                let util = kv_used as f64 / kv_capacity.max(1) as f64;
                if util >= threshold {
                    high
                } else {
                    low
                }
            }
        }
    }
}

/// `C = e + TBT - delta * t_batch`.
pub fn last_schedulable_time<T: Scalar>(last_emit: T, tbt_slo: T, delta: T, mean_batch_time: T) -> T {
    last_emit + tbt_slo - delta * mean_batch_time
}

pub fn is_critical<T: Scalar>(clock: T, last_schedulable: T) -> bool {
    clock >= last_schedulable
}

/// SLO-aware scheduler: deadline-critical decodes first, then prefill
/// chunks, then the remaining decodes by deadline.
#[derive(Debug, Clone)]
pub struct Slai<T> {
    budget: u64,
    alpha: u64,
    beta: u64,
    offset: OffsetPolicy<T>,
    order: PrefillOrder,
    priority_paying: bool,
    tile: TileConfig,
}

impl<T: Scalar> Slai<T> {
    pub fn new(
        budget: u64,
        alpha: u64,
        beta: u64,
        offset: OffsetPolicy<T>,
        order: PrefillOrder,
        priority_paying: bool,
        tile: TileConfig,
    ) -> Result<Self, SchedError> {
        if budget == 0 || alpha == 0 || beta == 0 {
            return Err(SchedError::Config("slai: token_budget, alpha and beta must be >= 1".into()));
        }
        if beta < alpha {
            return Err(SchedError::Config(format!(
                "slai: beta ({beta}) must be >= alpha ({alpha}) so every critical decode fits"
            )));
        }
        if budget < alpha {
            return Err(SchedError::Budget { budget, needed: alpha });
        }
        let ok = match offset {
            OffsetPolicy::Fixed(d) => d >= T::zero(),
            OffsetPolicy::Dynamic { low, high, threshold } => {
                low >= T::zero() && high >= T::zero() && (0.0..=1.0).contains(&threshold)
            }
        };
        if !ok {
            return Err(SchedError::Config("slai: offsets must be >= 0 and threshold in [0, 1]".into()));
        }
        Ok(Slai {
            budget,
            alpha,
            beta,
            offset,
            order,
            priority_paying,
            tile,
        })
    }
}

fn by_deadline<T: Scalar>(a: &(T, &DecodeEntry<T>), b: &(T, &DecodeEntry<T>)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.id.cmp(&b.1.id))
}

impl<T: Scalar> Scheduler<T> for Slai<T> {
    fn name(&self) -> &'static str {
        "slai"
    }

    fn next(&mut self, view: &SchedulerView<'_, T>) -> Result<SchedulerDecision, SchedError> {
        let p = view.prefill_queue;
        let d = view.decode_set;
        let delta = self.offset.delta(view.kv_tokens_used, view.kv_token_capacity);

        let mut critical = Vec::new();
        let mut relaxed = Vec::new();
        for e in d {
            let c = last_schedulable_time(e.last_emit, e.tbt_slo, delta, view.mean_batch_time);
            if is_critical(view.clock, c) {
                critical.push((c, e));
            } else {
                relaxed.push((c, e));
            }
        }
        critical.sort_by(by_deadline);
        relaxed.sort_by(by_deadline);
        if critical.len() as u64 > self.budget.min(self.beta) {
            return Err(SchedError::Budget {
                budget: self.budget.min(self.beta),
                needed: critical.len() as u64,
            });
        }

        let mut plan = BatchPlan::new(self.tile);
        plan.decode.extend(critical.iter().map(|(_, e)| decode_of(e)));
        let mut tau = plan.decode.len() as u64;
        let mut active = d.len() as u64 + p.iter().filter(|e| e.started()).count() as u64;

        for e in p.iter().filter(|e| e.started()) {
            if tau >= self.budget {
                break;
            }
            let item = chunk_of(e, self.budget - tau);
            tau += item.chunk;
            plan.prefill.push(item);
        }
        let mut fresh: Vec<usize> = (0..p.len()).filter(|&k| !p[k].started()).collect();
        fresh.sort_by(|&a, &b| {
            let (x, y) = (&p[a], &p[b]);
            let mut ord = Ordering::Equal;
            if self.priority_paying {
                ord = x.tbt_slo.partial_cmp(&y.tbt_slo).unwrap_or(Ordering::Equal);
            }
            if self.order == PrefillOrder::Spf {
                ord = ord.then(x.prompt_len.cmp(&y.prompt_len)).then(x.id.cmp(&y.id));
            }
            ord.then(a.cmp(&b))
        });
        for k in fresh {
            if tau >= self.budget || active >= self.alpha {
                break;
            }
            let item = chunk_of(&p[k], self.budget - tau);
            tau += item.chunk;
            active += 1;
            plan.prefill.push(item);
        }

        for (_, e) in &relaxed {
            if tau >= self.budget || plan.decode.len() as u64 >= self.beta {
                break;
            }
            plan.decode.push(decode_of(e));
            tau += 1;
        }

        let mut dec = if plan.is_empty() {
            SchedulerDecision::idle()
        } else {
            SchedulerDecision::batch(plan)
        };
        dec.notes.critical = critical.iter().map(|(_, e)| e.id).collect();
        Ok(dec)
    }
}
