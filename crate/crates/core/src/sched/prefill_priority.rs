use crate::cost_model::{BatchPlan, TileConfig};
use crate::scalar::Scalar;

use super::{admission_order, chunk_of, decode_of, PrefillOrder, SchedError, Scheduler, SchedulerDecision, SchedulerView};

/// Eager-admission baseline: prefill chunks take the budget first (running
/// prefills, then new ones FCFS), decode iterations fill what is left,
/// longest-waiting first.
#[derive(Debug, Clone)]
pub struct PrefillPriority {
    budget: u64,
    max_active: u64,
    tile: TileConfig,
}

impl PrefillPriority {
    pub fn new(budget: u64, max_active: Option<u64>, tile: TileConfig) -> Result<Self, SchedError> {
        let max_active = max_active.unwrap_or(budget);
        if budget == 0 || max_active == 0 {
            return Err(SchedError::Config("vllm: token_budget and max_active must be >= 1".into()));
        }
        if budget < max_active {
            return Err(SchedError::Budget {
                budget,
                needed: max_active,
            });
        }
        Ok(PrefillPriority {
            budget,
            max_active,
            tile,
        })
    }
}

impl<T: Scalar> Scheduler<T> for PrefillPriority {
    fn name(&self) -> &'static str {
        "vllm"
    }

    fn next(&mut self, view: &SchedulerView<'_, T>) -> Result<SchedulerDecision, SchedError> {
        let p = view.prefill_queue;
        let d = view.decode_set;
        let mut plan = BatchPlan::new(self.tile);
        let mut tau = 0u64;
        let mut active = d.len() as u64 + p.iter().filter(|e| e.started()).count() as u64;

        for e in p.iter().filter(|e| e.started()) {
            if tau >= self.budget {
                break;
            }
            let item = chunk_of(e, self.budget - tau);
            tau += item.chunk;
            plan.prefill.push(item);
        }
        for k in admission_order(p, PrefillOrder::Fcfs) {
            if tau >= self.budget || active >= self.max_active {
                break;
            }
            let item = chunk_of(&p[k], self.budget - tau);
            tau += item.chunk;
            active += 1;
            plan.prefill.push(item);
        }
        let mut decodes: Vec<_> = d.iter().collect();
        decodes.sort_by(|a, b| {
            a.last_emit
                .partial_cmp(&b.last_emit)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.id.cmp(&b.id))
        });
        for e in decodes {
            if tau >= self.budget {
                break;
            }
            plan.decode.push(decode_of(e));
            tau += 1;
        }
        if plan.is_empty() {
            return Ok(SchedulerDecision::idle());
        }
        Ok(SchedulerDecision::batch(plan))
    }
}
