use crate::cost_model::{BatchPlan, TileConfig};
use crate::scalar::Scalar;

use super::{admission_order, chunk_of, decode_of, PrefillOrder, SchedError, Scheduler, SchedulerDecision, SchedulerView};

/// Stall-free chunked batching: every decoding request gets a decode
/// iteration, and the remaining token budget is filled with one prefill
/// chunk per request.
///
/// `max_active` caps the number of requests holding KV memory, which bounds
/// the decode set so decodes alone never exceed the budget.
#[derive(Debug, Clone)]
pub struct Sarathi {
    budget: u64,
    order: PrefillOrder,
    max_active: u64,
    tile: TileConfig,
}

impl Sarathi {
    pub fn new(budget: u64, order: PrefillOrder, max_active: Option<u64>, tile: TileConfig) -> Result<Self, SchedError> {
        let max_active = max_active.unwrap_or(budget);
        if budget == 0 || max_active == 0 {
            return Err(SchedError::Config("sarathi: token_budget and max_active must be >= 1".into()));
        }
        if budget < max_active {
            return Err(SchedError::Budget {
                budget,
                needed: max_active,
            });
        }
        Ok(Sarathi {
            budget,
            order,
            max_active,
            tile,
        })
    }
}

impl<T: Scalar> Scheduler<T> for Sarathi {
    fn name(&self) -> &'static str {
        "sarathi"
    }

    fn next(&mut self, view: &SchedulerView<'_, T>) -> Result<SchedulerDecision, SchedError> {
        let p = view.prefill_queue;
        let d = view.decode_set;
        if d.len() as u64 > self.budget {
            return Err(SchedError::Budget {
                budget: self.budget,
                needed: d.len() as u64,
            });
        }
        let mut plan = BatchPlan::new(self.tile);
        let mut decodes: Vec<_> = d.iter().collect();
        decodes.sort_by_key(|e| e.id);
        plan.decode.extend(decodes.into_iter().map(decode_of));
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
        for k in admission_order(p, self.order) {
            if tau >= self.budget || active >= self.max_active {
                break;
            }
            let item = chunk_of(&p[k], self.budget - tau);
            tau += item.chunk;
            active += 1;
            plan.prefill.push(item);
        }
        if plan.is_empty() {
            return Ok(SchedulerDecision::idle());
        }
        Ok(SchedulerDecision::batch(plan))
    }
}
