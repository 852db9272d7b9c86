use crate::cost_model::{BatchPlan, PrefillItem, TileConfig};
use crate::scalar::Scalar;

use super::{decode_of, SchedError, Scheduler, SchedulerDecision, SchedulerView};

/// Prefill side of a disaggregated cluster: one request at a time, FCFS,
/// whole prompt per batch unless `chunked`, in which case `t_lcm` chunks.
#[derive(Debug, Clone)]
pub struct DistServePrefill {
    chunked: bool,
    tile: TileConfig,
}

impl DistServePrefill {
    pub fn new(chunked: bool, tile: TileConfig) -> Self {
        DistServePrefill { chunked, tile }
    }
}

impl<T: Scalar> Scheduler<T> for DistServePrefill {
    fn name(&self) -> &'static str {
        "distserve_prefill"
    }

    fn next(&mut self, view: &SchedulerView<'_, T>) -> Result<SchedulerDecision, SchedError> {
        if let Some(e) = view.decode_set.first() {
            return Err(SchedError::Routing(format!("prefill node holds decoding request {}", e.id)));
        }
        let Some(e) = view.prefill_queue.first() else {
            return Ok(SchedulerDecision::idle());
        };
        let chunk = if self.chunked {
            self.tile.lcm().min(e.remaining())
        } else {
            e.remaining()
        };
        let mut plan = BatchPlan::new(self.tile);
        plan.prefill.push(PrefillItem {
            request: e.id,
            start: e.next_index,
            chunk,
        });
        Ok(SchedulerDecision::batch(plan))
    }
}

/// Decode side: one decode iteration for every resident request.
#[derive(Debug, Clone)]
pub struct DistServeDecode {
    tile: TileConfig,
}

impl DistServeDecode {
    pub fn new(tile: TileConfig) -> Self {
        DistServeDecode { tile }
    }
}

impl<T: Scalar> Scheduler<T> for DistServeDecode {
    fn name(&self) -> &'static str {
        "distserve_decode"
    }

    fn next(&mut self, view: &SchedulerView<'_, T>) -> Result<SchedulerDecision, SchedError> {
        if let Some(e) = view.prefill_queue.first() {
            return Err(SchedError::Routing(format!("decode node received un-prefilled request {}", e.id)));
        }
        if view.decode_set.is_empty() {
            return Ok(SchedulerDecision::idle());
        }
        let mut plan = BatchPlan::new(self.tile);
        let mut ds: Vec<_> = view.decode_set.iter().collect();
        ds.sort_by_key(|e| e.id);
        plan.decode.extend(ds.into_iter().map(decode_of));
        Ok(SchedulerDecision::batch(plan))
    }
}
