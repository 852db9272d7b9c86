use crate::cost_model::{BatchPlan, PrefillItem, TileConfig};
use crate::scalar::Scalar;

use super::{decode_of, SchedError, Scheduler, SchedulerDecision, SchedulerView};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Prefill,
    Decode,
}

/// Static batching: admit up to `b` whole prompts, then decode that set to
/// completion before admitting anything else.
#[derive(Debug, Clone)]
pub struct RequestLevel {
    b: u32,
    tile: TileConfig,
    mode: Mode,
}

impl RequestLevel {
    pub fn new(b: u32, tile: TileConfig) -> Result<Self, SchedError> {
        if b == 0 {
            return Err(SchedError::Config("request_level: b must be >= 1".into()));
        }
        Ok(RequestLevel {
            b,
            tile,
            mode: Mode::Decode,
        })
    }
}

impl<T: Scalar> Scheduler<T> for RequestLevel {
    fn name(&self) -> &'static str {
        "request_level"
    }

    fn next(&mut self, view: &SchedulerView<'_, T>) -> Result<SchedulerDecision, SchedError> {
        let p = view.prefill_queue;
        let d = view.decode_set;
        if self.mode == Mode::Decode {
            if !d.is_empty() {
                let mut plan = BatchPlan::new(self.tile);
                plan.decode.extend(d.iter().map(decode_of));
                return Ok(SchedulerDecision::batch(plan));
            }
            self.mode = Mode::Prefill;
        }
        self.mode = Mode::Decode;
        if p.is_empty() {
            return Ok(SchedulerDecision::idle());
        }
        let mut plan = BatchPlan::new(self.tile);
        for e in p.iter().take(self.b as usize) {
            plan.prefill.push(PrefillItem {
                request: e.id,
                start: e.next_index,
                chunk: e.remaining(),
            });
        }
        Ok(SchedulerDecision::batch(plan))
    }
}
