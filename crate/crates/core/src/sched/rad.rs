use crate::cost_model::{BatchPlan, TileConfig};
use crate::scalar::Scalar;
use crate::workload::RequestId;

use super::{chunk_of, decode_of, BatchFlags, SchedError, Scheduler, SchedulerDecision, SchedulerView};

/// Resource-aware dynamic scheduler.
///
/// Works in cycles: up to `n` requests are admitted FCFS and prefilled in
/// `t_lcm`-token chunks, one chunk per batch. Decode batches take every
/// decoding request and fire whenever `t_col` requests are decoding, the
/// prefill queue is empty, or the cycle quota is used. A cycle ends when a
/// flagged decode batch empties the decode set.
#[derive(Debug, Clone)]
pub struct Rad {
    n: u32,
    tile: TileConfig,
    requests_in_cycle: u32,
    current: Option<RequestId>,
    last_flags: Option<BatchFlags>,
}

impl Rad {
    pub fn new(n: u32, tile: TileConfig) -> Result<Self, SchedError> {
        if n == 0 {
            return Err(SchedError::Config("rad: n must be >= 1".into()));
        }
        Ok(Rad {
            n,
            tile,
            requests_in_cycle: 0,
            current: None,
            last_flags: None,
        })
    }

    pub fn requests_in_cycle(&self) -> u32 {
        self.requests_in_cycle
    }
}

impl<T: Scalar> Scheduler<T> for Rad {
    fn name(&self) -> &'static str {
        "rad"
    }

    fn next(&mut self, view: &SchedulerView<'_, T>) -> Result<SchedulerDecision, SchedError> {
        let p = view.prefill_queue;
        let d = view.decode_set;
        let t_lcm = self.tile.lcm();

        if let Some(cur) = self.current {
            if let Some(entry) = p.iter().find(|e| e.id == cur) {
                let mut plan = BatchPlan::new(self.tile);
                plan.prefill.push(chunk_of(entry, t_lcm));
                self.last_flags = None;
                let mut dec = SchedulerDecision::batch(plan);
                dec.notes.requests_in_cycle = Some(self.requests_in_cycle);
                return Ok(dec);
            }
            self.current = None;
        }

        let mut cycle_reset = false;
        if d.is_empty() && (self.last_flags.is_some_and(|f| f.any()) || self.requests_in_cycle >= self.n) {
            self.requests_in_cycle = 0;
            self.last_flags = None;
            cycle_reset = true;
        }

        let mut dec = if p.is_empty() && d.is_empty() {
            SchedulerDecision::idle()
        } else if d.len() as u64 >= self.tile.t_col as u64 || p.is_empty() || self.requests_in_cycle >= self.n {
            let mut plan = BatchPlan::new(self.tile);
            plan.decode.extend(d.iter().map(decode_of));
            let flags = BatchFlags {
                end_of_cycle: self.requests_in_cycle >= self.n,
                prefill_exhausted: self.requests_in_cycle < self.n && p.is_empty(),
            };
            self.last_flags = Some(flags);
            let mut dec = SchedulerDecision::batch(plan);
            dec.notes.flags = flags;
            dec
        } else {
            let entry = &p[0];
            self.current = Some(entry.id);
            self.requests_in_cycle += 1;
            self.last_flags = None;
            let mut plan = BatchPlan::new(self.tile);
            plan.prefill.push(chunk_of(entry, t_lcm));
            SchedulerDecision::batch(plan)
        };
        dec.notes.cycle_reset = cycle_reset;
        dec.notes.requests_in_cycle = Some(self.requests_in_cycle);
        Ok(dec)
    }
}
