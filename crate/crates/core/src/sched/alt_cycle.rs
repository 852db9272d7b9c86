use crate::cost_model::{BatchPlan, DecodeItem, TileConfig};
use crate::scalar::Scalar;
use crate::workload::RequestId;

use super::{chunk_of, SchedError, Scheduler, SchedulerDecision, SchedulerView};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Prefill,
    Decode,
}

/// Two-phase cycle scheduler: finish up to `n` prefills, then decode with a
/// rolling active set of at most `t_col` requests until the decode set
/// drains.
#[derive(Debug, Clone)]
pub struct AltCycle {
    n: u32,
    tile: TileConfig,
    mode: Mode,
    requests_in_cycle: u32,
    current: Option<RequestId>,
    active: Vec<RequestId>,
}

impl AltCycle {
    pub fn new(n: u32, tile: TileConfig) -> Result<Self, SchedError> {
        if n == 0 {
            return Err(SchedError::Config("alt_cycle: n must be >= 1".into()));
        }
        Ok(AltCycle {
            n,
            tile,
            mode: Mode::Prefill,
            requests_in_cycle: 0,
            current: None,
            active: Vec::new(),
        })
    }
}

impl<T: Scalar> Scheduler<T> for AltCycle {
    fn name(&self) -> &'static str {
        "alt_cycle"
    }

    fn next(&mut self, view: &SchedulerView<'_, T>) -> Result<SchedulerDecision, SchedError> {
        let p = view.prefill_queue;
        let d = view.decode_set;
        let t_lcm = self.tile.lcm();
        let t_col = self.tile.t_col as usize;
        let mut cycle_reset = false;

        for _ in 0..3 {
            match self.mode {
                Mode::Prefill => {
                    if let Some(cur) = self.current {
                        if let Some(entry) = p.iter().find(|e| e.id == cur) {
                            let mut plan = BatchPlan::new(self.tile);
                            plan.prefill.push(chunk_of(entry, t_lcm));
                            let mut dec = SchedulerDecision::batch(plan);
                            dec.notes.cycle_reset = cycle_reset;
                            dec.notes.requests_in_cycle = Some(self.requests_in_cycle);
                            return Ok(dec);
                        }
                        self.current = None;
                    }
                    if self.requests_in_cycle < self.n {
                        if let Some(entry) = p.first() {
                            self.current = Some(entry.id);
                            self.requests_in_cycle += 1;
                            let mut plan = BatchPlan::new(self.tile);
                            plan.prefill.push(chunk_of(entry, t_lcm));
                            let mut dec = SchedulerDecision::batch(plan);
                            dec.notes.cycle_reset = cycle_reset;
                            dec.notes.requests_in_cycle = Some(self.requests_in_cycle);
                            return Ok(dec);
                        }
                    }
                    self.mode = Mode::Decode;
                    self.active.clear();
                }
                Mode::Decode => {
                    self.active.retain(|id| d.iter().any(|e| e.id == *id));
                    if self.active.len() < t_col {
                        let mut spare: Vec<RequestId> = d
                            .iter()
                            .map(|e| e.id)
                            .filter(|id| !self.active.contains(id))
                            .collect();
                        spare.sort();
                        let room = t_col - self.active.len();
                        self.active.extend(spare.into_iter().take(room));
                    }
                    if !self.active.is_empty() {
                        let mut plan = BatchPlan::new(self.tile);
                        for id in &self.active {
                            let e = d.iter().find(|e| e.id == *id).expect("active request is decoding");
                            plan.decode.push(DecodeItem {
                                request: e.id,
                                index: e.index,
                            });
                        }
                        let mut dec = SchedulerDecision::batch(plan);
                        dec.notes.cycle_reset = cycle_reset;
                        dec.notes.requests_in_cycle = Some(self.requests_in_cycle);
                        return Ok(dec);
                    }
                    self.mode = Mode::Prefill;
                    self.requests_in_cycle = 0;
                    cycle_reset = true;
                    if p.is_empty() {
                        let mut dec = SchedulerDecision::idle();
                        dec.notes.cycle_reset = true;
                        return Ok(dec);
                    }
                }
            }
        }
        unreachable!("alt_cycle mode loop did not settle")
    }
}
