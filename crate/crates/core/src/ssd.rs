//! Device-side resources: firmware cores, firmware cost model and FIFO
//! servers for DMA engines and the data-end agent.

use std::collections::VecDeque;

use crate::config::FirmwareCosts;
use crate::engine::Time;

/// Converts firmware cycle counts to time on a particular core type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirmwareCostModel {
    pub costs: FirmwareCosts,
    pub frequency_hz: f64,
    /// Multiplier applied to all firmware work (host-run firmware).
    pub overhead: f64,
}

impl FirmwareCostModel {
    pub fn new(costs: FirmwareCosts, frequency_hz: f64, overhead: f64) -> Self {
        Self {
            costs,
            frequency_hz,
            overhead,
        }
    }

    pub fn ns(&self, cycles: u64) -> Time {
        (cycles as f64 * 1e9 / self.frequency_hz * self.overhead).round() as Time
    }

    pub fn fetch_parse(&self) -> Time {
        self.ns(self.costs.fetch_parse)
    }

    pub fn translate(&self, slices: u32) -> Time {
        self.ns(self.costs.translate * u64::from(slices))
    }

    pub fn dma_issue(&self, slices: u32) -> Time {
        self.ns(self.costs.dma_issue * u64::from(slices))
    }

    pub fn flash_issue(&self, ops: u32) -> Time {
        self.ns(self.costs.flash_issue * u64::from(ops))
    }

    pub fn completion(&self) -> Time {
        self.ns(self.costs.completion)
    }

    pub fn sync(&self) -> Time {
        self.ns(self.costs.sync_overhead)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Running {
    start: Time,
    own: bool,
}

/// A set of identical cores with a continuation queue. Busy time is
/// accumulated per sampling interval, with running jobs split at the
/// sample boundary.
#[derive(Debug, Clone)]
pub struct CorePool<J> {
    cores: Vec<Option<Running>>,
    pub ready: VecDeque<J>,
    sample_t: Time,
    acc_busy: u64,
    acc_own: u64,
    total_busy: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BusySample {
    pub busy_ns: u64,
    pub own_ns: u64,
}

impl<J> CorePool<J> {
    pub fn new(cores: usize) -> Self {
        Self {
            cores: vec![None; cores],
            ready: VecDeque::new(),
            sample_t: 0,
            acc_busy: 0,
            acc_own: 0,
            total_busy: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.cores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cores.is_empty()
    }

    pub fn idle_core(&self) -> Option<usize> {
        self.cores.iter().position(Option::is_none)
    }

    pub fn busy_cores(&self) -> usize {
        self.cores.iter().filter(|c| c.is_some()).count()
    }

    pub fn is_busy(&self, core: usize) -> bool {
        self.cores[core].is_some()
    }

    /// Mark `core` busy from `now`. `own` separates work for the device's own
    /// commands from work done on behalf of others.
    pub fn start(&mut self, core: usize, now: Time, own: bool) {
        assert!(self.cores[core].is_none(), "core {core} already busy");
        self.cores[core] = Some(Running { start: now, own });
    }

    /// Change the accounting class of a running job.
    pub fn reclassify(&mut self, core: usize, own: bool) {
        if let Some(r) = self.cores[core].as_mut() {
            r.own = own;
        }
    }

    pub fn finish(&mut self, core: usize, now: Time) {
        let r = self.cores[core].take().expect("finishing an idle core");
        let from = r.start.max(self.sample_t);
        let d = now.saturating_sub(from);
        self.acc_busy += d;
        if r.own {
            self.acc_own += d;
        }
        self.total_busy += now.saturating_sub(r.start);
    }

    /// Drop all running jobs without accounting (device failure).
    pub fn reset(&mut self) {
        for c in &mut self.cores {
            *c = None;
        }
        self.ready.clear();
    }

    /// Busy time since the previous sample.
    pub fn sample(&mut self, now: Time) -> BusySample {
        let mut s = BusySample {
            busy_ns: self.acc_busy,
            own_ns: self.acc_own,
        };
        for r in self.cores.iter().flatten() {
            let d = now.saturating_sub(r.start.max(self.sample_t));
            s.busy_ns += d;
            if r.own {
                s.own_ns += d;
            }
        }
        self.acc_busy = 0;
        self.acc_own = 0;
        self.sample_t = now;
        s
    }

    /// Busy time of completed jobs since the start of the run.
    pub fn total_busy(&self) -> u64 {
        self.total_busy
    }
}

/// Single FIFO server with a fixed service rate.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FifoServer {
    pub free_at: Time,
    pub busy_ns: u64,
    pub served: u64,
}

impl FifoServer {
    /// Serve a job of length `dur` arriving at `now`; returns (start, end).
    pub fn reserve(&mut self, now: Time, dur: Time) -> (Time, Time) {
        let start = now.max(self.free_at);
        self.free_at = start + dur;
        self.busy_ns += dur;
        self.served += 1;
        (start, self.free_at)
    }
}

/// Transfer time of `bytes` at `gbps` gigabytes per second.
pub fn transfer_ns(bytes: u64, gbps: f64) -> Time {
    (bytes as f64 / gbps).round() as Time
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_model_scales() {
        let m = FirmwareCostModel::new(FirmwareCosts::default(), 1e9, 1.0);
        assert_eq!(m.fetch_parse(), 440);
        assert_eq!(m.translate(16), 16_640);
        let host = FirmwareCostModel::new(FirmwareCosts::default(), 2e9, 1.5);
        assert_eq!(host.ns(1000), 750);
    }

    #[test]
    fn busy_split_across_samples() {
        let mut p: CorePool<()> = CorePool::new(2);
        p.start(0, 0, true);
        p.start(1, 50, false);
        let s = p.sample(100);
        assert_eq!(
            s,
            BusySample {
                busy_ns: 150,
                own_ns: 100
            }
        );
        p.finish(0, 130);
        let s = p.sample(200);
        assert_eq!(
            s,
            BusySample {
                busy_ns: 130,
                own_ns: 30
            }
        );
        p.finish(1, 200);
        assert_eq!(p.sample(300).busy_ns, 0);
        assert_eq!(p.total_busy(), 280);
    }

    #[test]
    fn fifo_server_queues() {
        let mut s = FifoServer::default();
        assert_eq!(s.reserve(10, 5), (10, 15));
        assert_eq!(s.reserve(12, 5), (15, 20));
        assert_eq!(s.reserve(30, 1), (30, 31));
        assert_eq!(transfer_ns(65536, 14.0), 4681);
    }
}
