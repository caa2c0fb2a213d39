//! Per-SSD flash array: channels, dies, planes, blocks and pages with
//! ONFi-style read/program/erase timing.
//!
//! Resources are modeled as FIFO reservations: a die runs at most one cell
//! operation at a time and a channel carries one page transfer at a time.
//! Reads occupy the die for the cell time and then the channel for the
//! transfer; programs transfer first and then occupy the die.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::engine::Time;
use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlashGeometry {
    pub channels: u32,
    pub dies_per_channel: u32,
    pub planes_per_die: u32,
    pub blocks_per_plane: u32,
    pub pages_per_block: u32,
    pub page_size: u32,
    /// Channel rate in megatransfers per second on an 8-bit bus.
    pub channel_rate_mts: u32,
}

impl Default for FlashGeometry {
    fn default() -> Self {
        Self {
            channels: 8,
            dies_per_channel: 8,
            planes_per_die: 4,
            blocks_per_plane: 1024,
            pages_per_block: 1024,
            page_size: 16_384,
            channel_rate_mts: 2400,
        }
    }
}

impl FlashGeometry {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("channels", self.channels),
            ("dies_per_channel", self.dies_per_channel),
            ("planes_per_die", self.planes_per_die),
            ("blocks_per_plane", self.blocks_per_plane),
            ("pages_per_block", self.pages_per_block),
            ("page_size", self.page_size),
            ("channel_rate_mts", self.channel_rate_mts),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(SimError::Config(format!("flash.{name} must be >= 1")));
            }
        }
        if !self.page_size.is_multiple_of(4096) {
            return Err(SimError::Config("flash.page_size must be a multiple of 4096".into()));
        }
        if self.total_blocks() > u64::from(u32::MAX) {
            return Err(SimError::Config("flash geometry too large".into()));
        }
        Ok(())
    }

    pub fn dies(&self) -> u32 {
        self.channels * self.dies_per_channel
    }

    pub fn total_blocks(&self) -> u64 {
        u64::from(self.dies()) * u64::from(self.planes_per_die) * u64::from(self.blocks_per_plane)
    }

    pub fn total_pages(&self) -> u64 {
        self.total_blocks() * u64::from(self.pages_per_block)
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.total_pages() * u64::from(self.page_size)
    }

    /// 4 KB slots per flash page.
    pub fn slots_per_page(&self) -> u32 {
        self.page_size / 4096
    }

    /// Channel transfer time for `bytes`, rounded up to whole ns.
    pub fn transfer_ns(&self, bytes: u64) -> Time {
        // bytes / (rate MT/s * 1 B) seconds = bytes * 1000 / rate ns
        (bytes * 1000).div_ceil(u64::from(self.channel_rate_mts))
    }

    pub fn block_id(&self, a: &FlashAddr) -> u32 {
        let die = a.channel * self.dies_per_channel + a.die;
        (die * self.planes_per_die + a.plane) * self.blocks_per_plane + a.block
    }

    /// Inverse of [`FlashGeometry::block_id`] with `page = 0`.
    pub fn block_addr(&self, block_id: u32) -> FlashAddr {
        let block = block_id % self.blocks_per_plane;
        let rest = block_id / self.blocks_per_plane;
        let plane = rest % self.planes_per_die;
        let die_idx = rest / self.planes_per_die;
        FlashAddr {
            channel: die_idx / self.dies_per_channel,
            die: die_idx % self.dies_per_channel,
            plane,
            block,
            page: 0,
        }
    }

    pub fn contains(&self, a: &FlashAddr) -> bool {
        a.channel < self.channels
            && a.die < self.dies_per_channel
            && a.plane < self.planes_per_die
            && a.block < self.blocks_per_plane
            && a.page < self.pages_per_block
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlashTiming {
    pub read_lsb_ns: Time,
    pub read_csb_ns: Time,
    pub read_msb_ns: Time,
    pub program_lsb_ns: Time,
    pub program_csb_ns: Time,
    pub program_msb_ns: Time,
    pub erase_ns: Time,
}

impl Default for FlashTiming {
    fn default() -> Self {
        // The vendor table prints the MSB pair as "60/400 ms"; every other
        // entry is in microseconds and 400 ms programs are not physical, so
        // the defaults read it as microseconds. Override here if needed.
        Self {
            read_lsb_ns: 30_000,
            read_csb_ns: 45_000,
            read_msb_ns: 60_000,
            program_lsb_ns: 200_000,
            program_csb_ns: 280_000,
            program_msb_ns: 400_000,
            erase_ns: 3_000_000,
        }
    }
}

impl FlashTiming {
    pub fn validate(&self) -> Result<()> {
        for t in [PageType::Lsb, PageType::Csb, PageType::Msb] {
            let (r, p) = (self.read(t), self.program(t));
            if !(r > 0 && r < p && p < self.erase_ns) {
                return Err(SimError::Config(format!(
                    "flash timing must satisfy 0 < read < program < erase for {t:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn read(&self, t: PageType) -> Time {
        match t {
            PageType::Lsb => self.read_lsb_ns,
            PageType::Csb => self.read_csb_ns,
            PageType::Msb => self.read_msb_ns,
        }
    }

    pub fn program(&self, t: PageType) -> Time {
        match t {
            PageType::Lsb => self.program_lsb_ns,
            PageType::Csb => self.program_csb_ns,
            PageType::Msb => self.program_msb_ns,
        }
    }

    pub fn cell_time(&self, kind: FlashOpKind, t: PageType) -> Time {
        match kind {
            FlashOpKind::Read => self.read(t),
            FlashOpKind::Program => self.program(t),
            FlashOpKind::Erase => self.erase_ns,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PageType {
    Lsb,
    Csb,
    Msb,
}

impl PageType {
    /// TLC wordline interleave: page index modulo 3 within a block.
    pub fn of_page(page: u32) -> Self {
        match page % 3 {
            0 => PageType::Lsb,
            1 => PageType::Csb,
            _ => PageType::Msb,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlashOpKind {
    Read,
    Program,
    Erase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct FlashAddr {
    pub channel: u32,
    pub die: u32,
    pub plane: u32,
    pub block: u32,
    pub page: u32,
}

impl FlashAddr {
    pub fn die_index(&self, g: &FlashGeometry) -> usize {
        (self.channel * g.dies_per_channel + self.die) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlashOp {
    pub kind: FlashOpKind,
    pub addr: FlashAddr,
}

impl FlashOp {
    pub fn read(addr: FlashAddr) -> Self {
        Self {
            kind: FlashOpKind::Read,
            addr,
        }
    }
    pub fn program(addr: FlashAddr) -> Self {
        Self {
            kind: FlashOpKind::Program,
            addr,
        }
    }
    pub fn erase(addr: FlashAddr) -> Self {
        Self {
            kind: FlashOpKind::Erase,
            addr: FlashAddr { page: 0, ..addr },
        }
    }
    pub fn page_type(&self) -> PageType {
        PageType::of_page(self.addr.page)
    }
}

/// Timing of one submitted operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlashCompletion {
    pub issue_time: Time,
    pub cell_start: Time,
    pub cell_end: Time,
    pub complete_time: Time,
    /// Cell plus transfer time, i.e. the part that is not queueing.
    pub service_ns: Time,
}

#[derive(Debug, Clone, Copy)]
struct DieState {
    free_at: Time,
    last_kind: Option<FlashOpKind>,
    last_page: u32,
    last_planes: u32,
    last_cell_start: Time,
    last_cell_end: Time,
}

impl DieState {
    fn new() -> Self {
        Self {
            free_at: 0,
            last_kind: None,
            last_page: 0,
            last_planes: 0,
            last_cell_start: 0,
            last_cell_end: 0,
        }
    }
}

/// Cumulative counters, used by the energy model and reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FlashCounters {
    pub reads: u64,
    pub programs: u64,
    pub erases: u64,
    pub cell_ns_read: u64,
    pub cell_ns_program: u64,
    pub cell_ns_erase: u64,
    pub transfer_ns: u64,
    pub bytes_read: u64,
    pub bytes_programmed: u64,
    pub multiplane_joins: u64,
}

pub struct FlashBackbone {
    geom: FlashGeometry,
    timing: FlashTiming,
    dies: Vec<DieState>,
    channel_free: Vec<Time>,
    channel_busy: Vec<u64>,
    write_ptr: HashMap<u32, u32>,
    /// Die cell-busy intervals (start, end), kept for windowed utilization.
    busy: VecDeque<(Time, Time)>,
    counters: FlashCounters,
}

impl FlashBackbone {
    pub fn new(geom: FlashGeometry, timing: FlashTiming) -> Self {
        let dies = geom.dies() as usize;
        Self {
            geom,
            timing,
            dies: vec![DieState::new(); dies],
            channel_free: vec![0; geom.channels as usize],
            channel_busy: vec![0; geom.channels as usize],
            write_ptr: HashMap::new(),
            busy: VecDeque::new(),
            counters: FlashCounters::default(),
        }
    }

    pub fn geometry(&self) -> &FlashGeometry {
        &self.geom
    }

    pub fn timing(&self) -> &FlashTiming {
        &self.timing
    }

    pub fn counters(&self) -> &FlashCounters {
        &self.counters
    }

    pub fn channel_busy_ns(&self) -> &[u64] {
        &self.channel_busy
    }

    /// Reserve die and channel time for `op` issued at `now`.
    pub fn submit(&mut self, op: FlashOp, now: Time) -> Result<FlashCompletion> {
        if !self.geom.contains(&op.addr) {
            return Err(SimError::AddressOutOfRange(format!("{:?}", op.addr)));
        }
        let block = self.geom.block_id(&op.addr);
        match op.kind {
            FlashOpKind::Program => {
                let wp = self.write_ptr.get(&block).copied().unwrap_or(0);
                if op.addr.page < wp {
                    return Err(SimError::WriteInPlace(format!("{:?}", op.addr)));
                }
                self.write_ptr.insert(block, op.addr.page + 1);
            }
            FlashOpKind::Erase => {
                self.write_ptr.remove(&block);
            }
            FlashOpKind::Read => {}
        }

        let ptype = op.page_type();
        let cell = self.timing.cell_time(op.kind, ptype);
        let xfer = match op.kind {
            FlashOpKind::Erase => 0,
            _ => self.geom.transfer_ns(u64::from(self.geom.page_size)),
        };
        let die_idx = op.addr.die_index(&self.geom);
        let ch = op.addr.channel as usize;
        let plane_bit = 1u32 << op.addr.plane;

        let completion = match op.kind {
            FlashOpKind::Read => {
                let (cell_start, cell_end) = self.reserve_cell(die_idx, op, plane_bit, now, now, cell);
                let x_start = cell_end.max(self.channel_free[ch]);
                let x_end = x_start + xfer;
                self.channel_free[ch] = x_end;
                self.channel_busy[ch] += xfer;
                FlashCompletion {
                    issue_time: now,
                    cell_start,
                    cell_end,
                    complete_time: x_end,
                    service_ns: (cell_end - cell_start) + xfer,
                }
            }
            FlashOpKind::Program => {
                let x_start = now.max(self.channel_free[ch]);
                let x_end = x_start + xfer;
                self.channel_free[ch] = x_end;
                self.channel_busy[ch] += xfer;
                let (cell_start, cell_end) = self.reserve_cell(die_idx, op, plane_bit, now, x_end, cell);
                FlashCompletion {
                    issue_time: now,
                    cell_start,
                    cell_end,
                    complete_time: cell_end,
                    service_ns: xfer + (cell_end - cell_start),
                }
            }
            FlashOpKind::Erase => {
                let (cell_start, cell_end) = self.reserve_cell(die_idx, op, plane_bit, now, now, cell);
                FlashCompletion {
                    issue_time: now,
                    cell_start,
                    cell_end,
                    complete_time: cell_end,
                    service_ns: cell_end - cell_start,
                }
            }
        };

        let c = &mut self.counters;
        match op.kind {
            FlashOpKind::Read => {
                c.reads += 1;
                c.cell_ns_read += cell;
                c.bytes_read += u64::from(self.geom.page_size);
            }
            FlashOpKind::Program => {
                c.programs += 1;
                c.cell_ns_program += cell;
                c.bytes_programmed += u64::from(self.geom.page_size);
            }
            FlashOpKind::Erase => {
                c.erases += 1;
                c.cell_ns_erase += cell;
            }
        }
        c.transfer_ns += xfer;
        Ok(completion)
    }

    /// Reserve the die's cell for `cell` ns, starting no earlier than
    /// `earliest`. Same-kind operations at the same page offset on a
    /// different plane join a cell operation that has not started yet.
    fn reserve_cell(
        &mut self,
        die_idx: usize,
        op: FlashOp,
        plane_bit: u32,
        now: Time,
        earliest: Time,
        cell: Time,
    ) -> (Time, Time) {
        let d = &mut self.dies[die_idx];
        let joinable = op.kind != FlashOpKind::Erase
            && d.last_kind == Some(op.kind)
            && d.last_page == op.addr.page
            && d.last_planes & plane_bit == 0
            && d.last_cell_start >= now
            && d.last_cell_start >= earliest
            && d.last_cell_end == d.free_at;
        if joinable {
            d.last_planes |= plane_bit;
            self.counters.multiplane_joins += 1;
            return (d.last_cell_start, d.last_cell_end);
        }
        let start = earliest.max(d.free_at);
        let end = start + cell;
        d.free_at = end;
        d.last_kind = Some(op.kind);
        d.last_page = op.addr.page;
        d.last_planes = plane_bit;
        d.last_cell_start = start;
        d.last_cell_end = end;
        self.busy.push_back((start, end));
        (start, end)
    }

    /// Fraction of die time spent in cell operations over `[start, end)`.
    pub fn utilization_window(&self, start: Time, end: Time, now: Time) -> Result<f64> {
        if end <= start {
            return Err(SimError::EmptyWindow);
        }
        if end > now {
            return Err(SimError::WindowInFuture { start, end, now });
        }
        let busy: u64 = self
            .busy
            .iter()
            .map(|&(s, e)| e.min(end).saturating_sub(s.max(start)))
            .sum();
        let denom = (end - start) as f64 * f64::from(self.geom.dies());
        Ok((busy as f64 / denom).min(1.0))
    }

    /// Forget busy intervals that ended before `t`.
    pub fn prune_before(&mut self, t: Time) {
        // Intervals are pushed in per-die FIFO order, not globally sorted;
        // retain is exact.
        self.busy.retain(|&(_, e)| e >= t);
    }

    pub fn die_free_at(&self, die_idx: usize) -> Time {
        self.dies[die_idx].free_at
    }

    /// Total cell-busy ns per die, for energy accounting.
    pub fn total_cell_ns(&self) -> u64 {
        let c = &self.counters;
        c.cell_ns_read + c.cell_ns_program + c.cell_ns_erase
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(channel: u32, die: u32, plane: u32, block: u32, page: u32) -> FlashAddr {
        FlashAddr {
            channel,
            die,
            plane,
            block,
            page,
        }
    }

    #[test]
    fn default_capacity_is_4tb() {
        let g = FlashGeometry::default();
        assert_eq!(g.capacity_bytes(), 4 * (1u64 << 40));
        assert_eq!(g.dies(), 64);
    }

    #[test]
    fn lsb_read_idle_die() {
        let mut f = FlashBackbone::new(FlashGeometry::default(), FlashTiming::default());
        let c = f.submit(FlashOp::read(addr(0, 0, 0, 0, 0)), 0).unwrap();
        // 16384 B at 2400 MT/s x 1 B = 6826.67 ns, rounded up
        assert_eq!(c.complete_time, 30_000 + 6_827);
        assert_eq!(c.service_ns, 36_827);
    }

    #[test]
    fn erase_occupies_die_three_ms() {
        let mut f = FlashBackbone::new(FlashGeometry::default(), FlashTiming::default());
        let c = f.submit(FlashOp::erase(addr(1, 2, 0, 5, 0)), 100).unwrap();
        assert_eq!(c.complete_time - c.cell_start, 3_000_000);
        assert_eq!(f.die_free_at(addr(1, 2, 0, 0, 0).die_index(f.geometry())), 3_000_100);
    }

    #[test]
    fn same_die_reads_serialize() {
        let mut f = FlashBackbone::new(FlashGeometry::default(), FlashTiming::default());
        let a = f.submit(FlashOp::read(addr(0, 0, 0, 0, 0)), 0).unwrap();
        let b = f.submit(FlashOp::read(addr(0, 0, 0, 1, 0)), 0).unwrap();
        assert!(b.cell_start >= a.cell_end);
        assert!(b.complete_time >= a.complete_time + 30_000);
    }

    #[test]
    fn multiplane_reads_share_cell_time() {
        let mut f = FlashBackbone::new(FlashGeometry::default(), FlashTiming::default());
        // Occupy the die so the next two wait and can join.
        f.submit(FlashOp::read(addr(0, 0, 0, 0, 3)), 0).unwrap();
        let a = f.submit(FlashOp::read(addr(0, 0, 0, 1, 7)), 0).unwrap();
        let b = f.submit(FlashOp::read(addr(0, 0, 1, 9, 7)), 0).unwrap();
        assert_eq!((a.cell_start, a.cell_end), (b.cell_start, b.cell_end));
        assert_eq!(f.counters().multiplane_joins, 1);
        // Same plane does not join.
        let c = f.submit(FlashOp::read(addr(0, 0, 1, 2, 7)), 0).unwrap();
        assert!(c.cell_start >= b.cell_end);
    }

    #[test]
    fn different_channels_run_in_parallel() {
        let mut f = FlashBackbone::new(FlashGeometry::default(), FlashTiming::default());
        let a = f.submit(FlashOp::read(addr(0, 0, 0, 0, 0)), 0).unwrap();
        let b = f.submit(FlashOp::read(addr(1, 0, 0, 0, 0)), 0).unwrap();
        assert_eq!(a.complete_time, b.complete_time);
    }

    #[test]
    fn program_order_and_write_in_place() {
        let mut f = FlashBackbone::new(FlashGeometry::default(), FlashTiming::default());
        let c = f.submit(FlashOp::program(addr(0, 0, 0, 3, 0)), 0).unwrap();
        assert_eq!(c.complete_time, 6_827 + 200_000);
        let err = f.submit(FlashOp::program(addr(0, 0, 0, 3, 0)), 0).unwrap_err();
        assert!(matches!(err, SimError::WriteInPlace(_)));
        f.submit(FlashOp::erase(addr(0, 0, 0, 3, 0)), 0).unwrap();
        f.submit(FlashOp::program(addr(0, 0, 0, 3, 0)), 0).unwrap();
    }

    #[test]
    fn out_of_range_rejected() {
        let mut f = FlashBackbone::new(FlashGeometry::default(), FlashTiming::default());
        let err = f.submit(FlashOp::read(addr(8, 0, 0, 0, 0)), 0).unwrap_err();
        assert!(matches!(err, SimError::AddressOutOfRange(_)));
    }

    #[test]
    fn utilization_definitions() {
        let mut f = FlashBackbone::new(FlashGeometry::default(), FlashTiming::default());
        assert_eq!(f.utilization_window(0, 1_000_000, 1_000_000).unwrap(), 0.0);
        assert!(matches!(f.utilization_window(5, 5, 10), Err(SimError::EmptyWindow)));
        assert!(f.utilization_window(0, 100, 50).is_err());
        // Saturate one die for the whole window with back-to-back erases.
        let mut t = 0;
        while t < 9_000_000 {
            let c = f.submit(FlashOp::erase(addr(0, 0, 0, 0, 0)), t).unwrap();
            t = c.complete_time;
        }
        let u = f.utilization_window(0, 9_000_000, 9_000_000).unwrap();
        assert!((u - 1.0 / 64.0).abs() < 1e-12, "u = {u}");
    }

    #[test]
    fn page_types_cycle() {
        assert_eq!(PageType::of_page(0), PageType::Lsb);
        assert_eq!(PageType::of_page(4), PageType::Csb);
        assert_eq!(PageType::of_page(5), PageType::Msb);
    }

    #[test]
    fn timing_invariants_checked() {
        assert!(FlashTiming::default().validate().is_ok());
        let bad = FlashTiming {
            read_lsb_ns: 300_000,
            ..FlashTiming::default()
        };
        assert!(bad.validate().is_err());
    }
}
