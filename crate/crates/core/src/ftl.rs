//! Page-mapping FTL: slot allocation striped across (channel, die, plane)
//! units, greedy garbage collection, a write-back DRAM buffer, the reserved
//! mapping-page region and the payload token store used by the integrity
//! oracle.
//!
//! Physical slots are numbered `((unit * bpp + block) * ppb + page) * spp +
//! slot`, where a unit is one plane and units are ordered channel-first so
//! consecutive allocations land on different channels.

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::engine::Time;
use crate::error::{Result, SimError};
use crate::flash::{FlashAddr, FlashBackbone, FlashCompletion, FlashGeometry, FlashOp};
use crate::mapping::{map_page_of, MapEffects, MappingState, ENTRIES_PER_MAP_PAGE, UNMAPPED};

/// Token bit marking data laid down by preconditioning.
pub const PRECOND_TOKEN: u64 = 1 << 63;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtlConfig {
    pub overprovision: f64,
    pub gc_low: f64,
    pub gc_high: f64,
    /// Blocks per plane reserved for persisted mapping pages.
    pub map_region_blocks: u32,
    /// Write-back buffer capacity in 4 KB slots.
    pub write_buffer_slots: u32,
    /// Fraction of the logical space written sequentially before the run.
    pub precondition: f64,
}

impl Default for FtlConfig {
    fn default() -> Self {
        Self {
            overprovision: 0.07,
            gc_low: 0.05,
            gc_high: 0.10,
            map_region_blocks: 2,
            write_buffer_slots: 256,
            precondition: 0.5,
        }
    }
}

impl FtlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.overprovision) {
            return Err(SimError::Config("ftl.overprovision must be in [0, 0.5)".into()));
        }
        if !(self.gc_low > 0.0 && self.gc_low < self.gc_high && self.gc_high < 0.5) {
            return Err(SimError::Config(
                "ftl watermarks need 0 < gc_low < gc_high < 0.5".into(),
            ));
        }
        if self.map_region_blocks == 0 {
            return Err(SimError::Config("ftl.map_region_blocks must be >= 1".into()));
        }
        if self.write_buffer_slots < 4 {
            return Err(SimError::Config("ftl.write_buffer_slots must be >= 4".into()));
        }
        if !(0.0..=1.0).contains(&self.precondition) {
            return Err(SimError::Config("ftl.precondition must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Static address arithmetic plus the initial (preconditioned) mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub units: u32,
    pub channels: u32,
    pub dies_per_channel: u32,
    pub bpp: u32,
    pub ppb: u32,
    pub spp: u32,
    pub data_blocks: u32,
    pub logical_slots: u64,
    pub precond_slots: u64,
}

impl Layout {
    pub fn new(g: &FlashGeometry, cfg: &FtlConfig) -> Result<Self> {
        g.validate()?;
        cfg.validate()?;
        let units = g.dies() * g.planes_per_die;
        let spp = g.slots_per_page();
        if cfg.map_region_blocks + 2 >= g.blocks_per_plane {
            return Err(SimError::Config(
                "flash.blocks_per_plane too small for map region".into(),
            ));
        }
        let data_blocks = g.blocks_per_plane - cfg.map_region_blocks;
        let total = u64::from(units) * u64::from(g.blocks_per_plane) * u64::from(g.pages_per_block) * u64::from(spp);
        if total >= u64::from(u32::MAX) {
            return Err(SimError::Config("flash geometry exceeds 32-bit slot numbering".into()));
        }
        let data_slots = u64::from(units) * u64::from(data_blocks) * u64::from(g.pages_per_block) * u64::from(spp);
        let logical_slots = ((data_slots as f64) * (1.0 - cfg.overprovision)).floor() as u64;
        let mut precond_slots = ((logical_slots as f64) * cfg.precondition).floor() as u64;
        precond_slots -= precond_slots % u64::from(spp);
        Ok(Self {
            units,
            channels: g.channels,
            dies_per_channel: g.dies_per_channel,
            bpp: g.blocks_per_plane,
            ppb: g.pages_per_block,
            spp,
            data_blocks,
            logical_slots,
            precond_slots,
        })
    }

    /// A layout with nothing preconditioned, for mapping tests.
    pub fn unmapped() -> Self {
        Self {
            units: 1,
            channels: 1,
            dies_per_channel: 1,
            bpp: 4,
            ppb: 4,
            spp: 4,
            data_blocks: 2,
            logical_slots: u64::from(u32::MAX - 1),
            precond_slots: 0,
        }
    }

    pub fn page_gid(&self, unit: u32, block: u32, page: u32) -> u32 {
        (unit * self.bpp + block) * self.ppb + page
    }

    pub fn split_gid(&self, gid: u32) -> (u32, u32, u32) {
        let page = gid % self.ppb;
        let b = gid / self.ppb;
        (b / self.bpp, b % self.bpp, page)
    }

    pub fn block_key(&self, gid: u32) -> u32 {
        gid / self.ppb
    }

    pub fn addr(&self, gid: u32) -> FlashAddr {
        let (unit, block, page) = self.split_gid(gid);
        FlashAddr {
            channel: unit % self.channels,
            die: (unit / self.channels) % self.dies_per_channel,
            plane: unit / (self.channels * self.dies_per_channel),
            block,
            page,
        }
    }

    /// Initial mapping entry of `lpn`.
    pub fn entry(&self, lpn: u64) -> u32 {
        if lpn >= self.precond_slots {
            return UNMAPPED;
        }
        let spp = u64::from(self.spp);
        let k = lpn / spp;
        let unit = (k % u64::from(self.units)) as u32;
        let q = k / u64::from(self.units);
        let block = (q / u64::from(self.ppb)) as u32;
        let page = (q % u64::from(self.ppb)) as u32;
        self.page_gid(unit, block, page) * self.spp + (lpn % spp) as u32
    }

    /// Inverse of [`Layout::entry`] over preconditioned slots.
    pub fn precond_lpn(&self, slot: u32) -> Option<u64> {
        let (unit, block, page) = self.split_gid(slot / self.spp);
        if block >= self.data_blocks {
            return None;
        }
        let q = u64::from(block) * u64::from(self.ppb) + u64::from(page);
        let k = q * u64::from(self.units) + u64::from(unit);
        let lpn = k * u64::from(self.spp) + u64::from(slot % self.spp);
        (lpn < self.precond_slots).then_some(lpn)
    }

    /// Preconditioned pages held by `unit`.
    fn precond_pages(&self, unit: u32) -> u64 {
        let pages = self.precond_slots / u64::from(self.spp);
        let u = u64::from(unit);
        let n = u64::from(self.units);
        if pages > u {
            (pages - u).div_ceil(n)
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FtlStats {
    pub host_slots: u64,
    pub gc_slots: u64,
    pub padded_slots: u64,
    pub gc_runs: u64,
    pub blocks_erased: u64,
    pub map_reads: u64,
    pub map_writes: u64,
}

impl FtlStats {
    pub fn write_amplification(&self) -> f64 {
        if self.host_slots == 0 {
            return 1.0;
        }
        (self.host_slots + self.gc_slots + self.padded_slots) as f64 / self.host_slots as f64
    }
}

#[derive(Debug, Clone, Copy)]
struct Active {
    block: u32,
    next_page: u32,
}

#[derive(Debug)]
struct Unit {
    free: VecDeque<u32>,
    host: Option<Active>,
    gc: Option<Active>,
    map_ring: u64,
}

#[derive(Debug, Clone, Copy)]
struct OpenPage {
    gid: u32,
    filled: u32,
}

/// Where a read finds the slot's data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadSource {
    Unmapped,
    Buffer,
    Flash(FlashAddr),
}

/// Result of accepting one 4 KB write slice into the buffer.
#[derive(Debug, Default)]
pub struct WriteOutcome {
    pub slot: u32,
    /// Program of the page this slice sealed.
    pub sealed: Option<(u32, FlashCompletion)>,
    pub map: MapEffects,
    /// Latest completion among GC and map-page flash work triggered here.
    pub background_until: Time,
}

pub struct Ftl {
    pub layout: Layout,
    cfg: FtlConfig,
    pub flash: FlashBackbone,
    pub map: MappingState,
    units: Vec<Unit>,
    cursor: u64,
    valid: Vec<u32>,
    /// Blocks with pages sealed into the buffer but not yet programmed.
    pending: HashMap<u32, u32>,
    unprogrammed: HashMap<u32, u32>,
    rev: HashMap<u32, u64>,
    tokens: HashMap<u32, u64>,
    map_loc: HashMap<u32, u32>,
    open: Option<OpenPage>,
    buffer_used: u32,
    stats: FtlStats,
}

impl std::fmt::Debug for Ftl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ftl")
            .field("layout", &self.layout)
            .field("stats", &self.stats)
            .finish()
    }
}

impl Ftl {
    pub fn new(
        geom: FlashGeometry,
        timing: crate::flash::FlashTiming,
        cfg: FtlConfig,
        map_frames: usize,
        frames_per_segment: u32,
    ) -> Result<Self> {
        timing.validate()?;
        let layout = Layout::new(&geom, &cfg)?;
        let mut valid = vec![0u32; (layout.units * layout.bpp) as usize];
        let mut units = Vec::with_capacity(layout.units as usize);
        let slots_per_block = layout.ppb * layout.spp;
        for u in 0..layout.units {
            let pages = layout.precond_pages(u);
            let full = (pages / u64::from(layout.ppb)) as u32;
            let partial = (pages % u64::from(layout.ppb)) as u32;
            for b in 0..full {
                valid[(u * layout.bpp + b) as usize] = slots_per_block;
            }
            let mut used = full;
            if partial > 0 {
                // A partly preconditioned block is closed; its tail is never written.
                valid[(u * layout.bpp + full) as usize] = partial * layout.spp;
                used += 1;
            }
            units.push(Unit {
                free: (used..layout.data_blocks).collect(),
                host: None,
                gc: None,
                map_ring: 0,
            });
        }
        Ok(Self {
            layout,
            cfg,
            flash: FlashBackbone::new(geom, timing),
            map: MappingState::new(layout, map_frames, frames_per_segment),
            units,
            cursor: 0,
            valid,
            pending: HashMap::new(),
            unprogrammed: HashMap::new(),
            rev: HashMap::new(),
            tokens: HashMap::new(),
            map_loc: HashMap::new(),
            open: None,
            buffer_used: 0,
            stats: FtlStats::default(),
        })
    }

    pub fn stats(&self) -> FtlStats {
        self.stats
    }

    pub fn config(&self) -> &FtlConfig {
        &self.cfg
    }

    pub fn logical_slots(&self) -> u64 {
        self.layout.logical_slots
    }

    pub fn buffer_free(&self) -> u32 {
        self.cfg.write_buffer_slots.saturating_sub(self.buffer_used)
    }

    pub fn buffer_used(&self) -> u32 {
        self.buffer_used
    }

    pub fn check_lpn(&self, lpn: u64) -> Result<()> {
        if lpn >= self.layout.logical_slots {
            return Err(SimError::LpnOutOfRange {
                lpn,
                capacity: self.layout.logical_slots,
            });
        }
        Ok(())
    }

    /// Payload token currently stored for `lpn` (0 when never written).
    pub fn token_of(&self, lpn: u64) -> u64 {
        let slot = self.map.value(lpn);
        if slot == UNMAPPED {
            return 0;
        }
        self.slot_token(slot)
    }

    fn slot_token(&self, slot: u32) -> u64 {
        match self.tokens.get(&slot) {
            Some(&t) => t,
            None => self.layout.precond_lpn(slot).map_or(0, |l| l | PRECOND_TOKEN),
        }
    }

    fn slot_lpn(&self, slot: u32) -> Option<u64> {
        self.rev.get(&slot).copied().or_else(|| self.layout.precond_lpn(slot))
    }

    pub fn read_source(&self, lpn: u64) -> ReadSource {
        let slot = self.map.value(lpn);
        if slot == UNMAPPED {
            return ReadSource::Unmapped;
        }
        let gid = slot / self.layout.spp;
        if self.unprogrammed.contains_key(&gid) {
            ReadSource::Buffer
        } else {
            ReadSource::Flash(self.layout.addr(gid))
        }
    }

    /// Flash location of the persisted copy of mapping page `mpage`.
    pub fn map_page_addr(&self, mpage: u32) -> FlashAddr {
        if let Some(&gid) = self.map_loc.get(&mpage) {
            return self.layout.addr(gid);
        }
        let l = &self.layout;
        let unit = mpage % l.units;
        let pos = mpage / l.units;
        let r = l.bpp - l.data_blocks;
        let block = l.data_blocks + (pos / l.ppb) % r;
        l.addr(l.page_gid(unit, block, pos % l.ppb))
    }

    /// Read a mapping page on a cache miss. Returns the completion time.
    pub fn read_map_page(&mut self, mpage: u32, at: Time) -> Result<Time> {
        self.stats.map_reads += 1;
        let addr = self.map_page_addr(mpage);
        Ok(self.flash.submit(FlashOp::read(addr), at)?.complete_time)
    }

    /// Write back mapping pages into the map-region ring.
    pub fn write_map_pages(&mut self, pages: &[u32], at: Time) -> Result<Time> {
        let mut done = at;
        let l = self.layout;
        let r = u64::from(l.bpp - l.data_blocks);
        let ring = r * u64::from(l.ppb);
        for &mp in pages {
            let unit = (self.stats.map_writes % u64::from(l.units)) as u32;
            self.stats.map_writes += 1;
            let pos = self.units[unit as usize].map_ring;
            self.units[unit as usize].map_ring += 1;
            let block = l.data_blocks + ((pos % ring) / u64::from(l.ppb)) as u32;
            let page = (pos % u64::from(l.ppb)) as u32;
            if page == 0 && pos >= ring {
                let e = self
                    .flash
                    .submit(FlashOp::erase(l.addr(l.page_gid(unit, block, 0))), at)?;
                done = done.max(e.complete_time);
            }
            let gid = l.page_gid(unit, block, page);
            let c = self.flash.submit(FlashOp::program(l.addr(gid)), at)?;
            done = done.max(c.complete_time);
            self.map_loc.insert(mp, gid);
        }
        Ok(done)
    }

    fn take_free_block(&mut self, unit: u32, now: Time, bg: &mut Time) -> Result<u32> {
        let data = self.layout.data_blocks as f64;
        let low = (data * self.cfg.gc_low).ceil().max(1.0) as usize;
        if self.units[unit as usize].free.len() <= low {
            self.garbage_collect(unit, now, bg)?;
        }
        self.units[unit as usize].free.pop_front().ok_or(SimError::DeviceFull)
    }

    fn next_host_page(&mut self, now: Time, bg: &mut Time) -> Result<u32> {
        let unit = (self.cursor % u64::from(self.layout.units)) as u32;
        self.cursor += 1;
        let need_block = match self.units[unit as usize].host {
            Some(a) => a.next_page >= self.layout.ppb,
            None => true,
        };
        if need_block {
            let b = self.take_free_block(unit, now, bg)?;
            self.units[unit as usize].host = Some(Active { block: b, next_page: 0 });
        }
        let a = self.units[unit as usize].host.as_mut().expect("active block");
        let gid = self.layout.page_gid(unit, a.block, a.next_page);
        a.next_page += 1;
        Ok(gid)
    }

    fn invalidate(&mut self, slot: u32) {
        if slot == UNMAPPED {
            return;
        }
        let b = self.layout.block_key(slot / self.layout.spp) as usize;
        self.valid[b] = self.valid[b].saturating_sub(1);
    }

    /// Accept one 4 KB slice into the write buffer. The caller checks
    /// [`Ftl::buffer_free`] first.
    pub fn write_slice(&mut self, lpn: u64, token: u64, now: Time) -> Result<WriteOutcome> {
        self.check_lpn(lpn)?;
        debug_assert!(self.buffer_free() > 0, "write buffer overrun");
        let mut bg = now;
        let open = match self.open {
            Some(o) => o,
            None => {
                let gid = self.next_host_page(now, &mut bg)?;
                *self.pending.entry(self.layout.block_key(gid)).or_insert(0) += 1;
                self.unprogrammed.insert(gid, 0);
                OpenPage { gid, filled: 0 }
            }
        };
        let slot = open.gid * self.layout.spp + open.filled;
        self.buffer_used += 1;
        *self.unprogrammed.get_mut(&open.gid).expect("open page tracked") += 1;
        self.invalidate(self.map.value(lpn));
        self.valid[self.layout.block_key(open.gid) as usize] += 1;
        self.rev.insert(slot, lpn);
        self.tokens.insert(slot, token);
        self.stats.host_slots += 1;
        let mut out = WriteOutcome {
            slot,
            ..Default::default()
        };
        out.map = self.map.update(lpn, slot)?;
        let filled = open.filled + 1;
        if filled == self.layout.spp {
            self.open = None;
            let c = self.flash.submit(FlashOp::program(self.layout.addr(open.gid)), now)?;
            out.sealed = Some((open.gid, c));
        } else {
            self.open = Some(OpenPage { gid: open.gid, filled });
        }
        if !out.map.flushed.is_empty() {
            let pages = out.map.flushed.clone();
            bg = bg.max(self.write_map_pages(&pages, now)?);
        }
        out.background_until = bg;
        Ok(out)
    }

    /// Pad and program a partially filled open page.
    pub fn flush_open(&mut self, now: Time) -> Result<Option<(u32, FlashCompletion)>> {
        let Some(o) = self.open.take() else {
            return Ok(None);
        };
        self.stats.padded_slots += u64::from(self.layout.spp - o.filled);
        let c = self.flash.submit(FlashOp::program(self.layout.addr(o.gid)), now)?;
        Ok(Some((o.gid, c)))
    }

    /// The program of `gid` finished: release its buffer slots.
    pub fn program_done(&mut self, gid: u32) {
        if let Some(n) = self.unprogrammed.remove(&gid) {
            self.buffer_used -= n;
            let b = self.layout.block_key(gid);
            let p = self.pending.get_mut(&b).expect("pending block");
            *p -= 1;
            if *p == 0 {
                self.pending.remove(&b);
            }
        }
    }

    /// Greedy GC inside one unit until the high watermark is reached or
    /// the best victim is fully valid.
    fn garbage_collect(&mut self, unit: u32, now: Time, bg: &mut Time) -> Result<()> {
        let l = self.layout;
        let high = (f64::from(l.data_blocks) * self.cfg.gc_high).ceil().max(2.0) as usize;
        let full = l.ppb * l.spp;
        while self.units[unit as usize].free.len() < high {
            let u = &self.units[unit as usize];
            let free: BTreeSet<u32> = u.free.iter().copied().collect();
            let skip = [u.host.map(|a| a.block), u.gc.map(|a| a.block)];
            let victim = (0..l.data_blocks)
                .filter(|b| !free.contains(b) && !skip.contains(&Some(*b)))
                .filter(|&b| !self.pending.contains_key(&(unit * l.bpp + b)))
                .min_by_key(|&b| (self.valid[(unit * l.bpp + b) as usize], b));
            let Some(victim) = victim else { break };
            let vkey = (unit * l.bpp + victim) as usize;
            if self.valid[vkey] >= full {
                break;
            }
            self.stats.gc_runs += 1;
            let mut touched_map = BTreeSet::new();
            for page in 0..l.ppb {
                let gid = l.page_gid(unit, victim, page);
                let mut live = Vec::new();
                for s in 0..l.spp {
                    let slot = gid * l.spp + s;
                    if let Some(lpn) = self.slot_lpn(slot) {
                        if self.map.value(lpn) == slot {
                            live.push((slot, lpn));
                        }
                    }
                }
                if live.is_empty() {
                    continue;
                }
                let r = self.flash.submit(FlashOp::read(l.addr(gid)), now)?;
                *bg = (*bg).max(r.complete_time);
                for (slot, lpn) in live {
                    let dst = self.gc_slot(unit, now, bg)?;
                    let token = self.slot_token(slot);
                    self.tokens.insert(dst, token);
                    self.rev.insert(dst, lpn);
                    self.valid[l.block_key(dst / l.spp) as usize] += 1;
                    self.valid[vkey] -= 1;
                    let fx = self.map.update(lpn, dst)?;
                    touched_map.extend(fx.flushed);
                    self.stats.gc_slots += 1;
                }
            }
            self.erase_block(unit, victim, now, bg)?;
            if !touched_map.is_empty() {
                let pages: Vec<u32> = touched_map.into_iter().collect();
                *bg = (*bg).max(self.write_map_pages(&pages, now)?);
            }
        }
        Ok(())
    }

    fn erase_block(&mut self, unit: u32, block: u32, now: Time, bg: &mut Time) -> Result<()> {
        let l = self.layout;
        for page in 0..l.ppb {
            let gid = l.page_gid(unit, block, page);
            for s in 0..l.spp {
                let slot = gid * l.spp + s;
                self.tokens.remove(&slot);
                self.rev.remove(&slot);
            }
        }
        self.valid[(unit * l.bpp + block) as usize] = 0;
        let e = self
            .flash
            .submit(FlashOp::erase(l.addr(l.page_gid(unit, block, 0))), now)?;
        *bg = (*bg).max(e.complete_time);
        self.stats.blocks_erased += 1;
        self.units[unit as usize].free.push_back(block);
        Ok(())
    }

    /// Next relocation slot in `unit`'s GC block; programs full pages.
    fn gc_slot(&mut self, unit: u32, now: Time, bg: &mut Time) -> Result<u32> {
        let l = self.layout;
        let slots = l.ppb * l.spp;
        let need = match self.units[unit as usize].gc {
            Some(a) => a.next_page >= slots,
            None => true,
        };
        if need {
            // GC draws from the reserve below the low watermark.
            let b = self.units[unit as usize].free.pop_front().ok_or(SimError::DeviceFull)?;
            self.units[unit as usize].gc = Some(Active { block: b, next_page: 0 });
        }
        let a = self.units[unit as usize].gc.as_mut().expect("gc block");
        // `next_page` counts slots for the GC block.
        let idx = a.next_page;
        a.next_page += 1;
        let gid = l.page_gid(unit, a.block, idx / l.spp);
        if idx % l.spp == l.spp - 1 {
            let c = self.flash.submit(FlashOp::program(l.addr(gid)), now)?;
            *bg = (*bg).max(c.complete_time);
        }
        Ok(gid * l.spp + idx % l.spp)
    }

    /// Valid-slot count of every data block equals the number of LPNs whose
    /// live mapping points into it. Expensive; for tests.
    pub fn check_valid_counts(&self, lpns: impl Iterator<Item = u64>) -> std::result::Result<(), String> {
        let mut counts = vec![0u32; self.valid.len()];
        for lpn in lpns {
            let s = self.map.value(lpn);
            if s != UNMAPPED {
                counts[self.layout.block_key(s / self.layout.spp) as usize] += 1;
            }
        }
        for (i, (&a, &b)) in self.valid.iter().zip(&counts).enumerate() {
            if a != b {
                return Err(format!("block {i}: valid {a}, live {b}"));
            }
        }
        Ok(())
    }

    pub fn map_page_count(&self) -> u32 {
        map_page_of(self.layout.logical_slots - 1) + 1
    }

    pub fn entries_per_map_page(&self) -> u32 {
        ENTRIES_PER_MAP_PAGE
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flash::FlashTiming;

    fn tiny() -> FlashGeometry {
        FlashGeometry {
            channels: 2,
            dies_per_channel: 1,
            planes_per_die: 1,
            blocks_per_plane: 16,
            pages_per_block: 4,
            page_size: 16_384,
            channel_rate_mts: 2400,
        }
    }

    fn ftl(precond: f64) -> Ftl {
        let cfg = FtlConfig {
            precondition: precond,
            write_buffer_slots: 64,
            ..Default::default()
        };
        Ftl::new(tiny(), FlashTiming::default(), cfg, 1 << 20, 128).unwrap()
    }

    fn drain(f: &mut Ftl, out: &WriteOutcome) {
        if let Some((gid, _)) = out.sealed {
            f.program_done(gid);
        }
    }

    #[test]
    fn layout_roundtrip() {
        let g = FlashGeometry::default();
        let l = Layout::new(&g, &FtlConfig::default()).unwrap();
        for lpn in [0u64, 1, 3, 4, 1023, 1 << 20, l.precond_slots - 1] {
            let s = l.entry(lpn);
            assert_eq!(l.precond_lpn(s), Some(lpn));
        }
        assert_eq!(l.entry(l.precond_slots), UNMAPPED);
        // consecutive pages stripe across channels first
        assert_eq!(l.addr(l.entry(0) / 4).channel, 0);
        assert_eq!(l.addr(l.entry(4) / 4).channel, 1);
    }

    #[test]
    fn overprovisioning_hides_seven_percent() {
        let f = ftl(0.0);
        let data = 2 * 14 * 4 * 4;
        assert_eq!(f.logical_slots(), (data as f64 * 0.93).floor() as u64);
    }

    #[test]
    fn read_your_writes_and_buffer_hits() {
        let mut f = ftl(0.0);
        let o = f.write_slice(5, 77, 0).unwrap();
        assert_eq!(f.token_of(5), 77);
        assert_eq!(f.read_source(5), ReadSource::Buffer);
        assert!(o.sealed.is_none());
        for l in 6..9 {
            let o = f.write_slice(l, 100 + l, 0).unwrap();
            drain(&mut f, &o);
        }
        assert!(matches!(f.read_source(5), ReadSource::Flash(_)));
        assert_eq!(f.token_of(8), 108);
        assert_eq!(f.read_source(100), ReadSource::Unmapped);
        assert_eq!(f.token_of(100), 0);
    }

    #[test]
    fn preconditioned_tokens() {
        let f = ftl(0.5);
        assert_eq!(f.token_of(0), PRECOND_TOKEN);
        assert_eq!(f.token_of(9), 9 | PRECOND_TOKEN);
    }

    #[test]
    fn random_overwrites_trigger_gc_and_keep_data() {
        use rand::{Rng, SeedableRng};
        let mut f = ftl(0.8);
        let n = f.logical_slots() * 8 / 10;
        let mut oracle: HashMap<u64, u64> = (0..f.layout.precond_slots).map(|l| (l, l | PRECOND_TOKEN)).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut t = 0;
        for i in 0..4000u64 {
            let lpn = rng.random_range(0..n);
            let o = f.write_slice(lpn, i + 1, t).unwrap();
            drain(&mut f, &o);
            oracle.insert(lpn, i + 1);
            t += 1000;
        }
        assert!(f.stats().gc_runs > 0);
        assert!(f.stats().write_amplification() > 1.0);
        for (&l, &tok) in &oracle {
            assert_eq!(f.token_of(l), tok, "lpn {l}");
        }
        f.check_valid_counts(0..f.logical_slots()).unwrap();
    }

    #[test]
    fn gc_of_fully_invalid_block_only_erases() {
        let mut f = ftl(0.0);
        // Rewrite the same 4 lpns until a block has gone fully stale.
        let mut t = 0;
        for i in 0..1600u64 {
            let o = f.write_slice(i % 4, i, t).unwrap();
            drain(&mut f, &o);
            t += 1000;
        }
        let s = f.stats();
        assert!(s.blocks_erased > 0);
        assert_eq!(s.gc_slots, 0);
    }

    #[test]
    fn out_of_range_lpn() {
        let mut f = ftl(0.0);
        let cap = f.logical_slots();
        assert!(matches!(f.write_slice(cap, 1, 0), Err(SimError::LpnOutOfRange { .. })));
    }

    #[test]
    fn full_device_reports_device_full() {
        let cfg = FtlConfig {
            overprovision: 0.0,
            precondition: 0.0,
            write_buffer_slots: 64,
            ..Default::default()
        };
        let mut f = Ftl::new(tiny(), FlashTiming::default(), cfg, 1 << 20, 128).unwrap();
        let cap = f.logical_slots();
        let mut err = None;
        for i in 0..cap * 3 {
            match f.write_slice(i % cap, i + 1, i * 1000) {
                Ok(o) => drain(&mut f, &o),
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        assert_eq!(err, Some(SimError::DeviceFull));
    }
}
