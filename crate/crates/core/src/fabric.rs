//! CXL fabric as a flat global memory space: registered regions owned by
//! devices, per-device link bandwidth, round-trip latency, coherent 8-byte
//! words with compare-and-swap, and FIFO reader-writer locks.
//!
//! Coherence is serialized access at the owner. Dispatch is single
//! threaded, so every access to an address already has a total order.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::engine::Time;
use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FabricConfig {
    /// Bytes per second per device link.
    pub link_bandwidth: f64,
    pub round_trip_ns: Time,
    pub flit_bytes: u64,
    /// Latency of an access that stays in the requester's own DRAM.
    pub local_dram_ns: Time,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self {
            link_bandwidth: 16e9,
            round_trip_ns: 400,
            flit_bytes: 256,
            local_dram_ns: 80,
        }
    }
}

impl FabricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.link_bandwidth > 0.0) || self.round_trip_ns == 0 || self.flit_bytes == 0 {
            return Err(SimError::Config(
                "fabric bandwidth, latency and flit size must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Serialization time of `len` bytes, rounded up to whole flits.
    pub fn serialize_ns(&self, len: u64) -> Time {
        let bytes = len.div_ceil(self.flit_bytes).max(1) * self.flit_bytes;
        (bytes as f64 * 1e9 / self.link_bandwidth).ceil() as Time
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RegionKind {
    DescriptorTable,
    MessageQueue,
    LendableSegment,
    LogPage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GfamRegion {
    pub owner: u8,
    pub base: u64,
    pub len: u64,
    pub kind: RegionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LockMode {
    Read,
    Write,
}

/// Lock holder: device plus a requester-chosen tag (e.g. command id).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Holder {
    pub device: u8,
    pub tag: u64,
}

#[derive(Debug, Default)]
struct RwState {
    readers: BTreeSet<Holder>,
    writer: Option<Holder>,
    queue: VecDeque<(Holder, LockMode)>,
}

impl RwState {
    fn compatible(&self, mode: LockMode) -> bool {
        match mode {
            LockMode::Read => self.writer.is_none(),
            LockMode::Write => self.writer.is_none() && self.readers.is_empty(),
        }
    }

    fn grant(&mut self, h: Holder, mode: LockMode) {
        match mode {
            LockMode::Read => {
                self.readers.insert(h);
            }
            LockMode::Write => self.writer = Some(h),
        }
    }

    /// Grant from the head of the queue while compatible (FIFO, no barging).
    fn promote(&mut self) -> Vec<Holder> {
        let mut out = Vec::new();
        while let Some(&(h, m)) = self.queue.front() {
            if !self.compatible(m) {
                break;
            }
            self.queue.pop_front();
            self.grant(h, m);
            out.push(h);
        }
        out
    }

    fn holds(&self, h: &Holder) -> bool {
        self.writer.as_ref() == Some(h) || self.readers.contains(h)
    }
}

/// One entry of the lock history, for exclusion checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockEvent {
    pub lock: u64,
    pub holder: Holder,
    pub mode: LockMode,
    pub granted: bool,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LinkStats {
    pub bytes: u64,
    pub busy_ns: u64,
    pub accesses: u64,
}

#[derive(Debug)]
pub struct Fabric {
    cfg: FabricConfig,
    regions: BTreeMap<u64, GfamRegion>,
    next_base: u64,
    words: HashMap<u64, u64>,
    link_free: Vec<Time>,
    links: Vec<LinkStats>,
    failed: Vec<bool>,
    locks: BTreeMap<u64, RwState>,
    modes: HashMap<(u64, Holder), LockMode>,
    history: Option<Vec<LockEvent>>,
}

impl Fabric {
    pub fn new(cfg: FabricConfig, devices: usize) -> Self {
        Self {
            cfg,
            regions: BTreeMap::new(),
            next_base: 0x1000,
            words: HashMap::new(),
            link_free: vec![0; devices],
            links: vec![LinkStats::default(); devices],
            failed: vec![false; devices],
            locks: BTreeMap::new(),
            modes: HashMap::new(),
            history: None,
        }
    }

    pub fn config(&self) -> &FabricConfig {
        &self.cfg
    }

    pub fn record_lock_history(&mut self) {
        self.history = Some(Vec::new());
    }

    pub fn lock_history(&self) -> &[LockEvent] {
        self.history.as_deref().unwrap_or(&[])
    }

    pub fn link_stats(&self) -> &[LinkStats] {
        &self.links
    }

    pub fn set_failed(&mut self, dev: u8, failed: bool) {
        self.failed[dev as usize] = failed;
    }

    pub fn is_failed(&self, dev: u8) -> bool {
        self.failed[dev as usize]
    }

    /// Register a region at the next free address (4 KB aligned).
    pub fn register(&mut self, owner: u8, len: u64, kind: RegionKind) -> u64 {
        let base = self.next_base;
        self.next_base = (base + len.max(1)).next_multiple_of(4096);
        self.regions.insert(base, GfamRegion { owner, base, len, kind });
        base
    }

    /// Register a region at a caller-chosen base.
    pub fn register_at(&mut self, owner: u8, base: u64, len: u64, kind: RegionKind) -> Result<()> {
        let end = base + len;
        if let Some((_, r)) = self.regions.range(..end).next_back() {
            if r.base + r.len > base {
                return Err(SimError::RegionOverlap(base));
            }
        }
        self.regions.insert(base, GfamRegion { owner, base, len, kind });
        self.next_base = self.next_base.max(end.next_multiple_of(4096));
        Ok(())
    }

    pub fn unregister(&mut self, base: u64) -> Option<GfamRegion> {
        let r = self.regions.remove(&base)?;
        let keys: Vec<u64> = self
            .words
            .keys()
            .copied()
            .filter(|&a| a >= r.base && a < r.base + r.len)
            .collect();
        for k in keys {
            self.words.remove(&k);
        }
        Some(r)
    }

    pub fn region_of(&self, addr: u64) -> Result<GfamRegion> {
        match self.regions.range(..=addr).next_back() {
            Some((_, r)) if addr < r.base + r.len => Ok(*r),
            _ => Err(SimError::FabricFault(addr)),
        }
    }

    /// Completion time of moving `len` bytes between `requester` and the
    /// owner of `addr`, starting at `now`.
    pub fn access(&mut self, requester: u8, addr: u64, len: u64, now: Time) -> Result<Time> {
        let r = self.region_of(addr)?;
        if r.owner == requester {
            return Ok(now + self.cfg.local_dram_ns);
        }
        if self.failed[r.owner as usize] {
            return Err(SimError::DeviceFailed(r.owner));
        }
        Ok(self.transfer(requester, r.owner, len, now))
    }

    /// Reserve both links for a bulk transfer; returns completion time.
    pub fn transfer(&mut self, a: u8, b: u8, len: u64, now: Time) -> Time {
        let ser = self.cfg.serialize_ns(len);
        let (ia, ib) = (a as usize, b as usize);
        let start = now.max(self.link_free[ia]).max(self.link_free[ib]);
        let end = start + ser;
        for i in [ia, ib] {
            self.link_free[i] = end;
            let l = &mut self.links[i];
            l.bytes += len;
            l.busy_ns += ser;
            l.accesses += 1;
        }
        end + self.cfg.round_trip_ns
    }

    /// Small message sent at a future time `at`. Counted on both links but
    /// not queued, so it cannot hold back earlier traffic.
    pub fn notify(&mut self, a: u8, b: u8, len: u64, at: Time) -> Time {
        let ser = self.cfg.serialize_ns(len);
        for i in [a as usize, b as usize] {
            let l = &mut self.links[i];
            l.bytes += len;
            l.busy_ns += ser;
            l.accesses += 1;
        }
        at + ser + self.cfg.round_trip_ns
    }

    fn check_word(&self, addr: u64) -> Result<GfamRegion> {
        if !addr.is_multiple_of(8) {
            return Err(SimError::Misaligned(addr));
        }
        self.region_of(addr)
    }

    pub fn load(&self, addr: u64) -> Result<u64> {
        self.check_word(addr)?;
        Ok(self.words.get(&addr).copied().unwrap_or(0))
    }

    pub fn store(&mut self, addr: u64, v: u64) -> Result<()> {
        self.check_word(addr)?;
        self.words.insert(addr, v);
        Ok(())
    }

    /// Atomic compare-and-swap of the 8-byte word at `addr`.
    pub fn cas(&mut self, addr: u64, expected: u64, new: u64) -> Result<bool> {
        let r = self.check_word(addr)?;
        if self.failed[r.owner as usize] {
            return Err(SimError::DeviceFailed(r.owner));
        }
        let cur = self.words.get(&addr).copied().unwrap_or(0);
        if cur != expected {
            return Ok(false);
        }
        self.words.insert(addr, new);
        Ok(true)
    }

    /// Extra latency of a lock operation: one round trip when the lock
    /// lives on another device.
    pub fn lock_op_ns(&self, requester: u8, owner: u8) -> Time {
        if requester == owner {
            self.cfg.local_dram_ns
        } else {
            self.cfg.round_trip_ns
        }
    }

    /// Request `lock` in `mode`. Returns true when granted immediately;
    /// otherwise the holder waits in FIFO order.
    pub fn lock(&mut self, lock: u64, holder: Holder, mode: LockMode) -> bool {
        let st = self.locks.entry(lock).or_default();
        assert!(!st.holds(&holder), "{holder:?} re-acquires lock {lock}");
        self.modes.insert((lock, holder), mode);
        let granted = st.queue.is_empty() && st.compatible(mode);
        if granted {
            st.grant(holder, mode);
        } else {
            st.queue.push_back((holder, mode));
        }
        if let Some(h) = self.history.as_mut() {
            h.push(LockEvent {
                lock,
                holder,
                mode,
                granted,
            });
        }
        granted
    }

    /// Release `lock`; returns holders granted as a result.
    pub fn unlock(&mut self, lock: u64, holder: Holder) -> Result<Vec<Holder>> {
        let st = self.locks.get_mut(&lock).ok_or(SimError::NotHeld(holder.device))?;
        if st.writer == Some(holder) {
            st.writer = None;
        } else if !st.readers.remove(&holder) {
            return Err(SimError::NotHeld(holder.device));
        }
        let mode = self.modes.remove(&(lock, holder)).unwrap_or(LockMode::Read);
        let granted = st.promote();
        if let Some(h) = self.history.as_mut() {
            h.push(LockEvent {
                lock,
                holder,
                mode,
                granted: false,
            });
            for &g in &granted {
                let m = self.modes.get(&(lock, g)).copied().unwrap_or(LockMode::Read);
                h.push(LockEvent {
                    lock,
                    holder: g,
                    mode: m,
                    granted: true,
                });
            }
        }
        let empty = st.writer.is_none() && st.readers.is_empty() && st.queue.is_empty();
        if empty {
            self.locks.remove(&lock);
        }
        Ok(granted)
    }

    /// Drop every hold and queued request of a failed device. Returns the
    /// `(lock, holder)` pairs granted as a consequence.
    pub fn release_device(&mut self, dev: u8) -> Vec<(u64, Holder)> {
        let mut out = Vec::new();
        let ids: Vec<u64> = self.locks.keys().copied().collect();
        for id in ids {
            let st = self.locks.get_mut(&id).expect("lock");
            st.queue.retain(|(h, _)| h.device != dev);
            st.readers.retain(|h| h.device != dev);
            if st.writer.is_some_and(|h| h.device == dev) {
                st.writer = None;
            }
            for g in st.promote() {
                out.push((id, g));
            }
            if st.writer.is_none() && st.readers.is_empty() && st.queue.is_empty() {
                self.locks.remove(&id);
            }
        }
        self.modes.retain(|(_, h), _| h.device != dev);
        out
    }

    pub fn holds(&self, lock: u64, holder: Holder) -> bool {
        self.locks.get(&lock).is_some_and(|s| s.holds(&holder))
    }

    pub fn waiting(&self, lock: u64) -> usize {
        self.locks.get(&lock).map_or(0, |s| s.queue.len())
    }
}

/// Replay a lock history and confirm writers never overlap anything.
pub fn check_exclusion(events: &[LockEvent]) -> std::result::Result<(), String> {
    let mut held: BTreeMap<u64, (BTreeSet<Holder>, Option<Holder>)> = BTreeMap::new();
    let mut pending: BTreeSet<(u64, Holder)> = BTreeSet::new();
    for e in events {
        let st = held.entry(e.lock).or_default();
        let is_grant = e.granted;
        let releasing = !is_grant && (st.0.contains(&e.holder) || st.1 == Some(e.holder));
        if releasing {
            st.0.remove(&e.holder);
            if st.1 == Some(e.holder) {
                st.1 = None;
            }
            continue;
        }
        if !is_grant {
            pending.insert((e.lock, e.holder));
            continue;
        }
        pending.remove(&(e.lock, e.holder));
        match e.mode {
            LockMode::Read => {
                if st.1.is_some() {
                    return Err(format!("reader {:?} granted under writer on lock {}", e.holder, e.lock));
                }
                st.0.insert(e.holder);
            }
            LockMode::Write => {
                if st.1.is_some() || !st.0.is_empty() {
                    return Err(format!("writer {:?} overlaps on lock {}", e.holder, e.lock));
                }
                st.1 = Some(e.holder);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(d: u8, t: u64) -> Holder {
        Holder { device: d, tag: t }
    }

    #[test]
    fn small_read_costs_round_trip_plus_one_flit() {
        let mut f = Fabric::new(FabricConfig::default(), 2);
        let base = f.register(1, 4096, RegionKind::LendableSegment);
        let t = f.access(0, base, 64, 0).unwrap();
        assert_eq!(t, 400 + 16);
    }

    #[test]
    fn own_region_is_local() {
        let mut f = Fabric::new(FabricConfig::default(), 2);
        let base = f.register(0, 4096, RegionKind::LendableSegment);
        assert_eq!(f.access(0, base, 64, 1000).unwrap(), 1080);
    }

    #[test]
    fn segment_flush_bound_by_bandwidth() {
        let mut f = Fabric::new(FabricConfig::default(), 2);
        let base = f.register(1, 2 << 20, RegionKind::LendableSegment);
        let t = f.access(0, base, 2 << 20, 0).unwrap();
        assert!(t >= 131_072, "{t}");
    }

    #[test]
    fn unregistered_and_misaligned() {
        let mut f = Fabric::new(FabricConfig::default(), 2);
        assert_eq!(f.access(0, 0x10, 8, 0), Err(SimError::FabricFault(0x10)));
        let base = f.register(1, 64, RegionKind::DescriptorTable);
        assert_eq!(f.cas(base + 4, 0, 1), Err(SimError::Misaligned(base + 4)));
    }

    #[test]
    fn overlapping_registration_rejected() {
        let mut f = Fabric::new(FabricConfig::default(), 2);
        f.register_at(0, 0x10_0000, 4096, RegionKind::LogPage).unwrap();
        assert!(f.register_at(1, 0x10_0800, 4096, RegionKind::LogPage).is_err());
        f.register_at(1, 0x10_1000, 4096, RegionKind::LogPage).unwrap();
    }

    #[test]
    fn cas_single_winner() {
        let mut f = Fabric::new(FabricConfig::default(), 4);
        let a = f.register(0, 64, RegionKind::DescriptorTable);
        f.store(a, 0xFF).unwrap();
        assert!(f.cas(a, 0xFF, 1).unwrap());
        assert!(!f.cas(a, 0xFF, 2).unwrap());
        assert_eq!(f.load(a).unwrap(), 1);
    }

    #[test]
    fn fifo_reader_waits_behind_writer() {
        let mut f = Fabric::new(FabricConfig::default(), 3);
        assert!(f.lock(7, h(0, 1), LockMode::Read));
        assert!(!f.lock(7, h(1, 2), LockMode::Write));
        assert!(!f.lock(7, h(2, 3), LockMode::Read));
        assert_eq!(f.unlock(7, h(0, 1)).unwrap(), vec![h(1, 2)]);
        assert_eq!(f.unlock(7, h(1, 2)).unwrap(), vec![h(2, 3)]);
        assert!(f.holds(7, h(2, 3)));
    }

    #[test]
    fn double_unlock_rejected() {
        let mut f = Fabric::new(FabricConfig::default(), 2);
        f.lock(1, h(0, 0), LockMode::Write);
        f.unlock(1, h(0, 0)).unwrap();
        assert_eq!(f.unlock(1, h(0, 0)), Err(SimError::NotHeld(0)));
    }

    #[test]
    fn failed_holder_released() {
        let mut f = Fabric::new(FabricConfig::default(), 2);
        f.lock(3, h(1, 9), LockMode::Write);
        f.lock(3, h(0, 1), LockMode::Read);
        let g = f.release_device(1);
        assert_eq!(g, vec![(3, h(0, 1))]);
    }

    #[test]
    fn uncontended_remote_acquire_is_one_round_trip() {
        let f = Fabric::new(FabricConfig::default(), 2);
        assert_eq!(f.lock_op_ns(0, 1), 400);
    }

    proptest::proptest! {
        #[test]
        fn random_lock_traffic_keeps_exclusion(ops in proptest::collection::vec((0u8..4, 0u64..2, proptest::bool::ANY, proptest::bool::ANY), 1..200)) {
            let mut f = Fabric::new(FabricConfig::default(), 4);
            f.record_lock_history();
            let mut live: Vec<(u64, Holder)> = Vec::new();
            for (i, (dev, lock, write, release)) in ops.into_iter().enumerate() {
                if release {
                    if let Some(pos) = live.iter().position(|&(l, hh)| f.holds(l, hh)) {
                        let (l, hh) = live.remove(pos);
                        f.unlock(l, hh).unwrap();
                        continue;
                    }
                }
                let hh = h(dev, i as u64);
                f.lock(lock, hh, if write { LockMode::Write } else { LockMode::Read });
                live.push((lock, hh));
            }
            proptest::prop_assert!(check_exclusion(f.lock_history()).is_ok());
        }
    }
}
