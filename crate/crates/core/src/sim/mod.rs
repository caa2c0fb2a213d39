//! The JBOF simulator: host, SSDs, fabric and harvesting control wired to the
//! event kernel.

mod control;
mod failure;
mod io;
mod report;

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::config::{DeviceParams, ScenarioConfig, Variant, WorkloadSource, SEGMENT_BYTES};
use crate::engine::{Actor, Engine, Time, NS_PER_MS, NS_PER_US};
use crate::error::{Result, SimError};
use crate::fabric::{Fabric, RegionKind};
use crate::flash::FlashAddr;
use crate::ftl::{Ftl, PRECOND_TOKEN};
use crate::harvest::descriptor::DescriptorTable;
use crate::harvest::mrc::Shards;
use crate::host::{QpKind, QueuePair, Wrr};
use crate::mapping::{MapStats, MAP_PAGE_BYTES};
use crate::metrics::{HarvestEvent, IntegrityReport, LatencyBreakdown, Report, WindowSample};
use crate::ssd::{CorePool, FifoServer, FirmwareCostModel};
use crate::workload::{self, Microbench, OffsetGen, Op, TraceRecord, SLICE};

pub use failure::RecoveryCheck;

pub type CmdId = u64;

/// Largest command the host driver issues; bigger requests are split.
pub const MAX_SLICES: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    StreamStart { stream: usize },
    Arrive { stream: usize },
    SqArrive { cmd: CmdId, attempt: u32 },
    CoreFree { proc: usize, core: usize, epoch: u32 },
    MapReadDone { dev: u16, mpage: u32, epoch: u32 },
    DmaDone { cmd: CmdId, attempt: u32 },
    ProgramDone { dev: u16, gid: u32, epoch: u32 },
    CqArrive { cmd: CmdId, attempt: u32 },
    Window,
    HostTick,
    Fail { dev: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum JobKind {
    HostSubmit,
    HostComplete,
    Start,
    Resume,
    WriteUpdate,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Job {
    kind: JobKind,
    cmd: CmdId,
    attempt: u32,
}

/// What a core does when its current job ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Post {
    Submitted {
        cmd: CmdId,
        attempt: u32,
    },
    HostDone {
        cmd: CmdId,
        attempt: u32,
    },
    MapReads {
        cmd: CmdId,
        attempt: u32,
    },
    IssueReads {
        cmd: CmdId,
        attempt: u32,
    },
    WriteDma {
        cmd: CmdId,
        attempt: u32,
    },
    Cq {
        cmd: CmdId,
        attempt: u32,
    },
    /// Waiting for a lock; the job continues on grant.
    Spin {
        job: Job,
        base: Time,
    },
    Noop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CmdKind {
    Host,
    /// Copy of a redirected extent back to its home device.
    CopyRead {
        home: u16,
        home_lpn: u64,
    },
    CopyWrite {
        lender: u16,
        lender_lpn: u64,
    },
}

#[derive(Debug, Clone)]
struct Cmd {
    kind: CmdKind,
    op: Op,
    /// Device and LPN the host addressed; the logical identity of the data.
    home: u16,
    home_lpn: u64,
    /// Device holding the data (differs from `home` for redirected extents).
    data_dev: u16,
    lpn: u64,
    slices: u32,
    token: u64,
    arrive: Time,
    exec: usize,
    attempt: u32,
    stream: Option<usize>,
    parent: Option<CmdId>,
    children: u32,
    bd: LatencyBreakdown,
    misses: Vec<u32>,
    pending_maps: u32,
    park_t: Time,
    locks: Vec<u64>,
    lock_idx: usize,
    held: Vec<u64>,
    lock_ns: (u64, u64),
    flash_reads: Vec<FlashAddr>,
    buf_reserved: bool,
    redirected: bool,
    spin: Option<(usize, usize)>,
    failed: bool,
}

impl Cmd {
    fn bytes(&self) -> u64 {
        u64::from(self.slices) * SLICE
    }

    fn reset_for_retry(&mut self) {
        self.attempt += 1;
        self.misses.clear();
        self.pending_maps = 0;
        self.locks.clear();
        self.lock_idx = 0;
        self.held.clear();
        self.flash_reads.clear();
        self.spin = None;
    }
}

struct Proc {
    pool: CorePool<Job>,
    running: Vec<Option<Post>>,
    qps: Vec<QueuePair>,
    wrr: Wrr,
    fw: FirmwareCostModel,
    epoch: u32,
    /// Index of the first shadow queue pair.
    shadow_base: usize,
    util: f64,
    own_util: f64,
}

#[derive(Debug, Clone, Default)]
struct DevMetrics {
    commands: u64,
    errors: u64,
    redirected: u64,
    bytes_read: u64,
    bytes_written: u64,
    copyback_bytes: u64,
    lat: Vec<u64>,
    rlat: Vec<u64>,
    wlat: Vec<u64>,
    bd: LatencyBreakdown,
    busy_ns: u64,
    own_busy_ns: u64,
    flash_util_sum: f64,
    windows: u64,
    map_at_warmup: Option<MapStats>,
    host_slots_at_warmup: u64,
}

struct Device {
    id: u16,
    ftl: Ftl,
    params: DeviceParams,
    alive: bool,
    detected: bool,
    epoch: u32,
    dma_read: FifoServer,
    dma_write: FifoServer,
    agent: FifoServer,
    map_inflight: HashMap<u32, Vec<(CmdId, u32)>>,
    buf_reserved: u32,
    buf_waiters: VecDeque<(CmdId, u32)>,
    region_base: u64,
    table: DescriptorTable,
    shards: Shards,
    segments_total: u32,
    /// Segment indices lent out, by borrower.
    lent: BTreeMap<u16, Vec<u32>>,
    proc_desc: Option<usize>,
    dram_desc: Option<usize>,
    /// Segments currently offered through `dram_desc`.
    dram_offer: u32,
    desc_window: u64,
    strikes: u32,
    tick_completions: u64,
    win_bytes: u64,
    win_map: MapStats,
    flash_util: f64,
    above: u32,
    p_redirect: f64,
    series: Vec<WindowSample>,
    m: DevMetrics,
    workload: String,
}

impl Device {
    /// Usable as far as the rest of the system knows.
    fn alive_view(&self) -> bool {
        self.alive && !self.detected
    }

    fn local_segments(&self) -> u32 {
        self.segments_total - self.lent.values().map(|v| v.len() as u32).sum::<u32>()
    }

    fn borrowed_segments(&self) -> u32 {
        self.ftl.map.segments().count() as u32
    }
}

enum Gen {
    Closed { mb: Microbench, offs: OffsetGen },
    Open { records: Vec<TraceRecord>, next: usize },
    Idle,
}

struct Stream {
    dev: u16,
    gen: Gen,
    start: Time,
    stop: Time,
    rng_name: String,
}

#[derive(Debug, Clone)]
struct ProcSession {
    borrower: u16,
    lender: u16,
    slot: usize,
    shadow: usize,
    ratio: f64,
    p: f64,
}

#[derive(Debug, Clone, Default)]
struct VhGroup {
    members: Vec<u16>,
    rr: usize,
}

/// Independent model of what every logical page should contain.
#[derive(Debug, Default)]
struct Oracle {
    /// Latest token per physical (device, lpn).
    tokens: HashMap<(u16, u64), u64>,
    /// Latest token per host-visible (device, lpn).
    logical: HashMap<(u16, u64), u64>,
    precond_slots: u64,
}

impl Oracle {
    fn expected(&self, dev: u16, lpn: u64) -> u64 {
        match self.tokens.get(&(dev, lpn)) {
            Some(&t) => t,
            None if lpn < self.precond_slots => lpn | PRECOND_TOKEN,
            None => 0,
        }
    }
}

pub struct Sim {
    cfg: ScenarioConfig,
    n: usize,
    eng: Engine<Ev>,
    devs: Vec<Device>,
    procs: Vec<Proc>,
    fabric: Fabric,
    cmds: HashMap<CmdId, Cmd>,
    next_cmd: CmdId,
    completed: Vec<bool>,
    streams: Vec<Stream>,
    oracle: Oracle,
    sessions: Vec<ProcSession>,
    vh_groups: BTreeMap<u16, VhGroup>,
    /// Redirected extents: (home, home lpn) -> (lender, lender lpn, window written).
    extents: BTreeMap<(u16, u64), (u16, u64, u64)>,
    vh_cursor: Vec<u64>,
    vh_copies: Vec<u32>,
    copy_queue: Vec<control::CopyQueue>,
    window_idx: u64,
    timeline: Vec<HarvestEvent>,
    integrity: IntegrityReport,
    recovery_checks: Vec<RecoveryCheck>,
    token_seq: u64,
    end: Time,
    warmup: Time,
    host_busy_ns: u64,
    host_windows: u64,
    /// Stop at the first integrity violation.
    pub strict: bool,
    draining: bool,
}

impl std::fmt::Debug for Sim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sim")
            .field("variant", &self.cfg.variant)
            .field("now", &self.eng.now())
            .finish()
    }
}

const HOST_PROC_QP_WEIGHT: u32 = 1;

impl Sim {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.ssd_count as usize;
        let mut eng = Engine::new(cfg.seed);
        if cfg.event_trace {
            eng.enable_trace();
        }
        let fps = (SEGMENT_BYTES / MAP_PAGE_BYTES) as u32;
        let mut fabric = Fabric::new(cfg.fabric, n);
        let mut devs = Vec::with_capacity(n);
        let mut procs = Vec::with_capacity(n + 1);
        let ssd_fw = FirmwareCostModel::new(cfg.ssd.firmware, cfg.ssd.frequency_hz, 1.0);
        let host_fw = FirmwareCostModel::new(cfg.ssd.firmware, cfg.host.frequency_hz, cfg.host.oc_overhead);
        let harvest_proc = cfg.variant.harvests_processor();
        for id in 0..n {
            let params = cfg.device(id as u16);
            let segments_total = (params.dram_bytes / SEGMENT_BYTES) as u32;
            let frames = segments_total as usize * fps as usize;
            let mut ftl = Ftl::new(cfg.flash, cfg.timing, cfg.ftl, frames, fps)?;
            if cfg.ssd.prewarm_map {
                let pages = (ftl.map_page_count() as usize).min(frames);
                for mp in 0..pages as u32 {
                    ftl.map.install(mp);
                }
            }
            let region_base = fabric.register(id as u8, params.dram_bytes, RegionKind::LendableSegment);
            fabric.register(
                id as u8,
                16 * crate::harvest::descriptor::TABLE_SLOTS as u64,
                RegionKind::DescriptorTable,
            );
            devs.push(Device {
                id: id as u16,
                ftl,
                params,
                alive: true,
                detected: false,
                epoch: 0,
                dma_read: FifoServer::default(),
                dma_write: FifoServer::default(),
                agent: FifoServer::default(),
                map_inflight: HashMap::new(),
                buf_reserved: 0,
                buf_waiters: VecDeque::new(),
                region_base,
                table: DescriptorTable::default(),
                shards: Shards::new(cfg.harvest.shards_rate),
                segments_total,
                lent: BTreeMap::new(),
                proc_desc: None,
                dram_desc: None,
                dram_offer: 0,
                desc_window: 0,
                strikes: 0,
                tick_completions: 0,
                win_bytes: 0,
                win_map: MapStats::default(),
                flash_util: 0.0,
                above: 0,
                p_redirect: 0.0,
                series: Vec::new(),
                m: DevMetrics::default(),
                workload: "idle".into(),
            });
            let cores = if cfg.variant.firmware_on_host() {
                0
            } else {
                params.cores as usize
            };
            let mut qps: Vec<QueuePair> = (0..cfg.ssd.normal_qps)
                .map(|_| QueuePair::new(QpKind::Normal, cfg.harvest.normal_weight, cfg.ssd.sq_depth))
                .collect();
            let shadow_base = qps.len();
            if harvest_proc {
                for _ in 0..cfg.harvest.shadow_qps {
                    qps.push(QueuePair::new(
                        QpKind::Shadow { borrower: None },
                        cfg.harvest.shadow_weight,
                        cfg.ssd.sq_depth,
                    ));
                }
            }
            procs.push(Proc {
                pool: CorePool::new(cores),
                running: vec![None; cores],
                qps,
                wrr: Wrr::default(),
                fw: ssd_fw,
                epoch: 0,
                shadow_base,
                util: 0.0,
                own_util: 0.0,
            });
        }
        let host_cores = cfg.host.cores as usize;
        let host_qps = if cfg.variant.firmware_on_host() {
            (0..n)
                .map(|_| QueuePair::new(QpKind::Normal, HOST_PROC_QP_WEIGHT, cfg.ssd.sq_depth))
                .collect()
        } else {
            Vec::new()
        };
        procs.push(Proc {
            pool: CorePool::new(host_cores),
            running: vec![None; host_cores],
            qps: host_qps,
            wrr: Wrr::default(),
            fw: host_fw,
            epoch: 0,
            shadow_base: usize::MAX,
            util: 0.0,
            own_util: 0.0,
        });
        let precond_slots = devs[0].ftl.layout.precond_slots;
        let logical = devs[0].ftl.logical_slots();
        let end = cfg.duration_ns();
        let warmup = cfg.warmup_ns();
        let mut sim = Sim {
            n,
            eng,
            devs,
            procs,
            fabric,
            cmds: HashMap::new(),
            next_cmd: 0,
            completed: Vec::new(),
            streams: Vec::new(),
            oracle: Oracle {
                precond_slots,
                ..Default::default()
            },
            sessions: Vec::new(),
            vh_groups: BTreeMap::new(),
            extents: BTreeMap::new(),
            vh_cursor: vec![logical - logical / 8; n],
            vh_copies: vec![0; n],
            copy_queue: vec![Default::default(); n],
            window_idx: 0,
            timeline: Vec::new(),
            integrity: IntegrityReport::default(),
            recovery_checks: Vec::new(),
            token_seq: 0,
            end,
            warmup,
            host_busy_ns: 0,
            host_windows: 0,
            strict: false,
            draining: false,
            cfg,
        };
        sim.bind_workloads()?;
        let win = sim.cfg.window_ns();
        sim.eng.schedule_at(win.min(end), Actor::Host, Ev::Window);
        let tick = (sim.cfg.harvest.timeout_ms * NS_PER_MS as f64).round() as Time;
        sim.eng.schedule_at(tick.max(1), Actor::Host, Ev::HostTick);
        let fails: Vec<(u16, f64)> = sim.cfg.failures.iter().map(|f| (f.device, f.at_ms)).collect();
        for (dev, at_ms) in fails {
            let at = (at_ms * NS_PER_MS as f64).round() as Time;
            sim.eng.schedule_at(at, Actor::Ssd(dev as u8), Ev::Fail { dev });
        }
        Ok(sim)
    }

    fn bind_workloads(&mut self) -> Result<()> {
        let logical_bytes = self.devs[0].ftl.logical_slots() * SLICE;
        let limit = if self.cfg.variant.virtual_groups() {
            logical_bytes - logical_bytes / 8
        } else {
            logical_bytes
        };
        let bindings = self.cfg.workloads.clone();
        for (bi, b) in bindings.iter().enumerate() {
            let start = (b.start_ms * NS_PER_MS as f64).round() as Time;
            let stop = b
                .stop_ms
                .map_or(self.end, |s| ((s * NS_PER_MS as f64).round() as Time).min(self.end));
            let trace = match &b.source {
                WorkloadSource::Trace { path } => {
                    let t = workload::load_trace(std::path::Path::new(path))?;
                    if t.malformed > 0 {
                        log::warn!("trace {path}: skipped {} malformed rows", t.malformed);
                    }
                    Some(t.records)
                }
                _ => None,
            };
            for &dev in &b.devices {
                let rng_name = format!("workload/{bi}/{dev}");
                let (gen, label, footprint) = match &b.source {
                    WorkloadSource::Micro(mb) => {
                        let label = format!("micro-{:?}-{}k-{}", mb.op, mb.size / 1024, mb.iodepth).to_lowercase();
                        (
                            Gen::Closed {
                                mb: *mb,
                                offs: mb.offsets(0),
                            },
                            label,
                            mb.footprint_bytes,
                        )
                    }
                    WorkloadSource::Synthetic(p) => {
                        let dur_us = (stop.saturating_sub(start)) as f64 / NS_PER_US as f64;
                        let recs = workload::generate(p, dev, dur_us, self.eng.rng().stream(&rng_name));
                        (
                            Gen::Open { records: recs, next: 0 },
                            "synthetic".into(),
                            p.footprint_bytes,
                        )
                    }
                    WorkloadSource::Named {
                        name,
                        footprint_bytes,
                        iops,
                    } => {
                        let p = workload::named_profile(name, *footprint_bytes, *iops)
                            .ok_or_else(|| SimError::Config(format!("unknown profile {name}")))?;
                        let dur_us = (stop.saturating_sub(start)) as f64 / NS_PER_US as f64;
                        let recs = workload::generate(&p, dev, dur_us, self.eng.rng().stream(&rng_name));
                        (Gen::Open { records: recs, next: 0 }, name.clone(), *footprint_bytes)
                    }
                    WorkloadSource::Trace { path } => {
                        let recs: Vec<TraceRecord> = trace
                            .as_ref()
                            .expect("loaded")
                            .iter()
                            .filter(|r| r.device_id == dev)
                            .cloned()
                            .collect();
                        let fp = recs.iter().map(|r| r.offset + r.size).max().unwrap_or(0);
                        (Gen::Open { records: recs, next: 0 }, format!("trace:{path}"), fp)
                    }
                    WorkloadSource::Idle => (Gen::Idle, "idle".into(), 0),
                };
                if footprint > limit {
                    return Err(SimError::Config(format!(
                        "workloads[{bi}]: footprint {footprint} B exceeds usable capacity {limit} B of device {dev}"
                    )));
                }
                self.devs[dev as usize].workload = label;
                let si = self.streams.len();
                self.streams.push(Stream {
                    dev,
                    gen,
                    start,
                    stop,
                    rng_name,
                });
                self.eng.schedule_at(
                    start.min(self.end),
                    Actor::Workload(dev),
                    Ev::StreamStart { stream: si },
                );
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn now(&self) -> Time {
        self.eng.now()
    }

    /// Run to the configured end and build the report.
    pub fn run(mut self) -> Result<Report> {
        let end = self.end;
        self.run_until(end)?;
        self.into_report()
    }

    /// Dispatch events up to `t`.
    pub fn run_until(&mut self, t: Time) -> Result<()> {
        let t = t.min(self.end);
        while let Some(ev) = self.eng.pop_until(t) {
            self.dispatch(ev.payload)?;
            if self.strict && self.integrity.violations > 0 {
                return Err(SimError::Config(format!(
                    "integrity violation: {}",
                    self.integrity.first_violation.clone().unwrap_or_default()
                )));
            }
        }
        self.eng.finish_at(t);
        Ok(())
    }

    pub fn event_trace(&self) -> Option<&[String]> {
        self.eng.trace()
    }

    fn dispatch(&mut self, ev: Ev) -> Result<()> {
        match ev {
            Ev::StreamStart { stream } => self.stream_start(stream),
            Ev::Arrive { stream } => self.stream_arrive(stream),
            Ev::SqArrive { cmd, attempt } => self.sq_arrive(cmd, attempt),
            Ev::CoreFree { proc, core, epoch } => {
                if epoch == self.procs[proc].epoch {
                    self.core_free(proc, core)?;
                }
                Ok(())
            }
            Ev::MapReadDone { dev, mpage, epoch } => self.map_read_done(dev, mpage, epoch),
            Ev::DmaDone { cmd, attempt } => self.dma_done(cmd, attempt),
            Ev::ProgramDone { dev, gid, epoch } => {
                let d = &mut self.devs[dev as usize];
                if d.epoch == epoch {
                    d.ftl.program_done(gid);
                    self.drain_buffer_waiters(dev)?;
                }
                Ok(())
            }
            Ev::CqArrive { cmd, attempt } => {
                if self.valid(cmd, attempt) {
                    let h = self.n;
                    self.procs[h].pool.ready.push_back(Job {
                        kind: JobKind::HostComplete,
                        cmd,
                        attempt,
                    });
                    self.kick(h)?;
                }
                Ok(())
            }
            Ev::Window => self.window(),
            Ev::HostTick => self.host_tick(),
            Ev::Fail { dev } => self.fail_device(dev),
        }
    }

    fn valid(&self, id: CmdId, attempt: u32) -> bool {
        self.cmds.get(&id).is_some_and(|c| c.attempt == attempt)
    }

    // ---- workload streams ----

    fn stream_start(&mut self, si: usize) -> Result<()> {
        let s = &self.streams[si];
        if !self.devs[s.dev as usize].alive || s.start >= s.stop {
            return Ok(());
        }
        match &s.gen {
            Gen::Closed { mb, .. } => {
                for _ in 0..mb.iodepth {
                    self.issue_closed(si)?;
                }
            }
            Gen::Open { records, next } => {
                if let Some(r) = records.get(*next) {
                    let at = s.start + (r.timestamp_us * NS_PER_US as f64).round() as Time;
                    if at < s.stop {
                        self.eng.schedule_at(
                            at.max(self.eng.now()),
                            Actor::Workload(s.dev),
                            Ev::Arrive { stream: si },
                        );
                    }
                }
            }
            Gen::Idle => {}
        }
        Ok(())
    }

    fn issue_closed(&mut self, si: usize) -> Result<()> {
        let now = self.eng.now();
        let (dev, op, size, offset) = {
            let s = &mut self.streams[si];
            if now >= s.stop || !self.devs[s.dev as usize].alive || self.devs[s.dev as usize].detected {
                return Ok(());
            }
            let Gen::Closed { mb, offs } = &mut s.gen else {
                return Ok(());
            };
            let rng = self.eng.rng().stream(&s.rng_name);
            let off = offs.next(rng, mb.size);
            (s.dev, mb.op, mb.size, off)
        };
        self.host_issue(Some(si), dev, op, offset, size)
    }

    fn stream_arrive(&mut self, si: usize) -> Result<()> {
        let (dev, rec, next_at) = {
            let s = &mut self.streams[si];
            let Gen::Open { records, next } = &mut s.gen else {
                return Ok(());
            };
            let rec = records[*next];
            *next += 1;
            let next_at = records
                .get(*next)
                .map(|r| s.start + (r.timestamp_us * NS_PER_US as f64).round() as Time);
            (s.dev, rec, next_at)
        };
        if let Some(at) = next_at {
            if at < self.streams[si].stop {
                self.eng
                    .schedule_at(at.max(self.eng.now()), Actor::Workload(dev), Ev::Arrive { stream: si });
            }
        }
        if self.devs[dev as usize].detected {
            return Ok(());
        }
        self.host_issue(Some(si), dev, rec.op, rec.offset, rec.size)
    }

    /// Create a host command (split at the transfer-size limit) and hand it
    /// to the host submission path.
    fn host_issue(&mut self, stream: Option<usize>, dev: u16, op: Op, offset: u64, size: u64) -> Result<()> {
        let logical = self.devs[dev as usize].ftl.logical_slots();
        let first = (offset / SLICE) % logical;
        let slices = size.div_ceil(SLICE).max(1).min(logical - first) as u32;
        let now = self.eng.now();
        let id = self.new_cmd(CmdKind::Host, op, dev, first, slices, stream, None, now);
        if slices > MAX_SLICES {
            let mut children = 0;
            let mut at = 0;
            while at < slices {
                let k = (slices - at).min(MAX_SLICES);
                let c = self.new_cmd(CmdKind::Host, op, dev, first + u64::from(at), k, None, Some(id), now);
                self.submit_host(c)?;
                children += 1;
                at += k;
            }
            self.cmds.get_mut(&id).expect("parent").children = children;
            return Ok(());
        }
        self.submit_host(id)
    }

    #[allow(clippy::too_many_arguments)]
    fn new_cmd(
        &mut self,
        kind: CmdKind,
        op: Op,
        home: u16,
        lpn: u64,
        slices: u32,
        stream: Option<usize>,
        parent: Option<CmdId>,
        now: Time,
    ) -> CmdId {
        let id = self.next_cmd;
        self.next_cmd += 1;
        self.completed.push(false);
        let token = if op == Op::Write {
            let t = self.token_seq + 1;
            self.token_seq += u64::from(slices);
            t
        } else {
            0
        };
        self.cmds.insert(
            id,
            Cmd {
                kind,
                op,
                home,
                home_lpn: lpn,
                data_dev: home,
                lpn,
                slices,
                token,
                arrive: now,
                exec: home as usize,
                attempt: 0,
                stream,
                parent,
                children: 0,
                bd: LatencyBreakdown::default(),
                misses: Vec::new(),
                pending_maps: 0,
                park_t: now,
                locks: Vec::new(),
                lock_idx: 0,
                held: Vec::new(),
                lock_ns: (0, 0),
                flash_reads: Vec::new(),
                buf_reserved: false,
                redirected: false,
                spin: None,
                failed: false,
            },
        );
        id
    }

    fn submit_host(&mut self, id: CmdId) -> Result<()> {
        let h = self.n;
        let attempt = self.cmds[&id].attempt;
        self.procs[h].pool.ready.push_back(Job {
            kind: JobKind::HostSubmit,
            cmd: id,
            attempt,
        });
        self.kick(h)
    }

    /// The command reaches an SQ on its executing processor.
    fn sq_arrive(&mut self, id: CmdId, attempt: u32) -> Result<()> {
        if !self.valid(id, attempt) {
            return Ok(());
        }
        let c = &self.cmds[&id];
        let (exec, data_dev, redirected, home) = (c.exec, c.data_dev, c.redirected, c.home);
        if exec < self.n && !self.devs[exec].alive {
            // Lost with the device; the host timeout recovers it.
            return Ok(());
        }
        let p = &mut self.procs[exec];
        let q = if exec == self.n {
            data_dev as usize
        } else if redirected {
            let s = self
                .sessions
                .iter()
                .find(|s| s.borrower == home && s.lender as usize == exec);
            match s {
                Some(s) => s.shadow,
                None => p.shadow_base.min(p.qps.len() - 1),
            }
        } else {
            (id % p.shadow_base.min(p.qps.len()).max(1) as u64) as usize
        };
        p.qps[q].sq.push_back(id);
        self.kick(exec)
    }

    /// Start jobs on every idle core that has work.
    fn kick(&mut self, p: usize) -> Result<()> {
        if p < self.n && !self.devs[p].alive {
            return Ok(());
        }
        loop {
            let Some(core) = self.procs[p].pool.idle_core() else {
                return Ok(());
            };
            let job = {
                let pr = &mut self.procs[p];
                if let Some(j) = pr.pool.ready.pop_front() {
                    j
                } else if let Some((_, id)) = pr.wrr.fetch(&mut pr.qps) {
                    let attempt = self.cmds.get(&id).map_or(u32::MAX, |c| c.attempt);
                    Job {
                        kind: JobKind::Start,
                        cmd: id,
                        attempt,
                    }
                } else {
                    return Ok(());
                }
            };
            if !self.valid(job.cmd, job.attempt) {
                continue;
            }
            let own = p == self.n || self.cmds[&job.cmd].home as usize == p;
            self.procs[p].pool.start(core, self.eng.now(), own);
            self.run_job(p, core, job)?;
        }
    }

    /// Occupy `core` for `dur` and remember what to do afterwards.
    fn occupy(&mut self, p: usize, core: usize, dur: Time, post: Post) {
        self.procs[p].running[core] = Some(post);
        let epoch = self.procs[p].epoch;
        let target = if p == self.n { Actor::Host } else { Actor::Ssd(p as u8) };
        self.eng.schedule(dur, target, Ev::CoreFree { proc: p, core, epoch });
    }

    fn core_free(&mut self, p: usize, core: usize) -> Result<()> {
        let now = self.eng.now();
        self.procs[p].pool.finish(core, now);
        if let Some(post) = self.procs[p].running[core].take() {
            self.post(post)?;
        }
        self.kick(p)
    }

    /// Finalize a command at the host.
    fn finish_cmd(&mut self, id: CmdId) -> Result<()> {
        if self.completed[id as usize] {
            self.integrity.duplicate_completions += 1;
            return Ok(());
        }
        self.completed[id as usize] = true;
        let Some(c) = self.cmds.remove(&id) else {
            return Ok(());
        };
        let now = self.eng.now();
        for &l in &c.held {
            self.release_lock(l, c.exec, id)?;
        }
        if c.exec < self.n {
            self.devs[c.exec].tick_completions += 1;
        }
        self.devs[c.data_dev as usize].tick_completions += 1;
        if let Some(pid) = c.parent {
            let done = {
                let p = self.cmds.get_mut(&pid).expect("parent outstanding");
                p.children -= 1;
                p.failed |= c.failed;
                p.bd.add(&c.bd);
                p.children == 0
            };
            if done {
                return self.finish_cmd(pid);
            }
            return Ok(());
        }
        match c.kind {
            CmdKind::Host => {}
            CmdKind::CopyRead { home, home_lpn } => {
                if c.failed {
                    self.vh_copies[home as usize] = self.vh_copies[home as usize].saturating_sub(1);
                    return self.launch_copies(home);
                }
                return self.copy_read_done(&c, home, home_lpn);
            }
            CmdKind::CopyWrite { .. } => {
                self.vh_copies[c.home as usize] = self.vh_copies[c.home as usize].saturating_sub(1);
                return self.launch_copies(c.home);
            }
        }
        let dev = c.home as usize;
        if now >= self.warmup {
            let m = &mut self.devs[dev].m;
            if c.failed {
                m.errors += 1;
            } else {
                m.commands += 1;
                if c.redirected {
                    m.redirected += 1;
                }
                match c.op {
                    Op::Read => m.bytes_read += c.bytes(),
                    Op::Write => m.bytes_written += c.bytes(),
                }
                if c.arrive >= self.warmup {
                    let lat = now - c.arrive;
                    m.lat.push(lat);
                    match c.op {
                        Op::Read => m.rlat.push(lat),
                        Op::Write => m.wlat.push(lat),
                    }
                    let mut bd = c.bd;
                    bd.queueing = lat.saturating_sub(bd.service());
                    m.bd.add(&bd);
                }
            }
        }
        if !c.failed {
            self.devs[dev].win_bytes += c.bytes();
        }
        if let Some(si) = c.stream {
            if matches!(self.streams[si].gen, Gen::Closed { .. }) {
                self.issue_closed(si)?;
            }
        }
        Ok(())
    }

    /// Record an integrity violation.
    fn violation(&mut self, msg: String) {
        self.integrity.violations += 1;
        if self.integrity.first_violation.is_none() {
            log::error!("{msg}");
            self.integrity.first_violation = Some(msg);
        }
    }

    fn timeline_event(&mut self, kind: &str, borrower: u16, lender: u16, amount: u64) {
        self.timeline.push(HarvestEvent {
            t_ns: self.eng.now(),
            kind: kind.into(),
            borrower,
            lender,
            amount,
        });
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }
}

/// Run a scenario to completion.
pub fn run(cfg: ScenarioConfig) -> Result<Report> {
    Sim::new(cfg)?.run()
}

#[cfg(test)]
mod tests;
