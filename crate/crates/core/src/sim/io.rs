//! Command lifecycle: firmware jobs, mapping misses, flash, DMA and locks.

use crate::engine::{Actor, Time};
use crate::error::{Result, SimError};
use crate::fabric::{Holder, LockMode};
use crate::flash::{FlashAddr, FlashOp};
use crate::ftl::ReadSource;
use crate::mapping::{map_page_of, MapEffects, Residency, MAP_PAGE_BYTES};
use crate::ssd::transfer_ns;
use crate::workload::Op;

use super::{CmdId, CmdKind, Ev, Job, JobKind, Post, Sim};

/// Map pages covered by one lock.
const LOCK_REGION_PAGES: u32 = 128;
const CTRL_BYTES: u64 = 64;

/// Time a job spends on DRAM and on the fabric, outside pure firmware work.
#[derive(Debug, Clone, Copy, Default)]
struct Parts {
    dram: Time,
    inter: Time,
}

impl Sim {
    pub(super) fn run_job(&mut self, p: usize, core: usize, job: Job) -> Result<()> {
        let id = job.cmd;
        match job.kind {
            JobKind::HostSubmit => {
                let mut dur = self.cfg.host.per_command_ns / 2;
                if self.route(id) {
                    dur += self.cfg.host.redirect_ns;
                }
                let c = self.cmds.get_mut(&id).expect("valid");
                c.bd.host += dur;
                self.occupy(
                    p,
                    core,
                    dur,
                    Post::Submitted {
                        cmd: id,
                        attempt: job.attempt,
                    },
                );
            }
            JobKind::HostComplete => {
                let dur = self.cfg.host.per_command_ns - self.cfg.host.per_command_ns / 2;
                self.cmds.get_mut(&id).expect("valid").bd.host += dur;
                self.occupy(
                    p,
                    core,
                    dur,
                    Post::HostDone {
                        cmd: id,
                        attempt: job.attempt,
                    },
                );
            }
            JobKind::Start => self.job_start(p, core, job)?,
            JobKind::Resume => self.job_translate(p, core, job, 0)?,
            JobKind::WriteUpdate => self.job_write_update(p, core, job)?,
            JobKind::Complete => {
                let dur = self.procs[p].fw.completion();
                self.account(id, dur, Parts::default());
                self.occupy(
                    p,
                    core,
                    dur,
                    Post::Cq {
                        cmd: id,
                        attempt: job.attempt,
                    },
                );
            }
        }
        Ok(())
    }

    fn account(&mut self, id: CmdId, dur: Time, parts: Parts) {
        let c = self.cmds.get_mut(&id).expect("valid");
        c.bd.dram += parts.dram;
        c.bd.inter_ssd += parts.inter;
        c.bd.processor += dur.saturating_sub(parts.dram + parts.inter);
    }

    fn map_pages(lpn: u64, slices: u32) -> Vec<u32> {
        let mut v: Vec<u32> = (lpn..lpn + u64::from(slices)).map(map_page_of).collect();
        v.dedup();
        v
    }

    fn job_start(&mut self, p: usize, core: usize, job: Job) -> Result<()> {
        let id = job.cmd;
        let (d, lpn, slices) = {
            let c = &self.cmds[&id];
            (c.data_dev as usize, c.lpn, c.slices)
        };
        let fw = self.procs[p].fw;
        let mut cost = fw.fetch_parse();
        let track = self.cfg.variant.harvests_dram();
        let mut misses = Vec::new();
        for mp in Self::map_pages(lpn, slices) {
            let r = self.devs[d].ftl.map.access(mp);
            if track {
                self.devs[d].shards.access(u64::from(mp));
            }
            match r {
                Residency::NotCached => misses.push(mp),
                Residency::Offsite { lender } if !self.devs[lender as usize].alive => {
                    self.detect_failure(lender as u16)?;
                    misses.push(mp);
                }
                _ => {}
            }
        }
        if !self.valid(id, job.attempt) {
            // Failure handling retired this attempt.
            return self.abandon_core(p, core);
        }
        if misses.is_empty() {
            return self.job_translate(p, core, job, cost);
        }
        cost += fw.flash_issue(misses.len() as u32);
        self.cmds.get_mut(&id).expect("valid").misses = misses;
        self.account(id, cost, Parts::default());
        self.occupy(
            p,
            core,
            cost,
            Post::MapReads {
                cmd: id,
                attempt: job.attempt,
            },
        );
        Ok(())
    }

    /// Free a core whose job vanished mid-flight.
    fn abandon_core(&mut self, p: usize, core: usize) -> Result<()> {
        self.occupy(p, core, 0, Post::Noop);
        Ok(())
    }

    /// Fabric address of a mapping page in a device's DRAM.
    fn dram_addr(&self, dev: usize, mpage: u32) -> u64 {
        let d = &self.devs[dev];
        let span = (d.params.dram_bytes / MAP_PAGE_BYTES).max(1);
        d.region_base + (u64::from(mpage) % span) * MAP_PAGE_BYTES
    }

    /// Cost of touching the mapping entries of `mpages` from `exec`.
    /// `Err(Some(x))` reports a failed lender that must be recovered first.
    fn entry_access(
        &mut self,
        exec: usize,
        d: usize,
        mpages: &[u32],
        miss_ok: bool,
    ) -> Result<std::result::Result<Parts, Option<u16>>> {
        let now = self.eng.now();
        let mut parts = Parts::default();
        let local = self.cfg.ssd.dram_latency_ns;
        for &mp in mpages {
            let owner = match self.devs[d].ftl.map.residency(mp) {
                Residency::Local => d,
                Residency::Offsite { lender } => lender as usize,
                Residency::NotCached if miss_ok => continue,
                Residency::NotCached => return Ok(Err(None)),
            };
            if exec == owner || exec >= self.n {
                parts.dram += local;
                continue;
            }
            let addr = self.dram_addr(owner, mp);
            match self.fabric.access(exec as u8, addr, CTRL_BYTES, now) {
                Ok(t) => parts.inter += t - now,
                Err(SimError::DeviceFailed(x)) => return Ok(Err(Some(u16::from(x)))),
                Err(e) => return Err(e),
            }
        }
        Ok(Ok(parts))
    }

    fn job_translate(&mut self, p: usize, core: usize, job: Job, base: Time) -> Result<()> {
        let id = job.cmd;
        let fw = self.procs[p].fw;
        let (op, d, lpn, slices) = {
            let c = &self.cmds[&id];
            (c.op, c.data_dev as usize, c.lpn, c.slices)
        };
        if op == Op::Write {
            let cost = base + fw.dma_issue(slices);
            self.account(id, cost, Parts::default());
            self.occupy(
                p,
                core,
                cost,
                Post::WriteDma {
                    cmd: id,
                    attempt: job.attempt,
                },
            );
            return Ok(());
        }
        if !self.acquire_locks(p, core, job, base, LockMode::Read)? {
            return Ok(());
        }
        let mpages = Self::map_pages(lpn, slices);
        let mut parts = match self.entry_access(p, d, &mpages, false)? {
            Ok(parts) => parts,
            Err(failed) => return self.restart(p, core, job, failed),
        };
        parts.inter += self.cmds[&id].lock_ns.1;
        parts.dram += self.cmds[&id].lock_ns.0;
        let mut ops: Vec<FlashAddr> = Vec::new();
        let check = matches!(self.cmds[&id].kind, CmdKind::Host | CmdKind::CopyRead { .. });
        for i in 0..u64::from(slices) {
            if check {
                let got = self.devs[d].ftl.token_of(lpn + i);
                let want = self.oracle.expected(d as u16, lpn + i);
                self.integrity.reads_checked += 1;
                if got != want {
                    let t = self.eng.now();
                    self.violation(format!(
                        "t={t} cmd {id}: device {d} lpn {} returned token {got:#x}, expected {want:#x}",
                        lpn + i
                    ));
                }
            }
            if let ReadSource::Flash(a) = self.devs[d].ftl.read_source(lpn + i) {
                if !ops.contains(&a) {
                    ops.push(a);
                }
            }
        }
        let cost = base
            + fw.translate(slices)
            + fw.dma_issue(slices)
            + fw.flash_issue(ops.len() as u32)
            + parts.dram
            + parts.inter;
        self.cmds.get_mut(&id).expect("valid").flash_reads = ops;
        self.account(id, cost, parts);
        self.occupy(
            p,
            core,
            cost,
            Post::IssueReads {
                cmd: id,
                attempt: job.attempt,
            },
        );
        Ok(())
    }

    /// Drop held locks and run the job again from the top, recovering a
    /// failed lender first when one was hit.
    fn restart(&mut self, p: usize, core: usize, job: Job, failed: Option<u16>) -> Result<()> {
        self.release_all(job.cmd)?;
        if let Some(x) = failed {
            self.detect_failure(x)?;
        }
        if !self.valid(job.cmd, job.attempt) {
            return self.abandon_core(p, core);
        }
        self.job_start(p, core, job)
    }

    fn job_write_update(&mut self, p: usize, core: usize, job: Job) -> Result<()> {
        let id = job.cmd;
        let fw = self.procs[p].fw;
        if !self.acquire_locks(p, core, job, 0, LockMode::Write)? {
            return Ok(());
        }
        let now = self.eng.now();
        let (d, lpn, slices, token, kind, home, home_lpn) = {
            let c = self.cmds.get_mut(&id).expect("valid");
            (
                c.data_dev as usize,
                c.lpn,
                c.slices,
                c.token,
                c.kind,
                c.home,
                c.home_lpn,
            )
        };
        if std::mem::take(&mut self.cmds.get_mut(&id).expect("valid").buf_reserved) {
            self.devs[d].buf_reserved -= slices;
        }
        let mpages = Self::map_pages(lpn, slices);
        let mut parts = match self.entry_access(p, d, &mpages, true)? {
            Ok(parts) => parts,
            Err(failed) => {
                self.release_all(id)?;
                if let Some(x) = failed {
                    self.detect_failure(x)?;
                }
                if !self.valid(id, job.attempt) {
                    return self.abandon_core(p, core);
                }
                return self.job_write_update(p, core, job);
            }
        };
        parts.inter += self.cmds[&id].lock_ns.1;
        parts.dram += self.cmds[&id].lock_ns.0;
        let mut sealed = 0;
        let mut failed_dev = None;
        let mut applied = 0;
        for i in 0..u64::from(slices) {
            if let CmdKind::CopyWrite { lender, lender_lpn } = kind {
                if !self.extent_current(home, home_lpn + i, lender, lender_lpn + i) {
                    continue;
                }
            }
            applied += 1;
            {
                let out = match self.devs[d].ftl.write_slice(lpn + i, token + i, now) {
                    Ok(o) => o,
                    Err(SimError::DeviceFull) => {
                        self.cmds.get_mut(&id).expect("valid").failed = true;
                        log::warn!("device {d} full at t={now}");
                        break;
                    }
                    Err(e) => return Err(e),
                };
                self.oracle.tokens.insert((d as u16, lpn + i), token + i);
                self.oracle.logical.insert((home, home_lpn + i), token + i);
                if d as u16 != home {
                    self.extents
                        .insert((home, home_lpn + i), (d as u16, lpn + i, self.window_idx));
                    self.note_extent(home, home_lpn + i, d as u16, lpn + i);
                } else {
                    self.extents.remove(&(home, home_lpn + i));
                }
                if let Some((gid, c)) = out.sealed {
                    sealed += 1;
                    let epoch = self.devs[d].epoch;
                    self.eng.schedule_at(
                        c.complete_time,
                        Actor::Ssd(d as u8),
                        Ev::ProgramDone {
                            dev: d as u16,
                            gid,
                            epoch,
                        },
                    );
                }
                if let Some(l) = out.map.offsite_write {
                    let addr = self.dram_addr(l as usize, map_page_of(lpn + i));
                    if p < self.n {
                        match self.fabric.access(p as u8, addr, CTRL_BYTES, now) {
                            Ok(t) => parts.inter += t - now + self.cfg.ssd.log_commit_ns,
                            Err(SimError::DeviceFailed(x)) => failed_dev = Some(u16::from(x)),
                            Err(e) => return Err(e),
                        }
                    }
                }
                if let Some(l) = out.map.demoted_to {
                    self.fabric.transfer(d as u8, l, MAP_PAGE_BYTES, now);
                }
            }
        }
        if let CmdKind::CopyWrite { .. } = kind {
            if applied == 0 {
                self.cmds.get_mut(&id).expect("valid").failed = true;
            } else if now >= self.warmup {
                self.devs[home as usize].m.copyback_bytes += applied * crate::workload::SLICE;
            }
        }
        let cost = fw.translate(slices) + fw.flash_issue(sealed) + fw.completion() + parts.dram + parts.inter;
        self.account(id, cost, parts);
        self.occupy(
            p,
            core,
            cost,
            Post::Cq {
                cmd: id,
                attempt: job.attempt,
            },
        );
        if let Some(x) = failed_dev {
            // The log commit went to a lender that is gone; recover now.
            self.detect_failure(x)?;
        }
        Ok(())
    }

    /// Turn a core's completed job into its follow-up.
    pub(super) fn post(&mut self, post: Post) -> Result<()> {
        let now = self.eng.now();
        let pcie = self.cfg.ssd.pcie_latency_ns;
        match post {
            Post::Noop | Post::Spin { .. } => {}
            Post::Submitted { cmd, attempt } => {
                if self.valid(cmd, attempt) {
                    self.cmds.get_mut(&cmd).expect("valid").bd.host_ssd += pcie;
                    self.eng.schedule(pcie, Actor::Host, Ev::SqArrive { cmd, attempt });
                }
            }
            Post::HostDone { cmd, attempt } => {
                if self.valid(cmd, attempt) {
                    self.finish_cmd(cmd)?;
                }
            }
            Post::MapReads { cmd, attempt } => {
                if self.valid(cmd, attempt) {
                    self.issue_map_reads(cmd, attempt)?;
                }
            }
            Post::IssueReads { cmd, attempt } => {
                if self.valid(cmd, attempt) {
                    self.release_all(cmd)?;
                    self.issue_reads(cmd, attempt)?;
                }
            }
            Post::WriteDma { cmd, attempt } => {
                if self.valid(cmd, attempt) {
                    self.write_dma(cmd, attempt)?;
                }
            }
            Post::Cq { cmd, attempt } => {
                if self.valid(cmd, attempt) {
                    self.release_all(cmd)?;
                    if self.cmds[&cmd].kind == CmdKind::Host {
                        self.cmds.get_mut(&cmd).expect("valid").bd.host_ssd += pcie;
                        self.eng
                            .schedule_at(now + pcie, Actor::Host, Ev::CqArrive { cmd, attempt });
                    } else {
                        self.finish_cmd(cmd)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Agent hop for work issued by a remote processor: returns when the
    /// data end starts on it.
    fn agent_hop(&mut self, exec: usize, d: usize, now: Time) -> Time {
        if exec == d || exec >= self.n {
            return now;
        }
        let arr = self.fabric.transfer(exec as u8, d as u8, CTRL_BYTES, now);
        self.devs[d].agent.reserve(arr, self.cfg.ssd.agent_unwrap_ns).1
    }

    fn notify_hop(&mut self, exec: usize, d: usize, at: Time) -> Time {
        if exec == d || exec >= self.n {
            return at;
        }
        self.fabric.notify(d as u8, exec as u8, CTRL_BYTES / 4, at)
    }

    fn issue_map_reads(&mut self, id: CmdId, attempt: u32) -> Result<()> {
        let now = self.eng.now();
        let (d, exec, misses) = {
            let c = self.cmds.get_mut(&id).expect("valid");
            (c.data_dev as usize, c.exec, std::mem::take(&mut c.misses))
        };
        if !self.devs[d].alive {
            return Ok(());
        }
        let mut pending = 0;
        for mp in misses {
            if self.devs[d].ftl.map.residency(mp) != Residency::NotCached {
                continue;
            }
            pending += 1;
            if let Some(w) = self.devs[d].map_inflight.get_mut(&mp) {
                w.push((id, attempt));
                continue;
            }
            let at = self.agent_hop(exec, d, now);
            let t = self.devs[d].ftl.read_map_page(mp, at)?;
            let t = self.notify_hop(exec, d, t);
            let epoch = self.devs[d].epoch;
            self.eng.schedule_at(
                t,
                Actor::Ssd(d as u8),
                Ev::MapReadDone {
                    dev: d as u16,
                    mpage: mp,
                    epoch,
                },
            );
            self.devs[d].map_inflight.insert(mp, vec![(id, attempt)]);
        }
        let c = self.cmds.get_mut(&id).expect("valid");
        c.pending_maps = pending;
        c.park_t = now;
        if pending == 0 {
            self.resume(id, attempt)?;
        }
        Ok(())
    }

    fn resume(&mut self, id: CmdId, attempt: u32) -> Result<()> {
        let exec = self.cmds[&id].exec;
        self.procs[exec].pool.ready.push_back(Job {
            kind: JobKind::Resume,
            cmd: id,
            attempt,
        });
        self.kick(exec)
    }

    pub(super) fn map_read_done(&mut self, dev: u16, mpage: u32, epoch: u32) -> Result<()> {
        let d = dev as usize;
        if self.devs[d].epoch != epoch {
            return Ok(());
        }
        let waiters = self.devs[d].map_inflight.remove(&mpage).unwrap_or_default();
        let fx = self.devs[d].ftl.map.install(mpage);
        self.apply_map_effects(dev, fx)?;
        let now = self.eng.now();
        for (id, att) in waiters {
            if !self.valid(id, att) {
                continue;
            }
            let c = self.cmds.get_mut(&id).expect("valid");
            c.pending_maps = c.pending_maps.saturating_sub(1);
            if c.pending_maps == 0 {
                c.bd.flash += now - c.park_t;
                self.resume(id, att)?;
            }
        }
        Ok(())
    }

    pub(super) fn apply_map_effects(&mut self, dev: u16, fx: MapEffects) -> Result<()> {
        let now = self.eng.now();
        let d = dev as usize;
        if !fx.flushed.is_empty() && self.devs[d].alive {
            self.devs[d].ftl.write_map_pages(&fx.flushed, now)?;
        }
        if let Some(l) = fx.demoted_to {
            if !self.fabric.is_failed(l) {
                self.fabric.transfer(dev as u8, l, MAP_PAGE_BYTES, now);
            }
        }
        Ok(())
    }

    fn issue_reads(&mut self, id: CmdId, _attempt: u32) -> Result<()> {
        let now = self.eng.now();
        let (d, exec, bytes, ops) = {
            let c = self.cmds.get_mut(&id).expect("valid");
            (
                c.data_dev as usize,
                c.exec,
                c.bytes(),
                std::mem::take(&mut c.flash_reads),
            )
        };
        if !self.devs[d].alive {
            return Ok(());
        }
        let at = self.agent_hop(exec, d, now);
        let mut ready = at;
        let mut svc = 0;
        for a in ops {
            let c = self.devs[d].ftl.flash.submit(FlashOp::read(a), at)?;
            if c.complete_time > ready {
                ready = c.complete_time;
                svc = c.service_ns;
            }
        }
        let dur = transfer_ns(bytes, self.cfg.ssd.dma_read_gbps);
        let end = self.devs[d].dma_read.reserve(ready, dur).1;
        let done = self.notify_hop(exec, d, end);
        let c = self.cmds.get_mut(&id).expect("valid");
        c.bd.flash += svc;
        c.bd.host_ssd += dur;
        c.bd.inter_ssd += (at - now) + (done - end);
        let attempt = c.attempt;
        self.eng
            .schedule_at(done, Actor::Ssd(d as u8), Ev::DmaDone { cmd: id, attempt });
        Ok(())
    }

    fn write_dma(&mut self, id: CmdId, attempt: u32) -> Result<()> {
        let now = self.eng.now();
        let (d, exec, bytes) = {
            let c = &self.cmds[&id];
            (c.data_dev as usize, c.exec, c.bytes())
        };
        if !self.devs[d].alive {
            return Ok(());
        }
        let at = self.agent_hop(exec, d, now);
        let dur = transfer_ns(bytes, self.cfg.ssd.dma_write_gbps);
        let end = self.devs[d].dma_write.reserve(at, dur).1;
        let done = self.notify_hop(exec, d, end);
        let c = self.cmds.get_mut(&id).expect("valid");
        c.bd.host_ssd += dur;
        c.bd.inter_ssd += (at - now) + (done - end);
        self.eng
            .schedule_at(done, Actor::Ssd(d as u8), Ev::DmaDone { cmd: id, attempt });
        Ok(())
    }

    pub(super) fn dma_done(&mut self, id: CmdId, attempt: u32) -> Result<()> {
        if !self.valid(id, attempt) {
            return Ok(());
        }
        let (op, d, exec) = {
            let c = &self.cmds[&id];
            (c.op, c.data_dev, c.exec)
        };
        match op {
            Op::Read => {
                self.procs[exec].pool.ready.push_back(Job {
                    kind: JobKind::Complete,
                    cmd: id,
                    attempt,
                });
                self.kick(exec)
            }
            Op::Write => {
                self.devs[d as usize].buf_waiters.push_back((id, attempt));
                self.drain_buffer_waiters(d)
            }
        }
    }

    /// Admit buffered writes in arrival order while slots are available.
    pub(super) fn drain_buffer_waiters(&mut self, dev: u16) -> Result<()> {
        let d = dev as usize;
        while let Some(&(id, att)) = self.devs[d].buf_waiters.front() {
            if !self.valid(id, att) {
                self.devs[d].buf_waiters.pop_front();
                continue;
            }
            let need = self.cmds[&id].slices;
            let dv = &mut self.devs[d];
            let free = dv.ftl.buffer_free().saturating_sub(dv.buf_reserved);
            if free < need {
                break;
            }
            dv.buf_waiters.pop_front();
            dv.buf_reserved += need;
            let c = self.cmds.get_mut(&id).expect("valid");
            c.buf_reserved = true;
            let exec = c.exec;
            self.procs[exec].pool.ready.push_back(Job {
                kind: JobKind::WriteUpdate,
                cmd: id,
                attempt: att,
            });
            self.kick(exec)?;
        }
        Ok(())
    }

    // ---- locks ----

    fn needs_locks(&self, d: usize, exec: usize) -> bool {
        self.cfg.variant.harvests_processor()
            && exec < self.n
            && (exec != d || self.sessions.iter().any(|s| s.borrower as usize == d))
    }

    fn holder(&self, id: CmdId) -> Holder {
        Holder {
            device: self.cmds[&id].exec as u8,
            tag: id,
        }
    }

    /// Take the command's region locks in ascending order. Returns false
    /// when it has to wait; the core spins until the grant arrives.
    fn acquire_locks(&mut self, p: usize, core: usize, job: Job, base: Time, mode: LockMode) -> Result<bool> {
        let id = job.cmd;
        let (d, lpn, slices, exec) = {
            let c = &self.cmds[&id];
            (c.data_dev as usize, c.lpn, c.slices, c.exec)
        };
        if self.cmds[&id].locks.is_empty() {
            if !self.needs_locks(d, exec) {
                return Ok(true);
            }
            let mut ids: Vec<u64> = Self::map_pages(lpn, slices)
                .into_iter()
                .map(|mp| ((d as u64) << 32) | u64::from(mp / LOCK_REGION_PAGES))
                .collect();
            ids.dedup();
            let c = self.cmds.get_mut(&id).expect("valid");
            c.locks = ids;
            c.lock_idx = 0;
            c.lock_ns = (0, 0);
        }
        let holder = self.holder(id);
        let sync = self.procs[p].fw.sync();
        loop {
            let c = &self.cmds[&id];
            if c.lock_idx >= c.locks.len() {
                return Ok(true);
            }
            let lock = c.locks[c.lock_idx];
            let owner = (lock >> 32) as u8;
            let op_ns = self.fabric.lock_op_ns(exec as u8, owner);
            let c = self.cmds.get_mut(&id).expect("valid");
            if exec as u8 == owner {
                c.lock_ns.0 += op_ns + sync;
            } else {
                c.lock_ns.1 += op_ns + sync;
            }
            if self.fabric.lock(lock, holder, mode) {
                c.held.push(lock);
                c.lock_idx += 1;
            } else {
                c.spin = Some((p, core));
                self.procs[p].running[core] = Some(Post::Spin { job, base });
                return Ok(false);
            }
        }
    }

    pub(super) fn release_all(&mut self, id: CmdId) -> Result<()> {
        let Some(c) = self.cmds.get_mut(&id) else {
            return Ok(());
        };
        let held = std::mem::take(&mut c.held);
        c.locks.clear();
        c.lock_idx = 0;
        c.lock_ns = (0, 0);
        let exec = c.exec;
        for l in held {
            self.release_lock(l, exec, id)?;
        }
        Ok(())
    }

    pub(super) fn release_lock(&mut self, lock: u64, exec: usize, id: CmdId) -> Result<()> {
        let holder = Holder {
            device: exec as u8,
            tag: id,
        };
        match self.fabric.unlock(lock, holder) {
            Ok(granted) => {
                for g in granted {
                    self.lock_granted(lock, g)?;
                }
                Ok(())
            }
            // Dropped already by device-failure cleanup.
            Err(SimError::NotHeld(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    pub(super) fn lock_granted(&mut self, lock: u64, h: Holder) -> Result<()> {
        let live = self
            .cmds
            .get(&h.tag)
            .is_some_and(|c| c.exec as u8 == h.device && c.locks.get(c.lock_idx) == Some(&lock));
        if !live {
            return self.release_lock(lock, h.device as usize, h.tag);
        }
        let (p, core) = {
            let c = self.cmds.get_mut(&h.tag).expect("live");
            c.held.push(lock);
            c.lock_idx += 1;
            match c.spin.take() {
                Some(x) => x,
                None => return Ok(()),
            }
        };
        let (job, base) = match self.procs[p].running[core].take() {
            Some(Post::Spin { job, base }) if job.cmd == h.tag => (job, base),
            other => {
                self.procs[p].running[core] = other;
                return Ok(());
            }
        };
        if job.kind == JobKind::WriteUpdate {
            self.job_write_update(p, core, job)
        } else {
            self.job_translate(p, core, job, base)
        }
    }
}
