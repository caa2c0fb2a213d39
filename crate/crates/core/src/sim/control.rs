//! Per-window sampling, host routing and the harvesting control loops.

use std::collections::VecDeque;

use crate::config::SEGMENT_BYTES;
use crate::engine::{Actor, NS_PER_MS};
use crate::harvest::descriptor::{claim, Descriptor};
use crate::harvest::policy::{
    bp, compute_redirect_ratio, decide_dram_action, decide_processor_action, pick_lender, split_redirect, DramAction,
    ProcessorAction,
};
use crate::host::QpKind;
use crate::mapping::{SegmentKey, MAP_PAGE_BYTES};
use crate::metrics::WindowSample;
use crate::workload::Op;

use super::{CmdId, CmdKind, Ev, ProcSession, Sim, VhGroup, MAX_SLICES};

/// Outstanding copyback commands per home device.
const VH_COPY_DEPTH: u32 = 8;

impl Sim {
    fn frames_per_segment(&self) -> u32 {
        (SEGMENT_BYTES / MAP_PAGE_BYTES) as u32
    }

    /// Host-side placement of a command. Returns true when the redirect
    /// logic ran (and its cost applies).
    pub(super) fn route(&mut self, id: CmdId) -> bool {
        let n = self.n;
        let (kind, op, home, home_lpn, slices) = {
            let c = &self.cmds[&id];
            (c.kind, c.op, c.home, c.home_lpn, c.slices)
        };
        if kind != CmdKind::Host {
            return false;
        }
        {
            let c = self.cmds.get_mut(&id).expect("valid");
            c.data_dev = home;
            c.lpn = home_lpn;
            c.exec = if self.cfg.variant.firmware_on_host() {
                n
            } else {
                home as usize
            };
            c.redirected = false;
        }
        if self.cfg.variant.virtual_groups() {
            return self.route_vh(id, op, home, home_lpn, slices);
        }
        if !self.cfg.variant.harvests_processor() {
            return false;
        }
        let fresh = self.cfg.harvest.stale_windows;
        let targets: Vec<(u16, f64)> = self
            .sessions
            .iter()
            .filter(|s| s.borrower == home)
            .filter(|s| {
                let l = &self.devs[s.lender as usize];
                l.alive_view() && l.desc_window + u64::from(fresh) >= self.window_idx
            })
            .map(|s| (s.lender, s.p))
            .collect();
        if targets.is_empty() {
            return false;
        }
        let u = self.eng.rng_draw("redirect");
        let mut acc = 0.0;
        for (l, p) in targets {
            acc += p;
            if u < acc {
                let c = self.cmds.get_mut(&id).expect("valid");
                c.exec = l as usize;
                c.redirected = true;
                break;
            }
        }
        true
    }

    fn route_vh(&mut self, id: CmdId, op: Op, home: u16, home_lpn: u64, slices: u32) -> bool {
        match op {
            Op::Write => {
                let Some(g) = self.vh_groups.get_mut(&home) else {
                    return false;
                };
                let k = g.members.len() + 1;
                let pick = g.rr % k;
                g.rr += 1;
                if pick == 0 {
                    return true;
                }
                let t = g.members[pick - 1];
                let logical = self.devs[t as usize].ftl.logical_slots();
                let cur = self.vh_cursor[t as usize];
                if cur + u64::from(slices) > logical {
                    return true;
                }
                self.vh_cursor[t as usize] += u64::from(slices);
                let c = self.cmds.get_mut(&id).expect("valid");
                c.data_dev = t;
                c.lpn = cur;
                c.exec = t as usize;
                c.redirected = true;
                true
            }
            Op::Read => {
                if self.extents.is_empty() {
                    return self.vh_groups.contains_key(&home);
                }
                // Maximal runs of slices stored contiguously on one device.
                let mut runs: Vec<(u16, u64, u64, u32)> = Vec::new();
                for i in 0..u64::from(slices) {
                    let (dev, lpn) = match self.extents.get(&(home, home_lpn + i)) {
                        Some(&(l, ll, _)) => (l, ll),
                        None => (home, home_lpn + i),
                    };
                    match runs.last_mut() {
                        Some(r) if r.0 == dev && r.1 + u64::from(r.3) == lpn => r.3 += 1,
                        _ => runs.push((dev, lpn, home_lpn + i, 1)),
                    }
                }
                if runs.len() == 1 {
                    let (dev, lpn, _, _) = runs[0];
                    if dev != home {
                        let c = self.cmds.get_mut(&id).expect("valid");
                        c.data_dev = dev;
                        c.lpn = lpn;
                        c.exec = dev as usize;
                        c.redirected = true;
                    }
                    return true;
                }
                let now = self.eng.now();
                let delay = self.cfg.host.per_command_ns / 2 + self.cfg.host.redirect_ns + self.cfg.ssd.pcie_latency_ns;
                let mut kids = Vec::new();
                for (dev, lpn, hl, k) in runs {
                    let cid = self.new_cmd(CmdKind::Host, Op::Read, home, hl, k, None, Some(id), now);
                    let c = self.cmds.get_mut(&cid).expect("new");
                    c.data_dev = dev;
                    c.lpn = lpn;
                    c.exec = dev as usize;
                    c.redirected = dev != home;
                    c.bd.host_ssd += self.cfg.ssd.pcie_latency_ns;
                    kids.push(cid);
                }
                self.cmds.get_mut(&id).expect("valid").children = kids.len() as u32;
                for cid in kids {
                    self.eng
                        .schedule(delay, Actor::Host, Ev::SqArrive { cmd: cid, attempt: 0 });
                }
                true
            }
        }
    }

    pub(super) fn window(&mut self) -> crate::error::Result<()> {
        let now = self.eng.now();
        let win = self.cfg.window_ns();
        self.window_idx += 1;
        let measured = now > self.warmup;
        for d in 0..self.n {
            if !self.devs[d].alive {
                continue;
            }
            let s = self.procs[d].pool.sample(now);
            let cores = self.procs[d].pool.len() as f64;
            let cap = cores * win as f64;
            let (util, own) = if cap > 0.0 {
                (s.busy_ns as f64 / cap, s.own_ns as f64 / cap)
            } else {
                (0.0, 0.0)
            };
            self.procs[d].util = util;
            self.procs[d].own_util = own;
            let dv = &mut self.devs[d];
            let fu = dv
                .ftl
                .flash
                .utilization_window(now.saturating_sub(win), now, now)
                .unwrap_or(0.0);
            dv.ftl.flash.prune_before(now.saturating_sub(win));
            dv.flash_util = fu;
            let ms = dv.ftl.map.stats();
            let lookups = ms.lookups - dv.win_map.lookups;
            let misses = ms.misses - dv.win_map.misses;
            dv.win_map = ms;
            let miss_ratio = if lookups > 0 {
                misses as f64 / lookups as f64
            } else {
                0.0
            };
            if now >= self.warmup && dv.m.map_at_warmup.is_none() {
                dv.m.map_at_warmup = Some(ms);
                dv.m.host_slots_at_warmup = dv.ftl.stats().host_slots;
            }
            let bytes = std::mem::take(&mut dv.win_bytes);
            let local = dv.local_segments();
            let borrowed = dv.borrowed_segments();
            let lent = dv.segments_total - local;
            let p_redirect = dv.p_redirect;
            dv.series.push(WindowSample {
                t_ms: now as f64 / NS_PER_MS as f64,
                bytes,
                gbps: bytes as f64 / win as f64,
                proc_util: util,
                own_proc_util: own,
                flash_util: fu,
                miss_ratio,
                p_redirect,
                local_segments: local,
                borrowed_segments: borrowed,
                lent_segments: lent,
            });
            if measured {
                dv.m.busy_ns += s.busy_ns;
                dv.m.own_busy_ns += s.own_ns;
                dv.m.flash_util_sum += fu;
                dv.m.windows += 1;
            }
        }
        let h = self.n;
        let hs = self.procs[h].pool.sample(now);
        if measured {
            self.host_busy_ns += hs.busy_ns;
            self.host_windows += 1;
        }
        if self.cfg.variant.harvests_processor() {
            self.processor_control();
        }
        if self.cfg.variant.harvests_dram()
            && self
                .window_idx
                .is_multiple_of(u64::from(self.cfg.harvest.dram_period_windows.max(1)))
        {
            self.dram_control()?;
        }
        if self.cfg.variant.virtual_groups() {
            self.vh_control()?;
        }
        if now + win <= self.end {
            self.eng.schedule(win, Actor::Host, Ev::Window);
        }
        Ok(())
    }

    /// Work a borrower needs per window: its own busy time plus what its
    /// lenders ran for it, over its own core capacity.
    fn demand_util(&self, b: u16) -> f64 {
        let pb = &self.procs[b as usize];
        let mut u = pb.own_util;
        for s in self.sessions.iter().filter(|s| s.borrower == b) {
            let pl = &self.procs[s.lender as usize];
            let foreign = (pl.util - pl.own_util).max(0.0) * pl.pool.len() as f64;
            u += foreign / pb.pool.len().max(1) as f64;
        }
        u
    }

    fn end_session(&mut self, i: usize, why: &str) {
        let s = self.sessions.remove(i);
        let l = s.lender as usize;
        if let Some(slot) = self.devs[l].proc_desc {
            if slot == s.slot && self.devs[l].table.get(slot).is_claimed() {
                self.devs[l].table.release(slot);
            }
        }
        if let Some(q) = self.procs[l].qps.get_mut(s.shadow) {
            q.kind = QpKind::Shadow { borrower: None };
        }
        self.timeline_event(why, s.borrower, s.lender, 0);
    }

    fn processor_control(&mut self) {
        let wm = self.cfg.harvest.watermark;
        let hc = self.cfg.harvest;
        // Borrowers whose demand fell below the watermark cancel.
        let borrowers: Vec<u16> = {
            let mut v: Vec<u16> = self.sessions.iter().map(|s| s.borrower).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        for b in borrowers {
            if self.demand_util(b) < wm {
                while let Some(i) = self.sessions.iter().position(|s| s.borrower == b) {
                    self.end_session(i, "proc-cancel");
                }
            }
        }
        // Lenders publish, refresh or withdraw.
        for d in 0..self.n {
            if !self.devs[d].alive_view() {
                continue;
            }
            let is_borrower = self.sessions.iter().any(|s| s.borrower as usize == d);
            let act = decide_processor_action(self.procs[d].own_util, self.devs[d].flash_util, wm);
            let lend = act == ProcessorAction::Lend && !is_borrower;
            match (lend, self.devs[d].proc_desc) {
                (true, None) => {
                    let shadow = self.procs[d].shadow_base as u16;
                    let desc = Descriptor::processor(bp(self.procs[d].own_util), d as u32, 0, shadow);
                    if let Some(slot) = self.devs[d].table.publish(desc) {
                        self.devs[d].proc_desc = Some(slot);
                        self.devs[d].desc_window = self.window_idx;
                    }
                }
                (true, Some(slot)) => {
                    let u = bp(self.procs[d].own_util);
                    self.devs[d].table.update(slot, |x| {
                        let b = x.borrower_util();
                        x.set_utils(b, u);
                    });
                    self.devs[d].desc_window = self.window_idx;
                }
                (false, Some(slot)) => {
                    while let Some(i) = self.sessions.iter().position(|s| s.lender as usize == d) {
                        self.end_session(i, "proc-withdraw");
                    }
                    self.devs[d].table.withdraw(slot);
                    self.devs[d].proc_desc = None;
                }
                (false, None) => {}
            }
        }
        // Saturated devices claim one more lender per window.
        for b in 0..self.n {
            if !self.devs[b].alive_view() {
                continue;
            }
            let act = decide_processor_action(self.procs[b].util, self.devs[b].flash_util, wm);
            let have = self.sessions.iter().filter(|s| s.borrower as usize == b).count();
            if act != ProcessorAction::Borrow || have >= hc.max_lenders as usize || self.devs[b].proc_desc.is_some() {
                continue;
            }
            let candidates: Vec<(u8, u16)> = (0..self.n)
                .filter(|&l| l != b && self.devs[l].alive_view())
                .filter_map(|l| {
                    let slot = self.devs[l].proc_desc?;
                    let d = self.devs[l].table.get(slot);
                    (d.valid && !d.is_claimed()).then_some((l as u8, d.lender_util()))
                })
                .collect();
            let Some(l) = pick_lender(&candidates) else {
                continue;
            };
            let l = l as usize;
            let slot = self.devs[l].proc_desc.expect("candidate");
            let seen = self.devs[l].table.slots()[slot];
            if !claim(self.devs[l].table.word_mut(slot), seen, b as u8) {
                continue;
            }
            let pl = &mut self.procs[l];
            let shadow = (pl.shadow_base..pl.qps.len())
                .find(|&q| pl.qps[q].kind == QpKind::Shadow { borrower: None })
                .unwrap_or(pl.shadow_base);
            pl.qps[shadow].kind = QpKind::Shadow {
                borrower: Some(b as u16),
            };
            self.devs[l].table.update(slot, |x| x.set_borrower_cq(b as u16));
            self.sessions.push(ProcSession {
                borrower: b as u16,
                lender: l as u16,
                slot,
                shadow,
                ratio: 1.0,
                p: 0.0,
            });
            self.timeline_event("proc-borrow", b as u16, l as u16, 1);
        }
        // Redirect ratios over active queues, damped.
        for b in 0..self.n {
            let idx: Vec<usize> = self
                .sessions
                .iter()
                .enumerate()
                .filter(|(_, s)| s.borrower as usize == b)
                .map(|(i, _)| i)
                .collect();
            if idx.is_empty() {
                self.devs[b].p_redirect = 0.0;
                continue;
            }
            let ub = bp(self.procs[b].util);
            let (wb, sum_b) = self.active_weights(b, None);
            let mut ratios = Vec::with_capacity(idx.len());
            for &i in &idx {
                let s = &self.sessions[i];
                let l = s.lender as usize;
                let ul = bp(self.procs[l].util);
                let (ws, sum_l) = self.active_weights(l, Some(s.shadow));
                let r = compute_redirect_ratio(ub, ul, wb, sum_b, ws, sum_l);
                ratios.push(r.ratio);
            }
            let probs = split_redirect(&ratios);
            let mut total = 0.0;
            for (k, &i) in idx.iter().enumerate() {
                let s = &mut self.sessions[i];
                s.ratio = ratios[k];
                s.p = if hc.damping { (s.p + probs[k]) / 2.0 } else { probs[k] };
                total += s.p;
            }
            self.devs[b].p_redirect = total;
        }
        // Refresh the fetched counters used for activity.
        for p in &mut self.procs {
            for q in &mut p.qps {
                q.fetched = 0;
            }
        }
    }

    /// Weight of the borrower (or shadow) queue and the weight sum over the
    /// queues that were active in the last window.
    fn active_weights(&self, d: usize, shadow: Option<usize>) -> (u32, u32) {
        let qps = &self.procs[d].qps;
        let mine = match shadow {
            Some(s) => qps[s].weight,
            None => qps[0].weight,
        };
        let mut sum: u32 = qps
            .iter()
            .enumerate()
            .filter(|(i, q)| q.fetched > 0 || !q.sq.is_empty() || Some(*i) == shadow || (shadow.is_none() && *i == 0))
            .map(|(_, q)| q.weight)
            .sum();
        sum = sum.max(mine);
        (mine, sum)
    }

    fn dram_control(&mut self) -> crate::error::Result<()> {
        let fps = self.frames_per_segment();
        let policy = self.cfg.harvest.dram;
        let mut actions = Vec::with_capacity(self.n);
        for d in 0..self.n {
            let dv = &mut self.devs[d];
            if !dv.alive_view() {
                actions.push(DramAction::None);
                continue;
            }
            let est = dv.shards.estimate().clone();
            let local = dv.local_segments();
            let borrowed = dv.borrowed_segments();
            let act = if est.total == 0 {
                let spare = local.saturating_sub(policy.floor_segments.max(1));
                if spare > 0 {
                    DramAction::Lend(spare)
                } else {
                    DramAction::None
                }
            } else {
                decide_dram_action(&est, local + borrowed, u64::from(fps), &policy)
            };
            // Keep sampling until there is enough to decide on.
            if est.total == 0 || est.total >= policy.min_samples {
                dv.shards.reset_histogram();
            }
            actions.push(act);
        }
        // Lenders first so borrowers see fresh offers.
        for (d, &act) in actions.iter().enumerate() {
            if let DramAction::Lend(k) = act {
                let mut k = k;
                // Give back borrowed memory before offering local memory.
                let keys: Vec<SegmentKey> = self.devs[d].ftl.map.segments().copied().collect();
                for key in keys.into_iter().rev() {
                    if k == 0 {
                        break;
                    }
                    self.release_borrowed(d as u16, key)?;
                    k -= 1;
                }
                let offer = k.min(
                    self.devs[d]
                        .local_segments()
                        .saturating_sub(policy.floor_segments.max(1)),
                );
                self.set_dram_offer(d, offer);
            } else {
                self.set_dram_offer(d, 0);
            }
        }
        for (b, &act) in actions.iter().enumerate() {
            let DramAction::Borrow(k) = act else {
                continue;
            };
            // Take back what this device lent out.
            let lent: Vec<u16> = self.devs[b].lent.keys().copied().collect();
            let mut need = k;
            for borrower in lent {
                let keys: Vec<SegmentKey> = self.devs[borrower as usize]
                    .ftl
                    .map
                    .segments()
                    .filter(|s| s.lender as usize == b)
                    .copied()
                    .collect();
                for key in keys {
                    if need == 0 {
                        break;
                    }
                    self.release_borrowed(borrower, key)?;
                    need -= 1;
                }
            }
            if need == 0 {
                continue;
            }
            let best = (0..self.n)
                .filter(|&l| l != b && self.devs[l].alive_view() && self.devs[l].dram_offer > 0)
                .max_by_key(|&l| (self.devs[l].dram_offer, std::cmp::Reverse(l)));
            let Some(l) = best else { continue };
            let slot = self.devs[l].dram_desc.expect("offer is published");
            let seen = self.devs[l].table.slots()[slot];
            if !claim(self.devs[l].table.word_mut(slot), seen, b as u8) {
                continue;
            }
            let take = need.min(self.devs[l].dram_offer);
            let mut free: Vec<u32> = {
                let lv = &self.devs[l];
                let used: std::collections::BTreeSet<u32> = lv.lent.values().flatten().copied().collect();
                (0..lv.segments_total)
                    .rev()
                    .filter(|i| !used.contains(i))
                    .take(take as usize)
                    .collect()
            };
            free.sort_unstable();
            for &idx in &free {
                self.devs[b].ftl.map.add_segment(SegmentKey {
                    lender: l as u8,
                    index: idx,
                });
            }
            self.devs[l]
                .lent
                .entry(b as u16)
                .or_default()
                .extend(free.iter().copied());
            let frames = self.devs[l].local_segments() as usize * fps as usize;
            let fx = self.devs[l].ftl.map.set_local_capacity(frames);
            self.apply_map_effects(l as u16, fx)?;
            let rest = self.devs[l].dram_offer - take;
            self.devs[l].table.withdraw(slot);
            self.devs[l].dram_desc = None;
            self.devs[l].dram_offer = 0;
            self.set_dram_offer(l, rest);
            self.timeline_event("dram-borrow", b as u16, l as u16, u64::from(take));
        }
        Ok(())
    }

    fn set_dram_offer(&mut self, d: usize, segments: u32) {
        let dv = &mut self.devs[d];
        if dv.dram_offer == segments && (segments == 0) == dv.dram_desc.is_none() {
            return;
        }
        if let Some(slot) = dv.dram_desc.take() {
            dv.table.withdraw(slot);
        }
        dv.dram_offer = 0;
        if segments > 0 {
            let mb = ((u64::from(segments) * SEGMENT_BYTES) >> 20) as u32;
            if let Some(slot) = dv.table.publish(Descriptor::dram(mb, d as u32, d as u32)) {
                dv.dram_desc = Some(slot);
                dv.dram_offer = segments;
            }
        }
    }

    /// Graceful return of one borrowed segment to its lender.
    pub(super) fn release_borrowed(&mut self, b: u16, key: SegmentKey) -> crate::error::Result<()> {
        let fx = self.devs[b as usize].ftl.map.release_segment(key);
        self.apply_map_effects(b, fx)?;
        self.reclaim(key.lender as usize, b, key.index);
        self.timeline_event("dram-release", b, u16::from(key.lender), 1);
        Ok(())
    }

    /// Lender takes a segment back into its own cache.
    pub(super) fn reclaim(&mut self, l: usize, b: u16, index: u32) {
        let fps = self.frames_per_segment() as usize;
        let lv = &mut self.devs[l];
        if let Some(v) = lv.lent.get_mut(&b) {
            v.retain(|&i| i != index);
            if v.is_empty() {
                lv.lent.remove(&b);
            }
        }
        if lv.alive {
            let frames = lv.local_segments() as usize * fps;
            let _ = lv.ftl.map.set_local_capacity(frames);
        }
    }

    fn vh_control(&mut self) -> crate::error::Result<()> {
        let wm = self.cfg.harvest.watermark;
        for d in 0..self.n {
            if !self.devs[d].alive_view() {
                continue;
            }
            let demand = self.vh_demand(d as u16);
            if demand >= wm {
                self.devs[d].above += 1;
            } else {
                self.devs[d].above = 0;
            }
            let grouped = self.vh_groups.contains_key(&(d as u16));
            if grouped && demand < wm {
                let g = self.vh_groups.remove(&(d as u16)).expect("group");
                self.timeline_event(
                    "vh-dissolve",
                    d as u16,
                    g.members.first().copied().unwrap_or(d as u16),
                    0,
                );
            } else if !grouped && self.devs[d].above >= self.cfg.harvest.vh_burst_windows {
                let busy: std::collections::BTreeSet<u16> = self
                    .vh_groups
                    .iter()
                    .flat_map(|(b, g)| g.members.iter().copied().chain([*b]))
                    .collect();
                let mut idle: Vec<(u16, u16)> = (0..self.n)
                    .filter(|&l| l != d && self.devs[l].alive_view() && !busy.contains(&(l as u16)))
                    .filter(|&l| self.procs[l].own_util < wm)
                    .map(|l| (bp(self.procs[l].own_util), l as u16))
                    .collect();
                idle.sort_unstable();
                let members: Vec<u16> = idle
                    .into_iter()
                    .take(self.cfg.harvest.vh_max_members as usize)
                    .map(|(_, l)| l)
                    .collect();
                if !members.is_empty() {
                    for &m in &members {
                        self.timeline_event("vh-join", d as u16, m, 0);
                    }
                    self.vh_groups.insert(d as u16, VhGroup { members, rr: 0 });
                }
            }
        }
        if self.cfg.variant.copyback() {
            for d in 0..self.n {
                self.launch_copies(d as u16)?;
            }
        }
        Ok(())
    }

    /// Larger of processor and flash demand. In a group the borrower keeps
    /// one write in `members + 1`, so its flash demand scales by that.
    fn vh_demand(&self, d: u16) -> f64 {
        let pd = &self.procs[d as usize];
        let mut u = pd.own_util;
        let mut f = self.devs[d as usize].flash_util;
        if let Some(g) = self.vh_groups.get(&d) {
            for &m in &g.members {
                let pm = &self.procs[m as usize];
                let foreign = (pm.util - pm.own_util).max(0.0) * pm.pool.len() as f64;
                u += foreign / pd.pool.len().max(1) as f64;
            }
            f *= (g.members.len() + 1) as f64;
        }
        u.max(f)
    }

    pub(super) fn extent_current(&self, home: u16, home_lpn: u64, lender: u16, lender_lpn: u64) -> bool {
        self.extents
            .get(&(home, home_lpn))
            .is_some_and(|&(l, ll, _)| l == lender && ll == lender_lpn)
    }

    /// Copy redirected extents of `home` back once its group is gone.
    /// Contiguous extents with consecutive tokens share one command.
    pub(super) fn launch_copies(&mut self, home: u16) -> crate::error::Result<()> {
        if self.draining || !self.devs[home as usize].alive_view() || self.vh_groups.contains_key(&home) {
            return Ok(());
        }
        while self.vh_copies[home as usize] < VH_COPY_DEPTH {
            let Some((hl, l, ll, _)) = self.copy_queue[home as usize].pop_front() else {
                break;
            };
            if !self.extent_current(home, hl, l, ll) || !self.devs[l as usize].alive_view() {
                continue;
            }
            let t0 = self.oracle.expected(l, ll);
            let mut k = 1u32;
            while k < MAX_SLICES {
                let Some(&(h2, l2, ll2, _)) = self.copy_queue[home as usize].front() else {
                    break;
                };
                let step = u64::from(k);
                if h2 != hl + step
                    || l2 != l
                    || ll2 != ll + step
                    || !self.extent_current(home, h2, l2, ll2)
                    || self.oracle.expected(l, ll2) != t0 + step
                {
                    break;
                }
                self.copy_queue[home as usize].pop_front();
                k += 1;
            }
            let now = self.eng.now();
            let id = self.new_cmd(
                CmdKind::CopyRead { home, home_lpn: hl },
                Op::Read,
                home,
                hl,
                k,
                None,
                None,
                now,
            );
            let c = self.cmds.get_mut(&id).expect("new");
            c.data_dev = l;
            c.lpn = ll;
            c.exec = home as usize;
            self.vh_copies[home as usize] += 1;
            self.procs[home as usize].qps[0].sq.push_back(id);
        }
        self.kick(home as usize)
    }

    /// The lender copy has been read; write it home. Slices overwritten
    /// meanwhile are skipped when the write is applied.
    pub(super) fn copy_read_done(&mut self, c: &super::Cmd, home: u16, home_lpn: u64) -> crate::error::Result<()> {
        let any = (0..u64::from(c.slices)).any(|i| self.extent_current(home, home_lpn + i, c.data_dev, c.lpn + i));
        if !any || !self.devs[home as usize].alive_view() {
            self.vh_copies[home as usize] = self.vh_copies[home as usize].saturating_sub(1);
            return self.launch_copies(home);
        }
        let now = self.eng.now();
        let token = self.oracle.expected(c.data_dev, c.lpn);
        let kind = CmdKind::CopyWrite {
            lender: c.data_dev,
            lender_lpn: c.lpn,
        };
        let id = self.new_cmd(kind, Op::Write, home, home_lpn, c.slices, None, None, now);
        self.cmds.get_mut(&id).expect("new").token = token;
        self.procs[home as usize].qps[0].sq.push_back(id);
        self.kick(home as usize)
    }

    /// Remember a redirected extent for later copyback.
    pub(super) fn note_extent(&mut self, home: u16, home_lpn: u64, lender: u16, lender_lpn: u64) {
        if self.cfg.variant.copyback() {
            self.copy_queue[home as usize].push_back((home_lpn, lender, lender_lpn, self.window_idx));
        }
    }
}

pub(super) type CopyQueue = VecDeque<(u64, u16, u64, u64)>;
