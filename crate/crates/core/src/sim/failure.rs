//! Device failure, host-side detection and recovery.

use serde::Serialize;

use crate::engine::{Actor, NS_PER_MS};
use crate::error::Result;
use crate::mapping::map_page_of;

use super::{CmdId, CmdKind, Ev, Sim};

/// Comparison of a borrower's mapping before and after rebuilding the
/// pages a failed lender held.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryCheck {
    pub lender: u16,
    pub borrower: u16,
    pub pages: usize,
    pub entries_checked: u64,
    pub mismatches: u64,
}

impl Sim {
    /// The device stops: cores, queues and in-flight device work are lost.
    pub(super) fn fail_device(&mut self, x: u16) -> Result<()> {
        let d = x as usize;
        if !self.devs[d].alive {
            return Ok(());
        }
        log::info!("device {x} fails at t={}", self.eng.now());
        let dv = &mut self.devs[d];
        dv.alive = false;
        dv.epoch += 1;
        dv.map_inflight.clear();
        dv.buf_waiters.clear();
        dv.buf_reserved = 0;
        let p = &mut self.procs[d];
        p.epoch += 1;
        p.pool.reset();
        for r in &mut p.running {
            *r = None;
        }
        for q in &mut p.qps {
            q.sq.clear();
        }
        self.fabric.set_failed(x as u8, true);
        self.timeline_event("fail", x, x, 0);
        Ok(())
    }

    /// Periodic host check: a device with outstanding commands and no
    /// completions for `timeout_strikes` ticks is declared failed.
    pub(super) fn host_tick(&mut self) -> Result<()> {
        let mut outstanding = vec![0u64; self.n];
        for c in self.cmds.values() {
            if c.children > 0 {
                continue;
            }
            if c.exec < self.n {
                outstanding[c.exec] += 1;
            }
            if c.data_dev as usize != c.exec {
                outstanding[c.data_dev as usize] += 1;
            }
        }
        let strikes = self.cfg.harvest.timeout_strikes;
        let mut detect = Vec::new();
        for (d, &out) in outstanding.iter().enumerate() {
            let dv = &mut self.devs[d];
            if dv.detected {
                continue;
            }
            if out > 0 && dv.tick_completions == 0 {
                dv.strikes += 1;
            } else {
                dv.strikes = 0;
            }
            dv.tick_completions = 0;
            if dv.strikes >= strikes {
                detect.push(d as u16);
            }
        }
        for x in detect {
            self.detect_failure(x)?;
        }
        let tick = (self.cfg.harvest.timeout_ms * NS_PER_MS as f64).round() as u64;
        if self.eng.now() + tick <= self.end {
            self.eng.schedule(tick.max(1), Actor::Host, Ev::HostTick);
        }
        Ok(())
    }

    /// Host and peers learn that `x` is gone and recover.
    pub(super) fn detect_failure(&mut self, x: u16) -> Result<()> {
        let d = x as usize;
        if self.devs[d].detected {
            return Ok(());
        }
        if self.devs[d].alive {
            // Fence a device that stopped answering.
            self.fail_device(x)?;
        }
        self.devs[d].detected = true;
        self.devs[d].proc_desc = None;
        self.devs[d].dram_desc = None;
        self.devs[d].dram_offer = 0;
        self.timeline_event("detect", x, x, 0);
        log::info!("device {x} declared failed at t={}", self.eng.now());

        while let Some(i) = self.sessions.iter().position(|s| s.borrower == x || s.lender == x) {
            let s = self.sessions.remove(i);
            self.timeline_event("proc-lost", s.borrower, s.lender, 0);
        }
        let groups: Vec<u16> = self
            .vh_groups
            .iter()
            .filter(|(b, g)| **b == x || g.members.contains(&x))
            .map(|(b, _)| *b)
            .collect();
        for b in groups {
            self.vh_groups.remove(&b);
            self.timeline_event("vh-dissolve", b, x, 0);
        }

        // Commands: resubmit what only ran on x, fail what needs x's data.
        let mut ids: Vec<CmdId> = self.cmds.keys().copied().collect();
        ids.sort_unstable();
        for id in ids {
            let Some(c) = self.cmds.get(&id) else {
                continue;
            };
            if c.children > 0 {
                continue;
            }
            let data_lost = c.data_dev == x || c.home == x;
            let ran_on_x = c.exec == d;
            if !data_lost && !ran_on_x {
                continue;
            }
            let (data_dev, slices, reserved, held, exec) =
                (c.data_dev, c.slices, c.buf_reserved, c.held.clone(), c.exec);
            if reserved && data_dev != x {
                self.devs[data_dev as usize].buf_reserved -= slices;
            }
            for l in held {
                self.release_lock(l, exec, id)?;
            }
            let c = self.cmds.get_mut(&id).expect("present");
            c.held.clear();
            c.buf_reserved = false;
            if data_lost {
                c.failed = true;
                c.attempt += 1;
                self.finish_cmd(id)?;
            } else {
                c.reset_for_retry();
                self.integrity.resubmitted += 1;
                if c.kind == CmdKind::Host {
                    self.submit_host(id)?;
                } else {
                    let home = c.home as usize;
                    c.exec = home;
                    self.procs[home].qps[0].sq.push_back(id);
                    self.kick(home)?;
                }
            }
        }

        // Borrowers rebuild mapping pages that lived in x's DRAM.
        for b in 0..self.n {
            if b == d || !self.devs[b].alive {
                continue;
            }
            let pages: std::collections::BTreeSet<u32> = self.devs[b]
                .ftl
                .map
                .offsite_pages()
                .into_iter()
                .filter(|&(_, l)| l as usize == d)
                .map(|(p, _)| p)
                .collect();
            let has_segments = self.devs[b].ftl.map.segments().any(|k| k.lender as usize == d);
            if !has_segments {
                continue;
            }
            let mut lpns: Vec<u64> = self
                .oracle
                .tokens
                .keys()
                .filter(|&&(dev, lpn)| dev as usize == b && pages.contains(&map_page_of(lpn)))
                .map(|&(_, lpn)| lpn)
                .collect();
            lpns.sort_unstable();
            let before: Vec<u32> = lpns.iter().map(|&l| self.devs[b].ftl.map.value(l)).collect();
            let rec = self.devs[b].ftl.map.recover_lender(x as u8);
            let now = self.eng.now();
            if !rec.pages.is_empty() {
                self.devs[b].ftl.write_map_pages(&rec.pages, now)?;
            }
            let mismatches = lpns
                .iter()
                .zip(&before)
                .filter(|&(&l, &v)| self.devs[b].ftl.map.value(l) != v)
                .count() as u64;
            self.integrity.recoveries += 1;
            self.integrity.recovered_pages += rec.pages.len() as u64;
            self.integrity.replayed_records += rec.replayed as u64;
            if mismatches > 0 {
                self.violation(format!(
                    "recovery of lender {x} on device {b}: {mismatches} entries differ"
                ));
            }
            self.recovery_checks.push(super::RecoveryCheck {
                lender: x,
                borrower: b as u16,
                pages: pages.len(),
                entries_checked: lpns.len() as u64,
                mismatches,
            });
            self.timeline_event("dram-recover", b as u16, x, rec.pages.len() as u64);
        }
        // Lenders take back what x borrowed.
        for l in 0..self.n {
            let idx = self.devs[l].lent.get(&x).cloned().unwrap_or_default();
            for i in idx {
                self.reclaim(l, x, i);
            }
        }
        for (lock, h) in self.fabric.release_device(x as u8) {
            self.lock_granted(lock, h)?;
        }
        for p in 0..=self.n {
            self.kick(p)?;
        }
        Ok(())
    }

    /// Recovery comparisons made so far.
    pub fn recovery_checks(&self) -> &[RecoveryCheck] {
        &self.recovery_checks
    }

    /// Check every written page on live devices against the oracle, and
    /// every host-visible page against its current location. Returns the
    /// number of mismatches.
    pub fn verify_all_tokens(&self) -> u64 {
        let mut bad = 0;
        let mut keys: Vec<&(u16, u64)> = self.oracle.tokens.keys().collect();
        keys.sort_unstable();
        for &(dev, lpn) in keys {
            let dv = &self.devs[dev as usize];
            if !dv.alive {
                continue;
            }
            if dv.ftl.token_of(lpn) != self.oracle.tokens[&(dev, lpn)] {
                bad += 1;
            }
        }
        let mut logical: Vec<(&(u16, u64), &u64)> = self.oracle.logical.iter().collect();
        logical.sort_unstable();
        for (&(home, hl), &t) in logical {
            let (dev, lpn) = match self.extents.get(&(home, hl)) {
                Some(&(l, ll, _)) => (l, ll),
                None => (home, hl),
            };
            let dv = &self.devs[dev as usize];
            if dv.alive && self.devs[home as usize].alive && dv.ftl.token_of(lpn) != t {
                bad += 1;
            }
        }
        bad
    }
}
