//! End-of-run report assembly.

use crate::engine::NS_PER_SEC;
use crate::error::Result;
use crate::metrics::{
    bom_cost, energy_account, summarize, AggregateReport, BucketMeans, DeviceReport, EnergyBreakdown, EnergyInputs,
    LatencyBreakdown, Report, SCHEMA_VERSION,
};

use super::Sim;

const DRAM_ACCESS_BYTES: u64 = 64;
/// Simulated time allowed for outstanding commands to finish after the end.
const DRAIN_LIMIT_NS: u64 = NS_PER_SEC;

impl Sim {
    fn energy_inputs(&self, d: usize) -> EnergyInputs {
        let dv = &self.devs[d];
        let dur = self.eng.now();
        let g = dv.ftl.flash.geometry();
        let fc = dv.ftl.flash.counters();
        let chan_busy: u64 = dv.ftl.flash.channel_busy_ns().iter().sum();
        let ms = dv.ftl.map.stats();
        let link = self.fabric.link_stats().get(d).map_or(0, |l| l.bytes);
        let host_bytes = (dv.dma_read.busy_ns as f64 * self.cfg.ssd.dma_read_gbps
            + dv.dma_write.busy_ns as f64 * self.cfg.ssd.dma_write_gbps) as u64;
        EnergyInputs {
            duration_ns: dur,
            read_cell_ns: fc.cell_ns_read,
            program_cell_ns: fc.cell_ns_program,
            erase_cell_ns: fc.cell_ns_erase,
            bus_idle_ns: (u64::from(g.channels) * dur).saturating_sub(chan_busy),
            die_idle_ns: (u64::from(g.dies()) * dur).saturating_sub(dv.ftl.flash.total_cell_ns()),
            link_bits: (link + host_bytes) * 8,
            core_busy_ns: self.procs[d].pool.total_busy(),
            dram_bits: (ms.lookups * DRAM_ACCESS_BYTES + host_bytes) * 8,
        }
    }

    fn device_report(&self, d: usize) -> DeviceReport {
        let dv = &self.devs[d];
        let m = &dv.m;
        let measured = self.end.saturating_sub(self.warmup).max(1);
        let secs = measured as f64 / NS_PER_SEC as f64;
        let win = self.cfg.window_ns() as f64;
        let cores = self.procs[d].pool.len() as f64;
        let cap = cores * win * m.windows as f64;
        let ratio = |a: u64, b: u64| if b > 0 { a as f64 / b as f64 } else { 0.0 };
        let ms = dv.ftl.map.stats();
        let base = m.map_at_warmup.unwrap_or_default();
        let fs = dv.ftl.stats();
        let cap_bytes = dv.ftl.logical_slots() * crate::workload::SLICE;
        let mut lat = m.lat.clone();
        let mut rlat = m.rlat.clone();
        let mut wlat = m.wlat.clone();
        let n_lat = lat.len() as u64;
        DeviceReport {
            id: dv.id,
            workload: dv.workload.clone(),
            commands: m.commands,
            errors: m.errors,
            redirected: m.redirected,
            bytes_read: m.bytes_read,
            bytes_written: m.bytes_written,
            throughput_gbps: (m.bytes_read + m.bytes_written) as f64 / measured as f64,
            iops: m.commands as f64 / secs,
            latency: summarize(&mut lat),
            read_latency: summarize(&mut rlat),
            write_latency: summarize(&mut wlat),
            breakdown: BucketMeans::of(&m.bd, n_lat),
            proc_util: if cap > 0.0 { m.busy_ns as f64 / cap } else { 0.0 },
            own_proc_util: if cap > 0.0 { m.own_busy_ns as f64 / cap } else { 0.0 },
            flash_util: if m.windows > 0 {
                m.flash_util_sum / m.windows as f64
            } else {
                0.0
            },
            miss_ratio: ratio(ms.misses, ms.lookups),
            steady_miss_ratio: ratio(ms.misses - base.misses, ms.lookups - base.lookups),
            write_amplification: fs.write_amplification(),
            copyback_bytes: m.copyback_bytes,
            dwpd: (m.bytes_written + m.copyback_bytes) as f64 / cap_bytes as f64 * (86_400.0 / secs),
            flash_bytes_written: dv.ftl.flash.counters().bytes_programmed,
            gc_runs: fs.gc_runs,
            energy: energy_account(&self.energy_inputs(d), &self.cfg.energy),
            series: dv.series.clone(),
        }
    }

    pub fn report(&self) -> Report {
        let devices: Vec<DeviceReport> = (0..self.n).map(|d| self.device_report(d)).collect();
        let measured = self.end.saturating_sub(self.warmup).max(1);
        let mut lat: Vec<u64> = self.devs.iter().flat_map(|d| d.m.lat.iter().copied()).collect();
        let mut bd = LatencyBreakdown::default();
        let mut inputs = EnergyInputs::default();
        for (d, dv) in self.devs.iter().enumerate() {
            bd.add(&dv.m.bd);
            inputs.add(&self.energy_inputs(d));
        }
        if self.cfg.variant.firmware_on_host() {
            inputs.core_busy_ns += self.procs[self.n].pool.total_busy();
        }
        let n_lat = lat.len() as u64;
        let alive: Vec<&DeviceReport> = devices
            .iter()
            .filter(|r| self.devs[r.id as usize].alive && !self.procs[r.id as usize].pool.is_empty())
            .collect();
        let mean = |f: &dyn Fn(&DeviceReport) -> f64| {
            if alive.is_empty() {
                0.0
            } else {
                alive.iter().map(|r| f(r)).sum::<f64>() / alive.len() as f64
            }
        };
        let host_cap = self.procs[self.n].pool.len() as f64 * self.cfg.window_ns() as f64 * self.host_windows as f64;
        let tb = self.cfg.flash.capacity_bytes() as f64 / (1u64 << 40) as f64;
        let bom = bom_cost(tb, self.cfg.variant, &self.cfg.cost)
            .map(|b| b.total)
            .unwrap_or(0.0);
        let energy: EnergyBreakdown = energy_account(&inputs, &self.cfg.energy);
        let aggregate = AggregateReport {
            commands: devices.iter().map(|r| r.commands).sum(),
            errors: devices.iter().map(|r| r.errors).sum(),
            bytes_read: devices.iter().map(|r| r.bytes_read).sum(),
            bytes_written: devices.iter().map(|r| r.bytes_written).sum(),
            throughput_gbps: devices
                .iter()
                .map(|r| (r.bytes_read + r.bytes_written) as f64)
                .sum::<f64>()
                / measured as f64,
            latency: summarize(&mut lat),
            breakdown: BucketMeans::of(&bd, n_lat),
            proc_util: mean(&|r| r.proc_util),
            flash_util: mean(&|r| r.flash_util),
            flash_bytes_written: devices.iter().map(|r| r.flash_bytes_written).sum(),
            host_util: if host_cap > 0.0 {
                self.host_busy_ns as f64 / host_cap
            } else {
                0.0
            },
            energy,
            bom_per_ssd: bom,
            bom_total: bom * self.n as f64,
        };
        let integrity = self.integrity.clone();
        Report {
            schema_version: SCHEMA_VERSION,
            scenario: self.cfg.name.clone(),
            variant: self.cfg.variant,
            seed: self.cfg.seed,
            measured_ns: measured,
            events: self.eng.stats().dispatched,
            aggregate,
            devices,
            harvest_timeline: self.timeline.clone(),
            integrity,
            config: self.cfg.clone(),
        }
    }

    /// Report as of the configured end, then drain: no new work is issued
    /// and events run until every outstanding command completes or
    /// `DRAIN_LIMIT_NS` passes. What is still outstanding counts as lost;
    /// violations seen while draining are added.
    pub fn into_report(mut self) -> Result<Report> {
        let mut r = self.report();
        let outstanding = self.cmds.len() as u64;
        let before = self.integrity.clone();
        self.drain()?;
        let i = &mut r.integrity;
        i.drained = outstanding - self.cmds.len() as u64;
        i.lost_commands = self.cmds.len() as u64;
        i.violations += self.integrity.violations - before.violations;
        i.duplicate_completions += self.integrity.duplicate_completions - before.duplicate_completions;
        if i.first_violation.is_none() {
            i.first_violation = self.integrity.first_violation.clone();
        }
        Ok(r)
    }

    fn drain(&mut self) -> Result<()> {
        self.draining = true;
        let deadline = self.end + DRAIN_LIMIT_NS;
        // What the host timeout would conclude given time.
        for x in 0..self.n {
            if !self.devs[x].alive && !self.devs[x].detected {
                self.detect_failure(x as u16)?;
            }
        }
        while !self.cmds.is_empty() {
            let Some(ev) = self.eng.pop_until(deadline) else { break };
            self.dispatch(ev.payload)?;
        }
        Ok(())
    }
}
