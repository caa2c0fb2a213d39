//! Run statistics, the parametric energy model, BOM cost and report output.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ScenarioConfig, Variant};
use crate::engine::{Time, NS_PER_SEC};
use crate::error::{Result, SimError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub flash_per_128gb: f64,
    pub dram_per_gb: f64,
    pub dram_gb_per_tb: f64,
    pub controller: f64,
    pub other: f64,
    pub shrink_factor: f64,
    pub cxl_uplift: f64,
    pub oc_controller: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            flash_per_128gb: 4.95,
            dram_per_gb: 7.2,
            dram_gb_per_tb: 1.0,
            controller: 48.0,
            other: 6.0,
            shrink_factor: 0.5,
            cxl_uplift: 1.10,
            oc_controller: 12.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BomCost {
    pub flash: f64,
    pub dram: f64,
    pub controller: f64,
    pub other: f64,
    pub total: f64,
}

/// Per-SSD bill of materials. Capacity in TB of 1024 GB.
pub fn bom_cost(capacity_tb: f64, variant: Variant, m: &CostModel) -> Result<BomCost> {
    if !(capacity_tb > 0.0) {
        return Err(SimError::NonPositiveCapacity(capacity_tb));
    }
    let flash = capacity_tb * 1024.0 / 128.0 * m.flash_per_128gb;
    let dram_full = capacity_tb * m.dram_gb_per_tb * m.dram_per_gb;
    let (dram, controller) = match variant {
        Variant::Conv => (dram_full, m.controller),
        Variant::Shrunk | Variant::Vh | Variant::VhIdeal => {
            (dram_full * m.shrink_factor, m.controller * m.shrink_factor)
        }
        Variant::Xbof | Variant::Proch => {
            let f = m.shrink_factor * m.cxl_uplift;
            (dram_full * f, m.controller * f)
        }
        // Mapping lives in host memory.
        Variant::Oc => (0.0, m.oc_controller),
    };
    let total = flash + dram + controller + m.other;
    Ok(BomCost {
        flash,
        dram,
        controller,
        other: m.other,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyParams {
    pub flash_voltage: f64,
    pub i_read_ma: f64,
    pub i_program_ma: f64,
    pub i_erase_ma: f64,
    pub i_busidle_ma: f64,
    pub i_standby_ua: f64,
    pub phy_pj_per_bit: f64,
    /// Power of a fully busy six-core SSD processor.
    pub processor_w: f64,
    pub processor_ref_cores: u32,
    pub dram_pj_per_bit: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            flash_voltage: 3.3,
            i_read_ma: 25.0,
            i_program_ma: 25.0,
            i_erase_ma: 25.0,
            i_busidle_ma: 5.0,
            i_standby_ua: 10.0,
            phy_pj_per_bit: 6.0,
            processor_w: 6.45,
            processor_ref_cores: 6,
            dram_pj_per_bit: 22.0,
        }
    }
}

/// Activity totals that drive the energy model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EnergyInputs {
    pub duration_ns: Time,
    pub read_cell_ns: u64,
    pub program_cell_ns: u64,
    pub erase_cell_ns: u64,
    /// Channel time spent idle, summed over channels.
    pub bus_idle_ns: u64,
    /// Die time spent idle, summed over dies.
    pub die_idle_ns: u64,
    pub link_bits: u64,
    pub core_busy_ns: u64,
    pub dram_bits: u64,
}

impl EnergyInputs {
    pub fn add(&mut self, o: &EnergyInputs) {
        self.duration_ns = self.duration_ns.max(o.duration_ns);
        self.read_cell_ns += o.read_cell_ns;
        self.program_cell_ns += o.program_cell_ns;
        self.erase_cell_ns += o.erase_cell_ns;
        self.bus_idle_ns += o.bus_idle_ns;
        self.die_idle_ns += o.die_idle_ns;
        self.link_bits += o.link_bits;
        self.core_busy_ns += o.core_busy_ns;
        self.dram_bits += o.dram_bits;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub flash_op_j: f64,
    pub flash_idle_j: f64,
    pub phy_j: f64,
    pub processor_j: f64,
    pub dram_j: f64,
    pub total_j: f64,
}

pub fn energy_account(x: &EnergyInputs, p: &EnergyParams) -> EnergyBreakdown {
    let s = |ns: u64| ns as f64 / NS_PER_SEC as f64;
    let v = p.flash_voltage;
    let flash_op_j = v
        * 1e-3
        * (p.i_read_ma * s(x.read_cell_ns) + p.i_program_ma * s(x.program_cell_ns) + p.i_erase_ma * s(x.erase_cell_ns));
    let flash_idle_j = v * (p.i_busidle_ma * 1e-3 * s(x.bus_idle_ns) + p.i_standby_ua * 1e-6 * s(x.die_idle_ns));
    let phy_j = p.phy_pj_per_bit * 1e-12 * x.link_bits as f64;
    let processor_j = p.processor_w / f64::from(p.processor_ref_cores.max(1)) * s(x.core_busy_ns);
    let dram_j = p.dram_pj_per_bit * 1e-12 * x.dram_bits as f64;
    let total_j = flash_op_j + flash_idle_j + phy_j + processor_j + dram_j;
    EnergyBreakdown {
        flash_op_j,
        flash_idle_j,
        phy_j,
        processor_j,
        dram_j,
        total_j,
    }
}

/// Per-command time in each bucket; queueing is kept apart.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LatencyBreakdown {
    pub host: u64,
    pub host_ssd: u64,
    pub processor: u64,
    pub dram: u64,
    pub flash: u64,
    pub inter_ssd: u64,
    pub queueing: u64,
}

impl LatencyBreakdown {
    pub fn service(&self) -> u64 {
        self.host + self.host_ssd + self.processor + self.dram + self.flash + self.inter_ssd
    }

    pub fn total(&self) -> u64 {
        self.service() + self.queueing
    }

    pub fn add(&mut self, o: &LatencyBreakdown) {
        self.host += o.host;
        self.host_ssd += o.host_ssd;
        self.processor += o.processor;
        self.dram += o.dram;
        self.flash += o.flash;
        self.inter_ssd += o.inter_ssd;
        self.queueing += o.queueing;
    }
}

/// Mean nanoseconds per bucket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BucketMeans {
    pub host: f64,
    pub host_ssd: f64,
    pub processor: f64,
    pub dram: f64,
    pub flash: f64,
    pub inter_ssd: f64,
    pub queueing: f64,
}

impl BucketMeans {
    pub fn of(sum: &LatencyBreakdown, n: u64) -> Self {
        let d = n.max(1) as f64;
        Self {
            host: sum.host as f64 / d,
            host_ssd: sum.host_ssd as f64 / d,
            processor: sum.processor as f64 / d,
            dram: sum.dram as f64 / d,
            flash: sum.flash as f64 / d,
            inter_ssd: sum.inter_ssd as f64 / d,
            queueing: sum.queueing as f64 / d,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: u64,
    pub mean_ns: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub max_ns: u64,
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn summarize(samples: &mut [u64]) -> LatencySummary {
    if samples.is_empty() {
        return LatencySummary::default();
    }
    samples.sort_unstable();
    let sum: u128 = samples.iter().map(|&x| u128::from(x)).sum();
    LatencySummary {
        count: samples.len() as u64,
        mean_ns: sum as f64 / samples.len() as f64,
        p50_ns: percentile(samples, 0.50),
        p99_ns: percentile(samples, 0.99),
        max_ns: *samples.last().expect("nonempty"),
    }
}

/// One sampling window of one device.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct WindowSample {
    pub t_ms: f64,
    pub bytes: u64,
    pub gbps: f64,
    pub proc_util: f64,
    pub own_proc_util: f64,
    pub flash_util: f64,
    pub miss_ratio: f64,
    pub p_redirect: f64,
    pub local_segments: u32,
    pub borrowed_segments: u32,
    pub lent_segments: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HarvestEvent {
    pub t_ns: Time,
    pub kind: String,
    pub borrower: u16,
    pub lender: u16,
    pub amount: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DeviceReport {
    pub id: u16,
    pub workload: String,
    pub commands: u64,
    pub errors: u64,
    pub redirected: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub throughput_gbps: f64,
    pub iops: f64,
    pub latency: LatencySummary,
    pub read_latency: LatencySummary,
    pub write_latency: LatencySummary,
    pub breakdown: BucketMeans,
    pub proc_util: f64,
    pub own_proc_util: f64,
    pub flash_util: f64,
    pub miss_ratio: f64,
    pub steady_miss_ratio: f64,
    pub write_amplification: f64,
    /// Bytes copied home from lenders after a virtual-harvest burst.
    pub copyback_bytes: u64,
    pub dwpd: f64,
    pub flash_bytes_written: u64,
    pub gc_runs: u64,
    pub energy: EnergyBreakdown,
    pub series: Vec<WindowSample>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AggregateReport {
    pub commands: u64,
    pub errors: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub throughput_gbps: f64,
    pub latency: LatencySummary,
    pub breakdown: BucketMeans,
    pub proc_util: f64,
    pub flash_util: f64,
    pub flash_bytes_written: u64,
    pub host_util: f64,
    pub energy: EnergyBreakdown,
    pub bom_per_ssd: f64,
    pub bom_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IntegrityReport {
    pub reads_checked: u64,
    pub violations: u64,
    pub first_violation: Option<String>,
    pub duplicate_completions: u64,
    /// Commands outstanding at the end that completed while draining.
    pub drained: u64,
    /// Commands that never completed, even after draining.
    pub lost_commands: u64,
    pub recoveries: u64,
    pub recovered_pages: u64,
    pub replayed_records: u64,
    pub resubmitted: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub scenario: String,
    pub variant: Variant,
    pub seed: u64,
    pub measured_ns: Time,
    pub events: u64,
    pub aggregate: AggregateReport,
    pub devices: Vec<DeviceReport>,
    pub harvest_timeline: Vec<HarvestEvent>,
    pub integrity: IntegrityReport,
    pub config: ScenarioConfig,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "schema_version,variant,device,workload,commands,errors,throughput_gbps,iops,mean_ns,p50_ns,p99_ns,proc_util,own_proc_util,flash_util,miss_ratio,write_amplification,dwpd,energy_j\n",
        );
        for d in &self.devices {
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.6},{:.1},{:.1},{},{},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.6}\n",
                SCHEMA_VERSION,
                self.variant,
                d.id,
                d.workload,
                d.commands,
                d.errors,
                d.throughput_gbps,
                d.iops,
                d.latency.mean_ns,
                d.latency.p50_ns,
                d.latency.p99_ns,
                d.proc_util,
                d.own_proc_util,
                d.flash_util,
                d.miss_ratio,
                d.write_amplification,
                d.dwpd,
                d.energy.total_j
            ));
        }
        let a = &self.aggregate;
        s.push_str(&format!(
            "{},{},all,,{},{},{:.6},,{:.1},{},{},{:.6},,{:.6},,,,{:.6}\n",
            SCHEMA_VERSION,
            self.variant,
            a.commands,
            a.errors,
            a.throughput_gbps,
            a.latency.mean_ns,
            a.latency.p50_ns,
            a.latency.p99_ns,
            a.proc_util,
            a.flash_util,
            a.energy.total_j
        ));
        s
    }

    /// Write `report.json`, `summary.csv` and `config.toml` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::File::create(dir.join("report.json"))?.write_all(self.to_json().as_bytes())?;
        std::fs::File::create(dir.join("summary.csv"))?.write_all(self.summary_csv().as_bytes())?;
        std::fs::File::create(dir.join("config.toml"))?.write_all(self.config.to_toml().as_bytes())?;
        Ok(())
    }
}
