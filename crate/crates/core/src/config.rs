//! Scenario configuration: a TOML document with defaults for every field,
//! dotted-path overrides and validation before any simulation starts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{Time, NS_PER_MS};
use crate::error::{Result, SimError};
use crate::fabric::FabricConfig;
use crate::flash::{FlashGeometry, FlashTiming};
use crate::ftl::FtlConfig;
use crate::harvest::policy::DramPolicy;
use crate::metrics::{CostModel, EnergyParams};
use crate::workload::{Microbench, SyntheticProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Conv,
    Shrunk,
    Oc,
    Vh,
    VhIdeal,
    Proch,
    Xbof,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Conv,
        Variant::Shrunk,
        Variant::Oc,
        Variant::Vh,
        Variant::VhIdeal,
        Variant::Proch,
        Variant::Xbof,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Conv => "conv",
            Variant::Shrunk => "shrunk",
            Variant::Oc => "oc",
            Variant::Vh => "vh",
            Variant::VhIdeal => "vh-ideal",
            Variant::Proch => "proch",
            Variant::Xbof => "xbof",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            SimError::Config(format!(
                "variant: unknown {s:?} (expected one of conv, shrunk, oc, vh, vh-ideal, proch, xbof)"
            ))
        })
    }

    /// Half the cores and DRAM of the conventional SSD.
    pub fn shrunk_resources(self) -> bool {
        !matches!(self, Variant::Conv | Variant::Oc)
    }

    pub fn harvests_processor(self) -> bool {
        matches!(self, Variant::Xbof | Variant::Proch)
    }

    pub fn harvests_dram(self) -> bool {
        self == Variant::Xbof
    }

    pub fn virtual_groups(self) -> bool {
        matches!(self, Variant::Vh | Variant::VhIdeal)
    }

    pub fn copyback(self) -> bool {
        self == Variant::Vh
    }

    pub fn firmware_on_host(self) -> bool {
        self == Variant::Oc
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Firmware cost per step, in core cycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FirmwareCosts {
    pub fetch_parse: u64,
    pub translate: u64,
    pub dma_issue: u64,
    pub flash_issue: u64,
    pub completion: u64,
    pub sync_overhead: u64,
}

impl Default for FirmwareCosts {
    /// Calibrated profile; see README for the procedure.
    fn default() -> Self {
        Self {
            fetch_parse: 440,
            translate: 1040,
            dma_issue: 370,
            flash_issue: 500,
            completion: 300,
            sync_overhead: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsdConfig {
    /// `None` picks the variant default (6, or 3 for halved variants).
    pub cores: Option<u32>,
    pub frequency_hz: f64,
    /// `None` derives DRAM from `dram_mb_per_tb` and the variant.
    pub dram_mb: Option<u64>,
    pub dram_mb_per_tb: f64,
    pub dram_latency_ns: Time,
    pub dma_read_gbps: f64,
    pub dma_write_gbps: f64,
    pub agent_unwrap_ns: Time,
    pub log_commit_ns: Time,
    pub pcie_latency_ns: Time,
    pub normal_qps: u16,
    pub sq_depth: u32,
    /// Load mapping pages into DRAM before the run, up to capacity.
    pub prewarm_map: bool,
    pub firmware: FirmwareCosts,
}

impl Default for SsdConfig {
    fn default() -> Self {
        Self {
            cores: None,
            frequency_hz: 1e9,
            dram_mb: None,
            dram_mb_per_tb: 1024.0,
            dram_latency_ns: 80,
            dma_read_gbps: 14.0,
            dma_write_gbps: 10.0,
            agent_unwrap_ns: 114,
            log_commit_ns: 322,
            pcie_latency_ns: 500,
            normal_qps: 1,
            sq_depth: 1024,
            prewarm_map: true,
            firmware: FirmwareCosts::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct SsdOverride {
    pub device: u16,
    pub cores: Option<u32>,
    pub dram_mb: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostConfig {
    pub cores: u32,
    pub frequency_hz: f64,
    pub dram_gb: f64,
    /// Host time per command, split evenly between submission and completion.
    pub per_command_ns: Time,
    pub redirect_ns: Time,
    /// Multiplier on firmware work executed by host cores (OC).
    pub oc_overhead: f64,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self {
            cores: 16,
            frequency_hz: 2.1e9,
            dram_gb: 16.0,
            per_command_ns: 1000,
            redirect_ns: 20,
            oc_overhead: 1.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarvestConfig {
    pub watermark: f64,
    pub window_ms: f64,
    pub shadow_qps: u16,
    pub normal_weight: u32,
    pub shadow_weight: u32,
    pub max_lenders: u32,
    pub shards_rate: f64,
    /// DRAM decisions run every this many windows.
    pub dram_period_windows: u32,
    pub dram: DramPolicy,
    /// Average each new redirect probability with the previous one.
    pub damping: bool,
    pub stale_windows: u32,
    pub timeout_ms: f64,
    pub timeout_strikes: u32,
    /// Windows above the watermark before a virtual group forms.
    pub vh_burst_windows: u32,
    pub vh_max_members: u32,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            watermark: 0.75,
            window_ms: 10.0,
            shadow_qps: 4,
            normal_weight: 4,
            shadow_weight: 1,
            max_lenders: 4,
            shards_rate: 0.1,
            dram_period_windows: 5,
            dram: DramPolicy::default(),
            damping: true,
            stale_windows: 2,
            timeout_ms: 1.0,
            timeout_strikes: 3,
            vh_burst_windows: 2,
            vh_max_members: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WorkloadSource {
    Micro(Microbench),
    Synthetic(SyntheticProfile),
    /// A row of the trace statistics table.
    Named {
        name: String,
        footprint_bytes: u64,
        iops: f64,
    },
    Trace {
        path: String,
    },
    Idle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadBinding {
    pub devices: Vec<u16>,
    pub source: WorkloadSource,
    /// Start time of the workload.
    #[serde(default)]
    pub start_ms: f64,
    /// Stop issuing after this time (default: run end).
    #[serde(default)]
    pub stop_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    LenderFail,
    BorrowerFail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureInjection {
    pub device: u16,
    pub at_ms: f64,
    pub kind: FailureKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub variant: Variant,
    pub seed: u64,
    pub ssd_count: u16,
    pub duration_ms: f64,
    /// Metrics ignore completions before this time.
    pub warmup_ms: f64,
    pub flash: FlashGeometry,
    pub timing: FlashTiming,
    pub ftl: FtlConfig,
    pub fabric: FabricConfig,
    pub ssd: SsdConfig,
    pub host: HostConfig,
    pub harvest: HarvestConfig,
    pub energy: EnergyParams,
    pub cost: CostModel,
    pub workloads: Vec<WorkloadBinding>,
    pub overrides: Vec<SsdOverride>,
    pub failures: Vec<FailureInjection>,
    pub output_dir: Option<String>,
    pub event_trace: bool,
    /// Check every read against the independent written-token model.
    pub check_integrity: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            variant: Variant::Xbof,
            seed: 1,
            ssd_count: 12,
            duration_ms: 100.0,
            warmup_ms: 20.0,
            flash: FlashGeometry::default(),
            timing: FlashTiming::default(),
            ftl: FtlConfig::default(),
            fabric: FabricConfig::default(),
            ssd: SsdConfig::default(),
            host: HostConfig::default(),
            harvest: HarvestConfig::default(),
            energy: EnergyParams::default(),
            cost: CostModel::default(),
            workloads: Vec::new(),
            overrides: Vec::new(),
            failures: Vec::new(),
            output_dir: None,
            event_trace: false,
            check_integrity: true,
        }
    }
}

/// Per-device parameters after variant defaults and overrides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceParams {
    pub cores: u32,
    pub dram_bytes: u64,
}

pub const SEGMENT_BYTES: u64 = 2 << 20;

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Self::from_value(toml::from_str::<toml::Table>(s).map_err(|e| SimError::Config(e.to_string()))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    fn from_value(t: toml::Table) -> Result<Self> {
        toml::Value::Table(t)
            .try_into()
            .map_err(|e: toml::de::Error| SimError::Config(e.to_string()))
    }

    /// Parse, apply `key=value` overrides with dotted keys, then validate.
    pub fn load_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut t: toml::Table = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut t, o)?;
        }
        let c = Self::from_value(t)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn duration_ns(&self) -> Time {
        (self.duration_ms * NS_PER_MS as f64).round() as Time
    }

    pub fn warmup_ns(&self) -> Time {
        (self.warmup_ms * NS_PER_MS as f64).round() as Time
    }

    pub fn window_ns(&self) -> Time {
        (self.harvest.window_ms * NS_PER_MS as f64).round() as Time
    }

    pub fn device(&self, id: u16) -> DeviceParams {
        let half = self.variant.shrunk_resources();
        let mut cores = self.ssd.cores.unwrap_or(if half { 3 } else { 6 });
        let tb = self.flash.capacity_bytes() as f64 / (1u64 << 40) as f64;
        let mut dram_mb = self.ssd.dram_mb.unwrap_or_else(|| {
            let mb = (self.ssd.dram_mb_per_tb * tb).round() as u64;
            if half {
                mb / 2
            } else {
                mb
            }
        });
        for o in self.overrides.iter().filter(|o| o.device == id) {
            if let Some(c) = o.cores {
                cores = c;
            }
            if let Some(d) = o.dram_mb {
                dram_mb = d;
            }
        }
        if self.variant.firmware_on_host() {
            // Metadata lives in host DRAM, split evenly between devices.
            let share = (self.host.dram_gb * 1024.0 / f64::from(self.ssd_count.max(1))) as u64;
            dram_mb = share;
        }
        DeviceParams {
            cores,
            dram_bytes: dram_mb << 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: &str| Err(SimError::Config(format!("{f}: {m}")));
        if self.ssd_count == 0 {
            return err("ssd_count", "must be >= 1");
        }
        if self.ssd_count > 250 {
            return err("ssd_count", "must be <= 250");
        }
        if !(self.duration_ms > 0.0) {
            return err("duration_ms", "must be > 0");
        }
        if !(self.warmup_ms >= 0.0 && self.warmup_ms < self.duration_ms) {
            return err("warmup_ms", "must be in [0, duration_ms)");
        }
        self.flash.validate()?;
        self.timing.validate()?;
        self.ftl.validate()?;
        self.fabric.validate()?;
        let h = &self.harvest;
        if !(h.watermark > 0.0 && h.watermark < 1.0) {
            return err("harvest.watermark", "must be in (0, 1)");
        }
        if !(h.window_ms > 0.0) {
            return err("harvest.window_ms", "must be > 0");
        }
        if !(h.shards_rate > 0.0 && h.shards_rate <= 1.0) {
            return err("harvest.shards_rate", "must be in (0, 1]");
        }
        if h.normal_weight == 0 || h.shadow_weight == 0 {
            return err("harvest weights", "must be >= 1");
        }
        if h.shadow_qps == 0 {
            return err("harvest.shadow_qps", "must be >= 1");
        }
        if h.timeout_strikes == 0 || !(h.timeout_ms > 0.0) {
            return err("harvest.timeout", "timeout_ms and timeout_strikes must be positive");
        }
        if self.ssd.normal_qps == 0 || self.ssd.sq_depth == 0 {
            return err("ssd", "normal_qps and sq_depth must be >= 1");
        }
        if !(self.ssd.frequency_hz > 0.0 && self.host.frequency_hz > 0.0) {
            return err("frequency_hz", "must be > 0");
        }
        if !(self.ssd.dma_read_gbps > 0.0 && self.ssd.dma_write_gbps > 0.0) {
            return err("ssd.dma", "rates must be > 0");
        }
        if self.host.cores == 0 {
            return err("host.cores", "must be >= 1");
        }
        for o in &self.overrides {
            if o.device >= self.ssd_count {
                return err("overrides.device", &format!("device {} does not exist", o.device));
            }
        }
        for id in 0..self.ssd_count {
            let d = self.device(id);
            if d.cores == 0 && !self.variant.firmware_on_host() {
                return err("cores", &format!("device {id} needs at least one core"));
            }
            if d.dram_bytes < SEGMENT_BYTES {
                return err("dram", &format!("device {id} has less than one 2 MB segment"));
            }
        }
        let mut bound = std::collections::BTreeSet::new();
        for (i, w) in self.workloads.iter().enumerate() {
            for &d in &w.devices {
                if d >= self.ssd_count {
                    return err(
                        &format!("workloads[{i}].devices"),
                        &format!("device {d} does not exist"),
                    );
                }
                if !bound.insert(d) {
                    return err(&format!("workloads[{i}].devices"), &format!("device {d} bound twice"));
                }
            }
            match &w.source {
                WorkloadSource::Micro(m) => m.validate()?,
                WorkloadSource::Synthetic(p) => p.validate()?,
                WorkloadSource::Named { name, .. } => {
                    if crate::workload::named_profile(name, 1 << 30, 1.0).is_none() {
                        return err(&format!("workloads[{i}].name"), &format!("unknown profile {name:?}"));
                    }
                }
                WorkloadSource::Trace { .. } | WorkloadSource::Idle => {}
            }
        }
        for f in &self.failures {
            if f.device >= self.ssd_count {
                return err("failures.device", &format!("device {} does not exist", f.device));
            }
            if !(f.at_ms >= 0.0) {
                return err("failures.at_ms", "must be >= 0");
            }
        }
        Ok(())
    }
}

/// Set `a.b.c=value` in a TOML table. The value is parsed as TOML when
/// possible, else taken as a string.
pub fn apply_override(t: &mut toml::Table, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| SimError::Config(format!("override {kv:?}: expected key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut tt) => tt.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = t;
    for p in &parts[..parts.len() - 1] {
        let e = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = e
            .as_table_mut()
            .ok_or_else(|| SimError::Config(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = ScenarioConfig::default();
        c.validate().unwrap();
        let back = ScenarioConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn variant_resources() {
        let mut c = ScenarioConfig {
            variant: Variant::Conv,
            ..Default::default()
        };
        assert_eq!(c.device(0).cores, 6);
        assert_eq!(c.device(0).dram_bytes, 4 << 30);
        c.variant = Variant::Xbof;
        assert_eq!(c.device(0).cores, 3);
        assert_eq!(c.device(0).dram_bytes, 2 << 30);
        c.overrides.push(SsdOverride {
            device: 1,
            cores: Some(1),
            dram_mb: None,
        });
        assert_eq!(c.device(1).cores, 1);
    }

    #[test]
    fn overrides_apply() {
        let text = "variant = \"conv\"\n";
        let c = ScenarioConfig::load_with_overrides(
            text,
            &["harvest.watermark=0.8".into(), "variant=xbof".into(), "seed=9".into()],
        )
        .unwrap();
        assert_eq!(c.harvest.watermark, 0.8);
        assert_eq!(c.variant, Variant::Xbof);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn field_level_errors() {
        let e = ScenarioConfig::load_with_overrides("ssd_count = 0\n", &[]).unwrap_err();
        assert!(e.to_string().contains("ssd_count"), "{e}");
        let e = ScenarioConfig::from_toml_str("bogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let text = "ssd_count = 2\n[[workloads]]\ndevices = [5]\nsource = { kind = \"idle\" }\n";
        let e = ScenarioConfig::load_with_overrides(text, &[]).unwrap_err();
        assert!(e.to_string().contains("device 5"), "{e}");
    }

    #[test]
    fn workload_tables_parse() {
        let text = r#"
[[workloads]]
devices = [0, 1]
source = { kind = "micro", kind_ = 0 }
"#;
        assert!(ScenarioConfig::from_toml_str(text).is_err());
        let text = r#"
[[workloads]]
devices = [0, 1]
[workloads.source]
kind = "micro"
op = "R"
size = 65536
iodepth = 64
footprint_bytes = 1073741824
[workloads.source.pattern]
"#;
        // `pattern` is not a microbench field.
        assert!(ScenarioConfig::from_toml_str(text).is_err());
        let text = r#"
[[workloads]]
devices = [0, 1]
[workloads.source]
kind = "micro"
access = "rand"
op = "R"
size = 65536
iodepth = 64
footprint_bytes = 1073741824
"#;
        let c = ScenarioConfig::from_toml_str(text).unwrap();
        let back = ScenarioConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        assert!(matches!(back.workloads[0].source, WorkloadSource::Micro(m) if m.iodepth == 64));
    }
}
