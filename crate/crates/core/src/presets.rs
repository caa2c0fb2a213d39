//! Named scenarios and sweep grids. The files under `scenarios/` are these
//! configurations serialized.

use crate::config::{ScenarioConfig, Variant, WorkloadBinding, WorkloadSource};
use crate::flash::FlashGeometry;
use crate::workload::{MicroKind, Microbench, Op};

pub const SCENARIOS: [&str; 9] = [
    "micro-read-64k",
    "micro-write-4k",
    "calib-read",
    "calib-write",
    "dram-harvest",
    "lender-impact",
    "vh-read",
    "vh-write",
    "lender-failure",
];

pub const SWEEPS: [&str; 4] = ["cores-ratio", "oc-scaling", "variants", "lender-impact"];

const GIB: u64 = 1 << 30;

pub fn micro(
    devices: impl IntoIterator<Item = u16>,
    kind: MicroKind,
    op: Op,
    size: u64,
    iodepth: u32,
    footprint: u64,
) -> WorkloadBinding {
    WorkloadBinding {
        devices: devices.into_iter().collect(),
        source: WorkloadSource::Micro(Microbench {
            kind,
            op,
            size,
            iodepth,
            footprint_bytes: footprint,
        }),
        start_ms: 0.0,
        stop_ms: None,
    }
}

fn base(name: &str, variant: Variant) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        variant,
        ..Default::default()
    }
}

/// Small-capacity geometry used where footprints must be comparable to the
/// mapping cache.
pub fn desk_geometry() -> FlashGeometry {
    FlashGeometry {
        blocks_per_plane: 16,
        pages_per_block: 512,
        ..Default::default()
    }
}

pub fn scenario(name: &str) -> Option<ScenarioConfig> {
    let c = match name {
        "micro-read-64k" => {
            let mut c = base(name, Variant::Xbof);
            c.workloads
                .push(micro(0..6, MicroKind::Rand, Op::Read, 64 << 10, 64, 64 * GIB));
            c
        }
        "micro-write-4k" => {
            let mut c = base(name, Variant::Xbof);
            c.workloads
                .push(micro(0..6, MicroKind::Rand, Op::Write, 4 << 10, 64, 64 * GIB));
            c
        }
        "calib-read" => {
            let mut c = base(name, Variant::Shrunk);
            c.ssd_count = 1;
            c.workloads
                .push(micro([0], MicroKind::Seq, Op::Read, 64 << 10, 64, 64 * GIB));
            c
        }
        "calib-write" => {
            let mut c = base(name, Variant::Shrunk);
            c.ssd_count = 1;
            c.workloads
                .push(micro([0], MicroKind::Seq, Op::Write, 4 << 10, 64, 64 * GIB));
            c
        }
        "dram-harvest" => {
            let mut c = base(name, Variant::Xbof);
            c.flash = desk_geometry();
            c.duration_ms = 300.0;
            c.warmup_ms = 150.0;
            c.ssd.prewarm_map = false;
            c.workloads
                .push(micro(0..6, MicroKind::Rand, Op::Read, 4 << 10, 32, 24 * GIB));
            c
        }
        "lender-impact" => {
            let mut c = base(name, Variant::Xbof);
            c.harvest.shadow_weight = 1;
            c.workloads
                .push(micro(0..6, MicroKind::Rand, Op::Read, 64 << 10, 64, 64 * GIB));
            c.workloads
                .push(micro(6..12, MicroKind::Rand, Op::Read, 4 << 10, 1, 64 * GIB));
            c
        }
        "vh-read" => {
            let mut c = base(name, Variant::Vh);
            c.workloads
                .push(micro(0..6, MicroKind::Rand, Op::Read, 64 << 10, 64, 64 * GIB));
            c
        }
        "vh-write" => {
            let mut c = base(name, Variant::VhIdeal);
            c.duration_ms = 160.0;
            c.warmup_ms = 50.0;
            let mut w = micro(0..6, MicroKind::Seq, Op::Write, 64 << 10, 64, 64 * GIB);
            w.stop_ms = Some(110.0);
            c.workloads.push(w);
            c
        }
        "lender-failure" => {
            // Borrower 0 takes DRAM from device 1 early, then device 1 fails
            // while offsite mapping pages take writes.
            let mut c = base(name, Variant::Xbof);
            c.flash = desk_geometry();
            c.ssd_count = 2;
            c.duration_ms = 40.0;
            c.warmup_ms = 5.0;
            c.ssd.dram_mb_per_tb = 256.0;
            c.harvest.window_ms = 1.0;
            c.harvest.dram_period_windows = 2;
            c.harvest.shards_rate = 1.0;
            c.harvest.dram.min_samples = 1500;
            c.workloads
                .push(micro([0], MicroKind::Rand, Op::Write, 4 << 10, 32, 6 * GIB));
            c.failures.push(crate::config::FailureInjection {
                device: 1,
                at_ms: 25.0,
                kind: crate::config::FailureKind::LenderFail,
            });
            c
        }
        _ => return None,
    };
    Some(c)
}

/// Configurations of a sweep, each with a distinct name.
pub fn sweep(name: &str) -> Option<Vec<ScenarioConfig>> {
    let v = match name {
        // Borrower:lender SSD ratios 11:1 .. 1:11 at 1, 2 and 3 cores per SSD.
        "cores-ratio" => {
            let mut out = Vec::new();
            for cores in 1..=3u32 {
                for borrowers in (1..=11u16).rev() {
                    for variant in [Variant::Shrunk, Variant::Xbof] {
                        let mut c = base(
                            &format!("cores{cores}-ratio{borrowers}to{}-{variant}", 12 - borrowers),
                            variant,
                        );
                        c.ssd.cores = Some(cores);
                        c.workloads
                            .push(micro(0..borrowers, MicroKind::Rand, Op::Read, 64 << 10, 64, 64 * GIB));
                        out.push(c);
                    }
                }
            }
            out
        }
        "oc-scaling" => (1..=12u16)
            .map(|n| {
                let mut c = base(&format!("oc-{n}"), Variant::Oc);
                c.ssd_count = n;
                c.workloads
                    .push(micro(0..n, MicroKind::Rand, Op::Read, 64 << 10, 64, 64 * GIB));
                c
            })
            .collect(),
        "variants" => Variant::ALL
            .iter()
            .map(|&v| {
                let mut c = scenario("micro-read-64k").expect("preset");
                c.name = format!("micro-read-64k-{v}");
                c.variant = v;
                c
            })
            .collect(),
        "lender-impact" => [Variant::Shrunk, Variant::Xbof]
            .iter()
            .map(|&v| {
                let mut c = scenario("lender-impact").expect("preset");
                c.name = format!("lender-impact-{v}");
                c.variant = v;
                c
            })
            .collect(),
        _ => return None,
    };
    Some(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for n in SCENARIOS {
            let c = scenario(n).unwrap();
            c.validate().unwrap_or_else(|e| panic!("{n}: {e}"));
            assert_eq!(c.name, n);
        }
        for n in SWEEPS {
            let v = sweep(n).unwrap();
            assert!(!v.is_empty());
            let mut names: Vec<&str> = v.iter().map(|c| c.name.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            assert_eq!(names.len(), v.len(), "{n}: duplicate names");
            for c in &v {
                c.validate().unwrap();
            }
        }
        assert!(scenario("nope").is_none());
        assert_eq!(sweep("cores-ratio").unwrap().len(), 66);
    }

    #[test]
    fn desk_geometry_is_32_gib() {
        assert_eq!(desk_geometry().capacity_bytes(), 32 * GIB);
    }
}
