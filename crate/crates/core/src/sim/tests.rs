use super::*;
use crate::config::{FailureInjection, FailureKind, WorkloadBinding};
use crate::workload::MicroKind;

pub(crate) fn micro(devices: &[u16], op: Op, kind: MicroKind, size: u64, iodepth: u32) -> WorkloadBinding {
    WorkloadBinding {
        devices: devices.to_vec(),
        source: WorkloadSource::Micro(Microbench {
            kind,
            op,
            size,
            iodepth,
            footprint_bytes: 1 << 30,
        }),
        start_ms: 0.0,
        stop_ms: None,
    }
}

fn small(variant: Variant, ssds: u16) -> ScenarioConfig {
    let mut c = ScenarioConfig {
        variant,
        ssd_count: ssds,
        duration_ms: 30.0,
        warmup_ms: 10.0,
        ..Default::default()
    };
    c.workloads.clear();
    c
}

#[test]
fn read_smoke_completes_and_verifies() {
    let mut c = small(Variant::Conv, 2);
    c.workloads.push(micro(&[0], Op::Read, MicroKind::Rand, 65536, 32));
    let r = run(c).unwrap();
    let d = &r.devices[0];
    assert!(d.commands > 100, "{}", d.commands);
    assert!(d.throughput_gbps > 1.0, "{}", d.throughput_gbps);
    assert_eq!(r.integrity.violations, 0);
    assert_eq!(r.integrity.duplicate_completions, 0);
    assert!(r.integrity.reads_checked > 0);
}

#[test]
fn write_smoke_keeps_tokens() {
    let mut c = small(Variant::Shrunk, 2);
    c.workloads.push(micro(&[0, 1], Op::Write, MicroKind::Rand, 4096, 16));
    let mut sim = Sim::new(c).unwrap();
    sim.run_until(30 * NS_PER_MS).unwrap();
    assert_eq!(sim.verify_all_tokens(), 0);
    let r = sim.report();
    assert!(r.devices[1].commands > 100);
    assert_eq!(r.integrity.violations, 0);
}

#[test]
fn same_seed_same_report() {
    let mk = || {
        let mut c = small(Variant::Xbof, 4);
        c.workloads.push(micro(&[0], Op::Read, MicroKind::Rand, 65536, 64));
        c.workloads.push(micro(&[1], Op::Write, MicroKind::Rand, 16384, 8));
        c
    };
    let a = run(mk()).unwrap().to_json();
    let b = run(mk()).unwrap().to_json();
    assert_eq!(a, b);
}

#[test]
fn every_variant_runs() {
    for v in Variant::ALL {
        let mut c = small(v, 3);
        c.duration_ms = 40.0;
        c.workloads.push(micro(&[0], Op::Read, MicroKind::Rand, 65536, 64));
        c.workloads.push(micro(&[1], Op::Write, MicroKind::Seq, 65536, 16));
        let r = run(c).unwrap();
        assert!(r.aggregate.commands > 0, "{v}");
        assert_eq!(r.integrity.violations, 0, "{v}: {:?}", r.integrity.first_violation);
        assert_eq!(r.integrity.duplicate_completions, 0, "{v}");
    }
}

#[test]
fn lender_failure_is_detected() {
    let mut c = small(Variant::Xbof, 3);
    c.duration_ms = 60.0;
    c.workloads.push(micro(&[0], Op::Read, MicroKind::Rand, 65536, 64));
    c.failures.push(FailureInjection {
        device: 1,
        at_ms: 35.0,
        kind: FailureKind::LenderFail,
    });
    let r = run(c).unwrap();
    assert!(r.harvest_timeline.iter().any(|e| e.kind == "detect" && e.borrower == 1));
    assert_eq!(r.integrity.violations, 0);
    assert!(r.devices[0].commands > 0);
}
