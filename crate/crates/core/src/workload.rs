//! Command sources: trace files, synthetic generators built from read/write
//! statistics, and closed-loop microbenchmarks.
//!
//! Trace schema (CSV with header):
//!
//! ```text
//! timestamp_us,device_id,op,offset,size
//! 0,0,R,0,4096
//! 12.5,3,W,1048576,65536
//! ```
//!
//! `op` is `R` or `W`; offset and size are bytes.

use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

pub const SLICE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "R")]
    Read,
    #[serde(rename = "W")]
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub timestamp_us: f64,
    pub device_id: u16,
    pub op: Op,
    pub offset: u64,
    pub size: u64,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct LoadedTrace {
    pub records: Vec<TraceRecord>,
    pub malformed: usize,
    pub reordered_devices: Vec<u16>,
}

const HEADER: [&str; 5] = ["timestamp_us", "device_id", "op", "offset", "size"];

/// Parse a trace. Malformed rows are skipped with a warning; rows of one
/// device that go back in time are stable-sorted per device.
pub fn read_trace<R: Read>(input: R) -> Result<LoadedTrace> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out = LoadedTrace::default();
    let mut rows = rdr.records();
    match rows.next() {
        None => return Ok(out),
        Some(Err(e)) => {
            return Err(SimError::TraceParse {
                line: 1,
                msg: e.to_string(),
            })
        }
        Some(Ok(h)) => {
            let got: Vec<&str> = h.iter().collect();
            if got != HEADER {
                return Err(SimError::TraceParse {
                    line: 1,
                    msg: format!("expected header {}", HEADER.join(",")),
                });
            }
        }
    }
    for (i, row) in rows.enumerate() {
        let line = i + 2;
        let rec = row.map_err(|e| e.to_string()).and_then(|r| parse_row(&r));
        match rec {
            Ok(r) => out.records.push(r),
            Err(msg) => {
                warn!("trace line {line}: {msg}; skipped");
                out.malformed += 1;
            }
        }
    }
    normalize(&mut out);
    Ok(out)
}

fn parse_row(r: &csv::StringRecord) -> std::result::Result<TraceRecord, String> {
    if r.len() != 5 {
        return Err(format!("expected 5 fields, found {}", r.len()));
    }
    let ts: f64 = r[0].parse().map_err(|_| format!("bad timestamp {:?}", &r[0]))?;
    if !ts.is_finite() || ts < 0.0 {
        return Err(format!("bad timestamp {ts}"));
    }
    let device_id = r[1].parse().map_err(|_| format!("bad device {:?}", &r[1]))?;
    let op = match &r[2] {
        "R" => Op::Read,
        "W" => Op::Write,
        o => return Err(format!("bad op {o:?}")),
    };
    let offset = r[3].parse().map_err(|_| format!("bad offset {:?}", &r[3]))?;
    let size: u64 = r[4].parse().map_err(|_| format!("bad size {:?}", &r[4]))?;
    if size == 0 {
        return Err("zero size".into());
    }
    Ok(TraceRecord {
        timestamp_us: ts,
        device_id,
        op,
        offset,
        size,
    })
}

fn normalize(t: &mut LoadedTrace) {
    let mut last: std::collections::BTreeMap<u16, f64> = Default::default();
    let mut bad = std::collections::BTreeSet::new();
    for r in &t.records {
        let l = last.entry(r.device_id).or_insert(f64::MIN);
        if r.timestamp_us < *l {
            bad.insert(r.device_id);
        }
        *l = r.timestamp_us;
    }
    for d in &bad {
        warn!("trace device {d}: timestamps out of order; stable-sorted");
    }
    t.reordered_devices = bad.into_iter().collect();
    // A global stable sort keeps per-device order for equal timestamps.
    t.records.sort_by(|a, b| a.timestamp_us.total_cmp(&b.timestamp_us));
}

pub fn load_trace(path: &Path) -> Result<LoadedTrace> {
    let f = std::fs::File::open(path)?;
    read_trace(std::io::BufReader::new(f))
}

pub fn write_trace<W: Write>(out: W, records: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| SimError::Io(e.to_string());
    w.write_record(HEADER).map_err(io)?;
    for r in records {
        let op = match r.op {
            Op::Read => "R",
            Op::Write => "W",
        };
        w.write_record([
            format!("{}", r.timestamp_us),
            r.device_id.to_string(),
            op.to_string(),
            r.offset.to_string(),
            r.size.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Pattern {
    Sequential,
    Uniform,
    Zipf { theta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProfile {
    pub read_ratio: f64,
    pub mean_read_kb: f64,
    pub mean_write_kb: f64,
    pub footprint_bytes: u64,
    pub pattern: Pattern,
    /// Open-loop arrival rate.
    pub iops: f64,
}

impl SyntheticProfile {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.read_ratio) {
            return Err(SimError::Config("read_ratio must be in [0, 1]".into()));
        }
        if self.mean_read_kb < 4.0 || self.mean_write_kb < 4.0 {
            return Err(SimError::Config("mean sizes must be >= 4 KB".into()));
        }
        if self.footprint_bytes < SLICE {
            return Err(SimError::Config("footprint must hold at least one 4 KB page".into()));
        }
        if !(self.iops > 0.0) {
            return Err(SimError::Config("iops must be > 0".into()));
        }
        if let Pattern::Zipf { theta } = self.pattern {
            if !(theta > 0.0) {
                return Err(SimError::Config("zipf theta must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Read/write statistics of the production traces characterized in the
/// evaluation: (name, read ratio %, mean read KB, mean write KB).
pub const TRACE_STATS: [(&str, f64, f64, f64); 14] = [
    ("src", 11.3, 8.1, 7.1),
    ("DAP", 56.2, 62.1, 97.2),
    ("MSNFS", 67.2, 9.6, 11.1),
    ("mds", 92.8, 60.1, 13.8),
    ("YCSB-A", 98.0, 9.5, 743.3),
    ("Fuji-0", 82.7, 35.7, 10.7),
    ("Fuji-1", 86.3, 32.7, 13.3),
    ("Fuji-2", 87.6, 39.3, 6.7),
    ("Tencent-0", 84.3, 31.2, 8.8),
    ("Tencent-1", 2.0, 12.5, 289.5),
    ("Tencent-2", 98.2, 47.0, 7.0),
    ("Ali-0", 98.1, 37.0, 16.8),
    ("Ali-1", 81.3, 370.4, 394.5),
    ("Ali-2", 11.0, 26.0, 30.0),
];

/// Profile for a named trace row with the default zipf(0.99) pattern.
pub fn named_profile(name: &str, footprint_bytes: u64, iops: f64) -> Option<SyntheticProfile> {
    TRACE_STATS
        .iter()
        .find(|r| r.0.eq_ignore_ascii_case(name))
        .map(|&(_, rr, rkb, wkb)| SyntheticProfile {
            read_ratio: rr / 100.0,
            mean_read_kb: rkb.max(4.0),
            mean_write_kb: wkb.max(4.0),
            footprint_bytes,
            pattern: Pattern::Zipf { theta: 0.99 },
            iops,
        })
}

/// Size in bytes: 4 KB times (1 + Geometric), whose mean is `mean_kb`.
pub fn quantized_exp_size(rng: &mut ChaCha8Rng, mean_kb: f64) -> u64 {
    let units = mean_kb / 4.0;
    if units <= 1.0 {
        return SLICE;
    }
    let g = Geometric::new(1.0 / units).expect("valid geometric parameter");
    SLICE * (1 + g.sample(rng))
}

/// Offset generator over a footprint, in 4 KB units.
#[derive(Debug, Clone)]
pub struct OffsetGen {
    pattern: Pattern,
    pages: u64,
    cursor: u64,
    zipf: Option<Zipf<f64>>,
}

impl OffsetGen {
    pub fn new(pattern: Pattern, footprint_bytes: u64, start: u64) -> Self {
        let pages = (footprint_bytes / SLICE).max(1);
        let zipf = match pattern {
            Pattern::Zipf { theta } => Some(Zipf::new(pages as f64, theta).expect("valid zipf")),
            _ => None,
        };
        Self {
            pattern,
            pages,
            cursor: start % pages,
            zipf,
        }
    }

    /// Offset in bytes of a request of `size` bytes.
    pub fn next(&mut self, rng: &mut ChaCha8Rng, size: u64) -> u64 {
        let n = (size / SLICE).max(1);
        let span = self.pages.saturating_sub(n - 1).max(1);
        let page = match self.pattern {
            Pattern::Sequential => {
                if self.cursor + n > self.pages {
                    self.cursor = 0;
                }
                let p = self.cursor;
                self.cursor += n;
                p
            }
            Pattern::Uniform => rng.random_range(0..span),
            Pattern::Zipf { .. } => {
                let rank = self.zipf.as_ref().expect("zipf").sample(rng) as u64 - 1;
                // Scatter ranks over the footprint so hot pages are not adjacent.
                rank.wrapping_mul(0x9E37_79B9_7F4A_7C15) % span
            }
        };
        page * SLICE
    }
}

/// Open-loop stream for one device over `[0, duration_us)`.
pub fn generate(profile: &SyntheticProfile, device: u16, duration_us: f64, rng: &mut ChaCha8Rng) -> Vec<TraceRecord> {
    let mut offs = OffsetGen::new(profile.pattern, profile.footprint_bytes, 0);
    let gap = rand_distr::Exp::new(profile.iops / 1e6).expect("positive rate");
    let mut t = 0.0;
    let mut out = Vec::new();
    loop {
        t += gap.sample(rng);
        if t >= duration_us {
            break;
        }
        let read = rng.random::<f64>() < profile.read_ratio;
        let mean = if read {
            profile.mean_read_kb
        } else {
            profile.mean_write_kb
        };
        let size = quantized_exp_size(rng, mean).min(profile.footprint_bytes);
        let offset = offs.next(rng, size);
        out.push(TraceRecord {
            timestamp_us: t,
            device_id: device,
            op: if read { Op::Read } else { Op::Write },
            offset,
            size,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MicroKind {
    Seq,
    Rand,
}

/// Closed-loop fio-style job: keeps `iodepth` commands outstanding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Microbench {
    #[serde(rename = "access")]
    pub kind: MicroKind,
    pub op: Op,
    pub size: u64,
    pub iodepth: u32,
    pub footprint_bytes: u64,
}

impl Microbench {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(SLICE) {
            return Err(SimError::Config(
                "microbench size must be a positive multiple of 4096".into(),
            ));
        }
        if self.iodepth == 0 {
            return Err(SimError::Config("microbench iodepth must be >= 1".into()));
        }
        if self.footprint_bytes < self.size {
            return Err(SimError::Config("microbench footprint smaller than one request".into()));
        }
        Ok(())
    }

    pub fn offsets(&self, start: u64) -> OffsetGen {
        let p = match self.kind {
            MicroKind::Seq => Pattern::Sequential,
            MicroKind::Rand => Pattern::Uniform,
        };
        OffsetGen::new(p, self.footprint_bytes, start)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let t = read_trace(&b""[..]).unwrap();
        assert!(t.records.is_empty());
        assert_eq!(t.malformed, 0);
    }

    #[test]
    fn bad_header_reports_line_one() {
        let e = read_trace(&b"time,dev\n1,2\n"[..]).unwrap_err();
        assert!(matches!(e, SimError::TraceParse { line: 1, .. }));
    }

    #[test]
    fn malformed_rows_skipped() {
        let src = "timestamp_us,device_id,op,offset,size\n0,0,R,0,4096\n1,0,X,0,4096\n2,0,W,4096\n3,1,W,0,8192\n";
        let t = read_trace(src.as_bytes()).unwrap();
        assert_eq!(t.records.len(), 2);
        assert_eq!(t.malformed, 2);
    }

    #[test]
    fn out_of_order_sorted_with_warning() {
        let src = "timestamp_us,device_id,op,offset,size\n5,0,R,0,4096\n1,0,R,4096,4096\n3,1,W,0,4096\n";
        let t = read_trace(src.as_bytes()).unwrap();
        let ts: Vec<f64> = t.records.iter().map(|r| r.timestamp_us).collect();
        assert_eq!(ts, vec![1.0, 3.0, 5.0]);
        assert_eq!(t.reordered_devices, vec![0]);
    }

    #[test]
    fn generated_trace_roundtrips() {
        let p = named_profile("Ali-2", 1 << 30, 20_000.0).unwrap();
        let recs = generate(&p, 3, 10_000.0, &mut rng(1));
        let mut buf = Vec::new();
        write_trace(&mut buf, &recs).unwrap();
        let back = read_trace(&buf[..]).unwrap();
        assert_eq!(back.records, recs);
    }

    #[test]
    fn tencent1_statistics() {
        let mut p = named_profile("Tencent-1", 64 << 30, 1e6).unwrap();
        p.pattern = Pattern::Uniform;
        let recs = generate(&p, 0, 1e5 + 50.0, &mut rng(7));
        let n = recs.len() as f64;
        assert!(n > 95_000.0);
        let reads = recs.iter().filter(|r| r.op == Op::Read).count() as f64;
        assert!((reads / n - 0.02).abs() <= 0.005);
        let w: Vec<f64> = recs
            .iter()
            .filter(|r| r.op == Op::Write)
            .map(|r| r.size as f64 / 1024.0)
            .collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!((mean / 289.5 - 1.0).abs() <= 0.05, "mean write {mean}");
    }

    #[test]
    fn all_reads_profile_has_no_writes() {
        let mut p = named_profile("src", 1 << 30, 50_000.0).unwrap();
        p.read_ratio = 1.0;
        assert!(generate(&p, 0, 20_000.0, &mut rng(2)).iter().all(|r| r.op == Op::Read));
    }

    #[test]
    fn same_seed_same_stream() {
        let p = named_profile("DAP", 1 << 30, 50_000.0).unwrap();
        assert_eq!(
            generate(&p, 0, 5_000.0, &mut rng(9)),
            generate(&p, 0, 5_000.0, &mut rng(9))
        );
    }

    #[test]
    fn sizes_are_4k_multiples_within_footprint() {
        let mut r = rng(4);
        let mut g = OffsetGen::new(Pattern::Zipf { theta: 0.99 }, 1 << 20, 0);
        for _ in 0..1000 {
            let s = quantized_exp_size(&mut r, 37.0).min(1 << 20);
            assert_eq!(s % SLICE, 0);
            let o = g.next(&mut r, s);
            assert!(o + s <= 1 << 20);
        }
    }

    #[test]
    fn sequential_wraps() {
        let mut g = OffsetGen::new(Pattern::Sequential, 3 * 65536, 0);
        let mut r = rng(0);
        let o: Vec<u64> = (0..4).map(|_| g.next(&mut r, 65536)).collect();
        assert_eq!(o, vec![0, 65536, 131072, 0]);
    }
}
