//! Online miss-ratio curves with fixed-rate SHARDS sampling.
//!
//! A reference to key `k` is sampled when `hash(k) mod P < T`, giving rate
//! `R = T / P`. Reuse (stack) distances of sampled references are computed
//! exactly over the sampled stream with a Fenwick tree over access times
//! and rescaled by `1 / R`.

use std::collections::{BTreeMap, HashMap};

const MODULUS: u64 = 1 << 24;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone)]
struct Fenwick {
    t: Vec<i64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { t: vec![0; n + 1] }
    }

    fn add(&mut self, i: usize, v: i64) {
        let mut i = i + 1;
        while i < self.t.len() {
            self.t[i] += v;
            i += i & i.wrapping_neg();
        }
    }

    /// Sum over `[0, i)`.
    fn prefix(&self, i: usize) -> i64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.t[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Exact LRU stack distances over a key stream.
#[derive(Debug, Clone)]
pub struct StackDistance {
    last: HashMap<u64, usize>,
    tree: Fenwick,
    next: usize,
}

impl Default for StackDistance {
    fn default() -> Self {
        Self {
            last: HashMap::new(),
            tree: Fenwick::new(1024),
            next: 0,
        }
    }
}

impl StackDistance {
    /// Distinct other keys touched since the previous access to `key`;
    /// `None` on first access.
    pub fn access(&mut self, key: u64) -> Option<u64> {
        if self.next >= self.tree.t.len() - 1 {
            self.compact();
        }
        let d = self.last.get(&key).map(|&p| {
            let between = self.tree.prefix(self.next) - self.tree.prefix(p + 1);
            self.tree.add(p, -1);
            between as u64
        });
        self.tree.add(self.next, 1);
        self.last.insert(key, self.next);
        self.next += 1;
        d
    }

    fn compact(&mut self) {
        let mut live: Vec<(usize, u64)> = self.last.iter().map(|(&k, &p)| (p, k)).collect();
        live.sort_unstable();
        let cap = (live.len() * 2).max(1024);
        self.tree = Fenwick::new(cap);
        for (i, (_, k)) in live.iter().enumerate() {
            self.last.insert(*k, i);
            self.tree.add(i, 1);
        }
        self.next = live.len();
    }

    pub fn distinct(&self) -> usize {
        self.last.len()
    }
}

/// Reuse-distance histogram and the miss-ratio curve it implies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MrcEstimate {
    /// Scaled distance -> sampled references.
    pub hist: BTreeMap<u64, u64>,
    pub cold: u64,
    /// Sampled references.
    pub total: u64,
    /// All references offered, sampled or not.
    pub offered: u64,
    pub rate: f64,
}

impl MrcEstimate {
    /// Denominator of the miss ratio. Normalizing by the expected sample
    /// count rather than the actual one keeps a sampled hot key from
    /// diluting every ratio.
    fn norm(&self) -> f64 {
        if self.offered > 0 && self.rate < 1.0 {
            self.offered as f64 * self.rate
        } else {
            self.total as f64
        }
    }

    /// Miss ratio of an LRU cache holding `c` keys.
    pub fn miss_ratio(&self, c: u64) -> f64 {
        if self.total == 0 || c == 0 {
            return 1.0;
        }
        let misses: u64 = self.cold + self.hist.range(c..).map(|(_, &n)| n).sum::<u64>();
        (misses as f64 / self.norm()).min(1.0)
    }

    /// Miss ratios for caches of `0..=max_units` units of `unit` keys.
    pub fn curve(&self, unit: u64, max_units: u64) -> Vec<f64> {
        let mut out = Vec::with_capacity(max_units as usize + 1);
        let mut beyond: u64 = self.hist.values().sum::<u64>() + self.cold;
        let mut it = self.hist.iter().peekable();
        for u in 0..=max_units {
            let c = u * unit;
            if u == 0 || self.total == 0 {
                out.push(1.0);
                continue;
            }
            while let Some(&(&d, &n)) = it.peek() {
                if d >= c {
                    break;
                }
                beyond -= n;
                it.next();
            }
            out.push((beyond as f64 / self.norm()).min(1.0));
        }
        out
    }
}

/// Fixed-rate SHARDS estimator.
#[derive(Debug, Clone)]
pub struct Shards {
    threshold: u64,
    rate: f64,
    sd: StackDistance,
    est: MrcEstimate,
}

impl Shards {
    pub fn new(rate: f64) -> Self {
        assert!(rate > 0.0 && rate <= 1.0, "sampling rate must be in (0, 1]");
        let threshold = ((rate * MODULUS as f64).round() as u64).clamp(1, MODULUS);
        let rate = threshold as f64 / MODULUS as f64;
        Self {
            threshold,
            rate,
            sd: StackDistance::default(),
            est: MrcEstimate {
                rate,
                ..Default::default()
            },
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn sampled(&self) -> u64 {
        self.est.total
    }

    pub fn is_sampled(&self, key: u64) -> bool {
        splitmix(key) % MODULUS < self.threshold
    }

    pub fn access(&mut self, key: u64) {
        self.est.offered += 1;
        if !self.is_sampled(key) {
            return;
        }
        self.est.total += 1;
        match self.sd.access(key) {
            None => self.est.cold += 1,
            Some(d) => {
                let scaled = if self.threshold == MODULUS {
                    d
                } else {
                    (d as f64 / self.rate) as u64
                };
                *self.est.hist.entry(scaled).or_insert(0) += 1;
            }
        }
    }

    pub fn estimate(&self) -> &MrcEstimate {
        &self.est
    }

    /// Start a new estimation epoch. Recency is kept so reuse across the
    /// boundary is still measured; only the histogram restarts.
    pub fn reset_histogram(&mut self) {
        self.est = MrcEstimate {
            rate: self.rate,
            ..Default::default()
        };
    }
}

/// Reference oracle: explicit LRU stack, O(n * depth).
pub fn exact_mrc(trace: &[u64]) -> MrcEstimate {
    let mut stack: Vec<u64> = Vec::new();
    let mut est = MrcEstimate {
        rate: 1.0,
        ..Default::default()
    };
    for &k in trace {
        est.total += 1;
        match stack.iter().rposition(|&x| x == k) {
            Some(pos) => {
                let d = (stack.len() - 1 - pos) as u64;
                *est.hist.entry(d).or_insert(0) += 1;
                stack.remove(pos);
            }
            None => est.cold += 1,
        }
        stack.push(k);
    }
    est
}
