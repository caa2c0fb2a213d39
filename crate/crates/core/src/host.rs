//! NVMe queue pairs, weighted round-robin arbitration and the host-side
//! redirect decision.

use std::collections::VecDeque;

use crate::harvest::policy::split_redirect;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpKind {
    Normal,
    /// Bound to a borrower's queue while a processor session is active.
    Shadow {
        borrower: Option<u16>,
    },
}

#[derive(Debug, Clone)]
pub struct QueuePair {
    pub kind: QpKind,
    pub weight: u32,
    pub sq: VecDeque<u64>,
    pub depth: u32,
    /// Commands fetched from this SQ since the last sample.
    pub fetched: u64,
}

impl QueuePair {
    pub fn new(kind: QpKind, weight: u32, depth: u32) -> Self {
        Self {
            kind,
            weight,
            sq: VecDeque::new(),
            depth,
            fetched: 0,
        }
    }
}

/// Deterministic weighted round-robin: each nonempty queue gets up to
/// `weight` consecutive fetches before the pointer moves on. Weights 2 and 1
/// with both queues backlogged yield A A B A A B.
#[derive(Debug, Clone)]
pub struct Wrr {
    cur: usize,
    credit: u32,
}

impl Default for Wrr {
    fn default() -> Self {
        Self {
            cur: usize::MAX,
            credit: 0,
        }
    }
}

impl Wrr {
    /// Index of the queue to fetch from, or `None` when all are empty.
    pub fn pick(&mut self, qps: &[QueuePair]) -> Option<usize> {
        let n = qps.len();
        if n == 0 || qps.iter().all(|q| q.sq.is_empty()) {
            return None;
        }
        if self.cur >= n {
            self.cur = n - 1;
            self.credit = 0;
        }
        for _ in 0..=n {
            let q = &qps[self.cur];
            if self.credit > 0 && !q.sq.is_empty() {
                self.credit -= 1;
                return Some(self.cur);
            }
            self.cur = (self.cur + 1) % n;
            self.credit = qps[self.cur].weight;
        }
        unreachable!("a nonempty queue always gets credit within one lap")
    }

    /// Pop the next command according to the arbitration order.
    pub fn fetch(&mut self, qps: &mut [QueuePair]) -> Option<(usize, u64)> {
        let i = self.pick(qps)?;
        let c = qps[i].sq.pop_front().expect("picked nonempty");
        qps[i].fetched += 1;
        Some((i, c))
    }
}

/// Redirect targets a borrower may use this window: lender id and its
/// balancing ratio (`N_borrow / N_lend`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RedirectTarget {
    pub lender: u16,
    pub ratio: f64,
}

/// Choose where one command runs from a uniform draw: `None` keeps it on the
/// borrower, otherwise the chosen lender.
pub fn redirect_decide(targets: &[RedirectTarget], probs: &[f64], u: f64) -> Option<u16> {
    debug_assert_eq!(targets.len(), probs.len());
    let mut acc = 0.0;
    for (t, &p) in targets.iter().zip(probs) {
        acc += p;
        if u < acc {
            return Some(t.lender);
        }
    }
    None
}

/// Per-lender redirect probabilities for a set of targets.
pub fn redirect_probs(targets: &[RedirectTarget]) -> Vec<f64> {
    let ratios: Vec<f64> = targets.iter().map(|t| t.ratio).collect();
    split_redirect(&ratios)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn qps(weights: &[u32]) -> Vec<QueuePair> {
        weights
            .iter()
            .map(|&w| QueuePair::new(QpKind::Normal, w, 1024))
            .collect()
    }

    #[test]
    fn wrr_two_to_one() {
        let mut q = qps(&[2, 1]);
        for i in 0..6 {
            q[0].sq.push_back(i);
            q[1].sq.push_back(100 + i);
        }
        let mut w = Wrr::default();
        let order: String = (0..6)
            .map(|_| if w.fetch(&mut q).unwrap().0 == 0 { 'A' } else { 'B' })
            .collect();
        assert_eq!(order, "AABAAB");
    }

    #[test]
    fn wrr_skips_empty_queues() {
        let mut q = qps(&[4, 1]);
        q[1].sq.extend([1, 2, 3]);
        let mut w = Wrr::default();
        assert_eq!(w.fetch(&mut q), Some((1, 1)));
        assert_eq!(w.fetch(&mut q), Some((1, 2)));
        q[0].sq.push_back(9);
        assert_eq!(w.fetch(&mut q), Some((0, 9)));
        assert_eq!(w.fetch(&mut q), Some((1, 3)));
        assert_eq!(w.fetch(&mut q), None);
    }

    proptest! {
        #[test]
        fn backlogged_shares_follow_weights(w in proptest::collection::vec(1u32..6, 1..5), rounds in 1usize..20) {
            let mut q = qps(&w);
            let total: u32 = w.iter().sum();
            let n = total as usize * rounds;
            for (i, qp) in q.iter_mut().enumerate() {
                for k in 0..n {
                    qp.sq.push_back((i * n + k) as u64);
                }
            }
            let mut arb = Wrr::default();
            let mut counts = vec![0u32; w.len()];
            for _ in 0..n {
                counts[arb.fetch(&mut q).unwrap().0] += 1;
            }
            for (c, &wi) in counts.iter().zip(&w) {
                prop_assert_eq!(*c, wi * rounds as u32);
            }
        }
    }

    #[test]
    fn redirect_with_ratio_three() {
        let t = [RedirectTarget { lender: 7, ratio: 3.0 }];
        let p = redirect_probs(&t);
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert_eq!(redirect_decide(&t, &p, 0.24), Some(7));
        assert_eq!(redirect_decide(&t, &p, 0.25), None);
        assert_eq!(redirect_decide(&[], &[], 0.0), None);
    }
}
