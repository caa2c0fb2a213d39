//! Pure trigger and balancing decisions.

use serde::{Deserialize, Serialize};

use super::descriptor::BP_MAX;
use super::mrc::MrcEstimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ProcessorAction {
    None,
    Lend,
    Borrow,
}

/// Processor trigger over one utilization window.
pub fn decide_processor_action(proc: f64, flash: f64, watermark: f64) -> ProcessorAction {
    if proc < watermark {
        ProcessorAction::Lend
    } else if flash < watermark {
        ProcessorAction::Borrow
    } else {
        ProcessorAction::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RedirectRatio {
    /// N_borrow / N_lend.
    pub ratio: f64,
    pub p_redirect: f64,
}

/// Balance commands between the borrower SQ and a lender's shadow SQ.
///
/// `ratio = (u_lend / u_borrow) * (sum_w_lend / w_shadow) * (w_borrow_sq / sum_w_borrow)`
/// and the redirect probability is `1 / (1 + ratio)`.
pub fn compute_redirect_ratio(
    u_borrow_bp: u16,
    u_lend_bp: u16,
    w_borrow_sq: u32,
    sum_w_borrow: u32,
    w_shadow_sq: u32,
    sum_w_lend: u32,
) -> RedirectRatio {
    let ub = f64::from(u_borrow_bp.max(1));
    let ul = f64::from(u_lend_bp.max(1));
    let ratio = (ul / ub)
        * (f64::from(sum_w_lend.max(1)) / f64::from(w_shadow_sq.max(1)))
        * (f64::from(w_borrow_sq.max(1)) / f64::from(sum_w_borrow.max(1)));
    RedirectRatio {
        ratio,
        p_redirect: 1.0 / (1.0 + ratio),
    }
}

/// Split redirection over several lenders: lender `i` with ratio `r_i`
/// receives `w_i / (1 + sum w)` where `w_i = 1 / r_i`. With one lender this
/// is `1 / (1 + r)`.
pub fn split_redirect(ratios: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = ratios.iter().map(|&r| 1.0 / r.max(1e-9)).collect();
    let sum: f64 = w.iter().sum();
    w.iter().map(|&x| x / (1.0 + sum)).collect()
}

/// Utilization fraction to the basis points used in descriptors.
pub fn bp(x: f64) -> u16 {
    (x.clamp(0.0, 1.0) * f64::from(BP_MAX)).round() as u16
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramPolicy {
    /// Target miss ratio.
    pub threshold: f64,
    /// Miss-ratio improvement per segment below which extra DRAM is idle.
    pub epsilon: f64,
    /// Most segments a borrower holds at once.
    pub max_borrow_segments: u32,
    /// Segments a lender always keeps.
    pub floor_segments: u32,
    /// Sampled references before the curve is trusted.
    pub min_samples: u64,
}

impl Default for DramPolicy {
    fn default() -> Self {
        Self {
            threshold: 0.10,
            epsilon: 0.005,
            max_borrow_segments: 512,
            floor_segments: 1,
            min_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DramAction {
    None,
    Lend(u32),
    Borrow(u32),
}

/// DRAM trigger. `current` counts segments in use (local plus borrowed),
/// `frames_per_segment` converts segments to curve keys.
pub fn decide_dram_action(mrc: &MrcEstimate, current: u32, frames_per_segment: u64, p: &DramPolicy) -> DramAction {
    if mrc.total < p.min_samples {
        return DramAction::None;
    }
    let reach = current + p.max_borrow_segments;
    let curve = mrc.curve(frames_per_segment, u64::from(reach));
    let mr = |c: u32| curve[c as usize];
    if mr(current) > p.threshold {
        if let Some(c) = (current + 1..=reach).find(|&c| mr(c) <= p.threshold) {
            return DramAction::Borrow(c - current);
        }
    }
    // Shrink while each released segment costs less than epsilon, keeping
    // the miss ratio under threshold when it already is.
    let bounded = mr(current) <= p.threshold;
    let mut c = current;
    while c > p.floor_segments.max(1) {
        let slope = mr(c - 1) - mr(c);
        if slope >= p.epsilon || (bounded && mr(c - 1) > p.threshold) {
            break;
        }
        c -= 1;
    }
    if c < current {
        DramAction::Lend(current - c)
    } else {
        DramAction::None
    }
}

/// Lender choice: lowest published utilization, ties to the lowest id.
pub fn pick_lender(candidates: &[(u8, u16)]) -> Option<u8> {
    candidates.iter().min_by_key(|&&(id, u)| (u, id)).map(|&(id, _)| id)
}

#[cfg(test)]
mod tests {
    use super::super::mrc::{exact_mrc, Shards};
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn processor_trigger_cases() {
        assert_eq!(decide_processor_action(0.80, 0.80, 0.75), ProcessorAction::None);
        assert_eq!(decide_processor_action(0.50, 0.95, 0.75), ProcessorAction::Lend);
        assert_eq!(decide_processor_action(0.95, 0.42, 0.75), ProcessorAction::Borrow);
    }

    #[test]
    fn ratio_three_redirects_a_quarter() {
        let r = compute_redirect_ratio(1000, 3000, 1, 1, 1, 1);
        assert!((r.ratio - 3.0).abs() < 1e-12);
        assert!((r.p_redirect - 0.25).abs() < 1e-12);
    }

    #[test]
    fn symmetric_is_half() {
        let r = compute_redirect_ratio(5000, 5000, 1, 1, 1, 1);
        assert_eq!(r.p_redirect, 0.5);
    }

    #[test]
    fn worked_weights() {
        let r = compute_redirect_ratio(6000, 2000, 2, 4, 1, 4);
        assert!((r.ratio - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.p_redirect - 0.6).abs() < 1e-12);
    }

    #[test]
    fn zero_borrower_util_is_clamped() {
        let r = compute_redirect_ratio(0, 1, 1, 1, 1, 1);
        assert_eq!(r.ratio, 1.0);
    }

    #[test]
    fn split_reduces_to_single() {
        let p = split_redirect(&[3.0]);
        assert!((p[0] - 0.25).abs() < 1e-12);
        let p = split_redirect(&[1.0, 1.0]);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn redirect_monotone(ub in 1u16..=10_000, ul in 1u16..10_000, wb in 1u32..16, sb in 16u32..64, ws in 1u32..16, sl in 16u32..64) {
            let base = compute_redirect_ratio(ub, ul, wb, sb, ws, sl).p_redirect;
            // Larger lender load or larger lender weight sum: fewer redirects.
            prop_assert!(compute_redirect_ratio(ub, ul + 1, wb, sb, ws, sl).p_redirect < base);
            prop_assert!(compute_redirect_ratio(ub, ul, wb, sb, ws, sl + 1).p_redirect < base);
            prop_assert!(compute_redirect_ratio(ub, ul, wb + 1, sb, ws, sl).p_redirect < base);
            // Busier borrower, bigger shadow weight, bigger borrower sum: more.
            if ub < 10_000 {
                prop_assert!(compute_redirect_ratio(ub + 1, ul, wb, sb, ws, sl).p_redirect > base);
            }
            prop_assert!(compute_redirect_ratio(ub, ul, wb, sb, ws + 1, sl).p_redirect > base);
            prop_assert!(compute_redirect_ratio(ub, ul, wb, sb + 1, ws, sl).p_redirect > base);
        }
    }

    fn policy() -> DramPolicy {
        DramPolicy {
            min_samples: 1,
            max_borrow_segments: 64,
            ..Default::default()
        }
    }

    #[test]
    fn working_set_of_ten_segments_borrows_two() {
        // 10 segments of 4 keys, cycled: fits exactly in 10 segments.
        let trace: Vec<u64> = (0..4000).map(|i| i % 40).collect();
        let e = exact_mrc(&trace);
        assert_eq!(decide_dram_action(&e, 8, 4, &policy()), DramAction::Borrow(2));
    }

    #[test]
    fn flat_curve_lends_nearly_everything() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = Shards::new(1.0);
        for _ in 0..50_000 {
            s.access(rng.random_range(0..1_000_000));
        }
        let a = decide_dram_action(s.estimate(), 32, 128, &policy());
        assert_eq!(a, DramAction::Lend(31));
    }

    #[test]
    fn already_under_threshold_with_steep_curve_does_nothing() {
        let trace: Vec<u64> = (0..4000).map(|i| i % 40).collect();
        let e = exact_mrc(&trace);
        assert_eq!(decide_dram_action(&e, 10, 4, &policy()), DramAction::None);
    }

    #[test]
    fn cold_curve_does_nothing() {
        let e = exact_mrc(&[1, 2, 3]);
        let p = DramPolicy::default();
        assert_eq!(decide_dram_action(&e, 4, 4, &p), DramAction::None);
    }

    #[test]
    fn lender_choice() {
        assert_eq!(pick_lender(&[(3, 500), (1, 200), (2, 200)]), Some(1));
        assert_eq!(pick_lender(&[]), None);
    }
}
