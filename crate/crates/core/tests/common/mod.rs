//! Brute-force reference for EER and minDCF. Each candidate threshold is
//! evaluated by a full pass over the scores, with no sorting tricks.

use adaptsv_core::metrics::DcfParams;

/// Accept when `score >= t`.
pub fn rates(targets: &[f64], nontargets: &[f64], t: f64) -> (f64, f64) {
    let miss = targets.iter().filter(|&&s| s < t).count();
    let fa = nontargets.iter().filter(|&&s| s >= t).count();
    (miss as f64 / targets.len() as f64, fa as f64 / nontargets.len() as f64)
}

pub fn thresholds(targets: &[f64], nontargets: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    t.push(f64::NEG_INFINITY);
    t.push(f64::INFINITY);
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

pub fn oracle_min_dcf(targets: &[f64], nontargets: &[f64], p: DcfParams) -> f64 {
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    thresholds(targets, nontargets)
        .into_iter()
        .map(|t| {
            let (pm, pf) = rates(targets, nontargets, t);
            p.c_miss * p.p_target * pm + p.c_fa * (1.0 - p.p_target) * pf
        })
        .fold(f64::INFINITY, f64::min)
        / norm
}

/// Where the piecewise-linear curves through the step points cross.
/// Geometric form: intersect the segment from `a` to `b` with the line
/// p_miss = p_fa.
pub fn oracle_eer(targets: &[f64], nontargets: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = thresholds(targets, nontargets)
        .into_iter()
        .map(|t| rates(targets, nontargets, t))
        .collect();
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.0 == a.1 {
            return a.0;
        }
        if (a.0 < a.1) && (b.0 >= b.1) {
            // p_miss(λ) = a.0 + λ (b.0 - a.0), p_fa(λ) = a.1 + λ (b.1 - a.1)
            let lambda = (a.1 - a.0) / ((b.0 - a.0) - (b.1 - a.1));
            return a.0 + lambda * (b.0 - a.0);
        }
    }
    unreachable!("the +inf point has p_miss = 1, p_fa = 0")
}
