//! The sweep-based EER and minDCF against the brute-force oracle.

mod common;

use adaptsv_core::metrics::{compute_eer, compute_min_dcf, DcfParams, ScoreSet};
use adaptsv_core::rng::{gaussian, stream};
use common::{oracle_eer, oracle_min_dcf};
use rand::Rng;

const TOL: f64 = 1e-9;

fn check(targets: &[f64], nontargets: &[f64]) {
    let set = ScoreSet::from_parts(targets, nontargets).unwrap();
    let (eer, _) = compute_eer(&set);
    let want = oracle_eer(targets, nontargets);
    assert!((eer - want).abs() <= TOL, "eer {eer} vs oracle {want}");
    for p in [
        DcfParams::default(),
        DcfParams {
            p_target: 0.01,
            c_miss: 10.0,
            c_fa: 1.0,
        },
        DcfParams {
            p_target: 0.5,
            c_miss: 1.0,
            c_fa: 3.0,
        },
    ] {
        let got = compute_min_dcf(&set, p).unwrap();
        let want = oracle_min_dcf(targets, nontargets, p);
        assert!((got - want).abs() <= TOL, "minDCF {got} vs oracle {want} at {p:?}");
    }
}

#[test]
fn matches_brute_force_on_random_gaussian_scores() {
    for seed in 0..20 {
        let mut rng = stream(seed, "oracle", &[]);
        let n_t = 100 + (seed as usize * 7) % 150;
        let n_n = 1000 - n_t;
        let shift = 0.5 + 0.1 * seed as f64;
        let t: Vec<f64> = (0..n_t).map(|_| shift + gaussian(&mut rng)).collect();
        let n: Vec<f64> = (0..n_n).map(|_| gaussian(&mut rng)).collect();
        check(&t, &n);
    }
}

#[test]
fn matches_brute_force_with_heavy_ties() {
    for seed in 0..20 {
        let mut rng = stream(seed, "oracle-ties", &[]);
        let t: Vec<f64> = (0..200).map(|_| rng.random_range(2..12) as f64).collect();
        let n: Vec<f64> = (0..800).map(|_| rng.random_range(0..9) as f64).collect();
        check(&t, &n);
    }
}

#[test]
fn closed_form_cases() {
    let set = ScoreSet::from_parts(&[2.0, 3.0], &[0.0, 1.0]).unwrap();
    assert_eq!(compute_eer(&set).0, 0.0);
    assert_eq!(compute_min_dcf(&set, DcfParams::default()).unwrap(), 0.0);

    let set = ScoreSet::from_parts(&[0.0, 1.0], &[2.0, 3.0]).unwrap();
    assert_eq!(compute_eer(&set).0, 1.0);
    // best is to reject everything: p_miss = 1 costs p_target, normalized to 1
    assert_eq!(compute_min_dcf(&set, DcfParams::default()).unwrap(), 1.0);

    // all scores equal: threshold below accepts all, above rejects all
    let set = ScoreSet::from_parts(&[1.0; 3], &[1.0; 5]).unwrap();
    assert!((compute_eer(&set).0 - 0.5).abs() <= TOL);

    // one target among three nontargets, ranked second
    let set = ScoreSet::from_parts(&[2.0], &[1.0, 3.0, 4.0]).unwrap();
    let want = oracle_eer(&[2.0], &[1.0, 3.0, 4.0]);
    assert!((compute_eer(&set).0 - want).abs() <= TOL);
}
