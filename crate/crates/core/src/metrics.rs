//! Equal error rate and normalized minimum detection cost.
//!
//! Thresholds sweep every distinct score plus `±∞`. At threshold `t` a
//! target is missed when its score is `< t` and a nontarget is falsely
//! accepted when its score is `≥ t`.

use std::io::{BufRead, Write};

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn is_target(self) -> bool {
        self == TrialLabel::Target
    }

    pub fn as_digit(self) -> u8 {
        match self {
            TrialLabel::Target => 1,
            TrialLabel::Nontarget => 0,
        }
    }

    pub fn from_token(tok: &str) -> Option<Self> {
        match tok {
            "1" | "target" => Some(TrialLabel::Target),
            "0" | "nontarget" => Some(TrialLabel::Nontarget),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: TrialLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<TrialLabel>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<TrialLabel>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape("ScoreSet", &[scores.len()], &[labels.len()]));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("score #{i} is {}", scores[i])));
        }
        let targets = labels.iter().filter(|l| l.is_target()).count();
        if targets == 0 || targets == labels.len() {
            return Err(Error::Contract(format!(
                "score set needs at least one target and one nontarget, got {targets} of {}",
                labels.len()
            )));
        }
        Ok(ScoreSet { scores, labels })
    }

    pub fn from_parts(targets: &[f64], nontargets: &[f64]) -> Result<Self> {
        let scores = targets.iter().chain(nontargets).copied().collect();
        let labels = std::iter::repeat_n(TrialLabel::Target, targets.len())
            .chain(std::iter::repeat_n(TrialLabel::Nontarget, nontargets.len()))
            .collect();
        ScoreSet::new(scores, labels)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[TrialLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn counts(&self) -> (usize, usize) {
        let t = self.labels.iter().filter(|l| l.is_target()).count();
        (t, self.labels.len() - t)
    }
}

/// One point of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points in increasing threshold order, starting at `-∞` and
/// ending at `+∞`.
pub fn sweep(set: &ScoreSet) -> Vec<OperatingPoint> {
    let (nt, nn) = set.counts();
    let mut pairs: Vec<(f64, bool)> = set
        .scores
        .iter()
        .zip(&set.labels)
        .map(|(&s, l)| (s, l.is_target()))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points = Vec::with_capacity(pairs.len() + 2);
    points.push(OperatingPoint {
        threshold: f64::NEG_INFINITY,
        p_miss: 0.0,
        p_fa: 1.0,
    });
    // targets strictly below / nontargets at-or-above the current threshold
    let (mut miss, mut fa) = (0usize, nn);
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        points.push(OperatingPoint {
            threshold: t,
            p_miss: miss as f64 / nt as f64,
            p_fa: fa as f64 / nn as f64,
        });
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                miss += 1;
            } else {
                fa -= 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    points
}

/// Crossing of the miss and false-alarm curves over `points`, interpolated
/// linearly between the bracketing sweep points. Returns `(eer, threshold)`;
/// an exact tie resolves to the lowest threshold attaining it.
pub fn eer_from_points(points: &[OperatingPoint]) -> (f64, f64) {
    let k = points
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("the +inf point always has p_miss >= p_fa");
    let hi = points[k];
    if hi.p_miss == hi.p_fa || k == 0 {
        return (hi.p_miss, hi.threshold);
    }
    let lo = points[k - 1];
    let d0 = lo.p_fa - lo.p_miss;
    let d1 = hi.p_fa - hi.p_miss;
    let alpha = d0 / (d0 - d1);
    let eer = lo.p_miss + alpha * (hi.p_miss - lo.p_miss);
    let threshold = match (lo.threshold.is_finite(), hi.threshold.is_finite()) {
        (true, true) => lo.threshold + alpha * (hi.threshold - lo.threshold),
        (true, false) => lo.threshold,
        _ => hi.threshold,
    };
    (eer, threshold)
}

pub fn compute_eer(set: &ScoreSet) -> (f64, f64) {
    eer_from_points(&sweep(set))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) || self.c_miss <= 0.0 || self.c_fa <= 0.0 {
            return Err(Error::Config(format!("invalid detection cost parameters {self:?}")));
        }
        Ok(())
    }

    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub fn cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        self.c_miss * p_miss * self.p_target + self.c_fa * p_fa * (1.0 - self.p_target)
    }
}

pub fn compute_min_dcf(set: &ScoreSet, params: DcfParams) -> Result<f64> {
    params.validate()?;
    Ok(min_dcf_from_points(&sweep(set), params))
}

pub fn min_dcf_from_points(points: &[OperatingPoint], params: DcfParams) -> f64 {
    let best = points
        .iter()
        .map(|p| params.cost(p.p_miss, p.p_fa))
        .fold(f64::INFINITY, f64::min);
    best / params.normalizer()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub eer: f64,
    pub min_dcf: f64,
    pub threshold_at_eer: f64,
    pub targets: usize,
    pub nontargets: usize,
}

pub fn evaluate_scores(set: &ScoreSet, params: DcfParams) -> Result<EvalResult> {
    params.validate()?;
    let points = sweep(set);
    let (eer, threshold_at_eer) = eer_from_points(&points);
    let (targets, nontargets) = set.counts();
    Ok(EvalResult {
        eer,
        min_dcf: min_dcf_from_points(&points, params),
        threshold_at_eer,
        targets,
        nontargets,
    })
}

/// Lines `enroll test label` with label `1` (target) or `0`.
pub fn write_trials(mut w: impl Write, trials: &[Trial]) -> std::io::Result<()> {
    for t in trials {
        writeln!(w, "{} {} {}", t.enroll, t.test, t.label.as_digit())?;
    }
    Ok(())
}

pub fn read_trials(r: impl BufRead, path: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            msg: msg.to_string(),
        };
        if toks.len() != 3 {
            return Err(bad("expected 'enroll_utt test_utt label'"));
        }
        let label = TrialLabel::from_token(toks[2]).ok_or_else(|| bad("label must be 1 or 0"))?;
        if toks[0] == toks[1] {
            return Err(bad("an utterance cannot be paired with itself"));
        }
        out.push(Trial {
            enroll: toks[0].to_string(),
            test: toks[1].to_string(),
            label,
        });
    }
    Ok(out)
}

/// Lines `enroll test score label`.
pub fn write_scores(mut w: impl Write, trials: &[Trial], scores: &[f64]) -> std::io::Result<()> {
    for (t, s) in trials.iter().zip(scores) {
        writeln!(w, "{} {} {s:.16e} {}", t.enroll, t.test, t.label.as_digit())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_inverted_separation() {
        let perfect = ScoreSet::from_parts(&[0.9, 0.8, 0.7], &[0.1, 0.2]).unwrap();
        let r = evaluate_scores(&perfect, DcfParams::default()).unwrap();
        assert_eq!((r.eer, r.min_dcf), (0.0, 0.0));

        let inverted = ScoreSet::from_parts(&[0.1, 0.2], &[0.8, 0.9, 0.7]).unwrap();
        let r = evaluate_scores(&inverted, DcfParams::default()).unwrap();
        assert_eq!((r.eer, r.min_dcf), (1.0, 1.0));
    }

    #[test]
    fn small_interleaved_case() {
        // sweep: (-inf:0,1) (0.1:0,1) (0.4:0,.5) (0.6:.5,.5) (0.9:.5,0) (inf:1,0)
        let s = ScoreSet::from_parts(&[0.9, 0.4], &[0.6, 0.1]).unwrap();
        let (eer, thr) = compute_eer(&s);
        assert_eq!(eer, 0.5);
        assert_eq!(thr, 0.6);
        // best cost 0.05·0.5 at t = 0.9 → normalized 0.5
        assert!((compute_min_dcf(&s, DcfParams::default()).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn interpolates_between_bracketing_points() {
        // targets {3, 1}, nontargets {2, 0.5, 0}: at t=1 miss 0, fa 1/3; at t=2
        // miss 1/2, fa 1/3 → crossing at 1/3 on the lower plateau
        let s = ScoreSet::from_parts(&[3.0, 1.0], &[2.0, 0.5, 0.0]).unwrap();
        let (eer, _) = compute_eer(&s);
        assert!((eer - 1.0 / 3.0).abs() < 1e-15, "{eer}");
    }

    #[test]
    fn contract_errors() {
        assert!(ScoreSet::from_parts(&[0.1], &[]).is_err());
        assert!(ScoreSet::from_parts(&[], &[0.1]).is_err());
        assert!(matches!(ScoreSet::from_parts(&[f64::NAN], &[0.1]), Err(Error::Numeric(_))));
        let s = ScoreSet::from_parts(&[0.2], &[0.1]).unwrap();
        let bad = DcfParams {
            p_target: 1.0,
            ..DcfParams::default()
        };
        assert!(compute_min_dcf(&s, bad).is_err());
    }

    #[test]
    fn trial_file_round_trip_and_errors() {
        let trials = vec![
            Trial {
                enroll: "a".into(),
                test: "b".into(),
                label: TrialLabel::Target,
            },
            Trial {
                enroll: "a".into(),
                test: "c".into(),
                label: TrialLabel::Nontarget,
            },
        ];
        let mut buf = Vec::new();
        write_trials(&mut buf, &trials).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "a b 1\na c 0\n");
        assert_eq!(read_trials(&buf[..], "t").unwrap(), trials);
        let err = read_trials(&b"a b 1\na a 0\n"[..], "t").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(read_trials(&b"a b 2\n"[..], "t").is_err());
    }

    fn arb_set() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-3.0f64..3.0, 1..30),
            prop::collection::vec(-3.0f64..3.0, 1..30),
        )
    }

    proptest! {
        #[test]
        fn metrics_stay_in_range((t, n) in arb_set()) {
            let s = ScoreSet::from_parts(&t, &n).unwrap();
            let r = evaluate_scores(&s, DcfParams::default()).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.eer));
            prop_assert!((0.0..=1.0).contains(&r.min_dcf));
        }

        #[test]
        fn monotone_transform_invariance((t, n) in arb_set()) {
            let s = ScoreSet::from_parts(&t, &n).unwrap();
            let f = |v: &f64| (2.0 * v).exp() + 3.0 * v;
            let tt: Vec<f64> = t.iter().map(f).collect();
            let nn: Vec<f64> = n.iter().map(f).collect();
            let s2 = ScoreSet::from_parts(&tt, &nn).unwrap();
            let (a, b) = (evaluate_scores(&s, DcfParams::default()).unwrap(), evaluate_scores(&s2, DcfParams::default()).unwrap());
            prop_assert_eq!(a.eer, b.eer);
            prop_assert_eq!(a.min_dcf, b.min_dcf);
        }

        #[test]
        fn label_swap_symmetry((t, n) in arb_set()) {
            let s = ScoreSet::from_parts(&t, &n).unwrap();
            let neg_t: Vec<f64> = t.iter().map(|v| -v).collect();
            let neg_n: Vec<f64> = n.iter().map(|v| -v).collect();
            let swapped = ScoreSet::from_parts(&neg_n, &neg_t).unwrap();
            let (a, _) = compute_eer(&s);
            let (b, _) = compute_eer(&swapped);
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }
}
