//! Deterministic synthetic speaker corpus and trial lists.
//!
//! Frame `t` of an utterance by speaker `k` is `M · v_k + c_u + ε_t`: a fixed
//! projection `M: [F × L]` of a per-speaker latent `v_k ~ N(0, σ_s² I)`, a
//! per-utterance channel offset `c_u ~ N(0, σ_c² I)` and per-frame noise
//! `ε_t ~ N(0, σ_n² I)`. All draws come from SplitMix64 streams derived from
//! the corpus seed (see [`crate::rng`]), so the corpus is a pure function of
//! its configuration.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Trial, TrialLabel};
use crate::rng;
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &str = "adaptsv-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub frame_dim: usize,
    pub latent_dim: usize,
    pub speaker_scale: f64,
    pub noise_scale: f64,
    pub channel_scale: f64,
    /// Fraction of speakers assigned to backbone pre-training.
    pub pretrain_fraction: f64,
    /// Utterances of each adaptation speaker held out for trials.
    pub eval_utts_per_speaker: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 1,
            num_speakers: 40,
            utts_per_speaker: 20,
            frames_min: 30,
            frames_max: 60,
            frame_dim: 20,
            latent_dim: 6,
            speaker_scale: 1.0,
            noise_scale: 0.5,
            channel_scale: 0.3,
            pretrain_fraction: 0.5,
            eval_utts_per_speaker: 5,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_speakers < 2 {
            return fail(format!("need at least 2 speakers, got {}", self.num_speakers));
        }
        if self.utts_per_speaker == 0 || self.frame_dim == 0 || self.latent_dim == 0 {
            return fail("utts_per_speaker, frame_dim and latent_dim must be positive".into());
        }
        if self.frames_min < 2 || self.frames_max < self.frames_min {
            return fail(format!(
                "frame range [{}, {}] must satisfy 2 <= min <= max",
                self.frames_min, self.frames_max
            ));
        }
        let pre = self.pretrain_speakers();
        if pre == 0 || pre >= self.num_speakers {
            return fail(format!(
                "pretrain_fraction {} leaves no speakers on one side of the split",
                self.pretrain_fraction
            ));
        }
        if self.eval_utts_per_speaker >= self.utts_per_speaker {
            return fail("eval_utts_per_speaker must leave training utterances".into());
        }
        if [self.speaker_scale, self.noise_scale, self.channel_scale]
            .iter()
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return fail("scales must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn pretrain_speakers(&self) -> usize {
        (self.num_speakers as f64 * self.pretrain_fraction).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Pretrain,
    AdaptTrain,
    AdaptEval,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::AdaptTrain => "adapt-train",
            Split::AdaptEval => "adapt-eval",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain" => Some(Split::Pretrain),
            "adapt-train" => Some(Split::AdaptTrain),
            "adapt-eval" => Some(Split::AdaptEval),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub split: Split,
    pub frames: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub utterances: Vec<Utterance>,
}

pub fn speaker_id(k: usize) -> String {
    format!("spk{k:03}")
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let (f, l) = (cfg.frame_dim, cfg.latent_dim);
    let mut r = rng::stream(cfg.seed, "projection", &[]);
    let proj = rng::gaussian_vec(&mut r, f * l, 1.0 / (l as f64).sqrt());
    let pretrain = cfg.pretrain_speakers();
    let mut utterances = Vec::with_capacity(cfg.num_speakers * cfg.utts_per_speaker);
    for k in 0..cfg.num_speakers {
        let mut r = rng::stream(cfg.seed, "speaker", &[k as u64]);
        let latent = rng::gaussian_vec(&mut r, l, cfg.speaker_scale);
        let center: Vec<f64> = (0..f)
            .map(|i| (0..l).map(|j| proj[i * l + j] * latent[j]).sum())
            .collect();
        for u in 0..cfg.utts_per_speaker {
            let mut r = rng::stream(cfg.seed, "utterance", &[k as u64, u as u64]);
            let t = r.random_range(cfg.frames_min..=cfg.frames_max);
            let channel = rng::gaussian_vec(&mut r, f, cfg.channel_scale);
            let mut data = Vec::with_capacity(t * f);
            for _ in 0..t {
                for i in 0..f {
                    data.push(center[i] + channel[i] + cfg.noise_scale * rng::gaussian(&mut r));
                }
            }
            let split = if k < pretrain {
                Split::Pretrain
            } else if u >= cfg.utts_per_speaker - cfg.eval_utts_per_speaker {
                Split::AdaptEval
            } else {
                Split::AdaptTrain
            };
            utterances.push(Utterance {
                id: format!("{}-utt{u:03}", speaker_id(k)),
                speaker: k,
                split,
                frames: Tensor::matrix(t, f, data)?,
            });
        }
    }
    Ok(Corpus {
        config: cfg.clone(),
        utterances,
    })
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }

    pub fn find(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// Speakers in `split`, in id order. Position in the list is the class
    /// label used for training.
    pub fn speakers_in(&self, split: Split) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .utterances
            .iter()
            .filter(|u| u.split == split)
            .map(|u| u.speaker)
            .collect();
        s.dedup();
        s
    }
}

/// Sample trials over `utts` with exact target/nontarget counts, no repeated
/// pair and no self pairing.
pub fn generate_trials(utts: &[&Utterance], n_target: usize, n_nontarget: usize, seed: u64) -> Result<Vec<Trial>> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            if utts[i].speaker == utts[j].speaker {
                targets.push((i, j));
            } else {
                nontargets.push((i, j));
            }
        }
    }
    if targets.len() < n_target || nontargets.len() < n_nontarget {
        return Err(Error::Config(format!(
            "requested {n_target} target / {n_nontarget} nontarget trials but only {} / {} distinct pairs exist",
            targets.len(),
            nontargets.len()
        )));
    }
    let mut r = rng::stream(seed, "trials", &[]);
    let mut pick = |pool: &mut Vec<(usize, usize)>, n: usize| -> Vec<(usize, usize)> {
        // partial Fisher-Yates
        for i in 0..n {
            let j = r.random_range(i..pool.len());
            pool.swap(i, j);
        }
        pool[..n].to_vec()
    };
    let chosen_t = pick(&mut targets, n_target);
    let chosen_n = pick(&mut nontargets, n_nontarget);
    let mut out = Vec::with_capacity(n_target + n_nontarget);
    for (pairs, label) in [(chosen_t, TrialLabel::Target), (chosen_n, TrialLabel::Nontarget)] {
        for (i, j) in pairs {
            out.push(Trial {
                enroll: utts[i].id.clone(),
                test: utts[j].id.clone(),
                label,
            });
        }
    }
    out.sort_by(|a, b| (&a.enroll, &a.test).cmp(&(&b.enroll, &b.test)));
    Ok(out)
}

/// Check the trial-list invariants against the corpus.
pub fn validate_trials(corpus: &Corpus, trials: &[Trial]) -> Result<()> {
    let mut seen = HashSet::new();
    for t in trials {
        let (a, b) = (
            corpus.find(&t.enroll).ok_or_else(|| Error::Data(format!("unknown utterance id '{}'", t.enroll)))?,
            corpus.find(&t.test).ok_or_else(|| Error::Data(format!("unknown utterance id '{}'", t.test)))?,
        );
        if a.id == b.id {
            return Err(Error::Data(format!("self pairing of '{}'", a.id)));
        }
        let key = if a.id < b.id { (&a.id, &b.id) } else { (&b.id, &a.id) };
        if !seen.insert(key) {
            return Err(Error::Data(format!("repeated pair {} {}", a.id, b.id)));
        }
        if (a.speaker == b.speaker) != t.label.is_target() {
            return Err(Error::Data(format!("label of {} {} disagrees with speakers", a.id, b.id)));
        }
    }
    Ok(())
}

fn config_lines(cfg: &CorpusConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed={}", cfg.seed);
    let _ = writeln!(s, "num_speakers={}", cfg.num_speakers);
    let _ = writeln!(s, "utts_per_speaker={}", cfg.utts_per_speaker);
    let _ = writeln!(s, "frames_min={}", cfg.frames_min);
    let _ = writeln!(s, "frames_max={}", cfg.frames_max);
    let _ = writeln!(s, "frame_dim={}", cfg.frame_dim);
    let _ = writeln!(s, "latent_dim={}", cfg.latent_dim);
    let _ = writeln!(s, "speaker_scale={:?}", cfg.speaker_scale);
    let _ = writeln!(s, "noise_scale={:?}", cfg.noise_scale);
    let _ = writeln!(s, "channel_scale={:?}", cfg.channel_scale);
    let _ = writeln!(s, "pretrain_fraction={:?}", cfg.pretrain_fraction);
    let _ = writeln!(s, "eval_utts_per_speaker={}", cfg.eval_utts_per_speaker);
    s
}

/// Text format: a `adaptsv-corpus <version>` line, `key=value` config lines,
/// `utterances=<n>`, then per utterance a `utt <id> <speaker> <split> <T>`
/// line followed by `T` lines of `F` numbers in `{:.16e}` notation, and a
/// closing `end` line.
pub fn write_corpus(mut w: impl Write, corpus: &Corpus) -> std::io::Result<()> {
    writeln!(w, "{CORPUS_MAGIC} {CORPUS_VERSION}")?;
    w.write_all(config_lines(&corpus.config).as_bytes())?;
    writeln!(w, "utterances={}", corpus.utterances.len())?;
    let mut line = String::new();
    for u in &corpus.utterances {
        writeln!(
            w,
            "utt {} {} {} {}",
            u.id,
            speaker_id(u.speaker),
            u.split.as_str(),
            u.frames.rows()
        )?;
        for r in 0..u.frames.rows() {
            line.clear();
            for (i, v) in u.frames.row(r).iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{v:.16e}");
            }
            writeln!(w, "{line}")?;
        }
    }
    writeln!(w, "end")
}

struct LineReader<R> {
    inner: R,
    path: String,
    line: usize,
    buf: String,
}

impl<R: BufRead> LineReader<R> {
    fn next(&mut self) -> Result<&str> {
        self.buf.clear();
        let n = self
            .inner
            .read_line(&mut self.buf)
            .map_err(|e| Error::io(&self.path, e))?;
        self.line += 1;
        if n == 0 {
            return Err(self.err("unexpected end of file"));
        }
        Ok(self.buf.trim_end())
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn key_value(&mut self, key: &str) -> Result<String> {
        let line = self.next()?.to_string();
        match line.split_once('=') {
            Some((k, v)) if k == key => Ok(v.to_string()),
            _ => Err(self.err(format!("expected '{key}=...', found '{line}'"))),
        }
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.key_value(key)?;
        v.parse().map_err(|_| self.err(format!("invalid value '{v}' for {key}")))
    }
}

pub fn read_corpus(r: impl BufRead, path: &str) -> Result<Corpus> {
    let mut lr = LineReader {
        inner: r,
        path: path.to_string(),
        line: 0,
        buf: String::new(),
    };
    let header = lr.next()?.to_string();
    let (magic, version) = header
        .split_once(' ')
        .ok_or_else(|| lr.err("missing corpus header"))?;
    if magic != CORPUS_MAGIC {
        return Err(lr.err(format!("not a corpus file (header '{header}')")));
    }
    if version != CORPUS_VERSION.to_string() {
        return Err(Error::UnsupportedVersion {
            what: "corpus",
            found: version.to_string(),
            expected: CORPUS_VERSION.to_string(),
        });
    }
    let config = CorpusConfig {
        seed: lr.parsed("seed")?,
        num_speakers: lr.parsed("num_speakers")?,
        utts_per_speaker: lr.parsed("utts_per_speaker")?,
        frames_min: lr.parsed("frames_min")?,
        frames_max: lr.parsed("frames_max")?,
        frame_dim: lr.parsed("frame_dim")?,
        latent_dim: lr.parsed("latent_dim")?,
        speaker_scale: lr.parsed("speaker_scale")?,
        noise_scale: lr.parsed("noise_scale")?,
        channel_scale: lr.parsed("channel_scale")?,
        pretrain_fraction: lr.parsed("pretrain_fraction")?,
        eval_utts_per_speaker: lr.parsed("eval_utts_per_speaker")?,
    };
    let count: usize = lr.parsed("utterances")?;
    let f = config.frame_dim;
    let mut utterances = Vec::with_capacity(count);
    for _ in 0..count {
        let head = lr.next()?.to_string();
        let toks: Vec<&str> = head.split_whitespace().collect();
        if toks.len() != 5 || toks[0] != "utt" {
            return Err(lr.err(format!("expected utterance header, found '{head}'")));
        }
        let speaker = toks[2]
            .strip_prefix("spk")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| lr.err(format!("bad speaker id '{}'", toks[2])))?;
        let split = Split::parse(toks[3]).ok_or_else(|| lr.err(format!("bad split '{}'", toks[3])))?;
        let t: usize = toks[4]
            .parse()
            .map_err(|_| lr.err(format!("bad frame count '{}'", toks[4])))?;
        if t == 0 {
            return Err(lr.err("utterance with no frames"));
        }
        let mut data = Vec::with_capacity(t * f);
        for _ in 0..t {
            let row = lr.next()?.to_string();
            let before = data.len();
            for tok in row.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| lr.err(format!("bad number '{tok}'")))?;
                data.push(v);
            }
            if data.len() - before != f {
                return Err(lr.err(format!("expected {f} values, found {}", data.len() - before)));
            }
        }
        utterances.push(Utterance {
            id: toks[1].to_string(),
            speaker,
            split,
            frames: Tensor::matrix(t, f, data)?,
        });
    }
    if lr.next()? != "end" {
        return Err(lr.err("expected 'end' after the last utterance"));
    }
    Ok(Corpus { config, utterances })
}

/// Nearest-class-mean accuracy on utterance-mean frames of `split`, using
/// the utterances themselves as both training and test points.
pub fn linear_separability(corpus: &Corpus, split: Split) -> f64 {
    let utts = corpus.split(split);
    let f = corpus.config.frame_dim;
    let means: Vec<Vec<f64>> = utts.iter().map(|u| frame_mean(&u.frames)).collect();
    let speakers = corpus.speakers_in(split);
    let centroids: Vec<Vec<f64>> = speakers
        .iter()
        .map(|&s| {
            let mut c = vec![0.0; f];
            let mut n = 0.0;
            for (u, m) in utts.iter().zip(&means) {
                if u.speaker == s {
                    n += 1.0;
                    for i in 0..f {
                        c[i] += m[i];
                    }
                }
            }
            c.iter().map(|v| v / n).collect()
        })
        .collect();
    let correct = utts
        .iter()
        .zip(&means)
        .filter(|(u, m)| {
            let best = centroids
                .iter()
                .enumerate()
                .map(|(k, c)| (k, c.iter().zip(m.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| speakers[k]);
            best == Some(u.speaker)
        })
        .count();
    correct as f64 / utts.len() as f64
}

pub fn frame_mean(frames: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; frames.cols()];
    for r in 0..frames.rows() {
        for (a, v) in m.iter_mut().zip(frames.row(r)) {
            *a += v;
        }
    }
    let n = frames.rows() as f64;
    m.iter().map(|v| v / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::cosine_score;

    fn small() -> CorpusConfig {
        CorpusConfig {
            num_speakers: 6,
            utts_per_speaker: 4,
            frames_min: 3,
            frames_max: 5,
            frame_dim: 4,
            latent_dim: 2,
            eval_utts_per_speaker: 2,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn default_corpus_counts_and_split() {
        let c = generate_corpus(&CorpusConfig::default()).unwrap();
        assert_eq!(c.utterances.len(), 800);
        assert_eq!(c.speakers_in(Split::Pretrain).len(), 20);
        assert_eq!(c.speakers_in(Split::AdaptTrain), c.speakers_in(Split::AdaptEval));
        assert!(c
            .utterances
            .iter()
            .all(|u| (30..=60).contains(&u.frames.rows()) && u.frames.cols() == 20));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_corpus(&mut ba, &a).unwrap();
        write_corpus(&mut bb, &b).unwrap();
        assert_eq!(ba, bb);
        let mut other = small();
        other.seed = 2;
        assert_ne!(generate_corpus(&other).unwrap(), a);
    }

    #[test]
    fn speaker_signal_dominates() {
        let c = generate_corpus(&CorpusConfig::default()).unwrap();
        let means: Vec<(usize, Vec<f64>)> = c.utterances.iter().map(|u| (u.speaker, frame_mean(&u.frames))).collect();
        let (mut intra, mut ni, mut inter, mut nn) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let s = cosine_score(&means[i].1, &means[j].1).score;
                if means[i].0 == means[j].0 {
                    intra += s;
                    ni += 1.0;
                } else {
                    inter += s;
                    nn += 1.0;
                }
            }
        }
        assert!(intra / ni > inter / nn, "{} vs {}", intra / ni, inter / nn);
    }

    #[test]
    fn default_corpus_is_linearly_learnable() {
        let c = generate_corpus(&CorpusConfig::default()).unwrap();
        assert!(linear_separability(&c, Split::Pretrain) > 0.9);
        assert!(linear_separability(&c, Split::AdaptTrain) > 0.9);
    }

    #[test]
    fn rejects_impossible_configs() {
        let mut cfg = small();
        cfg.num_speakers = 1;
        assert!(matches!(generate_corpus(&cfg), Err(Error::Config(_))));
        let mut cfg = small();
        cfg.frames_min = 1;
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn corpus_round_trip() {
        let c = generate_corpus(&small()).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &c).unwrap();
        assert_eq!(read_corpus(&buf[..], "c").unwrap(), c);
    }

    #[test]
    fn truncated_corpus_is_a_parse_error() {
        let c = generate_corpus(&small()).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &c).unwrap();
        for cut in [buf.len() / 3, buf.len() - 10, 30] {
            let err = read_corpus(&buf[..cut], "c").unwrap_err();
            assert!(matches!(err, Error::Parse { .. }), "{err}");
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let c = generate_corpus(&small()).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &c).unwrap();
        let text = String::from_utf8(buf).unwrap().replacen("adaptsv-corpus 1", "adaptsv-corpus 9", 1);
        assert!(matches!(
            read_corpus(text.as_bytes(), "c"),
            Err(Error::UnsupportedVersion { .. })
        ));
    }

    #[test]
    fn trial_examples() {
        let c = generate_corpus(&CorpusConfig::default()).unwrap();
        let eval = c.split(Split::AdaptEval);
        let t = generate_trials(&eval, 100, 100, 5).unwrap();
        assert_eq!(t.len(), 200);
        assert_eq!(t.iter().filter(|x| x.label.is_target()).count(), 100);
        assert_eq!(t, generate_trials(&eval, 100, 100, 5).unwrap());
        validate_trials(&c, &t).unwrap();
        for tr in t.iter().filter(|x| x.label.is_target()) {
            assert_eq!(c.find(&tr.enroll).unwrap().speaker, c.find(&tr.test).unwrap().speaker);
        }
    }

    #[test]
    fn insufficient_pairs_reports_counts() {
        let c = generate_corpus(&small()).unwrap();
        let eval = c.split(Split::AdaptEval);
        let msg = generate_trials(&eval, 50, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("50") && msg.contains("only 3"), "{msg}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]
            #[test]
            fn trial_lists_hold_invariants(
                seed in 0u64..1_000_000,
                speakers in 4usize..9,
                utts in 3usize..6,
                nt in 1usize..6,
                nn in 1usize..20,
            ) {
                let cfg = CorpusConfig {
                    seed,
                    num_speakers: speakers,
                    utts_per_speaker: utts,
                    frames_min: 2,
                    frames_max: 3,
                    frame_dim: 2,
                    latent_dim: 1,
                    eval_utts_per_speaker: 2,
                    ..CorpusConfig::default()
                };
                let c = generate_corpus(&cfg).unwrap();
                let eval = c.split(Split::AdaptEval);
                match generate_trials(&eval, nt, nn, seed) {
                    Ok(t) => {
                        prop_assert_eq!(t.len(), nt + nn);
                        prop_assert_eq!(t.iter().filter(|x| x.label.is_target()).count(), nt);
                        prop_assert!(validate_trials(&c, &t).is_ok());
                    }
                    Err(e) => prop_assert!(matches!(e, Error::Config(_))),
                }
            }
        }
    }
}
