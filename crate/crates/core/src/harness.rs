//! Pre-training, tuning runs, evaluation, parameter reports and the scale
//! sweep.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::adapters::{AdapterVariant, ScaleSetting};
use crate::autodiff::{Tape, Var};
use crate::backbone::{encode_collect, set_trainable, BackboneMode, Encoder, EncoderConfig};
use crate::checkpoint::Checkpoint;
use crate::config::{PretrainConfig, RunConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::head::{cosine_score, train_loss, ClassifierHead};
use crate::metrics::{evaluate_scores, DcfParams, EvalResult, ScoreSet, Trial};
use crate::model::{build_model, count_trainable, AdapterConfig, Model, ParamCount, TuningMode};
use crate::nn::Linear;
use crate::optim::{Adam, AdamConfig, Schedule};
use crate::param::{Component, ParamStore};
use crate::rng;
use crate::synth::{Corpus, Split, Utterance};
use crate::tensor::Tensor;

/// Labelled training examples: utterances of `split`, labelled by the
/// speaker's position in [`Corpus::speakers_in`].
fn labelled(corpus: &Corpus, split: Split) -> Result<(Vec<(&Utterance, usize)>, usize)> {
    let speakers = corpus.speakers_in(split);
    if speakers.is_empty() {
        return Err(Error::Data(format!("corpus has no {split:?} utterances")));
    }
    let index: HashMap<usize, usize> = speakers.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let data = corpus
        .split(split)
        .into_iter()
        .map(|u| (u, index[&u.speaker]))
        .collect();
    Ok((data, speakers.len()))
}

/// Epoch-wise shuffled minibatches of indices into `0..n`.
struct Batches {
    seed: u64,
    n: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    fn new(seed: u64, n: usize) -> Self {
        Batches {
            seed,
            n,
            epoch: 0,
            order: Vec::new(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.order = (0..self.n).collect();
                let mut r = rng::stream(self.seed, "batches", &[self.epoch]);
                rng::shuffle(&mut r, &mut self.order);
                self.epoch += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn check_loss(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("training loss at step {step}")))
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

/// Train the transformer stack (featurizer frozen) with a throwaway linear
/// classifier on the time-pooled last layer, over the pre-training speakers.
/// Returns a backbone-only checkpoint.
pub fn pretrain_backbone(cfg: &PretrainConfig, corpus: &Corpus) -> Result<PretrainOutcome> {
    cfg.validate()?;
    check_corpus(corpus, &cfg.encoder)?;
    let (data, classes) = labelled(corpus, Split::Pretrain)?;
    let (encoder, mut store) = Encoder::build(&cfg.encoder)?;
    let d = cfg.encoder.hidden_dim;
    let clf = ClassifierHead {
        fc: Linear::declare(&mut store, "pretrain.classifier", d, classes, Component::Classifier, cfg.seed, false),
        num_speakers: classes,
    };
    set_trainable(&mut store, BackboneMode::FullFinetune);
    let mut opt = Adam::new(AdamConfig::default(), &store);
    let sched = Schedule::new(cfg.lr, cfg.warmup_steps, cfg.steps);
    let mut batches = Batches::new(cfg.seed, data.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let idx = batches.next(cfg.batch_size);
        let mut tape = Tape::new();
        let mut pooled = Vec::with_capacity(idx.len());
        for &i in &idx {
            let hs = encode_collect(&mut tape, &store, &encoder, &[], &data[i].0.frames)?;
            pooled.push(tape.mean_rows(*hs.last().expect("at least one layer")));
        }
        let labels: Vec<usize> = idx.iter().map(|&i| data[i].1).collect();
        let batch = tape.concat_rows(&pooled)?;
        let loss = train_loss(&mut tape, &store, batch, &labels, &clf)?;
        let value = tape.value(loss).item();
        check_loss(value, step)?;
        losses.push(value);
        tape.backward(loss, &mut store)?;
        let lr = sched.lr_at(step);
        opt.step(&mut store, lr, lr);
        store.zero_grad();
    }
    Ok(PretrainOutcome {
        checkpoint: Checkpoint::backbone_only(cfg.to_text(), cfg.steps as u64, &store),
        losses,
    })
}

/// An untrained backbone checkpoint, weights drawn from `encoder.seed`.
pub fn random_backbone(encoder: &EncoderConfig) -> Result<Checkpoint> {
    let (_, store) = Encoder::build(encoder)?;
    let cfg = PretrainConfig {
        encoder: encoder.clone(),
        ..PretrainConfig::default()
    };
    Ok(Checkpoint::backbone_only(cfg.to_text(), 0, &store))
}

pub fn backbone_config(backbone: &Checkpoint) -> Result<EncoderConfig> {
    PretrainConfig::from_text(&backbone.config, "backbone checkpoint config")
        .map(|c| c.encoder)
        .map_err(|e| Error::Data(format!("not a backbone checkpoint: {e}")))
}

fn check_corpus(corpus: &Corpus, encoder: &EncoderConfig) -> Result<()> {
    if corpus.config.frame_dim != encoder.input_dim {
        return Err(Error::Config(format!(
            "corpus frame_dim {} does not match encoder input_dim {}",
            corpus.config.frame_dim, encoder.input_dim
        )));
    }
    Ok(())
}

/// A model ready for tuning: mode attached, backbone loaded, freeze policy
/// applied.
pub struct Prepared {
    pub model: Model,
    pub classifier: ClassifierHead,
    pub store: ParamStore,
}

pub fn prepare(cfg: &RunConfig, backbone: &Checkpoint, num_speakers: usize) -> Result<Prepared> {
    cfg.validate()?;
    let enc = backbone_config(backbone)?;
    if enc != cfg.encoder {
        return Err(Error::Config(format!(
            "run encoder config {:?} differs from the backbone's {:?}",
            cfg.encoder, enc
        )));
    }
    let (model, clf, mut store) = build_model(
        &cfg.encoder,
        cfg.mode,
        cfg.adapter.as_ref(),
        cfg.head.embed_dim,
        cfg.seed,
        Some(num_speakers),
    )?;
    backbone.restore_into(&mut store, Component::is_backbone)?;
    Ok(Prepared {
        model,
        classifier: clf.expect("requested"),
        store,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    pub backbone_hash_before: u64,
    pub backbone_hash_after: u64,
}

/// Frozen layer outputs per utterance, for modes that never backpropagate
/// into the encoder.
fn cache_layers(model: &Model, store: &ParamStore, utts: &[&Utterance]) -> Result<Vec<Vec<Tensor>>> {
    let range = model.layers_needed()?;
    utts.iter()
        .map(|u| {
            let mut tape = Tape::new();
            let hs = encode_collect(&mut tape, store, &model.encoder, &model.inner, &u.frames)?;
            Ok(hs[range.clone()].iter().map(|&v| tape.value(v).clone()).collect())
        })
        .collect()
}

/// Tune `cfg.mode` on the adaptation speakers' training utterances.
pub fn train(cfg: &RunConfig, backbone: &Checkpoint, corpus: &Corpus) -> Result<TrainOutcome> {
    let (data, classes) = labelled(corpus, Split::AdaptTrain)?;
    check_corpus(corpus, &cfg.encoder)?;
    let Prepared {
        model,
        classifier,
        mut store,
    } = prepare(cfg, backbone, classes)?;
    let before = store.backbone_hash();
    let utts: Vec<&Utterance> = data.iter().map(|(u, _)| *u).collect();
    let cache = if cfg.mode.backprops_through_encoder() {
        None
    } else {
        Some(cache_layers(&model, &store, &utts)?)
    };
    let o = &cfg.optim;
    let mut opt = Adam::new(o.adam(), &store);
    let head_lr = Schedule::new(o.lr_head, o.warmup_steps, o.total_steps);
    let other_lr = Schedule::new(o.lr_other, o.warmup_steps, o.total_steps);
    let mut batches = Batches::new(cfg.seed, data.len());
    let mut losses = Vec::with_capacity(o.total_steps);
    for step in 1..=o.total_steps {
        let idx = batches.next(o.batch_size);
        let mut tape = Tape::new();
        let mut embs = Vec::with_capacity(idx.len());
        for &i in &idx {
            let e = match &cache {
                Some(c) => {
                    let hs: Vec<Var> = c[i].iter().map(|t| tape.input(t.clone())).collect();
                    model.embed_from_layers(&mut tape, &store, &hs)?
                }
                None => model.embed(&mut tape, &store, &utts[i].frames)?,
            };
            embs.push(e);
        }
        let labels: Vec<usize> = idx.iter().map(|&i| data[i].1).collect();
        let batch = tape.concat_rows(&embs)?;
        let loss = train_loss(&mut tape, &store, batch, &labels, &classifier)?;
        let value = tape.value(loss).item();
        check_loss(value, step)?;
        losses.push(value);
        tape.backward(loss, &mut store)?;
        opt.step(&mut store, head_lr.lr_at(step), other_lr.lr_at(step));
        store.zero_grad();
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| !p.value.is_finite()) {
        return Err(Error::Numeric(format!("parameter {}", p.name)));
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_store(cfg.to_text(), o.total_steps as u64, &store),
        losses,
        backbone_hash_before: before,
        backbone_hash_after: store.backbone_hash(),
    })
}

/// A tuned model reconstructed from its checkpoint.
pub struct LoadedRun {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub step: u64,
}

pub fn load_run(ckpt: &Checkpoint) -> Result<LoadedRun> {
    let config = RunConfig::from_text(&ckpt.config, "run checkpoint config")
        .map_err(|e| Error::Data(format!("not a run checkpoint: {e}")))?;
    let (model, _, mut store) = build_model(
        &config.encoder,
        config.mode,
        config.adapter.as_ref(),
        config.head.embed_dim,
        config.seed,
        None,
    )?;
    ckpt.restore_into(&mut store, |_| true)?;
    Ok(LoadedRun {
        config,
        model,
        store,
        step: ckpt.step,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub result: EvalResult,
    pub scores: Vec<f64>,
    /// Trials where an embedding had (near) zero norm and scored 0.
    pub degenerate_trials: usize,
}

/// Embed every utterance the trials mention, cosine-score them and compute
/// EER and minDCF.
pub fn evaluate(model: &Model, store: &ParamStore, corpus: &Corpus, trials: &[Trial]) -> Result<Evaluation> {
    let mut embeddings: HashMap<&str, Vec<f64>> = HashMap::new();
    for id in trials.iter().flat_map(|t| [t.enroll.as_str(), t.test.as_str()]) {
        if embeddings.contains_key(id) {
            continue;
        }
        let utt = corpus
            .find(id)
            .ok_or_else(|| Error::Data(format!("trial references unknown utterance id '{id}'")))?;
        embeddings.insert(id, model.embed_values(store, &utt.frames)?);
    }
    let mut degenerate = 0;
    let scores: Vec<f64> = trials
        .iter()
        .map(|t| {
            let s = cosine_score(&embeddings[t.enroll.as_str()], &embeddings[t.test.as_str()]);
            degenerate += usize::from(s.degenerate);
            s.score
        })
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("trial scores".into()));
    }
    let set = ScoreSet::new(scores.clone(), trials.iter().map(|t| t.label).collect())?;
    Ok(Evaluation {
        result: evaluate_scores(&set, DcfParams::default())?,
        scores,
        degenerate_trials: degenerate,
    })
}

/// One evaluated run. Everything except `wall_clock_s` is a function of the
/// checkpoint and the trial list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mode: TuningMode,
    pub seed: u64,
    pub step: u64,
    pub backbone_hash: String,
    pub params: ParamCount,
    pub eer: f64,
    pub min_dcf: f64,
    pub threshold_at_eer: f64,
    pub targets: usize,
    pub nontargets: usize,
    pub degenerate_trials: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn text_row(&self) -> String {
        format!(
            "{:<14} seed {:<4} params {:>10} ({:>7.3}%)  EER {:>7.3}%  minDCF {:.4}",
            self.mode.as_str(),
            self.seed,
            self.params.tuned(),
            self.params.percent_of_backbone,
            100.0 * self.eer,
            self.min_dcf
        )
    }
}

/// Evaluate a run checkpoint and build its report row. The caller fills
/// `wall_clock_s` if it wants timing in the report.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, corpus: &Corpus, trials: &[Trial]) -> Result<(Evaluation, MetricsReport)> {
    let run = load_run(ckpt)?;
    let ev = evaluate(&run.model, &run.store, corpus, trials)?;
    let c = &run.config;
    let params = count_trainable(&c.encoder, c.mode, c.adapter.as_ref(), c.head.embed_dim)?;
    let report = MetricsReport {
        mode: c.mode,
        seed: c.seed,
        step: run.step,
        backbone_hash: format!("{:016x}", ckpt.backbone_hash),
        params,
        eer: ev.result.eer,
        min_dcf: ev.result.min_dcf,
        threshold_at_eer: ev.result.threshold_at_eer,
        targets: ev.result.targets,
        nontargets: ev.result.nontargets,
        degenerate_trials: ev.degenerate_trials,
        wall_clock_s: None,
    };
    Ok((ev, report))
}

/// Parameter accounting for every tuning mode. `adapter` configures the
/// inner-adapter modes; houlsby always uses the sequential variant of it.
pub fn count_params_report(encoder: &EncoderConfig, adapter: &AdapterConfig, embed_dim: usize) -> Result<Vec<ParamCount>> {
    TuningMode::ALL
        .iter()
        .map(|&mode| {
            let a = mode.has_inner().then(|| {
                let mut a = *adapter;
                if mode == TuningMode::Houlsby {
                    a.variant = AdapterVariant::Sequential;
                }
                a
            });
            count_trainable(encoder, mode, a.as_ref(), embed_dim)
        })
        .collect()
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

/// Aligned text table: tuned parameters, percent of the backbone total and
/// the itemized breakdown of the tuned parameters.
pub fn format_param_table(rows: &[ParamCount]) -> String {
    let mut s = String::new();
    let total = rows.first().map_or(0, |r| r.backbone_total);
    let _ = writeln!(s, "backbone total (featurizer + transformer): {total}");
    let _ = writeln!(
        s,
        "{:<14} {:>11} {:>9} {:>9} {:>11} {:>9} {:>9} {:>8} {:>9} {:>8}",
        "mode", "# params", "approx", "% backbone", "weights", "biases", "norms", "scalars", "head", "adapters"
    );
    for r in rows {
        let mut tuned = crate::model::Itemized::default();
        for (c, i) in &r.components {
            if !c.is_head() {
                tuned.weights += i.weights;
                tuned.biases += i.biases;
                tuned.norms += i.norms;
                tuned.scalars += i.scalars;
            }
        }
        let _ = writeln!(
            s,
            "{:<14} {:>11} {:>9} {:>9.3}% {:>11} {:>9} {:>9} {:>8} {:>9} {:>8}",
            r.mode.as_str(),
            r.tuned(),
            millions(r.tuned()),
            r.percent_of_backbone,
            tuned.weights,
            tuned.biases,
            tuned.norms,
            tuned.scalars,
            r.head_trainable,
            r.adapter_modules
        );
    }
    s
}

/// One requested sweep entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepEntry {
    Sequential,
    Learnable,
    Fixed(f64),
}

impl SweepEntry {
    pub fn label(&self) -> String {
        match self {
            SweepEntry::Sequential => "sequential".into(),
            SweepEntry::Learnable => "learnable".into(),
            SweepEntry::Fixed(s) => format!("{s:?}"),
        }
    }
}

pub const DEFAULT_SWEEP_SCALES: [f64; 6] = [0.05, 0.1, 0.5, 1.0, 1.5, 2.0];

pub fn sweep_roster(scales: &[f64], include_learnable: bool, include_sequential: bool) -> Vec<SweepEntry> {
    let mut r = Vec::new();
    if include_sequential {
        r.push(SweepEntry::Sequential);
    }
    if include_learnable {
        r.push(SweepEntry::Learnable);
    }
    r.extend(scales.iter().map(|&s| SweepEntry::Fixed(s)));
    r
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub entry: String,
    pub eer: f64,
    pub min_dcf: f64,
    pub final_loss: f64,
}

/// Train and evaluate `base` once per entry, varying only the inner
/// adapters' variant and scale.
pub fn sweep_scale(
    base: &RunConfig,
    entries: &[SweepEntry],
    backbone: &Checkpoint,
    corpus: &Corpus,
    trials: &[Trial],
) -> Result<Vec<SweepRow>> {
    if !base.mode.has_inner() || base.mode == TuningMode::Houlsby {
        return Err(Error::Config(format!(
            "sweep-scale needs a mode with parallel-capable inner adapters, got {}",
            base.mode
        )));
    }
    let adapter = base
        .adapter
        .ok_or_else(|| Error::Config("sweep-scale needs an adapter config".into()))?;
    entries
        .iter()
        .map(|entry| {
            let mut cfg = base.clone();
            let (variant, scale) = match *entry {
                SweepEntry::Sequential => (AdapterVariant::Sequential, adapter.scale),
                SweepEntry::Learnable => (AdapterVariant::Parallel, ScaleSetting::Learnable(crate::adapters::LEARNABLE_SCALE_INIT)),
                SweepEntry::Fixed(s) => (AdapterVariant::Parallel, ScaleSetting::Fixed(s)),
            };
            cfg.adapter = Some(AdapterConfig {
                variant,
                scale,
                ..adapter
            });
            let out = train(&cfg, backbone, corpus)?;
            let (ev, _) = evaluate_checkpoint(&out.checkpoint, corpus, trials)?;
            Ok(SweepRow {
                entry: entry.label(),
                eer: ev.result.eer,
                min_dcf: ev.result.min_dcf,
                final_loss: *out.losses.last().expect("at least one step"),
            })
        })
        .collect()
}

pub fn format_sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!("{:<12} {:>9} {:>8}\n", "scale", "EER (%)", "minDCF");
    for r in rows {
        let _ = writeln!(s, "{:<12} {:>9.3} {:>8.4}", r.entry, 100.0 * r.eer, r.min_dcf);
    }
    s
}

/// Encoder used by the gradient check: two layers, all widths small.
pub fn grad_check_encoder() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        input_dim: 6,
        seed: 11,
    }
}

/// Minimum relu pre-activation magnitude accepted at a gradient-check point.
pub const GRAD_CHECK_MIN_MARGIN: f64 = 1e-3;

/// Parameters whose gradient is identically zero: adding a constant to every
/// key shifts each attention logit row uniformly, which softmax ignores.
pub fn is_structurally_zero(name: &str) -> bool {
    name.ends_with(".attn.k.bias")
}

/// Absolute bound on both analytic and central-difference gradients of the
/// structurally zero parameters.
pub const STRUCTURAL_ZERO_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct ModelGradCheck {
    pub mode: TuningMode,
    /// Relative-error probes over every other parameter.
    pub report: GradCheckReport,
    pub structural_zero_params: Vec<String>,
    /// Largest analytic or central-difference magnitude over every
    /// coordinate of the structurally zero parameters.
    pub structural_zero_max_abs: f64,
}

impl ModelGradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.report.max_rel_error <= tol && self.structural_zero_max_abs <= STRUCTURAL_ZERO_TOL
    }
}

/// Finite-difference check of every parameter of `mode` (backbone, adapters,
/// layer weights, learnable scales, head, classifier) through a full
/// encode, pool and cross-entropy graph. Zero-initialized tensors are
/// randomized first so no gradient is trivially zero, and points with a relu
/// input closer than [`GRAD_CHECK_MIN_MARGIN`] to the kink are re-drawn.
pub fn grad_check_model(mode: TuningMode, h: f64, n_probes: usize, seed: u64) -> Result<ModelGradCheck> {
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-7, 1e-4]")));
    }
    let enc = grad_check_encoder();
    let adapter = mode.has_inner().then(|| AdapterConfig {
        bottleneck: 3,
        variant: if mode == TuningMode::Houlsby {
            AdapterVariant::Sequential
        } else {
            AdapterVariant::Parallel
        },
        scale: ScaleSetting::Learnable(0.8),
    });
    let speakers = 3;
    for attempt in 0..50u64 {
        let (model, clf, mut store) = build_model(&enc, mode, adapter.as_ref(), 5, seed, Some(speakers))?;
        let clf = clf.expect("requested");
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            let p = store.get_mut(id);
            p.trainable = true;
            let mut r = rng::stream(seed, "grad-check-init", &[attempt, id.index() as u64]);
            let gamma = p.name.ends_with(".gamma");
            for v in p.value.data_mut() {
                *v = if gamma { 1.0 + 0.3 * rng::gaussian(&mut r) } else { 0.5 * rng::gaussian(&mut r) };
            }
        }
        let mut r = rng::stream(seed, "grad-check-frames", &[attempt]);
        let batch: Vec<Tensor> = (0..speakers)
            .map(|k| Tensor::matrix(3 + k, enc.input_dim, rng::gaussian_vec(&mut r, (3 + k) * enc.input_dim, 1.0)))
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = (0..speakers).collect();
        let f = |tape: &mut Tape, store: &ParamStore| -> Result<Var> {
            let embs = batch
                .iter()
                .map(|x| model.embed(tape, store, x))
                .collect::<Result<Vec<_>>>()?;
            let b = tape.concat_rows(&embs)?;
            train_loss(tape, store, b, &labels, &clf)
        };
        let eval = |store: &ParamStore| -> Result<f64> {
            let mut tape = Tape::new();
            let loss = f(&mut tape, store)?;
            Ok(tape.value(loss).item())
        };

        let zero_ids: Vec<_> = ids
            .iter()
            .copied()
            .filter(|&id| is_structurally_zero(&store.get(id).name))
            .collect();
        store.zero_grad();
        let mut tape = Tape::new();
        let loss = f(&mut tape, &store)?;
        tape.backward(loss, &mut store)?;
        let mut zero_max: f64 = 0.0;
        for &id in &zero_ids {
            zero_max = store.get(id).grad.data().iter().fold(zero_max, |m, g| m.max(g.abs()));
            for c in 0..store.value(id).len() {
                let orig = store.value(id).data()[c];
                store.get_mut(id).value.data_mut()[c] = orig + h;
                let plus = eval(&store)?;
                store.get_mut(id).value.data_mut()[c] = orig - h;
                let minus = eval(&store)?;
                store.get_mut(id).value.data_mut()[c] = orig;
                zero_max = zero_max.max(((plus - minus) / (2.0 * h)).abs());
            }
            store.get_mut(id).trainable = false;
        }

        let report = grad_check(&mut store, f, h, n_probes, seed ^ attempt)?;
        if report.min_relu_margin.is_none_or(|m| m > GRAD_CHECK_MIN_MARGIN) {
            return Ok(ModelGradCheck {
                mode,
                report,
                structural_zero_params: zero_ids.iter().map(|&id| store.get(id).name.clone()).collect(),
                structural_zero_max_abs: zero_max,
            });
        }
    }
    Err(Error::Numeric("no gradient-check point clear of relu kinks".into()))
}
