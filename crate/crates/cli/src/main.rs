use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use adaptsv_core::adapters::{AdapterVariant, ScaleSetting};
use adaptsv_core::backbone::EncoderConfig;
use adaptsv_core::checkpoint::Checkpoint;
use adaptsv_core::config::{PretrainConfig, RunConfig};
use adaptsv_core::harness::{
    self, count_params_report, evaluate_checkpoint, format_param_table, format_sweep_table, sweep_roster,
    DEFAULT_SWEEP_SCALES,
};
use adaptsv_core::head::{write_embeddings, SpeakerEmbedding};
use adaptsv_core::metrics::{read_trials, write_scores, write_trials, Trial};
use adaptsv_core::model::{AdapterConfig, TuningMode};
use adaptsv_core::synth::{generate_corpus, generate_trials, read_corpus, write_corpus, Corpus, CorpusConfig, Split};
use adaptsv_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// `println!` that treats a closed stdout (`| head`) as a clean exit.
macro_rules! out {
    ($($t:tt)*) => {{
        if writeln!(std::io::stdout().lock(), $($t)*).is_err() {
            std::process::exit(0);
        }
    }};
}

#[derive(Parser)]
#[command(name = "adaptsv", version, about = "Adapter tuning for speaker verification on a frozen transformer encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and an evaluation trial list
    GenData(GenData),
    /// Pre-train the desk backbone on the pre-training speakers
    Pretrain(Pretrain),
    /// Tune a mode on the adaptation speakers
    Train(Train),
    /// Score a trial list with a run checkpoint
    Eval(Eval),
    /// Trainable-parameter accounting for every mode
    CountParams(CountParams),
    /// Train and evaluate once per adapter scale setting
    SweepScale(SweepScale),
    /// Finite-difference check of the model gradients
    GradCheck(GradCheck),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    /// Trial list over the held-out adaptation utterances
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    utts_per_speaker: Option<usize>,
    #[arg(long, default_value_t = 200)]
    n_target: usize,
    #[arg(long, default_value_t = 2000)]
    n_nontarget: usize,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML pre-training config; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// TOML run config; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<TuningMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bottleneck: Option<usize>,
    #[arg(long)]
    variant: Option<AdapterVariant>,
    /// A number, `learnable` or `learnable:<init>`
    #[arg(long)]
    scale: Option<ScaleSetting>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    lr_head: Option<f64>,
    #[arg(long)]
    lr_other: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunFlags,
    /// Write the resolved run config here
    #[arg(long)]
    write_config: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    /// Write `enroll test score label` lines here
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Write `utt v1 .. ve` embedding rows here
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Print the report as a JSON line instead of text
    #[arg(long)]
    json: bool,
    /// Record wall-clock seconds in the report (makes it non-reproducible)
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct CountParams {
    #[arg(long, default_value = "wavlm-base-plus-dims")]
    preset: String,
    /// Defaults to 256 at the wavlm preset and 16 at desk
    #[arg(long)]
    bottleneck: Option<usize>,
    /// Defaults to 512 at the wavlm preset and 32 at desk
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    scale: Option<ScaleSetting>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SweepScale {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[command(flatten)]
    run: RunFlags,
    /// Comma-separated fixed scales
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    #[arg(long)]
    no_learnable: bool,
    #[arg(long)]
    no_sequential: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradCheck {
    #[arg(long, default_value = "inner-inter")]
    mode: TuningMode,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 100)]
    probes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long)]
    json: bool,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io { path: path.into(), source: e })
}

fn finish(w: BufWriter<File>, path: &Path) -> Result<()> {
    w.into_inner()
        .map_err(|e| e.into_error())
        .and_then(|f| f.sync_all())
        .map_err(|e| Error::Io { path: path.into(), source: e })
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).map_err(|e| Error::Io { path: path.into(), source: e })?;
    finish(w, path)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io { path: path.into(), source: e })
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    read_corpus(open(path)?, &path.display().to_string())
}

fn load_trials(path: &Path) -> Result<Vec<Trial>> {
    read_trials(open(path)?, &path.display().to_string())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = CorpusConfig {
        seed: a.seed,
        ..CorpusConfig::default()
    };
    if let Some(s) = a.speakers {
        cfg.num_speakers = s;
    }
    if let Some(u) = a.utts_per_speaker {
        cfg.utts_per_speaker = u;
    }
    let corpus = generate_corpus(&cfg)?;
    write_with(&a.out, |w| write_corpus(w, &corpus))?;
    out!("wrote {} utterances to {}", corpus.utterances.len(), a.out.display());
    if let Some(path) = a.trials {
        let eval = corpus.split(Split::AdaptEval);
        let trials = generate_trials(&eval, a.n_target, a.n_nontarget, a.seed)?;
        write_with(&path, |w| write_trials(w, &trials))?;
        out!("wrote {} trials to {}", trials.len(), path.display());
    }
    Ok(())
}

fn pretrain(a: Pretrain) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PretrainConfig::from_text(&read_text(p)?, &p.display().to_string())?,
        None => PretrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.warmup_steps {
        cfg.warmup_steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    cfg.data.corpus = Some(a.corpus.display().to_string());
    let corpus = load_corpus(&a.corpus)?;
    let out = harness::pretrain_backbone(&cfg, &corpus)?;
    out.checkpoint.save(&a.out)?;
    let l = &out.losses;
    out!(
        "pretrained {} steps: loss {:.4} -> {:.4}; backbone hash {:016x}",
        l.len(),
        l[0],
        l[l.len() - 1],
        out.checkpoint.backbone_hash
    );
    Ok(())
}

/// Resolve a run config: the file (or desk defaults for the mode), then
/// every flag on top. The encoder comes from the backbone unless a file
/// fixes it.
fn resolve_run(f: &RunFlags, backbone: &Checkpoint) -> Result<RunConfig> {
    let from_file = f.config.is_some();
    let mut cfg = match &f.config {
        Some(p) => RunConfig::from_text(&read_text(p)?, &p.display().to_string())?,
        None => RunConfig::desk(f.mode.unwrap_or(TuningMode::InnerInter)),
    };
    if let Some(m) = f.mode {
        if m != cfg.mode {
            cfg.mode = m;
            if !from_file || (m.has_inner() && cfg.adapter.is_none()) {
                cfg.adapter = RunConfig::desk(m).adapter;
            }
        }
    }
    let adapter_flags = f.bottleneck.is_some() || f.variant.is_some() || f.scale.is_some();
    if adapter_flags {
        let a = cfg.adapter.as_mut().ok_or_else(|| {
            Error::Config(format!("adapter flags given but {} mode inserts no inner adapters", cfg.mode))
        })?;
        if let Some(v) = f.bottleneck {
            a.bottleneck = v;
        }
        if let Some(v) = f.variant {
            a.variant = v;
        }
        if let Some(v) = f.scale {
            a.scale = v;
        }
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if let Some(v) = f.embed_dim {
        cfg.head.embed_dim = v;
    }
    let o = &mut cfg.optim;
    if let Some(v) = f.lr_head {
        o.lr_head = v;
    }
    if let Some(v) = f.lr_other {
        o.lr_other = v;
    }
    if let Some(v) = f.warmup_steps {
        o.warmup_steps = v;
    }
    if let Some(v) = f.total_steps {
        o.total_steps = v;
    }
    if let Some(v) = f.batch_size {
        o.batch_size = v;
    }
    if !from_file {
        cfg.encoder = harness::backbone_config(backbone)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: Train) -> Result<()> {
    let backbone = Checkpoint::load(&a.backbone)?;
    let mut cfg = resolve_run(&a.run, &backbone)?;
    cfg.data.corpus = Some(a.corpus.display().to_string());
    cfg.data.backbone = Some(a.backbone.display().to_string());
    if let Some(p) = &a.write_config {
        std::fs::write(p, cfg.to_text()).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    }
    let corpus = load_corpus(&a.corpus)?;
    let out = harness::train(&cfg, &backbone, &corpus)?;
    out.checkpoint.save(&a.out)?;
    let l = &out.losses;
    out!(
        "{}: {} steps, loss {:.4} -> {:.4}; backbone {}",
        cfg.mode,
        l.len(),
        l[0],
        l[l.len() - 1],
        if out.backbone_hash_before == out.backbone_hash_after {
            "unchanged"
        } else {
            "updated"
        }
    );
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let start = Instant::now();
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let trials = load_trials(&a.trials)?;
    let (ev, mut report) = evaluate_checkpoint(&ckpt, &corpus, &trials)?;
    if a.timing {
        report.wall_clock_s = Some(start.elapsed().as_secs_f64());
    }
    if let Some(p) = &a.scores {
        write_with(p, |w| write_scores(w, &trials, &ev.scores))?;
    }
    if let Some(p) = &a.embeddings {
        let run = harness::load_run(&ckpt)?;
        let mut ids: Vec<&str> = trials.iter().flat_map(|t| [t.enroll.as_str(), t.test.as_str()]).collect();
        ids.sort_unstable();
        ids.dedup();
        let embs = ids
            .iter()
            .map(|id| {
                let u = corpus.find(id).expect("checked by evaluate");
                Ok(SpeakerEmbedding {
                    utt_id: u.id.clone(),
                    vector: run.model.embed_values(&run.store, &u.frames)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_with(p, |w| write_embeddings(w, &embs))?;
    }
    if ev.degenerate_trials > 0 {
        eprintln!("warning: {} trials involved a degenerate embedding and scored 0", ev.degenerate_trials);
    }
    if a.json {
        out!("{}", report.to_json());
    } else {
        out!("{}", report.text_row());
    }
    Ok(())
}

fn count_params(a: CountParams) -> Result<()> {
    let encoder = EncoderConfig::preset(&a.preset)?;
    let wavlm = encoder == EncoderConfig::wavlm_base_plus_dims();
    let mut adapter = if wavlm {
        AdapterConfig::wavlm_base_plus()
    } else {
        AdapterConfig::desk()
    };
    if let Some(b) = a.bottleneck {
        adapter.bottleneck = b;
    }
    if let Some(s) = a.scale {
        adapter.scale = s;
    }
    let embed_dim = a.embed_dim.unwrap_or(if wavlm { 512 } else { 32 });
    let rows = count_params_report(&encoder, &adapter, embed_dim)?;
    if a.json {
        for r in &rows {
            out!("{}", serde_json::to_string(r).expect("serializes"));
        }
    } else {
        out!("{}", format_param_table(&rows).trim_end());
    }
    Ok(())
}

fn sweep(a: SweepScale) -> Result<()> {
    let backbone = Checkpoint::load(&a.backbone)?;
    let mut flags = a.run.clone();
    flags.mode.get_or_insert(TuningMode::InnerInter);
    let cfg = resolve_run(&flags, &backbone)?;
    let corpus = load_corpus(&a.corpus)?;
    let trials = load_trials(&a.trials)?;
    let scales = a.scales.unwrap_or_else(|| DEFAULT_SWEEP_SCALES.to_vec());
    let roster = sweep_roster(&scales, !a.no_learnable, !a.no_sequential);
    let rows = harness::sweep_scale(&cfg, &roster, &backbone, &corpus, &trials)?;
    if a.json {
        for r in &rows {
            out!("{}", serde_json::to_string(r).expect("serializes"));
        }
    } else {
        out!("{}", format_sweep_table(&rows).trim_end());
    }
    Ok(())
}

fn grad_check(a: GradCheck) -> Result<bool> {
    let g = harness::grad_check_model(a.mode, a.h, a.probes, a.seed)?;
    let ok = g.passes(a.tol);
    if a.json {
        out!("{}", serde_json::to_string(&g).expect("serializes"));
    } else {
        let r = &g.report;
        out!(
            "{}: {} probes over {} tensors, max relative error {:.3e}; structurally zero gradients {} (max |g| {:.1e}); {}",
            g.mode,
            r.probes.len(),
            r.params_covered,
            r.max_rel_error,
            g.structural_zero_params.len(),
            g.structural_zero_max_abs,
            if ok { "ok" } else { "FAILED" }
        );
        if let Some(w) = r.worst() {
            out!("worst: {}[{}] analytic {:.6e} numeric {:.6e}", w.param, w.coord, w.analytic, w.numeric);
        }
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Pretrain(a) => pretrain(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::CountParams(a) => count_params(a).map(|_| true),
        Command::SweepScale(a) => sweep(a).map(|_| true),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(true) => 0,
        Ok(false) => 4,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
