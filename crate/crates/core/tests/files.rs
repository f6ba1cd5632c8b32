//! Saving and loading every on-disk artifact through real files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use adaptsv_core::checkpoint::Checkpoint;
use adaptsv_core::config::RunConfig;
use adaptsv_core::harness::{grad_check_encoder, random_backbone, train};
use adaptsv_core::metrics::{read_trials, write_trials};
use adaptsv_core::model::TuningMode;
use adaptsv_core::synth::{generate_corpus, generate_trials, read_corpus, write_corpus, CorpusConfig, Split};
use adaptsv_core::Error;

fn tiny_corpus() -> adaptsv_core::synth::Corpus {
    generate_corpus(&CorpusConfig {
        num_speakers: 6,
        utts_per_speaker: 6,
        frames_min: 4,
        frames_max: 7,
        frame_dim: 6,
        eval_utts_per_speaker: 2,
        ..CorpusConfig::default()
    })
    .unwrap()
}

#[test]
fn corpus_and_trials_survive_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus();
    let path = dir.path().join("corpus.txt");
    let mut w = BufWriter::new(File::create(&path).unwrap());
    write_corpus(&mut w, &corpus).unwrap();
    w.flush().unwrap();
    drop(w);
    let back = read_corpus(BufReader::new(File::open(&path).unwrap()), "corpus.txt").unwrap();
    assert_eq!(back, corpus);

    let trials = generate_trials(&corpus.split(Split::AdaptEval), 3, 5, 2).unwrap();
    let tpath = dir.path().join("trials.txt");
    write_trials(File::create(&tpath).unwrap(), &trials).unwrap();
    let tback = read_trials(BufReader::new(File::open(&tpath).unwrap()), "trials.txt").unwrap();
    assert_eq!(tback, trials);
}

#[test]
fn run_checkpoint_and_config_survive_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus();
    let backbone = random_backbone(&grad_check_encoder()).unwrap();
    let mut cfg = RunConfig::desk(TuningMode::InnerInter);
    cfg.encoder = grad_check_encoder();
    cfg.adapter.as_mut().unwrap().bottleneck = 3;
    cfg.head.embed_dim = 4;
    cfg.optim.total_steps = 5;
    cfg.optim.warmup_steps = 1;
    cfg.optim.batch_size = 3;

    let cpath = dir.path().join("run.toml");
    std::fs::write(&cpath, cfg.to_text()).unwrap();
    assert_eq!(RunConfig::load(&cpath).unwrap(), cfg);

    let out = train(&cfg, &backbone, &corpus).unwrap();
    let kpath = dir.path().join("run.ckpt");
    out.checkpoint.save(&kpath).unwrap();
    let back = Checkpoint::load(&kpath).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.backbone_hash, backbone.backbone_hash);

    let bytes = std::fs::read(&kpath).unwrap();
    std::fs::write(&kpath, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(Checkpoint::load(&kpath), Err(Error::Data(_))));
    assert!(matches!(
        Checkpoint::load(&dir.path().join("absent.ckpt")),
        Err(Error::Io { .. })
    ));
}
