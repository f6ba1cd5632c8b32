//! Generate a corpus, pre-train the desk backbone, tune a few modes and
//! print their EER.
//!
//! cargo run --release -p adaptsv-core --example desk_pipeline -- [seed] [modes]

use std::time::Instant;

use adaptsv_core::config::{PretrainConfig, RunConfig};
use adaptsv_core::harness::{evaluate_checkpoint, pretrain_backbone, train};
use adaptsv_core::model::TuningMode;
use adaptsv_core::synth::{generate_corpus, generate_trials, CorpusConfig, Split};

fn main() -> adaptsv_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let modes: Vec<TuningMode> = match args.next() {
        Some(list) => list.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => vec![TuningMode::LinearProbe, TuningMode::InnerInter],
    };

    let corpus = generate_corpus(&CorpusConfig {
        seed,
        ..CorpusConfig::default()
    })?;
    let trials = generate_trials(&corpus.split(Split::AdaptEval), 200, 2000, seed)?;

    let t = Instant::now();
    let pre = pretrain_backbone(
        &PretrainConfig {
            seed,
            ..PretrainConfig::default()
        },
        &corpus,
    )?;
    println!("pretrain {:.1}s, final loss {:.4}", t.elapsed().as_secs_f64(), pre.losses.last().unwrap());

    for mode in modes {
        let cfg = RunConfig {
            seed,
            ..RunConfig::desk(mode)
        };
        let t = Instant::now();
        let out = train(&cfg, &pre.checkpoint, &corpus)?;
        let (_, report) = evaluate_checkpoint(&out.checkpoint, &corpus, &trials)?;
        println!("{}  [{:.1}s]", report.text_row(), t.elapsed().as_secs_f64());
    }
    Ok(())
}
