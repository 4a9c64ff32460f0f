//! Trains a small model on a stratified split, saves a checkpoint, reloads it
//! and scores the held-out samples.
//!
//!     cargo run --release --example train_checkpoint

use mgfuse::checkpoint::Checkpoint;
use mgfuse::config::TrainConfig;
use mgfuse::data::{stratified_holdout, synth_dataset, SynthOptions};
use mgfuse::model::{predict, Example, Routing};
use mgfuse::train::{fit, history_csv, init_model, plan_predictions, Corpus};

fn main() -> mgfuse::Result<()> {
    let cfg = TrainConfig { epochs: 15, val_fraction: 0.25, ..TrainConfig::default() };
    let ds = synth_dataset(SynthOptions { classes: 4, per_class: 12, noise: 0.1, ..Default::default() })?;
    let corpus = Corpus::from_dataset(&ds, &cfg)?;
    let labels = corpus.labels();
    let all: Vec<usize> = (0..labels.len()).collect();
    let (train, held) = stratified_holdout(&all, &labels, cfg.val_fraction, cfg.seed);

    let init = init_model(&cfg, &corpus)?;
    let plan = plan_predictions(&cfg, &corpus, &init.encoder, &train, &all)?;
    let log = |m: &str| eprintln!("{m}");
    let out = fit(&cfg, &corpus, &plan, &train, &held, init, &log)?;
    print!("{}", history_csv(&out.history));

    let path = std::env::temp_dir().join("mgfuse-example.ckpt");
    let ids = corpus.manifest.ids();
    Checkpoint::new(&cfg, corpus.categories(), &corpus.transcripts, train.iter().map(|&i| ids[i].clone()).collect(), out.params)
        .save(&path)?;
    let ck = Checkpoint::load(&path)?;
    let ex: Vec<Example<'_>> = held
        .iter()
        .map(|&i| Example { image: &corpus.images[i], pred: plan.lift_index[i], label: labels[i] })
        .collect();
    let probs = predict(&ck.params, &Routing::from_config(&cfg), &corpus.transcripts, corpus.categories(), &ex)?;
    let hits = probs.iter().zip(&ex).filter(|(p, e)| p.argmax() == e.label).count();
    println!("reloaded from {}: {hits}/{} held-out samples correct", path.display(), ex.len());
    Ok(())
}
