//! Two-fold cross-validation of the full model on a noise-free synthetic set.
//!
//!     cargo run --release --example cross_validate -- [noise] [epochs]

use mgfuse::config::TrainConfig;
use mgfuse::data::{synth_dataset, SynthOptions};
use mgfuse::train::{cross_validate, Corpus};

fn main() -> mgfuse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let noise = args.first().map_or(0.0, |s| s.parse().expect("noise"));
    let epochs = args.get(1).map_or(30, |s| s.parse().expect("epochs"));
    let ds = synth_dataset(SynthOptions { classes: 10, per_class: 20, noise, ..Default::default() })?;
    let cfg = TrainConfig { folds: 2, epochs, ..TrainConfig::default() };
    let corpus = Corpus::from_dataset(&ds, &cfg)?;
    let log = |m: &str| eprintln!("{m}");
    let cv = cross_validate(&cfg, &corpus, 2, &log)?;
    for r in &cv.runs {
        println!(
            "fold {}: top1 {:.3}, lmm accuracy {:.3}, best epoch {}",
            r.fold,
            r.metrics.top1(),
            r.plan.accuracy(&corpus.labels()),
            r.outcome.best_epoch
        );
    }
    let (m, s) = cv.report.top1();
    println!("top-1 {m:.4} +/- {s:.4}");
    Ok(())
}
