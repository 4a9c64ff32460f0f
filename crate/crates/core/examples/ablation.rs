//! Cross-validated comparison of the full model against its three ablations.
//!
//!     cargo run --release --example ablation -- [noise] [epochs] [lmm-provider] [flip-rate]

use mgfuse::config::TrainConfig;
use mgfuse::data::{synth_dataset, SynthOptions};
use mgfuse::train::{ablation_csv, ablation_study, Corpus};

fn main() -> mgfuse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let noise = args.first().map_or(0.0, |s| s.parse().expect("noise"));
    let epochs = args.get(1).map_or(30, |s| s.parse().expect("epochs"));
    let ds = synth_dataset(SynthOptions { classes: 10, per_class: 20, noise, ..Default::default() })?;
    let mut cfg = TrainConfig { folds: 2, epochs, ..TrainConfig::default() };
    if let Some(p) = args.get(2) {
        cfg.lmm.provider = p.clone();
    }
    cfg.lmm.flip_rate = args.get(3).map_or(0.0, |s| s.parse().expect("flip rate"));
    let corpus = Corpus::from_dataset(&ds, &cfg)?;
    let rows = ablation_study(&cfg, &corpus, 2, &|m: &str| {
        if !m.starts_with("epoch") {
            eprintln!("{m}")
        }
    })?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
