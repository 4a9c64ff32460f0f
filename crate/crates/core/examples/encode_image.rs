//! Encodes one synthetic micrograph at the reference resolution and prints
//! the shapes flowing through the full model.
//!
//!     cargo run --release --example encode_image

use mgfuse::config::TrainConfig;
use mgfuse::data::{synth_dataset, SynthOptions};
use mgfuse::encoder::{patchify, preprocess};
use mgfuse::model::{forward_sample, text_matrix, Routing};
use mgfuse::train::{init_model, Corpus};

fn main() -> mgfuse::Result<()> {
    let cfg = TrainConfig { image_size: 224, patch: 32, ..TrainConfig::default() };
    let ds = synth_dataset(SynthOptions { classes: 10, per_class: 1, size: 64, ..Default::default() })?;
    let img = preprocess(&ds.images[3], cfg.image_size)?;
    println!("input {}x{}x{}, {} patches of {} values", img.height, img.width, img.channels,
        patchify(&img, cfg.patch)?.len(), cfg.patch * cfg.patch * cfg.channels);

    let corpus = Corpus::from_dataset(&ds, &cfg)?;
    let params = init_model(&cfg, &corpus)?;
    let routing = Routing::from_config(&cfg);
    let text = text_matrix(&params, &routing, &corpus.transcripts, corpus.categories())?;
    let out = forward_sample(&params, &routing, text.as_ref(), &corpus.images[3], 3)?;
    let a = out.alignment.as_ref().expect("full model aligns");
    println!("h_cls {}, h*_text {} (category '{}'), h_ICL {}, p {}",
        out.h_cls.len(), a.h_star_text.len(), corpus.categories()[a.i_star],
        out.h_icl.as_ref().map_or(0, Vec::len), out.probs.len());
    println!("untrained p = {:?}", out.probs.as_slice().iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>());
    Ok(())
}
