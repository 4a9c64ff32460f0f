//! Picks similarity-ranked demonstrations for a query, writes the in-context
//! bundle as JSON and asks a simulated multimodal model for a label.
//!
//!     cargo run --example fewshot_prompting

use mgfuse::data::{synth_dataset, SynthOptions};
use mgfuse::fewshot::{build_icl_prompt, query_lmm, sample_demonstrations, zscore_flatten, DemoStrategy, MajorityMock};

fn main() -> mgfuse::Result<()> {
    let ds = synth_dataset(SynthOptions { classes: 4, per_class: 6, noise: 0.2, size: 16, ..Default::default() })?;
    let m = &ds.manifest;
    let feats = zscore_flatten(&m.ids(), &ds.images)?;
    let labels = m.labels();
    let pool: Vec<usize> = (0..m.len()).filter(|i| i % 6 != 0).collect();
    let query = 6;
    let demos = sample_demonstrations(query, &feats.data, &pool, &labels, 5, DemoStrategy::Similarity, 0)?;
    let bundle = build_icl_prompt(&demos, &m.paths(), &m.categories)?;
    println!("{}", bundle.to_json()?);
    let p = query_lmm(&MajorityMock, &bundle, &m.categories, None)?;
    println!("predicted '{}', truth '{}'", m.categories[p.argmax()], m.categories[labels[query]]);
    Ok(())
}
