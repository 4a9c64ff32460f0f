//! Clusters PCA scores of noisy synthetic micrographs and lists the 10% of
//! samples with the weakest cluster membership.
//!
//!     cargo run --release --example ambiguous_mining

use mgfuse::data::{synth_dataset, SynthOptions};
use mgfuse::fewshot::{cluster_purity, kmeans, pca, select_ambiguous, zscore_flatten};

fn main() -> mgfuse::Result<()> {
    let ds = synth_dataset(SynthOptions { classes: 5, per_class: 20, noise: 0.35, size: 16, ..Default::default() })?;
    let m = &ds.manifest;
    let feats = zscore_flatten(&m.ids(), &ds.images)?;
    let p = pca(&feats.data, 20)?;
    println!("first components explain {:.3?}", &p.explained[..5]);
    let model = kmeans(&p.projected, 5, 0, 100)?;
    println!("k-means: {} iterations, inertia {:.2}, purity {:.3}", model.iterations, model.inertia,
        cluster_purity(&model, &m.labels()));
    let picked = select_ambiguous(&model, &p.projected, 0.10)?;
    let mean_all = model.silhouette.iter().sum::<f64>() / model.silhouette.len() as f64;
    let mean_sel = picked.iter().map(|&i| model.silhouette[i]).sum::<f64>() / picked.len() as f64;
    println!("{} ambiguous samples, mean silhouette {mean_sel:.3} vs {mean_all:.3} overall", picked.len());
    for &i in &picked {
        println!("  {} (cluster {}, s = {:+.3})", m.records[i].id, model.assignments[i], model.silhouette[i]);
    }
    Ok(())
}
