//! Scores a handful of predictions and renders the three report tables.
//!
//!     cargo run --example metrics_report

use mgfuse::kernels::ProbVector;
use mgfuse::metrics::{fold_metrics, MetricsReport};

fn main() -> mgfuse::Result<()> {
    let cats: Vec<String> = ["films", "particles", "tips"].iter().map(|s| s.to_string()).collect();
    let probs = [
        [0.7, 0.2, 0.1],
        [0.3, 0.6, 0.1],
        [0.5, 0.4, 0.1],
        [0.1, 0.1, 0.8],
        [0.2, 0.3, 0.5],
        [0.4, 0.1, 0.5],
    ]
    .iter()
    .map(|p| ProbVector::new(p.to_vec()))
    .collect::<mgfuse::Result<Vec<_>>>()?;
    let labels = [0, 1, 1, 2, 2, 0];
    let mut report = MetricsReport::new(cats);
    for (fold, range) in [(0, 0..3), (1, 3..6)] {
        let (m, cm) = fold_metrics(fold, &probs[range.clone()], &labels[range])?;
        report.push(m, &cm)?;
    }
    print!("{}\n{}\n{}", report.metrics_csv()?, report.confusion_csv(), report.perclass_csv());
    Ok(())
}
