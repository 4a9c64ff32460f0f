//! Top-N accuracy, confusion matrices, precision/recall/F1 and CSV reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::ProbVector;

/// Indices of the `n` largest entries, ties broken toward the lower index.
pub fn top_n(p: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

pub fn topn_accuracy(probs: &[ProbVector], labels: &[usize], n: usize) -> Result<f64> {
    check_pairs(probs, labels)?;
    let c = probs[0].len();
    if n == 0 || n > c {
        return Err(Error::invalid(format!("top-{n} undefined for {c} classes")));
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &l)| top_n(p.as_slice(), n).contains(&l))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn check_pairs(probs: &[ProbVector], labels: &[usize]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::invalid("no predictions"));
    }
    if probs.len() != labels.len() {
        return Err(Error::shape("metrics labels", probs.len(), labels.len()));
    }
    let c = probs[0].len();
    if let Some(p) = probs.iter().find(|p| p.len() != c) {
        return Err(Error::shape("metrics class count", c, p.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {l} out of range for {c} classes")));
    }
    Ok(())
}

/// `counts[truth][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::shape("confusion merge", self.classes(), other.classes()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion(probs: &[ProbVector], labels: &[usize]) -> Result<ConfusionMatrix> {
    check_pairs(probs, labels)?;
    let mut m = ConfusionMatrix::new(probs[0].len());
    for (p, &l) in probs.iter().zip(labels) {
        m.add(l, p.argmax());
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// A zero denominator forced one of the scores to 0.
    pub undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub per_class: Vec<ClassScores>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    /// Pooled recall; equals top-1 accuracy.
    pub micro_recall: f64,
}

pub fn prf(m: &ConfusionMatrix) -> Prf {
    let c = m.classes();
    let ratio = |a: u64, b: u64| if b == 0 { (0.0, true) } else { (a as f64 / b as f64, false) };
    let per_class: Vec<ClassScores> = (0..c)
        .map(|k| {
            let tp = m.counts[k][k];
            let predicted: u64 = (0..c).map(|t| m.counts[t][k]).sum();
            let support: u64 = m.counts[k].iter().sum();
            let (precision, up) = ratio(tp, predicted);
            let (recall, ur) = ratio(tp, support);
            let (f1, uf) = if precision + recall == 0.0 {
                (0.0, true)
            } else {
                (2.0 * precision * recall / (precision + recall), false)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support,
                undefined: up || ur || uf,
            }
        })
        .collect();
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / c.max(1) as f64;
    let total = m.total();
    let weighted_f1 = if total == 0 {
        0.0
    } else {
        per_class.iter().map(|s| s.f1 * s.support as f64).sum::<f64>() / total as f64
    };
    Prf {
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        macro_f1: mean(|s| s.f1),
        weighted_f1,
        micro_recall: ratio(m.correct(), total).0,
        per_class,
    }
}

/// Cut-offs reported for top-N accuracy; each is clamped to the class count.
pub const TOP_N: [usize; 4] = [1, 2, 3, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub samples: usize,
    /// Accuracy at each `TOP_N` cut-off.
    pub top: [f64; 4],
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl FoldMetrics {
    pub fn top1(&self) -> f64 {
        self.top[0]
    }
}

pub fn fold_metrics(fold: usize, probs: &[ProbVector], labels: &[usize]) -> Result<(FoldMetrics, ConfusionMatrix)> {
    check_pairs(probs, labels)?;
    let c = probs[0].len();
    let mut top = [0.0; 4];
    for (t, &n) in top.iter_mut().zip(&TOP_N) {
        *t = topn_accuracy(probs, labels, n.min(c))?;
    }
    let cm = confusion(probs, labels)?;
    let s = prf(&cm);
    Ok((
        FoldMetrics {
            fold,
            samples: labels.len(),
            top,
            precision: s.macro_precision,
            recall: s.macro_recall,
            f1: s.macro_f1,
        },
        cm,
    ))
}

/// Per-fold scores plus the pooled confusion matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub categories: Vec<String>,
    pub folds: Vec<FoldMetrics>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn new(categories: Vec<String>) -> Self {
        let c = categories.len();
        Self {
            categories,
            folds: Vec::new(),
            confusion: ConfusionMatrix::new(c),
        }
    }

    pub fn push(&mut self, fold: FoldMetrics, cm: &ConfusionMatrix) -> Result<()> {
        self.confusion.merge(cm)?;
        self.folds.push(fold);
        Ok(())
    }

    fn column(&self, f: impl Fn(&FoldMetrics) -> f64) -> (f64, f64) {
        mean_std(&self.folds.iter().map(f).collect::<Vec<_>>())
    }

    /// Mean and sample standard deviation of top-1 accuracy across folds.
    pub fn top1(&self) -> (f64, f64) {
        self.column(FoldMetrics::top1)
    }

    pub fn macro_f1(&self) -> (f64, f64) {
        self.column(|m| m.f1)
    }

    pub fn metrics_csv(&self) -> Result<String> {
        if self.folds.is_empty() {
            return Err(Error::invalid("empty metrics report"));
        }
        if let Some(m) = self.folds.iter().find(|m| m.top.iter().chain([&m.precision, &m.recall, &m.f1]).any(|v| v.is_nan())) {
            return Err(Error::Numerical(format!("NaN metric in fold {}", m.fold)));
        }
        let mut out = String::from("fold,samples,top1,top2,top3,top5,precision,recall,f1\n");
        let line = |out: &mut String, name: &str, n: String, v: [f64; 7]| {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
            let _ = writeln!(out, "{name},{n},{}", vals.join(","));
        };
        let cols = |m: &FoldMetrics| [m.top[0], m.top[1], m.top[2], m.top[3], m.precision, m.recall, m.f1];
        for m in &self.folds {
            line(&mut out, &m.fold.to_string(), m.samples.to_string(), cols(m));
        }
        let stats: Vec<(f64, f64)> = (0..7).map(|j| self.column(|m| cols(m)[j])).collect();
        let total: usize = self.folds.iter().map(|m| m.samples).sum();
        line(&mut out, "mean", total.to_string(), std::array::from_fn(|j| stats[j].0));
        line(&mut out, "std", total.to_string(), std::array::from_fn(|j| stats[j].1));
        Ok(out)
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = format!("truth\\predicted,{}\n", self.categories.join(","));
        for (name, row) in self.categories.iter().zip(&self.confusion.counts) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "{name},{}", cells.join(","));
        }
        out
    }

    pub fn perclass_csv(&self) -> String {
        let s = prf(&self.confusion);
        let mut out = String::from("category,precision,recall,f1,support,undefined\n");
        for (name, c) in self.categories.iter().zip(&s.per_class) {
            let _ = writeln!(
                out,
                "{name},{:.6},{:.6},{:.6},{},{}",
                c.precision, c.recall, c.f1, c.support, c.undefined
            );
        }
        let _ = writeln!(out, "macro,{:.6},{:.6},{:.6},{},false", s.macro_precision, s.macro_recall, s.macro_f1, self.confusion.total());
        let _ = writeln!(out, "weighted,,,{:.6},{},false", s.weighted_f1, self.confusion.total());
        out
    }

    /// Writes `metrics.csv`, `confusion.csv` and `perclass.csv` into `dir`.
    /// Everything is rendered before the first file is created.
    pub fn emit(&self, dir: &Path) -> Result<()> {
        let files = [
            ("metrics.csv", self.metrics_csv()?),
            ("confusion.csv", self.confusion_csv()),
            ("perclass.csv", self.perclass_csv()),
        ];
        fs::create_dir_all(dir)?;
        for (name, body) in files {
            fs::write(dir.join(name), body)?;
        }
        Ok(())
    }
}

/// Rebuilds a report from `fold,id,label,predicted,<probabilities...>` CSV,
/// one fold row per distinct fold value in order of first appearance.
pub fn report_from_predictions(text: &str) -> Result<MetricsReport> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if header.len() < 6 || header.iter().take(4).collect::<Vec<_>>() != ["fold", "id", "label", "predicted"] {
        return Err(Error::Parse {
            line: 1,
            msg: "expected header fold,id,label,predicted,<category...> with at least two categories".into(),
        });
    }
    let categories: Vec<String> = header.iter().skip(4).map(str::to_string).collect();
    let mut folds: Vec<(usize, Vec<ProbVector>, Vec<usize>)> = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let bad = |msg: String| Error::Parse { line, msg };
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.len() != header.len() {
            return Err(bad(format!("expected {} fields, got {}", header.len(), row.len())));
        }
        let fold: usize = row[0].parse().map_err(|_| bad(format!("bad fold '{}'", &row[0])))?;
        let label = categories
            .iter()
            .position(|c| c == &row[2])
            .ok_or_else(|| bad(format!("unknown label '{}'", &row[2])))?;
        let probs = row
            .iter()
            .skip(4)
            .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad probability '{v}'"))))
            .collect::<Result<Vec<_>>>()?;
        let p = ProbVector::new(probs).map_err(|e| bad(e.to_string()))?;
        match folds.iter_mut().find(|f| f.0 == fold) {
            Some(f) => {
                f.1.push(p);
                f.2.push(label);
            }
            None => folds.push((fold, vec![p], vec![label])),
        }
    }
    let mut report = MetricsReport::new(categories);
    for (fold, probs, labels) in folds {
        let (m, cm) = fold_metrics(fold, &probs, &labels)?;
        report.push(m, &cm)?;
    }
    if report.folds.is_empty() {
        return Err(Error::invalid("empty metrics report"));
    }
    Ok(report)
}

/// Mean and sample (n - 1) standard deviation; the deviation of one value is 0.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
