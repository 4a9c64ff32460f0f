//! Multimodal-model clients and the one-hot prediction embedding.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::demos::IclBundle;
use crate::error::{Error, Result};
use crate::kernels::{Matrix, Parameters, ProbVector};
use crate::text::fnv1a64;

/// Answers an in-context bundle with a category name.
///
/// `truth` is the query's label where the caller has it; only simulation
/// clients look at it.
pub trait LmmClient {
    fn provider_id(&self) -> &str;

    fn predict(&self, bundle: &IclBundle, truth: Option<&str>) -> Result<String>;
}

/// Returns the true label: an upper bound on prediction quality.
pub struct OracleMock;

impl LmmClient for OracleMock {
    fn provider_id(&self) -> &str {
        "oracle-mock"
    }

    fn predict(&self, _bundle: &IclBundle, truth: Option<&str>) -> Result<String> {
        truth
            .map(str::to_string)
            .ok_or_else(|| Error::invalid("oracle-mock needs the query label"))
    }
}

/// Returns the most frequent demonstration label (earliest first seen on ties).
pub struct MajorityMock;

impl LmmClient for MajorityMock {
    fn provider_id(&self) -> &str {
        "majority-mock"
    }

    fn predict(&self, bundle: &IclBundle, _truth: Option<&str>) -> Result<String> {
        let mut counts: Vec<(&str, usize)> = Vec::new();
        for d in &bundle.demonstrations {
            match counts.iter_mut().find(|(l, _)| *l == d.label) {
                Some(e) => e.1 += 1,
                None => counts.push((&d.label, 1)),
            }
        }
        let mut best: Option<(&str, usize)> = None;
        for (l, c) in counts {
            if best.map_or(true, |(_, b)| c > b) {
                best = Some((l, c));
            }
        }
        best.map(|(l, _)| l.to_string())
            .ok_or_else(|| Error::invalid("majority-mock needs at least one demonstration"))
    }
}

/// True label, replaced with probability `flip_rate` by a uniformly chosen
/// other category. The draw is seeded by `(seed, bundle hash)`.
pub struct NoisyMock {
    pub flip_rate: f64,
    pub seed: u64,
    pub categories: Vec<String>,
}

impl LmmClient for NoisyMock {
    fn provider_id(&self) -> &str {
        "noisy-mock"
    }

    fn predict(&self, bundle: &IclBundle, truth: Option<&str>) -> Result<String> {
        let truth = truth.ok_or_else(|| Error::invalid("noisy-mock needs the query label"))?;
        let h = fnv1a64(&[&self.seed.to_le_bytes(), bundle.hash().as_bytes()]);
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        if rng.gen::<f64>() >= self.flip_rate {
            return Ok(truth.to_string());
        }
        let others: Vec<&String> = self.categories.iter().filter(|c| *c != truth).collect();
        if others.is_empty() {
            return Ok(truth.to_string());
        }
        Ok(others[rng.gen_range(0..others.len())].clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub bundle_hash: String,
    pub label: String,
}

/// Answers from a JSON-lines file of `{bundle_hash, label}` records.
pub struct FileReplay {
    records: BTreeMap<String, String>,
}

impl FileReplay {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut records = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ReplayRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.insert(r.bundle_hash, r.label);
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends one record; the file is the single writer's log.
    pub fn append(path: &Path, record: &ReplayRecord) -> Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }
}

impl LmmClient for FileReplay {
    fn provider_id(&self) -> &str {
        "file-replay"
    }

    fn predict(&self, bundle: &IclBundle, _truth: Option<&str>) -> Result<String> {
        let key = bundle.hash();
        self.records
            .get(&key)
            .cloned()
            .ok_or(Error::OfflineMiss { key })
    }
}

/// Asks `client` and returns the answer as a one-hot vector over `categories`.
pub fn query_lmm(
    client: &dyn LmmClient,
    bundle: &IclBundle,
    categories: &[String],
    truth: Option<&str>,
) -> Result<ProbVector> {
    let label = client.predict(bundle, truth)?;
    let idx = categories
        .iter()
        .position(|c| c.eq_ignore_ascii_case(label.trim()))
        .ok_or_else(|| {
            Error::invalid(format!(
                "{} answered '{label}', which is not a category",
                client.provider_id()
            ))
        })?;
    ProbVector::one_hot(categories.len(), idx)
}

/// Names accepted by [`lmm_client`].
pub const LMM_PROVIDERS: &[&str] = &["oracle-mock", "majority-mock", "noisy-mock", "file-replay"];

/// Settings for [`lmm_client`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmmSpec {
    pub provider: String,
    pub flip_rate: f64,
    pub seed: u64,
    pub replay: Option<PathBuf>,
}

impl Default for LmmSpec {
    fn default() -> Self {
        Self {
            provider: "majority-mock".into(),
            flip_rate: 0.0,
            seed: 0,
            replay: None,
        }
    }
}

pub fn lmm_client(spec: &LmmSpec, categories: &[String]) -> Result<Box<dyn LmmClient>> {
    Ok(match spec.provider.as_str() {
        "oracle-mock" => Box::new(OracleMock),
        "majority-mock" => Box::new(MajorityMock),
        "noisy-mock" => Box::new(NoisyMock {
            flip_rate: spec.flip_rate,
            seed: spec.seed,
            categories: categories.to_vec(),
        }),
        "file-replay" => {
            let path = spec
                .replay
                .as_ref()
                .ok_or_else(|| Error::Config("file-replay needs a replay path".into()))?;
            Box::new(FileReplay::load(path)?)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown LMM provider '{other}' (expected one of {})",
                LMM_PROVIDERS.join(", ")
            )))
        }
    })
}

/// Learned lift from a one-hot prediction to a `d`-dimensional embedding.
///
/// With `null_row`, an extra last row stands in for samples that were never
/// sent to the multimodal model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLift {
    pub w_p: Matrix,
    pub null_row: bool,
}

impl PredictionLift {
    pub fn init<R: Rng + ?Sized>(classes: usize, dim: usize, null_row: bool, rng: &mut R) -> Self {
        let rows = classes + usize::from(null_row);
        Self {
            w_p: Matrix::uniform(rows, dim, 1.0 / (dim as f64).sqrt(), rng),
            null_row,
        }
    }

    pub fn classes(&self) -> usize {
        self.w_p.rows() - usize::from(self.null_row)
    }

    pub fn null_index(&self) -> Option<usize> {
        self.null_row.then(|| self.classes())
    }
}

impl Parameters for PredictionLift {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        vec![("w_p".to_string(), &self.w_p)]
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_p]
    }
}

/// Index of the single 1 in an exactly one-hot vector.
pub fn one_hot_index(v: &[f64]) -> Result<usize> {
    let mut idx = None;
    for (i, &x) in v.iter().enumerate() {
        if x == 1.0 && idx.is_none() {
            idx = Some(i);
        } else if x != 0.0 {
            return Err(Error::invalid(format!("not one-hot: entry {i} is {x}")));
        }
    }
    idx.ok_or_else(|| Error::invalid("not one-hot: no entry equals 1"))
}

/// `h_ICL = h_pred^T W_p`, i.e. the selected row of `W_p`.
pub fn project_prediction(h_pred: &[f64], lift: &PredictionLift) -> Result<Vec<f64>> {
    if h_pred.len() != lift.w_p.rows() {
        return Err(Error::shape("project_prediction", lift.w_p.rows(), h_pred.len()));
    }
    let i = one_hot_index(h_pred)?;
    Ok(lift.w_p.row(i).to_vec())
}
