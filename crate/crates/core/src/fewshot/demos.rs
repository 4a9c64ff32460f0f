use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::{dot, norm, Matrix};
use crate::text::hex_string;

/// Instruction that opens every in-context prompt bundle.
pub const ICL_INSTRUCTION: &str = "Below are the input-output pairs (image-label pairs) for the nanomaterial identification task. Predict the nanomaterial category for the query image.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemoStrategy {
    Random,
    #[default]
    Similarity,
}

impl std::str::FromStr for DemoStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "similarity" => Ok(Self::Similarity),
            other => Err(Error::Config(format!("unknown demonstration strategy '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    pub query: usize,
    /// `(sample index, label index)` in presentation order.
    pub pairs: Vec<(usize, usize)>,
    pub strategy: DemoStrategy,
}

impl DemonstrationSet {
    pub fn k(&self) -> usize {
        self.pairs.len()
    }
}

fn cos_or_zero(a: &[f64], b: &[f64]) -> f64 {
    let n = norm(a) * norm(b);
    if n < 1e-24 {
        0.0
    } else {
        dot(a, b) / n
    }
}

/// Draws `k` demonstrations for `query` from `train`, never the query itself.
///
/// `features` holds one row per sample index and is only read by the
/// similarity strategy. The random strategy mixes the query index into the
/// seed so different queries get different draws.
pub fn sample_demonstrations(
    query: usize,
    features: &Matrix,
    train: &[usize],
    labels: &[usize],
    k: usize,
    strategy: DemoStrategy,
    seed: u64,
) -> Result<DemonstrationSet> {
    let candidates: Vec<usize> = train.iter().copied().filter(|&i| i != query).collect();
    if k > candidates.len() {
        return Err(Error::invalid(format!(
            "asked for {k} demonstrations but only {} training candidates",
            candidates.len()
        )));
    }
    let picked: Vec<usize> = match strategy {
        DemoStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (query as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            sample(&mut rng, candidates.len(), k)
                .into_iter()
                .map(|i| candidates[i])
                .collect()
        }
        DemoStrategy::Similarity => {
            if query >= features.rows() {
                return Err(Error::invalid(format!("query {query} has no feature row")));
            }
            let q = features.row(query);
            let mut scored: Vec<(usize, f64)> = candidates
                .iter()
                .map(|&i| (i, cos_or_zero(q, features.row(i))))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.into_iter().take(k).map(|(i, _)| i).collect()
        }
    };
    Ok(DemonstrationSet {
        query,
        pairs: picked.into_iter().map(|i| (i, labels[i])).collect(),
        strategy,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub image_path: String,
    pub label: String,
}

/// Prompt bundle for a multimodal model; images are referenced by path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclBundle {
    pub instruction: String,
    pub demonstrations: Vec<Demonstration>,
    pub query_image_path: String,
}

impl IclBundle {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Hex SHA-256 of the compact JSON form; the replay-cache key.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_vec(self).expect("bundle serializes");
        hex_string(&Sha256::digest(compact))
    }
}

pub fn build_icl_prompt(
    demos: &DemonstrationSet,
    paths: &[String],
    categories: &[String],
) -> Result<IclBundle> {
    let path = |i: usize| {
        paths
            .get(i)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no image path for sample {i}")))
    };
    let mut demonstrations = Vec::with_capacity(demos.k());
    for &(i, l) in &demos.pairs {
        let label = categories
            .get(l)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("label {l} out of range")))?;
        demonstrations.push(Demonstration {
            image_path: path(i)?,
            label,
        });
    }
    Ok(IclBundle {
        instruction: ICL_INSTRUCTION.to_string(),
        demonstrations,
        query_image_path: path(demos.query)?,
    })
}
