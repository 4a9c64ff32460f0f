//! Run configuration, loadable from TOML with command-line overrides on top.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::align::AlignMode;
use crate::encoder::EncoderShape;
use crate::error::{Error, Result};
use crate::fewshot::{DemoStrategy, LmmSpec};
use crate::fusion::FusionMode;

/// Which pathways a model uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// No category text: stage 1 and the alignment loss are skipped.
    NoLlm,
    /// No prediction embedding: stage 2 is skipped.
    NoLmm,
    /// Concatenation head instead of the attention stages.
    NoMha,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoLlm, Ablation::NoLmm, Ablation::NoMha];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoLlm => "no-llm",
            Ablation::NoLmm => "no-lmm",
            Ablation::NoMha => "no-mha",
        }
    }

    /// Row label used in ablation tables.
    pub fn table_label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoLlm => "w/o LLMs",
            Ablation::NoLmm => "w/o LMMs",
            Ablation::NoMha => "w/o MHA",
        }
    }

    pub fn uses_text(self) -> bool {
        self != Ablation::NoLlm
    }

    pub fn uses_prediction(self) -> bool {
        self != Ablation::NoLmm
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode '{s}'")))
    }
}

/// Features used to rank demonstrations by similarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilaritySource {
    /// `h_cls` of the freshly initialized encoder.
    #[default]
    HCls,
    /// PCA scores of the z-scored pixels.
    Pca,
    Pixels,
}

impl FromStr for SimilaritySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h-cls" => Ok(Self::HCls),
            "pca" => Ok(Self::Pca),
            "pixels" => Ok(Self::Pixels),
            other => Err(Error::Config(format!("unknown similarity source '{other}'"))),
        }
    }
}

/// Which samples receive a multimodal-model prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IclScope {
    #[default]
    All,
    /// Only mined ambiguous samples; the rest use a learned null embedding.
    Ambiguous,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    #[default]
    Table,
    Hash,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward width; 0 means `2 * dim`.
    pub ff_dim: usize,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub scheduler_patience: usize,
    pub lr_factor: f64,
    pub early_stop_patience: usize,
    /// Share of each training split held out for scheduling and early stopping.
    pub val_fraction: f64,
    pub folds: usize,
    pub ablation: Ablation,
    pub align_loss: bool,
    pub align_weight: f64,
    pub tau: f64,
    pub align_mode: AlignMode,
    pub fusion_mode: FusionMode,
    pub embedder: EmbedderKind,
    pub family: String,
    pub k_demos: usize,
    pub strategy: DemoStrategy,
    pub similarity: SimilaritySource,
    pub icl_scope: IclScope,
    pub ambiguous_fraction: f64,
    pub pca_k: usize,
    pub kmeans_k: usize,
    pub lmm: LmmSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 32,
            channels: 3,
            patch: 8,
            dim: 64,
            heads: 4,
            layers: 2,
            ff_dim: 0,
            batch: 48,
            lr: 1e-3,
            epochs: 50,
            scheduler_patience: 5,
            lr_factor: 0.5,
            early_stop_patience: 10,
            val_fraction: 0.1,
            folds: 10,
            ablation: Ablation::Full,
            align_loss: true,
            align_weight: 0.5,
            tau: 1.0,
            align_mode: AlignMode::Diagonal,
            fusion_mode: FusionMode::Faithful,
            embedder: EmbedderKind::Table,
            family: "nanomaterial".into(),
            k_demos: 5,
            strategy: DemoStrategy::Similarity,
            similarity: SimilaritySource::HCls,
            icl_scope: IclScope::All,
            ambiguous_fraction: 0.1,
            pca_k: 50,
            kmeans_k: 10,
            lmm: LmmSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            image_size: self.image_size,
            channels: self.channels,
            patch: self.patch,
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            ff_dim: if self.ff_dim == 0 { 2 * self.dim } else { self.ff_dim },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_shape().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("lr_factor {} outside (0, 1)", self.lr_factor));
        }
        if self.scheduler_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if self.folds < 2 {
            return bad(format!("folds {} must be at least 2", self.folds));
        }
        if !(self.tau > 0.0) || self.align_weight < 0.0 {
            return bad("tau must be positive and align_weight non-negative".into());
        }
        if !(self.ambiguous_fraction > 0.0 && self.ambiguous_fraction <= 1.0) {
            return bad(format!(
                "ambiguous_fraction {} outside (0, 1]",
                self.ambiguous_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.lmm.flip_rate) {
            return bad(format!("flip_rate {} outside [0, 1]", self.lmm.flip_rate));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 16);
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let c = TrainConfig::from_toml_str("seed = 7\nablation = \"no-mha\"\n[lmm]\nprovider = \"oracle-mock\"\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.ablation, Ablation::NoMha);
        assert_eq!(c.lmm.provider, "oracle-mock");
        assert_eq!(c.batch, 48);
        assert!(matches!(TrainConfig::from_toml_str("sed = 1"), Err(Error::Config(_))));
        assert!(TrainConfig::from_toml_str("dim = 30\nheads = 4").is_err());
    }
}
