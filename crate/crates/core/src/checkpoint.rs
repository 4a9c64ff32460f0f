//! Binary checkpoints: a JSON header followed by raw little-endian blocks.
//!
//! Layout: magic `MGFCKPT\0`, `u32` version, `u64` header length, header JSON,
//! `u32` block count, then per block `u32` name length, name, `u64` rows,
//! `u64` cols and `rows * cols` `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::kernels::{Matrix, Parameters};
use crate::model::ModelParams;
use crate::text::{Embedder, HashEmbedder, TokenTable, Transcript};

const MAGIC: &[u8; 8] = b"MGFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub categories: Vec<String>,
    pub transcripts: Vec<Transcript>,
    pub hash_embedder: HashEmbedder,
    /// Token vocabulary of a table embedder.
    pub vocab: Option<BTreeMap<String, usize>>,
    pub null_row: bool,
    /// Ids the model was trained on; the demonstration pool at evaluation.
    pub train_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, categories: &[String], transcripts: &[Transcript], train_ids: Vec<String>, params: ModelParams) -> Self {
        let (hash_embedder, vocab) = match &params.text.embedder {
            Embedder::Hash(h) => (*h, None),
            Embedder::Table(t) => (t.fallback, Some(t.vocab.clone())),
        };
        Self {
            meta: CheckpointMeta {
                config: config.clone(),
                categories: categories.to_vec(),
                transcripts: transcripts.to_vec(),
                hash_embedder,
                vocab,
                null_row: params.lift.null_row,
                train_ids,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.meta)?;
        let blocks = self.params.blocks();
        let mut out = Vec::with_capacity(header.len() + 8 * self.params.num_params() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, m) in blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::invalid("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(hlen)?)?;
        meta.config.validate()?;
        let dim = meta.config.dim;
        let embedder = match &meta.vocab {
            None => Embedder::Hash(meta.hash_embedder),
            Some(v) => Embedder::Table(TokenTable {
                vocab: v.clone(),
                weights: Matrix::zeros(v.len(), dim),
                fallback: meta.hash_embedder,
            }),
        };
        let mut params = ModelParams::init(&meta.config, meta.categories.len(), embedder, meta.null_row)?;
        let names: Vec<String> = params.blocks().into_iter().map(|(n, _)| n).collect();
        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(Error::invalid(format!("checkpoint has {count} blocks, model expects {}", names.len())));
        }
        for (expected, slot) in names.iter().zip(params.blocks_mut()) {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|e| Error::invalid(e.to_string()))?;
            if name != expected {
                return Err(Error::invalid(format!("checkpoint block '{name}', expected '{expected}'")));
            }
            let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
            if (rows, cols) != slot.shape() {
                return Err(Error::shape("checkpoint block", format!("{:?}", slot.shape()), format!("({rows}, {cols})")));
            }
            for v in slot.data_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::invalid("trailing bytes after checkpoint blocks"));
        }
        Ok(Self { meta, params })
    }

    /// Writes via a temporary sibling so a failed save leaves no partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::invalid("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EmbedderKind, IclScope};
    use crate::data::{synth_dataset, SynthOptions};
    use crate::kernels::flatten;
    use crate::train::{init_model, Corpus};

    fn round_trip(cfg: TrainConfig) {
        let ds = synth_dataset(SynthOptions { classes: 3, per_class: 2, size: 8, ..Default::default() }).unwrap();
        let corpus = Corpus::from_dataset(&ds, &cfg).unwrap();
        let mut params = init_model(&cfg, &corpus).unwrap();
        params.fusion.w_out.set(0, 0, std::f64::consts::PI * 1e-300);
        let ck = Checkpoint::new(&cfg, corpus.categories(), &corpus.transcripts, vec!["s00-0000".into()], params);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let (a, b) = (flatten(&ck.params), flatten(&back.params));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let base = TrainConfig { image_size: 8, patch: 4, dim: 8, heads: 2, layers: 1, ..TrainConfig::default() };
        round_trip(base.clone());
        round_trip(TrainConfig { embedder: EmbedderKind::Hash, icl_scope: IclScope::Ambiguous, ..base });
    }
}
