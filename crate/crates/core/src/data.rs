//! Datasets: CSV manifests, image loading, a synthetic generator and
//! stratified splits.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::text::{build_cot_prompts, fnv1a64, Transcript};

pub const SYNTHETIC_SCHEME: &str = "synthetic:";

/// Category names used by the synthetic generator for `c <= 10`.
pub const DEFAULT_CATEGORIES: [&str; 10] = [
    "biological",
    "fibres",
    "films",
    "MEMS",
    "nanowires",
    "particles",
    "patterned-surfaces",
    "porous-sponge",
    "powder",
    "tips",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub path: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub categories: Vec<String>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn paths(&self) -> Vec<String> {
        self.records.iter().map(|r| r.path.clone()).collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "path", "label"]).map_err(csv_err)?;
        for r in &self.records {
            w.write_record([&r.id, &r.path, &self.categories[r.label]])
                .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::invalid(e.to_string()))
    }

    /// Parses manifest CSV text; categories are numbered by first appearance.
    pub fn from_csv(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::Parse {
                line: 1,
                msg: "empty manifest".into(),
            });
        }
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        if header.iter().map(str::trim).collect::<Vec<_>>() != ["id", "path", "label"] {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header id,path,label, got {}", header.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut categories: Vec<String> = Vec::new();
        let mut records = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, row) in rdr.records().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
            if row.len() != 3 || row.iter().any(|f| f.trim().is_empty()) {
                return Err(Error::Parse {
                    line,
                    msg: "expected three non-empty fields".into(),
                });
            }
            let (id, path, label) = (row[0].trim(), row[1].trim(), row[2].trim());
            if !seen.insert(id.to_string()) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate id '{id}'"),
                });
            }
            let idx = match categories.iter().position(|c| c == label) {
                Some(i) => i,
                None => {
                    categories.push(label.to_string());
                    categories.len() - 1
                }
            };
            records.push(Record {
                id: id.to_string(),
                path: path.to_string(),
                label: idx,
            });
        }
        if records.is_empty() {
            return Err(Error::Parse {
                line: 2,
                msg: "manifest has no records".into(),
            });
        }
        Ok(Self {
            records,
            categories,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(e.to_string())
}

fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads and validates a manifest; every missing image file is reported at once.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read manifest {}: {e}", path.display())))?;
    let m = DatasetManifest::from_csv(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let missing: Vec<PathBuf> = m
        .records
        .iter()
        .filter(|r| !r.path.starts_with(SYNTHETIC_SCHEME))
        .map(|r| resolve(base, &r.path))
        .filter(|p| !p.exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok(m)
}

/// Parameters of one generated image, round-tripped through its URI.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub class: usize,
    pub classes: usize,
    pub index: usize,
    pub noise: f64,
    pub size: usize,
}

impl SyntheticSpec {
    pub fn uri(&self) -> String {
        format!(
            "{SYNTHETIC_SCHEME}seed={};class={};classes={};index={};noise={};size={}",
            self.seed, self.class, self.classes, self.index, self.noise, self.size
        )
    }

    pub fn parse(uri: &str) -> Result<Self> {
        let body = uri
            .strip_prefix(SYNTHETIC_SCHEME)
            .ok_or_else(|| Error::invalid(format!("not a synthetic uri: {uri}")))?;
        let mut spec = SyntheticSpec {
            seed: 0,
            class: 0,
            classes: 0,
            index: 0,
            noise: 0.0,
            size: 0,
        };
        let bad = || Error::invalid(format!("malformed synthetic uri: {uri}"));
        for kv in body.split(';') {
            let (k, v) = kv.split_once('=').ok_or_else(bad)?;
            match k {
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                "class" => spec.class = v.parse().map_err(|_| bad())?,
                "classes" => spec.classes = v.parse().map_err(|_| bad())?,
                "index" => spec.index = v.parse().map_err(|_| bad())?,
                "noise" => spec.noise = v.parse().map_err(|_| bad())?,
                "size" => spec.size = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        if spec.size == 0 || spec.classes == 0 || spec.class >= spec.classes || spec.noise < 0.0 {
            return Err(bad());
        }
        Ok(spec)
    }

    /// Per-class oriented grating with class-tinted channels plus Gaussian
    /// pixel noise; values clamped to `[0, 1]`.
    pub fn render(&self) -> ImageTensor {
        let s = self.size;
        let template = class_template(self.seed, self.class, self.classes, s);
        let mut data = template.data;
        if self.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&[
                &self.seed.to_le_bytes(),
                &(self.class as u64).to_le_bytes(),
                &(self.index as u64).to_le_bytes(),
            ]));
            let normal = Normal::new(0.0, self.noise).expect("noise is finite");
            for v in &mut data {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        ImageTensor {
            height: s,
            width: s,
            channels: 3,
            data,
        }
    }
}

/// Noise-free image of a class.
pub fn class_template(seed: u64, class: usize, classes: usize, size: usize) -> ImageTensor {
    use std::f64::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&[b"template", &seed.to_le_bytes()]));
    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let frac = class as f64 / classes as f64;
    let theta = PI * frac;
    let freq = 1.0 + (class % 3) as f64;
    let s = size as f64;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / s;
            let g = (2.0 * PI * freq * u + phase).sin();
            for ch in 0..3 {
                let tint = (2.0 * PI * (frac + ch as f64 / 3.0)).cos();
                data.push((0.5 + 0.3 * g + 0.15 * tint).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor {
        height: size,
        width: size,
        channels: 3,
        data,
    }
}

/// Decodes or generates every record's raw image.
pub fn load_images(manifest: &DatasetManifest, base: &Path, channels: usize) -> Result<Vec<ImageTensor>> {
    manifest
        .records
        .iter()
        .map(|r| load_image(&r.path, base, channels))
        .collect()
}

pub fn load_image(path: &str, base: &Path, channels: usize) -> Result<ImageTensor> {
    if path.starts_with(SYNTHETIC_SCHEME) {
        let img = SyntheticSpec::parse(path)?.render();
        return match channels {
            3 => Ok(img),
            1 => Ok(to_gray(&img)),
            c => Err(Error::Config(format!("unsupported channel count {c}"))),
        };
    }
    let full = resolve(base, path);
    let dynimg = image::open(&full)
        .map_err(|e| Error::invalid(format!("cannot decode {}: {e}", full.display())))?;
    let (w, h, data): (u32, u32, Vec<u8>) = match channels {
        3 => {
            let im = dynimg.to_rgb8();
            (im.width(), im.height(), im.into_raw())
        }
        1 => {
            let im = dynimg.to_luma8();
            (im.width(), im.height(), im.into_raw())
        }
        c => return Err(Error::Config(format!("unsupported channel count {c}"))),
    };
    ImageTensor::new(
        h as usize,
        w as usize,
        channels,
        data.into_iter().map(|b| f64::from(b) / 255.0).collect(),
    )
}

fn to_gray(img: &ImageTensor) -> ImageTensor {
    let data = img
        .data
        .chunks(img.channels)
        .map(|px| px.iter().sum::<f64>() / px.len() as f64)
        .collect();
    ImageTensor {
        height: img.height,
        width: img.width,
        channels: 1,
        data,
    }
}

/// A manifest with its raw images and per-category transcripts in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageTensor>,
    pub transcripts: Vec<Transcript>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub classes: usize,
    pub per_class: usize,
    pub noise: f64,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 20,
            noise: 0.0,
            size: 32,
            seed: 0,
        }
    }
}

pub fn category_names(classes: usize) -> Vec<String> {
    if classes <= DEFAULT_CATEGORIES.len() {
        DEFAULT_CATEGORIES[..classes].iter().map(|s| s.to_string()).collect()
    } else {
        (0..classes).map(|i| format!("class{i:02}")).collect()
    }
}

pub fn synth_dataset(opts: SynthOptions) -> Result<Dataset> {
    if opts.classes < 2 {
        return Err(Error::invalid("synthetic data needs at least two classes"));
    }
    if opts.per_class == 0 || opts.size == 0 || !(opts.noise >= 0.0 && opts.noise.is_finite()) {
        return Err(Error::invalid("per_class and size must be positive, noise non-negative"));
    }
    let categories = category_names(opts.classes);
    let mut records = Vec::with_capacity(opts.classes * opts.per_class);
    let mut images = Vec::with_capacity(records.capacity());
    for class in 0..opts.classes {
        for index in 0..opts.per_class {
            let spec = SyntheticSpec {
                seed: opts.seed,
                class,
                classes: opts.classes,
                index,
                noise: opts.noise,
                size: opts.size,
            };
            records.push(Record {
                id: format!("s{class:02}-{index:04}"),
                path: spec.uri(),
                label: class,
            });
            images.push(spec.render());
        }
    }
    let transcripts = synth_transcripts(&categories, "nanomaterial", opts.seed)?;
    Ok(Dataset {
        manifest: DatasetManifest {
            records,
            categories,
        },
        images,
        transcripts,
    })
}

const SHARED_WORDS: [&str; 24] = [
    "the", "structure", "surface", "sample", "imaging", "electron", "scale", "material", "shows",
    "with", "and", "typical", "morphology", "features", "observed", "under", "micrograph",
    "region", "contrast", "size", "of", "is", "a", "characteristic",
];

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ren", "sul", "tor", "vex", "qua", "zin", "pho", "dra", "nel", "gri", "bos",
    "ty", "um",
];

/// Stand-in transcripts: each category's text mixes shared filler with a
/// category-specific vocabulary, so categories separate under any token
/// embedder.
pub fn synth_transcripts(categories: &[String], family: &str, seed: u64) -> Result<Vec<Transcript>> {
    let mut out = Vec::with_capacity(categories.len());
    for (k, name) in categories.iter().enumerate() {
        let prompts = build_cot_prompts(family, name)?;
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&[
            b"transcript",
            &seed.to_le_bytes(),
            &(k as u64).to_le_bytes(),
        ]));
        let own: Vec<String> = (0..12)
            .map(|j| {
                let mut w: String = (0..3).map(|_| *SYLLABLES.choose(&mut rng).unwrap()).collect();
                w.push_str(&format!("{k}x{j}"));
                w
            })
            .collect();
        let responses = prompts
            .iter()
            .map(|p| {
                let mut words = vec![format!("{}:", p.title), name.to_lowercase()];
                for _ in 0..40 {
                    if rng.gen_bool(0.6) {
                        words.push(own.choose(&mut rng).unwrap().clone());
                    } else {
                        words.push(SHARED_WORDS.choose(&mut rng).unwrap().to_string());
                    }
                }
                words.join(" ")
            })
            .collect();
        out.push(Transcript {
            family: family.to_string(),
            subject: name.clone(),
            prompts: prompts.into_iter().map(|p| p.text).collect(),
            provider: "synthetic".into(),
            responses,
            retrieved_at: 0,
        });
    }
    Ok(out)
}

/// File name used for a category's transcript.
pub fn transcript_file_name(family: &str, subject: &str) -> String {
    let slug: String = subject
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect();
    format!("{family}__{slug}.json")
}

/// Loads every `*.json` transcript under `dir`, sorted by file name.
pub fn load_transcripts(dir: &Path) -> Result<Vec<Transcript>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::invalid(format!("cannot read transcript directory {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Transcript::load(p)).collect()
}

/// Validation folds of a stratified k-fold split; training ids are the rest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn validation(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    pub fn train(&self, fold: usize) -> Vec<usize> {
        let mut t: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        t.sort_unstable();
        t
    }
}

fn by_class(ids: &[usize], labels: &[usize]) -> Vec<Vec<usize>> {
    let c = ids.iter().map(|&i| labels[i] + 1).max().unwrap_or(0);
    let mut out = vec![Vec::new(); c];
    for &i in ids {
        out[labels[i]].push(i);
    }
    out
}

/// Each class is shuffled and dealt round-robin, continuing the dealing
/// position across classes so fold sizes also stay balanced.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid(format!("k-fold needs k >= 2, got {k}")));
    }
    let ids: Vec<usize> = (0..labels.len()).collect();
    let classes = by_class(&ids, labels);
    if let Some((c, members)) = classes
        .iter()
        .enumerate()
        .find(|(_, m)| !m.is_empty() && m.len() < k)
    {
        return Err(Error::invalid(format!(
            "class {c} has {} samples, fewer than k={k}",
            members.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut pos = 0;
    for mut members in classes {
        members.shuffle(&mut rng);
        for id in members {
            folds[pos % k].push(id);
            pos += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(FoldPlan { k, folds })
}

/// Stratified `(train, validation)` split of `ids`; each class with at least
/// two members gives `round(fraction * n)` of them, at most `n - 1`.
pub fn stratified_holdout(ids: &[usize], labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut members in by_class(ids, labels) {
        members.shuffle(&mut rng);
        let n = members.len();
        let take = if n >= 2 {
            ((fraction * n as f64).round() as usize).min(n - 1)
        } else {
            0
        };
        val.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        assert!(matches!(DatasetManifest::from_csv(""), Err(Error::Parse { line: 1, .. })));
        let m = DatasetManifest::from_csv("id,path,label\na,x.png,tips\nb,y.png,films\nc,z.png,tips\n").unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.categories, ["tips", "films"]);
        assert_eq!(m.labels(), [0, 1, 0]);
        match DatasetManifest::from_csv("id,path,label\na,x.png,tips\nb,,films\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(DatasetManifest::from_csv("id,path,label\na,x,t\na,y,t\n").is_err());
        let back = DatasetManifest::from_csv(std::str::from_utf8(&m.to_csv().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn missing_files_listed() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"x").unwrap();
        let manifest = dir.path().join("m.csv");
        fs::write(&manifest, "id,path,label\na,a.png,t\nb,b.png,t\nc,synthetic:seed=0;class=0;classes=2;index=0;noise=0;size=4,u\n").unwrap();
        match load_manifest(&manifest) {
            Err(Error::MissingFiles(v)) => assert_eq!(v, vec![dir.path().join("b.png")]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uri_round_trip_and_determinism() {
        let spec = SyntheticSpec { seed: 4, class: 2, classes: 5, index: 9, noise: 0.125, size: 8 };
        assert_eq!(SyntheticSpec::parse(&spec.uri()).unwrap(), spec);
        assert_eq!(spec.render(), spec.render());
        let a = synth_dataset(SynthOptions { classes: 3, per_class: 2, seed: 5, noise: 0.1, ..Default::default() }).unwrap();
        let b = synth_dataset(SynthOptions { classes: 3, per_class: 2, seed: 5, noise: 0.1, ..Default::default() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.manifest.to_csv().unwrap(), b.manifest.to_csv().unwrap());
        assert_eq!(synth_dataset(SynthOptions::default()).unwrap().manifest.num_classes(), 10);
        assert!(synth_dataset(SynthOptions { classes: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn noiseless_templates_are_nearest_class() {
        let ds = synth_dataset(SynthOptions { classes: 2, per_class: 5, ..Default::default() }).unwrap();
        let templates: Vec<ImageTensor> = (0..2).map(|c| class_template(0, c, 2, 32)).collect();
        for (img, r) in ds.images.iter().zip(&ds.manifest.records) {
            let d: Vec<f64> = templates
                .iter()
                .map(|t| t.data.iter().zip(&img.data).map(|(a, b)| (a - b).powi(2)).sum())
                .collect();
            let pred = if d[0] <= d[1] { 0 } else { 1 };
            assert_eq!(pred, r.label);
        }
        // every pair of class templates differs
        let ten: Vec<ImageTensor> = (0..10).map(|c| class_template(0, c, 10, 32)).collect();
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(ten[i], ten[j]);
            }
        }
    }

    #[test]
    fn transcripts_cover_categories() {
        let cats = category_names(3);
        let ts = synth_transcripts(&cats, "nanomaterial", 1).unwrap();
        assert_eq!(ts.len(), 3);
        for t in &ts {
            t.validate().unwrap();
            assert_eq!(t.responses.len(), 6);
        }
        assert_eq!(transcript_file_name("nanomaterial", "MEMS"), "nanomaterial__mems.json");
    }

    #[test]
    fn kfold_examples() {
        let labels: Vec<usize> = (0..100).map(|i| i / 10).collect();
        let plan = kfold_split(&labels, 10, 3).unwrap();
        for f in &plan.folds {
            assert_eq!(f.len(), 10);
            let mut per = vec![0; 10];
            f.iter().for_each(|&i| per[labels[i]] += 1);
            assert!(per.iter().all(|&c| c == 1));
        }
        assert!(kfold_split(&labels, 1, 0).is_err());
        assert!(kfold_split(&labels, 11, 0).is_err());
        let labels: Vec<usize> = (0..23).map(|i| usize::from(i >= 12)).collect();
        let plan = kfold_split(&labels, 5, 1).unwrap();
        for f in &plan.folds {
            for (c, total) in [(0, 12.0), (1, 11.0)] {
                let n = f.iter().filter(|&&i| labels[i] == c).count() as f64;
                assert!((n - total / 5.0).abs() <= 1.0);
            }
        }
        assert_eq!(plan.train(0).len() + plan.validation(0).len(), 23);
    }

    #[test]
    fn holdout_is_stratified() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let ids: Vec<usize> = (0..40).collect();
        let (t, v) = stratified_holdout(&ids, &labels, 0.1, 2);
        assert_eq!(v.len(), 4);
        assert_eq!(t.len(), 36);
        let mut per = [0; 4];
        v.iter().for_each(|&i| per[labels[i]] += 1);
        assert_eq!(per, [1; 4]);
    }
}
