//! Command-line front end. Every verb renders its outputs in memory and only
//! then writes files, so a failing run leaves no partial report behind.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, EmbedderKind, IclScope, SimilaritySource, TrainConfig};
use crate::data::{
    load_images, load_manifest, load_transcripts, synth_dataset, transcript_file_name, DatasetManifest, SynthOptions,
};
use crate::encoder::{preprocess, EncoderParams};
use crate::error::{Error, Result};
use crate::fewshot::{
    build_icl_prompt, cluster_purity, kmeans, pca, sample_demonstrations, select_ambiguous, silhouette,
    zscore_columns, zscore_flatten, DemoStrategy,
};
use crate::align::AlignMode;
use crate::fusion::FusionMode;
use crate::metrics::{fold_metrics, report_from_predictions, MetricsReport};
use crate::model::{predict, Example, Routing};
use crate::text::{build_cot_prompts, query_llm, FileCache, LlmClient, MockFixture, Transcript};
use crate::train::{
    ablation_csv, ablation_study, cross_validate, fit, history_csv, hyperparameter_sweep, init_model, plan_predictions,
    predictions_csv, similarity_features, sweep_csv, Corpus, SplitRun,
};

#[derive(Debug, Parser)]
#[command(name = "mgfuse", version, about = "Cross-modal electron micrograph classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (manifest plus category transcripts).
    Synth(SynthArgs),
    /// Mine the least confidently clustered samples.
    Mine(MineArgs),
    /// Emit chain-of-thought or in-context prompt bundles.
    Prompts(PromptsArgs),
    /// Train on a stratified split (the held-out share drives scheduling) and save a checkpoint.
    Train(RunArgs),
    /// Stratified k-fold cross-validation.
    Cv(RunArgs),
    /// Cross-validate the full model and its three ablations.
    Ablate(RunArgs),
    /// Grid over embedding size and batch size on one holdout fold.
    Sweep(SweepArgs),
    /// Score a checkpoint on the samples it was not trained on.
    Eval(EvalArgs),
    /// Recompute metric tables from a predictions file.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write PNG files instead of `synthetic:` references.
    #[arg(long)]
    pub png: bool,
}

/// Dataset location.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Transcript directory; defaults to `transcripts/` next to the manifest.
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
}

impl DataArgs {
    fn transcript_dir(&self) -> PathBuf {
        self.transcripts
            .clone()
            .unwrap_or_else(|| manifest_dir(&self.manifest).join("transcripts"))
    }
}

fn manifest_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Configuration file plus per-field overrides.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    /// Number of cross-validation folds.
    #[arg(long = "k")]
    pub folds: Option<usize>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub fusion_mode: Option<String>,
    #[arg(long)]
    pub align_mode: Option<String>,
    #[arg(long)]
    pub embedder: Option<String>,
    #[arg(long)]
    pub k_demos: Option<usize>,
    #[arg(long)]
    pub strategy: Option<DemoStrategy>,
    #[arg(long)]
    pub similarity: Option<SimilaritySource>,
    #[arg(long)]
    pub icl_scope: Option<String>,
    #[arg(long)]
    pub ambiguous_fraction: Option<f64>,
    #[arg(long)]
    pub pca_k: Option<usize>,
    #[arg(long)]
    pub kmeans_k: Option<usize>,
    #[arg(long)]
    pub lmm: Option<String>,
    #[arg(long)]
    pub flip_rate: Option<f64>,
    #[arg(long)]
    pub replay: Option<PathBuf>,
}

fn kebab<T: serde::de::DeserializeOwned>(what: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Error::Config(format!("unknown {what} '{v}'")))
}

impl ConfigArgs {
    /// Defaults, then the file, then flags. The returned list names every
    /// overridden field.
    pub fn resolve(&self) -> Result<(TrainConfig, Vec<&'static str>)> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        let mut set = Vec::new();
        macro_rules! over {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    c.$field = v.clone();
                    set.push(stringify!($field));
                }
            )*};
        }
        over!(seed, epochs, batch, lr, dim, heads, layers, image_size, patch, folds, ablation, k_demos, strategy, similarity, ambiguous_fraction, pca_k, kmeans_k);
        if let Some(v) = &self.fusion_mode {
            c.fusion_mode = kebab::<FusionMode>("fusion mode", v)?;
            set.push("fusion_mode");
        }
        if let Some(v) = &self.align_mode {
            c.align_mode = kebab::<AlignMode>("align mode", v)?;
            set.push("align_mode");
        }
        if let Some(v) = &self.embedder {
            c.embedder = kebab::<EmbedderKind>("embedder", v)?;
            set.push("embedder");
        }
        if let Some(v) = &self.icl_scope {
            c.icl_scope = kebab::<IclScope>("icl scope", v)?;
            set.push("icl_scope");
        }
        if let Some(v) = &self.lmm {
            c.lmm.provider = v.clone();
            set.push("lmm.provider");
        }
        if let Some(v) = self.flip_rate {
            c.lmm.flip_rate = v;
            set.push("lmm.flip_rate");
        }
        if let Some(v) = &self.replay {
            c.lmm.replay = Some(v.clone());
            set.push("lmm.replay");
        }
        c.validate()?;
        Ok((c, set))
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Fold-level worker threads.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output CSV of `id,cluster,silhouette`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PromptsArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "nanomaterial")]
    pub family: String,
    /// Subjects, comma separated; defaults to the manifest's categories.
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Fill responses from: `mock` (shipped fixtures) or `cache` (offline cache in --cache).
    #[arg(long)]
    pub llm: Option<String>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Emit one in-context bundle per manifest sample instead.
    #[arg(long)]
    pub icl: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [32usize, 64])]
    pub dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [16usize, 48])]
    pub batches: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Also score the training samples.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (including the program name), runs the verb and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

/// Files to create, written only after every one has been rendered.
struct Staged(Vec<(PathBuf, Vec<u8>)>);

impl Staged {
    fn new() -> Self {
        Self(Vec::new())
    }

    fn add(&mut self, path: PathBuf, body: impl Into<Vec<u8>>) {
        self.0.push((path, body.into()));
    }

    fn commit(self) -> Result<()> {
        for (p, body) in self.0 {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(&p, body)?;
        }
        Ok(())
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let (cfg, set) = args.resolve()?;
    let file = args
        .config
        .as_ref()
        .map_or("none".to_string(), |p| p.display().to_string());
    log(&format!(
        "config: flags [{}] > file ({file}) > defaults",
        set.join(", ")
    ));
    Ok(cfg)
}

fn load_corpus(data: &DataArgs, cfg: &TrainConfig) -> Result<Corpus> {
    let manifest = load_manifest(&data.manifest)?;
    let raw = load_images(&manifest, &manifest_dir(&data.manifest), cfg.channels)?;
    let transcripts = load_transcripts(&data.transcript_dir())?;
    log(&format!(
        "data: {} samples, {} categories, {} transcripts",
        manifest.len(),
        manifest.num_classes(),
        transcripts.len()
    ));
    Corpus::new(manifest, &raw, transcripts, cfg)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Mine(a) => mine(a),
        Command::Prompts(a) => prompts(a),
        Command::Train(a) => train(a),
        Command::Cv(a) => cv(a),
        Command::Ablate(a) => ablate(a),
        Command::Sweep(a) => sweep(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let ds = synth_dataset(SynthOptions {
        classes: a.classes,
        per_class: a.per_class,
        noise: a.noise,
        size: a.size,
        seed: a.seed,
    })?;
    let mut out = Staged::new();
    let mut manifest = ds.manifest.clone();
    if a.png {
        for (r, img) in manifest.records.iter_mut().zip(&ds.images) {
            let bytes: Vec<u8> = img.data.iter().map(|v| (v * 255.0).round() as u8).collect();
            let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
                .ok_or_else(|| Error::invalid("image buffer size"))?;
            let mut png = Vec::new();
            buf.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
                .map_err(|e| Error::invalid(e.to_string()))?;
            r.path = format!("images/{}.png", r.id);
            out.add(a.out.join(&r.path), png);
        }
    }
    out.add(a.out.join("manifest.csv"), manifest.to_csv()?);
    for t in &ds.transcripts {
        out.add(
            a.out.join("transcripts").join(transcript_file_name(&t.family, &t.subject)),
            t.to_json()?,
        );
    }
    out.commit()?;
    log(&format!("synth: wrote {} samples to {}", manifest.len(), a.out.display()));
    Ok(())
}

fn mine(a: MineArgs) -> Result<()> {
    let cfg = resolve_config(&a.config)?;
    let manifest = load_manifest(&a.data.manifest)?;
    let raw = load_images(&manifest, &manifest_dir(&a.data.manifest), cfg.channels)?;
    let images = raw
        .iter()
        .map(|r| preprocess(r, cfg.image_size))
        .collect::<Result<Vec<_>>>()?;
    let ids = manifest.ids();
    let f = zscore_flatten(&ids, &images)?;
    let n = images.len();
    let mut proj = pca(&f.data, cfg.pca_k.min(n).min(f.data.cols()))?.projected;
    zscore_columns(&mut proj);
    let model = kmeans(&proj, cfg.kmeans_k.min(n), cfg.seed, 100)?;
    let sil = if model.silhouette.len() == n {
        model.silhouette.clone()
    } else {
        silhouette(&proj, &model.assignments)?
    };
    let picked = select_ambiguous(&model, &proj, cfg.ambiguous_fraction)?;
    log(&format!(
        "mine: {} of {n} selected; cluster purity {:.4}",
        picked.len(),
        cluster_purity(&model, &manifest.labels())
    ));
    let mut body = String::from("id,cluster,silhouette\n");
    for &i in &picked {
        body.push_str(&format!("{},{},{:.6}\n", ids[i], model.assignments[i], sil[i]));
    }
    let mut out = Staged::new();
    out.add(a.out, body);
    out.commit()
}

fn prompts(a: PromptsArgs) -> Result<()> {
    let mut out = Staged::new();
    if a.icl {
        let cfg = resolve_config(&a.config)?;
        let path = a
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Usage("--icl needs --manifest".into()))?;
        let manifest = load_manifest(path)?;
        let raw = load_images(&manifest, &manifest_dir(path), cfg.channels)?;
        let corpus = Corpus::new(manifest, &raw, Vec::new(), &cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // same draw as the encoder inside a freshly initialized model
        let encoder = EncoderParams::init(cfg.encoder_shape(), &mut rng)?;
        let features = similarity_features(&cfg, &corpus, &encoder)?;
        let labels = corpus.labels();
        let all: Vec<usize> = (0..labels.len()).collect();
        let paths = corpus.manifest.paths();
        let k = cfg.k_demos.min(all.len().saturating_sub(1));
        for (i, r) in corpus.manifest.records.iter().enumerate() {
            let demos = sample_demonstrations(i, &features, &all, &labels, k, cfg.strategy, cfg.seed)?;
            let bundle = build_icl_prompt(&demos, &paths, corpus.categories())?;
            out.add(a.out.join(format!("{}.json", r.id)), bundle.to_json()?);
        }
        return out.commit();
    }
    let subjects = if !a.subjects.is_empty() {
        a.subjects.clone()
    } else if let Some(m) = &a.manifest {
        DatasetManifest::from_csv(&fs::read_to_string(m)?)?.categories
    } else {
        return Err(Error::Usage("give --subjects or --manifest".into()));
    };
    let client: Option<Box<dyn LlmClient>> = match a.llm.as_deref() {
        None => None,
        Some("mock") => Some(Box::new(MockFixture::builtin())),
        Some("cache") => {
            let dir = a.cache.clone().ok_or_else(|| Error::Usage("--llm cache needs --cache".into()))?;
            Some(Box::new(FileCache::offline(dir)))
        }
        Some(other) => return Err(Error::Usage(format!("unknown --llm '{other}' (mock, cache)"))),
    };
    for s in &subjects {
        let ps = build_cot_prompts(&a.family, s)?;
        let t = match &client {
            Some(c) => query_llm(c.as_ref(), &a.family, s, &ps)?,
            None => Transcript {
                family: a.family.clone(),
                subject: s.clone(),
                prompts: ps.iter().map(|p| p.text.clone()).collect(),
                provider: String::new(),
                responses: Vec::new(),
                retrieved_at: 0,
            },
        };
        out.add(a.out.join(transcript_file_name(&a.family, s)), t.to_json()?);
    }
    out.commit()
}

fn train(a: RunArgs) -> Result<()> {
    let cfg = resolve_config(&a.config)?;
    let corpus = load_corpus(&a.data, &cfg)?;
    let labels = corpus.labels();
    let all: Vec<usize> = (0..labels.len()).collect();
    let (inner, val) = crate::data::stratified_holdout(&all, &labels, cfg.val_fraction, cfg.seed);
    let params = init_model(&cfg, &corpus)?;
    let plan = plan_predictions(&cfg, &corpus, &params.encoder, &inner, &all)?;
    let outcome = fit(&cfg, &corpus, &plan, &inner, &val, params, &log)?;
    let ids = corpus.manifest.ids();
    let train_ids = inner.iter().map(|&i| ids[i].clone()).collect();
    let ck = Checkpoint::new(&cfg, corpus.categories(), &corpus.transcripts, train_ids, outcome.params);
    let mut out = Staged::new();
    out.add(a.out.join("model.ckpt"), ck.to_bytes()?);
    out.add(a.out.join("history.csv"), history_csv(&outcome.history));
    out.add(a.out.join("config.toml"), cfg.to_toml());
    out.commit()?;
    log(&format!("train: best epoch {}, saved {}", outcome.best_epoch, a.out.join("model.ckpt").display()));
    Ok(())
}

fn emit_runs(out: &mut Staged, dir: &Path, corpus: &Corpus, report: &MetricsReport, runs: &[SplitRun]) -> Result<()> {
    out.add(dir.join("metrics.csv"), report.metrics_csv()?);
    out.add(dir.join("confusion.csv"), report.confusion_csv());
    out.add(dir.join("perclass.csv"), report.perclass_csv());
    out.add(dir.join("predictions.csv"), predictions_csv(corpus, runs));
    for r in runs {
        out.add(dir.join(format!("history_fold{}.csv", r.fold)), history_csv(&r.outcome.history));
    }
    Ok(())
}

fn cv(a: RunArgs) -> Result<()> {
    let cfg = resolve_config(&a.config)?;
    let corpus = load_corpus(&a.data, &cfg)?;
    let res = cross_validate(&cfg, &corpus, a.workers, &log)?;
    let mut out = Staged::new();
    emit_runs(&mut out, &a.out, &corpus, &res.report, &res.runs)?;
    out.commit()?;
    let (m, s) = res.report.top1();
    log(&format!("cv: top-1 {m:.4} +/- {s:.4}"));
    Ok(())
}

fn ablate(a: RunArgs) -> Result<()> {
    let cfg = resolve_config(&a.config)?;
    let corpus = load_corpus(&a.data, &cfg)?;
    let rows = ablation_study(&cfg, &corpus, a.workers, &log)?;
    let mut out = Staged::new();
    out.add(a.out.join("ablation.csv"), ablation_csv(&rows));
    out.commit()
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = resolve_config(&a.run.config)?;
    let corpus = load_corpus(&a.run.data, &cfg)?;
    let cells = hyperparameter_sweep(&cfg, &corpus, &a.dims, &a.batches, &log)?;
    let mut out = Staged::new();
    out.add(a.run.out.join("sweep.csv"), sweep_csv(&cells)?);
    out.commit()
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = ck.meta.config.clone();
    let manifest = load_manifest(&a.data.manifest)?;
    if manifest.categories != ck.meta.categories {
        return Err(Error::invalid(format!(
            "manifest categories {:?} differ from the checkpoint's {:?}",
            manifest.categories, ck.meta.categories
        )));
    }
    let raw = load_images(&manifest, &manifest_dir(&a.data.manifest), cfg.channels)?;
    let corpus = Corpus::new(manifest, &raw, ck.meta.transcripts.clone(), &cfg)?;
    let ids = corpus.manifest.ids();
    let pool: Vec<usize> = (0..ids.len()).filter(|&i| ck.meta.train_ids.contains(&ids[i])).collect();
    let targets: Vec<usize> = (0..ids.len())
        .filter(|&i| a.all || !ck.meta.train_ids.contains(&ids[i]))
        .collect();
    if targets.is_empty() {
        return Err(Error::invalid("no samples to evaluate (all were used in training; pass --all)"));
    }
    let init = init_model(&cfg, &corpus)?;
    let plan = plan_predictions(&cfg, &corpus, &init.encoder, &pool, &targets)?;
    let routing = Routing::from_config(&cfg);
    let examples: Vec<Example<'_>> = targets
        .iter()
        .map(|&i| Example {
            image: &corpus.images[i],
            pred: plan.lift_index[i],
            label: corpus.manifest.records[i].label,
        })
        .collect();
    let probs = predict(&ck.params, &routing, &corpus.transcripts, corpus.categories(), &examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let (m, cm) = fold_metrics(0, &probs, &labels)?;
    let mut report = MetricsReport::new(corpus.categories().to_vec());
    report.push(m.clone(), &cm)?;
    let run = SplitRun {
        fold: 0,
        test: targets,
        probs,
        metrics: m,
        confusion: cm,
        outcome: crate::train::TrainOutcome {
            params: ck.params,
            history: Vec::new(),
            best_epoch: 0,
            stopped_early: false,
        },
        plan,
    };
    let mut out = Staged::new();
    out.add(a.out.join("metrics.csv"), report.metrics_csv()?);
    out.add(a.out.join("confusion.csv"), report.confusion_csv());
    out.add(a.out.join("perclass.csv"), report.perclass_csv());
    out.add(a.out.join("predictions.csv"), predictions_csv(&corpus, std::slice::from_ref(&run)));
    out.commit()?;
    log(&format!("eval: top-1 {:.4} on {} samples", run.metrics.top1(), run.test.len()));
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let r = report_from_predictions(&fs::read_to_string(&a.predictions)?)?;
    let mut out = Staged::new();
    out.add(a.out.join("metrics.csv"), r.metrics_csv()?);
    out.add(a.out.join("confusion.csv"), r.confusion_csv());
    out.add(a.out.join("perclass.csv"), r.perclass_csv());
    out.commit()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("mgfuse").chain(args.iter().copied()))
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.toml");
        fs::write(&f, "seed = 3\nepochs = 4\n").unwrap();
        let f = f.to_str().unwrap();
        let Command::Train(a) = parse(&["train", "--manifest", "m.csv", "--out", "o", "--config", f, "--seed", "7"]).unwrap().command else {
            panic!("wrong verb")
        };
        let (cfg, set) = a.config.resolve().unwrap();
        assert_eq!((cfg.seed, cfg.epochs), (7, 4));
        assert_eq!(set, ["seed"]);
    }

    #[test]
    fn usage_errors() {
        assert!(parse(&["frobnicate"]).is_err());
        assert!(parse(&["cv", "--manifest", "m", "--out", "o", "--bogus"]).is_err());
        assert!(parse(&["cv", "--manifest", "m", "--out", "o", "--strategy", "random", "--strategy", "similarity"]).is_err());
        assert_eq!(run(["mgfuse", "cv", "--nope"]), 2);
        assert_eq!(run(["mgfuse", "--help"]), 0);
    }

    #[test]
    fn config_enum_overrides() {
        let Command::Cv(a) = parse(&["cv", "--manifest", "m", "--out", "o", "--fusion-mode", "token-set", "--ablation", "no-mha", "--lmm", "oracle-mock"]).unwrap().command else {
            panic!("wrong verb")
        };
        let (cfg, _) = a.config.resolve().unwrap();
        assert_eq!(cfg.fusion_mode, FusionMode::TokenSet);
        assert_eq!(cfg.ablation, Ablation::NoMha);
        let bad = ConfigArgs { embedder: Some("nope".into()), ..Default::default() };
        assert!(matches!(bad.resolve(), Err(Error::Config(_))));
    }
}
