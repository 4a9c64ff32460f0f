//! Training loop, prediction planning, cross-validation, ablation and sweeps.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, EmbedderKind, IclScope, SimilaritySource, TrainConfig};
use crate::data::{kfold_split, stratified_holdout, Dataset, DatasetManifest};
use crate::encoder::{forward_image, preprocess, EncoderParams, ImageTensor};
use crate::error::{Error, Result};
use crate::fewshot::{
    build_icl_prompt, kmeans, lmm_client, pca, query_lmm, sample_demonstrations, select_ambiguous,
    zscore_columns, zscore_flatten,
};
use crate::kernels::{cross_entropy, Matrix, Parameters, ProbVector};
use crate::metrics::{fold_metrics, ConfusionMatrix, FoldMetrics, MetricsReport};
use crate::model::{batch_loss, predict, Example, ModelParams, Routing};
use crate::optim::{Adam, EarlyStopping, PlateauScheduler};
use crate::text::{Embedder, HashEmbedder, TokenTable, Transcript};

/// Progress sink; the CLI prints these lines to stderr.
pub type Progress<'a> = &'a (dyn Fn(&str) + Sync);

pub fn quiet(_: &str) {}

/// Preprocessed images with their manifest and category transcripts.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageTensor>,
    pub transcripts: Vec<Transcript>,
}

impl Corpus {
    pub fn new(manifest: DatasetManifest, raw: &[ImageTensor], transcripts: Vec<Transcript>, cfg: &TrainConfig) -> Result<Self> {
        if raw.len() != manifest.len() {
            return Err(Error::shape("corpus images", manifest.len(), raw.len()));
        }
        let images = raw
            .iter()
            .zip(&manifest.records)
            .map(|(img, r)| {
                if img.channels != cfg.channels {
                    return Err(Error::Config(format!(
                        "image {} has {} channels, config expects {}",
                        r.id, img.channels, cfg.channels
                    )));
                }
                preprocess(img, cfg.image_size)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest,
            images,
            transcripts,
        })
    }

    pub fn from_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        Self::new(ds.manifest.clone(), &ds.images, ds.transcripts.clone(), cfg)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.labels()
    }

    pub fn categories(&self) -> &[String] {
        &self.manifest.categories
    }
}

/// Token embedder for a run: a trainable table over the transcript
/// vocabulary, or the fixed hash embedder.
pub fn build_embedder(cfg: &TrainConfig, transcripts: &[Transcript]) -> Embedder {
    let hash = HashEmbedder {
        dim: cfg.dim,
        seed: cfg.seed,
    };
    match cfg.embedder {
        EmbedderKind::Hash => Embedder::Hash(hash),
        EmbedderKind::Table => {
            let texts: Vec<String> = transcripts.iter().map(Transcript::full_text).collect();
            Embedder::Table(TokenTable::from_corpus(texts.iter().map(String::as_str), hash))
        }
    }
}

pub fn init_model(cfg: &TrainConfig, corpus: &Corpus) -> Result<ModelParams> {
    ModelParams::init(
        cfg,
        corpus.manifest.num_classes(),
        build_embedder(cfg, &corpus.transcripts),
        cfg.icl_scope == IclScope::Ambiguous,
    )
}

/// Lift-row index for every sample, plus which samples were sent to the
/// multimodal model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionPlan {
    pub lift_index: Vec<usize>,
    pub queried: Vec<usize>,
    /// Bundle hash per queried sample, aligned with `queried`.
    pub bundle_hashes: Vec<String>,
}

impl PredictionPlan {
    /// Share of queried samples whose prediction equals their label.
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        if self.queried.is_empty() {
            return 0.0;
        }
        let hits = self.queried.iter().filter(|&&i| self.lift_index[i] == labels[i]).count();
        hits as f64 / self.queried.len() as f64
    }
}

/// Feature rows used to rank demonstrations.
pub fn similarity_features(cfg: &TrainConfig, corpus: &Corpus, encoder: &EncoderParams) -> Result<Matrix> {
    let n = corpus.images.len();
    match cfg.similarity {
        SimilaritySource::HCls => {
            let rows = corpus
                .images
                .iter()
                .map(|img| forward_image(img, encoder).map(|f| f.h_cls))
                .collect::<Result<Vec<_>>>()?;
            Matrix::from_rows(&rows)
        }
        SimilaritySource::Pixels => {
            let d = corpus.images[0].len();
            Matrix::new(n, d, corpus.images.iter().flat_map(|i| i.data.iter().copied()).collect())
        }
        SimilaritySource::Pca => {
            let f = zscore_flatten(&corpus.manifest.ids(), &corpus.images)?;
            let k = cfg.pca_k.min(n).min(f.data.cols());
            Ok(pca(&f.data, k)?.projected)
        }
    }
}

/// Samples with the least confident cluster membership in PCA space.
pub fn mine_ambiguous(cfg: &TrainConfig, images: &[ImageTensor], ids: &[String]) -> Result<Vec<usize>> {
    let f = zscore_flatten(ids, images)?;
    let n = images.len();
    let mut proj = pca(&f.data, cfg.pca_k.min(n).min(f.data.cols()))?.projected;
    zscore_columns(&mut proj);
    let model = kmeans(&proj, cfg.kmeans_k.min(n), cfg.seed, 100)?;
    select_ambiguous(&model, &proj, cfg.ambiguous_fraction)
}

/// Queries the configured multimodal client for `targets`, drawing
/// demonstrations from `pool` only. Samples outside `targets` (or not mined
/// as ambiguous, under that scope) get the null row when one exists and row 0
/// otherwise; they are never used.
pub fn plan_predictions(
    cfg: &TrainConfig,
    corpus: &Corpus,
    encoder: &EncoderParams,
    pool: &[usize],
    targets: &[usize],
) -> Result<PredictionPlan> {
    let n = corpus.images.len();
    let c = corpus.manifest.num_classes();
    let null = if cfg.icl_scope == IclScope::Ambiguous { c } else { 0 };
    let mut plan = PredictionPlan {
        lift_index: vec![null; n],
        queried: Vec::new(),
        bundle_hashes: Vec::new(),
    };
    if !cfg.ablation.uses_prediction() {
        return Ok(plan);
    }
    let selected: Vec<usize> = match cfg.icl_scope {
        IclScope::All => targets.to_vec(),
        IclScope::Ambiguous => {
            let mined = mine_ambiguous(cfg, &corpus.images, &corpus.manifest.ids())?;
            let mut keep: Vec<usize> = mined.into_iter().filter(|i| targets.contains(i)).collect();
            keep.sort_unstable();
            keep
        }
    };
    if selected.is_empty() {
        return Ok(plan);
    }
    let features = similarity_features(cfg, corpus, encoder)?;
    let labels = corpus.labels();
    let paths = corpus.manifest.paths();
    let cats = corpus.categories();
    let client = lmm_client(&cfg.lmm, cats)?;
    let k = cfg.k_demos.min(pool.len().saturating_sub(1));
    for &q in &selected {
        let demos = sample_demonstrations(q, &features, pool, &labels, k, cfg.strategy, cfg.seed)?;
        let bundle = build_icl_prompt(&demos, &paths, cats)?;
        let p = query_lmm(client.as_ref(), &bundle, cats, Some(&cats[labels[q]]))?;
        plan.lift_index[q] = p.argmax();
        plan.queried.push(q);
        plan.bundle_hashes.push(bundle.hash());
    }
    Ok(plan)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        let _ = writeln!(out, "{},{:.6},{:.6},{}", r.epoch, r.train_loss, r.val_loss, r.lr);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn examples<'a>(corpus: &'a Corpus, plan: &PredictionPlan, ids: &[usize]) -> Vec<Example<'a>> {
    let labels = &corpus.manifest.records;
    ids.iter()
        .map(|&i| Example {
            image: &corpus.images[i],
            pred: plan.lift_index[i],
            label: labels[i].label,
        })
        .collect()
}

fn first_non_finite(grads: &ModelParams) -> Option<String> {
    grads
        .blocks()
        .into_iter()
        .find(|(_, m)| !m.is_finite())
        .map(|(n, _)| n)
}

/// Mean classification cross-entropy over `ids`.
pub fn eval_loss(params: &ModelParams, routing: &Routing, corpus: &Corpus, plan: &PredictionPlan, ids: &[usize]) -> Result<f64> {
    let ex = examples(corpus, plan, ids);
    let probs = predict(params, routing, &corpus.transcripts, corpus.categories(), &ex)?;
    let mut total = 0.0;
    for (p, e) in probs.iter().zip(&ex) {
        total += cross_entropy(p, e.label)?;
    }
    Ok(total / ids.len() as f64)
}

/// Mini-batch Adam with plateau scheduling and early stopping on `val` loss
/// (training loss when `val` is empty). The best epoch's parameters are
/// returned.
pub fn fit(
    cfg: &TrainConfig,
    corpus: &Corpus,
    plan: &PredictionPlan,
    train: &[usize],
    val: &[usize],
    mut params: ModelParams,
    progress: Progress<'_>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let routing = Routing::from_config(cfg);
    let mut adam = Adam::new(cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.lr_factor, cfg.scheduler_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11);
    let mut order = train.to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = params.clone();
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = adam.lr;
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let ex = examples(corpus, plan, chunk);
            let (loss, grads) = batch_loss(&params, &routing, &corpus.transcripts, corpus.categories(), &ex)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss in epoch {epoch}, batch {b}")));
            }
            if let Some(block) = first_non_finite(&grads) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in block {block} (epoch {epoch}, batch {b})"
                )));
            }
            adam.step(&mut params, &grads);
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            eval_loss(&params, &routing, corpus, plan, val)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss in epoch {epoch}")));
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        progress(&format!(
            "epoch {epoch}: train {train_loss:.4} val {val_loss:.4} lr {lr}"
        ));
        history.push(rec);
        adam.lr = sched.observe(val_loss);
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = params.clone();
        }
        if stop {
            stopped_early = true;
            break;
        }
    }
    let best_epoch = stopper.best_epoch();
    Ok(TrainOutcome {
        params: if history.is_empty() { params } else { best },
        history,
        best_epoch,
        stopped_early,
    })
}

/// Result of training on one split and scoring the held-out part.
#[derive(Clone, Debug)]
pub struct SplitRun {
    pub fold: usize,
    pub test: Vec<usize>,
    pub probs: Vec<ProbVector>,
    pub metrics: FoldMetrics,
    pub confusion: ConfusionMatrix,
    pub outcome: TrainOutcome,
    pub plan: PredictionPlan,
}

/// Trains on `train` (with an inner stratified validation split) and scores
/// `test`. Model initialization is seeded by `cfg.seed + fold`.
pub fn run_split(
    cfg: &TrainConfig,
    corpus: &Corpus,
    fold: usize,
    train: &[usize],
    test: &[usize],
    progress: Progress<'_>,
) -> Result<SplitRun> {
    let fold_cfg = TrainConfig {
        seed: cfg.seed.wrapping_add(fold as u64),
        ..cfg.clone()
    };
    let labels = corpus.labels();
    let (inner, val) = stratified_holdout(train, &labels, cfg.val_fraction, fold_cfg.seed);
    let params = init_model(&fold_cfg, corpus)?;
    let mut targets: Vec<usize> = train.iter().chain(test).copied().collect();
    targets.sort_unstable();
    let plan = plan_predictions(&fold_cfg, corpus, &params.encoder, train, &targets)?;
    let outcome = fit(&fold_cfg, corpus, &plan, &inner, &val, params, progress)?;
    let routing = Routing::from_config(&fold_cfg);
    let probs = predict(
        &outcome.params,
        &routing,
        &corpus.transcripts,
        corpus.categories(),
        &examples(corpus, &plan, test),
    )?;
    let test_labels: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let (metrics, confusion) = fold_metrics(fold, &probs, &test_labels)?;
    Ok(SplitRun {
        fold,
        test: test.to_vec(),
        probs,
        metrics,
        confusion,
        outcome,
        plan,
    })
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub report: MetricsReport,
    pub runs: Vec<SplitRun>,
}

/// Stratified `cfg.folds`-fold cross-validation. Folds run on up to
/// `workers` threads; results do not depend on the worker count.
pub fn cross_validate(cfg: &TrainConfig, corpus: &Corpus, workers: usize, progress: Progress<'_>) -> Result<CvOutcome> {
    cfg.validate()?;
    let plan = kfold_split(&corpus.labels(), cfg.folds, cfg.seed)?;
    let workers = workers.clamp(1, cfg.folds);
    let mut runs: Vec<Result<SplitRun>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let plan = &plan;
                s.spawn(move || {
                    (w..plan.k)
                        .step_by(workers)
                        .map(|f| {
                            progress(&format!("fold {}/{}", f + 1, plan.k));
                            run_split(cfg, corpus, f, &plan.train(f), plan.validation(f), progress)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("fold worker panicked"))
            .collect()
    });
    runs.sort_by_key(|r| r.as_ref().map(|r| r.fold).unwrap_or(0));
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut report = MetricsReport::new(corpus.categories().to_vec());
    for r in &runs {
        report.push(r.metrics.clone(), &r.confusion)?;
    }
    Ok(CvOutcome { report, runs })
}

/// `fold,id,label,predicted,<category probabilities...>` for every scored sample.
pub fn predictions_csv(corpus: &Corpus, runs: &[SplitRun]) -> String {
    let cats = corpus.categories();
    let mut out = format!("fold,id,label,predicted,{}\n", cats.join(","));
    for r in runs {
        for (&i, p) in r.test.iter().zip(&r.probs) {
            let rec = &corpus.manifest.records[i];
            let probs: Vec<String> = p.as_slice().iter().map(f64::to_string).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.fold,
                rec.id,
                cats[rec.label],
                cats[p.argmax()],
                probs.join(",")
            );
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Ablation,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub f1_mean: f64,
}

/// Cross-validates every pathway configuration with otherwise equal settings.
pub fn ablation_study(cfg: &TrainConfig, corpus: &Corpus, workers: usize, progress: Progress<'_>) -> Result<Vec<AblationRow>> {
    Ablation::ALL
        .into_iter()
        .map(|mode| {
            progress(&format!("ablation {mode}"));
            let c = TrainConfig {
                ablation: mode,
                ..cfg.clone()
            };
            let cv = cross_validate(&c, corpus, workers, progress)?;
            let (top1_mean, top1_std) = cv.report.top1();
            Ok(AblationRow {
                mode,
                top1_mean,
                top1_std,
                f1_mean: cv.report.macro_f1().0,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("mode,top1_mean,top1_std,f1_mean\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            r.mode.table_label(),
            r.top1_mean,
            r.top1_std,
            r.f1_mean
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub dim: usize,
    pub batch: usize,
    pub accuracy: f64,
}

/// Top-1 accuracy on fold 0 of the k-fold plan for every `(dim, batch)` pair.
pub fn hyperparameter_sweep(
    cfg: &TrainConfig,
    corpus: &Corpus,
    dims: &[usize],
    batches: &[usize],
    progress: Progress<'_>,
) -> Result<Vec<SweepCell>> {
    let plan = kfold_split(&corpus.labels(), cfg.folds, cfg.seed)?;
    let (train, test) = (plan.train(0), plan.validation(0).to_vec());
    let mut out = Vec::new();
    for &dim in dims {
        for &batch in batches {
            let c = TrainConfig {
                dim,
                batch,
                ..cfg.clone()
            };
            c.validate()?;
            progress(&format!("sweep d={dim} b={batch}"));
            let run = run_split(&c, corpus, 0, &train, &test, progress)?;
            out.push(SweepCell {
                dim,
                batch,
                accuracy: run.metrics.top1(),
            });
        }
    }
    Ok(out)
}

/// Two-row table: a `(d, b)` header row and an `Accuracy` row.
pub fn sweep_csv(cells: &[SweepCell]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["(d, b)".to_string()];
    head.extend(cells.iter().map(|c| format!("({}, {})", c.dim, c.batch)));
    let mut acc = vec!["Accuracy".to_string()];
    acc.extend(cells.iter().map(|c| format!("{:.6}", c.accuracy)));
    for row in [head, acc] {
        w.write_record(&row).map_err(|e| Error::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}
