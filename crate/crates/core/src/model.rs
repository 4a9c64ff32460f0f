//! The full classifier: encoder, text pooling, alignment, prediction lift and
//! fusion head, with per-sample forward/backward and batch helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{align_backward, align_forward, align_with_mode, alignment_surrogate, AlignMode, AlignParams, AlignmentResult};
use crate::config::{Ablation, TrainConfig};
use crate::encoder::{backward_image, forward_image, EncoderParams, ImageTensor};
use crate::error::{Error, Result};
use crate::fusion::{
    classify, concat_loss, fuse_backward, fuse_concat, fuse_forward, head_loss, ConcatHeadParams,
    FusionMode, FusionParams,
};
use crate::kernels::{scale_all, zeros_like, Matrix, Parameters, ProbVector};
use crate::text::{build_class_text_forward, class_text_backward, ClassTextMatrix, Embedder, TextParams, Transcript};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub text: TextParams,
    pub align: AlignParams,
    pub lift: crate::fewshot::PredictionLift,
    pub fusion: FusionParams,
    pub concat: ConcatHeadParams,
}

impl ModelParams {
    pub fn init(cfg: &TrainConfig, classes: usize, embedder: Embedder, null_row: bool) -> Result<Self> {
        if embedder.dim() != cfg.dim {
            return Err(Error::shape("embedder dim", cfg.dim, embedder.dim()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = EncoderParams::init(cfg.encoder_shape(), &mut rng)?;
        let text = TextParams::init(embedder, &mut rng);
        let align = AlignParams::init(cfg.heads, cfg.dim, &mut rng)?;
        let lift = crate::fewshot::PredictionLift::init(classes, cfg.dim, null_row, &mut rng);
        let fusion = FusionParams::init(cfg.heads, cfg.dim, classes, &mut rng)?;
        let concat = ConcatHeadParams::init(cfg.dim, classes, &mut rng);
        Ok(Self {
            encoder,
            text,
            align,
            lift,
            fusion,
            concat,
        })
    }

    pub fn classes(&self) -> usize {
        self.fusion.classes()
    }
}

impl Parameters for ModelParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        let groups = [
            ("encoder", self.encoder.blocks()),
            ("text", self.text.blocks()),
            ("align", self.align.blocks()),
            ("lift", self.lift.blocks()),
            ("fusion", self.fusion.blocks()),
            ("concat", self.concat.blocks()),
        ];
        groups
            .into_iter()
            .flat_map(|(prefix, blocks)| {
                blocks
                    .into_iter()
                    .map(move |(n, m)| (format!("{prefix}.{n}"), m))
            })
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.blocks_mut();
        out.extend(self.text.blocks_mut());
        out.extend(self.align.blocks_mut());
        out.extend(self.lift.blocks_mut());
        out.extend(self.fusion.blocks_mut());
        out.extend(self.concat.blocks_mut());
        out
    }
}

/// Routing and loss settings that do not change parameter shapes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Routing {
    pub ablation: Ablation,
    pub align_mode: AlignMode,
    pub fusion_mode: FusionMode,
    /// Weight of the alignment surrogate; 0 disables it.
    pub align_weight: f64,
    pub tau: f64,
}

impl Routing {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        let align_weight = if cfg.align_loss && cfg.ablation.uses_text() && cfg.align_mode == AlignMode::Diagonal {
            cfg.align_weight
        } else {
            0.0
        };
        Self {
            ablation: cfg.ablation,
            align_mode: cfg.align_mode,
            fusion_mode: cfg.fusion_mode,
            align_weight,
            tau: cfg.tau,
        }
    }
}

/// Everything a forward pass reveals about one sample.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub h_cls: Vec<f64>,
    pub alignment: Option<AlignmentResult>,
    pub h_icl: Option<Vec<f64>>,
    pub h_cross: Option<Vec<f64>>,
    pub probs: ProbVector,
}

fn lift_row(params: &ModelParams, pred: usize) -> Result<Vec<f64>> {
    if pred >= params.lift.w_p.rows() {
        return Err(Error::invalid(format!(
            "prediction index {pred} has no lift row ({} rows)",
            params.lift.w_p.rows()
        )));
    }
    Ok(params.lift.w_p.row(pred).to_vec())
}

/// Class text rows for the current text parameters, or `None` when the route
/// does not use text.
pub fn text_matrix(
    params: &ModelParams,
    routing: &Routing,
    transcripts: &[Transcript],
    categories: &[String],
) -> Result<Option<ClassTextMatrix>> {
    if !routing.ablation.uses_text() {
        return Ok(None);
    }
    build_class_text_forward(transcripts, categories, &params.text).map(|(m, _)| Some(m))
}

/// Inference for one preprocessed image. `pred` indexes the lift matrix.
pub fn forward_sample(
    params: &ModelParams,
    routing: &Routing,
    text: Option<&ClassTextMatrix>,
    image: &ImageTensor,
    pred: usize,
) -> Result<SampleOutput> {
    let fwd = forward_image(image, &params.encoder)?;
    let h_cls = fwd.h_cls;
    let alignment = match (routing.ablation.uses_text(), text) {
        (true, Some(t)) => Some(align_with_mode(&h_cls, t, &params.align, routing.align_mode)?),
        (true, None) => return Err(Error::invalid("route needs the class text matrix")),
        (false, _) => None,
    };
    let h_icl = if routing.ablation.uses_prediction() {
        Some(lift_row(params, pred)?)
    } else {
        None
    };
    if routing.ablation == Ablation::NoMha {
        let a = alignment.as_ref().expect("no-mha uses text");
        let probs = fuse_concat(&h_cls, &a.h_star_text, h_icl.as_deref().expect("no-mha uses predictions"), &params.concat)?;
        return Ok(SampleOutput {
            h_cls,
            alignment,
            h_icl,
            h_cross: None,
            probs,
        });
    }
    let kv1 = stage1_kv(routing, text, alignment.as_ref());
    let cache = fuse_forward(&h_cls, kv1.as_ref(), h_icl.as_deref(), &params.fusion)?;
    let probs = classify(&cache.h_cross, &params.fusion.w_out)?;
    Ok(SampleOutput {
        h_cls,
        alignment,
        h_icl,
        h_cross: Some(cache.h_cross),
        probs,
    })
}

fn stage1_kv(
    routing: &Routing,
    text: Option<&ClassTextMatrix>,
    alignment: Option<&AlignmentResult>,
) -> Option<Matrix> {
    let (t, a) = (text?, alignment?);
    Some(match routing.fusion_mode {
        FusionMode::Faithful => Matrix::row_vector(&a.h_star_text),
        FusionMode::TokenSet => t.rows.clone(),
    })
}

/// Loss of one sample; parameter gradients go to `grads` and the class-text
/// gradient to `d_text` (both unscaled).
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    params: &ModelParams,
    routing: &Routing,
    text: Option<&ClassTextMatrix>,
    image: &ImageTensor,
    pred: usize,
    label: usize,
    grads: &mut ModelParams,
    d_text: &mut Matrix,
) -> Result<(f64, Vec<f64>)> {
    if label >= params.classes() {
        return Err(Error::invalid(format!("label {label} out of range")));
    }
    let fwd = forward_image(image, &params.encoder)?;
    let h_cls = &fwd.h_cls;
    let mut d_hcls = vec![0.0; h_cls.len()];
    let mut loss = 0.0;

    let aligned = match (routing.ablation.uses_text(), text) {
        (true, Some(t)) => match routing.align_mode {
            AlignMode::Diagonal => {
                let (r, cache) = align_forward(h_cls, t, &params.align)?;
                if routing.align_weight > 0.0 {
                    let (l, mut d_sim) = alignment_surrogate(&cache, label, routing.tau);
                    loss += routing.align_weight * l;
                    d_sim.iter_mut().for_each(|g| *g *= routing.align_weight);
                    let g = align_backward(h_cls, t, &params.align, &r, &cache, &d_sim, &mut grads.align);
                    add_into(&mut d_hcls, &g.d_hcls);
                    d_text.add_assign(&g.d_text);
                }
                Some(r)
            }
            AlignMode::Collapsed => Some(align_with_mode(h_cls, t, &params.align, AlignMode::Collapsed)?),
        },
        (true, None) => return Err(Error::invalid("route needs the class text matrix")),
        (false, _) => None,
    };
    let h_icl = if routing.ablation.uses_prediction() {
        Some(lift_row(params, pred)?)
    } else {
        None
    };

    let probs = if routing.ablation == Ablation::NoMha {
        let a = aligned.as_ref().expect("no-mha uses text");
        let (l, p, [dc, ds, di]) = concat_loss(
            h_cls,
            &a.h_star_text,
            h_icl.as_deref().expect("no-mha uses predictions"),
            &params.concat,
            label,
            &mut grads.concat,
        )?;
        loss += l;
        add_into(&mut d_hcls, &dc);
        add_into(d_text.row_mut(a.i_star), &ds);
        add_into(grads.lift.w_p.row_mut(pred), &di);
        p
    } else {
        let kv1 = stage1_kv(routing, text, aligned.as_ref());
        let cache = fuse_forward(h_cls, kv1.as_ref(), h_icl.as_deref(), &params.fusion)?;
        let (l, p, dh) = head_loss(&cache.h_cross, &params.fusion.w_out, label, &mut grads.fusion.w_out)?;
        loss += l;
        let g = fuse_backward(&params.fusion, &cache, &dh, &mut grads.fusion);
        add_into(&mut d_hcls, &g.d_hcls);
        if let Some(dkv) = g.d_kv1 {
            match routing.fusion_mode {
                FusionMode::Faithful => {
                    let i = aligned.as_ref().expect("stage 1 ran").i_star;
                    add_into(d_text.row_mut(i), dkv.row(0));
                }
                FusionMode::TokenSet => d_text.add_assign(&dkv),
            }
        }
        if let Some(di) = g.d_hicl {
            add_into(grads.lift.w_p.row_mut(pred), &di);
        }
        p
    };
    backward_image(&fwd, &params.encoder, &d_hcls, &mut grads.encoder);
    Ok((loss, probs))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// One training example: preprocessed image, lift row index and label.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub image: &'a ImageTensor,
    pub pred: usize,
    pub label: usize,
}

/// Mean loss over `batch` and the matching mean gradient.
pub fn batch_loss(
    params: &ModelParams,
    routing: &Routing,
    transcripts: &[Transcript],
    categories: &[String],
    batch: &[Example<'_>],
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut grads = zeros_like(params);
    let text = if routing.ablation.uses_text() {
        Some(build_class_text_forward(transcripts, categories, &params.text)?)
    } else {
        None
    };
    let mut d_text = Matrix::zeros(categories.len(), params.encoder.dim());
    let mut total = 0.0;
    for ex in batch {
        let (l, _) = sample_loss(
            params,
            routing,
            text.as_ref().map(|(m, _)| m),
            ex.image,
            ex.pred,
            ex.label,
            &mut grads,
            &mut d_text,
        )?;
        total += l;
    }
    if let Some((_, cache)) = &text {
        class_text_backward(&params.text, cache, &d_text, &mut grads.text);
    }
    let inv = 1.0 / batch.len() as f64;
    scale_all(&mut grads, inv);
    Ok((total * inv, grads))
}

/// Class probabilities for each example (labels are ignored).
pub fn predict(
    params: &ModelParams,
    routing: &Routing,
    transcripts: &[Transcript],
    categories: &[String],
    examples: &[Example<'_>],
) -> Result<Vec<ProbVector>> {
    let text = text_matrix(params, routing, transcripts, categories)?;
    examples
        .iter()
        .map(|ex| forward_sample(params, routing, text.as_ref(), ex.image, ex.pred).map(|o| o.probs))
        .collect()
}
