//! Two-stage attention fusion of image, text and prediction embeddings, the
//! category head, and the concatenation head used when attention is ablated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    linear, mha_backward, mha_forward, softmax, softmax_cross_entropy, Matrix, MhaCache, MhaParams,
    Parameters, ProbVector,
};

/// Keys/values used by the image-text stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// The selected text embedding alone (one key, so attention weights are 1).
    #[default]
    Faithful,
    /// Every row of the class text matrix.
    TokenSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub stage1: MhaParams,
    pub stage2: MhaParams,
    pub w_out: Matrix,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(heads: usize, dim: usize, classes: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            stage1: MhaParams::init(heads, dim, rng)?,
            stage2: MhaParams::init(heads, dim, rng)?,
            w_out: Matrix::init_fan_in(dim, classes, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.stage1.model_dim
    }

    pub fn classes(&self) -> usize {
        self.w_out.cols()
    }
}

impl Parameters for FusionParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = self
            .stage1
            .blocks()
            .into_iter()
            .map(|(n, m)| (format!("stage1.{n}"), m))
            .collect();
        out.extend(
            self.stage2
                .blocks()
                .into_iter()
                .map(|(n, m)| (format!("stage2.{n}"), m)),
        );
        out.push(("w_out".to_string(), &self.w_out));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.stage1.blocks_mut();
        out.extend(self.stage2.blocks_mut());
        out.push(&mut self.w_out);
        out
    }
}

/// Intermediate values of a [`fuse_forward`] call.
#[derive(Clone, Debug)]
pub struct FusionCache {
    pub h_img_text: Vec<f64>,
    pub h_cross: Vec<f64>,
    stage1: Option<(Matrix, Matrix, MhaCache)>,
    stage2: Option<(Matrix, Matrix, MhaCache)>,
}

impl FusionCache {
    /// Per-head attention weights of stage 1 and stage 2, when run.
    pub fn stage_weights(&self) -> (Option<&[Matrix]>, Option<&[Matrix]>) {
        (
            self.stage1.as_ref().map(|s| s.2.weights.as_slice()),
            self.stage2.as_ref().map(|s| s.2.weights.as_slice()),
        )
    }
}

fn check_vec(op: &'static str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::shape(op, d, v.len()));
    }
    Ok(())
}

/// `h_img_text = MHA(h_cls, kv1, kv1)`, `h_cross = MHA(h_img_text, h_icl, h_icl)`.
///
/// A `None` stage input skips that stage and passes its query through.
pub fn fuse_forward(
    h_cls: &[f64],
    kv1: Option<&Matrix>,
    h_icl: Option<&[f64]>,
    params: &FusionParams,
) -> Result<FusionCache> {
    let d = params.dim();
    check_vec("fuse h_cls", h_cls, d)?;
    let q1 = Matrix::row_vector(h_cls);
    let (h_img_text, stage1) = match kv1 {
        Some(kv) => {
            let (out, cache) = mha_forward(&q1, kv, kv, &params.stage1)?;
            (out.into_data(), Some((q1, kv.clone(), cache)))
        }
        None => (h_cls.to_vec(), None),
    };
    let (h_cross, stage2) = match h_icl {
        Some(p) => {
            check_vec("fuse h_ICL", p, d)?;
            let q2 = Matrix::row_vector(&h_img_text);
            let kv = Matrix::row_vector(p);
            let (out, cache) = mha_forward(&q2, &kv, &kv, &params.stage2)?;
            (out.into_data(), Some((q2, kv, cache)))
        }
        None => (h_img_text.clone(), None),
    };
    Ok(FusionCache {
        h_img_text,
        h_cross,
        stage1,
        stage2,
    })
}

/// Two-stage fusion with single-row keys (the default path).
pub fn fuse(h_cls: &[f64], h_star_text: &[f64], h_icl: &[f64], params: &FusionParams) -> Result<Vec<f64>> {
    check_vec("fuse h*_text", h_star_text, params.dim())?;
    let kv = Matrix::row_vector(h_star_text);
    fuse_forward(h_cls, Some(&kv), Some(h_icl), params).map(|c| c.h_cross)
}

/// Input gradients from [`fuse_backward`].
pub struct FusionGrads {
    pub d_hcls: Vec<f64>,
    pub d_kv1: Option<Matrix>,
    pub d_hicl: Option<Vec<f64>>,
}

pub fn fuse_backward(
    params: &FusionParams,
    cache: &FusionCache,
    d_hcross: &[f64],
    grads: &mut FusionParams,
) -> FusionGrads {
    let (d_img_text, d_hicl) = match &cache.stage2 {
        Some((q, kv, c)) => {
            let (dq, dk, dv) = mha_backward(
                q,
                kv,
                kv,
                &params.stage2,
                c,
                &Matrix::row_vector(d_hcross),
                &mut grads.stage2,
            );
            (dq.into_data(), Some(dk.add(&dv).into_data()))
        }
        None => (d_hcross.to_vec(), None),
    };
    let (d_hcls, d_kv1) = match &cache.stage1 {
        Some((q, kv, c)) => {
            let (dq, dk, dv) = mha_backward(
                q,
                kv,
                kv,
                &params.stage1,
                c,
                &Matrix::row_vector(&d_img_text),
                &mut grads.stage1,
            );
            (dq.into_data(), Some(dk.add(&dv)))
        }
        None => (d_img_text, None),
    };
    FusionGrads {
        d_hcls,
        d_kv1,
        d_hicl,
    }
}

/// `softmax(h_cross W_out)`.
pub fn classify(h_cross: &[f64], w_out: &Matrix) -> Result<ProbVector> {
    softmax(&linear(h_cross, w_out, None)?)
}

/// Cross-entropy of the category head; returns `(loss, p, d h_cross)` and
/// accumulates `d W_out`.
pub(crate) fn head_loss(
    h_cross: &[f64],
    w_out: &Matrix,
    label: usize,
    d_w_out: &mut Matrix,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let logits = linear(h_cross, w_out, None)?;
    let (loss, dlogits, p) = softmax_cross_entropy(&logits, label);
    let dl = Matrix::row_vector(&dlogits);
    d_w_out.add_assign(&Matrix::row_vector(h_cross).t_mm(&dl));
    let dh = dl.mm_t(w_out).into_data();
    Ok((loss, p, dh))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcatHeadParams {
    pub w_cat: Matrix,
}

impl ConcatHeadParams {
    pub fn new(w_cat: Matrix) -> Result<Self> {
        if w_cat.rows() % 3 != 0 || w_cat.rows() == 0 {
            return Err(Error::invalid(format!(
                "concat head needs 3d rows, got {}",
                w_cat.rows()
            )));
        }
        Ok(Self { w_cat })
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            w_cat: Matrix::init_fan_in(3 * dim, classes, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_cat.rows() / 3
    }
}

impl Parameters for ConcatHeadParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        vec![("w_cat".to_string(), &self.w_cat)]
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_cat]
    }
}

fn concat3(a: &[f64], b: &[f64], c: &[f64], d: usize) -> Result<Vec<f64>> {
    check_vec("fuse_concat h_cls", a, d)?;
    check_vec("fuse_concat h*_text", b, d)?;
    check_vec("fuse_concat h_ICL", c, d)?;
    Ok([a, b, c].concat())
}

/// `softmax([h_cls | h*_text | h_ICL] W_cat)`.
pub fn fuse_concat(
    h_cls: &[f64],
    h_star_text: &[f64],
    h_icl: &[f64],
    params: &ConcatHeadParams,
) -> Result<ProbVector> {
    let x = concat3(h_cls, h_star_text, h_icl, params.dim())?;
    classify(&x, &params.w_cat)
}

/// Returns `(loss, p, d h_cls, d h*_text, d h_ICL)`.
pub(crate) fn concat_loss(
    h_cls: &[f64],
    h_star_text: &[f64],
    h_icl: &[f64],
    params: &ConcatHeadParams,
    label: usize,
    grads: &mut ConcatHeadParams,
) -> Result<(f64, Vec<f64>, [Vec<f64>; 3])> {
    let d = params.dim();
    let x = concat3(h_cls, h_star_text, h_icl, d)?;
    let (loss, p, dx) = head_loss(&x, &params.w_cat, label, &mut grads.w_cat)?;
    Ok((
        loss,
        p,
        [dx[..d].to_vec(), dx[d..2 * d].to_vec(), dx[2 * d..].to_vec()],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{flatten, grad_check, unflatten, zeros_like};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vecs(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn identity_projections_collapse_to_value_inputs() {
        let d = 3;
        let params = FusionParams {
            stage1: MhaParams::identity(d),
            stage2: MhaParams::identity(d),
            w_out: Matrix::zeros(d, 2),
        };
        let h_icl = [0.4, -0.2, 0.9];
        let out = fuse(&[1.0, 2.0, 3.0], &[-1.0, 0.0, 5.0], &h_icl, &params).unwrap();
        assert_eq!(out, h_icl);
    }

    #[test]
    fn reference_scale_shapes_and_unit_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = FusionParams::init(4, 64, 10, &mut rng).unwrap();
        let v = vecs(3, 64, &mut rng);
        let kv = Matrix::row_vector(&v[1]);
        let cache = fuse_forward(&v[0], Some(&kv), Some(&v[2]), &params).unwrap();
        assert_eq!(cache.h_cross.len(), 64);
        let (w1, w2) = cache.stage_weights();
        for w in w1.unwrap().iter().chain(w2.unwrap()) {
            assert_eq!(w.shape(), (1, 1));
            assert!((w.get(0, 0) - 1.0).abs() < 1e-12);
        }
        let p = classify(&cache.h_cross, &params.w_out).unwrap();
        assert_eq!(p.len(), 10);
    }

    #[test]
    fn two_stage_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = FusionParams::init(2, 4, 3, &mut rng).unwrap();
        let v = vecs(3, 4, &mut rng);
        // with one key each stage is concat_h(v W_V^h) W_O
        let single_key = |x: &[f64], p: &MhaParams| -> Vec<f64> {
            let mut cat = Vec::new();
            for h in 0..p.heads {
                for t in 0..p.head_dim {
                    cat.push((0..4).map(|j| x[j] * p.w_v[h].get(j, t)).sum::<f64>());
                }
            }
            (0..4)
                .map(|j| (0..4).map(|t| cat[t] * p.w_o.get(t, j)).sum())
                .collect()
        };
        let expect = single_key(&v[2], &params.stage2);
        let got = fuse(&v[0], &v[1], &v[2], &params).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
        let h1 = single_key(&v[1], &params.stage1);
        let cache = fuse_forward(&v[0], Some(&Matrix::row_vector(&v[1])), Some(&v[2]), &params).unwrap();
        for (a, b) in cache.h_img_text.iter().zip(&h1) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn classify_examples() {
        let p = classify(&[0.0; 4], &Matrix::zeros(4, 3)).unwrap();
        for v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::uniform(4, 3, 1.0, &mut rng);
        let x = [0.1, -0.4, 0.7, 0.3];
        let logits: Vec<f64> = (0..3)
            .map(|k| (0..4).map(|j| x[j] * w.get(j, k)).sum())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let p = classify(&x, &w).unwrap();
        for k in 0..3 {
            assert!((p.as_slice()[k] - logits[k].exp() / z).abs() < 1e-12);
        }
        assert!(classify(&x, &Matrix::zeros(5, 3)).is_err());
    }

    #[test]
    fn concat_head_examples() {
        let params = ConcatHeadParams::init(64, 10, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(params.w_cat.rows(), 192);
        let z = vec![0.0; 64];
        let p = fuse_concat(&z, &z, &z, &params).unwrap();
        assert!(p.as_slice().iter().all(|v| (v - 0.1).abs() < 1e-15));
        assert!(ConcatHeadParams::new(Matrix::zeros(7, 2)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ConcatHeadParams::init(2, 2, &mut rng);
        let (a, b, c) = ([0.5, -1.0], [0.2, 0.3], [1.0, 0.0]);
        let x = [0.5, -1.0, 0.2, 0.3, 1.0, 0.0];
        let l: Vec<f64> = (0..2)
            .map(|k| (0..6).map(|j| x[j] * params.w_cat.get(j, k)).sum())
            .collect();
        let p0 = l[0].exp() / (l[0].exp() + l[1].exp());
        let p = fuse_concat(&a, &b, &c, &params).unwrap();
        assert!((p.as_slice()[0] - p0).abs() < 1e-12);
    }

    #[test]
    fn fusion_gradients_pass_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = FusionParams::init(2, 4, 3, &mut rng).unwrap();
        let v = vecs(3, 4, &mut rng);
        let text = Matrix::uniform(3, 4, 1.0, &mut rng);
        for kv in [Matrix::row_vector(&v[1]), text] {
            let f = |t: &[f64]| {
                let mut p = params.clone();
                unflatten(&mut p, t);
                let mut g = zeros_like(&p);
                let cache = fuse_forward(&v[0], Some(&kv), Some(&v[2]), &p).unwrap();
                let (loss, _, dh) = head_loss(&cache.h_cross, &p.w_out, 1, &mut g.w_out).unwrap();
                fuse_backward(&p, &cache, &dh, &mut g);
                (loss, flatten(&g))
            };
            let r = grad_check(f, &flatten(&params), 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn fusion_input_gradients_pass_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = FusionParams::init(2, 4, 3, &mut rng).unwrap();
        let v = vecs(3, 4, &mut rng);
        let f = |x: &[f64]| {
            let kv = Matrix::row_vector(&x[4..8]);
            let mut g = zeros_like(&params);
            let cache = fuse_forward(&x[..4], Some(&kv), Some(&x[8..]), &params).unwrap();
            let (loss, _, dh) = head_loss(&cache.h_cross, &params.w_out, 0, &mut g.w_out).unwrap();
            let ig = fuse_backward(&params, &cache, &dh, &mut g);
            let mut out = ig.d_hcls;
            out.extend(ig.d_kv1.unwrap().into_data());
            out.extend(ig.d_hicl.unwrap());
            (loss, out)
        };
        let x: Vec<f64> = v.concat();
        assert!(grad_check(f, &x, 1e-5).unwrap().max_rel_error < 1e-4);
    }

    #[test]
    fn skipped_stages_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = FusionParams::init(1, 2, 2, &mut rng).unwrap();
        let c = fuse_forward(&[0.3, 0.4], None, None, &params).unwrap();
        assert_eq!(c.h_cross, vec![0.3, 0.4]);
        let g = fuse_backward(&params, &c, &[1.0, 2.0], &mut zeros_like(&params));
        assert_eq!(g.d_hcls, vec![1.0, 2.0]);
        assert!(g.d_kv1.is_none() && g.d_hicl.is_none());
    }
}
