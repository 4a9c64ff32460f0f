//! Image-to-text alignment: multi-head attention from `h_cls` over the class
//! text matrix, cosine similarity per category and best-match selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    argmax, dot, norm, softmax_backward, softmax_cross_entropy, softmax_unchecked, Matrix,
    MhaParams, Parameters,
};
use crate::text::ClassTextMatrix;

const COS_FLOOR: f64 = 1e-12;

/// Alignment projections. Inside `proj`, `w_q` projects `h_cls` and
/// `w_k`/`w_v` project the text rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignParams {
    pub proj: MhaParams,
}

impl AlignParams {
    pub fn init<R: Rng + ?Sized>(heads: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj: MhaParams::init(heads, dim, rng)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.proj.heads
    }

    pub fn dim(&self) -> usize {
        self.proj.model_dim
    }
}

impl Parameters for AlignParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        self.proj.blocks()
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        self.proj.blocks_mut()
    }
}

/// How attention weights turn value rows into `O_text`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    /// Each value row is scaled by its weight; `O_text` keeps one row per category.
    #[default]
    Diagonal,
    /// Weighted sum of value rows; `O_text` is a single row compared against
    /// every text row. Forward only.
    Collapsed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub o_text: Matrix,
    pub sim: Vec<f64>,
    pub i_star: usize,
    pub h_star_text: Vec<f64>,
    /// One `1 x c` weight row per head.
    pub weights: Vec<Vec<f64>>,
}

/// Forward state for [`align_backward`].
#[derive(Clone, Debug)]
pub struct AlignCache {
    q: Vec<Vec<f64>>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    concat: Matrix,
    raw_sim: Vec<f64>,
}

pub(crate) fn cosine(a: &[f64], b: &[f64], row: usize) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na < COS_FLOOR || nb < COS_FLOOR {
        return Err(Error::DegenerateSimilarity { row });
    }
    Ok(dot(a, b) / (na * nb))
}

/// `(d cos / d a, d cos / d b)`.
fn cosine_grad(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    let c = dot(a, b) / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - c * x / (na * na))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / (na * nb) - c * y / (nb * nb))
        .collect();
    (da, db)
}

fn check_dims(h_cls: &[f64], text: &ClassTextMatrix, params: &AlignParams) -> Result<()> {
    let d = params.dim();
    if h_cls.len() != d {
        return Err(Error::shape("align h_cls", d, h_cls.len()));
    }
    if text.dim() != d {
        return Err(Error::shape("align text dim", d, text.dim()));
    }
    if text.num_classes() == 0 {
        return Err(Error::invalid("align needs at least one category"));
    }
    Ok(())
}

pub fn align(h_cls: &[f64], text: &ClassTextMatrix, params: &AlignParams) -> Result<AlignmentResult> {
    align_forward(h_cls, text, params).map(|(r, _)| r)
}

pub fn align_with_mode(
    h_cls: &[f64],
    text: &ClassTextMatrix,
    params: &AlignParams,
    mode: AlignMode,
) -> Result<AlignmentResult> {
    match mode {
        AlignMode::Diagonal => align(h_cls, text, params),
        AlignMode::Collapsed => align_collapsed(h_cls, text, params),
    }
}

pub fn align_forward(
    h_cls: &[f64],
    text: &ClassTextMatrix,
    params: &AlignParams,
) -> Result<(AlignmentResult, AlignCache)> {
    check_dims(h_cls, text, params)?;
    let p = &params.proj;
    let c = text.num_classes();
    let dh = p.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let hm = Matrix::row_vector(h_cls);
    let mut concat = Matrix::zeros(c, p.heads * dh);
    let mut cache = AlignCache {
        q: Vec::with_capacity(p.heads),
        k: Vec::with_capacity(p.heads),
        v: Vec::with_capacity(p.heads),
        concat: Matrix::zeros(0, 0),
        raw_sim: Vec::new(),
    };
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let q = hm.mm(&p.w_q[h]).into_data();
        let k = text.rows.mm(&p.w_k[h]);
        let v = text.rows.mm(&p.w_v[h]);
        let scores: Vec<f64> = (0..c).map(|i| dot(&q, k.row(i)) * scale).collect();
        let a = softmax_unchecked(&scores);
        for i in 0..c {
            let dst = &mut concat.row_mut(i)[h * dh..(h + 1) * dh];
            for (o, x) in dst.iter_mut().zip(v.row(i)) {
                *o = a[i] * x;
            }
        }
        cache.q.push(q);
        cache.k.push(k);
        cache.v.push(v);
        weights.push(a);
    }
    let o_text = concat.mm(&p.w_o);
    let mut raw_sim = Vec::with_capacity(c);
    for i in 0..c {
        raw_sim.push(cosine(o_text.row(i), h_cls, i)?);
    }
    let sim: Vec<f64> = raw_sim.iter().map(|s| s.clamp(-1.0, 1.0)).collect();
    let i_star = argmax(&sim);
    cache.concat = concat;
    cache.raw_sim = raw_sim;
    Ok((
        AlignmentResult {
            o_text,
            h_star_text: text.rows.row(i_star).to_vec(),
            sim,
            i_star,
            weights,
        },
        cache,
    ))
}

fn align_collapsed(
    h_cls: &[f64],
    text: &ClassTextMatrix,
    params: &AlignParams,
) -> Result<AlignmentResult> {
    check_dims(h_cls, text, params)?;
    let p = &params.proj;
    let c = text.num_classes();
    let dh = p.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let hm = Matrix::row_vector(h_cls);
    let mut concat = Matrix::zeros(1, p.heads * dh);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let q = hm.mm(&p.w_q[h]).into_data();
        let k = text.rows.mm(&p.w_k[h]);
        let v = text.rows.mm(&p.w_v[h]);
        let scores: Vec<f64> = (0..c).map(|i| dot(&q, k.row(i)) * scale).collect();
        let a = softmax_unchecked(&scores);
        let dst = &mut concat.row_mut(0)[h * dh..(h + 1) * dh];
        for i in 0..c {
            for (o, x) in dst.iter_mut().zip(v.row(i)) {
                *o += a[i] * x;
            }
        }
        weights.push(a);
    }
    let o_text = concat.mm(&p.w_o);
    let mut sim = Vec::with_capacity(c);
    for i in 0..c {
        sim.push(cosine(o_text.row(0), text.rows.row(i), i)?.clamp(-1.0, 1.0));
    }
    let i_star = argmax(&sim);
    Ok(AlignmentResult {
        o_text,
        h_star_text: text.rows.row(i_star).to_vec(),
        sim,
        i_star,
        weights,
    })
}

/// Gradients produced by [`align_backward`].
pub struct AlignGrads {
    pub d_hcls: Vec<f64>,
    pub d_text: Matrix,
}

/// Backpropagates `d_sim` (gradient w.r.t. the unclamped similarities);
/// parameter gradients are accumulated into `grads`.
pub fn align_backward(
    h_cls: &[f64],
    text: &ClassTextMatrix,
    params: &AlignParams,
    result: &AlignmentResult,
    cache: &AlignCache,
    d_sim: &[f64],
    grads: &mut AlignParams,
) -> AlignGrads {
    let p = &params.proj;
    let c = text.num_classes();
    let d = p.model_dim;
    let dh = p.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_hcls = vec![0.0; d];
    let mut d_o = Matrix::zeros(c, d);
    for i in 0..c {
        if d_sim[i] == 0.0 {
            continue;
        }
        let (da, db) = cosine_grad(result.o_text.row(i), h_cls);
        for (o, g) in d_o.row_mut(i).iter_mut().zip(&da) {
            *o = d_sim[i] * g;
        }
        for (o, g) in d_hcls.iter_mut().zip(&db) {
            *o += d_sim[i] * g;
        }
    }
    grads.proj.w_o.add_assign(&cache.concat.t_mm(&d_o));
    let d_concat = d_o.mm_t(&p.w_o);
    let hm = Matrix::row_vector(h_cls);
    let mut d_text = Matrix::zeros(c, d);
    for h in 0..p.heads {
        let a = &result.weights[h];
        let (q, k, v) = (&cache.q[h], &cache.k[h], &cache.v[h]);
        let mut dv = Matrix::zeros(c, dh);
        let mut da = vec![0.0; c];
        for i in 0..c {
            let du = &d_concat.row(i)[h * dh..(h + 1) * dh];
            da[i] = dot(du, v.row(i));
            for (o, g) in dv.row_mut(i).iter_mut().zip(du) {
                *o = a[i] * g;
            }
        }
        let ds = softmax_backward(a, &da);
        let mut dq = vec![0.0; dh];
        let mut dk = Matrix::zeros(c, dh);
        for i in 0..c {
            for t in 0..dh {
                dq[t] += ds[i] * k.get(i, t) * scale;
            }
            for (o, x) in dk.row_mut(i).iter_mut().zip(q) {
                *o = ds[i] * x * scale;
            }
        }
        let dqm = Matrix::row_vector(&dq);
        grads.proj.w_q[h].add_assign(&hm.t_mm(&dqm));
        grads.proj.w_k[h].add_assign(&text.rows.t_mm(&dk));
        grads.proj.w_v[h].add_assign(&text.rows.t_mm(&dv));
        for (o, g) in d_hcls.iter_mut().zip(dqm.mm_t(&p.w_q[h]).data()) {
            *o += g;
        }
        d_text.add_assign(&dk.mm_t(&p.w_k[h]));
        d_text.add_assign(&dv.mm_t(&p.w_v[h]));
    }
    AlignGrads { d_hcls, d_text }
}

/// Differentiable stand-in for argmax selection: cross-entropy of
/// `softmax(Sim / tau)` against the true category.
///
/// Returns the loss and `d loss / d Sim`.
pub fn alignment_surrogate(cache: &AlignCache, label: usize, tau: f64) -> (f64, Vec<f64>) {
    let logits: Vec<f64> = cache.raw_sim.iter().map(|s| s / tau).collect();
    let (loss, d_logits, _) = softmax_cross_entropy(&logits, label);
    (loss, d_logits.iter().map(|g| g / tau).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{flatten, grad_check, unflatten, zeros_like};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture(c: usize, d: usize, heads: usize, seed: u64) -> (Vec<f64>, ClassTextMatrix, AlignParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rows = Matrix::uniform(c, d, 1.0, &mut rng);
        let text = ClassTextMatrix {
            labels: (0..c).map(|i| format!("c{i}")).collect(),
            rows,
        };
        let params = AlignParams::init(heads, d, &mut rng).unwrap();
        (h, text, params)
    }

    #[test]
    fn single_category() {
        let (h, text, params) = fixture(1, 4, 2, 1);
        let r = align(&h, &text, &params).unwrap();
        assert_eq!(r.weights, vec![vec![1.0], vec![1.0]]);
        assert_eq!(r.i_star, 0);
        assert_eq!(r.h_star_text, text.rows.row(0));
    }

    #[test]
    fn matches_step_by_step_oracle() {
        let (h, text, params) = fixture(3, 4, 2, 7);
        let r = align(&h, &text, &params).unwrap();
        let p = &params.proj;
        // explicit loops over every index, no shared helpers
        let mut u = vec![vec![0.0; 4]; 3];
        for head in 0..2 {
            let mut q = [0.0; 2];
            for t in 0..2 {
                for j in 0..4 {
                    q[t] += h[j] * p.w_q[head].get(j, t);
                }
            }
            let mut kk = [[0.0; 2]; 3];
            let mut vv = [[0.0; 2]; 3];
            for i in 0..3 {
                for t in 0..2 {
                    for j in 0..4 {
                        kk[i][t] += text.rows.get(i, j) * p.w_k[head].get(j, t);
                        vv[i][t] += text.rows.get(i, j) * p.w_v[head].get(j, t);
                    }
                }
            }
            let s: Vec<f64> = (0..3)
                .map(|i| (q[0] * kk[i][0] + q[1] * kk[i][1]) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for i in 0..3 {
                let a = s[i].exp() / z;
                assert!((r.weights[head][i] - a).abs() < 1e-12);
                for t in 0..2 {
                    u[i][head * 2 + t] = a * vv[i][t];
                }
            }
        }
        for i in 0..3 {
            let mut o = [0.0; 4];
            for j in 0..4 {
                for t in 0..4 {
                    o[j] += u[i][t] * p.w_o.get(t, j);
                }
                assert!((r.o_text.get(i, j) - o[j]).abs() < 1e-10);
            }
            let num: f64 = (0..4).map(|j| o[j] * h[j]).sum();
            let no: f64 = o.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nh: f64 = h.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((r.sim[i] - num / (no * nh)).abs() < 1e-10);
        }
        let best = (0..3).fold(0, |b, i| if r.sim[i] > r.sim[b] { i } else { b });
        assert_eq!(r.i_star, best);
        assert_eq!(r.h_star_text, text.rows.row(best));
    }

    #[test]
    fn cosine_stage_is_scale_invariant() {
        let (h, _, _) = fixture(1, 4, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let o = Matrix::uniform(5, 4, 1.0, &mut rng);
        let sims = |o: &Matrix, h: &[f64]| -> Vec<f64> {
            (0..o.rows()).map(|i| cosine(o.row(i), h, i).unwrap()).collect()
        };
        let base = argmax(&sims(&o, &h));
        let mut scaled = o.clone();
        for i in 0..5 {
            let s = 0.1 + i as f64 * 3.0;
            scaled.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let hs: Vec<f64> = h.iter().map(|x| x * 17.0).collect();
        assert_eq!(argmax(&sims(&scaled, &hs)), base);
    }

    #[test]
    fn zero_text_row_is_degenerate() {
        let (h, mut text, params) = fixture(3, 4, 2, 5);
        text.rows.row_mut(1).fill(0.0);
        match align(&h, &text, &params) {
            Err(Error::DegenerateSimilarity { row }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn collapsed_mode_compares_one_row_to_each_category() {
        let (h, text, params) = fixture(3, 4, 2, 9);
        let r = align_with_mode(&h, &text, &params, AlignMode::Collapsed).unwrap();
        assert_eq!(r.o_text.shape(), (1, 4));
        assert_eq!(r.sim.len(), 3);
        for (i, s) in r.sim.iter().enumerate() {
            let expect = cosine(r.o_text.row(0), text.rows.row(i), i).unwrap();
            assert!((s - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn surrogate_gradients_pass_check() {
        let (h, text, params) = fixture(3, 4, 2, 11);
        let label = 2;
        let loss_and_grads = |p: &AlignParams, h: &[f64], t: &ClassTextMatrix| {
            let (r, cache) = align_forward(h, t, p).unwrap();
            let (loss, d_sim) = alignment_surrogate(&cache, label, 1.0);
            let mut g = zeros_like(p);
            let ig = align_backward(h, t, p, &r, &cache, &d_sim, &mut g);
            (loss, g, ig)
        };
        let theta = flatten(&params);
        let f = |t: &[f64]| {
            let mut p = params.clone();
            unflatten(&mut p, t);
            let (loss, g, _) = loss_and_grads(&p, &h, &text);
            (loss, flatten(&g))
        };
        let rep = grad_check(f, &theta, 1e-5).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");

        let fh = |x: &[f64]| {
            let (loss, _, ig) = loss_and_grads(&params, x, &text);
            (loss, ig.d_hcls)
        };
        assert!(grad_check(fh, &h, 1e-5).unwrap().max_rel_error < 1e-4);

        let ft = |x: &[f64]| {
            let t = ClassTextMatrix {
                labels: text.labels.clone(),
                rows: Matrix::new(3, 4, x.to_vec()).unwrap(),
            };
            let (loss, _, ig) = loss_and_grads(&params, &h, &t);
            (loss, ig.d_text.into_data())
        };
        assert!(grad_check(ft, text.rows.data(), 1e-5).unwrap().max_rel_error < 1e-4);
    }
}
