use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::ops::{softmax_rows, softmax_rows_backward};
use super::params::Parameters;
use crate::error::{Error, Result};

/// Output and attention weights of a scaled dot-product attention call.
#[derive(Clone, Debug)]
pub struct Attention {
    pub output: Matrix,
    pub weights: Matrix,
}

/// `softmax(Q K^T / sqrt(d_k)) V`.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Attention> {
    if q.cols() != k.cols() {
        return Err(Error::shape("scaled_dot_attention Q/K cols", q.cols(), k.cols()));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape("scaled_dot_attention K/V rows", k.rows(), v.rows()));
    }
    if q.cols() == 0 {
        return Err(Error::invalid("key dimension must be at least 1"));
    }
    if k.rows() == 0 {
        return Err(Error::invalid("attention needs at least one key"));
    }
    Ok(attend(q, k, v))
}

pub(crate) fn attend(q: &Matrix, k: &Matrix, v: &Matrix) -> Attention {
    let mut scores = q.mm_t(k);
    scores.scale(1.0 / (q.cols() as f64).sqrt());
    let weights = softmax_rows(&scores);
    let output = weights.mm(v);
    Attention { output, weights }
}

/// Gradients of attention with respect to `(Q, K, V)`.
pub(crate) fn attend_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    weights: &Matrix,
    d_out: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let d_weights = d_out.mm_t(v);
    let dv = weights.t_mm(d_out);
    let mut d_scores = softmax_rows_backward(weights, &d_weights);
    d_scores.scale(scale);
    let dq = d_scores.mm(k);
    let dk = d_scores.t_mm(q);
    (dq, dk, dv)
}

/// Projection weights of a multi-head attention block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhaParams {
    pub heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    pub w_o: Matrix,
}

impl MhaParams {
    pub fn new(
        w_q: Vec<Matrix>,
        w_k: Vec<Matrix>,
        w_v: Vec<Matrix>,
        w_o: Matrix,
    ) -> Result<Self> {
        let heads = w_q.len();
        if heads == 0 || w_k.len() != heads || w_v.len() != heads {
            return Err(Error::invalid("need the same non-zero number of Q/K/V projections"));
        }
        let (model_dim, head_dim) = w_q[0].shape();
        if heads * head_dim != model_dim {
            return Err(Error::shape("MhaParams H*d_h", model_dim, heads * head_dim));
        }
        for m in w_q.iter().chain(&w_k).chain(&w_v) {
            if m.shape() != (model_dim, head_dim) {
                return Err(Error::shape(
                    "MhaParams projection",
                    format!("{model_dim}x{head_dim}"),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
        }
        if w_o.shape() != (heads * head_dim, model_dim) {
            return Err(Error::shape(
                "MhaParams W_O",
                format!("{}x{}", heads * head_dim, model_dim),
                format!("{}x{}", w_o.rows(), w_o.cols()),
            ));
        }
        Ok(Self {
            heads,
            model_dim,
            head_dim,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    /// Fan-in uniform initialization.
    pub fn init<R: Rng + ?Sized>(heads: usize, model_dim: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {model_dim} is not divisible by {heads} heads"
            )));
        }
        let head_dim = model_dim / heads;
        let proj = |rng: &mut R| {
            (0..heads)
                .map(|_| Matrix::init_fan_in(model_dim, head_dim, rng))
                .collect::<Vec<_>>()
        };
        let w_q = proj(rng);
        let w_k = proj(rng);
        let w_v = proj(rng);
        let w_o = Matrix::init_fan_in(heads * head_dim, model_dim, rng);
        Self::new(w_q, w_k, w_v, w_o)
    }

    /// Single head with every projection equal to the identity.
    pub fn identity(model_dim: usize) -> Self {
        let id = Matrix::identity(model_dim);
        Self {
            heads: 1,
            model_dim,
            head_dim: model_dim,
            w_q: vec![id.clone()],
            w_k: vec![id.clone()],
            w_v: vec![id.clone()],
            w_o: id,
        }
    }
}

impl Parameters for MhaParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (h, m) in self.w_q.iter().enumerate() {
            out.push((format!("w_q.{h}"), m));
        }
        for (h, m) in self.w_k.iter().enumerate() {
            out.push((format!("w_k.{h}"), m));
        }
        for (h, m) in self.w_v.iter().enumerate() {
            out.push((format!("w_v.{h}"), m));
        }
        out.push(("w_o".to_string(), &self.w_o));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        self.w_q
            .iter_mut()
            .chain(self.w_k.iter_mut())
            .chain(self.w_v.iter_mut())
            .chain(std::iter::once(&mut self.w_o))
            .collect()
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MhaCache {
    pub q_proj: Vec<Matrix>,
    pub k_proj: Vec<Matrix>,
    pub v_proj: Vec<Matrix>,
    pub weights: Vec<Matrix>,
    pub concat: Matrix,
}

/// `Concat(head_1..head_H) W_O` with `head_i = Attention(Q W_Qi, K W_Ki, V W_Vi)`.
pub fn multi_head_attention(q: &Matrix, k: &Matrix, v: &Matrix, params: &MhaParams) -> Result<Matrix> {
    mha_forward(q, k, v, params).map(|(out, _)| out)
}

pub fn mha_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    params: &MhaParams,
) -> Result<(Matrix, MhaCache)> {
    let d = params.model_dim;
    for (name, m) in [("Q", q), ("K", k), ("V", v)] {
        if m.cols() != d {
            return Err(Error::shape(
                match name {
                    "Q" => "multi_head_attention Q",
                    "K" => "multi_head_attention K",
                    _ => "multi_head_attention V",
                },
                d,
                m.cols(),
            ));
        }
    }
    if k.rows() != v.rows() {
        return Err(Error::shape("multi_head_attention K/V rows", k.rows(), v.rows()));
    }
    if k.rows() == 0 {
        return Err(Error::invalid("attention needs at least one key"));
    }
    let dh = params.head_dim;
    let mut concat = Matrix::zeros(q.rows(), params.heads * dh);
    let mut cache = MhaCache {
        q_proj: Vec::with_capacity(params.heads),
        k_proj: Vec::with_capacity(params.heads),
        v_proj: Vec::with_capacity(params.heads),
        weights: Vec::with_capacity(params.heads),
        concat: Matrix::zeros(0, 0),
    };
    for h in 0..params.heads {
        let qh = q.mm(&params.w_q[h]);
        let kh = k.mm(&params.w_k[h]);
        let vh = v.mm(&params.w_v[h]);
        let att = attend(&qh, &kh, &vh);
        concat.set_col_block(h * dh, &att.output);
        cache.q_proj.push(qh);
        cache.k_proj.push(kh);
        cache.v_proj.push(vh);
        cache.weights.push(att.weights);
    }
    let out = concat.mm(&params.w_o);
    cache.concat = concat;
    Ok((out, cache))
}

/// Accumulates parameter gradients into `grads` and returns `(dQ, dK, dV)`.
pub fn mha_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    params: &MhaParams,
    cache: &MhaCache,
    d_out: &Matrix,
    grads: &mut MhaParams,
) -> (Matrix, Matrix, Matrix) {
    let dh = params.head_dim;
    grads.w_o.add_assign(&cache.concat.t_mm(d_out));
    let d_concat = d_out.mm_t(&params.w_o);
    let mut dq = Matrix::zeros(q.rows(), q.cols());
    let mut dk = Matrix::zeros(k.rows(), k.cols());
    let mut dv = Matrix::zeros(v.rows(), v.cols());
    for h in 0..params.heads {
        let d_head = d_concat.col_block(h * dh, dh);
        let (dqh, dkh, dvh) = attend_backward(
            &cache.q_proj[h],
            &cache.k_proj[h],
            &cache.v_proj[h],
            &cache.weights[h],
            &d_head,
        );
        grads.w_q[h].add_assign(&q.t_mm(&dqh));
        grads.w_k[h].add_assign(&k.t_mm(&dkh));
        grads.w_v[h].add_assign(&v.t_mm(&dvh));
        dq.add_assign(&dqh.mm_t(&params.w_q[h]));
        dk.add_assign(&dkh.mm_t(&params.w_k[h]));
        dv.add_assign(&dvh.mm_t(&params.w_v[h]));
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::grad::grad_check;
    use crate::kernels::params::{flatten, unflatten, zeros_like};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_key_returns_value_row() {
        let q = Matrix::new(2, 3, vec![0.1, 0.2, 0.3, -1.0, 4.0, 0.0]).unwrap();
        let k = Matrix::new(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let v = Matrix::new(1, 2, vec![5.0, -2.0]).unwrap();
        let att = scaled_dot_attention(&q, &k, &v).unwrap();
        for r in 0..2 {
            assert_eq!(att.weights.row(r), &[1.0]);
            assert_eq!(att.output.row(r), &[5.0, -2.0]);
        }
    }

    #[test]
    fn uniform_scores_give_value_column_mean() {
        let q = Matrix::zeros(1, 2);
        let k = Matrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let v = Matrix::new(3, 2, vec![1.0, 10.0, 2.0, 20.0, 6.0, 60.0]).unwrap();
        let att = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!((att.output.get(0, 0) - 3.0).abs() < 1e-12);
        assert!((att.output.get(0, 1) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 4);
        assert!(matches!(
            scaled_dot_attention(&a, &b, &b),
            Err(Error::Shape { .. })
        ));
        let c = Matrix::zeros(3, 3);
        assert!(matches!(
            scaled_dot_attention(&a, &a, &c),
            Err(Error::Shape { .. })
        ));
        let p = MhaParams::identity(4);
        assert!(multi_head_attention(&a, &a, &a, &p).is_err());
    }

    #[test]
    fn mha_params_validate_shapes() {
        let m = Matrix::zeros(4, 2);
        assert!(MhaParams::new(vec![m.clone()], vec![m.clone()], vec![m.clone()], Matrix::zeros(2, 4)).is_err());
        assert!(MhaParams::new(
            vec![m.clone(), m.clone()],
            vec![m.clone(), m.clone()],
            vec![m.clone(), m.clone()],
            Matrix::zeros(4, 4)
        )
        .is_ok());
        assert!(MhaParams::init(3, 64, &mut rng(0)).is_err());
    }

    #[test]
    fn reference_scale_shape_round_trip() {
        let p = MhaParams::init(4, 64, &mut rng(1)).unwrap();
        assert_eq!(p.head_dim, 16);
        let x = Matrix::uniform(1, 64, 1.0, &mut rng(2));
        let out = multi_head_attention(&x, &x, &x, &p).unwrap();
        assert_eq!(out.shape(), (1, 64));
    }

    #[test]
    fn mha_gradients_pass_finite_difference_check() {
        let params = MhaParams::init(2, 4, &mut rng(7)).unwrap();
        let q = Matrix::uniform(2, 4, 1.0, &mut rng(8));
        let kv = Matrix::uniform(3, 4, 1.0, &mut rng(9));
        let probe = Matrix::uniform(2, 4, 1.0, &mut rng(10));
        let theta = flatten(&params);
        let f = |t: &[f64]| {
            let mut p = params.clone();
            unflatten(&mut p, t);
            let (out, cache) = mha_forward(&q, &kv, &kv, &p).unwrap();
            let loss: f64 = out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
            let mut g = zeros_like(&p);
            mha_backward(&q, &kv, &kv, &p, &cache, &probe, &mut g);
            (loss, flatten(&g))
        };
        let report = grad_check(f, &theta, 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn mha_input_gradients_pass_finite_difference_check() {
        let params = MhaParams::init(2, 4, &mut rng(17)).unwrap();
        let x = Matrix::uniform(3, 4, 1.0, &mut rng(18));
        let probe = Matrix::uniform(3, 4, 1.0, &mut rng(19));
        let f = |t: &[f64]| {
            let x = Matrix::new(3, 4, t.to_vec()).unwrap();
            let (out, cache) = mha_forward(&x, &x, &x, &params).unwrap();
            let loss: f64 = out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
            let mut g = zeros_like(&params);
            let (dq, dk, dv) = mha_backward(&x, &x, &x, &params, &cache, &probe, &mut g);
            (loss, dq.add(&dk).add(&dv).into_data())
        };
        let report = grad_check(f, x.data(), 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
