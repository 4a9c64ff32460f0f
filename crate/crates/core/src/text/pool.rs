use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embed::{embed_tokens, Embedder, TokenEmbeddingMatrix};
use super::llm::Transcript;
use crate::error::{Error, Result};
use crate::kernels::{dot, softmax_backward, softmax_unchecked, Matrix, Parameters};

/// Pooled text embedding with its (inspectable) token weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    pub h_text: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// `alpha = softmax(h u)`, `h_text = sum_j alpha_j h_j`.
pub fn attention_pool(h_expl: &Matrix, u: &[f64]) -> Result<Pooled> {
    if h_expl.rows() == 0 {
        return Err(Error::invalid("attention_pool needs at least one token"));
    }
    if u.len() != h_expl.cols() {
        return Err(Error::shape("attention_pool u", h_expl.cols(), u.len()));
    }
    let q: Vec<f64> = (0..h_expl.rows()).map(|j| dot(h_expl.row(j), u)).collect();
    let alpha = softmax_unchecked(&q);
    let mut h_text = vec![0.0; h_expl.cols()];
    for (j, a) in alpha.iter().enumerate() {
        for (o, v) in h_text.iter_mut().zip(h_expl.row(j)) {
            *o += a * v;
        }
    }
    Ok(Pooled { h_text, alpha })
}

/// Returns `(d h_expl, d u)`.
pub fn attention_pool_backward(
    h_expl: &Matrix,
    u: &[f64],
    alpha: &[f64],
    d_htext: &[f64],
) -> (Matrix, Vec<f64>) {
    let d_alpha: Vec<f64> = (0..h_expl.rows())
        .map(|j| dot(h_expl.row(j), d_htext))
        .collect();
    let dq = softmax_backward(alpha, &d_alpha);
    let mut du = vec![0.0; u.len()];
    let mut dh = Matrix::zeros(h_expl.rows(), h_expl.cols());
    for j in 0..h_expl.rows() {
        let row = h_expl.row(j);
        for k in 0..u.len() {
            du[k] += dq[j] * row[k];
        }
        let out = dh.row_mut(j);
        for k in 0..u.len() {
            out[k] = alpha[j] * d_htext[k] + dq[j] * u[k];
        }
    }
    (dh, du)
}

/// Trainable text-side parameters: pooling vector and token embedder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextParams {
    pub u: Matrix,
    pub embedder: Embedder,
}

impl TextParams {
    pub fn init<R: Rng + ?Sized>(embedder: Embedder, rng: &mut R) -> Self {
        let d = embedder.dim();
        Self {
            u: Matrix::init_fan_in(d, 1, rng).transpose(),
            embedder,
        }
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }
}

impl Parameters for TextParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("u".to_string(), &self.u)];
        if let Some(w) = self.embedder.weights() {
            out.push(("token_table".to_string(), w));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.u];
        if let Some(w) = self.embedder.weights_mut() {
            out.push(w);
        }
        out
    }
}

/// Per-category text embeddings stacked in category-index order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTextMatrix {
    pub labels: Vec<String>,
    pub rows: Matrix,
}

impl ClassTextMatrix {
    pub fn num_classes(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }
}

/// Forward state for [`class_text_backward`].
pub struct ClassTextCache {
    embedded: Vec<TokenEmbeddingMatrix>,
    alphas: Vec<Vec<f64>>,
}

impl ClassTextCache {
    pub fn alphas(&self) -> &[Vec<f64>] {
        &self.alphas
    }
}

/// Orders transcripts by `categories`; errors list every category without one.
pub fn order_transcripts<'a>(
    transcripts: &'a [Transcript],
    categories: &[String],
) -> Result<Vec<&'a Transcript>> {
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(categories.len());
    for c in categories {
        match transcripts
            .iter()
            .find(|t| t.subject.eq_ignore_ascii_case(c))
        {
            Some(t) => out.push(t),
            None => missing.push(c.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "missing transcripts for categories: {}",
            missing.join(", ")
        )));
    }
    Ok(out)
}

pub fn build_class_text_matrix(
    transcripts: &[Transcript],
    categories: &[String],
    params: &TextParams,
) -> Result<ClassTextMatrix> {
    build_class_text_forward(transcripts, categories, params).map(|(m, _)| m)
}

pub fn build_class_text_forward(
    transcripts: &[Transcript],
    categories: &[String],
    params: &TextParams,
) -> Result<(ClassTextMatrix, ClassTextCache)> {
    let ordered = order_transcripts(transcripts, categories)?;
    let d = params.dim();
    if params.u.cols() != d {
        return Err(Error::shape("class text u", d, params.u.cols()));
    }
    let mut rows = Matrix::zeros(categories.len(), d);
    let mut cache = ClassTextCache {
        embedded: Vec::with_capacity(categories.len()),
        alphas: Vec::with_capacity(categories.len()),
    };
    for (i, t) in ordered.iter().enumerate() {
        let emb = embed_tokens(&t.full_text(), &params.embedder, d)?;
        let pooled = attention_pool(&emb.data, params.u.data())?;
        rows.row_mut(i).copy_from_slice(&pooled.h_text);
        cache.embedded.push(emb);
        cache.alphas.push(pooled.alpha);
    }
    Ok((
        ClassTextMatrix {
            labels: categories.to_vec(),
            rows,
        },
        cache,
    ))
}

/// Accumulates gradients of `u` and (for a table embedder) token rows.
pub fn class_text_backward(
    params: &TextParams,
    cache: &ClassTextCache,
    d_rows: &Matrix,
    grads: &mut TextParams,
) {
    for (i, emb) in cache.embedded.iter().enumerate() {
        let d_row = d_rows.row(i);
        if d_row.iter().all(|&g| g == 0.0) {
            continue;
        }
        let (dh, du) = attention_pool_backward(&emb.data, params.u.data(), &cache.alphas[i], d_row);
        for (g, v) in grads.u.data_mut().iter_mut().zip(&du) {
            *g += v;
        }
        if let Some(w) = grads.embedder.weights_mut() {
            for (j, src) in emb.table_rows.iter().enumerate() {
                if let Some(r) = src {
                    for (g, v) in w.row_mut(*r).iter_mut().zip(dh.row(j)) {
                        *g += v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{flatten, grad_check, unflatten, zeros_like};
    use crate::text::embed::{HashEmbedder, TokenTable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn transcript(subject: &str, text: &str) -> Transcript {
        Transcript {
            family: "nanomaterial".into(),
            subject: subject.into(),
            prompts: vec!["p".into()],
            provider: "test".into(),
            responses: vec![text.into()],
            retrieved_at: 0,
        }
    }

    #[test]
    fn single_token_pool() {
        let h = Matrix::new(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let p = attention_pool(&h, &[0.3, 0.3, 0.3]).unwrap();
        assert_eq!(p.alpha, vec![1.0]);
        assert_eq!(p.h_text, vec![1.0, -2.0, 0.5]);
        assert!(attention_pool(&Matrix::zeros(0, 3), &[0.0; 3]).is_err());
        assert!(attention_pool(&h, &[0.0; 2]).is_err());
    }

    #[test]
    fn identical_rows_pool_to_that_row() {
        let h = Matrix::from_rows(&[vec![0.2, 0.4], vec![0.2, 0.4], vec![0.2, 0.4]]).unwrap();
        let p = attention_pool(&h, &[5.0, -3.0]).unwrap();
        for (a, b) in p.h_text.iter().zip([0.2, 0.4]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_matches_explicit_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = Matrix::uniform(3, 2, 1.0, &mut rng);
        let u = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let q: Vec<f64> = (0..3).map(|j| h.get(j, 0) * u[0] + h.get(j, 1) * u[1]).collect();
        let e: Vec<f64> = q.iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let p = attention_pool(&h, &u).unwrap();
        for k in 0..2 {
            let expect: f64 = (0..3).map(|j| e[j] / z * h.get(j, k)).sum();
            assert!((p.h_text[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_category_listed() {
        let ts = vec![transcript("films", "thin film layers")];
        let params = TextParams::init(
            Embedder::Hash(HashEmbedder { dim: 4, seed: 0 }),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let cats = vec!["films".to_string(), "tips".into(), "powder".into()];
        match build_class_text_matrix(&ts, &cats, &params) {
            Err(Error::Config(msg)) => assert!(msg.contains("tips, powder"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn disjoint_vocabularies_give_distinct_rows() {
        let ts = vec![
            transcript("a", "porous sponge network voids"),
            transcript("b", "sharp tip apex cone"),
        ];
        let params = TextParams::init(
            Embedder::Hash(HashEmbedder { dim: 6, seed: 3 }),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let cats = vec!["a".to_string(), "b".into()];
        let m = build_class_text_matrix(&ts, &cats, &params).unwrap();
        assert_eq!(m.rows.shape(), (2, 6));
        for (i, t) in ts.iter().enumerate() {
            let emb = embed_tokens(&t.full_text(), &params.embedder, 6).unwrap();
            let p = attention_pool(&emb.data, params.u.data()).unwrap();
            assert_eq!(m.rows.row(i), p.h_text.as_slice());
        }
        assert_ne!(m.rows.row(0), m.rows.row(1));
    }

    #[test]
    fn pool_gradient_wrt_u_and_table() {
        let hash = HashEmbedder { dim: 4, seed: 5 };
        let table = TokenTable::from_corpus(["grain boundary defect"], hash);
        let params = TextParams::init(Embedder::Table(table), &mut ChaCha8Rng::seed_from_u64(2));
        let ts = vec![transcript("x", "grain boundary defect")];
        let cats = vec!["x".to_string()];
        let probe = [0.3, -0.7, 1.1, 0.2];
        let theta = flatten(&params);
        let f = |t: &[f64]| {
            let mut p = params.clone();
            unflatten(&mut p, t);
            let (m, cache) = build_class_text_forward(&ts, &cats, &p).unwrap();
            let loss: f64 = m.rows.row(0).iter().zip(&probe).map(|(a, b)| a * b).sum();
            let mut g = zeros_like(&p);
            class_text_backward(&p, &cache, &Matrix::row_vector(&probe), &mut g);
            (loss, flatten(&g))
        };
        let r = grad_check(f, &theta, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
