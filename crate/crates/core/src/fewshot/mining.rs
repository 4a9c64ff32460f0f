//! Unsupervised search for confounding micrographs: z-score, PCA, k-means and
//! silhouette diagnostics.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::kernels::Matrix;

/// Flattened, column-standardized image features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub data: Matrix,
    /// Columns whose variance was zero; they are left at 0 after centering.
    pub degenerate: Vec<usize>,
}

const VAR_FLOOR: f64 = 1e-24;

pub fn zscore_flatten(ids: &[String], images: &[ImageTensor]) -> Result<FeatureMatrix> {
    if images.is_empty() {
        return Err(Error::invalid("zscore_flatten needs at least one image"));
    }
    if ids.len() != images.len() {
        return Err(Error::shape("zscore_flatten ids", images.len(), ids.len()));
    }
    let (h, w, c) = (images[0].height, images[0].width, images[0].channels);
    let d = h * w * c;
    let mut data = Vec::with_capacity(images.len() * d);
    for (i, img) in images.iter().enumerate() {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::invalid(format!(
                "image {} is {}x{}x{}, expected {h}x{w}x{c}",
                ids[i], img.height, img.width, img.channels
            )));
        }
        data.extend_from_slice(&img.data);
    }
    let mut m = Matrix::new(images.len(), d, data)?;
    let degenerate = zscore_columns(&mut m);
    Ok(FeatureMatrix {
        ids: ids.to_vec(),
        data: m,
        degenerate,
    })
}

/// Standardizes columns in place (population variance); returns the
/// zero-variance columns, which end up all zero.
pub fn zscore_columns(m: &mut Matrix) -> Vec<usize> {
    let (n, d) = m.shape();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (s, x) in mean.iter_mut().zip(m.row(i)) {
            *s += x;
        }
    }
    mean.iter_mut().for_each(|s| *s /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((v, x), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
            *v += (x - mu) * (x - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    let degenerate: Vec<usize> = (0..d).filter(|&j| var[j] <= VAR_FLOOR).collect();
    for i in 0..n {
        let row = m.row_mut(i);
        for j in 0..d {
            row[j] = if var[j] <= VAR_FLOOR {
                0.0
            } else {
                (row[j] - mean[j]) / var[j].sqrt()
            };
        }
    }
    degenerate
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    /// `N x k` scores.
    pub projected: Matrix,
    /// `D x k` unit principal axes.
    pub components: Matrix,
    /// Fraction of total variance per kept component, non-increasing.
    pub explained: Vec<f64>,
}

/// Projects centered data onto its top-`k` principal axes.
///
/// Uses the `N x N` Gram matrix when `N < D` and the `D x D` covariance
/// otherwise. Each axis is signed so its largest-magnitude entry is positive.
pub fn pca(x: &Matrix, k: usize) -> Result<PcaResult> {
    let (n, d) = x.shape();
    if k == 0 || k > n.min(d) {
        return Err(Error::invalid(format!(
            "pca k={k} outside 1..={}",
            n.min(d)
        )));
    }
    let mut xc = x.clone();
    for j in 0..d {
        let mu = (0..n).map(|i| xc.get(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            xc.set(i, j, xc.get(i, j) - mu);
        }
    }
    let gram_route = n < d;
    let small = if gram_route { xc.mm_t(&xc) } else { xc.t_mm(&xc) };
    let s = small.rows();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(s, s, small.data()));
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();

    let mut components = Matrix::zeros(d, k);
    let mut explained = Vec::with_capacity(k);
    for (col, &e) in order.iter().take(k).enumerate() {
        let lambda = eig.eigenvalues[e].max(0.0);
        explained.push(if total > 0.0 { lambda / total } else { 0.0 });
        let axis: Vec<f64> = if gram_route {
            if lambda <= 1e-12 * total.max(1e-300) {
                vec![0.0; d]
            } else {
                let u: Vec<f64> = (0..n).map(|i| eig.eigenvectors[(i, e)]).collect();
                let inv = 1.0 / lambda.sqrt();
                (0..d)
                    .map(|j| (0..n).map(|i| xc.get(i, j) * u[i]).sum::<f64>() * inv)
                    .collect()
            }
        } else {
            (0..d).map(|j| eig.eigenvectors[(j, e)]).collect()
        };
        let pivot = axis
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (j, v) in axis.iter().enumerate() {
            components.set(j, col, sign * v);
        }
    }
    let projected = xc.mm(&components);
    Ok(PcaResult {
        projected,
        components,
        explained,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Per-sample silhouette; empty when fewer than two clusters are populated.
    pub silhouette: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(x: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    (0..x.rows()).map(|i| nearest(x.row(i), centroids)).unzip()
}

fn plus_plus_init(x: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = x.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // every point coincides with a chosen centroid
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    let mut c = Matrix::zeros(k, x.cols());
    for (r, &i) in chosen.iter().enumerate() {
        c.row_mut(r).copy_from_slice(x.row(i));
    }
    c
}

/// Lloyd's algorithm with k-means++ seeding. An empty cluster is re-seeded at
/// the point farthest from its current centroid.
pub fn kmeans(x: &Matrix, k: usize, seed: u64, max_iters: usize) -> Result<ClusterModel> {
    let (n, d) = x.shape();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("kmeans K={k} outside 1..={n}")));
    }
    if max_iters == 0 {
        return Err(Error::invalid("kmeans needs max_iters >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(x, k, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iters {
        iterations = it + 1;
        let (next, dists) = assign(x, &centroids);
        history.push(dists.iter().sum());
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let mut taken = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken.push(far);
                centroids.row_mut(c).copy_from_slice(x.row(far));
            }
        }
    }
    if !converged {
        let (next, dists) = assign(x, &centroids);
        history.push(dists.iter().sum());
        assignments = next;
    }
    let inertia = *history.last().unwrap_or(&0.0);
    let populated = {
        let mut seen = assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    };
    let silhouette = if populated >= 2 {
        silhouette(x, &assignments)?
    } else {
        Vec::new()
    };
    Ok(ClusterModel {
        k,
        centroids,
        assignments,
        inertia,
        inertia_history: history,
        iterations,
        converged,
        silhouette,
    })
}

/// `s(i) = (b - a) / max(a, b)` with Euclidean distances; singletons score 0.
pub fn silhouette(x: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    let n = x.rows();
    if labels.len() != n {
        return Err(Error::shape("silhouette labels", n, labels.len()));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::invalid("silhouette needs at least two clusters"));
    }
    let mut out = vec![0.0; n];
    let mut sums = vec![0.0; k];
    for i in 0..n {
        if sizes[labels[i]] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[labels[j]] += sq_dist(x.row(i), x.row(j)).sqrt();
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        out[i] = if m > 0.0 { ((b - a) / m).clamp(-1.0, 1.0) } else { 0.0 };
    }
    Ok(out)
}

/// Number of samples taken for a fraction of `n`.
pub fn ambiguous_count(n: usize, fraction: f64) -> usize {
    // the small offset keeps e.g. 0.1 * 100 from rounding up to 11
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Ranks samples by silhouette ascending, then by larger distance to their own
/// centroid, then by index; returns the first `ceil(fraction * N)`.
pub fn select_ambiguous(model: &ClusterModel, x: &Matrix, fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = x.rows();
    if model.assignments.len() != n {
        return Err(Error::shape("select_ambiguous samples", n, model.assignments.len()));
    }
    let sil = if model.silhouette.len() == n {
        model.silhouette.clone()
    } else {
        vec![0.0; n]
    };
    let dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(x.row(i), model.centroids.row(model.assignments[i])))
        .collect();
    let mut ids: Vec<usize> = (0..n).collect();
    ids.sort_by(|&a, &b| {
        sil[a]
            .total_cmp(&sil[b])
            .then(dist[b].total_cmp(&dist[a]))
            .then(a.cmp(&b))
    });
    ids.truncate(ambiguous_count(n, fraction));
    Ok(ids)
}

/// Fraction of samples whose cluster's majority label matches their own.
pub fn cluster_purity(model: &ClusterModel, labels: &[usize]) -> f64 {
    let mut counts = std::collections::BTreeMap::<(usize, usize), usize>::new();
    for (&a, &l) in model.assignments.iter().zip(labels) {
        *counts.entry((a, l)).or_default() += 1;
    }
    let mut best = vec![0usize; model.k];
    for ((a, _), c) in counts {
        best[a] = best[a].max(c);
    }
    best.iter().sum::<usize>() as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> (Matrix, Vec<usize>) {
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![0.0, 0.2],
            vec![0.15, 0.1],
            vec![10.0, 10.0],
            vec![10.2, 10.0],
            vec![10.0, 9.9],
            vec![9.9, 10.1],
        ];
        (Matrix::from_rows(&pts).unwrap(), vec![0, 0, 0, 0, 1, 1, 1, 1])
    }

    #[test]
    fn identical_images_are_fully_degenerate() {
        let img = ImageTensor::filled(2, 2, 1, 0.3);
        let f = zscore_flatten(&["a".into(), "b".into()], &[img.clone(), img]).unwrap();
        assert!(f.data.data().iter().all(|&v| v == 0.0));
        assert_eq!(f.degenerate, vec![0, 1, 2, 3]);
    }

    #[test]
    fn zscore_matches_hand_values() {
        let imgs: Vec<ImageTensor> = [[0.0, 1.0], [0.5, 1.0], [1.0, 4.0]]
            .iter()
            .map(|v| ImageTensor::new(1, 2, 1, v.to_vec()).unwrap())
            .collect();
        let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let f = zscore_flatten(&ids, &imgs).unwrap();
        // column 0: mean 0.5, std sqrt(1/6); column 1: mean 2, std sqrt(2)
        let s0 = (1.0f64 / 6.0).sqrt();
        let s1 = 2f64.sqrt();
        let expect = [-0.5 / s0, -1.0 / s1, 0.0, -1.0 / s1, 0.5 / s0, 2.0 / s1];
        for (a, b) in f.data.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(f.degenerate.is_empty());
    }

    #[test]
    fn pca_exact_subspace_and_long_axis() {
        // points on a line in 3-D: one component explains everything
        let rows: Vec<Vec<f64>> = (0..6).map(|i| {
            let t = i as f64 - 2.5;
            vec![t, 2.0 * t, -t]
        }).collect();
        let r = pca(&Matrix::from_rows(&rows).unwrap(), 1).unwrap();
        assert!((r.explained[0] - 1.0).abs() < 1e-9);

        // anisotropic 2-D cloud; 2x2 covariance oracle
        let pts = [[3.0, 1.0], [-3.0, -1.0], [2.0, 0.2], [-2.0, -0.2], [0.5, -0.6], [-0.5, 0.6]];
        let rows: Vec<Vec<f64>> = pts.iter().map(|p| p.to_vec()).collect();
        let r = pca(&Matrix::from_rows(&rows).unwrap(), 2).unwrap();
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for p in pts {
            sxx += p[0] * p[0];
            sxy += p[0] * p[1];
            syy += p[1] * p[1];
        }
        let tr = sxx + syy;
        let det = sxx * syy - sxy * sxy;
        let l1 = tr / 2.0 + (tr * tr / 4.0 - det).sqrt();
        let v = [sxy, l1 - sxx];
        let nv = (v[0] * v[0] + v[1] * v[1]).sqrt();
        let c = [r.components.get(0, 0), r.components.get(1, 0)];
        let align = (c[0] * v[0] + c[1] * v[1]).abs() / nv;
        assert!((align - 1.0).abs() < 1e-10);
        assert!((r.explained[0] - l1 / tr).abs() < 1e-10);
        assert!(r.explained[0] >= r.explained[1]);
        assert!(pca(&Matrix::from_rows(&rows).unwrap(), 3).is_err());
    }

    #[test]
    fn pca_orthonormal_reconstruction_and_gram_route() {
        let s = 0.5f64.sqrt();
        let x = Matrix::from_rows(&[vec![s, s], vec![-s, s]]).unwrap();
        let r = pca(&x, 2).unwrap();
        // centered data reconstructs from scores and axes
        let recon = r.projected.mm_t(&r.components);
        let mut xc = x.clone();
        for j in 0..2 {
            let mu = (xc.get(0, j) + xc.get(1, j)) / 2.0;
            for i in 0..2 {
                xc.set(i, j, xc.get(i, j) - mu);
            }
        }
        assert!(recon.max_abs_diff(&xc) < 1e-12);

        // N < D uses the Gram route; projections agree with the covariance route
        let wide = Matrix::from_rows(&[
            vec![1.0, 0.0, 2.0, 0.5],
            vec![0.0, 1.0, -1.0, 0.3],
            vec![2.0, 1.0, 0.0, -0.2],
        ])
        .unwrap();
        let g = pca(&wide, 2).unwrap();
        let mut xc = wide.clone();
        for j in 0..4 {
            let mu = (0..3).map(|i| xc.get(i, j)).sum::<f64>() / 3.0;
            for i in 0..3 {
                xc.set(i, j, xc.get(i, j) - mu);
            }
        }
        let cov = xc.t_mm(&xc);
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(4, 4, cov.data()));
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (col, &e) in order.iter().take(2).enumerate() {
            for i in 0..3 {
                let score: f64 = (0..4).map(|j| xc.get(i, j) * eig.eigenvectors[(j, e)]).sum();
                assert!((score.abs() - g.projected.get(i, col).abs()).abs() < 1e-10);
            }
        }
        let total: f64 = g.explained.iter().sum();
        assert!(total <= 1.0 + 1e-12);
    }

    #[test]
    fn kmeans_k_equals_n_and_blobs() {
        let (x, truth) = blobs();
        let m = kmeans(&x, 8, 1, 50).unwrap();
        assert!(m.inertia.abs() < 1e-12);

        let m = kmeans(&x, 2, 3, 50).unwrap();
        let flip = m.assignments[0];
        for (a, t) in m.assignments.iter().zip(&truth) {
            assert_eq!(*a == flip, *t == 0);
        }
        // oracle: within-blob sums of squared deviations
        let mut oracle = 0.0;
        for blob in 0..2 {
            let idx: Vec<usize> = (0..8).filter(|&i| truth[i] == blob).collect();
            for j in 0..2 {
                let mu = idx.iter().map(|&i| x.get(i, j)).sum::<f64>() / 4.0;
                oracle += idx.iter().map(|&i| (x.get(i, j) - mu).powi(2)).sum::<f64>();
            }
        }
        assert!((m.inertia - oracle).abs() < 1e-10);
        for w in m.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        let mean: f64 = m.silhouette.iter().sum::<f64>() / 8.0;
        assert!(mean > 0.9);
    }

    #[test]
    fn silhouette_conventions() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![10.0]]).unwrap();
        let s = silhouette(&x, &[0, 0, 1, 2]).unwrap();
        assert_eq!(s[3], 0.0);
        assert_eq!(s[2], 0.0);
        assert!(silhouette(&x, &[1, 1, 1, 1]).is_err());
        let s = silhouette(&x, &[0, 0, 1, 1]).unwrap();
        assert!((s[1] - (5.0 - 1.0) / 5.0).abs() < 1e-12);
        let x = Matrix::from_rows(&[vec![-1.0], vec![-1.0], vec![0.0], vec![1.0], vec![1.0]]).unwrap();
        let s = silhouette(&x, &[0, 0, 0, 1, 1]).unwrap();
        let a = (1.0 + 1.0) / 2.0;
        let b = 1.0;
        assert!((s[2] - (b - a) / a).abs() < 1e-12);
    }

    #[test]
    fn ambiguous_selection_size_and_order() {
        assert_eq!(ambiguous_count(100, 0.10), 10);
        assert_eq!(ambiguous_count(101, 0.10), 11);
        assert_eq!(ambiguous_count(7, 1.0), 7);
        let (x, _) = blobs();
        let m = kmeans(&x, 2, 3, 50).unwrap();
        let all = select_ambiguous(&m, &x, 1.0).unwrap();
        assert_eq!(all.len(), 8);
        let sil = &m.silhouette;
        for w in all.windows(2) {
            assert!(sil[w[0]] <= sil[w[1]]);
        }
        let some = select_ambiguous(&m, &x, 0.25).unwrap();
        assert_eq!(some, all[..2].to_vec());
        assert!(select_ambiguous(&m, &x, 0.0).is_err());
    }
}
