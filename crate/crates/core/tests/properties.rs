use std::collections::BTreeSet;

use mgfuse::data::{kfold_split, stratified_holdout, DatasetManifest, Record};
use mgfuse::fewshot::{sample_demonstrations, zscore_columns, DemoStrategy};
use mgfuse::kernels::{scaled_dot_attention, softmax, Matrix, ProbVector};
use mgfuse::metrics::{confusion, mean_std, prf, topn_accuracy};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-20.0f64..20.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn probs(n: usize, c: usize) -> impl Strategy<Value = Vec<ProbVector>> {
    prop::collection::vec(prop::collection::vec(0u8..4, c), n).prop_map(|rows| {
        rows.into_iter()
            .map(|w| {
                let s: f64 = w.iter().map(|&x| x as f64 + 0.25).sum();
                ProbVector::new(w.iter().map(|&x| (x as f64 + 0.25) / s).collect()).unwrap()
            })
            .collect()
    })
}

fn labelled(max_classes: usize) -> impl Strategy<Value = Vec<usize>> {
    (2..=max_classes, 3usize..8).prop_flat_map(|(c, per)| {
        prop::collection::vec(0..c, 0..10).prop_map(move |extra| {
            let mut l: Vec<usize> = (0..c).flat_map(|k| std::iter::repeat(k).take(per)).collect();
            l.extend(extra);
            l
        })
    })
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-700.0f64..700.0, 1..20)) {
        let p = softmax(&v).unwrap();
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.as_slice().iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert_eq!(p.argmax(), mgfuse::kernels::argmax(&v));
    }

    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..10), s in -100.0f64..100.0) {
        let a = softmax(&v).unwrap();
        let b = softmax(&v.iter().map(|x| x + s).collect::<Vec<_>>()).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_weight_rows_are_distributions((q, k, v) in (1usize..5, 1usize..6, 1usize..6).prop_flat_map(|(n, m, d)| (matrix(n, d), matrix(m, d), matrix(m, 3)))) {
        let a = scaled_dot_attention(&q, &k, &v).unwrap();
        for i in 0..a.weights.rows() {
            prop_assert!((a.weights.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert_eq!(a.output.shape(), (q.rows(), 3));
    }

    #[test]
    fn topn_is_monotone_and_micro_recall_is_top1((p, l) in (1usize..30, 5usize..8).prop_flat_map(|(n, c)| (probs(n, c), prop::collection::vec(0..c, n)))) {
        let t: Vec<f64> = [1, 2, 3, 5].iter().map(|&k| topn_accuracy(&p, &l, k).unwrap()).collect();
        prop_assert!(t.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(prf(&confusion(&p, &l).unwrap()).micro_recall, t[0]);
    }

    #[test]
    fn kfold_partitions_and_stratifies(labels in labelled(5), k in 2usize..4, seed in any::<u64>()) {
        let plan = kfold_split(&labels, k, seed).unwrap();
        let mut all: Vec<usize> = plan.folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        let classes = labels.iter().max().unwrap() + 1;
        for c in 0..classes {
            let per: Vec<usize> = plan.folds.iter().map(|f| f.iter().filter(|&&i| labels[i] == c).count()).collect();
            prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1, "class {} spread {:?}", c, per);
        }
        for f in 0..k {
            let train: BTreeSet<usize> = plan.train(f).into_iter().collect();
            prop_assert!(plan.validation(f).iter().all(|i| !train.contains(i)));
            prop_assert_eq!(train.len() + plan.validation(f).len(), labels.len());
        }
    }

    #[test]
    fn holdout_is_disjoint_and_keeps_training_data(labels in labelled(4), frac in 0.05f64..0.5, seed in any::<u64>()) {
        let ids: Vec<usize> = (0..labels.len()).collect();
        let (train, val) = stratified_holdout(&ids, &labels, frac, seed);
        let t: BTreeSet<usize> = train.iter().copied().collect();
        prop_assert!(val.iter().all(|i| !t.contains(i)));
        prop_assert_eq!(train.len() + val.len(), ids.len());
        let classes = labels.iter().max().unwrap() + 1;
        for c in 0..classes {
            prop_assert!(train.iter().any(|&i| labels[i] == c));
        }
    }

    #[test]
    fn manifest_csv_round_trips(raw in prop::collection::vec(("[a-z0-9_-]{1,8}", "[a-zA-Z,\"/.]([a-zA-Z ,\"/.]{0,8}[a-zA-Z,\"/.])?", 0usize..4), 1..15)) {
        let mut seen = BTreeSet::new();
        let rows: Vec<_> = raw.into_iter().filter(|(id, _, _)| seen.insert(id.clone())).collect();
        let cats: Vec<String> = ["MEMS", "tips, probes", "a \"b\"", "fibres"].iter().map(|s| s.to_string()).collect();
        // categories are numbered by first appearance
        let mut order: Vec<usize> = Vec::new();
        for (_, _, l) in &rows {
            if !order.contains(l) {
                order.push(*l);
            }
        }
        let m = DatasetManifest {
            records: rows.iter().map(|(id, p, l)| Record { id: id.clone(), path: p.clone(), label: order.iter().position(|x| x == l).unwrap() }).collect(),
            categories: order.iter().map(|&l| cats[l].clone()).collect(),
        };
        let text = String::from_utf8(m.to_csv().unwrap()).unwrap();
        prop_assert_eq!(DatasetManifest::from_csv(&text).unwrap(), m);
    }

    #[test]
    fn zscore_columns_standardize(m in (2usize..12, 1usize..5).prop_flat_map(|(n, d)| matrix(n, d))) {
        let mut z = m.clone();
        let degenerate = zscore_columns(&mut z);
        let (n, d) = z.shape();
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| z.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9);
            if !degenerate.contains(&j) {
                let var = col.iter().map(|x| x * x).sum::<f64>() / n as f64;
                prop_assert!((var - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn demonstrations_come_from_pool_and_skip_query(n in 4usize..20, k in 1usize..4, seed in any::<u64>(), q in 0usize..20, sim in any::<bool>(), feats in matrix(20, 3)) {
        let q = q % n;
        let pool: Vec<usize> = (0..n).filter(|i| i % 3 != 1 || *i == q).collect();
        prop_assume!(pool.iter().filter(|&&i| i != q).count() >= k);
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let strategy = if sim { DemoStrategy::Similarity } else { DemoStrategy::Random };
        let d = sample_demonstrations(q, &feats, &pool, &labels, k, strategy, seed).unwrap();
        prop_assert_eq!(d.pairs.len(), k);
        let distinct: BTreeSet<usize> = d.pairs.iter().map(|p| p.0).collect();
        prop_assert_eq!(distinct.len(), k);
        prop_assert!(d.pairs.iter().all(|&(i, l)| i != q && pool.contains(&i) && labels[i] == l));
    }

    #[test]
    fn sample_std_matches_definition(v in prop::collection::vec(-10.0f64..10.0, 2..20)) {
        let (m, s) = mean_std(&v);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        prop_assert!((m - mean).abs() < 1e-12);
        prop_assert!((s - var.sqrt()).abs() < 1e-9);
    }
}
