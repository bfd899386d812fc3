use etsef::classifiers::{fit, ClassifierKind, ClassifierParams, Predictor};
use etsef::data::{augment_balance, stratified_split, AugmentConfig, Image, LabeledImageSet, SplitSpec};
use etsef::ensemble::{majority_vote, ConfusionMatrix, MetricReport};
use etsef::explain::{conditional_p, joint_p};
use etsef::fusion::{fit_lda, fit_pca};
use etsef::linalg::{cosine_similarity, eigh_symmetric, whiten};
use etsef::nn::{nt_xent_loss, softmax_rows, Layer, Tensor};
use etsef::pipeline::RunConfig;
use etsef::{FeatureMatrix, Matrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig::with_cases(cases)
}

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Matrix> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

fn symmetric(n: std::ops::Range<usize>) -> impl Strategy<Value = Matrix> {
    n.prop_flat_map(|n| {
        prop::collection::vec(-5.0f64..5.0, n * n).prop_map(move |v| {
            Matrix::from_fn(n, n, |i, j| if i <= j { v[i * n + j] } else { v[j * n + i] })
        })
    })
}

fn frob_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm()
}

/// Labels 0..k each at least `min` times, shuffled by the strategy.
fn labels(k: std::ops::Range<usize>, min: usize, extra: usize) -> impl Strategy<Value = (usize, Vec<usize>)> {
    k.prop_flat_map(move |k| {
        prop::collection::vec(0..k, 0..=extra).prop_flat_map(move |more| {
            let mut all: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, min)).collect();
            all.extend(more);
            Just(all).prop_shuffle().prop_map(move |v| (k, v))
        })
    })
}

fn image_set(labels: &[usize], k: usize) -> LabeledImageSet {
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| Image::filled(4, 4, 1, (i as f64 * 0.37 + l as f64).fract()))
        .collect();
    LabeledImageSet::new(images, labels.to_vec(), (0..k).map(|c| format!("c{c}")).collect()).unwrap()
}

proptest! {
    #![proptest_config(cfg(48))]

    #[test]
    fn eigh_reconstructs_and_is_orthonormal(a in symmetric(1..13)) {
        let e = eigh_symmetric(&a).unwrap();
        let scale = a.frobenius_norm().max(1e-300);
        prop_assert!(frob_diff(&e.reconstruct(), &a) / scale < 1e-8);
        let n = a.rows();
        let vtv = e.vectors.transpose().matmul(&e.vectors).unwrap();
        prop_assert!(frob_diff(&vtv, &Matrix::identity(n)) < 1e-9);
        for w in e.values.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        // sign convention: largest-magnitude entry of each eigenvector is positive
        for j in 0..n {
            let col = e.vectors.column(j);
            let big = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            prop_assert!(big > 0.0);
        }
    }

    #[test]
    fn whitened_covariance_is_identity(x in matrix(30..60, 2..6)) {
        let k = x.cols();
        let centered = {
            let m = x.column_means();
            Matrix::from_fn(x.rows(), k, |i, j| x[(i, j)] - m[j])
        };
        if let Ok((w, _)) = whiten(&centered, k) {
            let cov = w.covariance().unwrap();
            prop_assert!(frob_diff(&cov, &Matrix::identity(k)) < 1e-6);
        }
    }

    #[test]
    fn cosine_is_symmetric_and_scale_invariant(
        u in prop::collection::vec(-5.0f64..5.0, 6),
        v in prop::collection::vec(-5.0f64..5.0, 6),
        alpha in 0.01f64..100.0,
    ) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let a = cosine_similarity(&u, &v).unwrap();
        prop_assert_eq!(a, cosine_similarity(&v, &u).unwrap());
        let scaled: Vec<f64> = u.iter().map(|x| x * alpha).collect();
        prop_assert!((cosine_similarity(&scaled, &v).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn stratified_split_partitions_and_preserves_proportions((k, y) in labels(2..5, 3, 40), seed in any::<u64>()) {
        let set = image_set(&y, k);
        let (train, test) = stratified_split(&set, &SplitSpec::new(seed)).unwrap();
        let mut ids: Vec<u64> = train.ids.iter().chain(&test.ids).copied().collect();
        ids.sort_unstable();
        let mut want = set.ids.clone();
        want.sort_unstable();
        prop_assert_eq!(ids, want);
        for c in 0..k {
            let total = set.class_counts()[c] as f64;
            let got = train.class_counts()[c] as f64;
            prop_assert!((got - 0.8 * total).abs() <= 1.0, "class {} train {} of {}", c, got, total);
        }
    }

    #[test]
    fn augment_balance_keeps_originals_and_equalizes((k, y) in labels(2..4, 1, 12), seed in any::<u64>()) {
        let set = image_set(&y, k);
        let out = augment_balance(&set, &AugmentConfig { seed, ..AugmentConfig::default() }).unwrap();
        let counts = out.class_counts();
        prop_assert!(counts.iter().all(|&c| c == counts[0]));
        prop_assert_eq!(counts[0], *set.class_counts().iter().max().unwrap());
        for (i, img) in set.images.iter().enumerate() {
            let j = out.ids.iter().position(|&id| id == set.ids[i]).unwrap();
            prop_assert_eq!(&out.images[j], img);
            prop_assert_eq!(out.labels[j], set.labels[i]);
        }
    }

    #[test]
    fn flips_are_involutions(v in prop::collection::vec(0.0f64..1.0, 5 * 7 * 3)) {
        let mut img = Image::new(5, 7, 3);
        img.data.copy_from_slice(&v);
        prop_assert_eq!(&img.hflip().hflip(), &img);
        prop_assert_eq!(&img.vflip().vflip(), &img);
    }

    #[test]
    fn softmax_rows_sum_to_one(x in matrix(1..8, 1..8)) {
        let s = softmax_rows(&x);
        for r in s.iter_rows() {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn nt_xent_invariant_to_rescaling_and_pair_order(
        z in (1usize..5, 2usize..6).prop_flat_map(|(n, d)| {
            prop::collection::vec(-3.0f64..3.0, 2 * n * d).prop_map(move |v| Matrix::from_vec(2 * n, d, v).unwrap())
        }),
        scales in prop::collection::vec(0.1f64..10.0, 8),
        tau in 0.1f64..2.0,
        rot in 0usize..4,
    ) {
        prop_assume!(z.iter_rows().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-4));
        let (base, _) = nt_xent_loss(&z, tau).unwrap();
        let scaled = Matrix::from_fn(z.rows(), z.cols(), |i, j| z[(i, j)] * scales[i % scales.len()]);
        prop_assert!((nt_xent_loss(&scaled, tau).unwrap().0 - base).abs() < 1e-9);
        let pairs = z.rows() / 2;
        let order: Vec<usize> = (0..pairs).map(|p| (p + rot) % pairs).flat_map(|p| [2 * p, 2 * p + 1]).collect();
        prop_assert!((nt_xent_loss(&z.select_rows(&order), tau).unwrap().0 - base).abs() < 1e-9);
    }

    #[test]
    fn dropout_inference_is_identity(v in prop::collection::vec(-2.0f64..2.0, 12), p in 0.0f64..0.95) {
        let x = Tensor::from_vec(2, 6, 1, 1, v).unwrap();
        let (out, _) = Layer::Dropout(p).forward(&x, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(out, x);
    }

    #[test]
    fn pca_ratios_non_increasing_and_bounded(x in matrix(12..30, 2..7)) {
        let fm = FeatureMatrix::unlabeled(x.clone());
        if let Ok(t) = fit_pca(&fm, x.cols()) {
            let r = &t.explained_variance_ratio;
            for w in r.windows(2) {
                prop_assert!(w[0] >= w[1] - 1e-12);
            }
            prop_assert!(r.iter().sum::<f64>() <= 1.0 + 1e-9);
            let c = t.components.unwrap();
            prop_assert!(frob_diff(&c.transpose().matmul(&c).unwrap(), &Matrix::identity(x.cols())) < 1e-9);
        }
    }

    #[test]
    fn lda_dimension_bounded_by_classes(x in matrix(20..40, 3..8), k in 2usize..5) {
        let y: Vec<usize> = (0..x.rows()).map(|i| i % k).collect();
        let fm = FeatureMatrix::new(x.clone(), Some(y), (0..x.rows() as u64).collect()).unwrap();
        if let Ok(t) = fit_lda(&fm, k - 1) {
            prop_assert!(t.components.unwrap().cols() <= k - 1);
        }
        prop_assert!(fit_lda(&fm, k).is_err());
    }

    #[test]
    fn vote_is_permutation_invariant(
        (n_classes, preds) in (2usize..5).prop_flat_map(|k| {
            (Just(k), prop::collection::vec(prop::collection::vec(0..k, 10), 1..6))
        }),
        rot in 0usize..6,
    ) {
        let w = vec![1.0; preds.len()];
        let base = majority_vote(&preds, &w, n_classes).unwrap();
        let mut rotated = preds.clone();
        rotated.rotate_left(rot % preds.len());
        prop_assert_eq!(&majority_vote(&rotated, &w, n_classes).unwrap(), &base);
        let mut reversed = preds.clone();
        reversed.reverse();
        prop_assert_eq!(&majority_vote(&reversed, &w, n_classes).unwrap(), &base);
        prop_assert_eq!(&majority_vote(&preds[..1], &[1.0], n_classes).unwrap(), &preds[0]);
    }

    #[test]
    fn confusion_and_metric_identities(
        (k, truth, pred) in (2usize..6).prop_flat_map(|k| {
            (1usize..80).prop_flat_map(move |n| {
                (Just(k), prop::collection::vec(0..k, n), prop::collection::vec(0..k, n))
            })
        }),
    ) {
        let cm = ConfusionMatrix::new(&truth, &pred, k).unwrap();
        prop_assert_eq!(cm.total(), truth.len());
        for c in 0..k {
            prop_assert_eq!(cm.tp(c) + cm.fn_(c), truth.iter().filter(|&&t| t == c).count());
            prop_assert_eq!(cm.tp(c) + cm.tn(c) + cm.fp(c) + cm.fn_(c), cm.total());
        }
        let r = MetricReport::from_confusion(&cm);
        prop_assert_eq!(r.accuracy, cm.trace() as f64 / cm.total() as f64);
        for m in &r.per_class {
            for v in [m.accuracy, m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if m.precision + m.recall > 0.0 {
                prop_assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-12);
            } else {
                prop_assert_eq!(m.f1, 0.0);
            }
        }
    }

    #[test]
    fn tsne_joint_p_is_symmetric_and_normalized(x in matrix(8..25, 2..5)) {
        let (cond, _) = conditional_p(&x, 3.0).unwrap();
        let p = joint_p(&cond);
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..p.rows() {
            for j in 0..p.rows() {
                prop_assert!((p[(i, j)] - p[(j, i)]).abs() < 1e-15);
            }
        }
    }
}

/// Distinct, well separated points with arbitrary labels.
fn consistent_dataset() -> impl Strategy<Value = (Matrix, Vec<usize>, usize)> {
    (2usize..4, 8usize..40).prop_flat_map(|(k, n)| {
        (prop::collection::vec(0..k, n), prop::collection::hash_set(0i32..400, n)).prop_map(move |(y, xs)| {
            let xs: Vec<i32> = xs.into_iter().collect();
            let x = Matrix::from_fn(n, 2, |i, j| if j == 0 { (xs[i] % 20) as f64 } else { (xs[i] / 20) as f64 });
            (x, y, k)
        })
    })
}

/// Up to eight clusters on a 10x10 lattice, points jittered by at most 1.
fn clustered_dataset() -> impl Strategy<Value = (Matrix, Vec<usize>, usize)> {
    (2usize..4, prop::collection::hash_set(0usize..100, 2..8)).prop_flat_map(|(k, cells)| {
        let cells: Vec<usize> = cells.into_iter().collect();
        let c = cells.len();
        (prop::collection::vec(0..k, c), prop::collection::vec((0..c, -1.0f64..1.0, -1.0f64..1.0), 8..64)).prop_map(
            move |(labels, pts)| {
                let x = Matrix::from_fn(pts.len(), 2, |i, j| {
                    let (cell, dx, dy) = pts[i];
                    if j == 0 { (cells[cell] % 10) as f64 * 10.0 + dx } else { (cells[cell] / 10) as f64 * 10.0 + dy }
                });
                let y = pts.iter().map(|p| labels[p.0]).collect();
                (x, y, k)
            },
        )
    })
}

proptest! {
    #![proptest_config(cfg(16))]

    #[test]
    fn classifier_probabilities_and_argmax((x, y, k) in consistent_dataset(), seed in 0u64..1000) {
        prop_assume!((0..k).all(|c| y.iter().filter(|&&l| l == c).count() >= 2));
        let params = ClassifierParams { seed, rf_trees: 10, gbt_rounds: 10, svm_max_iter: 200, ..ClassifierParams::default() };
        for kind in ClassifierKind::ALL {
            let m = fit(kind, &x, &y, k, &params).unwrap();
            let p = m.predict_proba(&x).unwrap();
            let pred = m.predict(&x).unwrap();
            for (row, &label) in p.iter_rows().zip(&pred) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(label, row.iter().position(|&v| v == best).unwrap());
            }
            let again = fit(kind, &x, &y, k, &params).unwrap();
            prop_assert_eq!(&again, &m);
        }
    }

    #[test]
    fn gbt_fits_consistent_data((x, y, k) in consistent_dataset(), seed in 0u64..1000) {
        let params = ClassifierParams { seed, ..ClassifierParams::default() };
        let gbt = fit(ClassifierKind::Gbt, &x, &y, k, &params).unwrap();
        prop_assert_eq!(gbt.predict(&x).unwrap(), y);
    }

    /// Bootstrap plus a minimum split size of 3 cannot separate two lone
    /// neighbours of different classes, so the forest is checked on
    /// separated clusters with one label each.
    #[test]
    fn rf_fits_clustered_data((x, y, k) in clustered_dataset(), seed in 0u64..1000) {
        let params = ClassifierParams { seed, ..ClassifierParams::default() };
        let rf = fit(ClassifierKind::Rf, &x, &y, k, &params).unwrap();
        prop_assert_eq!(rf.predict(&x).unwrap(), y);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), size in 8usize..64, k in prop::option::of(1usize..50)) {
        let mut c = RunConfig::default();
        c.seed = seed;
        c.image_size = size;
        c.ensemble.k = k;
        let back = RunConfig::parse(&c.to_text(&[])).unwrap();
        prop_assert_eq!(back.to_text(&[]), c.to_text(&[]));
        prop_assert_eq!(back.seed, seed);
        prop_assert_eq!(back.ensemble.k, k);
    }
}
