use etsef::classifiers::{fit, ClassifierKind, ClassifierParams, Predictor};
use etsef::data::Image;
use etsef::ensemble::ConfusionMatrix;
use etsef::explain::*;
use etsef::nn::{Conv2d, Dense, EncoderModel, Head, HeadKind, Layer, Sequential};
use etsef::{Error, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// 1-channel conv (3x3 box filter) + ReLU, head GAP -> Dense(1 -> 2) -> Softmax.
fn box_model(dense_w: [f64; 2], dense_b: [f64; 2]) -> EncoderModel {
    let conv = Conv2d {
        in_ch: 1,
        out_ch: 1,
        kernel: 3,
        weight: vec![1.0 / 9.0; 9],
        bias: vec![0.0],
    };
    let backbone = Sequential::new(vec![Layer::Conv2d(conv), Layer::Relu]);
    let mut m = EncoderModel::new((1, 16, 16), backbone).unwrap();
    let dense = Dense {
        inputs: 1,
        outputs: 2,
        weight: dense_w.to_vec(),
        bias: dense_b.to_vec(),
    };
    m.set_head(Head {
        kind: HeadKind::Classification,
        layers: Sequential::new(vec![Layer::GlobalAvgPool, Layer::Flatten, Layer::Dense(dense), Layer::Softmax]),
    })
    .unwrap();
    m
}

fn top_left_image() -> Image {
    let mut img = Image::new(16, 16, 1);
    for y in 1..5 {
        for x in 1..5 {
            img.set(y, x, 0, 1.0);
        }
    }
    img
}

#[test]
fn grad_cam_peaks_at_the_known_receptive_field() {
    let m = box_model([1.0, -1.0], [0.0, 0.0]);
    let s = grad_cam(&m, &top_left_image(), 0, "box").unwrap();
    let (y, x) = s.peak();
    assert!(y < 8 && x < 8, "peak at {y},{x}");
    assert!(s.values.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(s.values.iter().cloned().fold(0.0, f64::max), 1.0);
    assert_eq!(s.get(15, 15), 0.0);
}

#[test]
fn grad_cam_zero_gradient_gives_zero_map() {
    let m = box_model([0.0, 0.0], [0.0, 0.0]);
    let s = grad_cam(&m, &top_left_image(), 0, "box").unwrap();
    assert!(s.values.iter().all(|&v| v == 0.0));
    // class 1 has a negative weight, so ReLU leaves nothing
    let m = box_model([1.0, -1.0], [0.0, 0.0]);
    let s = grad_cam(&m, &top_left_image(), 1, "box").unwrap();
    assert!(s.values.iter().all(|&v| v == 0.0));
}

#[test]
fn grad_cam_ignores_constant_score_shift() {
    let a = grad_cam(&box_model([1.0, -1.0], [0.0, 0.0]), &top_left_image(), 0, "box").unwrap();
    let b = grad_cam(&box_model([1.0, -1.0], [5.0, 5.0]), &top_left_image(), 0, "box").unwrap();
    assert_eq!(a.values, b.values);
}

#[test]
fn grad_cam_rejects_unsupported_models() {
    let mut m = box_model([1.0, -1.0], [0.0, 0.0]);
    m.remove_head();
    assert!(matches!(grad_cam(&m, &top_left_image(), 0, "x"), Err(Error::UnsupportedModel(_))));
    let m = box_model([1.0, -1.0], [0.0, 0.0]);
    assert!(grad_cam(&m, &top_left_image(), 2, "x").is_err());
}

fn eval_rows(f: impl Fn(&[f64]) -> f64) -> impl Fn(&Matrix) -> etsef::Result<Vec<f64>> {
    move |x: &Matrix| Ok(x.iter_rows().map(&f).collect())
}

#[test]
fn shap_axiom_examples() {
    let e = shap_exact_fn(eval_rows(|r| r[0] + r[1]), &[2.0, 3.0], &[0.0, 0.0]).unwrap();
    assert_eq!(e.values, vec![2.0, 3.0]);
    assert_eq!(e.base_value, 0.0);
    let e = shap_exact_fn(eval_rows(|r| r[0] * r[1]), &[1.0, 1.0], &[0.0, 0.0]).unwrap();
    assert_eq!(e.values, vec![0.5, 0.5]);
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

#[test]
fn shap_exact_matches_permutation_oracle() {
    let f = |r: &[f64]| (r[0] * r[1]).sin() + r[2].powi(3) - r[1] * r[3] * r[2] + (0.5 * r[3]).exp();
    let x = [0.7, -1.2, 0.4, 1.5];
    let bg = [0.1, 0.3, -0.2, 0.0];
    let e = shap_exact_fn(eval_rows(f), &x, &bg).unwrap();
    let perms = permutations(&[0, 1, 2, 3]);
    assert_eq!(perms.len(), 24);
    let mut oracle = [0.0; 4];
    for p in &perms {
        let mut cur = bg.to_vec();
        for &j in p {
            let before = f(&cur);
            cur[j] = x[j];
            oracle[j] += (f(&cur) - before) / 24.0;
        }
    }
    for j in 0..4 {
        assert!((e.values[j] - oracle[j]).abs() < 1e-12, "{j}: {} vs {}", e.values[j], oracle[j]);
    }
}

#[test]
fn shap_symmetry_null_and_local_accuracy() {
    // x0 and x1 exchangeable, x3 ignored
    let f = |r: &[f64]| (r[0] + r[1]).tanh() * r[2] + r[0] * r[1];
    let e = shap_exact_fn(eval_rows(f), &[0.8, 0.8, 1.3, 9.0], &[0.0, 0.0, 0.2, -4.0]).unwrap();
    assert!((e.values[0] - e.values[1]).abs() < 1e-12);
    assert_eq!(e.values[3], 0.0);
    let total = e.base_value + e.values.iter().sum::<f64>();
    assert!((total - e.output).abs() < 1e-9);
}

fn gnb_d8() -> (etsef::classifiers::TrainedClassifier, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for i in 0..90 {
        let c = i % 3;
        rows.push((0..8).map(|j| normal.sample(&mut rng) + if j % 3 == c { 1.5 } else { 0.0 }).collect());
        y.push(c);
    }
    let x = Matrix::from_rows(&rows).unwrap();
    (fit(ClassifierKind::Gnb, &x, &y, 3, &ClassifierParams::default()).unwrap(), x)
}

#[test]
fn classifier_shap_local_accuracy_and_sampling_agreement() {
    let (model, x) = gnb_d8();
    let bg = default_background(&x, 10);
    assert_eq!(bg.rows(), 10);
    let instance = x.row(4).to_vec();
    let exact = shap_exact(&model, &instance, &bg).unwrap();
    let p = model.predict_proba(&Matrix::from_rows(&[instance.clone()]).unwrap()).unwrap();
    let class = exact.class.unwrap();
    assert_eq!(class, model.predict(&Matrix::from_rows(&[instance.clone()]).unwrap()).unwrap()[0]);
    assert!((exact.output - p[(0, class)]).abs() < 1e-12);
    assert!((exact.base_value + exact.values.iter().sum::<f64>() - exact.output).abs() < 1e-9);

    let sampled = shap_sampled(&model, &instance, &bg, 2048, 3).unwrap();
    for j in 0..8 {
        assert!(
            (sampled.values[j] - exact.values[j]).abs() < 0.05,
            "{j}: {} vs {}",
            sampled.values[j],
            exact.values[j]
        );
    }
    assert!((sampled.base_value + sampled.values.iter().sum::<f64>() - sampled.output).abs() < 1e-12);
    assert_eq!(sampled, shap_sampled(&model, &instance, &bg, 2048, 3).unwrap());
    assert!(shap_sampled(&model, &instance, &bg, 0, 3).is_err());
}

#[test]
fn shap_exact_refuses_wide_inputs() {
    let x = vec![0.0; 16];
    assert!(shap_exact_fn(eval_rows(|r| r[0]), &x, &x).is_err());
    assert!(shap_sampled_fn(eval_rows(|r| r[0]), &x, &x, 4, 0).is_ok());
}

fn two_clusters(m: usize, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for i in 0..m {
        let c = i % 2;
        let shift = if c == 0 { -5.0 } else { 5.0 };
        rows.push((0..10).map(|_| normal.sample(&mut rng) + shift).collect());
        y.push(c);
    }
    (Matrix::from_rows(&rows).unwrap(), y)
}

#[test]
fn tsne_probabilities_are_normalized() {
    let (x, _) = two_clusters(60, 1);
    let (cond, perp) = conditional_p(&x, 10.0).unwrap();
    for i in 0..cond.rows() {
        assert!((cond.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((perp[i] - 10.0).abs() < 1e-4, "row {i} perplexity {}", perp[i]);
    }
    let p = joint_p(&cond);
    assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    for i in 0..p.rows() {
        for j in 0..p.rows() {
            assert_eq!(p[(i, j)], p[(j, i)]);
        }
    }
}

#[test]
fn tsne_handles_duplicate_rows() {
    let x = Matrix::from_rows(&vec![vec![1.0, 2.0]; 12]).unwrap();
    let (cond, _) = conditional_p(&x, 3.0).unwrap();
    assert!(cond.as_slice().iter().all(|v| v.is_finite()));
}

#[test]
fn tsne_separates_two_clusters() {
    let (x, y) = two_clusters(300, 7);
    let t = std::time::Instant::now();
    let e = tsne_embed(&x, Some(y.clone()), &TsneConfig { seed: 7, ..Default::default() }).unwrap();
    assert!(t.elapsed().as_secs() < 60);
    let s = silhouette(&e.coords, &y).unwrap();
    assert!(s > 0.5, "silhouette {s}");
    let kl_at = |it: usize| e.kl_trace.iter().find(|&&(i, _)| i == it).unwrap().1;
    assert!(kl_at(1000) < kl_at(250), "{:?}", e.kl_trace);
    assert!(e.kl >= 0.0 && e.coords.as_slice().iter().all(|v| v.is_finite()));
}

#[test]
fn tsne_reduces_perplexity_for_small_sets() {
    let (x, y) = two_clusters(20, 2);
    let e = tsne_embed(&x, Some(y), &TsneConfig { iters: 100, ..Default::default() }).unwrap();
    assert!(e.perplexity < 30.0);
}

#[test]
fn renderers_produce_parseable_deterministic_files() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y) = two_clusters(40, 3);
    let e = tsne_embed(&x, Some(y.clone()), &TsneConfig { iters: 100, perplexity: 5.0, ..Default::default() }).unwrap();
    let names = vec!["a<b".to_string(), "c&d".to_string()];
    let svg = dir.path().join("e.svg");
    render(&Artifact::Embedding { embedding: &e, class_names: &names }, &svg).unwrap();
    let text = std::fs::read_to_string(&svg).unwrap();
    roxmltree::Document::parse(&text).unwrap();
    render(&Artifact::Embedding { embedding: &e, class_names: &names }, &dir.path().join("e2.svg")).unwrap();
    assert_eq!(std::fs::read(&svg).unwrap(), std::fs::read(dir.path().join("e2.svg")).unwrap());

    let cm = ConfusionMatrix::new(&[0, 1, 2, 2], &[0, 2, 2, 1], 3).unwrap();
    let cpath = dir.path().join("cm.svg");
    render(&Artifact::Confusion(&cm), &cpath).unwrap();
    roxmltree::Document::parse(&std::fs::read_to_string(&cpath).unwrap()).unwrap();
    roxmltree::Document::parse(&bar_chart_svg("d", &["A-TL".into(), "B&".into()], &[0.1, -0.2])).unwrap();

    let img = top_left_image();
    let map = grad_cam(&box_model([1.0, -1.0], [0.0, 0.0]), &img, 0, "box").unwrap();
    let ppm = dir.path().join("s.ppm");
    render(&Artifact::Saliency { map: &map, image: &img }, &ppm).unwrap();
    let back = etsef::data::read_pnm(&ppm).unwrap();
    assert_eq!((back.height, back.width, back.channels), (16, 16, 3));
    assert!(render(&Artifact::Confusion(&cm), &dir.path().join("missing/x.svg")).is_err());
}

#[test]
fn background_is_nearest_to_median() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rows: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let mut rows2 = rows.clone();
    rows2.push(vec![-0.0001, 0.0]);
    let x = Matrix::from_rows(&rows2).unwrap();
    let bg = default_background(&x, 1);
    assert_eq!(bg.rows(), 1);
    assert!(bg.row(0)[0].abs() < 0.3 && bg.row(0)[1].abs() < 0.3);
}
