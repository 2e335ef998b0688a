#![allow(clippy::approx_constant)]

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{forward, ForwardOptions, ModelDims, ModelParams};
use crate::tensor::gradcheck::grad_check;
use crate::tensor::Graph;

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn col<'g>(g: &'g Graph, v: &[f64]) -> Tensor<'g> {
    g.constant(Mat::column(v.to_vec()))
}

fn tensor_err(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        other => panic!("unexpected loss error: {other}"),
    }
}

/// Direct nested-loop evaluation of the contrastive loss.
fn cen_oracle(g: &[Mat; 3], labels: &[usize], normalize: bool) -> f64 {
    let n = labels.len();
    let vec = |m: usize, i: usize| -> Vec<f64> {
        let r = g[m].row(i).to_vec();
        if normalize {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / norm).collect()
        } else {
            r
        }
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for m in 0..3 {
        for s in 0..3 {
            if s == m {
                continue;
            }
            for i in 0..n {
                let anchor = vec(m, i);
                let pos = dot(&anchor, &vec(s, i)).exp();
                let mut neg = 0.0;
                let mut count = 0;
                for k in 0..3 {
                    for j in 0..n {
                        if j != i && labels[j] != labels[i] {
                            neg += dot(&anchor, &vec(k, j)).exp();
                            count += 1;
                        }
                    }
                }
                if count > 0 {
                    total += -(pos / (pos + neg)).ln();
                }
            }
        }
    }
    total / (6 * n) as f64
}

fn cen_value(g: &[Mat; 3], labels: &[usize], normalize: bool) -> f64 {
    let graph = Graph::new();
    let t = g.clone().map(|m| graph.constant(m));
    cen_loss(&t, labels, normalize).unwrap().item()
}

#[test]
fn default_weights() {
    let w = LossWeights::default();
    assert_eq!((w.alpha, w.beta, w.gamma, w.mu, w.eta), (1.0, 0.09, 0.5, 0.005, 1.0));
    assert!(w.validate().is_ok());
    assert!(LossWeights { beta: -0.1, ..w }.validate().is_err());
    assert!(LossWeights { mu: f64::NAN, ..w }.validate().is_err());
}

#[test]
fn constraint_parses() {
    for c in [Constraint::Aao, Constraint::OrtNorm, Constraint::OrtCos, Constraint::None] {
        assert_eq!(c.to_string().parse::<Constraint>().unwrap(), c);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(json, format!("\"{c}\""));
    }
    assert!("ortho".parse::<Constraint>().is_err());
}

#[test]
fn negatives_exclude_same_index_and_label() {
    let labels = [0, 1, 0, 2];
    let mask = negative_mask(&labels);
    let n = labels.len();
    for r in 0..3 * n {
        for c in 0..3 * n {
            let (i, j) = (r % n, c % n);
            let expected = j != i && labels[i] != labels[j];
            assert_eq!(mask.get(r, c) > 0.0, expected, "({r}, {c})");
        }
    }
}

#[test]
fn cen_single_anchor_fixture() {
    let g = Graph::new();
    let term = anchor_term(&g.scalar(1.0), &g.constant(Mat::row_vector(vec![0.0]))).unwrap();
    let e = std::f64::consts::E;
    assert_abs_diff_eq!(term.item(), -(e / (e + 1.0)).ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(term.item(), 0.31326169, epsilon = 1e-8);
    assert!(anchor_term(&g.scalar(1.0), &g.constant(Mat::zeros(1, 0))).is_err());
}

#[test]
fn anchor_term_survives_large_dots() {
    let g = Graph::new();
    let term = anchor_term(&g.scalar(900.0), &g.constant(Mat::row_vector(vec![905.0, 0.0]))).unwrap();
    assert_abs_diff_eq!(term.item(), 5f64.exp().ln_1p(), epsilon = 1e-9);
    let term = anchor_term(&g.scalar(900.0), &g.constant(Mat::row_vector(vec![-900.0]))).unwrap();
    assert_eq!(term.item(), 0.0);
}

#[test]
fn cen_two_utterances_by_hand() {
    // d = 1, every feature equal to 1: each anchor sees positive dot 1 and
    // three negatives with dot 1, so every term is log 4.
    let ones = Mat::filled(2, 1, 1.0);
    let g = [ones.clone(), ones.clone(), ones];
    assert_abs_diff_eq!(cen_value(&g, &[0, 1], false), 4f64.ln(), epsilon = 1e-12);

    // Negatives orthogonal in d = 2: terms are −log(e/(e+3)).
    let a = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let g = [a.clone(), a.clone(), a];
    let e = std::f64::consts::E;
    assert_abs_diff_eq!(cen_value(&g, &[0, 1], false), -(e / (e + 3.0)).ln(), epsilon = 1e-12);
}

#[test]
fn cen_zero_without_negatives() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = [random_mat(&mut rng, 5, 3), random_mat(&mut rng, 5, 3), random_mat(&mut rng, 5, 3)];
    assert_eq!(cen_value(&g, &[1; 5], true), 0.0);
    assert_eq!(cen_value(&g, &[1; 5], false), 0.0);
    assert_eq!(cen_value(&[Mat::zeros(1, 3), Mat::zeros(1, 3), Mat::zeros(1, 3)], &[0], false), 0.0);
}

#[test]
fn cen_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = [random_mat(&mut rng, 4, 3), random_mat(&mut rng, 4, 3), random_mat(&mut rng, 4, 3)];
    let labels = [0, 1, 0, 1];
    for normalize in [false, true] {
        let got = cen_value(&g, &labels, normalize);
        assert_abs_diff_eq!(got, cen_oracle(&g, &labels, normalize), epsilon = 1e-10);
    }
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = rng.random_range(1..7);
        let d = rng.random_range(1..5);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let g = [random_mat(&mut rng, n, d), random_mat(&mut rng, n, d), random_mat(&mut rng, n, d)];
        let g = g.map(|m| m.map(|x| 3.0 * x));
        assert_abs_diff_eq!(
            cen_value(&g, &labels, false),
            cen_oracle(&g, &labels, false),
            epsilon = 1e-10
        );
    }
}

#[test]
fn cen_monotone_in_positive_and_negative_dots() {
    // d = 3, single anchor direction per utterance; perturbing one
    // coordinate shared only with the positive raises the positive dot.
    let base = |x: f64, y: f64| -> [Mat; 3] {
        let a = Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let b = Mat::from_rows(&[vec![x, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let c = Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![y, 1.0, 0.0]]);
        [a, b, c]
    };
    let labels = [0, 1];
    let l0 = cen_value(&base(1.0, 0.0), &labels, false);
    let l_pos = cen_value(&base(1.5, 0.0), &labels, false);
    let l_neg = cen_value(&base(1.0, 0.5), &labels, false);
    assert!(l_pos < l0, "{l_pos} !< {l0}");
    assert!(l_neg > l0, "{l_neg} !> {l0}");
}

#[test]
fn cen_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let labels = [0, 1, 2, 0];
    let fixed = [random_mat(&mut rng, 4, 3), random_mat(&mut rng, 4, 3)];
    let x = random_mat(&mut rng, 4, 3);
    for normalize in [false, true] {
        let err = grad_check(
            |g, t| {
                let shared = [t, g.constant(fixed[0].clone()), g.constant(fixed[1].clone())];
                cen_loss(&shared, &labels, normalize).map_err(tensor_err)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "normalize={normalize}: {err}");
    }
}

#[test]
fn cen_degenerate_row_errors_when_normalizing() {
    let g = Graph::new();
    let z = g.constant(Mat::zeros(2, 3));
    let one = g.constant(Mat::filled(2, 3, 1.0));
    assert!(matches!(
        cen_loss(&[z, one, one], &[0, 1], true),
        Err(LossError::Tensor(TensorError::Degenerate { .. }))
    ));
    assert!(cen_loss(&[z, one, one], &[0], true).is_err());
}

#[test]
fn aac_examples() {
    let g = Graph::new();
    let a = aac_loss(&[col(&g, &[1.0, 0.0])], &[col(&g, &[0.0, 0.0])]).unwrap();
    assert_abs_diff_eq!(a.item(), 0.5f64.sqrt(), epsilon = 1e-12);
    assert_abs_diff_eq!(a.item(), 0.70710678, epsilon = 1e-8);
    let a = aac_loss(&[col(&g, &[0.3])], &[col(&g, &[-0.2])]).unwrap();
    assert_abs_diff_eq!(a.item(), 0.5, epsilon = 1e-12);
    let same = col(&g, &[0.1, -0.4, 0.9]);
    assert_eq!(aac_loss(&[same], &[same]).unwrap().item(), 0.0);
    assert!(matches!(aac_loss(&[], &[]), Err(LossError::Empty(_))));
    assert!(aac_loss(&[col(&g, &[0.1])], &[col(&g, &[0.1, 0.2])]).is_err());
}

#[test]
fn aac_pools_over_modalities() {
    let g = Graph::new();
    let a = aac_loss(
        &[col(&g, &[1.0]), col(&g, &[0.0]), col(&g, &[0.5])],
        &[col(&g, &[0.0]), col(&g, &[0.0]), col(&g, &[0.5])],
    )
    .unwrap();
    assert_abs_diff_eq!(a.item(), (1.0f64 / 3.0).sqrt(), epsilon = 1e-12);
}

#[test]
fn csr_examples() {
    let g = Graph::new();
    let c = |phi: f64, theta: f64| csr_loss(&[col(&g, &[phi])], &[col(&g, &[theta])]).unwrap().item();
    assert_abs_diff_eq!(c(0.9, 0.5), 0.4, epsilon = 1e-12);
    assert_eq!(c(0.2, 0.5), 0.0);
    assert_eq!(c(0.5, 0.5), 0.0);
    assert!(csr_loss(&[], &[]).is_err());
}

#[test]
fn are_examples() {
    let g = Graph::new();
    let are = |aac: f64, csr: f64, gamma: f64, mu: f64| {
        are_loss(&g.scalar(aac), &g.scalar(csr), gamma, mu).unwrap().item()
    };
    assert_abs_diff_eq!(are(0.7071, 0.4, 0.5, 0.005), 0.35555, epsilon = 1e-12);
    assert_eq!(are(0.7071, 0.4, 0.0, 0.0), 0.0);
    assert_eq!(are(0.0, 0.0, 0.5, 0.005), 0.0);
}

#[test]
fn cross_entropy_examples() {
    let g = Graph::new();
    for k in [2, 3, 7] {
        let logits = g.constant(Mat::filled(4, k, 0.3));
        let ce = cross_entropy(&logits, &[0, 1, 0, 1]).unwrap();
        assert_abs_diff_eq!(ce.item(), (k as f64).ln(), epsilon = 1e-12);
    }
    let ce = |row: Vec<f64>| cross_entropy(&g.constant(Mat::row_vector(row)), &[0]).unwrap().item();
    let oracle = |row: &[f64]| -> f64 { row.iter().map(|x| x.exp()).sum::<f64>().ln() - row[0] };
    assert_abs_diff_eq!(ce(vec![10.0, 0.0, 0.0]), oracle(&[10.0, 0.0, 0.0]), epsilon = 1e-12);
    assert_abs_diff_eq!(ce(vec![10.0, 0.0, 0.0]), 9.0797e-5, epsilon = 1e-8);
    assert_abs_diff_eq!(ce(vec![0.0, 10.0, 0.0]), 10.00009, epsilon = 1e-5);
    assert_abs_diff_eq!(ce(vec![1000.0, 0.0, 0.0]), 0.0, epsilon = 1e-12);
    assert!(ce(vec![0.0, 1000.0]).is_finite());
}

#[test]
fn cross_entropy_rejects_bad_labels() {
    let g = Graph::new();
    let logits = g.constant(Mat::zeros(2, 3));
    assert!(matches!(
        cross_entropy(&logits, &[0, 3]),
        Err(LossError::LabelOutOfRange { label: 3, num_classes: 3 })
    ));
    assert!(matches!(cross_entropy(&logits, &[0]), Err(LossError::Shape { .. })));
}

#[test]
fn total_examples() {
    let g = Graph::new();
    let w = LossWeights::default();
    let (cen, are, ce) = (g.scalar(0.31326), g.scalar(0.35555), g.scalar(1.0986));
    let t = total_loss(Some(&cen), Some(&are), &ce, &w, false).unwrap();
    assert_abs_diff_eq!(t.item(), 0.31326 + 0.09 * 0.35555 + 1.0986, epsilon = 1e-12);
    assert_abs_diff_eq!(t.item(), 1.44386, epsilon = 1e-5);
    let warm = total_loss(Some(&cen), Some(&are), &ce, &LossWeights { eta: 2.0, ..w }, true).unwrap();
    assert_abs_diff_eq!(warm.item(), 2.0 * 1.0986, epsilon = 1e-12);
    let z = g.scalar(0.0);
    assert_eq!(total_loss(Some(&z), Some(&z), &z, &w, false).unwrap().item(), 0.0);
    assert_abs_diff_eq!(total_loss(None, None, &ce, &w, false).unwrap().item(), 1.0986);
}

/// Loop form of `‖GᵀH‖²_F / (N·d²)`.
fn ort_norm_oracle(g: &Mat, h: &Mat) -> f64 {
    let (n, d) = g.shape();
    let mut total = 0.0;
    for a in 0..d {
        for b in 0..d {
            let mut acc = 0.0;
            for i in 0..n {
                acc += g.get(i, a) * h.get(i, b);
            }
            total += acc * acc;
        }
    }
    total / (n * d * d) as f64
}

#[test]
fn ortho_examples() {
    let g = Graph::new();
    let gm = Mat::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]);
    let hm = Mat::from_rows(&[vec![0.0, 2.0], vec![0.0, -1.0]]);
    let on = ortho_baseline_loss(OrthoKind::OrtNorm, &[g.constant(gm.clone())], &[g.constant(hm)]).unwrap();
    assert_eq!(on.item(), 0.0);
    let parallel = gm.map(|x| 2.5 * x);
    let oc = ortho_baseline_loss(OrthoKind::OrtCos, &[g.constant(gm)], &[g.constant(parallel)]).unwrap();
    assert_abs_diff_eq!(oc.item(), 1.0, epsilon = 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let gs: Vec<Mat> = (0..3).map(|_| random_mat(&mut rng, 2, 2)).collect();
    let hs: Vec<Mat> = (0..3).map(|_| random_mat(&mut rng, 2, 2)).collect();
    let expected = (0..3).map(|m| ort_norm_oracle(&gs[m], &hs[m])).sum::<f64>() / 3.0;
    let gt: Vec<Tensor> = gs.iter().map(|m| g.constant(m.clone())).collect();
    let ht: Vec<Tensor> = hs.iter().map(|m| g.constant(m.clone())).collect();
    let got = ortho_baseline_loss(OrthoKind::OrtNorm, &gt, &ht).unwrap();
    assert_abs_diff_eq!(got.item(), expected, epsilon = 1e-12);

    assert!(matches!(
        ortho_baseline_loss(OrthoKind::OrtNorm, &gt[..1], &[g.constant(Mat::zeros(3, 2))]),
        Err(LossError::Shape { .. })
    ));
    assert!(ortho_baseline_loss(OrthoKind::OrtCos, &gt, &ht[..2]).is_err());
}

#[test]
fn component_grad_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let other = random_mat(&mut rng, 5, 1);
    // Keep every difference away from the hinge kink.
    let x = Mat::column(vec![0.9, -0.8, 0.7, 0.65, -0.5]);
    let phi = Mat::column(vec![0.2, 0.1, 0.3, 0.95, -0.2]);
    let checks: Vec<(&str, f64)> = vec![
        (
            "aac",
            grad_check(|g, t| aac_loss(&[t], &[g.constant(other.clone())]).map_err(tensor_err), &x, 1e-6).unwrap(),
        ),
        (
            "csr",
            grad_check(|g, t| csr_loss(&[g.constant(phi.clone())], &[t]).map_err(tensor_err), &x, 1e-6).unwrap(),
        ),
        (
            "ce",
            grad_check(
                |_, t| cross_entropy(&t.transpose(), &[3]).map_err(tensor_err),
                &x,
                1e-6,
            )
            .unwrap(),
        ),
    ];
    let h = random_mat(&mut rng, 4, 3);
    let gm = random_mat(&mut rng, 4, 3);
    let ortho: Vec<(&str, f64)> = [("ort_norm", OrthoKind::OrtNorm), ("ort_cos", OrthoKind::OrtCos)]
        .into_iter()
        .map(|(name, kind)| {
            let e = grad_check(
                |g, t| ortho_baseline_loss(kind, &[t], &[g.constant(h.clone())]).map_err(tensor_err),
                &gm,
                1e-6,
            )
            .unwrap();
            (name, e)
        })
        .collect();
    for (name, err) in checks.into_iter().chain(ortho) {
        assert!(err < 1e-6, "{name}: {err}");
    }
}

fn tiny_setup(seed: u64) -> (ModelParams, [Mat; 3], Vec<usize>) {
    let dims = ModelDims::new(4, 3);
    let params = ModelParams::init(dims, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [random_mat(&mut rng, 5, 4), random_mat(&mut rng, 5, 4), random_mat(&mut rng, 5, 4)];
    (params, inputs, vec![0, 1, 2, 0, 1])
}

#[test]
fn warmup_total_has_no_angle_head_gradient() {
    let (params, inputs, labels) = tiny_setup(4);
    let graph = Graph::new();
    let bound = params.bind(&graph, true);
    let fwd = forward(&graph, &bound, &inputs, ForwardOptions::default()).unwrap();
    let obj = objective(&fwd, &labels, &ObjectiveSpec::default(), true).unwrap();
    assert!(obj.aac.item() > 0.0);
    assert_eq!(obj.cen_contribution, 0.0);
    assert_eq!(obj.angular_contribution, 0.0);
    assert_abs_diff_eq!(obj.total.item(), obj.ce.item(), epsilon = 1e-15);
    obj.total.backward().unwrap();
    let grads = bound.grads();
    assert_eq!(grads.angle_head.weight.max_abs(), 0.0);
    assert_eq!(grads.angle_head.bias.max_abs(), 0.0);
    assert!(grads.classifier.out.weight.max_abs() > 0.0);

    let graph = Graph::new();
    let bound = params.bind(&graph, true);
    let fwd = forward(&graph, &bound, &inputs, ForwardOptions::default()).unwrap();
    let obj = objective(&fwd, &labels, &ObjectiveSpec::default(), false).unwrap();
    obj.total.backward().unwrap();
    assert!(bound.grads().angle_head.weight.max_abs() > 0.0);
}

#[test]
fn objective_respects_flags() {
    let (params, inputs, labels) = tiny_setup(6);
    let graph = Graph::new();
    let bound = params.bind(&graph, false);
    let fwd = forward(&graph, &bound, &inputs, ForwardOptions::default()).unwrap();
    let w = LossWeights::default();
    let run = |spec: ObjectiveSpec| objective(&fwd, &labels, &spec, false).unwrap();

    let full = run(ObjectiveSpec::default());
    let expected = w.alpha * full.cen.item()
        + w.beta * (w.gamma * full.aac.item() + w.mu * full.csr.item())
        + w.eta * full.ce.item();
    assert_abs_diff_eq!(full.total.item(), expected, epsilon = 1e-12);
    assert!(full.ortho.is_none());

    let no_cen = run(ObjectiveSpec { cen_enabled: false, ..Default::default() });
    assert_abs_diff_eq!(no_cen.total.item(), expected - full.cen.item(), epsilon = 1e-12);

    let no_aac = run(ObjectiveSpec { aac_enabled: false, ..Default::default() });
    assert_abs_diff_eq!(no_aac.are.item(), w.mu * full.csr.item(), epsilon = 1e-15);

    let none = run(ObjectiveSpec { constraint: Constraint::None, ..Default::default() });
    assert_abs_diff_eq!(none.total.item(), full.cen.item() + full.ce.item(), epsilon = 1e-12);
    assert_eq!(none.angular_contribution, 0.0);

    let ort = run(ObjectiveSpec { constraint: Constraint::OrtCos, ..Default::default() });
    let o = ort.ortho.unwrap().item();
    assert_abs_diff_eq!(ort.total.item(), full.cen.item() + w.beta * o + full.ce.item(), epsilon = 1e-12);
    let names: Vec<&str> = ort.components().iter().map(|c| c.0).collect();
    assert_eq!(names, ["cen", "aac", "csr", "are", "ce", "ortho", "total"]);
}

#[test]
fn objective_grad_check_through_model() {
    // Perturb one specific-encoder weight and differentiate the full
    // objective; cosine-based hinge terms are smooth almost everywhere.
    let (params, inputs, labels) = tiny_setup(8);
    let spec = ObjectiveSpec::default();
    let target = params.specific[1].first.weight.clone();
    let value_at = |w: Mat, graph: &Graph| -> f64 {
        let mut p = params.clone();
        p.specific[1].first.weight = w;
        let bound = p.bind(graph, false);
        let fwd = forward(graph, &bound, &inputs, ForwardOptions::default()).unwrap();
        objective(&fwd, &labels, &spec, false).unwrap().total.item()
    };
    let graph = Graph::new();
    let bound = params.bind(&graph, true);
    let fwd = forward(&graph, &bound, &inputs, ForwardOptions::default()).unwrap();
    objective(&fwd, &labels, &spec, false).unwrap().total.backward().unwrap();
    let analytic = bound.specific[1].first.weight.grad().unwrap();
    let mut worst: f64 = 0.0;
    for idx in 0..target.len() {
        let h = 1e-6;
        let mut plus = target.clone();
        plus.data_mut()[idx] += h;
        let mut minus = target.clone();
        minus.data_mut()[idx] -= h;
        let numeric = (value_at(plus, &Graph::new()) - value_at(minus, &Graph::new())) / (2.0 * h);
        worst = worst.max(crate::tensor::gradcheck::relative_error(analytic.data()[idx], numeric));
    }
    assert!(worst < 1e-4, "{worst}");
}

proptest! {
    #[test]
    fn losses_are_nonnegative(seed in 0u64..10_000, n in 1usize..6, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let g3 = [random_mat(&mut rng, n, d), random_mat(&mut rng, n, d), random_mat(&mut rng, n, d)];
        let graph = Graph::new();
        let a = col(&graph, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let b = col(&graph, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        prop_assert!(cen_value(&g3, &labels, false) >= 0.0);
        prop_assert!(aac_loss(&[a], &[b]).unwrap().item() >= 0.0);
        prop_assert!(csr_loss(&[a], &[b]).unwrap().item() >= 0.0);
        let logits = graph.constant(random_mat(&mut rng, n, 3).map(|x| 20.0 * x));
        prop_assert!(cross_entropy(&logits, &labels).unwrap().item() >= 0.0);
    }

    #[test]
    fn csr_ignores_changes_that_stay_satisfied(seed in 0u64..10_000, shift in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let phi: Vec<f64> = theta.iter().map(|t| t - rng.random_range(0.0..1.0)).collect();
        let phi2: Vec<f64> = phi.iter().map(|p| p - shift).collect();
        let graph = Graph::new();
        let th = col(&graph, &theta);
        prop_assert_eq!(csr_loss(&[col(&graph, &phi)], &[th]).unwrap().item(), 0.0);
        prop_assert_eq!(csr_loss(&[col(&graph, &phi2)], &[th]).unwrap().item(), 0.0);
    }

    #[test]
    fn cosine_terms_are_scale_invariant(seed in 0u64..10_000, scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g3: Vec<Mat> = (0..3).map(|_| random_mat(&mut rng, 4, 3)).collect();
        let h3: Vec<Mat> = (0..3).map(|_| random_mat(&mut rng, 4, 3)).collect();
        let eval = |k: f64| -> (f64, f64) {
            let graph = Graph::new();
            let g: Vec<Tensor> = g3.iter().map(|m| graph.constant(m.map(|x| k * x))).collect();
            let h: Vec<Tensor> = h3.iter().map(|m| graph.constant(m.map(|x| k * x))).collect();
            let theta: Vec<Tensor> = g.iter().zip(&h).map(|(a, b)| a.row_cosine(b).unwrap()).collect();
            let phi: Vec<Tensor> = (0..3)
                .map(|m| {
                    let (s1, s2) = ((m + 1) % 3, (m + 2) % 3);
                    g[m].row_cosine(&g[s1]).unwrap().add(&g[m].row_cosine(&g[s2]).unwrap()).unwrap().scale(0.5)
                })
                .collect();
            (
                csr_loss(&phi, &theta).unwrap().item(),
                ortho_baseline_loss(OrthoKind::OrtCos, &g, &h).unwrap().item(),
            )
        };
        let (c1, o1) = eval(1.0);
        let (c2, o2) = eval(scale);
        prop_assert!((c1 - c2).abs() < 1e-12);
        prop_assert!((o1 - o2).abs() < 1e-12);
    }
}
