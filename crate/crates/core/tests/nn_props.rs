//! Model-level gradient checks, Adam against its closed form, and spectral
//! normalization against a Jacobi SVD.

use graphmark::graph::Graph;
use graphmark::nn::{
    default_node_features, spectral_normalize, Adam, AdamConfig, Gradients, GraphObjective, Hyper, LayerKind, Model,
    ParamGroup, ParamSelector, Tensor,
};
use graphmark::rng::rng_for;
use rand::Rng;

fn small_hyper(kind: LayerKind) -> Hyper {
    Hyper { layer_kind: kind, hidden_dim: 6, head_hidden: 5, ..Hyper::default() }
}

fn featured(g: Graph) -> Graph {
    let f = default_node_features(&g);
    g.with_features(f).unwrap()
}

/// Relative error between `grad` and central differences of `value` over
/// every flat parameter.
fn model_fd_error(model: &Model, grad: &Gradients, value: &dyn Fn(&Model) -> f64) -> f64 {
    let theta = model.flatten();
    let analytic = grad.flatten();
    let h = 1e-5;
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    let mut probe = model.clone();
    for j in 0..theta.len() {
        let mut t = theta.clone();
        t[j] += h;
        probe.assign_flat(&t).unwrap();
        let up = value(&probe);
        t[j] -= 2.0 * h;
        probe.assign_flat(&t).unwrap();
        let down = value(&probe);
        let fd = (up - down) / (2.0 * h);
        diff += (analytic[j] - fd).powi(2);
        na += analytic[j].powi(2);
        nf += fd.powi(2);
    }
    diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-6)
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let g = featured(Graph::new(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)]).unwrap());
    for kind in [LayerKind::Gcn, LayerKind::Gin] {
        for seed in 0..3 {
            let model = Model::new(small_hyper(kind), seed).unwrap();
            let obj = GraphObjective { task: Some((1, 0.7)), kd: Some((vec![0.3, 0.7], 2.0, 0.5)), wm: Some((0.8, 1.3)) };
            let (_, grad) = model.objective_with_grad(&g, &obj).unwrap();
            let err = model_fd_error(&model, &grad, &|m| m.objective_with_grad(&g, &obj).unwrap().0);
            assert!(err < 1e-6, "{kind:?} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn score_gradient_matches_finite_differences() {
    let g = featured(Graph::path(3).unwrap());
    for kind in [LayerKind::Gcn, LayerKind::Gin] {
        let model = Model::new(small_hyper(kind), 11).unwrap();
        let (s, grad) = model.score_with_grad(&g).unwrap();
        assert!(s > 0.0 && s < 1.0);
        let err = model_fd_error(&model, &grad, &|m| m.perception_score(&g).unwrap());
        assert!(err < 1e-6, "{kind:?}: relative error {err:e}");
    }
}

#[test]
fn param_grad_norm_matches_flat_norm() {
    let g = featured(Graph::cycle(6).unwrap());
    let mut model = Model::new(Hyper::default(), 4).unwrap();
    let (_, grad) = model.objective_with_grad(&g, &GraphObjective { task: Some((0, 1.0)), wm: Some((0.2, 1.0)), kd: None }).unwrap();
    model.set_grads(&grad).unwrap();
    let flat: f64 = grad.flatten().iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((model.param_grad_norm(ParamSelector::All).unwrap() - flat).abs() < 1e-12 * flat.max(1.0));
    let head: f64 = model
        .params
        .iter()
        .zip(&grad.values)
        .filter(|(p, _)| p.group == ParamGroup::PerceptionHead)
        .flat_map(|(_, g)| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    let got = model.param_grad_norm(ParamSelector::Group(ParamGroup::PerceptionHead)).unwrap();
    assert!((got - head).abs() < 1e-12 * head.max(1.0));
}

#[test]
fn adam_constant_gradient_closed_form() {
    // With a constant gradient g the bias-corrected moments are exactly g and
    // g², so each step is w <- (1 - lr λ) w - lr g / (|g| + eps) and five steps
    // sum to a geometric series. The perception head has λ = 0.
    let mut model = Model::new(Hyper::default(), 5).unwrap();
    let cfg = AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 };
    let mut rng = rng_for(5, &[]);
    let mut grads = Gradients::zeros_like(&model);
    grads.values.iter_mut().flatten().for_each(|x| *x = rng.gen_range(-2.0..2.0));
    let before = model.clone();
    let mut opt = Adam::new(&model, cfg);
    for _ in 0..5 {
        opt.step(&mut model, &grads).unwrap();
    }
    assert_eq!(opt.steps(), 5);
    for ((p0, p1), g) in before.params.iter().zip(&model.params).zip(&grads.values) {
        let lambda = if p0.group == ParamGroup::PerceptionHead { 0.0 } else { cfg.weight_decay };
        let a = 1.0 - cfg.lr * lambda;
        for ((w0, w1), gj) in p0.tensor.values.iter().zip(&p1.tensor.values).zip(g) {
            let c = cfg.lr * gj / (gj.abs() + cfg.eps);
            let series = if lambda == 0.0 { 5.0 } else { (1.0 - a.powi(5)) / (1.0 - a) };
            let want = a.powi(5) * w0 - c * series;
            assert!((w1 - want).abs() < 1e-12, "{}: {w1} vs {want}", p0.name);
        }
    }
}

/// Largest singular value by one-sided Jacobi on the columns.
fn jacobi_sigma_max(rows: usize, cols: usize, values: &[f64]) -> f64 {
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| values[i * cols + j]).collect()).collect();
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (a[p][i], a[q][i]);
                    a[p][i] = c * x - s * y;
                    a[q][i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    a.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max)
}

#[test]
fn spectral_norm_bounded_by_jacobi_oracle() {
    let mut rng = rng_for(8, &[]);
    for case in 0..200 {
        let values: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let w = Tensor::new(8, 8, values.clone()).unwrap();
        let nu = [0.5, 1.0, 2.0][case % 3];
        let out = spectral_normalize(&w, nu, 20);
        let sigma_in = jacobi_sigma_max(8, 8, &values);
        let sigma_out = jacobi_sigma_max(8, 8, &out.values);
        assert!(sigma_out <= 1.01 * nu, "case {case}: sigma {sigma_out} > 1.01 nu");
        if sigma_in <= nu {
            assert_eq!(out.values, values);
        }
    }
}

#[test]
fn spectral_norm_diagonal_example() {
    let w = Tensor::new(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
    let out = spectral_normalize(&w, 1.0, 50);
    assert!((out.get(0, 0) - 1.0).abs() < 1e-6);
    assert!((out.get(1, 1) - 1.0 / 3.0).abs() < 1e-6);
    assert!((jacobi_sigma_max(2, 2, &[3.0, 0.0, 0.0, 1.0]) - 3.0).abs() < 1e-12);
}

#[test]
fn perception_head_is_lipschitz_after_normalization() {
    let mut model = Model::new(Hyper::default(), 2).unwrap();
    for p in &mut model.params {
        if p.group == ParamGroup::PerceptionHead {
            p.tensor.values.iter_mut().for_each(|x| *x *= 25.0);
        }
    }
    model.apply_spectral_norm(1.0, 30);
    for p in model.params.iter().filter(|p| p.group == ParamGroup::PerceptionHead && p.name.ends_with(".weight")) {
        let t = &p.tensor;
        assert!(jacobi_sigma_max(t.rows, t.cols, &t.values) <= 1.01, "{}", p.name);
    }
}
