mod common;

use common::*;
use metasre::autodiff::{Graph, Tensor};
use metasre::encoder::{encode, EncoderParams, MarkedSequence, E1_END, E1_START, E2_END, E2_START};
use metasre::meta::{meta_gradient, meta_objective, meta_step, MetaConfig, WeightMode};
use metasre::networks::{
    classification_loss, init_params, ClassifierParams, NetDims, OptimState, ParamSet, PseudoTerm, Role,
};

fn pseudo_margin(eta: &ClassifierParams, seqs: &[MarkedSequence]) -> f64 {
    seqs.iter()
        .map(|s| {
            let mut p = eta.predict(s).unwrap().probs;
            p.sort_by(|a, b| b.total_cmp(a));
            p[0] - p[1]
        })
        .fold(f64::INFINITY, f64::min)
}

/// Instances whose pseudo labels do not flip within a finite-difference step.
fn stable_instances(count: usize, labeled: usize, unlabeled: usize) -> Vec<Instance> {
    (0u64..)
        .map(|s| instance(1000 + s, tiny_dims(), labeled, unlabeled))
        .filter(|inst| pseudo_margin(&inst.eta, &inst.unlabeled) > 1e-2)
        .take(count)
        .collect()
}

#[test]
fn encoder_sum_matches_differences_on_embeddings() {
    // six words plus four markers, h_R = 8
    let dims = NetDims { classes: 2, hidden: 8, embedding: 5, vocab: 12 };
    let params = init_params(7, Role::Rcn, dims).unwrap().tensors.encoder;
    let seq = MarkedSequence {
        token_ids: vec![5, E1_START, 6, E1_END, 7, E2_START, 8, E2_END, 9, 10],
        e1_start_pos: 1,
        e2_start_pos: 5,
    };
    let sum_h = |emb: &Tensor| {
        let mut g = Graph::new();
        let p = EncoderParams {
            embedding: g.leaf(emb.clone(), true).unwrap(),
            fwd_wx: g.leaf(params.fwd_wx.clone(), true).unwrap(),
            fwd_wh: g.leaf(params.fwd_wh.clone(), true).unwrap(),
            fwd_b: g.leaf(params.fwd_b.clone(), true).unwrap(),
            bwd_wx: g.leaf(params.bwd_wx.clone(), true).unwrap(),
            bwd_wh: g.leaf(params.bwd_wh.clone(), true).unwrap(),
            bwd_b: g.leaf(params.bwd_b.clone(), true).unwrap(),
        };
        let h = encode(&mut g, &seq, &p).unwrap();
        let s = g.sum(h);
        let grad = g.grad_values(s, &[p.embedding]).unwrap().remove(0);
        (g.value(s).item(), grad)
    };
    let (_, analytic) = sum_h(&params.embedding);
    let step = 1e-5;
    let mut checked = 0;
    for i in 0..analytic.len() {
        let mut up = params.embedding.values().to_vec();
        let mut down = up.clone();
        up[i] += step;
        down[i] -= step;
        let f = |v: Vec<f64>| sum_h(&Tensor::new(params.embedding.shape().to_vec(), v).unwrap()).0;
        let n = (f(up) - f(down)) / (2.0 * step);
        assert!(rel_err(analytic.values()[i], n, 1e-4) <= 1e-4, "coordinate {i}: {} vs {n}", analytic.values()[i]);
        checked += (analytic.values()[i] != 0.0) as usize;
    }
    // every row that appears in the sequence carries gradient
    assert_eq!(checked, 10 * dims.embedding);
}

#[test]
fn full_network_loss_matches_differences() {
    for seed in 0..10 {
        let inst = instance(seed, NetDims { classes: 3, hidden: 6, embedding: 4, vocab: 12 }, 3, 2);
        let weights = [0.7, 0.35];
        let loss = |p: &ParamSet<Tensor>| -> (f64, ParamSet<Tensor>) {
            let mut g = Graph::new();
            let v = p.to_graph(&mut g, true).unwrap();
            let pseudo: Vec<PseudoTerm> = inst
                .unlabeled
                .iter()
                .zip(weights)
                .enumerate()
                .map(|(i, (seq, w))| PseudoTerm { seq, label: i % 3, weight: g.constant(Tensor::scalar(w)).unwrap() })
                .collect();
            let l = classification_loss(&mut g, &inst.labeled, &pseudo, &v).unwrap();
            let grads = g.grad_values(l, &v.to_vec()).unwrap();
            (g.value(l).item(), ParamSet::from_vec(grads).unwrap())
        };
        let (_, analytic) = loss(&inst.tau.tensors);
        let worst = max_fd_error(&inst.tau.tensors, &analytic, 1e-5, 1e-4, |p| loss(p).0);
        assert!(worst <= 1e-4, "seed {seed}: {worst}");
    }
}

#[test]
fn meta_gradient_matches_differences() {
    let alpha = 0.5;
    let cfg = MetaConfig { inner_lr: alpha, ..MetaConfig::default() };
    for (n, inst) in stable_instances(20, 4, 2).iter().enumerate() {
        let (lab, unl) = (inst.labeled_refs(), inst.unlabeled_refs());
        let mg = meta_gradient(&inst.tau, &inst.eta, &lab, &unl, &cfg, WeightMode::Confidence).unwrap();
        assert!(mg.trace.grad_norm > 1e-6);
        let worst = max_fd_error(&inst.eta.tensors, &mg.grad, 1e-4, 1e-4, |e| {
            meta_objective(&inst.tau, &inst.eta.with_tensors(e.clone()), &lab, &unl, alpha).unwrap()
        });
        assert!(worst <= 1e-3, "instance {n}: {worst}");
    }
}

#[test]
fn meta_step_descends_along_the_meta_gradient() {
    // with plain descent at rate 1 the update is exactly minus the gradient
    let cfg = MetaConfig { inner_lr: 0.3, ..MetaConfig::default() };
    for inst in stable_instances(3, 6, 4) {
        let (lab, unl) = (inst.labeled_refs(), inst.unlabeled_refs());
        let mut state = OptimState::sgd(&inst.eta.tensors, 1.0);
        let (next, trace) = meta_step(&inst.tau, &inst.eta, &lab, &unl, &cfg, &mut state).unwrap();
        let recovered = inst.eta.tensors.axpy(-1.0, &next.tensors);
        let worst = max_fd_error(&inst.eta.tensors, &recovered, 1e-4, 1e-4, |e| {
            meta_objective(&inst.tau, &inst.eta.with_tensors(e.clone()), &lab, &unl, cfg.inner_lr).unwrap()
        });
        assert!(worst <= 1e-3, "{worst}");
        assert_eq!(trace.pseudo_count, 4);
    }
}

#[test]
fn eta_gradient_is_linear_in_small_alpha() {
    for inst in stable_instances(5, 4, 2) {
        let (lab, unl) = (inst.labeled_refs(), inst.unlabeled_refs());
        let norm = |alpha: f64| {
            let cfg = MetaConfig { inner_lr: alpha, ..MetaConfig::default() };
            meta_gradient(&inst.tau, &inst.eta, &lab, &unl, &cfg, WeightMode::Confidence).unwrap().trace.grad_norm
        };
        let ratio = norm(1e-3) / norm(1e-4);
        assert!((ratio - 10.0).abs() <= 2.0, "ratio {ratio}");
    }
}

#[test]
fn zero_weights_and_zero_step_cut_every_path() {
    let cfg = MetaConfig { inner_lr: 0.5, ..MetaConfig::default() };
    for inst in stable_instances(5, 4, 3) {
        let (lab, unl) = (inst.labeled_refs(), inst.unlabeled_refs());
        let zeroed = meta_gradient(&inst.tau, &inst.eta, &lab, &unl, &cfg, WeightMode::Zeroed).unwrap();
        assert!(zeroed.grad.iter().flat_map(Tensor::values).all(|&x| x == 0.0));
        let still = MetaConfig { inner_lr: 0.0, ..cfg.clone() };
        let g0 = meta_gradient(&inst.tau, &inst.eta, &lab, &unl, &still, WeightMode::Confidence).unwrap();
        assert!(g0.grad.iter().flat_map(Tensor::values).all(|&x| x == 0.0));
    }
}
