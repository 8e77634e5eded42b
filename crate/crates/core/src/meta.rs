//! Meta update of the label generator η through a differentiable one-step
//! update of the classifier τ.
//!
//! Each step labels an unlabeled batch with η, keeping the confidences
//! `w_m` on the tape, builds the weighted classification loss of τ,
//! takes one gradient-descent step `τ⁺ = τ − α∇τ L` with the backward pass
//! recorded, and differentiates the labeled loss at τ⁺ with respect to η.
//! η reaches τ⁺ only through the weights `w_m`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::networks::{
    example_loss, forward, loss_terms, sgd_adam_step, train_epoch, ClassifierParams, LabeledExample,
    OptimKind, OptimState, ParamSet, PseudoTerm, TrainItem,
};
use crate::encoder::MarkedSequence;
use crate::par::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Step size α of the inner update.
    pub inner_lr: f64,
    /// Learning rate of the optimizer that updates η.
    pub outer_lr: f64,
    pub outer_optimizer: OptimKind,
    /// Supervised pre-training of η on labeled data before the first meta step.
    pub supervised_warmup: bool,
    pub warmup_epochs: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Passes over the labeled set per self-training iteration.
    pub meta_epochs: usize,
    /// Drops the recorded backward pass of the inner step. Since η reaches
    /// τ⁺ only through that gradient, the η-gradient is then identically zero.
    pub first_order: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 1e-4,
            outer_lr: 1e-4,
            outer_optimizer: OptimKind::Adam,
            supervised_warmup: true,
            warmup_epochs: 1,
            labeled_batch: 16,
            unlabeled_batch: 16,
            meta_epochs: 1,
            first_order: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::Config(format!("inner_lr must be positive, got {}", self.inner_lr)));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return Err(Error::Config(format!("outer_lr must be positive, got {}", self.outer_lr)));
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return Err(Error::Config("meta batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Diagnostics of one meta step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaStepTrace {
    pub inner_loss: f64,
    pub meta_loss: f64,
    pub grad_norm: f64,
    pub pseudo_count: usize,
}

/// How the generator's confidences enter the inner loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    Confidence,
    /// Multiplies every weight by zero, severing the η → τ⁺ path.
    Zeroed,
}

/// `τ⁺ = τ − α · ∇τ inner_loss`, with the gradient kept on the tape when
/// `create_graph` is set.
pub fn inner_update(
    g: &mut Graph,
    tau: &ParamSet<Var>,
    inner_loss: Var,
    alpha: f64,
    create_graph: bool,
) -> Result<ParamSet<Var>> {
    let wrt = tau.to_vec();
    let grads = g.grad(inner_loss, &wrt, create_graph)?;
    let mut out = Vec::with_capacity(wrt.len());
    for (&t, &gr) in wrt.iter().zip(&grads) {
        let step = g.scale(gr, alpha);
        out.push(g.sub(t, step)?);
    }
    Ok(ParamSet::from_vec(out).expect("layout"))
}

/// Sum of labeled cross-entropies under the updated classifier.
pub fn meta_loss(g: &mut Graph, tau_plus: &ParamSet<Var>, labeled: &[&LabeledExample]) -> Result<Var> {
    if labeled.is_empty() {
        return Err(Error::EmptyBatch("meta loss needs labeled examples"));
    }
    let mut total: Option<Var> = None;
    for ex in labeled {
        let l = example_loss(g, &ex.seq, ex.label, tau_plus)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Pseudo labels (argmax, constant) and confidences (differentiable) from η.
fn generator_terms<'a>(
    g: &mut Graph,
    eta: &ParamSet<Var>,
    unlabeled: &'a [&MarkedSequence],
    mode: WeightMode,
) -> Result<Vec<PseudoTerm<'a>>> {
    let mut terms = Vec::with_capacity(unlabeled.len());
    for &seq in unlabeled {
        let probs = forward(g, seq, eta)?;
        let dist = crate::networks::Distribution { probs: g.value(probs).values().to_vec() };
        let label = dist.argmax();
        let mut w = g.slice_cols(probs, label, 1)?;
        if mode == WeightMode::Zeroed {
            w = g.scale(w, 0.0);
        }
        terms.push(PseudoTerm { seq, label, weight: w });
    }
    Ok(terms)
}

/// Result of differentiating the meta objective.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub grad: ParamSet<Tensor>,
    pub trace: MetaStepTrace,
}

/// Gradient of the meta objective with respect to η. τ is read only.
pub fn meta_gradient(
    tau: &ClassifierParams,
    eta: &ClassifierParams,
    labeled: &[&LabeledExample],
    unlabeled: &[&MarkedSequence],
    cfg: &MetaConfig,
    mode: WeightMode,
) -> Result<MetaGradient> {
    if labeled.is_empty() {
        return Err(Error::EmptyBatch("meta step needs labeled examples"));
    }
    if unlabeled.is_empty() {
        return Err(Error::EmptyBatch("meta step needs unlabeled examples"));
    }
    let mut g = Graph::new();
    let tau_v = tau.tensors.to_graph(&mut g, true)?;
    let eta_v = eta.tensors.to_graph(&mut g, true)?;
    let terms = generator_terms(&mut g, &eta_v, unlabeled, mode)?;
    let inner = loss_terms(&mut g, labeled, &terms, &tau_v)?.expect("labeled is non-empty");
    let tau_plus = inner_update(&mut g, &tau_v, inner, cfg.inner_lr, !cfg.first_order)?;
    let outer = meta_loss(&mut g, &tau_plus, labeled)?;
    let grads = g.grad_values(outer, &eta_v.to_vec())?;
    let grad = ParamSet::from_vec(grads).expect("layout");
    let trace = MetaStepTrace {
        inner_loss: g.value(inner).item(),
        meta_loss: g.value(outer).item(),
        grad_norm: grad.l2_norm(),
        pseudo_count: terms.len(),
    };
    if !grad.all_finite() || !trace.meta_loss.is_finite() || !trace.inner_loss.is_finite() {
        return Err(Error::NonFiniteGradient(format!("meta loss {}", trace.meta_loss)));
    }
    Ok(MetaGradient { grad, trace })
}

/// Value of the meta objective at (τ, η), evaluated without any gradient
/// bookkeeping beyond the inner step.
pub fn meta_objective(
    tau: &ClassifierParams,
    eta: &ClassifierParams,
    labeled: &[&LabeledExample],
    unlabeled: &[&MarkedSequence],
    alpha: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let tau_v = tau.tensors.to_graph(&mut g, true)?;
    let eta_v = eta.tensors.to_graph(&mut g, false)?;
    let terms = generator_terms(&mut g, &eta_v, unlabeled, WeightMode::Confidence)?;
    let inner = loss_terms(&mut g, labeled, &terms, &tau_v)?.ok_or(Error::EmptyBatch("meta objective"))?;
    let tau_plus = inner_update(&mut g, &tau_v, inner, alpha, false)?;
    let outer = meta_loss(&mut g, &tau_plus, labeled)?;
    Ok(g.value(outer).item())
}

/// One meta update of η: returns the new η and the step trace. τ is untouched.
pub fn meta_step(
    tau: &ClassifierParams,
    eta: &ClassifierParams,
    labeled: &[&LabeledExample],
    unlabeled: &[&MarkedSequence],
    cfg: &MetaConfig,
    eta_state: &mut OptimState,
) -> Result<(ClassifierParams, MetaStepTrace)> {
    let mg = meta_gradient(tau, eta, labeled, unlabeled, cfg, WeightMode::Confidence)?;
    let next = sgd_adam_step(&eta.tensors, &mg.grad, eta_state)?;
    Ok((eta.with_tensors(next), mg.trace))
}

/// Plain cross-entropy training of η on labeled data; zero epochs is a no-op.
pub fn supervised_warmup(
    eta: &ClassifierParams,
    labeled: &[LabeledExample],
    epochs: usize,
    batch_size: usize,
    state: &mut OptimState,
    rng: &mut ChaCha8Rng,
    exec: Execution,
) -> Result<(ClassifierParams, Vec<f64>)> {
    if labeled.is_empty() {
        return Err(Error::EmptyBatch("warm-up needs labeled examples"));
    }
    let items: Vec<TrainItem> = labeled.iter().map(TrainItem::from).collect();
    let mut cur = eta.tensors.clone();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (next, loss) = train_epoch(&cur, &items, batch_size, state, rng, exec)?;
        cur = next;
        losses.push(loss);
    }
    Ok((eta.with_tensors(cur), losses))
}
