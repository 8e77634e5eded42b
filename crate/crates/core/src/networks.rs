//! The relation classifier shared by the classification network and the
//! label-generation network: encoder, a `2·h_R → h_R → K` dense head,
//! the confidence-weighted loss, optimizers and checkpoints.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy_labels, Graph, Tensor, Var};
use crate::encoder::{encode, EncoderParams, MarkedSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Which of the two networks a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Relation classification network (τ).
    Rcn,
    /// Relation label generation network (η).
    Rlgn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    pub classes: usize,
    pub hidden: usize,
    pub embedding: usize,
    pub vocab: usize,
}

impl NetDims {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return Err(Error::Config(format!("h_R must be even and positive, got {}", self.hidden)));
        }
        if self.embedding == 0 || self.vocab == 0 {
            return Err(Error::Config("embedding width and vocabulary must be positive".into()));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<[usize; 2]> {
        let half = self.hidden / 2;
        vec![
            [self.vocab, self.embedding],
            [self.embedding, half],
            [half, half],
            [1, half],
            [self.embedding, half],
            [half, half],
            [1, half],
            [2 * self.hidden, self.hidden],
            [1, self.hidden],
            [self.hidden, self.classes],
            [1, self.classes],
        ]
    }
}

/// Full parameter layout of one classifier, generic over storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<T> {
    pub encoder: EncoderParams<T>,
    /// 2·h_R × h_R
    pub dense1_w: T,
    pub dense1_b: T,
    /// h_R × K
    pub dense2_w: T,
    pub dense2_b: T,
}

impl<T> ParamSet<T> {
    pub fn names() -> Vec<&'static str> {
        let mut n = EncoderParams::<T>::NAMES.to_vec();
        n.extend(["dense1_w", "dense1_b", "dense2_w", "dense2_b"]);
        n
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.encoder
            .iter()
            .chain([&self.dense1_w, &self.dense1_b, &self.dense2_w, &self.dense2_b])
    }

    pub fn from_vec(items: Vec<T>) -> Option<Self> {
        let n = items.len();
        let mut it = items.into_iter();
        let encoder = EncoderParams::take_from(&mut it)?;
        let s = Self {
            encoder,
            dense1_w: it.next()?,
            dense1_b: it.next()?,
            dense2_w: it.next()?,
            dense2_b: it.next()?,
        };
        (n == 11).then_some(s)
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> ParamSet<U> {
        ParamSet::from_vec(self.iter().map(f).collect()).expect("same layout")
    }
}

impl ParamSet<Tensor> {
    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    /// Records every tensor as a leaf.
    pub fn to_graph(&self, g: &mut Graph, trainable: bool) -> Result<ParamSet<Var>> {
        let vars = self.iter().map(|t| g.leaf(t.clone(), trainable)).collect::<Result<Vec<_>>>()?;
        Ok(ParamSet::from_vec(vars).expect("same layout"))
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter().map(|t| t.values().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(Tensor::all_finite)
    }

    /// `self + c · other`, elementwise.
    pub fn axpy(&self, c: f64, other: &Self) -> Self {
        let v: Vec<Tensor> = self.iter().zip(other.iter()).map(|(a, b)| a.zip(b, |x, y| x + c * y)).collect();
        ParamSet::from_vec(v).expect("same layout")
    }
}

impl ParamSet<Var> {
    pub fn to_vec(&self) -> Vec<Var> {
        self.iter().copied().collect()
    }
}

/// Parameters of one network together with its role and dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub role: Role,
    pub dims: NetDims,
    pub tensors: ParamSet<Tensor>,
}

/// Glorot-uniform weight matrices and zero biases from a seeded stream.
pub fn init_params(seed: u64, role: Role, dims: NetDims) -> Result<ClassifierParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = dims
        .shapes()
        .into_iter()
        .map(|[r, c]| {
            if r == 1 {
                return Ok(Tensor::zeros(&[1, c]));
            }
            let a = (6.0 / (r + c) as f64).sqrt();
            let v = (0..r * c).map(|_| rng.gen_range(-a..=a)).collect();
            Tensor::matrix(r, c, v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassifierParams { role, dims, tensors: ParamSet::from_vec(tensors).expect("layout") })
}

impl ClassifierParams {
    pub fn with_tensors(&self, tensors: ParamSet<Tensor>) -> Self {
        Self { role: self.role, dims: self.dims, tensors }
    }

    /// Forward pass without recording gradients.
    pub fn predict(&self, seq: &MarkedSequence) -> Result<Distribution> {
        let mut g = Graph::new();
        let vars = self.tensors.to_graph(&mut g, false)?;
        let p = forward(&mut g, seq, &vars)?;
        Ok(Distribution { probs: g.value(p).values().to_vec() })
    }

    pub fn predict_all(&self, seqs: &[MarkedSequence], exec: Execution) -> Result<Vec<Distribution>> {
        par::map(exec, seqs, |s| self.predict(s)).into_iter().collect()
    }
}

/// Class probabilities for one mention.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub probs: Vec<f64>,
}

impl Distribution {
    /// Index of the largest probability; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

/// Class probabilities (1 × K) for a marked sequence.
pub fn forward(g: &mut Graph, seq: &MarkedSequence, p: &ParamSet<Var>) -> Result<Var> {
    let h = encode(g, seq, &p.encoder)?;
    let z1 = g.matmul(h, p.dense1_w)?;
    let z1 = g.add(z1, p.dense1_b)?;
    let a1 = g.tanh(z1);
    let z2 = g.matmul(a1, p.dense2_w)?;
    let z2 = g.add(z2, p.dense2_b)?;
    g.softmax_rows(z2)
}

/// A gold-labeled training mention.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub seq: MarkedSequence,
    pub label: usize,
}

/// A pseudo-labeled mention with its confidence weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedExample {
    pub seq: MarkedSequence,
    pub label: usize,
    pub weight: f64,
}

impl WeightedExample {
    pub fn new(seq: MarkedSequence, label: usize, weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::InvalidValue(format!("pseudo weight {weight} outside [0, 1]")));
        }
        Ok(Self { seq, label, weight })
    }
}

/// Pseudo-labeled term whose weight is a graph node (differentiable when it
/// comes from the label generator inside a meta step).
#[derive(Debug, Clone, Copy)]
pub struct PseudoTerm<'a> {
    pub seq: &'a MarkedSequence,
    pub label: usize,
    pub weight: Var,
}

/// Per-example cross-entropy of the classifier `p`.
pub fn example_loss(g: &mut Graph, seq: &MarkedSequence, label: usize, p: &ParamSet<Var>) -> Result<Var> {
    let probs = forward(g, seq, p)?;
    cross_entropy_labels(g, probs, &[label])
}

/// Sum of golden cross-entropies plus weighted pseudo cross-entropies.
/// Either side may be empty; an entirely empty batch yields `None`.
pub(crate) fn loss_terms(
    g: &mut Graph,
    golden: &[&LabeledExample],
    pseudo: &[PseudoTerm<'_>],
    p: &ParamSet<Var>,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for ex in golden {
        let l = example_loss(g, &ex.seq, ex.label, p)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    for term in pseudo {
        let l = example_loss(g, term.seq, term.label, p)?;
        let wl = g.mul(term.weight, l)?;
        total = Some(match total {
            Some(t) => g.add(t, wl)?,
            None => wl,
        });
    }
    Ok(total)
}

/// Confidence-weighted classification loss over golden and pseudo examples.
pub fn classification_loss(
    g: &mut Graph,
    golden: &[LabeledExample],
    pseudo: &[PseudoTerm<'_>],
    p: &ParamSet<Var>,
) -> Result<Var> {
    if golden.is_empty() {
        return Err(Error::EmptyBatch("classification loss needs golden examples"));
    }
    let refs: Vec<&LabeledExample> = golden.iter().collect();
    Ok(loss_terms(g, &refs, pseudo, p)?.expect("non-empty"))
}

/// One training item for first-order updates: weight 1 for golden examples.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub seq: &'a MarkedSequence,
    pub label: usize,
    pub weight: f64,
}

impl<'a> From<&'a LabeledExample> for TrainItem<'a> {
    fn from(e: &'a LabeledExample) -> Self {
        Self { seq: &e.seq, label: e.label, weight: 1.0 }
    }
}

impl<'a> From<&'a WeightedExample> for TrainItem<'a> {
    fn from(e: &'a WeightedExample) -> Self {
        Self { seq: &e.seq, label: e.label, weight: e.weight }
    }
}

/// Items per gradient worker. Fixed so results do not depend on thread count.
const GRAD_CHUNK: usize = 4;

/// Loss value and gradient of `Σ weight · CE` over `items`.
///
/// The batch is split into fixed chunks evaluated on independent graphs and
/// summed in order.
pub fn batch_gradient(
    params: &ParamSet<Tensor>,
    items: &[TrainItem<'_>],
    exec: Execution,
) -> Result<(f64, ParamSet<Tensor>)> {
    if items.is_empty() {
        return Err(Error::EmptyBatch("gradient batch is empty"));
    }
    let parts = par::map_chunks(exec, items, GRAD_CHUNK, |chunk| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars = params.to_graph(&mut g, true)?;
        let mut total: Option<Var> = None;
        for it in chunk {
            let l = example_loss(&mut g, it.seq, it.label, &vars)?;
            let l = if it.weight == 1.0 { l } else { g.scale(l, it.weight) };
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let total = total.expect("chunks are non-empty");
        let value = g.value(total).item();
        let grads = g.grad_values(total, &vars.to_vec())?;
        Ok((value, grads))
    });
    let mut loss = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for part in parts {
        let (l, grads) = part?;
        loss += l;
        acc = Some(match acc {
            None => grads,
            Some(prev) => prev.iter().zip(&grads).map(|(a, b)| a.zip(b, |x, y| x + y)).collect(),
        });
    }
    Ok((loss, ParamSet::from_vec(acc.expect("non-empty")).expect("layout")))
}

/// One pass over `items` in seeded random order with minibatches of
/// `batch_size`, returning the new parameters and the summed loss.
pub fn train_epoch(
    params: &ParamSet<Tensor>,
    items: &[TrainItem<'_>],
    batch_size: usize,
    state: &mut OptimState,
    rng: &mut ChaCha8Rng,
    exec: Execution,
) -> Result<(ParamSet<Tensor>, f64)> {
    use rand::seq::SliceRandom;
    if items.is_empty() {
        return Err(Error::EmptyBatch("training epoch over an empty set"));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let mut cur = params.clone();
    let mut total = 0.0;
    for idx in order.chunks(batch_size.max(1)) {
        let batch: Vec<TrainItem> = idx.iter().map(|&i| items[i]).collect();
        let (loss, grads) = batch_gradient(&cur, &batch, exec)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFiniteGradient(format!("loss {loss}")));
        }
        cur = sgd_adam_step(&cur, &grads, state)?;
        total += loss;
    }
    Ok((cur, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Adam,
    Sgd,
}

/// Adaptive-moment (or plain descent) optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first: ParamSet<Tensor>,
    pub second: ParamSet<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn adam(params: &ParamSet<Tensor>, lr: f64) -> Self {
        Self {
            kind: OptimKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }

    pub fn sgd(params: &ParamSet<Tensor>, lr: f64) -> Self {
        Self { kind: OptimKind::Sgd, ..Self::adam(params, lr) }
    }

    pub fn new(kind: OptimKind, params: &ParamSet<Tensor>, lr: f64) -> Self {
        match kind {
            OptimKind::Adam => Self::adam(params, lr),
            OptimKind::Sgd => Self::sgd(params, lr),
        }
    }
}

/// One optimizer step; returns the new parameters and updates `state`.
pub fn sgd_adam_step(
    params: &ParamSet<Tensor>,
    grads: &ParamSet<Tensor>,
    state: &mut OptimState,
) -> Result<ParamSet<Tensor>> {
    for ((p, g), m) in params.iter().zip(grads.iter()).zip(state.first.iter()) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape(format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape())));
        }
    }
    state.step += 1;
    let lr = state.lr;
    if state.kind == OptimKind::Sgd {
        return Ok(params.axpy(-lr, grads));
    }
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut new_p = Vec::with_capacity(11);
    let mut new_m = Vec::with_capacity(11);
    let mut new_v = Vec::with_capacity(11);
    for (((p, g), m), v) in params.iter().zip(grads.iter()).zip(state.first.iter()).zip(state.second.iter()) {
        let m2 = m.zip(g, |m, g| b1 * m + (1.0 - b1) * g);
        let v2 = v.zip(g, |v, g| b2 * v + (1.0 - b2) * g * g);
        let upd: Vec<f64> = p
            .values()
            .iter()
            .zip(m2.values().iter().zip(v2.values()))
            .map(|(&w, (&m, &v))| w - lr * (m / c1) / ((v / c2).sqrt() + eps))
            .collect();
        new_p.push(Tensor::new(p.shape().to_vec(), upd)?);
        new_m.push(m2);
        new_v.push(v2);
    }
    state.first = ParamSet::from_vec(new_m).expect("layout");
    state.second = ParamSet::from_vec(new_v).expect("layout");
    Ok(ParamSet::from_vec(new_p).expect("layout"))
}

/// Checkpoint container written as JSON.
///
/// ```text
/// { "format": "metasre-checkpoint", "version": 1, "role": "rcn",
///   "dims": {...}, "vocabulary": ["[E1_start]", ...],
///   "labels": ["no_relation", ...], "no_relation": 0,
///   "tensors": [ {"name": "embedding", "shape": [V, d], "values": [...]}, ... ] }
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub role: Role,
    pub dims: NetDims,
    pub vocabulary: Vocabulary,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub no_relation: Option<usize>,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "metasre-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(params: &ClassifierParams, vocab: &Vocabulary) -> Self {
        let tensors = ParamSet::<Tensor>::names()
            .into_iter()
            .zip(params.tensors.iter())
            .map(|(n, t)| NamedTensor { name: n.into(), shape: t.shape().to_vec(), values: t.values().to_vec() })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            role: params.role,
            dims: params.dims,
            vocabulary: vocab.clone(),
            labels: Vec::new(),
            no_relation: None,
            tensors,
        }
    }

    pub fn with_labels(mut self, labels: Vec<String>, no_relation: Option<usize>) -> Self {
        self.labels = labels;
        self.no_relation = no_relation;
        self
    }

    pub fn into_params(self) -> Result<(ClassifierParams, Vocabulary)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        self.dims.validate()?;
        let names = ParamSet::<Tensor>::names();
        if self.tensors.len() != names.len() {
            return Err(Error::Config("checkpoint tensor count mismatch".into()));
        }
        let mut ts = Vec::with_capacity(names.len());
        for ((nt, name), [r, c]) in self.tensors.into_iter().zip(names).zip(self.dims.shapes()) {
            if nt.name != name || nt.shape != [r, c] {
                return Err(Error::Config(format!("unexpected tensor {} {:?}", nt.name, nt.shape)));
            }
            ts.push(Tensor::finite(nt.shape, nt.values)?);
        }
        let params = ClassifierParams { role: self.role, dims: self.dims, tensors: ParamSet::from_vec(ts).expect("layout") };
        Ok((params, self.vocabulary))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
