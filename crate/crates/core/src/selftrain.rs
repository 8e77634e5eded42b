//! Pseudo labeling, top-Z% selection, confidence weighting and the
//! incremental self-training driver.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, ShadowGold, UnlabeledPool};
use crate::encoder::{insert_entity_markers, MarkedSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{distribution_l1, micro_prf, pseudo_label_f1, LabelDistribution, Metrics};
use crate::meta::{meta_step, supervised_warmup, MetaConfig, MetaStepTrace};
use crate::networks::{train_epoch, ClassifierParams, LabeledExample, OptimState, TrainItem, WeightedExample};
use crate::par::Execution;

/// A generated label for one mention of an unlabeled batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub mention_index: usize,
    pub label: usize,
    pub confidence: f64,
}

/// Labels every sequence with the argmax class and its probability.
pub fn generate_pseudo_labels(labeler: &ClassifierParams, batch: &[MarkedSequence], exec: Execution) -> Result<Vec<PseudoLabel>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("pseudo labeling an empty batch"));
    }
    let dists = labeler.predict_all(batch, exec)?;
    Ok(dists
        .iter()
        .enumerate()
        .map(|(i, d)| PseudoLabel { mention_index: i, label: d.argmax(), confidence: d.max() })
        .collect())
}

/// Number of labels kept out of `n` at `z_percent`.
pub fn selection_size(n: usize, z_percent: f64) -> usize {
    ((z_percent * n as f64 / 100.0).ceil() as usize).min(n)
}

fn check_z(z_percent: f64) -> Result<()> {
    if !(z_percent > 0.0 && z_percent <= 100.0) {
        return Err(Error::Config(format!("Z% must lie in (0, 100], got {z_percent}")));
    }
    Ok(())
}

/// Keeps the `ceil(Z/100 · n)` most confident labels, sorted by confidence
/// (descending) and then mention index.
pub fn select_top(labels: &[PseudoLabel], z_percent: f64) -> Result<Vec<PseudoLabel>> {
    check_z(z_percent)?;
    if labels.is_empty() {
        return Err(Error::EmptyBatch("selecting from no pseudo labels"));
    }
    let mut sorted = labels.to_vec();
    sorted.sort_by(|a, b| {
        b.confidence.partial_cmp(&a.confidence).unwrap_or(Ordering::Equal).then(a.mention_index.cmp(&b.mention_index))
    });
    sorted.truncate(selection_size(labels.len(), z_percent));
    Ok(sorted)
}

/// Turns selected labels into weighted training examples. With `force_unit`
/// every weight is 1.
pub fn exploit(selected: &[PseudoLabel], pool: &[MarkedSequence], force_unit: bool) -> Result<Vec<WeightedExample>> {
    selected
        .iter()
        .map(|p| {
            let seq = pool.get(p.mention_index).ok_or(Error::Index { index: p.mention_index, len: pool.len() })?;
            WeightedExample::new(seq.clone(), p.label, if force_unit { 1.0 } else { p.confidence })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainConfig {
    pub z_percent: f64,
    pub num_batches: usize,
    /// Epochs of supervised training of τ before the first iteration.
    pub initial_epochs: usize,
    /// Epochs of τ training per iteration.
    pub rcn_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The current τ labels its own data; η is unused.
    pub no_meta: bool,
    /// Keep every pseudo label (Z = 100).
    pub no_selection: bool,
    /// Weight every pseudo label 1.
    pub no_exploitation: bool,
    pub seed: u64,
    /// Runtime only; results do not depend on it.
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            z_percent: 90.0,
            num_batches: 10,
            initial_epochs: 10,
            rcn_epochs: 3,
            batch_size: 16,
            learning_rate: 1e-4,
            no_meta: false,
            no_selection: false,
            no_exploitation: false,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_z(self.z_percent)?;
        if self.num_batches == 0 {
            return Err(Error::Config("num_batches must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }

    pub fn effective_z(&self) -> f64 {
        if self.no_selection {
            100.0
        } else {
            self.z_percent
        }
    }
}

/// An unlabeled batch as seen by training (sequences only) plus its hidden
/// gold labels for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub seqs: Vec<MarkedSequence>,
    pub shadow: ShadowGold,
}

impl EncodedBatch {
    pub fn from_pool(pool: &UnlabeledPool, vocab: &Vocabulary) -> Result<Self> {
        let seqs = pool.mentions().iter().map(|m| insert_entity_markers(m, vocab)).collect::<Result<_>>()?;
        Ok(Self { seqs, shadow: pool.shadow().clone() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub test: Metrics,
    pub offered: usize,
    pub selected_m: usize,
    pub mean_w: f64,
    /// Quality of the selected pseudo labels.
    pub pseudo: Metrics,
    /// Quality of all pseudo labels of the batch, before selection.
    pub pseudo_unfiltered: Metrics,
    /// L1 between the selected pseudo label histogram and the batch's gold histogram.
    pub distribution_l1: f64,
    pub distribution_l1_unfiltered: f64,
    pub pseudo_histogram: Vec<usize>,
    pub gold_histogram: Vec<usize>,
    pub accumulated_pseudo: usize,
    pub rcn_losses: Vec<f64>,
    pub meta_traces: Vec<MetaStepTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: SelfTrainConfig,
    pub meta: MetaConfig,
    /// τ after supervised training on labeled data only.
    pub initial: Metrics,
    pub initial_losses: Vec<f64>,
    pub warmup_losses: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
    /// Set when the run stopped early.
    pub aborted: Option<String>,
}

impl TrainReport {
    /// A report with no results yet.
    pub fn empty(config: &SelfTrainConfig, meta: &MetaConfig) -> Self {
        Self {
            config: config.clone(),
            meta: meta.clone(),
            initial: micro_prf(&[], &[], None).expect("empty inputs"),
            initial_losses: Vec::new(),
            warmup_losses: Vec::new(),
            iterations: Vec::new(),
            aborted: None,
        }
    }

    pub fn final_f1(&self) -> f64 {
        self.iterations.last().map_or(self.initial.f1, |r| r.test.f1)
    }

    pub fn mean_distribution_l1(&self) -> f64 {
        if self.iterations.is_empty() {
            return 0.0;
        }
        self.iterations.iter().map(|r| r.distribution_l1).sum::<f64>() / self.iterations.len() as f64
    }
}

/// Failed run with everything recorded up to the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub partial: TrainReport,
}

/// Output of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: TrainReport,
    pub tau: ClassifierParams,
    pub eta: ClassifierParams,
}

/// Evaluation set with gold labels.
#[derive(Debug, Clone, Copy)]
pub struct TestSet<'a> {
    pub examples: &'a [LabeledExample],
    pub no_relation: Option<usize>,
}

pub fn evaluate(params: &ClassifierParams, test: TestSet<'_>, exec: Execution) -> Result<Metrics> {
    let seqs: Vec<MarkedSequence> = test.examples.iter().map(|e| e.seq.clone()).collect();
    let preds: Vec<usize> = params.predict_all(&seqs, exec)?.iter().map(|d| d.argmax()).collect();
    let golds: Vec<usize> = test.examples.iter().map(|e| e.label).collect();
    micro_prf(&preds, &golds, test.no_relation)
}

/// Independent random streams derived from the run seed.
pub mod streams {
    pub const TAU_INIT: u64 = 1;
    pub const ETA_INIT: u64 = 2;
    pub const TAU_ORDER: u64 = 3;
    pub const ETA_WARMUP: u64 = 4;
    pub const META_ORDER: u64 = 5;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

fn histogram(labels: impl IntoIterator<Item = usize>, k: usize) -> Vec<usize> {
    let mut h = vec![0; k];
    for l in labels {
        h[l] += 1;
    }
    h
}

struct Driver<'a> {
    cfg: &'a SelfTrainConfig,
    meta: &'a MetaConfig,
    labeled: &'a [LabeledExample],
    test: TestSet<'a>,
    report: TrainReport,
    tau: ClassifierParams,
    eta: ClassifierParams,
    tau_state: OptimState,
    tau_rng: ChaCha8Rng,
    meta_rng: ChaCha8Rng,
    pseudo_pool: Vec<WeightedExample>,
    observer: &'a mut dyn FnMut(usize, &ClassifierParams),
}

impl Driver<'_> {
    fn train_tau(&mut self, epochs: usize) -> Result<Vec<f64>> {
        let items: Vec<TrainItem> =
            self.labeled.iter().map(TrainItem::from).chain(self.pseudo_pool.iter().map(TrainItem::from)).collect();
        let mut losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let (next, loss) =
                train_epoch(&self.tau.tensors, &items, self.cfg.batch_size, &mut self.tau_state, &mut self.tau_rng, self.cfg.execution)?;
            self.tau = self.tau.with_tensors(next);
            losses.push(loss);
        }
        Ok(losses)
    }

    fn meta_pass(&mut self, batch: &[MarkedSequence], eta_state: &mut OptimState) -> Result<Vec<MetaStepTrace>> {
        let mut traces = Vec::new();
        for _ in 0..self.meta.meta_epochs {
            let mut lab: Vec<&LabeledExample> = self.labeled.iter().collect();
            lab.shuffle(&mut self.meta_rng);
            let mut unl: Vec<&MarkedSequence> = batch.iter().collect();
            unl.shuffle(&mut self.meta_rng);
            let unl_chunks: Vec<&[&MarkedSequence]> = unl.chunks(self.meta.unlabeled_batch).collect();
            for (i, chunk) in lab.chunks(self.meta.labeled_batch).enumerate() {
                let (eta, trace) = meta_step(&self.tau, &self.eta, chunk, unl_chunks[i % unl_chunks.len()], self.meta, eta_state)?;
                self.eta = eta;
                traces.push(trace);
            }
        }
        Ok(traces)
    }

    fn iteration(&mut self, iter: usize, batch: &EncodedBatch, eta_state: &mut OptimState) -> Result<()> {
        let k = self.tau.dims.classes;
        let no_rel = self.test.no_relation;
        let meta_traces = if self.cfg.no_meta { Vec::new() } else { self.meta_pass(&batch.seqs, eta_state)? };
        let labeler = if self.cfg.no_meta { &self.tau } else { &self.eta };
        let pseudo = generate_pseudo_labels(labeler, &batch.seqs, self.cfg.execution)?;
        let selected = select_top(&pseudo, self.cfg.effective_z())?;
        let weighted = exploit(&selected, &batch.seqs, self.cfg.no_exploitation)?;
        let mean_w = weighted.iter().map(|w| w.weight).sum::<f64>() / weighted.len().max(1) as f64;
        self.pseudo_pool.extend(weighted);
        let rcn_losses = self.train_tau(self.cfg.rcn_epochs)?;
        (self.observer)(iter, &self.tau);

        // diagnostics only: the shadow labels are read after training
        let gold_histogram = histogram(batch.shadow.labels().iter().copied(), k);
        let gold = LabelDistribution::from_labels(batch.shadow.labels().iter().copied(), k)?;
        let sel_dist = LabelDistribution::from_labels(selected.iter().map(|p| p.label), k)?;
        let all_dist = LabelDistribution::from_labels(pseudo.iter().map(|p| p.label), k)?;
        let record = IterationRecord {
            iter,
            test: evaluate(&self.tau, self.test, self.cfg.execution)?,
            offered: batch.seqs.len(),
            selected_m: selected.len(),
            mean_w,
            pseudo: pseudo_label_f1(&selected, &batch.shadow, no_rel)?,
            pseudo_unfiltered: pseudo_label_f1(&pseudo, &batch.shadow, no_rel)?,
            distribution_l1: distribution_l1(&sel_dist, &gold)?,
            distribution_l1_unfiltered: distribution_l1(&all_dist, &gold)?,
            pseudo_histogram: histogram(selected.iter().map(|p| p.label), k),
            gold_histogram,
            accumulated_pseudo: self.pseudo_pool.len(),
            rcn_losses,
            meta_traces,
        };
        self.report.iterations.push(record);
        Ok(())
    }

    fn run(&mut self, batches: &[EncodedBatch]) -> Result<()> {
        let exec = self.cfg.execution;
        self.report.initial_losses = self.train_tau(self.cfg.initial_epochs)?;
        self.report.initial = evaluate(&self.tau, self.test, exec)?;
        (self.observer)(0, &self.tau);
        let mut eta_state = OptimState::new(self.meta.outer_optimizer, &self.eta.tensors, self.meta.outer_lr);
        if !self.cfg.no_meta && self.meta.supervised_warmup {
            let mut state = OptimState::adam(&self.eta.tensors, self.cfg.learning_rate);
            let mut rng = stream_rng(self.cfg.seed, streams::ETA_WARMUP);
            let (eta, losses) =
                supervised_warmup(&self.eta, self.labeled, self.meta.warmup_epochs, self.cfg.batch_size, &mut state, &mut rng, exec)?;
            self.eta = eta;
            self.report.warmup_losses = losses;
        }
        for (i, batch) in batches.iter().enumerate() {
            self.iteration(i + 1, batch, &mut eta_state)?;
        }
        Ok(())
    }
}

/// Incremental self-training: supervised training of τ, then for each
/// unlabeled batch a meta pass over η, pseudo labeling, top-Z% selection and
/// τ training on the labeled set plus all pseudo labels accepted so far.
pub fn run_incremental(
    labeled: &[LabeledExample],
    batches: &[EncodedBatch],
    test: TestSet<'_>,
    tau: ClassifierParams,
    eta: ClassifierParams,
    cfg: &SelfTrainConfig,
    meta: &MetaConfig,
) -> std::result::Result<RunOutcome, Box<RunFailure>> {
    run_incremental_observed(labeled, batches, test, tau, eta, cfg, meta, &mut |_, _| {})
}

/// [`run_incremental`] with a callback receiving τ after the supervised
/// stage (iteration 0) and after every iteration.
#[allow(clippy::too_many_arguments)]
pub fn run_incremental_observed(
    labeled: &[LabeledExample],
    batches: &[EncodedBatch],
    test: TestSet<'_>,
    tau: ClassifierParams,
    eta: ClassifierParams,
    cfg: &SelfTrainConfig,
    meta: &MetaConfig,
    observer: &mut dyn FnMut(usize, &ClassifierParams),
) -> std::result::Result<RunOutcome, Box<RunFailure>> {
    let report = TrainReport::empty(cfg, meta);
    let precheck = (|| {
        cfg.validate()?;
        meta.validate()?;
        if labeled.is_empty() {
            return Err(Error::EmptyBatch("self-training needs labeled examples"));
        }
        if batches.is_empty() || batches.iter().any(|b| b.seqs.is_empty()) {
            return Err(Error::EmptyBatch("self-training needs non-empty unlabeled batches"));
        }
        Ok(())
    })();
    if let Err(error) = precheck {
        let partial = TrainReport { aborted: Some(error.to_string()), ..report };
        return Err(Box::new(RunFailure { error, partial }));
    }
    let mut d = Driver {
        cfg,
        meta,
        labeled,
        test,
        report,
        tau_state: OptimState::adam(&tau.tensors, cfg.learning_rate),
        tau,
        eta,
        tau_rng: stream_rng(cfg.seed, streams::TAU_ORDER),
        meta_rng: stream_rng(cfg.seed, streams::META_ORDER),
        pseudo_pool: Vec::new(),
        observer,
    };
    match d.run(batches) {
        Ok(()) => Ok(RunOutcome { report: d.report, tau: d.tau, eta: d.eta }),
        Err(error) => {
            d.report.aborted = Some(error.to_string());
            Err(Box::new(RunFailure { error, partial: d.report }))
        }
    }
}
