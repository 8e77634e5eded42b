//! Plain self-training written directly against the network primitives:
//! supervised epochs, then per batch label everything with the current
//! classifier, rank by confidence and retrain on labeled + pseudo data.

use metasre::autodiff::Tensor;
use metasre::encoder::MarkedSequence;
use metasre::networks::{batch_gradient, sgd_adam_step, ClassifierParams, LabeledExample, OptimState, ParamSet, TrainItem};
use metasre::par::Execution;
use metasre::selftrain::{stream_rng, streams};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

pub struct Classic {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub initial_epochs: usize,
    pub epochs_per_batch: usize,
}

struct Pseudo {
    seq: MarkedSequence,
    label: usize,
}

fn first_max(p: &[f64]) -> (usize, f64) {
    let mut best = (0, p[0]);
    for (i, &x) in p.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

fn epoch(params: ParamSet<Tensor>, items: &[TrainItem], batch: usize, opt: &mut OptimState, rng: &mut ChaCha8Rng) -> ParamSet<Tensor> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let mut p = params;
    for idx in order.chunks(batch) {
        let mb: Vec<TrainItem> = idx.iter().map(|&i| items[i]).collect();
        let (_, grad) = batch_gradient(&p, &mb, Execution::Sequential).unwrap();
        p = sgd_adam_step(&p, &grad, opt).unwrap();
    }
    p
}

fn items<'a>(labeled: &'a [LabeledExample], pool: &'a [Pseudo]) -> Vec<TrainItem<'a>> {
    let mut v: Vec<TrainItem> = labeled.iter().map(|e| TrainItem { seq: &e.seq, label: e.label, weight: 1.0 }).collect();
    v.extend(pool.iter().map(|q| TrainItem { seq: &q.seq, label: q.label, weight: 1.0 }));
    v
}

impl Classic {
    /// Parameters after the supervised stage and after each batch.
    pub fn trajectory(
        &self,
        labeled: &[LabeledExample],
        batches: &[Vec<MarkedSequence>],
        init: &ClassifierParams,
        seed: u64,
    ) -> Vec<ParamSet<Tensor>> {
        let mut opt = OptimState::adam(&init.tensors, self.learning_rate);
        let mut rng = stream_rng(seed, streams::TAU_ORDER);
        let mut p = init.tensors.clone();
        let mut pool: Vec<Pseudo> = Vec::new();
        let mut out = Vec::new();
        for _ in 0..self.initial_epochs {
            p = epoch(p, &items(labeled, &pool), self.batch_size, &mut opt, &mut rng);
        }
        out.push(p.clone());
        for batch in batches {
            let model = init.with_tensors(p.clone());
            let mut scored: Vec<(usize, usize, f64)> = batch
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let (label, conf) = first_max(&model.predict(s).unwrap().probs);
                    (i, label, conf)
                })
                .collect();
            scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            pool.extend(scored.into_iter().map(|(i, label, _)| Pseudo { seq: batch[i].clone(), label }));
            for _ in 0..self.epochs_per_batch {
                p = epoch(p, &items(labeled, &pool), self.batch_size, &mut opt, &mut rng);
            }
            out.push(p.clone());
        }
        out
    }
}
