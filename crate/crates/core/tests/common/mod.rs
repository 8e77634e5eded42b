#![allow(dead_code)]

pub mod classic;

use metasre::autodiff::Tensor;
use metasre::encoder::{MarkedSequence, E1_END, E1_START, E2_END, E2_START};
use metasre::experiment::{DataSource, NetworkConfig, RunConfig};
use metasre::networks::{init_params, ClassifierParams, LabeledExample, NetDims, ParamSet, Role};
use metasre::synth::SynthSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FIRST_WORD: usize = 5;

/// A marked sequence `[E1] a.. [/E1] b.. [E2] c.. [/E2] d..` over word ids
/// `FIRST_WORD..vocab`.
pub fn random_seq(rng: &mut ChaCha8Rng, vocab: usize, max_words: usize) -> MarkedSequence {
    let word = |rng: &mut ChaCha8Rng| rng.gen_range(FIRST_WORD..vocab);
    let mut ids = Vec::new();
    for _ in 0..rng.gen_range(0..=max_words / 4) {
        ids.push(word(rng));
    }
    let p1 = ids.len();
    ids.push(E1_START);
    ids.push(word(rng));
    ids.push(E1_END);
    for _ in 0..rng.gen_range(0..=max_words / 4) {
        ids.push(word(rng));
    }
    let p2 = ids.len();
    ids.push(E2_START);
    ids.push(word(rng));
    ids.push(E2_END);
    MarkedSequence { token_ids: ids, e1_start_pos: p1, e2_start_pos: p2 }
}

pub struct Instance {
    pub tau: ClassifierParams,
    pub eta: ClassifierParams,
    pub labeled: Vec<LabeledExample>,
    pub unlabeled: Vec<MarkedSequence>,
}

impl Instance {
    pub fn labeled_refs(&self) -> Vec<&LabeledExample> {
        self.labeled.iter().collect()
    }

    pub fn unlabeled_refs(&self) -> Vec<&MarkedSequence> {
        self.unlabeled.iter().collect()
    }
}

pub fn tiny_dims() -> NetDims {
    NetDims { classes: 2, hidden: 4, embedding: 3, vocab: 12 }
}

/// Seeded meta-step instance with the given numbers of labeled and
/// unlabeled mentions.
pub fn instance(seed: u64, dims: NetDims, labeled: usize, unlabeled: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = init_params(rng.gen(), Role::Rcn, dims).unwrap();
    let eta = init_params(rng.gen(), Role::Rlgn, dims).unwrap();
    let labeled = (0..labeled)
        .map(|i| LabeledExample { seq: random_seq(&mut rng, dims.vocab, 4), label: i % dims.classes })
        .collect();
    let unlabeled = (0..unlabeled).map(|_| random_seq(&mut rng, dims.vocab, 4)).collect();
    Instance { tau, eta, labeled, unlabeled }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Copy of `p` with coordinate `i` of tensor `t` shifted by `d`.
pub fn bump(p: &ParamSet<Tensor>, t: usize, i: usize, d: f64) -> ParamSet<Tensor> {
    let tensors: Vec<Tensor> = p
        .iter()
        .enumerate()
        .map(|(k, x)| {
            if k != t {
                return x.clone();
            }
            let mut v = x.values().to_vec();
            v[i] += d;
            Tensor::new(x.shape().to_vec(), v).unwrap()
        })
        .collect();
    ParamSet::from_vec(tensors).unwrap()
}

/// Largest relative error between `analytic` and central differences of `f`
/// over every coordinate of `p`.
pub fn max_fd_error(
    p: &ParamSet<Tensor>,
    analytic: &ParamSet<Tensor>,
    step: f64,
    floor: f64,
    mut f: impl FnMut(&ParamSet<Tensor>) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (t, (x, a)) in p.iter().zip(analytic.iter()).enumerate() {
        for i in 0..x.len() {
            let n = (f(&bump(p, t, i, step)) - f(&bump(p, t, i, -step))) / (2.0 * step);
            worst = worst.max(rel_err(a.values()[i], n, floor));
        }
    }
    worst
}

/// A few-second end-to-end configuration: three classes, 200 mentions.
pub fn small_config(batches: usize) -> RunConfig {
    let mut c = RunConfig {
        data: DataSource::Synthetic {
            spec: SynthSpec { classes: 3, mentions: 200, no_relation_share: Some(0.4), ..SynthSpec::default() },
            test_mentions: 100,
        },
        network: NetworkConfig { hidden: 8, embedding: 4 },
        seeds: vec![0, 1],
        ..RunConfig::default()
    };
    c.split.labeled_fraction = 0.2;
    c.selftrain.num_batches = batches;
    c.selftrain.initial_epochs = 2;
    c.selftrain.rcn_epochs = 1;
    c.selftrain.learning_rate = 0.01;
    c.meta.inner_lr = 0.01;
    c
}
