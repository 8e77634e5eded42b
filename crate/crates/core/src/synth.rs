//! Seeded synthetic relation corpus.
//!
//! Each sentence is `<noise>* E1 <trigger> E2 <noise>*`. Every relation class
//! owns a set of two-token trigger phrases; `no_relation` uses neutral filler
//! words instead. With probability `cue_dropout` one of the two trigger words
//! is replaced by a filler, so some mentions carry only half a cue. With
//! probability `ambiguity_rate` the trigger is taken from a different class.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{apportion, Dataset};
use crate::encoder::{RelationMention, Span, MAX_MARKED_LEN};
use crate::error::{Error, Result};

pub const NO_RELATION: &str = "no_relation";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub mentions: usize,
    /// Whether class 0 is `no_relation`.
    pub no_relation: bool,
    /// Share of class 0; the other classes split the remainder evenly.
    pub no_relation_share: Option<f64>,
    /// Explicit per-class shares. Mutually exclusive with `no_relation_share`.
    pub class_shares: Option<Vec<f64>>,
    pub entity_vocab: usize,
    pub noise_vocab: usize,
    pub filler_vocab: usize,
    pub triggers_per_class: usize,
    pub ambiguity_rate: f64,
    pub cue_dropout: f64,
    /// Inclusive range of noise tokens per sentence.
    pub noise_range: [usize; 2],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            mentions: 2000,
            no_relation: true,
            no_relation_share: Some(0.174),
            class_shares: None,
            entity_vocab: 10,
            noise_vocab: 10,
            filler_vocab: 20,
            triggers_per_class: 1,
            ambiguity_rate: 0.25,
            cue_dropout: 0.3,
            noise_range: [0, 4],
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Ten classes, 2000 mentions, ambiguity 0.25, with the given `no_relation` share.
    pub fn benchmark(no_relation_share: f64, seed: u64) -> Self {
        Self { no_relation_share: Some(no_relation_share), seed, ..Self::default() }
    }

    /// Mildly skewed corpus (17.4% `no_relation`).
    pub fn mild(seed: u64) -> Self {
        Self::benchmark(0.174, seed)
    }

    /// Heavily skewed corpus (78.7% `no_relation`).
    pub fn skewed(seed: u64) -> Self {
        Self::benchmark(0.787, seed)
    }

    pub fn label_names(&self) -> Vec<String> {
        (0..self.classes)
            .map(|c| if c == 0 && self.no_relation { NO_RELATION.to_string() } else { format!("rel{c}") })
            .collect()
    }

    pub fn shares(&self) -> Result<Vec<f64>> {
        let k = self.classes;
        match (&self.class_shares, self.no_relation_share) {
            (Some(_), Some(_)) => Err(Error::Config("give either class_shares or no_relation_share, not both".into())),
            (Some(s), None) => {
                if s.len() != k {
                    return Err(Error::Config(format!("{} class shares for {k} classes", s.len())));
                }
                if s.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
                    return Err(Error::Config("class shares must be non-negative".into()));
                }
                let total: f64 = s.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("class shares sum to {total}, expected 1")));
                }
                Ok(s.clone())
            }
            (None, Some(nr)) => {
                if !self.no_relation {
                    return Err(Error::Config("no_relation_share needs no_relation = true".into()));
                }
                if !(0.0..1.0).contains(&nr) {
                    return Err(Error::Config(format!("no_relation share {nr} outside [0, 1)")));
                }
                let rest = (1.0 - nr) / (k - 1) as f64;
                Ok((0..k).map(|c| if c == 0 { nr } else { rest }).collect())
            }
            (None, None) => Ok(vec![1.0 / k as f64; k]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        self.shares()?;
        if self.entity_vocab == 0 || self.noise_vocab == 0 || self.filler_vocab == 0 || self.triggers_per_class == 0 {
            return Err(Error::Config("vocabulary sizes and triggers_per_class must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ambiguity_rate) {
            return Err(Error::Config(format!("ambiguity rate {} outside [0, 1)", self.ambiguity_rate)));
        }
        if !(0.0..=1.0).contains(&self.cue_dropout) {
            return Err(Error::Config(format!("cue dropout {} outside [0, 1]", self.cue_dropout)));
        }
        let [lo, hi] = self.noise_range;
        if lo > hi {
            return Err(Error::Config(format!("noise range [{lo}, {hi}] is empty")));
        }
        // two entity tokens each, two trigger tokens, four markers
        if hi + 6 + 4 > MAX_MARKED_LEN {
            return Err(Error::Config(format!("noise range upper bound {hi} makes sentences too long")));
        }
        Ok(())
    }

    /// Mention count per class (largest remainder).
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let shares = self.shares()?;
        let quotas: Vec<f64> = shares.iter().map(|s| s * self.mentions as f64).collect();
        Ok(apportion(&quotas, &vec![self.mentions; self.classes], self.mentions))
    }
}

struct Lexicon<'a> {
    spec: &'a SynthSpec,
}

impl Lexicon<'_> {
    fn entity(&self, rng: &mut ChaCha8Rng) -> String {
        format!("ent{}", rng.gen_range(0..self.spec.entity_vocab))
    }

    fn noise(&self, rng: &mut ChaCha8Rng) -> String {
        format!("nz{}", rng.gen_range(0..self.spec.noise_vocab))
    }

    fn filler(&self, rng: &mut ChaCha8Rng) -> String {
        format!("fil{}", rng.gen_range(0..self.spec.filler_vocab))
    }

    fn trigger(&self, class: usize, rng: &mut ChaCha8Rng) -> [String; 2] {
        if class == 0 && self.spec.no_relation {
            return [self.filler(rng), self.filler(rng)];
        }
        let j = rng.gen_range(0..self.spec.triggers_per_class);
        let mut t = [format!("c{class}a{j}"), format!("c{class}b{j}")];
        if rng.gen_bool(self.spec.cue_dropout) {
            let slot = rng.gen_range(0..2);
            t[slot] = self.filler(rng);
        }
        t
    }
}

fn sentence(lex: &Lexicon, label: usize, rng: &mut ChaCha8Rng) -> RelationMention {
    let spec = lex.spec;
    let cue_class = if rng.gen_bool(spec.ambiguity_rate) {
        let other = rng.gen_range(0..spec.classes - 1);
        if other >= label {
            other + 1
        } else {
            other
        }
    } else {
        label
    };
    let noise = rng.gen_range(spec.noise_range[0]..=spec.noise_range[1]);
    let before = rng.gen_range(0..=noise);
    let mut tokens: Vec<String> = (0..before).map(|_| lex.noise(rng)).collect();
    let e1_len = rng.gen_range(1..=2);
    let e1 = Span::new(tokens.len(), tokens.len() + e1_len);
    tokens.extend((0..e1_len).map(|_| lex.entity(rng)));
    tokens.extend(lex.trigger(cue_class, rng));
    let e2_len = rng.gen_range(1..=2);
    let e2 = Span::new(tokens.len(), tokens.len() + e2_len);
    tokens.extend((0..e2_len).map(|_| lex.entity(rng)));
    tokens.extend((before..noise).map(|_| lex.noise(rng)));
    RelationMention::new(tokens, e1, e2, Some(label))
}

/// Generates a corpus; identical specs give identical corpora.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let counts = spec.class_counts()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    labels.shuffle(&mut rng);
    let lex = Lexicon { spec };
    let mentions = labels.into_iter().map(|l| sentence(&lex, l, &mut rng)).collect();
    Dataset::new(mentions, spec.label_names(), spec.no_relation.then_some(0))
}
