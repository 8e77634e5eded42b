//! Run configuration, the end-to-end pipeline (data → split → self-training)
//! and report files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_jsonl, mix_seed, partition_unlabeled, stratified_split, Dataset, Split, SplitSpec, UnlabeledPool};
use crate::encoder::{insert_entity_markers, Vocabulary};
use crate::error::{Error, Result};
use crate::meta::MetaConfig;
use crate::networks::{init_params, Checkpoint, ClassifierParams, LabeledExample, NetDims, Role};
use crate::par::{self, Execution};
use crate::selftrain::{
    run_incremental, streams, EncodedBatch, RunFailure, RunOutcome, SelfTrainConfig, TestSet, TrainReport,
};
use crate::synth::{synth_generate, SynthSpec};

const TEST_STREAM: u64 = 0x7e57;
const SPLIT_STREAM: u64 = 0x5b11;
const BATCH_STREAM: u64 = 0xba7c;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Train and test corpora drawn from the generator; the test corpus uses
    /// a seed derived from the training spec.
    Synthetic {
        spec: SynthSpec,
        #[serde(default = "default_test_mentions")]
        test_mentions: usize,
    },
    Files { train: PathBuf, test: PathBuf, labels: Vec<String>, no_relation: Option<String> },
}

fn default_test_mentions() -> usize {
    1000
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic { spec: SynthSpec::default(), test_mentions: default_test_mentions() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: usize,
    pub embedding: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { hidden: 64, embedding: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub split: SplitSpec,
    pub selftrain: SelfTrainConfig,
    pub meta: MetaConfig,
    pub network: NetworkConfig,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            split: SplitSpec { labeled_fraction: 0.05, unlabeled_fraction: 0.5, seed: 0 },
            selftrain: SelfTrainConfig::default(),
            meta: MetaConfig::default(),
            network: NetworkConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// The seeded synthetic benchmark: ten classes, 2000 training mentions,
    /// ambiguity 0.25, 5% labeled and 50% unlabeled, seeds 0..5. Learning
    /// rates and epoch counts are raised from the defaults so the small
    /// encoder trains within a few hundred steps.
    pub fn benchmark(no_relation_share: f64) -> Self {
        let mut c = Self {
            data: DataSource::Synthetic { spec: SynthSpec::benchmark(no_relation_share, 0), test_mentions: 1000 },
            ..Self::default()
        };
        c.selftrain.learning_rate = 0.01;
        c.selftrain.initial_epochs = 15;
        c.meta.warmup_epochs = 15;
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.selftrain.validate()?;
        self.meta.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.network.hidden == 0 || !self.network.hidden.is_multiple_of(2) || self.network.embedding == 0 {
            return Err(Error::Config(format!("invalid network sizes {:?}", self.network)));
        }
        match &self.data {
            DataSource::Synthetic { spec, test_mentions } => {
                spec.validate()?;
                if *test_mentions == 0 {
                    return Err(Error::Config("test_mentions must be positive".into()));
                }
            }
            DataSource::Files { labels, no_relation, .. } => {
                if labels.len() < 2 {
                    return Err(Error::Config("at least two labels are needed".into()));
                }
                if let Some(nr) = no_relation {
                    if !labels.contains(nr) {
                        return Err(Error::Config(format!("no_relation label {nr:?} is not in the label list")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Short hash of everything that determines a run except the seed list
    /// and output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.out_dir = None;
        c.selftrain.seed = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(bytes);
        digest[..4].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        let mut c = self.clone();
        mode.apply(&mut c.selftrain);
        c
    }
}

/// Named switch combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[serde(alias = "metasre")]
    Full,
    NoMeta,
    NoSelection,
    NoExploitation,
    /// All three switches on: classic self-training.
    SelfTraining,
}

impl Mode {
    pub const ABLATIONS: [Mode; 4] = [Mode::Full, Mode::NoMeta, Mode::NoSelection, Mode::NoExploitation];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoMeta => "no_meta",
            Mode::NoSelection => "no_selection",
            Mode::NoExploitation => "no_exploitation",
            Mode::SelfTraining => "self_training",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" | "metasre" => Ok(Mode::Full),
            "no_meta" => Ok(Mode::NoMeta),
            "no_selection" => Ok(Mode::NoSelection),
            "no_exploitation" => Ok(Mode::NoExploitation),
            "self_training" => Ok(Mode::SelfTraining),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }

    /// Sets the switches this mode turns on. Switches already on stay on.
    pub fn apply(self, cfg: &mut SelfTrainConfig) {
        match self {
            Mode::Full => {}
            Mode::NoMeta => cfg.no_meta = true,
            Mode::NoSelection => cfg.no_selection = true,
            Mode::NoExploitation => cfg.no_exploitation = true,
            Mode::SelfTraining => {
                cfg.no_meta = true;
                cfg.no_selection = true;
                cfg.no_exploitation = true;
            }
        }
    }
}

/// Train and test corpora.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_corpora(source: &DataSource) -> Result<Corpora> {
    match source {
        DataSource::Synthetic { spec, test_mentions } => {
            let train = synth_generate(spec)?;
            let test_spec = SynthSpec { mentions: *test_mentions, seed: mix_seed(spec.seed, TEST_STREAM), ..spec.clone() };
            let test = synth_generate(&test_spec)?;
            Ok(Corpora { train, test })
        }
        DataSource::Files { train, test, labels, no_relation } => {
            let nr = no_relation.as_ref().and_then(|n| labels.iter().position(|l| l == n));
            Ok(Corpora { train: load_jsonl(train, labels, nr)?, test: load_jsonl(test, labels, nr)? })
        }
    }
}

/// Everything one seed's run consumes.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub labeled: Vec<LabeledExample>,
    pub batches: Vec<EncodedBatch>,
    pub test: Vec<LabeledExample>,
    pub label_names: Vec<String>,
    pub no_relation: Option<usize>,
    pub dims: NetDims,
}

impl Prepared {
    pub fn test_set(&self) -> TestSet<'_> {
        TestSet { examples: &self.test, no_relation: self.no_relation }
    }
}

fn encode_labeled(d: &Dataset, vocab: &Vocabulary) -> Result<Vec<LabeledExample>> {
    d.mentions
        .iter()
        .map(|m| {
            let label = m.gold_label.ok_or_else(|| Error::Label("mention without a gold label".into()))?;
            Ok(LabeledExample { seq: insert_entity_markers(m, vocab)?, label })
        })
        .collect()
}

/// Stratified split and unlabeled batches of the training corpus for one seed.
pub fn split_for_seed(cfg: &RunConfig, train: &Dataset, seed: u64) -> Result<(Split, Vec<UnlabeledPool>)> {
    let spec = SplitSpec { seed: mix_seed(cfg.split.seed, mix_seed(seed, SPLIT_STREAM)), ..cfg.split };
    let split = stratified_split(train, &spec)?;
    let pools = partition_unlabeled(&split.unlabeled, cfg.selftrain.num_batches, mix_seed(spec.seed, BATCH_STREAM))?;
    Ok((split, pools))
}

/// Splits, batches and encodes the corpora for one seed.
pub fn prepare(cfg: &RunConfig, corpora: &Corpora, seed: u64) -> Result<Prepared> {
    let train = &corpora.train;
    let vocab = Vocabulary::build(&train.mentions)?;
    let (split, pools) = split_for_seed(cfg, train, seed)?;
    let batches = pools.iter().map(|p| EncodedBatch::from_pool(p, &vocab)).collect::<Result<_>>()?;
    let labeled = Dataset { mentions: split.labeled, ..train.clone() };
    let dims = NetDims {
        classes: train.classes(),
        hidden: cfg.network.hidden,
        embedding: cfg.network.embedding,
        vocab: vocab.len(),
    };
    Ok(Prepared {
        labeled: encode_labeled(&labeled, &vocab)?,
        test: encode_labeled(&corpora.test, &vocab)?,
        batches,
        vocab,
        label_names: train.label_names.clone(),
        no_relation: train.no_relation_index,
        dims,
    })
}

/// Initial τ and η for a seed.
pub fn initial_params(dims: NetDims, seed: u64) -> Result<(ClassifierParams, ClassifierParams)> {
    let s = |stream| mix_seed(seed, stream);
    Ok((init_params(s(streams::TAU_INIT), Role::Rcn, dims)?, init_params(s(streams::ETA_INIT), Role::Rlgn, dims)?))
}

/// One seed of `cfg` on prepared data.
pub fn run_prepared(cfg: &RunConfig, prep: &Prepared, seed: u64) -> std::result::Result<RunOutcome, Box<RunFailure>> {
    let (tau, eta) = match initial_params(prep.dims, seed) {
        Ok(p) => p,
        Err(error) => return Err(early_failure(cfg, error)),
    };
    let st = SelfTrainConfig { seed, ..cfg.selftrain.clone() };
    run_incremental(&prep.labeled, &prep.batches, prep.test_set(), tau, eta, &st, &cfg.meta)
}

fn early_failure(cfg: &RunConfig, error: Error) -> Box<RunFailure> {
    let partial = TrainReport { aborted: Some(error.to_string()), ..TrainReport::empty(&cfg.selftrain, &cfg.meta) };
    Box::new(RunFailure { error, partial })
}

/// Result of one seed: a finished report or a failure with its partial report.
#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub result: std::result::Result<RunOutcome, Box<RunFailure>>,
}

impl SeedRun {
    pub fn report(&self) -> &TrainReport {
        match &self.result {
            Ok(o) => &o.report,
            Err(f) => &f.partial,
        }
    }
}

/// Runs every seed of `cfg`, in parallel across seeds when `exec` allows.
pub fn run_seeds(cfg: &RunConfig, corpora: &Corpora, exec: Execution) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let prepared: Vec<Prepared> = cfg.seeds.iter().map(|&s| prepare(cfg, corpora, s)).collect::<Result<_>>()?;
    let jobs: Vec<(u64, &Prepared)> = cfg.seeds.iter().copied().zip(&prepared).collect();
    Ok(par::map(exec, &jobs, |&(seed, prep)| SeedRun { seed, result: run_prepared(cfg, prep, seed) }))
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, std, n }
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Serialize)]
struct CsvRow {
    iter: usize,
    precision: f64,
    recall: f64,
    f1: f64,
    pseudo_f1: f64,
    #[serde(rename = "selected_M")]
    selected_m: usize,
    mean_w: f64,
    distribution_l1: f64,
}

#[derive(Serialize)]
struct MetaRow {
    iteration: usize,
    inner_loss: f64,
    meta_loss: f64,
    grad_norm: f64,
    pseudo_count: usize,
}

/// Per-iteration metrics as CSV; iteration 0 is the supervised-only model.
pub fn metrics_csv(report: &TrainReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let i = &report.initial;
    w.serialize(CsvRow {
        iter: 0,
        precision: i.precision,
        recall: i.recall,
        f1: i.f1,
        pseudo_f1: 0.0,
        selected_m: 0,
        mean_w: 0.0,
        distribution_l1: 0.0,
    })
    .map_err(csv_err)?;
    for r in &report.iterations {
        w.serialize(CsvRow {
            iter: r.iter,
            precision: r.test.precision,
            recall: r.test.recall,
            f1: r.test.f1,
            pseudo_f1: r.pseudo.f1,
            selected_m: r.selected_m,
            mean_w: r.mean_w,
            distribution_l1: r.distribution_l1,
        })
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn meta_csv(report: &TrainReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "inner_loss", "meta_loss", "grad_norm", "pseudo_count"]).map_err(csv_err)?;
    for r in &report.iterations {
        for t in &r.meta_traces {
            w.serialize(MetaRow {
                iteration: r.iter,
                inner_loss: t.inner_loss,
                meta_loss: t.meta_loss,
                grad_norm: t.grad_norm,
                pseudo_count: t.pseudo_count,
            })
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Paths written for one seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedFiles {
    pub report: PathBuf,
    pub metrics: PathBuf,
    pub meta: PathBuf,
    pub model: Option<PathBuf>,
}

/// Writes the report JSON, metrics CSV, meta-step CSV and (when the run
/// finished) the τ checkpoint for one seed.
pub fn write_seed_outputs(dir: &Path, hash: &str, run: &SeedRun, prep: &Prepared) -> Result<SeedFiles> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("{hash}_seed{}", run.seed);
    let report = run.report();
    let files = SeedFiles {
        report: dir.join(format!("report_{stem}.json")),
        metrics: dir.join(format!("metrics_{stem}.csv")),
        meta: dir.join(format!("meta_{stem}.csv")),
        model: run.result.as_ref().ok().map(|_| dir.join(format!("model_{stem}.json"))),
    };
    std::fs::write(&files.report, serde_json::to_vec_pretty(report)?)?;
    std::fs::write(&files.metrics, metrics_csv(report)?)?;
    std::fs::write(&files.meta, meta_csv(report)?)?;
    if let (Ok(outcome), Some(path)) = (&run.result, &files.model) {
        Checkpoint::new(&outcome.tau, &prep.vocab).with_labels(prep.label_names.clone(), prep.no_relation).save(path)?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary() {
        let s = Summary::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std, s.n), (2.0, 1.0, 3));
        assert_eq!(Summary::of(&[0.5]).std, 0.0);
    }

    #[test]
    fn modes() {
        let mut a = SelfTrainConfig::default();
        Mode::SelfTraining.apply(&mut a);
        let mut b = SelfTrainConfig::default();
        for m in [Mode::NoMeta, Mode::NoSelection, Mode::NoExploitation] {
            m.apply(&mut b);
        }
        assert_eq!(a, b);
        for m in Mode::ABLATIONS {
            assert_eq!(Mode::parse(m.name()).unwrap(), m);
        }
        assert_eq!(Mode::parse("metasre").unwrap(), Mode::Full);
        assert!(Mode::parse("x").is_err());
    }

    #[test]
    fn config_json() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let partial: RunConfig = serde_json::from_str(r#"{"seeds":[7]}"#).unwrap();
        assert_eq!(partial.hash(), c.hash());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus":1}"#).is_err());
        let mut z = c.clone();
        z.selftrain.z_percent = 80.0;
        assert_ne!(z.hash(), c.hash());
        assert!(RunConfig { seeds: vec![], ..c }.validate().is_err());
    }
}
