use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metasre::data::Dataset;
use metasre::encoder::insert_entity_markers;
use metasre::eval::{ablation_csv, ablation_suite, sweep, sweep_csv, SweepAxis};
use metasre::experiment::{
    load_corpora, prepare, run_seeds, split_for_seed, write_seed_outputs, Mode, RunConfig, Summary,
};
use metasre::networks::{Checkpoint, LabeledExample};
use metasre::par::Execution;
use metasre::selftrain::{evaluate, TestSet};
use metasre::synth::{synth_generate, SynthSpec};
use metasre::Error;

const OUT_DIR_ENV: &str = "METASRE_OUT_DIR";

#[derive(Parser)]
#[command(name = "metasre", version, about = "Meta-learned pseudo labeling for relation classification")]
struct Cli {
    /// Worker threads (1 runs sequentially).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a generator spec.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output JSONL file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the labeled, unlabeled and held-out parts of one seed's split.
    Split {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run incremental self-training for every seed.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare the full model with each ablation.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Repeat training over values of one setting.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// z_percent, unlabeled_fraction or labeled_fraction.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
    /// Score a saved model on a JSONL file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// full (alias metasre), no_meta, no_selection, no_exploitation or self_training.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    no_meta: bool,
    #[arg(long)]
    no_selection: bool,
    #[arg(long)]
    no_exploitation: bool,
    #[arg(long)]
    z_percent: Option<f64>,
    #[arg(long)]
    batches: Option<usize>,
}

impl RunArgs {
    fn config(&self, exec: Execution) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = &self.mode {
            Mode::parse(m)?.apply(&mut c.selftrain);
        }
        c.selftrain.no_meta |= self.no_meta;
        c.selftrain.no_selection |= self.no_selection;
        c.selftrain.no_exploitation |= self.no_exploitation;
        if let Some(z) = self.z_percent {
            c.selftrain.z_percent = z;
        }
        if let Some(b) = self.batches {
            c.selftrain.num_batches = b;
        }
        if let Some(s) = self.seed {
            c.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            c.out_dir = Some(o.clone());
        }
        c.selftrain.execution = exec;
        c.validate()?;
        Ok(c)
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Process exit status for an error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteGradient(_) => 3,
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Label(_)
        | Error::Split(_)
        | Error::Span(_)
        | Error::EmptyCorpus
        | Error::Io(_)
        | Error::Json(_) => 2,
        _ => 1,
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<ExitCode, Error> {
    let text = std::fs::read_to_string(config)?;
    let mut spec: SynthSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let d = synth_generate(&spec)?;
    metasre::data::save_jsonl(&d, out)?;
    println!("wrote {} mentions to {}", d.mentions.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn split(args: &RunArgs, exec: Execution) -> Result<ExitCode, Error> {
    let cfg = args.config(exec)?;
    let seed = cfg.seeds[0];
    let corpora = load_corpora(&cfg.data)?;
    let (split, pools) = split_for_seed(&cfg, &corpora.train, seed)?;
    let dir = out_dir(&cfg);
    std::fs::create_dir_all(&dir)?;
    let with = |mentions| Dataset { mentions, ..corpora.train.clone() };
    metasre::data::save_jsonl(&with(split.labeled.clone()), &dir.join("labeled.jsonl"))?;
    metasre::data::save_jsonl(&with(split.rest.clone()), &dir.join("rest.jsonl"))?;
    metasre::data::save_jsonl(&corpora.test, &dir.join("test.jsonl"))?;
    for (i, p) in pools.iter().enumerate() {
        metasre::data::save_jsonl(&with(p.mentions().to_vec()), &dir.join(format!("unlabeled_{:02}.jsonl", i + 1)))?;
    }
    let manifest = serde_json::json!({
        "seed": seed,
        "labels": corpora.train.label_names,
        "labeled": split.labeled.len(),
        "unlabeled_batches": pools.iter().map(|p| p.len()).collect::<Vec<_>>(),
        "rest": split.rest.len(),
        "test": corpora.test.mentions.len(),
    });
    write_json(&dir.join(format!("split_{}_seed{seed}.json", cfg.hash())), &manifest)?;
    println!(
        "labeled {}, unlabeled {} in {} batches, rest {} -> {}",
        split.labeled.len(),
        split.unlabeled.len(),
        pools.len(),
        split.rest.len(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(args: &RunArgs, exec: Execution) -> Result<ExitCode, Error> {
    let cfg = args.config(exec)?;
    let corpora = load_corpora(&cfg.data)?;
    let dir = out_dir(&cfg);
    let hash = cfg.hash();
    let runs = run_seeds(&cfg, &corpora, exec)?;
    let mut finals = Vec::new();
    let mut diverged = false;
    let mut failed = None;
    for run in &runs {
        let prep = prepare(&cfg, &corpora, run.seed)?;
        let files = write_seed_outputs(&dir, &hash, run, &prep)?;
        match &run.result {
            Ok(o) => {
                finals.push(o.report.final_f1());
                println!("seed {}: F1 {:.4} -> {}", run.seed, o.report.final_f1(), files.report.display());
            }
            Err(f) => {
                eprintln!("seed {}: {} (partial report in {})", run.seed, f.error, files.report.display());
                diverged |= matches!(f.error, Error::NonFiniteGradient(_));
                failed.get_or_insert(exit_code(&f.error));
            }
        }
    }
    let summary = Summary::of(&finals);
    let seeds: Vec<serde_json::Value> = runs
        .iter()
        .map(|r| serde_json::json!({ "seed": r.seed, "final_f1": r.result.as_ref().ok().map(|o| o.report.final_f1()) }))
        .collect();
    write_json(&dir.join(format!("summary_{hash}.json")), &serde_json::json!({ "f1": summary, "runs": seeds }))?;
    println!("final F1 {summary} over {} seeds", summary.n);
    Ok(match (diverged, failed) {
        (true, _) => ExitCode::from(3),
        (false, Some(code)) => ExitCode::from(code),
        (false, None) => ExitCode::SUCCESS,
    })
}

/// Exit status of a table: success unless every cell failed.
fn table_status(cells: impl Iterator<Item = Option<String>>, diverged: bool) -> ExitCode {
    let (mut total, mut failed) = (0, 0);
    for c in cells {
        total += 1;
        failed += c.is_some() as usize;
    }
    if total > 0 && failed == total {
        ExitCode::from(if diverged { 3 } else { 1 })
    } else {
        ExitCode::SUCCESS
    }
}

fn ablate(args: &RunArgs, exec: Execution) -> Result<ExitCode, Error> {
    let cfg = args.config(exec)?;
    let corpora = load_corpora(&cfg.data)?;
    let dir = out_dir(&cfg);
    std::fs::create_dir_all(&dir)?;
    let rows = ablation_suite(&cfg, &corpora, &Mode::ABLATIONS, exec)?;
    let hash = cfg.hash();
    std::fs::write(dir.join(format!("ablation_{hash}.csv")), ablation_csv(&rows)?)?;
    write_json(&dir.join(format!("ablation_{hash}.json")), &rows)?;
    for r in &rows {
        println!("{:<16} F1 {}  ({} runs, {} failed)", r.mode.name(), r.f1, r.cells.len(), r.failed);
    }
    let diverged = rows.iter().flat_map(|r| &r.cells).any(|c| c.error.as_deref().is_some_and(|e| e.starts_with("non-finite")));
    Ok(table_status(rows.iter().flat_map(|r| r.cells.iter().map(|c| c.error.clone())), diverged))
}

fn sweep_cmd(args: &RunArgs, axis: &str, values: &[f64], exec: Execution) -> Result<ExitCode, Error> {
    let axis = SweepAxis::parse(axis)?;
    if values.is_empty() {
        return Err(Error::Config("--values is empty".into()));
    }
    let cfg = args.config(exec)?;
    let corpora = load_corpora(&cfg.data)?;
    let dir = out_dir(&cfg);
    std::fs::create_dir_all(&dir)?;
    let rows = sweep(&cfg, &corpora, axis, values, exec)?;
    let hash = cfg.hash();
    std::fs::write(dir.join(format!("sweep_{}_{hash}.csv", axis.name())), sweep_csv(&rows)?)?;
    write_json(&dir.join(format!("sweep_{}_{hash}.json", axis.name())), &rows)?;
    for r in &rows {
        println!("{} = {:<8} F1 {}  ({} runs, {} failed)", axis.name(), r.value, r.f1, r.cells.len(), r.failed);
    }
    let diverged = rows.iter().flat_map(|r| &r.cells).any(|c| c.error.as_deref().is_some_and(|e| e.starts_with("non-finite")));
    Ok(table_status(rows.iter().flat_map(|r| r.cells.iter().map(|c| c.error.clone())), diverged))
}

fn eval_cmd(checkpoint: &Path, data: &Path, out: Option<&Path>, exec: Execution) -> Result<ExitCode, Error> {
    let ck = Checkpoint::load(checkpoint)?;
    let labels = ck.labels.clone();
    let no_relation = ck.no_relation;
    if labels.is_empty() {
        return Err(Error::Config("checkpoint carries no label names".into()));
    }
    let (params, vocab) = ck.into_params()?;
    let d = metasre::data::load_jsonl(data, &labels, no_relation)?;
    let examples = d
        .mentions
        .iter()
        .map(|m| {
            let label = m.gold_label.ok_or_else(|| Error::Label("evaluation data needs gold labels".into()))?;
            Ok(LabeledExample { seq: insert_entity_markers(m, &vocab)?, label })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let metrics = evaluate(&params, TestSet { examples: &examples, no_relation }, exec)?;
    let text = serde_json::to_string_pretty(&metrics)?;
    println!("{text}");
    if let Some(p) = out {
        std::fs::write(p, text)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn execution(jobs: Option<usize>) -> Result<Execution, Error> {
    match jobs {
        Some(0) => Err(Error::Config("--jobs must be at least 1".into())),
        Some(1) => Ok(Execution::Sequential),
        Some(_n) => {
            #[cfg(feature = "parallel")]
            rayon::ThreadPoolBuilder::new()
                .num_threads(_n)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(Execution::Parallel)
        }
        None => Ok(Execution::Parallel),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = execution(cli.jobs).and_then(|exec| match &cli.command {
        Command::GenData { config, out, seed } => gen_data(config, out, *seed),
        Command::Split { run } => split(run, exec),
        Command::Train { run } => train(run, exec),
        Command::Ablate { run } => ablate(run, exec),
        Command::Sweep { run, axis, values } => sweep_cmd(run, axis, values, exec),
        Command::Eval { checkpoint, data, out } => eval_cmd(checkpoint, data, out.as_deref(), exec),
    });
    result.unwrap_or_else(|e| fail(&e))
}
