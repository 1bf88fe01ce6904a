//! The `twostage` command line. Each subcommand performs one pipeline step on checkpoint
//! directories and prints a `summary` line carrying the config hash and seed.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::adapters::{merge_attention_lora, merge_final, strip_na};
use crate::analysis::{
    drop_one, eval_format_counts, eval_mc_accuracy, eval_mc_accuracy_with, forced_pair_eval,
    gradcheck_pipeline, mismatch_summary, pair_performance, route_stats,
};
use crate::data::{
    build_corpus, gen_alignment_task, gen_knowledge_task, load_jsonl, write_jsonl, Corpus,
    CorpusSizes, Sample,
};
use crate::error::{Error, Result};
use crate::model::{init_base, ModelConfig, ToyModel};
use crate::train::{run_da, run_mka, run_pretrain, StageKind, StageReport, TrainConfig};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::load_config;

/// Largest relative error the `gradcheck` command accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "twostage", version, about = "Two-stage adapter fine-tuning on a toy transformer")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// Configuration file: JSON, or `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every random choice derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path (checkpoint directory, data file or report directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Single-threaded bit-reproducible execution (the only mode available).
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set,
          num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Write a freshly initialized base model.
    InitBase,
    /// Train every base parameter on a pretraining corpus.
    Pretrain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// Write synthetic samples as JSONL (`corpus` writes every split into a directory).
    GenData {
        #[arg(long, value_enum)]
        task: GenTask,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Run a fine-tuning stage.
    Train {
        #[command(subcommand)]
        stage: TrainStage,
    },
    /// Drop the noise aggregator, keeping the knowledge aggregator.
    StripNa {
        #[arg(long)]
        model: PathBuf,
    },
    /// Fold attention adapters into the attention weights.
    MergeAttn {
        #[arg(long)]
        model: PathBuf,
    },
    /// Fold the remaining adapters into the base weights.
    Merge {
        #[arg(long)]
        model: PathBuf,
    },
    /// Score a checkpoint on a JSONL file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
    },
    /// Count routed expert pairs; `--pairs` also scores every forced pair.
    RouteStats {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Knowledge samples for forced-pair accuracy (enables the pair sweep).
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Use the raw softmax weights of the forced pair instead of renormalizing them.
        #[arg(long)]
        raw_weights: bool,
    },
    /// Accuracy with every routed slot forced onto experts i and j.
    ForcedPair {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        i: usize,
        #[arg(long)]
        j: usize,
        /// Use the raw softmax weights of the forced pair instead of renormalizing them.
        #[arg(long)]
        raw_weights: bool,
    },
    /// Comparison adapters.
    Baseline {
        #[command(subcommand)]
        kind: BaselineKind,
    },
    /// Compare analytic and finite-difference gradients of both training objectives.
    Gradcheck,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStage {
    /// Knowledge plus noise aggregation on a frozen base.
    Mka {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Vec<PathBuf>,
    },
    /// Alignment with the orthogonality penalty on a stripped, attention-merged model.
    Da {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
    },
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// Two parallel LoRA branches per FFN slot, trained like the aggregation stage.
    ParallelLora {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Vec<PathBuf>,
        /// Knowledge samples to score the trained baseline on.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Also score with branch 1 or 2 left out.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        drop: Option<u8>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GenTask {
    Knowledge,
    Alignment,
    Corpus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Acc,
    Format,
}

/// Failure of one CLI invocation, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Domain(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

/// Parses `argv` (program name first), runs one subcommand and returns the exit code:
/// 0 on success, 1 on a domain error, 2 on a usage error.
pub fn cli_dispatch<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `twostage {} --help` for usage", command_name(&cli.command));
            }
            e.exit_code()
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::InitBase => "init-base",
        Command::Pretrain { .. } => "pretrain",
        Command::GenData { .. } => "gen-data",
        Command::Train { .. } => "train",
        Command::StripNa { .. } => "strip-na",
        Command::MergeAttn { .. } => "merge-attn",
        Command::Merge { .. } => "merge",
        Command::Eval { .. } => "eval",
        Command::RouteStats { .. } => "route-stats",
        Command::ForcedPair { .. } => "forced-pair",
        Command::Baseline { .. } => "baseline",
        Command::Gradcheck => "gradcheck",
    }
}

fn hash_value(v: &Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("value serializes")))
}

fn summary(command: &str, config_hash: &str, seed: u64, fields: &[(&str, String)]) -> String {
    let mut s = format!("summary command={command} config_hash={config_hash} seed={seed}");
    for (k, v) in fields {
        s.push_str(&format!(" {k}={v}"));
    }
    s
}

/// Hash of everything that determines a non-training command's output.
fn invocation_hash(cli: &Cli, extra: Value) -> String {
    hash_value(&json!({
        "command": &cli.command,
        "seed": cli.common.seed.unwrap_or(0),
        "config": extra,
    }))
}

fn require_out(cli: &Cli) -> std::result::Result<&Path, CliError> {
    cli.common
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("`{}` needs --out <path>", command_name(&cli.command))))
}

fn load_model(path: &Path) -> Result<ToyModel<f32>> {
    load_checkpoint(path)
}

fn load_samples(paths: &[PathBuf]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_jsonl(p)?);
    }
    Ok(out)
}

fn train_config(cli: &Cli, stage: StageKind) -> Result<TrainConfig> {
    let mut cfg = match &cli.common.config {
        Some(p) => load_config::<TrainConfig>(p)?,
        None => TrainConfig::for_stage(stage),
    };
    if cfg.stage != stage {
        return Err(Error::Config(format!(
            "configuration is for stage {:?}, command runs {:?}",
            cfg.stage, stage
        )));
    }
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Samples from `--data`, else from the config's `data` list, else the synthetic corpus.
fn stage_data(
    flag: &[PathBuf],
    cfg: &mut TrainConfig,
    pick: impl FnOnce(Corpus) -> Vec<Sample>,
) -> Result<Vec<Sample>> {
    if !flag.is_empty() {
        cfg.data = flag.to_vec();
    }
    if cfg.data.is_empty() {
        Ok(pick(build_corpus(&CorpusSizes::default(), cfg.seed)?))
    } else {
        load_samples(&cfg.data)
    }
}

fn finish_training(
    model: &ToyModel<f32>,
    report: &StageReport,
    out: &Path,
    name: &str,
) -> Result<Vec<String>> {
    save_checkpoint(model, out)?;
    report.write(out, "train")?;
    let mut fields = vec![
        ("steps", report.steps.len().to_string()),
        ("stage", model.stage.to_string()),
    ];
    if let Some(last) = report.last() {
        fields.push(("final_nll", format!("{:.6}", last.nll)));
        fields.push(("final_orth", format!("{:.6}", last.orth)));
    }
    for (k, v) in &report.metrics {
        fields.push((k.as_str(), format!("{v:.6}")));
    }
    Ok(vec![summary(name, &report.config_hash, report.seed, &fields)])
}

fn transform(
    cli: &Cli,
    model: &Path,
    name: &str,
    f: fn(&mut ToyModel<f32>) -> Result<()>,
) -> std::result::Result<Vec<String>, CliError> {
    let out = require_out(cli)?;
    let mut m = load_model(model)?;
    f(&mut m)?;
    let manifest = save_checkpoint(&m, out)?;
    Ok(vec![summary(
        name,
        &manifest.config_hash,
        manifest.seed,
        &[("stage", m.stage.to_string()), ("tensors", manifest.tensors.len().to_string())],
    )])
}

/// Runs the parsed command and returns the lines to print.
pub fn execute(cli: &Cli) -> std::result::Result<Vec<String>, CliError> {
    if !cli.common.deterministic {
        return Err(CliError::Usage("only deterministic execution is implemented".into()));
    }
    let seed = cli.common.seed.unwrap_or(0);
    match &cli.command {
        Command::InitBase => {
            let out = require_out(cli)?;
            let mut cfg = match &cli.common.config {
                Some(p) => load_config::<ModelConfig>(p)?,
                None => ModelConfig::default(),
            };
            if let Some(s) = cli.common.seed {
                cfg.seed = s;
            }
            let model: ToyModel<f32> = init_base(&cfg, cfg.seed)?;
            let manifest = save_checkpoint(&model, out)?;
            Ok(vec![summary(
                "init-base",
                &manifest.config_hash,
                cfg.seed,
                &[("parameters", model.registry().param_count().to_string())],
            )])
        }
        Command::Pretrain { model, data, heldout } => {
            let out = require_out(cli)?;
            let mut cfg = train_config(cli, StageKind::Pretrain)?;
            let flag_heldout = heldout.as_ref().map(|p| load_jsonl(p)).transpose()?;
            let mut synthetic_heldout = None;
            let corpus = stage_data(data, &mut cfg, |c| {
                synthetic_heldout = Some(c.pretrain_heldout);
                c.pretrain
            })?;
            let held = flag_heldout.or(synthetic_heldout).unwrap_or_default();
            let base = load_model(model)?;
            let (m, report) = run_pretrain(base, &corpus, &held, &cfg)?;
            Ok(finish_training(&m, &report, out, "pretrain")?)
        }
        Command::GenData { task, n } => {
            let out = require_out(cli)?;
            let sizes = match &cli.common.config {
                Some(p) => load_config::<CorpusSizes>(p)?,
                None => CorpusSizes::default(),
            };
            let hash = invocation_hash(cli, serde_json::to_value(&sizes).map_err(Error::from)?);
            let count = match task {
                GenTask::Knowledge | GenTask::Alignment => {
                    let n = n.ok_or_else(|| CliError::Usage("--n is required for this task".into()))?;
                    let samples = if *task == GenTask::Knowledge {
                        gen_knowledge_task(n, seed)?.samples
                    } else {
                        gen_alignment_task(n, seed)?
                    };
                    write_jsonl(out, &samples)?;
                    samples.len()
                }
                GenTask::Corpus => {
                    let c = build_corpus(&sizes, seed)?;
                    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                    let splits: [(&str, &[Sample]); 6] = [
                        ("pretrain", &c.pretrain),
                        ("pretrain_heldout", &c.pretrain_heldout),
                        ("mka", &c.mka),
                        ("da", &c.da),
                        ("eval_knowledge", &c.eval_knowledge),
                        ("eval_alignment", &c.eval_alignment),
                    ];
                    let mut total = 0;
                    for (name, s) in splits {
                        write_jsonl(&out.join(format!("{name}.jsonl")), s)?;
                        total += s.len();
                    }
                    total
                }
            };
            Ok(vec![summary("gen-data", &hash, seed, &[("samples", count.to_string())])])
        }
        Command::Train { stage } => {
            let out = require_out(cli)?;
            match stage {
                TrainStage::Mka { model, data } => {
                    let mut cfg = train_config(cli, StageKind::Mka)?;
                    let samples = stage_data(data, &mut cfg, |c| c.mka)?;
                    let base = load_model(model)?;
                    let (m, report) = run_mka(&base, &samples, &cfg)?;
                    Ok(finish_training(&m, &report, out, "train-mka")?)
                }
                TrainStage::Da { model, data, lambda } => {
                    let mut cfg = train_config(cli, StageKind::Da)?;
                    if let Some(l) = lambda {
                        cfg.lambda_orth = *l;
                    }
                    let samples = stage_data(data, &mut cfg, |c| c.da)?;
                    let stripped = load_model(model)?;
                    let (m, report) = run_da(&stripped, &samples, &cfg)?;
                    Ok(finish_training(&m, &report, out, "train-da")?)
                }
            }
        }
        Command::StripNa { model } => transform(cli, model, "strip-na", strip_na),
        Command::MergeAttn { model } => transform(cli, model, "merge-attn", merge_attention_lora),
        Command::Merge { model } => transform(cli, model, "merge", merge_final),
        Command::Eval { model, data, metric } => {
            let m = load_model(model)?;
            let samples = load_jsonl(data)?;
            let hash = invocation_hash(cli, json!(null));
            let fields = match metric {
                Metric::Acc => vec![("accuracy", format!("{:.6}", eval_mc_accuracy(&m, &samples)?))],
                Metric::Format => {
                    let c = eval_format_counts(&m, &samples)?;
                    vec![
                        ("f1", format!("{:.6}", c.f1())),
                        ("precision", format!("{:.6}", c.precision())),
                        ("recall", format!("{:.6}", c.recall())),
                    ]
                }
            };
            let mut fields = fields;
            fields.push(("samples", samples.len().to_string()));
            Ok(vec![summary("eval", &hash, seed, &fields)])
        }
        Command::RouteStats { model, data, pairs, raw_weights } => {
            let out = require_out(cli)?;
            let m = load_model(model)?;
            let samples = load_jsonl(data)?;
            let act = route_stats(&m, &samples)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            act.counts.write_csv(&out.join("activation.csv"))?;
            let hash = invocation_hash(cli, json!(null));
            let mut fields = vec![
                ("tokens", act.tokens.to_string()),
                ("slots", act.slots.to_string()),
                ("selections", format!("{}", act.total())),
            ];
            let mut lines = vec![act.counts.render(0)];
            if let Some(p) = pairs {
                let knowledge = load_jsonl(p)?;
                let perf = pair_performance(&m, &knowledge, !raw_weights)?;
                perf.write_csv(&out.join("pair_accuracy.csv"))?;
                let s = mismatch_summary(&act, &perf);
                let js = out.join("mismatch.json");
                let text = serde_json::to_string_pretty(&s).map_err(Error::from)?;
                std::fs::write(&js, text).map_err(|e| Error::io(&js, e))?;
                lines.push(perf.render(3));
                fields.push((
                    "spearman",
                    s.spearman.map_or("undefined".to_string(), |v| format!("{v:.6}")),
                ));
            }
            lines.push(summary("route-stats", &hash, seed, &fields));
            Ok(lines)
        }
        Command::ForcedPair { model, data, i, j, raw_weights } => {
            let m = load_model(model)?;
            let samples = load_jsonl(data)?;
            let acc = forced_pair_eval(&m, &samples, *i, *j, !raw_weights)?;
            let hash = invocation_hash(cli, json!(null));
            Ok(vec![summary(
                "forced-pair",
                &hash,
                seed,
                &[("pair", format!("{i},{j}")), ("accuracy", format!("{acc:.6}"))],
            )])
        }
        Command::Baseline { kind: BaselineKind::ParallelLora { model, data, eval, drop } } => {
            let out = require_out(cli)?;
            let mut cfg = train_config(cli, StageKind::Mka)?;
            let samples = stage_data(data, &mut cfg, |c| c.mka)?;
            let base = load_model(model)?;
            let (m, report) = crate::analysis::run_parallel_baseline(&base, &samples, &cfg)?;
            let mut lines = finish_training(&m, &report, out, "baseline-parallel-lora")?;
            if let Some(p) = eval {
                let held = load_jsonl(p)?;
                let mut fields = vec![("accuracy", format!("{:.6}", eval_mc_accuracy(&m, &held)?))];
                if let Some(w) = drop {
                    let acc = eval_mc_accuracy_with(&m, &held, &drop_one(*w)?)?;
                    fields.push(("dropped", w.to_string()));
                    fields.push(("accuracy_dropped", format!("{acc:.6}")));
                }
                lines.push(summary("baseline-eval", &report.config_hash, report.seed, &fields));
            }
            Ok(lines)
        }
        Command::Gradcheck => {
            let results = gradcheck_pipeline(seed)?;
            let hash = invocation_hash(cli, json!(null));
            let mut lines = Vec::new();
            let mut worst: f64 = 0.0;
            for r in &results {
                lines.push(format!(
                    "{}: max_relative_error={:.3e} worst={} parameters={} coordinates={}",
                    r.objective, r.max_relative_error, r.worst_parameter, r.parameters, r.coordinates
                ));
                worst = worst.max(r.max_relative_error);
            }
            lines.push(summary(
                "gradcheck",
                &hash,
                seed,
                &[("max_relative_error", format!("{worst:.3e}"))],
            ));
            if worst >= GRADCHECK_TOLERANCE {
                for l in &lines {
                    println!("{l}");
                }
                return Err(Error::Metric(format!(
                    "gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:e}"
                ))
                .into());
            }
            Ok(lines)
        }
    }
}
