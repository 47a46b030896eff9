//! Command line interface.

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vqa_balance_core::data::{AnnotationResult, DataStore, Split, TaskStatus, CANDIDATES_PER_TASK};
use vqa_balance_core::knn::neighbor_table;
use vqa_balance_core::metrics::{
    evaluate_predictions, explanation_baseline, explanation_ranking, mean_recall_at_5, predict_split, AccuracyMode,
    Baseline, EvalReport,
};
use vqa_balance_core::model::ModelKind;
use vqa_balance_core::pipeline::{
    aggregate_round, assemble_balanced, balance_report, create_tasks, explanation_tasks, ingest_result, original_split,
    BalanceReport, DatasetSplit,
};
use vqa_balance_core::synth::{generate_world, WorldConfig};
use vqa_balance_core::train::{fit, ArchConfig, TrainConfig};
use vqa_balance_core::vocab::FeatureTable;

use crate::checkpoint::Checkpoint;
use crate::experiment::{run_experiment, ExperimentConfig, REPORT_JSON, REPORT_MD};
use crate::manifest::{json_hash, sha256_hex, store_fingerprints, CheckpointRef, RunManifest, ToolInfo};
use crate::service::{self, AppState};
use crate::store::{load_store, load_world, read_neighbors, save_store, save_world, write_atomic, write_neighbors, NEIGHBORS};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "vqa-balance", version, about = "Build balanced VQA datasets and train answer/counter-example models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world (images, questions, answers, latent scenes).
    Synth {
        /// World configuration JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Nearest-neighbor index operations.
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Dataset balancing steps.
    Pipeline {
        #[command(subcommand)]
        command: PipelineCommand,
    },
    /// Run the annotation HTTP service over a store.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Lease length in seconds.
        #[arg(long, default_value_t = service::DEFAULT_LEASE_TTL.as_secs())]
        lease_ttl: u64,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Train one model on the train split.
    Train {
        #[arg(long, value_parser = parse_model)]
        model: ModelKind,
        /// JSON with optional `arch` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Variant::Balanced)]
        data: Variant,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
        #[arg(long, value_parser = parse_mode, default_value = "consensus")]
        mode: AccuracyMode,
        #[arg(long, value_enum, default_value_t = Variant::Balanced)]
        data: Variant,
        /// Where to write the JSON report; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Full synthetic experiment: balance, train all models, evaluate.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Sets every seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Compute k nearest same-split neighbors of every image.
    Build {
        #[arg(long)]
        store: PathBuf,
        /// Defaults to `<store>/neighbors.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = CANDIDATES_PER_TASK)]
        k: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum PipelineCommand {
    /// Create one annotation task per answered question.
    Tasks {
        #[arg(long)]
        store: PathBuf,
        /// Defaults to `<store>/neighbors.jsonl`.
        #[arg(long)]
        neighbors: Option<PathBuf>,
    },
    /// Close open tasks from a JSON-lines file of results, or with simulated annotators.
    Ingest {
        #[arg(long)]
        store: PathBuf,
        #[command(flatten)]
        source: Source,
    },
    /// Record ten second-round answers per picked task and build pairs.
    Aggregate {
        #[arg(long)]
        store: PathBuf,
        #[command(flatten)]
        source: Source,
    },
    /// Write a dataset split as JSON.
    Assemble {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_parser = parse_split)]
        split: Split,
        #[arg(long, value_enum, default_value_t = Variant::Balanced)]
        data: Variant,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer-distribution statistics before and after balancing.
    Report {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Source {
    /// JSON-lines input file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Use the simulated annotators of the store's synthetic world with this seed.
    #[arg(long)]
    simulate: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Balanced,
    Unbalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Markdown,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| format!("unknown model {s:?} (prior, lang, joint, counterexample)"))
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?} (train, val, test)"))
}

fn parse_mode(s: &str) -> Result<AccuracyMode, String> {
    AccuracyMode::parse(s).ok_or_else(|| format!("unknown mode {s:?} (consensus, simple)"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_json_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

/// Plain JSON lines; a `schema_version` field, if present, is ignored.
fn read_lines<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_atomic(path, &bytes)?;
    Ok(())
}

fn dataset(store: &DataStore, split: Split, variant: Variant) -> anyhow::Result<DatasetSplit> {
    Ok(match variant {
        Variant::Balanced => assemble_balanced(store, split)?,
        Variant::Unbalanced => original_split(store, split),
    })
}

/// `arch` and `train` sections of a training configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub tool: ToolInfo,
    pub checkpoint_sha256: String,
    pub model: ModelKind,
    pub split: Split,
    pub data: String,
    pub dataset_fingerprints: std::collections::BTreeMap<String, String>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSummary {
    pub split: Split,
    pub unbalanced: BalanceReport,
    pub balanced: BalanceReport,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut cfg: WorldConfig = read_json_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (store, world) = generate_world(&cfg)?;
            save_store(&store, &out)?;
            save_world(&world, &out)?;
            let (images, questions) = store.sizes();
            println!("wrote {images} images and {questions} questions to {}", out.display());
        }
        Command::Index {
            command: IndexCommand::Build { store, out, k },
        } => {
            let s = load_store(&store)?;
            let table = neighbor_table(&s, k)?;
            let out = out.unwrap_or_else(|| store.join(NEIGHBORS));
            write_neighbors(&out, table.values())?;
            println!("wrote {} neighbor lists (k={k}) to {}", table.len(), out.display());
        }
        Command::Pipeline { command } => pipeline(command)?,
        Command::Serve {
            store,
            port,
            lease_ttl,
            host,
        } => {
            let state = AppState::open(store, Duration::from_secs(lease_ttl))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(state, SocketAddr::new(host, port)))?;
        }
        Command::Train {
            model,
            config,
            store,
            out,
            data,
        } => train(model, config.as_deref(), &store, &out, data)?,
        Command::Eval {
            checkpoint,
            store,
            split,
            mode,
            data,
            report,
            seed,
        } => {
            let out = eval(&checkpoint, &store, split, mode, data, seed)?;
            match report {
                Some(path) => {
                    write_json(&path, &out)?;
                    println!("{}: {:.2}% over {} instances", out.model.as_str(), 100.0 * out.report.overall, out.report.instances);
                }
                None => println!("{}", serde_json::to_string_pretty(&out)?),
            }
        }
        Command::Experiment { config, out, seed } => {
            let mut cfg: ExperimentConfig = read_json_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            let bundle = run_experiment(&cfg, Some(&out))?;
            println!("wrote {} and {} to {}", REPORT_JSON, REPORT_MD, out.display());
            print!("{}", String::from_utf8_lossy(&bundle.markdown));
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct RoundLine {
    task_id: String,
    answers: Vec<String>,
}

fn pipeline(command: PipelineCommand) -> anyhow::Result<()> {
    match command {
        PipelineCommand::Tasks { store, neighbors } => {
            let mut s = load_store(&store)?;
            let path = neighbors.unwrap_or_else(|| store.join(NEIGHBORS));
            let table = read_neighbors(&path)?;
            let n = create_tasks(&mut s, &table)?;
            save_store(&s, &store)?;
            println!("created {n} tasks");
        }
        PipelineCommand::Ingest { store, source } => {
            let mut s = load_store(&store)?;
            let mut closed = 0usize;
            if let Some(path) = source.input {
                for r in read_lines::<AnnotationResult>(&path)? {
                    ingest_result(&mut s, r)?;
                    closed += 1;
                }
            } else if let Some(seed) = source.simulate {
                let world = load_world(&store).context("simulated annotators need the world files written by `synth`")?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let open: Vec<_> = s.tasks().filter(|t| t.status == TaskStatus::Open).cloned().collect();
                for t in &open {
                    let r = world.simulated_annotator(&s, t, "simulated", 0, &mut rng)?;
                    ingest_result(&mut s, r)?;
                    closed += 1;
                }
            }
            save_store(&s, &store)?;
            println!("closed {closed} tasks");
        }
        PipelineCommand::Aggregate { store, source } => {
            let mut s = load_store(&store)?;
            let mut pairs = 0usize;
            let mut mismatched = 0usize;
            let mut record = |s: &mut DataStore, task_id: &str, answers: &[String]| -> anyhow::Result<()> {
                let p = aggregate_round(s, task_id, answers)?;
                pairs += 1;
                mismatched += usize::from(p.mismatch);
                Ok(())
            };
            if let Some(path) = source.input {
                for line in read_lines::<RoundLine>(&path)? {
                    record(&mut s, &line.task_id, &line.answers)?;
                }
            } else if let Some(seed) = source.simulate {
                let world = load_world(&store).context("simulated answers need the world files written by `synth`")?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pending: Vec<_> = s
                    .rounds()
                    .filter(|r| s.pair(&r.question_id).is_none())
                    .map(|r| (r.task_id.clone(), r.question_id.clone(), r.image_id.clone()))
                    .collect();
                for (task_id, qid, image) in pending {
                    let q = s.question(&qid).expect("round question exists").clone();
                    let answers = world.simulated_round(&q, &image, &mut rng)?;
                    record(&mut s, &task_id, &answers)?;
                }
            }
            save_store(&s, &store)?;
            println!("built {pairs} pairs ({mismatched} mismatched)");
        }
        PipelineCommand::Assemble { store, split, data, out } => {
            let s = load_store(&store)?;
            let d = dataset(&s, split, data)?;
            write_json(&out, &d)?;
            println!("wrote {} instances and {} pairs to {}", d.len(), d.pairs.len(), out.display());
        }
        PipelineCommand::Report { store, format } => {
            let s = load_store(&store)?;
            let mut rows = Vec::new();
            for split in Split::ALL {
                rows.push(BalanceSummary {
                    split,
                    unbalanced: balance_report(&original_split(&s, split)),
                    balanced: balance_report(&assemble_balanced(&s, split)?),
                });
            }
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&rows)?),
                Format::Markdown => print!("{}", balance_markdown(&rows)),
            }
        }
    }
    Ok(())
}

pub fn balance_markdown(rows: &[BalanceSummary]) -> String {
    let mut s = String::from("| split | data | instances | weighted entropy (bits) | not possible | mismatched |\n");
    s.push_str("|---|---|---:|---:|---:|---:|\n");
    for r in rows {
        for (name, b) in [("unbalanced", &r.unbalanced), ("balanced", &r.balanced)] {
            let _ = writeln!(
                s,
                "| {} | {name} | {} | {:.4} | {:.2}% | {:.2}% |",
                r.split.as_str(),
                b.instances,
                b.weighted_entropy,
                100.0 * b.not_possible_rate,
                100.0 * b.mismatch_rate
            );
        }
    }
    s
}

fn train(model: ModelKind, config: Option<&Path>, store: &Path, out: &Path, data: Variant) -> anyhow::Result<()> {
    let file: TrainFile = read_json_or_default(config)?;
    let s = load_store(store)?;
    let table = FeatureTable::from_store(&s);
    let train = dataset(&s, Split::Train, data)?;
    let val = dataset(&s, Split::Val, data)?;
    let explain = explanation_tasks(&s, Split::Train);
    let fitted = fit(model, &train.instances, &explain, &val.instances, &table, &file.arch, &file.train)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt = Checkpoint::new(fitted.model);
    let bytes = ckpt.to_bytes();
    write_atomic(&out.join(CHECKPOINT_FILE), &bytes)?;
    let manifest = RunManifest {
        tool: ToolInfo::current(),
        model,
        split: format!("{} train", variant_name(data)),
        train_config: file.train,
        arch: file.arch,
        config_hash: json_hash(&file),
        dataset_fingerprints: store_fingerprints(&s),
        explain_tasks_used: fitted.explain_tasks_used,
        history: fitted.history,
        checkpoint: CheckpointRef {
            file: CHECKPOINT_FILE.into(),
            sha256: sha256_hex(&bytes),
        },
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    match manifest.history.last() {
        Some(h) => println!("trained {} for {} epochs, final train loss {:.4}", model.as_str(), h.epoch, h.train_loss),
        None => println!("fitted {}", model.as_str()),
    }
    Ok(())
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Balanced => "balanced",
        Variant::Unbalanced => "unbalanced",
    }
}

/// Accuracy on one split plus, when the split has explanation tasks,
/// Recall@5 of the baselines and of the checkpoint's explaining head.
pub fn eval(
    checkpoint: &Path,
    store: &Path,
    split: Split,
    mode: AccuracyMode,
    data: Variant,
    seed: u64,
) -> anyhow::Result<EvalOutput> {
    let bytes = std::fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let s = load_store(store)?;
    let table = FeatureTable::from_store(&s);
    if let Some(p) = &ckpt.model.params {
        if p.config.feature_dim != table.dim() {
            bail!(
                "checkpoint expects {}-dimensional features, store has {}",
                p.config.feature_dim,
                table.dim()
            );
        }
    }
    let d = dataset(&s, split, data)?;
    let preds = predict_split(&ckpt.model, &d, &table)?;
    let mut report = evaluate_predictions(&preds, &d, mode)?;
    let tasks = explanation_tasks(&s, split);
    if !tasks.is_empty() {
        let r = &mut report.recall_at_5;
        r.insert(
            "random".into(),
            mean_recall_at_5(&tasks, |t| explanation_baseline(Baseline::Random { seed }, t, None))?,
        );
        r.insert(
            "distance".into(),
            mean_recall_at_5(&tasks, |t| explanation_baseline(Baseline::Distance, t, None))?,
        );
        if ckpt.model.params.is_some() {
            let m = Some((&ckpt.model, &table));
            r.insert(
                "vqa_prob".into(),
                mean_recall_at_5(&tasks, |t| explanation_baseline(Baseline::VqaProb, t, m))?,
            );
        }
        if ckpt.model.kind == ModelKind::Counterexample {
            r.insert(
                "trained".into(),
                mean_recall_at_5(&tasks, |t| explanation_ranking(&ckpt.model, t, &table))?,
            );
        }
    }
    Ok(EvalOutput {
        tool: ToolInfo::current(),
        checkpoint_sha256: sha256_hex(&bytes),
        model: ckpt.model.kind,
        split,
        data: variant_name(data).into(),
        dataset_fingerprints: store_fingerprints(&s),
        report,
    })
}
