//! End-to-end experiment on a synthetic world: build the balanced dataset with
//! simulated annotators, train every model on unbalanced and balanced data,
//! and report the accuracy grid and explanation Recall@5.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use vqa_balance_core::data::{DataStore, Split, CANDIDATES_PER_TASK};
use vqa_balance_core::knn::neighbor_table;
use vqa_balance_core::metrics::{
    evaluate_predictions, explanation_baseline, explanation_ranking, mean_recall_at_5, predict_split, AccuracyMode,
    Baseline, EvalReport,
};
use vqa_balance_core::model::ModelKind;
use vqa_balance_core::pipeline::{
    assemble_balanced, balance_report, create_tasks, explanation_tasks, original_split, subsample_questions,
    DatasetSplit,
};
use vqa_balance_core::synth::{generate_world, SimulationSummary, World, WorldConfig};
use vqa_balance_core::train::{fit, ArchConfig, TrainConfig, TrainedModel};
use vqa_balance_core::vocab::FeatureTable;

use crate::manifest::{json_hash, store_fingerprints, ToolInfo};
use crate::store::{save_store, save_world, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    /// Seed of the simulated annotators.
    pub annotation_seed: u64,
    /// Seed used to subsample the balanced training set to the unbalanced size.
    pub subsample_seed: u64,
    pub random_baseline_seed: u64,
    pub arch: ArchConfig,
    /// Training settings for every trainable model unless overridden.
    pub train: TrainConfig,
    /// Per-model overrides keyed by model name (`lang`, `joint`, `counterexample`).
    pub per_model: BTreeMap<String, TrainConfig>,
    /// Accuracy modes to report; the first one is used in the summary tables.
    pub eval_modes: Vec<AccuracyMode>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            annotation_seed: 0,
            subsample_seed: 0,
            random_baseline_seed: 0,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            per_model: BTreeMap::new(),
            eval_modes: vec![AccuracyMode::Consensus, AccuracyMode::Simple],
        }
    }
}

impl ExperimentConfig {
    /// Sets every seed (world, annotators, subsampling, training, baselines) to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.annotation_seed = seed;
        self.subsample_seed = seed;
        self.random_baseline_seed = seed;
        self.train.seed = seed;
        for c in self.per_model.values_mut() {
            c.seed = seed;
        }
        self
    }

    pub fn train_config(&self, kind: ModelKind) -> &TrainConfig {
        self.per_model.get(kind.as_str()).unwrap_or(&self.train)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        for (name, c) in &self.per_model {
            match ModelKind::parse(name) {
                Some(ModelKind::Prior) | None => anyhow::bail!("no trainable model named {name:?}"),
                Some(_) => c.validate()?,
            }
        }
        anyhow::ensure!(!self.eval_modes.is_empty(), "eval_modes must not be empty");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrainSet {
    #[serde(rename = "U")]
    Unbalanced,
    #[serde(rename = "B_half")]
    BalancedHalf,
    #[serde(rename = "B")]
    Balanced,
}

impl TrainSet {
    pub const ALL: [TrainSet; 3] = [TrainSet::Unbalanced, TrainSet::BalancedHalf, TrainSet::Balanced];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainSet::Unbalanced => "U",
            TrainSet::BalancedHalf => "B_half",
            TrainSet::Balanced => "B",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestSet {
    #[serde(rename = "U")]
    Unbalanced,
    #[serde(rename = "B")]
    Balanced,
}

impl TestSet {
    pub fn as_str(self) -> &'static str {
        match self {
            TestSet::Unbalanced => "U",
            TestSet::Balanced => "B",
        }
    }
}

/// The four train/test combinations of the accuracy grid.
pub const CELLS: [(TrainSet, TestSet); 4] = [
    (TrainSet::Unbalanced, TestSet::Unbalanced),
    (TrainSet::Unbalanced, TestSet::Balanced),
    (TrainSet::BalancedHalf, TestSet::Balanced),
    (TrainSet::Balanced, TestSet::Balanced),
];

pub fn cell_name(train: TrainSet, test: TestSet) -> String {
    match train {
        TrainSet::BalancedHalf => format!("B_half {}", test.as_str()),
        _ => format!("{}{}", train.as_str(), test.as_str()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionSummary {
    pub tasks: usize,
    pub picked: usize,
    pub not_possible: usize,
    pub mismatched: usize,
    pub not_possible_rate: f64,
    pub mismatch_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub instances: usize,
    pub pairs: usize,
    pub weighted_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub model: ModelKind,
    pub train_set: TrainSet,
    pub epochs: usize,
    pub initial_train_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub explain_tasks_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub model: ModelKind,
    pub cell: String,
    pub train_set: TrainSet,
    pub test_set: TestSet,
    /// One report per accuracy mode, keyed by mode name.
    pub reports: BTreeMap<String, EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub tasks: usize,
    pub random: f64,
    pub distance: f64,
    pub vqa_prob: f64,
    pub trained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tool: ToolInfo,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub dataset_fingerprints: BTreeMap<String, String>,
    pub collection: CollectionSummary,
    /// Keyed by `"<U|B> <split>"`, e.g. `"B train"`.
    pub splits: BTreeMap<String, SplitSummary>,
    pub training: Vec<TrainingSummary>,
    pub grid: Vec<GridEntry>,
    pub recall_at_5: RecallTable,
}

impl ExperimentReport {
    pub fn entry(&self, model: ModelKind, train: TrainSet, test: TestSet) -> Option<&GridEntry> {
        self.grid
            .iter()
            .find(|e| e.model == model && e.train_set == train && e.test_set == test)
    }

    /// Overall accuracy of a grid cell in the first configured mode.
    pub fn accuracy(&self, model: ModelKind, train: TrainSet, test: TestSet) -> Option<f64> {
        let mode = self.config.eval_modes.first()?.as_str();
        Some(self.entry(model, train, test)?.reports.get(mode)?.overall)
    }
}

/// The report bundle as written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub report: ExperimentReport,
    pub json: Vec<u8>,
    pub markdown: Vec<u8>,
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Synth,
    Index,
    Tasks,
    Annotation,
    Assemble,
    Train,
    Evaluate,
    Report,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Index => "index",
            Stage::Tasks => "tasks",
            Stage::Annotation => "annotation",
            Stage::Assemble => "assemble",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

struct Collected {
    store: DataStore,
    world: World,
    summary: SimulationSummary,
}

fn stage(s: Stage) -> impl FnOnce() -> String {
    move || format!("stage {} failed", s.name())
}

fn collect(config: &ExperimentConfig, partial: &mut Option<DataStore>) -> anyhow::Result<Collected> {
    let (mut store, world) = generate_world(&config.world).with_context(stage(Stage::Synth))?;
    *partial = Some(store.clone());
    let neighbors = neighbor_table(&store, CANDIDATES_PER_TASK).with_context(stage(Stage::Index))?;
    create_tasks(&mut store, &neighbors).with_context(stage(Stage::Tasks))?;
    *partial = Some(store.clone());
    let result = world.simulate_collection(&mut store, config.annotation_seed);
    *partial = Some(store.clone());
    let summary = result.with_context(stage(Stage::Annotation))?;
    Ok(Collected { store, world, summary })
}

/// Runs the experiment. With `out`, writes `report.json`, `report.md`, and
/// the collected store (with latent scenes) under `out/store`. On failure,
/// whatever store state exists is still saved there.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> anyhow::Result<Bundle> {
    config.validate()?;
    let mut partial = None;
    let collected = collect(config, &mut partial);
    let result = collected.and_then(|c| {
        let bundle = analyze(config, &c)?;
        Ok((bundle, c))
    });
    let Some(dir) = out else {
        return result.map(|(b, _)| b);
    };
    match result {
        Ok((bundle, c)) => {
            write_bundle(&bundle, dir)?;
            save_store(&c.store, &dir.join("store"))?;
            save_world(&c.world, &dir.join("store"))?;
            Ok(bundle)
        }
        Err(e) => {
            if let Some(store) = partial {
                save_store(&store, &dir.join("store")).context("saving partial state")?;
            }
            Err(e)
        }
    }
}

pub fn write_bundle(bundle: &Bundle, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join(REPORT_JSON), &bundle.json)?;
    write_atomic(&dir.join(REPORT_MD), &bundle.markdown)?;
    Ok(())
}

fn summary(split: &DatasetSplit) -> SplitSummary {
    SplitSummary {
        instances: split.len(),
        pairs: split.pairs.len(),
        weighted_entropy: balance_report(split).weighted_entropy,
    }
}

fn evaluate(
    model: &TrainedModel,
    split: &DatasetSplit,
    table: &FeatureTable,
    modes: &[AccuracyMode],
) -> anyhow::Result<BTreeMap<String, EvalReport>> {
    let preds = predict_split(model, split, table)?;
    modes
        .iter()
        .map(|&m| Ok((m.as_str().to_string(), evaluate_predictions(&preds, split, m)?)))
        .collect()
}

fn analyze(config: &ExperimentConfig, c: &Collected) -> anyhow::Result<Bundle> {
    let store = &c.store;
    let table = FeatureTable::from_store(store);

    let mut splits = BTreeMap::new();
    let mut balanced = BTreeMap::new();
    let mut unbalanced = BTreeMap::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let u = original_split(store, split);
        let b = assemble_balanced(store, split).with_context(stage(Stage::Assemble))?;
        splits.insert(format!("U {}", split.as_str()), summary(&u));
        splits.insert(format!("B {}", split.as_str()), summary(&b));
        unbalanced.insert(split, u);
        balanced.insert(split, b);
    }
    let half = subsample_questions(&balanced[&Split::Train], unbalanced[&Split::Train].len(), config.subsample_seed);
    splits.insert("B_half train".into(), summary(&half));
    let train_sets: BTreeMap<TrainSet, &DatasetSplit> = [
        (TrainSet::Unbalanced, &unbalanced[&Split::Train]),
        (TrainSet::BalancedHalf, &half),
        (TrainSet::Balanced, &balanced[&Split::Train]),
    ]
    .into_iter()
    .collect();
    let explain_train = explanation_tasks(store, Split::Train);
    let val = &balanced[&Split::Val];

    let mut models: BTreeMap<(ModelKind, TrainSet), TrainedModel> = BTreeMap::new();
    let mut training = Vec::new();
    for kind in ModelKind::ALL {
        for ts in TrainSet::ALL {
            let tc = config.train_config(kind);
            let out = fit(
                kind,
                &train_sets[&ts].instances,
                &explain_train,
                &val.instances,
                &table,
                &config.arch,
                tc,
            )
            .with_context(|| format!("training {} on {}", kind.as_str(), ts.as_str()))
            .with_context(stage(Stage::Train))?;
            training.push(TrainingSummary {
                model: kind,
                train_set: ts,
                epochs: if kind == ModelKind::Prior { 0 } else { tc.epochs },
                initial_train_loss: out.history.first().map(|h| h.train_loss),
                final_train_loss: out.history.last().map(|h| h.train_loss),
                explain_tasks_used: out.explain_tasks_used,
            });
            models.insert((kind, ts), out.model);
        }
    }

    let test_sets = [
        (TestSet::Unbalanced, &unbalanced[&Split::Test]),
        (TestSet::Balanced, &balanced[&Split::Test]),
    ];
    let mut grid = Vec::new();
    for kind in ModelKind::ALL {
        for (train, test) in CELLS {
            let split = test_sets.iter().find(|(t, _)| *t == test).expect("both test sets").1;
            let reports = evaluate(&models[&(kind, train)], split, &table, &config.eval_modes)
                .with_context(stage(Stage::Evaluate))?;
            grid.push(GridEntry {
                model: kind,
                cell: cell_name(train, test),
                train_set: train,
                test_set: test,
                reports,
            });
        }
    }

    let explain_test = explanation_tasks(store, Split::Test);
    let answerer = &models[&(ModelKind::Joint, TrainSet::Balanced)];
    let explainer = &models[&(ModelKind::Counterexample, TrainSet::Balanced)];
    let recall = (|| -> anyhow::Result<RecallTable> {
        let seed = config.random_baseline_seed;
        Ok(RecallTable {
            tasks: explain_test.len(),
            random: mean_recall_at_5(&explain_test, |t| explanation_baseline(Baseline::Random { seed }, t, None))?,
            distance: mean_recall_at_5(&explain_test, |t| explanation_baseline(Baseline::Distance, t, None))?,
            vqa_prob: mean_recall_at_5(&explain_test, |t| {
                explanation_baseline(Baseline::VqaProb, t, Some((answerer, &table)))
            })?,
            trained: mean_recall_at_5(&explain_test, |t| explanation_ranking(explainer, t, &table))?,
        })
    })()
    .with_context(stage(Stage::Evaluate))?;

    let report = ExperimentReport {
        tool: ToolInfo::current(),
        config_hash: json_hash(config),
        config: config.clone(),
        dataset_fingerprints: store_fingerprints(store),
        collection: CollectionSummary {
            tasks: c.summary.picked + c.summary.not_possible,
            picked: c.summary.picked,
            not_possible: c.summary.not_possible,
            mismatched: c.summary.mismatched,
            not_possible_rate: ratio(c.summary.not_possible, c.summary.picked + c.summary.not_possible),
            mismatch_rate: ratio(c.summary.mismatched, c.summary.picked),
        },
        splits,
        training,
        grid,
        recall_at_5: recall,
    };
    let mut json = serde_json::to_vec_pretty(&report).with_context(stage(Stage::Report))?;
    json.push(b'\n');
    let markdown = render_markdown(&report).into_bytes();
    Ok(Bundle { report, json, markdown })
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

pub fn render_markdown(r: &ExperimentReport) -> String {
    let mode = r.config.eval_modes.first().map_or("consensus", |m| m.as_str());
    let mut s = String::new();
    let _ = writeln!(s, "# Experiment report\n");
    let _ = writeln!(s, "- tool: {} {}", r.tool.name, r.tool.version);
    let _ = writeln!(s, "- config hash: `{}`", r.config_hash);
    for (file, hash) in &r.dataset_fingerprints {
        let _ = writeln!(s, "- {file}: `{}`", &hash[..16]);
    }
    let c = &r.collection;
    let _ = writeln!(s, "\n## Collection\n");
    let _ = writeln!(
        s,
        "{} tasks, {} picked, {} not possible ({}%), {} mismatched pairs ({}% of picks).",
        c.tasks,
        c.picked,
        c.not_possible,
        pct(c.not_possible_rate),
        c.mismatched,
        pct(c.mismatch_rate)
    );
    let _ = writeln!(s, "\n| split | instances | pairs | weighted entropy (bits) |");
    let _ = writeln!(s, "|---|---:|---:|---:|");
    for (name, sp) in &r.splits {
        let _ = writeln!(s, "| {name} | {} | {} | {:.4} |", sp.instances, sp.pairs, sp.weighted_entropy);
    }

    let _ = writeln!(s, "\n## Accuracy ({mode})\n");
    let _ = write!(s, "| model |");
    for (train, test) in CELLS {
        let _ = write!(s, " {} |", cell_name(train, test));
    }
    let _ = writeln!(s, "\n|---|---:|---:|---:|---:|");
    for kind in ModelKind::ALL {
        let _ = write!(s, "| {} |", kind.as_str());
        for (train, test) in CELLS {
            let acc = r.accuracy(kind, train, test).map_or("-".into(), pct);
            let _ = write!(s, " {acc} |");
        }
        let _ = writeln!(s);
    }

    let _ = writeln!(s, "\n## Complementary pairs on the balanced test set\n");
    let _ = writeln!(s, "| model | trained on | both correct | identical | different |");
    let _ = writeln!(s, "|---|---|---:|---:|---:|");
    for kind in ModelKind::ALL {
        for train in [TrainSet::Unbalanced, TrainSet::BalancedHalf, TrainSet::Balanced] {
            let Some(p) = r
                .entry(kind, train, TestSet::Balanced)
                .and_then(|e| e.reports.get(mode))
                .and_then(|e| e.pair.as_ref())
            else {
                continue;
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                kind.as_str(),
                train.as_str(),
                pct(p.both_correct),
                pct(p.identical_preds),
                pct(p.different_preds)
            );
        }
    }

    let rc = &r.recall_at_5;
    let _ = writeln!(s, "\n## Counter-example Recall@5 ({} test tasks)\n", rc.tasks);
    let _ = writeln!(s, "| method | Recall@5 |");
    let _ = writeln!(s, "|---|---:|");
    for (name, v) in [
        ("random", rc.random),
        ("distance", rc.distance),
        ("vqa_prob", rc.vqa_prob),
        ("trained", rc.trained),
    ] {
        let _ = writeln!(s, "| {name} | {} |", pct(v));
    }
    s
}
