//! JSON-lines persistence for a [`DataStore`] and its side files.
//!
//! One file per record type, one object per line, each carrying
//! `"schema_version": 1`. Records are written in id order and every file is
//! replaced atomically (write to a temporary sibling, then rename).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use vqa_balance_core::data::{DataStore, Records};
use vqa_balance_core::knn::NeighborList;
use vqa_balance_core::synth::{LatentScene, World, WorldConfig};

pub const SCHEMA_VERSION: u64 = 1;

pub const IMAGES: &str = "images.jsonl";
pub const QUESTIONS: &str = "questions.jsonl";
pub const ANSWERS: &str = "answers.jsonl";
pub const PAIRS: &str = "pairs.jsonl";
pub const TASKS: &str = "tasks.jsonl";
pub const RESULTS: &str = "results.jsonl";
pub const ROUNDS: &str = "rounds.jsonl";
pub const LATENTS: &str = "latents.jsonl";
pub const WORLD: &str = "world.json";
pub const NEIGHBORS: &str = "neighbors.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Invalid(#[from] vqa_balance_core::Error),
}

type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize)]
struct Versioned<'a, T> {
    schema_version: u64,
    #[serde(flatten)]
    record: &'a T,
}

/// Serializes records as JSON lines, each tagged with the schema version.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(
            &mut out,
            &Versioned {
                schema_version: SCHEMA_VERSION,
                record: r,
            },
        )
        .expect("records serialize to JSON");
        out.push(b'\n');
    }
    out
}

/// Parses JSON lines, checking the schema version. Blank lines are skipped.
pub fn from_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| StoreError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let mut value: Value = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| parse("expected a JSON object".into()))?;
        match obj.remove("schema_version").and_then(|v| v.as_u64()) {
            Some(SCHEMA_VERSION) => {}
            Some(v) => return Err(parse(format!("unsupported schema_version {v}"))),
            None => return Err(parse("missing schema_version".into())),
        }
        out.push(serde_json::from_value(value).map_err(|e| parse(e.to_string()))?);
    }
    Ok(out)
}

/// Replaces `path` with `bytes` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, &to_jsonl(records))
}

/// Reads a JSON-lines file; a missing file reads as empty.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    match fs::read_to_string(path) {
        Ok(text) => from_jsonl(path, &text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(io_err(path)(e)),
    }
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(StoreError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "store directory does not exist"),
        })
    }
}

/// Loads and validates every record file under `dir`. Missing files are empty.
pub fn load_store(dir: &Path) -> Result<DataStore> {
    require_dir(dir)?;
    let records = Records {
        images: read_jsonl(&dir.join(IMAGES))?,
        questions: read_jsonl(&dir.join(QUESTIONS))?,
        answers: read_jsonl(&dir.join(ANSWERS))?,
        pairs: read_jsonl(&dir.join(PAIRS))?,
        tasks: read_jsonl(&dir.join(TASKS))?,
        results: read_jsonl(&dir.join(RESULTS))?,
        rounds: read_jsonl(&dir.join(ROUNDS))?,
    };
    Ok(DataStore::from_records(records)?)
}

/// The serialized bytes of each record file, in file-name order.
pub fn store_files(store: &DataStore) -> Vec<(&'static str, Vec<u8>)> {
    let r = store.to_records();
    vec![
        (ANSWERS, to_jsonl(&r.answers)),
        (IMAGES, to_jsonl(&r.images)),
        (PAIRS, to_jsonl(&r.pairs)),
        (QUESTIONS, to_jsonl(&r.questions)),
        (RESULTS, to_jsonl(&r.results)),
        (ROUNDS, to_jsonl(&r.rounds)),
        (TASKS, to_jsonl(&r.tasks)),
    ]
}

/// Writes every record file, creating `dir` if needed.
pub fn save_store(store: &DataStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, bytes) in store_files(store) {
        write_atomic(&dir.join(name), &bytes)?;
    }
    Ok(())
}

/// Latent scenes plus the world configuration that produced them.
pub fn save_world(world: &World, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let scenes: Vec<&LatentScene> = world.scenes.values().collect();
    write_jsonl(&dir.join(LATENTS), &scenes)?;
    let mut cfg = serde_json::to_vec_pretty(&world.config).expect("config serializes");
    cfg.push(b'\n');
    write_atomic(&dir.join(WORLD), &cfg)
}

pub fn load_world(dir: &Path) -> Result<World> {
    let path = dir.join(WORLD);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let config: WorldConfig = serde_json::from_str(&text).map_err(|e| StoreError::Parse {
        path: path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let scenes: Vec<LatentScene> = read_jsonl(&dir.join(LATENTS))?;
    Ok(World::from_scenes(config, scenes))
}

#[derive(Serialize, Deserialize)]
struct NeighborLine {
    query_image_id: String,
    neighbors: Vec<(String, f64)>,
}

pub fn write_neighbors<'a, I: IntoIterator<Item = &'a NeighborList>>(path: &Path, lists: I) -> Result<()> {
    let lines: Vec<NeighborLine> = lists
        .into_iter()
        .map(|l| NeighborLine {
            query_image_id: l.query_image_id.clone(),
            neighbors: l.neighbors.clone(),
        })
        .collect();
    write_jsonl(path, &lines)
}

pub fn read_neighbors(path: &Path) -> Result<std::collections::BTreeMap<String, NeighborList>> {
    if !path.exists() {
        return Err(io_err(path)(std::io::Error::new(std::io::ErrorKind::NotFound, "no neighbor file")));
    }
    let lines: Vec<NeighborLine> = read_jsonl(path)?;
    Ok(lines
        .into_iter()
        .map(|l| {
            (
                l.query_image_id.clone(),
                NeighborList {
                    query_image_id: l.query_image_id,
                    neighbors: l.neighbors,
                },
            )
        })
        .collect())
}
