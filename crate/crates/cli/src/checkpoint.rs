//! On-disk layout of a finished run: per-(client, task) frozen bundles,
//! the adapter registry, the embedding table and the message transcript,
//! grouped in one directory per seed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fedseit_core::model::FilterBanks;
use fedseit_core::server::AdapterRegistry;
use fedseit_core::train::TaskRecord;
use fedseit_core::Example;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingTable;
use crate::federation::{transcript_to_jsonl, RunOutput};

/// Everything needed to re-evaluate one task long after training: the
/// client's final base, the task's frozen parameters (with the exact
/// foreign adapters it trained with) and its test documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBundle {
    pub client_id: usize,
    pub task_id: usize,
    pub base: FilterBanks,
    pub record: TaskRecord,
    pub test: Vec<Example>,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed{seed}"))
}

/// Writes bundles, registry, embeddings and transcript for one seed.
pub fn save_run(
    out: &Path,
    seed: u64,
    run: &RunOutput,
    test_sets: &[Vec<Vec<Example>>],
    table: &EmbeddingTable,
) -> Result<()> {
    let dir = seed_dir(out, seed);
    let bundles = dir.join("bundles");
    std::fs::create_dir_all(&bundles)
        .with_context(|| format!("cannot create {}", bundles.display()))?;

    for client in &run.clients {
        for (t, record) in client.tasks.iter().enumerate() {
            let bundle = TaskBundle {
                client_id: client.client_id,
                task_id: t,
                base: client.base.clone(),
                record: record.clone(),
                test: test_sets[client.client_id][t].clone(),
            };
            write_json(
                &bundles.join(format!("client{}_task{t}.json", client.client_id)),
                &bundle,
            )?;
        }
    }
    write_json(&dir.join("registry.json"), &run.registry)?;
    write_json(&dir.join("embeddings.json"), table)?;
    std::fs::write(dir.join("transcript.jsonl"), transcript_to_jsonl(&run.transcript)?)
        .with_context(|| format!("cannot write {}", dir.join("transcript.jsonl").display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

/// One seed's worth of saved state.
pub struct SavedSeed {
    pub seed: u64,
    pub bundles: Vec<TaskBundle>,
    pub table: EmbeddingTable,
}

pub fn load_registry(out: &Path, seed: u64) -> Result<AdapterRegistry> {
    read_json(&seed_dir(out, seed).join("registry.json"))
}

/// Loads every `seed*/` directory under a checkpoint root.
pub fn load_all_seeds(out: &Path) -> Result<Vec<SavedSeed>> {
    let mut seeds = Vec::new();
    for entry in std::fs::read_dir(out)
        .with_context(|| format!("cannot list checkpoints in {}", out.display()))?
    {
        let path = entry?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
        let Some(rest) = name.strip_prefix("seed") else {
            continue;
        };
        let Ok(seed) = rest.parse::<u64>() else {
            continue;
        };
        seeds.push((seed, path));
    }
    if seeds.is_empty() {
        bail!("no seed directories found under {}", out.display());
    }
    seeds.sort_by_key(|(s, _)| *s);

    seeds
        .into_iter()
        .map(|(seed, path)| {
            let table: EmbeddingTable = read_json(&path.join("embeddings.json"))?;
            let bundle_dir = path.join("bundles");
            let mut files: Vec<PathBuf> = std::fs::read_dir(&bundle_dir)
                .with_context(|| format!("cannot list bundles in {}", bundle_dir.display()))?
                .map(|e| Ok(e?.path()))
                .collect::<Result<_>>()?;
            files.sort();
            let mut bundles = Vec::new();
            for file in files {
                if file.extension().is_some_and(|e| e == "json") {
                    bundles.push(read_json::<TaskBundle>(&file)?);
                }
            }
            if bundles.is_empty() {
                bail!("no task bundles under {}", bundle_dir.display());
            }
            bundles.sort_by_key(|b| (b.client_id, b.task_id));
            Ok(SavedSeed {
                seed,
                bundles,
                table,
            })
        })
        .collect()
}
