//! Corpus ingestion, tokenization, embedding tables and the non-iid
//! task grid: every (client, task) cell draws a label subset and the
//! cells sharing a label split its training documents into disjoint,
//! near-equal parts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fedseit_core::rng::rng_from;
use fedseit_core::{Example, TaskData, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One tokenized document with its global label id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<String>,
    pub label: usize,
}

/// A labelled corpus with a deterministic train/test partition: within
/// each label, every fifth document (in file order) is held out for
/// testing, so the test side never depends on a seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    /// Label names; index = global label id.
    pub labels: Vec<String>,
    pub train: Vec<Document>,
    pub test: Vec<Document>,
    /// Documents dropped because tokenization left nothing.
    pub dropped_empty: usize,
}

/// Lowercase, split on whitespace, strip leading/trailing
/// non-alphanumeric characters, drop empty tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

impl Corpus {
    /// Parses a "label<TAB>text" TSV file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read corpus {}", path.display()))?;
        let mut raw = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let Some((label, body)) = line.split_once('\t') else {
                bail!(
                    "{}:{}: expected 'label<TAB>text'",
                    path.display(),
                    lineno + 1
                );
            };
            raw.push((label.to_string(), tokenize(body)));
        }
        Self::from_documents(raw)
    }

    /// Builds a corpus from (label name, tokens) pairs in document order.
    pub fn from_documents(raw: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut labels: Vec<String> = Vec::new();
        let mut ids: BTreeMap<String, usize> = BTreeMap::new();
        let mut seen_per_label: Vec<usize> = Vec::new();
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut dropped_empty = 0usize;

        for (name, tokens) in raw {
            if tokens.is_empty() {
                dropped_empty += 1;
                continue;
            }
            let label = *ids.entry(name.clone()).or_insert_with(|| {
                labels.push(name);
                seen_per_label.push(0);
                labels.len() - 1
            });
            seen_per_label[label] += 1;
            let doc = Document { tokens, label };
            if seen_per_label[label] % 5 == 0 {
                test.push(doc);
            } else {
                train.push(doc);
            }
        }
        if labels.is_empty() {
            bail!("corpus contains no usable documents");
        }
        Ok(Self {
            labels,
            train,
            test,
            dropped_empty,
        })
    }

    /// Sorted unique tokens over both splits.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut vocab: Vec<String> = self
            .train
            .iter()
            .chain(&self.test)
            .flat_map(|d| d.tokens.iter().cloned())
            .collect();
        vocab.sort();
        vocab.dedup();
        vocab
    }
}

/// Seeded synthetic corpus: each label owns a private token pool that
/// dominates its documents, plus a small shared pool, so the labels are
/// separable but not trivially so. `prefix` namespaces the vocabulary,
/// letting tests build disjoint-vocabulary domains.
pub fn synthetic_corpus(
    prefix: &str,
    n_labels: usize,
    docs_per_label: usize,
    seed: u64,
) -> Result<Corpus> {
    let mut rng = rng_from(seed, &[0x636f7270]);
    let mut raw = Vec::new();
    for label in 0..n_labels {
        for _ in 0..docs_per_label {
            let len = rng.gen_range(8..15usize);
            let tokens = (0..len)
                .map(|_| {
                    if rng.gen_bool(0.75) {
                        format!("{prefix}l{label}w{}", rng.gen_range(0..8u32))
                    } else {
                        format!("{prefix}shared{}", rng.gen_range(0..6u32))
                    }
                })
                .collect();
            raw.push((format!("{prefix}label{label}"), tokens));
        }
    }
    Corpus::from_documents(raw)
}

/// Frozen token-to-row lookup; the last matrix row is the all-zero
/// out-of-vocabulary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub vocab: BTreeMap<String, usize>,
    /// `[V + 1, D]`, rows in `vocab` order plus the OOV row.
    pub matrix: Tensor,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn oov_row(&self) -> usize {
        self.matrix.shape()[0] - 1
    }

    pub fn index(&self, token: &str) -> usize {
        self.vocab.get(token).copied().unwrap_or(self.oov_row())
    }

    pub fn lookup(&self, token: &str) -> &[f64] {
        let row = self.index(token);
        let d = self.dim();
        &self.matrix.data()[row * d..(row + 1) * d]
    }
}

/// Parses a text embedding file: one `token v1 .. vD` row per line, with
/// an optional leading `V D` count header.
pub fn load_embeddings(path: &Path, d: usize) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read embeddings {}", path.display()))?;
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if lineno == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<f64>().is_ok()) {
            continue; // count header
        }
        let values: std::result::Result<Vec<f64>, _> =
            fields[1..].iter().map(|f| f.parse::<f64>()).collect();
        let values = values.map_err(|e| {
            anyhow::anyhow!("{}:{}: malformed row: {e}", path.display(), lineno + 1)
        })?;
        if values.len() != d {
            bail!(
                "{}:{}: expected {d} values, found {}",
                path.display(),
                lineno + 1,
                values.len()
            );
        }
        if !values.iter().all(|v| v.is_finite()) {
            bail!("{}:{}: non-finite value", path.display(), lineno + 1);
        }
        rows.push((fields[0].to_string(), values));
    }
    if rows.is_empty() {
        bail!("{}: no embedding rows", path.display());
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    build_table(rows, d)
}

/// Seeded uniform(-0.1, 0.1) embeddings for a vocabulary.
pub fn synth_embeddings(vocab: &[String], d: usize, seed: u64) -> Result<EmbeddingTable> {
    if vocab.is_empty() {
        bail!("cannot build embeddings for an empty vocabulary");
    }
    let mut sorted = vocab.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut rng = rng_from(seed, &[0x656d6264]);
    let rows = sorted
        .into_iter()
        .map(|tok| {
            let values = (0..d).map(|_| rng.gen_range(-0.1..0.1)).collect();
            (tok, values)
        })
        .collect();
    build_table(rows, d)
}

fn build_table(rows: Vec<(String, Vec<f64>)>, d: usize) -> Result<EmbeddingTable> {
    let v = rows.len();
    let mut vocab = BTreeMap::new();
    let mut data = Vec::with_capacity((v + 1) * d);
    for (i, (token, values)) in rows.into_iter().enumerate() {
        if vocab.insert(token.clone(), i).is_some() {
            bail!("duplicate embedding row for token '{token}'");
        }
        data.extend(values);
    }
    data.extend(std::iter::repeat(0.0).take(d)); // OOV row
    Ok(EmbeddingTable {
        vocab,
        matrix: Tensor::new(vec![v + 1, d], data).map_err(anyhow::Error::new)?,
    })
}

/// One cell of the C x T task grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub client_id: usize,
    pub task_id: usize,
    /// Global label ids, sorted; the task-local label of a document is
    /// its label's position in this list.
    pub label_subset: Vec<usize>,
    pub data: TaskData,
}

/// Builds the C x T grid: each cell draws `labels_per_task` labels
/// without replacement (seeded, client-major order); each label's
/// training documents are shuffled once and split into as many disjoint
/// near-equal parts as there are cells that drew it; 10% of each cell's
/// share becomes its validation set; the test set is every held-out
/// document with a matching label, shared between cells and independent
/// of the seed.
pub fn non_iid_split(
    corpus: &Corpus,
    clients: usize,
    tasks: usize,
    labels_per_task: usize,
    seed: u64,
    table: &EmbeddingTable,
) -> Result<Vec<Vec<TaskDataset>>> {
    let n_labels = corpus.labels.len();
    if labels_per_task > n_labels {
        bail!("labels_per_task {labels_per_task} exceeds the {n_labels} corpus labels");
    }

    // label draws, client-major
    let mut draw_rng = rng_from(seed, &[0x64726177]);
    let mut cell_labels = vec![vec![Vec::new(); tasks]; clients];
    let mut usage: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for c in 0..clients {
        for t in 0..tasks {
            let mut pool: Vec<usize> = (0..n_labels).collect();
            pool.shuffle(&mut draw_rng);
            let mut subset: Vec<usize> = pool.into_iter().take(labels_per_task).collect();
            for &l in &subset {
                usage.entry(l).or_default().push((c, t));
            }
            subset.sort_unstable();
            cell_labels[c][t] = subset;
        }
    }

    // per-label document indices in the training split
    let mut label_docs: Vec<Vec<usize>> = vec![Vec::new(); n_labels];
    for (i, doc) in corpus.train.iter().enumerate() {
        label_docs[doc.label].push(i);
    }

    // partition each used label's documents across its cells
    let mut shares: BTreeMap<(usize, usize, usize), Vec<usize>> = BTreeMap::new();
    for (&label, cells) in &usage {
        let k = cells.len();
        let mut docs = label_docs[label].clone();
        if docs.len() < k {
            bail!(
                "label '{}' has {} training documents but {k} task cells drew it",
                corpus.labels[label],
                docs.len()
            );
        }
        docs.shuffle(&mut rng_from(seed, &[0x73687566, label as u64]));
        let base = docs.len() / k;
        let extra = docs.len() % k;
        let mut cursor = 0;
        for (part, &(c, t)) in cells.iter().enumerate() {
            let size = base + usize::from(part < extra);
            shares.insert((c, t, label), docs[cursor..cursor + size].to_vec());
            cursor += size;
        }
    }

    let to_example = |doc: &Document, subset: &[usize]| -> Example {
        Example {
            tokens: doc.tokens.iter().map(|w| table.index(w)).collect(),
            label: subset.binary_search(&doc.label).unwrap(),
        }
    };

    let mut grid = Vec::with_capacity(clients);
    for (c, labels_by_task) in cell_labels.iter().enumerate() {
        let mut row = Vec::with_capacity(tasks);
        for (t, subset) in labels_by_task.iter().enumerate() {
            let mut pool: Vec<Example> = Vec::new();
            for &label in subset {
                for &i in &shares[&(c, t, label)] {
                    pool.push(to_example(&corpus.train[i], subset));
                }
            }
            pool.shuffle(&mut rng_from(seed, &[0x76616c64, c as u64, t as u64]));
            let n_valid = pool.len() / 10;
            let valid = pool.split_off(pool.len() - n_valid);
            let test: Vec<Example> = corpus
                .test
                .iter()
                .filter(|d| subset.binary_search(&d.label).is_ok())
                .map(|d| to_example(d, subset))
                .collect();
            row.push(TaskDataset {
                client_id: c,
                task_id: t,
                label_subset: subset.clone(),
                data: TaskData {
                    train: pool,
                    valid,
                    test,
                    n_labels: labels_per_task,
                },
            });
        }
        grid.push(row);
    }
    Ok(grid)
}

/// Human-auditable description of a grid: each cell's labels and sizes.
pub fn grid_manifest(corpus: &Corpus, grid: &[Vec<TaskDataset>]) -> String {
    let mut out = String::from("client\ttask\tlabels\ttrain\tvalid\ttest\n");
    for row in grid {
        for cell in row {
            let names: Vec<&str> = cell
                .label_subset
                .iter()
                .map(|&l| corpus.labels[l].as_str())
                .collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                cell.client_id,
                cell.task_id,
                names.join(","),
                cell.data.train.len(),
                cell.data.valid.len(),
                cell.data.test.len()
            );
        }
    }
    out
}
