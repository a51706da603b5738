//! Command-line entry point: `run` a federated experiment from a config
//! file, `eval` saved checkpoints, or `split` a corpus into a task grid.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedseit::checkpoint::{self, TaskBundle};
use fedseit::config::{mode_name, parse_mode, parse_sit_override, ExperimentConfig};
use fedseit::data::{
    grid_manifest, load_embeddings, non_iid_split, synth_embeddings, synthetic_corpus, Corpus,
    EmbeddingTable,
};
use fedseit::federation::run_experiment;
use fedseit::report::{self, tta_of, ExperimentResult, SeedOutcome};
use fedseit_core::eval::evaluate_task;
use fedseit_core::ModelConfig;

/// Seed for synthetic corpora and embedding tables; fixed so that the
/// data stays identical across experiment seeds, which only vary the
/// splits, task orderings and parameter initializations.
const DATA_SEED: u64 = 7;

#[derive(Parser)]
#[command(name = "fedseit", about = "Federated continual learning for text classifiers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train under a config file and write checkpoints, CSVs and logs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override: fedseit, fedseit-dls, fedweit or isolated.
        #[arg(long)]
        mode: Option<String>,
        /// Override: 'off' or the number of adapters to select (K).
        #[arg(long)]
        sit: Option<String>,
        /// Override the drift-penalty weight.
        #[arg(long)]
        lambda2: Option<f64>,
        /// Override the seed list, comma separated.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute accuracies from saved checkpoints.
    Eval {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and write a non-iid task grid from a TSV corpus.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        clients: usize,
        #[arg(long)]
        tasks: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        labels_per_task: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run {
            config,
            mode,
            sit,
            lambda2,
            seeds,
            out,
        } => cmd_run(&config, mode, sit, lambda2, seeds, &out),
        Cmd::Eval { checkpoints, out } => cmd_eval(&checkpoints, &out),
        Cmd::Split {
            corpus,
            clients,
            tasks,
            seed,
            labels_per_task,
            out,
        } => cmd_split(&corpus, clients, tasks, seed, labels_per_task, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_world(cfg: &ExperimentConfig) -> Result<(Corpus, EmbeddingTable)> {
    let corpus = match &cfg.data.corpus {
        Some(path) => Corpus::load(Path::new(path))?,
        None => synthetic_corpus(
            "",
            cfg.data.synth_labels,
            cfg.data.synth_docs_per_label,
            DATA_SEED,
        )?,
    };
    if corpus.dropped_empty > 0 {
        eprintln!(
            "warning: dropped {} empty documents after tokenization",
            corpus.dropped_empty
        );
    }
    let table = match &cfg.data.embeddings {
        Some(path) => load_embeddings(Path::new(path), cfg.model.embed_dim)?,
        None => synth_embeddings(&corpus.vocabulary(), cfg.model.embed_dim, DATA_SEED)?,
    };
    Ok((corpus, table))
}

fn cmd_run(
    config: &Path,
    mode_override: Option<String>,
    sit_override: Option<String>,
    lambda2_override: Option<f64>,
    seeds_override: Option<Vec<u64>>,
    out: &Path,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(m) = mode_override {
        parse_mode(&m)?;
        cfg.federation.mode = m;
    }
    if let Some(s) = sit_override {
        let (enabled, k) = parse_sit_override(&s)?;
        cfg.sit.enabled = enabled;
        if enabled {
            cfg.sit.k = k;
        }
    }
    if let Some(l2) = lambda2_override {
        cfg.training.lambda2 = l2;
    }
    if let Some(seeds) = seeds_override {
        cfg.seeds = seeds;
    }
    cfg.validate()?;
    let mode = cfg.mode()?;

    let (corpus, table) = load_world(&cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;

    let model_cfg = cfg.model_config();
    let mut result = ExperimentResult::default();
    for &seed in &cfg.seeds {
        let grid = non_iid_split(
            &corpus,
            cfg.federation.clients,
            cfg.federation.tasks,
            cfg.data.labels_per_task,
            seed,
            &table,
        )?;
        let run = run_experiment(&cfg, mode, seed, &grid, &table)?;

        let test_sets: Vec<Vec<Vec<fedseit_core::Example>>> = grid
            .iter()
            .map(|row| row.iter().map(|cell| cell.data.test.clone()).collect())
            .collect();
        checkpoint::save_run(out, seed, &run, &test_sets, &table)?;
        std::fs::write(
            checkpoint::seed_dir(out, seed).join("manifest.tsv"),
            grid_manifest(&corpus, &grid),
        )?;

        let maa = report::evaluate_clients(&run.clients, &grid, &model_cfg, &table.matrix)?;
        result.outcomes.push(SeedOutcome {
            seed,
            tta: tta_of(&maa),
            maa,
            trajectory: run.trajectory,
        });
    }

    let echo = toml::to_string_pretty(&cfg)?;
    report::emit(&result, out, &echo)?;
    println!(
        "mode={} seeds={} tta={} std={}",
        mode_name(mode),
        result.outcomes.len(),
        result.mean_tta(),
        result.std_tta()
    );
    Ok(())
}

/// The architecture of a saved bundle is recoverable from its tensors,
/// so evaluation needs no config file.
fn model_config_of(bundle: &TaskBundle, embed_dim: usize) -> ModelConfig {
    let banks = &bundle.record.params.adaptive.0;
    ModelConfig {
        embed_dim,
        filter_sizes: banks.iter().map(|b| b.shape()[0]).collect(),
        filters_per_size: banks.first().map_or(0, |b| *b.shape().last().unwrap()),
        dropout: 0.0,
    }
}

fn cmd_eval(checkpoints: &Path, out: &Path) -> Result<()> {
    let saved = checkpoint::load_all_seeds(checkpoints)?;
    let mut result = ExperimentResult::default();
    for seed in &saved {
        let mut maa: Vec<Vec<f64>> = Vec::new();
        for bundle in &seed.bundles {
            let cfg = model_config_of(bundle, seed.table.dim());
            let acc = evaluate_task(
                &bundle.base,
                &bundle.record,
                &cfg,
                &seed.table.matrix,
                &bundle.test,
            )
            .map_err(anyhow::Error::new)
            .with_context(|| {
                format!(
                    "evaluating client {} task {}",
                    bundle.client_id, bundle.task_id
                )
            })?;
            if maa.len() <= bundle.client_id {
                maa.resize(bundle.client_id + 1, Vec::new());
            }
            maa[bundle.client_id].push(acc);
        }
        result.outcomes.push(SeedOutcome {
            seed: seed.seed,
            tta: tta_of(&maa),
            maa,
            trajectory: Vec::new(),
        });
    }
    let echo = format!("recomputed from checkpoints at {}\n", checkpoints.display());
    report::emit(&result, out, &echo)?;
    println!(
        "seeds={} tta={} std={}",
        result.outcomes.len(),
        result.mean_tta(),
        result.std_tta()
    );
    Ok(())
}

fn cmd_split(
    corpus_path: &Path,
    clients: usize,
    tasks: usize,
    seed: u64,
    labels_per_task: usize,
    out: &Path,
) -> Result<()> {
    let corpus = Corpus::load(corpus_path)?;
    // token indexing only needs the vocabulary; the embedding width is
    // irrelevant to the grid
    let table = synth_embeddings(&corpus.vocabulary(), 8, DATA_SEED)?;
    let grid = non_iid_split(&corpus, clients, tasks, labels_per_task, seed, &table)?;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    std::fs::write(out.join("manifest.tsv"), grid_manifest(&corpus, &grid))?;
    std::fs::write(out.join("grid.json"), serde_json::to_string(&grid)?)?;
    println!(
        "split {} labels into {clients}x{tasks} cells under {}",
        corpus.labels.len(),
        out.display()
    );
    Ok(())
}
