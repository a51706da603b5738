//! Round orchestration: the task loop, the synchronous round loop, and
//! every parameter transmission between the server and the simulated
//! clients, recorded as a replayable message transcript.

use anyhow::{ensure, Context, Result};
use fedseit_core::eval::evaluate_task;
use fedseit_core::model::{FilterBanks, ForeignAdapter, Mode};
use fedseit_core::rng::{derive_seed, rng_from};
use fedseit_core::server::{aggregate, mean_matrices, AdapterRegistry};
use fedseit_core::summary::summarize_task;
use fedseit_core::{ClientState, TaskSummary, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{EmbeddingTable, TaskDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    GlobalDown,
    BaseUp,
    AdapterUp,
    SummaryUp,
    AdaptersDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sender {
    Server,
    Client(usize),
}

/// One transmission. Exactly the payload fields implied by `kind` are
/// set; in dense-layer-sharing mode the projection matrices ride along
/// with the filter banks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: Sender,
    pub task: usize,
    pub round: usize,
    pub banks: Option<FilterBanks>,
    pub w_c: Option<Tensor>,
    pub w_f: Option<Tensor>,
    pub summary: Option<TaskSummary>,
    pub adapters: Option<Vec<ForeignAdapter>>,
}

impl Message {
    fn new(kind: MessageKind, sender: Sender, task: usize, round: usize) -> Self {
        Self {
            kind,
            sender,
            task,
            round,
            banks: None,
            w_c: None,
            w_f: None,
            summary: None,
            adapters: None,
        }
    }
}

/// One per-round test-accuracy sample on a client's current task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub client: usize,
    pub task: usize,
    pub round: usize,
    pub accuracy: f64,
}

/// Everything a finished run leaves behind.
pub struct RunOutput {
    pub clients: Vec<ClientState>,
    pub registry: AdapterRegistry,
    pub transcript: Vec<Message>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub theta_g: FilterBanks,
}

/// Runs the full experiment for one seed: for every task, `R` rounds of
/// global download, local training, sparsified upload and aggregation,
/// with adapters exchanged at task boundaries (selectively when
/// configured).
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mode: Mode,
    seed: u64,
    grid: &[Vec<TaskDataset>],
    table: &EmbeddingTable,
) -> Result<RunOutput> {
    let (c_n, t_n, r_n) = (
        cfg.federation.clients,
        cfg.federation.tasks,
        cfg.federation.rounds,
    );
    ensure!(r_n >= 1, "at least one round is required");
    ensure!(
        grid.len() == c_n && grid.iter().all(|row| row.len() == t_n),
        "task grid is {}x{}, config expects {c_n}x{t_n}",
        grid.len(),
        grid.first().map_or(0, Vec::len)
    );
    let model_cfg = cfg.model_config();
    ensure!(
        table.dim() == model_cfg.embed_dim,
        "embedding dimension {} does not match the model's {}",
        table.dim(),
        model_cfg.embed_dim
    );
    let sit = cfg.sit_config();
    let train_cfg = cfg.train_config(seed);

    let mut clients: Vec<ClientState> = (0..c_n)
        .map(|c| ClientState::new(c, &model_cfg, seed))
        .collect();
    let mut theta_g = FilterBanks::random(&model_cfg, &mut rng_from(seed, &[0x676c6f62]));
    let mut registry = AdapterRegistry::new();
    let mut transcript: Vec<Message> = Vec::new();
    let mut trajectory: Vec<TrajectoryPoint> = Vec::new();
    // last aggregated projections, redistributed at the next task start
    // in dense-layer-sharing mode
    let mut shared_wc: Option<Tensor> = None;
    let mut shared_wf: Option<Tensor> = None;

    for t in 0..t_n {
        // task summaries, used both as selection queries and as the
        // registry entry uploaded at the final round
        let summaries: Vec<Option<TaskSummary>> = if sit.enabled && mode.federates() {
            (0..c_n)
                .map(|c| {
                    let docs: Vec<Vec<usize>> = grid[c][t]
                        .data
                        .train
                        .iter()
                        .chain(&grid[c][t].data.valid)
                        .map(|e| e.tokens.clone())
                        .collect();
                    summarize_task(
                        &docs,
                        &table.matrix,
                        table.oov_row(),
                        sit.q,
                        derive_seed(seed, &[0x6b6d656e, c as u64, t as u64]),
                    )
                    .map(Some)
                    .map_err(anyhow::Error::new)
                })
                .collect::<Result<_>>()?
        } else {
            vec![None; c_n]
        };

        // adapter transfer at the task boundary
        for c in 0..c_n {
            let foreign: Vec<ForeignAdapter> = if !mode.federates() || t == 0 {
                Vec::new()
            } else if sit.enabled {
                let query = summaries[c].as_ref().unwrap();
                let mut up = Message::new(MessageKind::SummaryUp, Sender::Client(c), t, 0);
                up.summary = Some(query.clone());
                transcript.push(up);
                registry
                    .select_top_k(c, query, sit.k)
                    .map_err(anyhow::Error::new)?
            } else {
                registry
                    .latest_adapters(c_n, t)
                    .map_err(anyhow::Error::new)?
            };
            if mode.federates() && t > 0 {
                let mut down = Message::new(MessageKind::AdaptersDown, Sender::Server, t, 0);
                down.adapters = Some(foreign.clone());
                transcript.push(down);
            }
            clients[c].start_task(&model_cfg, mode, grid[c][t].data.n_labels, foreign, seed);
            if mode.shares_dense() {
                let record = clients[c].tasks.last_mut().unwrap();
                if let (Some(shared), Some(own)) = (&shared_wc, record.params.w_c.as_mut()) {
                    if shared.shape() == own.shape() {
                        *own = shared.clone();
                    }
                }
                if let (Some(shared), Some(own)) = (&shared_wf, record.params.w_f.as_mut()) {
                    if shared.shape() == own.shape() {
                        *own = shared.clone();
                    }
                }
            }
        }

        for r in 0..r_n {
            if mode.federates() {
                let mut down = Message::new(MessageKind::GlobalDown, Sender::Server, t, r);
                down.banks = Some(theta_g.clone());
                if mode.shares_dense() {
                    down.w_c = shared_wc.clone();
                    down.w_f = shared_wf.clone();
                }
                transcript.push(down);
                for client in clients.iter_mut() {
                    client
                        .init_base_from_global(&theta_g)
                        .map_err(anyhow::Error::new)?;
                }
            }

            // clients train concurrently; results are joined in client
            // order so the transcript stays deterministic
            let global_round = t * r_n + r;
            let results: Vec<Result<(FilterBanks, Option<f64>)>> = std::thread::scope(|scope| {
                let handles: Vec<_> = clients
                    .iter_mut()
                    .enumerate()
                    .map(|(c, client)| {
                        let cell = &grid[c][t];
                        let model_cfg = &model_cfg;
                        let train_cfg = &train_cfg;
                        let table = &table;
                        scope.spawn(move || -> Result<(FilterBanks, Option<f64>)> {
                            client
                                .train_round(
                                    &cell.data,
                                    model_cfg,
                                    train_cfg,
                                    global_round,
                                    &table.matrix,
                                )
                                .map_err(anyhow::Error::new)
                                .with_context(|| format!("client {c}, task {t}, round {r}"))?;
                            let accuracy = if cell.data.test.is_empty() {
                                None
                            } else {
                                Some(
                                    evaluate_task(
                                        &client.base,
                                        client.tasks.last().unwrap(),
                                        model_cfg,
                                        &table.matrix,
                                        &cell.data.test,
                                    )
                                    .map_err(anyhow::Error::new)?,
                                )
                            };
                            Ok((client.export_sparsified_base(), accuracy))
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("client worker panicked"))
                    .collect()
            });

            let mut uploads = Vec::with_capacity(c_n);
            for (c, res) in results.into_iter().enumerate() {
                let (sparsified, accuracy) = res?;
                if let Some(accuracy) = accuracy {
                    trajectory.push(TrajectoryPoint {
                        client: c,
                        task: t,
                        round: r,
                        accuracy,
                    });
                }
                if mode.federates() {
                    let mut up = Message::new(MessageKind::BaseUp, Sender::Client(c), t, r);
                    up.banks = Some(sparsified.clone());
                    if mode.shares_dense() {
                        up.w_c = clients[c].tasks.last().unwrap().params.w_c.clone();
                        up.w_f = clients[c].tasks.last().unwrap().params.w_f.clone();
                    }
                    transcript.push(up);
                }
                uploads.push(sparsified);
            }

            if mode.federates() {
                theta_g = aggregate(&uploads).map_err(anyhow::Error::new)?;
                if mode.shares_dense() {
                    shared_wc = mean_dense(&clients, |p| p.w_c.as_ref())?;
                    shared_wf = mean_dense(&clients, |p| p.w_f.as_ref())?;
                }
            }

            if mode.federates() && r == r_n - 1 {
                for (c, client) in clients.iter().enumerate() {
                    let record = client.tasks.last().unwrap();
                    let mut up = Message::new(MessageKind::AdapterUp, Sender::Client(c), t, r);
                    up.banks = Some(record.params.adaptive.clone());
                    transcript.push(up);
                    if let Some(summary) = &summaries[c] {
                        let mut s = Message::new(MessageKind::SummaryUp, Sender::Client(c), t, r);
                        s.summary = Some(summary.clone());
                        transcript.push(s);
                    }
                    registry
                        .store(c, t, record.params.adaptive.clone(), summaries[c].clone())
                        .map_err(anyhow::Error::new)?;
                }
            }
        }

        for client in clients.iter_mut() {
            client.snapshot_boundaries();
        }
    }

    Ok(RunOutput {
        clients,
        registry,
        transcript,
        trajectory,
        theta_g,
    })
}

/// Elementwise mean of one projection matrix across clients; `None` when
/// any client lacks it or shapes disagree.
fn mean_dense(
    clients: &[ClientState],
    pick: impl Fn(&fedseit_core::model::TaskParams) -> Option<&Tensor>,
) -> Result<Option<Tensor>> {
    let mats: Vec<Tensor> = clients
        .iter()
        .filter_map(|c| pick(&c.tasks.last().unwrap().params).cloned())
        .collect();
    if mats.len() != clients.len() {
        return Ok(None);
    }
    if mats.iter().any(|m| m.shape() != mats[0].shape()) {
        return Ok(None);
    }
    Ok(Some(mean_matrices(&mats).map_err(anyhow::Error::new)?))
}

/// Re-derives the global-parameter trajectory from a transcript and
/// verifies each downloaded value equals the previous round's aggregate.
pub fn verify_transcript(transcript: &[Message]) -> Result<()> {
    let mut last_aggregate: Option<FilterBanks> = None;
    let mut pending: Vec<FilterBanks> = Vec::new();
    for msg in transcript {
        match msg.kind {
            MessageKind::GlobalDown => {
                let sent = msg.banks.as_ref().context("GlobalDown without banks")?;
                if let Some(expect) = &last_aggregate {
                    ensure!(
                        sent == expect,
                        "task {} round {}: downloaded global parameter does not equal the previous aggregate",
                        msg.task,
                        msg.round
                    );
                }
                pending.clear();
            }
            MessageKind::BaseUp => {
                pending.push(msg.banks.clone().context("BaseUp without banks")?);
                last_aggregate = Some(aggregate(&pending).map_err(anyhow::Error::new)?);
            }
            _ => {}
        }
    }
    Ok(())
}

/// Serializes a transcript as one JSON message per line.
pub fn transcript_to_jsonl(transcript: &[Message]) -> Result<String> {
    let mut out = String::new();
    for msg in transcript {
        out.push_str(&serde_json::to_string(msg)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn transcript_from_jsonl(text: &str) -> Result<Vec<Message>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(anyhow::Error::from))
        .collect()
}
