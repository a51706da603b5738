//! Per-client continual training.
//!
//! A client minimizes, for its current task, the sum of three terms: batch
//! cross-entropy, an L1 sparsity penalty on the effective mask and all
//! task-adaptive banks so far, and a drift penalty tying the movement of
//! the shared base to compensating movement in past adaptive banks. Past
//! tasks' masks, heads and projections are frozen at task boundaries; past
//! adaptive banks keep training through the sparsity and drift terms only.


use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::graph::{Graph, NodeId};
use crate::model::{
    build_logits, embed_document, stage_params, DropoutState, FilterBanks, ForeignAdapter, Mode,
    ModelConfig, TaskParams,
};
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// Threshold below which a parameter entry counts as zero, both for the
/// global-parameter overwrite and for sparse coding of uploads.
pub const TAU_NZ: f64 = 1e-6;

/// Optimization hyperparameters of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Sparsity weight on the effective mask and adaptive banks.
    pub lambda1: f64,
    /// Drift (forgetting) weight.
    pub lambda2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_per_round: usize,
    pub early_stop_patience: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1e-3,
            lambda2: 1.0,
            learning_rate: 1e-4,
            batch_size: 64,
            epochs_per_round: 50,
            early_stop_patience: 3,
            dropout: 0.3,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.batch_size == 0 || self.epochs_per_round == 0 {
            return Err(CoreError::Invalid(
                "batch size and epochs per round must be at least 1".into(),
            ));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.learning_rate < 0.0 {
            return Err(CoreError::Invalid(
                "train config weights must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Invalid("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One tokenized, label-indexed document. Labels are local to the task
/// head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// Documents of one (client, task) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    pub n_labels: usize,
}

/// One task's parameters plus everything needed to evaluate it later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub params: TaskParams,
    /// The exact foreign adapters this task trained with.
    pub foreign: Vec<ForeignAdapter>,
    pub mode: Mode,
    /// Base banks at this task's end; drift for this task is measured
    /// against it.
    pub base_end: Option<FilterBanks>,
    /// Adaptive banks at this task's end.
    pub adaptive_end: Option<FilterBanks>,
}

/// Telemetry of one training round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub epochs_run: usize,
    pub train_losses: Vec<f64>,
    pub valid_losses: Vec<f64>,
    pub early_stopped: bool,
}

/// Gradients of the objective, mirroring the trainable-parameter layout:
/// one entry per filter bank for the tensor-valued fields, one scalar per
/// foreign adapter for the attentions.
#[derive(Debug, Clone)]
pub struct ObjectiveGrads {
    pub base: Vec<Tensor>,
    pub adaptive: Vec<Tensor>,
    pub mask_logits: Vec<Tensor>,
    pub alphas: Vec<f64>,
    pub w_f: Option<Tensor>,
    pub w_c: Option<Tensor>,
    pub head: Tensor,
    pub past_adaptive: Vec<Vec<Tensor>>,
}

/// All state owned by one simulated client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub client_id: usize,
    pub base: FilterBanks,
    pub tasks: Vec<TaskRecord>,
}

impl ClientState {
    pub fn new(client_id: usize, cfg: &ModelConfig, master_seed: u64) -> Self {
        let mut rng = rng_from(master_seed, &[0x62617365, client_id as u64]);
        Self {
            client_id,
            base: FilterBanks::random(cfg, &mut rng),
            tasks: Vec::new(),
        }
    }

    pub fn current_task(&self) -> usize {
        self.tasks.len().saturating_sub(1)
    }

    /// Opens a new task with fresh adaptive/mask/head/projection
    /// parameters sized to the received adapters.
    pub fn start_task(
        &mut self,
        cfg: &ModelConfig,
        mode: Mode,
        n_labels: usize,
        foreign: Vec<ForeignAdapter>,
        master_seed: u64,
    ) {
        let task = self.tasks.len();
        let mut rng = rng_from(
            master_seed,
            &[0x696e6974, self.client_id as u64, task as u64],
        );
        let params = TaskParams::init(cfg, mode, n_labels, foreign.len(), &mut rng);
        self.tasks.push(TaskRecord {
            params,
            foreign,
            mode,
            base_end: None,
            adaptive_end: None,
        });
    }

    /// Overwrites base entries wherever the global parameter is non-zero
    /// (absolute value above [`TAU_NZ`]); other entries are untouched.
    pub fn init_base_from_global(&mut self, global: &FilterBanks) -> Result<(), CoreError> {
        if !self.base.same_shapes(global) {
            return Err(CoreError::ShapeMismatch {
                context: "init_base_from_global",
                expected: self.base.0.iter().map(Tensor::len).collect(),
                actual: global.0.iter().map(Tensor::len).collect(),
            });
        }
        for (bank, g) in self.base.0.iter_mut().zip(&global.0) {
            for (b, &v) in bank.data_mut().iter_mut().zip(g.data()) {
                if libm::fabs(v) > TAU_NZ {
                    *b = v;
                }
            }
        }
        Ok(())
    }

    /// `B (*) sigma(m_hat)` with sub-threshold entries clamped to exact
    /// zero, ready for sparse coding on the wire.
    pub fn export_sparsified_base(&self) -> FilterBanks {
        let record = self.tasks.last().expect("no active task");
        let masks = record.params.effective_mask();
        let banks = self
            .base
            .0
            .iter()
            .zip(&masks)
            .map(|(b, m)| {
                let nf = *b.shape().last().unwrap();
                let data = b
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let s = v * m.data()[i % nf];
                        if libm::fabs(s) <= TAU_NZ {
                            0.0
                        } else {
                            s
                        }
                    })
                    .collect();
                Tensor::new(b.shape().to_vec(), data).unwrap()
            })
            .collect();
        FilterBanks(banks)
    }

    /// Records end-of-task snapshots of the base and the current adaptive
    /// banks; past-task drift is measured against these.
    pub fn snapshot_boundaries(&mut self) {
        let base = self.base.clone();
        if let Some(record) = self.tasks.last_mut() {
            record.base_end = Some(base);
            record.adaptive_end = Some(record.params.adaptive.clone());
        }
    }

    /// Current value of the drift penalty (unweighted by lambda2).
    pub fn drift_penalty(&self) -> f64 {
        let t = self.tasks.len().saturating_sub(1);
        let mut total = 0.0;
        for record in &self.tasks[..t] {
            let (Some(base_end), Some(adaptive_end)) = (&record.base_end, &record.adaptive_end)
            else {
                continue;
            };
            let masks = record.params.effective_mask();
            for (((b, b0), m), (a, a0)) in self
                .base
                .0
                .iter()
                .zip(&base_end.0)
                .zip(&masks)
                .zip(record.params.adaptive.0.iter().zip(&adaptive_end.0))
            {
                let nf = *b.shape().last().unwrap();
                for i in 0..b.len() {
                    let db = (b.data()[i] - b0.data()[i]) * m.data()[i % nf];
                    let da = a.data()[i] - a0.data()[i];
                    let diff = db - da;
                    total += diff * diff;
                }
            }
        }
        total
    }

    /// Runs up to `cfg.epochs_per_round` epochs of mini-batch gradient
    /// descent on the three-term objective, early-stopping on validation
    /// loss.
    pub fn train_round(
        &mut self,
        data: &TaskData,
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        round: usize,
        embeddings: &Tensor,
    ) -> Result<RoundReport, CoreError> {
        cfg.validate()?;
        if data.train.is_empty() {
            return Err(CoreError::EmptyInput {
                context: "train_round",
            });
        }
        if self.tasks.is_empty() {
            return Err(CoreError::Invalid("train_round before start_task".into()));
        }

        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut train_losses = Vec::new();
        let mut valid_losses = Vec::new();
        let mut best_valid = f64::INFINITY;
        let mut stale = 0usize;
        let mut early_stopped = false;
        let mut epochs_run = 0usize;

        for epoch in 0..cfg.epochs_per_round {
            let tags = [
                0x73687566,
                self.client_id as u64,
                self.current_task() as u64,
                round as u64,
                epoch as u64,
            ];
            let mut shuffle_rng = rng_from(cfg.seed, &tags);
            order.shuffle(&mut shuffle_rng);
            let mut dropout_rng = rng_from(cfg.seed, &[0x64726f70, tags[1], tags[2], tags[3], tags[4]]);

            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
                let loss = self.sgd_step(&batch, model_cfg, cfg, embeddings, &mut dropout_rng)?;
                if !loss.is_finite() {
                    return Err(CoreError::NonFinite {
                        context: "train_round loss",
                    });
                }
                epoch_loss += loss;
                batches += 1;
            }
            train_losses.push(epoch_loss / batches as f64);
            epochs_run = epoch + 1;

            let valid_set = if data.valid.is_empty() {
                &data.train
            } else {
                &data.valid
            };
            let vloss = self.mean_cross_entropy(valid_set, model_cfg, embeddings)?;
            valid_losses.push(vloss);
            if vloss < best_valid {
                best_valid = vloss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.early_stop_patience {
                    early_stopped = true;
                    break;
                }
            }
        }

        Ok(RoundReport {
            round,
            epochs_run,
            train_losses,
            valid_losses,
            early_stopped,
        })
    }

    /// Mean cross-entropy over a document set with the current parameters,
    /// dropout disabled.
    pub fn mean_cross_entropy(
        &self,
        docs: &[Example],
        model_cfg: &ModelConfig,
        embeddings: &Tensor,
    ) -> Result<f64, CoreError> {
        if docs.is_empty() {
            return Err(CoreError::EmptyInput {
                context: "mean_cross_entropy",
            });
        }
        let record = self.tasks.last().unwrap();
        let mut total = 0.0;
        for doc in docs {
            let mut g = Graph::new();
            let nodes = stage_params(&mut g, &self.base, &record.params, &record.foreign, false);
            let x = embed_document(&doc.tokens, embeddings, model_cfg.max_filter_size());
            let logits = build_logits(&mut g, model_cfg, record.mode, &nodes, &x, None)?;
            let loss = g.softmax_cross_entropy(logits, doc.label)?;
            total += g.value(loss).item();
        }
        Ok(total / docs.len() as f64)
    }

    /// Stages every trainable leaf and builds the three-term objective on
    /// one batch. Returns the current-task nodes, the past adaptive-bank
    /// nodes, and the loss root.
    fn build_objective(
        &self,
        g: &mut Graph,
        batch: &[&Example],
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        embeddings: &Tensor,
        mut dropout_rng: Option<&mut rand_chacha::ChaCha12Rng>,
    ) -> Result<(crate::model::TaskNodes, Vec<Vec<NodeId>>, NodeId), CoreError> {
        let t = self.tasks.len() - 1;

        let record = &self.tasks[t];
        let nodes = stage_params(g, &self.base, &record.params, &record.foreign, true);
        // past adaptive banks stay trainable; their masks and end-of-task
        // snapshots enter as constants
        let past_adaptive: Vec<Vec<NodeId>> = self.tasks[..t]
            .iter()
            .map(|r| r.params.adaptive.0.iter().map(|b| g.param(b.clone())).collect())
            .collect();

        // cross-entropy, averaged over the batch
        let mut ce_terms = Vec::with_capacity(batch.len());
        for doc in batch {
            let x = embed_document(&doc.tokens, embeddings, model_cfg.max_filter_size());
            let dropout = match dropout_rng.as_deref_mut() {
                Some(rng) if cfg.dropout > 0.0 => Some(DropoutState {
                    rng,
                    rate: cfg.dropout,
                }),
                _ => None,
            };
            let logits = build_logits(g, model_cfg, record.mode, &nodes, &x, dropout)?;
            ce_terms.push(g.softmax_cross_entropy(logits, doc.label)?);
        }
        let mut ce = ce_terms[0];
        for &term in &ce_terms[1..] {
            ce = g.add(ce, term)?;
        }
        let mut loss = g.scale_const(ce, 1.0 / batch.len() as f64);

        // sparsity: effective current mask plus every adaptive bank so far
        if cfg.lambda1 > 0.0 {
            let mut sparsity: Option<NodeId> = None;
            let add_term = |g: &mut Graph, term: NodeId, acc: &mut Option<NodeId>| {
                *acc = Some(match *acc {
                    Some(a) => g.add(a, term).unwrap(),
                    None => term,
                });
            };
            for &m in &nodes.mask_logits {
                let eff = g.sigmoid(m);
                let term = g.l1(eff);
                add_term(g, term, &mut sparsity);
            }
            for &a in &nodes.adaptive {
                let term = g.l1(a);
                add_term(g, term, &mut sparsity);
            }
            for past in &past_adaptive {
                for &a in past {
                    let term = g.l1(a);
                    add_term(g, term, &mut sparsity);
                }
            }
            let scaled = g.scale_const(sparsity.unwrap(), cfg.lambda1);
            loss = g.add(loss, scaled)?;
        }

        // drift: || (B - B_end(i)) (*) sigma(m_i) - (A_i - A_end(i)) ||^2
        if cfg.lambda2 > 0.0 && t > 0 {
            let mut drift: Option<NodeId> = None;
            for (i, r) in self.tasks[..t].iter().enumerate() {
                let (Some(base_end), Some(adaptive_end)) = (&r.base_end, &r.adaptive_end) else {
                    continue;
                };
                let masks = r.params.effective_mask();
                for bank in 0..self.base.0.len() {
                    let b0 = g.constant(base_end.0[bank].clone());
                    let db = g.sub(nodes.base[bank], b0)?;
                    let m = g.constant(masks[bank].clone());
                    let gated = g.broadcast_mul_last(db, m)?;
                    let a0 = g.constant(adaptive_end.0[bank].clone());
                    let da = g.sub(past_adaptive[i][bank], a0)?;
                    let diff = g.sub(gated, da)?;
                    let term = g.sum_squares(diff);
                    drift = Some(match drift {
                        Some(d) => g.add(d, term)?,
                        None => term,
                    });
                }
            }
            if let Some(d) = drift {
                let scaled = g.scale_const(d, cfg.lambda2);
                loss = g.add(loss, scaled)?;
            }
        }

        Ok((nodes, past_adaptive, loss))
    }

    /// Full training objective on a document set with the current
    /// parameters, dropout disabled. Useful for loss inspection; training
    /// uses the batched stochastic path.
    pub fn objective(
        &self,
        docs: &[Example],
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        embeddings: &Tensor,
    ) -> Result<f64, CoreError> {
        if docs.is_empty() {
            return Err(CoreError::EmptyInput {
                context: "objective",
            });
        }
        let batch: Vec<&Example> = docs.iter().collect();
        let mut g = Graph::new();
        let (_, _, loss) = self.build_objective(&mut g, &batch, model_cfg, cfg, embeddings, None)?;
        Ok(g.value(loss).item())
    }

    /// Analytic gradients of the full objective, laid out like the
    /// trainable parameters. Dropout is disabled so the result is a
    /// deterministic function of the current state.
    pub fn objective_gradients(
        &self,
        docs: &[Example],
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        embeddings: &Tensor,
    ) -> Result<ObjectiveGrads, CoreError> {
        if docs.is_empty() {
            return Err(CoreError::EmptyInput {
                context: "objective_gradients",
            });
        }
        let batch: Vec<&Example> = docs.iter().collect();
        let mut g = Graph::new();
        let (nodes, past_adaptive, loss) =
            self.build_objective(&mut g, &batch, model_cfg, cfg, embeddings, None)?;
        let grads = g.backward(loss)?;
        let dense = |id: NodeId| grads.get_or_zero(&g, id);
        Ok(ObjectiveGrads {
            base: nodes.base.iter().map(|&id| dense(id)).collect(),
            adaptive: nodes.adaptive.iter().map(|&id| dense(id)).collect(),
            mask_logits: nodes.mask_logits.iter().map(|&id| dense(id)).collect(),
            alphas: nodes.alphas.iter().map(|&id| dense(id).item()).collect(),
            w_f: nodes.w_f.map(dense),
            w_c: nodes.w_c.map(dense),
            head: dense(nodes.head),
            past_adaptive: past_adaptive
                .iter()
                .map(|ids| ids.iter().map(|&id| dense(id)).collect())
                .collect(),
        })
    }

    /// One SGD step on a batch; returns the pre-step objective value.
    fn sgd_step(
        &mut self,
        batch: &[&Example],
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        embeddings: &Tensor,
        dropout_rng: &mut rand_chacha::ChaCha12Rng,
    ) -> Result<f64, CoreError> {
        let t = self.tasks.len() - 1;
        let mut g = Graph::new();
        let (nodes, past_adaptive, loss) =
            self.build_objective(&mut g, batch, model_cfg, cfg, embeddings, Some(dropout_rng))?;
        let loss_value = g.value(loss).item();
        let grads = g.backward(loss)?;
        let lr = cfg.learning_rate;

        let step = |t: &mut Tensor, id: NodeId| {
            if let Some(grad) = grads.get(id) {
                for (v, d) in t.data_mut().iter_mut().zip(grad.data()) {
                    *v -= lr * d;
                }
            }
        };

        for (bank, &id) in self.base.0.iter_mut().zip(&nodes.base) {
            step(bank, id);
        }
        let record = &mut self.tasks[t];
        for (bank, &id) in record.params.adaptive.0.iter_mut().zip(&nodes.adaptive) {
            step(bank, id);
        }
        for (m, &id) in record.params.mask_logits.iter_mut().zip(&nodes.mask_logits) {
            step(m, id);
        }
        for (a, &id) in record.params.alphas.iter_mut().zip(&nodes.alphas) {
            if let Some(grad) = grads.get(id) {
                *a -= lr * grad.item();
            }
        }
        if let (Some(w), Some(id)) = (record.params.w_f.as_mut(), nodes.w_f) {
            step(w, id);
        }
        if let (Some(w), Some(id)) = (record.params.w_c.as_mut(), nodes.w_c) {
            step(w, id);
        }
        step(&mut record.params.head, nodes.head);
        for (i, ids) in past_adaptive.iter().enumerate() {
            for (bank, &id) in self.tasks[i].params.adaptive.0.iter_mut().zip(ids) {
                step(bank, id);
            }
        }

        Ok(loss_value)
    }
}
