//! The decomposed CNN text classifier.
//!
//! A client's filters for task `t` are composed from a dense base bank `B`
//! shared across its task sequence, a per-filter sigmoid mask, and a
//! task-adaptive bank `A`. Foreign clients' adaptive banks are either
//! segregated into their own convolution paths and aligned by projection
//! (selective transfer) or summed directly into the composed filters
//! (weighted-additive baseline).

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::graph::{sigmoid, Graph, NodeId};
use crate::tensor::Tensor;

/// Architecture of the classifier shared by every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Word embedding dimension.
    pub embed_dim: usize,
    /// Convolution kernel sizes, one filter bank per entry.
    pub filter_sizes: Vec<usize>,
    /// Filters per kernel size.
    pub filters_per_size: usize,
    /// Dropout probability applied to pooled vectors during training.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            filter_sizes: vec![3, 4, 5],
            filters_per_size: 128,
            dropout: 0.3,
        }
    }
}

impl ModelConfig {
    /// Length of a pooled feature vector: one slot per filter across all
    /// kernel sizes.
    pub fn z_dim(&self) -> usize {
        self.filter_sizes.len() * self.filters_per_size
    }

    pub fn max_filter_size(&self) -> usize {
        self.filter_sizes.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.embed_dim == 0 || self.filters_per_size == 0 || self.filter_sizes.is_empty() {
            return Err(CoreError::Invalid(
                "model config dimensions must be positive".into(),
            ));
        }
        if self.filter_sizes.iter().any(|&f| f == 0) {
            return Err(CoreError::Invalid("filter sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Invalid("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One convolution filter bank `[F_l, D, N_F]` per kernel size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBanks(pub Vec<Tensor>);

impl FilterBanks {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self(
            cfg.filter_sizes
                .iter()
                .map(|&f| Tensor::zeros(vec![f, cfg.embed_dim, cfg.filters_per_size]))
                .collect(),
        )
    }

    /// Uniform(-0.1, 0.1) initialization.
    pub fn random(cfg: &ModelConfig, rng: &mut ChaCha12Rng) -> Self {
        Self(
            cfg.filter_sizes
                .iter()
                .map(|&f| {
                    let len = f * cfg.embed_dim * cfg.filters_per_size;
                    let data = (0..len).map(|_| rng.gen_range(-0.1..0.1)).collect();
                    Tensor::new(vec![f, cfg.embed_dim, cfg.filters_per_size], data).unwrap()
                })
                .collect(),
        )
    }

    pub fn banks(&self) -> &[Tensor] {
        &self.0
    }

    pub fn same_shapes(&self, other: &FilterBanks) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.same_shape(b))
    }

    pub fn l1(&self) -> f64 {
        self.0.iter().map(Tensor::l1).sum()
    }

    /// Largest absolute entry, used by sparsity accounting in tests.
    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0f64, |m, v| m.max(libm::fabs(*v)))
    }
}

/// A foreign client's task-adaptive filters, received via the server and
/// treated as constants during local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForeignAdapter {
    pub source_client: usize,
    pub source_task: usize,
    pub filters: FilterBanks,
}

/// Training/composition mode of the federation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Segregated foreign paths aligned by projection.
    FedSeit,
    /// FedSeit with server aggregation of the projection matrices.
    FedSeitDls,
    /// Weighted-additive composition of foreign filters (baseline).
    FedWeit,
    /// No federation: clients train alone, nothing is exchanged.
    Isolated,
}

impl Mode {
    /// Whether the forward pass uses the projection head (`W_f`/`W_c`).
    pub fn uses_projection(self) -> bool {
        matches!(self, Mode::FedSeit | Mode::FedSeitDls | Mode::Isolated)
    }

    /// Whether `W_c`/`W_f` travel to the server.
    pub fn shares_dense(self) -> bool {
        matches!(self, Mode::FedSeitDls)
    }

    pub fn federates(self) -> bool {
        !matches!(self, Mode::Isolated)
    }
}

/// Trainable parameters of one task at one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    /// Task-adaptive filter banks `A`.
    pub adaptive: FilterBanks,
    /// Raw mask logits, one `[N_F]` vector per kernel size; the effective
    /// mask is their sigmoid.
    pub mask_logits: Vec<Tensor>,
    /// One attention scalar per received foreign adapter.
    pub alphas: Vec<f64>,
    /// Foreign-alignment projection `[n_foreign * z_dim, z_dim]`; absent
    /// when no adapters were received or the mode has no projection head.
    pub w_f: Option<Tensor>,
    /// Output projection `[(1 + has_foreign) * z_dim, z_dim]`; absent in
    /// weighted-additive mode.
    pub w_c: Option<Tensor>,
    /// Per-task softmax head `[z_dim, n_labels]`.
    pub head: Tensor,
    pub n_labels: usize,
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let bound = libm::sqrt(6.0 / (rows + cols) as f64);
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

impl TaskParams {
    /// Fresh parameters for a new task. `n_foreign` is the number of
    /// adapters this task will train with.
    pub fn init(
        cfg: &ModelConfig,
        mode: Mode,
        n_labels: usize,
        n_foreign: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let z = cfg.z_dim();
        let adaptive = FilterBanks::random(cfg, rng);
        let mask_logits = cfg
            .filter_sizes
            .iter()
            .map(|_| Tensor::zeros(vec![cfg.filters_per_size]))
            .collect();
        let alphas = if n_foreign > 0 {
            vec![1.0 / n_foreign as f64; n_foreign]
        } else {
            Vec::new()
        };
        let (w_f, w_c) = if mode.uses_projection() {
            let w_f = (n_foreign > 0).then(|| xavier(n_foreign * z, z, rng));
            let blocks = if n_foreign > 0 { 2 } else { 1 };
            (w_f, Some(xavier(blocks * z, z, rng)))
        } else {
            (None, None)
        };
        let head = xavier(z, n_labels, rng);
        Self {
            adaptive,
            mask_logits,
            alphas,
            w_f,
            w_c,
            head,
            n_labels,
        }
    }

    /// Effective mask `sigma(m_hat)` per kernel size.
    pub fn effective_mask(&self) -> Vec<Tensor> {
        effective_mask(&self.mask_logits)
    }
}

/// Elementwise logistic sigmoid of the mask logits.
pub fn effective_mask(mask_logits: &[Tensor]) -> Vec<Tensor> {
    mask_logits.iter().map(|m| m.map(sigmoid)).collect()
}

/// Value-level composition `theta = B (*) mask + A` with the mask broadcast
/// along the filter-count axis.
pub fn compose(
    base: &FilterBanks,
    mask: &[Tensor],
    adaptive: &FilterBanks,
) -> Result<FilterBanks, CoreError> {
    if !base.same_shapes(adaptive) || base.0.len() != mask.len() {
        return Err(CoreError::ShapeMismatch {
            context: "compose",
            expected: base.0.iter().map(Tensor::len).collect(),
            actual: adaptive.0.iter().map(Tensor::len).collect(),
        });
    }
    let mut out = Vec::with_capacity(base.0.len());
    for ((b, m), a) in base.0.iter().zip(mask).zip(&adaptive.0) {
        let nf = *b.shape().last().unwrap();
        if m.shape() != [nf] {
            return Err(CoreError::ShapeMismatch {
                context: "compose",
                expected: vec![nf],
                actual: m.shape().to_vec(),
            });
        }
        let data = b
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * m.data()[i % nf] + a.data()[i])
            .collect();
        out.push(Tensor::new(b.shape().to_vec(), data)?);
    }
    Ok(FilterBanks(out))
}

/// Embedding lookup for a tokenized document: row `tokens[i]` of `table`
/// (`[V, D]`), right-padded with zero rows up to `min_len`.
pub fn embed_document(tokens: &[usize], table: &Tensor, min_len: usize) -> Tensor {
    let d = table.shape()[1];
    let rows = tokens.len().max(min_len);
    let mut data = vec![0.0; rows * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let row = &table.data()[tok * d..(tok + 1) * d];
        data[i * d..(i + 1) * d].copy_from_slice(row);
    }
    Tensor::new(vec![rows, d], data).unwrap()
}

/// Graph node ids of one task's parameters, as created by
/// [`stage_params`].
pub struct TaskNodes {
    pub base: Vec<NodeId>,
    pub adaptive: Vec<NodeId>,
    pub mask_logits: Vec<NodeId>,
    pub alphas: Vec<NodeId>,
    /// Foreign adapters as constant nodes, one inner vec per adapter.
    pub foreign: Vec<Vec<NodeId>>,
    pub w_f: Option<NodeId>,
    pub w_c: Option<NodeId>,
    pub head: NodeId,
}

/// Inserts base banks, task parameters and foreign adapters into a graph.
/// `trainable` controls whether leaves are parameters or constants
/// (evaluation uses constants).
pub fn stage_params(
    g: &mut Graph,
    base: &FilterBanks,
    params: &TaskParams,
    foreign: &[ForeignAdapter],
    trainable: bool,
) -> TaskNodes {
    let leaf = |g: &mut Graph, t: Tensor| {
        if trainable {
            g.param(t)
        } else {
            g.constant(t)
        }
    };
    TaskNodes {
        base: base.0.iter().map(|t| leaf(g, t.clone())).collect(),
        adaptive: params.adaptive.0.iter().map(|t| leaf(g, t.clone())).collect(),
        mask_logits: params.mask_logits.iter().map(|t| leaf(g, t.clone())).collect(),
        alphas: params
            .alphas
            .iter()
            .map(|&a| leaf(g, Tensor::scalar(a)))
            .collect(),
        foreign: foreign
            .iter()
            .map(|f| f.filters.0.iter().map(|t| g.constant(t.clone())).collect())
            .collect(),
        w_f: params.w_f.as_ref().map(|t| leaf(g, t.clone())),
        w_c: params.w_c.as_ref().map(|t| leaf(g, t.clone())),
        head: leaf(g, params.head.clone()),
    }
}

/// Optional dropout state for a forward pass; absent means deterministic.
pub struct DropoutState<'a> {
    pub rng: &'a mut ChaCha12Rng,
    pub rate: f64,
}

fn apply_dropout(
    g: &mut Graph,
    x: NodeId,
    dropout: &mut Option<DropoutState<'_>>,
) -> Result<NodeId, CoreError> {
    let Some(state) = dropout else {
        return Ok(x);
    };
    if state.rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - state.rate;
    let len = g.value(x).len();
    let data: Vec<f64> = (0..len)
        .map(|_| {
            if state.rng.gen::<f64>() < state.rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect();
    let mask = g.constant(Tensor::new(vec![len], data)?);
    g.mul(x, mask)
}

fn composed_filters(
    g: &mut Graph,
    nodes: &TaskNodes,
    bank: usize,
) -> Result<NodeId, CoreError> {
    let mask = g.sigmoid(nodes.mask_logits[bank]);
    let gated = g.broadcast_mul_last(nodes.base[bank], mask)?;
    g.add(gated, nodes.adaptive[bank])
}

/// Pooled feature vector for one set of filter-bank nodes: convolution and
/// max-over-time pooling per kernel size, concatenated, ReLU, dropout.
fn pooled_features(
    g: &mut Graph,
    x: NodeId,
    banks: &[NodeId],
    dropout: &mut Option<DropoutState<'_>>,
) -> Result<NodeId, CoreError> {
    let mut pooled = Vec::with_capacity(banks.len());
    for &b in banks {
        pooled.push(g.conv1d_maxpool(x, b)?);
    }
    let z = g.concat(&pooled)?;
    let z = g.relu(z);
    apply_dropout(g, z, dropout)
}

/// Builds the logits for one document.
///
/// In projection modes the local composed filters and each scaled foreign
/// adapter get their own convolution path; the foreign pooled vectors are
/// concatenated and projected by `W_f`, joined with the local vector under
/// `W_c`. In weighted-additive mode the scaled foreign filters are summed
/// into the composed filters before a single convolution path.
pub fn build_logits(
    g: &mut Graph,
    cfg: &ModelConfig,
    mode: Mode,
    nodes: &TaskNodes,
    x_embed: &Tensor,
    mut dropout: Option<DropoutState<'_>>,
) -> Result<NodeId, CoreError> {
    if nodes.foreign.len() != nodes.alphas.len() {
        return Err(CoreError::Invalid(
            "foreign adapter count does not match attention count".into(),
        ));
    }
    let x = g.constant(x_embed.clone());
    let n_banks = cfg.filter_sizes.len();

    let z = if mode.uses_projection() {
        let mut local = Vec::with_capacity(n_banks);
        for bank in 0..n_banks {
            local.push(composed_filters(g, nodes, bank)?);
        }
        let z_c = pooled_features(g, x, &local, &mut dropout)?;

        if nodes.foreign.is_empty() {
            match nodes.w_c {
                Some(w_c) => g.affine(z_c, w_c)?,
                None => z_c,
            }
        } else {
            let mut foreign_feats = Vec::with_capacity(nodes.foreign.len());
            for (adapter, &alpha) in nodes.foreign.iter().zip(&nodes.alphas) {
                let scaled: Vec<NodeId> = adapter
                    .iter()
                    .map(|&f| g.scale_by_scalar(alpha, f))
                    .collect::<Result<_, _>>()?;
                foreign_feats.push(pooled_features(g, x, &scaled, &mut dropout)?);
            }
            let stacked = g.concat(&foreign_feats)?;
            let w_f = nodes.w_f.ok_or_else(|| {
                CoreError::Invalid("projection mode with foreign adapters requires W_f".into())
            })?;
            let z_f = g.affine(stacked, w_f)?;
            let joined = g.concat(&[z_c, z_f])?;
            let w_c = nodes
                .w_c
                .ok_or_else(|| CoreError::Invalid("projection mode requires W_c".into()))?;
            g.affine(joined, w_c)?
        }
    } else {
        let mut banks = Vec::with_capacity(n_banks);
        for bank in 0..n_banks {
            let mut theta = composed_filters(g, nodes, bank)?;
            for (adapter, &alpha) in nodes.foreign.iter().zip(&nodes.alphas) {
                let scaled = g.scale_by_scalar(alpha, adapter[bank])?;
                theta = g.add(theta, scaled)?;
            }
            banks.push(theta);
        }
        pooled_features(g, x, &banks, &mut dropout)?
    };

    g.affine(z, nodes.head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use alloc::vec;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 2,
            filter_sizes: vec![2],
            filters_per_size: 2,
            dropout: 0.0,
        }
    }

    #[test]
    fn compose_identity_cases() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(1, &[0]);
        let b = FilterBanks::random(&cfg, &mut rng);
        let a = FilterBanks::zeros(&cfg);
        let ones = vec![Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()];
        // mask all ones, A zero -> theta = B
        assert_eq!(compose(&b, &ones, &a).unwrap(), b);
        // B zero -> theta = A
        let a2 = FilterBanks::random(&cfg, &mut rng);
        let z = FilterBanks::zeros(&cfg);
        assert_eq!(compose(&z, &ones, &a2).unwrap(), a2);
    }

    #[test]
    fn compose_matches_elementwise_oracle() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(2, &[0]);
        let b = FilterBanks::random(&cfg, &mut rng);
        let a = FilterBanks::random(&cfg, &mut rng);
        let mask = vec![Tensor::new(vec![2], vec![0.3, 0.8]).unwrap()];
        let theta = compose(&b, &mask, &a).unwrap();
        let bank = &b.0[0];
        for f in 0..2 {
            for d in 0..2 {
                for j in 0..2 {
                    let expect = bank.at3(f, d, j) * mask[0].data()[j] + a.0[0].at3(f, d, j);
                    assert!((theta.0[0].at3(f, d, j) - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn effective_mask_values() {
        let masks = effective_mask(&[Tensor::new(vec![2], vec![-2.0, 2.0]).unwrap()]);
        assert!((masks[0].data()[0] - 0.1192).abs() < 1e-4);
        assert!((masks[0].data()[1] - 0.8808).abs() < 1e-4);
        let zero = effective_mask(&[Tensor::zeros(vec![1])]);
        assert_eq!(zero[0].data()[0], 0.5);
        let sat = effective_mask(&[Tensor::new(vec![1], vec![20.0]).unwrap()]);
        assert!((sat[0].data()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn embed_pads_short_documents() {
        let table = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0]).unwrap();
        let x = embed_document(&[1], &table, 3);
        assert_eq!(x.shape(), &[3, 2]);
        assert_eq!(x.data(), &[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn modes_agree_with_no_foreign_and_identity_projection() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(3, &[0]);
        let base = FilterBanks::random(&cfg, &mut rng);
        let mut params = TaskParams::init(&cfg, Mode::FedSeit, 3, 0, &mut rng);
        // identity W_c collapses the projection path onto z_c
        let z = cfg.z_dim();
        let mut eye = vec![0.0; z * z];
        for i in 0..z {
            eye[i * z + i] = 1.0;
        }
        params.w_c = Some(Tensor::new(vec![z, z], eye).unwrap());
        let table = Tensor::new(vec![4, 2], (0..8).map(|v| v as f64 * 0.1).collect()).unwrap();
        let x = embed_document(&[0, 2, 1, 3], &table, cfg.max_filter_size());

        let mut g1 = Graph::new();
        let nodes1 = stage_params(&mut g1, &base, &params, &[], true);
        let l1 = build_logits(&mut g1, &cfg, Mode::FedSeit, &nodes1, &x, None).unwrap();

        let mut params2 = params.clone();
        params2.w_c = None;
        params2.w_f = None;
        let mut g2 = Graph::new();
        let nodes2 = stage_params(&mut g2, &base, &params2, &[], true);
        let l2 = build_logits(&mut g2, &cfg, Mode::FedWeit, &nodes2, &x, None).unwrap();

        for (a, b) in g1.value(l1).data().iter().zip(g2.value(l2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn foreign_filters_receive_no_gradient() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(4, &[0]);
        let base = FilterBanks::random(&cfg, &mut rng);
        let params = TaskParams::init(&cfg, Mode::FedSeit, 2, 1, &mut rng);
        let foreign = vec![ForeignAdapter {
            source_client: 1,
            source_task: 0,
            filters: FilterBanks::random(&cfg, &mut rng),
        }];
        let table = Tensor::new(vec![4, 2], (0..8).map(|v| v as f64 * 0.2 - 0.5).collect()).unwrap();
        let x = embed_document(&[0, 1, 2, 3], &table, cfg.max_filter_size());
        let mut g = Graph::new();
        let nodes = stage_params(&mut g, &base, &params, &foreign, true);
        let logits = build_logits(&mut g, &cfg, Mode::FedSeit, &nodes, &x, None).unwrap();
        let loss = g.softmax_cross_entropy(logits, 0).unwrap();
        let grads = g.backward(loss).unwrap();
        for bank in &nodes.foreign[0] {
            assert!(grads.get(*bank).is_none());
        }
        // while alpha does train
        assert!(grads.get(nodes.alphas[0]).is_some());
    }

    #[test]
    fn fedweit_zero_alphas_match_local_model() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(5, &[0]);
        let base = FilterBanks::random(&cfg, &mut rng);
        let mut params = TaskParams::init(&cfg, Mode::FedWeit, 2, 2, &mut rng);
        params.alphas = vec![0.0, 0.0];
        let foreign: Vec<ForeignAdapter> = (0..2)
            .map(|i| ForeignAdapter {
                source_client: i,
                source_task: 0,
                filters: FilterBanks::random(&cfg, &mut rng),
            })
            .collect();
        let table = Tensor::new(vec![4, 2], (0..8).map(|v| v as f64 * 0.3).collect()).unwrap();
        let x = embed_document(&[3, 1, 0, 2], &table, cfg.max_filter_size());

        let mut g1 = Graph::new();
        let nodes1 = stage_params(&mut g1, &base, &params, &foreign, true);
        let l1 = build_logits(&mut g1, &cfg, Mode::FedWeit, &nodes1, &x, None).unwrap();

        let mut solo = params.clone();
        solo.alphas = Vec::new();
        let mut g2 = Graph::new();
        let nodes2 = stage_params(&mut g2, &base, &solo, &[], true);
        let l2 = build_logits(&mut g2, &cfg, Mode::FedWeit, &nodes2, &x, None).unwrap();

        assert_eq!(g1.value(l1).data(), g2.value(l2).data());
    }
}
