//! Parameter-server side: aggregation of sparsified bases, the registry of
//! completed tasks' adaptive parameters, and relevance-ranked adapter
//! selection.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::model::{FilterBanks, ForeignAdapter};
use crate::summary::TaskSummary;
use crate::tensor::Tensor;

/// The server's aggregated base parameter.
pub type GlobalParameter = FilterBanks;

/// Selective-transfer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitConfig {
    pub enabled: bool,
    /// Adapters transmitted to each client per task.
    pub k: usize,
    /// Cluster centers per task summary.
    pub q: usize,
}

impl Default for SitConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            k: 3,
            q: 200,
        }
    }
}

impl SitConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.enabled && (self.k == 0 || self.q == 0) {
            return Err(CoreError::Invalid(
                "selective transfer requires K >= 1 and Q >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Elementwise mean of the clients' sparsified base banks.
pub fn aggregate(bases: &[FilterBanks]) -> Result<GlobalParameter, CoreError> {
    let first = bases.first().ok_or(CoreError::EmptyInput {
        context: "aggregate",
    })?;
    for b in &bases[1..] {
        if !first.same_shapes(b) {
            return Err(CoreError::ShapeMismatch {
                context: "aggregate",
                expected: first.0.iter().map(Tensor::len).collect(),
                actual: b.0.iter().map(Tensor::len).collect(),
            });
        }
    }
    let scale = 1.0 / bases.len() as f64;
    let banks = (0..first.0.len())
        .map(|bank| {
            let mut data = alloc::vec![0.0; first.0[bank].len()];
            for b in bases {
                for (d, &v) in data.iter_mut().zip(b.0[bank].data()) {
                    *d += v;
                }
            }
            for d in data.iter_mut() {
                *d *= scale;
            }
            Tensor::new(first.0[bank].shape().to_vec(), data).unwrap()
        })
        .collect();
    Ok(FilterBanks(banks))
}

/// Elementwise mean of equally-shaped matrices (dense-layer sharing).
pub fn mean_matrices(mats: &[Tensor]) -> Result<Tensor, CoreError> {
    let first = mats.first().ok_or(CoreError::EmptyInput {
        context: "mean_matrices",
    })?;
    let mut data = alloc::vec![0.0; first.len()];
    for m in mats {
        crate::tensor::check_same_shape("mean_matrices", first, m)?;
        for (d, &v) in data.iter_mut().zip(m.data()) {
            *d += v;
        }
    }
    let scale = 1.0 / mats.len() as f64;
    for d in data.iter_mut() {
        *d *= scale;
    }
    Tensor::new(first.shape().to_vec(), data)
}

/// Mean cosine similarity over all center pairs of two task summaries.
/// Zero-norm centers contribute similarity 0.
pub fn score_overlap(a: &TaskSummary, b: &TaskSummary) -> Result<f64, CoreError> {
    if a.dim() != b.dim() {
        return Err(CoreError::ShapeMismatch {
            context: "score_overlap",
            expected: a.centers.shape().to_vec(),
            actual: b.centers.shape().to_vec(),
        });
    }
    if a.num_centers() == 0 || b.num_centers() == 0 {
        return Err(CoreError::EmptyInput {
            context: "score_overlap",
        });
    }
    let mut total = 0.0;
    for i in 0..a.num_centers() {
        let u = a.center(i);
        let nu = libm::sqrt(u.iter().map(|v| v * v).sum::<f64>());
        for j in 0..b.num_centers() {
            let v = b.center(j);
            let nv = libm::sqrt(v.iter().map(|w| w * w).sum::<f64>());
            if nu == 0.0 || nv == 0.0 {
                continue;
            }
            let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
            total += dot / (nu * nv);
        }
    }
    Ok(total / (a.num_centers() * b.num_centers()) as f64)
}

/// What the server keeps per completed (client, task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub adaptive: FilterBanks,
    pub summary: Option<TaskSummary>,
}

/// Immutable store of completed tasks' adaptive parameters and summaries.
///
/// Serialized as a flat entry sequence so formats with string-only map
/// keys can carry it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(
    from = "alloc::vec::Vec<((usize, usize), RegistryEntry)>",
    into = "alloc::vec::Vec<((usize, usize), RegistryEntry)>"
)]
pub struct AdapterRegistry {
    entries: BTreeMap<(usize, usize), RegistryEntry>,
}

impl From<Vec<((usize, usize), RegistryEntry)>> for AdapterRegistry {
    fn from(entries: Vec<((usize, usize), RegistryEntry)>) -> Self {
        Self {
            entries: entries.into_iter().collect(),
        }
    }
}

impl From<AdapterRegistry> for Vec<((usize, usize), RegistryEntry)> {
    fn from(registry: AdapterRegistry) -> Self {
        registry.entries.into_iter().collect()
    }
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores one completed task; re-storing an existing key is rejected.
    pub fn store(
        &mut self,
        client: usize,
        task: usize,
        adaptive: FilterBanks,
        summary: Option<TaskSummary>,
    ) -> Result<(), CoreError> {
        if self.entries.contains_key(&(client, task)) {
            return Err(CoreError::DuplicateEntry { client, task });
        }
        self.entries
            .insert((client, task), RegistryEntry { adaptive, summary });
        Ok(())
    }

    pub fn get(&self, client: usize, task: usize) -> Option<&RegistryEntry> {
        self.entries.get(&(client, task))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &RegistryEntry)> {
        self.entries.iter()
    }

    /// Relevance-ranked top-K selection over all foreign clients' task
    /// history. Ties break toward the smaller (client, task) key. The
    /// requester's own entries are never candidates.
    pub fn select_top_k(
        &self,
        requester: usize,
        query: &TaskSummary,
        k: usize,
    ) -> Result<Vec<ForeignAdapter>, CoreError> {
        let mut scored: Vec<(f64, usize, usize)> = Vec::new();
        for (&(client, task), entry) in &self.entries {
            if client == requester {
                continue;
            }
            let Some(summary) = &entry.summary else {
                return Err(CoreError::Invalid(alloc::format!(
                    "registry entry ({client}, {task}) has no summary"
                )));
            };
            scored.push((score_overlap(query, summary)?, client, task));
        }
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
        });
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(_, client, task)| ForeignAdapter {
                source_client: client,
                source_task: task,
                filters: self.entries[&(client, task)].adaptive.clone(),
            })
            .collect())
    }

    /// Non-selective branch: every client's previous-task adapter,
    /// including the requester's own. Empty at the first task.
    pub fn latest_adapters(
        &self,
        num_clients: usize,
        task: usize,
    ) -> Result<Vec<ForeignAdapter>, CoreError> {
        if task == 0 {
            return Ok(Vec::new());
        }
        let prev = task - 1;
        let mut out = Vec::with_capacity(num_clients);
        for client in 0..num_clients {
            let entry = self
                .get(client, prev)
                .ok_or(CoreError::MissingEntry { client, task: prev })?;
            out.push(ForeignAdapter {
                source_client: client,
                source_task: prev,
                filters: entry.adaptive.clone(),
            });
        }
        Ok(out)
    }
}
