//! Frozen-bundle evaluation.
//!
//! A past task is evaluated with the client's final base composed against
//! that task's frozen mask and adaptive bank, using the exact foreign
//! adapters, attentions, projections and head the task trained with.
//! Dropout is disabled, so evaluation is deterministic.

use alloc::vec::Vec;

use crate::error::CoreError;
use crate::graph::Graph;
use crate::metrics::micro_accuracy;
use crate::model::{build_logits, embed_document, stage_params, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{Example, TaskRecord};

/// Argmax with ties broken toward the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Predicted label for one document under a frozen task bundle.
pub fn predict_example(
    base: &crate::model::FilterBanks,
    record: &TaskRecord,
    cfg: &ModelConfig,
    embeddings: &Tensor,
    tokens: &[usize],
) -> Result<usize, CoreError> {
    let mut g = Graph::new();
    let nodes = stage_params(&mut g, base, &record.params, &record.foreign, false);
    let x = embed_document(tokens, embeddings, cfg.max_filter_size());
    let logits = build_logits(&mut g, cfg, record.mode, &nodes, &x, None)?;
    Ok(predict(g.value(logits).data()))
}

/// Micro-averaged accuracy of a frozen task bundle on a test set.
pub fn evaluate_task(
    base: &crate::model::FilterBanks,
    record: &TaskRecord,
    cfg: &ModelConfig,
    embeddings: &Tensor,
    test: &[Example],
) -> Result<f64, CoreError> {
    if test.is_empty() {
        return Err(CoreError::EmptyInput {
            context: "evaluate_task",
        });
    }
    let mut predictions = Vec::with_capacity(test.len());
    let mut truths = Vec::with_capacity(test.len());
    for doc in test {
        predictions.push(predict_example(base, record, cfg, embeddings, &doc.tokens)?);
        truths.push(doc.label);
    }
    micro_accuracy(&predictions, &truths)
}
