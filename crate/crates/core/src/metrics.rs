//! Accuracy metrics.

use crate::error::CoreError;

/// Fraction of exact prediction matches (micro-averaged accuracy).
pub fn micro_accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64, CoreError> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(CoreError::EmptyInput {
            context: "micro_accuracy",
        });
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(micro_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(micro_accuracy(&[0, 1, 1], &[0, 1, 0]).unwrap(), 2.0 / 3.0);
        assert_eq!(micro_accuracy(&[9, 9], &[0, 1]).unwrap(), 0.0);
        assert!(micro_accuracy(&[], &[]).is_err());
        assert!(micro_accuracy(&[1], &[1, 2]).is_err());
    }
}
