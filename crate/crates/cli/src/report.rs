//! Final evaluation and CSV emission: per-task micro-averaged accuracy,
//! its mean over all clients and tasks, and multi-seed summaries.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use fedseit_core::eval::evaluate_task;
use fedseit_core::{ClientState, ModelConfig, Tensor};

use crate::data::TaskDataset;
use crate::federation::TrajectoryPoint;

/// Evaluation of one seed's finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    /// `maa[client][task]`.
    pub maa: Vec<Vec<f64>>,
    pub tta: f64,
    pub trajectory: Vec<TrajectoryPoint>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentResult {
    pub outcomes: Vec<SeedOutcome>,
}

impl ExperimentResult {
    pub fn mean_tta(&self) -> f64 {
        let n = self.outcomes.len() as f64;
        self.outcomes.iter().map(|o| o.tta).sum::<f64>() / n
    }

    /// Population standard deviation over seeds.
    pub fn std_tta(&self) -> f64 {
        let mean = self.mean_tta();
        let n = self.outcomes.len() as f64;
        (self
            .outcomes
            .iter()
            .map(|o| (o.tta - mean).powi(2))
            .sum::<f64>()
            / n)
            .sqrt()
    }
}

/// Mean of a per-client-per-task accuracy grid.
pub fn tta_of(maa: &[Vec<f64>]) -> f64 {
    let values: Vec<f64> = maa.iter().flatten().copied().collect();
    values.iter().sum::<f64>() / values.len() as f64
}

/// Evaluates every task of every client with its frozen bundle against
/// the client's final base, on the task's full test set.
pub fn evaluate_clients(
    clients: &[ClientState],
    grid: &[Vec<TaskDataset>],
    model_cfg: &ModelConfig,
    embeddings: &Tensor,
) -> Result<Vec<Vec<f64>>> {
    let mut maa = Vec::with_capacity(clients.len());
    for client in clients {
        ensure!(
            client.tasks.len() == grid[client.client_id].len(),
            "client {} finished {} of {} tasks",
            client.client_id,
            client.tasks.len(),
            grid[client.client_id].len()
        );
        let mut row = Vec::with_capacity(client.tasks.len());
        for (t, record) in client.tasks.iter().enumerate() {
            let test = &grid[client.client_id][t].data.test;
            let acc = evaluate_task(&client.base, record, model_cfg, embeddings, test)
                .map_err(anyhow::Error::new)
                .with_context(|| format!("evaluating client {} task {t}", client.client_id))?;
            row.push(acc);
        }
        maa.push(row);
    }
    Ok(maa)
}

/// `results.csv`: one `maa` row per (seed, client, task), one `tta` row
/// per seed, and one `summary` row with mean and population std. Floats
/// are written with round-trip precision so downstream recomputation is
/// exact.
pub fn results_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("kind,seed,client,task,value,std\n");
    for o in &result.outcomes {
        for (c, row) in o.maa.iter().enumerate() {
            for (t, acc) in row.iter().enumerate() {
                let _ = writeln!(out, "maa,{},{c},{t},{acc},", o.seed);
            }
        }
    }
    for o in &result.outcomes {
        let _ = writeln!(out, "tta,{},,,{},", o.seed, o.tta);
    }
    let _ = writeln!(out, "summary,,,,{},{}", result.mean_tta(), result.std_tta());
    out
}

/// `trajectory.csv`: round-by-round current-task test accuracy.
pub fn trajectory_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("seed,client,task,round,accuracy\n");
    for o in &result.outcomes {
        for p in &o.trajectory {
            let _ = writeln!(out, "{},{},{},{},{}", o.seed, p.client, p.task, p.round, p.accuracy);
        }
    }
    out
}

pub fn emit(result: &ExperimentResult, out: &Path, config_echo: &str) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let write = |name: &str, body: String| -> Result<()> {
        let path = out.join(name);
        std::fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))
    };
    write("results.csv", results_csv(result))?;
    write("trajectory.csv", trajectory_csv(result))?;
    write("config.echo", config_echo.to_string())?;
    Ok(())
}

/// Parses `results.csv` back into (seed, tta) pairs plus the summary —
/// used by tests to prove the emitted file is lossless.
pub fn parse_results_csv(text: &str) -> Result<(Vec<(u64, f64)>, f64, f64)> {
    let mut ttas = Vec::new();
    let mut summary = None;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(text.as_bytes());
    for row in reader.records() {
        let row = row?;
        match &row[0] {
            "tta" => ttas.push((row[1].parse()?, row[4].parse()?)),
            "summary" => summary = Some((row[4].parse()?, row[5].parse()?)),
            _ => {}
        }
    }
    let (mean, std) = summary.context("results.csv has no summary row")?;
    Ok((ttas, mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_result() -> ExperimentResult {
        ExperimentResult {
            outcomes: vec![
                SeedOutcome {
                    seed: 1,
                    maa: vec![vec![1.0, 0.5], vec![0.5, 1.0]],
                    tta: 0.75,
                    trajectory: vec![TrajectoryPoint {
                        client: 0,
                        task: 0,
                        round: 0,
                        accuracy: 0.5,
                    }],
                },
                SeedOutcome {
                    seed: 2,
                    maa: vec![vec![0.25, 0.25], vec![0.25, 0.25]],
                    tta: 0.25,
                    trajectory: Vec::new(),
                },
            ],
        }
    }

    #[test]
    fn tta_is_the_mean_of_the_grid() {
        assert_eq!(tta_of(&[vec![1.0, 0.5], vec![0.5, 1.0]]), 0.75);
    }

    #[test]
    fn summary_carries_mean_and_population_std() {
        let r = fake_result();
        assert!((r.mean_tta() - 0.5).abs() < 1e-15);
        assert!((r.std_tta() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trips_exactly() {
        let r = fake_result();
        let text = results_csv(&r);
        let (ttas, mean, std) = parse_results_csv(&text).unwrap();
        assert_eq!(ttas, vec![(1, 0.75), (2, 0.25)]);
        assert_eq!(mean, r.mean_tta());
        assert_eq!(std, r.std_tta());
    }

    #[test]
    fn csv_emission_is_deterministic() {
        let r = fake_result();
        assert_eq!(results_csv(&r), results_csv(&r));
        assert_eq!(trajectory_csv(&r), trajectory_csv(&r));
    }
}
