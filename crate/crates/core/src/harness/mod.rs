//! Experiment runner: resolved configs, seeded trials, and CSV tables.

pub mod config;
mod experiments;
pub mod output;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub use config::{Experiment, ExperimentConfig, Overrides};
pub use experiments::{run_fig2, run_fig3, run_fig4, run_fig5, run_fig7, run_fig8};
pub use output::{Cell, Table};

use crate::dynamics::TrajectoryPca;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngSeed};

/// Runs the configured experiment.
pub fn run(cfg: &ExperimentConfig) -> Result<Table> {
    cfg.validate()?;
    match cfg.experiment {
        Experiment::DepthWidth => run_fig2(cfg),
        Experiment::Svd => run_fig3(cfg),
        Experiment::CompressFactorization => run_fig4(cfg),
        Experiment::CompressCompletion => run_fig5(cfg),
        Experiment::NarrowAblation => run_fig7(cfg),
        Experiment::ReluSpectrum => run_fig8(cfg),
    }
}

/// Runs the experiment and writes its CSV to `cfg.output_path`, or stdout.
pub fn run_to_output(cfg: &ExperimentConfig) -> Result<Table> {
    let table = run(cfg)?;
    match &cfg.output_path {
        Some(path) => {
            let file = std::fs::File::create(path)?;
            table.write_csv(cfg, std::io::BufWriter::new(file))?;
        }
        None => table.write_csv(cfg, std::io::stdout().lock())?,
    }
    Ok(table)
}

/// Seed of trial `k`.
pub fn trial_seed(cfg: &ExperimentConfig, k: usize) -> RngSeed {
    RngSeed(cfg.base_seed).offset(k as u64)
}

/// Sub-streams drawn from a trial seed.
pub(crate) mod stream {
    pub const TARGET: u64 = 1;
    pub const MASK: u64 = 2;
    pub const INIT: u64 = 3;
    pub const NARROW_INIT: u64 = 4;
}

/// Maps `f` over `jobs` on up to `available_parallelism` threads. Results
/// come back in job order; the first error wins.
pub(crate) fn parallel_map<J, R, F>(jobs: Vec<J>, f: F) -> Result<Vec<R>>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> Result<R> + Sync,
{
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len())
        .max(1);
    if workers == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let out = f(&jobs[i]);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every job ran"))
        .collect()
}

/// One logged iterate of a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub wall_ms: f64,
    pub loss: f64,
    pub recovery_error: f64,
    pub prop1_gap_sq: Option<f64>,
    pub repeated_sigma: Option<f64>,
    pub rho_predicted: Option<f64>,
    pub max_drift_angle: Option<f64>,
}

impl TrajectoryRow {
    pub fn new(iteration: usize, wall_ms: f64, loss: f64, recovery_error: f64) -> Self {
        Self {
            iteration,
            wall_ms,
            loss,
            recovery_error,
            prop1_gap_sq: None,
            repeated_sigma: None,
            rho_predicted: None,
            max_drift_angle: None,
        }
    }
}

/// Rows of one run with strictly increasing iterations and non-decreasing
/// wall time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    rows: Vec<TrajectoryRow>,
}

impl TrajectoryLog {
    pub fn push(&mut self, row: TrajectoryRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.iteration <= last.iteration || row.wall_ms < last.wall_ms {
                return Err(Error::InvalidArgument(format!(
                    "log row (t={}, {} ms) does not follow (t={}, {} ms)",
                    row.iteration, row.wall_ms, last.iteration, last.wall_ms
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[TrajectoryRow] {
        &self.rows
    }

    pub fn last(&self) -> Option<&TrajectoryRow> {
        self.rows.last()
    }

    pub fn last_mut(&mut self) -> Option<&mut TrajectoryRow> {
        self.rows.last_mut()
    }
}

/// Bounded sample of end-to-end iterates for trajectory PCA. When full, every
/// other sample is dropped and the stride doubles.
#[derive(Debug, Clone)]
pub(crate) struct IterateSample {
    stride: usize,
    cap: usize,
    points: Vec<(usize, Matrix)>,
}

/// Total matrix entries kept across all sampled trajectories of one trial.
const PCA_ENTRY_BUDGET: usize = 24_000_000;

impl IterateSample {
    pub fn new(stride: usize, d: usize, trajectories: usize) -> Self {
        let cap = (PCA_ENTRY_BUDGET / (trajectories.max(1) * d * d)).clamp(4, 64);
        Self {
            stride: stride.max(1),
            cap,
            points: Vec::new(),
        }
    }

    pub fn wants(&self, iteration: usize) -> bool {
        iteration % self.stride == 0
    }

    pub fn offer(&mut self, iteration: usize, f: impl FnOnce() -> Matrix) {
        if !self.wants(iteration) {
            return;
        }
        self.points.push((iteration, f()));
        if self.points.len() > self.cap {
            self.stride *= 2;
            let stride = self.stride;
            self.points.retain(|(t, _)| t % stride == 0);
        }
    }

    /// Adds the last iterate unless it is already the newest sample.
    pub fn finish(&mut self, iteration: usize, f: impl FnOnce() -> Matrix) {
        if self.points.last().map(|p| p.0) != Some(iteration) {
            self.points.push((iteration, f()));
        }
    }

    #[cfg(test)]
    pub fn points(&self) -> &[(usize, Matrix)] {
        &self.points
    }
}

/// Fits one PCA over all samples and returns each trajectory's
/// `(iteration, [pc1, pc2])` pairs. `None` if there are too few iterates.
pub(crate) fn joint_pca(samples: &[&IterateSample]) -> Result<Option<Vec<Vec<(usize, [f64; 2])>>>> {
    let all: Vec<Matrix> = samples
        .iter()
        .flat_map(|s| s.points.iter().map(|(_, m)| m.clone()))
        .collect();
    if all.len() < 2 {
        return Ok(None);
    }
    let pca = TrajectoryPca::fit(&all)?;
    Ok(Some(
        samples
            .iter()
            .map(|s| s.points.iter().map(|(t, m)| (*t, pca.project(m))).collect())
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_rejects_out_of_order_rows() {
        let mut log = TrajectoryLog::default();
        log.push(TrajectoryRow::new(0, 0.0, 1.0, 1.0)).unwrap();
        log.push(TrajectoryRow::new(5, 2.0, 0.5, 0.9)).unwrap();
        assert!(log.push(TrajectoryRow::new(5, 3.0, 0.4, 0.8)).is_err());
        assert!(log.push(TrajectoryRow::new(6, 1.0, 0.4, 0.8)).is_err());
        assert_eq!(log.rows().len(), 2);
    }

    #[test]
    fn sample_thins_when_full() {
        let mut s = IterateSample::new(1, 2000, 1);
        assert_eq!(s.cap, 6);
        for t in 0..20 {
            s.offer(t, || Matrix::zeros(1, 1));
        }
        assert!(s.points().len() <= 6);
        let stride = s.stride;
        assert!(s.points().iter().all(|(t, _)| t % stride == 0));
        s.finish(19, || Matrix::zeros(1, 1));
        assert_eq!(s.points().last().unwrap().0, 19);
        s.finish(19, || Matrix::zeros(1, 1));
        assert_eq!(s.points().iter().filter(|p| p.0 == 19).count(), 1);
    }

    #[test]
    fn parallel_map_keeps_order_and_errors() {
        let out = parallel_map((0..9).collect(), |&k| Ok(k * 2)).unwrap();
        assert_eq!(out, (0..9).map(|k| k * 2).collect::<Vec<_>>());
        let err = parallel_map((0..4).collect(), |&k| {
            if k == 2 {
                Err(Error::InvalidArgument("boom".into()))
            } else {
                Ok(k)
            }
        });
        assert!(err.is_err());
    }

    #[test]
    fn trial_seeds_are_consecutive() {
        let mut cfg = ExperimentConfig::defaults(Experiment::ReluSpectrum);
        cfg.base_seed = 40;
        assert_eq!(trial_seed(&cfg, 0), RngSeed(40));
        assert_eq!(trial_seed(&cfg, 3), RngSeed(43));
    }
}
