//! Gradient-descent loops shared by the experiments.
//!
//! Wall time is accumulated around gradient evaluation and the parameter
//! update only; whatever the observer does between steps is not counted.

use std::time::Instant;

use crate::completion::{
    apply_compressed_step, compressed_masked_gradients, masked_loss_and_gradient, CompressedGradients,
    DiscrepantGdConfig, EndToEnd, ObservationMask,
};
use crate::compress::{compressed_l2_gradient_projected, CompressedFactorization};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{l2_loss_and_gradient, DeepFactorization};

/// What is being fit: the whole target, or only its observed entries.
#[derive(Debug, Clone, Copy)]
pub enum Task<'a> {
    Factorization { phi: &'a Matrix },
    Completion { phi: &'a Matrix, mask: &'a ObservationMask },
}

impl<'a> Task<'a> {
    pub fn phi(&self) -> &'a Matrix {
        match *self {
            Task::Factorization { phi } | Task::Completion { phi, .. } => phi,
        }
    }
}

/// A model that plain GD can drive.
pub trait GdModel: EndToEnd {
    type Gradients;

    /// Loss and gradients at the current parameters.
    fn evaluate(&self, task: &Task<'_>) -> Result<(f64, Self::Gradients)>;

    fn descend(&mut self, grads: &Self::Gradients, rule: &DiscrepantGdConfig);
}

impl GdModel for DeepFactorization {
    type Gradients = Vec<Matrix>;

    fn evaluate(&self, task: &Task<'_>) -> Result<(f64, Vec<Matrix>)> {
        match *task {
            Task::Factorization { phi } => l2_loss_and_gradient(self, phi),
            Task::Completion { phi, mask } => masked_loss_and_gradient(self, phi, mask),
        }
    }

    fn descend(&mut self, grads: &Vec<Matrix>, rule: &DiscrepantGdConfig) {
        self.apply_step(grads, rule.base.eta, rule.base.lambda);
    }
}

/// Factorization trains the inner layers only, against `U^T Φ V`; the loss
/// adds back the part of `Φ` outside the fixed outer subspaces, which is exact
/// while the outer factors stay orthonormal. Completion updates all blocks.
pub enum CompressedGradientsKind {
    Inner(Vec<Matrix>),
    All(CompressedGradients),
}

impl GdModel for CompressedFactorization {
    type Gradients = CompressedGradientsKind;

    fn evaluate(&self, task: &Task<'_>) -> Result<(f64, CompressedGradientsKind)> {
        match *task {
            Task::Factorization { phi } => {
                if phi.shape() != (self.outer_u.nrows(), self.outer_v.nrows()) {
                    return Err(Error::DimensionMismatch {
                        op: "compressed factorization step",
                        expected: format!("{}x{}", self.outer_u.nrows(), self.outer_v.nrows()),
                        actual: format!("{}x{}", phi.nrows(), phi.ncols()),
                    });
                }
                let projected = self.project_target(phi);
                let core = crate::model::forward(&self.inner);
                let outside = (phi.norm_squared() - projected.norm_squared()).max(0.0);
                let loss = 0.5 * ((core - &projected).norm_squared() + outside);
                let grads = compressed_l2_gradient_projected(self, &projected);
                Ok((loss, CompressedGradientsKind::Inner(grads)))
            }
            Task::Completion { phi, mask } => {
                let grads = compressed_masked_gradients(self, phi, mask)?;
                Ok((grads.loss, CompressedGradientsKind::All(grads)))
            }
        }
    }

    fn descend(&mut self, grads: &CompressedGradientsKind, rule: &DiscrepantGdConfig) {
        match grads {
            CompressedGradientsKind::Inner(g) => self.inner.apply_step(g, rule.base.eta, rule.base.lambda),
            CompressedGradientsKind::All(g) => apply_compressed_step(self, g, rule),
        }
    }
}

/// State handed to the observer before each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub iteration: usize,
    pub loss: f64,
    /// Cumulative step time up to and including this loss evaluation.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    /// Steps taken; equals `max_iters` when the run did not converge.
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub final_loss: f64,
    pub wall_ms: f64,
}

impl RunSummary {
    pub fn wall_ms_per_iter(&self) -> f64 {
        self.wall_ms / self.iterations.max(1) as f64
    }
}

/// Drives one model a step at a time, so several runs can advance in
/// lockstep while keeping separate clocks.
pub struct Stepper<'m, M: GdModel> {
    model: &'m mut M,
    rule: DiscrepantGdConfig,
    iteration: usize,
    wall_ms: f64,
    summary: Option<RunSummary>,
}

impl<'m, M: GdModel> Stepper<'m, M> {
    pub fn new(model: &'m mut M, rule: DiscrepantGdConfig) -> Self {
        Self {
            model,
            rule,
            iteration: 0,
            wall_ms: 0.0,
            summary: None,
        }
    }

    pub fn model(&self) -> &M {
        self.model
    }

    /// Set once a terminal iterate has been evaluated.
    pub fn summary(&self) -> Option<RunSummary> {
        self.summary
    }

    pub fn is_done(&self) -> bool {
        self.summary.is_some()
    }

    /// Evaluates the current iterate, shows it to `observe`, then steps
    /// unless the iterate is terminal (`loss <= loss_tol`, non-finite loss,
    /// or `max_iters` reached). Returns `None` once finished.
    pub fn advance<F>(&mut self, task: &Task<'_>, observe: F) -> Result<Option<Progress>>
    where
        F: FnOnce(&Progress, &M) -> Result<()>,
    {
        if self.summary.is_some() {
            return Ok(None);
        }
        let start = Instant::now();
        let (loss, grads) = self.model.evaluate(task)?;
        self.wall_ms += start.elapsed().as_secs_f64() * 1e3;
        let progress = Progress {
            iteration: self.iteration,
            loss,
            wall_ms: self.wall_ms,
        };
        observe(&progress, self.model)?;
        if self.rule.base.stops_at(self.iteration, loss) {
            self.summary = Some(RunSummary {
                iterations: self.iteration,
                converged: loss <= self.rule.base.loss_tol,
                diverged: !loss.is_finite(),
                final_loss: loss,
                wall_ms: self.wall_ms,
            });
        } else {
            let start = Instant::now();
            self.model.descend(&grads, &self.rule);
            self.wall_ms += start.elapsed().as_secs_f64() * 1e3;
            self.iteration += 1;
        }
        Ok(Some(progress))
    }
}

/// Runs GD until `loss <= loss_tol`, a non-finite loss, or `max_iters` steps.
///
/// `observe` sees iterate `t` and its loss before step `t` is applied, for
/// `t = 0..=iterations`.
pub fn run_gd<M, F>(
    model: &mut M,
    task: &Task<'_>,
    rule: &DiscrepantGdConfig,
    mut observe: F,
) -> Result<RunSummary>
where
    M: GdModel,
    F: FnMut(&Progress, &M) -> Result<()>,
{
    let mut stepper = Stepper::new(model, *rule);
    loop {
        stepper.advance(task, &mut observe)?;
        if let Some(summary) = stepper.summary() {
            return Ok(summary);
        }
    }
}

/// [`run_gd`] without an observer.
pub fn train<M: GdModel>(model: &mut M, task: &Task<'_>, rule: &DiscrepantGdConfig) -> Result<RunSummary> {
    run_gd(model, task, rule, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::completion::{recovery_error, sample_mask};
    use crate::compress::{build_compression_basis, compress, compressed_l2_loss, target_alignment};
    use crate::linalg::RngSeed;
    use crate::model::{generate_low_rank_target, l2_loss, GdConfig};

    fn rule(eta: f64, max_iters: usize, tol: f64, gamma: f64) -> DiscrepantGdConfig {
        DiscrepantGdConfig::new(GdConfig::new(eta, 0.0, max_iters, tol).unwrap(), gamma).unwrap()
    }

    #[test]
    fn factorization_converges_and_observer_sees_every_iterate() {
        let phi = generate_low_rank_target(12, 2, RngSeed(1)).unwrap().phi;
        let mut theta = DeepFactorization::orthogonal(12, &[1e-2; 3], RngSeed(2)).unwrap();
        let mut seen = Vec::new();
        let summary = run_gd(
            &mut theta,
            &Task::Factorization { phi: &phi },
            &rule(0.5, 50_000, 1e-10, 0.0),
            |p, _| {
                seen.push(*p);
                Ok(())
            },
        )
        .unwrap();
        assert!(summary.converged, "{summary:?}");
        assert_eq!(seen.len(), summary.iterations + 1);
        assert!(seen.windows(2).all(|w| w[1].iteration == w[0].iteration + 1));
        assert!(seen.windows(2).all(|w| w[1].wall_ms >= w[0].wall_ms));
        assert!(l2_loss(&theta, &phi).unwrap() <= 1e-10);
        assert_eq!(seen.last().unwrap().loss, summary.final_loss);
    }

    #[test]
    fn stops_at_iteration_cap() {
        let phi = generate_low_rank_target(8, 2, RngSeed(3)).unwrap().phi;
        let mut theta = DeepFactorization::orthogonal(8, &[1e-3; 3], RngSeed(4)).unwrap();
        let summary = train(&mut theta, &Task::Factorization { phi: &phi }, &rule(0.1, 7, 0.0, 0.0)).unwrap();
        assert_eq!(summary.iterations, 7);
        assert!(!summary.converged && !summary.diverged);
    }

    #[test]
    fn huge_step_reports_divergence() {
        let phi = generate_low_rank_target(8, 2, RngSeed(5)).unwrap().phi * 100.0;
        let mut theta = DeepFactorization::orthogonal(8, &[1.0; 3], RngSeed(6)).unwrap();
        let summary = train(&mut theta, &Task::Factorization { phi: &phi }, &rule(10.0, 1000, 0.0, 0.0)).unwrap();
        assert!(summary.diverged);
        assert!(summary.iterations < 1000);
    }

    #[test]
    fn compressed_factorization_loss_matches_direct_evaluation() {
        let phi = generate_low_rank_target(16, 2, RngSeed(7)).unwrap().phi;
        let theta = DeepFactorization::orthogonal(16, &[0.2; 3], RngSeed(8)).unwrap();
        let basis = build_compression_basis(&theta, &target_alignment(&theta, &phi), 2, 1e-6).unwrap();
        let mut cf = compress(&theta, &basis).unwrap();
        let task = Task::Factorization { phi: &phi };
        let r = rule(0.3, 20, 0.0, 0.0);
        let summary = run_gd(&mut cf, &task, &r, |p, m| {
            let direct = compressed_l2_loss(m, &phi)?;
            assert!((p.loss - direct).abs() <= 1e-13);
            Ok(())
        })
        .unwrap();
        assert_eq!(summary.iterations, 20);
    }

    #[test]
    fn completion_reduces_recovery_error() {
        let phi = generate_low_rank_target(20, 2, RngSeed(9)).unwrap().phi;
        let mask = sample_mask(20, 0.6, RngSeed(10)).unwrap();
        let mut theta = DeepFactorization::orthogonal(20, &[1e-2; 3], RngSeed(11)).unwrap();
        let task = Task::Completion { phi: &phi, mask: &mask };
        let summary = train(&mut theta, &task, &rule(1.0, 100_000, 1e-10, 0.0)).unwrap();
        assert!(summary.converged, "{summary:?}");
        assert!(recovery_error(&theta, &phi) < 1e-3);
    }
}
