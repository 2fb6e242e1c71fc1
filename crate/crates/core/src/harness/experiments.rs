use std::collections::HashMap;

use super::{joint_pca, parallel_map, stream, trial_seed, Cell, IterateSample, Table, TrajectoryLog, TrajectoryRow};
use super::config::ExperimentConfig;
use crate::completion::{masked_gradient, relative_error, sample_mask, DiscrepantGdConfig, EndToEnd, ObservationMask};
use crate::compress::{
    build_compression_basis, compress, target_alignment, CompressionBasis, Prop1Bound,
};
use crate::dynamics::{check_invariance, rho_step};
use crate::error::Result;
use crate::linalg::{svd, truncate_rank, Matrix, RngSeed, NULLSPACE_REL_TOL};
use crate::model::{forward, generate_low_rank_target, relu_w2_gradient_spectrum, DeepFactorization, GdConfig};
use crate::train::{run_gd, train, GdModel, Progress, Stepper, Task};

fn target(cfg: &ExperimentConfig, seed: RngSeed) -> Result<Matrix> {
    Ok(generate_low_rank_target(cfg.d, cfg.r_star, seed.stream(stream::TARGET))?.phi)
}

fn mask(cfg: &ExperimentConfig, seed: RngSeed) -> Result<ObservationMask> {
    sample_mask(cfg.d, cfg.observed_fraction, seed.stream(stream::MASK))
}

fn rule(cfg: &ExperimentConfig, gamma: f64) -> Result<DiscrepantGdConfig> {
    DiscrepantGdConfig::new(
        GdConfig::new(cfg.eta, cfg.lambda, cfg.max_iters, cfg.loss_tol)?,
        gamma,
    )
}

fn full_width_init(cfg: &ExperimentConfig, seed: RngSeed) -> Result<DeepFactorization> {
    DeepFactorization::orthogonal(cfg.d, &vec![cfg.eps; cfg.depth()], seed.stream(stream::INIT))
}

/// Layer dimensions `d -> w -> ... -> w -> d`.
fn narrow_dims(d: usize, width: usize, depth: usize) -> Vec<usize> {
    let mut dims = vec![width; depth + 1];
    dims[0] = d;
    dims[depth] = d;
    dims
}

/// Compression subspaces for completion: the first-layer masked gradient at
/// init, truncated to rank `r` since the mask makes it full rank.
fn completion_basis(
    theta0: &DeepFactorization,
    phi: &Matrix,
    mask: &ObservationMask,
    r: usize,
) -> Result<CompressionBasis> {
    let g1 = masked_gradient(theta0, phi, mask)?.swap_remove(0);
    build_compression_basis(theta0, &truncate_rank(&g1, r)?, r, NULLSPACE_REL_TOL)
}

const TRAJECTORY_COLUMNS: [&str; 14] = [
    "trial",
    "seed",
    "model",
    "iteration",
    "wall_ms",
    "loss",
    "recovery_error",
    "prop1_gap_sq",
    "prop1_bound",
    "repeated_sigma",
    "rho_predicted",
    "max_drift_angle",
    "pca1",
    "pca2",
];

/// One model's run inside a trial, ready to be emitted.
struct LoggedRun {
    model: &'static str,
    log: TrajectoryLog,
    sample: IterateSample,
    prop1_bound: Option<f64>,
}

impl LoggedRun {
    fn new(model: &'static str, cfg: &ExperimentConfig, runs_in_trial: usize) -> Self {
        Self {
            model,
            log: TrajectoryLog::default(),
            sample: IterateSample::new(cfg.snapshot_stride, cfg.d, runs_in_trial),
            prop1_bound: None,
        }
    }

    /// Logs iterate `p` if it is on the stride or terminal; returns its
    /// end-to-end product when logged.
    fn observe<M: EndToEnd>(
        &mut self,
        cfg: &ExperimentConfig,
        rule: &DiscrepantGdConfig,
        phi: &Matrix,
        p: &Progress,
        model: &M,
    ) -> Result<Option<Matrix>> {
        let terminal = rule.base.stops_at(p.iteration, p.loss);
        if p.iteration % cfg.snapshot_stride != 0 && !terminal {
            return Ok(None);
        }
        let f = model.end_to_end();
        self.log
            .push(TrajectoryRow::new(p.iteration, p.wall_ms, p.loss, relative_error(&f, phi)))?;
        if terminal {
            self.sample.finish(p.iteration, || f.clone());
        } else {
            self.sample.offer(p.iteration, || f.clone());
        }
        Ok(Some(f))
    }
}

fn emit_trial(table: &mut Table, trial: usize, seed: RngSeed, runs: &[LoggedRun]) -> Result<()> {
    let samples: Vec<&IterateSample> = runs.iter().map(|r| &r.sample).collect();
    let coords = joint_pca(&samples)?;
    for (i, run) in runs.iter().enumerate() {
        let pca: HashMap<usize, [f64; 2]> = coords
            .as_ref()
            .map(|c| c[i].iter().copied().collect())
            .unwrap_or_default();
        for row in run.log.rows() {
            let pc = pca.get(&row.iteration);
            table.push(vec![
                trial.into(),
                seed.0.into(),
                run.model.into(),
                row.iteration.into(),
                row.wall_ms.into(),
                row.loss.into(),
                row.recovery_error.into(),
                row.prop1_gap_sq.into(),
                row.prop1_gap_sq.and(run.prop1_bound).into(),
                row.repeated_sigma.into(),
                row.rho_predicted.into(),
                row.max_drift_angle.into(),
                pc.map(|c| c[0]).into(),
                pc.map(|c| c[1]).into(),
            ])?;
        }
    }
    Ok(())
}

/// Final recovery error and iterations-to-tolerance over a depth x width
/// sweep of partially observed completion problems.
pub fn run_fig2(cfg: &ExperimentConfig) -> Result<Table> {
    let mut jobs = Vec::new();
    for &depth in &cfg.depths {
        for &width in &cfg.ranks {
            for trial in 0..cfg.trials {
                jobs.push((depth, width, trial));
            }
        }
    }
    let rows = parallel_map(jobs, |&(depth, width, trial)| {
        let seed = trial_seed(cfg, trial);
        let phi = target(cfg, seed)?;
        let mask = mask(cfg, seed)?;
        let mut theta = DeepFactorization::orthogonal_with_dims(
            &narrow_dims(cfg.d, width, depth),
            &vec![cfg.eps; depth],
            seed.stream(stream::INIT),
        )?;
        let summary = train(&mut theta, &Task::Completion { phi: &phi, mask: &mask }, &rule(cfg, 0.0)?)?;
        Ok(vec![
            depth.into(),
            width.into(),
            trial.into(),
            seed.0.into(),
            summary.iterations.into(),
            summary.converged.into(),
            summary.diverged.into(),
            summary.final_loss.into(),
            relative_error(&forward(&theta), &phi).into(),
            summary.wall_ms.into(),
        ])
    })?;
    let mut table = Table::new([
        "depth",
        "width",
        "trial",
        "seed",
        "iterations",
        "converged",
        "diverged",
        "final_loss",
        "final_recovery_error",
        "wall_ms",
    ]);
    for row in rows {
        table.push(row)?;
    }
    Ok(table)
}

/// Per-layer singular values and invariant-subspace diagnostics along a
/// full-width factorization run.
pub fn run_fig3(cfg: &ExperimentConfig) -> Result<Table> {
    let d = cfg.d;
    let mut columns: Vec<String> = [
        "trial",
        "seed",
        "iteration",
        "wall_ms",
        "layer",
        "loss",
        "repeated_sigma",
        "rho_predicted",
        "rho_rel_error",
        "repeated_spread",
        "right_drift",
        "left_drift",
        "off_diagonal",
    ]
    .map(String::from)
    .to_vec();
    for prefix in ["sigma", "right_angle", "left_angle"] {
        columns.extend((1..=d).map(|i| format!("{prefix}_{i}")));
    }
    let trials = parallel_map((0..cfg.trials).collect(), |&trial| {
        let seed = trial_seed(cfg, trial);
        let phi = target(cfg, seed)?;
        let mut theta = full_width_init(cfg, seed)?;
        let basis = build_compression_basis(&theta, &target_alignment(&theta, &phi), cfg.rank(), NULLSPACE_REL_TOL)?;
        let rule = rule(cfg, 0.0)?;
        let mut rho = theta.init_scales().to_vec();
        let mut rows = Vec::new();
        run_gd(&mut theta, &Task::Factorization { phi: &phi }, &rule, |p, model| {
            if p.iteration % cfg.snapshot_stride == 0 || rule.base.stops_at(p.iteration, p.loss) {
                let checks = check_invariance(model, &basis, &rho)?;
                for (l, check) in checks.iter().enumerate() {
                    let mut row: Vec<Cell> = vec![
                        trial.into(),
                        seed.0.into(),
                        p.iteration.into(),
                        p.wall_ms.into(),
                        (l + 1).into(),
                        p.loss.into(),
                        check.repeated_sigma.into(),
                        rho[l].into(),
                        check.rho_rel_error.into(),
                        check.spread.into(),
                        check.right_angle.into(),
                        check.left_angle.into(),
                        check.off_diagonal.into(),
                    ];
                    let dec = svd(model.layer(l))?;
                    row.extend(dec.singular_values.iter().map(|&s| Cell::from(s)));
                    let right = dec.vt.transpose();
                    row.extend(angles_to_span(&right, &basis.v_invariant(l)).into_iter().map(Cell::from));
                    row.extend(angles_to_span(&dec.u, &basis.u_invariant(l)).into_iter().map(Cell::from));
                    rows.push(row);
                }
            }
            rho = rho_step(&rho, rule.base.eta, rule.base.lambda);
            Ok(())
        })?;
        Ok(rows)
    })?;
    let mut table = Table::new(columns);
    for row in trials.into_iter().flatten() {
        table.push(row)?;
    }
    Ok(table)
}

/// Angle between each column of `vectors` and `span(basis)`.
fn angles_to_span(vectors: &Matrix, basis: &Matrix) -> Vec<f64> {
    let coeffs = basis.tr_mul(vectors);
    let residual = vectors - basis * &coeffs;
    (0..vectors.ncols())
        .map(|j| residual.column(j).norm().atan2(coeffs.column(j).norm()))
        .collect()
}

/// Full-width and compressed factorization run in lockstep, with the
/// end-to-end gap against its bound and a joint trajectory PCA.
pub fn run_fig4(cfg: &ExperimentConfig) -> Result<Table> {
    let trials = parallel_map((0..cfg.trials).collect(), |&trial| {
        let seed = trial_seed(cfg, trial);
        let phi = target(cfg, seed)?;
        let theta0 = full_width_init(cfg, seed)?;
        let basis = build_compression_basis(&theta0, &target_alignment(&theta0, &phi), cfg.rank(), NULLSPACE_REL_TOL)?;
        let bound = Prop1Bound::new(basis.m(), theta0.init_scales(), phi.norm_squared());
        let probe = basis.v_invariant(0).column(0).into_owned();
        let rule = rule(cfg, 0.0)?;
        let task = Task::Factorization { phi: &phi };

        let mut full = theta0.clone();
        let mut compressed = compress(&theta0, &basis)?;
        let mut full_run = LoggedRun::new("full", cfg, 2);
        let mut comp_run = LoggedRun::new("compressed", cfg, 2);
        comp_run.prop1_bound = Some(bound.bound);
        let mut full_steps = Stepper::new(&mut full, rule);
        let mut comp_steps = Stepper::new(&mut compressed, rule);
        let mut rho = theta0.init_scales().to_vec();
        while !(full_steps.is_done() && comp_steps.is_done()) {
            let mut full_e2e = None;
            full_steps.advance(&task, |p, model| {
                if let Some(f) = full_run.observe(cfg, &rule, &phi, p, model)? {
                    let row = full_run.log.last_mut().expect("just pushed");
                    row.repeated_sigma = Some((model.layer(0) * &probe).norm());
                    row.rho_predicted = Some(rho[0]);
                    let drift = check_invariance(model, &basis, &rho)?
                        .iter()
                        .map(|c| c.right_angle.max(c.left_angle))
                        .fold(0.0, f64::max);
                    row.max_drift_angle = Some(drift);
                    full_e2e = Some((p.iteration, f));
                }
                Ok(())
            })?;
            rho = rho_step(&rho, rule.base.eta, rule.base.lambda);
            comp_steps.advance(&task, |p, model| {
                if let Some(fc) = comp_run.observe(cfg, &rule, &phi, p, model)? {
                    if let Some((t, f)) = &full_e2e {
                        if *t == p.iteration {
                            let gap = bound.check(p.iteration, f, &fc);
                            comp_run.log.last_mut().expect("just pushed").prop1_gap_sq = Some(gap.gap_sq);
                        }
                    }
                }
                Ok(())
            })?;
        }
        let mut table = Table::new(TRAJECTORY_COLUMNS);
        emit_trial(&mut table, trial, seed, &[full_run, comp_run])?;
        Ok(table)
    })?;
    collect_tables(trials)
}

fn collect_tables(tables: Vec<Table>) -> Result<Table> {
    let mut out = Table::new(TRAJECTORY_COLUMNS);
    for t in tables {
        out.append(t)?;
    }
    Ok(out)
}

fn logged_run<M: GdModel>(
    name: &'static str,
    model: &mut M,
    cfg: &ExperimentConfig,
    phi: &Matrix,
    mask: &ObservationMask,
    rule: &DiscrepantGdConfig,
    runs_in_trial: usize,
) -> Result<LoggedRun> {
    let mut run = LoggedRun::new(name, cfg, runs_in_trial);
    run_gd(model, &Task::Completion { phi, mask }, rule, |p, m| {
        run.observe(cfg, rule, phi, p, m).map(|_| ())
    })?;
    Ok(run)
}

/// Completion with the full-width model, the compressed model with outer
/// factors at rate `γη`, and the compressed model with outer factors frozen.
pub fn run_fig5(cfg: &ExperimentConfig) -> Result<Table> {
    let trials = parallel_map((0..cfg.trials).collect(), |&trial| {
        let seed = trial_seed(cfg, trial);
        let phi = target(cfg, seed)?;
        let mask = mask(cfg, seed)?;
        let theta0 = full_width_init(cfg, seed)?;
        let basis = completion_basis(&theta0, &phi, &mask, cfg.rank())?;

        let mut full = theta0.clone();
        let full_run = logged_run("full", &mut full, cfg, &phi, &mask, &rule(cfg, 0.0)?, 3)?;
        let mut comp = compress(&theta0, &basis)?;
        let comp_run = logged_run("compressed", &mut comp, cfg, &phi, &mask, &rule(cfg, cfg.gamma)?, 3)?;
        let mut frozen = compress(&theta0, &basis)?;
        let frozen_run = logged_run("compressed-gamma0", &mut frozen, cfg, &phi, &mask, &rule(cfg, 0.0)?, 3)?;

        let mut table = Table::new(TRAJECTORY_COLUMNS);
        emit_trial(&mut table, trial, seed, &[full_run, comp_run, frozen_run])?;
        Ok(table)
    })?;
    collect_tables(trials)
}

/// Iterations and wall time to converge for the compressed wide model versus
/// a randomly initialized model of width `2r`, over a sweep of `r`.
pub fn run_fig7(cfg: &ExperimentConfig) -> Result<Table> {
    let mut jobs = Vec::new();
    for &r in &cfg.ranks {
        for trial in 0..cfg.trials {
            jobs.push((r, trial));
        }
    }
    let depth = cfg.depth();
    let rows = parallel_map(jobs, |&(r, trial)| {
        let seed = trial_seed(cfg, trial);
        let phi = target(cfg, seed)?;
        let mask = mask(cfg, seed)?;
        let task = Task::Completion { phi: &phi, mask: &mask };
        let theta0 = full_width_init(cfg, seed)?;
        let basis = completion_basis(&theta0, &phi, &mask, r)?;
        let mut comp = compress(&theta0, &basis)?;
        let comp_summary = train(&mut comp, &task, &rule(cfg, cfg.gamma)?)?;
        let comp_error = relative_error(&comp.end_to_end(), &phi);

        let mut narrow = DeepFactorization::orthogonal_with_dims(
            &narrow_dims(cfg.d, 2 * r, depth),
            &vec![cfg.eps; depth],
            seed.stream(stream::NARROW_INIT),
        )?;
        let narrow_summary = train(&mut narrow, &task, &rule(cfg, 0.0)?)?;
        let narrow_error = relative_error(&forward(&narrow), &phi);

        Ok([("compressed", comp_summary, comp_error), ("narrow", narrow_summary, narrow_error)]
            .into_iter()
            .map(|(method, s, err)| {
                vec![
                    r.into(),
                    trial.into(),
                    seed.0.into(),
                    method.into(),
                    s.iterations.into(),
                    s.converged.into(),
                    s.diverged.into(),
                    s.wall_ms.into(),
                    s.final_loss.into(),
                    err.into(),
                ]
            })
            .collect::<Vec<_>>())
    })?;
    let mut table = Table::new([
        "r",
        "trial",
        "seed",
        "method",
        "iterations",
        "converged",
        "diverged",
        "wall_ms",
        "final_loss",
        "final_recovery_error",
    ]);
    for row in rows.into_iter().flatten() {
        table.push(row)?;
    }
    Ok(table)
}

/// Spectrum of the middle-layer gradient of the ReLU factorization at init.
pub fn run_fig8(cfg: &ExperimentConfig) -> Result<Table> {
    let spectra = parallel_map((0..cfg.trials).collect(), |&trial| {
        let seed = trial_seed(cfg, trial);
        let phi = target(cfg, seed)?;
        let theta = full_width_init(cfg, seed)?;
        Ok((trial, seed, relu_w2_gradient_spectrum(&theta, &phi)?))
    })?;
    let mut table = Table::new(["trial", "seed", "index", "singular_value"]);
    for (trial, seed, spectrum) in spectra {
        for (i, s) in spectrum.into_iter().enumerate() {
            table.push(vec![trial.into(), seed.0.into(), (i + 1).into(), s.into()])?;
        }
    }
    Ok(table)
}
