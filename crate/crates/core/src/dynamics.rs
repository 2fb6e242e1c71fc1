//! Diagnostics for the gradient-descent trajectory: the scalar recurrence of
//! the repeated singular value, its decay bounds, per-layer SVD snapshots,
//! drift of the invariant subspaces and a 2-D PCA of end-to-end iterates.

use nalgebra::DVector;

use crate::compress::CompressionBasis;
use crate::error::{Error, Result};
use crate::linalg::{leading_columns, principal_angles, svd, trailing_columns, Matrix};
use crate::model::DeepFactorization;

/// `ρ_l(t)` for `t = 0..=T`, indexed `values[t][l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoTrace {
    pub init_scales: Vec<f64>,
    pub eta: f64,
    pub lambda: f64,
    values: Vec<Vec<f64>>,
}

impl RhoTrace {
    pub fn at(&self, t: usize) -> &[f64] {
        &self.values[t]
    }

    /// Number of recorded steps `T` (there are `T + 1` values per layer).
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn layer(&self, l: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(move |row| row[l])
    }
}

/// One step of the repeated-singular-value recurrence.
pub fn rho_step(prev: &[f64], eta: f64, lambda: f64) -> Vec<f64> {
    (0..prev.len())
        .map(|l| {
            let others: f64 = prev
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != l)
                .map(|(_, r)| r * r)
                .product();
            prev[l] * (1.0 - eta * lambda - eta * others)
        })
        .collect()
}

/// Iterates `ρ_l(t) = ρ_l(t-1) (1 - ηλ - η ∏_{k≠l} ρ_k(t-1)²)` from `ρ_l(0) = ε_l`.
pub fn rho_recurrence(init_scales: &[f64], eta: f64, lambda: f64, t_max: usize) -> Result<RhoTrace> {
    if init_scales.is_empty() || init_scales.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::InvalidArgument(
            "init scales must be non-empty and positive".into(),
        ));
    }
    let mut values = Vec::with_capacity(t_max + 1);
    values.push(init_scales.to_vec());
    for _ in 0..t_max {
        let next = rho_step(values.last().unwrap(), eta, lambda);
        values.push(next);
    }
    Ok(RhoTrace {
        init_scales: init_scales.to_vec(),
        eta,
        lambda,
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhoBoundReport {
    pub steps: usize,
    pub violations: usize,
    /// Most negative `ρ(t) - lower(t)` (positive when every step passes).
    pub lower_margin: f64,
    /// Most negative `upper(t) - ρ(t)`.
    pub upper_margin: f64,
    pub final_rho: f64,
    pub final_upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RhoBoundCheck {
    HypothesesUnmet(String),
    Checked(RhoBoundReport),
}

const RHO_SLACK: f64 = 1e-12;

/// Checks `ε (1 - η(λ + ε))^t ≤ ρ(t) ≤ ε (1 - ηλ)^t` at every step.
///
/// Only meaningful for equal scales `ε ≤ 1`, depth at least 2 and
/// `η ≤ 1 / (λ + ε)`; otherwise the hypotheses are reported as unmet.
pub fn check_rho_bounds(trace: &RhoTrace) -> RhoBoundCheck {
    let eps = trace.init_scales[0];
    let (eta, lambda) = (trace.eta, trace.lambda);
    if trace.init_scales.iter().any(|&e| e != eps) {
        return RhoBoundCheck::HypothesesUnmet("init scales differ across layers".into());
    }
    if trace.init_scales.len() < 2 {
        return RhoBoundCheck::HypothesesUnmet("depth must be at least 2".into());
    }
    if eps > 1.0 {
        return RhoBoundCheck::HypothesesUnmet(format!("epsilon {eps} exceeds 1"));
    }
    if eta > 1.0 / (lambda + eps) {
        return RhoBoundCheck::HypothesesUnmet(format!(
            "eta {eta} exceeds 1/(lambda + epsilon) = {}",
            1.0 / (lambda + eps)
        ));
    }
    let lower_rate = 1.0 - eta * (lambda + eps);
    let upper_rate = 1.0 - eta * lambda;
    let mut report = RhoBoundReport {
        steps: trace.steps(),
        violations: 0,
        lower_margin: f64::INFINITY,
        upper_margin: f64::INFINITY,
        final_rho: 0.0,
        final_upper: 0.0,
    };
    let (mut lower, mut upper) = (eps, eps);
    for (t, row) in trace.values.iter().enumerate() {
        if t > 0 {
            lower *= lower_rate;
            upper *= upper_rate;
        }
        for &rho in row {
            let lo = rho - lower;
            let hi = upper - rho;
            report.lower_margin = report.lower_margin.min(lo);
            report.upper_margin = report.upper_margin.min(hi);
            if lo < -RHO_SLACK || hi < -RHO_SLACK {
                report.violations += 1;
            }
        }
        report.final_rho = row[0];
        report.final_upper = upper;
    }
    RhoBoundCheck::Checked(report)
}

/// Singular values of one layer plus its leading and trailing singular subspaces.
#[derive(Debug, Clone)]
pub struct LayerSpectrum {
    pub singular_values: Vec<f64>,
    pub top_left: Matrix,
    pub top_right: Matrix,
    pub bottom_left: Matrix,
    pub bottom_right: Matrix,
}

impl LayerSpectrum {
    /// `max - min` of the `m` smallest singular values.
    pub fn bottom_spread(&self, m: usize) -> f64 {
        let tail = &self.singular_values[self.singular_values.len() - m..];
        let hi = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = tail.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    }

    pub fn bottom_mean(&self, m: usize) -> f64 {
        let tail = &self.singular_values[self.singular_values.len() - m..];
        tail.iter().sum::<f64>() / m as f64
    }
}

#[derive(Debug, Clone)]
pub struct SpectralSnapshot {
    pub iteration: usize,
    pub wall_ms: f64,
    pub layers: Vec<LayerSpectrum>,
}

/// Full SVD of every layer, keeping `top_k` leading and `bottom_k` trailing
/// singular vectors on each side.
pub fn spectral_snapshot(
    theta: &DeepFactorization,
    iteration: usize,
    wall_ms: f64,
    top_k: usize,
    bottom_k: usize,
) -> Result<SpectralSnapshot> {
    let layers = theta
        .layers()
        .iter()
        .map(|w| {
            if w.nrows() != w.ncols() {
                return Err(Error::InvalidArgument(
                    "spectral snapshots need square layers".into(),
                ));
            }
            let dec = svd(w)?;
            let v = dec.vt.transpose();
            let n = w.nrows();
            Ok(LayerSpectrum {
                singular_values: dec.singular_values.iter().copied().collect(),
                top_left: leading_columns(&dec.u, top_k.min(n)),
                top_right: leading_columns(&v, top_k.min(n)),
                bottom_left: trailing_columns(&dec.u, bottom_k.min(n)),
                bottom_right: trailing_columns(&v, bottom_k.min(n)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectralSnapshot {
        iteration,
        wall_ms,
        layers,
    })
}

/// Training hook that snapshots every `stride` iterations.
#[derive(Debug, Clone)]
pub struct SpectralRecorder {
    pub stride: usize,
    pub top_k: usize,
    pub bottom_k: usize,
    pub snapshots: Vec<SpectralSnapshot>,
}

impl SpectralRecorder {
    pub fn new(stride: usize, top_k: usize, bottom_k: usize) -> Self {
        Self {
            stride: stride.max(1),
            top_k,
            bottom_k,
            snapshots: Vec::new(),
        }
    }

    pub fn observe(&mut self, iteration: usize, theta: &DeepFactorization, wall_ms: f64) -> Result<()> {
        if iteration % self.stride == 0 {
            self.snapshots.push(spectral_snapshot(
                theta,
                iteration,
                wall_ms,
                self.top_k,
                self.bottom_k,
            )?);
        }
        Ok(())
    }
}

/// Principal-angle drift of one layer's trailing singular subspaces from the
/// invariant subspaces. `None` marks a snapshot whose trailing block cannot be
/// separated from the rest of the spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerDrift {
    pub right: Option<f64>,
    pub left: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftRow {
    pub iteration: usize,
    pub layers: Vec<LayerDrift>,
}

impl DriftRow {
    /// Largest angle over layers and sides; `None` if any is indeterminate.
    pub fn max_angle(&self) -> Option<f64> {
        self.layers.iter().try_fold(0.0_f64, |acc, l| {
            Some(acc.max(l.right?).max(l.left?))
        })
    }
}

const MULTIPLICITY_GAP: f64 = 1e-9;

/// Angles between the span of each layer's `m` smallest singular vectors and
/// `span(V_{l,2})` (right) / `span(U_{l,2})` (left).
pub fn invariant_subspace_drift(
    snapshots: &[SpectralSnapshot],
    basis: &CompressionBasis,
) -> Result<Vec<DriftRow>> {
    let m = basis.m();
    snapshots
        .iter()
        .map(|snap| {
            let layers = snap
                .layers
                .iter()
                .enumerate()
                .map(|(l, spec)| {
                    if spec.bottom_right.ncols() != m {
                        return Err(Error::InvalidArgument(format!(
                            "snapshot keeps {} trailing vectors, basis has m = {m}",
                            spec.bottom_right.ncols()
                        )));
                    }
                    let s = &spec.singular_values;
                    let split = s.len() - m;
                    if split > 0 && s[split - 1] - s[split] < MULTIPLICITY_GAP {
                        return Ok(LayerDrift {
                            right: None,
                            left: None,
                        });
                    }
                    let max = |a: Vec<f64>| a.into_iter().fold(0.0_f64, f64::max);
                    Ok(LayerDrift {
                        right: Some(max(principal_angles(
                            &spec.bottom_right,
                            &basis.v_invariant(l),
                        )?)),
                        left: Some(max(principal_angles(
                            &spec.bottom_left,
                            &basis.u_invariant(l),
                        )?)),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DriftRow {
                iteration: snap.iteration,
                layers,
            })
        })
        .collect()
}

/// Tightest run of `m` consecutive values in a descending spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatedBlock {
    pub window_start: usize,
    pub spread: f64,
    pub mean: f64,
    /// All indices tied with the window. Directions outside the invariant
    /// subspace can share the repeated value (at large init scale the unused
    /// half of the active block decays exactly like it), so this may be
    /// wider than `m`.
    pub cluster: std::ops::Range<usize>,
}

/// Finds the repeated block of size `m` by value rather than by position.
/// Neighbours within `tie_tol` of the window edges join the cluster.
pub fn locate_repeated_block(s: &[f64], m: usize, tie_tol: f64) -> Option<RepeatedBlock> {
    if m == 0 || m > s.len() {
        return None;
    }
    let (window_start, spread) = (0..=s.len() - m)
        .map(|i| (i, s[i] - s[i + m - 1]))
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    let mut lo = window_start;
    let mut hi = window_start + m;
    while lo > 0 && s[lo - 1] - s[lo] <= tie_tol {
        lo -= 1;
    }
    while hi < s.len() && s[hi - 1] - s[hi] <= tie_tol {
        hi += 1;
    }
    let mean = s[window_start..window_start + m].iter().sum::<f64>() / m as f64;
    Some(RepeatedBlock {
        window_start,
        spread,
        mean,
        cluster: lo..hi,
    })
}

/// One layer's agreement with the invariant-subspace picture at a given
/// iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerInvariance {
    /// Spread of the tightest `m` singular values.
    pub spread: f64,
    pub repeated_sigma: f64,
    /// `|repeated_sigma - ρ_l| / ρ_l`.
    pub rho_rel_error: f64,
    /// Largest angle between `span(V_{l,2})` and the right singular subspace
    /// of the repeated cluster; `left` likewise for `U_{l,2}`.
    pub right_angle: f64,
    pub left_angle: f64,
    pub off_diagonal: f64,
}

const TIE_REL: f64 = 1e-9;

/// Measures every layer against the repeated value `rho[l]` and the
/// invariant subspaces of `basis`.
pub fn check_invariance(
    theta: &DeepFactorization,
    basis: &CompressionBasis,
    rho: &[f64],
) -> Result<Vec<LayerInvariance>> {
    if rho.len() != theta.depth() || basis.depth() != theta.depth() {
        return Err(Error::InvalidArgument(format!(
            "depth mismatch: model {}, basis {}, rho {}",
            theta.depth(),
            basis.depth(),
            rho.len()
        )));
    }
    let m = basis.m();
    theta
        .layers()
        .iter()
        .enumerate()
        .map(|(l, w)| {
            let dec = svd(w)?;
            let s: Vec<f64> = dec.singular_values.iter().copied().collect();
            let tie = TIE_REL * s.first().copied().unwrap_or(0.0);
            let block = locate_repeated_block(&s, m, tie).ok_or_else(|| {
                Error::InvalidArgument(format!("layer {l} has fewer than m = {m} singular values"))
            })?;
            let range = block.cluster.clone();
            let right = dec.vt.rows(range.start, range.len()).transpose();
            let left = dec.u.columns(range.start, range.len()).into_owned();
            let max = |a: Vec<f64>| a.into_iter().fold(0.0_f64, f64::max);
            Ok(LayerInvariance {
                spread: block.spread,
                repeated_sigma: block.mean,
                rho_rel_error: (block.mean - rho[l]).abs() / rho[l].abs().max(f64::MIN_POSITIVE),
                right_angle: max(principal_angles(&basis.v_invariant(l), &right)?),
                left_angle: max(principal_angles(&basis.u_invariant(l), &left)?),
                off_diagonal: basis.off_diagonal_max(l, w),
            })
        })
        .collect()
}

/// Largest principal angle, over layers, between each snapshot's leading
/// right singular subspace and that of the final snapshot.
pub fn top_subspace_alignment(snapshots: &[SpectralSnapshot]) -> Result<Vec<(usize, f64)>> {
    let Some(last) = snapshots.last() else {
        return Ok(Vec::new());
    };
    snapshots
        .iter()
        .map(|snap| {
            let mut worst = 0.0_f64;
            for (a, b) in snap.layers.iter().zip(&last.layers) {
                for angle in principal_angles(&a.top_right, &b.top_right)? {
                    worst = worst.max(angle);
                }
            }
            Ok((snap.iteration, worst))
        })
        .collect()
}

/// Two leading principal directions of a set of flattened iterates, centered
/// at their mean.
#[derive(Debug, Clone)]
pub struct TrajectoryPca {
    mean: DVector<f64>,
    axes: [DVector<f64>; 2],
}

impl TrajectoryPca {
    pub fn fit(iterates: &[Matrix]) -> Result<Self> {
        if iterates.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "trajectory PCA needs at least 2 iterates, got {}",
                iterates.len()
            )));
        }
        let n = iterates[0].len();
        if iterates.iter().any(|x| x.len() != n) {
            return Err(Error::InvalidArgument(
                "trajectory iterates differ in size".into(),
            ));
        }
        let count = iterates.len();
        let mut mean = DVector::zeros(n);
        for x in iterates {
            mean += DVector::from_column_slice(x.as_slice());
        }
        mean /= count as f64;
        let centered: Vec<DVector<f64>> = iterates
            .iter()
            .map(|x| DVector::from_column_slice(x.as_slice()) - &mean)
            .collect();
        // Gram matrix of the centered iterates; its eigenvectors give the
        // principal coordinates without forming an n x n covariance.
        let gram = Matrix::from_fn(count, count, |i, j| centered[i].dot(&centered[j]));
        let dec = svd(&gram)?;
        // Variance below rounding of the raw iterates counts as none.
        let scale = iterates
            .iter()
            .map(|x| x.norm_squared())
            .fold(f64::MIN_POSITIVE, f64::max);
        let axis = |k: usize| -> DVector<f64> {
            let lambda = dec.singular_values.get(k).copied().unwrap_or(0.0);
            if lambda <= 1e-14 * scale {
                return DVector::zeros(n);
            }
            let mut a = DVector::zeros(n);
            for (i, c) in centered.iter().enumerate() {
                a.axpy(dec.u[(i, k)], c, 1.0);
            }
            a / lambda.sqrt()
        };
        Ok(Self {
            axes: [axis(0), axis(1)],
            mean,
        })
    }

    pub fn project(&self, x: &Matrix) -> [f64; 2] {
        let c = DVector::from_column_slice(x.as_slice()) - &self.mean;
        [self.axes[0].dot(&c), self.axes[1].dot(&c)]
    }
}

pub fn trajectory_pca(iterates: &[Matrix]) -> Result<Vec<[f64; 2]>> {
    let pca = TrajectoryPca::fit(iterates)?;
    Ok(iterates.iter().map(|x| pca.project(x)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{build_compression_basis, target_alignment};
    use crate::linalg::{gaussian_matrix, RngSeed};
    use crate::model::generate_low_rank_target;

    #[test]
    fn rho_initial_and_hand_step() {
        let trace = rho_recurrence(&[0.5, 0.5, 0.5], 0.1, 0.1, 1).unwrap();
        assert_eq!(trace.at(0), &[0.5, 0.5, 0.5]);
        // Two other layers contribute 0.25 * 0.25.
        let expect = 0.5 * (1.0 - 0.01 - 0.1 * 0.0625);
        assert!((trace.at(1)[0] - expect).abs() < 1e-15);
        assert!(rho_recurrence(&[0.5, 0.0], 0.1, 0.0, 1).is_err());
    }

    #[test]
    fn rho_depth_two_hand_step() {
        let trace = rho_recurrence(&[0.5, 0.5], 0.1, 0.1, 1).unwrap();
        assert!((trace.at(1)[0] - 0.4825).abs() < 1e-15);
    }

    #[test]
    fn rho_decreases_without_decay() {
        let trace = rho_recurrence(&[0.3; 3], 0.05, 0.0, 500).unwrap();
        let vals: Vec<f64> = trace.layer(0).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
    }

    #[test]
    fn rho_bounds_hold_and_decay() {
        let trace = rho_recurrence(&[0.1; 3], 1.0, 0.5, 1000).unwrap();
        let RhoBoundCheck::Checked(report) = check_rho_bounds(&trace) else {
            panic!("hypotheses should hold");
        };
        assert_eq!(report.violations, 0);
        assert!(report.final_rho <= 0.1 * 0.5_f64.powi(1000) + 1e-300);

        let trace = rho_recurrence(&[0.4; 2], 0.5, 0.0, 200).unwrap();
        let RhoBoundCheck::Checked(report) = check_rho_bounds(&trace) else {
            panic!();
        };
        assert_eq!(report.final_upper, 0.4);
        assert!(trace.layer(0).all(|r| r <= 0.4));
    }

    #[test]
    fn rho_bounds_report_unmet_hypotheses() {
        let cases = [
            rho_recurrence(&[0.1, 0.2], 0.1, 0.0, 5).unwrap(),
            rho_recurrence(&[1.5, 1.5], 0.1, 0.0, 5).unwrap(),
            rho_recurrence(&[0.5, 0.5], 2.5, 0.0, 5).unwrap(),
            rho_recurrence(&[0.5], 0.1, 0.0, 5).unwrap(),
        ];
        for trace in &cases {
            assert!(matches!(check_rho_bounds(trace), RhoBoundCheck::HypothesesUnmet(_)));
        }
    }

    #[test]
    fn snapshot_at_init_is_flat() {
        let theta = DeepFactorization::orthogonal(8, &[0.3, 0.6], RngSeed(1)).unwrap();
        let snap = spectral_snapshot(&theta, 0, 0.0, 2, 4).unwrap();
        for (spec, eps) in snap.layers.iter().zip([0.3, 0.6]) {
            assert!(spec.singular_values.iter().all(|s| (s - eps).abs() < 1e-12));
            assert!(spec.bottom_spread(4) < 1e-12);
        }
    }

    #[test]
    fn recorder_respects_stride() {
        let theta = DeepFactorization::orthogonal(4, &[1.0, 1.0], RngSeed(2)).unwrap();
        let mut rec = SpectralRecorder::new(3, 1, 1);
        for t in 0..10 {
            rec.observe(t, &theta, 0.0).unwrap();
        }
        let its: Vec<usize> = rec.snapshots.iter().map(|s| s.iteration).collect();
        assert_eq!(its, vec![0, 3, 6, 9]);
    }

    #[test]
    fn drift_is_zero_at_init_and_flags_degenerate_spectra() {
        let theta = DeepFactorization::orthogonal(12, &[0.5; 3], RngSeed(3)).unwrap();
        let phi = generate_low_rank_target(12, 2, RngSeed(4)).unwrap().phi;
        let basis = build_compression_basis(&theta, &target_alignment(&theta, &phi), 2, 1e-6).unwrap();
        // All singular values coincide at init, so the split is ambiguous.
        let snap = spectral_snapshot(&theta, 0, 0.0, 4, basis.m()).unwrap();
        let rows = invariant_subspace_drift(&[snap], &basis).unwrap();
        assert_eq!(rows[0].max_angle(), None);

        // Perturb only the active block: the trailing subspace is then exactly
        // the invariant one.
        let mut layers = theta.layers().to_vec();
        for (l, w) in layers.iter_mut().enumerate() {
            let ua = basis.u_active(l);
            let va = basis.v_active(l);
            *w += &ua * Matrix::identity(4, 4) * 2.0 * va.transpose();
        }
        let bumped = DeepFactorization::from_layers(layers, vec![0.5; 3]).unwrap();
        let snap = spectral_snapshot(&bumped, 1, 0.0, 4, basis.m()).unwrap();
        let rows = invariant_subspace_drift(&[snap], &basis).unwrap();
        assert!(rows[0].max_angle().unwrap() < 1e-8);
    }

    #[test]
    fn pca_small_cases() {
        let a = gaussian_matrix(3, 3, &mut RngSeed(5).rng());
        let coords = trajectory_pca(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(coords.iter().all(|c| c[0] == 0.0 && c[1] == 0.0));

        let b = gaussian_matrix(3, 3, &mut RngSeed(6).rng());
        let coords = trajectory_pca(&[a.clone(), b.clone()]).unwrap();
        let half = (&a - &b).norm() / 2.0;
        assert!((coords[0][0] + coords[1][0]).abs() < 1e-12);
        assert!((coords[0][0].abs() - half).abs() < 1e-12, "{coords:?} {half}");
        assert!(coords[0][1].abs() < 1e-12);

        assert!(trajectory_pca(&[a]).is_err());
    }
}
