//! Compression of a wide deep factorization onto its non-invariant block.
//!
//! From a scaled orthogonal initialization `Θ(0)` and the first-layer
//! gradient (or its signal part) we find `m = d - 2r` directions that gradient
//! descent never moves, build orthogonal `U_l`, `V_l` with `V_{l+1} = U_l`, and
//! train only the `2r x 2r` inner factors `W̃_l` between fixed outer factors
//! `U_{L,1}` and `V_{1,1}`.

use crate::error::{shape_of, Error, Result};
use crate::linalg::{
    complete_to_basis, intersect_subspaces, leading_columns, nullspace_basis, orthonormality_defect,
    trailing_columns, Matrix,
};
use crate::model::{gradients_from_residual, prefix_products, DeepFactorization};

/// Orthogonal `U_1..U_L`, `V_1..V_L`. The first `2r` columns of each form the
/// trainable block, the last `m` the invariant one.
#[derive(Debug, Clone)]
pub struct CompressionBasis {
    u_list: Vec<Matrix>,
    v_list: Vec<Matrix>,
    width_2r: usize,
    m: usize,
}

impl CompressionBasis {
    pub fn u(&self, l: usize) -> &Matrix {
        &self.u_list[l]
    }

    pub fn v(&self, l: usize) -> &Matrix {
        &self.v_list[l]
    }

    pub fn depth(&self) -> usize {
        self.u_list.len()
    }

    pub fn width_2r(&self) -> usize {
        self.width_2r
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// `U_{l,1}` (d x 2r).
    pub fn u_active(&self, l: usize) -> Matrix {
        leading_columns(&self.u_list[l], self.width_2r)
    }

    /// `V_{l,1}` (d x 2r).
    pub fn v_active(&self, l: usize) -> Matrix {
        leading_columns(&self.v_list[l], self.width_2r)
    }

    /// `U_{l,2}` (d x m).
    pub fn u_invariant(&self, l: usize) -> Matrix {
        trailing_columns(&self.u_list[l], self.m)
    }

    /// `V_{l,2}` (d x m).
    pub fn v_invariant(&self, l: usize) -> Matrix {
        trailing_columns(&self.v_list[l], self.m)
    }

    /// Largest off-diagonal block entry of `U_l^T W V_l`:
    /// `max(‖U_{l,1}^T W V_{l,2}‖_max, ‖U_{l,2}^T W V_{l,1}‖_max)`.
    pub fn off_diagonal_max(&self, l: usize, w: &Matrix) -> f64 {
        let rotated = self.u_list[l].transpose() * w * &self.v_list[l];
        let k = self.width_2r;
        let upper = rotated.view((0, k), (k, self.m)).amax();
        let lower = rotated.view((k, 0), (self.m, k)).amax();
        upper.max(lower)
    }
}

/// `W_{L:2}(0)^T Φ`, the init-independent part of the first-layer gradient
/// (up to sign). Its nullspaces give the invariant directions exactly for any
/// init scale, while the full gradient only approximates them as `ε -> 0`.
pub fn target_alignment(theta0: &DeepFactorization, phi: &Matrix) -> Matrix {
    theta0.product_of(1..theta0.depth()).transpose() * phi
}

/// Builds `U_l`, `V_l` from the initial weights and first-layer gradient `g1`.
///
/// The invariant directions are `S = N(g1) ∩ N(g1^T W_1(0))`, each nullspace
/// thresholded at `rel_tol` relative to its largest singular value. When `S`
/// has more than `m` dimensions the first `m` (most aligned) are kept.
pub fn build_compression_basis(
    theta0: &DeepFactorization,
    g1: &Matrix,
    r: usize,
    rel_tol: f64,
) -> Result<CompressionBasis> {
    let d = theta0.input_dim();
    if theta0.layers().iter().any(|w| w.shape() != (d, d)) {
        return Err(Error::InvalidArgument(
            "compression requires square d x d layers".into(),
        ));
    }
    if g1.shape() != (d, d) {
        return Err(Error::DimensionMismatch {
            op: "build_compression_basis",
            expected: format!("{d}x{d}"),
            actual: shape_of(g1),
        });
    }
    if r == 0 || 2 * r >= d {
        return Err(Error::InvalidArgument(format!(
            "need 0 < 2r < d (got r={r}, d={d})"
        )));
    }
    let width_2r = 2 * r;
    let m = d - width_2r;

    let w1 = theta0.layer(0);
    let left = nullspace_basis(g1, rel_tol)?;
    let right = nullspace_basis(&(g1.transpose() * w1), rel_tol)?;
    let s = intersect_subspaces(&left, &right, rel_tol)?;
    if s.ncols() < m {
        return Err(Error::InsufficientInvariantSubspace {
            achieved: s.ncols(),
            required: m,
        });
    }
    let s = leading_columns(&s, m);

    let mut v_list = Vec::with_capacity(theta0.depth());
    let mut u_list = Vec::with_capacity(theta0.depth());
    let mut v = complete_to_basis(&s)?;
    for (w, &eps) in theta0.layers().iter().zip(theta0.init_scales()) {
        let u = w * &v / eps;
        v_list.push(v);
        v = u.clone();
        u_list.push(u);
    }
    Ok(CompressionBasis {
        u_list,
        v_list,
        width_2r,
        m,
    })
}

/// `f_C = U_{L,1} W̃_L ⋯ W̃_1 V_{1,1}^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedFactorization {
    pub outer_u: Matrix,
    pub outer_v: Matrix,
    pub inner: DeepFactorization,
}

impl CompressedFactorization {
    pub fn new(outer_u: Matrix, outer_v: Matrix, inner: DeepFactorization) -> Result<Self> {
        let k_out = inner.output_dim();
        let k_in = inner.input_dim();
        if outer_u.ncols() != k_out || outer_v.ncols() != k_in {
            return Err(Error::DimensionMismatch {
                op: "CompressedFactorization",
                expected: format!("outer factors with {k_out} and {k_in} columns"),
                actual: format!("{} and {}", shape_of(&outer_u), shape_of(&outer_v)),
            });
        }
        Ok(Self {
            outer_u,
            outer_v,
            inner,
        })
    }

    pub fn depth(&self) -> usize {
        self.inner.depth()
    }

    pub fn parameter_count(&self) -> usize {
        self.inner.parameter_count() + self.outer_u.len() + self.outer_v.len()
    }

    /// `U_{L,1}^T Φ V_{1,1}`.
    pub fn project_target(&self, phi: &Matrix) -> Matrix {
        self.outer_u.tr_mul(phi) * &self.outer_v
    }

    /// Worst orthonormality defect of the two outer factors.
    pub fn outer_orthonormality_defect(&self) -> f64 {
        orthonormality_defect(&self.outer_u).max(orthonormality_defect(&self.outer_v))
    }
}

/// Inner layers `W̃_l(0) = U_{l,1}^T W_l(0) V_{l,1}` between `U_{L,1}` and `V_{1,1}`.
pub fn compress(theta0: &DeepFactorization, basis: &CompressionBasis) -> Result<CompressedFactorization> {
    if basis.depth() != theta0.depth() {
        return Err(Error::InvalidArgument(format!(
            "basis depth {} does not match factorization depth {}",
            basis.depth(),
            theta0.depth()
        )));
    }
    let inner_layers = theta0
        .layers()
        .iter()
        .enumerate()
        .map(|(l, w)| basis.u_active(l).tr_mul(w) * basis.v_active(l))
        .collect();
    let inner = DeepFactorization::from_layers(inner_layers, theta0.init_scales().to_vec())?;
    CompressedFactorization::new(
        basis.u_active(theta0.depth() - 1),
        basis.v_active(0),
        inner,
    )
}

pub fn compressed_forward(cf: &CompressedFactorization) -> Matrix {
    let core = crate::model::forward(&cf.inner);
    &cf.outer_u * core * cf.outer_v.transpose()
}

pub fn compressed_l2_loss(cf: &CompressedFactorization, phi: &Matrix) -> Result<f64> {
    check_compressed_target(cf, phi)?;
    Ok(0.5 * (compressed_forward(cf) - phi).norm_squared())
}

fn check_compressed_target(cf: &CompressedFactorization, phi: &Matrix) -> Result<()> {
    let shape = (cf.outer_u.nrows(), cf.outer_v.nrows());
    if phi.shape() != shape {
        return Err(Error::DimensionMismatch {
            op: "compressed loss",
            expected: format!("{}x{}", shape.0, shape.1),
            actual: shape_of(phi),
        });
    }
    Ok(())
}

/// Inner-layer gradients of the compressed loss against a precomputed
/// projected target `U_{L,1}^T Φ V_{1,1}`:
/// `W̃_{L:l+1}^T (W̃_{L:1} - U^T Φ V) W̃_{l-1:1}^T`.
pub fn compressed_l2_gradient_projected(cf: &CompressedFactorization, projected: &Matrix) -> Vec<Matrix> {
    let layers = cf.inner.layers();
    let prefixes = prefix_products(layers);
    let residual = &prefixes[layers.len() - 1] - projected;
    gradients_from_residual(layers, &prefixes, &residual)
}

pub fn compressed_l2_gradient(cf: &CompressedFactorization, phi: &Matrix) -> Result<Vec<Matrix>> {
    check_compressed_target(cf, phi)?;
    Ok(compressed_l2_gradient_projected(cf, &cf.project_target(phi)))
}

/// One row of a trajectory-equivalence check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop1Row {
    pub iteration: usize,
    pub gap_sq: f64,
    pub bound: f64,
    pub violated: bool,
}

/// The per-iterate bound `‖f(Θ(t)) - f_C(Θ̃(t))‖_F² ≤ m ∏ ε_l²` with slack
/// `bound·1e-6 + 1e-12·‖Φ‖_F²` for floating-point drift.
#[derive(Debug, Clone, Copy)]
pub struct Prop1Bound {
    pub bound: f64,
    pub slack: f64,
}

impl Prop1Bound {
    pub fn new(m: usize, init_scales: &[f64], phi_norm_sq: f64) -> Self {
        let bound = m as f64 * init_scales.iter().map(|e| e * e).product::<f64>();
        Self {
            bound,
            slack: bound * 1e-6 + 1e-12 * phi_norm_sq,
        }
    }

    pub fn check(&self, iteration: usize, full: &Matrix, compressed: &Matrix) -> Prop1Row {
        let gap_sq = (full - compressed).norm_squared();
        Prop1Row {
            iteration,
            gap_sq,
            bound: self.bound,
            violated: gap_sq > self.bound + self.slack,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prop1Report {
    pub rows: Vec<Prop1Row>,
}

impl Prop1Report {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.violated).count()
    }

    pub fn max_gap_sq(&self) -> f64 {
        self.rows.iter().map(|r| r.gap_sq).fold(0.0, f64::max)
    }
}

/// Compares end-to-end products of synchronized full and compressed runs.
pub fn verify_prop1(
    full: &[Matrix],
    compressed: &[Matrix],
    init_scales: &[f64],
    m: usize,
    phi: &Matrix,
) -> Result<Prop1Report> {
    if full.len() != compressed.len() {
        return Err(Error::TrajectoryLengthMismatch {
            full: full.len(),
            compressed: compressed.len(),
        });
    }
    let check = Prop1Bound::new(m, init_scales, phi.norm_squared());
    let rows = full
        .iter()
        .zip(compressed)
        .enumerate()
        .map(|(t, (f, c))| check.check(t, f, c))
        .collect();
    Ok(Prop1Report { rows })
}
