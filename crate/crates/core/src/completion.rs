//! Matrix completion: entrywise observation masks, the masked loss and its
//! gradients, and compressed training with a discrepant outer-factor rate.

use rand::seq::index::sample;

use crate::compress::{compressed_forward, CompressedFactorization};
use crate::error::{shape_of, Error, Result};
use crate::linalg::{Matrix, RngSeed};
use crate::model::{
    check_target, forward, gradients_from_residual, prefix_products, DeepFactorization, GdConfig,
};

/// 0/1 mask `Ω` with exactly `round(fraction · rows · cols)` observed entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMask {
    mask: Matrix,
    observed_fraction: f64,
    seed: RngSeed,
}

impl ObservationMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            mask: Matrix::from_element(rows, cols, 1.0),
            observed_fraction: 1.0,
            seed: RngSeed(0),
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.mask
    }

    pub fn observed_fraction(&self) -> f64 {
        self.observed_fraction
    }

    pub fn seed(&self) -> RngSeed {
        self.seed
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&x| x != 0.0).count()
    }

    /// `Ω ⊙ a`.
    pub fn apply(&self, a: &Matrix) -> Matrix {
        a.component_mul(&self.mask)
    }

    fn check_shape(&self, op: &'static str, a: &Matrix) -> Result<()> {
        if a.shape() != self.mask.shape() {
            return Err(Error::DimensionMismatch {
                op,
                expected: shape_of(&self.mask),
                actual: shape_of(a),
            });
        }
        Ok(())
    }
}

/// Uniform sample of entry positions without replacement.
pub fn sample_mask(d: usize, fraction: f64, seed: RngSeed) -> Result<ObservationMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "observed fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let total = d * d;
    let count = (fraction * total as f64).round() as usize;
    if count == 0 {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} of a {d}x{d} matrix observes no entries"
        )));
    }
    let mut mask = Matrix::zeros(d, d);
    let mut rng = seed.rng();
    for idx in sample(&mut rng, total, count) {
        mask[idx] = 1.0;
    }
    Ok(ObservationMask {
        mask,
        observed_fraction: fraction,
        seed,
    })
}

/// `½‖Ω ⊙ (f(Θ) - Φ)‖_F²`.
pub fn masked_loss(theta: &DeepFactorization, phi: &Matrix, mask: &ObservationMask) -> Result<f64> {
    check_target("masked_loss", theta, phi)?;
    mask.check_shape("masked_loss", phi)?;
    Ok(0.5 * mask.apply(&(forward(theta) - phi)).norm_squared())
}

/// Masked loss and per-layer gradients `W_{L:l+1}^T (Ω ⊙ E) W_{l-1:1}^T`.
pub fn masked_loss_and_gradient(
    theta: &DeepFactorization,
    phi: &Matrix,
    mask: &ObservationMask,
) -> Result<(f64, Vec<Matrix>)> {
    check_target("masked_gradient", theta, phi)?;
    mask.check_shape("masked_gradient", phi)?;
    let prefixes = prefix_products(theta.layers());
    let residual = mask.apply(&(&prefixes[theta.depth() - 1] - phi));
    let loss = 0.5 * residual.norm_squared();
    Ok((loss, gradients_from_residual(theta.layers(), &prefixes, &residual)))
}

pub fn masked_gradient(theta: &DeepFactorization, phi: &Matrix, mask: &ObservationMask) -> Result<Vec<Matrix>> {
    Ok(masked_loss_and_gradient(theta, phi, mask)?.1)
}

/// Plain GD settings plus the outer-factor rate multiplier `γ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscrepantGdConfig {
    pub base: GdConfig,
    pub gamma: f64,
}

impl DiscrepantGdConfig {
    pub fn new(base: GdConfig, gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
        }
        Ok(Self { base, gamma })
    }
}

/// Gradients of `½‖Ω ⊙ (U W̃_{L:1} V^T - Φ)‖_F²` for every block.
#[derive(Debug, Clone)]
pub struct CompressedGradients {
    pub loss: f64,
    pub inner: Vec<Matrix>,
    pub outer_u: Matrix,
    pub outer_v: Matrix,
}

pub fn compressed_masked_gradients(
    cf: &CompressedFactorization,
    phi: &Matrix,
    mask: &ObservationMask,
) -> Result<CompressedGradients> {
    mask.check_shape("compressed_masked_gradients", phi)?;
    let layers = cf.inner.layers();
    let prefixes = prefix_products(layers);
    let core = &prefixes[layers.len() - 1];
    let full = &cf.outer_u * core * cf.outer_v.transpose();
    if full.shape() != phi.shape() {
        return Err(Error::DimensionMismatch {
            op: "compressed_masked_gradients",
            expected: shape_of(&full),
            actual: shape_of(phi),
        });
    }
    let residual = mask.apply(&(full - phi));
    let loss = 0.5 * residual.norm_squared();
    let rv = &residual * &cf.outer_v;
    let outer_u = &rv * core.transpose();
    let outer_v = residual.tr_mul(&cf.outer_u) * core;
    let projected = cf.outer_u.tr_mul(&rv);
    let inner = gradients_from_residual(layers, &prefixes, &projected);
    Ok(CompressedGradients {
        loss,
        inner,
        outer_u,
        outer_v,
    })
}

/// Applies precomputed gradients: inner layers at rate `η` with weight decay,
/// outer factors at rate `γη` without decay.
pub fn apply_compressed_step(cf: &mut CompressedFactorization, grads: &CompressedGradients, cfg: &DiscrepantGdConfig) {
    let eta = cfg.base.eta;
    cf.inner.apply_step(&grads.inner, eta, cfg.base.lambda);
    if cfg.gamma != 0.0 {
        let rate = cfg.gamma * eta;
        cf.outer_u.zip_apply(&grads.outer_u, |a, g| *a -= rate * g);
        cf.outer_v.zip_apply(&grads.outer_v, |a, g| *a -= rate * g);
    }
}

/// One simultaneous step on `Θ̃`, `U_{L,1}` and `V_{1,1}`, all gradients taken
/// at the pre-step state.
pub fn compressed_completion_step(
    cf: &CompressedFactorization,
    phi: &Matrix,
    mask: &ObservationMask,
    cfg: &DiscrepantGdConfig,
) -> Result<CompressedFactorization> {
    let grads = compressed_masked_gradients(cf, phi, mask)?;
    let mut next = cf.clone();
    apply_compressed_step(&mut next, &grads, cfg);
    Ok(next)
}

/// Anything with an end-to-end `d x d` product.
pub trait EndToEnd {
    fn end_to_end(&self) -> Matrix;
}

impl EndToEnd for DeepFactorization {
    fn end_to_end(&self) -> Matrix {
        forward(self)
    }
}

impl EndToEnd for CompressedFactorization {
    fn end_to_end(&self) -> Matrix {
        compressed_forward(self)
    }
}

/// `‖f - Φ‖_F / ‖Φ‖_F` over all entries.
pub fn relative_error(f: &Matrix, phi: &Matrix) -> f64 {
    (f - phi).norm() / phi.norm()
}

pub fn recovery_error<M: EndToEnd>(model: &M, phi: &Matrix) -> f64 {
    relative_error(&model.end_to_end(), phi)
}
