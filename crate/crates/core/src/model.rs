//! Deep linear (and ReLU) factorizations `f(Θ) = W_L ⋯ W_1`, the ℓ2 loss,
//! its analytic gradient, and the weight-decayed gradient step.

use crate::error::{shape_of, Error, Result};
use crate::linalg::{self, gaussian_matrix, scaled_semi_orthogonal, Matrix, RngSeed};

/// Ordered layers `W_1..W_L`; `W_l` is `d_l x d_{l-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepFactorization {
    layers: Vec<Matrix>,
    init_scales: Vec<f64>,
}

impl DeepFactorization {
    pub fn from_layers(layers: Vec<Matrix>, init_scales: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("depth must be at least 1".into()));
        }
        if init_scales.len() != layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} layers but {} init scales",
                layers.len(),
                init_scales.len()
            )));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].ncols() != pair[0].nrows() {
                return Err(Error::DimensionMismatch {
                    op: "DeepFactorization",
                    expected: format!("layer {} with {} columns", l + 2, pair[0].nrows()),
                    actual: shape_of(&pair[1]),
                });
            }
        }
        Ok(Self {
            layers,
            init_scales,
        })
    }

    /// Square `d x d` layers with `W_l(0) W_l(0)^T = ε_l² I`, drawn in order
    /// `W_1, ..., W_L` from one seeded stream.
    pub fn orthogonal(d: usize, init_scales: &[f64], seed: RngSeed) -> Result<Self> {
        let dims = vec![d; init_scales.len() + 1];
        Self::orthogonal_with_dims(&dims, init_scales, seed)
    }

    /// Layers of shape `dims[l] x dims[l-1]` with (semi-)orthogonal init at
    /// scale `ε_l`. `dims` has length `L + 1`.
    pub fn orthogonal_with_dims(dims: &[usize], init_scales: &[f64], seed: RngSeed) -> Result<Self> {
        if dims.len() != init_scales.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "need {} dimensions for {} layers, got {}",
                init_scales.len() + 1,
                init_scales.len(),
                dims.len()
            )));
        }
        if dims.iter().any(|&n| n == 0) || init_scales.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::InvalidArgument(
                "dimensions and init scales must be positive".into(),
            ));
        }
        let mut rng = seed.rng();
        let layers = init_scales
            .iter()
            .enumerate()
            .map(|(l, &eps)| scaled_semi_orthogonal(dims[l + 1], dims[l], eps, &mut rng))
            .collect();
        Self::from_layers(layers, init_scales.to_vec())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l]
    }

    pub fn init_scales(&self) -> &[f64] {
        &self.init_scales
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|w| w.len()).sum()
    }

    /// Product of `layers[range]`, applied right to left (`W_{j:i}` for the
    /// one-based range `i..=j`). An empty range gives the identity.
    pub fn product_of(&self, range: std::ops::Range<usize>) -> Matrix {
        if range.is_empty() {
            let n = if range.start == 0 {
                self.input_dim()
            } else {
                self.layers[range.start - 1].nrows()
            };
            return Matrix::identity(n, n);
        }
        let mut acc = self.layers[range.start].clone();
        for w in &self.layers[range.start + 1..range.end] {
            acc = w * acc;
        }
        acc
    }

    /// In-place `W_l <- (1 - ηλ) W_l - η G_l`.
    pub fn apply_step(&mut self, grads: &[Matrix], eta: f64, lambda: f64) {
        debug_assert_eq!(grads.len(), self.layers.len());
        let decay = 1.0 - eta * lambda;
        for (w, g) in self.layers.iter_mut().zip(grads) {
            w.zip_apply(g, |a, b| *a = decay * *a - eta * b);
        }
    }
}

/// Plain GD hyperparameters: step size, weight decay, and stopping rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GdConfig {
    pub eta: f64,
    pub lambda: f64,
    pub max_iters: usize,
    pub loss_tol: f64,
}

impl GdConfig {
    pub fn new(eta: f64, lambda: f64, max_iters: usize, loss_tol: f64) -> Result<Self> {
        if !(eta > 0.0) || !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need eta > 0 and lambda >= 0 (got eta={eta}, lambda={lambda})"
            )));
        }
        Ok(Self {
            eta,
            lambda,
            max_iters,
            loss_tol,
        })
    }

    /// Whether a run halts at this iterate: converged, diverged, or out of
    /// steps.
    pub fn stops_at(&self, iteration: usize, loss: f64) -> bool {
        loss <= self.loss_tol || !loss.is_finite() || iteration >= self.max_iters
    }
}

/// Low-rank ground truth `Φ`.
#[derive(Debug, Clone)]
pub struct TargetSpec {
    pub phi: Matrix,
    pub true_rank: usize,
    pub seed: RngSeed,
}

/// `Φ = A B` with Gaussian `A: d x r*`, `B: r* x d`, rescaled to `‖Φ‖_F = 1`.
///
/// Unit norm keeps one step size usable across `d`; with `‖Φ‖_F = d` the
/// largest singular value grows like `d / sqrt(r*)` and fixed-step GD diverges.
pub fn generate_low_rank_target(d: usize, r_star: usize, seed: RngSeed) -> Result<TargetSpec> {
    if r_star == 0 || r_star > d {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= r_star <= d (got r_star={r_star}, d={d})"
        )));
    }
    let mut rng = seed.rng();
    let a = gaussian_matrix(d, r_star, &mut rng);
    let b = gaussian_matrix(r_star, d, &mut rng);
    let mut phi = a * b;
    let norm = phi.norm();
    phi /= norm;
    Ok(TargetSpec {
        phi,
        true_rank: r_star,
        seed,
    })
}

pub fn forward(theta: &DeepFactorization) -> Matrix {
    let mut acc = theta.layers[0].clone();
    for w in &theta.layers[1..] {
        acc = w * acc;
    }
    acc
}

pub(crate) fn check_target(op: &'static str, theta: &DeepFactorization, phi: &Matrix) -> Result<()> {
    if phi.shape() != (theta.output_dim(), theta.input_dim()) {
        return Err(Error::DimensionMismatch {
            op,
            expected: format!("{}x{}", theta.output_dim(), theta.input_dim()),
            actual: shape_of(phi),
        });
    }
    Ok(())
}

pub fn l2_loss(theta: &DeepFactorization, phi: &Matrix) -> Result<f64> {
    check_target("l2_loss", theta, phi)?;
    Ok(0.5 * (forward(theta) - phi).norm_squared())
}

/// Prefix products `W_{l:1}` for `l = 1..L` (index `l - 1`).
pub(crate) fn prefix_products(layers: &[Matrix]) -> Vec<Matrix> {
    let mut out: Vec<Matrix> = Vec::with_capacity(layers.len());
    for w in layers {
        let next = match out.last() {
            Some(p) => w * p,
            None => w.clone(),
        };
        out.push(next);
    }
    out
}

/// Per-layer gradients `W_{L:l+1}^T R W_{l-1:1}^T` for a given residual `R`,
/// reusing prefix products computed for the forward pass.
pub(crate) fn gradients_from_residual(
    layers: &[Matrix],
    prefixes: &[Matrix],
    residual: &Matrix,
) -> Vec<Matrix> {
    let depth = layers.len();
    let mut grads = vec![Matrix::zeros(0, 0); depth];
    // Walk from the top: `back` holds W_{L:l+1}^T R.
    let mut back = residual.clone();
    for l in (0..depth).rev() {
        grads[l] = if l == 0 {
            back.clone()
        } else {
            &back * prefixes[l - 1].transpose()
        };
        if l > 0 {
            back = layers[l].tr_mul(&back);
        }
    }
    grads
}

/// ℓ2 loss and per-layer gradients in one pass.
pub fn l2_loss_and_gradient(theta: &DeepFactorization, phi: &Matrix) -> Result<(f64, Vec<Matrix>)> {
    check_target("l2_gradient", theta, phi)?;
    let prefixes = prefix_products(&theta.layers);
    let residual = &prefixes[theta.depth() - 1] - phi;
    let loss = 0.5 * residual.norm_squared();
    Ok((loss, gradients_from_residual(&theta.layers, &prefixes, &residual)))
}

pub fn l2_gradient(theta: &DeepFactorization, phi: &Matrix) -> Result<Vec<Matrix>> {
    Ok(l2_loss_and_gradient(theta, phi)?.1)
}

/// One step of `W_l <- (1 - ηλ) W_l - η G_l`; the input is left untouched.
pub fn gd_step(theta: &DeepFactorization, grads: &[Matrix], config: &GdConfig) -> Result<DeepFactorization> {
    if grads.len() != theta.depth()
        || grads
            .iter()
            .zip(&theta.layers)
            .any(|(g, w)| g.shape() != w.shape())
    {
        return Err(Error::DimensionMismatch {
            op: "gd_step",
            expected: format!("{} gradients shaped like the layers", theta.depth()),
            actual: format!("{} gradients", grads.len()),
        });
    }
    let mut next = theta.clone();
    next.apply_step(grads, config.eta, config.lambda);
    Ok(next)
}

fn relu(m: &Matrix) -> Matrix {
    m.map(|x| x.max(0.0))
}

/// `W_L σ(W_{L-1} ⋯ σ(W_2 σ(W_1)))` with entrywise ReLU `σ`.
pub fn relu_forward(theta: &DeepFactorization) -> Result<Matrix> {
    if theta.depth() < 2 {
        return Err(Error::InvalidArgument(
            "ReLU factorization needs depth >= 2".into(),
        ));
    }
    let depth = theta.depth();
    let mut h = relu(&theta.layers[0]);
    for w in &theta.layers[1..depth - 1] {
        h = relu(&(w * h));
    }
    Ok(&theta.layers[depth - 1] * h)
}

pub fn relu_loss(theta: &DeepFactorization, phi: &Matrix) -> Result<f64> {
    check_target("relu_loss", theta, phi)?;
    Ok(0.5 * (relu_forward(theta)? - phi).norm_squared())
}

/// Gradient of the ReLU ℓ2 loss with respect to the middle layer of a depth-3
/// factorization: `[h(W_2 σ(W_1)) ⊙ (W_3^T E)] σ(W_1)^T`, with `h(x) = 1` for
/// `x > 0` and `0` otherwise.
pub fn relu_w2_gradient(theta: &DeepFactorization, phi: &Matrix) -> Result<Matrix> {
    if theta.depth() != 3 {
        return Err(Error::InvalidArgument(format!(
            "middle-layer ReLU gradient needs depth 3, got {}",
            theta.depth()
        )));
    }
    check_target("relu_w2_gradient", theta, phi)?;
    let [w1, w2, w3] = [&theta.layers[0], &theta.layers[1], &theta.layers[2]];
    let h1 = relu(w1);
    let pre = w2 * &h1;
    let residual = w3 * relu(&pre) - phi;
    let mut back = w3.tr_mul(&residual);
    back.zip_apply(&pre, |b, p| {
        if p <= 0.0 {
            *b = 0.0;
        }
    });
    Ok(back * h1.transpose())
}

/// Singular values of the middle-layer ReLU gradient, descending.
pub fn relu_w2_gradient_spectrum(theta: &DeepFactorization, phi: &Matrix) -> Result<Vec<f64>> {
    linalg::singular_values(&relu_w2_gradient(theta, phi)?)
}
