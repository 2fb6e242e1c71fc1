//! Dense real linear algebra used throughout the crate.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. Everything here is deterministic:
//! randomized routines take an explicit [`RngSeed`] or a caller-owned RNG.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_of, Error, Result};

pub type Matrix = DMatrix<f64>;

/// Generator used for every randomized routine in the crate.
pub type Rng = ChaCha8Rng;

/// Default absolute floor for [`numerical_rank`].
pub const RANK_FLOOR: f64 = 1e-8;

/// Default relative threshold for [`nullspace_basis`].
pub const NULLSPACE_REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> Rng {
        Rng::seed_from_u64(self.0)
    }

    /// Seed of the `k`-th trial derived from this base seed.
    pub fn offset(self, k: u64) -> RngSeed {
        RngSeed(self.0.wrapping_add(k))
    }

    /// Independent sub-seed for one named use within a trial (target, mask,
    /// init), so consecutive trial seeds never share a stream.
    pub fn stream(self, tag: u64) -> RngSeed {
        // splitmix64 finalizer
        let mut z = self.0 ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        RngSeed(z ^ (z >> 31))
    }
}

/// Thin singular value decomposition `a = u * diag(s) * vt`, `s` descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: DVector<f64>,
    pub vt: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * &self.vt
    }

    pub fn sigma_max(&self) -> f64 {
        self.singular_values.get(0).copied().unwrap_or(0.0)
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    let (rows, cols) = a.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(Svd {
            u: Matrix::zeros(rows, k),
            singular_values: DVector::zeros(k),
            vt: Matrix::zeros(k, cols),
        });
    }
    if !a.iter().all(|x| x.is_finite()) {
        return Err(Error::SvdNonConvergence { rows, cols });
    }
    let dec = to_faer(a).thin_svd();
    let (fu, fs, fv) = (dec.u(), dec.s_diagonal(), dec.v());
    // faer does not promise an order for the full decomposition.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| fs.read(j).total_cmp(&fs.read(i)));
    let out = Svd {
        u: Matrix::from_fn(rows, k, |i, j| fu.read(i, order[j])),
        singular_values: DVector::from_fn(k, |j, _| fs.read(order[j])),
        vt: Matrix::from_fn(k, cols, |i, j| fv.read(j, order[i])),
    };
    let scale = a.norm();
    if (out.reconstruct() - a).norm() > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::SvdNonConvergence { rows, cols });
    }
    Ok(out)
}

/// Singular values only, descending.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    if !a.iter().all(|x| x.is_finite()) {
        return Err(Error::SvdNonConvergence { rows, cols });
    }
    let mut sv = to_faer(a).singular_values();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}

fn to_faer(a: &Matrix) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Best rank-`k` approximation in Frobenius norm.
pub fn truncate_rank(a: &Matrix, k: usize) -> Result<Matrix> {
    let dec = svd(a)?;
    let k = k.min(dec.singular_values.len());
    let mut out = Matrix::zeros(a.nrows(), a.ncols());
    for j in 0..k {
        out += dec.u.column(j) * dec.vt.row(j) * dec.singular_values[j];
    }
    Ok(out)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    // Column-major fill order; fixed so a seed reproduces the same matrix.
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Haar-distributed matrix with orthonormal columns (rows >= cols) or rows
/// (rows < cols), scaled by `epsilon`.
pub fn scaled_semi_orthogonal(rows: usize, cols: usize, epsilon: f64, rng: &mut Rng) -> Matrix {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g = gaussian_matrix(tall, short, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign fix on diag(R) makes Q Haar rather than Householder-biased.
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q *= epsilon;
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

/// Square `d x d` matrix with `W W^T = W^T W = epsilon^2 I`.
pub fn scaled_orthogonal_init(d: usize, epsilon: f64, seed: RngSeed) -> Result<Matrix> {
    if d == 0 || !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scaled orthogonal init needs d >= 1 and epsilon > 0 (got d={d}, epsilon={epsilon})"
        )));
    }
    Ok(scaled_semi_orthogonal(d, d, epsilon, &mut seed.rng()))
}

/// `max |B^T B - I|` over entries.
pub fn orthonormality_defect(b: &Matrix) -> f64 {
    let k = b.ncols();
    (b.transpose() * b - Matrix::identity(k, k)).amax()
}

/// Orthonormal basis for the right singular vectors of `a` whose singular
/// values are at most `rel_tol * sigma_max(a)`. The zero matrix has the whole
/// space as its nullspace.
pub fn nullspace_basis(a: &Matrix, rel_tol: f64) -> Result<Matrix> {
    let cols = a.ncols();
    let padded = pad_rows(a);
    let dec = svd(&padded)?;
    let sigma_max = dec.sigma_max();
    if sigma_max <= f64::MIN_POSITIVE {
        return Ok(Matrix::identity(cols, cols));
    }
    let threshold = rel_tol * sigma_max;
    let keep: Vec<usize> = (0..cols)
        .filter(|&i| dec.singular_values[i] <= threshold)
        .collect();
    let v = dec.vt.transpose();
    Ok(Matrix::from_fn(cols, keep.len(), |i, j| v[(i, keep[j])]))
}

fn check_same_rows(op: &'static str, b1: &Matrix, b2: &Matrix) -> Result<()> {
    if b1.nrows() != b2.nrows() {
        return Err(Error::DimensionMismatch {
            op,
            expected: format!("{} rows", b1.nrows()),
            actual: shape_of(b2),
        });
    }
    Ok(())
}

/// Orthonormal basis of `span(b1) ∩ span(b2)`: the principal vectors of `b1`
/// whose principal angle to `span(b2)` has cosine at least `1 - tol`.
///
/// Angles are resolved through their sines (singular values of
/// `(I - b2 b2^T) b1`), which stay accurate for nearly aligned directions.
/// Columns come out in order of increasing angle.
pub fn intersect_subspaces(b1: &Matrix, b2: &Matrix, tol: f64) -> Result<Matrix> {
    check_same_rows("intersect_subspaces", b1, b2)?;
    let d = b1.nrows();
    if b1.ncols() == 0 || b2.ncols() == 0 {
        return Ok(Matrix::zeros(d, 0));
    }
    let residual = pad_rows(&(b1 - b2 * (b2.transpose() * b1)));
    let dec = svd(&residual)?;
    let cos_min = (1.0 - tol).clamp(0.0, 1.0);
    let sin_max = (1.0 - cos_min * cos_min).sqrt();
    let v = dec.vt.transpose();
    let mut picked: Vec<usize> = (0..dec.singular_values.len())
        .filter(|&i| dec.singular_values[i] <= sin_max)
        .collect();
    picked.reverse();
    let y = Matrix::from_fn(b1.ncols(), picked.len(), |i, j| v[(i, picked[j])]);
    Ok(b1 * y)
}

/// Zero-pads a wide matrix to square so a thin SVD returns every right
/// singular vector.
fn pad_rows(a: &Matrix) -> Matrix {
    let (rows, cols) = a.shape();
    if rows >= cols {
        return a.clone();
    }
    let mut p = Matrix::zeros(cols, cols);
    p.view_mut((0, 0), (rows, cols)).copy_from(a);
    p
}

fn orthonormalize(a: &Matrix) -> Matrix {
    if a.ncols() == 0 {
        return a.clone();
    }
    a.clone().qr().q()
}

/// Extend `partial` (d x k, orthonormal columns) to a d x d orthogonal matrix.
/// The new columns come first; the last k columns are `partial` itself.
pub fn complete_to_basis(partial: &Matrix) -> Result<Matrix> {
    let (d, k) = partial.shape();
    if k > d {
        return Err(Error::DimensionMismatch {
            op: "complete_to_basis",
            expected: format!("at most {d} columns"),
            actual: shape_of(partial),
        });
    }
    let deviation = if k == 0 {
        0.0
    } else {
        orthonormality_defect(partial)
    };
    if deviation > 1e-8 {
        return Err(Error::NotOrthonormal { deviation });
    }
    let mut out = Matrix::zeros(d, d);
    if k == d {
        out.copy_from(partial);
        return Ok(out);
    }
    // Householder QR of [partial | I] always yields an orthogonal Q whose
    // leading k columns span partial, so the trailing d - k complete it.
    let mut stacked = Matrix::zeros(d, d);
    stacked.columns_mut(0, k).copy_from(partial);
    for j in 0..(d - k) {
        stacked[(j, k + j)] = 1.0;
    }
    let q = stacked.qr().q();
    let mut complement = q.columns(k, d - k).into_owned();
    // One reorthogonalization pass against partial.
    complement -= partial * (partial.transpose() * &complement);
    let complement = orthonormalize(&complement);
    out.columns_mut(0, d - k).copy_from(&complement);
    out.columns_mut(d - k, k).copy_from(partial);
    Ok(out)
}

/// Principal angles between `span(b1)` and `span(b2)` in radians, ascending.
///
/// Small angles come from sines and large ones from cosines, so both ends of
/// `[0, pi/2]` are resolved to machine precision.
pub fn principal_angles(b1: &Matrix, b2: &Matrix) -> Result<Vec<f64>> {
    check_same_rows("principal_angles", b1, b2)?;
    // Keep b_small as the lower-dimensional side so every sine is meaningful.
    let (big, small) = if b1.ncols() >= b2.ncols() {
        (b1, b2)
    } else {
        (b2, b1)
    };
    let k = small.ncols();
    if k == 0 {
        return Ok(Vec::new());
    }
    let cosines = singular_values(&(big.transpose() * small))?;
    let mut sines = singular_values(&(small - big * (big.transpose() * small)))?;
    sines.resize(k, 0.0);
    sines.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let half = std::f64::consts::FRAC_1_SQRT_2;
    let angles = (0..k)
        .map(|i| {
            let c = cosines.get(i).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            let s = sines[i].clamp(0.0, 1.0);
            if s < half {
                s.asin()
            } else {
                c.acos()
            }
        })
        .collect::<Vec<_>>();
    Ok(angles)
}

/// Number of singular values above `max(floor_abs, max(rows, cols) * sigma_1 * machine_eps)`.
pub fn numerical_rank(a: &Matrix, floor_abs: f64, machine_eps: f64) -> Result<usize> {
    let s = singular_values(a)?;
    let Some(&s1) = s.first() else {
        return Ok(0);
    };
    let d = a.nrows().max(a.ncols()) as f64;
    let threshold = floor_abs.max(d * s1 * machine_eps);
    Ok(s.iter().filter(|&&x| x > threshold).count())
}

/// [`numerical_rank`] with the default floor `1e-8` and `f64::EPSILON`.
pub fn default_rank(a: &Matrix) -> Result<usize> {
    numerical_rank(a, RANK_FLOOR, f64::EPSILON)
}

/// Leading `k` columns of `a`.
pub fn leading_columns(a: &Matrix, k: usize) -> Matrix {
    a.columns(0, k).into_owned()
}

/// Trailing `k` columns of `a`.
pub fn trailing_columns(a: &Matrix, k: usize) -> Matrix {
    let n = a.ncols();
    a.columns(n - k, k).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(seed: u64) -> Rng {
        RngSeed(seed).rng()
    }

    #[test]
    fn svd_of_nearly_symmetric_rank_one() {
        let g = Matrix::from_row_slice(
            2,
            2,
            &[
                2.519061709256437,
                -2.519061709256437,
                -2.519061709256437,
                2.5190617092564365,
            ],
        );
        let dec = svd(&g).unwrap();
        assert!((dec.reconstruct() - &g).norm() < 1e-12);
        assert!((dec.sigma_max() - 5.038123418512874).abs() < 1e-12);
        let sv = singular_values(&g).unwrap();
        assert!((sv[0] - 5.038123418512874).abs() < 1e-12);
    }

    #[test]
    fn svd_reconstructs_structured_matrices() {
        let mut rng = seeded(17);
        for n in [2, 3, 5, 8, 20] {
            let a = gaussian_matrix(n, 1, &mut rng);
            let rank_one = &a * a.transpose();
            let anti = &rank_one - rank_one.transpose() + Matrix::identity(n, n) * 1e-9;
            for m in [rank_one, anti, Matrix::zeros(n, n)] {
                let dec = svd(&m).unwrap();
                assert!((dec.reconstruct() - &m).norm() <= 1e-12 * m.norm().max(1.0));
            }
        }
    }

    #[test]
    fn truncation_keeps_leading_terms() {
        let a = Matrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let t = truncate_rank(&a, 2).unwrap();
        assert!((t - Matrix::from_diagonal(&DVector::from_vec(vec![0.0, 3.0, 2.0]))).amax() < 1e-15);
        assert!((truncate_rank(&a, 5).unwrap() - &a).amax() < 1e-15);
    }

    #[test]
    fn svd_of_identity_and_diagonal() {
        let dec = svd(&Matrix::identity(3, 3)).unwrap();
        assert_eq!(dec.singular_values.as_slice(), &[1.0, 1.0, 1.0]);

        let a = Matrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let dec = svd(&a).unwrap();
        assert_eq!(dec.singular_values.as_slice(), &[3.0, 2.0, 1.0]);
        assert!((dec.u.abs() - Matrix::identity(3, 3)).amax() < 1e-14);
        assert!((dec.vt.abs() - Matrix::identity(3, 3)).amax() < 1e-14);
    }

    #[test]
    fn svd_reconstructs_rectangular() {
        for (r, c) in [(5, 3), (3, 5), (40, 40)] {
            let a = gaussian_matrix(r, c, &mut seeded(7));
            let dec = svd(&a).unwrap();
            let err = (&a - dec.reconstruct()).norm();
            assert!(err <= 1e-8 * a.norm().max(1.0), "{r}x{c}: {err}");
            assert!(orthonormality_defect(&dec.u) < 1e-10);
            assert!(orthonormality_defect(&dec.vt.transpose()) < 1e-10);
            let s = dec.singular_values.as_slice();
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn orthogonal_init_one_dimensional() {
        let w = scaled_orthogonal_init(1, 1.0, RngSeed(3)).unwrap();
        assert_eq!(w[(0, 0)].abs(), 1.0);
    }

    #[test]
    fn orthogonal_init_is_scaled_orthogonal() {
        for (d, eps) in [(4, 0.5), (30, 1.0), (17, 1e-3)] {
            let w = scaled_orthogonal_init(d, eps, RngSeed(11)).unwrap();
            let target = Matrix::identity(d, d) * (eps * eps);
            assert!((&w * w.transpose() - &target).amax() <= 1e-10 * eps * eps);
            assert!((w.transpose() * &w - &target).amax() <= 1e-10 * eps * eps);
        }
    }

    #[test]
    fn orthogonal_init_rejects_bad_args() {
        assert!(scaled_orthogonal_init(0, 1.0, RngSeed(0)).is_err());
        assert!(scaled_orthogonal_init(3, 0.0, RngSeed(0)).is_err());
    }

    #[test]
    fn orthogonal_init_is_deterministic() {
        let a = scaled_orthogonal_init(8, 0.3, RngSeed(5)).unwrap();
        let b = scaled_orthogonal_init(8, 0.3, RngSeed(5)).unwrap();
        let c = scaled_orthogonal_init(8, 0.3, RngSeed(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn semi_orthogonal_wide_and_tall() {
        let mut rng = seeded(1);
        let tall = scaled_semi_orthogonal(9, 4, 2.0, &mut rng);
        assert!((tall.transpose() * &tall - Matrix::identity(4, 4) * 4.0).amax() < 1e-12);
        let wide = scaled_semi_orthogonal(4, 9, 2.0, &mut rng);
        assert!((&wide * wide.transpose() - Matrix::identity(4, 4) * 4.0).amax() < 1e-12);
    }

    #[test]
    fn nullspace_of_zero_is_everything() {
        let n = nullspace_basis(&Matrix::zeros(3, 3), NULLSPACE_REL_TOL).unwrap();
        assert_eq!(n, Matrix::identity(3, 3));
    }

    #[test]
    fn nullspace_of_rank_one() {
        let mut rng = seeded(2);
        let u = gaussian_matrix(3, 1, &mut rng).normalize();
        let v = gaussian_matrix(3, 1, &mut rng).normalize();
        let a = &u * v.transpose();
        let n = nullspace_basis(&a, NULLSPACE_REL_TOL).unwrap();
        assert_eq!(n.ncols(), 2);
        assert!(orthonormality_defect(&n) < 1e-12);
        assert!((v.transpose() * &n).amax() < 1e-10);
    }

    #[test]
    fn nullspace_of_wide_matrix() {
        let a = gaussian_matrix(2, 5, &mut seeded(4));
        let n = nullspace_basis(&a, NULLSPACE_REL_TOL).unwrap();
        assert_eq!(n.ncols(), 3);
        assert!((&a * &n).amax() < 1e-12);
    }

    fn coord(d: usize, idx: &[usize]) -> Matrix {
        Matrix::from_fn(d, idx.len(), |i, j| if i == idx[j] { 1.0 } else { 0.0 })
    }

    #[test]
    fn intersect_self() {
        let b = coord(4, &[0, 1]);
        let s = intersect_subspaces(&b, &b, 1e-10).unwrap();
        assert_eq!(s.ncols(), 2);
        let angles = principal_angles(&s, &b).unwrap();
        assert!(angles.iter().all(|&a| a <= 1e-10));
    }

    #[test]
    fn intersect_coordinate_planes() {
        let s = intersect_subspaces(&coord(4, &[0, 1]), &coord(4, &[1, 2]), 1e-10).unwrap();
        assert_eq!(s.ncols(), 1);
        assert!((s[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn intersect_random_meets_dimension_bound() {
        let mut rng = seeded(9);
        let b1 = orthonormalize(&gaussian_matrix(20, 15, &mut rng));
        let b2 = orthonormalize(&gaussian_matrix(20, 15, &mut rng));
        let s = intersect_subspaces(&b1, &b2, 1e-8).unwrap();
        assert!(s.ncols() >= 10, "got {}", s.ncols());
        // Oracle: rank of [b1 b2] is 20, so the intersection has dim 15+15-20.
        let mut cat = Matrix::zeros(20, 30);
        cat.columns_mut(0, 15).copy_from(&b1);
        cat.columns_mut(15, 15).copy_from(&b2);
        assert_eq!(default_rank(&cat).unwrap(), 20);
        assert_eq!(s.ncols(), 10);
        // Inside both subspaces.
        assert!((&s - &b1 * (b1.transpose() * &s)).amax() < 1e-10);
        assert!((&s - &b2 * (b2.transpose() * &s)).amax() < 1e-10);
    }

    #[test]
    fn intersect_rejects_mismatch() {
        assert!(matches!(
            intersect_subspaces(&coord(4, &[0]), &coord(3, &[0]), 1e-8),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn complete_basis_keeps_partial_last() {
        let e3 = coord(3, &[2]);
        let q = complete_to_basis(&e3).unwrap();
        assert!(orthonormality_defect(&q) < 1e-12);
        assert_eq!(q.column(2), e3.column(0));

        let q = complete_to_basis(&Matrix::zeros(2, 0)).unwrap();
        assert!((&q * q.transpose() - Matrix::identity(2, 2)).amax() < 1e-12);

        let e1 = coord(5, &[0, 1]);
        let q = complete_to_basis(&e1).unwrap();
        assert!(orthonormality_defect(&q) < 1e-10);
    }

    #[test]
    fn complete_basis_rejects_non_orthonormal() {
        let bad = Matrix::from_column_slice(3, 1, &[1.0, 1.0, 0.0]);
        assert!(matches!(
            complete_to_basis(&bad),
            Err(Error::NotOrthonormal { .. })
        ));
    }

    #[test]
    fn principal_angles_basic() {
        let e1 = coord(3, &[0]);
        let e2 = coord(3, &[1]);
        assert_eq!(principal_angles(&e1, &e1).unwrap(), vec![0.0]);
        let a = principal_angles(&e1, &e2).unwrap();
        assert!((a[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn principal_angles_rotation_invariant() {
        let mut rng = seeded(21);
        let b = orthonormalize(&gaussian_matrix(10, 3, &mut rng));
        let r = scaled_semi_orthogonal(3, 3, 1.0, &mut rng);
        let angles = principal_angles(&b, &(&b * r)).unwrap();
        assert_eq!(angles.len(), 3);
        assert!(angles.iter().all(|&a| a <= 1e-10), "{angles:?}");
    }

    #[test]
    fn principal_angles_rejects_mismatch() {
        assert!(principal_angles(&coord(4, &[0]), &coord(3, &[0])).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(default_rank(&Matrix::zeros(3, 3)).unwrap(), 0);
        let d = Matrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-12, 0.0]));
        assert_eq!(default_rank(&d).unwrap(), 1);
        let mut rng = seeded(8);
        let a = gaussian_matrix(50, 5, &mut rng) * gaussian_matrix(5, 50, &mut rng);
        assert_eq!(default_rank(&a).unwrap(), 5);
        let s = singular_values(&a).unwrap();
        assert!(s[5] / s[4] < 1e-10);
    }
}
