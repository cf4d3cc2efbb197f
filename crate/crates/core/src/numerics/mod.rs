//! Dense linear algebra, PCA, norms, and deterministic RNG shared by all
//! other modules.

pub mod matrix;
pub mod rng;

pub use matrix::Matrix;
pub use rng::RngState;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use matrix::{dot, norm};

/// Top-k eigenpairs of a sample covariance.
///
/// `components` is `d x k`; column `j` is the unit eigenvector `j` scaled by
/// its eigenvalue, so the column norm equals the eigenvalue. Eigenvalues are
/// nonnegative and sorted descending. The unscaled eigenvectors are available
/// via [`PrincipalComponents::unit_component`].
#[derive(Clone, Debug)]
pub struct PrincipalComponents<F> {
    pub components: Matrix<F>,
    pub eigenvalues: Vec<F>,
}

impl<F: Scalar> PrincipalComponents<F> {
    /// Unit-norm eigenvector `j` (the scaled column renormalized); zero
    /// eigenvalues yield the stored direction unscaled.
    pub fn unit_component(&self, j: usize) -> Vec<F> {
        let col = self.components.column(j);
        let ev = self.eigenvalues[j];
        if ev > F::zero() {
            col.iter().map(|&v| v / ev).collect()
        } else {
            col
        }
    }
}

/// Dimension above which PCA switches from the dense symmetric
/// eigendecomposition to the iterative deflated power method.
pub const DENSE_EIG_MAX_DIM: usize = 512;

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

/// Fit the top-`k` principal components of `data` (`n x d`, one sample per
/// row). Data is mean-centered internally; the covariance uses divisor
/// `n - 1`. Each eigenvector's entry of largest magnitude is made positive
/// for cross-run determinism.
pub fn pca_fit<F: Scalar>(data: &Matrix<F>, k: usize) -> Result<PrincipalComponents<F>> {
    let (n, d) = data.shape();
    if n < 2 {
        return Err(Error::parameter(format!("pca needs at least 2 samples, got {n}")));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::parameter(format!(
            "pca component count {k} out of range [1, {}]",
            n.min(d)
        )));
    }
    if !data.is_finite() {
        return Err(Error::data("pca input contains non-finite entries".to_string()));
    }
    let cov = sample_covariance(data);
    let (mut values, mut vectors) = if d <= DENSE_EIG_MAX_DIM {
        symmetric_eigen_dense(&cov)
    } else {
        symmetric_eigen_power(&cov, k)
    };
    values.truncate(k);
    vectors.truncate(k);
    for (v, vec) in values.iter_mut().zip(vectors.iter_mut()) {
        if *v < F::zero() {
            // covariance is PSD; tiny negatives are roundoff
            *v = F::zero();
        }
        fix_sign(vec);
        let scale = *v;
        for x in vec.iter_mut() {
            *x *= scale;
        }
    }
    let mut components = Matrix::zeros(d, k);
    for (j, vec) in vectors.iter().enumerate() {
        for (i, &x) in vec.iter().enumerate() {
            components.set(i, j, x);
        }
    }
    Ok(PrincipalComponents { components, eigenvalues: values })
}

/// Mean-centered sample covariance of `data` (`n x d`), divisor `n - 1`.
pub fn sample_covariance<F: Scalar>(data: &Matrix<F>) -> Matrix<F> {
    let n = data.rows();
    let means = data.col_means();
    let mut centered = data.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&means) {
            *v -= *m;
        }
    }
    centered.matmul_opt(&centered, true, false).scale(F::one() / F::from_usize(n - 1).unwrap())
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors) sorted by descending eigenvalue;
/// eigenvectors are rows of the returned list.
fn symmetric_eigen_dense<F: Scalar>(sym: &Matrix<F>) -> (Vec<F>, Vec<Vec<F>>) {
    let d = sym.rows();
    let mut a = sym.clone();
    let mut v = Matrix::from_fn(d, d, |i, j| if i == j { F::one() } else { F::zero() });
    let eps = F::from_f64_lossy(1e-14);
    let scale = {
        let f = a.frobenius_sq().sqrt();
        if f > F::zero() {
            f
        } else {
            F::one()
        }
    };
    for _sweep in 0..100 {
        let mut off = F::zero();
        for p in 0..d {
            for q in (p + 1)..d {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off.sqrt() <= eps * scale {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a.get(p, q);
                if apq.abs() <= eps * scale {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (F::from_f64_lossy(2.0) * apq);
                let t = {
                    let sign = if theta >= F::zero() { F::one() } else { -F::one() };
                    sign / (theta.abs() + (theta * theta + F::one()).sqrt())
                };
                let c = F::one() / (t * t + F::one()).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    a.set(i, p, c * aip - s * aiq);
                    a.set(i, q, s * aip + c * aiq);
                }
                for j in 0..d {
                    let apj = a.get(p, j);
                    let aqj = a.get(q, j);
                    a.set(p, j, c * apj - s * aqj);
                    a.set(q, j, s * apj + c * aqj);
                }
                for i in 0..d {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    let mut pairs: Vec<(F, Vec<F>)> = (0..d).map(|j| (a.get(j, j), v.column(j))).collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    pairs.into_iter().unzip()
}

/// Top-k eigenpairs of a symmetric PSD matrix by power iteration with
/// deflation. Used for dimensions where the dense path is too expensive.
fn symmetric_eigen_power<F: Scalar>(sym: &Matrix<F>, k: usize) -> (Vec<F>, Vec<Vec<F>>) {
    let d = sym.rows();
    let mut deflated = sym.clone();
    let tol = F::from_f64_lossy(POWER_TOL);
    let mut values = Vec::with_capacity(k);
    let mut vectors: Vec<Vec<F>> = Vec::with_capacity(k);
    for j in 0..k {
        // deterministic pseudo-random start, re-orthogonalized against found vectors
        let mut state = 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(j as u64 + 1);
        let mut v: Vec<F> = (0..d)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                F::from_f64_lossy((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
            })
            .collect();
        normalize(&mut v);
        for _ in 0..POWER_MAX_ITERS {
            let mut w = mat_vec(&deflated, &v);
            for prev in &vectors {
                let c = dot(&w, prev);
                for (wi, pi) in w.iter_mut().zip(prev) {
                    *wi -= c * *pi;
                }
            }
            let wn = norm(&w);
            if wn <= F::from_f64_lossy(1e-300) {
                // remaining spectrum is numerically zero; keep the current direction
                break;
            }
            for wi in &mut w {
                *wi /= wn;
            }
            // convergence up to sign flips
            let delta = v
                .iter()
                .zip(&w)
                .map(|(&a, &b)| (a - b).abs().min((a + b).abs()))
                .fold(F::zero(), |acc, x| if x > acc { x } else { acc });
            v = w;
            if delta < tol {
                break;
            }
        }
        let lambda = dot(&v, &mat_vec(&deflated, &v)).max(F::zero());
        for p in 0..d {
            for q in 0..d {
                let upd = deflated.get(p, q) - lambda * v[p] * v[q];
                deflated.set(p, q, upd);
            }
        }
        values.push(lambda);
        vectors.push(v);
    }
    (values, vectors)
}

fn mat_vec<F: Scalar>(m: &Matrix<F>, v: &[F]) -> Vec<F> {
    (0..m.rows()).map(|i| dot(m.row(i), v)).collect()
}

fn normalize<F: Scalar>(v: &mut [F]) {
    let n = norm(v);
    if n > F::zero() {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Flip the vector so its entry of largest magnitude is positive.
fn fix_sign<F: Scalar>(v: &mut [F]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < F::zero() {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Per-class arithmetic means of `features` rows. Returns `d x c`; column
/// `k` is the centroid of class `k`.
pub fn class_centroids<F: Scalar>(
    features: &Matrix<F>,
    labels: &[usize],
    num_classes: usize,
) -> Result<Matrix<F>> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(Error::parameter(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::parameter(format!("label {bad} out of range [0, {num_classes})")));
    }
    let mut sums = Matrix::<F>::zeros(d, num_classes);
    let mut counts = vec![0usize; num_classes];
    for (i, &label) in labels.iter().enumerate() {
        counts[label] += 1;
        for (j, &v) in features.row(i).iter().enumerate() {
            sums.set(j, label, sums.get(j, label) + v);
        }
    }
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::MissingClass { class, context: "class centroids".to_string() });
        }
        let cf = F::from_usize(count).unwrap();
        for j in 0..d {
            sums.set(j, class, sums.get(j, class) / cf);
        }
    }
    Ok(sums)
}

/// Average Euclidean row norm of `features`.
pub fn mean_row_norm<F: Scalar>(features: &Matrix<F>) -> Result<F> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::parameter("mean row norm of an empty matrix".to_string()));
    }
    let total: F = (0..n).map(|i| features.row_norm(i)).sum();
    Ok(total / F::from_usize(n).unwrap())
}

/// Cosine of the angle between two nonzero vectors, in `[-1, 1]`.
pub fn cosine_similarity<F: Scalar>(u: &[F], v: &[F]) -> Result<F> {
    if u.len() != v.len() {
        return Err(Error::parameter(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == F::zero() || nv == F::zero() {
        return Err(Error::parameter("cosine similarity of a zero vector".to_string()));
    }
    let c = dot(u, v) / (nu * nv);
    Ok(c.min(F::one()).max(-F::one()))
}
