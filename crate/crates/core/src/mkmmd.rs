//! Multi-kernel maximum mean discrepancy between embedded batches — the
//! alignment loss between source and target representations.
//!
//! Kernel convention: `k(x, y) = exp(-||x - y||^2 / (2 sigma^2))`. The
//! training loss uses the biased V-statistic [`mmd_sq_biased`] (nonnegative
//! and smooth at `a == b`); the unbiased U-statistic [`mmd_sq_unbiased`] is
//! exposed for tests and analysis and may be negative.

use crate::error::{Error, Result};
use crate::numerics::matrix::dist_sq;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Mixture of Gaussian kernels: positive bandwidths with nonnegative weights
/// summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank<F> {
    bandwidths: Vec<F>,
    weights: Vec<F>,
}

impl<F: Scalar> KernelBank<F> {
    pub fn new(bandwidths: Vec<F>, weights: Vec<F>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.len() != weights.len() {
            return Err(Error::parameter(format!(
                "kernel bank needs matching nonempty lists, got {} bandwidths, {} weights",
                bandwidths.len(),
                weights.len()
            )));
        }
        if bandwidths.iter().any(|&s| !(s > F::zero())) {
            return Err(Error::parameter("kernel bandwidths must be positive".to_string()));
        }
        if weights.iter().any(|&w| w < F::zero()) {
            return Err(Error::parameter("kernel weights must be nonnegative".to_string()));
        }
        let total: F = weights.iter().copied().sum();
        let one = F::one();
        if (total - one).abs() > F::from_f64_lossy(1e-9) {
            return Err(Error::parameter(format!("kernel weights sum to {total}, expected 1")));
        }
        Ok(Self { bandwidths, weights })
    }

    /// Single Gaussian kernel of the given bandwidth.
    pub fn single(sigma: F) -> Result<Self> {
        Self::new(vec![sigma], vec![F::one()])
    }

    pub fn bandwidths(&self) -> &[F] {
        &self.bandwidths
    }

    pub fn weights(&self) -> &[F] {
        &self.weights
    }

    /// Weighted kernel mixture evaluated on a squared distance.
    fn eval_sq_dist(&self, d2: F) -> F {
        let half = F::from_f64_lossy(0.5);
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(&s, &w)| w * (-(d2 * half) / (s * s)).exp())
            .sum()
    }
}

/// Build a geometric bandwidth ladder around the median heuristic.
///
/// The center squared bandwidth is the median of squared pairwise Euclidean
/// distances over the pooled rows of `a` and `b` (zero distances excluded;
/// even counts average the middle two). The bank holds `k` bandwidths with
/// squared values `median * factor^i` for `i = -floor(k/2) .. floor(k/2)`,
/// uniformly weighted.
pub fn median_heuristic_bank<F: Scalar>(
    a: &Matrix<F>,
    b: &Matrix<F>,
    k: usize,
    factor: f64,
) -> Result<KernelBank<F>> {
    if k == 0 {
        return Err(Error::parameter("kernel bank needs k >= 1".to_string()));
    }
    if !(factor > 1.0) {
        return Err(Error::parameter(format!("bandwidth factor must exceed 1, got {factor}")));
    }
    if a.cols() != b.cols() {
        return Err(Error::parameter(format!(
            "pooled rows need matching dims, got {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let n = a.rows() + b.rows();
    if n < 2 {
        return Err(Error::parameter("median heuristic needs at least 2 pooled rows".to_string()));
    }
    let row = |i: usize| if i < a.rows() { a.row(i) } else { b.row(i - a.rows()) };
    let mut dists: Vec<F> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2 = dist_sq(row(i), row(j));
            if d2 > F::zero() {
                dists.push(d2);
            }
        }
    }
    if dists.is_empty() {
        return Err(Error::DegenerateData(
            "all pooled rows identical; median bandwidth is zero".to_string(),
        ));
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mid = dists.len() / 2;
    let median_sq = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        (dists[mid - 1] + dists[mid]) / F::from_f64_lossy(2.0)
    };
    let half_span = (k / 2) as i32;
    let factor = F::from_f64_lossy(factor);
    let mut bandwidths = Vec::with_capacity(k);
    for i in 0..k as i32 {
        let exponent = i - half_span;
        let scaled = median_sq * factor.powi(exponent);
        bandwidths.push(scaled.sqrt());
    }
    let w = F::one() / F::from_usize(k).unwrap();
    KernelBank::new(bandwidths, vec![w; k])
}

/// Cross-domain kernel sum accumulated over symmetric index groups, so the
/// floating-point addition sequence is identical when the arguments swap.
fn cross_kernel_sum<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>, bank: &KernelBank<F>) -> F {
    let (n, m) = (a.rows(), b.rows());
    let hi = n.max(m);
    let mut total = F::zero();
    for i in 0..hi {
        if i < n && i < m {
            total += bank.eval_sq_dist(dist_sq(a.row(i), b.row(i)));
        }
        for j in (i + 1)..hi {
            let mut group = F::zero();
            if i < n && j < m {
                group += bank.eval_sq_dist(dist_sq(a.row(i), b.row(j)));
            }
            if j < n && i < m {
                group += bank.eval_sq_dist(dist_sq(a.row(j), b.row(i)));
            }
            total += group;
        }
    }
    total
}

fn check_pair<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>, min_rows: usize) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::parameter(format!(
            "mmd operands need matching dims, got {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    if a.rows() < min_rows || b.rows() < min_rows {
        return Err(Error::parameter(format!(
            "mmd operands need at least {min_rows} rows, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    Ok(())
}

/// Biased (V-statistic) squared MMD: diagonal-included within-domain means
/// plus the cross term. Nonnegative up to roundoff, zero when `a == b`.
pub fn mmd_sq_biased<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>, bank: &KernelBank<F>) -> Result<F> {
    check_pair(a, b, 1)?;
    let (n, m) = (a.rows(), b.rows());
    let mut kaa = F::zero();
    for i in 0..n {
        for j in 0..n {
            kaa += bank.eval_sq_dist(dist_sq(a.row(i), a.row(j)));
        }
    }
    let mut kbb = F::zero();
    for i in 0..m {
        for j in 0..m {
            kbb += bank.eval_sq_dist(dist_sq(b.row(i), b.row(j)));
        }
    }
    let kab = cross_kernel_sum(a, b, bank);
    let nf = F::from_usize(n).unwrap();
    let mf = F::from_usize(m).unwrap();
    let two = F::from_f64_lossy(2.0);
    Ok(kaa / (nf * nf) + kbb / (mf * mf) - two * kab / (nf * mf))
}

/// Unbiased (U-statistic) squared MMD: diagonal-excluded within-domain sums
/// with divisors `n(n-1)` and `m(m-1)`. May be negative.
pub fn mmd_sq_unbiased<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>, bank: &KernelBank<F>) -> Result<F> {
    check_pair(a, b, 2)?;
    let (n, m) = (a.rows(), b.rows());
    let mut kaa = F::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kaa += bank.eval_sq_dist(dist_sq(a.row(i), a.row(j)));
            }
        }
    }
    let mut kbb = F::zero();
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kbb += bank.eval_sq_dist(dist_sq(b.row(i), b.row(j)));
            }
        }
    }
    let kab = cross_kernel_sum(a, b, bank);
    let nf = F::from_usize(n).unwrap();
    let mf = F::from_usize(m).unwrap();
    let two = F::from_f64_lossy(2.0);
    Ok(kaa / (nf * (nf - F::one())) + kbb / (mf * (mf - F::one())) - two * kab / (nf * mf))
}

/// Biased squared MMD together with its gradient with respect to every entry
/// of `a` and `b`.
///
/// For the Gaussian kernel, `d k(x, y) / d x = k(x, y) (y - x) / sigma^2`;
/// the within-domain double sums contribute twice by symmetry.
pub fn mmd_sq_biased_with_grad<F: Scalar>(
    a: &Matrix<F>,
    b: &Matrix<F>,
    bank: &KernelBank<F>,
) -> Result<(F, Matrix<F>, Matrix<F>)> {
    check_pair(a, b, 1)?;
    let (n, m) = (a.rows(), b.rows());
    let d = a.cols();
    let nf = F::from_usize(n).unwrap();
    let mf = F::from_usize(m).unwrap();
    let two = F::from_f64_lossy(2.0);
    let mut value = F::zero();
    let mut ga = Matrix::zeros(n, d);
    let mut gb = Matrix::zeros(m, d);

    let half = F::from_f64_lossy(0.5);
    let coef_aa = F::one() / (nf * nf);
    for i in 0..n {
        for j in 0..n {
            let d2 = dist_sq(a.row(i), a.row(j));
            for (&s, &w) in bank.bandwidths.iter().zip(&bank.weights) {
                let s2 = s * s;
                let kv = (-(d2 * half) / s2).exp();
                value += coef_aa * w * kv;
                if i != j {
                    let g = coef_aa * w * kv / s2;
                    for t in 0..d {
                        let diff = a.get(j, t) - a.get(i, t);
                        // both slots of the symmetric sum hit row i
                        ga.set(i, t, ga.get(i, t) + two * g * diff);
                    }
                }
            }
        }
    }
    let coef_bb = F::one() / (mf * mf);
    for i in 0..m {
        for j in 0..m {
            let d2 = dist_sq(b.row(i), b.row(j));
            for (&s, &w) in bank.bandwidths.iter().zip(&bank.weights) {
                let s2 = s * s;
                let kv = (-(d2 * half) / s2).exp();
                value += coef_bb * w * kv;
                if i != j {
                    let g = coef_bb * w * kv / s2;
                    for t in 0..d {
                        let diff = b.get(j, t) - b.get(i, t);
                        gb.set(i, t, gb.get(i, t) + two * g * diff);
                    }
                }
            }
        }
    }
    let coef_ab = -two / (nf * mf);
    for i in 0..n {
        for j in 0..m {
            let d2 = dist_sq(a.row(i), b.row(j));
            for (&s, &w) in bank.bandwidths.iter().zip(&bank.weights) {
                let s2 = s * s;
                let kv = (-(d2 * half) / s2).exp();
                value += coef_ab * w * kv;
                let g = coef_ab * w * kv / s2;
                for t in 0..d {
                    let diff = b.get(j, t) - a.get(i, t);
                    ga.set(i, t, ga.get(i, t) + g * diff);
                    gb.set(j, t, gb.get(j, t) - g * diff);
                }
            }
        }
    }
    Ok((value, ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use crate::Mat;

    /// Independent triple-loop oracle: explicit sums over samples and kernels.
    fn mmd_oracle(a: &Mat, b: &Mat, bank: &KernelBank<f64>, unbiased: bool) -> f64 {
        let kernel = |x: &[f64], y: &[f64]| -> f64 {
            let mut total = 0.0;
            for (s, w) in bank.bandwidths().iter().zip(bank.weights()) {
                let mut d2 = 0.0;
                for t in 0..x.len() {
                    d2 += (x[t] - y[t]) * (x[t] - y[t]);
                }
                total += w * (-d2 / (2.0 * s * s)).exp();
            }
            total
        };
        let (n, m) = (a.rows() as f64, b.rows() as f64);
        let mut kaa = 0.0;
        for i in 0..a.rows() {
            for j in 0..a.rows() {
                if unbiased && i == j {
                    continue;
                }
                kaa += kernel(a.row(i), a.row(j));
            }
        }
        let mut kbb = 0.0;
        for i in 0..b.rows() {
            for j in 0..b.rows() {
                if unbiased && i == j {
                    continue;
                }
                kbb += kernel(b.row(i), b.row(j));
            }
        }
        let mut kab = 0.0;
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                kab += kernel(a.row(i), b.row(j));
            }
        }
        if unbiased {
            kaa / (n * (n - 1.0)) + kbb / (m * (m - 1.0)) - 2.0 * kab / (n * m)
        } else {
            kaa / (n * n) + kbb / (m * m) - 2.0 * kab / (n * m)
        }
    }

    fn random_matrix(rng: &mut RngState, n: usize, d: usize) -> Mat {
        Mat::from_fn(n, d, |_, _| rng.normal())
    }

    #[test]
    fn median_bank_hand_case() {
        // two points at distance sqrt(2): median squared distance 2
        let a = Mat::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Mat::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let bank = median_heuristic_bank(&a, &b, 1, 2.0).unwrap();
        assert!((bank.bandwidths()[0] - 2.0f64.sqrt()).abs() < 1e-14);
        assert_eq!(bank.weights(), &[1.0]);
    }

    #[test]
    fn median_bank_geometric_ladder() {
        let mut rng = RngState::new(2);
        let a = random_matrix(&mut rng, 6, 3);
        let b = random_matrix(&mut rng, 5, 3);
        let bank = median_heuristic_bank(&a, &b, 5, 2.0).unwrap();
        let center_sq = bank.bandwidths()[2] * bank.bandwidths()[2];
        let expect = [0.25, 0.5, 1.0, 2.0, 4.0];
        for (s, e) in bank.bandwidths().iter().zip(expect) {
            assert!((s * s / center_sq - e).abs() < 1e-12);
        }
    }

    #[test]
    fn median_bank_scales_with_data() {
        let mut rng = RngState::new(3);
        let a = random_matrix(&mut rng, 7, 4);
        let b = random_matrix(&mut rng, 6, 4);
        let bank = median_heuristic_bank(&a, &b, 3, 2.0).unwrap();
        let scaled = median_heuristic_bank(&a.scale(2.5), &b.scale(2.5), 3, 2.0).unwrap();
        for (s, t) in bank.bandwidths().iter().zip(scaled.bandwidths()) {
            assert!((t / s - 2.5).abs() < 1e-10);
        }
    }

    #[test]
    fn median_bank_rejects_identical_rows() {
        let a = Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let b = Mat::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            median_heuristic_bank(&a, &b, 3, 2.0),
            Err(crate::Error::DegenerateData(_))
        ));
    }

    #[test]
    fn biased_mmd_zero_on_identical_input() {
        let mut rng = RngState::new(5);
        let x = random_matrix(&mut rng, 9, 4);
        let bank = KernelBank::new(vec![0.5, 1.0, 2.0], vec![0.25, 0.5, 0.25]).unwrap();
        let v = mmd_sq_biased(&x, &x, &bank).unwrap();
        assert!(v.abs() <= 1e-12, "mmd(X, X) = {v}");
    }

    #[test]
    fn estimators_are_symmetric() {
        let mut rng = RngState::new(6);
        let a = random_matrix(&mut rng, 5, 3);
        let b = random_matrix(&mut rng, 7, 3);
        let bank = KernelBank::single(1.3).unwrap();
        assert_eq!(
            mmd_sq_biased(&a, &b, &bank).unwrap(),
            mmd_sq_biased(&b, &a, &bank).unwrap()
        );
        assert_eq!(
            mmd_sq_unbiased(&a, &b, &bank).unwrap(),
            mmd_sq_unbiased(&b, &a, &bank).unwrap()
        );
    }

    #[test]
    fn biased_matches_triple_loop_oracle() {
        let mut rng = RngState::new(7);
        let a = random_matrix(&mut rng, 3, 2);
        let b = random_matrix(&mut rng, 3, 2);
        let bank = KernelBank::single(0.8).unwrap();
        let v = mmd_sq_biased(&a, &b, &bank).unwrap();
        assert!((v - mmd_oracle(&a, &b, &bank, false)).abs() < 1e-12);
    }

    #[test]
    fn unbiased_matches_triple_loop_oracle() {
        let mut rng = RngState::new(8);
        let a = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 4, 3);
        let bank = KernelBank::single(1.1).unwrap();
        let v = mmd_sq_unbiased(&a, &b, &bank).unwrap();
        assert!((v - mmd_oracle(&a, &b, &bank, true)).abs() < 1e-12);
    }

    #[test]
    fn unbiased_is_centered_on_same_distribution() {
        // Monte-Carlo: across seeds the unbiased estimator averages near zero
        let bank = KernelBank::single(1.0).unwrap();
        let mut values = Vec::new();
        for seed in 0..200 {
            let mut rng = RngState::new(1000 + seed);
            let a = random_matrix(&mut rng, 12, 3);
            let b = random_matrix(&mut rng, 12, 3);
            values.push(mmd_sq_unbiased(&a, &b, &bank).unwrap());
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} exceeds 3 standard errors {se}");
    }

    #[test]
    fn unbiased_rejects_single_row() {
        let a = Mat::from_rows(&[vec![1.0]]).unwrap();
        let b = Mat::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let bank = KernelBank::single(1.0).unwrap();
        assert!(mmd_sq_unbiased(&a, &b, &bank).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = RngState::new(11);
        let a = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 5, 3);
        let bank = KernelBank::new(vec![0.7, 1.4], vec![0.5, 0.5]).unwrap();
        let (_, ga, gb) = mmd_sq_biased_with_grad(&a, &b, &bank).unwrap();
        let h = 1e-5;
        for (mat, grad, is_a) in [(&a, &ga, true), (&b, &gb, false)] {
            for i in 0..mat.rows() {
                for j in 0..mat.cols() {
                    let mut plus = mat.clone();
                    plus.set(i, j, plus.get(i, j) + h);
                    let mut minus = mat.clone();
                    minus.set(i, j, minus.get(i, j) - h);
                    let (vp, vm) = if is_a {
                        (
                            mmd_sq_biased(&plus, &b, &bank).unwrap(),
                            mmd_sq_biased(&minus, &b, &bank).unwrap(),
                        )
                    } else {
                        (
                            mmd_sq_biased(&a, &plus, &bank).unwrap(),
                            mmd_sq_biased(&a, &minus, &bank).unwrap(),
                        )
                    };
                    let fd = (vp - vm) / (2.0 * h);
                    let an = grad.get(i, j);
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                    assert!(rel < 1e-4, "grad mismatch at ({i},{j}): {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn value_from_grad_path_matches_plain_value() {
        let mut rng = RngState::new(12);
        let a = random_matrix(&mut rng, 6, 4);
        let b = random_matrix(&mut rng, 5, 4);
        let bank = KernelBank::new(vec![0.5, 1.0, 2.0], vec![1.0 / 3.0; 3]).unwrap();
        let (v, _, _) = mmd_sq_biased_with_grad(&a, &b, &bank).unwrap();
        let plain = mmd_sq_biased(&a, &b, &bank).unwrap();
        assert!((v - plain).abs() < 1e-12);
    }
}
