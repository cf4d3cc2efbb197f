//! Conditional feature generator and discriminator.
//!
//! The generator maps a uniform noise vector and a one-hot class label to a
//! feature vector: `leaky(W_z z + W_y y)`, rescaled to the average real
//! feature norm `beta`. `W_y` starts at the class centroids (one column per
//! class) and `W_z` at the top principal components of the source training
//! features, each column scaled by its eigenvalue, so the class-center and
//! class-variance structure of the real data seeds the generator. The
//! discriminator is a single logistic unit.

use crate::datasets::{one_hot, DomainDataset};
use crate::error::{Error, Result};
use crate::numerics::matrix::norm;
use crate::numerics::{class_centroids, pca_fit, Matrix, RngState};
use crate::scalar::Scalar;

/// Resample attempts before a degenerate (all-zero) generator output is
/// reported to the caller.
pub const MAX_RESAMPLE_ATTEMPTS: usize = 100;

/// Generator weights. `w_y_init` is the frozen initialization used by the
/// anchor penalty; it is never updated.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<F> {
    pub w_z: Matrix<F>,
    pub w_y: Matrix<F>,
    w_y_init: Matrix<F>,
    pub slope: F,
}

impl<F: Scalar> GeneratorParams<F> {
    pub fn feature_dim(&self) -> usize {
        self.w_z.rows()
    }

    pub fn noise_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn class_count(&self) -> usize {
        self.w_y.cols()
    }

    pub fn w_y_init(&self) -> &Matrix<F> {
        &self.w_y_init
    }

    /// Rebuild from checkpoint sections; `w_y_init` comes from the file.
    pub fn from_parts(w_z: Matrix<F>, w_y: Matrix<F>, w_y_init: Matrix<F>, slope: F) -> Result<Self> {
        if w_z.rows() != w_y.rows() || w_y.shape() != w_y_init.shape() {
            return Err(Error::parameter("generator part shapes disagree".to_string()));
        }
        Ok(Self { w_z, w_y, w_y_init, slope })
    }
}

/// Single logistic discriminator unit: `sigmoid(w_d x + b_d)`.
/// `b_d` is a 1x1 matrix so optimizer plumbing treats it like any tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<F> {
    pub w_d: Matrix<F>,
    pub b_d: Matrix<F>,
}

impl<F: Scalar> DiscriminatorParams<F> {
    pub fn feature_dim(&self) -> usize {
        self.w_d.cols()
    }

    pub fn bias(&self) -> F {
        self.b_d.get(0, 0)
    }
}

/// Noise distribution of the generator: per-coordinate uniform on `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseSpec {
    pub dim: usize,
}

impl NoiseSpec {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::parameter("noise dimension must be >= 1".to_string()));
        }
        Ok(Self { dim })
    }

    pub fn draw<F: Scalar>(&self, rng: &mut RngState) -> Vec<F> {
        (0..self.dim).map(|_| F::from_f64_lossy(rng.uniform_symmetric())).collect()
    }
}

/// How labels are assigned to generated samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FakeLabelPolicy {
    /// Independent uniform draws over all classes.
    Uniform,
    /// Round-robin over class ids, so a batch of size `c` holds each class once.
    Balanced,
    /// Every sample gets the same class.
    Single(usize),
}

impl std::fmt::Display for FakeLabelPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FakeLabelPolicy::Uniform => write!(f, "uniform"),
            FakeLabelPolicy::Balanced => write!(f, "balanced"),
            FakeLabelPolicy::Single(k) => write!(f, "class:{k}"),
        }
    }
}

impl std::str::FromStr for FakeLabelPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(FakeLabelPolicy::Uniform),
            "balanced" => Ok(FakeLabelPolicy::Balanced),
            other => match other.strip_prefix("class:") {
                Some(k) => k
                    .parse()
                    .map(FakeLabelPolicy::Single)
                    .map_err(|_| Error::parameter(format!("bad fake label policy '{other}'"))),
                None => Err(Error::parameter(format!("bad fake label policy '{other}'"))),
            },
        }
    }
}

impl serde::Serialize for FakeLabelPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for FakeLabelPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Initialize the generator from labeled source training data:
/// `w_y` columns are class centroids, `w_z` columns the top `d_z` principal
/// components scaled by their eigenvalues.
pub fn init_generator<F: Scalar>(
    source_train: &DomainDataset<F>,
    d_z: usize,
    slope: F,
) -> Result<GeneratorParams<F>> {
    let labels = source_train.labels()?;
    let n = source_train.len();
    let d_x = source_train.dim();
    if d_z == 0 || d_z > n.min(d_x) {
        return Err(Error::parameter(format!(
            "noise dimension {d_z} out of range [1, {}]",
            n.min(d_x)
        )));
    }
    let w_y = class_centroids(&source_train.features, labels, source_train.class_count)?;
    let pcs = pca_fit(&source_train.features, d_z)?;
    Ok(GeneratorParams { w_z: pcs.components, w_y_init: w_y.clone(), w_y, slope })
}

/// Fresh discriminator: small random weights, zero bias.
pub fn init_discriminator<F: Scalar>(d_x: usize, rng: &mut RngState) -> DiscriminatorParams<F> {
    let scale = 1.0 / (d_x as f64).sqrt();
    let w_d = Matrix::from_fn(1, d_x, |_, _| F::from_f64_lossy(scale * rng.normal()));
    DiscriminatorParams { w_d, b_d: Matrix::zeros(1, 1) }
}

#[inline]
pub fn leaky<F: Scalar>(t: F, slope: F) -> F {
    if t > F::zero() {
        t
    } else {
        slope * t
    }
}

#[inline]
pub fn logistic<F: Scalar>(t: F) -> F {
    F::one() / (F::one() + (-t).exp())
}

/// One generated feature vector: `N(leaky(W_z z + W_y y))` where `N`
/// rescales to Euclidean norm `beta`. A zero pre-normalization vector is a
/// degenerate sample; the caller resamples `z`.
pub fn generator_forward<F: Scalar>(
    g: &GeneratorParams<F>,
    z: &[F],
    y: &[F],
    beta: F,
) -> Result<Vec<F>> {
    if z.len() != g.noise_dim() || y.len() != g.class_count() {
        return Err(Error::parameter(format!(
            "generator inputs z:{} y:{} do not match dims z:{} y:{}",
            z.len(),
            y.len(),
            g.noise_dim(),
            g.class_count()
        )));
    }
    if !(beta > F::zero()) {
        return Err(Error::parameter("beta must be positive".to_string()));
    }
    let d_x = g.feature_dim();
    let mut x = vec![F::zero(); d_x];
    for i in 0..d_x {
        let mut acc = F::zero();
        for (k, &zk) in z.iter().enumerate() {
            acc += g.w_z.get(i, k) * zk;
        }
        for (k, &yk) in y.iter().enumerate() {
            if yk != F::zero() {
                acc += g.w_y.get(i, k) * yk;
            }
        }
        x[i] = leaky(acc, g.slope);
    }
    let n = norm(&x);
    if n == F::zero() {
        return Err(Error::DegenerateSample("generator output collapsed to zero".to_string()));
    }
    let s = beta / n;
    for v in &mut x {
        *v *= s;
    }
    Ok(x)
}

/// Discriminator score in (0, 1).
pub fn discriminator_forward<F: Scalar>(d: &DiscriminatorParams<F>, x: &[F]) -> Result<F> {
    if x.len() != d.feature_dim() {
        return Err(Error::parameter(format!(
            "discriminator input dim {} != {}",
            x.len(),
            d.feature_dim()
        )));
    }
    let t = crate::numerics::matrix::dot(d.w_d.row(0), x) + d.bias();
    Ok(logistic(t))
}

/// Scores for every row of `x`.
pub fn discriminator_forward_batch<F: Scalar>(
    d: &DiscriminatorParams<F>,
    x: &Matrix<F>,
) -> Result<Vec<F>> {
    (0..x.rows()).map(|i| discriminator_forward(d, x.row(i))).collect()
}

/// Generator loss: negative mean discriminator score on the fake batch.
pub fn loss_g<F: Scalar>(scores_fake: &[F]) -> Result<F> {
    if scores_fake.is_empty() {
        return Err(Error::parameter("generator loss of an empty batch".to_string()));
    }
    let mean = scores_fake.iter().copied().sum::<F>() / F::from_usize(scores_fake.len()).unwrap();
    Ok(-mean)
}

/// Discriminator loss: `-mean(real) - mean(1 - fake)`, which equals
/// `-mean(real) + mean(fake) - 1`; minimizing pushes real scores up and fake
/// scores down. No logarithms: the scores are already squashed to (0, 1).
pub fn loss_d<F: Scalar>(scores_real: &[F], scores_fake: &[F]) -> Result<F> {
    if scores_real.is_empty() || scores_fake.is_empty() {
        return Err(Error::parameter("discriminator loss of an empty batch".to_string()));
    }
    let mean_r = scores_real.iter().copied().sum::<F>() / F::from_usize(scores_real.len()).unwrap();
    let mean_f = scores_fake.iter().copied().sum::<F>() / F::from_usize(scores_fake.len()).unwrap();
    let one_minus_f = F::one() - mean_f;
    Ok(-mean_r - one_minus_f)
}

/// Squared deviation of the normal-class columns of `w_y` from their frozen
/// initialization: `sum_k ||w_y[:, k] - w_y_init[:, k]||^2` over `k` in the
/// normal set.
pub fn wy_anchor_penalty<F: Scalar>(g: &GeneratorParams<F>, normal_classes: &[usize]) -> F {
    let mut total = F::zero();
    for &k in normal_classes {
        for i in 0..g.w_y.rows() {
            let d = g.w_y.get(i, k) - g.w_y_init.get(i, k);
            total += d * d;
        }
    }
    total
}

/// Draw a labeled fake batch: labels per `policy`, noise per [`NoiseSpec`],
/// features via [`generator_forward`]. Degenerate samples are retried up to
/// [`MAX_RESAMPLE_ATTEMPTS`] times before the error propagates.
pub fn sample_fake_batch<F: Scalar>(
    g: &GeneratorParams<F>,
    rng: &mut RngState,
    beta: F,
    batch: usize,
    policy: FakeLabelPolicy,
) -> Result<(Matrix<F>, Vec<usize>)> {
    if batch == 0 {
        return Err(Error::parameter("fake batch must be nonempty".to_string()));
    }
    let c = g.class_count();
    let labels: Vec<usize> = match policy {
        FakeLabelPolicy::Uniform => (0..batch).map(|_| rng.index(c)).collect(),
        FakeLabelPolicy::Balanced => (0..batch).map(|i| i % c).collect(),
        FakeLabelPolicy::Single(k) => {
            if k >= c {
                return Err(Error::parameter(format!("fake label {k} out of range [0, {c})")));
            }
            vec![k; batch]
        }
    };
    let noise = NoiseSpec::new(g.noise_dim())?;
    let mut features = Matrix::zeros(batch, g.feature_dim());
    for (i, &label) in labels.iter().enumerate() {
        let y = one_hot::<F>(label, c)?;
        let mut attempts = 0;
        loop {
            let z = noise.draw::<F>(rng);
            match generator_forward(g, &z, &y, beta) {
                Ok(x) => {
                    features.row_mut(i).copy_from_slice(&x);
                    break;
                }
                Err(Error::DegenerateSample(msg)) => {
                    attempts += 1;
                    if attempts >= MAX_RESAMPLE_ATTEMPTS {
                        return Err(Error::DegenerateSample(format!(
                            "{msg} ({attempts} attempts)"
                        )));
                    }
                }
                Err(other) => return Err(other),
            }
        }
    }
    Ok((features, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Mat;

    fn toy_source() -> DomainDataset {
        // 3 classes in 4 dims, clearly separated positive centroids
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = RngState::new(21);
        let means = [[5.0, 1.0, 1.0, 1.0], [1.0, 5.0, 1.0, 1.0], [1.0, 1.0, 5.0, 1.0]];
        for (class, mean) in means.iter().enumerate() {
            for _ in 0..8 {
                rows.push(mean.iter().map(|m| m + 0.3 * rng.normal()).collect::<Vec<_>>());
                labels.push(class);
            }
        }
        DomainDataset::new(Mat::from_rows(&rows).unwrap(), Some(labels), "src", 3).unwrap()
    }

    #[test]
    fn init_puts_centroids_in_wy_columns() {
        let src = toy_source();
        let g = init_generator(&src, 2, 0.2).unwrap();
        let centroids =
            class_centroids(&src.features, src.labels().unwrap(), src.class_count).unwrap();
        for k in 0..3 {
            let y = one_hot::<f64>(k, 3).unwrap();
            // W_y * one_hot(k) selects column k exactly
            for i in 0..4 {
                let picked: f64 = (0..3).map(|j| g.w_y.get(i, j) * y[j]).sum();
                assert_eq!(picked, centroids.get(i, k));
            }
        }
    }

    #[test]
    fn init_scales_wz_columns_by_eigenvalues() {
        let src = toy_source();
        let g = init_generator(&src, 3, 0.2).unwrap();
        let pcs = pca_fit(&src.features, 3).unwrap();
        for j in 0..3 {
            let col = g.w_z.column(j);
            assert!((norm(&col) - pcs.eigenvalues[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn init_matches_composition_of_independent_calls() {
        let src = toy_source();
        let g = init_generator(&src, 2, 0.1).unwrap();
        let centroids =
            class_centroids(&src.features, src.labels().unwrap(), src.class_count).unwrap();
        let pcs = pca_fit(&src.features, 2).unwrap();
        assert_eq!(g.w_y, centroids);
        assert_eq!(g.w_z, pcs.components);
        assert_eq!(g.w_y_init(), &centroids);
    }

    #[test]
    fn init_rejects_oversized_noise_dim() {
        let src = toy_source();
        assert!(init_generator(&src, 5, 0.2).is_err());
        assert!(init_generator(&src, 0, 0.2).is_err());
    }

    #[test]
    fn forward_with_zero_noise_returns_scaled_centroid() {
        let src = toy_source();
        let g = init_generator(&src, 2, 0.37).unwrap();
        let beta = 2.5;
        for k in 0..3 {
            let y = one_hot::<f64>(k, 3).unwrap();
            let z = vec![0.0; 2];
            let x = generator_forward(&g, &z, &y, beta).unwrap();
            // centroids are strictly positive, so the rectifier is the identity
            let centroid = g.w_y.column(k);
            let cn = norm(&centroid);
            for i in 0..4 {
                assert!((x[i] - beta * centroid[i] / cn).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_output_norm_equals_beta() {
        let src = toy_source();
        let g = init_generator(&src, 3, 0.2).unwrap();
        let mut rng = RngState::new(33);
        let noise = NoiseSpec::new(3).unwrap();
        for _ in 0..50 {
            let z = noise.draw::<f64>(&mut rng);
            let y = one_hot::<f64>(rng.index(3), 3).unwrap();
            let x = generator_forward(&g, &z, &y, 1.7).unwrap();
            assert!((norm(&x) - 1.7).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_matches_step_by_step_oracle() {
        let w_z = Mat::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25], vec![-0.75, 1.5]]).unwrap();
        let w_y = Mat::from_rows(&[vec![1.0, -2.0], vec![-0.5, 0.5], vec![3.0, 1.0]]).unwrap();
        let g = GeneratorParams::from_parts(w_z.clone(), w_y.clone(), w_y.clone(), 0.2).unwrap();
        let z = vec![0.3, -0.6];
        let y = vec![0.0, 1.0];
        let beta = 1.3;
        let x = generator_forward(&g, &z, &y, beta).unwrap();
        // oracle: affine, rectify, normalize, step by step
        let mut pre = vec![0.0; 3];
        for i in 0..3 {
            pre[i] = w_z.get(i, 0) * z[0] + w_z.get(i, 1) * z[1] + w_y.get(i, 1);
            if pre[i] <= 0.0 {
                pre[i] *= 0.2;
            }
        }
        let n = (pre.iter().map(|v| v * v).sum::<f64>()).sqrt();
        for i in 0..3 {
            assert!((x[i] - beta * pre[i] / n).abs() < 1e-14);
        }
    }

    #[test]
    fn one_hot_conditioning_shifts_preactivation_by_column_difference() {
        let src = toy_source();
        let g = init_generator(&src, 2, 0.2).unwrap();
        let z = vec![0.4, -0.2];
        // compare pre-activations directly: x = W_z z + W_y y
        let pre = |label: usize| -> Vec<f64> {
            (0..4)
                .map(|i| {
                    g.w_z.get(i, 0) * z[0] + g.w_z.get(i, 1) * z[1] + g.w_y.get(i, label)
                })
                .collect()
        };
        let pa = pre(0);
        let pb = pre(2);
        for i in 0..4 {
            let expected = g.w_y.get(i, 2) - g.w_y.get(i, 0);
            assert!((pb[i] - pa[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn discriminator_examples() {
        let d = DiscriminatorParams::<f64> { w_d: Mat::zeros(1, 3), b_d: Mat::zeros(1, 1) };
        assert_eq!(discriminator_forward(&d, &[5.0, -2.0, 0.1]).unwrap(), 0.5);

        let d = DiscriminatorParams::<f64> {
            w_d: Mat::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap(),
            b_d: Mat::zeros(1, 1),
        };
        let mut last = 0.0;
        for t in [-10.0, -1.0, 0.0, 1.0, 10.0, 30.0] {
            let s = discriminator_forward(&d, &[t, 0.0, 0.0]).unwrap();
            assert!(s > last && s > 0.0 && s < 1.0);
            last = s;
        }
        assert!((1.0 - last) < 1e-10);

        let mut rng = RngState::new(44);
        let d = DiscriminatorParams::<f64> {
            w_d: Mat::from_fn(1, 4, |_, _| rng.normal()),
            b_d: Mat::scalar(rng.normal()),
        };
        let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let t: f64 = (0..4).map(|i| d.w_d.get(0, i) * x[i]).sum::<f64>() + d.bias();
        let oracle = 1.0 / (1.0 + (-t).exp());
        assert!((discriminator_forward(&d, &x).unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn loss_g_examples() {
        assert_eq!(loss_g(&[0.5f64, 0.5, 0.5]).unwrap(), -0.5);
        assert_eq!(loss_g(&[1.0f64, 1.0]).unwrap(), -1.0);
        assert!((loss_g(&[0.2f64, 0.6]).unwrap() - (-0.4)).abs() < 1e-15);
        assert!(loss_g::<f64>(&[]).is_err());
    }

    #[test]
    fn loss_d_examples_and_identity() {
        assert_eq!(loss_d(&[1.0f64, 1.0], &[0.0, 0.0]).unwrap(), -2.0);
        assert_eq!(loss_d(&[0.5f64], &[0.5, 0.5]).unwrap(), -1.0);
        let mut rng = RngState::new(55);
        for _ in 0..20 {
            let r: Vec<f64> = (0..5).map(|_| rng.uniform()).collect();
            let f: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
            let lhs = loss_d(&r, &f).unwrap();
            let mean_r = r.iter().sum::<f64>() / 5.0;
            let mean_f = f.iter().sum::<f64>() / 3.0;
            assert!((lhs - (-mean_r + mean_f - 1.0)).abs() < 1e-15);
            // and the combined-batch identity with the generator loss
            let lg = loss_g(&f).unwrap();
            assert!((lhs + lg - (-mean_r - 1.0)).abs() < 1e-15);
        }
        assert!(loss_d::<f64>(&[], &[0.5]).is_err());
    }

    #[test]
    fn anchor_penalty_examples() {
        let src = toy_source();
        let mut g = init_generator(&src, 2, 0.2).unwrap();
        let normal = vec![0usize, 1];
        assert_eq!(wy_anchor_penalty(&g, &normal), 0.0);
        // shift a normal column by a unit vector
        g.w_y.set(2, 1, g.w_y.get(2, 1) + 1.0);
        assert!((wy_anchor_penalty(&g, &normal) - 1.0).abs() < 1e-12);
        // brute-force oracle on a random perturbation
        let mut rng = RngState::new(66);
        let mut g2 = init_generator(&src, 2, 0.2).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                g2.w_y.set(i, j, g2.w_y.get(i, j) + 0.1 * rng.normal());
            }
        }
        let mut expected = 0.0;
        for &k in &normal {
            for i in 0..4 {
                let d = g2.w_y.get(i, k) - g2.w_y_init().get(i, k);
                expected += d * d;
            }
        }
        assert!((wy_anchor_penalty(&g2, &normal) - expected).abs() < 1e-14);
    }

    #[test]
    fn fake_batch_policies() {
        let src = toy_source();
        let g = init_generator(&src, 2, 0.2).unwrap();
        let mut rng = RngState::new(77);
        let (_, labels) =
            sample_fake_batch(&g, &mut rng, 1.0, 6, FakeLabelPolicy::Single(1)).unwrap();
        assert!(labels.iter().all(|&l| l == 1));
        let (_, labels) = sample_fake_batch(&g, &mut rng, 1.0, 3, FakeLabelPolicy::Balanced).unwrap();
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn fake_batch_is_deterministic_in_seed() {
        let src = toy_source();
        let g = init_generator(&src, 2, 0.2).unwrap();
        let mut r1 = RngState::new(88);
        let mut r2 = RngState::new(88);
        let (f1, l1) = sample_fake_batch(&g, &mut r1, 1.4, 10, FakeLabelPolicy::Uniform).unwrap();
        let (f2, l2) = sample_fake_batch(&g, &mut r2, 1.4, 10, FakeLabelPolicy::Uniform).unwrap();
        assert_eq!(l1, l2);
        for (a, b) in f1.data().iter().zip(f2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
