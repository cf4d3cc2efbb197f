//! Desk-scale synthetic benchmark: Gaussian class blobs with a rotated and
//! translated target domain.

use serde::{Deserialize, Serialize};

use crate::datasets::DomainDataset;
use crate::error::{Error, Result};
use crate::numerics::RngState;
use crate::Mat;

/// RNG stream label for data synthesis (keeps it independent of training).
const SYNTH_STREAM: u64 = 0x5d;

/// Configuration of a synthetic source/target domain pair.
///
/// Class means are drawn once from a scaled normal. Source samples add
/// isotropic noise; target samples use the same class means pushed through a
/// sequence of plane rotations (angle `i` in coordinate plane `(2i, 2i+1)`)
/// plus a translation, with independent noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainConfig {
    pub class_count: usize,
    pub feature_dim: usize,
    pub mean_scale: f64,
    pub noise_std: f64,
    /// Rotation angles in degrees; angle `i` acts on coordinates `2i, 2i+1`.
    pub rotation_angles_deg: Vec<f64>,
    /// Translation of target class means; zero-padded to `feature_dim`.
    pub translation: Vec<f64>,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SyntheticDomainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::parameter("synthetic config needs classes".to_string()));
        }
        if self.feature_dim < 2 {
            return Err(Error::parameter("synthetic config needs feature_dim >= 2".to_string()));
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::parameter("noise_std must be positive".to_string()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::parameter("samples_per_class must be >= 1".to_string()));
        }
        if 2 * self.rotation_angles_deg.len() > self.feature_dim {
            return Err(Error::parameter(format!(
                "{} rotation planes need feature_dim >= {}",
                self.rotation_angles_deg.len(),
                2 * self.rotation_angles_deg.len()
            )));
        }
        if self.translation.len() > self.feature_dim {
            return Err(Error::parameter("translation longer than feature_dim".to_string()));
        }
        Ok(())
    }
}

/// Ground truth retained for verification: the generative class means of both
/// domains and the transform between them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticGroundTruth {
    /// One row per class.
    pub source_means: Vec<Vec<f64>>,
    pub target_means: Vec<Vec<f64>>,
    pub rotation_angles_deg: Vec<f64>,
    pub translation: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub truth: SyntheticGroundTruth,
}

/// Apply the configured plane rotations then the translation to one vector.
pub fn apply_domain_transform(cfg: &SyntheticDomainConfig, v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    for (i, angle_deg) in cfg.rotation_angles_deg.iter().enumerate() {
        let (a, b) = (2 * i, 2 * i + 1);
        let theta = angle_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let (x, y) = (out[a], out[b]);
        out[a] = cos * x - sin * y;
        out[b] = sin * x + cos * y;
    }
    for (o, t) in out.iter_mut().zip(&cfg.translation) {
        *o += *t;
    }
    out
}

/// Generate a labeled source/target pair. Both datasets keep their labels;
/// target labels exist for evaluation only and must never reach training.
/// The draw sequence is fixed (means, then source noise, then target noise),
/// so a seed reproduces the pair byte for byte.
pub fn synthesize_domain_pair(cfg: &SyntheticDomainConfig) -> Result<SyntheticPair> {
    cfg.validate()?;
    let mut rng = RngState::stream(cfg.seed, SYNTH_STREAM);
    let c = cfg.class_count;
    let d = cfg.feature_dim;
    let n = cfg.samples_per_class;

    let source_means: Vec<Vec<f64>> =
        (0..c).map(|_| (0..d).map(|_| cfg.mean_scale * rng.normal()).collect()).collect();
    let target_means: Vec<Vec<f64>> =
        source_means.iter().map(|m| apply_domain_transform(cfg, m)).collect();

    let draw_domain = |means: &[Vec<f64>], tag: &str, rng: &mut RngState| -> Result<DomainDataset> {
        let mut rows = Vec::with_capacity(c * n);
        let mut labels = Vec::with_capacity(c * n);
        for (class, mean) in means.iter().enumerate() {
            for _ in 0..n {
                let row: Vec<f64> =
                    mean.iter().map(|&m| m + cfg.noise_std * rng.normal()).collect();
                rows.push(row);
                labels.push(class);
            }
        }
        DomainDataset::new(Mat::from_rows(&rows)?, Some(labels), tag, c)
    };

    let source = draw_domain(&source_means, "source", &mut rng)?;
    let target = draw_domain(&target_means, "target", &mut rng)?;
    Ok(SyntheticPair {
        source,
        target,
        truth: SyntheticGroundTruth {
            source_means,
            target_means,
            rotation_angles_deg: cfg.rotation_angles_deg.clone(),
            translation: cfg.translation.clone(),
        },
    })
}
