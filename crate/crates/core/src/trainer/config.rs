//! Experiment configuration: loaded from TOML, overridden by `--set`,
//! resolved to concrete values, and echoed verbatim into every report so
//! each run directory re-runs to an identical result.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datasets::SyntheticDomainConfig;
use crate::error::{Error, Result};
use crate::gan::FakeLabelPolicy;
use crate::graphs::GanLossKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Gfca,
    #[serde(rename = "gfca-2stage")]
    Gfca2Stage,
    GfcaWofc,
    MmdOnly,
    SourceOnly,
}

impl TrainMode {
    /// Modes that train the generator/discriminator pair at all.
    pub fn uses_gan(self) -> bool {
        matches!(self, TrainMode::Gfca | TrainMode::Gfca2Stage | TrainMode::GfcaWofc)
    }

    /// Modes whose main loop interleaves generator/discriminator updates.
    pub fn interleaves_gan(self) -> bool {
        matches!(self, TrainMode::Gfca | TrainMode::GfcaWofc)
    }

    pub const ALL: [TrainMode; 5] = [
        TrainMode::Gfca,
        TrainMode::Gfca2Stage,
        TrainMode::GfcaWofc,
        TrainMode::MmdOnly,
        TrainMode::SourceOnly,
    ];
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TrainMode::Gfca => "gfca",
            TrainMode::Gfca2Stage => "gfca-2stage",
            TrainMode::GfcaWofc => "gfca-wofc",
            TrainMode::MmdOnly => "mmd-only",
            TrainMode::SourceOnly => "source-only",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gfca" => Ok(TrainMode::Gfca),
            "gfca-2stage" => Ok(TrainMode::Gfca2Stage),
            "gfca-wofc" => Ok(TrainMode::GfcaWofc),
            "mmd-only" => Ok(TrainMode::MmdOnly),
            "source-only" => Ok(TrainMode::SourceOnly),
            other => Err(Error::config("train.mode", format!("unknown mode '{other}'"))),
        }
    }
}

/// Training hyper-parameters. Every field has a default; the resolved values
/// are materialized into the saved config so a default change can never
/// silently alter a reproduction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub seed: u64,
    /// Weight of the alignment (MMD) term.
    pub lambda: f64,
    /// Weight of the fair-classification term.
    pub gamma: f64,
    /// Weight of the real-batch classification term.
    pub weight_real_ce: f64,
    /// Weight of the fake-batch classification term.
    pub weight_fake_ce: f64,
    /// Weight of the generator's anchor penalty.
    pub eta: f64,
    pub batch_real: usize,
    pub batch_target: usize,
    pub batch_fake: usize,
    /// Noise dimension; defaults to `min(d_x, 100)` capped by the training
    /// set size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_z: Option<usize>,
    /// Encoder output dimension.
    pub d_h: usize,
    pub encoder_layers: usize,
    /// Negative slope of the leaky rectifier.
    pub slope: f64,
    pub lr_encoder_classifier: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub pretrain_steps: usize,
    pub main_steps: usize,
    pub kernel_count: usize,
    pub kernel_factor: f64,
    /// Steps between kernel-bank refreshes; 0 resolves to one epoch.
    pub bank_refresh_every: usize,
    pub fake_label_policy: FakeLabelPolicy,
    pub gan_loss: GanLossKind,
    pub classifier_bias: bool,
    /// Include fake embeddings on the source side of the alignment loss.
    pub mmd_include_fake: bool,
    /// Let classification gradients of fake samples reach the generator
    /// during the encoder/classifier update.
    pub fake_grad_to_generator: bool,
    /// Synthetic samples per class in the two-stage augmentation set.
    pub two_stage_aug_per_class: usize,
    /// Synthetic samples per class generated for evaluation diagnostics.
    pub eval_synth_per_class: usize,
    pub log_every: usize,
    /// Steps between checkpoint writes; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Gfca,
            seed: 0,
            lambda: 1.0,
            gamma: 1.0,
            weight_real_ce: 1.0,
            weight_fake_ce: 1.0,
            eta: 1e-2,
            batch_real: 64,
            batch_target: 64,
            batch_fake: 64,
            d_z: None,
            d_h: 256,
            encoder_layers: 2,
            slope: 0.2,
            lr_encoder_classifier: 1e-3,
            lr_generator: 1e-4,
            lr_discriminator: 1e-4,
            pretrain_steps: 500,
            main_steps: 3000,
            kernel_count: 5,
            kernel_factor: 2.0,
            bank_refresh_every: 0,
            fake_label_policy: FakeLabelPolicy::Uniform,
            gan_loss: GanLossKind::AsPrinted,
            classifier_bias: false,
            mmd_include_fake: false,
            fake_grad_to_generator: false,
            two_stage_aug_per_class: 64,
            eval_synth_per_class: 20,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

/// File-backed source/target features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDataConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    /// "csv" or "packed-binary"; inferred from the extension when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    /// Overrides the inferred class count (labels must fit).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
}

/// Exactly one of `files` or `synthetic` must be present.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub files: Option<FileDataConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticDomainConfig>,
}

/// Few-shot protocol settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub few_shot_classes: Vec<usize>,
    pub shots: usize,
    /// Split seed; defaults to the training seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Also write encoder embeddings of every dataset to `embeddings.csv`.
    pub export_embeddings: bool,
}

/// Full experiment description.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Task label used when aggregating runs into tables.
    pub task: String,
    pub data: DataConfig,
    pub protocol: ProtocolConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Static validation; data-dependent resolution happens in
    /// [`ExperimentConfig::resolve`].
    pub fn validate(&self) -> Result<()> {
        match (&self.data.files, &self.data.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::config("data", "both files and synthetic present"))
            }
            (None, None) => {
                return Err(Error::config("data", "one of data.files or data.synthetic required"))
            }
            _ => {}
        }
        if let Some(ref files) = self.data.files {
            if files.source.as_os_str().is_empty() {
                return Err(Error::config("data.files.source", "path is empty"));
            }
            if files.target.as_os_str().is_empty() {
                return Err(Error::config("data.files.target", "path is empty"));
            }
        }
        if let Some(ref synth) = self.data.synthetic {
            synth.validate().map_err(|e| Error::config("data.synthetic", e.to_string()))?;
        }
        if self.protocol.few_shot_classes.is_empty() {
            return Err(Error::config("protocol.few_shot_classes", "must not be empty"));
        }
        if self.protocol.shots == 0 {
            return Err(Error::config("protocol.shots", "must be >= 1"));
        }
        let t = &self.train;
        for (field, v) in [
            ("train.lambda", t.lambda),
            ("train.gamma", t.gamma),
            ("train.eta", t.eta),
            ("train.weight_real_ce", t.weight_real_ce),
            ("train.weight_fake_ce", t.weight_fake_ce),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(field, "must be >= 0"));
            }
        }
        for (field, v) in [
            ("train.batch_real", t.batch_real),
            ("train.batch_target", t.batch_target),
            ("train.batch_fake", t.batch_fake),
            ("train.d_h", t.d_h),
            ("train.encoder_layers", t.encoder_layers),
            ("train.kernel_count", t.kernel_count),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        for (field, v) in [
            ("train.lr_encoder_classifier", t.lr_encoder_classifier),
            ("train.lr_generator", t.lr_generator),
            ("train.lr_discriminator", t.lr_discriminator),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(field, "must be > 0"));
            }
        }
        if !(t.kernel_factor > 1.0) {
            return Err(Error::config("train.kernel_factor", "must be > 1"));
        }
        if t.mode == TrainMode::Gfca2Stage && t.two_stage_aug_per_class == 0 {
            return Err(Error::config("train.two_stage_aug_per_class", "must be >= 1"));
        }
        if let Some(d_z) = t.d_z {
            if d_z == 0 {
                return Err(Error::config("train.d_z", "must be >= 1"));
            }
        }
        Ok(())
    }

    /// Materialize every data-dependent default and mode-forced value.
    /// `d_x` is the feature dimension, `n_train` the post-split training set
    /// size, `n_pool` the oversampled pool size.
    pub fn resolve(&self, d_x: usize, n_train: usize, n_pool: usize) -> Result<ExperimentConfig> {
        self.validate()?;
        let mut out = self.clone();
        let t = &mut out.train;
        // mode-specific consistency: disabled terms are forced off so the
        // echoed config records what actually ran
        match t.mode {
            TrainMode::SourceOnly => {
                t.lambda = 0.0;
                t.gamma = 0.0;
            }
            TrainMode::MmdOnly | TrainMode::GfcaWofc => {
                t.gamma = 0.0;
            }
            TrainMode::Gfca | TrainMode::Gfca2Stage => {}
        }
        let d_z_cap = d_x.min(n_train);
        let d_z = t.d_z.unwrap_or_else(|| d_x.min(100).min(d_z_cap).max(1));
        if d_z > d_z_cap {
            return Err(Error::config(
                "train.d_z",
                format!("{d_z} exceeds min(feature dim, training rows) = {d_z_cap}"),
            ));
        }
        t.d_z = Some(d_z);
        if t.bank_refresh_every == 0 {
            t.bank_refresh_every = (n_pool / t.batch_real).max(1);
        }
        if out.protocol.seed.is_none() {
            out.protocol.seed = Some(t.seed);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.task = "t".into();
        cfg.data.synthetic = Some(SyntheticDomainConfig {
            class_count: 4,
            feature_dim: 8,
            mean_scale: 1.0,
            noise_std: 0.5,
            rotation_angles_deg: vec![],
            translation: vec![],
            samples_per_class: 10,
            seed: 1,
        });
        cfg.protocol.few_shot_classes = vec![3];
        cfg.protocol.shots = 2;
        cfg
    }

    #[test]
    fn mode_strings_round_trip() {
        for mode in TrainMode::ALL {
            let s = mode.to_string();
            assert_eq!(s.parse::<TrainMode>().unwrap(), mode);
            let json = serde_json::to_string(&mode).unwrap();
            assert_eq!(json, format!("\"{s}\""));
        }
    }

    #[test]
    fn validation_requires_exactly_one_data_source() {
        let mut cfg = minimal();
        cfg.data.files = Some(FileDataConfig {
            source: "a.csv".into(),
            target: "b.csv".into(),
            format: None,
            class_count: None,
        });
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        cfg.data.files = None;
        cfg.data.synthetic = None;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn resolve_forces_mode_consistency() {
        let mut cfg = minimal();
        cfg.train.mode = TrainMode::SourceOnly;
        let resolved = cfg.resolve(8, 32, 40).unwrap();
        assert_eq!(resolved.train.lambda, 0.0);
        assert_eq!(resolved.train.gamma, 0.0);

        cfg.train.mode = TrainMode::GfcaWofc;
        let resolved = cfg.resolve(8, 32, 40).unwrap();
        assert_eq!(resolved.train.gamma, 0.0);
        assert_eq!(resolved.train.lambda, 1.0);
    }

    #[test]
    fn resolve_fills_noise_dim_and_refresh() {
        let cfg = minimal();
        let resolved = cfg.resolve(8, 32, 40).unwrap();
        assert_eq!(resolved.train.d_z, Some(8));
        assert_eq!(resolved.train.bank_refresh_every, 1);
        assert_eq!(resolved.protocol.seed, Some(0));
        // resolution is idempotent
        let again = resolved.resolve(8, 32, 40).unwrap();
        assert_eq!(again, resolved);
    }

    #[test]
    fn config_survives_toml_round_trip() {
        let cfg = minimal().resolve(8, 32, 40).unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = "task = 'x'\n[train]\nmodee = 'gfca'\n";
        assert!(toml::from_str::<ExperimentConfig>(text).is_err());
    }
}
