//! Metrics and diagnostics: subset accuracies, cross-task averages,
//! silhouette with cosine distance, centroid similarity, classifier weight
//! norms, and embedding export.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{encoder_forward, ClassifierParams, EncoderParams};
use crate::datasets::FewShotProtocol;
use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, norm};
use crate::numerics::{cosine_similarity, Matrix};
use crate::scalar::Scalar;
use crate::trainer::config::ExperimentConfig;

/// Top-1 accuracy (percent) over the samples whose true class lies in
/// `subset`, micro-averaged over samples.
pub fn subset_accuracy(predictions: &[usize], truth: &[usize], subset: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::parameter(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truth.len()
        )));
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for (&p, &t) in predictions.iter().zip(truth) {
        if subset.contains(&t) {
            total += 1;
            if p == t {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric(
            "no truth samples fall in the requested class subset".to_string(),
        ));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Per-class accuracy vector (percent); classes absent from `truth` are `None`.
pub fn per_class_accuracy(
    predictions: &[usize],
    truth: &[usize],
    class_count: usize,
) -> Result<Vec<Option<f64>>> {
    if predictions.len() != truth.len() {
        return Err(Error::parameter("prediction/truth length mismatch".to_string()));
    }
    let mut total = vec![0usize; class_count];
    let mut correct = vec![0usize; class_count];
    for (&p, &t) in predictions.iter().zip(truth) {
        if t >= class_count {
            return Err(Error::parameter(format!("label {t} out of range")));
        }
        total[t] += 1;
        if p == t {
            correct[t] += 1;
        }
    }
    Ok(total
        .iter()
        .zip(&correct)
        .map(|(&n, &k)| if n == 0 { None } else { Some(100.0 * k as f64 / n as f64) })
        .collect())
}

/// Arithmetic mean of per-task percentages.
pub fn cross_task_average(per_task_values: &[f64]) -> Result<f64> {
    if per_task_values.is_empty() {
        return Err(Error::parameter("cross-task average of an empty list".to_string()));
    }
    Ok(per_task_values.iter().sum::<f64>() / per_task_values.len() as f64)
}

/// Mean silhouette over the scoped samples, with cosine distance
/// (`1 - cos`) and clusters defined by class labels.
///
/// The universe is the given samples plus the optional augmentation rows,
/// restricted to classes in `class_filter` when present. For each scoped
/// sample, `a` is the mean distance to its own cluster (excluding itself)
/// and `b` the smallest mean distance to any other cluster; the sample
/// scores `(b - a) / max(a, b)`. Samples in singleton clusters score 0.
pub fn silhouette_cosine<F: Scalar>(
    features: &Matrix<F>,
    labels: &[usize],
    augmentation: Option<(&Matrix<F>, &[usize])>,
    class_filter: Option<&[usize]>,
) -> Result<f64> {
    if features.rows() != labels.len() {
        return Err(Error::parameter("features/labels length mismatch".to_string()));
    }
    let keep = |label: usize| class_filter.map_or(true, |f| f.contains(&label));
    let mut units: Vec<Vec<f64>> = Vec::new();
    let mut kept_labels: Vec<usize> = Vec::new();
    let mut push_rows = |m: &Matrix<F>, ls: &[usize]| -> Result<()> {
        if m.rows() != ls.len() {
            return Err(Error::parameter("augmentation features/labels mismatch".to_string()));
        }
        for (i, &l) in ls.iter().enumerate() {
            if !keep(l) {
                continue;
            }
            let row: Vec<f64> = m.row(i).iter().map(|v| v.to_f64_lossy()).collect();
            let n = norm(&row);
            if n == 0.0 {
                return Err(Error::parameter(
                    "cosine silhouette of a zero feature vector".to_string(),
                ));
            }
            units.push(row.iter().map(|v| v / n).collect());
            kept_labels.push(l);
        }
        Ok(())
    };
    push_rows(features, labels)?;
    if let Some((m, ls)) = augmentation {
        push_rows(m, ls)?;
    }
    let mut classes: Vec<usize> = kept_labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::parameter(format!(
            "silhouette needs at least 2 clusters in scope, got {}",
            classes.len()
        )));
    }
    let n = units.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: Vec<f64> = vec![0.0; classes.len()];
        let mut counts: Vec<usize> = vec![0; classes.len()];
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = classes.binary_search(&kept_labels[j]).unwrap();
            sums[k] += 1.0 - dot(&units[i], &units[j]);
            counts[k] += 1;
        }
        let own = classes.binary_search(&kept_labels[i]).unwrap();
        if counts[own] == 0 {
            // singleton cluster convention
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let mut b = f64::INFINITY;
        for k in 0..classes.len() {
            if k != own && counts[k] > 0 {
                b = b.min(sums[k] / counts[k] as f64);
            }
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Cosine similarity of class centroids against a held-out reference, per
/// few-shot class: once for the training samples and once for the synthetic
/// samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidSimilarity {
    pub class: usize,
    pub train_vs_heldout: f64,
    pub synthetic_vs_heldout: f64,
}

fn class_mean<F: Scalar>(
    features: &Matrix<F>,
    labels: &[usize],
    class: usize,
    what: &str,
) -> Result<Vec<F>> {
    let mut sum = vec![F::zero(); features.cols()];
    let mut count = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if l == class {
            for (s, &v) in sum.iter_mut().zip(features.row(i)) {
                *s += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::MissingClass { class, context: what.to_string() });
    }
    let cf = F::from_usize(count).unwrap();
    for s in &mut sum {
        *s /= cf;
    }
    Ok(sum)
}

pub fn centroid_similarity_report<F: Scalar>(
    train: (&Matrix<F>, &[usize]),
    heldout: (&Matrix<F>, &[usize]),
    synthetic: (&Matrix<F>, &[usize]),
    few_shot_classes: &[usize],
) -> Result<Vec<CentroidSimilarity>> {
    let mut out = Vec::with_capacity(few_shot_classes.len());
    for &class in few_shot_classes {
        let ct = class_mean(train.0, train.1, class, "training centroid")?;
        let ch = class_mean(heldout.0, heldout.1, class, "held-out centroid")?;
        let cs = class_mean(synthetic.0, synthetic.1, class, "synthetic centroid")?;
        out.push(CentroidSimilarity {
            class,
            train_vs_heldout: cosine_similarity(&ct, &ch)?.to_f64_lossy(),
            synthetic_vs_heldout: cosine_similarity(&cs, &ch)?.to_f64_lossy(),
        });
    }
    Ok(out)
}

/// Mean Euclidean row norms of the classifier weights over the normal and
/// few-shot class sets (norms, not squared norms).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightNormReport {
    pub mean_normal_norm: f64,
    pub mean_few_shot_norm: f64,
}

pub fn weight_norm_report<F: Scalar>(
    cl: &ClassifierParams<F>,
    protocol: &FewShotProtocol,
) -> Result<WeightNormReport> {
    if cl.class_count() != protocol.class_count {
        return Err(Error::parameter(format!(
            "classifier has {} classes, protocol {}",
            cl.class_count(),
            protocol.class_count
        )));
    }
    let mean = |classes: &[usize]| -> f64 {
        let total: f64 = classes.iter().map(|&k| cl.w_c.row_norm(k).to_f64_lossy()).sum();
        total / classes.len() as f64
    };
    Ok(WeightNormReport {
        mean_normal_norm: mean(&protocol.normal_classes),
        mean_few_shot_norm: mean(&protocol.few_shot_classes),
    })
}

/// Which population an exported embedding row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    RealTrain,
    RealHeldout,
    Synthetic,
    Target,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::RealTrain => "real-train",
            SourceKind::RealHeldout => "real-heldout",
            SourceKind::Synthetic => "synthetic",
            SourceKind::Target => "target",
        }
    }
}

/// Write encoder embeddings of several labeled populations as CSV with
/// columns `source_kind, label, e0..e{d_h-1}`. Unlabeled rows leave the
/// label column empty. Returns the number of data rows written.
pub fn export_embeddings(
    encoder: &EncoderParams<f64>,
    sets: &[(SourceKind, &Matrix<f64>, Option<&[usize]>)],
    path: &Path,
) -> Result<usize> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d_h = encoder.output_dim();
    write!(file, "source_kind,label")?;
    for j in 0..d_h {
        write!(file, ",e{j}")?;
    }
    writeln!(file)?;
    let mut rows = 0usize;
    for (kind, features, labels) in sets {
        if features.rows() == 0 {
            continue;
        }
        if let Some(ls) = labels {
            if ls.len() != features.rows() {
                return Err(Error::parameter("embedding labels/features mismatch".to_string()));
            }
        }
        let h = encoder_forward(encoder, features)?;
        for i in 0..h.rows() {
            match labels {
                Some(ls) => write!(file, "{},{}", kind.as_str(), ls[i])?,
                None => write!(file, "{},", kind.as_str())?,
            }
            for v in h.row(i) {
                write!(file, ",{v}")?;
            }
            writeln!(file)?;
            rows += 1;
        }
    }
    file.flush()?;
    Ok(rows)
}

/// Everything a run reports: accuracies, diagnostics, weight norms, and the
/// resolved configuration that produced them. Serializes to JSON with stable
/// key order and to a one-row CSV for table assembly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub task: String,
    pub seed: u64,
    pub class_count: usize,
    pub few_shot_classes: Vec<usize>,
    pub shots_per_class: usize,
    pub per_class_accuracy: Option<Vec<Option<f64>>>,
    pub few_shot_accuracy: Option<f64>,
    pub normal_accuracy: Option<f64>,
    pub overall_accuracy: Option<f64>,
    pub silhouette_all: Option<f64>,
    pub silhouette_all_augmented: Option<f64>,
    pub silhouette_few_shot: Option<f64>,
    pub silhouette_few_shot_augmented: Option<f64>,
    pub centroid_similarity: Option<Vec<CentroidSimilarity>>,
    pub mean_normal_weight_norm: f64,
    pub mean_few_shot_weight_norm: f64,
    pub fc_alpha: f64,
    pub mean_few_shot_sq_norm: f64,
    /// `mean_few_shot_sq_norm / fc_alpha`.
    pub few_shot_norm_ratio: f64,
    pub config: ExperimentConfig,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("metrics json: {e}")))
    }

    /// Scalar fields as one CSV row (headers + row).
    pub fn to_csv(&self) -> String {
        let fmt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let headers = [
            "mode",
            "task",
            "seed",
            "few_shot_accuracy",
            "normal_accuracy",
            "overall_accuracy",
            "silhouette_all",
            "silhouette_all_augmented",
            "silhouette_few_shot",
            "silhouette_few_shot_augmented",
            "mean_normal_weight_norm",
            "mean_few_shot_weight_norm",
            "fc_alpha",
            "mean_few_shot_sq_norm",
            "few_shot_norm_ratio",
        ];
        let row = [
            self.mode.clone(),
            self.task.clone(),
            self.seed.to_string(),
            fmt(&self.few_shot_accuracy),
            fmt(&self.normal_accuracy),
            fmt(&self.overall_accuracy),
            fmt(&self.silhouette_all),
            fmt(&self.silhouette_all_augmented),
            fmt(&self.silhouette_few_shot),
            fmt(&self.silhouette_few_shot_augmented),
            self.mean_normal_weight_norm.to_string(),
            self.mean_few_shot_weight_norm.to_string(),
            self.fc_alpha.to_string(),
            self.mean_few_shot_sq_norm.to_string(),
            self.few_shot_norm_ratio.to_string(),
        ];
        format!("{}\n{}\n", headers.join(","), row.join(","))
    }
}
