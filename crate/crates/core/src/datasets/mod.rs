//! Source/target data model, few-shot protocol, oversampling, and ingestion.

pub mod io;
pub mod synthetic;

pub use io::{load_features, save_features, FeatureFormat};
pub use synthetic::{synthesize_domain_pair, SyntheticDomainConfig, SyntheticGroundTruth, SyntheticPair};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};
use crate::scalar::Scalar;

/// Feature matrix with optional labels and a domain tag. Immutable after
/// construction; the unit of ingestion and sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset<F = f64> {
    pub features: Matrix<F>,
    pub labels: Option<Vec<usize>>,
    pub domain_tag: String,
    pub class_count: usize,
}

impl<F: Scalar> DomainDataset<F> {
    pub fn new(
        features: Matrix<F>,
        labels: Option<Vec<usize>>,
        domain_tag: impl Into<String>,
        class_count: usize,
    ) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::parameter("dataset needs class_count >= 1".to_string()));
        }
        if let Some(ref l) = labels {
            if l.len() != features.rows() {
                return Err(Error::data(format!(
                    "{} labels for {} feature rows",
                    l.len(),
                    features.rows()
                )));
            }
            if let Some(&bad) = l.iter().find(|&&x| x >= class_count) {
                return Err(Error::data(format!(
                    "label {bad} out of range [0, {class_count})"
                )));
            }
        }
        Ok(Self { features, labels, domain_tag: domain_tag.into(), class_count })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::parameter(format!("dataset '{}' is unlabeled", self.domain_tag)))
    }

    /// Indices of rows belonging to `class`, in row order.
    pub fn class_indices(&self, class: usize) -> Result<Vec<usize>> {
        Ok(self
            .labels()?
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect())
    }

    /// Per-class sample counts, length `class_count`.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let mut counts = vec![0usize; self.class_count];
        for &l in self.labels()? {
            counts[l] += 1;
        }
        Ok(counts)
    }

    /// Same data with a different class count (labels revalidated).
    pub fn with_class_count(self, class_count: usize) -> Result<Self> {
        Self::new(self.features, self.labels, self.domain_tag, class_count)
    }

    fn subset(&self, idx: &[usize], tag: impl Into<String>) -> Self {
        let labels = self
            .labels
            .as_ref()
            .map(|l| idx.iter().map(|&i| l[i]).collect::<Vec<_>>());
        Self {
            features: self.features.select_rows(idx),
            labels,
            domain_tag: tag.into(),
            class_count: self.class_count,
        }
    }
}

/// Partition of the class ids into a normal set and a few-shot set with a
/// per-class sample budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotProtocol {
    pub class_count: usize,
    pub few_shot_classes: Vec<usize>,
    pub normal_classes: Vec<usize>,
    pub shots_per_class: usize,
    pub seed: u64,
}

impl FewShotProtocol {
    pub fn new(
        class_count: usize,
        few_shot_classes: Vec<usize>,
        shots_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        if shots_per_class == 0 {
            return Err(Error::Protocol("shots per class must be >= 1".to_string()));
        }
        let mut few: Vec<usize> = few_shot_classes;
        few.sort_unstable();
        few.dedup();
        if let Some(&bad) = few.iter().find(|&&c| c >= class_count) {
            return Err(Error::Protocol(format!(
                "few-shot class {bad} out of range [0, {class_count})"
            )));
        }
        if few.is_empty() {
            return Err(Error::Protocol("few-shot set is empty".to_string()));
        }
        if few.len() == class_count {
            return Err(Error::Protocol("normal set is empty".to_string()));
        }
        let normal: Vec<usize> = (0..class_count).filter(|c| !few.contains(c)).collect();
        Ok(Self { class_count, few_shot_classes: few, normal_classes: normal, shots_per_class, seed })
    }

    pub fn is_few_shot(&self, class: usize) -> bool {
        self.few_shot_classes.binary_search(&class).is_ok()
    }
}

/// Result of applying a [`FewShotProtocol`]: the training set (all normal
/// samples plus `m` per few-shot class) and the held-out remainder of the
/// few-shot classes.
#[derive(Clone, Debug)]
pub struct FewShotSplit<F = f64> {
    pub train: DomainDataset<F>,
    pub heldout: DomainDataset<F>,
}

/// Apply the few-shot protocol to a labeled source dataset. Sampling is
/// uniform without replacement, seeded by the protocol; row order of the
/// original dataset is preserved in both outputs.
pub fn make_few_shot_split<F: Scalar>(
    source: &DomainDataset<F>,
    protocol: &FewShotProtocol,
) -> Result<FewShotSplit<F>> {
    let labels = source.labels()?;
    if protocol.class_count != source.class_count {
        return Err(Error::Protocol(format!(
            "protocol has {} classes, dataset has {}",
            protocol.class_count, source.class_count
        )));
    }
    let counts = source.class_counts()?;
    if let Some((class, _)) = counts.iter().enumerate().find(|(_, &c)| c == 0) {
        return Err(Error::MissingClass { class, context: "few-shot split".to_string() });
    }
    let mut rng = RngState::new(protocol.seed);
    let mut keep = vec![true; source.len()];
    // classes processed in ascending id order so the RNG consumption is fixed
    for &class in &protocol.few_shot_classes {
        let members = source.class_indices(class)?;
        if members.len() < protocol.shots_per_class {
            return Err(Error::Protocol(format!(
                "class {class} has {} samples, protocol needs {}",
                members.len(),
                protocol.shots_per_class
            )));
        }
        let chosen = rng.sample_without_replacement(members.len(), protocol.shots_per_class);
        for &i in &members {
            keep[i] = false;
        }
        for &c in &chosen {
            keep[members[c]] = true;
        }
    }
    let train_idx: Vec<usize> = (0..source.len()).filter(|&i| keep[i]).collect();
    let heldout_idx: Vec<usize> = (0..source.len())
        .filter(|&i| !keep[i] && protocol.is_few_shot(labels[i]))
        .collect();
    Ok(FewShotSplit {
        train: source.subset(&train_idx, source.domain_tag.clone()),
        heldout: source.subset(&heldout_idx, format!("{}-heldout", source.domain_tag)),
    })
}

/// Duplicate samples uniformly with replacement until every class matches the
/// largest class count. Original rows come first, in order; duplicates are
/// appended grouped by ascending class id.
pub fn oversample_balanced<F: Scalar>(
    source: &DomainDataset<F>,
    rng: &mut RngState,
) -> Result<DomainDataset<F>> {
    let counts = source.class_counts()?;
    let max = *counts.iter().max().unwrap();
    let mut idx: Vec<usize> = (0..source.len()).collect();
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::MissingClass { class, context: "oversampling".to_string() });
        }
        if count == max {
            continue;
        }
        let members = source.class_indices(class)?;
        for _ in 0..(max - count) {
            idx.push(members[rng.index(members.len())]);
        }
    }
    Ok(source.subset(&idx, source.domain_tag.clone()))
}

/// One-hot vector of length `c` for `label`.
pub fn one_hot<F: Scalar>(label: usize, c: usize) -> Result<Vec<F>> {
    if label >= c {
        return Err(Error::parameter(format!("label {label} out of range [0, {c})")));
    }
    let mut v = vec![F::zero(); c];
    v[label] = F::one();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Mat;

    fn labeled_dataset(rows: &[(usize, [f64; 2])]) -> DomainDataset {
        let feats =
            Mat::from_rows(&rows.iter().map(|(_, f)| f.to_vec()).collect::<Vec<_>>()).unwrap();
        let labels: Vec<usize> = rows.iter().map(|(l, _)| *l).collect();
        let c = labels.iter().max().unwrap() + 1;
        DomainDataset::new(feats, Some(labels), "src", c).unwrap()
    }

    fn toy_source(per_class: &[usize]) -> DomainDataset {
        let mut rows = Vec::new();
        for (class, &n) in per_class.iter().enumerate() {
            for k in 0..n {
                rows.push((class, [class as f64, k as f64]));
            }
        }
        labeled_dataset(&rows)
    }

    #[test]
    fn split_keeps_whole_class_when_m_equals_size() {
        let src = toy_source(&[5, 3]);
        let protocol = FewShotProtocol::new(2, vec![1], 3, 0).unwrap();
        let split = make_few_shot_split(&src, &protocol).unwrap();
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.heldout.len(), 0);
    }

    #[test]
    fn split_cardinality() {
        let src = toy_source(&[4, 4, 4, 4]);
        let protocol = FewShotProtocol::new(4, vec![2, 3], 1, 9).unwrap();
        let split = make_few_shot_split(&src, &protocol).unwrap();
        let counts = split.train.class_counts().unwrap();
        assert_eq!(counts, vec![4, 4, 1, 1]);
        assert_eq!(split.heldout.len(), 6);
    }

    #[test]
    fn split_is_deterministic_in_seed() {
        let src = toy_source(&[6, 8, 7]);
        let protocol = FewShotProtocol::new(3, vec![1, 2], 2, 77).unwrap();
        let a = make_few_shot_split(&src, &protocol).unwrap();
        let b = make_few_shot_split(&src, &protocol).unwrap();
        assert_eq!(a.train.features, b.train.features);
        assert_eq!(a.heldout.features, b.heldout.features);
        let other = FewShotProtocol::new(3, vec![1, 2], 2, 78).unwrap();
        let c = make_few_shot_split(&src, &other).unwrap();
        assert!(c.train.features != a.train.features || c.heldout.features != a.heldout.features);
    }

    #[test]
    fn split_union_restores_few_shot_samples() {
        let src = toy_source(&[5, 9]);
        let protocol = FewShotProtocol::new(2, vec![1], 3, 4).unwrap();
        let split = make_few_shot_split(&src, &protocol).unwrap();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (ds, want) in [(&split.train, 1usize), (&split.heldout, 1)] {
            for i in 0..ds.len() {
                if ds.labels().unwrap()[i] == want {
                    rows.push(ds.features.row(i).to_vec());
                }
            }
        }
        let mut expected: Vec<Vec<f64>> = (0..src.len())
            .filter(|&i| src.labels().unwrap()[i] == 1)
            .map(|i| src.features.row(i).to_vec())
            .collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, expected);
    }

    #[test]
    fn split_rejects_underfull_class() {
        let src = toy_source(&[5, 2]);
        let protocol = FewShotProtocol::new(2, vec![1], 3, 0).unwrap();
        assert!(matches!(make_few_shot_split(&src, &protocol), Err(Error::Protocol(_))));
    }

    #[test]
    fn oversample_balances_counts() {
        let src = toy_source(&[10, 3]);
        let mut rng = RngState::new(1);
        let out = oversample_balanced(&src, &mut rng).unwrap();
        assert_eq!(out.class_counts().unwrap(), vec![10, 10]);
    }

    #[test]
    fn oversample_on_balanced_input_is_identity() {
        let src = toy_source(&[4, 4]);
        let mut rng = RngState::new(1);
        let out = oversample_balanced(&src, &mut rng).unwrap();
        assert_eq!(out.features, src.features);
        assert_eq!(out.labels, src.labels);
    }

    #[test]
    fn oversample_never_invents_rows() {
        let src = toy_source(&[7, 2, 5]);
        let mut rng = RngState::new(3);
        let out = oversample_balanced(&src, &mut rng).unwrap();
        for i in 0..out.len() {
            let label = out.labels().unwrap()[i];
            let row = out.features.row(i);
            let found = (0..src.len()).any(|j| {
                src.labels().unwrap()[j] == label && src.features.row(j) == row
            });
            assert!(found, "row {i} is not a copy of any original row of class {label}");
        }
    }

    #[test]
    fn oversample_requires_labels() {
        let feats = Mat::zeros(3, 2);
        let ds = DomainDataset::new(feats, None, "t", 2).unwrap();
        let mut rng = RngState::new(0);
        assert!(oversample_balanced(&ds, &mut rng).is_err());
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot::<f64>(0, 3).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(one_hot::<f64>(2, 3).unwrap(), vec![0.0, 0.0, 1.0]);
        for l in 0..5 {
            let v = one_hot::<f64>(l, 5).unwrap();
            assert_eq!(v.iter().sum::<f64>(), 1.0);
        }
        assert!(one_hot::<f64>(3, 3).is_err());
    }

    #[test]
    fn protocol_validation() {
        assert!(FewShotProtocol::new(3, vec![0, 1, 2], 1, 0).is_err());
        assert!(FewShotProtocol::new(3, vec![], 1, 0).is_err());
        assert!(FewShotProtocol::new(3, vec![5], 1, 0).is_err());
        assert!(FewShotProtocol::new(3, vec![1], 0, 0).is_err());
        let p = FewShotProtocol::new(4, vec![3, 1], 2, 0).unwrap();
        assert_eq!(p.few_shot_classes, vec![1, 3]);
        assert_eq!(p.normal_classes, vec![0, 2]);
    }
}
