//! Property tests for the crate-wide invariants.

use proptest::prelude::*;

use gfca_core::datasets::{one_hot, oversample_balanced, DomainDataset};
use gfca_core::gan::{loss_d, loss_g};
use gfca_core::mkmmd::{mmd_sq_biased, mmd_sq_unbiased, KernelBank};
use gfca_core::numerics::{cosine_similarity, RngState};
use gfca_core::Mat;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1e3..1e3f64, len)
}

proptest! {
    #[test]
    fn cosine_is_symmetric_and_scale_invariant(
        u in finite_vec(5),
        v in finite_vec(5),
        a in 1e-3..1e3f64,
        b in 1e-3..1e3f64,
    ) {
        let nu: f64 = u.iter().map(|x| x * x).sum();
        let nv: f64 = v.iter().map(|x| x * x).sum();
        prop_assume!(nu > 1e-6 && nv > 1e-6);
        let base = cosine_similarity(&u, &v).unwrap();
        let swapped = cosine_similarity(&v, &u).unwrap();
        prop_assert!((base - swapped).abs() < 1e-12);
        let au: Vec<f64> = u.iter().map(|x| a * x).collect();
        let bv: Vec<f64> = v.iter().map(|x| b * x).collect();
        let scaled = cosine_similarity(&au, &bv).unwrap();
        prop_assert!((base - scaled).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn biased_mmd_is_zero_on_self_and_symmetric(
        seed in 0u64..1000,
        n in 2usize..10,
        m in 2usize..10,
        d in 1usize..5,
        sigma in 0.2..5.0f64,
    ) {
        let mut rng = RngState::new(seed);
        let x = Mat::from_fn(n, d, |_, _| rng.normal());
        let y = Mat::from_fn(m, d, |_, _| rng.normal());
        let bank = KernelBank::new(vec![sigma, 2.0 * sigma], vec![0.5, 0.5]).unwrap();
        prop_assert!(mmd_sq_biased(&x, &x, &bank).unwrap().abs() <= 1e-12);
        let ab = mmd_sq_biased(&x, &y, &bank).unwrap();
        let ba = mmd_sq_biased(&y, &x, &bank).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= -1e-12);
        let uab = mmd_sq_unbiased(&x, &y, &bank).unwrap();
        let uba = mmd_sq_unbiased(&y, &x, &bank).unwrap();
        prop_assert_eq!(uab, uba);
    }

    #[test]
    fn one_hot_has_unit_mass(c in 1usize..30, pick in 0usize..30) {
        prop_assume!(pick < c);
        let v = one_hot::<f64>(pick, c).unwrap();
        prop_assert_eq!(v.iter().sum::<f64>(), 1.0);
        prop_assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 1);
        prop_assert_eq!(v[pick], 1.0);
    }

    #[test]
    fn discriminator_loss_identity(
        r in proptest::collection::vec(0.0..1.0f64, 1..12),
        f in proptest::collection::vec(0.0..1.0f64, 1..12),
    ) {
        let mean_r = r.iter().sum::<f64>() / r.len() as f64;
        let mean_f = f.iter().sum::<f64>() / f.len() as f64;
        let ld = loss_d(&r, &f).unwrap();
        prop_assert!((ld - (-mean_r + mean_f - 1.0)).abs() < 1e-12);
        // combined identity with the generator loss on the same fake batch
        let lg = loss_g(&f).unwrap();
        prop_assert!((ld + lg - (-mean_r - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn oversampling_balances_without_inventing_rows(
        seed in 0u64..500,
        counts in proptest::collection::vec(1usize..12, 2..5),
    ) {
        let c = counts.len();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = RngState::new(seed);
        for (class, &k) in counts.iter().enumerate() {
            for _ in 0..k {
                rows.push(vec![rng.normal(), class as f64]);
                labels.push(class);
            }
        }
        let ds = DomainDataset::new(Mat::from_rows(&rows).unwrap(), Some(labels), "s", c).unwrap();
        let mut sample_rng = RngState::new(seed ^ 0xabcd);
        let out = oversample_balanced(&ds, &mut sample_rng).unwrap();
        let max = *counts.iter().max().unwrap();
        prop_assert_eq!(out.class_counts().unwrap(), vec![max; c]);
        for i in 0..out.len() {
            let label = out.labels().unwrap()[i];
            let row = out.features.row(i);
            let found = (0..ds.len()).any(|j| {
                ds.labels().unwrap()[j] == label && ds.features.row(j) == row
            });
            prop_assert!(found);
        }
    }

    #[test]
    fn generated_features_have_exact_target_norm(
        seed in 0u64..200,
        beta in 0.1..10.0f64,
    ) {
        let mut rng = RngState::new(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in 0..3usize {
            for _ in 0..4 {
                rows.push(vec![
                    1.0 + class as f64 + 0.2 * rng.normal(),
                    2.0 - class as f64 + 0.2 * rng.normal(),
                    0.5 + 0.2 * rng.normal(),
                ]);
                labels.push(class);
            }
        }
        let ds = DomainDataset::new(Mat::from_rows(&rows).unwrap(), Some(labels), "s", 3).unwrap();
        let g = gfca_core::gan::init_generator(&ds, 2, 0.2).unwrap();
        let (features, _) = gfca_core::gan::sample_fake_batch(
            &g,
            &mut rng,
            beta,
            8,
            gfca_core::gan::FakeLabelPolicy::Uniform,
        )
        .unwrap();
        for i in 0..features.rows() {
            prop_assert!((features.row_norm(i) - beta).abs() < 1e-10);
        }
    }
}
