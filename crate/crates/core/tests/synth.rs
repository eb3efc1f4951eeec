mod common;

use common::{dir_bytes, label_fidelity, rng};
use proptest::prelude::*;
use sat_core::eval::sauvegrain_sum;
use sat_core::synth::{augment, generate, generate_sample, read_dataset, write_dataset, AugmentConfig, SynthConfig};
use sat_core::SatError;

#[test]
fn default_noise_keeps_regions_strongly_correlated_and_covers_every_class() {
    let f = label_fidelity(&SynthConfig { num_samples: 10_000, image_size: 8, ..SynthConfig::default() }).unwrap();
    assert!(f.min_pearson > 0.8, "{}", f.min_pearson);
    assert!(f.missing_classes.is_empty(), "{:?}", f.missing_classes);
}

#[test]
fn class_coverage_at_the_lower_noise_bound() {
    let cfg =
        SynthConfig { num_samples: 10_000, image_size: 8, label_noise_sigma: 0.05, seed: 3, ..SynthConfig::default() };
    assert!(label_fidelity(&cfg).unwrap().missing_classes.is_empty());
}

#[test]
fn noiseless_total_score_is_monotone_in_the_latent() {
    let cfg = SynthConfig { num_samples: 2000, image_size: 8, label_noise_sigma: 0.0, ..SynthConfig::default() };
    let mut pairs: Vec<(f64, f64)> = generate(&cfg)
        .unwrap()
        .samples
        .iter()
        .map(|s| {
            let scores: Vec<f64> = s.labels.iter().map(|&y| y as f64).collect();
            (s.latent_t, sauvegrain_sum(&scores).unwrap())
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!(pairs.windows(2).all(|w| w[1].1 >= w[0].1));
    assert!(pairs.first().unwrap().1 < pairs.last().unwrap().1);
}

#[test]
fn same_seed_writes_identical_bytes() {
    let cfg = SynthConfig { num_samples: 12, image_size: 16, seed: 9, ..SynthConfig::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&generate(&cfg).unwrap(), a.path()).unwrap();
    write_dataset(&generate(&cfg).unwrap(), b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    let other = tempfile::tempdir().unwrap();
    write_dataset(&generate(&SynthConfig { seed: 10, ..cfg }).unwrap(), other.path()).unwrap();
    assert_ne!(dir_bytes(a.path()), dir_bytes(other.path()));
}

#[test]
fn disk_round_trip_is_lossless() {
    let ds = generate(&SynthConfig { num_samples: 7, image_size: 16, ..SynthConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn manifest_count_must_match_directory() {
    let ds = generate(&SynthConfig { num_samples: 3, image_size: 8, ..SynthConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap().replace("\"num_samples\": 3", "\"num_samples\": 4");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(SatError::Format { .. })));
}

#[test]
fn truncated_sample_is_named_in_the_error() {
    let ds = generate(&SynthConfig { num_samples: 3, image_size: 8, ..SynthConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let victim = dir.path().join("sample_000001.bin");
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() - 5]).unwrap();
    let err = read_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("sample_000001.bin"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn labels_stay_in_range(seed in any::<u64>(), sigma in 0.0f64..0.5, index in 0u64..1000) {
        let cfg = SynthConfig { image_size: 8, label_noise_sigma: sigma, seed, ..SynthConfig::default() };
        let s = generate_sample(&cfg, index).unwrap();
        for (&y, &k) in s.labels.iter().zip(&cfg.class_counts) {
            prop_assert!(y >= 1 && y as usize <= k);
        }
        prop_assert!((0.0..1.0).contains(&s.latent_t));
    }

    #[test]
    fn augmentation_keeps_labels_and_shapes(seed in any::<u64>(), index in 0u64..1000) {
        let cfg = SynthConfig { image_size: 16, seed, ..SynthConfig::default() };
        let s = generate_sample(&cfg, index).unwrap();
        let a = augment(&s, &AugmentConfig::default(), &mut rng(seed ^ index));
        prop_assert_eq!(&a.labels, &s.labels);
        prop_assert_eq!(a.images.shape(), s.images.shape());
        prop_assert_eq!(a.latent_t, s.latent_t);
        prop_assert!(a.images.is_finite());
    }
}
