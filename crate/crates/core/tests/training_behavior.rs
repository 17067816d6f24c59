//! Episodic training dynamics: freeze contracts, prior stability, loss
//! finiteness and descent, and cached-path equivalence.

use pfenet_core::backbone::BackboneConfig;
use pfenet_core::episodes::{self, DatasetConfig, FoldScheme, Phase};
use pfenet_core::fem::PathKind;
use pfenet_core::model::{CachedEpisode, ModelConfig, OptimConfig, PFENet, SupportInput};
use pfenet_core::prior;
use pfenet_core::rng::stream_rng;
use pfenet_core::tensor::LrSchedule;

fn small_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        scales: vec![4, 2],
        path: PathKind::TopDown,
        backbone: BackboneConfig {
            widths: [8, 12, 16, 16],
        },
        ..ModelConfig::default()
    }
}

fn small_dataset() -> episodes::SynthDataset {
    episodes::generate(&DatasetConfig {
        classes: 12,
        images_per_class: 8,
        image_size: 16,
        seed: 41,
    })
    .unwrap()
}

#[test]
fn frozen_backbone_is_untouched_by_training() {
    let ds = small_dataset();
    let split = episodes::split(12, 0, FoldScheme::Contiguous).unwrap();
    let mut model = PFENet::new(&small_config(), 21).unwrap();
    let checksum = model.backbone.checksum();
    let schedule = LrSchedule {
        base_lr: 0.005,
        power: 0.9,
        max_iter: 50,
    };
    let optim = OptimConfig::default();
    let mut rng = stream_rng(22, &[]);
    for iter in 0..20 {
        let ep = episodes::sample_episode(&ds, &split, Phase::Train, 1, &mut rng).unwrap();
        model
            .train_episode(&ep, &optim, &schedule, iter, &split)
            .unwrap();
    }
    assert_eq!(model.backbone.checksum(), checksum);
}

#[test]
fn fixed_prior_is_constant_across_training() {
    let ds = small_dataset();
    let split = episodes::split(12, 0, FoldScheme::Contiguous).unwrap();
    let mut model = PFENet::new(&small_config(), 23).unwrap();
    let mut rng = stream_rng(24, &[]);
    let probe = episodes::sample_episode(&ds, &split, Phase::Test, 1, &mut rng).unwrap();
    let before = prior::generate_prior(
        &model.backbone,
        &probe.query_image,
        &probe.supports[0].image,
        &probe.supports[0].mask,
        &model.config().prior,
    )
    .unwrap();

    let schedule = LrSchedule {
        base_lr: 0.005,
        power: 0.9,
        max_iter: 50,
    };
    let optim = OptimConfig::default();
    for iter in 0..15 {
        let ep = episodes::sample_episode(&ds, &split, Phase::Train, 1, &mut rng).unwrap();
        model
            .train_episode(&ep, &optim, &schedule, iter, &split)
            .unwrap();
    }
    let after = prior::generate_prior(
        &model.backbone,
        &probe.query_image,
        &probe.supports[0].image,
        &probe.supports[0].mask,
        &model.config().prior,
    )
    .unwrap();
    assert_eq!(before.values.data(), after.values.data());
}

#[test]
fn trainable_backbone_flag_lets_gradients_through() {
    let ds = small_dataset();
    let split = episodes::split(12, 0, FoldScheme::Contiguous).unwrap();
    let mut cfg = small_config();
    cfg.freeze_backbone = false;
    cfg.prior.feature_source = pfenet_core::prior::FeatureSource::LearnableHigh;
    let mut model = PFENet::new(&cfg, 25).unwrap();
    let checksum = model.backbone.checksum();
    let schedule = LrSchedule {
        base_lr: 0.01,
        power: 0.9,
        max_iter: 10,
    };
    let optim = OptimConfig::default();
    let mut rng = stream_rng(26, &[]);
    for iter in 0..3 {
        let ep = episodes::sample_episode(&ds, &split, Phase::Train, 1, &mut rng).unwrap();
        model
            .train_episode(&ep, &optim, &schedule, iter, &split)
            .unwrap();
    }
    assert_ne!(model.backbone.checksum(), checksum);
}

#[test]
fn training_rejects_test_fold_episodes() {
    let ds = small_dataset();
    let split = episodes::split(12, 0, FoldScheme::Contiguous).unwrap();
    let test_split = episodes::split(12, 1, FoldScheme::Contiguous).unwrap();
    let mut model = PFENet::new(&small_config(), 27).unwrap();
    let mut rng = stream_rng(28, &[]);
    // class 4 is a training class of fold 1 but sits in fold-0's train set;
    // draw an episode whose class is in fold-0's *test* set instead
    let ep = loop {
        let candidate =
            episodes::sample_episode(&ds, &test_split, Phase::Train, 1, &mut rng).unwrap();
        if split.is_test_class(candidate.class) {
            break candidate;
        }
    };
    let schedule = LrSchedule {
        base_lr: 0.005,
        power: 0.9,
        max_iter: 10,
    };
    let err = model
        .train_episode(&ep, &OptimConfig::default(), &schedule, 0, &split)
        .unwrap_err();
    assert!(err.is_contract());
}

#[test]
fn loss_stays_finite_and_decreases() {
    let ds = small_dataset();
    let split = episodes::split(12, 0, FoldScheme::Contiguous).unwrap();
    let mut model = PFENet::new(&small_config(), 29).unwrap();
    let iters = 200;
    let schedule = LrSchedule {
        base_lr: 0.01,
        power: 0.9,
        max_iter: iters,
    };
    let optim = OptimConfig::default();
    let mut rng = stream_rng(30, &[]);
    let mut losses = Vec::with_capacity(iters);
    for iter in 0..iters {
        let ep = episodes::sample_episode(&ds, &split, Phase::Train, 1, &mut rng).unwrap();
        let loss = model
            .train_episode(&ep, &optim, &schedule, iter, &split)
            .unwrap();
        assert!(loss.is_finite());
        losses.push(loss);
    }
    let tenth = iters / 10;
    let first: f64 = losses[..tenth].iter().sum::<f64>() / tenth as f64;
    let last: f64 = losses[iters - tenth..].iter().sum::<f64>() / tenth as f64;
    assert!(
        last < first,
        "mean loss did not decrease: first 10% {first:.4}, last 10% {last:.4}"
    );
}

#[test]
fn non_finite_loss_is_reported() {
    let ds = small_dataset();
    let split = episodes::split(12, 0, FoldScheme::Contiguous).unwrap();
    let mut model = PFENet::new(&small_config(), 31).unwrap();
    {
        // poison the final head bias: infinities right at the logits reach
        // the loss directly instead of being clamped away by deeper ReLUs
        let mut params = model.trainable_parameters_mut();
        let last = params.len() - 1;
        let poisoned = vec![f64::INFINITY; params[last].len()];
        params[last].set_values(poisoned).unwrap();
    }
    let mut rng = stream_rng(32, &[]);
    let ep = episodes::sample_episode(&ds, &split, Phase::Train, 1, &mut rng).unwrap();
    let schedule = LrSchedule {
        base_lr: 0.005,
        power: 0.9,
        max_iter: 10,
    };
    let err = model
        .train_episode(&ep, &OptimConfig::default(), &schedule, 0, &split)
        .unwrap_err();
    assert!(matches!(err, pfenet_core::Error::NonFinite(_)));
}

#[test]
fn cached_forward_matches_image_forward_bitwise() {
    let ds = small_dataset();
    let split = episodes::split(12, 0, FoldScheme::Contiguous).unwrap();
    let model = PFENet::new(&small_config(), 33).unwrap();
    let mut rng = stream_rng(34, &[]);
    for _ in 0..5 {
        let ep = episodes::sample_episode(&ds, &split, Phase::Test, 2, &mut rng).unwrap();
        let direct = model.forward(&ep.query_image, &ep.supports, false).unwrap();

        let q_feats = model.extract_sample_features(&ep.query_image).unwrap();
        let s_feats: Vec<_> = ep
            .supports
            .iter()
            .map(|s| model.extract_sample_features(&s.image).unwrap())
            .collect();
        let supports: Vec<SupportInput> = ep
            .supports
            .iter()
            .zip(&s_feats)
            .map(|(s, f)| SupportInput {
                index: s.index,
                features: f,
                mask: &s.mask,
            })
            .collect();
        let cached = model.forward_cached(&q_feats, &supports, false).unwrap();

        assert_eq!(
            direct
                .final_logits
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            cached
                .final_logits
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );
    }
}

#[test]
fn cached_training_matches_image_training() {
    let ds = small_dataset();
    let split = episodes::split(12, 0, FoldScheme::Contiguous).unwrap();
    let mut a = PFENet::new(&small_config(), 35).unwrap();
    let mut b = a.clone();
    let schedule = LrSchedule {
        base_lr: 0.01,
        power: 0.9,
        max_iter: 10,
    };
    let optim = OptimConfig::default();
    let mut rng = stream_rng(36, &[]);
    for iter in 0..5 {
        let ep = episodes::sample_episode(&ds, &split, Phase::Train, 1, &mut rng).unwrap();
        let la = a
            .train_episode(&ep, &optim, &schedule, iter, &split)
            .unwrap();

        let q = b.extract_sample_features(&ep.query_image).unwrap();
        let s_feats: Vec<_> = ep
            .supports
            .iter()
            .map(|s| b.extract_sample_features(&s.image).unwrap())
            .collect();
        let cached_ep = CachedEpisode {
            class: ep.class,
            query: &q,
            query_mask: &ep.query_mask,
            supports: ep
                .supports
                .iter()
                .zip(&s_feats)
                .map(|(s, f)| SupportInput {
                    index: s.index,
                    features: f,
                    mask: &s.mask,
                })
                .collect(),
        };
        let lb = b
            .train_episode_cached(&cached_ep, &optim, &schedule, iter, &split)
            .unwrap();
        assert_eq!(la.to_bits(), lb.to_bits(), "iter {iter}");
    }
}
