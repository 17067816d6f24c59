//! Episodic training and evaluation machinery shared by the commands.
//!
//! With a frozen backbone, per-sample features are extracted once into a
//! [`FeatureStore`] and every episode trains or evaluates against the
//! cache. Evaluation shards episodes across threads; shard accumulators
//! hold integer pixel counts, so the merged result is independent of
//! scheduling.

use std::collections::BTreeMap;

use rayon::prelude::*;

use pfenet_core::episodes::{sample_episode, Episode, FoldSplit, Phase, SynthDataset};
use pfenet_core::metrics::IoUAccumulator;
use pfenet_core::model::{CachedEpisode, ModelConfig, OptimConfig, PFENet, SampleFeatures, SupportInput};
use pfenet_core::rng::stream_rng;
use pfenet_core::tensor::LrSchedule;

use crate::config::RunConfig;
use crate::error::Result;

// seed-stream tags, one per purpose
pub const TAG_TRAIN_EPISODE: u64 = 0x7e01;
pub const TAG_EVAL_EPISODE: u64 = 0x7e02;
pub const TAG_MODEL_INIT: u64 = 0x7e03;
pub const TAG_EVAL_RUN: u64 = 0x7e04;

/// Frozen-backbone features for every dataset sample.
pub struct FeatureStore {
    features: Vec<SampleFeatures>,
}

impl FeatureStore {
    pub fn build(model: &PFENet, dataset: &SynthDataset) -> Result<FeatureStore> {
        let features = (0..dataset.len())
            .into_par_iter()
            .map(|i| model.extract_sample_features(&dataset.get(i).image))
            .collect::<pfenet_core::Result<Vec<_>>>()?;
        Ok(FeatureStore { features })
    }

    pub fn get(&self, index: usize) -> &SampleFeatures {
        &self.features[index]
    }

    pub fn cached<'a>(&'a self, episode: &'a Episode) -> CachedEpisode<'a> {
        CachedEpisode {
            class: episode.class,
            query: self.get(episode.query_index),
            query_mask: &episode.query_mask,
            supports: episode
                .supports
                .iter()
                .map(|s| SupportInput {
                    index: s.index,
                    features: self.get(s.index),
                    mask: &s.mask,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
    pub classes_seen: BTreeMap<u8, u64>,
}

/// Builds a fresh model for one run: head initialization keyed by
/// `(run seed, fold, variant index)`, with the given pretrained backbone.
pub fn build_model(
    model_config: &ModelConfig,
    backbone: &pfenet_core::backbone::Backbone,
    run_seed: u64,
    fold: usize,
    variant_idx: u64,
) -> Result<PFENet> {
    let seed = pfenet_core::rng::mix_seed(run_seed, &[TAG_MODEL_INIT, fold as u64, variant_idx]);
    let mut model = PFENet::new(model_config, seed)?;
    let frozen = model.backbone.is_frozen();
    model.backbone = backbone.clone();
    model.backbone.set_frozen(frozen);
    Ok(model)
}

/// Episodic training loop. Episodes are drawn from per-iteration seed
/// streams keyed by `(seed, iteration)`, so runs replay exactly.
pub fn train_model(
    model: &mut PFENet,
    dataset: &SynthDataset,
    store: Option<&FeatureStore>,
    split: &FoldSplit,
    config: &RunConfig,
    shot: usize,
) -> Result<TrainReport> {
    let schedule = LrSchedule {
        base_lr: config.optim.base_lr,
        power: config.optim.power,
        max_iter: config.optim.max_iter,
    };
    let optim = OptimConfig {
        momentum: config.optim.momentum,
        weight_decay: config.optim.weight_decay,
    };
    let mut report = TrainReport::default();
    for iter in 0..config.optim.max_iter {
        let mut rng = stream_rng(config.seed, &[TAG_TRAIN_EPISODE, iter as u64]);
        let episode = sample_episode(dataset, split, Phase::Train, shot, &mut rng)?;
        *report.classes_seen.entry(episode.class).or_insert(0) += 1;
        let loss = match store {
            Some(store) => {
                model.train_episode_cached(&store.cached(&episode), &optim, &schedule, iter, split)?
            }
            None => model.train_episode(&episode, &optim, &schedule, iter, split)?,
        };
        report.rows.push(TrainRow {
            iter,
            lr: schedule.lr(iter).expect("iter < max_iter"),
            loss,
        });
    }
    Ok(report)
}

/// Episodic evaluation over `episodes` test draws, sharded across threads.
/// Episode `i` comes from the stream `(seed, i)` regardless of sharding.
pub fn evaluate(
    model: &PFENet,
    dataset: &SynthDataset,
    store: &FeatureStore,
    split: &FoldSplit,
    shot: usize,
    episodes: usize,
    seed: u64,
) -> Result<IoUAccumulator> {
    (0..episodes)
        .into_par_iter()
        .try_fold(IoUAccumulator::new, |mut acc, i| {
            let mut rng = stream_rng(seed, &[TAG_EVAL_EPISODE, i as u64]);
            let episode = sample_episode(dataset, split, Phase::Test, shot, &mut rng)?;
            let cached = store.cached(&episode);
            let prediction = model.predict_cached(cached.query, &cached.supports)?;
            acc.accumulate(&prediction, &episode.query_mask, episode.class)?;
            Ok::<_, crate::error::CliError>(acc)
        })
        .try_reduce(IoUAccumulator::new, |mut a, b| {
            a.merge(&b);
            Ok(a)
        })
}

/// Evaluation summarized as `(mIoU over the split's test classes, FB-IoU)`.
pub fn evaluate_miou(
    model: &PFENet,
    dataset: &SynthDataset,
    store: &FeatureStore,
    split: &FoldSplit,
    shot: usize,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let acc = evaluate(model, dataset, store, split, shot, episodes, seed)?;
    let miou = acc.miou(&split.test_classes)?;
    Ok((miou, acc.fb_iou()))
}
