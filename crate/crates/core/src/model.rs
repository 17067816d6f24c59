//! Full network assembly: backbone taps, channel reduction, prior
//! averaging, feature enrichment, the final conv block and classifier,
//! plus the episodic training step.

use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{Backbone, BackboneConfig};
use crate::episodes::{BitMask, Episode, FoldSplit, RgbImage, SupportSample};
use crate::error::{ensure, Error, Result};
use crate::fem::{FemState, PathKind, ScaleSet};
use crate::layers::{ClassifierHead, ConvLayer};
use crate::prior::{self, PriorConfig, PriorMask};
use crate::rng::stream_rng;
use crate::tensor::{
    accumulate_gradients, backward, count_parameters, sgd_step, LrSchedule, Parameter, Tensor,
};

const GAP_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub scales: Vec<usize>,
    pub path: PathKind,
    pub prior_enabled: bool,
    pub prior: PriorConfig,
    pub sigma: f64,
    pub freeze_backbone: bool,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            scales: vec![8, 4, 2],
            path: PathKind::TopDown,
            prior_enabled: true,
            prior: PriorConfig::default(),
            sigma: 1.0,
            freeze_backbone: true,
            backbone: BackboneConfig::default(),
        }
    }
}

/// Weighting of the intermediate supervision losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sigma: f64,
    pub scale_count: usize,
}

/// SGD hyperparameters shared by every training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Frozen-backbone features of one dataset sample, reusable across
/// episodes.
#[derive(Debug, Clone)]
pub struct SampleFeatures {
    pub mid: Tensor,
    pub high: Tensor,
    pub image_h: usize,
    pub image_w: usize,
}

/// Borrowed view of one support sample resolved against a feature cache.
#[derive(Debug, Clone, Copy)]
pub struct SupportInput<'a> {
    pub index: usize,
    pub features: &'a SampleFeatures,
    pub mask: &'a BitMask,
}

/// An episode resolved against a feature cache.
#[derive(Debug, Clone)]
pub struct CachedEpisode<'a> {
    pub class: u8,
    pub query: &'a SampleFeatures,
    pub query_mask: &'a BitMask,
    pub supports: Vec<SupportInput<'a>>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub final_logits: Tensor,
    pub intermediate: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct PFENet {
    pub backbone: Backbone,
    query_reduce: ConvLayer,
    support_reduce: ConvLayer,
    fem: FemState,
    conv_block: [ConvLayer; 2],
    head: ClassifierHead,
    config: ModelConfig,
}

impl PFENet {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        ensure!(config.sigma >= 0.0, "sigma must be non-negative");
        let mut backbone = Backbone::new(&config.backbone, seed);
        backbone.set_frozen(config.freeze_backbone);
        let mid_c = backbone.mid_channels();
        let c = config.channels;
        let mut rng = stream_rng(seed, &[0x9f3e]);
        let query_reduce = ConvLayer::init("query_reduce", mid_c, c, 1, &mut rng);
        let support_reduce = ConvLayer::init("support_reduce", mid_c, c, 1, &mut rng);
        let scales = ScaleSet::new(config.scales.clone(), config.path)?;
        let fem = FemState::new(c, scales, config.prior_enabled, &mut rng);
        let conv_block = [
            ConvLayer::init("conv_block.0", c, c, 3, &mut rng),
            ConvLayer::init("conv_block.1", c, c, 3, &mut rng),
        ];
        let head = ClassifierHead::init("head", c, &mut rng);
        Ok(PFENet {
            backbone,
            query_reduce,
            support_reduce,
            fem,
            conv_block,
            head,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fem_mut(&mut self) -> &mut FemState {
        &mut self.fem
    }

    pub fn fem(&self) -> &FemState {
        &self.fem
    }

    /// Extracts and detaches per-sample backbone features for caching.
    /// Only valid while the backbone is frozen.
    pub fn extract_sample_features(&self, image: &RgbImage) -> Result<SampleFeatures> {
        ensure!(
            self.backbone.is_frozen(),
            "feature caching requires a frozen backbone"
        );
        let (mid, high) = self.backbone.extract(&image.to_tensor())?;
        Ok(SampleFeatures {
            mid: mid.detach(),
            high: high.detach(),
            image_h: image.height,
            image_w: image.width,
        })
    }

    /// Full forward over raw episode images.
    pub fn forward(
        &self,
        query_image: &RgbImage,
        supports: &[SupportSample],
        track: bool,
    ) -> Result<ModelOutput> {
        ensure!(
            !supports.is_empty(),
            "zero-shot episodes are out of scope (K must be >= 1)"
        );
        let track_backbone = track && !self.backbone.is_frozen();
        let (q_mid, q_high) = self
            .backbone
            .extract_with(&query_image.to_tensor(), track_backbone)?;
        let mut resolved = Vec::with_capacity(supports.len());
        for s in supports {
            let (mid, high) = self
                .backbone
                .extract_with(&s.image.to_tensor(), track_backbone)?;
            resolved.push((s.index, mid, high, &s.mask));
        }
        self.pipeline(
            &q_mid,
            &q_high,
            resolved,
            (query_image.height, query_image.width),
            track,
        )
    }

    /// Forward over cached (frozen-backbone) features.
    pub fn forward_cached(
        &self,
        query: &SampleFeatures,
        supports: &[SupportInput],
        track: bool,
    ) -> Result<ModelOutput> {
        ensure!(
            !supports.is_empty(),
            "zero-shot episodes are out of scope (K must be >= 1)"
        );
        let resolved = supports
            .iter()
            .map(|s| {
                (
                    s.index,
                    s.features.mid.clone(),
                    s.features.high.clone(),
                    s.mask,
                )
            })
            .collect();
        self.pipeline(
            &query.mid,
            &query.high,
            resolved,
            (query.image_h, query.image_w),
            track,
        )
    }

    fn pipeline(
        &self,
        query_mid: &Tensor,
        query_high: &Tensor,
        mut supports: Vec<(usize, Tensor, Tensor, &BitMask)>,
        label_hw: (usize, usize),
        track: bool,
    ) -> Result<ModelOutput> {
        // canonical support order: summation order is then independent of
        // the order the caller supplied
        supports.sort_by_key(|(index, _, _, _)| *index);

        let (_, _, fh, fw) = query_mid.shape().dims4()?;
        let q = self.query_reduce.apply(query_mid, track)?.relu();

        let mut pooled: Option<Tensor> = None;
        for (_, mid, _, mask) in &supports {
            let reduced = self.support_reduce.apply(mid, track)?.relu();
            let soft = mask.downsample_to(fh, fw)?;
            let v = reduced.masked_gap(&soft, GAP_EPS)?;
            pooled = Some(match pooled {
                None => v,
                Some(acc) => acc.add(&v)?,
            });
        }
        let support_vec = pooled
            .expect("supports checked non-empty")
            .scale(1.0 / supports.len() as f64);

        let prior_avg: Option<PriorMask> = if self.config.prior_enabled {
            let masks: Vec<PriorMask> = supports
                .iter()
                .map(|(_, mid, high, mask)| {
                    let (qf, sf) = if self.config.prior.feature_source.uses_high_tap() {
                        (query_high, high)
                    } else {
                        (query_mid, mid)
                    };
                    prior::generate_from_features(qf, sf, mask, &self.config.prior)
                })
                .collect::<Result<_>>()?;
            Some(prior::average_priors(&masks)?)
        } else {
            None
        };

        let (enriched, intermediate) =
            self.fem
                .forward(&q, &support_vec, prior_avg.as_ref(), label_hw, track)?;

        let t = self.conv_block[0].apply(&enriched, track)?.relu();
        let t = self.conv_block[1].apply(&t, track)?.relu();
        let x = t.add(&enriched)?;
        let logits = self.head.apply(&x, track)?;
        let final_logits = logits.bilinear_resize(label_hw.0, label_hw.1)?;
        Ok(ModelOutput {
            final_logits,
            intermediate,
        })
    }

    /// Argmax prediction over the two output channels.
    pub fn predict(&self, query_image: &RgbImage, supports: &[SupportSample]) -> Result<BitMask> {
        let out = self.forward(query_image, supports, false)?;
        argmax_mask(&out.final_logits)
    }

    /// Argmax prediction over cached features.
    pub fn predict_cached(
        &self,
        query: &SampleFeatures,
        supports: &[SupportInput],
    ) -> Result<BitMask> {
        let out = self.forward_cached(query, supports, false)?;
        argmax_mask(&out.final_logits)
    }

    /// One episodic training step: forward, joint loss, backward, SGD with
    /// the poly learning rate for `iter`.
    pub fn train_episode(
        &mut self,
        episode: &Episode,
        optim: &OptimConfig,
        schedule: &LrSchedule,
        iter: usize,
        split: &FoldSplit,
    ) -> Result<f64> {
        ensure!(
            split.is_train_class(episode.class),
            "episode class {} belongs to the test fold",
            episode.class
        );
        let out = self.forward(&episode.query_image, &episode.supports, true)?;
        self.apply_loss(&out, &episode.query_mask, optim, schedule, iter)
    }

    /// As [`train_episode`](Self::train_episode) over cached features.
    pub fn train_episode_cached(
        &mut self,
        episode: &CachedEpisode,
        optim: &OptimConfig,
        schedule: &LrSchedule,
        iter: usize,
        split: &FoldSplit,
    ) -> Result<f64> {
        ensure!(
            split.is_train_class(episode.class),
            "episode class {} belongs to the test fold",
            episode.class
        );
        let out = self.forward_cached(episode.query, &episode.supports, true)?;
        self.apply_loss(&out, episode.query_mask, optim, schedule, iter)
    }

    fn apply_loss(
        &mut self,
        out: &ModelOutput,
        query_mask: &BitMask,
        optim: &OptimConfig,
        schedule: &LrSchedule,
        iter: usize,
    ) -> Result<f64> {
        let weights = LossWeights {
            sigma: self.config.sigma,
            scale_count: out.intermediate.len(),
        };
        let loss = total_loss(&out.final_logits, &out.intermediate, query_mask, &weights)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(alloc::format!(
                "training loss became non-finite at iteration {iter}"
            )));
        }
        let grads = backward(&loss)?;
        accumulate_gradients(self.trainable_parameters_mut(), &grads)?;
        let lr = schedule.lr(iter)?;
        sgd_step(
            self.trainable_parameters_mut(),
            lr,
            optim.momentum,
            optim.weight_decay,
        )?;
        Ok(value)
    }

    /// Learnable parameters: head layers plus the backbone when it is not
    /// frozen. Matches the reporting convention of counting only trainable
    /// weights.
    pub fn trainable_parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        if !self.backbone.is_frozen() {
            out.extend(self.backbone.episodic_parameters());
        }
        out.extend(self.query_reduce.params());
        out.extend(self.support_reduce.params());
        out.extend(self.fem.params());
        for c in &self.conv_block {
            out.extend(c.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn trainable_parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        if !self.backbone.is_frozen() {
            out.extend(self.backbone.episodic_parameters_mut());
        }
        out.extend(self.query_reduce.params_mut());
        out.extend(self.support_reduce.params_mut());
        out.extend(self.fem.params_mut());
        for c in self.conv_block.iter_mut() {
            out.extend(c.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn learnable_param_count(&self) -> usize {
        count_parameters(self.trainable_parameters().into_iter())
    }

    /// Named parameter sections in canonical order, for serialization.
    pub fn sections(&self) -> Vec<(&'static str, Vec<&Parameter>)> {
        vec![
            ("backbone", self.backbone.parameters()),
            ("query_reduce", self.query_reduce.params().to_vec()),
            ("support_reduce", self.support_reduce.params().to_vec()),
            ("fem", self.fem.params()),
            (
                "conv_block",
                self.conv_block.iter().flat_map(|c| c.params()).collect(),
            ),
            ("head", self.head.params()),
        ]
    }

    pub fn sections_mut(&mut self) -> Vec<(&'static str, Vec<&mut Parameter>)> {
        let mut out: Vec<(&'static str, Vec<&mut Parameter>)> = Vec::new();
        out.push(("backbone", self.backbone.parameters_mut()));
        out.push(("query_reduce", Vec::from(self.query_reduce.params_mut())));
        out.push((
            "support_reduce",
            Vec::from(self.support_reduce.params_mut()),
        ));
        out.push(("fem", self.fem.params_mut()));
        out.push((
            "conv_block",
            self.conv_block
                .iter_mut()
                .flat_map(|c| c.params_mut())
                .collect(),
        ));
        out.push(("head", self.head.params_mut()));
        out
    }
}

fn argmax_mask(logits: &Tensor) -> Result<BitMask> {
    let (b, c, h, w) = logits.shape().dims4()?;
    ensure!(b == 1 && c == 2, "prediction expects [1, 2, h, w] logits");
    let plane = h * w;
    let mut mask = BitMask::new(w, h);
    for pos in 0..plane {
        if logits.data()[plane + pos] > logits.data()[pos] {
            mask.data[pos] = 1;
        }
    }
    Ok(mask)
}

/// Joint loss: `(σ/n)·Σᵢ CE(intermediateᵢ) + CE(final)`.
pub fn total_loss(
    final_logits: &Tensor,
    intermediate: &[Tensor],
    query_mask: &BitMask,
    weights: &LossWeights,
) -> Result<Tensor> {
    ensure!(
        weights.scale_count == intermediate.len(),
        "loss weights expect {} intermediate maps, got {}",
        weights.scale_count,
        intermediate.len()
    );
    let final_loss = final_logits.softmax_cross_entropy(&query_mask.data)?;
    let inter_losses: Vec<Tensor> = intermediate
        .iter()
        .map(|l| l.softmax_cross_entropy(&query_mask.data))
        .collect::<Result<_>>()?;
    combine_losses(&inter_losses, &final_loss, weights.sigma)
}

/// Scalar-level combination of the per-scale losses with the final loss.
pub fn combine_losses(intermediate: &[Tensor], final_loss: &Tensor, sigma: f64) -> Result<Tensor> {
    ensure!(sigma >= 0.0, "sigma must be non-negative");
    if intermediate.is_empty() {
        return Ok(final_loss.clone());
    }
    let mut acc = intermediate[0].clone();
    for l in &intermediate[1..] {
        acc = acc.add(l)?;
    }
    acc.scale(sigma / intermediate.len() as f64).add(final_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn loss_formula_examples() {
        // n=4, each L1=1, L2=2, sigma=1 -> 3.0
        let inters = vec![scalar(1.0); 4];
        let total = combine_losses(&inters, &scalar(2.0), 1.0).unwrap();
        assert!((total.item().unwrap() - 3.0).abs() < 1e-15);

        // sigma=0 -> final loss only
        let total = combine_losses(&inters, &scalar(2.0), 0.0).unwrap();
        assert!((total.item().unwrap() - 2.0).abs() < 1e-15);

        // n=1 -> sigma*L1 + L2
        let total = combine_losses(&[scalar(0.5)], &scalar(2.0), 0.7).unwrap();
        assert!((total.item().unwrap() - (0.7 * 0.5 + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn total_loss_checks_scale_count() {
        let logits = Tensor::zeros(Shape::new(&[1, 2, 2, 2]).unwrap());
        let mask = BitMask::new(2, 2);
        let weights = LossWeights {
            sigma: 1.0,
            scale_count: 3,
        };
        assert!(total_loss(&logits, &[], &mask, &weights)
            .unwrap_err()
            .is_contract());
    }

    #[test]
    fn argmax_prediction_is_binary_and_background_biased_on_ties() {
        let mut data = vec![0.0; 8];
        data[4] = 1.0; // fg logit wins at position 0 only
        let logits = Tensor::from_vec(Shape::new(&[1, 2, 2, 2]).unwrap(), data).unwrap();
        let mask = argmax_mask(&logits).unwrap();
        assert_eq!(mask.data, vec![1, 0, 0, 0]);
    }
}
