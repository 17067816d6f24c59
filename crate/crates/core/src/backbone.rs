//! Tiny convolutional feature extractor with middle- and high-level taps.
//!
//! The stem downsamples by 4 (two conv+relu pairs, each followed by a 2×2
//! average pool), then three stages run at constant resolution. The
//! middle-level tap concatenates the outputs of stages 2 and 3; the
//! high-level tap is the output of stage 4. The backbone is pretrained on
//! base-class pixel classification and then frozen.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::episodes::{FoldSplit, SynthDataset};
use crate::error::{ensure, Result};
use crate::layers::ConvLayer;
use crate::rng::stream_rng;
use crate::tensor::{
    accumulate_gradients, backward, concat_channels, sgd_step, LrSchedule, Parameter, Tensor,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Channel widths of stage0 (stem), stage2, stage3 and stage4.
    pub widths: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: [32, 48, 64, 64],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Vec<ConvLayer>,
    stage2: Vec<ConvLayer>,
    stage3: Vec<ConvLayer>,
    stage4: Vec<ConvLayer>,
    frozen: bool,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, &[0xbac0]);
        let [w0, w2, w3, w4] = config.widths;
        let stem = vec![
            ConvLayer::init("stem.0", 3, w0, 3, &mut rng),
            ConvLayer::init("stem.1", w0, w0, 3, &mut rng),
            ConvLayer::init("stem.2", w0, w0, 3, &mut rng),
            ConvLayer::init("stem.3", w0, w0, 3, &mut rng),
        ];
        let stage = |name: &str, cin: usize, cout: usize, rng: &mut _| {
            vec![
                ConvLayer::init(&format!("{name}.0"), cin, cout, 3, rng),
                ConvLayer::init(&format!("{name}.1"), cout, cout, 3, rng),
            ]
        };
        Backbone {
            config: config.clone(),
            stem,
            stage2: stage("stage2", w0, w2, &mut rng),
            stage3: stage("stage3", w2, w3, &mut rng),
            stage4: stage("stage4", w3, w4, &mut rng),
            frozen: false,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Channel count of the middle-level tap (stage2 ++ stage3).
    pub fn mid_channels(&self) -> usize {
        self.config.widths[1] + self.config.widths[2]
    }

    /// Channel count of the high-level tap (stage4).
    pub fn high_channels(&self) -> usize {
        self.config.widths[3]
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Extracts middle- and high-level features at 1/4 resolution.
    pub fn extract(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        self.extract_with(image, false)
    }

    /// As [`extract`](Self::extract), optionally recording the graph for
    /// backbone training. A frozen backbone never tracks.
    pub fn extract_with(&self, image: &Tensor, track: bool) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = image.shape().dims4()?;
        ensure!(c == 3, "backbone expects 3-channel images, got {c}");
        ensure!(
            h % 4 == 0 && w % 4 == 0,
            "image size {h}x{w} not divisible by 4"
        );
        let track = track && !self.frozen;

        let mut x = image.clone();
        for (i, layer) in self.stem.iter().enumerate() {
            x = layer.apply(&x, track)?.relu();
            if i % 2 == 1 {
                let (_, _, ch, cw) = x.shape().dims4()?;
                x = x.adaptive_avg_pool_rect(ch / 2, cw / 2)?;
            }
        }
        let mut s2 = x;
        for layer in &self.stage2 {
            s2 = layer.apply(&s2, track)?.relu();
        }
        let mut s3 = s2.clone();
        for layer in &self.stage3 {
            s3 = layer.apply(&s3, track)?.relu();
        }
        let mut s4 = s3.clone();
        for layer in &self.stage4 {
            s4 = layer.apply(&s4, track)?.relu();
        }
        let mid = concat_channels(&[&s2, &s3])?;
        Ok((mid, s4))
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.layers().iter().flat_map(|l| l.params()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for l in self.stem.iter_mut() {
            out.extend(l.params_mut());
        }
        for l in self.stage2.iter_mut() {
            out.extend(l.params_mut());
        }
        for l in self.stage3.iter_mut() {
            out.extend(l.params_mut());
        }
        for l in self.stage4.iter_mut() {
            out.extend(l.params_mut());
        }
        out
    }

    /// Parameters reachable by the episodic loss when the backbone is
    /// trainable. The high-tap stage feeds only the detached prior, so its
    /// loss gradient is identically zero and it stays out of the update.
    pub fn episodic_parameters(&self) -> Vec<&Parameter> {
        self.stem
            .iter()
            .chain(&self.stage2)
            .chain(&self.stage3)
            .flat_map(|l| l.params())
            .collect()
    }

    pub fn episodic_parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for l in self.stem.iter_mut() {
            out.extend(l.params_mut());
        }
        for l in self.stage2.iter_mut() {
            out.extend(l.params_mut());
        }
        for l in self.stage3.iter_mut() {
            out.extend(l.params_mut());
        }
        out
    }

    fn layers(&self) -> Vec<&ConvLayer> {
        self.stem
            .iter()
            .chain(&self.stage2)
            .chain(&self.stage3)
            .chain(&self.stage4)
            .collect()
    }

    /// Order-sensitive hash of all parameter values; constant while frozen.
    pub fn checksum(&self) -> u64 {
        let mut acc = 0xcbf2_9ce4_8422_2325u64;
        for p in self.parameters() {
            for v in p.values() {
                acc = (acc ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        acc
    }

    /// Pretrains on base-class per-pixel classification, then freezes.
    ///
    /// A disposable 1×1 head classifies every feature-resolution pixel into
    /// background + the split's training classes. Samples of test-fold
    /// classes are rejected.
    pub fn pretrain(
        &mut self,
        dataset: &SynthDataset,
        split: &FoldSplit,
        cfg: &PretrainConfig,
    ) -> Result<PretrainReport> {
        let samples: Vec<usize> = (0..dataset.len())
            .filter(|&i| split.is_train_class(dataset.get(i).class))
            .collect();
        self.pretrain_on(dataset, split, &samples, cfg)
    }

    /// Pretraining over an explicit sample list. Any sample whose class
    /// belongs to the test fold is a contract violation (class leakage).
    pub fn pretrain_on(
        &mut self,
        dataset: &SynthDataset,
        split: &FoldSplit,
        samples: &[usize],
        cfg: &PretrainConfig,
    ) -> Result<PretrainReport> {
        ensure!(!samples.is_empty(), "pretraining needs at least one sample");
        for &idx in samples {
            let class = dataset.get(idx).class;
            ensure!(
                !split.is_test_class(class),
                "sample {idx} has test-fold class {class}: class leakage"
            );
        }
        let was_frozen = self.frozen;
        self.frozen = false;

        // channel 0 is background, then the train classes in sorted order
        let mut class_channel = alloc::collections::BTreeMap::new();
        for (i, &c) in split.train_classes.iter().enumerate() {
            class_channel.insert(c, (i + 1) as u8);
        }
        let n_out = split.train_classes.len() + 1;

        let mut rng = stream_rng(cfg.seed, &[0x9e7a]);
        let mut head = ConvLayer::init("pretrain.head", self.high_channels(), n_out, 1, &mut rng);

        // every 5th sample is held out for the before/after report
        let holdout: Vec<usize> = samples.iter().copied().step_by(5).collect();
        let train: Vec<usize> = samples
            .iter()
            .copied()
            .enumerate()
            .filter(|(i, _)| i % 5 != 0)
            .map(|(_, s)| s)
            .collect();
        ensure!(!train.is_empty(), "pretraining sample list too small");

        let eval_loss = |bb: &Backbone, head: &ConvLayer| -> Result<f64> {
            let mut total = 0.0;
            for &idx in &holdout {
                let (loss, _, _) = pretrain_loss(bb, head, dataset, idx, &class_channel, false)?;
                total += loss.item()?;
            }
            Ok(total / holdout.len() as f64)
        };
        let initial_loss = eval_loss(self, &head)?;

        let schedule = LrSchedule {
            base_lr: cfg.lr,
            power: cfg.power,
            max_iter: cfg.epochs * train.len(),
        };
        let mut iter = 0usize;
        for epoch in 0..cfg.epochs {
            let mut order = train.clone();
            let mut shuffle_rng = stream_rng(cfg.seed, &[0x03de, epoch as u64]);
            for j in 0..order.len() {
                let swap = shuffle_rng.gen_range(j..order.len());
                order.swap(j, swap);
            }
            for &idx in &order {
                let (loss, _, _) =
                    pretrain_loss(self, &head, dataset, idx, &class_channel, true)?;
                let grads = backward(&loss)?;
                accumulate_gradients(self.parameters_mut(), &grads)?;
                accumulate_gradients(head.params_mut(), &grads)?;
                let lr = schedule.lr(iter)?;
                sgd_step(self.parameters_mut(), lr, cfg.momentum, cfg.weight_decay)?;
                sgd_step(head.params_mut(), lr, cfg.momentum, cfg.weight_decay)?;
                iter += 1;
            }
        }

        let final_loss = eval_loss(self, &head)?;
        let (mut correct, mut total, mut class_hist) = (0usize, 0usize, vec![0usize; n_out]);
        for &idx in &holdout {
            let (_, logits, labels) =
                pretrain_loss(self, &head, dataset, idx, &class_channel, false)?;
            let (_, classes, fh, fw) = logits.shape().dims4()?;
            let plane = fh * fw;
            for pos in 0..plane {
                let mut best = 0;
                for ch in 1..classes {
                    if logits.data()[ch * plane + pos] > logits.data()[best * plane + pos] {
                        best = ch;
                    }
                }
                if best as u8 == labels[pos] {
                    correct += 1;
                }
                class_hist[labels[pos] as usize] += 1;
                total += 1;
            }
        }
        let majority = class_hist.iter().copied().max().unwrap_or(0);

        // the auxiliary head is dropped here; only backbone weights remain
        self.frozen = if cfg.freeze_after { true } else { was_frozen };
        Ok(PretrainReport {
            initial_loss,
            final_loss,
            pixel_accuracy: correct as f64 / total as f64,
            majority_baseline: majority as f64 / total as f64,
        })
    }
}

fn pretrain_loss(
    backbone: &Backbone,
    head: &ConvLayer,
    dataset: &SynthDataset,
    idx: usize,
    class_channel: &alloc::collections::BTreeMap<u8, u8>,
    track: bool,
) -> Result<(Tensor, Tensor, Vec<u8>)> {
    let sample = dataset.get(idx);
    let image = sample.image.to_tensor();
    let (_, high) = backbone.extract_with(&image, track)?;
    let logits = head.apply(&high, track)?;
    let (_, _, fh, fw) = logits.shape().dims4()?;
    let soft = sample.mask.downsample_to(fh, fw)?;
    let channel = *class_channel.get(&sample.class).expect("train class");
    let labels: Vec<u8> = soft
        .data()
        .iter()
        .map(|&v| if v >= 0.5 { channel } else { 0 })
        .collect();
    let loss = logits.softmax_cross_entropy(&labels)?;
    Ok((loss, logits.detach(), labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub seed: u64,
    pub freeze_after: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 4,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            seed: 23,
            freeze_after: true,
        }
    }
}

/// Held-out loss and accuracy before/after pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub pixel_accuracy: f64,
    pub majority_baseline: f64,
}
