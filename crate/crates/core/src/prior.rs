//! Training-free prior mask generation.
//!
//! The prior scores every query-feature pixel by its best (or average)
//! cosine correspondence with the masked support feature, then min-max
//! normalizes the map into [0, 1]. None of this participates in the
//! gradient tape, so the mask cannot bias the model towards training
//! classes.

use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::Backbone;
use crate::episodes::{BitMask, RgbImage};
use crate::error::{ensure, Result};
use crate::math;
use crate::tensor::{Shape, Tensor};

/// Which backbone tap feeds the correspondence computation. `Fixed*`
/// sources pair with a frozen backbone, making the prior constant across
/// training; `Learnable*` sources read the live (possibly training)
/// backbone and drift with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    FixedHigh,
    FixedMid,
    LearnableHigh,
    LearnableMid,
}

impl FeatureSource {
    pub fn uses_high_tap(&self) -> bool {
        matches!(self, FeatureSource::FixedHigh | FeatureSource::LearnableHigh)
    }
}

/// How per-support-pixel similarities collapse into one value per query
/// pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Max,
    Mean,
}

/// Support representation: all masked support pixels, or a single
/// masked-GAP pooled vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportRep {
    PerPixel,
    MaskPooled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    pub feature_source: FeatureSource,
    pub reduction: Reduction,
    pub support_rep: SupportRep,
    pub epsilon: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            feature_source: FeatureSource::FixedHigh,
            reduction: Reduction::Max,
            support_rep: SupportRep::PerPixel,
            epsilon: 1e-7,
        }
    }
}

/// Normalized correspondence map over the query feature grid. Values lie
/// in [0, 1] and never carry gradients.
#[derive(Debug, Clone)]
pub struct PriorMask {
    pub values: Tensor,
    pub config: PriorConfig,
}

/// Area-downsamples the binary support mask to the feature grid and zeroes
/// background positions in every channel.
pub fn mask_support_features(features: &Tensor, support_mask: &BitMask) -> Result<Tensor> {
    let (_, _, h, w) = features.shape().dims4()?;
    let soft = support_mask.downsample_to(h, w)?;
    features.detach().mul_mask(&soft)
}

/// Pixel-wise cosine correspondence between the query feature and the
/// (masked) support feature, reduced over support pixels. Zero-norm
/// vectors have similarity 0. Output is a rank-1 tensor of length `h·w`
/// in row-major query-pixel order, detached from any tape.
pub fn correspondence(query: &Tensor, support: &Tensor, reduction: Reduction) -> Result<Tensor> {
    let (qb, qc, qh, qw) = query.shape().dims4()?;
    let (sb, sc, sh, sw) = support.shape().dims4()?;
    ensure!(qb == 1 && sb == 1, "correspondence expects batch size 1");
    ensure!(
        qc == sc,
        "correspondence channel mismatch: query {qc} vs support {sc}"
    );
    let (qn, sn) = (qh * qw, sh * sw);

    // gather per-pixel vectors row-major for cache-friendly dot products
    let rows = |data: &[f64], n: usize, c: usize| -> (Vec<f64>, Vec<f64>) {
        let mut rows = vec![0.0; n * c];
        let mut norms = vec![0.0; n];
        for ch in 0..c {
            for p in 0..n {
                rows[p * c + ch] = data[ch * n + p];
            }
        }
        for p in 0..n {
            let row = &rows[p * c..][..c];
            norms[p] = math::sqrt(row.iter().map(|v| v * v).sum::<f64>());
        }
        (rows, norms)
    };
    let (q_rows, q_norms) = rows(query.data(), qn, qc);
    let (s_rows, s_norms) = rows(support.data(), sn, sc);

    let mut out = vec![0.0; qn];
    for q in 0..qn {
        let qrow = &q_rows[q * qc..][..qc];
        let mut best = f64::NEG_INFINITY;
        let mut total = 0.0;
        for s in 0..sn {
            let sim = if q_norms[q] == 0.0 || s_norms[s] == 0.0 {
                0.0
            } else {
                let dot: f64 = qrow
                    .iter()
                    .zip(&s_rows[s * sc..][..sc])
                    .map(|(a, b)| a * b)
                    .sum();
                dot / (q_norms[q] * s_norms[s])
            };
            best = best.max(sim);
            total += sim;
        }
        out[q] = match reduction {
            Reduction::Max => best,
            Reduction::Mean => total / sn as f64,
        };
    }
    Tensor::from_vec(Shape::new(&[qn])?, out)
}

/// Min-max normalization of the correspondence vector into a `[1,1,h,w]`
/// prior mask: `(y − min) / (max − min + ε)`.
pub fn normalize(c_q: &Tensor, h: usize, w: usize, config: &PriorConfig) -> Result<PriorMask> {
    ensure!(config.epsilon > 0.0, "epsilon must be positive");
    ensure!(
        c_q.shape().dims() == [h * w],
        "correspondence length {} does not reshape to {h}x{w}",
        c_q.shape()
    );
    let data = c_q.data();
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom = max - min + config.epsilon;
    let values: Vec<f64> = data.iter().map(|v| (v - min) / denom).collect();
    Ok(PriorMask {
        values: Tensor::from_vec(Shape::new(&[1, 1, h, w])?, values)?,
        config: *config,
    })
}

/// Full prior pipeline from raw (already extracted) features.
pub fn generate_from_features(
    query_features: &Tensor,
    support_features: &Tensor,
    support_mask: &BitMask,
    config: &PriorConfig,
) -> Result<PriorMask> {
    let (_, _, h, w) = query_features.shape().dims4()?;
    let query = query_features.detach();
    let masked = mask_support_features(support_features, support_mask)?;
    let support_rep = match config.support_rep {
        SupportRep::PerPixel => masked,
        SupportRep::MaskPooled => {
            let (_, _, sh, sw) = support_features.shape().dims4()?;
            let soft = support_mask.downsample_to(sh, sw)?;
            support_features
                .detach()
                .masked_gap(&soft, config.epsilon)?
        }
    };
    let c_q = correspondence(&query, &support_rep, config.reduction)?;
    normalize(&c_q, h, w, config)
}

/// End-to-end prior generation from images, using the configured backbone
/// tap. The result is detached from all gradients.
pub fn generate_prior(
    backbone: &Backbone,
    query_image: &RgbImage,
    support_image: &RgbImage,
    support_mask: &BitMask,
    config: &PriorConfig,
) -> Result<PriorMask> {
    let (q_mid, q_high) = backbone.extract(&query_image.to_tensor())?;
    let (s_mid, s_high) = backbone.extract(&support_image.to_tensor())?;
    let (q_feat, s_feat) = if config.feature_source.uses_high_tap() {
        (q_high, s_high)
    } else {
        (q_mid, s_mid)
    };
    generate_from_features(&q_feat, &s_feat, support_mask, config)
}

/// Elementwise mean of K per-support prior masks. No re-normalization is
/// applied, so the averaged mask generally spans less than the full [0, 1]
/// range.
pub fn average_priors(masks: &[PriorMask]) -> Result<PriorMask> {
    ensure!(!masks.is_empty(), "averaging zero prior masks");
    let first = &masks[0];
    for m in &masks[1..] {
        ensure!(
            m.config == first.config,
            "prior masks with mixed configs cannot be averaged"
        );
        ensure!(
            m.values.shape() == first.values.shape(),
            "prior masks with mixed shapes cannot be averaged"
        );
    }
    let n = first.values.shape().numel();
    let mut acc = vec![0.0; n];
    for m in masks {
        for (a, v) in acc.iter_mut().zip(m.values.data()) {
            *a += v;
        }
    }
    let k = masks.len() as f64;
    for a in acc.iter_mut() {
        *a /= k;
    }
    Ok(PriorMask {
        values: Tensor::from_vec(first.values.shape().clone(), acc)?,
        config: first.config,
    })
}
