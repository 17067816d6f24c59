//! Brute-force oracle for prior generation plus the prior invariants.
//!
//! The oracle recomputes every mask from raw feature arrays with naive
//! O((hw)²·c) loops — independent of the library's correspondence and
//! normalization code paths — and the two must agree within 1e-6.

use pfenet_core::backbone::{Backbone, BackboneConfig};
use pfenet_core::episodes::{BitMask, RgbImage};
use pfenet_core::prior::{
    self, FeatureSource, PriorConfig, PriorMask, Reduction, SupportRep,
};
use pfenet_core::rng::stream_rng;
use pfenet_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn all_configs() -> Vec<PriorConfig> {
    let mut configs = Vec::new();
    for source in [
        FeatureSource::FixedHigh,
        FeatureSource::FixedMid,
        FeatureSource::LearnableHigh,
        FeatureSource::LearnableMid,
    ] {
        for reduction in [Reduction::Max, Reduction::Mean] {
            for rep in [SupportRep::PerPixel, SupportRep::MaskPooled] {
                configs.push(PriorConfig {
                    feature_source: source,
                    reduction,
                    support_rep: rep,
                    epsilon: 1e-7,
                });
            }
        }
    }
    configs
}

/// Planar [c, h, w] slice → per-pixel rows.
fn pixel_vec(data: &[f64], c: usize, hw: usize, pixel: usize) -> Vec<f64> {
    (0..c).map(|ch| data[ch * hw + pixel]).collect()
}

/// Independent recomputation of the whole prior pipeline from raw arrays.
fn oracle_prior(
    query: &[f64],
    support: &[f64],
    c: usize,
    h: usize,
    w: usize,
    mask: &BitMask,
    cfg: &PriorConfig,
) -> Vec<f64> {
    let hw = h * w;
    // soft mask by explicit block averaging
    let (fh, fw) = (mask.height / h, mask.width / w);
    let mut soft = vec![0.0; hw];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for y in 0..fh {
                for x in 0..fw {
                    acc += mask.data[(i * fh + y) * mask.width + (j * fw + x)] as f64;
                }
            }
            soft[i * w + j] = acc / (fh * fw) as f64;
        }
    }
    // masked support features
    let mut masked = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            masked[ch * hw + p] = support[ch * hw + p] * soft[p];
        }
    }
    // support representation
    let (support_rows, sn): (Vec<Vec<f64>>, usize) = match cfg.support_rep {
        SupportRep::PerPixel => ((0..hw).map(|p| pixel_vec(&masked, c, hw, p)).collect(), hw),
        SupportRep::MaskPooled => {
            let denom: f64 = soft.iter().sum::<f64>() + cfg.epsilon;
            let pooled: Vec<f64> = (0..c)
                .map(|ch| (0..hw).map(|p| masked[ch * hw + p]).sum::<f64>() / denom)
                .collect();
            (vec![pooled], 1)
        }
    };
    // cosine similarities, reduced per query pixel
    let mut c_q = vec![0.0; hw];
    for q in 0..hw {
        let qv = pixel_vec(query, c, hw, q);
        let qn = qv.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut best = f64::NEG_INFINITY;
        let mut total = 0.0;
        for row in support_rows.iter() {
            let sn_norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let sim = if qn == 0.0 || sn_norm == 0.0 {
                0.0
            } else {
                qv.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / (qn * sn_norm)
            };
            best = best.max(sim);
            total += sim;
        }
        c_q[q] = match cfg.reduction {
            Reduction::Max => best,
            Reduction::Mean => total / sn as f64,
        };
    }
    // min-max normalization
    let min = c_q.iter().copied().fold(f64::INFINITY, f64::min);
    let max = c_q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    c_q.iter()
        .map(|v| (v - min) / (max - min + cfg.epsilon))
        .collect()
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> RgbImage {
    let mut img = RgbImage::new(size, size);
    for v in img.data.iter_mut() {
        *v = rng.gen_range(0..=255);
    }
    img
}

fn random_mask(rng: &mut ChaCha8Rng, size: usize) -> BitMask {
    let mut m = BitMask::new(size, size);
    for v in m.data.iter_mut() {
        *v = u8::from(rng.gen_bool(0.35));
    }
    m
}

#[test]
fn prior_matches_brute_force_oracle_for_every_config() {
    let backbone = Backbone::new(&BackboneConfig::default(), 99);
    let size = 16;
    for case in 0..50u64 {
        let mut rng = stream_rng(1000 + case, &[case]);
        let query_img = random_image(&mut rng, size);
        let support_img = random_image(&mut rng, size);
        let mask = random_mask(&mut rng, size);

        let (q_mid, q_high) = backbone.extract(&query_img.to_tensor()).unwrap();
        let (s_mid, s_high) = backbone.extract(&support_img.to_tensor()).unwrap();

        for cfg in all_configs() {
            let (qf, sf) = if cfg.feature_source.uses_high_tap() {
                (&q_high, &s_high)
            } else {
                (&q_mid, &s_mid)
            };
            let produced = prior::generate_from_features(qf, sf, &mask, &cfg).unwrap();
            let (_, c, h, w) = qf.shape().dims4().unwrap();
            let expected = oracle_prior(qf.data(), sf.data(), c, h, w, &mask, &cfg);
            for (i, (a, e)) in produced.values.data().iter().zip(&expected).enumerate() {
                assert!(
                    (a - e).abs() < 1e-6,
                    "config {cfg:?} case {case} pixel {i}: {a} vs oracle {e}"
                );
            }
        }
    }

    // the image-level entry point composes extraction with the same pipeline
    for case in 0..3u64 {
        let mut rng = stream_rng(1100, &[case]);
        let query_img = random_image(&mut rng, size);
        let support_img = random_image(&mut rng, size);
        let mask = random_mask(&mut rng, size);
        for cfg in all_configs() {
            let whole =
                prior::generate_prior(&backbone, &query_img, &support_img, &mask, &cfg).unwrap();
            let (q_mid, q_high) = backbone.extract(&query_img.to_tensor()).unwrap();
            let (s_mid, s_high) = backbone.extract(&support_img.to_tensor()).unwrap();
            let (qf, sf) = if cfg.feature_source.uses_high_tap() {
                (q_high, s_high)
            } else {
                (q_mid, s_mid)
            };
            let staged = prior::generate_from_features(&qf, &sf, &mask, &cfg).unwrap();
            assert_eq!(whole.values.data(), staged.values.data());
        }
    }
}

#[test]
fn prior_values_stay_in_unit_interval() {
    let backbone = Backbone::new(&BackboneConfig::default(), 7);
    for case in 0..100u64 {
        let mut rng = stream_rng(2000, &[case]);
        let q = random_image(&mut rng, 16);
        let s = random_image(&mut rng, 16);
        let mask = random_mask(&mut rng, 16);
        let cfg = PriorConfig::default();
        let p = prior::generate_prior(&backbone, &q, &s, &mask, &cfg).unwrap();
        assert!(p.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(!p.values.requires_grad());
    }
}

#[test]
fn empty_support_mask_gives_all_zero_prior() {
    let backbone = Backbone::new(&BackboneConfig::default(), 7);
    for case in 0..100u64 {
        let mut rng = stream_rng(3000, &[case]);
        let q = random_image(&mut rng, 16);
        let s = random_image(&mut rng, 16);
        let empty = BitMask::new(16, 16);
        let p = prior::generate_prior(&backbone, &q, &s, &empty, &PriorConfig::default()).unwrap();
        assert!(p.values.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn self_match_constant_correspondence_normalizes_to_zero() {
    // query == support with an all-one mask and strictly positive features:
    // every pixel matches itself exactly, the correspondence is constant 1,
    // and the ε rule sends the normalized mask to zero
    for case in 0..100u64 {
        let mut rng = stream_rng(4000, &[case]);
        let (c, h, w) = (5, 4, 4);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(0.1..1.0)).collect();
        let feat =
            Tensor::from_vec(pfenet_core::Shape::new(&[1, c, h, w]).unwrap(), data).unwrap();
        let mut full = BitMask::new(w, h);
        full.data.fill(1);
        let p =
            prior::generate_from_features(&feat, &feat, &full, &PriorConfig::default()).unwrap();
        // cos(x, x) is 1 only to ~1e-16 in floating point, so the
        // correspondence is constant to that precision and the ε-normalized
        // mask is bounded by (max−min)/ε ≈ 4e-9
        assert!(
            p.values.data().iter().all(|&v| v.abs() < 1e-6),
            "case {case}: self-match prior should be ~0"
        );
    }
}

#[test]
fn max_reduction_invariant_to_support_pixel_permutation() {
    for case in 0..100u64 {
        let mut rng = stream_rng(5000, &[case]);
        let (c, h, w) = (6, 4, 4);
        let hw = h * w;
        let qdata: Vec<f64> = (0..c * hw).map(|_| rng.gen_range(0.0..1.0)).collect();
        let sdata: Vec<f64> = (0..c * hw).map(|_| rng.gen_range(0.0..1.0)).collect();
        // random permutation of support pixels, applied to every channel
        let mut perm: Vec<usize> = (0..hw).collect();
        for j in 0..hw {
            let k = rng.gen_range(j..hw);
            perm.swap(j, k);
        }
        let mut s_perm = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                s_perm[ch * hw + perm[p]] = sdata[ch * hw + p];
            }
        }
        let shape = pfenet_core::Shape::new(&[1, c, h, w]).unwrap();
        let q = Tensor::from_vec(shape.clone(), qdata).unwrap();
        let s = Tensor::from_vec(shape.clone(), sdata).unwrap();
        let sp = Tensor::from_vec(shape, s_perm).unwrap();
        let a = prior::correspondence(&q, &s, Reduction::Max).unwrap();
        let b = prior::correspondence(&q, &sp, Reduction::Max).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn averaged_priors_stay_in_unit_interval() {
    let backbone = Backbone::new(&BackboneConfig::default(), 11);
    let cfg = PriorConfig::default();
    for case in 0..20u64 {
        let mut rng = stream_rng(6000, &[case]);
        let q = random_image(&mut rng, 16);
        let masks: Vec<PriorMask> = (0..5)
            .map(|_| {
                let s = random_image(&mut rng, 16);
                let m = random_mask(&mut rng, 16);
                prior::generate_prior(&backbone, &q, &s, &m, &cfg).unwrap()
            })
            .collect();
        let avg = prior::average_priors(&masks).unwrap();
        assert!(avg.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
