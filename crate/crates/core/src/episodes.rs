//! Synthetic shape dataset, fold construction and episodic sampling.
//!
//! Every image holds one foreground shape instance at a random scale
//! (20–70% of the image side), rotation and position, over a textured
//! low-frequency background, so support and query objects of a class are
//! deliberately spatially inconsistent. Generation is a pure function of
//! the seed.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::math;
use crate::rng::stream_rng;
use crate::tensor::{Shape, Tensor};

/// 8-bit RGB image, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    /// Planar `[1, 3, h, w]` tensor with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    data[ch * h * w + y * w + x] = self.data[(y * w + x) * 3 + ch] as f64 / 255.0;
                }
            }
        }
        Tensor::from_vec(Shape::new(&[1, 3, h, w]).expect("rank 4"), data).expect("sized")
    }
}

/// Binary segmentation mask, `{0, 1}` valued, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BitMask {
    pub fn new(width: usize, height: usize) -> Self {
        BitMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Area-averaged downsampling to `out_h × out_w`, yielding a soft
    /// `[1, 1, out_h, out_w]` mask. The mask size must be an integer
    /// multiple of the target size.
    pub fn downsample_to(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        ensure!(
            out_h > 0 && out_w > 0 && self.height % out_h == 0 && self.width % out_w == 0,
            "mask {}x{} is not an integer multiple of {out_h}x{out_w}",
            self.height,
            self.width
        );
        let (fh, fw) = (self.height / out_h, self.width / out_w);
        let mut soft = vec![0.0; out_h * out_w];
        for i in 0..out_h {
            for j in 0..out_w {
                let mut acc = 0usize;
                for y in 0..fh {
                    for x in 0..fw {
                        acc += self.data[(i * fh + y) * self.width + (j * fw + x)] as usize;
                    }
                }
                soft[i * out_w + j] = acc as f64 / (fh * fw) as f64;
            }
        }
        Tensor::from_vec(Shape::new(&[1, 1, out_h, out_w]).expect("rank 4"), soft)
    }
}

/// The twelve foreground shape classes. Class ids are 1-based; 0 is
/// background.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Disk,
    Ring,
    Square,
    Frame,
    Triangle,
    Cross,
    BarH,
    BarV,
    Diamond,
    LShape,
    TShape,
    CheckerBlob,
}

pub const ALL_SHAPE_CLASSES: [ShapeClass; 12] = [
    ShapeClass::Disk,
    ShapeClass::Ring,
    ShapeClass::Square,
    ShapeClass::Frame,
    ShapeClass::Triangle,
    ShapeClass::Cross,
    ShapeClass::BarH,
    ShapeClass::BarV,
    ShapeClass::Diamond,
    ShapeClass::LShape,
    ShapeClass::TShape,
    ShapeClass::CheckerBlob,
];

impl ShapeClass {
    pub fn from_class_id(id: u8) -> Option<ShapeClass> {
        ALL_SHAPE_CLASSES.get(id.checked_sub(1)? as usize).copied()
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Ring => "ring",
            ShapeClass::Square => "square",
            ShapeClass::Frame => "frame",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
            ShapeClass::BarH => "bar-h",
            ShapeClass::BarV => "bar-v",
            ShapeClass::Diamond => "diamond",
            ShapeClass::LShape => "l-shape",
            ShapeClass::TShape => "t-shape",
            ShapeClass::CheckerBlob => "checker-blob",
        }
    }

    /// Membership test in the shape's canonical frame: `(u, v)` are
    /// coordinates relative to the center, `half` is half the shape extent.
    fn contains(&self, u: f64, v: f64, half: f64) -> bool {
        let r2 = u * u + v * v;
        let au = math::abs(u);
        let av = math::abs(v);
        match self {
            ShapeClass::Disk => r2 <= half * half,
            ShapeClass::Ring => {
                let inner = 0.55 * half;
                r2 <= half * half && r2 >= inner * inner
            }
            ShapeClass::Square => au <= half && av <= half,
            ShapeClass::Frame => {
                let m = au.max(av);
                m <= half && m >= 0.55 * half
            }
            ShapeClass::Triangle => v >= -half && v <= half && au <= (v + half) / 2.0,
            ShapeClass::Cross => {
                (au <= 0.3 * half && av <= half) || (av <= 0.3 * half && au <= half)
            }
            ShapeClass::BarH => av <= 0.28 * half && au <= half,
            ShapeClass::BarV => au <= 0.28 * half && av <= half,
            ShapeClass::Diamond => au + av <= half,
            ShapeClass::LShape => {
                let t = 0.45 * half;
                (u >= -half && u <= -half + t && av <= half)
                    || (v >= half - t && v <= half && au <= half)
            }
            ShapeClass::TShape => {
                let t = 0.45 * half;
                (v >= -half && v <= -half + t && au <= half) || (au <= t / 2.0 && av <= half)
            }
            ShapeClass::CheckerBlob => {
                if r2 > half * half {
                    return false;
                }
                let cell = half / 2.0;
                let iu = math::floor((u + half) / cell) as i64;
                let iv = math::floor((v + half) / cell) as i64;
                (iu + iv) % 2 == 0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 12,
            images_per_class: 40,
            image_size: 32,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub class: u8,
    pub image: RgbImage,
    pub mask: BitMask,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    config: DatasetConfig,
    samples: Vec<Sample>,
}

impl SynthDataset {
    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    /// Global sample indices of one class, in generation order.
    pub fn class_indices(&self, class: u8) -> Vec<usize> {
        let per = self.config.images_per_class;
        let base = (class as usize - 1) * per;
        (base..base + per).collect()
    }

    pub fn class_histogram(&self) -> BTreeMap<u8, usize> {
        let mut h = BTreeMap::new();
        for s in &self.samples {
            *h.entry(s.class).or_insert(0) += 1;
        }
        h
    }

    /// Rebuilds a dataset from externally stored samples (codec round trip).
    pub fn from_samples(config: DatasetConfig, samples: Vec<Sample>) -> Result<Self> {
        ensure!(
            samples.len() == config.classes * config.images_per_class,
            "sample count {} does not match config",
            samples.len()
        );
        Ok(SynthDataset { config, samples })
    }
}

/// Generates the dataset deterministically from its config.
pub fn generate(config: &DatasetConfig) -> Result<SynthDataset> {
    ensure!(
        config.image_size % 4 == 0,
        "image size {} must be divisible by 4",
        config.image_size
    );
    ensure!(
        config.classes >= 1 && config.classes <= ALL_SHAPE_CLASSES.len(),
        "class count {} outside 1..=12",
        config.classes
    );
    let mut samples = Vec::with_capacity(config.classes * config.images_per_class);
    for class_id in 1..=config.classes as u8 {
        let shape = ShapeClass::from_class_id(class_id).expect("checked range");
        for k in 0..config.images_per_class {
            let mut rng = stream_rng(config.seed, &[0x5a17, class_id as u64, k as u64]);
            let (image, mask) = render_sample(config.image_size, shape, &mut rng)?;
            samples.push(Sample {
                class: class_id,
                image,
                mask,
            });
        }
    }
    Ok(SynthDataset {
        config: config.clone(),
        samples,
    })
}

/// Low-frequency color field: a coarse random grid upsampled bilinearly.
fn texture_field(size: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut grid = vec![[0.0f64; 3]; cells * cells];
    for cell in grid.iter_mut() {
        for c in cell.iter_mut() {
            *c = rng.gen_range(30.0..=225.0);
        }
    }
    let mut field = vec![[0.0f64; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let fy = if cells == 1 {
                0.0
            } else {
                y as f64 / (size - 1) as f64 * (cells - 1) as f64
            };
            let fx = if cells == 1 {
                0.0
            } else {
                x as f64 / (size - 1) as f64 * (cells - 1) as f64
            };
            let (y0, x0) = (math::floor(fy) as usize, math::floor(fx) as usize);
            let (y1, x1) = ((y0 + 1).min(cells - 1), (x0 + 1).min(cells - 1));
            let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
            for c in 0..3 {
                let top = grid[y0 * cells + x0][c] * (1.0 - wx) + grid[y0 * cells + x1][c] * wx;
                let bot = grid[y1 * cells + x0][c] * (1.0 - wx) + grid[y1 * cells + x1][c] * wx;
                field[y * size + x][c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    field
}

fn render_sample(
    size: usize,
    shape: ShapeClass,
    rng: &mut ChaCha8Rng,
) -> Result<(RgbImage, BitMask)> {
    let side = size as f64;
    for _attempt in 0..8 {
        let scale = rng.gen_range(0.2..=0.7);
        let half = scale * side / 2.0;
        let theta = rng.gen_range(-0.52..0.52); // ±30°, keeps bar/L/T classes distinct
        let margin = (half * 1.15).min(side / 2.0);
        let (cx, cy) = if 2.0 * margin >= side {
            (side / 2.0, side / 2.0)
        } else {
            (
                rng.gen_range(margin..side - margin),
                rng.gen_range(margin..side - margin),
            )
        };
        let (sin_t, cos_t) = (math::sin(theta), math::cos(theta));

        let background = texture_field(size, 4, rng);
        let foreground = texture_field(size, 2, rng);

        let mut mask = BitMask::new(size, size);
        let mut image = RgbImage::new(size, size);
        let mut fg_count = 0usize;
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = dx * cos_t + dy * sin_t;
                let v = -dx * sin_t + dy * cos_t;
                let inside = shape.contains(u, v, half);
                let field = if inside {
                    fg_count += 1;
                    mask.data[y * size + x] = 1;
                    &foreground[y * size + x]
                } else {
                    &background[y * size + x]
                };
                for c in 0..3 {
                    let jitter = rng.gen_range(-12.0..=12.0);
                    image.data[(y * size + x) * 3 + c] = (field[c] + jitter).clamp(0.0, 255.0) as u8;
                }
            }
        }
        // thin shapes at the smallest scales can rasterize to nothing
        if fg_count >= 4 && fg_count <= size * size * 3 / 4 {
            return Ok((image, mask));
        }
    }
    Err(crate::Error::contract(
        "failed to render a non-degenerate shape instance",
    ))
}

// ---------------------------------------------------------------------------
// folds

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldScheme {
    /// Consecutive class blocks.
    Contiguous,
    /// Interleaved class ids `{4x − 3 + i}`.
    Strided,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub scheme: FoldScheme,
    pub fold: usize,
    pub train_classes: Vec<u8>,
    pub test_classes: Vec<u8>,
}

impl FoldSplit {
    pub fn is_test_class(&self, class: u8) -> bool {
        self.test_classes.contains(&class)
    }

    pub fn is_train_class(&self, class: u8) -> bool {
        self.train_classes.contains(&class)
    }

    pub fn phase_classes(&self, phase: Phase) -> &[u8] {
        match phase {
            Phase::Train => &self.train_classes,
            Phase::Test => &self.test_classes,
        }
    }
}

/// Builds the class partition for one cross-validation fold.
pub fn split(n_classes: usize, fold: usize, scheme: FoldScheme) -> Result<FoldSplit> {
    ensure!(fold < 4, "fold index {fold} outside 0..=3");
    ensure!(
        n_classes % 4 == 0 && n_classes > 0,
        "class count {n_classes} not divisible by 4"
    );
    let per_fold = n_classes / 4;
    let test_classes: Vec<u8> = match scheme {
        FoldScheme::Contiguous => ((fold * per_fold + 1)..=(fold + 1) * per_fold)
            .map(|c| c as u8)
            .collect(),
        FoldScheme::Strided => (1..=per_fold).map(|x| (4 * x - 3 + fold) as u8).collect(),
    };
    let train_classes: Vec<u8> = (1..=n_classes as u8)
        .filter(|c| !test_classes.contains(c))
        .collect();
    Ok(FoldSplit {
        scheme,
        fold,
        train_classes,
        test_classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

/// One support sample of an episode.
#[derive(Debug, Clone)]
pub struct SupportSample {
    pub index: usize,
    pub image: RgbImage,
    pub mask: BitMask,
}

/// A query plus K supports of a single class. The query ground truth is
/// carried for loss computation and evaluation only; prediction entry
/// points accept just the query image and the supports.
#[derive(Debug, Clone)]
pub struct Episode {
    pub class: u8,
    pub query_index: usize,
    pub query_image: RgbImage,
    pub query_mask: BitMask,
    pub supports: Vec<SupportSample>,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }
}

/// Draws one episode: a class uniform over the phase's class set, then
/// K+1 distinct samples of that class.
pub fn sample_episode(
    dataset: &SynthDataset,
    split: &FoldSplit,
    phase: Phase,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    ensure!(k >= 1, "episode needs at least one support (K >= 1)");
    let classes = split.phase_classes(phase);
    ensure!(!classes.is_empty(), "phase has no classes");
    let class = classes[rng.gen_range(0..classes.len())];
    let mut pool = dataset.class_indices(class);
    ensure!(
        pool.len() >= k + 1,
        "class {class} has {} samples, episode needs {}",
        pool.len(),
        k + 1
    );
    // partial Fisher-Yates: the first K+1 entries become the episode
    for j in 0..=k {
        let swap = rng.gen_range(j..pool.len());
        pool.swap(j, swap);
    }
    let query_index = pool[0];
    let query = dataset.get(query_index);
    let supports = pool[1..=k]
        .iter()
        .map(|&idx| {
            let s = dataset.get(idx);
            SupportSample {
                index: idx,
                image: s.image.clone(),
                mask: s.mask.clone(),
            }
        })
        .collect();
    Ok(Episode {
        class,
        query_index,
        query_image: query.image.clone(),
        query_mask: query.mask.clone(),
        supports,
    })
}

/// Class names for the manifest.
pub fn class_names(n_classes: usize) -> Vec<String> {
    ALL_SHAPE_CLASSES[..n_classes]
        .iter()
        .map(|s| String::from(s.name()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DatasetConfig {
        DatasetConfig {
            classes: 12,
            images_per_class: 8,
            image_size: 16,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&tiny_config()).unwrap();
        let b = generate(&tiny_config()).unwrap();
        for (sa, sb) in (0..a.len()).map(|i| (a.get(i), b.get(i))) {
            assert_eq!(sa.image, sb.image);
            assert_eq!(sa.mask, sb.mask);
        }
    }

    #[test]
    fn class_histogram_is_uniform() {
        let ds = generate(&tiny_config()).unwrap();
        let hist = ds.class_histogram();
        assert_eq!(hist.len(), 12);
        assert!(hist.values().all(|&n| n == 8));
    }

    #[test]
    fn masks_are_nonempty_and_bounded() {
        let ds = generate(&tiny_config()).unwrap();
        for i in 0..ds.len() {
            let count = ds.get(i).mask.foreground_count();
            assert!(count >= 4, "sample {i} mask nearly empty");
            assert!(count <= 16 * 16 * 3 / 4, "sample {i} mask covers too much");
        }
    }

    #[test]
    fn image_size_must_be_divisible_by_four() {
        let mut cfg = tiny_config();
        cfg.image_size = 30;
        assert!(generate(&cfg).unwrap_err().is_contract());
    }

    #[test]
    fn contiguous_split_fold0() {
        let s = split(12, 0, FoldScheme::Contiguous).unwrap();
        assert_eq!(s.test_classes, vec![1, 2, 3]);
        assert_eq!(s.train_classes, (4..=12).collect::<Vec<u8>>());
    }

    #[test]
    fn strided_split_fold1() {
        let s = split(12, 1, FoldScheme::Strided).unwrap();
        assert_eq!(s.test_classes, vec![2, 6, 10]);
    }

    #[test]
    fn splits_are_disjoint_and_complete() {
        for scheme in [FoldScheme::Contiguous, FoldScheme::Strided] {
            for fold in 0..4 {
                let s = split(12, fold, scheme).unwrap();
                for c in &s.test_classes {
                    assert!(!s.train_classes.contains(c));
                }
                assert_eq!(s.train_classes.len() + s.test_classes.len(), 12);
            }
        }
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert!(split(12, 4, FoldScheme::Contiguous)
            .unwrap_err()
            .is_contract());
        assert!(split(10, 0, FoldScheme::Contiguous)
            .unwrap_err()
            .is_contract());
    }

    #[test]
    fn episode_samples_share_class_and_exclude_query() {
        let ds = generate(&tiny_config()).unwrap();
        let s = split(12, 0, FoldScheme::Contiguous).unwrap();
        let mut rng = crate::rng::stream_rng(3, &[]);
        for _ in 0..50 {
            let ep = sample_episode(&ds, &s, Phase::Train, 3, &mut rng).unwrap();
            assert!(s.is_train_class(ep.class));
            assert_eq!(ep.supports.len(), 3);
            for sup in &ep.supports {
                assert_eq!(ds.get(sup.index).class, ep.class);
                assert_ne!(sup.index, ep.query_index);
            }
        }
    }

    #[test]
    fn episode_sampling_is_reproducible() {
        let ds = generate(&tiny_config()).unwrap();
        let s = split(12, 2, FoldScheme::Strided).unwrap();
        let seq = |seed: u64| -> Vec<(u8, usize)> {
            let mut rng = crate::rng::stream_rng(seed, &[1]);
            (0..20)
                .map(|_| {
                    let ep = sample_episode(&ds, &s, Phase::Test, 1, &mut rng).unwrap();
                    (ep.class, ep.query_index)
                })
                .collect()
        };
        assert_eq!(seq(5), seq(5));
        assert_ne!(seq(5), seq(6));
    }

    #[test]
    fn episode_rejects_oversized_k() {
        let ds = generate(&tiny_config()).unwrap();
        let s = split(12, 0, FoldScheme::Contiguous).unwrap();
        let mut rng = crate::rng::stream_rng(3, &[]);
        assert!(sample_episode(&ds, &s, Phase::Train, 8, &mut rng)
            .unwrap_err()
            .is_contract());
        assert!(sample_episode(&ds, &s, Phase::Train, 0, &mut rng)
            .unwrap_err()
            .is_contract());
    }

    #[test]
    fn mask_downsample_averages_blocks() {
        let mut m = BitMask::new(4, 4);
        m.data[0] = 1;
        m.data[1] = 1;
        m.data[4] = 1;
        m.data[5] = 1;
        m.data[10] = 1;
        let soft = m.downsample_to(2, 2).unwrap();
        assert_eq!(soft.data()[0], 1.0);
        assert_eq!(soft.data()[3], 0.25);
        assert!(m.downsample_to(3, 3).unwrap_err().is_contract());
    }
}
