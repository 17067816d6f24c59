//! Class mIoU, foreground-background IoU and repeated-run stability
//! statistics.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::episodes::BitMask;
use crate::error::{ensure, Result};
use crate::math;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    intersection: u64,
    union: u64,
}

impl Counts {
    fn iou(&self) -> f64 {
        if self.union == 0 {
            0.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// Pixel-count accumulator over the episodes of one evaluation run.
///
/// Per-class counts feed the class mIoU; the pooled foreground/background
/// counts feed FB-IoU. Counts are integers, so merging shards is exact and
/// order-independent.
#[derive(Debug, Clone, Default)]
pub struct IoUAccumulator {
    classes: BTreeMap<u8, Counts>,
    foreground: Counts,
    background: Counts,
    episodes: u64,
}

impl IoUAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    /// Adds one episode's prediction against its ground truth.
    pub fn accumulate(&mut self, predicted: &BitMask, truth: &BitMask, class: u8) -> Result<()> {
        ensure!(
            predicted.width == truth.width && predicted.height == truth.height,
            "mask shape mismatch: {}x{} vs {}x{}",
            predicted.width,
            predicted.height,
            truth.width,
            truth.height
        );
        let mut fg = Counts::default();
        let mut bg = Counts::default();
        for (&p, &t) in predicted.data.iter().zip(&truth.data) {
            let (p, t) = (p != 0, t != 0);
            fg.intersection += u64::from(p && t);
            fg.union += u64::from(p || t);
            bg.intersection += u64::from(!p && !t);
            bg.union += u64::from(!p || !t);
        }
        let entry = self.classes.entry(class).or_default();
        entry.intersection += fg.intersection;
        entry.union += fg.union;
        self.foreground.intersection += fg.intersection;
        self.foreground.union += fg.union;
        self.background.intersection += bg.intersection;
        self.background.union += bg.union;
        self.episodes += 1;
        Ok(())
    }

    pub fn class_iou(&self, class: u8) -> Option<f64> {
        self.classes.get(&class).map(Counts::iou)
    }

    /// Unweighted mean IoU over the given class set. Every class must have
    /// been observed with a non-empty union.
    pub fn miou(&self, classes: &[u8]) -> Result<f64> {
        ensure!(!classes.is_empty(), "mIoU over an empty class set");
        let mut total = 0.0;
        for &c in classes {
            let counts = self
                .classes
                .get(&c)
                .ok_or_else(|| crate::Error::contract(alloc::format!("class {c} never observed")))?;
            ensure!(counts.union > 0, "class {c} has empty union");
            total += counts.iou();
        }
        Ok(total / classes.len() as f64)
    }

    /// Mean of pooled foreground IoU and background IoU (C = 2), over all
    /// episodes regardless of class.
    pub fn fb_iou(&self) -> f64 {
        (self.foreground.iou() + self.background.iou()) / 2.0
    }

    /// Exact shard merge: counts add.
    pub fn merge(&mut self, other: &IoUAccumulator) {
        for (&c, counts) in &other.classes {
            let entry = self.classes.entry(c).or_default();
            entry.intersection += counts.intersection;
            entry.union += counts.union;
        }
        self.foreground.intersection += other.foreground.intersection;
        self.foreground.union += other.foreground.union;
        self.background.intersection += other.background.intersection;
        self.background.union += other.background.union;
        self.episodes += other.episodes;
    }
}

/// Mean and sample standard deviation of a metric over repeated runs.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub runs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub episodes_per_run: usize,
}

/// Runs `eval` once per seed and summarizes the resulting metric values.
pub fn stability(
    mut eval: impl FnMut(u64, usize) -> Result<f64>,
    episodes_per_run: usize,
    seeds: &[u64],
) -> Result<StabilityReport> {
    ensure!(seeds.len() >= 2, "stability needs at least two runs");
    let runs: Vec<f64> = seeds
        .iter()
        .map(|&s| eval(s, episodes_per_run))
        .collect::<Result<_>>()?;
    let mean = runs.iter().sum::<f64>() / runs.len() as f64;
    let var = runs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (runs.len() - 1) as f64;
    Ok(StabilityReport {
        mean,
        std: math::sqrt(var),
        episodes_per_run,
        runs,
    })
}
