//! Feature enrichment module: inter-source enrichment at multiple scales,
//! conditioned inter-scale merging along an information path, and final
//! information concentration.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::layers::{ClassifierHead, ConvLayer};
use crate::prior::PriorMask;
use crate::tensor::{concat_channels, Parameter, Tensor};

/// Direction of auxiliary information flow across scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    TopDown,
    BottomUp,
    TopDownBottomUp,
    BottomUpTopDown,
    None,
}

impl PathKind {
    pub const ALL: [PathKind; 5] = [
        PathKind::TopDown,
        PathKind::BottomUp,
        PathKind::TopDownBottomUp,
        PathKind::BottomUpTopDown,
        PathKind::None,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PathKind::TopDown => "TD",
            PathKind::BottomUp => "BU",
            PathKind::TopDownBottomUp => "TD_BU",
            PathKind::BottomUpTopDown => "BU_TD",
            PathKind::None => "NONE",
        }
    }
}

/// Pooling sizes in strictly descending order plus the interaction path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSet {
    sizes: Vec<usize>,
    path: PathKind,
}

impl ScaleSet {
    pub fn new(sizes: Vec<usize>, path: PathKind) -> Result<Self> {
        ensure!(!sizes.is_empty(), "scale set must not be empty");
        ensure!(
            sizes.windows(2).all(|p| p[0] > p[1]),
            "scale sizes {sizes:?} must be strictly descending"
        );
        ensure!(*sizes.last().expect("non-empty") >= 1, "scales must be >= 1");
        Ok(ScaleSet { sizes, path })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn path(&self) -> PathKind {
        self.path
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }
}

/// One inter-scale merge: refine `main` using `aux` (if any).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeStep {
    pub main: usize,
    pub aux: Option<usize>,
}

/// Expands the interaction path into passes of merge steps over 0-based
/// scale indices (index 0 is the largest size B¹). Bi-directional paths
/// produce two passes; the second pass reads the first pass's refined
/// features.
pub fn schedule_path(scales: &ScaleSet) -> Vec<Vec<MergeStep>> {
    let n = scales.len();
    let td: Vec<MergeStep> = (0..n)
        .map(|i| MergeStep {
            main: i,
            aux: if i == 0 { None } else { Some(i - 1) },
        })
        .collect();
    let bu: Vec<MergeStep> = (0..n)
        .rev()
        .map(|i| MergeStep {
            main: i,
            aux: if i == n - 1 { None } else { Some(i + 1) },
        })
        .collect();
    let none: Vec<MergeStep> = (0..n).map(|i| MergeStep { main: i, aux: None }).collect();
    match scales.path() {
        PathKind::TopDown => vec![td],
        PathKind::BottomUp => vec![bu],
        PathKind::TopDownBottomUp => vec![td, bu],
        PathKind::BottomUpTopDown => vec![bu, td],
        PathKind::None => vec![none],
    }
}

/// Inter-scale merging module: a 1×1 conv `α` extracts information from the
/// concatenated (main, aux) pair, two 3×3 convs `β` finish the interaction,
/// and a residual link keeps the main feature intact. Units without an
/// auxiliary input run `β(α(main)) + main`.
#[derive(Debug, Clone)]
pub struct MergeUnit {
    alpha: ConvLayer,
    beta1: ConvLayer,
    beta2: ConvLayer,
    expects_aux: bool,
}

impl MergeUnit {
    pub fn init(
        name: &str,
        channels: usize,
        expects_aux: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let alpha_in = if expects_aux { 2 * channels } else { channels };
        MergeUnit {
            alpha: ConvLayer::init(&format!("{name}.alpha"), alpha_in, channels, 1, rng),
            beta1: ConvLayer::init(&format!("{name}.beta1"), channels, channels, 3, rng),
            beta2: ConvLayer::init(&format!("{name}.beta2"), channels, channels, 3, rng),
            expects_aux,
        }
    }

    pub fn zero(&mut self) {
        self.alpha.zero();
        self.beta1.zero();
        self.beta2.zero();
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        out.extend(self.alpha.params());
        out.extend(self.beta1.params());
        out.extend(self.beta2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        out.extend(self.alpha.params_mut());
        out.extend(self.beta1.params_mut());
        out.extend(self.beta2.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.alpha.param_count() + self.beta1.param_count() + self.beta2.param_count()
    }

    pub fn alpha(&self) -> &ConvLayer {
        &self.alpha
    }
}

/// Refines the main feature with the (resized) auxiliary one.
pub fn merge(main: &Tensor, aux: Option<&Tensor>, unit: &MergeUnit, track: bool) -> Result<Tensor> {
    ensure!(
        aux.is_some() == unit.expects_aux,
        "merge unit wired for aux={} got aux={}",
        unit.expects_aux,
        aux.is_some()
    );
    let (_, _, h, w) = main.shape().dims4()?;
    let x = match aux {
        Some(a) => {
            let resized = a.bilinear_resize(h, w)?;
            concat_channels(&[main, &resized])?
        }
        None => main.clone(),
    };
    let x = unit.alpha.apply(&x, track)?.relu();
    let x = unit.beta1.apply(&x, track)?.relu();
    let x = unit.beta2.apply(&x, track)?.relu();
    x.add(main)
}

/// Per-scale projections of the three sources: the query feature is
/// adaptively pooled, the pooled support vector is broadcast and the prior
/// is resized.
pub fn project_sources(
    query: &Tensor,
    support_vec: &Tensor,
    prior: Option<&PriorMask>,
    scales: &ScaleSet,
) -> Result<Vec<(Tensor, Tensor, Option<Tensor>)>> {
    let (_, _, h, w) = query.shape().dims4()?;
    ensure!(
        scales.sizes()[0] <= h.min(w),
        "largest scale {} exceeds feature size {h}x{w}",
        scales.sizes()[0]
    );
    ensure!(
        support_vec.shape().dims()[2] == 1 && support_vec.shape().dims()[3] == 1,
        "support vector must be 1x1 spatially, got {}",
        support_vec.shape()
    );
    scales
        .sizes()
        .iter()
        .map(|&b| {
            let q = query.adaptive_avg_pool(b)?;
            let s = support_vec.bilinear_resize(b, b)?;
            let y = prior
                .map(|p| p.values.bilinear_resize(b, b))
                .transpose()?;
            Ok((q, s, y))
        })
        .collect()
}

/// Inter-source enrichment at one scale: concat the projected query,
/// support and prior maps, then a 1×1 conv + ReLU back to `c` channels.
pub fn enrich_scale(
    query: &Tensor,
    support: &Tensor,
    prior: Option<&Tensor>,
    conv: &ConvLayer,
    track: bool,
) -> Result<Tensor> {
    ensure!(
        query.shape().dims()[2..] == support.shape().dims()[2..],
        "enrich spatial mismatch: {} vs {}",
        query.shape(),
        support.shape()
    );
    let merged = match prior {
        Some(p) => {
            ensure!(
                p.shape().dims()[2..] == query.shape().dims()[2..],
                "prior spatial mismatch: {} vs {}",
                p.shape(),
                query.shape()
            );
            concat_channels(&[query, support, p])?
        }
        None => concat_channels(&[query, support])?,
    };
    Ok(conv.apply(&merged, track)?.relu())
}

/// Resizes every refined map back to `(h, w)`, concatenates and reduces to
/// `c` channels with a 1×1 conv + ReLU.
pub fn concentrate(
    refined: &[Tensor],
    out_h: usize,
    out_w: usize,
    conv: &ConvLayer,
    track: bool,
) -> Result<Tensor> {
    ensure!(!refined.is_empty(), "concentrate over zero scales");
    let resized: Vec<Tensor> = refined
        .iter()
        .map(|t| t.bilinear_resize(out_h, out_w))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = resized.iter().collect();
    Ok(conv.apply(&concat_channels(&refs)?, track)?.relu())
}

/// Per-scale intermediate supervision logits, upsampled to label
/// resolution.
pub fn intermediate_logits(
    refined: &[Tensor],
    heads: &[ClassifierHead],
    label_h: usize,
    label_w: usize,
    track: bool,
) -> Result<Vec<Tensor>> {
    ensure!(
        refined.len() == heads.len(),
        "{} refined maps but {} heads",
        refined.len(),
        heads.len()
    );
    refined
        .iter()
        .zip(heads)
        .map(|(x, head)| head.apply(x, track)?.bilinear_resize(label_h, label_w))
        .collect()
}

/// The whole enrichment module: per-scale merge convs, merge units for each
/// pass of the interaction path, the concentration conv and the per-scale
/// supervision heads.
#[derive(Debug, Clone)]
pub struct FemState {
    scales: ScaleSet,
    channels: usize,
    with_prior: bool,
    enrich: Vec<ConvLayer>,
    concentrate: ConvLayer,
    heads: Vec<ClassifierHead>,
    passes: Vec<Vec<MergeUnit>>,
}

impl FemState {
    pub fn new(
        channels: usize,
        scales: ScaleSet,
        with_prior: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = scales.len();
        let enrich_in = 2 * channels + usize::from(with_prior);
        let enrich = (0..n)
            .map(|i| ConvLayer::init(&format!("fem.enrich{i}"), enrich_in, channels, 1, rng))
            .collect();
        let concentrate =
            ConvLayer::init("fem.concentrate", n * channels, channels, 1, rng);
        let heads = (0..n)
            .map(|i| ClassifierHead::init(&format!("fem.head{i}"), channels, rng))
            .collect();
        // merge units last, so identical seeds give identical enrich /
        // concentrate / head weights across path variants
        let passes = schedule_path(&scales)
            .iter()
            .enumerate()
            .map(|(p, pass)| {
                let mut units: Vec<(usize, MergeUnit)> = pass
                    .iter()
                    .map(|step| {
                        (
                            step.main,
                            MergeUnit::init(
                                &format!("fem.pass{p}.merge{}", step.main),
                                channels,
                                step.aux.is_some(),
                                rng,
                            ),
                        )
                    })
                    .collect();
                units.sort_by_key(|(main, _)| *main);
                units.into_iter().map(|(_, u)| u).collect()
            })
            .collect();
        FemState {
            scales,
            channels,
            with_prior,
            enrich,
            concentrate,
            heads,
            passes,
        }
    }

    pub fn scales(&self) -> &ScaleSet {
        &self.scales
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn with_prior(&self) -> bool {
        self.with_prior
    }

    pub fn merge_units(&self) -> impl Iterator<Item = &MergeUnit> {
        self.passes.iter().flatten()
    }

    /// Zeroes every merge unit; with zero units each merge collapses to the
    /// residual identity and the path kind becomes irrelevant.
    pub fn zero_merge_units(&mut self) {
        for pass in self.passes.iter_mut() {
            for unit in pass.iter_mut() {
                unit.zero();
            }
        }
    }

    /// Runs enrichment: `(refined query feature, intermediate logits)`.
    pub fn forward(
        &self,
        query: &Tensor,
        support_vec: &Tensor,
        prior: Option<&PriorMask>,
        label_hw: (usize, usize),
        track: bool,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        ensure!(
            prior.is_some() == self.with_prior,
            "module built with prior={} but called with prior={}",
            self.with_prior,
            prior.is_some()
        );
        let (_, _, h, w) = query.shape().dims4()?;
        let projected = project_sources(query, support_vec, prior, &self.scales)?;
        let mut feats: Vec<Tensor> = projected
            .iter()
            .zip(&self.enrich)
            .map(|((q, s, y), conv)| enrich_scale(q, s, y.as_ref(), conv, track))
            .collect::<Result<_>>()?;

        for (pass, units) in schedule_path(&self.scales).iter().zip(&self.passes) {
            let snapshot = feats.clone();
            for step in pass {
                feats[step.main] = merge(
                    &snapshot[step.main],
                    step.aux.map(|a| &snapshot[a]),
                    &units[step.main],
                    track,
                )?;
            }
        }

        let out = concentrate(&feats, h, w, &self.concentrate, track)?;
        let inters = intermediate_logits(&feats, &self.heads, label_hw.0, label_hw.1, track)?;
        Ok((out, inters))
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for c in &self.enrich {
            out.extend(c.params());
        }
        out.extend(self.concentrate.params());
        for h in &self.heads {
            out.extend(h.params());
        }
        for pass in &self.passes {
            for u in pass {
                out.extend(u.params());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for c in self.enrich.iter_mut() {
            out.extend(c.params_mut());
        }
        out.extend(self.concentrate.params_mut());
        for h in self.heads.iter_mut() {
            out.extend(h.params_mut());
        }
        for pass in self.passes.iter_mut() {
            for u in pass.iter_mut() {
                out.extend(u.params_mut());
            }
        }
        out
    }

    /// Closed-form parameter count, cross-checked in tests against the
    /// actual parameter set.
    pub fn expected_param_count(&self) -> usize {
        let c = self.channels;
        let n = self.scales.len();
        let enrich_in = 2 * c + usize::from(self.with_prior);
        let enrich = n * (enrich_in * c + c);
        let conc = n * c * c + c;
        let heads = n * ((c * c * 9 + c) + (c * 2 + 2));
        let units: usize = schedule_path(&self.scales)
            .iter()
            .flatten()
            .map(|step| {
                let alpha_in = if step.aux.is_some() { 2 * c } else { c };
                (alpha_in * c + c) + 2 * (c * c * 9 + c)
            })
            .sum();
        enrich + conc + heads + units
    }
}
