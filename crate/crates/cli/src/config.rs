//! Run configuration: JSON file, flag overrides, defaults.
//!
//! Precedence is flags > file > defaults. Unknown keys are rejected and
//! `parse(serialize(config)) == config` holds exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use pfenet_core::backbone::{BackboneConfig, PretrainConfig};
use pfenet_core::episodes::{DatasetConfig, FoldScheme, FoldSplit};
use pfenet_core::fem::PathKind;
use pfenet_core::model::ModelConfig;
use pfenet_core::prior::{FeatureSource, PriorConfig, Reduction, SupportRep};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub fold: FoldSection,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub pretrain: PretrainSection,
    pub eval: EvalSection,
    pub output: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub path: String,
    pub classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldSection {
    pub index: usize,
    pub scheme: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub channels: usize,
    pub scales: Vec<usize>,
    pub path: String,
    pub prior: bool,
    pub prior_source: String,
    pub prior_reduction: String,
    pub prior_support: String,
    pub freeze_backbone: bool,
    pub sigma: f64,
    pub backbone_widths: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub shot: usize,
    pub episodes: usize,
    pub repeat: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: "data".into(),
            classes: 12,
            images_per_class: 40,
            image_size: 32,
            seed: 7,
        }
    }
}

impl Default for FoldSection {
    fn default() -> Self {
        FoldSection {
            index: 0,
            scheme: "contiguous".into(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            channels: 64,
            scales: vec![8, 4, 2],
            path: "TD".into(),
            prior: true,
            prior_source: "fixed-high".into(),
            prior_reduction: "max".into(),
            prior_support: "per-pixel".into(),
            freeze_backbone: true,
            sigma: 1.0,
            backbone_widths: [32, 48, 64, 64],
        }
    }
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            base_lr: 0.0025,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            max_iter: 600,
        }
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            epochs: 4,
            lr: 0.01,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            shot: 1,
            episodes: 1000,
            repeat: 1,
        }
    }
}

/// The Table-4-style ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Prior,
    Fem,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Prior, Variant::Fem, Variant::Full];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Prior => "prior",
            Variant::Fem => "fem",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "prior" => Ok(Variant::Prior),
            "fem" => Ok(Variant::Fem),
            "full" => Ok(Variant::Full),
            other => Err(CliError::config(format!(
                "variant must be baseline|prior|fem|full, got {other}"
            ))),
        }
    }

    fn uses_prior(&self) -> bool {
        matches!(self, Variant::Prior | Variant::Full)
    }

    fn uses_fem(&self) -> bool {
        matches!(self, Variant::Fem | Variant::Full)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| CliError::config(format!("bad config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        if self.dataset.image_size % 4 != 0 {
            return Err(CliError::config(format!(
                "dataset.image_size {} must be divisible by 4",
                self.dataset.image_size
            )));
        }
        Ok(DatasetConfig {
            classes: self.dataset.classes,
            images_per_class: self.dataset.images_per_class,
            image_size: self.dataset.image_size,
            seed: self.dataset.seed,
        })
    }

    pub fn fold_scheme(&self) -> Result<FoldScheme> {
        match self.fold.scheme.as_str() {
            "contiguous" => Ok(FoldScheme::Contiguous),
            "strided" => Ok(FoldScheme::Strided),
            other => Err(CliError::config(format!(
                "fold.scheme must be contiguous|strided, got {other}"
            ))),
        }
    }

    pub fn fold_split(&self) -> Result<FoldSplit> {
        let scheme = self.fold_scheme()?;
        pfenet_core::episodes::split(self.dataset.classes, self.fold.index, scheme)
            .map_err(|e| CliError::config(format!("fold.index: {e}")))
    }

    pub fn path_kind(&self) -> Result<PathKind> {
        parse_path(&self.model.path)
    }

    pub fn prior_config(&self) -> Result<PriorConfig> {
        let feature_source = match self.model.prior_source.as_str() {
            "fixed-high" => FeatureSource::FixedHigh,
            "fixed-mid" => FeatureSource::FixedMid,
            "learnable-high" => FeatureSource::LearnableHigh,
            "learnable-mid" => FeatureSource::LearnableMid,
            other => {
                return Err(CliError::config(format!(
                    "model.prior_source must be fixed-high|fixed-mid|learnable-high|learnable-mid, got {other}"
                )))
            }
        };
        let reduction = match self.model.prior_reduction.as_str() {
            "max" => Reduction::Max,
            "mean" => Reduction::Mean,
            other => {
                return Err(CliError::config(format!(
                    "model.prior_reduction must be max|mean, got {other}"
                )))
            }
        };
        let support_rep = match self.model.prior_support.as_str() {
            "per-pixel" => SupportRep::PerPixel,
            "mask-pooled" => SupportRep::MaskPooled,
            other => {
                return Err(CliError::config(format!(
                    "model.prior_support must be per-pixel|mask-pooled, got {other}"
                )))
            }
        };
        Ok(PriorConfig {
            feature_source,
            reduction,
            support_rep,
            epsilon: 1e-7,
        })
    }

    /// Model configuration for one ablation arm. Single-scale arms use the
    /// full feature resolution; FEM arms use the configured scale set.
    pub fn model_config(&self, variant: Variant) -> Result<ModelConfig> {
        let feature_size = self.dataset.image_size / 4;
        let (scales, path) = if variant.uses_fem() {
            for &s in &self.model.scales {
                if s > feature_size {
                    return Err(CliError::config(format!(
                        "model.scales entry {s} exceeds feature size {feature_size}"
                    )));
                }
            }
            (self.model.scales.clone(), self.path_kind()?)
        } else {
            (vec![feature_size], PathKind::None)
        };
        Ok(ModelConfig {
            channels: self.model.channels,
            scales,
            path,
            prior_enabled: variant.uses_prior(),
            prior: self.prior_config()?,
            sigma: self.model.sigma,
            freeze_backbone: self.model.freeze_backbone,
            backbone: BackboneConfig {
                widths: self.model.backbone_widths,
            },
        })
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            lr: self.pretrain.lr,
            momentum: self.optim.momentum,
            weight_decay: self.optim.weight_decay,
            power: self.optim.power,
            seed: pfenet_core::rng::mix_seed(self.seed, &[0x10e7, self.fold.index as u64]),
            freeze_after: true,
        }
    }
}

pub fn parse_path(s: &str) -> Result<PathKind> {
    match s {
        "TD" => Ok(PathKind::TopDown),
        "BU" => Ok(PathKind::BottomUp),
        "TD_BU" => Ok(PathKind::TopDownBottomUp),
        "BU_TD" => Ok(PathKind::BottomUpTopDown),
        "NONE" => Ok(PathKind::None),
        other => Err(CliError::config(format!(
            "model.path must be TD|BU|TD_BU|BU_TD|NONE, got {other}"
        ))),
    }
}

/// Command-line overrides, applied over the file values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub fold: Option<usize>,
    pub scheme: Option<String>,
    pub output: Option<String>,
    pub shot: Option<usize>,
    pub episodes: Option<usize>,
    pub repeat: Option<usize>,
    pub max_iter: Option<usize>,
    pub path: Option<String>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.fold {
            config.fold.index = v;
        }
        if let Some(v) = &self.scheme {
            config.fold.scheme = v.clone();
        }
        if let Some(v) = &self.output {
            config.output = v.clone();
        }
        if let Some(v) = self.shot {
            config.eval.shot = v;
        }
        if let Some(v) = self.episodes {
            config.eval.episodes = v;
        }
        if let Some(v) = self.repeat {
            config.eval.repeat = v;
        }
        if let Some(v) = self.max_iter {
            config.optim.max_iter = v;
        }
        if let Some(v) = &self.path {
            config.model.path = v.clone();
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSection::default(),
            fold: FoldSection::default(),
            model: ModelSection::default(),
            optim: OptimSection::default(),
            pretrain: PretrainSection::default(),
            eval: EvalSection::default(),
            output: "runs".into(),
            seed: 42,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_through_json() {
        let mut config = RunConfig::default();
        config.fold.index = 2;
        config.model.scales = vec![6, 3, 1];
        config.eval.repeat = 5;
        let parsed = RunConfig::parse(&config.to_json()).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse(r#"{"datset": {}}"#).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        let err = RunConfig::parse(r#"{"model": {"chanels": 3}}"#).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn every_field_has_a_default() {
        let config = RunConfig::parse("{}").unwrap();
        assert_eq!(config, RunConfig::default());
    }

    #[test]
    fn invalid_fold_index_names_the_field() {
        let mut config = RunConfig::default();
        config.fold.index = 4;
        let err = config.fold_split().unwrap_err();
        assert!(err.to_string().contains("fold.index"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn variant_shapes_the_model_config() {
        let config = RunConfig::default();
        let baseline = config.model_config(Variant::Baseline).unwrap();
        assert_eq!(baseline.scales, vec![8]);
        assert!(!baseline.prior_enabled);
        assert_eq!(baseline.path, PathKind::None);

        let full = config.model_config(Variant::Full).unwrap();
        assert_eq!(full.scales, vec![8, 4, 2]);
        assert!(full.prior_enabled);
        assert_eq!(full.path, PathKind::TopDown);

        let prior_only = config.model_config(Variant::Prior).unwrap();
        assert!(prior_only.prior_enabled);
        assert_eq!(prior_only.scales, vec![8]);
    }
}
