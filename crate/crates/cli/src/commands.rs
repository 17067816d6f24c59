//! Implementations of the CLI subcommands. Each returns its artifacts so
//! integration tests can drive them directly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use pfenet_core::backbone::{Backbone, BackboneConfig, PretrainReport};
use pfenet_core::episodes::{sample_episode, FoldScheme, Phase, SynthDataset};
use pfenet_core::model::PFENet;
use pfenet_core::prior;
use pfenet_core::rng::{mix_seed, stream_rng};

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{parse_path, RunConfig, Variant};
use crate::dataset_io;
use crate::engine::{self, FeatureStore, TrainReport};
use crate::error::{CliError, Result};

const TAG_BACKBONE_INIT: u64 = 0x7e10;

fn scheme_tag(scheme: FoldScheme) -> &'static str {
    match scheme {
        FoldScheme::Contiguous => "c",
        FoldScheme::Strided => "s",
    }
}

fn ensure_output_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&config.output);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

pub fn backbone_path(config: &RunConfig) -> Result<PathBuf> {
    let scheme = config.fold_scheme()?;
    Ok(PathBuf::from(&config.output).join(format!(
        "backbone-{}{}-s{}.bin",
        scheme_tag(scheme),
        config.fold.index,
        config.seed
    )))
}

pub fn checkpoint_path(config: &RunConfig, variant: Variant) -> Result<PathBuf> {
    let scheme = config.fold_scheme()?;
    Ok(PathBuf::from(&config.output).join(format!(
        "model-{}-{}{}-s{}.ckpt",
        variant.name(),
        scheme_tag(scheme),
        config.fold.index,
        config.seed
    )))
}

/// Generates the synthetic dataset and writes the PPM/PGM tree.
pub fn cmd_generate(config: &RunConfig) -> Result<PathBuf> {
    let dataset = pfenet_core::episodes::generate(&config.dataset_config()?)?;
    let dir = PathBuf::from(&config.dataset.path);
    dataset_io::save_dataset(&dataset, &dir)?;
    Ok(dir)
}

/// Pretrains the backbone for the configured fold (or loads the cached
/// weights) and returns it frozen.
pub fn ensure_backbone(
    config: &RunConfig,
    dataset: &SynthDataset,
) -> Result<(Backbone, Option<PretrainReport>)> {
    let split = config.fold_split()?;
    let init_seed = mix_seed(config.seed, &[TAG_BACKBONE_INIT, config.fold.index as u64]);
    let mut backbone = Backbone::new(
        &BackboneConfig {
            widths: config.model.backbone_widths,
        },
        init_seed,
    );
    let path = backbone_path(config)?;
    if path.exists() {
        checkpoint::load_backbone_into(&path, &mut backbone)?;
        backbone.set_frozen(true);
        return Ok((backbone, None));
    }
    let report = backbone.pretrain(dataset, &split, &config.pretrain_config())?;
    ensure_output_dir(config)?;
    checkpoint::write_backbone(&path, &backbone)?;
    Ok((backbone, Some(report)))
}

/// Explicit pretraining entry point: writes the backbone weight file.
pub fn cmd_pretrain(config: &RunConfig) -> Result<(PathBuf, Option<PretrainReport>)> {
    let dataset = dataset_io::load_matching(&config.dataset)?;
    ensure_output_dir(config)?;
    let (_, report) = ensure_backbone(config, &dataset)?;
    Ok((backbone_path(config)?, report))
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub report: TrainReport,
}

/// Pretrains (or loads) the backbone, trains the selected ablation arm
/// episodically, writes the per-step loss CSV and the checkpoint.
pub fn cmd_train(config: &RunConfig, variant: Variant) -> Result<TrainOutput> {
    let dataset = dataset_io::load_matching(&config.dataset)?;
    let split = config.fold_split()?;
    let out_dir = ensure_output_dir(config)?;
    let (backbone, _) = ensure_backbone(config, &dataset)?;

    let model_config = config.model_config(variant)?;
    let mut model = engine::build_model(
        &model_config,
        &backbone,
        config.seed,
        config.fold.index,
        variant as u64,
    )?;
    let store = if model_config.freeze_backbone {
        Some(FeatureStore::build(&model.backbone, &dataset)?)
    } else {
        None
    };
    let report = engine::train_model(
        &mut model,
        &dataset,
        store.as_ref(),
        &split,
        config,
        config.eval.shot,
    )?;

    let scheme = config.fold_scheme()?;
    let loss_csv = out_dir.join(format!(
        "train-{}-{}{}-s{}.csv",
        variant.name(),
        scheme_tag(scheme),
        config.fold.index,
        config.seed
    ));
    let mut csv = String::from("iter,lr,loss\n");
    for row in &report.rows {
        csv.push_str(&format!("{},{:.8},{:.8}\n", row.iter, row.lr, row.loss));
    }
    fs::write(&loss_csv, csv).map_err(|e| CliError::io(&loss_csv, e))?;

    let ckpt = checkpoint_path(config, variant)?;
    let meta = CheckpointMeta {
        run: config.clone(),
        variant,
        trained_iters: config.optim.max_iter,
    };
    checkpoint::write_checkpoint(&ckpt, &model, &meta)?;
    Ok(TrainOutput {
        checkpoint: ckpt,
        loss_csv,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub run: usize,
    pub seed: u64,
    pub miou: f64,
    pub fb_iou: f64,
}

#[derive(Debug)]
pub struct EvalOutput {
    pub csv: PathBuf,
    pub rows: Vec<EvalRow>,
    pub miou_mean: f64,
    pub miou_std: f64,
}

/// K-shot episodic evaluation of a checkpoint on the configured test fold.
pub fn cmd_eval(config: &RunConfig, checkpoint_file: &Path) -> Result<EvalOutput> {
    let (model, meta) = checkpoint::load_model(checkpoint_file)?;
    if meta.run.fold.index != config.fold.index || meta.run.fold.scheme != config.fold.scheme {
        return Err(CliError::config(format!(
            "fold/scheme mismatch: checkpoint was trained on fold {} ({}), config asks for fold {} ({})",
            meta.run.fold.index, meta.run.fold.scheme, config.fold.index, config.fold.scheme
        )));
    }
    if meta.run.dataset.seed != config.dataset.seed
        || meta.run.dataset.classes != config.dataset.classes
        || meta.run.dataset.images_per_class != config.dataset.images_per_class
        || meta.run.dataset.image_size != config.dataset.image_size
    {
        return Err(CliError::config(
            "dataset mismatch between checkpoint metadata and config".to_string(),
        ));
    }
    let dataset = dataset_io::load_matching(&config.dataset)?;
    let split = config.fold_split()?;
    let out_dir = ensure_output_dir(config)?;
    let store = FeatureStore::build(&model.backbone, &dataset)?;

    let mut rows = Vec::with_capacity(config.eval.repeat.max(1));
    for run in 0..config.eval.repeat.max(1) {
        let seed = mix_seed(config.seed, &[engine::TAG_EVAL_RUN, run as u64]);
        let (miou, fb_iou) = engine::evaluate_miou(
            &model,
            &dataset,
            &store,
            &split,
            config.eval.shot,
            config.eval.episodes,
            seed,
        )?;
        rows.push(EvalRow {
            run,
            seed,
            miou,
            fb_iou,
        });
    }
    let mean = rows.iter().map(|r| r.miou).sum::<f64>() / rows.len() as f64;
    let std = if rows.len() > 1 {
        (rows
            .iter()
            .map(|r| (r.miou - mean) * (r.miou - mean))
            .sum::<f64>()
            / (rows.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };

    let scheme = config.fold_scheme()?;
    let csv_path = out_dir.join(format!(
        "eval-{}-{}{}-s{}-k{}.csv",
        meta.variant.name(),
        scheme_tag(scheme),
        config.fold.index,
        config.seed,
        config.eval.shot
    ));
    let with_summary = config.eval.repeat > 1;
    let mut csv = String::new();
    csv.push_str("fold,scheme,shot,run,seed,episodes,miou,fb_iou");
    if with_summary {
        csv.push_str(",miou_mean,miou_std");
    }
    csv.push('\n');
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6}",
            config.fold.index,
            config.fold.scheme,
            config.eval.shot,
            row.run,
            row.seed,
            config.eval.episodes,
            row.miou,
            row.fb_iou
        ));
        if with_summary {
            csv.push_str(&format!(",{mean:.6},{std:.6}"));
        }
        csv.push('\n');
    }
    fs::write(&csv_path, csv).map_err(|e| CliError::io(&csv_path, e))?;
    Ok(EvalOutput {
        csv: csv_path,
        rows,
        miou_mean: mean,
        miou_std: std,
    })
}

#[derive(Debug)]
pub struct PriorOutput {
    pub query_ppm: PathBuf,
    pub support_ppm: PathBuf,
    pub prior_pgm: PathBuf,
}

/// Writes one episode's query image, first support image and the averaged
/// prior mask (8-bit PGM) for inspection.
pub fn cmd_prior(
    config: &RunConfig,
    checkpoint_file: Option<&Path>,
    episode_id: usize,
) -> Result<PriorOutput> {
    let dataset = dataset_io::load_matching(&config.dataset)?;
    let split = config.fold_split()?;
    let out_dir = ensure_output_dir(config)?;

    let (backbone, prior_config) = match checkpoint_file {
        Some(path) => {
            let (model, meta) = checkpoint::load_model(path)?;
            (model.backbone.clone(), meta.run.prior_config()?)
        }
        None => {
            let (backbone, _) = ensure_backbone(config, &dataset)?;
            (backbone, config.prior_config()?)
        }
    };

    let mut rng = stream_rng(config.seed, &[engine::TAG_EVAL_EPISODE, episode_id as u64]);
    let episode = sample_episode(&dataset, &split, Phase::Test, config.eval.shot, &mut rng)?;

    let masks: Vec<prior::PriorMask> = episode
        .supports
        .iter()
        .map(|s| {
            prior::generate_prior(&backbone, &episode.query_image, &s.image, &s.mask, &prior_config)
        })
        .collect::<pfenet_core::Result<_>>()?;
    let averaged = prior::average_priors(&masks)?;

    let query_ppm = out_dir.join(format!("prior-ep{episode_id}-query.ppm"));
    let support_ppm = out_dir.join(format!("prior-ep{episode_id}-support0.ppm"));
    let prior_pgm = out_dir.join(format!("prior-ep{episode_id}-mask.pgm"));
    crate::pnm::write_ppm(&query_ppm, &episode.query_image)?;
    crate::pnm::write_ppm(&support_ppm, &episode.supports[0].image)?;
    let (_, _, h, w) = averaged.values.shape().dims4()?;
    crate::pnm::write_gray_pgm(&prior_pgm, averaged.values.data(), w, h)?;
    Ok(PriorOutput {
        query_ppm,
        support_ppm,
        prior_pgm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Variants,
    Paths,
    Scales,
    All,
}

impl GridKind {
    pub fn parse(s: &str) -> Result<GridKind> {
        match s {
            "variants" => Ok(GridKind::Variants),
            "paths" => Ok(GridKind::Paths),
            "scales" => Ok(GridKind::Scales),
            "all" => Ok(GridKind::All),
            other => Err(CliError::config(format!(
                "grid must be variants|paths|scales|all, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblateOpts {
    pub grid: GridKind,
    pub folds: Vec<usize>,
    pub seeds: usize,
}

impl Default for AblateOpts {
    fn default() -> Self {
        AblateOpts {
            grid: GridKind::Variants,
            folds: vec![0, 1, 2, 3],
            seeds: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblateRow {
    pub table: &'static str,
    pub variant: Variant,
    pub path: String,
    pub scales: Vec<usize>,
    pub fold: usize,
    pub shot: usize,
    pub seed_index: usize,
    pub miou: f64,
    pub fb_iou: f64,
}

#[derive(Debug)]
pub struct AblateOutput {
    pub csv: PathBuf,
    pub rows: Vec<AblateRow>,
}

/// One ablation arm: a model configuration plus its labelling in the
/// combined CSV.
#[derive(Debug, Clone)]
struct Arm {
    table: &'static str,
    variant: Variant,
    path: String,
    scales: Vec<usize>,
    eval_shots: Vec<usize>,
}

fn grid_arms(config: &RunConfig, grid: GridKind) -> Result<Vec<Arm>> {
    let feature = config.dataset.image_size / 4;
    let mut arms = Vec::new();
    if matches!(grid, GridKind::Variants | GridKind::All) {
        for variant in Variant::ALL {
            // the full model also runs the 5-shot protocol
            let eval_shots = if variant == Variant::Full {
                vec![1, 5]
            } else {
                vec![1]
            };
            arms.push(Arm {
                table: "variants",
                variant,
                path: config.model.path.clone(),
                scales: config.model.scales.clone(),
                eval_shots,
            });
        }
    }
    if matches!(grid, GridKind::Paths | GridKind::All) {
        for path in ["TD", "BU", "TD_BU", "BU_TD", "NONE"] {
            arms.push(Arm {
                table: "paths",
                variant: Variant::Full,
                path: path.to_string(),
                scales: config.model.scales.clone(),
                eval_shots: vec![1],
            });
        }
    }
    if matches!(grid, GridKind::Scales | GridKind::All) {
        let mut sets = vec![vec![feature]];
        let mut current = vec![feature];
        let mut next = feature / 2;
        while next >= 1 && sets.len() < 4 {
            current.push(next);
            sets.push(current.clone());
            next /= 2;
        }
        for scales in sets {
            arms.push(Arm {
                table: "scales",
                variant: Variant::Fem,
                path: if scales.len() > 1 {
                    config.model.path.clone()
                } else {
                    "NONE".to_string()
                },
                scales,
                eval_shots: vec![1],
            });
        }
    }
    Ok(arms)
}

/// Runs the requested ablation grid: for every (fold, seed) cell the
/// backbone is pretrained once and its feature cache shared across arms.
/// Cells run in parallel; the combined CSV row order is fixed.
pub fn cmd_ablate(config: &RunConfig, opts: &AblateOpts) -> Result<AblateOutput> {
    let dataset = dataset_io::load_matching(&config.dataset)?;
    let out_dir = ensure_output_dir(config)?;
    let arms = grid_arms(config, opts.grid)?;

    let cells: Vec<(usize, usize)> = opts
        .folds
        .iter()
        .flat_map(|&fold| (0..opts.seeds).map(move |s| (fold, s)))
        .collect();

    let cell_rows: Vec<Vec<AblateRow>> = cells
        .par_iter()
        .map(|&(fold, seed_index)| -> Result<Vec<AblateRow>> {
            let mut cell_config = config.clone();
            cell_config.fold.index = fold;
            cell_config.seed = config.seed + seed_index as u64;
            let split = cell_config.fold_split()?;
            let (backbone, _) = ensure_backbone(&cell_config, &dataset)?;
            let store = FeatureStore::build(&backbone, &dataset)?;

            let mut rows = Vec::new();
            for (arm_idx, arm) in arms.iter().enumerate() {
                let mut arm_config = cell_config.clone();
                arm_config.model.path = arm.path.clone();
                arm_config.model.scales = arm.scales.clone();
                let model_config = arm_config.model_config(arm.variant)?;
                let mut model = engine::build_model(
                    &model_config,
                    &backbone,
                    arm_config.seed,
                    fold,
                    arm_idx as u64,
                )?;
                engine::train_model(&mut model, &dataset, Some(&store), &split, &arm_config, 1)?;
                for &shot in &arm.eval_shots {
                    let eval_seed =
                        mix_seed(arm_config.seed, &[engine::TAG_EVAL_RUN, shot as u64]);
                    let (miou, fb_iou) = engine::evaluate_miou(
                        &model,
                        &dataset,
                        &store,
                        &split,
                        shot,
                        arm_config.eval.episodes,
                        eval_seed,
                    )?;
                    rows.push(AblateRow {
                        table: arm.table,
                        variant: arm.variant,
                        path: arm.path.clone(),
                        scales: arm.scales.clone(),
                        fold,
                        shot,
                        seed_index,
                        miou,
                        fb_iou,
                    });
                }
                eprintln!(
                    "ablate: fold {fold} seed {seed_index} {}[{}] done",
                    arm.table,
                    arm.variant.name()
                );
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let rows: Vec<AblateRow> = cell_rows.into_iter().flatten().collect();
    let csv_path = out_dir.join("ablate.csv");
    let mut csv = String::from("table,variant,path,scales,fold,scheme,shot,seed,miou,fb_iou\n");
    for row in &rows {
        let scales = row
            .scales
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join("x");
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6}\n",
            row.table,
            row.variant.name(),
            row.path,
            scales,
            row.fold,
            config.fold.scheme,
            row.shot,
            row.seed_index,
            row.miou,
            row.fb_iou
        ));
    }
    fs::write(&csv_path, csv).map_err(|e| CliError::io(&csv_path, e))?;
    Ok(AblateOutput {
        csv: csv_path,
        rows,
    })
}

/// Validates that the configured interaction path parses (used by the
/// binary before dispatch so bad flags exit with code 2).
pub fn validate_config(config: &RunConfig) -> Result<()> {
    config.dataset_config()?;
    config.fold_split()?;
    parse_path(&config.model.path)?;
    config.prior_config()?;
    let _ = config.model_config(Variant::Full)?;
    Ok(())
}

/// Writes the effective configuration (defaults + file + flags) to
/// `config.json` in the output directory.
pub fn dump_effective_config(config: &RunConfig) -> Result<PathBuf> {
    let dir = ensure_output_dir(config)?;
    let path = dir.join("config.json");
    let mut file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    file.write_all(config.to_json().as_bytes())
        .map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}
