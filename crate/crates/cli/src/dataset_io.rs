//! Dataset directory layout:
//! `class_<id>/img_<k>.ppm` + `class_<id>/msk_<k>.pgm` + `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use pfenet_core::episodes::{self, DatasetConfig, Sample, SynthDataset};

use crate::config::DatasetSection;
use crate::error::{CliError, Result};
use crate::pnm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Manifest {
    fn from_config(config: &DatasetConfig) -> Manifest {
        Manifest {
            class_names: episodes::class_names(config.classes),
            classes: config.classes,
            images_per_class: config.images_per_class,
            image_size: config.image_size,
            seed: config.seed,
        }
    }

    fn to_config(&self) -> DatasetConfig {
        DatasetConfig {
            classes: self.classes,
            images_per_class: self.images_per_class,
            image_size: self.image_size,
            seed: self.seed,
        }
    }
}

pub fn save_dataset(dataset: &SynthDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let manifest = Manifest::from_config(dataset.config());
    let manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), manifest_json)
        .map_err(|e| CliError::io(dir.join("manifest.json"), e))?;

    let per_class = dataset.config().images_per_class;
    for class in 1..=dataset.config().classes as u8 {
        let class_dir = dir.join(format!("class_{class:02}"));
        fs::create_dir_all(&class_dir).map_err(|e| CliError::io(&class_dir, e))?;
        for (k, &idx) in dataset.class_indices(class).iter().enumerate() {
            debug_assert_eq!(idx, (class as usize - 1) * per_class + k);
            let sample = dataset.get(idx);
            pnm::write_ppm(&class_dir.join(format!("img_{k:03}.ppm")), &sample.image)?;
            pnm::write_mask_pgm(&class_dir.join(format!("msk_{k:03}.pgm")), &sample.mask)?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SynthDataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text =
        fs::read_to_string(&manifest_path).map_err(|e| CliError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| CliError::config(format!("bad manifest: {e}")))?;
    let config = manifest.to_config();

    let mut samples = Vec::with_capacity(config.classes * config.images_per_class);
    for class in 1..=config.classes as u8 {
        let class_dir = dir.join(format!("class_{class:02}"));
        for k in 0..config.images_per_class {
            let image = pnm::read_ppm(&class_dir.join(format!("img_{k:03}.ppm")))?;
            let mask = pnm::read_mask_pgm(&class_dir.join(format!("msk_{k:03}.pgm")))?;
            if image.width != config.image_size || image.height != config.image_size {
                return Err(CliError::config(format!(
                    "class {class} image {k} has size {}x{}, manifest says {}",
                    image.width, image.height, config.image_size
                )));
            }
            samples.push(Sample { class, image, mask });
        }
    }
    SynthDataset::from_samples(config, samples).map_err(CliError::Core)
}

/// Loads the dataset under `section.path` and checks it matches the rest of
/// the configuration.
pub fn load_matching(section: &DatasetSection) -> Result<SynthDataset> {
    let dir = Path::new(&section.path);
    if !dir.join("manifest.json").exists() {
        return Err(CliError::config(format!(
            "dataset not found at {} (run `generate` first)",
            dir.display()
        )));
    }
    let dataset = load_dataset(dir)?;
    let expect = (
        section.classes,
        section.images_per_class,
        section.image_size,
        section.seed,
    );
    let found = (
        dataset.config().classes,
        dataset.config().images_per_class,
        dataset.config().image_size,
        dataset.config().seed,
    );
    if expect != found {
        return Err(CliError::config(format!(
            "dataset on disk {found:?} does not match config {expect:?} (classes, images_per_class, image_size, seed)"
        )));
    }
    Ok(dataset)
}
