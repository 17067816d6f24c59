//! Binary weight files.
//!
//! Backbone file: magic `PFNB`, version, layer count, then per layer a
//! rank-prefixed shape and raw little-endian f64 values. Model checkpoints
//! (`PFNC`) extend the same layout with a JSON metadata blob and a section
//! table, one section per model component.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use pfenet_core::backbone::Backbone;
use pfenet_core::model::PFENet;
use pfenet_core::tensor::Parameter;

use crate::config::{RunConfig, Variant};
use crate::error::{CliError, Result};

const BACKBONE_MAGIC: &[u8; 4] = b"PFNB";
const CHECKPOINT_MAGIC: &[u8; 4] = b"PFNC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub run: RunConfig,
    pub variant: Variant,
    pub trained_iters: usize,
}

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { bytes: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn blob(&mut self, data: &[u8]) {
        self.u32(data.len() as u32);
        self.bytes.extend_from_slice(data);
    }

    fn layer(&mut self, param: &Parameter) {
        let dims = param.shape().dims();
        self.u32(dims.len() as u32);
        for &d in dims {
            self.u32(d as u32);
        }
        for v in param.values() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(CliError::Format {
            path: self.path.to_path_buf(),
            offset: self.offset,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.offset + n {
            return self.fail(format!("truncated: wanted {n} more bytes"));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    /// Reads one layer into the given parameter, enforcing its shape.
    fn layer_into(&mut self, param: &mut Parameter) -> Result<()> {
        let rank = self.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        if dims != param.shape().dims() {
            return self.fail(format!(
                "layer shape {:?} does not match parameter {} ({})",
                dims,
                param.name(),
                param.shape()
            ));
        }
        let count: usize = dims.iter().product();
        let raw = self.take(count * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        param
            .set_values(values)
            .map_err(|e| CliError::config(e.to_string()))
    }
}

pub fn write_backbone(path: &Path, backbone: &Backbone) -> Result<()> {
    let mut w = Writer::new();
    w.bytes.extend_from_slice(BACKBONE_MAGIC);
    w.u32(VERSION);
    let params = backbone.parameters();
    w.u32(params.len() as u32);
    for p in params {
        w.layer(p);
    }
    fs::write(path, w.bytes).map_err(|e| CliError::io(path, e))
}

/// Loads backbone weights written by [`write_backbone`] into a structurally
/// identical backbone.
pub fn load_backbone_into(path: &Path, backbone: &mut Backbone) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
        path,
    };
    if r.take(4)? != BACKBONE_MAGIC {
        r.offset = 0;
        return r.fail("bad backbone magic");
    }
    let version = r.u32()?;
    if version != VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let count = r.u32()? as usize;
    let mut params = backbone.parameters_mut();
    if count != params.len() {
        return r.fail(format!(
            "layer count {count} does not match backbone ({})",
            params.len()
        ));
    }
    for p in params.iter_mut() {
        r.layer_into(p)?;
    }
    Ok(())
}

pub fn write_checkpoint(path: &Path, model: &PFENet, meta: &CheckpointMeta) -> Result<()> {
    let mut w = Writer::new();
    w.bytes.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(VERSION);
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    w.blob(&meta_json);
    let sections = model.sections();
    w.u32(sections.len() as u32);
    for (name, params) in sections {
        w.blob(name.as_bytes());
        w.u32(params.len() as u32);
        for p in params {
            w.layer(p);
        }
    }
    fs::write(path, w.bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
        path,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        r.offset = 0;
        return r.fail("bad checkpoint magic");
    }
    let version = r.u32()?;
    if version != VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let meta = r.blob()?;
    serde_json::from_slice(meta).map_err(|e| CliError::config(format!("bad checkpoint meta: {e}")))
}

/// Rebuilds the model a checkpoint was saved from: the architecture comes
/// from the embedded metadata, every weight from the section table.
pub fn load_model(path: &Path) -> Result<(PFENet, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
        path,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        r.offset = 0;
        return r.fail("bad checkpoint magic");
    }
    let version = r.u32()?;
    if version != VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(r.blob()?)
        .map_err(|e| CliError::config(format!("bad checkpoint meta: {e}")))?;
    let model_config = meta.run.model_config(meta.variant)?;
    let mut model = PFENet::new(&model_config, 0)?;

    let section_count = r.u32()? as usize;
    let mut sections = model.sections_mut();
    if section_count != sections.len() {
        return r.fail(format!(
            "section count {section_count} does not match model ({})",
            sections.len()
        ));
    }
    for (name, params) in sections.iter_mut() {
        let stored_name = r.blob()?;
        if stored_name != name.as_bytes() {
            return r.fail(format!(
                "section {} does not match expected {name}",
                String::from_utf8_lossy(stored_name)
            ));
        }
        let layer_count = r.u32()? as usize;
        if layer_count != params.len() {
            return r.fail(format!(
                "section {name}: {layer_count} layers stored, model has {}",
                params.len()
            ));
        }
        for p in params.iter_mut() {
            r.layer_into(p)?;
        }
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use pfenet_core::backbone::BackboneConfig;
    use pfenet_core::model::ModelConfig;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("pfenet-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn backbone_roundtrip_restores_values() {
        let cfg = BackboneConfig {
            widths: [4, 6, 8, 8],
        };
        let a = Backbone::new(&cfg, 77);
        let path = tmp("bb.bin");
        write_backbone(&path, &a).unwrap();
        let mut b = Backbone::new(&cfg, 78);
        assert_ne!(a.checksum(), b.checksum());
        load_backbone_into(&path, &mut b).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn checkpoint_roundtrip_restores_model() {
        let mut run = RunConfig::default();
        run.model.channels = 6;
        run.model.scales = vec![2, 1];
        run.model.backbone_widths = [4, 6, 8, 8];
        run.dataset.image_size = 8;
        let model_cfg: ModelConfig = run.model_config(Variant::Full).unwrap();
        let model = PFENet::new(&model_cfg, 5).unwrap();
        let meta = CheckpointMeta {
            run,
            variant: Variant::Full,
            trained_iters: 42,
        };
        let path = tmp("model.ckpt");
        write_checkpoint(&path, &model, &meta).unwrap();

        let (restored, meta2) = load_model(&path).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(restored.backbone.checksum(), model.backbone.checksum());
        let a: Vec<&Parameter> = model.trainable_parameters();
        let b: Vec<&Parameter> = restored.trainable_parameters();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.values(), y.values(), "param {}", x.name());
        }
    }

    #[test]
    fn corrupted_checkpoint_is_a_format_error() {
        let path = tmp("bad.ckpt");
        std::fs::write(&path, b"PFNCxxxx").unwrap();
        assert!(matches!(
            read_meta(&path).unwrap_err(),
            CliError::Format { .. } | CliError::Config(_)
        ));
    }
}
