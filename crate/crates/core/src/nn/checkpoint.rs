use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Plane, RgbImage};

use super::unet::TwoStage;
use super::{check_input, image_to_tensor, sigmoid, tensor_plane, tensor_rgb, ModelConfig, Segmenter};

const MAGIC: &[u8; 8] = b"VSLCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    trained_on: Vec<String>,
    fold: Option<usize>,
    step: u64,
    param_count: usize,
}

/// Weights plus the bookkeeping needed for leakage checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub trained_on: Vec<String>,
    pub fold: Option<usize>,
    pub step: u64,
    pub weights: Vec<f32>,
}

impl ModelCheckpoint {
    pub fn from_network(
        net: &TwoStage<f32>,
        config: &ModelConfig,
        trained_on: Vec<String>,
        fold: Option<usize>,
        step: u64,
    ) -> Self {
        let weights = net.params().iter().flat_map(|p| p.value.iter().copied()).collect();
        Self {
            config: config.clone(),
            trained_on,
            fold,
            step,
            weights,
        }
    }

    pub fn network(&self) -> Result<TwoStage<f32>> {
        let mut net = self.config.build::<f32>()?;
        let mut offset = 0;
        for p in net.params_mut() {
            let n = p.len();
            let src = self
                .weights
                .get(offset..offset + n)
                .ok_or_else(|| Error::Checkpoint("weight blob shorter than the configured network".into()))?;
            p.value.copy_from_slice(src);
            offset += n;
        }
        if offset != self.weights.len() {
            return Err(Error::Checkpoint(format!(
                "weight blob has {} values, network needs {offset}",
                self.weights.len()
            )));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            trained_on: self.trained_on.clone(),
            fold: self.fold,
            step: self.step,
            param_count: self.weights.len(),
        })?;
        let mut buf = Vec::with_capacity(16 + header.len() + 4 * self.weights.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for w in &self.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        if buf.len() < 16 || &buf[..8] != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let hlen = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
        let body = buf
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let raw = &buf[16 + hlen..];
        if raw.len() != 4 * header.param_count {
            return Err(Error::Checkpoint(format!(
                "expected {} weights, found {} bytes",
                header.param_count,
                raw.len()
            )));
        }
        let weights = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            config: header.config,
            trained_on: header.trained_on,
            fold: header.fold,
            step: header.step,
            weights,
        })
    }
}

/// A trained network ready for inference.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: TwoStage<f32>,
    pub config: ModelConfig,
    pub trained_on: Vec<String>,
    pub fold: Option<usize>,
}

impl Model {
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        Ok(Self {
            net: ckpt.network()?,
            config: ckpt.config.clone(),
            trained_on: ckpt.trained_on.clone(),
            fold: ckpt.fold,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&ModelCheckpoint::load(path)?)
    }
}

impl Segmenter for Model {
    fn predict(&self, image: &RgbImage) -> Result<(RgbImage, Plane)> {
        let x = image_to_tensor::<f32>(&[image])?;
        check_input(&x)?;
        let (e, z) = self.net.forward(&x, None);
        let prob = z.map(sigmoid);
        Ok((tensor_rgb(&e, 0), tensor_plane(&prob, 0, 0)))
    }

    fn trained_on(&self) -> &[String] {
        &self.trained_on
    }
}
