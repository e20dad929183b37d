//! Two-stage encoder-decoder: an enhancement network producing a 3-channel
//! map, followed by a segmentation network producing vessel logits.

mod checkpoint;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;
mod unet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::GRID;
use crate::error::{Error, Result};
use crate::raster::{Plane, RgbImage};

pub use checkpoint::{Model, ModelCheckpoint};
pub use layers::sigmoid;
pub use loss::{bce_logits, joint_bce, loss_bce};
pub use optim::{Adam, OptimizerConfig};
pub use tensor::{Real, Tensor};
pub use unet::{NetworkCache, TwoStage, UNet};

pub const DOWNSAMPLES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// Zero-mean normal with variance `2 / fan_in`, zero biases.
    HeNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub downsamples: usize,
    pub base_channels: usize,
    pub enhancement_channels: usize,
    pub output_channels: usize,
    pub weight_init: WeightInit,
    pub seed: u64,
    /// Feed the raw image to the segmentation stage next to the enhancement map.
    pub concat_raw: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            downsamples: DOWNSAMPLES,
            base_channels: 32,
            enhancement_channels: 3,
            output_channels: 1,
            weight_init: WeightInit::HeNormal,
            seed: 0,
            concat_raw: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsamples != DOWNSAMPLES {
            return Err(Error::Parameter(format!(
                "downsamples must be {DOWNSAMPLES}, got {}",
                self.downsamples
            )));
        }
        if self.enhancement_channels != 3 || self.output_channels != 1 {
            return Err(Error::Parameter(
                "the enhancement map has 3 channels and the output has 1".into(),
            ));
        }
        if self.base_channels == 0 {
            return Err(Error::Parameter("base_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        TwoStage::<f32>::param_count(self.base_channels, self.downsamples, self.concat_raw)
    }

    /// Freshly initialised network. Weights are drawn in double precision and
    /// cast, so every scalar type starts from the same values.
    pub fn build<T: Real>(&self) -> Result<TwoStage<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(TwoStage::new(
            self.base_channels,
            self.downsamples,
            self.concat_raw,
            &mut rng,
        ))
    }
}

/// Rejects inputs the network cannot take.
pub fn check_input<T: Real>(x: &Tensor<T>) -> Result<()> {
    if x.c != 3 {
        return Err(Error::Shape(format!("expected 3 input channels, got {}", x.c)));
    }
    if x.h == 0 || x.w == 0 || !x.h.is_multiple_of(GRID) || !x.w.is_multiple_of(GRID) {
        return Err(Error::Shape(format!(
            "input {}x{} is not a multiple of {GRID}; pad it with pad_to_grid first",
            x.w, x.h
        )));
    }
    Ok(())
}

pub fn image_to_tensor<T: Real>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (w, h) = first.dims();
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.dims() != (w, h) {
            return Err(Error::Shape("batch images differ in size".into()));
        }
        data.extend(img.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok(Tensor::from_vec(images.len(), 3, h, w, data))
}

pub fn tensor_plane<T: Real>(t: &Tensor<T>, sample: usize, channel: usize) -> Plane {
    let hw = t.plane_len();
    let src = &t.sample(sample)[channel * hw..(channel + 1) * hw];
    Plane::from_vec(t.w, t.h, src.iter().map(|v| v.as_f64() as f32).collect()).expect("plane length matches")
}

pub fn tensor_rgb<T: Real>(t: &Tensor<T>, sample: usize) -> RgbImage {
    RgbImage::from_planar(t.w, t.h, t.sample(sample).iter().map(|v| v.as_f64() as f32).collect())
        .expect("rgb length matches")
}

/// Anything that turns a grid-aligned image into an enhancement map and a
/// vessel probability map.
pub trait Segmenter {
    fn predict(&self, image: &RgbImage) -> Result<(RgbImage, Plane)>;

    /// Ids of the samples the model was trained on.
    fn trained_on(&self) -> &[String];
}
