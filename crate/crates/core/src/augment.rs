//! Patch sampling, geometric augmentation and grid padding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, Plane, RgbImage};

/// Spatial size divisor imposed by four 2x down-sampling stages.
pub const GRID: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElasticConfig {
    /// Displacement scale in pixels.
    pub alpha: f64,
    /// Standard deviation of the smoothing kernel in pixels.
    pub sigma: f64,
    pub probability: f64,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        Self {
            alpha: 34.0,
            sigma: 4.0,
            probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub crop: usize,
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotate90: bool,
    pub transpose: bool,
    pub elastic: ElasticConfig,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop: 256,
            flip_h: true,
            flip_v: true,
            rotate90: true,
            transpose: true,
            elastic: ElasticConfig::default(),
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Crop only, no geometric transform.
    pub fn identity(crop: usize) -> Self {
        Self {
            crop,
            flip_h: false,
            flip_v: false,
            rotate90: false,
            transpose: false,
            elastic: ElasticConfig {
                probability: 0.0,
                ..ElasticConfig::default()
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || !self.crop.is_multiple_of(GRID) {
            return Err(Error::Parameter(format!(
                "crop {} must be a positive multiple of {GRID}",
                self.crop
            )));
        }
        if !(0.0..=1.0).contains(&self.elastic.probability) {
            return Err(Error::Parameter(format!(
                "elastic probability {} outside [0, 1]",
                self.elastic.probability
            )));
        }
        if self.elastic.alpha < 0.0 || self.elastic.sigma < 0.0 {
            return Err(Error::Parameter("elastic alpha/sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Smoothed random displacement field over a square patch.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

/// Everything needed to replay a sampled patch on another raster.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTransform {
    pub size: usize,
    /// Top-left corner of the crop window in the (possibly padded) source.
    pub origin: (usize, usize),
    /// The source was smaller than the crop and was reflect-padded first.
    pub reflect_padded: bool,
    pub transpose: bool,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Number of clockwise quarter turns.
    pub quarter_turns: u8,
    pub elastic: Option<DisplacementField>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Nearest,
    Bilinear,
}

impl PatchTransform {
    /// Position in the output of window pixel `(x, y)` under the right-angle
    /// transforms.
    fn dihedral(&self, x: usize, y: usize) -> (usize, usize) {
        let n = self.size - 1;
        let (mut x, mut y) = (x, y);
        if self.transpose {
            std::mem::swap(&mut x, &mut y);
        }
        if self.flip_h {
            x = n - x;
        }
        if self.flip_v {
            y = n - y;
        }
        for _ in 0..self.quarter_turns {
            (x, y) = (n - y, x);
        }
        (x, y)
    }

    /// Applies the transform to the crop window of `source`.
    pub fn apply(&self, source: &Plane, resample: Resample) -> Plane {
        let n = self.size;
        let (ox, oy) = self.origin;
        let mut out = vec![0.0f32; n * n];
        for y in 0..n {
            for x in 0..n {
                let (tx, ty) = self.dihedral(x, y);
                out[ty * n + tx] = source.get(ox + x, oy + y);
            }
        }
        let plane = Plane::from_vec(n, n, out).expect("square patch");
        match &self.elastic {
            Some(field) => warp(&plane, field, resample),
            None => plane,
        }
    }

    pub fn apply_mask(&self, source: &Mask) -> Mask {
        self.apply(&source.to_plane(), Resample::Nearest).threshold(0.5)
    }

    pub fn apply_rgb(&self, source: &RgbImage) -> RgbImage {
        let planes = source.planes().map(|p| self.apply(&p, Resample::Bilinear));
        RgbImage::from_planes(&planes).expect("planes share dims")
    }
}

#[derive(Debug, Clone)]
pub struct Patch {
    pub image: RgbImage,
    pub label: Mask,
    pub pseudo: Option<Plane>,
    pub transform: PatchTransform,
}

/// Draws one training patch. The same transform is applied to the image,
/// the label and (when given) the pseudo label.
///
/// Randomness consumed per call does not depend on which flags are enabled
/// or whether a pseudo label is present.
pub fn sample_patch<R: Rng + ?Sized>(
    image: &RgbImage,
    label: &Mask,
    pseudo: Option<&Plane>,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<Patch> {
    cfg.validate()?;
    if image.dims() != label.dims() || pseudo.is_some_and(|p| p.dims() != image.dims()) {
        return Err(Error::Shape("image, label and pseudo label differ in size".into()));
    }
    let n = cfg.crop;
    let (w, h) = image.dims();
    let reflect_padded = w < n || h < n;
    let (pw, ph) = (w.max(n), h.max(n));

    let ox = rng.gen_range(0..=pw - n);
    let oy = rng.gen_range(0..=ph - n);
    let transpose = rng.gen_bool(0.5) && cfg.transpose;
    let flip_h = rng.gen_bool(0.5) && cfg.flip_h;
    let flip_v = rng.gen_bool(0.5) && cfg.flip_v;
    let turns = rng.gen_range(0..4u8);
    let quarter_turns = if cfg.rotate90 { turns } else { 0 };
    let do_elastic = rng.gen::<f64>() < cfg.elastic.probability;
    let elastic = do_elastic.then(|| random_field(n, &cfg.elastic, rng));

    let transform = PatchTransform {
        size: n,
        origin: (ox, oy),
        reflect_padded,
        transpose,
        flip_h,
        flip_v,
        quarter_turns,
        elastic,
    };

    let (image, label, pseudo) = if reflect_padded {
        let planes = image.planes().map(|p| reflect_pad(&p, pw, ph));
        (
            std::borrow::Cow::Owned(RgbImage::from_planes(&planes)?),
            std::borrow::Cow::Owned(reflect_pad(&label.to_plane(), pw, ph).threshold(0.5)),
            pseudo.map(|p| std::borrow::Cow::Owned(reflect_pad(p, pw, ph))),
        )
    } else {
        (
            std::borrow::Cow::Borrowed(image),
            std::borrow::Cow::Borrowed(label),
            pseudo.map(std::borrow::Cow::Borrowed),
        )
    };

    Ok(Patch {
        image: transform.apply_rgb(&image),
        label: transform.apply_mask(&label),
        pseudo: pseudo.map(|p| transform.apply(&p, Resample::Nearest)),
        transform,
    })
}

fn random_field<R: Rng + ?Sized>(n: usize, cfg: &ElasticConfig, rng: &mut R) -> DisplacementField {
    let noise = |rng: &mut R| -> Vec<f32> {
        let raw: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
        let smooth = gaussian_blur(&raw, n, n, cfg.sigma);
        smooth.into_iter().map(|v| v * cfg.alpha as f32).collect()
    };
    let dx = noise(rng);
    let dy = noise(rng);
    DisplacementField { dx, dy }
}

/// Separable Gaussian filter with zero boundary, kernel truncated at 4 sigma.
pub fn gaussian_blur(data: &[f32], w: usize, h: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();

    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = x as isize + k as isize - radius;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * f64::from(data[y * w + sx as usize]);
                }
            }
            tmp[y * w + x] = acc as f32;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = y as isize + k as isize - radius;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * f64::from(tmp[sy as usize * w + x]);
                }
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

/// Samples `plane` at `(x + dx, y + dy)`, clamping to the border.
pub fn warp(plane: &Plane, field: &DisplacementField, resample: Resample) -> Plane {
    let (w, h) = plane.dims();
    let maxx = (w - 1) as f32;
    let maxy = (h - 1) as f32;
    Plane::from_fn(w, h, |x, y| {
        let i = y * w + x;
        let sx = (x as f32 + field.dx[i]).clamp(0.0, maxx);
        let sy = (y as f32 + field.dy[i]).clamp(0.0, maxy);
        match resample {
            Resample::Nearest => plane.get(sx.round() as usize, sy.round() as usize),
            Resample::Bilinear => {
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = sx - x0 as f32;
                let fy = sy - y0 as f32;
                let top = plane.get(x0, y0) * (1.0 - fx) + plane.get(x1, y0) * fx;
                let bot = plane.get(x0, y1) * (1.0 - fx) + plane.get(x1, y1) * fx;
                top * (1.0 - fy) + bot * fy
            }
        }
    })
}

/// Mirror-pads on the right and bottom to at least `(w, h)`.
pub fn reflect_pad(plane: &Plane, w: usize, h: usize) -> Plane {
    let (sw, sh) = plane.dims();
    let reflect = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let r = i % period;
        if r < n {
            r
        } else {
            period - r
        }
    };
    Plane::from_fn(w.max(sw), h.max(sh), |x, y| plane.get(reflect(x, sw), reflect(y, sh)))
}

// ---------------------------------------------------------------------------
// Test-time grid padding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadSpec {
    /// Original (width, height).
    pub original: (usize, usize),
    /// Padded (width, height), both equal to `16 * m`.
    pub padded: (usize, usize),
    /// (top, left) offset of the original content inside the padded raster.
    pub offsets: (usize, usize),
}

impl PadSpec {
    pub fn for_dims(width: usize, height: usize) -> Self {
        let m = grid_multiple(width, height);
        Self {
            original: (width, height),
            padded: (GRID * m, GRID * m),
            offsets: (0, 0),
        }
    }

    pub fn multiple(&self) -> usize {
        self.padded.0 / GRID
    }
}

/// Smallest `m` with `16 * m >= max(width, height)`.
pub fn grid_multiple(width: usize, height: usize) -> usize {
    width.max(height).div_ceil(GRID).max(1)
}

pub fn pad_plane(plane: &Plane, spec: &PadSpec) -> Plane {
    let (top, left) = spec.offsets;
    let (w, h) = plane.dims();
    Plane::from_fn(spec.padded.0, spec.padded.1, |x, y| {
        if x >= left && y >= top && x - left < w && y - top < h {
            plane.get(x - left, y - top)
        } else {
            0.0
        }
    })
}

/// Zero-pads the image on the right and bottom to a square `16 m` grid.
pub fn pad_to_grid(image: &RgbImage) -> (RgbImage, PadSpec) {
    let spec = PadSpec::for_dims(image.width(), image.height());
    let planes = image.planes().map(|p| pad_plane(&p, &spec));
    (RgbImage::from_planes(&planes).expect("planes share dims"), spec)
}

pub fn crop_back(map: &Plane, spec: &PadSpec) -> Result<Plane> {
    if map.dims() != spec.padded {
        return Err(Error::Contract(format!(
            "map is {:?} but pad spec expects {:?}",
            map.dims(),
            spec.padded
        )));
    }
    let (top, left) = spec.offsets;
    let (w, h) = spec.original;
    Ok(Plane::from_fn(w, h, |x, y| map.get(x + left, y + top)))
}

pub fn crop_back_rgb(map: &RgbImage, spec: &PadSpec) -> Result<RgbImage> {
    let planes = map.planes();
    let cropped = [
        crop_back(&planes[0], spec)?,
        crop_back(&planes[1], spec)?,
        crop_back(&planes[2], spec)?,
    ];
    RgbImage::from_planes(&cropped)
}
