//! Synthetic fundus photographs with branching vessel trees, written in the
//! DRIVE directory layout. Used for fixtures and smoke runs.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::gaussian_blur;
use crate::error::Result;
use crate::imageio;
use crate::raster::{Mask, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// DRIVE-sized images.
    pub fn drive(seed: u64) -> Self {
        Self {
            width: 565,
            height: 584,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: RgbImage,
    pub label: Mask,
    pub fov: Mask,
}

struct Vessel {
    x: f64,
    y: f64,
    heading: f64,
    width: f64,
    depth: u32,
}

struct Canvas {
    w: usize,
    h: usize,
    /// Largest vessel width covering each pixel, 0 elsewhere.
    width: Vec<f32>,
    cx: f64,
    cy: f64,
    radius: f64,
}

impl Canvas {
    fn inside(&self, x: f64, y: f64) -> bool {
        (x - self.cx).hypot(y - self.cy) < self.radius
    }

    fn stamp(&mut self, x: f64, y: f64, width: f64) {
        let r = width / 2.0;
        let (x0, x1) = (
            (x - r).floor().max(0.0) as usize,
            ((x + r).ceil() as usize).min(self.w - 1),
        );
        let (y0, y1) = (
            (y - r).floor().max(0.0) as usize,
            ((y + r).ceil() as usize).min(self.h - 1),
        );
        for py in y0..=y1 {
            for px in x0..=x1 {
                let d = (px as f64 - x).hypot(py as f64 - y);
                if d <= r.max(0.75) {
                    let cell = &mut self.width[py * self.w + px];
                    *cell = cell.max(width as f32);
                }
            }
        }
    }
}

/// One synthetic image; `index` picks the tree.
pub fn synth_fundus(cfg: &SynthConfig, index: u64) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (w, h) = (cfg.width, cfg.height);
    let scale = w.min(h) as f64 / 565.0;
    let mut canvas = Canvas {
        w,
        h,
        width: vec![0.0; w * h],
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
        radius: 0.47 * w.min(h) as f64,
    };

    let left = rng.gen_bool(0.5);
    let disc_x = canvas.cx + if left { -1.0 } else { 1.0 } * 0.55 * canvas.radius;
    let disc_y = canvas.cy + rng.gen_range(-0.1..0.1) * canvas.radius;
    let inward = if left { 0.0 } else { PI };

    let trunk_width = (7.0 * scale).max(2.5);
    let mut stack: Vec<Vessel> = [-1.0f64, 1.0]
        .iter()
        .flat_map(|&side| {
            [(0.6, 1.0), (1.4, 0.8)].map(|(spread, wf)| Vessel {
                x: disc_x,
                y: disc_y,
                heading: inward + side * spread + rng.gen_range(-0.15..0.15),
                width: trunk_width * wf,
                depth: 0,
            })
        })
        .collect();

    let turn = Normal::new(0.0, 0.035).expect("finite std");
    let step = 0.7f64;
    while let Some(mut v) = stack.pop() {
        let mut travelled = 0.0;
        let mut next_branch = rng.gen_range(50.0..110.0) * scale.max(0.3);
        let max_len = rng.gen_range(120.0..260.0) * scale.max(0.3) * (1.0 + v.width / trunk_width);
        // Main arcades curve around the macula.
        let bend = if v.depth == 0 {
            rng.gen_range(-0.006..0.006)
        } else {
            0.0
        };
        while travelled < max_len && canvas.inside(v.x, v.y) {
            canvas.stamp(v.x, v.y, v.width);
            v.heading += turn.sample(&mut rng) + bend;
            v.x += step * v.heading.cos();
            v.y += step * v.heading.sin();
            travelled += step;
            v.width = (v.width * 0.9993).max(1.0);
            if travelled >= next_branch && v.depth < 5 && v.width > 1.6 {
                next_branch = travelled + rng.gen_range(50.0..110.0) * scale.max(0.3);
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                stack.push(Vessel {
                    x: v.x,
                    y: v.y,
                    heading: v.heading + side * rng.gen_range(0.5..1.1),
                    width: (v.width * rng.gen_range(0.55..0.8)).max(1.0),
                    depth: v.depth + 1,
                });
                v.width *= 0.92;
            }
        }
    }

    let fov = Mask::from_fn(w, h, |x, y| canvas.inside(x as f64, y as f64));
    let label = Mask::from_fn(w, h, |x, y| canvas.width[y * w + x] > 0.0 && fov.get(x, y));

    // Vessel darkening: wider vessels have more contrast; blurred for soft edges.
    let contrast: Vec<f32> = canvas
        .width
        .iter()
        .map(|&vw| if vw > 0.0 { (0.18 + 0.06 * vw).min(0.55) } else { 0.0 })
        .collect();
    let contrast = gaussian_blur(&contrast, w, h, 0.8);
    let noise = Normal::new(0.0f32, 0.015).expect("finite std");
    let disc_r = 0.12 * canvas.radius;
    let image = RgbImage::from_fn(w, h, |x, y| {
        if !fov.get(x, y) {
            return [0.0; 3];
        }
        let (fx, fy) = (x as f64, y as f64);
        let r = (fx - canvas.cx).hypot(fy - canvas.cy) / canvas.radius;
        let light = (1.0 - 0.45 * r * r) as f32;
        let dd = (fx - disc_x).hypot(fy - disc_y) / disc_r;
        let disc = (0.5 * (-dd * dd).exp()) as f32;
        let c = contrast[y * w + x];
        let base = [
            0.78 * light + disc,
            0.36 * light + disc * 0.9,
            0.14 * light + disc * 0.6,
        ];
        let dark = [1.0 - 0.5 * c, 1.0 - c, 1.0 - 0.6 * c];
        let mut px = [0.0f32; 3];
        for i in 0..3 {
            px[i] = (base[i] * dark[i] + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        px
    });
    SynthSample { image, label, fov }
}

/// Writes `n_train` training and `n_test` test images under
/// `<root>/DRIVE/{training,test}/{images,1st_manual,mask}`.
pub fn write_drive_layout(root: &Path, cfg: &SynthConfig, n_train: usize, n_test: usize) -> Result<()> {
    let base = root.join("DRIVE");
    let jobs = (0..n_train)
        .map(|i| ("training", i + 21, i as u64 + 1000))
        .chain((0..n_test).map(|i| ("test", i + 1, i as u64)));
    for (split, number, index) in jobs {
        let s = synth_fundus(cfg, index);
        let dir = base.join(split);
        let stem = format!("{number:02}_{split}");
        imageio::write_rgb8(&dir.join("images").join(format!("{stem}.png")), &s.image)?;
        imageio::write_binary(
            &dir.join("1st_manual").join(format!("{number:02}_manual1.png")),
            &s.label,
        )?;
        imageio::write_binary(&dir.join("mask").join(format!("{stem}_mask.png")), &s.fov)?;
    }
    Ok(())
}

/// Vessel fraction inside the field of view.
pub fn vessel_density(s: &SynthSample) -> f64 {
    let inside = s.fov.count().max(1);
    let on = s
        .label
        .data()
        .iter()
        .zip(s.fov.data())
        .filter(|(&l, &f)| l != 0 && f != 0)
        .count();
    on as f64 / inside as f64
}
