//! Synthetic incomplete vessel labels.
//!
//! A complete label is thinned to a skeleton, traced into polyline segments,
//! and every segment is scored by the vessel density under its stroke. The
//! thickest `ceil(r * M)` segments are kept, a seeded fraction of the rest is
//! added back, and the label is masked by the kept strokes.

pub mod draw;
mod skeleton;
mod trace;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::Mask;

pub use skeleton::skeletonize;
pub use trace::trace_polylines;

/// Fraction of foreground pixels the redrawn skeleton must cover.
pub const COVER_TARGET: f64 = 0.995;
/// Largest stroke width tried by [`min_cover_width`].
pub const MAX_COVER_WIDTH: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: i32,
    pub y: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselSegment {
    pub id: usize,
    pub points: Vec<Point>,
    /// Share of the width-`t` stroke covered by vessel pixels.
    pub thickness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverWidth {
    pub width: usize,
    pub coverage: f64,
    /// False when even [`MAX_COVER_WIDTH`] misses the coverage target.
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VesselGraph {
    pub segments: Vec<VesselSegment>,
    pub source_shape: (usize, usize),
    pub cover: CoverWidth,
}

impl VesselGraph {
    /// Skeletonizes, traces and scores `label`.
    pub fn build(label: &Mask) -> Self {
        let skel = skeletonize(label);
        let mut segments = trace_polylines(&skel);
        extend_ends(&mut segments, label, &skel);
        let cover = min_cover_width(label, &segments);
        for s in &mut segments {
            s.thickness = measure_thickness(s, label, cover.width);
        }
        Self {
            segments,
            source_shape: label.dims(),
            cover,
        }
    }

    pub fn cover_width(&self) -> usize {
        self.cover.width
    }

    /// Segment ids ordered thickest first, ties by ascending id.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<&VesselSegment> = self.segments.iter().collect();
        order.sort_by(|a, b| b.thickness.total_cmp(&a.thickness).then(a.id.cmp(&b.id)));
        order.into_iter().map(|s| s.id).collect()
    }
}

/// Prolongs every free segment end along its heading while it stays on the
/// vessel. Thinning pulls ends back by about the vessel radius; left alone,
/// the uncovered tips would inflate the cover width.
pub fn extend_ends(segments: &mut [VesselSegment], label: &Mask, skeleton: &Mask) {
    const LOOK_BACK: usize = 6;
    let (w, h) = label.dims();
    let reach = (w + h) as f64;
    let is_tip = |p: Point| {
        let mut n = 0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                if (dx, dy) != (0, 0) && skeleton.get_signed((p.x + dx) as isize, (p.y + dy) as isize) {
                    n += 1;
                }
            }
        }
        n == 1
    };
    for s in segments {
        let n = s.points.len();
        if n < 2 || s.points[0] == s.points[n - 1] {
            continue;
        }
        let look = LOOK_BACK.min(n - 1);
        for at_end in [false, true] {
            let len = s.points.len();
            let (tip, back) = if at_end {
                (s.points[len - 1], s.points[len - 1 - look])
            } else {
                (s.points[0], s.points[look])
            };
            if !is_tip(tip) {
                continue;
            }
            let (dx, dy) = ((tip.x - back.x) as f64, (tip.y - back.y) as f64);
            let norm = dx.hypot(dy);
            if norm == 0.0 {
                continue;
            }
            let target = Point {
                x: tip.x + (dx / norm * reach).round() as i32,
                y: tip.y + (dy / norm * reach).round() as i32,
            };
            let mut last = tip;
            for p in draw::line(tip, target).into_iter().skip(1) {
                if p.x < 0 || p.y < 0 || p.x >= w as i32 || p.y >= h as i32 || !label.get(p.x as usize, p.y as usize) {
                    break;
                }
                last = p;
            }
            if last != tip {
                if at_end {
                    s.points.push(last);
                } else {
                    s.points.insert(0, last);
                }
            }
        }
    }
}

/// Smallest stroke width whose redrawn skeleton covers [`COVER_TARGET`] of
/// the foreground.
pub fn min_cover_width(mask: &Mask, segments: &[VesselSegment]) -> CoverWidth {
    let total = mask.count();
    if total == 0 {
        return CoverWidth {
            width: 1,
            coverage: 1.0,
            reached: true,
        };
    }
    let mut last = 0.0;
    for width in 1..=MAX_COVER_WIDTH {
        let drawn = draw::draw_segments(segments, width, mask.dims());
        let covered = mask
            .data()
            .iter()
            .zip(drawn.data())
            .filter(|(&m, &d)| m != 0 && d != 0)
            .count();
        last = covered as f64 / total as f64;
        if last >= COVER_TARGET {
            return CoverWidth {
                width,
                coverage: last,
                reached: true,
            };
        }
    }
    log::warn!("cover target {COVER_TARGET} not reached at width {MAX_COVER_WIDTH} (coverage {last:.4})");
    CoverWidth {
        width: MAX_COVER_WIDTH,
        coverage: last,
        reached: false,
    }
}

/// Vessel density under the segment's width-`t` stroke, in [0, 1].
pub fn measure_thickness(segment: &VesselSegment, mask: &Mask, width: usize) -> f64 {
    let band = draw::band(segment, width, mask.dims());
    let area = band.count();
    if area == 0 {
        return 0.0;
    }
    let hit = band
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(&b, &m)| b != 0 && m != 0)
        .count();
    hit as f64 / area as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErasureConfig {
    /// Share of segments, thickest first, that always survive.
    pub ratio: f64,
    /// Share of the remaining thin segments added back at random.
    pub thin_keep_fraction: f64,
    pub seed: u64,
}

impl Default for ErasureConfig {
    fn default() -> Self {
        Self {
            ratio: 1.0,
            thin_keep_fraction: 0.5,
            seed: 0,
        }
    }
}

impl ErasureConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ratio", self.ratio), ("thin_keep_fraction", self.thin_keep_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Number of segments kept by rank out of `total`.
    pub fn keep_count(&self, total: usize) -> usize {
        // The epsilon guards against products like 0.3 * 10 = 3.0000000000000004.
        let n = (self.ratio * total as f64 - 1e-9).ceil().max(0.0) as usize;
        n.min(total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErasedLabel {
    pub mask: Mask,
    pub kept: Vec<usize>,
    pub erased: Vec<usize>,
    pub cover_width: usize,
}

/// Per-image summary written to the erase manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeRecord {
    pub sample_id: String,
    pub segments: usize,
    pub cover_width: usize,
    pub cover_reached: bool,
    pub kept: Vec<usize>,
    pub erased: Vec<usize>,
    pub foreground_before: usize,
    pub foreground_after: usize,
}

impl ForgeRecord {
    pub fn new(sample_id: &str, label: &Mask, graph: &VesselGraph, erased: &ErasedLabel) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            segments: graph.segments.len(),
            cover_width: graph.cover.width,
            cover_reached: graph.cover.reached,
            kept: erased.kept.clone(),
            erased: erased.erased.clone(),
            foreground_before: label.count(),
            foreground_after: erased.mask.count(),
        }
    }
}

/// Erases thin vessel segments from `label`.
pub fn erase_labels(label: &Mask, cfg: &ErasureConfig, sample_id: &str) -> Result<ErasedLabel> {
    cfg.validate()?;
    let graph = VesselGraph::build(label);
    erase_with_graph(&graph, label, cfg, sample_id)
}

/// Erasure against a prebuilt graph, so several ratios share one ranking.
pub fn erase_with_graph(
    graph: &VesselGraph,
    label: &Mask,
    cfg: &ErasureConfig,
    sample_id: &str,
) -> Result<ErasedLabel> {
    cfg.validate()?;
    if graph.source_shape != label.dims() {
        return Err(Error::Shape(format!(
            "graph built for {:?}, label is {:?}",
            graph.source_shape,
            label.dims()
        )));
    }
    let ranking = graph.ranking();
    let total = ranking.len();
    let top = cfg.keep_count(total);
    let mut kept: Vec<usize> = ranking[..top].to_vec();
    let mut thin: Vec<usize> = ranking[top..].to_vec();
    let readd = (cfg.thin_keep_fraction * thin.len() as f64).round() as usize;
    if readd > 0 {
        let mut rng = sample_rng(cfg.seed, sample_id);
        thin.shuffle(&mut rng);
        kept.extend(thin.drain(..readd));
    }
    kept.sort_unstable();
    thin.sort_unstable();

    let mask = if kept.len() == total {
        // Nothing erased: the label is returned untouched.
        label.clone()
    } else {
        let drawn = draw::draw_segments(
            kept.iter().map(|&id| &graph.segments[id]),
            graph.cover.width,
            label.dims(),
        );
        drawn.and(label)?
    };
    Ok(ErasedLabel {
        mask,
        kept,
        erased: thin,
        cover_width: graph.cover.width,
    })
}

/// Random stream dedicated to one sample, independent of iteration order.
pub fn sample_rng(seed: u64, sample_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}
