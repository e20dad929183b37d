//! Polyline rasterization with a round brush.

use crate::raster::Mask;

use super::{Point, VesselSegment};

/// Pixel offsets of a rasterized disc of diameter `width`.
///
/// Odd widths are centred on the pixel; even widths are centred on the
/// pixel corner at (+0.5, +0.5), so a straight horizontal stroke is exactly
/// `width` rows tall.
pub fn brush(width: usize) -> Vec<(isize, isize)> {
    let width = width.max(1);
    let lo = -(((width - 1) / 2) as isize);
    let hi = (width / 2) as isize;
    let c = if width.is_multiple_of(2) { 0.5 } else { 0.0 };
    let r2 = (width as f64 / 2.0).powi(2);
    let mut out = Vec::new();
    for dy in lo..=hi {
        for dx in lo..=hi {
            let fx = dx as f64 - c;
            let fy = dy as f64 - c;
            if fx * fx + fy * fy <= r2 + 1e-9 {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Bresenham line between two pixels, endpoints included.
pub fn line(a: Point, b: Point) -> Vec<Point> {
    let (mut x, mut y) = (a.x, a.y);
    let dx = (b.x - a.x).abs();
    let dy = -(b.y - a.y).abs();
    let sx = if a.x < b.x { 1 } else { -1 };
    let sy = if a.y < b.y { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy) as usize + 1);
    loop {
        out.push(Point { x, y });
        if x == b.x && y == b.y {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Centre-line pixels of a polyline (its width-1 rasterization).
pub fn centerline(points: &[Point]) -> Vec<Point> {
    match points {
        [] => Vec::new(),
        [p] => vec![*p],
        _ => {
            let mut out = Vec::new();
            for pair in points.windows(2) {
                let seg = line(pair[0], pair[1]);
                let skip = usize::from(!out.is_empty());
                out.extend(seg.into_iter().skip(skip));
            }
            out
        }
    }
}

/// Stamps `segment` into `canvas` with a stroke of the given width.
pub fn stroke(canvas: &mut Mask, points: &[Point], width: usize) {
    let b = brush(width);
    let (w, h) = (canvas.width() as isize, canvas.height() as isize);
    for p in centerline(points) {
        for &(dx, dy) in &b {
            let (x, y) = (p.x as isize + dx, p.y as isize + dy);
            if x >= 0 && y >= 0 && x < w && y < h {
                canvas.set(x as usize, y as usize, true);
            }
        }
    }
}

/// The pixel set `l_i^t` covered by one segment drawn at width `t`.
pub fn band(segment: &VesselSegment, width: usize, dims: (usize, usize)) -> Mask {
    let mut m = Mask::new(dims.0, dims.1);
    stroke(&mut m, &segment.points, width);
    m
}

pub fn draw_segments<'a>(
    segments: impl IntoIterator<Item = &'a VesselSegment>,
    width: usize,
    dims: (usize, usize),
) -> Mask {
    let mut m = Mask::new(dims.0, dims.1);
    for s in segments {
        stroke(&mut m, &s.points, width);
    }
    m
}
