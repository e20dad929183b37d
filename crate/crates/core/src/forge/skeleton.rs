//! Zhang-Suen thinning.
//!
//! The classic parallel scheme deletes 2x2 blocks and two-pixel-thick
//! diagonals outright. Each sub-iteration is therefore checked against the
//! 8-connected component count; when a parallel pass would change it, that
//! pass is replayed sequentially and only simple points are removed.
//! Pixels need at least three neighbours to be deleted (the Lu-Wang
//! variant), so two-pixel diagonals do not erode from their ends. A final
//! pass drops staircase corners so the result is 8-thin.

use crate::raster::{count_components, Mask};

/// Offsets of P2..P9: N, NE, E, SE, S, SW, W, NW.
const RING: [(isize, isize); 8] = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];

pub fn skeletonize(mask: &Mask) -> Mask {
    let mut img = mask.clone();
    if img.is_empty() {
        return img;
    }
    let components = count_components(&img);
    loop {
        let mut changed = false;
        for step in 0..2 {
            let candidates: Vec<(usize, usize)> = img.iter_on().filter(|&(x, y)| deletable(&img, x, y, step)).collect();
            if candidates.is_empty() {
                continue;
            }
            let mut next = img.clone();
            for &(x, y) in &candidates {
                next.set(x, y, false);
            }
            if count_components(&next) != components {
                next = img.clone();
                for &(x, y) in &candidates {
                    if deletable(&next, x, y, step) && is_simple(&next, x, y) {
                        next.set(x, y, false);
                    }
                }
            }
            if next != img {
                changed = true;
                img = next;
            }
        }
        if !changed {
            break;
        }
    }
    remove_staircases(&mut img);
    img
}

/// Deletes simple pixels whose two orthogonal neighbours already touch
/// diagonally.
fn remove_staircases(img: &mut Mask) {
    let (w, h) = img.dims();
    for y in 0..h {
        for x in 0..w {
            if !img.get(x, y) {
                continue;
            }
            let p = ring(img, x, y);
            let degree = p.iter().filter(|&&v| v).count();
            // p[0]=N, p[2]=E, p[4]=S, p[6]=W
            let corner = (0..4).any(|k| p[2 * k] && p[(2 * k + 2) % 8] && !p[2 * k + 1]);
            if degree >= 2 && corner && is_simple(img, x, y) {
                img.set(x, y, false);
            }
        }
    }
}

fn ring(mask: &Mask, x: usize, y: usize) -> [bool; 8] {
    let (x, y) = (x as isize, y as isize);
    RING.map(|(dx, dy)| mask.get_signed(x + dx, y + dy))
}

/// Zhang-Suen deletion test for the given sub-iteration.
fn deletable(mask: &Mask, x: usize, y: usize, step: usize) -> bool {
    let p = ring(mask, x, y);
    let b = p.iter().filter(|&&v| v).count();
    if !(3..=6).contains(&b) {
        return false;
    }
    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
    if a != 1 {
        return false;
    }
    // p[0]=P2, p[2]=P4, p[4]=P6, p[6]=P8
    if step == 0 {
        !(p[0] && p[2] && p[4]) && !(p[2] && p[4] && p[6])
    } else {
        !(p[0] && p[2] && p[6]) && !(p[0] && p[4] && p[6])
    }
}

/// Yokoi connectivity number for 8-connectivity equals one.
fn is_simple(mask: &Mask, x: usize, y: usize) -> bool {
    let (x, y) = (x as isize, y as isize);
    // Counter-clockwise from east: E, NE, N, NW, W, SW, S, SE.
    const CCW: [(isize, isize); 8] = [(1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1)];
    let bg = CCW.map(|(dx, dy)| u8::from(!mask.get_signed(x + dx, y + dy)));
    let n: u8 = [0usize, 2, 4, 6]
        .iter()
        .map(|&k| bg[k] - bg[k] * bg[(k + 1) % 8] * bg[(k + 2) % 8])
        .sum();
    n == 1
}
