//! Zhang-Suen thinning: parallel two-subiteration boundary erosion applied
//! until fixpoint, producing a one-pixel-wide skeleton of a binary image.

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Thin a strictly binary raster down to its skeleton.
pub fn skeletonize(img: &Raster) -> Result<Raster> {
    if !img.is_binary() {
        return Err(Error::Param("skeletonize expects a strictly binary raster".into()));
    }
    let (h, w) = img.shape();
    let mut grid: Vec<u8> = img.as_slice().iter().map(|&v| (v != 0.0) as u8).collect();
    loop {
        let a = pass(&mut grid, h, w, true);
        let b = pass(&mut grid, h, w, false);
        if !a && !b {
            break;
        }
    }
    Ok(Raster::from_vec(h, w, grid.iter().map(|&v| v as f32).collect()).unwrap())
}

/// One parallel sub-iteration: flag every deletable foreground pixel against
/// the frozen grid, then clear the flags at once. Returns whether anything
/// was deleted.
///
/// Ring order is N, NE, E, SE, S, SW, W, NW; pixels outside the image count
/// as background. A pixel is deletable when its neighbor count lies in
/// [2, 6], its ring has exactly one background-to-foreground transition, and
/// the sub-iteration's two directional triples each contain a background
/// pixel (south/east boundary bias first, north/west second).
fn pass(grid: &mut [u8], h: usize, w: usize, first: bool) -> bool {
    let at = |g: &[u8], y: isize, x: isize| -> u8 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0
        } else {
            g[y as usize * w + x as usize]
        }
    };
    let mut flagged = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(grid, y, x) == 0 {
                continue;
            }
            let p = [
                at(grid, y - 1, x),
                at(grid, y - 1, x + 1),
                at(grid, y, x + 1),
                at(grid, y + 1, x + 1),
                at(grid, y + 1, x),
                at(grid, y + 1, x - 1),
                at(grid, y, x - 1),
                at(grid, y - 1, x - 1),
            ];
            let b: u8 = p.iter().sum();
            if !(2..=6).contains(&b) {
                continue;
            }
            let transitions = (0..8).filter(|&i| p[i] == 0 && p[(i + 1) % 8] == 1).count();
            if transitions != 1 {
                continue;
            }
            let (c1, c2) = if first {
                (p[0] * p[2] * p[4], p[2] * p[4] * p[6])
            } else {
                (p[0] * p[2] * p[6], p[0] * p[4] * p[6])
            };
            if c1 == 0 && c2 == 0 {
                flagged.push(y as usize * w + x as usize);
            }
        }
    }
    let changed = !flagged.is_empty();
    for i in flagged {
        grid[i] = 0;
    }
    changed
}
