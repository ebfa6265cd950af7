use std::f64::consts::FRAC_PI_4;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{Rgb, RgbImage};
use crate::error::{Error, Result};

/// Out-of-bounds candidates tolerated at one step before the path is reseeded.
pub const MAX_STEP_FAILURES: usize = 50;
/// Reseeds tolerated before giving up on a path.
pub const MAX_RESEEDS: usize = 100;

/// Source of uniform draws. Implemented for every [`rand::Rng`]; tests can
/// script the stream.
pub trait UniformSource {
    /// A draw from `[lo, hi)`.
    fn uniform(&mut self, lo: f64, hi: f64) -> f64;
}

impl<T: Rng + ?Sized> UniformSource for T {
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi > lo {
            self.gen_range(lo..hi)
        } else {
            lo
        }
    }
}

/// Axis-aligned region `[x0, x1] x [y0, y1]` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    /// The whole canvas, as valid point coordinates.
    pub fn canvas(size: usize) -> Self {
        let m = size as f64 - 1.0;
        Self { x0: 0.0, y0: 0.0, x1: m, y1: m }
    }

    /// Quadrant `q` of the canvas: 0 top-left, 1 top-right, 2 bottom-left,
    /// 3 bottom-right (y grows downwards).
    pub fn quadrant(size: usize, q: usize) -> Self {
        let half = size as f64 / 2.0;
        let m = size as f64 - 1.0;
        let (x0, x1) = if q % 2 == 0 { (0.0, half) } else { (half, m) };
        let (y0, y1) = if q < 2 { (0.0, half) } else { (half, m) };
        Self { x0, y0, x1, y1 }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    /// Quadrant index of `p` on a `size` canvas.
    pub fn quadrant_of(size: usize, p: [f64; 2]) -> usize {
        let half = size as f64 / 2.0;
        (p[0] >= half) as usize + 2 * (p[1] >= half) as usize
    }
}

/// A smooth path of `2n` points; bar `i` joins points `2i` and `2i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub points: Vec<[f64; 2]>,
    /// `angles[i]` is the heading from `points[i]` to `points[i + 1]`.
    pub angles: Vec<f64>,
    pub step: f64,
    pub n: usize,
    /// Quadrant the seed was drawn from, if seeded in one.
    pub quadrant: Option<usize>,
    /// Reseeds needed before the path was accepted.
    pub reseeds: usize,
}

impl PathSpec {
    pub fn bar(&self, i: usize) -> ([f64; 2], [f64; 2]) {
        (self.points[2 * i], self.points[2 * i + 1])
    }

    pub fn endpoints(&self) -> [[f64; 2]; 2] {
        [self.points[0], *self.points.last().expect("non-empty path")]
    }
}

/// Grows a path of `n` bars with step `r` from a seed drawn uniformly in
/// `seed_region`. The first heading is drawn from `theta_init` and each
/// following heading within ±π/4 of the previous one. A candidate point
/// outside `bounds` discards the latest accepted point and the walk resumes
/// from the one before; after [`MAX_STEP_FAILURES`] rejections at the
/// same step the path is reseeded. Counts are not reset when the walk comes
/// back to a step, so a walk that keeps bouncing off an edge still terminates.
pub fn sample_path<U: UniformSource + ?Sized>(
    rng: &mut U,
    seed_region: Rect,
    quadrant: Option<usize>,
    n: usize,
    r: f64,
    bounds: Rect,
    theta_init: (f64, f64),
) -> Result<PathSpec> {
    if n == 0 {
        return Err(Error::InvalidArgument("a path needs at least one bar".into()));
    }
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(format!("step length {r} must be positive")));
    }
    if !(seed_region.x1 >= seed_region.x0 && seed_region.y1 >= seed_region.y0) {
        return Err(Error::InvalidArgument("degenerate seed region".into()));
    }
    let target = 2 * n;
    for reseed in 0..=MAX_RESEEDS {
        let p0 = [rng.uniform(seed_region.x0, seed_region.x1), rng.uniform(seed_region.y0, seed_region.y1)];
        let mut points = vec![p0];
        let mut angles: Vec<f64> = Vec::with_capacity(target - 1);
        let mut failures = vec![0usize; target];
        while points.len() < target && failures[points.len()] < MAX_STEP_FAILURES {
            let theta = match angles.last() {
                None => rng.uniform(theta_init.0, theta_init.1),
                Some(&prev) => rng.uniform(prev - FRAC_PI_4, prev + FRAC_PI_4),
            };
            let last = *points.last().expect("seeded");
            let cand = [last[0] + r * theta.cos(), last[1] + r * theta.sin()];
            if bounds.contains(cand) {
                points.push(cand);
                angles.push(theta);
            } else {
                failures[points.len()] += 1;
                if points.len() > 1 && failures[points.len()] < MAX_STEP_FAILURES {
                    points.pop();
                    angles.pop();
                }
            }
        }
        if points.len() == target {
            return Ok(PathSpec { points, angles, step: r, n, quadrant, reseeds: reseed });
        }
    }
    Err(Error::GenerationFailed { attempts: MAX_RESEEDS + 1 })
}

/// Pixels of the integer line between the rounded endpoints, with each
/// point stamped as a `thickness x thickness` square.
pub fn bar_pixels(a: [f64; 2], b: [f64; 2], thickness: usize) -> Vec<(i64, i64)> {
    let (mut x0, mut y0) = (a[0].round() as i64, a[1].round() as i64);
    let (x1, y1) = (b[0].round() as i64, b[1].round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let lo = -((thickness as i64 - 1) / 2);
    let hi = lo + thickness as i64;
    let mut out = Vec::new();
    loop {
        for oy in lo..hi {
            for ox in lo..hi {
                out.push((x0 + ox, y0 + oy));
            }
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

pub fn render_bar(canvas: &mut RgbImage, a: [f64; 2], b: [f64; 2], color: Rgb, thickness: usize) -> Result<()> {
    if thickness == 0 {
        return Err(Error::InvalidArgument("bar thickness must be positive".into()));
    }
    for (x, y) in bar_pixels(a, b, thickness) {
        canvas.put(x, y, color);
    }
    Ok(())
}

/// Draws the path's bars; the gaps between bars stay untouched.
pub fn render_path(canvas: &mut RgbImage, path: &PathSpec, color: Rgb, thickness: usize) -> Result<()> {
    for i in 0..path.n {
        let (a, b) = path.bar(i);
        render_bar(canvas, a, b, color, thickness)?;
    }
    Ok(())
}

/// Filled disk of the given radius around `c`.
pub fn render_disk(canvas: &mut RgbImage, c: [f64; 2], radius: usize, color: Rgb) {
    let (cx, cy) = (c[0].round() as i64, c[1].round() as i64);
    let r = radius as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                canvas.put(cx + dx, cy + dy, color);
            }
        }
    }
}
