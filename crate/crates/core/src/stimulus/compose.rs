use std::f64::consts::FRAC_PI_4;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{RgbImage, BACKGROUND, FOREGROUND, MARKER};
use super::path::{render_bar, render_disk, render_path, sample_path, PathSpec, Rect};
use crate::error::{Error, Result};
use crate::seed;

/// Independent whole-image retries after a path fails to generate.
pub const MAX_IMAGE_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    MarkedLong,
    PathFinder,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "markedlong" => Ok(DatasetKind::MarkedLong),
            "pathfinder" => Ok(DatasetKind::PathFinder),
            _ => Err(Error::InvalidArgument(format!("unknown dataset {s:?}"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::MarkedLong => "markedlong",
            DatasetKind::PathFinder => "pathfinder",
        })
    }
}

/// Step length scaled from 7 px on a 256 px canvas.
pub fn default_step(size: usize) -> f64 {
    7.0 * size as f64 / 256.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkedLongConfig {
    pub size: usize,
    pub long_bars: usize,
    pub short_bars: usize,
    pub distractor_bars: usize,
    /// Inclusive range of the distractor count.
    pub distractors: (usize, usize),
    pub step: f64,
    pub thickness: usize,
}

impl MarkedLongConfig {
    /// 256 px, paths of 18 and 12 bars, 6-bar distractors.
    pub fn paper() -> Self {
        Self::for_size(256)
    }

    /// 64 px, paths of 9 and 6 bars, 3-bar distractors.
    pub fn desk() -> Self {
        Self::for_size(64)
    }

    /// Paper path lengths from 128 px up, halved below.
    pub fn for_size(size: usize) -> Self {
        let (long_bars, short_bars, distractor_bars) = if size >= 128 { (18, 12, 6) } else { (9, 6, 3) };
        Self { size, long_bars, short_bars, distractor_bars, distractors: (1, 4), step: default_step(size), thickness: 1 }
    }

    pub fn primary_bars(&self) -> usize {
        self.long_bars + 3 * self.short_bars
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathFinderConfig {
    pub size: usize,
    pub main_bars: usize,
    pub distractor_bars: usize,
    pub distractors: (usize, usize),
    pub disk_radius: usize,
    pub step: f64,
    pub thickness: usize,
}

impl PathFinderConfig {
    /// 150 px, two 9-bar paths, 3 px disks.
    pub fn paper() -> Self {
        Self::for_size(150)
    }

    pub fn desk() -> Self {
        Self::for_size(64)
    }

    pub fn for_size(size: usize) -> Self {
        Self {
            size,
            main_bars: 9,
            distractor_bars: if size >= 128 { 6 } else { 3 },
            distractors: (1, 4),
            disk_radius: ((3.0 * size as f64 / 150.0).round() as usize).max(2),
            step: default_step(size),
            thickness: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dataset", rename_all = "lowercase")]
pub enum StimulusConfig {
    MarkedLong(MarkedLongConfig),
    PathFinder(PathFinderConfig),
}

impl StimulusConfig {
    pub fn kind(&self) -> DatasetKind {
        match self {
            StimulusConfig::MarkedLong(_) => DatasetKind::MarkedLong,
            StimulusConfig::PathFinder(_) => DatasetKind::PathFinder,
        }
    }

    pub fn size(&self) -> usize {
        match self {
            StimulusConfig::MarkedLong(c) => c.size,
            StimulusConfig::PathFinder(c) => c.size,
        }
    }

    pub fn for_kind(kind: DatasetKind, size: usize) -> Self {
        match kind {
            DatasetKind::MarkedLong => StimulusConfig::MarkedLong(MarkedLongConfig::for_size(size)),
            DatasetKind::PathFinder => StimulusConfig::PathFinder(PathFinderConfig::for_size(size)),
        }
    }

    pub fn compose(&self, seed: u64, positive: bool) -> Result<(RgbImage, StimulusMeta)> {
        match self {
            StimulusConfig::MarkedLong(c) => compose_markedlong(c, seed, positive),
            StimulusConfig::PathFinder(c) => compose_pathfinder(c, seed, positive),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusMeta {
    pub dataset: DatasetKind,
    pub positive: bool,
    pub seed: u64,
    /// Primary paths. MarkedLong: indexed by seed quadrant. PathFinder: the
    /// two main paths.
    pub paths: Vec<PathSpec>,
    pub distractors: Vec<PathSpec>,
    /// Bar count of each primary path.
    pub lengths: Vec<usize>,
    /// Quadrant of the long path (MarkedLong).
    pub long_quadrant: Option<usize>,
    /// Primary path carrying the marker bar (MarkedLong).
    pub marker_path: Option<usize>,
    /// Marker bar index within `marker_path` (MarkedLong).
    pub marker_index: Option<usize>,
    /// `(path, endpoint)` under each disk (PathFinder); endpoint 0 is the
    /// first point, 1 the last.
    pub disks: Vec<(usize, usize)>,
    pub disk_radius: Option<usize>,
    /// Whole-image retries after a failed path.
    pub resamples: usize,
}

impl StimulusMeta {
    pub fn n_distractors(&self) -> usize {
        self.distractors.len()
    }

    pub fn disk_centers(&self) -> Vec<[f64; 2]> {
        self.disks.iter().map(|&(p, e)| self.paths[p].endpoints()[e]).collect()
    }
}

fn with_retries<T>(seed: u64, mut f: impl FnMut(&mut ChaCha8Rng) -> Result<T>) -> Result<(T, usize)> {
    let mut last = None;
    for attempt in 0..MAX_IMAGE_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, attempt as u64));
        match f(&mut rng) {
            Ok(v) => return Ok((v, attempt)),
            Err(e @ Error::GenerationFailed { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or(Error::GenerationFailed { attempts: MAX_IMAGE_ATTEMPTS }))
}

const THETA_INIT: (f64, f64) = (0.0, FRAC_PI_4);

/// One MarkedLong image: a long path in quadrant `i_q^l`, a short path in
/// each other quadrant and 1-4 distractors anywhere. A positive image marks a
/// bar of the long path, a negative one a bar of a random short path.
pub fn compose_markedlong(cfg: &MarkedLongConfig, seed: u64, positive: bool) -> Result<(RgbImage, StimulusMeta)> {
    if cfg.thickness == 0 || cfg.size < 4 {
        return Err(Error::InvalidArgument("bad MarkedLong geometry".into()));
    }
    let bounds = Rect::canvas(cfg.size);
    let (meta, resamples) = with_retries(seed, |rng| {
        let long_q = rng.gen_range(0..4);
        let lengths: Vec<usize> = (0..4).map(|q| if q == long_q { cfg.long_bars } else { cfg.short_bars }).collect();
        let mut paths = Vec::with_capacity(4);
        // The long path is grown first, then the short ones in quadrant order.
        let order: Vec<usize> = std::iter::once(long_q).chain((0..4).filter(|&q| q != long_q)).collect();
        let mut grown: Vec<Option<PathSpec>> = vec![None; 4];
        for &q in &order {
            grown[q] = Some(sample_path(rng, Rect::quadrant(cfg.size, q), Some(q), lengths[q], cfg.step, bounds, THETA_INIT)?);
        }
        paths.extend(grown.into_iter().map(|p| p.expect("all quadrants grown")));
        let (marker_path, marker_index) = if positive {
            (long_q, rng.gen_range(0..cfg.long_bars))
        } else {
            let shorts: Vec<usize> = (0..4).filter(|&q| q != long_q).collect();
            (shorts[rng.gen_range(0..3)], rng.gen_range(0..cfg.short_bars))
        };
        let n_d = rng.gen_range(cfg.distractors.0..=cfg.distractors.1);
        let distractors = (0..n_d)
            .map(|_| sample_path(rng, bounds, None, cfg.distractor_bars, cfg.step, bounds, THETA_INIT))
            .collect::<Result<Vec<_>>>()?;
        Ok(StimulusMeta {
            dataset: DatasetKind::MarkedLong,
            positive,
            seed,
            paths,
            distractors,
            lengths,
            long_quadrant: Some(long_q),
            marker_path: Some(marker_path),
            marker_index: Some(marker_index),
            disks: Vec::new(),
            disk_radius: None,
            resamples: 0,
        })
    })?;
    let meta = StimulusMeta { resamples, ..meta };
    let img = render_markedlong(cfg, &meta)?;
    Ok((img, meta))
}

/// Paths and distractors in white, then the marker bar in red on top.
pub fn render_markedlong(cfg: &MarkedLongConfig, meta: &StimulusMeta) -> Result<RgbImage> {
    let mut img = RgbImage::new(cfg.size, cfg.size);
    for p in meta.paths.iter().chain(&meta.distractors) {
        render_path(&mut img, p, FOREGROUND, cfg.thickness)?;
    }
    if let (Some(mp), Some(mi)) = (meta.marker_path, meta.marker_index) {
        let (a, b) = meta.paths[mp].bar(mi);
        render_bar(&mut img, a, b, MARKER, cfg.thickness)?;
    }
    debug_assert!(img.histogram().iter().all(|(c, _)| [BACKGROUND, FOREGROUND, MARKER].contains(c)));
    Ok(img)
}

/// One PathFinder image: two main paths seeded in distinct random quadrants,
/// 1-4 distractors and two disks on path endpoints. Positive images put both
/// disks on the ends of one path, negative ones one disk on each path.
pub fn compose_pathfinder(cfg: &PathFinderConfig, seed: u64, positive: bool) -> Result<(RgbImage, StimulusMeta)> {
    if cfg.thickness == 0 || cfg.size < 4 {
        return Err(Error::InvalidArgument("bad PathFinder geometry".into()));
    }
    let bounds = Rect::canvas(cfg.size);
    let (meta, resamples) = with_retries(seed, |rng| {
        let qa = rng.gen_range(0..4);
        let qb = (qa + rng.gen_range(1..4)) % 4;
        let paths = [qa, qb]
            .into_iter()
            .map(|q| sample_path(rng, Rect::quadrant(cfg.size, q), Some(q), cfg.main_bars, cfg.step, bounds, THETA_INIT))
            .collect::<Result<Vec<_>>>()?;
        let disks = if positive {
            let p = rng.gen_range(0..2);
            vec![(p, 0), (p, 1)]
        } else {
            vec![(0, rng.gen_range(0..2)), (1, rng.gen_range(0..2))]
        };
        let n_d = rng.gen_range(cfg.distractors.0..=cfg.distractors.1);
        let distractors = (0..n_d)
            .map(|_| sample_path(rng, bounds, None, cfg.distractor_bars, cfg.step, bounds, THETA_INIT))
            .collect::<Result<Vec<_>>>()?;
        Ok(StimulusMeta {
            dataset: DatasetKind::PathFinder,
            positive,
            seed,
            lengths: vec![cfg.main_bars; 2],
            paths,
            distractors,
            long_quadrant: None,
            marker_path: None,
            marker_index: None,
            disks,
            disk_radius: Some(cfg.disk_radius),
            resamples: 0,
        })
    })?;
    let meta = StimulusMeta { resamples, ..meta };
    let img = render_pathfinder(cfg, &meta)?;
    Ok((img, meta))
}

pub fn render_pathfinder(cfg: &PathFinderConfig, meta: &StimulusMeta) -> Result<RgbImage> {
    let mut img = RgbImage::new(cfg.size, cfg.size);
    for p in meta.paths.iter().chain(&meta.distractors) {
        render_path(&mut img, p, FOREGROUND, cfg.thickness)?;
    }
    for c in meta.disk_centers() {
        render_disk(&mut img, c, cfg.disk_radius, FOREGROUND);
    }
    Ok(img)
}
