use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::compose::{StimulusConfig, StimulusMeta};
use super::image::{augment_flip, FlipMode, RgbImage};
use crate::error::{Error, Result};
use crate::seed;

pub const INDEX_FILE: &str = "index.jsonl";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub stimulus: StimulusConfig,
    pub count_per_class: usize,
    pub base_seed: u64,
    /// Fraction of each class assigned to the training split.
    pub train_fraction: f64,
    /// Store each image under a seed-chosen flip (or none).
    #[serde(default)]
    pub augment: bool,
}

impl DatasetConfig {
    pub fn len(&self) -> usize {
        2 * self.count_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.count_per_class == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::InvalidArgument(format!("split fraction {} outside [0, 1]", self.train_fraction)));
        }
        Ok(())
    }
}

/// One line of the index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub idx: usize,
    /// Image path relative to the dataset directory.
    pub path: String,
    /// 1 for positive, 0 for negative.
    pub label: u8,
    pub seed: u64,
    #[serde(rename = "i_q_l")]
    pub long_quadrant: Option<usize>,
    #[serde(rename = "i_m")]
    pub marker_index: Option<usize>,
    #[serde(rename = "n_d")]
    pub n_distractors: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip: Option<FlipMode>,
}

/// Label and split of image `idx`: labels alternate, and the first
/// `round(count * fraction)` images of each class go to training.
pub fn assignment(cfg: &DatasetConfig, idx: usize) -> (bool, Split) {
    let positive = idx % 2 == 0;
    let rank = idx / 2;
    let n_train = (cfg.count_per_class as f64 * cfg.train_fraction).round() as usize;
    (positive, if rank < n_train { Split::Train } else { Split::Val })
}

fn flip_for(seed: u64) -> Option<FlipMode> {
    match seed::derive(seed, 0xF11F) % 4 {
        0 => None,
        1 => Some(FlipMode::H),
        2 => Some(FlipMode::V),
        _ => Some(FlipMode::Hv),
    }
}

/// Renders image `idx` of the dataset from scratch.
pub fn render_item(cfg: &DatasetConfig, idx: usize) -> Result<(IndexRecord, RgbImage, StimulusMeta)> {
    let (positive, split) = assignment(cfg, idx);
    let image_seed = seed::derive(cfg.base_seed, idx as u64);
    let (mut img, meta) = cfg.stimulus.compose(image_seed, positive)?;
    let flip = if cfg.augment { flip_for(image_seed) } else { None };
    if let Some(mode) = flip {
        img = augment_flip(&img, mode);
    }
    let label_dir = if positive { "positive" } else { "negative" };
    let record = IndexRecord {
        idx,
        path: format!("images/{}/{label_dir}/{idx}.png", split.name()),
        label: positive as u8,
        seed: image_seed,
        long_quadrant: meta.long_quadrant,
        marker_index: meta.marker_index,
        n_distractors: meta.n_distractors(),
        split,
        flip,
    };
    Ok((record, img, meta))
}

/// Regenerates the PNG bytes of an indexed image.
pub fn regenerate_png(cfg: &DatasetConfig, record: &IndexRecord) -> Result<Vec<u8>> {
    render_item(cfg, record.idx)?.1.to_png()
}

/// Writes `count_per_class` images per class, the index and the config.
/// Images are rendered by `workers` threads; output does not depend on it.
pub fn write_dataset(dir: impl AsRef<Path>, cfg: &DatasetConfig, workers: usize) -> Result<Vec<IndexRecord>> {
    cfg.validate()?;
    let dir = dir.as_ref();
    for split in ["train", "val"] {
        for label in ["positive", "negative"] {
            fs::create_dir_all(dir.join("images").join(split).join(label))?;
        }
    }
    let total = cfg.len();
    let workers = workers.clamp(1, total.max(1));
    let mut records: Vec<IndexRecord> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || -> Result<Vec<IndexRecord>> {
                    let mut out = Vec::new();
                    for idx in (w..total).step_by(workers) {
                        let (rec, img, _) = render_item(cfg, idx)?;
                        fs::write(dir.join(&rec.path), img.to_png()?)?;
                        out.push(rec);
                    }
                    Ok(out)
                })
            })
            .collect();
        let mut all = Vec::with_capacity(total);
        for h in handles {
            all.extend(h.join().expect("generator thread panicked")?);
        }
        Ok::<_, Error>(all)
    })?;
    records.sort_by_key(|r| r.idx);
    let mut w = BufWriter::new(fs::File::create(dir.join(INDEX_FILE))?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_vec_pretty(cfg)?)?;
    Ok(records)
}

/// A dataset directory written by [`write_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub config: DatasetConfig,
    pub records: Vec<IndexRecord>,
}

impl DatasetIndex {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let bad = |detail: String| Error::Dataset { path: root.clone(), detail };
        let config: DatasetConfig = serde_json::from_slice(&fs::read(root.join(CONFIG_FILE))?)?;
        let file = fs::File::open(root.join(INDEX_FILE))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: IndexRecord = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
            if r.label > 1 {
                return Err(bad(format!("line {}: label {}", n + 1, r.label)));
            }
            records.push(r);
        }
        if records.is_empty() {
            return Err(bad("empty index".into()));
        }
        Ok(Self { root, config, records })
    }

    pub fn split(&self, split: Split) -> Vec<&IndexRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn image_path(&self, r: &IndexRecord) -> PathBuf {
        self.root.join(&r.path)
    }

    pub fn load_image(&self, r: &IndexRecord) -> Result<RgbImage> {
        let img = RgbImage::from_png(&fs::read(self.image_path(r))?)?;
        let s = self.config.stimulus.size();
        if img.width() != s || img.height() != s {
            return Err(Error::Dataset { path: self.image_path(r), detail: format!("{}x{} image, expected {s}x{s}", img.width(), img.height()) });
        }
        Ok(img)
    }
}
