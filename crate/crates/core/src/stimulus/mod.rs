//! MarkedLong and PathFinder stimulus synthesis.
//!
//! Paths are grown bar by bar with bounded heading changes, rasterized
//! without antialiasing and composed into class-conditional images. Every
//! image has its own random stream derived from `(base_seed, index)`, so any
//! image can be regenerated alone and output never depends on thread count.

mod compose;
mod dataset;
mod image;
mod path;

pub use compose::{
    compose_markedlong, compose_pathfinder, default_step, render_markedlong, render_pathfinder, DatasetKind,
    MarkedLongConfig, PathFinderConfig, StimulusConfig, StimulusMeta, MAX_IMAGE_ATTEMPTS,
};
pub use dataset::{
    assignment, regenerate_png, render_item, write_dataset, DatasetConfig, DatasetIndex, IndexRecord, Split, CONFIG_FILE,
    INDEX_FILE,
};
pub use image::{augment_flip, FlipMode, Rgb, RgbImage, BACKGROUND, FOREGROUND, MARKER};
pub use path::{
    bar_pixels, render_bar, render_disk, render_path, sample_path, PathSpec, Rect, UniformSource, MAX_STEP_FAILURES,
    MAX_RESEEDS,
};
