//! Activation dumps of the recurrent block and PCA of the horizontal
//! kernel banks.

mod activations;
mod pca;

pub use activations::{dump_activations, hidden_states, normalize_map, ActivationTrace, DEFAULT_CHANNELS, RAW_FILE, TRACE_FILE};
pub use pca::{
    bank_members, horizontal_banks, kernel_pca, read_gallery_annotations, render_pc_gallery, GalleryRow, PcaResult,
    GALLERY_JSON, GALLERY_PNG,
};

#[cfg(test)]
mod tests;
