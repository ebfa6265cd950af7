use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::stimulus::RgbImage;
use crate::tensor::Tensor;
use crate::zoo::{Mode, Model};

/// Channels shown by default.
pub const DEFAULT_CHANNELS: [usize; 2] = [5, 28];
pub const TRACE_FILE: &str = "trace.json";
pub const RAW_FILE: &str = "activations.ckpt";

/// Hidden-state maps of selected channels at every recurrent step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub image_id: String,
    pub channels: Vec<usize>,
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    /// `maps[c][t]` is channel `channels[c]` after step `t + 1`, row-major.
    #[serde(skip)]
    pub maps: Vec<Vec<Vec<f32>>>,
    /// Image files written, in `(channel, step)` order.
    pub files: Vec<String>,
}

/// Hidden states `(1, h, w, k)` of the recurrent block after each step, in
/// evaluation mode.
pub fn hidden_states(model: &Model<f32>, image: &RgbImage) -> Result<Vec<Tensor<f32>>> {
    let [h, w, _] = model.spec.input;
    if image.width() != w || image.height() != h {
        return Err(Error::shape("hidden_states", format!("{}x{} image for a {w}x{h} model", image.width(), image.height())));
    }
    let mut g = Graph::new();
    let vars = model.bind(&mut g, None)?;
    let x = image.to_tensor::<f32>().reshape(vec![1, h, w, 3])?;
    let xv = g.constant(x)?;
    let out = model.forward(&mut g, &vars, xv, Mode::Eval)?;
    if out.hidden.is_empty() {
        return Err(Error::InvalidArgument(format!("{} has no recurrent block", model.spec.arch)));
    }
    Ok(out.hidden.iter().map(|&v| g.value(v).clone()).collect())
}

/// Per-map min-max scaling to 8 bits; a constant map becomes black.
pub fn normalize_map(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

fn gray_png(width: usize, height: usize, px: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(px)?;
    }
    Ok(out)
}

/// Writes one normalized grayscale PNG per (channel, step), the raw maps as
/// a lossless parameter file and a JSON manifest.
pub fn dump_activations(
    model: &Model<f32>,
    image: &RgbImage,
    image_id: &str,
    channels: &[usize],
    out_dir: impl AsRef<Path>,
) -> Result<ActivationTrace> {
    let states = hidden_states(model, image)?;
    let [_, height, width, k] = states[0].dims4()?;
    if let Some(&c) = channels.iter().find(|&&c| c >= k) {
        return Err(Error::InvalidArgument(format!("channel {c} out of range for {k} hidden channels")));
    }
    if channels.is_empty() {
        return Err(Error::InvalidArgument("no channels selected".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut raw = Checkpoint::new(serde_json::json!({ "image_id": image_id, "channels": channels, "steps": states.len() }));
    let mut maps = Vec::new();
    let mut files = Vec::new();
    for &c in channels {
        let mut per_t = Vec::new();
        for (t, s) in states.iter().enumerate() {
            let m: Vec<f32> = s.data().iter().skip(c).step_by(k).copied().collect();
            let name = format!("h{c}_t{}.png", t + 1);
            std::fs::write(out_dir.join(&name), gray_png(width, height, &normalize_map(&m))?)?;
            raw.push(format!("h{c}/t{}", t + 1), &Tensor::new(vec![height, width], m.clone())?);
            files.push(name);
            per_t.push(m);
        }
        maps.push(per_t);
    }
    raw.save(out_dir.join(RAW_FILE))?;
    let trace = ActivationTrace { image_id: image_id.to_string(), channels: channels.to_vec(), steps: states.len(), height, width, maps, files };
    std::fs::write(out_dir.join(TRACE_FILE), serde_json::to_vec_pretty(&trace)?)?;
    Ok(trace)
}
