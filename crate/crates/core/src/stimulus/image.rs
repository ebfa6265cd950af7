use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub type Rgb = [u8; 3];

pub const BACKGROUND: Rgb = [0, 0, 0];
pub const FOREGROUND: Rgb = [255, 255, 255];
pub const MARKER: Rgb = [255, 0, 0];

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!("{} bytes for a {width}x{height} RGB image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Writes a pixel; coordinates outside the canvas are ignored.
    pub fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.data[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize, Rgb)> + '_ {
        self.data.chunks_exact(3).enumerate().map(|(i, p)| (i % self.width, i / self.width, [p[0], p[1], p[2]]))
    }

    /// Pixel counts for each distinct color, sorted by color.
    pub fn histogram(&self) -> Vec<(Rgb, usize)> {
        let mut m = std::collections::BTreeMap::new();
        for (_, _, c) in self.pixels() {
            *m.entry(c).or_insert(0) += 1;
        }
        m.into_iter().collect()
    }

    /// 8-bit RGB PNG, no interlacing.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header()?;
            w.write_image_data(&self.data)?;
        }
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let mut dec = png::Decoder::new(bytes);
        dec.set_transformations(png::Transformations::EXPAND);
        let mut reader = dec.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf)?;
        buf.truncate(info.buffer_size());
        let (w, h) = (info.width as usize, info.height as usize);
        let data = match info.color_type {
            png::ColorType::Rgb => buf,
            png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
        };
        Self::from_raw(w, h, data)
    }

    /// Channels scaled to `[0, 1]`, shape `(h, w, 3)`.
    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        let scale = 1.0 / 255.0;
        Tensor::from_fn(vec![self.height, self.width, 3], |i| R::from_f64_lossy(self.data[i] as f64 * scale))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipMode {
    H,
    V,
    Hv,
}

impl std::str::FromStr for FlipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h" => Ok(FlipMode::H),
            "v" => Ok(FlipMode::V),
            "hv" => Ok(FlipMode::Hv),
            _ => Err(Error::InvalidArgument(format!("unknown flip mode {s:?}"))),
        }
    }
}

/// Mirrors left-right (`H`), top-bottom (`V`) or both.
pub fn augment_flip(img: &RgbImage, mode: FlipMode) -> RgbImage {
    let (w, h) = (img.width, img.height);
    let (fx, fy) = match mode {
        FlipMode::H => (true, false),
        FlipMode::V => (false, true),
        FlipMode::Hv => (true, true),
    };
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let sx = if fx { w - 1 - x } else { x };
            let sy = if fy { h - 1 - y } else { y };
            let c = img.get(sx, sy);
            out.put(x as i64, y as i64, c);
        }
    }
    out
}
