use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::v1net::V1NetParams;

/// Principal components of a bank of spatial kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub kh: usize,
    pub kw: usize,
    /// Mean kernel, flattened row-major.
    pub mean: Vec<f64>,
    /// Unit-norm components, flattened row-major, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues matching `components`.
    pub eigenvalues: Vec<f64>,
    /// Share of the total variance per component; sums to one.
    pub ratios: Vec<f64>,
}

impl PcaResult {
    pub fn cumulative(&self, k: usize) -> f64 {
        self.ratios.iter().take(k).sum()
    }

    /// Coordinates of a flattened kernel in the component basis.
    pub fn project(&self, kernel: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(kernel).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &w) in self.components.iter().zip(coords) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += w * v;
            }
        }
        out
    }
}

/// Splits a `(kh, kw, k)` or `(kh, kw, k, 1)` bank into `k` flattened
/// kernels.
pub fn bank_members<R: Real>(bank: &Tensor<R>) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let s = bank.shape();
    let (kh, kw, k) = match *s {
        [kh, kw, k] | [kh, kw, k, 1] => (kh, kw, k),
        _ => return Err(Error::shape("kernel_pca", format!("bank shape {s:?}, expected (kh, kw, k)"))),
    };
    let d = bank.data();
    let members = (0..k).map(|m| (0..kh * kw).map(|p| d[p * k + m].to_f64_lossy()).collect()).collect();
    Ok((kh, kw, members))
}

/// PCA over the flattened, mean-subtracted kernels of a bank via
/// eigendecomposition of their covariance. A bank without variance yields a
/// single component carrying all of it.
pub fn kernel_pca<R: Real>(bank: &Tensor<R>) -> Result<PcaResult> {
    let (kh, kw, members) = bank_members(bank)?;
    let n = members.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 kernels, got {n}")));
    }
    let d = kh * kw;
    let mean: Vec<f64> = (0..d).map(|j| members.iter().map(|m| m[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| members[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let components: Vec<Vec<f64>> = order.iter().map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
    let total: f64 = eigenvalues.iter().sum();
    let ratios = if total > 0.0 {
        eigenvalues.iter().map(|v| v / total).collect()
    } else {
        (0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect()
    };
    Ok(PcaResult { kh, kw, mean, components, eigenvalues, ratios })
}

/// Names and spatial banks of the three horizontal connection types.
pub fn horizontal_banks<R: Real>(p: &V1NetParams<R>) -> [(&'static str, Tensor<R>); 3] {
    [
        ("excitatory", p.w_exc.depthwise.clone()),
        ("inhibitory", p.w_inh.depthwise.clone()),
        ("divisive", p.w_div.depthwise.clone()),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryRow {
    pub name: String,
    pub ratios: Vec<f64>,
    pub cumulative_top4: f64,
}

const CELL_SCALE: usize = 8;
const GAP: usize = 2;

fn ratio_key(row: usize, col: usize) -> String {
    format!("ratio_r{row}_c{col}")
}

/// Draws the top `top` components of each bank as one row of a grid PNG,
/// with each ratio stored in a text chunk, and writes the same ratios as
/// JSON. Returns the rows written.
pub fn render_pc_gallery(results: &[(String, PcaResult)], top: usize, out_dir: impl AsRef<Path>) -> Result<Vec<GalleryRow>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    if results.is_empty() || top == 0 {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    let cell = results.iter().map(|(_, r)| r.kh.max(r.kw)).max().unwrap_or(1) * CELL_SCALE;
    let cols = top.min(results.iter().map(|(_, r)| r.components.len()).max().unwrap_or(0));
    let width = cols * cell + (cols + 1) * GAP;
    let height = results.len() * cell + (results.len() + 1) * GAP;
    let mut px = vec![64u8; width * height];
    let mut rows = Vec::new();
    let mut texts = Vec::new();
    for (ri, (name, r)) in results.iter().enumerate() {
        for (ci, comp) in r.components.iter().take(cols).enumerate() {
            let amp = comp.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let (oy, ox) = (GAP + ri * (cell + GAP), GAP + ci * (cell + GAP));
            let (py, pxo) = ((cell - r.kh * CELL_SCALE) / 2, (cell - r.kw * CELL_SCALE) / 2);
            for y in 0..r.kh * CELL_SCALE {
                for x in 0..r.kw * CELL_SCALE {
                    let v = comp[(y / CELL_SCALE) * r.kw + x / CELL_SCALE];
                    let g = if amp > 0.0 { 127.5 + 127.5 * v / amp } else { 127.5 };
                    px[(oy + py + y) * width + ox + pxo + x] = g.round().clamp(0.0, 255.0) as u8;
                }
            }
            texts.push((ratio_key(ri, ci), format!("{:?}", r.ratios[ci])));
        }
        texts.push((format!("row{ri}"), name.clone()));
        rows.push(GalleryRow { name: name.clone(), ratios: r.ratios.clone(), cumulative_top4: r.cumulative(4) });
    }
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in texts {
            enc.add_text_chunk(k, v)?;
        }
        let mut w = enc.write_header()?;
        w.write_image_data(&px)?;
    }
    std::fs::write(out_dir.join(GALLERY_PNG), bytes)?;
    std::fs::write(out_dir.join(GALLERY_JSON), serde_json::to_vec_pretty(&rows)?)?;
    Ok(rows)
}

pub const GALLERY_PNG: &str = "pca_gallery.png";
pub const GALLERY_JSON: &str = "pca_ratios.json";

/// Reads the row names and per-cell ratios back from a gallery PNG.
pub fn read_gallery_annotations(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let dec = png::Decoder::new(bytes);
    let reader = dec.read_info()?;
    let info = reader.info();
    let texts: Vec<(String, String)> =
        info.uncompressed_latin1_text.iter().map(|t| (t.keyword.clone(), t.text.clone())).collect();
    let n_rows = texts.iter().filter(|(k, _)| k.starts_with("row")).count();
    let mut ratios = vec![Vec::new(); n_rows];
    for (ri, row) in ratios.iter_mut().enumerate() {
        for ci in 0.. {
            match texts.iter().find(|(k, _)| *k == ratio_key(ri, ci)) {
                Some((_, v)) => row.push(v.parse().map_err(|_| Error::Png(format!("bad ratio {v:?}")))?),
                None => break,
            }
        }
    }
    Ok((info.width as usize, info.height as usize, ratios))
}
