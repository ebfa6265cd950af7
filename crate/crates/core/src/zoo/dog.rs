//! Fixed difference-of-Gaussians surround-modulation kernels.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Centre/surround widths cycled across the fixed slots.
pub const DEFAULT_SIGMAS: [(f64, f64); 2] = [(1.0, 2.0), (1.5, 3.0)];

fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut g: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// One `size x size` kernel `G(σ_c) − G(σ_s)`, each Gaussian normalized to
/// unit sum so the kernel sums to zero.
pub fn dog_kernel(size: usize, sigma_center: f64, sigma_surround: f64) -> Result<Vec<f64>> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::InvalidArgument(format!("DoG size {size} must be odd")));
    }
    if !(sigma_center > 0.0 && sigma_center < sigma_surround) {
        return Err(Error::InvalidArgument(format!(
            "DoG needs 0 < sigma_center < sigma_surround, got ({sigma_center}, {sigma_surround})"
        )));
    }
    let c = gaussian(size, sigma_center);
    let s = gaussian(size, sigma_surround);
    Ok(c.iter().zip(&s).map(|(a, b)| a - b).collect())
}

/// `(size, size, in_channels, count)` bank cycling through `sigma_pairs`.
/// Each kernel is shared across input channels and divided by their count.
pub fn dog_kernel_bank<R: Real>(
    size: usize,
    sigma_pairs: &[(f64, f64)],
    count: usize,
    in_channels: usize,
) -> Result<Tensor<R>> {
    if sigma_pairs.is_empty() {
        return Err(Error::InvalidArgument("DoG bank needs at least one sigma pair".into()));
    }
    let kernels = sigma_pairs.iter().map(|&(c, s)| dog_kernel(size, c, s)).collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / in_channels as f64;
    Ok(Tensor::from_fn(vec![size, size, in_channels, count], |i| {
        let o = i % count;
        let pos = i / (count * in_channels);
        R::from_f64_lossy(kernels[o % kernels.len()][pos] * scale)
    }))
}
