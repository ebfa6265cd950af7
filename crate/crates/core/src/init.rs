//! Variance-scaling initialization with truncated-normal draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FanMode {
    In,
    Out,
    Avg,
}

/// Standard deviation of a unit normal truncated to ±2.
const TRUNCATED_STD: f64 = 0.879_625_661_034_239_8;

/// `(fan_in, fan_out)` for kernels `(kh, kw, cin, cout)`, dense `(in, out)`
/// and vectors.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [i, o] => (*i, *o),
        _ => {
            let receptive: usize = shape[..shape.len() - 2].iter().product();
            let cin = shape[shape.len() - 2];
            let cout = shape[shape.len() - 1];
            (receptive * cin, receptive * cout)
        }
    }
}

/// Draws with variance `2 / fan`, where `fan` follows `mode`.
pub fn variance_scaling_init<R: Real>(shape: &[usize], mode: FanMode, seed: u64) -> Tensor<R> {
    let (fan_in, fan_out) = fans(shape);
    let fan = match mode {
        FanMode::In => fan_in,
        FanMode::Out => fan_out,
        FanMode::Avg => (fan_in + fan_out).div_ceil(2),
    };
    init_with_fan(shape, fan, seed)
}

/// Same as [`variance_scaling_init`] with an explicit fan; depthwise kernels
/// use `kh * kw` since each output sees a single input channel.
pub fn init_with_fan<R: Real>(shape: &[usize], fan: usize, seed: u64) -> Tensor<R> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = (2.0 / fan.max(1) as f64).sqrt() / TRUNCATED_STD;
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let z: f64 = StandardNormal.sample(&mut rng);
        if z.abs() <= 2.0 {
            break R::from_f64_lossy(z * std);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a: Tensor<f64> = variance_scaling_init(&[5, 5, 3, 8], FanMode::In, 42);
        let b: Tensor<f64> = variance_scaling_init(&[5, 5, 3, 8], FanMode::In, 42);
        let c: Tensor<f64> = variance_scaling_init(&[5, 5, 3, 8], FanMode::In, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empirical_variance_near_two_over_fan_in() {
        let shape = [7, 7, 3, 100]; // 14700 draws, fan_in 147
        let t: Tensor<f64> = variance_scaling_init(&shape, FanMode::In, 7);
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let want = 2.0 / 147.0;
        assert!((var - want).abs() < 0.2 * want, "var {var} vs {want}");
        let bound = 2.0 * (want.sqrt() / TRUNCATED_STD);
        assert!(t.data().iter().all(|v| v.abs() <= bound + 1e-12));
    }

    #[test]
    fn fan_computation() {
        assert_eq!(fans(&[7, 7, 3, 32]), (147, 1568));
        assert_eq!(fans(&[32, 512]), (32, 512));
    }
}
