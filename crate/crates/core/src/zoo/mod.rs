//! Comparison architectures.
//!
//! Every model shares an input block (7x7x32 conv, max pool), a
//! per-architecture intermediate block and a readout (global average pool,
//! dense 512, dense 2, softmax).

mod dog;
mod gru;
mod model;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::v1net::V1NetConfig;

pub use dog::{dog_kernel, dog_kernel_bank, DEFAULT_SIGMAS};
pub use gru::{conv_gru_drive, conv_gru_step, conv_gru_step_with_drive, conv_gru_unroll, ConvGruVars};
pub use model::{build_model, count_params, BatchStats, ForwardOut, Mode, Model, Param, ParamGroup, ParamKind, TrainScope};

pub const NORM_MOMENTUM: f64 = 0.99;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "FF-1L")]
    Ff1L,
    #[serde(rename = "FF-4L")]
    Ff4L,
    #[serde(rename = "FF-7L")]
    Ff7L,
    #[serde(rename = "FF-7Lx2")]
    Ff7Lx2,
    #[serde(rename = "FF-SMCNN")]
    FfSmcnn,
    #[serde(rename = "ATR-1L")]
    Atr1L,
    #[serde(rename = "ATR-4L")]
    Atr4L,
    #[serde(rename = "ATR-7L")]
    Atr7L,
    #[serde(rename = "ATR-7Lx2")]
    Atr7Lx2,
    #[serde(rename = "GRU-1L")]
    Gru1L,
    #[serde(rename = "V1NET-1L")]
    V1Net1L,
}

impl Arch {
    pub const ALL: [Arch; 11] = [
        Arch::Ff1L,
        Arch::Ff4L,
        Arch::Ff7L,
        Arch::Ff7Lx2,
        Arch::FfSmcnn,
        Arch::Atr1L,
        Arch::Atr4L,
        Arch::Atr7L,
        Arch::Atr7Lx2,
        Arch::Gru1L,
        Arch::V1Net1L,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Arch::Ff1L => "FF-1L",
            Arch::Ff4L => "FF-4L",
            Arch::Ff7L => "FF-7L",
            Arch::Ff7Lx2 => "FF-7Lx2",
            Arch::FfSmcnn => "FF-SMCNN",
            Arch::Atr1L => "ATR-1L",
            Arch::Atr4L => "ATR-4L",
            Arch::Atr7L => "ATR-7L",
            Arch::Atr7Lx2 => "ATR-7Lx2",
            Arch::Gru1L => "GRU-1L",
            Arch::V1Net1L => "V1NET-1L",
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, Arch::Gru1L | Arch::V1Net1L)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownArch(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum LayerKind {
    /// Convolution + bias (+ norm) + ReLU, optionally followed by 2x2 max
    /// pooling. `dog_filters` of the output channels come from a fixed DoG
    /// bank.
    Conv { kernel: usize, n_out: usize, dilation: usize, max_pool: bool, dog_filters: usize },
    ConvGru { kernel: usize, n_out: usize, steps: usize },
    V1Net { config: V1NetConfig },
    Gap,
    Dense { n_out: usize, relu: bool },
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// Table row label this layer belongs to.
    pub row: usize,
    pub kind: LayerKind,
    /// Per-channel batch normalization after this layer.
    pub norm: bool,
}

impl LayerSpec {
    pub fn label(&self) -> String {
        match self.kind {
            LayerKind::Conv { kernel, n_out, dilation, max_pool, dog_filters } => {
                let name = match (dilation, dog_filters) {
                    (_, d) if d > 0 => "ConvSM",
                    (1, _) => "Conv",
                    _ => "AtrousConv",
                };
                let mut s = format!("{name}{kernel}x{kernel}x{n_out}");
                if dilation > 1 {
                    s.push_str(&format!("(d={dilation})"));
                }
                if max_pool {
                    s.push_str("+maxpool");
                }
                s
            }
            LayerKind::ConvGru { kernel, n_out, steps } => format!("ConvGRU{kernel}x{kernel}x{n_out}(T={steps})"),
            LayerKind::V1Net { config } => {
                format!("V1Net{k}x{k}x{w}(T={t})", k = config.input_kernel, w = config.width, t = config.steps)
            }
            LayerKind::Gap => "GAP".into(),
            LayerKind::Dense { n_out, .. } => format!("Dense{n_out}"),
            LayerKind::Softmax => "Softmax".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    /// `(h, w, c)` of one input image.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// The table layout for `arch` on `size x size` RGB input, with norm
    /// layers after the input block and each intermediate layer (V1Net keeps
    /// only its internal layer norm).
    pub fn for_arch(arch: Arch, size: usize) -> Self {
        let conv = |kernel, n_out, dilation, max_pool, dog_filters| LayerKind::Conv { kernel, n_out, dilation, max_pool, dog_filters };
        let dog = if arch == Arch::FfSmcnn { 16 } else { 0 };
        let mut layers = vec![LayerSpec { row: 1, kind: conv(7, 32, 1, true, dog), norm: true }];
        let (depth, width, dilation) = match arch {
            Arch::Ff1L => (1, 32, 1),
            Arch::Ff4L => (3, 32, 1),
            Arch::Ff7L | Arch::FfSmcnn => (5, 32, 1),
            Arch::Ff7Lx2 => (5, 64, 1),
            Arch::Atr1L => (1, 32, 2),
            Arch::Atr4L => (3, 32, 2),
            Arch::Atr7L => (5, 32, 2),
            Arch::Atr7Lx2 => (5, 64, 2),
            Arch::Gru1L | Arch::V1Net1L => (1, 32, 1),
        };
        match arch {
            Arch::Gru1L => layers.push(LayerSpec { row: 2, kind: LayerKind::ConvGru { kernel: 5, n_out: 32, steps: 5 }, norm: true }),
            Arch::V1Net1L => layers.push(LayerSpec { row: 2, kind: LayerKind::V1Net { config: V1NetConfig::new(32) }, norm: false }),
            _ => {
                for i in 0..depth {
                    layers.push(LayerSpec { row: 2 + i, kind: conv(5, width, dilation, false, 0), norm: true });
                }
            }
        }
        let row = depth + 2;
        for kind in [LayerKind::Gap, LayerKind::Dense { n_out: 512, relu: true }, LayerKind::Dense { n_out: 2, relu: false }, LayerKind::Softmax] {
            layers.push(LayerSpec { row, kind, norm: false });
        }
        Self { arch, input: [size, size, 3], layers }
    }

    /// Same layout with every norm layer removed.
    pub fn without_norm(mut self) -> Self {
        self.layers.iter_mut().for_each(|l| l.norm = false);
        self
    }

    pub fn layer_labels(&self) -> Vec<String> {
        self.layers.iter().map(LayerSpec::label).collect()
    }

    /// The V1Net configuration of the intermediate block, if any.
    pub fn v1net_config(&self) -> Option<V1NetConfig> {
        self.layers.iter().find_map(|l| match l.kind {
            LayerKind::V1Net { config } => Some(config),
            _ => None,
        })
    }

    /// Total depth as the number of table rows.
    pub fn depth(&self) -> usize {
        self.layers.iter().map(|l| l.row).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests;
