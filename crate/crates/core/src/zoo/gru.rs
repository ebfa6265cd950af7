//! Convolutional GRU.
//!
//! ```text
//! r  = σ(Wx_r * x + U_r * h + b_r)
//! u  = σ(Wx_u * x + U_u * h + b_u)
//! h̃  = tanh(Wx_c * x + U_c * (r ⊙ h) + b_c)
//! h' = u ⊙ h + (1 − u) ⊙ h̃
//! ```

use crate::autodiff::{Conv2dCfg, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Graph handles of one cell. Gate stacks are `[r | u]` and `[r | u | c]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvGruVars {
    /// `(kh, kw, cin, 3k)`.
    pub wx: Var,
    /// `(kh, kw, k, 2k)`.
    pub u_gates: Var,
    /// `(kh, kw, k, k)`.
    pub u_cand: Var,
    /// `(3k)`.
    pub bias: Var,
}

/// Input contribution `Wx * x + b`, shared by every step.
pub fn conv_gru_drive<R: Real>(g: &mut Graph<R>, p: &ConvGruVars, x: Var) -> Result<Var> {
    let a = g.conv2d(x, p.wx, Conv2dCfg::same())?;
    g.bias_add(a, p.bias)
}

pub fn conv_gru_step_with_drive<R: Real>(g: &mut Graph<R>, p: &ConvGruVars, drive: Var, h_prev: Var) -> Result<Var> {
    let [_, _, _, c3] = g.value(drive).dims4()?;
    let k = c3 / 3;
    let [n, h, w, kh] = g.value(h_prev).dims4()?;
    let [dn, dh, dw, _] = g.value(drive).dims4()?;
    if c3 % 3 != 0 || kh != k || (n, h, w) != (dn, dh, dw) {
        return Err(Error::shape(
            "conv_gru_step",
            format!("drive {:?} vs state {:?}", g.value(drive).shape(), g.value(h_prev).shape()),
        ));
    }
    let dx_gates = g.slice_channels(drive, 0, 2 * k)?;
    let dx_cand = g.slice_channels(drive, 2 * k, k)?;
    let rec = g.conv2d(h_prev, p.u_gates, Conv2dCfg::same())?;
    let pre = g.add(dx_gates, rec)?;
    let gates = g.sigmoid(pre)?;
    let r = g.slice_channels(gates, 0, k)?;
    let u = g.slice_channels(gates, k, k)?;
    let rh = g.mul(r, h_prev)?;
    let rc = g.conv2d(rh, p.u_cand, Conv2dCfg::same())?;
    let pre_c = g.add(dx_cand, rc)?;
    let cand = g.tanh(pre_c)?;
    let keep = g.mul(u, h_prev)?;
    let ones = g.constant(Tensor::ones(g.value(u).shape().to_vec()))?;
    let write_gate = g.sub(ones, u)?;
    let write = g.mul(write_gate, cand)?;
    g.add(keep, write)
}

pub fn conv_gru_step<R: Real>(g: &mut Graph<R>, p: &ConvGruVars, x: Var, h_prev: Var) -> Result<Var> {
    let drive = conv_gru_drive(g, p, x)?;
    conv_gru_step_with_drive(g, p, drive, h_prev)
}

/// `steps` iterations on a static input from the zero state; returns every
/// hidden state.
pub fn conv_gru_unroll<R: Real>(g: &mut Graph<R>, p: &ConvGruVars, x: Var, steps: usize) -> Result<Vec<Var>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("unroll needs at least one step".into()));
    }
    let drive = conv_gru_drive(g, p, x)?;
    let [n, h, w, c3] = g.value(drive).dims4()?;
    let mut state = g.constant(Tensor::zeros(vec![n, h, w, c3 / 3]))?;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        state = conv_gru_step_with_drive(g, p, drive, state)?;
        out.push(state);
    }
    Ok(out)
}
