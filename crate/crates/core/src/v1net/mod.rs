//! The V1Net recurrent cell.
//!
//! ConvLSTM gating plus three horizontal pathways driven by the previous
//! hidden state: additive excitation, subtractive inhibition and divisive
//! gain control. One step computes, with `*d` a depthwise-separable
//! convolution (biases added after the pointwise stage):
//!
//! ```text
//! (f, i, o, g) = σ(W_xh *d X + U_hh *d H_prev)
//! H_exc        = σ(W_exc *d H_prev)
//! H_inh        = σ(W_inh *d H_prev)
//! H_div        = σ(W_div *d H_prev)
//! c̃            = H_div ⊙ (g + H_exc) − H_inh
//! c            = f ⊙ c_prev + i ⊙ tanh(c̃)
//! H            = o ⊙ relu(LN(c))
//! ```
//!
//! `g` goes through a sigmoid like the other gates. A single layer-norm
//! `gamma`/`beta` pair is shared by every step, so a cell trained with one
//! step count runs with any other.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dCfg, Graph, Var};
use crate::error::{Error, Result};
use crate::init::init_with_fan;
use crate::seed;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct V1NetConfig {
    /// Channel count `k` of the input, hidden state and cell state.
    pub width: usize,
    pub input_kernel: usize,
    pub exc_kernel: usize,
    pub inhdiv_kernel: usize,
    pub steps: usize,
    pub ln_eps: f64,
    /// Stop gradients through the layer-norm mean and variance. Only used to
    /// measure the spatial reach of the horizontal pathways.
    #[serde(default)]
    pub detach_ln_stats: bool,
}

impl V1NetConfig {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            input_kernel: 5,
            exc_kernel: 15,
            inhdiv_kernel: 7,
            steps: 5,
            ln_eps: 1e-5,
            detach_ln_stats: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::InvalidArgument("V1Net width must be positive".into()));
        }
        for (name, k) in [("input", self.input_kernel), ("excitatory", self.exc_kernel), ("inhibitory/divisive", self.inhdiv_kernel)] {
            if k % 2 == 0 {
                return Err(Error::InvalidArgument(format!("{name} kernel size {k} must be odd")));
            }
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("V1Net needs at least one step".into()));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::InvalidArgument("layer-norm eps must be positive".into()));
        }
        Ok(())
    }
}

/// Depthwise `(kh, kw, cin, 1)` kernel followed by pointwise `(1, 1, cin, cout)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableKernel<R: Real> {
    pub depthwise: Tensor<R>,
    pub pointwise: Tensor<R>,
}

impl<R: Real> SeparableKernel<R> {
    fn init(size: usize, cin: usize, cout: usize, seed: u64) -> Self {
        Self {
            depthwise: init_with_fan(&[size, size, cin, 1], size * size, seed::derive(seed, 0)),
            pointwise: init_with_fan(&[1, 1, cin, cout], cin, seed::derive(seed, 1)),
        }
    }

    pub fn len(&self) -> usize {
        self.depthwise.len() + self.pointwise.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct V1NetParams<R: Real> {
    pub w_xh: SeparableKernel<R>,
    pub u_hh: SeparableKernel<R>,
    /// `4k` biases for the f, i, o, g stacks.
    pub gate_bias: Tensor<R>,
    pub w_exc: SeparableKernel<R>,
    pub exc_bias: Tensor<R>,
    pub w_inh: SeparableKernel<R>,
    pub inh_bias: Tensor<R>,
    pub w_div: SeparableKernel<R>,
    pub div_bias: Tensor<R>,
    pub ln_gamma: Tensor<R>,
    pub ln_beta: Tensor<R>,
}

/// Parameter names, in the order used by [`V1NetParams::tensors`].
pub const PARAM_NAMES: [&str; 16] = [
    "w_xh/depthwise",
    "w_xh/pointwise",
    "u_hh/depthwise",
    "u_hh/pointwise",
    "gate_bias",
    "w_exc/depthwise",
    "w_exc/pointwise",
    "exc_bias",
    "w_inh/depthwise",
    "w_inh/pointwise",
    "inh_bias",
    "w_div/depthwise",
    "w_div/pointwise",
    "div_bias",
    "ln_gamma",
    "ln_beta",
];

/// Indices into [`PARAM_NAMES`] of the layer-norm parameters.
pub const LN_PARAMS: [usize; 2] = [14, 15];

impl<R: Real> V1NetParams<R> {
    /// Variance-scaled kernels, zero biases, unit LN gain.
    pub fn init(cfg: &V1NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.width;
        Ok(Self {
            w_xh: SeparableKernel::init(cfg.input_kernel, k, 4 * k, seed::derive(seed, 1)),
            u_hh: SeparableKernel::init(cfg.input_kernel, k, 4 * k, seed::derive(seed, 2)),
            gate_bias: Tensor::zeros(vec![4 * k]),
            w_exc: SeparableKernel::init(cfg.exc_kernel, k, k, seed::derive(seed, 3)),
            exc_bias: Tensor::zeros(vec![k]),
            w_inh: SeparableKernel::init(cfg.inhdiv_kernel, k, k, seed::derive(seed, 4)),
            inh_bias: Tensor::zeros(vec![k]),
            w_div: SeparableKernel::init(cfg.inhdiv_kernel, k, k, seed::derive(seed, 5)),
            div_bias: Tensor::zeros(vec![k]),
            ln_gamma: Tensor::ones(vec![k]),
            ln_beta: Tensor::zeros(vec![k]),
        })
    }

    pub fn tensors(&self) -> [&Tensor<R>; 16] {
        [
            &self.w_xh.depthwise,
            &self.w_xh.pointwise,
            &self.u_hh.depthwise,
            &self.u_hh.pointwise,
            &self.gate_bias,
            &self.w_exc.depthwise,
            &self.w_exc.pointwise,
            &self.exc_bias,
            &self.w_inh.depthwise,
            &self.w_inh.pointwise,
            &self.inh_bias,
            &self.w_div.depthwise,
            &self.w_div.pointwise,
            &self.div_bias,
            &self.ln_gamma,
            &self.ln_beta,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<R>; 16] {
        [
            &mut self.w_xh.depthwise,
            &mut self.w_xh.pointwise,
            &mut self.u_hh.depthwise,
            &mut self.u_hh.pointwise,
            &mut self.gate_bias,
            &mut self.w_exc.depthwise,
            &mut self.w_exc.pointwise,
            &mut self.exc_bias,
            &mut self.w_inh.depthwise,
            &mut self.w_inh.pointwise,
            &mut self.inh_bias,
            &mut self.w_div.depthwise,
            &mut self.w_div.pointwise,
            &mut self.div_bias,
            &mut self.ln_gamma,
            &mut self.ln_beta,
        ]
    }

    /// Rebuilds parameters from tensors in [`PARAM_NAMES`] order.
    pub fn from_tensors(cfg: &V1NetConfig, tensors: Vec<Tensor<R>>) -> Result<Self> {
        let template = Self::init(cfg, 0)?;
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::InvalidArgument(format!("expected {} V1Net tensors, got {}", PARAM_NAMES.len(), tensors.len())));
        }
        let mut out = template;
        for ((slot, t), name) in out.tensors_mut().into_iter().zip(tensors).zip(PARAM_NAMES) {
            if slot.shape() != t.shape() {
                return Err(Error::shape("V1NetParams::from_tensors", format!("{name}: {:?} vs {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph<R>, trainable: bool) -> Result<V1NetVars> {
        let vars = self.tensors().into_iter().map(|t| g.leaf(t.clone(), trainable)).collect::<Result<Vec<_>>>()?;
        V1NetVars::from_slice(&vars)
    }
}

/// Graph handles of a bound parameter set, in [`PARAM_NAMES`] order.
#[derive(Debug, Clone, Copy)]
pub struct V1NetVars {
    pub w_xh: (Var, Var),
    pub u_hh: (Var, Var),
    pub gate_bias: Var,
    pub w_exc: (Var, Var),
    pub exc_bias: Var,
    pub w_inh: (Var, Var),
    pub inh_bias: Var,
    pub w_div: (Var, Var),
    pub div_bias: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
}

impl V1NetVars {
    pub fn from_slice(v: &[Var]) -> Result<Self> {
        if v.len() != PARAM_NAMES.len() {
            return Err(Error::InvalidArgument(format!("expected {} V1Net vars, got {}", PARAM_NAMES.len(), v.len())));
        }
        Ok(Self {
            w_xh: (v[0], v[1]),
            u_hh: (v[2], v[3]),
            gate_bias: v[4],
            w_exc: (v[5], v[6]),
            exc_bias: v[7],
            w_inh: (v[8], v[9]),
            inh_bias: v[10],
            w_div: (v[11], v[12]),
            div_bias: v[13],
            ln_gamma: v[14],
            ln_beta: v[15],
        })
    }

    pub fn all(&self) -> [Var; 16] {
        [
            self.w_xh.0,
            self.w_xh.1,
            self.u_hh.0,
            self.u_hh.1,
            self.gate_bias,
            self.w_exc.0,
            self.w_exc.1,
            self.exc_bias,
            self.w_inh.0,
            self.w_inh.1,
            self.inh_bias,
            self.w_div.0,
            self.w_div.1,
            self.div_bias,
            self.ln_gamma,
            self.ln_beta,
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
    /// Both tensors are known zeros; recurrent convolutions are skipped.
    pub is_zero: bool,
}

/// Intermediate values of one step.
#[derive(Debug, Clone, Copy)]
pub struct StepTrace {
    pub f: Var,
    pub i: Var,
    pub o: Var,
    pub g: Var,
    pub exc: Var,
    pub inh: Var,
    pub div: Var,
    pub c_tilde: Var,
}

pub struct Unrolled {
    /// State after each step, `states[t]` for step `t + 1`.
    pub states: Vec<CellState>,
    pub traces: Vec<StepTrace>,
}

impl Unrolled {
    pub fn last(&self) -> CellState {
        *self.states.last().expect("at least one step")
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

pub fn zero_state<R: Real>(g: &mut Graph<R>, shape: &[usize]) -> Result<CellState> {
    let h = g.constant(Tensor::zeros(shape.to_vec()))?;
    let c = g.constant(Tensor::zeros(shape.to_vec()))?;
    Ok(CellState { h, c, is_zero: true })
}

fn check_input<R: Real>(g: &Graph<R>, cfg: &V1NetConfig, x: Var) -> Result<()> {
    let [_, _, _, c] = g.value(x).dims4()?;
    if c != cfg.width {
        return Err(Error::shape("v1net", format!("input has {c} channels, cell width is {}", cfg.width)));
    }
    Ok(())
}

/// Bottom-up gate drive `W_xh *d X`, shared by every step of an unroll.
pub fn input_drive<R: Real>(g: &mut Graph<R>, vars: &V1NetVars, x: Var) -> Result<Var> {
    stage("input drive (W_xh)", g.separable_conv2d(x, vars.w_xh.0, vars.w_xh.1, Conv2dCfg::same()))
}

/// `σ(W *d H_prev + b)`, or `σ(b)` broadcast when `H_prev` is zero.
fn horizontal<R: Real>(g: &mut Graph<R>, h_prev: &CellState, kernel: (Var, Var), bias: Var) -> Result<Var> {
    let pre = if h_prev.is_zero {
        h_prev.h
    } else {
        g.separable_conv2d(h_prev.h, kernel.0, kernel.1, Conv2dCfg::same())?
    };
    let pre = g.bias_add(pre, bias)?;
    g.sigmoid(pre)
}

/// One recurrent step given the precomputed input drive.
pub fn step_with_drive<R: Real>(
    g: &mut Graph<R>,
    cfg: &V1NetConfig,
    vars: &V1NetVars,
    drive: Var,
    prev: &CellState,
) -> Result<(CellState, StepTrace)> {
    let k = cfg.width;
    let [n, h, w, c4] = g.value(drive).dims4()?;
    if c4 != 4 * k || g.value(prev.h).shape() != [n, h, w, k] || g.value(prev.c).shape() != [n, h, w, k] {
        return Err(Error::shape(
            "v1net_step",
            format!("drive {:?}, state {:?}/{:?}", g.value(drive).shape(), g.value(prev.h).shape(), g.value(prev.c).shape()),
        ));
    }

    let (f, i, o, gg) = stage("gating (f, i, o, g)", (|| {
        let mut pre = drive;
        if !prev.is_zero {
            let rec = g.separable_conv2d(prev.h, vars.u_hh.0, vars.u_hh.1, Conv2dCfg::same())?;
            pre = g.add(pre, rec)?;
        }
        let pre = g.bias_add(pre, vars.gate_bias)?;
        let gates = g.sigmoid(pre)?;
        Ok((
            g.slice_channels(gates, 0, k)?,
            g.slice_channels(gates, k, k)?,
            g.slice_channels(gates, 2 * k, k)?,
            g.slice_channels(gates, 3 * k, k)?,
        ))
    })())?;

    let exc = stage("excitatory horizontal (H_exc)", horizontal(g, prev, vars.w_exc, vars.exc_bias))?;
    let inh = stage("inhibitory horizontal (H_inh)", horizontal(g, prev, vars.w_inh, vars.inh_bias))?;
    let div = stage("divisive gain control (H_div)", horizontal(g, prev, vars.w_div, vars.div_bias))?;

    let c_tilde = stage("grouping candidate (c̃)", (|| {
        let drive = g.add(gg, exc)?;
        let gained = g.mul(div, drive)?;
        g.sub(gained, inh)
    })())?;

    let (c, h) = stage("state mixing (c, H)", (|| {
        let keep = g.mul(f, prev.c)?;
        let cand = g.tanh(c_tilde)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let eps = R::from_f64_lossy(cfg.ln_eps);
        let normed = g.layer_norm(c, vars.ln_gamma, vars.ln_beta, eps, cfg.detach_ln_stats)?;
        let act = g.relu(normed)?;
        let h = g.mul(o, act)?;
        Ok((c, h))
    })())?;

    Ok((CellState { h, c, is_zero: false }, StepTrace { f, i, o, g: gg, exc, inh, div, c_tilde }))
}

/// One step from `prev` on input `x`.
pub fn step<R: Real>(
    g: &mut Graph<R>,
    cfg: &V1NetConfig,
    vars: &V1NetVars,
    x: Var,
    prev: &CellState,
) -> Result<(CellState, StepTrace)> {
    check_input(g, cfg, x)?;
    let drive = input_drive(g, vars, x)?;
    step_with_drive(g, cfg, vars, drive, prev)
}

/// Runs `steps` iterations on a static input, starting from `init` or zeros.
pub fn unroll<R: Real>(
    g: &mut Graph<R>,
    cfg: &V1NetConfig,
    vars: &V1NetVars,
    x: Var,
    steps: usize,
    init: Option<CellState>,
) -> Result<Unrolled> {
    if steps == 0 {
        return Err(Error::InvalidArgument("unroll needs at least one step".into()));
    }
    check_input(g, cfg, x)?;
    let mut state = match init {
        Some(s) => s,
        None => {
            let shape = g.value(x).shape().to_vec();
            zero_state(g, &shape)?
        }
    };
    let drive = input_drive(g, vars, x)?;
    let mut states = Vec::with_capacity(steps);
    let mut traces = Vec::with_capacity(steps);
    for t in 0..steps {
        let (next, trace) = step_with_drive(g, cfg, vars, drive, &state).map_err(|e| e.in_stage(format!("step {}", t + 1)))?;
        states.push(next);
        traces.push(trace);
        state = next;
    }
    Ok(Unrolled { states, traces })
}

/// Concrete state tensors, for running the cell outside a training graph.
#[derive(Debug, Clone, PartialEq)]
pub struct V1NetState<R: Real> {
    pub h: Tensor<R>,
    pub c: Tensor<R>,
}

impl<R: Real> V1NetState<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { h: Tensor::zeros(shape.to_vec()), c: Tensor::zeros(shape.to_vec()) }
    }
}

/// Concrete values of a [`StepTrace`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepValues<R: Real> {
    pub f: Tensor<R>,
    pub i: Tensor<R>,
    pub o: Tensor<R>,
    pub g: Tensor<R>,
    pub exc: Tensor<R>,
    pub inh: Tensor<R>,
    pub div: Tensor<R>,
    pub c_tilde: Tensor<R>,
}

impl<R: Real> StepValues<R> {
    pub fn read(g: &Graph<R>, t: &StepTrace) -> Self {
        StepValues {
            f: g.value(t.f).clone(),
            i: g.value(t.i).clone(),
            o: g.value(t.o).clone(),
            g: g.value(t.g).clone(),
            exc: g.value(t.exc).clone(),
            inh: g.value(t.inh).clone(),
            div: g.value(t.div).clone(),
            c_tilde: g.value(t.c_tilde).clone(),
        }
    }
}

impl<R: Real> StepValues<R> {
    pub fn all(&self) -> [&Tensor<R>; 8] {
        [&self.f, &self.i, &self.o, &self.g, &self.exc, &self.inh, &self.div, &self.c_tilde]
    }
}

impl<R: Real> V1NetParams<R> {
    /// Single step on concrete tensors.
    pub fn step_values(
        &self,
        cfg: &V1NetConfig,
        x: &Tensor<R>,
        prev: &V1NetState<R>,
    ) -> Result<(V1NetState<R>, StepValues<R>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let state = CellState { h: g.constant(prev.h.clone())?, c: g.constant(prev.c.clone())?, is_zero: false };
        let (next, trace) = step(&mut g, cfg, &vars, xv, &state)?;
        Ok((V1NetState { h: g.value(next.h).clone(), c: g.value(next.c).clone() }, StepValues::read(&g, &trace)))
    }

    /// Unroll on concrete tensors from the zero state.
    pub fn unroll_values(
        &self,
        cfg: &V1NetConfig,
        x: &Tensor<R>,
        steps: usize,
    ) -> Result<(Vec<V1NetState<R>>, Vec<StepValues<R>>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let out = unroll(&mut g, cfg, &vars, xv, steps, None)?;
        let states = out
            .states
            .iter()
            .map(|s| V1NetState { h: g.value(s.h).clone(), c: g.value(s.c).clone() })
            .collect();
        let traces = out.traces.iter().map(|t| StepValues::read(&g, t)).collect();
        Ok((states, traces))
    }
}
