use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{dog_kernel_bank, conv_gru_unroll, ConvGruVars, LayerKind, ModelSpec, DEFAULT_SIGMAS, NORM_EPS, NORM_MOMENTUM};
use crate::autodiff::{softmax_rows, Conv2dCfg, Graph, NormStats, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::init::{variance_scaling_init, FanMode};
use crate::seed;
use crate::tensor::{Real, Tensor};
use crate::v1net::{self, V1NetConfig, V1NetParams, V1NetVars, LN_PARAMS, PARAM_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Normalization running average, updated from batch statistics in
    /// training mode.
    RunningStat,
    /// Never updated.
    Fixed,
}

/// Transfer-relevant partition of the parameter registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    InputConv,
    Intermediate,
    Norm,
    Readout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<R: Real> {
    pub name: String,
    pub tensor: Tensor<R>,
    pub kind: ParamKind,
    pub group: ParamGroup,
    /// Index into `ModelSpec::layers`.
    pub layer: usize,
}

/// Which trainable parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainScope {
    All,
    /// Readout and normalization parameters only; every convolution and
    /// recurrent kernel stays frozen.
    Transfer,
}

impl TrainScope {
    pub fn trains<R: Real>(self, p: &Param<R>) -> bool {
        p.kind == ParamKind::Trainable
            && match self {
                TrainScope::All => true,
                TrainScope::Transfer => matches!(p.group, ParamGroup::Norm | ParamGroup::Readout),
            }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in norm layers.
    Train,
    /// Running statistics in norm layers.
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct NormRef {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone)]
enum Block {
    Conv { kernel: usize, dog: Option<usize>, bias: usize, cfg: Conv2dCfg, pool: bool, norm: Option<NormRef> },
    Gru { wx: usize, u_gates: usize, u_cand: usize, bias: usize, steps: usize, norm: Option<NormRef> },
    V1Net { first: usize, config: V1NetConfig },
    Gap,
    Dense { w: usize, b: usize, relu: bool },
    Softmax,
}

/// Batch statistics seen by one norm layer during a training forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats<R> {
    pub mean_param: usize,
    pub var_param: usize,
    pub mean: Vec<R>,
    pub var: Vec<R>,
}

pub struct ForwardOut<R> {
    /// `(n, 2)` pre-softmax scores.
    pub logits: Var,
    pub batch_stats: Vec<BatchStats<R>>,
    /// Hidden state after each step of the recurrent block, if any.
    pub hidden: Vec<Var>,
    /// Input of the recurrent block, if any.
    pub recurrent_input: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model<R: Real> {
    pub spec: ModelSpec,
    pub params: Vec<Param<R>>,
    blocks: Vec<Block>,
}

struct Builder<R: Real> {
    params: Vec<Param<R>>,
    seed: u64,
    layer: usize,
}

impl<R: Real> Builder<R> {
    fn push(&mut self, name: String, tensor: Tensor<R>, kind: ParamKind, group: ParamGroup) -> usize {
        self.params.push(Param { name, tensor, kind, group, layer: self.layer });
        self.params.len() - 1
    }

    fn next_seed(&self) -> u64 {
        seed::derive(self.seed, self.params.len() as u64)
    }

    fn kernel(&mut self, name: String, shape: &[usize], group: ParamGroup) -> usize {
        let t = variance_scaling_init(shape, FanMode::In, self.next_seed());
        self.push(name, t, ParamKind::Trainable, group)
    }

    fn zeros(&mut self, name: String, len: usize, group: ParamGroup) -> usize {
        self.push(name, Tensor::zeros(vec![len]), ParamKind::Trainable, group)
    }

    fn norm(&mut self, prefix: &str, c: usize) -> NormRef {
        NormRef {
            gamma: self.push(format!("{prefix}/norm/gamma"), Tensor::ones(vec![c]), ParamKind::Trainable, ParamGroup::Norm),
            beta: self.push(format!("{prefix}/norm/beta"), Tensor::zeros(vec![c]), ParamKind::Trainable, ParamGroup::Norm),
            mean: self.push(format!("{prefix}/norm/moving_mean"), Tensor::zeros(vec![c]), ParamKind::RunningStat, ParamGroup::Norm),
            var: self.push(format!("{prefix}/norm/moving_variance"), Tensor::ones(vec![c]), ParamKind::RunningStat, ParamGroup::Norm),
        }
    }
}

/// Instantiates `spec` with deterministic, seed-derived initial values.
pub fn build_model<R: Real>(spec: &ModelSpec, seed: u64) -> Result<Model<R>> {
    let mut b = Builder { params: Vec::new(), seed, layer: 0 };
    let mut blocks = Vec::with_capacity(spec.layers.len());
    let mut channels = spec.input[2];
    let mut conv_index = 0;
    let mut flat = false;
    for (li, layer) in spec.layers.iter().enumerate() {
        b.layer = li;
        let block = match layer.kind {
            LayerKind::Conv { kernel, n_out, dilation, max_pool, dog_filters } => {
                if flat {
                    return Err(Error::InvalidArgument("convolution after global pooling".into()));
                }
                if kernel % 2 == 0 || dilation == 0 || dog_filters >= n_out {
                    return Err(Error::InvalidArgument(format!("bad conv layer {li}: {:?}", layer.kind)));
                }
                let (prefix, group) = if li == 0 { ("input".to_string(), ParamGroup::InputConv) } else {
                    conv_index += 1;
                    (format!("conv{conv_index}"), ParamGroup::Intermediate)
                };
                let dog = (dog_filters > 0).then(|| {
                    let bank = dog_kernel_bank(kernel, &DEFAULT_SIGMAS, dog_filters, channels);
                    bank.map(|t| b.push(format!("{prefix}/dog_kernel"), t, ParamKind::Fixed, group))
                });
                let dog = dog.transpose()?;
                let k = b.kernel(format!("{prefix}/kernel"), &[kernel, kernel, channels, n_out - dog_filters], group);
                let bias = b.zeros(format!("{prefix}/bias"), n_out, group);
                let norm = layer.norm.then(|| b.norm(&prefix, n_out));
                channels = n_out;
                Block::Conv { kernel: k, dog, bias, cfg: Conv2dCfg::dilated(dilation), pool: max_pool, norm }
            }
            LayerKind::ConvGru { kernel, n_out, steps } => {
                if steps == 0 || kernel % 2 == 0 {
                    return Err(Error::InvalidArgument(format!("bad ConvGRU layer {li}")));
                }
                let g = ParamGroup::Intermediate;
                let wx = b.kernel("gru/wx".into(), &[kernel, kernel, channels, 3 * n_out], g);
                let u_gates = b.kernel("gru/u_gates".into(), &[kernel, kernel, n_out, 2 * n_out], g);
                let u_cand = b.kernel("gru/u_cand".into(), &[kernel, kernel, n_out, n_out], g);
                let bias = b.zeros("gru/bias".into(), 3 * n_out, g);
                let norm = layer.norm.then(|| b.norm("gru", n_out));
                channels = n_out;
                Block::Gru { wx, u_gates, u_cand, bias, steps, norm }
            }
            LayerKind::V1Net { config } => {
                if config.width != channels {
                    return Err(Error::shape("build_model", format!("V1Net width {} on {channels} channels", config.width)));
                }
                let p = V1NetParams::<R>::init(&config, b.next_seed())?;
                let first = b.params.len();
                for (i, (name, t)) in PARAM_NAMES.iter().zip(p.tensors()).enumerate() {
                    let group = if LN_PARAMS.contains(&i) { ParamGroup::Norm } else { ParamGroup::Intermediate };
                    b.push(format!("v1net/{name}"), t.clone(), ParamKind::Trainable, group);
                }
                Block::V1Net { first, config }
            }
            LayerKind::Gap => {
                flat = true;
                Block::Gap
            }
            LayerKind::Dense { n_out, relu } => {
                if !flat {
                    return Err(Error::InvalidArgument("dense layer before global pooling".into()));
                }
                let w = b.kernel(format!("readout/dense{n_out}/kernel"), &[channels, n_out], ParamGroup::Readout);
                let bias = b.zeros(format!("readout/dense{n_out}/bias"), n_out, ParamGroup::Readout);
                channels = n_out;
                Block::Dense { w, b: bias, relu }
            }
            LayerKind::Softmax => Block::Softmax,
        };
        if layer.norm && matches!(layer.kind, LayerKind::V1Net { .. } | LayerKind::Gap | LayerKind::Dense { .. } | LayerKind::Softmax) {
            return Err(Error::InvalidArgument(format!("norm not supported after layer {li}")));
        }
        blocks.push(block);
    }
    if !flat || channels != 2 {
        return Err(Error::InvalidArgument("model must end in a 2-way readout".into()));
    }
    Ok(Model { spec: spec.clone(), params: b.params, blocks })
}

/// Trainable parameters, biases and norm scales included; fixed kernels and
/// running statistics excluded.
pub fn count_params<R: Real>(m: &Model<R>) -> usize {
    m.params.iter().filter(|p| p.kind == ParamKind::Trainable).map(|p| p.tensor.len()).sum()
}

impl<R: Real> Model<R> {
    /// Adds every parameter to `g`; those selected by `scope` carry gradients.
    pub fn bind(&self, g: &mut Graph<R>, scope: Option<TrainScope>) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| g.leaf(p.tensor.clone(), scope.is_some_and(|s| s.trains(p))))
            .collect()
    }

    fn norm(
        &self,
        g: &mut Graph<R>,
        vars: &[Var],
        x: Var,
        nr: NormRef,
        mode: Mode,
        stats: &mut Vec<BatchStats<R>>,
    ) -> Result<Var> {
        let eps = R::from_f64_lossy(NORM_EPS);
        match mode {
            Mode::Train => {
                let (y, mean, var) = g.batch_norm(x, vars[nr.gamma], vars[nr.beta], eps, NormStats::Batch)?;
                stats.push(BatchStats { mean_param: nr.mean, var_param: nr.var, mean, var });
                Ok(y)
            }
            Mode::Eval => {
                let fixed = NormStats::Fixed { mean: self.params[nr.mean].tensor.data(), var: self.params[nr.var].tensor.data() };
                Ok(g.batch_norm(x, vars[nr.gamma], vars[nr.beta], eps, fixed)?.0)
            }
        }
    }

    /// Logits for a batch `x` of shape `(n, h, w, 3)`.
    pub fn forward(&self, g: &mut Graph<R>, vars: &[Var], x: Var, mode: Mode) -> Result<ForwardOut<R>> {
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!("{} vars for {} params", vars.len(), self.params.len())));
        }
        let [_, _, _, c] = g.value(x).dims4()?;
        if c != self.spec.input[2] {
            return Err(Error::shape("forward", format!("{c} input channels, model expects {}", self.spec.input[2])));
        }
        let mut h = x;
        let mut stats = Vec::new();
        let mut hidden = Vec::new();
        let mut recurrent_input = None;
        for block in &self.blocks {
            h = match *block {
                Block::Conv { kernel, dog, bias, cfg, pool, norm } => {
                    let k = match dog {
                        Some(d) => g.concat_channels(&[vars[d], vars[kernel]])?,
                        None => vars[kernel],
                    };
                    let mut y = g.conv2d(h, k, cfg)?;
                    y = g.bias_add(y, vars[bias])?;
                    if let Some(nr) = norm {
                        y = self.norm(g, vars, y, nr, mode, &mut stats)?;
                    }
                    y = g.relu(y)?;
                    if pool {
                        y = g.max_pool2d(y, 2, 2)?;
                    }
                    y
                }
                Block::Gru { wx, u_gates, u_cand, bias, steps, norm } => {
                    let p = ConvGruVars { wx: vars[wx], u_gates: vars[u_gates], u_cand: vars[u_cand], bias: vars[bias] };
                    recurrent_input = Some(h);
                    hidden = conv_gru_unroll(g, &p, h, steps)?;
                    let mut y = *hidden.last().expect("steps >= 1");
                    if let Some(nr) = norm {
                        y = self.norm(g, vars, y, nr, mode, &mut stats)?;
                    }
                    y
                }
                Block::V1Net { first, config } => {
                    let cell = V1NetVars::from_slice(&vars[first..first + PARAM_NAMES.len()])?;
                    recurrent_input = Some(h);
                    let out = v1net::unroll(g, &config, &cell, h, config.steps, None)?;
                    hidden = out.states.iter().map(|s| s.h).collect();
                    out.last().h
                }
                Block::Gap => g.global_avg_pool(h)?,
                Block::Dense { w, b, relu } => {
                    let y = g.dense(h, vars[w], vars[b])?;
                    if relu {
                        g.relu(y)?
                    } else {
                        y
                    }
                }
                Block::Softmax => h,
            };
        }
        Ok(ForwardOut { logits: h, batch_stats: stats, hidden, recurrent_input })
    }

    /// Class probabilities `(n, 2)` in evaluation mode.
    pub fn predict(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, None)?;
        let xv = g.constant(x.clone())?;
        let out = self.forward(&mut g, &vars, xv, Mode::Eval)?;
        let logits = g.value(out.logits);
        let [n, k] = logits.dims2()?;
        Tensor::new(vec![n, k], softmax_rows(logits.data(), k))
    }

    /// Folds batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<R>]) {
        let m = R::from_f64_lossy(NORM_MOMENTUM);
        let one_m = R::one() - m;
        for s in stats {
            for (idx, batch) in [(s.mean_param, &s.mean), (s.var_param, &s.var)] {
                for (r, &v) in self.params[idx].tensor.data_mut().iter_mut().zip(batch.iter()) {
                    *r = m * *r + one_m * v;
                }
            }
        }
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Indices of the variables a transfer fine-tune changes: readout and
    /// norm parameters plus the running statistics they maintain.
    pub fn transfer_variables(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| TrainScope::Transfer.trains(p) || p.kind == ParamKind::RunningStat)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn trainable(&self, scope: TrainScope) -> Vec<usize> {
        self.params.iter().enumerate().filter(|(_, p)| scope.trains(p)).map(|(i, _)| i).collect()
    }

    /// The V1Net block's configuration and current parameters.
    pub fn v1net_params(&self) -> Option<(V1NetConfig, V1NetParams<R>)> {
        self.blocks.iter().find_map(|b| match *b {
            Block::V1Net { first, config } => {
                let ts = self.params[first..first + PARAM_NAMES.len()].iter().map(|p| p.tensor.clone()).collect();
                V1NetParams::from_tensors(&config, ts).ok().map(|p| (config, p))
            }
            _ => None,
        })
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let meta = serde_json::json!({ "spec": self.spec, "extra": extra });
        let mut ck = Checkpoint::new(meta);
        for p in &self.params {
            ck.push(p.name.clone(), &p.tensor);
        }
        Ok(ck)
    }

    /// Rebuilds a model from a checkpoint written by [`Model::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_value(ck.meta.get("spec").cloned().ok_or_else(|| Error::Checkpoint("missing model spec".into()))?)?;
        let mut m = build_model::<R>(&spec, 0)?;
        if ck.records.len() != m.params.len() {
            return Err(Error::Checkpoint(format!("{} records for {} parameters", ck.records.len(), m.params.len())));
        }
        for p in &mut m.params {
            let rec = ck.get(&p.name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            let t = rec.to_tensor::<R>()?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!("{}: shape {:?}, expected {:?}", p.name, t.shape(), p.tensor.shape())));
            }
            p.tensor = t;
        }
        Ok(m)
    }

    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), tensor: p.tensor.cast(), kind: p.kind, group: p.group, layer: p.layer })
                .collect(),
            blocks: self.blocks.clone(),
        }
    }

    /// Plain-text layer table with output shapes and trainable counts.
    pub fn summary(&self) -> String {
        let [h, w, c] = self.spec.input;
        let mut shape = format!("[{h},{w},{c}]");
        let (mut hh, mut ww) = (h, w);
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.spec.arch);
        let _ = writeln!(out, "{:<5} {:<28} {:<16} {:>10}", "row", "layer", "output", "params");
        for (li, layer) in self.spec.layers.iter().enumerate() {
            let params: usize = self.params.iter().filter(|p| p.layer == li && p.kind == ParamKind::Trainable).map(|p| p.tensor.len()).sum();
            shape = match layer.kind {
                LayerKind::Conv { n_out, max_pool, .. } => {
                    if max_pool {
                        hh = hh.div_ceil(2);
                        ww = ww.div_ceil(2);
                    }
                    format!("[{hh},{ww},{n_out}]")
                }
                LayerKind::ConvGru { n_out, .. } => format!("[{hh},{ww},{n_out}]"),
                LayerKind::V1Net { config } => format!("[{hh},{ww},{}]", config.width),
                LayerKind::Gap => shape.rsplit(',').next().map(|c| format!("[1,1,{c}")).unwrap_or_default(),
                LayerKind::Dense { n_out, .. } => format!("[{n_out}]"),
                LayerKind::Softmax => shape,
            };
            let mut label = layer.label();
            if layer.norm {
                label.push_str("+norm");
            }
            let _ = writeln!(out, "{:<5} {:<28} {:<16} {:>10}", layer.row, label, shape, params);
        }
        let _ = writeln!(out, "total trainable parameters: {}", count_params(self));
        out
    }
}
