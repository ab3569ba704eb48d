//! The recursive segmentation network.
//!
//! * embedder: one strided convolution, implemented as a matmul over
//!   non-overlapping `stride × stride` patches;
//! * core: two pre-norm transformer layers shared by every recursion step.
//!   Each step adds the input embeddings to the grid tokens, appends the
//!   side-band tokens and runs both layers;
//! * head: layer norm and a per-token linear map to `stride² × 3` outputs,
//!   rearranged depth-to-space into `(dy, dx, fg-logit)` pixels.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::flowfield::FlowTarget;
use crate::grid::Image;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub stride: usize,
    pub input_size: usize,
    pub channels: usize,
    pub n_recursions: usize,
    pub side_tokens: usize,
    pub core_layers: usize,
    pub n_heads: usize,
    pub n_datasets: usize,
    pub head_out_channels: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            stride: 4,
            input_size: 64,
            channels: 2,
            n_recursions: 21,
            side_tokens: 64,
            core_layers: 2,
            n_heads: 1,
            n_datasets: 1,
            head_out_channels: 3,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration: 256-px input, stride 4, 21 recursions,
    /// 64 side tokens, one side-band initialization per training corpus.
    pub fn paper(d: usize) -> Self {
        Self {
            d,
            stride: 4,
            input_size: 256,
            channels: 2,
            n_recursions: 21,
            side_tokens: 64,
            core_layers: 2,
            n_heads: (d / 64).max(1),
            n_datasets: 4,
            head_out_channels: 3,
            mlp_ratio: 4,
        }
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.stride
    }

    pub fn grid_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_width(&self) -> usize {
        self.stride * self.stride * self.head_out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stride == 0 || self.input_size == 0 || self.input_size % self.stride != 0 {
            return fail(format!("input_size {} must be a positive multiple of stride {}", self.input_size, self.stride));
        }
        if self.n_heads == 0 || self.d == 0 || self.d % self.n_heads != 0 {
            return fail(format!("d {} must be divisible by n_heads {}", self.d, self.n_heads));
        }
        if self.n_recursions == 0 {
            return fail("n_recursions must be >= 1".into());
        }
        if self.core_layers == 0 || self.n_datasets == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return fail("core_layers, n_datasets, channels and mlp_ratio must be >= 1".into());
        }
        if self.head_out_channels != 3 {
            return fail("head_out_channels is fixed at 3 (dy, dx, fg)".into());
        }
        Ok(())
    }
}

/// Exact trainable-parameter count for a configuration.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let (d, s2, g, s) = (cfg.d, cfg.stride * cfg.stride, cfg.grid(), cfg.side_tokens);
    let hidden = cfg.mlp_ratio * d;
    let embed = s2 * cfg.channels * d + d;
    let pos = 2 * g * d + s * d;
    let side = cfg.n_datasets * s * d;
    let layer = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
    let head = 2 * d + d * cfg.head_width() + cfg.head_width();
    embed + pos + side + cfg.core_layers * layer + head
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter arrays, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
    /// `alpha / rank` for low-rank adapters, when any are present.
    pub lora_scale: f64,
}

impl ModelParams {
    pub fn from_entries(entries: Vec<Param>, lora_scale: f64) -> Self {
        let index = entries.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { entries, index, lora_scale }
    }

    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, g, s) = (cfg.d, cfg.grid(), cfg.side_tokens);
        let patch = cfg.stride * cfg.stride * cfg.channels;
        let hidden = cfg.mlp_ratio * d;
        let std_in = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut entries = Vec::new();
        let mut add = |name: String, value: Tensor| entries.push(Param { name, value, trainable: true });
        add("embed.weight".into(), Tensor::randn(patch, d, std_in(patch), rng));
        add("embed.bias".into(), Tensor::zeros(1, d));
        add("pos.row".into(), Tensor::randn(g, d, 0.02, rng));
        add("pos.col".into(), Tensor::randn(g, d, 0.02, rng));
        add("pos.side".into(), Tensor::randn(s, d, 0.02, rng));
        add("side_init".into(), Tensor::randn(cfg.n_datasets * s, d, 0.02, rng));
        for l in 0..cfg.core_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            add(p("ln1.gamma"), Tensor::filled(1, d, 1.0));
            add(p("ln1.beta"), Tensor::zeros(1, d));
            add(p("attn.qkv.weight"), Tensor::randn(d, 3 * d, std_in(d), rng));
            add(p("attn.qkv.bias"), Tensor::zeros(1, 3 * d));
            add(p("attn.out.weight"), Tensor::randn(d, d, 0.5 * std_in(d), rng));
            add(p("attn.out.bias"), Tensor::zeros(1, d));
            add(p("ln2.gamma"), Tensor::filled(1, d, 1.0));
            add(p("ln2.beta"), Tensor::zeros(1, d));
            add(p("mlp.fc1.weight"), Tensor::randn(d, hidden, std_in(d), rng));
            add(p("mlp.fc1.bias"), Tensor::zeros(1, hidden));
            add(p("mlp.fc2.weight"), Tensor::randn(hidden, d, 0.5 * std_in(hidden), rng));
            add(p("mlp.fc2.bias"), Tensor::zeros(1, d));
        }
        add("head.norm.gamma".into(), Tensor::filled(1, d, 1.0));
        add("head.norm.beta".into(), Tensor::zeros(1, d));
        add("head.weight".into(), Tensor::randn(d, cfg.head_width(), 0.02, rng));
        add("head.bias".into(), Tensor::zeros(1, cfg.head_width()));
        Ok(Self::from_entries(entries, 1.0))
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.entries[i].value)
    }

    pub fn push(&mut self, param: Param) {
        self.index.insert(param.name.clone(), self.entries.len());
        self.entries.push(param);
    }

    /// Total element count of all arrays.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.entries.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.entries.iter_mut().for_each(|p| p.trainable = trainable);
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.position(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }
}

/// Recursion latent: grid tokens and side-band tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureState {
    /// `G·G × d`, row-major over the token grid.
    pub grid: Tensor,
    /// `S × d`.
    pub side: Tensor,
}

/// Whether bound parameters record gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    Frozen,
    Trainable,
}

struct LayerVars {
    ln1: (Var, Var),
    qkv: (Var, Var),
    out: (Var, Var),
    ln2: (Var, Var),
    fc1: (Var, Var),
    fc2: (Var, Var),
}

/// Vars produced by one recursion step.
pub struct StepVars {
    pub grid: Var,
    pub side: Var,
    /// One attention node per core layer.
    pub attention: Vec<Var>,
}

/// Model parameters entered into a tape. Every recursion step reuses the
/// same vars, so the core weights are tied by construction.
pub struct ModelGraph<'a> {
    cfg: &'a ModelConfig,
    /// Tape var of each parameter, in [`ModelParams::entries`] order.
    pub param_vars: Vec<Var>,
    embed: (Var, Var),
    pos: Var,
    side_init: Var,
    layers: Vec<LayerVars>,
    head_norm: (Var, Var),
    head: (Var, Var),
}

impl<'a> ModelGraph<'a> {
    pub fn bind(tape: &mut Tape, params: &ModelParams, cfg: &'a ModelConfig, mode: GradMode) -> Result<Self> {
        cfg.validate()?;
        let param_vars: Vec<Var> = params
            .entries
            .iter()
            .map(|p| {
                if mode == GradMode::Trainable && p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let var = |name: &str| -> Result<Var> { Ok(param_vars[params.require(name)?]) };
        // W + scale · A·B when the weight carries an adapter
        let weight = |tape: &mut Tape, name: &str| -> Result<Var> {
            let w = var(name)?;
            let (a, b) = (params.position(&format!("{name}.lora_a")), params.position(&format!("{name}.lora_b")));
            Ok(match (a, b) {
                (Some(a), Some(b)) => {
                    let delta = tape.matmul(param_vars[a], param_vars[b]);
                    let delta = tape.scale(delta, params.lora_scale);
                    tape.add(w, delta)
                }
                _ => w,
            })
        };
        let embed = (weight(tape, "embed.weight")?, var("embed.bias")?);
        let pos = tape.pos_embed(var("pos.row")?, var("pos.col")?, var("pos.side")?, cfg.grid());
        let side_init = var("side_init")?;
        let mut layers = Vec::with_capacity(cfg.core_layers);
        for l in 0..cfg.core_layers {
            let n = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerVars {
                ln1: (var(&n("ln1.gamma"))?, var(&n("ln1.beta"))?),
                qkv: (weight(tape, &n("attn.qkv.weight"))?, var(&n("attn.qkv.bias"))?),
                out: (weight(tape, &n("attn.out.weight"))?, var(&n("attn.out.bias"))?),
                ln2: (var(&n("ln2.gamma"))?, var(&n("ln2.beta"))?),
                fc1: (weight(tape, &n("mlp.fc1.weight"))?, var(&n("mlp.fc1.bias"))?),
                fc2: (weight(tape, &n("mlp.fc2.weight"))?, var(&n("mlp.fc2.bias"))?),
            });
        }
        let head_norm = (var("head.norm.gamma")?, var("head.norm.beta")?);
        let head = (weight(tape, "head.weight")?, var("head.bias")?);
        Ok(Self { cfg, param_vars, embed, pos, side_init, layers, head_norm, head })
    }

    pub fn embed(&self, tape: &mut Tape, image: &Image) -> Result<Var> {
        let patches = patchify(image, self.cfg)?;
        let p = tape.constant(patches);
        Ok(tape.linear(p, self.embed.0, self.embed.1))
    }

    /// `z⁰`: zero grid and the dataset's side-band initialization.
    pub fn initial_state(&self, tape: &mut Tape, dataset_id: usize) -> Result<(Var, Var)> {
        if dataset_id >= self.cfg.n_datasets {
            return Err(Error::Config(format!(
                "dataset id {dataset_id} out of range for {} registered datasets",
                self.cfg.n_datasets
            )));
        }
        let s = self.cfg.side_tokens;
        let grid = tape.constant(Tensor::zeros(self.cfg.grid_tokens(), self.cfg.d));
        let side = tape.slice_rows(self.side_init, dataset_id * s, s);
        Ok((grid, side))
    }

    pub fn step(&self, tape: &mut Tape, grid: Var, side: Var, x: Var) -> StepVars {
        let mixed = tape.add(grid, x);
        let mut h = tape.concat_rows(mixed, side);
        let mut attention = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let a = tape.layer_norm(h, l.ln1.0, l.ln1.1);
            let a = tape.add(a, self.pos);
            let qkv = tape.linear(a, l.qkv.0, l.qkv.1);
            let att = tape.attention(qkv, self.cfg.n_heads);
            attention.push(att);
            let o = tape.linear(att, l.out.0, l.out.1);
            h = tape.add(h, o);
            let m = tape.layer_norm(h, l.ln2.0, l.ln2.1);
            let m = tape.linear(m, l.fc1.0, l.fc1.1);
            let m = tape.gelu(m);
            let m = tape.linear(m, l.fc2.0, l.fc2.1);
            h = tape.add(h, m);
        }
        let gt = self.cfg.grid_tokens();
        let grid = tape.slice_rows(h, 0, gt);
        let side = tape.slice_rows(h, gt, self.cfg.side_tokens);
        StepVars { grid, side, attention }
    }

    /// Token-layout head output, `G·G × stride²·3`.
    pub fn head(&self, tape: &mut Tape, grid: Var) -> Var {
        let n = tape.layer_norm(grid, self.head_norm.0, self.head_norm.1);
        tape.linear(n, self.head.0, self.head.1)
    }
}

/// Rearranges an `H × W × C` image into `G·G × stride²·C` patch rows
/// (patch-internal order: row, column, channel).
pub fn patchify(image: &Image, cfg: &ModelConfig) -> Result<Tensor> {
    if image.height != cfg.input_size || image.width != cfg.input_size {
        return Err(Error::Dimension(format!(
            "expected a {0}x{0} input, got {1}x{2}",
            cfg.input_size, image.height, image.width
        )));
    }
    let image = image.with_channels(cfg.channels);
    let (s, g, c) = (cfg.stride, cfg.grid(), cfg.channels);
    let mut out = Tensor::zeros(g * g, s * s * c);
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            for py in 0..s {
                for px in 0..s {
                    for ch in 0..c {
                        row[(py * s + px) * c + ch] = image.get(gy * s + py, gx * s + px, ch);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Token layout of a flow target, matching the head output layout.
pub fn target_tokens(target: &FlowTarget, cfg: &ModelConfig) -> Tensor {
    let (s, g) = (cfg.stride, cfg.grid());
    let w = target.width;
    let mut out = Tensor::zeros(g * g, cfg.head_width());
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            for py in 0..s {
                for px in 0..s {
                    let p = (gy * s + py) * w + gx * s + px;
                    let k = (py * s + px) * 3;
                    row[k] = target.flow[2 * p];
                    row[k + 1] = target.flow[2 * p + 1];
                    row[k + 2] = target.fg[p];
                }
            }
        }
    }
    out
}

/// Depth-to-space of head tokens; the foreground channel goes through the
/// logistic function.
pub fn tokens_to_flow(tokens: &Tensor, cfg: &ModelConfig) -> FlowTarget {
    let (s, g) = (cfg.stride, cfg.grid());
    let w = cfg.input_size;
    let mut out = FlowTarget::zeros(w, w);
    for gy in 0..g {
        for gx in 0..g {
            let row = tokens.row(gy * g + gx);
            for py in 0..s {
                for px in 0..s {
                    let p = (gy * s + py) * w + gx * s + px;
                    let k = (py * s + px) * 3;
                    out.flow[2 * p] = row[k];
                    out.flow[2 * p + 1] = row[k + 1];
                    out.fg[p] = sigmoid(row[k + 2]);
                }
            }
        }
    }
    out
}

/// Mean Shannon entropy (nats) of the rows of per-head attention matrices.
pub fn attention_entropy(heads: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    let mut rows = 0usize;
    for p in heads {
        for r in 0..p.rows {
            let row = p.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::NotNormalized { sum });
            }
            total -= row.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
            rows += 1;
        }
    }
    Ok(if rows == 0 { 0.0 } else { total / rows as f64 })
}

/// Outputs of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub prediction: FlowTarget,
    /// Head projections of intercepted iterations.
    pub intercepted: BTreeMap<usize, FlowTarget>,
    /// Mean attention entropy, `[iteration - 1][layer]`.
    pub entropy: Vec<Vec<f64>>,
}

/// Embeds the input alone.
pub fn embed(image: &Image, params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let g = ModelGraph::bind(&mut tape, params, cfg, GradMode::Frozen)?;
    let x = g.embed(&mut tape, image)?;
    Ok(tape.value(x).clone())
}

/// One application of the shared core.
pub fn core_step(z: &FeatureState, x: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<FeatureState> {
    let gt = cfg.grid_tokens();
    if z.grid.shape() != (gt, cfg.d) || x.shape() != (gt, cfg.d) || z.side.shape() != (cfg.side_tokens, cfg.d) {
        return Err(Error::Dimension("feature state does not match the model configuration".into()));
    }
    let mut tape = Tape::new();
    let g = ModelGraph::bind(&mut tape, params, cfg, GradMode::Frozen)?;
    let (grid, side, xv) = (tape.constant(z.grid.clone()), tape.constant(z.side.clone()), tape.constant(x.clone()));
    let out = g.step(&mut tape, grid, side, xv);
    Ok(FeatureState { grid: tape.value(out.grid).clone(), side: tape.value(out.side).clone() })
}

/// Runs all recursions. Iterations in `intercept` (0..=N) are also
/// projected through the head.
pub fn forward(
    image: &Image,
    dataset_id: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
    intercept: &[usize],
) -> Result<ForwardOutput> {
    let n = cfg.n_recursions;
    if let Some(&bad) = intercept.iter().find(|&&i| i > n) {
        return Err(Error::InterceptOutOfRange { index: bad, depth: n });
    }
    let mut tape = Tape::new();
    let g = ModelGraph::bind(&mut tape, params, cfg, GradMode::Frozen)?;
    let x = g.embed(&mut tape, image)?;
    let (mut grid, mut side) = g.initial_state(&mut tape, dataset_id)?;
    let mut intercepted = BTreeMap::new();
    let mut entropy = Vec::with_capacity(n);
    let project = |tape: &mut Tape, grid: Var| {
        let h = g.head(tape, grid);
        tokens_to_flow(tape.value(h), cfg)
    };
    if intercept.contains(&0) {
        intercepted.insert(0, project(&mut tape, grid));
    }
    for i in 1..=n {
        let step = g.step(&mut tape, grid, side, x);
        grid = step.grid;
        side = step.side;
        let mut per_layer = Vec::with_capacity(step.attention.len());
        for a in &step.attention {
            per_layer.push(attention_entropy(tape.attention_probs(*a).expect("attention node"))?);
        }
        entropy.push(per_layer);
        if intercept.contains(&i) {
            intercepted.insert(i, project(&mut tape, grid));
        }
    }
    let prediction = match intercepted.get(&n) {
        Some(p) => p.clone(),
        None => project(&mut tape, grid),
    };
    Ok(ForwardOutput { prediction, intercepted, entropy })
}
