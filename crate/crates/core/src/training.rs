//! Chunked-unrolling trainer.
//!
//! The `N` recursion steps are split into `m` consecutive chunks. Each chunk
//! is evaluated on its own tape: it starts from the values produced by the
//! previous chunk (re-entered as a fresh leaf, so no gradient reaches
//! earlier chunks), runs its share of the recursion and is supervised
//! through the shared head. The total loss is the mean over chunks.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{augment, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::flowfield::{labels_to_flow, FlowTarget};
use crate::grid::Image;
use crate::model::{attention_entropy, target_tokens, GradMode, ModelConfig, ModelGraph, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_chunks: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_chunks: 3,
            batch_size: 8,
            epochs: 10,
            steps: None,
            lr_start: 1e-3,
            lr_end: 1e-4,
            weight_decay: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            seed: 0,
            augment: AugmentConfig { crop_size: 64, ..AugmentConfig::default() },
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.n_chunks == 0 || self.n_chunks > model.n_recursions {
            return Err(Error::Config(format!(
                "n_chunks {} must lie in 1..={}",
                self.n_chunks, model.n_recursions
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        if self.augment.crop_size != model.input_size {
            return Err(Error::Config(format!(
                "augment.crop_size {} must equal the model input size {}",
                self.augment.crop_size, model.input_size
            )));
        }
        self.augment.validate(model.stride)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.steps.unwrap_or_else(|| self.epochs * dataset_len.div_ceil(self.batch_size))
    }
}

/// Iteration ranges `(start, end]` of each chunk; sizes differ by at most one.
pub fn chunk_bounds(n_recursions: usize, n_chunks: usize) -> Vec<(usize, usize)> {
    (1..=n_chunks).map(|k| ((k - 1) * n_recursions / n_chunks, k * n_recursions / n_chunks)).collect()
}

/// Cosine decay from `lr_start` at step 0 to `lr_end` at the last step.
pub fn learning_rate(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return cfg.lr_start;
    }
    let progress = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
    cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// A sample with its model-ready image and token-layout target.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub image: Image,
    pub target: Tensor,
    pub dataset_id: usize,
}

impl Prepared {
    pub fn new(sample: &Sample, model: &ModelConfig) -> Self {
        let flow = labels_to_flow(&sample.labels);
        Self {
            image: sample.image.with_channels(model.channels),
            target: target_tokens(&flow, model),
            dataset_id: sample.dataset_id,
        }
    }
}

/// Loss between a predicted field (foreground as probability) and a
/// target: `(mean squared flow error, mean binary cross-entropy)`.
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
pub fn flow_loss(pred: &FlowTarget, target: &FlowTarget) -> Result<(f64, f64)> {
    if (pred.height, pred.width) != (target.height, target.width) {
        return Err(Error::Dimension("prediction and target sizes differ".into()));
    }
    let n = target.fg.len() as f64;
    let mse = pred.flow.iter().zip(&target.flow).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / (2.0 * n);
    let bce = pred
        .fg
        .iter()
        .zip(&target.fg)
        .map(|(&p, &t)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n;
    Ok((mse, bce))
}

#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: f64,
    /// Batch-mean loss of each chunk.
    pub per_chunk: Vec<f64>,
    /// Gradient of `total` for every parameter (zeros for frozen ones).
    pub grads: Vec<Tensor>,
    /// Mean attention entropy per iteration (over layers and batch).
    pub entropy: Vec<f64>,
}

struct SampleResult {
    chunk_losses: Vec<f64>,
    grads: Vec<Option<Tensor>>,
    entropy: Vec<f64>,
}

fn iteration_entropy(tape: &Tape, attention: &[Var]) -> Result<f64> {
    let mut acc = 0.0;
    for a in attention {
        acc += attention_entropy(tape.attention_probs(*a).expect("attention node"))?;
    }
    Ok(acc / attention.len() as f64)
}

fn add_grads(acc: &mut [Option<Tensor>], tape_grads: &mut crate::autograd::Gradients, vars: &[Var], scale: f64) {
    for (slot, &v) in acc.iter_mut().zip(vars) {
        if let Some(mut g) = tape_grads.take(v) {
            g.scale_assign(scale);
            match slot {
                Some(a) => a.add_assign(&g),
                None => *slot = Some(g),
            }
        }
    }
}

fn sample_detached(s: &Prepared, params: &ModelParams, cfg: &ModelConfig, bounds: &[(usize, usize)]) -> Result<SampleResult> {
    let m = bounds.len() as f64;
    let mut grads: Vec<Option<Tensor>> = vec![None; params.len()];
    let mut chunk_losses = Vec::with_capacity(bounds.len());
    let mut entropy = Vec::new();
    let mut carry: Option<(Tensor, Tensor)> = None;
    for (k, &(start, end)) in bounds.iter().enumerate() {
        let mut tape = Tape::new();
        let g = ModelGraph::bind(&mut tape, params, cfg, GradMode::Trainable)?;
        let x = g.embed(&mut tape, &s.image)?;
        let (mut grid, mut side) = match carry.take() {
            None => g.initial_state(&mut tape, s.dataset_id)?,
            // fresh differentiation root: the previous chunk is a constant input
            Some((gv, sv)) => (tape.leaf(gv), tape.leaf(sv)),
        };
        for _ in start..end {
            let st = g.step(&mut tape, grid, side, x);
            entropy.push(iteration_entropy(&tape, &st.attention)?);
            grid = st.grid;
            side = st.side;
        }
        let head = g.head(&mut tape, grid);
        let loss = tape.flow_loss(head, s.target.clone());
        let lv = tape.value(loss).data[0];
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { chunk: k + 1 });
        }
        chunk_losses.push(lv);
        let mut tg = tape.backward(loss);
        add_grads(&mut grads, &mut tg, &g.param_vars, 1.0 / m);
        carry = Some((tape.value(grid).clone(), tape.value(side).clone()));
    }
    Ok(SampleResult { chunk_losses, grads, entropy })
}

fn sample_attached(s: &Prepared, params: &ModelParams, cfg: &ModelConfig, bounds: &[(usize, usize)]) -> Result<SampleResult> {
    let m = bounds.len() as f64;
    let mut tape = Tape::new();
    let g = ModelGraph::bind(&mut tape, params, cfg, GradMode::Trainable)?;
    let x = g.embed(&mut tape, &s.image)?;
    let (mut grid, mut side) = g.initial_state(&mut tape, s.dataset_id)?;
    let mut entropy = Vec::new();
    let mut chunk_losses = Vec::new();
    let mut total: Option<Var> = None;
    for (k, &(start, end)) in bounds.iter().enumerate() {
        for _ in start..end {
            let st = g.step(&mut tape, grid, side, x);
            entropy.push(iteration_entropy(&tape, &st.attention)?);
            grid = st.grid;
            side = st.side;
        }
        let head = g.head(&mut tape, grid);
        let loss = tape.flow_loss(head, s.target.clone());
        let lv = tape.value(loss).data[0];
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { chunk: k + 1 });
        }
        chunk_losses.push(lv);
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss),
        });
    }
    let total = tape.scale(total.expect("at least one chunk"), 1.0 / m);
    let mut tg = tape.backward(total);
    let mut grads = vec![None; params.len()];
    add_grads(&mut grads, &mut tg, &g.param_vars, 1.0);
    Ok(SampleResult { chunk_losses, grads, entropy })
}

fn reduce(results: Vec<SampleResult>, params: &ModelParams, n_chunks: usize) -> LossReport {
    let b = results.len() as f64;
    let mut per_chunk = vec![0.0; n_chunks];
    let n_iter = results.first().map_or(0, |r| r.entropy.len());
    let mut entropy = vec![0.0; n_iter];
    let mut grads: Vec<Tensor> = params.entries().iter().map(|p| Tensor::zeros(p.value.rows, p.value.cols)).collect();
    for r in &results {
        for (acc, v) in per_chunk.iter_mut().zip(&r.chunk_losses) {
            *acc += v / b;
        }
        for (acc, v) in entropy.iter_mut().zip(&r.entropy) {
            *acc += v / b;
        }
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            if let Some(g) = g {
                for (a, v) in acc.data.iter_mut().zip(&g.data) {
                    *a += v / b;
                }
            }
        }
    }
    let total = per_chunk.iter().sum::<f64>() / n_chunks as f64;
    LossReport { total, per_chunk, grads, entropy }
}

/// Chunked loss with severed inter-chunk gradients.
pub fn chunked_loss_prepared(batch: &[Prepared], params: &ModelParams, model: &ModelConfig, n_chunks: usize) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let bounds = chunk_bounds(model.n_recursions, n_chunks);
    let results = batch
        .par_iter()
        .map(|s| sample_detached(s, params, model, &bounds))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(results, params, n_chunks))
}

/// Chunked loss for raw samples (targets are built from the labels; no
/// augmentation).
pub fn chunked_loss(batch: &[Sample], params: &ModelParams, model: &ModelConfig, cfg: &TrainConfig) -> Result<LossReport> {
    let prepared: Vec<Prepared> = batch.iter().map(|s| Prepared::new(s, model)).collect();
    chunked_loss_prepared(&prepared, params, model, cfg.n_chunks)
}

/// Same supervision points as [`chunked_loss_prepared`] but differentiated
/// through the whole unrolled recursion on one tape.
pub fn unrolled_loss_prepared(batch: &[Prepared], params: &ModelParams, model: &ModelConfig, n_chunks: usize) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let bounds = chunk_bounds(model.n_recursions, n_chunks);
    let results = batch
        .par_iter()
        .map(|s| sample_attached(s, params, model, &bounds))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(results, params, n_chunks))
}

/// Parameters, optimizer moments and the EMA shadow.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub moment1: Vec<Tensor>,
    pub moment2: Vec<Tensor>,
    pub ema: Vec<Tensor>,
    pub step: usize,
    pub epoch: usize,
    pub total_steps: usize,
    pub skipped_steps: usize,
}

impl TrainState {
    pub fn new(params: ModelParams, total_steps: usize) -> Self {
        let zeros: Vec<Tensor> = params.entries().iter().map(|p| Tensor::zeros(p.value.rows, p.value.cols)).collect();
        let ema = params.entries().iter().map(|p| p.value.clone()).collect();
        Self { params, moment1: zeros.clone(), moment2: zeros, ema, step: 0, epoch: 0, total_steps, skipped_steps: 0 }
    }

    /// Parameters with EMA values substituted.
    pub fn ema_params(&self) -> ModelParams {
        let mut p = self.params.clone();
        for (e, v) in p.entries_mut().iter_mut().zip(&self.ema) {
            e.value = v.clone();
        }
        p
    }
}

/// Decoupled-weight-decay Adam update followed by the EMA update. Only
/// trainable parameters move. Returns `false` when the step was skipped
/// because of a non-finite gradient.
pub fn apply_update(state: &mut TrainState, grads: &[Tensor], cfg: &TrainConfig) -> bool {
    let trainable: Vec<bool> = state.params.entries().iter().map(|p| p.trainable).collect();
    if grads.iter().zip(&trainable).any(|(g, &t)| t && !g.all_finite()) {
        state.skipped_steps += 1;
        log::warn!("non-finite gradient at step {}; update skipped", state.step);
        state.step += 1;
        return false;
    }
    let lr = learning_rate(cfg, state.step, state.total_steps);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, param) in state.params.entries_mut().iter_mut().enumerate() {
        if !trainable[i] {
            continue;
        }
        let (m, v, g) = (&mut state.moment1[i], &mut state.moment2[i], &grads[i]);
        for j in 0..g.len() {
            let gj = g.data[j];
            m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * gj;
            v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m.data[j] / bc1;
            let vhat = v.data[j] / bc2;
            let p = &mut param.value.data[j];
            *p -= lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + cfg.weight_decay * *p);
        }
        let e = &mut state.ema[i];
        for (ev, pv) in e.data.iter_mut().zip(&param.value.data) {
            *ev = cfg.ema_decay * *ev + (1.0 - cfg.ema_decay) * pv;
        }
    }
    state.step += 1;
    true
}

/// One optimisation step on a prepared batch.
pub fn train_step(batch: &[Prepared], state: &mut TrainState, model: &ModelConfig, cfg: &TrainConfig) -> Result<LossReport> {
    let report = chunked_loss_prepared(batch, &state.params, model, cfg.n_chunks)?;
    apply_update(state, &report.grads, cfg);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub chunk_losses: Vec<f64>,
    pub lr: f64,
    pub entropy: Vec<f64>,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let (nc, ne) = rows.first().map_or((0, 0), |r| (r.chunk_losses.len(), r.entropy.len()));
    let mut header = vec!["step".to_string(), "loss".into()];
    header.extend((1..=nc).map(|k| format!("chunk{k}_loss")));
    header.push("lr".into());
    header.extend((1..=ne).map(|i| format!("entropy_iter{i}")));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for r in rows {
        let mut cols = vec![r.step.to_string(), format!("{:.8e}", r.loss)];
        cols.extend(r.chunk_losses.iter().map(|v| format!("{v:.8e}")));
        cols.push(format!("{:.8e}", r.lr));
        cols.extend(r.entropy.iter().map(|v| format!("{v:.8e}")));
        writeln!(w, "{}", cols.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Stateless 64-bit mixer used to derive per-sample seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Where and how often [`train`] writes files.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    /// Start from these parameters instead of a fresh initialization.
    pub init: Option<ModelParams>,
    /// Print a progress line every this many steps (0 = never).
    pub log_every: usize,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    /// Final checkpoint; EMA weights are the inference default.
    pub checkpoint: Checkpoint,
}

/// Builds the augmented, target-annotated batch for global step `step`.
pub fn prepare_batch(samples: &[&Sample], model: &ModelConfig, cfg: &TrainConfig, step: usize) -> Vec<Prepared> {
    samples
        .par_iter()
        .enumerate()
        .map(|(j, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, (step as u64) << 16 | j as u64));
            Prepared::new(&augment(s, &cfg.augment, &mut rng), model)
        })
        .collect()
}

pub fn train(dataset: &[Sample], cfg: &TrainConfig, model: &ModelConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    model.validate()?;
    cfg.validate(model)?;
    let total = cfg.total_steps(dataset.len());
    let params = match &opts.init {
        Some(p) => p.clone(),
        None => ModelParams::init(model, &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xC0FFEE)))?,
    };
    let mut state = TrainState::new(params, total);
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = Vec::with_capacity(total);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    while state.step < total {
        if cursor >= order.len() {
            if !order.is_empty() {
                state.epoch += 1;
                maybe_checkpoint(&state, model, cfg, opts)?;
            }
            order = (0..dataset.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, state.epoch as u64 + 1)));
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let members: Vec<&Sample> = order[cursor..end].iter().map(|&i| &dataset[i]).collect();
        cursor = end;
        let batch = prepare_batch(&members, model, cfg, state.step);
        let lr = learning_rate(cfg, state.step, total);
        let step = state.step;
        let report = train_step(&batch, &mut state, model, cfg)?;
        if opts.log_every > 0 && step % opts.log_every == 0 {
            log::info!("step {step}/{total} loss {:.5} lr {lr:.2e}", report.total);
        }
        log.push(LogRow { step, loss: report.total, chunk_losses: report.per_chunk, lr, entropy: report.entropy });
    }
    state.epoch += 1;
    let checkpoint = Checkpoint::from_state(&state, model, cfg);
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(&dir.join("final.ckpt"))?;
        write_log_csv(&dir.join("metrics.csv"), &log)?;
    }
    Ok(TrainOutcome { state, log, checkpoint })
}

fn maybe_checkpoint(state: &TrainState, model: &ModelConfig, cfg: &TrainConfig, opts: &TrainOptions) -> Result<()> {
    let Some(dir) = &opts.out_dir else { return Ok(()) };
    if cfg.checkpoint_every == 0 || state.epoch % cfg.checkpoint_every != 0 {
        return Ok(());
    }
    Checkpoint::from_state(state, model, cfg).save(&dir.join(format!("epoch{:04}.ckpt", state.epoch)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_chunks: usize,
    /// Mean training loss over the last tenth of the run.
    pub final_loss: f64,
    /// Mean attention entropy over the same window.
    pub mean_entropy: f64,
}

/// Trains one model per chunk count at the given budget.
pub fn sweep_chunks(dataset: &[Sample], chunk_values: &[usize], cfg: &TrainConfig, model: &ModelConfig) -> Result<Vec<SweepRow>> {
    if chunk_values.is_empty() {
        return Err(Error::Config("chunk sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(chunk_values.len());
    for &m in chunk_values {
        let run_cfg = TrainConfig { n_chunks: m, ..cfg.clone() };
        let out = train(dataset, &run_cfg, model, &TrainOptions::default())?;
        let tail = (out.log.len() / 10).max(1);
        let window = &out.log[out.log.len() - tail..];
        let final_loss = window.iter().map(|r| r.loss).sum::<f64>() / tail as f64;
        let mean_entropy = window
            .iter()
            .map(|r| r.entropy.iter().sum::<f64>() / r.entropy.len().max(1) as f64)
            .sum::<f64>()
            / tail as f64;
        rows.push(SweepRow { n_chunks: m, final_loss, mean_entropy });
    }
    Ok(rows)
}
