//! Few-shot fine-tuning: full-model and low-rank adapter variants.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::flowfield::PostprocessConfig;
use crate::inference::evaluate;
use crate::metrics::ScoreReport;
use crate::model::{ModelConfig, ModelParams, Param};
use crate::tensor::Tensor;
use crate::training::{mix_seed, prepare_batch, train_step, TrainConfig, TrainState};

/// Weight-matrix roles that can carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Qkv,
    AttnOut,
    MlpIn,
    MlpOut,
    Embed,
    Head,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] =
        [LoraTarget::Qkv, LoraTarget::AttnOut, LoraTarget::MlpIn, LoraTarget::MlpOut, LoraTarget::Embed, LoraTarget::Head];

    pub fn as_str(self) -> &'static str {
        match self {
            LoraTarget::Qkv => "qkv",
            LoraTarget::AttnOut => "attn_out",
            LoraTarget::MlpIn => "mlp_in",
            LoraTarget::MlpOut => "mlp_out",
            LoraTarget::Embed => "embed",
            LoraTarget::Head => "head",
        }
    }

    /// Parameter names of the matrices this role covers.
    pub fn weight_names(self, cfg: &ModelConfig) -> Vec<String> {
        let per_layer = |s: &str| (0..cfg.core_layers).map(|l| format!("layers.{l}.{s}")).collect();
        match self {
            LoraTarget::Qkv => per_layer("attn.qkv.weight"),
            LoraTarget::AttnOut => per_layer("attn.out.weight"),
            LoraTarget::MlpIn => per_layer("mlp.fc1.weight"),
            LoraTarget::MlpOut => per_layer("mlp.fc2.weight"),
            LoraTarget::Embed => vec!["embed.weight".into()],
            LoraTarget::Head => vec!["head.weight".into()],
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoraTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LoraTarget::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| Error::UnknownLoraTarget(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Defaults to `rank` when unset.
    pub alpha: Option<f64>,
    /// Role names, e.g. `qkv`, `attn_out`, `mlp_in`, `mlp_out`, `embed`, `head`.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 16, alpha: None, targets: vec!["qkv".into(), "attn_out".into(), "mlp_in".into()] }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64) / self.rank as f64
    }

    pub fn resolved_targets(&self) -> Result<Vec<LoraTarget>> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target".into()));
        }
        let mut out = self.targets.iter().map(|t| t.parse()).collect::<Result<Vec<LoraTarget>>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

/// Freezes every base weight and attaches a zero-initialized low-rank
/// factor pair to each targeted matrix.
pub fn inject_lora<R: Rng + ?Sized>(base: &ModelParams, model: &ModelConfig, cfg: &LoraConfig, rng: &mut R) -> Result<ModelParams> {
    let targets = cfg.resolved_targets()?;
    let mut params = base.clone();
    params.set_all_trainable(false);
    params.lora_scale = cfg.scale();
    for t in targets {
        for name in t.weight_names(model) {
            let w = base.get(&name).ok_or_else(|| Error::UnknownLoraTarget(format!("{t} (no parameter `{name}`)")))?;
            let a_name = format!("{name}.lora_a");
            if params.position(&a_name).is_some() {
                return Err(Error::Config(format!("`{name}` already carries an adapter")));
            }
            let (rows, cols) = (w.rows, w.cols);
            let a = Tensor::randn(rows, cfg.rank, 1.0 / (rows as f64).sqrt(), rng);
            params.push(Param { name: a_name, value: a, trainable: true });
            params.push(Param { name: format!("{name}.lora_b"), value: Tensor::zeros(cfg.rank, cols), trainable: true });
        }
    }
    Ok(params)
}

/// Folds adapters into their base weights and drops the factors.
pub fn merge_lora(params: &ModelParams) -> ModelParams {
    let mut entries: Vec<Param> = params.entries().iter().filter(|p| !p.name.ends_with(".lora_a") && !p.name.ends_with(".lora_b")).cloned().collect();
    for e in &mut entries {
        if let (Some(a), Some(b)) = (params.get(&format!("{}.lora_a", e.name)), params.get(&format!("{}.lora_b", e.name))) {
            let mut delta = a.matmul(b);
            delta.scale_assign(params.lora_scale);
            e.value.add_assign(&delta);
        }
        e.trainable = true;
    }
    ModelParams::from_entries(entries, 1.0)
}

/// Draws `shots` distinct indices among samples whose instance count is at
/// least the dataset mean.
pub fn sample_shots<R: Rng + ?Sized>(dataset: &[Sample], shots: usize, rng: &mut R) -> Result<Vec<usize>> {
    if shots == 0 {
        return Err(Error::Config("shots must be >= 1".into()));
    }
    let counts: Vec<usize> = dataset.iter().map(|s| s.labels.n_instances()).collect();
    let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
    let pool: Vec<usize> = (0..dataset.len()).filter(|&i| counts[i] as f64 >= mean).collect();
    if pool.len() < shots {
        return Err(Error::NotEnoughShots { available: pool.len(), requested: shots });
    }
    Ok(sample_indices(rng, pool.len(), shots).into_iter().map(|i| pool[i]).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    Full,
    Lora,
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AdaptMode::Full),
            "lora" => Ok(AdaptMode::Lora),
            other => Err(Error::Config(format!("unknown adaptation mode `{other}` (expected full or lora)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub shots: usize,
    pub mode: AdaptMode,
    pub lora: LoraConfig,
    /// Steps per loss window of the convergence test.
    pub window: usize,
    /// Stop once the relative improvement between consecutive windows
    /// falls below this.
    pub tolerance: f64,
    pub max_steps: usize,
    /// Optimizer, schedule (spanning `max_steps`), augmentation and seed.
    pub train: TrainConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            shots: 4,
            mode: AdaptMode::Lora,
            lora: LoraConfig::default(),
            window: 50,
            tolerance: 1e-3,
            max_steps: 2000,
            train: TrainConfig { batch_size: 4, ema_decay: 0.99, weight_decay: 0.0, ..TrainConfig::default() },
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        if self.window == 0 || self.max_steps < 2 * self.window {
            return Err(Error::Config("max_steps must cover at least two convergence windows".into()));
        }
        if self.mode == AdaptMode::Lora {
            self.lora.resolved_targets()?;
        }
        self.train.validate(model)
    }
}

pub struct FinetuneOutcome {
    /// EMA weights plus run metadata.
    pub checkpoint: Checkpoint,
    pub steps: usize,
    pub final_loss: f64,
    pub converged: bool,
    /// Set when the step cap was hit before convergence.
    pub warning: Option<String>,
    pub losses: Vec<f64>,
}

/// Trains on `examples` until the windowed mean loss stops improving.
pub fn finetune(base: &Checkpoint, examples: &[Sample], cfg: &AdaptConfig) -> Result<FinetuneOutcome> {
    if examples.is_empty() {
        return Err(Error::Config("fine-tuning needs at least one example".into()));
    }
    let model = &base.model;
    cfg.validate(model)?;
    let base_params = base.inference_params();
    let params = match cfg.mode {
        AdaptMode::Full => {
            let mut p = base_params;
            p.set_all_trainable(true);
            p
        }
        AdaptMode::Lora => inject_lora(&base_params, model, &cfg.lora, &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.train.seed, 0x10FA)))?,
    };
    let mut state = TrainState::new(params, cfg.max_steps);
    let mut losses = Vec::new();
    let mut converged = false;
    let mut cursor = 0;
    while state.step < cfg.max_steps {
        let members: Vec<&Sample> =
            (0..cfg.train.batch_size.min(examples.len())).map(|j| &examples[(cursor + j) % examples.len()]).collect();
        cursor = (cursor + members.len()) % examples.len();
        let batch = prepare_batch(&members, model, &cfg.train, state.step);
        let report = train_step(&batch, &mut state, model, &cfg.train)?;
        losses.push(report.total);
        let n = losses.len();
        if n >= 2 * cfg.window && n % cfg.window == 0 {
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            let prev = mean(&losses[n - 2 * cfg.window..n - cfg.window]);
            let cur = mean(&losses[n - cfg.window..]);
            if (prev - cur) / prev.abs().max(f64::MIN_POSITIVE) < cfg.tolerance {
                converged = true;
                break;
            }
        }
    }
    let warning = (!converged).then(|| format!("loss did not converge within {} steps", cfg.max_steps));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let mut checkpoint = Checkpoint::from_state(&state, model, &cfg.train);
    checkpoint.meta["mode"] = serde_json::to_value(cfg.mode)?;
    checkpoint.meta["converged"] = converged.into();
    checkpoint.meta["warning"] = serde_json::to_value(&warning)?;
    Ok(FinetuneOutcome { checkpoint, steps: state.step, final_loss: *losses.last().expect("at least one step"), converged, warning, losses })
}

/// Record of one adaptation trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptRun {
    pub trial: usize,
    pub seed: u64,
    pub shots: usize,
    pub mode: AdaptMode,
    pub base_checkpoint: String,
    pub shot_ids: Vec<String>,
    pub window: usize,
    pub tolerance: f64,
    pub steps: usize,
    pub final_loss: f64,
    pub converged: bool,
    pub warning: Option<String>,
    pub trainable_params: usize,
    pub before: ScoreReport,
    pub after: ScoreReport,
}

/// Everything a batch of trials needs besides the base checkpoint.
pub struct TrialSetup<'a> {
    pub pool: &'a [Sample],
    pub heldout: &'a [Sample],
    pub cfg: &'a AdaptConfig,
    pub post: &'a PostprocessConfig,
    pub iou_threshold: f64,
    pub base_label: String,
}

/// Runs independent seeded trials: sample shots from the pool, fine-tune,
/// and score the held-out set before and after. Results follow trial order.
pub fn run_trials(base: &Checkpoint, setup: &TrialSetup<'_>, trials: usize, seed: u64) -> Result<(Vec<AdaptRun>, Vec<Checkpoint>)> {
    let model = &base.model;
    let before = evaluate(setup.heldout, &base.inference_params(), model, setup.post, setup.iou_threshold)?;
    let results = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let trial_seed = mix_seed(seed, trial as u64);
            let ids = sample_shots(setup.pool, setup.cfg.shots, &mut ChaCha8Rng::seed_from_u64(trial_seed))?;
            let examples: Vec<Sample> = ids.iter().map(|&i| setup.pool[i].clone()).collect();
            let mut cfg = setup.cfg.clone();
            cfg.train.seed = trial_seed;
            let out = finetune(base, &examples, &cfg)?;
            let adapted = out.checkpoint.inference_params();
            let after = evaluate(setup.heldout, &adapted, model, setup.post, setup.iou_threshold)?;
            let run = AdaptRun {
                trial,
                seed: trial_seed,
                shots: cfg.shots,
                mode: cfg.mode,
                base_checkpoint: setup.base_label.clone(),
                shot_ids: examples.iter().map(|s| s.name.clone()).collect(),
                window: cfg.window,
                tolerance: cfg.tolerance,
                steps: out.steps,
                final_loss: out.final_loss,
                converged: out.converged,
                warning: out.warning,
                trainable_params: adapted.count_trainable(),
                before: before.clone(),
                after,
            };
            Ok((run, out.checkpoint))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().unzip())
}
