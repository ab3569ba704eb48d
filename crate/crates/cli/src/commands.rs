use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ucell_core::adaptation::{run_trials, AdaptMode, TrialSetup};
use ucell_core::checkpoint::Checkpoint;
use ucell_core::data::{load_dataset, read_image, read_labels, write_field, write_image, write_labels, Manifest, Sample};
use ucell_core::flowfield::flow_to_labels;
use ucell_core::inference::{default_overlap, iteration_curve, predict, write_curve_csv};
use ucell_core::metrics::score_dataset;
use ucell_core::model::ModelConfig;
use ucell_core::synth::{generate_set, SynthConfig};
use ucell_core::training::{mix_seed, sweep_chunks, train as run_training, TrainOptions};

use crate::config::RunConfig;
use crate::svg::{line_chart, Series};
use crate::{init_logging, AdaptArgs, CliError, Common, EvalArgs, InferArgs, InspectArgs, SweepArgs, SynthArgs, TrainArgs};

const IMAGE_EXTS: [&str; 3] = ["png", "tif", "tiff"];

fn runtime(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Loads the config, applies common flags and `apply`, and creates the
/// output directory.
fn prepare(common: &Common, apply: impl FnOnce(&mut RunConfig) -> Result<(), CliError>) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    init_logging(common, &cfg.log_level);
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    apply(&mut cfg)?;
    cfg.finalize()?;
    let out = cfg.resolve_output(common.out.clone());
    fs::create_dir_all(&out).map_err(|e| runtime(&out, e))?;
    Ok((cfg, out))
}

fn save_config(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let text = toml::to_string_pretty(cfg).map_err(|e| CliError::Runtime(format!("serializing config: {e}")))?;
    let path = out.join("run_config.toml");
    fs::write(&path, text).map_err(|e| runtime(&path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime(path, e))
}

fn load_manifest(path: &Path) -> Result<Vec<Sample>, CliError> {
    let manifest = Manifest::from_file(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    Ok(load_dataset(root, &manifest)?)
}

fn synthetic(cfg: &SynthConfig, count: usize, prefix: &str, seed: u64) -> Vec<Sample> {
    generate_set(cfg, count, prefix, 0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Manifest data when configured, otherwise the synthetic generator.
fn training_data(cfg: &RunConfig) -> Result<Vec<Sample>, CliError> {
    let data = match &cfg.data.manifest {
        Some(m) => load_manifest(m)?,
        None => synthetic(&cfg.data.synthetic, cfg.data.synthetic_count, "syn", mix_seed(cfg.seed, 1)),
    };
    if data.is_empty() {
        return Err(CliError::Usage("training data is empty".into()));
    }
    if let Some(s) = data.iter().find(|s| s.dataset_id >= cfg.model.n_datasets) {
        return Err(CliError::Usage(format!(
            "sample {} belongs to dataset {} but model.n_datasets is {}",
            s.name, s.dataset_id, cfg.model.n_datasets
        )));
    }
    Ok(data)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn is_image(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_owned()
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| runtime(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    out.sort();
    Ok(out)
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let (cfg, out) = prepare(&a.common, |cfg| {
        if let Some(s) = a.steps {
            cfg.train.steps = Some(s);
        }
        if let Some(e) = a.epochs {
            cfg.train.epochs = e;
            cfg.train.steps = None;
        }
        if let Some(m) = a.chunks {
            cfg.train.n_chunks = m;
        }
        if let Some(b) = a.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(lr) = a.lr {
            cfg.train.lr_start = lr;
        }
        if let Some(m) = &a.manifest {
            cfg.data.manifest = Some(m.clone());
        }
        Ok(())
    })?;
    cfg.train.validate(&cfg.model)?;
    let data = training_data(&cfg)?;
    let init = match &a.init {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.model != cfg.model {
                return Err(CliError::Usage(format!("{} was trained with a different model configuration", p.display())));
            }
            Some(ck.inference_params())
        }
        None => None,
    };
    save_config(&cfg, &out)?;
    let opts = TrainOptions { out_dir: Some(out.clone()), init, log_every: 10 };
    let outcome = run_training(&data, &cfg.train, &cfg.model, &opts)?;
    let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} steps on {} samples; final loss {last:.6}; checkpoint {}",
        outcome.state.step,
        data.len(),
        out.join("final.ckpt").display()
    );
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<(), CliError> {
    let (cfg, out) = prepare(&a.common, |_| Ok(()))?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let (model, params) = (&ck.model, ck.inference_params());
    if a.dataset_id >= model.n_datasets {
        return Err(CliError::Usage(format!("dataset id {} out of range (model has {})", a.dataset_id, model.n_datasets)));
    }
    let mut files = Vec::new();
    for p in &a.input {
        if p.is_dir() {
            files.extend(list_images(p)?.into_iter().filter(|f| !stem(f).ends_with("_label")));
        } else if p.exists() {
            files.push(p.clone());
        } else {
            return Err(CliError::Usage(format!("input {} does not exist", p.display())));
        }
    }
    let intercept = a.intercept.unwrap_or_default();
    let overlap = a.overlap.unwrap_or_else(|| default_overlap(model));
    for f in &files {
        let mut image = read_image(f)?;
        image.normalize_unit();
        let name = stem(f);
        let pred = predict(&image, a.dataset_id, &params, model, &intercept, overlap)?;
        let labels = flow_to_labels(&pred.field, &cfg.postprocess);
        write_labels(&out.join(format!("{name}_label.png")), &labels)?;
        if a.dump_fields {
            write_field(&out.join(format!("{name}_field.tif")), &pred.field.to_image())?;
        }
        for (k, field) in &pred.intercepted {
            write_labels(&out.join(format!("{name}_iter{k}_label.png")), &flow_to_labels(field, &cfg.postprocess))?;
            if a.dump_fields {
                write_field(&out.join(format!("{name}_iter{k}_field.tif")), &field.to_image())?;
            }
        }
        println!("{name}: {} instances", labels.n_instances());
    }
    Ok(())
}

/// Label maps in `dir` keyed by image name. When the directory holds
/// `*_label` files only those count, with the suffix dropped.
fn label_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let files = list_images(dir)?;
    let labelled: Vec<&PathBuf> = files.iter().filter(|f| stem(f).ends_with("_label")).collect();
    Ok(if labelled.is_empty() {
        files.iter().map(|f| (stem(f), f.clone())).collect()
    } else {
        labelled.into_iter().map(|f| (stem(f).trim_end_matches("_label").to_owned(), f.clone())).collect()
    })
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let (cfg, out) = prepare(&a.common, |cfg| {
        if let Some(iou) = a.iou {
            cfg.eval.iou_threshold = iou;
        }
        Ok(())
    })?;
    for d in [&a.pred_dir, &a.gt_dir] {
        if !d.is_dir() {
            return Err(CliError::Usage(format!("{} is not a directory", d.display())));
        }
    }
    let preds = label_files(&a.pred_dir)?;
    let gts = label_files(&a.gt_dir)?;
    if gts.is_empty() {
        return Err(CliError::Usage(format!("no label maps in {}", a.gt_dir.display())));
    }
    let mut names = Vec::new();
    let mut pairs = Vec::new();
    for (name, gt_path) in &gts {
        let pred_path =
            preds.get(name).ok_or_else(|| CliError::Runtime(format!("no prediction for {name} in {}", a.pred_dir.display())))?;
        pairs.push((read_labels(pred_path)?, read_labels(gt_path)?));
        names.push(name.clone());
    }
    for extra in preds.keys().filter(|k| !gts.contains_key(*k)) {
        log::warn!("prediction {extra} has no ground truth; skipped");
    }
    let (per, macro_avg) = score_dataset(&pairs, cfg.eval.iou_threshold)?;
    let mut csv = String::from("image,precision,recall,f1,dice,n_pred,n_gt\n");
    for (n, r) in names.iter().zip(&per).chain(std::iter::once((&"macro".to_string(), &macro_avg))) {
        csv.push_str(&format!("{n},{},{},{},{},{},{}\n", r.precision, r.recall, r.f1, r.dice, r.n_pred, r.n_gt));
    }
    let path = out.join(&a.report);
    write_text(&path, &csv)?;
    println!(
        "{} images: precision {:.4} recall {:.4} f1 {:.4} dice {:.4}; report {}",
        per.len(),
        macro_avg.precision,
        macro_avg.recall,
        macro_avg.f1,
        macro_avg.dice,
        path.display()
    );
    Ok(())
}

pub fn adapt(a: AdaptArgs) -> Result<(), CliError> {
    let base = load_checkpoint(&a.base)?;
    let (mut cfg, out) = prepare(&a.common, |cfg| {
        let ad = &mut cfg.adapt;
        if let Some(s) = a.shots {
            ad.shots = s;
        }
        if let Some(m) = &a.mode {
            ad.mode = m.parse()?;
        }
        if let Some(r) = a.rank {
            ad.lora.rank = r;
        }
        if a.alpha.is_some() {
            ad.lora.alpha = a.alpha;
        }
        if let Some(t) = &a.targets {
            ad.lora.targets = t.split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect();
        }
        if let Some(m) = a.max_steps {
            ad.max_steps = m;
        }
        Ok(())
    })?;
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be >= 1".into()));
    }
    cfg.adapt.train.augment.crop_size = base.model.input_size;
    cfg.adapt.validate(&base.model)?;
    let inverted = SynthConfig { invert: true, ..cfg.data.synthetic.clone() };
    let pool = match &a.pool {
        Some(m) => load_manifest(m)?,
        None => synthetic(&inverted, cfg.data.synthetic_count, "pool", mix_seed(cfg.seed, 2)),
    };
    let heldout = match &a.heldout {
        Some(m) => load_manifest(m)?,
        None => synthetic(&inverted, cfg.data.heldout_count, "held", mix_seed(cfg.seed, 3)),
    };
    save_config(&cfg, &out)?;
    let setup = TrialSetup {
        pool: &pool,
        heldout: &heldout,
        cfg: &cfg.adapt,
        post: &cfg.postprocess,
        iou_threshold: cfg.eval.iou_threshold,
        base_label: a.base.display().to_string(),
    };
    let (runs, checkpoints) = run_trials(&base, &setup, a.trials, cfg.seed)?;
    let mut summary = String::from("trial,steps,final_loss,converged,f1_before,f1_after,dice_before,dice_after\n");
    for (run, ck) in runs.iter().zip(&checkpoints) {
        let json = serde_json::to_string_pretty(run).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_text(&out.join(format!("trial_{}.json", run.trial)), &json)?;
        ck.save(&out.join(format!("trial_{}.ckpt", run.trial)))?;
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            run.trial, run.steps, run.final_loss, run.converged, run.before.f1, run.after.f1, run.before.dice, run.after.dice
        ));
        let mode = match run.mode {
            AdaptMode::Full => "full",
            AdaptMode::Lora => "lora",
        };
        println!(
            "trial {} ({mode}, {} shots): f1 {:.4} -> {:.4} after {} steps{}",
            run.trial,
            run.shots,
            run.before.f1,
            run.after.f1,
            run.steps,
            if run.converged { "" } else { " (step cap reached)" }
        );
    }
    write_text(&out.join("adapt_summary.csv"), &summary)
}

fn default_sample(cfg: &RunConfig, model: &ModelConfig) -> Sample {
    let sc = SynthConfig { size: model.input_size, ..cfg.data.synthetic.clone() };
    synthetic(&sc, 1, "inspect", mix_seed(cfg.seed, 4)).remove(0)
}

pub fn inspect(a: InspectArgs) -> Result<(), CliError> {
    let (cfg, out) = prepare(&a.common, |_| Ok(()))?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let (model, params) = (&ck.model, ck.inference_params());
    let sample = match &a.image {
        Some(p) => {
            let mut image = read_image(p)?;
            image.normalize_unit();
            let (h, w) = image.dims();
            let labels = match &a.labels {
                Some(l) => read_labels(l)?,
                None if a.curve.is_some() => return Err(CliError::Usage("--curve with --image needs --labels".into())),
                None => ucell_core::grid::InstanceMap::empty(h, w),
            };
            Sample::new(stem(p), image, labels, a.dataset_id)?
        }
        None => Sample { dataset_id: a.dataset_id, ..default_sample(&cfg, model) },
    };
    let dumps: Vec<usize> = a.dump_fields.clone().unwrap_or_default();
    let pred = predict(&sample.image, sample.dataset_id, &params, model, &dumps, default_overlap(model))?;
    entropy_report(&pred.entropy, &out, a.plot)?;
    for (k, field) in &pred.intercepted {
        write_field(&out.join(format!("field_iter{k}.tif")), &field.to_image())?;
    }
    if let Some(iters) = &a.curve {
        let rows = iteration_curve(std::slice::from_ref(&sample), &params, model, iters, &cfg.postprocess, cfg.eval.iou_threshold)?;
        write_curve_csv(&out.join("curve.csv"), &rows)?;
        if a.plot {
            let f1 = Series { name: "F1".into(), points: rows.iter().map(|r| (r.iteration as f64, r.f1)).collect() };
            let dice = Series { name: "Dice".into(), points: rows.iter().map(|r| (r.iteration as f64, r.dice)).collect() };
            write_text(&out.join("curve.svg"), &line_chart("Score by iteration", "iteration", "score", &[f1, dice]))?;
        }
        for r in &rows {
            println!("iteration {}: f1 {:.4} dice {:.4}", r.iteration, r.f1, r.dice);
        }
    }
    if a.image.is_none() && a.curve.is_some() {
        write_labels(&out.join("inspect_label.png"), &sample.labels)?;
        write_image(&out.join("inspect.png"), &sample.image)?;
    }
    Ok(())
}

/// `entropy.csv` with one row per iteration: per-layer entropies and their mean.
fn entropy_report(entropy: &[Vec<f64>], out: &Path, plot: bool) -> Result<(), CliError> {
    let layers = entropy.first().map_or(0, Vec::len);
    let mut csv = String::from("iteration");
    for l in 0..layers {
        csv.push_str(&format!(",layer_{l}"));
    }
    csv.push_str(",mean\n");
    for (i, row) in entropy.iter().enumerate() {
        csv.push_str(&(i + 1).to_string());
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        csv.push_str(&format!(",{}\n", row.iter().sum::<f64>() / row.len().max(1) as f64));
    }
    write_text(&out.join("entropy.csv"), &csv)?;
    if plot {
        let mut series: Vec<Series> = (0..layers)
            .map(|l| Series { name: format!("layer {l}"), points: entropy.iter().enumerate().map(|(i, r)| ((i + 1) as f64, r[l])).collect() })
            .collect();
        series.push(Series {
            name: "mean".into(),
            points: entropy.iter().enumerate().map(|(i, r)| ((i + 1) as f64, r.iter().sum::<f64>() / r.len().max(1) as f64)).collect(),
        });
        write_text(&out.join("entropy.svg"), &line_chart("Attention entropy", "iteration", "entropy (nats)", &series))?;
    }
    println!("entropy over {} iterations written to {}", entropy.len(), out.join("entropy.csv").display());
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let (cfg, out) = prepare(&a.common, |cfg| {
        if let Some(s) = a.steps {
            cfg.train.steps = Some(s);
        }
        if let Some(m) = &a.manifest {
            cfg.data.manifest = Some(m.clone());
        }
        Ok(())
    })?;
    let unique: BTreeSet<usize> = a.chunks.iter().copied().collect();
    if unique.len() != a.chunks.len() || a.chunks.is_empty() {
        return Err(CliError::Usage("--chunks needs distinct values".into()));
    }
    for &m in &a.chunks {
        let probe = ucell_core::training::TrainConfig { n_chunks: m, ..cfg.train.clone() };
        probe.validate(&cfg.model)?;
    }
    let data = training_data(&cfg)?;
    save_config(&cfg, &out)?;
    let rows = sweep_chunks(&data, &a.chunks, &cfg.train, &cfg.model)?;
    let mut csv = String::from("n_chunks,final_loss,mean_entropy\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.n_chunks, r.final_loss, r.mean_entropy));
        println!("chunks {:>2}: final loss {:.6}, mean entropy {:.4}", r.n_chunks, r.final_loss, r.mean_entropy);
    }
    write_text(&out.join("sweep.csv"), &csv)?;
    if a.plot {
        let loss = Series { name: "final loss".into(), points: rows.iter().map(|r| (r.n_chunks as f64, r.final_loss)).collect() };
        write_text(&out.join("sweep.svg"), &line_chart("Chunk-count sweep", "chunks", "training loss", &[loss]))?;
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let (cfg, out) = prepare(&a.common, |_| Ok(()))?;
    let sc = SynthConfig { size: a.size.unwrap_or(cfg.data.synthetic.size), invert: a.invert || cfg.data.synthetic.invert, ..cfg.data.synthetic.clone() };
    if sc.size < 8 {
        return Err(CliError::Usage("--size must be at least 8".into()));
    }
    let samples = synthetic(&sc, a.count, "syn", mix_seed(cfg.seed, 5));
    for s in &samples {
        write_image(&out.join(format!("{}.png", s.name)), &s.image)?;
        write_labels(&out.join(format!("{}_label.png", s.name)), &s.labels)?;
    }
    write_text(&out.join("manifest.toml"), "[[dataset]]\nname = \"synthetic\"\ndir = \".\"\n")?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}
