//! Whole-image prediction with tiling, and per-iteration scoring.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{stitch_fields, tile, Sample};
use crate::error::{Error, Result};
use crate::flowfield::{flow_to_labels, FlowTarget, PostprocessConfig};
use crate::grid::{Image, InstanceMap};
use crate::metrics::{macro_average, score, ScoreReport};
use crate::model::{forward, ModelConfig, ModelParams};

#[derive(Clone, Debug)]
pub struct Prediction {
    pub field: FlowTarget,
    pub intercepted: BTreeMap<usize, FlowTarget>,
    /// Mean attention entropy `[iteration - 1][layer]`, averaged over tiles.
    pub entropy: Vec<Vec<f64>>,
}

/// Default tile overlap: one eighth of the model input, in whole patches.
pub fn default_overlap(cfg: &ModelConfig) -> usize {
    (cfg.input_size / 8 / cfg.stride) * cfg.stride
}

/// Runs the model over an image of any size. Images that do not match the
/// model input are cut into reflect-padded tiles whose fields are averaged
/// back together.
pub fn predict(
    image: &Image,
    dataset_id: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
    intercept: &[usize],
    overlap: usize,
) -> Result<Prediction> {
    let image = image.with_channels(cfg.channels);
    let (h, w) = image.dims();
    if h == cfg.input_size && w == cfg.input_size {
        let out = forward(&image, dataset_id, params, cfg, intercept)?;
        return Ok(Prediction { field: out.prediction, intercepted: out.intercepted, entropy: out.entropy });
    }
    let holder = Sample::new("tile", image, InstanceMap::empty(h, w), dataset_id)?;
    let tiles = tile(&holder, cfg.input_size, overlap)?;
    let outs = tiles
        .par_iter()
        .map(|(t, _)| forward(&t.image, dataset_id, params, cfg, intercept))
        .collect::<Result<Vec<_>>>()?;
    let stitch = |pick: &dyn Fn(usize) -> Image| -> Result<FlowTarget> {
        let parts: Vec<(Image, (usize, usize))> = tiles.iter().enumerate().map(|(i, (_, off))| (pick(i), *off)).collect();
        FlowTarget::from_image(&stitch_fields(&parts, h, w))
    };
    let field = stitch(&|i| outs[i].prediction.to_image())?;
    let mut intercepted = BTreeMap::new();
    for &k in outs[0].intercepted.keys() {
        intercepted.insert(k, stitch(&|i| outs[i].intercepted[&k].to_image())?);
    }
    let mut entropy = outs[0].entropy.clone();
    for o in &outs[1..] {
        for (acc, row) in entropy.iter_mut().zip(&o.entropy) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    for row in &mut entropy {
        for a in row.iter_mut() {
            *a /= outs.len() as f64;
        }
    }
    Ok(Prediction { field, intercepted, entropy })
}

/// Predicts and post-processes into an instance map.
pub fn segment(
    image: &Image,
    dataset_id: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
    post: &PostprocessConfig,
) -> Result<InstanceMap> {
    let p = predict(image, dataset_id, params, cfg, &[], default_overlap(cfg))?;
    Ok(flow_to_labels(&p.field, post))
}

/// Scores every sample against its labels and macro-averages.
pub fn evaluate(
    samples: &[Sample],
    params: &ModelParams,
    cfg: &ModelConfig,
    post: &PostprocessConfig,
    iou_threshold: f64,
) -> Result<ScoreReport> {
    let reports = samples
        .iter()
        .map(|s| score(&segment(&s.image, s.dataset_id, params, cfg, post)?, &s.labels, iou_threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(macro_average(&reports))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub dice: f64,
}

/// Scores the head projection of each intercepted iteration, macro-averaged
/// over `samples`. Rows follow ascending iteration.
pub fn iteration_curve(
    samples: &[Sample],
    params: &ModelParams,
    cfg: &ModelConfig,
    intercept: &[usize],
    post: &PostprocessConfig,
    iou_threshold: f64,
) -> Result<Vec<CurveRow>> {
    if intercept.is_empty() {
        return Err(Error::Config("iteration curve needs at least one intercept iteration".into()));
    }
    let mut per_iter: BTreeMap<usize, Vec<ScoreReport>> = BTreeMap::new();
    for s in samples {
        let p = predict(&s.image, s.dataset_id, params, cfg, intercept, default_overlap(cfg))?;
        for (&k, field) in &p.intercepted {
            let r = score(&flow_to_labels(field, post), &s.labels, iou_threshold)?;
            per_iter.entry(k).or_default().push(r);
        }
    }
    Ok(per_iter
        .into_iter()
        .map(|(iteration, reports)| {
            let m = macro_average(&reports);
            CurveRow { iteration, precision: m.precision, recall: m.recall, f1: m.f1, dice: m.dice }
        })
        .collect())
}

pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut out = String::from("iteration,precision,recall,f1,dice\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.iteration, r.precision, r.recall, r.f1, r.dice));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { d: 8, stride: 4, input_size: 16, n_recursions: 3, side_tokens: 2, n_heads: 2, ..Default::default() }
    }

    #[test]
    fn tiling_covers_large_images() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let img = Image::zeros(37, 23, 1);
        let p = predict(&img, 0, &params, &cfg, &[2], 4).unwrap();
        assert_eq!((p.field.height, p.field.width), (37, 23));
        assert!(p.field.fg.iter().all(|v| v.is_finite() && *v > 0.0));
        assert_eq!(p.intercepted[&2].fg.len(), 37 * 23);
        assert_eq!(p.entropy.len(), 3);
    }

    #[test]
    fn final_intercept_matches_plain_prediction() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let img = Image::zeros(16, 16, 2);
        let a = predict(&img, 0, &params, &cfg, &[3], 0).unwrap();
        let b = predict(&img, 0, &params, &cfg, &[], 0).unwrap();
        assert_eq!(a.intercepted[&3], b.field);
    }

    #[test]
    fn empty_intercept_is_an_error() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(iteration_curve(&[], &params, &cfg, &[], &PostprocessConfig::default(), 0.5).is_err());
    }
}
