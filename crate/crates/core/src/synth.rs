//! Synthetic microscopy-like samples: soft, noisy, non-touching ellipses.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::grid::{Image, InstanceMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub size: usize,
    pub min_cells: usize,
    pub max_cells: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Std of additive Gaussian pixel noise.
    pub noise: f64,
    /// Dark cells on a bright background.
    pub invert: bool,
    /// Minimum background gap between cells, in pixels.
    pub gap: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { size: 64, min_cells: 3, max_cells: 8, min_radius: 4.0, max_radius: 8.0, noise: 0.05, invert: false, gap: 2 }
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalised radial coordinate; `< 1` inside.
    fn rho(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        (u * u + v * v).sqrt()
    }
}

/// Draws one sample. Cell count is uniform in `min_cells..=max_cells`; cells
/// that cannot be placed without touching after 200 attempts are skipped.
pub fn generate<R: Rng + ?Sized>(cfg: &SynthConfig, name: &str, dataset_id: usize, rng: &mut R) -> Sample {
    let n = cfg.size;
    let target = rng.random_range(cfg.min_cells..=cfg.max_cells.max(cfg.min_cells));
    let mut labels = InstanceMap::empty(n, n);
    // Cells keep their ellipses for rendering.
    let mut cells: Vec<Ellipse> = Vec::new();
    let mut attempts = 0;
    while cells.len() < target && attempts < 200 {
        attempts += 1;
        let a = rng.random_range(cfg.min_radius..=cfg.max_radius);
        let b = rng.random_range(cfg.min_radius..=cfg.max_radius);
        let reach = a.max(b);
        let lo = reach + 1.0;
        let hi = n as f64 - reach - 2.0;
        if hi <= lo {
            break;
        }
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let e = Ellipse {
            cy: rng.random_range(lo..hi),
            cx: rng.random_range(lo..hi),
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        };
        let pixels: Vec<(usize, usize)> = (0..n)
            .flat_map(|y| (0..n).map(move |x| (y, x)))
            .filter(|&(y, x)| e.rho(y as f64, x as f64) <= 1.0)
            .collect();
        if pixels.is_empty() {
            continue;
        }
        let g = cfg.gap as isize;
        let clear = pixels.iter().all(|&(y, x)| {
            (-g..=g).all(|dy| {
                (-g..=g).all(|dx| {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    yy < 0 || xx < 0 || yy >= n as isize || xx >= n as isize || labels.get(yy as usize, xx as usize) == 0
                })
            })
        });
        if !clear {
            continue;
        }
        let id = cells.len() as u32 + 1;
        for (y, x) in pixels {
            labels.set(y, x, id);
        }
        cells.push(e);
    }

    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("noise std is finite");
    let mut image = Image::zeros(n, n, 1);
    for y in 0..n {
        for x in 0..n {
            let mut v: f64 = 0.1;
            for c in &cells {
                // soft edge, ~1 px wide
                let r = c.rho(y as f64, x as f64);
                let edge = (r - 1.0) * c.a.min(c.b);
                v = v.max(0.1 + 0.8 / (1.0 + (edge * 2.0).exp()));
            }
            if cfg.noise > 0.0 {
                v += noise.sample(rng);
            }
            let v = v.clamp(0.0, 1.0);
            image.set(y, x, 0, if cfg.invert { 1.0 - v } else { v });
        }
    }
    Sample { name: name.to_owned(), image, labels, dataset_id }
}

/// `count` samples named `<prefix>NNN`, all drawn from one random stream.
pub fn generate_set<R: Rng + ?Sized>(cfg: &SynthConfig, count: usize, prefix: &str, dataset_id: usize, rng: &mut R) -> Vec<Sample> {
    (0..count).map(|i| generate(cfg, &format!("{prefix}{i:03}"), dataset_id, rng)).collect()
}
