//! Gradient-field representation of instance segmentations.
//!
//! Forward: every cell is turned into a heat map by repeatedly injecting
//! heat at its median pixel and averaging over the 3×3 neighbourhood
//! restricted to the cell; the normalised spatial gradient of that map
//! points toward the cell centre. Backward: foreground pixels are advected
//! along the field and grouped by where they end up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, InstanceMap};

/// Per-pixel `(dy, dx)` flow and foreground probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTarget {
    pub height: usize,
    pub width: usize,
    /// Interleaved `(dy, dx)`, `2·H·W` values.
    pub flow: Vec<f64>,
    pub fg: Vec<f64>,
}

impl FlowTarget {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, flow: vec![0.0; 2 * height * width], fg: vec![0.0; height * width] }
    }

    /// 3-channel image `(dy, dx, fg)`.
    pub fn to_image(&self) -> Image {
        let mut data = Vec::with_capacity(3 * self.fg.len());
        for p in 0..self.fg.len() {
            data.extend_from_slice(&[self.flow[2 * p], self.flow[2 * p + 1], self.fg[p]]);
        }
        Image { height: self.height, width: self.width, channels: 3, data }
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels != 3 {
            return Err(Error::Dimension(format!("flow image needs 3 channels, got {}", img.channels)));
        }
        let n = img.height * img.width;
        let mut out = Self::zeros(img.height, img.width);
        for p in 0..n {
            out.flow[2 * p] = img.data[3 * p];
            out.flow[2 * p + 1] = img.data[3 * p + 1];
            out.fg[p] = img.data[3 * p + 2];
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub steps: usize,
    pub step_size: f64,
    pub fg_threshold: f64,
    pub cluster_radius: f64,
    pub min_cell_area: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { steps: 200, step_size: 1.0, fg_threshold: 0.5, cluster_radius: 2.0, min_cell_area: 15 }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("postprocess steps must be >= 1".into()));
        }
        if !(self.fg_threshold > 0.0 && self.fg_threshold < 1.0) {
            return Err(Error::Config("fg_threshold must lie in (0, 1)".into()));
        }
        if !(self.cluster_radius > 0.0) {
            return Err(Error::Config("cluster_radius must be positive".into()));
        }
        Ok(())
    }
}

pub fn labels_to_flow(labels: &InstanceMap) -> FlowTarget {
    let (h, w) = labels.dims();
    let mut out = FlowTarget::zeros(h, w);
    for (_, pixels) in labels.pixels_by_id() {
        cell_flow(&pixels, w, &mut out);
    }
    out
}

/// Heat-diffusion flow for one cell, written into `out`.
fn cell_flow(pixels: &[usize], width: usize, out: &mut FlowTarget) {
    let coords: Vec<(usize, usize)> = pixels.iter().map(|&p| (p / width, p % width)).collect();
    let (y0, y1) = coords.iter().fold((usize::MAX, 0), |(lo, hi), &(y, _)| (lo.min(y), hi.max(y)));
    let (x0, x1) = coords.iter().fold((usize::MAX, 0), |(lo, hi), &(_, x)| (lo.min(x), hi.max(x)));
    // local frame with a one-pixel border of zeros
    let lh = y1 - y0 + 3;
    let lw = x1 - x0 + 3;
    let local: Vec<usize> = coords.iter().map(|&(y, x)| (y - y0 + 1) * lw + (x - x0 + 1)).collect();
    for &p in pixels {
        out.fg[p] = 1.0;
    }

    let median = |mut v: Vec<usize>| {
        v.sort_unstable();
        let n = v.len();
        if n % 2 == 1 { v[n / 2] as f64 } else { (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0 }
    };
    let my = median(coords.iter().map(|c| c.0).collect());
    let mx = median(coords.iter().map(|c| c.1).collect());
    let seed = coords
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            let da = (a.0 as f64 - my).powi(2) + (a.1 as f64 - mx).powi(2);
            let db = (b.0 as f64 - my).powi(2) + (b.1 as f64 - mx).powi(2);
            da.total_cmp(&db)
        })
        .map(|(i, _)| local[i])
        .expect("cells are non-empty");

    let iters = 2 * (y1 - y0 + 1).max(x1 - x0 + 1);
    let mut heat = vec![0.0f64; lh * lw];
    let mut next = vec![0.0f64; lh * lw];
    for _ in 0..iters {
        heat[seed] += 1.0;
        for &q in &local {
            let mut s = 0.0;
            for dy in [q - lw, q, q + lw] {
                s += heat[dy - 1] + heat[dy] + heat[dy + 1];
            }
            next[q] = s / 9.0;
        }
        for &q in &local {
            heat[q] = next[q];
        }
    }

    for (&p, &q) in pixels.iter().zip(&local) {
        let dy = heat[q + lw] - heat[q - lw];
        let dx = heat[q + 1] - heat[q - 1];
        let norm = (dy * dy + dx * dx).sqrt();
        if norm > 0.0 {
            out.flow[2 * p] = dy / norm;
            out.flow[2 * p + 1] = dx / norm;
        }
    }
}

fn sample_flow(pred: &FlowTarget, y: f64, x: f64) -> (f64, f64) {
    let (h, w) = (pred.height, pred.width);
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = y - y0 as f64;
    let tx = x - x0 as f64;
    let at = |yy: usize, xx: usize, c: usize| pred.flow[2 * (yy * w + xx) + c];
    let lerp = |c: usize| {
        let top = at(y0, x0, c) * (1.0 - tx) + at(y0, x1, c) * tx;
        let bot = at(y1, x0, c) * (1.0 - tx) + at(y1, x1, c) * tx;
        top * (1.0 - ty) + bot * ty
    };
    (lerp(0), lerp(1))
}

/// Recovers instances by Euler advection along the field followed by
/// clustering of the end points.
pub fn flow_to_labels(pred: &FlowTarget, cfg: &PostprocessConfig) -> InstanceMap {
    let (h, w) = (pred.height, pred.width);
    let mut out = InstanceMap::empty(h, w);
    let seeds: Vec<usize> = (0..h * w).filter(|&p| pred.fg[p] > cfg.fg_threshold).collect();
    if seeds.is_empty() {
        return out;
    }
    let (ymax, xmax) = ((h - 1) as f64, (w - 1) as f64);
    let ends: Vec<usize> = seeds
        .iter()
        .map(|&p| {
            let (mut y, mut x) = ((p / w) as f64, (p % w) as f64);
            for _ in 0..cfg.steps {
                let (dy, dx) = sample_flow(pred, y, x);
                y = (y + cfg.step_size * dy).clamp(0.0, ymax);
                x = (x + cfg.step_size * dx).clamp(0.0, xmax);
            }
            (y.round() as usize) * w + x.round() as usize
        })
        .collect();

    let mut occupied = vec![false; h * w];
    for &e in &ends {
        occupied[e] = true;
    }
    let r = cfg.cluster_radius;
    let ri = r.floor() as isize;
    let mut dilated = vec![false; h * w];
    for (e, _) in occupied.iter().enumerate().filter(|(_, &o)| o) {
        let (ey, ex) = ((e / w) as isize, (e % w) as isize);
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if ((dy * dy + dx * dx) as f64) > r * r {
                    continue;
                }
                let (yy, xx) = (ey + dy, ex + dx);
                if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                    dilated[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
    let components = connected_components(&dilated, h, w);

    let mut area: std::collections::BTreeMap<u32, (usize, usize)> = Default::default();
    for (&p, &e) in seeds.iter().zip(&ends) {
        let c = components[e];
        let entry = area.entry(c).or_insert((0, p));
        entry.0 += 1;
    }
    let mut clusters: Vec<(u32, usize, usize)> = area
        .into_iter()
        .filter(|(_, (n, _))| *n >= cfg.min_cell_area)
        .map(|(c, (n, first))| (c, n, first))
        .collect();
    // largest first; ties by first pixel in raster order
    clusters.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let mut relabel = std::collections::HashMap::new();
    for (new, (c, _, _)) in clusters.iter().enumerate() {
        relabel.insert(*c, new as u32 + 1);
    }
    for (&p, &e) in seeds.iter().zip(&ends) {
        if let Some(&id) = relabel.get(&components[e]) {
            out.data[p] = id;
        }
    }
    out
}

/// 8-connected component ids (1-based, 0 for unset) in raster order.
fn connected_components(mask: &[bool], h: usize, w: usize) -> Vec<u32> {
    let mut comp = vec![0u32; h * w];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || comp[start] != 0 {
            continue;
        }
        next += 1;
        comp[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let q = yy as usize * w + xx as usize;
                    if mask[q] && comp[q] == 0 {
                        comp[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
    }
    comp
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(n: usize, cy: f64, cx: f64, r: f64, id: u32, map: &mut InstanceMap) {
        for y in 0..n {
            for x in 0..n {
                if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                    map.set(y, x, id);
                }
            }
        }
    }

    #[test]
    fn background_only() {
        let t = labels_to_flow(&InstanceMap::empty(8, 8));
        assert!(t.flow.iter().all(|&v| v == 0.0));
        assert!(t.fg.iter().all(|&v| v == 0.0));
        assert_eq!(flow_to_labels(&t, &PostprocessConfig::default()), InstanceMap::empty(8, 8));
    }

    #[test]
    fn single_pixel_cell() {
        let mut m = InstanceMap::empty(5, 5);
        m.set(2, 2, 4);
        let t = labels_to_flow(&m);
        assert_eq!(t.fg[12], 1.0);
        assert_eq!((t.flow[24], t.flow[25]), (0.0, 0.0));
    }

    #[test]
    fn disk_flow_points_inward() {
        let n = 31;
        let mut m = InstanceMap::empty(n, n);
        disk(n, 15.0, 15.0, 9.0, 1, &mut m);
        let t = labels_to_flow(&m);
        for y in 0..n {
            for x in 0..n {
                let p = y * n + x;
                if m.data[p] == 0 {
                    assert_eq!((t.flow[2 * p], t.flow[2 * p + 1], t.fg[p]), (0.0, 0.0, 0.0));
                    continue;
                }
                let (vy, vx) = (15.0 - y as f64, 15.0 - x as f64);
                if (vy * vy + vx * vx).sqrt() > 1.0 {
                    let dot = t.flow[2 * p] * vy + t.flow[2 * p + 1] * vx;
                    assert!(dot > 0.0, "pixel ({y},{x}) flow not inward");
                    let norm = (t.flow[2 * p].powi(2) + t.flow[2 * p + 1].powi(2)).sqrt();
                    assert!((norm - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn cells_are_independent() {
        let n = 40;
        let mut both = InstanceMap::empty(n, n);
        let mut a = InstanceMap::empty(n, n);
        let mut b = InstanceMap::empty(n, n);
        disk(n, 10.0, 10.0, 6.0, 1, &mut both);
        disk(n, 10.0, 10.0, 6.0, 1, &mut a);
        disk(n, 28.0, 27.0, 7.5, 2, &mut both);
        disk(n, 28.0, 27.0, 7.5, 2, &mut b);
        let (tb, ta, tbb) = (labels_to_flow(&both), labels_to_flow(&a), labels_to_flow(&b));
        for p in 0..n * n {
            let src = if a.data[p] != 0 { &ta } else { &tbb };
            assert_eq!(tb.flow[2 * p], src.flow[2 * p]);
            assert_eq!(tb.flow[2 * p + 1], src.flow[2 * p + 1]);
        }
    }

    #[test]
    fn disk_round_trip() {
        let n = 32;
        let mut m = InstanceMap::empty(n, n);
        disk(n, 16.0, 15.0, 8.0, 1, &mut m);
        let out = flow_to_labels(&labels_to_flow(&m), &PostprocessConfig::default());
        assert_eq!(out.n_instances(), 1);
        let inter = m.data.iter().zip(&out.data).filter(|(a, b)| **a != 0 && **b != 0).count();
        let union = m.data.iter().zip(&out.data).filter(|(a, b)| **a != 0 || **b != 0).count();
        assert!(inter as f64 / union as f64 >= 0.9);
    }

    #[test]
    fn labels_are_size_ordered() {
        let n = 48;
        let mut m = InstanceMap::empty(n, n);
        disk(n, 10.0, 10.0, 5.0, 1, &mut m);
        disk(n, 32.0, 32.0, 9.0, 2, &mut m);
        let out = flow_to_labels(&labels_to_flow(&m), &PostprocessConfig::default());
        // the larger disk gets id 1
        assert_eq!(out.get(32, 32), 1);
        assert_eq!(out.get(10, 10), 2);
    }
}
