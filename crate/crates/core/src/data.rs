//! Dataset ingestion, augmentation and tiling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, InstanceMap};

const LABEL_SUFFIX: &str = "_label";
const IMAGE_EXTS: [&str; 3] = ["png", "tif", "tiff"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Image,
    pub labels: InstanceMap,
    pub dataset_id: usize,
}

impl Sample {
    pub fn new(name: impl Into<String>, image: Image, labels: InstanceMap, dataset_id: usize) -> Result<Self> {
        let name = name.into();
        if image.dims() != labels.dims() {
            return Err(Error::ShapeMismatch { name, image: image.dims(), labels: labels.dims() });
        }
        Ok(Self { name, image, labels, dataset_id })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub log_scale_sigma: f64,
    pub log_aspect_sigma: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub crop_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { log_scale_sigma: 0.6, log_aspect_sigma: 0.2, flip_horizontal: true, flip_vertical: true, crop_size: 256 }
    }
}

impl AugmentConfig {
    /// No rescale, no flips: only the crop/pad to `crop_size` remains.
    pub fn identity(crop_size: usize) -> Self {
        Self { log_scale_sigma: 0.0, log_aspect_sigma: 0.0, flip_horizontal: false, flip_vertical: false, crop_size }
    }

    pub fn validate(&self, stride: usize) -> Result<()> {
        if self.log_scale_sigma < 0.0 || self.log_aspect_sigma < 0.0 {
            return Err(Error::Config("augmentation sigmas must be non-negative".into()));
        }
        if self.crop_size == 0 || self.crop_size % stride != 0 {
            return Err(Error::Config(format!(
                "crop_size {} must be a positive multiple of the stride {stride}",
                self.crop_size
            )));
        }
        Ok(())
    }
}

/// Dataset name → subdirectory, in registration order (the order defines
/// `dataset_id`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(rename = "dataset", default)]
    pub datasets: Vec<DatasetEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub dir: PathBuf,
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Loads every image/label pair listed by the manifest. Pairs share a
/// basename: `<name>.{png,tif,tiff}` and `<name>_label.{png,tif,tiff}`.
pub fn load_dataset(root: &Path, manifest: &Manifest) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (id, entry) in manifest.datasets.iter().enumerate() {
        let dir = root.join(&entry.dir);
        let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
        let mut labels: BTreeMap<String, PathBuf> = BTreeMap::new();
        for item in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = item.map_err(|e| Error::io(&dir, e))?.path();
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else { continue };
            match stem.strip_suffix(LABEL_SUFFIX) {
                Some(base) => labels.insert(base.to_owned(), path),
                None => images.insert(stem, path),
            };
        }
        if let Some(orphan) = labels.keys().find(|k| !images.contains_key(*k)) {
            return Err(Error::MissingImage(orphan.clone()));
        }
        for (name, img_path) in &images {
            let label_path = labels.get(name).ok_or_else(|| Error::MissingLabel(name.clone()))?;
            let mut image = read_image(img_path)?;
            image.normalize_unit();
            let labels = read_labels(label_path)?;
            out.push(Sample::new(name.clone(), image, labels, id)?);
        }
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
    Ok(dynamic_to_image(&img))
}

fn dynamic_to_image(img: &DynamicImage) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    if color.has_color() {
        let rgb = img.to_rgb32f();
        let data = rgb.as_raw().iter().map(|&v| v as f64).collect();
        Image { height: h, width: w, channels: 3, data }
    } else {
        let gray = img.to_luma32f();
        let data = gray.as_raw().iter().map(|&v| v as f64).collect();
        Image { height: h, width: w, channels: 1, data }
    }
}

pub fn read_labels(path: &Path) -> Result<InstanceMap> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.to_luma16().into_raw().into_iter().map(u32::from).collect();
    InstanceMap::from_vec(h, w, data)
}

/// Writes labels as a 16-bit single-channel PNG.
pub fn write_labels(path: &Path, labels: &InstanceMap) -> Result<()> {
    if let Some(&max) = labels.data.iter().max() {
        if max > u16::MAX as u32 {
            return Err(Error::Dimension(format!("label id {max} does not fit in 16 bits")));
        }
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        labels.width as u32,
        labels.height as u32,
        labels.data.iter().map(|&v| v as u16).collect(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

/// Writes the first channel (or RGB when 3 channels) of a `[0,1]` image
/// as a 16-bit PNG.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let res = if img.channels == 3 {
        let buf: ImageBuffer<image::Rgb<u16>, Vec<u16>> =
            ImageBuffer::from_raw(img.width as u32, img.height as u32, img.data.iter().map(|&v| q(v)).collect())
                .expect("buffer length matches dimensions");
        buf.save(path)
    } else {
        let ch = img.channel(0);
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(img.width as u32, img.height as u32, ch.data.iter().map(|&v| q(v)).collect())
                .expect("buffer length matches dimensions");
        buf.save(path)
    };
    res.map_err(|e| Error::Image { path: path.into(), source: e })
}

/// Writes a 3-channel real-valued field (e.g. `dy, dx, fg`) as a 32-bit
/// float TIFF.
pub fn write_field(path: &Path, field: &Image) -> Result<()> {
    if field.channels != 3 {
        return Err(Error::Dimension(format!("field dump needs 3 channels, got {}", field.channels)));
    }
    let buf: ImageBuffer<image::Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_raw(field.width as u32, field.height as u32, field.data.iter().map(|&v| v as f32).collect())
            .expect("buffer length matches dimensions");
    DynamicImage::ImageRgb32F(buf).save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

/// Reflect an out-of-range index back into `0..len` without repeating the
/// edge sample.
#[inline]
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

fn resize_image(img: &Image, nh: usize, nw: usize) -> Image {
    let sy = nh as f64 / img.height as f64;
    let sx = nw as f64 / img.width as f64;
    let mut out = Image::zeros(nh, nw, img.channels);
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) / sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = fy - y0 as f64;
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) / sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = fx - x0 as f64;
            for c in 0..img.channels {
                let v = if tx == 0.0 && ty == 0.0 {
                    img.get(y0, x0, c)
                } else {
                    let top = img.get(y0, x0, c) * (1.0 - tx) + img.get(y0, x1, c) * tx;
                    let bot = img.get(y1, x0, c) * (1.0 - tx) + img.get(y1, x1, c) * tx;
                    top * (1.0 - ty) + bot * ty
                };
                out.set(y, x, c, v);
            }
        }
    }
    out
}

fn resize_labels(labels: &InstanceMap, nh: usize, nw: usize) -> InstanceMap {
    let sy = nh as f64 / labels.height as f64;
    let sx = nw as f64 / labels.width as f64;
    let mut out = InstanceMap::empty(nh, nw);
    for y in 0..nh {
        let src_y = (((y as f64 + 0.5) / sy).floor() as usize).min(labels.height - 1);
        for x in 0..nw {
            let src_x = (((x as f64 + 0.5) / sx).floor() as usize).min(labels.width - 1);
            out.set(y, x, labels.get(src_y, src_x));
        }
    }
    out
}

/// Extracts the `h × w` window at `(top, left)`; coordinates outside the
/// source are reflected.
fn window_image(img: &Image, top: isize, left: isize, h: usize, w: usize) -> Image {
    let mut out = Image::zeros(h, w, img.channels);
    for y in 0..h {
        let sy = reflect(top + y as isize, img.height);
        for x in 0..w {
            let sx = reflect(left + x as isize, img.width);
            for c in 0..img.channels {
                out.set(y, x, c, img.get(sy, sx, c));
            }
        }
    }
    out
}

fn window_labels(labels: &InstanceMap, top: isize, left: isize, h: usize, w: usize) -> InstanceMap {
    let mut out = InstanceMap::empty(h, w);
    for y in 0..h {
        let sy = reflect(top + y as isize, labels.height);
        for x in 0..w {
            let sx = reflect(left + x as isize, labels.width);
            out.set(y, x, labels.get(sy, sx));
        }
    }
    out
}

fn flip_image(img: &mut Image, horizontal: bool) {
    let src = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (sy, sx) = if horizontal { (y, img.width - 1 - x) } else { (img.height - 1 - y, x) };
            for c in 0..img.channels {
                img.set(y, x, c, src.get(sy, sx, c));
            }
        }
    }
}

fn flip_labels(labels: &mut InstanceMap, horizontal: bool) {
    let src = labels.clone();
    for y in 0..labels.height {
        for x in 0..labels.width {
            let (sy, sx) = if horizontal { (y, labels.width - 1 - x) } else { (labels.height - 1 - y, x) };
            labels.set(y, x, src.get(sy, sx));
        }
    }
}

/// Random rescale (log-normal size and aspect), crop to `crop_size`
/// (reflect-padding undersized results) and random flips.
pub fn augment<R: Rng + ?Sized>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let log_normal = |sigma: f64, rng: &mut R| {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).expect("sigma is finite").sample(rng).exp()
        } else {
            1.0
        }
    };
    let scale = log_normal(cfg.log_scale_sigma, rng);
    let aspect = log_normal(cfg.log_aspect_sigma, rng);
    let sy = scale / aspect.sqrt();
    let sx = scale * aspect.sqrt();
    let (h, w) = s.image.dims();
    let nh = ((h as f64 * sy).round() as usize).max(1);
    let nw = ((w as f64 * sx).round() as usize).max(1);
    let (image, labels) = if (nh, nw) == (h, w) {
        (s.image.clone(), s.labels.clone())
    } else {
        (resize_image(&s.image, nh, nw), resize_labels(&s.labels, nh, nw))
    };

    let crop = cfg.crop_size;
    let pick = |len: usize, rng: &mut R| -> isize {
        if len > crop {
            rng.random_range(0..=len - crop) as isize
        } else {
            // centre the content; the remainder is reflected in
            -(((crop - len) / 2) as isize)
        }
    };
    let top = pick(nh, rng);
    let left = pick(nw, rng);
    let mut image = window_image(&image, top, left, crop, crop);
    let mut labels = window_labels(&labels, top, left, crop, crop);

    let flip_h = rng.random_bool(0.5);
    let flip_v = rng.random_bool(0.5);
    if cfg.flip_horizontal && flip_h {
        flip_image(&mut image, true);
        flip_labels(&mut labels, true);
    }
    if cfg.flip_vertical && flip_v {
        flip_image(&mut image, false);
        flip_labels(&mut labels, false);
    }
    Sample { name: s.name.clone(), image, labels, dataset_id: s.dataset_id }
}

/// Tile start positions along one axis of length `len`.
pub fn tile_offsets(len: usize, size: usize, overlap: usize) -> Result<Vec<usize>> {
    if size == 0 || overlap >= size {
        return Err(Error::Config(format!("tile overlap {overlap} must be smaller than tile size {size}")));
    }
    if len <= size {
        return Ok(vec![0]);
    }
    let step = size - overlap;
    let mut out = Vec::new();
    let mut p = 0;
    while p + size < len {
        out.push(p);
        p += step;
    }
    out.push(len - size);
    Ok(out)
}

/// A `size × size` window of a larger sample and its `(row, col)` offset.
/// Windows reaching past the source are reflect-padded.
pub fn tile(s: &Sample, size: usize, overlap: usize) -> Result<Vec<(Sample, (usize, usize))>> {
    let (h, w) = s.image.dims();
    let rows = tile_offsets(h, size, overlap)?;
    let cols = tile_offsets(w, size, overlap)?;
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            let image = window_image(&s.image, r as isize, c as isize, size, size);
            let labels = window_labels(&s.labels, r as isize, c as isize, size, size);
            let name = format!("{}@{r}_{c}", s.name);
            out.push((Sample { name, image, labels, dataset_id: s.dataset_id }, (r, c)));
        }
    }
    Ok(out)
}

/// Reassembles label tiles; later tiles overwrite earlier ones where they
/// overlap and pixels past the target extent are discarded.
pub fn stitch_labels(tiles: &[(InstanceMap, (usize, usize))], height: usize, width: usize) -> InstanceMap {
    let mut out = InstanceMap::empty(height, width);
    for (t, (r, c)) in tiles {
        for y in 0..t.height {
            for x in 0..t.width {
                let (oy, ox) = (r + y, c + x);
                if oy < height && ox < width {
                    out.set(oy, ox, t.get(y, x));
                }
            }
        }
    }
    out
}

/// Reassembles real-valued tiles, averaging where they overlap.
pub fn stitch_fields(tiles: &[(Image, (usize, usize))], height: usize, width: usize) -> Image {
    let channels = tiles.first().map_or(1, |t| t.0.channels);
    let mut acc = Image::zeros(height, width, channels);
    let mut weight = vec![0.0f64; height * width];
    for (t, (r, c)) in tiles {
        for y in 0..t.height {
            for x in 0..t.width {
                let (oy, ox) = (r + y, c + x);
                if oy < height && ox < width {
                    weight[oy * width + ox] += 1.0;
                    for ch in 0..channels {
                        let v = acc.get(oy, ox, ch) + t.get(y, x, ch);
                        acc.set(oy, ox, ch, v);
                    }
                }
            }
        }
    }
    for p in 0..height * width {
        if weight[p] > 0.0 {
            for ch in 0..channels {
                acc.data[p * channels + ch] /= weight[p];
            }
        }
    }
    acc
}
