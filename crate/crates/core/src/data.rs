//! Datasets, preprocessing, splits and batching.
//!
//! A [`Dataset`] is a list of labelled item sources: PNG files from a
//! `root/<class>/<file>.png` tree, or procedurally generated shapes. A
//! [`Loader`] renders every item once at the network input size and then
//! serves seeded, optionally flipped, normalized batches.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Real, Tensor};

pub const CHANNELS: usize = 3;
pub const SYNTHETIC_NOISE_STD: f64 = 0.05;

/// Names of the procedural classes, in class-index order.
pub const SYNTHETIC_CLASSES: [&str; 8] = [
    "filled_square",
    "circle",
    "diagonal_stripes",
    "horizontal_stripes",
    "checkerboard",
    "cross",
    "ring",
    "gradient",
];

/// RGB image, channel-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::InvalidShape(format!(
                "image {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItemSource {
    File(PathBuf),
    Synthetic { class: usize, index: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    pub source: ItemSource,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub class_names: Vec<String>,
    /// Native size of synthetic renders; files keep their own size.
    pub image_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for item in &self.items {
            counts[item.label] += 1;
        }
        counts
    }

    /// Subset with the given item indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            class_names: self.class_names.clone(),
            image_size: self.image_size,
        }
    }

    /// Decodes or renders one item at its native size.
    pub fn render(&self, item: &Item) -> Result<Image> {
        match &item.source {
            ItemSource::File(path) => decode_png(path),
            ItemSource::Synthetic { class, index, seed } => Ok(render_shape(*class, *index, *seed, self.image_size)),
        }
    }
}

fn decode_png(path: &Path) -> Result<Image> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::file(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::file(path, e))?
        .decode()
        .map_err(|e| Error::file(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; CHANNELS * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..CHANNELS {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Image::new(h, w, data)
}

/// Reads `root/<class>/<file>.png`. Classes are ranked by directory name and
/// items sorted by path.
pub fn load_image_dir(root: &Path) -> Result<Dataset> {
    let entries = fs::read_dir(root).map_err(|e| Error::file(root, e))?;
    let mut class_dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::file(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            class_dirs.push(path);
        }
    }
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("{} holds no class directories", root.display())));
    }
    let mut items = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::file(dir, "class directory name is not UTF-8"))?
            .to_string();
        let mut files = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
            let path = entry.map_err(|e| Error::file(dir, e))?.path();
            if path.is_file() {
                files.push(path);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {} is empty", dir.display())));
        }
        for path in files {
            let is_png = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if !is_png {
                return Err(Error::file(&path, "not a PNG image"));
            }
            let reader = image::ImageReader::open(&path)
                .map_err(|e| Error::file(&path, e))?
                .with_guessed_format()
                .map_err(|e| Error::file(&path, e))?;
            if reader.format() != Some(image::ImageFormat::Png) {
                return Err(Error::file(&path, "not a PNG image"));
            }
            reader.into_dimensions().map_err(|e| Error::file(&path, e))?;
            items.push(Item {
                source: ItemSource::File(path),
                label,
            });
        }
        class_names.push(name);
    }
    Ok(Dataset {
        items,
        class_names,
        image_size: 0,
    })
}

/// Parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

pub fn synthetic_shapes(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if !(2..=SYNTHETIC_CLASSES.len()).contains(&num_classes) {
        return Err(Error::InvalidArgument(format!(
            "synthetic datasets have 2 to {} classes, got {num_classes}",
            SYNTHETIC_CLASSES.len()
        )));
    }
    if size < 8 {
        return Err(Error::InvalidArgument(format!(
            "synthetic image size must be at least 8, got {size}"
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    let items = (0..num_classes)
        .flat_map(|class| {
            (0..per_class).map(move |index| Item {
                source: ItemSource::Synthetic { class, index, seed },
                label: class,
            })
        })
        .collect();
    Ok(Dataset {
        items,
        class_names: SYNTHETIC_CLASSES[..num_classes].iter().map(|s| s.to_string()).collect(),
        image_size: size,
    })
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Dataset> {
        synthetic_shapes(self.num_classes, self.per_class, self.size, self.seed)
    }
}

/// Procedural pattern for `class`, jittered by `(class, index, seed)`.
pub fn render_shape(class: usize, index: usize, seed: u64, size: usize) -> Image {
    let mut rng = seed::rng(seed, &format!("synthetic/{class}/{index}"));
    let s = size as f64;
    let fg = rng.random_range(0.65..1.0);
    let bg = rng.random_range(0.0..0.3);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.75..1.0));
    let cx = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let scale = rng.random_range(0.85..1.15);
    let phase = rng.random_range(0.0..1.0);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let period = (s / 4.0 * scale).max(3.0);

    let square_half = rng.random_range(0.25..0.35) * s / 2.0 * 2.0;
    let circle_r = rng.random_range(0.22..0.32) * s;
    let ring_outer = rng.random_range(0.25..0.35) * s;
    let ring_width = rng.random_range(0.07..0.1) * s;
    let bar = (0.12 * s * scale).max(1.5);
    let arm = 0.38 * s * scale;
    let cell = (s / 4.0 * scale).max(2.0);

    let coverage = |x: f64, y: f64| -> f64 {
        let (dx, dy) = (x - cx, y - cy);
        let r = (dx * dx + dy * dy).sqrt();
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        match class {
            0 => on(dx.abs() <= square_half && dy.abs() <= square_half),
            1 => on(r <= circle_r),
            2 => on(((x + y) / period + phase).rem_euclid(1.0) < 0.5),
            3 => on((y / period + phase).rem_euclid(1.0) < 0.5),
            4 => {
                let a = ((x - cx) / cell).floor() as i64;
                let b = ((y - cy) / cell).floor() as i64;
                on((a + b).rem_euclid(2) == 0)
            }
            5 => on((dx.abs() <= bar / 2.0 && dy.abs() <= arm) || (dy.abs() <= bar / 2.0 && dx.abs() <= arm)),
            6 => on(r <= ring_outer && r >= ring_outer - ring_width),
            _ => {
                let t = (dx * angle.cos() + dy * angle.sin()) / s + 0.5;
                t.clamp(0.0, 1.0)
            }
        }
    };
    let noise = Normal::new(0.0, SYNTHETIC_NOISE_STD).expect("valid std");
    let mut data = vec![0.0f32; CHANNELS * size * size];
    for y in 0..size {
        for x in 0..size {
            let v = coverage(x as f64 + 0.5, y as f64 + 0.5);
            let base = bg + (fg - bg) * v;
            for c in 0..CHANNELS {
                let px = base * tint[c] + noise.sample(&mut rng);
                data[(c * size + y) * size + x] = px.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image {
        height: size,
        width: size,
        data,
    }
}

/// Bilinear resampling with half-pixel centres (corners not aligned).
pub fn resize_bilinear(image: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
    }
    if (height, width) == (image.height, image.width) {
        return Ok(image.clone());
    }
    let sy = image.height as f64 / height as f64;
    let sx = image.width as f64 / width as f64;
    let taps = |dst: usize, scale: f64, extent: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut data = vec![0.0f32; CHANNELS * height * width];
    for y in 0..height {
        let (y0, y1, fy) = taps(y, sy, image.height);
        for x in 0..width {
            let (x0, x1, fx) = taps(x, sx, image.width);
            for c in 0..CHANNELS {
                let top = image.at(c, y0, x0) as f64 * (1.0 - fx) + image.at(c, y0, x1) as f64 * fx;
                let bottom = image.at(c, y1, x0) as f64 * (1.0 - fx) + image.at(c, y1, x1) as f64 * fx;
                data[(c * height + y) * width + x] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    Image::new(height, width, data)
}

pub fn hflip(image: &Image) -> Image {
    let mut data = image.data.clone();
    for row in data.chunks_mut(image.width) {
        row.reverse();
    }
    Image { data, ..*image }
}

/// Flips with probability one half, drawing one value from `rng`.
pub fn random_hflip<R: Rng>(image: &Image, rng: &mut R) -> Image {
    if rng.random_bool(0.5) {
        hflip(image)
    } else {
        image.clone()
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl NormStats {
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for img in images {
            let plane = img.height * img.width;
            for c in 0..CHANNELS {
                for &v in &img.data[c * plane..(c + 1) * plane] {
                    sum[c] += v as f64;
                    sq[c] += v as f64 * v as f64;
                }
            }
            count += plane;
        }
        if count == 0 {
            return Err(Error::Dataset("cannot compute statistics of zero images".into()));
        }
        let n = count as f64;
        let mean = sum.map(|s| s / n);
        let std = std::array::from_fn(|c| (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6));
        Ok(NormStats { mean, std })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::file(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::file(path, e))
    }
}

pub fn normalize(image: &Image, stats: &NormStats) -> Image {
    let plane = image.height * image.width;
    let mut data = image.data.clone();
    for c in 0..CHANNELS {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for v in &mut data[c * plane..(c + 1) * plane] {
            *v = ((*v as f64 - m) / s) as f32;
        }
    }
    Image { data, ..*image }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// `⌈n/2⌉` / `⌊n/2⌋` per class.
    SearchHalf,
    /// `⌊ratio·n⌋` training items per class.
    TrainRatio(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub seed: u64,
}

/// Stratified split into (training part, held-out part). Each part keeps the
/// original item order.
pub fn split(dataset: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in dataset.items.iter().enumerate() {
        by_class.entry(item.label).or_default().push(i);
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (class, mut indices) in by_class {
        let n = indices.len();
        if n < 2 {
            return Err(Error::Split(format!(
                "class {} has {n} item(s); at least 2 are needed",
                dataset.class_names[class]
            )));
        }
        let take = match spec.kind {
            SplitKind::SearchHalf => n.div_ceil(2),
            SplitKind::TrainRatio(r) => {
                if !(r > 0.0 && r < 1.0) {
                    return Err(Error::Split(format!("training ratio {r} outside (0, 1)")));
                }
                ((r * n as f64 + 1e-9).floor() as usize).clamp(1, n - 1)
            }
        };
        indices.shuffle(&mut seed::rng(spec.seed, &format!("split/{class}")));
        let (a, b) = indices.split_at(take);
        first.extend_from_slice(a);
        second.extend_from_slice(b);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((dataset.subset(&first), dataset.subset(&second)))
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(shuffle_seed, &format!("epoch/{epoch}")));
    order
}

/// One mini-batch: `(N, 3, S, S)` images and their labels.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Items rendered once at a fixed square size.
#[derive(Clone, Debug)]
pub struct Loader {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub size: usize,
    pub stats: NormStats,
}

impl Loader {
    pub fn new(dataset: &Dataset, size: usize, stats: NormStats) -> Result<Self> {
        let mut images = Vec::with_capacity(dataset.len());
        for item in &dataset.items {
            let img = dataset.render(item)?;
            images.push(resize_bilinear(&img, size, size)?);
        }
        Ok(Loader {
            images,
            labels: dataset.items.iter().map(|i| i.label).collect(),
            size,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn compute_stats(&self) -> Result<NormStats> {
        NormStats::compute(&self.images)
    }

    pub fn num_batches(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size)
    }

    fn assemble<T: Real>(&self, indices: &[usize], flips: Option<&[bool]>) -> Result<Batch<T>> {
        let plane = self.size * self.size;
        let mut data = Vec::with_capacity(indices.len() * CHANNELS * plane);
        for (k, &i) in indices.iter().enumerate() {
            let img = &self.images[i];
            let img = if flips.is_some_and(|f| f[k]) {
                hflip(img)
            } else {
                img.clone()
            };
            let img = normalize(&img, &self.stats);
            data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
        }
        Ok(Batch {
            images: Tensor::from_vec([indices.len(), CHANNELS, self.size, self.size], data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Batches in a shuffled order keyed by `(shuffle_seed, epoch)`; the last
    /// batch may be smaller. Flips are drawn only when `augment` is set.
    pub fn batches<T: Real>(
        &self,
        batch_size: usize,
        shuffle_seed: u64,
        epoch: usize,
        augment: bool,
    ) -> Result<Vec<Batch<T>>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        let order = epoch_order(self.len(), shuffle_seed, epoch);
        let flips: Option<Vec<bool>> = augment.then(|| {
            let mut rng = seed::rng(shuffle_seed, &format!("augment/{epoch}"));
            (0..order.len()).map(|_| rng.random_bool(0.5)).collect()
        });
        order
            .chunks(batch_size)
            .enumerate()
            .map(|(b, chunk)| {
                let f = flips.as_ref().map(|f| &f[b * batch_size..b * batch_size + chunk.len()]);
                self.assemble(chunk, f)
            })
            .collect()
    }

    /// Unshuffled, unaugmented batches for evaluation.
    pub fn sequential<T: Real>(&self, batch_size: usize) -> Result<Vec<Batch<T>>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        let order: Vec<usize> = (0..self.len()).collect();
        order.chunks(batch_size).map(|c| self.assemble(c, None)).collect()
    }
}
