//! Procedural shape datasets.
//!
//! In-distribution images are anti-aliased shapes (filled circle, square,
//! triangle, cross) at random position, scale, rotation and intensity, with
//! additive Gaussian pixel noise. OOD sets are uniform noise, shapes from a
//! disjoint catalog (ring, star), or sinusoidal gratings.
//!
//! Every image draws from its own RNG derived from `(seed, index)`, so
//! generation is a pure function of the spec.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{s, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};
use crate::seeding::{self, Stream};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
const PIXEL_NOISE_STD: f64 = 0.05;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    FilledCircle,
    FilledSquare,
    FilledTriangle,
    Cross,
    Ring,
    Star,
}

/// Renderers for in-distribution classes, indexed by class id.
pub const ID_CATALOG: [Shape; 4] =
    [Shape::FilledCircle, Shape::FilledSquare, Shape::FilledTriangle, Shape::Cross];

/// Renderers reserved for the held-out-shape OOD set.
pub const HELD_OUT_CATALOG: [Shape; 2] = [Shape::Ring, Shape::Star];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    UniformNoise,
    HeldOutShape,
    GratingTexture,
}

impl OodKind {
    pub const ALL: [OodKind; 3] =
        [OodKind::UniformNoise, OodKind::HeldOutShape, OodKind::GratingTexture];

    pub fn name(self) -> &'static str {
        match self {
            OodKind::UniformNoise => "uniform_noise",
            OodKind::HeldOutShape => "held_out_shape",
            OodKind::GratingTexture => "grating_texture",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config_err(format!("unknown OOD set `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Images per class for ID sets; total image count for OOD sets.
    pub samples_per_class: usize,
    pub seed: u64,
    pub ood_kind: Option<OodKind>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            image_size: 16,
            channels: 3,
            samples_per_class: 2500,
            seed: 0,
            ood_kind: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err("num_classes must be at least 2"));
        }
        if self.image_size < 8 {
            return Err(config_err("image_size must be at least 8"));
        }
        if self.channels == 0 {
            return Err(config_err("channels must be at least 1"));
        }
        if self.samples_per_class == 0 {
            return Err(config_err("samples_per_class must be at least 1"));
        }
        Ok(())
    }
}

/// Images `[n, channels, size, size]` in `[0, 1]`, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pixels: Array4<f64>,
    labels: Option<Vec<usize>>,
    num_classes: Option<usize>,
}

impl ImageBatch {
    pub fn unlabeled(pixels: Array4<f64>) -> Result<Self> {
        check_range(&pixels)?;
        Ok(Self { pixels, labels: None, num_classes: None })
    }

    pub fn labeled(pixels: Array4<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        check_range(&pixels)?;
        if labels.len() != pixels.len_of(Axis(0)) {
            return Err(input_err(format!(
                "{} labels for {} images",
                labels.len(),
                pixels.len_of(Axis(0))
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(input_err(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { pixels, labels: Some(labels), num_classes: Some(num_classes) })
    }

    pub fn pixels(&self) -> &Array4<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array4<f64> {
        self.pixels
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.pixels.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-batch in the given index order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            pixels: self.pixels.select(Axis(0), indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
        }
    }

    /// Indices whose label equals `class`.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        match &self.labels {
            Some(l) => (0..l.len()).filter(|&i| l[i] == class).collect(),
            None => Vec::new(),
        }
    }

    /// Writes `manifest.json`, `pixels.bin` and (if labeled) `labels.bin`.
    pub fn save_dir(&self, dir: &Path, spec: &DatasetSpec) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = DatasetManifest {
            schema_version: DATASET_SCHEMA_VERSION,
            shape: self.pixels.shape().to_vec(),
            dtype: "f64le".into(),
            labels: self.labels.as_ref().map(|_| "u32le".to_string()),
            num_classes: self.num_classes,
            seed: spec.seed,
            spec: spec.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        let bytes: Vec<u8> = self.pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join("pixels.bin"), bytes)?;
        if let Some(l) = &self.labels {
            let bytes: Vec<u8> = l.iter().flat_map(|&v| (v as u32).to_le_bytes()).collect();
            fs::write(dir.join("labels.bin"), bytes)?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<(Self, DatasetSpec)> {
        let manifest: DatasetManifest =
            serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset schema {}",
                manifest.schema_version
            )));
        }
        let [n, c, h, w]: [usize; 4] = manifest
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::Format("dataset shape must be 4-d".into()))?;
        let raw = fs::read(dir.join("pixels.bin"))?;
        if raw.len() != n * c * h * w * 8 {
            return Err(Error::Format("pixels.bin size does not match manifest".into()));
        }
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let pixels = Array4::from_shape_vec((n, c, h, w), data)
            .map_err(|e| Error::Format(e.to_string()))?;
        let batch = match (manifest.labels, manifest.num_classes) {
            (Some(_), Some(nc)) => {
                let raw = fs::read(dir.join("labels.bin"))?;
                let labels = raw
                    .chunks_exact(4)
                    .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                    .collect();
                Self::labeled(pixels, labels, nc)?
            }
            _ => Self::unlabeled(pixels)?,
        };
        Ok((batch, manifest.spec))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    schema_version: u32,
    shape: Vec<usize>,
    dtype: String,
    labels: Option<String>,
    num_classes: Option<usize>,
    seed: u64,
    spec: DatasetSpec,
}

fn check_range(pixels: &Array4<f64>) -> Result<()> {
    if pixels.iter().all(|&v| (0.0..=1.0).contains(&v)) {
        Ok(())
    } else {
        Err(input_err("pixel values must lie in [0, 1]"))
    }
}

/// Labeled ID set: `num_classes × samples_per_class` images, class of image
/// `i` is `i % num_classes`.
pub fn generate_id_dataset(spec: &DatasetSpec) -> Result<ImageBatch> {
    spec.validate()?;
    if spec.num_classes > ID_CATALOG.len() {
        return Err(config_err(format!(
            "{} classes requested but the shape catalog has {}",
            spec.num_classes,
            ID_CATALOG.len()
        )));
    }
    let n = spec.num_classes * spec.samples_per_class;
    let size = spec.image_size;
    let mut pixels = Array4::zeros((n, spec.channels, size, size));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.num_classes;
        let mut rng = seeding::rng(spec.seed, Stream::IdData, i as u64);
        let img = render_shape_image(ID_CATALOG[class], size, &mut rng);
        write_gray(&mut pixels, i, &img);
        labels.push(class);
    }
    ImageBatch::labeled(pixels, labels, spec.num_classes)
}

/// Unlabeled OOD set of `samples_per_class` images of `spec.ood_kind`.
pub fn generate_ood_dataset(spec: &DatasetSpec) -> Result<ImageBatch> {
    spec.validate()?;
    let kind = spec.ood_kind.ok_or_else(|| config_err("ood_kind must be set for OOD generation"))?;
    let n = spec.samples_per_class;
    let size = spec.image_size;
    let mut pixels = Array4::zeros((n, spec.channels, size, size));
    for i in 0..n {
        let mut rng = seeding::rng(spec.seed, Stream::OodData, ((kind as u64) << 40) | i as u64);
        match kind {
            OodKind::UniformNoise => {
                pixels.slice_mut(s![i, .., .., ..]).mapv_inplace(|_| rng.random::<f64>());
            }
            OodKind::HeldOutShape => {
                let shape = HELD_OUT_CATALOG[rng.random_range(0..HELD_OUT_CATALOG.len())];
                let img = render_shape_image(shape, size, &mut rng);
                write_gray(&mut pixels, i, &img);
            }
            OodKind::GratingTexture => {
                let img = render_grating(size, &mut rng);
                write_gray(&mut pixels, i, &img);
            }
        }
    }
    ImageBatch::unlabeled(pixels)
}

/// Stratified split index lists `(train, test)`, each sorted ascending.
pub fn split_indices(
    dataset: &ImageBatch,
    fractions: (f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (ft, fv) = fractions;
    if ft < 0.0 || fv < 0.0 || ((ft + fv) - 1.0).abs() > 1e-9 {
        return Err(config_err(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let num_classes = dataset
        .num_classes()
        .ok_or_else(|| config_err("split requires a labeled dataset"))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..num_classes {
        let mut idx = dataset.class_indices(c);
        let mut rng = seeding::rng(seed, Stream::Split, c as u64);
        idx.shuffle(&mut rng);
        let n_train = ((idx.len() as f64) * ft).round() as usize;
        let n_train = n_train.min(idx.len());
        let n_test = idx.len() - n_train;
        if (ft > 0.0 && n_train == 0) || (fv > 0.0 && n_test == 0) {
            return Err(config_err(format!("class {c} is empty after split {fractions:?}")));
        }
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(
    dataset: &ImageBatch,
    fractions: (f64, f64),
    seed: u64,
) -> Result<(ImageBatch, ImageBatch)> {
    let (train, test) = split_indices(dataset, fractions, seed)?;
    Ok((dataset.select(&train), dataset.select(&test)))
}

fn write_gray(pixels: &mut Array4<f64>, index: usize, img: &[f64]) {
    let size = pixels.len_of(Axis(2));
    for c in 0..pixels.len_of(Axis(1)) {
        for y in 0..size {
            for x in 0..size {
                pixels[[index, c, y, x]] = img[y * size + x];
            }
        }
    }
}

fn add_noise(img: &mut [f64], rng: &mut impl Rng) {
    let noise = Normal::new(0.0, PIXEL_NOISE_STD).unwrap();
    for v in img.iter_mut() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
}

fn render_shape_image(shape: Shape, size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let sz = size as f64;
    let radius = sz * rng.random_range(0.25..0.42);
    let margin = radius * 0.8;
    let cx = rng.random_range(margin..(sz - margin));
    let cy = rng.random_range(margin..(sz - margin));
    let theta = rng.random_range(0.0..(2.0 * PI));
    let intensity = rng.random_range(0.6..1.0);
    let (sin, cos) = theta.sin_cos();
    let mut img = vec![0.0; size * size];
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step - cx;
                    let py = y as f64 + (sy as f64 + 0.5) * step - cy;
                    // rotate into the shape frame, normalized by radius
                    let u = (cos * px + sin * py) / radius;
                    let v = (-sin * px + cos * py) / radius;
                    if inside(shape, u, v) {
                        hits += 1;
                    }
                }
            }
            img[y * size + x] = intensity * hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    add_noise(&mut img, rng);
    img
}

/// Point membership in the unit-radius shape frame.
fn inside(shape: Shape, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match shape {
        Shape::FilledCircle => r <= 1.0,
        Shape::FilledSquare => u.abs() <= 0.8 && v.abs() <= 0.8,
        Shape::FilledTriangle => {
            // equilateral triangle inscribed in the unit circle
            (0..3).all(|k| {
                let a = PI / 2.0 + 2.0 * PI * k as f64 / 3.0;
                u * a.cos() + v * a.sin() >= -0.5
            })
        }
        Shape::Cross => {
            (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0)
        }
        Shape::Ring => (0.6..=1.0).contains(&r),
        Shape::Star => point_in_polygon(&star_vertices(), u, v),
    }
}

fn star_vertices() -> [(f64, f64); 10] {
    let mut pts = [(0.0, 0.0); 10];
    for (k, p) in pts.iter_mut().enumerate() {
        let radius = if k % 2 == 0 { 1.0 } else { 0.42 };
        let a = PI / 2.0 + PI * k as f64 / 5.0;
        *p = (radius * a.cos(), radius * a.sin());
    }
    pts
}

fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn render_grating(size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let freq = rng.random_range(0.08..0.35);
    let theta = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..(2.0 * PI));
    let contrast = rng.random_range(0.6..1.0);
    let (sin, cos) = theta.sin_cos();
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = 2.0 * PI * freq * (x as f64 * cos + y as f64 * sin) + phase;
            img[y * size + x] = 0.5 + 0.5 * contrast * t.sin();
        }
    }
    add_noise(&mut img, rng);
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(spc: usize) -> DatasetSpec {
        DatasetSpec { samples_per_class: spc, seed: 11, ..DatasetSpec::default() }
    }

    #[test]
    fn id_dataset_is_deterministic_and_balanced() {
        let spec = small(100);
        let a = generate_id_dataset(&spec).unwrap();
        let b = generate_id_dataset(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 400);
        for c in 0..4 {
            assert_eq!(a.class_indices(c).len(), 100);
        }
        assert!(a.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_id_dataset(&small(3)).unwrap();
        let b = generate_id_dataset(&DatasetSpec { seed: 12, ..small(3) }).unwrap();
        assert!(a.pixels().iter().zip(b.pixels().iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn too_many_classes_is_config_error() {
        let spec = DatasetSpec { num_classes: 5, ..small(1) };
        assert!(matches!(generate_id_dataset(&spec), Err(Error::Config(_))));
        let spec = DatasetSpec { num_classes: 1, ..small(1) };
        assert!(matches!(generate_id_dataset(&spec), Err(Error::Config(_))));
        let spec = DatasetSpec { image_size: 4, ..small(1) };
        assert!(matches!(generate_id_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_noise_mean() {
        let spec = DatasetSpec {
            samples_per_class: 10,
            ood_kind: Some(OodKind::UniformNoise),
            ..small(10)
        };
        let b = generate_ood_dataset(&spec).unwrap();
        assert_eq!(b.len(), 10);
        assert!(b.labels().is_none());
        let mean = b.pixels().mean().unwrap();
        assert!((0.45..=0.55).contains(&mean), "mean {mean}");
    }

    #[test]
    fn held_out_catalog_is_disjoint() {
        assert!(HELD_OUT_CATALOG.iter().all(|s| !ID_CATALOG.contains(s)));
    }

    #[test]
    fn ood_sets_reproducible_and_in_range() {
        for kind in OodKind::ALL {
            let spec = DatasetSpec { ood_kind: Some(kind), ..small(20) };
            let a = generate_ood_dataset(&spec).unwrap();
            assert_eq!(a, generate_ood_dataset(&spec).unwrap());
            assert!(a.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(generate_ood_dataset(&small(2)).is_err());
    }

    #[test]
    fn shapes_cover_plausible_area() {
        // unit-frame area estimate by grid sampling
        let area = |s: Shape| {
            let n = 400;
            let mut hits = 0;
            for i in 0..n {
                for j in 0..n {
                    let u = -1.0 + 2.0 * (i as f64 + 0.5) / n as f64;
                    let v = -1.0 + 2.0 * (j as f64 + 0.5) / n as f64;
                    hits += inside(s, u, v) as usize;
                }
            }
            4.0 * hits as f64 / (n * n) as f64
        };
        assert!((area(Shape::FilledCircle) - PI).abs() < 0.02);
        assert!((area(Shape::FilledSquare) - 2.56).abs() < 0.02);
        assert!((area(Shape::FilledTriangle) - 3.0 * 3f64.sqrt() / 4.0).abs() < 0.02);
        assert!((area(Shape::Ring) - PI * (1.0 - 0.36)).abs() < 0.02);
        assert!(area(Shape::Star) > 0.5 && area(Shape::Star) < 2.0);
    }

    #[test]
    fn split_counts_and_partition() {
        let data = generate_id_dataset(&small(100)).unwrap();
        let (tr, te) = split_indices(&data, (0.8, 0.2), 5).unwrap();
        assert_eq!((tr.len(), te.len()), (320, 80));
        let (train, test) = split(&data, (0.8, 0.2), 5).unwrap();
        for c in 0..4 {
            assert_eq!(train.class_indices(c).len(), 80);
            assert_eq!(test.class_indices(c).len(), 20);
        }
        let mut all: Vec<usize> = tr.iter().chain(te.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..400).collect::<Vec<_>>());
        assert_eq!(split_indices(&data, (0.8, 0.2), 5).unwrap(), (tr, te));
    }

    #[test]
    fn degenerate_splits() {
        let data = generate_id_dataset(&small(2)).unwrap();
        let (train, test) = split(&data, (1.0, 0.0), 1).unwrap();
        assert_eq!(train.len(), 8);
        assert!(test.is_empty());
        assert!(matches!(split(&data, (0.9, 0.1), 1), Err(Error::Config(_))));
        assert!(matches!(split(&data, (0.5, 0.6), 1), Err(Error::Config(_))));
        let unlabeled = ImageBatch::unlabeled(data.pixels().clone()).unwrap();
        assert!(split(&unlabeled, (0.5, 0.5), 1).is_err());
    }

    #[test]
    fn labeled_batch_validation() {
        let px = Array4::zeros((2, 1, 8, 8));
        assert!(ImageBatch::labeled(px.clone(), vec![0, 2], 2).is_err());
        assert!(ImageBatch::labeled(px.clone(), vec![0], 2).is_err());
        let mut bad = px.clone();
        bad[[0, 0, 0, 0]] = 1.5;
        assert!(ImageBatch::unlabeled(bad).is_err());
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(3);
        let data = generate_id_dataset(&spec).unwrap();
        data.save_dir(dir.path(), &spec).unwrap();
        let (loaded, spec2) = ImageBatch::load_dir(dir.path()).unwrap();
        assert_eq!(loaded, data);
        assert_eq!(spec2, spec);
    }
}
