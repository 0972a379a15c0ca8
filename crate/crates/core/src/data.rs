//! Synthetic multi-modality data, manifest handling, loading and augmentation.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::ModalityBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

/// How a modality renders tissue values into intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Appearance {
    pub name: String,
    /// Inverted polarity maps tissue value `t` to `1 - t`.
    pub inverted: bool,
    pub gamma: f64,
    /// Relative amplitude of the smooth multiplicative bias field.
    pub bias_amplitude: f64,
    pub noise: f64,
}

impl Appearance {
    /// Built-in look of modality `k`: alternating polarity, varying gamma.
    pub fn preset(k: usize) -> Self {
        Self {
            name: format!("mod{k}"),
            inverted: k % 2 == 1,
            gamma: [1.0, 1.6, 0.7, 1.3][k % 4],
            bias_amplitude: [0.15, 0.3, 0.2, 0.25][k % 4],
            noise: [0.05, 0.08, 0.06, 0.1][k % 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    #[serde(alias = "K")]
    pub num_modalities: usize,
    #[serde(alias = "C")]
    pub num_classes: usize,
    pub train_per_modality: usize,
    pub val_per_modality: usize,
    pub test_per_modality: usize,
    pub image_size: usize,
    pub labeled_ratio: f64,
    /// Per-modality looks; missing entries fall back to [`Appearance::preset`].
    pub appearances: Vec<Appearance>,
    /// Range of organ semi-axes as a fraction of the image size.
    pub organ_scale: (f64, f64),
    /// Per-image jitter of organ tissue values.
    pub tissue_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_modalities: 2,
            num_classes: 3,
            train_per_modality: 50,
            val_per_modality: 10,
            test_per_modality: 10,
            image_size: 128,
            labeled_ratio: 0.2,
            appearances: Vec::new(),
            organ_scale: (0.1, 0.22),
            tissue_jitter: 0.08,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_modalities == 0 {
            return bad("synth.K must be >= 1");
        }
        if self.num_classes < 2 {
            return bad("synth.C must be >= 2");
        }
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0) {
            return bad("synth.labeled_ratio must be in (0, 1]");
        }
        if self.image_size < 8 {
            return bad("synth.image_size must be >= 8");
        }
        if self.train_per_modality == 0 {
            return bad("synth.train_per_modality must be >= 1");
        }
        let (lo, hi) = self.organ_scale;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return bad("synth.organ_scale must satisfy 0 < lo <= hi < 0.5");
        }
        if !(self.tissue_jitter >= 0.0) {
            return bad("synth.tissue_jitter must be >= 0");
        }
        for a in &self.appearances {
            if !(a.gamma > 0.0 && a.noise >= 0.0 && a.bias_amplitude >= 0.0 && a.bias_amplitude < 1.0) {
                return Err(Error::Config(format!("invalid appearance for {}", a.name)));
            }
        }
        Ok(())
    }

    pub fn appearance(&self, k: usize) -> Appearance {
        self.appearances.get(k).cloned().unwrap_or_else(|| Appearance::preset(k))
    }

    pub fn labeled_count(&self) -> usize {
        ((self.labeled_ratio * self.train_per_modality as f64) - 1e-9).ceil() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    /// Path relative to the dataset root.
    pub image: String,
    pub label: Option<String>,
    pub modality: String,
    pub modality_index: usize,
    pub split: Split,
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub num_modalities: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub class_names: Vec<String>,
    pub modality_names: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    /// Structural checks: version, dense modality indices, labels present
    /// exactly for labeled records, evaluation splits fully labeled, unique
    /// ids and paths.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(format!("manifest: {m}")));
        if self.version != MANIFEST_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.num_modalities == 0 || self.modality_names.len() != self.num_modalities {
            return bad("modality names do not match num_modalities".into());
        }
        if self.num_classes < 2 || self.class_names.len() != self.num_classes {
            return bad("class names do not match num_classes".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad("zero image size".into());
        }
        let mut ids = HashSet::new();
        let mut paths = HashSet::new();
        let mut seen = vec![false; self.num_modalities];
        for s in &self.samples {
            if !ids.insert(&s.id) {
                return bad(format!("duplicate sample id {}", s.id));
            }
            if !paths.insert(&s.image) {
                return bad(format!("image {} listed twice", s.image));
            }
            if s.modality_index >= self.num_modalities {
                return bad(format!("{}: modality index {} out of range", s.id, s.modality_index));
            }
            if self.modality_names[s.modality_index] != s.modality {
                return bad(format!("{}: modality name {} does not match index", s.id, s.modality));
            }
            seen[s.modality_index] = true;
            if s.labeled != s.label.is_some() {
                return bad(format!("{}: labeled flag disagrees with label path", s.id));
            }
            if s.split != Split::Train && !s.labeled {
                return bad(format!("{}: {} samples must be labeled", s.id, s.split));
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return bad(format!("modality {k} has no samples"));
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn records(&self, k: usize, split: Split, filter: LabelFilter) -> Vec<&SampleRecord> {
        self.samples
            .iter()
            .filter(|s| s.modality_index == k && s.split == split && filter.accepts(s.labeled))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelFilter {
    Labeled,
    Unlabeled,
    Any,
}

impl LabelFilter {
    fn accepts(self, labeled: bool) -> bool {
        match self {
            LabelFilter::Labeled => labeled,
            LabelFilter::Unlabeled => !labeled,
            LabelFilter::Any => true,
        }
    }
}

/// One organ: a rotated ellipse with a smoothly wobbling radius.
#[derive(Clone, Debug)]
struct Organ {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    wobble: [(f64, f64); 2],
}

impl Organ {
    fn random(rng: &mut ChaCha8Rng, size: f64, scale: (f64, f64)) -> Self {
        let ry = rng.random_range(scale.0..=scale.1) * size;
        let rx = rng.random_range(scale.0..=scale.1) * size;
        let margin = ry.max(rx) * 1.2 + 1.0;
        Self {
            cy: rng.random_range(margin..=(size - margin).max(margin)),
            cx: rng.random_range(margin..=(size - margin).max(margin)),
            ry,
            rx,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            wobble: [
                (rng.random_range(0.0..0.15), rng.random_range(0.0..std::f64::consts::TAU)),
                (rng.random_range(0.0..0.1), rng.random_range(0.0..std::f64::consts::TAU)),
            ],
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let r = (u * u + v * v).sqrt();
        let theta = v.atan2(u);
        let edge = 1.0 + self.wobble[0].0 * (3.0 * theta + self.wobble[0].1).sin()
            + self.wobble[1].0 * (5.0 * theta + self.wobble[1].1).sin();
        r <= edge
    }
}

const ORGAN_RETRIES: usize = 200;

/// Label map with one organ per foreground class, organs kept apart.
fn draw_anatomy(rng: &mut ChaCha8Rng, size: usize, classes: usize, scale: (f64, f64)) -> Result<Vec<usize>> {
    let mut labels = vec![0usize; size * size];
    for class in 1..classes {
        let mut placed = false;
        for _ in 0..ORGAN_RETRIES {
            let organ = Organ::random(rng, size as f64, scale);
            let mut pixels = Vec::new();
            let mut clash = false;
            'scan: for y in 0..size {
                for x in 0..size {
                    if organ.contains(y as f64 + 0.5, x as f64 + 0.5) {
                        // one pixel gap between organs
                        for (dy, dx) in [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                            if ny >= 0 && nx >= 0 && (ny as usize) < size && (nx as usize) < size
                                && labels[ny as usize * size + nx as usize] != 0
                            {
                                clash = true;
                                break 'scan;
                            }
                        }
                        pixels.push(y * size + x);
                    }
                }
            }
            if !clash && !pixels.is_empty() {
                for p in pixels {
                    labels[p] = class;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place organ for class {class} without overlap after {ORGAN_RETRIES} tries"
            )));
        }
    }
    Ok(labels)
}

/// Tissue value of each class before modality rendering.
fn tissue_levels(classes: usize, rng: &mut ChaCha8Rng, jitter: f64) -> Vec<f64> {
    (0..classes)
        .map(|c| {
            let base = if c == 0 { 0.2 } else { 0.45 + 0.4 * (c - 1) as f64 / (classes - 1).max(1) as f64 };
            (base + rng.random_range(-jitter..=jitter)).clamp(0.0, 1.0)
        })
        .collect()
}

fn render(labels: &[usize], size: usize, levels: &[f64], look: &Appearance, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let tau = std::f64::consts::TAU;
    let (fy, fx) = (rng.random_range(0.3..1.0), rng.random_range(0.3..1.0));
    let (py, px) = (rng.random_range(0.0..tau), rng.random_range(0.0..tau));
    let noise = Normal::new(0.0, look.noise.max(1e-12)).unwrap();
    let mut out = Vec::with_capacity(labels.len());
    for y in 0..size {
        for x in 0..size {
            let t = levels[labels[y * size + x]];
            let t = if look.inverted { 1.0 - t } else { t };
            let bias = 1.0
                + look.bias_amplitude
                    * (tau * fy * y as f64 / size as f64 + py).sin()
                    * (tau * fx * x as f64 / size as f64 + px).cos();
            let n = if look.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            let v = (t.powf(look.gamma) * bias + n).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

fn sample_seed(seed: u64, k: usize, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 1u64,
        Split::Val => 2,
        Split::Test => 3,
    };
    seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (tag << 56)
        ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn write_png(path: &Path, size: usize, pixels: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let img = GrayImage::from_raw(size as u32, size as u32, pixels).expect("pixel count matches");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes a synthetic dataset under `out` and returns its manifest.
/// Modalities draw independent anatomies, so no pixel correspondence exists
/// across them.
pub fn generate_synthetic(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let size = cfg.image_size;
    let modality_names: Vec<String> = (0..cfg.num_modalities).map(|k| cfg.appearance(k).name).collect();
    if modality_names.iter().collect::<HashSet<_>>().len() != modality_names.len() {
        return Err(Error::Config("modality names must be unique".into()));
    }
    let mut samples = Vec::new();
    for (k, name) in modality_names.iter().enumerate() {
        let look = cfg.appearance(k);
        for split in Split::ALL {
            let count = match split {
                Split::Train => cfg.train_per_modality,
                Split::Val => cfg.val_per_modality,
                Split::Test => cfg.test_per_modality,
            };
            for i in 0..count {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, k, split, i));
                let labels = draw_anatomy(&mut rng, size, cfg.num_classes, cfg.organ_scale)?;
                let levels = tissue_levels(cfg.num_classes, &mut rng, cfg.tissue_jitter);
                let pixels = render(&labels, size, &levels, &look, &mut rng);
                let id = format!("{name}_{split}_{i:04}");
                let image = format!("images/{name}/{id}.png");
                write_png(&out.join(&image), size, pixels)?;
                let labeled = split != Split::Train || i < cfg.labeled_count();
                let label = if labeled {
                    let rel = format!("labels/{name}/{id}.png");
                    write_png(&out.join(&rel), size, labels.iter().map(|&l| l as u8).collect())?;
                    Some(rel)
                } else {
                    None
                };
                samples.push(SampleRecord {
                    id,
                    image,
                    label,
                    modality: name.clone(),
                    modality_index: k,
                    split,
                    labeled,
                });
            }
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        num_modalities: cfg.num_modalities,
        num_classes: cfg.num_classes,
        height: size,
        width: size,
        class_names: (0..cfg.num_classes)
            .map(|c| if c == 0 { "background".to_string() } else { format!("organ{c}") })
            .collect(),
        modality_names,
        samples,
    };
    manifest.validate()?;
    manifest.save(out)?;
    Ok(manifest)
}

/// A decoded sample held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub record: SampleRecord,
    pub height: usize,
    pub width: usize,
    /// Intensities in `[0, 1]`, row-major.
    pub image: Vec<f32>,
    pub label: Option<Vec<usize>>,
}

impl LoadedSample {
    /// `[1, 1, H, W]` batch of this sample, without cropping.
    pub fn to_batch(&self) -> Result<ModalityBatch> {
        let images = Tensor::from_vec(&[1, 1, self.height, self.width], self.image.clone())?;
        let mut b = ModalityBatch::new(images, self.label.clone(), self.record.modality_index)?;
        b.ids = vec![self.record.id.clone()];
        Ok(b)
    }
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
    }
    image::open(path)
        .map(|i| i.to_luma8())
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn load_sample(root: &Path, manifest: &DatasetManifest, record: &SampleRecord) -> Result<LoadedSample> {
    let path = root.join(&record.image);
    let img = read_gray(&path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let image = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    let label = match &record.label {
        None => None,
        Some(rel) => {
            let lpath = root.join(rel);
            let l = read_gray(&lpath)?;
            if (l.width() as usize, l.height() as usize) != (w, h) {
                return Err(Error::Input(format!("{}: label size differs from image", lpath.display())));
            }
            let vals: Vec<usize> = l.as_raw().iter().map(|&v| v as usize).collect();
            if let Some(v) = vals.iter().find(|&&v| v >= manifest.num_classes) {
                return Err(Error::Input(format!("{}: class {v} out of range", lpath.display())));
            }
            Some(vals)
        }
    };
    Ok(LoadedSample {
        record: record.clone(),
        height: h,
        width: w,
        image,
        label,
    })
}

/// Manifest plus every decoded sample.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    samples: Vec<Arc<LoadedSample>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.exists() {
            return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found")));
        }
        let manifest = DatasetManifest::load(root)?;
        let samples = manifest
            .samples
            .iter()
            .map(|r| load_sample(root, &manifest, r).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            samples,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.manifest.num_modalities
    }

    pub fn samples(&self, k: usize, split: Split, filter: LabelFilter) -> Vec<Arc<LoadedSample>> {
        self.samples
            .iter()
            .filter(|s| s.record.modality_index == k && s.record.split == split && filter.accepts(s.record.labeled))
            .cloned()
            .collect()
    }

    /// One single-image batch per matching sample, in manifest order.
    pub fn batches(&self, k: usize, split: Split, filter: LabelFilter) -> Result<Vec<ModalityBatch>> {
        self.samples(k, split, filter).iter().map(|s| s.to_batch()).collect()
    }
}

/// Endless, reshuffling stream of batches drawn from one sample pool.
#[derive(Clone, Debug)]
pub struct BatchStream {
    samples: Vec<Arc<LoadedSample>>,
    modality: usize,
    batch_size: usize,
    crop: Option<usize>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    pub fn new(
        samples: Vec<Arc<LoadedSample>>,
        modality: usize,
        batch_size: usize,
        crop: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config(format!("modality {modality}: empty sample pool")));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.record.modality_index != modality) {
            return Err(Error::Contract(format!("{} is not from modality {modality}", s.record.id)));
        }
        let mut stream = Self {
            samples,
            modality,
            batch_size,
            crop,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
        };
        stream.reshuffle();
        Ok(stream)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.samples.len()).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Batches needed to see every sample once.
    pub fn batches_per_pass(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    /// Next sample in shuffled order, cycling with a fresh shuffle.
    pub fn next_sample(&mut self) -> Arc<LoadedSample> {
        if self.cursor == self.order.len() {
            self.reshuffle();
        }
        let s = self.samples[self.order[self.cursor]].clone();
        self.cursor += 1;
        s
    }

    pub fn next_batch(&mut self) -> Result<ModalityBatch> {
        let mut images = Vec::new();
        let mut labels = Vec::with_capacity(self.batch_size);
        let mut ids = Vec::with_capacity(self.batch_size);
        let mut dims = None;
        for _ in 0..self.batch_size {
            let s = self.next_sample();
            let (img, lab, h, w) = match self.crop {
                Some(size) => {
                    let (img, lab) = random_crop(&s.image, s.label.as_deref(), s.height, s.width, size, &mut self.rng)?;
                    (img, lab, size, size)
                }
                None => (s.image.clone(), s.label.clone(), s.height, s.width),
            };
            if *dims.get_or_insert((h, w)) != (h, w) {
                return Err(Error::Shape("samples in a batch differ in size".into()));
            }
            images.extend(img);
            labels.push(lab);
            ids.push(s.record.id.clone());
        }
        let labels = if labels.iter().all(|l| l.is_some()) {
            Some(labels.into_iter().flatten().flatten().collect())
        } else if labels.iter().all(|l| l.is_none()) {
            None
        } else {
            return Err(Error::Contract("batch mixes labeled and unlabeled samples".into()));
        };
        let (h, w) = dims.expect("batch size >= 1");
        let images = Tensor::from_vec(&[self.batch_size, 1, h, w], images)?;
        let mut batch = ModalityBatch::new(images, labels, self.modality)?;
        batch.ids = ids;
        Ok(batch)
    }
}

/// Number of batches per epoch: enough for the longest stream to be seen once.
pub fn epoch_steps(streams: &[&BatchStream]) -> usize {
    streams.iter().map(|s| s.batches_per_pass()).max().unwrap_or(0)
}

/// Same random window of the image and (optionally) its mask.
pub fn random_crop(
    image: &[f32],
    label: Option<&[usize]>,
    height: usize,
    width: usize,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f32>, Option<Vec<usize>>)> {
    if size > height || size > width || size == 0 {
        return Err(Error::Input(format!("cannot crop {size}x{size} from {height}x{width}")));
    }
    let y0 = rng.random_range(0..=height - size);
    let x0 = rng.random_range(0..=width - size);
    Ok(crop_at(image, label, width, size, y0, x0))
}

pub fn crop_at(
    image: &[f32],
    label: Option<&[usize]>,
    width: usize,
    size: usize,
    y0: usize,
    x0: usize,
) -> (Vec<f32>, Option<Vec<usize>>) {
    let mut img = Vec::with_capacity(size * size);
    let mut lab = label.map(|_| Vec::with_capacity(size * size));
    for y in y0..y0 + size {
        let row = y * width;
        img.extend_from_slice(&image[row + x0..row + x0 + size]);
        if let (Some(src), Some(dst)) = (label, lab.as_mut()) {
            dst.extend_from_slice(&src[row + x0..row + x0 + size]);
        }
    }
    (img, lab)
}

/// Additive Gaussian noise clipped to `[-clip, clip]`, result clamped to `[0, 1]`.
pub fn perturb_image(x: &Tensor<f32>, sigma: f64, clip: f64, seed: u64) -> Tensor<f32> {
    if sigma <= 0.0 {
        return x.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let mut out = x.clone();
    for v in out.data_mut() {
        let n: f64 = normal.sample(&mut rng);
        *v = (*v as f64 + n.clamp(-clip, clip)).clamp(0.0, 1.0) as f32;
    }
    out
}
