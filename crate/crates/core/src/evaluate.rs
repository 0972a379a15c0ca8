//! Overlap and boundary metrics, sliding-window inference, split evaluation.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ModalityBatch, Norms, UNet};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::pseudo_label;
use crate::mlmb::ModulationBank;
use crate::mlpb::{EmbeddingRow, PrototypeBank};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub window: usize,
    pub stride: usize,
    /// HD95 when exactly one of the two masks is empty; `None` means the
    /// image diagonal.
    pub empty_penalty: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window: 128,
            stride: 64,
            empty_penalty: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Config("eval.window and eval.stride must be >= 1".into()));
        }
        if let Some(p) = self.empty_penalty {
            if !(p >= 0.0) {
                return Err(Error::Config("eval.empty_penalty must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// A 2D label mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask<'a> {
    pub height: usize,
    pub width: usize,
    pub labels: &'a [usize],
}

impl<'a> Mask<'a> {
    pub fn new(height: usize, width: usize, labels: &'a [usize]) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Input(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    fn binary(&self, class: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }
}

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Input(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `2|P and T| / (|P| + |T|)`, 1 when both are empty.
pub fn dsc(pred: &Mask, truth: &Mask, class: usize) -> Result<f64> {
    same_shape(pred, truth)?;
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels.iter().zip(truth.labels) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        t += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Foreground pixels with a 4-neighbour outside the set; the image border
/// counts as outside.
pub fn boundary(set: &[bool], height: usize, width: usize) -> Vec<bool> {
    let mut out = vec![false; set.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !set[i] {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == height
                || x + 1 == width
                || !set[i - 1]
                || !set[i + 1]
                || !set[i - width]
                || !set[i + width];
            out[i] = edge;
        }
    }
    out
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel (separable lower-envelope transform). Empty sets give infinity.
pub fn squared_distance_transform(set: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut d: Vec<f64> = set.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let n = height.max(width);
    let mut buf_f = vec![0.0; n];
    let mut buf_d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..width {
        for y in 0..height {
            buf_f[y] = d[y * width + x];
        }
        envelope(&buf_f[..height], &mut buf_d[..height], &mut v, &mut z);
        for y in 0..height {
            d[y * width + x] = buf_d[y];
        }
    }
    for y in 0..height {
        buf_f[..width].copy_from_slice(&d[y * width..(y + 1) * width]);
        envelope(&buf_f[..width], &mut buf_d[..width], &mut v, &mut z);
        d[y * width..(y + 1) * width].copy_from_slice(&buf_d[..width]);
    }
    d
}

/// 1D squared distance transform of sampled function `f` into `out`.
fn envelope(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let Some(first) = (0..n).find(|&q| f[q].is_finite()) else {
        out.fill(f64::INFINITY);
        return;
    };
    let mut k = 0;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * (qf - p));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        *o = (qf - p) * (qf - p) + f[v[k]];
    }
}

/// Linear-interpolated percentile of unsorted values, `pct` in `[0, 100]`.
pub fn percentile(values: &mut [f64], pct: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = pct / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// 95th percentile of the pooled nearest boundary distances in both
/// directions. Both empty gives 0; one empty gives `empty_penalty`, or the
/// image diagonal when `None`.
pub fn hd95(pred: &Mask, truth: &Mask, class: usize, empty_penalty: Option<f64>) -> Result<f64> {
    same_shape(pred, truth)?;
    let (h, w) = (pred.height, pred.width);
    let bp = boundary(&pred.binary(class), h, w);
    let bt = boundary(&truth.binary(class), h, w);
    let (np, nt) = (bp.iter().any(|&b| b), bt.iter().any(|&b| b));
    match (np, nt) {
        (false, false) => return Ok(0.0),
        (true, true) => {}
        _ => return Ok(empty_penalty.unwrap_or(((h * h + w * w) as f64).sqrt())),
    }
    let dt = squared_distance_transform(&bt, h, w);
    let dp = squared_distance_transform(&bp, h, w);
    let mut dists: Vec<f64> = bp
        .iter()
        .zip(&dt)
        .filter(|(b, _)| **b)
        .map(|(_, d)| d.sqrt())
        .chain(bt.iter().zip(&dp).filter(|(b, _)| **b).map(|(_, d)| d.sqrt()))
        .collect();
    Ok(percentile(&mut dists, 95.0))
}

/// Window origins along one axis: every `stride` from 0, plus a final
/// window flush with the far edge.
pub fn window_starts(size: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=size - window).step_by(stride).collect();
    if *starts.last().unwrap() != size - window {
        starts.push(size - window);
    }
    starts
}

/// Tiles `[1, Cin, H, W]` with windows, runs `predict` on each and averages
/// the overlapping `[1, C, window, window]` outputs.
pub fn sliding_window(
    image: &Tensor<f32>,
    window: usize,
    stride: usize,
    mut predict: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    let (b, cin, h, w) = image.dims4();
    if b != 1 {
        return Err(Error::Input(format!("sliding window takes one image, got {b}")));
    }
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be >= 1".into()));
    }
    if window > h || window > w {
        return Err(Error::Input(format!("window {window} larger than image {h}x{w}")));
    }
    let ys = window_starts(h, window, stride);
    let xs = window_starts(w, window, stride);
    let mut sum: Option<Vec<f64>> = None;
    let mut classes = 0;
    let mut count = vec![0u32; h * w];
    let src = image.data();
    for &y0 in &ys {
        for &x0 in &xs {
            let mut patch = Vec::with_capacity(cin * window * window);
            for c in 0..cin {
                for y in y0..y0 + window {
                    let row = (c * h + y) * w;
                    patch.extend_from_slice(&src[row + x0..row + x0 + window]);
                }
            }
            let out = predict(&Tensor::from_vec(&[1, cin, window, window], patch)?)?;
            let (ob, oc, oh, ow) = out.dims4();
            if (ob, oh, ow) != (1, window, window) {
                return Err(Error::Shape(format!("window prediction has shape {:?}", out.shape())));
            }
            let acc = sum.get_or_insert_with(|| {
                classes = oc;
                vec![0.0; oc * h * w]
            });
            if oc != classes {
                return Err(Error::Shape("window predictions disagree on class count".into()));
            }
            let od = out.data();
            for c in 0..oc {
                for y in 0..window {
                    for x in 0..window {
                        acc[(c * h + y0 + y) * w + x0 + x] += od[(c * window + y) * window + x] as f64;
                    }
                }
            }
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    count[y * w + x] += 1;
                }
            }
        }
    }
    let sum = sum.expect("at least one window");
    let data = sum
        .iter()
        .enumerate()
        .map(|(i, v)| (v / count[i % (h * w)] as f64) as f32)
        .collect();
    Tensor::from_vec(&[1, classes, h, w], data)
}

/// Full-image logits of modality `k` via eval-mode windows.
pub fn sliding_window_predict(
    net: &UNet<f32>,
    mlmb: &ModulationBank<f32>,
    prototypes: &PrototypeBank<f32>,
    image: &Tensor<f32>,
    window: usize,
    stride: usize,
    k: usize,
) -> Result<Tensor<f32>> {
    sliding_window(image, window, stride, |patch| {
        let mut g = Graph::new();
        let batch = ModalityBatch::new(patch.clone(), None, k)?;
        let out = net.forward(&mut g, &batch, Norms::Eval(mlmb), prototypes)?;
        Ok(g.value(out.logits).clone())
    })
}

/// Per-class scores of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub id: String,
    pub modality: usize,
    pub dsc: Vec<f64>,
    pub hd95: Vec<f64>,
}

impl ImageScores {
    pub fn compute(
        id: impl Into<String>,
        modality: usize,
        pred: &Mask,
        truth: &Mask,
        classes: usize,
        empty_penalty: Option<f64>,
    ) -> Result<Self> {
        let mut dscs = Vec::with_capacity(classes);
        let mut hds = Vec::with_capacity(classes);
        for c in 0..classes {
            dscs.push(dsc(pred, truth, c)?);
            hds.push(hd95(pred, truth, c, empty_penalty)?);
        }
        Ok(Self {
            id: id.into(),
            modality,
            dsc: dscs,
            hd95: hds,
        })
    }

    pub fn mean_dsc(&self) -> f64 {
        foreground_mean(&self.dsc)
    }

    pub fn mean_hd95(&self) -> f64 {
        foreground_mean(&self.hd95)
    }
}

fn foreground_mean(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    v[1..].iter().sum::<f64>() / (v.len() - 1) as f64
}

/// Scores averaged over a modality's images.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityScores {
    pub modality: usize,
    pub images: usize,
    pub dsc: Vec<f64>,
    pub hd95: Vec<f64>,
}

impl ModalityScores {
    pub fn mean_dsc(&self) -> f64 {
        foreground_mean(&self.dsc)
    }

    pub fn mean_hd95(&self) -> f64 {
        foreground_mean(&self.hd95)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalResult {
    pub images: Vec<ImageScores>,
    pub modalities: Vec<ModalityScores>,
}

impl EvalResult {
    pub fn from_images(images: Vec<ImageScores>, num_modalities: usize, classes: usize) -> Self {
        let modalities = (0..num_modalities)
            .map(|k| {
                let own: Vec<&ImageScores> = images.iter().filter(|s| s.modality == k).collect();
                let n = own.len();
                let avg = |f: &dyn Fn(&ImageScores) -> &Vec<f64>| -> Vec<f64> {
                    (0..classes)
                        .map(|c| {
                            if n == 0 {
                                f64::NAN
                            } else {
                                own.iter().map(|s| f(s)[c]).sum::<f64>() / n as f64
                            }
                        })
                        .collect()
                };
                ModalityScores {
                    modality: k,
                    images: n,
                    dsc: avg(&|s| &s.dsc),
                    hd95: avg(&|s| &s.hd95),
                }
            })
            .collect();
        Self { images, modalities }
    }

    /// Mean over modalities of the foreground-mean DSC.
    pub fn mean_dsc(&self) -> f64 {
        self.modalities.iter().map(|m| m.mean_dsc()).sum::<f64>() / self.modalities.len() as f64
    }

    pub fn mean_hd95(&self) -> f64 {
        self.modalities.iter().map(|m| m.mean_hd95()).sum::<f64>() / self.modalities.len() as f64
    }

    /// `modality,image,class,dsc,hd95`; per-modality and overall means use
    /// `mean` in the image column and `fg` in the class column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("modality,image,class,dsc,hd95\n");
        for s in &self.images {
            for c in 0..s.dsc.len() {
                out.push_str(&format!("{},{},{c},{},{}\n", s.modality, s.id, s.dsc[c], s.hd95[c]));
            }
            out.push_str(&format!("{},{},fg,{},{}\n", s.modality, s.id, s.mean_dsc(), s.mean_hd95()));
        }
        for m in &self.modalities {
            for c in 0..m.dsc.len() {
                out.push_str(&format!("{},mean,{c},{},{}\n", m.modality, m.dsc[c], m.hd95[c]));
            }
            out.push_str(&format!("{},mean,fg,{},{}\n", m.modality, m.mean_dsc(), m.mean_hd95()));
        }
        out.push_str(&format!("all,mean,fg,{},{}\n", self.mean_dsc(), self.mean_hd95()));
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Evaluates labeled single-image batches with sliding-window inference.
pub fn evaluate_samples<'a>(
    net: &UNet<f32>,
    mlmb: &ModulationBank<f32>,
    prototypes: &PrototypeBank<f32>,
    samples: impl IntoIterator<Item = &'a ModalityBatch>,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    cfg.validate()?;
    let classes = net.config().num_classes;
    let mut images = Vec::new();
    for s in samples {
        let labels = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::Contract("evaluation needs labeled samples".into()))?;
        let (b, _, h, w) = s.images.dims4();
        if b != 1 {
            return Err(Error::Input(format!("evaluation takes single images, got batch {b}")));
        }
        let window = cfg.window.min(h).min(w);
        let logits = sliding_window_predict(net, mlmb, prototypes, &s.images, window, cfg.stride, s.modality)?;
        let pred = pseudo_label(&logits);
        let id = s.ids.first().cloned().unwrap_or_else(|| images.len().to_string());
        images.push(ImageScores::compute(
            id,
            s.modality,
            &Mask::new(h, w, &pred)?,
            &Mask::new(h, w, labels)?,
            classes,
            cfg.empty_penalty,
        )?);
    }
    Ok(EvalResult::from_images(images, net.config().num_modalities, classes))
}

/// Samples `count` labeled pixels uniformly without replacement from all
/// `samples` and returns their eval-mode embeddings with modality and
/// ground-truth class.
pub fn export_embeddings<'a>(
    net: &UNet<f32>,
    mlmb: &ModulationBank<f32>,
    prototypes: &PrototypeBank<f32>,
    samples: impl IntoIterator<Item = &'a ModalityBatch>,
    count: usize,
    seed: u64,
) -> Result<Vec<EmbeddingRow>> {
    let samples: Vec<&ModalityBatch> = samples.into_iter().collect();
    let mut offsets = Vec::with_capacity(samples.len() + 1);
    offsets.push(0);
    for s in &samples {
        if s.labels.is_none() || s.len() != 1 {
            return Err(Error::Contract("embedding export needs labeled single images".into()));
        }
        let (_, _, h, w) = s.images.dims4();
        offsets.push(offsets.last().unwrap() + h * w);
    }
    let total = *offsets.last().unwrap();
    if count > total {
        return Err(Error::Input(format!("{count} pixels requested, {total} available")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, total, count).into_vec();
    picks.sort_unstable();
    let mut rows = Vec::with_capacity(count);
    let mut next = 0;
    for (i, s) in samples.iter().enumerate() {
        let end = picks[next..].partition_point(|&p| p < offsets[i + 1]) + next;
        if end == next {
            continue;
        }
        let mut g = Graph::new();
        let out = net.forward(&mut g, s, Norms::Eval(mlmb), prototypes)?;
        let emb = g.value(out.embeddings);
        let (_, d, h, w) = emb.dims4();
        let labels = s.labels.as_ref().unwrap();
        for &p in &picks[next..end] {
            let px = p - offsets[i];
            rows.push(EmbeddingRow {
                embedding: (0..d).map(|c| emb.data()[c * h * w + px]).collect(),
                modality: s.modality,
                class: labels[px],
            });
        }
        next = end;
    }
    Ok(rows)
}
