//! Modality-level prototype bank.
//!
//! Holds `K x C` unit-norm class prototypes of dimension `D`, solves the
//! pixel-to-prototype assignment as entropic optimal transport with
//! Sinkhorn-Knopp scaling, and keeps prototypes current with an EMA of
//! class-mean embeddings.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_SMOOTHNESS: f64 = 0.05;
pub const DEFAULT_SINKHORN_ITERS: usize = 3;

/// Soft transport plan between `C` prototypes and `N` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub classes: usize,
    pub pixels: usize,
    /// Row-major `[C, N]`, nonnegative.
    pub plan: Vec<f64>,
    /// Per-pixel argmax over classes; ties go to the lowest class.
    pub hard_labels: Vec<usize>,
}

impl Assignment {
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.pixels];
        for row in self.plan.chunks(self.pixels) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.pixels).map(|r| r.iter().sum()).collect()
    }

    pub fn entropy(&self) -> f64 {
        self.plan
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| -v * v.ln())
            .sum()
    }
}

/// Sinkhorn-Knopp scaling of `exp(scores / smoothness)` towards row sums `N/C`
/// and column sums `1`.
///
/// `scores` is row-major `[C, N]`. Each iteration renormalizes rows, then
/// columns. Potentials are kept in the log domain: the kernel is built from
/// column-max-shifted scores and the scaling vectors are absorbed back into
/// the potentials whenever they drift far from one.
pub fn sinkhorn(
    scores: &[f64],
    classes: usize,
    pixels: usize,
    smoothness: f64,
    iters: usize,
) -> Result<Vec<f64>> {
    if classes == 0 || pixels < classes {
        return Err(Error::Input(format!(
            "assignment needs N >= C >= 1 (C = {classes}, N = {pixels})"
        )));
    }
    if scores.len() != classes * pixels {
        return Err(Error::Shape(format!(
            "score matrix has {} entries, expected {}",
            scores.len(),
            classes * pixels
        )));
    }
    if !(smoothness > 0.0) || !smoothness.is_finite() {
        return Err(Error::Config(format!("smoothness {smoothness} must be positive")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite similarity".into()));
    }
    const ABSORB: f64 = 1e100;
    let log_kernel: Vec<f64> = scores.iter().map(|s| s / smoothness).collect();
    let row_target = pixels as f64 / classes as f64;

    let mut f = vec![0.0f64; classes];
    let mut g = vec![f64::NEG_INFINITY; pixels];
    for c in 0..classes {
        for n in 0..pixels {
            g[n] = g[n].max(log_kernel[c * pixels + n]);
        }
    }
    g.iter_mut().for_each(|v| *v = -*v);

    let build = |f: &[f64], g: &[f64]| -> Vec<f64> {
        let mut k = vec![0.0; classes * pixels];
        for c in 0..classes {
            let row = &log_kernel[c * pixels..(c + 1) * pixels];
            for n in 0..pixels {
                k[c * pixels + n] = (row[n] + f[c] + g[n]).exp();
            }
        }
        k
    };
    let mut kernel = build(&f, &g);
    let mut u = vec![1.0f64; classes];
    let mut v = vec![1.0f64; pixels];
    let mut col = vec![0.0f64; pixels];

    for _ in 0..iters {
        for c in 0..classes {
            let row = &kernel[c * pixels..(c + 1) * pixels];
            let s: f64 = row.iter().zip(&v).map(|(k, v)| k * v).sum();
            u[c] = row_target / s;
        }
        col.iter_mut().for_each(|x| *x = 0.0);
        for c in 0..classes {
            let row = &kernel[c * pixels..(c + 1) * pixels];
            let uc = u[c];
            for n in 0..pixels {
                col[n] += row[n] * uc;
            }
        }
        for n in 0..pixels {
            v[n] = 1.0 / col[n];
        }
        let drift = u.iter().chain(&v).any(|&x| !(x < ABSORB && x > 1.0 / ABSORB));
        if drift {
            for c in 0..classes {
                f[c] += u[c].ln();
                u[c] = 1.0;
            }
            for n in 0..pixels {
                g[n] += v[n].ln();
                v[n] = 1.0;
            }
            kernel = build(&f, &g);
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("Sinkhorn scaling diverged".into()));
        }
    }
    let mut plan = kernel;
    for c in 0..classes {
        for n in 0..pixels {
            plan[c * pixels + n] *= u[c] * v[n];
        }
    }
    Ok(plan)
}

/// `s[c, n] = <p_c, i_n>` for embeddings `[D, N]` and prototypes `[C, D]`.
pub fn similarity<F: Scalar>(
    embeddings: &[F],
    dim: usize,
    prototypes: &[F],
    classes: usize,
) -> Result<Vec<F>> {
    if dim == 0 || embeddings.len() % dim != 0 || prototypes.len() != classes * dim {
        return Err(Error::Shape(format!(
            "similarity: embeddings of length {} and prototypes of length {} do not share D = {dim}",
            embeddings.len(),
            prototypes.len()
        )));
    }
    let pixels = embeddings.len() / dim;
    let mut out = vec![F::zero(); classes * pixels];
    crate::tensor::gemm(classes, dim, pixels, F::one(), prototypes, false, embeddings, false, F::zero(), &mut out);
    Ok(out)
}

fn argmax_columns(plan: &[f64], classes: usize, pixels: usize) -> Vec<usize> {
    (0..pixels)
        .map(|n| {
            let mut best = 0;
            for c in 1..classes {
                if plan[c * pixels + n] > plan[best * pixels + n] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<F> {
    modalities: usize,
    classes: usize,
    dim: usize,
    /// Row-major `[K, C, D]`.
    prototypes: Vec<F>,
    momentum: F,
    smoothness: f64,
    sinkhorn_iters: usize,
}

impl<F: Scalar> PrototypeBank<F> {
    /// Random unit-norm prototypes drawn from an isotropic Gaussian.
    pub fn random(modalities: usize, classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if modalities == 0 || classes < 2 || dim == 0 {
            return Err(Error::Config(format!(
                "prototype bank needs K >= 1, C >= 2, D >= 1 (got {modalities}, {classes}, {dim})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prototypes: Vec<F> = (0..modalities * classes * dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                F::lit(v)
            })
            .collect();
        for p in prototypes.chunks_mut(dim) {
            normalize(p);
        }
        Ok(Self {
            modalities,
            classes,
            dim,
            prototypes,
            momentum: F::lit(DEFAULT_MOMENTUM),
            smoothness: DEFAULT_SMOOTHNESS,
            sinkhorn_iters: DEFAULT_SINKHORN_ITERS,
        })
    }

    /// Bank from explicit `[K, C, D]` values; every row is normalized.
    pub fn from_values(modalities: usize, classes: usize, dim: usize, mut values: Vec<F>) -> Result<Self> {
        if values.len() != modalities * classes * dim {
            return Err(Error::Shape(format!(
                "expected {} prototype values, got {}",
                modalities * classes * dim,
                values.len()
            )));
        }
        let mut bank = Self::random(modalities, classes, dim, 0)?;
        for p in values.chunks_mut(dim) {
            normalize(p);
        }
        bank.prototypes = values;
        Ok(bank)
    }

    pub fn with_momentum(mut self, momentum: F) -> Result<Self> {
        if !(momentum >= F::zero() && momentum < F::one()) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        self.momentum = momentum;
        Ok(self)
    }

    pub fn with_sinkhorn(mut self, smoothness: f64, iters: usize) -> Result<Self> {
        if !(smoothness > 0.0) {
            return Err(Error::Config(format!("smoothness {smoothness} must be positive")));
        }
        self.smoothness = smoothness;
        self.sinkhorn_iters = iters;
        Ok(self)
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> F {
        self.momentum
    }

    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    pub fn sinkhorn_iters(&self) -> usize {
        self.sinkhorn_iters
    }

    fn check_modality(&self, k: usize) -> Result<()> {
        if k >= self.modalities {
            return Err(Error::Config(format!(
                "modality {k} out of range (K = {})",
                self.modalities
            )));
        }
        Ok(())
    }

    /// Prototypes of modality `k`, row-major `[C, D]`.
    pub fn prototypes(&self, k: usize) -> Result<&[F]> {
        self.check_modality(k)?;
        let stride = self.classes * self.dim;
        Ok(&self.prototypes[k * stride..(k + 1) * stride])
    }

    pub fn prototypes_mut(&mut self, k: usize) -> Result<&mut [F]> {
        self.check_modality(k)?;
        let stride = self.classes * self.dim;
        Ok(&mut self.prototypes[k * stride..(k + 1) * stride])
    }

    pub fn all_values(&self) -> &[F] {
        &self.prototypes
    }

    /// Cosine similarity `[C, N]` of embeddings `[D, N]` to modality `k`'s prototypes.
    pub fn similarity(&self, embeddings: &[F], k: usize) -> Result<Vec<F>> {
        similarity(embeddings, self.dim, self.prototypes(k)?, self.classes)
    }

    /// Entropic-OT assignment of embeddings `[D, N]` to modality `k`'s prototypes.
    pub fn assign(&self, embeddings: &[F], k: usize) -> Result<Assignment> {
        self.assign_with(embeddings, k, self.sinkhorn_iters)
    }

    pub fn assign_with(&self, embeddings: &[F], k: usize, iters: usize) -> Result<Assignment> {
        let scores: Vec<f64> = self
            .similarity(embeddings, k)?
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect();
        let pixels = scores.len() / self.classes;
        let plan = sinkhorn(&scores, self.classes, pixels, self.smoothness, iters)?;
        let hard_labels = argmax_columns(&plan, self.classes, pixels);
        Ok(Assignment {
            classes: self.classes,
            pixels,
            plan,
            hard_labels,
        })
    }

    /// EMA update of modality `k`'s prototypes towards the mean embedding of
    /// each class. `embeddings` is `[B, D, H, W]`, `labels` has one class per
    /// pixel in `(b, y, x)` order. Classes without pixels stay bitwise unchanged.
    pub fn update(&mut self, k: usize, embeddings: &Tensor<F>, labels: &[usize]) -> Result<()> {
        self.check_modality(k)?;
        let (bs, d, h, w) = embeddings.dims4();
        if d != self.dim {
            return Err(Error::Shape(format!(
                "embedding dim {d} does not match prototype dim {}",
                self.dim
            )));
        }
        let hw = h * w;
        if labels.len() != bs * hw {
            return Err(Error::Shape(format!(
                "{} labels for {} pixels",
                labels.len(),
                bs * hw
            )));
        }
        let (classes, dim) = (self.classes, self.dim);
        let mut sums = vec![F::zero(); classes * dim];
        let mut counts = vec![0usize; classes];
        let ev = embeddings.data();
        for bi in 0..bs {
            for p in 0..hw {
                let c = labels[bi * hw + p];
                if c >= classes {
                    return Err(Error::Input(format!("class {c} out of range (C = {classes})")));
                }
                counts[c] += 1;
                for j in 0..dim {
                    sums[c * dim + j] += ev[(bi * dim + j) * hw + p];
                }
            }
        }
        let momentum = self.momentum;
        let protos = self.prototypes_mut(k)?;
        for c in 0..classes {
            if counts[c] == 0 {
                continue;
            }
            let n = F::from_usize(counts[c]).unwrap();
            let p = &mut protos[c * dim..(c + 1) * dim];
            for j in 0..dim {
                p[j] = momentum * p[j] + (F::one() - momentum) * sums[c * dim + j] / n;
            }
            normalize(p);
        }
        Ok(())
    }
}

fn normalize<F: Scalar>(v: &mut [F]) {
    let norm = v.iter().map(|x| *x * *x).sum::<F>().sqrt();
    if norm > F::zero() {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// One exported embedding row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub embedding: Vec<f32>,
    pub modality: usize,
    pub class: usize,
}

/// Writes rows as a headerless little-endian `f32` table with `D + 2`
/// columns: the embedding, then the modality id and class id.
pub fn write_embedding_table(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in rows {
        for &v in &r.embedding {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&(r.modality as f32).to_le_bytes());
        bytes.extend_from_slice(&(r.class as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a table written by [`write_embedding_table`].
pub fn read_embedding_table(path: &Path, dim: usize) -> Result<Vec<EmbeddingRow>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let row_bytes = (dim + 2) * 4;
    if bytes.len() % row_bytes != 0 {
        return Err(Error::Shape(format!(
            "table of {} bytes is not a whole number of {dim}+2 column rows",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks(row_bytes)
        .map(|row| {
            let vals: Vec<f32> = row
                .chunks(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            EmbeddingRow {
                embedding: vals[..dim].to_vec(),
                modality: vals[dim] as usize,
                class: vals[dim + 1] as usize,
            }
        })
        .collect())
}
