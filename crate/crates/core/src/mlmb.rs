//! Modality-level modulation bank.
//!
//! Every normalization site of the backbone owns one [`ModulationEntry`] per
//! modality (or a single shared entry for sites outside the configured
//! placement). An entry carries learnable affine parameters plus running
//! statistics tracked with an exponential moving average.

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamKey, Var};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and fold them into the running ones.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModulationEntry<F> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Scalar> ModulationEntry<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![F::one(); channels],
            beta: vec![F::zero(); channels],
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// EMA update `stat <- momentum * stat + (1 - momentum) * batch`.
    /// Batch variances are clamped below by `eps` so the running variance stays positive.
    pub fn update_stats(&mut self, momentum: F, eps: F, mean: &[F], var: &[F]) -> Result<()> {
        let ch = self.channels();
        if mean.len() != ch || var.len() != ch {
            return Err(Error::Shape(format!(
                "batch statistics have {}/{} channels, entry has {ch}",
                mean.len(),
                var.len()
            )));
        }
        if let Some(v) = var.iter().find(|v| **v < F::zero() || !v.is_finite()) {
            return Err(Error::Numeric(format!("invalid batch variance {v}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Numeric("non-finite batch mean".into()));
        }
        let keep = momentum;
        let take = F::one() - momentum;
        for c in 0..ch {
            self.mean[c] = keep * self.mean[c] + take * mean[c];
            self.var[c] = keep * self.var[c] + take * var[c].max(eps);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Site<F> {
    channels: usize,
    /// One entry per modality, or a single shared entry.
    entries: Vec<ModulationEntry<F>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModulationBank<F> {
    momentum: F,
    eps: F,
    num_modalities: usize,
    sites: Vec<Site<F>>,
}

impl<F: Scalar> ModulationBank<F> {
    /// Fresh bank with per-modality entries at every site.
    pub fn init(num_sites: usize, num_modalities: usize, widths: &[usize]) -> Result<Self> {
        Self::with_layout(num_sites, num_modalities, widths, &vec![true; widths.len()])
    }

    /// Like [`ModulationBank::init`], but sites with `modality_specific[i] == false`
    /// get one entry shared by all modalities.
    pub fn with_layout(
        num_sites: usize,
        num_modalities: usize,
        widths: &[usize],
        modality_specific: &[bool],
    ) -> Result<Self> {
        if widths.len() != num_sites || modality_specific.len() != num_sites {
            return Err(Error::Config(format!(
                "expected {num_sites} site widths, got {}",
                widths.len()
            )));
        }
        if num_modalities == 0 {
            return Err(Error::Config("at least one modality is required".into()));
        }
        if let Some(i) = widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("site {i} has zero channels")));
        }
        let sites = widths
            .iter()
            .zip(modality_specific)
            .map(|(&channels, &specific)| Site {
                channels,
                entries: vec![ModulationEntry::new(channels); if specific { num_modalities } else { 1 }],
            })
            .collect();
        Ok(Self {
            momentum: F::lit(DEFAULT_MOMENTUM),
            eps: F::lit(DEFAULT_EPS),
            num_modalities,
            sites,
        })
    }

    pub fn with_momentum(mut self, momentum: F) -> Result<Self> {
        if !(momentum >= F::zero() && momentum < F::one()) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        self.momentum = momentum;
        Ok(self)
    }

    pub fn with_eps(mut self, eps: F) -> Self {
        self.eps = eps;
        self
    }

    pub fn momentum(&self) -> F {
        self.momentum
    }

    pub fn eps(&self) -> F {
        self.eps
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn num_modalities(&self) -> usize {
        self.num_modalities
    }

    pub fn site_channels(&self, site: usize) -> usize {
        self.sites[site].channels
    }

    pub fn is_modality_specific(&self, site: usize) -> bool {
        self.sites[site].entries.len() > 1 || self.num_modalities == 1
    }

    /// Total number of stored entries.
    pub fn entry_count(&self) -> usize {
        self.sites.iter().map(|s| s.entries.len()).sum()
    }

    /// Index of the entry used by modality `k` at `site`.
    pub fn entry_index(&self, site: usize, k: usize) -> Result<usize> {
        let s = self
            .sites
            .get(site)
            .ok_or_else(|| Error::Config(format!("no modulation site {site}")))?;
        if k >= self.num_modalities {
            return Err(Error::Config(format!(
                "modality {k} out of range (K = {})",
                self.num_modalities
            )));
        }
        Ok(if s.entries.len() == 1 { 0 } else { k })
    }

    pub fn entry(&self, site: usize, k: usize) -> Result<&ModulationEntry<F>> {
        let idx = self.entry_index(site, k)?;
        Ok(&self.sites[site].entries[idx])
    }

    pub fn entry_mut(&mut self, site: usize, k: usize) -> Result<&mut ModulationEntry<F>> {
        let idx = self.entry_index(site, k)?;
        Ok(&mut self.sites[site].entries[idx])
    }

    /// Entries stored at `site`, in entry-index order.
    pub fn site_entries(&self, site: usize) -> &[ModulationEntry<F>] {
        &self.sites[site].entries
    }

    pub fn site_entries_mut(&mut self, site: usize) -> &mut [ModulationEntry<F>] {
        &mut self.sites[site].entries
    }

    /// Folds batch statistics into the running statistics of `(site, k)`.
    pub fn update_stats(&mut self, site: usize, k: usize, mean: &[F], var: &[F]) -> Result<()> {
        let (momentum, eps) = (self.momentum, self.eps);
        self.entry_mut(site, k)?.update_stats(momentum, eps, mean, var)
    }

    /// Applies the modulation of `(site, k)` to `z` (`[B, Ch, H, W]`).
    pub fn modulate(
        &mut self,
        g: &mut Graph<F>,
        z: Var,
        site: usize,
        k: usize,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Eval => self.modulate_eval(g, z, site, k),
            Mode::Train => {
                let (y, stats) = self.apply(g, z, site, k, true)?;
                let stats = stats.expect("train mode yields batch statistics");
                self.update_stats(site, k, &stats.mean, &stats.var)?;
                Ok(y)
            }
        }
    }

    /// Normalizes with the batch's own statistics without recording them.
    pub fn modulate_batch(&self, g: &mut Graph<F>, z: Var, site: usize, k: usize) -> Result<Var> {
        self.apply(g, z, site, k, true).map(|(y, _)| y)
    }

    /// Eval-mode modulation; leaves the bank untouched.
    pub fn modulate_eval(&self, g: &mut Graph<F>, z: Var, site: usize, k: usize) -> Result<Var> {
        self.apply(g, z, site, k, false).map(|(y, _)| y)
    }

    fn apply(
        &self,
        g: &mut Graph<F>,
        z: Var,
        site: usize,
        k: usize,
        train: bool,
    ) -> Result<(Var, Option<crate::graph::ChannelStats<F>>)> {
        let idx = self.entry_index(site, k)?;
        let entry = &self.sites[site].entries[idx];
        let shape = g.shape(z).to_vec();
        if shape.len() != 4 || shape[1] != entry.channels() {
            return Err(Error::Shape(format!(
                "site {site} expects {} channels, got input {shape:?}",
                entry.channels()
            )));
        }
        if train && shape[0] * shape[2] * shape[3] < 2 {
            return Err(Error::Shape(
                "train-mode modulation needs at least two values per channel".into(),
            ));
        }
        if !g.value(z).all_finite() {
            return Err(Error::Numeric(format!("non-finite input at modulation site {site}")));
        }
        let ch = entry.channels();
        let gamma = g.param(
            Tensor::from_vec(&[ch], entry.gamma.clone())?,
            ParamKey::Gamma(site, idx),
        );
        let beta = g.param(
            Tensor::from_vec(&[ch], entry.beta.clone())?,
            ParamKey::Beta(site, idx),
        );
        let running = (!train).then_some((entry.mean.as_slice(), entry.var.as_slice()));
        Ok(g.modulate(z, gamma, beta, running, self.eps))
    }

    /// Mutable access to learnable `(key, values)` pairs for the optimizer.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamKey, &mut [F])) {
        for (site, s) in self.sites.iter_mut().enumerate() {
            for (idx, e) in s.entries.iter_mut().enumerate() {
                f(ParamKey::Gamma(site, idx), &mut e.gamma);
                f(ParamKey::Beta(site, idx), &mut e.beta);
            }
        }
    }
}
