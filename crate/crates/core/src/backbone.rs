//! Modality all-in-one U-Net.
//!
//! All convolutions are shared across modalities. Every 3x3 convolution is
//! followed by a normalization site whose parameters come from the
//! [`ModulationBank`]; the decoder stages feed a multi-scale projector that
//! produces unit-norm pixel embeddings compared against the modality's
//! prototypes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamKey, Var};
use crate::mlmb::{Mode, ModulationBank};
use crate::mlpb::PrototypeBank;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MlmbPlacement {
    EncoderOnly,
    EncoderBottleneck,
    #[default]
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub num_modalities: usize,
    pub base_width: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub mlmb_placement: MlmbPlacement,
    /// When off, every site uses one normalization entry shared by all modalities.
    pub mlmb: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            num_modalities: 1,
            base_width: 16,
            depth: 4,
            embed_dim: 64,
            mlmb_placement: MlmbPlacement::All,
            mlmb: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("network.num_classes must be >= 2".into()));
        }
        if self.num_modalities < 1 {
            return Err(Error::Config("network.num_modalities must be >= 1".into()));
        }
        if self.embed_dim < 1 {
            return Err(Error::Config("network.embed_dim must be >= 1".into()));
        }
        if self.depth < 2 {
            return Err(Error::Config("network.depth must be >= 2".into()));
        }
        if self.base_width < 1 || self.in_channels < 1 {
            return Err(Error::Config(
                "network.base_width and network.in_channels must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Channel width of encoder stage `s`; `s == depth` is the bottleneck.
    pub fn stage_width(&self, s: usize) -> usize {
        self.base_width << s
    }

    pub fn num_sites(&self) -> usize {
        4 * self.depth + 2
    }

    /// Channel count of every modulation site, in execution order.
    pub fn site_widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.num_sites());
        for s in 0..self.depth {
            widths.extend([self.stage_width(s); 2]);
        }
        widths.extend([self.stage_width(self.depth); 2]);
        for s in (0..self.depth).rev() {
            widths.extend([self.stage_width(s); 2]);
        }
        widths
    }

    /// Which sites carry per-modality entries.
    pub fn modality_specific_sites(&self) -> Vec<bool> {
        let d = self.depth;
        (0..self.num_sites())
            .map(|i| {
                self.mlmb
                    && match self.mlmb_placement {
                        MlmbPlacement::EncoderOnly => i < 2 * d,
                        MlmbPlacement::EncoderBottleneck => i < 2 * d + 2,
                        MlmbPlacement::All => true,
                    }
            })
            .collect()
    }

    /// Input width of the projector: the sum of all decoder stage widths.
    pub fn projector_in_width(&self) -> usize {
        (0..self.depth).map(|s| self.stage_width(s)).sum()
    }

    pub fn new_modulation_bank<F: Scalar>(&self) -> Result<ModulationBank<F>> {
        ModulationBank::with_layout(
            self.num_sites(),
            self.num_modalities,
            &self.site_widths(),
            &self.modality_specific_sites(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBatch {
    /// `[B, in_channels, H, W]` intensities in `[0, 1]`.
    pub images: Tensor<f32>,
    /// One class per pixel in `(b, y, x)` order, present iff `labeled`.
    pub labels: Option<Vec<usize>>,
    pub modality: usize,
    pub labeled: bool,
    /// Sample ids, for logging and export.
    pub ids: Vec<String>,
}

impl ModalityBatch {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<usize>>, modality: usize) -> Result<Self> {
        let (b, _, h, w) = images.dims4();
        if let Some(l) = &labels {
            if l.len() != b * h * w {
                return Err(Error::Shape(format!(
                    "{} labels for a {b}x{h}x{w} batch",
                    l.len()
                )));
            }
        }
        Ok(Self {
            labeled: labels.is_some(),
            images,
            labels,
            modality,
            ids: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handles into the graph for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SegOutput {
    /// `[B, C, H, W]`
    pub logits: Var,
    /// `[B, D, H, W]`, unit norm along `D`.
    pub embeddings: Var,
    /// `[B, C, H, W]` cosine similarity to the modality's prototypes.
    pub proto_sim: Var,
    pub modality: usize,
}

impl SegOutput {
    /// Wraps existing logits and embeddings, computing the similarity to
    /// modality `k`'s prototypes.
    pub fn assemble<F: Scalar>(
        g: &mut Graph<F>,
        logits: Var,
        embeddings: Var,
        prototypes: &PrototypeBank<F>,
        k: usize,
    ) -> Result<Self> {
        let dim = g.shape(embeddings)[1];
        if dim != prototypes.dim() {
            return Err(Error::Shape(format!(
                "embedding dim {dim} does not match prototype dim {}",
                prototypes.dim()
            )));
        }
        let proto_sim = g.mix_channels(embeddings, prototypes.prototypes(k)?, prototypes.num_classes());
        Ok(Self {
            logits,
            embeddings,
            proto_sim,
            modality: k,
        })
    }
}

/// How the modulation bank is consulted during a forward pass.
pub enum Norms<'a, F> {
    /// Batch statistics, recorded into the running statistics.
    Train(&'a mut ModulationBank<F>),
    /// Batch statistics, bank left untouched.
    Batch(&'a ModulationBank<F>),
    /// Running statistics.
    Eval(&'a ModulationBank<F>),
}

impl<F: Scalar> Norms<'_, F> {
    fn apply(&mut self, g: &mut Graph<F>, z: Var, site: usize, k: usize) -> Result<Var> {
        match self {
            Norms::Train(bank) => bank.modulate(g, z, site, k, Mode::Train),
            Norms::Batch(bank) => bank.modulate_batch(g, z, site, k),
            Norms::Eval(bank) => bank.modulate_eval(g, z, site, k),
        }
    }

    fn bank(&self) -> &ModulationBank<F> {
        match self {
            Norms::Train(b) => b,
            Norms::Batch(b) | Norms::Eval(b) => b,
        }
    }
}

/// Encoder feature dropout applied during a perturbed forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureDrop {
    pub rate: f64,
    pub seed: u64,
}

/// Inverted-dropout mask: each element is zeroed with probability `rate`,
/// survivors are scaled by `1 / (1 - rate)`; `rate == 1` zeroes everything.
pub fn dropout_mask<F: Scalar>(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<F> {
    let keep = if rate >= 1.0 {
        F::zero()
    } else {
        F::lit(1.0 / (1.0 - rate))
    };
    (0..len)
        .map(|_| {
            if rate > 0.0 && rng.random::<f64>() < rate {
                F::zero()
            } else {
                keep
            }
        })
        .collect()
}

const CONV3: usize = 3;

fn he_normal<F: Scalar>(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::lit(z * std)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct UNet<F> {
    config: NetworkConfig,
    params: Vec<Tensor<F>>,
    names: Vec<String>,
}

impl<F: Scalar> UNet<F> {
    /// He-initialized network; biases start at zero.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self {
            config: config.clone(),
            params: Vec::new(),
            names: Vec::new(),
        };
        let conv = |net: &mut Self, rng: &mut ChaCha8Rng, name: String, cout: usize, cin: usize, k: usize, bias: bool| {
            let data = he_normal(rng, cout * cin * k * k, cin * k * k);
            net.push(format!("{name}/weight"), Tensor::from_vec(&[cout, cin, k, k], data).unwrap());
            if bias {
                net.push(format!("{name}/bias"), Tensor::zeros(&[cout]));
            }
        };
        let d = config.depth;
        let mut cin = config.in_channels;
        for s in 0..d {
            let w = config.stage_width(s);
            conv(&mut net, &mut rng, format!("enc{s}/conv0"), w, cin, CONV3, false);
            conv(&mut net, &mut rng, format!("enc{s}/conv1"), w, w, CONV3, false);
            cin = w;
        }
        let wb = config.stage_width(d);
        conv(&mut net, &mut rng, "bottleneck/conv0".into(), wb, cin, CONV3, false);
        conv(&mut net, &mut rng, "bottleneck/conv1".into(), wb, wb, CONV3, false);
        for s in (0..d).rev() {
            let (wi, wo) = (config.stage_width(s + 1), config.stage_width(s));
            // transposed conv weight is [in, out, 2, 2]
            let data = he_normal(&mut rng, wi * wo * 4, wi);
            net.push(format!("dec{s}/up/weight"), Tensor::from_vec(&[wi, wo, 2, 2], data).unwrap());
            net.push(format!("dec{s}/up/bias"), Tensor::zeros(&[wo]));
            conv(&mut net, &mut rng, format!("dec{s}/conv0"), wo, 2 * wo, CONV3, false);
            conv(&mut net, &mut rng, format!("dec{s}/conv1"), wo, wo, CONV3, false);
        }
        conv(&mut net, &mut rng, "head".into(), config.num_classes, config.stage_width(0), 1, true);
        let dim = config.embed_dim;
        conv(&mut net, &mut rng, "proj0".into(), dim, config.projector_in_width(), 1, true);
        conv(&mut net, &mut rng, "proj1".into(), dim, dim, 1, true);
        conv(&mut net, &mut rng, "proj2".into(), dim, dim, 1, true);
        Ok(net)
    }

    fn push(&mut self, name: String, t: Tensor<F>) {
        self.names.push(name);
        self.params.push(t);
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamKey, &mut [F])) {
        for (i, p) in self.params.iter_mut().enumerate() {
            f(ParamKey::Net(i), p.data_mut());
        }
    }

    fn leaf(&self, g: &mut Graph<F>, name: &str) -> Var {
        let idx = self
            .param_index(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        g.param(self.params[idx].clone(), ParamKey::Net(idx))
    }

    fn conv(&self, g: &mut Graph<F>, x: Var, name: &str, kernel: usize, bias: bool) -> Var {
        let w = self.leaf(g, &format!("{name}/weight"));
        let b = bias.then(|| self.leaf(g, &format!("{name}/bias")));
        g.conv2d(x, w, b, kernel)
    }

    fn block(
        &self,
        g: &mut Graph<F>,
        x: Var,
        prefix: &str,
        first_site: usize,
        k: usize,
        norms: &mut Norms<'_, F>,
    ) -> Result<Var> {
        let mut h = x;
        for j in 0..2 {
            h = self.conv(g, h, &format!("{prefix}/conv{j}"), CONV3, false);
            h = norms.apply(g, h, first_site + j, k)?;
            h = g.relu(h);
        }
        Ok(h)
    }

    fn check_batch(&self, batch: &ModalityBatch, norms: &Norms<'_, F>) -> Result<()> {
        let k = batch.modality;
        if k >= self.config.num_modalities {
            return Err(Error::Config(format!(
                "modality {k} out of range (K = {})",
                self.config.num_modalities
            )));
        }
        if norms.bank().num_sites() != self.config.num_sites() {
            return Err(Error::Config("modulation bank does not match the network".into()));
        }
        let shape = batch.images.shape();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected images [B, {}, H, W], got {shape:?}",
                self.config.in_channels
            )));
        }
        let div = 1usize << self.config.depth;
        if shape[2] % div != 0 || shape[3] % div != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!(
                "spatial size {}x{} is not divisible by {div}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Plain forward pass.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        batch: &ModalityBatch,
        norms: Norms<'_, F>,
        prototypes: &PrototypeBank<F>,
    ) -> Result<SegOutput> {
        self.run(g, batch, norms, prototypes, None)
    }

    /// Forward pass with inverted dropout on every encoder stage output.
    pub fn perturbed_forward(
        &self,
        g: &mut Graph<F>,
        batch: &ModalityBatch,
        norms: Norms<'_, F>,
        prototypes: &PrototypeBank<F>,
        drop: FeatureDrop,
    ) -> Result<SegOutput> {
        if !(0.0..=1.0).contains(&drop.rate) {
            return Err(Error::Config(format!(
                "drop rate {} outside [0, 1]",
                drop.rate
            )));
        }
        self.run(g, batch, norms, prototypes, Some(drop))
    }

    fn run(
        &self,
        g: &mut Graph<F>,
        batch: &ModalityBatch,
        mut norms: Norms<'_, F>,
        prototypes: &PrototypeBank<F>,
        drop: Option<FeatureDrop>,
    ) -> Result<SegOutput> {
        self.check_batch(batch, &norms)?;
        let k = batch.modality;
        let d = self.config.depth;
        let mut rng = drop.map(|p| ChaCha8Rng::seed_from_u64(p.seed));
        let mut h = g.input(batch.images.cast());
        let mut skips = Vec::with_capacity(d);
        for s in 0..d {
            if s > 0 {
                h = g.max_pool2(h);
            }
            h = self.block(g, h, &format!("enc{s}"), 2 * s, k, &mut norms)?;
            if let (Some(p), Some(rng)) = (drop, rng.as_mut()) {
                let mask = dropout_mask(g.value(h).len(), p.rate, rng);
                h = g.mask(h, mask);
            }
            skips.push(h);
        }
        h = g.max_pool2(h);
        h = self.block(g, h, "bottleneck", 2 * d, k, &mut norms)?;
        let mut decoder_outputs = Vec::with_capacity(d);
        for (i, s) in (0..d).rev().enumerate() {
            let w = self.leaf(g, &format!("dec{s}/up/weight"));
            let b = self.leaf(g, &format!("dec{s}/up/bias"));
            let up = g.conv_transpose2x2(h, w, Some(b));
            let cat = g.concat(&[skips[s], up]);
            h = self.block(g, cat, &format!("dec{s}"), 2 * d + 2 + 2 * i, k, &mut norms)?;
            decoder_outputs.push(h);
        }
        let logits = self.conv(g, h, "head", 1, true);
        let embeddings = self.project(g, &decoder_outputs)?;
        SegOutput::assemble(g, logits, embeddings, prototypes, k)
    }

    /// Multi-scale projector: resize every decoder output to the finest
    /// resolution, concatenate, apply three 1x1 convolutions with ReLU in
    /// between, then L2-normalize each pixel.
    pub fn project(&self, g: &mut Graph<F>, decoder_features: &[Var]) -> Result<Var> {
        let Some(&finest) = decoder_features.last() else {
            return Err(Error::Shape("projector needs at least one decoder feature".into()));
        };
        let (_, _, h, w) = g.value(finest).dims4();
        let resized: Vec<Var> = decoder_features
            .iter()
            .map(|&f| {
                let (_, _, fh, fw) = g.value(f).dims4();
                if (fh, fw) == (h, w) {
                    f
                } else {
                    g.resize_bilinear(f, h, w)
                }
            })
            .collect();
        let cat = g.concat(&resized);
        let width = g.shape(cat)[1];
        if width != self.config.projector_in_width() {
            return Err(Error::Shape(format!(
                "projector expects {} input channels, got {width}",
                self.config.projector_in_width()
            )));
        }
        let mut z = self.conv(g, cat, "proj0", 1, true);
        z = g.relu(z);
        z = self.conv(g, z, "proj1", 1, true);
        z = g.relu(z);
        z = self.conv(g, z, "proj2", 1, true);
        Ok(g.l2_normalize(z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlmb::ModulationEntry;

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            num_classes: 3,
            num_modalities: 2,
            base_width: 2,
            depth: 2,
            embed_dim: 4,
            ..NetworkConfig::default()
        }
    }

    fn batch(h: usize, w: usize, k: usize) -> ModalityBatch {
        let data = (0..2 * h * w).map(|i| ((i * 37 % 101) as f32) / 100.0).collect();
        ModalityBatch::new(Tensor::from_vec(&[2, 1, h, w], data).unwrap(), None, k).unwrap()
    }

    #[test]
    fn default_widths_and_projector_width() {
        let cfg = NetworkConfig {
            num_classes: 5,
            ..NetworkConfig::default()
        };
        assert_eq!(
            (0..=4).map(|s| cfg.stage_width(s)).collect::<Vec<_>>(),
            vec![16, 32, 64, 128, 256]
        );
        assert_eq!(cfg.projector_in_width(), 16 + 32 + 64 + 128);
        assert_eq!(cfg.num_sites(), 18);
        assert_eq!(cfg.embed_dim, 64);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            NetworkConfig { num_classes: 1, ..small_config() },
            NetworkConfig { depth: 1, ..small_config() },
            NetworkConfig { num_modalities: 0, ..small_config() },
            NetworkConfig { embed_dim: 0, ..small_config() },
        ] {
            assert!(matches!(UNet::<f32>::new(cfg, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn errors_for_bad_modality_and_shape() {
        let cfg = small_config();
        let net = UNet::<f32>::new(cfg.clone(), 1).unwrap();
        let bank = cfg.new_modulation_bank().unwrap();
        let protos = PrototypeBank::random(2, 3, 4, 0).unwrap();
        let mut g = Graph::new();
        let err = net.forward(&mut g, &batch(8, 8, 2), Norms::Eval(&bank), &protos);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = net.forward(&mut g, &batch(6, 8, 0), Norms::Eval(&bank), &protos);
        assert!(matches!(err, Err(Error::Shape(_))));
        let err = net.perturbed_forward(
            &mut g,
            &batch(8, 8, 0),
            Norms::Eval(&bank),
            &protos,
            FeatureDrop { rate: 1.5, seed: 0 },
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn projector_rejects_empty_list() {
        let net = UNet::<f32>::new(small_config(), 1).unwrap();
        let mut g = Graph::new();
        assert!(matches!(net.project(&mut g, &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_mask_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mask: Vec<f64> = dropout_mask(10_000, 0.5, &mut rng);
        let dropped = mask.iter().filter(|&&m| m == 0.0).count() as f64 / 10_000.0;
        assert!((dropped - 0.5).abs() < 0.02, "drop fraction {dropped}");
        assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
        let all: Vec<f64> = dropout_mask(100, 1.0, &mut rng);
        assert!(all.iter().all(|&m| m == 0.0));
        let none: Vec<f64> = dropout_mask(100, 0.0, &mut rng);
        assert!(none.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn placement_controls_modality_specific_sites() {
        let mut cfg = small_config();
        cfg.mlmb_placement = MlmbPlacement::EncoderOnly;
        let sites = cfg.modality_specific_sites();
        assert_eq!(sites.iter().filter(|&&s| s).count(), 4);
        cfg.mlmb_placement = MlmbPlacement::EncoderBottleneck;
        assert_eq!(cfg.modality_specific_sites().iter().filter(|&&s| s).count(), 6);
        cfg.mlmb = false;
        assert!(cfg.modality_specific_sites().iter().all(|&s| !s));
        let bank: ModulationBank<f32> = cfg.new_modulation_bank().unwrap();
        assert_eq!(bank.entry_count(), cfg.num_sites());
    }

    // Naive reference layers on [B, C, H, W] tensors.
    type T = Tensor<f64>;

    fn conv3_ref(x: &T, w: &T) -> T {
        let (b, ci, h, wd) = x.dims4();
        let co = w.shape()[0];
        let mut out = T::zeros(&[b, co, h, wd]);
        for bi in 0..b {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += x.at4(bi, i, sy as usize, sx as usize) * w.at4(o, i, ky, kx);
                                }
                            }
                        }
                        out.data_mut()[((bi * co + o) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn conv1_ref(x: &T, w: &T, bias: &T) -> T {
        let (b, ci, h, wd) = x.dims4();
        let co = w.shape()[0];
        let mut out = T::zeros(&[b, co, h, wd]);
        for bi in 0..b {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = bias.data()[o];
                        for i in 0..ci {
                            acc += x.at4(bi, i, y, xx) * w.data()[o * ci + i];
                        }
                        out.data_mut()[((bi * co + o) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn up_ref(x: &T, w: &T, bias: &T) -> T {
        let (b, ci, h, wd) = x.dims4();
        let co = w.shape()[1];
        let mut out = T::zeros(&[b, co, 2 * h, 2 * wd]);
        for bi in 0..b {
            for o in 0..co {
                for y in 0..2 * h {
                    for xx in 0..2 * wd {
                        let mut acc = bias.data()[o];
                        for i in 0..ci {
                            acc += x.at4(bi, i, y / 2, xx / 2) * w.at4(i, o, y % 2, xx % 2);
                        }
                        out.data_mut()[((bi * co + o) * 2 * h + y) * 2 * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn norm_relu_ref(x: &T, e: &ModulationEntry<f64>, eps: f64) -> T {
        let (b, c, h, w) = x.dims4();
        let mut out = x.clone();
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..h * w {
                    let i = (bi * c + ci) * h * w + p;
                    let v = (x.data()[i] - e.mean[ci]) / (e.var[ci] + eps).sqrt() * e.gamma[ci] + e.beta[ci];
                    out.data_mut()[i] = v.max(0.0);
                }
            }
        }
        out
    }

    fn pool_ref(x: &T) -> T {
        let (b, c, h, w) = x.dims4();
        let mut out = T::zeros(&[b, c, h / 2, w / 2]);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                            .iter()
                            .map(|&(dy, dx)| x.at4(bi, ci, 2 * y + dy, 2 * xx + dx))
                            .fold(f64::NEG_INFINITY, f64::max);
                        out.data_mut()[((bi * c + ci) * (h / 2) + y) * (w / 2) + xx] = m;
                    }
                }
            }
        }
        out
    }

    fn cat_ref(a: &T, b: &T) -> T {
        let (n, ca, h, w) = a.dims4();
        let cb = b.shape()[1];
        let mut data = Vec::new();
        for bi in 0..n {
            data.extend_from_slice(a.batch_item(bi).data());
            data.extend_from_slice(b.batch_item(bi).data());
        }
        T::from_vec(&[n, ca + cb, h, w], data).unwrap()
    }

    fn resize_ref(x: &T, oh: usize, ow: usize) -> T {
        let (b, c, h, w) = x.dims4();
        let coord = |o: usize, n_in: usize, n_out: usize| {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
        };
        let mut out = T::zeros(&[b, c, oh, ow]);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..oh {
                    let (y0, y1, fy) = coord(y, h, oh);
                    for xx in 0..ow {
                        let (x0, x1, fx) = coord(xx, w, ow);
                        let top = x.at4(bi, ci, y0, x0) * (1.0 - fx) + x.at4(bi, ci, y0, x1) * fx;
                        let bot = x.at4(bi, ci, y1, x0) * (1.0 - fx) + x.at4(bi, ci, y1, x1) * fx;
                        out.data_mut()[((bi * c + ci) * oh + y) * ow + xx] = top * (1.0 - fy) + bot * fy;
                    }
                }
            }
        }
        out
    }

    fn l2_ref(x: &T) -> T {
        let (b, c, h, w) = x.dims4();
        let mut out = x.clone();
        for bi in 0..b {
            for p in 0..h * w {
                let n = (0..c).map(|ci| x.data()[(bi * c + ci) * h * w + p].powi(2)).sum::<f64>().sqrt();
                for ci in 0..c {
                    let v = &mut out.data_mut()[(bi * c + ci) * h * w + p];
                    *v = if n == 0.0 { 1.0 / (c as f64).sqrt() } else { *v / n };
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &T, b: &T) -> f64 {
        assert_eq!(a.shape(), b.shape());
        assert!(a.all_finite() && b.all_finite());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn toy_network_matches_direct_loops() {
        let cfg = NetworkConfig {
            num_classes: 2,
            num_modalities: 2,
            base_width: 2,
            depth: 2,
            embed_dim: 3,
            ..NetworkConfig::default()
        };
        let net = UNet::<f64>::new(cfg.clone(), 5).unwrap();
        let mut bank: ModulationBank<f64> = cfg.new_modulation_bank().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for site in 0..bank.num_sites() {
            for e in bank.site_entries_mut(site) {
                for c in 0..e.channels() {
                    e.gamma[c] = rng.random_range(0.5..1.5);
                    e.beta[c] = rng.random_range(-0.2..0.2);
                    e.mean[c] = rng.random_range(-0.3..0.3);
                    e.var[c] = rng.random_range(0.5..2.0);
                }
            }
        }
        let protos = PrototypeBank::<f64>::random(2, 2, 3, 1).unwrap();
        let k = 1;
        let input = batch(8, 8, k);
        let mut g = Graph::new();
        let out = net.forward(&mut g, &input, Norms::Eval(&bank), &protos).unwrap();

        let p = |name: &str| net.params()[net.param_index(name).unwrap()].clone();
        let eps = bank.eps();
        let block = |x: &T, prefix: &str, site: usize| {
            let mut h = x.clone();
            for j in 0..2 {
                h = conv3_ref(&h, &p(&format!("{prefix}/conv{j}/weight")));
                h = norm_relu_ref(&h, bank.entry(site + j, k).unwrap(), eps);
            }
            h
        };
        let x: T = input.images.cast();
        let e0 = block(&x, "enc0", 0);
        let e1 = block(&pool_ref(&e0), "enc1", 2);
        let bn = block(&pool_ref(&e1), "bottleneck", 4);
        let u1 = up_ref(&bn, &p("dec1/up/weight"), &p("dec1/up/bias"));
        let d1 = block(&cat_ref(&e1, &u1), "dec1", 6);
        let u0 = up_ref(&d1, &p("dec0/up/weight"), &p("dec0/up/bias"));
        let d0 = block(&cat_ref(&e0, &u0), "dec0", 8);
        let logits = conv1_ref(&d0, &p("head/weight"), &p("head/bias"));
        assert!(max_abs_diff(g.value(out.logits), &logits) < 1e-10);

        let mut z = cat_ref(&resize_ref(&d1, 8, 8), &d0);
        for (i, name) in ["proj0", "proj1", "proj2"].iter().enumerate() {
            z = conv1_ref(&z, &p(&format!("{name}/weight")), &p(&format!("{name}/bias")));
            if i < 2 {
                z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        let emb = l2_ref(&z);
        assert!(max_abs_diff(g.value(out.embeddings), &emb) < 1e-10);

        let pk = protos.prototypes(k).unwrap();
        let sim = g.value(out.proto_sim);
        for bi in 0..2 {
            for c in 0..2 {
                for y in 0..8 {
                    for xx in 0..8 {
                        let want: f64 = (0..3).map(|d| pk[c * 3 + d] * emb.at4(bi, d, y, xx)).sum();
                        assert!((sim.at4(bi, c, y, xx) - want).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn output_shapes_and_unit_embeddings() {
        let cfg = small_config();
        let net = UNet::<f32>::new(cfg.clone(), 3).unwrap();
        let bank = cfg.new_modulation_bank().unwrap();
        let protos = PrototypeBank::random(2, 3, 4, 0).unwrap();
        let mut g = Graph::new();
        let out = net.forward(&mut g, &batch(8, 12, 0), Norms::Eval(&bank), &protos).unwrap();
        assert_eq!(g.shape(out.logits), &[2, 3, 8, 12]);
        assert_eq!(g.shape(out.embeddings), &[2, 4, 8, 12]);
        assert_eq!(g.shape(out.proto_sim), &[2, 3, 8, 12]);
        let e = g.value(out.embeddings);
        for bi in 0..2 {
            for y in 0..8 {
                for x in 0..12 {
                    let n: f32 = (0..4).map(|d| e.at4(bi, d, y, x).powi(2)).sum();
                    assert!((n.sqrt() - 1.0).abs() < 1e-5, "norm {n} at {bi},{y},{x}");
                }
            }
        }
        assert!(g.value(out.proto_sim).data().iter().all(|v| v.abs() <= 1.0 + 1e-5));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = NetworkConfig { num_modalities: 1, ..small_config() };
        let net = UNet::<f32>::new(cfg.clone(), 3).unwrap();
        let bank = cfg.new_modulation_bank().unwrap();
        let protos = PrototypeBank::random(1, 3, 4, 0).unwrap();
        let run = || {
            let mut g = Graph::new();
            let out = net.forward(&mut g, &batch(8, 8, 0), Norms::Eval(&bank), &protos).unwrap();
            g.value(out.logits).clone()
        };
        assert_eq!(run(), run());
        assert_eq!(UNet::<f32>::new(cfg.clone(), 3).unwrap().params(), net.params());
    }

    #[test]
    fn zero_drop_matches_plain_forward_and_seeds_repeat() {
        let cfg = small_config();
        let net = UNet::<f64>::new(cfg.clone(), 3).unwrap();
        let bank = cfg.new_modulation_bank().unwrap();
        let protos = PrototypeBank::random(2, 3, 4, 0).unwrap();
        let input = batch(8, 8, 1);
        let logits = |drop: Option<FeatureDrop>| {
            let mut g = Graph::new();
            let out = match drop {
                None => net.forward(&mut g, &input, Norms::Eval(&bank), &protos),
                Some(d) => net.perturbed_forward(&mut g, &input, Norms::Eval(&bank), &protos, d),
            }
            .unwrap();
            g.value(out.logits).clone()
        };
        let plain = logits(None);
        assert_eq!(logits(Some(FeatureDrop { rate: 0.0, seed: 11 })), plain);
        let a = logits(Some(FeatureDrop { rate: 0.5, seed: 11 }));
        assert_eq!(a, logits(Some(FeatureDrop { rate: 0.5, seed: 11 })));
        assert_ne!(a, plain);
        assert_ne!(a, logits(Some(FeatureDrop { rate: 0.5, seed: 12 })));
    }

    #[test]
    fn training_pass_touches_only_its_modality() {
        let cfg = small_config();
        let net = UNet::<f32>::new(cfg.clone(), 3).unwrap();
        let mut bank: ModulationBank<f32> = cfg.new_modulation_bank().unwrap();
        let before = bank.clone();
        let protos = PrototypeBank::random(2, 3, 4, 0).unwrap();
        let mut g = Graph::new();
        net.forward(&mut g, &batch(8, 8, 1), Norms::Train(&mut bank), &protos).unwrap();
        for site in 0..cfg.num_sites() {
            assert_eq!(bank.entry(site, 0).unwrap(), before.entry(site, 0).unwrap());
            assert_ne!(bank.entry(site, 1).unwrap().mean, before.entry(site, 1).unwrap().mean);
        }
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let cfg = small_config();
        let net = UNet::<f64>::new(cfg.clone(), 3).unwrap();
        let mut bank: ModulationBank<f64> = cfg.new_modulation_bank().unwrap();
        let protos = PrototypeBank::random(2, 3, 4, 0).unwrap();
        let mut g = Graph::new();
        let out = net.forward(&mut g, &batch(8, 8, 0), Norms::Train(&mut bank), &protos).unwrap();
        let a = g.mean(out.logits);
        let b = g.mean(out.proto_sim);
        let sq = g.square(out.logits);
        let c = g.mean(sq);
        let root = g.weighted_sum(&[(a, 1.0), (b, 1.0), (c, 1.0)]);
        let grads = g.backward(root);
        for i in 0..net.params().len() {
            let gr = grads.params().get(&ParamKey::Net(i)).expect("missing gradient");
            assert!(gr.data().iter().any(|v| *v != 0.0), "{} has zero gradient", net.param_names()[i]);
        }
        let (mut gammas, mut others) = (0, 0);
        for key in grads.params().keys() {
            match key {
                ParamKey::Gamma(site, e) | ParamKey::Beta(site, e) => {
                    assert_eq!(*e, bank.entry_index(*site, 0).unwrap());
                    gammas += 1;
                }
                ParamKey::Net(_) => others += 1,
            }
        }
        assert_eq!(gammas, 2 * cfg.num_sites());
        assert_eq!(others, net.params().len());
    }
}
