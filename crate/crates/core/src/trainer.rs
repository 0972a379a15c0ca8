//! Training loop: per-modality supervised and dual-consistency steps,
//! bank updates, adaptive weighting, scheduling and checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureDrop, ModalityBatch, NetworkConfig, Norms, UNet};
use crate::checkpoint::Checkpoint;
use crate::data::{epoch_steps, perturb_image, BatchStream, Dataset, LabelFilter, Split};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_samples, EvalConfig, EvalResult};
use crate::graph::{merge_param_grads, Graph, ParamKey};
use crate::losses::{dual_consistency_loss, modal_loss, supervision_loss, value, LossConfig, LossReport};
use crate::maw::{MawConfig, MawRow, MawState};
use crate::mlmb::ModulationBank;
use crate::mlpb::PrototypeBank;
use crate::optim::Adam;
use crate::tensor::Tensor;

/// How labeled batches group pixels when updating prototypes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtoUpdate {
    /// Ground-truth classes.
    GroundTruth,
    /// Per-image Sinkhorn hard assignments.
    Sinkhorn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub poly_power: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// Square training crop; 0 trains on full images.
    pub crop_size: usize,
    pub seed: u64,
    pub eval_interval: usize,
    /// Extra checkpoint every this many epochs; 0 keeps only best and last.
    pub checkpoint_interval: usize,
    pub drop_rate: f64,
    pub noise_sigma: f64,
    pub noise_clip: f64,
    pub proto_update: ProtoUpdate,
    pub stats_momentum: f64,
    pub proto_momentum: f64,
    pub sinkhorn_smoothness: f64,
    pub sinkhorn_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-4,
            poly_power: 0.9,
            batch_labeled: 4,
            batch_unlabeled: 4,
            crop_size: 128,
            seed: 0,
            eval_interval: 1,
            checkpoint_interval: 0,
            drop_rate: 0.5,
            noise_sigma: 0.1,
            noise_clip: 0.2,
            proto_update: ProtoUpdate::GroundTruth,
            stats_momentum: 0.99,
            proto_momentum: 0.99,
            sinkhorn_smoothness: 0.05,
            sinkhorn_iters: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("train.epochs must be >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("train.lr must be > 0");
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("train batch sizes must be >= 1");
        }
        if self.eval_interval == 0 {
            return bad("train.eval_interval must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return bad("train.drop_rate must be in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_clip >= 0.0) {
            return bad("train.noise_sigma and train.noise_clip must be >= 0");
        }
        for (name, m) in [("stats_momentum", self.stats_momentum), ("proto_momentum", self.proto_momentum)] {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!("train.{name} must be in [0, 1)")));
            }
        }
        if !(self.sinkhorn_smoothness > 0.0) {
            return bad("train.sinkhorn_smoothness must be > 0");
        }
        Ok(())
    }
}

/// Everything the trainer is configured with.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub maw: MawConfig,
    pub eval: EvalConfig,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.maw.validate()?;
        self.eval.validate()
    }
}

/// `lambda_max * exp(-5 (1 - t / t_max)^2)`, clamped to `lambda_max` past `t_max`.
pub fn ramp_up(t: f64, t_max: f64, lambda_max: f64) -> f64 {
    if t_max <= 0.0 || t >= t_max {
        return lambda_max;
    }
    let phase = 1.0 - t.max(0.0) / t_max;
    lambda_max * (-5.0 * phase * phase).exp()
}

/// `lr0 * (1 - t / t_max)^power`, zero at or past `t_max`.
pub fn poly_lr(lr0: f64, t: f64, t_max: f64, power: f64) -> f64 {
    if t >= t_max {
        return 0.0;
    }
    lr0 * (1.0 - t.max(0.0) / t_max).powf(power)
}

/// SplitMix64 over the parts; independent seeds for independent purposes.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

const PURPOSE_NET: u64 = 1;
const PURPOSE_PROTOS: u64 = 2;
const PURPOSE_LABELED: u64 = 3;
const PURPOSE_UNLABELED: u64 = 4;
const PURPOSE_NOISE: u64 = 5;
const PURPOSE_DROP: u64 = 6;

/// Step-dependent scalars shared by all modalities of one round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepContext {
    pub step: usize,
    pub lambda: f64,
}

/// Result of one modality's forward/backward, before the optimizer step.
#[derive(Clone, Debug)]
pub struct ModalityStep {
    pub modality: usize,
    pub report: LossReport,
    pub grads: BTreeMap<ParamKey, Tensor<f32>>,
    /// Labeled embeddings and labels for the prototype update.
    pub embeddings: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Per-epoch record of a fit.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub weights: Vec<f64>,
    pub val_dsc: Vec<f64>,
    pub val_hd95: Vec<f64>,
}

impl EpochRecord {
    pub fn mean_dsc(&self) -> f64 {
        self.val_dsc.iter().sum::<f64>() / self.val_dsc.len() as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitSummary {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dsc: f64,
}

pub struct Trainer {
    cfg: TrainerConfig,
    net: UNet<f32>,
    mlmb: ModulationBank<f32>,
    mlpb: PrototypeBank<f32>,
    adam: Adam<f32>,
    maw: MawState,
    labeled: Vec<BatchStream>,
    unlabeled: Vec<Option<BatchStream>>,
    val: Vec<ModalityBatch>,
    step: usize,
    epoch: usize,
}

impl Trainer {
    /// Builds a trainer whose network layout follows the dataset.
    pub fn new(mut cfg: TrainerConfig, dataset: &Dataset) -> Result<Self> {
        let m = &dataset.manifest;
        cfg.network.num_modalities = m.num_modalities;
        cfg.network.num_classes = m.num_classes;
        cfg.validate()?;
        let seed = cfg.train.seed;
        let crop = (cfg.train.crop_size > 0).then_some(cfg.train.crop_size);
        if let Some(c) = crop {
            if c > m.height || c > m.width {
                return Err(Error::Config(format!(
                    "train.crop_size {c} exceeds image size {}x{}",
                    m.height, m.width
                )));
            }
        }
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        let mut val = Vec::new();
        for k in 0..m.num_modalities {
            let pool = dataset.samples(k, Split::Train, LabelFilter::Labeled);
            if pool.is_empty() {
                return Err(Error::Config(format!("modality {k} has no labeled training samples")));
            }
            labeled.push(BatchStream::new(
                pool,
                k,
                cfg.train.batch_labeled,
                crop,
                derive_seed(seed, &[PURPOSE_LABELED, k as u64]),
            )?);
            let pool = dataset.samples(k, Split::Train, LabelFilter::Unlabeled);
            unlabeled.push(if pool.is_empty() {
                None
            } else {
                Some(BatchStream::new(
                    pool,
                    k,
                    cfg.train.batch_unlabeled,
                    crop,
                    derive_seed(seed, &[PURPOSE_UNLABELED, k as u64]),
                )?)
            });
            val.extend(dataset.batches(k, Split::Val, LabelFilter::Labeled)?);
        }
        let net = UNet::new(cfg.network.clone(), derive_seed(seed, &[PURPOSE_NET]))?;
        let mlmb = cfg
            .network
            .new_modulation_bank()?
            .with_momentum(cfg.train.stats_momentum as f32)?;
        let mlpb = PrototypeBank::random(
            m.num_modalities,
            m.num_classes,
            cfg.network.embed_dim,
            derive_seed(seed, &[PURPOSE_PROTOS]),
        )?
        .with_momentum(cfg.train.proto_momentum as f32)?
        .with_sinkhorn(cfg.train.sinkhorn_smoothness, cfg.train.sinkhorn_iters)?;
        let maw = MawState::new(m.num_modalities, cfg.maw.clone())?;
        Ok(Self {
            cfg,
            net,
            mlmb,
            mlpb,
            adam: Adam::default(),
            maw,
            labeled,
            unlabeled,
            val,
            step: 0,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn net(&self) -> &UNet<f32> {
        &self.net
    }

    pub fn mlmb(&self) -> &ModulationBank<f32> {
        &self.mlmb
    }

    pub fn mlmb_mut(&mut self) -> &mut ModulationBank<f32> {
        &mut self.mlmb
    }

    pub fn mlpb(&self) -> &PrototypeBank<f32> {
        &self.mlpb
    }

    pub fn mlpb_mut(&mut self) -> &mut PrototypeBank<f32> {
        &mut self.mlpb
    }

    pub fn maw(&self) -> &MawState {
        &self.maw
    }

    pub fn num_modalities(&self) -> usize {
        self.labeled.len()
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    /// Step-rounds per epoch: enough for the longest stream to be seen once.
    pub fn steps_per_epoch(&self) -> usize {
        let mut streams: Vec<&BatchStream> = self.labeled.iter().collect();
        streams.extend(self.unlabeled.iter().flatten());
        epoch_steps(&streams)
    }

    fn consistency_active(&self) -> bool {
        self.cfg.loss.lambda_max != 0.0 && self.cfg.loss.consistency_enabled()
    }

    /// Draws the next labeled and (when the unlabeled branch is active)
    /// unlabeled batch of modality `k`.
    pub fn next_batches(&mut self, k: usize) -> Result<(ModalityBatch, Option<ModalityBatch>)> {
        let lb = self.labeled[k].next_batch()?;
        let active = self.consistency_active();
        let ub = match (&mut self.unlabeled[k], active) {
            (Some(s), true) => Some(s.next_batch()?),
            _ => None,
        };
        Ok((lb, ub))
    }

    /// Forward and backward for one modality. Running statistics are
    /// recorded by the labeled pass and the clean unlabeled pass; perturbed
    /// passes normalize with batch statistics only.
    pub fn modality_step(
        &mut self,
        labeled: &ModalityBatch,
        unlabeled: Option<&ModalityBatch>,
        ctx: StepContext,
    ) -> Result<ModalityStep> {
        let k = labeled.modality;
        if let Some(u) = unlabeled {
            if u.modality != k {
                return Err(Error::Contract(format!(
                    "labeled batch is modality {k}, unlabeled batch is modality {}",
                    u.modality
                )));
            }
        }
        let weight = self.maw.weights()[k];
        let loss = self.cfg.loss.clone();
        let mut g = Graph::<f32>::new();
        let out = self.net.forward(&mut g, labeled, Norms::Train(&mut self.mlmb), &self.mlpb)?;
        let sup = supervision_loss(&mut g, labeled, &out, &self.mlpb, &loss)?;
        let mut report = LossReport::new(k);
        sup.report(&g, &mut report);

        let mut dc_var = None;
        if let Some(ub) = unlabeled {
            let clean = {
                let mut cg = Graph::<f32>::new();
                let o = self.net.forward(&mut cg, ub, Norms::Train(&mut self.mlmb), &self.mlpb)?;
                cg.value(o.logits).clone()
            };
            let img_out = if loss.l_ipc {
                let noisy = ModalityBatch {
                    images: perturb_image(
                        &ub.images,
                        self.cfg.train.noise_sigma,
                        self.cfg.train.noise_clip,
                        derive_seed(self.cfg.train.seed, &[PURPOSE_NOISE, ctx.step as u64, k as u64]),
                    ),
                    ..ub.clone()
                };
                Some(self.net.forward(&mut g, &noisy, Norms::Batch(&self.mlmb), &self.mlpb)?)
            } else {
                None
            };
            let feat_out = if loss.l_fpc {
                let drop = FeatureDrop {
                    rate: self.cfg.train.drop_rate,
                    seed: derive_seed(self.cfg.train.seed, &[PURPOSE_DROP, ctx.step as u64, k as u64]),
                };
                Some(self.net.perturbed_forward(&mut g, ub, Norms::Batch(&self.mlmb), &self.mlpb, drop)?)
            } else {
                None
            };
            let dc = dual_consistency_loss(&mut g, ub, &clean, img_out.as_ref(), feat_out.as_ref(), &self.mlpb, &loss)?;
            dc.report(&g, &mut report);
            dc_var = Some(dc.total);
        }
        let modal = modal_loss(&mut g, sup.total, dc_var, weight as f32, ctx.lambda as f32);
        report.push("lambda", ctx.lambda);
        report.push("weight", weight);
        report.push("modal", value(&g, modal));
        if !report.all_finite() {
            return Err(Error::Numeric(format!("non-finite loss for modality {k} at step {}", ctx.step)));
        }
        let grads = g.backward(modal).into_params();
        Ok(ModalityStep {
            modality: k,
            report,
            grads,
            embeddings: g.value(out.embeddings).clone(),
            labels: labeled.labels.clone().expect("supervision checked labels"),
        })
    }

    /// Sums the gradients of all steps into one optimizer update, then
    /// refreshes each visited modality's prototypes.
    pub fn apply(&mut self, steps: &[ModalityStep], lr: f64) -> Result<()> {
        let mut total = BTreeMap::new();
        for s in steps {
            merge_param_grads(&mut total, s.grads.clone());
        }
        self.adam.step(lr, &total, &mut [&mut self.net, &mut self.mlmb])?;
        for s in steps {
            let labels = match self.cfg.train.proto_update {
                ProtoUpdate::GroundTruth => s.labels.clone(),
                ProtoUpdate::Sinkhorn => self.sinkhorn_labels(&s.embeddings, s.modality)?,
            };
            self.mlpb.update(s.modality, &s.embeddings, &labels)?;
        }
        Ok(())
    }

    fn sinkhorn_labels(&self, emb: &Tensor<f32>, k: usize) -> Result<Vec<usize>> {
        let (b, d, h, w) = emb.dims4();
        let n = h * w;
        let mut labels = Vec::with_capacity(b * n);
        for bi in 0..b {
            let a = self.mlpb.assign(&emb.data()[bi * d * n..(bi + 1) * d * n], k)?;
            labels.extend(a.hard_labels);
        }
        Ok(labels)
    }

    fn learning_rate(&self) -> f64 {
        let per_epoch = self.steps_per_epoch().max(1) as f64;
        let t = self.step as f64 / per_epoch;
        poly_lr(self.cfg.train.lr, t, self.cfg.train.epochs as f64, self.cfg.train.poly_power)
    }

    /// One step for a single modality pair of batches, including the
    /// optimizer update.
    pub fn train_step(&mut self, labeled: &ModalityBatch, unlabeled: Option<&ModalityBatch>) -> Result<LossReport> {
        let ctx = self.context();
        let s = self.modality_step(labeled, unlabeled, ctx)?;
        let lr = self.learning_rate().max(f64::MIN_POSITIVE);
        self.apply(std::slice::from_ref(&s), lr)?;
        self.step += 1;
        Ok(s.report)
    }

    fn context(&self) -> StepContext {
        StepContext {
            step: self.step,
            lambda: ramp_up(self.epoch as f64, self.cfg.train.epochs as f64, self.cfg.loss.lambda_max),
        }
    }

    /// Visits every modality once in order and takes one optimizer step.
    pub fn step_round(&mut self) -> Result<Vec<LossReport>> {
        let ctx = self.context();
        let mut steps = Vec::with_capacity(self.num_modalities());
        for k in 0..self.num_modalities() {
            let (lb, ub) = self.next_batches(k)?;
            steps.push(self.modality_step(&lb, ub.as_ref(), ctx)?);
        }
        let lr = self.learning_rate().max(f64::MIN_POSITIVE);
        self.apply(&steps, lr)?;
        self.step += 1;
        Ok(steps.into_iter().map(|s| s.report).collect())
    }

    pub fn evaluate(&self, samples: &[ModalityBatch]) -> Result<EvalResult> {
        evaluate_samples(&self.net, &self.mlmb, &self.mlpb, samples, &self.cfg.eval)
    }

    pub fn evaluate_val(&self) -> Result<EvalResult> {
        self.evaluate(&self.val)
    }

    pub fn checkpoint(&self, val_dsc: Option<f64>) -> Checkpoint {
        Checkpoint {
            net: self.net.clone(),
            mlmb: self.mlmb.clone(),
            mlpb: self.mlpb.clone(),
            epoch: self.epoch,
            val_dsc,
            seed: self.cfg.train.seed,
        }
    }

    /// Runs all configured epochs. With `out`, writes `metrics.csv`,
    /// `losses.csv`, `maw.csv`, `config.json` and checkpoints under it.
    pub fn fit(&mut self, out: Option<&Path>) -> Result<FitSummary> {
        let mut logs = match out {
            Some(dir) => Some(RunLogs::create(dir, &self.cfg)?),
            None => None,
        };
        let mut summary = FitSummary {
            best_dsc: f64::NEG_INFINITY,
            ..FitSummary::default()
        };
        let steps = self.steps_per_epoch();
        while self.epoch < self.cfg.train.epochs {
            let lambda = self.context().lambda;
            let weights = self.maw.weights().to_vec();
            for _ in 0..steps {
                let step = self.step;
                let reports = self.step_round()?;
                if let Some(l) = logs.as_mut() {
                    l.losses(step, &reports)?;
                }
            }
            let epoch = self.epoch + 1;
            self.epoch = epoch;
            if epoch % self.cfg.train.eval_interval != 0 && epoch != self.cfg.train.epochs {
                continue;
            }
            let eval = self.evaluate_val()?;
            let record = EpochRecord {
                epoch,
                lambda,
                weights,
                val_dsc: eval.modalities.iter().map(|m| m.mean_dsc()).collect(),
                val_hd95: eval.modalities.iter().map(|m| m.mean_hd95()).collect(),
            };
            self.maw.record_epoch(&record.val_dsc)?;
            let mean = record.mean_dsc();
            if let Some(l) = logs.as_mut() {
                l.metrics(&record)?;
                l.maw(&self.maw.rows(epoch))?;
                if mean > summary.best_dsc {
                    self.checkpoint(Some(mean)).save(&l.dir.join("checkpoints/best"))?;
                }
                if self.cfg.train.checkpoint_interval > 0 && epoch % self.cfg.train.checkpoint_interval == 0 {
                    self.checkpoint(Some(mean)).save(&l.dir.join(format!("checkpoints/epoch{epoch}")))?;
                }
            }
            if mean > summary.best_dsc {
                summary.best_dsc = mean;
                summary.best_epoch = Some(epoch);
            }
            summary.epochs.push(record);
        }
        if let Some(l) = logs.as_mut() {
            let last = summary.epochs.last().map(|r| r.mean_dsc());
            self.checkpoint(last).save(&l.dir.join("checkpoints/last"))?;
            l.flush()?;
        }
        Ok(summary)
    }
}

struct RunLogs {
    dir: std::path::PathBuf,
    metrics: BufWriter<File>,
    losses: BufWriter<File>,
    maw: BufWriter<File>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

impl RunLogs {
    fn create(dir: &Path, cfg: &TrainerConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let echo = dir.join("config.json");
        fs::write(&echo, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&echo, e))?;
        let mut logs = Self {
            dir: dir.to_path_buf(),
            metrics: create(&dir.join("metrics.csv"))?,
            losses: create(&dir.join("losses.csv"))?,
            maw: create(&dir.join("maw.csv"))?,
        };
        logs.write_line(|l| &mut l.metrics, "epoch,modality,dsc,hd95,lambda,weight", "metrics.csv")?;
        logs.write_line(|l| &mut l.losses, "step,modality,term,value", "losses.csv")?;
        logs.write_line(|l| &mut l.maw, MawRow::CSV_HEADER, "maw.csv")?;
        Ok(logs)
    }

    fn write_line(&mut self, pick: fn(&mut Self) -> &mut BufWriter<File>, line: &str, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        writeln!(pick(self), "{line}").map_err(|e| Error::io(path, e))
    }

    fn losses(&mut self, step: usize, reports: &[LossReport]) -> Result<()> {
        for r in reports {
            for row in r.csv_rows(step) {
                self.write_line(|l| &mut l.losses, &row, "losses.csv")?;
            }
        }
        Ok(())
    }

    fn metrics(&mut self, r: &EpochRecord) -> Result<()> {
        for k in 0..r.val_dsc.len() {
            let line = format!("{},{k},{},{},{},{}", r.epoch, r.val_dsc[k], r.val_hd95[k], r.lambda, r.weights[k]);
            self.write_line(|l| &mut l.metrics, &line, "metrics.csv")?;
        }
        Ok(())
    }

    fn maw(&mut self, rows: &[MawRow]) -> Result<()> {
        for row in rows {
            self.write_line(|l| &mut l.maw, &row.to_csv(), "maw.csv")?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        for (w, name) in [
            (&mut self.metrics, "metrics.csv"),
            (&mut self.losses, "losses.csv"),
            (&mut self.maw, "maw.csv"),
        ] {
            w.flush().map_err(|e| Error::io(self.dir.join(name), e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_values() {
        assert!((ramp_up(0.0, 100.0, 1.0) - (-5.0f64).exp()).abs() < 1e-15);
        assert_eq!(ramp_up(100.0, 100.0, 1.0), 1.0);
        assert!((ramp_up(50.0, 100.0, 1.0) - (-1.25f64).exp()).abs() < 1e-15);
        assert_eq!(ramp_up(150.0, 100.0, 0.7), 0.7);
        let mut prev = 0.0;
        for i in 0..=1000 {
            let v = ramp_up(i as f64 / 10.0, 100.0, 1.0);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(1e-4, 0.0, 100.0, 0.9), 1e-4);
        assert!((poly_lr(1e-4, 50.0, 100.0, 0.9) - 1e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
        assert_eq!(poly_lr(1e-4, 100.0, 100.0, 0.9), 0.0);
    }

    #[test]
    fn seeds_differ_by_purpose() {
        let a = derive_seed(1, &[PURPOSE_NOISE, 3, 0]);
        assert_eq!(a, derive_seed(1, &[PURPOSE_NOISE, 3, 0]));
        assert_ne!(a, derive_seed(1, &[PURPOSE_DROP, 3, 0]));
        assert_ne!(a, derive_seed(1, &[PURPOSE_NOISE, 3, 1]));
        assert_ne!(a, derive_seed(2, &[PURPOSE_NOISE, 3, 0]));
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::default().validate().is_ok());
        let mut c = TrainerConfig::default();
        c.train.epochs = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainerConfig::default();
        c.train.lr = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
