//! Loss terms: modality prototype contrastive learning, supervision,
//! dual (image / feature) consistency, and the weighted per-modality total.

use serde::{Deserialize, Serialize};

use crate::backbone::{ModalityBatch, SegOutput};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mlpb::PrototypeBank;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of every prototype contrastive term.
    pub delta: f64,
    /// Temperature applied to prototype similarities.
    pub temperature: f64,
    /// Peak weight of the unlabeled branch.
    pub lambda_max: f64,
    /// Prototype contrastive learning as a whole (the prototype bank's loss).
    pub mpcl: bool,
    pub l_ipc: bool,
    pub l_fpc: bool,
    pub l_mc: bool,
    pub l_pc: bool,
    pub l_pd: bool,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            temperature: 0.1,
            lambda_max: 1.0,
            mpcl: true,
            l_ipc: true,
            l_fpc: true,
            l_mc: true,
            l_pc: true,
            l_pd: true,
            dice_smooth: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("loss.temperature must be > 0".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::Config("loss.delta must be >= 0".into()));
        }
        if !(self.dice_smooth >= 0.0) {
            return Err(Error::Config("loss.dice_smooth must be >= 0".into()));
        }
        Ok(())
    }

    pub fn consistency_enabled(&self) -> bool {
        self.l_ipc || self.l_fpc
    }
}

/// Named scalar loss values for one modality and step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub modality: usize,
    pub terms: Vec<(String, f64)>,
}

impl LossReport {
    pub fn new(modality: usize) -> Self {
        Self {
            modality,
            terms: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.terms.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn all_finite(&self) -> bool {
        self.terms.iter().all(|(_, v)| v.is_finite())
    }

    /// Long-format CSV rows `step,modality,term,value`.
    pub fn csv_rows(&self, step: usize) -> Vec<String> {
        self.terms
            .iter()
            .map(|(n, v)| format!("{step},{},{n},{v}", self.modality))
            .collect()
    }
}

/// Graph handles of the four prototype contrastive terms.
#[derive(Clone, Copy, Debug)]
pub struct MpclTerms {
    pub pseg: Var,
    pub mc: Var,
    pub pc: Var,
    pub pd: Var,
    /// `(pseg + mc + pc + pd) / 4`
    pub total: Var,
}

impl MpclTerms {
    fn report<F: Scalar>(&self, g: &Graph<F>, prefix: &str, report: &mut LossReport) {
        for (name, v) in [("pseg", self.pseg), ("mc", self.mc), ("pc", self.pc), ("pd", self.pd)] {
            report.push(format!("{prefix}/{name}"), value(g, v));
        }
    }
}

pub(crate) fn value<F: Scalar>(g: &Graph<F>, v: Var) -> f64 {
    g.value(v).item().to_f64().unwrap_or(f64::NAN)
}

fn check_target(target: &[usize], classes: usize, pixels: usize) -> Result<()> {
    if target.len() != pixels {
        return Err(Error::Shape(format!(
            "target has {} entries for {pixels} pixels",
            target.len()
        )));
    }
    if let Some(t) = target.iter().find(|&&t| t >= classes) {
        return Err(Error::Input(format!("target class {t} out of range (C = {classes})")));
    }
    Ok(())
}

/// Prototype contrastive loss of one output against per-pixel `target` classes.
///
/// * segmentation: half Dice plus half cross-entropy on `softmax(s / T)`;
/// * modality contrast: minus the mean cosine to the target prototype, plus
///   the mean over other modalities of the best-matching prototype cosine;
/// * prototype contrast: cross-entropy of `s / T` against the target class;
/// * prototype distance: mean of `(1 - cos to target prototype)^2`.
pub fn mpcl_loss<F: Scalar>(
    g: &mut Graph<F>,
    out: &SegOutput,
    target: &[usize],
    bank: &PrototypeBank<F>,
    cfg: &LossConfig,
) -> Result<MpclTerms> {
    let k = out.modality;
    let (b, c, h, w) = g.value(out.proto_sim).dims4();
    if c != bank.num_classes() {
        return Err(Error::Shape(format!(
            "similarity map has {c} classes, bank has {}",
            bank.num_classes()
        )));
    }
    check_target(target, c, b * h * w)?;
    bank.prototypes(k)?;
    let inv_t = F::lit(1.0 / cfg.temperature);
    let scaled = g.scale(out.proto_sim, inv_t);
    let ce = g.cross_entropy(scaled, target);
    let dice = g.dice_loss(scaled, target, F::lit(cfg.dice_smooth));
    let half = F::lit(0.5);
    let pseg = g.weighted_sum(&[(dice, half), (ce, half)]);

    let pc = if cfg.l_pc { ce } else { g.constant_scalar(F::zero()) };

    let positive = g.pick(out.proto_sim, target);
    let pd = if cfg.l_pd {
        let gap = g.affine(positive, -F::one(), F::one());
        let sq = g.square(gap);
        g.mean(sq)
    } else {
        g.constant_scalar(F::zero())
    };

    let mc = if cfg.l_mc {
        let pos_mean = g.mean(positive);
        let others: Vec<usize> = (0..bank.num_modalities()).filter(|&j| j != k).collect();
        let mut terms = vec![(pos_mean, -F::one())];
        if !others.is_empty() {
            let share = F::one() / F::from_usize(others.len()).unwrap();
            for j in others {
                let sim = g.mix_channels(out.embeddings, bank.prototypes(j)?, bank.num_classes());
                let best = g.max_channel(sim);
                let m = g.mean(best);
                terms.push((m, share));
            }
        }
        g.weighted_sum(&terms)
    } else {
        g.constant_scalar(F::zero())
    };

    let quarter = F::lit(0.25);
    let total = g.weighted_sum(&[(pseg, quarter), (mc, quarter), (pc, quarter), (pd, quarter)]);
    Ok(MpclTerms {
        pseg,
        mc,
        pc,
        pd,
        total,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct SupervisionTerms {
    pub ce: Var,
    pub dice: Var,
    pub mpcl: Option<MpclTerms>,
    /// `ce + dice + delta * mpcl`
    pub total: Var,
}

impl SupervisionTerms {
    pub fn report<F: Scalar>(&self, g: &Graph<F>, report: &mut LossReport) {
        report.push("sup/ce", value(g, self.ce));
        report.push("sup/dice", value(g, self.dice));
        if let Some(m) = &self.mpcl {
            m.report(g, "sup", report);
            report.push("sup/mpcl", value(g, m.total));
        }
        report.push("sup", value(g, self.total));
    }
}

/// Supervised loss on a labeled batch.
pub fn supervision_loss<F: Scalar>(
    g: &mut Graph<F>,
    batch: &ModalityBatch,
    out: &SegOutput,
    bank: &PrototypeBank<F>,
    cfg: &LossConfig,
) -> Result<SupervisionTerms> {
    let labels = match (&batch.labels, batch.labeled) {
        (Some(l), true) => l,
        _ => {
            return Err(Error::Contract(
                "supervision loss needs a labeled batch".into(),
            ))
        }
    };
    let (b, c, h, w) = g.value(out.logits).dims4();
    check_target(labels, c, b * h * w)?;
    let ce = g.cross_entropy(out.logits, labels);
    let dice = g.dice_loss(out.logits, labels, F::lit(cfg.dice_smooth));
    let mut terms = vec![(ce, F::one()), (dice, F::one())];
    let mpcl = if cfg.mpcl {
        let m = mpcl_loss(g, out, labels, bank, cfg)?;
        terms.push((m.total, F::lit(cfg.delta)));
        Some(m)
    } else {
        None
    };
    let total = g.weighted_sum(&terms);
    Ok(SupervisionTerms {
        ce,
        dice,
        mpcl,
        total,
    })
}

/// Per-pixel argmax over classes of `[B, C, H, W]` logits; ties resolve to
/// the lowest class. The result is a plain vector, detached from any graph.
pub fn pseudo_label<F: Scalar>(logits: &Tensor<F>) -> Vec<usize> {
    let (b, c, h, w) = logits.dims4();
    let hw = h * w;
    let data = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            let mut bv = data[bi * c * hw + p];
            for ci in 1..c {
                let v = data[(bi * c + ci) * hw + p];
                if v > bv {
                    bv = v;
                    best = ci;
                }
            }
            out.push(best);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct ConsistencyTerms {
    pub pseudo_labels: Vec<usize>,
    pub ipc_ce: Option<Var>,
    pub ipc_mpcl: Option<MpclTerms>,
    pub ipc: Var,
    pub fpc_ce: Option<Var>,
    pub fpc_mpcl: Option<MpclTerms>,
    pub fpc: Var,
    /// `ipc + fpc`
    pub total: Var,
}

impl ConsistencyTerms {
    pub fn report<F: Scalar>(&self, g: &Graph<F>, report: &mut LossReport) {
        for (prefix, ce, mpcl, total) in [
            ("ipc", self.ipc_ce, self.ipc_mpcl, self.ipc),
            ("fpc", self.fpc_ce, self.fpc_mpcl, self.fpc),
        ] {
            report.push(format!("{prefix}/ce"), ce.map_or(0.0, |v| value(g, v)));
            match mpcl {
                Some(m) => {
                    m.report(g, prefix, report);
                    report.push(format!("{prefix}/mpcl"), value(g, m.total));
                }
                None => {
                    for name in ["pseg", "mc", "pc", "pd", "mpcl"] {
                        report.push(format!("{prefix}/{name}"), 0.0);
                    }
                }
            }
            report.push(prefix, value(g, total));
        }
        report.push("dc", value(g, self.total));
    }
}

/// Dual consistency on an unlabeled batch. The pseudo label comes from the
/// clean logits by value, so no gradient reaches the clean pass.
///
/// `img_pert` / `feat_pert` may be `None` when the matching term is disabled.
pub fn dual_consistency_loss<F: Scalar>(
    g: &mut Graph<F>,
    batch: &ModalityBatch,
    clean_logits: &Tensor<F>,
    img_pert: Option<&SegOutput>,
    feat_pert: Option<&SegOutput>,
    bank: &PrototypeBank<F>,
    cfg: &LossConfig,
) -> Result<ConsistencyTerms> {
    if batch.labeled {
        return Err(Error::Contract(
            "dual consistency applies to unlabeled batches only".into(),
        ));
    }
    let pseudo_labels = pseudo_label(clean_logits);
    let branch = |g: &mut Graph<F>, enabled: bool, out: Option<&SegOutput>| -> Result<(Option<Var>, Option<MpclTerms>, Var)> {
        match (enabled, out) {
            (true, Some(out)) => {
                if g.shape(out.logits) != clean_logits.shape() {
                    return Err(Error::Shape("perturbed output shape differs from clean".into()));
                }
                let ce = g.cross_entropy(out.logits, &pseudo_labels);
                let mut terms = vec![(ce, F::one())];
                let mpcl = if cfg.mpcl {
                    let m = mpcl_loss(g, out, &pseudo_labels, bank, cfg)?;
                    terms.push((m.total, F::lit(cfg.delta)));
                    Some(m)
                } else {
                    None
                };
                Ok((Some(ce), mpcl, g.weighted_sum(&terms)))
            }
            (true, None) => Err(Error::Contract("enabled consistency branch has no output".into())),
            (false, _) => Ok((None, None, g.constant_scalar(F::zero()))),
        }
    };
    let (ipc_ce, ipc_mpcl, ipc) = branch(g, cfg.l_ipc, img_pert)?;
    let (fpc_ce, fpc_mpcl, fpc) = branch(g, cfg.l_fpc, feat_pert)?;
    let total = g.weighted_sum(&[(ipc, F::one()), (fpc, F::one())]);
    Ok(ConsistencyTerms {
        pseudo_labels,
        ipc_ce,
        ipc_mpcl,
        ipc,
        fpc_ce,
        fpc_mpcl,
        fpc,
        total,
    })
}

/// `weight * (sup + lambda * dc)` for one modality.
pub fn modal_loss<F: Scalar>(
    g: &mut Graph<F>,
    sup: Var,
    dc: Option<Var>,
    weight: F,
    lambda: F,
) -> Var {
    let mut terms = vec![(sup, weight)];
    if let Some(dc) = dc {
        terms.push((dc, weight * lambda));
    }
    g.weighted_sum(&terms)
}

/// `sum_k w_k * (sup_k + lambda * dc_k)` inside one graph.
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    parts: &[(Var, Option<Var>)],
    weights: &[F],
    lambda: F,
) -> Result<Var> {
    if parts.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} modality losses for {} weights",
            parts.len(),
            weights.len()
        )));
    }
    let mut terms = Vec::new();
    for (&(sup, dc), &w) in parts.iter().zip(weights) {
        terms.push((sup, w));
        if let Some(dc) = dc {
            terms.push((dc, w * lambda));
        }
    }
    Ok(g.weighted_sum(&terms))
}

/// Scalar form of [`total_loss`] over `(sup, dc)` values.
pub fn total_loss_value(parts: &[(f64, f64)], weights: &[f64], lambda: f64) -> Result<f64> {
    if parts.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} modality losses for {} weights",
            parts.len(),
            weights.len()
        )));
    }
    Ok(parts
        .iter()
        .zip(weights)
        .map(|(&(s, d), &w)| w * (s + lambda * d))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::SegOutput;

    /// Builds an output from explicit logits and embeddings of shape `[1, *, 1, N]`.
    fn output(
        g: &mut Graph<f64>,
        logits: Vec<f64>,
        emb: Vec<f64>,
        classes: usize,
        dim: usize,
        bank: &PrototypeBank<f64>,
        k: usize,
    ) -> SegOutput {
        let n = logits.len() / classes;
        let l = g.leaf(Tensor::from_vec(&[1, classes, 1, n], logits).unwrap(), None);
        let e = g.leaf(Tensor::from_vec(&[1, dim, 1, n], emb).unwrap(), None);
        SegOutput::assemble(g, l, e, bank, k).unwrap()
    }

    fn two_class_bank() -> PrototypeBank<f64> {
        // modality 0: e0, e1 ; modality 1: e2, -e2  (D = 3)
        PrototypeBank::from_values(2, 2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0])
            .unwrap()
    }

    #[test]
    fn perfect_compactness_gives_zero_distance() {
        let bank = two_class_bank();
        let mut g = Graph::new();
        // pixels: class 0, class 1, class 1 ; embeddings equal their prototypes
        let emb = vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let out = output(&mut g, vec![0.0; 6], emb, 2, 3, &bank, 0);
        let m = mpcl_loss(&mut g, &out, &[0, 1, 1], &bank, &LossConfig::default()).unwrap();
        assert!(value(&g, m.pd).abs() < 1e-15);
        let mc = value(&g, m.mc);
        assert!((-2.0..=2.0).contains(&mc));
        let quarter = (value(&g, m.pseg) + mc + value(&g, m.pc) + value(&g, m.pd)) / 4.0;
        assert!((value(&g, m.total) - quarter).abs() < 1e-12);
    }

    #[test]
    fn prototype_contrast_matches_hand_softmax() {
        // N = 4, C = 2, D = 3, K = 2
        let bank = two_class_bank();
        let emb_cols: [[f64; 3]; 4] = [
            [0.6, 0.8, 0.0],
            [0.0, 0.6, 0.8],
            [0.48, 0.6, 0.64],
            [-0.6, 0.0, 0.8],
        ];
        let target = [0usize, 1, 0, 1];
        let mut emb = vec![0.0; 12];
        for (n, col) in emb_cols.iter().enumerate() {
            for d in 0..3 {
                emb[d * 4 + n] = col[d];
            }
        }
        let mut g = Graph::new();
        let out = output(&mut g, vec![0.0; 8], emb, 2, 3, &bank, 0);
        let cfg = LossConfig::default();
        let m = mpcl_loss(&mut g, &out, &target, &bank, &cfg).unwrap();
        let protos = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let tau = 0.1;
        let mut hand = 0.0;
        for n in 0..4 {
            let dot = |p: &[f64; 3]| (0..3).map(|d| emb_cols[n][d] * p[d]).sum::<f64>();
            let pos = (dot(&protos[target[n]]) / tau).exp();
            let neg = (dot(&protos[1 - target[n]]) / tau).exp();
            hand += -(pos / (pos + neg)).ln();
        }
        hand /= 4.0;
        assert!((value(&g, m.pc) - hand).abs() < 1e-6);
    }

    #[test]
    fn invalid_target_is_input_error() {
        let bank = two_class_bank();
        let mut g = Graph::new();
        let out = output(&mut g, vec![0.0; 2], vec![1.0, 0.0, 0.0], 2, 3, &bank, 0);
        assert!(matches!(
            mpcl_loss(&mut g, &out, &[2], &bank, &LossConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn single_modality_contrast_has_no_negative_term() {
        let bank = PrototypeBank::from_values(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let out = output(&mut g, vec![0.0; 2], vec![0.6, 0.8], 2, 2, &bank, 0);
        let m = mpcl_loss(&mut g, &out, &[1], &bank, &LossConfig::default()).unwrap();
        assert!((value(&g, m.mc) + 0.8).abs() < 1e-12);
    }

    #[test]
    fn supervision_near_perfect_and_contract() {
        let bank = PrototypeBank::<f64>::random(1, 3, 4, 0).unwrap();
        let target = vec![0, 1, 2, 1, 0, 2];
        let mut logits = vec![0.0; 18];
        for (n, &t) in target.iter().enumerate() {
            logits[t * 6 + n] = 20.0;
        }
        let mut g = Graph::new();
        let l = g.leaf(Tensor::from_vec(&[1, 3, 2, 3], logits).unwrap(), None);
        let e = g.leaf(Tensor::full(&[1, 4, 2, 3], 0.5), None);
        let out = SegOutput::assemble(&mut g, l, e, &bank, 0).unwrap();
        let images = Tensor::zeros(&[1, 1, 2, 3]);
        let labeled = ModalityBatch::new(images.clone(), Some(target), 0).unwrap();
        let s = supervision_loss(&mut g, &labeled, &out, &bank, &LossConfig::default()).unwrap();
        assert!(value(&g, s.ce) < 1e-6);
        assert!(value(&g, s.dice) < 1e-3);
        let m = s.mpcl.unwrap();
        let expected = value(&g, s.ce) + value(&g, s.dice) + 0.1 * value(&g, m.total);
        assert!((value(&g, s.total) - expected).abs() < 1e-12);

        let unlabeled = ModalityBatch::new(images, None, 0).unwrap();
        assert!(matches!(
            supervision_loss(&mut g, &unlabeled, &out, &bank, &LossConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn hand_cross_entropy_and_pseudo_labels() {
        let bank = PrototypeBank::<f64>::random(1, 2, 2, 0).unwrap();
        let clean = Tensor::from_vec(&[1, 2, 1, 1], vec![2.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let l = g.leaf(clean.clone(), None);
        let e = g.leaf(Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap(), None);
        let out = SegOutput::assemble(&mut g, l, e, &bank, 0).unwrap();
        let batch = ModalityBatch::new(Tensor::zeros(&[1, 1, 1, 1]), None, 0).unwrap();
        let cfg = LossConfig {
            mpcl: false,
            ..LossConfig::default()
        };
        let dc = dual_consistency_loss(&mut g, &batch, &clean, Some(&out), Some(&out), &bank, &cfg).unwrap();
        assert_eq!(dc.pseudo_labels, vec![0]);
        let want = (1.0 + (-2.0f64).exp()).ln();
        assert!((value(&g, dc.ipc) - want).abs() < 1e-12);
        assert!((want - 0.1269).abs() < 1e-4);
        assert_eq!(value(&g, dc.ipc), value(&g, dc.fpc));

        let labeled = ModalityBatch::new(Tensor::zeros(&[1, 1, 1, 1]), Some(vec![0]), 0).unwrap();
        assert!(matches!(
            dual_consistency_loss(&mut g, &labeled, &clean, Some(&out), Some(&out), &bank, &cfg),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pseudo_label_ties_go_low() {
        let t = Tensor::<f64>::full(&[1, 3, 2, 2], 0.7);
        assert_eq!(pseudo_label(&t), vec![0; 4]);
    }

    #[test]
    fn weighted_totals() {
        let parts = [(1.5, 0.25), (0.7, 2.0), (3.0, 0.5)];
        let weights = [0.8, 1.3, 0.9];
        let lambda = 0.37;
        let hand = 0.8 * (1.5 + 0.37 * 0.25) + 1.3 * (0.7 + 0.37 * 2.0) + 0.9 * (3.0 + 0.37 * 0.5);
        assert!((total_loss_value(&parts, &weights, lambda).unwrap() - hand).abs() < 1e-9);
        assert_eq!(total_loss_value(&[(2.0, 5.0)], &[1.0], 0.0).unwrap(), 2.0);
        assert!(matches!(total_loss_value(&parts, &weights[..2], 1.0), Err(Error::Contract(_))));

        let mut g = Graph::<f64>::new();
        let vars: Vec<(Var, Option<Var>)> = parts
            .iter()
            .map(|&(s, d)| (g.constant_scalar(s), Some(g.constant_scalar(d))))
            .collect();
        let t = total_loss(&mut g, &vars, &weights, lambda).unwrap();
        assert!((value(&g, t) - hand).abs() < 1e-9);
    }
}
