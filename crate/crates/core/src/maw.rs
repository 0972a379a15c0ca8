//! Modality-adaptive loss weighting from validation history.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to DSC values before taking logarithms.
pub const DSC_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MawConfig {
    pub enabled: bool,
    /// Number of most recent epochs that enter speed and performance.
    pub window: usize,
    pub beta: f64,
    pub eps: f64,
}

impl Default for MawConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            window: 20,
            beta: 0.2,
            eps: 1e-8,
        }
    }
}

impl MawConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("maw.window must be >= 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("maw.eps must be > 0".into()));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("maw.beta must be finite".into()));
        }
        Ok(())
    }
}

/// Ratio of accumulated improvement to accumulated regression over the last
/// `window` epoch-to-epoch steps: `(d+ + eps) / (d- + eps)` with
/// `d+ = sum of positive log-ratios`, `d- = |sum of non-positive log-ratios|`.
/// Fewer than two points give 1.
pub fn learning_speed(history: &[f64], window: usize, eps: f64) -> f64 {
    if history.len() < 2 {
        return 1.0;
    }
    let start = history.len().saturating_sub(window + 1);
    let recent = &history[start..];
    let (mut up, mut down) = (0.0, 0.0);
    for pair in recent.windows(2) {
        let prev = pair[0].max(DSC_FLOOR);
        let cur = pair[1].max(DSC_FLOOR);
        let r = (cur / prev).ln();
        if cur > prev {
            up += r;
        } else {
            down += r;
        }
    }
    (up + eps) / (down.abs() + eps)
}

/// Mean of the last `window` values; 0 for an empty history.
pub fn accumulated_performance(history: &[f64], window: usize) -> f64 {
    if history.is_empty() {
        return 0.0;
    }
    let recent = &history[history.len().saturating_sub(window)..];
    recent.iter().sum::<f64>() / recent.len() as f64
}

/// `S^-beta * (1 - P)`
pub fn raw_weight(speed: f64, performance: f64, beta: f64) -> f64 {
    speed.powf(-beta) * (1.0 - performance)
}

/// Rescales to mean 1; all-zero input yields all ones.
pub fn rescale(raw: &[f64]) -> Vec<f64> {
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0) {
        return vec![1.0; raw.len()];
    }
    let k = raw.len() as f64;
    raw.iter().map(|w| w * k / sum).collect()
}

/// One line of the per-epoch weighting log.
#[derive(Clone, Debug, PartialEq)]
pub struct MawRow {
    pub epoch: usize,
    pub modality: usize,
    pub dsc: f64,
    pub speed: f64,
    pub performance: f64,
    pub raw: f64,
    pub weight: f64,
}

impl MawRow {
    pub const CSV_HEADER: &'static str = "epoch,modality,dsc,speed,performance,raw_weight,weight";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.modality, self.dsc, self.speed, self.performance, self.raw, self.weight
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MawState {
    config: MawConfig,
    history: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl MawState {
    pub fn new(num_modalities: usize, config: MawConfig) -> Result<Self> {
        config.validate()?;
        if num_modalities == 0 {
            return Err(Error::Config("MAW needs at least one modality".into()));
        }
        Ok(Self {
            config,
            history: vec![Vec::new(); num_modalities],
            weights: vec![1.0; num_modalities],
        })
    }

    pub fn config(&self) -> &MawConfig {
        &self.config
    }

    pub fn num_modalities(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self, k: usize) -> &[f64] {
        &self.history[k]
    }

    /// Weights for the next epoch.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn speed(&self, k: usize) -> f64 {
        learning_speed(&self.history[k], self.config.window, self.config.eps)
    }

    pub fn performance(&self, k: usize) -> f64 {
        accumulated_performance(&self.history[k], self.config.window)
    }

    pub fn raw_weights(&self) -> Vec<f64> {
        (0..self.num_modalities())
            .map(|k| raw_weight(self.speed(k), self.performance(k), self.config.beta))
            .collect()
    }

    /// Current weights computed from the stored histories. Empty histories
    /// or a disabled configuration give all ones.
    pub fn compute_weights(&self) -> Vec<f64> {
        if !self.config.enabled || self.history.iter().any(|h| h.is_empty()) {
            return vec![1.0; self.num_modalities()];
        }
        rescale(&self.raw_weights())
    }

    /// Appends one validation DSC per modality and refreshes the weights.
    pub fn record_epoch(&mut self, dsc: &[f64]) -> Result<()> {
        if dsc.len() != self.num_modalities() {
            return Err(Error::Contract(format!(
                "{} DSC values for {} modalities",
                dsc.len(),
                self.num_modalities()
            )));
        }
        if let Some(v) = dsc.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("DSC {v} outside [0, 1]")));
        }
        for (h, &v) in self.history.iter_mut().zip(dsc) {
            h.push(v);
        }
        self.weights = self.compute_weights();
        Ok(())
    }

    /// Log rows describing the latest refresh.
    pub fn rows(&self, epoch: usize) -> Vec<MawRow> {
        let raw = self.raw_weights();
        (0..self.num_modalities())
            .map(|k| MawRow {
                epoch,
                modality: k,
                dsc: self.history[k].last().copied().unwrap_or(f64::NAN),
                speed: self.speed(k),
                performance: self.performance(k),
                raw: raw[k],
                weight: self.weights[k],
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flat_and_rising_histories() {
        assert_eq!(learning_speed(&[0.4, 0.4, 0.4], 20, 1e-8), 1.0);
        assert!(learning_speed(&[0.1, 0.2, 0.3], 20, 1e-8) > 1e6);
        assert_eq!(learning_speed(&[0.4], 20, 1e-8), 1.0);
        assert_eq!(learning_speed(&[], 20, 1e-8), 1.0);
    }

    #[test]
    fn hand_case() {
        let up = (0.6f64 / 0.5).ln();
        let down = (0.55f64 / 0.6).ln().abs();
        let s = learning_speed(&[0.5, 0.6, 0.55], 20, 1e-8);
        assert!((s - (up + 1e-8) / (down + 1e-8)).abs() < 1e-12);
        assert!((s - 2.0954).abs() < 1e-3);
        let raw = raw_weight(s, 0.55, 0.2);
        assert!((raw - 0.388).abs() < 1e-3);
    }

    #[test]
    fn window_drops_old_epochs() {
        // with window 2 only the last two ratios count
        let s = learning_speed(&[0.9, 0.1, 0.2, 0.4], 2, 1e-8);
        assert!(s > 1e6);
        assert!((accumulated_performance(&[0.9, 0.1, 0.2, 0.4], 2) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn perfect_modality_has_zero_raw_weight() {
        assert_eq!(raw_weight(1.7, 1.0, 0.2), 0.0);
        assert_eq!(rescale(&[0.0, 0.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn state_lifecycle() {
        let mut st = MawState::new(2, MawConfig::default()).unwrap();
        assert_eq!(st.weights(), &[1.0, 1.0]);
        st.record_epoch(&[0.3, 0.5]).unwrap();
        st.record_epoch(&[0.35, 0.7]).unwrap();
        let w = st.weights();
        assert!(w[0] > w[1]);
        assert!((w.iter().sum::<f64>() / 2.0 - 1.0).abs() < 1e-12);
        let rows = st.rows(1);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].dsc, 0.7);
        assert!(matches!(st.record_epoch(&[0.3]), Err(Error::Contract(_))));
        assert!(matches!(st.record_epoch(&[0.3, 1.2]), Err(Error::Input(_))));

        let mut off = MawState::new(2, MawConfig { enabled: false, ..MawConfig::default() }).unwrap();
        off.record_epoch(&[0.1, 0.9]).unwrap();
        assert_eq!(off.weights(), &[1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn speed_is_scale_invariant(h in prop::collection::vec(0.05f64..0.9, 2..30), c in 0.1f64..1.1) {
            let scaled: Vec<f64> = h.iter().map(|v| v * c).collect();
            let a = learning_speed(&h, 20, 1e-8);
            let b = learning_speed(&scaled, 20, 1e-8);
            prop_assert!((a.ln() - b.ln()).abs() < 1e-6);
        }

        #[test]
        fn raw_weight_monotone(s in 0.01f64..100.0, p in 0.0f64..0.99, dp in 0.001f64..0.5, ds in 0.01f64..10.0) {
            prop_assert!(raw_weight(s, p - dp, 0.2) > raw_weight(s, p, 0.2));
            prop_assert!(raw_weight(s + ds, p, 0.2) < raw_weight(s, p, 0.2));
        }

        #[test]
        fn rescaled_mean_is_one(raw in prop::collection::vec(0.0f64..3.0, 1..8)) {
            prop_assume!(raw.iter().any(|&w| w > 0.0));
            let w = rescale(&raw);
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-9);
        }
    }
}
