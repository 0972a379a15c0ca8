//! Adam with per-parameter step counts.

use std::collections::BTreeMap;

use crate::backbone::UNet;
use crate::error::{Error, Result};
use crate::graph::ParamKey;
use crate::mlmb::ModulationBank;
use crate::tensor::{Scalar, Tensor};

/// Anything exposing trainable slices under stable keys.
pub trait Parameters<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamKey, &mut [F]));
}

impl<F: Scalar> Parameters<F> for UNet<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamKey, &mut [F])) {
        UNet::visit_params(self, f)
    }
}

impl<F: Scalar> Parameters<F> for ModulationBank<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamKey, &mut [F])) {
        ModulationBank::visit_params(self, f)
    }
}

#[derive(Clone, Debug)]
struct Moments<F> {
    step: i32,
    m: Vec<F>,
    v: Vec<F>,
}

#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<ParamKey, Moments<F>>,
}

impl<F: Scalar> Default for Adam<F> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<F: Scalar> Adam<F> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: BTreeMap::new(),
        }
    }

    /// Updates every visited parameter that has a gradient; others keep
    /// both their values and their moment estimates.
    pub fn step(
        &mut self,
        lr: f64,
        grads: &BTreeMap<ParamKey, Tensor<F>>,
        targets: &mut [&mut dyn Parameters<F>],
    ) -> Result<usize> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        if let Some((k, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for {k:?}")));
        }
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let eps = F::lit(self.eps);
        let mut touched = 0;
        let mut err = None;
        for t in targets.iter_mut() {
            t.visit_params(&mut |key, values| {
                let Some(g) = grads.get(&key) else { return };
                if g.len() != values.len() {
                    err = Some(Error::Shape(format!("gradient for {key:?} has wrong length")));
                    return;
                }
                let st = self.state.entry(key).or_insert_with(|| Moments {
                    step: 0,
                    m: vec![F::zero(); values.len()],
                    v: vec![F::zero(); values.len()],
                });
                st.step += 1;
                let c1 = F::one() - b1.powi(st.step);
                let c2 = F::one() - b2.powi(st.step);
                let step = F::lit(lr);
                for ((p, &gi), (m, v)) in values.iter_mut().zip(g.data()).zip(st.m.iter_mut().zip(st.v.iter_mut())) {
                    *m = b1 * *m + (F::one() - b1) * gi;
                    *v = b2 * *v + (F::one() - b2) * gi * gi;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= step * mh / (vh.sqrt() + eps);
                }
                touched += 1;
            });
        }
        match err {
            Some(e) => Err(e),
            None => Ok(touched),
        }
    }
}
