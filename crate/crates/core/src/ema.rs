//! Exponential moving average of model parameters.

use std::ops::{Deref, DerefMut};

use crate::backbone::{check_same_layout, Backbone, ParamMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    shadow: ParamMap,
    beta: f64,
    step: u64,
}

impl EmaState {
    /// Shadow starts as an exact copy of `params`.
    pub fn new(params: &ParamMap, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::invalid("beta", format!("must lie in [0, 1), got {beta}")));
        }
        if let Some((name, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameter".into(),
                location: name.clone(),
            });
        }
        Ok(Self {
            shadow: params.clone(),
            beta,
            step: 0,
        })
    }

    /// Restore a saved shadow.
    pub fn from_parts(shadow: ParamMap, beta: f64, step: u64) -> Result<Self> {
        let mut s = Self::new(&shadow, beta)?;
        s.step = step;
        Ok(s)
    }

    pub fn shadow(&self) -> &ParamMap {
        &self.shadow
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// `shadow <- beta * shadow + (1 - beta) * params`.
    pub fn update(&mut self, params: &ParamMap) -> Result<()> {
        check_same_layout(&self.shadow, params)?;
        let b = self.beta;
        for (name, s) in self.shadow.iter_mut() {
            let p = &params[name];
            for (x, &y) in s.data_mut().iter_mut().zip(p.data()) {
                *x = b * *x + (1.0 - b) * y;
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Install the shadow into `model` until the returned guard is dropped.
    pub fn swap_for_eval<'a>(&self, model: &'a mut Backbone) -> Result<EmaSwap<'a>> {
        if model.ema_installed {
            return Err(Error::InvalidArgument(
                "EMA weights are already installed in this model".into(),
            ));
        }
        check_same_layout(model.params(), &self.shadow)?;
        let live = std::mem::replace(model.params_mut(), self.shadow.clone());
        model.ema_installed = true;
        Ok(EmaSwap {
            model,
            live: Some(live),
        })
    }
}

/// Scoped view of a model carrying EMA weights; restores the live weights
/// on drop, including during unwinding.
#[derive(Debug)]
pub struct EmaSwap<'a> {
    model: &'a mut Backbone,
    live: Option<ParamMap>,
}

impl Deref for EmaSwap<'_> {
    type Target = Backbone;

    fn deref(&self) -> &Backbone {
        self.model
    }
}

impl DerefMut for EmaSwap<'_> {
    fn deref_mut(&mut self) -> &mut Backbone {
        self.model
    }
}

impl Drop for EmaSwap<'_> {
    fn drop(&mut self) {
        if let Some(live) = self.live.take() {
            *self.model.params_mut() = live;
            self.model.ema_installed = false;
        }
    }
}
