//! Stochastic gradient descent with a decaying gain `a / (t + A)^alpha`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsgdConfig {
    pub iterations: usize,
    /// Gain numerator. With `auto_scale` it multiplies the automatic estimate.
    pub a: f64,
    #[serde(rename = "A")]
    pub big_a: f64,
    pub alpha: f64,
    /// Scale `a` so the expected first step moves no parameter by more than
    /// `max_step` (in parameter units; the pipeline uses the input voxel size).
    pub auto_scale: bool,
    pub max_step: f64,
    /// Gradient draws used for the automatic estimate.
    pub gain_samples: usize,
    /// Shrink any step whose largest component exceeds `max_step`.
    pub clip: bool,
    pub seed: u64,
}

impl Default for AsgdConfig {
    fn default() -> Self {
        AsgdConfig {
            iterations: 500,
            a: 1.0,
            big_a: 20.0,
            alpha: 0.602,
            auto_scale: true,
            max_step: 1.0,
            gain_samples: 4,
            clip: true,
            seed: 0,
        }
    }
}

impl AsgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a > 0.0
            && self.a.is_finite()
            && self.big_a > 0.0
            && self.alpha > 0.0
            && self.alpha <= 1.0
            && self.max_step > 0.0
            && self.gain_samples > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "invalid optimiser settings: {self:?}"
            )))
        }
    }

    pub fn gain(&self, a: f64, t: usize) -> f64 {
        a / (t as f64 + self.big_a).powf(self.alpha)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AsgdOutcome<T> {
    pub params: Vec<T>,
    /// Cost at the start of each iteration.
    pub costs: Vec<f64>,
    /// Effective gain numerator used.
    pub a: f64,
}

/// Minimises a stochastic cost. `f(params, seed)` returns the cost and its
/// gradient for the sample set selected by `seed`.
pub fn asgd_minimize<T, F>(mut f: F, init: Vec<T>, cfg: &AsgdConfig) -> Result<AsgdOutcome<T>>
where
    T: Real,
    F: FnMut(&[T], u64) -> Result<(T, Vec<T>)>,
{
    cfg.validate()?;
    let mut theta = init;
    let mut a = cfg.a;
    if cfg.auto_scale && cfg.iterations > 0 {
        let mut mean_inf = 0.0;
        for j in 0..cfg.gain_samples {
            let (_, g) = f(&theta, seed::derive(cfg.seed, &[u64::MAX, j as u64]))?;
            check_finite(&g)?;
            mean_inf += g.iter().fold(0.0f64, |m, x| m.max(x.as_f64().abs()));
        }
        mean_inf /= cfg.gain_samples as f64;
        if mean_inf > 0.0 {
            a *= cfg.max_step * cfg.big_a.powf(cfg.alpha) / mean_inf;
        }
    }

    let mut costs = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let (c, g) = f(&theta, seed::derive(cfg.seed, &[t as u64]))?;
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("cost at iteration {t}")));
        }
        check_finite(&g)?;
        costs.push(c.as_f64());
        let mut gamma = cfg.gain(a, t);
        if cfg.clip {
            let largest = g.iter().fold(0.0f64, |m, x| m.max(x.as_f64().abs())) * gamma;
            if largest > cfg.max_step {
                gamma *= cfg.max_step / largest;
            }
        }
        let gamma = T::lit(gamma);
        theta.iter_mut().zip(&g).for_each(|(p, &d)| *p -= gamma * d);
    }
    Ok(AsgdOutcome {
        params: theta,
        costs,
        a,
    })
}

fn check_finite<T: Real>(g: &[T]) -> Result<()> {
    if g.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("gradient".into()))
    }
}
