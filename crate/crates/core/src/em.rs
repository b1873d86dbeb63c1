//! Two-component Gaussian mixtures over the latent weights of one output channel, fitted by
//! Expectation-Maximization, and the attraction term that pulls weights toward the modes.
//!
//! Component variances are stored as variances: the density of component `k` is
//! `exp(−(w − μ_k)² / (2·var_k)) / sqrt(2π·var_k)`. The mixture is the usual
//! `Σ_k β_k · p(w | k)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of mixture components.
pub const COMPONENTS: usize = 2;
/// Lower bound applied to every component variance.
pub const VAR_FLOOR: f64 = 1e-6;
/// Effective count below which a component is considered starved and restarted.
pub const STARVATION_COUNT: f64 = 1e-6;
/// Mixing weight given to a restarted component.
pub const BETA_FLOOR: f64 = 1e-6;

/// Mixture parameters and per-weight responsibilities of one output channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmChannelState {
    /// Component means, ascending.
    pub mu: [f64; COMPONENTS],
    pub var: [f64; COMPONENTS],
    /// Mixing weights, summing to one.
    pub beta: [f64; COMPONENTS],
    /// One responsibility row per input weight; each row sums to one.
    pub resp: Vec<[f64; COMPONENTS]>,
    /// Column sums of `resp`.
    pub eff_count: [f64; COMPONENTS],
}

/// Gaussian density with the variance floor applied.
pub fn component_density(w: f64, mu: f64, var: f64) -> f64 {
    log_component_density(w, mu, var).exp()
}

pub fn log_component_density(w: f64, mu: f64, var: f64) -> f64 {
    let var = var.max(VAR_FLOOR);
    let d = w - mu;
    -0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var)
}

impl GmmChannelState {
    /// Posterior component probabilities of a single weight under the current parameters.
    ///
    /// Returns `None` when neither component gives the weight a finite log-probability.
    pub fn responsibility(&self, w: f64) -> Option<[f64; COMPONENTS]> {
        let l = [0, 1].map(|k| self.beta[k].ln() + log_component_density(w, self.mu[k], self.var[k]));
        let max = l[0].max(l[1]);
        if !max.is_finite() {
            return None;
        }
        let e = l.map(|v| (v - max).exp());
        let z = e[0] + e[1];
        Some([e[0] / z, e[1] / z])
    }

    /// Responsibility with the nearest-mean hard assignment as fallback.
    pub fn responsibility_or_nearest(&self, w: f64) -> [f64; COMPONENTS] {
        self.responsibility(w).unwrap_or_else(|| {
            if w <= 0.5 * (self.mu[0] + self.mu[1]) {
                [1.0, 0.0]
            } else {
                [0.0, 1.0]
            }
        })
    }

    pub fn log_likelihood(&self, weights: &[f64]) -> f64 {
        weights
            .iter()
            .map(|&w| {
                let l = [0, 1].map(|k| {
                    self.beta[k].ln() + log_component_density(w, self.mu[k], self.var[k])
                });
                let max = l[0].max(l[1]);
                max + ((l[0] - max).exp() + (l[1] - max).exp()).ln()
            })
            .sum()
    }

    /// Checks every structural invariant; used by tests and checkpoint loading.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::StaleGmm(m));
        if self.mu[0] > self.mu[1] {
            return bad(format!("means out of order: {:?}", self.mu));
        }
        if self.var.iter().any(|&v| !v.is_finite() || v < VAR_FLOOR) {
            return bad(format!("variance below floor: {:?}", self.var));
        }
        if self.beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) || (self.beta[0] + self.beta[1] - 1.0).abs() > 1e-12 {
            return bad(format!("invalid mixing weights: {:?}", self.beta));
        }
        for r in &self.resp {
            if (r[0] + r[1] - 1.0).abs() > 1e-12 || r.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return bad(format!("responsibility row {r:?} does not sum to one"));
            }
        }
        let total = self.eff_count[0] + self.eff_count[1];
        if (total - self.resp.len() as f64).abs() > 1e-9 * (1.0 + total) {
            return bad(format!("effective counts {:?} vs {} weights", self.eff_count, self.resp.len()));
        }
        Ok(())
    }

    fn swap_components(&mut self) {
        self.mu.swap(0, 1);
        self.var.swap(0, 1);
        self.beta.swap(0, 1);
        self.eff_count.swap(0, 1);
        for r in &mut self.resp {
            r.swap(0, 1);
        }
    }
}

/// Recomputes responsibilities for `weights` from the current parameters.
///
/// Weights whose log-probability underflows under both components are hard-assigned to the
/// nearest mean; the number of such weights is returned.
pub fn e_step(weights: &[f64], state: &mut GmmChannelState) -> usize {
    let mut fallbacks = 0;
    state.resp.clear();
    state.resp.reserve(weights.len());
    let mut eff = [0.0; COMPONENTS];
    for &w in weights {
        let r = match state.responsibility(w) {
            Some(r) => r,
            None => {
                fallbacks += 1;
                state.responsibility_or_nearest(w)
            }
        };
        eff[0] += r[0];
        eff[1] += r[1];
        state.resp.push(r);
    }
    state.eff_count = eff;
    if fallbacks > 0 {
        log::warn!("e-step: {fallbacks} weights fell back to nearest-mean assignment");
    }
    fallbacks
}

/// What the M-step had to repair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MStepReport {
    /// Components restarted because their effective count vanished.
    pub restarted: [bool; COMPONENTS],
}

/// Re-estimates means, variances and mixing weights from the current responsibilities.
pub fn m_step(weights: &[f64], state: &mut GmmChannelState) -> Result<MStepReport> {
    let n = weights.len();
    if state.resp.len() != n {
        return Err(Error::StaleGmm(format!(
            "{} responsibility rows for {n} weights",
            state.resp.len()
        )));
    }
    if n == 0 {
        return Ok(MStepReport::default());
    }
    let mut report = MStepReport::default();
    let mut eff = [0.0; COMPONENTS];
    let mut wsum = [0.0; COMPONENTS];
    for (&w, r) in weights.iter().zip(&state.resp) {
        for k in 0..COMPONENTS {
            eff[k] += r[k];
            wsum[k] += r[k] * w;
        }
    }
    state.eff_count = eff;
    let mut mu = state.mu;
    for k in 0..COMPONENTS {
        if eff[k] >= STARVATION_COUNT {
            mu[k] = wsum[k] / eff[k];
        }
    }
    let mut sq = [0.0; COMPONENTS];
    for (&w, r) in weights.iter().zip(&state.resp) {
        for k in 0..COMPONENTS {
            let d = w - mu[k];
            sq[k] += r[k] * d * d;
        }
    }
    for k in 0..COMPONENTS {
        if eff[k] >= STARVATION_COUNT {
            state.mu[k] = mu[k];
            state.var[k] = (sq[k] / eff[k]).max(VAR_FLOOR);
            state.beta[k] = eff[k] / n as f64;
        }
    }
    for (k, &count) in eff.iter().enumerate() {
        if count < STARVATION_COUNT {
            let live = 1 - k;
            let q = if state.mu[live] >= 0.0 { 0.1 } else { 0.9 };
            let mut sorted = weights.to_vec();
            sorted.sort_by(f64::total_cmp);
            state.mu[k] = quantile(&sorted, q);
            state.var[k] = population_variance(weights).max(VAR_FLOOR);
            state.beta[k] = BETA_FLOOR;
            state.beta[live] = 1.0 - BETA_FLOOR;
            report.restarted[k] = true;
            log::warn!("m-step: component {k} starved (count {:.3e}); restarted at q{q}", count);
        }
    }
    if state.mu[0] > state.mu[1] {
        state.swap_components();
    }
    Ok(report)
}

/// One full EM iteration (E then M).
pub fn em_iteration(weights: &[f64], state: &mut GmmChannelState) -> Result<MStepReport> {
    e_step(weights, state);
    m_step(weights, state)
}

/// Displacement that pulls a weight lying strictly between the two means toward the
/// responsibility-weighted mode means; zero elsewhere.
pub fn em_force(w: f64, state: &GmmChannelState, resp: &[f64; COMPONENTS]) -> f64 {
    if state.mu[0] < w && w < state.mu[1] {
        resp[0] * (state.mu[0] - w) + resp[1] * (state.mu[1] - w)
    } else {
        0.0
    }
}

/// Starting mixture for a channel: means at `±mean|w|`, variances and mixing weights from the
/// sign split. When one side is empty the means come from the quartiles instead.
pub fn init_channel(weights: &[f64]) -> GmmChannelState {
    let n = weights.len();
    let mut state = GmmChannelState {
        mu: [-1.0, 1.0],
        var: [1.0, 1.0],
        beta: [0.5, 0.5],
        resp: Vec::new(),
        eff_count: [0.0, 0.0],
    };
    if n == 0 {
        return state;
    }
    let (neg, pos): (Vec<f64>, Vec<f64>) = weights.iter().partition(|&&w| w <= 0.0);
    let mean_abs = weights.iter().map(|w| w.abs()).sum::<f64>() / n as f64;
    if !neg.is_empty() && !pos.is_empty() && mean_abs > 0.0 {
        state.mu = [-mean_abs, mean_abs];
        state.var = [
            population_variance(&neg).max(VAR_FLOOR),
            population_variance(&pos).max(VAR_FLOOR),
        ];
        let b = neg.len() as f64 / n as f64;
        state.beta = [b, 1.0 - b];
    } else {
        let mut sorted = weights.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (lo, hi) = (quantile(&sorted, 0.25), quantile(&sorted, 0.75));
        let all_var = population_variance(weights);
        if hi - lo > 1e-9 {
            state.mu = [lo, hi];
        } else {
            let spread = all_var.sqrt().max(1e-3);
            let mid = quantile(&sorted, 0.5);
            state.mu = [mid - spread, mid + spread];
        }
        let v = (all_var / 4.0).max(VAR_FLOOR);
        state.var = [v, v];
    }
    e_step(weights, &mut state);
    state
}

pub(crate) fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Linear-interpolated quantile of an ascending slice.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}
