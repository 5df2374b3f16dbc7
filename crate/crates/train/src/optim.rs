//! Adam optimizer over surfel parameters.
//!
//! Moments are keyed by surfel id, so densification (which appends, removes
//! and reorders surfels) never mixes up optimizer state; new surfels start
//! with fresh moments. Each parameter class keeps its own step count per
//! surfel, and frozen classes are skipped entirely: their parameters,
//! moments and step counts stay bit-identical.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use surfelsplat_core::surfel::sh_coeff_count;
use surfelsplat_core::{FreezeMask, ParamGrads, SurfelSet};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-15 }
    }
}

/// Base learning rates per parameter class.
///
/// The center rate decays exponentially to `mu_final_factor` of its initial
/// value over the first training stage and stays there afterwards. SH
/// coefficients above degree zero train `sh_rest_divisor` times slower than
/// the DC term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub mu: f64,
    pub mu_final_factor: f64,
    pub quat: f64,
    pub log_scale: f64,
    pub raw_opacity: f64,
    pub sh: f64,
    pub sh_rest_divisor: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mu: 1.6e-4,
            mu_final_factor: 0.01,
            quat: 1e-3,
            log_scale: 5e-3,
            raw_opacity: 5e-2,
            sh: 2.5e-3,
            sh_rest_divisor: 20.0,
        }
    }
}

impl LearningRates {
    /// Center learning rate after `step` of `horizon` decay steps.
    pub fn mu_at(&self, step: usize, horizon: usize) -> f64 {
        if horizon == 0 {
            return self.mu * self.mu_final_factor;
        }
        let t = (step as f64 / horizon as f64).clamp(0.0, 1.0);
        self.mu * self.mu_final_factor.powf(t)
    }

    /// Rates resolved for one optimizer step.
    pub fn at(&self, mu_decay_step: usize, mu_decay_horizon: usize) -> StepRates {
        StepRates {
            mu: self.mu_at(mu_decay_step, mu_decay_horizon),
            quat: self.quat,
            log_scale: self.log_scale,
            raw_opacity: self.raw_opacity,
            sh_dc: self.sh,
            sh_rest: self.sh / self.sh_rest_divisor,
        }
    }
}

/// Concrete rates applied in a single step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRates {
    pub mu: f64,
    pub quat: f64,
    pub log_scale: f64,
    pub raw_opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m_mu: Vector3<f64>,
    v_mu: Vector3<f64>,
    t_mu: u64,
    m_quat: [f64; 4],
    v_quat: [f64; 4],
    t_quat: u64,
    m_ls: [f64; 2],
    v_ls: [f64; 2],
    t_ls: u64,
    m_op: f64,
    v_op: f64,
    t_op: u64,
    m_sh: Vec<[f64; 3]>,
    v_sh: Vec<[f64; 3]>,
    t_sh: u64,
}

impl Moments {
    fn zeros(n_coeffs: usize) -> Self {
        Self {
            m_mu: Vector3::zeros(),
            v_mu: Vector3::zeros(),
            t_mu: 0,
            m_quat: [0.0; 4],
            v_quat: [0.0; 4],
            t_quat: 0,
            m_ls: [0.0; 2],
            v_ls: [0.0; 2],
            t_ls: 0,
            m_op: 0.0,
            v_op: 0.0,
            t_op: 0,
            m_sh: vec![[0.0; 3]; n_coeffs],
            v_sh: vec![[0.0; 3]; n_coeffs],
            t_sh: 0,
        }
    }
}

/// All optimizer state for one training run.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub hyper: AdamParams,
    n_coeffs: usize,
    states: HashMap<u64, Moments>,
}

fn adam_update(m: &mut f64, v: &mut f64, t: u64, g: f64, lr: f64, h: &AdamParams) -> f64 {
    *m = h.beta1 * *m + (1.0 - h.beta1) * g;
    *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
    let mhat = *m / (1.0 - h.beta1.powi(t as i32));
    let vhat = *v / (1.0 - h.beta2.powi(t as i32));
    -lr * mhat / (vhat.sqrt() + h.eps)
}

impl OptimState {
    pub fn new(hyper: AdamParams, max_sh_degree: usize) -> Self {
        Self { hyper, n_coeffs: sh_coeff_count(max_sh_degree), states: HashMap::new() }
    }

    /// Applies one Adam step to every unfrozen parameter class.
    ///
    /// Surfels are visited in set order, so the update is deterministic.
    pub fn step(
        &mut self,
        set: &mut SurfelSet,
        grads: &ParamGrads,
        freeze: &FreezeMask,
        rates: &StepRates,
    ) {
        let h = self.hyper;
        for (i, s) in set.surfels.iter_mut().enumerate() {
            let st = self.states.entry(s.id).or_insert_with(|| Moments::zeros(self.n_coeffs));
            if !freeze.mu[i] {
                st.t_mu += 1;
                for k in 0..3 {
                    let mut m = st.m_mu[k];
                    let mut v = st.v_mu[k];
                    s.mu[k] += adam_update(&mut m, &mut v, st.t_mu, grads.mu[i][k], rates.mu, &h);
                    st.m_mu[k] = m;
                    st.v_mu[k] = v;
                }
            }
            if !freeze.quat[i] {
                st.t_quat += 1;
                for k in 0..4 {
                    s.quat[k] += adam_update(
                        &mut st.m_quat[k],
                        &mut st.v_quat[k],
                        st.t_quat,
                        grads.quat[i][k],
                        rates.quat,
                        &h,
                    );
                }
            }
            if !freeze.log_scale[i] {
                st.t_ls += 1;
                for k in 0..2 {
                    s.log_scale[k] += adam_update(
                        &mut st.m_ls[k],
                        &mut st.v_ls[k],
                        st.t_ls,
                        grads.log_scale[i][k],
                        rates.log_scale,
                        &h,
                    );
                }
            }
            if !freeze.raw_opacity[i] {
                st.t_op += 1;
                s.raw_opacity += adam_update(
                    &mut st.m_op,
                    &mut st.v_op,
                    st.t_op,
                    grads.raw_opacity[i],
                    rates.raw_opacity,
                    &h,
                );
            }
            if !freeze.sh[i] {
                st.t_sh += 1;
                for (k, coeff) in s.sh.iter_mut().enumerate() {
                    let lr = if k == 0 { rates.sh_dc } else { rates.sh_rest };
                    for c in 0..3 {
                        coeff[c] += adam_update(
                            &mut st.m_sh[k][c],
                            &mut st.v_sh[k][c],
                            st.t_sh,
                            grads.sh[i][k][c],
                            lr,
                            &h,
                        );
                    }
                }
            }
        }
    }

    /// Drops state for surfels that no longer exist (after pruning/splits).
    pub fn retain_ids(&mut self, set: &SurfelSet) {
        let live: std::collections::HashSet<u64> = set.surfels.iter().map(|s| s.id).collect();
        self.states.retain(|id, _| live.contains(id));
    }

    /// Clears opacity moments (used together with opacity resets, so the
    /// optimizer does not replay stale momentum on the reset value).
    pub fn reset_opacity_moments(&mut self) {
        for st in self.states.values_mut() {
            st.m_op = 0.0;
            st.v_op = 0.0;
            st.t_op = 0;
        }
    }

    /// Step count of the opacity class for one surfel (0 when untracked).
    pub fn opacity_steps(&self, id: u64) -> u64 {
        self.states.get(&id).map_or(0, |s| s.t_op)
    }
}
