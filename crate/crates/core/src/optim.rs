//! SGD and Adam steppers and the learning-rate policies for range learnables.

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::grad::{GradPair, Parameterization, RangeParams, SymParam};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub fn sgd_step(param: &[f64], grad: &[f64], lr: f64) -> Vec<f64> {
    param.iter().zip(grad).map(|(p, g)| p - lr * g).collect()
}

/// SGD with one learning rate per element.
pub fn sgd_step_with_rates(param: &[f64], grad: &[f64], lrs: &[f64]) -> Vec<f64> {
    param
        .iter()
        .zip(grad)
        .zip(lrs)
        .map(|((p, g), lr)| p - lr * g)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam without weight decay.
pub fn adam_step(param: &[f64], grad: &[f64], state: &AdamState, lr: f64) -> (Vec<f64>, AdamState) {
    let lrs = vec![lr; param.len()];
    adam_step_with_rates(param, grad, state, &lrs)
}

/// Adam with one learning rate per element.
pub fn adam_step_with_rates(
    param: &[f64],
    grad: &[f64],
    state: &AdamState,
    lrs: &[f64],
) -> (Vec<f64>, AdamState) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), state.m.len());
    let mut next = state.clone();
    next.t += 1;
    let bc1 = 1.0 - state.beta1.powi(next.t as i32);
    let bc2 = 1.0 - state.beta2.powi(next.t as i32);
    let mut out = Vec::with_capacity(param.len());
    for i in 0..param.len() {
        let g = grad[i];
        next.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        next.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = next.m[i] / bc1;
        let v_hat = next.v[i] / bc2;
        out.push(param[i] - lrs[i] * m_hat / (v_hat.sqrt() + state.eps));
    }
    (out, next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    /// Same rate for both learnables.
    Uniform,
    /// Rates scaled by the current magnitude of each learnable.
    Naive,
    /// Scale rate emulating the derived-scale update of min/max, offset
    /// gradient replaced by `dL/dθmin / s`.
    Sophisticated,
    /// Min/max rates scaled by `|θmin0|` and `|θmax0|`.
    MinMaxPlus,
    /// Per-parameterization factors that make the derived-scale updates of
    /// the symmetric parameterizations coincide.
    SymmetricMatched,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Uniform => "uniform",
            PolicyKind::Naive => "naive",
            PolicyKind::Sophisticated => "sophisticated",
            PolicyKind::MinMaxPlus => "minmax-plus",
            PolicyKind::SymmetricMatched => "symmetric-matched",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPolicy {
    pub kind: PolicyKind,
    pub base_lr: f64,
}

impl LrPolicy {
    pub fn new(kind: PolicyKind, base_lr: f64) -> Self {
        Self { kind, base_lr }
    }

    /// Rejects kind combinations the policy is not defined for.
    pub fn check_compatible(&self, param: Parameterization) -> Result<()> {
        let ok = match self.kind {
            PolicyKind::Uniform => true,
            PolicyKind::Naive | PolicyKind::Sophisticated => param == Parameterization::ScaleOffset,
            PolicyKind::MinMaxPlus => param == Parameterization::MinMax,
            PolicyKind::SymmetricMatched => matches!(
                param,
                Parameterization::Symmetric(
                    SymParam::Scale | SymParam::ThetaMax | SymParam::Gamma { use_sigmoid: false }
                )
            ),
        };
        if ok {
            Ok(())
        } else {
            Err(QuantError::PolicyMismatch {
                policy: self.kind.name().to_string(),
                param: param.name().to_string(),
            })
        }
    }
}

/// Per-learnable learning rates plus the (possibly rewritten) gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub lr_a: Vec<f64>,
    pub lr_b: Vec<f64>,
    pub grads: GradPair,
}

/// Applies `policy` to one optimizer step.
///
/// `minmax_grads` carries `dL/dθmin, dL/dθmax` evaluated at the range implied
/// by the current scale/offset; only [`PolicyKind::Sophisticated`] reads it.
pub fn apply_lr_policy(
    policy: &LrPolicy,
    params: &RangeParams,
    grads: &GradPair,
    opt: OptimizerKind,
    minmax_grads: Option<&GradPair>,
) -> Result<PolicyOutput> {
    policy.check_compatible(params.kind)?;
    let channels = params.channels();
    let base = policy.base_lr;
    let k = params.k() as f64;
    // The second learnable of a symmetric quantizer is unused.
    let lr_b_default = match params.kind {
        Parameterization::Symmetric(_) => 0.0,
        _ => base,
    };
    let out = match policy.kind {
        PolicyKind::Uniform => PolicyOutput {
            lr_a: vec![base; channels],
            lr_b: vec![lr_b_default; channels],
            grads: grads.clone(),
        },
        PolicyKind::Naive => PolicyOutput {
            lr_a: params.enc_a.iter().map(|a| base * a.abs()).collect(),
            lr_b: params.enc_b.iter().map(|b| base * b.abs()).collect(),
            grads: grads.clone(),
        },
        PolicyKind::Sophisticated => {
            let mm = minmax_grads.ok_or_else(|| QuantError::PolicyMismatch {
                policy: policy.kind.name().to_string(),
                param: "missing min/max-equivalent gradients".to_string(),
            })?;
            let scale = match opt {
                OptimizerKind::Adam => 2.0 / k,
                OptimizerKind::Sgd => 2.0 / (k * k),
            };
            let d_b = (0..channels)
                .map(|c| mm.d_enc_a[c] / params.resolve(c).0.s())
                .collect();
            PolicyOutput {
                lr_a: vec![base * scale; channels],
                lr_b: vec![base; channels],
                grads: GradPair {
                    d_enc_a: grads.d_enc_a.clone(),
                    d_enc_b: d_b,
                },
            }
        }
        PolicyKind::MinMaxPlus => PolicyOutput {
            lr_a: params.theta_min0.iter().map(|t| base * t.abs()).collect(),
            lr_b: params.theta_max0.iter().map(|t| base * t.abs()).collect(),
            grads: grads.clone(),
        },
        PolicyKind::SymmetricMatched => {
            let Parameterization::Symmetric(sym) = params.kind else {
                unreachable!("checked by check_compatible")
            };
            let lr_a = params
                .theta_max0
                .iter()
                .map(|&t0| base * symmetric_lr_factor(sym, opt, k, t0))
                .collect();
            PolicyOutput {
                lr_a,
                lr_b: vec![0.0; channels],
                grads: grads.clone(),
            }
        }
    };
    Ok(out)
}

/// Learning-rate multiplier that makes one step of `param` move the derived
/// symmetric step size by the same amount as one step of the step size
/// itself.
///
/// With `s = 2θ/k` and `θ = γ θ0`, SGD moves `s` by `lr (2/k)² g` when
/// training `θ` and by `lr (2θ0/k)² g` when training `γ`; Adam's update is
/// invariant to positive gradient scaling, so only one factor of `2/k`
/// (times `θ0` for `γ`) survives.
pub fn symmetric_lr_factor(param: SymParam, opt: OptimizerKind, k: f64, theta_max0: f64) -> f64 {
    let half_k = k / 2.0;
    match (param, opt) {
        (SymParam::Scale, _) => 1.0,
        (SymParam::ThetaMax, OptimizerKind::Sgd) => half_k * half_k,
        (SymParam::ThetaMax, OptimizerKind::Adam) => half_k,
        (SymParam::Gamma { .. }, OptimizerKind::Sgd) => (half_k / theta_max0).powi(2),
        (SymParam::Gamma { .. }, OptimizerKind::Adam) => half_k / theta_max0,
    }
}

/// Optimizer state for the two learnables of one quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeOptimizer {
    pub kind: OptimizerKind,
    state_a: AdamState,
    state_b: AdamState,
}

impl RangeOptimizer {
    pub fn new(kind: OptimizerKind, channels: usize) -> Self {
        Self {
            kind,
            state_a: AdamState::new(channels),
            state_b: AdamState::new(channels),
        }
    }

    /// Updates `params` in place from a policy output.
    pub fn step(&mut self, params: &mut RangeParams, update: &PolicyOutput) {
        match self.kind {
            OptimizerKind::Sgd => {
                params.enc_a = sgd_step_with_rates(&params.enc_a, &update.grads.d_enc_a, &update.lr_a);
                params.enc_b = sgd_step_with_rates(&params.enc_b, &update.grads.d_enc_b, &update.lr_b);
            }
            OptimizerKind::Adam => {
                let (a, sa) = adam_step_with_rates(
                    &params.enc_a,
                    &update.grads.d_enc_a,
                    &self.state_a,
                    &update.lr_a,
                );
                let (b, sb) = adam_step_with_rates(
                    &params.enc_b,
                    &update.grads.d_enc_b,
                    &self.state_b,
                    &update.lr_b,
                );
                params.enc_a = a;
                params.enc_b = b;
                self.state_a = sa;
                self.state_b = sb;
            }
        }
    }
}
