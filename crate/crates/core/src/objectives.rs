//! Training objectives: centering weights, implicit rewards from the
//! denoising-error surrogate, the centered reward-matching loss, the
//! guidance-anchored KL term and the two-sample / InfoNCA variants.
//!
//! Model-level losses take a [`Tape`] over the trainable parameters and plain
//! references to the frozen ones; only velocities of the trainable copy are
//! pulled back.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{ensure_finite, Error, Result};
use crate::flow::{cfg_velocity, NoisedSample};
use crate::reward::GroupBatch;
use crate::tensor::{forward, Cond, Node, ParamSet, Tape};

/// Softmax temperature for the centering weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Temperature {
    Finite(f64),
    /// Uniform weights.
    Infinite,
    /// All weight on the highest reward.
    Zero,
}

impl Serialize for Temperature {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Temperature::Finite(v) => s.serialize_f64(*v),
            Temperature::Infinite => s.serialize_str("inf"),
            Temperature::Zero => s.serialize_str("zero"),
        }
    }
}

impl<'de> Deserialize<'de> for Temperature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v.is_infinite() && v > 0.0 => Ok(Temperature::Infinite),
            Raw::Num(v) => Ok(Temperature::Finite(v)),
            Raw::Text(t) => match t.as_str() {
                "inf" | "infinity" => Ok(Temperature::Infinite),
                "zero" | "0" => Ok(Temperature::Zero),
                other => other
                    .parse::<f64>()
                    .map(Temperature::Finite)
                    .map_err(|_| serde::de::Error::custom(format!("bad temperature `{other}`"))),
            },
        }
    }
}

/// Nonnegative weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct CenteringWeights {
    weights: Vec<f64>,
    pub temperature: Temperature,
}

impl CenteringWeights {
    /// Wraps explicit weights (temperature recorded as infinite).
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidInput("centering weights must be >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "centering weights sum to {total}, not 1"
            )));
        }
        Ok(Self {
            weights,
            temperature: Temperature::Infinite,
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weighted_mean(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// `w_i ∝ exp(r_i / tau)`, evaluated with the maximum subtracted.
pub fn softmax_weights(rewards: &[f64], tau: Temperature) -> Result<CenteringWeights> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::InvalidInput(format!(
            "centering needs at least 2 samples, got {k}"
        )));
    }
    let weights = match tau {
        Temperature::Infinite => vec![1.0 / k as f64; k],
        Temperature::Zero => {
            let mut best = 0;
            for i in 1..k {
                if rewards[i] > rewards[best] {
                    best = i;
                }
            }
            let mut w = vec![0.0; k];
            w[best] = 1.0;
            w
        }
        Temperature::Finite(tau) => {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "temperature must be a positive real, got {tau}"
                )));
            }
            let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = rewards.iter().map(|r| ((r - max) / tau).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        }
    };
    Ok(CenteringWeights {
        weights,
        temperature: tau,
    })
}

/// `values_i - sum_j w_j values_j`.
pub fn centered_residuals(values: &[f64], weights: &CenteringWeights) -> Result<Vec<f64>> {
    if values.len() != weights.len() {
        return Err(Error::shape("centered values", weights.len(), values.len()));
    }
    let mean = weights.weighted_mean(values);
    Ok(values.iter().map(|v| v - mean).collect())
}

/// `(1/K) sum_i (Δr_i - ΔR_i)^2` with the implicit rewards as free variables.
pub fn crd_residual_loss(rewards: &[f64], implicit: &[f64], weights: &CenteringWeights) -> Result<f64> {
    let (loss, _) = crd_residual(rewards, implicit, weights)?;
    Ok(loss)
}

/// Gradient of [`crd_residual_loss`] with respect to the implicit rewards.
pub fn crd_residual_grad(rewards: &[f64], implicit: &[f64], weights: &CenteringWeights) -> Result<Vec<f64>> {
    let (_, grad) = crd_residual(rewards, implicit, weights)?;
    Ok(grad)
}

fn crd_residual(rewards: &[f64], implicit: &[f64], weights: &CenteringWeights) -> Result<(f64, Vec<f64>)> {
    if implicit.len() != rewards.len() {
        return Err(Error::shape("implicit rewards", rewards.len(), implicit.len()));
    }
    let dr = centered_residuals(rewards, weights)?;
    let dq = centered_residuals(implicit, weights)?;
    let k = rewards.len() as f64;
    let u: Vec<f64> = dr.iter().zip(&dq).map(|(a, b)| a - b).collect();
    let loss = u.iter().map(|v| v * v).sum::<f64>() / k;
    let u_sum: f64 = u.iter().sum();
    let grad = u
        .iter()
        .zip(weights.as_slice())
        .map(|(uj, wj)| -2.0 / k * (uj - wj * u_sum))
        .collect();
    Ok((loss, grad))
}

/// `½((r1 - r2) - (R1 - R2))²`.
pub fn two_sample_distill_loss(r1: f64, r2: f64, big_r1: f64, big_r2: f64) -> f64 {
    let u = (r1 - r2) - (big_r1 - big_r2);
    0.5 * u * u
}

/// Cross-entropy and KL between the weighted softmaxes of `r / beta` and
/// `r_theta / beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoNca {
    pub cross_entropy: f64,
    pub kl: f64,
    pub teacher: Vec<f64>,
    pub student: Vec<f64>,
    /// d cross_entropy / d r_theta.
    pub grad: Vec<f64>,
}

fn weighted_log_softmax(scores: &[f64], beta: f64, weights: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = scores
        .iter()
        .zip(weights)
        .map(|(s, w)| if *w > 0.0 { w.ln() + s / beta } else { f64::NEG_INFINITY })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn infonca_loss(rewards: &[f64], r_theta: &[f64], beta: f64, weights: &[f64]) -> Result<InfoNca> {
    let k = rewards.len();
    if k < 2 || r_theta.len() != k || weights.len() != k {
        return Err(Error::InvalidInput(format!(
            "InfoNCA needs matching lengths >= 2 (got {k}, {}, {})",
            r_theta.len(),
            weights.len()
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidInput(format!("InfoNCA beta must be > 0, got {beta}")));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) || weights.iter().all(|&w| w == 0.0) {
        return Err(Error::InvalidInput("InfoNCA weights must be >= 0, not all zero".into()));
    }
    let log_q_star = weighted_log_softmax(rewards, beta, weights);
    let log_q = weighted_log_softmax(r_theta, beta, weights);
    let teacher: Vec<f64> = log_q_star.iter().map(|l| l.exp()).collect();
    let student: Vec<f64> = log_q.iter().map(|l| l.exp()).collect();
    let mut ce = 0.0;
    let mut entropy = 0.0;
    for i in 0..k {
        if teacher[i] > 0.0 {
            ce -= teacher[i] * log_q[i];
            entropy -= teacher[i] * log_q_star[i];
        }
    }
    let grad = teacher
        .iter()
        .zip(&student)
        .map(|(p, q)| (q - p) / beta)
        .collect();
    Ok(InfoNca {
        cross_entropy: ce,
        kl: ce - entropy,
        teacher,
        student,
        grad,
    })
}

/// Implicit-reward estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// `||v - v_target||²`.
    Plain,
    /// `d ||v - v_target||² / sg(||v - v_target||_1)`.
    AdaptiveV,
    /// The adaptive term times `t`.
    AdaptiveX0,
}

impl Estimator {
    pub fn is_adaptive(self) -> bool {
        !matches!(self, Estimator::Plain)
    }
}

pub const L1_FLOOR: f64 = 1e-8;

/// How the stop-gradient denominators of the adaptive estimators are obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum StopGrad {
    /// From the current trainable velocities.
    Live,
    /// Held at given values (`[sample][draw]`), as a constant would be.
    Frozen(Vec<Vec<f64>>),
}

/// `max(||v - v_target||_1, 1e-8)`.
pub fn l1_denominator(v: &[f64], v_target: &[f64]) -> f64 {
    v.iter()
        .zip(v_target)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        .max(L1_FLOOR)
}

/// Per-draw error term and its derivative with respect to `v`.
fn error_term(
    v: &[f64],
    noised: &NoisedSample,
    estimator: Estimator,
    denominator: Option<f64>,
) -> (f64, Vec<f64>) {
    let e: Vec<f64> = v.iter().zip(&noised.v_target).map(|(a, b)| a - b).collect();
    let sq: f64 = e.iter().map(|x| x * x).sum();
    let scale = match estimator {
        Estimator::Plain => 1.0,
        Estimator::AdaptiveV | Estimator::AdaptiveX0 => {
            let d = v.len() as f64;
            let den = denominator.unwrap_or_else(|| l1_denominator(v, &noised.v_target));
            let s = d / den;
            if estimator == Estimator::AdaptiveX0 {
                s * noised.t
            } else {
                s
            }
        }
    };
    (scale * sq, e.iter().map(|x| 2.0 * scale * x).collect())
}

/// Implicit rewards of a group and their derivatives.
#[derive(Clone, Debug)]
pub struct ImplicitRewards {
    pub values: Vec<f64>,
    pub beta_old: f64,
    pub estimator: Estimator,
    /// `d values[i] / d v_theta` for each draw of sample `i`.
    dv: Vec<Vec<Vec<f64>>>,
}

/// Trainable velocities for every draw, `[sample][draw]`.
fn theta_nodes(tape: &mut Tape<'_>, group: &GroupBatch) -> Result<Vec<Vec<Node>>> {
    let cond = group.cond();
    group
        .noised
        .iter()
        .map(|draws| {
            draws
                .iter()
                .map(|n| tape.velocity(&n.x_t, n.t, cond))
                .collect()
        })
        .collect()
}

fn implicit_from_nodes(
    nodes: &[Vec<Node>],
    old: &ParamSet,
    group: &GroupBatch,
    beta_old: f64,
    estimator: Estimator,
    stop_grad: &StopGrad,
) -> Result<ImplicitRewards> {
    let cond = group.cond();
    let mut values = Vec::with_capacity(nodes.len());
    let mut dv = Vec::with_capacity(nodes.len());
    for (i, (draws, sample_nodes)) in group.noised.iter().zip(nodes).enumerate() {
        let m = draws.len() as f64;
        let mut value = 0.0;
        let mut grads = Vec::with_capacity(draws.len());
        for (j, (n, node)) in draws.iter().zip(sample_nodes).enumerate() {
            let frozen = match stop_grad {
                StopGrad::Live => None,
                StopGrad::Frozen(d) => Some(d[i][j]),
            };
            let (term_theta, d_theta) = error_term(&node.value, n, estimator, frozen);
            let v_old = forward(old, &n.x_t, n.t, cond)?;
            let (term_old, _) = error_term(&v_old, n, estimator, None);
            value += -beta_old * (term_theta - term_old) / m;
            grads.push(d_theta.into_iter().map(|g| -beta_old * g / m).collect());
        }
        values.push(ensure_finite("implicit_reward", value)?);
        dv.push(grads);
    }
    Ok(ImplicitRewards {
        values,
        beta_old,
        estimator,
        dv,
    })
}

/// Stop-gradient denominators of the trainable copy, `[sample][draw]`.
pub fn theta_denominators(theta: &ParamSet, group: &GroupBatch) -> Result<Vec<Vec<f64>>> {
    let cond = group.cond();
    group
        .noised
        .iter()
        .map(|draws| {
            draws
                .iter()
                .map(|n| Ok(l1_denominator(&forward(theta, &n.x_t, n.t, cond)?, &n.v_target)))
                .collect()
        })
        .collect()
}

/// Single-draw implicit reward `R̂` of `theta` against `old`.
pub fn implicit_reward(
    theta: &ParamSet,
    old: &ParamSet,
    noised: &NoisedSample,
    cond: Cond,
    beta_old: f64,
    estimator: Estimator,
) -> Result<f64> {
    theta.ensure_same_layout(old)?;
    let v_theta = forward(theta, &noised.x_t, noised.t, cond)?;
    let v_old = forward(old, &noised.x_t, noised.t, cond)?;
    let (a, _) = error_term(&v_theta, noised, estimator, None);
    let (b, _) = error_term(&v_old, noised, estimator, None);
    ensure_finite("implicit_reward", -beta_old * (a - b))
}

/// Implicit rewards of every group member (draw-averaged).
pub fn group_implicit_rewards(
    theta: &ParamSet,
    old: &ParamSet,
    group: &GroupBatch,
    beta_old: f64,
    estimator: Estimator,
) -> Result<Vec<f64>> {
    let mut tape = Tape::inference(theta);
    let nodes = theta_nodes(&mut tape, group)?;
    Ok(implicit_from_nodes(&nodes, old, group, beta_old, estimator, &StopGrad::Live)?.values)
}

/// Which reward-matching loss drives training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Crd,
    Infonca,
    TwoSample,
}

/// Coefficients of the full objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub loss: LossKind,
    pub estimator: Estimator,
    pub beta_old: f64,
    pub tau: Temperature,
    pub beta_init: f64,
    pub adaptive_kl: bool,
    pub cfg_scale: f64,
    pub infonca_beta: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Crd,
            estimator: Estimator::AdaptiveV,
            beta_old: 1.0,
            tau: Temperature::Infinite,
            beta_init: 0.05,
            adaptive_kl: true,
            cfg_scale: 3.0,
            infonca_beta: 1.0,
        }
    }
}

/// Value of the main term plus the cotangent for each implicit reward.
fn main_term(kind: LossKind, group: &GroupBatch, implicit: &[f64], cfg: &ObjectiveConfig) -> Result<(f64, Vec<f64>)> {
    match kind {
        LossKind::Crd => {
            let w = softmax_weights(&group.rewards, cfg.tau)?;
            crd_residual(&group.rewards, implicit, &w)
        }
        LossKind::TwoSample => {
            if group.len() != 2 {
                return Err(Error::InvalidInput(format!(
                    "two-sample loss needs groups of 2, got {}",
                    group.len()
                )));
            }
            let r = &group.rewards;
            let u = (r[0] - r[1]) - (implicit[0] - implicit[1]);
            Ok((0.5 * u * u, vec![-u, u]))
        }
        LossKind::Infonca => {
            let ones = vec![1.0; group.len()];
            let nca = infonca_loss(&group.rewards, implicit, cfg.infonca_beta, &ones)?;
            Ok((nca.cross_entropy, nca.grad))
        }
    }
}

fn pull_main(tape: &mut Tape<'_>, nodes: &[Vec<Node>], implicit: &ImplicitRewards, d_implicit: &[f64]) -> Result<()> {
    for ((sample_nodes, dv), &g) in nodes.iter().zip(&implicit.dv).zip(d_implicit) {
        for (node, d) in sample_nodes.iter().zip(dv) {
            let cot: Vec<f64> = d.iter().map(|x| g * x).collect();
            tape.pullback(node, &cot)?;
        }
    }
    Ok(())
}

/// Reward-matching loss of one group under `kind`.
pub fn matching_loss(
    tape: &mut Tape<'_>,
    old: &ParamSet,
    group: &GroupBatch,
    cfg: &ObjectiveConfig,
    stop_grad: &StopGrad,
) -> Result<f64> {
    tape.params().ensure_same_layout(old)?;
    let nodes = theta_nodes(tape, group)?;
    let implicit = implicit_from_nodes(&nodes, old, group, cfg.beta_old, cfg.estimator, stop_grad)?;
    let (loss, d_implicit) = main_term(cfg.loss, group, &implicit.values, cfg)?;
    pull_main(tape, &nodes, &implicit, &d_implicit)?;
    ensure_finite("matching_loss", loss)
}

/// Centered reward-matching loss with centering weights from the normalized
/// rewards.
pub fn crd_loss(
    tape: &mut Tape<'_>,
    old: &ParamSet,
    group: &GroupBatch,
    beta_old: f64,
    tau: Temperature,
    estimator: Estimator,
    stop_grad: &StopGrad,
) -> Result<f64> {
    let cfg = ObjectiveConfig {
        loss: LossKind::Crd,
        estimator,
        beta_old,
        tau,
        ..Default::default()
    };
    matching_loss(tape, old, group, &cfg, stop_grad)
}

/// Per-sample pieces of the anchoring term.
#[derive(Clone, Debug, PartialEq)]
pub struct KlAnchorTerm {
    pub loss: f64,
    pub beta_init: f64,
    pub adaptive: bool,
    pub cfg_scale: f64,
    /// `r_raw_i * beta_init` when adaptive, else `beta_init`.
    pub beta_hat: Vec<f64>,
    /// Draw-averaged `||v_theta - v_phi^CFG||²` per sample.
    pub sq_dist: Vec<f64>,
}

/// `beta_init` scaled per sample.
pub fn adaptive_beta(raw_rewards: &[f64], beta_init: f64, adaptive: bool) -> Vec<f64> {
    raw_rewards
        .iter()
        .map(|&r| if adaptive { r * beta_init } else { beta_init })
        .collect()
}

fn kl_from_nodes(
    tape: &mut Tape<'_>,
    nodes: &[Vec<Node>],
    phi: &ParamSet,
    group: &GroupBatch,
    s: f64,
    beta_init: f64,
    adaptive: bool,
) -> Result<KlAnchorTerm> {
    let cond = group.cond();
    let k = group.len() as f64;
    let beta_hat = adaptive_beta(&group.raw_rewards, beta_init, adaptive);
    let mut loss = 0.0;
    let mut sq_dist = Vec::with_capacity(group.len());
    for ((draws, sample_nodes), &b) in group.noised.iter().zip(nodes).zip(&beta_hat) {
        let m = draws.len() as f64;
        let mut dist = 0.0;
        for (n, node) in draws.iter().zip(sample_nodes) {
            let v_cond = forward(phi, &n.x_t, n.t, cond)?;
            let v_ref = if s == 1.0 {
                v_cond
            } else {
                let v_uncond = forward(phi, &n.x_t, n.t, Cond::Null)?;
                cfg_velocity(&v_cond, &v_uncond, s)
            };
            let diff: Vec<f64> = node.value.iter().zip(&v_ref).map(|(a, b)| a - b).collect();
            dist += diff.iter().map(|d| d * d).sum::<f64>() / m;
            if b != 0.0 {
                let cot: Vec<f64> = diff.iter().map(|d| 2.0 * b * d / (k * m)).collect();
                tape.pullback(node, &cot)?;
            }
        }
        loss += b * dist / k;
        sq_dist.push(dist);
    }
    Ok(KlAnchorTerm {
        loss: ensure_finite("kl_anchor_loss", loss)?,
        beta_init,
        adaptive,
        cfg_scale: s,
        beta_hat,
        sq_dist,
    })
}

/// `(1/K) sum_i beta_hat_i ||v_theta - v_phi^CFG||²` on the group's draws.
pub fn kl_anchor_loss(
    tape: &mut Tape<'_>,
    phi: &ParamSet,
    group: &GroupBatch,
    s: f64,
    beta_init: f64,
    adaptive: bool,
) -> Result<KlAnchorTerm> {
    tape.params().ensure_same_layout(phi)?;
    let nodes = theta_nodes(tape, group)?;
    kl_from_nodes(tape, &nodes, phi, group, s, beta_init, adaptive)
}

/// Everything the full objective reports for one group.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    pub matching: f64,
    pub kl: KlAnchorTerm,
    pub implicit: Vec<f64>,
}

/// Matching loss plus anchoring term, sharing one trainable forward per draw.
pub fn total_loss(
    tape: &mut Tape<'_>,
    old: &ParamSet,
    phi: &ParamSet,
    group: &GroupBatch,
    cfg: &ObjectiveConfig,
    stop_grad: &StopGrad,
) -> Result<LossBreakdown> {
    tape.params().ensure_same_layout(old)?;
    tape.params().ensure_same_layout(phi)?;
    let nodes = theta_nodes(tape, group)?;
    let implicit = implicit_from_nodes(&nodes, old, group, cfg.beta_old, cfg.estimator, stop_grad)?;
    let (matching, d_implicit) = main_term(cfg.loss, group, &implicit.values, cfg)?;
    let matching = ensure_finite("matching_loss", matching)?;
    pull_main(tape, &nodes, &implicit, &d_implicit)?;
    let kl = kl_from_nodes(tape, &nodes, phi, group, cfg.cfg_scale, cfg.beta_init, cfg.adaptive_kl)?;
    Ok(LossBreakdown {
        total: ensure_finite("total_loss", matching + kl.loss)?,
        matching,
        kl,
        implicit: implicit.values,
    })
}
