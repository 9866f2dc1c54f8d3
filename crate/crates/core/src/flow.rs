//! Linear-interpolation forward process, flow-matching pretraining loss,
//! guided velocities and the Euler ODE sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::tensor::{forward, Cond, ParamSet, Tape};

/// A clean sample pushed to time `t` along the straight path to `eps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisedSample {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub x_t: Vec<f64>,
    pub v_target: Vec<f64>,
}

/// `x_t = t eps + (1 - t) x0`, `v_target = eps - x0`.
pub fn forward_diffuse(x0: &[f64], t: f64, eps: &[f64]) -> Result<NoisedSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("diffusion time {t} outside [0, 1]")));
    }
    if x0.len() != eps.len() {
        return Err(Error::shape("noise", x0.len(), eps.len()));
    }
    let x_t = x0.iter().zip(eps).map(|(&x, &e)| t * e + (1.0 - t) * x).collect();
    let v_target = x0.iter().zip(eps).map(|(&x, &e)| e - x).collect();
    Ok(NoisedSample {
        x0: x0.to_vec(),
        eps: eps.to_vec(),
        t,
        x_t,
        v_target,
    })
}

pub fn standard_normal(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws `t ~ U[0, 1]`, `eps ~ N(0, I)` and diffuses `x0`.
pub fn draw_noised(rng: &mut impl Rng, x0: &[f64]) -> NoisedSample {
    let t: f64 = rng.random();
    let eps = standard_normal(rng, x0.len());
    forward_diffuse(x0, t, &eps).expect("t drawn from [0, 1)")
}

/// One pretraining example.
#[derive(Clone, Debug)]
pub struct PretrainItem {
    pub cond: Cond,
    pub noised: NoisedSample,
}

/// Builds a pretraining batch, replacing the prompt by the null prompt with
/// probability `p_uncond`.
pub fn draw_pretrain_batch(
    rng: &mut impl Rng,
    clean: &[(Vec<f64>, usize)],
    p_uncond: f64,
) -> Vec<PretrainItem> {
    clean
        .iter()
        .map(|(x0, c)| {
            let cond = if rng.random::<f64>() < p_uncond {
                Cond::Null
            } else {
                Cond::Prompt(*c)
            };
            PretrainItem {
                cond,
                noised: draw_noised(rng, x0),
            }
        })
        .collect()
}

/// Mean over the batch of `||v(x_t, t | c) - v_target||^2`.
pub fn fm_pretrain_loss(tape: &mut Tape<'_>, batch: &[PretrainItem]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty pretraining batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for item in batch {
        let n = &item.noised;
        let node = tape.velocity(&n.x_t, n.t, item.cond)?;
        let diff: Vec<f64> = node.value.iter().zip(&n.v_target).map(|(v, y)| v - y).collect();
        total += diff.iter().map(|d| d * d).sum::<f64>();
        let cot: Vec<f64> = diff.iter().map(|d| 2.0 * scale * d).collect();
        tape.pullback(&node, &cot)?;
    }
    ensure_finite("fm_pretrain_loss", total * scale)
}

/// Guided velocity `v_uncond + s (v_cond - v_uncond)`.
///
/// `s = 1` and `s = 0` return the corresponding input unchanged.
pub fn cfg_velocity(v_cond: &[f64], v_uncond: &[f64], s: f64) -> Vec<f64> {
    debug_assert_eq!(v_cond.len(), v_uncond.len());
    if s == 1.0 {
        return v_cond.to_vec();
    }
    if s == 0.0 {
        return v_uncond.to_vec();
    }
    v_cond
        .iter()
        .zip(v_uncond)
        .map(|(&c, &u)| u + s * (c - u))
        .collect()
}

/// Velocity of `params` at `(x, t)` under guidance scale `s` (no unconditional
/// pass when `s == 1`).
pub fn guided_velocity(params: &ParamSet, x: &[f64], t: f64, cond: Cond, s: f64) -> Result<Vec<f64>> {
    if s == 1.0 || cond == Cond::Null {
        return forward(params, x, t, cond);
    }
    let v_cond = forward(params, x, t, cond)?;
    let v_uncond = forward(params, x, t, Cond::Null)?;
    Ok(cfg_velocity(&v_cond, &v_uncond, s))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::InvalidInput("sampler needs at least one step".into()));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "guidance scale {} must be >= 0",
                self.cfg_scale
            )));
        }
        Ok(())
    }
}

/// Integrates `dx/dt = v(x, t)` from `t = 1` down to `t = 0` with `num_steps`
/// uniform Euler steps.
pub fn euler_integrate<F>(x1: &[f64], num_steps: usize, mut velocity: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if num_steps == 0 {
        return Err(Error::InvalidInput("sampler needs at least one step".into()));
    }
    let dt = 1.0 / num_steps as f64;
    let mut x = x1.to_vec();
    for k in 0..num_steps {
        let t = (num_steps - k) as f64 / num_steps as f64;
        let v = velocity(&x, t)?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi -= dt * vi;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Sampling { step: k, t });
        }
    }
    Ok(x)
}

/// Per-member noise stream so members can be generated in any order.
pub fn member_rng(seed: u64, member: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member as u64);
    rng
}

/// Draws `n` initial states `x1 ~ N(0, I)` and integrates each to `t = 0`.
pub fn ode_sample(params: &ParamSet, cond: Cond, n: usize, cfg: &SamplerConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput("group size must be at least 1".into()));
    }
    let dim = params.spec().data_dim;
    (0..n)
        .map(|j| {
            let x1 = standard_normal(&mut member_rng(cfg.seed, j), dim);
            euler_integrate(&x1, cfg.num_steps, |x, t| {
                guided_velocity(params, x, t, cond, cfg.cfg_scale)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad, Activation, MlpSpec};
    use proptest::prelude::*;

    fn spec() -> MlpSpec {
        MlpSpec {
            data_dim: 1,
            time_embed_dim: 2,
            num_prompts: 1,
            hidden: vec![4],
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn diffusion_endpoints() {
        let n0 = forward_diffuse(&[0.3, -2.0], 0.0, &[1.0, 0.5]).unwrap();
        assert_eq!(n0.x_t, vec![0.3, -2.0]);
        assert_eq!(n0.v_target, vec![0.7, 2.5]);
        let n1 = forward_diffuse(&[0.3, -2.0], 1.0, &[1.0, 0.5]).unwrap();
        assert_eq!(n1.x_t, vec![1.0, 0.5]);
    }

    #[test]
    fn diffusion_midpoint_by_hand() {
        let n = forward_diffuse(&[0.0], 0.5, &[2.0]).unwrap();
        assert_eq!(n.x_t, vec![1.0]);
        assert_eq!(n.v_target, vec![2.0]);
    }

    #[test]
    fn diffusion_rejects_time_outside_unit_interval() {
        assert!(forward_diffuse(&[0.0], -0.1, &[0.0]).is_err());
        assert!(forward_diffuse(&[0.0], 1.01, &[0.0]).is_err());
    }

    #[test]
    fn identities_hold_for_many_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let x0 = standard_normal(&mut rng, 2);
            let n = draw_noised(&mut rng, &x0);
            for d in 0..2 {
                assert_eq!(n.x_t[d], n.t * n.eps[d] + (1.0 - n.t) * n.x0[d]);
                assert_eq!(n.v_target[d], n.eps[d] - n.x0[d]);
            }
        }
    }

    #[test]
    fn guidance_special_scales() {
        assert_eq!(cfg_velocity(&[0.1, 0.3], &[0.7, -0.2], 1.0), vec![0.1, 0.3]);
        assert_eq!(cfg_velocity(&[0.1, 0.3], &[0.7, -0.2], 0.0), vec![0.7, -0.2]);
        assert_eq!(cfg_velocity(&[2.0], &[0.0], 4.5), vec![9.0]);
    }

    #[test]
    fn zero_field_returns_initial_noise() {
        let p = ParamSet::zeros(&spec());
        let cfg = SamplerConfig {
            num_steps: 7,
            cfg_scale: 1.0,
            seed: 5,
        };
        let out = ode_sample(&p, Cond::Prompt(0), 3, &cfg).unwrap();
        for (j, x) in out.iter().enumerate() {
            assert_eq!(*x, standard_normal(&mut member_rng(5, j), 1));
        }
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        for steps in [1, 3, 10, 50] {
            let x = euler_integrate(&[0.25, -1.0], steps, |_, _| Ok(vec![0.5, -0.25])).unwrap();
            assert!((x[0] - (0.25 - 0.5)).abs() < 1e-14);
            assert!((x[1] - (-1.0 + 0.25)).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_field_matches_recurrence() {
        let steps = 20;
        let x = euler_integrate(&[1.3], steps, |x, _| Ok(x.to_vec())).unwrap();
        let dt = 1.0 / steps as f64;
        let mut r = 1.3;
        for _ in 0..steps {
            r *= 1.0 - dt;
        }
        assert!((x[0] - r).abs() < 1e-12);
    }

    #[test]
    fn nan_state_is_reported_with_its_step() {
        let err = euler_integrate(&[1.0], 5, |_, t| Ok(vec![if t < 0.7 { f64::NAN } else { 0.0 }])).unwrap_err();
        assert!(matches!(err, Error::Sampling { step: 2, .. }));
    }

    #[test]
    fn unit_guidance_equals_unguided_sampling() {
        let p = ParamSet::init(&spec(), 4);
        let base = SamplerConfig {
            num_steps: 10,
            cfg_scale: 1.0,
            seed: 2,
        };
        let guided = ode_sample(&p, Cond::Prompt(0), 4, &base).unwrap();
        let plain: Vec<Vec<f64>> = (0..4)
            .map(|j| {
                let x1 = standard_normal(&mut member_rng(2, j), 1);
                euler_integrate(&x1, 10, |x, t| forward(&p, x, t, Cond::Prompt(0))).unwrap()
            })
            .collect();
        for (a, b) in guided.iter().zip(&plain) {
            assert_eq!(a[0].to_bits(), b[0].to_bits());
        }
    }

    #[test]
    fn pretrain_loss_zero_when_prediction_is_exact() {
        // Zero net predicts 0; choose items whose target is 0 (eps == x0).
        let p = ParamSet::zeros(&spec());
        let batch = vec![PretrainItem {
            cond: Cond::Prompt(0),
            noised: forward_diffuse(&[0.4], 0.3, &[0.4]).unwrap(),
        }];
        let g = grad(&p, |tape| fm_pretrain_loss(tape, &batch)).unwrap();
        assert_eq!(g.loss, 0.0);
    }

    #[test]
    fn pretrain_loss_single_element_by_hand() {
        // Zero net, x0 = 0.5, eps = -1, t = 0.25: target -1.5, loss 2.25.
        let p = ParamSet::zeros(&spec());
        let batch = vec![PretrainItem {
            cond: Cond::Null,
            noised: forward_diffuse(&[0.5], 0.25, &[-1.0]).unwrap(),
        }];
        let g = grad(&p, |tape| fm_pretrain_loss(tape, &batch)).unwrap();
        assert!((g.loss - 2.25).abs() < 1e-12);
        // Only the output bias sees a nonzero gradient: 2 * (0 - (-1.5)) = 3.
        assert!((g.get("layer1.bias").unwrap()[0] - 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn pretrain_loss_is_nonnegative(seed in 0u64..1000, x in -3.0f64..3.0, e in -3.0f64..3.0, t in 0.0f64..=1.0) {
            let p = ParamSet::init(&spec(), seed);
            let batch = vec![PretrainItem { cond: Cond::Prompt(0), noised: forward_diffuse(&[x], t, &[e]).unwrap() }];
            let g = grad(&p, |tape| fm_pretrain_loss(tape, &batch)).unwrap();
            prop_assert!(g.loss >= 0.0);
        }
    }
}
