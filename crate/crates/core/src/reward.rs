//! Synthetic conditional tasks, bounded analytic rewards, group normalization
//! and best-of-N selection.

use rand::Rng;
use rand::distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{ode_sample, SamplerConfig};
use crate::tensor::{Cond, ParamSet};

/// Isotropic Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mixture {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub sigma: f64,
}

impl Mixture {
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let k = WeightedIndex::new(&self.weights)
            .expect("validated weights")
            .sample(rng);
        self.means[k]
            .iter()
            .map(|m| m + self.sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let dim = self.means[0].len();
        let mut out = vec![0.0; dim];
        for (m, w) in self.means.iter().zip(&self.weights) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }
}

/// Prompt set plus per-prompt ground-truth distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTask {
    pub data_dim: usize,
    pub prompts: Vec<Mixture>,
}

impl ToyTask {
    /// Two equal-weight modes at `-1` and `+1` on the line.
    pub fn two_mode_1d(sigma: f64) -> Self {
        Self {
            data_dim: 1,
            prompts: vec![Mixture {
                means: vec![vec![-1.0], vec![1.0]],
                weights: vec![0.5, 0.5],
                sigma,
            }],
        }
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn sample(&self, rng: &mut impl Rng, prompt: usize) -> Vec<f64> {
        self.prompts[prompt].sample(rng)
    }

    /// Problems with the definition, all of them.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(1..=2).contains(&self.data_dim) {
            out.push(format!("task.data_dim must be 1 or 2, got {}", self.data_dim));
        }
        if self.prompts.is_empty() {
            out.push("task.prompts must not be empty".into());
        }
        for (c, m) in self.prompts.iter().enumerate() {
            if !(m.sigma > 0.0) {
                out.push(format!("task.prompts[{c}].sigma must be > 0"));
            }
            if m.means.is_empty() || m.means.len() != m.weights.len() {
                out.push(format!("task.prompts[{c}] needs one weight per mean"));
            }
            if m.means.iter().any(|mu| mu.len() != self.data_dim) {
                out.push(format!("task.prompts[{c}] has a mean of the wrong dimension"));
            }
            if m.weights.iter().any(|&w| !(w >= 0.0)) || (m.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                out.push(format!("task.prompts[{c}].weights must be nonnegative and sum to 1"));
            }
        }
        out
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// A reward in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardFn {
    /// Sigmoid of the signed distance to the bisector between `preferred`
    /// and `rival`, positive on the preferred side.
    ModePreference {
        preferred: Vec<f64>,
        rival: Vec<f64>,
        smoothness: f64,
    },
    /// Sigmoid of `radius - ||x - center||`.
    TargetRegion {
        center: Vec<f64>,
        radius: f64,
        smoothness: f64,
    },
    /// Sigmoid of the projection onto a unit direction.
    Direction { direction: Vec<f64>, smoothness: f64 },
}

impl RewardFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            RewardFn::ModePreference {
                preferred,
                rival,
                smoothness,
            } => {
                let axis: Vec<f64> = preferred.iter().zip(rival).map(|(p, r)| p - r).collect();
                let norm = dot(&axis, &axis).sqrt();
                let signed: f64 = x
                    .iter()
                    .zip(preferred.iter().zip(rival))
                    .zip(&axis)
                    .map(|((xi, (p, r)), a)| (xi - 0.5 * (p + r)) * a)
                    .sum::<f64>()
                    / norm;
                sigmoid(signed / smoothness)
            }
            RewardFn::TargetRegion {
                center,
                radius,
                smoothness,
            } => sigmoid((radius - dist(x, center)) / smoothness),
            RewardFn::Direction {
                direction,
                smoothness,
            } => {
                let norm = dot(direction, direction).sqrt();
                sigmoid(dot(x, direction) / norm / smoothness)
            }
        }
    }

    fn problems(&self, dim: usize, at: &str) -> Vec<String> {
        let mut out = Vec::new();
        let smooth = match self {
            RewardFn::ModePreference {
                preferred,
                rival,
                smoothness,
            } => {
                if preferred.len() != dim || rival.len() != dim {
                    out.push(format!("{at}: preferred/rival must have dimension {dim}"));
                } else if preferred == rival {
                    out.push(format!("{at}: preferred and rival must differ"));
                }
                *smoothness
            }
            RewardFn::TargetRegion {
                center,
                radius,
                smoothness,
            } => {
                if center.len() != dim {
                    out.push(format!("{at}: center must have dimension {dim}"));
                }
                if !(*radius > 0.0) {
                    out.push(format!("{at}: radius must be > 0"));
                }
                *smoothness
            }
            RewardFn::Direction {
                direction,
                smoothness,
            } => {
                if direction.len() != dim || dot(direction, direction) == 0.0 {
                    out.push(format!("{at}: direction must be a nonzero vector of dimension {dim}"));
                }
                *smoothness
            }
        };
        if !(smooth > 0.0) {
            out.push(format!("{at}: smoothness must be > 0"));
        }
        out
    }
}

/// Reward definition for a task: one function shared by all prompts or one
/// per prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RewardSpec {
    Shared(RewardFn),
    PerPrompt(Vec<RewardFn>),
}

impl RewardSpec {
    pub fn for_prompt(&self, prompt: usize) -> &RewardFn {
        match self {
            RewardSpec::Shared(f) => f,
            RewardSpec::PerPrompt(fs) => &fs[prompt],
        }
    }

    pub fn problems(&self, task: &ToyTask) -> Vec<String> {
        match self {
            RewardSpec::Shared(f) => f.problems(task.data_dim, "reward"),
            RewardSpec::PerPrompt(fs) => {
                let mut out = Vec::new();
                if fs.len() != task.num_prompts() {
                    out.push(format!(
                        "reward: {} functions given for {} prompts",
                        fs.len(),
                        task.num_prompts()
                    ));
                }
                for (c, f) in fs.iter().enumerate() {
                    out.extend(f.problems(task.data_dim, &format!("reward[{c}]")));
                }
                out
            }
        }
    }
}

/// `r_raw(c, x)`.
pub fn eval_reward(spec: &RewardSpec, prompt: usize, x: &[f64]) -> f64 {
    spec.for_prompt(prompt).eval(x)
}

/// One prompt with its `K` generated samples, their rewards and the noised
/// states the loss is evaluated on (`noised[i]` holds the draws for sample `i`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub prompt: usize,
    pub samples: Vec<Vec<f64>>,
    pub raw_rewards: Vec<f64>,
    pub rewards: Vec<f64>,
    pub noised: Vec<Vec<crate::flow::NoisedSample>>,
}

impl GroupBatch {
    /// Normalizes `raw_rewards` within the group and checks the shapes.
    pub fn new(
        prompt: usize,
        samples: Vec<Vec<f64>>,
        raw_rewards: Vec<f64>,
        noised: Vec<Vec<crate::flow::NoisedSample>>,
    ) -> Result<Self> {
        let k = samples.len();
        if k < 2 {
            return Err(Error::InvalidInput(format!("group size must be >= 2, got {k}")));
        }
        if raw_rewards.len() != k {
            return Err(Error::shape("group rewards", k, raw_rewards.len()));
        }
        if noised.len() != k || noised.iter().any(|d| d.is_empty()) {
            return Err(Error::InvalidInput(
                "every group member needs at least one noised draw".into(),
            ));
        }
        let rewards = group_normalize(&raw_rewards)?;
        Ok(Self {
            prompt,
            samples,
            raw_rewards,
            rewards,
            noised,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn cond(&self) -> Cond {
        Cond::Prompt(self.prompt)
    }
}

pub const STD_FLOOR: f64 = 1e-8;

/// `(r - mean) / max(std, 1e-8)` with the population standard deviation.
/// A group of identical rewards maps to all zeros.
pub fn group_normalize(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "group normalization needs at least 2 rewards, got {}",
            raw.len()
        )));
    }
    let k = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / k;
    if raw.iter().all(|&r| r == raw[0]) {
        return Ok(vec![0.0; raw.len()]);
    }
    let var = raw.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / k;
    let std = var.sqrt().max(STD_FLOOR);
    Ok(raw.iter().map(|r| (r - mean) / std).collect())
}

/// Index of the best of the first `n` rewards; ties go to the lowest index.
pub fn bon_select(rewards: &[f64], n: usize) -> Result<usize> {
    if n == 0 || n > rewards.len() {
        return Err(Error::InvalidInput(format!(
            "best-of-N needs 1 <= N <= {}, got {n}",
            rewards.len()
        )));
    }
    let mut best = 0;
    for i in 1..n {
        if rewards[i] > rewards[best] {
            best = i;
        }
    }
    Ok(best)
}

/// One row of a best-of-N curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BonPoint {
    pub n: usize,
    pub mean_best: f64,
    pub mean_reward: f64,
}

/// Averages best-of-N and mean-of-N over independent reward lists, for
/// `N = 1..=n_max`.
pub fn bon_curve_from_rewards(lists: &[Vec<f64>], n_max: usize) -> Result<Vec<BonPoint>> {
    if n_max == 0 {
        return Err(Error::InvalidInput("N_max must be at least 1".into()));
    }
    if lists.is_empty() || lists.iter().any(|l| l.len() < n_max) {
        return Err(Error::InvalidInput(format!(
            "every repeat needs at least {n_max} rewards"
        )));
    }
    let reps = lists.len() as f64;
    Ok((1..=n_max)
        .map(|n| {
            let mut best = 0.0;
            let mut mean = 0.0;
            for l in lists {
                best += l[bon_select(l, n).expect("n checked")];
                mean += l[..n].iter().sum::<f64>() / n as f64;
            }
            BonPoint {
                n,
                mean_best: best / reps,
                mean_reward: mean / reps,
            }
        })
        .collect())
}

/// Best-of-N curve of a velocity model: `repeats` independent draws of
/// `n_max` samples per prompt (prompts cycled), scored with `reward`.
pub fn bon_curve(
    params: &ParamSet,
    task: &ToyTask,
    reward: &RewardSpec,
    n_max: usize,
    repeats: usize,
    sampler: &SamplerConfig,
) -> Result<Vec<BonPoint>> {
    let lists = (0..repeats)
        .map(|rep| {
            let prompt = rep % task.num_prompts();
            let cfg = SamplerConfig {
                seed: sampler.seed.wrapping_add(rep as u64),
                ..*sampler
            };
            let xs = ode_sample(params, Cond::Prompt(prompt), n_max, &cfg)?;
            Ok(xs.iter().map(|x| eval_reward(reward, prompt, x)).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    bon_curve_from_rewards(&lists, n_max)
}

/// Exact `E[max of n i.i.d. draws]` for a discrete reward distribution.
pub fn expected_best_of_n(probs: &[f64], rewards: &[f64], n: usize) -> f64 {
    let mut order: Vec<usize> = (0..rewards.len()).collect();
    order.sort_by(|&a, &b| rewards[a].total_cmp(&rewards[b]));
    let mut cdf_prev = 0.0_f64;
    let mut total = 0.0;
    for &i in &order {
        let cdf = cdf_prev + probs[i];
        total += rewards[i] * (cdf.powi(n as i32) - cdf_prev.powi(n as i32));
        cdf_prev = cdf;
    }
    total
}
