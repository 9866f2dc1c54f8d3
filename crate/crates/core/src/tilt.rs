//! Exact exponential tilting of finite distributions, used to check the
//! optimum, normalizer and repeated-tilting identities in closed form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Probability vector over labelled atoms.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscreteDist {
    probs: Vec<f64>,
    labels: Vec<String>,
}

pub const NORMALIZATION_TOL: f64 = 1e-12;

impl DiscreteDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let labels = (0..probs.len()).map(|i| format!("x{i}")).collect();
        Self::with_labels(probs, labels)
    }

    pub fn with_labels(probs: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("distribution needs at least one atom".into()));
        }
        if labels.len() != probs.len() {
            return Err(Error::shape("atom labels", probs.len(), labels.len()));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput("probabilities must be finite and >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidInput(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs, labels })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidInput("weights must be >= 0 with a positive finite sum".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(m: usize) -> Result<Self> {
        Self::from_weights(&vec![1.0; m])
    }

    fn from_log_probs(log_probs: &[f64], labels: Vec<String>) -> Self {
        Self {
            probs: log_probs.iter().map(|l| l.exp()).collect(),
            labels,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }
}

fn log_sum_exp(a: &[f64]) -> f64 {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + a.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Result of one tilt: the tilted distribution, its log-probabilities and
/// `log Z = log sum_j p_ref_j exp(r_j / beta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tilted {
    pub dist: DiscreteDist,
    pub log_probs: Vec<f64>,
    pub log_z: f64,
}

fn check_tilt_args(p: &DiscreteDist, r: &[f64], beta: f64) -> Result<()> {
    if r.len() != p.len() {
        return Err(Error::shape("rewards", p.len(), r.len()));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidInput(format!("beta must be positive, got {beta}")));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("rewards must be finite".into()));
    }
    Ok(())
}

fn tilt_log(log_p: &[f64], r: &[f64], scale: f64, labels: Vec<String>) -> Tilted {
    let a: Vec<f64> = log_p.iter().zip(r).map(|(l, ri)| l + scale * ri).collect();
    let log_z = log_sum_exp(&a);
    let log_probs: Vec<f64> = a.iter().map(|x| x - log_z).collect();
    Tilted {
        dist: DiscreteDist::from_log_probs(&log_probs, labels),
        log_probs,
        log_z,
    }
}

/// `p*_i = p_ref_i exp(r_i / beta) / Z`, in log space.
pub fn tilt(p_ref: &DiscreteDist, r: &[f64], beta: f64) -> Result<Tilted> {
    check_tilt_args(p_ref, r, beta)?;
    Ok(tilt_log(&p_ref.log_probs(), r, 1.0 / beta, p_ref.labels.clone()))
}

/// Tilts `epochs` times, each time using the previous output as the
/// reference. Carries log-probabilities between epochs.
pub fn iterate_tilt(p0: &DiscreteDist, r: &[f64], beta: f64, epochs: usize) -> Result<Tilted> {
    check_tilt_args(p0, r, beta)?;
    let mut log_p = p0.log_probs();
    let mut log_z = 0.0;
    for _ in 0..epochs {
        let step = tilt_log(&log_p, r, 1.0 / beta, Vec::new());
        log_p = step.log_probs;
        log_z += step.log_z;
    }
    Ok(Tilted {
        dist: DiscreteDist::from_log_probs(&log_p, p0.labels.clone()),
        log_probs: log_p,
        log_z,
    })
}

/// One tilt with exponent `epochs * r / beta`.
pub fn tilt_with_exponent(p0: &DiscreteDist, r: &[f64], beta: f64, epochs: usize) -> Result<Tilted> {
    check_tilt_args(p0, r, beta)?;
    Ok(tilt_log(&p0.log_probs(), r, epochs as f64 / beta, p0.labels.clone()))
}

/// Worst violation of `r_i = beta log(p*_i / p_ref_i) + beta log Z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioCheck {
    pub max_deviation: f64,
    /// Atoms skipped because either probability is zero.
    pub excluded: usize,
}

pub fn verify_ratio_identity(
    p_ref: &DiscreteDist,
    p_star: &DiscreteDist,
    r: &[f64],
    beta: f64,
    log_z: f64,
) -> Result<RatioCheck> {
    check_tilt_args(p_ref, r, beta)?;
    if p_star.len() != p_ref.len() {
        return Err(Error::shape("tilted distribution", p_ref.len(), p_star.len()));
    }
    let mut max_deviation: f64 = 0.0;
    let mut excluded = 0;
    for ((&pr, &ps), &ri) in p_ref.probs.iter().zip(&p_star.probs).zip(r) {
        if pr == 0.0 || ps == 0.0 {
            excluded += 1;
            continue;
        }
        let dev = (ri - beta * (ps.ln() - pr.ln()) - beta * log_z).abs();
        max_deviation = max_deviation.max(dev);
    }
    if excluded > 0 {
        log::warn!("ratio identity: {excluded} zero-probability atom(s) excluded");
    }
    Ok(RatioCheck {
        max_deviation,
        excluded,
    })
}

/// Largest gap between centered rewards `r_i - sum_j w_j r_j` and centered
/// log-ratios `l_i - sum_j w_j l_j`, `l = beta log(p*/p_ref)`. The normalizer
/// never enters.
pub fn centered_ratio_deviation(
    p_ref: &DiscreteDist,
    p_star: &DiscreteDist,
    r: &[f64],
    beta: f64,
    weights: &[f64],
) -> Result<f64> {
    check_tilt_args(p_ref, r, beta)?;
    if weights.len() != r.len() || p_star.len() != r.len() {
        return Err(Error::shape("centering weights", r.len(), weights.len()));
    }
    let l: Vec<f64> = p_star
        .probs
        .iter()
        .zip(&p_ref.probs)
        .map(|(ps, pr)| beta * (ps.ln() - pr.ln()))
        .collect();
    if l.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("centered check needs strictly positive distributions".into()));
    }
    let mean_r: f64 = weights.iter().zip(r).map(|(w, v)| w * v).sum();
    let mean_l: f64 = weights.iter().zip(&l).map(|(w, v)| w * v).sum();
    Ok(r.iter()
        .zip(&l)
        .map(|(ri, li)| ((ri - mean_r) - (li - mean_l)).abs())
        .fold(0.0, f64::max))
}

/// Total variation and KL(p || q).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistMetrics {
    pub tv: f64,
    pub kl: f64,
    /// `q` is zero somewhere `p` is not; `kl` is then `+inf`.
    pub kl_infinite: bool,
}

pub fn dist_metrics(p: &DiscreteDist, q: &DiscreteDist) -> Result<DistMetrics> {
    if p.len() != q.len() {
        return Err(Error::shape("distribution support", p.len(), q.len()));
    }
    let tv = 0.5 * p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let mut kl = 0.0;
    let mut kl_infinite = false;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            kl_infinite = true;
            continue;
        }
        kl += a * (a.ln() - b.ln());
    }
    Ok(DistMetrics {
        tv,
        kl: if kl_infinite { f64::INFINITY } else { kl },
        kl_infinite,
    })
}

/// Outcome of one closed-form check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub cases: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleCheck {
    fn new(name: &str, cases: usize, max_deviation: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            cases,
            max_deviation,
            tolerance,
            passed: max_deviation <= tolerance,
        }
    }
}

fn random_dist(rng: &mut impl Rng, m: usize) -> DiscreteDist {
    let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
    DiscreteDist::from_weights(&w).expect("positive weights")
}

/// Runs every tilting identity over randomized instances.
pub fn run_oracle_suite(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (mut norm, mut ratio, mut centered, mut cases) = (0.0_f64, 0.0_f64, 0.0_f64, 0);
    for m in 2..=64 {
        for _ in 0..8 {
            let p = random_dist(&mut rng, m);
            let r: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let beta = rng.random_range(0.05..5.0);
            let t = tilt(&p, &r, beta)?;
            norm = norm.max((t.dist.probs.iter().sum::<f64>() - 1.0).abs());
            ratio = ratio.max(verify_ratio_identity(&p, &t.dist, &r, beta, t.log_z)?.max_deviation);
            let w = random_dist(&mut rng, m);
            centered = centered.max(centered_ratio_deviation(&p, &t.dist, &r, beta, w.probs())?);
            cases += 1;
        }
    }
    out.push(OracleCheck::new("tilt normalization", cases, norm, NORMALIZATION_TOL));
    out.push(OracleCheck::new("ratio identity", cases, ratio, 1e-10));
    out.push(OracleCheck::new("centered ratio identity", cases, centered, 1e-10));

    let (mut compose, mut monotone_violation, mut cases) = (0.0_f64, 0.0_f64, 0);
    for m in 2..=64 {
        let p = random_dist(&mut rng, m);
        let r: Vec<f64> = (0..m).map(|_| rng.random()).collect();
        let beta = rng.random_range(0.5..4.0);
        let best = (0..m).max_by(|&a, &b| r[a].total_cmp(&r[b])).expect("m >= 2");
        let mut log_p = p.log_probs();
        let mut prev_mass = p.probs[best];
        for k in 1..=100 {
            log_p = tilt_log(&log_p, &r, 1.0 / beta, Vec::new()).log_probs;
            let single = tilt_with_exponent(&p, &r, beta, k)?;
            let dev = log_p
                .iter()
                .zip(&single.log_probs)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            compose = compose.max(dev);
            let mass = log_p[best].exp();
            monotone_violation = monotone_violation.max(prev_mass - mass);
            prev_mass = mass;
            cases += 1;
        }
    }
    out.push(OracleCheck::new("repeated tilt = single tilt (log space)", cases, compose, 1e-10));
    out.push(OracleCheck::new("argmax mass non-decreasing in epochs", cases, monotone_violation, 0.0));
    Ok(out)
}
