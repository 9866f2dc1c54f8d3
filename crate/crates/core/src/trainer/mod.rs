//! Pretraining, the fine-tuning loop with trainable, reference and rollout
//! copies, evaluation and run orchestration.

mod ema;
mod schedule;

pub use ema::{ema_update, EmaRole, EmaState};
pub use schedule::{Schedule, ScheduleError};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{draw_noised, draw_pretrain_batch, fm_pretrain_loss, guided_velocity, ode_sample, SamplerConfig};
use crate::io::checkpoint::{read_params, write_new, write_params};
use crate::io::metrics::{format_value, MetricsWriter};
use crate::io::{RunConfig, RunDir};
use crate::objectives::{total_loss, KlAnchorTerm, StopGrad};
use crate::reward::{eval_reward, GroupBatch};
use crate::tensor::{forward, grad, value, AdamW, AdamWConfig, Cond, ParamSet};

const PRETRAIN_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

/// Random stream for one `(seed, step, purpose)` triple, so any step can be
/// replayed without replaying the ones before it.
pub fn step_rng(seed: u64, step: usize, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(step as u64).to_le_bytes());
    key[16..24].copy_from_slice(&stream.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Result of pretraining.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub phi: ParamSet,
    /// Minibatch loss of every step.
    pub losses: Vec<f64>,
    /// Loss on a fixed held-out batch before and after training.
    pub held_out_initial: f64,
    pub held_out_final: f64,
}

fn pretrain_batch(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Vec<crate::flow::PretrainItem> {
    let p = &cfg.pretrain;
    let clean: Vec<(Vec<f64>, usize)> = (0..p.batch_size)
        .map(|_| {
            let c = rng.random_range(0..cfg.task.num_prompts());
            (cfg.task.sample(rng, c), c)
        })
        .collect();
    draw_pretrain_batch(rng, &clean, p.p_uncond)
}

/// Trains the velocity network on the task's data with the flow-matching loss.
pub fn pretrain(cfg: &RunConfig) -> Result<Pretrained> {
    let spec = cfg.mlp_spec();
    spec.validate()?;
    let mut params = ParamSet::init(&spec, cfg.seed);
    let mut opt = AdamW::new(
        &params,
        AdamWConfig {
            lr: cfg.pretrain.lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    );
    let held_out = pretrain_batch(cfg, &mut step_rng(cfg.seed, 0, EVAL_STREAM));
    let held_out_initial = value(&params, |tape| fm_pretrain_loss(tape, &held_out))?;
    let mut losses = Vec::with_capacity(cfg.pretrain.steps);
    for step in 0..cfg.pretrain.steps {
        let batch = pretrain_batch(cfg, &mut step_rng(cfg.seed, step, PRETRAIN_STREAM));
        let g = grad(&params, |tape| fm_pretrain_loss(tape, &batch)).map_err(|e| Error::Aborted {
            step,
            reason: format!("pretraining diverged: {e}"),
            dump: None,
        })?;
        opt.step(&mut params, &g.grads)?;
        losses.push(g.loss);
        if (step + 1) % 500 == 0 {
            log::info!("pretrain step {}: loss {:.5}", step + 1, g.loss);
        }
    }
    let held_out_final = value(&params, |tape| fm_pretrain_loss(tape, &held_out))?;
    Ok(Pretrained {
        phi: params,
        losses,
        held_out_initial,
        held_out_final,
    })
}

/// Live state of a fine-tuning run.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Optimizer updates applied so far.
    pub step: usize,
    pub theta: ParamSet,
    pub old: EmaState,
    pub samp: EmaState,
    pub eval_ema: Option<EmaState>,
    /// Frozen pretrained parameters.
    pub phi: ParamSet,
    pub optimizer: AdamW,
}

impl TrainState {
    /// Every copy starts as `phi`.
    pub fn new(phi: ParamSet, cfg: &RunConfig) -> Self {
        let t = &cfg.train;
        Self {
            step: 0,
            theta: phi.clone(),
            old: EmaState::new(phi.clone(), t.eta_old.clone(), EmaRole::Old),
            samp: EmaState::new(phi.clone(), t.eta_samp.clone(), EmaRole::Samp),
            eval_ema: cfg
                .eval
                .ema_decay
                .map(|d| EmaState::new(phi.clone(), Schedule::constant(d), EmaRole::Eval)),
            optimizer: AdamW::new(&phi, cfg.optimizer),
            phi,
        }
    }
}

/// Batch statistics of one step, before the update is applied.
#[derive(Clone, Debug)]
pub struct StepReport {
    /// Index of the update (`0` for the first).
    pub step: usize,
    pub groups: Vec<GroupBatch>,
    pub kl_terms: Vec<KlAnchorTerm>,
    pub implicit: Vec<f64>,
    pub mean_raw_reward: f64,
    pub matching_loss: f64,
    pub kl_loss: f64,
    pub implicit_mean: f64,
    pub implicit_std: f64,
    pub grad_norm: f64,
    pub eta_old: f64,
    pub eta_samp: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Draws the step's groups from the rollout copy: prompts, `K` ODE samples
/// each, rewards, and `(t, eps)` draws per sample.
pub fn sample_groups(samp: &ParamSet, cfg: &RunConfig, step: usize) -> Result<Vec<GroupBatch>> {
    let t = &cfg.train;
    let mut rng = step_rng(cfg.seed, step, TRAIN_STREAM);
    (0..t.groups_per_batch)
        .map(|_| {
            let prompt = rng.random_range(0..cfg.task.num_prompts());
            let sampler = SamplerConfig {
                num_steps: t.sampler_steps,
                cfg_scale: 1.0,
                seed: rng.random(),
            };
            let xs = ode_sample(samp, Cond::Prompt(prompt), t.group_size, &sampler)?;
            let raw = xs.iter().map(|x| eval_reward(&cfg.reward, prompt, x)).collect();
            let noised = xs
                .iter()
                .map(|x| (0..t.draws_per_sample).map(|_| draw_noised(&mut rng, x)).collect())
                .collect();
            GroupBatch::new(prompt, xs, raw, noised)
        })
        .collect()
}

/// Mean objective over `groups` and its gradient with respect to `theta`.
/// Groups are accumulated in order.
/// Group-averaged gradient with the per-group loss pieces.
struct BatchGradient {
    grads: ParamSet,
    matching: Vec<f64>,
    kl_terms: Vec<KlAnchorTerm>,
    implicit: Vec<f64>,
}

fn batch_gradient(state: &TrainState, cfg: &RunConfig, groups: &[GroupBatch]) -> Result<BatchGradient> {
    let objective = cfg.train.objective();
    let scale = 1.0 / groups.len() as f64;
    let mut total = ParamSet::zeros(state.theta.spec());
    let mut matching = Vec::with_capacity(groups.len());
    let mut kl_terms = Vec::with_capacity(groups.len());
    let mut implicit = Vec::new();
    for group in groups {
        let mut breakdown = None;
        let g = grad(&state.theta, |tape| {
            let b = total_loss(tape, &state.old.params, &state.phi, group, &objective, &StopGrad::Live)?;
            let total = b.total;
            breakdown = Some(b);
            Ok(total)
        })?;
        for (acc, v) in total.values_mut().zip(g.grads.values()) {
            *acc += scale * v;
        }
        let b = breakdown.expect("loss closure ran");
        matching.push(b.matching);
        kl_terms.push(b.kl);
        implicit.extend(b.implicit);
    }
    Ok(BatchGradient {
        grads: total,
        matching,
        kl_terms,
        implicit,
    })
}

fn dump_groups(path: &Path, groups: &[GroupBatch]) -> Option<PathBuf> {
    let text = serde_json::to_string_pretty(groups).ok()?;
    match write_new(path, text.as_bytes()) {
        Ok(()) => Some(path.into()),
        Err(e) => {
            log::error!("could not dump offending groups: {e}");
            None
        }
    }
}

/// One optimizer step: rollouts from `samp`, rewards, implicit rewards against
/// `old`, the full objective, an AdamW update of `theta`, then both EMA
/// updates with the step's decays.
///
/// Numeric failures abort with the step's groups written to the run
/// directory's abort dump, when one is given.
pub fn train_step(state: &mut TrainState, cfg: &RunConfig, run_dir: Option<&RunDir>) -> Result<StepReport> {
    let step = state.step;
    let abort = |e: Error, dump: Option<PathBuf>| {
        if e.is_numeric() {
            Error::Aborted {
                step,
                reason: e.to_string(),
                dump,
            }
        } else {
            e
        }
    };
    let groups = sample_groups(&state.samp.params, cfg, step).map_err(|e| abort(e, None))?;
    let BatchGradient {
        grads,
        matching,
        kl_terms,
        implicit,
    } = match batch_gradient(state, cfg, &groups) {
        Ok(r) => r,
        Err(e) if e.is_numeric() => {
            let dump = run_dir.and_then(|d| dump_groups(&d.abort_dump(step), &groups));
            return Err(abort(e, dump));
        }
        Err(e) => return Err(e),
    };
    let grad_norm = grads.values().map(|g| g * g).sum::<f64>().sqrt();
    state.optimizer.step(&mut state.theta, &grads)?;
    if !state.theta.all_finite() {
        let dump = run_dir.and_then(|d| dump_groups(&d.abort_dump(step), &groups));
        return Err(abort(Error::NonFinite { term: "theta".into() }, dump));
    }
    let eta_old = state.old.update(&state.theta, step)?;
    let eta_samp = state.samp.update(&state.theta, step)?;
    if let Some(e) = state.eval_ema.as_mut() {
        e.update(&state.theta, step)?;
    }
    state.step += 1;

    let raw: Vec<f64> = groups.iter().flat_map(|g| g.raw_rewards.iter().copied()).collect();
    let (implicit_mean, implicit_std) = mean_std(&implicit);
    Ok(StepReport {
        step,
        mean_raw_reward: mean_std(&raw).0,
        matching_loss: mean_std(&matching).0,
        kl_loss: kl_terms.iter().map(|k| k.loss).sum::<f64>() / kl_terms.len() as f64,
        implicit_mean,
        implicit_std,
        grad_norm,
        eta_old,
        eta_samp,
        groups,
        kl_terms,
        implicit,
    })
}

/// Reward and anchor distance of a model on fixed evaluation draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub reward: f64,
    /// Mean `||v_params - v_phi^CFG||²` at noised versions of the model's own
    /// samples.
    pub kl_to_phi: f64,
}

/// Evaluates `params` with the run's evaluation sampler. The draws depend only
/// on the seed, so successive evaluations share them.
pub fn evaluate(params: &ParamSet, phi: &ParamSet, cfg: &RunConfig) -> Result<EvalStats> {
    let mut rng = step_rng(cfg.seed, 0, EVAL_STREAM);
    let prompts = cfg.task.num_prompts();
    let mut reward = 0.0;
    let mut kl = 0.0;
    let n = cfg.eval.samples;
    for prompt in 0..prompts {
        let count = n / prompts + usize::from(prompt < n % prompts);
        if count == 0 {
            continue;
        }
        let sampler = SamplerConfig {
            num_steps: cfg.eval.sampler_steps,
            cfg_scale: cfg.eval.cfg_scale,
            seed: rng.random(),
        };
        let cond = Cond::Prompt(prompt);
        for x in ode_sample(params, cond, count, &sampler)? {
            reward += eval_reward(&cfg.reward, prompt, &x);
            let d = draw_noised(&mut rng, &x);
            let v = forward(params, &d.x_t, d.t, cond)?;
            let v_ref = guided_velocity(phi, &d.x_t, d.t, cond, cfg.train.cfg_scale)?;
            kl += v.iter().zip(&v_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(EvalStats {
        reward: reward / n as f64,
        kl_to_phi: kl / n as f64,
    })
}

/// One logged row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean raw reward of the step's rollouts (sampling copy).
    pub mean_raw_reward: f64,
    /// Mean raw reward of the trainable copy under the evaluation sampler.
    pub eval_reward: f64,
    pub crd_loss: f64,
    pub kl_loss: f64,
    pub implicit_mean: f64,
    pub implicit_std: f64,
    pub kl_to_phi: f64,
    /// Seconds since the run started; kept out of `metrics.csv` so that file
    /// is reproducible, and written to `timing.csv` instead.
    pub wall_time: f64,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 8] = [
        "step",
        "mean_raw_reward",
        "eval_reward",
        "crd_loss",
        "kl_loss",
        "implicit_mean",
        "implicit_std",
        "kl_to_phi",
    ];
    pub const TIMING_HEADER: [&'static str; 2] = ["step", "wall_time"];

    fn from_report(step: usize, r: &StepReport, eval: EvalStats, wall_time: f64) -> Self {
        Self {
            step,
            mean_raw_reward: r.mean_raw_reward,
            eval_reward: eval.reward,
            crd_loss: r.matching_loss,
            kl_loss: r.kl_loss,
            implicit_mean: r.implicit_mean,
            implicit_std: r.implicit_std,
            kl_to_phi: eval.kl_to_phi,
            wall_time,
        }
    }

    pub fn record(&self) -> Vec<String> {
        let mut out = vec![self.step.to_string()];
        out.extend(
            [
                self.mean_raw_reward,
                self.eval_reward,
                self.crd_loss,
                self.kl_loss,
                self.implicit_mean,
                self.implicit_std,
                self.kl_to_phi,
            ]
            .map(format_value),
        );
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct StateFile {
    step: usize,
    adam_step: u64,
    eval_ema: bool,
}

/// Writes the trainer state after `state.step` updates into `dir`.
/// `state.json` goes last and marks the checkpoint complete.
pub fn save_state(dir: &Path, state: &TrainState) -> Result<()> {
    write_params(&dir.join("theta"), &state.theta)?;
    write_params(&dir.join("theta_old"), &state.old.params)?;
    write_params(&dir.join("theta_samp"), &state.samp.params)?;
    if let Some(e) = &state.eval_ema {
        write_params(&dir.join("theta_eval"), &e.params)?;
    }
    write_params(&dir.join("adam_m"), &state.optimizer.m)?;
    write_params(&dir.join("adam_v"), &state.optimizer.v)?;
    let meta = StateFile {
        step: state.step,
        adam_step: state.optimizer.step,
        eval_ema: state.eval_ema.is_some(),
    };
    let text = serde_json::to_string_pretty(&meta).expect("state serializes");
    write_new(&dir.join("state.json"), text.as_bytes())
}

/// Restores a state written by [`save_state`].
pub fn load_state(dir: &Path, phi: ParamSet, cfg: &RunConfig) -> Result<TrainState> {
    let meta_path = dir.join("state.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: StateFile = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    let mut state = TrainState::new(phi, cfg);
    state.step = meta.step;
    state.theta = read_params(&dir.join("theta"))?;
    state.old.params = read_params(&dir.join("theta_old"))?;
    state.samp.params = read_params(&dir.join("theta_samp"))?;
    match (&mut state.eval_ema, meta.eval_ema) {
        (Some(e), true) => e.params = read_params(&dir.join("theta_eval"))?,
        (None, false) => {}
        _ => {
            return Err(Error::Checkpoint {
                path: meta_path,
                reason: "evaluation EMA presence differs from the config".into(),
            })
        }
    }
    state.optimizer.m = read_params(&dir.join("adam_m"))?;
    state.optimizer.v = read_params(&dir.join("adam_v"))?;
    state.optimizer.step = meta.adam_step;
    for p in [&state.theta, &state.old.params, &state.samp.params, &state.optimizer.m] {
        state.phi.ensure_same_layout(p)?;
    }
    Ok(state)
}

/// Outcome of [`run`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub state: TrainState,
    pub rows: Vec<MetricsRow>,
    pub baseline: EvalStats,
    pub dir: RunDir,
}

/// Pretrains (or loads) the frozen model, snapshots the config, then runs the
/// fine-tuning loop to `cfg.train.steps`, logging and checkpointing as
/// configured. Passing a step checkpoint directory as `resume` continues an
/// existing run in `out` from that point.
pub fn run(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(crate::io::ConfigError::Invalid {
            origin: "run config".into(),
            problems,
        }
        .into());
    }
    let started = Instant::now();
    let (dir, mut state, mut metrics, mut timing) = match resume {
        None => {
            let dir = RunDir::create(out, cfg)?;
            let phi = match &cfg.pretrain.phi {
                Some(path) => read_params(path)?,
                None => pretrain(cfg)?.phi,
            };
            phi.ensure_same_layout(&ParamSet::zeros(&cfg.mlp_spec()))?;
            write_params(&dir.phi_stem(), &phi)?;
            let state = TrainState::new(phi, cfg);
            let metrics = MetricsWriter::create(&dir.metrics_path(), &MetricsRow::HEADER)?;
            let timing = MetricsWriter::create(&dir.timing_path(), &MetricsRow::TIMING_HEADER)?;
            (dir, state, metrics, timing)
        }
        Some(ckpt) => {
            let dir = RunDir::open(out)?;
            let phi = read_params(&dir.phi_stem())?;
            let state = load_state(ckpt, phi, cfg)?;
            let keep = state.step as f64;
            let metrics = MetricsWriter::resume(&dir.metrics_path(), &MetricsRow::HEADER, keep)?;
            let timing = MetricsWriter::resume(&dir.timing_path(), &MetricsRow::TIMING_HEADER, keep)?;
            log::info!("resuming {} at step {}", dir.root().display(), state.step);
            (dir, state, metrics, timing)
        }
    };

    let baseline = evaluate(&state.phi, &state.phi, cfg)?;
    let mut rows = Vec::new();
    let mut log_row = |row: MetricsRow, metrics: &mut MetricsWriter, timing: &mut MetricsWriter| -> Result<()> {
        metrics.append(&row.record())?;
        timing.append(&[row.step.to_string(), format_value(row.wall_time)])?;
        log::info!(
            "step {:>5}  rollout reward {:.4}  eval reward {:.4}  loss {:.4e}  kl {:.4e}  kl_to_phi {:.4e}",
            row.step,
            row.mean_raw_reward,
            row.eval_reward,
            row.crd_loss,
            row.kl_loss,
            row.kl_to_phi
        );
        rows.push(row);
        Ok(())
    };

    if state.step == 0 {
        // Baseline row: statistics of the first batch under the initial
        // copies, without applying the update.
        let mut probe = state.clone();
        let report = train_step(&mut probe, cfg, Some(&dir))?;
        let eval = evaluate(&state.theta, &state.phi, cfg)?;
        log_row(
            MetricsRow::from_report(0, &report, eval, started.elapsed().as_secs_f64()),
            &mut metrics,
            &mut timing,
        )?;
    }

    let steps = cfg.train.steps;
    while state.step < steps {
        let report = train_step(&mut state, cfg, Some(&dir))?;
        let i = state.step;
        if i % cfg.eval.every == 0 || i == steps {
            let eval = evaluate(&state.theta, &state.phi, cfg)?;
            log_row(
                MetricsRow::from_report(i, &report, eval, started.elapsed().as_secs_f64()),
                &mut metrics,
                &mut timing,
            )?;
        }
        let every = cfg.eval.checkpoint_every;
        if (every > 0 && i % every == 0) && i != steps {
            save_state(&dir.step_dir(i), &state)?;
        }
    }
    let final_dir = dir.step_dir(state.step);
    if !final_dir.join("state.json").exists() {
        save_state(&final_dir, &state)?;
    }
    Ok(RunSummary {
        state,
        rows,
        baseline,
        dir,
    })
}
