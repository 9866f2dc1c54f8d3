//! Run configuration: a versioned TOML document with every hyperparameter of
//! a pretrain + fine-tune run.
//!
//! Loading collects every problem it can find (unknown keys, missing required
//! keys, type errors per section, out-of-range values) before failing. Keys
//! left out of optional sections fall back to defaults and each fallback is
//! reported as a notice.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{Estimator, LossKind, ObjectiveConfig, Temperature};
use crate::reward::{RewardFn, RewardSpec, ToyTask};
use crate::tensor::{Activation, AdamWConfig, MlpSpec};
use crate::trainer::Schedule;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{origin}:{line}:{column}: {message}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{origin}: invalid configuration:\n  - {}", problems.join("\n  - "))]
    Invalid { origin: String, problems: Vec<String> },
}

impl ConfigError {
    pub fn problems(&self) -> &[String] {
        match self {
            ConfigError::Invalid { problems, .. } => problems,
            ConfigError::Parse { .. } => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            time_embed_dim: 8,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of training on the null prompt.
    pub p_uncond: f64,
    /// Load the pretrained parameters from this manifest instead of training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 256,
            lr: 1e-3,
            p_uncond: 0.1,
            phi: None,
        }
    }
}

/// Fine-tuning hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// `K`, samples per prompt.
    pub group_size: usize,
    pub groups_per_batch: usize,
    pub loss: LossKind,
    pub estimator: Estimator,
    pub beta_old: f64,
    pub beta_init: f64,
    pub adaptive_kl: bool,
    pub tau: Temperature,
    /// Guidance scale of the anchoring target.
    pub cfg_scale: f64,
    pub infonca_beta: f64,
    /// Decay of the implicit-reward reference.
    pub eta_old: Schedule,
    /// Decay of the rollout copy (some references call this `eta_init`).
    pub eta_samp: Schedule,
    pub sampler_steps: usize,
    /// Noised `(t, eps)` draws per generated sample.
    pub draws_per_sample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            group_size: 8,
            groups_per_batch: 4,
            loss: LossKind::Crd,
            estimator: Estimator::AdaptiveV,
            beta_old: 1.0,
            beta_init: 0.05,
            adaptive_kl: true,
            tau: Temperature::Infinite,
            cfg_scale: 3.0,
            infonca_beta: 1.0,
            eta_old: Schedule::parse("min(0.5+0.002*i, 0.99)").expect("valid default"),
            eta_samp: Schedule::parse("min(0.002*i, 0.9)").expect("valid default"),
            sampler_steps: 20,
            draws_per_sample: 1,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            loss: self.loss,
            estimator: self.estimator,
            beta_old: self.beta_old,
            tau: self.tau,
            beta_init: self.beta_init,
            adaptive_kl: self.adaptive_kl,
            cfg_scale: self.cfg_scale,
            infonca_beta: self.infonca_beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Log a metrics row every this many optimizer steps.
    pub every: usize,
    pub samples: usize,
    pub sampler_steps: usize,
    pub cfg_scale: f64,
    /// Decay of the optional evaluation EMA.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ema_decay: Option<f64>,
    /// Zero disables intermediate checkpoints; the final one is always written.
    pub checkpoint_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 100,
            samples: 512,
            sampler_steps: 20,
            cfg_scale: 1.0,
            ema_decay: None,
            checkpoint_every: 500,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub task: ToyTask,
    pub reward: RewardSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    /// One-dimensional two-mode task (modes at `-1` and `+1`, `sigma = 0.3`)
    /// with a reward preferring the `+1` mode.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            task: ToyTask::two_mode_1d(0.3),
            reward: RewardSpec::Shared(RewardFn::ModePreference {
                preferred: vec![1.0],
                rival: vec![-1.0],
                smoothness: 1.0,
            }),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            optimizer: AdamWConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn mlp_spec(&self) -> MlpSpec {
        MlpSpec {
            data_dim: self.task.data_dim,
            time_embed_dim: self.model.time_embed_dim,
            num_prompts: self.task.num_prompts(),
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
        }
    }

    /// Every semantic problem, in a stable order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                out.push(msg);
            }
        };
        check(
            self.schema_version == SCHEMA_VERSION,
            format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version),
        );
        let m = &self.model;
        check(!m.hidden.is_empty(), "model.hidden needs at least one layer".into());
        check(m.hidden.iter().all(|&h| h > 0), "model.hidden widths must be positive".into());
        check(m.time_embed_dim.is_multiple_of(2), "model.time_embed_dim must be even".into());

        let p = &self.pretrain;
        check(p.batch_size >= 1, "pretrain.batch_size must be >= 1".into());
        check(p.lr > 0.0 && p.lr.is_finite(), "pretrain.lr must be > 0".into());
        check((0.0..=1.0).contains(&p.p_uncond), "pretrain.p_uncond must be in [0, 1]".into());

        let t = &self.train;
        check(t.group_size >= 2, format!("train.group_size must be >= 2, got {}", t.group_size));
        check(t.groups_per_batch >= 1, "train.groups_per_batch must be >= 1".into());
        check(t.beta_old > 0.0 && t.beta_old.is_finite(), "train.beta_old must be > 0".into());
        check(t.beta_init >= 0.0 && t.beta_init.is_finite(), "train.beta_init must be >= 0".into());
        check(t.cfg_scale >= 0.0 && t.cfg_scale.is_finite(), "train.cfg_scale must be >= 0".into());
        check(t.infonca_beta > 0.0 && t.infonca_beta.is_finite(), "train.infonca_beta must be > 0".into());
        if let Temperature::Finite(tau) = t.tau {
            check(tau > 0.0 && tau.is_finite(), format!("train.tau must be > 0, \"inf\" or \"zero\", got {tau}"));
        }
        check(
            t.loss != LossKind::TwoSample || t.group_size == 2,
            "train.loss = \"two_sample\" needs train.group_size = 2".into(),
        );
        for (name, s) in [("train.eta_old", &t.eta_old), ("train.eta_samp", &t.eta_samp)] {
            if let Some((i, v)) = s.first_outside_unit(t.steps) {
                out.push(format!("{name} = \"{s}\" leaves [0, 1] at step {i} (value {v})"));
            }
        }
        let mut check = |ok: bool, msg: String| {
            if !ok {
                out.push(msg);
            }
        };
        check(t.sampler_steps >= 1, "train.sampler_steps must be >= 1".into());
        check(t.draws_per_sample >= 1, "train.draws_per_sample must be >= 1".into());

        let o = &self.optimizer;
        check(o.lr >= 0.0 && o.lr.is_finite(), "optimizer.lr must be >= 0".into());
        check((0.0..1.0).contains(&o.beta1), "optimizer.beta1 must be in [0, 1)".into());
        check((0.0..1.0).contains(&o.beta2), "optimizer.beta2 must be in [0, 1)".into());
        check(o.weight_decay >= 0.0, "optimizer.weight_decay must be >= 0".into());
        check(o.eps > 0.0, "optimizer.eps must be > 0".into());

        let e = &self.eval;
        check(e.every >= 1, "eval.every must be >= 1".into());
        check(e.samples >= 1, "eval.samples must be >= 1".into());
        check(e.sampler_steps >= 1, "eval.sampler_steps must be >= 1".into());
        check(e.cfg_scale >= 0.0 && e.cfg_scale.is_finite(), "eval.cfg_scale must be >= 0".into());
        if let Some(d) = e.ema_decay {
            check((0.0..=1.0).contains(&d), "eval.ema_decay must be in [0, 1]".into());
        }

        out.extend(self.task.problems());
        out.extend(self.reward.problems(&self.task));
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }
}

const REQUIRED: &[&str] = &["schema_version", "seed", "task", "reward"];

const SECTIONS: &[(&str, &[&str])] = &[
    ("model", &["hidden", "time_embed_dim", "activation"]),
    ("pretrain", &["steps", "batch_size", "lr", "p_uncond", "phi"]),
    (
        "train",
        &[
            "steps",
            "group_size",
            "groups_per_batch",
            "loss",
            "estimator",
            "beta_old",
            "beta_init",
            "adaptive_kl",
            "tau",
            "cfg_scale",
            "infonca_beta",
            "eta_old",
            "eta_samp",
            "sampler_steps",
            "draws_per_sample",
        ],
    ),
    ("optimizer", &["lr", "beta1", "beta2", "weight_decay", "eps"]),
    (
        "eval",
        &["every", "samples", "sampler_steps", "cfg_scale", "ema_decay", "checkpoint_every"],
    ),
];

const TASK_KEYS: &[&str] = &["data_dim", "prompts"];
const PROMPT_KEYS: &[&str] = &["means", "weights", "sigma"];

fn reward_keys(kind: &str) -> Option<&'static [&'static str]> {
    match kind {
        "mode_preference" => Some(&["kind", "preferred", "rival", "smoothness"]),
        "target_region" => Some(&["kind", "center", "radius", "smoothness"]),
        "direction" => Some(&["kind", "direction", "smoothness"]),
        _ => None,
    }
}

/// Reports and removes keys outside `allowed`, so the rest can still be
/// type-checked.
fn unknown_keys(table: &mut toml::Table, allowed: &[&str], at: &str, out: &mut Vec<String>) {
    table.retain(|key, _| {
        let known = allowed.contains(&key);
        if !known {
            out.push(format!("unknown key `{at}{key}`"));
        }
        known
    });
}

fn audit_reward(value: &mut toml::Value, at: &str, out: &mut Vec<String>) {
    let Some(table) = value.as_table_mut() else {
        out.push(format!("`{at}` must be a table"));
        return;
    };
    match table.get("kind").and_then(|k| k.as_str()) {
        None => out.push(format!("missing required key `{at}.kind`")),
        Some(kind) => match reward_keys(kind) {
            None => out.push(format!(
                "`{at}.kind` = \"{kind}\" is not one of mode_preference, target_region, direction"
            )),
            Some(keys) => {
                unknown_keys(table, keys, &format!("{at}."), out);
                for key in &keys[1..] {
                    if !table.contains_key(*key) {
                        out.push(format!("missing required key `{at}.{key}`"));
                    }
                }
            }
        },
    }
}

/// Structural audit: unknown keys anywhere, missing required keys, and
/// notices for defaulted optional keys.
fn audit(doc: &mut toml::Table, problems: &mut Vec<String>, notices: &mut Vec<String>) {
    let top: Vec<&str> = REQUIRED
        .iter()
        .copied()
        .chain(SECTIONS.iter().map(|(s, _)| *s))
        .collect();
    unknown_keys(doc, &top, "", problems);
    for key in REQUIRED {
        if !doc.contains_key(*key) {
            problems.push(format!("missing required key `{key}`"));
        }
    }

    if let Some(task) = doc.get_mut("task") {
        match task.as_table_mut() {
            None => problems.push("`task` must be a table".into()),
            Some(t) => {
                unknown_keys(t, TASK_KEYS, "task.", problems);
                for key in TASK_KEYS {
                    if !t.contains_key(*key) {
                        problems.push(format!("missing required key `task.{key}`"));
                    }
                }
                if let Some(prompts) = t.get_mut("prompts").and_then(|p| p.as_array_mut()) {
                    for (i, p) in prompts.iter_mut().enumerate() {
                        if let Some(pt) = p.as_table_mut() {
                            unknown_keys(pt, PROMPT_KEYS, &format!("task.prompts[{i}]."), problems);
                            for key in PROMPT_KEYS {
                                if !pt.contains_key(*key) {
                                    problems.push(format!("missing required key `task.prompts[{i}].{key}`"));
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    match doc.get_mut("reward") {
        Some(toml::Value::Array(items)) => {
            for (i, item) in items.iter_mut().enumerate() {
                audit_reward(item, &format!("reward[{i}]"), problems);
            }
        }
        Some(other) => audit_reward(other, "reward", problems),
        None => {}
    }

    let defaults = toml::Table::try_from(RunConfig::desk_default(0)).expect("defaults serialize");
    for (section, keys) in SECTIONS {
        let mut user = match doc.get_mut(*section) {
            None => None,
            Some(v) => match v.as_table_mut() {
                Some(t) => Some(t),
                None => {
                    problems.push(format!("`{section}` must be a table"));
                    continue;
                }
            },
        };
        if let Some(t) = user.as_deref_mut() {
            unknown_keys(t, keys, &format!("{section}."), problems);
        }
        let default_section = defaults.get(*section).and_then(|v| v.as_table());
        for key in *keys {
            if user.as_ref().is_some_and(|t| t.contains_key(*key)) {
                continue;
            }
            if let Some(v) = default_section.and_then(|d| d.get(*key)) {
                notices.push(format!("{section}.{key} not set; using default {v}"));
            }
        }
    }
}

fn section<T: DeserializeOwned + Default>(doc: &toml::Table, key: &str, problems: &mut Vec<String>) -> Option<T> {
    match doc.get(key) {
        None => Some(T::default()),
        Some(v) => required(v, key, problems),
    }
}

fn required<T: DeserializeOwned>(v: &toml::Value, key: &str, problems: &mut Vec<String>) -> Option<T> {
    match v.clone().try_into::<T>() {
        Ok(t) => Some(t),
        Err(e) => {
            problems.push(format!("`{key}`: {}", e.message().trim()));
            None
        }
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// A validated config together with the defaulting notices.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: RunConfig,
    pub notices: Vec<String>,
}

/// Parses and validates config text; `origin` names it in errors.
pub fn parse_config(text: &str, origin: &str) -> std::result::Result<Loaded, ConfigError> {
    let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let (line, column) = e.span().map_or((1, 1), |s| line_column(text, s.start));
        ConfigError::Parse {
            origin: origin.into(),
            line,
            column,
            message: e.message().trim().to_string(),
        }
    })?;

    let mut doc = doc;
    let mut problems = Vec::new();
    let mut notices = Vec::new();
    audit(&mut doc, &mut problems, &mut notices);

    // Type-check whatever the audit left intact so every problem is reported
    // at once; keys with structural problems are already covered.
    let flagged = |key: &str, problems: &[String]| {
        problems
            .iter()
            .any(|p| !p.starts_with("unknown key") && (p.contains(&format!("`{key}`")) || p.contains(&format!("`{key}."))))
    };
    let structural = problems.clone();
    fn typed<T: DeserializeOwned>(
        doc: &toml::Table,
        key: &str,
        skip: bool,
        problems: &mut Vec<String>,
    ) -> Option<T> {
        if skip {
            return None;
        }
        doc.get(key).and_then(|v| required(v, key, problems))
    }
    let schema_version = typed::<u32>(&doc, "schema_version", flagged("schema_version", &structural), &mut problems);
    let seed = typed::<u64>(&doc, "seed", flagged("seed", &structural), &mut problems);
    let task = typed::<ToyTask>(&doc, "task", flagged("task", &structural), &mut problems);
    let reward = typed::<RewardSpec>(&doc, "reward", flagged("reward", &structural), &mut problems);
    let model = (!flagged("model", &structural)).then(|| section::<ModelConfig>(&doc, "model", &mut problems)).flatten();
    let pretrain =
        (!flagged("pretrain", &structural)).then(|| section::<PretrainConfig>(&doc, "pretrain", &mut problems)).flatten();
    let train = (!flagged("train", &structural)).then(|| section::<TrainConfig>(&doc, "train", &mut problems)).flatten();
    let optimizer =
        (!flagged("optimizer", &structural)).then(|| section::<AdamWConfig>(&doc, "optimizer", &mut problems)).flatten();
    let eval = (!flagged("eval", &structural)).then(|| section::<EvalConfig>(&doc, "eval", &mut problems)).flatten();
    let invalid = |problems| ConfigError::Invalid {
        origin: origin.into(),
        problems,
    };
    let (
        Some(schema_version),
        Some(seed),
        Some(task),
        Some(reward),
        Some(model),
        Some(pretrain),
        Some(train),
        Some(optimizer),
        Some(eval),
    ) = (schema_version, seed, task, reward, model, pretrain, train, optimizer, eval)
    else {
        return Err(invalid(problems));
    };
    let config = RunConfig {
        schema_version,
        seed,
        task,
        reward,
        model,
        pretrain,
        train,
        optimizer,
        eval,
    };
    problems.extend(config.problems());
    if !problems.is_empty() {
        return Err(invalid(problems));
    }
    Ok(Loaded { config, notices })
}

/// Reads, parses and validates a config file, logging defaulted keys.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let loaded = parse_config(&text, &path.display().to_string())?;
    for notice in &loaded.notices {
        log::info!("{notice}");
    }
    Ok(loaded.config)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
seed = 3

[task]
data_dim = 1
[[task.prompts]]
means = [[-1.0], [1.0]]
weights = [0.5, 0.5]
sigma = 0.3

[reward]
kind = "mode_preference"
preferred = [1.0]
rival = [-1.0]
smoothness = 1.0
"#;

    #[test]
    fn minimal_config_gets_desk_defaults_with_notices() {
        let loaded = parse_config(MINIMAL, "minimal").unwrap();
        assert_eq!(loaded.config, RunConfig::desk_default(3));
        assert!(loaded.notices.iter().any(|n| n.starts_with("train.group_size not set")));
        // Optional keys without a default value are not announced.
        assert!(!loaded.notices.iter().any(|n| n.contains("ema_decay")));
    }

    #[test]
    fn capped_linear_schedule_parses() {
        let text = format!("{MINIMAL}\n[train]\neta_old = \"min(0.25+0.005*i, 0.999)\"\n");
        let c = parse_config(&text, "t").unwrap().config;
        assert_eq!(c.train.eta_old.at(0), 0.25);
        assert_eq!(c.train.eta_old.at(200), 0.999);
    }

    #[test]
    fn empty_file_names_every_required_key() {
        let err = parse_config("", "empty").unwrap_err();
        let problems = err.problems();
        for key in REQUIRED {
            assert!(
                problems.iter().any(|p| p == &format!("missing required key `{key}`")),
                "{problems:?}"
            );
        }
        assert_eq!(problems.len(), REQUIRED.len());
    }

    #[test]
    fn unknown_keys_are_all_reported() {
        let text = format!("bogus = 1\n{MINIMAL}\n[train]\nstepz = 3\n[eval]\nevery = 5\nfoo = true\n");
        let err = parse_config(&text, "t").unwrap_err();
        let p = err.problems();
        assert!(p.contains(&"unknown key `bogus`".to_string()), "{p:?}");
        assert!(p.contains(&"unknown key `train.stepz`".to_string()), "{p:?}");
        assert!(p.contains(&"unknown key `eval.foo`".to_string()), "{p:?}");
    }

    #[test]
    fn semantic_errors_are_listed_together() {
        let text = format!(
            "{MINIMAL}\n[train]\ngroup_size = 1\nbeta_old = 0.0\neta_samp = \"0.01*i\"\n[model]\ntime_embed_dim = 3\n"
        );
        let err = parse_config(&text, "t").unwrap_err();
        let p = err.problems();
        assert!(p.iter().any(|m| m.contains("group_size")));
        assert!(p.iter().any(|m| m.contains("beta_old")));
        assert!(p.iter().any(|m| m.contains("eta_samp") && m.contains("step 101")));
        assert!(p.iter().any(|m| m.contains("time_embed_dim")));
    }

    #[test]
    fn type_errors_in_several_sections_are_listed_together() {
        let text = format!("{MINIMAL}\n[train]\nsteps = \"many\"\n[eval]\nsamples = -1\n");
        let err = parse_config(&text, "t").unwrap_err();
        let p = err.problems();
        assert!(p.iter().any(|m| m.starts_with("`train`")), "{p:?}");
        assert!(p.iter().any(|m| m.starts_with("`eval`")), "{p:?}");
    }

    #[test]
    fn parse_errors_carry_line_and_column() {
        let err = parse_config("schema_version = 1\nseed = = 2\n", "bad.toml").unwrap_err();
        match err {
            ConfigError::Parse { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column >= 6, "column {column}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn round_trip_is_identical() {
        let mut c = RunConfig::desk_default(9);
        c.train.tau = Temperature::Finite(0.7);
        c.train.eta_old = Schedule::parse("min(max(0.0075*(i-75), 0), 0.999)").unwrap();
        c.eval.ema_decay = Some(0.9);
        let again = parse_config(&c.to_toml(), "rt").unwrap().config;
        assert_eq!(again, c);
        let thrice = parse_config(&again.to_toml(), "rt").unwrap().config;
        assert_eq!(thrice, c);
    }

    #[test]
    fn reward_keys_follow_kind() {
        let text = MINIMAL.replace("smoothness = 1.0", "smoothness = 1.0\nradius = 1.0");
        let err = parse_config(&text, "t").unwrap_err();
        assert!(err.problems().contains(&"unknown key `reward.radius`".to_string()));
    }
}
