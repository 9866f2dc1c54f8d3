//! Reverse-mode derivatives for the fixed loss family.
//!
//! Losses are written against a [`Tape`]: every network evaluation of the
//! trainable parameters goes through [`Tape::velocity`], and once the loss has
//! worked out `d loss / d velocity` for that evaluation it hands the cotangent
//! back with [`Tape::pullback`]. Anything the loss does not pull back (other
//! parameter sets, stop-gradient factors) contributes nothing.

use super::mlp::{build_input, forward_cached, ForwardCache};
use super::{Cond, ParamSet};
use crate::error::{ensure_finite, Error, Result};

/// One evaluation of the trainable network.
#[derive(Clone, Debug)]
pub struct Node {
    pub value: Vec<f64>,
    slot: Option<usize>,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    grads: Option<ParamSet>,
    caches: Vec<ForwardCache>,
}

impl<'p> Tape<'p> {
    /// A tape that records activations and accumulates gradients.
    pub fn recording(params: &'p ParamSet) -> Self {
        Self {
            params,
            grads: Some(ParamSet::zeros(params.spec())),
            caches: Vec::new(),
        }
    }

    /// A tape that only evaluates; pullbacks are ignored.
    pub fn inference(params: &'p ParamSet) -> Self {
        Self {
            params,
            grads: None,
            caches: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn is_recording(&self) -> bool {
        self.grads.is_some()
    }

    pub fn velocity(&mut self, x_t: &[f64], t: f64, cond: Cond) -> Result<Node> {
        let input = build_input(self.params.spec(), x_t, t, cond)?;
        let cache = forward_cached(self.params, input);
        let value = cache.output().to_vec();
        let slot = if self.grads.is_some() {
            self.caches.push(cache);
            Some(self.caches.len() - 1)
        } else {
            None
        };
        Ok(Node { value, slot })
    }

    pub fn pullback(&mut self, node: &Node, cotangent: &[f64]) -> Result<()> {
        if cotangent.len() != node.value.len() {
            return Err(Error::shape("cotangent", node.value.len(), cotangent.len()));
        }
        if let (Some(grads), Some(slot)) = (self.grads.as_mut(), node.slot) {
            self.caches[slot].backward(self.params, cotangent, grads);
        }
        Ok(())
    }

    /// Adds a direct `d loss / d params` contribution, for terms that read
    /// the parameters without going through the network.
    pub fn pullback_params(&mut self, cotangent: &ParamSet) -> Result<()> {
        self.params.ensure_same_layout(cotangent)?;
        if let Some(grads) = self.grads.as_mut() {
            for (g, c) in grads.values_mut().zip(cotangent.values()) {
                *g += c;
            }
        }
        Ok(())
    }

    fn into_grads(self) -> Option<ParamSet> {
        self.grads
    }
}

/// Loss value and its gradient with respect to the trainable parameters.
#[derive(Clone, Debug)]
pub struct GradTape {
    pub loss: f64,
    pub grads: ParamSet,
}

impl GradTape {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.tensor(name).map(|t| t.data.as_slice())
    }

    pub fn norm(&self) -> f64 {
        self.grads.values().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Evaluates `loss_fn` on a recording tape and returns the exact gradient.
pub fn grad<F>(params: &ParamSet, loss_fn: F) -> Result<GradTape>
where
    F: FnOnce(&mut Tape<'_>) -> Result<f64>,
{
    let mut tape = Tape::recording(params);
    let loss = ensure_finite("loss", loss_fn(&mut tape)?)?;
    let grads = tape.into_grads().expect("recording tape");
    if !grads.all_finite() {
        return Err(Error::NonFinite {
            term: "gradient".into(),
        });
    }
    Ok(GradTape { loss, grads })
}

/// Evaluates `loss_fn` without recording.
pub fn value<F>(params: &ParamSet, loss_fn: F) -> Result<f64>
where
    F: FnOnce(&mut Tape<'_>) -> Result<f64>,
{
    let mut tape = Tape::inference(params);
    loss_fn(&mut tape)
}

/// Central finite differences of `loss_fn` at `params`, one parameter at a time.
pub fn finite_difference<F>(params: &ParamSet, step: f64, mut loss_fn: F) -> Result<ParamSet>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut out = ParamSet::zeros(params.spec());
    for idx in 0..params.num_params() {
        let base = params.get_flat(idx);
        probe.set_flat(idx, base + step);
        let up = loss_fn(&probe)?;
        probe.set_flat(idx, base - step);
        let down = loss_fn(&probe)?;
        probe.set_flat(idx, base);
        out.set_flat(idx, (up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Worst per-parameter disagreement between two gradients.
#[derive(Clone, Debug)]
pub struct GradAgreement {
    /// `max |a - n| / max(|a|, |n|, floor)` over parameters.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

pub fn gradient_agreement(analytic: &ParamSet, numeric: &ParamSet, floor: f64) -> GradAgreement {
    let mut worst = (0.0, 0usize);
    for (idx, (a, n)) in analytic.values().zip(numeric.values()).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > worst.0 || rel.is_nan() {
            worst = (rel, idx);
        }
    }
    let (name, offset) = analytic.describe_flat(worst.1);
    GradAgreement {
        max_rel_err: worst.0,
        worst_param: name,
        worst_index: offset,
    }
}
