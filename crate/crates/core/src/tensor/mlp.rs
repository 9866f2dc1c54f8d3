use serde::{Deserialize, Serialize};

use super::{MlpSpec, ParamSet};
use crate::error::{Error, Result};

/// Conditioning input: a prompt index or the null prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cond {
    Prompt(usize),
    Null,
}

/// Sinusoidal features `[sin(pi 2^k t), cos(pi 2^k t)]` for `k < width / 2`.
pub fn time_embedding(t: f64, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(width);
    for k in 0..width / 2 {
        let arg = std::f64::consts::PI * (1u64 << k) as f64 * t;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

pub(crate) fn build_input(spec: &MlpSpec, x: &[f64], t: f64, cond: Cond) -> Result<Vec<f64>> {
    if x.len() != spec.data_dim {
        return Err(Error::shape("velocity input x_t", spec.data_dim, x.len()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("time {t} outside [0, 1]")));
    }
    let slot = match cond {
        Cond::Prompt(c) if c < spec.num_prompts => c,
        Cond::Prompt(c) => {
            return Err(Error::InvalidInput(format!(
                "prompt {c} out of range (task has {} prompts)",
                spec.num_prompts
            )))
        }
        Cond::Null => spec.num_prompts,
    };
    let mut input = Vec::with_capacity(spec.input_dim());
    input.extend_from_slice(x);
    input.extend(time_embedding(t, spec.time_embed_dim));
    let base = input.len();
    input.resize(base + spec.prompt_embed_dim(), 0.0);
    input[base + slot] = 1.0;
    Ok(input)
}

/// Activations kept for one backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ForwardCache {
    /// `acts[0]` is the network input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
}

pub(crate) fn forward_cached(params: &ParamSet, input: Vec<f64>) -> ForwardCache {
    let spec = params.spec();
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    let mut acts = Vec::with_capacity(dims.len() + 1);
    let mut pre = Vec::with_capacity(last);
    acts.push(input);
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = params.weight(l);
        let b = params.bias(l);
        let h = &acts[l];
        let mut z = b.to_vec();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            *zo += row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
        }
        debug_assert_eq!(z.len(), fan_out);
        if l < last {
            let y = z.iter().map(|&v| spec.activation.apply(v)).collect();
            pre.push(z);
            acts.push(y);
        } else {
            acts.push(z);
        }
    }
    ForwardCache { acts, pre }
}

impl ForwardCache {
    pub(crate) fn output(&self) -> &[f64] {
        self.acts.last().expect("cache holds at least the input")
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub(crate) fn backward(&self, params: &ParamSet, d_out: &[f64], grads: &mut ParamSet) {
        let spec = params.spec();
        let dims = spec.layer_dims();
        let last = dims.len() - 1;
        let mut delta = d_out.to_vec();
        for l in (0..dims.len()).rev() {
            let (fan_in, _) = dims[l];
            if l < last {
                for ((d, &z), &y) in delta.iter_mut().zip(&self.pre[l]).zip(&self.acts[l + 1]) {
                    *d *= spec.activation.derivative(z, y);
                }
            }
            let h = &self.acts[l];
            let (gw, gb) = grads.layer_mut(l);
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                for (g, &hv) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(h) {
                    *g += d * hv;
                }
            }
            if l > 0 {
                let w = params.weight(l);
                let mut prev = vec![0.0; fan_in];
                for (o, &d) in delta.iter().enumerate() {
                    for (p, &wv) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *p += wv * d;
                    }
                }
                delta = prev;
            }
        }
    }
}

/// Predicted velocity `v(x_t, t | cond)`.
pub fn forward(params: &ParamSet, x_t: &[f64], t: f64, cond: Cond) -> Result<Vec<f64>> {
    let input = build_input(params.spec(), x_t, t, cond)?;
    let mut cache = forward_cached(params, input);
    Ok(cache.acts.pop().expect("output layer"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;

    fn one_hidden_spec() -> MlpSpec {
        MlpSpec {
            data_dim: 1,
            time_embed_dim: 2,
            num_prompts: 1,
            hidden: vec![2],
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn zero_params_give_zero_velocity() {
        let spec = one_hidden_spec();
        let p = ParamSet::zeros(&spec);
        assert_eq!(forward(&p, &[0.7], 0.3, Cond::Prompt(0)).unwrap(), vec![0.0]);
        assert_eq!(forward(&p, &[-4.0], 1.0, Cond::Null).unwrap(), vec![0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = one_hidden_spec();
        let p = ParamSet::init(&spec, 9);
        let a = forward(&p, &[0.25], 0.6, Cond::Prompt(0)).unwrap();
        let b = forward(&p, &[0.25], 0.6, Cond::Prompt(0)).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn hand_set_weights_match_straight_line_evaluation() {
        // Input layout: [x, sin(pi t), cos(pi t), onehot(prompt0), onehot(null)].
        let spec = one_hidden_spec();
        let mut p = ParamSet::zeros(&spec);
        let w0 = [0.5, -0.25, 0.1, 0.3, -0.2, 1.0, 0.4, 0.0, -0.6, 0.2];
        p.tensor_mut("layer0.weight").unwrap().data.copy_from_slice(&w0);
        p.tensor_mut("layer0.bias").unwrap().data.copy_from_slice(&[0.05, -0.15]);
        p.tensor_mut("layer1.weight").unwrap().data.copy_from_slice(&[1.5, -0.7]);
        p.tensor_mut("layer1.bias").unwrap().data.copy_from_slice(&[0.3]);

        let (x, t) = (0.8_f64, 0.25_f64);
        let s = (std::f64::consts::PI * t).sin();
        let c = (std::f64::consts::PI * t).cos();
        let h0 = (0.5 * x - 0.25 * s + 0.1 * c + 0.3 * 1.0 - 0.2 * 0.0 + 0.05).tanh();
        let h1 = (1.0 * x + 0.4 * s + 0.0 * c - 0.6 * 1.0 + 0.2 * 0.0 - 0.15).tanh();
        let expected = 1.5 * h0 - 0.7 * h1 + 0.3;

        let got = forward(&p, &[x], t, Cond::Prompt(0)).unwrap()[0];
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = one_hidden_spec();
        let p = ParamSet::zeros(&spec);
        assert!(forward(&p, &[0.0, 1.0], 0.5, Cond::Null).is_err());
        assert!(forward(&p, &[0.0], 1.5, Cond::Null).is_err());
        assert!(forward(&p, &[0.0], 0.5, Cond::Prompt(1)).is_err());
    }

    #[test]
    fn time_features_are_paired() {
        let e = time_embedding(0.5, 4);
        assert_eq!(e.len(), 4);
        assert!((e[0] - 1.0).abs() < 1e-15);
        assert!(e[1].abs() < 1e-15);
    }
}
