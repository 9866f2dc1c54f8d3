use serde::{Deserialize, Serialize};

use super::Schedule;
use crate::error::{Error, Result};
use crate::tensor::ParamSet;

/// Which snapshot an EMA state tracks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaRole {
    /// Reference of the implicit reward.
    Old,
    /// Rollout model.
    Samp,
    /// Optional smoothed copy for reporting.
    Eval,
}

/// A parameter snapshot pulled toward the trainable copy once per step.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub params: ParamSet,
    pub schedule: Schedule,
    pub role: EmaRole,
}

impl EmaState {
    pub fn new(params: ParamSet, schedule: Schedule, role: EmaRole) -> Self {
        Self {
            params,
            schedule,
            role,
        }
    }

    /// Applies `ema_update` with this state's schedule; returns the decay used.
    pub fn update(&mut self, current: &ParamSet, step: usize) -> Result<f64> {
        let eta = self.schedule.at(step);
        ema_update(&mut self.params, current, eta)?;
        Ok(eta)
    }
}

/// `ema <- eta ema + (1 - eta) current`, element-wise.
///
/// `eta = 0` copies `current` exactly and `eta = 1` leaves `ema` untouched.
/// Otherwise the result is clamped to the segment between the two values so
/// rounding never leaves it.
pub fn ema_update(ema: &mut ParamSet, current: &ParamSet, eta: f64) -> Result<()> {
    ema.ensure_same_layout(current)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidInput(format!("EMA decay {eta} outside [0, 1]")));
    }
    if eta == 1.0 {
        return Ok(());
    }
    for (e, c) in ema.values_mut().zip(current.values()) {
        if eta == 0.0 {
            *e = c;
        } else {
            let next = *e + (1.0 - eta) * (c - *e);
            *e = next.clamp(e.min(c), e.max(c));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Activation, MlpSpec};
    use proptest::prelude::*;

    fn pair(seed: u64) -> (ParamSet, ParamSet) {
        let spec = MlpSpec {
            data_dim: 1,
            time_embed_dim: 2,
            num_prompts: 1,
            hidden: vec![5],
            activation: Activation::Tanh,
        };
        (ParamSet::init(&spec, seed), ParamSet::init(&spec, seed + 100))
    }

    #[test]
    fn zero_decay_copies_and_unit_decay_keeps() {
        let (mut a, b) = pair(1);
        let before = a.clone();
        ema_update(&mut a, &b, 1.0).unwrap();
        assert!(a.bit_eq(&before));
        ema_update(&mut a, &b, 0.0).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn identical_target_is_a_no_op() {
        let (a, _) = pair(2);
        let mut e = a.clone();
        ema_update(&mut e, &a, 0.37).unwrap();
        assert!(e.bit_eq(&a));
    }

    #[test]
    fn schedule_drives_the_decay() {
        let (a, b) = pair(3);
        let mut s = EmaState::new(a, Schedule::parse("min(0.25+0.005*i, 0.999)").unwrap(), EmaRole::Old);
        assert_eq!(s.update(&b, 0).unwrap(), 0.25);
        assert_eq!(s.update(&b, 200).unwrap(), 0.999);
    }

    #[test]
    fn out_of_range_decay_is_rejected() {
        let (mut a, b) = pair(4);
        assert!(ema_update(&mut a, &b, 1.5).is_err());
        assert!(ema_update(&mut a, &b, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn update_is_convex(seed in 0u64..500, eta in 0.0f64..=1.0) {
            let (a, b) = pair(seed);
            let mut e = a.clone();
            ema_update(&mut e, &b, eta).unwrap();
            for ((x, y), z) in a.values().zip(b.values()).zip(e.values()) {
                prop_assert!(z >= x.min(y) && z <= x.max(y));
            }
        }
    }
}
