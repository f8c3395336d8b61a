use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::AugmentedHousehold;

/// Input features per timestep: active and reactive power.
pub const FEATURES: usize = 2;
pub const DEFAULT_WINDOW: usize = 300;
pub const DEFAULT_TRAIN_STRIDE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window_length: usize,
    pub stride: usize,
}

impl WindowPlan {
    pub fn new(window_length: usize, stride: usize) -> Result<Self> {
        if window_length == 0 {
            return Err(Error::invalid("window_length", "must be >= 1"));
        }
        if stride == 0 {
            return Err(Error::invalid("stride", "must be >= 1"));
        }
        Ok(WindowPlan { window_length, stride })
    }

    pub fn training() -> Self {
        WindowPlan {
            window_length: DEFAULT_WINDOW,
            stride: DEFAULT_TRAIN_STRIDE,
        }
    }

    /// Non-overlapping windows.
    pub fn testing() -> Self {
        WindowPlan {
            window_length: DEFAULT_WINDOW,
            stride: DEFAULT_WINDOW,
        }
    }

    pub fn count(&self, len: usize) -> usize {
        if len < self.window_length {
            0
        } else {
            (len - self.window_length) / self.stride + 1
        }
    }
}

/// Fixed-length model input with its seq2point and seq2seq targets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    /// UTC time of the first and last sample in the window.
    pub start_time: f64,
    pub end_time: f64,
    /// Row-major `T x F`: `[p0, q0, p1, q1, ...]`, raw watts and vars.
    pub inputs: Vec<f64>,
    /// State of each appliance at the window's final timestep.
    pub state_labels: Vec<u8>,
    /// Injection over the window divided by the rated capacity.
    pub injection_target: Vec<f64>,
}

impl WindowedSample {
    pub fn window_length(&self) -> usize {
        self.injection_target.len()
    }

    pub fn active(&self) -> impl Iterator<Item = f64> + '_ {
        self.inputs.iter().step_by(FEATURES).copied()
    }
}

pub fn extract_windows(h: &AugmentedHousehold, plan: WindowPlan) -> Result<Vec<WindowedSample>> {
    let len = h.len();
    let t_len = plan.window_length;
    if len < t_len {
        return Err(Error::TooShort { len, window: t_len });
    }
    let active = h.aggregate.active();
    let reactive = h
        .aggregate
        .reactive()
        .ok_or_else(|| Error::invalid("aggregate.reactive", "reactive channel missing"))?;
    let rated = h.injection.rated_capacity();
    let injection = h.injection.series().active();
    let grid = h.grid();

    let count = plan.count(len);
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * plan.stride;
        let end = start + t_len;
        let mut inputs = Vec::with_capacity(t_len * FEATURES);
        for t in start..end {
            inputs.push(active[t]);
            inputs.push(reactive[t]);
        }
        out.push(WindowedSample {
            start_time: grid.time_at(start),
            end_time: grid.time_at(end - 1),
            inputs,
            state_labels: h.appliances.iter().map(|a| a.states.states()[end - 1]).collect(),
            injection_target: injection[start..end].iter().map(|v| (v / rated).clamp(0.0, 1.0)).collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synthesize_household;
    use crate::types::{ApplianceSpec, InjectionProfile, PowerSeries};
    use proptest::prelude::*;

    pub(crate) fn toy_household(len: usize) -> AugmentedHousehold {
        let a: Vec<f64> = (0..len).map(|i| if (i / 7) % 2 == 0 { 120.0 } else { 0.0 }).collect();
        let pv: Vec<f64> = (0..len).map(|i| (i % 50) as f64).collect();
        let spec = ApplianceSpec::appliance("a", 60.0, 0.9).unwrap();
        let inj = InjectionProfile::new(PowerSeries::new("pv", 0.0, 6.0, pv, None).unwrap(), 100.0, 0.96).unwrap();
        synthesize_household(&[PowerSeries::new("a", 0.0, 6.0, a, None).unwrap()], &[spec], None, &inj).unwrap()
    }

    #[test]
    fn window_counts() {
        let h = toy_household(600);
        assert_eq!(extract_windows(&h, WindowPlan::new(300, 300).unwrap()).unwrap().len(), 2);
        let h = toy_household(300);
        assert_eq!(extract_windows(&h, WindowPlan::new(300, 1).unwrap()).unwrap().len(), 1);
        let h = toy_household(299);
        assert!(matches!(
            extract_windows(&h, WindowPlan::new(300, 1).unwrap()),
            Err(Error::TooShort { len: 299, window: 300 })
        ));
    }

    #[test]
    fn window_contents() {
        let h = toy_household(40);
        let ws = extract_windows(&h, WindowPlan::new(10, 5).unwrap()).unwrap();
        let w = &ws[1];
        assert_eq!(w.start_time, 30.0);
        assert_eq!(w.end_time, 84.0);
        assert_eq!(w.inputs.len(), 20);
        assert_eq!(w.inputs[0], h.aggregate.active()[5]);
        assert_eq!(w.inputs[1], h.aggregate.reactive().unwrap()[5]);
        assert_eq!(w.state_labels, vec![h.appliances[0].states.states()[14]]);
        assert_eq!(w.injection_target[3], h.injection.series().active()[8] / 100.0);
        assert!(w.injection_target.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn label_only_depends_on_final_step() {
        let h = toy_household(30);
        let plan = WindowPlan::new(10, 10).unwrap();
        let before = extract_windows(&h, plan).unwrap();
        let mut changed = h.clone();
        let mut states = changed.appliances[0].states.states().to_vec();
        for (i, s) in states.iter_mut().enumerate() {
            if i % 10 != 9 {
                *s ^= 1;
            }
        }
        changed.appliances[0].states =
            crate::types::StateSequence::new("a", h.grid(), states).unwrap();
        let after = extract_windows(&changed, plan).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.state_labels, b.state_labels);
        }
    }

    proptest! {
        #[test]
        fn count_formula(len in 1usize..400, t in 1usize..60, stride in 1usize..40) {
            let h = toy_household(len);
            let plan = WindowPlan::new(t, stride).unwrap();
            match extract_windows(&h, plan) {
                Ok(ws) => {
                    prop_assert!(len >= t);
                    prop_assert_eq!(ws.len(), (len - t) / stride + 1);
                }
                Err(_) => prop_assert!(len < t),
            }
        }
    }
}
