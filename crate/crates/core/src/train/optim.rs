//! ADAM with coupled weight decay (decay folded into the gradient, matching
//! the common `weight_decay` optimizer argument).

use ndarray::ArrayD;

use crate::model::{ParamGrads, ParamState};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Per-tensor first and second moment state.
pub struct Adam {
    moments: Vec<Option<(ArrayD<f64>, ArrayD<f64>)>>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamState) -> Self {
        Self {
            moments: (0..params.len()).map(|_| None).collect(),
            step: 0,
        }
    }

    /// One update over every trainable tensor that received a gradient.
    /// Tensors without a gradient this step are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamState,
        grads: &ParamGrads,
        lr: f64,
        weight_decay: f64,
    ) {
        self.step += 1;
        let bias1 = 1.0 - BETA1.powi(self.step as i32);
        let bias2 = 1.0 - BETA2.powi(self.step as i32);

        for i in 0..params.len() {
            if !params.is_trainable(i) {
                continue;
            }
            let Some(grad) = grads.get(i) else { continue };
            let slot = &mut self.moments[i];
            if slot.is_none() {
                let zero = ArrayD::<f64>::zeros(grad.raw_dim());
                *slot = Some((zero.clone(), zero));
            }
            let (m, v) = slot.as_mut().expect("just filled");
            let theta = params.tensor_mut(i);

            ndarray::Zip::from(theta)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|t, m, v, &g| {
                    let g = g + weight_decay * *t;
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *t -= lr * m_hat / (v_hat.sqrt() + EPS);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ParamGrads, ParamState};
    use ndarray::arr1;

    fn one_param(value: f64) -> ParamState {
        let mut p = ParamState::new();
        p.insert("w", arr1(&[value]).into_dyn(), true);
        p
    }

    #[test]
    fn zero_lr_leaves_params_bitwise_unchanged() {
        let mut p = one_param(0.37);
        let mut g = ParamGrads::zeros_like(&p);
        g.accumulate(&p, "w", arr1(&[1.5]));
        let before = p.clone();
        let mut opt = Adam::new(&p);
        for _ in 0..5 {
            opt.step(&mut p, &g, 0.0, 5e-4);
        }
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        // With bias correction, the first ADAM step is lr * g / (|g| + eps).
        let mut p = one_param(1.0);
        let mut g = ParamGrads::zeros_like(&p);
        g.accumulate(&p, "w", arr1(&[0.5]));
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &g, 0.1, 0.0);
        let moved = 1.0 - p.get("w")[[0]];
        assert!((moved - 0.1).abs() < 1e-6, "{moved}");
    }

    #[test]
    fn weight_decay_pulls_toward_zero_without_gradient_signal() {
        let mut p = one_param(2.0);
        let mut g = ParamGrads::zeros_like(&p);
        g.accumulate(&p, "w", arr1(&[0.0]));
        let mut opt = Adam::new(&p);
        for _ in 0..50 {
            opt.step(&mut p, &g, 0.01, 0.1);
        }
        let w = p.get("w")[[0]];
        assert!(w < 2.0 && w > 0.0, "{w}");
    }

    #[test]
    fn untouched_tensors_stay_put() {
        let mut p = ParamState::new();
        p.insert("a", arr1(&[1.0]).into_dyn(), true);
        p.insert("stats", arr1(&[3.0]).into_dyn(), false);
        let mut g = ParamGrads::zeros_like(&p);
        g.accumulate(&p, "a", arr1(&[1.0]));
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &g, 0.1, 0.0);
        assert_eq!(p.get("stats")[[0]], 3.0);
        assert!(p.get("a")[[0]] < 1.0);
    }
}
