use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::{ModelParams, NnError, Tensor};

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    m: Vec<Vec<f64>>,
    #[serde(skip)]
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update. Moments are kept in `f64`.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut OptimState) -> Result<(), NnError> {
    if grads.tensors.len() != params.tensors.len() {
        return Err(NnError::Shape(format!(
            "{} gradients for {} parameters",
            grads.tensors.len(),
            params.tensors.len()
        )));
    }
    for ((name, p), g) in params.tensors.iter().zip(&grads.tensors) {
        if p.shape() != g.shape() {
            return Err(NnError::Shape(format!(
                "gradient for {name} is {:?}, parameter is {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(NnError::NonFinite("gradient"));
        }
    }
    if state.m.is_empty() {
        state.m = params.tensors.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (k, ((_, p), g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        update(
            p,
            g,
            m,
            v,
            state.learning_rate,
            state.beta1,
            state.beta2,
            state.eps,
            c1,
            c2,
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn update(
    p: &mut Tensor,
    g: &Tensor,
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
) {
    for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
        let gv = f64::from(gv);
        *mv = b1 * *mv + (1.0 - b1) * gv;
        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
        let step = lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
        *pv = (f64::from(*pv) - step) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvBlockConfig, ModelConfig};

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            input_shape: [4, 8, 8],
            conv_blocks: vec![ConvBlockConfig::same3x3(2)],
            dense: vec![3],
            output_range_db: [40.0, 180.0],
        };
        ModelParams::init(&cfg, 3).unwrap()
    }

    fn grads_like(p: &ModelParams, v: f32) -> Gradients {
        Gradients {
            tensors: p
                .tensors
                .iter()
                .map(|(_, t)| Tensor::new(t.shape().to_vec(), vec![v; t.len()]).unwrap())
                .collect(),
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = params();
        let before = p.clone();
        let mut s = OptimState::new(1e-3);
        let g = grads_like(&p, 0.0);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_moves_by_learning_rate() {
        let mut p = params();
        let before = p.clone();
        let mut s = OptimState::new(1e-3);
        let g = grads_like(&p, 0.5);
        adam_step(&mut p, &g, &mut s).unwrap();
        for ((_, a), (_, b)) in p.tensors.iter().zip(&before.tensors) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(((y - x) as f64 - 1e-3).abs() < 1e-6, "{y} -> {x}");
            }
        }
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = params();
        let mut s = OptimState::new(1e-3);
        let mut g = grads_like(&p, 1.0);
        g.tensors.pop();
        assert!(matches!(adam_step(&mut p, &g, &mut s), Err(NnError::Shape(_))));
        let mut g = grads_like(&p, 1.0);
        g.tensors[0].data_mut()[0] = f32::NAN;
        assert_eq!(adam_step(&mut p, &g, &mut s), Err(NnError::NonFinite("gradient")));
    }
}
