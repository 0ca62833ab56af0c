use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Tensor;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hyper: &Adam,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} params but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() {
        state.m = params
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        state.v = state.m.clone();
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::from_fn(vec![3], |i| i as f64)];
        let before = p.clone();
        let mut s = AdamState::default();
        for _ in 0..5 {
            adam_step(&mut p, &[Tensor::zeros(vec![3])], &mut s, &Adam::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_steps_approach_lr_times_sign() {
        let hyper = Adam {
            lr: 0.01,
            ..Adam::default()
        };
        let mut p = vec![Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()];
        let g = [Tensor::new(vec![2], vec![3.0, -0.5]).unwrap()];
        let mut s = AdamState::default();
        let mut last = p[0].clone();
        for _ in 0..200 {
            adam_step(&mut p, &g, &mut s, &hyper).unwrap();
            let step: Vec<f64> = p[0]
                .data()
                .iter()
                .zip(last.data())
                .map(|(a, b)| a - b)
                .collect();
            assert!((step[0] + 0.01).abs() < 1e-6);
            assert!((step[1] - 0.01).abs() < 1e-6);
            last = p[0].clone();
        }
    }

    #[test]
    fn one_step_on_parabola_descends() {
        let hyper = Adam {
            lr: 0.1,
            ..Adam::default()
        };
        let mut p = vec![Tensor::scalar(1.0)];
        let grad = [Tensor::scalar(2.0 * 1.0)];
        adam_step(&mut p, &grad, &mut AdamState::default(), &hyper).unwrap();
        let x = p[0].data()[0];
        assert!(x * x < 1.0);
        assert!((x - 0.9).abs() < 1e-6);
    }
}
