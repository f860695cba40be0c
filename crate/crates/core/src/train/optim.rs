use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamWConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    /// Zeroed moments mirroring `params`.
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![T::ZERO; p.len()]).collect(),
            v: params.iter().map(|p| vec![T::ZERO; p.len()]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update. Weight decay is applied to the parameter directly
/// (`p ← p − lr·wd·p`) before the bias-corrected Adam step.
pub fn adamw_step<T: Real>(
    params: &[Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<Vec<Tensor<T>>> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adamw_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::Contract(format!(
                "adamw_step: parameter {i} has shape {:?} but gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (nb1, nb2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
    let bc1 = T::from_f64(1.0 / (1.0 - c.beta1.powi(t)));
    let bc2 = T::from_f64(1.0 / (1.0 - c.beta2.powi(t)));
    let decay = T::from_f64(lr * c.weight_decay);
    let lr_t = T::from_f64(lr);
    let eps = T::from_f64(c.eps);

    let mut out = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut next = p.to_vec();
        for (j, (x, &gj)) in next.iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + nb1 * gj;
            v[j] = b2 * v[j] + nb2 * gj * gj;
            let mhat = m[j] * bc1;
            let vhat = v[j] * bc2;
            *x -= decay * *x;
            *x -= lr_t * mhat / (vhat.sqrt() + eps);
        }
        out.push(Tensor::new(p.shape().to_vec(), next)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn first_step_closed_form() {
        let p = one(0.5);
        let mut st = OptimState::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
        );
        let lr = 1e-3;
        let next = adamw_step(&p, &one(1.0), &mut st, lr).unwrap();
        let expected = 0.5 - lr / (1.0 + 1e-8);
        assert!((next[0].data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_lr_is_identity() {
        let p = vec![Tensor::from_fn([3, 2], |i| i as f64 - 2.5)];
        let g = vec![Tensor::full([3, 2], 0.7)];
        let mut st = OptimState::new(AdamWConfig::default(), &p);
        assert_eq!(adamw_step(&p, &g, &mut st, 0.0).unwrap(), p);
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let p = vec![Tensor::from_fn([4], |i| i as f64)];
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg, &p);
        let mut cur = p.clone();
        for _ in 0..5 {
            cur = adamw_step(&cur, &[Tensor::zeros([4])], &mut st, 0.1).unwrap();
        }
        assert_eq!(cur, p);
    }

    #[test]
    fn decay_is_decoupled() {
        // zero gradient: only the decay term moves the parameter
        let p = one(2.0);
        let mut st = OptimState::new(AdamWConfig::default(), &p);
        let next = adamw_step(&p, &one(0.0), &mut st, 0.1).unwrap();
        assert!((next[0].data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut p = one(0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg, &p);
        let mut last = 0.0;
        for _ in 0..200 {
            p = adamw_step(&p, &one(-3.0), &mut st, 1e-2).unwrap();
            let now = p[0].data()[0];
            assert!((now - last - 1e-2).abs() < 1e-6);
            last = now;
        }
    }

    #[test]
    fn shape_mismatch() {
        let p = one(1.0);
        let mut st = OptimState::new(AdamWConfig::default(), &p);
        let g = vec![Tensor::zeros([2])];
        assert!(matches!(
            adamw_step(&p, &g, &mut st, 0.1),
            Err(Error::Contract(_))
        ));
    }
}
