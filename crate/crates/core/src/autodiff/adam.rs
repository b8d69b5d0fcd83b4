use super::{Tensor, TensorError};

/// Hyperparameters of the Adam optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub timestep: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            timestep: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One bias-corrected Adam update. `frozen[i]` parameters are skipped and
    /// left bit-identical; their moments are not touched either.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        frozen: &[bool],
    ) -> Result<(), TensorError> {
        if params.len() != grads.len()
            || params.len() != frozen.len()
            || params.len() != self.first_moment.len()
        {
            return Err(TensorError::Invalid {
                op: "adam_step",
                reason: format!(
                    "{} params, {} grads, {} freeze flags, {} moment slots",
                    params.len(),
                    grads.len(),
                    frozen.len(),
                    self.first_moment.len()
                ),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.timestep += 1;
        let c = self.config;
        let t = self.timestep as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if frozen[i] {
                continue;
            }
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= c.lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor {
        Tensor::vector(vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = scalar_param(0.7);
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        for _ in 0..5 {
            st.step(&mut [&mut p], &[scalar_param(0.0)], &[false]).unwrap();
        }
        assert_eq!(p.data()[0], 0.7);
        assert_eq!(st.timestep, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut p = scalar_param(1.0);
        let mut st = AdamState::new(cfg, &[&p]);
        st.step(&mut [&mut p], &[scalar_param(1.0)], &[false]).unwrap();
        // m_hat = v_hat = 1 after bias correction.
        let expected = 1.0 - cfg.lr / (1.0 + cfg.epsilon);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_reference_trace() {
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.8,
            beta2: 0.95,
            epsilon: 1e-8,
        };
        let grads = [0.3, 0.3];
        // Hand-rolled scalar Adam.
        let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            w -= cfg.lr * mh / (vh.sqrt() + cfg.epsilon);
        }
        let mut p = scalar_param(2.0);
        let mut st = AdamState::new(cfg, &[&p]);
        for g in grads {
            st.step(&mut [&mut p], &[scalar_param(g)], &[false]).unwrap();
        }
        assert!((p.data()[0] - w).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut a = Tensor::vector(vec![0.1, -0.2]).unwrap();
        let mut b = Tensor::vector(vec![0.5]).unwrap();
        let before = a.clone();
        let mut st = AdamState::new(AdamConfig::default(), &[&a, &b]);
        for _ in 0..3 {
            st.step(
                &mut [&mut a, &mut b],
                &[Tensor::vector(vec![1.0, 1.0]).unwrap(), scalar_param(1.0)],
                &[true, false],
            )
            .unwrap();
        }
        assert_eq!(a, before);
        assert!(b.data()[0] < 0.5);
    }

    #[test]
    fn rejects_mismatched_gradient_shape() {
        let mut p = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        let err = st
            .step(&mut [&mut p], &[scalar_param(1.0)], &[false])
            .unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
        assert_eq!(st.timestep, 0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![
            Tensor::vector(vec![3.0]).unwrap(),
            Tensor::vector(vec![4.0]).unwrap(),
        ];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
    }
}
