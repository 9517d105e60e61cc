use super::{AdamConfig, NetworkParams};

/// One bias-corrected Adam update of `param` in place. `step` is 1-based.
pub fn adam_update(
    cfg: &AdamConfig,
    step: u64,
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
) {
    let t = step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam state: first/second moment buffers shaped like the parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: NetworkParams,
    v: NetworkParams,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, like: &NetworkParams) -> Self {
        Self {
            cfg,
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams) {
        self.step += 1;
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(ms)
            .zip(vs)
        {
            adam_update(
                &self.cfg,
                self.step,
                p.data_mut(),
                g.data(),
                m.data_mut(),
                v.data_mut(),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let (mut w, mut m, mut v) = ([0.0], [0.0], [0.0]);
        adam_update(&cfg, 1, &mut w, &[1.0], &mut m, &mut v);
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((w[0] - expected).abs() < 1e-15, "{}", w[0]);
    }

    #[test]
    fn zero_gradient_keeps_parameter() {
        let cfg = AdamConfig::default();
        let (mut w, mut m, mut v) = ([0.7], [0.0], [0.0]);
        for t in 1..=100 {
            adam_update(&cfg, t, &mut w, &[0.0], &mut m, &mut v);
        }
        assert_eq!(w[0], 0.7);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let cfg = AdamConfig::default();
        let run = || {
            let (mut w, mut m, mut v) = ([0.3f64, -0.2], [0.0; 2], [0.0; 2]);
            for t in 1..=50 {
                let g = [w[0].sin(), w[1] * 3.0 - 0.1];
                adam_update(&cfg, t, &mut w, &g, &mut m, &mut v);
            }
            w
        };
        assert_eq!(run().map(f64::to_bits), run().map(f64::to_bits));
    }
}
