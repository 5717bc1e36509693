//! Bias-corrected ADAM with a non-negativity projection on layer biases.

use crate::error::{Error, Result};

use super::{CistaNetParams, Gradients};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.eps > 0.0) {
            return Err(Error::Config(format!(
                "ADAM needs lr > 0 and eps > 0 (lr={}, eps={})",
                self.lr, self.eps
            )));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config(format!(
                "ADAM betas must lie in [0, 1) (beta1={}, beta2={})",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    /// Zeroed moments shaped like `tensors`.
    pub fn for_tensors(tensors: &[&[f64]]) -> Self {
        Self {
            first: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            second: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }

    pub fn new(params: &CistaNetParams) -> Self {
        Self::for_tensors(&params.slices())
    }

    /// One update over raw tensors.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], cfg: &AdamConfig) {
        assert_eq!(params.len(), self.first.len(), "tensor count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Applies one ADAM step to `params` and clamps every layer bias to `>= 0`.
pub fn adam_step(
    params: &mut CistaNetParams,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    let g = grads.slices();
    {
        let mut p = params.slices_mut();
        if p.len() != g.len() || p.iter().zip(&g).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Dimension("gradient layout does not match parameters".into()));
        }
        state.update(&mut p, &g, cfg);
    }
    params.clamp_biases();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, Architecture};

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = init_params(&Architecture::new(3, 5, 7, vec![3]), (0.0, 1.0), 0, None).unwrap();
        let before = p.clone();
        let g = Gradients::zeros_like(&p);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut x = vec![1.0, -2.0, 0.5];
        let g = vec![0.3, -7.0, 1e-3];
        let mut st = AdamState::for_tensors(&[&x]);
        let cfg = AdamConfig {
            eps: 1e-14,
            ..Default::default()
        };
        st.update(&mut [&mut x], &[&g], &cfg);
        for (xi, (x0, gi)) in x.iter().zip([(1.0, 0.3), (-2.0, -7.0), (0.5, 1e-3)]) {
            let expected: f64 = x0 - cfg.lr * f64::signum(gi);
            assert!((xi - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = (x0 - 1)^2 + 3 (x1 + 2)^2, minimiser (1, -2).
        let mut x = vec![1.2, -1.8];
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut st = AdamState::for_tensors(&[&x]);
        for _ in 0..100 {
            let g = vec![2.0 * (x[0] - 1.0), 6.0 * (x[1] + 2.0)];
            st.update(&mut [&mut x], &[&g], &cfg);
        }
        // Scalar reference run of the same recursion.
        let (mut r, mut m, mut v) = ([1.2f64, -1.8], [0.0f64; 2], [0.0f64; 2]);
        for t in 1..=100 {
            let g = [2.0 * (r[0] - 1.0), 6.0 * (r[1] + 2.0)];
            for i in 0..2 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                r[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
            }
        }
        assert!((x[0] - r[0]).abs() <= 1e-12 && (x[1] - r[1]).abs() <= 1e-12);
        let dist = ((x[0] - 1.0).powi(2) + (x[1] + 2.0).powi(2)).sqrt();
        assert!(dist < 1e-3, "distance {dist}");
    }

    #[test]
    fn biases_are_projected() {
        let mut p = init_params(&Architecture::new(2, 3, 5, vec![3]), (0.0, 1.0), 0, None).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.layers[0].bias = vec![5.0, -5.0];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert_eq!(p.layers[0].bias[0], 0.0);
        assert!(p.layers[0].bias[1] > 0.01);
        assert!(adam_step(&mut p, &g, &mut st, &AdamConfig { beta1: 1.0, ..cfg }).is_err());
    }
}
