use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::Model;
use crate::numerics::Matrix;

/// Hyperparameters of the decoupled-weight-decay Adam update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter group, canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Updates applied so far (bias-correction exponent).
    pub t: u64,
}

impl AdamW {
    pub fn new(model: &Model) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|p| p.data.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update. Weight decay `θ ← θ − lr·wd·θ` applies only to groups
    /// whose kind decays.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &[Matrix],
        lr: f64,
        s: &AdamWSettings,
    ) -> Result<()> {
        let mut params = model.params_mut();
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(config_err!(
                "optimizer state has {} groups, model {}, gradients {}",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - s.beta1.powi(self.t as i32);
        let bc2 = 1.0 - s.beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let decay = if p.kind.decays() { s.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, theta) in p.data.iter_mut().enumerate() {
                let g = grads[k].data()[i];
                m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g;
                v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + s.eps) + decay * *theta);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over every gradient entry.
pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::sum_of_squares).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn clipping_rescales_to_bound() {
        let mut g = vec![Matrix::row_vector(&[3.0, 4.0])];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g[0].get(0, 0) - 0.6).abs() < 1e-15);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![Matrix::row_vector(&[0.3])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].get(0, 0), 0.3);
    }

    #[test]
    fn first_step_moves_by_lr_and_decay_skips_norms() {
        let mut model = Model::new(ModelConfig::toy(), 0).unwrap();
        let before = model.clone();
        let grads: Vec<Matrix> = model
            .params()
            .iter()
            .map(|p| Matrix::filled(p.shape.0, p.shape.1, 1.0))
            .collect();
        let mut opt = AdamW::new(&model);
        let s = AdamWSettings {
            beta1: 0.9,
            beta2: 0.95,
            eps: 0.0,
            weight_decay: 0.1,
        };
        opt.step(&mut model, &grads, 0.01, &s).unwrap();
        // Bias-corrected first step is exactly sign(g) = 1.
        let gain_before = before.ln_f.gain.get(0, 0);
        assert!((model.ln_f.gain.get(0, 0) - (gain_before - 0.01)).abs() < 1e-15);
        let w = before.blocks[0].w_o.get(0, 0);
        let expect = w - 0.01 * (1.0 + 0.1 * w);
        assert!((model.blocks[0].w_o.get(0, 0) - expect).abs() < 1e-15);
        let e = before.tok_emb.get(0, 0);
        assert!((model.tok_emb.get(0, 0) - (e - 0.01)).abs() < 1e-15);
    }
}
