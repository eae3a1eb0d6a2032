use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Real, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, shaped like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Weights<F>,
    pub v: Weights<F>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(cfg: &ModelConfig) -> Self {
        AdamState { m: Weights::zeros(cfg), v: Weights::zeros(cfg), t: 0 }
    }
}

/// Bias-corrected Adam update. Fails before touching anything if a gradient
/// entry is not finite.
pub fn adam_step<F: Real>(
    weights: &mut Weights<F>,
    grads: &Weights<F>,
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
) -> Result<(), ModelError> {
    let names = ["word_emb", "param_emb", "w_input", "w_hidden", "b_gates", "w_mlp", "b_mlp", "w_out", "b_out"];
    let grad_tensors = grads.tensors();
    let shapes_match = weights.tensors().iter().map(|t| t.len()).eq(grad_tensors.iter().map(|t| t.len()))
        && state.m.tensors().len() == grad_tensors.len();
    if !shapes_match {
        return Err(ModelError::ShapeMismatch("gradient".into()));
    }
    let n_param = grads.param_emb.len();
    for (k, g) in grad_tensors.iter().enumerate() {
        if g.iter().any(|x| !x.is_finite()) {
            let name = match k {
                0 => names[0],
                k if k <= n_param => names[1],
                k => names[k - n_param + 1],
            };
            return Err(ModelError::NonFiniteGradient(name.to_string()));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let (fb1, fb2) = (F::of(b1), F::of(b2));
    let (one_b1, one_b2) = (F::of(1.0 - b1), F::of(1.0 - b2));
    let (inv_bias1, inv_bias2) = (F::of(1.0 / bias1), F::of(1.0 / bias2));
    let lr = F::of(cfg.lr);
    let eps = F::of(cfg.eps);

    let ws = weights.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((w, g), m), v) in ws.into_iter().zip(grad_tensors).zip(ms).zip(vs) {
        for i in 0..w.len() {
            let gi = g[i];
            m[i] = fb1 * m[i] + one_b1 * gi;
            v[i] = fb2 * v[i] + one_b2 * gi * gi;
            let m_hat = m[i] * inv_bias1;
            let v_hat = v[i] * inv_bias2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescale gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut Weights<F>, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = F::of(max_norm / norm);
        for t in grads.tensors_mut() {
            for x in t {
                *x *= k;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Parameter, ParameterSchema};

    fn scalar_cfg() -> ModelConfig {
        // Smallest possible layout; only b_out[0] is exercised below.
        ModelConfig::with_dims(1, ParameterSchema::empty(), 1, 1, 1).unconditioned()
    }

    fn with_bias_grad(g: f64) -> Weights<f64> {
        let mut w = Weights::zeros(&scalar_cfg());
        w.b_out[0] = g;
        w
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let cfg = ModelConfig::with_dims(
            5,
            ParameterSchema::new(vec![Parameter::new("p", &["a", "b"], 2)]).unwrap(),
            3,
            4,
            4,
        );
        let mut rng = rand::rng();
        let mut w = Weights::<f64>::random(&cfg, 0.1, &mut rng);
        let before = w.clone();
        let mut st = AdamState::new(&cfg);
        adam_step(&mut w, &Weights::zeros(&cfg), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(w, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let cfg = AdamConfig::default();
        for g in [3.0, -0.5] {
            let mut w = Weights::zeros(&scalar_cfg());
            let mut st = AdamState::new(&scalar_cfg());
            adam_step(&mut w, &with_bias_grad(g), &mut st, &cfg).unwrap();
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((w.b_out[0] - expected).abs() < 1e-15);
            assert!((w.b_out[0] + cfg.lr * g.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn two_steps_follow_scalar_recurrence() {
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let grads = [0.7, -0.2];
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.5f64);
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            x -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        let mut w = Weights::zeros(&scalar_cfg());
        w.b_out[0] = 0.5;
        let mut st = AdamState::new(&scalar_cfg());
        for g in grads {
            adam_step(&mut w, &with_bias_grad(g), &mut st, &cfg).unwrap();
        }
        assert!((w.b_out[0] - x).abs() < 1e-14);
        assert_eq!(st.t, 2);
    }

    #[test]
    fn non_finite_gradient_fails_fast() {
        let mut w = Weights::zeros(&scalar_cfg());
        w.b_out[0] = 1.0;
        let mut st = AdamState::new(&scalar_cfg());
        let err = adam_step(&mut w, &with_bias_grad(f64::NAN), &mut st, &AdamConfig::default());
        assert!(matches!(err, Err(ModelError::NonFiniteGradient(ref n)) if n == "b_out"));
        assert_eq!(w.b_out[0], 1.0);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = with_bias_grad(4.0);
        g.w_out[[0, 0]] = 3.0;
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((g.b_out[0] - 0.8).abs() < 1e-12);
        assert!((g.w_out[[0, 0]] - 0.6).abs() < 1e-12);
    }
}
