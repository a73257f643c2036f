//! Adam with bias correction. The paper-side recipe never names an
//! optimizer; this project fixes Adam (lr 1e-3, beta1 0.9, beta2 0.999,
//! eps 1e-8) so every training number is reproducible.

use crate::error::{FloodError, Result};
use crate::num::scalar::Scalar;
use crate::num::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(FloodError::Config(format!("adam lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[&Tensor<S>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One update over a flat parameter list. `names` is used only for error
/// reporting when a gradient is non-finite. Moment arithmetic runs in f64.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Tensor<S>],
    names: &[String],
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(FloodError::Shape(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            let name = names.get(i).map(String::as_str).unwrap_or("<unnamed>");
            return Err(FloodError::NonFinite(format!(
                "gradient for parameter '{name}'"
            )));
        }
        if g.shape() != params[i].shape() {
            return Err(FloodError::Shape(format!(
                "adam_step: grad shape {:?} vs param {:?}",
                g.shape(),
                params[i].shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let p = params[i].data_mut();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g[j].to_f64c();
            let mj = cfg.beta1 * m[j].to_f64c() + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j].to_f64c() + (1.0 - cfg.beta2) * gj * gj;
            m[j] = S::from_f64c(mj);
            v[j] = S::from_f64c(vj);
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            let upd = cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            p[j] = S::from_f64c(p[j].to_f64c() - upd);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = Tensor::<f32>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::<f32>::zeros(&[3]);
        let before = p.clone();
        let mut st = AdamState::new(&[&p]);
        adam_step(
            &mut [&mut p],
            &[g],
            &["w".into()],
            &mut st,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // constant gradient 1, step 1: bias-corrected update is exactly lr
        // (up to eps in the denominator)
        let mut p = Tensor::<f64>::scalar(0.0);
        let g = Tensor::<f64>::scalar(1.0);
        let mut st = AdamState::new(&[&p]);
        let cfg = AdamConfig::with_lr(0.1);
        adam_step(&mut [&mut p], &[g], &["w".into()], &mut st, &cfg).unwrap();
        assert!((p.item() + 0.1).abs() < 1e-6, "param {}", p.item());
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = (w - 3)^2, gradient 2(w - 3)
        let mut w = Tensor::<f64>::scalar(0.0);
        let mut st = AdamState::new(&[&w]);
        let cfg = AdamConfig::with_lr(0.3);
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * (w.item() - 3.0));
            adam_step(&mut [&mut w], &[g], &["w".into()], &mut st, &cfg).unwrap();
        }
        assert!((w.item() - 3.0).abs() < 1e-2, "w {}", w.item());
    }

    #[test]
    fn non_finite_grad_names_param() {
        let mut p = Tensor::<f32>::scalar(0.0);
        let g = Tensor::<f32>::scalar(f32::NAN);
        let mut st = AdamState::new(&[&p]);
        let err = adam_step(
            &mut [&mut p],
            &[g],
            &["encoder.w1".into()],
            &mut st,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("encoder.w1"), "{err}");
    }
}
