//! Adam optimizer with bias correction.

use crate::model::Parameters;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub epsilon: Scalar,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: Scalar) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter tensor, plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<Scalar>>,
    v: Vec<Vec<Scalar>>,
    step: u32,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }
}

/// One Adam update over every parameter. `grads` is in parameter order;
/// `None` entries (parameters unreached by backward) are skipped.
pub fn adam_step(
    params: &mut Parameters,
    grads: &[Option<&[Scalar]>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    state.step += 1;
    let t = state.step as Scalar;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = grads[i] else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.data[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}
