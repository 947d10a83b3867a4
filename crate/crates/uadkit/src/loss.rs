//! Training losses: the plain two-term ELBO and the collapse-robust variant
//! that normalizes the reconstruction term by its moving mean and ramps the
//! KL weight with a cyclical schedule.
//!
//! The robust total at iteration `t` is
//! `raw_recon / sigma + beta(t) * kl`, where `sigma` is the mean of the last
//! `L` raw reconstruction values (excluding the current one) and `beta`
//! ramps linearly from 0 to 1 over the first half of each `T`-iteration
//! cycle, then holds at 1. Both `sigma` and `beta` are constants with
//! respect to gradients.

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};
use std::collections::VecDeque;

/// Cycle length default, in iterations.
pub const DEFAULT_CYCLE_LEN: usize = 50;
/// Moving-mean window default, in iterations.
pub const DEFAULT_WINDOW_LEN: usize = 10;
/// Lower bound on the normalizer as reconstruction approaches zero.
pub const SIGMA_FLOOR: Scalar = 1e-8;

/// Cyclical KL weight: with `tau = t mod cycle_len`, `2*tau/cycle_len` while
/// `tau < cycle_len/2`, else 1.
pub fn beta(t: usize, cycle_len: usize) -> Scalar {
    assert!(cycle_len >= 2, "cycle length must be >= 2");
    let tau = t % cycle_len;
    if 2 * tau < cycle_len {
        2.0 * tau as Scalar / cycle_len as Scalar
    } else {
        1.0
    }
}

/// Position in the cyclical annealing schedule.
#[derive(Debug, Clone)]
pub struct BetaSchedule {
    pub cycle_len: usize,
    pub t: usize,
}

impl BetaSchedule {
    pub fn new(cycle_len: usize) -> Self {
        BetaSchedule { cycle_len, t: 0 }
    }

    pub fn current(&self) -> Scalar {
        beta(self.t, self.cycle_len)
    }
}

/// FIFO moving mean over the last `window_len` raw reconstruction values.
#[derive(Debug, Clone)]
pub struct MovingMean {
    window_len: usize,
    window: VecDeque<Scalar>,
}

impl MovingMean {
    pub fn new(window_len: usize) -> Self {
        assert!(window_len >= 1);
        MovingMean {
            window_len,
            window: VecDeque::with_capacity(window_len),
        }
    }

    /// Mean of the stored values, floored at [`SIGMA_FLOOR`]. `None` while
    /// the window is empty.
    pub fn mean(&self) -> Option<Scalar> {
        if self.window.is_empty() {
            return None;
        }
        let m = self.window.iter().sum::<Scalar>() / self.window.len() as Scalar;
        Some(m.max(SIGMA_FLOOR))
    }

    pub fn push(&mut self, value: Scalar) {
        if self.window.len() == self.window_len {
            self.window.pop_front();
        }
        self.window.push_back(value);
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }
}

/// Components of one robust-loss evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub raw_recon: Scalar,
    pub sigma: Scalar,
    pub normalized_recon: Scalar,
    pub kl: Scalar,
    pub beta: Scalar,
    pub total: Scalar,
}

/// Schedule position, normalization window and the last evaluated
/// components.
#[derive(Debug, Clone)]
pub struct LossState {
    pub schedule: BetaSchedule,
    pub sigma: MovingMean,
    pub last: LossComponents,
}

impl LossState {
    pub fn new(cycle_len: usize, window_len: usize) -> Self {
        LossState {
            schedule: BetaSchedule::new(cycle_len),
            sigma: MovingMean::new(window_len),
            last: LossComponents::default(),
        }
    }
}

impl Default for LossState {
    fn default() -> Self {
        LossState::new(DEFAULT_CYCLE_LEN, DEFAULT_WINDOW_LEN)
    }
}

/// Mean absolute elementwise difference, as a graph node.
pub fn l1_reconstruction(x: &Tensor, x_hat: &Tensor) -> Result<Tensor, TensorError> {
    Ok(x.sub(x_hat)?.abs().mean())
}

/// Mean squared elementwise difference, as a graph node.
pub fn l2_reconstruction(x: &Tensor, x_hat: &Tensor) -> Result<Tensor, TensorError> {
    let d = x.sub(x_hat)?;
    Ok(d.mul(&d)?.mean())
}

/// Closed-form KL divergence from `N(mu, diag(exp(logvar)))` to the standard
/// normal prior: `0.5 * sum_i(mu_i^2 + exp(logvar_i) - logvar_i - 1)`,
/// summed over latent dimensions and averaged over the batch (leading axis).
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<Tensor, TensorError> {
    if mu.shape() != logvar.shape() {
        return Err(TensorError::ShapeMismatch {
            context: "kl_divergence",
            lhs: mu.shape().to_vec(),
            rhs: logvar.shape().to_vec(),
        });
    }
    let batch = mu.shape()[0] as Scalar;
    let mu_sq = mu.mul(mu)?;
    let var = logvar.exp();
    let inner = mu_sq.add(&var)?.sub(logvar)?.add_scalar(-1.0);
    Ok(inner.sum().mul_scalar(0.5 / batch))
}

/// Per-latent-unit KL terms (plain values, no graph). Units partition the
/// latent dimensions: one unit per latent dimension for a rank-2 latent
/// `[B, N]`, one unit per channel for a spatial latent `[B, N, ...]`.
/// The returned values sum to [`kl_divergence`].
pub fn kl_per_unit(mu: &Tensor, logvar: &Tensor) -> Vec<Scalar> {
    assert_eq!(mu.shape(), logvar.shape());
    let batch = mu.shape()[0];
    let units = mu.shape()[1];
    let per_unit_dims: usize = mu.shape()[2..].iter().product();
    let unit_stride = per_unit_dims.max(1);
    let sample_stride = units * unit_stride;
    let mut out = vec![0.0; units];
    for b in 0..batch {
        for u in 0..units {
            let base = b * sample_stride + u * unit_stride;
            let mut acc = 0.0;
            for i in base..base + unit_stride {
                let m = mu.data()[i];
                let lv = logvar.data()[i];
                acc += 0.5 * (m * m + lv.exp() - lv - 1.0);
            }
            out[u] += acc;
        }
    }
    for v in &mut out {
        *v /= batch as Scalar;
    }
    out
}

/// Plain two-term ELBO loss with an `l1` or `l2` reconstruction term
/// (`d` in {1, 2}) and unweighted KL.
pub fn elbo_loss(
    x: &Tensor,
    x_hat: &Tensor,
    mu: &Tensor,
    logvar: &Tensor,
    d: u8,
) -> Result<Tensor, TensorError> {
    let recon = match d {
        1 => l1_reconstruction(x, x_hat)?,
        2 => l2_reconstruction(x, x_hat)?,
        _ => {
            return Err(TensorError::Domain(format!(
                "reconstruction norm d must be 1 or 2, got {d}"
            )))
        }
    };
    recon.add(&kl_divergence(mu, logvar)?)
}

/// One step of the collapse-robust loss. Returns the total as a graph node
/// (gradients flow through the raw reconstruction and KL terms only; the
/// normalizer and the KL weight are constants) and advances `state`: the
/// window absorbs the current raw value and `t` increments.
pub fn robust_loss(
    state: &mut LossState,
    x: &Tensor,
    x_hat: &Tensor,
    mu: &Tensor,
    logvar: &Tensor,
) -> Result<Tensor, TensorError> {
    let raw = l1_reconstruction(x, x_hat)?;
    let kl = kl_divergence(mu, logvar)?;
    let raw_value = raw.item();
    // Warm start: an empty window normalizes by the current value itself.
    let sigma = state
        .sigma
        .mean()
        .unwrap_or_else(|| raw_value.max(SIGMA_FLOOR));
    let b = state.schedule.current();
    let total = raw.mul_scalar(1.0 / sigma).add(&kl.mul_scalar(b))?;
    state.last = LossComponents {
        raw_recon: raw_value,
        sigma,
        normalized_recon: raw_value / sigma,
        kl: kl.item(),
        beta: b,
        total: total.item(),
    };
    state.sigma.push(raw_value);
    state.schedule.t += 1;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn beta_schedule_values() {
        assert_eq!(beta(0, 50), 0.0);
        assert_eq!(beta(25, 50), 1.0);
        assert_eq!(beta(49, 50), 1.0);
        assert_eq!(beta(50, 50), 0.0); // cycle restart
        assert!((beta(62, 50) - 0.48).abs() < 1e-15);
        assert!((beta(10, 50) - 0.4).abs() < 1e-15);
        assert_eq!(beta(24, 50), 0.96);
    }

    #[test]
    fn beta_ramps_monotonically_within_half_cycle() {
        for t in 0..24 {
            assert!(beta(t, 50) < beta(t + 1, 50));
        }
        for t in 25..49 {
            assert_eq!(beta(t, 50), 1.0);
        }
    }

    #[test]
    fn moving_mean_window_eviction() {
        let mut m = MovingMean::new(3);
        assert!(m.mean().is_none());
        m.push(1.0);
        assert_eq!(m.mean(), Some(1.0));
        m.push(2.0);
        m.push(3.0);
        assert_eq!(m.mean(), Some(2.0));
        m.push(10.0); // evicts 1.0
        assert_eq!(m.mean(), Some(5.0));
    }

    #[test]
    fn moving_mean_floors_at_sigma_floor() {
        let mut m = MovingMean::new(2);
        m.push(0.0);
        assert_eq!(m.mean(), Some(SIGMA_FLOOR));
    }

    #[test]
    fn kl_of_standard_normal_posterior_is_zero() {
        let mu = Tensor::zeros(&[2, 4]);
        let logvar = Tensor::zeros(&[2, 4]);
        assert_eq!(kl_divergence(&mu, &logvar).unwrap().item(), 0.0);
    }

    #[test]
    fn kl_hand_value() {
        // Single dim: mu=1, logvar=0 -> 0.5*(1+1-0-1) = 0.5
        let mu = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let logvar = Tensor::zeros(&[1, 1]);
        assert_eq!(kl_divergence(&mu, &logvar).unwrap().item(), 0.5);
    }

    #[test]
    fn kl_matches_monte_carlo_estimate() {
        // E_q[log q(z) - log p(z)] estimated by sampling matches closed form.
        let mu_v = [0.3, -0.7];
        let lv_v = [0.2, -0.4];
        let mu = Tensor::from_vec(&[1, 2], mu_v.to_vec()).unwrap();
        let logvar = Tensor::from_vec(&[1, 2], lv_v.to_vec()).unwrap();
        let analytic = kl_divergence(&mu, &logvar).unwrap().item();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let n = 400_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for i in 0..2 {
                let sd = (lv_v[i] as f64 / 2.0).exp();
                let z = mu_v[i] + sd * normal.sample(&mut rng);
                let log_q = -0.5 * ((z - mu_v[i]) / sd).powi(2) - sd.ln();
                let log_p = -0.5 * z * z;
                acc += log_q - log_p;
            }
        }
        let mc = acc / n as f64;
        assert!(
            (mc - analytic).abs() / analytic < 0.01,
            "MC {mc} vs analytic {analytic}"
        );
    }

    #[test]
    fn kl_per_unit_sums_to_total_dense_and_spatial() {
        let mu = Tensor::from_vec(&[2, 3], vec![0.1, -0.2, 0.3, 0.5, 0.0, -0.4]).unwrap();
        let lv = Tensor::from_vec(&[2, 3], vec![0.2, -0.1, 0.0, -0.3, 0.4, 0.1]).unwrap();
        let per = kl_per_unit(&mu, &lv);
        assert_eq!(per.len(), 3);
        let total = kl_divergence(&mu, &lv).unwrap().item();
        assert!((per.iter().sum::<Scalar>() - total).abs() < 1e-12);

        // Spatial latent [B, C, H, W]: one unit per channel.
        let mu_s = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|i| i as Scalar * 0.1).collect()).unwrap();
        let lv_s = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|i| -0.05 * i as Scalar).collect()).unwrap();
        let per_s = kl_per_unit(&mu_s, &lv_s);
        assert_eq!(per_s.len(), 2);
        let total_s = kl_divergence(&mu_s, &lv_s).unwrap().item();
        assert!((per_s.iter().sum::<Scalar>() - total_s).abs() < 1e-12);
    }

    #[test]
    fn l1_and_l2_reconstruction_values() {
        let x = Tensor::from_vec(&[1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = Tensor::from_vec(&[1, 4], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(l1_reconstruction(&x, &y).unwrap().item(), 1.25);
        assert_eq!(l2_reconstruction(&x, &y).unwrap().item(), 2.25);
    }

    #[test]
    fn elbo_rejects_bad_norm_order() {
        let x = Tensor::zeros(&[1, 2]);
        let mu = Tensor::zeros(&[1, 2]);
        assert!(elbo_loss(&x, &x, &mu, &mu, 3).is_err());
    }

    #[test]
    fn robust_loss_warm_start_normalizes_to_one() {
        // First iteration: empty window, sigma := current raw value, so the
        // normalized reconstruction is exactly 1 and beta(0) = 0.
        let mut state = LossState::default();
        let x = Tensor::from_vec(&[1, 2], vec![0.4, 0.8]).unwrap();
        let x_hat = Tensor::from_vec(&[1, 2], vec![0.2, 0.4]).unwrap();
        let mu = Tensor::from_vec(&[1, 2], vec![0.5, -0.5]).unwrap();
        let lv = Tensor::zeros(&[1, 2]);
        let total = robust_loss(&mut state, &x, &x_hat, &mu, &lv).unwrap();
        assert_eq!(state.last.normalized_recon, 1.0);
        assert_eq!(state.last.beta, 0.0);
        assert_eq!(total.item(), 1.0);
        assert_eq!(state.schedule.t, 1);
        assert_eq!(state.sigma.len(), 1);
    }

    #[test]
    fn robust_loss_sigma_excludes_current_value() {
        let mut state = LossState::new(50, 10);
        let mu = Tensor::zeros(&[1, 1]);
        let lv = Tensor::zeros(&[1, 1]);
        let x = Tensor::zeros(&[1, 1]);
        // raw values are |x - x_hat| = 0.2 then 0.6
        let x1 = Tensor::from_vec(&[1, 1], vec![0.2]).unwrap();
        let x2 = Tensor::from_vec(&[1, 1], vec![0.6]).unwrap();
        robust_loss(&mut state, &x, &x1, &mu, &lv).unwrap();
        robust_loss(&mut state, &x, &x2, &mu, &lv).unwrap();
        // Second call: sigma is the mean of {0.2} only.
        assert_eq!(state.last.sigma, 0.2);
        assert!((state.last.normalized_recon - 3.0).abs() < 1e-12);
    }

    #[test]
    fn robust_loss_window_tracks_last_l_values() {
        let mut state = LossState::new(50, 3);
        let mu = Tensor::zeros(&[1, 1]);
        let lv = Tensor::zeros(&[1, 1]);
        let x = Tensor::zeros(&[1, 1]);
        for v in [0.1, 0.2, 0.3, 0.4, 0.5] {
            let x_hat = Tensor::from_vec(&[1, 1], vec![v]).unwrap();
            robust_loss(&mut state, &x, &x_hat, &mu, &lv).unwrap();
        }
        // At the last call the window held {0.2, 0.3, 0.4}.
        assert!((state.last.sigma - 0.3).abs() < 1e-12);
    }

    #[test]
    fn robust_loss_gradient_treats_sigma_and_beta_as_constants() {
        // d(total)/d(x_hat) should be grad(raw)/sigma + beta*0; check against
        // the analytic sign/scale of the L1 term.
        let mut state = LossState::new(50, 10);
        state.sigma.push(0.5);
        state.schedule.t = 10; // beta = 0.4
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let x_hat = Tensor::from_vec(&[1, 2], vec![0.0, 0.5]).unwrap().requires_grad();
        let mu = Tensor::from_vec(&[1, 1], vec![0.3]).unwrap();
        let lv = Tensor::zeros(&[1, 1]);
        let total = robust_loss(&mut state, &x, &x_hat, &mu, &lv).unwrap();
        let grads = total.backward().unwrap();
        let g = grads.get(&x_hat).unwrap();
        // raw = mean(|x - x_hat|); d raw/d x_hat = -sign(x - x_hat)/2.
        // Scaled by 1/sigma = 2.
        assert_eq!(g, &[-1.0, 1.0]);
        assert_eq!(state.last.beta, 0.4);
    }
}
