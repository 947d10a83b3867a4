//! The standard gradient verification suite: every differentiable primitive
//! checked exhaustively against central finite differences, plus each of the
//! four composed architectures checked at sampled parameter coordinates
//! through a full forward/loss pass.

use crate::loss::{kl_divergence, l1_reconstruction};
use crate::model::{Bottleneck, Dimensionality, VaeConfig, VaeModel};
use crate::tensor::{grad_check, grad_check_sampled, GradCheckReport, Scalar, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_CHECK_STEP: Scalar = 1e-5;
/// Smaller step for whole-model checks: the composed pass crosses ReLU and
/// L1 kinks, and the probability that a perturbation pushes one of the
/// thousands of activation sites across a kink scales with the step. f64
/// keeps central differences accurate at this step size.
pub const MODEL_GRAD_CHECK_STEP: Scalar = 1e-6;
/// Relative-error tolerance for primitive checks.
pub const GRAD_CHECK_TOL: Scalar = 1e-4;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Exhaustive checks of every primitive operation's backward rule.
pub fn primitive_suite(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = GRAD_CHECK_STEP;
    let mut report = GradCheckReport::new(GRAD_CHECK_TOL);

    let x = random_tensor(&[2, 3], &mut rng);
    let y = random_tensor(&[2, 3], &mut rng);
    report.push(grad_check("add", &[x.clone(), y.clone()], |t| t[0].add(&t[1]).unwrap().sum(), step));
    report.push(grad_check("sub", &[x.clone(), y.clone()], |t| t[0].sub(&t[1]).unwrap().sum(), step));
    report.push(grad_check("mul", &[x.clone(), y.clone()], |t| t[0].mul(&t[1]).unwrap().sum(), step));
    report.push(grad_check("neg", &[x.clone()], |t| t[0].neg().sum(), step));
    report.push(grad_check("add_scalar", &[x.clone()], |t| t[0].add_scalar(0.7).sum(), step));
    report.push(grad_check("mul_scalar", &[x.clone()], |t| t[0].mul_scalar(-1.3).sum(), step));
    report.push(grad_check("exp", &[x.clone()], |t| t[0].exp().sum(), step));
    report.push(grad_check("sigmoid", &[x.clone()], |t| t[0].sigmoid().sum(), step));
    report.push(grad_check("leaky_relu", &[x.clone()], |t| t[0].leaky_relu(0.2).sum(), step));
    report.push(grad_check("relu", &[x.clone()], |t| t[0].relu().sum(), step));
    report.push(grad_check("mean", &[x.clone()], |t| t[0].mean(), step));
    report.push(grad_check("sum", &[x.clone()], |t| t[0].sum(), step));
    report.push(grad_check("reshape", &[x.clone()], |t| {
        t[0].reshape(&[3, 2]).unwrap().sigmoid().sum()
    }, step));
    let pos = Tensor::from_vec(&[4], vec![0.3, 0.9, 1.7, 2.5]).unwrap();
    report.push(grad_check("log", &[pos], |t| t[0].log().unwrap().sum(), step));
    // keep abs away from its kink at zero
    let far = Tensor::from_vec(&[4], vec![-2.0, -0.6, 0.6, 2.0]).unwrap();
    report.push(grad_check("abs", &[far], |t| t[0].abs().sum(), step));

    let dx = random_tensor(&[2, 4], &mut rng);
    let dw = random_tensor(&[3, 4], &mut rng);
    let db = random_tensor(&[3], &mut rng);
    report.push(grad_check("dense", &[dx, dw, db], |t| {
        t[0].dense(&t[1], &t[2]).unwrap().sigmoid().sum()
    }, step));

    let cx = random_tensor(&[1, 2, 5, 5], &mut rng);
    let ck = random_tensor(&[2, 2, 3, 3], &mut rng);
    let cb = random_tensor(&[2], &mut rng);
    report.push(grad_check("conv2d", &[cx, ck, cb], |t| {
        t[0].conv(&t[1], &t[2], 2, 1).unwrap().sigmoid().sum()
    }, step));

    let vx = random_tensor(&[1, 1, 4, 4, 4], &mut rng);
    let vk = random_tensor(&[2, 1, 2, 2, 2], &mut rng);
    let vb = random_tensor(&[2], &mut rng);
    report.push(grad_check("conv3d", &[vx, vk, vb], |t| {
        t[0].conv(&t[1], &t[2], 2, 0).unwrap().sigmoid().sum()
    }, step));

    let tx = random_tensor(&[1, 2, 3, 3], &mut rng);
    let tk = random_tensor(&[2, 3, 4, 4], &mut rng);
    let tb = random_tensor(&[3], &mut rng);
    report.push(grad_check("conv_transpose2d", &[tx, tk, tb], |t| {
        t[0].conv_transpose(&t[1], &t[2], 2, 1).unwrap().sigmoid().sum()
    }, step));

    let ux = random_tensor(&[1, 2, 2, 2, 2], &mut rng);
    let uk = random_tensor(&[2, 1, 4, 4, 4], &mut rng);
    let ub = random_tensor(&[1], &mut rng);
    report.push(grad_check("conv_transpose3d", &[ux, uk, ub], |t| {
        t[0].conv_transpose(&t[1], &t[2], 2, 1).unwrap().sigmoid().sum()
    }, step));

    let mu = random_tensor(&[2, 4], &mut rng);
    let lv = random_tensor(&[2, 4], &mut rng);
    report.push(grad_check("kl_divergence", &[mu, lv], |t| {
        kl_divergence(&t[0], &t[1]).unwrap()
    }, step));

    report
}

fn desk_config(dimensionality: Dimensionality, bottleneck: Bottleneck) -> VaeConfig {
    let input_shape: Vec<usize> = match dimensionality {
        Dimensionality::TwoD => vec![1, 16, 16],
        Dimensionality::ThreeD => vec![1, 16, 16, 16],
    };
    let latent = match bottleneck {
        Bottleneck::Dense => 8,
        Bottleneck::Spatial => 4,
    };
    let mut cfg = VaeConfig::new(dimensionality, bottleneck, latent, &input_shape).unwrap();
    cfg.channels = [4, 4, 8, 8];
    cfg
}

/// End-to-end gradients of each architecture: parameters -> forward (fixed
/// epsilon) -> robust-form loss (L1 reconstruction over a constant
/// normalizer plus weighted KL; both factors are gradient constants, so a
/// unit normalizer and unit weight exercise the same graph), verified at
/// `coords_per_input` sampled coordinates of every parameter tensor.
pub fn model_suite(seed: u64, coords_per_input: usize) -> GradCheckReport {
    let mut report = GradCheckReport::new(GRAD_CHECK_TOL);
    let cases = [
        ("spatial-2d", Dimensionality::TwoD, Bottleneck::Spatial),
        ("dense-2d", Dimensionality::TwoD, Bottleneck::Dense),
        ("spatial-3d", Dimensionality::ThreeD, Bottleneck::Spatial),
        ("dense-3d", Dimensionality::ThreeD, Bottleneck::Dense),
    ];
    for (name, dimensionality, bottleneck) in cases {
        let config = desk_config(dimensionality, bottleneck);
        let model = VaeModel::init(config.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut x_shape = vec![1];
        x_shape.extend(config.input_shape.iter());
        let n: usize = x_shape.iter().product();
        let x = Tensor::from_vec(
            &x_shape,
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let epsilon = model.sample_epsilon(1, &mut rng);
        let inputs: Vec<Tensor> = model.bind(false).tensors().to_vec();
        let entry = grad_check_sampled(
            name,
            &inputs,
            |params| {
                let bound = model.bind_tensors(params);
                let (mu, logvar) = model.encode(&bound, &x).unwrap();
                let z = VaeModel::reparameterize(&mu, &logvar, &epsilon).unwrap().z;
                let x_hat = model.decode(&bound, &z).unwrap();
                let recon = l1_reconstruction(&x, &x_hat).unwrap();
                recon.add(&kl_divergence(&mu, &logvar).unwrap()).unwrap()
            },
            MODEL_GRAD_CHECK_STEP,
            coords_per_input,
            seed,
        );
        report.push(entry);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_suite_passes() {
        let report = primitive_suite(0);
        assert_eq!(report.entries.len(), 21);
        for e in &report.entries {
            assert!(e.passed(report.tol), "{}: {}", e.name, e.max_rel_error);
        }
    }

    #[test]
    fn model_suite_passes_for_all_architectures() {
        let report = model_suite(0, 3);
        assert_eq!(report.entries.len(), 4);
        for e in &report.entries {
            assert!(e.passed(report.tol), "{}: {}", e.name, e.max_rel_error);
            assert!(e.coords_checked > 0);
        }
    }
}
