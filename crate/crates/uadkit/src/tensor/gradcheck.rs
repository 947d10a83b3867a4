//! Central-finite-difference verification of analytic gradients.

use super::{Scalar, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result of checking one operation.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    /// Max relative error between analytic and central-difference gradients,
    /// over every checked coordinate of every input.
    pub max_rel_error: Scalar,
    pub coords_checked: usize,
}

impl GradCheckEntry {
    pub fn passed(&self, tol: Scalar) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

/// Collection of per-operation gradient checks against one tolerance.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: Scalar,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn new(tol: Scalar) -> Self {
        GradCheckReport { tol, entries: Vec::new() }
    }

    pub fn push(&mut self, entry: GradCheckEntry) {
        self.entries.push(entry);
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed(self.tol))
    }
}

fn rel_error(a: Scalar, n: Scalar) -> Scalar {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Checks `d f / d inputs` for a scalar-valued `f` against central finite
/// differences at every coordinate of every input.
pub fn grad_check<F>(name: &str, inputs: &[Tensor], f: F, step: Scalar) -> GradCheckEntry
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_coords(name, inputs, f, step, &coords)
}

/// Like [`grad_check`] but verifies only a seeded random subset of
/// coordinates per input. Used for composed models where the full parameter
/// sweep would be prohibitive.
pub fn grad_check_sampled<F>(
    name: &str,
    inputs: &[Tensor],
    f: F,
    step: Scalar,
    coords_per_input: usize,
    seed: u64,
) -> GradCheckEntry
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            if n <= coords_per_input {
                (0..n).collect()
            } else {
                let mut idx = sample(&mut rng, n, coords_per_input).into_vec();
                idx.sort_unstable();
                idx
            }
        })
        .collect();
    check_coords(name, inputs, f, step, &coords)
}

fn check_coords<F>(
    name: &str,
    inputs: &[Tensor],
    f: F,
    step: Scalar,
    coords: &[Vec<usize>],
) -> GradCheckEntry
where
    F: Fn(&[Tensor]) -> Tensor,
{
    // Analytic pass with grad-tracking leaves.
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.requires_grad()).collect();
    let root = f(&leaves);
    assert_eq!(root.numel(), 1, "grad_check target must be scalar");
    let grads = root.backward().expect("scalar root");

    let eval = |tensors: &[Tensor]| f(tensors).item();
    let mut max_rel: Scalar = 0.0;
    let mut checked = 0usize;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(leaf);
        for &j in &coords[i] {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut d = inputs[i].data().to_vec();
            let orig = d[j];
            d[j] = orig + step;
            plus[i] = Tensor::from_vec(inputs[i].shape(), d.clone()).unwrap();
            d[j] = orig - step;
            minus[i] = Tensor::from_vec(inputs[i].shape(), d).unwrap();
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic.map_or(0.0, |g| g[j]);
            max_rel = max_rel.max(rel_error(a, numeric));
            checked += 1;
        }
    }
    GradCheckEntry {
        name: name.to_string(),
        max_rel_error: max_rel,
        coords_checked: checked,
    }
}
