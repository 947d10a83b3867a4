//! Dense N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable row-major `f64` buffer plus shape metadata.
//! Every operation returns a fresh tensor that records its inputs, so a
//! scalar result can be differentiated with [`Tensor::backward`]. Gradients
//! accumulate additively across fan-out and are returned as a [`Gradients`]
//! map keyed by tensor identity.
//!
//! Convolution semantics are cross-correlation (no kernel flip). All
//! accumulation orders are fixed, so repeated runs on identical inputs are
//! bit-identical.

mod conv;
mod gradcheck;

pub use conv::{conv_out_extent, conv_transpose_out_extent};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckEntry, GradCheckReport};

use crate::error::TensorError;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub type Scalar = f64;
type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Operation that produced a tensor, with the inputs its backward rule needs.
enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, Scalar),
    Neg(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Abs(Tensor),
    Sigmoid(Tensor),
    LeakyRelu(Tensor, Scalar),
    Sum(Tensor),
    Mean(Tensor),
    Reshape(Tensor),
    Dense {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
    },
    Conv {
        input: Tensor,
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    ConvTranspose {
        input: Tensor,
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<Scalar>,
    requires_grad: bool,
    op: Op,
}

/// Immutable N-dimensional array of `f64` with autodiff tracking.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn new_node(shape: Vec<usize>, data: Vec<Scalar>, requires_grad: bool, op: Op) -> Tensor {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    Tensor {
        inner: Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            op,
        }),
    }
}

impl Tensor {
    /// Builds a leaf tensor; fails if the shape does not match the data length
    /// or any extent is zero.
    pub fn from_vec(shape: &[usize], data: Vec<Scalar>) -> Result<Tensor> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::Dimension(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(new_node(shape.to_vec(), data, false, Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        new_node(shape.to_vec(), vec![0.0; numel], false, Op::Leaf)
    }

    pub fn full(shape: &[usize], value: Scalar) -> Tensor {
        let numel = shape.iter().product();
        new_node(shape.to_vec(), vec![value; numel], false, Op::Leaf)
    }

    pub fn scalar(value: Scalar) -> Tensor {
        new_node(vec![1], vec![value], false, Op::Leaf)
    }

    /// Marks a leaf as a differentiation target. Returns a new handle to the
    /// same values.
    pub fn requires_grad(&self) -> Tensor {
        new_node(self.shape().to_vec(), self.data().to_vec(), true, Op::Leaf)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[Scalar] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Scalar {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    fn same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                context,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&self, f: impl Fn(Scalar) -> Scalar, op: Op) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        new_node(self.shape().to_vec(), data, self.inner.requires_grad, op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(new_node(
            self.shape().to_vec(),
            data,
            self.inner.requires_grad || other.inner.requires_grad,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(new_node(
            self.shape().to_vec(),
            data,
            self.inner.requires_grad || other.inner.requires_grad,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(new_node(
            self.shape().to_vec(),
            data,
            self.inner.requires_grad || other.inner.requires_grad,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn add_scalar(&self, value: Scalar) -> Tensor {
        self.unary(|v| v + value, Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, value: Scalar) -> Tensor {
        self.unary(|v| v * value, Op::MulScalar(self.clone(), value))
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|v| -v, Op::Neg(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Scalar::exp, Op::Exp(self.clone()))
    }

    /// Natural logarithm; the whole input must be strictly positive.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|v| **v <= 0.0) {
            return Err(TensorError::Domain(format!("log of non-positive value {v}")));
        }
        Ok(self.unary(Scalar::ln, Op::Log(self.clone())))
    }

    pub fn abs(&self) -> Tensor {
        self.unary(Scalar::abs, Op::Abs(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, Op::Sigmoid(self.clone()))
    }

    pub fn leaky_relu(&self, alpha: Scalar) -> Tensor {
        self.unary(
            |v| if v >= 0.0 { v } else { alpha * v },
            Op::LeakyRelu(self.clone(), alpha),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    pub fn sum(&self) -> Tensor {
        let total = fixed_order_sum(self.data());
        new_node(vec![1], vec![total], self.inner.requires_grad, Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let total = fixed_order_sum(self.data()) / self.numel() as Scalar;
        new_node(vec![1], vec![total], self.inner.requires_grad, Op::Mean(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({numel})",
                self.shape(),
                self.numel()
            )));
        }
        Ok(new_node(
            shape.to_vec(),
            self.data().to_vec(),
            self.inner.requires_grad,
            Op::Reshape(self.clone()),
        ))
    }

    /// Affine map per batch row: `input [B,F] x weight [G,F]^T + bias [G]`.
    pub fn dense(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || weight.shape().len() != 2 {
            return Err(TensorError::Dimension(format!(
                "dense expects rank-2 input and weight, got {:?} and {:?}",
                self.shape(),
                weight.shape()
            )));
        }
        let (b, f) = (self.shape()[0], self.shape()[1]);
        let (g, fw) = (weight.shape()[0], weight.shape()[1]);
        if f != fw {
            return Err(TensorError::ShapeMismatch {
                context: "dense inner dimensions",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if bias.shape() != [g] {
            return Err(TensorError::ShapeMismatch {
                context: "dense bias",
                lhs: vec![g],
                rhs: bias.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; b * g];
        // out[b,g] = sum_f x[b,f] * w[g,f] + bias[g]
        matmul(
            self.data(),
            weight.data(),
            &mut out,
            b,
            f,
            g,
            false,
            true,
        );
        for row in out.chunks_exact_mut(g) {
            for (o, bv) in row.iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
        let rg = self.inner.requires_grad || weight.inner.requires_grad || bias.inner.requires_grad;
        Ok(new_node(
            vec![b, g],
            out,
            rg,
            Op::Dense {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
            },
        ))
    }

    /// Cross-correlation with stride and symmetric zero padding.
    ///
    /// `input` is `[B,C,H,W]` or `[B,C,D,H,W]`, `kernel` is `[K,C,kh,kw]` or
    /// `[K,C,kd,kh,kw]`, `bias` is `[K]`.
    pub fn conv(&self, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let (out_shape, out) = conv::conv_forward(
            self.shape(),
            self.data(),
            kernel.shape(),
            kernel.data(),
            bias.shape(),
            bias.data(),
            stride,
            padding,
        )?;
        let rg = self.inner.requires_grad || kernel.inner.requires_grad || bias.inner.requires_grad;
        Ok(new_node(
            out_shape,
            out,
            rg,
            Op::Conv {
                input: self.clone(),
                kernel: kernel.clone(),
                bias: bias.clone(),
                stride,
                padding,
            },
        ))
    }

    /// Adjoint of [`Tensor::conv`] with the same kernel, stride and padding.
    ///
    /// `input` has `K` channels, `kernel` is `[K,C,..]`, output has `C`
    /// channels and spatial extent `(in - 1)*stride - 2*padding + k`.
    pub fn conv_transpose(
        &self,
        kernel: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (out_shape, out) = conv::conv_transpose_forward(
            self.shape(),
            self.data(),
            kernel.shape(),
            kernel.data(),
            bias.shape(),
            bias.data(),
            stride,
            padding,
        )?;
        let rg = self.inner.requires_grad || kernel.inner.requires_grad || bias.inner.requires_grad;
        Ok(new_node(
            out_shape,
            out,
            rg,
            Op::ConvTranspose {
                input: self.clone(),
                kernel: kernel.clone(),
                bias: bias.clone(),
                stride,
                padding,
            },
        ))
    }

    /// Reverse-mode differentiation from a scalar root. Every reachable leaf
    /// with `requires_grad` receives a gradient of its own shape.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape().to_vec()));
        }
        let order = topo_order(self);
        let mut grads: HashMap<u64, Vec<Scalar>> = HashMap::new();
        grads.insert(self.inner.id, vec![1.0]);
        // Reverse topological order: each node's grad is complete before it
        // propagates to its parents.
        for node in order.iter().rev() {
            let Some(grad) = grads.get(&node.inner.id).cloned() else {
                continue;
            };
            propagate(node, &grad, &mut grads);
        }
        Ok(Gradients { map: grads })
    }
}

/// Gradient map produced by a backward pass, keyed by tensor identity.
pub struct Gradients {
    map: HashMap<u64, Vec<Scalar>>,
}

impl Gradients {
    pub fn get(&self, tensor: &Tensor) -> Option<&[Scalar]> {
        self.map.get(&tensor.inner.id).map(|v| v.as_slice())
    }
}

pub fn sigmoid(v: Scalar) -> Scalar {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Left-to-right sequential sum; the fixed accumulation order behind the
/// determinism contract.
pub fn fixed_order_sum(values: &[Scalar]) -> Scalar {
    values.iter().sum()
}

/// Row-major matrix product `out = a (m x k) * b (k x n)`, with optional
/// transposes interpreting `a` as `k x m` / `b` as `n x k` storage.
pub(crate) fn matmul(
    a: &[Scalar],
    b: &[Scalar],
    out: &mut [Scalar],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    // Iterative post-order DFS; visited set keyed by node id.
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.inner.id) {
            continue;
        }
        if !t.inner.requires_grad {
            // Constant subgraphs contribute nothing to any gradient.
            continue;
        }
        stack.push((t.clone(), true));
        for p in parents(&t) {
            stack.push((p, false));
        }
    }
    order
}

fn parents(t: &Tensor) -> Vec<Tensor> {
    match &t.inner.op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a.clone(), b.clone()],
        Op::AddScalar(a)
        | Op::MulScalar(a, _)
        | Op::Neg(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Abs(a)
        | Op::Sigmoid(a)
        | Op::LeakyRelu(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a) => vec![a.clone()],
        Op::Dense { input, weight, bias }
        | Op::Conv { input, kernel: weight, bias, .. }
        | Op::ConvTranspose { input, kernel: weight, bias, .. } => {
            vec![input.clone(), weight.clone(), bias.clone()]
        }
    }
}

fn accumulate(grads: &mut HashMap<u64, Vec<Scalar>>, target: &Tensor, contribution: Vec<Scalar>) {
    if !target.inner.requires_grad {
        return;
    }
    match grads.entry(target.inner.id) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (g, c) in e.get_mut().iter_mut().zip(&contribution) {
                *g += c;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(contribution);
        }
    }
}

fn propagate(node: &Tensor, grad: &[Scalar], grads: &mut HashMap<u64, Vec<Scalar>>) {
    match &node.inner.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, a, grad.to_vec());
            accumulate(grads, b, grad.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, a, grad.to_vec());
            accumulate(grads, b, grad.iter().map(|g| -g).collect());
        }
        Op::Mul(a, b) => {
            accumulate(
                grads,
                a,
                grad.iter().zip(b.data()).map(|(g, bv)| g * bv).collect(),
            );
            accumulate(
                grads,
                b,
                grad.iter().zip(a.data()).map(|(g, av)| g * av).collect(),
            );
        }
        Op::AddScalar(a) => accumulate(grads, a, grad.to_vec()),
        Op::MulScalar(a, s) => {
            accumulate(grads, a, grad.iter().map(|g| g * s).collect());
        }
        Op::Neg(a) => accumulate(grads, a, grad.iter().map(|g| -g).collect()),
        Op::Exp(a) => {
            // output saved on the node itself
            accumulate(
                grads,
                a,
                grad.iter().zip(node.data()).map(|(g, y)| g * y).collect(),
            );
        }
        Op::Log(a) => {
            accumulate(
                grads,
                a,
                grad.iter().zip(a.data()).map(|(g, x)| g / x).collect(),
            );
        }
        Op::Abs(a) => {
            // subgradient 0 at the kink
            accumulate(
                grads,
                a,
                grad.iter()
                    .zip(a.data())
                    .map(|(g, x)| g * x.signum() * (*x != 0.0) as u8 as Scalar)
                    .collect(),
            );
        }
        Op::Sigmoid(a) => {
            accumulate(
                grads,
                a,
                grad.iter()
                    .zip(node.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            );
        }
        Op::LeakyRelu(a, alpha) => {
            accumulate(
                grads,
                a,
                grad.iter()
                    .zip(a.data())
                    .map(|(g, x)| if *x >= 0.0 { *g } else { g * alpha })
                    .collect(),
            );
        }
        Op::Sum(a) => {
            accumulate(grads, a, vec![grad[0]; a.numel()]);
        }
        Op::Mean(a) => {
            let g = grad[0] / a.numel() as Scalar;
            accumulate(grads, a, vec![g; a.numel()]);
        }
        Op::Reshape(a) => accumulate(grads, a, grad.to_vec()),
        Op::Dense { input, weight, bias } => {
            let (b, f) = (input.shape()[0], input.shape()[1]);
            let g = weight.shape()[0];
            if input.inner.requires_grad {
                // dX [B,F] = dY [B,G] * W [G,F]
                let mut dx = vec![0.0; b * f];
                matmul(grad, weight.data(), &mut dx, b, g, f, false, false);
                accumulate(grads, input, dx);
            }
            if weight.inner.requires_grad {
                // dW [G,F] = dY^T [G,B] * X [B,F]
                let mut dw = vec![0.0; g * f];
                matmul(grad, input.data(), &mut dw, g, b, f, true, false);
                accumulate(grads, weight, dw);
            }
            if bias.inner.requires_grad {
                let mut db = vec![0.0; g];
                for row in grad.chunks_exact(g) {
                    for (d, gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                accumulate(grads, bias, db);
            }
        }
        Op::Conv {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => {
            let (dx, dw, db) = conv::conv_backward(
                input.shape(),
                input.data(),
                kernel.shape(),
                kernel.data(),
                grad,
                *stride,
                *padding,
                input.inner.requires_grad,
                kernel.inner.requires_grad,
                bias.inner.requires_grad,
            );
            if let Some(dx) = dx {
                accumulate(grads, input, dx);
            }
            if let Some(dw) = dw {
                accumulate(grads, kernel, dw);
            }
            if let Some(db) = db {
                accumulate(grads, bias, db);
            }
        }
        Op::ConvTranspose {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => {
            let (dx, dw, db) = conv::conv_transpose_backward(
                input.shape(),
                input.data(),
                kernel.shape(),
                kernel.data(),
                grad,
                *stride,
                *padding,
                input.inner.requires_grad,
                kernel.inner.requires_grad,
                bias.inner.requires_grad,
            );
            if let Some(dx) = dx {
                accumulate(grads, input, dx);
            }
            if let Some(dw) = dw {
                accumulate(grads, kernel, dw);
            }
            if let Some(db) = db {
                accumulate(grads, bias, db);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Independent sliding-window oracle for cross-correlation; promotes 2D
    /// inputs to depth 1 and loops over every window position directly.
    fn naive_conv(
        input: &Tensor,
        kernel: &Tensor,
        bias: &[Scalar],
        stride: usize,
        pad: usize,
    ) -> (Vec<usize>, Vec<Scalar>) {
        let sr = input.shape().len() - 2;
        let get = |s: &[usize], i: usize| if i < 3 - sr { 1 } else { s[2 + i - (3 - sr)] };
        let (b_n, cin) = (input.shape()[0], input.shape()[1]);
        let cout = kernel.shape()[0];
        let isp = [get(input.shape(), 0), get(input.shape(), 1), get(input.shape(), 2)];
        let k = [get(kernel.shape(), 0), get(kernel.shape(), 1), get(kernel.shape(), 2)];
        let s = [if sr == 3 { stride } else { 1 }, stride, stride];
        let p = [if sr == 3 { pad } else { 0 }, pad, pad];
        let osp = [
            (isp[0] + 2 * p[0] - k[0]) / s[0] + 1,
            (isp[1] + 2 * p[1] - k[1]) / s[1] + 1,
            (isp[2] + 2 * p[2] - k[2]) / s[2] + 1,
        ];
        let ivol = isp.iter().product::<usize>();
        let mut out = vec![0.0; b_n * cout * osp.iter().product::<usize>()];
        let mut oi = 0;
        for b in 0..b_n {
            for ko in 0..cout {
                for oz in 0..osp[0] {
                    for oy in 0..osp[1] {
                        for ox in 0..osp[2] {
                            let mut acc = bias[ko];
                            for c in 0..cin {
                                for kz in 0..k[0] {
                                    for ky in 0..k[1] {
                                        for kx in 0..k[2] {
                                            let z = (oz * s[0] + kz) as isize - p[0] as isize;
                                            let y = (oy * s[1] + ky) as isize - p[1] as isize;
                                            let x = (ox * s[2] + kx) as isize - p[2] as isize;
                                            if z < 0 || y < 0 || x < 0
                                                || z >= isp[0] as isize
                                                || y >= isp[1] as isize
                                                || x >= isp[2] as isize
                                            {
                                                continue;
                                            }
                                            let ii = ((b * cin + c) * ivol)
                                                + (z as usize * isp[1] + y as usize) * isp[2]
                                                + x as usize;
                                            let wi = ((ko * cin + c) * k.iter().product::<usize>())
                                                + (kz * k[1] + ky) * k[2]
                                                + kx;
                                            acc += input.data()[ii] * kernel.data()[wi];
                                        }
                                    }
                                }
                            }
                            out[oi] = acc;
                            oi += 1;
                        }
                    }
                }
            }
        }
        let mut shape = vec![b_n, cout];
        shape.extend_from_slice(&osp[3 - sr..]);
        (shape, out)
    }

    fn assert_close(a: &[Scalar], b: &[Scalar], tol: Scalar) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
        }
    }

    fn inner(a: &[Scalar], b: &[Scalar]) -> Scalar {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_one_by_one_kernel_scales() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = x.conv(&k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_two_by_two_window_sums() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(|v| v as Scalar).collect()).unwrap();
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = x.conv(&k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_output_extent_formula() {
        assert_eq!(conv_out_extent(160, 4, 2, 1), 80);
        assert_eq!(conv_transpose_out_extent(80, 4, 2, 1), 160);
    }

    #[test]
    fn conv_transpose_single_site_broadcast() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = x.conv_transpose(&k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        let mut r = rng(7);
        let a = random_tensor(&[1, 1, 4, 4], &mut r);
        let b = random_tensor(&[1, 1, 3, 3], &mut r);
        let k = random_tensor(&[1, 1, 2, 2], &mut r);
        let zero = Tensor::zeros(&[1]);
        let conv_a = a.conv(&k, &zero, 1, 0).unwrap();
        let convt_b = b.conv_transpose(&k, &zero, 1, 0).unwrap();
        let lhs = inner(conv_a.data(), b.data());
        let rhs = inner(a.data(), convt_b.data());
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn adjointness_strided_3d() {
        let mut r = rng(11);
        let a = random_tensor(&[2, 2, 6, 6, 6], &mut r);
        let k = random_tensor(&[3, 2, 4, 4, 4], &mut r);
        let b = random_tensor(&[2, 3, 3, 3, 3], &mut r);
        let zk = Tensor::zeros(&[3]);
        let zc = Tensor::zeros(&[2]);
        let lhs = inner(a.conv(&k, &zk, 2, 1).unwrap().data(), b.data());
        let rhs = inner(a.data(), b.conv_transpose(&k, &zc, 2, 1).unwrap().data());
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut r = rng(3);
        for (ishape, kshape, stride, pad) in [
            (vec![2, 3, 7, 9], vec![4, 3, 3, 3], 1, 1),
            (vec![1, 2, 8, 8], vec![3, 2, 4, 4], 2, 1),
            (vec![2, 1, 5, 6, 7], vec![2, 1, 3, 3, 3], 1, 0),
            (vec![1, 2, 8, 8, 8], vec![3, 2, 4, 4, 4], 2, 1),
        ] {
            let x = random_tensor(&ishape, &mut r);
            let k = random_tensor(&kshape, &mut r);
            let b = random_tensor(&[kshape[0]], &mut r);
            let y = x.conv(&k, &b, stride, pad).unwrap();
            let (oshape, oracle) = naive_conv(&x, &k, b.data(), stride, pad);
            assert_eq!(y.shape(), oshape.as_slice());
            assert_close(y.data(), &oracle, 1e-12);
        }
    }

    #[test]
    fn conv_linearity() {
        let mut r = rng(5);
        let a = random_tensor(&[1, 2, 6, 6], &mut r);
        let b = random_tensor(&[1, 2, 6, 6], &mut r);
        let k = random_tensor(&[3, 2, 3, 3], &mut r);
        let zero = Tensor::zeros(&[3]);
        let alpha = 0.37;
        let lhs = a
            .mul_scalar(alpha)
            .add(&b)
            .unwrap()
            .conv(&k, &zero, 1, 1)
            .unwrap();
        let rhs = a
            .conv(&k, &zero, 1, 1)
            .unwrap()
            .mul_scalar(alpha)
            .add(&b.conv(&k, &zero, 1, 1).unwrap())
            .unwrap();
        assert_close(lhs.data(), rhs.data(), 1e-10);
    }

    #[test]
    fn conv_then_transpose_restores_architecture_extents() {
        for extent in [64usize, 32, 16, 8, 160, 192] {
            let down = conv_out_extent(extent, 4, 2, 1);
            assert_eq!(conv_transpose_out_extent(down, 4, 2, 1), extent);
        }
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 2, 2]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(
            x.conv(&k, &b, 1, 0),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dense_identity_and_hand_example() {
        let w_id = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::zeros(&[2]);
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(x.dense(&w_id, &zero).unwrap().data(), &[1.0, 2.0]);

        let w = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap();
        assert_eq!(x.dense(&w, &b).unwrap().data(), &[5.0, 0.0]);
    }

    #[test]
    fn dense_batch_rows_are_independent() {
        let mut r = rng(13);
        let w = random_tensor(&[3, 4], &mut r);
        let b = random_tensor(&[3], &mut r);
        let x0 = random_tensor(&[1, 4], &mut r);
        let x1 = random_tensor(&[1, 4], &mut r);
        let both = Tensor::from_vec(
            &[2, 4],
            x0.data().iter().chain(x1.data()).copied().collect(),
        )
        .unwrap();
        let y = both.dense(&w, &b).unwrap();
        assert_close(&y.data()[..3], x0.dense(&w, &b).unwrap().data(), 1e-14);
        assert_close(&y.data()[3..], x1.dense(&w, &b).unwrap().data(), 1e-14);
    }

    #[test]
    fn elementwise_examples() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 2.0, 0.0]).unwrap();
        assert_eq!(x.abs().data(), &[1.0, 2.0, 0.0]);
        assert_eq!(Tensor::scalar(0.0).sigmoid().item(), 0.5);
        let y = Tensor::from_vec(&[2], vec![-5.0, 5.0]).unwrap();
        assert_eq!(y.leaky_relu(0.2).data(), &[-1.0, 5.0]);
        let z = Tensor::from_vec(&[2], vec![1.0, 3.0]).unwrap();
        assert_eq!(z.mean().item(), 2.0);
    }

    #[test]
    fn log_rejects_non_positive_input() {
        let x = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(x.log(), Err(TensorError::Domain(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap().requires_grad();
        let grads = x.sum().backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum_is_two_x() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap().requires_grad();
        let grads = x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_across_fanout() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().requires_grad();
        // y = sum(x) + sum(x)
        let y = x.sum().add(&x.sum()).unwrap();
        let grads = y.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().requires_grad();
        assert!(matches!(
            x.abs().backward(),
            Err(TensorError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn grad_check_every_primitive() {
        let mut r = rng(17);
        let step = 1e-5;
        let tol = 1e-4;
        let x = random_tensor(&[2, 3], &mut r);
        let y = random_tensor(&[2, 3], &mut r);
        let checks: Vec<(&str, GradCheckEntry)> = vec![
            ("add", grad_check("add", &[x.clone(), y.clone()], |t| t[0].add(&t[1]).unwrap().sum(), step)),
            ("sub", grad_check("sub", &[x.clone(), y.clone()], |t| t[0].sub(&t[1]).unwrap().mean(), step)),
            ("mul", grad_check("mul", &[x.clone(), y.clone()], |t| t[0].mul(&t[1]).unwrap().sum(), step)),
            ("exp", grad_check("exp", &[x.clone()], |t| t[0].exp().sum(), step)),
            ("sigmoid", grad_check("sigmoid", &[x.clone()], |t| t[0].sigmoid().sum(), step)),
            ("leaky_relu", grad_check("leaky_relu", &[x.clone()], |t| t[0].leaky_relu(0.2).sum(), step)),
            ("mul_scalar", grad_check("mul_scalar", &[x.clone()], |t| t[0].mul_scalar(-1.7).sum(), step)),
            ("mean", grad_check("mean", &[x.clone()], |t| t[0].mean(), step)),
            ("log", {
                let pos = Tensor::from_vec(&[3], vec![0.5, 1.5, 2.5]).unwrap();
                grad_check("log", &[pos], |t| t[0].log().unwrap().sum(), step)
            }),
            ("abs", {
                // keep away from the kink
                let far = Tensor::from_vec(&[4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap();
                grad_check("abs", &[far], |t| t[0].abs().sum(), step)
            }),
        ];
        for (name, entry) in checks {
            assert!(entry.passed(tol), "{name}: max rel error {}", entry.max_rel_error);
        }
    }

    #[test]
    fn grad_check_dense() {
        let mut r = rng(19);
        let x = random_tensor(&[2, 4], &mut r);
        let w = random_tensor(&[3, 4], &mut r);
        let b = random_tensor(&[3], &mut r);
        let entry = grad_check(
            "dense",
            &[x, w, b],
            |t| t[0].dense(&t[1], &t[2]).unwrap().sum(),
            1e-5,
        );
        assert!(entry.passed(1e-6), "max rel error {}", entry.max_rel_error);
    }

    #[test]
    fn grad_check_conv2d() {
        let mut r = rng(23);
        let x = random_tensor(&[1, 2, 5, 5], &mut r);
        let k = random_tensor(&[2, 2, 3, 3], &mut r);
        let b = random_tensor(&[2], &mut r);
        let entry = grad_check(
            "conv2d",
            &[x, k, b],
            |t| t[0].conv(&t[1], &t[2], 2, 1).unwrap().mul(&t[0].conv(&t[1], &t[2], 2, 1).unwrap()).unwrap().sum(),
            1e-5,
        );
        assert!(entry.passed(1e-4), "max rel error {}", entry.max_rel_error);
    }

    #[test]
    fn grad_check_conv3d() {
        let mut r = rng(29);
        let x = random_tensor(&[1, 1, 4, 4, 4], &mut r);
        let k = random_tensor(&[2, 1, 2, 2, 2], &mut r);
        let b = random_tensor(&[2], &mut r);
        let entry = grad_check(
            "conv3d",
            &[x, k, b],
            |t| t[0].conv(&t[1], &t[2], 2, 0).unwrap().sigmoid().sum(),
            1e-5,
        );
        assert!(entry.passed(1e-4), "max rel error {}", entry.max_rel_error);
    }

    #[test]
    fn grad_check_conv_transpose() {
        let mut r = rng(31);
        let x = random_tensor(&[1, 2, 3, 3], &mut r);
        let k = random_tensor(&[2, 3, 4, 4], &mut r);
        let b = random_tensor(&[3], &mut r);
        let entry = grad_check(
            "conv_transpose2d",
            &[x, k, b],
            |t| t[0].conv_transpose(&t[1], &t[2], 2, 1).unwrap().abs().sum(),
            1e-5,
        );
        assert!(entry.passed(1e-4), "max rel error {}", entry.max_rel_error);

        let x3 = random_tensor(&[1, 2, 2, 2, 2], &mut r);
        let k3 = random_tensor(&[2, 1, 4, 4, 4], &mut r);
        let b3 = random_tensor(&[1], &mut r);
        let entry = grad_check(
            "conv_transpose3d",
            &[x3, k3, b3],
            |t| t[0].conv_transpose(&t[1], &t[2], 2, 1).unwrap().sum(),
            1e-5,
        );
        assert!(entry.passed(1e-4), "max rel error {}", entry.max_rel_error);
    }

    #[test]
    fn repeated_forward_backward_is_bit_identical() {
        let mut r = rng(37);
        let x = random_tensor(&[1, 2, 8, 8], &mut r);
        let k = random_tensor(&[3, 2, 4, 4], &mut r);
        let b = random_tensor(&[3], &mut r);
        let run = || {
            let xl = x.requires_grad();
            let kl = k.requires_grad();
            let bl = b.requires_grad();
            let y = xl.conv(&kl, &bl, 2, 1).unwrap().sigmoid().mean();
            let grads = y.backward().unwrap();
            (
                y.item(),
                grads.get(&xl).unwrap().to_vec(),
                grads.get(&kl).unwrap().to_vec(),
            )
        };
        let (v1, gx1, gk1) = run();
        let (v2, gx2, gk2) = run();
        assert!(v1 == v2 && gx1 == gx2 && gk1 == gk2);
    }
}
