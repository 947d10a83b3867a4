//! Direct and transposed convolution kernels (2D and 3D).
//!
//! Both ranks share one 3-axis implementation: 2D inputs are promoted to a
//! depth-1 volume. The forward path lowers each sample to an im2col matrix
//! and runs a GEMM; backward reuses the same lowering, and the transposed
//! convolution is the exact adjoint (col2im scatter with fixed ordering).

use crate::error::TensorError;
use crate::tensor::Scalar;

type Result<T> = std::result::Result<T, TensorError>;

/// Output extent of a strided, padded cross-correlation.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Output extent of the transposed convolution with the same parameters.
pub fn conv_transpose_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input - 1) * stride + kernel - 2 * padding
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    image: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    sites: [usize; 3],
}

impl Geometry {
    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
    fn rows(&self) -> usize {
        self.channels * self.kernel_volume()
    }
    fn cols(&self) -> usize {
        self.sites.iter().product()
    }
    fn image_volume(&self) -> usize {
        self.image.iter().product()
    }
}

fn gemm(
    a: &[Scalar],
    b: &[Scalar],
    out: &mut [Scalar],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    beta: Scalar,
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
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gathers sliding-window patches of `image [C, geometry.image]` into
/// `col [rows, cols]`; out-of-bounds (padding) reads are zero.
fn im2col(image: &[Scalar], geo: &Geometry, col: &mut [Scalar]) {
    let [id, ih, iw] = geo.image;
    let [kd, kh, kw] = geo.kernel;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.padding;
    let [od, oh, ow] = geo.sites;
    let cols = geo.cols();
    let mut row = 0usize;
    for c in 0..geo.channels {
        let chan = &image[c * id * ih * iw..(c + 1) * id * ih * iw];
        for zk in 0..kd {
            for yk in 0..kh {
                for xk in 0..kw {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let mut site = 0usize;
                    for oz in 0..od {
                        let z = (oz * sd + zk) as isize - pd as isize;
                        if z < 0 || z >= id as isize {
                            dst[site..site + oh * ow].fill(0.0);
                            site += oh * ow;
                            continue;
                        }
                        let zb = z as usize * ih * iw;
                        for oy in 0..oh {
                            let y = (oy * sh + yk) as isize - ph as isize;
                            if y < 0 || y >= ih as isize {
                                dst[site..site + ow].fill(0.0);
                                site += ow;
                                continue;
                            }
                            let yb = zb + y as usize * iw;
                            let x0 = xk as isize - pw as isize;
                            if sw == 1 {
                                // contiguous fast path: copy the in-range span
                                let lo = (-x0).max(0) as usize;
                                let hi = ((iw as isize - x0).max(0) as usize).min(ow);
                                dst[site..site + lo.min(ow)].fill(0.0);
                                if hi > lo {
                                    let src0 = (x0 + lo as isize) as usize;
                                    dst[site + lo..site + hi]
                                        .copy_from_slice(&chan[yb + src0..yb + src0 + hi - lo]);
                                }
                                if ow > hi.max(lo) {
                                    dst[site + hi.max(lo)..site + ow].fill(0.0);
                                }
                                site += ow;
                            } else {
                                for ox in 0..ow {
                                    let x = (ox * sw) as isize + x0;
                                    dst[site] = if x < 0 || x >= iw as isize {
                                        0.0
                                    } else {
                                        chan[yb + x as usize]
                                    };
                                    site += 1;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col` back into `image`, which must be
/// zeroed by the caller. Accumulation order is fixed (row-major over rows,
/// then sites).
fn col2im(col: &[Scalar], geo: &Geometry, image: &mut [Scalar]) {
    let [id, ih, iw] = geo.image;
    let [kd, kh, kw] = geo.kernel;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.padding;
    let [od, oh, ow] = geo.sites;
    let cols = geo.cols();
    let mut row = 0usize;
    for c in 0..geo.channels {
        let chan = &mut image[c * id * ih * iw..(c + 1) * id * ih * iw];
        for zk in 0..kd {
            for yk in 0..kh {
                for xk in 0..kw {
                    let src = &col[row * cols..(row + 1) * cols];
                    let mut site = 0usize;
                    for oz in 0..od {
                        let z = (oz * sd + zk) as isize - pd as isize;
                        if z < 0 || z >= id as isize {
                            site += oh * ow;
                            continue;
                        }
                        let zb = z as usize * ih * iw;
                        for oy in 0..oh {
                            let y = (oy * sh + yk) as isize - ph as isize;
                            if y < 0 || y >= ih as isize {
                                site += ow;
                                continue;
                            }
                            let yb = zb + y as usize * iw;
                            for ox in 0..ow {
                                let x = (ox * sw + xk) as isize - pw as isize;
                                if x >= 0 && x < iw as isize {
                                    chan[yb + x as usize] += src[site];
                                }
                                site += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

struct ConvPlan {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    geo: Geometry,
    spatial_rank: usize,
}

fn plan(
    in_shape: &[usize],
    k_shape: &[usize],
    b_shape: &[usize],
    stride: usize,
    padding: usize,
    transpose: bool,
) -> Result<ConvPlan> {
    let rank = in_shape.len();
    if rank != 4 && rank != 5 {
        return Err(TensorError::Dimension(format!(
            "conv input must be [B,C,H,W] or [B,C,D,H,W], got {in_shape:?}"
        )));
    }
    if k_shape.len() != rank {
        return Err(TensorError::Dimension(format!(
            "kernel rank {} does not match input rank {rank}",
            k_shape.len()
        )));
    }
    if stride < 1 {
        return Err(TensorError::Dimension("stride must be >= 1".into()));
    }
    let spatial_rank = rank - 2;
    let batch = in_shape[0];
    let in_ch = in_shape[1];
    // kernel layout is [K, C, spatial...]; transpose maps K channels -> C
    let (kernel_in_ch, out_ch) = if transpose {
        (k_shape[0], k_shape[1])
    } else {
        (k_shape[1], k_shape[0])
    };
    if in_ch != kernel_in_ch {
        return Err(TensorError::ShapeMismatch {
            context: "input channels vs kernel channels",
            lhs: in_shape.to_vec(),
            rhs: k_shape.to_vec(),
        });
    }
    if b_shape != [out_ch] {
        return Err(TensorError::ShapeMismatch {
            context: "conv bias",
            lhs: vec![out_ch],
            rhs: b_shape.to_vec(),
        });
    }
    // promote 2D to a depth-1 volume
    let mut image = [1usize; 3];
    let mut kernel = [1usize; 3];
    let mut str3 = [1usize; 3];
    let mut pad3 = [0usize; 3];
    for a in 0..spatial_rank {
        image[3 - spatial_rank + a] = in_shape[2 + a];
        kernel[3 - spatial_rank + a] = k_shape[2 + a];
        str3[3 - spatial_rank + a] = stride;
        pad3[3 - spatial_rank + a] = padding;
    }
    let mut sites = [1usize; 3];
    if transpose {
        // `image` axes describe the transpose *output* geometry; sites are the
        // transpose input extents.
        for a in 0..3 {
            let i = image[a];
            let o = (i as isize - 1) * str3[a] as isize + kernel[a] as isize
                - 2 * pad3[a] as isize;
            if o < 1 {
                return Err(TensorError::Dimension(format!(
                    "transposed conv output extent {o} (input {i}, kernel {}, stride {}, pad {})",
                    kernel[a], str3[a], pad3[a]
                )));
            }
            sites[a] = i;
            image[a] = o as usize;
        }
    } else {
        for a in 0..3 {
            if image[a] + 2 * pad3[a] < kernel[a] {
                return Err(TensorError::Dimension(format!(
                    "input extent {} + 2*pad {} smaller than kernel {}",
                    image[a], pad3[a], kernel[a]
                )));
            }
            sites[a] = conv_out_extent(image[a], kernel[a], str3[a], pad3[a]);
        }
    }
    let geo = Geometry {
        channels: if transpose { out_ch } else { in_ch },
        image,
        kernel,
        stride: str3,
        padding: pad3,
        sites,
    };
    Ok(ConvPlan {
        batch,
        in_ch,
        out_ch,
        geo,
        spatial_rank,
    })
}

fn spatial_shape(prefix: [usize; 2], extents: [usize; 3], spatial_rank: usize) -> Vec<usize> {
    let mut shape = vec![prefix[0], prefix[1]];
    shape.extend_from_slice(&extents[3 - spatial_rank..]);
    shape
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv_forward(
    in_shape: &[usize],
    input: &[Scalar],
    k_shape: &[usize],
    kernel: &[Scalar],
    b_shape: &[usize],
    bias: &[Scalar],
    stride: usize,
    padding: usize,
) -> Result<(Vec<usize>, Vec<Scalar>)> {
    let p = plan(in_shape, k_shape, b_shape, stride, padding, false)?;
    let (rows, cols) = (p.geo.rows(), p.geo.cols());
    let mut col = vec![0.0; rows * cols];
    let in_vol = p.in_ch * p.geo.image_volume();
    let out_vol = p.out_ch * cols;
    let mut out = vec![0.0; p.batch * out_vol];
    for b in 0..p.batch {
        im2col(&input[b * in_vol..(b + 1) * in_vol], &p.geo, &mut col);
        let dst = &mut out[b * out_vol..(b + 1) * out_vol];
        gemm(kernel, &col, dst, p.out_ch, rows, cols, false, false, 0.0);
        for (k, chunk) in dst.chunks_exact_mut(cols).enumerate() {
            let bv = bias[k];
            for v in chunk {
                *v += bv;
            }
        }
    }
    let shape = spatial_shape([p.batch, p.out_ch], p.geo.sites, p.spatial_rank);
    Ok((shape, out))
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv_backward(
    in_shape: &[usize],
    input: &[Scalar],
    k_shape: &[usize],
    kernel: &[Scalar],
    grad_out: &[Scalar],
    stride: usize,
    padding: usize,
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> (Option<Vec<Scalar>>, Option<Vec<Scalar>>, Option<Vec<Scalar>>) {
    let p = plan(in_shape, k_shape, &[k_shape[0]], stride, padding, false)
        .expect("backward of a validated forward");
    let (rows, cols) = (p.geo.rows(), p.geo.cols());
    let in_vol = p.in_ch * p.geo.image_volume();
    let out_vol = p.out_ch * cols;
    let mut dx = need_input.then(|| vec![0.0; p.batch * in_vol]);
    let mut dw = need_kernel.then(|| vec![0.0; kernel.len()]);
    let mut db = need_bias.then(|| vec![0.0; p.out_ch]);
    let mut col = vec![0.0; rows * cols];
    for b in 0..p.batch {
        let g = &grad_out[b * out_vol..(b + 1) * out_vol];
        if let Some(dx) = dx.as_mut() {
            // dcol = W^T (rows x K) * g (K x cols)
            gemm(kernel, g, &mut col, rows, p.out_ch, cols, true, false, 0.0);
            col2im(&col, &p.geo, &mut dx[b * in_vol..(b + 1) * in_vol]);
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&input[b * in_vol..(b + 1) * in_vol], &p.geo, &mut col);
            // dW (K x rows) += g (K x cols) * col^T (cols x rows)
            gemm(g, &col, dw, p.out_ch, cols, rows, false, true, 1.0);
        }
        if let Some(db) = db.as_mut() {
            for (k, chunk) in g.chunks_exact(cols).enumerate() {
                db[k] += chunk.iter().sum::<Scalar>();
            }
        }
    }
    (dx, dw, db)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv_transpose_forward(
    in_shape: &[usize],
    input: &[Scalar],
    k_shape: &[usize],
    kernel: &[Scalar],
    b_shape: &[usize],
    bias: &[Scalar],
    stride: usize,
    padding: usize,
) -> Result<(Vec<usize>, Vec<Scalar>)> {
    let p = plan(in_shape, k_shape, b_shape, stride, padding, true)?;
    let (rows, cols) = (p.geo.rows(), p.geo.cols());
    let out_vol = p.out_ch * p.geo.image_volume();
    let in_vol = p.in_ch * cols;
    let mut col = vec![0.0; rows * cols];
    let mut out = vec![0.0; p.batch * out_vol];
    for b in 0..p.batch {
        let x = &input[b * in_vol..(b + 1) * in_vol];
        // col = W^T (rows x K) * x (K x cols), then scatter back to the image
        gemm(kernel, x, &mut col, rows, p.in_ch, cols, true, false, 0.0);
        let dst = &mut out[b * out_vol..(b + 1) * out_vol];
        col2im(&col, &p.geo, dst);
        let chan_vol = p.geo.image_volume();
        for (c, chunk) in dst.chunks_exact_mut(chan_vol).enumerate() {
            let bv = bias[c];
            for v in chunk {
                *v += bv;
            }
        }
    }
    let shape = spatial_shape([p.batch, p.out_ch], p.geo.image, p.spatial_rank);
    Ok((shape, out))
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv_transpose_backward(
    in_shape: &[usize],
    input: &[Scalar],
    k_shape: &[usize],
    kernel: &[Scalar],
    grad_out: &[Scalar],
    stride: usize,
    padding: usize,
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> (Option<Vec<Scalar>>, Option<Vec<Scalar>>, Option<Vec<Scalar>>) {
    let p = plan(in_shape, k_shape, &[k_shape[1]], stride, padding, true)
        .expect("backward of a validated forward");
    let (rows, cols) = (p.geo.rows(), p.geo.cols());
    let out_vol = p.out_ch * p.geo.image_volume();
    let in_vol = p.in_ch * cols;
    let mut dx = need_input.then(|| vec![0.0; p.batch * in_vol]);
    let mut dw = need_kernel.then(|| vec![0.0; kernel.len()]);
    let mut db = need_bias.then(|| vec![0.0; p.out_ch]);
    let mut col = vec![0.0; rows * cols];
    for b in 0..p.batch {
        let g = &grad_out[b * out_vol..(b + 1) * out_vol];
        if dx.is_some() || dw.is_some() {
            im2col(g, &p.geo, &mut col);
        }
        if let Some(dx) = dx.as_mut() {
            // dX (K x cols) = W (K x rows) * col (rows x cols)
            gemm(
                kernel,
                &col,
                &mut dx[b * in_vol..(b + 1) * in_vol],
                p.in_ch,
                rows,
                cols,
                false,
                false,
                0.0,
            );
        }
        if let Some(dw) = dw.as_mut() {
            // dW (K x rows) += X (K x cols) * col^T (cols x rows)
            let x = &input[b * in_vol..(b + 1) * in_vol];
            gemm(x, &col, dw, p.in_ch, cols, rows, false, true, 1.0);
        }
        if let Some(db) = db.as_mut() {
            let chan_vol = p.geo.image_volume();
            for (c, chunk) in g.chunks_exact(chan_vol).enumerate() {
                db[c] += chunk.iter().sum::<Scalar>();
            }
        }
    }
    (dx, dw, db)
}
