//! Segmentation and reconstruction measures: Dice, sensitivity,
//! specificity, MAE, plus connected-component labeling on voxel grids.
//!
//! Masks are flat boolean grids with a `[D, H, W]` shape; 2D callers pass a
//! depth of 1 (full connectivity then degenerates to 8-connectivity in the
//! plane).

use crate::error::TensorError;
use crate::tensor::Scalar;

/// Voxel-level confusion counts over an evaluation domain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Counts over voxels selected by `domain` (`None` = everywhere).
    pub fn from_masks(pred: &[bool], truth: &[bool], domain: Option<&[bool]>) -> Self {
        let mut c = ConfusionCounts::default();
        for i in 0..pred.len() {
            if let Some(d) = domain {
                if !d[i] {
                    continue;
                }
            }
            match (pred[i], truth[i]) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `2*tp / (2*tp + fp + fn)`; 1 when both masks are empty.
    pub fn dice(&self) -> Scalar {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as Scalar / denom as Scalar
        }
    }

    /// `tp / (tp + fn)`; `None` when the truth is empty.
    pub fn sensitivity(&self) -> Option<Scalar> {
        let denom = self.tp + self.fn_;
        (denom > 0).then(|| self.tp as Scalar / denom as Scalar)
    }

    /// `tn / (tn + fp)`; `None` when the truth covers the whole domain.
    pub fn specificity(&self) -> Option<Scalar> {
        let denom = self.tn + self.fp;
        (denom > 0).then(|| self.tn as Scalar / denom as Scalar)
    }
}

fn check_len(a: usize, b: usize) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            context: "metric operands",
            lhs: vec![a],
            rhs: vec![b],
        });
    }
    Ok(())
}

pub fn dice(pred: &[bool], truth: &[bool]) -> Result<Scalar, TensorError> {
    check_len(pred.len(), truth.len())?;
    Ok(ConfusionCounts::from_masks(pred, truth, None).dice())
}

pub fn sensitivity(pred: &[bool], truth: &[bool]) -> Result<Option<Scalar>, TensorError> {
    check_len(pred.len(), truth.len())?;
    Ok(ConfusionCounts::from_masks(pred, truth, None).sensitivity())
}

pub fn specificity(pred: &[bool], truth: &[bool]) -> Result<Option<Scalar>, TensorError> {
    check_len(pred.len(), truth.len())?;
    Ok(ConfusionCounts::from_masks(pred, truth, None).specificity())
}

/// Mean absolute voxel-wise error, optionally restricted to a domain mask.
pub fn mae(x: &[Scalar], x_hat: &[Scalar], domain: Option<&[bool]>) -> Result<Scalar, TensorError> {
    check_len(x.len(), x_hat.len())?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..x.len() {
        if let Some(d) = domain {
            if !d[i] {
                continue;
            }
        }
        acc += (x[i] - x_hat[i]).abs();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { acc / count as Scalar })
}

/// Neighborhood used for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbors only (4 in a plane, 6 in a volume).
    Face,
    /// All neighbors including diagonals (8 in a plane, 26 in a volume).
    Full,
}

/// Connected components of a mask: a label grid (0 = background, labels
/// start at 1 in scan order) and the exact size of each component.
#[derive(Debug, Clone)]
pub struct Components {
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

fn neighbor_offsets(connectivity: Connectivity) -> Vec<[isize; 3]> {
    let mut offs = Vec::new();
    for dz in -1isize..=1 {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if dz == 0 && dy == 0 && dx == 0 {
                    continue;
                }
                let manhattan = dz.abs() + dy.abs() + dx.abs();
                if connectivity == Connectivity::Face && manhattan != 1 {
                    continue;
                }
                offs.push([dz, dy, dx]);
            }
        }
    }
    offs
}

/// Labels connected components with an iterative breadth-first flood fill.
pub fn connected_components(mask: &[bool], shape: [usize; 3], connectivity: Connectivity) -> Components {
    let [d, h, w] = shape;
    assert_eq!(mask.len(), d * h * w);
    let offs = neighbor_offsets(connectivity);
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        let mut size = 0usize;
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let z = (i / (h * w)) as isize;
            let y = ((i / w) % h) as isize;
            let x = (i % w) as isize;
            for off in &offs {
                let (nz, ny, nx) = (z + off[0], y + off[1], x + off[2]);
                if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize
                {
                    continue;
                }
                let ni = (nz as usize * h + ny as usize) * w + nx as usize;
                if mask[ni] && labels[ni] == 0 {
                    labels[ni] = label;
                    queue.push_back(ni);
                }
            }
        }
        sizes.push(size);
    }
    Components { labels, sizes }
}

/// Removes components smaller than `min_size`, in place.
pub fn filter_small_components(
    mask: &mut [bool],
    shape: [usize; 3],
    connectivity: Connectivity,
    min_size: usize,
) {
    let components = connected_components(mask, shape, connectivity);
    for (i, &label) in components.labels.iter().enumerate() {
        if label != 0 && components.sizes[label as usize - 1] < min_size {
            mask[i] = false;
        }
    }
}

/// Erodes a mask by one voxel with the face-connected structuring element;
/// voxels adjacent to the grid boundary are removed.
pub fn erode_face(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = shape;
    assert_eq!(mask.len(), d * h * w);
    // In a depth-1 grid the depth axis is ignored so 2D erosion works on the
    // plane's 4-neighborhood.
    let check_depth = d > 1;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                let interior_plane = y > 0 && y + 1 < h && x > 0 && x + 1 < w;
                let interior_depth = !check_depth || (z > 0 && z + 1 < d);
                if !(interior_plane && interior_depth) {
                    continue;
                }
                let keep = mask[i - w]
                    && mask[i + w]
                    && mask[i - 1]
                    && mask[i + 1]
                    && (!check_depth || (mask[i - h * w] && mask[i + h * w]));
                out[i] = keep;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b != 0).collect()
    }

    #[test]
    fn confusion_counts_hand_case() {
        let pred = mask(&[1, 1, 0, 0, 1]);
        let truth = mask(&[1, 0, 1, 0, 1]);
        let c = ConfusionCounts::from_masks(&pred, &truth, None);
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 1, tn: 1, fn_: 1 });
        assert!((c.dice() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.sensitivity(), Some(2.0 / 3.0));
        assert_eq!(c.specificity(), Some(0.5));
    }

    #[test]
    fn dice_edge_cases() {
        let empty = mask(&[0, 0, 0]);
        let full = mask(&[1, 1, 1]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&full, &empty).unwrap(), 0.0);
        assert_eq!(dice(&full, &full).unwrap(), 1.0);
        assert_eq!(sensitivity(&empty, &empty).unwrap(), None);
        assert_eq!(specificity(&full, &full).unwrap(), None);
    }

    #[test]
    fn domain_restricts_counts() {
        let pred = mask(&[1, 1, 0, 0]);
        let truth = mask(&[1, 0, 1, 0]);
        let domain = mask(&[1, 0, 0, 1]);
        let c = ConfusionCounts::from_masks(&pred, &truth, Some(&domain));
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 0, tn: 1, fn_: 0 });
    }

    #[test]
    fn mae_hand_case_and_domain() {
        let x = [0.0, 1.0, 2.0];
        let y = [0.5, 1.0, 1.0];
        assert_eq!(mae(&x, &y, None).unwrap(), 0.5);
        let d = mask(&[1, 0, 0]);
        assert_eq!(mae(&x, &y, Some(&d)).unwrap(), 0.5);
        let none = mask(&[0, 0, 0]);
        assert_eq!(mae(&x, &y, Some(&none)).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_error() {
        assert!(dice(&mask(&[1]), &mask(&[1, 0])).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0], None).is_err());
    }

    #[test]
    fn components_two_diagonal_pixels() {
        // Diagonal pixels touch under full connectivity, not under face.
        let m = mask(&[1, 0, 0, 1]);
        let face = connected_components(&m, [1, 2, 2], Connectivity::Face);
        assert_eq!(face.count(), 2);
        let full = connected_components(&m, [1, 2, 2], Connectivity::Full);
        assert_eq!(full.count(), 1);
        assert_eq!(full.sizes, vec![2]);
    }

    #[test]
    fn components_labels_in_scan_order_with_exact_sizes() {
        // Row 0: a 2-pixel run; row 2: a single pixel.
        #[rustfmt::skip]
        let m = mask(&[
            1, 1, 0,
            0, 0, 0,
            0, 0, 1,
        ]);
        let c = connected_components(&m, [1, 3, 3], Connectivity::Face);
        assert_eq!(c.sizes, vec![2, 1]);
        assert_eq!(c.labels[0], 1);
        assert_eq!(c.labels[1], 1);
        assert_eq!(c.labels[8], 2);
    }

    #[test]
    fn components_3d_corner_touch_full_only() {
        // Two voxels sharing only a corner across a 2x2x2 cube.
        let mut m = vec![false; 8];
        m[0] = true; // (0,0,0)
        m[7] = true; // (1,1,1)
        assert_eq!(connected_components(&m, [2, 2, 2], Connectivity::Face).count(), 2);
        assert_eq!(connected_components(&m, [2, 2, 2], Connectivity::Full).count(), 1);
    }

    #[test]
    fn filter_removes_nine_voxel_blob_keeps_ten() {
        let shape = [1usize, 8, 8];
        let mut m = vec![false; 64];
        // 3x3 blob (9 voxels) in the top-left.
        for y in 0..3 {
            for x in 0..3 {
                m[y * 8 + x] = true;
            }
        }
        // 2x5 blob (10 voxels) in the bottom-right.
        for y in 6..8 {
            for x in 3..8 {
                m[y * 8 + x] = true;
            }
        }
        filter_small_components(&mut m, shape, Connectivity::Full, 10);
        assert!(!m[0], "9-voxel blob must be removed");
        assert!(m[6 * 8 + 3], "10-voxel blob must survive");
        assert_eq!(m.iter().filter(|&&b| b).count(), 10);
    }

    #[test]
    fn erosion_strips_one_voxel_shell_2d() {
        // 4x4 solid square in a depth-1 grid erodes to its 2x2 core.
        let mut m = vec![false; 36];
        for y in 1..5 {
            for x in 1..5 {
                m[y * 6 + x] = true;
            }
        }
        let e = erode_face(&m, [1, 6, 6]);
        assert_eq!(e.iter().filter(|&&b| b).count(), 4);
        assert!(e[2 * 6 + 2] && e[2 * 6 + 3] && e[3 * 6 + 2] && e[3 * 6 + 3]);
    }

    #[test]
    fn erosion_3d_solid_cube() {
        // 3x3x3 solid cube in a 5^3 grid erodes to its single center voxel.
        let mut m = vec![false; 125];
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    m[(z * 5 + y) * 5 + x] = true;
                }
            }
        }
        let e = erode_face(&m, [5, 5, 5]);
        assert_eq!(e.iter().filter(|&&b| b).count(), 1);
        assert!(e[(2 * 5 + 2) * 5 + 2]);
    }

    #[test]
    fn erosion_removes_boundary_voxels() {
        let m = vec![true; 27];
        let e = erode_face(&m, [3, 3, 3]);
        assert_eq!(e.iter().filter(|&&b| b).count(), 1);
    }

    #[test]
    fn component_sizes_partition_the_mask() {
        // Property: sizes sum to the number of set voxels; every set voxel is
        // labeled; no unset voxel is labeled.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let m: Vec<bool> = (0..512).map(|_| rng.gen_bool(0.3)).collect();
            for conn in [Connectivity::Face, Connectivity::Full] {
                let c = connected_components(&m, [8, 8, 8], conn);
                let set = m.iter().filter(|&&b| b).count();
                assert_eq!(c.sizes.iter().sum::<usize>(), set);
                for i in 0..512 {
                    assert_eq!(m[i], c.labels[i] != 0);
                }
            }
        }
    }
}
