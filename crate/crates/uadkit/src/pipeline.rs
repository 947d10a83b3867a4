//! Reconstruction-based anomaly detection and the evaluation protocol:
//! anomaly maps from `|X - X_hat|`, threshold calibration by exhaustive
//! search over a 15-point grid in [0, 0.15], post-processing (brain-mask
//! erosion and minimum-component filtering) and per-case metric reports.

use crate::error::UadError;
use crate::metrics::{self, ConfusionCounts, Connectivity};
use crate::model::{Dimensionality, VaeModel};
use crate::tensor::Scalar;
use crate::volume::{self, Volume};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const THRESHOLD_COUNT: usize = 15;
pub const THRESHOLD_MAX: Scalar = 0.15;
/// Post-processing removes connected components smaller than this.
pub const MIN_COMPONENT_VOXELS: usize = 10;

/// The 15 candidate thresholds, equally spaced from 0 to 0.15 inclusive.
pub fn threshold_grid() -> Vec<Scalar> {
    (0..THRESHOLD_COUNT)
        .map(|i| THRESHOLD_MAX * i as Scalar / (THRESHOLD_COUNT - 1) as Scalar)
        .collect()
}

/// How the latent sample for reconstruction is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    /// Posterior mean (epsilon = 0); deterministic, the default.
    Mean,
    /// Sampled z with the given seed.
    Sampled(u64),
    /// Mean of `draws` sampled reconstructions seeded `seed`, `seed + 1`, ...
    ///
    /// Approximates the posterior-predictive mean on the decoder's learned
    /// manifold. Unlike [`InferenceMode::Mean`] it stays faithful when the
    /// posterior collapses (the decoder may synthesize output from noise
    /// magnitude, so decoding epsilon = 0 is out of distribution), and unlike
    /// a single draw it suppresses per-voxel sampling noise by `1/sqrt(draws)`.
    /// Deterministic for a fixed seed.
    Averaged { seed: u64, draws: usize },
}

/// Voxel-wise absolute difference between a volume and its reconstruction.
#[derive(Debug, Clone)]
pub struct AnomalyMap {
    pub shape: [usize; 3],
    pub values: Vec<Scalar>,
    pub volume_id: String,
}

/// A case run through the model: preprocessed input, reconstruction and
/// anomaly map on the same grid.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub volume: Volume,
    pub reconstruction: Vec<Scalar>,
    pub map: AnomalyMap,
}

/// Preprocesses `v` to the model grid and reconstructs it. 3D models see
/// the whole volume; 2D models reconstruct each axial slice independently.
pub fn prepare_case(model: &VaeModel, v: &Volume, mode: InferenceMode) -> Result<PreparedCase, UadError> {
    let arch = &model.config;
    let (pre, recon) = match arch.dimensionality {
        Dimensionality::ThreeD => {
            let target = [arch.input_shape[1], arch.input_shape[2], arch.input_shape[3]];
            let pre = volume::preprocess(v, target);
            let x = pre.to_tensor_3d();
            let x_hat = reconstruct(model, &x, mode, 0)?;
            (pre, x_hat)
        }
        Dimensionality::TwoD => {
            let target = [v.shape[0], arch.input_shape[1], arch.input_shape[2]];
            let pre = volume::preprocess(v, target);
            let mut recon = Vec::with_capacity(pre.numel());
            for z in 0..pre.shape[0] {
                let x = pre.slice_tensor_2d(z);
                recon.extend(reconstruct(model, &x, mode, z as u64)?);
            }
            (pre, recon)
        }
    };
    let values: Vec<Scalar> = pre
        .voxels
        .iter()
        .zip(&recon)
        .map(|(&x, &r)| (x as Scalar - r).abs())
        .collect();
    Ok(PreparedCase {
        map: AnomalyMap {
            shape: pre.shape,
            values,
            volume_id: pre.id.clone(),
        },
        volume: pre,
        reconstruction: recon,
    })
}

fn reconstruct(
    model: &VaeModel,
    x: &crate::tensor::Tensor,
    mode: InferenceMode,
    salt: u64,
) -> Result<Vec<Scalar>, UadError> {
    let x_hat = match mode {
        InferenceMode::Mean => model.reconstruct_mean(x)?,
        InferenceMode::Sampled(seed) => {
            let bound = model.bind(false);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(salt);
            let (x_hat, _) = model.forward(&bound, x, &mut rng)?;
            x_hat
        }
        InferenceMode::Averaged { seed, draws } => {
            if draws == 0 {
                return Err(UadError::Numeric("Averaged inference needs draws >= 1".into()));
            }
            let bound = model.bind(false);
            let mut acc: Option<Vec<Scalar>> = None;
            for d in 0..draws as u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(d));
                rng.set_stream(salt);
                let (x_hat, _) = model.forward(&bound, x, &mut rng)?;
                match &mut acc {
                    None => acc = Some(x_hat.data().to_vec()),
                    Some(a) => {
                        for (v, n) in a.iter_mut().zip(x_hat.data()) {
                            *v += n;
                        }
                    }
                }
            }
            let mut mean = acc.expect("draws >= 1");
            for v in &mut mean {
                *v /= draws as Scalar;
            }
            return Ok(mean);
        }
    };
    Ok(x_hat.data().to_vec())
}

/// Voxels strictly above the threshold.
pub fn binarize(values: &[Scalar], threshold: Scalar) -> Vec<bool> {
    values.iter().map(|&v| v > threshold).collect()
}

/// Binary segmentation with its provenance.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub shape: [usize; 3],
    pub mask: Vec<bool>,
    pub threshold: Scalar,
}

/// Post-processing: intersect with the brain mask eroded by one voxel
/// (face-connected element), then drop connected components smaller than
/// [`MIN_COMPONENT_VOXELS`] under full (8/26) connectivity.
pub fn postprocess(raw: &[bool], brain_mask: &[bool], shape: [usize; 3], threshold: Scalar) -> Segmentation {
    let eroded = metrics::erode_face(brain_mask, shape);
    let mut mask: Vec<bool> = raw.iter().zip(&eroded).map(|(&m, &b)| m && b).collect();
    metrics::filter_small_components(&mut mask, shape, Connectivity::Full, MIN_COMPONENT_VOXELS);
    Segmentation {
        shape,
        mask,
        threshold,
    }
}

/// Binarize plus post-process in one step.
pub fn segment_map(map: &AnomalyMap, brain_mask: &[bool], threshold: Scalar) -> Segmentation {
    postprocess(&binarize(&map.values, threshold), brain_mask, map.shape, threshold)
}

/// One calibration input: an anomaly map with its brain mask and ground
/// truth on the same grid.
#[derive(Debug, Clone)]
pub struct CalibrationCase {
    pub shape: [usize; 3],
    pub map: Vec<Scalar>,
    pub brain_mask: Vec<bool>,
    pub truth: Vec<bool>,
}

impl CalibrationCase {
    pub fn from_prepared(case: &PreparedCase) -> Option<Self> {
        let truth = case.volume.lesion_mask.clone()?;
        Some(CalibrationCase {
            shape: case.map.shape,
            map: case.map.values.clone(),
            brain_mask: case.volume.brain_mask.clone(),
            truth,
        })
    }
}

/// Outcome of the 15-threshold exhaustive search.
#[derive(Debug, Clone)]
pub struct ThresholdCalibration {
    pub candidates: Vec<Scalar>,
    pub mean_dice: Vec<Scalar>,
    pub chosen_index: usize,
}

impl ThresholdCalibration {
    pub fn chosen(&self) -> Scalar {
        self.candidates[self.chosen_index]
    }
}

/// Scores every candidate threshold (with full post-processing) on the
/// calibration split and picks the mean-Dice maximizer, ties going to the
/// smaller threshold.
pub fn calibrate_threshold(cases: &[CalibrationCase]) -> Result<ThresholdCalibration, UadError> {
    if cases.is_empty() || cases.iter().all(|c| c.truth.iter().all(|&t| !t)) {
        return Err(UadError::Usage(
            "calibration requires at least one case with non-empty ground truth".into(),
        ));
    }
    let candidates = threshold_grid();
    let mut mean_dice = Vec::with_capacity(candidates.len());
    for &tau in &candidates {
        let mut acc = 0.0;
        for case in cases {
            let seg = postprocess(&binarize(&case.map, tau), &case.brain_mask, case.shape, tau);
            acc += ConfusionCounts::from_masks(&seg.mask, &case.truth, Some(&case.brain_mask)).dice();
        }
        mean_dice.push(acc / cases.len() as Scalar);
    }
    // ascending scan with strict improvement keeps the smallest tie winner
    let mut chosen_index = 0;
    for (i, &d) in mean_dice.iter().enumerate() {
        if d > mean_dice[chosen_index] {
            chosen_index = i;
        }
    }
    Ok(ThresholdCalibration {
        candidates,
        mean_dice,
        chosen_index,
    })
}

/// Per-case evaluation row. `specificity`/`sensitivity` are `None` when
/// their denominator is empty; such cases are excluded from the aggregate
/// means of those measures.
#[derive(Debug, Clone)]
pub struct CaseReport {
    pub id: String,
    pub threshold: Scalar,
    pub dice: Scalar,
    pub specificity: Option<Scalar>,
    pub sensitivity: Option<Scalar>,
    pub mae: Scalar,
}

/// Aggregate over case reports; Dice is mean +/- population standard
/// deviation.
#[derive(Debug, Clone, Copy)]
pub struct Aggregate {
    pub cases: usize,
    pub mean_dice: Scalar,
    pub std_dice: Scalar,
    pub mean_specificity: Scalar,
    pub mean_sensitivity: Scalar,
    pub mean_mae: Scalar,
}

pub fn aggregate(reports: &[CaseReport]) -> Aggregate {
    let n = reports.len().max(1) as Scalar;
    let mean_dice = reports.iter().map(|r| r.dice).sum::<Scalar>() / n;
    let var = reports
        .iter()
        .map(|r| (r.dice - mean_dice).powi(2))
        .sum::<Scalar>()
        / n;
    let mean_of = |vals: Vec<Scalar>| {
        if vals.is_empty() {
            Scalar::NAN
        } else {
            vals.iter().sum::<Scalar>() / vals.len() as Scalar
        }
    };
    Aggregate {
        cases: reports.len(),
        mean_dice,
        std_dice: var.sqrt(),
        mean_specificity: mean_of(reports.iter().filter_map(|r| r.specificity).collect()),
        mean_sensitivity: mean_of(reports.iter().filter_map(|r| r.sensitivity).collect()),
        mean_mae: mean_of(reports.iter().map(|r| r.mae).collect()),
    }
}

/// Evaluates one prepared case at a threshold. Metrics are computed inside
/// the (uneroded) brain mask.
pub fn evaluate_case(case: &PreparedCase, threshold: Scalar) -> Option<(CaseReport, Segmentation)> {
    let truth = case.volume.lesion_mask.as_ref()?;
    let seg = segment_map(&case.map, &case.volume.brain_mask, threshold);
    let domain = Some(case.volume.brain_mask.as_slice());
    let counts = ConfusionCounts::from_masks(&seg.mask, truth, domain);
    let x: Vec<Scalar> = case.volume.voxels.iter().map(|&v| v as Scalar).collect();
    let mae = metrics::mae(&x, &case.reconstruction, domain).expect("same grid");
    Some((
        CaseReport {
            id: case.volume.id.clone(),
            threshold,
            dice: counts.dice(),
            specificity: counts.specificity(),
            sensitivity: counts.sensitivity(),
            mae,
        },
        seg,
    ))
}

/// Runs model inference and evaluation over a test set. Cases without
/// ground truth are skipped with a warning on stderr.
pub fn evaluate_split(
    model: &VaeModel,
    volumes: &[Volume],
    threshold: Scalar,
    mode: InferenceMode,
) -> Result<(Vec<CaseReport>, Vec<Segmentation>), UadError> {
    let mut reports = Vec::new();
    let mut segmentations = Vec::new();
    for v in volumes {
        let case = prepare_case(model, v, mode)?;
        match evaluate_case(&case, threshold) {
            Some((report, seg)) => {
                reports.push(report);
                segmentations.push(seg);
            }
            None => {
                eprintln!("warning: case {} has no ground truth, skipped", v.id);
            }
        }
    }
    Ok((reports, segmentations))
}

/// Seeded random half split; the first half calibrates, the second tests.
pub fn split_half(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    idx.shuffle(&mut rng);
    let mid = n / 2;
    let mut cal = idx[..mid].to_vec();
    let mut test = idx[mid..].to_vec();
    cal.sort_unstable();
    test.sort_unstable();
    (cal, test)
}

pub const REPORT_HEADER: &str = "id,threshold,dice,spe,sen,mae";

fn opt_cell(v: Option<Scalar>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v}"))
}

pub fn report_line(r: &CaseReport) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.id,
        r.threshold,
        r.dice,
        opt_cell(r.specificity),
        opt_cell(r.sensitivity),
        r.mae
    )
}

/// Writes the per-case CSV report.
pub fn write_report(path: &Path, reports: &[CaseReport]) -> Result<(), UadError> {
    use std::io::Write;
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&report_line(r));
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|source| UadError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Dumps one axial slice as a side-by-side panel
/// (input | reconstruction | anomaly map | segmentation) in 16-bit PGM.
pub fn write_panel_pgm(
    path: &Path,
    case: &PreparedCase,
    seg: &Segmentation,
    z: usize,
) -> Result<(), UadError> {
    let [_, h, w] = case.volume.shape;
    let plane = h * w;
    let start = z * plane;
    let mut panel = vec![0.0; h * (w * 4)];
    for y in 0..h {
        for x in 0..w {
            let i = start + y * w + x;
            let row = y * (w * 4);
            panel[row + x] = case.volume.voxels[i] as Scalar;
            panel[row + w + x] = case.reconstruction[i];
            panel[row + 2 * w + x] = case.map.values[i];
            panel[row + 3 * w + x] = seg.mask[i] as u8 as Scalar;
        }
    }
    volume::write_pgm16(path, h, w * 4, &panel)
}
