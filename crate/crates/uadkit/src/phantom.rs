//! Synthetic phantom volumes: smoothed-ellipsoid "brains" with textured
//! tissue, optionally carrying hyperintense spherical lesions recorded in a
//! ground-truth mask. Stands in for real MRI data in tests and benchmarks.
//!
//! Generation is fully determined by `(spec.seed, volume index, lesioned)`
//! via a counter-seeded ChaCha8 stream, so datasets reproduce bit-for-bit
//! across runs and platforms.

use crate::error::UadError;
use crate::volume::Volume;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Parameters of the phantom family.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    /// Ellipsoid semi-axis range, as a fraction of each half-extent.
    pub axis_frac: (f64, f64),
    /// Base tissue intensity band.
    pub tissue_base: (f64, f64),
    /// Amplitude of the smooth intensity texture (unit-std noise scale).
    pub noise_amplitude: f64,
    /// Texture correlation length in voxels.
    pub correlation_length: f64,
    /// Inclusive range of lesion counts for lesioned volumes.
    pub lesion_count: (usize, usize),
    /// Lesion radius range in voxels.
    pub lesion_radius: (f64, f64),
    /// Added lesion intensity range.
    pub lesion_contrast: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [64, 64, 64],
            axis_frac: (0.72, 0.88),
            tissue_base: (0.45, 0.55),
            noise_amplitude: 0.06,
            correlation_length: 4.0,
            lesion_count: (1, 3),
            lesion_radius: (2.5, 5.0),
            lesion_contrast: (0.25, 0.35),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), UadError> {
        if self.shape.iter().any(|&e| e == 0) {
            return Err(UadError::Usage("phantom shape has a zero extent".into()));
        }
        if self.lesion_contrast.0 <= self.noise_amplitude {
            return Err(UadError::Usage(format!(
                "lesion contrast {} must exceed noise amplitude {} for lesions to be detectable",
                self.lesion_contrast.0, self.noise_amplitude
            )));
        }
        if self.lesion_count.0 > self.lesion_count.1
            || self.lesion_radius.0 > self.lesion_radius.1
            || self.axis_frac.0 > self.axis_frac.1
        {
            return Err(UadError::Usage("inverted range in phantom spec".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Separable box blur along one axis, radius `r`, via sliding sums.
fn box_blur_axis(data: &mut [f64], shape: [usize; 3], axis: usize, r: usize) {
    if r == 0 {
        return;
    }
    let [d, h, w] = shape;
    let (len, stride, lines): (usize, usize, Vec<usize>) = match axis {
        0 => {
            let mut starts = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    starts.push(y * w + x);
                }
            }
            (d, h * w, starts)
        }
        1 => {
            let mut starts = Vec::with_capacity(d * w);
            for z in 0..d {
                for x in 0..w {
                    starts.push(z * h * w + x);
                }
            }
            (h, w, starts)
        }
        _ => {
            let mut starts = Vec::with_capacity(d * h);
            for z in 0..d {
                for y in 0..h {
                    starts.push((z * h + y) * w);
                }
            }
            (w, 1, starts)
        }
    };
    let mut line = vec![0.0; len];
    for start in lines {
        for (i, v) in line.iter_mut().enumerate() {
            *v = data[start + i * stride];
        }
        let mut acc: f64 = line[..(r + 1).min(len)].iter().sum();
        // clamped-edge sliding window
        for i in 0..len {
            let lo = i as isize - r as isize;
            let hi = i + r;
            let count = (hi.min(len - 1) as isize - lo.max(0) + 1) as f64;
            data[start + i * stride] = acc / count;
            // advance window
            if hi + 1 < len {
                acc += line[hi + 1];
            }
            if lo >= 0 {
                acc -= line[lo as usize];
            }
        }
    }
}

/// Unit-std smooth noise field: white Gaussian noise, two rounds of
/// three-axis box blur, then renormalized to unit standard deviation.
fn smooth_noise(rng: &mut ChaCha8Rng, shape: [usize; 3], correlation_length: f64) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let mut field: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let r = (correlation_length / 2.0).round().max(1.0) as usize;
    for _ in 0..2 {
        for axis in 0..3 {
            box_blur_axis(&mut field, shape, axis, r);
        }
    }
    let mean = field.iter().sum::<f64>() / n as f64;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let inv_std = 1.0 / var.sqrt().max(1e-12);
    for v in &mut field {
        *v = (*v - mean) * inv_std;
    }
    field
}

/// Generates the phantom at `index` of the dataset described by `spec`.
/// Healthy and lesioned volumes at the same index differ in their whole
/// draw stream, not just the lesions.
pub fn generate_phantom(spec: &PhantomSpec, lesioned: bool, index: u64) -> Result<Volume, UadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index * 2 + lesioned as u64);
    let [d, h, w] = spec.shape;
    let n = d * h * w;

    let center = [
        d as f64 / 2.0 + uniform(&mut rng, (-0.02, 0.02)) * d as f64,
        h as f64 / 2.0 + uniform(&mut rng, (-0.02, 0.02)) * h as f64,
        w as f64 / 2.0 + uniform(&mut rng, (-0.02, 0.02)) * w as f64,
    ];
    let semi = [
        uniform(&mut rng, spec.axis_frac) * d as f64 / 2.0,
        uniform(&mut rng, spec.axis_frac) * h as f64 / 2.0,
        uniform(&mut rng, spec.axis_frac) * w as f64 / 2.0,
    ];
    let base = uniform(&mut rng, spec.tissue_base);
    let texture = smooth_noise(&mut rng, spec.shape, spec.correlation_length);

    let mut voxels = vec![0.0f32; n];
    let mut brain = vec![false; n];
    let mut idx = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let dz = (z as f64 + 0.5 - center[0]) / semi[0];
                let dy = (y as f64 + 0.5 - center[1]) / semi[1];
                let dx = (x as f64 + 0.5 - center[2]) / semi[2];
                let rho2 = dz * dz + dy * dy + dx * dx;
                if rho2 <= 1.0 {
                    brain[idx] = true;
                    let v = base - 0.08 * rho2 + spec.noise_amplitude * texture[idx];
                    voxels[idx] = v.clamp(0.0, 1.0) as f32;
                }
                idx += 1;
            }
        }
    }

    let mut lesion_mask = None;
    if lesioned {
        let mut mask = vec![false; n];
        let count = rng.gen_range(spec.lesion_count.0..=spec.lesion_count.1);
        for _ in 0..count {
            let radius = uniform(&mut rng, spec.lesion_radius);
            let contrast = uniform(&mut rng, spec.lesion_contrast);
            // rejection-sample a center well inside the ellipsoid
            let (cz, cy, cx) = loop {
                let uz = uniform(&mut rng, (-0.7, 0.7));
                let uy = uniform(&mut rng, (-0.7, 0.7));
                let ux = uniform(&mut rng, (-0.7, 0.7));
                if uz * uz + uy * uy + ux * ux <= 0.49 {
                    break (
                        center[0] + uz * semi[0],
                        center[1] + uy * semi[1],
                        center[2] + ux * semi[2],
                    );
                }
            };
            let r_ext = radius.ceil() as isize + 1;
            for z in (cz as isize - r_ext).max(0)..(cz as isize + r_ext + 1).min(d as isize) {
                for y in (cy as isize - r_ext).max(0)..(cy as isize + r_ext + 1).min(h as isize) {
                    for x in (cx as isize - r_ext).max(0)..(cx as isize + r_ext + 1).min(w as isize)
                    {
                        let i = (z as usize * h + y as usize) * w + x as usize;
                        if !brain[i] {
                            continue;
                        }
                        let dist = ((z as f64 + 0.5 - cz).powi(2)
                            + (y as f64 + 0.5 - cy).powi(2)
                            + (x as f64 + 0.5 - cx).powi(2))
                        .sqrt();
                        if dist >= radius {
                            continue;
                        }
                        // flat core with a linear rim over the outer 30%
                        let falloff = ((radius - dist) / (0.3 * radius)).clamp(0.0, 1.0);
                        voxels[i] = (voxels[i] as f64 + contrast * falloff).clamp(0.0, 1.0) as f32;
                        if falloff >= 0.5 {
                            mask[i] = true;
                        }
                    }
                }
            }
        }
        lesion_mask = Some(mask);
    }

    let kind = if lesioned { "lesioned" } else { "healthy" };
    let mut volume = Volume::new(spec.shape, voxels, brain);
    volume.lesion_mask = lesion_mask;
    volume.id = format!("{kind}_{index:04}");
    volume.metadata = format!(
        "generator=phantom kind={kind} index={index} seed={} shape={}x{}x{} noise={} corr_len={}",
        spec.seed, d, h, w, spec.noise_amplitude, spec.correlation_length
    );
    Ok(volume)
}

/// Ordered dataset of `n` phantoms.
pub fn generate_dataset(spec: &PhantomSpec, n: usize, lesioned: bool) -> Result<Vec<Volume>, UadError> {
    (0..n as u64)
        .map(|i| generate_phantom(spec, lesioned, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            shape: [24, 24, 24],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_phantom(&spec, true, 3).unwrap();
        let b = generate_phantom(&spec, true, 3).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.voxels.iter().zip(&b.voxels) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn different_indices_and_kinds_differ() {
        let spec = small_spec();
        let a = generate_phantom(&spec, false, 0).unwrap();
        let b = generate_phantom(&spec, false, 1).unwrap();
        let c = generate_phantom(&spec, true, 0).unwrap();
        assert_ne!(a.voxels, b.voxels);
        assert_ne!(a.voxels, c.voxels);
    }

    #[test]
    fn healthy_volume_has_no_lesion_mask() {
        let v = generate_phantom(&small_spec(), false, 0).unwrap();
        assert!(v.lesion_mask.is_none());
        assert_eq!(v.id, "healthy_0000");
        assert!(v.metadata.contains("kind=healthy"));
    }

    #[test]
    fn lesion_mask_is_nonempty_subset_of_brain() {
        let spec = small_spec();
        for index in 0..4 {
            let v = generate_phantom(&spec, true, index).unwrap();
            let mask = v.lesion_mask.as_ref().unwrap();
            let count = mask.iter().filter(|&&b| b).count();
            assert!(count > 0, "index {index}: empty lesion mask");
            for (i, &m) in mask.iter().enumerate() {
                assert!(!m || v.brain_mask[i], "lesion voxel outside the brain");
            }
        }
    }

    #[test]
    fn lesions_are_brighter_than_surroundings() {
        // Mean intensity inside the lesion mask must exceed the brain mean by
        // a margin that texture noise alone cannot produce.
        let v = generate_phantom(&small_spec(), true, 2).unwrap();
        let mask = v.lesion_mask.as_ref().unwrap();
        let mean = |sel: &dyn Fn(usize) -> bool| {
            let mut acc = 0.0f64;
            let mut n = 0usize;
            for i in 0..v.voxels.len() {
                if sel(i) {
                    acc += v.voxels[i] as f64;
                    n += 1;
                }
            }
            acc / n as f64
        };
        let lesion_mean = mean(&|i| mask[i]);
        let healthy_mean = mean(&|i| v.brain_mask[i] && !mask[i]);
        assert!(
            lesion_mean > healthy_mean + 0.1,
            "lesion mean {lesion_mean} vs healthy mean {healthy_mean}"
        );
    }

    #[test]
    fn intensities_in_unit_range_and_zero_outside_brain() {
        let v = generate_phantom(&small_spec(), true, 0).unwrap();
        for (i, &x) in v.voxels.iter().enumerate() {
            assert!((0.0..=1.0).contains(&x));
            if !v.brain_mask[i] {
                assert_eq!(x, 0.0);
            }
        }
        let inside = v.brain_mask.iter().filter(|&&b| b).count();
        let frac = inside as f64 / v.voxels.len() as f64;
        assert!(frac > 0.15 && frac < 0.7, "brain fraction {frac}");
    }

    #[test]
    fn dataset_ids_are_ordered() {
        let spec = small_spec();
        let ds = generate_dataset(&spec, 3, true).unwrap();
        let ids: Vec<&str> = ds.iter().map(|v| v.id.as_str()).collect();
        assert_eq!(ids, vec!["lesioned_0000", "lesioned_0001", "lesioned_0002"]);
    }

    #[test]
    fn spec_validation() {
        let mut s = small_spec();
        s.lesion_contrast = (0.05, 0.1); // below noise amplitude
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.lesion_radius = (5.0, 2.0);
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.shape = [0, 8, 8];
        assert!(s.validate().is_err());
        assert!(small_spec().validate().is_ok());
    }

    #[test]
    fn smooth_noise_is_normalized_and_correlated() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = [16usize, 16, 16];
        let field = smooth_noise(&mut rng, shape, 4.0);
        let n = field.len() as f64;
        let mean = field.iter().sum::<f64>() / n;
        let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
        // Neighbor correlation should be high after smoothing.
        let mut num = 0.0;
        for i in 0..field.len() - 1 {
            if i % 16 < 15 {
                num += field[i] * field[i + 1];
            }
        }
        let corr = num / n;
        assert!(corr > 0.5, "neighbor correlation {corr}");
    }
}
