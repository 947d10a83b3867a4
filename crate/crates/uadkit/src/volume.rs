//! Volumes, the `UADV` binary file format, preprocessing and slice
//! extraction.
//!
//! A [`Volume`] is a 3D scalar grid in `[0,1]` (f32 payload) with a binary
//! brain mask, an optional ground-truth lesion mask, an id and generator
//! metadata. Files round-trip bit-exactly.
//!
//! `UADV` layout: magic `UADV`, u32 version, u32 rank (3), extents as u32
//! little-endian, voxel payload as f32 little-endian, then optional sections
//! introduced by a 1-byte tag: `0x01` brain mask (one byte per voxel),
//! `0x02` lesion mask, `0x10` id string, `0x11` metadata string (both
//! length-prefixed with u32).

use crate::error::{FormatError, UadError};
use crate::tensor::{Scalar, Tensor};
use std::io::{Read, Write};
use std::path::Path;

pub const VOLUME_MAGIC: &[u8; 4] = b"UADV";
pub const VOLUME_VERSION: u32 = 1;

const TAG_BRAIN_MASK: u8 = 0x01;
const TAG_LESION_MASK: u8 = 0x02;
const TAG_ID: u8 = 0x10;
const TAG_METADATA: u8 = 0x11;

/// 3D scalar image with masks and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// Extents `[D, H, W]`, W fastest.
    pub shape: [usize; 3],
    pub voxels: Vec<f32>,
    pub brain_mask: Vec<bool>,
    pub lesion_mask: Option<Vec<bool>>,
    pub id: String,
    /// Free-form generator parameters / seed record.
    pub metadata: String,
}

impl Volume {
    pub fn new(shape: [usize; 3], voxels: Vec<f32>, brain_mask: Vec<bool>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(voxels.len(), n);
        assert_eq!(brain_mask.len(), n);
        Volume {
            shape,
            voxels,
            brain_mask,
            lesion_mask: None,
            id: String::new(),
            metadata: String::new(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    /// Voxels as a `[1, 1, D, H, W]` f64 tensor ready for a 3D model.
    pub fn to_tensor_3d(&self) -> Tensor {
        let data: Vec<Scalar> = self.voxels.iter().map(|&v| v as Scalar).collect();
        let [d, h, w] = self.shape;
        Tensor::from_vec(&[1, 1, d, h, w], data).expect("shape matches data")
    }

    /// One axial slice as a `[1, 1, H, W]` f64 tensor.
    pub fn slice_tensor_2d(&self, z: usize) -> Tensor {
        let [_, h, w] = self.shape;
        let start = z * h * w;
        let data: Vec<Scalar> = self.voxels[start..start + h * w]
            .iter()
            .map(|&v| v as Scalar)
            .collect();
        Tensor::from_vec(&[1, 1, h, w], data).expect("shape matches data")
    }

    // ---- file I/O -------------------------------------------------------

    pub fn write(&self, path: &Path) -> Result<(), UadError> {
        let mut buf: Vec<u8> = Vec::with_capacity(16 + self.numel() * 5);
        buf.extend_from_slice(VOLUME_MAGIC);
        buf.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
        buf.extend_from_slice(&3u32.to_le_bytes());
        for &e in &self.shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &self.voxels {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(TAG_BRAIN_MASK);
        buf.extend(self.brain_mask.iter().map(|&b| b as u8));
        if let Some(lesion) = &self.lesion_mask {
            buf.push(TAG_LESION_MASK);
            buf.extend(lesion.iter().map(|&b| b as u8));
        }
        buf.push(TAG_ID);
        buf.extend_from_slice(&(self.id.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.id.as_bytes());
        buf.push(TAG_METADATA);
        buf.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.metadata.as_bytes());
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|source| FormatError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, UadError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| FormatError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let mut r = ByteReader::new(&bytes, path);
        if r.take(4)? != VOLUME_MAGIC {
            return Err(FormatError::BadMagic {
                path: path.to_path_buf(),
                expected: "UADV",
            }
            .into());
        }
        let version = r.u32()?;
        if version != VOLUME_VERSION {
            return Err(FormatError::Version {
                path: path.to_path_buf(),
                found: version,
                supported: VOLUME_VERSION,
            }
            .into());
        }
        let rank = r.u32()?;
        if rank != 3 {
            return Err(r.malformed(format!("expected rank 3, got {rank}")).into());
        }
        let mut shape = [0usize; 3];
        for e in &mut shape {
            *e = r.u32()? as usize;
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let voxels = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut volume = Volume {
            shape,
            voxels,
            brain_mask: vec![true; n],
            lesion_mask: None,
            id: String::new(),
            metadata: String::new(),
        };
        while let Some(tag) = r.maybe_u8() {
            match tag {
                TAG_BRAIN_MASK => {
                    volume.brain_mask = r.take(n)?.iter().map(|&b| b != 0).collect();
                }
                TAG_LESION_MASK => {
                    volume.lesion_mask = Some(r.take(n)?.iter().map(|&b| b != 0).collect());
                }
                TAG_ID => {
                    let len = r.u32()? as usize;
                    volume.id = String::from_utf8(r.take(len)?.to_vec())
                        .map_err(|e| r.malformed(format!("id not utf-8: {e}")))?;
                }
                TAG_METADATA => {
                    let len = r.u32()? as usize;
                    volume.metadata = String::from_utf8(r.take(len)?.to_vec())
                        .map_err(|e| r.malformed(format!("metadata not utf-8: {e}")))?;
                }
                other => {
                    return Err(r.malformed(format!("unknown section tag {other:#04x}")).into());
                }
            }
        }
        Ok(volume)
    }
}

/// Bounds-checked little-endian reader used by the binary formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        ByteReader { bytes, pos: 0, path }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.bytes.len() {
            return Err(FormatError::Truncated {
                path: self.path.to_path_buf(),
                detail: format!(
                    "need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn maybe_u8(&mut self) -> Option<u8> {
        if self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            self.pos += 1;
            Some(b)
        } else {
            None
        }
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn malformed(&self, detail: String) -> FormatError {
        FormatError::Malformed {
            path: self.path.to_path_buf(),
            detail,
        }
    }

    pub fn expect_end(&self) -> Result<(), FormatError> {
        if self.pos != self.bytes.len() {
            return Err(FormatError::Truncated {
                path: self.path.to_path_buf(),
                detail: format!(
                    "{} trailing bytes after payload",
                    self.bytes.len() - self.pos
                ),
            });
        }
        Ok(())
    }
}

// ---- preprocessing ------------------------------------------------------

/// Center-crops (or zero-pads) to `target`, then rescales intensities so the
/// robust range inside the brain mask maps to `[0,1]`: the 2nd and 98th
/// nearest-rank percentiles of in-mask voxels become 0 and 1. The percentile
/// anchors make the scale insensitive to small hyperintense regions, so
/// healthy and lesioned volumes normalize consistently; values outside the
/// anchor range are not clamped. Outside-mask voxels are set to 0. A
/// degenerate range produces a constant 0.5 inside the mask.
pub fn preprocess(v: &Volume, target: [usize; 3]) -> Volume {
    let mut voxels = vec![0.0f32; target.iter().product()];
    let mut brain = vec![false; voxels.len()];
    let mut lesion = v.lesion_mask.as_ref().map(|_| vec![false; voxels.len()]);

    // Per-axis source/destination offsets for a centered crop or pad,
    // left-biased when the leftover extent is odd.
    let mut src_off = [0usize; 3];
    let mut dst_off = [0usize; 3];
    let mut copy = [0usize; 3];
    for a in 0..3 {
        if v.shape[a] >= target[a] {
            src_off[a] = (v.shape[a] - target[a]) / 2;
            copy[a] = target[a];
        } else {
            dst_off[a] = (target[a] - v.shape[a]) / 2;
            copy[a] = v.shape[a];
        }
    }
    for z in 0..copy[0] {
        for y in 0..copy[1] {
            let src = v.index(z + src_off[0], y + src_off[1], src_off[2]);
            let dst =
                ((z + dst_off[0]) * target[1] + (y + dst_off[1])) * target[2] + dst_off[2];
            voxels[dst..dst + copy[2]].copy_from_slice(&v.voxels[src..src + copy[2]]);
            brain[dst..dst + copy[2]].copy_from_slice(&v.brain_mask[src..src + copy[2]]);
            if let (Some(dl), Some(sl)) = (lesion.as_mut(), v.lesion_mask.as_ref()) {
                dl[dst..dst + copy[2]].copy_from_slice(&sl[src..src + copy[2]]);
            }
        }
    }

    let mut inside: Vec<f32> = voxels
        .iter()
        .zip(&brain)
        .filter_map(|(&val, &m)| m.then_some(val))
        .collect();
    inside.sort_unstable_by(f32::total_cmp);
    let (lo, hi) = if inside.is_empty() {
        (0.0, 0.0)
    } else {
        let last = inside.len() - 1;
        let lo_rank = (0.02 * last as f64).floor() as usize;
        let hi_rank = (0.98 * last as f64).ceil() as usize;
        (inside[lo_rank], inside[hi_rank])
    };
    if lo >= hi {
        // degenerate intensity range
        for (val, &m) in voxels.iter_mut().zip(&brain) {
            *val = if m { 0.5 } else { 0.0 };
        }
    } else {
        let span = hi - lo;
        for (val, &m) in voxels.iter_mut().zip(&brain) {
            *val = if m { (*val - lo) / span } else { 0.0 };
        }
    }

    let mut out = Volume::new(target, voxels, brain);
    out.lesion_mask = lesion;
    out.id = v.id.clone();
    out.metadata = v.metadata.clone();
    out
}

/// Indices of `count` axial slices centered on the volume's central axial
/// index (left-biased when the margin is odd).
pub fn central_slice_indices(extent: usize, count: usize) -> Result<std::ops::Range<usize>, UadError> {
    if count > extent {
        return Err(UadError::Usage(format!(
            "requested {count} central slices from an extent of {extent}"
        )));
    }
    let start = (extent - count) / 2;
    Ok(start..start + count)
}

/// Extracts the central axial slices as `(source id, slice index, [1,1,H,W]
/// tensor)` samples, order preserved.
pub fn extract_slices(v: &Volume, count: usize) -> Result<Vec<(String, usize, Tensor)>, UadError> {
    let range = central_slice_indices(v.shape[0], count)?;
    Ok(range
        .map(|z| (v.id.clone(), z, v.slice_tensor_2d(z)))
        .collect())
}

// ---- PGM export ---------------------------------------------------------

/// Writes a 16-bit binary PGM (P5) of values in `[0,1]`; rows x cols,
/// big-endian sample order as the format requires.
pub fn write_pgm16(path: &Path, rows: usize, cols: usize, values: &[Scalar]) -> Result<(), UadError> {
    assert_eq!(values.len(), rows * cols);
    let mut buf = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    for &v in values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|source| UadError::Io {
            path: path.to_path_buf(),
            source,
        })
}
