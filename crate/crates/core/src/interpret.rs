//! Occlusion-sensitivity saliency: slide a cubic mask over all four
//! sequences, record the ground-truth class probability, then smooth,
//! invert and min–max normalise.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Network;
use crate::volume::{voxel_count, write_named_volume, Case, Dims, Sequence, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FillPolicy {
    #[default]
    Zero,
    VolumeMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionConfig {
    pub mask_size: usize,
    pub overlap: f64,
    pub fill: FillPolicy,
    pub smooth_sigma: f64,
    /// Occluded volumes per inference pass.
    pub batch_size: usize,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self { mask_size: 16, overlap: 0.5, fill: FillPolicy::Zero, smooth_sigma: 1.0, batch_size: 4 }
    }
}

impl OcclusionConfig {
    pub fn stride(&self) -> usize {
        ((self.mask_size as f64 * (1.0 - self.overlap)).round() as usize).max(1)
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("occlusion.overlap {} outside [0, 1)", self.overlap)));
        }
        if self.mask_size == 0 || dims.iter().any(|&d| self.mask_size > d) {
            return Err(Error::Config(format!("occlusion.mask_size {} does not fit dims {dims:?}", self.mask_size)));
        }
        if !(self.smooth_sigma >= 0.0) || self.batch_size == 0 {
            return Err(Error::Config("occlusion.smooth_sigma must be >= 0 and batch_size >= 1".into()));
        }
        Ok(())
    }
}

/// Mask start offsets along an axis of length `n`; the last one is clamped
/// so the grid reaches the boundary.
pub fn grid_positions(n: usize, mask: usize, stride: usize) -> Vec<usize> {
    let last = n - mask;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().expect("non-empty") != last {
        out.push(last);
    }
    out
}

pub fn placements(dims: Dims, cfg: &OcclusionConfig) -> Vec<[usize; 3]> {
    let axes: Vec<Vec<usize>> = dims.iter().map(|&d| grid_positions(d, cfg.mask_size, cfg.stride())).collect();
    let mut out = Vec::new();
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                out.push([z, y, x]);
            }
        }
    }
    out
}

fn occlude(case: &Case, at: [usize; 3], m: usize, fill: FillPolicy) -> Case {
    let mut out = case.clone();
    let dims = case.dims();
    for v in out.sequences.iter_mut() {
        let value = match fill {
            FillPolicy::Zero => 0.0,
            FillPolicy::VolumeMean => v.mean() as f32,
        };
        for z in at[0]..at[0] + m {
            for y in at[1]..at[1] + m {
                let row = (z * dims[1] + y) * dims[2];
                v.data[row + at[2]..row + at[2] + m].fill(value);
            }
        }
    }
    out
}

/// Ground-truth class probability of the unoccluded case.
pub fn baseline_probability(net: &Network<f32>, case: &Case) -> Result<f64> {
    let y = case.idh_label.ok_or_else(|| Error::MissingLabel(case.id.clone()))?;
    Ok(net.predict(&[case], 1)?[0][y as usize])
}

/// Per-voxel mean occluded ground-truth probability over all placements
/// covering the voxel. Runs on the current rayon pool.
pub fn occlusion_raw(net: &Network<f32>, case: &Case, cfg: &OcclusionConfig) -> Result<Volume> {
    let y = case.idh_label.ok_or_else(|| Error::MissingLabel(case.id.clone()))? as usize;
    let dims = case.dims();
    cfg.validate(dims)?;
    let pos = placements(dims, cfg);
    let m = cfg.mask_size;
    let probs: Vec<f64> = pos
        .par_chunks(cfg.batch_size)
        .map(|chunk| -> Result<Vec<f64>> {
            let occluded: Vec<Case> = chunk.iter().map(|&p| occlude(case, p, m, cfg.fill)).collect();
            let refs: Vec<&Case> = occluded.iter().collect();
            Ok(net.predict(&refs, refs.len())?.into_iter().map(|p| p[y]).collect())
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    let n = voxel_count(dims);
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    for (p, prob) in pos.iter().zip(&probs) {
        for z in p[0]..p[0] + m {
            for yy in p[1]..p[1] + m {
                let row = (z * dims[1] + yy) * dims[2];
                for i in row + p[2]..row + p[2] + m {
                    sum[i] += prob;
                    count[i] += 1;
                }
            }
        }
    }
    let data = sum.iter().zip(&count).map(|(s, &c)| (s / c as f64) as f32).collect();
    Volume::new(dims, data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge-clamped boundaries.
pub fn gaussian_blur(data: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let c = (i / strides[axis]) % dims[axis];
            let base = i - c * strides[axis];
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                let src = (c as isize + j as isize - r).clamp(0, n - 1) as usize;
                acc += w * cur[base + src * strides[axis]];
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Blur, negate (low occluded probability means high saliency), min–max
/// normalise. A constant volume maps to all zeros.
pub fn occlusion_postprocess(raw: &Volume, cfg: &OcclusionConfig) -> Volume {
    let data: Vec<f64> = raw.data.iter().map(|&v| v as f64).collect();
    let first = data.first().copied().unwrap_or(0.0);
    if data.iter().all(|&v| v == first) {
        return Volume::zeros(raw.dims);
    }
    let inv: Vec<f64> = gaussian_blur(&data, raw.dims, cfg.smooth_sigma).into_iter().map(|v| -v).collect();
    let lo = inv.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = inv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let out = if hi > lo {
        inv.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
    } else {
        vec![0.0; inv.len()]
    };
    Volume { dims: raw.dims, spacing: raw.spacing, data: out }
}

pub fn saliency(net: &Network<f32>, case: &Case, cfg: &OcclusionConfig) -> Result<Volume> {
    Ok(occlusion_postprocess(&occlusion_raw(net, case, cfg)?, cfg))
}

/// `(mean inside, mean outside)` of a saliency volume w.r.t. the tumor mask.
pub fn tumor_focus(saliency: &Volume, case: &Case) -> Result<(f64, f64)> {
    let mask = case.mask.as_ref().ok_or_else(|| Error::Data(format!("case {} has no mask", case.id)))?;
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&s, &l) in saliency.data.iter().zip(&mask.data) {
        if l > 0 {
            si += s as f64;
            ni += 1;
        } else {
            so += s as f64;
            no += 1;
        }
    }
    if ni == 0 || no == 0 {
        return Err(Error::EmptyRegion(format!("case {}: tumor or background is empty", case.id)));
    }
    Ok((si / ni as f64, so / no as f64))
}

/// `t ∈ [0, 1]` to black–red–yellow–white.
pub fn hot(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [(3.0 * t).min(1.0), (3.0 * t - 1.0).clamp(0.0, 1.0), (3.0 * t - 2.0).clamp(0.0, 1.0)]
}

/// Renders axial slice `z` of `sequence` in grayscale with the saliency
/// blended on top (per-pixel opacity `alpha * saliency`).
pub fn render_overlay(saliency: &Volume, case: &Case, sequence: Sequence, z: usize, alpha: f64) -> Result<RgbImage> {
    let dims = case.dims();
    if z >= dims[0] {
        return Err(Error::Index(format!("slice {z} out of range for depth {}", dims[0])));
    }
    if saliency.dims != dims {
        return Err(Error::Shape(format!("saliency dims {:?} vs case dims {dims:?}", saliency.dims)));
    }
    let vol = case.sequence(sequence);
    let plane = dims[1] * dims[2];
    let slice = &vol.data[z * plane..][..plane];
    let lo = slice.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sal = &saliency.data[z * plane..][..plane];
    let mut img = RgbImage::new(dims[2] as u32, dims[1] as u32);
    for y in 0..dims[1] {
        for x in 0..dims[2] {
            let i = y * dims[2] + x;
            let gray = if hi > lo { (slice[i] as f64 - lo) / (hi - lo) } else { 0.0 };
            let a = (alpha * sal[i] as f64).clamp(0.0, 1.0);
            let c = hot(sal[i] as f64);
            let px = c.map(|cv| ((1.0 - a) * gray + a * cv) * 255.0);
            img.put_pixel(x as u32, y as u32, Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8)));
        }
    }
    Ok(img)
}

/// Writes the overlay PNG to `out_path` and the saliency volume as
/// `saliency.raw`/`saliency.json` next to it.
pub fn export_overlay(saliency: &Volume, case: &Case, sequence: Sequence, z: usize, alpha: f64, out_path: &Path) -> Result<PathBuf> {
    let img = render_overlay(saliency, case, sequence, z, alpha)?;
    let dir = out_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
    img.save(out_path).map_err(|e| Error::write(out_path, std::io::Error::other(e)))?;
    write_named_volume(dir, "saliency", saliency)?;
    Ok(out_path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts() {
        assert_eq!(grid_positions(96, 16, 8).len(), 11);
        assert_eq!(grid_positions(20, 16, 8), vec![0, 4]);
        assert_eq!(grid_positions(16, 16, 8), vec![0]);
        let cfg = OcclusionConfig::default();
        assert_eq!(placements([96; 3], &cfg).len(), 1331);
    }

    #[test]
    fn blur_preserves_constant() {
        let data = vec![0.25; 4 * 5 * 6];
        let out = gaussian_blur(&data, [4, 5, 6], 1.0);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn postprocess_ranges() {
        let dims = [4, 4, 4];
        let raw = Volume::new(dims, (0..64).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let cfg = OcclusionConfig { smooth_sigma: 0.0, ..Default::default() };
        let s = occlusion_postprocess(&raw, &cfg);
        let min = s.data.iter().copied().fold(f32::INFINITY, f32::min);
        let max = s.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((min, max), (0.0, 1.0));
        let argmin = raw.data.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let argmax = s.data.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmin, argmax);
        let flat = Volume::new(dims, vec![0.7; 64]).unwrap();
        assert!(occlusion_postprocess(&flat, &OcclusionConfig::default()).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hot_endpoints() {
        assert_eq!(hot(0.0), [0.0, 0.0, 0.0]);
        assert_eq!(hot(1.0), [1.0, 1.0, 1.0]);
    }
}
