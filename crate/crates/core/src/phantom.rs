//! Synthetic 4-sequence phantoms with ellipsoidal tumors.
//!
//! Mutant phantoms carry the T2–FLAIR mismatch sign: a sharply bounded core
//! that is bright on T2 (`base + δ`) and suppressed on FLAIR (`base − δ`),
//! surrounded by a FLAIR-hyperintense rim. Wildtype phantoms have a lesion
//! that is bright on both T2 and FLAIR with independent heterogeneous
//! texture and a soft boundary whose falloff exponent is
//! `boundary_sharpness`. All sequences share one low-frequency gain field
//! multiplying the base tissue signal 1.0; tissue outside the brain
//! ellipsoid is exactly zero.
//!
//! Randomness comes from [`SeededRng`]; case `i` of a dataset uses the child
//! stream `derive_seed(master_seed, i)`.

use std::path::{Path, PathBuf};

use idhnet_tensor::SeededRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{normalize_case, voxel_count, write_case, Case, Dims, LabelVolume, Manifest, ManifestRow, NormRegion, Sequence, Split, Volume};

pub const LABEL_CORE: u8 = 1;
pub const LABEL_RIM: u8 = 2;
pub const LABEL_EDEMA: u8 = 3;

/// Edema extent relative to the tumor radii.
pub const EDEMA_SCALE: f64 = 1.35;
/// Brain ellipsoid radii relative to the volume dims.
const BRAIN_SCALE: f64 = 0.47;
const GAIN_AMPLITUDE: f64 = 0.05;
/// Spacing (voxels) of the control grid for heterogeneous texture.
const TEXTURE_CELL: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    /// Voxel coordinates `(z, y, x)`.
    pub tumor_center: [f64; 3],
    /// Outer radii of core + rim, per axis.
    pub tumor_radii: [f64; 3],
    pub mismatch: bool,
    pub mismatch_contrast: f64,
    pub noise_sigma: f64,
    pub boundary_sharpness: f64,
    pub rim_thickness: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Config(format!("phantom dims {:?}", self.dims)));
        }
        if self.tumor_radii.iter().any(|&r| !(r >= 2.0)) {
            return Err(Error::Config(format!("tumor radii must be >= 2 voxels, got {:?}", self.tumor_radii)));
        }
        if self.mismatch && !(self.mismatch_contrast > 0.0) {
            return Err(Error::Config("mismatch contrast must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma {}", self.noise_sigma)));
        }
        if !(self.boundary_sharpness > 0.0) {
            return Err(Error::Config(format!("boundary sharpness {}", self.boundary_sharpness)));
        }
        if !(self.rim_thickness >= 0.0) {
            return Err(Error::Config(format!("rim thickness {}", self.rim_thickness)));
        }
        for a in 0..3 {
            let (c, r) = (self.tumor_center[a], self.tumor_radii[a]);
            if c - r < 0.0 || c + r > (self.dims[a] - 1) as f64 {
                return Err(Error::TumorOutOfBounds(format!(
                    "axis {a}: center {c} radius {r} in extent {}",
                    self.dims[a]
                )));
            }
        }
        Ok(())
    }

    fn core_radii(&self) -> [f64; 3] {
        self.tumor_radii.map(|r| (r - self.rim_thickness).max(1.0))
    }
}

fn norm_radius(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>().sqrt()
}

/// Smooth random field in `[-1, 1]`: uniform values on a coarse control grid,
/// trilinearly interpolated.
fn smooth_field(dims: Dims, rng: &mut SeededRng) -> Vec<f64> {
    let g = dims.map(|d| d / TEXTURE_CELL + 2);
    let ctrl: Vec<f64> = (0..g[0] * g[1] * g[2]).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let at = |z: usize, y: usize, x: usize| ctrl[(z * g[1] + y) * g[2] + x];
    let cell = TEXTURE_CELL as f64;
    let mut out = Vec::with_capacity(voxel_count(dims));
    for z in 0..dims[0] {
        let (fz, tz) = ((z as f64 / cell).floor() as usize, (z as f64 / cell).fract());
        for y in 0..dims[1] {
            let (fy, ty) = ((y as f64 / cell).floor() as usize, (y as f64 / cell).fract());
            for x in 0..dims[2] {
                let (fx, tx) = ((x as f64 / cell).floor() as usize, (x as f64 / cell).fract());
                let mut v = 0.0;
                for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                    for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                            v += wz * wy * wx * at(fz + dz, fy + dy, fx + dx);
                        }
                    }
                }
                out.push(v);
            }
        }
    }
    out
}

/// Builds one phantom case. Deterministic in `spec` (including its seed).
pub fn generate_phantom(spec: &PhantomSpec, id: &str) -> Result<Case> {
    spec.validate()?;
    let dims = spec.dims;
    let n = voxel_count(dims);
    let mut rng = SeededRng::new(spec.seed);
    let phase: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(0.0, std::f64::consts::TAU));
    let tex_t2 = smooth_field(dims, &mut rng);
    let tex_flair = smooth_field(dims, &mut rng);
    let tex_t1c = smooth_field(dims, &mut rng);

    let center = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let brain_r = dims.map(|d| (d as f64 * BRAIN_SCALE).max(1.0));
    let core_r = spec.core_radii();
    let edema_r = spec.tumor_radii.map(|r| r * EDEMA_SCALE);
    let delta = spec.mismatch_contrast;
    let k = spec.boundary_sharpness;

    let mut vols: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0f32; n]);
    let mut mask = vec![0u8; n];
    let mut i = 0;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let rho = norm_radius(p, spec.tumor_center, spec.tumor_radii);
                let rho_core = norm_radius(p, spec.tumor_center, core_r);
                let rho_edema = norm_radius(p, spec.tumor_center, edema_r);
                let label = if rho_core <= 1.0 {
                    LABEL_CORE
                } else if rho <= 1.0 {
                    LABEL_RIM
                } else if rho_edema <= 1.0 {
                    LABEL_EDEMA
                } else {
                    0
                };
                let in_brain = norm_radius(p, center, brain_r) <= 1.0 || label != 0;
                if in_brain {
                    let gain = 1.0
                        + GAIN_AMPLITUDE
                            * (0..3)
                                .map(|a| (std::f64::consts::TAU * p[a] / dims[a] as f64 + phase[a]).cos())
                                .sum::<f64>();
                    // smooth lesion profile shared by edema and the wildtype lesion
                    let falloff = 1.0 / (1.0 + rho.powf(2.0 * k));
                    let (t1, t1c, t2, flair);
                    if spec.mismatch {
                        let (dt2, dflair) = match label {
                            LABEL_CORE => (delta, -delta),
                            LABEL_RIM => (delta, delta),
                            _ => (0.5 * delta * falloff, 0.5 * delta * falloff),
                        };
                        t2 = gain + dt2;
                        flair = gain + dflair;
                        t1 = gain - 0.3 * delta * if label == LABEL_CORE || label == LABEL_RIM { 1.0 } else { 0.0 };
                        t1c = gain + 0.3 * delta * if label == LABEL_RIM { 1.0 } else { 0.0 };
                    } else {
                        t2 = gain + delta * falloff * (1.0 + 0.5 * tex_t2[i]);
                        flair = gain + delta * falloff * (1.0 + 0.5 * tex_flair[i]);
                        t1 = gain - 0.3 * delta * falloff;
                        t1c = gain + 0.3 * delta * falloff * tex_t1c[i].max(0.0);
                    }
                    for (s, v) in [t1, t1c, t2, flair].into_iter().enumerate() {
                        vols[s][i] = v as f32;
                    }
                }
                mask[i] = label;
                i += 1;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in vols.iter_mut() {
            for x in v.iter_mut() {
                if *x != 0.0 {
                    *x += (spec.noise_sigma * rng.normal()) as f32;
                }
            }
        }
    }
    let sequences = vols.map(|data| Volume { dims, spacing: [1.0; 3], data });
    Case::new(id, sequences, Some(LabelVolume::new(dims, mask)?), Some(spec.mismatch as u8))
}

/// `mean(T2 | core) − mean(FLAIR | core)` after z-scoring each sequence over
/// its nonzero voxels.
pub fn mismatch_oracle(case: &Case) -> Result<f64> {
    let mask = case.mask.as_ref().ok_or_else(|| Error::EmptyRegion(format!("case {} has no mask", case.id)))?;
    let core: Vec<usize> = (0..mask.data.len()).filter(|&i| mask.data[i] == LABEL_CORE).collect();
    if core.is_empty() {
        return Err(Error::EmptyRegion(format!("case {} has no core voxels", case.id)));
    }
    let norm = normalize_case(case, NormRegion::NonzeroVoxels);
    let mean = |s: Sequence| core.iter().map(|&i| norm.sequence(s).data[i] as f64).sum::<f64>() / core.len() as f64;
    Ok(mean(Sequence::T2) - mean(Sequence::Flair))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_cases: usize,
    pub mutant_fraction: f64,
    pub dims: Dims,
    /// Tumor radius range in voxels (each axis drawn independently).
    pub radius_range: [f64; 2],
    pub mismatch_contrast: [f64; 2],
    pub noise_sigma: f64,
    pub sharpness_mutant: [f64; 2],
    pub sharpness_wildtype: [f64; 2],
    pub rim_thickness: [f64; 2],
    pub master_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_cases: 20,
            mutant_fraction: 0.3,
            dims: [32, 32, 32],
            radius_range: [4.0, 7.0],
            mismatch_contrast: [0.9, 0.9],
            noise_sigma: 0.3,
            sharpness_mutant: [6.0, 10.0],
            sharpness_wildtype: [1.5, 3.0],
            rim_thickness: [1.0, 2.0],
            master_seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cases < 2 {
            return Err(Error::Config(format!("n_cases {} < 2: both classes are required", self.n_cases)));
        }
        if !(self.mutant_fraction > 0.0 && self.mutant_fraction < 1.0) {
            return Err(Error::Config(format!("mutant_fraction {} outside (0, 1)", self.mutant_fraction)));
        }
        let m = self.mutant_count();
        if m == 0 || m == self.n_cases {
            return Err(Error::Config(format!(
                "{} cases at mutant fraction {} leaves a class empty",
                self.n_cases, self.mutant_fraction
            )));
        }
        for (name, r) in [
            ("radius_range", self.radius_range),
            ("mismatch_contrast", self.mismatch_contrast),
            ("sharpness_mutant", self.sharpness_mutant),
            ("sharpness_wildtype", self.sharpness_wildtype),
            ("rim_thickness", self.rim_thickness),
        ] {
            if !(r[0] <= r[1]) {
                return Err(Error::Config(format!("{name}: empty range {r:?}")));
            }
        }
        if self.radius_range[0] < 2.0 {
            return Err(Error::Config("radius_range must start at >= 2 voxels".into()));
        }
        for a in 0..3 {
            if 2.0 * self.radius_range[1] * EDEMA_SCALE + 2.0 > self.dims[a] as f64 {
                return Err(Error::Config(format!("radius_range {:?} too large for dims {:?}", self.radius_range, self.dims)));
            }
        }
        Ok(())
    }

    pub fn mutant_count(&self) -> usize {
        (self.mutant_fraction * self.n_cases as f64).round() as usize
    }

    /// Spec of case `index`, drawn from its own child stream.
    pub fn case_spec(&self, index: usize, mismatch: bool) -> PhantomSpec {
        let mut rng = SeededRng::new(self.master_seed).child(index as u64 + 1);
        let mut draw = |r: [f64; 2]| rng.uniform_range(r[0], r[1]);
        let tumor_radii = [draw(self.radius_range), draw(self.radius_range), draw(self.radius_range)];
        let mismatch_contrast = draw(self.mismatch_contrast);
        let boundary_sharpness = draw(if mismatch { self.sharpness_mutant } else { self.sharpness_wildtype });
        let rim_thickness = draw(self.rim_thickness);
        // keep the edema inside the volume
        let tumor_center = std::array::from_fn(|a| {
            let margin = tumor_radii[a] * EDEMA_SCALE;
            let hi = self.dims[a] as f64 - 1.0 - margin;
            if hi > margin {
                draw([margin, hi])
            } else {
                (self.dims[a] as f64 - 1.0) / 2.0
            }
        });
        PhantomSpec {
            dims: self.dims,
            tumor_center,
            tumor_radii,
            mismatch,
            mismatch_contrast,
            noise_sigma: self.noise_sigma,
            boundary_sharpness,
            rim_thickness,
            seed: rng.next_u64(),
        }
    }

    /// Class of every case index: exactly [`mutant_count`](Self::mutant_count)
    /// mutants at seeded positions.
    pub fn class_assignment(&self) -> Vec<bool> {
        let mut classes: Vec<bool> = (0..self.n_cases).map(|i| i < self.mutant_count()).collect();
        SeededRng::new(self.master_seed).child(0).shuffle(&mut classes);
        classes
    }

    pub fn case_id(index: usize) -> String {
        format!("ph{index:04}")
    }

    /// All cases in memory.
    pub fn generate(&self) -> Result<Vec<Case>> {
        self.validate()?;
        self.class_assignment()
            .into_iter()
            .enumerate()
            .map(|(i, m)| generate_phantom(&self.case_spec(i, m), &Self::case_id(i)))
            .collect()
    }
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Writes every case as a bundle under `out_dir/<case_id>/` plus
/// `out_dir/manifest.csv` (relative bundle paths, split `unassigned`).
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::write(out_dir, e))?;
    let mut rows = Vec::with_capacity(cfg.n_cases);
    for (i, mismatch) in cfg.class_assignment().into_iter().enumerate() {
        let id = DatasetConfig::case_id(i);
        let case = generate_phantom(&cfg.case_spec(i, mismatch), &id)?;
        write_case(&case, &out_dir.join(&id))?;
        rows.push(ManifestRow { case_id: id.clone(), bundle_path: PathBuf::from(&id), idh_label: case.idh_label, split: Split::Unassigned });
    }
    let manifest = Manifest::new(rows, out_dir)?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
