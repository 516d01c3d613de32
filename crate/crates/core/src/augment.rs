//! Training-time augmentation: axis flips, right-angle rotations in the axial
//! (H, W) plane, and a global intensity scale. Geometric transforms permute voxels
//! identically in every sequence and the mask.

use idhnet_tensor::SeededRng;
use serde::{Deserialize, Serialize};

use crate::volume::{voxel_count, Case, Dims};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub flip_prob: f64,
    pub rotate: bool,
    pub intensity_scale: bool,
    pub scale_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip: true, flip_prob: 0.5, rotate: true, intensity_scale: true, scale_range: [0.9, 1.1] }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { flip: false, rotate: false, intensity_scale: false, ..Self::default() }
    }
}

/// Applies `src_index(dst coords)` to every volume and the mask.
fn remap(case: &Case, out_dims: Dims, src_of: impl Fn([usize; 3]) -> usize) -> Case {
    let n = voxel_count(out_dims);
    let mut map = Vec::with_capacity(n);
    for z in 0..out_dims[0] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[2] {
                map.push(src_of([z, y, x]));
            }
        }
    }
    let mut out = case.clone();
    for (dst, src) in out.sequences.iter_mut().zip(&case.sequences) {
        dst.dims = out_dims;
        dst.data = map.iter().map(|&i| src.data[i]).collect();
    }
    if let (Some(dst), Some(src)) = (out.mask.as_mut(), case.mask.as_ref()) {
        dst.dims = out_dims;
        dst.data = map.iter().map(|&i| src.data[i]).collect();
    }
    out
}

pub fn flip(case: &Case, axis: usize) -> Case {
    let d = case.dims();
    remap(case, d, |mut p| {
        p[axis] = d[axis] - 1 - p[axis];
        (p[0] * d[1] + p[1]) * d[2] + p[2]
    })
}

/// Quarter turn in the plane of axes `(a, b)`: `dst[.., i, .., j] = src[.., j', .., i]`
/// with `j' = n_b − 1 − j`.
pub fn rot90(case: &Case, a: usize, b: usize) -> Case {
    let d = case.dims();
    let mut out_dims = d;
    out_dims.swap(a, b);
    remap(case, out_dims, |p| {
        let mut s = p;
        s[a] = d[a] - 1 - p[b];
        s[b] = p[a];
        (s[0] * d[1] + s[1]) * d[2] + s[2]
    })
}

/// Random augmentation; consumes a fixed number of draws from `rng` for a
/// given config so streams stay aligned.
pub fn augment(case: &Case, cfg: &AugmentConfig, rng: &mut SeededRng) -> Case {
    let mut out = case.clone();
    if cfg.flip {
        for axis in 0..3 {
            if rng.bernoulli(cfg.flip_prob) {
                out = flip(&out, axis);
            }
        }
    }
    if cfg.rotate {
        let (a, b) = (1, 2);
        let mut turns = rng.below(4);
        let d = out.dims();
        if d[a] != d[b] {
            // keep dims unchanged on non-square planes
            turns &= !1;
        }
        for _ in 0..turns {
            out = rot90(&out, a, b);
        }
    }
    if cfg.intensity_scale {
        let s = rng.uniform_range(cfg.scale_range[0], cfg.scale_range[1]) as f32;
        for v in out.sequences.iter_mut() {
            v.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{LabelVolume, Volume};

    fn case() -> Case {
        let dims = [3, 4, 4];
        let n = voxel_count(dims);
        let v = Volume::new(dims, (0..n).map(|i| i as f32).collect()).unwrap();
        let mask = LabelVolume::new(dims, (0..n).map(|i| (i % 4) as u8).collect()).unwrap();
        Case::new("a", [v.clone(), v.clone(), v.clone(), v], Some(mask), Some(1)).unwrap()
    }

    #[test]
    fn flip_is_involution() {
        let c = case();
        for axis in 0..3 {
            assert_eq!(flip(&flip(&c, axis), axis), c);
        }
    }

    #[test]
    fn four_quarter_turns_identity() {
        let c = case();
        let mut r = c.clone();
        for _ in 0..4 {
            r = rot90(&r, 1, 2);
        }
        assert_eq!(r, c);
        assert_eq!(rot90(&c, 0, 1).dims(), [4, 3, 4]);
    }

    #[test]
    fn disabled_is_identity() {
        let c = case();
        let mut rng = SeededRng::new(1);
        assert_eq!(augment(&c, &AugmentConfig::disabled(), &mut rng), c);
    }
}
