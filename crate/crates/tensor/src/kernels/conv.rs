//! Direct 3D convolution kernels over `(B, C, D, H, W)` buffers.
//!
//! Loops run weight-outer so each scalar weight sweeps a whole output plane;
//! for stride 1 the innermost loop is a contiguous axpy the compiler can
//! vectorize.

use crate::tensor::Float;

/// Geometry of a cubic-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn output(&self) -> [usize; 3] {
        let o = |n: usize| (n + 2 * self.pad - self.kernel) / self.stride + 1;
        [o(self.input[0]), o(self.input[1]), o(self.input[2])]
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel.pow(3)
    }
}

/// Output indices `o` for which `o * stride + k - pad` lands inside `0..n_in`.
#[inline]
fn valid_range(n_in: usize, n_out: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if n_in + pad <= k {
        return (0, 0);
    }
    let hi = ((n_in - 1 + pad - k) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

pub fn conv3d_forward<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let [d, h, wd] = g.input;
    let [od, oh, ow] = g.output();
    let in_vol = d * h * wd;
    let out_vol = od * oh * ow;
    let k = g.kernel;
    let k3 = k * k * k;
    let mut out = vec![T::zero(); g.batch * g.cout * out_vol];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let o_plane = &mut out[(b * g.cout + co) * out_vol..][..out_vol];
            if let Some(bias) = bias {
                o_plane.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..g.cin {
                let i_plane = &x[(b * g.cin + ci) * in_vol..][..in_vol];
                let w_base = (co * g.cin + ci) * k3;
                for kz in 0..k {
                    let (z0, z1) = valid_range(d, od, g.stride, g.pad, kz);
                    for ky in 0..k {
                        let (y0, y1) = valid_range(h, oh, g.stride, g.pad, ky);
                        for kx in 0..k {
                            let (x0, x1) = valid_range(wd, ow, g.stride, g.pad, kx);
                            if x0 >= x1 {
                                continue;
                            }
                            let wv = w[w_base + (kz * k + ky) * k + kx];
                            for oz in z0..z1 {
                                let iz = oz * g.stride + kz - g.pad;
                                for oy in y0..y1 {
                                    let iy = oy * g.stride + ky - g.pad;
                                    let o_row = &mut o_plane[(oz * oh + oy) * ow..][..ow];
                                    let i_row = &i_plane[(iz * h + iy) * wd..][..wd];
                                    if g.stride == 1 {
                                        let ix0 = x0 + kx - g.pad;
                                        let n = x1 - x0;
                                        for (o, &i) in o_row[x0..x1].iter_mut().zip(&i_row[ix0..ix0 + n]) {
                                            *o += wv * i;
                                        }
                                    } else {
                                        for ox in x0..x1 {
                                            o_row[ox] += wv * i_row[ox * g.stride + kx - g.pad];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv3d_backward<T: Float>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [d, h, wd] = g.input;
    let [od, oh, ow] = g.output();
    let in_vol = d * h * wd;
    let out_vol = od * oh * ow;
    let k = g.kernel;
    let k3 = k * k * k;
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.cout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let go_plane = &dout[(b * g.cout + co) * out_vol..][..out_vol];
            db[co] += go_plane.iter().copied().sum::<T>();
            for ci in 0..g.cin {
                let i_off = (b * g.cin + ci) * in_vol;
                let i_plane = &x[i_off..][..in_vol];
                let w_base = (co * g.cin + ci) * k3;
                for kz in 0..k {
                    let (z0, z1) = valid_range(d, od, g.stride, g.pad, kz);
                    for ky in 0..k {
                        let (y0, y1) = valid_range(h, oh, g.stride, g.pad, ky);
                        for kx in 0..k {
                            let (x0, x1) = valid_range(wd, ow, g.stride, g.pad, kx);
                            if x0 >= x1 {
                                continue;
                            }
                            let widx = w_base + (kz * k + ky) * k + kx;
                            let wv = w[widx];
                            let mut acc = T::zero();
                            for oz in z0..z1 {
                                let iz = oz * g.stride + kz - g.pad;
                                for oy in y0..y1 {
                                    let iy = oy * g.stride + ky - g.pad;
                                    let go_row = &go_plane[(oz * oh + oy) * ow..][..ow];
                                    let row_off = (iz * h + iy) * wd;
                                    let i_row = &i_plane[row_off..][..wd];
                                    if g.stride == 1 {
                                        let ix0 = x0 + kx - g.pad;
                                        let n = x1 - x0;
                                        for (&go, &i) in go_row[x0..x1].iter().zip(&i_row[ix0..ix0 + n]) {
                                            acc += go * i;
                                        }
                                        if need_dx {
                                            let dx_row = &mut dx[i_off + row_off..][..wd];
                                            for (dxv, &go) in dx_row[ix0..ix0 + n].iter_mut().zip(&go_row[x0..x1]) {
                                                *dxv += wv * go;
                                            }
                                        }
                                    } else {
                                        for ox in x0..x1 {
                                            let ix = ox * g.stride + kx - g.pad;
                                            acc += go_row[ox] * i_row[ix];
                                            if need_dx {
                                                dx[i_off + row_off + ix] += wv * go_row[ox];
                                            }
                                        }
                                    }
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Geometry of a kernel-2, stride-2 transposed convolution (exact 2x upsampling).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
}

impl UpGeom {
    pub fn output(&self) -> [usize; 3] {
        [self.input[0] * 2, self.input[1] * 2, self.input[2] * 2]
    }
}

/// Weight layout `(cin, cout, 2, 2, 2)`.
pub fn upconv_forward<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, g: &UpGeom) -> Vec<T> {
    let [d, h, wd] = g.input;
    let [_, oh, ow] = g.output();
    let in_vol = d * h * wd;
    let out_vol = in_vol * 8;
    let mut out = vec![T::zero(); g.batch * g.cout * out_vol];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let o_plane = &mut out[(b * g.cout + co) * out_vol..][..out_vol];
            if let Some(bias) = bias {
                o_plane.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..g.cin {
                let i_plane = &x[(b * g.cin + ci) * in_vol..][..in_vol];
                for kz in 0..2 {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let wv = w[((ci * g.cout + co) * 2 + kz) * 4 + ky * 2 + kx];
                            for z in 0..d {
                                for y in 0..h {
                                    let i_row = &i_plane[(z * h + y) * wd..][..wd];
                                    let o_row = &mut o_plane[((2 * z + kz) * oh + 2 * y + ky) * ow..][..ow];
                                    for (xi, &iv) in i_row.iter().enumerate() {
                                        o_row[2 * xi + kx] += wv * iv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn upconv_backward<T: Float>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &UpGeom,
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [d, h, wd] = g.input;
    let [_, oh, ow] = g.output();
    let in_vol = d * h * wd;
    let out_vol = in_vol * 8;
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.cout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let go_plane = &dout[(b * g.cout + co) * out_vol..][..out_vol];
            db[co] += go_plane.iter().copied().sum::<T>();
            for ci in 0..g.cin {
                let i_off = (b * g.cin + ci) * in_vol;
                for kz in 0..2 {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let widx = ((ci * g.cout + co) * 2 + kz) * 4 + ky * 2 + kx;
                            let wv = w[widx];
                            let mut acc = T::zero();
                            for z in 0..d {
                                for y in 0..h {
                                    let row_off = (z * h + y) * wd;
                                    let go_row = &go_plane[((2 * z + kz) * oh + 2 * y + ky) * ow..][..ow];
                                    for xi in 0..wd {
                                        let go = go_row[2 * xi + kx];
                                        acc += go * x[i_off + row_off + xi];
                                        if need_dx {
                                            dx[i_off + row_off + xi] += wv * go;
                                        }
                                    }
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straightforward gather-form reference convolution.
    fn conv_ref(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
        let [d, h, wd] = g.input;
        let [od, oh, ow] = g.output();
        let k = g.kernel as isize;
        let mut out = vec![0.0; g.batch * g.cout * od * oh * ow];
        for b in 0..g.batch {
            for co in 0..g.cout {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias[co];
                            for ci in 0..g.cin {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (oz * g.stride) as isize + kz - g.pad as isize;
                                            let iy = (oy * g.stride) as isize + ky - g.pad as isize;
                                            let ix = (ox * g.stride) as isize + kx - g.pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((b * g.cin + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                            let wi = (((co * g.cin + ci) * g.kernel + kz as usize) * g.kernel + ky as usize) * g.kernel + kx as usize;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            out[(((b * g.cout + co) * od + oz) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * a).sin() * 1.3).round() / 2.0 + 0.1 * (i % 7) as f64).collect()
    }

    #[test]
    fn forward_matches_reference() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0), (7, 1, 3)] {
            let g = ConvGeom { batch: 2, cin: 2, cout: 3, input: [5, 6, 4], kernel: k, stride: s, pad: p };
            let x = ramp(2 * 2 * 5 * 6 * 4, 0.37);
            let w = ramp(g.weight_len(), 1.1);
            let bias = vec![0.1, -0.2, 0.3];
            let got = conv3d_forward(&x, &w, Some(&bias), &g);
            let want = conv_ref(&x, &w, &bias, &g);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint() {
        // <conv(x), y> == <x, conv^T(y)> and <dw, w'> consistency via linearity in w.
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let g = ConvGeom { batch: 1, cin: 2, cout: 2, input: [4, 5, 6], kernel: k, stride: s, pad: p };
            let x = ramp(2 * 4 * 5 * 6, 0.21);
            let w = ramp(g.weight_len(), 0.77);
            let y_len = 2 * g.output().iter().product::<usize>();
            let y = ramp(y_len, 0.53);
            let fx = conv3d_forward(&x, &w, None, &g);
            let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let (dx, dw, _) = conv3d_backward(&x, &w, &y, &g, true);
            let rhs_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_x).abs() < 1e-9);
            assert!((lhs - rhs_w).abs() < 1e-9);
        }
    }

    #[test]
    fn upconv_adjoint() {
        let g = UpGeom { batch: 2, cin: 3, cout: 2, input: [2, 3, 2] };
        let x = ramp(2 * 3 * 12, 0.3);
        let w = ramp(3 * 2 * 8, 0.9);
        let y = ramp(2 * 2 * 96, 0.45);
        let fx = upconv_forward(&x, &w, None, &g);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let (dx, dw, _) = upconv_backward(&x, &w, &y, &g, true);
        let rx: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let rw: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-9);
        assert!((lhs - rw).abs() < 1e-9);
    }
}
