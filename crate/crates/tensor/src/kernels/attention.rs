//! (Shifted) window multi-head self-attention over a channels-last 3D grid.
//!
//! The cyclic shift is folded into the token gather: window `w`, local
//! offset `l` reads grid position `(w * window + l + shift) mod dims`, and the
//! result is written back to that same position, so no roll/unroll copies
//! are needed. Token pairs that come from different regions of the rolled
//! grid are masked out entirely (probability exactly zero).

use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGeom {
    pub batch: usize,
    pub dims: [usize; 3],
    pub channels: usize,
    pub heads: usize,
    pub window: [usize; 3],
    pub shift: [usize; 3],
}

impl WindowGeom {
    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    pub fn num_windows(&self) -> usize {
        (0..3).map(|a| self.dims[a] / self.window[a]).product()
    }

    pub fn table_len(&self) -> usize {
        self.window.iter().map(|w| 2 * w - 1).product()
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Per-window token layout shared by forward and backward.
pub struct WindowLayout {
    /// `tokens[w * n + l]` = flat spatial index of local token `l` in window `w`.
    pub tokens: Vec<usize>,
    /// Region id in the rolled grid (only tokens with equal ids attend).
    pub region: Vec<u8>,
    /// `rel[i * n + j]` = relative-position table row for the pair.
    pub rel: Vec<usize>,
}

fn region_of(c: usize, n: usize, window: usize, shift: usize) -> u8 {
    if shift == 0 || c < n - window {
        0
    } else if c < n - shift {
        1
    } else {
        2
    }
}

impl WindowLayout {
    pub fn new(g: &WindowGeom) -> Self {
        let [d, h, w] = g.dims;
        let [wd, wh, ww] = g.window;
        let n = g.tokens_per_window();
        let nw = [d / wd, h / wh, w / ww];
        let mut tokens = Vec::with_capacity(g.num_windows() * n);
        let mut region = Vec::with_capacity(g.num_windows() * n);
        for bz in 0..nw[0] {
            for by in 0..nw[1] {
                for bx in 0..nw[2] {
                    for lz in 0..wd {
                        for ly in 0..wh {
                            for lx in 0..ww {
                                let (sz, sy, sx) = (bz * wd + lz, by * wh + ly, bx * ww + lx);
                                let z = (sz + g.shift[0]) % d;
                                let y = (sy + g.shift[1]) % h;
                                let x = (sx + g.shift[2]) % w;
                                tokens.push((z * h + y) * w + x);
                                let r = region_of(sz, d, wd, g.shift[0]) * 9
                                    + region_of(sy, h, wh, g.shift[1]) * 3
                                    + region_of(sx, w, ww, g.shift[2]);
                                region.push(r);
                            }
                        }
                    }
                }
            }
        }
        let coords: Vec<[usize; 3]> = (0..n)
            .map(|l| [l / (wh * ww), (l / ww) % wh, l % ww])
            .collect();
        let (sh, sw) = (2 * wh - 1, 2 * ww - 1);
        let mut rel = Vec::with_capacity(n * n);
        for ci in &coords {
            for cj in &coords {
                let dz = ci[0] + wd - 1 - cj[0];
                let dy = ci[1] + wh - 1 - cj[1];
                let dx = ci[2] + ww - 1 - cj[2];
                rel.push((dz * sh + dy) * sw + dx);
            }
        }
        Self { tokens, region, rel }
    }
}

/// `qkv`: `(B, N, 3C)` with `[q | k | v]` blocks; `table`: `(table_len, heads)`.
/// Returns the attention output `(B, N, C)` and the probabilities
/// `(B, windows, heads, n, n)` needed by the backward pass.
pub fn window_attention_forward<T: Float>(qkv: &[T], table: &[T], g: &WindowGeom) -> (Vec<T>, Vec<T>) {
    let layout = WindowLayout::new(g);
    let c = g.channels;
    let hd = g.head_dim();
    let n = g.tokens_per_window();
    let nwin = g.num_windows();
    let spatial: usize = g.dims.iter().product();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut out = vec![T::zero(); g.batch * spatial * c];
    let mut probs = vec![T::zero(); g.batch * nwin * g.heads * n * n];
    let mut q = vec![T::zero(); n * hd];
    let mut k = vec![T::zero(); n * hd];
    let mut v = vec![T::zero(); n * hd];
    let mut row = vec![T::zero(); n];
    for b in 0..g.batch {
        let base = b * spatial;
        for win in 0..nwin {
            let toks = &layout.tokens[win * n..][..n];
            let regs = &layout.region[win * n..][..n];
            for head in 0..g.heads {
                for (l, &t) in toks.iter().enumerate() {
                    let src = &qkv[(base + t) * 3 * c..][..3 * c];
                    q[l * hd..][..hd].copy_from_slice(&src[head * hd..][..hd]);
                    k[l * hd..][..hd].copy_from_slice(&src[c + head * hd..][..hd]);
                    v[l * hd..][..hd].copy_from_slice(&src[2 * c + head * hd..][..hd]);
                }
                let p_block = &mut probs[(((b * nwin + win) * g.heads) + head) * n * n..][..n * n];
                for i in 0..n {
                    let qi = &q[i * hd..][..hd];
                    let mut max = T::neg_infinity();
                    for j in 0..n {
                        if regs[i] != regs[j] {
                            row[j] = T::neg_infinity();
                            continue;
                        }
                        let kj = &k[j * hd..][..hd];
                        let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                        let s = dot * scale + table[layout.rel[i * n + j] * g.heads + head];
                        row[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut denom = T::zero();
                    for r in row.iter_mut() {
                        *r = if *r == T::neg_infinity() { T::zero() } else { (*r - max).exp() };
                        denom += *r;
                    }
                    let p_row = &mut p_block[i * n..][..n];
                    for (p, &r) in p_row.iter_mut().zip(row.iter()) {
                        *p = r / denom;
                    }
                    let o = &mut out[(base + toks[i]) * c + head * hd..][..hd];
                    for (j, &p) in p_row.iter().enumerate() {
                        if p == T::zero() {
                            continue;
                        }
                        for (ov, &vv) in o.iter_mut().zip(&v[j * hd..][..hd]) {
                            *ov += p * vv;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(d_qkv, d_table)`.
pub fn window_attention_backward<T: Float>(
    qkv: &[T],
    probs: &[T],
    dout: &[T],
    g: &WindowGeom,
) -> (Vec<T>, Vec<T>) {
    let layout = WindowLayout::new(g);
    let c = g.channels;
    let hd = g.head_dim();
    let n = g.tokens_per_window();
    let nwin = g.num_windows();
    let spatial: usize = g.dims.iter().product();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut dqkv = vec![T::zero(); qkv.len()];
    let mut dtable = vec![T::zero(); g.table_len() * g.heads];
    let mut q = vec![T::zero(); n * hd];
    let mut k = vec![T::zero(); n * hd];
    let mut v = vec![T::zero(); n * hd];
    let mut dq = vec![T::zero(); n * hd];
    let mut dk = vec![T::zero(); n * hd];
    let mut dv = vec![T::zero(); n * hd];
    let mut dp = vec![T::zero(); n];
    for b in 0..g.batch {
        let base = b * spatial;
        for win in 0..nwin {
            let toks = &layout.tokens[win * n..][..n];
            for head in 0..g.heads {
                for (l, &t) in toks.iter().enumerate() {
                    let src = &qkv[(base + t) * 3 * c..][..3 * c];
                    q[l * hd..][..hd].copy_from_slice(&src[head * hd..][..hd]);
                    k[l * hd..][..hd].copy_from_slice(&src[c + head * hd..][..hd]);
                    v[l * hd..][..hd].copy_from_slice(&src[2 * c + head * hd..][..hd]);
                }
                dq.iter_mut().for_each(|x| *x = T::zero());
                dk.iter_mut().for_each(|x| *x = T::zero());
                dv.iter_mut().for_each(|x| *x = T::zero());
                let p_block = &probs[(((b * nwin + win) * g.heads) + head) * n * n..][..n * n];
                for i in 0..n {
                    let go = &dout[(base + toks[i]) * c + head * hd..][..hd];
                    let p_row = &p_block[i * n..][..n];
                    let mut weighted = T::zero();
                    for j in 0..n {
                        let p = p_row[j];
                        if p == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = &v[j * hd..][..hd];
                        dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        weighted += p * dp[j];
                        for (d, &gv) in dv[j * hd..][..hd].iter_mut().zip(go) {
                            *d += p * gv;
                        }
                    }
                    for j in 0..n {
                        let p = p_row[j];
                        if p == T::zero() {
                            continue;
                        }
                        let ds = p * (dp[j] - weighted);
                        dtable[layout.rel[i * n + j] * g.heads + head] += ds;
                        let ds = ds * scale;
                        for t in 0..hd {
                            dq[i * hd + t] += ds * k[j * hd + t];
                            dk[j * hd + t] += ds * q[i * hd + t];
                        }
                    }
                }
                for (l, &t) in toks.iter().enumerate() {
                    let dst = &mut dqkv[(base + t) * 3 * c..][..3 * c];
                    for e in 0..hd {
                        dst[head * hd + e] += dq[l * hd + e];
                        dst[c + head * hd + e] += dk[l * hd + e];
                        dst[2 * c + head * hd + e] += dv[l * hd + e];
                    }
                }
            }
        }
    }
    (dqkv, dtable)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_partition_grid() {
        for shift in [[0, 0, 0], [2, 2, 2], [2, 0, 1]] {
            let g = WindowGeom { batch: 1, dims: [8, 4, 4], channels: 4, heads: 2, window: [4, 4, 2], shift };
            let layout = WindowLayout::new(&g);
            let mut seen = layout.tokens.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..128).collect::<Vec<_>>());
        }
    }

    #[test]
    fn unshifted_has_single_region() {
        let g = WindowGeom { batch: 1, dims: [4, 4, 4], channels: 2, heads: 1, window: [2, 2, 2], shift: [0; 3] };
        assert!(WindowLayout::new(&g).region.iter().all(|&r| r == 0));
    }

    #[test]
    fn rows_sum_to_one() {
        let g = WindowGeom { batch: 2, dims: [4, 4, 4], channels: 4, heads: 2, window: [2, 2, 2], shift: [1, 1, 1] };
        let qkv: Vec<f64> = (0..2 * 64 * 12).map(|i| ((i * 31 % 17) as f64 - 8.0) / 9.0).collect();
        let table = vec![0.05; g.table_len() * 2];
        let (_, probs) = window_attention_forward(&qkv, &table, &g);
        for row in probs.chunks(8) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
