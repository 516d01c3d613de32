//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node indices
//! are already a topological order and the backward pass is a single reverse
//! sweep. Shape errors inside the graph are programming errors and panic;
//! callers validate user-facing shapes before building a graph.

use crate::kernels::attention::{window_attention_backward, window_attention_forward, WindowGeom};
use crate::kernels::conv::{conv3d_backward, conv3d_forward, upconv_backward, upconv_forward, ConvGeom, UpGeom};
use crate::tensor::{strides, Float, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation. The forward value is computed by
/// the caller; the op only supplies input gradients.
pub trait CustomOp<T: Float>: Send + Sync {
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Float> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BroadcastMul { a: Var, b: Var, a_off: Vec<usize>, b_off: Vec<usize> },
    Affine { x: Var, scale: T },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    MaxFloor { x: Var, floor: T },
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    UpConv { x: Var, w: Var, b: Option<Var>, geom: UpGeom },
    ToChannelsLast(Var),
    ToChannelsFirst(Var),
    PatchMerge(Var),
    WindowAttention { qkv: Var, table: Var, geom: WindowGeom, probs: Vec<T> },
    Concat { inputs: Vec<Var>, axis: usize },
    Select { x: Var, axis: usize, start: usize },
    MeanSpatial(Var),
    MaxSpatial { x: Var, argmax: Vec<usize> },
    ChannelMean(Var),
    ChannelMax { x: Var, argmax: Vec<usize> },
    Softmax { x: Var, axis: usize },
    Dropout { x: Var, mask: Vec<T> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn spatial5(shape: &[usize]) -> [usize; 3] {
    assert_eq!(shape.len(), 5, "expected (B, C, D, H, W), got {shape:?}");
    [shape[2], shape[3], shape[4]]
}

/// Offsets into a (possibly broadcast) operand for every output element.
fn broadcast_offsets(out: &[usize], inp: &[usize]) -> Vec<usize> {
    assert_eq!(out.len(), inp.len(), "broadcast needs equal ranks");
    let in_strides = strides(inp);
    let eff: Vec<usize> = (0..out.len())
        .map(|i| if inp[i] == 1 { 0 } else { in_strides[i] })
        .collect();
    let total: usize = out.iter().product();
    let mut offs = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..total {
        offs.push(off);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    offs
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf node that receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf node excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Elementwise product with numpy-style broadcasting over size-1 axes
    /// (operands must have equal rank).
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), sb.len(), "broadcast rank mismatch {sa:?} vs {sb:?}");
        let out: Vec<usize> = sa
            .iter()
            .zip(&sb)
            .map(|(&x, &y)| {
                assert!(x == y || x == 1 || y == 1, "cannot broadcast {sa:?} with {sb:?}");
                x.max(y)
            })
            .collect();
        let a_off = broadcast_offsets(&out, &sa);
        let b_off = broadcast_offsets(&out, &sb);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = a_off.iter().zip(&b_off).map(|(&i, &j)| av[i] * bv[j]).collect();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(&out, data), Op::BroadcastMul { a, b, a_off, b_off }, ng)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let v = self.value(x).map(|e| scale * e + shift);
        let ng = self.ng(&[x]);
        self.push(v, Op::Affine { x, scale }, ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > T::zero() || e.is_nan() { e } else { T::zero() });
        let ng = self.ng(&[x]);
        self.push(v, Op::Relu(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let k = T::from_f64(GELU_K);
        let c = T::from_f64(GELU_C);
        let half = T::from_f64(0.5);
        let v = self
            .value(x)
            .map(|e| half * e * (T::one() + (k * (e + c * e * e * e)).tanh()));
        let ng = self.ng(&[x]);
        self.push(v, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| T::one() / (T::one() + (-e).exp()));
        let ng = self.ng(&[x]);
        self.push(v, Op::Sigmoid(x), ng)
    }

    /// `max(x, floor)` elementwise.
    pub fn max_floor(&mut self, x: Var, floor: T) -> Var {
        let v = self.value(x).map(|e| if e > floor || e.is_nan() { e } else { floor });
        let ng = self.ng(&[x]);
        self.push(v, Op::MaxFloor { x, floor }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        let ng = self.ng(&[x]);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Affine map over the last axis: `x (.., in) · wᵀ (in, out) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2);
        let (out_f, in_f) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), in_f, "linear: input width {xs:?} vs weight {ws:?}");
        let rows = self.value(x).numel() / in_f;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); rows * out_f];
        for r in 0..rows {
            let xr = &xd[r * in_f..][..in_f];
            let orow = &mut out[r * out_f..][..out_f];
            for (o, ov) in orow.iter_mut().enumerate() {
                let wr = &wd[o * in_f..][..in_f];
                let mut acc = bd.map_or(T::zero(), |b| b[o]);
                for (&a, &c) in xr.iter().zip(wr) {
                    acc += a * c;
                }
                *ov = acc;
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_f;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(Tensor::new(&shape, out), Op::Linear { x, w, b }, ng)
    }

    /// Layer normalization over the last axis (eps = 1e-5).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let rows = self.value(x).numel() / c;
        let eps = T::from_f64(1e-5);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        assert_eq!(gd.len(), c);
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        let cf = T::from_f64(c as f64);
        for r in 0..rows {
            let xr = &xd[r * c..][..c];
            let mean = xr.iter().copied().sum::<T>() / cf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..c {
                let h = (xr[i] - mean) * rs;
                xhat[r * c + i] = h;
                out[r * c + i] = h * gd[i] + bd[i];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(Tensor::new(&shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// 3D convolution on `(B, Cin, D, H, W)` with weight `(Cout, Cin, k, k, k)`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 5, "conv weight must be (Cout, Cin, k, k, k)");
        assert_eq!(xs[1], ws[1], "conv channels: input {xs:?} weight {ws:?}");
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            input: spatial5(&xs),
            kernel: ws[2],
            stride,
            pad,
        };
        let bd = b.map(|b| self.value(b).data());
        let out = conv3d_forward(self.value(x).data(), self.value(w).data(), bd, &geom);
        let o = geom.output();
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(
            Tensor::new(&[xs[0], ws[0], o[0], o[1], o[2]], out),
            Op::Conv3d { x, w, b, geom },
            ng,
        )
    }

    /// Kernel-2 stride-2 transposed convolution, weight `(Cin, Cout, 2, 2, 2)`.
    pub fn upconv(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 5);
        assert_eq!(xs[1], ws[0], "upconv channels: input {xs:?} weight {ws:?}");
        let geom = UpGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ws[1],
            input: spatial5(&xs),
        };
        let bd = b.map(|b| self.value(b).data());
        let out = upconv_forward(self.value(x).data(), self.value(w).data(), bd, &geom);
        let o = geom.output();
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(
            Tensor::new(&[xs[0], ws[1], o[0], o[1], o[2]], out),
            Op::UpConv { x, w, b, geom },
            ng,
        )
    }

    /// `(B, C, S..)` → `(B, S.., C)`.
    pub fn to_channels_last(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let out = transpose_bcs(self.value(x).data(), b, c, s);
        let mut shape = vec![b];
        shape.extend_from_slice(&xs[2..]);
        shape.push(c);
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&shape, out), Op::ToChannelsLast(x), ng)
    }

    /// `(B, S.., C)` → `(B, C, S..)`.
    pub fn to_channels_first(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let b = xs[0];
        let c = *xs.last().unwrap();
        let s: usize = xs[1..xs.len() - 1].iter().product();
        let out = transpose_bcs(self.value(x).data(), b, s, c);
        let mut shape = vec![b, c];
        shape.extend_from_slice(&xs[1..xs.len() - 1]);
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&shape, out), Op::ToChannelsFirst(x), ng)
    }

    /// Channels-last 2×2×2 space-to-depth: `(B, D, H, W, C)` → `(B, D/2, H/2, W/2, 8C)`.
    pub fn patch_merge(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 5);
        let [b, d, h, w, c] = [xs[0], xs[1], xs[2], xs[3], xs[4]];
        assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, "patch_merge needs even dims, got {xs:?}");
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for_each_merge(b, [d, h, w], c, |src, dst| out[dst..dst + c].copy_from_slice(&xd[src..src + c]));
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&[b, od, oh, ow, 8 * c], out), Op::PatchMerge(x), ng)
    }

    /// Window self-attention over channels-last `qkv` of shape `(B, D, H, W, 3C)`.
    /// `table` is the relative-position bias `(table_len, heads)`.
    pub fn window_attention(&mut self, qkv: Var, table: Var, heads: usize, window: [usize; 3], shift: [usize; 3]) -> Var {
        let qs = self.shape(qkv).to_vec();
        assert_eq!(qs.len(), 5);
        assert_eq!(qs[4] % 3, 0);
        let c = qs[4] / 3;
        let geom = WindowGeom {
            batch: qs[0],
            dims: [qs[1], qs[2], qs[3]],
            channels: c,
            heads,
            window,
            shift,
        };
        for a in 0..3 {
            assert_eq!(geom.dims[a] % window[a], 0, "window {window:?} does not tile {:?}", geom.dims);
        }
        assert_eq!(c % heads, 0);
        assert_eq!(self.value(table).numel(), geom.table_len() * heads, "bias table size");
        let (out, probs) = window_attention_forward(self.value(qkv).data(), self.value(table).data(), &geom);
        let ng = self.ng(&[qkv, table]);
        self.push(
            Tensor::new(&[qs[0], qs[1], qs[2], qs[3], c], out),
            Op::WindowAttention { qkv, table, geom, probs },
            ng,
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty());
        let first = self.shape(inputs[0]).to_vec();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            assert_eq!(s.len(), first.len());
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * n * inner..][..n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = self.ng(inputs);
        self.push(Tensor::new(&shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, ng)
    }

    /// Slice `start..start + len` along `axis`.
    pub fn select(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&xs, axis);
        assert!(start + len <= n, "select {start}+{len} out of {n}");
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + start) * inner..][..len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&shape, out), Op::Select { x, axis, start }, ng)
    }

    /// Global average over all axes after the second: `(B, C, S..)` → `(B, C)`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let inv = T::from_f64(1.0 / s as f64);
        let out = self
            .value(x)
            .data()
            .chunks(s)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&[b, c], out), Op::MeanSpatial(x), ng)
    }

    /// Global max over all axes after the second: `(B, C, S..)` → `(B, C)`.
    pub fn max_spatial(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let mut out = Vec::with_capacity(b * c);
        let mut argmax = Vec::with_capacity(b * c);
        for (k, ch) in self.value(x).data().chunks(s).enumerate() {
            let (mut bi, mut bv) = (0, ch[0]);
            for (i, &v) in ch.iter().enumerate().skip(1) {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            out.push(bv);
            argmax.push(k * s + bi);
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&[b, c], out), Op::MaxSpatial { x, argmax }, ng)
    }

    /// Mean over the channel axis: `(B, C, S..)` → `(B, 1, S..)`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let xd = self.value(x).data();
        let inv = T::from_f64(1.0 / c as f64);
        let mut out = vec![T::zero(); b * s];
        for bi in 0..b {
            let o = &mut out[bi * s..][..s];
            for ci in 0..c {
                for (ov, &v) in o.iter_mut().zip(&xd[(bi * c + ci) * s..][..s]) {
                    *ov += v;
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = xs;
        shape[1] = 1;
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&shape, out), Op::ChannelMean(x), ng)
    }

    /// Max over the channel axis: `(B, C, S..)` → `(B, 1, S..)`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); b * s];
        let mut argmax = vec![0usize; b * s];
        for bi in 0..b {
            for p in 0..s {
                let (mut best, mut bv) = ((bi * c) * s + p, xd[(bi * c) * s + p]);
                for ci in 1..c {
                    let idx = (bi * c + ci) * s + p;
                    if xd[idx] > bv {
                        bv = xd[idx];
                        best = idx;
                    }
                }
                out[bi * s + p] = bv;
                argmax[bi * s + p] = best;
            }
        }
        let mut shape = xs;
        shape[1] = 1;
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&shape, out), Op::ChannelMax { x, argmax }, ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let out = softmax_axis(self.value(x).data(), &xs, axis);
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&xs, out), Op::Softmax { x, axis }, ng)
    }

    /// Inverted dropout with a caller-supplied keep mask (already scaled by
    /// `1 / (1 - rate)` on kept entries).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Var {
        assert_eq!(mask.len(), self.value(x).numel());
        let v = Tensor::new(
            self.shape(x),
            self.value(x).data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        );
        let ng = self.ng(&[x]);
        self.push(v, Op::Dropout { x, mask }, ng)
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let ng = self.ng(inputs);
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, ng)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|e| -e));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    acc(grads, *a, g.zip_map(bv, |x, y| x * y));
                }
                if self.wants(*b) {
                    acc(grads, *b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::BroadcastMul { a, b, a_off, b_off } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); av.numel()];
                    for (k, &gv) in g.data().iter().enumerate() {
                        ga[a_off[k]] += gv * bv.data()[b_off[k]];
                    }
                    acc(grads, *a, Tensor::new(av.shape(), ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); bv.numel()];
                    for (k, &gv) in g.data().iter().enumerate() {
                        gb[b_off[k]] += gv * av.data()[a_off[k]];
                    }
                    acc(grads, *b, Tensor::new(bv.shape(), gb));
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                acc(grads, *x, g.map(|e| e * s));
            }
            Op::Relu(x) => {
                acc(grads, *x, g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() }));
            }
            Op::Gelu(x) => {
                let k = T::from_f64(GELU_K);
                let c = T::from_f64(GELU_C);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                acc(
                    grads,
                    *x,
                    g.zip_map(self.value(*x), |gv, e| {
                        let u = k * (e + c * e * e * e);
                        let t = u.tanh();
                        let du = k * (T::one() + three * c * e * e);
                        gv * (half * (T::one() + t) + half * e * (T::one() - t * t) * du)
                    }),
                );
            }
            Op::Sigmoid(x) => {
                acc(grads, *x, g.zip_map(&node.value, |gv, s| gv * s * (T::one() - s)));
            }
            Op::MaxFloor { x, floor } => {
                let f = *floor;
                acc(grads, *x, g.zip_map(self.value(*x), |gv, xv| if xv > f { gv } else { T::zero() }));
            }
            Op::Reshape(x) => {
                acc(grads, *x, g.clone().reshape(self.shape(*x)));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (out_f, in_f) = (wv.dim(0), wv.dim(1));
                let rows = xv.numel() / in_f;
                let gd = g.data();
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); xv.numel()];
                    for r in 0..rows {
                        let gxr = &mut gx[r * in_f..][..in_f];
                        for o in 0..out_f {
                            let go = gd[r * out_f + o];
                            for (d, &wv) in gxr.iter_mut().zip(&wv.data()[o * in_f..][..in_f]) {
                                *d += go * wv;
                            }
                        }
                    }
                    acc(grads, *x, Tensor::new(xv.shape(), gx));
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); wv.numel()];
                    for r in 0..rows {
                        let xr = &xv.data()[r * in_f..][..in_f];
                        for o in 0..out_f {
                            let go = gd[r * out_f + o];
                            for (d, &xe) in gw[o * in_f..][..in_f].iter_mut().zip(xr) {
                                *d += go * xe;
                            }
                        }
                    }
                    acc(grads, *w, Tensor::new(wv.shape(), gw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); out_f];
                        for r in 0..rows {
                            for (d, &go) in gb.iter_mut().zip(&gd[r * out_f..][..out_f]) {
                                *d += go;
                            }
                        }
                        acc(grads, *b, Tensor::new(&[out_f], gb));
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let c = gam.len();
                let rows = xv.numel() / c;
                let gd = g.data();
                let cf = T::from_f64(c as f64);
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); xv.numel()];
                    for r in 0..rows {
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for i in 0..c {
                            let d = gd[r * c + i] * gam[i];
                            sum_d += d;
                            sum_dh += d * xhat[r * c + i];
                        }
                        for i in 0..c {
                            let d = gd[r * c + i] * gam[i];
                            gx[r * c + i] = rstd[r] * (d - sum_d / cf - xhat[r * c + i] * sum_dh / cf);
                        }
                    }
                    acc(grads, *x, Tensor::new(xv.shape(), gx));
                }
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for r in 0..rows {
                        for i in 0..c {
                            gg[i] += gd[r * c + i] * xhat[r * c + i];
                            gb[i] += gd[r * c + i];
                        }
                    }
                    acc(grads, *gamma, Tensor::new(&[c], gg));
                    acc(grads, *beta, Tensor::new(&[c], gb));
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (gx, gw, gb) = conv3d_backward(xv.data(), wv.data(), g.data(), geom, self.wants(*x));
                if self.wants(*x) {
                    acc(grads, *x, Tensor::new(xv.shape(), gx));
                }
                acc(grads, *w, Tensor::new(wv.shape(), gw));
                if let Some(b) = b {
                    acc(grads, *b, Tensor::new(&[geom.cout], gb));
                }
            }
            Op::UpConv { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (gx, gw, gb) = upconv_backward(xv.data(), wv.data(), g.data(), geom, self.wants(*x));
                if self.wants(*x) {
                    acc(grads, *x, Tensor::new(xv.shape(), gx));
                }
                acc(grads, *w, Tensor::new(wv.shape(), gw));
                if let Some(b) = b {
                    acc(grads, *b, Tensor::new(&[geom.cout], gb));
                }
            }
            Op::ToChannelsLast(x) => {
                let xs = self.shape(*x);
                let s: usize = xs[2..].iter().product();
                acc(grads, *x, Tensor::new(xs, transpose_bcs(g.data(), xs[0], s, xs[1])));
            }
            Op::ToChannelsFirst(x) => {
                let xs = self.shape(*x);
                let c = *xs.last().unwrap();
                let s: usize = xs[1..xs.len() - 1].iter().product();
                acc(grads, *x, Tensor::new(xs, transpose_bcs(g.data(), xs[0], c, s)));
            }
            Op::PatchMerge(x) => {
                let xs = self.shape(*x);
                let c = xs[4];
                let gd = g.data();
                let mut gx = vec![T::zero(); gd.len()];
                for_each_merge(xs[0], [xs[1], xs[2], xs[3]], c, |src, dst| {
                    gx[src..src + c].copy_from_slice(&gd[dst..dst + c])
                });
                acc(grads, *x, Tensor::new(xs, gx));
            }
            Op::WindowAttention { qkv, table, geom, probs } => {
                let (gq, gt) = window_attention_backward(self.value(*qkv).data(), probs, g.data(), geom);
                acc(grads, *qkv, Tensor::new(self.shape(*qkv), gq));
                acc(grads, *table, Tensor::new(self.shape(*table), gt));
            }
            Op::Concat { inputs, axis } => {
                let first = self.shape(inputs[0]);
                let (outer, _, inner) = split_axis(first, *axis);
                let total = node.value.dim(*axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            gv.extend_from_slice(&g.data()[(o * total + offset) * inner..][..n * inner]);
                        }
                        acc(grads, v, Tensor::new(self.shape(v), gv));
                    }
                    offset += n;
                }
            }
            Op::Select { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = node.value.dim(*axis);
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    gx[(o * n + start) * inner..][..len * inner].copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                }
                acc(grads, *x, Tensor::new(xs, gx));
            }
            Op::MeanSpatial(x) => {
                let xs = self.shape(*x);
                let s: usize = xs[2..].iter().product();
                let inv = T::from_f64(1.0 / s as f64);
                let mut gx = Vec::with_capacity(self.value(*x).numel());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv * inv, s));
                }
                acc(grads, *x, Tensor::new(xs, gx));
            }
            Op::MaxSpatial { x, argmax } | Op::ChannelMax { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    gx[idx] += gv;
                }
                acc(grads, *x, Tensor::new(self.shape(*x), gx));
            }
            Op::ChannelMean(x) => {
                let xs = self.shape(*x);
                let (b, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let inv = T::from_f64(1.0 / c as f64);
                let mut gx = vec![T::zero(); b * c * s];
                for bi in 0..b {
                    let gsrc = &g.data()[bi * s..][..s];
                    for ci in 0..c {
                        for (d, &gv) in gx[(bi * c + ci) * s..][..s].iter_mut().zip(gsrc) {
                            *d = gv * inv;
                        }
                    }
                }
                acc(grads, *x, Tensor::new(xs, gx));
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let (outer, n, inner) = split_axis(shape, *axis);
                let p = node.value.data();
                let gd = g.data();
                let mut gx = vec![T::zero(); p.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| p[idx(k)] * gd[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] = p[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                acc(grads, *x, Tensor::new(shape, gx));
            }
            Op::Dropout { x, mask } => {
                let gx = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                acc(grads, *x, Tensor::new(self.shape(*x), gx));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, &node.value, g);
                assert_eq!(gs.len(), inputs.len(), "custom op must return one gradient per input");
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let Some(gv) = gv {
                        acc(grads, v, gv);
                    }
                }
            }
        }
    }
}

/// `(B, P, Q)` → `(B, Q, P)`.
fn transpose_bcs<T: Float>(x: &[T], b: usize, p: usize, q: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        let src = &x[bi * p * q..][..p * q];
        let dst = &mut out[bi * p * q..][..p * q];
        for i in 0..p {
            for j in 0..q {
                dst[j * p + i] = src[i * q + j];
            }
        }
    }
    out
}

/// Visits `(src_offset, dst_offset)` channel blocks of a 2×2×2 space-to-depth.
fn for_each_merge(b: usize, dims: [usize; 3], c: usize, mut f: impl FnMut(usize, usize)) {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    for bi in 0..b {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let dst_base = (((bi * od + z) * oh + y) * ow + x) * 8 * c;
                    for (k, (dz, dy, dx)) in (0..2)
                        .flat_map(|a| (0..2).flat_map(move |b| (0..2).map(move |c| (a, b, c))))
                        .enumerate()
                    {
                        let src = (((bi * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx) * c;
                        f(src, dst_base + k * c);
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax_axis<T: Float>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for k in 0..n {
                let e = (x[idx(k)] - max).exp();
                out[idx(k)] = e;
                denom += e;
            }
            for k in 0..n {
                out[idx(k)] /= denom;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = crate::rng::SeededRng::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.normal()).collect())
    }

    /// Central-difference check of d(sum(f(x) * probe))/dx for every input.
    fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let eval = |ins: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|x| g.leaf(x.clone())).collect();
            let y = f(&mut g, &vars);
            let probe = t(g.shape(y), 99);
            let pv = g.constant(probe);
            let m = g.mul(y, pv);
            let n = g.value(m).numel();
            let flat = g.reshape(m, &[1, 1, n]);
            let s = g.mean_spatial(flat);
            let loss = g.value(s).item();
            let grads = g.backward(s);
            let gs = vars
                .iter()
                .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
                .collect();
            (loss, gs)
        };
        let (_, analytic) = eval(&inputs);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            for i in 0..input.numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = analytic[k].data()[i];
                let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(err < 1e-4, "input {k} elem {i}: analytic {a} numeric {num}");
            }
        }
    }

    #[test]
    fn grad_elementwise() {
        check(vec![t(&[2, 3], 1), t(&[2, 3], 2)], |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.sub(a, v[1]);
            let c = g.gelu(b);
            let d = g.sigmoid(c);
            let e = g.add(d, v[0]);
            g.affine(e, 1.5, 0.2)
        });
    }

    #[test]
    fn grad_broadcast_mul() {
        check(vec![t(&[2, 3, 1, 1], 3), t(&[2, 1, 2, 2], 4)], |g, v| g.mul_broadcast(v[0], v[1]));
    }

    #[test]
    fn grad_linear_layernorm() {
        check(vec![t(&[2, 3, 4], 5), t(&[5, 4], 6), t(&[5], 7), t(&[5], 8), t(&[5], 9)], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            g.layer_norm(y, v[3], v[4])
        });
    }

    #[test]
    fn grad_conv_and_upconv() {
        check(vec![t(&[1, 2, 4, 3, 4], 10), t(&[3, 2, 3, 3, 3], 11), t(&[3], 12)], |g, v| {
            g.conv3d(v[0], v[1], Some(v[2]), 2, 1)
        });
        check(vec![t(&[2, 2, 2, 1, 2], 13), t(&[2, 3, 2, 2, 2], 14), t(&[3], 15)], |g, v| {
            g.upconv(v[0], v[1], Some(v[2]))
        });
    }

    #[test]
    fn grad_layout_ops() {
        check(vec![t(&[1, 3, 2, 2, 4], 16)], |g, v| {
            let a = g.to_channels_last(v[0]);
            let b = g.patch_merge(a);
            g.to_channels_first(b)
        });
        check(vec![t(&[2, 3, 2, 2], 17), t(&[2, 2, 2, 2], 18)], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1);
            g.select(c, 1, 1, 3)
        });
    }

    #[test]
    fn grad_reductions_and_softmax() {
        check(vec![t(&[2, 3, 2, 2, 2], 19)], |g, v| {
            let a = g.mean_spatial(v[0]);
            let b = g.max_spatial(v[0]);
            let s = g.add(a, b);
            g.softmax(s, 1)
        });
        check(vec![t(&[2, 3, 2, 2, 2], 20)], |g, v| {
            let a = g.channel_mean(v[0]);
            let b = g.channel_max(v[0]);
            let c = g.concat(&[a, b], 1);
            g.softmax(c, 1)
        });
    }

    #[test]
    fn grad_window_attention() {
        for shift in [[0, 0, 0], [1, 1, 1], [1, 0, 1]] {
            check(vec![t(&[2, 4, 2, 4, 12], 21), t(&[3 * 3 * 3, 2], 22)], move |g, v| {
                g.window_attention(v[0], v[1], 2, [2, 2, 2], shift)
            });
        }
    }

    #[test]
    fn broadcast_offsets_both_sides() {
        let offs = broadcast_offsets(&[2, 3], &[1, 3]);
        assert_eq!(offs, vec![0, 1, 2, 0, 1, 2]);
        let offs = broadcast_offsets(&[2, 3], &[2, 1]);
        assert_eq!(offs, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[1], vec![2.0f64]));
        let b = g.leaf(Tensor::new(&[1], vec![3.0]));
        let c = g.mul(a, b);
        let grads = g.backward(c);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().item(), 2.0);
    }
}
