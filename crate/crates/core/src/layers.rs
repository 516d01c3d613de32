//! Parameterised building blocks over the autodiff graph.

use idhnet_tensor::{Bound, Float, Graph, ParamId, ParamStore, SeededRng, Tensor, Var};

pub(crate) const LINEAR_INIT_STD: f64 = 0.02;

pub(crate) fn trunc_normal<T: Float>(shape: &[usize], std: f64, rng: &mut SeededRng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::from_f64(rng.truncated_normal(std))).collect())
}

/// Registers parameters under a common name prefix.
pub(crate) struct Builder<'a, T: Float> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut SeededRng,
}

impl<T: Float> Builder<'_, T> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = trunc_normal(shape, std, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::one()))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn new<T: Float>(bld: &mut Builder<T>, name: &str, inp: usize, out: usize) -> Self {
        Self {
            w: bld.normal(&format!("{name}.weight"), &[out, inp], LINEAR_INIT_STD),
            b: bld.zeros(&format!("{name}.bias"), &[out]),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn new<T: Float>(bld: &mut Builder<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: bld.ones(&format!("{name}.weight"), &[width]),
            beta: bld.zeros(&format!("{name}.bias"), &[width]),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p[self.gamma], p[self.beta])
    }
}

/// 3D convolution with He-scaled truncated-normal weights.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub(crate) fn new<T: Float>(bld: &mut Builder<T>, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let std = (2.0 / (cin * kernel.pow(3)) as f64).sqrt();
        Self {
            w: bld.normal(&format!("{name}.weight"), &[cout, cin, kernel, kernel, kernel], std),
            b: bld.zeros(&format!("{name}.bias"), &[cout]),
            stride,
            pad,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv3d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

/// Kernel-2 stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub w: ParamId,
    pub b: ParamId,
}

impl UpConv {
    pub(crate) fn new<T: Float>(bld: &mut Builder<T>, name: &str, cin: usize, cout: usize) -> Self {
        let std = (2.0 / cin as f64).sqrt();
        Self {
            w: bld.normal(&format!("{name}.weight"), &[cin, cout, 2, 2, 2], std),
            b: bld.zeros(&format!("{name}.bias"), &[cout]),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.upconv(x, p[self.w], Some(p[self.b]))
    }
}

/// `linear → ReLU → [dropout] → linear` classification head.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl MlpHead {
    pub(crate) fn new<T: Float>(bld: &mut Builder<T>, name: &str, inp: usize, hidden: usize, out: usize, dropout: f64) -> Self {
        Self {
            fc1: Linear::new(bld, &format!("{name}.fc1"), inp, hidden),
            fc2: Linear::new(bld, &format!("{name}.fc2"), hidden, out),
            dropout,
        }
    }

    /// Dropout is applied only when `rng` is given (training mode).
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var, rng: Option<&mut SeededRng>) -> Var {
        let h = self.fc1.forward(g, p, x);
        let mut h = g.relu(h);
        if let Some(rng) = rng {
            if self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                let scale = T::from_f64(1.0 / keep);
                let mask = (0..g.value(h).numel())
                    .map(|_| if rng.bernoulli(keep) { scale } else { T::zero() })
                    .collect();
                h = g.dropout(h, mask);
            }
        }
        self.fc2.forward(g, p, h)
    }
}
