//! Finite-difference verification of analytic gradients for a whole
//! network in `f64`.

use idhnet_tensor::{Graph, ParamId, SeededRng, Tensor};

use crate::error::Result;
use crate::loss::LossConfig;
use crate::model::Network;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Individually checked scalars per tensor (the largest-gradient entry
    /// plus random ones); `None` checks every scalar.
    pub samples_per_tensor: Option<usize>,
    /// Random-direction checks per tensor; each perturbs all its scalars.
    pub directions_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-6, floor: 1e-6, samples_per_tensor: Some(24), directions_per_tensor: 1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub probes: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn probes(&self) -> usize {
        self.tensors.iter().map(|t| t.probes).sum()
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Batch to differentiate: input, optional masks, labels and loss weights.
pub struct Objective<'a> {
    pub x: &'a Tensor<f64>,
    pub masks: Option<&'a [u8]>,
    pub labels: &'a [u8],
    pub loss: &'a LossConfig,
}

impl Objective<'_> {
    pub fn value(&self, net: &Network<f64>) -> Result<f64> {
        let mut g = Graph::new();
        let p = net.params.bind_frozen(&mut g);
        let x = g.constant(self.x.clone());
        let out = net.forward(&mut g, &p, x, None);
        let terms = net.loss(&mut g, &out, self.masks, self.labels, self.loss)?;
        Ok(g.value(terms.total).item())
    }

    pub fn gradients(&self, net: &Network<f64>) -> Result<Vec<Tensor<f64>>> {
        let mut g = Graph::new();
        let p = net.params.bind(&mut g);
        let x = g.constant(self.x.clone());
        let out = net.forward(&mut g, &p, x, None);
        let terms = net.loss(&mut g, &out, self.masks, self.labels, self.loss)?;
        let grads = g.backward(terms.total);
        Ok(p.gradients(&grads, &net.params))
    }
}

fn central(net: &mut Network<f64>, obj: &Objective, id: ParamId, dir: &[(usize, f64)], h: f64) -> Result<f64> {
    let apply = |net: &mut Network<f64>, s: f64| {
        let t = net.params.get_mut(id).data_mut();
        for &(i, d) in dir {
            t[i] += s * d;
        }
    };
    let orig: Vec<f64> = dir.iter().map(|&(i, _)| net.params.get(id).data()[i]).collect();
    apply(net, h);
    let plus = obj.value(net)?;
    apply(net, -2.0 * h);
    let minus = obj.value(net)?;
    let t = net.params.get_mut(id).data_mut();
    for (&(i, _), v) in dir.iter().zip(orig) {
        t[i] = v;
    }
    Ok((plus - minus) / (2.0 * h))
}

/// Compares analytic gradients of the objective with central differences
/// for every parameter tensor of `net`.
pub fn check_gradients(net: &mut Network<f64>, obj: &Objective, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let grads = obj.gradients(net)?;
    let mut rng = SeededRng::new(opts.seed);
    let ids: Vec<ParamId> = net.params.ids().collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for (id, grad) in ids.into_iter().zip(&grads) {
        let n = grad.numel();
        let gd = grad.data();
        let mut idx: Vec<usize> = match opts.samples_per_tensor {
            None => (0..n).collect(),
            Some(k) => {
                let top = (0..n).max_by(|&a, &b| gd[a].abs().total_cmp(&gd[b].abs())).unwrap_or(0);
                let mut v = vec![top];
                while v.len() < k.min(n) {
                    let i = rng.below(n);
                    if !v.contains(&i) {
                        v.push(i);
                    }
                }
                v
            }
        };
        idx.sort_unstable();
        let mut worst = 0.0f64;
        for &i in &idx {
            let num = central(net, obj, id, &[(i, 1.0)], opts.step)?;
            worst = worst.max(rel_err(gd[i], num, opts.floor));
        }
        for _ in 0..opts.directions_per_tensor {
            let d: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dir: Vec<(usize, f64)> = d.iter().enumerate().map(|(i, v)| (i, v / norm)).collect();
            let ana: f64 = dir.iter().map(|&(i, v)| gd[i] * v).sum();
            let num = central(net, obj, id, &dir, opts.step)?;
            worst = worst.max(rel_err(ana, num, opts.floor));
        }
        tensors.push(TensorCheck {
            name: net.params.name(id).to_string(),
            numel: n,
            probes: idx.len() + opts.directions_per_tensor,
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport { tensors })
}

/// Adds `N(0, scale²)` noise to every parameter. Zero-initialised biases put
/// ReLU inputs exactly on the kink where finite differences are meaningless;
/// a generic point avoids that.
pub fn jitter_params(net: &mut Network<f64>, scale: f64, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for (_, t) in net.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += scale * rng.normal());
    }
}
