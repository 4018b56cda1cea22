use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered parameter arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Places every parameter on the tape.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// Replaces values by name; shapes must agree.
    pub fn load_from(&mut self, arrays: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in arrays {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Format(format!("checkpoint has unknown array `{name}`")))?;
            if self.tensors[id.0].shape != t.shape {
                return Err(Error::Shape(format!(
                    "array `{name}`: checkpoint {:?} vs model {:?}",
                    t.shape, self.tensors[id.0].shape
                )));
            }
            self.tensors[id.0] = t.clone();
        }
        if arrays.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} arrays, model expects {}",
                arrays.len(),
                self.len()
            )));
        }
        Ok(())
    }

    pub fn named_arrays(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }
}

/// Tape handles of a [`ParamStore`] for one forward pass.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Per-parameter gradients, zero where no gradient reached.
    pub fn grads(&self, store: &ParamStore, grads: &Gradients) -> Vec<Vec<f64>> {
        self.0
            .iter()
            .zip(&store.tensors)
            .map(|(v, t)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

/// Uniform init with variance `gain^2 / fan_in`.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..=bound)).collect())
}

#[derive(Debug, Clone, Copy)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init_uniform(rng, &[co, ci, k, k, k], ci * k * k * k, gain));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[co]));
        Conv3d { w, b, stride, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv3d(x, p.var(self.w), p.var(self.b), self.stride, self.pad)
    }
}

/// Affine map on row vectors: `[n, in] -> [n, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        out: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init_uniform(rng, &[input, out], input, gain));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, out])));
        Linear { w, b, out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w));
        match self.b {
            Some(b) if g.shape(y)[0] == 1 => g.add(y, p.var(b)),
            Some(b) => {
                let rows = g.shape(y)[0];
                let ones = g.constant(Tensor::full(&[rows, 1], 1.0));
                let bias = g.matmul(ones, p.var(b));
                g.add(y, bias)
            }
            None => y,
        }
    }
}

/// Adaptive moment estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, tensor) in store.tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..tensor.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                tensor.data[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}
