//! Named parameter storage and the small set of layers the networks are
//! assembled from. All tensors are `f64` on the CPU.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEVICE: Device = Device::Cpu;
pub const DTYPE: DType = DType::F64;

/// Trainable parameters addressed by dotted names, e.g.
/// `generator.reasoning.0.layer0.w_cross_s`.
#[derive(Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, value: &Tensor) -> Result<()> {
        let var = Var::from_tensor(&value.to_dtype(DTYPE)?.copy()?)?;
        self.vars.insert(name, var);
        Ok(())
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Parameters whose name starts with `prefix.`
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> {
        self.vars
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix) && k[prefix.len()..].starts_with('.'))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let var = self
            .var(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        Ok(var.as_tensor().flatten_all()?.to_vec1::<f64>()?)
    }

    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self
            .var(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if values.len() != var.elem_count() {
            return Err(Error::shape(format!(
                "`{name}` holds {} values, got {}",
                var.elem_count(),
                values.len()
            )));
        }
        let t = Tensor::from_slice(values, var.shape(), &DEVICE)?;
        var.set(&t)?;
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values of the parameters
    /// under `prefix` (all parameters when empty).
    pub fn digest(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            if !prefix.is_empty() && !(name.starts_with(prefix) && name[prefix.len()..].starts_with('.')) {
                continue;
            }
            h.update(name.as_bytes());
            h.update(format!("{:?}", var.dims()).as_bytes());
            for v in var.as_tensor().flatten_all()?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn view(&self, prefix: &str) -> Weights<'_> {
        Weights {
            store: self,
            prefix: prefix.to_string(),
            frozen: false,
        }
    }

    /// Same as [`view`](Self::view) but every tensor is detached, so no
    /// gradient reaches these parameters.
    pub fn frozen_view(&self, prefix: &str) -> Weights<'_> {
        Weights {
            store: self,
            prefix: prefix.to_string(),
            frozen: true,
        }
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Read access to a sub-tree of a [`ParamStore`].
#[derive(Clone)]
pub struct Weights<'a> {
    store: &'a ParamStore,
    prefix: String,
    frozen: bool,
}

impl<'a> Weights<'a> {
    pub fn pp(&self, sub: impl AsRef<str>) -> Weights<'a> {
        Weights {
            store: self.store,
            prefix: join(&self.prefix, sub.as_ref()),
            frozen: self.frozen,
        }
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let full = join(&self.prefix, name);
        let var = self
            .store
            .var(&full)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{full}`")))?;
        Ok(if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// Declares parameters with seeded initial values.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `sub` appended to the name prefix.
    pub fn scoped<T>(&mut self, sub: impl AsRef<str>, f: impl FnOnce(&mut Init<'_>) -> Result<T>) -> Result<T> {
        let prefix = join(&self.prefix, sub.as_ref());
        let mut child = Init {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        };
        f(&mut child)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| {
                if bound == 0.0 {
                    0.0
                } else {
                    self.rng.gen_range(-bound..bound)
                }
            })
            .collect();
        let t = Tensor::from_vec(values, shape, &DEVICE)?;
        self.store.insert(join(&self.prefix, name), &t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let t = Tensor::full(value, shape, &DEVICE)?;
        self.store.insert(join(&self.prefix, name), &t)
    }

    /// Conv weight `(out, in, k, k)` and bias `(out)`, uniform in
    /// `±1/sqrt(fan_in)`.
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        self.uniform(&format!("{name}.weight"), &[c_out, c_in, k, k], bound)?;
        self.uniform(&format!("{name}.bias"), &[c_out], bound)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<()> {
        let bound = 1.0 / (d_in as f64).sqrt();
        self.uniform(name, &[d_in, d_out], bound)
    }
}

pub fn conv2d(w: &Weights, name: &str, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let weight = w.get(&format!("{name}.weight"))?;
    let bias = w.get(&format!("{name}.bias"))?;
    let y = x.conv2d(&weight, padding, stride, 1, 1)?;
    let c = bias.dim(0)?;
    Ok(y.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

/// Per-sample, per-channel normalization without affine parameters.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let y = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(y.reshape((b, c, h, w))?)
}

/// Nearest-neighbour upsampling by an integer factor, built from broadcast and
/// reshape. candle's own op overwrites rather than accumulates its input
/// gradient, which breaks when one tensor feeds two upsamplings.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .contiguous()?
        .reshape((b, c, h * factor, w * factor))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Logistic function via `tanh`, which stays finite for any input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    ((x * 0.5).tanh() + 1.0) * 0.5
}

pub fn tensor_from_array3(a: &ndarray::Array3<f64>) -> Result<Tensor> {
    let shape = a.shape().to_vec();
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, shape, &DEVICE)?)
}

/// Stacks equally shaped `(C, H, W)` arrays into a `(B, C, H, W)` tensor.
pub fn batch_tensor<'a>(items: impl IntoIterator<Item = &'a ndarray::Array3<f64>>) -> Result<Tensor> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    let mut n = 0;
    for a in items {
        match &shape {
            None => shape = Some(a.shape().to_vec()),
            Some(s) if s.as_slice() != a.shape() => {
                return Err(Error::shape(format!("batch item {:?} vs {:?}", a.shape(), s)))
            }
            _ => {}
        }
        data.extend(a.iter().copied());
        n += 1;
    }
    let shape = shape.ok_or_else(|| Error::shape("empty batch"))?;
    Ok(Tensor::from_vec(data, (n, shape[0], shape[1], shape[2]), &DEVICE)?)
}

pub fn array3_from_tensor(t: &Tensor) -> Result<ndarray::Array3<f64>> {
    let (c, h, w) = t.dims3()?;
    let v = t.flatten_all()?.to_vec1::<f64>()?;
    ndarray::Array3::from_shape_vec((c, h, w), v).map_err(|e| Error::shape(e.to_string()))
}
