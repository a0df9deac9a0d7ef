//! Named parameter storage and the small set of layers the models share.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// All trainable and frozen arrays of a model, keyed by dotted name.
#[derive(Debug, Clone)]
pub struct ParamMap {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamMap {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.vars.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    fn insert(&mut self, name: String, var: Var) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    /// Overwrites every `to*` parameter with the value of the matching `from*`
    /// one. Both sides must have identical names and shapes.
    pub fn copy_prefix(&self, from: &str, to: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, dst) in self.with_prefix(to) {
            let src_name = format!("{from}{}", &name[to.len()..]);
            let src = self.vars.get(&src_name).ok_or_else(|| {
                Error::config(format!("architecture mismatch: {src_name} has no counterpart for {name}"))
            })?;
            if src.dims() != dst.dims() {
                return Err(Error::config(format!(
                    "architecture mismatch: {src_name} {:?} vs {name} {:?}",
                    src.dims(),
                    dst.dims()
                )));
            }
            dst.set(&src.as_tensor().copy()?)?;
            copied += 1;
        }
        let expected = self.with_prefix(from).count();
        if copied != expected {
            return Err(Error::config(format!(
                "architecture mismatch: copied {copied} of {expected} parameters from {from}"
            )));
        }
        Ok(copied)
    }

    /// Hex SHA-256 over names, shapes and little-endian values of every
    /// parameter under `prefix`.
    pub fn hash(&self, prefix: &str) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, var) in self.with_prefix(prefix) {
            h.update(name.as_bytes());
            h.update(format!("{:?}", var.dims()).as_bytes());
            h.update(tensor_le_bytes(var.as_tensor())?);
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn num_values(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).map(|(_, v)| v.elem_count()).sum()
    }
}

/// Raw little-endian bytes in the tensor's own dtype (f32 or f64).
pub fn tensor_le_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        _ => flat
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
    })
}

/// Registers freshly initialised parameters under a name prefix.
pub struct Builder<'a> {
    map: &'a mut ParamMap,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(map: &'a mut ParamMap, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            map,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl AsRef<str>) -> Builder<'_> {
        Builder {
            prefix: format!("{}{}.", self.prefix, name.as_ref()),
            map: self.map,
            rng: self.rng,
        }
    }

    pub fn dtype(&self) -> DType {
        self.map.dtype
    }

    pub fn device(&self) -> Device {
        self.map.device.clone()
    }

    fn register(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.map.device)?.to_dtype(self.map.dtype)?;
        let full = format!("{}{name}", self.prefix);
        self.map.insert(full, Var::from_tensor(&t)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut *self.rng))
            .collect();
        self.register(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        self.constant(name, shape, 0.0)
    }
}

/// Convenience for tests: a fresh map and a seeded generator.
pub fn seeded(dtype: DType, seed: u64) -> (ParamMap, ChaCha8Rng) {
    (ParamMap::new(dtype), ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Var,
    pub b: Option<Var>,
}

impl Linear {
    /// Normal weights with std `1/sqrt(fan_in)` scaled by `gain`.
    pub fn new(b: &mut Builder, d_in: usize, d_out: usize, bias: bool, gain: f64) -> Result<Self> {
        let w = b.normal("w", &[d_in, d_out], gain / (d_in as f64).sqrt())?;
        let bias = if bias { Some(b.zeros("b", &[d_out])?) } else { None };
        Ok(Self { w, b: bias })
    }

    pub fn zeros(b: &mut Builder, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let w = b.zeros("w", &[d_in, d_out])?;
        let bias = if bias { Some(b.zeros("b", &[d_out])?) } else { None };
        Ok(Self { w, b: bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(self.w.as_tensor())?;
        Ok(match &self.b {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

/// 2-D convolution over NCHW input with square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Var,
    pub b: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        Ok(Self {
            w: b.normal("w", &[c_out, c_in, k, k], 1.0 / fan_in.sqrt())?,
            b: b.zeros("b", &[c_out])?,
            stride,
            padding: k / 2,
        })
    }

    pub fn zeros(b: &mut Builder, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            w: b.zeros("w", &[c_out, c_in, k, k])?,
            b: b.zeros("b", &[c_out])?,
            stride,
            padding: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.w.as_tensor(), self.padding, self.stride, 1, 1)?;
        let c = self.b.dims()[0];
        Ok(y.broadcast_add(&self.b.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Group normalisation over NCHW input, affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Var,
    pub beta: Var,
}

pub const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(b: &mut Builder, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!(
                "group norm: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            groups,
            gamma: b.constant("gamma", &[channels], 1.0)?,
            beta: b.zeros("beta", &[channels])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let g = normalize_last(&g)?;
        let y = g.reshape((n, c, h, w))?;
        let y = y.broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?;
        Ok(y.broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Zero mean, unit variance over the last axis (no affine).
pub fn normalize_last(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Multi-head self-attention over `[B, n, W]`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(b: &mut Builder, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::config(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(&mut b.sub("qkv"), width, 3 * width, true, 1.0)?,
            out: Linear::new(&mut b.sub("out"), width, width, true, 1.0)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, n, width) = x.dims3()?;
        let dh = width / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bsz, n, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let att = softmax_last(&att)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((bsz, n, width))?;
        self.out.forward(&y)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut b.sub("fc1"), width, hidden, true, 1.0)?,
            fc2: Linear::new(&mut b.sub("fc2"), hidden, width, true, 1.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Sinusoidal embedding of a scalar, `[dim]`.
pub fn sinusoidal(value: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (value * freq).sin();
        out[half + i] = (value * freq).cos();
    }
    out
}

/// Mean over all elements as a host `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_names_and_duplicates() {
        let (mut map, mut rng) = seeded(DType::F32, 0);
        let mut b = Builder::new(&mut map, &mut rng);
        Linear::new(&mut b.sub("a").sub("lin"), 3, 4, true, 1.0).unwrap();
        assert!(Linear::new(&mut b.sub("a").sub("lin"), 3, 4, true, 1.0).is_err());
        let names: Vec<_> = map.iter().map(|(k, _)| k.clone()).collect();
        assert_eq!(names, vec!["a.lin.b", "a.lin.w"]);
    }

    #[test]
    fn copy_prefix_matches_values_and_hash_tracks_changes() {
        let (mut map, mut rng) = seeded(DType::F32, 1);
        let mut b = Builder::new(&mut map, &mut rng);
        Linear::new(&mut b.sub("x"), 3, 4, true, 1.0).unwrap();
        Linear::new(&mut b.sub("y"), 3, 4, true, 1.0).unwrap();
        let before = map.hash("y.").unwrap();
        assert_eq!(map.copy_prefix("x.", "y.").unwrap(), 2);
        assert_ne!(before, map.hash("y.").unwrap());
        let xw = map.get("x.w").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let yw = map.get("y.w").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(xw, yw);
    }

    #[test]
    fn copy_prefix_rejects_shape_mismatch() {
        let (mut map, mut rng) = seeded(DType::F32, 1);
        let mut b = Builder::new(&mut map, &mut rng);
        Linear::new(&mut b.sub("x"), 3, 4, true, 1.0).unwrap();
        Linear::new(&mut b.sub("y"), 3, 5, true, 1.0).unwrap();
        assert!(map.copy_prefix("x.", "y.").is_err());
    }

    #[test]
    fn group_norm_normalises_each_group() {
        let (mut map, mut rng) = seeded(DType::F64, 2);
        let mut b = Builder::new(&mut map, &mut rng);
        let gn = GroupNorm::new(&mut b, 2, 4).unwrap();
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu).unwrap().reshape((1, 4, 2, 4)).unwrap();
        let y = gn.forward(&x).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for g in v.chunks(16) {
            let m: f64 = g.iter().sum::<f64>() / 16.0;
            let var: f64 = g.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 1000.0, 0.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in &s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((s[1][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn strided_conv_output_shape() {
        let (mut map, mut rng) = seeded(DType::F32, 3);
        let mut b = Builder::new(&mut map, &mut rng);
        let conv = Conv2d::new(&mut b, 5, 7, 3, 2).unwrap();
        let x = Tensor::zeros((2, 5, 16, 12), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[2, 7, 8, 6]);
    }
}
