//! Minimal layer toolkit on top of candle tensors.
//!
//! Parameters are created from a seeded generator and registered in a
//! [`ParamStore`] under hierarchical names, so initialization and dropout
//! are reproducible bit-for-bit.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

/// Named trainable parameters. The first dotted segment of a name is its group.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
}

impl ParamStore {
    pub fn new(device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            device,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Invalid(format!("parameter `{name}` registered twice")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b) as f32).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    (z * std) as f32
                })
                .collect(),
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    /// Parameters whose group is one of `groups`.
    pub fn group_vars(&self, groups: &[&str]) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(n, _)| groups.contains(&group_of(n)))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.vars.keys().map(|n| group_of(n).to_string()).collect();
        g.dedup();
        g
    }

    pub fn count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn count_by_group(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (n, v) in &self.vars {
            *out.entry(group_of(n).to_string()).or_default() += v.elem_count();
        }
        out
    }

    /// SHA-256 over names, shapes and little-endian values of one group.
    pub fn group_hash(&self, group: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (n, v) in self.vars.iter().filter(|(n, _)| group_of(n) == group) {
            h.update(n.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn hashes(&self) -> Result<BTreeMap<String, String>> {
        self.groups()
            .into_iter()
            .map(|g| {
                let h = self.group_hash(&g)?;
                Ok((g, h))
            })
            .collect()
    }

    /// Values of every parameter, by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(n, v)| {
                let data = v.as_tensor().flatten_all()?.to_vec1::<f32>()?;
                Ok((n.clone(), (v.dims().to_vec(), data)))
            })
            .collect()
    }

    /// Overwrites parameter values in place. Every parameter must be present.
    pub fn load(&self, values: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        for (n, v) in &self.vars {
            let (shape, data) = values
                .get(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{n}`")))?;
            if shape.as_slice() != v.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{n}` has shape {shape:?}, model expects {:?}",
                    v.dims()
                )));
            }
            v.set(&Tensor::from_vec(data.clone(), shape.as_slice(), &self.device)?)?;
        }
        if let Some(extra) = values.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Per-call forward state: train/eval mode and the dropout generator.
pub struct Ctx {
    pub train: bool,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.train || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let scale = (1.0 / keep) as f32;
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if self.rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self::with_init(ps, name, d_in, d_out, Init::Uniform(bound), Init::Uniform(bound), rng)
    }

    pub fn zeros(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::with_init(ps, name, d_in, d_out, Init::Zeros, Init::Zeros, rng)
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        w_init: Init,
        b_init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = ps.create(&format!("{name}.weight"), &[d_out, d_in], w_init, rng)?;
        let b = ps.create(&format!("{name}.bias"), &[d_out], b_init, rng)?;
        Ok(Self { w, b: Some(b) })
    }

    /// Applies to the last dimension of any-rank input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| Error::Shape("scalar input to linear".into()))?;
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.w.t()?)?;
        let y = match &self.b {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.w.dim(0)?;
        Ok(y.reshape(out)?)
    }
}

/// 1-D convolution over time on `[B, T, C]` inputs with same-length output.
pub struct Conv1d {
    w: Tensor,
    b: Tensor,
    kernel: usize,
}

impl Conv1d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("conv kernel {kernel} must be odd")));
        }
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let w = ps.create(&format!("{name}.weight"), &[c_out, c_in, kernel], Init::Uniform(bound), rng)?;
        let b = ps.create(&format!("{name}.bias"), &[c_out], Init::Uniform(bound), rng)?;
        Ok(Self { w, b, kernel })
    }

    /// Shifted copies of the zero-padded input are stacked along channels and
    /// multiplied by the flattened kernel.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let pad = self.kernel / 2;
        let x = if pad > 0 {
            let z = Tensor::zeros((b, pad, c), x.dtype(), x.device())?;
            Tensor::cat(&[&z, x, &z], 1)?
        } else {
            x.clone()
        };
        let cols: Vec<Tensor> = (0..self.kernel).map(|j| x.narrow(1, j, t)).collect::<candle_core::Result<_>>()?;
        let cols = Tensor::cat(&cols, 2)?;
        let c_out = self.w.dim(0)?;
        let w = self.w.permute((2, 1, 0))?.reshape((self.kernel * c, c_out))?;
        let y = cols.reshape((b * t, self.kernel * c))?.matmul(&w)?.reshape((b, t, c_out))?;
        Ok(y.broadcast_add(&self.b)?)
    }
}

pub struct LayerNorm {
    gamma: Option<Tensor>,
    beta: Option<Tensor>,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            gamma: Some(ps.create(&format!("{name}.weight"), &[dim], Init::Ones, rng)?),
            beta: Some(ps.create(&format!("{name}.bias"), &[dim], Init::Zeros, rng)?),
            eps: 1e-5,
        })
    }

    /// Normalization without learnable affine terms.
    pub fn plain() -> Self {
        Self {
            gamma: None,
            beta: None,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let mut y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        if let Some(g) = &self.gamma {
            y = y.broadcast_mul(g)?;
        }
        if let Some(b) = &self.beta {
            y = y.broadcast_add(b)?;
        }
        Ok(y)
    }
}

pub struct Embedding {
    table: Tensor,
    dim: usize,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, name: &str, n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let table = ps.create(&format!("{name}.weight"), &[n, dim], Init::Normal((dim as f64).powf(-0.5)), rng)?;
        Ok(Self { table, dim })
    }

    /// `ids` is a `[B, L]` u32 tensor; returns `[B, L, dim]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let flat = ids.flatten_all()?;
        Ok(self.table.index_select(&flat, 0)?.reshape((b, l, self.dim))?)
    }
}

/// Multi-head self-attention with key padding.
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("hidden {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim, rng)?,
            out: Linear::new(ps, &format!("{name}.out"), dim, dim, rng)?,
            heads,
        })
    }

    /// `key_bias` is `[B, 1, 1, T]`: 0 for valid keys, a large negative for padding.
    pub fn forward(&self, x: &Tensor, key_bias: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, t, 3, self.heads, hd))?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let attn = masked_softmax(&q.matmul(&k.t()?)?, key_bias, 1.0 / (hd as f64).sqrt())?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, c))?;
        self.out.forward(&y)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let xs = x.broadcast_sub(&max)?;
    let lse = xs.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(xs.broadcast_sub(&lse)?)
}

/// `[B, T]` 0/1 validity to an additive `[B, 1, 1, T]` attention bias.
pub fn key_bias(valid: &Tensor) -> Result<Tensor> {
    let (b, t) = valid.dims2()?;
    let bias = ((valid - 1.0)? * 1e9)?;
    Ok(bias.reshape((b, 1, 1, t))?)
}

/// Standard sinusoidal table `[len, dim]`.
pub fn sinusoid_positions(len: usize, dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = vec![0f32; len * dim];
    for p in 0..len {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let a = p as f64 * freq;
            data[p * dim + i] = a.sin() as f32;
            data[p * dim + half + i] = a.cos() as f32;
        }
    }
    Ok(Tensor::from_vec(data, (len, dim), device)?)
}

/// Sinusoidal embedding of scalar positions (one per batch row), `[B, dim]`.
pub fn sinusoid_embed(values: &[f64], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = vec![0f32; values.len() * dim];
    for (r, &v) in values.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data[r * dim + i] = (v * freq).sin() as f32;
            data[r * dim + half + i] = (v * freq).cos() as f32;
        }
    }
    Ok(Tensor::from_vec(data, (values.len(), dim), device)?)
}

/// Host-side `[B, T]` 0/1 mask to an f32 tensor.
pub fn mask_tensor(rows: &[Vec<bool>], width: usize, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; rows.len() * width];
    for (b, row) in rows.iter().enumerate() {
        for (t, &m) in row.iter().enumerate().take(width) {
            if m {
                data[b * width + t] = 1.0;
            }
        }
    }
    Ok(Tensor::from_vec(data, (rows.len(), width), device)?)
}

/// Selects positions where `mask` is 1: `x * (1 - m) + fill * m` on `[B, T, C]`.
pub fn replace_masked(x: &Tensor, mask: &Tensor, fill: &Tensor) -> Result<Tensor> {
    let m = mask.unsqueeze(2)?.to_dtype(x.dtype())?;
    let keep = (1.0 - &m)?;
    Ok(x.broadcast_mul(&keep)?.broadcast_add(&m.broadcast_mul(fill)?)?)
}

pub fn f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

/// Softmax over the last axis of `scale * scores + bias`, fused into one
/// pass. `scores` is `[B, H, Tq, Tk]`, `bias` is `[B, 1, 1, Tk]`.
pub fn masked_softmax(scores: &Tensor, bias: &Tensor, scale: f64) -> Result<Tensor> {
    let (b, _, _, tk) = scores.dims4()?;
    if bias.dims() != [b, 1, 1, tk] {
        return Err(Error::Shape(format!("attention bias {:?} for scores {:?}", bias.dims(), scores.dims())));
    }
    let bias = bias.to_dtype(scores.dtype())?.detach().contiguous()?;
    Ok(scores.contiguous()?.apply_op2(&bias, MaskedSoftmax { scale })?)
}

#[derive(Debug, Clone, Copy)]
struct MaskedSoftmax {
    scale: f64,
}

fn cpu_slice<'a, T: candle_core::WithDType>(
    s: &'a candle_core::CpuStorage,
    l: &candle_core::Layout,
) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("fused op needs contiguous input"),
    }
}

macro_rules! softmax_rows {
    ($name:ident, $t:ty) => {
        fn $name(x: &[$t], bias: &[$t], rows_per_batch: usize, tk: usize, scale: f64) -> Vec<$t> {
            let scale = scale as $t;
            let mut out = vec![0.0; x.len()];
            for (r, (xr, or)) in x.chunks_exact(tk).zip(out.chunks_exact_mut(tk)).enumerate() {
                let br = &bias[(r / rows_per_batch) * tk..][..tk];
                let mut max = <$t>::NEG_INFINITY;
                for j in 0..tk {
                    or[j] = scale * xr[j] + br[j];
                    max = max.max(or[j]);
                }
                let mut sum = 0.0;
                for v in or.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let inv = 1.0 / sum;
                or.iter_mut().for_each(|v| *v *= inv);
            }
            out
        }
    };
}

softmax_rows!(softmax_rows_f32, f32);
softmax_rows!(softmax_rows_f64, f64);

impl candle_core::CustomOp2 for MaskedSoftmax {
    fn name(&self) -> &'static str {
        "masked-softmax"
    }

    fn cpu_fwd(
        &self,
        s1: &candle_core::CpuStorage,
        l1: &candle_core::Layout,
        s2: &candle_core::CpuStorage,
        l2: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        let dims = l1.shape().dims();
        let (tq, tk) = (dims[2], dims[3]);
        let per = dims[1] * tq;
        let out = match s1 {
            candle_core::CpuStorage::F32(_) => candle_core::CpuStorage::F32(softmax_rows_f32(
                cpu_slice::<f32>(s1, l1)?,
                cpu_slice::<f32>(s2, l2)?,
                per,
                tk,
                self.scale,
            )),
            candle_core::CpuStorage::F64(_) => candle_core::CpuStorage::F64(softmax_rows_f64(
                cpu_slice::<f64>(s1, l1)?,
                cpu_slice::<f64>(s2, l2)?,
                per,
                tk,
                self.scale,
            )),
            _ => candle_core::bail!("masked softmax supports f32 and f64"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        _scores: &Tensor,
        _bias: &Tensor,
        res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = res.apply_op2_no_bwd(&grad_res.contiguous()?, &SoftmaxGrad { scale: self.scale })?;
        Ok((Some(g), None))
    }
}

/// `scale * y * (g - sum(g * y))` row by row, from softmax output `y` and upstream `g`.
#[derive(Debug, Clone, Copy)]
struct SoftmaxGrad {
    scale: f64,
}

macro_rules! softmax_grad_rows {
    ($name:ident, $t:ty) => {
        fn $name(y: &[$t], g: &[$t], n: usize, scale: f64) -> Vec<$t> {
            let scale = scale as $t;
            let mut out = vec![0.0; y.len()];
            for ((yr, gr), or) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(out.chunks_exact_mut(n)) {
                let dot: $t = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    or[j] = scale * yr[j] * (gr[j] - dot);
                }
            }
            out
        }
    };
}

softmax_grad_rows!(softmax_grad_rows_f32, f32);
softmax_grad_rows!(softmax_grad_rows_f64, f64);

impl candle_core::CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "masked-softmax-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &candle_core::CpuStorage,
        l1: &candle_core::Layout,
        s2: &candle_core::CpuStorage,
        l2: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        let n = *l1.shape().dims().last().unwrap_or(&1);
        let out = match s1 {
            candle_core::CpuStorage::F32(_) => candle_core::CpuStorage::F32(softmax_grad_rows_f32(
                cpu_slice::<f32>(s1, l1)?,
                cpu_slice::<f32>(s2, l2)?,
                n,
                self.scale,
            )),
            candle_core::CpuStorage::F64(_) => candle_core::CpuStorage::F64(softmax_grad_rows_f64(
                cpu_slice::<f64>(s1, l1)?,
                cpu_slice::<f64>(s2, l2)?,
                n,
                self.scale,
            )),
            _ => candle_core::bail!("masked softmax supports f32 and f64"),
        };
        Ok((out, l1.shape().clone()))
    }
}
