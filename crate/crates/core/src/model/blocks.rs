use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Conv1d, Ctx, LayerNorm, Linear, ParamStore, SelfAttention};

/// Post-norm feed-forward transformer block: self-attention then a
/// convolutional position-wise network.
pub(crate) struct FftBlock {
    attn: SelfAttention,
    ln_attn: LayerNorm,
    conv: Conv1d,
    proj: Linear,
    ln_ffn: LayerNorm,
    dropout: f64,
}

impl FftBlock {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        ps: &mut ParamStore,
        name: &str,
        hidden: usize,
        heads: usize,
        kernel: usize,
        filter: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn: SelfAttention::new(ps, &format!("{name}.attn"), hidden, heads, rng)?,
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), hidden, rng)?,
            conv: Conv1d::new(ps, &format!("{name}.ffn_conv"), hidden, filter, kernel, rng)?,
            proj: Linear::new(ps, &format!("{name}.ffn_proj"), filter, hidden, rng)?,
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), hidden, rng)?,
            dropout,
        })
    }

    /// `valid3` is `[B, T, 1]`, `bias` the matching attention key bias.
    pub(crate) fn forward(&self, x: &Tensor, valid3: &Tensor, bias: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let y = ctx.dropout(&self.attn.forward(x, bias)?, self.dropout)?;
        let x = self.ln_attn.forward(&(x + y)?)?.broadcast_mul(valid3)?;
        let h = self.conv.forward(&x)?.relu()?;
        let h = ctx.dropout(&h, self.dropout)?;
        let y = ctx.dropout(&self.proj.forward(&h)?, self.dropout)?;
        Ok(self.ln_ffn.forward(&(x + y)?)?.broadcast_mul(valid3)?)
    }
}

/// Convolution stack regressing one scalar per position.
pub(crate) struct VariancePredictor {
    convs: Vec<(Conv1d, LayerNorm)>,
    out: Linear,
    dropout: f64,
}

impl VariancePredictor {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        ps: &mut ParamStore,
        name: &str,
        hidden: usize,
        layers: usize,
        kernel: usize,
        filter: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(layers);
        for i in 0..layers {
            let c_in = if i == 0 { hidden } else { filter };
            convs.push((
                Conv1d::new(ps, &format!("{name}.conv{i}"), c_in, filter, kernel, rng)?,
                LayerNorm::new(ps, &format!("{name}.ln{i}"), filter, rng)?,
            ));
        }
        Ok(Self {
            convs,
            out: Linear::new(ps, &format!("{name}.out"), filter, 1, rng)?,
            dropout,
        })
    }

    /// `[B, L, hidden]` to `[B, L]`, zero at padding.
    pub(crate) fn forward(&self, x: &Tensor, valid3: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let mut h = x.broadcast_mul(valid3)?;
        for (conv, ln) in &self.convs {
            h = ln.forward(&conv.forward(&h)?.relu()?)?;
            h = ctx.dropout(&h, self.dropout)?.broadcast_mul(valid3)?;
        }
        Ok(self.out.forward(&h)?.broadcast_mul(valid3)?.squeeze(D::Minus1)?)
    }
}

/// GELU in its sigmoid form, `x * sigmoid(1.702 x)`.
fn gelu_sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 1.702)?.silu()? / 1.702)?)
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

/// Transformer block whose norms are modulated by the conditioning vector,
/// with zero-initialized modulation so every residual branch starts as a no-op.
pub(crate) struct DitBlock {
    ada: Linear,
    attn: SelfAttention,
    fc1: Linear,
    fc2: Linear,
    norm: LayerNorm,
    hidden: usize,
    dropout: f64,
}

impl DitBlock {
    pub(crate) fn new(
        ps: &mut ParamStore,
        name: &str,
        hidden: usize,
        heads: usize,
        mlp: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            ada: Linear::zeros(ps, &format!("{name}.ada"), hidden, 6 * hidden, rng)?,
            attn: SelfAttention::new(ps, &format!("{name}.attn"), hidden, heads, rng)?,
            fc1: Linear::new(ps, &format!("{name}.fc1"), hidden, mlp, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), mlp, hidden, rng)?,
            norm: LayerNorm::plain(),
            hidden,
            dropout,
        })
    }

    /// `cond` is the activated conditioning vector `[B, hidden]`.
    pub(crate) fn forward(
        &self,
        x: &Tensor,
        cond: &Tensor,
        valid3: &Tensor,
        bias: &Tensor,
        ctx: &mut Ctx,
    ) -> Result<Tensor> {
        let m = self.ada.forward(cond)?.unsqueeze(1)?;
        let part = |i: usize| m.narrow(2, i * self.hidden, self.hidden);
        let (shift1, scale1, gate1) = (part(0)?, part(1)?, part(2)?);
        let (shift2, scale2, gate2) = (part(3)?, part(4)?, part(5)?);

        let h = modulate(&self.norm.forward(x)?, &shift1, &scale1)?;
        let h = ctx.dropout(&self.attn.forward(&h, bias)?, self.dropout)?;
        let x = (x + h.broadcast_mul(&gate1)?)?;

        let h = modulate(&self.norm.forward(&x)?, &shift2, &scale2)?;
        let h = ctx.dropout(&gelu_sigmoid(&self.fc1.forward(&h)?)?, self.dropout)?;
        let h = ctx.dropout(&self.fc2.forward(&h)?, self.dropout)?;
        Ok((x + h.broadcast_mul(&gate2)?)?.broadcast_mul(valid3)?)
    }
}

/// Output head: modulated norm followed by a projection.
pub(crate) struct FinalLayer {
    ada: Linear,
    norm: LayerNorm,
    proj: Linear,
    hidden: usize,
}

impl FinalLayer {
    pub(crate) fn new(ps: &mut ParamStore, name: &str, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            ada: Linear::zeros(ps, &format!("{name}.ada"), hidden, 2 * hidden, rng)?,
            norm: LayerNorm::plain(),
            proj: Linear::new(ps, &format!("{name}.proj"), hidden, out, rng)?,
            hidden,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let m = self.ada.forward(cond)?.unsqueeze(1)?;
        let shift = m.narrow(2, 0, self.hidden)?;
        let scale = m.narrow(2, self.hidden, self.hidden)?;
        self.proj.forward(&modulate(&self.norm.forward(x)?, &shift, &scale)?)
    }
}
