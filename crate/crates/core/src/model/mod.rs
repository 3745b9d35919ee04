//! The editing network: phoneme encoder, variance adaptor, mel encoder,
//! DiT spectrogram denoiser and the auxiliary phoneme classifier.

mod blocks;
pub mod checkpoint;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use self::blocks::{DitBlock, FftBlock, FinalLayer, VariancePredictor};
use crate::error::{Error, Result};
use crate::features::{DurationSequence, PitchNorm};
use crate::nn::{
    key_bias, mask_tensor, replace_masked, sinusoid_embed, sinusoid_positions, Ctx, Embedding,
    Init, Linear, ParamStore,
};
use crate::text::{INVENTORY_SIZE, MASK_TOKEN};

/// Parameter groups. TTT adapts exactly one of these per stage.
pub mod groups {
    pub const ENCODER: &str = "encoder";
    pub const SHARED: &str = "shared";
    pub const DURATION: &str = "duration";
    pub const PITCH: &str = "pitch";
    pub const CONDITION: &str = "condition";
    pub const DENOISER: &str = "denoiser";
    pub const CLASSIFIER: &str = "classifier";
    pub const ALL: [&str; 7] = [ENCODER, SHARED, DURATION, PITCH, CONDITION, DENOISER, CLASSIFIER];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub kernel: usize,
    pub filter: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub layers: usize,
    pub kernel: usize,
    pub filter: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub step_embed: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub vocab: usize,
    pub encoder: EncoderConfig,
    pub duration: PredictorConfig,
    pub pitch: PredictorConfig,
    pub mel_encoder_hidden: usize,
    pub speaker_dim: usize,
    pub denoiser: DenoiserConfig,
    pub classifier: EncoderConfig,
    pub pitch_bins: usize,
    pub pitch_norm: PitchNorm,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Full-size configuration.
    fn default() -> Self {
        Self {
            n_mels: 80,
            vocab: INVENTORY_SIZE,
            encoder: EncoderConfig {
                layers: 4,
                hidden: 192,
                heads: 2,
                kernel: 5,
                filter: 768,
                dropout: 0.0,
            },
            duration: PredictorConfig {
                layers: 3,
                kernel: 5,
                filter: 192,
                dropout: 0.2,
            },
            pitch: PredictorConfig {
                layers: 5,
                kernel: 5,
                filter: 192,
                dropout: 0.2,
            },
            mel_encoder_hidden: 192,
            speaker_dim: 192,
            denoiser: DenoiserConfig {
                blocks: 12,
                hidden: 384,
                heads: 6,
                mlp_hidden: 1536,
                step_embed: 384,
                dropout: 0.1,
            },
            classifier: EncoderConfig {
                layers: 2,
                hidden: 256,
                heads: 2,
                kernel: 3,
                filter: 1024,
                dropout: 0.5,
            },
            pitch_bins: 256,
            pitch_norm: PitchNorm::LogF0,
            seed: 1234,
        }
    }
}

impl ModelConfig {
    /// Narrow configuration for single-core desk runs. Depths and kernel
    /// sizes follow the full model; widths shrink.
    pub fn toy() -> Self {
        let full = Self::default();
        Self {
            encoder: EncoderConfig {
                layers: 2,
                hidden: 64,
                filter: 128,
                ..full.encoder
            },
            duration: PredictorConfig {
                filter: 64,
                ..full.duration
            },
            pitch: PredictorConfig {
                filter: 32,
                ..full.pitch
            },
            mel_encoder_hidden: 64,
            speaker_dim: 32,
            denoiser: DenoiserConfig {
                blocks: 2,
                hidden: 64,
                heads: 2,
                mlp_hidden: 128,
                step_embed: 64,
                dropout: 0.0,
            },
            classifier: EncoderConfig {
                layers: 1,
                hidden: 48,
                heads: 2,
                kernel: 3,
                filter: 96,
                dropout: 0.1,
            },
            ..full
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_mels,
            self.vocab,
            self.encoder.layers,
            self.encoder.hidden,
            self.encoder.heads,
            self.encoder.kernel,
            self.encoder.filter,
            self.duration.layers,
            self.duration.kernel,
            self.duration.filter,
            self.pitch.layers,
            self.pitch.kernel,
            self.pitch.filter,
            self.mel_encoder_hidden,
            self.speaker_dim,
            self.denoiser.blocks,
            self.denoiser.hidden,
            self.denoiser.heads,
            self.denoiser.mlp_hidden,
            self.denoiser.step_embed,
            self.classifier.layers,
            self.classifier.hidden,
            self.classifier.heads,
            self.classifier.kernel,
            self.classifier.filter,
            self.pitch_bins,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("every model size must be positive".into()));
        }
        if self.denoiser.hidden % self.denoiser.heads != 0 {
            return Err(Error::Config(format!(
                "denoiser hidden {} not divisible by {} heads",
                self.denoiser.hidden, self.denoiser.heads
            )));
        }
        if self.mel_encoder_hidden != self.encoder.hidden {
            return Err(Error::Config(
                "mel encoder and phoneme encoder widths must match (shared mask embedding)".into(),
            ));
        }
        let dropouts = [
            self.encoder.dropout,
            self.duration.dropout,
            self.pitch.dropout,
            self.denoiser.dropout,
            self.classifier.dropout,
        ];
        if dropouts.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.encoder.hidden
    }
}

/// Phoneme ids over the inventory, optionally including the mask token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSequence(Vec<u32>);

impl PhonemeSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Invalid("empty phoneme sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i > MASK_TOKEN) {
            return Err(Error::Invalid(format!(
                "phoneme id {bad} outside inventory of {INVENTORY_SIZE} (+ mask token)"
            )));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Encoder output `[1, N, D]`.
#[derive(Debug, Clone)]
pub struct PhonemeEmbedding(pub Tensor);

/// Frame-rate hidden states `[1, T, D]`.
#[derive(Debug, Clone)]
pub struct AlignedHidden(pub Tensor);

impl PhonemeEmbedding {
    pub fn len(&self) -> usize {
        self.0.dim(1).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl AlignedHidden {
    pub fn frames(&self) -> usize {
        self.0.dim(1).unwrap_or(0)
    }
}

/// Predictor inputs with masked positions replaced by the mask embedding.
#[derive(Debug, Clone)]
pub struct MaskedContext {
    /// `[1, N, D]`
    pub duration: Tensor,
    /// `[1, T, D]`
    pub pitch: Tensor,
    pub mask_p: Vec<bool>,
    pub mask_f: Vec<bool>,
}

/// Denoiser conditioning.
#[derive(Debug, Clone)]
pub struct Condition {
    /// `[B, speaker_dim]`
    pub speaker: Tensor,
    /// `[B, T, D]`
    pub mel: Tensor,
}

/// Column `k` of `e_y` repeated `d[k]` times.
pub fn length_regulate(e_y: &PhonemeEmbedding, d: &DurationSequence) -> Result<AlignedHidden> {
    if d.len() != e_y.len() {
        return Err(Error::Shape(format!(
            "{} durations for {} phonemes",
            d.len(),
            e_y.len()
        )));
    }
    let (out, _) = regulate_batch(&e_y.0, &[d.0.clone()])?;
    Ok(AlignedHidden(out))
}

/// Batched length regulation; rows are zero-padded to the longest output.
pub(crate) fn regulate_batch(e_y: &Tensor, durations: &[Vec<u32>]) -> Result<(Tensor, Vec<usize>)> {
    let (b, n, d) = e_y.dims3()?;
    if durations.len() != b {
        return Err(Error::Shape(format!("{} duration rows for batch {b}", durations.len())));
    }
    let lens: Vec<usize> = durations.iter().map(|r| r.iter().map(|&x| x as usize).sum()).collect();
    let t_max = lens.iter().copied().max().unwrap_or(0);
    if t_max == 0 {
        return Err(Error::Shape("length regulation produced zero frames".into()));
    }
    let mut rows = Vec::with_capacity(b);
    for (i, row) in durations.iter().enumerate() {
        if row.len() > n {
            return Err(Error::Shape(format!("{} durations for {n} phonemes", row.len())));
        }
        let idx: Vec<u32> = row
            .iter()
            .enumerate()
            .flat_map(|(k, &dk)| std::iter::repeat_n(k as u32, dk as usize))
            .collect();
        let src = e_y.get(i)?;
        let mut part = if idx.is_empty() {
            Tensor::zeros((0, d), e_y.dtype(), e_y.device())?
        } else {
            let idx = Tensor::from_vec(idx, lens[i], e_y.device())?;
            src.index_select(&idx, 0)?
        };
        if lens[i] < t_max {
            let pad = Tensor::zeros((t_max - lens[i], d), e_y.dtype(), e_y.device())?;
            part = if lens[i] == 0 { pad } else { Tensor::cat(&[&part, &pad], 0)? };
        }
        rows.push(part);
    }
    Ok((Tensor::stack(&rows, 0)?, lens))
}

/// Maps normalized pitch values to embedding bins; bin 0 is unvoiced.
pub fn pitch_bins(values: &[f32], norm: PitchNorm, bins: usize) -> Vec<u32> {
    let (lo, hi) = match norm {
        PitchNorm::LogF0 => (60f32.ln(), 500f32.ln()),
        PitchNorm::Hz => (60.0, 500.0),
    };
    let top = (bins - 1) as f32;
    values
        .iter()
        .map(|&v| {
            if !(v > lo * 0.5) {
                0
            } else {
                let r = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
                1 + (r * (top - 1.0)).round() as u32
            }
        })
        .collect()
}

pub struct SpeechEditModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    phone_emb: Embedding,
    enc_blocks: Vec<FftBlock>,
    mask_emb: Tensor,
    dur_ctx: Linear,
    dp: VariancePredictor,
    pitch_ctx: Embedding,
    pp: VariancePredictor,
    pitch_cond: Embedding,
    mel_enc_in: Linear,
    mel_enc_out: Linear,
    spk_proj: Linear,
    in_x: Linear,
    in_mel: Linear,
    in_e: Linear,
    step_fc1: Linear,
    step_fc2: Linear,
    spk_in: Linear,
    dit: Vec<DitBlock>,
    final_layer: FinalLayer,
    cls_in: Linear,
    cls_blocks: Vec<FftBlock>,
    cls_out: Linear,
}

impl std::fmt::Debug for SpeechEditModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpeechEditModel")
            .field("params", &self.params.count())
            .finish_non_exhaustive()
    }
}

impl SpeechEditModel {
    pub fn new(cfg: ModelConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rng = &mut rng;
        let mut ps = ParamStore::new(device.clone());
        let ps = &mut ps;
        let h = cfg.encoder.hidden;
        let e = &cfg.encoder;
        let phone_emb = Embedding::new(ps, "encoder.embedding", cfg.vocab + 1, h, rng)?;
        let enc_blocks = (0..e.layers)
            .map(|i| {
                FftBlock::new(ps, &format!("encoder.block{i}"), h, e.heads, e.kernel, e.filter, e.dropout, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mask_emb = ps.create("shared.mask_embedding", &[h], Init::Normal(0.5), rng)?;

        let dur_ctx = Linear::new(ps, "duration.context", 1, h, rng)?;
        let dc = &cfg.duration;
        let dp = VariancePredictor::new(ps, "duration.predictor", h, dc.layers, dc.kernel, dc.filter, dc.dropout, rng)?;

        let pitch_ctx = Embedding::new(ps, "pitch.context", cfg.pitch_bins, h, rng)?;
        let pc = &cfg.pitch;
        let pp = VariancePredictor::new(ps, "pitch.predictor", h, pc.layers, pc.kernel, pc.filter, pc.dropout, rng)?;
        let pitch_cond = Embedding::new(ps, "pitch.condition", cfg.pitch_bins, h, rng)?;

        let mh = cfg.mel_encoder_hidden;
        let mel_enc_in = Linear::new(ps, "condition.mel_in", cfg.n_mels, mh, rng)?;
        let mel_enc_out = Linear::new(ps, "condition.mel_out", mh, mh, rng)?;
        let spk_proj = Linear::new(ps, "condition.speaker", mh, cfg.speaker_dim, rng)?;

        let dn = &cfg.denoiser;
        let c = dn.hidden;
        let in_x = Linear::new(ps, "denoiser.in_x", cfg.n_mels, c, rng)?;
        let in_mel = Linear::new(ps, "denoiser.in_mel", mh, c, rng)?;
        let in_e = Linear::new(ps, "denoiser.in_hidden", h, c, rng)?;
        let step_fc1 = Linear::new(ps, "denoiser.step_fc1", dn.step_embed, 4 * dn.step_embed, rng)?;
        let step_fc2 = Linear::new(ps, "denoiser.step_fc2", 4 * dn.step_embed, c, rng)?;
        let spk_in = Linear::new(ps, "denoiser.speaker", cfg.speaker_dim, c, rng)?;
        let dit = (0..dn.blocks)
            .map(|i| DitBlock::new(ps, &format!("denoiser.block{i}"), c, dn.heads, dn.mlp_hidden, dn.dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_layer = FinalLayer::new(ps, "denoiser.final", c, cfg.n_mels, rng)?;

        let cc = &cfg.classifier;
        let cls_in = Linear::new(ps, "classifier.in", cfg.n_mels, cc.hidden, rng)?;
        let cls_blocks = (0..cc.layers)
            .map(|i| {
                FftBlock::new(ps, &format!("classifier.block{i}"), cc.hidden, cc.heads, cc.kernel, cc.filter, cc.dropout, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let cls_out = Linear::new(ps, "classifier.out", cc.hidden, cfg.vocab, rng)?;

        let params = std::mem::replace(ps, ParamStore::new(device.clone()));
        Ok(Self {
            cfg,
            params,
            phone_emb,
            enc_blocks,
            mask_emb,
            dur_ctx,
            dp,
            pitch_ctx,
            pp,
            pitch_cond,
            mel_enc_in,
            mel_enc_out,
            spk_proj,
            in_x,
            in_mel,
            in_e,
            step_fc1,
            step_fc2,
            spk_in,
            dit,
            final_layer,
            cls_in,
            cls_blocks,
            cls_out,
        })
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn mask_embedding(&self) -> &Tensor {
        &self.mask_emb
    }

    /// Trainable parameters excluding the classifier.
    pub fn core_param_count(&self) -> usize {
        self.params
            .count_by_group()
            .iter()
            .filter(|(g, _)| g.as_str() != groups::CLASSIFIER)
            .map(|(_, n)| n)
            .sum()
    }

    // ---- batched tensor API -------------------------------------------------

    /// `ids [B, N] u32`, `valid [B, N]` to `[B, N, D]`.
    pub fn encode(&self, ids: &Tensor, valid: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let (_, n) = ids.dims2()?;
        let h = self.cfg.encoder.hidden;
        let pos = sinusoid_positions(n, h, self.device())?;
        let x = (self.phone_emb.forward(ids)? * (h as f64).sqrt())?.broadcast_add(&pos)?;
        let valid3 = valid.unsqueeze(2)?;
        let bias = key_bias(valid)?;
        let mut x = x.broadcast_mul(&valid3)?;
        for b in &self.enc_blocks {
            x = b.forward(&x, &valid3, &bias, ctx)?;
        }
        Ok(x)
    }

    /// Duration context from `log(1 + d)` with `mask` positions replaced.
    pub fn duration_context(&self, log_d: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = self.dur_ctx.forward(&log_d.unsqueeze(2)?)?;
        replace_masked(&x, mask, &self.mask_emb)
    }

    /// Log-domain durations `[B, N]`.
    pub fn predict_log_duration(&self, e_y: &Tensor, context: &Tensor, valid: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        self.dp.forward(&(e_y + context)?, &valid.unsqueeze(2)?, ctx)
    }

    pub fn pitch_context(&self, bins: &Tensor, mask: &Tensor) -> Result<Tensor> {
        replace_masked(&self.pitch_ctx.forward(bins)?, mask, &self.mask_emb)
    }

    /// Normalized pitch `[B, T]`.
    pub fn predict_pitch_frames(&self, e_t: &Tensor, context: &Tensor, valid: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        self.pp.forward(&(e_t + context)?, &valid.unsqueeze(2)?, ctx)
    }

    /// Adds the pitch embedding of `bins [B, T]` to `e_t`.
    pub fn add_pitch(&self, e_t: &Tensor, bins: &Tensor) -> Result<Tensor> {
        Ok((e_t + self.pitch_cond.forward(bins)?)?)
    }

    /// Frame-wise mel encoding `[B, T, D]`.
    fn encode_mel(&self, mel: &Tensor) -> Result<Tensor> {
        self.mel_enc_out.forward(&self.mel_enc_in.forward(mel)?.relu()?)
    }

    /// Utterance embedding from the mean encoding of unmasked valid frames.
    pub fn speaker_embedding(&self, mel: &Tensor, mask: &Tensor, valid: &Tensor) -> Result<Tensor> {
        let keep = (valid * (1.0 - mask)?)?;
        let enc = self.encode_mel(&mel.broadcast_mul(&keep.unsqueeze(2)?)?)?;
        let sum = enc.broadcast_mul(&keep.unsqueeze(2)?)?.sum(1)?;
        let count = keep.sum_keepdim(1)?.clamp(1.0, f64::INFINITY)?;
        self.spk_proj.forward(&sum.broadcast_div(&count)?)
    }

    /// Masked mel embedding with an explicit speaker vector.
    pub fn condition_with_speaker(&self, speaker: &Tensor, mel: &Tensor, mask: &Tensor, valid: &Tensor) -> Result<Condition> {
        let (b, t, m) = mel.dims3()?;
        if mask.dims() != [b, t] || valid.dims() != [b, t] {
            return Err(Error::Shape(format!(
                "mask {:?} / valid {:?} do not match mel [{b}, {t}, {m}]",
                mask.dims(),
                valid.dims()
            )));
        }
        if speaker.dims() != [b, self.cfg.speaker_dim] {
            return Err(Error::Shape(format!("speaker embedding {:?}", speaker.dims())));
        }
        let keep = (1.0 - mask)?.unsqueeze(2)?;
        let enc = self.encode_mel(&mel.broadcast_mul(&keep)?)?;
        let enc = replace_masked(&enc, mask, &self.mask_emb)?.broadcast_mul(&valid.unsqueeze(2)?)?;
        Ok(Condition {
            speaker: speaker.clone(),
            mel: enc,
        })
    }

    /// `mel [B, T, n_mels]` normalized; `mask [B, T]` marks frames to hide.
    pub fn condition(&self, mel: &Tensor, mask: &Tensor, valid: &Tensor) -> Result<Condition> {
        let spk = self.speaker_embedding(mel, mask, valid)?;
        self.condition_with_speaker(&spk, mel, mask, valid)
    }

    fn denoiser_input(&self, x_t: &Tensor, cond: &Condition, e_t: &Tensor, steps: &[usize]) -> Result<(Tensor, Tensor)> {
        let (b, t, m) = x_t.dims3()?;
        if m != self.cfg.n_mels || cond.mel.dims3()?.1 != t || e_t.dims3()?.1 != t || steps.len() != b {
            return Err(Error::Shape(format!(
                "denoiser inputs disagree: x_t {:?}, condition {:?}, e_t {:?}, {} steps",
                x_t.dims(),
                cond.mel.dims(),
                e_t.dims(),
                steps.len()
            )));
        }
        let c = self.cfg.denoiser.hidden;
        let pos = sinusoid_positions(t, c, self.device())?;
        let h = (self.in_x.forward(x_t)? + self.in_mel.forward(&cond.mel)?)?;
        let h = (h + self.in_e.forward(e_t)?)?.broadcast_add(&pos)?;
        let tv: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
        let temb = sinusoid_embed(&tv, self.cfg.denoiser.step_embed, self.device())?;
        let temb = self.step_fc2.forward(&self.step_fc1.forward(&temb)?.silu()?)?;
        let cvec = (temb + self.spk_in.forward(&cond.speaker)?)?.silu()?;
        Ok((h, cvec))
    }

    /// Predicts clean normalized mel `[B, T, n_mels]` from `x_t`.
    pub fn denoise(
        &self,
        x_t: &Tensor,
        cond: &Condition,
        e_t: &Tensor,
        steps: &[usize],
        valid: &Tensor,
        ctx: &mut Ctx,
    ) -> Result<Tensor> {
        let (mut h, cvec) = self.denoiser_input(x_t, cond, e_t, steps)?;
        let valid3 = valid.unsqueeze(2)?;
        let bias = key_bias(valid)?;
        h = h.broadcast_mul(&valid3)?;
        for blk in &self.dit {
            h = blk.forward(&h, &cvec, &valid3, &bias, ctx)?;
        }
        Ok(self.final_layer.forward(&h, &cvec)?.broadcast_mul(&valid3)?)
    }

    /// The denoiser with every block removed: input projections straight
    /// into the output head.
    #[cfg(test)]
    pub(crate) fn denoise_skip_path(&self, x_t: &Tensor, cond: &Condition, e_t: &Tensor, steps: &[usize]) -> Result<Tensor> {
        let (h, cvec) = self.denoiser_input(x_t, cond, e_t, steps)?;
        self.final_layer.forward(&h, &cvec)
    }

    /// Per-frame phoneme logits `[B, T, vocab]`.
    pub fn classify(&self, mel: &Tensor, valid: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let (_, t, _) = mel.dims3()?;
        let hc = self.cfg.classifier.hidden;
        let pos = sinusoid_positions(t, hc, self.device())?;
        let valid3 = valid.unsqueeze(2)?;
        let bias = key_bias(valid)?;
        let mut x = self.cls_in.forward(mel)?.broadcast_add(&pos)?.broadcast_mul(&valid3)?;
        for b in &self.cls_blocks {
            x = b.forward(&x, &valid3, &bias, ctx)?;
        }
        self.cls_out.forward(&x)
    }

    // ---- single-utterance API -----------------------------------------------

    pub fn encode_phonemes(&self, y: &PhonemeSequence) -> Result<PhonemeEmbedding> {
        let n = y.len();
        let ids = Tensor::from_vec(y.ids().to_vec(), (1, n), self.device())?;
        let valid = Tensor::ones((1, n), DType::F32, self.device())?;
        Ok(PhonemeEmbedding(self.encode(&ids, &valid, &mut Ctx::eval())?))
    }

    /// Builds predictor contexts for one utterance. Durations and pitch at
    /// masked positions are ignored.
    pub fn masked_context(
        &self,
        durations: &DurationSequence,
        pitch: &[f32],
        mask_p: &[bool],
    ) -> Result<MaskedContext> {
        let n = durations.len();
        if mask_p.len() != n {
            return Err(Error::Shape(format!("{} mask entries for {n} phonemes", mask_p.len())));
        }
        let mask_f = durations.expand(mask_p);
        let t = mask_f.len();
        if pitch.len() != t {
            return Err(Error::Shape(format!("{} pitch frames for {t} frames", pitch.len())));
        }
        let dev = self.device();
        let log_d: Vec<f32> = durations.0.iter().map(|&d| (d as f32).ln_1p()).collect();
        let log_d = Tensor::from_vec(log_d, (1, n), dev)?;
        let dur = self.duration_context(&log_d, &mask_tensor(&[mask_p.to_vec()], n, dev)?)?;
        let bins = pitch_bins(pitch, self.cfg.pitch_norm, self.cfg.pitch_bins);
        let bins = Tensor::from_vec(bins, (1, t), dev)?;
        let pitch = self.pitch_context(&bins, &mask_tensor(&[mask_f.clone()], t, dev)?)?;
        Ok(MaskedContext {
            duration: dur,
            pitch,
            mask_p: mask_p.to_vec(),
            mask_f,
        })
    }

    /// Log-domain durations `log(1 + frames)` for every phoneme.
    pub fn predict_duration(&self, e_y: &PhonemeEmbedding, ctx: &MaskedContext) -> Result<Vec<f32>> {
        if ctx.duration.dims() != e_y.0.dims() {
            return Err(Error::Shape(format!(
                "duration context {:?} vs phoneme embedding {:?}",
                ctx.duration.dims(),
                e_y.0.dims()
            )));
        }
        let valid = Tensor::ones((1, e_y.len()), DType::F32, self.device())?;
        let out = self.predict_log_duration(&e_y.0, &ctx.duration, &valid, &mut Ctx::eval())?;
        Ok(out.flatten_all()?.to_vec1()?)
    }

    pub fn predict_pitch(&self, e_t: &AlignedHidden, ctx: &MaskedContext) -> Result<Vec<f32>> {
        if ctx.pitch.dims() != e_t.0.dims() {
            return Err(Error::Shape(format!(
                "pitch context {:?} vs aligned hidden {:?}",
                ctx.pitch.dims(),
                e_t.0.dims()
            )));
        }
        let valid = Tensor::ones((1, e_t.frames()), DType::F32, self.device())?;
        let out = self.predict_pitch_frames(&e_t.0, &ctx.pitch, &valid, &mut Ctx::eval())?;
        Ok(out.flatten_all()?.to_vec1()?)
    }

    /// `mel [1, T, n_mels]`, `mask_f` over `T`.
    pub fn build_condition(&self, speaker: &Tensor, mel: &Tensor, mask_f: &[bool]) -> Result<Condition> {
        let (b, t, _) = mel.dims3()?;
        if mask_f.len() != t {
            return Err(Error::Shape(format!("{} mask entries for {t} frames", mask_f.len())));
        }
        let mask = mask_tensor(&vec![mask_f.to_vec(); b], t, self.device())?;
        let valid = Tensor::ones((b, t), DType::F32, self.device())?;
        self.condition_with_speaker(speaker, mel, &mask, &valid)
    }

    /// Condition for `mel [B, T, n_mels]` with the speaker vector taken from
    /// the frames outside `mask_f`.
    pub fn condition_from_mask(&self, mel: &Tensor, mask_f: &[bool]) -> Result<Condition> {
        let (b, t, _) = mel.dims3()?;
        if mask_f.len() != t {
            return Err(Error::Shape(format!("{} mask entries for {t} frames", mask_f.len())));
        }
        let mask = mask_tensor(&vec![mask_f.to_vec(); b], t, self.device())?;
        let valid = Tensor::ones((b, t), DType::F32, self.device())?;
        self.condition(mel, &mask, &valid)
    }

    /// Eval-mode single-step denoising, `t` in `[1, steps]` is checked by the caller's schedule.
    pub fn denoise_one(&self, x_t: &Tensor, cond: &Condition, e_t: &AlignedHidden, t: usize) -> Result<Tensor> {
        let (b, frames, _) = x_t.dims3()?;
        let valid = Tensor::ones((b, frames), DType::F32, self.device())?;
        self.denoise(x_t, cond, &e_t.0, &vec![t; b], &valid, &mut Ctx::eval())
    }

    /// Logits `[1, T, vocab]` for a normalized mel `[1, T, n_mels]`.
    pub fn classify_phonemes(&self, mel: &Tensor) -> Result<Tensor> {
        let (b, t, m) = mel.dims3()?;
        if m != self.cfg.n_mels {
            return Err(Error::Shape(format!("classifier expects {} bands, got {m}", self.cfg.n_mels)));
        }
        let valid = Tensor::ones((b, t), DType::F32, self.device())?;
        self.classify(mel, &valid, &mut Ctx::eval())
    }
}

/// Largest value along the last axis, as class indices.
pub fn argmax_last(logits: &Tensor) -> Result<Vec<u32>> {
    Ok(logits.argmax(D::Minus1)?.flatten_all()?.to_vec1::<u32>()?)
}
