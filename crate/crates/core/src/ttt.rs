//! Instance-specific test-time training.
//!
//! Stage one adapts the duration predictor so the edit region's predicted
//! length matches the target `M`; stage two adapts the spectrogram denoiser
//! on the unedited context of the same utterance. Each stage updates a
//! single parameter group and verifies by hash that nothing else moved.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse_rows, gaussian, sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::features::DurationSequence;
use crate::losses::{
    mask_from, ttt_dp_loss, ttt_sd_loss, DpTarget, DurationDomain, LossReport, LossWeights, Objective, SsimConfig,
};
use crate::model::{groups, regulate_batch, SpeechEditModel};
use crate::nn::{f32_vec, mask_tensor, Ctx};
use crate::optim::{Adam, AdamConfig};
use crate::training::sample_phoneme_mask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TttConfig {
    pub steps: usize,
    pub lr_dp: f64,
    pub lr_sd: f64,
    /// Masked copies of the instance per update.
    pub variants: usize,
    /// Fraction of unedited phonemes masked in each copy.
    pub mask_ratio: f64,
    pub resample_per_step: bool,
    pub seed: u64,
    pub dur_domain: DurationDomain,
    #[serde(skip)]
    pub weights: LossWeights,
    #[serde(skip)]
    pub ssim: SsimConfig,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr_dp: 2e-4,
            lr_sd: 5e-5,
            variants: 32,
            mask_ratio: 0.8,
            resample_per_step: true,
            seed: 0,
            dur_domain: DurationDomain::Log,
            weights: LossWeights::default(),
            ssim: SsimConfig::default(),
        }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.variants == 0 {
            return Err(Error::Config("ttt.steps and ttt.variants must be at least 1".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("ttt.mask_ratio {} must lie in (0, 1)", self.mask_ratio)));
        }
        AdamConfig::with_lr(self.lr_dp).validate()?;
        AdamConfig::with_lr(self.lr_sd).validate()?;
        self.weights.validate()
    }
}

/// Edit region over a phoneme sequence and its target length in frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditMask {
    /// `[start, end)` phoneme indices.
    pub span: (usize, usize),
    /// Frames of the span phonemes under the current durations.
    pub mask_f: Vec<bool>,
    /// `M`.
    pub target_frames: usize,
}

impl EditMask {
    pub fn new(span: (usize, usize), durations: &[u32], target_frames: usize) -> Result<Self> {
        let (s, e) = span;
        if s >= e || e > durations.len() {
            return Err(Error::Invalid(format!(
                "edit span [{s}, {e}) invalid for {} phonemes",
                durations.len()
            )));
        }
        if target_frames == 0 {
            return Err(Error::Invalid("edit length M must be at least 1 frame".into()));
        }
        let mut m = Self {
            span,
            mask_f: Vec::new(),
            target_frames,
        };
        m.relayout(durations)?;
        Ok(m)
    }

    /// Recomputes `mask_f` for new durations of the same phonemes.
    pub fn relayout(&mut self, durations: &[u32]) -> Result<()> {
        if self.span.1 > durations.len() {
            return Err(Error::Shape(format!("{} durations for edit span {:?}", durations.len(), self.span)));
        }
        self.mask_f = DurationSequence(durations.to_vec()).expand(&self.phone_mask(durations.len()));
        Ok(())
    }

    pub fn phone_mask(&self, n: usize) -> Vec<bool> {
        (0..n).map(|i| i >= self.span.0 && i < self.span.1).collect()
    }

    pub fn phones(&self) -> usize {
        self.span.1 - self.span.0
    }

    /// `(first, end)` frame range of the edit under the current layout.
    pub fn frame_range(&self) -> (usize, usize) {
        let start = self.mask_f.iter().position(|&m| m).unwrap_or(0);
        let len = self.mask_f.iter().filter(|&&m| m).count();
        (start, start + len)
    }
}

/// Positive multiplier on the edit length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFactor(f64);

impl RateFactor {
    pub fn new(factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::Invalid(format!("rate factor {factor} must be positive")));
        }
        Ok(Self(factor))
    }

    pub fn factor(&self) -> f64 {
        self.0
    }
}

/// `M' = max(1, round(factor * M))`; the span is unchanged.
pub fn apply_rate(edit: &EditMask, r: RateFactor) -> EditMask {
    let m = ((r.0 * edit.target_frames as f64).round() as usize).max(1);
    EditMask {
        target_frames: m,
        ..edit.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TttStage {
    /// Phoneme-level masks for the duration context.
    Duration,
    /// Frame-level masks for the mel condition.
    Denoiser,
}

/// `cfg.variants` independent masks over the unedited phonemes.
///
/// Duration-stage masks are phoneme-level; denoiser-stage masks are the
/// frame expansion under `durations`. The edit region is never part of a
/// returned mask; callers mask it separately in every copy.
pub fn make_variants(
    durations: &[u32],
    edit: &EditMask,
    cfg: &TttConfig,
    stage: TttStage,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<bool>>> {
    let n = durations.len();
    let outside: Vec<usize> = (0..n).filter(|&i| i < edit.span.0 || i >= edit.span.1).collect();
    if outside.is_empty() {
        return Err(Error::Invalid("no unedited phonemes to mask for adaptation".into()));
    }
    let seq = DurationSequence(durations.to_vec());
    let min_frames = match stage {
        TttStage::Duration => 0,
        TttStage::Denoiser => cfg.ssim.window,
    };
    let unedited_frames: usize = outside.iter().map(|&i| durations[i] as usize).sum();
    if min_frames > 0 && unedited_frames < min_frames {
        return Err(Error::RegionTooSmall {
            width: unedited_frames,
            window: min_frames,
        });
    }
    let mut out = Vec::with_capacity(cfg.variants);
    while out.len() < cfg.variants {
        let mut mask = None;
        for _ in 0..1000 {
            let pick = sample_phoneme_mask(outside.len(), cfg.mask_ratio, rng);
            let mut m = vec![false; n];
            for (k, &i) in outside.iter().enumerate() {
                m[i] = pick[k];
            }
            let m = match stage {
                TttStage::Duration => m,
                TttStage::Denoiser => seq.expand(&m),
            };
            if m.iter().filter(|&&x| x).count() >= min_frames {
                mask = Some(m);
                break;
            }
        }
        out.push(mask.ok_or(Error::RegionTooSmall {
            width: unedited_frames,
            window: min_frames,
        })?);
    }
    Ok(out)
}

fn frozen_hashes(model: &SpeechEditModel, adapted: &str) -> Result<BTreeMap<String, String>> {
    let mut h = model.params.hashes()?;
    h.remove(adapted);
    Ok(h)
}

fn check_frozen(model: &SpeechEditModel, adapted: &str, before: &BTreeMap<String, String>) -> Result<()> {
    let after = frozen_hashes(model, adapted)?;
    for (g, h) in before {
        if after.get(g) != Some(h) {
            return Err(Error::FrozenDrift(g.clone()));
        }
    }
    Ok(())
}

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn union(a: &[Vec<bool>], b: &[bool]) -> Vec<Vec<bool>> {
    a.iter().map(|r| r.iter().zip(b).map(|(&x, &y)| x || y).collect()).collect()
}

fn repeat(t: &Tensor, b: usize) -> Result<Tensor> {
    let mut shape = t.dims().to_vec();
    shape[0] = b;
    Ok(t.broadcast_as(shape)?.contiguous()?)
}

/// Duration-stage inputs: the phoneme sequence after the edit, frame counts
/// for unedited phonemes (entries inside the span are ignored) and the edit.
#[derive(Debug, Clone, Copy)]
pub struct DurationInstance<'a> {
    pub phonemes: &'a [u32],
    pub durations: &'a [u32],
    pub edit: &'a EditMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpReport {
    pub steps: Vec<LossReport>,
    /// Predicted edit-region frames with full unedited context.
    pub edit_sum_before: f64,
    pub edit_sum_after: f64,
}

fn log_context(durations: &[u32], edit: &EditMask) -> Vec<f32> {
    durations
        .iter()
        .enumerate()
        .map(|(i, &d)| if i >= edit.span.0 && i < edit.span.1 { 0.0 } else { (d as f32).ln_1p() })
        .collect()
}

/// Log-domain durations of every phoneme with the edit region masked and
/// all other durations given.
pub fn predict_with_context(model: &SpeechEditModel, inst: &DurationInstance<'_>) -> Result<Vec<f32>> {
    let n = inst.phonemes.len();
    let dev = model.device();
    let ids = Tensor::from_vec(inst.phonemes.to_vec(), (1, n), dev)?;
    let valid = Tensor::ones((1, n), DType::F32, dev)?;
    let mut ctx = Ctx::eval();
    let e_y = model.encode(&ids, &valid, &mut ctx)?;
    let log_d = Tensor::from_vec(log_context(inst.durations, inst.edit), (1, n), dev)?;
    let mask = mask_tensor(&[inst.edit.phone_mask(n)], n, dev)?;
    let dur_ctx = model.duration_context(&log_d, &mask)?;
    f32_vec(&model.predict_log_duration(&e_y, &dur_ctx, &valid, &mut ctx)?)
}

/// Sum of `exp(pred) - 1` over the edit phonemes.
pub fn edit_frame_sum(log_pred: &[f32], edit: &EditMask) -> f64 {
    log_pred[edit.span.0..edit.span.1]
        .iter()
        .map(|&p| (p as f64).exp() - 1.0)
        .sum()
}

/// Adapts the duration predictor in place for `cfg.steps` updates.
pub fn ttt_duration_predictor(model: &mut SpeechEditModel, inst: &DurationInstance<'_>, cfg: &TttConfig) -> Result<DpReport> {
    cfg.validate()?;
    let n = inst.phonemes.len();
    if inst.durations.len() != n {
        return Err(Error::Shape(format!("{} durations for {n} phonemes", inst.durations.len())));
    }
    let before = frozen_hashes(model, groups::DURATION)?;
    let edit_sum_before = edit_frame_sum(&predict_with_context(model, inst)?, inst.edit);
    let dev = model.device().clone();
    let v = cfg.variants;
    let ids = Tensor::from_vec(inst.phonemes.to_vec(), (1, n), &dev)?;
    let valid1 = Tensor::ones((1, n), DType::F32, &dev)?;
    let mut ctx = Ctx::eval();
    let e_y = repeat(&model.encode(&ids, &valid1, &mut ctx)?.detach(), v)?;
    let valid = repeat(&valid1, v)?;
    let log_d = repeat(&Tensor::from_vec(log_context(inst.durations, inst.edit), (1, n), &dev)?, v)?;
    let edit_p = inst.edit.phone_mask(n);
    let target = DpTarget {
        durations: inst.durations,
        edit: &edit_p,
        target_frames: inst.edit.target_frames as f64,
        domain: cfg.dur_domain,
    };
    let mut opt = Adam::new(model.params.group_vars(&[groups::DURATION]), AdamConfig::with_lr(cfg.lr_dp))?;
    let mut rng = stage_rng(cfg.seed, 1);
    let mut masks = make_variants(inst.durations, inst.edit, cfg, TttStage::Duration, &mut rng)?;
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if step > 0 && cfg.resample_per_step {
            masks = make_variants(inst.durations, inst.edit, cfg, TttStage::Duration, &mut rng)?;
        }
        let ctx_mask = mask_tensor(&union(&masks, &edit_p), n, &dev)?;
        let dur_ctx = model.duration_context(&log_d, &ctx_mask)?;
        let pred = model.predict_log_duration(&e_y, &dur_ctx, &valid, &mut ctx)?;
        let mask_p = mask_from(&masks, DType::F32, &dev)?;
        let Objective { total, report } = ttt_dp_loss(&pred, &mask_p, &target, &cfg.weights)?;
        report.check_finite()?;
        opt.step(&total.backward()?)?;
        logs.push(report);
    }
    check_frozen(model, groups::DURATION, &before)?;
    let edit_sum_after = edit_frame_sum(&predict_with_context(model, inst)?, inst.edit);
    Ok(DpReport {
        steps: logs,
        edit_sum_before,
        edit_sum_after,
    })
}

/// Denoiser-stage inputs over the post-edit frame layout.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInstance<'a> {
    pub phonemes: &'a [u32],
    /// Frame counts of every phoneme, edit phonemes included.
    pub durations: &'a [u32],
    /// Pitch bin per frame.
    pub pitch_bins: &'a [u32],
    /// Normalized mel `[1, T, n_mels]`; edit frames are ignored.
    pub mel: &'a Tensor,
    /// `mask_f` must match `durations`.
    pub edit: &'a EditMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdReport {
    pub steps: Vec<LossReport>,
    /// Objective on a fixed set of masks, noise and steps never used for updates.
    pub held_out_before: LossReport,
    pub held_out_after: LossReport,
}

/// Pitch-conditioned frame-rate hidden sequence `[1, T, D]` of an instance.
pub fn aligned_hidden(model: &SpeechEditModel, phonemes: &[u32], durations: &[u32], pitch_bins: &[u32]) -> Result<Tensor> {
    let n = phonemes.len();
    let dev = model.device();
    let ids = Tensor::from_vec(phonemes.to_vec(), (1, n), dev)?;
    let valid = Tensor::ones((1, n), DType::F32, dev)?;
    let e_y = model.encode(&ids, &valid, &mut Ctx::eval())?;
    let (e_t, lens) = regulate_batch(&e_y, &[durations.to_vec()])?;
    if pitch_bins.len() != lens[0] {
        return Err(Error::Shape(format!("{} pitch bins for {} frames", pitch_bins.len(), lens[0])));
    }
    let bins = Tensor::from_vec(pitch_bins.to_vec(), (1, lens[0]), dev)?;
    model.add_pitch(&e_t, &bins)
}

/// Full-width reverse process with the edit frames hidden from the
/// condition. Returns the normalized mel `[1, T, n_mels]`.
pub fn sample_instance(model: &SpeechEditModel, inst: &DenoiserInstance<'_>, schedule: &DiffusionSchedule, seed: u64) -> Result<Tensor> {
    let e_t = aligned_hidden(model, inst.phonemes, inst.durations, inst.pitch_bins)?;
    let cond = model.condition_from_mask(inst.mel, &inst.edit.mask_f)?;
    let shape = inst.mel.dims().to_vec();
    let t_len = shape[1];
    let valid = Tensor::ones((1, t_len), DType::F32, model.device())?;
    sample(
        |x_t, t| model.denoise(x_t, &cond, &e_t, &[t], &valid, &mut Ctx::eval()),
        &shape,
        schedule,
        seed,
        model.device(),
    )
}

struct SdBatch {
    mask_new: Vec<Vec<bool>>,
    steps: Vec<usize>,
    noise: Tensor,
}

fn draw_sd_batch(
    inst: &DenoiserInstance<'_>,
    cfg: &TttConfig,
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<SdBatch> {
    let mask_new = make_variants(inst.durations, inst.edit, cfg, TttStage::Denoiser, rng)?;
    let steps = (0..cfg.variants).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let (_, t, c) = inst.mel.dims3()?;
    let noise = gaussian(&[cfg.variants, t, c], rng, inst.mel.device())?;
    Ok(SdBatch { mask_new, steps, noise })
}

struct SdFixed {
    mel: Tensor,
    x0: Tensor,
    e_t: Tensor,
    labels: Tensor,
    valid: Tensor,
    edit: Tensor,
}

fn sd_objective(model: &SpeechEditModel, f: &SdFixed, b: &SdBatch, inst: &DenoiserInstance<'_>, cfg: &TttConfig, schedule: &DiffusionSchedule) -> Result<Objective> {
    let t = inst.edit.mask_f.len();
    let dev = model.device();
    let cond_mask = mask_tensor(&union(&b.mask_new, &inst.edit.mask_f), t, dev)?;
    let cond = model.condition(&f.mel, &cond_mask, &f.valid)?;
    let cond = crate::model::Condition {
        speaker: cond.speaker.detach(),
        mel: cond.mel.detach(),
    };
    let x_t = forward_diffuse_rows(&f.x0, &b.steps, &b.noise, schedule)?;
    let mut ctx = Ctx::eval();
    let pred = model.denoise(&x_t, &cond, &f.e_t, &b.steps, &f.valid, &mut ctx)?;
    let logits = model.classify(&pred, &f.valid, &mut ctx)?;
    let mask_new = mask_tensor(&b.mask_new, t, dev)?;
    ttt_sd_loss(&pred, &f.mel, &mask_new, &f.edit, &logits, &f.labels, &cfg.weights, &cfg.ssim)
}

/// Adapts the denoiser in place for `cfg.steps` updates.
///
/// Edit frames have no ground truth, so they enter the noised input as an
/// initial sample from the current model; reconstruction is scored only on
/// newly masked unedited frames and the classifier term only on edit frames.
pub fn ttt_spectrogram_denoiser(
    model: &mut SpeechEditModel,
    inst: &DenoiserInstance<'_>,
    schedule: &DiffusionSchedule,
    cfg: &TttConfig,
) -> Result<SdReport> {
    cfg.validate()?;
    let (_, t, _) = inst.mel.dims3()?;
    if inst.edit.mask_f.len() != t || inst.pitch_bins.len() != t {
        return Err(Error::Shape(format!(
            "edit mask {} / pitch {} frames for mel of {t}",
            inst.edit.mask_f.len(),
            inst.pitch_bins.len()
        )));
    }
    let before = frozen_hashes(model, groups::DENOISER)?;
    let dev = model.device().clone();
    let v = cfg.variants;
    let pseudo = sample_instance(model, inst, schedule, cfg.seed)?;
    let edit1 = mask_tensor(&[inst.edit.mask_f.clone()], t, &dev)?.unsqueeze(2)?;
    let x0 = (inst.mel.broadcast_mul(&(1.0 - &edit1)?)? + pseudo.broadcast_mul(&edit1)?)?;
    let per_frame = DurationSequence(inst.durations.to_vec()).expand(inst.phonemes);
    let fixed = SdFixed {
        mel: repeat(inst.mel, v)?,
        x0: repeat(&x0, v)?,
        e_t: repeat(&aligned_hidden(model, inst.phonemes, inst.durations, inst.pitch_bins)?.detach(), v)?,
        labels: repeat(&Tensor::from_vec(per_frame, (1, t), &dev)?, v)?,
        valid: Tensor::ones((v, t), DType::F32, &dev)?,
        edit: mask_tensor(&vec![inst.edit.mask_f.clone(); v], t, &dev)?,
    };
    let held = draw_sd_batch(inst, cfg, schedule, &mut stage_rng(cfg.seed, 3))?;
    let held_out_before = sd_objective(model, &fixed, &held, inst, cfg, schedule)?.report;

    let mut opt = Adam::new(model.params.group_vars(&[groups::DENOISER]), AdamConfig::with_lr(cfg.lr_sd))?;
    let mut rng = stage_rng(cfg.seed, 2);
    let mut batch = draw_sd_batch(inst, cfg, schedule, &mut rng)?;
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if step > 0 && cfg.resample_per_step {
            batch = draw_sd_batch(inst, cfg, schedule, &mut rng)?;
        }
        let Objective { total, report } = sd_objective(model, &fixed, &batch, inst, cfg, schedule)?;
        report.check_finite()?;
        opt.step(&total.backward()?)?;
        logs.push(report);
    }
    check_frozen(model, groups::DENOISER, &before)?;
    let held_out_after = sd_objective(model, &fixed, &held, inst, cfg, schedule)?.report;
    Ok(SdReport {
        steps: logs,
        held_out_before,
        held_out_after,
    })
}
