//! Training and adaptation objectives.
//!
//! Every function works on candle tensors of any float dtype so the same
//! code path is exercised by f32 training and f64 gradient checks. Masks are
//! 0/1 tensors in the operand dtype; an all-zero mask is an error.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::log_softmax_last;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_dur: f64,
    pub lambda_pitch: f64,
    pub lambda_diff: f64,
    pub lambda_ssim: f64,
    pub lambda_ce: f64,
    pub lambda_p: f64,
    pub lambda_m: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dur: 1.0,
            lambda_pitch: 1.0,
            lambda_diff: 0.5,
            lambda_ssim: 0.5,
            lambda_ce: 1.0,
            lambda_p: 1.0,
            lambda_m: 1.0,
            lambda_s: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_dur,
            self.lambda_pitch,
            self.lambda_diff,
            self.lambda_ssim,
            self.lambda_ce,
            self.lambda_p,
            self.lambda_m,
            self.lambda_s,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// Named term values with their weights; `total` is the weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn new(terms: Vec<LossTerm>) -> Self {
        let total = terms.iter().map(|t| t.weight * t.value).sum();
        Self { terms, total }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// Fails on the first non-finite term, naming it.
    pub fn check_finite(&self) -> Result<()> {
        match self.terms.iter().find(|t| !t.value.is_finite()) {
            Some(t) => Err(Error::NonFinite(format!("loss term `{}`", t.name))),
            None if !self.total.is_finite() => Err(Error::NonFinite("loss total".into())),
            None => Ok(()),
        }
    }
}

/// A weighted sum kept both as a differentiable tensor and as a report.
pub struct Objective {
    pub total: Tensor,
    pub report: LossReport,
}

fn combine(parts: Vec<(&str, f64, Tensor)>) -> Result<Objective> {
    let mut total: Option<Tensor> = None;
    let mut terms = Vec::with_capacity(parts.len());
    for (name, weight, t) in parts {
        let value = scalar(&t)?;
        terms.push(LossTerm {
            name: name.to_string(),
            value,
            weight,
        });
        let wt = (t * weight)?;
        total = Some(match total {
            Some(acc) => (acc + wt)?,
            None => wt,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("objective has no terms".into()))?;
    Ok(Objective {
        total,
        report: LossReport::new(terms),
    })
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.sum_all()?.to_scalar::<f64>()?)
}

/// 0/1 mask tensor in the given dtype.
pub fn mask_from(rows: &[Vec<bool>], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Shape("mask rows differ in length".into()));
    }
    let t = crate::nn::mask_tensor(rows, width, device)?;
    Ok(t.to_dtype(dtype)?)
}

fn mask_count(mask: &Tensor, what: &'static str) -> Result<f64> {
    let n = scalar(mask)?;
    if n <= 0.0 {
        return Err(Error::EmptyMask(what));
    }
    Ok(n)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared error over positions where `mask` is 1.
pub fn masked_l2(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "masked_l2 operands")?;
    same_shape(pred, mask, "masked_l2 mask")?;
    let n = mask_count(mask, "masked_l2")?;
    Ok(((pred - target)?.sqr()?.mul(mask)?.sum_all()? / n)?)
}

/// Mean absolute error over masked frames and all bands of `[B, T, C]` mels.
pub fn l1_mel(pred: &Tensor, target: &Tensor, mask_f: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "l1_mel operands")?;
    let (b, t, c) = pred.dims3()?;
    if mask_f.dims() != [b, t] {
        return Err(Error::Shape(format!("l1_mel mask {:?} for [{b}, {t}, _]", mask_f.dims())));
    }
    let n = mask_count(mask_f, "l1_mel")? * c as f64;
    let m = mask_f.unsqueeze(2)?;
    Ok(((pred - target)?.abs()?.broadcast_mul(&m)?.sum_all()? / n)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    /// Dynamic range of the inputs; normalized mels span [-1, 1].
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            dynamic_range: 2.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (0.01 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (0.03 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-D gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }

    /// `[n - window + 1, n]` matrix applying the taps in valid mode.
    fn band_matrix(&self, n: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let taps = self.taps();
        let rows = n + 1 - self.window;
        let mut m = vec![0f64; rows * n];
        for r in 0..rows {
            for (k, &g) in taps.iter().enumerate() {
                m[r * n + r + k] = g;
            }
        }
        Ok(Tensor::from_vec(m, (rows, n), device)?.to_dtype(dtype)?)
    }

    /// Mean SSIM of two `[H, W]` images over all valid window positions.
    pub fn mean_ssim(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        same_shape(x, y, "ssim operands")?;
        let (h, w) = x.dims2()?;
        let narrow = h.min(w);
        if narrow < self.window {
            return Err(Error::RegionTooSmall {
                width: narrow,
                window: self.window,
            });
        }
        let gh = self.band_matrix(h, x.dtype(), x.device())?;
        let gw = self.band_matrix(w, x.dtype(), x.device())?.t()?;
        let blur = |z: &Tensor| -> Result<Tensor> { Ok(gh.matmul(z)?.matmul(&gw)?) };
        let mu_x = blur(x)?;
        let mu_y = blur(y)?;
        let sxx = (blur(&x.sqr()?)? - mu_x.sqr()?)?;
        let syy = (blur(&y.sqr()?)? - mu_y.sqr()?)?;
        let sxy = (blur(&(x * y)?)? - (&mu_x * &mu_y)?)?;
        let num = ((((&mu_x * &mu_y)? * 2.0)? + self.c1())? * ((sxy * 2.0)? + self.c2())?)?;
        let den = (((mu_x.sqr()? + mu_y.sqr()?)? + self.c1())? * ((sxx + syy)? + self.c2())?)?;
        Ok((num / den)?.mean_all()?)
    }
}

/// `1 - SSIM` over the masked frames of `[B, T, C]` mels.
///
/// Masked frames of each row are gathered into a contiguous image before
/// windowing, so unmasked frames never enter a window. Rows with no masked
/// frames are skipped; the result is the mean over remaining rows.
pub fn ssim_loss(pred: &Tensor, target: &Tensor, mask_f: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    same_shape(pred, target, "ssim_loss operands")?;
    let (b, t, _) = pred.dims3()?;
    if mask_f.dims() != [b, t] {
        return Err(Error::Shape(format!("ssim_loss mask {:?} for [{b}, {t}, _]", mask_f.dims())));
    }
    let rows = mask_f.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    let mut total: Option<Tensor> = None;
    let mut used = 0usize;
    for (i, row) in rows.iter().enumerate() {
        let idx: Vec<u32> = row
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.5)
            .map(|(k, _)| k as u32)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let idx_t = Tensor::from_vec(idx.clone(), idx.len(), pred.device())?;
        let x = pred.get(i)?.index_select(&idx_t, 0)?;
        let y = target.get(i)?.index_select(&idx_t, 0)?;
        let s = cfg.mean_ssim(&x, &y)?;
        total = Some(match total {
            Some(acc) => (acc + s)?,
            None => s,
        });
        used += 1;
    }
    let sum = total.ok_or(Error::EmptyMask("ssim_loss"))?;
    Ok((1.0 - (sum / used as f64)?)?)
}

/// Mean negative log-likelihood of `labels` over masked frames.
///
/// `logits [B, T, V]`, `labels [B, T]` as u32, `mask [B, T]`.
pub fn framewise_ce(logits: &Tensor, labels: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, t, v) = logits.dims3()?;
    if labels.dims() != [b, t] || mask.dims() != [b, t] {
        return Err(Error::Shape(format!(
            "framewise_ce labels {:?} / mask {:?} for logits {:?}",
            labels.dims(),
            mask.dims(),
            logits.dims()
        )));
    }
    let n = mask_count(mask, "framewise_ce")?;
    let lab = labels.to_dtype(DType::U32)?;
    if let Some(bad) = lab.flatten_all()?.to_vec1::<u32>()?.into_iter().find(|&l| l as usize >= v) {
        return Err(Error::Invalid(format!("label {bad} outside inventory of {v}")));
    }
    let logp = log_softmax_last(logits)?;
    let picked = logp.gather(&lab.unsqueeze(2)?.contiguous()?, D::Minus1)?.squeeze(D::Minus1)?;
    Ok((picked.mul(mask)?.sum_all()?.neg()? / n)?)
}

/// Values of the four train-time terms.
pub struct TrainTerms {
    pub dur: Tensor,
    pub pitch: Tensor,
    pub diff: Tensor,
    pub ssim: Tensor,
}

pub fn train_loss(terms: TrainTerms, w: &LossWeights) -> Result<Objective> {
    combine(vec![
        ("dur", w.lambda_dur, terms.dur),
        ("pitch", w.lambda_pitch, terms.pitch),
        ("diff", w.lambda_diff, terms.diff),
        ("ssim", w.lambda_ssim, terms.ssim),
    ])
}

/// Error domain of the phoneme-level adaptation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationDomain {
    /// Compare `log(1 + frames)`.
    #[default]
    Log,
    /// Compare frame counts.
    Linear,
}

/// Inputs to the duration-predictor adaptation objective.
pub struct DpTarget<'a> {
    /// Known frame count per phoneme; entries inside the edit are ignored.
    pub durations: &'a [u32],
    /// Edit-region phonemes.
    pub edit: &'a [bool],
    /// Target edit length in frames.
    pub target_frames: f64,
    pub domain: DurationDomain,
}

impl DpTarget<'_> {
    /// Unedited frames plus the target edit length.
    pub fn sentence_frames(&self) -> f64 {
        let kept: u64 = self
            .durations
            .iter()
            .zip(self.edit)
            .filter(|(_, &e)| !e)
            .map(|(&d, _)| d as u64)
            .sum();
        kept as f64 + self.target_frames
    }
}

/// Phoneme-, mask- and sentence-level duration objective.
///
/// `pred_log [B, N]` are log-domain predictions for `B` masked variants;
/// `mask_p [B, N]` marks the adaptation-masked phonemes outside the edit.
pub fn ttt_dp_loss(pred_log: &Tensor, mask_p: &Tensor, target: &DpTarget<'_>, w: &LossWeights) -> Result<Objective> {
    let (b, n) = pred_log.dims2()?;
    if target.durations.len() != n || target.edit.len() != n || mask_p.dims() != [b, n] {
        return Err(Error::Shape(format!(
            "duration objective: predictions [{b}, {n}], {} durations, {} edit flags, mask {:?}",
            target.durations.len(),
            target.edit.len(),
            mask_p.dims()
        )));
    }
    if !(target.target_frames > 0.0) {
        return Err(Error::Invalid(format!("target edit length {} must be positive", target.target_frames)));
    }
    if !target.edit.iter().any(|&e| e) {
        return Err(Error::EmptyMask("edit region"));
    }
    let (dtype, dev) = (pred_log.dtype(), pred_log.device());
    let edit = mask_from(&vec![target.edit.to_vec(); b], dtype, dev)?;
    let overlap = scalar(&mask_p.mul(&edit)?)?;
    if overlap > 0.0 {
        return Err(Error::MaskOverlap(overlap as usize));
    }

    let frames = (pred_log.exp()? - 1.0)?;
    let row = |d: &[u32]| -> Result<Tensor> {
        let v: Vec<f64> = d.iter().map(|&x| x as f64).collect();
        Ok(Tensor::from_vec(v, (1, n), dev)?.to_dtype(dtype)?.broadcast_as((b, n))?.contiguous()?)
    };
    let target_frames = row(target.durations)?;
    let phone = match target.domain {
        DurationDomain::Log => masked_l2(pred_log, &(target_frames + 1.0)?.log()?, mask_p)?,
        DurationDomain::Linear => masked_l2(&frames, &target_frames, mask_p)?,
    };
    let edit_sum = frames.mul(&edit)?.sum(1)?;
    let mask_level = (edit_sum - target.target_frames)?.sqr()?.mean_all()?;
    let sentence = (frames.sum(1)? - target.sentence_frames())?.sqr()?.mean_all()?;
    combine(vec![
        ("dur_phoneme", w.lambda_p, phone),
        ("dur_mask", w.lambda_m, mask_level),
        ("dur_sentence", w.lambda_s, sentence),
    ])
}

/// Reconstruction on newly masked frames plus phoneme classification on
/// edit frames. The two masks must be disjoint.
#[allow(clippy::too_many_arguments)]
pub fn ttt_sd_loss(
    pred: &Tensor,
    target: &Tensor,
    mask_new: &Tensor,
    mask_edit: &Tensor,
    logits: &Tensor,
    labels: &Tensor,
    w: &LossWeights,
    ssim: &SsimConfig,
) -> Result<Objective> {
    same_shape(mask_new, mask_edit, "adaptation masks")?;
    let overlap = scalar(&mask_new.mul(mask_edit)?)?;
    if overlap > 0.0 {
        return Err(Error::MaskOverlap(overlap as usize));
    }
    combine(vec![
        ("diff", w.lambda_diff, l1_mel(pred, target, mask_new)?),
        ("ssim", w.lambda_ssim, ssim_loss(pred, target, mask_new, ssim)?),
        ("ce", w.lambda_ce, framewise_ce(logits, labels, mask_edit)?),
    ])
}

#[cfg(test)]
mod tests;
