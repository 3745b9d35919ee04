//! End-to-end editing: request to plan, plan to adapted model, samples
//! spliced back into the source mel.

use std::path::Path;
use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::Utterance;
use crate::error::{Error, Result};
use crate::features::{largest_remainder, normalize_pitch, DurationSequence, MelSpectrogram, StftConfig, LOG_FLOOR};
use crate::model::{length_regulate, pitch_bins, PhonemeSequence, SpeechEditModel};
use crate::text::{phoneme_id, word_spans, Lexicon};
use crate::training::Pretrained;
use crate::ttt::{
    apply_rate, edit_frame_sum, predict_with_context, sample_instance, ttt_duration_predictor, ttt_spectrogram_denoiser,
    DenoiserInstance, DpReport, DurationInstance, EditMask, RateFactor, SdReport, TttConfig,
};

/// Which part of the original utterance is replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditSpan {
    /// `[start, end)` over transcript words; `start == end` inserts.
    Words(usize, usize),
    /// `[start, end)` over aligned phonemes.
    Phonemes(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub utt_id: String,
    pub span: EditSpan,
    /// New text for the span. `None` keeps the original phonemes; an empty
    /// string deletes the span.
    pub text: Option<String>,
    pub rate: Option<f64>,
    /// Explicit `M`.
    pub target_frames: Option<usize>,
    /// Rescale predicted edit durations to sum exactly to `M`. Defaults to
    /// on when `target_frames` is given.
    pub project: Option<bool>,
}

impl EditRequest {
    pub fn new(utt_id: &str, span: EditSpan) -> Self {
        Self {
            utt_id: utt_id.to_string(),
            span,
            text: None,
            rate: None,
            target_frames: None,
            project: None,
        }
    }
}

/// Where the edit length comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetLength {
    Explicit(usize),
    /// Frames of the replaced phonemes; used when the phonemes are unchanged.
    Original(usize),
    /// Base duration predictor's sum over the new phonemes.
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub utt_id: String,
    /// Phoneme ids after the edit.
    pub phonemes: Vec<u32>,
    /// `[start, end)` of the new phonemes inside `phonemes`.
    pub span: (usize, usize),
    /// Frame counts for `phonemes`; entries inside `span` are placeholders.
    pub durations: Vec<u32>,
    /// `[start, end)` frames of the original mel that the edit replaces.
    pub original_frames: (usize, usize),
    pub target: TargetLength,
    pub rate: Option<RateFactor>,
    pub project: bool,
}

impl EditPlan {
    /// Frame ranges of the original mel that survive the edit, in order.
    pub fn unedited_ranges(&self, original_width: usize) -> Vec<(usize, usize)> {
        let (a, b) = self.original_frames;
        [(0, a), (b, original_width)].into_iter().filter(|(s, e)| e > s).collect()
    }
}

/// Builds the edit plan for one utterance.
///
/// A deletion replaces the span by one short pause so the edit region stays
/// non-empty.
pub fn plan_edit(utt: &Utterance, lexicon: Option<&Lexicon>, req: &EditRequest) -> Result<EditPlan> {
    let phones = utt.phonemes.ids();
    let n = phones.len();
    let (p0, p1) = match req.span {
        EditSpan::Phonemes(s, e) => {
            if s >= e || e > n {
                return Err(Error::Invalid(format!("phoneme span [{s}, {e}) invalid for {n} phonemes")));
            }
            (s, e)
        }
        EditSpan::Words(s, e) => {
            let words = utt
                .words
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("utterance `{}` has no transcript", utt.id)))?;
            let lex = lexicon.ok_or_else(|| Error::Invalid("word spans need a pronouncing lexicon".into()))?;
            if s > e || e > words.len() {
                return Err(Error::Invalid(format!("word span [{s}, {e}) invalid for {} words", words.len())));
            }
            let spans = word_spans(phones, words, lex)?;
            if s == e {
                let at = if s == words.len() { n } else { spans[s].0 };
                (at, at)
            } else {
                (spans[s].0, spans[e - 1].1)
            }
        }
    };
    let original: Vec<u32> = phones[p0..p1].to_vec();
    let replacement = match &req.text {
        None => original.clone(),
        Some(t) if crate::text::words(t).is_empty() => vec![phoneme_id("sp").expect("pause symbol")],
        Some(t) => lexicon
            .ok_or_else(|| Error::Invalid("replacement text needs a pronouncing lexicon".into()))?
            .phonemize(t)?,
    };
    if replacement.is_empty() {
        return Err(Error::Invalid("edit has no phonemes to generate".into()));
    }
    let deletion = matches!(&req.text, Some(t) if crate::text::words(t).is_empty());
    if deletion && p0 == 0 && p1 == n {
        return Err(Error::Invalid("deleting the whole utterance leaves nothing".into()));
    }
    let mut new_phones = phones[..p0].to_vec();
    new_phones.extend_from_slice(&replacement);
    new_phones.extend_from_slice(&phones[p1..]);
    PhonemeSequence::new(new_phones.clone())?;
    let span = (p0, p0 + replacement.len());
    if span.0 == 0 && span.1 == new_phones.len() {
        return Err(Error::Invalid("edit covers the whole utterance; no context remains".into()));
    }

    let d = &utt.durations.0;
    let frames_before: usize = d[..p0].iter().map(|&x| x as usize).sum();
    let frames_span: usize = d[p0..p1].iter().map(|&x| x as usize).sum();
    let mut durations = d[..p0].to_vec();
    durations.extend(std::iter::repeat_n(1, replacement.len()));
    durations.extend_from_slice(&d[p1..]);

    let target = match req.target_frames {
        Some(0) => return Err(Error::Invalid("target frames must be at least 1".into())),
        Some(m) => TargetLength::Explicit(m),
        None if replacement == original && frames_span > 0 => TargetLength::Original(frames_span),
        None => TargetLength::Predicted,
    };
    let rate = req.rate.map(RateFactor::new).transpose()?;
    Ok(EditPlan {
        utt_id: utt.id.clone(),
        phonemes: new_phones,
        span,
        durations,
        original_frames: (frames_before, frames_before + frames_span),
        target,
        rate,
        project: req.project.unwrap_or(req.target_frames.is_some()),
    })
}

/// Stage switches and seeds for one edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOptions {
    pub ttt: TttConfig,
    pub skip_dp: bool,
    pub skip_sd: bool,
    /// Sampling seed.
    pub seed: u64,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self {
            ttt: TttConfig::default(),
            skip_dp: false,
            skip_sd: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub utt_id: String,
    /// `M` after the rate factor.
    pub target_frames: usize,
    /// Unrounded predicted edit length right before rounding.
    pub predicted_frames: f64,
    pub realized_frames: usize,
    pub edit_durations: Vec<u32>,
    pub projected: bool,
    /// Frames `[start, end)` of the edit in the output mel.
    pub output_frames: (usize, usize),
    pub original_width: usize,
    pub output_width: usize,
    pub seed: u64,
    pub dp: Option<DpReport>,
    pub sd: Option<SdReport>,
    pub timings: Vec<StageTime>,
}

pub struct EditOutput {
    pub mel: MelSpectrogram,
    pub report: EditReport,
}

fn timed<T>(timings: &mut Vec<StageTime>, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage))?;
    timings.push(StageTime {
        stage: stage.to_string(),
        seconds: t0.elapsed().as_secs_f64(),
    });
    Ok(out)
}

fn frames_from_log(log_pred: &[f32]) -> Vec<f64> {
    log_pred.iter().map(|&p| ((p as f64).exp() - 1.0).max(0.0)).collect()
}

/// Edit-phoneme frame counts: rescaled to exactly `m` under projection,
/// otherwise rounded one by one (with at least one frame overall).
fn realize_durations(pred: &[f64], m: usize, project: bool) -> Vec<u32> {
    if project {
        let sum: f64 = pred.iter().sum();
        let scaled: Vec<f64> = if sum > 0.0 {
            pred.iter().map(|p| p * m as f64 / sum).collect()
        } else {
            vec![m as f64 / pred.len() as f64; pred.len()]
        };
        return largest_remainder(&scaled, m);
    }
    let mut d: Vec<u32> = pred.iter().map(|p| p.round() as u32).collect();
    if d.iter().all(|&x| x == 0) {
        let i = pred
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > pred[best] { i } else { best });
        d[i] = 1;
    }
    d
}

fn normalized_tensor(mel: &MelSpectrogram, pretrained: &Pretrained) -> Result<Vec<f32>> {
    Ok(mel.to_frame_major().into_iter().map(|v| pretrained.norm.normalize(v)).collect())
}

/// Runs both adaptation stages on a private copy of the model, samples the
/// edit region and splices it into the original mel.
pub fn run_edit(pretrained: &Pretrained, utt: &Utterance, plan: &EditPlan, opts: &EditOptions) -> Result<EditOutput> {
    let mut timings = Vec::new();
    let mut model: SpeechEditModel = timed(&mut timings, "load", || pretrained.fork())?;
    let n_mels = model.cfg.n_mels;
    if utt.mel.n_mels() != n_mels {
        return Err(Error::Shape(format!("mel has {} bands, model expects {n_mels}", utt.mel.n_mels())));
    }
    let mut ttt = opts.ttt.clone();
    ttt.weights = pretrained.config.loss.clone();
    ttt.ssim = pretrained.config.ssim.clone();

    let layout = |m: usize| EditMask::new(plan.span, &plan.durations, m);
    let m = timed(&mut timings, "target", || {
        let base = match plan.target {
            TargetLength::Explicit(m) | TargetLength::Original(m) => m,
            TargetLength::Predicted => {
                let edit = layout(1)?;
                let pred = predict_with_context(
                    &model,
                    &DurationInstance {
                        phonemes: &plan.phonemes,
                        durations: &plan.durations,
                        edit: &edit,
                    },
                )?;
                (edit_frame_sum(&pred, &edit).round() as usize).max(1)
            }
        };
        let edit = layout(base)?;
        Ok(match plan.rate {
            Some(r) => apply_rate(&edit, r).target_frames,
            None => base,
        })
    })?;
    let edit = layout(m)?;
    let dur_inst = DurationInstance {
        phonemes: &plan.phonemes,
        durations: &plan.durations,
        edit: &edit,
    };

    let dp = if opts.skip_dp {
        None
    } else {
        Some(timed(&mut timings, "ttt_duration", || ttt_duration_predictor(&mut model, &dur_inst, &ttt))?)
    };

    let (durations, predicted_frames) = timed(&mut timings, "duration", || {
        let pred = frames_from_log(&predict_with_context(&model, &dur_inst)?);
        let edit_pred = &pred[plan.span.0..plan.span.1];
        let d = realize_durations(edit_pred, m, plan.project);
        let mut all = plan.durations.clone();
        all[plan.span.0..plan.span.1].copy_from_slice(&d);
        Ok((all, edit_pred.iter().sum::<f64>()))
    })?;
    let edit_durations = durations[plan.span.0..plan.span.1].to_vec();
    let realized: usize = edit_durations.iter().map(|&x| x as usize).sum();
    let mut edit = edit;
    edit.relayout(&durations)?;
    let (e0, e1) = edit.frame_range();
    let total: usize = durations.iter().map(|&x| x as usize).sum();
    let (o0, o1) = plan.original_frames;

    // Source frames in the post-edit layout; edit frames are placeholders.
    let src = normalized_tensor(&utt.mel, pretrained)?;
    let mut mel = vec![0f32; total * n_mels];
    mel[..e0 * n_mels].copy_from_slice(&src[..o0 * n_mels]);
    mel[e1 * n_mels..].copy_from_slice(&src[o1 * n_mels..]);
    let src_pitch = normalize_pitch(&utt.pitch, model.cfg.pitch_norm);
    let mut pitch = vec![0f32; total];
    pitch[..e0].copy_from_slice(&src_pitch[..o0]);
    pitch[e1..].copy_from_slice(&src_pitch[o1..]);

    let bins = timed(&mut timings, "pitch", || {
        let seq = PhonemeSequence::new(plan.phonemes.clone())?;
        let e_y = model.encode_phonemes(&seq)?;
        let e_t = length_regulate(&e_y, &DurationSequence(durations.clone()))?;
        let ctx = model.masked_context(&DurationSequence(durations.clone()), &pitch, &edit.phone_mask(plan.phonemes.len()))?;
        let pred = model.predict_pitch(&e_t, &ctx)?;
        let mut p = pitch.clone();
        p[e0..e1].copy_from_slice(&pred[e0..e1]);
        Ok(pitch_bins(&p, model.cfg.pitch_norm, model.cfg.pitch_bins))
    })?;

    let mel_t = Tensor::from_vec(mel, (1, total, n_mels), model.device())?;
    let sd_inst = DenoiserInstance {
        phonemes: &plan.phonemes,
        durations: &durations,
        pitch_bins: &bins,
        mel: &mel_t,
        edit: &edit,
    };
    let sd = if opts.skip_sd {
        None
    } else {
        Some(timed(&mut timings, "ttt_denoiser", || {
            ttt_spectrogram_denoiser(&mut model, &sd_inst, &pretrained.schedule, &ttt)
        })?)
    };

    let generated = timed(&mut timings, "sample", || {
        let out = sample_instance(&model, &sd_inst, &pretrained.schedule, opts.seed)?;
        let region = out.narrow(1, e0, e1 - e0)?.flatten_all()?.to_vec1::<f32>()?;
        let values: Vec<f32> = region
            .into_iter()
            .map(|v| pretrained.norm.denormalize(v).max(LOG_FLOOR))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("generated mel".into()));
        }
        MelSpectrogram::from_frame_major(n_mels, e1 - e0, &values)
    })?;
    let out = timed(&mut timings, "splice", || splice(&utt.mel, &generated, plan, realized))?;
    Ok(EditOutput {
        report: EditReport {
            utt_id: utt.id.clone(),
            target_frames: m,
            predicted_frames,
            realized_frames: realized,
            edit_durations,
            projected: plan.project,
            output_frames: (e0, e1),
            original_width: utt.mel.frames(),
            output_width: out.frames(),
            seed: opts.seed,
            dp,
            sd,
            timings,
        },
        mel: out,
    })
}

/// Original frames outside the plan's span, bit for bit, around `generated`.
pub fn splice(original: &MelSpectrogram, generated: &MelSpectrogram, plan: &EditPlan, realized: usize) -> Result<MelSpectrogram> {
    let (a, b) = plan.original_frames;
    if generated.frames() != realized {
        return Err(Error::Shape(format!(
            "generated {} frames, edit realized {realized}",
            generated.frames()
        )));
    }
    if a > b || b > original.frames() {
        return Err(Error::Shape(format!(
            "edit frames [{a}, {b}) outside mel of {} frames",
            original.frames()
        )));
    }
    let mut parts = Vec::with_capacity(3);
    let prefix;
    let suffix;
    if a > 0 {
        prefix = original.slice_frames(0, a)?;
        parts.push(&prefix);
    }
    if realized > 0 {
        parts.push(generated);
    }
    if b < original.frames() {
        suffix = original.slice_frames(b, original.frames())?;
        parts.push(&suffix);
    }
    MelSpectrogram::concat(&parts)
}

pub const MEL_MAGIC: &[u8] = b"TTTSE-MEL-v1\n";

/// Magic, `n_mels` and frame count as little-endian u32, then `n_mels x
/// frames` little-endian f32 values, band-major.
pub fn mel_to_bytes(mel: &MelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(MEL_MAGIC.len() + 8 + 4 * mel.data().len());
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&(mel.n_mels() as u32).to_le_bytes());
    out.extend_from_slice(&(mel.frames() as u32).to_le_bytes());
    for v in mel.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn mel_from_bytes(bytes: &[u8]) -> Result<MelSpectrogram> {
    let rest = bytes
        .strip_prefix(MEL_MAGIC)
        .ok_or_else(|| Error::Invalid("missing TTTSE-MEL-v1 magic".into()))?;
    if rest.len() < 8 {
        return Err(Error::Invalid("truncated mel header".into()));
    }
    let n_mels = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(rest[4..8].try_into().unwrap()) as usize;
    let body = &rest[8..];
    if body.len() != 4 * n_mels * frames {
        return Err(Error::Invalid(format!(
            "mel body has {} bytes, expected {}",
            body.len(),
            4 * n_mels * frames
        )));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    MelSpectrogram::new(n_mels, frames, data)
}

pub fn write_mel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    std::fs::write(path, mel_to_bytes(mel)).map_err(|e| Error::io(path, e))
}

pub fn read_mel(path: &Path) -> Result<MelSpectrogram> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    mel_from_bytes(&bytes).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

/// Griffin-Lim waveform for a log-mel. `iters = 0` inverts with zero phase.
pub fn reconstruct_audio(mel: &MelSpectrogram, cfg: &StftConfig, iters: usize) -> Result<Vec<f32>> {
    cfg.validate()?;
    if mel.n_mels() != cfg.n_mels {
        return Err(Error::Shape(format!("mel has {} bands, config {}", mel.n_mels(), cfg.n_mels)));
    }
    let mags = crate::features::mel_to_magnitude(mel, cfg);
    Ok(crate::features::griffin_lim(&mags, cfg, iters)
        .into_iter()
        .map(|s| s as f32)
        .collect())
}
