use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stft::validate_waveform;
use super::{MelSpectrogram, StftConfig};
use crate::error::{Error, Result};

pub const PITCH_MIN_HZ: f64 = 60.0;
pub const PITCH_MAX_HZ: f64 = 500.0;
/// Minimum normalized autocorrelation peak for a frame to count as voiced.
pub const PITCH_VOICING_THRESHOLD: f64 = 0.3;
const SILENCE_RMS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct PitchContour {
    pub f0: Vec<f32>,
    pub voiced: Vec<bool>,
}

impl PitchContour {
    pub fn from_f0(f0: Vec<f32>) -> Result<Self> {
        if let Some(i) = f0.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(format!("f0 frame {i} is {}", f0[i])));
        }
        let voiced = f0.iter().map(|&v| v > 0.0).collect();
        Ok(Self { f0, voiced })
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn check_matches(&self, mel: &MelSpectrogram) -> Result<()> {
        if self.len() != mel.frames() {
            return Err(Error::Shape(format!(
                "pitch has {} frames, mel has {}",
                self.len(),
                mel.frames()
            )));
        }
        Ok(())
    }
}

/// How pitch targets are represented for the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitchNorm {
    /// `ln(f0)` on voiced frames, 0 elsewhere.
    #[default]
    LogF0,
    /// Raw Hz.
    Hz,
}

pub fn normalize_pitch(p: &PitchContour, norm: PitchNorm) -> Vec<f32> {
    p.f0
        .iter()
        .map(|&f| match (norm, f > 0.0) {
            (_, false) => 0.0,
            (PitchNorm::LogF0, true) => f.ln(),
            (PitchNorm::Hz, true) => f,
        })
        .collect()
}

/// Frame-synchronous F0 by normalized cross-correlation.
///
/// Frames share the mel frame centers, so the output has exactly as many
/// entries as [`super::compute_mel`] produces for the same waveform.
pub fn extract_pitch(waveform: &[f32], cfg: &StftConfig) -> Result<PitchContour> {
    validate_waveform(waveform, cfg)?;
    let sr = cfg.sample_rate as f64;
    let min_lag = (sr / PITCH_MAX_HZ).floor() as usize;
    let max_lag = (sr / PITCH_MIN_HZ).ceil() as usize;
    let frame_len = cfg.win.max(2 * max_lag + 64);
    let frames = cfg.frames_for(waveform.len());
    let x: Vec<f64> = waveform.iter().map(|&s| s as f64).collect();
    let half = frame_len as isize / 2;

    let mut f0 = vec![0f32; frames];
    let mut seg = vec![0.0; frame_len];
    for (t, out) in f0.iter_mut().enumerate() {
        let center = (t * cfg.hop) as isize;
        for (i, s) in seg.iter_mut().enumerate() {
            let j = center - half + i as isize;
            *s = if j >= 0 && (j as usize) < x.len() {
                x[j as usize]
            } else {
                0.0
            };
        }
        let mean = seg.iter().sum::<f64>() / frame_len as f64;
        seg.iter_mut().for_each(|s| *s -= mean);
        let rms = (seg.iter().map(|s| s * s).sum::<f64>() / frame_len as f64).sqrt();
        if rms < SILENCE_RMS {
            continue;
        }
        if let Some(hz) = frame_f0(&seg, sr, min_lag, max_lag) {
            *out = hz as f32;
        }
    }
    PitchContour::from_f0(f0)
}

fn nccf(seg: &[f64], lag: usize) -> f64 {
    let n = seg.len() - lag;
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (seg[i], seg[i + lag]);
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    let den = (xx * yy).sqrt();
    if den > 0.0 {
        xy / den
    } else {
        0.0
    }
}

fn frame_f0(seg: &[f64], sr: f64, min_lag: usize, max_lag: usize) -> Option<f64> {
    let lo = min_lag.saturating_sub(1).max(1);
    let hi = max_lag + 1;
    let r: Vec<f64> = (lo..=hi).map(|lag| nccf(seg, lag)).collect();
    let at = |lag: usize| r[lag - lo];
    let peaks: Vec<usize> = (min_lag.max(lo + 1)..=max_lag)
        .filter(|&l| at(l) >= at(l - 1) && at(l) >= at(l + 1))
        .collect();
    let best = peaks.iter().map(|&l| at(l)).fold(f64::NEG_INFINITY, f64::max);
    if !(best >= PITCH_VOICING_THRESHOLD) {
        return None;
    }
    // Shortest lag close to the best peak avoids octave-down errors.
    let lag = *peaks.iter().find(|&&l| at(l) >= 0.9 * best)?;
    let (a, b, c) = (at(lag - 1), at(lag), at(lag + 1));
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    Some(sr / (lag as f64 + shift))
}

/// Reads a precomputed pitch track: header `f0_hz`, one value per frame.
pub fn load_f0_override(path: &Path, expected_frames: usize) -> Result<PitchContour> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("f0_hz") => {}
        other => {
            return Err(Error::Invalid(format!(
                "{}: expected header `f0_hz`, found {other:?}",
                path.display()
            )))
        }
    }
    let f0 = lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim().parse::<f32>().map_err(|e| {
                Error::Invalid(format!("{} line {}: {e}", path.display(), i + 2))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if f0.len() != expected_frames {
        return Err(Error::Shape(format!(
            "{}: {} pitch frames, mel has {expected_frames}",
            path.display(),
            f0.len()
        )));
    }
    PitchContour::from_f0(f0)
}
