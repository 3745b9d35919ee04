//! Acoustic front end: log-mel spectrograms, frame-synchronous pitch,
//! alignment ingestion and per-phoneme frame durations.

mod alignment;
mod audio;
mod pitch;
mod stft;

pub use alignment::{
    durations_from_alignment, largest_remainder, load_alignment, parse_alignment, write_alignment, AlignedPhone,
    DurationSequence, PhonemeAlignment,
};
pub use audio::{read_wav, write_wav};
pub use pitch::{
    extract_pitch, load_f0_override, normalize_pitch, PitchContour, PitchNorm,
    PITCH_VOICING_THRESHOLD,
};
pub use stft::{compute_mel, griffin_lim, mel_filterbank, mel_to_magnitude, MelFilterbank};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Natural log of the magnitude floor applied before taking the log.
pub const LOG_FLOOR: f32 = -11.512_925; // ln(1e-5)

/// Framing and filterbank constants shared by every acoustic feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 256,
            win: 1024,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            sample_rate: 22050,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win || self.win > self.n_fft {
            return Err(Error::Config(format!(
                "need 0 < hop <= win <= n_fft, got hop={} win={} n_fft={}",
                self.hop, self.win, self.n_fft
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0)
        {
            return Err(Error::Config(format!(
                "need 0 <= fmin < fmax <= sample_rate/2, got {}..{} at {} Hz",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        Ok(())
    }

    /// Frame count under center-padded framing.
    pub fn frames_for(&self, samples: usize) -> usize {
        samples / self.hop + 1
    }

    pub fn frame_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }
}

/// Log-mel spectrogram stored band-major: `data[band * frames + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    n_mels: usize,
    frames: usize,
    data: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(n_mels: usize, frames: usize, data: Vec<f32>) -> Result<Self> {
        if n_mels == 0 || frames == 0 {
            return Err(Error::Shape(format!(
                "mel must be non-empty, got {n_mels}x{frames}"
            )));
        }
        if data.len() != n_mels * frames {
            return Err(Error::Shape(format!(
                "mel data has {} values, expected {n_mels}x{frames}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "mel band {} frame {}",
                i / frames,
                i % frames
            )));
        }
        Ok(Self {
            n_mels,
            frames,
            data,
        })
    }

    /// Builds from frame-major values (`values[t * n_mels + band]`).
    pub fn from_frame_major(n_mels: usize, frames: usize, values: &[f32]) -> Result<Self> {
        if values.len() != n_mels * frames {
            return Err(Error::Shape(format!(
                "frame-major buffer has {} values, expected {n_mels}x{frames}",
                values.len()
            )));
        }
        let mut data = vec![0f32; values.len()];
        for t in 0..frames {
            for b in 0..n_mels {
                data[b * frames + t] = values[t * n_mels + b];
            }
        }
        Self::new(n_mels, frames, data)
    }

    pub fn filled(n_mels: usize, frames: usize, value: f32) -> Result<Self> {
        Self::new(n_mels, frames, vec![value; n_mels * frames])
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, band: usize, t: usize) -> f32 {
        self.data[band * self.frames + t]
    }

    pub fn frame(&self, t: usize) -> Vec<f32> {
        (0..self.n_mels).map(|b| self.get(b, t)).collect()
    }

    pub fn to_frame_major(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.data.len());
        for t in 0..self.frames {
            out.extend((0..self.n_mels).map(|b| self.get(b, t)));
        }
        out
    }

    /// Frames `[start, end)` as a new spectrogram.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::Shape(format!(
                "frame range {start}..{end} invalid for {} frames",
                self.frames
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(self.n_mels * w);
        for b in 0..self.n_mels {
            let row = &self.data[b * self.frames..(b + 1) * self.frames];
            data.extend_from_slice(&row[start..end]);
        }
        Self::new(self.n_mels, w, data)
    }

    /// Concatenates along time. Empty parts are skipped.
    pub fn concat(parts: &[&MelSpectrogram]) -> Result<Self> {
        let n_mels = parts
            .first()
            .map(|p| p.n_mels)
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.n_mels != n_mels) {
            return Err(Error::Shape("band count differs between parts".into()));
        }
        let frames: usize = parts.iter().map(|p| p.frames).sum();
        let mut data = Vec::with_capacity(n_mels * frames);
        for b in 0..n_mels {
            for p in parts {
                data.extend_from_slice(&p.data[b * p.frames..(b + 1) * p.frames]);
            }
        }
        Self::new(n_mels, frames, data)
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}
