use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{MelSpectrogram, StftConfig, LOG_FLOOR};
use crate::error::{Error, Result};

/// Triangular mel filters on the Slaney mel scale with area normalization.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `weights[band][bin]` over `n_fft / 2 + 1` bins.
    pub weights: Vec<Vec<f64>>,
    /// Center frequency of every band in Hz.
    pub centers: Vec<f64>,
}

fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        mel * f_sp
    }
}

pub fn mel_filterbank(cfg: &StftConfig) -> MelFilterbank {
    let n_bins = cfg.n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
    let weights = (0..cfg.n_mels)
        .map(|m| {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            let norm = 2.0 / (right - left);
            (0..n_bins)
                .map(|k| {
                    let f = bin_hz(k);
                    let up = (f - left) / (center - left);
                    let down = (right - f) / (right - center);
                    up.min(down).max(0.0) * norm
                })
                .collect()
        })
        .collect();
    MelFilterbank {
        weights,
        centers: points[1..=cfg.n_mels].to_vec(),
    }
}

/// Periodic Hann window of `win` samples, zero-padded to `n_fft` and centered.
pub(crate) fn padded_window(cfg: &StftConfig) -> Vec<f64> {
    let mut w = vec![0.0; cfg.n_fft];
    let offset = (cfg.n_fft - cfg.win) / 2;
    for i in 0..cfg.win {
        w[offset + i] =
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.win as f64).cos();
    }
    w
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(x[i.min(n - 1)]);
    }
    out.extend_from_slice(x);
    for i in 0..pad {
        out.push(x[n.saturating_sub(2 + i)]);
    }
    out
}

pub(crate) struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub(crate) fn new(cfg: &StftConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            cfg: *cfg,
            window: padded_window(cfg),
            fwd: planner.plan_fft_forward(cfg.n_fft),
            inv: planner.plan_fft_inverse(cfg.n_fft),
        }
    }

    /// Center-padded STFT; returns `frames x (n_fft/2 + 1)` complex bins.
    pub(crate) fn forward(&self, signal: &[f64]) -> Vec<Vec<Complex64>> {
        let pad = self.cfg.n_fft / 2;
        let padded = reflect_pad(signal, pad);
        let frames = self.cfg.frames_for(signal.len());
        let n_bins = self.cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.cfg.n_fft];
        (0..frames)
            .map(|t| {
                let start = t * self.cfg.hop;
                for (i, slot) in buf.iter_mut().enumerate() {
                    let s = padded.get(start + i).copied().unwrap_or(0.0);
                    *slot = Complex64::new(s * self.window[i], 0.0);
                }
                self.fwd.process(&mut buf);
                buf[..n_bins].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse of [`Stft::forward`], trimmed to `len` samples.
    pub(crate) fn inverse(&self, spec: &[Vec<Complex64>], len: usize) -> Vec<f64> {
        let n = self.cfg.n_fft;
        let hop = self.cfg.hop;
        let pad = n / 2;
        let total = (spec.len().saturating_sub(1)) * hop + n;
        let mut out = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (t, frame) in spec.iter().enumerate() {
            for k in 0..n {
                buf[k] = if k < frame.len() {
                    frame[k]
                } else {
                    frame[n - k].conj()
                };
            }
            self.inv.process(&mut buf);
            let start = t * hop;
            for i in 0..n {
                let w = self.window[i];
                out[start + i] += buf[i].re / n as f64 * w;
                norm[start + i] += w * w;
            }
        }
        (0..len)
            .map(|i| {
                let j = i + pad;
                if j < total && norm[j] > 1e-10 {
                    out[j] / norm[j]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

pub(crate) fn validate_waveform(waveform: &[f32], cfg: &StftConfig) -> Result<()> {
    cfg.validate()?;
    if waveform.len() < cfg.win {
        return Err(Error::TooShort {
            len: waveform.len(),
            min: cfg.win,
        });
    }
    if let Some(i) = waveform.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("waveform sample {i}")));
    }
    Ok(())
}

/// Natural-log mel magnitudes, floored at [`LOG_FLOOR`].
pub fn compute_mel(waveform: &[f32], cfg: &StftConfig) -> Result<MelSpectrogram> {
    validate_waveform(waveform, cfg)?;
    let signal: Vec<f64> = waveform.iter().map(|&s| s as f64).collect();
    let spec = Stft::new(cfg).forward(&signal);
    let fb = mel_filterbank(cfg);
    let frames = spec.len();
    let floor = (LOG_FLOOR as f64).exp();
    let mut data = vec![0f32; cfg.n_mels * frames];
    for (t, bins) in spec.iter().enumerate() {
        let mag: Vec<f64> = bins.iter().map(|c| c.norm()).collect();
        for (b, w) in fb.weights.iter().enumerate() {
            let e: f64 = w.iter().zip(&mag).map(|(a, m)| a * m).sum();
            data[b * frames + t] = (e.max(floor).ln() as f32).max(LOG_FLOOR);
        }
    }
    MelSpectrogram::new(cfg.n_mels, frames, data)
}

/// Linear magnitudes `frames x (n_fft/2 + 1)` whose mel projection best
/// matches `exp(mel)`, by non-negative multiplicative updates.
pub fn mel_to_magnitude(mel: &MelSpectrogram, cfg: &StftConfig) -> Vec<Vec<f64>> {
    let fb = mel_filterbank(cfg);
    let n_bins = cfg.n_fft / 2 + 1;
    let taps: Vec<Vec<(usize, f64)>> = fb
        .weights
        .iter()
        .map(|w| w.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(k, &v)| (k, v)).collect())
        .collect();
    let floor = (LOG_FLOOR as f64).exp();
    (0..mel.frames())
        .map(|t| {
            let target: Vec<f64> = mel.frame(t).iter().map(|&v| (v as f64).exp()).collect();
            let mut back = vec![0.0; n_bins];
            for (band, tap) in taps.iter().enumerate() {
                for &(k, w) in tap {
                    back[k] += w * target[band];
                }
            }
            let mut s: Vec<f64> = back.iter().map(|&b| b.max(floor)).collect();
            let mut proj = vec![0.0; cfg.n_mels];
            let mut denom = vec![0.0; n_bins];
            for _ in 0..NNLS_ITERS {
                for (p, tap) in proj.iter_mut().zip(&taps) {
                    *p = tap.iter().map(|&(k, w)| w * s[k]).sum();
                }
                denom.fill(0.0);
                for (band, tap) in taps.iter().enumerate() {
                    for &(k, w) in tap {
                        denom[k] += w * proj[band];
                    }
                }
                for k in 0..n_bins {
                    if denom[k] > 0.0 {
                        s[k] *= back[k] / denom[k];
                    } else {
                        s[k] = 0.0;
                    }
                }
            }
            s
        })
        .collect()
}

const NNLS_ITERS: usize = 60;

/// Waveform for the magnitudes `mags` by Griffin-Lim phase recovery,
/// starting from zero phase.
pub fn griffin_lim(mags: &[Vec<f64>], cfg: &StftConfig, iters: usize) -> Vec<f64> {
    if mags.is_empty() {
        return Vec::new();
    }
    let stft = Stft::new(cfg);
    let len = (mags.len() - 1) * cfg.hop;
    let with_phase = |phase: &[Vec<Complex64>]| -> Vec<Vec<Complex64>> {
        mags.iter()
            .zip(phase)
            .map(|(m, p)| m.iter().zip(p).map(|(&a, &u)| u * a).collect())
            .collect()
    };
    let mut phase: Vec<Vec<Complex64>> = mags.iter().map(|m| vec![Complex64::new(1.0, 0.0); m.len()]).collect();
    let mut x = stft.inverse(&with_phase(&phase), len);
    for _ in 0..iters {
        let spec = stft.forward(&x);
        for (p, frame) in phase.iter_mut().zip(&spec) {
            for (u, c) in p.iter_mut().zip(frame) {
                let n = c.norm();
                *u = if n > 1e-12 { c / n } else { Complex64::new(1.0, 0.0) };
            }
        }
        x = stft.inverse(&with_phase(&phase), len);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stft_roundtrip_reconstructs_signal() {
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..4096)
            .map(|i| (i as f64 * 0.05).sin() + 0.3 * (i as f64 * 0.31).cos())
            .collect();
        let stft = Stft::new(&cfg);
        let y = stft.inverse(&stft.forward(&x), x.len());
        let err = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "max error {err}");
    }

    #[test]
    fn filterbank_centers_increase_within_range() {
        let cfg = StftConfig::default();
        let fb = mel_filterbank(&cfg);
        assert_eq!(fb.centers.len(), 80);
        assert!(fb.centers.windows(2).all(|w| w[0] < w[1]));
        assert!(fb.centers[0] > 0.0 && *fb.centers.last().unwrap() < 8000.0);
    }

    #[test]
    fn rejects_short_and_nonfinite_input() {
        let cfg = StftConfig::default();
        assert!(matches!(
            compute_mel(&[0.0; 100], &cfg),
            Err(Error::TooShort { len: 100, .. })
        ));
        let mut x = vec![0.0f32; 2048];
        x[7] = f32::NAN;
        assert!(matches!(compute_mel(&x, &cfg), Err(Error::NonFinite(_))));
    }
}
