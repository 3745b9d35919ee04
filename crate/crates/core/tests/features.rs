use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tttse_core::features::{
    compute_mel, durations_from_alignment, extract_pitch, AlignedPhone, PhonemeAlignment, StftConfig, LOG_FLOOR,
};

fn sine(hz: f64, seconds: f64, sr: u32) -> Vec<f32> {
    let n = (seconds * sr as f64) as usize;
    (0..n).map(|i| (2.0 * PI * hz * i as f64 / sr as f64).sin() as f32).collect()
}

fn slaney_mel(hz: f64) -> f64 {
    if hz < 1000.0 {
        3.0 * hz / 200.0
    } else {
        15.0 + 27.0 * (hz / 1000.0).ln() / 6.4f64.ln()
    }
}

fn slaney_hz(mel: f64) -> f64 {
    if mel < 15.0 {
        200.0 * mel / 3.0
    } else {
        1000.0 * (6.4f64.ln() * (mel - 15.0) / 27.0).exp()
    }
}

/// Band energies of one frame from a direct DFT and explicitly built triangles.
fn oracle_bands(frame: &[f64], cfg: &StftConfig) -> (Vec<f64>, Vec<f64>) {
    let n = cfg.n_fft;
    let windowed: Vec<f64> = frame
        .iter()
        .enumerate()
        .map(|(i, x)| x * (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()))
        .collect();
    let mag: Vec<f64> = (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, x) in windowed.iter().enumerate() {
                let a = -2.0 * PI * (k * i) as f64 / n as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect();
    let (lo, hi) = (slaney_mel(cfg.fmin), slaney_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| slaney_hz(lo + i as f64 * (hi - lo) / (cfg.n_mels + 1) as f64))
        .collect();
    let mut energy = vec![0.0; cfg.n_mels];
    for (b, e) in energy.iter_mut().enumerate() {
        let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
        for (k, m) in mag.iter().enumerate() {
            let f = k as f64 * cfg.sample_rate as f64 / n as f64;
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            *e += w * 2.0 / (r - l) * m;
        }
    }
    (energy, edges[1..=cfg.n_mels].to_vec())
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

#[test]
fn default_constants_are_accepted() {
    let cfg = StftConfig::default();
    assert_eq!(
        (cfg.n_fft, cfg.hop, cfg.win, cfg.n_mels, cfg.fmin, cfg.fmax, cfg.sample_rate),
        (1024, 256, 1024, 80, 0.0, 8000.0, 22050)
    );
    cfg.validate().unwrap();
}

#[test]
fn silence_sits_on_the_floor() {
    let cfg = StftConfig::default();
    let mel = compute_mel(&vec![0.0; cfg.sample_rate as usize], &cfg).unwrap();
    assert_eq!(mel.frames(), cfg.sample_rate as usize / cfg.hop + 1);
    assert!(mel.data().iter().all(|&v| v == LOG_FLOOR));
}

#[test]
fn sine_peaks_in_the_band_nearest_its_frequency() {
    let cfg = StftConfig::default();
    let x = sine(440.0, 1.0, cfg.sample_rate);
    let mel = compute_mel(&x, &cfg).unwrap();
    let half = cfg.n_fft / 2;
    let mut checked = 0;
    for t in 0..mel.frames() {
        let c = t * cfg.hop;
        if c < half || c + half > x.len() {
            continue;
        }
        let frame: Vec<f64> = x[c - half..c + half].iter().map(|&s| s as f64).collect();
        let (energy, centers) = oracle_bands(&frame, &cfg);
        let want = argmax(&energy);
        let nearest = argmax(&centers.iter().map(|c| -(c - 440.0).abs()).collect::<Vec<_>>());
        assert_eq!(want, nearest, "frame {t}");
        let got: Vec<f64> = mel.frame(t).iter().map(|&v| v as f64).collect();
        assert_eq!(argmax(&got), want, "frame {t}");
        for (g, e) in got.iter().zip(&energy) {
            assert!((g - e.max(1e-5).ln()).abs() < 1e-4, "frame {t}: {g} vs {}", e.ln());
        }
        checked += 1;
    }
    assert!(checked > 70);
}

#[test]
fn mel_is_deterministic_and_floored() {
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f32> = (0..20000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = compute_mel(&x, &cfg).unwrap();
    let b = compute_mel(&x, &cfg).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(a.data().iter().all(|&v| v >= LOG_FLOOR && v.is_finite()));
}

#[test]
fn pitch_of_a_220_hz_sine() {
    let cfg = StftConfig::default();
    let p = extract_pitch(&sine(220.0, 1.0, cfg.sample_rate), &cfg).unwrap();
    let mut voiced: Vec<f32> = p.f0.iter().copied().filter(|&f| f > 0.0).collect();
    assert!(voiced.len() > p.f0.len() / 2);
    voiced.sort_by(|a, b| a.total_cmp(b));
    let median = voiced[voiced.len() / 2];
    assert!((median - 220.0).abs() <= 3.0, "median {median}");
    assert!(p.f0.iter().zip(&p.voiced).all(|(&f, &v)| (f > 0.0) == v));
}

#[test]
fn silence_is_unvoiced() {
    let cfg = StftConfig::default();
    let p = extract_pitch(&vec![0.0; 22050], &cfg).unwrap();
    assert!(p.f0.iter().all(|&f| f == 0.0));
    assert!(p.voiced.iter().all(|&v| !v));
}

#[test]
fn white_noise_is_mostly_unvoiced() {
    let cfg = StftConfig::default();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..22050)
            .map(|_| 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) as f32)
            .collect();
        let p = extract_pitch(&x, &cfg).unwrap();
        let frac = p.voiced.iter().filter(|&&v| v).count() as f64 / p.voiced.len() as f64;
        assert!(frac < 0.2, "seed {seed}: voiced fraction {frac}");
    }
}

#[test]
fn random_alignments_tile_the_frames() {
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let samples = rng.random_range(22050..88200);
        let frames = cfg.frames_for(samples);
        let end = samples as f64 / cfg.sample_rate as f64;
        let mut cuts: Vec<f64> = (0..19).map(|_| rng.random_range(0.0..end)).collect();
        cuts.sort_by(|a, b| a.total_cmp(b));
        cuts.dedup();
        let mut bounds = vec![0.0];
        bounds.extend(cuts);
        bounds.push(end);
        let phones: Vec<AlignedPhone> = bounds
            .windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| AlignedPhone {
                id: rng.random_range(1..40),
                start: w[0],
                end: w[1],
            })
            .collect();
        let n = phones.len();
        let a = PhonemeAlignment::new(phones).unwrap();
        let d = durations_from_alignment(&a, &cfg, frames).unwrap();
        assert_eq!(d.len(), n);
        assert_eq!(d.total(), frames);
    }
}
