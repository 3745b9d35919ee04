//! Synthetic speech-like corpus for desk-scale experiments.
//!
//! Each phoneme class has a fixed acoustic recipe: formant-shaped harmonics
//! for voiced sounds, band-passed noise for fricatives, closure plus burst
//! for stops. Speakers differ in pitch, formant scale and speaking rate, so
//! durations and pitch are predictable from context but not from phoneme
//! identity alone.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::LEXICON_FILE;
use crate::error::{Error, Result};
use crate::features::{write_alignment, write_wav, AlignedPhone, PhonemeAlignment, StftConfig};
use crate::text::{phoneme_id, phoneme_symbol, Lexicon};

const WORDS: [(&str, &str); 16] = [
    ("see", "S IY"),
    ("sun", "S AH N"),
    ("moon", "M UW N"),
    ("lake", "L EY K"),
    ("red", "R EH D"),
    ("blue", "B L UW"),
    ("fish", "F IH SH"),
    ("mall", "M AO L"),
    ("wave", "W EY V"),
    ("nose", "N OW Z"),
    ("tree", "T R IY"),
    ("bird", "B ER D"),
    ("pan", "P AE N"),
    ("wool", "W UH L"),
    ("zero", "Z IY R OW"),
    ("lemon", "L EH M AH N"),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub f0: f64,
    pub formant_scale: f64,
    /// Multiplies every duration.
    pub rate: f64,
}

pub const SPEAKERS: [Speaker; 4] = [
    Speaker { f0: 110.0, formant_scale: 0.95, rate: 1.15 },
    Speaker { f0: 150.0, formant_scale: 1.0, rate: 0.95 },
    Speaker { f0: 205.0, formant_scale: 1.08, rate: 1.05 },
    Speaker { f0: 245.0, formant_scale: 1.15, rate: 0.85 },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    pub utterances: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            utterances: 160,
            min_words: 2,
            max_words: 4,
            seed: 7,
        }
    }
}

pub fn toy_lexicon() -> Lexicon {
    let mut lex = Lexicon::default();
    for (w, p) in WORDS {
        lex.insert(w, p.split(' ').map(|s| phoneme_id(s).expect("toy phoneme")).collect());
    }
    lex
}

enum Recipe {
    Voiced { formants: [f64; 3], gain: f64 },
    Noise { center: f64, q: f64, gain: f64, voicing: f64 },
    Stop { center: f64, voiced: bool },
    Quiet,
}

fn recipe(sym: &str) -> Recipe {
    let v = |f1, f2, f3| Recipe::Voiced { formants: [f1, f2, f3], gain: 1.0 };
    let son = |f1, f2, f3| Recipe::Voiced { formants: [f1, f2, f3], gain: 0.45 };
    match sym {
        "AA" => v(730.0, 1090.0, 2440.0),
        "AE" => v(660.0, 1720.0, 2410.0),
        "AH" => v(640.0, 1190.0, 2390.0),
        "AO" => v(570.0, 840.0, 2410.0),
        "EH" => v(530.0, 1840.0, 2480.0),
        "ER" => v(490.0, 1350.0, 1690.0),
        "EY" => v(480.0, 2000.0, 2600.0),
        "IH" => v(390.0, 1990.0, 2550.0),
        "IY" => v(270.0, 2290.0, 3010.0),
        "OW" => v(450.0, 900.0, 2300.0),
        "UH" => v(440.0, 1020.0, 2240.0),
        "UW" => v(300.0, 870.0, 2240.0),
        "M" => son(250.0, 1100.0, 2100.0),
        "N" => son(260.0, 1700.0, 2600.0),
        "L" => son(360.0, 1300.0, 2700.0),
        "R" => son(310.0, 1060.0, 1380.0),
        "W" => son(290.0, 610.0, 2150.0),
        "S" => Recipe::Noise { center: 6000.0, q: 3.0, gain: 0.25, voicing: 0.0 },
        "SH" => Recipe::Noise { center: 3000.0, q: 2.5, gain: 0.3, voicing: 0.0 },
        "F" => Recipe::Noise { center: 5000.0, q: 0.8, gain: 0.08, voicing: 0.0 },
        "Z" => Recipe::Noise { center: 5500.0, q: 3.0, gain: 0.2, voicing: 0.25 },
        "V" => Recipe::Noise { center: 3500.0, q: 0.8, gain: 0.07, voicing: 0.3 },
        "T" => Recipe::Stop { center: 4500.0, voiced: false },
        "K" => Recipe::Stop { center: 2200.0, voiced: false },
        "P" => Recipe::Stop { center: 900.0, voiced: false },
        "D" => Recipe::Stop { center: 3800.0, voiced: true },
        "B" => Recipe::Stop { center: 800.0, voiced: true },
        _ => Recipe::Quiet,
    }
}

fn base_duration(sym: &str) -> f64 {
    match recipe(sym) {
        Recipe::Voiced { gain, .. } if gain >= 1.0 => 0.11,
        Recipe::Voiced { .. } => 0.065,
        Recipe::Noise { .. } => 0.09,
        Recipe::Stop { .. } => 0.07,
        Recipe::Quiet if sym == "sp" => 0.06,
        Recipe::Quiet => 0.1,
    }
}

/// Second-order band-pass (constant peak gain) over a sample stream.
struct BandPass {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x: [f64; 2],
    y: [f64; 2],
}

impl BandPass {
    fn new(center: f64, q: f64, sr: f64) -> Self {
        let w0 = 2.0 * PI * center.min(sr * 0.45) / sr;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: alpha / a0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
            x: [0.0; 2],
            y: [0.0; 2],
        }
    }

    fn step(&mut self, v: f64) -> f64 {
        let out = self.b0 * v + self.b2 * self.x[1] - self.a1 * self.y[0] - self.a2 * self.y[1];
        self.x = [v, self.x[0]];
        self.y = [out, self.y[0]];
        out
    }
}

/// One synthetic utterance: waveform plus its exact phoneme alignment.
#[derive(Debug, Clone)]
pub struct ToyUtterance {
    pub words: Vec<String>,
    pub samples: Vec<f32>,
    pub alignment: PhonemeAlignment,
    pub speaker: usize,
}

/// Renders `words` with `speaker`; `rng` drives jitter, pauses and noise.
pub fn synthesize(words: &[&str], speaker: &Speaker, speaker_idx: usize, cfg: &StftConfig, rng: &mut ChaCha8Rng) -> Result<ToyUtterance> {
    let lex = toy_lexicon();
    let sr = cfg.sample_rate as f64;
    let sil = phoneme_id("sil").expect("sil");
    let sp = phoneme_id("sp").expect("sp");
    let mut phones: Vec<u32> = vec![sil];
    for (i, w) in words.iter().enumerate() {
        if i > 0 && rng.random_bool(0.3) {
            phones.push(sp);
        }
        phones.extend_from_slice(lex.lookup(w)?);
    }
    phones.push(sil);
    let last_vowel = phones.iter().rposition(|&p| matches!(recipe(phoneme_symbol(p)), Recipe::Voiced { gain, .. } if gain >= 1.0));

    let mut lens = Vec::with_capacity(phones.len());
    for (k, &p) in phones.iter().enumerate() {
        let mut d = base_duration(phoneme_symbol(p)) * speaker.rate * rng.random_range(0.92..1.08);
        if Some(k) == last_vowel {
            d *= 1.3;
        }
        lens.push((d * sr).round() as usize);
    }
    let total: usize = lens.iter().sum();
    let phase0: f64 = rng.random_range(0.0..2.0 * PI);
    let mut out = vec![0f64; total];
    let mut phase = 0.0f64;
    let mut pos = 0usize;
    let mut aligned = Vec::with_capacity(phones.len());
    for (&p, &len) in phones.iter().zip(&lens) {
        let sym = phoneme_symbol(p);
        let seg = &mut out[pos..pos + len];
        let fade = (0.008 * sr) as usize;
        let env = |i: usize| -> f64 {
            let a = (i.min(len - 1 - i.min(len - 1)) as f64 / fade as f64).min(1.0);
            0.5 - 0.5 * (PI * a).cos()
        };
        let voice = |seg: &mut [f64], formants: &[f64; 3], gain: f64, phase: &mut f64, start: usize| {
            for (i, s) in seg.iter_mut().enumerate() {
                let t = (start + i) as f64 / sr;
                let f0 = speaker.f0 * (1.0 + 0.07 * (2.0 * PI * 1.3 * t + phase0).sin() - 0.08 * t);
                *phase += 2.0 * PI * f0 / sr;
                let mut acc = 0.0;
                let mut k = 1usize;
                while (k as f64) * f0 < 7600.0 {
                    let fk = k as f64 * f0;
                    let mut a = 0.0;
                    for (j, &f) in formants.iter().enumerate() {
                        let fc = f * speaker.formant_scale;
                        let bw = 90.0 + 40.0 * j as f64;
                        a += (-0.5 * ((fk - fc) / bw).powi(2)).exp() / (1.0 + j as f64);
                    }
                    acc += (a / (k as f64).sqrt() + 0.6 / k as f64) * (k as f64 * *phase).sin();
                    k += 1;
                }
                *s += gain * 0.25 * acc;
            }
        };
        match recipe(sym) {
            Recipe::Voiced { formants, gain } => voice(seg, &formants, gain, &mut phase, pos),
            Recipe::Noise { center, q, gain, voicing } => {
                let mut bp = BandPass::new(center, q, sr);
                for s in seg.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *s += gain * bp.step(z);
                }
                if voicing > 0.0 {
                    voice(seg, &[250.0, 1500.0, 2500.0], voicing * 0.4, &mut phase, pos);
                }
            }
            Recipe::Stop { center, voiced } => {
                let closure = len * 6 / 10;
                if voiced {
                    voice(&mut seg[..closure], &[200.0, 900.0, 2400.0], 0.1, &mut phase, pos);
                }
                let mut bp = BandPass::new(center, 1.5, sr);
                for (i, s) in seg[closure..].iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(rng);
                    *s += 0.35 * (-(i as f64) / (0.012 * sr)).exp() * bp.step(z);
                }
            }
            Recipe::Quiet => {}
        }
        for (i, s) in seg.iter_mut().enumerate() {
            *s *= env(i);
            let z: f64 = StandardNormal.sample(rng);
            *s += 3e-4 * z;
        }
        aligned.push(AlignedPhone {
            id: p,
            start: pos as f64 / sr,
            end: (pos + len) as f64 / sr,
        });
        if !voice_continues(sym) {
            phase = 0.0;
        }
        pos += len;
    }
    let peak = out.iter().fold(0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 0.6 / peak } else { 1.0 };
    Ok(ToyUtterance {
        words: words.iter().map(|w| w.to_string()).collect(),
        samples: out.iter().map(|v| (v * scale) as f32).collect(),
        alignment: PhonemeAlignment::new(aligned)?,
        speaker: speaker_idx,
    })
}

fn voice_continues(sym: &str) -> bool {
    matches!(recipe(sym), Recipe::Voiced { .. })
}

/// Random word sequence and speaker for utterance `i` of a corpus.
pub fn draw_utterance(cfg: &ToyCorpusConfig, stft: &StftConfig, rng: &mut ChaCha8Rng) -> Result<ToyUtterance> {
    let n = rng.random_range(cfg.min_words..=cfg.max_words);
    let words: Vec<&str> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())].0).collect();
    let s = rng.random_range(0..SPEAKERS.len());
    synthesize(&words, &SPEAKERS[s], s, stft, rng)
}

/// Writes `<id>.wav`, `<id>.align.tsv`, `<id>.txt` per utterance and the
/// lexicon. Returns the ids in order.
pub fn write_corpus(root: &Path, cfg: &ToyCorpusConfig, stft: &StftConfig) -> Result<Vec<String>> {
    if cfg.utterances == 0 || cfg.min_words == 0 || cfg.min_words > cfg.max_words {
        return Err(Error::Config("toy corpus needs utterances > 0 and 1 <= min_words <= max_words".into()));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    toy_lexicon().save(&root.join(LEXICON_FILE))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids = Vec::with_capacity(cfg.utterances);
    for i in 0..cfg.utterances {
        let u = draw_utterance(cfg, stft, &mut rng)?;
        let id = format!("toy{i:04}_s{}", u.speaker);
        write_wav(&root.join(format!("{id}.wav")), &u.samples, stft.sample_rate)?;
        write_alignment(&root.join(format!("{id}.align.tsv")), &u.alignment)?;
        let txt = root.join(format!("{id}.txt"));
        std::fs::write(&txt, u.words.join(" ") + "\n").map_err(|e| Error::io(&txt, e))?;
        ids.push(id);
    }
    Ok(ids)
}
