//! Utterance loading from a dataset directory.
//!
//! Layout per utterance: `<id>.wav`, `<id>.align.tsv`, optional
//! `<id>.f0.tsv` pitch override and optional `<id>.txt` transcript. A
//! `lexicon.tsv` at the root is picked up when present.

use std::path::{Path, PathBuf};

use crate::diffusion::MelNorm;
use crate::error::{Error, Result};
use crate::features::{
    compute_mel, durations_from_alignment, extract_pitch, load_alignment, load_f0_override, read_wav,
    DurationSequence, MelSpectrogram, PhonemeAlignment, PitchContour, StftConfig,
};
use crate::model::PhonemeSequence;
use crate::text::{self, Lexicon};

pub const LEXICON_FILE: &str = "lexicon.tsv";

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub phonemes: PhonemeSequence,
    pub alignment: PhonemeAlignment,
    pub durations: DurationSequence,
    pub mel: MelSpectrogram,
    pub pitch: PitchContour,
    pub words: Option<Vec<String>>,
}

impl Utterance {
    /// Builds features from an in-memory waveform.
    pub fn from_waveform(
        id: &str,
        samples: &[f32],
        alignment: PhonemeAlignment,
        cfg: &StftConfig,
        pitch: Option<PitchContour>,
        words: Option<Vec<String>>,
    ) -> Result<Self> {
        let mel = compute_mel(samples, cfg)?;
        let pitch = match pitch {
            Some(p) => p,
            None => extract_pitch(samples, cfg)?,
        };
        pitch.check_matches(&mel)?;
        let durations = durations_from_alignment(&alignment, cfg, mel.frames())?;
        Ok(Self {
            id: id.to_string(),
            phonemes: PhonemeSequence::new(alignment.ids())?,
            alignment,
            durations,
            mel,
            pitch,
            words,
        })
    }

    /// Loads `<dir>/<id>.*`.
    pub fn load(dir: &Path, id: &str, cfg: &StftConfig) -> Result<Self> {
        let wav = dir.join(format!("{id}.wav"));
        Self::load_files(&wav, &dir.join(format!("{id}.align.tsv")), cfg)
    }

    /// Loads a waveform and alignment; sibling `.f0.tsv` and `.txt` files
    /// sharing the waveform's stem are used when present.
    pub fn load_files(wav: &Path, align: &Path, cfg: &StftConfig) -> Result<Self> {
        let id = utt_id(wav)?;
        let samples = read_wav(wav, cfg.sample_rate)?;
        let alignment = load_alignment(align)?;
        let f0_path = wav.with_file_name(format!("{id}.f0.tsv"));
        let pitch = if f0_path.exists() {
            Some(load_f0_override(&f0_path, cfg.frames_for(samples.len()))?)
        } else {
            None
        };
        let txt = wav.with_file_name(format!("{id}.txt"));
        let words = if txt.exists() {
            let s = std::fs::read_to_string(&txt).map_err(|e| Error::io(&txt, e))?;
            Some(text::words(&s))
        } else {
            None
        };
        Self::from_waveform(&id, &samples, alignment, cfg, pitch, words)
    }

    pub fn frames(&self) -> usize {
        self.mel.frames()
    }
}

fn utt_id(wav: &Path) -> Result<String> {
    wav.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Invalid(format!("{}: no file stem", wav.display())))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub stft: StftConfig,
    /// Sorted by id.
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn load(root: &Path, stft: &StftConfig) -> Result<Self> {
        stft.validate()?;
        let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(root, e))?.path();
            if path.extension().is_some_and(|e| e == "wav") {
                ids.push(utt_id(&path)?);
            }
        }
        ids.sort();
        if ids.is_empty() {
            return Err(Error::Invalid(format!("{}: dataset has no .wav files", root.display())));
        }
        let utterances = ids
            .iter()
            .map(|id| Utterance::load(root, id, stft))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            stft: *stft,
            utterances,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// Extremes of every log-mel value in the set.
    pub fn mel_norm(&self) -> Result<MelNorm> {
        let lo = self.utterances.iter().map(|u| u.mel.min_value()).fold(f32::INFINITY, f32::min);
        let hi = self.utterances.iter().map(|u| u.mel.max_value()).fold(f32::NEG_INFINITY, f32::max);
        MelNorm::new(lo, hi)
    }

    pub fn lexicon(&self) -> Result<Option<Lexicon>> {
        let p = self.root.join(LEXICON_FILE);
        if p.exists() {
            Lexicon::load(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Deterministic split: every `k`-th utterance (by sorted id) is held out.
    pub fn split_every(&self, k: usize) -> (Vec<&Utterance>, Vec<&Utterance>) {
        let k = k.max(2);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, u) in self.utterances.iter().enumerate() {
            if i % k == k - 1 {
                test.push(u);
            } else {
                train.push(u);
            }
        }
        (train, test)
    }
}
