//! Shared toy corpus and trained checkpoint, cached under the cargo target
//! directory and keyed by a hash of every setting that affects them.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Mutex;

use sha2::{Digest, Sha256};
use tttse_core::config::RunConfig;
use tttse_core::dataset::Dataset;
use tttse_core::features::StftConfig;
use tttse_core::toy::{write_corpus, ToyCorpusConfig};
use tttse_core::training::{train_on, Pretrained};

/// Every `HOLD_OUT`-th utterance is kept out of training.
pub const HOLD_OUT: usize = 8;

pub struct Toy {
    pub dataset: Dataset,
    pub checkpoint: PathBuf,
    pub run: RunConfig,
}

impl Toy {
    pub fn pretrained(&self) -> Pretrained {
        Pretrained::load(&self.checkpoint, &candle_core::Device::Cpu).expect("load toy checkpoint")
    }

    pub fn test_set(&self) -> Vec<&tttse_core::dataset::Utterance> {
        self.dataset.split_every(HOLD_OUT).1
    }
}

static LOCK: Mutex<()> = Mutex::new(());

pub fn toy_root() -> PathBuf {
    let run = RunConfig::toy();
    let corpus = ToyCorpusConfig::default();
    let stft = StftConfig::default();
    let mut h = Sha256::new();
    h.update(run.to_flat().expect("flatten config"));
    h.update(format!("{corpus:?}{stft:?}{HOLD_OUT}"));
    let tag = hex::encode(&h.finalize()[..6]);
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("toy-{tag}"))
}

/// Builds the corpus and trains the toy model unless both are already cached.
/// An interrupted run resumes from its last checkpoint.
pub fn toy() -> Toy {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let root = toy_root();
    let run = RunConfig::toy();
    let stft = StftConfig::default();
    let corpus = root.join("corpus");
    if !corpus.join("done").exists() {
        write_corpus(&corpus, &ToyCorpusConfig::default(), &stft).expect("write toy corpus");
        std::fs::write(corpus.join("done"), b"").unwrap();
    }
    let dataset = Dataset::load(&corpus, &stft).expect("load toy corpus");
    let out = root.join("run");
    let done = out.join("done");
    let checkpoint = if done.exists() {
        out.join(tttse_core::training::CHECKPOINT_FILE)
    } else {
        let (train, _) = dataset.split_every(HOLD_OUT);
        let norm = dataset.mel_norm().expect("mel range");
        let p = train_on(&train, norm, &run, &out, &stft).expect("train toy model");
        std::fs::write(&done, b"").unwrap();
        p
    };
    Toy {
        dataset,
        checkpoint,
        run,
    }
}

/// `n` synthetic utterances built in memory, with transcripts.
pub fn toy_utterances(n: usize, seed: u64) -> Vec<tttse_core::dataset::Utterance> {
    use rand::SeedableRng;
    let stft = StftConfig::default();
    let cfg = ToyCorpusConfig::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let u = tttse_core::toy::draw_utterance(&cfg, &stft, &mut rng).expect("draw utterance");
            tttse_core::dataset::Utterance::from_waveform(
                &format!("utt{i:03}"),
                &u.samples,
                u.alignment,
                &stft,
                None,
                Some(u.words),
            )
            .expect("features")
        })
        .collect()
}

/// Freshly initialized toy model wrapped as a checkpoint.
pub fn untrained() -> Pretrained {
    let config = RunConfig::toy();
    let model = tttse_core::model::SpeechEditModel::new(config.model.build(), &candle_core::Device::Cpu).unwrap();
    Pretrained {
        model,
        norm: tttse_core::diffusion::MelNorm::new(tttse_core::features::LOG_FLOOR, 2.0).unwrap(),
        schedule: config.diffusion.schedule().unwrap(),
        stft: StftConfig::default(),
        config,
    }
}
