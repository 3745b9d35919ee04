//! Masked-reconstruction training: batch assembly, the joint objective,
//! the separately optimized phoneme classifier, checkpoints and logs.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{Dataset, Utterance};
use crate::diffusion::{forward_diffuse_rows, gaussian, DiffusionSchedule, MelNorm};
use crate::error::{Error, Result};
use crate::features::{normalize_pitch, StftConfig};
use crate::losses::{framewise_ce, l1_mel, masked_l2, scalar, ssim_loss, train_loss, LossReport, TrainTerms};
use crate::model::checkpoint::Checkpoint;
use crate::model::{groups, pitch_bins, regulate_batch, ModelConfig, SpeechEditModel};
use crate::nn::{mask_tensor, Ctx};
use crate::optim::Adam;

/// `round(ratio * n)` scattered positions, at least one masked and, for
/// `n >= 2`, at least one kept.
pub fn sample_phoneme_mask(n: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    if n == 0 {
        return Vec::new();
    }
    let upper = if n >= 2 { n - 1 } else { 1 };
    let k = ((ratio * n as f64).round() as usize).clamp(1, upper);
    let mut mask = vec![false; n];
    for i in index::sample(rng, n, k) {
        mask[i] = true;
    }
    mask
}

/// Padded training batch. Phoneme tensors are `[B, N]`, frame tensors
/// `[B, T]`, mels `[B, T, n_mels]` normalized to [-1, 1].
pub struct Batch {
    pub ids: Tensor,
    pub phone_valid: Tensor,
    pub log_dur: Tensor,
    pub durations: Vec<Vec<u32>>,
    pub mask_p: Tensor,
    pub mel: Tensor,
    /// Reconstruction target; equal to `mel` unless a caller swaps it.
    pub target: Tensor,
    pub frame_valid: Tensor,
    pub mask_f: Tensor,
    pub pitch: Tensor,
    pub pitch_bins: Tensor,
    pub labels: Tensor,
    pub steps: Vec<usize>,
    pub noise: Tensor,
}

/// Normalized mel `[T, n_mels]` values of one utterance, frame-major.
pub fn normalized_frames(u: &Utterance, norm: &MelNorm) -> Vec<f32> {
    u.mel.to_frame_major().into_iter().map(|v| norm.normalize(v)).collect()
}

/// Builds a batch; masks, diffusion steps and noise come from `rng`.
pub fn make_batch(
    utts: &[&Utterance],
    norm: &MelNorm,
    model: &ModelConfig,
    mask_ratio: f64,
    min_masked_frames: usize,
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
    device: &Device,
) -> Result<Batch> {
    if utts.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let b = utts.len();
    let n_max = utts.iter().map(|u| u.phonemes.len()).max().unwrap_or(0);
    let t_max = utts.iter().map(|u| u.frames()).max().unwrap_or(0);
    let c = model.n_mels;
    let mut ids = vec![0u32; b * n_max];
    let mut log_dur = vec![0f32; b * n_max];
    let mut phone_valid = vec![0f32; b * n_max];
    let mut mask_p_rows = Vec::with_capacity(b);
    let mut mask_f_rows = Vec::with_capacity(b);
    let mut mel = vec![0f32; b * t_max * c];
    let mut frame_valid = vec![0f32; b * t_max];
    let mut pitch = vec![0f32; b * t_max];
    let mut bins = vec![0u32; b * t_max];
    let mut labels = vec![0u32; b * t_max];
    let mut durations = Vec::with_capacity(b);
    for (i, u) in utts.iter().enumerate() {
        if u.mel.n_mels() != c {
            return Err(Error::Shape(format!("{}: {} mel bands, model expects {c}", u.id, u.mel.n_mels())));
        }
        let n = u.phonemes.len();
        let t = u.frames();
        for (k, (&p, &d)) in u.phonemes.ids().iter().zip(&u.durations.0).enumerate() {
            ids[i * n_max + k] = p;
            log_dur[i * n_max + k] = (d as f32).ln_1p();
            phone_valid[i * n_max + k] = 1.0;
        }
        let mut mask_p = sample_phoneme_mask(n, mask_ratio, rng);
        let mut mask_f = u.durations.expand(&mask_p);
        let mut tries = 0;
        while mask_f.iter().filter(|&&m| m).count() < min_masked_frames.min(t) && tries < 100 {
            mask_p = sample_phoneme_mask(n, mask_ratio, rng);
            mask_f = u.durations.expand(&mask_p);
            tries += 1;
        }
        let frames = normalized_frames(u, norm);
        mel[i * t_max * c..(i * t_max + t) * c].copy_from_slice(&frames);
        let p_norm = normalize_pitch(&u.pitch, model.pitch_norm);
        let p_bins = pitch_bins(&p_norm, model.pitch_norm, model.pitch_bins);
        let per_frame = u.durations.expand(u.phonemes.ids());
        for f in 0..t {
            frame_valid[i * t_max + f] = 1.0;
            pitch[i * t_max + f] = p_norm[f];
            bins[i * t_max + f] = p_bins[f];
            labels[i * t_max + f] = per_frame[f];
        }
        mask_p_rows.push(mask_p);
        mask_f_rows.push(mask_f);
        durations.push(u.durations.0.clone());
    }
    let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let noise = gaussian(&[b, t_max, c], rng, device)?;
    let mel = Tensor::from_vec(mel, (b, t_max, c), device)?;
    Ok(Batch {
        ids: Tensor::from_vec(ids, (b, n_max), device)?,
        phone_valid: Tensor::from_vec(phone_valid, (b, n_max), device)?,
        log_dur: Tensor::from_vec(log_dur, (b, n_max), device)?,
        durations,
        mask_p: mask_tensor(&mask_p_rows, n_max, device)?,
        target: mel.clone(),
        mel,
        frame_valid: Tensor::from_vec(frame_valid, (b, t_max), device)?,
        mask_f: mask_tensor(&mask_f_rows, t_max, device)?,
        pitch: Tensor::from_vec(pitch, (b, t_max), device)?,
        pitch_bins: Tensor::from_vec(bins, (b, t_max), device)?,
        labels: Tensor::from_vec(labels, (b, t_max), device)?,
        steps,
        noise,
    })
}

/// Forward pass of the joint objective. The returned total carries the
/// graph for backpropagation.
pub fn compute_train_loss(
    model: &SpeechEditModel,
    batch: &Batch,
    cfg: &RunConfig,
    schedule: &DiffusionSchedule,
    ctx: &mut Ctx,
) -> Result<crate::losses::Objective> {
    let e_y = model.encode(&batch.ids, &batch.phone_valid, ctx)?;
    let dur_ctx = model.duration_context(&batch.log_dur, &batch.mask_p)?;
    let pred_log = model.predict_log_duration(&e_y, &dur_ctx, &batch.phone_valid, ctx)?;
    let dur = masked_l2(&pred_log, &batch.log_dur, &batch.mask_p)?;

    let (e_t, _) = regulate_batch(&e_y, &batch.durations)?;
    let pitch_ctx = model.pitch_context(&batch.pitch_bins, &batch.mask_f)?;
    let pred_pitch = model.predict_pitch_frames(&e_t, &pitch_ctx, &batch.frame_valid, ctx)?;
    let pitch = masked_l2(&pred_pitch, &batch.pitch, &batch.mask_f)?;

    let e_t = model.add_pitch(&e_t, &batch.pitch_bins)?;
    let cond = model.condition(&batch.mel, &batch.mask_f, &batch.frame_valid)?;
    let x_t = forward_diffuse_rows(&batch.mel, &batch.steps, &batch.noise, schedule)?;
    let x0 = model.denoise(&x_t, &cond, &e_t, &batch.steps, &batch.frame_valid, ctx)?;
    let diff = l1_mel(&x0, &batch.target, &batch.mask_f)?;
    let ssim = ssim_loss(&x0, &batch.target, &batch.mask_f, &cfg.ssim)?;
    train_loss(TrainTerms { dur, pitch, diff, ssim }, &cfg.loss)
}

/// Classifier objective on ground-truth mels over every valid frame.
pub fn compute_classifier_loss(model: &SpeechEditModel, batch: &Batch, ctx: &mut Ctx) -> Result<Tensor> {
    let logits = model.classify(&batch.mel.detach(), &batch.frame_valid, ctx)?;
    framewise_ce(&logits, &batch.labels, &batch.frame_valid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    #[serde(flatten)]
    pub report: LossReport,
    pub classifier_ce: f64,
}

/// Model, optimizers and everything needed to continue training exactly.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: SpeechEditModel,
    pub norm: MelNorm,
    pub schedule: DiffusionSchedule,
    pub stft: StftConfig,
    pub step: u64,
    main_opt: Adam,
    cls_opt: Adam,
}

fn main_vars(model: &SpeechEditModel) -> Vec<(String, candle_core::Var)> {
    let keep: Vec<&str> = groups::ALL.iter().copied().filter(|g| *g != groups::CLASSIFIER).collect();
    model.params.group_vars(&keep)
}

impl Trainer {
    pub fn new(cfg: RunConfig, norm: MelNorm, stft: StftConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let model = SpeechEditModel::new(cfg.model.build(), device)?;
        let schedule = cfg.diffusion.schedule()?;
        let main_opt = Adam::new(main_vars(&model), cfg.train.adam())?;
        let cls_opt = Adam::new(model.params.group_vars(&[groups::CLASSIFIER]), cfg.train.classifier_adam())?;
        Ok(Self {
            cfg,
            model,
            norm,
            schedule,
            stft,
            step: 0,
            main_opt,
            cls_opt,
        })
    }

    /// Generator for the batch of `step`: one stream per step, so a resumed
    /// run draws exactly what the uninterrupted run would have.
    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed);
        rng.set_stream(step);
        rng
    }

    pub fn batch_for_step(&self, data: &[&Utterance], step: u64) -> Result<Batch> {
        if data.is_empty() {
            return Err(Error::Invalid("no training utterances".into()));
        }
        let mut rng = self.step_rng(step);
        let bs = self.cfg.train.batch_size;
        let picks: Vec<usize> = if data.len() >= bs {
            index::sample(&mut rng, data.len(), bs).into_vec()
        } else {
            (0..bs).map(|_| rng.random_range(0..data.len())).collect()
        };
        let chosen: Vec<&Utterance> = picks.iter().map(|&i| data[i]).collect();
        make_batch(
            &chosen,
            &self.norm,
            &self.model.cfg,
            self.cfg.train.mask_ratio,
            self.cfg.ssim.window,
            &self.schedule,
            &mut rng,
            self.model.device(),
        )
    }

    /// One update of the main model and one of the classifier.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLog> {
        let seed = self.cfg.train.seed ^ (self.step.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut ctx = Ctx::train(seed);
        let obj = compute_train_loss(&self.model, batch, &self.cfg, &self.schedule, &mut ctx)?;
        obj.report.check_finite()?;
        let grads = obj.total.backward()?;
        self.main_opt.step(&grads)?;
        let ce_value = self.classifier_update(batch, &mut ctx)?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            report: obj.report,
            classifier_ce: ce_value,
        })
    }

    /// One classifier update on its own cross-entropy; returns that loss.
    pub fn classifier_update(&mut self, batch: &Batch, ctx: &mut Ctx) -> Result<f64> {
        let ce = compute_classifier_loss(&self.model, batch, ctx)?;
        let ce_value = scalar(&ce)?;
        if !ce_value.is_finite() {
            return Err(Error::NonFinite("loss term `classifier_ce`".into()));
        }
        self.cls_opt.step(&ce.backward()?)?;
        Ok(ce_value)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint {
            model: self.model.cfg.clone(),
            meta: Default::default(),
            tensors: Default::default(),
        };
        ck.insert_section("params", self.model.params.snapshot()?);
        ck.insert_section("adam_main", self.main_opt.state()?);
        ck.insert_section("adam_classifier", self.cls_opt.state()?);
        ck.set_meta("step", &self.step)?;
        ck.set_meta("adam_main_t", &self.main_opt.steps())?;
        ck.set_meta("adam_classifier_t", &self.cls_opt.steps())?;
        ck.set_meta("mel_norm", &self.norm)?;
        ck.set_meta("schedule", &self.schedule)?;
        ck.set_meta("stft", &self.stft)?;
        ck.set_meta("run_config", &self.cfg)?;
        ck.set_meta("rng", &serde_json::json!({"seed": self.cfg.train.seed, "stream": self.step}))?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        let cfg: RunConfig = required(ck, "run_config")?;
        let norm: MelNorm = required(ck, "mel_norm")?;
        let stft: StftConfig = required(ck, "stft")?;
        let mut t = Self::new(cfg, norm, stft, device)?;
        if t.model.cfg != ck.model {
            return Err(Error::Checkpoint("model configuration differs from run configuration".into()));
        }
        t.model.params.load(&ck.section("params"))?;
        t.main_opt.load_state(&ck.section("adam_main"), required(ck, "adam_main_t")?)?;
        t.cls_opt.load_state(&ck.section("adam_classifier"), required(ck, "adam_classifier_t")?)?;
        t.schedule = required(ck, "schedule")?;
        t.step = required(ck, "step")?;
        Ok(t)
    }
}

fn required<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T> {
    ck.meta_value(key)?
        .ok_or_else(|| Error::Checkpoint(format!("metadata `{key}` missing")))
}

/// A trained model with the data normalization and schedule it expects.
pub struct Pretrained {
    pub model: SpeechEditModel,
    pub norm: MelNorm,
    pub schedule: DiffusionSchedule,
    pub stft: StftConfig,
    pub config: RunConfig,
}

impl Pretrained {
    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        let model = SpeechEditModel::new(ck.model.clone(), device)?;
        model.params.load(&ck.section("params"))?;
        Ok(Self {
            model,
            norm: required(ck, "mel_norm")?,
            schedule: required(ck, "schedule")?,
            stft: required(ck, "stft")?,
            config: required(ck, "run_config")?,
        })
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, device)
    }

    /// Independent copy with its own parameters.
    pub fn fork(&self) -> Result<SpeechEditModel> {
        let m = SpeechEditModel::new(self.model.cfg.clone(), self.model.device())?;
        m.params.load(&self.model.params.snapshot()?)?;
        Ok(m)
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Trains on every utterance under `data_root`, writing
/// `<out>/checkpoint.ckpt` periodically and `<out>/train_log.jsonl` every
/// `log_every` steps. An existing checkpoint in `out` is resumed.
pub fn train_loop(data_root: &Path, cfg: &RunConfig, out: &Path, stft: &StftConfig) -> Result<PathBuf> {
    let data = Dataset::load(data_root, stft)?;
    train_on(&data.utterances.iter().collect::<Vec<_>>(), data.mel_norm()?, cfg, out, stft)
}

/// [`train_loop`] over an explicit utterance list.
pub fn train_on(utts: &[&Utterance], norm: MelNorm, cfg: &RunConfig, out: &Path, stft: &StftConfig) -> Result<PathBuf> {
    if utts.is_empty() {
        return Err(Error::Invalid("dataset is empty".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let device = Device::Cpu;
    let mut trainer = if ck_path.exists() {
        let t = Trainer::from_checkpoint(&Checkpoint::load(&ck_path)?, &device)?;
        if t.cfg.model != cfg.model || t.cfg.train.seed != cfg.train.seed {
            return Err(Error::Checkpoint(format!(
                "{}: existing checkpoint was trained with a different model or seed",
                ck_path.display()
            )));
        }
        Trainer { cfg: cfg.clone(), ..t }
    } else {
        Trainer::new(cfg.clone(), norm, *stft, &device)?
    };
    let log_path = out.join(LOG_FILE);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let every = cfg.train.checkpoint_every.max(1);
    while trainer.step < cfg.train.total_steps {
        let batch = trainer.batch_for_step(utts, trainer.step)?;
        let entry = trainer.train_step(&batch)?;
        if cfg.train.log_every > 0 && (entry.step % cfg.train.log_every == 0 || entry.step == 1) {
            let line = serde_json::to_string(&entry).map_err(|e| Error::Invalid(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }
        if trainer.step % every == 0 || trainer.step == cfg.train.total_steps {
            trainer.checkpoint()?.save(&ck_path)?;
        }
    }
    if !ck_path.exists() {
        trainer.checkpoint()?.save(&ck_path)?;
    }
    Ok(ck_path)
}

/// One-utterance batch drawn with a fixed seed.
pub fn single_batch(u: &Utterance, norm: &MelNorm, model: &ModelConfig, mask_ratio: f64, seed: u64, schedule: &DiffusionSchedule) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_batch(&[u], norm, model, mask_ratio, 0, schedule, &mut rng, &Device::Cpu)
}
