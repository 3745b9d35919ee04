use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tttse_core::diffusion::DiffusionSchedule;
use tttse_core::model::{groups, ModelConfig, SpeechEditModel};
use tttse_core::ttt::{
    apply_rate, make_variants, ttt_duration_predictor, ttt_spectrogram_denoiser, DenoiserInstance, DurationInstance,
    EditMask, RateFactor, TttConfig, TttStage,
};

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<u32>, EditMask) {
    let n = rng.random_range(3..25);
    let durations: Vec<u32> = (0..n).map(|_| rng.random_range(1..12)).collect();
    let s = rng.random_range(0..n - 1);
    let mut e = rng.random_range(s + 1..=n);
    if s == 0 && e == n {
        e = n - 1;
    }
    let m = rng.random_range(1..60);
    let edit = EditMask::new((s, e), &durations, m).unwrap();
    (durations, edit)
}

#[test]
fn variant_masks_never_touch_the_edit() {
    let cfg = TttConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut draws = [0usize; 2];
    while draws.iter().any(|&d| d < 1000) {
        let (durations, edit) = random_instance(&mut rng);
        let phone_edit = edit.phone_mask(durations.len());
        for (k, stage) in [TttStage::Duration, TttStage::Denoiser].into_iter().enumerate() {
            let Ok(masks) = make_variants(&durations, &edit, &cfg, stage, &mut rng) else {
                continue;
            };
            let region = if stage == TttStage::Duration { &phone_edit } else { &edit.mask_f };
            for m in &masks {
                assert_eq!(m.len(), region.len());
                assert!(m.iter().zip(region).all(|(&a, &b)| !(a && b)));
                assert!(m.iter().any(|&x| x));
            }
            draws[k] += masks.len();
        }
    }
}

#[test]
fn thirty_two_variants_by_default() {
    let cfg = TttConfig::default();
    assert_eq!(cfg.variants, 32);
    assert_eq!(cfg.steps, 200);
    assert_eq!(cfg.lr_dp, 2e-4);
    assert_eq!(cfg.lr_sd, 5e-5);
    let durations = vec![4u32; 20];
    let edit = EditMask::new((8, 12), &durations, 16).unwrap();
    let masks = make_variants(&durations, &edit, &cfg, TttStage::Duration, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(masks.len(), 32);
}

#[test]
fn different_seeds_give_different_mask_multisets() {
    let cfg = TttConfig::default();
    let durations = vec![3u32; 30];
    let edit = EditMask::new((10, 14), &durations, 12).unwrap();
    let draw = |seed| {
        let mut m = make_variants(&durations, &edit, &cfg, TttStage::Denoiser, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        m.sort();
        m
    };
    assert_eq!(draw(1), draw(1));
    assert_ne!(draw(1), draw(2));
}

#[test]
fn edit_covering_everything_cannot_be_masked() {
    let durations = vec![5u32; 4];
    let edit = EditMask::new((0, 4), &durations, 20).unwrap();
    let r = make_variants(&durations, &edit, &TttConfig::default(), TttStage::Duration, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(r.is_err());
}

#[test]
fn edit_mask_layout() {
    let e = EditMask::new((1, 3), &[2, 3, 1, 4], 7).unwrap();
    assert_eq!(e.mask_f, vec![false, false, true, true, true, true, false, false, false, false]);
    assert_eq!(e.frame_range(), (2, 6));
    assert!(EditMask::new((2, 2), &[1, 1, 1], 3).is_err());
    assert!(EditMask::new((0, 1), &[1, 1], 0).is_err());
}

#[test]
fn rate_examples() {
    let e = EditMask::new((0, 2), &[50, 50, 10], 100).unwrap();
    assert_eq!(apply_rate(&e, RateFactor::new(1.0).unwrap()), e);
    assert_eq!(apply_rate(&e, RateFactor::new(0.8).unwrap()).target_frames, 80);
    assert_eq!(apply_rate(&e, RateFactor::new(1.2).unwrap()).target_frames, 120);
    let one = EditMask::new((0, 1), &[1, 3], 1).unwrap();
    assert_eq!(apply_rate(&one, RateFactor::new(0.1).unwrap()).target_frames, 1);
    assert!(RateFactor::new(0.0).is_err());
    assert!(RateFactor::new(-1.0).is_err());
    assert!(RateFactor::new(f64::NAN).is_err());
}

proptest! {
    #[test]
    fn rate_is_monotone_and_keeps_the_span(m in 1usize..500, a in 0.05f64..3.0, b in 0.05f64..3.0) {
        let e = EditMask::new((1, 2), &[3, 4, 5], m).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let ml = apply_rate(&e, RateFactor::new(lo).unwrap());
        let mh = apply_rate(&e, RateFactor::new(hi).unwrap());
        prop_assert!(ml.target_frames <= mh.target_frames);
        prop_assert!(ml.target_frames >= 1);
        prop_assert_eq!(ml.span, e.span);
        prop_assert_eq!(&ml.mask_f, &e.mask_f);
    }
}

fn model() -> SpeechEditModel {
    SpeechEditModel::new(ModelConfig::toy(), &Device::Cpu).unwrap()
}

fn quick() -> TttConfig {
    TttConfig {
        steps: 3,
        variants: 4,
        ..Default::default()
    }
}

fn changed_groups(before: &BTreeMap<String, String>, after: &BTreeMap<String, String>) -> Vec<String> {
    before.iter().filter(|(g, h)| after[g.as_str()] != **h).map(|(g, _)| g.clone()).collect()
}

struct SdCase {
    phonemes: Vec<u32>,
    durations: Vec<u32>,
    bins: Vec<u32>,
    mel: Tensor,
    edit: EditMask,
}

fn sd_case(cfg: &ModelConfig) -> SdCase {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let phonemes: Vec<u32> = (0..12).map(|_| rng.random_range(1..cfg.vocab as u32)).collect();
    let durations: Vec<u32> = (0..12).map(|_| rng.random_range(3..8)).collect();
    let t: usize = durations.iter().map(|&d| d as usize).sum();
    let bins = (0..t).map(|_| rng.random_range(0..cfg.pitch_bins as u32)).collect();
    let values: Vec<f32> = (0..t * cfg.n_mels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mel = Tensor::from_vec(values, (1, t, cfg.n_mels), &Device::Cpu).unwrap();
    let edit = EditMask::new((4, 7), &durations, 15).unwrap();
    SdCase {
        phonemes,
        durations,
        bins,
        mel,
        edit,
    }
}

#[test]
fn duration_stage_updates_only_the_duration_predictor() {
    let mut m = model();
    let phonemes: Vec<u32> = (1..=10).collect();
    let durations = vec![4u32; 10];
    let edit = EditMask::new((3, 6), &durations, 12).unwrap();
    let inst = DurationInstance {
        phonemes: &phonemes,
        durations: &durations,
        edit: &edit,
    };
    let before = m.params.hashes().unwrap();
    let report = ttt_duration_predictor(&mut m, &inst, &quick()).unwrap();
    assert_eq!(report.steps.len(), 3);
    let changed = changed_groups(&before, &m.params.hashes().unwrap());
    assert_eq!(changed, vec![groups::DURATION.to_string()]);
}

#[test]
fn denoiser_stage_updates_only_the_denoiser() {
    let mut m = model();
    let c = sd_case(&m.cfg);
    let inst = DenoiserInstance {
        phonemes: &c.phonemes,
        durations: &c.durations,
        pitch_bins: &c.bins,
        mel: &c.mel,
        edit: &c.edit,
    };
    let schedule = DiffusionSchedule::linear(8, 1e-4, 0.9).unwrap();
    let before = m.params.hashes().unwrap();
    let report = ttt_spectrogram_denoiser(&mut m, &inst, &schedule, &quick()).unwrap();
    assert_eq!(report.steps.len(), 3);
    for r in &report.steps {
        assert_eq!(
            r.terms.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(),
            ["diff", "ssim", "ce"]
        );
    }
    let changed = changed_groups(&before, &m.params.hashes().unwrap());
    assert_eq!(changed, vec![groups::DENOISER.to_string()]);
}

#[test]
fn adaptation_is_reproducible_from_the_same_start() {
    let run = || {
        let mut m = model();
        let c = sd_case(&m.cfg);
        let dp = DurationInstance {
            phonemes: &c.phonemes,
            durations: &c.durations,
            edit: &c.edit,
        };
        let a = ttt_duration_predictor(&mut m, &dp, &quick()).unwrap();
        let sd = DenoiserInstance {
            phonemes: &c.phonemes,
            durations: &c.durations,
            pitch_bins: &c.bins,
            mel: &c.mel,
            edit: &c.edit,
        };
        let schedule = DiffusionSchedule::linear(8, 1e-4, 0.9).unwrap();
        let b = ttt_spectrogram_denoiser(&mut m, &sd, &schedule, &quick()).unwrap();
        (a, b, m.params.snapshot().unwrap())
    };
    let (a1, b1, p1) = run();
    let (a2, b2, p2) = run();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert_eq!(p1, p2);
}

#[test]
fn invalid_settings_are_rejected() {
    let mut m = model();
    let phonemes: Vec<u32> = (1..=6).collect();
    let durations = vec![4u32; 6];
    let edit = EditMask::new((2, 3), &durations, 4).unwrap();
    let inst = DurationInstance {
        phonemes: &phonemes,
        durations: &durations,
        edit: &edit,
    };
    for cfg in [
        TttConfig { steps: 0, ..quick() },
        TttConfig { variants: 0, ..quick() },
        TttConfig { mask_ratio: 1.0, ..quick() },
        TttConfig { lr_dp: 0.0, ..quick() },
    ] {
        assert!(ttt_duration_predictor(&mut m, &inst, &cfg).is_err());
    }
    let short = vec![4u32; 5];
    let bad = DurationInstance {
        durations: &short,
        ..inst
    };
    assert!(ttt_duration_predictor(&mut m, &bad, &quick()).is_err());
}
