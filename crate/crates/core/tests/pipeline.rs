mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tttse_core::evaluation::{middle_third_request, middle_third_span};
use tttse_core::features::{compute_mel, MelSpectrogram, StftConfig, LOG_FLOOR};
use tttse_core::pipeline::{
    mel_from_bytes, mel_to_bytes, plan_edit, read_mel, reconstruct_audio, run_edit, splice, write_mel, EditOptions,
    EditPlan, EditRequest, EditSpan, TargetLength,
};
use tttse_core::text::word_spans;
use tttse_core::toy::{synthesize, toy_lexicon, SPEAKERS};
use tttse_core::ttt::TttConfig;
use tttse_core::Error;

fn skip_all(seed: u64) -> EditOptions {
    EditOptions {
        skip_dp: true,
        skip_sd: true,
        seed,
        ..Default::default()
    }
}

fn random_mel(rng: &mut ChaCha8Rng, n_mels: usize, frames: usize) -> MelSpectrogram {
    let data = (0..n_mels * frames).map(|_| rng.random_range(-8.0..2.0)).collect();
    MelSpectrogram::new(n_mels, frames, data).unwrap()
}

fn plan_with(original_frames: (usize, usize)) -> EditPlan {
    EditPlan {
        utt_id: "x".into(),
        phonemes: vec![1, 2, 3],
        span: (1, 2),
        durations: vec![1, 1, 1],
        original_frames,
        target: TargetLength::Predicted,
        rate: None,
        project: false,
    }
}

#[test]
fn identity_edit_keeps_phonemes_and_span_frames() {
    let utt = &common::toy_utterances(1, 1)[0];
    let n = utt.phonemes.len();
    let plan = plan_edit(utt, None, &EditRequest::new(&utt.id, EditSpan::Phonemes(2, n - 2))).unwrap();
    assert_eq!(plan.phonemes, utt.phonemes.ids());
    let frames: u32 = utt.durations.0[2..n - 2].iter().sum();
    assert_eq!(plan.target, TargetLength::Original(frames as usize));
    assert_eq!(plan.original_frames.1 - plan.original_frames.0, frames as usize);
    assert!(!plan.project);
}

#[test]
fn word_replacement_and_identity_by_text() {
    let utt = &common::toy_utterances(1, 2)[0];
    let lex = toy_lexicon();
    let words = utt.words.clone().unwrap();
    assert!(words.len() >= 2);
    let spans = word_spans(utt.phonemes.ids(), &words, &lex).unwrap();

    let same = EditRequest {
        text: Some(words[1].clone()),
        ..EditRequest::new(&utt.id, EditSpan::Words(1, 2))
    };
    let plan = plan_edit(utt, Some(&lex), &same).unwrap();
    assert_eq!(plan.phonemes, utt.phonemes.ids());
    assert_eq!(plan.span, spans[1]);
    assert!(matches!(plan.target, TargetLength::Original(_)));

    let other = lex.words().find(|w| *w != words[1]).unwrap().to_string();
    let new_phones = lex.lookup(&other).unwrap().to_vec();
    let req = EditRequest {
        text: Some(other),
        ..EditRequest::new(&utt.id, EditSpan::Words(1, 2))
    };
    let plan = plan_edit(utt, Some(&lex), &req).unwrap();
    let (s, e) = spans[1];
    assert_eq!(&plan.phonemes[..s], &utt.phonemes.ids()[..s]);
    assert_eq!(&plan.phonemes[s..s + new_phones.len()], &new_phones[..]);
    assert_eq!(&plan.phonemes[s + new_phones.len()..], &utt.phonemes.ids()[e..]);
    assert_eq!(plan.span, (s, s + new_phones.len()));
    assert_eq!(plan.target, TargetLength::Predicted);

    let insert = EditRequest {
        text: Some(words[0].clone()),
        ..EditRequest::new(&utt.id, EditSpan::Words(1, 1))
    };
    let plan = plan_edit(utt, Some(&lex), &insert).unwrap();
    assert_eq!(plan.phonemes.len(), utt.phonemes.len() + lex.lookup(&words[0]).unwrap().len());
    assert_eq!(plan.original_frames.0, plan.original_frames.1);
}

#[test]
fn bad_requests_are_rejected() {
    let utt = &common::toy_utterances(1, 3)[0];
    let lex = toy_lexicon();
    let n_words = utt.words.as_ref().unwrap().len();
    let delete_all = EditRequest {
        text: Some(String::new()),
        ..EditRequest::new(&utt.id, EditSpan::Phonemes(0, utt.phonemes.len()))
    };
    assert!(plan_edit(utt, Some(&lex), &delete_all).is_err());
    let oov = EditRequest {
        text: Some("zyzzyva".into()),
        ..EditRequest::new(&utt.id, EditSpan::Words(0, 1))
    };
    assert!(matches!(plan_edit(utt, Some(&lex), &oov), Err(Error::OutOfLexicon(_))));
    let out_of_range = EditRequest::new(&utt.id, EditSpan::Words(0, n_words + 1));
    assert!(plan_edit(utt, Some(&lex), &out_of_range).is_err());
    assert!(plan_edit(utt, None, &EditRequest::new(&utt.id, EditSpan::Words(0, 1))).is_err());
    let zero = EditRequest {
        target_frames: Some(0),
        ..EditRequest::new(&utt.id, EditSpan::Phonemes(1, 2))
    };
    assert!(plan_edit(utt, None, &zero).is_err());
}

#[test]
fn deletion_leaves_a_single_pause() {
    let utt = &common::toy_utterances(1, 4)[0];
    let req = EditRequest {
        text: Some(String::new()),
        ..EditRequest::new(&utt.id, EditSpan::Phonemes(1, 3))
    };
    let plan = plan_edit(utt, None, &req).unwrap();
    assert_eq!(plan.phonemes.len(), utt.phonemes.len() - 1);
    assert_eq!(plan.span, (1, 2));
    assert!(tttse_core::text::is_pause(plan.phonemes[1]));
}

/// Frame-by-frame search for the phonemes owning the center window.
fn middle_third_oracle(durations: &[u32]) -> (usize, usize) {
    let owner: Vec<usize> = durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d as usize))
        .collect();
    let t = owner.len();
    let w = (t / 3).max(1);
    let a = (t - w) / 2;
    let hit: Vec<usize> = (a..a + w).map(|f| owner[f]).collect();
    (*hit.iter().min().unwrap(), hit.iter().max().unwrap() + 1)
}

#[test]
fn middle_third_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    while checked < 200 {
        let n = rng.random_range(3..30);
        let d: Vec<u32> = (0..n).map(|_| rng.random_range(0..15)).collect();
        if d.iter().sum::<u32>() < 3 {
            continue;
        }
        let want = middle_third_oracle(&d);
        if want == (0, n) {
            assert!(middle_third_span(&d).is_err());
            continue;
        }
        assert_eq!(middle_third_span(&d).unwrap(), want, "{d:?}");
        checked += 1;
    }
}

#[test]
fn middle_third_request_masks_the_center_phonemes() {
    for utt in common::toy_utterances(4, 5) {
        let (s, e) = middle_third_oracle(&utt.durations.0);
        let plan = plan_edit(&utt, None, &middle_third_request(&utt).unwrap()).unwrap();
        assert_eq!(plan.span, (s, e));
        let a: u32 = utt.durations.0[..s].iter().sum();
        let b: u32 = utt.durations.0[..e].iter().sum();
        assert_eq!(plan.original_frames, (a as usize, b as usize));
        assert_eq!(plan.target, TargetLength::Explicit((b - a) as usize));
        assert!(plan.project);
        let width = utt.frames();
        let kept: usize = plan.unedited_ranges(width).iter().map(|(x, y)| y - x).sum();
        assert_eq!(kept + (b - a) as usize, width);
    }
}

#[test]
fn splice_width_and_bit_equality() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let n_mels = rng.random_range(1..10);
        let frames = rng.random_range(1..80);
        let original = random_mel(&mut rng, n_mels, frames);
        let a = rng.random_range(0..=frames);
        let b = rng.random_range(a..=frames);
        let realized = rng.random_range(1..40);
        let generated = random_mel(&mut rng, n_mels, realized);
        let out = splice(&original, &generated, &plan_with((a, b)), realized).unwrap();
        assert_eq!(out.frames(), frames - (b - a) + realized);
        for t in 0..a {
            assert_eq!(out.frame(t), original.frame(t));
        }
        for t in 0..realized {
            assert_eq!(out.frame(a + t), generated.frame(t));
        }
        for t in b..frames {
            assert_eq!(out.frame(t - b + a + realized), original.frame(t));
        }
    }
}

#[test]
fn splice_at_start_and_width_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let original = random_mel(&mut rng, 4, 20);
    let generated = random_mel(&mut rng, 4, 7);
    let out = splice(&original, &generated, &plan_with((0, 5)), 7).unwrap();
    let want = MelSpectrogram::concat(&[&generated, &original.slice_frames(5, 20).unwrap()]).unwrap();
    assert_eq!(out, want);
    assert!(matches!(splice(&original, &generated, &plan_with((0, 5)), 6), Err(Error::Shape(_))));
    assert!(splice(&original, &generated, &plan_with((15, 25)), 7).is_err());
}

#[test]
fn skipped_adaptation_identity_edit_keeps_the_width() {
    let pre = common::untrained();
    let utt = &common::toy_utterances(1, 6)[0];
    let n = utt.phonemes.len();
    let plan = plan_edit(utt, None, &EditRequest::new(&utt.id, EditSpan::Phonemes(n / 3, n / 2 + 1))).unwrap();
    let out = run_edit(&pre, utt, &plan, &skip_all(0)).unwrap();
    let r = &out.report;
    assert!(r.dp.is_none() && r.sd.is_none());
    assert_eq!(r.target_frames, plan.original_frames.1 - plan.original_frames.0);
    assert_eq!(r.realized_frames, r.edit_durations.iter().map(|&d| d as usize).sum::<usize>());
    assert_eq!(r.output_width, utt.frames() - r.target_frames + r.realized_frames);
    assert_eq!(out.mel.frames(), r.output_width);

    let projected = EditRequest {
        target_frames: Some(r.target_frames),
        ..EditRequest::new(&utt.id, EditSpan::Phonemes(n / 3, n / 2 + 1))
    };
    let plan = plan_edit(utt, None, &projected).unwrap();
    let out = run_edit(&pre, utt, &plan, &skip_all(0)).unwrap();
    assert_eq!(out.mel.frames(), utt.frames());
    let (a, b) = plan.original_frames;
    for t in (0..a).chain(b..utt.frames()) {
        assert_eq!(out.mel.frame(t), utt.mel.frame(t), "frame {t}");
    }
    assert!(out.report.timings.iter().any(|t| t.stage == "sample"));
}

#[test]
fn rate_with_projection_realizes_exact_width() {
    let pre = common::untrained();
    let utt = &common::toy_utterances(1, 7)[0];
    let m = 23;
    for (rate, want) in [(0.8, 18), (1.0, 23), (1.2, 28), (0.01, 1)] {
        let req = EditRequest {
            rate: Some(rate),
            target_frames: Some(m),
            ..EditRequest::new(&utt.id, EditSpan::Phonemes(2, 5))
        };
        let plan = plan_edit(utt, None, &req).unwrap();
        let out = run_edit(&pre, utt, &plan, &skip_all(1)).unwrap();
        assert_eq!(out.report.realized_frames, want, "rate {rate}");
        assert_eq!(out.report.target_frames, want);
    }
}

#[test]
fn edits_are_bit_reproducible() {
    let pre = common::untrained();
    let utt = &common::toy_utterances(1, 8)[0];
    let req = EditRequest {
        target_frames: Some(12),
        ..EditRequest::new(&utt.id, EditSpan::Phonemes(2, 4))
    };
    let plan = plan_edit(utt, None, &req).unwrap();
    let opts = EditOptions {
        ttt: TttConfig {
            steps: 2,
            variants: 2,
            ..Default::default()
        },
        seed: 5,
        ..Default::default()
    };
    let a = run_edit(&pre, utt, &plan, &opts).unwrap();
    let b = run_edit(&pre, utt, &plan, &opts).unwrap();
    assert_eq!(a.mel, b.mel);
    assert_eq!(a.report.dp, b.report.dp);
    assert_eq!(a.report.sd, b.report.sd);
    assert!(a.report.dp.is_some() && a.report.sd.is_some());
    let c = run_edit(&pre, utt, &plan, &EditOptions { seed: 6, ..opts }).unwrap();
    assert_ne!(a.mel, c.mel);
}

#[test]
fn stage_failures_name_the_stage() {
    let pre = common::untrained();
    let utt = &common::toy_utterances(1, 9)[0];
    let plan = plan_edit(utt, None, &EditRequest::new(&utt.id, EditSpan::Phonemes(1, 3))).unwrap();
    let opts = EditOptions {
        ttt: TttConfig {
            steps: 0,
            ..Default::default()
        },
        ..Default::default()
    };
    match run_edit(&pre, utt, &plan, &opts) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "ttt_duration"),
        other => panic!("expected a stage error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn mel_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mel = random_mel(&mut rng, 80, 37);
    let bytes = mel_to_bytes(&mel);
    assert!(bytes.starts_with(b"TTTSE-MEL-v1"));
    assert_eq!(bytes.len(), 13 + 8 + 4 * 80 * 37);
    assert_eq!(mel_from_bytes(&bytes).unwrap(), mel);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.mel");
    write_mel(&path, &mel).unwrap();
    assert_eq!(read_mel(&path).unwrap(), mel);
    assert!(mel_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(mel_from_bytes(b"NOT-A-MEL").is_err());
}

#[test]
fn silence_reconstructs_to_near_zero() {
    let cfg = StftConfig::default();
    let mel = MelSpectrogram::filled(cfg.n_mels, 40, LOG_FLOOR).unwrap();
    let wav = reconstruct_audio(&mel, &cfg, 8).unwrap();
    assert_eq!(wav.len(), 39 * cfg.hop);
    let rms = (wav.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / wav.len() as f64).sqrt();
    assert!(rms < 1e-3, "rms {rms}");
}

fn speech_like() -> Vec<f32> {
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let lex = toy_lexicon();
    let words: Vec<&str> = lex.words().take(3).collect();
    synthesize(&words, &SPEAKERS[0], 0, &cfg, &mut rng).unwrap().samples
}

#[test]
fn griffin_lim_round_trip_stays_close() {
    let cfg = StftConfig::default();
    let mel = compute_mel(&speech_like(), &cfg).unwrap();
    let wav = reconstruct_audio(&mel, &cfg, 32).unwrap();
    let back = compute_mel(&wav, &cfg).unwrap();
    assert_eq!(back.frames(), mel.frames());
    let err = mel.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / mel.data().len() as f64;
    assert!(err < 1.0, "mean abs log-mel error {err}");
}

#[test]
fn reconstruction_is_deterministic() {
    let cfg = StftConfig::default();
    let mel = compute_mel(&speech_like(), &cfg).unwrap().slice_frames(0, 30).unwrap();
    let zero = reconstruct_audio(&mel, &cfg, 0).unwrap();
    assert_eq!(zero, reconstruct_audio(&mel, &cfg, 0).unwrap());
    assert_eq!(reconstruct_audio(&mel, &cfg, 4).unwrap(), reconstruct_audio(&mel, &cfg, 4).unwrap());
    assert_ne!(zero, reconstruct_audio(&mel, &cfg, 4).unwrap());
    let bad = MelSpectrogram::filled(10, 5, 0.0).unwrap();
    assert!(reconstruct_audio(&bad, &cfg, 0).is_err());
}
