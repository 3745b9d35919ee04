use tttse_core::dataset::Dataset;
use tttse_core::features::StftConfig;
use tttse_core::text::{self, phoneme_symbol};
use tttse_core::toy::{toy_lexicon, write_corpus, ToyCorpusConfig, SPEAKERS};
use tttse_core::Error;

#[test]
fn toy_corpus_loads_with_consistent_features() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ToyCorpusConfig {
        utterances: 8,
        ..ToyCorpusConfig::default()
    };
    let stft = StftConfig::default();
    let ids = write_corpus(dir.path(), &cfg, &stft).unwrap();
    let ds = Dataset::load(dir.path(), &stft).unwrap();
    assert_eq!(ds.len(), 8);
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ds.utterances.iter().map(|u| u.id.clone()).collect::<Vec<_>>(), sorted);
    assert_eq!(ds.lexicon().unwrap().unwrap(), toy_lexicon());
    let norm = ds.mel_norm().unwrap();
    assert!(norm.max > norm.min);

    for u in &ds.utterances {
        assert_eq!(u.durations.total(), u.frames());
        assert_eq!(u.pitch.len(), u.frames());
        let words = u.words.as_ref().unwrap();
        let spans = text::word_spans(u.phonemes.ids(), words, &toy_lexicon()).unwrap();
        assert_eq!(spans.len(), words.len());

        // Vowel frames should be voiced near the speaker's pitch.
        let speaker: usize = u.id.rsplit("_s").next().unwrap().parse().unwrap();
        let per_frame = u.durations.expand(u.phonemes.ids());
        let (mut vowel, mut voiced, mut close) = (0, 0, 0);
        for (t, &p) in per_frame.iter().enumerate() {
            let sym = phoneme_symbol(p);
            if ["AA", "AE", "AH", "AO", "EH", "EY", "IH", "IY", "OW", "UH", "UW"].contains(&sym) {
                vowel += 1;
                if u.pitch.voiced[t] {
                    voiced += 1;
                    let ratio = u.pitch.f0[t] as f64 / SPEAKERS[speaker].f0;
                    if (0.8..1.2).contains(&ratio) {
                        close += 1;
                    }
                }
            }
        }
        assert!(voiced as f64 >= 0.8 * vowel as f64, "{}: {voiced}/{vowel} voiced", u.id);
        assert!(close as f64 >= 0.8 * voiced as f64, "{}: {close}/{voiced} near f0", u.id);
    }
}

#[test]
fn empty_or_missing_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::load(dir.path(), &StftConfig::default()), Err(Error::Invalid(_))));
    let missing = dir.path().join("nope");
    assert!(matches!(Dataset::load(&missing, &StftConfig::default()), Err(Error::Io { .. })));
}
