//! Phoneme inventory and pronouncing lexicon.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// ARPAbet without stress markers, plus silence and short pause.
pub const PHONEMES: [&str; 41] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH", "sil", "sp",
];

/// Number of real phoneme classes.
pub const INVENTORY_SIZE: usize = PHONEMES.len();
/// Extra embedding row used as the mask token.
pub const MASK_TOKEN: u32 = INVENTORY_SIZE as u32;

pub fn phoneme_id(symbol: &str) -> Option<u32> {
    // Accept stressed ARPAbet vowels such as `AH0`.
    let base = symbol.trim_end_matches(|c: char| c.is_ascii_digit());
    PHONEMES.iter().position(|p| *p == base).map(|i| i as u32)
}

pub fn phoneme_symbol(id: u32) -> &'static str {
    PHONEMES.get(id as usize).copied().unwrap_or("<mask>")
}

pub fn is_pause(id: u32) -> bool {
    matches!(phoneme_symbol(id), "sil" | "sp")
}

/// Word to phoneme-id pronunciations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<u32>>,
}

impl Lexicon {
    pub fn insert(&mut self, word: &str, phones: Vec<u32>) {
        self.entries.insert(word.to_lowercase(), phones);
    }

    /// Parses `word<TAB>PH PH PH` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Lexicon::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, pron) = line.split_once('\t').ok_or_else(|| {
                Error::Invalid(format!("lexicon line {}: expected `word<TAB>phones`", i + 1))
            })?;
            let phones = pron
                .split_whitespace()
                .map(|s| {
                    phoneme_id(s).ok_or_else(|| {
                        Error::Invalid(format!("lexicon line {}: unknown phoneme `{s}`", i + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if phones.is_empty() {
                return Err(Error::Invalid(format!(
                    "lexicon line {}: empty pronunciation",
                    i + 1
                )));
            }
            lex.insert(word.trim(), phones);
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (w, p) in &self.entries {
            let phones: Vec<&str> = p.iter().map(|&id| phoneme_symbol(id)).collect();
            out.push_str(&format!("{w}\t{}\n", phones.join(" ")));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn lookup(&self, word: &str) -> Result<&[u32]> {
        self.entries
            .get(&word.to_lowercase())
            .map(Vec::as_slice)
            .ok_or_else(|| Error::OutOfLexicon(word.to_string()))
    }

    pub fn phonemize(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for w in words(text) {
            out.extend_from_slice(self.lookup(&w)?);
        }
        Ok(out)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Lower-cased words with surrounding punctuation stripped.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Locates each transcript word inside an aligned phoneme sequence.
///
/// Pauses between words are skipped. Returns `[start, end)` phoneme index
/// ranges, one per word.
pub fn word_spans(phones: &[u32], transcript: &[String], lex: &Lexicon) -> Result<Vec<(usize, usize)>> {
    let mut spans = Vec::with_capacity(transcript.len());
    let mut pos = 0;
    for w in transcript {
        let pron = lex.lookup(w)?;
        while pos < phones.len() && is_pause(phones[pos]) && !is_pause(pron[0]) {
            pos += 1;
        }
        let end = pos + pron.len();
        if end > phones.len() || phones[pos..end] != *pron {
            return Err(Error::Invalid(format!(
                "word `{w}` does not match the aligned phonemes at index {pos}"
            )));
        }
        spans.push((pos, end));
        pos = end;
    }
    if phones[pos..].iter().any(|&p| !is_pause(p)) {
        return Err(Error::Invalid(
            "aligned phonemes continue past the end of the transcript".into(),
        ));
    }
    Ok(spans)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> Lexicon {
        Lexicon::parse("hello\tHH AH L OW\nworld\tW ER L D\n").unwrap()
    }

    #[test]
    fn phoneme_ids_strip_stress() {
        assert_eq!(phoneme_id("AH0"), phoneme_id("AH"));
        assert_eq!(phoneme_id("xx"), None);
        assert_eq!(phoneme_symbol(MASK_TOKEN), "<mask>");
    }

    #[test]
    fn out_of_lexicon_is_an_error() {
        assert!(matches!(
            lex().phonemize("hello there"),
            Err(Error::OutOfLexicon(w)) if w == "there"
        ));
    }

    #[test]
    fn word_spans_skip_pauses() {
        let l = lex();
        let sil = phoneme_id("sil").unwrap();
        let mut phones = vec![sil];
        phones.extend(l.lookup("hello").unwrap());
        phones.push(phoneme_id("sp").unwrap());
        phones.extend(l.lookup("world").unwrap());
        phones.push(sil);
        let spans = word_spans(&phones, &words("Hello, world."), &l).unwrap();
        assert_eq!(spans, vec![(1, 5), (6, 10)]);
    }

    #[test]
    fn lexicon_tsv_roundtrip() {
        let l = lex();
        assert_eq!(Lexicon::parse(&l.to_tsv()).unwrap(), l);
    }
}
