use std::path::Path;

use super::StftConfig;
use crate::error::{Error, Result};
use crate::text::{phoneme_id, phoneme_symbol};

pub const ALIGNMENT_HEADER: &str = "phoneme\tstart_sec\tend_sec";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedPhone {
    pub id: u32,
    pub start: f64,
    pub end: f64,
}

/// Time-ordered, non-overlapping phoneme intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeAlignment {
    phones: Vec<AlignedPhone>,
}

impl PhonemeAlignment {
    pub fn new(phones: Vec<AlignedPhone>) -> Result<Self> {
        if phones.is_empty() {
            return Err(Error::Invalid("alignment has no phonemes".into()));
        }
        let mut prev_end = f64::NEG_INFINITY;
        for (i, p) in phones.iter().enumerate() {
            let row = i + 1;
            if !(p.start.is_finite() && p.end.is_finite()) || p.start < 0.0 {
                return Err(Error::MalformedRow {
                    row,
                    reason: "times must be finite and non-negative".into(),
                });
            }
            if p.end <= p.start {
                return Err(Error::Interval {
                    row,
                    start: p.start,
                    end: p.end,
                });
            }
            if p.start < prev_end - 1e-9 {
                return Err(Error::Overlap {
                    row,
                    start: p.start,
                    prev_end,
                });
            }
            prev_end = p.end;
        }
        Ok(Self { phones })
    }

    pub fn phones(&self) -> &[AlignedPhone] {
        &self.phones
    }

    pub fn ids(&self) -> Vec<u32> {
        self.phones.iter().map(|p| p.id).collect()
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    pub fn end(&self) -> f64 {
        self.phones.last().map_or(0.0, |p| p.end)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(ALIGNMENT_HEADER);
        out.push('\n');
        for p in &self.phones {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\n",
                phoneme_symbol(p.id),
                p.start,
                p.end
            ));
        }
        out
    }
}

/// Parses the alignment TSV. Rows are numbered from 1 after the header.
pub fn parse_alignment(text: &str) -> Result<PhonemeAlignment> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").trim_end_matches('\r');
    if header != ALIGNMENT_HEADER {
        return Err(Error::MalformedRow {
            row: 0,
            reason: format!("expected header `{}`", ALIGNMENT_HEADER.escape_default()),
        });
    }
    let mut phones = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::MalformedRow {
                row,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let time = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| Error::MalformedRow {
                row,
                reason: format!("bad time `{s}`: {e}"),
            })
        };
        let (start, end) = (time(fields[1])?, time(fields[2])?);
        let symbol = fields[0].trim();
        let id = phoneme_id(symbol).ok_or_else(|| Error::UnknownPhoneme {
            row,
            symbol: symbol.to_string(),
        })?;
        if end <= start {
            return Err(Error::Interval { row, start, end });
        }
        phones.push(AlignedPhone { id, start, end });
    }
    PhonemeAlignment::new(phones)
}

pub fn load_alignment(path: &Path) -> Result<PhonemeAlignment> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alignment(&text)
}

pub fn write_alignment(path: &Path, a: &PhonemeAlignment) -> Result<()> {
    std::fs::write(path, a.to_tsv()).map_err(|e| Error::io(path, e))
}

/// Integer frame counts per phoneme summing exactly to `frames`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DurationSequence(pub Vec<u32>);

impl DurationSequence {
    pub fn total(&self) -> usize {
        self.0.iter().map(|&d| d as usize).sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `[start, end)` frame range of every phoneme.
    pub fn frame_ranges(&self) -> Vec<(usize, usize)> {
        let mut t = 0;
        self.0
            .iter()
            .map(|&d| {
                let r = (t, t + d as usize);
                t += d as usize;
                r
            })
            .collect()
    }

    /// Frame-level expansion of a phoneme-level flag vector.
    pub fn expand<T: Copy>(&self, per_phone: &[T]) -> Vec<T> {
        self.0
            .iter()
            .zip(per_phone)
            .flat_map(|(&d, &v)| std::iter::repeat_n(v, d as usize))
            .collect()
    }
}

/// Rounds non-negative reals to integers with a fixed sum.
///
/// Each value is floored and the missing units go to the largest fractional
/// parts, ties broken by index.
pub fn largest_remainder(values: &[f64], total: usize) -> Vec<u32> {
    let sum: f64 = values.iter().sum();
    let scaled: Vec<f64> = if sum > 0.0 {
        values.iter().map(|v| v * total as f64 / sum).collect()
    } else {
        vec![total as f64 / values.len().max(1) as f64; values.len()]
    };
    let mut out: Vec<u32> = scaled.iter().map(|v| v.floor() as u32).collect();
    let assigned: usize = out.iter().map(|&d| d as usize).sum();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Converts interval times to frame counts that tile `frames` exactly.
///
/// Each phoneme owns the time from its start to the next phoneme's start
/// (first phoneme from 0, last to the end of audio), so gaps are absorbed by
/// the preceding phoneme.
pub fn durations_from_alignment(
    a: &PhonemeAlignment,
    cfg: &StftConfig,
    frames: usize,
) -> Result<DurationSequence> {
    if frames == 0 {
        return Err(Error::Invalid("zero-frame utterance".into()));
    }
    // Audio spans (frames - 1) hops plus a partial hop under center padding.
    let audio_end = frames as f64 * cfg.frame_seconds();
    if a.end() > audio_end + 1e-6 {
        return Err(Error::Invalid(format!(
            "alignment ends at {:.4}s, beyond audio length {:.4}s",
            a.end(),
            audio_end
        )));
    }
    let phones = a.phones();
    let bounds: Vec<f64> = std::iter::once(0.0)
        .chain(phones.iter().skip(1).map(|p| p.start))
        .chain(std::iter::once(audio_end.max(a.end())))
        .collect();
    let lengths: Vec<f64> = bounds.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
    Ok(DurationSequence(largest_remainder(&lengths, frames)))
}
