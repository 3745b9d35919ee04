use std::path::Path;

use crate::error::{Error, Result};

/// Reads 16-bit PCM mono audio at exactly `sample_rate` Hz into [-1, 1) floats.
pub fn read_wav(path: &Path, sample_rate: u32) -> Result<Vec<f32>> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Invalid(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Invalid(format!(
            "{}: expected 16-bit PCM",
            path.display()
        )));
    }
    if spec.sample_rate != sample_rate {
        return Err(Error::Invalid(format!(
            "{}: sample rate {} Hz, expected {sample_rate} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    reader
        .into_samples::<i16>()
        .map(|s| Ok(s? as f32 / 32768.0))
        .collect()
}

/// Writes 16-bit PCM mono, clipping to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}
