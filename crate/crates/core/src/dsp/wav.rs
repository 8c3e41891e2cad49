//! PCM WAV input (16-bit integer or 32-bit float; multichannel is
//! averaged to mono) and 32-bit float output.

use std::path::Path;

use super::AudioClip;
use crate::error::{Error, Result};

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Format {
                what: "wav",
                detail: format!("unsupported sample format {fmt:?}/{bits} bit"),
            })
        }
    };
    let ch = spec.channels.max(1) as usize;
    let samples = if ch == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(ch)
            .map(|f| f.iter().sum::<f32>() / ch as f32)
            .collect()
    };
    AudioClip::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path.as_ref(), spec)?;
    for &s in &clip.samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}
