use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

/// On-disk sample encoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WavEncoding {
    #[default]
    Float32,
    Pcm16,
}

pub fn save_wav(w: &Waveform, path: impl AsRef<Path>, encoding: WavEncoding) -> Result<()> {
    let (bits_per_sample, sample_format) = match encoding {
        WavEncoding::Float32 => (32, SampleFormat::Float),
        WavEncoding::Pcm16 => (16, SampleFormat::Int),
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample,
        sample_format,
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    match encoding {
        WavEncoding::Float32 => {
            for &v in w.samples() {
                writer.write_sample(v)?;
            }
        }
        WavEncoding::Pcm16 => {
            for &v in w.samples() {
                let q = (v as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(q)?;
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Reads a mono WAV (float or integer PCM). Multi-channel files are rejected.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    // Open errors are genuine i/o failures; anything the decoder reports
    // afterwards means the file content is malformed.
    let file = BufReader::new(File::open(path)?);
    let malformed = |e: hound::Error| Error::format(format!("{}: {e}", path.display()));
    let mut reader = hound::WavReader::new(file).map_err(malformed)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let expected = reader.len() as usize;
    let samples: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(malformed)?,
        SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<Result<_, _>>()
                .map_err(malformed)?
        }
    };
    if samples.len() != expected {
        return Err(Error::format(format!(
            "{}: header announces {expected} samples but {} were read",
            path.display(),
            samples.len()
        )));
    }
    Waveform::new(samples, spec.sample_rate).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
