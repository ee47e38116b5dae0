use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::EmptyInput("waveform has no samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * c).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a 16-bit PCM mono WAV file, scaling samples by 1/32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = WavReader::open(path).map_err(|e| format_err(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(format_err(path, format!("expected mono audio, found {} channels", spec.channels)));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(format_err(
            path,
            format!("expected 16-bit PCM, found {:?} with {} bits", spec.sample_format, spec.bits_per_sample),
        ));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format_err(path, e.to_string()))?;
    if samples.is_empty() {
        return Err(Error::EmptyInput(format!("{} contains no samples", path.display())));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Writes `samples` as 16-bit PCM mono, clipping to the representable range.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| format_err(path, e.to_string()))?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| format_err(path, e.to_string()))?;
    }
    w.finalize().map_err(|e| format_err(path, e.to_string()))
}
