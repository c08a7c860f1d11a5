use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio at a known rate, amplitudes in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::AudioFormat("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Validation(format!(
                "sample {i} = {} is not a finite amplitude in [-1, 1]",
                samples[i]
            )));
        }
        Ok(AudioSignal { samples, sample_rate })
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

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples `[start, start + len)` as a new signal.
    pub fn slice(&self, start: usize, len: usize) -> AudioSignal {
        AudioSignal {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    /// Resampled to `rate` by linear interpolation.
    pub fn resampled(&self, rate: u32) -> AudioSignal {
        if rate == self.sample_rate {
            return self.clone();
        }
        AudioSignal {
            samples: resample_linear(&self.samples, self.sample_rate, rate),
            sample_rate: rate,
        }
    }

    /// Each sample rounded to the nearest 16-bit PCM level, as stored in WAV.
    pub fn quantized_pcm16(&self) -> AudioSignal {
        AudioSignal {
            samples: self.samples.iter().map(|&v| pcm16_level(v) as f64 / 32768.0).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn pcm16_level(v: f64) -> i16 {
    (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Linear interpolation onto a new sample grid; output length is
/// `round(len · to / from)`.
pub fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if samples.is_empty() {
        return Vec::new();
    }
    let out_len = ((samples.len() as u64 * to as u64 + from as u64 / 2) / from as u64) as usize;
    let last = samples.len() - 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * from as f64 / to as f64;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = pos - i0 as f64;
            samples[i0] + frac * (samples[i1] - samples[i0])
        })
        .collect()
}

/// Reads a PCM WAV file as mono 16 kHz: channels are averaged and other
/// rates are linearly resampled.
pub fn load_wav(path: &Path) -> Result<AudioSignal> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file))
        .map_err(|e| Error::AudioFormat(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::AudioFormat(format!(
            "{}: only integer PCM is supported",
            path.display()
        )));
    }
    let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
    let channels = spec.channels as usize;
    let raw: Vec<i32> = reader
        .into_samples::<i32>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::AudioFormat(format!("{}: {e}", path.display())))?;
    if channels == 0 || raw.len() % channels != 0 {
        return Err(Error::AudioFormat(format!("{}: truncated frame data", path.display())));
    }
    let mono: Vec<f64> = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f64 / scale).sum::<f64>() / channels as f64)
        .collect();
    Ok(AudioSignal::new(mono, spec.sample_rate)?.resampled(SAMPLE_RATE))
}

/// Writes mono 16-bit PCM.
pub fn write_wav(signal: &AudioSignal, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::AudioFormat(other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &signal.samples {
        w.write_sample(pcm16_level(s)).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}
