use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::AudioSignal;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub log_floor: f64,
    pub deltas: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            frame_len: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 26,
            n_coeffs: 13,
            low_hz: 0.0,
            high_hz: 8000.0,
            log_floor: 1e-10,
            deltas: true,
        }
    }
}

impl MfccConfig {
    pub fn dim(&self) -> usize {
        if self.deltas {
            3 * self.n_coeffs
        } else {
            self.n_coeffs
        }
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            1 + (len - self.frame_len) / self.hop
        }
    }

    /// Coefficient 0 of an all-silent frame.
    pub fn silence_c0(&self) -> f64 {
        (self.n_mels as f64).sqrt() * self.log_floor.ln()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || self.hop == 0 || self.n_mels == 0 || self.n_coeffs == 0 {
            return Err(Error::Config("mfcc sizes must be positive".into()));
        }
        if self.n_fft < self.frame_len {
            return Err(Error::Config("n_fft must cover the frame".into()));
        }
        if self.n_coeffs > self.n_mels {
            return Err(Error::Config("more cepstral coefficients than mel bands".into()));
        }
        if !(self.low_hz >= 0.0 && self.high_hz > self.low_hz) || self.log_floor <= 0.0 {
            return Err(Error::Config("bad mel band edges or log floor".into()));
        }
        Ok(())
    }
}

/// F×D feature matrix with the hop (in samples) it was computed at.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureSequence {
    pub values: Tensor,
    pub hop: usize,
}

impl AudioFeatureSequence {
    pub fn new(values: Tensor, hop: usize) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() == 0 {
            return Err(Error::Shape(format!(
                "feature matrix must be F×D with F ≥ 1, got {:?}",
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(Error::Validation("feature matrix has non-finite entries".into()));
        }
        Ok(AudioFeatureSequence { values, hop })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Reusable extractor; holds the FFT plan, window, filterbank and DCT.
pub struct Mfcc {
    cfg: MfccConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    dct: Vec<f64>,
}

impl Mfcc {
    pub fn new(cfg: MfccConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let n = cfg.frame_len;
        let window = (0..n)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1).max(1) as f64).cos())
            .collect();

        let high = cfg.high_hz.min(sample_rate as f64 / 2.0);
        let (mlo, mhi) = (hz_to_mel(cfg.low_hz), hz_to_mel(high));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bins = cfg.n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .filter_map(|b| {
                        let f = b as f64 * bin_hz;
                        let w = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((b, w))
                    })
                    .collect()
            })
            .collect();

        let nm = cfg.n_mels;
        let mut dct = vec![0.0; cfg.n_coeffs * nm];
        for k in 0..cfg.n_coeffs {
            let norm = if k == 0 {
                (1.0 / nm as f64).sqrt()
            } else {
                (2.0 / nm as f64).sqrt()
            };
            for m in 0..nm {
                dct[k * nm + m] = norm * (PI * k as f64 * (m as f64 + 0.5) / nm as f64).cos();
            }
        }
        Ok(Mfcc {
            cfg,
            fft,
            window,
            filters,
            dct,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    /// Power spectrum (bins 0..=n_fft/2) of one windowed frame.
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        for (i, (&x, &w)) in frame.iter().zip(&self.window).enumerate() {
            buf[i].re = x * w;
        }
        self.fft.process(&mut buf);
        buf[..self.cfg.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    /// Static cepstral coefficients of one frame.
    pub fn cepstrum(&self, frame: &[f64]) -> Vec<f64> {
        let power = self.power_spectrum(frame);
        let logmel: Vec<f64> = self
            .filters
            .iter()
            .map(|f| {
                let e: f64 = f.iter().map(|&(b, w)| w * power[b]).sum();
                e.max(self.cfg.log_floor).ln()
            })
            .collect();
        let nm = self.cfg.n_mels;
        (0..self.cfg.n_coeffs)
            .map(|k| {
                self.dct[k * nm..(k + 1) * nm]
                    .iter()
                    .zip(&logmel)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    pub fn compute(&self, samples: &[f64]) -> Result<AudioFeatureSequence> {
        let cfg = &self.cfg;
        let frames = cfg.frame_count(samples.len());
        if frames == 0 {
            return Err(Error::Size(format!(
                "signal of {} samples is shorter than one {}-sample frame",
                samples.len(),
                cfg.frame_len
            )));
        }
        let c = cfg.n_coeffs;
        let statics: Vec<Vec<f64>> = (0..frames)
            .map(|t| self.cepstrum(&samples[t * cfg.hop..t * cfg.hop + cfg.frame_len]))
            .collect();
        let d = cfg.dim();
        let mut out = Tensor::zeros(&[frames, d]);
        for (t, row) in statics.iter().enumerate() {
            out.data_mut()[t * d..t * d + c].copy_from_slice(row);
        }
        if cfg.deltas {
            let d1 = deltas(&statics);
            let d2 = deltas(&d1);
            for t in 0..frames {
                out.data_mut()[t * d + c..t * d + 2 * c].copy_from_slice(&d1[t]);
                out.data_mut()[t * d + 2 * c..t * d + 3 * c].copy_from_slice(&d2[t]);
            }
        }
        AudioFeatureSequence::new(out, cfg.hop)
    }
}

/// Regression deltas over ±2 frames with edge replication.
pub fn deltas(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    const N: isize = 2;
    let last = x.len() as isize - 1;
    let denom = 2.0 * (1..=N).map(|n| (n * n) as f64).sum::<f64>();
    (0..x.len() as isize)
        .map(|t| {
            (0..x[0].len())
                .map(|j| {
                    (1..=N)
                        .map(|n| {
                            let a = x[(t + n).min(last) as usize][j];
                            let b = x[(t - n).max(0) as usize][j];
                            n as f64 * (a - b)
                        })
                        .sum::<f64>()
                        / denom
                })
                .collect()
        })
        .collect()
}

pub fn mfcc(signal: &AudioSignal, cfg: &MfccConfig) -> Result<AudioFeatureSequence> {
    Mfcc::new(cfg.clone(), signal.sample_rate())?.compute(signal.samples())
}
