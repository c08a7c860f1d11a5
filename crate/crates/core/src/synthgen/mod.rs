//! Synthetic paired corpora with a known per-emotion rig correlation
//! structure.
//!
//! Each clip draws a latent `k×T` signal of non-overlapping Hann pulses
//! (one factor active at a time). Rig curves are `W_e z` plus smoothed noise;
//! audio is a bank of `k` tones whose envelopes are the same pulses.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audiofeat::{write_wav, AudioSignal, SAMPLE_RATE};
use crate::emotion::EmotionLabel;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rigmodel::{
    save_rig_curves, ClipEntry, ClipManifest, Region, RigCurveSequence, RigRegistry, RigWindow, DEFAULT_FRAME_RATE,
    WINDOW_FRAMES,
};

#[cfg(test)]
mod tests;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub clips_per_emotion: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub factors: usize,
    pub noise_sigma: f64,
    /// Frames averaged when smoothing the rig noise.
    pub noise_smoothing: usize,
    /// Peak pulse height for a reference-length event.
    pub pulse_amplitude: f64,
    pub min_tone_hz: f64,
    pub max_tone_hz: f64,
    /// Share of the lip and untagged mixing rows common to every emotion.
    pub speech_sharing: f64,
    /// Gain of the eye and forehead mixing rows relative to the others.
    pub upper_scale: f64,
    pub min_angle_deg: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clips_per_emotion: 100,
            min_frames: 120,
            max_frames: 270,
            factors: 8,
            noise_sigma: 0.02,
            noise_smoothing: 5,
            pulse_amplitude: 1.5,
            min_tone_hz: 200.0,
            max_tone_hz: 3000.0,
            speech_sharing: 0.95,
            upper_scale: 0.5,
            min_angle_deg: 15.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factors == 0 || self.clips_per_emotion == 0 {
            return Err(Error::Config("factors and clips_per_emotion must be ≥ 1".into()));
        }
        if self.min_frames < WINDOW_FRAMES || self.max_frames < self.min_frames {
            return Err(Error::Config(format!(
                "clip length range [{}, {}] must start at ≥ {WINDOW_FRAMES} frames",
                self.min_frames, self.max_frames
            )));
        }
        if !(self.noise_sigma >= 0.0) || self.noise_smoothing == 0 {
            return Err(Error::Config("noise sigma must be ≥ 0 and smoothing ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.speech_sharing) {
            return Err(Error::Config("speech_sharing must lie in [0, 1]".into()));
        }
        if !(self.upper_scale > 0.0 && self.upper_scale.is_finite()) {
            return Err(Error::Config("upper_scale must be positive".into()));
        }
        if !(self.min_tone_hz > 0.0 && self.max_tone_hz > self.min_tone_hz)
            || self.max_tone_hz >= SAMPLE_RATE as f64 / 2.0
        {
            return Err(Error::Config("tone band must lie inside (0, Nyquist)".into()));
        }
        Ok(())
    }

    /// Log-spaced tone frequencies, one per factor.
    pub fn tone_frequencies(&self) -> Vec<f64> {
        let k = self.factors;
        (0..k)
            .map(|i| {
                let f = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
                self.min_tone_hz * (self.max_tone_hz / self.min_tone_hz).powf(f)
            })
            .collect()
    }

    /// Largest pulse height any event can reach.
    pub fn max_pulse(&self) -> f64 {
        self.pulse_amplitude * (REF_DURATION / MIN_DURATION as f64).sqrt() * (1.0 + AMP_JITTER)
    }
}

const MIN_DURATION: usize = 4;
const MAX_DURATION: usize = 10;
const MAX_GAP: usize = 3;
const REF_DURATION: f64 = 7.0;
const AMP_JITTER: f64 = 0.1;
const AUDIO_PEAK: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct SynthClip {
    pub clip_id: String,
    pub emotion: EmotionLabel,
    pub rigs: RigCurveSequence,
    pub audio: AudioSignal,
    /// `k×T` pulse envelopes.
    pub latent: Tensor,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub registry: RigRegistry,
    /// One column-normalized `R×k` mixing matrix per emotion.
    pub mixing: Vec<Tensor>,
    pub clips: Vec<SynthClip>,
}

impl SynthCorpus {
    pub fn mixing_for(&self, e: EmotionLabel) -> &Tensor {
        &self.mixing[e.index()]
    }
}

/// Independent RNG per (seed, stream name).
pub fn stream_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    ChaCha8Rng::from_seed(d.into())
}

pub fn normalize_columns(w: &mut Tensor) {
    let (r, k) = (w.rows(), w.cols());
    for c in 0..k {
        let n = (0..r).map(|i| w.at(i, c).powi(2)).sum::<f64>().sqrt();
        for i in 0..r {
            w.set(i, c, w.at(i, c) / n);
        }
    }
}

/// Orthonormal basis of the column space (modified Gram–Schmidt).
fn orthonormal_columns(w: &Tensor) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in 0..w.cols() {
        let mut v: Vec<f64> = (0..w.rows()).map(|i| w.at(i, c)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Smallest principal angle between two column spaces, in degrees.
pub fn min_principal_angle_deg(a: &Tensor, b: &Tensor) -> f64 {
    let (qa, qb) = (orthonormal_columns(a), orthonormal_columns(b));
    let m: Vec<Vec<f64>> = qa
        .iter()
        .map(|x| qb.iter().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect())
        .collect();
    // Largest singular value of m by power iteration on mᵀm.
    let n = qb.len();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut sigma = 0.0;
    for _ in 0..500 {
        let mv: Vec<f64> = m
            .iter()
            .map(|row| row.iter().zip(&v).map(|(p, q)| p * q).sum())
            .collect();
        let mut w = vec![0.0; n];
        for (row, s) in m.iter().zip(&mv) {
            for (wj, rj) in w.iter_mut().zip(row) {
                *wj += rj * s;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let next = norm.sqrt();
        v = w.into_iter().map(|x| x / norm).collect();
        if (next - sigma).abs() < 1e-15 {
            sigma = next;
            break;
        }
        sigma = next;
    }
    sigma.min(1.0).acos().to_degrees()
}

/// `W Wᵀ`
pub fn gram(w: &Tensor) -> Tensor {
    w.matmul(&w.transpose())
}

pub fn frobenius(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Per-emotion mixing matrices: lip and untagged rows blend a shared
/// component with an emotion-specific one; eye and forehead rows are
/// emotion-specific and scaled by `upper_scale`.
pub fn mixing_matrices(cfg: &SynthConfig, registry: &RigRegistry) -> Result<Vec<Tensor>> {
    let (r, k) = (registry.len(), cfg.factors);
    let mut rng = stream_rng(cfg.seed, "mixing");
    let gauss = |rng: &mut ChaCha8Rng| -> Tensor { Tensor::from_fn(r, k, |_, _| rng.sample::<f64, _>(StandardNormal)) };
    let shared = gauss(&mut rng);
    let mut out: Vec<Tensor> = Vec::new();
    let (s, u) = (
        cfg.speech_sharing,
        (1.0 - cfg.speech_sharing * cfg.speech_sharing).sqrt(),
    );
    for e in EmotionLabel::EMOTIONS {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let own = gauss(&mut rng);
            let mut w = Tensor::from_fn(r, k, |i, c| match registry.region(i) {
                Region::Lip | Region::Other => s * shared.at(i, c) + u * own.at(i, c),
                Region::Eye | Region::Forehead => cfg.upper_scale * own.at(i, c),
            });
            normalize_columns(&mut w);
            if out
                .iter()
                .all(|prev| min_principal_angle_deg(prev, &w) > cfg.min_angle_deg)
            {
                out.push(w);
                break;
            }
            if attempts > 100 {
                return Err(Error::Config(format!(
                    "could not draw a mixing matrix for {e} separated by {}°",
                    cfg.min_angle_deg
                )));
            }
        }
    }
    Ok(out)
}

fn clip_frames(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(cfg.min_frames..=cfg.max_frames)
}

/// `k×T` envelopes of sequential Hann pulses. Factors cycle through random
/// permutations so every factor fires about equally often; pulse height
/// scales with `1/√duration` so every event carries similar energy.
pub fn pulse_latent(cfg: &SynthConfig, frames: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let k = cfg.factors;
    let mut z = Tensor::zeros(&[k, frames]);
    let mut order: Vec<usize> = Vec::new();
    let mut t = rng.gen_range(0..=MAX_GAP);
    loop {
        let d = rng.gen_range(MIN_DURATION..=MAX_DURATION);
        if t + d > frames {
            break;
        }
        if order.is_empty() {
            order = (0..k).collect();
            order.shuffle(rng);
        }
        let f = order.pop().expect("refilled");
        let amp =
            cfg.pulse_amplitude * (REF_DURATION / d as f64).sqrt() * (1.0 + rng.gen_range(-AMP_JITTER..AMP_JITTER));
        for i in 0..d {
            let phase = (i as f64 + 1.0) / (d as f64 + 1.0);
            z.set(f, t + i, amp * (PI * phase).sin().powi(2));
        }
        t += d + rng.gen_range(0..=MAX_GAP);
    }
    z
}

/// Unit-variance noise, averaged over `width` frames and rescaled back to
/// unit variance.
fn smoothed_noise(rows: usize, frames: usize, width: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let raw = Tensor::from_fn(rows, frames + width - 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let scale = (width as f64).sqrt() / width as f64;
    Tensor::from_fn(rows, frames, |r, t| {
        (0..width).map(|j| raw.at(r, t + j)).sum::<f64>() * scale
    })
}

/// Audio length matching `frames` animation frames.
pub fn audio_len(frames: usize) -> usize {
    (frames * SAMPLE_RATE as usize).div_ceil(DEFAULT_FRAME_RATE as usize)
}

/// Tone bank with envelopes `z`, linearly interpolated between frames and
/// scaled by a fixed gain so the peak stays within ±0.9.
pub fn synth_audio(cfg: &SynthConfig, z: &Tensor, phases: &[f64]) -> Result<AudioSignal> {
    let frames = z.cols();
    let n = audio_len(frames);
    let freqs = cfg.tone_frequencies();
    let gain = AUDIO_PEAK / cfg.max_pulse();
    let sr = SAMPLE_RATE as f64;
    let samples = (0..n)
        .map(|i| {
            let pos = i as f64 * DEFAULT_FRAME_RATE / sr;
            let f0 = (pos.floor() as usize).min(frames - 1);
            let f1 = (f0 + 1).min(frames - 1);
            let frac = pos - f0 as f64;
            let mut v = 0.0;
            for (j, (&hz, &ph)) in freqs.iter().zip(phases).enumerate() {
                let env = z.at(j, f0) + frac * (z.at(j, f1) - z.at(j, f0));
                if env != 0.0 {
                    v += env * (2.0 * PI * hz * i as f64 / sr + ph).sin();
                }
            }
            (gain * v).clamp(-AUDIO_PEAK, AUDIO_PEAK)
        })
        .collect();
    Ok(AudioSignal::new(samples, SAMPLE_RATE)?.quantized_pcm16())
}

pub fn gen_clip(
    cfg: &SynthConfig,
    registry: &RigRegistry,
    mixing: &Tensor,
    clip_id: &str,
    emotion: EmotionLabel,
) -> Result<SynthClip> {
    let mut rng = stream_rng(cfg.seed, clip_id);
    let frames = clip_frames(cfg, &mut rng);
    let z = pulse_latent(cfg, frames, &mut rng);
    let noise = smoothed_noise(registry.len(), frames, cfg.noise_smoothing, &mut rng);
    let phases: Vec<f64> = (0..cfg.factors).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let mut y = mixing.matmul(&z);
    for (v, n) in y.data_mut().iter_mut().zip(noise.data()) {
        *v = (*v + cfg.noise_sigma * n).clamp(-1.0, 1.0);
    }
    let rigs = RigCurveSequence::new(y, DEFAULT_FRAME_RATE, registry.hash())?.quantized();
    let audio = synth_audio(cfg, &z, &phases)?;
    Ok(SynthClip {
        clip_id: clip_id.to_string(),
        emotion,
        rigs,
        audio,
        latent: z,
    })
}

pub fn clip_id(emotion: EmotionLabel, i: usize) -> String {
    format!("{}_{i:03}", emotion.name())
}

/// Generates the whole corpus in memory. Deterministic per seed; each clip
/// uses its own RNG stream so order and parallelism do not matter.
pub fn gen_corpus(cfg: &SynthConfig, registry: &RigRegistry) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mixing = mixing_matrices(cfg, registry)?;
    let mut clips = Vec::with_capacity(5 * cfg.clips_per_emotion);
    for e in EmotionLabel::EMOTIONS {
        for i in 0..cfg.clips_per_emotion {
            clips.push(gen_clip(cfg, registry, &mixing[e.index()], &clip_id(e, i), e)?);
        }
    }
    Ok(SynthCorpus {
        config: cfg.clone(),
        registry: registry.clone(),
        mixing,
        clips,
    })
}

/// Writes `manifest.json`, `registry.json`, `synth.json` and per-clip
/// `clips/<id>.csv` / `.wav` under `dir`.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<ClipManifest> {
    let clip_dir = dir.join("clips");
    std::fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    corpus.registry.save(&dir.join("registry.json"))?;
    let meta = dir.join("synth.json");
    std::fs::write(&meta, serde_json::to_string_pretty(&corpus.config)? + "\n").map_err(|e| Error::io(&meta, e))?;
    let mut entries = Vec::new();
    for c in &corpus.clips {
        let csv = format!("clips/{}.csv", c.clip_id);
        let wav = format!("clips/{}.wav", c.clip_id);
        save_rig_curves(&c.rigs, &corpus.registry, &dir.join(&csv))?;
        write_wav(&c.audio, &dir.join(&wav))?;
        entries.push(ClipEntry {
            clip_id: c.clip_id.clone(),
            rig_csv: csv,
            wav,
            emotion: c.emotion,
        });
    }
    let manifest = ClipManifest {
        registry: "registry.json".into(),
        clips: entries,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Uniform `[-1, 1]` rig windows smoothed by a 3-frame moving average,
/// labelled `random`.
pub fn gen_random_windows(count: usize, rigs: usize, frames: usize, seed: u64) -> Result<Vec<RigWindow>> {
    if count == 0 {
        return Err(Error::Config("random window count must be ≥ 1".into()));
    }
    let mut rng = stream_rng(seed, "random-windows");
    Ok((0..count)
        .map(|i| {
            let raw = Tensor::from_fn(rigs, frames + 2, |_, _| rng.gen_range(-1.0..=1.0));
            let values = Tensor::from_fn(rigs, frames, |r, t| {
                (raw.at(r, t) + raw.at(r, t + 1) + raw.at(r, t + 2)) / 3.0
            });
            RigWindow {
                values,
                source_clip: format!("random_{i:05}"),
                start_frame: 0,
                label: EmotionLabel::Random,
            }
        })
        .collect())
}

/// Uncentered rig second-moment matrix `Y Yᵀ / T`.
pub fn second_moment(y: &Tensor) -> Tensor {
    let mut m = gram(y);
    m.scale_assign(1.0 / y.cols() as f64);
    m
}

/// Relative Frobenius error of `m` against the best scalar multiple of
/// `target`.
pub fn scaled_relative_error(m: &Tensor, target: &Tensor) -> f64 {
    let dot: f64 = m.data().iter().zip(target.data()).map(|(a, b)| a * b).sum();
    let s = dot / target.data().iter().map(|v| v * v).sum::<f64>();
    let mut diff = m.clone();
    for (d, t) in diff.data_mut().iter_mut().zip(target.data()) {
        *d -= s * t;
    }
    frobenius(&diff) / (s.abs() * frobenius(target))
}

/// Pearson correlation matrix of rows, pooled over all windows' frames.
pub fn pooled_correlation(windows: &[Tensor]) -> Tensor {
    let r = windows[0].rows();
    let n: usize = windows.iter().map(|w| w.cols()).sum();
    let mut mean = vec![0.0; r];
    for w in windows {
        for i in 0..r {
            mean[i] += w.row(i).iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Tensor::zeros(&[r, r]);
    for w in windows {
        let centered = Tensor::from_fn(r, w.cols(), |i, t| w.at(i, t) - mean[i]);
        cov.add_assign(&gram(&centered));
    }
    let sd: Vec<f64> = (0..r).map(|i| cov.at(i, i).sqrt()).collect();
    Tensor::from_fn(r, r, |i, j| cov.at(i, j) / (sd[i] * sd[j]))
}
