//! Audio ingestion, MFCC features, frame alignment and audio/rig window
//! pairing.

mod mfcc;
mod signal;
#[cfg(test)]
mod tests;

use std::path::Path;

pub use mfcc::{deltas, hz_to_mel, mel_to_hz, mfcc, AudioFeatureSequence, Mfcc, MfccConfig};
pub use signal::{load_wav, resample_linear, write_wav, AudioSignal, SAMPLE_RATE};

use crate::container::Container;
use crate::emotion::EmotionLabel;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rigmodel::{slide_windows, window_count, RigCurveSequence, RigWindow, WINDOW_FRAMES, WINDOW_STRIDE_FRAMES};

/// Resamples the frame axis to `target` frames by linear interpolation.
/// Endpoints are kept exactly and no value leaves the span of its two
/// neighbours.
pub fn align_to_frames(features: &AudioFeatureSequence, target: usize) -> Result<AudioFeatureSequence> {
    let f = features.frames();
    if f < 2 {
        return Err(Error::Size(format!("need at least 2 feature frames, got {f}")));
    }
    if target < 2 {
        return Err(Error::Size(format!("target must be at least 2 frames, got {target}")));
    }
    let d = features.dim();
    let src = features.values.data();
    let mut out = Tensor::zeros(&[target, d]);
    let den = target - 1;
    for j in 0..target {
        let num = j * (f - 1);
        let (i0, rem) = (num / den, num % den);
        let row = &mut out.data_mut()[j * d..(j + 1) * d];
        if rem == 0 {
            row.copy_from_slice(&src[i0 * d..(i0 + 1) * d]);
            continue;
        }
        let frac = rem as f64 / den as f64;
        for c in 0..d {
            let (a, b) = (src[i0 * d + c], src[(i0 + 1) * d + c]);
            row[c] = (a + frac * (b - a)).clamp(a.min(b), a.max(b));
        }
    }
    AudioFeatureSequence::new(out, features.hop)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairingConfig {
    pub window_frames: usize,
    pub stride_frames: usize,
    pub mfcc: MfccConfig,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            window_frames: WINDOW_FRAMES,
            stride_frames: WINDOW_STRIDE_FRAMES,
            mfcc: MfccConfig::default(),
        }
    }
}

impl PairingConfig {
    pub fn window_samples(&self, frame_rate: f64, sample_rate: u32) -> usize {
        (self.window_frames as f64 * sample_rate as f64 / frame_rate).round() as usize
    }

    /// First sample of audio window `k`: the rig window's start time rounded
    /// up to the next sample.
    pub fn audio_start(&self, k: usize, frame_rate: f64, sample_rate: u32) -> usize {
        let frames = k * self.stride_frames;
        if frame_rate.fract() == 0.0 {
            let fps = frame_rate as usize;
            (frames * sample_rate as usize).div_ceil(fps)
        } else {
            (frames as f64 * sample_rate as f64 / frame_rate).ceil() as usize
        }
    }

    /// Number of whole audio windows in `len` samples.
    pub fn audio_window_count(&self, len: usize, frame_rate: f64, sample_rate: u32) -> usize {
        let w = self.window_samples(frame_rate, sample_rate);
        let mut k = 0;
        while self.audio_start(k, frame_rate, sample_rate) + w <= len {
            k += 1;
        }
        k
    }
}

#[derive(Clone, Debug)]
pub struct PairedWindow {
    pub audio: AudioSignal,
    pub audio_start: usize,
    pub rig: RigWindow,
    pub features: AudioFeatureSequence,
}

/// Cuts matching audio and rig windows from one clip and computes each
/// window's aligned MFCC features.
pub fn pair_windows(
    signal: &AudioSignal,
    seq: &RigCurveSequence,
    clip_id: &str,
    label: EmotionLabel,
    cfg: &PairingConfig,
) -> Result<Vec<PairedWindow>> {
    let extractor = Mfcc::new(cfg.mfcc.clone(), signal.sample_rate())?;
    pair_windows_with(signal, seq, clip_id, label, cfg, |audio, _| {
        let raw = extractor.compute(audio.samples())?;
        align_to_frames(&raw, cfg.window_frames)
    })
}

/// Like [`pair_windows`] but with caller-supplied features per window; the
/// closure receives the audio slice and its start sample.
pub fn pair_windows_with(
    signal: &AudioSignal,
    seq: &RigCurveSequence,
    clip_id: &str,
    label: EmotionLabel,
    cfg: &PairingConfig,
    mut features: impl FnMut(&AudioSignal, usize) -> Result<AudioFeatureSequence>,
) -> Result<Vec<PairedWindow>> {
    let fps = seq.frame_rate();
    let sr = signal.sample_rate();
    let audio_n = cfg.audio_window_count(signal.len(), fps, sr);
    let rig_n = window_count(seq.frames(), cfg.window_frames, cfg.stride_frames);
    if audio_n.abs_diff(rig_n) > 1 {
        return Err(Error::Alignment(format!(
            "clip {clip_id}: audio yields {audio_n} windows but rig curves yield {rig_n}"
        )));
    }
    let n = audio_n.min(rig_n);
    let w = cfg.window_samples(fps, sr);
    let rigs = slide_windows(seq, cfg.window_frames, cfg.stride_frames, clip_id, label)?;
    rigs.into_iter()
        .take(n)
        .enumerate()
        .map(|(k, rig)| {
            let start = cfg.audio_start(k, fps, sr);
            let audio = signal.slice(start, w);
            let features = features(&audio, start)?;
            Ok(PairedWindow {
                audio,
                audio_start: start,
                rig,
                features,
            })
        })
        .collect()
}

/// Frames of a clip-level feature matrix covering samples
/// `[start, start + len)`, aligned to `target` frames.
pub fn window_features(
    clip: &AudioFeatureSequence,
    start: usize,
    len: usize,
    target: usize,
) -> Result<AudioFeatureSequence> {
    let hop = clip.hop.max(1);
    let first = start.div_ceil(hop).min(clip.frames() - 1);
    let last = ((start + len) / hop).clamp(first + 1, clip.frames());
    if last - first < 2 {
        return Err(Error::Size(format!(
            "imported features cover only {} frames of window at sample {start}",
            last - first
        )));
    }
    let d = clip.dim();
    let vals = Tensor::new(vec![last - first, d], clip.values.data()[first * d..last * d].to_vec())?;
    align_to_frames(&AudioFeatureSequence::new(vals, hop)?, target)
}

/// Writes an F×D feature matrix as a single-array container.
pub fn save_feature_file(features: &AudioFeatureSequence, path: &Path) -> Result<()> {
    let mut c = Container::new(serde_json::json!({"kind": "features", "hop": features.hop}));
    c.push("features", &features.values);
    c.save(path)
}

pub fn load_feature_file(path: &Path) -> Result<AudioFeatureSequence> {
    let c = Container::load(path)?;
    let hop = c
        .header
        .get("hop")
        .and_then(|h| h.as_u64())
        .ok_or_else(|| Error::Schema(format!("{}: feature file header lacks hop", path.display())))?
        as usize;
    let values = match c.arrays.as_slice() {
        [(_, t)] if t.shape().len() == 2 => t.clone(),
        _ => {
            return Err(Error::Schema(format!(
                "{}: feature file must hold exactly one F×D array",
                path.display()
            )))
        }
    };
    AudioFeatureSequence::new(values, hop)
}
