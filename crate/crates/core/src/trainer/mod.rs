//! Two-stage training (correlation classifier, then generator under
//! correlation supervision), corpora, metrics and checkpoints.

mod checkpoint;
mod correlation;
mod generation;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Model, ModelCheckpoint, RngState};
pub use correlation::{evaluate_correlation, train_correlation, CorrEval};
pub use generation::{evaluate_generation, generate_validation, train_generation, GenEval, GeneratedWindow};

use crate::audiofeat::{load_wav, AudioSignal};
use crate::emotion::EmotionLabel;
use crate::error::{Error, Result};
use crate::rigmodel::{load_rig_curves, window_count, ClipManifest, RigCurveSequence, RigRegistry};
use crate::synthgen::{stream_rng, SynthCorpus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Correlation,
    Generation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoCorrSupervision,
    LogitsOutput,
    MfccEncoder,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_corr_supervision" => Ok(Ablation::NoCorrSupervision),
            "logits_output" => Ok(Ablation::LogitsOutput),
            "mfcc_encoder" => Ok(Ablation::MfccEncoder),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub ablations: Vec<Ablation>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    /// Windows drawn per training clip each epoch; `None` uses all.
    pub windows_per_clip: Option<usize>,
    pub val_windows_per_clip: usize,
    /// Weight on L_C.
    pub lambda_c: f64,
    pub max_steps: Option<usize>,
    /// Correlation stage: stop once validation accuracy reaches this.
    pub stop_at_val_accuracy: Option<f64>,
}

impl TrainConfig {
    pub fn correlation() -> Self {
        TrainConfig {
            stage: Stage::Correlation,
            batch: 64,
            lr: 1e-5,
            epochs: 100,
            seed: 7,
            ablations: Vec::new(),
            patience: 10,
            val_fraction: 0.2,
            windows_per_clip: Some(2),
            val_windows_per_clip: 2,
            lambda_c: 1.0,
            max_steps: None,
            stop_at_val_accuracy: None,
        }
    }

    pub fn generation() -> Self {
        TrainConfig {
            stage: Stage::Generation,
            lr: 1e-6,
            ..TrainConfig::correlation()
        }
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if self.windows_per_clip == Some(0) || self.val_windows_per_clip == 0 {
            return Err(Error::Config("window counts per clip must be ≥ 1".into()));
        }
        if !(self.lambda_c >= 0.0) {
            return Err(Error::Config("lambda_c must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// One clip held in memory for training.
#[derive(Clone, Debug)]
pub struct CorpusClip {
    pub clip_id: String,
    pub emotion: EmotionLabel,
    pub rigs: RigCurveSequence,
    pub audio: AudioSignal,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub registry: RigRegistry,
    pub clips: Vec<CorpusClip>,
}

impl Corpus {
    pub fn from_synth(s: &SynthCorpus) -> Self {
        Corpus {
            registry: s.registry.clone(),
            clips: s
                .clips
                .iter()
                .map(|c| CorpusClip {
                    clip_id: c.clip_id.clone(),
                    emotion: c.emotion,
                    rigs: c.rigs.clone(),
                    audio: c.audio.clone(),
                })
                .collect(),
        }
    }

    /// Loads every clip listed in a manifest; paths are relative to it.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = ClipManifest::load(manifest_path)?;
        let base = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let registry = RigRegistry::load(&base.join(&manifest.registry))?;
        let clips = manifest
            .clips
            .iter()
            .map(|e| {
                Ok(CorpusClip {
                    clip_id: e.clip_id.clone(),
                    emotion: e.emotion,
                    rigs: load_rig_curves(&base.join(&e.rig_csv), &registry)?,
                    audio: load_wav(&base.join(&e.wav))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { registry, clips })
    }

    pub fn subset(&self, idx: &[usize]) -> Corpus {
        Corpus {
            registry: self.registry.clone(),
            clips: idx.iter().map(|&i| self.clips[i].clone()).collect(),
        }
    }
}

/// Stratified train/validation split by clip, deterministic per seed.
/// Returns (train, validation) clip indices in corpus order.
pub fn split_clips(corpus: &Corpus, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = stream_rng(seed, "split");
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for e in EmotionLabel::EMOTIONS {
        let mut idx: Vec<usize> = (0..corpus.clips.len())
            .filter(|&i| corpus.clips[i].emotion == e)
            .collect();
        idx.shuffle(&mut rng);
        let n_val = (idx.len() as f64 * val_fraction).round() as usize;
        let n_val = if val_fraction > 0.0 && idx.len() > 1 {
            n_val.max(1)
        } else {
            n_val
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Errors unless every emotion is present and per-emotion clip counts are
/// within 10% of each other.
pub fn check_balance(corpus: &Corpus, idx: &[usize]) -> Result<()> {
    let mut counts = [0usize; 5];
    for &i in idx {
        let e = corpus.clips[i].emotion;
        if e.is_random() {
            return Err(Error::Data(format!(
                "clip {} is labelled random",
                corpus.clips[i].clip_id
            )));
        }
        counts[e.index()] += 1;
    }
    let (lo, hi) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
    if lo == 0 || (hi - lo) as f64 > 0.1 * hi as f64 {
        return Err(Error::Data(format!(
            "emotion classes are imbalanced: clip counts {counts:?}"
        )));
    }
    Ok(())
}

/// Rig-window count per clip.
pub(crate) fn rig_window_counts(corpus: &Corpus, frames: usize, stride: usize) -> Vec<usize> {
    corpus
        .clips
        .iter()
        .map(|c| window_count(c.rigs.frames(), frames, stride))
        .collect()
}

/// (clip index, window index) pairs for one epoch.
pub(crate) fn epoch_windows(
    counts: &[usize],
    idx: &[usize],
    per_clip: Option<usize>,
    rng: &mut impl Rng,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &c in idx {
        let n = counts[c];
        match per_clip {
            Some(m) if m < n => {
                let mut picks = rand::seq::index::sample(rng, n, m).into_vec();
                picks.sort_unstable();
                out.extend(picks.into_iter().map(|k| (c, k)));
            }
            _ => out.extend((0..n).map(|k| (c, k))),
        }
    }
    out
}

/// Evenly spaced window indices, fixed across epochs.
pub(crate) fn eval_windows(counts: &[usize], idx: &[usize], per_clip: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &c in idx {
        let n = counts[c];
        if n == 0 {
            continue;
        }
        let m = per_clip.min(n);
        if m == 1 {
            out.push((c, n / 2));
        } else {
            out.extend((0..m).map(|j| (c, (j * (n - 1) + (m - 1) / 2) / (m - 1))));
        }
    }
    out.dedup();
    out
}

/// A seed for a named sub-stream.
pub(crate) fn derive_seed(seed: u64, stream: &str) -> u64 {
    stream_rng(seed, stream).gen()
}

/// Sums per-sample gradients in order and scales by `1/n`.
pub(crate) fn mean_grads(parts: Vec<crate::numcore::Grads>) -> crate::numcore::Grads {
    let n = parts.len() as f64;
    let mut acc = crate::numcore::Grads::default();
    for g in &parts {
        acc.add_scaled(g, 1.0 / n);
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Step,
    Epoch,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub kind: RecordKind,
    pub epoch: usize,
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(rename = "L_R", default, skip_serializing_if = "Option::is_none")]
    pub l_r: Option<f64>,
    #[serde(rename = "L_C", default, skip_serializing_if = "Option::is_none")]
    pub l_c: Option<f64>,
    #[serde(rename = "L_G", default, skip_serializing_if = "Option::is_none")]
    pub l_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_random_accuracy: Option<f64>,
    #[serde(rename = "val_L_R", default, skip_serializing_if = "Option::is_none")]
    pub val_l_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_match: Option<f64>,
}

impl MetricRecord {
    pub fn new(kind: RecordKind, epoch: usize, step: usize) -> Self {
        MetricRecord {
            kind,
            epoch,
            step,
            loss: None,
            l_r: None,
            l_c: None,
            l_g: None,
            accuracy: None,
            val_loss: None,
            val_accuracy: None,
            val_random_accuracy: None,
            val_l_r: None,
            val_match: None,
        }
    }
}

/// Receives metric records as training proceeds.
pub trait MetricsSink {
    fn record(&mut self, r: &MetricRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricRecord> {
    fn record(&mut self, r: &MetricRecord) -> Result<()> {
        self.push(r.clone());
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonlSink<W: Write> {
    out: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        JsonlSink { out }
    }
}

impl<W: Write> MetricsSink for JsonlSink<W> {
    fn record(&mut self, r: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io(Path::new("<metrics>"), e))
    }
}

pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &MetricRecord) -> Result<()> {
        Ok(())
    }
}

pub fn write_metrics_jsonl(records: &[MetricRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut sink = JsonlSink::new(std::io::BufWriter::new(f));
    for r in records {
        sink.record(r)?;
    }
    sink.out.flush().map_err(|e| Error::io(path, e))
}
