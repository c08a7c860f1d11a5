//! Speech-to-rig generator: frame encoder over audio features, dilated TCN
//! decoder with per-layer emotion fusion, and a tanh rig head.
//!
//! Internally activations are channels × frames.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audiofeat::{align_to_frames, AudioSignal, Mfcc, MfccConfig, PairingConfig};
use crate::emotion::EmotionLabel;
use crate::error::{Error, Result};
use crate::numcore::{mse_velocity_terms, Binder, Graph, ParamSet, Tensor, Var};
use crate::rigmodel::{RigCurveSequence, DEFAULT_FRAME_RATE, DEFAULT_RIG_COUNT, WINDOW_FRAMES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Frozen dilated conv stack over MFCC frames.
    MfccTcn,
    /// Trainable per-frame linear projection of the input features. Used for
    /// imported features and for the raw-MFCC ablation.
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub rigs: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub channels: usize,
    pub kernel: usize,
    pub encoder: EncoderKind,
    pub encoder_dilations: Vec<usize>,
    pub dilations: Vec<usize>,
    pub emotion_dim: usize,
    pub mfcc: MfccConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        let mfcc = MfccConfig::default();
        GenConfig {
            rigs: DEFAULT_RIG_COUNT,
            frames: WINDOW_FRAMES,
            feature_dim: mfcc.dim(),
            channels: 128,
            kernel: 3,
            encoder: EncoderKind::MfccTcn,
            encoder_dilations: vec![1, 2],
            dilations: vec![1, 2, 4, 8, 16, 32],
            emotion_dim: 64,
            mfcc,
        }
    }
}

impl GenConfig {
    /// Frames of latent input that can reach one decoder output frame.
    pub fn receptive_field(&self) -> usize {
        self.dilations.iter().map(|d| (self.kernel - 1) * d).sum::<usize>() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.dilations.is_empty() || self.dilations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "decoder dilations must be non-empty and strictly increasing, got {:?}",
                self.dilations
            )));
        }
        if self.dilations.contains(&0) || self.encoder_dilations.contains(&0) {
            return Err(Error::Config("dilations must be ≥ 1".into()));
        }
        if [
            self.rigs,
            self.frames,
            self.feature_dim,
            self.channels,
            self.emotion_dim,
        ]
        .contains(&0)
        {
            return Err(Error::Config("generator sizes must be positive".into()));
        }
        if self.encoder == EncoderKind::MfccTcn && self.encoder_dilations.is_empty() {
            return Err(Error::Config("TCN encoder needs at least one layer".into()));
        }
        Ok(())
    }

    /// Whether a parameter belongs to the encoder TCN, which never trains.
    pub fn is_frozen(name: &str) -> bool {
        name.starts_with("gen.enc.tcn")
    }
}

/// Per-dimension feature standardization fitted on training windows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        FeatureNorm {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Statistics over every frame of `windows` (each F×D), rounded to f32
    /// so checkpoints reproduce them exactly.
    pub fn fit<'a>(windows: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for w in windows {
            if sum.is_empty() {
                sum = vec![0.0; w.cols()];
                sq = vec![0.0; w.cols()];
            }
            for r in 0..w.rows() {
                for (j, &v) in w.row(r).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += w.rows();
        }
        if n == 0 {
            return Err(Error::Data("no feature frames to normalize".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n as f64 - m * m).max(0.0).sqrt().max(1e-6) as f32) as f64)
            .collect();
        let mean = mean.iter().map(|&m| (m as f32) as f64).collect();
        Ok(FeatureNorm { mean, std })
    }

    /// Standardizes a T×D window and returns it as D×T.
    pub fn apply_transposed(&self, x: &Tensor) -> Tensor {
        Tensor::from_fn(x.cols(), x.rows(), |j, t| (x.at(t, j) - self.mean[j]) / self.std[j])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenNet {
    pub config: GenConfig,
    pub params: ParamSet,
    pub norm: FeatureNorm,
}

/// Parameter lookup that sends encoder-TCN names to a frozen binder.
pub struct GenBinding<'a, 'g, 'p> {
    pub train: &'a Binder<'g, 'p>,
    pub frozen: &'a Binder<'g, 'p>,
}

impl<'g> GenBinding<'_, 'g, '_> {
    fn get(&self, name: &str) -> Result<Var<'g>> {
        if GenConfig::is_frozen(name) {
            self.frozen.get(name)
        } else {
            self.train.get(name)
        }
    }
}

pub struct GenVars<'g> {
    /// C×T
    pub latent: Var<'g>,
    /// R×T, in (−1, 1)
    pub output: Var<'g>,
}

fn generation_index(emotion: EmotionLabel) -> Result<usize> {
    if emotion.is_random() {
        return Err(Error::Domain("the random class is not a generation target".into()));
    }
    Ok(emotion.index())
}

/// Encoder half of the graph. `x` is the standardized D×T input.
pub fn encoder_graph<'g>(cfg: &GenConfig, b: &GenBinding<'_, 'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
    match cfg.encoder {
        EncoderKind::MfccTcn => {
            let mut h = x;
            for (i, &d) in cfg.encoder_dilations.iter().enumerate() {
                h = h
                    .dilated_conv1d(b.get(&format!("gen.enc.tcn{i}.w"))?, d)?
                    .add_col_bias(b.get(&format!("gen.enc.tcn{i}.b"))?)?
                    .relu();
            }
            Ok(h)
        }
        EncoderKind::Precomputed => b
            .get("gen.enc.proj.w")?
            .matmul(x)?
            .add_col_bias(b.get("gen.enc.proj.b")?),
    }
}

/// Decoder half: `latent` is C×T, output R×T.
pub fn decoder_graph<'g>(
    cfg: &GenConfig,
    b: &GenBinding<'_, 'g, '_>,
    latent: Var<'g>,
    emotion: EmotionLabel,
) -> Result<Var<'g>> {
    let e = b.get("gen.emb")?.select_row(generation_index(emotion)?)?;
    let mut h = latent;
    for (l, &d) in cfg.dilations.iter().enumerate() {
        let fused = e.matmul_nt(b.get(&format!("gen.dec{l}.p"))?)?;
        let inp = h.add_col_bias(fused)?;
        let y = inp
            .dilated_conv1d(b.get(&format!("gen.dec{l}.w"))?, d)?
            .add_col_bias(b.get(&format!("gen.dec{l}.b"))?)?
            .relu();
        h = inp.add(y)?;
    }
    Ok(b.get("gen.out.w")?.matmul(h)?.add_col_bias(b.get("gen.out.b")?)?.tanh())
}

pub fn gen_graph<'g>(
    cfg: &GenConfig,
    b: &GenBinding<'_, 'g, '_>,
    x: Var<'g>,
    emotion: EmotionLabel,
) -> Result<GenVars<'g>> {
    let latent = encoder_graph(cfg, b, x)?;
    let output = decoder_graph(cfg, b, latent, emotion)?;
    Ok(GenVars { latent, output })
}

impl GenNet {
    pub fn init(config: GenConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, k, e) = (config.channels, config.kernel, config.emotion_dim);
        let mut p = ParamSet::new();
        match config.encoder {
            EncoderKind::MfccTcn => {
                let mut c_in = config.feature_dim;
                for i in 0..config.encoder_dilations.len() {
                    p.insert_uniform(format!("gen.enc.tcn{i}.w"), &[c, c_in, k], c_in * k, &mut rng);
                    p.insert_zeros(format!("gen.enc.tcn{i}.b"), &[c, 1]);
                    c_in = c;
                }
            }
            EncoderKind::Precomputed => {
                p.insert_uniform("gen.enc.proj.w", &[c, config.feature_dim], config.feature_dim, &mut rng);
                p.insert_zeros("gen.enc.proj.b", &[c, 1]);
            }
        }
        p.insert_uniform("gen.emb", &[EmotionLabel::EMOTIONS.len(), e], 1, &mut rng);
        for l in 0..config.dilations.len() {
            p.insert_uniform(format!("gen.dec{l}.w"), &[c, c, k], c * k, &mut rng);
            p.insert_zeros(format!("gen.dec{l}.b"), &[c, 1]);
            p.insert_uniform(format!("gen.dec{l}.p"), &[c, e], e, &mut rng);
        }
        // Small head so initial curves sit near the rest pose.
        p.insert_uniform("gen.out.w", &[config.rigs, c], 100 * c, &mut rng);
        p.insert_zeros("gen.out.b", &[config.rigs, 1]);
        let norm = FeatureNorm::identity(config.feature_dim);
        Ok(GenNet {
            config,
            params: p.round_to_f32(),
            norm,
        })
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| GenConfig::is_frozen(n))
            .map(str::to_string)
            .collect()
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        let c = &self.config;
        if features.shape() != [c.frames, c.feature_dim] {
            return Err(Error::Shape(format!(
                "generator input must be {}×{}, got {:?}",
                c.frames,
                c.feature_dim,
                features.shape()
            )));
        }
        Ok(())
    }

    /// Latent of a T×D feature window, returned as T×C.
    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        self.check_features(features)?;
        let g = Graph::new();
        let b = Binder::frozen(&g, &self.params);
        let gb = GenBinding { train: &b, frozen: &b };
        let x = g.constant(self.norm.apply_transposed(features));
        Ok(encoder_graph(&self.config, &gb, x)?.value().transpose())
    }

    /// Rig curves (R×T) for a T×C latent.
    pub fn decode(&self, latent: &Tensor, emotion: EmotionLabel) -> Result<Tensor> {
        let c = &self.config;
        if latent.shape() != [c.frames, c.channels] {
            return Err(Error::Shape(format!(
                "latent must be {}×{}, got {:?}",
                c.frames,
                c.channels,
                latent.shape()
            )));
        }
        let g = Graph::new();
        let b = Binder::frozen(&g, &self.params);
        let gb = GenBinding { train: &b, frozen: &b };
        let h = g.constant(latent.transpose());
        Ok((*decoder_graph(c, &gb, h, emotion)?.value()).clone())
    }

    /// Rig curves (R×T) for a T×D feature window.
    pub fn generate(&self, features: &Tensor, emotion: EmotionLabel) -> Result<Tensor> {
        self.check_features(features)?;
        generation_index(emotion)?;
        let g = Graph::new();
        let b = Binder::frozen(&g, &self.params);
        let gb = GenBinding { train: &b, frozen: &b };
        let x = g.constant(self.norm.apply_transposed(features));
        Ok((*gen_graph(&self.config, &gb, x, emotion)?.output.value()).clone())
    }

    /// Whole-clip inference: overlapping windows decoded independently and
    /// cross-faded. Output has `floor(30·len/16000)` frames.
    pub fn infer_clip(
        &self,
        audio: &AudioSignal,
        emotion: EmotionLabel,
        registry_hash: u64,
    ) -> Result<RigCurveSequence> {
        generation_index(emotion)?;
        let mfcc = Mfcc::new(self.config.mfcc.clone(), audio.sample_rate())?;
        let frames = self.config.frames;
        self.stitch(audio, registry_hash, |slice| {
            let f = align_to_frames(&mfcc.compute(slice.samples())?, frames)?;
            self.generate(&f.values, emotion)
        })
    }

    /// Stitching with a caller-supplied window model (audio slice → R×W).
    pub fn stitch(
        &self,
        audio: &AudioSignal,
        registry_hash: u64,
        mut window_model: impl FnMut(&AudioSignal) -> Result<Tensor>,
    ) -> Result<RigCurveSequence> {
        let fps = DEFAULT_FRAME_RATE;
        let sr = audio.sample_rate();
        let w = self.config.frames;
        let pairing = PairingConfig {
            window_frames: w,
            ..PairingConfig::default()
        };
        let w_samples = pairing.window_samples(fps, sr);
        if audio.len() < w_samples {
            return Err(Error::Size(format!(
                "clip of {} samples is shorter than one {w_samples}-sample window",
                audio.len()
            )));
        }
        let total = ((audio.len() as u64 * fps as u64) / sr as u64) as usize;
        let starts = window_starts(total, w, pairing.stride_frames);
        let weights = blend_weights(total, &starts, w);
        let r = self.config.rigs;
        let mut out = Tensor::zeros(&[r, total]);
        for &s in &starts {
            let a0 = (s * sr as usize).div_ceil(fps as usize);
            let y = window_model(&audio.slice(a0, w_samples))?;
            if y.shape() != [r, w] {
                return Err(Error::Shape(format!(
                    "window model returned {:?}, expected {r}×{w}",
                    y.shape()
                )));
            }
            for rig in 0..r {
                for f in 0..w {
                    let t = s + f;
                    let v = out.at(rig, t) + triangle(f, w) / weights[t] * y.at(rig, f);
                    out.set(rig, t, v);
                }
            }
        }
        RigCurveSequence::new(out, fps, registry_hash)
    }
}

/// Window start frames covering `total` frames: every `stride` frames, plus
/// a final window flush with the end when the grid leaves a tail.
pub fn window_starts(total: usize, window: usize, stride: usize) -> Vec<usize> {
    if total < window {
        return Vec::new();
    }
    let mut s: Vec<usize> = (0..=(total - window) / stride).map(|k| k * stride).collect();
    if *s.last().unwrap() + window < total {
        s.push(total - window);
    }
    s
}

fn triangle(f: usize, window: usize) -> f64 {
    (f + 1).min(window - f) as f64
}

/// Per-frame sum of the raw cross-fade weights; dividing by it makes the
/// weights at each frame sum to one.
pub fn blend_weights(total: usize, starts: &[usize], window: usize) -> Vec<f64> {
    let mut acc = vec![0.0; total];
    for &s in starts {
        for f in 0..window {
            acc[s + f] += triangle(f, window);
        }
    }
    acc
}

/// Normalized weight of window `f`-th frame at each covered output frame,
/// as (window index, frame, weight) triples.
pub fn normalized_weights(total: usize, starts: &[usize], window: usize) -> Vec<Vec<(usize, f64)>> {
    let acc = blend_weights(total, starts, window);
    let mut per_frame = vec![Vec::new(); total];
    for (i, &s) in starts.iter().enumerate() {
        for f in 0..window {
            per_frame[s + f].push((i, triangle(f, window) / acc[s + f]));
        }
    }
    per_frame
}

/// Reconstruction loss between T×R predictions and targets.
pub fn loss_lr(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let (p, v) = mse_velocity_terms(pred, target)?;
    Ok(p + v)
}
