//! Correlation transformer: rig-axis encoder whose layer-summed,
//! head-averaged attention scores form an `R×R` correlation feature that a
//! two-layer head classifies into emotions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::emotion::EmotionLabel;
use crate::error::{Error, Result};
use crate::numcore::{attention, Binder, Graph, ParamSet, Tensor, Var};
use crate::rigmodel::WINDOW_FRAMES;

/// Which attention quantity becomes the correlation feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Scaled `QKᵀ/√d` before softmax.
    PreSoftmax,
    /// Row-softmax of the scaled scores.
    PostSoftmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerReduce {
    Sum,
    Mean,
}

/// What the classifier head reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrHead {
    /// The flattened correlation feature.
    Scores,
    /// Token-mean of the last encoder layer's output (the logits ablation).
    Logits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrConfig {
    pub rigs: usize,
    pub frames: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ff_hidden: usize,
    pub classifier_hidden: usize,
    pub classes: usize,
    pub score: ScoreKind,
    pub layer_reduce: LayerReduce,
    pub head: CorrHead,
}

impl Default for CorrConfig {
    fn default() -> Self {
        CorrConfig {
            rigs: crate::rigmodel::DEFAULT_RIG_COUNT,
            frames: WINDOW_FRAMES,
            layers: 4,
            heads: 4,
            d_model: 64,
            ff_hidden: 128,
            classifier_hidden: 128,
            classes: EmotionLabel::ALL.len(),
            score: ScoreKind::PreSoftmax,
            layer_reduce: LayerReduce::Sum,
            head: CorrHead::Scores,
        }
    }
}

impl CorrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need ≥ 2 classes, got {}", self.classes)));
        }
        if self.layers == 0 || self.rigs == 0 || self.frames == 0 {
            return Err(Error::Config("layers, rigs and frames must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// `R×R` matrix of layer-reduced, head-averaged attention scores.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationFeature {
    pub matrix: Tensor,
}

impl CorrelationFeature {
    pub fn rigs(&self) -> usize {
        self.matrix.rows()
    }

    pub fn distance(&self, other: &CorrelationFeature) -> f64 {
        self.matrix
            .data()
            .iter()
            .zip(other.matrix.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Correlation network parameters plus config.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrNet {
    pub config: CorrConfig,
    pub params: ParamSet,
    pub trained: bool,
}

/// Graph handles produced by one forward pass.
pub struct CorrVars<'g> {
    pub logits: Var<'g>,
    pub feature: Var<'g>,
}

impl CorrNet {
    pub fn init(config: CorrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let (d, dh, t) = (config.d_model, config.head_dim(), config.frames);
        p.insert_uniform("corr.in.w", &[t, d], t, &mut rng);
        p.insert_zeros("corr.in.b", &[1, d]);
        for l in 0..config.layers {
            let pre = format!("corr.l{l}");
            p.insert(format!("{pre}.ln1.g"), Tensor::filled(&[1, d], 1.0));
            p.insert_zeros(format!("{pre}.ln1.b"), &[1, d]);
            for h in 0..config.heads {
                for m in ["q", "k", "v"] {
                    p.insert_uniform(format!("{pre}.h{h}.w{m}"), &[d, dh], d, &mut rng);
                    p.insert_zeros(format!("{pre}.h{h}.b{m}"), &[1, dh]);
                }
                p.insert_uniform(format!("{pre}.h{h}.wo"), &[dh, d], d, &mut rng);
            }
            p.insert_zeros(format!("{pre}.bo"), &[1, d]);
            p.insert(format!("{pre}.ln2.g"), Tensor::filled(&[1, d], 1.0));
            p.insert_zeros(format!("{pre}.ln2.b"), &[1, d]);
            p.insert_uniform(format!("{pre}.ff1.w"), &[d, config.ff_hidden], d, &mut rng);
            p.insert_zeros(format!("{pre}.ff1.b"), &[1, config.ff_hidden]);
            p.insert_uniform(
                format!("{pre}.ff2.w"),
                &[config.ff_hidden, d],
                config.ff_hidden,
                &mut rng,
            );
            p.insert_zeros(format!("{pre}.ff2.b"), &[1, d]);
        }
        let flat = match config.head {
            CorrHead::Scores => config.rigs * config.rigs,
            CorrHead::Logits => d,
        };
        let hidden = config.classifier_hidden;
        p.insert_uniform("corr.cls1.w", &[flat, hidden], flat, &mut rng);
        p.insert_zeros("corr.cls1.b", &[1, hidden]);
        p.insert_uniform("corr.cls2.w", &[hidden, config.classes], hidden, &mut rng);
        p.insert_zeros("corr.cls2.b", &[1, config.classes]);
        Ok(CorrNet {
            config,
            params: p.round_to_f32(),
            trained: false,
        })
    }

    fn check_window(&self, window: &Tensor) -> Result<()> {
        let c = &self.config;
        if window.shape() != [c.rigs, c.frames] {
            return Err(Error::Shape(format!(
                "correlation input must be {}×{}, got {:?}",
                c.rigs,
                c.frames,
                window.shape()
            )));
        }
        Ok(())
    }

    fn require_trained(&self) -> Result<()> {
        if !self.trained {
            return Err(Error::State("correlation model has not been trained".into()));
        }
        Ok(())
    }

    /// Logits and correlation feature of one `R×frames` window.
    pub fn forward(&self, window: &Tensor) -> Result<(Vec<f64>, CorrelationFeature)> {
        self.check_window(window)?;
        let g = Graph::new();
        let b = Binder::frozen(&g, &self.params);
        let x = g.constant(window.clone());
        let out = corr_graph(&self.config, &b, x)?;
        g.check_finite()?;
        let logits = out.logits.value().data().to_vec();
        let feature = CorrelationFeature {
            matrix: (*out.feature.value()).clone(),
        };
        Ok((logits, feature))
    }

    pub fn predict_emotion(&self, window: &Tensor) -> Result<EmotionLabel> {
        self.require_trained()?;
        let (logits, _) = self.forward(window)?;
        EmotionLabel::from_index(argmax(&logits))
    }

    pub fn export_feature(&self, window: &Tensor) -> Result<CorrelationFeature> {
        self.require_trained()?;
        Ok(self.forward(window)?.1)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Builds the forward pass on `b`'s graph. `x` is `R×frames`.
pub fn corr_graph<'g>(cfg: &CorrConfig, b: &Binder<'g, '_>, x: Var<'g>) -> Result<CorrVars<'g>> {
    let xs = x.value();
    if xs.shape() != [cfg.rigs, cfg.frames] {
        return Err(Error::Shape(format!(
            "correlation input must be {}×{}, got {:?}",
            cfg.rigs,
            cfg.frames,
            xs.shape()
        )));
    }
    let mut h = x.matmul(b.get("corr.in.w")?)?.add_row_bias(b.get("corr.in.b")?)?;
    let mut feature: Option<Var<'g>> = None;
    let head_scale = 1.0 / cfg.heads as f64;
    for l in 0..cfg.layers {
        let pre = format!("corr.l{l}");
        let p = |s: &str| b.get(&format!("{pre}.{s}"));
        let hn = h.layer_norm_rows(p("ln1.g")?, p("ln1.b")?)?;
        let mut mixed: Option<Var<'g>> = None;
        let mut scores_sum: Option<Var<'g>> = None;
        for hd in 0..cfg.heads {
            let proj = |m: &str| -> Result<Var<'g>> {
                hn.matmul(p(&format!("h{hd}.w{m}"))?)?
                    .add_row_bias(p(&format!("h{hd}.b{m}"))?)
            };
            let (out, scores) = attention(proj("q")?, proj("k")?, proj("v")?)?;
            let s = match cfg.score {
                ScoreKind::PreSoftmax => scores,
                ScoreKind::PostSoftmax => scores.softmax_rows(),
            };
            scores_sum = Some(match scores_sum {
                None => s,
                Some(acc) => acc.add(s)?,
            });
            let o = out.matmul(p(&format!("h{hd}.wo"))?)?;
            mixed = Some(match mixed {
                None => o,
                Some(acc) => acc.add(o)?,
            });
        }
        let mixed = mixed.expect("≥ 1 head").add_row_bias(p("bo")?)?;
        h = h.add(mixed)?;
        let layer_feature = scores_sum.expect("≥ 1 head").scale(head_scale);
        feature = Some(match feature {
            None => layer_feature,
            Some(acc) => acc.add(layer_feature)?,
        });
        let hn2 = h.layer_norm_rows(p("ln2.g")?, p("ln2.b")?)?;
        let ff = hn2
            .matmul(p("ff1.w")?)?
            .add_row_bias(p("ff1.b")?)?
            .relu()
            .matmul(p("ff2.w")?)?
            .add_row_bias(p("ff2.b")?)?;
        h = h.add(ff)?;
    }
    let mut feature = feature.expect("≥ 1 layer");
    if cfg.layer_reduce == LayerReduce::Mean {
        feature = feature.scale(1.0 / cfg.layers as f64);
    }
    let flat = match cfg.head {
        CorrHead::Scores => feature.reshape(&[1, cfg.rigs * cfg.rigs])?,
        CorrHead::Logits => h.mean_rows(),
    };
    let logits = flat
        .matmul(b.get("corr.cls1.w")?)?
        .add_row_bias(b.get("corr.cls1.b")?)?
        .relu()
        .matmul(b.get("corr.cls2.w")?)?
        .add_row_bias(b.get("corr.cls2.b")?)?;
    Ok(CorrVars { logits, feature })
}

#[cfg(test)]
mod tests;
