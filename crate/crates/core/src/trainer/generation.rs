use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{
    epoch_windows, eval_windows, mean_grads, split_clips, Ablation, Corpus, MetricRecord, MetricsSink, Model,
    ModelCheckpoint, RecordKind, RngState, Stage, TrainConfig,
};
use crate::audiofeat::{align_to_frames, Mfcc, PairingConfig};
use crate::corrnet::{argmax, corr_graph, CorrHead, CorrNet};
use crate::error::{Error, Result};
use crate::genet::{gen_graph, EncoderKind, FeatureNorm, GenBinding, GenConfig, GenNet};
use crate::numcore::{
    adam_step, cross_entropy, mse_velocity_loss, mse_velocity_terms, AdamConfig, AdamState, Binder, Grads, Graph,
    ParamSet, Tensor,
};
use crate::synthgen::stream_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct GenEval {
    pub l_r: f64,
    /// Share of generated windows the correlation model assigns to the
    /// requested emotion.
    pub match_rate: Option<f64>,
    pub count: usize,
}

/// Paired training windows of a corpus: features and targets cut on demand.
pub(crate) struct WindowSource<'a> {
    corpus: &'a Corpus,
    pairing: PairingConfig,
    mfcc: Mfcc,
    pub counts: Vec<usize>,
}

impl<'a> WindowSource<'a> {
    pub fn new(corpus: &'a Corpus, gen_cfg: &GenConfig) -> Result<Self> {
        let pairing = PairingConfig {
            window_frames: gen_cfg.frames,
            mfcc: gen_cfg.mfcc.clone(),
            ..PairingConfig::default()
        };
        let mfcc = Mfcc::new(gen_cfg.mfcc.clone(), crate::audiofeat::SAMPLE_RATE)?;
        let counts = corpus
            .clips
            .iter()
            .map(|c| {
                let audio_n = pairing.audio_window_count(c.audio.len(), c.rigs.frame_rate(), c.audio.sample_rate());
                let rig_n =
                    crate::rigmodel::window_count(c.rigs.frames(), pairing.window_frames, pairing.stride_frames);
                if audio_n.abs_diff(rig_n) > 1 {
                    return Err(Error::Alignment(format!(
                        "clip {}: audio yields {audio_n} windows but rig curves yield {rig_n}",
                        c.clip_id
                    )));
                }
                Ok(audio_n.min(rig_n))
            })
            .collect::<Result<_>>()?;
        Ok(WindowSource {
            corpus,
            pairing,
            mfcc,
            counts,
        })
    }

    /// T×D aligned features of window `k` of clip `c`.
    pub fn features(&self, c: usize, k: usize) -> Result<Tensor> {
        let clip = &self.corpus.clips[c];
        let start = self
            .pairing
            .audio_start(k, clip.rigs.frame_rate(), clip.audio.sample_rate());
        let len = self
            .pairing
            .window_samples(clip.rigs.frame_rate(), clip.audio.sample_rate());
        let raw = self.mfcc.compute(&clip.audio.samples()[start..start + len])?;
        Ok(align_to_frames(&raw, self.pairing.window_frames)?.values)
    }

    /// R×T target curves of window `k` of clip `c`.
    pub fn target(&self, c: usize, k: usize) -> Result<Tensor> {
        let clip = &self.corpus.clips[c];
        Ok(clip
            .rigs
            .window(
                k * self.pairing.stride_frames,
                self.pairing.window_frames,
                &clip.clip_id,
                clip.emotion,
            )?
            .values)
    }
}

struct SampleOut {
    grads: Grads,
    l_r: f64,
    l_c: f64,
    l_g: f64,
}

#[allow(clippy::too_many_arguments)]
fn sample_step(
    gen: &GenNet,
    params: &ParamSet,
    corr: Option<&CorrNet>,
    lambda: f64,
    features: &Tensor,
    target: &Tensor,
    emotion: crate::emotion::EmotionLabel,
) -> Result<SampleOut> {
    let g = Graph::new();
    let train = Binder::new(&g, params, true);
    let frozen = Binder::frozen(&g, params);
    let gb = GenBinding {
        train: &train,
        frozen: &frozen,
    };
    let x = g.constant(gen.norm.apply_transposed(features));
    let out = gen_graph(&gen.config, &gb, x, emotion)?;
    let l_r = mse_velocity_loss(out.output.transpose(), g.constant(target.transpose()))?;
    let (l_c, l_g) = match corr {
        Some(cn) => {
            let cb = Binder::frozen(&g, &cn.params);
            let logits = corr_graph(&cn.config, &cb, out.output)?.logits;
            let l_c = cross_entropy(logits, &[emotion.index()])?;
            (l_c.item(), l_r.add(l_c.scale(lambda))?)
        }
        None => (0.0, l_r),
    };
    let mut grads = g.backward(l_g)?;
    Ok(SampleOut {
        grads: train.collect(&mut grads),
        l_r: l_r.item(),
        l_c,
        l_g: l_g.item(),
    })
}

/// Validation L_R and, given a correlation model, the emotion-match rate of
/// the generated windows.
pub fn evaluate_generation(
    gen: &GenNet,
    corr: Option<&CorrNet>,
    corpus: &Corpus,
    windows: &[(usize, usize)],
) -> Result<GenEval> {
    let src = WindowSource::new(corpus, &gen.config)?;
    evaluate_with(gen, corr, &src, windows)
}

fn evaluate_with(
    gen: &GenNet,
    corr: Option<&CorrNet>,
    src: &WindowSource,
    windows: &[(usize, usize)],
) -> Result<GenEval> {
    let results: Vec<(f64, bool)> = windows
        .par_iter()
        .map(|&(c, k)| {
            let emotion = src.corpus.clips[c].emotion;
            let pred = gen.generate(&src.features(c, k)?, emotion)?;
            let (p, v) = mse_velocity_terms(&pred.transpose(), &src.target(c, k)?.transpose())?;
            let hit = match corr {
                Some(cn) => argmax(&cn.forward(&pred)?.0) == emotion.index(),
                None => false,
            };
            Ok((p + v, hit))
        })
        .collect::<Result<_>>()?;
    let n = results.len().max(1) as f64;
    Ok(GenEval {
        l_r: results.iter().map(|r| r.0).sum::<f64>() / n,
        match_rate: corr.map(|_| results.iter().filter(|r| r.1).count() as f64 / n),
        count: results.len(),
    })
}

/// One generated validation window beside its ground truth, both R×T.
#[derive(Clone, Debug)]
pub struct GeneratedWindow {
    pub clip: usize,
    pub emotion: crate::emotion::EmotionLabel,
    pub pred: Tensor,
    pub target: Tensor,
}

/// Generates the validation windows `cfg` holds out of `corpus`.
pub fn generate_validation(gen: &GenNet, corpus: &Corpus, cfg: &TrainConfig) -> Result<Vec<GeneratedWindow>> {
    let (_, val_idx) = split_clips(corpus, cfg.val_fraction, cfg.seed);
    let src = WindowSource::new(corpus, &gen.config)?;
    eval_windows(&src.counts, &val_idx, cfg.val_windows_per_clip)
        .par_iter()
        .map(|&(c, k)| {
            let emotion = corpus.clips[c].emotion;
            Ok(GeneratedWindow {
                clip: c,
                emotion,
                pred: gen.generate(&src.features(c, k)?, emotion)?,
                target: src.target(c, k)?,
            })
        })
        .collect()
}

fn check_compatible(corpus: &Corpus, gen_cfg: &GenConfig, corr: &ModelCheckpoint, cfg: &TrainConfig) -> Result<()> {
    let cn = corr.corr()?;
    if !cn.trained {
        return Err(Error::State("correlation checkpoint is untrained".into()));
    }
    if corr.registry_hash != corpus.registry.hash() {
        return Err(Error::Compatibility(format!(
            "correlation checkpoint registry {:016x} differs from corpus registry {:016x}",
            corr.registry_hash,
            corpus.registry.hash()
        )));
    }
    if cn.config.rigs != gen_cfg.rigs || cn.config.frames != gen_cfg.frames {
        return Err(Error::Compatibility(format!(
            "correlation model takes {}×{} windows, generator emits {}×{}",
            cn.config.rigs, cn.config.frames, gen_cfg.rigs, gen_cfg.frames
        )));
    }
    let wants_logits = cfg.has(Ablation::LogitsOutput);
    if wants_logits != (cn.config.head == CorrHead::Logits) {
        return Err(Error::Compatibility(format!(
            "logits_output ablation is {} but the correlation checkpoint uses the {:?} head",
            if wants_logits { "on" } else { "off" },
            cn.config.head
        )));
    }
    Ok(())
}

/// Stage 2: trains the generator under `L_G = L_R + λ·L_C` with the
/// correlation model and the encoder TCN frozen.
pub fn train_generation(
    corpus: &Corpus,
    corr_ckpt: Option<&ModelCheckpoint>,
    cfg: &TrainConfig,
    mut gen_cfg: GenConfig,
    sink: &mut dyn MetricsSink,
) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    if cfg.stage != Stage::Generation {
        return Err(Error::Config("train_generation needs a generation-stage config".into()));
    }
    if cfg.has(Ablation::MfccEncoder) {
        gen_cfg.encoder = EncoderKind::Precomputed;
    }
    if gen_cfg.rigs != corpus.registry.len() {
        return Err(Error::Compatibility(format!(
            "generator emits {} rigs, corpus registry has {}",
            gen_cfg.rigs,
            corpus.registry.len()
        )));
    }
    let supervise = !cfg.has(Ablation::NoCorrSupervision);
    if let Some(c) = corr_ckpt {
        check_compatible(corpus, &gen_cfg, c, cfg)?;
    } else if supervise {
        return Err(Error::Config(
            "correlation supervision needs a correlation checkpoint".into(),
        ));
    }
    let corr = corr_ckpt.map(|c| c.corr()).transpose()?;
    let corr_before = corr.map(|c| c.params.clone());

    let (train_idx, val_idx) = split_clips(corpus, cfg.val_fraction, cfg.seed);
    let src = WindowSource::new(corpus, &gen_cfg)?;
    if train_idx.iter().all(|&c| src.counts[c] == 0) {
        return Err(Error::Data(format!(
            "no training clip covers a {}-frame window",
            gen_cfg.frames
        )));
    }

    let mut net = GenNet::init(gen_cfg, cfg.seed)?;
    let norm_windows: Vec<Tensor> = eval_windows(&src.counts, &train_idx, 1)
        .into_iter()
        .map(|(c, k)| src.features(c, k))
        .collect::<Result<_>>()?;
    net.norm = FeatureNorm::fit(&norm_windows)?;
    let frozen_before: Vec<(String, Tensor)> = net
        .frozen_names()
        .into_iter()
        .map(|n| {
            let t = net.params.get(&n).expect("named").clone();
            (n, t)
        })
        .collect();
    let val = eval_windows(&src.counts, &val_idx, cfg.val_windows_per_clip);

    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::default();
    let mut best = (net.params.clone(), f64::INFINITY);
    let mut stale = 0;
    let mut step = 0;
    let mut rng_state = RngState {
        seed: cfg.seed,
        ..RngState::default()
    };
    let mut history = Vec::new();
    let mut emit = |r: MetricRecord, history: &mut Vec<MetricRecord>| -> Result<()> {
        sink.record(&r)?;
        history.push(r);
        Ok(())
    };
    let supervisor = if supervise { corr } else { None };

    for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(cfg.seed, &format!("gen-epoch-{epoch}"));
        let mut items = epoch_windows(&src.counts, &train_idx, cfg.windows_per_clip, &mut rng);
        items.shuffle(&mut rng);
        let (mut sr, mut sc, mut sg, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let mut stop = false;
        for batch in items.chunks(cfg.batch) {
            let results: Vec<SampleOut> = batch
                .par_iter()
                .map(|&(c, k)| {
                    let f = src.features(c, k)?;
                    let t = src.target(c, k)?;
                    sample_step(
                        &net,
                        &net.params,
                        supervisor,
                        cfg.lambda_c,
                        &f,
                        &t,
                        corpus.clips[c].emotion,
                    )
                })
                .collect::<Result<_>>()?;
            let n = results.len() as f64;
            let (br, bc, bg) = results
                .iter()
                .fold((0.0, 0.0, 0.0), |a, r| (a.0 + r.l_r, a.1 + r.l_c, a.2 + r.l_g));
            sr += br;
            sc += bc;
            sg += bg;
            seen += results.len();
            let grads = mean_grads(results.into_iter().map(|r| r.grads).collect());
            adam_step(&mut net.params, &grads, &mut state, &adam)?;
            step += 1;
            let mut r = MetricRecord::new(RecordKind::Step, epoch, step);
            r.l_r = Some(br / n);
            r.l_c = Some(bc / n);
            r.l_g = Some(bg / n);
            emit(r, &mut history)?;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                stop = true;
                break;
            }
        }
        rng_state.epochs_completed = epoch + 1;
        rng_state.steps = step;

        let m = seen.max(1) as f64;
        let mut r = MetricRecord::new(RecordKind::Epoch, epoch, step);
        r.l_r = Some(sr / m);
        r.l_c = Some(sc / m);
        r.l_g = Some(sg / m);
        let score = if val.is_empty() {
            sr / m
        } else {
            let ev = evaluate_with(&net, corr, &src, &val)?;
            r.val_l_r = Some(ev.l_r);
            r.val_match = ev.match_rate;
            ev.l_r
        };
        log::info!(
            "gen epoch {epoch}: L_R {:.5} L_C {:.4} val_L_R {:?} val_match {:?}",
            sr / m,
            sc / m,
            r.val_l_r,
            r.val_match
        );
        emit(r, &mut history)?;
        if score < best.1 {
            best = (net.params.clone(), score);
            stale = 0;
        } else {
            stale += 1;
        }
        if stop || stale >= cfg.patience {
            break;
        }
    }

    net.params = best.0.round_to_f32();
    for (name, before) in &frozen_before {
        if net.params.get(name) != Some(before) {
            return Err(Error::State(format!(
                "frozen parameter `{name}` changed during training"
            )));
        }
    }
    if let (Some(before), Some(after)) = (&corr_before, corr) {
        if before != &after.params {
            return Err(Error::State("correlation parameters changed during training".into()));
        }
    }
    Ok(ModelCheckpoint {
        model: Model::Generation(net),
        registry_hash: corpus.registry.hash(),
        train: Some(cfg.clone()),
        rng: rng_state,
        metrics: history,
    })
}
