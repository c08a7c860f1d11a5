use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{
    check_balance, derive_seed, epoch_windows, eval_windows, mean_grads, rig_window_counts, split_clips, Ablation,
    Corpus, MetricRecord, MetricsSink, Model, ModelCheckpoint, RecordKind, RngState, Stage, TrainConfig,
};
use crate::corrnet::{argmax, corr_graph, CorrConfig, CorrHead, CorrNet};
use crate::emotion::EmotionLabel;
use crate::error::{Error, Result};
use crate::numcore::{adam_step, cross_entropy, AdamConfig, AdamState, Binder, Grads, Graph, ParamSet, Tensor};
use crate::rigmodel::WINDOW_STRIDE_FRAMES;
use crate::synthgen::{gen_random_windows, stream_rng};

#[derive(Clone, Debug, PartialEq)]
pub struct CorrEval {
    pub loss: f64,
    pub accuracy: f64,
    /// Accuracy on the random-class windows alone.
    pub random_accuracy: f64,
    pub count: usize,
}

/// Mean cross-entropy and accuracy over labelled windows.
pub fn evaluate_correlation(net: &CorrNet, windows: &[(Tensor, EmotionLabel)]) -> Result<CorrEval> {
    let results: Vec<(f64, bool)> = windows
        .par_iter()
        .map(|(w, label)| {
            let (logits, _) = net.forward(w)?;
            let g = Graph::new();
            let l = cross_entropy(
                g.constant(Tensor::from_rows(1, logits.len(), logits.clone())?),
                &[label.index()],
            )?;
            Ok((l.item(), argmax(&logits) == label.index()))
        })
        .collect::<Result<_>>()?;
    let n = results.len().max(1) as f64;
    let random: Vec<bool> = windows
        .iter()
        .zip(&results)
        .filter(|((_, l), _)| l.is_random())
        .map(|(_, r)| r.1)
        .collect();
    Ok(CorrEval {
        loss: results.iter().map(|r| r.0).sum::<f64>() / n,
        accuracy: results.iter().filter(|r| r.1).count() as f64 / n,
        random_accuracy: random.iter().filter(|&&c| c).count() as f64 / random.len().max(1) as f64,
        count: results.len(),
    })
}

fn sample_step(cfg: &CorrConfig, params: &ParamSet, window: &Tensor, label: usize) -> Result<(Grads, f64, bool)> {
    let g = Graph::new();
    let b = Binder::new(&g, params, true);
    let out = corr_graph(cfg, &b, g.constant(window.clone()))?;
    let correct = argmax(out.logits.value().data()) == label;
    let loss = cross_entropy(out.logits, &[label])?;
    let mut grads = g.backward(loss)?;
    Ok((b.collect(&mut grads), loss.item(), correct))
}

/// Stage 1: trains the correlation classifier on emotion windows plus an
/// equal share of random windows.
pub fn train_correlation(
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut corr_cfg: CorrConfig,
    sink: &mut dyn MetricsSink,
) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    if cfg.stage != Stage::Correlation {
        return Err(Error::Config(
            "train_correlation needs a correlation-stage config".into(),
        ));
    }
    if cfg.has(Ablation::LogitsOutput) {
        corr_cfg.head = CorrHead::Logits;
    }
    if corr_cfg.rigs != corpus.registry.len() {
        return Err(Error::Compatibility(format!(
            "model expects {} rigs, corpus registry has {}",
            corr_cfg.rigs,
            corpus.registry.len()
        )));
    }
    let (train_idx, val_idx) = split_clips(corpus, cfg.val_fraction, cfg.seed);
    check_balance(corpus, &train_idx)?;
    let (rigs, frames) = (corr_cfg.rigs, corr_cfg.frames);
    let counts = rig_window_counts(corpus, frames, WINDOW_STRIDE_FRAMES);
    if train_idx.iter().all(|&c| counts[c] == 0) {
        return Err(Error::Data(format!(
            "no training clip is at least {frames} frames long"
        )));
    }
    let window = |c: usize, k: usize| -> Result<Tensor> {
        let clip = &corpus.clips[c];
        Ok(clip
            .rigs
            .window(k * WINDOW_STRIDE_FRAMES, frames, &clip.clip_id, clip.emotion)?
            .values)
    };

    let mut val: Vec<(Tensor, EmotionLabel)> = eval_windows(&counts, &val_idx, cfg.val_windows_per_clip)
        .into_iter()
        .map(|(c, k)| Ok((window(c, k)?, corpus.clips[c].emotion)))
        .collect::<Result<_>>()?;
    if !val.is_empty() {
        let n_random = val.len().div_ceil(5);
        for w in gen_random_windows(n_random, rigs, frames, derive_seed(cfg.seed, "val-random"))? {
            val.push((w.values, EmotionLabel::Random));
        }
    }

    let mut net = CorrNet::init(corr_cfg, cfg.seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::default();
    let mut best = (net.params.clone(), f64::NEG_INFINITY, f64::INFINITY);
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

    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(cfg.seed, &format!("corr-epoch-{epoch}"));
        let picks = epoch_windows(&counts, &train_idx, cfg.windows_per_clip, &mut rng);
        let n_random = picks.len().div_ceil(5);
        let randoms = gen_random_windows(
            n_random,
            rigs,
            frames,
            derive_seed(cfg.seed, &format!("random-{epoch}")),
        )?;
        let mut items: Vec<(Option<(usize, usize)>, usize)> = picks.into_iter().map(|p| (Some(p), 0)).collect();
        items.extend((0..n_random).map(|i| (None, i)));
        items.shuffle(&mut rng);

        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in items.chunks(cfg.batch) {
            let results: Vec<(Grads, f64, bool)> = batch
                .par_iter()
                .map(|(clip, i)| {
                    let (w, label) = match clip {
                        Some((c, k)) => (window(*c, *k)?, corpus.clips[*c].emotion),
                        None => (randoms[*i].values.clone(), EmotionLabel::Random),
                    };
                    sample_step(&net.config, &net.params, &w, label.index())
                })
                .collect::<Result<_>>()?;
            let b_loss = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
            let b_correct = results.iter().filter(|r| r.2).count();
            loss_sum += results.iter().map(|r| r.1).sum::<f64>();
            correct += b_correct;
            seen += results.len();
            let grads = mean_grads(results.into_iter().map(|r| r.0).collect());
            adam_step(&mut net.params, &grads, &mut state, &adam)?;
            step += 1;
            let mut r = MetricRecord::new(RecordKind::Step, epoch, step);
            r.loss = Some(b_loss);
            r.accuracy = Some(b_correct as f64 / batch.len() as f64);
            emit(r, &mut history)?;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
        }
        rng_state.epochs_completed = epoch + 1;
        rng_state.steps = step;

        let mut r = MetricRecord::new(RecordKind::Epoch, epoch, step);
        r.loss = Some(loss_sum / seen.max(1) as f64);
        r.accuracy = Some(correct as f64 / seen.max(1) as f64);
        let mut improved = true;
        let mut reached = false;
        if !val.is_empty() {
            let ev = evaluate_correlation(&net, &val)?;
            r.val_loss = Some(ev.loss);
            r.val_accuracy = Some(ev.accuracy);
            r.val_random_accuracy = Some(ev.random_accuracy);
            improved = ev.accuracy > best.1 || (ev.accuracy == best.1 && ev.loss < best.2);
            if improved {
                best = (net.params.clone(), ev.accuracy, ev.loss);
            }
            reached = cfg.stop_at_val_accuracy.is_some_and(|t| ev.accuracy >= t);
        } else {
            best.0 = net.params.clone();
        }
        log::info!(
            "corr epoch {epoch}: loss {:.4} acc {:.3} val_acc {:?}",
            r.loss.unwrap(),
            r.accuracy.unwrap(),
            r.val_accuracy
        );
        emit(r, &mut history)?;
        stale = if improved { 0 } else { stale + 1 };
        if reached || stale >= cfg.patience || cfg.max_steps.is_some_and(|m| step >= m) {
            break 'epochs;
        }
    }

    net.params = best.0.round_to_f32();
    net.trained = true;
    Ok(ModelCheckpoint {
        model: Model::Correlation(net),
        registry_hash: corpus.registry.hash(),
        train: Some(cfg.clone()),
        rng: rng_state,
        metrics: history,
    })
}
