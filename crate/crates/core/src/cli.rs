//! `cstalk` command line: corpus synthesis, both training stages,
//! inference, evaluation and analysis exports.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::audiofeat::load_wav;
use crate::corrnet::CorrConfig;
use crate::emotion::EmotionLabel;
use crate::error::{Error, Result};
use crate::evalkit::{
    cluster_distances, eve, export_heatmap, lve, pca_embed, write_embedding_csv, LabelledFeature, VertexBasis,
};
use crate::genet::GenConfig;
use crate::rigmodel::{load_rig_curves, save_rig_curves, Region, RigRegistry, WINDOW_STRIDE_FRAMES};
use crate::synthgen::{gen_corpus, write_corpus, SynthConfig};
use crate::trainer::{
    load_checkpoint, save_checkpoint, train_correlation, train_generation, Ablation, Corpus, JsonlSink, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "cstalk",
    version,
    about = "Speech-driven rig-curve animation with correlation supervision"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired corpus and a matching vertex basis.
    GenSynth(GenSynthArgs),
    /// Train the correlation classifier.
    TrainCorr(TrainCorrArgs),
    /// Train the generator.
    TrainGen(TrainGenArgs),
    /// Generate rig curves for a WAV file.
    Infer(InferArgs),
    /// Lip and emotional vertex errors between two rig-curve files.
    Eval(EvalArgs),
    /// Export correlation heatmaps.
    InspectAttn(InspectArgs),
    /// 2-D PCA embedding of correlation features.
    Embed(EmbedArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML or JSON file of defaults; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    clips_per_emotion: Option<usize>,
    #[arg(long)]
    rigs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainOpts {
    #[command(flatten)]
    common: Common,
    /// Corpus manifest, or the directory holding `manifest.json`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = ["no_corr_supervision", "logits_output", "mfcc_encoder"])]
    ablation: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainCorrArgs {
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct TrainGenArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Trained correlation checkpoint.
    #[arg(long)]
    corr: Option<PathBuf>,
    /// Weight on the correlation loss.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    audio: Option<PathBuf>,
    #[arg(long, value_parser = ["neutral", "angry", "sad", "surprised", "happy"])]
    emotion: Option<String>,
    /// Registry JSON naming the output columns.
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Vertex basis file; without it a synthetic basis is built from --registry.
    #[arg(long)]
    basis: Option<PathBuf>,
    #[arg(long)]
    registry: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Clips exported per emotion.
    #[arg(long)]
    per_emotion: Option<usize>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flag values merged over a config file; every resolved value is kept for
/// logging and for the run record.
struct Resolver {
    file: Map<String, Value>,
    resolved: BTreeMap<String, Value>,
}

impl Resolver {
    fn new(config: Option<&Path>) -> Result<Self> {
        let file = match config {
            None => Map::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let v: Value = if p.extension().is_some_and(|e| e == "toml") {
                    let t: toml::Value =
                        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    serde_json::to_value(t)?
                } else {
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                };
                match v {
                    Value::Object(m) => m,
                    _ => return Err(Error::Config(format!("{}: expected a table of settings", p.display()))),
                }
            }
        };
        Ok(Resolver {
            file,
            resolved: BTreeMap::new(),
        })
    }

    fn opt<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(
                    serde_json::from_value(raw.clone())
                        .map_err(|e| Error::Config(format!("config key `{key}`: {e}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &v {
            let j = serde_json::to_value(v)?;
            log::info!("{key} = {j}");
            self.resolved.insert(key.to_string(), j);
        }
        Ok(v)
    }

    fn get<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        match self.opt(key, flag)? {
            Some(v) => Ok(v),
            None => {
                let j = serde_json::to_value(&default)?;
                log::info!("{key} = {j} (default)");
                self.resolved.insert(key.to_string(), j);
                Ok(default)
            }
        }
    }

    fn req<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.opt(key, flag)?
            .ok_or_else(|| Error::Config(format!("missing --{}", key.replace('_', "-"))))
    }

    fn list(&mut self, key: &str, flag: Vec<String>) -> Result<Vec<String>> {
        let v = if flag.is_empty() { None } else { Some(flag) };
        Ok(self.opt(key, v)?.unwrap_or_default())
    }

    /// Rejects config keys this subcommand never read.
    fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.resolved.contains_key(k.as_str()))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }

    fn write_record(&self, dir: &Path) -> Result<()> {
        let p = dir.join("config.json");
        std::fs::write(&p, serde_json::to_string_pretty(&self.resolved)? + "\n").map_err(|e| Error::io(&p, e))
    }
}

fn make_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn manifest_path(p: PathBuf) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p
    }
}

fn ablations(names: &[String]) -> Result<Vec<Ablation>> {
    names.iter().map(|n| n.parse()).collect()
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let defaults = SynthConfig::default();
    let seed = r.get("seed", a.common.seed, defaults.seed)?;
    let out: PathBuf = r.req("out", a.out)?;
    let clips = r.get("clips_per_emotion", a.clips_per_emotion, defaults.clips_per_emotion)?;
    let rigs = r.get("rigs", a.rigs, crate::rigmodel::DEFAULT_RIG_COUNT)?;
    r.finish()?;
    if rigs < 4 {
        return Err(Error::Config(format!("need at least 4 rigs, got {rigs}")));
    }
    let registry = if rigs == crate::rigmodel::DEFAULT_RIG_COUNT {
        RigRegistry::default_116()
    } else {
        RigRegistry::scaled(rigs)
    };
    let cfg = SynthConfig {
        seed,
        clips_per_emotion: clips,
        ..defaults
    };
    cfg.validate()?;
    make_dir(&out)?;
    let corpus = gen_corpus(&cfg, &registry)?;
    write_corpus(&corpus, &out)?;
    VertexBasis::synthetic(&registry, seed)?.save(&out.join("basis.cstk"))?;
    r.write_record(&out)?;
    log::info!("wrote {} clips to {}", corpus.clips.len(), out.display());
    Ok(())
}

struct TrainSetup {
    resolver: Resolver,
    corpus: Corpus,
    out: PathBuf,
    cfg: TrainConfig,
}

fn train_setup(o: TrainOpts, base: TrainConfig, extra: impl FnOnce(&mut Resolver) -> Result<()>) -> Result<TrainSetup> {
    let mut r = Resolver::new(o.common.config.as_deref())?;
    let seed = r.get("seed", o.common.seed, base.seed)?;
    let corpus_path: PathBuf = r.req("corpus", o.corpus)?;
    let out: PathBuf = r.req("out", o.out)?;
    let cfg = TrainConfig {
        seed,
        epochs: r.get("epochs", o.epochs, base.epochs)?,
        batch: r.get("batch", o.batch, base.batch)?,
        lr: r.get("lr", o.lr, base.lr)?,
        ablations: ablations(&r.list("ablation", o.ablation)?)?,
        patience: r.get("patience", None, base.patience)?,
        val_fraction: r.get("val_fraction", None, base.val_fraction)?,
        windows_per_clip: r.opt("windows_per_clip", None)?.or(base.windows_per_clip),
        max_steps: r.opt("max_steps", None)?,
        stop_at_val_accuracy: r.opt("stop_at_val_accuracy", None)?,
        ..base
    };
    extra(&mut r)?;
    cfg.validate()?;
    let corpus = Corpus::load(&manifest_path(corpus_path))?;
    Ok(TrainSetup {
        resolver: r,
        corpus,
        out,
        cfg,
    })
}

fn metrics_sink(out: &Path) -> Result<JsonlSink<std::io::BufWriter<std::fs::File>>> {
    let p = out.join("metrics.jsonl");
    let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    Ok(JsonlSink::new(std::io::BufWriter::new(f)))
}

fn train_corr(a: TrainCorrArgs) -> Result<()> {
    let s = train_setup(a.opts, TrainConfig::correlation(), |_| Ok(()))?;
    s.resolver.finish()?;
    if let Some(bad) = s.cfg.ablations.iter().find(|a| **a != Ablation::LogitsOutput) {
        return Err(Error::Config(format!(
            "ablation {bad:?} does not apply to the correlation stage"
        )));
    }
    let corr_cfg = CorrConfig {
        rigs: s.corpus.registry.len(),
        ..CorrConfig::default()
    };
    make_dir(&s.out)?;
    s.resolver.write_record(&s.out)?;
    let ck = train_correlation(&s.corpus, &s.cfg, corr_cfg, &mut metrics_sink(&s.out)?)?;
    save_checkpoint(&ck, &s.out.join("model.cstk"))
}

fn train_gen(a: TrainGenArgs) -> Result<()> {
    let mut corr_flag = a.corr;
    let mut lambda_flag = a.lambda;
    let mut corr_path: Option<PathBuf> = None;
    let mut lambda = 1.0;
    let mut s = train_setup(a.opts, TrainConfig::generation(), |r| {
        corr_path = r.opt("corr", corr_flag.take())?;
        lambda = r.get("lambda", lambda_flag.take(), 1.0)?;
        Ok(())
    })?;
    s.resolver.finish()?;
    s.cfg.lambda_c = lambda;
    s.cfg.validate()?;
    let corr = corr_path.map(|p| load_checkpoint(&p)).transpose()?;
    let gen_cfg = GenConfig {
        rigs: s.corpus.registry.len(),
        ..GenConfig::default()
    };
    make_dir(&s.out)?;
    s.resolver.write_record(&s.out)?;
    let ck = train_generation(&s.corpus, corr.as_ref(), &s.cfg, gen_cfg, &mut metrics_sink(&s.out)?)?;
    save_checkpoint(&ck, &s.out.join("model.cstk"))
}

fn infer(a: InferArgs) -> Result<()> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let model: PathBuf = r.req("model", a.model)?;
    let audio: PathBuf = r.req("audio", a.audio)?;
    let emotion: String = r.get("emotion", a.emotion, "neutral".to_string())?;
    let registry: PathBuf = r.req("registry", a.registry)?;
    let out: PathBuf = r.req("out", a.out)?;
    r.finish()?;
    let emotion: EmotionLabel = emotion.parse()?;
    let registry = RigRegistry::load(&registry)?;
    let ck = load_checkpoint(&model)?;
    if ck.registry_hash != registry.hash() {
        return Err(Error::Compatibility(format!(
            "model was trained on registry {:016x}, not {:016x}",
            ck.registry_hash,
            registry.hash()
        )));
    }
    let seq = ck.gen()?.infer_clip(&load_wav(&audio)?, emotion, registry.hash())?;
    make_dir(&out)?;
    save_rig_curves(&seq, &registry, &out.join("curves.csv"))?;
    r.write_record(&out)?;
    log::info!("wrote {} frames to {}", seq.frames(), out.join("curves.csv").display());
    Ok(())
}

/// Registry whose names are the columns of a rig CSV; regions are unknown.
fn registry_from_csv(path: &Path) -> Result<RigRegistry> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = text
        .lines()
        .next()
        .ok_or_else(|| Error::Schema(format!("{}: empty rig CSV", path.display())))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let regions = names.iter().map(|n| (n.clone(), Region::Other)).collect();
    RigRegistry::new(names, &regions)
}

fn eval(a: EvalArgs) -> Result<String> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let pred: PathBuf = r.req("pred", a.pred)?;
    let gt: PathBuf = r.req("gt", a.gt)?;
    let basis_path: Option<PathBuf> = r.opt("basis", a.basis)?;
    let registry_path: Option<PathBuf> = r.opt("registry", a.registry)?;
    let seed = r.get("seed", a.common.seed, SynthConfig::default().seed)?;
    r.finish()?;
    let registry = match &registry_path {
        Some(p) => RigRegistry::load(p)?,
        None => registry_from_csv(&pred)?,
    };
    let basis = match (basis_path, registry_path) {
        (Some(p), _) => VertexBasis::load(&p)?,
        (None, Some(_)) => VertexBasis::synthetic(&registry, seed)?,
        (None, None) => return Err(Error::Config("eval needs --basis or --registry".into())),
    };
    let (p, g) = (load_rig_curves(&pred, &registry)?, load_rig_curves(&gt, &registry)?);
    Ok(format!(
        "LVE: {:.3} mm, EVE: {:.3} mm",
        lve(&p, &g, &basis)?,
        eve(&p, &g, &basis)?
    ))
}

/// Middle 96-frame window of each selected clip with its correlation
/// feature.
fn clip_features(model: &Path, corpus: &Corpus, per_emotion: Option<usize>) -> Result<Vec<LabelledFeature>> {
    let ck = load_checkpoint(model)?;
    if ck.registry_hash != corpus.registry.hash() {
        return Err(Error::Compatibility("model and corpus use different registries".into()));
    }
    let net = ck.corr()?;
    let frames = net.config.frames;
    let mut taken = [0usize; 6];
    let mut out = Vec::new();
    for c in &corpus.clips {
        let n = crate::rigmodel::window_count(c.rigs.frames(), frames, WINDOW_STRIDE_FRAMES);
        if n == 0 || per_emotion.is_some_and(|m| taken[c.emotion.index()] >= m) {
            continue;
        }
        taken[c.emotion.index()] += 1;
        let w = c
            .rigs
            .window((n / 2) * WINDOW_STRIDE_FRAMES, frames, &c.clip_id, c.emotion)?;
        out.push(LabelledFeature {
            id: c.clip_id.clone(),
            emotion: c.emotion,
            feature: net.export_feature(&w.values)?,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no clip is at least {frames} frames long")));
    }
    Ok(out)
}

fn inspect_attn(a: InspectArgs) -> Result<()> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let model: PathBuf = r.req("model", a.model)?;
    let corpus: PathBuf = r.req("corpus", a.corpus)?;
    let out: PathBuf = r.req("out", a.out)?;
    let per = r.get("per_emotion", a.per_emotion, 3)?;
    r.finish()?;
    let corpus = Corpus::load(&manifest_path(corpus))?;
    let feats = clip_features(&model, &corpus, Some(per))?;
    let written = export_heatmap(&feats, &corpus.registry, &out)?;
    r.write_record(&out)?;
    log::info!("wrote {} heatmaps to {}", written.len(), out.display());
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<String> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let model: PathBuf = r.req("model", a.model)?;
    let corpus: PathBuf = r.req("corpus", a.corpus)?;
    let out: PathBuf = r.req("out", a.out)?;
    r.finish()?;
    let corpus = Corpus::load(&manifest_path(corpus))?;
    let feats = clip_features(&model, &corpus, None)?;
    let points = pca_embed(&feats.iter().map(|f| f.feature.clone()).collect::<Vec<_>>())?;
    let rows: Vec<(String, EmotionLabel, [f64; 2])> = feats
        .iter()
        .zip(&points)
        .map(|(f, p)| (f.id.clone(), f.emotion, *p))
        .collect();
    make_dir(&out)?;
    write_embedding_csv(&rows, &out.join("embedding.csv"))?;
    r.write_record(&out)?;
    let labelled: Vec<(EmotionLabel, Vec<f64>)> = rows.iter().map(|(_, e, p)| (*e, p.to_vec())).collect();
    let (within, between) = cluster_distances(&labelled);
    Ok(format!(
        "within-emotion distance {within:.4}, between-emotion distance {between:.4}"
    ))
}

fn set_threads() {
    if let Some(n) = std::env::var("CSTALK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if n > 0 && rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_ok() {
            log::info!("CSTALK_THREADS = {n}");
        }
    }
}

/// Runs one command line and returns the process exit code: 0 on success,
/// 1 when the command fails, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    set_threads();
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a).map(|_| None),
        Command::TrainCorr(a) => train_corr(a).map(|_| None),
        Command::TrainGen(a) => train_gen(a).map(|_| None),
        Command::Infer(a) => infer(a).map(|_| None),
        Command::Eval(a) => eval(a).map(Some),
        Command::InspectAttn(a) => inspect_attn(a).map(|_| None),
        Command::Embed(a) => embed(a).map(Some),
    };
    match result {
        Ok(msg) => {
            if let Some(m) = msg {
                println!("{m}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
