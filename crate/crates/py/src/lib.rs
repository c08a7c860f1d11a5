//! Python bindings: registries, synthetic corpora, MFCC features, trained
//! correlation and generator models, vertex metrics and the CLI.

use std::path::PathBuf;

use cstalk::audiofeat::{load_wav, mfcc, AudioSignal, MfccConfig, SAMPLE_RATE};
use cstalk::corrnet::CorrNet;
use cstalk::evalkit::{self, VertexBasis};
use cstalk::genet::GenNet;
use cstalk::numcore::Tensor;
use cstalk::rigmodel::{RigCurveSequence, RigRegistry, DEFAULT_FRAME_RATE};
use cstalk::synthgen::{gen_corpus, write_corpus, SynthConfig};
use cstalk::trainer::load_checkpoint;
use cstalk::EmotionLabel;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(cstalk_py, CstalkError, PyException);

fn err(e: cstalk::Error) -> PyErr {
    CstalkError::new_err(e.to_string())
}

type Rows = Vec<Vec<f64>>;

fn to_tensor(rows: Rows) -> PyResult<Tensor> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(CstalkError::new_err("rows differ in length"));
    }
    Tensor::from_rows(r, c, rows.into_iter().flatten().collect()).map_err(err)
}

fn to_rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn emotion(name: &str) -> PyResult<EmotionLabel> {
    name.parse().map_err(err)
}

#[pyclass(name = "RigRegistry", module = "cstalk_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyRegistry(RigRegistry);

#[pymethods]
impl PyRegistry {
    /// The 116-rig synthetic registry, or a proportionally scaled one.
    #[staticmethod]
    #[pyo3(signature = (rigs = 116))]
    fn synthetic(rigs: usize) -> PyResult<Self> {
        if rigs < 4 {
            return Err(CstalkError::new_err("need at least 4 rigs"));
        }
        Ok(PyRegistry(if rigs == 116 {
            RigRegistry::default_116()
        } else {
            RigRegistry::scaled(rigs)
        }))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RigRegistry::load(&path).map(PyRegistry).map_err(err)
    }

    fn names(&self) -> Vec<String> {
        self.0.names().to_vec()
    }

    fn region(&self, rig: usize) -> PyResult<&'static str> {
        if rig >= self.0.len() {
            return Err(CstalkError::new_err(format!("rig {rig} out of range")));
        }
        Ok(self.0.region(rig).name())
    }

    fn hash(&self) -> u64 {
        self.0.hash()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Writes a synthetic corpus under `out` and returns its clip count.
#[pyfunction]
#[pyo3(signature = (out, seed = 7, clips_per_emotion = 100, registry = None, factors = 8))]
fn gen_synth(
    out: PathBuf,
    seed: u64,
    clips_per_emotion: usize,
    registry: Option<PyRegistry>,
    factors: usize,
) -> PyResult<usize> {
    let reg = registry.map_or_else(RigRegistry::default_116, |r| r.0);
    let cfg = SynthConfig {
        seed,
        clips_per_emotion,
        factors,
        ..SynthConfig::default()
    };
    let corpus = gen_corpus(&cfg, &reg).map_err(err)?;
    write_corpus(&corpus, &out).map_err(err)?;
    Ok(corpus.clips.len())
}

/// MFCC features (frames × 39) of mono samples in [-1, 1].
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = SAMPLE_RATE))]
fn mfcc_features(samples: Vec<f64>, sample_rate: u32) -> PyResult<Rows> {
    let sig = AudioSignal::new(samples, sample_rate).map_err(err)?;
    let sig = if sample_rate == SAMPLE_RATE {
        sig
    } else {
        sig.resampled(SAMPLE_RATE)
    };
    Ok(to_rows(&mfcc(&sig, &MfccConfig::default()).map_err(err)?.values))
}

#[pyclass(name = "CorrModel", module = "cstalk_py", frozen)]
struct PyCorr(CorrNet);

#[pymethods]
impl PyCorr {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(err)?;
        Ok(PyCorr(ck.corr().map_err(err)?.clone()))
    }

    /// Class logits of an R × 96 window, in label order.
    fn logits(&self, window: Rows) -> PyResult<Vec<f64>> {
        Ok(self.0.forward(&to_tensor(window)?).map_err(err)?.0)
    }

    fn predict(&self, window: Rows) -> PyResult<&'static str> {
        Ok(self.0.predict_emotion(&to_tensor(window)?).map_err(err)?.name())
    }

    /// R × R correlation feature of a window.
    fn feature(&self, window: Rows) -> PyResult<Rows> {
        Ok(to_rows(
            &self.0.export_feature(&to_tensor(window)?).map_err(err)?.matrix,
        ))
    }
}

#[pyclass(name = "GenModel", module = "cstalk_py", frozen)]
struct PyGen(GenNet);

#[pymethods]
impl PyGen {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(err)?;
        Ok(PyGen(ck.gen().map_err(err)?.clone()))
    }

    /// R × T curves for T × 39 window features.
    fn generate(&self, features: Rows, emotion_name: &str) -> PyResult<Rows> {
        let out = self
            .0
            .generate(&to_tensor(features)?, emotion(emotion_name)?)
            .map_err(err)?;
        Ok(to_rows(&out))
    }

    /// R × T curves for a whole WAV file.
    fn infer_wav(&self, path: PathBuf, emotion_name: &str) -> PyResult<Rows> {
        let audio = load_wav(&path).map_err(err)?;
        let seq = self.0.infer_clip(&audio, emotion(emotion_name)?, 0).map_err(err)?;
        Ok(to_rows(seq.values()))
    }
}

#[pyclass(name = "VertexBasis", module = "cstalk_py", frozen)]
struct PyBasis(VertexBasis);

#[pymethods]
impl PyBasis {
    #[staticmethod]
    #[pyo3(signature = (registry, seed = 7))]
    fn synthetic(registry: &PyRegistry, seed: u64) -> PyResult<Self> {
        VertexBasis::synthetic(&registry.0, seed).map(PyBasis).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        VertexBasis::load(&path).map(PyBasis).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    /// Lip vertex error in mm between two R × T curve arrays.
    fn lve(&self, pred: Rows, gt: Rows) -> PyResult<f64> {
        let (p, g) = (seq(pred)?, seq(gt)?);
        evalkit::lve(&p, &g, &self.0).map_err(err)
    }

    /// Eye and forehead vertex error in mm.
    fn eve(&self, pred: Rows, gt: Rows) -> PyResult<f64> {
        let (p, g) = (seq(pred)?, seq(gt)?);
        evalkit::eve(&p, &g, &self.0).map_err(err)
    }
}

fn seq(rows: Rows) -> PyResult<RigCurveSequence> {
    Ok(RigCurveSequence::from_raw(to_tensor(rows)?, DEFAULT_FRAME_RATE, 0))
}

/// 2-D PCA coordinates of square feature matrices.
#[pyfunction]
fn pca_embed(features: Vec<Rows>) -> PyResult<Vec<[f64; 2]>> {
    let ts = features.into_iter().map(to_tensor).collect::<PyResult<Vec<_>>>()?;
    let refs: Vec<&Tensor> = ts.iter().collect();
    Ok(evalkit::pca(&refs).map_err(err)?.points)
}

/// Runs the `cstalk` command line and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cstalk::cli::run(std::iter::once("cstalk".to_string()).chain(args))
}

#[pymodule]
fn cstalk_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CstalkError", m.py().get_type::<CstalkError>())?;
    m.add_class::<PyRegistry>()?;
    m.add_class::<PyCorr>()?;
    m.add_class::<PyGen>()?;
    m.add_class::<PyBasis>()?;
    m.add_function(wrap_pyfunction!(gen_synth, m)?)?;
    m.add_function(wrap_pyfunction!(mfcc_features, m)?)?;
    m.add_function(wrap_pyfunction!(pca_embed, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add(
        "EMOTIONS",
        EmotionLabel::EMOTIONS.iter().map(|e| e.name()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
