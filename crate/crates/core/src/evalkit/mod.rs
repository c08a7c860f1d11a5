//! Rig→vertex mapping, lip/emotional vertex errors, heatmap and embedding
//! exports.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::corrnet::CorrelationFeature;
use crate::emotion::EmotionLabel;
use crate::error::{Error, Result};
use crate::numcore::{kernels, Tensor};
use crate::rigmodel::{format_value, Region, RigCurveSequence, RigRegistry};
use crate::synthgen::stream_rng;

#[cfg(test)]
mod tests;

/// Linear face model: `rest` is V×3, `deltas` is R×V×3 (mm at rig value 1).
#[derive(Clone, Debug, PartialEq)]
pub struct VertexBasis {
    rest: Tensor,
    deltas: Tensor,
    lip: Vec<usize>,
    eye: Vec<usize>,
    forehead: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BasisHeader {
    kind: String,
    lip: Vec<usize>,
    eye: Vec<usize>,
    forehead: Vec<usize>,
}

impl VertexBasis {
    pub fn new(rest: Tensor, deltas: Tensor, lip: Vec<usize>, eye: Vec<usize>, forehead: Vec<usize>) -> Result<Self> {
        if rest.shape().len() != 2 || rest.cols() != 3 || rest.rows() == 0 {
            return Err(Error::Shape(format!(
                "rest positions must be V×3, got {:?}",
                rest.shape()
            )));
        }
        let v = rest.rows();
        if deltas.shape().len() != 3 || deltas.shape()[1..] != [v, 3] || deltas.rows() == 0 {
            return Err(Error::Shape(format!(
                "deltas must be R×{v}×3, got {:?}",
                deltas.shape()
            )));
        }
        if !rest.all_finite() || !deltas.all_finite() {
            return Err(Error::Validation("vertex basis has non-finite entries".into()));
        }
        let mut owner = vec![None; v];
        for (name, set) in [("lip", &lip), ("eye", &eye), ("forehead", &forehead)] {
            for &i in set {
                if i >= v {
                    return Err(Error::Index(format!("{name} vertex {i} ≥ V = {v}")));
                }
                if let Some(other) = owner[i].replace(name) {
                    return Err(Error::Config(format!("vertex {i} is tagged both {other} and {name}")));
                }
            }
        }
        Ok(VertexBasis {
            rest,
            deltas,
            lip,
            eye,
            forehead,
        })
    }

    /// Reproducible default: V = 200 with lip/eye/forehead sets of 30/20/20
    /// vertices; each rig only moves the vertices of its own region
    /// (untagged rigs move the untagged vertices).
    pub fn synthetic(registry: &RigRegistry, seed: u64) -> Result<Self> {
        let v = 200;
        let lip: Vec<usize> = (0..30).collect();
        let eye: Vec<usize> = (30..50).collect();
        let forehead: Vec<usize> = (50..70).collect();
        let other: Vec<usize> = (70..v).collect();
        let mut rng = stream_rng(seed, "vertex-basis");
        let rest = Tensor::from_fn(v, 3, |_, _| rng.gen_range(-80.0..80.0));
        let mut deltas = Tensor::zeros(&[registry.len(), v, 3]);
        for r in 0..registry.len() {
            let set = match registry.region(r) {
                Region::Lip => &lip,
                Region::Eye => &eye,
                Region::Forehead => &forehead,
                Region::Other => &other,
            };
            for &i in set {
                for c in 0..3 {
                    let d: f64 = rng.sample(StandardNormal);
                    deltas.data_mut()[(r * v + i) * 3 + c] = 3.0 * d;
                }
            }
        }
        VertexBasis::new(rest, deltas, lip, eye, forehead)
    }

    pub fn vertices(&self) -> usize {
        self.rest.rows()
    }

    pub fn rigs(&self) -> usize {
        self.deltas.rows()
    }

    pub fn rest(&self) -> &Tensor {
        &self.rest
    }

    pub fn deltas(&self) -> &Tensor {
        &self.deltas
    }

    pub fn lip(&self) -> &[usize] {
        &self.lip
    }

    /// Eye ∪ forehead vertices.
    pub fn emotional(&self) -> Vec<usize> {
        let mut v = self.eye.clone();
        v.extend_from_slice(&self.forehead);
        v
    }

    pub fn to_container(&self) -> Result<Container> {
        let header = BasisHeader {
            kind: "vertex_basis".into(),
            lip: self.lip.clone(),
            eye: self.eye.clone(),
            forehead: self.forehead.clone(),
        };
        let mut c = Container::new(serde_json::to_value(header)?);
        c.push("rest", &self.rest);
        c.push("deltas", &self.deltas);
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let h: BasisHeader = serde_json::from_value(c.header.clone())
            .map_err(|e| Error::Schema(format!("{}: basis header: {e}", path.display())))?;
        let get = |n: &str| {
            c.get(n)
                .cloned()
                .ok_or_else(|| Error::Schema(format!("{}: basis lacks `{n}`", path.display())))
        };
        VertexBasis::new(get("rest")?, get("deltas")?, h.lip, h.eye, h.forehead)
    }

    /// Rounds to the f32 values a saved basis holds.
    pub fn round_to_f32(&self) -> VertexBasis {
        VertexBasis {
            rest: self.rest.round_to_f32(),
            deltas: self.deltas.round_to_f32(),
            ..self.clone()
        }
    }
}

/// Vertex positions per frame as a T×3V matrix (frame t, vertex v at
/// columns `3v..3v+3`).
pub fn rig_to_vertices(seq: &RigCurveSequence, basis: &VertexBasis) -> Result<Tensor> {
    if seq.rigs() != basis.rigs() {
        return Err(Error::Shape(format!(
            "curves have {} rigs, basis has {}",
            seq.rigs(),
            basis.rigs()
        )));
    }
    let (t, r, w) = (seq.frames(), seq.rigs(), basis.deltas.cols());
    let data = kernels::matmul(seq.values().transpose().data(), basis.deltas.data(), t, r, w);
    let mut pos = Tensor::from_rows(t, w, data)?;
    let rest = basis.rest.data();
    for row in pos.data_mut().chunks_mut(rest.len()) {
        for (p, r) in row.iter_mut().zip(rest) {
            *p += r;
        }
    }
    Ok(pos)
}

/// Mean over frames of the largest per-vertex L2 error within `region`.
pub fn region_error(
    pred: &RigCurveSequence,
    gt: &RigCurveSequence,
    basis: &VertexBasis,
    region: &[usize],
) -> Result<f64> {
    if region.is_empty() {
        return Err(Error::Config("vertex region is empty".into()));
    }
    if pred.frames() != gt.frames() {
        return Err(Error::Shape(format!(
            "prediction has {} frames, ground truth {}",
            pred.frames(),
            gt.frames()
        )));
    }
    let (p, g) = (rig_to_vertices(pred, basis)?, rig_to_vertices(gt, basis)?);
    let total: f64 = (0..p.rows())
        .map(|t| {
            let (pr, gr) = (p.row(t), g.row(t));
            region
                .iter()
                .map(|&v| {
                    (0..3)
                        .map(|c| (pr[3 * v + c] - gr[3 * v + c]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / p.rows() as f64)
}

/// Lip vertex error in mm.
pub fn lve(pred: &RigCurveSequence, gt: &RigCurveSequence, basis: &VertexBasis) -> Result<f64> {
    region_error(pred, gt, basis, basis.lip())
}

/// Emotional (eye and forehead) vertex error in mm.
pub fn eve(pred: &RigCurveSequence, gt: &RigCurveSequence, basis: &VertexBasis) -> Result<f64> {
    region_error(pred, gt, basis, &basis.emotional())
}

/// R×R matrix as CSV with rig names on both axes.
pub fn matrix_to_csv(m: &Tensor, registry: &RigRegistry) -> Result<String> {
    if m.shape() != [registry.len(), registry.len()] {
        return Err(Error::Shape(format!(
            "heatmap must be {0}×{0}, got {1:?}",
            registry.len(),
            m.shape()
        )));
    }
    let mut s = String::from("rig");
    for n in registry.names() {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for (i, n) in registry.names().iter().enumerate() {
        s.push_str(n);
        for v in m.row(i) {
            write!(s, ",{}", format_value(*v)).expect("string write");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn parse_heatmap(text: &str, registry: &RigRegistry) -> Result<Tensor> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Schema("empty heatmap".into()))?
        .split(',')
        .collect();
    if header.len() != registry.len() + 1 || header[1..].iter().zip(registry.names()).any(|(a, b)| a != b) {
        return Err(Error::Schema("heatmap columns do not match the registry".into()));
    }
    let r = registry.len();
    let mut m = Tensor::zeros(&[r, r]);
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if i >= r || cells.len() != r + 1 || cells[0] != registry.names()[i] {
            return Err(Error::Schema(format!("heatmap row {} is malformed", i + 1)));
        }
        for (j, c) in cells[1..].iter().enumerate() {
            let v: f64 = c
                .parse()
                .map_err(|_| Error::Validation(format!("heatmap row {}, column {}: `{c}`", i + 1, j + 1)))?;
            m.set(i, j, v);
        }
        rows += 1;
    }
    if rows != r {
        return Err(Error::Schema(format!("heatmap has {rows} rows, expected {r}")));
    }
    Ok(m)
}

/// One labelled correlation feature for export.
#[derive(Clone, Debug)]
pub struct LabelledFeature {
    pub id: String,
    pub emotion: EmotionLabel,
    pub feature: CorrelationFeature,
}

/// Element-wise mean of matrices.
pub fn mean_matrix<'a>(ms: impl IntoIterator<Item = &'a Tensor>) -> Option<Tensor> {
    let mut n = 0;
    let mut acc: Option<Tensor> = None;
    for m in ms {
        n += 1;
        match &mut acc {
            None => acc = Some(m.clone()),
            Some(a) => a.add_assign(m),
        }
    }
    acc.map(|mut a| {
        a.scale_assign(1.0 / n as f64);
        a
    })
}

/// Writes `<id>.csv` per feature and `mean_<emotion>.csv` per emotion
/// present into `dir`. Returns the written file names.
pub fn export_heatmap(features: &[LabelledFeature], registry: &RigRegistry, dir: &Path) -> Result<Vec<String>> {
    if features.is_empty() {
        return Err(Error::Size("no features to export".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: String, m: &Tensor| -> Result<()> {
        let p = dir.join(&name);
        std::fs::write(&p, matrix_to_csv(m, registry)?).map_err(|e| Error::io(&p, e))?;
        written.push(name);
        Ok(())
    };
    for f in features {
        write(format!("{}.csv", f.id), &f.feature.matrix)?;
    }
    for e in EmotionLabel::ALL {
        if let Some(m) = mean_matrix(features.iter().filter(|f| f.emotion == e).map(|f| &f.feature.matrix)) {
            write(format!("mean_{}.csv", e.name()), &m)?;
        }
    }
    Ok(written)
}

/// Top-2 principal axes of flattened features.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    /// Variance along each component (per point).
    pub variances: [f64; 2],
    pub points: Vec<[f64; 2]>,
}

/// Power iteration for the dominant eigenpair of a symmetric matrix.
fn dominant_eigen(k: &[Vec<f64>], tol: f64) -> (f64, Vec<f64>) {
    let n = k.len();
    let mut v: Vec<f64> = (0..n).map(|i| ((i + 1) as f64 * 0.7548776662).sin() + 1.3).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut lambda = 0.0;
    for _ in 0..100_000 {
        let w: Vec<f64> = k
            .iter()
            .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (0.0, v);
        }
        let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        let converged = (norm - lambda).abs() <= tol * norm.max(1.0) && delta <= tol.sqrt();
        lambda = norm;
        if converged {
            break;
        }
    }
    (lambda, v)
}

/// PCA of flattened matrices via the N×N Gram matrix. Component signs are
/// fixed so each axis's largest-magnitude coordinate is positive.
pub fn pca(features: &[&Tensor]) -> Result<Pca> {
    let n = features.len();
    if n < 3 {
        return Err(Error::Size(format!("PCA needs at least 3 features, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("features differ in size".into()));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f.data()) {
            *m += v / n as f64;
        }
    }
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.data().iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut k: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let mut components: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    let mut variances = [0.0; 2];
    let mut first = 0.0;
    for c in 0..2 {
        let (lambda, u) = dominant_eigen(&k, 1e-12);
        if c == 0 {
            first = lambda;
        }
        // Residual round-off after deflation is not a direction.
        if lambda > 1e-10 * first {
            variances[c] = lambda / n as f64;
            let mut dir = vec![0.0; d];
            for (ui, xi) in u.iter().zip(&x) {
                for (dj, xj) in dir.iter_mut().zip(xi) {
                    *dj += ui * xj;
                }
            }
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let big = dir
                .iter()
                .cloned()
                .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            let s = if big < 0.0 { -1.0 } else { 1.0 } / norm;
            dir.iter_mut().for_each(|v| *v *= s);
            components[c] = dir;
        }
        for i in 0..n {
            for j in 0..n {
                k[i][j] -= lambda * u[i] * u[j];
            }
        }
    }
    let points = x
        .iter()
        .map(|xi| {
            let p = |c: &Vec<f64>| xi.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        variances,
        points,
    })
}

/// 2-D PCA coordinates of correlation features, in input order.
pub fn pca_embed(features: &[CorrelationFeature]) -> Result<Vec<[f64; 2]>> {
    let refs: Vec<&Tensor> = features.iter().map(|f| &f.matrix).collect();
    Ok(pca(&refs)?.points)
}

/// Mean pairwise Euclidean distance within and between groups.
pub fn cluster_distances(points: &[(EmotionLabel, Vec<f64>)]) -> (f64, f64) {
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = points[i]
                .1
                .iter()
                .zip(&points[j].1)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            if points[i].0 == points[j].0 {
                within += d;
                nw += 1;
            } else {
                between += d;
                nb += 1;
            }
        }
    }
    (within / nw.max(1) as f64, between / nb.max(1) as f64)
}

/// Embedding rows `clip_id,emotion,x,y`.
pub fn embedding_csv(rows: &[(String, EmotionLabel, [f64; 2])]) -> String {
    let mut s = String::from("clip_id,emotion,x,y\n");
    for (id, e, p) in rows {
        writeln!(s, "{id},{e},{},{}", format_value(p[0]), format_value(p[1])).expect("string write");
    }
    s
}

pub fn write_embedding_csv(rows: &[(String, EmotionLabel, [f64; 2])], path: &Path) -> Result<()> {
    std::fs::write(path, embedding_csv(rows)).map_err(|e| Error::io(path, e))
}
