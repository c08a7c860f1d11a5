use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use super::registry::RigRegistry;
use crate::emotion::EmotionLabel;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const DEFAULT_FRAME_RATE: f64 = 30.0;
pub const WINDOW_FRAMES: usize = 96;
pub const WINDOW_STRIDE_FRAMES: usize = 5;

/// Rig values over frames, `R×T`, bound to a registry by checksum.
#[derive(Clone, Debug, PartialEq)]
pub struct RigCurveSequence {
    values: Tensor,
    frame_rate: f64,
    registry_hash: u64,
}

impl RigCurveSequence {
    /// Validated constructor.
    pub fn new(values: Tensor, frame_rate: f64, registry_hash: u64) -> Result<Self> {
        let seq = RigCurveSequence::from_raw(values, frame_rate, registry_hash);
        if let Some(v) = validate(&seq).into_iter().next() {
            return Err(Error::Validation(v.to_string()));
        }
        Ok(seq)
    }

    /// No checks; pair with [`validate`].
    pub fn from_raw(values: Tensor, frame_rate: f64, registry_hash: u64) -> Self {
        RigCurveSequence {
            values,
            frame_rate,
            registry_hash,
        }
    }

    pub fn zeros(registry: &RigRegistry, frames: usize) -> Self {
        RigCurveSequence::from_raw(
            Tensor::zeros(&[registry.len(), frames]),
            DEFAULT_FRAME_RATE,
            registry.hash(),
        )
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn rigs(&self) -> usize {
        self.values.rows()
    }

    pub fn frames(&self) -> usize {
        if self.values.is_empty() {
            0
        } else {
            self.values.cols()
        }
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn registry_hash(&self) -> u64 {
        self.registry_hash
    }

    /// Every value rounded to the 6-decimal grid the CSV format stores.
    /// Frames `[start, start + len)` as one labelled window.
    pub fn window(&self, start: usize, len: usize, source_clip: &str, label: EmotionLabel) -> Result<RigWindow> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::Index(format!(
                "window [{start}, {}) outside {} frames",
                start + len,
                self.frames()
            )));
        }
        Ok(RigWindow {
            values: frame_slice(&self.values, start, len),
            source_clip: source_clip.to_string(),
            start_frame: start,
            label,
        })
    }

    pub fn quantized(&self) -> Self {
        RigCurveSequence {
            values: self.values.map(quantize),
            ..self.clone()
        }
    }
}

/// Canonical 6-fractional-digit text of a value; negative zero prints as zero.
pub fn format_value(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

/// Nearest value exactly representable in the CSV format.
pub fn quantize(v: f64) -> f64 {
    let q: f64 = format_value(v).parse().expect("formatted float parses");
    q + 0.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    NonFinite,
    OutOfRange,
    NoFrames,
    BadFrameRate,
}

/// One broken invariant, located by rig and frame where applicable.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub rig: Option<usize>,
    pub frame: Option<usize>,
    pub kind: ViolationKind,
    pub value: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ViolationKind::NonFinite => write!(
                f,
                "non-finite value {} at rig {}, frame {}",
                self.value,
                self.rig.unwrap_or(0),
                self.frame.unwrap_or(0)
            ),
            ViolationKind::OutOfRange => write!(
                f,
                "value {} outside [-1, 1] at rig {}, frame {}",
                self.value,
                self.rig.unwrap_or(0),
                self.frame.unwrap_or(0)
            ),
            ViolationKind::NoFrames => write!(f, "sequence has no frames"),
            ViolationKind::BadFrameRate => write!(f, "frame rate {} is not positive", self.value),
        }
    }
}

/// All invariant violations of a sequence; empty iff it is valid.
pub fn validate(seq: &RigCurveSequence) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(seq.frame_rate > 0.0 && seq.frame_rate.is_finite()) {
        out.push(Violation {
            rig: None,
            frame: None,
            kind: ViolationKind::BadFrameRate,
            value: seq.frame_rate,
        });
    }
    let frames = seq.frames();
    if frames == 0 {
        out.push(Violation {
            rig: None,
            frame: None,
            kind: ViolationKind::NoFrames,
            value: 0.0,
        });
        return out;
    }
    for (i, &v) in seq.values.data().iter().enumerate() {
        let kind = if !v.is_finite() {
            ViolationKind::NonFinite
        } else if !(-1.0..=1.0).contains(&v) {
            ViolationKind::OutOfRange
        } else {
            continue;
        };
        out.push(Violation {
            rig: Some(i / frames),
            frame: Some(i % frames),
            kind,
            value: v,
        });
    }
    out
}

/// Writes the canonical rig-CSV: header of rig names, then one row per frame.
pub fn save_rig_curves(seq: &RigCurveSequence, registry: &RigRegistry, path: &Path) -> Result<()> {
    let text = rig_curves_to_csv(seq, registry)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn rig_curves_to_csv(seq: &RigCurveSequence, registry: &RigRegistry) -> Result<String> {
    if seq.registry_hash != registry.hash() || seq.rigs() != registry.len() {
        return Err(Error::Compatibility(
            "sequence was not built against this registry".into(),
        ));
    }
    let mut out = registry.names().join(",");
    out.push('\n');
    let (rigs, frames) = (seq.rigs(), seq.frames());
    for t in 0..frames {
        for r in 0..rigs {
            if r > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", format_value(seq.values.at(r, t)));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn load_rig_curves(path: &Path, registry: &RigRegistry) -> Result<RigCurveSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rig_csv(&text, registry)
}

pub fn parse_rig_csv(text: &str, registry: &RigRegistry) -> Result<RigCurveSequence> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Schema("empty rig CSV".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();

    let mut seen = std::collections::HashSet::new();
    let mut extra = Vec::new();
    let mut dup = Vec::new();
    let mut col_to_rig = Vec::with_capacity(columns.len());
    for c in &columns {
        if !seen.insert(*c) {
            dup.push(*c);
        }
        match registry.index_of(c) {
            Some(i) => col_to_rig.push(i),
            None => extra.push(*c),
        }
    }
    let missing: Vec<&str> = registry
        .names()
        .iter()
        .filter(|n| !seen.contains(n.as_str()))
        .map(|n| n.as_str())
        .collect();
    if !extra.is_empty() || !missing.is_empty() || !dup.is_empty() {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing rigs: {}", missing.join(", ")));
        }
        if !extra.is_empty() {
            parts.push(format!("unknown rigs: {}", extra.join(", ")));
        }
        if !dup.is_empty() {
            parts.push(format!("duplicated rigs: {}", dup.join(", ")));
        }
        return Err(Error::Schema(parts.join("; ")));
    }

    let rigs = registry.len();
    let mut frames: Vec<Vec<f64>> = Vec::new();
    for (row_idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != rigs {
            return Err(Error::Schema(format!(
                "data row {} has {} cells, expected {}",
                row_idx + 1,
                cells.len(),
                rigs
            )));
        }
        let mut frame = vec![0.0; rigs];
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Validation(format!(
                    "unparseable value `{cell}` at row {}, column {} ({})",
                    row_idx + 1,
                    col,
                    columns[col]
                ))
            })?;
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "value {v} at row {}, column {} ({}) is not finite in [-1, 1]",
                    row_idx + 1,
                    col,
                    columns[col]
                )));
            }
            frame[col_to_rig[col]] = v + 0.0;
        }
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(Error::Validation("rig CSV has no data rows".into()));
    }
    let t = frames.len();
    let values = Tensor::from_fn(rigs, t, |r, f| frames[f][r]);
    Ok(RigCurveSequence::from_raw(values, DEFAULT_FRAME_RATE, registry.hash()))
}

/// A fixed-length slice of a clip's rig curves, with its emotion label.
#[derive(Clone, Debug, PartialEq)]
pub struct RigWindow {
    pub values: Tensor,
    pub source_clip: String,
    pub start_frame: usize,
    pub label: EmotionLabel,
}

impl RigWindow {
    pub fn frames(&self) -> usize {
        self.values.cols()
    }

    pub fn as_sequence(&self, registry_hash: u64) -> RigCurveSequence {
        RigCurveSequence::from_raw(self.values.clone(), DEFAULT_FRAME_RATE, registry_hash)
    }
}

/// `floor((frames − window)/stride) + 1` when the clip holds at least one
/// window, else zero.
pub fn window_count(frames: usize, window: usize, stride: usize) -> usize {
    if window == 0 || stride == 0 || frames < window {
        0
    } else {
        (frames - window) / stride + 1
    }
}

/// Windows starting at frames `0, stride, 2·stride, …`.
pub fn slide_windows(
    seq: &RigCurveSequence,
    window: usize,
    stride: usize,
    source_clip: &str,
    label: EmotionLabel,
) -> Result<Vec<RigWindow>> {
    if window == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window ({window}) and stride ({stride}) must be ≥ 1"
        )));
    }
    let count = window_count(seq.frames(), window, stride);
    Ok((0..count)
        .map(|k| RigWindow {
            values: frame_slice(&seq.values, k * stride, window),
            source_clip: source_clip.to_string(),
            start_frame: k * stride,
            label,
        })
        .collect())
}

pub(crate) fn frame_slice(values: &Tensor, start: usize, len: usize) -> Tensor {
    Tensor::from_fn(values.rows(), len, |r, t| values.at(r, start + t))
}
