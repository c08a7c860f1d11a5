//! Control-rig registry, rig-curve sequences, windowing and file I/O.

mod curves;
mod manifest;
mod registry;

pub use curves::{
    format_value, load_rig_curves, parse_rig_csv, quantize, rig_curves_to_csv, save_rig_curves, slide_windows,
    validate, window_count, RigCurveSequence, RigWindow, Violation, ViolationKind, DEFAULT_FRAME_RATE, WINDOW_FRAMES,
    WINDOW_STRIDE_FRAMES,
};
pub use manifest::{ClipEntry, ClipManifest};
pub use registry::{Region, RigRegistry, DEFAULT_RIG_COUNT};

#[cfg(test)]
mod tests;
