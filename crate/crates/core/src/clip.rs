//! Frame sequences and their conditions.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FrameGeometry {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        FrameGeometry {
            channels,
            height,
            width,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.pixels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `N` frames of `C x H x W` values in `[-1, 1]`; frame 0 is the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    geometry: FrameGeometry,
    frames: Vec<f32>,
    pub id: u64,
}

impl Clip {
    pub fn new(geometry: FrameGeometry, frames: Vec<f32>, id: u64) -> CoreResult<Self> {
        let fl = geometry.len();
        if fl == 0 || frames.is_empty() || !frames.len().is_multiple_of(fl) {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "{} values do not tile frames of {fl}",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("clip frames"));
        }
        Ok(Clip {
            geometry,
            frames,
            id,
        })
    }

    /// Builds a clip after clamping every value into `[-1, 1]`.
    pub fn clamped(geometry: FrameGeometry, mut frames: Vec<f32>, id: u64) -> CoreResult<Self> {
        for v in &mut frames {
            *v = v.clamp(-1.0, 1.0);
        }
        Clip::new(geometry, frames, id)
    }

    pub fn geometry(&self) -> FrameGeometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let fl = self.geometry.len();
        &self.frames[i * fl..(i + 1) * fl]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.frames.chunks_exact(self.geometry.len())
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }
}

/// Per-pixel displacement `(dx, dy)` in pixels, stored as two planes.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            data: vec![0.0; 2 * height * width],
        }
    }

    pub fn uniform(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        let p = height * width;
        let mut data = vec![dx; 2 * p];
        data[p..].iter_mut().for_each(|v| *v = dy);
        FlowField {
            height,
            width,
            data,
        }
    }

    pub fn from_planes(height: usize, width: usize, data: Vec<f32>) -> CoreResult<Self> {
        if data.len() != 2 * height * width {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "flow needs {} values, got {}",
                2 * height * width,
                data.len()
            )));
        }
        Ok(FlowField {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dx(&self) -> &[f32] {
        &self.data[..self.height * self.width]
    }

    pub fn dy(&self) -> &[f32] {
        &self.data[self.height * self.width..]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Flows of every frame back to frame 0; the first entry is the zero field.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalCond {
    flows: Vec<FlowField>,
}

impl TemporalCond {
    pub fn new(flows: Vec<FlowField>) -> CoreResult<Self> {
        let Some(first) = flows.first() else {
            return Err(CoreError::ShapeMismatch(
                "temporal condition needs >= 1 frame".into(),
            ));
        };
        let (h, w) = (first.height, first.width);
        if flows.iter().any(|f| f.height != h || f.width != w) {
            return Err(CoreError::ShapeMismatch(
                "flow fields differ in size".into(),
            ));
        }
        if !first.is_zero() {
            return Err(CoreError::InvalidRange(
                "reference-frame flow must be zero".into(),
            ));
        }
        let bound = h.max(w) as f32;
        if flows
            .iter()
            .any(|f| f.data.iter().any(|v| !v.is_finite() || v.abs() > bound))
        {
            return Err(CoreError::InvalidRange(alloc::format!(
                "flow magnitudes must be finite and <= {bound}"
            )));
        }
        Ok(TemporalCond { flows })
    }

    /// All frames static.
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        TemporalCond {
            flows: (0..frames)
                .map(|_| FlowField::zeros(height, width))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn flow(&self, i: usize) -> &FlowField {
        &self.flows[i]
    }

    pub fn flows(&self) -> &[FlowField] {
        &self.flows
    }
}

/// Per-frame temporal condition; `None` is the null label.
pub type FlowCond<'a> = Option<&'a FlowField>;

/// Semantic (class) condition, or the null label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SemanticCond {
    Class(usize),
    Null,
}

impl SemanticCond {
    /// Row of the embedding table; the null label uses row `classes`.
    pub fn index(&self, classes: usize) -> CoreResult<usize> {
        match *self {
            SemanticCond::Class(c) if c < classes => Ok(c),
            SemanticCond::Class(c) => Err(CoreError::InvalidRange(alloc::format!(
                "class id {c} outside 0..{classes}"
            ))),
            SemanticCond::Null => Ok(classes),
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, SemanticCond::Null)
    }
}

/// A training/evaluation example: frames plus ground-truth conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub clip: Clip,
    pub temporal: TemporalCond,
    pub semantic: SemanticCond,
}
