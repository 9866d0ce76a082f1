//! Synthetic multimodal clips and their on-disk format.

mod io;
mod synth;
pub mod vocab;

pub use io::{load_clip, load_dataset, read_pgm, read_ppm, save_clip, save_dataset, write_pgm, write_ppm};
pub use synth::{generate_clip, generate_dataset, GenConfig};
pub use vocab::{tokenize, Vocabulary};

use crate::autodiff::Tensor;
use crate::bbox::BBox;

/// One synthetic video sample. All per-frame sequences have equal length;
/// images hold 8-bit-representable values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub seed: u64,
    /// Frame side in pixels.
    pub size: usize,
    /// `(3, S, S)` RGB frames.
    pub frames: Vec<Tensor>,
    /// Target boxes in frame pixels, equal to the mask bounding rectangle.
    pub boxes: Vec<BBox>,
    /// `(1, S, S)` binary target masks.
    pub masks: Vec<Tensor>,
    pub depth: Vec<Tensor>,
    pub thermal: Vec<Tensor>,
    pub event: Vec<Tensor>,
    pub text: String,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Bounding rectangle `(x0, y0, x1, y1)` (exclusive ends) of pixels above
/// 0.5 in a `(1, S, S)` or `(S, S)` mask.
pub fn mask_bounds(mask: &Tensor) -> Option<(usize, usize, usize, usize)> {
    let shape = mask.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let d = mask.data();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if d[y * w + x] > 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then_some((x0, y0, x1, y1))
}

pub fn mask_box(mask: &Tensor) -> Option<BBox> {
    mask_bounds(mask).map(|(x0, y0, x1, y1)| BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
}

/// Rounds to the nearest multiple of 1/255.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}
