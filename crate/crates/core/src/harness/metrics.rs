//! Box and mask tracking metrics.
//!
//! Success AUC averages, over thresholds `0.00, 0.02, …, 1.00`, the
//! fraction of frames whose IoU is at least the threshold. Precision counts
//! frames with center error within 20 px; normalized precision divides the
//! per-axis error by the ground-truth width and height and uses 0.2.
//! J is mask IoU, F the boundary F-measure with one-pixel tolerance.

use std::fmt::{self, Write as _};

use crate::autodiff::Tensor;
use crate::bbox::BBox;
use crate::error::{Error, Result};

pub const AUC_BINS: usize = 51;
pub const PRECISION_PX: f64 = 20.0;
pub const NORM_PRECISION: f64 = 0.2;

/// Per-frame box measurements.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameBox {
    pub iou: f64,
    pub center_error: f64,
    pub norm_center_error: f64,
}

impl FrameBox {
    pub fn new(pred: BBox, gt: BBox) -> Self {
        let dx = pred.cx - gt.cx;
        let dy = pred.cy - gt.cy;
        Self {
            iou: pred.iou(gt),
            center_error: (dx * dx + dy * dy).sqrt(),
            norm_center_error: ((dx / gt.w).powi(2) + (dy / gt.h).powi(2)).sqrt(),
        }
    }
}

/// Order-independent sums over frames, mergeable across clips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tally {
    pub frames: usize,
    /// Frames with IoU ≥ `k/50`, per bin.
    pub success: [usize; AUC_BINS],
    pub precise: usize,
    pub norm_precise: usize,
    pub iou_sum: f64,
    pub mask_frames: usize,
    pub j_sum: f64,
    pub f_sum: f64,
}

impl Default for Tally {
    fn default() -> Self {
        Self {
            frames: 0,
            success: [0; AUC_BINS],
            precise: 0,
            norm_precise: 0,
            iou_sum: 0.0,
            mask_frames: 0,
            j_sum: 0.0,
            f_sum: 0.0,
        }
    }
}

impl Tally {
    pub fn add_box(&mut self, f: FrameBox) {
        self.frames += 1;
        for (k, s) in self.success.iter_mut().enumerate() {
            if f.iou >= threshold(k) {
                *s += 1;
            }
        }
        self.precise += usize::from(f.center_error <= PRECISION_PX);
        self.norm_precise += usize::from(f.norm_center_error <= NORM_PRECISION);
        self.iou_sum += f.iou;
    }

    pub fn add_mask(&mut self, pred: &Tensor, gt: &Tensor) -> Result<()> {
        let (j, f) = (region_similarity(pred, gt)?, contour_accuracy(pred, gt)?);
        self.mask_frames += 1;
        self.j_sum += j;
        self.f_sum += f;
        Ok(())
    }

    pub fn merge(mut self, other: &Tally) -> Self {
        self.frames += other.frames;
        for (a, b) in self.success.iter_mut().zip(&other.success) {
            *a += b;
        }
        self.precise += other.precise;
        self.norm_precise += other.norm_precise;
        self.iou_sum += other.iou_sum;
        self.mask_frames += other.mask_frames;
        self.j_sum += other.j_sum;
        self.f_sum += other.f_sum;
        self
    }

    pub fn report(&self) -> Report {
        let n = self.frames.max(1) as f64;
        let frac = |c: usize| c as f64 / n;
        let auc = self.success.iter().map(|&c| frac(c)).sum::<f64>() / AUC_BINS as f64;
        let mask = (self.mask_frames > 0).then(|| {
            let m = self.mask_frames as f64;
            let (j, f) = (self.j_sum / m, self.f_sum / m);
            MaskScores { j, f, jf: (j + f) / 2.0 }
        });
        Report {
            frames: self.frames,
            auc,
            precision: frac(self.precise),
            norm_precision: frac(self.norm_precise),
            mean_iou: self.iou_sum / n,
            mask,
        }
    }
}

/// Threshold of AUC bin `k`.
pub fn threshold(k: usize) -> f64 {
    k as f64 / (AUC_BINS - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskScores {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Report {
    pub frames: usize,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub mean_iou: f64,
    pub mask: Option<MaskScores>,
}

impl Report {
    fn rows(&self) -> Vec<(&'static str, String)> {
        let mut rows = vec![
            ("frames", self.frames.to_string()),
            ("auc", format!("{:.6}", self.auc)),
            ("precision", format!("{:.6}", self.precision)),
            ("norm_precision", format!("{:.6}", self.norm_precision)),
            ("mean_iou", format!("{:.6}", self.mean_iou)),
        ];
        if let Some(m) = self.mask {
            rows.push(("j", format!("{:.6}", m.j)));
            rows.push(("f", format!("{:.6}", m.f)));
            rows.push(("jf", format!("{:.6}", m.jf)));
        }
        rows
    }

    /// Machine-readable `key=value` lines.
    pub fn to_key_values(&self) -> String {
        self.rows().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  value", "metric");
        let _ = writeln!(out, "{}  -----", "-".repeat(width));
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>}");
        }
        out
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

fn binary(t: &Tensor) -> Vec<bool> {
    t.data().iter().map(|&v| v > 0.5).collect()
}

fn plane_dims(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize)> {
    let dims = |t: &Tensor| {
        let s = t.shape();
        (s.len() >= 2).then(|| (s[s.len() - 2], s[s.len() - 1]))
    };
    match (dims(pred), dims(gt)) {
        (Some(a), Some(b)) if a == b && pred.numel() == gt.numel() => Ok(a),
        _ => Err(Error::Shape(format!("mask shapes differ: {:?} vs {:?}", pred.shape(), gt.shape()))),
    }
}

/// Mask IoU; two empty masks score 1.
pub fn region_similarity(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    plane_dims(pred, gt)?;
    let (p, g) = (binary(pred), binary(gt));
    let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count();
    let union = p.iter().zip(&g).filter(|(a, b)| **a || **b).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with a 4-neighbor in the background or off the image.
fn boundary(m: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at =
        |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[y as usize * w + x as usize];
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// 3x3 dilation.
fn dilate(m: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !m[y * w + x] {
                continue;
            }
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    out[yy * w + xx] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure: a boundary pixel matches when the other mask has a
/// boundary pixel within one pixel (8-neighborhood). Two empty boundaries
/// score 1, exactly one empty scores 0.
pub fn contour_accuracy(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (h, w) = plane_dims(pred, gt)?;
    let bp = boundary(&binary(pred), h, w);
    let bg = boundary(&binary(gt), h, w);
    let (np, ng) = (bp.iter().filter(|&&b| b).count(), bg.iter().filter(|&&b| b).count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let (dp, dg) = (dilate(&bp, h, w), dilate(&bg, h, w));
    let precision = bp.iter().zip(&dg).filter(|(a, b)| **a && **b).count() as f64 / np as f64;
    let recall = bg.iter().zip(&dp).filter(|(a, b)| **a && **b).count() as f64 / ng as f64;
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

/// Box tally of predicted against ground-truth boxes over `frames`.
pub fn tally_boxes(pred: &[BBox], gt: &[BBox], frames: std::ops::Range<usize>) -> Result<Tally> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!("{} predicted boxes for {} annotated frames", pred.len(), gt.len())));
    }
    let mut t = Tally::default();
    for i in frames {
        t.add_box(FrameBox::new(pred[i], gt[i]));
    }
    Ok(t)
}
