//! Training objectives: focal heatmap loss, GIoU and L1 box losses, the
//! box-projection mask loss and supervised mask loss.

use crate::autodiff::{Tape, Tensor, Var};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::heads::BoxMapVars;

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
pub const SCORE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub iou: f64,
    pub l1: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { iou: 2.0, l1: 5.0, mask: 1.0 }
    }
}

/// Grid cell `(row, col)` holding a normalized center.
pub fn center_cell(b: BBox, g: usize) -> (usize, usize) {
    let idx = |v: f64| ((v * g as f64).floor().max(0.0) as usize).min(g - 1);
    (idx(b.cy), idx(b.cx))
}

/// Gaussian splat on a `(G, G)` grid around the center cell of `b`, with
/// `σ = max(1, 0.5·√(w·h)·G)` cells and zero beyond `3σ`.
pub fn gaussian_target(b: BBox, g: usize) -> Tensor {
    let (cr, cc) = center_cell(b, g);
    let sigma = (0.5 * (b.w * b.h).sqrt() * g as f64).max(1.0);
    let mut data = vec![0.0; g * g];
    for r in 0..g {
        for c in 0..g {
            let d2 = (r as f64 - cr as f64).powi(2) + (c as f64 - cc as f64).powi(2);
            if d2 <= 9.0 * sigma * sigma {
                data[r * g + c] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    Tensor::from_parts(vec![g, g], data)
}

/// Penalty-reduced focal loss over a score map of any shape whose element
/// count matches `target`.
pub fn weighted_focal(tape: &mut Tape, score: Var, target: &Tensor) -> Result<Var> {
    let shape = tape.shape(score).to_vec();
    if shape.iter().product::<usize>() != target.numel() {
        return Err(Error::Shape(format!("focal: score {shape:?} vs target {:?}", target.shape())));
    }
    let y = target.data();
    let n_pos = y.iter().filter(|&&v| v == 1.0).count();
    if n_pos == 0 {
        return Err(Error::InvalidInput("focal: target has no positive cell".into()));
    }
    let pos: Vec<f64> = y.iter().map(|&v| if v == 1.0 { 1.0 } else { 0.0 }).collect();
    let neg: Vec<f64> = y.iter().map(|&v| if v == 1.0 { 0.0 } else { (1.0 - v).powf(FOCAL_BETA) }).collect();
    let pos = tape.constant(Tensor::from_parts(shape.clone(), pos));
    let neg = tape.constant(Tensor::from_parts(shape, neg));

    let p = tape.clamp(score, SCORE_EPS, 1.0 - SCORE_EPS);
    let q = tape.affine(p, -1.0, 1.0);
    let log_p = tape.log(p);
    let log_q = tape.log(q);
    let q_a = tape.powf(q, FOCAL_ALPHA);
    let p_a = tape.powf(p, FOCAL_ALPHA);
    let pos_term = tape.mul(q_a, log_p)?;
    let pos_term = tape.mul(pos_term, pos)?;
    let neg_term = tape.mul(p_a, log_q)?;
    let neg_term = tape.mul(neg_term, neg)?;
    let all = tape.add(pos_term, neg_term)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, -1.0 / n_pos as f64))
}

/// Box on the tape as `(2, 1)` center and size columns, x then y.
#[derive(Clone, Copy, Debug)]
pub struct BoxVars {
    pub center: Var,
    pub size: Var,
}

impl BoxVars {
    pub fn constant(tape: &mut Tape, b: BBox) -> Self {
        Self {
            center: tape.constant(Tensor::from_parts(vec![2, 1], vec![b.cx, b.cy])),
            size: tape.constant(Tensor::from_parts(vec![2, 1], vec![b.w, b.h])),
        }
    }

    /// The box the head predicts at grid cell `(row, col)`.
    pub fn at_cell(tape: &mut Tape, maps: &BoxMapVars, row: usize, col: usize) -> Result<Self> {
        let g = maps.grid;
        let cell = row * g + col;
        let pick = |tape: &mut Tape, v: Var| -> Result<Var> {
            let r = tape.reshape(v, &[2, g * g])?;
            let t = tape.transpose_last2(r)?;
            let row = tape.gather_rows(t, &[cell])?;
            Ok(tape.reshape(row, &[2, 1])?)
        };
        let off = pick(tape, maps.offset)?;
        let size = pick(tape, maps.size)?;
        let base = tape.constant(Tensor::from_parts(vec![2, 1], vec![col as f64, row as f64]));
        let c = tape.add(off, base)?;
        let center = tape.scale(c, 1.0 / g as f64);
        Ok(Self { center, size })
    }

    fn corners(&self, tape: &mut Tape) -> Result<(Var, Var)> {
        let half = tape.scale(self.size, 0.5);
        Ok((tape.sub(self.center, half)?, tape.add(self.center, half)?))
    }
}

/// Product of the two rows of a `(2, 1)` column.
fn area(tape: &mut Tape, wh: Var) -> Result<Var> {
    let w = tape.slice_firstdim(wh, 0, 1)?;
    let h = tape.slice_firstdim(wh, 1, 2)?;
    Ok(tape.mul(w, h)?)
}

fn check_gt(gt: BBox, what: &str) -> Result<()> {
    if gt.is_degenerate() {
        return Err(Error::InvalidInput(format!("{what}: degenerate ground-truth box {gt:?}")));
    }
    Ok(())
}

/// `1 − GIoU(pred, gt)`.
pub fn giou_loss(tape: &mut Tape, pred: BoxVars, gt: BBox) -> Result<Var> {
    check_gt(gt, "giou")?;
    let g = BoxVars::constant(tape, gt);
    let (p_lo, p_hi) = pred.corners(tape)?;
    let (g_lo, g_hi) = g.corners(tape)?;
    let i_lo = tape.maximum(p_lo, g_lo)?;
    let i_hi = tape.minimum(p_hi, g_hi)?;
    let i_wh = tape.sub(i_hi, i_lo)?;
    let i_wh = tape.relu(i_wh);
    let inter = area(tape, i_wh)?;
    let p_area = area(tape, pred.size)?;
    let g_area = gt.w * gt.h;
    let sum = tape.affine(p_area, 1.0, g_area);
    let union = tape.sub(sum, inter)?;
    let iou = tape.div(inter, union)?;
    let e_lo = tape.minimum(p_lo, g_lo)?;
    let e_hi = tape.maximum(p_hi, g_hi)?;
    let e_wh = tape.sub(e_hi, e_lo)?;
    let enclosing = area(tape, e_wh)?;
    let gap = tape.sub(enclosing, union)?;
    let penalty = tape.div(gap, enclosing)?;
    let giou = tape.sub(iou, penalty)?;
    let loss = tape.affine(giou, -1.0, 1.0);
    Ok(tape.sum(loss))
}

/// Mean absolute difference over `(cx, cy, w, h)`.
pub fn l1_box_loss(tape: &mut Tape, pred: BoxVars, gt: BBox) -> Result<Var> {
    let p = tape.concat_firstdim(&[pred.center, pred.size])?;
    let g = tape.constant(Tensor::from_parts(vec![4, 1], vec![gt.cx, gt.cy, gt.w, gt.h]));
    let d = tape.sub(p, g)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// `1 − 2Σab / (Σa² + Σb²)` against a constant `b`.
fn dice(tape: &mut Tape, a: Var, b: &Tensor) -> Result<Var> {
    let bv = tape.constant(b.clone());
    let ab = tape.mul(a, bv)?;
    let num = tape.sum(ab);
    let a2 = tape.mul(a, a)?;
    let a2 = tape.sum(a2);
    let b2: f64 = b.data().iter().map(|v| v * v).sum();
    let den = tape.affine(a2, 1.0, b2);
    let ratio = tape.div(num, den)?;
    Ok(tape.affine(ratio, -2.0, 1.0))
}

/// Pixel-center coverage of `[lo, hi]` on an `n`-pixel axis of unit length.
fn axis_indicator(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let c = (i as f64 + 0.5) / n as f64;
            if c >= lo && c <= hi {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Projection loss: Dice between the column/row max-projections of the
/// predicted mask and the box's column/row indicators.
pub fn boxinst_projection_loss(tape: &mut Tape, logits: Var, gt: BBox) -> Result<Var> {
    check_gt(gt, "box projection")?;
    let shape = tape.shape(logits).to_vec();
    let &[h, w] = shape.as_slice() else {
        return Err(Error::Shape(format!("mask logits must be (H, W), got {shape:?}")));
    };
    let [x0, y0, x1, y1] = gt.corners();
    let bx = axis_indicator(x0, x1, w);
    let by = axis_indicator(y0, y1, h);
    if !bx.contains(&1.0) || !by.contains(&1.0) {
        return Err(Error::InvalidInput(format!("box projection: {gt:?} covers no pixel center")));
    }
    let m = tape.sigmoid(logits);
    let px = tape.max_dim(m, 0)?;
    let py = tape.max_dim(m, 1)?;
    let dx = dice(tape, px, &Tensor::from_parts(vec![w], bx))?;
    let dy = dice(tape, py, &Tensor::from_parts(vec![h], by))?;
    Ok(tape.add(dx, dy)?)
}

/// Mean binary cross-entropy on logits plus Dice on probabilities.
pub fn mask_bce_dice(tape: &mut Tape, logits: Var, gt: &Tensor) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.iter().product::<usize>() != gt.numel() {
        return Err(Error::Shape(format!("mask loss: logits {shape:?} vs mask {:?}", gt.shape())));
    }
    let y = tape.constant(Tensor::from_parts(shape.clone(), gt.data().to_vec()));
    // x/2 − x·y + (|x|/2 + log(1 + exp(−|x|))); the bracket is flat at 0,
    // so logits sitting exactly at zero still get the sigmoid gradient.
    let a = tape.abs(logits);
    let e = tape.affine(a, -1.0, 0.0);
    let e = tape.exp(e);
    let e = tape.affine(e, 1.0, 1.0);
    let soft = tape.log(e);
    let half_a = tape.affine(a, 0.5, 0.0);
    let even = tape.add(half_a, soft)?;
    let xy = tape.mul(logits, y)?;
    let half_x = tape.affine(logits, 0.5, 0.0);
    let bce = tape.sub(half_x, xy)?;
    let bce = tape.add(bce, even)?;
    let bce = tape.mean(bce);
    let p = tape.sigmoid(logits);
    let flat_gt = Tensor::from_parts(shape, gt.data().to_vec());
    let d = dice(tape, p, &flat_gt)?;
    Ok(tape.add(bce, d)?)
}

/// Which mask term a stage/task combination uses.
#[derive(Clone, Copy, Debug)]
pub enum MaskTerm<'a> {
    None,
    BoxProjection,
    GroundTruth(&'a Tensor),
}

/// Scalar loss values for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub mask: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(&self, w: &LossWeights) -> f64 {
        self.cls + w.iou * self.iou + w.l1 * self.l1 + w.mask * self.mask
    }
}

/// `L_cls + λ_iou·L_iou + λ_L1·L_1 + λ_mask·L_mask` for one sample, with
/// the box terms read at the ground-truth center cell.
pub fn stage_loss(
    tape: &mut Tape,
    maps: &BoxMapVars,
    mask_logits: Option<Var>,
    gt: BBox,
    mask: MaskTerm<'_>,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    check_gt(gt, "stage loss")?;
    let g = maps.grid;
    let target = gaussian_target(gt, g);
    let cls = weighted_focal(tape, maps.score, &target)?;
    let (row, col) = center_cell(gt, g);
    let pred = BoxVars::at_cell(tape, maps, row, col)?;
    let iou = giou_loss(tape, pred, gt)?;
    let l1 = l1_box_loss(tape, pred, gt)?;
    let mask_loss = match mask {
        MaskTerm::None => None,
        MaskTerm::BoxProjection | MaskTerm::GroundTruth(_) => {
            let logits = mask_logits
                .ok_or_else(|| Error::InvalidInput("stage loss: mask term requested without mask logits".into()))?;
            Some(match mask {
                MaskTerm::GroundTruth(m) => mask_bce_dice(tape, logits, m)?,
                _ => boxinst_projection_loss(tape, logits, gt)?,
            })
        }
    };
    let wi = tape.scale(iou, weights.iou);
    let wl = tape.scale(l1, weights.l1);
    let mut total = tape.add(cls, wi)?;
    total = tape.add(total, wl)?;
    if let Some(m) = mask_loss {
        let wm = tape.scale(m, weights.mask);
        total = tape.add(total, wm)?;
    }
    let item = |tape: &Tape, v: Var| tape.value(v).data()[0];
    let breakdown = LossBreakdown {
        cls: item(tape, cls),
        iou: item(tape, iou),
        l1: item(tape, l1),
        mask: mask_loss.map(|m| item(tape, m)).unwrap_or(0.0),
        total: item(tape, total),
    };
    Ok((total, breakdown))
}
