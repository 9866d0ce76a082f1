//! Box and segmentation heads over the search-token grid.

use crate::autodiff::{ParamGroup, ParamStore, Registry, Tape, Tensor, Var};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};

fn grid_of(tape: &Tape, tokens: Var, dim: usize) -> Result<usize> {
    let shape = tape.shape(tokens);
    if shape.len() != 2 || shape[1] != dim {
        return Err(Error::Shape(format!("head expects (N_s, {dim}) tokens, got {shape:?}")));
    }
    let n = shape[0];
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n || n == 0 {
        return Err(Error::Shape(format!("{n} search tokens do not form a square grid")));
    }
    Ok(g)
}

/// conv3x3 -> relu -> conv1x1.
#[derive(Clone, Debug)]
pub struct ConvBranch {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ConvBranch {
    fn declare(reg: &mut Registry, name: &str, dim: usize, channels: usize, out: usize) -> Result<Self> {
        let g = ParamGroup::BoxHead;
        Ok(Self {
            conv1: Conv2d::declare(reg, &format!("{name}.conv1"), dim, channels, 3, 1, 1, g)?,
            conv2: Conv2d::declare(reg, &format!("{name}.conv2"), channels, out, 1, 1, 0, g)?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv1.forward(tape, store, x)?;
        let y = tape.relu(y);
        self.conv2.forward(tape, store, y)
    }
}

/// Center-score, sub-cell offset and size maps on the search grid.
#[derive(Clone, Copy, Debug)]
pub struct BoxMapVars {
    /// `(1, G, G)` after sigmoid.
    pub score: Var,
    /// `(2, G, G)` x then y offset after sigmoid.
    pub offset: Var,
    /// `(2, G, G)` width then height after sigmoid.
    pub size: Var,
    pub grid: usize,
}

/// Plain-value copy of [`BoxMapVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct BoxMaps {
    pub score: Tensor,
    pub offset: Tensor,
    pub size: Tensor,
    pub grid: usize,
}

impl BoxMaps {
    pub fn from_tape(tape: &Tape, v: &BoxMapVars) -> Self {
        Self {
            score: tape.value(v.score).clone(),
            offset: tape.value(v.offset).clone(),
            size: tape.value(v.size).clone(),
            grid: v.grid,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoxHead {
    pub dim: usize,
    pub score: ConvBranch,
    pub offset: ConvBranch,
    pub size: ConvBranch,
}

impl BoxHead {
    pub fn declare(reg: &mut Registry, dim: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            dim,
            score: ConvBranch::declare(reg, "box_head.score", dim, channels, 1)?,
            offset: ConvBranch::declare(reg, "box_head.offset", dim, channels, 2)?,
            size: ConvBranch::declare(reg, "box_head.size", dim, channels, 2)?,
        })
    }

    pub fn param_count(dim: usize, channels: usize) -> usize {
        let branch = |out: usize| (channels * dim * 9 + channels) + (out * channels + out);
        branch(1) + branch(2) + branch(2)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Result<BoxMapVars> {
        let g = grid_of(tape, tokens, self.dim)?;
        let t = tape.transpose_last2(tokens)?;
        let x = tape.reshape(t, &[1, self.dim, g, g])?;
        let mut out = [x; 3];
        for (slot, (branch, c)) in out.iter_mut().zip([(&self.score, 1), (&self.offset, 2), (&self.size, 2)]) {
            let y = branch.forward(tape, store, x)?;
            let y = tape.sigmoid(y);
            *slot = tape.reshape(y, &[c, g, g])?;
        }
        Ok(BoxMapVars { score: out[0], offset: out[1], size: out[2], grid: g })
    }
}

/// Picks the peak of `score ∘ penalty` (ties to the smallest row-major
/// index) and reads the box at that cell. Returns the box in normalized
/// search-crop coordinates and the unpenalized peak score.
pub fn decode_box(maps: &BoxMaps, penalty: Option<&Tensor>) -> (BBox, f64) {
    let g = maps.grid;
    let n = g * g;
    let score = &maps.score.data()[..n];
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &s) in score.iter().enumerate() {
        let v = match penalty {
            Some(p) => s * p.data()[i],
            None => s,
        };
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    let (row, col) = (best / g, best % g);
    let off = maps.offset.data();
    let size = maps.size.data();
    let unit = |v: f64| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.5 };
    let gf = g as f64;
    let cx = (col as f64 + unit(off[best])) / gf;
    let cy = (row as f64 + unit(off[n + best])) / gf;
    let w = unit(size[best]).max(1e-6);
    let h = unit(size[n + best]).max(1e-6);
    (BBox::new(cx.clamp(0.0, 1.0), cy.clamp(0.0, 1.0), w, h), score[best])
}

/// Upsampling factors for the two seg-head stages, product = patch size.
pub fn seg_factors(patch: usize) -> (usize, usize) {
    if patch.is_multiple_of(4) {
        (4, patch / 4)
    } else {
        (patch, 1)
    }
}

/// Token grid to per-pixel logits through two stride-equals-kernel
/// transposed convolutions and a 1x1 output conv, kept channel-last.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub dim: usize,
    pub factors: (usize, usize),
    pub channels: (usize, usize),
    pub up1: Linear,
    pub up2: Linear,
    pub out: Linear,
}

impl SegHead {
    pub fn declare(reg: &mut Registry, dim: usize, patch: usize, channels: usize) -> Result<Self> {
        let (f1, f2) = seg_factors(patch);
        let (c1, c2) = ((channels / 2).max(1), (channels / 4).max(1));
        let g = ParamGroup::SegHead;
        Ok(Self {
            dim,
            factors: (f1, f2),
            channels: (c1, c2),
            up1: Linear::declare(reg, "seg_head.up1", dim, c1 * f1 * f1, true, g)?,
            up2: Linear::declare(reg, "seg_head.up2", c1, c2 * f2 * f2, true, g)?,
            out: Linear::declare(reg, "seg_head.out", c2, 1, true, g)?,
        })
    }

    pub fn param_count(dim: usize, patch: usize, channels: usize) -> usize {
        let (f1, f2) = seg_factors(patch);
        let (c1, c2) = ((channels / 2).max(1), (channels / 4).max(1));
        (dim * c1 * f1 * f1 + c1 * f1 * f1) + (c1 * c2 * f2 * f2 + c2 * f2 * f2) + (c2 + 1)
    }

    /// `(H·W, C·f·f)` rows of an `(H, W)` grid to `(H·f·W·f, C)` rows.
    fn shuffle(tape: &mut Tape, x: Var, h: usize, c: usize, f: usize) -> Result<Var> {
        let r = tape.reshape(x, &[h, h, c, f, f])?;
        let p = tape.permute(r, &[0, 3, 1, 4, 2])?;
        Ok(tape.reshape(p, &[h * f * h * f, c])?)
    }

    /// `(G², D)` search tokens to `(G·p, G·p)` logits.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Result<Var> {
        let g = grid_of(tape, tokens, self.dim)?;
        let (f1, f2) = self.factors;
        let (c1, c2) = self.channels;
        let y = self.up1.forward(tape, store, tokens)?;
        let y = tape.relu(y);
        let y = Self::shuffle(tape, y, g, c1, f1)?;
        let y = self.up2.forward(tape, store, y)?;
        let y = tape.relu(y);
        let y = Self::shuffle(tape, y, g * f1, c2, f2)?;
        let y = self.out.forward(tape, store, y)?;
        let s = g * f1 * f2;
        Ok(tape.reshape(y, &[s, s])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps_with_peak(g: usize, peak: usize, off: (f64, f64), size: (f64, f64)) -> BoxMaps {
        let n = g * g;
        let mut score = vec![0.1; n];
        score[peak] = 0.9;
        let mut offset = vec![0.0; 2 * n];
        offset[peak] = off.0;
        offset[n + peak] = off.1;
        let mut sz = vec![0.1; 2 * n];
        sz[peak] = size.0;
        sz[n + peak] = size.1;
        BoxMaps {
            score: Tensor::new(vec![1, g, g], score).unwrap(),
            offset: Tensor::new(vec![2, g, g], offset).unwrap(),
            size: Tensor::new(vec![2, g, g], sz).unwrap(),
            grid: g,
        }
    }

    #[test]
    fn decode_reads_cell_offset_and_size() {
        let maps = maps_with_peak(8, 3 * 8 + 3, (0.5, 0.5), (0.25, 0.25));
        let (b, s) = decode_box(&maps, None);
        assert_eq!(b, BBox::new(0.4375, 0.4375, 0.25, 0.25));
        assert_eq!(s, 0.9);
        let ones = Tensor::ones(&[8, 8]);
        assert_eq!(decode_box(&maps, Some(&ones)), (b, s));
    }

    #[test]
    fn ties_go_to_the_first_cell() {
        let mut maps = maps_with_peak(4, 0, (0.0, 0.0), (0.5, 0.5));
        maps.score = Tensor::full(&[1, 4, 4], 0.5);
        let (b, _) = decode_box(&maps, None);
        assert_eq!((b.cx, b.cy), (0.0, 0.0));
    }

    #[test]
    fn zero_weights_give_half_scores_and_logits() {
        let mut reg = Registry::new();
        let bh = BoxHead::declare(&mut reg, 16, 8).unwrap();
        let sh = SegHead::declare(&mut reg, 16, 8, 16).unwrap();
        let mut store = ParamStore::materialize(&reg, 1);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.get(id).value.shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::full(&[64, 16], 0.3));
        let maps = bh.forward(&mut tape, &store, t).unwrap();
        assert_eq!(tape.shape(maps.score), &[1, 8, 8]);
        assert!(tape.value(maps.score).data().iter().all(|&v| v == 0.5));
        let logits = sh.forward(&mut tape, &store, t).unwrap();
        assert_eq!(tape.shape(logits), &[64, 64]);
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn counts_match_declarations() {
        let mut reg = Registry::new();
        BoxHead::declare(&mut reg, 16, 8).unwrap();
        assert_eq!(reg.decls().iter().map(|d| d.numel()).sum::<usize>(), BoxHead::param_count(16, 8));
        let mut reg = Registry::new();
        SegHead::declare(&mut reg, 16, 16, 16).unwrap();
        assert_eq!(reg.decls().iter().map(|d| d.numel()).sum::<usize>(), SegHead::param_count(16, 16, 16));
    }

    #[test]
    fn non_square_tokens_are_rejected() {
        let mut reg = Registry::new();
        let bh = BoxHead::declare(&mut reg, 16, 8).unwrap();
        let store = ParamStore::materialize(&reg, 0);
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::zeros(&[15, 16]));
        assert!(matches!(bh.forward(&mut tape, &store, t), Err(Error::Shape(_))));
    }

    #[test]
    fn seg_shuffle_places_subpixels() {
        // A single token whose up1 output encodes the sub-pixel index.
        let mut reg = Registry::new();
        let sh = SegHead::declare(&mut reg, 1, 2, 4).unwrap();
        assert_eq!(sh.factors, (2, 1));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2 * 2 * 2], (0..8).map(f64::from).collect()).unwrap());
        let y = SegHead::shuffle(&mut tape, x, 1, 2, 2).unwrap();
        // Channel-last rows for pixels (0,0), (0,1), (1,0), (1,1).
        assert_eq!(tape.value(y).data(), &[0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
    }
}
