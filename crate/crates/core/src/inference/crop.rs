//! Square crop windows, bilinear resampling and the crop/frame affine map.

use crate::autodiff::Tensor;
use crate::bbox::BBox;
use crate::error::{Error, Result};

/// Square window of side `side` frame pixels with top-left `(x0, y0)`,
/// resampled to `out_size` pixels per side. Crop pixel `u` covers frame
/// interval `[x0 + u·scale, x0 + (u+1)·scale)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out_size: usize,
}

impl CropWindow {
    /// Window of side `factor·√(w·h)` centered on `b` (frame pixels).
    pub fn around(b: BBox, factor: f64, out_size: usize) -> Result<Self> {
        if b.is_degenerate() {
            return Err(Error::InvalidInput(format!("crop around degenerate box {b:?}")));
        }
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidInput(format!("crop factor must be positive, got {factor}")));
        }
        if out_size == 0 {
            return Err(Error::InvalidInput("crop output size must be positive".into()));
        }
        let side = factor * (b.w * b.h).sqrt();
        Ok(Self { x0: b.cx - side / 2.0, y0: b.cy - side / 2.0, side, out_size })
    }

    /// The whole square frame of side `size`.
    pub fn full(size: usize, out_size: usize) -> Self {
        Self { x0: 0.0, y0: 0.0, side: size as f64, out_size }
    }

    /// Frame pixels per crop pixel.
    pub fn scale(&self) -> f64 {
        self.side / self.out_size as f64
    }

    /// Crop pixel coordinates to frame pixel coordinates.
    pub fn to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        let s = self.scale();
        (self.x0 + u * s, self.y0 + v * s)
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.scale();
        ((x - self.x0) / s, (y - self.y0) / s)
    }

    /// Normalized crop box to frame pixels.
    pub fn box_to_frame(&self, b: BBox) -> BBox {
        BBox::new(self.x0 + b.cx * self.side, self.y0 + b.cy * self.side, b.w * self.side, b.h * self.side)
    }

    /// Frame-pixel box to normalized crop coordinates.
    pub fn box_to_crop(&self, b: BBox) -> BBox {
        BBox::new((b.cx - self.x0) / self.side, (b.cy - self.y0) / self.side, b.w / self.side, b.h / self.side)
    }

    /// Bilinear resampling of a `(C, H, W)` image at crop pixel centers.
    /// Points outside the frame read zero.
    pub fn sample(&self, image: &Tensor) -> Result<Tensor> {
        let &[c, h, w] = image.shape() else {
            return Err(Error::Shape(format!("crop expects a (C, H, W) image, got {:?}", image.shape())));
        };
        let n = self.out_size;
        let s = self.scale();
        let src = image.data();
        let xs: Vec<Option<Tap>> = (0..n).map(|u| Tap::new(self.x0 + (u as f64 + 0.5) * s, w)).collect();
        let ys: Vec<Option<Tap>> = (0..n).map(|v| Tap::new(self.y0 + (v as f64 + 0.5) * s, h)).collect();
        let mut out = vec![0.0; c * n * n];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (v, ty) in ys.iter().enumerate() {
                let Some(ty) = ty else { continue };
                for (u, tx) in xs.iter().enumerate() {
                    let Some(tx) = tx else { continue };
                    out[ch * n * n + v * n + u] = bilinear(plane, w, ty, tx);
                }
            }
        }
        Ok(Tensor::new(vec![c, n, n], out)?)
    }

    /// Inverse of [`CropWindow::sample`] for a single-channel crop map:
    /// resamples it onto a `size x size` frame, filling `fill` outside
    /// the window.
    pub fn paste(&self, crop: &Tensor, size: usize, fill: f64) -> Result<Tensor> {
        let n = self.out_size;
        if crop.numel() != n * n {
            return Err(Error::Shape(format!("paste expects {n}x{n} values, got {:?}", crop.shape())));
        }
        let s = self.scale();
        let xs: Vec<Option<Tap>> = (0..size).map(|x| Tap::new((x as f64 + 0.5 - self.x0) / s, n)).collect();
        let ys: Vec<Option<Tap>> = (0..size).map(|y| Tap::new((y as f64 + 0.5 - self.y0) / s, n)).collect();
        let mut out = vec![fill; size * size];
        for (y, ty) in ys.iter().enumerate() {
            let Some(ty) = ty else { continue };
            for (x, tx) in xs.iter().enumerate() {
                let Some(tx) = tx else { continue };
                out[y * size + x] = bilinear(crop.data(), n, ty, tx);
            }
        }
        Ok(Tensor::new(vec![1, size, size], out)?)
    }
}

/// Two neighboring source indices and the weight of the second, for a
/// continuous coordinate in pixel-edge units. `None` outside the image.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f64,
}

impl Tap {
    fn new(pos: f64, n: usize) -> Option<Self> {
        if !(pos >= 0.0 && pos <= n as f64) {
            return None;
        }
        let f = (pos - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = f.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        Some(Self { lo, hi, t: f - lo as f64 })
    }
}

fn bilinear(plane: &[f64], w: usize, ty: &Tap, tx: &Tap) -> f64 {
    let at = |r: usize, c: usize| plane[r * w + c];
    let top = at(ty.lo, tx.lo) * (1.0 - tx.t) + at(ty.lo, tx.hi) * tx.t;
    let bot = at(ty.hi, tx.lo) * (1.0 - tx.t) + at(ty.hi, tx.hi) * tx.t;
    top * (1.0 - ty.t) + bot * ty.t
}

/// Crops `frame` around `center` with side `factor·√(w·h)`, resized to
/// `out_size`, and returns the window for mapping results back.
pub fn crop_region(frame: &Tensor, center: BBox, factor: f64, out_size: usize) -> Result<(Tensor, CropWindow)> {
    let win = CropWindow::around(center, factor, out_size)?;
    Ok((win.sample(frame)?, win))
}
