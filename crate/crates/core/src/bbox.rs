/// Axis-aligned box in center format.
///
/// The same type carries normalized crop coordinates (all fields in
/// `[0, 1]`) and frame pixel coordinates; the caller knows which.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// From top-left corner plus size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { cx: x + w / 2.0, cy: y + h / 2.0, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::from_xywh(x0, y0, x1 - x0, y1 - y0)
    }

    /// Top-left corner plus size.
    pub fn to_xywh(self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn corners(self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    pub fn area(self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_degenerate(self) -> bool {
        !(self.w > 0.0 && self.h > 0.0) || !self.cx.is_finite() || !self.cy.is_finite()
    }

    /// Whether the box satisfies the normalized-coordinate invariants.
    pub fn is_normalized(self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }

    pub fn intersection(self, other: BBox) -> f64 {
        let [a0, a1, a2, a3] = self.corners();
        let [b0, b1, b2, b3] = other.corners();
        let iw = (a2.min(b2) - a0.max(b0)).max(0.0);
        let ih = (a3.min(b3) - a1.max(b1)).max(0.0);
        iw * ih
    }

    pub fn iou(self, other: BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU: `IoU - (enclosing - union) / enclosing`.
    pub fn giou(self, other: BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        let [a0, a1, a2, a3] = self.corners();
        let [b0, b1, b2, b3] = other.corners();
        let enclosing = (a2.max(b2) - a0.min(b0)) * (a3.max(b3) - a1.min(b1));
        if enclosing <= 0.0 || union <= 0.0 {
            return -1.0;
        }
        inter / union - (enclosing - union) / enclosing
    }

    pub fn center_distance(self, other: BBox) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }

    /// Clamps the box into a `width x height` frame, keeping at least
    /// `min_size` pixels of extent.
    pub fn clamp_to_frame(self, width: f64, height: f64, min_size: f64) -> BBox {
        let w = self.w.clamp(min_size, width);
        let h = self.h.clamp(min_size, height);
        let cx = self.cx.clamp(w / 2.0, width - w / 2.0);
        let cy = self.cy.clamp(h / 2.0, height - h / 2.0);
        BBox { cx, cy, w, h }
    }
}
