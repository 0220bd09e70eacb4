/// Axis-aligned box in image pixels: top-left corner plus size.
///
/// An all-zero box marks a frame where the target is absent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { x: cx - w / 2.0, y: cy - h / 2.0, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_absent(&self) -> bool {
        self.x == 0.0 && self.y == 0.0 && self.w == 0.0 && self.h == 0.0
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    /// Intersects the box with `[0, width] × [0, height]`.
    pub fn clip_to(&self, width: f64, height: f64) -> Self {
        let x1 = self.x.clamp(0.0, width);
        let y1 = self.y.clamp(0.0, height);
        let x2 = self.right().clamp(0.0, width);
        let y2 = self.bottom().clamp(0.0, height);
        Self { x: x1, y: y1, w: (x2 - x1).max(0.0), h: (y2 - y1).max(0.0) }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self { x: self.x * sx, y: self.y * sy, w: self.w * sx, h: self.h * sy }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self { x: self.x + dx, y: self.y + dy, ..*self }
    }
}

/// Intersection over union; 0 when the union is empty. Clamped to 1 so
/// rounding in `x + w - x` cannot push identical boxes above 1.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not
/// covered by the union.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosing = (a.right().max(b.right()) - a.x.min(b.x)) * (a.bottom().max(b.bottom()) - a.y.min(b.y));
    if union <= 0.0 || enclosing <= 0.0 {
        return 0.0;
    }
    inter / union - (enclosing - union) / enclosing
}

/// Euclidean distance between box centers; `None` when `gt` is absent.
pub fn center_error(pred: &BoundingBox, gt: &BoundingBox) -> Option<f64> {
    if gt.is_absent() {
        return None;
    }
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    Some((px - gx).hypot(py - gy))
}

/// Center distance with the x offset scaled by `1/gt.w` and the y offset
/// by `1/gt.h`; `None` when `gt` is absent or degenerate.
pub fn norm_center_error(pred: &BoundingBox, gt: &BoundingBox) -> Option<f64> {
    if gt.is_absent() || gt.w <= 0.0 || gt.h <= 0.0 {
        return None;
    }
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    Some(((px - gx) / gt.w).hypot((py - gy) / gt.h))
}
