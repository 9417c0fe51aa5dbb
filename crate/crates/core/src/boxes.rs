//! Axis-aligned box geometry: IoU, generalized IoU and its gradient.

use std::fmt;

/// Corner-form box `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Center-form box `(cx, cy, w, h)`, normalized to the image in the
/// prediction heads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct DegenerateBox(pub BoxXyxy);

impl fmt::Display for DegenerateBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(f, "degenerate box ({}, {}, {}, {}): needs x1 < x2 and y1 < y2", b.x1, b.y1, b.x2, b.y2)
    }
}

impl BoxXyxy {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn validate(self) -> Result<Self, DegenerateBox> {
        if self.is_valid() {
            Ok(self)
        } else {
            Err(DegenerateBox(self))
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn to_cxcywh(self) -> BoxCxcywh {
        BoxCxcywh {
            cx: 0.5 * (self.x1 + self.x2),
            cy: 0.5 * (self.y1 + self.y2),
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }
}

impl BoxCxcywh {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_xyxy(self) -> BoxXyxy {
        BoxXyxy {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }
}

fn intersection(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union; zero for disjoint boxes. Assumes valid boxes.
pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - |hull \ (a ∪ b)| / |hull|`, in `(-1, 1]`.
pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> Result<f64, DegenerateBox> {
    a.validate()?;
    b.validate()?;
    Ok(giou_and_grad(a, b).0)
}

/// GIoU together with its gradient with respect to the corners of `a`.
///
/// At the kinks of min/max the one-sided derivative that treats `a` as the
/// active argument on ties of the outer hull is used.
pub(crate) fn giou_and_grad(a: &BoxXyxy, b: &BoxXyxy) -> (f64, [f64; 4]) {
    let iw_raw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih_raw = a.y2.min(b.y2) - a.y1.max(b.y1);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;

    let aw = a.x2 - a.x1;
    let ah = a.y2 - a.y1;
    let area_a = aw * ah;
    let union = area_a + b.area() - inter;

    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let hull = cw * ch;

    let value = inter / union - 1.0 + union / hull;

    let d_inter = 1.0 / union + inter / (union * union) - 1.0 / hull;
    let d_area = -inter / (union * union) + 1.0 / hull;
    let d_hull = -union / (hull * hull);

    // partials of each intermediate w.r.t. (x1, y1, x2, y2) of `a`
    let (mut di, mut dh) = ([0.0; 4], [0.0; 4]);
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if a.x1 > b.x1 {
            di[0] = -ih;
        }
        if a.x2 < b.x2 {
            di[2] = ih;
        }
        if a.y1 > b.y1 {
            di[1] = -iw;
        }
        if a.y2 < b.y2 {
            di[3] = iw;
        }
    }
    let da = [-ah, -aw, ah, aw];
    if a.x1 <= b.x1 {
        dh[0] = -ch;
    }
    if a.x2 >= b.x2 {
        dh[2] = ch;
    }
    if a.y1 <= b.y1 {
        dh[1] = -cw;
    }
    if a.y2 >= b.y2 {
        dh[3] = cw;
    }

    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = d_inter * di[k] + d_area * da[k] + d_hull * dh[k];
    }
    (value, grad)
}

/// GIoU between center-form boxes and its gradient w.r.t. `(cx, cy, w, h)` of `a`.
pub(crate) fn giou_and_grad_cxcywh(a: &BoxCxcywh, b: &BoxCxcywh) -> (f64, [f64; 4]) {
    let (v, g) = giou_and_grad(&a.to_xyxy(), &b.to_xyxy());
    let grad = [g[0] + g[2], g[1] + g[3], 0.5 * (g[2] - g[0]), 0.5 * (g[3] - g[1])];
    (v, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_identity() {
        let b = BoxXyxy::new(0.1, 0.2, 0.5, 0.9);
        assert!((giou(&b, &b).unwrap() - 1.0).abs() < 1e-15);
        assert!((iou(&b, &b) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn giou_disjoint_unit_boxes() {
        let a = BoxXyxy::new(0.0, 0.0, 1.0, 1.0);
        let b = BoxXyxy::new(2.0, 0.0, 3.0, 1.0);
        assert_eq!(iou(&a, &b), 0.0);
        assert!((giou(&a, &b).unwrap() + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn giou_far_apart_tends_to_minus_one() {
        let a = BoxXyxy::new(0.0, 0.0, 1.0, 1.0);
        let b = BoxXyxy::new(1e6, 1e6, 1e6 + 1.0, 1e6 + 1.0);
        let g = giou(&a, &b).unwrap();
        assert!(g > -1.0 && g < -1.0 + 1e-9, "{g}");
    }

    #[test]
    fn giou_rejects_degenerate() {
        let a = BoxXyxy::new(0.0, 0.0, 0.0, 1.0);
        assert!(giou(&a, &a).is_err());
    }

    #[test]
    fn giou_gradient_matches_central_differences() {
        let cases = [
            (BoxCxcywh::new(0.4, 0.5, 0.3, 0.2), BoxCxcywh::new(0.45, 0.52, 0.25, 0.3)),
            (BoxCxcywh::new(0.2, 0.3, 0.1, 0.2), BoxCxcywh::new(0.7, 0.6, 0.2, 0.1)),
            (BoxCxcywh::new(0.5, 0.5, 0.6, 0.6), BoxCxcywh::new(0.52, 0.48, 0.1, 0.15)),
        ];
        let h = 1e-6;
        for (a, b) in cases {
            let (_, g) = giou_and_grad_cxcywh(&a, &b);
            for k in 0..4 {
                let mut p = a.to_array();
                let mut m = a.to_array();
                p[k] += h;
                m[k] -= h;
                let fp = giou_and_grad_cxcywh(&BoxCxcywh::from_slice(&p), &b).0;
                let fm = giou_and_grad_cxcywh(&BoxCxcywh::from_slice(&m), &b).0;
                let num = (fp - fm) / (2.0 * h);
                assert!((num - g[k]).abs() < 1e-7, "k={k} analytic {} numeric {num}", g[k]);
            }
        }
    }

    #[test]
    fn center_corner_round_trip() {
        let b = BoxXyxy::new(0.1, 0.2, 0.4, 0.8);
        let back = b.to_cxcywh().to_xyxy();
        for (x, y) in b.to_array().iter().zip(back.to_array()) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
