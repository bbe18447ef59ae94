//! Axis-aligned boxes in pixel coordinates and the center-size delta
//! parameterization used by the regression branches.

use serde::{Deserialize, Serialize};

use crate::error::{BlcError, Result};

/// Growth clamp on dw/dh so decoded boxes stay bounded.
pub const DELTA_CLAMP: f64 = 4.0;

/// Corner-form box with x2 > x1 and y2 > y1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(BlcError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    /// Intersection-over-union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Clips to `[0, w] × [0, h]`; `None` if nothing of the box remains.
    pub fn clip(&self, w: f64, h: f64) -> Option<Self> {
        let x1 = self.x1.clamp(0.0, w);
        let y1 = self.y1.clamp(0.0, h);
        let x2 = self.x2.clamp(0.0, w);
        let y2 = self.y2.clamp(0.0, h);
        if x2 - x1 > 1e-9 && y2 - y1 > 1e-9 {
            Some(Self { x1, y1, x2, y2 })
        } else {
            None
        }
    }
}

/// Applies (dx, dy, dw, dh) in center-size space and clips to the image.
/// dx/dy shift the center in units of box width/height; dw/dh scale
/// exponentially (clamped at ±[`DELTA_CLAMP`]).
pub fn decode_box(roi: &BBox, deltas: &[f64; 4], image_w: f64, image_h: f64) -> Result<BBox> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(BlcError::NonFinite("box deltas".into()));
    }
    let (cx, cy) = roi.center();
    let w = roi.width();
    let h = roi.height();
    let nx = cx + deltas[0] * w;
    let ny = cy + deltas[1] * h;
    let nw = w * deltas[2].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let nh = h * deltas[3].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let decoded = BBox::from_center(nx, ny, nw, nh)?;
    decoded
        .clip(image_w, image_h)
        .ok_or(BlcError::InvalidBox {
            x1: decoded.x1,
            y1: decoded.y1,
            x2: decoded.x2,
            y2: decoded.y2,
        })
}

/// Inverse of [`decode_box`] (without clipping): the deltas that map `roi`
/// onto `target`.
pub fn encode_box(roi: &BBox, target: &BBox) -> [f64; 4] {
    let (cx, cy) = roi.center();
    let (tx, ty) = target.center();
    [
        (tx - cx) / roi.width(),
        (ty - cy) / roi.height(),
        (target.width() / roi.width()).ln(),
        (target.height() / roi.height()).ln(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, -1.0, 1.0).is_err());
        assert!(BBox::new(0.0, f64::NAN, 1.0, 1.0).is_err());
    }

    #[test]
    fn iou_identical_is_one() {
        let b = BBox::new(1.0, 2.0, 5.0, 9.0).unwrap();
        assert_abs_diff_eq!(b.iou(&b), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let b = BBox::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(a.iou(&b), 0.0);
    }

    #[test]
    fn iou_half_overlap_rectangles() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
        assert_abs_diff_eq!(a.iou(&b), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_deltas_identity() {
        let roi = BBox::new(2.0, 3.0, 12.0, 13.0).unwrap();
        let out = decode_box(&roi, &[0.0; 4], 64.0, 64.0).unwrap();
        assert_abs_diff_eq!(out.x1, roi.x1);
        assert_abs_diff_eq!(out.y1, roi.y1);
        assert_abs_diff_eq!(out.x2, roi.x2);
        assert_abs_diff_eq!(out.y2, roi.y2);
    }

    #[test]
    fn dx_half_shifts_center_by_half_width() {
        let roi = BBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        let out = decode_box(&roi, &[0.5, 0.0, 0.0, 0.0], 64.0, 64.0).unwrap();
        let (cx, _) = out.center();
        assert_abs_diff_eq!(cx, 20.0, epsilon = 1e-12);
    }

    #[test]
    fn decode_matches_center_size_oracle() {
        let roi = BBox::new(4.0, 8.0, 24.0, 18.0).unwrap();
        let deltas = [0.13, -0.21, 0.3, -0.4];
        let out = decode_box(&roi, &deltas, 640.0, 640.0).unwrap();
        // explicit center-size arithmetic
        let cx = 14.0 + 0.13 * 20.0;
        let cy = 13.0 + -0.21 * 10.0;
        let w = 20.0 * 0.3f64.exp();
        let h = 10.0 * (-0.4f64).exp();
        assert_abs_diff_eq!(out.x1, cx - w / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.y1, cy - h / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.x2, cx + w / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.y2, cy + h / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_deltas_error() {
        let roi = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        assert!(decode_box(&roi, &[f64::INFINITY, 0.0, 0.0, 0.0], 64.0, 64.0).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let roi = BBox::new(3.0, 5.0, 13.0, 25.0).unwrap();
        let target = BBox::new(6.0, 2.0, 20.0, 30.0).unwrap();
        let deltas = encode_box(&roi, &target);
        let back = decode_box(&roi, &deltas, 100.0, 100.0).unwrap();
        assert_abs_diff_eq!(back.x1, target.x1, epsilon = 1e-9);
        assert_abs_diff_eq!(back.y1, target.y1, epsilon = 1e-9);
        assert_abs_diff_eq!(back.x2, target.x2, epsilon = 1e-9);
        assert_abs_diff_eq!(back.y2, target.y2, epsilon = 1e-9);
    }
}
