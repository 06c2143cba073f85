//! Boxes in normalized center-size form, `(cx, cy, w, h)` in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0) || !self.to_array().iter().all(|x| x.is_finite())
    }

    /// Fully inside the unit square.
    pub fn fits_unit(&self) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let w = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let h = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        w * h
    }

    pub fn l1(&self, other: &BBox) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// Intersection over union. Degenerate boxes are an error.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if a.is_degenerate() || b.is_degenerate() {
        return Err(Error::InvalidInput(format!("degenerate box in iou: {a:?} / {b:?}")));
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_reference_cases() {
        let unit = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(iou(&unit, &unit).unwrap(), 1.0);
        let left = BBox::from_corners(0.0, 0.0, 0.5, 1.0);
        assert!((iou(&unit, &left).unwrap() - 0.5).abs() < 1e-12);
        let a = BBox::from_corners(0.0, 0.0, 0.2, 0.2);
        let b = BBox::from_corners(0.5, 0.5, 0.9, 0.9);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert!(iou(&a, &BBox::new(0.5, 0.5, 0.0, 0.3)).is_err());
    }

    #[test]
    fn corner_round_trip() {
        let b = BBox::from_corners(0.1, 0.2, 0.4, 0.9);
        let (x0, y0, x1, y1) = b.corners();
        assert!((x0 - 0.1).abs() < 1e-12 && (y0 - 0.2).abs() < 1e-12);
        assert!((x1 - 0.4).abs() < 1e-12 && (y1 - 0.9).abs() < 1e-12);
        assert!(b.fits_unit());
    }
}
