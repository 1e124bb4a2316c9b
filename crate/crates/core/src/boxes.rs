//! Axis-aligned boxes in normalised image coordinates.

use serde::{Deserialize, Serialize};

/// Box as `[x1, y1, x2, y2]`, normalised to the image extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(c: [f64; 4]) -> Self {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub const FULL: BBox = BBox {
        x1: 0.0,
        y1: 0.0,
        x2: 1.0,
        y2: 1.0,
    };

    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_cxcywh(c: [f64; 4]) -> Self {
        let [cx, cy, w, h] = c;
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn to_cxcywh(&self) -> [f64; 4] {
        [
            0.5 * (self.x1 + self.x2),
            0.5 * (self.y1 + self.y2),
            self.x2 - self.x1,
            self.y2 - self.y1,
        ]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Checks `0 <= x1 < x2 <= 1` and `0 <= y1 < y2 <= 1`.
    pub fn validate(&self) -> Result<(), String> {
        let c = self.to_array();
        if c.iter().any(|v| !v.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        if !(0.0..=1.0).contains(&self.x1) || !(0.0..=1.0).contains(&self.x2) {
            return Err(format!("x outside [0,1]: {:?}", c));
        }
        if !(0.0..=1.0).contains(&self.y1) || !(0.0..=1.0).contains(&self.y2) {
            return Err(format!("y outside [0,1]: {:?}", c));
        }
        if self.x1 >= self.x2 {
            return Err(format!("x1 >= x2: {:?}", c));
        }
        if self.y1 >= self.y2 {
            return Err(format!("y1 >= y2: {:?}", c));
        }
        Ok(())
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }

    /// Generalised IoU: `IoU - |C \ (A u B)| / |C|`.
    pub fn giou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        let hull = self.hull(other).area();
        let iou = if union > 0.0 { inter / union } else { 0.0 };
        if hull > 0.0 {
            iou - (hull - union) / hull
        } else {
            iou
        }
    }

    /// Mirror across the vertical centre line: `x' = 1 - x`.
    pub fn hflip(&self) -> BBox {
        BBox::new(1.0 - self.x2, self.y1, 1.0 - self.x1, self.y2)
    }

    pub fn clamped(&self) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, 1.0),
            self.y1.clamp(0.0, 1.0),
            self.x2.clamp(0.0, 1.0),
            self.y2.clamp(0.0, 1.0),
        )
    }

    /// Coordinates rounded to 6 decimals, the precision of the JSON encoding.
    pub fn rounded6(&self) -> BBox {
        let r = |v: f64| (v * 1e6).round() / 1e6;
        BBox::new(r(self.x1), r(self.y1), r(self.x2), r(self.y2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flip_example() {
        let f = BBox::new(0.1, 0.2, 0.3, 0.4).hflip();
        assert!((f.x1 - 0.7).abs() < 1e-12 && (f.x2 - 0.9).abs() < 1e-12);
        assert_eq!((f.y1, f.y2), (0.2, 0.4));
    }

    #[test]
    fn giou_hand_values() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        assert!((a.giou(&b) + 0.5).abs() < 1e-12);
        let c = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert!((c.giou(&a) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(BBox::new(0.1, 0.1, 0.2, 0.2).validate().is_ok());
        assert!(BBox::new(0.3, 0.1, 0.2, 0.2).validate().is_err());
        assert!(BBox::new(0.1, 0.1, 0.1, 0.2).validate().is_err());
        assert!(BBox::new(-0.1, 0.1, 0.3, 0.2).validate().is_err());
    }

    proptest! {
        #[test]
        fn cxcywh_is_inverse(x in 0.0f64..0.5, y in 0.0f64..0.5, w in 0.01f64..0.5, h in 0.01f64..0.5) {
            let b = BBox::new(x, y, x + w, y + h);
            let back = BBox::from_cxcywh(b.to_cxcywh());
            for (p, q) in back.to_array().iter().zip(b.to_array()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
            let c = b.to_cxcywh();
            let again = BBox::from_cxcywh(c).to_cxcywh();
            for (p, q) in again.iter().zip(c) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
