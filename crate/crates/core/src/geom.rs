//! Axis-aligned box algebra: IoU, delta encoding/decoding and clipping.
//!
//! Boxes are stored in corner form `(x1, y1, x2, y2)` over continuous real
//! coordinates. The center form `(cx, cy, w, h)` used by the delta encoding is
//! derived on demand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clipped boxes narrower or shorter than this are degenerate.
pub const DEGENERATE_EPS: f64 = 1e-6;

/// Decoded sizes are capped at this multiple of the canvas extent.
pub const SATURATION_FACTOR: f64 = 1e4;

/// Axis-aligned box in corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and empty extents.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite box [{x1}, {y1}, {x2}, {y2}]")));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox(format!("empty box [{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl AsRef<BBox> for BBox {
    fn as_ref(&self) -> &BBox {
        self
    }
}

/// Scale- and location-invariant regression offset between two boxes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Delta {
    pub const ZERO: Delta = Delta { dx: 0.0, dy: 0.0, dw: 0.0, dh: 0.0 };

    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Offset that maps `b` onto `g`.
pub fn encode(b: &BBox, g: &BBox) -> Delta {
    let (bcx, bcy) = b.center();
    let (gcx, gcy) = g.center();
    let (bw, bh) = (b.width(), b.height());
    Delta { dx: (gcx - bcx) / bw, dy: (gcy - bcy) / bh, dw: (g.width() / bw).ln(), dh: (g.height() / bh).ln() }
}

/// Result of applying a delta to a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub bbox: BBox,
    /// Set when a size overflowed and was clamped to the cap.
    pub saturated: bool,
}

/// Applies `d` to `b`. Widths/heights that overflow `max_size` (or are not
/// finite) are clamped to `max_size` and the result is flagged.
pub fn decode(b: &BBox, d: &Delta, max_size: f64) -> Decoded {
    let (bcx, bcy) = b.center();
    let (bw, bh) = (b.width(), b.height());
    let mut saturated = false;
    let mut size = |base: f64, log_scale: f64| {
        let s = base * log_scale.exp();
        if !s.is_finite() || s > max_size {
            saturated = true;
            max_size
        } else if s < DEGENERATE_EPS {
            saturated = true;
            DEGENERATE_EPS
        } else {
            s
        }
    };
    let w = size(bw, d.dw);
    let h = size(bh, d.dh);
    let mut cx = bcx + d.dx * bw;
    let mut cy = bcy + d.dy * bh;
    if !cx.is_finite() || !cy.is_finite() {
        saturated = true;
        cx = bcx;
        cy = bcy;
    }
    let bbox = BBox { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h };
    // Far from the origin, w can vanish in the subtraction.
    if bbox.x2 <= bbox.x1 || bbox.y2 <= bbox.y1 {
        return Decoded { bbox: *b, saturated: true };
    }
    Decoded { bbox, saturated }
}

/// Size cap used by [`decode`] for a canvas.
pub fn max_decoded_size(canvas_w: f64, canvas_h: f64) -> f64 {
    SATURATION_FACTOR * canvas_w.max(canvas_h)
}

/// Clamps `b` to `[0, canvas_w] x [0, canvas_h]`. Returns `None` when the
/// clipped box is degenerate.
pub fn clip(b: &BBox, canvas_w: f64, canvas_h: f64) -> Option<BBox> {
    let x1 = b.x1.clamp(0.0, canvas_w);
    let y1 = b.y1.clamp(0.0, canvas_h);
    let x2 = b.x2.clamp(0.0, canvas_w);
    let y2 = b.y2.clamp(0.0, canvas_h);
    if x2 - x1 < DEGENERATE_EPS || y2 - y1 < DEGENERATE_EPS {
        return None;
    }
    Some(BBox { x1, y1, x2, y2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts covered cells on a raster of `res` cells per unit.
    fn raster_iou(a: &BBox, b: &BBox, res: f64) -> f64 {
        let lo = a.x1.min(b.x1).min(a.y1).min(b.y1);
        let hi = a.x2.max(b.x2).max(a.y2).max(b.y2);
        let n = ((hi - lo) * res).round() as i64;
        let inside = |r: &BBox, x: f64, y: f64| x > r.x1 && x < r.x2 && y > r.y1 && y < r.y2;
        let (mut inter, mut union) = (0u64, 0u64);
        for i in 0..n {
            for j in 0..n {
                let x = lo + (i as f64 + 0.5) / res;
                let y = lo + (j as f64 + 0.5) / res;
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_cases() {
        let b = bx(3.0, 4.0, 10.0, 12.5);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        let a = bx(0.0, 0.0, 2.0, 2.0);
        let c = bx(1.0, 1.0, 3.0, 3.0);
        let oracle = raster_iou(&a, &c, 50.0);
        assert_abs_diff_eq!(oracle, 1.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(iou(&a, &c), oracle, epsilon = 1e-12);
    }

    #[test]
    fn touching_boxes_have_zero_iou() {
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn encode_cases() {
        let b = bx(0.0, 0.0, 4.0, 4.0);
        assert_eq!(encode(&b, &b), Delta::ZERO);

        let b = BBox::from_center(10.0, 10.0, 4.0, 4.0).unwrap();
        let g = BBox::from_center(11.0, 12.0, 8.0, 2.0).unwrap();
        let d = encode(&b, &g);
        assert_abs_diff_eq!(d.dx, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(d.dy, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(d.dw, 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(d.dh, -(2f64.ln()), epsilon = 1e-12);

        let shift = |r: &BBox| bx(r.x1 + 100.0, r.y1 + 100.0, r.x2 + 100.0, r.y2 + 100.0);
        let moved = encode(&shift(&b), &shift(&g));
        for (p, q) in moved.to_array().iter().zip(d.to_array()) {
            assert_abs_diff_eq!(*p, q, epsilon = 1e-12);
        }
    }

    #[test]
    fn decode_identity_and_saturation() {
        let b = bx(1.0, 2.0, 5.0, 9.0);
        assert_eq!(decode(&b, &Delta::ZERO, 1e6).bbox, b);
        let out = decode(&b, &Delta::new(0.0, 0.0, 800.0, 0.0), 1e3);
        assert!(out.saturated);
        assert_abs_diff_eq!(out.bbox.width(), 1e3, epsilon = 1e-9);
        assert!(out.bbox.x2 > out.bbox.x1);
    }

    #[test]
    fn clip_cases() {
        let b = bx(1.0, 1.0, 4.0, 4.0);
        assert_eq!(clip(&b, 10.0, 10.0), Some(b));
        assert_eq!(clip(&bx(20.0, 20.0, 30.0, 30.0), 10.0, 10.0), None);
        assert_eq!(clip(&bx(-1.0, -1.0, 2.0, 2.0), 10.0, 10.0), Some(bx(0.0, 0.0, 2.0, 2.0)));
    }

    #[test]
    fn rejects_invalid_boxes() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(serde_json::from_str::<BBox>("[0,0,-1,1]").is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-500.0..500.0f64, -500.0..500.0f64, 0.5..300.0f64, 0.5..300.0f64).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
        }

        #[test]
        fn encode_invariant_to_joint_scaling(a in arb_box(), b in arb_box(), s in 0.1..20.0f64) {
            let scale = |r: &BBox| bx(r.x1 * s, r.y1 * s, r.x2 * s, r.y2 * s);
            let d0 = encode(&a, &b);
            let d1 = encode(&scale(&a), &scale(&b));
            for (p, q) in d0.to_array().iter().zip(d1.to_array()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }
    }
}
