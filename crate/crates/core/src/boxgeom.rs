//! Axis-aligned box algebra: IoU, greedy NMS, flips, clipping and the
//! center/size delta codec used by the detector head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest log-ratio accepted when decoding width/height deltas.
pub const MAX_LOG_RATIO: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Box in corner form, pixel units. Always satisfies `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::Degenerate(format!(
                "box [{x1}, {y1}, {x2}, {y2}] is not a valid corner box"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
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
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    /// Mirror about the vertical axis of an image of width `image_width`.
    pub fn hflip(&self, image_width: f64) -> BBox {
        BBox {
            x1: image_width - self.x2,
            y1: self.y1,
            x2: image_width - self.x1,
            y2: self.y2,
        }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Clip to `[0, width] x [0, height]`; `None` if nothing with positive
    /// area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        let x2 = self.x2.clamp(0.0, width);
        let y2 = self.y2.clamp(0.0, height);
        BBox::new(x1, y1, x2, y2).ok()
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn hflip_box(b: &BBox, image_width: f64) -> BBox {
    b.hflip(image_width)
}

/// Center/size regression target relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(d: &[f64]) -> BoxDelta {
        BoxDelta {
            tx: d[0],
            ty: d[1],
            tw: d[2],
            th: d[3],
        }
    }
}

pub fn encode_delta(anchor: &BBox, target: &BBox) -> BoxDelta {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (tx, ty) = target.center();
    BoxDelta {
        tx: (tx - ax) / aw,
        ty: (ty - ay) / ah,
        tw: (target.width() / aw).ln(),
        th: (target.height() / ah).ln(),
    }
}

/// Inverse of [`encode_delta`]. Width/height log-ratios are clamped to
/// [`MAX_LOG_RATIO`] so the result is always a finite, valid box.
pub fn decode_delta(anchor: &BBox, d: &BoxDelta) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + d.tx * aw;
    let cy = ay + d.ty * ah;
    let w = aw * d.tw.min(MAX_LOG_RATIO).exp();
    let h = ah * d.th.min(MAX_LOG_RATIO).exp();
    BBox {
        x1: cx - w / 2.0,
        y1: cy - h / 2.0,
        x2: cx + w / 2.0,
        y2: cy + h / 2.0,
    }
}

/// Decode and clip to image bounds; `None` if the box falls outside entirely.
pub fn decode_delta_clipped(anchor: &BBox, d: &BoxDelta, width: f64, height: f64) -> Option<BBox> {
    decode_delta(anchor, d).clip(width, height)
}

/// Order of candidates for greedy suppression: descending score, ties by
/// lower input index.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. A candidate is suppressed when its IoU
/// with an already kept box is strictly greater than `iou_threshold`.
/// Returns kept indices in descending score order.
pub fn nms(dets: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let order = score_order(dets.iter().map(|d| d.1));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = keep.iter().any(|&k| iou(&dets[k].0, &dets[i].0) > iou_threshold);
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

/// NMS run independently per class label; kept indices are merged back into
/// global descending-score order (ties by input index).
pub fn nms_classwise(dets: &[(BBox, f64, usize)], iou_threshold: f64) -> Vec<usize> {
    let order = score_order(dets.iter().map(|d| d.1));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = keep
            .iter()
            .any(|&k| dets[k].2 == dets[i].2 && iou(&dets[k].0, &dets[i].0) > iou_threshold);
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        // intersection 1, union 4 + 4 - 1
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
        // touching edges share no interior
        assert_eq!(iou(&a, &b(2.0, 0.0, 4.0, 2.0)), 0.0);
    }

    #[test]
    fn nms_examples() {
        let dets = vec![(b(0.0, 0.0, 10.0, 10.0), 0.9), (b(1.0, 1.0, 11.0, 11.0), 0.8)];
        // intersection 81, union 200 - 81 = 119
        assert!((iou(&dets[0].0, &dets[1].0) - 81.0 / 119.0).abs() < 1e-12);
        assert_eq!(nms(&dets, 0.5), vec![0]);

        let disjoint = vec![(b(0.0, 0.0, 1.0, 1.0), 0.3), (b(5.0, 5.0, 6.0, 6.0), 0.7)];
        assert_eq!(nms(&disjoint, 0.5), vec![1, 0]);
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_tie_break_prefers_lower_index() {
        let dets = vec![(b(0.0, 0.0, 10.0, 10.0), 0.5), (b(0.0, 0.0, 10.0, 10.0), 0.5)];
        assert_eq!(nms(&dets, 0.5), vec![0]);
    }

    #[test]
    fn classwise_nms_keeps_overlapping_boxes_of_other_classes() {
        let dets = vec![
            (b(0.0, 0.0, 10.0, 10.0), 0.9, 0),
            (b(0.0, 0.0, 10.0, 10.0), 0.8, 1),
            (b(1.0, 0.0, 10.0, 10.0), 0.7, 0),
        ];
        assert_eq!(nms_classwise(&dets, 0.5), vec![0, 1]);
    }

    #[test]
    fn hflip_examples() {
        let x = b(10.0, 20.0, 30.0, 40.0);
        assert_eq!(x.hflip(100.0), b(70.0, 20.0, 90.0, 40.0));
        assert_eq!(x.hflip(100.0).hflip(100.0), x);
        let centered = b(40.0, 0.0, 60.0, 5.0);
        assert_eq!(centered.hflip(100.0), centered);
    }

    #[test]
    fn delta_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode_delta(&a, &a), BoxDelta::ZERO);
        let d = encode_delta(&a, &b(5.0, 0.0, 15.0, 10.0));
        assert_eq!(d, BoxDelta { tx: 0.5, ty: 0.0, tw: 0.0, th: 0.0 });
        assert_eq!(decode_delta(&a, &BoxDelta::ZERO), a);
    }

    #[test]
    fn decode_clip() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let d = BoxDelta { tx: -0.4, ty: 0.0, tw: 0.0, th: 0.0 };
        assert_eq!(decode_delta_clipped(&a, &d, 20.0, 20.0), Some(b(0.0, 0.0, 6.0, 10.0)));
        let gone = BoxDelta { tx: -5.0, ty: 0.0, tw: 0.0, th: 0.0 };
        assert_eq!(decode_delta_clipped(&a, &gone, 20.0, 20.0), None);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..50.0f64, 0.5..50.0f64)
            .prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn clip_is_idempotent(a in arb_box()) {
            if let Some(c) = a.clip(60.0, 40.0) {
                prop_assert!(c.x1 < c.x2 && c.y1 < c.y2);
                prop_assert_eq!(c.clip(60.0, 40.0), Some(c));
            }
        }

        #[test]
        fn delta_round_trip(a in arb_box(), t in arb_box()) {
            // only size ratios inside the decode clamp can round-trip
            prop_assume!((t.width() / a.width()).ln().abs() < MAX_LOG_RATIO);
            prop_assume!((t.height() / a.height()).ln().abs() < MAX_LOG_RATIO);
            let back = decode_delta(&a, &encode_delta(&a, &t));
            for (x, y) in back.to_array().iter().zip(t.to_array()) {
                prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
            }
        }
    }
}
