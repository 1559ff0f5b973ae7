//! Instant pseudo labeling and two-model co-rectification.

use serde::{Deserialize, Serialize};

use crate::boxgeom::BBox;
use crate::detector::{foreground_max, suppress_and_filter, Detection, DetectorState};
use crate::error::{Error, Result};
use crate::sample::{Annotation, AnnotationSet, AnnotationSource, Image};

/// Candidate floor used by the co-rectify labeler before fusion.
pub const CORECTIFY_CANDIDATE_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LabelGenerator {
    Single,
    Corectify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub image_id: String,
    pub boxes: Vec<BBox>,
    /// Foreground class per box (`0..C`).
    pub hard_labels: Vec<usize>,
    /// Max foreground probability per box at labeling time.
    pub confidences: Vec<f64>,
    pub generator: LabelGenerator,
}

impl PseudoLabelSet {
    fn from_detections(image_id: &str, dets: &[Detection], generator: LabelGenerator) -> Self {
        PseudoLabelSet {
            image_id: image_id.to_string(),
            boxes: dets.iter().map(|d| d.bbox).collect(),
            hard_labels: dets.iter().map(|d| d.label).collect(),
            confidences: dets.iter().map(|d| d.confidence).collect(),
            generator,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Unit-weight pseudo annotations carrying their labeling confidence.
    pub fn to_annotations(&self) -> AnnotationSet {
        let items = self
            .boxes
            .iter()
            .zip(&self.hard_labels)
            .zip(&self.confidences)
            .map(|((&bbox, &class), &confidence)| Annotation {
                bbox,
                class,
                weight: 1.0,
                confidence,
            })
            .collect();
        AnnotationSet::new(items, AnnotationSource::Pseudo)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::config(format!("confidence threshold {tau} must lie in [0, 1)")));
    }
    Ok(())
}

/// Single-model pseudo labels for a weakly augmented image.
pub fn pseudo_label(state: &DetectorState, image_id: &str, weak_image: &Image, tau: f64, nms_iou: f64) -> Result<PseudoLabelSet> {
    check_tau(tau)?;
    let dets = state.detect(weak_image, tau, nms_iou)?;
    Ok(PseudoLabelSet::from_detections(image_id, &dets, LabelGenerator::Single))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectifiedDetection {
    pub probs_a: Vec<f64>,
    pub box_a: BBox,
    pub probs_b: Vec<f64>,
    pub box_b: BBox,
    pub fused_probs: Vec<f64>,
    pub fused_box: BBox,
}

impl RectifiedDetection {
    pub fn to_detection(&self) -> Detection {
        Detection::from_probs(self.fused_box, self.fused_probs.clone())
    }
}

/// Fuse a detection with the partner's refinement of it: class vectors are
/// averaged; boxes are averaged with weights equal to each side's max
/// foreground probability.
pub fn corectify_fuse(probs_a: &[f64], box_a: BBox, probs_b: &[f64], box_b: BBox) -> Result<RectifiedDetection> {
    if probs_a.len() != probs_b.len() || probs_a.len() < 2 {
        return Err(Error::Shape("class vectors must have equal length >= 2".into()));
    }
    let (ca, _) = foreground_max(probs_a);
    let (cb, _) = foreground_max(probs_b);
    let total = ca + cb;
    if !(total > 0.0) {
        return Err(Error::Degenerate("both foreground confidences are zero".into()));
    }
    let fused_probs: Vec<f64> = probs_a.iter().zip(probs_b).map(|(a, b)| 0.5 * (a + b)).collect();
    let mix = |a: f64, b: f64| (a * ca + b * cb) / total;
    let mut fused = [0.0; 4];
    for (k, (a, b)) in box_a.to_array().into_iter().zip(box_b.to_array()).enumerate() {
        // keep the convex-combination bound exact under rounding
        fused[k] = mix(a, b).clamp(a.min(b), a.max(b));
    }
    let fused_box = BBox::new(fused[0], fused[1], fused[2], fused[3])?;
    Ok(RectifiedDetection {
        probs_a: probs_a.to_vec(),
        box_a,
        probs_b: probs_b.to_vec(),
        box_b,
        fused_probs,
        fused_box,
    })
}

/// Candidates of `state_self` above the floor, each refined by the partner
/// and fused; then class-wise NMS and the `tau` gate on fused confidence.
pub fn corectify_detections(
    state_self: &DetectorState,
    state_partner: &DetectorState,
    image: &Image,
    tau: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let floor = CORECTIFY_CANDIDATE_FLOOR.min(tau);
    let cands = state_self.candidates(image, floor)?;
    if cands.is_empty() {
        return Ok(Vec::new());
    }
    let proposals: Vec<BBox> = cands.iter().map(|d| d.bbox).collect();
    let refined = state_partner.refine(image, &proposals)?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut fused = Vec::with_capacity(cands.len());
    for (d, (probs_b, box_b)) in cands.iter().zip(refined) {
        let Some(box_b) = box_b.clip(w, h) else {
            continue;
        };
        let r = corectify_fuse(&d.class_probs, d.bbox, &probs_b, box_b)?;
        let det = r.to_detection();
        // fused argmax must still be foreground
        if det.class_probs[0] >= det.confidence {
            continue;
        }
        fused.push(det);
    }
    Ok(suppress_and_filter(fused, tau, nms_iou))
}

pub fn corectify_pseudo_label(
    state_self: &DetectorState,
    state_partner: &DetectorState,
    image_id: &str,
    weak_image: &Image,
    tau: f64,
    nms_iou: f64,
) -> Result<PseudoLabelSet> {
    check_tau(tau)?;
    let dets = corectify_detections(state_self, state_partner, weak_image, tau, nms_iou)?;
    Ok(PseudoLabelSet::from_detections(image_id, &dets, LabelGenerator::Corectify))
}
