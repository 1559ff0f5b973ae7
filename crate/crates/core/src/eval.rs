//! COCO-style average precision (101-point interpolation, greedy
//! confidence-ordered matching) and pseudo-label quality measurement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, BBox};
use crate::detector::{Detection, DetectorState};
use crate::error::{Error, Result};
use crate::sample::ImageSample;
use crate::teaching::corectify_detections;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub class: usize,
}

/// Per-class AP at one IoU threshold. Classes without ground truth are `None`.
pub fn average_precision(dets: &[Vec<ScoredBox>], gts: &[Vec<GtBox>], iou_threshold: f64, num_classes: usize) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|c| class_ap(dets, gts, iou_threshold, c))
        .collect()
}

fn class_ap(dets: &[Vec<ScoredBox>], gts: &[Vec<GtBox>], thr: f64, class: usize) -> Option<f64> {
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class == class).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        for (k, d) in ds.iter().enumerate() {
            if d.class == class {
                order.push((img, k));
            }
        }
    }
    // stable sort keeps input order for equal scores
    order.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut points: Vec<(usize, f64)> = Vec::with_capacity(order.len());
    for (rank, &(img, k)) in order.iter().enumerate() {
        let d = &dets[img][k];
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.get(img).map(|v| v.as_slice()).unwrap_or(&[]).iter().enumerate() {
            if gt.class != class || matched[img][g] {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= thr && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, g));
            }
        }
        if let Some((_, g)) = best {
            matched[img][g] = true;
            tp += 1;
        }
        points.push((tp, tp as f64 / (rank + 1) as f64));
    }

    // precision envelope from the right
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..=100usize {
        // first point whose recall tp/n_gt reaches r/100
        while idx < points.len() && points[idx].0 * 100 < r * n_gt {
            idx += 1;
        }
        if idx < points.len() {
            sum += envelope[idx];
        }
    }
    Some(sum / 101.0)
}

fn mean_present(aps: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap50: f64,
    pub ap75: f64,
    pub map_5095: f64,
    /// Per-class AP averaged over IoU 0.50:0.95 (classes with ground truth only).
    pub per_class_ap: BTreeMap<String, f64>,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_detections: usize,
}

/// Score precomputed detections against the samples' annotations.
pub fn evaluate_detections(dets: &[Vec<Detection>], samples: &[&ImageSample], class_names: &[String]) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    if dets.len() != samples.len() {
        return Err(Error::Shape(format!("{} detection lists for {} images", dets.len(), samples.len())));
    }
    let scored: Vec<Vec<ScoredBox>> = dets
        .iter()
        .map(|ds| {
            ds.iter()
                .map(|d| ScoredBox {
                    bbox: d.bbox,
                    score: d.confidence,
                    class: d.label,
                })
                .collect()
        })
        .collect();
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        let ann = s
            .annotations
            .as_ref()
            .ok_or_else(|| Error::config(format!("evaluation sample {} has no annotations", s.id)))?;
        gts.push(ann.items.iter().map(|a| GtBox { bbox: a.bbox, class: a.class }).collect::<Vec<_>>());
    }
    Ok(score(&scored, &gts, class_names, samples.len()))
}

fn score(scored: &[Vec<ScoredBox>], gts: &[Vec<GtBox>], class_names: &[String], n_images: usize) -> EvalResult {
    let nc = class_names.len();
    let per_thr: Vec<Vec<Option<f64>>> = coco_iou_thresholds()
        .into_iter()
        .map(|t| average_precision(scored, gts, t, nc))
        .collect();
    let mut per_class_ap = BTreeMap::new();
    for (c, name) in class_names.iter().enumerate() {
        if per_thr[0][c].is_some() {
            let v = per_thr.iter().map(|aps| aps[c].unwrap_or(0.0)).sum::<f64>() / per_thr.len() as f64;
            per_class_ap.insert(name.clone(), v);
        }
    }
    let maps: Vec<f64> = per_thr.iter().map(|aps| mean_present(aps)).collect();
    EvalResult {
        ap50: maps[0],
        ap75: maps[5],
        map_5095: maps.iter().sum::<f64>() / maps.len() as f64,
        per_class_ap,
        n_images,
        n_gt: gts.iter().map(|g| g.len()).sum(),
        n_detections: scored.iter().map(|d| d.len()).sum(),
    }
}

/// Detect on un-augmented images and score against their annotations.
pub fn evaluate(
    state: &DetectorState,
    samples: &[&ImageSample],
    class_names: &[String],
    score_threshold: f64,
    nms_iou: f64,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let dets = samples
        .iter()
        .map(|s| state.detect(&s.image, score_threshold, nms_iou))
        .collect::<Result<Vec<_>>>()?;
    evaluate_detections(&dets, samples, class_names)
}

/// Which labeler produces pseudo annotations.
#[derive(Debug, Clone, Copy)]
pub enum Labeler<'a> {
    Single(&'a DetectorState),
    /// Co-rectified labels of the first model, refined by the second.
    Pair(&'a DetectorState, &'a DetectorState),
}

impl Labeler<'_> {
    pub fn label(&self, sample: &ImageSample, tau: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        match self {
            Labeler::Single(s) => s.detect(&sample.image, tau, nms_iou),
            Labeler::Pair(a, b) => corectify_detections(a, b, &sample.image, tau, nms_iou),
        }
    }
}

/// AP of the pseudo annotations a labeler would emit at threshold `tau`,
/// scored against withheld ground truth.
pub fn pseudo_quality(
    labeler: Labeler<'_>,
    samples_with_oracle_gt: &[&ImageSample],
    class_names: &[String],
    tau: f64,
    nms_iou: f64,
) -> Result<EvalResult> {
    if samples_with_oracle_gt.is_empty() {
        return Err(Error::config("pseudo-quality set is empty"));
    }
    let dets = samples_with_oracle_gt
        .iter()
        .map(|s| labeler.label(s, tau, nms_iou))
        .collect::<Result<Vec<_>>>()?;
    evaluate_detections(&dets, samples_with_oracle_gt, class_names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(b: [f64; 4]) -> BBox {
        BBox::new(b[0], b[1], b[2], b[3]).unwrap()
    }

    fn det(b: [f64; 4], score: f64) -> ScoredBox {
        ScoredBox { bbox: bx(b), score, class: 0 }
    }

    fn gt(b: [f64; 4]) -> GtBox {
        GtBox { bbox: bx(b), class: 0 }
    }

    #[test]
    fn single_match_and_miss() {
        let g = vec![vec![gt([0.0, 0.0, 10.0, 10.0])]];
        assert_eq!(average_precision(&[vec![det([0.0, 0.0, 10.0, 10.0], 0.5)]], &g, 0.5, 1), vec![Some(1.0)]);
        assert_eq!(average_precision(&[vec![]], &g, 0.5, 1), vec![Some(0.0)]);
        assert_eq!(average_precision(&[vec![]], &[vec![]], 0.5, 1), vec![None]);
    }

    #[test]
    fn false_positive_ranked_first_halves_ap() {
        let g = vec![vec![gt([0.0, 0.0, 10.0, 10.0])]];
        let d = vec![vec![det([50.0, 50.0, 60.0, 60.0], 0.95), det([0.0, 0.0, 10.0, 10.0], 0.9)]];
        let ap = average_precision(&d, &g, 0.5, 1)[0].unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gt_matched_at_most_once() {
        let g = vec![vec![gt([0.0, 0.0, 10.0, 10.0])]];
        let d = vec![vec![det([0.0, 0.0, 10.0, 10.0], 0.9), det([0.0, 0.0, 10.0, 10.0], 0.8)]];
        assert!((average_precision(&d, &g, 0.5, 1)[0].unwrap() - 1.0).abs() < 1e-12);
        // duplicate first: precision 1 at recall 1 is reached before the FP
        let d = vec![vec![det([0.0, 0.0, 10.0, 10.0], 0.8), det([0.0, 0.0, 10.0, 10.0], 0.9)]];
        assert!((average_precision(&d, &g, 0.5, 1)[0].unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_only_dependence() {
        let g = vec![vec![gt([0.0, 0.0, 10.0, 10.0]), gt([20.0, 20.0, 30.0, 30.0])]];
        let d = vec![vec![
            det([0.0, 0.0, 10.0, 10.0], 0.3),
            det([40.0, 40.0, 50.0, 50.0], 0.6),
            det([21.0, 20.0, 30.0, 30.0], 0.2),
        ]];
        let base = average_precision(&d, &g, 0.5, 1)[0].unwrap();
        let rescaled: Vec<Vec<ScoredBox>> = d
            .iter()
            .map(|v| v.iter().map(|s| ScoredBox { score: s.score.sqrt() * 0.5, ..*s }).collect())
            .collect();
        assert_eq!(average_precision(&rescaled, &g, 0.5, 1)[0].unwrap(), base);
    }

    #[test]
    fn empty_eval_set_rejected() {
        assert!(evaluate_detections(&[], &[], &["a".into()]).is_err());
    }
}
