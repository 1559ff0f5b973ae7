//! Anchor-target assignment and the joint objective
//! `loss = sup + lambda_u * unsup`, each part a per-image sum of
//! `cls / N_cls + lambda * reg / N_reg` (cross-entropy and L1 on deltas).

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxgeom::{encode_delta, iou, BBox, BoxDelta};
use crate::detector::{softmax, DetectorState, RawOutputs};
use crate::error::{Error, Result};
use crate::sample::{Annotation, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub labels: Vec<AnchorLabel>,
    /// Loss weight per anchor: the matched target's weight for positives,
    /// 1 for negatives, 0 for ignored anchors.
    pub weights: Vec<f64>,
}

impl AssignmentResult {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| matches!(l, AnchorLabel::Positive(_))).count()
    }
}

/// IoU-threshold matching. An anchor is positive when its best IoU reaches
/// `pos_iou` (matched to the argmax target, ties to the lower index),
/// negative below `neg_iou`, ignored in between. Each target's best anchor
/// is additionally forced positive.
pub fn assign_targets(anchors: &[BBox], targets: &[Annotation], pos_iou: f64, neg_iou: f64) -> Result<AssignmentResult> {
    if !(0.0 <= neg_iou && neg_iou <= pos_iou && pos_iou <= 1.0) {
        return Err(Error::config(format!(
            "assignment thresholds need 0 <= neg ({neg_iou}) <= pos ({pos_iou}) <= 1"
        )));
    }
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if targets.is_empty() {
        return Ok(AssignmentResult {
            weights: vec![1.0; anchors.len()],
            labels,
        });
    }

    let mut best_anchor = vec![(f64::NEG_INFINITY, usize::MAX); targets.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0);
        for (t, target) in targets.iter().enumerate() {
            let v = iou(anchor, &target.bbox);
            if v > best.0 {
                best = (v, t);
            }
            if v > best_anchor[t].0 {
                best_anchor[t] = (v, a);
            }
        }
        labels[a] = if best.0 >= pos_iou {
            AnchorLabel::Positive(best.1)
        } else if best.0 < neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }

    let mut forced: Vec<Option<(f64, usize)>> = vec![None; anchors.len()];
    for (t, &(v, a)) in best_anchor.iter().enumerate() {
        if a == usize::MAX || v <= 0.0 {
            continue;
        }
        if forced[a].is_none_or(|(fv, _)| v > fv) {
            forced[a] = Some((v, t));
        }
    }
    for (a, f) in forced.iter().enumerate() {
        if let Some((_, t)) = f {
            labels[a] = AnchorLabel::Positive(*t);
        }
    }

    let weights = labels
        .iter()
        .map(|l| match l {
            AnchorLabel::Positive(t) => targets[*t].weight,
            AnchorLabel::Negative => 1.0,
            AnchorLabel::Ignore => 0.0,
        })
        .collect();
    Ok(AssignmentResult { labels, weights })
}

/// Per-anchor training targets for one image after negative subsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTargets {
    /// Class index over `[background, class_0, ..]`.
    pub cls_target: Vec<usize>,
    /// Cross-entropy weight; anchors outside the classification sum have `None`.
    pub cls_weight: Vec<Option<f64>>,
    /// Regression target and weight; `None` outside the regression sum.
    pub reg: Vec<Option<(BoxDelta, f64)>>,
    pub n_cls: usize,
    pub n_reg: usize,
}

/// How regression targets are admitted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegressionGate {
    /// Every positive regresses (human labels).
    All,
    /// Only targets whose recorded confidence is at least `tau`.
    Confidence(f64),
}

/// Build loss targets from an assignment. Negatives are capped at
/// `neg_ratio` times the number of positives, chosen uniformly with `rng`.
pub fn build_targets(
    anchors: &[BBox],
    targets: &[Annotation],
    assignment: &AssignmentResult,
    neg_ratio: f64,
    gate: RegressionGate,
    rng: &mut impl Rng,
) -> ImageTargets {
    let n = anchors.len();
    let mut out = ImageTargets {
        cls_target: vec![0; n],
        cls_weight: vec![None; n],
        reg: vec![None; n],
        n_cls: 0,
        n_reg: 0,
    };
    let mut negatives = Vec::new();
    for (a, label) in assignment.labels.iter().enumerate() {
        match *label {
            AnchorLabel::Positive(t) => {
                let target = &targets[t];
                out.cls_target[a] = target.class + 1;
                out.cls_weight[a] = Some(assignment.weights[a]);
                out.n_cls += 1;
                let admitted = match gate {
                    RegressionGate::All => true,
                    RegressionGate::Confidence(tau) => target.confidence >= tau,
                };
                if admitted {
                    out.reg[a] = Some((encode_delta(&anchors[a], &target.bbox), assignment.weights[a]));
                    out.n_reg += 1;
                }
            }
            AnchorLabel::Negative => negatives.push(a),
            AnchorLabel::Ignore => {}
        }
    }
    let num_pos = out.n_cls;
    let cap = ((num_pos as f64) * neg_ratio).floor() as usize;
    let chosen: Vec<usize> = if negatives.len() <= cap {
        negatives
    } else {
        let mut picked: Vec<usize> = sample_indices(rng, negatives.len(), cap).into_iter().map(|i| negatives[i]).collect();
        picked.sort_unstable();
        picked
    };
    for a in chosen {
        out.cls_target[a] = 0;
        out.cls_weight[a] = Some(assignment.weights[a]);
        out.n_cls += 1;
    }
    out
}

/// Loss of one image and its gradients w.r.t. the raw head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLoss {
    /// `(1/N_cls) * sum w * CE`
    pub cls: f64,
    /// `(lambda/N_reg) * sum w * L1`
    pub reg: f64,
    pub n_cls: usize,
    pub n_reg: usize,
    pub dlogits: Vec<f64>,
    pub ddeltas: Vec<f64>,
}

impl ImageLoss {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }
}

/// Cross-entropy plus L1 regression for one image.
pub fn image_loss(raw: &RawOutputs, targets: &ImageTargets, lambda: f64) -> Result<ImageLoss> {
    if lambda < 0.0 {
        return Err(Error::config(format!("lambda {lambda} must be >= 0")));
    }
    let k = raw.num_classes + 1;
    let n = raw.num_anchors();
    if targets.cls_target.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} anchors", targets.cls_target.len())));
    }
    let mut out = ImageLoss {
        cls: 0.0,
        reg: 0.0,
        n_cls: targets.n_cls,
        n_reg: targets.n_reg,
        dlogits: vec![0.0; n * k],
        ddeltas: vec![0.0; n * 4],
    };
    if targets.n_cls > 0 {
        let norm = 1.0 / targets.n_cls as f64;
        for a in 0..n {
            let Some(w) = targets.cls_weight[a] else { continue };
            let probs = softmax(raw.logits_of(a));
            let c = targets.cls_target[a];
            out.cls += w * -probs[c].max(f64::MIN_POSITIVE).ln();
            for (j, &p) in probs.iter().enumerate() {
                let onehot = if j == c { 1.0 } else { 0.0 };
                out.dlogits[a * k + j] = norm * w * (p - onehot);
            }
        }
        out.cls *= norm;
    }
    if targets.n_reg > 0 {
        let norm = lambda / targets.n_reg as f64;
        for a in 0..n {
            let Some((t, w)) = targets.reg[a] else { continue };
            let pred = &raw.deltas[a * 4..a * 4 + 4];
            for (j, (&p, tj)) in pred.iter().zip(t.to_array()).enumerate() {
                let diff = p - tj;
                out.reg += w * diff.abs();
                out.ddeltas[a * 4 + j] = norm * w * sign(diff);
            }
        }
        out.reg *= norm;
    }
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Supervised loss of one labeled image: all positives regress.
pub fn supervised_loss(raw: &RawOutputs, targets: &ImageTargets, lambda: f64) -> Result<ImageLoss> {
    image_loss(raw, targets, lambda)
}

/// Unsupervised loss of one strongly augmented image. The regression gate by
/// pre-mix pseudo confidence is applied when its targets are built
/// ([`RegressionGate::Confidence`]); the loss itself has the same form.
pub fn unsupervised_loss(raw: &RawOutputs, targets: &ImageTargets, lambda: f64) -> Result<ImageLoss> {
    image_loss(raw, targets, lambda)
}

pub fn total_loss(sup: f64, unsup: f64, lambda_u: f64) -> f64 {
    sup + lambda_u * unsup
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub sup: f64,
    pub unsup: f64,
    pub sup_cls: f64,
    pub sup_reg: f64,
    pub unsup_cls: f64,
    pub unsup_reg: f64,
    pub n_cls_sup: usize,
    pub n_reg_sup: usize,
    pub n_cls_unsup: usize,
    pub n_reg_unsup: usize,
}

/// One image fed to the objective: its pixels and prepared targets.
#[derive(Debug, Clone)]
pub struct LossItem<'a> {
    pub image: &'a Image,
    pub targets: ImageTargets,
}

/// Loss and parameter gradient over a batch. `sup` is the mean per-image
/// loss over the labeled half, `unsup` the mean over the unlabeled half; the
/// gradient is of `sup + lambda_u * unsup`. With `lambda_u == 0` the unlabeled
/// branch is evaluated for logging only and contributes nothing to the
/// gradient.
pub fn batch_gradients(
    state: &DetectorState,
    labeled: &[LossItem<'_>],
    unlabeled: &[LossItem<'_>],
    lambda: f64,
    lambda_u: f64,
) -> Result<(Vec<f64>, LossBreakdown)> {
    if lambda_u < 0.0 {
        return Err(Error::config(format!("lambda_u {lambda_u} must be >= 0")));
    }
    let mut grads = vec![0.0; state.num_params()];
    let mut br = LossBreakdown::default();
    let sup_scale = 1.0 / labeled.len().max(1) as f64;
    let unsup_scale = 1.0 / unlabeled.len().max(1) as f64;
    for item in labeled {
        let (raw, cache) = state.forward_cached(item.image)?;
        let l = supervised_loss(&raw, &item.targets, lambda)?;
        br.sup_cls += l.cls;
        br.sup_reg += l.reg;
        br.n_cls_sup += l.n_cls;
        br.n_reg_sup += l.n_reg;
        if l.n_cls > 0 {
            state.backward_into(&cache, &l.dlogits, &l.ddeltas, sup_scale, &mut grads);
        }
    }
    for item in unlabeled {
        let (raw, cache) = state.forward_cached(item.image)?;
        let l = unsupervised_loss(&raw, &item.targets, lambda)?;
        br.unsup_cls += l.cls;
        br.unsup_reg += l.reg;
        br.n_cls_unsup += l.n_cls;
        br.n_reg_unsup += l.n_reg;
        if lambda_u != 0.0 && l.n_cls > 0 {
            state.backward_into(&cache, &l.dlogits, &l.ddeltas, lambda_u * unsup_scale, &mut grads);
        }
    }
    br.sup_cls *= sup_scale;
    br.sup_reg *= sup_scale;
    br.unsup_cls *= unsup_scale;
    br.unsup_reg *= unsup_scale;
    br.sup = br.sup_cls + br.sup_reg;
    br.unsup = br.unsup_cls + br.unsup_reg;
    br.total = total_loss(br.sup, br.unsup, lambda_u);
    Ok((grads, br))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ArchConfig;
    use crate::rng::stream;

    fn ann(b: [f64; 4], class: usize, weight: f64, confidence: f64) -> Annotation {
        Annotation {
            bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            class,
            weight,
            confidence,
        }
    }

    fn bx(b: [f64; 4]) -> BBox {
        BBox::new(b[0], b[1], b[2], b[3]).unwrap()
    }

    #[test]
    fn assignment_examples() {
        let anchors = vec![bx([0.0, 0.0, 10.0, 10.0]), bx([50.0, 50.0, 60.0, 60.0])];
        let r = assign_targets(&anchors, &[ann([0.0, 0.0, 10.0, 10.0], 1, 1.0, 1.0)], 0.5, 0.4).unwrap();
        assert_eq!(r.labels, vec![AnchorLabel::Positive(0), AnchorLabel::Negative]);

        let r = assign_targets(&anchors, &[], 0.5, 0.4).unwrap();
        assert!(r.labels.iter().all(|l| *l == AnchorLabel::Negative));

        assert!(assign_targets(&anchors, &[], 0.3, 0.4).is_err());
    }

    #[test]
    fn mid_iou_anchor_is_ignored() {
        // anchor [0,0,10,10] vs target [0,0,10,h]: IoU = h/10 for h <= 10
        // 0.45 by area: target [0,0,10,4.5]; a second, exact anchor takes the
        // forced-best slot so the first keeps its threshold label.
        let anchors = vec![bx([0.0, 0.0, 10.0, 10.0]), bx([0.0, 0.0, 10.0, 4.5])];
        let target = ann([0.0, 0.0, 10.0, 4.5], 0, 1.0, 1.0);
        assert!((iou(&anchors[0], &target.bbox) - 0.45).abs() < 1e-12);
        let r = assign_targets(&anchors, &[target], 0.5, 0.4).unwrap();
        assert_eq!(r.labels, vec![AnchorLabel::Ignore, AnchorLabel::Positive(0)]);
        assert_eq!(r.weights, vec![0.0, 1.0]);
    }

    #[test]
    fn best_anchor_forced_positive() {
        let anchors = vec![bx([0.0, 0.0, 10.0, 10.0]), bx([30.0, 30.0, 40.0, 40.0])];
        let r = assign_targets(&anchors, &[ann([0.0, 0.0, 4.0, 4.0], 2, 0.3, 0.95)], 0.5, 0.4).unwrap();
        assert_eq!(r.labels[0], AnchorLabel::Positive(0));
        assert_eq!(r.weights[0], 0.3);
    }

    #[test]
    fn negatives_capped_at_ratio() {
        let anchors: Vec<BBox> = (0..50).map(|i| bx([i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0])).collect();
        let targets = [ann([0.0, 0.0, 10.0, 10.0], 0, 1.0, 1.0)];
        let r = assign_targets(&anchors, &targets, 0.5, 0.4).unwrap();
        let t = build_targets(&anchors, &targets, &r, 3.0, RegressionGate::All, &mut stream(&[1]));
        assert_eq!((t.n_cls, t.n_reg), (4, 1));
        let again = build_targets(&anchors, &targets, &r, 3.0, RegressionGate::All, &mut stream(&[1]));
        assert_eq!(t, again);

        let none = assign_targets(&anchors, &[], 0.5, 0.4).unwrap();
        let t = build_targets(&anchors, &[], &none, 3.0, RegressionGate::All, &mut stream(&[1]));
        assert_eq!((t.n_cls, t.n_reg), (0, 0));
    }

    fn one_anchor_raw(logits: Vec<f64>, deltas: [f64; 4]) -> RawOutputs {
        RawOutputs {
            grid_h: 1,
            grid_w: 1,
            anchors_per_cell: 1,
            num_classes: logits.len() - 1,
            logits,
            deltas: deltas.to_vec(),
        }
    }

    fn single_targets(class: usize, reg: Option<BoxDelta>) -> ImageTargets {
        ImageTargets {
            cls_target: vec![class],
            cls_weight: vec![Some(1.0)],
            reg: vec![reg.map(|d| (d, 1.0))],
            n_cls: 1,
            n_reg: usize::from(reg.is_some()),
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let raw = one_anchor_raw(vec![0.0; 4], [0.0; 4]);
        let l = supervised_loss(&raw, &single_targets(2, None), 1.0).unwrap();
        assert!((l.cls - 4f64.ln()).abs() < 1e-12);
        assert_eq!(l.reg, 0.0);

        let raw = one_anchor_raw(vec![0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()], [0.0; 4]);
        let l = supervised_loss(&raw, &single_targets(0, None), 1.0).unwrap();
        assert!((l.cls - 0.356_674_943_938_732_4).abs() < 1e-12);

        let raw = one_anchor_raw(vec![-800.0, 800.0, -800.0], [0.0; 4]);
        let l = supervised_loss(&raw, &single_targets(1, Some(BoxDelta::ZERO)), 1.0).unwrap();
        assert_eq!(l.total(), 0.0);
    }

    #[test]
    fn l1_regression_with_lambda() {
        let raw = one_anchor_raw(vec![0.0, 0.0], [0.5, -0.5, 0.0, 1.0]);
        let l = supervised_loss(&raw, &single_targets(1, Some(BoxDelta::ZERO)), 2.0).unwrap();
        assert!((l.reg - 4.0).abs() < 1e-12);
        assert_eq!(&l.ddeltas, &[2.0, -2.0, 0.0, 2.0]);
    }

    #[test]
    fn empty_targets_give_zero() {
        let raw = one_anchor_raw(vec![0.3, 0.1], [0.5, -0.5, 0.0, 1.0]);
        let t = ImageTargets {
            cls_target: vec![0],
            cls_weight: vec![None],
            reg: vec![None],
            n_cls: 0,
            n_reg: 0,
        };
        let l = unsupervised_loss(&raw, &t, 1.0).unwrap();
        assert_eq!((l.cls, l.reg), (0.0, 0.0));
        assert!(l.dlogits.iter().chain(&l.ddeltas).all(|&g| g == 0.0));
    }

    #[test]
    fn confidence_gate() {
        let anchors = vec![bx([0.0, 0.0, 10.0, 10.0])];
        for (conf, expect) in [(0.95, 1), (0.85, 0)] {
            let targets = [ann([1.0, 0.0, 10.0, 10.0], 0, 1.0, conf)];
            let r = assign_targets(&anchors, &targets, 0.5, 0.4).unwrap();
            let t = build_targets(&anchors, &targets, &r, 3.0, RegressionGate::Confidence(0.9), &mut stream(&[0]));
            assert_eq!(t.n_reg, expect);
            assert_eq!(t.n_cls, 1);
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 0.5, 1.0), 1.5);
        assert_eq!(total_loss(0.7, 0.5, 0.0), 0.7);
        assert_eq!(total_loss(1.0, 0.5, 2.0), 2.0);
    }

    #[test]
    fn weight_scales_contribution_linearly() {
        let raw = one_anchor_raw(vec![0.2, -0.1, 0.4], [0.1, 0.2, -0.3, 0.0]);
        let mut t = single_targets(1, Some(BoxDelta::ZERO));
        let base = image_loss(&raw, &t, 1.0).unwrap();
        t.cls_weight[0] = Some(2.0);
        t.reg[0] = Some((BoxDelta::ZERO, 2.0));
        let doubled = image_loss(&raw, &t, 1.0).unwrap();
        assert!((doubled.total() - 2.0 * base.total()).abs() < 1e-12);
    }

    #[test]
    fn batch_decomposition_holds() {
        let arch = ArchConfig {
            channels: vec![4, 4, 4],
            strides: vec![2, 2, 2],
            anchor_size: 8.0,
            aspect_ratios: vec![1.0],
            ..ArchConfig::default()
        };
        let state = DetectorState::init(&arch, 3).unwrap();
        let img = Image::filled(16, 16, 0.3).unwrap();
        let anchors = state.anchors(16, 16).unwrap();
        let targets = [ann([1.0, 1.0, 9.0, 8.0], 2, 1.0, 0.97)];
        let r = assign_targets(&anchors, &targets, 0.5, 0.4).unwrap();
        let t = build_targets(&anchors, &targets, &r, 3.0, RegressionGate::All, &mut stream(&[2]));
        let item = LossItem { image: &img, targets: t };
        let (_, br) = batch_gradients(&state, &[item.clone()], &[item], 1.0, 0.5).unwrap();
        assert!((br.total - (br.sup + 0.5 * br.unsup)).abs() <= 1e-12 * br.total.abs());
        assert!(br.sup > 0.0 && br.unsup > 0.0);
    }
}
