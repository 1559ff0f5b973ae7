//! Training loop for the supervised baseline, Instant-Teaching and the
//! co-rectified two-model variant.
//!
//! Each iteration has two steps. Step 1 labels the weakly augmented unlabeled
//! half with a frozen snapshot of the current parameters; step 2 strongly
//! augments those images (Mixup/Mosaic partners come from the labeled half)
//! and takes one SGD step on `sup + lambda_u * unsup`.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{color_cutout, mix_stage, strong_augment, weak_augment, AugmentConfig};
use crate::checkpoint::{Checkpoint, ModelState};
use crate::detector::{ArchConfig, DetectorState};
use crate::error::{Error, Result};
use crate::eval::{pseudo_quality, Labeler};
use crate::losses::{assign_targets, batch_gradients, build_targets, LossBreakdown, LossItem, RegressionGate};
use crate::rng::{train_stream, Purpose};
use crate::sample::{ImageSample, Image};
use crate::synthdata::{Dataset, DatasetSplit, TrainingView};
use crate::teaching::{corectify_pseudo_label, pseudo_label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainMode {
    Supervised,
    Instant,
    InstantStar,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Supervised => "supervised",
            TrainMode::Instant => "instant",
            TrainMode::InstantStar => "instant-star",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "supervised" => Ok(TrainMode::Supervised),
            "instant" => Ok(TrainMode::Instant),
            "instant-star" => Ok(TrainMode::InstantStar),
            _ => Err(Error::config(format!("unknown mode {s:?} (expected supervised, instant or instant-star)"))),
        }
    }
}

/// Decay points as fractions of the schedule (120k and 165k of 180k).
const DECAY_FRACTIONS: [f64; 2] = [120.0 / 180.0, 165.0 / 180.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lambda: f64,
    pub lambda_u: f64,
    pub tau: f64,
    pub alpha_m: f64,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    /// Two strictly increasing step indices where the lr drops 10x. `None`
    /// scales the reference schedule to `total_steps`.
    pub decay_points: Option<[usize; 2]>,
    /// Images per iteration, split evenly into labeled and unlabeled halves.
    pub batch_size: usize,
    pub seed: u64,
    /// Model b is initialized (and augmented) with `seed + star_seed_offset`.
    pub star_seed_offset: u64,
    pub checkpoint_every: usize,
    pub nms_iou: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub neg_ratio: f64,
    /// Pseudo-label the color-jittered, cut-out view that step 2 trains on
    /// instead of the weak view (removes the weak/strong gap).
    pub pseudo_on_strong: bool,
    /// Cap the unlabeled pool at this multiple of the labeled pool; 0 = all.
    pub unlabeled_mult: usize,
    pub arch: ArchConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Instant,
            lambda: 1.0,
            lambda_u: 1.0,
            tau: 0.9,
            alpha_m: 1.0,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            total_steps: 18_000,
            decay_points: None,
            batch_size: 16,
            seed: 0,
            star_seed_offset: 1000,
            checkpoint_every: 1000,
            nms_iou: 0.5,
            pos_iou: 0.5,
            neg_iou: 0.4,
            neg_ratio: 3.0,
            pseudo_on_strong: false,
            unlabeled_mult: 0,
            arch: ArchConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "mode",
    "lambda",
    "lambda_u",
    "tau",
    "alpha_m",
    "lr",
    "momentum",
    "weight_decay",
    "total_steps",
    "decay_points",
    "batch_size",
    "seed",
    "star_seed_offset",
    "checkpoint_every",
    "nms_iou",
    "pos_iou",
    "neg_iou",
    "neg_ratio",
    "pseudo_on_strong",
    "unlabeled_mult",
    "num_classes",
    "channels",
    "strides",
    "anchor_size",
    "aspect_ratios",
    "head_init_std",
    "brightness",
    "contrast",
    "cutout_frac",
    "p_cutout",
    "p_none",
    "p_mixup",
    "p_mosaic",
];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse_num(key, p)).collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, v)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err(Error::config(format!("{key}: expected two comma-separated numbers, got {v:?}"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Set one flat key. Unknown keys are an error listing the valid ones.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = v.parse()?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "lambda_u" => self.lambda_u = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "alpha_m" => self.alpha_m = parse_num(key, v)?,
            "lr" => self.lr0 = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "total_steps" => self.total_steps = parse_num(key, v)?,
            "decay_points" => {
                self.decay_points = match parse_list::<usize>(key, v)?.as_slice() {
                    &[a, b] => Some([a, b]),
                    _ => return Err(Error::config(format!("decay_points: expected two step indices, got {v:?}"))),
                }
            }
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "star_seed_offset" => self.star_seed_offset = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "nms_iou" => self.nms_iou = parse_num(key, v)?,
            "pos_iou" => self.pos_iou = parse_num(key, v)?,
            "neg_iou" => self.neg_iou = parse_num(key, v)?,
            "neg_ratio" => self.neg_ratio = parse_num(key, v)?,
            "pseudo_on_strong" => self.pseudo_on_strong = parse_num(key, v)?,
            "unlabeled_mult" => self.unlabeled_mult = parse_num(key, v)?,
            "num_classes" => self.arch.num_classes = parse_num(key, v)?,
            "channels" => self.arch.channels = parse_list(key, v)?,
            "strides" => self.arch.strides = parse_list(key, v)?,
            "anchor_size" => self.arch.anchor_size = parse_num(key, v)?,
            "aspect_ratios" => self.arch.aspect_ratios = parse_list(key, v)?,
            "head_init_std" => self.arch.head_init_std = parse_num(key, v)?,
            "brightness" => self.augment.brightness = parse_pair(key, v)?,
            "contrast" => self.augment.contrast = parse_pair(key, v)?,
            "cutout_frac" => self.augment.cutout_frac = parse_pair(key, v)?,
            "p_cutout" => self.augment.p_cutout = parse_num(key, v)?,
            "p_none" => self.augment.p_none = parse_num(key, v)?,
            "p_mixup" => self.augment.p_mixup = parse_num(key, v)?,
            "p_mosaic" => self.augment.p_mosaic = parse_num(key, v)?,
            other => {
                return Err(Error::config(format!(
                    "unknown config key {other:?}; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Apply a flat `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::config(format!("config line {}: {}", i + 1, e.to_string().trim_start_matches("configuration error: "))))?;
        }
        Ok(())
    }

    /// Every key with its resolved value, in the flat file format.
    pub fn to_flat(&self) -> String {
        let d = self.decay();
        let a = &self.augment;
        let rows: Vec<(&str, String)> = vec![
            ("mode", self.mode.to_string()),
            ("lambda", self.lambda.to_string()),
            ("lambda_u", self.lambda_u.to_string()),
            ("tau", self.tau.to_string()),
            ("alpha_m", self.alpha_m.to_string()),
            ("lr", self.lr0.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("decay_points", join(&d)),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("star_seed_offset", self.star_seed_offset.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("nms_iou", self.nms_iou.to_string()),
            ("pos_iou", self.pos_iou.to_string()),
            ("neg_iou", self.neg_iou.to_string()),
            ("neg_ratio", self.neg_ratio.to_string()),
            ("pseudo_on_strong", self.pseudo_on_strong.to_string()),
            ("unlabeled_mult", self.unlabeled_mult.to_string()),
            ("num_classes", self.arch.num_classes.to_string()),
            ("channels", join(&self.arch.channels)),
            ("strides", join(&self.arch.strides)),
            ("anchor_size", self.arch.anchor_size.to_string()),
            ("aspect_ratios", join(&self.arch.aspect_ratios)),
            ("head_init_std", self.arch.head_init_std.to_string()),
            ("brightness", format!("{},{}", a.brightness.0, a.brightness.1)),
            ("contrast", format!("{},{}", a.contrast.0, a.contrast.1)),
            ("cutout_frac", format!("{},{}", a.cutout_frac.0, a.cutout_frac.1)),
            ("p_cutout", a.p_cutout.to_string()),
            ("p_none", a.p_none.to_string()),
            ("p_mixup", a.p_mixup.to_string()),
            ("p_mosaic", a.p_mosaic.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Resolved decay points.
    pub fn decay(&self) -> [usize; 2] {
        self.decay_points.unwrap_or_else(|| {
            let t = self.total_steps as f64;
            [(t * DECAY_FRACTIONS[0]).round() as usize, (t * DECAY_FRACTIONS[1]).round() as usize]
        })
    }

    /// The same config with every implicit default made explicit.
    pub fn resolved(&self) -> TrainConfig {
        TrainConfig {
            decay_points: Some(self.decay()),
            ..self.clone()
        }
    }

    /// Augmentation settings with the top-level Mixup `alpha_m` applied.
    pub fn effective_augment(&self) -> AugmentConfig {
        AugmentConfig {
            alpha_m: self.alpha_m,
            ..self.augment.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.effective_augment().validate()?;
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be >= 1"));
        }
        let [d0, d1] = self.decay();
        if !(d0 < d1 && d1 < self.total_steps) {
            return Err(Error::config(format!(
                "decay_points {d0},{d1} must be strictly increasing and below total_steps {}",
                self.total_steps
            )));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::config(format!("batch_size {} must be even and >= 2", self.batch_size)));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::config(format!("tau {} must lie in [0, 1)", self.tau)));
        }
        for (name, v) in [("lambda", self.lambda), ("lambda_u", self.lambda_u), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} {v} must be finite and >= 0")));
            }
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr {} must be > 0", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.nms_iou) || !(self.neg_iou <= self.pos_iou) || !(0.0..=1.0).contains(&self.pos_iou) {
            return Err(Error::config("need nms_iou in [0,1) and neg_iou <= pos_iou <= 1"));
        }
        if !(self.neg_ratio >= 0.0) {
            return Err(Error::config("neg_ratio must be >= 0"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be >= 1"));
        }
        Ok(())
    }

    pub fn half_batch(&self) -> usize {
        self.batch_size / 2
    }

    pub fn model_seeds(&self) -> Vec<u64> {
        match self.mode {
            TrainMode::InstantStar => vec![self.seed, self.seed.wrapping_add(self.star_seed_offset)],
            _ => vec![self.seed],
        }
    }
}

/// Step learning rate: `lr0`, then `lr0/10` from the first decay point and
/// `lr0/100` from the second.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let [d0, d1] = config.decay();
    if step < d0 {
        config.lr0
    } else if step < d1 {
        config.lr0 / 10.0
    } else {
        config.lr0 / 100.0
    }
}

/// Model a, and model b in the co-rectified mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub a: ModelState,
    pub b: Option<ModelState>,
}

impl ModelPair {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        let seeds = config.model_seeds();
        let a = ModelState::new(DetectorState::init(&config.arch, seeds[0])?);
        let b = match seeds.get(1) {
            Some(&s) => Some(ModelState::new(DetectorState::init(&config.arch, s)?)),
            None => None,
        };
        Ok(ModelPair { a, b })
    }

    pub fn models(&self) -> Vec<&ModelState> {
        std::iter::once(&self.a).chain(self.b.as_ref()).collect()
    }

    fn models_mut(&mut self) -> Vec<&mut ModelState> {
        std::iter::once(&mut self.a).chain(self.b.as_mut()).collect()
    }

    /// The model used for inference.
    pub fn primary(&self) -> &DetectorState {
        &self.a.detector
    }

    pub fn to_checkpoint(&self, step: usize, config: &TrainConfig) -> Checkpoint {
        Checkpoint {
            step,
            models: self.models().into_iter().cloned().collect(),
            config: serde_json::to_value(config.resolved()).expect("config serializes"),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut it = ck.models.iter().cloned();
        let a = it.next().ok_or_else(|| Error::config("checkpoint has no models"))?;
        Ok(ModelPair { a, b: it.next() })
    }
}

/// Annotation counts behind the "annotations per image" curve: `n1` is the
/// mean number of human boxes per labeled image in the batch, `n2` adds the
/// mean number of pseudo boxes per unlabeled image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoStatsRecord {
    pub iteration: usize,
    pub n1: f64,
    pub n2: f64,
}

/// One metrics-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub sup_cls: f64,
    pub sup_reg: f64,
    pub unsup_cls: f64,
    pub unsup_reg: f64,
    pub n1: f64,
    pub n2: f64,
    /// Pseudo boxes produced for model a in this iteration.
    pub pseudo_count: usize,
    pub wall_ms: f64,
    /// Total loss of model b (co-rectified mode only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_total_b: Option<f64>,
}

impl MetricsRecord {
    /// Equality ignoring the wall-clock field.
    pub fn same_values(&self, other: &MetricsRecord) -> bool {
        MetricsRecord { wall_ms: 0.0, ..self.clone() } == MetricsRecord { wall_ms: 0.0, ..other.clone() }
    }
}

/// Result of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub losses: LossBreakdown,
    pub losses_b: Option<LossBreakdown>,
    pub stats: PseudoStatsRecord,
    pub pseudo_count: usize,
}

struct ModelStep {
    grads: Vec<f64>,
    losses: LossBreakdown,
    pseudo_boxes: usize,
}

fn sample_indices(seed: u64, step: usize, purpose: Purpose, pool: usize, count: usize) -> Vec<usize> {
    let mut rng = train_stream(seed, step, purpose, 0);
    (0..count).map(|_| rng.random_range(0..pool)).collect()
}

/// Step-1 and step-2 work for one model against frozen parameters.
#[allow(clippy::too_many_arguments)]
fn model_step(
    me: &DetectorState,
    partner: Option<&DetectorState>,
    labeled: &[&ImageSample],
    unlabeled: &[(&str, &Image)],
    config: &TrainConfig,
    aug: &AugmentConfig,
    step: usize,
    count_human: &mut usize,
) -> Result<ModelStep> {
    let s = me.init_seed;
    let (h, w) = (labeled[0].height(), labeled[0].width());
    let anchors = me.anchors(h, w)?;

    let weak_labeled: Vec<ImageSample> = labeled
        .iter()
        .enumerate()
        .map(|(i, l)| weak_augment(l, &mut train_stream(s, step, Purpose::LabeledAugment, i)).0)
        .collect();
    *count_human = weak_labeled.iter().map(|l| l.annotation_items().len()).sum();

    let mut strong_views = Vec::with_capacity(unlabeled.len());
    let mut pseudo_boxes = 0;
    for (j, &(id, image)) in unlabeled.iter().enumerate() {
        let raw = ImageSample {
            id: id.to_string(),
            image: image.clone(),
            annotations: None,
        };
        let (mut weak, _) = weak_augment(&raw, &mut train_stream(s, step, Purpose::UnlabeledWeak, j));
        let k = train_stream(s, step, Purpose::MixupPartner, j).random_range(0..weak_labeled.len());
        let mut strong_rng = train_stream(s, step, Purpose::UnlabeledStrong, j);
        let label = |img: &Image| match partner {
            None => pseudo_label(me, id, img, config.tau, config.nms_iou),
            Some(p) => corectify_pseudo_label(me, p, id, img, config.tau, config.nms_iou),
        };
        let strong = if config.pseudo_on_strong {
            // label the very jittered/cut-out view that is then mixed and trained on
            let (mut jittered, params, rect) = color_cutout(&weak, aug, &mut strong_rng);
            let labels = label(&jittered.image)?;
            pseudo_boxes += labels.len();
            jittered.annotations = Some(labels.to_annotations());
            mix_stage(&jittered, params, rect, &weak_labeled[k], aug, &mut strong_rng)?.0
        } else {
            let labels = label(&weak.image)?;
            pseudo_boxes += labels.len();
            weak.annotations = Some(labels.to_annotations());
            strong_augment(&weak, &weak_labeled[k], aug, &mut strong_rng)?.0
        };
        strong_views.push(strong);
    }

    let mut lab_items = Vec::with_capacity(weak_labeled.len());
    for (i, l) in weak_labeled.iter().enumerate() {
        let targets = l.annotation_items();
        let assignment = assign_targets(&anchors, targets, config.pos_iou, config.neg_iou)?;
        let t = build_targets(
            &anchors,
            targets,
            &assignment,
            config.neg_ratio,
            RegressionGate::All,
            &mut train_stream(s, step, Purpose::LabeledNegatives, i),
        );
        lab_items.push(LossItem { image: &l.image, targets: t });
    }
    let mut unl_items = Vec::with_capacity(strong_views.len());
    for (j, u) in strong_views.iter().enumerate() {
        let targets = u.annotation_items();
        let assignment = assign_targets(&anchors, targets, config.pos_iou, config.neg_iou)?;
        let t = build_targets(
            &anchors,
            targets,
            &assignment,
            config.neg_ratio,
            RegressionGate::Confidence(config.tau),
            &mut train_stream(s, step, Purpose::UnlabeledNegatives, j),
        );
        unl_items.push(LossItem { image: &u.image, targets: t });
    }
    let (grads, losses) = batch_gradients(me, &lab_items, &unl_items, config.lambda, config.lambda_u)?;
    Ok(ModelStep {
        grads,
        losses,
        pseudo_boxes,
    })
}

/// `v <- mu v + g + wd theta; theta <- theta - lr v`, with both kept
/// f32-representable. Returns the new state without touching the old one.
pub fn sgd_update(model: &ModelState, grads: &[f64], lr: f64, momentum: f64, weight_decay: f64) -> (Vec<f64>, Vec<f64>) {
    let mut params = model.detector.params.clone();
    let mut velocity = model.velocity.clone();
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        let nv = (momentum * *v + g + weight_decay * *p) as f32 as f64;
        *v = nv;
        *p = (*p - lr * nv) as f32 as f64;
    }
    (params, velocity)
}

/// One full iteration. On a non-finite loss or update the pair is left
/// untouched and an error is returned.
pub fn train_step(pair: &mut ModelPair, view: &TrainingView<'_>, config: &TrainConfig, step: usize) -> Result<StepOutput> {
    let half = config.half_batch();
    let lab_idx = sample_indices(config.seed, step, Purpose::LabeledBatch, view.labeled.len(), half);
    let labeled: Vec<&ImageSample> = lab_idx.iter().map(|&i| view.labeled[i]).collect();
    let unlabeled: Vec<(&str, &Image)> = if config.mode == TrainMode::Supervised {
        Vec::new()
    } else {
        if view.unlabeled.is_empty() {
            return Err(Error::config("semi-supervised modes need a non-empty unlabeled pool"));
        }
        sample_indices(config.seed, step, Purpose::UnlabeledBatch, view.unlabeled.len(), half)
            .into_iter()
            .map(|i| (view.unlabeled[i].id, view.unlabeled[i].image))
            .collect()
    };
    let aug = config.effective_augment();

    let snapshot: Vec<&DetectorState> = pair.models().into_iter().map(|m| &m.detector).collect();
    let mut results = Vec::with_capacity(snapshot.len());
    let mut human = 0;
    for (m, me) in snapshot.iter().enumerate() {
        let partner = (snapshot.len() == 2).then(|| snapshot[1 - m]);
        results.push(model_step(me, partner, &labeled, &unlabeled, config, &aug, step, &mut human)?);
    }

    for r in &results {
        let bad = !r.losses.total.is_finite() || r.grads.iter().any(|g| !g.is_finite());
        if bad {
            return Err(Error::NonFinite {
                step,
                message: format!("loss {} or its gradient is not finite", r.losses.total),
            });
        }
    }
    let lr = lr_at(step, config);
    let updates: Vec<(Vec<f64>, Vec<f64>)> = pair
        .models()
        .iter()
        .zip(&results)
        .map(|(m, r)| sgd_update(m, &r.grads, lr, config.momentum, config.weight_decay))
        .collect();
    if updates.iter().any(|(p, v)| p.iter().chain(v).any(|x| !x.is_finite())) {
        return Err(Error::NonFinite {
            step,
            message: "parameter update is not finite".into(),
        });
    }
    for (m, (p, v)) in pair.models_mut().into_iter().zip(updates) {
        m.detector.params = p;
        m.velocity = v;
    }

    let n1 = human as f64 / half as f64;
    let pseudo_count = results[0].pseudo_boxes;
    let n2 = if unlabeled.is_empty() { n1 } else { n1 + pseudo_count as f64 / half as f64 };
    let mut results = results.into_iter();
    let first = results.next().expect("model a");
    Ok(StepOutput {
        losses: first.losses,
        losses_b: results.next().map(|r| r.losses),
        stats: PseudoStatsRecord { iteration: step, n1, n2 },
        pseudo_count,
    })
}

/// Drives `train_step` over a dataset view, tracking the step counter.
pub struct Trainer<'a> {
    config: TrainConfig,
    view: TrainingView<'a>,
    pair: ModelPair,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, split: &DatasetSplit, config: &TrainConfig) -> Result<Self> {
        let pair = ModelPair::init(config)?;
        Trainer::with_pair(dataset, split, config, pair, 0)
    }

    pub fn resume(dataset: &'a Dataset, split: &DatasetSplit, config: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let stored: TrainConfig =
            serde_json::from_value(ck.config.clone()).map_err(|e| Error::parse("checkpoint config", e.to_string()))?;
        if stored != config.resolved() {
            return Err(Error::config("checkpoint was written with a different training config"));
        }
        let pair = ModelPair::from_checkpoint(ck)?;
        Trainer::with_pair(dataset, split, config, pair, ck.step)
    }

    fn with_pair(dataset: &'a Dataset, split: &DatasetSplit, config: &TrainConfig, pair: ModelPair, step: usize) -> Result<Self> {
        config.validate()?;
        if config.arch.num_classes != dataset.num_classes() {
            return Err(Error::config(format!(
                "config has {} classes but the dataset has {}",
                config.arch.num_classes,
                dataset.num_classes()
            )));
        }
        if pair.models().len() != config.model_seeds().len() {
            return Err(Error::config(format!("mode {} does not match the stored model count", config.mode)));
        }
        if step > config.total_steps {
            return Err(Error::config(format!("checkpoint step {step} exceeds total_steps {}", config.total_steps)));
        }
        let mut view = dataset.training_view(split)?;
        if config.unlabeled_mult > 0 {
            view.unlabeled.truncate(config.unlabeled_mult * view.labeled.len());
        }
        let (h, w) = (view.labeled[0].height(), view.labeled[0].width());
        if view.labeled.iter().any(|s| (s.height(), s.width()) != (h, w)) || view.unlabeled.iter().any(|u| (u.image.height(), u.image.width()) != (h, w)) {
            return Err(Error::config("all training images must share one size"));
        }
        pair.a.detector.grid_dims(h, w)?;
        Ok(Trainer {
            config: config.resolved(),
            view,
            pair,
            step,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn pair(&self) -> &ModelPair {
        &self.pair
    }

    pub fn into_pair(self) -> ModelPair {
        self.pair
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.pair.to_checkpoint(self.step, &self.config)
    }

    /// Run one iteration and return its metrics line.
    pub fn advance(&mut self) -> Result<MetricsRecord> {
        let started = Instant::now();
        let out = train_step(&mut self.pair, &self.view, &self.config, self.step)?;
        let rec = MetricsRecord {
            step: self.step,
            lr: lr_at(self.step, &self.config),
            loss_total: out.losses.total,
            loss_sup: out.losses.sup,
            loss_unsup: out.losses.unsup,
            sup_cls: out.losses.sup_cls,
            sup_reg: out.losses.sup_reg,
            unsup_cls: out.losses.unsup_cls,
            unsup_reg: out.losses.unsup_reg,
            n1: out.stats.n1,
            n2: out.stats.n2,
            pseudo_count: out.pseudo_count,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            loss_total_b: out.losses_b.map(|l| l.total),
        };
        self.step += 1;
        Ok(rec)
    }
}

/// Train from scratch in memory.
pub fn train(dataset: &Dataset, split: &DatasetSplit, config: &TrainConfig) -> Result<(ModelPair, Vec<MetricsRecord>)> {
    let mut t = Trainer::new(dataset, split, config)?;
    let mut log = Vec::with_capacity(config.total_steps);
    while !t.is_done() {
        log.push(t.advance()?);
    }
    Ok((t.into_pair(), log))
}

/// Pseudo-label quality of the current models, one line of
/// `pseudo_quality.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoQualityRecord {
    pub step: usize,
    pub tau: f64,
    pub n_images: usize,
    pub single_ap50: f64,
    pub single_map: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corectify_ap50: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corectify_map: Option<f64>,
}

/// Measure single-model and (with two models) co-rectified pseudo labels
/// against the withheld annotations of the first `n_images` unlabeled images.
pub fn measure_pseudo_quality(pair: &ModelPair, dataset: &Dataset, config: &TrainConfig, step: usize, n_images: usize) -> Result<PseudoQualityRecord> {
    let oracle = dataset.oracle();
    let samples: Vec<&ImageSample> = oracle.samples().into_iter().take(n_images).collect();
    let single = pseudo_quality(Labeler::Single(pair.primary()), &samples, &dataset.classes, config.tau, config.nms_iou)?;
    let co = match &pair.b {
        Some(b) => Some(pseudo_quality(
            Labeler::Pair(pair.primary(), &b.detector),
            &samples,
            &dataset.classes,
            config.tau,
            config.nms_iou,
        )?),
        None => None,
    };
    Ok(PseudoQualityRecord {
        step,
        tau: config.tau,
        n_images: samples.len(),
        single_ap50: single.ap50,
        single_map: single.map_5095,
        corectify_ap50: co.as_ref().map(|r| r.ap50),
        corectify_map: co.as_ref().map(|r| r.map_5095),
    })
}

/// File layout of a training run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn pseudo_quality(&self) -> PathBuf {
        self.root.join("pseudo_quality.jsonl")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint_at(&self, step: usize) -> PathBuf {
        self.checkpoints().join(format!("step_{step:08}.ckpt"))
    }

    pub fn last_good(&self) -> PathBuf {
        self.checkpoints().join("last_good.ckpt")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    /// Most advanced `step_*.ckpt`, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<(usize, PathBuf)>> {
        let dir = self.checkpoints();
        if !dir.exists() {
            return Ok(None);
        }
        let mut best: Option<(usize, PathBuf)> = None;
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(step) = name.strip_prefix("step_").and_then(|n| n.strip_suffix(".ckpt")).and_then(|n| n.parse().ok()) else {
                continue;
            };
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
        Ok(best)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the latest checkpoint in the run directory.
    pub resume: bool,
    /// Stop (after checkpointing) once this many steps are complete.
    pub stop_after: Option<usize>,
    /// Unlabeled images scored for pseudo-label quality at each checkpoint;
    /// 0 disables `pseudo_quality.jsonl`.
    pub pseudo_quality_images: usize,
}

/// Parse a metrics log, naming the offending line on error.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{} line {}", path.display(), i + 1), e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

fn keep_first_lines(path: &Path, n: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text.lines().take(n).map(|l| format!("{l}\n")).collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn truncate_pseudo_quality(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        let rec: PseudoQualityRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        if rec.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn append_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(value).map_err(|e| Error::Internal(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Train inside a run directory: metrics log, periodic checkpoints plus one
/// at termination, optional pseudo-quality log, and resume. Returns the
/// trainer at its final step.
pub fn run_training<'a>(
    dataset: &'a Dataset,
    split: &DatasetSplit,
    config: &TrainConfig,
    paths: &RunPaths,
    options: &RunOptions,
) -> Result<Trainer<'a>> {
    fs::create_dir_all(paths.checkpoints()).map_err(|e| Error::io(paths.checkpoints(), e))?;
    let mut trainer = match paths.latest_checkpoint()? {
        Some((_, path)) if options.resume => {
            let ck = Checkpoint::load(&path)?;
            let t = Trainer::resume(dataset, split, config, &ck)?;
            keep_first_lines(&paths.metrics(), t.step())?;
            truncate_pseudo_quality(&paths.pseudo_quality(), t.step())?;
            t
        }
        _ => {
            for p in [paths.metrics(), paths.pseudo_quality()] {
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
            Trainer::new(dataset, split, config)?
        }
    };
    let stop = options.stop_after.unwrap_or(usize::MAX).min(trainer.config().total_steps);
    let metrics_path = paths.metrics();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let save = |t: &Trainer<'_>| -> Result<()> {
        t.checkpoint().save(&paths.checkpoint_at(t.step()))?;
        if options.pseudo_quality_images > 0 {
            let rec = measure_pseudo_quality(t.pair(), dataset, t.config(), t.step(), options.pseudo_quality_images)?;
            append_json(&paths.pseudo_quality(), &rec)?;
        }
        Ok(())
    };
    while trainer.step() < stop {
        match trainer.advance() {
            Ok(rec) => {
                let line = serde_json::to_string(&rec).map_err(|e| Error::Internal(e.to_string()))?;
                writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            }
            Err(e @ Error::NonFinite { .. }) => {
                metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
                trainer.checkpoint().save(&paths.last_good())?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        if trainer.step() % trainer.config().checkpoint_every == 0 || trainer.step() == stop {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            save(&trainer)?;
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda, c.lambda_u, c.tau, c.alpha_m), (1.0, 1.0, 0.9, 1.0));
        assert_eq!((c.lr0, c.momentum, c.weight_decay), (0.01, 0.9, 1e-4));
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.half_batch(), 8);
        assert_eq!(c.decay(), [12_000, 16_500]);
        c.validate().unwrap();
    }

    #[test]
    fn lr_schedule() {
        let full = TrainConfig {
            total_steps: 180_000,
            ..TrainConfig::default()
        };
        assert_eq!(full.decay(), [120_000, 165_000]);
        assert_eq!(lr_at(100_000, &full), 0.01);
        assert_eq!(lr_at(130_000, &full), 0.001);
        assert_eq!(lr_at(170_000, &full), 0.0001);
        assert_eq!(lr_at(0, &full), 0.01);
        let desk = TrainConfig::default();
        assert_eq!(lr_at(11_999, &desk), 0.01);
        assert_eq!(lr_at(12_000, &desk), 0.001);
        assert_eq!(lr_at(16_500, &desk), 0.0001);
    }

    #[test]
    fn flat_config_round_trip() {
        let mut c = TrainConfig::default();
        c.apply_text("# comment\nmode = instant-star\ntau=0.7\n\ntotal_steps = 300 # trailing\ncontrast = 0.5,1.5\n")
            .unwrap();
        assert_eq!(c.mode, TrainMode::InstantStar);
        assert_eq!(c.tau, 0.7);
        assert_eq!(c.decay(), [200, 275]);
        assert_eq!(c.augment.contrast, (0.5, 1.5));
        let mut back = TrainConfig::default();
        back.apply_text(&c.to_flat()).unwrap();
        assert_eq!(back, c.resolved());
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = TrainConfig::default().set("learning_rate", "0.1").unwrap_err().to_string();
        assert!(err.contains("learning_rate"));
        assert!(err.contains("lambda_u"));
        let err = TrainConfig::default().apply_text("tau 0.5").unwrap_err().to_string();
        assert!(err.contains("line 1"));
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            TrainConfig { batch_size: 15, ..TrainConfig::default() },
            TrainConfig { decay_points: Some([10, 5]), ..TrainConfig::default() },
            TrainConfig { decay_points: Some([10, 18_000]), ..TrainConfig::default() },
            TrainConfig { tau: 1.0, ..TrainConfig::default() },
            TrainConfig { lambda_u: -1.0, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn sgd_rule() {
        let arch = ArchConfig {
            channels: vec![2],
            strides: vec![1],
            ..ArchConfig::default()
        };
        let mut m = ModelState::new(DetectorState::init(&arch, 1).unwrap());
        m.detector.params[0] = 0.5;
        m.velocity[0] = 0.25;
        let mut g = vec![0.0; m.velocity.len()];
        g[0] = 1.0;
        let (p, v) = sgd_update(&m, &g, 0.1, 0.9, 0.01);
        let ev = 0.9 * 0.25 + 1.0 + 0.01 * 0.5;
        assert_eq!(v[0], ev as f32 as f64);
        assert_eq!(p[0], (0.5 - 0.1 * (ev as f32 as f64)) as f32 as f64);
    }

    #[test]
    fn star_mode_uses_distinct_seeds() {
        let c = TrainConfig {
            mode: TrainMode::InstantStar,
            seed: 4,
            ..TrainConfig::default()
        };
        assert_eq!(c.model_seeds(), vec![4, 1004]);
        let pair = ModelPair::init(&c).unwrap();
        assert_ne!(pair.a.detector.params, pair.b.unwrap().detector.params);
    }
}
