//! Weak (flip) and strong (color jitter, cutout, Mixup, Mosaic) augmentation
//! pipelines. All transforms keep annotations in the same frame as pixels.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::boxgeom::BBox;
use crate::error::{Error, Result};
use crate::sample::{Annotation, AnnotationSet, AnnotationSource, ImageSample};

/// Boxes smaller than this after a Mosaic resize are dropped (px²).
pub const MOSAIC_MIN_AREA: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MixKind {
    None,
    Mixup,
    MosaicH,
    MosaicV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub flipped: bool,
    /// (brightness shift, contrast factor)
    pub jitter_params: (f64, f64),
    pub cutout_rect: Option<BBox>,
    pub mix_kind: MixKind,
    pub lambda_m: Option<f64>,
    pub partner_id: Option<String>,
}

impl AugmentationRecord {
    pub fn identity() -> Self {
        AugmentationRecord {
            flipped: false,
            jitter_params: (0.0, 1.0),
            cutout_rect: None,
            mix_kind: MixKind::None,
            lambda_m: None,
            partner_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Beta(alpha_m, alpha_m) parameter for the Mixup coefficient.
    pub alpha_m: f64,
    /// Additive brightness shift range.
    pub brightness: (f64, f64),
    /// Contrast factor range (scaling around the per-channel mean).
    pub contrast: (f64, f64),
    /// Cutout side length as a fraction of the image side.
    pub cutout_frac: (f64, f64),
    pub p_cutout: f64,
    pub p_none: f64,
    pub p_mixup: f64,
    pub p_mosaic: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            alpha_m: 1.0,
            brightness: (-0.2, 0.2),
            contrast: (0.6, 1.4),
            cutout_frac: (0.1, 0.3),
            p_cutout: 1.0,
            p_none: 1.0 / 3.0,
            p_mixup: 1.0 / 3.0,
            p_mosaic: 1.0 / 3.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_m > 0.0 && self.alpha_m.is_finite()) {
            return Err(Error::config(format!("alpha_m {} must be > 0", self.alpha_m)));
        }
        let ranges = [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("cutout_frac", self.cutout_frac),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::config(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.cutout_frac.0 < 0.0 || self.cutout_frac.1 > 1.0 || self.contrast.0 < 0.0 {
            return Err(Error::config("cutout_frac must lie in [0, 1] and contrast must be >= 0"));
        }
        for (name, p) in [
            ("p_cutout", self.p_cutout),
            ("p_none", self.p_none),
            ("p_mixup", self.p_mixup),
            ("p_mosaic", self.p_mosaic),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} must lie in [0, 1]")));
            }
        }
        if self.p_none + self.p_mixup + self.p_mosaic <= 0.0 {
            return Err(Error::config("mix branch probabilities must not all be zero"));
        }
        Ok(())
    }
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn map_annotations(sample: &ImageSample, f: impl Fn(&Annotation) -> Option<Annotation>) -> Option<AnnotationSet> {
    sample
        .annotations
        .as_ref()
        .map(|set| AnnotationSet::new(set.items.iter().filter_map(f).collect(), set.source))
}

/// Horizontal flip of pixels and boxes.
pub fn hflip_sample(sample: &ImageSample) -> ImageSample {
    let w = sample.width() as f64;
    ImageSample {
        id: sample.id.clone(),
        image: sample.image.hflip(),
        annotations: map_annotations(sample, |a| Some(Annotation { bbox: a.bbox.hflip(w), ..*a })),
    }
}

/// Weak view: horizontal flip with probability 1/2.
pub fn weak_augment(sample: &ImageSample, rng: &mut impl Rng) -> (ImageSample, AugmentationRecord) {
    let flipped = rng.random_bool(0.5);
    let out = if flipped { hflip_sample(sample) } else { sample.clone() };
    (
        out,
        AugmentationRecord {
            flipped,
            ..AugmentationRecord::identity()
        },
    )
}

/// Photometric jitter plus one mean-filled cutout rectangle. Annotations are
/// left untouched even where the cutout hides an object.
pub fn color_cutout(
    sample: &ImageSample,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> (ImageSample, (f64, f64), Option<BBox>) {
    let brightness = sample_range(rng, config.brightness);
    let contrast = sample_range(rng, config.contrast);
    let cut = rng.random_bool(config.p_cutout);
    let cut_w = sample_range(rng, config.cutout_frac);
    let cut_h = sample_range(rng, config.cutout_frac);
    let fx: f64 = rng.random();
    let fy: f64 = rng.random();

    let mut image = sample.image.clone();
    let means = image.channel_means();
    image.map_clipped(|c, v| ((v - means[c]) as f64 * contrast + means[c] as f64 + brightness) as f32);

    let (w, h) = (image.width(), image.height());
    let mut rect = None;
    if cut {
        let cw = ((cut_w * w as f64).round() as usize).min(w);
        let ch = ((cut_h * h as f64).round() as usize).min(h);
        if cw > 0 && ch > 0 {
            let x0 = ((w - cw) as f64 * fx).floor() as usize;
            let y0 = ((h - ch) as f64 * fy).floor() as usize;
            let fill = image.channel_means();
            for (c, &m) in fill.iter().enumerate() {
                for y in y0..y0 + ch {
                    for x in x0..x0 + cw {
                        image.set(c, y, x, m);
                    }
                }
            }
            rect = BBox::new(x0 as f64, y0 as f64, (x0 + cw) as f64, (y0 + ch) as f64).ok();
        }
    }
    (
        ImageSample {
            id: sample.id.clone(),
            image,
            annotations: sample.annotations.clone(),
        },
        (brightness, contrast),
        rect,
    )
}

/// Resize a sample (pixels and boxes) to `width x height`.
pub fn resize_sample(sample: &ImageSample, width: usize, height: usize) -> Result<ImageSample> {
    let sx = width as f64 / sample.width() as f64;
    let sy = height as f64 / sample.height() as f64;
    Ok(ImageSample {
        id: sample.id.clone(),
        image: sample.image.resize(width, height)?,
        annotations: map_annotations(sample, |a| {
            a.bbox.scale(sx, sy).clip(width as f64, height as f64).map(|bbox| Annotation { bbox, ..*a })
        }),
    })
}

/// Mixup with a fixed coefficient: pixels blend as `lambda*u + (1-lambda)*l`,
/// boxes are the union, pseudo weights scale by `lambda` and labeled
/// weights by `1 - lambda`.
pub fn mixup_with(unlabeled: &ImageSample, labeled: &ImageSample, lambda_m: f64) -> Result<ImageSample> {
    if !(0.0..=1.0).contains(&lambda_m) {
        return Err(Error::config(format!("mixing coefficient {lambda_m} outside [0, 1]")));
    }
    let partner = resize_sample(labeled, unlabeled.width(), unlabeled.height())?;
    if partner.image.data().len() != unlabeled.image.data().len() {
        return Err(Error::Internal("mixup partner size mismatch after resize".into()));
    }
    let mut image = unlabeled.image.clone();
    let other = partner.image.data();
    let mut k = 0;
    image.map_clipped(|_, v| {
        let out = (lambda_m * v as f64 + (1.0 - lambda_m) * other[k] as f64) as f32;
        k += 1;
        out
    });
    let mut items: Vec<Annotation> = unlabeled
        .annotation_items()
        .iter()
        .map(|a| Annotation {
            weight: a.weight * lambda_m,
            ..*a
        })
        .collect();
    items.extend(partner.annotation_items().iter().map(|a| Annotation {
        weight: a.weight * (1.0 - lambda_m),
        ..*a
    }));
    Ok(ImageSample {
        id: unlabeled.id.clone(),
        image,
        annotations: Some(AnnotationSet::new(items, AnnotationSource::Mixed)),
    })
}

pub fn sample_lambda(alpha_m: f64, rng: &mut impl Rng) -> Result<f64> {
    let beta = Beta::new(alpha_m, alpha_m).map_err(|e| Error::config(format!("Beta({alpha_m}): {e}")))?;
    Ok(beta.sample(rng))
}

pub fn mixup(
    unlabeled: &ImageSample,
    labeled: &ImageSample,
    alpha_m: f64,
    rng: &mut impl Rng,
) -> Result<(ImageSample, f64)> {
    let lambda_m = sample_lambda(alpha_m, rng)?;
    Ok((mixup_with(unlabeled, labeled, lambda_m)?, lambda_m))
}

/// Tile the unlabeled image (left/top) and the labeled image (right/bottom)
/// onto a canvas of the unlabeled image's size.
pub fn mosaic(unlabeled: &ImageSample, labeled: &ImageSample, kind: MixKind) -> Result<ImageSample> {
    let (w, h) = (unlabeled.width(), unlabeled.height());
    let (first_size, second_size, offset) = match kind {
        MixKind::MosaicH => ((w / 2, h), (w - w / 2, h), (w / 2, 0)),
        MixKind::MosaicV => ((w, h / 2), (w, h - h / 2), (0, h / 2)),
        _ => return Err(Error::config("mosaic requires MOSAIC_H or MOSAIC_V")),
    };
    let first = resize_sample(unlabeled, first_size.0, first_size.1)?;
    let second = resize_sample(labeled, second_size.0, second_size.1)?;
    let mut image = unlabeled.image.clone();
    image.blit(&first.image, 0, 0)?;
    image.blit(&second.image, offset.0, offset.1)?;

    let keep = |a: &Annotation, dx: f64, dy: f64| -> Option<Annotation> {
        let bbox = a.bbox.translate(dx, dy);
        (bbox.area() >= MOSAIC_MIN_AREA).then_some(Annotation { bbox, ..*a })
    };
    let mut items: Vec<Annotation> = first.annotation_items().iter().filter_map(|a| keep(a, 0.0, 0.0)).collect();
    items.extend(
        second
            .annotation_items()
            .iter()
            .filter_map(|a| keep(a, offset.0 as f64, offset.1 as f64)),
    );
    Ok(ImageSample {
        id: unlabeled.id.clone(),
        image,
        annotations: Some(AnnotationSet::new(items, AnnotationSource::Mixed)),
    })
}

/// Strong view of an unlabeled sample that already carries pseudo boxes:
/// color jitter + cutout, then one of {nothing, Mixup, Mosaic} with the
/// labeled partner.
pub fn strong_augment(
    unlabeled: &ImageSample,
    partner: &ImageSample,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(ImageSample, AugmentationRecord)> {
    let (jittered, jitter_params, cutout_rect) = color_cutout(unlabeled, config, rng);
    mix_stage(&jittered, jitter_params, cutout_rect, partner, config, rng)
}

/// Second half of [`strong_augment`]: pick and apply the mix branch to an
/// already jittered view. Splitting the two lets a caller look at the
/// jittered image (for instance to label it) before mixing.
pub fn mix_stage(
    jittered: &ImageSample,
    jitter_params: (f64, f64),
    cutout_rect: Option<BBox>,
    partner: &ImageSample,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(ImageSample, AugmentationRecord)> {
    let total = config.p_none + config.p_mixup + config.p_mosaic;
    let pick = rng.random::<f64>() * total;
    let mut record = AugmentationRecord {
        flipped: false,
        jitter_params,
        cutout_rect,
        mix_kind: MixKind::None,
        lambda_m: None,
        partner_id: None,
    };
    let out = if pick < config.p_none {
        jittered.clone()
    } else if pick < config.p_none + config.p_mixup {
        let (mixed, lambda_m) = mixup(jittered, partner, config.alpha_m, rng)?;
        record.mix_kind = MixKind::Mixup;
        record.lambda_m = Some(lambda_m);
        record.partner_id = Some(partner.id.clone());
        mixed
    } else {
        let kind = if rng.random_bool(0.5) { MixKind::MosaicH } else { MixKind::MosaicV };
        record.mix_kind = kind;
        record.partner_id = Some(partner.id.clone());
        mosaic(jittered, partner, kind)?
    };
    Ok((out, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::sample::Image;

    fn solid(id: &str, size: usize, v: f32, boxes: &[([f64; 4], f64, AnnotationSource)]) -> ImageSample {
        let items = boxes
            .iter()
            .map(|(b, conf, _)| Annotation {
                bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
                class: 0,
                weight: 1.0,
                confidence: *conf,
            })
            .collect();
        let source = boxes.first().map(|b| b.2).unwrap_or(AnnotationSource::Pseudo);
        ImageSample {
            id: id.into(),
            image: Image::filled(size, size, v).unwrap(),
            annotations: Some(AnnotationSet::new(items, source)),
        }
    }

    /// An rng whose first `random_bool(0.5)` returns the requested value.
    fn rng_with_flip(flip: bool) -> crate::rng::StreamRng {
        (0..)
            .map(|k| stream(&[99, k]))
            .find(|r| r.clone().random_bool(0.5) == flip)
            .unwrap()
    }

    #[test]
    fn weak_branches() {
        let s = solid("a", 100, 0.3, &[([10.0, 20.0, 30.0, 40.0], 1.0, AnnotationSource::Human)]);
        let (same, rec) = weak_augment(&s, &mut rng_with_flip(false));
        assert!(!rec.flipped);
        assert_eq!(same, s);
        let (flipped, rec) = weak_augment(&s, &mut rng_with_flip(true));
        assert!(rec.flipped);
        assert_eq!(flipped.annotation_items()[0].bbox.to_array(), [70.0, 20.0, 90.0, 40.0]);
        assert_eq!(hflip_sample(&flipped), s);
    }

    #[test]
    fn identity_color_cutout() {
        let s = solid("a", 64, 0.4, &[]);
        let cfg = AugmentConfig {
            brightness: (0.0, 0.0),
            contrast: (1.0, 1.0),
            p_cutout: 0.0,
            ..AugmentConfig::default()
        };
        let (out, params, rect) = color_cutout(&s, &cfg, &mut stream(&[1]));
        assert_eq!(out, s);
        assert_eq!(params, (0.0, 1.0));
        assert!(rect.is_none());
    }

    #[test]
    fn brightness_clips_at_one() {
        let s = solid("a", 64, 0.95, &[]);
        let cfg = AugmentConfig {
            brightness: (0.1, 0.1),
            contrast: (1.0, 1.0),
            p_cutout: 0.0,
            ..AugmentConfig::default()
        };
        let (out, _, _) = color_cutout(&s, &cfg, &mut stream(&[1]));
        assert!(out.image.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cutout_area_bounded() {
        let s = solid("a", 64, 0.5, &[]);
        let cfg = AugmentConfig::default();
        let max_frac = cfg.cutout_frac.1 * cfg.cutout_frac.1;
        let mut rng = stream(&[5]);
        for _ in 0..1000 {
            let (_, _, rect) = color_cutout(&s, &cfg, &mut rng);
            let r = rect.unwrap();
            assert!(r.within(64.0, 64.0));
            // rounding of each side to whole pixels adds at most half a pixel per side
            let bound = (cfg.cutout_frac.1 * 64.0 + 0.5).powi(2) / (64.0 * 64.0);
            assert!(r.area() / 4096.0 <= bound.max(max_frac));
        }
    }

    #[test]
    fn mixup_arithmetic() {
        let u = solid("u", 64, 0.2, &[([0.0, 0.0, 10.0, 10.0], 0.95, AnnotationSource::Pseudo); 2]);
        let l = solid("l", 64, 0.8, &[([5.0, 5.0, 20.0, 20.0], 1.0, AnnotationSource::Human); 3]);
        let m = mixup_with(&u, &l, 0.5).unwrap();
        assert!(m.image.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let lam = 0.3;
        let m = mixup_with(&u, &l, lam).unwrap();
        let ann = m.annotations.as_ref().unwrap();
        assert_eq!(ann.len(), 5);
        assert_eq!(ann.source, AnnotationSource::Mixed);
        assert!((ann.total_weight() - (2.0 * lam + 3.0 * (1.0 - lam))).abs() < 1e-12);

        let edge = mixup_with(&u, &l, 1.0).unwrap();
        assert_eq!(edge.image, u.image);
        let w: Vec<f64> = edge.annotation_items().iter().map(|a| a.weight).collect();
        assert_eq!(w, vec![1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mosaic_box_arithmetic() {
        let u = solid("u", 128, 0.2, &[([20.0, 20.0, 60.0, 60.0], 0.95, AnnotationSource::Pseudo)]);
        let l = solid("l", 128, 0.8, &[([20.0, 20.0, 60.0, 60.0], 1.0, AnnotationSource::Human)]);
        let m = mosaic(&u, &l, MixKind::MosaicH).unwrap();
        let boxes: Vec<[f64; 4]> = m.annotation_items().iter().map(|a| a.bbox.to_array()).collect();
        assert_eq!(boxes, vec![[10.0, 20.0, 30.0, 60.0], [74.0, 20.0, 94.0, 60.0]]);
        assert_eq!(m.image.get(0, 5, 10), 0.2);
        assert_eq!(m.image.get(0, 5, 100), 0.8);

        let v = mosaic(&u, &l, MixKind::MosaicV).unwrap();
        let boxes: Vec<[f64; 4]> = v.annotation_items().iter().map(|a| a.bbox.to_array()).collect();
        assert_eq!(boxes, vec![[20.0, 10.0, 60.0, 30.0], [20.0, 74.0, 60.0, 94.0]]);
    }

    #[test]
    fn mosaic_drops_tiny_boxes() {
        let u = solid("u", 64, 0.2, &[([0.0, 0.0, 6.0, 5.0], 0.95, AnnotationSource::Pseudo)]);
        let l = solid("l", 64, 0.8, &[([0.0, 0.0, 30.0, 30.0], 1.0, AnnotationSource::Human)]);
        let m = mosaic(&u, &l, MixKind::MosaicH).unwrap();
        assert_eq!(m.annotation_items().len(), 1);
    }

    #[test]
    fn strong_no_mix_branch_and_purity() {
        let u = solid("u", 64, 0.2, &[([0.0, 0.0, 10.0, 10.0], 0.95, AnnotationSource::Pseudo)]);
        let l = solid("l", 64, 0.8, &[([5.0, 5.0, 20.0, 20.0], 1.0, AnnotationSource::Human)]);
        let l_before = l.clone();
        let cfg = AugmentConfig {
            p_none: 1.0,
            p_mixup: 0.0,
            p_mosaic: 0.0,
            ..AugmentConfig::default()
        };
        let (out, rec) = strong_augment(&u, &l, &cfg, &mut stream(&[3])).unwrap();
        let (expect, _, _) = color_cutout(&u, &cfg, &mut stream(&[3]));
        assert_eq!(out, expect);
        assert_eq!(rec.mix_kind, MixKind::None);
        assert_eq!(l, l_before);

        let full = AugmentConfig::default();
        let a = strong_augment(&u, &l, &full, &mut stream(&[4])).unwrap();
        let b = strong_augment(&u, &l, &full, &mut stream(&[4])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn beta_one_is_uniform() {
        let mut rng = stream(&[11]);
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_lambda(1.0, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
        assert!(draws.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig { alpha_m: 0.0, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { p_mixup: 1.5, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { brightness: (0.2, 0.1), ..Default::default() }.validate().is_err());
    }
}
