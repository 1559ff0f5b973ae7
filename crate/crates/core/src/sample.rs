//! Image buffers and annotated samples.

use serde::{Deserialize, Serialize};

use crate::boxgeom::BBox;
use crate::error::{Error, Result};

/// RGB image stored channel-planar (`[c][y][x]`) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::config(format!("image size {width}x{height} must be positive")));
        }
        Ok(Image {
            width,
            height,
            data: vec![value; Self::CHANNELS * width * height],
        })
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != Self::CHANNELS * width * height {
            return Err(Error::Shape(format!(
                "planar buffer of {} values does not match {width}x{height}x3",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("pixel values must lie in [0, 1]"));
        }
        Ok(Image { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let (w, h) = (self.width, self.height);
        self.data[(c * h + y) * w + x] = v;
    }

    /// Apply `f` to every value and clip the result to `[0, 1]`.
    pub fn map_clipped(&mut self, mut f: impl FnMut(usize, f32) -> f32) {
        let n = self.width * self.height;
        for (i, v) in self.data.iter_mut().enumerate() {
            *v = f(i / n, *v).clamp(0.0, 1.0);
        }
    }

    pub fn channel_means(&self) -> [f32; 3] {
        let n = (self.width * self.height) as f64;
        let mut out = [0.0f32; 3];
        for (c, m) in out.iter_mut().enumerate() {
            *m = (self.plane(c).iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        }
        out
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for c in 0..Self::CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Result<Image> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let mut out = Image::filled(width, height, 0.0)?;
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let sample = |len: usize, pos: f64| -> (usize, usize, f32) {
            let p = (pos - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, (p - i0 as f64) as f32)
        };
        for y in 0..height {
            let (y0, y1, fy) = sample(self.height, (y as f64 + 0.5) * sy);
            for x in 0..width {
                let (x0, x1, fx) = sample(self.width, (x as f64 + 0.5) * sx);
                for c in 0..Self::CHANNELS {
                    let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
                    let bot = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
                    out.set(c, y, x, (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
                }
            }
        }
        Ok(out)
    }

    /// Copy `src` into this image with its top-left corner at `(x0, y0)`.
    pub fn blit(&mut self, src: &Image, x0: usize, y0: usize) -> Result<()> {
        if x0 + src.width > self.width || y0 + src.height > self.height {
            return Err(Error::Shape("blit source exceeds destination".into()));
        }
        for c in 0..Self::CHANNELS {
            for y in 0..src.height {
                for x in 0..src.width {
                    self.set(c, y0 + y, x0 + x, src.get(c, y, x));
                }
            }
        }
        Ok(())
    }

    /// Round every value to the nearest multiple of 1/255.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (*v * 255.0).round() / 255.0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnnotationSource {
    Human,
    Pseudo,
    Mixed,
}

/// One annotated instance.
///
/// Soft labels are a scalar `weight` on a hard foreground class, so the
/// class-weight vector of length `C + 1` is `weight * onehot(class + 1)`.
/// `confidence` is the labeler's max foreground probability at the time
/// the label was produced (1 for human labels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    /// Foreground class index, `0..C`.
    pub class: usize,
    pub weight: f64,
    pub confidence: f64,
}

impl Annotation {
    pub fn human(bbox: BBox, class: usize) -> Self {
        Annotation {
            bbox,
            class,
            weight: 1.0,
            confidence: 1.0,
        }
    }

    /// Class-weight vector over `[background, class_0, .., class_{C-1}]`.
    pub fn class_weights(&self, num_classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_classes + 1];
        v[self.class + 1] = self.weight;
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub items: Vec<Annotation>,
    pub source: AnnotationSource,
}

impl AnnotationSet {
    pub fn new(items: Vec<Annotation>, source: AnnotationSource) -> Self {
        AnnotationSet { items, source }
    }

    pub fn empty(source: AnnotationSource) -> Self {
        AnnotationSet { items: Vec::new(), source }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn boxes(&self) -> impl Iterator<Item = &BBox> {
        self.items.iter().map(|a| &a.bbox)
    }

    pub fn total_weight(&self) -> f64 {
        self.items.iter().map(|a| a.weight).sum()
    }

    /// Checks the structural invariants against an image of the given size.
    pub fn validate(&self, width: usize, height: usize, num_classes: usize) -> Result<()> {
        for (i, a) in self.items.iter().enumerate() {
            if !a.bbox.within(width as f64, height as f64) {
                return Err(Error::Degenerate(format!("box {i} lies outside the image")));
            }
            if a.class >= num_classes {
                return Err(Error::Degenerate(format!("box {i} has class {} >= {num_classes}", a.class)));
            }
            if !(0.0..=1.0).contains(&a.weight) {
                return Err(Error::Degenerate(format!("box {i} has weight {}", a.weight)));
            }
            if self.source == AnnotationSource::Human && a.weight != 1.0 {
                return Err(Error::Degenerate(format!("human box {i} is not one-hot")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Image,
    pub annotations: Option<AnnotationSet>,
}

impl ImageSample {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn annotation_items(&self) -> &[Annotation] {
        self.annotations.as_ref().map(|a| a.items.as_slice()).unwrap_or(&[])
    }

    /// Same image, annotations removed.
    pub fn without_annotations(&self) -> ImageSample {
        ImageSample {
            id: self.id.clone(),
            image: self.image.clone(),
            annotations: None,
        }
    }
}
