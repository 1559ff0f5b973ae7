//! Procedural shapes dataset standing in for a labeled/unlabeled detection
//! corpus, plus the on-disk format (`images/<id>.png` + `annotations.json`).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufReader, Cursor};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxgeom::BBox;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::sample::{Annotation, AnnotationSet, AnnotationSource, Image, ImageSample};

pub const SHAPE_NAMES: [&str; 8] = [
    "ellipse",
    "rectangle",
    "triangle",
    "diamond",
    "cross",
    "ring",
    "inverted_triangle",
    "hourglass",
];

/// Smallest accepted side of a generated ground-truth box, in pixels.
pub const MIN_BOX_SIDE: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub classes: usize,
    pub max_shapes: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 7,
            count: 2000,
            image_size: 64,
            classes: 3,
            max_shapes: 4,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("count must be > 0"));
        }
        if self.image_size < 64 {
            return Err(Error::config(format!("image_size {} must be >= 64", self.image_size)));
        }
        if !(1..=SHAPE_NAMES.len()).contains(&self.classes) {
            return Err(Error::config(format!("classes {} must be in 1..=8", self.classes)));
        }
        if self.max_shapes == 0 {
            return Err(Error::config("max_shapes must be >= 1"));
        }
        Ok(())
    }

    fn size_range(&self) -> (usize, usize) {
        let lo = 12;
        let hi = ((self.image_size as f64) * 0.44).round() as usize;
        (lo, hi.max(lo))
    }
}

pub fn class_names(classes: usize) -> Vec<String> {
    SHAPE_NAMES[..classes].iter().map(|s| s.to_string()).collect()
}

/// Whether normalized coordinates `(u, v)` in `[-1, 1]^2` fall inside shape `kind`.
fn inside(kind: usize, u: f64, v: f64) -> bool {
    match kind {
        0 => u * u + v * v <= 1.0,
        1 => true,
        2 => u.abs() <= (v + 1.0) / 2.0,
        3 => u.abs() + v.abs() <= 1.0,
        4 => u.abs() <= 0.35 || v.abs() <= 0.35,
        5 => {
            let r2 = u * u + v * v;
            (0.3..=1.0).contains(&r2)
        }
        6 => u.abs() <= (1.0 - v) / 2.0,
        7 => u.abs() <= v.abs() + 0.1,
        _ => false,
    }
}

fn background(rng: &mut impl Rng, size: usize) -> Vec<f32> {
    let cells = size / 8 + 2;
    let mut data = vec![0.0f32; 3 * size * size];
    for c in 0..3 {
        let base: f64 = rng.random_range(0.25..0.75);
        let grid: Vec<f64> = (0..cells * cells).map(|_| rng.random_range(-0.15..0.15)).collect();
        for y in 0..size {
            let gy = y as f64 / 8.0;
            let (y0, fy) = (gy.floor() as usize, gy.fract());
            for x in 0..size {
                let gx = x as f64 / 8.0;
                let (x0, fx) = (gx.floor() as usize, gx.fract());
                let g = |yy: usize, xx: usize| grid[yy * cells + xx];
                let smooth = g(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + g(y0, x0 + 1) * fx * (1.0 - fy)
                    + g(y0 + 1, x0) * (1.0 - fx) * fy
                    + g(y0 + 1, x0 + 1) * fx * fy;
                let fine: f64 = rng.random_range(-0.04..0.04);
                data[(c * size + y) * size + x] = (base + smooth + fine).clamp(0.0, 1.0) as f32;
            }
        }
    }
    data
}

fn generate_one(config: &GenConfig, index: usize) -> ImageSample {
    let size = config.image_size;
    let mut rng = rng::stream(&[config.seed, Purpose::Generate as u64, index as u64]);
    let mut data = background(&mut rng, size);
    let mut means = [0.0f64; 3];
    for (c, m) in means.iter_mut().enumerate() {
        *m = data[c * size * size..(c + 1) * size * size].iter().map(|&v| v as f64).sum::<f64>()
            / (size * size) as f64;
    }

    let (lo, hi) = config.size_range();
    let wanted = rng.random_range(1..=config.max_shapes);
    let mut placed: Vec<BBox> = Vec::new();
    let mut items: Vec<Annotation> = Vec::new();
    let mut attempts = 0;
    while items.len() < wanted && attempts < 40 {
        attempts += 1;
        let class = rng.random_range(0..config.classes);
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        let x0 = rng.random_range(0..=size - w);
        let y0 = rng.random_range(0..=size - h);
        let frame = BBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64)
            .expect("positive extent");
        let padded = BBox::new(frame.x1 - 2.0, frame.y1 - 2.0, frame.x2 + 2.0, frame.y2 + 2.0)
            .expect("positive extent");
        if placed.iter().any(|p| p.intersection(&padded) > 0.0) {
            continue;
        }
        let mut color = [0.0f64; 3];
        for _ in 0..20 {
            for ch in color.iter_mut() {
                *ch = rng.random_range(0.0..1.0);
            }
            let dist: f64 = color.iter().zip(means).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dist >= 0.35 {
                break;
            }
        }

        let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0, 0);
        for py in y0..y0 + h {
            let v = ((py - y0) as f64 + 0.5) / h as f64 * 2.0 - 1.0;
            for px in x0..x0 + w {
                let u = ((px - x0) as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                if !inside(class, u, v) {
                    continue;
                }
                for (c, &col) in color.iter().enumerate() {
                    let jitter: f64 = rng.random_range(-0.03..0.03);
                    data[(c * size + py) * size + px] = (col + jitter).clamp(0.0, 1.0) as f32;
                }
                min_x = min_x.min(px);
                min_y = min_y.min(py);
                max_x = max_x.max(px);
                max_y = max_y.max(py);
            }
        }
        let bbox = BBox::new(min_x as f64, min_y as f64, (max_x + 1) as f64, (max_y + 1) as f64)
            .expect("shape covers at least one pixel");
        debug_assert!(bbox.width() >= MIN_BOX_SIDE && bbox.height() >= MIN_BOX_SIDE);
        placed.push(frame);
        items.push(Annotation::human(bbox, class));
    }

    let mut image = Image::from_planar(size, size, data).expect("generated pixels are in range");
    image.quantize_u8();
    ImageSample {
        id: format!("img_{index:05}"),
        image,
        annotations: Some(AnnotationSet::new(items, AnnotationSource::Human)),
    }
}

pub fn generate_dataset(config: &GenConfig) -> Result<Vec<ImageSample>> {
    config.validate()?;
    Ok((0..config.count).map(|i| generate_one(config, i)).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSplit {
    pub labeled_ids: BTreeSet<String>,
    pub unlabeled_ids: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn n_l(&self) -> usize {
        self.labeled_ids.len()
    }

    pub fn n_u(&self) -> usize {
        self.unlabeled_ids.len()
    }
}

pub fn split_dataset(samples: &[ImageSample], labeled_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::config(format!(
            "labeled fraction {labeled_fraction} must be in (0, 1]"
        )));
    }
    let n_l = (labeled_fraction * samples.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::stream(&[seed, Purpose::Split as u64]));
    let mut split = DatasetSplit::default();
    for (rank, &i) in order.iter().enumerate() {
        let id = samples[i].id.clone();
        if rank < n_l {
            split.labeled_ids.insert(id);
        } else {
            split.unlabeled_ids.insert(id);
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<ImageSample>,
    pub split: DatasetSplit,
}

/// Unlabeled pool entry as seen by training: the image, never its labels.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledImage<'a> {
    pub id: &'a str,
    pub image: &'a Image,
}

/// The only surface training code gets: labeled samples with annotations
/// and unlabeled images without them.
#[derive(Debug, Clone)]
pub struct TrainingView<'a> {
    pub labeled: Vec<&'a ImageSample>,
    pub unlabeled: Vec<UnlabeledImage<'a>>,
    pub num_classes: usize,
}

/// Explicit gate around the withheld annotations of unlabeled images.
/// Used only to measure pseudo-label quality.
#[derive(Debug, Clone)]
pub struct Oracle<'a> {
    by_id: HashMap<&'a str, &'a ImageSample>,
    ids: Vec<&'a str>,
}

impl<'a> Oracle<'a> {
    pub fn annotations(&self, id: &str) -> Option<&'a AnnotationSet> {
        self.by_id.get(id).and_then(|s| s.annotations.as_ref())
    }

    /// Unlabeled samples with their withheld annotations, in dataset order.
    pub fn samples(&self) -> Vec<&'a ImageSample> {
        self.ids.iter().map(|id| self.by_id[id]).collect()
    }
}

impl Dataset {
    pub fn new(classes: Vec<String>, samples: Vec<ImageSample>, split: DatasetSplit) -> Result<Self> {
        let ds = Dataset { classes, samples, split };
        ds.check_split()?;
        Ok(ds)
    }

    pub fn generate(config: &GenConfig, labeled_fraction: f64) -> Result<Self> {
        let samples = generate_dataset(config)?;
        let split = split_dataset(&samples, labeled_fraction, config.seed)?;
        Dataset::new(class_names(config.classes), samples, split)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn check_split(&self) -> Result<()> {
        if self.split.labeled_ids.intersection(&self.split.unlabeled_ids).next().is_some() {
            return Err(Error::config("labeled and unlabeled ids overlap"));
        }
        let ids: BTreeSet<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        if ids.len() != self.samples.len() {
            return Err(Error::config("duplicate sample ids"));
        }
        for id in self.split.labeled_ids.iter().chain(&self.split.unlabeled_ids) {
            if !ids.contains(id.as_str()) {
                return Err(Error::config(format!("split references unknown id {id}")));
            }
        }
        Ok(())
    }

    pub fn training_view(&self, split: &DatasetSplit) -> Result<TrainingView<'_>> {
        let ids: BTreeSet<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        for id in split.labeled_ids.iter().chain(&split.unlabeled_ids) {
            if !ids.contains(id.as_str()) {
                return Err(Error::config(format!("split references unknown id {id}")));
            }
        }
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for s in &self.samples {
            if split.labeled_ids.contains(&s.id) {
                if s.annotations.is_none() {
                    return Err(Error::config(format!("labeled sample {} has no annotations", s.id)));
                }
                labeled.push(s);
            } else if split.unlabeled_ids.contains(&s.id) {
                unlabeled.push(UnlabeledImage {
                    id: &s.id,
                    image: &s.image,
                });
            }
        }
        if labeled.is_empty() {
            return Err(Error::config("split has no labeled samples"));
        }
        Ok(TrainingView {
            labeled,
            unlabeled,
            num_classes: self.num_classes(),
        })
    }

    pub fn oracle(&self) -> Oracle<'_> {
        let mut by_id = HashMap::new();
        let mut ids = Vec::new();
        for s in &self.samples {
            if self.split.unlabeled_ids.contains(&s.id) {
                by_id.insert(s.id.as_str(), s);
                ids.push(s.id.as_str());
            }
        }
        Oracle { by_id, ids }
    }

    pub fn labeled_samples(&self) -> Vec<&ImageSample> {
        self.samples.iter().filter(|s| self.split.labeled_ids.contains(&s.id)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_dataset(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load_dataset(dir)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSample {
    id: String,
    width: usize,
    height: usize,
    boxes: Vec<[String; 4]>,
    labels: Vec<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSplit {
    labeled: Vec<String>,
    unlabeled: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDataset {
    classes: Vec<String>,
    samples: Vec<RawSample>,
    split: RawSplit,
}

fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let (w, h) = (image.width(), image.height());
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                rgb.push((image.get(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Internal(format!("png header: {e}")))?;
        writer
            .write_image_data(&rgb)
            .map_err(|e| Error::Internal(format!("png data: {e}")))?;
        writer.finish().map_err(|e| Error::Internal(format!("png finish: {e}")))?;
    }
    Ok(out)
}

fn decode_png(bytes: &[u8], context: &str) -> Result<Image> {
    let decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    let mut reader = decoder.read_info().map_err(|e| Error::parse(context, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::parse(context, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::parse(context, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::parse(context, "expected 8-bit RGB"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + 3 * w];
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = row[3 * x + c] as f32 / 255.0;
            }
        }
    }
    Image::from_planar(w, h, data)
}

/// Shortest decimal text that parses back to the same `f64`.
fn fmt_coord(v: f64) -> String {
    format!("{v:?}")
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut raw = RawDataset {
        classes: ds.classes.clone(),
        samples: Vec::with_capacity(ds.samples.len()),
        split: RawSplit {
            labeled: ds.split.labeled_ids.iter().cloned().collect(),
            unlabeled: ds.split.unlabeled_ids.iter().cloned().collect(),
        },
    };
    for s in &ds.samples {
        let path = images.join(format!("{}.png", s.id));
        fs::write(&path, encode_png(&s.image)?).map_err(|e| Error::io(&path, e))?;
        let items = s.annotation_items();
        raw.samples.push(RawSample {
            id: s.id.clone(),
            width: s.width(),
            height: s.height(),
            boxes: items.iter().map(|a| a.bbox.to_array().map(fmt_coord)).collect(),
            labels: items.iter().map(|a| a.class as i64).collect(),
        });
    }
    let json = serde_json::to_string_pretty(&raw).map_err(|e| Error::Internal(e.to_string()))?;
    let path = dir.join("annotations.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("annotations.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: RawDataset =
        serde_json::from_str(&text).map_err(|e| Error::parse("annotations.json", e.to_string()))?;
    let num_classes = raw.classes.len();
    let mut samples = Vec::with_capacity(raw.samples.len());
    for (i, rs) in raw.samples.iter().enumerate() {
        let ctx = format!("annotations.json sample {i} (id {})", rs.id);
        if rs.boxes.len() != rs.labels.len() {
            return Err(Error::parse(ctx, "boxes and labels differ in length"));
        }
        let mut items = Vec::with_capacity(rs.boxes.len());
        for (j, (coords, &label)) in rs.boxes.iter().zip(&rs.labels).enumerate() {
            let mut v = [0.0f64; 4];
            for (k, text) in coords.iter().enumerate() {
                v[k] = text.parse::<f64>().map_err(|_| {
                    Error::parse(&ctx, format!("box {j}: invalid decimal coordinate {text:?}"))
                })?;
            }
            let bbox = BBox::new(v[0], v[1], v[2], v[3])
                .map_err(|e| Error::parse(&ctx, format!("box {j}: {e}")))?;
            if label < 0 || label as usize >= num_classes {
                return Err(Error::parse(&ctx, format!("box {j}: label {label} out of range")));
            }
            items.push(Annotation::human(bbox, label as usize));
        }
        let png_path = dir.join("images").join(format!("{}.png", rs.id));
        let bytes = fs::read(&png_path).map_err(|e| Error::io(&png_path, e))?;
        let image = decode_png(&bytes, &format!("images/{}.png", rs.id))?;
        if image.width() != rs.width || image.height() != rs.height {
            return Err(Error::parse(ctx, "image dimensions disagree with annotation record"));
        }
        let set = AnnotationSet::new(items, AnnotationSource::Human);
        set.validate(rs.width, rs.height, num_classes)
            .map_err(|e| Error::parse(&ctx, e.to_string()))?;
        samples.push(ImageSample {
            id: rs.id.clone(),
            image,
            annotations: Some(set),
        });
    }
    let split = DatasetSplit {
        labeled_ids: raw.split.labeled.into_iter().collect(),
        unlabeled_ids: raw.split.unlabeled.into_iter().collect(),
    };
    Dataset::new(raw.classes, samples, split).map_err(|e| Error::parse("annotations.json split", e.to_string()))
}

/// SHA-256 over `annotations.json` and every image file in sample order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let path = dir.join("annotations.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let raw: RawDataset =
        serde_json::from_slice(&text).map_err(|e| Error::parse("annotations.json", e.to_string()))?;
    let mut hasher = Sha256::new();
    hasher.update(&text);
    for s in &raw.samples {
        let p = dir.join("images").join(format!("{}.png", s.id));
        hasher.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex_digest(hasher.finalize().as_slice()))
}

/// Git-style content hash: SHA-256 over `blob <len>\0` followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(format!("blob {}\0", bytes.len()).as_bytes());
    hasher.update(bytes);
    hex_digest(hasher.finalize().as_slice())
}

pub fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
