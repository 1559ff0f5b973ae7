//! Small single-stage anchor detector with hand-written backpropagation.
//!
//! The backbone is a stack of 3x3 convolutions (padding 1) with ReLU; the head
//! is a 1x1 convolution emitting, for each anchor slot of each cell, `C + 1`
//! class logits (index 0 is background) followed by 4 box deltas.
//!
//! Parameters are held as `f64` but every stored value is exactly
//! representable as `f32`, so checkpoints can use 32-bit storage losslessly
//! while gradient arithmetic stays in double precision.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxgeom::{decode_delta, nms_classwise, BBox, BoxDelta};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::sample::Image;

const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Number of foreground classes `C`.
    pub num_classes: usize,
    /// Output channels of each backbone layer.
    pub channels: Vec<usize>,
    /// Stride (1 or 2) of each backbone layer.
    pub strides: Vec<usize>,
    /// Side of the square-equivalent anchor, pixels.
    pub anchor_size: f64,
    /// Anchor aspect ratios as height / width.
    pub aspect_ratios: Vec<f64>,
    /// Standard deviation of the head weights at initialization.
    pub head_init_std: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            num_classes: 3,
            channels: vec![16, 32, 32, 32],
            strides: vec![2, 2, 2, 1],
            anchor_size: 20.0,
            aspect_ratios: vec![0.6, 1.6],
            head_init_std: 0.01,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::config("channels and strides must be non-empty and equally long"));
        }
        if self.channels.contains(&0) {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::config("strides must be 1 or 2"));
        }
        if !(self.anchor_size > 0.0) || self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::config("anchor size and aspect ratios must be positive"));
        }
        if !(self.head_init_std >= 0.0) {
            return Err(Error::config("head_init_std must be >= 0"));
        }
        Ok(())
    }

    /// Total downsampling factor `S`.
    pub fn stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.aspect_ratios.len()
    }

    /// Per-anchor head outputs: `C + 1` logits and 4 deltas.
    pub fn outputs_per_anchor(&self) -> usize {
        self.num_classes + 5
    }

    pub fn head_channels(&self) -> usize {
        self.anchors_per_cell() * self.outputs_per_anchor()
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let mut cin = Image::CHANNELS;
        let mut n = 0;
        for &cout in &self.channels {
            n += cout * cin * KERNEL * KERNEL + cout;
            cin = cout;
        }
        n + self.head_channels() * cin + self.head_channels()
    }

    /// Anchor `(width, height)` for each slot.
    pub fn anchor_shapes(&self) -> Vec<(f64, f64)> {
        self.aspect_ratios
            .iter()
            .map(|&r| (self.anchor_size / r.sqrt(), self.anchor_size * r.sqrt()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayout {
    cin: usize,
    cout: usize,
    stride: usize,
    w_off: usize,
    b_off: usize,
}

fn layouts(arch: &ArchConfig) -> (Vec<ConvLayout>, ConvLayout) {
    let mut cin = Image::CHANNELS;
    let mut off = 0;
    let mut out = Vec::new();
    for (&cout, &stride) in arch.channels.iter().zip(&arch.strides) {
        let w_off = off;
        off += cout * cin * KERNEL * KERNEL;
        let b_off = off;
        off += cout;
        out.push(ConvLayout {
            cin,
            cout,
            stride,
            w_off,
            b_off,
        });
        cin = cout;
    }
    let hc = arch.head_channels();
    let head = ConvLayout {
        cin,
        cout: hc,
        stride: 1,
        w_off: off,
        b_off: off + hc * cin,
    };
    (out, head)
}

/// `c = beta * c + op(a) * op(b)` for row-major matrices, `op(a)` is m×k and `op(b)` k×n.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layout of
    // each operand (transposed views swap row and column strides).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn out_dim(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

fn im2col(input: &[f64], c: usize, h: usize, w: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (out_dim(h, stride), out_dim(w, stride));
    let mut col = vec![0.0; c * KERNEL * KERNEL * oh * ow];
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = ((ci * KERNEL + ky) * KERNEL + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (col, oh, ow)
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (oh, ow) = (out_dim(h, stride), out_dim(w, stride));
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = ((ci * KERNEL + ky) * KERNEL + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += col[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `(max foreground probability, foreground class index 0..C)`; ties go to
/// the lower class index.
pub fn foreground_max(probs: &[f64]) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, &p) in probs.iter().enumerate().skip(1) {
        if p > best.0 {
            best = (p, k - 1);
        }
    }
    best
}

/// Per-anchor head outputs in anchor-major order. Anchor `n` sits in cell
/// `n / A` (row-major over the grid) and slot `n % A`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutputs {
    pub grid_h: usize,
    pub grid_w: usize,
    pub anchors_per_cell: usize,
    pub num_classes: usize,
    /// `num_anchors x (C + 1)`
    pub logits: Vec<f64>,
    /// `num_anchors x 4`
    pub deltas: Vec<f64>,
}

impl RawOutputs {
    pub fn num_anchors(&self) -> usize {
        self.grid_h * self.grid_w * self.anchors_per_cell
    }

    pub fn logits_of(&self, anchor: usize) -> &[f64] {
        let k = self.num_classes + 1;
        &self.logits[anchor * k..(anchor + 1) * k]
    }

    pub fn delta_of(&self, anchor: usize) -> BoxDelta {
        BoxDelta::from_slice(&self.deltas[anchor * 4..anchor * 4 + 4])
    }
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    cols: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
    dims: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Simplex over `[background, class_0, .., class_{C-1}]`.
    pub class_probs: Vec<f64>,
    /// Max foreground probability.
    pub confidence: f64,
    /// Foreground class attaining `confidence`.
    pub label: usize,
}

impl Detection {
    pub fn from_probs(bbox: BBox, class_probs: Vec<f64>) -> Self {
        let (confidence, label) = foreground_max(&class_probs);
        Detection {
            bbox,
            class_probs,
            confidence,
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    pub arch: ArchConfig,
    pub params: Vec<f64>,
    pub init_seed: u64,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn check_threshold(name: &str, v: f64) -> Result<()> {
    if !(0.0..1.0).contains(&v) {
        return Err(Error::config(format!("{name} {v} must lie in [0, 1)")));
    }
    Ok(())
}

impl DetectorState {
    /// He-normal backbone weights, small normal head weights, zero biases.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(&[seed, Purpose::Init as u64]);
        let (convs, head) = layouts(arch);
        let mut params = vec![0.0; arch.param_count()];
        for l in &convs {
            let fan_in = (l.cin * KERNEL * KERNEL) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            for p in &mut params[l.w_off..l.b_off] {
                *p = round_f32(normal.sample(&mut rng));
            }
        }
        if arch.head_init_std > 0.0 {
            let normal = Normal::new(0.0, arch.head_init_std).expect("positive std");
            for p in &mut params[head.w_off..head.b_off] {
                *p = round_f32(normal.sample(&mut rng));
            }
        }
        Ok(DetectorState {
            arch: arch.clone(),
            params,
            init_seed: seed,
        })
    }

    pub fn from_params(arch: ArchConfig, params: Vec<f64>, init_seed: u64) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::config("parameters must be finite"));
        }
        Ok(DetectorState { arch, params, init_seed })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Zero every head weight and bias (uniform class probabilities, zero deltas).
    pub fn zero_head(&mut self) {
        let (_, head) = layouts(&self.arch);
        for p in &mut self.params[head.w_off..] {
            *p = 0.0;
        }
    }

    /// Mutable view of the head bias: `[slot][C + 1 logits, 4 deltas]` flattened.
    pub fn head_bias_mut(&mut self) -> &mut [f64] {
        let (_, head) = layouts(&self.arch);
        &mut self.params[head.b_off..head.b_off + head.cout]
    }

    pub fn grid_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let s = self.arch.stride();
        if height == 0 || width == 0 || height % s != 0 || width % s != 0 {
            return Err(Error::Shape(format!(
                "image {width}x{height} must have both sides a positive multiple of {s}"
            )));
        }
        Ok((height / s, width / s))
    }

    /// Anchor boxes in image coordinates, anchor-major order.
    pub fn anchors(&self, height: usize, width: usize) -> Result<Vec<BBox>> {
        let (gh, gw) = self.grid_dims(height, width)?;
        let s = self.arch.stride() as f64;
        let shapes = self.arch.anchor_shapes();
        let mut out = Vec::with_capacity(gh * gw * shapes.len());
        for cy in 0..gh {
            for cx in 0..gw {
                let (x, y) = ((cx as f64 + 0.5) * s, (cy as f64 + 0.5) * s);
                for &(w, h) in &shapes {
                    out.push(BBox::from_center(x, y, w, h)?);
                }
            }
        }
        Ok(out)
    }

    fn image_input(image: &Image) -> Vec<f64> {
        image.data().iter().map(|&v| v as f64 - 0.5).collect()
    }

    pub fn forward(&self, image: &Image) -> Result<RawOutputs> {
        self.forward_cached(image).map(|(raw, _)| raw)
    }

    pub fn forward_cached(&self, image: &Image) -> Result<(RawOutputs, ForwardCache)> {
        let (gh, gw) = self.grid_dims(image.height(), image.width())?;
        let (convs, head) = layouts(&self.arch);
        let p = &self.params;

        let mut cache = ForwardCache {
            cols: Vec::with_capacity(convs.len()),
            acts: Vec::with_capacity(convs.len()),
            dims: Vec::with_capacity(convs.len()),
        };
        let mut x = Self::image_input(image);
        let (mut h, mut w) = (image.height(), image.width());
        for l in &convs {
            let (col, oh, ow) = im2col(&x, l.cin, h, w, l.stride);
            let hw = oh * ow;
            let mut out = vec![0.0; l.cout * hw];
            for (co, row) in out.chunks_mut(hw).enumerate() {
                row.fill(p[l.b_off + co]);
            }
            gemm(l.cout, l.cin * KERNEL * KERNEL, hw, &p[l.w_off..l.b_off], false, &col, false, 1.0, &mut out);
            for v in &mut out {
                *v = v.max(0.0);
            }
            cache.cols.push(col);
            cache.acts.push(out.clone());
            cache.dims.push((oh, ow));
            x = out;
            h = oh;
            w = ow;
        }
        debug_assert_eq!((h, w), (gh, gw));

        let hw = gh * gw;
        let mut out = vec![0.0; head.cout * hw];
        for (co, row) in out.chunks_mut(hw).enumerate() {
            row.fill(p[head.b_off + co]);
        }
        gemm(head.cout, head.cin, hw, &p[head.w_off..head.b_off], false, &x, false, 1.0, &mut out);

        let a = self.arch.anchors_per_cell();
        let per = self.arch.outputs_per_anchor();
        let k = self.arch.num_classes + 1;
        let n = hw * a;
        let mut logits = vec![0.0; n * k];
        let mut deltas = vec![0.0; n * 4];
        for cell in 0..hw {
            for slot in 0..a {
                let anchor = cell * a + slot;
                for j in 0..k {
                    logits[anchor * k + j] = out[(slot * per + j) * hw + cell];
                }
                for j in 0..4 {
                    deltas[anchor * 4 + j] = out[(slot * per + k + j) * hw + cell];
                }
            }
        }
        Ok((
            RawOutputs {
                grid_h: gh,
                grid_w: gw,
                anchors_per_cell: a,
                num_classes: self.arch.num_classes,
                logits,
                deltas,
            },
            cache,
        ))
    }

    /// Gradient of a scalar loss w.r.t. every parameter, given the loss
    /// gradients w.r.t. the anchor-major logits and deltas.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], ddeltas: &[f64]) -> Vec<f64> {
        let mut grads = vec![0.0; self.params.len()];
        self.backward_into(cache, dlogits, ddeltas, 1.0, &mut grads);
        grads
    }

    /// Accumulate `scale * gradient` into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache, dlogits: &[f64], ddeltas: &[f64], scale: f64, grads: &mut [f64]) {
        let (convs, head) = layouts(&self.arch);
        let p = &self.params;
        let (gh, gw) = *cache.dims.last().expect("at least one layer");
        let hw = gh * gw;
        let a = self.arch.anchors_per_cell();
        let per = self.arch.outputs_per_anchor();
        let k = self.arch.num_classes + 1;

        let mut dhead = vec![0.0; head.cout * hw];
        for cell in 0..hw {
            for slot in 0..a {
                let anchor = cell * a + slot;
                for j in 0..k {
                    dhead[(slot * per + j) * hw + cell] = scale * dlogits[anchor * k + j];
                }
                for j in 0..4 {
                    dhead[(slot * per + k + j) * hw + cell] = scale * ddeltas[anchor * 4 + j];
                }
            }
        }
        let feat = cache.acts.last().expect("at least one layer");
        gemm(head.cout, hw, head.cin, &dhead, false, feat, true, 1.0, &mut grads[head.w_off..head.b_off]);
        for (co, row) in dhead.chunks(hw).enumerate() {
            grads[head.b_off + co] += row.iter().sum::<f64>();
        }
        let mut dx = vec![0.0; head.cin * hw];
        gemm(head.cin, head.cout, hw, &p[head.w_off..head.b_off], true, &dhead, false, 0.0, &mut dx);

        for li in (0..convs.len()).rev() {
            let l = convs[li];
            let (oh, ow) = cache.dims[li];
            let ohw = oh * ow;
            let act = &cache.acts[li];
            for (d, &v) in dx.iter_mut().zip(act) {
                if v <= 0.0 {
                    *d = 0.0;
                }
            }
            let kk = l.cin * KERNEL * KERNEL;
            gemm(l.cout, ohw, kk, &dx, false, &cache.cols[li], true, 1.0, &mut grads[l.w_off..l.b_off]);
            for (co, row) in dx.chunks(ohw).enumerate() {
                grads[l.b_off + co] += row.iter().sum::<f64>();
            }
            if li == 0 {
                break;
            }
            let mut dcol = vec![0.0; kk * ohw];
            gemm(kk, l.cout, ohw, &p[l.w_off..l.b_off], true, &dx, false, 0.0, &mut dcol);
            let (ih, iw) = cache.dims[li - 1];
            dx = col2im(&dcol, l.cin, ih, iw, l.stride);
        }
    }

    /// Every anchor whose argmax is a foreground class and whose confidence
    /// is at least `floor`, decoded and clipped, in anchor order. No NMS.
    pub fn candidates_from(&self, raw: &RawOutputs, height: usize, width: usize, floor: f64) -> Result<Vec<Detection>> {
        let anchors = self.anchors(height, width)?;
        let mut out = Vec::new();
        for (n, anchor) in anchors.iter().enumerate() {
            let probs = softmax(raw.logits_of(n));
            let (conf, _) = foreground_max(&probs);
            if probs[0] >= conf || conf < floor {
                continue;
            }
            let Some(bbox) = decode_delta(anchor, &raw.delta_of(n)).clip(width as f64, height as f64) else {
                continue;
            };
            out.push(Detection::from_probs(bbox, probs));
        }
        Ok(out)
    }

    pub fn candidates(&self, image: &Image, floor: f64) -> Result<Vec<Detection>> {
        let raw = self.forward(image)?;
        self.candidates_from(&raw, image.height(), image.width(), floor)
    }

    /// Inference: foreground candidates, class-wise NMS, confidence filter,
    /// sorted by confidence (descending).
    pub fn detect(&self, image: &Image, score_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        check_threshold("score_threshold", score_threshold)?;
        check_threshold("nms_iou", nms_iou)?;
        let cands = self.candidates(image, 0.0)?;
        Ok(suppress_and_filter(cands, score_threshold, nms_iou))
    }

    /// Re-apply the head to each proposal: features are read at the cell
    /// containing the proposal center, the slot whose anchor shape best fits
    /// the proposal is used, and its deltas are decoded with the proposal as
    /// the anchor. Order is preserved.
    pub fn refine_from(&self, raw: &RawOutputs, proposals: &[BBox]) -> Vec<(Vec<f64>, BBox)> {
        let s = self.arch.stride() as f64;
        let shapes = self.arch.anchor_shapes();
        proposals
            .iter()
            .map(|prop| {
                let (cx, cy) = prop.center();
                let gx = ((cx / s).floor().max(0.0) as usize).min(raw.grid_w - 1);
                let gy = ((cy / s).floor().max(0.0) as usize).min(raw.grid_h - 1);
                let slot = best_slot(prop, &shapes);
                let anchor = (gy * raw.grid_w + gx) * raw.anchors_per_cell + slot;
                let probs = softmax(raw.logits_of(anchor));
                (probs, decode_delta(prop, &raw.delta_of(anchor)))
            })
            .collect()
    }

    pub fn refine(&self, image: &Image, proposals: &[BBox]) -> Result<Vec<(Vec<f64>, BBox)>> {
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let raw = self.forward(image)?;
        Ok(self.refine_from(&raw, proposals))
    }
}

/// Slot whose anchor shape, centered on the proposal, overlaps it most
/// (ties to the lower slot).
fn best_slot(prop: &BBox, shapes: &[(f64, f64)]) -> usize {
    let (cx, cy) = prop.center();
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, &(w, h)) in shapes.iter().enumerate() {
        let anchor = BBox::from_center(cx, cy, w, h).expect("positive anchor shape");
        let v = prop.iou(&anchor);
        if v > best.0 {
            best = (v, i);
        }
    }
    best.1
}

/// Class-wise NMS, drop below `score_threshold`, order by confidence.
pub fn suppress_and_filter(cands: Vec<Detection>, score_threshold: f64, nms_iou: f64) -> Vec<Detection> {
    let keyed: Vec<(BBox, f64, usize)> = cands.iter().map(|d| (d.bbox, d.confidence, d.label)).collect();
    let keep = nms_classwise(&keyed, nms_iou);
    let mut cands: Vec<Option<Detection>> = cands.into_iter().map(Some).collect();
    keep.into_iter()
        .filter_map(|i| cands[i].take())
        .filter(|d| d.confidence >= score_threshold)
        .collect()
}

/// Add Gaussian noise to every parameter.
pub fn perturb_params(state: &mut DetectorState, std: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, std).expect("positive std");
    for p in &mut state.params {
        *p += normal.sample(rng);
    }
}
