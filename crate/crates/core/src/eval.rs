//! Metrics, sliding-window inference and split evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{with_pool, write_gray8, write_indexed, Dataset, InferenceGuard};
use crate::error::{Error, Result};
use crate::heads::Task;
use crate::model::Model;
use crate::synth::IGNORE_LABEL;
use crate::tensor::{Float, Graph, Tensor};

/// Set to make evaluation read a label inside the inference guard (exercises
/// the leak check end to end).
pub const FORCE_LABEL_READ_ENV: &str = "IEDP_FORCE_LABEL_READ";

// ---- segmentation metrics ---------------------------------------------

/// Pixel confusion counts, `counts[gt * classes + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    /// Adds one prediction map. Ground-truth pixels equal to
    /// [`IGNORE_LABEL`] are skipped.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("confusion", format!("{} predictions vs {} labels", pred.len(), gt.len())));
        }
        let k = self.classes;
        for (&p, &t) in pred.iter().zip(gt) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::Contract(format!("label {} outside {k} classes", p.max(t))));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    /// IoU per class; `None` when the class appears in neither prediction
    /// nor ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let gt_total: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
                let pred_total: u64 = (0..k).map(|r| self.counts[r * k + c]).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::UndefinedMetric("mIoU: no class present in prediction or ground truth".into()));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// mIoU of one set of prediction/label maps.
pub fn miou(pred: &[u8], gt: &[u8], classes: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    cm.miou()
}

/// Per-pixel argmax over the channel axis of `[C, H, W]`; ties go to the
/// lower class.
pub fn argmax_channels<T: Float>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let d = logits.data();
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * hw + p] > d[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

// ---- depth metrics ----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub rel: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// Running sums for depth metrics pooled over pixels.
#[derive(Clone, Debug, Default)]
pub struct DepthAccumulator {
    n: u64,
    sq: f64,
    rel: f64,
    log10: f64,
    within: [u64; 3],
}

impl DepthAccumulator {
    pub fn add(&mut self, pred: &[f32], gt: &[f32], valid: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || gt.len() != valid.len() {
            return Err(Error::shape("depth_metrics", format!("{} / {} / {} pixels", pred.len(), gt.len(), valid.len())));
        }
        for i in (0..pred.len()).filter(|&i| valid[i]) {
            let (p, t) = (pred[i] as f64, gt[i] as f64);
            if p <= 0.0 || t <= 0.0 || !p.is_finite() || !t.is_finite() {
                return Err(Error::Contract(format!("depth metrics need positive values, got pred {p} gt {t} at {i}")));
            }
            self.n += 1;
            self.sq += (p - t) * (p - t);
            self.rel += (p - t).abs() / t;
            self.log10 += (p.log10() - t.log10()).abs();
            let ratio = if p > t { p / t } else { t / p };
            let mut thr = 1.0;
            for w in &mut self.within {
                thr *= 1.25;
                if ratio < thr {
                    *w += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<DepthMetrics> {
        if self.n == 0 {
            return Err(Error::UndefinedMetric("depth metrics over an empty valid mask".into()));
        }
        let n = self.n as f64;
        Ok(DepthMetrics {
            rmse: (self.sq / n).sqrt(),
            rel: self.rel / n,
            log10: self.log10 / n,
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
        })
    }
}

pub fn depth_metrics(pred: &[f32], gt: &[f32], valid: &[bool]) -> Result<DepthMetrics> {
    let mut acc = DepthAccumulator::default();
    acc.add(pred, gt, valid)?;
    acc.finish()
}

/// RMSE of predicting the mean depth everywhere, i.e. the population
/// standard deviation of the depths.
pub fn constant_depth_rmse(depths: &[f32]) -> Result<f64> {
    if depths.is_empty() {
        return Err(Error::UndefinedMetric("no depth pixels".into()));
    }
    let n = depths.len() as f64;
    let mean = depths.iter().map(|&d| d as f64).sum::<f64>() / n;
    Ok((depths.iter().map(|&d| (d as f64 - mean).powi(2)).sum::<f64>() / n).sqrt())
}

// ---- sliding window ---------------------------------------------------

/// Tile origins along one axis: `0, stride, ..` with the last tile pinned
/// to the far edge. `len` must be at least `crop`.
pub fn tile_origins(len: usize, crop: usize, stride: usize) -> Vec<usize> {
    let steps = (len.saturating_sub(crop)).div_ceil(stride);
    (0..=steps).map(|i| (i * stride).min(len - crop)).collect()
}

fn check_window(crop: usize, stride: usize) -> Result<()> {
    if crop == 0 || stride == 0 || stride > crop {
        return Err(Error::Config(format!("sliding window needs 0 < stride ≤ crop, got crop {crop} stride {stride}")));
    }
    Ok(())
}

/// How many tiles cover each pixel of an `h × w` image.
pub fn coverage(h: usize, w: usize, crop: usize, stride: usize) -> Result<Vec<u32>> {
    check_window(crop, stride)?;
    let (hp, wp) = (h.max(crop), w.max(crop));
    let mut cover = vec![0u32; hp * wp];
    for &y in &tile_origins(hp, crop, stride) {
        for &x in &tile_origins(wp, crop, stride) {
            for r in y..y + crop {
                for c in &mut cover[r * wp + x..r * wp + x + crop] {
                    *c += 1;
                }
            }
        }
    }
    Ok((0..h).flat_map(|r| cover[r * wp..r * wp + w].to_vec()).collect())
}

/// Mirror index for reflect padding (edge pixel not repeated).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// `[C, H, W]` padded at the bottom/right to at least `h × w` by reflection.
fn reflect_pad<T: Float>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = x.shape();
    let (c, h0, w0) = (s[0], s[1], s[2]);
    let (hp, wp) = (h.max(h0), w.max(w0));
    let mut out = Vec::with_capacity(c * hp * wp);
    let d = x.data();
    for ch in 0..c {
        for r in 0..hp {
            let rr = reflect(r, h0);
            for col in 0..wp {
                out.push(d[(ch * h0 + rr) * w0 + reflect(col, w0)]);
            }
        }
    }
    Tensor::new(&[c, hp, wp], out).expect("sized above")
}

fn crop_tensor<T: Float>(x: &Tensor<T>, y: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
    let s = x.shape();
    let (c, wf) = (s[0], s[2]);
    let hf = s[1];
    let d = x.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for r in y..y + h {
            let base = (ch * hf + r) * wf + x0;
            out.extend_from_slice(&d[base..base + w]);
        }
    }
    Tensor::new(&[c, h, w], out).expect("sized above")
}

/// Runs `infer` on `crop × crop` tiles of a `[C, H, W]` image and averages
/// overlapping outputs. Images smaller than one tile are reflect-padded and
/// the output cropped back.
pub fn sliding_window<T: Float>(
    image: &Tensor<T>,
    crop: usize,
    stride: usize,
    mut infer: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    check_window(crop, stride)?;
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("sliding_window", format!("expected [C, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let padded = if h < crop || w < crop { reflect_pad(image, crop, crop) } else { image.clone() };
    let (hp, wp) = (padded.shape()[1], padded.shape()[2]);
    if hp == crop && wp == crop {
        let out = infer(&padded)?;
        let os = out.shape();
        if os.len() != 3 || os[1] != crop || os[2] != crop {
            return Err(Error::shape("sliding_window", format!("tile output {os:?} for a {crop}×{crop} tile")));
        }
        return Ok(if hp == h && wp == w { out } else { crop_tensor(&out, 0, 0, h, w) });
    }
    let mut acc: Option<(Tensor<T>, usize)> = None;
    let mut count = vec![0u32; hp * wp];
    for &y in &tile_origins(hp, crop, stride) {
        for &x in &tile_origins(wp, crop, stride) {
            let tile = crop_tensor(&padded, y, x, crop, crop);
            let out = infer(&tile)?;
            let os = out.shape();
            if os.len() != 3 || os[1] != crop || os[2] != crop {
                return Err(Error::shape("sliding_window", format!("tile output {os:?} for a {crop}×{crop} tile")));
            }
            let k = os[0];
            let (sum, _) = acc.get_or_insert_with(|| (Tensor::zeros(&[k, hp, wp]), k));
            let sd = sum.data_mut();
            let od = out.data();
            for ch in 0..k {
                for r in 0..crop {
                    let dst = (ch * hp + y + r) * wp + x;
                    let src = (ch * crop + r) * crop;
                    for c in 0..crop {
                        sd[dst + c] += od[src + c];
                    }
                }
            }
            for r in y..y + crop {
                for c in &mut count[r * wp + x..r * wp + x + crop] {
                    *c += 1;
                }
            }
        }
    }
    let (mut sum, k) = acc.expect("at least one tile");
    let sd = sum.data_mut();
    for ch in 0..k {
        for (p, &n) in count.iter().enumerate() {
            sd[ch * hp * wp + p] /= T::of(n as f64);
        }
    }
    if hp == h && wp == w {
        Ok(sum)
    } else {
        Ok(crop_tensor(&sum, 0, 0, h, w))
    }
}

/// Mean of the plain prediction and the un-flipped prediction of the
/// horizontally flipped image.
pub fn hflip_tta<T: Float>(image: &Tensor<T>, mut infer: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Tensor<T>> {
    let a = infer(image)?;
    let b = infer(&image.flip_last())?.flip_last();
    if a.shape() != b.shape() {
        return Err(Error::shape("hflip_tta", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| (x + y) / T::of(2.0)).collect();
    Tensor::new(a.shape(), data)
}

/// Bilinear resize of a `[C, H, W]` tensor.
pub fn resize<T: Float>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if x.shape()[1] == h && x.shape()[2] == w {
        return Ok(x.clone());
    }
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let r = g.resize_bilinear(v, h, w)?;
    Ok(g.value(r).clone())
}

// ---- split evaluation -------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub crop: usize,
    pub stride: usize,
    /// Flip test-time augmentation (depth).
    pub hflip: bool,
    /// Also report the two-scale mIoU (segmentation).
    pub two_scale: bool,
    /// Evaluate only the first `n` samples of the split.
    pub max_samples: Option<usize>,
    /// Write prediction PNGs for the first `n` samples.
    pub visualize: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { crop: 64, stride: 43, hflip: true, two_scale: true, max_samples: None, visualize: 4 }
    }
}

/// Scales of the multi-scale segmentation pass.
pub const EVAL_SCALES: [f64; 2] = [1.0, 1.5];

/// Metrics file contents; metrics of the other task are null.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou_ss: Option<f64>,
    pub miou_ms: Option<f64>,
    pub rmse: Option<f64>,
    pub rel: Option<f64>,
    pub log10: Option<f64>,
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    pub delta3: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassIou {
    pub id: u8,
    pub word: String,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub split: String,
    pub samples: usize,
    pub metrics: MetricsReport,
    /// Single-scale per-class IoU (segmentation only).
    pub per_class: Vec<ClassIou>,
    /// RMSE of the constant mean-depth predictor on the same pixels (depth only).
    pub constant_baseline_rmse: Option<f64>,
}

/// Prediction of one image: logits or depth `[K, H, W]` at single scale,
/// and the multi-scale logits when requested.
pub struct Prediction {
    pub single: Tensor<f32>,
    pub multi: Option<Tensor<f32>>,
}

/// Inference for one image with the configured tiling and test-time
/// augmentation. Reads no labels.
pub fn infer_image(model: &Model<f32>, image: &Tensor<f32>, opts: &EvalOptions) -> Result<Prediction> {
    let tiled = |img: &Tensor<f32>| sliding_window(img, opts.crop, opts.stride, |t| model.predict(t));
    match model.cfg.task {
        Task::Depth => {
            let single = if opts.hflip { hflip_tta(image, tiled)? } else { tiled(image)? };
            Ok(Prediction { single, multi: None })
        }
        Task::Segmentation => {
            let single = tiled(image)?;
            let multi = if opts.two_scale {
                let (h, w) = (image.shape()[1], image.shape()[2]);
                let mut sum = single.clone();
                for &s in &EVAL_SCALES[1..] {
                    let (hs, ws) = ((h as f64 * s).round() as usize, (w as f64 * s).round() as usize);
                    let scaled = tiled(&resize(image, hs, ws)?)?;
                    sum.add_assign(&resize(&scaled, h, w)?);
                }
                Some(sum)
            } else {
                None
            };
            Ok(Prediction { single, multi })
        }
    }
}

/// Evaluates `model` on a split. All inference runs under the inference
/// guard; labels are read afterwards, per sample.
pub fn evaluate(model: &Model<f32>, ds: &Dataset, split: &str, opts: &EvalOptions, vis_dir: Option<&Path>) -> Result<EvalResult> {
    let mut idx = ds.split(split)?;
    if let Some(n) = opts.max_samples {
        idx.truncate(n);
    }
    if ds.palette().len() != model.cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            ds.palette().len(),
            model.cfg.num_classes
        )));
    }
    let force_leak = std::env::var_os(FORCE_LABEL_READ_ENV).is_some();
    if let Some(d) = vis_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let k = model.cfg.num_classes;
    let mut cm_ss = ConfusionMatrix::new(k);
    let mut cm_ms = ConfusionMatrix::new(k);
    let mut depth_acc = DepthAccumulator::default();
    let mut all_depths = Vec::new();
    let predictions: Vec<Result<(usize, usize, Prediction)>> = with_pool(|| {
        idx.par_iter()
            .map(|&i| {
                let image = ds.image(i)?;
                let _guard = InferenceGuard::new();
                if force_leak {
                    ds.mask(i)?;
                }
                Ok((image.shape()[1], image.shape()[2], infer_image(model, &image, opts)?))
            })
            .collect()
    });
    for (n, (&i, pred)) in idx.iter().zip(predictions).enumerate() {
        let (h, w, pred) = pred?;
        match model.cfg.task {
            Task::Segmentation => {
                let labels = argmax_channels(&pred.single);
                let gt = ds.mask(i)?;
                cm_ss.add(&labels, &gt)?;
                if let Some(m) = &pred.multi {
                    cm_ms.add(&argmax_channels(m), &gt)?;
                }
                if let Some(d) = vis_dir.filter(|_| n < opts.visualize) {
                    write_indexed(&d.join(format!("{i:05}.png")), w, h, &labels, &class_colors(k))?;
                }
            }
            Task::Depth => {
                let gt = ds.depth(i)?;
                let valid: Vec<bool> = gt.iter().map(|&d| d > 0.0).collect();
                depth_acc.add(pred.single.data(), &gt, &valid)?;
                all_depths.extend(gt.iter().zip(&valid).filter(|(_, &v)| v).map(|(&d, _)| d));
                if let Some(d) = vis_dir.filter(|_| n < opts.visualize) {
                    write_gray8(&d.join(format!("{i:05}.png")), w, h, &depth_to_gray(pred.single.data()))?;
                }
            }
        }
    }
    let mut metrics = MetricsReport::default();
    let mut per_class = Vec::new();
    let mut constant_baseline_rmse = None;
    match model.cfg.task {
        Task::Segmentation => {
            metrics.miou_ss = Some(cm_ss.miou()?);
            if opts.two_scale {
                metrics.miou_ms = Some(cm_ms.miou()?);
            }
            per_class = cm_ss
                .per_class_iou()
                .into_iter()
                .enumerate()
                .map(|(c, iou)| ClassIou { id: c as u8, word: ds.palette().word(c as u8).to_string(), iou })
                .collect();
        }
        Task::Depth => {
            let m = depth_acc.finish()?;
            metrics.rmse = Some(m.rmse);
            metrics.rel = Some(m.rel);
            metrics.log10 = Some(m.log10);
            metrics.delta1 = Some(m.delta1);
            metrics.delta2 = Some(m.delta2);
            metrics.delta3 = Some(m.delta3);
            constant_baseline_rmse = Some(constant_depth_rmse(&all_depths)?);
        }
    }
    Ok(EvalResult { split: split.to_string(), samples: idx.len(), metrics, per_class, constant_baseline_rmse })
}

/// Writes `metrics.json` and, for segmentation, `per_class_iou.csv`.
pub fn write_reports(result: &EvalResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mpath = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&result.metrics)?;
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    written.push(mpath);
    if !result.per_class.is_empty() {
        let cpath = dir.join("per_class_iou.csv");
        let mut f = fs::File::create(&cpath).map_err(|e| Error::io(&cpath, e))?;
        let mut body = String::from("class_id,class,iou\n");
        for c in &result.per_class {
            let iou = c.iou.map(|v| v.to_string()).unwrap_or_default();
            body.push_str(&format!("{},{},{}\n", c.id, c.word, iou));
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(&cpath, e))?;
        written.push(cpath);
    }
    Ok(written)
}

/// Display colors for class-index PNGs.
pub fn class_colors(k: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 12] = [
        [120, 120, 120],
        [180, 120, 80],
        [100, 170, 230],
        [230, 200, 60],
        [200, 60, 60],
        [250, 250, 160],
        [140, 80, 200],
        [60, 200, 220],
        [40, 150, 60],
        [220, 120, 180],
        [130, 90, 40],
        [60, 60, 200],
    ];
    (0..k).map(|i| BASE[i % BASE.len()]).collect()
}

/// Min-max normalized 8-bit rendering of a depth map.
pub fn depth_to_gray(depth: &[f32]) -> Vec<u8> {
    let lo = depth.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = depth.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    depth.iter().map(|&d| (((d - lo) / span) * 255.0).round() as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_examples() {
        assert_eq!(miou(&[0, 0, 1, 1], &[0, 0, 1, 1], 2).unwrap(), 1.0);
        let v = miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((v - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        // Class 2 absent everywhere is excluded from the mean.
        assert_eq!(miou(&[0, 1], &[0, 1], 3).unwrap(), 1.0);
        assert!(matches!(miou(&[0], &[IGNORE_LABEL], 2), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn delta_threshold_is_strict() {
        let gt = [4.0f32, 8.0, 16.0];
        let pred: Vec<f32> = gt.iter().map(|g| g * 1.25).collect();
        let m = depth_metrics(&pred, &gt, &[true; 3]).unwrap();
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 1.0);
        let exact = depth_metrics(&gt, &gt, &[true; 3]).unwrap();
        assert_eq!((exact.rmse, exact.rel, exact.log10, exact.delta1), (0.0, 0.0, 0.0, 1.0));
        assert!(matches!(depth_metrics(&gt, &gt, &[false; 3]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn tile_origins_cover_the_axis() {
        assert_eq!(tile_origins(64, 64, 43), vec![0]);
        assert_eq!(tile_origins(128, 64, 43), vec![0, 43, 64]);
        assert_eq!(tile_origins(100, 64, 36), vec![0, 36]);
        let cover = coverage(128, 128, 64, 43).unwrap();
        assert!(cover.iter().all(|&c| c >= 1));
        assert_eq!(cover[0], 1);
        assert_eq!(cover[50 * 128 + 50], 4);
    }

    #[test]
    fn sliding_window_averages_overlaps() {
        let img = Tensor::<f64>::new(&[1, 5, 7], (0..35).map(|v| v as f64).collect()).unwrap();
        let out = sliding_window(&img, 4, 2, |t| Ok(t.clone())).unwrap();
        assert_eq!(out, img);
        let small = Tensor::<f64>::new(&[1, 2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(sliding_window(&small, 4, 4, |t| Ok(t.clone())).unwrap(), small);
        assert!(matches!(sliding_window(&img, 4, 5, |t| Ok(t.clone())), Err(Error::Config(_))));
    }

    #[test]
    fn reflect_pads_without_repeating_the_edge() {
        let x = Tensor::<f64>::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(reflect_pad(&x, 1, 7).data(), &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn constant_baseline_is_population_std() {
        assert!((constant_depth_rmse(&[1.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
    }
}
