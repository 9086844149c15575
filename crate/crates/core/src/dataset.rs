//! On-disk datasets: PNG files plus a JSON manifest, and the label-read guard
//! used to prove inference never touches annotations.

use std::cell::Cell;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{self, Palette, Sample};
use crate::tensor::Tensor;

/// Metres (scene units) per 16-bit depth level.
pub const DEPTH_SCALE: f64 = 0.0002;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub depth: String,
    pub depth_scale: f64,
    pub classes: Vec<String>,
    pub caption: String,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub id: u8,
    pub word: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
    pub palette: Vec<PaletteEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

// ---- label-read guard -------------------------------------------------

thread_local! {
    static GUARD_DEPTH: Cell<usize> = const { Cell::new(0) };
    static LABEL_READS: Cell<usize> = const { Cell::new(0) };
}

/// While alive, every label read on this thread fails with
/// [`Error::LabelLeak`].
pub struct InferenceGuard(());

impl InferenceGuard {
    pub fn new() -> Self {
        GUARD_DEPTH.with(|d| d.set(d.get() + 1));
        InferenceGuard(())
    }

    pub fn active() -> bool {
        GUARD_DEPTH.with(|d| d.get() > 0)
    }
}

impl Default for InferenceGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for InferenceGuard {
    fn drop(&mut self) {
        GUARD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Label reads attempted on this thread so far (including refused ones).
pub fn label_reads() -> usize {
    LABEL_READS.with(|c| c.get())
}

fn note_label_access(what: &str) -> Result<()> {
    LABEL_READS.with(|c| c.set(c.get() + 1));
    if InferenceGuard::active() {
        return Err(Error::LabelLeak(what.to_string()));
    }
    Ok(())
}

// ---- PNG --------------------------------------------------------------

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), detail: e.to_string() }
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

struct RawPng {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<RawPng> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data).map_err(|e| png_err(path, e))?;
    data.truncate(info.line_size * info.height as usize);
    Ok(RawPng {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

/// Writes `[3, H, W]` values in `[0, 1]` as 8-bit RGB.
pub fn write_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

/// Reads an 8-bit RGB PNG into `[3, H, W]` values in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let raw = read_png(path)?;
    if raw.color != png::ColorType::Rgb || raw.depth != png::BitDepth::Eight {
        return Err(png_err(path, format!("expected 8-bit RGB, got {:?} {:?}", raw.color, raw.depth)));
    }
    let n = raw.width * raw.height;
    let mut out = vec![0f32; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            out[c * n + i] = raw.data[3 * i + c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, raw.height, raw.width], out)
}

pub fn write_gray8(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    write_png(path, w, h, png::ColorType::Grayscale, png::BitDepth::Eight, data)
}

pub fn write_gray16(path: &Path, w: usize, h: usize, data: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, w, h, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

/// Writes an indexed-color PNG (used for segmentation visualizations).
pub fn write_indexed(path: &Path, w: usize, h: usize, data: &[u8], palette: &[[u8; 3]]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette.iter().flatten().copied().collect::<Vec<u8>>());
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

fn read_gray8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = read_png(path)?;
    if raw.color != png::ColorType::Grayscale || raw.depth != png::BitDepth::Eight {
        return Err(png_err(path, format!("expected 8-bit gray, got {:?} {:?}", raw.color, raw.depth)));
    }
    Ok((raw.width, raw.height, raw.data))
}

fn read_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let raw = read_png(path)?;
    if raw.color != png::ColorType::Grayscale || raw.depth != png::BitDepth::Sixteen {
        return Err(png_err(path, format!("expected 16-bit gray, got {:?} {:?}", raw.color, raw.depth)));
    }
    let vals = raw.data.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    Ok((raw.width, raw.height, vals))
}

// ---- thread pool ------------------------------------------------------

/// Worker count for parallel sections: `IEDP_THREADS` if set to a positive
/// integer, otherwise the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("IEDP_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub(crate) fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(worker_threads()).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

// ---- writing ----------------------------------------------------------

/// Generates `n` samples into `out_dir` and writes the manifest. Samples are
/// assigned to splits in order: the first `fractions[0]·n` go to "train", and
/// so on.
pub fn write_dataset(n: usize, out_dir: &Path, fractions: &[f64], seed: u64, size: usize, palette: &Palette) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    let sizes = synth::split_sizes(n, fractions)?;
    for sub in ["images", "masks", "depth"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut splits = Vec::with_capacity(n);
    for (si, &count) in sizes.iter().enumerate() {
        splits.extend(std::iter::repeat_n(synth::split_name(si), count));
    }
    let entries: Vec<Result<ManifestEntry>> = with_pool(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let sample = synth::generate_sample(synth::sample_seed(seed, i), palette, size)?;
                write_sample(out_dir, i, &sample, palette, &splits[i])
            })
            .collect()
    });
    let manifest = Manifest {
        samples: entries.into_iter().collect::<Result<_>>()?,
        palette: palette
            .words()
            .iter()
            .enumerate()
            .map(|(i, w)| PaletteEntry { id: i as u8, word: w.clone() })
            .collect(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)?;
    Ok(manifest)
}

fn write_sample(root: &Path, i: usize, s: &Sample, palette: &Palette, split: &str) -> Result<ManifestEntry> {
    let entry = ManifestEntry {
        image: format!("images/{i:05}.png"),
        mask: format!("masks/{i:05}.png"),
        depth: format!("depth/{i:05}.png"),
        depth_scale: DEPTH_SCALE,
        classes: s.class_words(palette),
        caption: s.caption.clone(),
        split: split.to_string(),
    };
    write_rgb(&root.join(&entry.image), &s.image)?;
    write_gray8(&root.join(&entry.mask), s.width, s.height, &s.mask)?;
    let levels: Vec<u16> = s
        .depth
        .iter()
        .map(|&d| (d as f64 / DEPTH_SCALE).round().clamp(1.0, u16::MAX as f64) as u16)
        .collect();
    write_gray16(&root.join(&entry.depth), s.width, s.height, &levels)?;
    Ok(entry)
}

// ---- reading ----------------------------------------------------------

/// A dataset opened from its manifest. Images are free to read; masks,
/// depth maps, class sets and captions count as labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    manifest: Manifest,
    palette: Palette,
}

impl Dataset {
    /// Opens `path`, which is either a manifest file or a directory holding one.
    pub fn open(path: &Path) -> Result<Self> {
        let file_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let file = File::open(&file_path).map_err(|e| Error::io(&file_path, e))?;
        let manifest: Manifest = serde_json::from_reader(BufReader::new(file))?;
        let words: Vec<String> = manifest.palette.iter().map(|p| p.word.clone()).collect();
        let palette = Palette::from_words(&words)?;
        let root = file_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Dataset { root, manifest, palette })
    }

    pub fn from_parts(root: PathBuf, manifest: Manifest) -> Result<Self> {
        let words: Vec<String> = manifest.palette.iter().map(|p| p.word.clone()).collect();
        let palette = Palette::from_words(&words)?;
        Ok(Dataset { root, manifest, palette })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    /// Sample indices of a split, in manifest order.
    pub fn split(&self, name: &str) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.manifest.samples[i].split == name).collect();
        if idx.is_empty() {
            return Err(Error::Config(format!("split {name:?} is absent from the dataset")));
        }
        Ok(idx)
    }

    pub fn image(&self, i: usize) -> Result<Tensor<f32>> {
        read_rgb(&self.root.join(&self.manifest.samples[i].image))
    }

    pub fn mask(&self, i: usize) -> Result<Vec<u8>> {
        let path = self.root.join(&self.manifest.samples[i].mask);
        note_label_access(&path.display().to_string())?;
        Ok(read_gray8(&path)?.2)
    }

    pub fn depth(&self, i: usize) -> Result<Vec<f32>> {
        let e = &self.manifest.samples[i];
        let path = self.root.join(&e.depth);
        note_label_access(&path.display().to_string())?;
        let (_, _, levels) = read_gray16(&path)?;
        Ok(levels.iter().map(|&v| (v as f64 * e.depth_scale) as f32).collect())
    }

    /// Ground-truth class ids, ascending.
    pub fn classes(&self, i: usize) -> Result<Vec<u8>> {
        note_label_access("manifest class set")?;
        let mut ids = self.manifest.samples[i]
            .classes
            .iter()
            .map(|w| self.palette.id(w).ok_or_else(|| Error::Config(format!("class {w:?} not in palette"))))
            .collect::<Result<Vec<u8>>>()?;
        ids.sort_unstable();
        Ok(ids)
    }

    pub fn caption(&self, i: usize) -> Result<&str> {
        note_label_access("manifest caption")?;
        Ok(&self.manifest.samples[i].caption)
    }

    /// Reads a full training sample (image plus every label).
    pub fn sample(&self, i: usize) -> Result<Sample> {
        let image = self.image(i)?;
        let (height, width) = (image.shape()[1], image.shape()[2]);
        Ok(Sample {
            mask: self.mask(i)?,
            depth: self.depth(i)?,
            height,
            width,
            classes: self.classes(i)?,
            caption: self.caption(i)?.to_string(),
            image,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_refuses_label_reads_and_counts_them() {
        let before = label_reads();
        assert!(note_label_access("x").is_ok());
        {
            let _g = InferenceGuard::new();
            assert!(matches!(note_label_access("y"), Err(Error::LabelLeak(_))));
        }
        assert!(note_label_access("z").is_ok());
        assert_eq!(label_reads(), before + 3);
    }

    #[test]
    fn sixteen_bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let vals = [0u16, 1, 256, 65535, 40000, 7];
        write_gray16(&p, 3, 2, &vals).unwrap();
        assert_eq!(read_gray16(&p).unwrap(), (3, 2, vals.to_vec()));
    }
}
