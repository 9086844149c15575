//! Procedural scenes with exact segmentation and depth ground truth.
//!
//! Every scene is a textured background plane with 1 to 5 textured shapes in
//! front of it. Depth is an affine plane per object, so occlusion is resolved
//! per pixel with a depth test and the mask and depth maps agree by
//! construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Word for every class the generator knows, in class-index order.
pub const CLASS_WORDS: [&str; 12] =
    ["wall", "floor", "sky", "table", "chair", "lamp", "door", "window", "plant", "rug", "shelf", "bed"];

/// Non-class words used by captions.
pub const CAPTION_WORDS: [&str; 4] = ["a", "photo", "of", "and"];

pub const IGNORE_LABEL: u8 = 255;
pub const MIN_DEPTH: f32 = 0.5;
pub const MAX_DEPTH: f32 = 10.0;

/// Classes that may fill the background; everything else is an object class.
const BACKGROUND_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Flat,
    HStripes,
    VStripes,
    Checker,
    Dots,
    Diagonal,
}

/// Base color and texture per class. Classes come in pairs that share a base
/// color and differ only in texture.
const APPEARANCE: [([f32; 3], Texture); 12] = [
    ([0.75, 0.70, 0.60], Texture::Flat),
    ([0.55, 0.40, 0.30], Texture::HStripes),
    ([0.50, 0.70, 0.90], Texture::Flat),
    ([0.75, 0.70, 0.60], Texture::Checker),
    ([0.55, 0.40, 0.30], Texture::VStripes),
    ([0.50, 0.70, 0.90], Texture::Dots),
    ([0.60, 0.50, 0.70], Texture::Diagonal),
    ([0.60, 0.50, 0.70], Texture::Checker),
    ([0.30, 0.60, 0.30], Texture::Dots),
    ([0.30, 0.60, 0.30], Texture::HStripes),
    ([0.80, 0.50, 0.50], Texture::VStripes),
    ([0.80, 0.50, 0.50], Texture::Flat),
];

/// The first `k` classes of [`CLASS_WORDS`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    words: Vec<String>,
}

impl Palette {
    pub fn new(k: usize) -> Result<Self> {
        if !(6..=CLASS_WORDS.len()).contains(&k) {
            return Err(Error::Config(format!("palette size must be in 6..=12, got {k}")));
        }
        Ok(Palette { words: CLASS_WORDS[..k].iter().map(|w| w.to_string()).collect() })
    }

    /// Palette from explicit words, which must be a prefix of [`CLASS_WORDS`].
    pub fn from_words(words: &[String]) -> Result<Self> {
        let p = Palette::new(words.len())?;
        if p.words != words {
            return Err(Error::Config(format!("unknown palette {words:?}")));
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u8) -> &str {
        &self.words[id as usize]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u8> {
        self.words.iter().position(|w| w == word).map(|i| i as u8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Disk { cx: f32, cy: f32, r: f32 },
    Triangle { pts: [(f32, f32); 3] },
}

impl Shape {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Triangle { pts } => {
                let edge = |(ax, ay): (f32, f32), (bx, by): (f32, f32)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d0 = edge(pts[0], pts[1]);
                let d1 = edge(pts[1], pts[2]);
                let d2 = edge(pts[2], pts[0]);
                let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(neg && pos)
            }
        }
    }
}

/// `depth = a·u + b·v + c` over normalized coordinates `u, v ∈ [0, 1)`,
/// clamped to `[MIN_DEPTH, MAX_DEPTH]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub a: f32,
    pub b: f32,
    pub c: f32,
}

impl Plane {
    pub fn depth_at(&self, u: f32, v: f32) -> f32 {
        (self.a * u + self.b * v + self.c).clamp(MIN_DEPTH, MAX_DEPTH)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class: u8,
    pub shape: Shape,
    pub color: [f32; 3],
    pub plane: Plane,
}

/// Everything needed to render one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub background: u8,
    pub background_color: [f32; 3],
    pub background_depth: f32,
    pub objects: Vec<SceneObject>,
}

/// One rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`, quantized to 8-bit levels.
    pub image: Tensor<f32>,
    /// Class index per pixel, row-major `H × W`.
    pub mask: Vec<u8>,
    /// Positive depth per pixel.
    pub depth: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// Class ids present in the mask, ascending.
    pub classes: Vec<u8>,
    pub caption: String,
}

impl Sample {
    pub fn class_words(&self, palette: &Palette) -> Vec<String> {
        self.classes.iter().map(|&c| palette.word(c).to_string()).collect()
    }
}

fn jitter<R: Rng>(base: [f32; 3], amount: f32, rng: &mut R) -> [f32; 3] {
    base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn random_shape<R: Rng>(size: f32, rng: &mut R) -> Shape {
    let ext = rng.random_range(0.2 * size..0.6 * size);
    let cx = rng.random_range(0.1 * size..0.9 * size);
    let cy = rng.random_range(0.1 * size..0.9 * size);
    match rng.random_range(0..3) {
        0 => {
            let aspect = rng.random_range(0.6f32..1.6);
            let (hw, hh) = (0.5 * ext * aspect.sqrt(), 0.5 * ext / aspect.sqrt());
            Shape::Rect { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh }
        }
        1 => Shape::Disk { cx, cy, r: 0.5 * ext },
        _ => {
            let rot = rng.random_range(0.0..std::f32::consts::TAU);
            let r = 0.6 * ext;
            let pts = [0.0f32, 1.0, 2.0].map(|k| {
                let a = rot + k * std::f32::consts::TAU / 3.0;
                (cx + r * a.cos(), cy + r * a.sin())
            });
            Shape::Triangle { pts }
        }
    }
}

/// Draws a scene layout. Class `seed % palette.len()` is always visible: it
/// fills the background or is the nearest object.
pub fn generate_scene(seed: u64, palette: &Palette, size: usize) -> Result<SceneSpec> {
    if size == 0 || !size.is_multiple_of(64) {
        return Err(Error::shape("generate_scene", format!("canvas size {size} is not a multiple of 64")));
    }
    let k = palette.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let guaranteed = (seed % k as u64) as u8;
    let background = if (guaranteed as usize) < BACKGROUND_CLASSES {
        guaranteed
    } else {
        rng.random_range(0..BACKGROUND_CLASSES as u8)
    };
    let n_objects = rng.random_range(1..=5usize);
    let sz = size as f32;
    let mut objects = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let forced = i == 0 && guaranteed as usize >= BACKGROUND_CLASSES;
        let class = if forced { guaranteed } else { rng.random_range(BACKGROUND_CLASSES as u8..k as u8) };
        let shape = random_shape(sz, &mut rng);
        let color = jitter(APPEARANCE[class as usize].0, 0.12, &mut rng);
        // Slopes move a plane by at most ±0.4, so the forced object (c ≤ 1.1)
        // stays in front of every other object (c ≥ 2).
        let a = rng.random_range(-0.2f32..=0.2);
        let b = rng.random_range(-0.2f32..=0.2);
        let c = if forced { rng.random_range(0.9f32..=1.1) } else { rng.random_range(2.0f32..=7.0) };
        objects.push(SceneObject { class, shape, color, plane: Plane { a, b, c } });
    }
    Ok(SceneSpec {
        seed,
        size,
        background,
        background_color: jitter(APPEARANCE[background as usize].0, 0.12, &mut rng),
        background_depth: rng.random_range(7.5f32..=MAX_DEPTH),
        objects,
    })
}

fn texture_gain(tex: Texture, x: usize, y: usize) -> f32 {
    let on = match tex {
        Texture::Flat => return 1.0,
        Texture::HStripes => (y / 2).is_multiple_of(2),
        Texture::VStripes => (x / 2).is_multiple_of(2),
        Texture::Checker => ((x / 3) + (y / 3)).is_multiple_of(2),
        Texture::Dots => x % 4 < 2 && y % 4 < 2,
        Texture::Diagonal => ((x + y) / 2).is_multiple_of(2),
    };
    if on {
        1.15
    } else {
        0.85
    }
}

/// Renders a scene with a per-pixel depth test.
pub fn render(spec: &SceneSpec, palette: &Palette) -> Sample {
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x05EE_D0F0_015E);
    let mut mask = vec![spec.background; n * n];
    let mut depth = vec![spec.background_depth; n * n];
    let mut owner: Vec<Option<usize>> = vec![None; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let (u, v) = (x as f32 / n as f32, y as f32 / n as f32);
            let i = y * n + x;
            for (oi, o) in spec.objects.iter().enumerate() {
                if o.shape.contains(px, py) {
                    let d = o.plane.depth_at(u, v);
                    if d < depth[i] {
                        depth[i] = d;
                        mask[i] = o.class;
                        owner[i] = Some(oi);
                    }
                }
            }
        }
    }
    let mut image = vec![0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let (color, tex) = match owner[i] {
                Some(oi) => (spec.objects[oi].color, APPEARANCE[spec.objects[oi].class as usize].1),
                None => (spec.background_color, APPEARANCE[spec.background as usize].1),
            };
            let gain = texture_gain(tex, x, y);
            for ch in 0..3 {
                let noise = rng.random_range(-0.03f32..=0.03);
                let v = (color[ch] * gain + noise).clamp(0.0, 1.0);
                image[ch * n * n + i] = (v * 255.0).round() / 255.0;
            }
        }
    }
    let mut area = vec![0usize; palette.len()];
    for &m in &mask {
        area[m as usize] += 1;
    }
    let classes: Vec<u8> = (0..palette.len() as u8).filter(|&c| area[c as usize] > 0).collect();
    let caption = caption_for(&classes, palette);
    Sample {
        image: Tensor::new(&[3, n, n], image).expect("image buffer matches its shape"),
        mask,
        depth,
        height: n,
        width: n,
        classes,
        caption,
    }
}

/// "a photo of w1 and w2 ... " with class words in class-index order, each
/// word followed by one space.
fn caption_for(classes: &[u8], palette: &Palette) -> String {
    let mut s = String::from("a photo of ");
    for (i, &c) in classes.iter().enumerate() {
        if i > 0 {
            s.push_str("and ");
        }
        s.push_str(palette.word(c));
        s.push(' ');
    }
    s
}

pub fn generate_sample(seed: u64, palette: &Palette, size: usize) -> Result<Sample> {
    Ok(render(&generate_scene(seed, palette, size)?, palette))
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Split sizes for `n` samples by largest remainder; each is within one
/// sample of `fraction · n` and they sum to `n`.
pub fn split_sizes(n: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    Ok(sizes)
}

/// Conventional split names by position.
pub fn split_name(index: usize) -> String {
    match index {
        0 => "train".into(),
        1 => "val".into(),
        2 => "test".into(),
        i => format!("split{i}"),
    }
}
