//! Seeded synthetic dataset: colored shapes on procedural textures, with
//! pixel ground truth and a saliency stand-in.
//!
//! Every class is a (shape, color) pair; each object also carries a small
//! accent patch in a second class-specific color. Next to most objects a
//! striped "distractor" band is painted in a darkened class color, so that a
//! classifier can pick up class evidence from background pixels. Distractors
//! are never part of the ground truth or the saliency.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::proxy_gt::{ProxyLabelMap, SaliencyMap};
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 20;
pub const MIN_SIDE: usize = 32;
pub const DEFAULT_TRAIN_SIDE: usize = 64;
pub const DEFAULT_EVAL_SIDE: usize = 96;
pub const DEFAULT_SALIENCY_NOISE: f64 = 0.05;

/// Smallest visible share of the image a labeled class may have.
pub const MIN_CLASS_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Diamond,
    Cross,
}

const SHAPES: [Shape; 5] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Cross,
];

impl Shape {
    /// Membership test in units of the object radius.
    fn contains(self, dx: f64, dy: f64) -> bool {
        match self {
            Shape::Disk => dx * dx + dy * dy <= 1.0,
            Shape::Square => dx.abs() <= 0.85 && dy.abs() <= 0.85,
            Shape::Triangle => {
                // apex at the top, base at dy = 0.8
                (-1.0..=0.8).contains(&dy) && dx.abs() <= (dy + 1.0) / 1.8
            }
            Shape::Diamond => dx.abs() + dy.abs() <= 1.1,
            Shape::Cross => {
                (dx.abs() <= 0.38 && dy.abs() <= 1.0) || (dy.abs() <= 0.38 && dx.abs() <= 1.0)
            }
        }
    }
}

/// Appearance of one class (0-based index).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassStyle {
    pub shape: Shape,
    pub body: [f32; 3],
    pub accent: [f32; 3],
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

pub fn class_style(index: usize) -> ClassStyle {
    let hue = index as f64 * 0.618_033_988_749_895;
    ClassStyle {
        shape: SHAPES[index % SHAPES.len()],
        body: hsv(hue, 0.8, 0.85),
        accent: hsv(hue + 0.5, 0.5, 1.0),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub image_side: usize,
    pub seed: u64,
    pub saliency_noise: f64,
    pub distractors: bool,
}

impl SynthConfig {
    pub fn new(num_classes: usize, image_side: usize, seed: u64) -> Self {
        SynthConfig {
            num_classes,
            image_side,
            seed,
            saliency_noise: DEFAULT_SALIENCY_NOISE,
            distractors: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must lie in [2, {MAX_CLASSES}], got {}",
                self.num_classes
            )));
        }
        if self.image_side < MIN_SIDE {
            return Err(Error::Config(format!(
                "image_side must be at least {MIN_SIDE}, got {}",
                self.image_side
            )));
        }
        check_noise(self.saliency_noise)
    }
}

fn check_noise(noise: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&noise) {
        return Err(Error::Config(format!(
            "saliency noise must lie in [0, 0.5], got {noise}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Class ids (1-based, ascending).
    pub labels: Vec<u8>,
    pub gt: ProxyLabelMap,
    pub saliency: SaliencyMap,
}

impl SampleRecord {
    /// Model channel indices (`label - 1`).
    pub fn class_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize - 1).collect()
    }
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

fn sample_rng(seed: u64, index: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(index as u64);
    rng
}

const IMAGE_SALT: u64 = 0;
const SALIENCY_SALT: u64 = 0x5a11_e4c7_0000_0001;

/// Smooth random field in `[0, 1]`: bilinear interpolation of a coarse
/// random lattice with smoothstep weights.
fn value_noise(h: usize, w: usize, cell: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = (y as f64 + 0.5) / cell;
        let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = (x as f64 + 0.5) / cell;
            let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let l = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
            let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
            out.push((top * (1.0 - ty) + bot * ty) as f32);
        }
    }
    out
}

struct Object {
    class: usize,
    cx: f64,
    cy: f64,
    r: f64,
    head_dx: f64,
    head_dy: f64,
}

impl Object {
    fn covers(&self, shape: Shape, x: f64, y: f64) -> bool {
        shape.contains((x - self.cx) / self.r, (y - self.cy) / self.r)
    }

    fn in_head(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.r - self.head_dx;
        let dy = (y - self.cy) / self.r - self.head_dy;
        dx * dx + dy * dy <= 0.4 * 0.4
    }
}

struct Layout {
    objects: Vec<Object>,
    gt: Vec<u8>,
    labels: Vec<u8>,
}

fn sample_layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Layout {
    let side = cfg.image_side;
    let sf = side as f64;
    let n = side * side;
    loop {
        let count = match rng.random_range(0..10) {
            0..=4 => 1,
            5..=7 => 2,
            _ => 3,
        };
        let mut classes: Vec<usize> = Vec::with_capacity(count);
        while classes.len() < count {
            let c = rng.random_range(0..cfg.num_classes);
            if !classes.contains(&c) {
                classes.push(c);
            }
        }
        let large = rng.random_bool(0.25);
        let objects: Vec<Object> = classes
            .iter()
            .enumerate()
            .map(|(i, &class)| {
                let r = if large && i == 0 {
                    rng.random_range(0.36..0.46) * sf
                } else {
                    rng.random_range(0.12..0.22) * sf
                };
                let margin = (0.6 * r).min(sf / 2.0);
                let cx = rng.random_range(margin..=sf - margin);
                let cy = rng.random_range(margin..=sf - margin);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                Object {
                    class,
                    cx,
                    cy,
                    r,
                    head_dx: 0.45 * angle.cos(),
                    head_dy: 0.45 * angle.sin(),
                }
            })
            .collect();

        // Later objects are drawn on top.
        let mut gt = vec![0u8; n];
        for o in &objects {
            let shape = class_style(o.class).shape;
            for y in 0..side {
                for x in 0..side {
                    if o.covers(shape, x as f64 + 0.5, y as f64 + 0.5) {
                        gt[y * side + x] = o.class as u8 + 1;
                    }
                }
            }
        }
        let min_pixels = (MIN_CLASS_FRACTION * n as f64).ceil() as usize;
        let visible = objects
            .iter()
            .all(|o| gt.iter().filter(|&&g| g as usize == o.class + 1).count() >= min_pixels);
        if visible {
            let mut labels: Vec<u8> = objects.iter().map(|o| o.class as u8 + 1).collect();
            labels.sort_unstable();
            return Layout {
                objects,
                gt,
                labels,
            };
        }
    }
}

fn render(cfg: &SynthConfig, layout: &Layout, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let side = cfg.image_side;
    let n = side * side;
    let sf = side as f64;

    // Muted two-tone background texture.
    let tone = |rng: &mut ChaCha8Rng| {
        let g = rng.random_range(0.25..0.65);
        [0, 1, 2].map(|_| (g + rng.random_range(-0.08..0.08)) as f32)
    };
    let (c0, c1) = (tone(rng), tone(rng));
    let coarse = value_noise(side, side, sf / 6.0, rng);
    let fine = value_noise(side, side, sf / 20.0, rng);
    let mut img = vec![0.0f32; 3 * n];
    for i in 0..n {
        let t = 0.7 * coarse[i] + 0.3 * fine[i];
        for ch in 0..3 {
            img[ch * n + i] = c0[ch] * (1.0 - t) + c1[ch] * t;
        }
    }

    // Striped bands beside objects, tinted with the class color.
    if cfg.distractors {
        for o in &layout.objects {
            if !rng.random_bool(0.8) {
                continue;
            }
            let style = class_style(o.class);
            let below = rng.random_bool(0.5);
            let half_w = o.r * rng.random_range(0.8..1.2);
            let thick = o.r * rng.random_range(0.6..0.9);
            let gap = o.r * rng.random_range(1.4..1.8);
            let (y0, y1) = if below {
                (o.cy + gap, o.cy + gap + thick)
            } else {
                (o.cy - gap - thick, o.cy - gap)
            };
            let period = (o.r * 0.3).max(2.0);
            let dark = rng.random_range(0.75..0.95) as f32;
            for y in 0..side {
                let yc = y as f64 + 0.5;
                if yc < y0 || yc > y1 {
                    continue;
                }
                for x in 0..side {
                    let xc = x as f64 + 0.5;
                    if (xc - o.cx).abs() > half_w {
                        continue;
                    }
                    if ((xc - o.cx + half_w) / period).floor() as i64 % 2 == 0 {
                        for ch in 0..3 {
                            img[ch * n + y * side + x] = style.body[ch] * dark;
                        }
                    }
                }
            }
        }
    }

    // Objects with a mildly textured body and an accent patch.
    for o in &layout.objects {
        let style = class_style(o.class);
        let tex = value_noise(side, side, (o.r / 2.0).max(2.0), rng);
        for y in 0..side {
            for x in 0..side {
                let (xc, yc) = (x as f64 + 0.5, y as f64 + 0.5);
                if !o.covers(style.shape, xc, yc) {
                    continue;
                }
                let i = y * side + x;
                let color = if o.in_head(xc, yc) {
                    style.accent
                } else {
                    let k = 0.85 + 0.15 * tex[i];
                    style.body.map(|c| c * k)
                };
                for ch in 0..3 {
                    img[ch * n + i] = color[ch];
                }
            }
        }
    }

    // Sensor noise.
    for v in &mut img {
        *v = (*v + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, side, side], img).expect("shape matches")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with zero padding; `sigma <= 0` returns the input.
pub fn gaussian_blur(values: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let xx = x as i64 + j as i64 - r;
                if (0..w as i64).contains(&xx) {
                    acc += kv * values[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let yy = y as i64 + j as i64 - r;
                if (0..h as i64).contains(&yy) {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Blurred object union plus uniform noise in `[-noise, noise]`, clamped.
pub fn saliency_from_union(
    union: &[bool],
    h: usize,
    w: usize,
    sigma: f64,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SaliencyMap> {
    check_noise(noise)?;
    let base: Vec<f64> = union.iter().map(|&u| if u { 1.0 } else { 0.0 }).collect();
    let blurred = gaussian_blur(&base, h, w, sigma);
    let values = blurred
        .into_iter()
        .map(|v| {
            let jitter = if noise > 0.0 {
                rng.random_range(-noise..=noise)
            } else {
                0.0
            };
            (v + jitter).clamp(0.0, 1.0) as f32
        })
        .collect();
    SaliencyMap::new(h, w, values)
}

/// Saliency stand-in for a sample: σ = side / 64, noise seeded from
/// `(seed, index)`.
pub fn synthetic_saliency(
    gt: &ProxyLabelMap,
    noise: f64,
    seed: u64,
    index: usize,
) -> Result<SaliencyMap> {
    let sigma = gt.height().max(gt.width()) as f64 / 64.0;
    let mut rng = sample_rng(seed, index, SALIENCY_SALT);
    saliency_from_union(
        &gt.foreground(),
        gt.height(),
        gt.width(),
        sigma,
        noise,
        &mut rng,
    )
}

/// Generates sample `index`; independent of every other index.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> Result<SampleRecord> {
    cfg.validate()?;
    let mut rng = sample_rng(cfg.seed, index, IMAGE_SALT);
    let layout = sample_layout(cfg, &mut rng);
    let image = render(cfg, &layout, &mut rng);
    let gt = ProxyLabelMap::new(cfg.image_side, cfg.image_side, layout.gt)?;
    let saliency = synthetic_saliency(&gt, cfg.saliency_noise, cfg.seed, index)?;
    Ok(SampleRecord {
        id: sample_id(index),
        image,
        labels: layout.labels,
        gt,
        saliency,
    })
}

pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Vec<SampleRecord>> {
    (0..n).map(|i| generate_sample(cfg, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub gt: String,
    pub saliency: String,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
    pub num_classes: usize,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.json";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `n` samples under `out_dir` and returns the manifest.
///
/// Layout: `images/`, `gt/` (palette PNG, index = class id), `saliency/`
/// (grayscale PNG), `manifest.json` and `labels.json` (`{id: [class ids]}`).
pub fn gen_dataset(n: usize, cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    for sub in ["images", "gt", "saliency"] {
        create_dir(&out_dir.join(sub))?;
    }
    let side = cfg.image_side;
    let mut samples = Vec::with_capacity(n);
    let mut labels = std::collections::BTreeMap::new();
    for i in 0..n {
        let s = generate_sample(cfg, i)?;
        let entry = ManifestEntry {
            id: s.id.clone(),
            image: format!("images/{}.png", s.id),
            gt: format!("gt/{}.png", s.id),
            saliency: format!("saliency/{}.png", s.id),
            labels: s.labels.clone(),
        };
        imageio::write_rgb(
            &out_dir.join(&entry.image),
            side,
            side,
            &imageio::tensor_to_rgb(&s.image)?,
        )?;
        s.gt.save_png(&out_dir.join(&entry.gt))?;
        imageio::write_gray(
            &out_dir.join(&entry.saliency),
            side,
            side,
            &s.saliency.to_u8(),
        )?;
        labels.insert(s.id.clone(), s.labels.clone());
        samples.push(entry);
    }
    let manifest = Manifest {
        samples,
        num_classes: cfg.num_classes,
        seed: cfg.seed,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    write_json(&out_dir.join(LABELS_FILE), &labels)?;
    Ok(manifest)
}

/// A dataset read back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<SampleRecord>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let image = imageio::load_rgb(&dir.join(&e.image))?;
        let gt = ProxyLabelMap::load_png(&dir.join(&e.gt))?;
        let saliency = crate::proxy_gt::load_saliency(&dir.join(&e.saliency))?;
        if let Some(&bad) = e
            .labels
            .iter()
            .find(|&&l| l == 0 || l as usize > manifest.num_classes)
        {
            return Err(Error::format(
                dir.join(MANIFEST_FILE),
                format!(
                    "sample {}: label {bad} outside 1..={}",
                    e.id, manifest.num_classes
                ),
            ));
        }
        samples.push(SampleRecord {
            id: e.id.clone(),
            image,
            labels: e.labels.clone(),
            gt,
            saliency,
        });
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn styles_are_distinct() {
        for a in 0..MAX_CLASSES {
            for b in 0..a {
                let (sa, sb) = (class_style(a), class_style(b));
                assert!(sa.shape != sb.shape || sa.body != sb.body, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn sample_invariants() {
        let cfg = SynthConfig::new(6, 64, 3);
        for i in 0..40 {
            let s = generate_sample(&cfg, i).unwrap();
            assert!(!s.labels.is_empty() && s.labels.len() <= 3);
            let n = s.gt.labels().len() as f64;
            for &l in &s.labels {
                let share = s.gt.labels().iter().filter(|&&g| g == l).count() as f64 / n;
                assert!(share >= MIN_CLASS_FRACTION, "class {l} covers {share}");
            }
            assert!(s
                .gt
                .labels()
                .iter()
                .all(|g| *g == 0 || s.labels.contains(g)));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn samples_are_independent_of_order() {
        let cfg = SynthConfig::new(4, 48, 11);
        let all = generate(&cfg, 5).unwrap();
        assert_eq!(generate_sample(&cfg, 3).unwrap(), all[3]);
        assert_ne!(all[3].image, all[4].image);
    }

    #[test]
    fn blur_limit_is_the_binary_union() {
        let union: Vec<bool> = (0..36).map(|i| i % 7 < 3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = saliency_from_union(&union, 6, 6, 0.0, 0.0, &mut rng).unwrap();
        for (v, u) in s.values().iter().zip(&union) {
            assert_eq!(*v, if *u { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn far_background_is_bounded_by_noise() {
        let side = 64;
        let mut union = vec![false; side * side];
        for y in 0..10 {
            for x in 0..10 {
                union[y * side + x] = true;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = saliency_from_union(&union, side, side, 1.0, 0.1, &mut rng).unwrap();
        for y in 20..side {
            for x in 20..side {
                assert!(s.values()[y * side + x] <= 0.1 + 1e-7);
            }
        }
    }

    #[test]
    fn noise_range_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(saliency_from_union(&[true], 1, 1, 0.0, 0.6, &mut rng).is_err());
        let mut cfg = SynthConfig::new(3, 64, 0);
        cfg.saliency_noise = -0.1;
        assert!(cfg.validate().is_err());
        assert!(SynthConfig::new(1, 64, 0).validate().is_err());
        assert!(SynthConfig::new(3, 16, 0).validate().is_err());
    }
}
