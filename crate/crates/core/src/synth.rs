//! Synthetic "nuclei blob" scenes with box annotations, augmentation, and
//! the on-disk dataset format (PNG images plus a JSON-lines annotation file).
//!
//! Targets are filled ellipses. Clutter consists of rings and streaks drawn
//! in the same stain colour, so a detector has to learn shape rather than
//! colour to reject them.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::geometry::BBox;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const ANNOTATION_FILE: &str = "annotations.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Inclusive range of target objects per image.
    pub object_count: [usize; 2],
    /// Range of the major semi-axis in pixels.
    pub radius: [f64; 2],
    /// Range of ellipse eccentricity in `[0, 1)`.
    pub eccentricity: [f64; 2],
    /// Largest IoU allowed between two target boxes.
    pub overlap_allowance: f64,
    pub foreground_rgb: [f64; 3],
    pub background_rgb: [f64; 3],
    /// Per-object colour jitter (standard deviation).
    pub object_color_std: f64,
    /// Per-pixel noise (standard deviation).
    pub pixel_noise_std: f64,
    /// Inclusive range of distractor shapes per image.
    pub clutter_count: [usize; 2],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            object_count: [2, 5],
            radius: [4.0, 8.0],
            eccentricity: [0.0, 0.75],
            overlap_allowance: 0.05,
            foreground_rgb: [0.36, 0.22, 0.52],
            background_rgb: [0.90, 0.72, 0.82],
            object_color_std: 0.05,
            pixel_noise_std: 0.06,
            clutter_count: [1, 4],
        }
    }
}

impl SceneSpec {
    /// Scenes with clutter only, for false-positive measurements.
    pub fn negative_only(&self) -> Self {
        Self {
            object_count: [0, 0],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ordered = |r: [f64; 2]| r[0] <= r[1];
        if self.image_size < 8 {
            return Err("image_size must be at least 8".into());
        }
        if self.object_count[0] > self.object_count[1] || self.clutter_count[0] > self.clutter_count[1] {
            return Err("count ranges must be ordered [min, max]".into());
        }
        if !ordered(self.radius) || self.radius[0] < 1.0 {
            return Err("radius range must be ordered and >= 1".into());
        }
        if !ordered(self.eccentricity) || self.eccentricity[0] < 0.0 || self.eccentricity[1] >= 1.0 {
            return Err("eccentricity range must lie in [0, 1)".into());
        }
        if 2.0 * self.radius[1] + 2.0 > self.image_size as f64 {
            return Err("objects do not fit in the image".into());
        }
        Ok(())
    }
}

/// An image `[3, H, W]` in `[0, 1]` with its target boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub boxes: Vec<BBox<T>>,
}

impl<T: Real> AnnotatedImage<T> {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Normalised radius of a point; `<= 1` inside the ellipse.
    pub fn level(&self, px: f64, py: f64) -> f64 {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        (u * u + v * v).sqrt()
    }

    /// Tight axis-aligned bounds.
    pub fn bbox(&self) -> BBox<f64> {
        let (s, c) = self.theta.sin_cos();
        let hw = (self.a * self.a * c * c + self.b * self.b * s * s).sqrt();
        let hh = (self.a * self.a * s * s + self.b * self.b * c * c).sqrt();
        BBox::new(self.cx - hw, self.cy - hh, 2.0 * hh, 2.0 * hw)
    }
}

/// Ground-truth geometry of a generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub targets: Vec<Ellipse>,
}

fn image_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn count(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

const PLACEMENT_RETRIES: usize = 200;

fn place_targets(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Ellipse>, DataError> {
    let size = spec.image_size as f64;
    let n = count(rng, spec.object_count);
    let mut out: Vec<Ellipse> = Vec::with_capacity(n);
    for k in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let a = uniform(rng, spec.radius);
            let e = uniform(rng, spec.eccentricity);
            let b = (a * (1.0 - e * e).sqrt()).max(1.5);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let probe = Ellipse { cx: 0.0, cy: 0.0, a, b, theta }.bbox();
            let (hw, hh) = (probe.w / 2.0, probe.h / 2.0);
            let cx = rng.random_range(hw + 0.5..size - hw - 0.5);
            let cy = rng.random_range(hh + 0.5..size - hh - 0.5);
            let cand = Ellipse { cx, cy, a, b, theta };
            let bb = cand.bbox();
            if out.iter().all(|o| o.bbox().iou(&bb) <= spec.overlap_allowance) {
                out.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            if k < spec.object_count[0] {
                return Err(DataError::Infeasible(format!(
                    "could not place object {} of {} within overlap {} after {PLACEMENT_RETRIES} tries",
                    k + 1,
                    spec.object_count[0],
                    spec.overlap_allowance
                )));
            }
            break;
        }
    }
    Ok(out)
}

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, rgb: [f64; 3], alpha: f64) {
        let p = &mut self.px[y * self.size + x];
        for c in 0..3 {
            p[c] = p[c] * (1.0 - alpha) + rgb[c] * alpha;
        }
    }

    /// Paints pixels whose centre satisfies `inside`, within `bounds`.
    fn fill(&mut self, bounds: BBox<f64>, rgb: [f64; 3], alpha: f64, inside: impl Fn(f64, f64) -> bool) {
        let s = self.size as f64;
        let x0 = bounds.x.floor().clamp(0.0, s) as usize;
        let x1 = bounds.right().ceil().clamp(0.0, s) as usize;
        let y0 = bounds.y.floor().clamp(0.0, s) as usize;
        let y1 = bounds.bottom().ceil().clamp(0.0, s) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.blend(x, y, rgb, alpha);
                }
            }
        }
    }
}

fn jitter_rgb(rng: &mut ChaCha8Rng, base: [f64; 3], std: f64) -> [f64; 3] {
    let n = Normal::new(0.0, std.max(1e-12)).expect("std");
    let shift = n.sample(rng);
    std::array::from_fn(|c| (base[c] + shift + 0.5 * n.sample(rng)).clamp(0.0, 1.0))
}

fn draw_clutter(spec: &SceneSpec, rng: &mut ChaCha8Rng, canvas: &mut Canvas, targets: &[Ellipse]) {
    let size = spec.image_size as f64;
    let n = count(rng, spec.clutter_count);
    let target_boxes: Vec<BBox<f64>> = targets.iter().map(|e| e.bbox()).collect();
    for _ in 0..n {
        for _ in 0..PLACEMENT_RETRIES {
            let rgb = jitter_rgb(rng, spec.foreground_rgb, spec.object_color_std);
            if rng.random_bool(0.5) {
                // ring: an ellipse outline of target size
                let a = uniform(rng, spec.radius) * 1.1;
                let b = a * rng.random_range(0.7..1.0);
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let probe = Ellipse { cx: 0.0, cy: 0.0, a, b, theta }.bbox();
                let cx = rng.random_range(probe.w / 2.0..size - probe.w / 2.0);
                let cy = rng.random_range(probe.h / 2.0..size - probe.h / 2.0);
                let ring = Ellipse { cx, cy, a, b, theta };
                let bb = ring.bbox();
                if target_boxes.iter().any(|t| t.intersection(&bb) > 0.0) {
                    continue;
                }
                let thickness = 1.3 / b;
                canvas.fill(bb, rgb, 0.9, |x, y| {
                    let l = ring.level(x, y);
                    l <= 1.0 && l >= 1.0 - thickness
                });
            } else {
                // streak: a thin line segment
                let len = rng.random_range(2.5 * spec.radius[0]..3.0 * spec.radius[1]);
                let ang = rng.random_range(0.0..std::f64::consts::PI);
                let (dx, dy) = (0.5 * len * ang.cos(), 0.5 * len * ang.sin());
                let cx = rng.random_range(dx.abs()..(size - dx.abs()).max(dx.abs() + 1e-9));
                let cy = rng.random_range(dy.abs()..(size - dy.abs()).max(dy.abs() + 1e-9));
                let bb = BBox::from_corners(cx - dx.abs() - 1.0, cy - dy.abs() - 1.0, cx + dx.abs() + 1.0, cy + dy.abs() + 1.0);
                if target_boxes.iter().any(|t| t.intersection(&bb) > 0.0) {
                    continue;
                }
                let half_thick = rng.random_range(0.6..1.1);
                let (ux, uy) = (ang.cos(), ang.sin());
                canvas.fill(bb, rgb, 0.9, |x, y| {
                    let (rx, ry) = (x - cx, y - cy);
                    let along = rx * ux + ry * uy;
                    let across = -rx * uy + ry * ux;
                    along.abs() <= len / 2.0 && across.abs() <= half_thick
                });
            }
            break;
        }
    }
}

/// Renders one scene; the result depends only on `(spec, seed)`.
pub fn generate_scene<T: Real>(
    spec: &SceneSpec,
    seed: u64,
    id: String,
) -> Result<(AnnotatedImage<T>, SceneLayout), DataError> {
    spec.validate().map_err(DataError::Infeasible)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let targets = place_targets(spec, &mut rng)?;

    let noise = Normal::new(0.0, spec.pixel_noise_std.max(1e-12)).expect("std");
    let bg = jitter_rgb(&mut rng, spec.background_rgb, spec.object_color_std * 0.5);
    let mut canvas = Canvas {
        size,
        px: vec![bg; size * size],
    };
    draw_clutter(spec, &mut rng, &mut canvas, &targets);
    for e in &targets {
        let rgb = jitter_rgb(&mut rng, spec.foreground_rgb, spec.object_color_std);
        let e = *e;
        canvas.fill(e.bbox(), rgb, 1.0, |x, y| e.level(x, y) <= 1.0);
    }

    let mut data = vec![T::zero(); 3 * size * size];
    for (i, p) in canvas.px.iter().enumerate() {
        for c in 0..3 {
            let v = (p[c] + noise.sample(&mut rng)).clamp(0.0, 1.0);
            data[c * size * size + i] = T::lit(v);
        }
    }
    let image = Tensor::new(vec![3, size, size], data).expect("image shape");
    let boxes = targets.iter().map(|e| e.bbox().cast()).collect();
    Ok((AnnotatedImage { id, image, boxes }, SceneLayout { targets }))
}

/// `n_images` scenes, image `i` seeded from `seed` and `i`.
pub fn generate_dataset<T: Real>(
    spec: &SceneSpec,
    n_images: usize,
    seed: u64,
) -> Result<Vec<AnnotatedImage<T>>, DataError> {
    (0..n_images)
        .map(|i| generate_scene(spec, image_seed(seed, i), format!("img_{i:05}")).map(|(img, _)| img))
        .collect()
}

/// Colour-jitter strengths and flip / jitter probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift bound, in turns.
    pub hue: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            jitter_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_shift: f64,
}

pub fn flip_horizontal<T: Real>(img: &AnnotatedImage<T>) -> AnnotatedImage<T> {
    let (h, w) = (img.height(), img.width());
    let src = img.image.data();
    let mut data = src.to_vec();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data[(c * h + y) * w + x] = src[(c * h + y) * w + (w - 1 - x)];
            }
        }
    }
    let width = T::from_usize_lossy(w);
    AnnotatedImage {
        id: img.id.clone(),
        image: Tensor::new(img.image.shape().to_vec(), data).expect("same shape"),
        boxes: img
            .boxes
            .iter()
            .map(|b| BBox::new(width - b.x - b.w, b.y, b.h, b.w))
            .collect(),
    }
}

pub fn flip_vertical<T: Real>(img: &AnnotatedImage<T>) -> AnnotatedImage<T> {
    let (h, w) = (img.height(), img.width());
    let src = img.image.data();
    let mut data = src.to_vec();
    for c in 0..3 {
        for y in 0..h {
            let (dst, from) = ((c * h + y) * w, (c * h + (h - 1 - y)) * w);
            data[dst..dst + w].copy_from_slice(&src[from..from + w]);
        }
    }
    let height = T::from_usize_lossy(h);
    AnnotatedImage {
        id: img.id.clone(),
        image: Tensor::new(img.image.shape().to_vec(), data).expect("same shape"),
        boxes: img
            .boxes
            .iter()
            .map(|b| BBox::new(b.x, height - b.y - b.h, b.h, b.w))
            .collect(),
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Brightness, contrast, saturation and hue adjustments; boxes untouched.
pub fn color_jitter<T: Real>(img: &AnnotatedImage<T>, p: JitterParams) -> AnnotatedImage<T> {
    let plane = img.height() * img.width();
    let src = img.image.data();
    let mut px: Vec<[f64; 3]> = (0..plane)
        .map(|i| std::array::from_fn(|c| src[c * plane + i].as_f64() * p.brightness))
        .collect();
    let gray = |q: &[f64; 3]| 0.299 * q[0] + 0.587 * q[1] + 0.114 * q[2];
    let mean = px.iter().map(gray).sum::<f64>() / plane.max(1) as f64;
    for q in px.iter_mut() {
        for c in q.iter_mut() {
            *c = ((*c - mean) * p.contrast + mean).clamp(0.0, 1.0);
        }
        let g = gray(q);
        for c in q.iter_mut() {
            *c = ((*c - g) * p.saturation + g).clamp(0.0, 1.0);
        }
        if p.hue_shift != 0.0 {
            let mut hsv = rgb_to_hsv(*q);
            hsv[0] += p.hue_shift;
            *q = hsv_to_rgb(hsv).map(|v| v.clamp(0.0, 1.0));
        }
    }
    let mut data = vec![T::zero(); 3 * plane];
    for (i, q) in px.iter().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::lit(q[c]);
        }
    }
    AnnotatedImage {
        id: img.id.clone(),
        image: Tensor::new(img.image.shape().to_vec(), data).expect("same shape"),
        boxes: img.boxes.clone(),
    }
}

/// Random flips and colour jitter, a pure function of `(img, seed, cfg)`.
pub fn augment_with<T: Real>(img: &AnnotatedImage<T>, seed: u64, cfg: &AugmentConfig) -> AnnotatedImage<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hflip = rng.random_bool(cfg.flip_prob);
    let vflip = rng.random_bool(cfg.flip_prob);
    let jitter = rng.random_bool(cfg.jitter_prob);
    let factor = |rng: &mut ChaCha8Rng, s: f64| if s > 0.0 { rng.random_range(1.0 - s..1.0 + s) } else { 1.0 };
    let params = JitterParams {
        brightness: factor(&mut rng, cfg.brightness),
        contrast: factor(&mut rng, cfg.contrast),
        saturation: factor(&mut rng, cfg.saturation),
        hue_shift: if cfg.hue > 0.0 {
            rng.random_range(-cfg.hue..cfg.hue)
        } else {
            0.0
        },
    };
    let mut out = img.clone();
    if hflip {
        out = flip_horizontal(&out);
    }
    if vflip {
        out = flip_vertical(&out);
    }
    if jitter {
        out = color_jitter(&out, params);
    }
    out
}

pub fn augment<T: Real>(img: &AnnotatedImage<T>, seed: u64) -> AnnotatedImage<T> {
    augment_with(img, seed, &AugmentConfig::default())
}

/// One line of the annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    /// Image path relative to the annotation file.
    pub image: String,
    /// Boxes as `[x, y, h, w]`.
    pub boxes: Vec<[f64; 4]>,
}

impl AnnotationRecord {
    pub fn bboxes<T: Real>(&self) -> Vec<BBox<T>> {
        self.boxes
            .iter()
            .map(|b| BBox::new(T::lit(b[0]), T::lit(b[1]), T::lit(b[2]), T::lit(b[3])))
            .collect()
    }

    pub fn from_boxes<T: Real>(image: String, boxes: &[BBox<T>]) -> Self {
        Self {
            image,
            boxes: boxes
                .iter()
                .map(|b| [b.x.as_f64(), b.y.as_f64(), b.h.as_f64(), b.w.as_f64()])
                .collect(),
        }
    }
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<(), DataError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| DataError::Malformed { line: 0, msg: e.to_string() })?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Strict parse: unknown fields and malformed lines are rejected with their
/// 1-based line number. Blank lines are skipped.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, DataError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if let Some(b) = rec.boxes.iter().find(|b| !(b[2] > 0.0 && b[3] > 0.0) || b.iter().any(|v| !v.is_finite())) {
            return Err(DataError::Malformed {
                line: i + 1,
                msg: format!("invalid box {b:?}"),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn save_png<T: Real>(path: &Path, image: &Tensor<T>) -> Result<(), DataError> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(DataError::Image(format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        *px = image::Rgb(std::array::from_fn(|c| to_u8(d[c * plane + i].as_f64())));
    }
    buf.save(path).map_err(|e| DataError::Image(e.to_string()))
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_png<T: Real>(path: &Path) -> Result<Tensor<T>, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::lit(px.0[c] as f64 / 255.0);
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("image shape"))
}

/// Writes `images/<id>.png` plus the annotation file under `dir`.
pub fn write_dataset<T: Real>(dir: &Path, images: &[AnnotatedImage<T>]) -> Result<(), DataError> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    let mut records = Vec::with_capacity(images.len());
    for img in images {
        let rel = format!("{IMAGE_DIR}/{}.png", img.id);
        save_png(&dir.join(&rel), &img.image)?;
        records.push(AnnotationRecord::from_boxes(rel, &img.boxes));
    }
    save_annotations(&dir.join(ANNOTATION_FILE), &records)
}

pub fn read_dataset<T: Real>(dir: &Path) -> Result<Vec<AnnotatedImage<T>>, DataError> {
    load_annotations(&dir.join(ANNOTATION_FILE))?
        .into_iter()
        .map(|r| {
            let image = load_png(&dir.join(&r.image))?;
            let id = Path::new(&r.image)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| r.image.clone());
            Ok(AnnotatedImage {
                id,
                boxes: r.bboxes(),
                image,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_images_is_empty() {
        assert!(generate_dataset::<f64>(&SceneSpec::default(), 0, 1).unwrap().is_empty());
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = SceneSpec::default();
        let a = generate_dataset::<f64>(&spec, 3, 42).unwrap();
        let b = generate_dataset::<f64>(&spec, 3, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset::<f64>(&spec, 3, 43).unwrap());
    }

    #[test]
    fn generated_boxes_are_valid() {
        let spec = SceneSpec::default();
        for img in generate_dataset::<f64>(&spec, 20, 5).unwrap() {
            assert!(img.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(img.boxes.len() >= spec.object_count[0]);
            for b in &img.boxes {
                assert!(b.h >= 2.0 && b.w >= 2.0);
                assert!(b.x >= 0.0 && b.y >= 0.0 && b.right() <= 64.0 && b.bottom() <= 64.0);
            }
        }
    }

    #[test]
    fn ellipse_pixels_lie_inside_their_box() {
        let spec = SceneSpec::default();
        for seed in 0..10 {
            let (_, layout) = generate_scene::<f64>(&spec, seed, "x".into()).unwrap();
            for e in &layout.targets {
                let bb = e.bbox();
                let mut inside = 0;
                for y in 0..spec.image_size {
                    for x in 0..spec.image_size {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        if e.level(px, py) <= 1.0 {
                            inside += 1;
                            assert!(px >= bb.x && px <= bb.right() && py >= bb.y && py <= bb.bottom());
                        }
                    }
                }
                assert!(inside > 0);
            }
        }
    }

    #[test]
    fn infeasible_overlap_is_reported() {
        let spec = SceneSpec {
            image_size: 16,
            object_count: [12, 12],
            radius: [6.0, 6.5],
            overlap_allowance: 0.0,
            ..SceneSpec::default()
        };
        let err = generate_dataset::<f64>(&spec, 1, 0).unwrap_err();
        assert!(matches!(err, DataError::Infeasible(_)), "{err}");
    }

    fn sample() -> AnnotatedImage<f64> {
        generate_dataset::<f64>(&SceneSpec::default(), 1, 9).unwrap().remove(0)
    }

    #[test]
    fn double_flip_is_identity() {
        let img = sample();
        for back in [flip_horizontal(&flip_horizontal(&img)), flip_vertical(&flip_vertical(&img))] {
            assert_eq!(back.image, img.image);
            for (a, b) in back.boxes.iter().zip(&img.boxes) {
                for (u, v) in [(a.x, b.x), (a.y, b.y), (a.h, b.h), (a.w, b.w)] {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn horizontal_flip_box_mapping() {
        let img = AnnotatedImage {
            id: "t".into(),
            image: Tensor::zeros(vec![3, 8, 10]),
            boxes: vec![BBox::new(1.0, 2.0, 3.0, 4.0)],
        };
        assert_eq!(flip_horizontal(&img).boxes, vec![BBox::new(5.0, 2.0, 3.0, 4.0)]);
        assert_eq!(flip_vertical(&img).boxes, vec![BBox::new(1.0, 3.0, 3.0, 4.0)]);
    }

    #[test]
    fn flip_moves_pixels_with_boxes() {
        let mut data = vec![0.0; 3 * 4 * 6];
        data[6 + 1] = 1.0; // channel 0, row 1, col 1
        let img = AnnotatedImage {
            id: "t".into(),
            image: Tensor::new(vec![3, 4, 6], data).unwrap(),
            boxes: vec![BBox::new(1.0, 1.0, 1.0, 1.0)],
        };
        let f = flip_horizontal(&img);
        assert_eq!(f.image.data()[6 + 4], 1.0);
        assert_eq!(f.boxes[0], BBox::new(4.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn jitter_leaves_boxes_and_range() {
        let img = sample();
        let p = JitterParams {
            brightness: 1.2,
            contrast: 0.8,
            saturation: 1.15,
            hue_shift: 0.04,
        };
        let j = color_jitter(&img, p);
        assert_eq!(j.boxes, img.boxes);
        assert_ne!(j.image, img.image);
        assert!(j.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn neutral_jitter_is_identity() {
        let img = sample();
        let p = JitterParams {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue_shift: 0.0,
        };
        let j = color_jitter(&img, p);
        for (a, b) in j.image.data().iter().zip(img.image.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hsv_roundtrip() {
        for rgb in [[0.2, 0.5, 0.9], [0.9, 0.1, 0.1], [0.3, 0.3, 0.3], [0.0, 1.0, 0.5]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn augment_is_deterministic_and_keeps_boxes_valid() {
        let img = sample();
        for seed in 0..16 {
            let a = augment(&img, seed);
            assert_eq!(a, augment(&img, seed));
            assert_eq!(a.boxes.len(), img.boxes.len());
            for b in &a.boxes {
                assert!(b.h > 0.0 && b.w > 0.0 && b.x >= 0.0 && b.y >= 0.0);
                assert!(b.right() <= 64.0 + 1e-12 && b.bottom() <= 64.0 + 1e-12);
            }
        }
    }

    #[test]
    fn annotation_roundtrip_and_strictness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let recs = vec![
            AnnotationRecord {
                image: "images/empty.png".into(),
                boxes: vec![],
            },
            AnnotationRecord {
                image: "images/b.png".into(),
                boxes: vec![[0.1, 2.25, 3.0000001, 4.5], [10.0 / 3.0, 1e-3, 7.7, 0.3], [1.0, 2.0, 3.0, 4.0]],
            },
        ];
        save_annotations(&path, &recs).unwrap();
        assert_eq!(load_annotations(&path).unwrap(), recs);

        fs::write(&path, "{\"image\": \"a.png\", \"boxes\": []}\n{\"image\": \"b.png\", \"boxes\": [], \"extra\": 1}\n").unwrap();
        let err = load_annotations(&path).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("extra"), "{err}");

        fs::write(&path, "{\"image\": \"a.png\", \"boxes\": [[1,2,0,4]]}\n").unwrap();
        assert!(load_annotations(&path).unwrap_err().to_string().contains("line 1"));
    }

    #[test]
    fn dataset_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = generate_dataset::<f64>(&SceneSpec::default(), 2, 3).unwrap();
        write_dataset(dir.path(), &imgs).unwrap();
        let back: Vec<AnnotatedImage<f64>> = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in imgs.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.boxes, b.boxes);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}
