//! Paired sketch/photo data: synthetic generation, on-disk layout, photo
//! augmentation and triplet sampling.
//!
//! On-disk layout, shared by [`load_directory`] and [`write_directory`]:
//!
//! ```text
//! root/<class_id>/photos/<instance_id>.png
//! root/<class_id>/sketches/<instance_id>_<k>.png
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Square RGB image, HWC layout, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side * 3 {
            return Err(Error::Shape(format!(
                "image of side {side} needs {} values, got {}",
                side * side * 3,
                data.len()
            )));
        }
        Ok(Self { side, data })
    }

    pub fn filled(side: usize, rgb: [f64; 3]) -> Self {
        let data = (0..side * side).flat_map(|_| rgb).collect();
        Self { side, data }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.side + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.side + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.data.chunks(3) {
            for c in 0..3 {
                m[c] += px[c];
            }
        }
        let n = (self.side * self.side) as f64;
        m.map(|v| v / n)
    }

    fn border_mean(&self) -> [f64; 3] {
        let s = self.side;
        let mut m = [0.0; 3];
        let mut n = 0.0;
        for y in 0..s {
            for x in 0..s {
                if x == 0 || y == 0 || x + 1 == s || y + 1 == s {
                    let p = self.pixel(x, y);
                    for c in 0..3 {
                        m[c] += p[c];
                    }
                    n += 1.0;
                }
            }
        }
        m.map(|v| v / n)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at integers).
    fn sample(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        let s = self.side as f64;
        if !(x >= -0.5 && y >= -0.5 && x <= s - 0.5 && y <= s - 0.5) {
            return None;
        }
        let xc = x.clamp(0.0, s - 1.0);
        let yc = y.clamp(0.0, s - 1.0);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.side - 1);
        let y1 = (y0 + 1).min(self.side - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let (a, b, c, d) = (
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
        );
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let top = a[ch] + (b[ch] - a[ch]) * fx;
            let bot = c[ch] + (d[ch] - c[ch]) * fx;
            out[ch] = top + (bot - top) * fy;
        }
        Some(out)
    }

    fn to_rgb8(&self) -> image::RgbImage {
        let s = self.side as u32;
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(s, s, bytes).expect("buffer matches dimensions")
    }

    fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        Self {
            side: img.width() as usize,
            data,
        }
    }
}

/// One photo and its (possibly empty) list of sketches.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub instance_id: String,
    pub class_id: String,
    pub photo: Image,
    pub sketches: Vec<Image>,
}

impl Instance {
    pub fn is_labelled(&self) -> bool {
        !self.sketches.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub image_size: usize,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn labelled(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(|i| i.is_labelled())
    }

    pub fn unlabelled(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(|i| !i.is_labelled())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn sketch_count(&self) -> usize {
        self.instances.iter().map(|i| i.sketches.len()).sum()
    }
}

/// Counts from [`load_directory`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadReport {
    pub labelled: usize,
    pub unlabelled: usize,
    pub skipped: usize,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "labelled = {}", self.labelled)?;
        writeln!(f, "unlabelled = {}", self.unlabelled)?;
        writeln!(f, "skipped = {}", self.skipped)
    }
}

// ---------------------------------------------------------------------------
// synthetic generation

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_instances: usize,
    pub n_classes: usize,
    pub sketches_per_instance: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Std-dev of sketch control-point noise, in pixels.
    pub stroke_jitter: f64,
}

impl SyntheticSpec {
    pub fn new(n_instances: usize, n_classes: usize, sketches_per_instance: usize, seed: u64) -> Self {
        Self {
            n_instances,
            n_classes,
            sketches_per_instance,
            seed,
            image_size: 32,
            stroke_jitter: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

/// A closed polygon plus its fill colour.
#[derive(Debug, Clone)]
pub struct Shape {
    points: Vec<[f64; 2]>,
    color: [f64; 3],
}

/// Geometry of one synthetic instance, in pixel coordinates.
#[derive(Debug, Clone)]
pub struct Layout {
    shapes: Vec<Shape>,
    background: [f64; 3],
    texture_phase: f64,
    texture_freq: f64,
}

struct ClassStyle {
    palette: Vec<[f64; 3]>,
    kinds: Vec<ShapeKind>,
    background: [f64; 3],
    texture_freq: f64,
}

fn sub_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    r
}

fn class_style(seed: u64, class: usize) -> ClassStyle {
    let mut rng = sub_rng(seed, 1, class as u64);
    let palette = (0..4)
        .map(|_| {
            let mut c = [0.0; 3];
            // one dominant channel keeps colours saturated
            let dom = rng.gen_range(0..3);
            for (ch, v) in c.iter_mut().enumerate() {
                *v = if ch == dom {
                    rng.gen_range(0.6..0.95)
                } else {
                    rng.gen_range(0.05..0.45)
                };
            }
            c
        })
        .collect();
    let all = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Triangle];
    let mut kinds: Vec<ShapeKind> = all.to_vec();
    kinds.shuffle(&mut rng);
    kinds.truncate(2);
    let tint = rng.gen_range(0.85..0.97);
    ClassStyle {
        palette,
        kinds,
        background: [tint, rng.gen_range(0.85..0.97), tint],
        texture_freq: rng.gen_range(0.5..1.5),
    }
}

fn polygon(kind: ShapeKind, center: [f64; 2], size: f64, aspect: f64, angle: f64) -> Vec<[f64; 2]> {
    let local: Vec<[f64; 2]> = match kind {
        ShapeKind::Ellipse => (0..16)
            .map(|i| {
                let t = i as f64 / 16.0 * std::f64::consts::TAU;
                [size * t.cos(), size * aspect * t.sin()]
            })
            .collect(),
        ShapeKind::Rectangle => vec![
            [-size, -size * aspect],
            [size, -size * aspect],
            [size, size * aspect],
            [-size, size * aspect],
        ],
        ShapeKind::Triangle => vec![[0.0, -size], [size, size * aspect], [-size, size * aspect]],
    };
    let (s, c) = angle.sin_cos();
    local
        .into_iter()
        .map(|[x, y]| [center[0] + c * x - s * y, center[1] + s * x + c * y])
        .collect()
}

fn instance_layout(spec: &SyntheticSpec, style: &ClassStyle, index: usize) -> Layout {
    let mut rng = sub_rng(spec.seed, 2, index as u64);
    let side = spec.image_size as f64;
    let n_shapes = rng.gen_range(2..=4);
    let shapes = (0..n_shapes)
        .map(|_| {
            let kind = style.kinds[rng.gen_range(0..style.kinds.len())];
            let center = [rng.gen_range(0.25..0.75) * side, rng.gen_range(0.25..0.75) * side];
            let size = rng.gen_range(0.12..0.28) * side;
            let aspect = rng.gen_range(0.5..1.0);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            Shape {
                points: polygon(kind, center, size, aspect, angle),
                color: style.palette[rng.gen_range(0..style.palette.len())],
            }
        })
        .collect();
    Layout {
        shapes,
        background: style.background,
        texture_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        texture_freq: style.texture_freq,
    }
}

fn inside(points: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut c = false;
    let n = points.len();
    for i in 0..n {
        let [xi, yi] = points[i];
        let [xj, yj] = points[(i + n - 1) % n];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            c = !c;
        }
    }
    c
}

fn edge_distance(points: &[[f64; 2]], x: f64, y: f64) -> f64 {
    let n = points.len();
    (0..n)
        .map(|i| {
            let [ax, ay] = points[i];
            let [bx, by] = points[(i + 1) % n];
            let (dx, dy) = (bx - ax, by - ay);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 {
                (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (px, py) = (ax + t * dx - x, ay + t * dy - y);
            (px * px + py * py).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Filled, anti-aliased, textured rendering.
fn render_photo(layout: &Layout, side: usize, noise_rng: &mut ChaCha8Rng) -> Image {
    const SS: usize = 3;
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let mut img = Image::filled(side, layout.background);
    for y in 0..side {
        for x in 0..side {
            let mut acc = [0.0; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    let mut col = layout.background;
                    for s in &layout.shapes {
                        if inside(&s.points, px, py) {
                            col = s.color;
                        }
                    }
                    for c in 0..3 {
                        acc[c] += col[c];
                    }
                }
            }
            let tex = 0.06
                * ((x as f64 * layout.texture_freq + layout.texture_phase).sin()
                    * (y as f64 * layout.texture_freq * 0.7).cos());
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = (acc[c] / (SS * SS) as f64 + tex + noise.sample(noise_rng)).clamp(0.0, 1.0);
            }
            img.set_pixel(x, y, rgb);
        }
    }
    img
}

/// Dark strokes on white along every shape outline.
pub fn render_contour(layout: &Layout, side: usize) -> Image {
    const HALF_WIDTH: f64 = 0.6;
    let mut img = Image::filled(side, [1.0; 3]);
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = layout
                .shapes
                .iter()
                .map(|s| edge_distance(&s.points, px, py))
                .fold(f64::INFINITY, f64::min);
            let ink = (1.0 - (d - HALF_WIDTH).max(0.0)).clamp(0.0, 1.0);
            let v = 1.0 - ink;
            img.set_pixel(x, y, [v; 3]);
        }
    }
    img
}

fn jittered(layout: &Layout, sigma: f64, rng: &mut ChaCha8Rng) -> Layout {
    if sigma <= 0.0 {
        return layout.clone();
    }
    let n = Normal::new(0.0, sigma).expect("positive std");
    let shapes = layout
        .shapes
        .iter()
        .map(|s| {
            let shift = [n.sample(rng), n.sample(rng)];
            Shape {
                points: s
                    .points
                    .iter()
                    .map(|p| {
                        [
                            p[0] + shift[0] + n.sample(rng),
                            p[1] + shift[1] + n.sample(rng),
                        ]
                    })
                    .collect(),
                color: s.color,
            }
        })
        .collect();
    Layout {
        shapes,
        ..layout.clone()
    }
}

/// Layouts of every instance produced by [`generate_synthetic`] with the same spec.
pub fn synthetic_layouts(spec: &SyntheticSpec) -> Vec<Layout> {
    let styles: Vec<ClassStyle> = (0..spec.n_classes.max(1))
        .map(|c| class_style(spec.seed, c))
        .collect();
    (0..spec.n_instances)
        .map(|i| instance_layout(spec, &styles[i % styles.len()], i))
        .collect()
}

/// Deterministic synthetic sketch/photo pairs.
///
/// Instance `i` belongs to class `i % n_classes`. Photos are filled,
/// textured shape compositions; sketches are jittered outlines of the same
/// composition without colour.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.sketches_per_instance < 2 {
        return Err(Error::invalid(
            "sketches_per_instance",
            "needs at least 2 sketches per instance for the intra-modal sketch triplet",
        ));
    }
    if spec.n_classes == 0 || spec.n_instances < spec.n_classes {
        return Err(Error::invalid(
            "n_instances",
            format!(
                "need n_instances >= n_classes >= 1, got {} and {}",
                spec.n_instances, spec.n_classes
            ),
        ));
    }
    if spec.image_size < 4 {
        return Err(Error::invalid("image_size", "must be at least 4"));
    }
    let side = spec.image_size;
    let layouts = synthetic_layouts(spec);
    let instances = layouts
        .iter()
        .enumerate()
        .map(|(i, layout)| {
            let mut rng = sub_rng(spec.seed, 3, i as u64);
            let photo = render_photo(layout, side, &mut rng);
            let sketches = (0..spec.sketches_per_instance)
                .map(|_| render_contour(&jittered(layout, spec.stroke_jitter, &mut rng), side))
                .collect();
            Instance {
                instance_id: format!("i{i:04}"),
                class_id: format!("c{:02}", i % spec.n_classes),
                photo,
                sketches,
            }
        })
        .collect();
    Ok(Dataset {
        image_size: side,
        instances,
    })
}

// ---------------------------------------------------------------------------
// augmentation

/// Rotation followed by a four-corner perspective warp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    /// Per-corner displacement as a fraction of the image side, in the
    /// order top-left, top-right, bottom-right, bottom-left.
    pub corner_offsets: [[f64; 2]; 4],
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        angle_deg: 0.0,
        corner_offsets: [[0.0; 2]; 4],
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let angle_deg = rng.gen_range(-45.0..=45.0);
        let mut corner_offsets = [[0.0; 2]; 4];
        for c in &mut corner_offsets {
            c[0] = rng.gen_range(-PERSPECTIVE_STRENGTH..=PERSPECTIVE_STRENGTH);
            c[1] = rng.gen_range(-PERSPECTIVE_STRENGTH..=PERSPECTIVE_STRENGTH);
        }
        Self {
            angle_deg,
            corner_offsets,
        }
    }
}

/// Maximum corner displacement of the perspective warp, fraction of side.
pub const PERSPECTIVE_STRENGTH: f64 = 0.10;

/// Solve the 3x3 homography mapping `src[i] -> dst[i]`.
fn homography(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> [f64; 9] {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let [x, y] = src[i];
        let [u, v] = dst[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gauss-Jordan with partial pivoting on the 8x8 system.
    for col in 0..8 {
        let piv = (col..8)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        let p = a[col][col];
        for j in col..9 {
            a[col][j] /= p;
        }
        for i in 0..8 {
            if i != col {
                let f = a[i][col];
                if f != 0.0 {
                    for j in col..9 {
                        a[i][j] -= f * a[col][j];
                    }
                }
            }
        }
    }
    let mut h = [0.0; 9];
    for i in 0..8 {
        h[i] = a[i][8];
    }
    h[8] = 1.0;
    h
}

/// Apply an explicit rotation + perspective warp. Out-of-frame pixels take
/// the input's border-mean colour.
pub fn structural_augment_with(photo: &Image, params: &AugmentParams) -> Image {
    let side = photo.side;
    let s = side as f64;
    let fill = photo.border_mean();
    let corners = [[0.0, 0.0], [s, 0.0], [s, s], [0.0, s]];
    let perspective = if params.corner_offsets.iter().all(|c| c == &[0.0, 0.0]) {
        None
    } else {
        let mut moved = corners;
        for (m, o) in moved.iter_mut().zip(&params.corner_offsets) {
            m[0] += o[0] * s;
            m[1] += o[1] * s;
        }
        // output -> rotated-frame coordinates
        Some(homography(&moved, &corners))
    };
    let (sin, cos) = (-params.angle_deg.to_radians()).sin_cos();
    let rotate = params.angle_deg != 0.0;
    let c = s / 2.0;
    let mut out = Image::filled(side, fill);
    for y in 0..side {
        for x in 0..side {
            let (mut u, mut v) = (x as f64 + 0.5, y as f64 + 0.5);
            if let Some(h) = &perspective {
                let w = h[6] * u + h[7] * v + h[8];
                let (nu, nv) = ((h[0] * u + h[1] * v + h[2]) / w, (h[3] * u + h[4] * v + h[5]) / w);
                u = nu;
                v = nv;
            }
            if rotate {
                let (du, dv) = (u - c, v - c);
                u = c + cos * du - sin * dv;
                v = c + sin * du + cos * dv;
            }
            if let Some(rgb) = photo.sample(u - 0.5, v - 0.5) {
                out.set_pixel(x, y, rgb.map(|p| p.clamp(0.0, 1.0)));
            }
        }
    }
    out
}

/// Random rotation in [-45, 45] degrees then a random perspective warp.
pub fn structural_augment<R: Rng + ?Sized>(photo: &Image, rng: &mut R) -> Image {
    structural_augment_with(photo, &AugmentParams::sample(rng))
}

/// Photo augmentations compared in the augmentation ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhotoAugmentation {
    Structural,
    ColorDistortion,
    PartialBlur,
    Sharpness,
}

impl PhotoAugmentation {
    pub const ALL: [PhotoAugmentation; 4] = [
        PhotoAugmentation::Structural,
        PhotoAugmentation::ColorDistortion,
        PhotoAugmentation::PartialBlur,
        PhotoAugmentation::Sharpness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhotoAugmentation::Structural => "structural",
            PhotoAugmentation::ColorDistortion => "color_distortion",
            PhotoAugmentation::PartialBlur => "partial_blur",
            PhotoAugmentation::Sharpness => "sharpness",
        }
    }

    pub fn apply<R: Rng + ?Sized>(self, photo: &Image, rng: &mut R) -> Image {
        match self {
            PhotoAugmentation::Structural => structural_augment(photo, rng),
            PhotoAugmentation::ColorDistortion => color_distort(photo, rng),
            PhotoAugmentation::PartialBlur => partial_blur(photo, rng),
            PhotoAugmentation::Sharpness => sharpness_shift(photo, rng),
        }
    }
}

fn color_distort<R: Rng + ?Sized>(photo: &Image, rng: &mut R) -> Image {
    let brightness = rng.gen_range(-0.2..0.2);
    let contrast = rng.gen_range(0.7..1.3);
    let saturation = rng.gen_range(0.5..1.5);
    let mean = photo.channel_means();
    let grand = (mean[0] + mean[1] + mean[2]) / 3.0;
    let data = photo
        .data
        .chunks(3)
        .flat_map(|px| {
            let gray = (px[0] + px[1] + px[2]) / 3.0;
            let mut o = [0.0; 3];
            for c in 0..3 {
                let sat = gray + (px[c] - gray) * saturation;
                o[c] = ((sat - grand) * contrast + grand + brightness).clamp(0.0, 1.0);
            }
            o
        })
        .collect();
    Image {
        side: photo.side,
        data,
    }
}

fn box_blur(photo: &Image) -> Image {
    let s = photo.side;
    let mut out = photo.clone();
    for y in 0..s {
        for x in 0..s {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..=(y + 1).min(s - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(s - 1) {
                    let p = photo.pixel(xx, yy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                    n += 1.0;
                }
            }
            out.set_pixel(x, y, acc.map(|v| v / n));
        }
    }
    out
}

fn partial_blur<R: Rng + ?Sized>(photo: &Image, rng: &mut R) -> Image {
    let s = photo.side;
    let blurred = box_blur(&box_blur(photo));
    let w = rng.gen_range(s / 3..=s / 2 + 1).min(s);
    let h = rng.gen_range(s / 3..=s / 2 + 1).min(s);
    let x0 = rng.gen_range(0..=s - w);
    let y0 = rng.gen_range(0..=s - h);
    let mut out = photo.clone();
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            out.set_pixel(x, y, blurred.pixel(x, y));
        }
    }
    out
}

fn sharpness_shift<R: Rng + ?Sized>(photo: &Image, rng: &mut R) -> Image {
    // factor < 1 softens, > 1 sharpens (unsharp mask)
    let factor = rng.gen_range(0.0..2.0);
    let blurred = box_blur(photo);
    let data = photo
        .data
        .iter()
        .zip(&blurred.data)
        .map(|(o, b)| (b + factor * (o - b)).clamp(0.0, 1.0))
        .collect();
    Image {
        side: photo.side,
        data,
    }
}

// ---------------------------------------------------------------------------
// triplet sampling

/// One row of a labelled triplet batch. Indices refer to the instance slice
/// the batch was sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletRow {
    /// Instance of the anchor sketch and of the positive photo.
    pub anchor: usize,
    pub anchor_sketch: usize,
    pub positive_sketch: usize,
    /// Non-matching instance supplying the negative photo and negative sketch.
    pub negative: usize,
    pub negative_sketch: usize,
}

/// Labelled batch: anchor sketch `s`, positive photo `p`, negative photo `n`,
/// sibling sketch `s+`, negative sketch `s-` and augmented positive `p^t`.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub rows: Vec<TripletRow>,
    pub augmented_photo: Vec<Image>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn anchor_sketch<'a>(&self, pool: &[&'a Instance], i: usize) -> &'a Image {
        let r = self.rows[i];
        &pool[r.anchor].sketches[r.anchor_sketch]
    }

    pub fn positive_photo<'a>(&self, pool: &[&'a Instance], i: usize) -> &'a Image {
        &pool[self.rows[i].anchor].photo
    }

    pub fn negative_photo<'a>(&self, pool: &[&'a Instance], i: usize) -> &'a Image {
        &pool[self.rows[i].negative].photo
    }

    pub fn positive_sketch<'a>(&self, pool: &[&'a Instance], i: usize) -> &'a Image {
        let r = self.rows[i];
        &pool[r.anchor].sketches[r.positive_sketch]
    }

    pub fn negative_sketch<'a>(&self, pool: &[&'a Instance], i: usize) -> &'a Image {
        let r = self.rows[i];
        &pool[r.negative].sketches[r.negative_sketch]
    }
}

/// Uniform index in `0..n` different from `exclude` (requires `n >= 2`).
fn other_index<R: Rng + ?Sized>(n: usize, exclude: usize, rng: &mut R) -> usize {
    let j = rng.gen_range(0..n - 1);
    if j >= exclude {
        j + 1
    } else {
        j
    }
}

/// Build triplet rows for the given anchors. Augmentation draws from `aug_rng`
/// so that sampling and augmentation streams stay independent.
pub fn triplet_batch_for<R: Rng + ?Sized, A: Rng + ?Sized>(
    pool: &[&Instance],
    anchors: &[usize],
    augmentation: PhotoAugmentation,
    rng: &mut R,
    aug_rng: &mut A,
) -> Result<TripletBatch> {
    if pool.len() < 2 {
        return Err(Error::Data(format!(
            "triplet sampling needs at least 2 instances, got {}",
            pool.len()
        )));
    }
    if let Some(bad) = pool.iter().find(|i| i.sketches.is_empty()) {
        return Err(Error::Data(format!(
            "instance {} has no sketches",
            bad.instance_id
        )));
    }
    let mut rows = Vec::with_capacity(anchors.len());
    let mut augmented_photo = Vec::with_capacity(anchors.len());
    for &a in anchors {
        let n_sk = pool[a].sketches.len();
        let anchor_sketch = rng.gen_range(0..n_sk);
        let positive_sketch = if n_sk >= 2 {
            other_index(n_sk, anchor_sketch, rng)
        } else {
            anchor_sketch
        };
        let negative = other_index(pool.len(), a, rng);
        let negative_sketch = rng.gen_range(0..pool[negative].sketches.len());
        rows.push(TripletRow {
            anchor: a,
            anchor_sketch,
            positive_sketch,
            negative,
            negative_sketch,
        });
        augmented_photo.push(augmentation.apply(&pool[a].photo, aug_rng));
    }
    Ok(TripletBatch {
        rows,
        augmented_photo,
    })
}

/// Random labelled batch: anchors uniform with replacement, negatives
/// uniform over the other instances.
pub fn sample_triplet_batch<R: Rng + ?Sized>(
    pool: &[&Instance],
    batch_size: usize,
    rng: &mut R,
) -> Result<TripletBatch> {
    if pool.len() < 2 {
        return Err(Error::Data(format!(
            "triplet sampling needs at least 2 instances, got {}",
            pool.len()
        )));
    }
    let anchors: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..pool.len())).collect();
    let mut aug_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    triplet_batch_for(pool, &anchors, PhotoAugmentation::Structural, rng, &mut aug_rng)
}

/// Photo-only triplet: anchor photo, its augmentation, another photo.
#[derive(Debug, Clone)]
pub struct PhotoTripletBatch {
    pub anchors: Vec<usize>,
    pub negatives: Vec<usize>,
    pub augmented: Vec<Image>,
}

pub fn photo_triplets_for<R: Rng + ?Sized, A: Rng + ?Sized>(
    n_photos: usize,
    photo: impl Fn(usize) -> Image,
    anchors: &[usize],
    augmentation: PhotoAugmentation,
    rng: &mut R,
    aug_rng: &mut A,
) -> Result<PhotoTripletBatch> {
    if n_photos < 2 {
        return Err(Error::Data(format!(
            "photo triplets need at least 2 photos, got {n_photos}"
        )));
    }
    let negatives = anchors
        .iter()
        .map(|&a| other_index(n_photos, a, rng))
        .collect();
    let augmented = anchors
        .iter()
        .map(|&a| augmentation.apply(&photo(a), aug_rng))
        .collect();
    Ok(PhotoTripletBatch {
        anchors: anchors.to_vec(),
        negatives,
        augmented,
    })
}

/// Cycles through shuffled permutations of `0..n`.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            order: Vec::new(),
            pos: 0,
        }
    }

    /// Next `count` indices, reshuffling whenever a pass is exhausted.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count && self.n > 0 {
            if self.pos >= self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// directory format

fn read_png(path: &Path, image_size: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != image_size || rgb.height() as usize != image_size {
        rgb = image::imageops::resize(
            &rgb,
            image_size as u32,
            image_size as u32,
            image::imageops::FilterType::Triangle,
        );
    }
    Ok(Image::from_rgb8(&rgb))
}

fn png_files(dir: &Path) -> Result<Vec<(String, std::path::PathBuf)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Load the directory layout described in the module docs.
///
/// Photos without sketches become unlabelled instances. Sketches whose
/// instance id has no photo in the same class are skipped and counted.
pub fn load_directory(root: &Path, image_size: usize) -> Result<(Dataset, LoadReport)> {
    let mut report = LoadReport::default();
    let mut classes = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            if let Some(name) = entry.file_name().to_str() {
                classes.push(name.to_string());
            }
        }
    }
    classes.sort();
    let mut seen: HashMap<String, String> = HashMap::new();
    let mut instances = Vec::new();
    for class_id in classes {
        let class_dir = root.join(&class_id);
        let mut by_id: BTreeMap<String, Instance> = BTreeMap::new();
        for (id, path) in png_files(&class_dir.join("photos"))? {
            if let Some(prev) = seen.insert(id.clone(), class_id.clone()) {
                return Err(Error::Data(format!(
                    "duplicate instance id `{id}` in classes `{prev}` and `{class_id}`"
                )));
            }
            by_id.insert(
                id.clone(),
                Instance {
                    instance_id: id,
                    class_id: class_id.clone(),
                    photo: read_png(&path, image_size)?,
                    sketches: Vec::new(),
                },
            );
        }
        let mut sketches: Vec<(String, usize, std::path::PathBuf)> = Vec::new();
        for (stem, path) in png_files(&class_dir.join("sketches"))? {
            let parsed = stem
                .rsplit_once('_')
                .and_then(|(id, k)| k.parse::<usize>().ok().map(|k| (id.to_string(), k)));
            match parsed {
                Some((id, k)) if by_id.contains_key(&id) => sketches.push((id, k, path)),
                _ => {
                    log::warn!("skipping sketch {} with no matching photo", path.display());
                    report.skipped += 1;
                }
            }
        }
        sketches.sort();
        for (id, _, path) in sketches {
            let img = read_png(&path, image_size)?;
            by_id.get_mut(&id).expect("checked above").sketches.push(img);
        }
        instances.extend(by_id.into_values());
    }
    report.labelled = instances.iter().filter(|i| i.is_labelled()).count();
    report.unlabelled = instances.len() - report.labelled;
    Ok((
        Dataset {
            image_size,
            instances,
        },
        report,
    ))
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    img.to_rgb8().save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Write a dataset in the layout read by [`load_directory`].
pub fn write_directory(dataset: &Dataset, root: &Path) -> Result<()> {
    for inst in &dataset.instances {
        let class_dir = root.join(&inst.class_id);
        let photos = class_dir.join("photos");
        let sketches = class_dir.join("sketches");
        std::fs::create_dir_all(&photos).map_err(|e| Error::io(&photos, e))?;
        std::fs::create_dir_all(&sketches).map_err(|e| Error::io(&sketches, e))?;
        write_png(&inst.photo, &photos.join(format!("{}.png", inst.instance_id)))?;
        for (k, s) in inst.sketches.iter().enumerate() {
            write_png(s, &sketches.join(format!("{}_{k}.png", inst.instance_id)))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> Dataset {
        generate_synthetic(&SyntheticSpec::new(16, 4, 2, 7)).unwrap()
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let ds = small();
        assert_eq!(ds.len(), 16);
        assert_eq!(ds.sketch_count(), 32);
        assert_eq!(ds, small());
        for inst in &ds.instances {
            assert_eq!(inst.photo.side(), 32);
            assert!(inst.photo.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let other = generate_synthetic(&SyntheticSpec::new(16, 4, 2, 8)).unwrap();
        assert_ne!(ds, other);
    }

    #[test]
    fn synthetic_rejects_single_sketch() {
        assert!(generate_synthetic(&SyntheticSpec::new(4, 2, 1, 0)).is_err());
        assert!(generate_synthetic(&SyntheticSpec::new(2, 4, 2, 0)).is_err());
    }

    #[test]
    fn sketches_carry_no_colour() {
        let ds = small();
        for s in &ds.instances[0].sketches {
            for px in s.data().chunks(3) {
                assert_eq!(px[0], px[1]);
                assert_eq!(px[1], px[2]);
            }
        }
    }

    #[test]
    fn sketch_is_closest_to_own_contour() {
        // brute-force pairwise pixel distances between every sketch and every
        // clean contour rendering
        let spec = SyntheticSpec::new(40, 4, 2, 11);
        let ds = generate_synthetic(&spec).unwrap();
        let contours: Vec<Image> = synthetic_layouts(&spec)
            .iter()
            .map(|l| render_contour(l, spec.image_size))
            .collect();
        let mut hits = 0;
        for (i, inst) in ds.instances.iter().enumerate() {
            let s = &inst.sketches[0];
            let own = s.mean_abs_diff(&contours[i]);
            if contours
                .iter()
                .enumerate()
                .all(|(j, c)| j == i || s.mean_abs_diff(c) > own)
            {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.9 * ds.len() as f64, "only {hits}/40");
    }

    #[test]
    fn identity_augment_is_exact() {
        let ds = small();
        let p = &ds.instances[3].photo;
        assert_eq!(&structural_augment_with(p, &AugmentParams::IDENTITY), p);
    }

    #[test]
    fn augment_preserves_shape_and_range() {
        let ds = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for inst in &ds.instances {
            let out = structural_augment(&inst.photo, &mut rng);
            assert_eq!(out.side(), inst.photo.side());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn augment_changes_structure_not_colour_on_gray() {
        let gray = Image::filled(32, [0.4; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let out = structural_augment(&gray, &mut rng);
            // interior region away from warp borders
            let mut acc = 0.0;
            let mut n = 0.0;
            for y in 8..24 {
                for x in 8..24 {
                    acc += out.pixel(x, y)[0];
                    n += 1.0;
                }
            }
            assert!((acc / n - 0.4).abs() <= 0.004);
        }
    }

    #[test]
    fn rotation_by_90_moves_pixels() {
        let mut img = Image::filled(8, [0.0; 3]);
        img.set_pixel(1, 0, [1.0; 3]);
        let params = AugmentParams {
            angle_deg: 90.0,
            ..AugmentParams::IDENTITY
        };
        let out = structural_augment_with(&img, &params);
        assert_ne!(out, img);
        let bright: Vec<(usize, usize)> = (0..8)
            .flat_map(|y| (0..8).map(move |x| (x, y)))
            .filter(|&(x, y)| out.pixel(x, y)[0] > 0.5)
            .collect();
        assert_eq!(bright.len(), 1);
    }

    #[test]
    fn alternative_augmentations_keep_shape() {
        let ds = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for aug in PhotoAugmentation::ALL {
            let out = aug.apply(&ds.instances[0].photo, &mut rng);
            assert_eq!(out.side(), 32);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn two_instance_negatives_are_other() {
        let ds = generate_synthetic(&SyntheticSpec::new(2, 1, 2, 3)).unwrap();
        let pool: Vec<&Instance> = ds.instances.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_triplet_batch(&pool, 4, &mut rng).unwrap();
        for r in &b.rows {
            assert_ne!(r.anchor, r.negative);
            assert_ne!(r.anchor_sketch, r.positive_sketch);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_rejects_tiny_pools() {
        let ds = small();
        let pool: Vec<&Instance> = ds.instances.iter().collect();
        let a = sample_triplet_batch(&pool, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_triplet_batch(&pool, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.augmented_photo, b.augmented_photo);
        assert!(sample_triplet_batch(&pool[..1], 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn negatives_are_uniform() {
        // Monte Carlo frequency count over 10 instances
        let ds = generate_synthetic(&SyntheticSpec::new(10, 2, 2, 1)).unwrap();
        let pool: Vec<&Instance> = ds.instances.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [[0usize; 10]; 10];
        let mut totals = [0usize; 10];
        let anchors: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
        let mut aug_rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in anchors.chunks(1000) {
            // identity-cost augmentation path is irrelevant here
            let b = triplet_batch_for(
                &pool,
                chunk,
                PhotoAugmentation::ColorDistortion,
                &mut rng,
                &mut aug_rng,
            )
            .unwrap();
            for r in &b.rows {
                counts[r.anchor][r.negative] += 1;
                totals[r.anchor] += 1;
            }
        }
        for n in 0..10 {
            assert_eq!(counts[n][n], 0);
            let as_negative: usize = (0..10).map(|a| counts[a][n]).sum();
            let non_anchor: usize = (0..10).filter(|&a| a != n).map(|a| totals[a]).sum();
            let f = as_negative as f64 / non_anchor as f64;
            assert!((f - 1.0 / 9.0).abs() <= 0.02, "instance {n}: {f}");
        }
    }

    #[test]
    fn epoch_sampler_covers_each_pass() {
        let mut s = EpochSampler::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut first = s.next_batch(5, &mut rng);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.next_batch(7, &mut rng).len(), 7);
    }

    #[test]
    fn directory_round_trip_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (empty, rep) = load_directory(dir.path(), 32).unwrap();
        assert!(empty.is_empty());
        assert_eq!(rep, LoadReport::default());

        let mut ds = generate_synthetic(&SyntheticSpec::new(3, 1, 2, 4)).unwrap();
        ds.instances[2].sketches.clear();
        write_directory(&ds, dir.path()).unwrap();
        // orphan sketch
        let orphan = dir.path().join("c00/sketches/zzz_0.png");
        write_png(&ds.instances[0].sketches[0], &orphan).unwrap();
        let (back, rep) = load_directory(dir.path(), 32).unwrap();
        assert_eq!(
            rep,
            LoadReport {
                labelled: 2,
                unlabelled: 1,
                skipped: 1
            }
        );
        assert_eq!(back.instances[0].sketches.len(), 2);
        // 8-bit quantisation only
        assert!(back.instances[0].photo.mean_abs_diff(&ds.instances[0].photo) < 1.0 / 255.0);
    }

    #[test]
    fn directory_duplicate_ids_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&SyntheticSpec::new(2, 1, 2, 4)).unwrap();
        write_directory(&ds, dir.path()).unwrap();
        let other = dir.path().join("c99/photos");
        std::fs::create_dir_all(&other).unwrap();
        write_png(&ds.instances[0].photo, &other.join("i0000.png")).unwrap();
        let err = load_directory(dir.path(), 32).unwrap_err();
        assert!(err.to_string().contains("i0000"), "{err}");
    }

    #[test]
    fn directory_resizes_images() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&SyntheticSpec::new(2, 1, 2, 4)).unwrap();
        write_directory(&ds, dir.path()).unwrap();
        let (back, _) = load_directory(dir.path(), 16).unwrap();
        assert_eq!(back.instances[0].photo.side(), 16);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn triplet_rows_satisfy_pairing(seed in any::<u64>(), batch in 1usize..12) {
            let ds = generate_synthetic(&SyntheticSpec {
                image_size: 8,
                ..SyntheticSpec::new(5, 2, 3, 17)
            }).unwrap();
            let pool: Vec<&Instance> = ds.instances.iter().collect();
            let b = sample_triplet_batch(&pool, batch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(b.len(), batch);
            for (i, r) in b.rows.iter().enumerate() {
                prop_assert_ne!(&pool[r.anchor].instance_id, &pool[r.negative].instance_id);
                prop_assert_ne!(r.anchor_sketch, r.positive_sketch);
                prop_assert!(std::ptr::eq(b.positive_photo(&pool, i), &pool[r.anchor].photo));
                prop_assert!(r.negative_sketch < pool[r.negative].sketches.len());
            }
        }
    }
}
