//! Random scenes of colored 2-D shapes, a hard-edged rasterizer and the
//! relative-coordinate map consumed by the models.
//!
//! Coordinates live in the unit square with `x` growing rightwards and `y`
//! growing downwards, so "above" means a smaller `y`. A pixel `(row, col)` of
//! an `n × n` canvas is sampled at its center `((col + 0.5) / n, (row + 0.5) / n)`.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Rectangle,
    Triangle,
    Pentagon,
    Cross,
    Circle,
    Semicircle,
    Ellipse,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Square,
        Shape::Rectangle,
        Shape::Triangle,
        Shape::Pentagon,
        Shape::Cross,
        Shape::Circle,
        Shape::Semicircle,
        Shape::Ellipse,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Rectangle => "rectangle",
            Shape::Triangle => "triangle",
            Shape::Pentagon => "pentagon",
            Shape::Cross => "cross",
            Shape::Circle => "circle",
            Shape::Semicircle => "semicircle",
            Shape::Ellipse => "ellipse",
        }
    }

    pub fn from_word(w: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| s.word() == w)
    }

    /// Shapes drawn with two independent extents.
    fn is_elongated(self) -> bool {
        matches!(self, Shape::Rectangle | Shape::Ellipse)
    }

    /// Shapes whose rotation cannot be observed.
    fn is_rotation_free(self) -> bool {
        matches!(self, Shape::Square | Shape::Circle)
    }

    /// Point-in-shape test in the shape's normalized frame, where the
    /// extent box is `[-1, 1]²`.
    fn contains_local(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square | Shape::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Circle | Shape::Ellipse => u * u + v * v <= 1.0,
            Shape::Cross => {
                let arm = 1.0 / 3.0;
                (u.abs() <= arm && v.abs() <= 1.0) || (v.abs() <= arm && u.abs() <= 1.0)
            }
            Shape::Triangle => point_in_convex(&TRIANGLE, u, v),
            Shape::Pentagon => point_in_convex(&PENTAGON, u, v),
            Shape::Semicircle => {
                // Half-disc with its flat side down, shifted so the area
                // centroid sits at the origin.
                let dv = (v - SEMI_BASE) / SEMI_RADIUS_V;
                v <= SEMI_BASE && u * u + dv * dv <= 1.0
            }
        }
    }
}

// Apex-up triangle with its centroid at the origin.
const TRIANGLE: [(f64, f64); 3] = [(0.0, -1.0), (1.0, 0.5), (-1.0, 0.5)];
// Regular pentagon on the unit circle, one vertex pointing up.
const PENTAGON: [(f64, f64); 5] = [
    (0.0, -1.0),
    (0.951_056_516_295_153_5, -0.309_016_994_374_947_4),
    (0.587_785_252_292_473_1, 0.809_016_994_374_947_5),
    (-0.587_785_252_292_473_1, 0.809_016_994_374_947_5),
    (-0.951_056_516_295_153_5, -0.309_016_994_374_947_4),
];
const SEMI_RADIUS_V: f64 = 1.5;
// 4 r / (3 pi) puts the half-disc centroid at v = 0.
const SEMI_BASE: f64 = SEMI_RADIUS_V * 4.0 / (3.0 * PI);

/// Vertices must be listed clockwise in y-down coordinates.
fn point_in_convex(poly: &[(f64, f64)], u: f64, v: f64) -> bool {
    let n = poly.len();
    (0..n).all(|i| {
        let (ax, ay) = poly[i];
        let (bx, by) = poly[(i + 1) % n];
        (bx - ax) * (v - ay) - (by - ay) * (u - ax) >= 0.0
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
    Gray,
}

impl Color {
    pub const ALL: [Color; 7] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Magenta,
        Color::Cyan,
        Color::Gray,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
            Color::Gray => "gray",
        }
    }

    pub fn from_word(w: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.word() == w)
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
            Color::Magenta => [255, 0, 255],
            Color::Cyan => [0, 255, 255],
            Color::Gray => [128, 128, 128],
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub shape: Shape,
    pub color: Color,
    pub center: Point,
    pub size: Extent,
    /// Fraction of a full clockwise turn, in `[0, 1)`.
    pub rotation: f64,
    /// Draw order; higher values are painted later, i.e. in front.
    pub z: u32,
}

impl Entity {
    /// Half-widths of the axis-aligned box enclosing the rotated extent box.
    pub fn half_bounds(&self) -> (f64, f64) {
        let theta = self.rotation * 2.0 * PI;
        let (s, c) = (theta.sin().abs(), theta.cos().abs());
        let hw = self.size.w / 2.0;
        let hh = self.size.h / 2.0;
        (hw * c + hh * s, hw * s + hh * c)
    }

    pub fn inside_canvas(&self) -> bool {
        let (bx, by) = self.half_bounds();
        self.center.x - bx >= 0.0
            && self.center.x + bx <= 1.0
            && self.center.y - by >= 0.0
            && self.center.y + by <= 1.0
    }

    /// Point-in-shape test in unit canvas coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let theta = self.rotation * 2.0 * PI;
        let (s, c) = theta.sin_cos();
        let dx = x - self.center.x;
        let dy = y - self.center.y;
        let u = (dx * c + dy * s) / (self.size.w / 2.0);
        let v = (-dx * s + dy * c) / (self.size.h / 2.0);
        self.shape.contains_local(u, v)
    }

    /// Pixel coverage on an `n × n` canvas, row-major.
    pub fn mask(&self, canvas: usize) -> Vec<bool> {
        let n = canvas as f64;
        let (bx, by) = self.half_bounds();
        let mut m = vec![false; canvas * canvas];
        // Only scan the bounding box; the clamp keeps the loop inside the canvas.
        let c0 = (((self.center.x - bx) * n).floor().max(0.0)) as usize;
        let c1 = (((self.center.x + bx) * n).ceil() as usize).min(canvas);
        let r0 = (((self.center.y - by) * n).floor().max(0.0)) as usize;
        let r1 = (((self.center.y + by) * n).ceil() as usize).min(canvas);
        for r in r0..r1 {
            let y = (r as f64 + 0.5) / n;
            for col in c0..c1 {
                let x = (col as f64 + 0.5) / n;
                if self.contains(x, y) {
                    m[r * canvas + col] = true;
                }
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub entities: Vec<Entity>,
    pub canvas: usize,
}

impl Scene {
    pub fn new(entities: Vec<Entity>, canvas: usize) -> Self {
        Scene { entities, canvas }
    }

    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.entities.iter().map(|e| e.mask(self.canvas)).collect()
    }

    /// Whether the full (unoccluded) coverage of two entities shares a pixel.
    pub fn overlap(&self, i: usize, j: usize) -> bool {
        let a = self.entities[i].mask(self.canvas);
        let b = self.entities[j].mask(self.canvas);
        a.iter().zip(&b).any(|(&p, &q)| p && q)
    }

    /// Symmetric `n × n` table of [`Scene::overlap`], diagonal false.
    pub fn overlap_table(&self) -> Vec<bool> {
        let masks = self.masks();
        let n = masks.len();
        let mut t = vec![false; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let hit = masks[i].iter().zip(&masks[j]).any(|(&p, &q)| p && q);
                t[i * n + j] = hit;
                t[j * n + i] = hit;
            }
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub canvas: usize,
    pub min_count: usize,
    pub max_count: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Permit partially occluding pairs (needed for behind/front captions).
    pub allow_overlap: bool,
    /// Upper bound on occluded area / occluded entity's area.
    pub max_overlap: f64,
    pub placement_attempts: usize,
    pub scene_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            canvas: 64,
            min_count: 4,
            max_count: 10,
            min_size: 0.1,
            max_size: 0.25,
            allow_overlap: false,
            max_overlap: 0.25,
            placement_attempts: 200,
            scene_attempts: 20,
        }
    }
}

impl SceneConfig {
    pub fn with_canvas(canvas: usize) -> Self {
        SceneConfig {
            canvas,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidConfig(m.to_string()));
        if self.canvas == 0 {
            return bad("canvas must be positive");
        }
        if self.min_count < 1 || self.min_count > self.max_count {
            return bad("entity count range must satisfy 1 <= min <= max");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size < 1.0) {
            return bad("size extents must lie in (0, 1) with min <= max");
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return bad("overlap threshold must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("could not place {count} entities after {attempts} attempts (seed {seed})")]
    PlacementFailure {
        seed: u64,
        count: usize,
        attempts: usize,
    },
}

fn sample_entity<R: Rng>(rng: &mut R, cfg: &SceneConfig, z: u32) -> Entity {
    let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
    let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
    let size = if shape.is_elongated() {
        // Keep rectangles and ellipses visibly distinct from squares and circles.
        loop {
            let w = rng.gen_range(cfg.min_size..=cfg.max_size);
            let h = rng.gen_range(cfg.min_size..=cfg.max_size);
            if w.max(h) / w.min(h) >= 1.3 || cfg.max_size / cfg.min_size < 1.3 {
                break Extent { w, h };
            }
        }
    } else {
        let s = rng.gen_range(cfg.min_size..=cfg.max_size);
        Extent { w: s, h: s }
    };
    let rotation = if shape.is_rotation_free() {
        0.0
    } else {
        rng.gen_range(0.0..1.0)
    };
    let mut e = Entity {
        shape,
        color,
        center: Point::new(0.5, 0.5),
        size,
        rotation,
        z,
    };
    let (bx, by) = e.half_bounds();
    e.center = Point::new(rng.gen_range(bx..=1.0 - bx), rng.gen_range(by..=1.0 - by));
    e
}

/// Samples a scene deterministically from `(seed, config)`.
///
/// The entity count is drawn uniformly from `[min_count, max_count]` once per
/// call; placement is retried with rejection until every entity fits the
/// overlap policy, or the budget runs out.
pub fn sample_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let mut rng = seed::rng(seed);
    let count = rng.gen_range(cfg.min_count..=cfg.max_count);
    let npix = cfg.canvas * cfg.canvas;
    'scene: for _ in 0..cfg.scene_attempts {
        let mut entities: Vec<Entity> = Vec::with_capacity(count);
        let mut masks: Vec<Vec<bool>> = Vec::with_capacity(count);
        let mut areas: Vec<usize> = Vec::with_capacity(count);
        // Owner of each pixel after painting so far (topmost entity).
        let mut owner: Vec<Option<usize>> = vec![None; npix];
        for k in 0..count {
            let mut placed = false;
            for _ in 0..cfg.placement_attempts {
                let e = sample_entity(&mut rng, cfg, k as u32);
                let m = e.mask(cfg.canvas);
                let area = m.iter().filter(|&&b| b).count();
                if area == 0 {
                    continue;
                }
                let ok = masks.iter().zip(&areas).all(|(prev, &prev_area)| {
                    let inter = prev.iter().zip(&m).filter(|(&p, &q)| p && q).count();
                    if cfg.allow_overlap {
                        inter as f64 <= cfg.max_overlap * prev_area as f64
                    } else {
                        inter == 0
                    }
                });
                if !ok {
                    continue;
                }
                // Every earlier entity must keep at least one visible pixel.
                let mut visible = vec![0usize; entities.len()];
                for (p, o) in owner.iter().enumerate() {
                    if let Some(j) = *o {
                        if !m[p] {
                            visible[j] += 1;
                        }
                    }
                }
                if visible.iter().any(|&v| v == 0) {
                    continue;
                }
                for (p, &hit) in m.iter().enumerate() {
                    if hit {
                        owner[p] = Some(k);
                    }
                }
                entities.push(e);
                masks.push(m);
                areas.push(area);
                placed = true;
                break;
            }
            if !placed {
                continue 'scene;
            }
        }
        return Ok(Scene::new(entities, cfg.canvas));
    }
    Err(SceneError::PlacementFailure {
        seed,
        count,
        attempts: cfg.scene_attempts,
    })
}

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn black(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn save_png(&self, path: &Path) -> Result<(), image::ImageError> {
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
    }
}

/// Painter's-algorithm rasterization in ascending `z`.
pub fn render(scene: &Scene) -> Image {
    let n = scene.canvas;
    let mut img = Image::black(n, n);
    let mut order: Vec<&Entity> = scene.entities.iter().collect();
    order.sort_by_key(|e| e.z);
    for e in order {
        let rgb = e.color.rgb();
        for (p, hit) in e.mask(n).into_iter().enumerate() {
            if hit {
                img.data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
            }
        }
    }
    img
}

/// Two-channel grid of relative coordinates, laid out `[row][col][channel]`.
/// Channel 0 ramps linearly along x from -1 to 1, channel 1 along y; an axis
/// of length one is constant 0.
pub fn coordinate_map(height: usize, width: usize) -> Vec<f32> {
    let ramp = |i: usize, len: usize| -> f32 {
        if len <= 1 {
            0.0
        } else {
            (2.0 * i as f64 / (len - 1) as f64 - 1.0) as f32
        }
    };
    let mut out = Vec::with_capacity(height * width * 2);
    for r in 0..height {
        for c in 0..width {
            out.push(ramp(c, width));
            out.push(ramp(r, height));
        }
    }
    out
}
