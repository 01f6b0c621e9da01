use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng;

pub const BACKGROUND: u8 = 0;
pub const BOX: u8 = 1;
pub const DISK: u8 = 2;
pub const STRIPE: u8 = 3;
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "box", "disk", "stripe"];

/// A rendered foreground shape. Membership is decided at pixel centres
/// `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Axis-aligned rectangle covering columns `x0..x1` and rows `y0..y1`.
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
    Disk { cx: f64, cy: f64, r: f64 },
    /// Full-length band: rows `lo..hi` if horizontal, else columns.
    Band { horizontal: bool, lo: usize, hi: usize },
}

impl Shape {
    pub fn class(&self) -> u8 {
        match self {
            Shape::Rect { .. } => BOX,
            Shape::Disk { .. } => DISK,
            Shape::Band { .. } => STRIPE,
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => (x0..x1).contains(&x) && (y0..y1).contains(&y),
            Shape::Disk { cx, cy, r } => {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                dx * dx + dy * dy <= r * r
            }
            Shape::Band { horizontal, lo, hi } => {
                let v = if horizontal { y } else { x };
                (lo..hi).contains(&v)
            }
        }
    }

    /// Continuous area of the shape (all shapes lie inside the frame).
    pub fn area(&self, width: usize, height: usize) -> f64 {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => ((x1 - x0) * (y1 - y0)) as f64,
            Shape::Disk { r, .. } => std::f64::consts::PI * r * r,
            Shape::Band { horizontal, lo, hi } => {
                ((hi - lo) * if horizontal { width } else { height }) as f64
            }
        }
    }
}

/// An image `(3, H, W)` in `[0, 1]`, channel-major, with per-pixel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    pub labels: Vec<u8>,
    /// Shapes in painting order; later shapes cover earlier ones.
    pub shapes: Vec<Shape>,
}

impl Scene {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn distinct_classes(&self) -> usize {
        let mut seen = [false; NUM_CLASSES];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }
}

const BASE_COLORS: [[f64; 3]; NUM_CLASSES] = [
    [0.45, 0.42, 0.36],
    [0.80, 0.30, 0.22],
    [0.25, 0.68, 0.32],
    [0.30, 0.38, 0.78],
];

fn layout(rng: &mut impl Rng, w: usize, h: usize) -> Vec<Shape> {
    let horizontal = rng.random_bool(0.5);
    let span = if horizontal { h } else { w };
    let thick = rng.random_range(3..=(span / 6).max(3));
    let lo = rng.random_range(0..=span - thick);
    let band = Shape::Band {
        horizontal,
        lo,
        hi: lo + thick,
    };

    let bw = rng.random_range(w / 4..=w / 2);
    let bh = rng.random_range(h / 4..=h / 2);
    let x0 = rng.random_range(0..=w - bw);
    let y0 = rng.random_range(0..=h - bh);
    let rect = Shape::Rect {
        x0,
        y0,
        x1: x0 + bw,
        y1: y0 + bh,
    };

    let r = rng.random_range(w as f64 / 10.0..w as f64 / 5.0);
    let cx = rng.random_range(r..w as f64 - r);
    let cy = rng.random_range(r..h as f64 - r);
    let disk = Shape::Disk { cx, cy, r };
    vec![band, rect, disk]
}

fn rasterize(shapes: &[Shape], w: usize, h: usize) -> Vec<u8> {
    let mut labels = vec![BACKGROUND; w * h];
    for s in shapes {
        for y in 0..h {
            for x in 0..w {
                if s.contains(x, y) {
                    labels[y * w + x] = s.class();
                }
            }
        }
    }
    labels
}

/// Renders the scene of `seed` at `width × height`.
///
/// Colours are class-coded with per-scene jitter; the background carries a
/// low-frequency texture and every pixel a little sensor noise.
pub fn gen_scene_sized(seed: u64, width: usize, height: usize) -> Scene {
    assert!(width >= 12 && height >= 12, "scenes need at least 12×12 pixels");
    let mut rng = rng::stream(seed, "scene", 0);
    let (shapes, labels) = loop {
        let shapes = layout(&mut rng, width, height);
        let labels = rasterize(&shapes, width, height);
        let mut seen = [false; NUM_CLASSES];
        labels.iter().for_each(|&l| seen[l as usize] = true);
        // the rectangle must stay visible so every scene has ≥ 2 classes
        if seen[BOX as usize] {
            break (shapes, labels);
        }
    };

    let brightness = rng.random_range(0.85..1.15);
    let mut colors = BASE_COLORS;
    for c in colors.iter_mut() {
        for v in c.iter_mut() {
            *v = (*v + rng.random_range(-0.08..0.08)) * brightness;
        }
    }
    let fx = rng.random_range(0.1..0.5);
    let fy = rng.random_range(0.1..0.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, 0.02).expect("finite");

    let plane = width * height;
    let mut image = vec![0.0; 3 * plane];
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let class = labels[p] as usize;
            let texture = if class == BACKGROUND as usize {
                0.08 * (fx * x as f64 + fy * y as f64 + phase).sin()
            } else {
                0.0
            };
            for ch in 0..3 {
                let v = colors[class][ch] + texture + noise.sample(&mut rng);
                image[ch * plane + p] = v.clamp(0.0, 1.0);
            }
        }
    }
    Scene {
        height,
        width,
        image,
        labels,
        shapes,
    }
}

/// Default 32×32 scene.
pub fn gen_scene(seed: u64) -> Scene {
    gen_scene_sized(seed, 32, 32)
}
