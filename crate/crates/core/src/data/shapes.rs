use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rect,
    Triangle,
}

impl ShapeKind {
    /// Class 0 is background; classes 1, 2, 3, 4, ... cycle through disk,
    /// rectangle and triangle.
    pub fn for_class(class: usize) -> Option<ShapeKind> {
        match class {
            0 => None,
            c => Some([ShapeKind::Disk, ShapeKind::Rect, ShapeKind::Triangle][(c - 1) % 3]),
        }
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.15, 0.10],
    [0.10, 0.75, 0.20],
    [0.15, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.90],
];

/// Base RGB colour of a foreground class.
pub fn class_color(class: usize) -> [f64; 3] {
    let i = class.saturating_sub(1);
    if i < PALETTE.len() {
        return PALETTE[i];
    }
    // Golden-angle hues beyond the palette.
    let hue = (i as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.1 + 0.8 * r, 0.1 + 0.8 * g, 0.1 + 0.8 * b]
}

/// Pixels whose centres lie within `r` of `(cy, cx)`.
pub fn disk_pixels(size: usize, cy: f64, cx: f64, r: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            if dy * dy + dx * dx <= r * r {
                out.push((y, x));
            }
        }
    }
    out
}

fn triangle_pixels(size: usize, v: [(f64, f64); 3]) -> Vec<(usize, usize)> {
    let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let mut out = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let p = (y as f64 + 0.5, x as f64 + 0.5);
            let e = [edge(v[0], v[1], p), edge(v[1], v[2], p), edge(v[2], v[0], p)];
            if e.iter().all(|&d| d >= 0.0) || e.iter().all(|&d| d <= 0.0) {
                out.push((y, x));
            }
        }
    }
    out
}

struct Placed {
    cy: f64,
    cx: f64,
    extent: f64,
}

fn shape_pixels(kind: ShapeKind, size: usize, cy: f64, cx: f64, r: f64, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    match kind {
        ShapeKind::Disk => disk_pixels(size, cy, cx, r),
        ShapeKind::Rect => {
            let hh = r * rng.gen_range(0.55..1.0);
            let hw = r * rng.gen_range(0.55..1.0);
            let mut out = Vec::new();
            for y in 0..size {
                for x in 0..size {
                    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                    if (py - cy).abs() <= hh && (px - cx).abs() <= hw {
                        out.push((y, x));
                    }
                }
            }
            out
        }
        ShapeKind::Triangle => {
            let tilt: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let v = [0.0, 1.0, 2.0].map(|k: f64| {
                let a = tilt + k * std::f64::consts::TAU / 3.0;
                (cy + r * a.sin(), cx + r * a.cos())
            });
            triangle_pixels(size, v)
        }
    }
}

fn generate_one(index: usize, num_classes: usize, size: usize, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let noise = Normal::new(0.0, 0.04).unwrap();
    let s = size as f64;

    // Background: dim grey with a low-frequency texture.
    let (fy, fx, phase) = (rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0), rng.gen_range(0.0..6.3));
    let base = rng.gen_range(0.25..0.45);
    let mut image = Tensor::zeros(&[3, size, size]);
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let t = 0.06 * ((fy * y as f64 / s + fx * x as f64 / s) * std::f64::consts::TAU + phase).sin();
            for c in 0..3 {
                image.data_mut()[c * plane + y * size + x] = base + t;
            }
        }
    }
    let mut mask = vec![0u8; plane];

    let wanted = rng.gen_range(1..=4usize);
    let (rmin, rmax) = ((s / 12.0).max(2.0), (s / 5.0).max(3.0));
    let mut placed: Vec<Placed> = Vec::new();
    for _ in 0..200 {
        if placed.len() == wanted {
            break;
        }
        let r = rng.gen_range(rmin..rmax);
        let cy = rng.gen_range(r..s - r);
        let cx = rng.gen_range(r..s - r);
        if placed.iter().any(|p| ((p.cy - cy).powi(2) + (p.cx - cx).powi(2)).sqrt() < p.extent + r + 1.0) {
            continue;
        }
        let class = rng.gen_range(1..num_classes);
        let kind = ShapeKind::for_class(class).expect("foreground class");
        let color = class_color(class);
        for (y, x) in shape_pixels(kind, size, cy, cx, r, &mut rng) {
            mask[y * size + x] = class as u8;
            for (c, &v) in color.iter().enumerate() {
                image.data_mut()[c * plane + y * size + x] = v;
            }
        }
        placed.push(Placed { cy, cx, extent: r });
    }
    for v in image.data_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Sample::new(format!("img_{index:05}"), image, mask)
}

/// `count` square images of side `size`, each with one to four
/// non-overlapping shapes over a textured background (class 0). Sample `i`
/// depends only on `(seed, i)`.
pub fn gen_shapes_dataset(count: usize, num_classes: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
    }
    if num_classes > 255 {
        return Err(Error::InvalidArgument(format!("at most 255 classes fit a byte mask, got {num_classes}")));
    }
    if size < 16 {
        return Err(Error::InvalidArgument(format!("image size {size} below 16")));
    }
    (0..count).map(|i| generate_one(i, num_classes, size, seed)).collect()
}
