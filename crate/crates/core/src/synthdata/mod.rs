//! Deterministic synthetic segmentation scenes.
//!
//! Class 0 is a flat background; classes `1..C` are filled primitives with a
//! fixed base color per class. Each primitive is surrounded by a void band
//! whose color is the 50/50 blend of the shape color and the color below it.
//! Optional out-of-domain inserts use colors from a separate palette and are
//! labeled [`VOID`] in full. Gaussian pixel noise is added last.

mod augment;
mod pnm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::VOID;

pub use augment::{augment, augment_with, resize_bilinear, resize_nearest, AugmentConfig, AugmentParams};
pub use pnm::{read_dataset, read_pgm, read_ppm, write_dataset, write_pgm, write_ppm, MANIFEST};
pub(crate) use pnm::quantize;

pub type Rgb = [f32; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Interleaved `H x W x 3`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// `H x W` labels in `0..C` or [`VOID`].
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn pixel(&self, y: usize, x: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.image[i], self.image[i + 1], self.image[i + 2]]
    }

    /// `1 x 3 x H x W` planar tensor.
    pub fn image_tensor(&self) -> Tensor<f32> {
        let plane = self.height * self.width;
        let mut data = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = self.image[p * 3 + c];
            }
        }
        Tensor::from_vec([1, 3, self.height, self.width], data).expect("sample extents")
    }

    pub fn label_set(&self) -> std::collections::BTreeSet<u8> {
        self.labels.iter().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeFamily {
    Rectangle,
    Disc,
    Triangle,
    Bar,
}

const FAMILIES: [ShapeFamily; 4] = [
    ShapeFamily::Rectangle,
    ShapeFamily::Disc,
    ShapeFamily::Triangle,
    ShapeFamily::Bar,
];

const BASE_PALETTE: [Rgb; 6] = [
    [0.45, 0.45, 0.45],
    [0.70, 0.30, 0.30],
    [0.30, 0.65, 0.35],
    [0.30, 0.35, 0.70],
    [0.65, 0.55, 0.25],
    [0.55, 0.30, 0.60],
];

const OOD_PALETTE: [Rgb; 4] = [
    [1.00, 1.00, 0.00],
    [0.00, 1.00, 1.00],
    [1.00, 0.00, 1.00],
    [1.00, 0.50, 0.00],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    pub classes: usize,
    /// Shape family per class `1..C` (index 0 is unused background).
    pub families: Vec<ShapeFamily>,
    /// Base color per class `0..C`.
    pub palette: Vec<Rgb>,
    pub noise: f32,
    pub void_border: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub ood_probability: f64,
    pub ood_palette: Vec<Rgb>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig::with_classes(96, 6)
    }
}

impl SceneConfig {
    /// Default layout for `classes` classes on `size x size` scenes. Classes
    /// beyond the built-in palette get evenly spaced hues in `[0.2, 0.8]`.
    pub fn with_classes(size: usize, classes: usize) -> Self {
        let palette = (0..classes)
            .map(|k| {
                BASE_PALETTE.get(k).copied().unwrap_or_else(|| {
                    let t = k as f32 / classes as f32 * std::f32::consts::TAU;
                    [0.5 + 0.3 * t.cos(), 0.5 + 0.3 * (t + 2.1).cos(), 0.5 + 0.3 * (t + 4.2).cos()]
                })
            })
            .collect();
        let families = (0..classes)
            .map(|k| FAMILIES[(k + FAMILIES.len() - 1) % FAMILIES.len()])
            .collect();
        SceneConfig {
            size,
            classes,
            families,
            palette,
            noise: 0.12,
            void_border: 1,
            shapes_min: 3,
            shapes_max: 6,
            ood_probability: 0.5,
            ood_palette: OOD_PALETTE.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > VOID as usize {
            return Err(Error::Config(format!("classes must be in 2..255, got {}", self.classes)));
        }
        if self.size < 32 {
            return Err(Error::Config(format!("scene size must be >= 32, got {}", self.size)));
        }
        if self.palette.len() != self.classes || self.families.len() != self.classes {
            return Err(Error::Config("palette and families need one entry per class".into()));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::Config("shapes_min exceeds shapes_max".into()));
        }
        if !(0.0..=1.0).contains(&self.ood_probability) || self.ood_palette.is_empty() {
            return Err(Error::Config("ood probability must lie in [0, 1] with a non-empty palette".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise amplitude must be non-negative".into()));
        }
        Ok(())
    }

    /// Inverts the palette of a noise-free scene: exact class colors map to
    /// their class, everything else (bands, inserts) to [`VOID`].
    pub fn classify_color(&self, rgb: Rgb) -> u8 {
        self.palette
            .iter()
            .position(|&c| c == rgb)
            .map_or(VOID, |k| k as u8)
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Canvas {
    size: usize,
    colors: Vec<Rgb>,
    labels: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, mask: &[bool], color: Rgb, label: u8, border: usize) {
        let n = self.size;
        let mut band = vec![false; n * n];
        if border > 0 {
            for y in 0..n {
                for x in 0..n {
                    if !mask[y * n + x] {
                        continue;
                    }
                    let (y0, y1) = (y.saturating_sub(border), (y + border).min(n - 1));
                    let (x0, x1) = (x.saturating_sub(border), (x + border).min(n - 1));
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            band[yy * n + xx] = true;
                        }
                    }
                }
            }
        }
        for i in 0..n * n {
            if mask[i] {
                self.colors[i] = color;
                self.labels[i] = label;
            } else if band[i] && (label == VOID || self.labels[i] != label) {
                let below = self.colors[i];
                self.colors[i] = [
                    0.5 * (color[0] + below[0]),
                    0.5 * (color[1] + below[1]),
                    0.5 * (color[2] + below[2]),
                ];
                self.labels[i] = VOID;
            }
        }
    }
}

fn rasterize(family: ShapeFamily, size: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let s = size as f64 / 96.0;
    let cx = rng.gen_range(0.0..size as f64);
    let cy = rng.gen_range(0.0..size as f64);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let (a, b) = match family {
        ShapeFamily::Rectangle => (rng.gen_range(10.0..28.0) * s, rng.gen_range(10.0..28.0) * s),
        ShapeFamily::Disc => (rng.gen_range(6.0..14.0) * s, 0.0),
        ShapeFamily::Triangle => (rng.gen_range(9.0..17.0) * s, 0.0),
        ShapeFamily::Bar => (rng.gen_range(24.0..50.0) * s, rng.gen_range(3.0..6.0) * s),
    };
    let tri: Vec<(f64, f64)> = (0..3)
        .map(|k| {
            let t = angle + k as f64 * std::f64::consts::TAU / 3.0;
            (cx + a * t.cos(), cy + a * t.sin())
        })
        .collect();
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            mask[y * size + x] = match family {
                ShapeFamily::Rectangle => dx.abs() <= a / 2.0 && dy.abs() <= b / 2.0,
                ShapeFamily::Disc => dx * dx + dy * dy <= a * a,
                ShapeFamily::Triangle => {
                    let side = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (py - p.1) - (q.1 - p.1) * (px - p.0);
                    let d = [side(tri[0], tri[1]), side(tri[1], tri[2]), side(tri[2], tri[0])];
                    d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
                }
                ShapeFamily::Bar => {
                    let along = dx * ca + dy * sa;
                    let across = -dx * sa + dy * ca;
                    along.abs() <= a / 2.0 && across.abs() <= b / 2.0
                }
            };
        }
    }
    mask
}

pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Sample> {
    config.validate()?;
    let n = config.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = Canvas {
        size: n,
        colors: vec![config.palette[0]; n * n],
        labels: vec![0; n * n],
    };
    let count = rng.gen_range(config.shapes_min..=config.shapes_max);
    for _ in 0..count {
        let class = rng.gen_range(1..config.classes);
        let mask = rasterize(config.families[class], n, &mut rng);
        canvas.paint(&mask, config.palette[class], class as u8, config.void_border);
    }
    if rng.gen_bool(config.ood_probability) {
        let family = FAMILIES[rng.gen_range(0..FAMILIES.len())];
        let color = config.ood_palette[rng.gen_range(0..config.ood_palette.len())];
        let mut mask = rasterize(family, n, &mut rng);
        if !mask.iter().any(|&m| m) {
            // Clipped entirely off-canvas; keep the probe visible.
            let c = n / 2;
            for y in c - 3..c + 3 {
                for x in c - 3..c + 3 {
                    mask[y * n + x] = true;
                }
            }
        }
        canvas.paint(&mask, color, VOID, config.void_border);
    }
    let mut image = Vec::with_capacity(n * n * 3);
    if config.noise > 0.0 {
        let normal = Normal::new(0.0f32, config.noise).map_err(|e| Error::Config(e.to_string()))?;
        for rgb in &canvas.colors {
            for &v in rgb {
                image.push((v + normal.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
    } else {
        image.extend(canvas.colors.iter().flatten());
    }
    Ok(Sample {
        id: format!("{seed:016x}"),
        height: n,
        width: n,
        image,
        labels: canvas.labels,
    })
}

/// Generates `count` scenes named `{prefix}_{index:05}`, seeded from
/// `derive_seed(seed, index)`.
pub fn generate_dataset(config: &SceneConfig, seed: u64, count: usize, prefix: &str) -> Result<Vec<Sample>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut s = generate_scene(config, derive_seed(seed, i as u64))?;
            s.id = format!("{prefix}_{i:05}");
            Ok(s)
        })
        .collect()
}
