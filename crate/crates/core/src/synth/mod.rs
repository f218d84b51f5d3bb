//! Procedural "leaf cultivar" data with exact vein and contour masks.
//!
//! Every class shares a global prototype leaf. A class perturbs the
//! prototype's outline harmonics and vein branch geometry by an amount
//! proportional to `epsilon`; each sample adds a smaller `jitter` on top,
//! plus nuisance variation (pose, colors, textured background) that carries
//! no class information.

pub mod manifest;
pub mod netpbm;
pub mod transform;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::BinaryMask;

pub const MIN_SIZE: usize = 32;
const HARMONICS: usize = 4;
const BRANCHES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// Scale of the class-to-class geometric differences.
    pub epsilon: f64,
    /// Scale of the within-class geometric variation.
    pub jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            samples_per_class: 6,
            size: 64,
            seed: 0,
            epsilon: 1.0,
            jitter: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.samples_per_class < 2 || self.samples_per_class % 2 != 0 {
            return Err(Error::Config(format!(
                "samples per class must be even and at least 2, got {}",
                self.samples_per_class
            )));
        }
        if self.size < MIN_SIZE {
            return Err(Error::Config(format!(
                "image size {} too small to render (minimum {MIN_SIZE})",
                self.size
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "epsilon {} must be non-negative",
                self.epsilon
            )));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::Config(format!(
                "jitter {} must be non-negative",
                self.jitter
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub vein: BinaryMask,
    pub contour: BinaryMask,
    pub class_id: usize,
    pub split: Split,
}

impl Sample {
    pub fn region_mask(&self) -> BinaryMask {
        self.vein
            .union(&self.contour)
            .expect("masks share resolution")
    }
}

/// Geometry that defines a leaf, in units of the image side.
#[derive(Clone, Debug)]
struct LeafShape {
    /// Outline radius modulation `(cos, sin)` for harmonics 2..=5.
    harmonics: [(f64, f64); HARMONICS],
    /// Branch anchor along the midrib in `[-1, 1]`.
    anchors: [f64; BRANCHES],
    /// Branch angle from the midrib, radians.
    angles: [f64; BRANCHES],
    /// Which side of the midrib each branch leaves from.
    sides: [f64; BRANCHES],
    /// Branch length as a fraction of the distance to the outline.
    reach: [f64; BRANCHES],
}

impl LeafShape {
    fn prototype(rng: &mut impl Rng) -> Self {
        let mut harmonics = [(0.0, 0.0); HARMONICS];
        for (k, h) in harmonics.iter_mut().enumerate() {
            let amp = 0.05 / (k as f64 + 1.0);
            *h = (rng.gen_range(-amp..amp), rng.gen_range(-amp..amp));
        }
        let mut anchors = [0.0; BRANCHES];
        for (i, a) in anchors.iter_mut().enumerate() {
            *a = -0.6 + 1.2 * (i as f64 + 0.5) / BRANCHES as f64;
        }
        Self {
            harmonics,
            anchors,
            angles: [0.9; BRANCHES],
            sides: [1.0, -1.0, 1.0, -1.0],
            reach: [0.8; BRANCHES],
        }
    }

    /// Adds `scale`-weighted uniform noise to every class-bearing parameter.
    fn perturbed(&self, scale: f64, rng: &mut impl Rng) -> Self {
        let mut out = self.clone();
        let u = |r: &mut dyn rand::RngCore| r.gen_range(-1.0..1.0) * scale;
        for h in &mut out.harmonics {
            h.0 += 0.06 * u(rng);
            h.1 += 0.06 * u(rng);
        }
        for i in 0..BRANCHES {
            out.anchors[i] += 0.12 * u(rng);
            out.angles[i] += 0.45 * u(rng);
            out.reach[i] = (out.reach[i] + 0.15 * u(rng)).clamp(0.4, 0.95);
        }
        out
    }

    fn radius(&self, phi: f64) -> f64 {
        let mut r = 1.0;
        for (k, &(c, s)) in self.harmonics.iter().enumerate() {
            let m = (k + 2) as f64;
            r += c * (m * phi).cos() + s * (m * phi).sin();
        }
        r.max(0.5)
    }
}

/// Sample-level pose and appearance.
struct Pose {
    cx: f64,
    cy: f64,
    rotation: f64,
    semi_major: f64,
    semi_minor: f64,
}

struct Segment {
    a: (f64, f64),
    b: (f64, f64),
}

impl Segment {
    fn distance(&self, p: (f64, f64)) -> f64 {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        };
        let (qx, qy) = (self.a.0 + t * dx - p.0, self.a.1 + t * dy - p.1);
        (qx * qx + qy * qy).sqrt()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn sample_stream(seed: u64, class: usize, index: usize) -> ChaCha8Rng {
    stream(seed, (1 << 40) | ((class as u64) << 20) | index as u64)
}

/// Renders one sample. Pure in `(config, class shape, class, index)`.
fn render(config: &SynthConfig, class_shape: &LeafShape, class: usize, index: usize) -> Sample {
    let s = config.size;
    let sf = s as f64;
    let mut rng = sample_stream(config.seed, class, index);
    let shape = class_shape.perturbed(config.jitter, &mut rng);
    let pose = Pose {
        cx: sf * (0.5 + rng.gen_range(-0.02..0.02)),
        cy: sf * (0.5 + rng.gen_range(-0.02..0.02)),
        rotation: rng.gen_range(-0.125..0.125),
        semi_major: sf * (0.39 + rng.gen_range(-0.015..0.015)),
        semi_minor: sf * (0.235 + rng.gen_range(-0.0125..0.0125)),
    };
    let (cos_r, sin_r) = (pose.rotation.cos(), pose.rotation.sin());
    let to_world = |u: f64, v: f64| -> (f64, f64) {
        let (x, y) = (u * pose.semi_major, v * pose.semi_minor);
        (
            pose.cx + x * cos_r - y * sin_r,
            pose.cy + x * sin_r + y * cos_r,
        )
    };
    let to_local = |x: f64, y: f64| -> (f64, f64) {
        let (dx, dy) = (x - pose.cx, y - pose.cy);
        (
            (dx * cos_r + dy * sin_r) / pose.semi_major,
            (-dx * sin_r + dy * cos_r) / pose.semi_minor,
        )
    };

    const OUTLINE_POINTS: usize = 160;
    let outline: Vec<(f64, f64)> = (0..OUTLINE_POINTS)
        .map(|i| {
            let phi = 2.0 * PI * i as f64 / OUTLINE_POINTS as f64;
            let r = shape.radius(phi);
            to_world(r * phi.cos(), r * phi.sin())
        })
        .collect();
    let outline_segments: Vec<Segment> = (0..OUTLINE_POINTS)
        .map(|i| Segment {
            a: outline[i],
            b: outline[(i + 1) % OUTLINE_POINTS],
        })
        .collect();

    // Midrib runs along the major axis; branches head toward the outline.
    let mut veins = vec![Segment {
        a: to_world(-0.85 * shape.radius(PI), 0.0),
        b: to_world(0.85 * shape.radius(0.0), 0.0),
    }];
    for i in 0..BRANCHES {
        let start = (shape.anchors[i], 0.0);
        let dir = (
            shape.angles[i].cos(),
            shape.sides[i] * shape.angles[i].sin(),
        );
        // March outward to find the outline in local coordinates.
        let mut t = 0.0;
        while t < 2.0 {
            let (u, v) = (start.0 + dir.0 * t, start.1 + dir.1 * t);
            let (r, phi) = ((u * u + v * v).sqrt(), v.atan2(u));
            if r >= shape.radius(phi) {
                break;
            }
            t += 0.01;
        }
        let len = t * shape.reach[i];
        veins.push(Segment {
            a: to_world(start.0, start.1),
            b: to_world(start.0 + dir.0 * len, start.1 + dir.1 * len),
        });
    }

    let leaf_rgb = [
        0.22 + rng.gen_range(-0.05..0.05),
        0.48 + rng.gen_range(-0.06..0.06),
        0.16 + rng.gen_range(-0.04..0.04),
    ];
    let vein_gain = 0.27 + rng.gen_range(-0.05..0.05);
    let edge_gain = 0.16 + rng.gen_range(-0.04..0.04);
    let bg_base = [
        0.45 + rng.gen_range(-0.15..0.15),
        0.375 + rng.gen_range(-0.125..0.125),
        0.275 + rng.gen_range(-0.125..0.125),
    ];
    // Background texture: a few random plane waves plus pixel noise.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..PI);
            let freq = rng.gen_range(2.0..9.0) * 2.0 * PI / sf;
            (
                freq * theta.cos(),
                freq * theta.sin(),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.04..0.1),
            )
        })
        .collect();

    let mut image = Image::filled(s, s, 3, 0.0);
    let mut vein_mask = BinaryMask::empty(s, s);
    let mut contour_mask = BinaryMask::empty(s, s);
    for y in 0..s {
        for x in 0..s {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let (u, v) = to_local(p.0, p.1);
            let inside = (u * u + v * v).sqrt() <= shape.radius(v.atan2(u));
            let edge_dist = outline_segments
                .iter()
                .map(|seg| seg.distance(p))
                .fold(f64::INFINITY, f64::min);
            let on_band = edge_dist <= 1.5;
            let on_vein = inside && !on_band && veins.iter().any(|seg| seg.distance(p) <= 1.0);
            vein_mask.set(x, y, on_vein);
            contour_mask.set(x, y, on_band);

            let noise = rng.gen_range(-0.05..0.05);
            let rgb = if inside || on_band {
                let mut c = leaf_rgb;
                if on_vein {
                    for ch in &mut c {
                        *ch += vein_gain;
                    }
                }
                if on_band {
                    for ch in &mut c {
                        *ch -= edge_gain;
                    }
                }
                c
            } else {
                let tex: f64 = waves
                    .iter()
                    .map(|&(kx, ky, ph, amp)| amp * (kx * p.0 + ky * p.1 + ph).sin())
                    .sum();
                [bg_base[0] + tex, bg_base[1] + tex, bg_base[2] + 0.5 * tex]
            };
            for (c, v) in rgb.iter().enumerate() {
                image.set(x, y, c, (v + noise).clamp(0.0, 1.0));
            }
        }
    }
    Sample {
        image,
        vein: vein_mask,
        contour: contour_mask,
        class_id: class,
        split: if index % 2 == 0 {
            Split::Train
        } else {
            Split::Test
        },
    }
}

/// Generates `classes × samples_per_class` samples, class-major. Even sample
/// indices go to the training split, odd ones to the test split.
pub fn generate(config: &SynthConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    let prototype = LeafShape::prototype(&mut stream(config.seed, 0));
    let mut samples = Vec::with_capacity(config.classes * config.samples_per_class);
    for class in 0..config.classes {
        let class_shape =
            prototype.perturbed(config.epsilon, &mut stream(config.seed, 1 + class as u64));
        for index in 0..config.samples_per_class {
            samples.push(render(config, &class_shape, class, index));
        }
    }
    Ok(samples)
}

pub fn split(samples: &[Sample], which: Split) -> Vec<Sample> {
    samples
        .iter()
        .filter(|s| s.split == which)
        .cloned()
        .collect()
}
