//! Region annotations, binary masks and the normalized ground-truth maps
//! that supervise the attention heads.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegionClass {
    Vein,
    Contour,
}

impl RegionClass {
    pub const ALL: [RegionClass; 2] = [RegionClass::Vein, RegionClass::Contour];

    pub fn name(self) -> &'static str {
        match self {
            RegionClass::Vein => "vein",
            RegionClass::Contour => "contour",
        }
    }
}

impl fmt::Display for RegionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vein" => Ok(RegionClass::Vein),
            "contour" | "con" => Ok(RegionClass::Contour),
            other => Err(Error::Annotation(format!(
                "unknown region class {other:?} (expected vein or contour)"
            ))),
        }
    }
}

/// Axis-aligned box in pixel units, top-left anchored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionBox {
    pub class: RegionClass,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl RegionBox {
    pub fn new(class: RegionClass, x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::Annotation("box coordinates must be finite".into()));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Annotation(format!(
                "box extent {w}×{h} is not positive"
            )));
        }
        Ok(Self { class, x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection with `[0, width] × [0, height]`, or `None` if nothing is left.
    pub fn clamp(&self, width: usize, height: usize) -> Option<RegionBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width as f64);
        let y1 = (self.y + self.h).min(height as f64);
        (x1 > x0 && y1 > y0).then_some(RegionBox {
            class: self.class,
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    fn contains_center(&self, px: usize, py: usize) -> bool {
        let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
        cx >= self.x && cx < self.x + self.w && cy >= self.y && cy < self.y + self.h
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(
                "BinaryMask::new",
                "mask dimensions must be positive",
            ));
        }
        if bits.len() != width * height {
            return Err(Error::shape(
                "BinaryMask::new",
                format!("{width}×{height} mask given {} bits", bits.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape(
                "BinaryMask::union",
                format!(
                    "{}×{} vs {}×{}",
                    self.width, self.height, other.width, other.height
                ),
            ));
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| *a || *b)
            .collect();
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    /// Each pixel becomes a `factor×factor` block.
    pub fn upsample_nearest(&self, factor: usize) -> BinaryMask {
        let (w, h) = (self.width * factor, self.height * factor);
        let bits = (0..w * h)
            .map(|i| self.get((i % w) / factor, (i / w) / factor))
            .collect();
        BinaryMask {
            width: w,
            height: h,
            bits,
        }
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self
                .bits
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

/// L1-normalized attention target at feature-map resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    degenerate: bool,
}

impl GroundTruthMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Set when the source mask was empty and the uniform fallback was used.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn uniform(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            values: vec![1.0 / n as f64; n],
            degenerate: true,
        }
    }

    /// Stacks maps of equal resolution into an `N×1×h×w` tensor.
    pub fn batch(maps: &[&GroundTruthMap]) -> Result<Tensor> {
        let first = maps
            .first()
            .ok_or_else(|| Error::shape("GroundTruthMap::batch", "no maps"))?;
        let mut data = Vec::with_capacity(maps.len() * first.values.len());
        for m in maps {
            if (m.width, m.height) != (first.width, first.height) {
                return Err(Error::shape(
                    "GroundTruthMap::batch",
                    format!(
                        "{}×{} vs {}×{}",
                        m.width, m.height, first.width, first.height
                    ),
                ));
            }
            data.extend_from_slice(&m.values);
        }
        Tensor::new(&[maps.len(), 1, first.height, first.width], data)
    }
}

/// Marks every pixel whose center lies inside a box of `class`.
pub fn rasterize_boxes(
    boxes: &[RegionBox],
    width: usize,
    height: usize,
    class: RegionClass,
) -> Result<BinaryMask> {
    if width == 0 || height == 0 {
        return Err(Error::shape(
            "rasterize_boxes",
            "mask dimensions must be positive",
        ));
    }
    let mut mask = BinaryMask::empty(width, height);
    for b in boxes.iter().filter(|b| b.class == class) {
        let clamped = b.clamp(width, height).ok_or_else(|| {
            Error::Annotation(format!(
                "{} box at ({}, {}) size {}×{} has no area inside the {width}×{height} image",
                b.class, b.x, b.y, b.w, b.h
            ))
        })?;
        let x0 = clamped.x.floor() as usize;
        let y0 = clamped.y.floor() as usize;
        let x1 = ((clamped.x + clamped.w).ceil() as usize).min(width);
        let y1 = ((clamped.y + clamped.h).ceil() as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                if clamped.contains_center(x, y) {
                    mask.set(x, y, true);
                }
            }
        }
    }
    Ok(mask)
}

/// Thresholds a single-channel image; RGB input is reduced by channel mean.
pub fn binarize_image(image: &Image, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "binarization threshold {threshold} outside (0, 1)"
        )));
    }
    let gray = image.to_gray();
    BinaryMask::new(
        gray.width,
        gray.height,
        gray.data.iter().map(|&v| v >= threshold).collect(),
    )
}

/// Average-pools `mask` down to `width×height` and L1-normalizes the result.
///
/// An empty mask yields the uniform map with the degenerate flag set.
pub fn to_ground_truth(mask: &BinaryMask, width: usize, height: usize) -> Result<GroundTruthMap> {
    if width == 0 || height == 0 || mask.width % width != 0 || mask.height % height != 0 {
        return Err(Error::shape(
            "to_ground_truth",
            format!(
                "{}×{} mask does not tile into a {width}×{height} map; resize the mask to a multiple of the target first",
                mask.width, mask.height
            ),
        ));
    }
    let (wx, wy) = (mask.width / width, mask.height / height);
    let area = (wx * wy) as f64;
    let mut values = vec![0.0; width * height];
    for (cell, v) in values.iter_mut().enumerate() {
        let (cx, cy) = (cell % width, cell / width);
        let mut count = 0usize;
        for y in cy * wy..(cy + 1) * wy {
            count += mask.bits[y * mask.width + cx * wx..y * mask.width + (cx + 1) * wx]
                .iter()
                .filter(|&&b| b)
                .count();
        }
        *v = count as f64 / area;
    }
    let total: f64 = values.iter().sum();
    if total == 0.0 {
        return Ok(GroundTruthMap::uniform(width, height));
    }
    for v in &mut values {
        *v /= total;
    }
    Ok(GroundTruthMap {
        width,
        height,
        values,
        degenerate: false,
    })
}
