//! Geometric augmentation applied identically to an image and its masks.

use rand::Rng;

use crate::mask::BinaryMask;
use crate::synth::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformMode {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformOptions {
    pub crop: bool,
    pub flip: bool,
}

impl Default for TransformOptions {
    fn default() -> Self {
        Self {
            crop: true,
            flip: true,
        }
    }
}

/// Side length images are enlarged to before a random crop back to `size`.
/// Keeps the 512:448 enlargement ratio, rounded down so that crop offsets
/// stay within `0.14·size`.
pub fn train_resize(size: usize) -> usize {
    size + size * 14 / 100
}

/// Geometry drawn for one training transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainDraw {
    pub offset_x: usize,
    pub offset_y: usize,
    pub flip: bool,
}

impl TrainDraw {
    /// Crop offsets first, then the flip decision; nothing is drawn for a
    /// disabled step.
    pub fn sample(size: usize, opts: TransformOptions, rng: &mut impl Rng) -> Self {
        let (offset_x, offset_y) = if opts.crop {
            let slack = train_resize(size) - size;
            (rng.gen_range(0..=slack), rng.gen_range(0..=slack))
        } else {
            (0, 0)
        };
        let flip = opts.flip && rng.gen_bool(0.5);
        Self {
            offset_x,
            offset_y,
            flip,
        }
    }
}

pub fn resize_nearest(mask: &BinaryMask, width: usize, height: usize) -> BinaryMask {
    if (width, height) == (mask.width(), mask.height()) {
        return mask.clone();
    }
    let bits = (0..width * height)
        .map(|i| {
            let sx = (i % width) * mask.width() / width;
            let sy = (i / width) * mask.height() / height;
            mask.get(sx, sy)
        })
        .collect();
    BinaryMask::new(width, height, bits).expect("dimensions positive")
}

pub fn flip_mask(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let bits = (0..w * h).map(|i| mask.get(w - 1 - i % w, i / w)).collect();
    BinaryMask::new(w, h, bits).expect("same dimensions")
}

fn crop_mask(mask: &BinaryMask, x0: usize, y0: usize, size: usize) -> BinaryMask {
    let bits = (0..size * size)
        .map(|i| mask.get(x0 + i % size, y0 + i / size))
        .collect();
    BinaryMask::new(size, size, bits).expect("dimensions positive")
}

/// Applies a fixed train-time geometry.
pub fn apply_train(
    sample: &Sample,
    size: usize,
    opts: TransformOptions,
    draw: TrainDraw,
) -> Sample {
    let mut out = sample.clone();
    if opts.crop {
        let big = train_resize(size);
        out.image =
            sample
                .image
                .resize_bilinear(big, big)
                .crop(draw.offset_x, draw.offset_y, size, size);
        out.vein = crop_mask(
            &resize_nearest(&sample.vein, big, big),
            draw.offset_x,
            draw.offset_y,
            size,
        );
        out.contour = crop_mask(
            &resize_nearest(&sample.contour, big, big),
            draw.offset_x,
            draw.offset_y,
            size,
        );
    } else {
        out.image = sample.image.resize_bilinear(size, size);
        out.vein = resize_nearest(&sample.vein, size, size);
        out.contour = resize_nearest(&sample.contour, size, size);
    }
    if draw.flip {
        out.image = out.image.flip_horizontal();
        out.vein = flip_mask(&out.vein);
        out.contour = flip_mask(&out.contour);
    }
    out
}

/// Train mode: enlarge, random crop to `size`, flip with probability one
/// half. Test mode: resize straight to `size` without touching `rng`.
pub fn transform(
    sample: &Sample,
    size: usize,
    mode: TransformMode,
    opts: TransformOptions,
    rng: &mut impl Rng,
) -> Sample {
    match mode {
        TransformMode::Train => {
            let draw = TrainDraw::sample(size, opts, rng);
            apply_train(sample, size, opts, draw)
        }
        TransformMode::Test => apply_train(
            sample,
            size,
            TransformOptions {
                crop: false,
                flip: false,
            },
            TrainDraw {
                offset_x: 0,
                offset_y: 0,
                flip: false,
            },
        ),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::image::Image;
    use crate::synth::Split;

    fn toy(size: usize) -> Sample {
        let mut vein = BinaryMask::empty(size, size);
        let mut contour = BinaryMask::empty(size, size);
        let mut image = Image::filled(size, size, 3, 0.0);
        for y in 0..size {
            for x in 0..size {
                let v = (x * 7 + y * 3) % 5 == 0;
                vein.set(x, y, v);
                contour.set(x, y, x < size / 3);
                image.set(x, y, 0, if v { 1.0 } else { 0.0 });
                image.set(x, y, 1, x as f64 / size as f64);
                image.set(x, y, 2, y as f64 / size as f64);
            }
        }
        Sample {
            image,
            vein,
            contour,
            class_id: 0,
            split: Split::Train,
        }
    }

    #[test]
    fn test_mode_ignores_rng() {
        let s = toy(32);
        let a = transform(
            &s,
            32,
            TransformMode::Test,
            TransformOptions::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let b = transform(
            &s,
            32,
            TransformMode::Test,
            TransformOptions::default(),
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        assert_eq!(a, b);
        assert_eq!(a, s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = toy(16);
        let opts = TransformOptions {
            crop: false,
            flip: true,
        };
        let draw = TrainDraw {
            offset_x: 0,
            offset_y: 0,
            flip: true,
        };
        let once = apply_train(&s, 16, opts, draw);
        assert_ne!(once, s);
        assert_eq!(apply_train(&once, 16, opts, draw), s);
    }

    #[test]
    fn crop_offsets_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for size in [32usize, 64, 100] {
            let bound = 0.14 * size as f64;
            let mut hit_max = false;
            for _ in 0..10_000 {
                let d = TrainDraw::sample(size, TransformOptions::default(), &mut rng);
                assert!((d.offset_x as f64) <= bound && (d.offset_y as f64) <= bound);
                hit_max |= d.offset_x == train_resize(size) - size;
            }
            assert!(hit_max);
        }
    }

    #[test]
    fn flip_rate_is_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flips = (0..10_000)
            .filter(|_| TrainDraw::sample(64, TransformOptions::default(), &mut rng).flip)
            .count();
        assert!((4_800..5_200).contains(&flips), "{flips}");
    }

    #[test]
    fn flip_keeps_masks_aligned_with_image() {
        let s = toy(12);
        let draw = TrainDraw {
            offset_x: 0,
            offset_y: 0,
            flip: true,
        };
        let t = apply_train(
            &s,
            12,
            TransformOptions {
                crop: false,
                flip: true,
            },
            draw,
        );
        for y in 0..12 {
            for x in 0..12 {
                assert_eq!(t.vein.get(x, y), t.image.get(x, y, 0) == 1.0);
                assert_eq!(t.vein.get(x, y), s.vein.get(11 - x, y));
            }
        }
    }
}
