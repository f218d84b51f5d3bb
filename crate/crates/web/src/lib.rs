//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every function returns plain bytes or text so the page can stay a single
//! HTML file: images come back as RGBA buffers for `ImageData`.

use maskguide::attention::{attention_map, AttentionHead};
use maskguide::detect::{mean_ap, parse_detections, parse_ground_truth, per_class_ap};
use maskguide::image::Image;
use maskguide::mask::{to_ground_truth, BinaryMask};
use maskguide::synth::{generate, Sample, SynthConfig};
use maskguide::Tensor;
use wasm_bindgen::prelude::*;

fn err(e: maskguide::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn leaf(
    seed: u64,
    classes: usize,
    class_id: usize,
    epsilon: f64,
    size: usize,
) -> Result<Sample, JsError> {
    let samples = generate(&SynthConfig {
        classes,
        samples_per_class: 2,
        size,
        seed,
        epsilon,
        ..SynthConfig::default()
    })
    .map_err(err)?;
    samples
        .into_iter()
        .find(|s| s.class_id == class_id)
        .ok_or_else(|| JsError::new(&format!("class {class_id} out of range 0..{classes}")))
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgba(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.width * img.height * 4);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                out.push(byte(img.get(x, y, c.min(img.channels - 1))));
            }
            out.push(255);
        }
    }
    out
}

/// Values scaled by their peak and drawn with a black-red-yellow ramp,
/// upsampled by `factor` with nearest neighbour.
fn heat(values: &[f64], side: usize, factor: usize) -> Vec<u8> {
    let peak = values.iter().cloned().fold(0.0, f64::max);
    let s = side * factor;
    let mut out = Vec::with_capacity(s * s * 4);
    for y in 0..s {
        for x in 0..s {
            let v = if peak > 0.0 {
                values[(y / factor) * side + x / factor] / peak
            } else {
                0.0
            };
            out.extend([byte(2.0 * v), byte(2.0 * v - 1.0), 0, 255]);
        }
    }
    out
}

/// Rendered leaf image, `size × size` RGBA.
#[wasm_bindgen]
pub fn leaf_image(
    seed: u64,
    classes: usize,
    class_id: usize,
    epsilon: f64,
    size: usize,
) -> Result<Vec<u8>, JsError> {
    Ok(rgba(&leaf(seed, classes, class_id, epsilon, size)?.image))
}

/// Vein mask in red, contour band in blue.
#[wasm_bindgen]
pub fn leaf_masks(
    seed: u64,
    classes: usize,
    class_id: usize,
    epsilon: f64,
    size: usize,
) -> Result<Vec<u8>, JsError> {
    let s = leaf(seed, classes, class_id, epsilon, size)?;
    let mut out = Vec::with_capacity(size * size * 4);
    for (v, c) in s.vein.bits().iter().zip(s.contour.bits()) {
        out.extend([
            if *v { 230 } else { 20 },
            20,
            if *c { 230 } else { 20 },
            255,
        ]);
    }
    Ok(out)
}

/// Ground-truth attention map of one mask (`"vein"` or `"contour"`) pooled
/// by `pool`, drawn back at full size.
#[wasm_bindgen]
pub fn ground_truth(
    seed: u64,
    classes: usize,
    class_id: usize,
    epsilon: f64,
    size: usize,
    region: &str,
    pool: usize,
) -> Result<Vec<u8>, JsError> {
    let s = leaf(seed, classes, class_id, epsilon, size)?;
    let mask: &BinaryMask = match region {
        "vein" => &s.vein,
        "contour" => &s.contour,
        other => return Err(JsError::new(&format!("unknown region {other:?}"))),
    };
    if pool == 0 || size % pool != 0 {
        return Err(JsError::new("pool must divide the image size"));
    }
    let side = size / pool;
    let gt = to_ground_truth(mask, side, side).map_err(err)?;
    Ok(heat(gt.values(), side, pool))
}

/// Spatial attention of a single head applied directly to the leaf's RGB
/// planes: 1×1 conv over (channel max, channel mean), softmax over pixels.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn attention(
    seed: u64,
    classes: usize,
    class_id: usize,
    epsilon: f64,
    size: usize,
    w_max: f64,
    w_mean: f64,
    bias: f64,
) -> Result<Vec<u8>, JsError> {
    let s = leaf(seed, classes, class_id, epsilon, size)?;
    let x: Tensor = s.image.to_tensor();
    let a = attention_map(&x, &AttentionHead::new(w_max, w_mean, bias)).map_err(err)?;
    Ok(heat(a.data(), size, 1))
}

/// Per-class AP and mAP for detection and ground-truth text in the
/// `image_id class x y w h [confidence]` line format.
#[wasm_bindgen]
pub fn detect_eval(detections: &str, ground_truth: &str, iou: f64) -> Result<String, JsError> {
    let dets = parse_detections(detections, "detections").map_err(err)?;
    let gts = parse_ground_truth(ground_truth, "ground truth").map_err(err)?;
    let per_class = per_class_ap(&dets, &gts, iou).map_err(err)?;
    let mut out = String::new();
    for (class, r) in &per_class {
        out.push_str(&format!("ap_{}={:.6}\n", class.name(), r.ap));
    }
    let aps = per_class.iter().map(|(c, r)| (*c, r.ap)).collect();
    out.push_str(&format!("map={:.6}\n", mean_ap(&aps).map_err(err)?));
    Ok(out)
}
