//! Class activation maps over the final backbone stage.

use crate::attention::BlendWeights;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::BinaryMask;
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Classifier-weighted sum of the final feature maps for `class_id`,
/// clamped at zero, min-max normalized and bilinearly upsampled to the input
/// size. A map with no positive evidence stays all zero; a constant positive
/// map normalizes to all ones.
pub fn cam(model: &Model, blend: BlendWeights, image: &Tensor, class_id: usize) -> Result<Image> {
    let k = model.config.classes;
    if class_id >= k {
        return Err(Error::Config(format!(
            "class id {class_id} outside [0, {k})"
        )));
    }
    let (n, _, _, _) = image.dims4("cam")?;
    if n != 1 {
        return Err(Error::shape(
            "cam",
            format!("expected a single image, got batch of {n}"),
        ));
    }
    let mut tape = Tape::new();
    let graph = model.build(&mut tape, image.clone(), blend, !blend.is_identity())?;
    let features = tape.value(graph.features);
    let (_, c, h, w) = features.dims4("cam")?;
    let weights = &model.classifier_weight.data()[class_id * c..(class_id + 1) * c];
    let mut raw = vec![0.0; h * w];
    for (plane, &wc) in features.data().chunks_exact(h * w).zip(weights) {
        for (r, &f) in raw.iter_mut().zip(plane) {
            *r += wc * f;
        }
    }
    let heat = Image::new(w, h, 1, normalize(raw))?;
    Ok(heat.resize_bilinear(model.config.input_size, model.config.input_size))
}

fn normalize(mut raw: Vec<f64>) -> Vec<f64> {
    for v in &mut raw {
        *v = v.max(0.0);
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(0.0, f64::max);
    if hi > lo {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else if hi > 0.0 {
        vec![1.0; raw.len()]
    } else {
        vec![0.0; raw.len()]
    }
}

/// Share of total heatmap intensity that falls inside `mask`; zero for an
/// all-zero heatmap.
pub fn mass_inside(heat: &Image, mask: &BinaryMask) -> f64 {
    let total: f64 = heat.data.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let inside: f64 = heat
        .data
        .iter()
        .zip(mask.bits())
        .filter(|(_, &b)| b)
        .map(|(v, _)| v)
        .sum();
    inside / total
}
