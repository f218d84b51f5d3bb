//! Region-detection scoring: IoU, per-class average precision and mAP.
//!
//! Detections are processed in descending confidence (stable, so ties keep
//! input order). Each one claims the highest-IoU ground truth of the same
//! image that is still unclaimed; it counts as a true positive when that IoU
//! reaches the threshold. AP is the area under the precision envelope
//! (all-point interpolation).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::{RegionBox, RegionClass};

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub region: RegionBox,
    pub confidence: f64,
    pub image_id: String,
}

impl Detection {
    pub fn new(image_id: impl Into<String>, region: RegionBox, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Annotation(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            region,
            confidence,
            image_id: image_id.into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtBox {
    pub region: RegionBox,
    pub image_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApWarning {
    /// Detections were given but there is nothing to find; AP is 0.
    NoGroundTruth,
    /// Neither detections nor ground truth; AP is defined as 1.
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub warning: Option<ApWarning>,
}

pub fn iou(a: &RegionBox, b: &RegionBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// True-positive flag per detection, in descending-confidence order.
fn match_detections(dets: &[Detection], gts: &[GtBox], iou_thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut claimed = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let det = &dets[d];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if claimed[g] || gt.image_id != det.image_id {
                    continue;
                }
                let o = iou(&det.region, &gt.region);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, o)) if o >= iou_thresh => {
                    claimed[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

pub fn average_precision(dets: &[Detection], gts: &[GtBox], iou_thresh: f64) -> Result<ApResult> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::Config(format!(
            "IoU threshold {iou_thresh} outside (0, 1]"
        )));
    }
    if gts.is_empty() {
        return Ok(if dets.is_empty() {
            ApResult {
                ap: 1.0,
                warning: Some(ApWarning::Empty),
            }
        } else {
            ApResult {
                ap: 0.0,
                warning: Some(ApWarning::NoGroundTruth),
            }
        });
    }
    let hits = match_detections(dets, gts, iou_thresh);
    let n_gt = gts.len() as f64;
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(hits.len());
    for (i, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        curve.push((tp as f64 / n_gt, tp as f64 / (i + 1) as f64));
    }
    // Precision envelope, sweeping from the lowest-confidence end.
    let mut envelope = 0.0f64;
    for point in curve.iter_mut().rev() {
        envelope = envelope.max(point.1);
        point.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in curve {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ApResult { ap, warning: None })
}

pub fn mean_ap(per_class: &BTreeMap<RegionClass, f64>) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::Config("mAP needs at least one class".into()));
    }
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// AP for every class that appears among detections or ground truth.
pub fn per_class_ap(
    dets: &[(RegionClass, Detection)],
    gts: &[(RegionClass, GtBox)],
    iou_thresh: f64,
) -> Result<BTreeMap<RegionClass, ApResult>> {
    let mut classes: Vec<RegionClass> = dets
        .iter()
        .map(|d| d.0)
        .chain(gts.iter().map(|g| g.0))
        .collect();
    classes.sort();
    classes.dedup();
    let mut out = BTreeMap::new();
    for class in classes {
        let d: Vec<Detection> = dets
            .iter()
            .filter(|x| x.0 == class)
            .map(|x| x.1.clone())
            .collect();
        let g: Vec<GtBox> = gts
            .iter()
            .filter(|x| x.0 == class)
            .map(|x| x.1.clone())
            .collect();
        out.insert(class, average_precision(&d, &g, iou_thresh)?);
    }
    Ok(out)
}

fn parse_records(
    text: &str,
    file: &str,
    with_confidence: bool,
) -> Result<Vec<(String, RegionBox, f64)>> {
    let expected = if with_confidence { 7 } else { 6 };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            file: file.to_string(),
            line: i + 1,
            message,
        };
        if fields.len() != expected {
            return Err(err(format!(
                "expected {expected} fields, found {}",
                fields.len()
            )));
        }
        let class: RegionClass = fields[1].parse().map_err(|e: Error| err(e.to_string()))?;
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad number {s:?}")))
        };
        let region = RegionBox::new(
            class,
            num(fields[2])?,
            num(fields[3])?,
            num(fields[4])?,
            num(fields[5])?,
        )
        .map_err(|e| err(e.to_string()))?;
        let confidence = if with_confidence {
            let c = num(fields[6])?;
            if !(0.0..=1.0).contains(&c) {
                return Err(err(format!("confidence {c} outside [0, 1]")));
            }
            c
        } else {
            1.0
        };
        out.push((fields[0].to_string(), region, confidence));
    }
    Ok(out)
}

/// Parses `image_id class x y w h confidence` lines.
pub fn parse_detections(text: &str, file: &str) -> Result<Vec<(RegionClass, Detection)>> {
    Ok(parse_records(text, file, true)?
        .into_iter()
        .map(|(image_id, region, confidence)| {
            (
                region.class,
                Detection {
                    region,
                    confidence,
                    image_id,
                },
            )
        })
        .collect())
}

/// Parses `image_id class x y w h` lines.
pub fn parse_ground_truth(text: &str, file: &str) -> Result<Vec<(RegionClass, GtBox)>> {
    Ok(parse_records(text, file, false)?
        .into_iter()
        .map(|(image_id, region, _)| (region.class, GtBox { region, image_id }))
        .collect())
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<(RegionClass, Detection)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, &path.display().to_string())
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<(RegionClass, GtBox)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ground_truth(&text, &path.display().to_string())
}
