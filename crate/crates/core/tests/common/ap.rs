//! Independent AP oracle and the exhaustive detection/GT grid.

use maskguide::detect::{Detection, GtBox};
use maskguide::mask::{RegionBox, RegionClass};

/// Axis-aligned box with the image it belongs to.
#[derive(Clone, Copy, Debug)]
pub struct B {
    pub img: u8,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

pub const fn b(img: u8, x: f64, y: f64, w: f64, h: f64) -> B {
    B { img, x, y, w, h }
}

fn overlap(a: &B, c: &B) -> f64 {
    if a.img != c.img {
        return 0.0;
    }
    let ix = (a.x + a.w).min(c.x + c.w) - a.x.max(c.x);
    let iy = (a.y + a.h).min(c.y + c.h) - a.y.max(c.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.w * a.h + c.w * c.h - inter)
}

/// Enumerates the PR curve point by point: stable sort by confidence,
/// greedy claim of the best-overlapping free GT, then the area under the
/// upper envelope of precision, summed over recall steps.
pub fn oracle_ap(dets: &[(B, f64)], gts: &[B], thresh: f64) -> f64 {
    if gts.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // Insertion sort keeps ties in input order without relying on std's sort.
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && dets[order[j - 1]].1 < dets[order[j]].1 {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut claimed = vec![false; gts.len()];
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let o = overlap(&dets[d].0, gt);
            if claimed[g] || o < thresh {
                continue;
            }
            if best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        match best {
            Some((g, _)) => {
                claimed[g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            let envelope = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            area += (r - prev_recall) * envelope;
            prev_recall = r;
        }
    }
    area
}

pub fn to_detections(dets: &[(B, f64)]) -> Vec<Detection> {
    dets.iter()
        .map(|(bx, c)| Detection::new(bx.img.to_string(), region(bx), *c).unwrap())
        .collect()
}

pub fn to_gts(gts: &[B]) -> Vec<GtBox> {
    gts.iter()
        .map(|bx| GtBox {
            region: region(bx),
            image_id: bx.img.to_string(),
        })
        .collect()
}

fn region(bx: &B) -> RegionBox {
    RegionBox::new(RegionClass::Vein, bx.x, bx.y, bx.w, bx.h).unwrap()
}

/// Ground truths: two in image 0, one in image 1.
pub const GTS: [B; 3] = [
    b(0, 0.0, 0.0, 10.0, 10.0),
    b(0, 20.0, 0.0, 10.0, 10.0),
    b(1, 0.0, 0.0, 10.0, 10.0),
];

/// Candidate detections covering exact hits, partial overlaps of several
/// IoU levels, a box straddling two GTs, a miss and a cross-image hit.
pub const PALETTE: [B; 8] = [
    b(0, 0.0, 0.0, 10.0, 10.0),
    b(0, 2.0, 0.0, 10.0, 10.0),
    b(0, 5.0, 0.0, 10.0, 10.0),
    b(0, 15.0, 0.0, 10.0, 10.0),
    b(0, 20.0, 0.0, 10.0, 10.0),
    b(0, 8.0, 0.0, 14.0, 10.0),
    b(0, 50.0, 50.0, 5.0, 5.0),
    b(1, 1.0, 1.0, 10.0, 10.0),
];

pub const IOU_GRID: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Calls `f` on every configuration of the grid: 0..=3 GTs, 0..=4
/// detections from the palette, confidences from {0.1, …, 0.9} (coarsened
/// to {0.1, 0.4, 0.6, 0.9} for four detections, still enough for every
/// order and tie pattern), every IoU threshold. Returns the number of cases.
pub fn for_each_case(mut f: impl FnMut(&[(B, f64)], &[B], f64)) -> usize {
    let fine: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let coarse = [0.1, 0.4, 0.6, 0.9];
    let mut count = 0;
    for n_gt in 0..=3 {
        let gts = &GTS[..n_gt];
        for n_det in 0..=4 {
            let confs: &[f64] = if n_det == 4 { &coarse } else { &fine };
            let choices = PALETTE.len() * confs.len();
            let total = choices.pow(n_det as u32);
            let mut dets = Vec::with_capacity(n_det);
            for code in 0..total {
                dets.clear();
                let mut c = code;
                for _ in 0..n_det {
                    let k = c % choices;
                    c /= choices;
                    dets.push((PALETTE[k / confs.len()], confs[k % confs.len()]));
                }
                for &t in &IOU_GRID {
                    f(&dets, gts, t);
                    count += 1;
                }
            }
        }
    }
    count
}
