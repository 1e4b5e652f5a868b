//! Mean-average-precision evaluation: greedy score-ordered matching at a
//! fixed IoU threshold, with all-point (precision envelope) or 11-point
//! interpolated AP.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::GtBox;
use crate::detector::Detection;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApVariant {
    AllPoint,
    #[serde(rename = "11pt")]
    ElevenPoint,
}

impl std::str::FromStr for ApVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<ApVariant> {
        match s {
            "allpoint" => Ok(ApVariant::AllPoint),
            "11pt" => Ok(ApVariant::ElevenPoint),
            other => Err(Error::config(format!("unknown AP variant `{other}`"))),
        }
    }
}

/// One class's AP and the points of its raw precision-recall curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub num_gt: usize,
    pub ap: f64,
    /// (recall, precision) at each distinct score threshold, descending.
    /// A threshold keeps a whole tie group, so tied detections share one
    /// operating point.
    pub pr_points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapReport {
    pub iou_thresh: f64,
    pub variant: ApVariant,
    /// One entry per class with at least one ground-truth box.
    pub per_class: Vec<ClassEval>,
    /// Unweighted mean of per-class APs (0 when no class has ground truth).
    pub map: f64,
}

/// Flattened detection with its provenance, in the canonical evaluation
/// order: score descending, ties by image id then by per-image box order.
struct Ranked<'a> {
    image: &'a str,
    order: usize,
    det: &'a Detection,
}

fn rank_class<'a>(
    detections: &'a BTreeMap<String, Vec<Detection>>,
    class_id: usize,
) -> Vec<Ranked<'a>> {
    let mut ranked: Vec<Ranked<'a>> = detections
        .iter()
        .flat_map(|(image, dets)| {
            dets.iter()
                .enumerate()
                .filter(|(_, d)| d.class_id == class_id)
                .map(move |(order, det)| Ranked { image, order, det })
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.det
            .score
            .partial_cmp(&a.det.score)
            .unwrap()
            .then_with(|| a.image.cmp(b.image))
            .then_with(|| a.order.cmp(&b.order))
    });
    ranked
}

/// Greedy matching: walk ranked detections, each may claim the highest-IoU
/// still-unmatched ground truth of its class in its image (IoU >= thresh).
/// Returns per-detection TP flags.
fn match_class(
    ranked: &[Ranked<'_>],
    gts: &BTreeMap<String, Vec<GtBox>>,
    class_id: usize,
    iou_thresh: f64,
) -> Vec<bool> {
    let mut used: BTreeMap<&str, Vec<bool>> = gts
        .iter()
        .map(|(id, g)| (id.as_str(), vec![false; g.len()]))
        .collect();
    ranked
        .iter()
        .map(|r| {
            let gt_list = &gts[r.image];
            let used_list = used.get_mut(r.image).unwrap();
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gt_list.iter().enumerate() {
                if g.class_id != class_id || used_list[i] {
                    continue;
                }
                let iou = g.bbox.iou(&r.det.bbox);
                if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((i, iou));
                }
            }
            match best {
                Some((i, _)) => {
                    used_list[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn ap_from_pr(points: &[(f64, f64)], variant: ApVariant) -> f64 {
    match variant {
        ApVariant::AllPoint => {
            // Integrate the precision envelope over recall.
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (i, &(r, _)) in points.iter().enumerate() {
                if r > prev_recall {
                    let envelope = points[i..]
                        .iter()
                        .map(|&(_, p)| p)
                        .fold(0.0f64, f64::max);
                    ap += (r - prev_recall) * envelope;
                    prev_recall = r;
                }
            }
            ap
        }
        ApVariant::ElevenPoint => {
            let mut sum = 0.0;
            for k in 0..=10 {
                let r0 = k as f64 / 10.0;
                let p = points
                    .iter()
                    .filter(|&&(r, _)| r >= r0)
                    .map(|&(_, p)| p)
                    .fold(0.0f64, f64::max);
                sum += p;
            }
            sum / 11.0
        }
    }
}

/// Evaluate detections against ground truth. `gts` must cover every image id
/// appearing in `detections`; images with no detections contribute misses.
pub fn evaluate_map(
    detections: &BTreeMap<String, Vec<Detection>>,
    gts: &BTreeMap<String, Vec<GtBox>>,
    num_classes: usize,
    iou_thresh: f64,
    variant: ApVariant,
) -> Result<MapReport> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::contract("evaluate_map: iou_thresh must be in [0, 1]"));
    }
    for image in detections.keys() {
        if !gts.contains_key(image) {
            return Err(Error::contract(format!(
                "evaluate_map: detection references unknown image id {image}"
            )));
        }
    }
    let mut per_class = Vec::new();
    for class_id in 0..num_classes {
        let num_gt: usize = gts
            .values()
            .map(|g| g.iter().filter(|b| b.class_id == class_id).count())
            .sum();
        if num_gt == 0 {
            continue;
        }
        let ranked = rank_class(detections, class_id);
        let tp_flags = match_class(&ranked, gts, class_id, iou_thresh);
        let mut tp = 0usize;
        let mut pr_points = Vec::new();
        let mut i = 0;
        while i < ranked.len() {
            let mut j = i;
            while j < ranked.len() && ranked[j].det.score == ranked[i].det.score {
                if tp_flags[j] {
                    tp += 1;
                }
                j += 1;
            }
            pr_points.push((tp as f64 / num_gt as f64, tp as f64 / j as f64));
            i = j;
        }
        let ap = ap_from_pr(&pr_points, variant);
        per_class.push(ClassEval { class_id, num_gt, ap, pr_points });
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    Ok(MapReport { iou_thresh, variant, per_class, map })
}
