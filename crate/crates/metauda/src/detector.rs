//! Miniature two-stage detector: a 2-block conv encoder, a single-scale
//! region proposal network and a small region classification head.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, ParameterSet, TensorData, Var};
use crate::data::{BBox, GtBox};
use crate::nn::{conv2d, fully_connected, init_uniform, maxpool2d, smooth_l1, softmax_ce};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub in_channels: usize,
    /// Channels of the two encoder blocks; the second is the feature width C.
    pub enc_ch: [usize; 2],
    pub anchor_sizes: Vec<f64>,
    /// Number of foreground classes (background is handled internally).
    pub num_classes: usize,
    pub roi_dim: usize,
    pub max_proposals: usize,
    pub proposal_nms_iou: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rcnn_pos_iou: f64,
    pub detection_nms_iou: f64,
    pub detection_score_thresh: f64,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            in_channels: 1,
            enc_ch: [8, 16],
            anchor_sizes: vec![6.0, 12.0],
            num_classes: 3,
            roi_dim: 128,
            max_proposals: 16,
            proposal_nms_iou: 0.7,
            rpn_pos_iou: 0.5,
            rpn_neg_iou: 0.3,
            rcnn_pos_iou: 0.5,
            detection_nms_iou: 0.5,
            detection_score_thresh: 0.05,
            max_detections: 10,
        }
    }
}

impl DetectorConfig {
    /// Two conv+pool blocks.
    pub const STRIDE: usize = 4;

    pub fn feature_channels(&self) -> usize {
        self.enc_ch[1]
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len()
    }
}

/// Grid anchor in center form; a pure function of image size and config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn to_bbox(&self) -> BBox {
        BBox::new(
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn from_bbox(b: &BBox) -> Anchor {
        let (cx, cy) = b.center();
        Anchor { cx, cy, w: b.width(), h: b.height() }
    }
}

/// Scored class-agnostic region.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
}

/// Final scored detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// (dx, dy, dlog w, dlog h) of `gt` relative to `anchor`.
pub fn encode_box(gt: &BBox, anchor: &Anchor) -> [f64; 4] {
    let (gcx, gcy) = gt.center();
    [
        (gcx - anchor.cx) / anchor.w,
        (gcy - anchor.cy) / anchor.h,
        (gt.width() / anchor.w).ln(),
        (gt.height() / anchor.h).ln(),
    ]
}

pub fn decode_box(anchor: &Anchor, d: &[f64; 4]) -> BBox {
    let cx = d[0] * anchor.w + anchor.cx;
    let cy = d[1] * anchor.h + anchor.cy;
    let w = anchor.w * d[2].exp();
    let h = anchor.h * d[3].exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Anchor grid for an (fh x fw) feature map. Index layout matches the RPN
/// head: a * fh * fw + y * fw + x.
pub fn build_anchors(cfg: &DetectorConfig, fh: usize, fw: usize) -> Vec<Anchor> {
    let stride = DetectorConfig::STRIDE as f64;
    let mut anchors = Vec::with_capacity(cfg.anchors_per_cell() * fh * fw);
    for &size in &cfg.anchor_sizes {
        for y in 0..fh {
            for x in 0..fw {
                anchors.push(Anchor {
                    cx: (x as f64 + 0.5) * stride,
                    cy: (y as f64 + 0.5) * stride,
                    w: size,
                    h: size,
                });
            }
        }
    }
    anchors
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Positive { gt_idx: usize },
    Negative,
    Ignore,
}

/// Standard max-IoU matching. Every gt forces its single best anchor positive
/// (ties broken by lowest anchor index).
pub fn assign_anchors(
    anchors: &[Anchor],
    gt_boxes: &[GtBox],
    pos_iou: f64,
    neg_iou: f64,
) -> Result<Vec<AnchorLabel>> {
    if !(0.0..=1.0).contains(&neg_iou) || !(0.0..=1.0).contains(&pos_iou) || neg_iou > pos_iou {
        return Err(Error::contract("assign_anchors: need 0 <= neg_iou <= pos_iou <= 1"));
    }
    if gt_boxes.is_empty() {
        return Ok(vec![AnchorLabel::Negative; anchors.len()]);
    }
    let mut labels = vec![AnchorLabel::Ignore; anchors.len()];
    let mut best_iou = vec![0.0f64; anchors.len()];
    let mut best_gt = vec![0usize; anchors.len()];
    for (ai, a) in anchors.iter().enumerate() {
        let ab = a.to_bbox();
        for (gi, g) in gt_boxes.iter().enumerate() {
            let iou = ab.iou(&g.bbox);
            if iou > best_iou[ai] {
                best_iou[ai] = iou;
                best_gt[ai] = gi;
            }
        }
        if best_iou[ai] <= neg_iou {
            labels[ai] = AnchorLabel::Negative;
        } else if best_iou[ai] >= pos_iou {
            labels[ai] = AnchorLabel::Positive { gt_idx: best_gt[ai] };
        }
    }
    // Argmax rule: each gt claims its highest-IoU anchor regardless of
    // threshold; claims are resolved toward the higher IoU.
    let mut forced_iou = vec![f64::NEG_INFINITY; anchors.len()];
    for (gi, g) in gt_boxes.iter().enumerate() {
        let mut best_ai = 0;
        let mut best = f64::NEG_INFINITY;
        for (ai, a) in anchors.iter().enumerate() {
            let iou = a.to_bbox().iou(&g.bbox);
            if iou > best {
                best = iou;
                best_ai = ai;
            }
        }
        if best > forced_iou[best_ai] {
            forced_iou[best_ai] = best;
            labels[best_ai] = AnchorLabel::Positive { gt_idx: gi };
        }
    }
    Ok(labels)
}

/// Greedy NMS over (box, score) pairs sorted by score descending with index
/// tiebreak. Returns kept indices in selection order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&j| boxes[i].iou(&boxes[j]) < iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Detector parameter paths all live under "det.".
pub fn init_detector_params(cfg: &DetectorConfig, rng: &mut ChaCha8Rng) -> ParameterSet {
    let mut p = ParameterSet::new();
    let [c1, c2] = cfg.enc_ch;
    let cin = cfg.in_channels;
    let a = cfg.anchors_per_cell();
    let k = cfg.num_classes + 1;
    let conv = |p: &mut ParameterSet, name: &str, f: usize, c: usize, ks: usize, rng: &mut ChaCha8Rng| {
        p.insert(format!("det.{name}.w"), init_uniform(rng, &[f, c, ks, ks], c * ks * ks));
        p.insert(format!("det.{name}.b"), TensorData::zeros(vec![f]));
    };
    conv(&mut p, "enc.c1", c1, cin, 3, rng);
    conv(&mut p, "enc.c2", c2, c1, 3, rng);
    conv(&mut p, "rpn.conv", c2, c2, 3, rng);
    conv(&mut p, "rpn.cls", 2 * a, c2, 1, rng);
    conv(&mut p, "rpn.reg", 4 * a, c2, 1, rng);
    let pooled = c2 * 4;
    p.insert("det.roi.fc.w", init_uniform(rng, &[pooled, cfg.roi_dim], pooled));
    p.insert("det.roi.fc.b", TensorData::zeros(vec![cfg.roi_dim]));
    p.insert("det.rcnn.cls.w", init_uniform(rng, &[cfg.roi_dim, k], cfg.roi_dim));
    p.insert("det.rcnn.cls.b", TensorData::zeros(vec![k]));
    p.insert("det.rcnn.reg.w", init_uniform(rng, &[cfg.roi_dim, 4], cfg.roi_dim));
    p.insert("det.rcnn.reg.b", TensorData::zeros(vec![4]));
    p
}

/// image: [in_ch, H, W] -> [C, H/4, W/4].
pub fn encoder_forward(cfg: &DetectorConfig, bound: &BoundParams, image: &Var) -> Result<Var> {
    let s = image.shape();
    if s.len() != 3 || s[0] != cfg.in_channels {
        return Err(Error::contract("encoder_forward: image must be [in_ch, H, W]"));
    }
    if s[1] % DetectorConfig::STRIDE != 0 || s[2] % DetectorConfig::STRIDE != 0 {
        return Err(Error::contract(format!(
            "encoder_forward: extents {}x{} not divisible by stride {}",
            s[1],
            s[2],
            DetectorConfig::STRIDE
        )));
    }
    let h1 = conv2d(image, bound.var("det.enc.c1.w"), bound.var("det.enc.c1.b"), 1).relu();
    let h1 = maxpool2d(&h1, 2);
    let h2 = conv2d(&h1, bound.var("det.enc.c2.w"), bound.var("det.enc.c2.b"), 1).relu();
    Ok(maxpool2d(&h2, 2))
}

/// Per-anchor class logits [N, 2] and box deltas [N, 4], aligned with
/// `build_anchors` ordering.
pub fn rpn_forward(cfg: &DetectorConfig, bound: &BoundParams, f_img: &Var) -> (Var, Var) {
    let s = f_img.shape();
    let (fh, fw) = (s[1], s[2]);
    let a = cfg.anchors_per_cell();
    let n = a * fh * fw;
    let hidden = conv2d(f_img, bound.var("det.rpn.conv.w"), bound.var("det.rpn.conv.b"), 1).relu();
    let cls_map = conv2d(&hidden, bound.var("det.rpn.cls.w"), bound.var("det.rpn.cls.b"), 0);
    let reg_map = conv2d(&hidden, bound.var("det.rpn.reg.w"), bound.var("det.rpn.reg.b"), 0);
    // channel (group*a_idx + comp) at (y, x) -> row a_idx*fh*fw + y*fw + x
    let per_anchor = |map: &Var, comps: usize| -> Var {
        let cells = fh * fw;
        let mut idx = Vec::with_capacity(n * comps);
        for ai in 0..a {
            for cell in 0..cells {
                for comp in 0..comps {
                    idx.push(((ai * comps + comp) * cells + cell) as i64);
                }
            }
        }
        map.gather(Rc::new(idx), vec![n, comps])
    };
    (per_anchor(&cls_map, 2), per_anchor(&reg_map, 4))
}

/// Decode, clip, score-sort, NMS, cap. Purely numeric (no gradient path).
pub fn select_proposals(
    cfg: &DetectorConfig,
    anchors: &[Anchor],
    rpn_cls: &Var,
    rpn_reg: &Var,
    img_w: f64,
    img_h: f64,
) -> Vec<Proposal> {
    let cls = rpn_cls.data();
    let reg = rpn_reg.data();
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for (i, a) in anchors.iter().enumerate() {
        let d = [reg[4 * i], reg[4 * i + 1], reg[4 * i + 2], reg[4 * i + 3]];
        let b = decode_box(a, &d).clip(img_w, img_h);
        // 2-way softmax objectness
        let (l0, l1) = (cls[2 * i], cls[2 * i + 1]);
        let m = l0.max(l1);
        let score = ((l1 - m).exp()) / ((l0 - m).exp() + (l1 - m).exp());
        boxes.push(b);
        scores.push(score);
    }
    let valid: Vec<usize> = (0..boxes.len())
        .filter(|&i| boxes[i].width() > 1e-3 && boxes[i].height() > 1e-3)
        .collect();
    let vboxes: Vec<BBox> = valid.iter().map(|&i| boxes[i]).collect();
    let vscores: Vec<f64> = valid.iter().map(|&i| scores[i]).collect();
    let kept = nms(&vboxes, &vscores, cfg.proposal_nms_iou);
    kept.into_iter()
        .take(cfg.max_proposals)
        .map(|i| Proposal { bbox: vboxes[i], score: vscores[i] })
        .collect()
}

/// 2x2 max ROI pooling. Boxes must already be clipped to the image; each box
/// is mapped to feature cells by dividing by the stride. Output rows are
/// C*4-dim vectors (channel-major, then sub-cell).
pub fn roi_pool(f_img: &Var, boxes: &[BBox]) -> Result<Var> {
    let s = f_img.shape();
    let (c, fh, fw) = (s[0], s[1], s[2]);
    let stride = DetectorConfig::STRIDE as f64;
    let data = f_img.data();
    let mut idx = Vec::with_capacity(boxes.len() * c * 4);
    for b in boxes {
        let fx0 = (b.x_min / stride).floor() as i64;
        let fy0 = (b.y_min / stride).floor() as i64;
        let fx1 = (b.x_max / stride).ceil() as i64;
        let fy1 = (b.y_max / stride).ceil() as i64;
        if fx1 <= 0 || fy1 <= 0 || fx0 >= fw as i64 || fy0 >= fh as i64 {
            return Err(Error::contract("roi_pool: box fully outside feature map"));
        }
        let x0 = fx0.max(0) as usize;
        let y0 = fy0.max(0) as usize;
        let x1 = (fx1 as usize).min(fw).max(x0 + 1);
        let y1 = (fy1 as usize).min(fh).max(y0 + 1);
        let span = |lo: usize, hi: usize, j: usize| -> (usize, usize) {
            let w = hi - lo;
            let start = lo + j * w / 2;
            let end = lo + (j + 1) * w / 2;
            if end <= start {
                // degenerate sub-cell: single nearest cell
                let cell = start.min(hi - 1);
                (cell, cell + 1)
            } else {
                (start, end)
            }
        };
        for ch in 0..c {
            for i in 0..2 {
                for j in 0..2 {
                    let (ys, ye) = span(y0, y1, i);
                    let (xs, xe) = span(x0, x1, j);
                    let mut best = ch * fh * fw + ys * fw + xs;
                    for y in ys..ye {
                        for x in xs..xe {
                            let cand = ch * fh * fw + y * fw + x;
                            if data[cand] > data[best] {
                                best = cand;
                            }
                        }
                    }
                    idx.push(best as i64);
                }
            }
        }
    }
    Ok(f_img.gather(Rc::new(idx), vec![boxes.len(), c * 4]))
}

/// Pool rois and run the region head: (features [R, roi_dim], class logits
/// [R, K+1], box deltas [R, 4]).
pub fn rcnn_head(
    cfg: &DetectorConfig,
    bound: &BoundParams,
    f_img: &Var,
    rois: &[BBox],
) -> Result<(Var, Var, Var)> {
    let pooled = roi_pool(f_img, rois)?;
    let feat = fully_connected(&pooled, bound.var("det.roi.fc.w"), bound.var("det.roi.fc.b")).relu();
    let logits = fully_connected(&feat, bound.var("det.rcnn.cls.w"), bound.var("det.rcnn.cls.b"));
    let deltas = fully_connected(&feat, bound.var("det.rcnn.reg.w"), bound.var("det.rcnn.reg.b"));
    let _ = cfg;
    Ok((feat, logits, deltas))
}

/// Everything one image forward produces before any loss is attached.
pub struct DetectorForward {
    pub f_img: Var,
    pub anchors: Vec<Anchor>,
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub proposals: Vec<Proposal>,
    /// Per-proposal projected features [P, roi_dim]; the instance-alignment input.
    pub f_inst: Var,
}

pub fn detector_forward(
    cfg: &DetectorConfig,
    bound: &BoundParams,
    image: &TensorData,
) -> Result<DetectorForward> {
    let img = Var::constant(&bound.graph, image.shape.clone(), image.data.clone());
    let f_img = encoder_forward(cfg, bound, &img)?;
    let fs = f_img.shape();
    let anchors = build_anchors(cfg, fs[1], fs[2]);
    let (rpn_cls, rpn_reg) = rpn_forward(cfg, bound, &f_img);
    let (img_h, img_w) = (image.shape[1] as f64, image.shape[2] as f64);
    let proposals = select_proposals(cfg, &anchors, &rpn_cls, &rpn_reg, img_w, img_h);
    let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let f_inst = if boxes.is_empty() {
        Var::constant(&bound.graph, vec![0, cfg.roi_dim], vec![])
    } else {
        let pooled = roi_pool(&f_img, &boxes)?;
        fully_connected(&pooled, bound.var("det.roi.fc.w"), bound.var("det.roi.fc.b")).relu()
    };
    Ok(DetectorForward { f_img, anchors, rpn_cls, rpn_reg, proposals, f_inst })
}

/// The four components of the supervised detection loss plus their sum.
pub struct DetLoss {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub rcnn_cls: Var,
    pub rcnn_reg: Var,
    pub total: Var,
}

fn gather_rows(x: &Var, rows: &[usize], cols: usize) -> Var {
    let mut idx = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        for c in 0..cols {
            idx.push((r * cols + c) as i64);
        }
    }
    x.gather(Rc::new(idx), vec![rows.len(), cols])
}

/// Supervised detection loss on a labeled sample's forward pass. During
/// training the region head sees proposals plus the ground-truth boxes, so
/// early training always has positive rois.
pub fn detection_loss(
    cfg: &DetectorConfig,
    bound: &BoundParams,
    fwd: &DetectorForward,
    labels: &[GtBox],
    img_w: f64,
    img_h: f64,
) -> Result<DetLoss> {
    let graph = &bound.graph;
    let assignments = assign_anchors(&fwd.anchors, labels, cfg.rpn_pos_iou, cfg.rpn_neg_iou)?;

    // RPN classification over all non-ignored anchors.
    let mut rows = Vec::new();
    let mut cls_labels = Vec::new();
    let mut pos_rows = Vec::new();
    let mut reg_targets = Vec::new();
    for (i, l) in assignments.iter().enumerate() {
        match l {
            AnchorLabel::Positive { gt_idx } => {
                rows.push(i);
                cls_labels.push(1);
                pos_rows.push(i);
                reg_targets.extend(encode_box(&labels[*gt_idx].bbox, &fwd.anchors[i]));
            }
            AnchorLabel::Negative => {
                rows.push(i);
                cls_labels.push(0);
            }
            AnchorLabel::Ignore => {}
        }
    }
    let rpn_cls = if rows.is_empty() {
        Var::scalar(graph, 0.0)
    } else {
        softmax_ce(&gather_rows(&fwd.rpn_cls, &rows, 2), &cls_labels)?
    };
    let rpn_reg = if pos_rows.is_empty() {
        Var::scalar(graph, 0.0)
    } else {
        let pred = gather_rows(&fwd.rpn_reg, &pos_rows, 4);
        let target = Var::constant(graph, vec![pos_rows.len(), 4], reg_targets);
        smooth_l1(&pred, &target)?
    };

    // Region head over proposals plus gt boxes.
    let mut rois: Vec<BBox> = fwd.proposals.iter().map(|p| p.bbox).collect();
    for g in labels {
        rois.push(g.bbox.clip(img_w, img_h));
    }
    let (_, logits, deltas) = rcnn_head(cfg, bound, &fwd.f_img, &rois)?;
    let mut roi_labels = Vec::with_capacity(rois.len());
    let mut roi_pos = Vec::new();
    let mut roi_targets = Vec::new();
    for (i, roi) in rois.iter().enumerate() {
        let mut best = 0.0;
        let mut best_gt = None;
        for (gi, g) in labels.iter().enumerate() {
            let iou = roi.iou(&g.bbox);
            if iou > best {
                best = iou;
                best_gt = Some(gi);
            }
        }
        match best_gt {
            Some(gi) if best >= cfg.rcnn_pos_iou => {
                roi_labels.push(labels[gi].class_id + 1);
                roi_pos.push(i);
                roi_targets.extend(encode_box(&labels[gi].bbox, &Anchor::from_bbox(roi)));
            }
            _ => roi_labels.push(0),
        }
    }
    let rcnn_cls = if rois.is_empty() {
        Var::scalar(graph, 0.0)
    } else {
        softmax_ce(&logits, &roi_labels)?
    };
    let rcnn_reg = if roi_pos.is_empty() {
        Var::scalar(graph, 0.0)
    } else {
        let pred = gather_rows(&deltas, &roi_pos, 4);
        let target = Var::constant(graph, vec![roi_pos.len(), 4], roi_targets);
        smooth_l1(&pred, &target)?
    };

    let total = rpn_cls.add(&rpn_reg).add(&rcnn_cls).add(&rcnn_reg);
    graph.check()?;
    Ok(DetLoss { rpn_cls, rpn_reg, rcnn_cls, rcnn_reg, total })
}

/// Full inference on one image: proposals, region head, per-class NMS.
pub fn detect(
    cfg: &DetectorConfig,
    bound: &BoundParams,
    image: &TensorData,
) -> Result<Vec<Detection>> {
    let fwd = detector_forward(cfg, bound, image)?;
    if fwd.proposals.is_empty() {
        return Ok(vec![]);
    }
    let rois: Vec<BBox> = fwd.proposals.iter().map(|p| p.bbox).collect();
    let (_, logits, deltas) = rcnn_head(cfg, bound, &fwd.f_img, &rois)?;
    let probs = logits.softmax().data();
    let dl = deltas.data();
    let k = cfg.num_classes + 1;
    let (img_h, img_w) = (image.shape[1] as f64, image.shape[2] as f64);
    let mut out = Vec::new();
    for class in 1..k {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (i, roi) in rois.iter().enumerate() {
            let score = probs[i * k + class];
            if score < cfg.detection_score_thresh {
                continue;
            }
            let d = [dl[4 * i], dl[4 * i + 1], dl[4 * i + 2], dl[4 * i + 3]];
            let b = decode_box(&Anchor::from_bbox(roi), &d).clip(img_w, img_h);
            if b.width() > 1e-3 && b.height() > 1e-3 {
                boxes.push(b);
                scores.push(score);
            }
        }
        for i in nms(&boxes, &scores, cfg.detection_nms_iou) {
            out.push(Detection { class_id: class - 1, score: scores[i], bbox: boxes[i] });
        }
    }
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    out.truncate(cfg.max_detections);
    Ok(out)
}
