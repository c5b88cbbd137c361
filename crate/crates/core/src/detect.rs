//! Detection head math: anchor grid over BEV cells, box residual codec,
//! loss terms, and score-thresholded decoding with rotated NMS.
//!
//! The head is single-class. Anchors follow the usual BEV convention: one
//! anchor per cell per yaw in {0, pi/2}, all sharing a template size and a
//! fixed y. Losses are classification focal loss, smooth-L1 on residuals,
//! two-bin direction cross-entropy, and a rotated-IoU term; the total is
//! their unweighted sum. Every loss is normalized by the positive-anchor
//! count clamped to at least one.

use crate::bev::VoxelGrid;
use crate::error::{Error, Result};
use crate::iou::{iou_3d, rotated_iou_bev};
use crate::kitti::label::Box3D;

use std::f64::consts::{FRAC_PI_2, PI};

/// Focal loss weighting for the rare (positive) class.
pub const FOCAL_ALPHA: f64 = 0.25;
/// Focal loss focusing exponent.
pub const FOCAL_GAMMA: f64 = 2.0;
/// Smooth-L1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;
/// Anchors with best IoU at or above this are positive.
pub const MATCH_POS_IOU: f64 = 0.6;
/// Anchors with best IoU below this are negative; in between is ignored.
pub const MATCH_NEG_IOU: f64 = 0.45;

/// Car anchor template (h, w, l) in meters.
pub const CAR_TEMPLATE: (f64, f64, f64) = (1.56, 1.6, 3.9);
/// Car anchor bottom-face height in camera coordinates.
pub const CAR_ANCHOR_Y: f64 = 1.65;

/// One anchor per BEV cell per yaw bin. Anchor index is
/// `(ix * nz + iz) * 2 + yaw_bin` with yaw bin 0 -> 0 rad and
/// bin 1 -> pi/2.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    x0: f64,
    z0: f64,
    step_x: f64,
    step_z: f64,
    nx: usize,
    nz: usize,
    pub template: (f64, f64, f64),
    pub y: f64,
}

impl AnchorGrid {
    pub fn new(grid: &VoxelGrid, template: (f64, f64, f64), y: f64) -> Result<AnchorGrid> {
        if template.0 <= 0.0 || template.1 <= 0.0 || template.2 <= 0.0 {
            return Err(Error::Config(format!(
                "anchor template must be positive, got {template:?}"
            )));
        }
        let (nx, _, nz) = grid.dims();
        Ok(AnchorGrid {
            x0: grid.x_range.0,
            z0: grid.z_range.0,
            step_x: grid.voxel.0,
            step_z: grid.voxel.2,
            nx,
            nz,
            template,
            y,
        })
    }

    /// Standard car anchors over a grid.
    pub fn car(grid: &VoxelGrid) -> AnchorGrid {
        AnchorGrid::new(grid, CAR_TEMPLATE, CAR_ANCHOR_Y).expect("car template constants")
    }

    pub fn len(&self) -> usize {
        self.nx * self.nz * 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bev_dims(&self) -> (usize, usize) {
        (self.nx, self.nz)
    }

    pub fn index(&self, ix: usize, iz: usize, yaw_bin: usize) -> usize {
        (ix * self.nz + iz) * 2 + yaw_bin
    }

    pub fn anchor(&self, index: usize) -> Box3D {
        debug_assert!(index < self.len());
        let yaw_bin = index % 2;
        let cell = index / 2;
        let ix = cell / self.nz;
        let iz = cell % self.nz;
        let x = self.x0 + (ix as f64 + 0.5) * self.step_x;
        let z = self.z0 + (iz as f64 + 0.5) * self.step_z;
        let yaw = if yaw_bin == 0 { 0.0 } else { FRAC_PI_2 };
        let (h, w, l) = self.template;
        Box3D::new(x, self.y, z, h, w, l, yaw).expect("anchor from validated template")
    }
}

/// Regression target relating a box to its anchor. Centers are scaled by
/// the anchor diagonal (x, z) or height (y); sizes are log ratios; yaw is
/// the raw difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxResidual {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dh: f64,
    pub dw: f64,
    pub dl: f64,
    pub dyaw: f64,
}

impl BoxResidual {
    pub const ZERO: BoxResidual = BoxResidual {
        dx: 0.0,
        dy: 0.0,
        dz: 0.0,
        dh: 0.0,
        dw: 0.0,
        dl: 0.0,
        dyaw: 0.0,
    };

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.dx, self.dy, self.dz, self.dh, self.dw, self.dl, self.dyaw,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> BoxResidual {
        BoxResidual {
            dx: a[0],
            dy: a[1],
            dz: a[2],
            dh: a[3],
            dw: a[4],
            dl: a[5],
            dyaw: a[6],
        }
    }
}

pub fn encode(gt: &Box3D, anchor: &Box3D) -> Result<BoxResidual> {
    if gt.h <= 0.0 || gt.w <= 0.0 || gt.l <= 0.0 {
        return Err(Error::Config(format!(
            "cannot encode box with non-positive dims ({}, {}, {})",
            gt.h, gt.w, gt.l
        )));
    }
    if anchor.h <= 0.0 || anchor.w <= 0.0 || anchor.l <= 0.0 {
        return Err(Error::Config("anchor dims must be positive".into()));
    }
    let d_a = (anchor.w * anchor.w + anchor.l * anchor.l).sqrt();
    Ok(BoxResidual {
        dx: (gt.x - anchor.x) / d_a,
        dy: (gt.y - anchor.y) / anchor.h,
        dz: (gt.z - anchor.z) / d_a,
        dh: (gt.h / anchor.h).ln(),
        dw: (gt.w / anchor.w).ln(),
        dl: (gt.l / anchor.l).ln(),
        dyaw: gt.yaw - anchor.yaw,
    })
}

pub fn decode(res: &BoxResidual, anchor: &Box3D) -> Result<Box3D> {
    let d_a = (anchor.w * anchor.w + anchor.l * anchor.l).sqrt();
    Box3D::new(
        anchor.x + res.dx * d_a,
        anchor.y + res.dy * anchor.h,
        anchor.z + res.dz * d_a,
        anchor.h * res.dh.exp(),
        anchor.w * res.dw.exp(),
        anchor.l * res.dl.exp(),
        anchor.yaw + res.dyaw,
    )
}

/// Anchor/ground-truth matching result.
#[derive(Debug, Clone, Default)]
pub struct Assignment {
    /// (anchor index, ground-truth index) pairs, anchor index ascending.
    pub positives: Vec<(usize, usize)>,
    /// Anchor indices whose best IoU fell below the negative threshold.
    pub negatives: Vec<usize>,
    /// Anchors between the thresholds, excluded from every loss.
    pub ignored: Vec<usize>,
}

/// Matches each anchor to its best ground truth by rotated BEV IoU.
/// At or above `pos_iou` the anchor is positive, below `neg_iou` negative,
/// in between ignored. Ground truths that no anchor reaches are simply
/// unmatched; there is no force-matching.
pub fn assign_anchors(
    anchors: &AnchorGrid,
    gts: &[Box3D],
    pos_iou: f64,
    neg_iou: f64,
) -> Assignment {
    let mut out = Assignment::default();
    for idx in 0..anchors.len() {
        if gts.is_empty() {
            out.negatives.push(idx);
            continue;
        }
        let anchor = anchors.anchor(idx);
        let mut best = (0usize, 0.0f64);
        for (gi, gt) in gts.iter().enumerate() {
            let v = rotated_iou_bev(&anchor, gt);
            if v > best.1 {
                best = (gi, v);
            }
        }
        if best.1 >= pos_iou {
            out.positives.push((idx, best.0));
        } else if best.1 < neg_iou {
            out.negatives.push(idx);
        } else {
            out.ignored.push(idx);
        }
    }
    out
}

/// Raw per-anchor head outputs: one class logit, seven residuals, two
/// direction logits.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub cls_logits: Vec<f64>,
    pub residuals: Vec<BoxResidual>,
    pub dir_logits: Vec<[f64; 2]>,
}

impl HeadOutputs {
    pub fn new(
        cls_logits: Vec<f64>,
        residuals: Vec<BoxResidual>,
        dir_logits: Vec<[f64; 2]>,
    ) -> Result<HeadOutputs> {
        if cls_logits.len() != residuals.len() || cls_logits.len() != dir_logits.len() {
            return Err(Error::shape(format!(
                "head output lengths differ: cls {}, residuals {}, dir {}",
                cls_logits.len(),
                residuals.len(),
                dir_logits.len()
            )));
        }
        Ok(HeadOutputs {
            cls_logits,
            residuals,
            dir_logits,
        })
    }

    pub fn len(&self) -> usize {
        self.cls_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cls_logits.is_empty()
    }
}

/// The four detection loss terms and their unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub dir: f64,
    pub iou: f64,
    pub total: f64,
    /// True when no anchor matched any ground truth; the regression,
    /// direction, and IoU terms are then zero by definition.
    pub no_positives: bool,
}

/// ln(1 + e^x) computed without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Focal term for one anchor: target 1 uses -alpha (1-p)^gamma ln p,
/// target 0 uses -(1-alpha) p^gamma ln(1-p), with the logs expressed
/// through softplus for stability at saturated logits.
fn focal(logit: f64, positive: bool) -> f64 {
    let p = sigmoid(logit);
    if positive {
        FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * softplus(-logit)
    } else {
        (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * softplus(logit)
    }
}

fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < SMOOTH_L1_BETA {
        d * d / (2.0 * SMOOTH_L1_BETA)
    } else {
        a - SMOOTH_L1_BETA / 2.0
    }
}

/// Direction bin for a ground truth against its anchor: bin 0 when the
/// yaw difference wrapped into [0, 2 pi) lies in [0, pi).
pub fn dir_bin(gt_yaw: f64, anchor_yaw: f64) -> usize {
    if (gt_yaw - anchor_yaw).rem_euclid(2.0 * PI) < PI {
        0
    } else {
        1
    }
}

/// Two-bin cross-entropy from logits.
fn dir_cross_entropy(logits: [f64; 2], target: usize) -> f64 {
    // -ln softmax[target], stabilized by subtracting the max logit.
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[target]
}

/// Computes the loss terms for one frame given an assignment. Every term
/// is divided by the positive count clamped to at least one.
pub fn detection_losses(
    outputs: &HeadOutputs,
    anchors: &AnchorGrid,
    gts: &[Box3D],
    assignment: &Assignment,
) -> Result<LossBreakdown> {
    if outputs.len() != anchors.len() {
        return Err(Error::shape(format!(
            "{} head outputs for {} anchors",
            outputs.len(),
            anchors.len()
        )));
    }
    for &(ai, gi) in &assignment.positives {
        if ai >= anchors.len() || gi >= gts.len() {
            return Err(Error::shape(format!(
                "assignment ({ai}, {gi}) out of range"
            )));
        }
    }
    let n_pos = assignment.positives.len();
    let norm = n_pos.max(1) as f64;

    let mut cls = 0.0;
    for &(ai, _) in &assignment.positives {
        cls += focal(outputs.cls_logits[ai], true);
    }
    for &ai in &assignment.negatives {
        cls += focal(outputs.cls_logits[ai], false);
    }
    cls /= norm;

    let (mut l1, mut dir, mut iou) = (0.0, 0.0, 0.0);
    for &(ai, gi) in &assignment.positives {
        let anchor = anchors.anchor(ai);
        let gt = &gts[gi];
        let target = encode(gt, &anchor)?;
        let pred = outputs.residuals[ai];
        for (p, t) in pred.as_array().iter().zip(target.as_array()) {
            l1 += smooth_l1(p - t);
        }
        dir += dir_cross_entropy(outputs.dir_logits[ai], dir_bin(gt.yaw, anchor.yaw));
        let decoded = decode(&pred, &anchor)?;
        iou += 1.0 - iou_3d(&decoded, gt);
    }
    l1 /= norm;
    dir /= norm;
    iou /= norm;

    Ok(LossBreakdown {
        cls,
        l1,
        dir,
        iou,
        total: cls + l1 + dir + iou,
        no_positives: n_pos == 0,
    })
}

/// A decoded box with its classification score and source anchor.
#[derive(Debug, Clone)]
pub struct Detection {
    pub box3d: Box3D,
    pub score: f64,
    pub anchor_index: usize,
}

/// Thresholds scores, decodes residuals at surviving anchors, and applies
/// greedy NMS: candidates in descending score order (ties broken by
/// ascending anchor index) suppress later candidates whose rotated BEV IoU
/// exceeds `nms_iou`. Yaw comes straight from the residual codec; the
/// direction logits only train the classifier.
pub fn decode_detections(
    outputs: &HeadOutputs,
    anchors: &AnchorGrid,
    score_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    if outputs.len() != anchors.len() {
        return Err(Error::shape(format!(
            "{} head outputs for {} anchors",
            outputs.len(),
            anchors.len()
        )));
    }
    let mut candidates = Vec::new();
    for idx in 0..outputs.len() {
        let score = sigmoid(outputs.cls_logits[idx]);
        if score > score_thresh {
            candidates.push((idx, score));
        }
    }
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<Detection> = Vec::new();
    'next: for (idx, score) in candidates {
        let boxed = decode(&outputs.residuals[idx], &anchors.anchor(idx))?;
        for k in &kept {
            if rotated_iou_bev(&k.box3d, &boxed) > nms_iou {
                continue 'next;
            }
        }
        kept.push(Detection {
            box3d: boxed,
            score,
            anchor_index: idx,
        });
    }
    Ok(kept)
}
