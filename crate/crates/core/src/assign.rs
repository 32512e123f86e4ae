//! SimOTA dynamic label assignment.
//!
//! Candidates are the spatial positions of all pyramid levels. A position is
//! eligible for a ground truth when its cell center lies inside the box or
//! within `center_radius` strides of the box center along each axis. Each
//! ground truth takes its `k` lowest-cost eligible candidates, with `k`
//! derived from the summed top-`q` IoUs; positions claimed by several ground
//! truths keep the minimum-cost one. Ties break on the lower candidate
//! index, then the lower ground-truth index, so runs are reproducible.
//!
//! The whole pass is a pure function of its inputs; per-frame assignments
//! may run concurrently.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::geometry::{decode_offsets, giou, iou, BBox, GridCell};
use crate::model::PredictionSet;
use crate::types::GroundTruthInstance;

/// Cost/selection knobs. `gamma` weights the regression cost, `q` bounds the
/// IoU pool for dynamic-k, `center_radius` is in stride units per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignParams {
    pub gamma: f64,
    pub q: usize,
    pub center_radius: f64,
}

impl Default for AssignParams {
    fn default() -> Self {
        Self { gamma: 3.0, q: 10, center_radius: 2.5 }
    }
}

/// One spatial position with its decoded box and confidence-weighted class
/// scores.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub index: usize,
    pub cell: GridCell,
    pub bbox: BBox,
    /// Per-class probability multiplied by the actionness confidence.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    /// Enumerates every position of every level in canonical order. Boxes
    /// are decoded without clamping, matching the loss path.
    pub fn from_predictions(preds: &PredictionSet) -> Result<Self> {
        let mut candidates = Vec::with_capacity(preds.total_positions());
        for pos in preds.positions() {
            let level = &preds.levels[pos.level_idx];
            let cell = GridCell::new(level.level_index(), pos.x, pos.y)?;
            let raw = [
                level.reg.at(pos.y, pos.x, 0),
                level.reg.at(pos.y, pos.x, 1),
                level.reg.at(pos.y, pos.x, 2),
                level.reg.at(pos.y, pos.x, 3),
            ];
            let conf = level.conf.at(pos.y, pos.x, 0);
            let scores = (0..level.cls.channels())
                .map(|c| level.cls.at(pos.y, pos.x, c) * conf)
                .collect();
            candidates.push(Candidate {
                index: pos.index,
                cell,
                bbox: decode_offsets(&cell, raw, None),
                scores,
            });
        }
        Ok(Self { candidates })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

const PROB_CLAMP: f64 = 1e-7;

fn bce_clamped(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -t * p.ln() - (1.0 - t) * (1.0 - p).ln()
}

/// Assignment cost between one candidate and one ground truth: class BCE
/// summed over classes plus `gamma * (1 - GIoU)` on the boxes.
pub fn pair_cost(pred: &Candidate, gt: &GroundTruthInstance, gamma: f64, num_classes: usize) -> f64 {
    let mut cost = 0.0;
    for c in 0..num_classes {
        let target = if gt.classes.contains(&c) { 1.0 } else { 0.0 };
        let p = pred.scores.get(c).copied().unwrap_or(0.0);
        cost += bce_clamped(p, target);
    }
    cost + gamma * (1.0 - giou(&pred.bbox, &gt.bbox))
}

/// Dynamic positive count for one ground truth: the rounded sum of its
/// top-`q` candidate IoUs, clamped to [1, candidate count]. Errors when no
/// candidates are available.
pub fn dynamic_k(ious: &[f64], q: usize) -> Result<usize> {
    if ious.is_empty() {
        return Err(contract("dynamic_k on empty candidate list".to_string()));
    }
    let mut sorted = ious.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite IoUs"));
    let sum: f64 = sorted.iter().take(q).sum();
    Ok((sum.round() as usize).clamp(1, ious.len()))
}

fn eligible(cand: &Candidate, gt: &GroundTruthInstance, center_radius: f64) -> bool {
    let (cx, cy) = cand.cell.center();
    if gt.bbox.contains(cx, cy) {
        return true;
    }
    let r = center_radius * cand.cell.stride() as f64;
    let (gx, gy) = gt.bbox.center();
    (cx - gx).abs() <= r && (cy - gy).abs() <= r
}

/// Targets for one positive position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTarget {
    pub gt: usize,
    /// Multi-hot class target vector.
    pub cls: Vec<f64>,
    pub bbox: BBox,
    pub cost: f64,
}

/// Dense assignment over all positions: `targets[i]` is `Some` exactly for
/// positives. Ground truths with no eligible candidate are listed in
/// `skipped_gts`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub targets: Vec<Option<PositionTarget>>,
    pub n_pos: usize,
    pub skipped_gts: Vec<usize>,
}

impl AssignmentResult {
    pub fn conf_target(&self, index: usize) -> f64 {
        if self.targets[index].is_some() {
            1.0
        } else {
            0.0
        }
    }
}

pub fn simota_assign(
    preds: &CandidateSet,
    gts: &[GroundTruthInstance],
    params: &AssignParams,
    num_classes: usize,
) -> Result<AssignmentResult> {
    if params.gamma <= 0.0 {
        return Err(contract("gamma must be positive".to_string()));
    }
    if params.q == 0 {
        return Err(contract("q must be at least 1".to_string()));
    }
    let n = preds.candidates.len();
    let mut skipped = Vec::new();
    // Per candidate: best (cost, gt) claim so far.
    let mut claims: Vec<Option<(f64, usize)>> = vec![None; n];

    for (j, gt) in gts.iter().enumerate() {
        let elig: Vec<&Candidate> = preds
            .candidates
            .iter()
            .filter(|c| eligible(c, gt, params.center_radius))
            .collect();
        if elig.is_empty() {
            skipped.push(j);
            continue;
        }
        let ious: Vec<f64> = elig.iter().map(|c| iou(&c.bbox, &gt.bbox)).collect();
        let k = dynamic_k(&ious, params.q)?;
        let mut costs: Vec<(f64, usize)> = elig
            .iter()
            .map(|c| (pair_cost(c, gt, params.gamma, num_classes), c.index))
            .collect();
        costs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite costs").then(a.1.cmp(&b.1)));
        for &(cost, idx) in costs.iter().take(k) {
            let better = match claims[idx] {
                None => true,
                Some((best_cost, best_gt)) => {
                    cost < best_cost || (cost == best_cost && j < best_gt)
                }
            };
            if better {
                claims[idx] = Some((cost, j));
            }
        }
    }

    let mut targets: Vec<Option<PositionTarget>> = vec![None; n];
    let mut n_pos = 0;
    for (idx, claim) in claims.iter().enumerate() {
        if let Some((cost, j)) = claim {
            let gt = &gts[*j];
            let mut cls = vec![0.0; num_classes];
            for &c in &gt.classes {
                if c < num_classes {
                    cls[c] = 1.0;
                }
            }
            targets[idx] = Some(PositionTarget { gt: *j, cls, bbox: gt.bbox, cost: *cost });
            n_pos += 1;
        }
    }
    Ok(AssignmentResult { targets, n_pos, skipped_gts: skipped })
}

/// Structured text dump of the positives, one line per position, for the
/// `assign` CLI subcommand.
pub fn format_assignment(preds: &CandidateSet, result: &AssignmentResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "positions={} positives={}", preds.len(), result.n_pos);
    for (idx, target) in result.targets.iter().enumerate() {
        if let Some(t) = target {
            let c = &preds.candidates[idx];
            let _ = writeln!(
                out,
                "pos={idx} level={} cell=({}, {}) stride={} gt={} cost={:.6}",
                c.cell.level,
                c.cell.x,
                c.cell.y,
                c.cell.stride(),
                t.gt,
                t.cost
            );
        }
    }
    if !result.skipped_gts.is_empty() {
        let _ = writeln!(out, "skipped_gts={:?}", result.skipped_gts);
    }
    out
}
