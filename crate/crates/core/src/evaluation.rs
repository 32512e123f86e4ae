//! Frame mAP and video mAP at a configurable IoU threshold, with per-class
//! AP reports.
//!
//! Matching follows the usual greedy protocol: detections in descending
//! score order claim the highest-IoU unmatched ground truth of the same
//! frame (or video, for tubes) at or above the threshold; everything else is
//! a false positive, and a ground truth is never matched twice. AP uses
//! all-point interpolation (the precision envelope). Classes with zero
//! ground-truth instances are excluded from the mean.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{iou, tube_iou};
use crate::types::{ActionTube, Detection, GroundTruthInstance};

/// Per-class ordered (score, tp) outcomes plus the ground-truth count.
#[derive(Debug, Clone, Default)]
pub struct MatchLedger {
    entries: Vec<(f64, bool)>,
    gt_count: usize,
}

impl MatchLedger {
    pub fn new(gt_count: usize) -> Self {
        Self { entries: Vec::new(), gt_count }
    }

    pub fn push(&mut self, score: f64, tp: bool) {
        self.entries.push((score, tp));
    }

    pub fn gt_count(&self) -> usize {
        self.gt_count
    }

    pub fn detection_count(&self) -> usize {
        self.entries.len()
    }

    fn sort_descending(&mut self) {
        self.entries.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    }
}

/// AP value plus a flag for the degenerate zero-GT-with-detections case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub flagged: bool,
}

/// Area under the precision-recall curve with all-point interpolation.
pub fn average_precision(ledger: &MatchLedger) -> ApResult {
    if ledger.gt_count == 0 {
        return ApResult { ap: 0.0, flagged: !ledger.entries.is_empty() };
    }
    let mut sorted = ledger.clone();
    sorted.sort_descending();

    let n = sorted.entries.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, is_tp) in &sorted.entries {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / ledger.gt_count as f64);
    }
    // Precision envelope from the right.
    for i in (0..n.saturating_sub(1)).rev() {
        if precision[i] < precision[i + 1] {
            precision[i] = precision[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        if recall[i] > prev_recall {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    ApResult { ap, flagged: false }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
    pub gt_count: usize,
    pub detection_count: usize,
    /// True when detections exist for a class with no ground truth.
    pub flagged: bool,
}

/// Per-class APs plus the mean over classes with at least one ground truth.
/// `mean_ap` is `None` when no class has ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassAp>,
    pub mean_ap: Option<f64>,
}

impl EvalReport {
    fn from_ledgers(ledgers: BTreeMap<usize, MatchLedger>) -> Self {
        let mut per_class = Vec::new();
        let (mut sum, mut counted) = (0.0, 0usize);
        for (class_id, ledger) in ledgers {
            let ApResult { ap, flagged } = average_precision(&ledger);
            if ledger.gt_count() > 0 {
                sum += ap;
                counted += 1;
            }
            per_class.push(ClassAp {
                class_id,
                ap,
                gt_count: ledger.gt_count(),
                detection_count: ledger.detection_count(),
                flagged,
            });
        }
        let mean_ap = (counted > 0).then(|| sum / counted as f64);
        EvalReport { per_class, mean_ap }
    }

    pub fn ap_of(&self, class_id: usize) -> Option<f64> {
        self.per_class.iter().find(|c| c.class_id == class_id).map(|c| c.ap)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,ap,gt_count,detection_count\n");
        for c in &self.per_class {
            let _ = writeln!(out, "{},{},{},{}", c.class_id, c.ap, c.gt_count, c.detection_count);
        }
        match self.mean_ap {
            Some(m) => {
                let _ = writeln!(out, "mean,{m},,");
            }
            None => {
                let _ = writeln!(out, "mean,undefined,,");
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Restrict detections to (video, frame) pairs that carry at least one
    /// ground-truth annotation, for sparsely annotated data evaluated on
    /// keyframes only.
    pub keyframes_only: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { keyframes_only: false }
    }
}

/// Frame-level mAP: per class, greedy box matching within each (video,
/// frame) at `iou_threshold`.
pub fn frame_map(
    dets: &[Detection],
    gts: &[GroundTruthInstance],
    iou_threshold: f64,
    opts: &EvalOptions,
) -> EvalReport {
    // Explode multi-label ground truths into per-class pools.
    let mut gt_pool: BTreeMap<(usize, String, i64), Vec<(usize, bool)>> = BTreeMap::new();
    let mut gt_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut annotated: BTreeSet<(String, i64)> = BTreeSet::new();
    for (gi, g) in gts.iter().enumerate() {
        annotated.insert((g.video.clone(), g.frame));
        for &class in &g.classes {
            gt_pool.entry((class, g.video.clone(), g.frame)).or_default().push((gi, false));
            *gt_counts.entry(class).or_default() += 1;
        }
    }

    let mut classes: BTreeSet<usize> = gt_counts.keys().copied().collect();
    classes.extend(dets.iter().map(|d| d.class_id));

    let mut ledgers: BTreeMap<usize, MatchLedger> = classes
        .iter()
        .map(|&c| (c, MatchLedger::new(gt_counts.get(&c).copied().unwrap_or(0))))
        .collect();

    // Detections in canonical descending-score order.
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then(a.video.cmp(&b.video))
            .then(a.frame.cmp(&b.frame))
    });

    for d in order {
        if opts.keyframes_only && !annotated.contains(&(d.video.clone(), d.frame)) {
            continue;
        }
        let ledger = ledgers.get_mut(&d.class_id).expect("class present");
        let pool = gt_pool.get_mut(&(d.class_id, d.video.clone(), d.frame));
        let mut best: Option<(f64, usize)> = None;
        if let Some(pool) = pool {
            for (slot, (gi, matched)) in pool.iter().enumerate() {
                if *matched {
                    continue;
                }
                let overlap = iou(&d.bbox, &gts[*gi].bbox);
                if overlap >= iou_threshold && best.map_or(true, |(b, _)| overlap > b) {
                    best = Some((overlap, slot));
                }
            }
            if let Some((_, slot)) = best {
                pool[slot].1 = true;
            }
        }
        ledger.push(d.score, best.is_some());
    }
    EvalReport::from_ledgers(ledgers)
}

/// Video-level mAP: per class, greedy tube matching within each video by
/// spatio-temporal tube IoU.
pub fn video_map(tubes: &[ActionTube], gt_tubes: &[ActionTube], iou_threshold: f64) -> EvalReport {
    let mut gt_matched = vec![false; gt_tubes.len()];
    let mut gt_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for g in gt_tubes {
        *gt_counts.entry(g.class_id).or_default() += 1;
    }
    let mut classes: BTreeSet<usize> = gt_counts.keys().copied().collect();
    classes.extend(tubes.iter().map(|t| t.class_id));

    let mut ledgers: BTreeMap<usize, MatchLedger> = classes
        .iter()
        .map(|&c| (c, MatchLedger::new(gt_counts.get(&c).copied().unwrap_or(0))))
        .collect();

    let mut order: Vec<&ActionTube> = tubes.iter().collect();
    order.sort_by(|a, b| {
        b.score().partial_cmp(&a.score()).expect("finite scores").then(a.video.cmp(&b.video))
    });

    for t in order {
        let ledger = ledgers.get_mut(&t.class_id).expect("class present");
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gt_tubes.iter().enumerate() {
            if gt_matched[gi] || g.class_id != t.class_id || g.video != t.video {
                continue;
            }
            let overlap = tube_iou(t, g);
            if overlap >= iou_threshold && best.map_or(true, |(b, _)| overlap > b) {
                best = Some((overlap, gi));
            }
        }
        if let Some((_, gi)) = best {
            gt_matched[gi] = true;
        }
        ledger.push(t.score(), best.is_some());
    }
    EvalReport::from_ledgers(ledgers)
}
