//! Greedy frame-by-frame tube linking.
//!
//! Per class and video, detections are chained across frames: live tubes and
//! the next frame's detections form candidate pairs scored
//! `score(prev) + score(det) + beta * IoU(prev_box, det_box)`, restricted to
//! IoU > 0. Pairs are taken greedily by descending score; unmatched
//! detections start new tubes; a tube not extended for more than `patience`
//! frames is closed. Detections are canonicalized per frame (score, then
//! coordinates) before indexing, so the result does not depend on their
//! input order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::iou;
use crate::types::{ActionTube, Detection, TubeMember};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    /// Weight of the IoU bonus in the link score.
    pub beta: f64,
    /// Maximum number of consecutive unextended frames before a tube closes.
    pub patience: i64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self { beta: 1.0, patience: 2 }
    }
}

struct OpenTube {
    members: Vec<TubeMember>,
    last_frame: i64,
}

/// Links one class's detections within one video into tubes. Detections of
/// other classes or videos are ignored.
pub fn link(dets: &[Detection], video: &str, class_id: usize, cfg: &LinkConfig) -> Result<Vec<ActionTube>> {
    // Frame -> canonically ordered detections.
    let mut frames: BTreeMap<i64, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        if d.video == video && d.class_id == class_id {
            frames.entry(d.frame).or_default().push(d);
        }
    }
    for list in frames.values_mut() {
        list.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("finite scores")
                .then(a.bbox.x1.total_cmp(&b.bbox.x1))
                .then(a.bbox.y1.total_cmp(&b.bbox.y1))
                .then(a.bbox.x2.total_cmp(&b.bbox.x2))
                .then(a.bbox.y2.total_cmp(&b.bbox.y2))
        });
    }

    let mut open: Vec<OpenTube> = Vec::new();
    let mut closed: Vec<OpenTube> = Vec::new();

    for (&frame, list) in &frames {
        // Retire tubes whose gap can no longer be bridged.
        let mut still_open = Vec::new();
        for t in open.drain(..) {
            if frame - t.last_frame > cfg.patience + 1 {
                closed.push(t);
            } else {
                still_open.push(t);
            }
        }
        open = still_open;

        // All linkable (tube, detection) pairs, best link score first; ties
        // break on tube then detection index.
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, t) in open.iter().enumerate() {
            let prev = t.members.last().expect("open tubes are non-empty");
            for (di, d) in list.iter().enumerate() {
                let overlap = iou(&prev.bbox, &d.bbox);
                if overlap > 0.0 {
                    pairs.push((prev.score + d.score + cfg.beta * overlap, ti, di));
                }
            }
        }
        pairs.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).expect("finite link scores").then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        });

        let mut tube_taken = vec![false; open.len()];
        let mut det_taken = vec![false; list.len()];
        for &(_, ti, di) in &pairs {
            if tube_taken[ti] || det_taken[di] {
                continue;
            }
            tube_taken[ti] = true;
            det_taken[di] = true;
            let d = list[di];
            open[ti].members.push(TubeMember { frame, bbox: d.bbox, score: d.score });
            open[ti].last_frame = frame;
        }
        for (di, d) in list.iter().enumerate() {
            if !det_taken[di] {
                open.push(OpenTube {
                    members: vec![TubeMember { frame, bbox: d.bbox, score: d.score }],
                    last_frame: frame,
                });
            }
        }
    }
    closed.extend(open);

    closed
        .into_iter()
        .map(|t| ActionTube::new(video.to_string(), class_id, t.members))
        .collect()
}

/// Links every (video, class) combination found in the detections.
pub fn link_all(dets: &[Detection], num_classes: usize, cfg: &LinkConfig) -> Result<Vec<ActionTube>> {
    let mut videos: Vec<String> = dets.iter().map(|d| d.video.clone()).collect();
    videos.sort();
    videos.dedup();
    let mut out = Vec::new();
    for video in &videos {
        for class_id in 0..num_classes {
            out.extend(link(dets, video, class_id, cfg)?);
        }
    }
    Ok(out)
}
