//! Turns a prediction set into final detections: score fusion,
//! thresholding, multi-level box decoding, class-aware NMS.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::geometry::{decode_offsets, iou, GridCell};
use crate::model::PredictionSet;
use crate::types::Detection;

/// How the class probability and actionness confidence combine into the
/// final score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreFusion {
    /// `conf * prob` (default).
    Product,
    /// `sqrt(conf * prob)`.
    GeometricMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub topk_per_level: usize,
    pub score_fusion: ScoreFusion,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { conf_threshold: 0.1, nms_iou: 0.5, topk_per_level: 100, score_fusion: ScoreFusion::Product }
    }
}

/// Enumerates every (level, position, class), keeps fused scores above the
/// threshold capped at `topk_per_level`, and decodes boxes clamped to the
/// frame.
pub fn decode_predictions(
    preds: &PredictionSet,
    cfg: &PostprocessConfig,
    frame_size: (f64, f64),
    video: &str,
    frame: i64,
) -> Result<Vec<Detection>> {
    if !(0.0..1.0).contains(&cfg.conf_threshold) {
        return Err(contract(format!("conf threshold {} outside [0, 1)", cfg.conf_threshold)));
    }
    let mut out = Vec::new();
    for level in &preds.levels {
        let mut kept: Vec<Detection> = Vec::new();
        for y in 0..level.conf.height() {
            for x in 0..level.conf.width() {
                let conf = level.conf.at(y, x, 0);
                let cell = GridCell::new(level.level_index(), x, y)?;
                for c in 0..level.cls.channels() {
                    let prob = level.cls.at(y, x, c);
                    let score = match cfg.score_fusion {
                        ScoreFusion::Product => conf * prob,
                        ScoreFusion::GeometricMean => (conf * prob).sqrt(),
                    };
                    if score <= cfg.conf_threshold {
                        continue;
                    }
                    let raw = [
                        level.reg.at(y, x, 0),
                        level.reg.at(y, x, 1),
                        level.reg.at(y, x, 2),
                        level.reg.at(y, x, 3),
                    ];
                    kept.push(Detection {
                        video: video.to_string(),
                        frame,
                        class_id: c,
                        score,
                        confidence: conf,
                        level: level.level_index(),
                        bbox: decode_offsets(&cell, raw, Some(frame_size)),
                    });
                }
            }
        }
        // Cap per level by score, stable so equal scores keep scan order.
        kept.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
        kept.truncate(cfg.topk_per_level);
        out.extend(kept);
    }
    Ok(out)
}

/// Greedy class-aware non-maximum suppression: highest score first, a kept
/// detection suppresses same-class detections with IoU strictly above the
/// threshold. Ties break on input index. Kept detections are returned in
/// score order, unmodified.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&iou_threshold) || iou_threshold == 0.0 {
        return Err(contract(format!("nms iou threshold {iou_threshold} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score.partial_cmp(&dets[a].score).expect("finite scores").then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_id == dets[i].class_id && iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept.into_iter().map(|i| dets[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::model::LevelPredictions;
    use crate::numeric::FeatureMap;

    fn det(class_id: usize, score: f64, bbox: BBox) -> Detection {
        Detection {
            video: "v".into(),
            frame: 0,
            class_id,
            score,
            confidence: score,
            level: 1,
            bbox,
        }
    }

    fn fixture_preds() -> PredictionSet {
        // Level 1 (stride 8), 2x2 grid, 2 classes.
        let cls = FeatureMap::from_vec(
            2,
            2,
            2,
            vec![0.9, 0.2, 0.05, 0.05, 0.6, 0.5, 0.01, 0.8],
        )
        .unwrap();
        let conf =
            FeatureMap::from_vec(2, 2, 1, vec![1.0, 0.5, 0.9, 0.125]).unwrap();
        let reg = FeatureMap::from_vec(2, 2, 4, vec![0.0; 16]).unwrap();
        PredictionSet {
            levels: vec![LevelPredictions { stride: 8, cls, reg, conf }],
        }
    }

    /// Position-by-position enumeration oracle for the fixture.
    fn enumerate_oracle(preds: &PredictionSet, threshold: f64) -> Vec<(usize, usize, usize, f64)> {
        let mut out = Vec::new();
        for (li, l) in preds.levels.iter().enumerate() {
            for y in 0..l.conf.height() {
                for x in 0..l.conf.width() {
                    for c in 0..l.cls.channels() {
                        let s = l.conf.at(y, x, 0) * l.cls.at(y, x, c);
                        if s > threshold {
                            out.push((li, y * l.cls.width() + x, c, s));
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn decode_matches_enumeration_oracle() {
        let preds = fixture_preds();
        let cfg = PostprocessConfig { conf_threshold: 0.2, ..Default::default() };
        let dets = decode_predictions(&preds, &cfg, (16.0, 16.0), "v", 0).unwrap();
        let want = enumerate_oracle(&preds, 0.2);
        assert_eq!(dets.len(), want.len());
        // Same multiset of (class, score) pairs.
        let mut got: Vec<(usize, f64)> = dets.iter().map(|d| (d.class_id, d.score)).collect();
        let mut expect: Vec<(usize, f64)> = want.iter().map(|w| (w.2, w.3)).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (g, e) in got.iter().zip(expect.iter()) {
            assert_eq!(g.0, e.0);
            assert!((g.1 - e.1).abs() < 1e-12);
        }
        // Scores sorted within the level and boxes clamped to the frame.
        for d in &dets {
            assert!(d.bbox.x1 >= 0.0 && d.bbox.x2 <= 16.0);
            assert!(d.bbox.y1 >= 0.0 && d.bbox.y2 <= 16.0);
        }
    }

    #[test]
    fn all_confidences_below_threshold_gives_empty_list() {
        let mut preds = fixture_preds();
        preds.levels[0].conf =
            FeatureMap::from_vec(2, 2, 1, vec![0.01, 0.02, 0.03, 0.04]).unwrap();
        let cfg = PostprocessConfig { conf_threshold: 0.1, ..Default::default() };
        let dets = decode_predictions(&preds, &cfg, (16.0, 16.0), "v", 0).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn single_strong_position_scores_product() {
        let cls = FeatureMap::from_vec(1, 1, 1, vec![0.8]).unwrap();
        let conf = FeatureMap::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let reg = FeatureMap::from_vec(1, 1, 4, vec![0.0; 4]).unwrap();
        let preds = PredictionSet { levels: vec![LevelPredictions { stride: 8, cls, reg, conf }] };
        let dets =
            decode_predictions(&preds, &PostprocessConfig::default(), (32.0, 32.0), "v", 0).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - 0.8).abs() < 1e-12);
    }

    #[test]
    fn raising_threshold_never_increases_detections() {
        let preds = fixture_preds();
        let mut last = usize::MAX;
        for &t in &[0.0, 0.1, 0.3, 0.5, 0.8] {
            let cfg = PostprocessConfig { conf_threshold: t, ..Default::default() };
            let n = decode_predictions(&preds, &cfg, (16.0, 16.0), "v", 0).unwrap().len();
            assert!(n <= last);
            last = n;
        }
    }

    #[test]
    fn topk_caps_per_level() {
        let preds = fixture_preds();
        let cfg = PostprocessConfig { conf_threshold: 0.0, topk_per_level: 3, ..Default::default() };
        let dets = decode_predictions(&preds, &cfg, (16.0, 16.0), "v", 0).unwrap();
        assert_eq!(dets.len(), 3);
        // The three highest fused scores survive: 0.9, 0.54, 0.45.
        assert!((dets[0].score - 0.9).abs() < 1e-12);
        assert!((dets[1].score - 0.54).abs() < 1e-12);
        assert!((dets[2].score - 0.45).abs() < 1e-12);
    }

    #[test]
    fn nms_identical_boxes() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let kept = nms(&[det(0, 0.9, b), det(0, 0.8, b)], 0.5).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let kept = nms(&[det(0, 0.9, b), det(1, 0.8, b)], 0.5).unwrap();
        assert_eq!(kept.len(), 2, "different classes never suppress each other");
    }

    #[test]
    fn nms_chain_keeps_first_and_third() {
        // IoU(A,B) = 7/13 > 0.5, IoU(B,C) = 7/13 > 0.5, IoU(A,C) = 4/16 < 0.5
        let a = det(0, 0.9, BBox::new(0.0, 0.0, 10.0, 10.0));
        let b = det(0, 0.8, BBox::new(3.0, 0.0, 13.0, 10.0));
        let c = det(0, 0.7, BBox::new(6.0, 0.0, 16.0, 10.0));
        let kept = nms(&[a.clone(), b, c.clone()], 0.5).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].bbox, a.bbox);
        assert_eq!(kept[1].bbox, c.bbox);
    }

    #[test]
    fn nms_is_idempotent_and_subset() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(77);
        let dets: Vec<Detection> = (0..40)
            .map(|_| {
                let x1 = rng.gen_range(0.0..30.0);
                let y1 = rng.gen_range(0.0..30.0);
                det(
                    rng.gen_range(0..3),
                    rng.gen_range(0.05..1.0),
                    BBox::new(x1, y1, x1 + rng.gen_range(2.0..20.0), y1 + rng.gen_range(2.0..20.0)),
                )
            })
            .collect();
        let once = nms(&dets, 0.5).unwrap();
        let twice = nms(&once, 0.5).unwrap();
        assert_eq!(once, twice);
        for d in &once {
            assert!(dets.contains(d), "output is a subset with unmodified scores");
        }
        assert!(nms(&dets, 0.0).is_err());
    }
}
