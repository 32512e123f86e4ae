//! Composite detection objective: confidence BCE over every position plus
//! class BCE and GIoU regression over the positives, each normalized by the
//! positive count.
//!
//! Targets come from the assignment, predictions from the network; the
//! notation follows that role split even where the original formulation hats
//! the targets. The confidence term keeps its sum over all positions with
//! the 1/N_pos normalization, as specified.

use serde::{Deserialize, Serialize};

use crate::assign::AssignmentResult;
use crate::error::{contract, Result};
use crate::geometry::{decode_jacobian_diag, decode_offsets, giou_with_grad, GridCell};
use crate::model::{FeatureGrads, PredictionSet};
use crate::numeric::FeatureMap;

const PROB_CLAMP: f64 = 1e-7;

/// Binary cross-entropy with the probability clamped to
/// [1e-7, 1 - 1e-7] before the logs.
pub fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -t * p.ln() - (1.0 - t) * (1.0 - p).ln()
}

/// d bce / d p; zero in the clamped region (subgradient).
fn bce_grad(p: f64, t: f64) -> f64 {
    if p < PROB_CLAMP || p > 1.0 - PROB_CLAMP {
        return 0.0;
    }
    -t / p + (1.0 - t) / (1.0 - p)
}

/// Per-term decomposition of one loss evaluation. `reg` is unweighted;
/// `total = conf + cls + lambda * reg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub conf: f64,
    pub cls: f64,
    pub reg: f64,
    pub lambda: f64,
    pub n_pos: usize,
    /// Set when there were no positives: the conf term used divisor 1 and
    /// the cls/reg terms are zero.
    pub empty: bool,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_reg(&self) -> f64 {
        self.lambda * self.reg
    }
}

pub fn total_loss(
    preds: &PredictionSet,
    assign: &AssignmentResult,
    lambda: f64,
) -> Result<LossBreakdown> {
    Ok(loss_impl(preds, assign, lambda, false)?.0)
}

/// Loss plus d(total)/d(prediction map) per level, for seeding the tape.
pub fn total_loss_with_grads(
    preds: &PredictionSet,
    assign: &AssignmentResult,
    lambda: f64,
) -> Result<(LossBreakdown, Vec<FeatureGrads>)> {
    let (breakdown, grads) = loss_impl(preds, assign, lambda, true)?;
    Ok((breakdown, grads.expect("requested gradients")))
}

fn loss_impl(
    preds: &PredictionSet,
    assign: &AssignmentResult,
    lambda: f64,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<FeatureGrads>>)> {
    let positions = preds.positions();
    if assign.targets.len() != positions.len() {
        return Err(contract(format!(
            "assignment covers {} positions, predictions have {}",
            assign.targets.len(),
            positions.len()
        )));
    }
    let empty = assign.n_pos == 0;
    let norm = assign.n_pos.max(1) as f64;

    let mut grads: Option<Vec<FeatureGrads>> = want_grads.then(|| {
        preds
            .levels
            .iter()
            .map(|l| FeatureGrads {
                cls: FeatureMap::zeros(l.cls.height(), l.cls.width(), l.cls.channels()),
                reg: FeatureMap::zeros(l.reg.height(), l.reg.width(), l.reg.channels()),
                conf: FeatureMap::zeros(l.conf.height(), l.conf.width(), l.conf.channels()),
            })
            .collect()
    });

    let (mut conf_sum, mut cls_sum, mut reg_sum) = (0.0, 0.0, 0.0);
    for pos in &positions {
        let level = &preds.levels[pos.level_idx];
        let target = &assign.targets[pos.index];

        // Confidence: every position, target 1 for positives else 0.
        let conf_pred = level.conf.at(pos.y, pos.x, 0);
        let conf_target = if target.is_some() { 1.0 } else { 0.0 };
        conf_sum += bce(conf_pred, conf_target);
        if let Some(g) = grads.as_mut() {
            let gm = &mut g[pos.level_idx].conf;
            let i = gm.idx(pos.y, pos.x, 0);
            gm.data_mut()[i] = bce_grad(conf_pred, conf_target) / norm;
        }

        let t = match target {
            Some(t) => t,
            None => continue,
        };

        // Classification: positives only, BCE summed over all classes.
        for c in 0..level.cls.channels() {
            let p = level.cls.at(pos.y, pos.x, c);
            cls_sum += bce(p, t.cls[c]);
            if let Some(g) = grads.as_mut() {
                let gm = &mut g[pos.level_idx].cls;
                let i = gm.idx(pos.y, pos.x, c);
                gm.data_mut()[i] = bce_grad(p, t.cls[c]) / norm;
            }
        }

        // Regression: 1 - GIoU between the decoded (unclamped) box and the
        // target box.
        let raw = [
            level.reg.at(pos.y, pos.x, 0),
            level.reg.at(pos.y, pos.x, 1),
            level.reg.at(pos.y, pos.x, 2),
            level.reg.at(pos.y, pos.x, 3),
        ];
        let cell = GridCell::new(level.level_index(), pos.x, pos.y)?;
        let decoded = decode_offsets(&cell, raw, None);
        let (g_val, g_grad) = giou_with_grad(&decoded, &t.bbox);
        reg_sum += 1.0 - g_val;
        if let Some(g) = grads.as_mut() {
            let jac = decode_jacobian_diag(&cell, raw);
            let gm = &mut g[pos.level_idx].reg;
            for k in 0..4 {
                let i = gm.idx(pos.y, pos.x, k);
                // d total / d raw_k = lambda/N * d(1 - giou)/d coord * d coord/d raw
                gm.data_mut()[i] = -lambda / norm * g_grad[k] * jac[k];
            }
        }
    }

    let conf = conf_sum / norm;
    let cls = cls_sum / norm;
    let reg = reg_sum / norm;
    let breakdown = LossBreakdown {
        conf,
        cls,
        reg,
        lambda,
        n_pos: assign.n_pos,
        empty,
        total: conf + cls + lambda * reg,
    };
    Ok((breakdown, grads))
}

/// Evaluates the loss at each of the given balance factors over a fixed
/// (predictions, assignment) pair.
pub fn lambda_sweep(
    preds: &PredictionSet,
    assign: &AssignmentResult,
    lambdas: &[f64],
) -> Result<Vec<LossBreakdown>> {
    lambdas.iter().map(|&l| total_loss(preds, assign, l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::PositionTarget;
    use crate::geometry::{encode_offsets, BBox};
    use crate::model::{LevelPredictions, PredictionSet};

    fn single_position_preds(cls: Vec<f64>, raw: [f64; 4], conf: f64) -> PredictionSet {
        let n_c = cls.len();
        PredictionSet {
            levels: vec![LevelPredictions {
                stride: 8,
                cls: FeatureMap::from_vec(1, 1, n_c, cls).unwrap(),
                reg: FeatureMap::from_vec(1, 1, 4, raw.to_vec()).unwrap(),
                conf: FeatureMap::from_vec(1, 1, 1, vec![conf]).unwrap(),
            }],
        }
    }

    fn assign_one(target: Option<PositionTarget>) -> AssignmentResult {
        let n_pos = target.is_some() as usize;
        AssignmentResult { targets: vec![target], n_pos, skipped_gts: vec![] }
    }

    #[test]
    fn bce_hand_cases() {
        assert!(bce(1.0 - 1e-7, 1.0) < 1e-6);
        assert!(bce(1e-7, 0.0) < 1e-6);
        assert!((bce(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(bce(0.5, 1.0), bce(0.5, 0.0));
        assert!(bce(0.0, 1.0).is_finite());
    }

    #[test]
    fn perfect_predictions_give_near_zero_loss() {
        let target_box = BBox::new(1.0, 1.0, 9.0, 9.0);
        let cell = GridCell::new(1, 0, 0).unwrap();
        let raw = encode_offsets(&cell, &target_box).unwrap();
        let preds = single_position_preds(vec![1.0, 0.0], raw, 1.0);
        let assign = assign_one(Some(PositionTarget {
            gt: 0,
            cls: vec![1.0, 0.0],
            bbox: target_box,
            cost: 0.0,
        }));
        let b = total_loss(&preds, &assign, 5.0).unwrap();
        assert!(b.total < 1e-5, "total {}", b.total);
        assert!(!b.empty);
    }

    #[test]
    fn single_positive_hand_values() {
        // box exact, class prob 0.5 on a single-class target, conf correct
        let target_box = BBox::new(1.0, 1.0, 9.0, 9.0);
        let cell = GridCell::new(1, 0, 0).unwrap();
        let raw = encode_offsets(&cell, &target_box).unwrap();
        let preds = single_position_preds(vec![0.5], raw, 1.0 - 1e-7);
        let assign = assign_one(Some(PositionTarget {
            gt: 0,
            cls: vec![1.0],
            bbox: target_box,
            cost: 0.0,
        }));
        let b = total_loss(&preds, &assign, 5.0).unwrap();
        assert!((b.cls - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(b.reg.abs() < 1e-12);
        assert!(b.conf < 1e-6);
    }

    #[test]
    fn lambda_scales_reg_linearly() {
        let target_box = BBox::new(1.0, 1.0, 9.0, 9.0);
        let preds = single_position_preds(vec![0.5], [0.1, -0.2, 0.3, 0.0], 0.5);
        let assign = assign_one(Some(PositionTarget {
            gt: 0,
            cls: vec![1.0],
            bbox: target_box,
            cost: 0.0,
        }));
        let b5 = total_loss(&preds, &assign, 5.0).unwrap();
        let b10 = total_loss(&preds, &assign, 10.0).unwrap();
        assert_eq!(b5.reg, b10.reg, "unweighted term is lambda-free");
        assert_eq!(b10.weighted_reg(), 2.0 * b5.weighted_reg());
        assert!((b10.total - b5.total - 5.0 * b5.reg).abs() < 1e-12);
        assert!((b5.total - (b5.conf + b5.cls + 5.0 * b5.reg)).abs() < 1e-12);
    }

    #[test]
    fn no_positive_frames_are_flagged() {
        let preds = single_position_preds(vec![0.3], [0.0; 4], 0.2);
        let assign = assign_one(None);
        let b = total_loss(&preds, &assign, 5.0).unwrap();
        assert!(b.empty);
        assert_eq!(b.cls, 0.0);
        assert_eq!(b.reg, 0.0);
        assert!((b.conf - bce(0.2, 0.0)).abs() < 1e-12, "divisor 1");
        assert!(b.total >= 0.0 && b.total.is_finite());
    }

    #[test]
    fn loss_decreases_as_giou_improves() {
        let target_box = BBox::new(1.0, 1.0, 9.0, 9.0);
        let cell = GridCell::new(1, 0, 0).unwrap();
        let exact = encode_offsets(&cell, &target_box).unwrap();
        let assign = assign_one(Some(PositionTarget {
            gt: 0,
            cls: vec![1.0],
            bbox: target_box,
            cost: 0.0,
        }));
        // interpolate raw offsets from a poor box to the exact one
        let poor = [1.0, 1.0, 1.0, 1.0];
        let mut last_total = f64::INFINITY;
        for step in 0..=4 {
            let t = step as f64 / 4.0;
            let raw = [
                poor[0] * (1.0 - t) + exact[0] * t,
                poor[1] * (1.0 - t) + exact[1] * t,
                poor[2] * (1.0 - t) + exact[2] * t,
                poor[3] * (1.0 - t) + exact[3] * t,
            ];
            let preds = single_position_preds(vec![0.5], raw, 0.5);
            let b = total_loss(&preds, &assign, 5.0).unwrap();
            assert!(b.total < last_total, "strictly decreasing toward the target");
            last_total = b.total;
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let target_box = BBox::new(2.0, 1.0, 11.0, 8.0);
        let assign = assign_one(Some(PositionTarget {
            gt: 0,
            cls: vec![1.0, 0.0],
            bbox: target_box,
            cost: 0.0,
        }));
        let base_cls = vec![0.4, 0.3];
        let base_raw = [0.2, -0.1, 0.05, 0.3];
        let base_conf = 0.6;
        let lambda = 5.0;
        let (_, grads) = total_loss_with_grads(
            &single_position_preds(base_cls.clone(), base_raw, base_conf),
            &assign,
            lambda,
        )
        .unwrap();
        let h = 1e-6;
        let eval = |cls: Vec<f64>, raw: [f64; 4], conf: f64| {
            total_loss(&single_position_preds(cls, raw, conf), &assign, lambda).unwrap().total
        };
        // conf
        let fd = (eval(base_cls.clone(), base_raw, base_conf + h)
            - eval(base_cls.clone(), base_raw, base_conf - h))
            / (2.0 * h);
        assert!((grads[0].conf.at(0, 0, 0) - fd).abs() < 1e-5);
        // cls channel 1
        let mut up = base_cls.clone();
        up[1] += h;
        let mut dn = base_cls.clone();
        dn[1] -= h;
        let fd = (eval(up, base_raw, base_conf) - eval(dn, base_raw, base_conf)) / (2.0 * h);
        assert!((grads[0].cls.at(0, 0, 1) - fd).abs() < 1e-5);
        // reg channel 2
        let mut up = base_raw;
        up[2] += h;
        let mut dn = base_raw;
        dn[2] -= h;
        let fd = (eval(base_cls.clone(), up, base_conf) - eval(base_cls, dn, base_conf)) / (2.0 * h);
        assert!((grads[0].reg.at(0, 0, 2) - fd).abs() < 1e-4);
    }
}
