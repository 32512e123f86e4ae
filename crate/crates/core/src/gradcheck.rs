//! End-to-end gradient verification: analytic gradients of the total loss
//! against central finite differences, for every trainable parameter.
//!
//! The assignment is computed once at the base point and then frozen, so the
//! differentiated function is the loss with fixed targets (the label
//! assignment itself is a discrete, non-differentiable step). Relative error
//! uses an absolute floor of 1e-4 in the denominator: below that magnitude a
//! gradient is compared absolutely, which keeps finite-difference roundoff
//! from dominating near-zero entries.
//!
//! The step is 1e-6 here, smaller than the 1e-4 used by the per-op checks: a
//! full forward pass holds thousands of leaky-relu pre-activations, and any
//! of them sitting within the step of zero turns the difference quotient
//! into a slope average across the kink. At 1e-6 the quotients sit in the
//! converged region while roundoff stays two orders below the tolerance.

use rayon::prelude::*;

use crate::assign::{simota_assign, AssignParams, CandidateSet};
use crate::data::{make_synthetic_clip, SynthSpec};
use crate::error::Result;
use crate::loss::{total_loss, total_loss_with_grads};
use crate::model::{Model, ModelConfig};

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub seed: u64,
    pub param_count: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOLERANCE
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Checks every trainable parameter of a model on one synthetic clip.
pub fn full_model_gradcheck(
    config: &ModelConfig,
    seed: u64,
    frame_size: usize,
    lambda: f64,
) -> Result<GradcheckReport> {
    let model = Model::new(config, seed)?;
    let spec = SynthSpec {
        num_objects: 2,
        num_classes: config.num_classes,
        size_min: 8.0,
        size_max: 16.0,
        max_speed: 1.0,
        noise: 0.2,
    };
    let sample = make_synthetic_clip(seed.wrapping_add(1000), &spec, config.clip_len, frame_size, frame_size)?;
    let assign_params = AssignParams::default();

    // Base point: analytic gradients and the frozen assignment.
    let (mut tape, preds) = model.forward(&sample.clip)?;
    let pred_set = preds.extract(&tape)?;
    let candidates = CandidateSet::from_predictions(&pred_set)?;
    let assignment = simota_assign(&candidates, sample.key_frame_gts(), &assign_params, config.num_classes)?;
    let (_, grads) = total_loss_with_grads(&pred_set, &assignment, lambda)?;
    let seeds = preds.seed_grads(grads)?;
    let mut base_store = model.params().clone();
    base_store.zero_grads();
    tape.backward(seeds, &mut base_store)?;

    let loss_at = |store: &crate::numeric::graph::ParamStore| -> Result<f64> {
        let (tape, preds) = model.forward_with(&sample.clip, store)?;
        let pred_set = preds.extract(&tape)?;
        Ok(total_loss(&pred_set, &assignment, lambda)?.total)
    };

    // Central differences per tensor, parallel across tensors.
    let ids: Vec<_> = base_store.ids().collect();
    let results: Vec<Result<(f64, String)>> = ids
        .par_iter()
        .map(|&id| {
            let mut probe = base_store.clone();
            let mut worst = (0.0f64, String::new());
            for j in 0..base_store.values(id).len() {
                let orig = base_store.values(id)[j];
                probe.values_mut(id)[j] = orig + FD_STEP;
                let up = loss_at(&probe)?;
                probe.values_mut(id)[j] = orig - FD_STEP;
                let down = loss_at(&probe)?;
                probe.values_mut(id)[j] = orig;
                let fd = (up - down) / (2.0 * FD_STEP);
                let analytic = base_store.grad(id)[j];
                let err = relative_error(analytic, fd);
                if err > worst.0 {
                    worst = (err, format!("{}[{j}]", base_store.name(id)));
                }
            }
            Ok(worst)
        })
        .collect();

    let mut max_rel_err = 0.0;
    let mut worst_param = String::new();
    for r in results {
        let (err, name) = r?;
        if err > max_rel_err || (err == max_rel_err && !name.is_empty() && (worst_param.is_empty() || name < worst_param)) {
            max_rel_err = err;
            worst_param = name;
        }
    }
    Ok(GradcheckReport {
        seed,
        param_count: base_store.scalar_count(),
        max_rel_err,
        worst_param,
    })
}
