//! Toy training loop: forward, dynamic assignment, composite loss, backward,
//! decoupled-weight-decay adaptive-moment update. Plus checkpoint files and
//! CSV loss logs.
//!
//! Everything is deterministic given (config, seed): batches follow a fixed
//! round-robin order and the only randomness is the seeded weight init.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assign::{simota_assign, AssignParams, CandidateSet};
use crate::config::TrainParams;
use crate::data::SyntheticClip;
use crate::error::{contract, Error, Result};
use crate::loss::{total_loss_with_grads, LossBreakdown};
use crate::model::{Model, ModelConfig};
use crate::numeric::graph::ParamStore;

/// AdamW-style optimizer state over a parameter store.
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let shapes: Vec<usize> = store.ids().map(|id| store.values(id).len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update from the gradients currently held by the store.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, params: &TrainParams) {
        self.t += 1;
        let (b1, b2) = (params.beta1, params.beta2);
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let (values, grads) = store.tensor_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..values.len() {
                let g = grads[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                values[j] -= lr * (m_hat / (v_hat.sqrt() + params.eps) + params.weight_decay * values[j]);
            }
        }
    }
}

/// Per-step log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub conf: f64,
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
    pub n_pos: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,conf,cls,reg,total,n_pos\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.step, r.conf, r.cls, r.reg, r.total, r.n_pos);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Mean total loss over `rows[range]`, for windowed convergence checks.
    pub fn mean_total(&self, start: usize, end: usize) -> f64 {
        let slice = &self.rows[start.min(self.rows.len())..end.min(self.rows.len())];
        if slice.is_empty() {
            return f64::NAN;
        }
        slice.iter().map(|r| r.total).sum::<f64>() / slice.len() as f64
    }
}

/// Learning rate at `step`: halved at each elapsed quarter of the run.
pub fn scheduled_lr(params: &TrainParams, step: usize) -> f64 {
    if !params.halve_quarterly || params.steps == 0 {
        return params.learning_rate;
    }
    let quarter = (params.steps / 4).max(1);
    params.learning_rate / f64::powi(2.0, (step / quarter).min(4) as i32)
}

/// Trains in place over the clip corpus. Batches are taken round-robin, the
/// per-clip gradients averaged. Aborts with a diagnostic when the loss
/// diverges.
pub fn train_toy(
    model: &mut Model,
    dataset: &[SyntheticClip],
    train: &TrainParams,
    assign_params: &AssignParams,
    lambda: f64,
) -> Result<TrainLog> {
    if dataset.is_empty() {
        return Err(contract("training dataset is empty".to_string()));
    }
    let num_classes = model.config().num_classes;
    let mut optimizer = AdamW::new(model.params());
    let mut log = TrainLog::default();
    let batch = train.batch_size.max(1);
    for step in 0..train.steps {
        model.params_mut().zero_grads();
        let mut acc: Option<LossBreakdown> = None;
        for b in 0..batch {
            let clip = &dataset[(step * batch + b) % dataset.len()];
            let (mut tape, preds) = model.forward(&clip.clip)?;
            let pred_set = preds.extract(&tape)?;
            let candidates = CandidateSet::from_predictions(&pred_set)?;
            let assignment =
                simota_assign(&candidates, clip.key_frame_gts(), assign_params, num_classes)?;
            let (breakdown, grads) = total_loss_with_grads(&pred_set, &assignment, lambda)?;
            let seeds = preds.seed_grads(grads)?;
            tape.backward(seeds, model.params_mut())?;
            acc = Some(match acc {
                None => breakdown,
                Some(a) => LossBreakdown {
                    conf: a.conf + breakdown.conf,
                    cls: a.cls + breakdown.cls,
                    reg: a.reg + breakdown.reg,
                    lambda,
                    n_pos: a.n_pos + breakdown.n_pos,
                    empty: a.empty && breakdown.empty,
                    total: a.total + breakdown.total,
                },
            });
        }
        let mut mean = acc.expect("batch size at least 1");
        let inv = 1.0 / batch as f64;
        mean.conf *= inv;
        mean.cls *= inv;
        mean.reg *= inv;
        mean.total *= inv;
        model.params_mut().scale_grads(inv);

        if !mean.total.is_finite() || mean.total > train.divergence_threshold {
            return Err(Error::Diverged { step, total: mean.total });
        }
        optimizer.step(model.params_mut(), scheduled_lr(train, step), train);
        log.rows.push(TrainLogRow {
            step,
            conf: mean.conf,
            cls: mean.cls,
            reg: mean.reg,
            total: mean.total,
            n_pos: mean.n_pos,
        });
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    params: BTreeMap<String, TensorRecord>,
}

/// Versioned JSON checkpoint: the model config plus a name -> (shape,
/// values) map.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let store = model.params();
    let params = store
        .ids()
        .map(|id| {
            (
                store.name(id).to_string(),
                TensorRecord { shape: store.shape(id).to_vec(), values: store.values(id).to_vec() },
            )
        })
        .collect();
    let file = CheckpointFile { version: CHECKPOINT_VERSION, config: model.config().clone(), params };
    let f = std::fs::File::create(path)?;
    serde_json::to_writer(f, &file)?;
    Ok(())
}

/// Rebuilds the model from its embedded config and loads every tensor,
/// validating names and shapes.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let f = std::fs::File::open(path)?;
    let file: CheckpointFile = serde_json::from_reader(f)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let mut model = Model::new(&file.config, 0)?;
    let store = model.params_mut();
    let expected = store.tensor_count();
    if file.params.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {expected}",
            file.params.len()
        )));
    }
    for (name, record) in &file.params {
        let id = store
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if store.shape(id) != record.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} shape {:?} does not match {:?}",
                record.shape,
                store.shape(id)
            )));
        }
        store.values_mut(id).copy_from_slice(&record.values);
    }
    Ok(model)
}
