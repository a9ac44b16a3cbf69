//! Accuracy tables, the stitched-network probe and the representation-bias
//! metric.

use mergelab_core::interventions::{count_extra_params, InterventionSet};
use mergelab_core::taskgen::{accuracy, SyntheticTask};
use mergelab_core::training::features;
use mergelab_core::transformer::{represent, stitch_predict, EncoderConfig};
use mergelab_core::{Error as CoreError, ParamSet, Result};
use rayon::prelude::*;

/// Which parameters answer for each task.
#[derive(Clone, Copy, Debug)]
pub enum Models<'a> {
    /// One model (merged or pre-trained) queried with every task's head.
    Shared(&'a ParamSet),
    /// Task `t` uses `models[t]` (the individual models).
    PerTask(&'a [ParamSet]),
}

impl<'a> Models<'a> {
    pub fn for_task(&self, t: usize) -> &'a ParamSet {
        match *self {
            Models::Shared(p) => p,
            Models::PerTask(ps) => &ps[t],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub per_task: Vec<f64>,
    /// Unweighted mean over tasks.
    pub average: f64,
    pub extra_params: usize,
}

/// Test accuracy of every task, optionally with its interventions.
///
/// The extra-parameter count is the closed-form count, checked against the
/// scalars actually stored in `interventions`.
pub fn evaluate(
    cfg: &EncoderConfig,
    models: Models<'_>,
    interventions: Option<&InterventionSet>,
    tasks: &[SyntheticTask],
) -> Result<EvalResult> {
    if let Models::PerTask(ps) = models {
        if ps.len() != tasks.len() {
            return Err(CoreError::Contract(format!(
                "{} models for {} tasks",
                ps.len(),
                tasks.len()
            )));
        }
    }
    let extra_params = match interventions {
        None => 0,
        Some(iv) => {
            if iv.tasks.len() != tasks.len() {
                return Err(CoreError::Contract(format!(
                    "interventions for {} tasks, evaluating {}",
                    iv.tasks.len(),
                    tasks.len()
                )));
            }
            let closed = count_extra_params(&iv.spec, tasks.len(), cfg.num_blocks, cfg.dim);
            let stored = iv.trainable_count();
            if closed != stored {
                return Err(CoreError::Integrity(format!(
                    "extra-param count {closed} disagrees with {stored} stored scalars"
                )));
            }
            closed
        }
    };
    let per_task = tasks
        .par_iter()
        .enumerate()
        .map(|(t, task)| {
            let iv = interventions.map(|s| (&s.spec, &s.tasks[t]));
            accuracy(cfg, models.for_task(t), task.test.samples(), t, iv)
        })
        .collect::<Result<Vec<f64>>>()?;
    let average = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(EvalResult {
        per_task,
        average,
        extra_params,
    })
}

/// Accuracy of the stitched network over split points.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchProfile {
    /// `accuracy[b]` for `b = 0..=N`.
    pub accuracy: Vec<f64>,
}

/// Blocks `1..=b` from `merged` (with task `t`'s interventions, if given),
/// the rest and the head from `task_model`, for every `b = 0..=N`.
pub fn stitch_probe(
    cfg: &EncoderConfig,
    merged: &ParamSet,
    task_model: &ParamSet,
    task: &SyntheticTask,
    t: usize,
    interventions: Option<&InterventionSet>,
) -> Result<StitchProfile> {
    let samples = task.test.samples();
    let iv = interventions.map(|s| (&s.spec, &s.tasks[t]));
    let accuracy = (0..=cfg.num_blocks)
        .into_par_iter()
        .map(|b| {
            let mut correct = 0usize;
            for chunk in samples.chunks(64) {
                let preds = stitch_predict(cfg, merged, task_model, b, chunk, t, iv)?;
                correct += preds.iter().zip(chunk).filter(|(p, s)| p.class == s.label).count();
            }
            Ok(correct as f64 / samples.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(StitchProfile { accuracy })
}

/// Mean absolute difference between the final representations of the
/// (intervened) merged model and task `t`'s model on `inputs`.
pub fn bias_metric<B: AsRef<[u8]>>(
    cfg: &EncoderConfig,
    merged: &ParamSet,
    interventions: Option<&InterventionSet>,
    task_model: &ParamSet,
    t: usize,
    inputs: &[B],
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(CoreError::Contract("bias metric over no inputs".into()));
    }
    let teacher = features(cfg, task_model, inputs)?;
    let iv = interventions.map(|s| (&s.spec, &s.tasks[t]));
    let mut data = Vec::with_capacity(teacher.numel());
    for chunk in inputs.chunks(64) {
        data.extend_from_slice(represent(cfg, merged, chunk, iv)?.data());
    }
    let s: f64 = data.iter().zip(teacher.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / data.len() as f64)
}
