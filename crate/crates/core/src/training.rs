//! Distillation training of interventions, merge-coefficient learning and
//! data subsetting.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Error, Result};
use crate::interventions::{reorthonormalize_params, InterventionSet, InterventionVars};
use crate::merging::{entropy_objective, LinearMerge};
use crate::optim::Adam;
use crate::params::{ParamSet, ParamVars};
use crate::tensor::{Tape, Tensor, Var};
use crate::transformer::{encode, represent, EncoderConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Samples per task per iteration.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Also train the merge coefficients (needs a [`LinearMerge`]).
    pub learn_lambdas: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            learn_lambdas: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return contract_err("iterations must be at least 1");
        }
        if self.batch_size == 0 {
            return contract_err("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return contract_err(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return contract_err("optimizer needs beta1, beta2 in [0, 1) and eps > 0");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Adam {
        Adam::new(self.learning_rate, self.beta1, self.beta2, self.eps)
    }
}

/// Per-iteration training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    /// `losses[i][t]`: loss of task `t` at iteration `i` (before the update).
    pub losses: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn mean(&self, iteration: usize) -> f64 {
        let l = &self.losses[iteration];
        l.iter().sum::<f64>() / l.len() as f64
    }

    pub fn first_mean(&self) -> f64 {
        self.mean(0)
    }

    pub fn last_mean(&self) -> f64 {
        self.mean(self.losses.len() - 1)
    }

    /// Mean over the last `n` iterations, which smooths minibatch noise.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let n = n.clamp(1, self.losses.len());
        let start = self.losses.len() - n;
        (start..self.losses.len()).map(|i| self.mean(i)).sum::<f64>() / n as f64
    }
}

/// Deterministic subsample of each task's split: `max(1, ⌊fraction · n⌋)`
/// sorted indices per task, drawn from a per-task stream of `seed`.
pub fn subset_data(sizes: &[usize], fraction: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return contract_err(format!("data fraction {fraction} outside (0, 1]"));
    }
    sizes
        .iter()
        .enumerate()
        .map(|(t, &n)| {
            if n == 0 {
                return contract_err(format!("task {t} has an empty dataset"));
            }
            // The small epsilon keeps e.g. 0.29 · 100 from flooring to 28.
            let m = ((fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n);
            if m == n {
                return Ok((0..n).collect());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(t as u64 + 1)));
            let mut idx = sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            Ok(idx)
        })
        .collect()
}

/// Minibatch indices for one task: `batch` distinct indices, or all of them
/// when fewer are available.
fn draw(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    if n <= batch {
        (0..n).collect()
    } else {
        sample(rng, n, batch).into_vec()
    }
}

/// Mean over tasks of the L1 gap between each task's intervened merged
/// representation and its teacher features (mean over samples and
/// coordinates within a task).
///
/// `batches[t]` and `targets[t]` are the inputs and teacher features of task
/// `t`; `interventions[t]`, if any, are task `t`'s modules.
pub fn distill_loss<B: AsRef<[u8]>>(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    merged: &ParamVars,
    interventions: &[Option<InterventionVars<'_>>],
    batches: &[Vec<B>],
    targets: &[Tensor],
) -> Result<(Var, Vec<f64>)> {
    if batches.is_empty() || batches.len() != targets.len() || interventions.len() != batches.len() {
        return contract_err("distill_loss needs one batch, target and intervention slot per task");
    }
    let mut total: Option<Var> = None;
    let mut per_task = Vec::with_capacity(batches.len());
    for (t, batch) in batches.iter().enumerate() {
        if batch.is_empty() {
            return contract_err(format!("empty distillation batch for task {t}"));
        }
        let g = encode(tape, cfg, merged, batch, interventions[t].as_ref())?;
        let f = tape.constant(targets[t].clone());
        let l = tape.l1_mean(g, f)?;
        per_task.push(tape.value(l).item());
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.expect("nonempty");
    Ok((tape.scale(total, 1.0 / batches.len() as f64), per_task))
}

/// What the merged model is during intervention training.
#[derive(Clone, Copy, Debug)]
pub enum MergedModel<'a> {
    /// Frozen parameters.
    Fixed(&'a ParamSet),
    /// Linear merge whose coefficients are trained when `learn_lambdas` is set.
    Linear(&'a LinearMerge),
}

#[derive(Clone, Debug)]
pub struct InterventionRun {
    pub interventions: InterventionSet,
    /// Final merged parameters (changed only by learned coefficients).
    pub merged: ParamSet,
    /// Learned coefficients, when they were trained.
    pub lambda: Option<Vec<f64>>,
    pub trajectory: Trajectory,
}

/// Teacher features of `inputs` under `model`, computed in chunks.
pub fn features<B: AsRef<[u8]>>(cfg: &EncoderConfig, model: &ParamSet, inputs: &[B]) -> Result<Tensor> {
    let k = cfg.dim;
    let mut data = Vec::with_capacity(inputs.len() * k);
    for chunk in inputs.chunks(64) {
        data.extend_from_slice(represent(cfg, model, chunk, None)?.data());
    }
    Tensor::new(vec![inputs.len(), k], data)
}

fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let k = t.last_dim();
    let mut out = Vec::with_capacity(rows.len() * k);
    for &r in rows {
        out.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), k], out).expect("row gather")
}

fn ensure_finite_loss(loss: f64, iteration: usize, per_task: &[f64]) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss {loss} at iteration {iteration} (per task {per_task:?})"
        )));
    }
    Ok(())
}

/// Trains task-specific interventions on a merged model by distilling each
/// task model's final representations.
///
/// `inputs[t]` are the unlabeled samples available for task `t` and
/// `teachers[t]` their features under task model `t` (see [`features`]).
/// Every iteration draws one minibatch per task, sums the task losses in task
/// order and takes one optimizer step per parameter group. R matrices are
/// re-orthonormalized after every step.
pub fn train_interventions<B: AsRef<[u8]>>(
    cfg: &EncoderConfig,
    merged: MergedModel<'_>,
    inputs: &[Vec<B>],
    teachers: &[Tensor],
    init: InterventionSet,
    train: &TrainConfig,
) -> Result<InterventionRun> {
    train.validate()?;
    let tasks = inputs.len();
    if tasks == 0 || teachers.len() != tasks || init.tasks.len() != tasks {
        return contract_err("inputs, teacher features and intervention sets must cover the same tasks");
    }
    for (t, (x, f)) in inputs.iter().zip(teachers).enumerate() {
        if x.is_empty() || f.rows() != x.len() {
            return contract_err(format!("task {t}: {} inputs vs {} teacher rows", x.len(), f.rows()));
        }
    }
    let linear = match merged {
        MergedModel::Linear(l) if train.learn_lambdas => Some(l),
        _ if train.learn_lambdas => return contract_err("learn_lambdas needs a linear merge"),
        _ => None,
    };
    let fixed = match merged {
        MergedModel::Fixed(p) => p.clone(),
        MergedModel::Linear(l) => l.materialize()?,
    };
    let mut set = init;
    let mut lambda = linear.map(|l| l.lambda.flat());
    let mut opts: Vec<Adam> = (0..tasks).map(|_| train.optimizer()).collect();
    let mut lambda_opt = train.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut trajectory = Trajectory::default();

    for it in 0..train.iterations {
        let picks: Vec<Vec<usize>> = inputs
            .iter()
            .map(|x| draw(&mut rng, x.len(), train.batch_size))
            .collect();
        let batches: Vec<Vec<&[u8]>> = picks
            .iter()
            .zip(inputs)
            .map(|(p, x)| p.iter().map(|&i| x[i].as_ref()).collect())
            .collect();
        let targets: Vec<Tensor> = picks.iter().zip(teachers).map(|(p, f)| gather(f, p)).collect();

        let mut tape = Tape::new();
        let (vars, lambda_var) = match (linear, &lambda) {
            (Some(l), Some(flat)) => {
                let current = LinearMerge {
                    lambda: l.lambda.with_flat(flat)?,
                    ..l.clone()
                };
                let (v, lv) = current.register(&mut tape)?;
                (v, Some(lv))
            }
            _ => (ParamVars::register(&mut tape, &fixed, false), None),
        };
        let ivars: Vec<Option<InterventionVars<'_>>> = set
            .tasks
            .iter()
            .map(|p| Some(InterventionVars::register(&mut tape, &set.spec, p, true)))
            .collect();
        let (loss, per_task) = distill_loss(&mut tape, cfg, &vars, &ivars, &batches, &targets)?;
        ensure_finite_loss(tape.value(loss).item(), it, &per_task)?;
        trajectory.losses.push(per_task);
        tape.backward(loss)?;

        let grads: Vec<ParamSet> = ivars
            .iter()
            .map(|iv| iv.as_ref().expect("registered").vars.grads(&tape))
            .collect();
        let lambda_grad = lambda_var.map(|lv| {
            tape.grad(lv)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(lv).shape()))
        });
        drop(ivars);
        for ((p, g), opt) in set.tasks.iter_mut().zip(&grads).zip(&mut opts) {
            opt.step(p, g)?;
            reorthonormalize_params(p)?;
        }
        if let (Some(flat), Some(g)) = (lambda.as_mut(), lambda_grad) {
            let mut ps = ParamSet::new();
            ps.insert("lambda", Tensor::vector(flat.clone()));
            let mut gs = ParamSet::new();
            gs.insert("lambda", g);
            lambda_opt.step(&mut ps, &gs)?;
            *flat = ps.get("lambda")?.data().to_vec();
        }
    }

    let merged = match (linear, &lambda) {
        (Some(l), Some(flat)) => LinearMerge {
            lambda: l.lambda.with_flat(flat)?,
            ..l.clone()
        }
        .materialize()?,
        _ => fixed,
    };
    Ok(InterventionRun {
        interventions: set,
        merged,
        lambda,
        trajectory,
    })
}

#[derive(Clone, Debug)]
pub struct AdaMergingRun {
    pub merge: LinearMerge,
    /// Single-column trajectory of the entropy objective.
    pub trajectory: Trajectory,
}

/// Learns merge coefficients by minimizing prediction entropy on unlabeled
/// inputs of every task.
pub fn train_adamerging<B: AsRef<[u8]>>(
    cfg: &EncoderConfig,
    init: &LinearMerge,
    inputs: &[Vec<B>],
    train: &TrainConfig,
) -> Result<AdaMergingRun> {
    train.validate()?;
    if inputs.is_empty() || inputs.iter().any(Vec::is_empty) {
        return contract_err("adamerging needs unlabeled inputs for every task");
    }
    let mut merge = init.clone();
    let mut opt = train.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut trajectory = Trajectory::default();
    for it in 0..train.iterations {
        let batches: Vec<Vec<&[u8]>> = inputs
            .iter()
            .map(|x| {
                draw(&mut rng, x.len(), train.batch_size)
                    .into_iter()
                    .map(|i| x[i].as_ref())
                    .collect()
            })
            .collect();
        let mut tape = Tape::new();
        let (vars, lv) = merge.register(&mut tape)?;
        let obj = entropy_objective(&mut tape, cfg, &vars, &batches)?;
        let value = tape.value(obj).item();
        ensure_finite_loss(value, it, &[value])?;
        trajectory.losses.push(vec![value]);
        tape.backward(obj)?;
        let g = tape
            .grad(lv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(lv).shape()));
        let mut ps = ParamSet::new();
        ps.insert("lambda", Tensor::vector(merge.lambda.flat()));
        let mut gs = ParamSet::new();
        gs.insert("lambda", g);
        opt.step(&mut ps, &gs)?;
        merge.lambda = merge.lambda.with_flat(ps.get("lambda")?.data())?;
    }
    Ok(AdaMergingRun { merge, trajectory })
}
