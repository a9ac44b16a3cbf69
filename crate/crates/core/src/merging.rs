//! Merge operators building one multi-task model from task fine-tunes.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract_err, Error, Result};
use crate::params::{ParamSet, ParamVars};
use crate::tensor::{Tape, Tensor, Var};
use crate::transformer::{encode, head_logits, head_prefix, EncoderConfig, LayerGroup};

pub const DEFAULT_TASK_ARITHMETIC_LAMBDA: f64 = 0.4;
pub const DEFAULT_TIES_LAMBDA: f64 = 1.0;
pub const DEFAULT_TIES_TRIM: f64 = 0.2;
pub const DEFAULT_ADAMERGING_INIT: f64 = 0.3;

/// `θ_t − θ_PRE`, schema-checked at construction.
///
/// The rounding error of every difference is kept alongside, so that
/// `τ + residual == θ_t − θ_PRE` exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    tau: ParamSet,
    residual: ParamSet,
}

impl TaskVector {
    pub fn params(&self) -> &ParamSet {
        &self.tau
    }

    pub fn into_params(self) -> ParamSet {
        self.tau
    }

    pub fn norm(&self) -> f64 {
        self.tau.l2_norm()
    }
}

/// Knuth's error-free sum: `s + e == a + b` exactly.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

pub fn task_vector(theta_t: &ParamSet, theta_pre: &ParamSet) -> Result<TaskVector> {
    theta_t.ensure_same_schema(theta_pre, "task_vector")?;
    Ok(TaskVector {
        tau: theta_t.zip_with(theta_pre, |a, b| a - b)?,
        residual: theta_t.zip_with(theta_pre, |a, b| two_sum(a, -b).1)?,
    })
}

fn check_vectors(theta_pre: &ParamSet, tvs: &[TaskVector]) -> Result<()> {
    if tvs.is_empty() {
        return contract_err("no task vectors to merge");
    }
    for tv in tvs {
        tv.tau.ensure_same_schema(theta_pre, "merge")?;
    }
    Ok(())
}

/// Element-wise mean, accumulated as a running mean so that identical inputs
/// come back unchanged.
pub fn weight_average(models: &[ParamSet]) -> Result<ParamSet> {
    let Some((first, rest)) = models.split_first() else {
        return contract_err("weight_average of an empty model list");
    };
    let mut acc = first.clone();
    for (i, m) in rest.iter().enumerate() {
        let n = (i + 2) as f64;
        acc = acc.zip_with(m, |a, x| a + (x - a) / n)?;
    }
    Ok(acc)
}

/// `θ_PRE + λ Σ τ_t`, accumulated in double-double so that one task vector
/// at `λ = 1` gives back `θ_t` exactly.
pub fn task_arithmetic(theta_pre: &ParamSet, tvs: &[TaskVector], lambda: f64) -> Result<ParamSet> {
    check_vectors(theta_pre, tvs)?;
    if !lambda.is_finite() {
        return contract_err(format!("lambda must be finite, got {lambda}"));
    }
    let pre = flatten(theta_pre);
    let taus: Vec<Vec<f64>> = tvs.iter().map(|tv| flatten(&tv.tau)).collect();
    let residuals: Vec<Vec<f64>> = tvs.iter().map(|tv| flatten(&tv.residual)).collect();
    let out: Vec<f64> = (0..pre.len())
        .map(|i| {
            let (mut hi, mut lo) = (0.0, 0.0);
            for (tau, res) in taus.iter().zip(&residuals) {
                let (s, e) = two_sum(hi, tau[i]);
                hi = s;
                lo += e + res[i];
            }
            let prod = lambda * hi;
            let prod_err = lambda.mul_add(hi, -prod);
            let (a, e) = two_sum(pre[i], prod);
            a + (e + (prod_err + lambda * lo))
        })
        .collect();
    unflatten(theta_pre, &out)
}

/// Number of coordinates TIES keeps out of `n`: `round(fraction · n)`, at
/// least one.
pub fn ties_keep_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Trim step: zero all but the `keep` largest magnitudes (earlier index wins
/// among equal magnitudes).
pub fn ties_trim(values: &[f64], keep: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .expect("finite task vector")
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; values.len()];
    for &i in order.iter().take(keep) {
        out[i] = values[i];
    }
    out
}

/// Sign election and disjoint mean over already-trimmed task vectors, all of
/// the same length.
pub fn ties_elect_and_merge(trimmed: &[Vec<f64>]) -> Vec<f64> {
    let n = trimmed.first().map_or(0, Vec::len);
    (0..n)
        .map(|c| {
            let total: f64 = trimmed.iter().map(|t| t[c]).sum();
            let positive = total >= 0.0;
            let (mut s, mut cnt) = (0.0, 0usize);
            for t in trimmed {
                let v = t[c];
                if (positive && v > 0.0) || (!positive && v < 0.0) {
                    s += v;
                    cnt += 1;
                }
            }
            if cnt == 0 {
                0.0
            } else {
                s / cnt as f64
            }
        })
        .collect()
}

fn flatten(p: &ParamSet) -> Vec<f64> {
    p.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
}

fn unflatten(schema: &ParamSet, flat: &[f64]) -> Result<ParamSet> {
    let mut off = 0;
    let mut out = ParamSet::new();
    for (name, t) in schema.iter() {
        let n = t.numel();
        out.insert(
            name.clone(),
            Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec())?,
        );
        off += n;
    }
    Ok(out)
}

/// TIES merging: trim each task vector to its top `trim_fraction`
/// magnitudes, elect a sign per coordinate, average the agreeing values and
/// add `λ` times the result to `θ_PRE`.
pub fn ties_merge(theta_pre: &ParamSet, tvs: &[TaskVector], lambda: f64, trim_fraction: f64) -> Result<ParamSet> {
    check_vectors(theta_pre, tvs)?;
    if !(trim_fraction > 0.0 && trim_fraction <= 1.0) {
        return contract_err(format!("trim fraction {trim_fraction} outside (0, 1]"));
    }
    let n = theta_pre.numel();
    let keep = ties_keep_count(n, trim_fraction);
    let trimmed: Vec<Vec<f64>> = tvs.iter().map(|tv| ties_trim(&flatten(&tv.tau), keep)).collect();
    let merged = unflatten(theta_pre, &ties_elect_and_merge(&trimmed))?;
    theta_pre.zip_with(&merged, |p, m| p + lambda * m)
}

/// Merge coefficients: one scalar, one per task, or one per task and layer
/// group (`[T][L]`, see [`LayerGroup`]).
#[derive(Clone, Debug, PartialEq)]
pub enum Lambda {
    Scalar(f64),
    PerTask(Vec<f64>),
    PerTaskLayer(Vec<Vec<f64>>),
}

impl Lambda {
    /// Coefficient of task `t` for layer group index `l`.
    pub fn get(&self, t: usize, l: usize) -> f64 {
        match self {
            Lambda::Scalar(v) => *v,
            Lambda::PerTask(v) => v[t],
            Lambda::PerTaskLayer(m) => m[t][l],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        match self {
            Lambda::Scalar(v) => vec![*v],
            Lambda::PerTask(v) => v.clone(),
            Lambda::PerTaskLayer(m) => m.iter().flatten().copied().collect(),
        }
    }

    pub fn check(&self, tasks: usize, layers: usize) -> Result<()> {
        let ok = match self {
            Lambda::Scalar(_) => true,
            Lambda::PerTask(v) => v.len() == tasks,
            Lambda::PerTaskLayer(m) => m.len() == tasks && m.iter().all(|r| r.len() == layers),
        };
        if !ok {
            return contract_err(format!(
                "lambda shape does not fit {tasks} tasks × {layers} layer groups"
            ));
        }
        if self.flat().iter().any(|v| !v.is_finite()) {
            return contract_err("lambda values must be finite");
        }
        Ok(())
    }

    /// Same shape, values replaced from a flat row-major vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Lambda> {
        if flat.len() != self.flat().len() {
            return contract_err("flat lambda length mismatch");
        }
        Ok(match self {
            Lambda::Scalar(_) => Lambda::Scalar(flat[0]),
            Lambda::PerTask(_) => Lambda::PerTask(flat.to_vec()),
            Lambda::PerTaskLayer(m) => {
                let l = m.first().map_or(0, Vec::len);
                Lambda::PerTaskLayer(flat.chunks(l.max(1)).map(<[f64]>::to_vec).collect())
            }
        })
    }
}

fn group_indices(schema: &ParamSet, num_blocks: usize) -> Result<Vec<usize>> {
    schema
        .names()
        .map(|n| LayerGroup::of(n, num_blocks).map(|g| g.index(num_blocks)))
        .collect()
}

/// `θ_PRE + Σ_l Σ_t λ_t^l τ_t^l`, layer groups as in [`LayerGroup`].
pub fn adamerging_apply(
    theta_pre: &ParamSet,
    tvs: &[TaskVector],
    lambda: &Lambda,
    num_blocks: usize,
) -> Result<ParamSet> {
    check_vectors(theta_pre, tvs)?;
    let layers = LayerGroup::count(num_blocks, tvs.len());
    if matches!(lambda, Lambda::Scalar(_)) {
        return contract_err("adamerging needs per-task or per-task-per-layer coefficients");
    }
    lambda.check(tvs.len(), layers)?;
    let groups = group_indices(theta_pre, num_blocks)?;
    let mut out = ParamSet::new();
    for (i, (name, pre)) in theta_pre.iter().enumerate() {
        let mut acc = pre.clone();
        for (t, tv) in tvs.iter().enumerate() {
            let lam = lambda.get(t, groups[i]);
            acc = acc.zip_map(tv.tau.get(name)?, |a, d| a + lam * d)?;
        }
        out.insert(name.clone(), acc);
    }
    Ok(out)
}

/// Copies head `t` of `models[t]` into `merged`. Heads are task specific and
/// never merged.
pub fn attach_task_heads(merged: &mut ParamSet, models: &[ParamSet]) {
    for (t, m) in models.iter().enumerate() {
        merged.overlay(&m.filter_prefix(&head_prefix(t)));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
    Ties,
    AdaMergingTaskwise,
    AdaMergingLayerwise,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 5] = [
        MergeMethod::Average,
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::AdaMergingTaskwise,
        MergeMethod::AdaMergingLayerwise,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MergeMethod::Average => "Weight Averaging",
            MergeMethod::TaskArithmetic => "Task Arithmetic",
            MergeMethod::Ties => "Ties-Merging",
            MergeMethod::AdaMergingTaskwise => "Taskwise AdaMerging",
            MergeMethod::AdaMergingLayerwise => "AdaMerging",
        }
    }

    pub fn is_adamerging(self) -> bool {
        matches!(self, MergeMethod::AdaMergingTaskwise | MergeMethod::AdaMergingLayerwise)
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMethod::Average => "average",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::AdaMergingTaskwise => "adamerging_taskwise",
            MergeMethod::AdaMergingLayerwise => "adamerging_layerwise",
        })
    }
}

impl FromStr for MergeMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MergeMethod::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Contract(format!("unknown merge method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergePlan {
    pub method: MergeMethod,
    pub lambda: Lambda,
    pub ties_trim: f64,
}

impl MergePlan {
    /// Plan with the default coefficients of `method` for `tasks` tasks.
    pub fn default_for(method: MergeMethod, tasks: usize, num_blocks: usize) -> Self {
        let lambda = match method {
            MergeMethod::Average => Lambda::Scalar(1.0 / tasks as f64),
            MergeMethod::TaskArithmetic => Lambda::Scalar(DEFAULT_TASK_ARITHMETIC_LAMBDA),
            MergeMethod::Ties => Lambda::Scalar(DEFAULT_TIES_LAMBDA),
            MergeMethod::AdaMergingTaskwise => Lambda::PerTask(vec![DEFAULT_ADAMERGING_INIT; tasks]),
            MergeMethod::AdaMergingLayerwise => {
                Lambda::PerTaskLayer(vec![
                    vec![DEFAULT_ADAMERGING_INIT; LayerGroup::count(num_blocks, tasks)];
                    tasks
                ])
            }
        };
        Self {
            method,
            lambda,
            ties_trim: DEFAULT_TIES_TRIM,
        }
    }

    pub fn validate(&self, tasks: usize, num_blocks: usize) -> Result<()> {
        let layers = LayerGroup::count(num_blocks, tasks);
        let shape_ok = match (self.method, &self.lambda) {
            (MergeMethod::Average | MergeMethod::TaskArithmetic | MergeMethod::Ties, Lambda::Scalar(_)) => true,
            (MergeMethod::AdaMergingTaskwise, Lambda::PerTask(_)) => true,
            (MergeMethod::AdaMergingLayerwise, Lambda::PerTaskLayer(_)) => true,
            _ => false,
        };
        if !shape_ok {
            return contract_err(format!("lambda shape does not match method {}", self.method));
        }
        self.lambda.check(tasks, layers)?;
        if !(self.ties_trim > 0.0 && self.ties_trim <= 1.0) {
            return contract_err(format!("ties trim fraction {} outside (0, 1]", self.ties_trim));
        }
        Ok(())
    }

    /// Merged encoder with each task's own head attached.
    ///
    /// `Average` ignores λ and averages the full models.
    pub fn apply(&self, theta_pre: &ParamSet, models: &[ParamSet], num_blocks: usize) -> Result<ParamSet> {
        self.validate(models.len(), num_blocks)?;
        let tvs = models
            .iter()
            .map(|m| task_vector(m, theta_pre))
            .collect::<Result<Vec<_>>>()?;
        let mut merged = match (self.method, &self.lambda) {
            (MergeMethod::Average, _) => weight_average(models)?,
            (MergeMethod::TaskArithmetic, Lambda::Scalar(l)) => task_arithmetic(theta_pre, &tvs, *l)?,
            (MergeMethod::Ties, Lambda::Scalar(l)) => ties_merge(theta_pre, &tvs, *l, self.ties_trim)?,
            (_, lambda) => adamerging_apply(theta_pre, &tvs, lambda, num_blocks)?,
        };
        attach_task_heads(&mut merged, models);
        Ok(merged)
    }
}

/// A merge written as `base + Σ_i λ_(i, layer) · d_i`, so its coefficients
/// can be trained on a tape. Heads are taken verbatim from the task models.
#[derive(Clone, Debug)]
pub struct LinearMerge {
    pub base: ParamSet,
    pub directions: Vec<ParamSet>,
    /// Scalar (shared by all directions), per direction, or per direction
    /// and layer group.
    pub lambda: Lambda,
    pub heads: ParamSet,
    pub num_blocks: usize,
}

impl LinearMerge {
    /// Linear form of `plan`. Averaging becomes task arithmetic with
    /// `λ = 1/T`; TIES becomes a single direction (the elected merge) scaled
    /// by its λ.
    pub fn from_plan(plan: &MergePlan, theta_pre: &ParamSet, models: &[ParamSet], num_blocks: usize) -> Result<Self> {
        plan.validate(models.len(), num_blocks)?;
        let tvs = models
            .iter()
            .map(|m| task_vector(m, theta_pre))
            .collect::<Result<Vec<_>>>()?;
        let (directions, lambda) = match plan.method {
            MergeMethod::Average => (
                tvs.into_iter().map(TaskVector::into_params).collect(),
                Lambda::Scalar(1.0 / models.len() as f64),
            ),
            MergeMethod::Ties => {
                let unit = ties_merge(theta_pre, &tvs, 1.0, plan.ties_trim)?;
                (vec![unit.zip_with(theta_pre, |a, b| a - b)?], plan.lambda.clone())
            }
            _ => (
                tvs.into_iter().map(TaskVector::into_params).collect(),
                plan.lambda.clone(),
            ),
        };
        let mut heads = ParamSet::new();
        attach_task_heads(&mut heads, models);
        Ok(Self {
            base: theta_pre.clone(),
            directions,
            lambda,
            heads,
            num_blocks,
        })
    }

    fn coefficient_index(&self, direction: usize, group: usize) -> usize {
        match &self.lambda {
            Lambda::Scalar(_) => 0,
            Lambda::PerTask(_) => direction,
            Lambda::PerTaskLayer(m) => direction * m[0].len() + group,
        }
    }

    fn check(&self) -> Result<()> {
        let tasks = self.heads.names().filter(|n| n.ends_with(".w")).count();
        self.lambda
            .check(self.directions.len(), LayerGroup::count(self.num_blocks, tasks))
    }

    /// Merged parameters at the current coefficients.
    pub fn materialize(&self) -> Result<ParamSet> {
        self.check()?;
        let groups = group_indices(&self.base, self.num_blocks)?;
        let flat = self.lambda.flat();
        let mut out = ParamSet::new();
        for (i, (name, pre)) in self.base.iter().enumerate() {
            let mut acc = pre.clone();
            for (d, dir) in self.directions.iter().enumerate() {
                let lam = flat[self.coefficient_index(d, groups[i])];
                acc = acc.zip_map(dir.get(name)?, |a, x| a + lam * x)?;
            }
            out.insert(name.clone(), acc);
        }
        out.overlay(&self.heads);
        Ok(out)
    }

    /// Registers the merge on `tape` with a trainable coefficient leaf;
    /// returns the parameter handles and the leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<(ParamVars, Var)> {
        self.check()?;
        let flat = self.lambda.flat();
        let lambda_var = tape.leaf(Tensor::vector(flat.clone()), true);
        let groups = group_indices(&self.base, self.num_blocks)?;
        let mut coeff: Vec<Option<Var>> = vec![None; flat.len()];
        let mut vars = ParamVars::new();
        for (i, (name, pre)) in self.base.iter().enumerate() {
            if let Ok(h) = self.heads.get(name) {
                let v = tape.constant(h.clone());
                vars.insert(name.clone(), v);
                continue;
            }
            let mut acc = tape.constant(pre.clone());
            for (d, dir) in self.directions.iter().enumerate() {
                let idx = self.coefficient_index(d, groups[i]);
                let lam = match coeff[idx] {
                    Some(v) => v,
                    None => {
                        let v = tape.pick(lambda_var, idx)?;
                        coeff[idx] = Some(v);
                        v
                    }
                };
                let x = tape.constant(dir.get(name)?.clone());
                let scaled = tape.scale_by(x, lam)?;
                acc = tape.add(acc, scaled)?;
            }
            vars.insert(name.clone(), acc);
        }
        Ok((vars, lambda_var))
    }
}

/// Mean Shannon entropy (natural log) of softmax rows of `logits`.
pub fn mean_entropy(tape: &mut Tape, logits: Var) -> Result<Var> {
    let rows = tape.value(logits).rows() as f64;
    let ls = tape.log_softmax(logits);
    let p = tape.softmax(logits);
    let pl = tape.mul(p, ls)?;
    let s = tape.sum(pl);
    Ok(tape.scale(s, -1.0 / rows))
}

/// Entropy of each task head's predictions on that task's unlabeled batch,
/// averaged over tasks.
pub fn entropy_objective<B: AsRef<[u8]>>(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    vars: &ParamVars,
    batches: &[Vec<B>],
) -> Result<Var> {
    if batches.is_empty() || batches.iter().any(Vec::is_empty) {
        return contract_err("entropy objective needs a nonempty batch per task");
    }
    let mut total: Option<Var> = None;
    for (t, batch) in batches.iter().enumerate() {
        let repr = encode(tape, cfg, vars, batch, None)?;
        let logits = head_logits(tape, cfg, vars, repr, t)?;
        let e = mean_entropy(tape, logits)?;
        total = Some(match total {
            None => e,
            Some(acc) => tape.add(acc, e)?,
        });
    }
    let total = total.expect("at least one task");
    Ok(tape.scale(total, 1.0 / batches.len() as f64))
}
