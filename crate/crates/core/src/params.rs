//! Named parameter collections and their tape registration.

use std::collections::BTreeMap;

use crate::error::{contract_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Named tensors of one model (or one set of trainable modules).
///
/// Names are kept sorted so iteration order, and therefore every reduction
/// over a `ParamSet`, is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn same_schema(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    pub fn ensure_same_schema(&self, other: &ParamSet, what: &str) -> Result<()> {
        if self.same_schema(other) {
            return Ok(());
        }
        let mine: Vec<_> = self.schema();
        let theirs: Vec<_> = other.schema();
        let diff = mine
            .iter()
            .zip(&theirs)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("{a:?} vs {b:?}"))
            .unwrap_or_else(|| format!("{} vs {} tensors", mine.len(), theirs.len()));
        contract_err(format!("{what}: parameter schemas differ ({diff})"))
    }

    /// Element-wise combination of two same-schema sets.
    pub fn zip_with(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.ensure_same_schema(other, "zip_with")?;
        let mut out = ParamSet::new();
        for ((name, a), (_, b)) in self.tensors.iter().zip(&other.tensors) {
            out.insert(name.clone(), a.zip_map(b, &f)?);
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        ParamSet {
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.map(&f))).collect(),
        }
    }

    pub fn zeros_like(&self) -> ParamSet {
        self.map(|_| 0.0)
    }

    /// Copies every tensor of `src` into `self`, overwriting existing names.
    pub fn overlay(&mut self, src: &ParamSet) {
        for (n, t) in src.iter() {
            self.insert(n.clone(), t.clone());
        }
    }

    /// Sub-collection of tensors whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.ensure_same_schema(other, "max_abs_diff")?;
        Ok(self
            .tensors
            .values()
            .zip(other.tensors.values())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max))
    }

    /// True when every value is bit-identical.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.same_schema(other)
            && self
                .tensors
                .values()
                .zip(other.tensors.values())
                .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// A [`ParamSet`] registered on a tape: parameter name to tape handle.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers every tensor as a leaf; `trainable` decides which ones
    /// accumulate gradients.
    pub fn register(tape: &mut Tape, params: &ParamSet, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        Self { vars }
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` not registered")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of every registered tensor after a backward pass, as a
    /// `ParamSet` (zeros for non-tracking leaves).
    pub fn grads(&self, tape: &Tape) -> ParamSet {
        self.vars
            .iter()
            .map(|(n, &v)| {
                let g = tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                (n.clone(), g)
            })
            .collect()
    }
}

/// Result of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over coordinates of `|a − c| / (|a| + |c| + 1e-12)`.
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub coordinates: usize,
}

/// Compares tape gradients of `f` against central finite differences with
/// step `h` over every coordinate of `params`. The error of a coordinate is
/// `|a − c| / (|a| + |c|)`.
pub fn grad_check<F>(f: F, params: &ParamSet, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    grad_check_with_floor(f, params, h, 1e-12)
}

/// [`grad_check`] with `floor` added to the denominator, for coordinates
/// whose gradient sits near the finite-difference noise level `ε·|f|/h`.
pub fn grad_check_with_floor<F>(f: F, params: &ParamSet, h: f64, floor: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    if !(h > 0.0) {
        return contract_err(format!("finite-difference step must be positive, got {h}"));
    }
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, true);
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    if !value.is_finite() {
        return Err(Error::Evaluation(format!("f evaluated to {value}")));
    }
    tape.backward(out)?;
    let analytic = vars.grads(&tape);

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let vs = ParamVars::register(&mut t, p, false);
        let o = f(&mut t, &vs)?;
        let v = t.value(o).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation(format!("f evaluated to {v}")))
        }
    };

    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        coordinates: 0,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.get(name)?.numel();
        for c in 0..n {
            let orig = params.get(name)?.data()[c];
            probe.get_mut(name)?.data_mut()[c] = orig + h;
            let fp = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[c] = orig - h;
            let fm = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[c] = orig;
            let central = (fp - fm) / (2.0 * h);
            let a = analytic.get(name)?.data()[c];
            let rel = (a - central).abs() / (a.abs() + central.abs() + floor);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = format!("{name}[{c}] analytic={a:e} central={central:e}");
            }
        }
    }
    Ok(report)
}
