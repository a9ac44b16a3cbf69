//! Synthetic multi-task universe on 4×4 token grids.
//!
//! Every task reads a different kind of motif out of the same token
//! vocabulary:
//!
//! - `Presence`: which of four marker tokens appears in the grid;
//! - `Position`: which quadrant holds the task's probe token;
//! - `Count`: how many copies (1 to 4) of the probe token appear;
//! - `Majority`: which of four marker tokens appears three times.
//!
//! Background cells are drawn from every token except the task's own special
//! tokens, so other tasks' motifs show up as distractors. Task `t` uses family
//! `t mod 4` with its own special tokens.

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Error, Result};
use crate::interventions::InterventionSpec;
use crate::optim::Adam;
use crate::params::{ParamSet, ParamVars};
use crate::tensor::{Tape, Tensor};
use crate::training::{TrainConfig, Trajectory};
use crate::transformer::{encode, head_logits, head_prefix, init_params, predict, EncoderConfig};

pub const GRID: usize = 4;
pub const TOKENS: usize = GRID * GRID;
pub const CLASSES: usize = 4;
/// Tokens that belong to no task.
pub const SHARED_NOISE: usize = 6;
pub const TRAIN_PER_TASK: usize = 512;
pub const TEST_PER_TASK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Presence,
    Position,
    Count,
    Majority,
}

impl Family {
    pub fn of_task(t: usize) -> Family {
        [Family::Presence, Family::Position, Family::Count, Family::Majority][t % 4]
    }

    fn special_tokens(self) -> usize {
        match self {
            Family::Presence | Family::Majority => CLASSES,
            Family::Position | Family::Count => 1,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Presence => "presence",
            Family::Position => "position",
            Family::Count => "count",
            Family::Majority => "majority",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub tokens: Vec<u8>,
    pub label: usize,
}

impl AsRef<[u8]> for Sample {
    fn as_ref(&self) -> &[u8] {
        &self.tokens
    }
}

/// Test split that counts how often its samples are read.
#[derive(Debug)]
pub struct TestSplit {
    samples: Vec<Sample>,
    reads: AtomicUsize,
}

impl TestSplit {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self {
            samples,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn samples(&self) -> &[Sample] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

impl Clone for TestSplit {
    fn clone(&self) -> Self {
        Self::new(self.samples.clone())
    }
}

impl PartialEq for TestSplit {
    fn eq(&self, other: &Self) -> bool {
        self.samples == other.samples
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub id: usize,
    pub family: Family,
    pub classes: usize,
    /// The task's special tokens (markers or probe).
    pub specials: Vec<u8>,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: TestSplit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Universe {
    pub vocab: usize,
    pub tasks: Vec<SyntheticTask>,
}

impl Universe {
    pub fn num_classes(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.classes).collect()
    }

    /// Desk encoder for this universe.
    pub fn desk_config(&self) -> EncoderConfig {
        EncoderConfig::desk(self.vocab, self.num_classes())
    }
}

/// Label of a grid under a task's rule, by exhaustive inspection. `None` when
/// the grid is ambiguous for the task.
pub fn detect_label(family: Family, specials: &[u8], grid: &[u8]) -> Option<usize> {
    let count = |tok: u8| grid.iter().filter(|&&g| g == tok).count();
    match family {
        Family::Presence => {
            let present: Vec<usize> = (0..specials.len()).filter(|&c| count(specials[c]) > 0).collect();
            (present.len() == 1).then(|| present[0])
        }
        Family::Position => {
            let cells: Vec<usize> = (0..grid.len()).filter(|&i| grid[i] == specials[0]).collect();
            if cells.len() != 1 {
                return None;
            }
            let (r, c) = (cells[0] / GRID, cells[0] % GRID);
            Some(2 * (r / 2) + c / 2)
        }
        Family::Count => {
            let n = count(specials[0]);
            (1..=CLASSES).contains(&n).then(|| n - 1)
        }
        Family::Majority => {
            let counts: Vec<usize> = specials.iter().map(|&s| count(s)).collect();
            let top = *counts.iter().max()?;
            let winners: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == top).collect();
            (winners.len() == 1 && top > 0).then(|| winners[0])
        }
    }
}

fn generate_grid(rng: &mut ChaCha8Rng, family: Family, specials: &[u8], noise: &[u8], label: usize) -> Vec<u8> {
    let mut cells: Vec<usize> = (0..TOKENS).collect();
    cells.shuffle(rng);
    let mut grid = vec![u8::MAX; TOKENS];
    let mut next = 0;
    let mut place = |grid: &mut Vec<u8>, tok: u8| {
        grid[cells[next]] = tok;
        next += 1;
    };
    match family {
        Family::Presence => {
            for _ in 0..rng.random_range(1..=2) {
                place(&mut grid, specials[label]);
            }
        }
        Family::Position => {
            let (qr, qc) = (label / 2, label % 2);
            let cell = (2 * qr + rng.random_range(0..2)) * GRID + 2 * qc + rng.random_range(0..2);
            grid[cell] = specials[0];
        }
        Family::Count => {
            for _ in 0..=label {
                place(&mut grid, specials[0]);
            }
        }
        Family::Majority => {
            for _ in 0..3 {
                place(&mut grid, specials[label]);
            }
            for (c, &s) in specials.iter().enumerate() {
                if c != label && rng.random_bool(0.5) {
                    place(&mut grid, s);
                }
            }
        }
    }
    for g in grid.iter_mut() {
        if *g == u8::MAX {
            *g = noise[rng.random_range(0..noise.len())];
        }
    }
    grid
}

/// Generates `tasks` synthetic tasks with class-balanced, disjoint
/// train/test splits.
pub fn gen_tasks(tasks: usize, seed: u64) -> Result<Universe> {
    gen_tasks_sized(tasks, seed, TRAIN_PER_TASK, TEST_PER_TASK)
}

pub fn gen_tasks_sized(tasks: usize, seed: u64, train: usize, test: usize) -> Result<Universe> {
    if tasks < 2 {
        return contract_err("need at least two tasks");
    }
    if train == 0 || test == 0 {
        return contract_err("splits must be nonempty");
    }
    let mut specials = Vec::with_capacity(tasks);
    let mut next = 0usize;
    for t in 0..tasks {
        let n = Family::of_task(t).special_tokens();
        specials.push((next..next + n).map(|v| v as u8).collect::<Vec<u8>>());
        next += n;
    }
    let vocab = next + SHARED_NOISE;
    if vocab > u8::MAX as usize {
        return contract_err(format!("{tasks} tasks need more than 255 tokens"));
    }
    let mut out = Vec::with_capacity(tasks);
    for (t, sp) in specials.into_iter().enumerate() {
        let family = Family::of_task(t);
        let task_seed = seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(t as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
        let noise: Vec<u8> = (0..vocab as u8).filter(|v| !sp.contains(v)).collect();
        let mut seen = HashSet::new();
        let mut split = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
            let mut labels: Vec<usize> = (0..n).map(|i| i % CLASSES).collect();
            labels.shuffle(rng);
            labels
                .into_iter()
                .map(|label| loop {
                    let tokens = generate_grid(rng, family, &sp, &noise, label);
                    if seen.insert(tokens.clone()) {
                        break Sample { tokens, label };
                    }
                })
                .collect()
        };
        let train_s = split(train, &mut rng);
        let test_s = split(test, &mut rng);
        out.push(SyntheticTask {
            id: t,
            family,
            classes: CLASSES,
            specials: sp,
            seed: task_seed,
            train: train_s,
            test: TestSplit::new(test_s),
        });
    }
    Ok(Universe { vocab, tasks: out })
}

/// Fraction of `samples` whose prediction under head `task` equals the label.
pub fn accuracy(
    cfg: &EncoderConfig,
    params: &ParamSet,
    samples: &[Sample],
    task: usize,
    intervention: Option<(&InterventionSpec, &ParamSet)>,
) -> Result<f64> {
    if samples.is_empty() {
        return contract_err("accuracy over an empty sample set");
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(64) {
        let preds = predict(cfg, params, chunk, task, intervention)?;
        correct += preds.iter().zip(chunk).filter(|(p, s)| p.class == s.label).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Clone, Debug)]
pub struct PretrainResult {
    pub theta_pre: ParamSet,
    /// Per-label accuracy of the presence pretext head on the pretext data.
    pub pretext_accuracy: f64,
    /// Accuracy of always predicting each label's majority value.
    pub chance_accuracy: f64,
    pub trajectory: Trajectory,
}

fn presence_targets(tokens: &[u8], vocab: usize) -> Vec<f64> {
    let mut t = vec![0.0; vocab];
    for &g in tokens {
        t[g as usize] = 1.0;
    }
    t
}

/// Trains the shared backbone on token-presence prediction over the
/// unlabeled inputs of every task. Task heads keep their random init.
pub fn pretrain(cfg: &EncoderConfig, universe: &Universe, train: &TrainConfig) -> Result<PretrainResult> {
    train.validate()?;
    let inputs: Vec<&[u8]> = universe
        .tasks
        .iter()
        .flat_map(|t| t.train.iter().map(|s| s.tokens.as_slice()))
        .collect();
    let v = cfg.vocab;
    let mut params = init_params(cfg, train.seed)?;
    let mut head = ParamSet::new();
    {
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xA5A5);
        let std = 1.0 / (cfg.dim as f64).sqrt();
        let w = (0..cfg.dim * v).map(|_| rng.random_range(-std..std)).collect();
        head.insert("pretext.w", Tensor::new(vec![cfg.dim, v], w)?);
        head.insert("pretext.b", Tensor::zeros(&[v]));
    }
    let mut opt = train.optimizer();
    let mut head_opt = train.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut trajectory = Trajectory::default();
    let batch = train.batch_size;
    for it in 0..train.iterations {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..inputs.len())).collect();
        let xs: Vec<&[u8]> = idx.iter().map(|&i| inputs[i]).collect();
        let targets: Vec<f64> = xs.iter().flat_map(|x| presence_targets(x, v)).collect();
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &params, true);
        let hv = ParamVars::register(&mut tape, &head, true);
        let repr = encode(&mut tape, cfg, &vars, &xs, None)?;
        let logits = tape.matmul(repr, hv.get("pretext.w")?)?;
        let logits = tape.add_bias(logits, hv.get("pretext.b")?)?;
        let loss = tape.bce_with_logits(logits, &targets)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("pretraining loss {value} at iteration {it}")));
        }
        trajectory.losses.push(vec![value]);
        tape.backward(loss)?;
        let g = vars.grads(&tape);
        let gh = hv.grads(&tape);
        opt.step(&mut params, &g)?;
        head_opt.step(&mut head, &gh)?;
    }

    // Pretext accuracy on (a slice of) the pretext inputs.
    let eval: Vec<&[u8]> = inputs.iter().step_by(4).copied().collect();
    let mut hits = 0usize;
    let mut positives = vec![0usize; v];
    for chunk in eval.chunks(64) {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &params, false);
        let hv = ParamVars::register(&mut tape, &head, false);
        let repr = encode(&mut tape, cfg, &vars, chunk, None)?;
        let logits = tape.matmul(repr, hv.get("pretext.w")?)?;
        let logits = tape.add_bias(logits, hv.get("pretext.b")?)?;
        let lv = tape.value(logits);
        for (i, x) in chunk.iter().enumerate() {
            let t = presence_targets(x, v);
            for j in 0..v {
                positives[j] += t[j] as usize;
                hits += usize::from((lv.row(i)[j] > 0.0) == (t[j] > 0.5));
            }
        }
    }
    let n = eval.len();
    let total = (n * v) as f64;
    let chance = positives.iter().map(|&p| p.max(n - p)).sum::<usize>() as f64 / total;
    Ok(PretrainResult {
        theta_pre: params,
        pretext_accuracy: hits as f64 / total,
        chance_accuracy: chance,
        trajectory,
    })
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub params: ParamSet,
    pub trajectory: Trajectory,
    /// `(step, accuracy on the training split)` every `eval_every` steps.
    pub train_accuracy: Vec<(usize, f64)>,
}

impl FinetuneResult {
    /// First recorded step at which training accuracy reached `target`.
    pub fn steps_to(&self, target: f64) -> Option<usize> {
        self.train_accuracy.iter().find(|(_, a)| *a >= target).map(|(s, _)| *s)
    }
}

/// Full fine-tuning of backbone and head `task` with cross-entropy on the
/// task's training split only. `eval_every = 0` disables accuracy tracking.
pub fn finetune(
    cfg: &EncoderConfig,
    theta_pre: &ParamSet,
    task: &SyntheticTask,
    train: &TrainConfig,
    eval_every: usize,
) -> Result<FinetuneResult> {
    train.validate()?;
    let t = task.id;
    if t >= cfg.num_tasks() {
        return contract_err(format!("task {t} has no head in the encoder config"));
    }
    let data = &task.train;
    let mut params = theta_pre.clone();
    // Other tasks' heads are left exactly as in θ_PRE.
    let trainable = |n: &str| !n.starts_with("head") || n.starts_with(&head_prefix(t));
    let mut opt = Adam::new(train.learning_rate, train.beta1, train.beta2, train.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(7919 * t as u64));
    let mut trajectory = Trajectory::default();
    let mut curve = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    for it in 0..train.iterations {
        if eval_every > 0 && it % eval_every == 0 {
            curve.push((it, accuracy(cfg, &params, data, t, None)?));
        }
        // Epoch-wise shuffling without replacement.
        if order.len() < train.batch_size {
            let mut fresh: Vec<usize> = (0..data.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..train.batch_size.min(order.len())).collect();
        let xs: Vec<&[u8]> = idx.iter().map(|&i| data[i].tokens.as_slice()).collect();
        let ys: Vec<usize> = idx.iter().map(|&i| data[i].label).collect();
        let mut tape = Tape::new();
        let mut vars = ParamVars::new();
        for (n, p) in params.iter() {
            let v = tape.leaf(p.clone(), trainable(n));
            vars.insert(n.clone(), v);
        }
        let repr = encode(&mut tape, cfg, &vars, &xs, None)?;
        let logits = head_logits(&mut tape, cfg, &vars, repr, t)?;
        let loss = tape.cross_entropy(logits, &ys)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("fine-tuning loss {value} at iteration {it}")));
        }
        trajectory.losses.push(vec![value]);
        tape.backward(loss)?;
        let grads = vars.grads(&tape);
        opt.step(&mut params, &grads)?;
    }
    if eval_every > 0 {
        curve.push((train.iterations, accuracy(cfg, &params, data, t, None)?));
    }
    Ok(FinetuneResult {
        params,
        trajectory,
        train_accuracy: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = gen_tasks_sized(4, 7, 64, 32).unwrap();
        let b = gen_tasks_sized(4, 7, 64, 32).unwrap();
        assert_eq!(a, b);
        let c = gen_tasks_sized(4, 8, 64, 32).unwrap();
        assert_ne!(a, c);
        assert!(gen_tasks(1, 0).is_err());
    }

    #[test]
    fn detector_agrees_with_generator() {
        let u = gen_tasks_sized(6, 3, 200, 100).unwrap();
        for task in &u.tasks {
            for s in task.train.iter().chain(task.test.samples()) {
                assert_eq!(detect_label(task.family, &task.specials, &s.tokens), Some(s.label));
                assert!(s.tokens.iter().all(|&g| (g as usize) < u.vocab));
            }
        }
    }

    #[test]
    fn splits_are_balanced_and_disjoint() {
        let u = gen_tasks_sized(4, 11, 130, 66).unwrap();
        for task in &u.tasks {
            for split in [&task.train[..], task.test.samples()] {
                let mut counts = [0usize; CLASSES];
                for s in split {
                    counts[s.label] += 1;
                }
                let ideal = split.len() / CLASSES;
                assert!(counts.iter().all(|&c| c.abs_diff(ideal) <= 1), "{counts:?}");
            }
            let train: HashSet<_> = task.train.iter().map(|s| &s.tokens).collect();
            assert!(task.test.samples().iter().all(|s| !train.contains(&s.tokens)));
        }
    }

    #[test]
    fn detector_hand_cases() {
        let mut g = vec![10u8; 16];
        assert_eq!(detect_label(Family::Presence, &[0, 1, 2, 3], &g), None);
        g[5] = 2;
        assert_eq!(detect_label(Family::Presence, &[0, 1, 2, 3], &g), Some(2));
        assert_eq!(detect_label(Family::Position, &[2], &g), Some(0));
        g[5] = 10;
        g[15] = 2;
        assert_eq!(detect_label(Family::Position, &[2], &g), Some(3));
        g[0] = 2;
        assert_eq!(detect_label(Family::Count, &[2], &g), Some(1));
        assert_eq!(detect_label(Family::Position, &[2], &g), None);
        assert_eq!(detect_label(Family::Majority, &[2, 3, 4, 5], &g), Some(0));
        g[1] = 3;
        g[2] = 3;
        assert_eq!(detect_label(Family::Majority, &[2, 3, 4, 5], &g), None);
    }

    #[test]
    fn test_split_counts_reads() {
        let u = gen_tasks_sized(2, 0, 8, 8).unwrap();
        let t = &u.tasks[0];
        assert_eq!(t.test.reads(), 0);
        let _ = t.test.samples();
        assert_eq!(t.test.reads(), 1);
        assert_eq!(t.test.len(), 8);
    }
}
