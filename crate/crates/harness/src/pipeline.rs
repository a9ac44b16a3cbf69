//! Stage runner. Every stage reads its inputs from and writes its outputs to
//! the experiment's output directory, so stages compose across invocations.
//!
//! | stage     | reads                          | writes |
//! |-----------|--------------------------------|--------|
//! | gen       |                                | `universe.ckpt` |
//! | pretrain  | universe                       | `pretrain.ckpt` |
//! | finetune  | universe, pretrain             | `finetune.ckpt` |
//! | merge     | universe, pretrain, finetune   | `merge.ckpt` |
//! | intervene | universe, finetune, merge      | `intervene.ckpt` |
//! | eval      | all of the above               | metrics only |
//! | stitch    | universe, finetune, merge, intervene (optional) | `stitch/fig4.csv` |
//! | report    | eval metrics                   | `fig1.csv`, `fig5.csv` |
//!
//! Each stage also writes `metrics/<stage>.csv`; `metrics.csv`,
//! `trajectories.csv` and `summary.md` are rebuilt after every run.

use std::fs;
use std::path::{Path, PathBuf};

use mergelab_core::interventions::{InterventionSet, InterventionSpec};
use mergelab_core::merging::{attach_task_heads, LinearMerge, MergeMethod, MergePlan};
use mergelab_core::taskgen::{self, Family, Sample, SyntheticTask, TestSplit, Universe, TOKENS};
use mergelab_core::training::{
    features, subset_data, train_adamerging, train_interventions, MergedModel, TrainConfig, Trajectory,
};
use mergelab_core::transformer::EncoderConfig;
use mergelab_core::{ParamSet, Tensor};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Stage, Variant};
use crate::error::{Error, Result};
use crate::eval::{bias_metric, evaluate, stitch_probe, Models};
use crate::report::{self, part_variant, run_key, Metric, MetricIndex, ALL_TASKS, AVERAGE, TRAJECTORY_HEADER};

pub const THREADS_ENV: &str = "MERGELAB_THREADS";

/// Rayon pool sized by `MERGELAB_THREADS` (default: all cores).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n.min(available),
            _ => {
                return Err(Error::Config(vec![format!(
                    "{THREADS_ENV}: `{v}` is not a positive integer"
                )]))
            }
        },
        Err(_) => available,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::stage("setup", e.to_string()))
}

/// Files produced by a run.
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub out: PathBuf,
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub stages: Vec<Stage>,
}

/// Loads, validates and runs the config at `path`.
pub fn run_experiment(path: &Path) -> Result<RunOutputs> {
    let cfg = ExperimentConfig::load(path)?;
    run_config(&cfg)
}

/// Runs `cfg.stages` in pipeline order.
pub fn run_config(cfg: &ExperimentConfig) -> Result<RunOutputs> {
    cfg.validate()?;
    let pool = thread_pool()?;
    let mut stages = cfg.stages.clone();
    stages.sort();
    stages.dedup();
    let ctx = Ctx { cfg, out: &cfg.out };
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    fs::write(cfg.out.join("config.resolved"), cfg.to_text()).map_err(|e| Error::io(&cfg.out, e))?;
    pool.install(|| -> Result<()> {
        for &st in &stages {
            ctx.run_stage(st)?;
        }
        Ok(())
    })?;
    ctx.rebuild_combined()?;
    Ok(RunOutputs {
        out: cfg.out.clone(),
        metrics: cfg.out.join("metrics.csv"),
        summary: cfg.out.join("summary.md"),
        stages,
    })
}

/// Encoder for `universe` with the configured shape.
pub fn encoder_config(cfg: &ExperimentConfig, universe: &Universe) -> EncoderConfig {
    EncoderConfig {
        num_blocks: cfg.encoder.blocks,
        dim: cfg.encoder.dim,
        heads: cfg.encoder.heads,
        mlp_ratio: cfg.encoder.mlp_ratio,
        seq_len: TOKENS + 1,
        vocab: universe.vocab,
        num_classes: universe.num_classes(),
    }
}

/// Merge plan for `method` with the configured coefficients.
pub fn plan_for(cfg: &ExperimentConfig, method: MergeMethod) -> Result<MergePlan> {
    let mut plan = MergePlan::default_for(method, cfg.tasks, cfg.encoder.blocks);
    plan.ties_trim = cfg.merge.ties_trim;
    if let (Some(l), false) = (cfg.merge.lambda, method == MergeMethod::Average) {
        plan.lambda = plan.lambda.with_flat(&vec![l; plan.lambda.flat().len()])?;
    }
    Ok(plan)
}

/// Merge methods that get computed: the reported ones plus the primary.
pub fn merge_methods(cfg: &ExperimentConfig) -> Vec<MergeMethod> {
    MergeMethod::ALL
        .into_iter()
        .filter(|m| *m == cfg.merge.method || cfg.merge.report_methods.contains(m))
        .collect()
}

/// One intervention training run.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub method: MergeMethod,
    /// `ours`, `surgery` or `part<w>`.
    pub variant: String,
    pub spec: InterventionSpec,
}

impl RunSpec {
    pub fn key(&self) -> String {
        run_key(self.method, &self.variant)
    }
}

/// Every intervention run implied by the config.
pub fn intervention_runs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut runs = Vec::new();
    for method in merge_methods(cfg) {
        for &v in &cfg.variants {
            let spec = match v {
                Variant::Ours => cfg.intervention.clone(),
                Variant::Surgery => InterventionSpec::surgery(cfg.surgery_rank),
            };
            runs.push(RunSpec {
                method,
                variant: v.to_string(),
                spec,
            });
        }
        if method == cfg.merge.method {
            for &w in &cfg.part_sizes {
                let mut spec = cfg.intervention.clone();
                spec.slice = Some((0, w));
                runs.push(RunSpec {
                    method,
                    variant: part_variant(w),
                    spec,
                });
            }
        }
    }
    runs
}

fn task_prefix(t: usize) -> String {
    format!("task{t}/")
}

pub fn save_universe(universe: &Universe, path: &Path) -> Result<()> {
    let mut c = Checkpoint::new();
    c.insert_tensor("meta.vocab", &Tensor::scalar(universe.vocab as f64));
    c.insert_tensor("meta.tasks", &Tensor::scalar(universe.tasks.len() as f64));
    for task in &universe.tasks {
        let p = format!("task{}.", task.id);
        c.insert_tensor(format!("{p}classes"), &Tensor::scalar(task.classes as f64));
        c.insert_u8(format!("{p}seed"), vec![8], task.seed.to_le_bytes().to_vec());
        c.insert_u8(format!("{p}specials"), vec![task.specials.len()], task.specials.clone());
        for (split, samples) in [("train", &task.train[..]), ("test", task.test.samples())] {
            let tokens: Vec<u8> = samples.iter().flat_map(|s| s.tokens.iter().copied()).collect();
            let labels: Vec<u8> = samples.iter().map(|s| s.label as u8).collect();
            c.insert_u8(format!("{p}{split}.tokens"), vec![samples.len(), TOKENS], tokens);
            c.insert_u8(format!("{p}{split}.labels"), vec![samples.len()], labels);
        }
    }
    c.save(path)
}

pub fn load_universe(path: &Path) -> Result<Universe> {
    let c = Checkpoint::load(path)?;
    let scalar = |name: &str| -> Result<usize> { Ok(c.tensor(name)?.item() as usize) };
    let vocab = scalar("meta.vocab")?;
    let n = scalar("meta.tasks")?;
    let mut tasks = Vec::with_capacity(n);
    for t in 0..n {
        let p = format!("task{t}.");
        let split = |name: &str| -> Result<Vec<Sample>> {
            let (shape, tokens) = c.u8s(&format!("{p}{name}.tokens"))?;
            let (_, labels) = c.u8s(&format!("{p}{name}.labels"))?;
            if shape.len() != 2 || shape[1] != TOKENS || labels.len() != shape[0] {
                return Err(Error::Checkpoint(format!("task {t} {name} split has shape {shape:?}")));
            }
            Ok(tokens
                .chunks(TOKENS)
                .zip(labels)
                .map(|(g, &l)| Sample {
                    tokens: g.to_vec(),
                    label: l as usize,
                })
                .collect())
        };
        let seed_bytes = c.u8s(&format!("{p}seed"))?.1;
        tasks.push(SyntheticTask {
            id: t,
            family: Family::of_task(t),
            classes: scalar(&format!("{p}classes"))?,
            specials: c.u8s(&format!("{p}specials"))?.1.to_vec(),
            seed: u64::from_le_bytes(
                seed_bytes
                    .try_into()
                    .map_err(|_| Error::Checkpoint("task seed is not 8 bytes".into()))?,
            ),
            train: split("train")?,
            test: TestSplit::new(split("test")?),
        });
    }
    Ok(Universe { vocab, tasks })
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
}

type TrajRow = Vec<String>;

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn train_cfg(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: self.cfg.seed,
            ..base.clone()
        }
    }

    /// Loads a checkpoint another stage produced.
    fn dependency(&self, stage: Stage, file: &str, producer: Stage) -> Result<Checkpoint> {
        let path = self.path(file);
        if !path.exists() {
            return Err(Error::stage(
                &stage.to_string(),
                format!(
                    "missing checkpoint dependency {} (run stage `{producer}` first)",
                    path.display()
                ),
            ));
        }
        Checkpoint::load(&path)
    }

    fn universe(&self, stage: Stage) -> Result<(Universe, EncoderConfig)> {
        let path = self.path("universe.ckpt");
        if !path.exists() {
            return Err(Error::stage(
                &stage.to_string(),
                format!(
                    "missing checkpoint dependency {} (run stage `gen` first)",
                    path.display()
                ),
            ));
        }
        let u = load_universe(&path)?;
        if u.tasks.len() != self.cfg.tasks {
            return Err(Error::stage(
                &stage.to_string(),
                format!(
                    "universe has {} tasks, config asks for {}",
                    u.tasks.len(),
                    self.cfg.tasks
                ),
            ));
        }
        let enc = encoder_config(self.cfg, &u);
        Ok((u, enc))
    }

    fn task_models(&self, stage: Stage) -> Result<Vec<ParamSet>> {
        let c = self.dependency(stage, "finetune.ckpt", Stage::Finetune)?;
        (0..self.cfg.tasks).map(|t| c.params(&task_prefix(t))).collect()
    }

    fn theta_pre(&self, stage: Stage) -> Result<ParamSet> {
        self.dependency(stage, "pretrain.ckpt", Stage::Pretrain)?.params("")
    }

    fn merged(&self, stage: Stage, method: MergeMethod) -> Result<(ParamSet, Vec<f64>)> {
        let c = self.dependency(stage, "merge.ckpt", Stage::Merge)?;
        let params = c.params(&format!("{method}/"))?;
        if params.is_empty() {
            return Err(Error::stage(
                &stage.to_string(),
                format!("merge.ckpt has no `{method}` merge; rerun stage `merge` with this config"),
            ));
        }
        Ok((params, c.tensor(&format!("lambda/{method}"))?.data().to_vec()))
    }

    /// Unlabeled inputs available for adaptation: the configured fraction of
    /// each task's test split.
    fn unlabeled(&self, universe: &Universe) -> Result<Vec<Vec<Vec<u8>>>> {
        let sizes: Vec<usize> = universe.tasks.iter().map(|t| t.test.len()).collect();
        let picks = subset_data(&sizes, self.cfg.data_fraction, self.cfg.seed)?;
        Ok(universe
            .tasks
            .iter()
            .zip(picks)
            .map(|(task, idx)| {
                let s = task.test.samples();
                idx.into_iter().map(|i| s[i].tokens.clone()).collect()
            })
            .collect())
    }

    fn write_stage(&self, stage: Stage, metrics: &[Metric], traj: &[TrajRow]) -> Result<()> {
        report::write_metrics(
            &self.path(&format!("metrics/{stage}.csv")),
            &self.cfg.id,
            self.cfg.seed,
            metrics,
        )?;
        let traj_path = self.path(&format!("trajectories/{stage}.csv"));
        if traj.is_empty() {
            if traj_path.exists() {
                fs::remove_file(&traj_path).map_err(|e| Error::io(&traj_path, e))?;
            }
            Ok(())
        } else {
            report::write_csv(&traj_path, &TRAJECTORY_HEADER, traj)
        }
    }

    fn traj_rows(&self, stage: Stage, run: &str, traj: &Trajectory, tasks: &[String]) -> Vec<TrajRow> {
        let mut rows = Vec::new();
        for (i, losses) in traj.losses.iter().enumerate() {
            for (t, l) in losses.iter().enumerate() {
                rows.push(vec![
                    self.cfg.id.clone(),
                    stage.to_string(),
                    run.to_string(),
                    i.to_string(),
                    tasks.get(t).cloned().unwrap_or_else(|| t.to_string()),
                    l.to_string(),
                ]);
            }
        }
        rows
    }

    fn all_metrics(&self) -> Result<Vec<Metric>> {
        let mut all = Vec::new();
        for st in Stage::ALL {
            let p = self.path(&format!("metrics/{st}.csv"));
            if p.exists() {
                all.extend(report::read_metrics(&p)?);
            }
        }
        Ok(all)
    }

    /// Concatenates the per-stage files in stage order and refreshes the summary.
    fn rebuild_combined(&self) -> Result<()> {
        let metrics = self.all_metrics()?;
        report::write_metrics(&self.path("metrics.csv"), &self.cfg.id, self.cfg.seed, &metrics)?;
        let mut traj = Vec::new();
        for st in Stage::ALL {
            let p = self.path(&format!("trajectories/{st}.csv"));
            if p.exists() {
                let mut r = csv::Reader::from_path(&p)?;
                for rec in r.records() {
                    traj.push(rec?.iter().map(str::to_string).collect());
                }
            }
        }
        report::write_csv(&self.path("trajectories.csv"), &TRAJECTORY_HEADER, &traj)?;
        let families: Vec<Family> = (0..self.cfg.tasks).map(Family::of_task).collect();
        let text = report::summary(self.cfg, &families, &metrics);
        let p = self.path("summary.md");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn run_stage(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Gen => self.gen(),
            Stage::Pretrain => self.pretrain(),
            Stage::Finetune => self.finetune(),
            Stage::Merge => self.merge(),
            Stage::Intervene => self.intervene(),
            Stage::Eval => self.eval(),
            Stage::Stitch => self.stitch(),
            Stage::Report => self.report(),
        }
    }

    fn gen(&self) -> Result<()> {
        let cfg = self.cfg;
        let u = taskgen::gen_tasks_sized(cfg.tasks, cfg.seed, cfg.train_per_task, cfg.test_per_task)?;
        save_universe(&u, &self.path("universe.ckpt"))?;
        let mut m = vec![Metric::new(Stage::Gen, ALL_TASKS, "vocab", u.vocab as f64)];
        for task in &u.tasks {
            m.push(Metric::new(
                Stage::Gen,
                task.id,
                "train_samples",
                task.train.len() as f64,
            ));
            m.push(Metric::new(Stage::Gen, task.id, "test_samples", task.test.len() as f64));
        }
        self.write_stage(Stage::Gen, &m, &[])
    }

    fn pretrain(&self) -> Result<()> {
        let (u, enc) = self.universe(Stage::Pretrain)?;
        let r = taskgen::pretrain(&enc, &u, &self.train_cfg(&self.cfg.pretrain))?;
        Checkpoint::from_params(&r.theta_pre).save(&self.path("pretrain.ckpt"))?;
        let st = Stage::Pretrain;
        let m = vec![
            Metric::new(st, ALL_TASKS, "pretext_accuracy", r.pretext_accuracy),
            Metric::new(st, ALL_TASKS, "pretext_chance_accuracy", r.chance_accuracy),
            Metric::new(st, ALL_TASKS, "loss_first", r.trajectory.first_mean()),
            Metric::new(st, ALL_TASKS, "loss_last", r.trajectory.last_mean()),
        ];
        let traj = self.traj_rows(st, "pretrain", &r.trajectory, &[ALL_TASKS.to_string()]);
        self.write_stage(st, &m, &traj)
    }

    fn finetune(&self) -> Result<()> {
        let st = Stage::Finetune;
        let (u, enc) = self.universe(st)?;
        let pre = self.theta_pre(st)?;
        let train = self.train_cfg(&self.cfg.finetune);
        let results = u
            .tasks
            .par_iter()
            .map(|task| taskgen::finetune(&enc, &pre, task, &train, 0))
            .collect::<mergelab_core::Result<Vec<_>>>()?;
        let mut c = Checkpoint::new();
        let mut m = Vec::new();
        let mut traj = Vec::new();
        for (t, r) in results.iter().enumerate() {
            c.insert_params(&task_prefix(t), &r.params);
            m.push(Metric::new(st, t, "loss_first", r.trajectory.first_mean()));
            m.push(Metric::new(st, t, "loss_last", r.trajectory.last_mean()));
            traj.extend(self.traj_rows(st, &format!("task{t}"), &r.trajectory, &[t.to_string()]));
        }
        c.save(&self.path("finetune.ckpt"))?;
        self.write_stage(st, &m, &traj)
    }

    fn merge(&self) -> Result<()> {
        let st = Stage::Merge;
        let cfg = self.cfg;
        let (u, enc) = self.universe(st)?;
        let pre = self.theta_pre(st)?;
        let models = self.task_models(st)?;
        let degenerate = models.windows(2).all(|w| w[0].bit_eq(&w[1]));
        let mut m = vec![Metric::new(
            st,
            ALL_TASKS,
            "degenerate",
            f64::from(u8::from(degenerate)),
        )];
        let mut c = Checkpoint::new();
        let mut traj = Vec::new();
        let need_inputs = merge_methods(cfg).iter().any(|m| m.is_adamerging());
        let inputs = if need_inputs { self.unlabeled(&u)? } else { Vec::new() };
        for method in merge_methods(cfg) {
            let plan = plan_for(cfg, method)?;
            let (params, lambda) = if method.is_adamerging() {
                let lm = LinearMerge::from_plan(&plan, &pre, &models, enc.num_blocks)?;
                let run = train_adamerging(&enc, &lm, &inputs, &self.train_cfg(&cfg.adamerging))?;
                m.push(Metric::new(
                    st,
                    ALL_TASKS,
                    format!("entropy_first:{method}"),
                    run.trajectory.first_mean(),
                ));
                m.push(Metric::new(
                    st,
                    ALL_TASKS,
                    format!("entropy_last:{method}"),
                    run.trajectory.last_mean(),
                ));
                traj.extend(self.traj_rows(st, &method.to_string(), &run.trajectory, &[ALL_TASKS.to_string()]));
                (run.merge.materialize()?, run.merge.lambda.flat())
            } else {
                (plan.apply(&pre, &models, enc.num_blocks)?, plan.lambda.flat())
            };
            if degenerate {
                let same = params.bit_eq(&models[0]);
                m.push(Metric::new(
                    st,
                    ALL_TASKS,
                    format!("merged_equals_inputs:{method}"),
                    f64::from(u8::from(same)),
                ));
            }
            c.insert_params(&format!("{method}/"), &params);
            c.insert_tensor(format!("lambda/{method}"), &Tensor::vector(lambda));
        }
        c.save(&self.path("merge.ckpt"))?;
        self.write_stage(st, &m, &traj)
    }

    fn intervene(&self) -> Result<()> {
        let st = Stage::Intervene;
        let cfg = self.cfg;
        let (u, enc) = self.universe(st)?;
        let models = self.task_models(st)?;
        let inputs = self.unlabeled(&u)?;
        let teachers = models
            .par_iter()
            .zip(&inputs)
            .map(|(model, x)| features(&enc, model, x))
            .collect::<mergelab_core::Result<Vec<Tensor>>>()?;
        let train = self.train_cfg(&cfg.train);
        let task_names: Vec<String> = (0..cfg.tasks).map(|t| t.to_string()).collect();
        let pre = if train.learn_lambdas {
            Some(self.theta_pre(st)?)
        } else {
            None
        };
        let mut c = Checkpoint::new();
        let mut m = Vec::new();
        let mut traj = Vec::new();
        for run in intervention_runs(cfg) {
            let (merged, lambda) = self.merged(st, run.method)?;
            let init = InterventionSet::init(&run.spec, cfg.tasks, enc.dim, enc.num_blocks, cfg.seed)?;
            let linear = match &pre {
                Some(pre) => {
                    let plan = plan_for(cfg, run.method)?;
                    let lm = LinearMerge::from_plan(&plan, pre, &models, enc.num_blocks)?;
                    let lambda = lm.lambda.with_flat(&lambda)?;
                    Some(LinearMerge { lambda, ..lm })
                }
                None => None,
            };
            let model = match &linear {
                Some(lm) => MergedModel::Linear(lm),
                None => MergedModel::Fixed(&merged),
            };
            let r = train_interventions(&enc, model, &inputs, &teachers, init, &train)?;
            let key = run.key();
            for (t, p) in r.interventions.tasks.iter().enumerate() {
                c.insert_params(&format!("{key}/{}", task_prefix(t)), p);
            }
            if linear.is_some() {
                c.insert_params(&format!("{key}/merged/"), &r.merged);
            }
            m.push(Metric::new(
                st,
                ALL_TASKS,
                format!("loss_first:{key}"),
                r.trajectory.first_mean(),
            ));
            m.push(Metric::new(
                st,
                ALL_TASKS,
                format!("loss_last:{key}"),
                r.trajectory.last_mean(),
            ));
            m.push(Metric::new(
                st,
                ALL_TASKS,
                format!("max_orthonormality_error:{key}"),
                r.interventions.max_orthonormality_error(),
            ));
            traj.extend(self.traj_rows(st, &key, &r.trajectory, &task_names));
        }
        c.save(&self.path("intervene.ckpt"))?;
        self.write_stage(st, &m, &traj)
    }

    /// Trained interventions (and merged model) of `run`.
    fn run_result(&self, c: &Checkpoint, run: &RunSpec, merged: &ParamSet) -> Result<(InterventionSet, ParamSet)> {
        let key = run.key();
        let tasks = (0..self.cfg.tasks)
            .map(|t| c.params(&format!("{key}/{}", task_prefix(t))))
            .collect::<Result<Vec<_>>>()?;
        if tasks.iter().all(ParamSet::is_empty) {
            return Err(Error::stage(
                "eval",
                format!("intervene.ckpt has no run `{key}`; rerun stage `intervene` with this config"),
            ));
        }
        let own = c.params(&format!("{key}/merged/"))?;
        let merged = if own.is_empty() { merged.clone() } else { own };
        Ok((
            InterventionSet {
                spec: run.spec.clone(),
                tasks,
            },
            merged,
        ))
    }

    fn eval(&self) -> Result<()> {
        let st = Stage::Eval;
        let cfg = self.cfg;
        let (u, enc) = self.universe(st)?;
        let pre = self.theta_pre(st)?;
        let models = self.task_models(st)?;
        let mut m = Vec::new();
        let mut record = |key: &str, r: &crate::eval::EvalResult| {
            for (t, a) in r.per_task.iter().enumerate() {
                m.push(Metric::new(st, t, format!("accuracy:{key}"), *a));
            }
            m.push(Metric::new(st, AVERAGE, format!("accuracy:{key}"), r.average));
            m.push(Metric::new(
                st,
                ALL_TASKS,
                format!("extra_params:{key}"),
                r.extra_params as f64,
            ));
        };
        let mut with_heads = pre.clone();
        attach_task_heads(&mut with_heads, &models);
        record(
            "pretrained",
            &evaluate(&enc, Models::Shared(&with_heads), None, &u.tasks)?,
        );
        record("individual", &evaluate(&enc, Models::PerTask(&models), None, &u.tasks)?);
        let methods = merge_methods(cfg);
        let mut merged_models = Vec::new();
        for &method in &methods {
            let (merged, _) = self.merged(st, method)?;
            record(
                &method.to_string(),
                &evaluate(&enc, Models::Shared(&merged), None, &u.tasks)?,
            );
            merged_models.push(merged);
        }
        let intervene = self.path("intervene.ckpt");
        let mut bias = Vec::new();
        if intervene.exists() {
            let c = Checkpoint::load(&intervene)?;
            for run in intervention_runs(cfg) {
                let base = &merged_models[methods.iter().position(|&x| x == run.method).expect("method merged")];
                let (iv, merged) = self.run_result(&c, &run, base)?;
                let key = run.key();
                record(&key, &evaluate(&enc, Models::Shared(&merged), Some(&iv), &u.tasks)?);
                let per_task = u
                    .tasks
                    .par_iter()
                    .enumerate()
                    .map(|(t, task)| {
                        let x = task.test.samples();
                        let before = bias_metric(&enc, base, None, &models[t], t, x)?;
                        let after = bias_metric(&enc, &merged, Some(&iv), &models[t], t, x)?;
                        Ok((before, after))
                    })
                    .collect::<mergelab_core::Result<Vec<_>>>()?;
                for (t, (before, after)) in per_task.into_iter().enumerate() {
                    bias.push(Metric::new(st, t, format!("bias_pre:{key}"), before));
                    bias.push(Metric::new(st, t, format!("bias_post:{key}"), after));
                }
            }
        }
        m.extend(bias);
        self.write_stage(st, &m, &[])
    }

    fn stitch(&self) -> Result<()> {
        let st = Stage::Stitch;
        let cfg = self.cfg;
        let (u, enc) = self.universe(st)?;
        let models = self.task_models(st)?;
        let (merged, _) = self.merged(st, cfg.merge.method)?;
        let mut profiles: Vec<(&str, ParamSet, Option<InterventionSet>)> = vec![("merged", merged.clone(), None)];
        let intervene = self.path("intervene.ckpt");
        if intervene.exists() && cfg.variants.contains(&Variant::Ours) {
            let c = Checkpoint::load(&intervene)?;
            let run = RunSpec {
                method: cfg.merge.method,
                variant: Variant::Ours.to_string(),
                spec: cfg.intervention.clone(),
            };
            let (iv, own) = self.run_result(&c, &run, &merged)?;
            profiles.push(("merged+ours", own, Some(iv)));
        }
        let n = enc.num_blocks;
        let mut rows = Vec::new();
        let mut m = Vec::new();
        let mut endpoints_exact = true;
        for (name, front, iv) in &profiles {
            let per_task = u
                .tasks
                .par_iter()
                .enumerate()
                .map(|(t, task)| stitch_probe(&enc, front, &models[t], task, t, iv.as_ref()))
                .collect::<mergelab_core::Result<Vec<_>>>()?;
            let pure_task = evaluate(&enc, Models::PerTask(&models), None, &u.tasks)?;
            let pure_merged = evaluate(&enc, Models::Shared(front), iv.as_ref(), &u.tasks)?;
            for (t, p) in per_task.iter().enumerate() {
                endpoints_exact &= p.accuracy[0] == pure_task.per_task[t] && p.accuracy[n] == pure_merged.per_task[t];
            }
            for b in 0..=n {
                let mut sum = 0.0;
                for (t, p) in per_task.iter().enumerate() {
                    let a = p.accuracy[b];
                    sum += a;
                    rows.push(vec![name.to_string(), b.to_string(), t.to_string(), a.to_string()]);
                    m.push(Metric::new(st, t, format!("stitch:{name}:b{b}"), a));
                }
                let avg = sum / per_task.len() as f64;
                rows.push(vec![
                    name.to_string(),
                    b.to_string(),
                    AVERAGE.to_string(),
                    avg.to_string(),
                ]);
                m.push(Metric::new(st, AVERAGE, format!("stitch:{name}:b{b}"), avg));
            }
        }
        m.push(Metric::new(
            st,
            ALL_TASKS,
            "stitch_endpoints_exact",
            f64::from(u8::from(endpoints_exact)),
        ));
        report::write_csv(
            &self.path("stitch/fig4.csv"),
            &["profile", "b", "task", "accuracy"],
            &rows,
        )?;
        self.write_stage(st, &m, &[])
    }

    fn report(&self) -> Result<()> {
        let st = Stage::Report;
        let cfg = self.cfg;
        let eval_path = self.path("metrics/eval.csv");
        if !eval_path.exists() {
            return Err(Error::stage(
                "report",
                format!("missing {} (run stage `eval` first)", eval_path.display()),
            ));
        }
        let idx = MetricIndex::new(&report::read_metrics(&eval_path)?);
        let point = |key: &str| -> Option<(f64, f64)> {
            Some((
                idx.get(&format!("extra_params:{key}"), ALL_TASKS)?,
                idx.get(&format!("accuracy:{key}"), AVERAGE)?,
            ))
        };
        let mut fig1 = Vec::new();
        let mut keys: Vec<String> = vec!["individual".into()];
        for method in merge_methods(cfg) {
            keys.push(method.to_string());
        }
        keys.extend(intervention_runs(cfg).iter().map(RunSpec::key));
        for key in keys {
            if let Some((extra, acc)) = point(&key) {
                fig1.push(vec![key, extra.to_string(), acc.to_string()]);
            }
        }
        report::write_csv(&self.path("fig1.csv"), &["run", "extra_params", "avg_accuracy"], &fig1)?;
        let mut fig5 = Vec::new();
        let mut widths: Vec<(usize, String)> = cfg
            .part_sizes
            .iter()
            .map(|&w| (w, run_key(cfg.merge.method, &part_variant(w))))
            .collect();
        if cfg.variants.contains(&Variant::Ours) {
            widths.push((
                cfg.intervention.width(cfg.encoder.dim),
                run_key(cfg.merge.method, "ours"),
            ));
        }
        widths.sort();
        for (w, key) in widths {
            if let Some((extra, acc)) = point(&key) {
                fig5.push(vec![w.to_string(), key, extra.to_string(), acc.to_string()]);
            }
        }
        report::write_csv(
            &self.path("fig5.csv"),
            &["width", "run", "extra_params", "avg_accuracy"],
            &fig5,
        )?;
        let m = vec![
            Metric::new(st, ALL_TASKS, "fig1_points", fig1.len() as f64),
            Metric::new(st, ALL_TASKS, "fig5_points", fig5.len() as f64),
        ];
        self.write_stage(st, &m, &[])
    }
}
