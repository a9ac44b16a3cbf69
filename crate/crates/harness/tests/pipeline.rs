use std::fs;
use std::path::Path;

use mergelab::checkpoint::Checkpoint;
use mergelab::eval::bias_metric;
use mergelab::report::{read_metrics, MetricIndex, ALL_TASKS};
use mergelab::{run_config, Error, ExperimentConfig, Stage};
use mergelab_core::interventions::{InterventionSet, InterventionSpec, Pattern};
use mergelab_core::merging::MergeMethod;
use mergelab_core::taskgen::gen_tasks_sized;
use mergelab_core::training::{distill_loss, features};
use mergelab_core::transformer::init_params;
use mergelab_core::{ParamSet, ParamVars, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.id = "tiny".into();
    cfg.out = out.to_path_buf();
    cfg.tasks = 2;
    cfg.train_per_task = 48;
    cfg.test_per_task = 24;
    cfg.encoder.blocks = 2;
    cfg.encoder.dim = 8;
    cfg.encoder.heads = 2;
    cfg.encoder.mlp_ratio = 2.0;
    for t in [
        &mut cfg.pretrain,
        &mut cfg.finetune,
        &mut cfg.adamerging,
        &mut cfg.train,
    ] {
        t.iterations = 3;
        t.batch_size = 8;
    }
    cfg.surgery_rank = 2;
    cfg.part_sizes = vec![4];
    cfg
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn identical_configs_give_identical_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_config(&tiny(a.path())).unwrap();
    run_config(&tiny(b.path())).unwrap();
    assert_eq!(ra.stages, Stage::ALL.to_vec());
    for f in [
        "metrics.csv",
        "trajectories.csv",
        "summary.md",
        "fig1.csv",
        "fig5.csv",
        "stitch/fig4.csv",
        "universe.ckpt",
        "pretrain.ckpt",
        "finetune.ckpt",
        "merge.ckpt",
        "intervene.ckpt",
    ] {
        assert!(
            read(&a.path().join(f)) == read(&b.path().join(f)),
            "{f} differs between runs"
        );
    }
    let idx = MetricIndex::new(&read_metrics(&ra.metrics).unwrap());
    assert_eq!(idx.get("stitch_endpoints_exact", ALL_TASKS), Some(1.0));
    assert_eq!(idx.get("degenerate", ALL_TASKS), Some(0.0));
    for key in [
        "pretrained",
        "individual",
        "task_arithmetic",
        "task_arithmetic+ours",
        "task_arithmetic+surgery",
    ] {
        let acc = idx
            .get(&format!("accuracy:{key}"), "avg")
            .unwrap_or_else(|| panic!("no accuracy:{key}"));
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn seed_changes_the_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = tiny(a.path());
    ca.stages = vec![Stage::Gen, Stage::Pretrain];
    let mut cb = tiny(b.path());
    cb.stages = ca.stages.clone();
    cb.seed = 1;
    run_config(&ca).unwrap();
    run_config(&cb).unwrap();
    assert!(read(&a.path().join("pretrain.ckpt")) != read(&b.path().join("pretrain.ckpt")));
}

#[test]
fn stages_compose_across_invocations() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut whole = tiny(a.path());
    whole.stages = vec![Stage::Gen, Stage::Pretrain, Stage::Finetune, Stage::Merge];
    run_config(&whole).unwrap();
    let mut step = tiny(b.path());
    for st in [Stage::Merge, Stage::Gen, Stage::Finetune, Stage::Pretrain] {
        let r = run_config(&ExperimentConfig {
            stages: vec![st],
            ..step.clone()
        });
        if st == Stage::Merge || st == Stage::Finetune {
            assert!(r.is_err(), "{st} ran before its inputs existed");
        }
    }
    step.stages = vec![Stage::Finetune, Stage::Merge];
    run_config(&step).unwrap();
    assert!(read(&a.path().join("merge.ckpt")) == read(&b.path().join("merge.ckpt")));
}

#[test]
fn missing_dependencies_name_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.stages = vec![Stage::Merge];
    match run_config(&cfg) {
        Err(Error::Stage { stage, message }) => {
            assert_eq!(stage, "merge");
            assert!(
                message.contains("missing checkpoint dependency") && message.contains("`gen`"),
                "{message}"
            );
        }
        other => panic!("expected a stage error, got {other:?}"),
    }
    cfg.stages = vec![Stage::Gen, Stage::Finetune];
    match run_config(&cfg) {
        Err(Error::Stage { stage, message }) => {
            assert_eq!(stage, "finetune");
            assert!(
                message.contains("pretrain.ckpt") && message.contains("`pretrain`"),
                "{message}"
            );
        }
        other => panic!("expected a stage error, got {other:?}"),
    }
    cfg.stages = vec![Stage::Report];
    assert!(run_config(&cfg).is_err());
}

#[test]
fn identical_task_models_are_a_degenerate_merge() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.stages = vec![Stage::Gen, Stage::Pretrain];
    run_config(&cfg).unwrap();
    let pre = Checkpoint::load(&dir.path().join("pretrain.ckpt"))
        .unwrap()
        .params("")
        .unwrap();
    let mut ft = Checkpoint::new();
    for t in 0..cfg.tasks {
        ft.insert_params(&format!("task{t}/"), &pre);
    }
    ft.save(&dir.path().join("finetune.ckpt")).unwrap();
    cfg.stages = vec![Stage::Merge];
    let out = run_config(&cfg).unwrap();
    let idx = MetricIndex::new(&read_metrics(&out.metrics).unwrap());
    assert_eq!(idx.get("degenerate", ALL_TASKS), Some(1.0));
    for m in MergeMethod::ALL {
        assert_eq!(
            idx.get(&format!("merged_equals_inputs:{m}"), ALL_TASKS),
            Some(1.0),
            "{m}"
        );
    }
    let merged = Checkpoint::load(&dir.path().join("merge.ckpt")).unwrap();
    assert!(merged.params("average/").unwrap().bit_eq(&pre));
    assert!(fs::read_to_string(&out.summary).unwrap().contains("Degenerate case"));
}

fn perturbed(p: &ParamSet, rng: &mut ChaCha8Rng, scale: f64) -> ParamSet {
    let mut out = p.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v += scale * rng.random_range(-1.0..1.0);
        }
    }
    out
}

#[test]
fn bias_metric_is_the_distillation_loss() {
    let u = gen_tasks_sized(2, 3, 16, 40).unwrap();
    let enc = mergelab::pipeline::encoder_config(&tiny(Path::new("unused")), &u);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let merged = init_params(&enc, 1).unwrap();
    let models: Vec<ParamSet> = (0..2).map(|_| perturbed(&merged, &mut rng, 0.2)).collect();
    let inputs: Vec<Vec<Vec<u8>>> = u
        .tasks
        .iter()
        .map(|t| t.test.samples().iter().map(|s| s.tokens.clone()).collect())
        .collect();
    let teachers: Vec<_> = models
        .iter()
        .zip(&inputs)
        .map(|(m, x)| features(&enc, m, x).unwrap())
        .collect();
    for spec in [
        InterventionSpec::full(Pattern::P5, 2).with_slice(2, 6).shifted(),
        InterventionSpec::full(Pattern::P4, 1),
        InterventionSpec::surgery(3),
    ] {
        let mut iv = InterventionSet::init(&spec, 2, enc.dim, enc.num_blocks, 5).unwrap();
        for p in &mut iv.tasks {
            *p = perturbed(p, &mut rng, 0.1);
        }
        iv.reorthonormalize().unwrap();
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &merged, false);
        let ivars: Vec<_> = iv
            .tasks
            .iter()
            .map(|p| {
                Some(mergelab_core::interventions::InterventionVars::register(
                    &mut tape, &spec, p, false,
                ))
            })
            .collect();
        let (_, per_task) = distill_loss(&mut tape, &enc, &vars, &ivars, &inputs, &teachers).unwrap();
        for t in 0..2 {
            let bias = bias_metric(&enc, &merged, Some(&iv), &models[t], t, &inputs[t]).unwrap();
            assert!(
                (bias - per_task[t]).abs() < 1e-12,
                "{spec:?} task {t}: {bias} vs {}",
                per_task[t]
            );
            assert_eq!(
                bias_metric(&enc, &models[t], None, &models[t], t, &inputs[t]).unwrap(),
                0.0
            );
        }
    }
}
