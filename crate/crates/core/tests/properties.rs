mod common;

use common::{jitter, rng, toy_cfg};
use mergelab_core::interventions::{
    count_extra_params, init_module_params, mini_intervention, orthonormality_error, pattern_apply, reorthonormalize,
    reorthonormalize_params, InterventionSpec, Module, Pattern,
};
use mergelab_core::merging::{adamerging_apply, task_arithmetic, task_vector, ties_merge, weight_average, Lambda};
use mergelab_core::training::subset_data;
use mergelab_core::transformer::{init_params, LayerGroup};
use mergelab_core::{ParamSet, Tensor};
use proptest::prelude::*;

fn ps(values: &[f64]) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::vector(values.to_vec()));
    p
}

fn vals(p: &ParamSet) -> Vec<f64> {
    p.get("x").unwrap().data().to_vec()
}

/// TIES written out the slow way: rank by magnitude, keep the top
/// `round(0.2 n)` (at least one), elect the sign of the trimmed sum (ties go
/// positive) and average the agreeing survivors.
fn ties_oracle(pre: &[f64], models: &[Vec<f64>], lambda: f64, fraction: f64) -> Vec<f64> {
    let n = pre.len();
    let keep = ((fraction * n as f64).round() as usize).max(1).min(n);
    let trimmed: Vec<Vec<f64>> = models
        .iter()
        .map(|m| {
            let tau: Vec<f64> = m.iter().zip(pre).map(|(a, b)| a - b).collect();
            (0..n)
                .map(|i| {
                    let rank = (0..n)
                        .filter(|&j| tau[j].abs() > tau[i].abs() || (tau[j].abs() == tau[i].abs() && j < i))
                        .count();
                    if rank < keep {
                        tau[i]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    (0..n)
        .map(|c| {
            let total: f64 = trimmed.iter().map(|t| t[c]).sum();
            let agree: Vec<f64> = trimmed
                .iter()
                .map(|t| t[c])
                .filter(|&v| if total >= 0.0 { v > 0.0 } else { v < 0.0 })
                .collect();
            let m = if agree.is_empty() {
                0.0
            } else {
                agree.iter().sum::<f64>() / agree.len() as f64
            };
            pre[c] + lambda * m
        })
        .collect()
}

/// Coarse grid so that magnitude and sign ties actually happen.
fn grid() -> impl Strategy<Value = f64> {
    (-6i32..=6).prop_map(|v| f64::from(v) * 0.25)
}

/// Randomly perturbed module parameters, `R` kept orthonormal.
fn perturbed_modules(spec: &InterventionSpec, dim: usize, blocks: usize, seed: u64) -> ParamSet {
    let mut p = jitter(
        &init_module_params(spec, dim, blocks, seed).unwrap(),
        &mut rng(seed),
        0.3,
    );
    reorthonormalize_params(&mut p).unwrap();
    p
}

fn models_with(pre: &ParamSet, seeds: &[u64], scale: f64) -> Vec<ParamSet> {
    seeds.iter().map(|&s| jitter(pre, &mut rng(s), scale)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ties_matches_brute_force(
        pre in prop::collection::vec(grid(), 10),
        models in prop::collection::vec(prop::collection::vec(grid(), 10), 1..5),
        lambda in prop::sample::select(vec![0.3, 1.0, 1.7]),
        fraction in prop::sample::select(vec![0.2, 0.1, 0.5, 1.0]),
    ) {
        let tvs: Vec<_> = models.iter().map(|m| task_vector(&ps(m), &ps(&pre)).unwrap()).collect();
        let got = vals(&ties_merge(&ps(&pre), &tvs, lambda, fraction).unwrap());
        prop_assert_eq!(got, ties_oracle(&pre, &models, lambda, fraction));
    }

    #[test]
    fn one_task_vector_at_unit_lambda_is_exact(
        pre in prop::collection::vec(-1e3f64..1e3, 1..40),
        delta in prop::collection::vec(-1e3f64..1e3, 40),
        exps in prop::collection::vec(-30i32..10, 40),
    ) {
        let model: Vec<f64> = pre
            .iter()
            .zip(delta.iter().zip(&exps))
            .map(|(p, (d, &e))| p + d * 2f64.powi(e))
            .collect();
        let tv = task_vector(&ps(&model), &ps(&pre)).unwrap();
        let out = task_arithmetic(&ps(&pre), &[tv], 1.0).unwrap();
        prop_assert!(out.bit_eq(&ps(&model)));
    }

    #[test]
    fn task_arithmetic_is_the_scaled_sum(
        pre in prop::collection::vec(-1.0f64..1.0, 6),
        models in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 1..5),
        lambda in -2.0f64..2.0,
    ) {
        let tvs: Vec<_> = models.iter().map(|m| task_vector(&ps(m), &ps(&pre)).unwrap()).collect();
        let got = vals(&task_arithmetic(&ps(&pre), &tvs, lambda).unwrap());
        for (i, g) in got.iter().enumerate() {
            let want = pre[i] + lambda * models.iter().map(|m| m[i] - pre[i]).sum::<f64>();
            prop_assert!((g - want).abs() < 1e-12, "coordinate {i}: {g} vs {want}");
        }
    }

    #[test]
    fn averaging_identical_models_is_exact(
        values in prop::collection::vec(-1e6f64..1e6, 1..30),
        copies in 1usize..9,
    ) {
        let m = ps(&values);
        prop_assert!(weight_average(&vec![m.clone(); copies]).unwrap().bit_eq(&m));
    }

    #[test]
    fn averaging_is_the_mean(
        models in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 5), 1..6),
    ) {
        let sets: Vec<ParamSet> = models.iter().map(|m| ps(m)).collect();
        let got = vals(&weight_average(&sets).unwrap());
        for (i, g) in got.iter().enumerate() {
            let want = models.iter().map(|m| m[i]).sum::<f64>() / models.len() as f64;
            prop_assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn subset_rules(
        sizes in prop::collection::vec(1usize..300, 1..5),
        fraction in 0.001f64..=1.0,
        seed in any::<u64>(),
    ) {
        let picked = subset_data(&sizes, fraction, seed).unwrap();
        prop_assert_eq!(&picked, &subset_data(&sizes, fraction, seed).unwrap());
        for (idx, &n) in picked.iter().zip(&sizes) {
            let want = ((fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n);
            prop_assert_eq!(idx.len(), want);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(idx.iter().all(|&i| i < n));
        }
        let all = subset_data(&sizes, 1.0, seed).unwrap();
        for (idx, &n) in all.iter().zip(&sizes) {
            prop_assert_eq!(idx, &(0..n).collect::<Vec<_>>());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adamerging_is_linear_in_lambda(
        seed in any::<u64>(),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        lam in prop::collection::vec(-1.0f64..1.0, 2 * 5),
        mu in prop::collection::vec(-1.0f64..1.0, 2 * 5),
    ) {
        let cfg = toy_cfg(2, 4, 2);
        let pre = init_params(&cfg, seed).unwrap();
        let models = models_with(&pre, &[seed ^ 1, seed ^ 2], 0.1);
        let tvs: Vec<_> = models.iter().map(|m| task_vector(m, &pre).unwrap()).collect();
        let layers = LayerGroup::count(cfg.num_blocks, 2);
        let shape = |v: &[f64]| Lambda::PerTaskLayer(v.chunks(layers).map(<[f64]>::to_vec).collect());
        let (l1, l2) = (shape(&lam), shape(&mu));
        let mix = l1.with_flat(
            &l1.flat().iter().zip(l2.flat()).map(|(x, y)| a * x + b * y).collect::<Vec<_>>(),
        ).unwrap();
        let off = |l: &Lambda| {
            let m = adamerging_apply(&pre, &tvs, l, cfg.num_blocks).unwrap();
            m.zip_with(&pre, |x, p| x - p).unwrap()
        };
        let (d1, d2, dm) = (off(&l1), off(&l2), off(&mix));
        let want = d1.zip_with(&d2, |x, y| a * x + b * y).unwrap();
        prop_assert!(dm.max_abs_diff(&want).unwrap() < 1e-12);

        let flat = Lambda::PerTask(vec![a, a]);
        let ta = task_arithmetic(&pre, &tvs, a).unwrap();
        let ada = adamerging_apply(&pre, &tvs, &flat, cfg.num_blocks).unwrap();
        prop_assert!(ada.max_abs_diff(&ta).unwrap() < 1e-12);
    }

    #[test]
    fn slice_edits_stay_inside_the_slice(
        pattern in prop::sample::select(Pattern::ALL_BLOCK_PATTERNS.to_vec()),
        dim in 4usize..12,
        cut in (0usize..100, 1usize..100),
        rank in 1usize..4,
        block in 1usize..4,
        seed in any::<u64>(),
        shifted in any::<bool>(),
    ) {
        let j = cut.0 % (dim - 1);
        let p = j + 1 + cut.1 % (dim - j);
        let rank = 1 + (rank - 1) % (p - j);
        let mut spec = InterventionSpec::full(pattern, rank).with_slice(j, p);
        if shifted {
            spec = spec.shifted();
        }
        let params = perturbed_modules(&spec, dim, 3, seed);
        let mut r = rng(seed ^ 7);
        let z = common::random_tensor(&mut r, &[dim], 1.0);
        let out = mini_intervention(&z, &spec, block, &Module::of_block(&params, block)).unwrap();
        let (s, e) = spec.slice_for_block(block, dim).unwrap();
        prop_assert!(e <= dim && e - s == p - j);
        for i in (0..s).chain(e..dim) {
            prop_assert_eq!(out.data()[i].to_bits(), z.data()[i].to_bits());
        }
        let fixed = InterventionSpec::full(pattern, rank).with_slice(j, p);
        prop_assert_eq!(count_extra_params(&spec, 3, 3, dim), count_extra_params(&fixed, 3, 3, dim));
    }

    #[test]
    fn full_slice_mini_equals_the_pattern(
        pattern in prop::sample::select(Pattern::ALL_BLOCK_PATTERNS.to_vec()),
        dim in 2usize..10,
        rank in 1usize..3,
        seed in any::<u64>(),
    ) {
        prop_assume!(rank <= dim);
        let spec = InterventionSpec::full(pattern, rank);
        let params = perturbed_modules(&spec, dim, 2, seed);
        let z = common::random_tensor(&mut rng(seed ^ 3), &[dim], 1.0);
        let module = Module::of_block(&params, 2);
        let mini = mini_intervention(&z, &spec, 2, &module).unwrap();
        let full = pattern_apply(&z, pattern, &module).unwrap();
        prop_assert_eq!(mini.data(), full.data());
    }

    #[test]
    fn reorthonormalized_columns_are_orthonormal(
        n in 1usize..20,
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        prop_assume!(k <= n);
        let r = common::random_tensor(&mut rng(seed), &[n, k], 1.0);
        let q = reorthonormalize(&r).unwrap();
        prop_assert!(orthonormality_error(&q) < 1e-8);
        let again = reorthonormalize(&q).unwrap();
        let drift = q.data().iter().zip(again.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(drift < 1e-12);
    }
}
