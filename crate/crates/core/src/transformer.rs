//! ViT-style encoder over small token grids.
//!
//! A sample is a sequence of `seq_len − 1` token ids. Position 0 of the
//! encoded sequence is a learned CLS vector, the rest are token embeddings;
//! positional embeddings are added to all positions. Each block computes
//!
//! ```text
//! z  = MHSA(LN1(h))
//! h' = h + Φ(z)          (Φ = identity without an intervention)
//! out = h' + MLP(LN2(h'))
//! ```
//!
//! and the final CLS row goes through a last layer norm before the task head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::interventions::{BoundIntervention, InterventionSpec, InterventionVars};
use crate::params::{ParamSet, ParamVars};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Sequence length including the CLS position.
    pub seq_len: usize,
    pub vocab: usize,
    /// Classes of each task head.
    pub num_classes: Vec<usize>,
}

impl EncoderConfig {
    /// Desk-scale default: 4 blocks, width 32, 4 heads, 4×4 grid + CLS.
    pub fn desk(vocab: usize, num_classes: Vec<usize>) -> Self {
        Self {
            num_blocks: 4,
            dim: 32,
            heads: 4,
            mlp_ratio: 4.0,
            seq_len: 17,
            vocab,
            num_classes,
        }
    }

    /// ViT-B/32 proportions with eight tasks. Only used for counting.
    pub fn paper_vitb32() -> Self {
        Self {
            num_blocks: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4.0,
            seq_len: 50,
            vocab: 0,
            num_classes: vec![0; 8],
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.num_classes.len()
    }

    pub fn hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return contract_err("encoder needs at least one block");
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return contract_err(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            ));
        }
        if self.dim < 2 {
            return contract_err("dim must be at least 2 for layer norm");
        }
        if self.seq_len < 2 {
            return contract_err("sequence needs CLS plus at least one token");
        }
        if !(self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return contract_err(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio));
        }
        if self.num_classes.iter().any(|&c| c < 2) {
            return contract_err("every task head needs at least two classes");
        }
        Ok(())
    }

    /// Exact scalar count of [`init_params`]' output.
    pub fn param_count(&self) -> usize {
        let (k, h) = (self.dim, self.hidden());
        let embed = self.vocab * k + self.seq_len * k + k;
        let block = 4 * k + (3 * k * k + 2 * k) + (k * k + k) + (k * h + h) + (h * k + k);
        let heads: usize = self.num_classes.iter().map(|c| k * c + c).sum();
        embed + self.num_blocks * block + 2 * k + heads
    }
}

/// Parameter group used for layer-wise merge coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerGroup {
    Embedding,
    Block(usize),
    Head(usize),
}

impl LayerGroup {
    /// Group of a parameter name. The final layer norm belongs to the last block.
    pub fn of(name: &str, num_blocks: usize) -> Result<LayerGroup> {
        let num = |rest: &str| -> Option<usize> { rest.split('.').next()?.parse().ok() };
        if name.starts_with("embed.") {
            Ok(LayerGroup::Embedding)
        } else if name.starts_with("final_ln.") {
            Ok(LayerGroup::Block(num_blocks))
        } else if let Some(b) = name.strip_prefix("block").and_then(num) {
            Ok(LayerGroup::Block(b))
        } else if let Some(t) = name.strip_prefix("head").and_then(num) {
            Ok(LayerGroup::Head(t))
        } else {
            contract_err(format!("parameter `{name}` belongs to no layer group"))
        }
    }

    /// Row-major position in `[embedding, block 1..N, head 0..T)`.
    pub fn index(self, num_blocks: usize) -> usize {
        match self {
            LayerGroup::Embedding => 0,
            LayerGroup::Block(b) => b,
            LayerGroup::Head(t) => num_blocks + 1 + t,
        }
    }

    pub fn count(num_blocks: usize, num_tasks: usize) -> usize {
        1 + num_blocks + num_tasks
    }
}

pub fn head_prefix(task: usize) -> String {
    format!("head{task}.")
}

/// Random initialization with the schema shared by every model.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, hid) = (cfg.dim, cfg.hidden());
    let mut gauss = |shape: &[usize], std: f64| -> Tensor {
        let n = Normal::new(0.0, std).expect("positive std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| n.sample(&mut rng))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    };
    let mut p = ParamSet::new();
    p.insert("embed.tok", gauss(&[cfg.vocab, k], 0.5));
    p.insert("embed.pos", gauss(&[cfg.seq_len, k], 0.5));
    p.insert("embed.cls", gauss(&[1, k], 0.5));
    let wstd = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    for b in 1..=cfg.num_blocks {
        let pre = format!("block{b}.");
        p.insert(format!("{pre}ln1.g"), Tensor::full(&[k], 1.0));
        p.insert(format!("{pre}ln1.b"), Tensor::zeros(&[k]));
        p.insert(format!("{pre}attn.wq"), gauss(&[k, k], wstd(k)));
        p.insert(format!("{pre}attn.bq"), Tensor::zeros(&[k]));
        p.insert(format!("{pre}attn.wk"), gauss(&[k, k], wstd(k)));
        p.insert(format!("{pre}attn.wv"), gauss(&[k, k], wstd(k)));
        p.insert(format!("{pre}attn.bv"), Tensor::zeros(&[k]));
        p.insert(format!("{pre}attn.wo"), gauss(&[k, k], wstd(k)));
        p.insert(format!("{pre}attn.bo"), Tensor::zeros(&[k]));
        p.insert(format!("{pre}ln2.g"), Tensor::full(&[k], 1.0));
        p.insert(format!("{pre}ln2.b"), Tensor::zeros(&[k]));
        p.insert(format!("{pre}mlp.w1"), gauss(&[k, hid], wstd(k)));
        p.insert(format!("{pre}mlp.b1"), Tensor::zeros(&[hid]));
        p.insert(format!("{pre}mlp.w2"), gauss(&[hid, k], wstd(hid)));
        p.insert(format!("{pre}mlp.b2"), Tensor::zeros(&[k]));
    }
    p.insert("final_ln.g", Tensor::full(&[k], 1.0));
    p.insert("final_ln.b", Tensor::zeros(&[k]));
    for (t, &c) in cfg.num_classes.iter().enumerate() {
        p.insert(format!("{}w", head_prefix(t)), gauss(&[k, c], wstd(k)));
        p.insert(format!("{}b", head_prefix(t)), Tensor::zeros(&[c]));
    }
    Ok(p)
}

/// Token + position + CLS embedding of a batch, `[batch·seq × k]`.
pub fn embed<B: AsRef<[u8]>>(tape: &mut Tape, cfg: &EncoderConfig, vars: &ParamVars, batch: &[B]) -> Result<Var> {
    if batch.is_empty() {
        return contract_err("empty batch");
    }
    let mut ids = Vec::with_capacity(batch.len() * cfg.seq_len);
    for sample in batch {
        let tokens = sample.as_ref();
        if tokens.len() + 1 != cfg.seq_len {
            return dim_err(format!(
                "{} tokens plus CLS do not match positional length {}",
                tokens.len(),
                cfg.seq_len
            ));
        }
        ids.push(0);
        for &tok in tokens {
            if tok as usize >= cfg.vocab {
                return dim_err(format!("token {tok} outside vocabulary of {}", cfg.vocab));
            }
            ids.push(tok as usize + 1);
        }
    }
    let table = tape.concat_rows(vars.get("embed.cls")?, vars.get("embed.tok")?)?;
    let x = tape.gather_rows(table, &ids)?;
    tape.add_tiled(x, vars.get("embed.pos")?)
}

/// One block on `[batch·seq × k]` hidden states.
pub fn block_forward(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    vars: &ParamVars,
    block: usize,
    h: Var,
    batch: usize,
    intervention: Option<BoundIntervention<'_, '_>>,
) -> Result<Var> {
    if let Some(iv) = &intervention {
        if iv.block != block {
            return contract_err(format!(
                "intervention bound to block {} passed to block {block}",
                iv.block
            ));
        }
    }
    let p = |n: &str| vars.get(&format!("block{block}.{n}"));
    let x = tape.layer_norm(h, p("ln1.g")?, p("ln1.b")?, LN_EPS)?;
    let q = tape.matmul(x, p("attn.wq")?)?;
    let q = tape.add_bias(q, p("attn.bq")?)?;
    let k = tape.matmul(x, p("attn.wk")?)?;
    let v = tape.matmul(x, p("attn.wv")?)?;
    let v = tape.add_bias(v, p("attn.bv")?)?;
    let a = tape.attention(q, k, v, batch, cfg.heads)?;
    let z = tape.matmul(a, p("attn.wo")?)?;
    let mut z = tape.add_bias(z, p("attn.bo")?)?;
    if let Some(iv) = intervention {
        z = iv.apply(tape, z, block, batch)?;
    }
    let h1 = tape.add(h, z)?;
    let x = tape.layer_norm(h1, p("ln2.g")?, p("ln2.b")?, LN_EPS)?;
    let m = tape.matmul(x, p("mlp.w1")?)?;
    let m = tape.add_bias(m, p("mlp.b1")?)?;
    let m = tape.gelu(m);
    let m = tape.matmul(m, p("mlp.w2")?)?;
    let m = tape.add_bias(m, p("mlp.b2")?)?;
    tape.add(h1, m)
}

/// Final CLS representations `[batch × k]`, blocks `1..=split` taken from
/// `front` and the rest from `back`.
///
/// Embeddings go with block 1 and the final layer norm with block N: `front`
/// owns the embeddings unless `split == 0`, `back` owns the final layer norm
/// unless `split == N`. So both endpoints are pure models. The intervention only acts on `front` blocks; a
/// post-encoder Surgery adapter applies only when `front` owns the whole
/// encoder.
fn encode_split<B: AsRef<[u8]>>(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    front: &ParamVars,
    back: &ParamVars,
    split: usize,
    batch: &[B],
    intervention: Option<&InterventionVars<'_>>,
) -> Result<Var> {
    let n = batch.len();
    let embed_owner = if split == 0 { back } else { front };
    let mut h = embed(tape, cfg, embed_owner, batch)?;
    for b in 1..=cfg.num_blocks {
        let (vars, iv) = if b <= split {
            (front, intervention.and_then(|iv| iv.bind(b)))
        } else {
            (back, None)
        };
        h = block_forward(tape, cfg, vars, b, h, n, iv)?;
    }
    let cls: Vec<usize> = (0..n).map(|i| i * cfg.seq_len).collect();
    let h = tape.gather_rows(h, &cls)?;
    let owner = if split == cfg.num_blocks { front } else { back };
    let mut out = tape.layer_norm(h, owner.get("final_ln.g")?, owner.get("final_ln.b")?, LN_EPS)?;
    if let Some(iv) = intervention {
        if iv.spec.is_surgery() && split == cfg.num_blocks {
            out = iv.apply_final(tape, out)?;
        }
    }
    Ok(out)
}

/// Final (post-LN, post-Surgery) CLS representations, `[batch × k]`.
pub fn encode<B: AsRef<[u8]>>(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    vars: &ParamVars,
    batch: &[B],
    intervention: Option<&InterventionVars<'_>>,
) -> Result<Var> {
    encode_split(tape, cfg, vars, vars, cfg.num_blocks, batch, intervention)
}

/// Stitched encoder, see [`encode_split`].
pub fn encode_stitched<B: AsRef<[u8]>>(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    front: &ParamVars,
    back: &ParamVars,
    split: usize,
    batch: &[B],
    intervention: Option<&InterventionVars<'_>>,
) -> Result<Var> {
    if split > cfg.num_blocks {
        return contract_err(format!("split {split} outside 0..={}", cfg.num_blocks));
    }
    encode_split(tape, cfg, front, back, split, batch, intervention)
}

/// Logits of task head `task` on `[batch × k]` representations.
pub fn head_logits(tape: &mut Tape, cfg: &EncoderConfig, vars: &ParamVars, repr: Var, task: usize) -> Result<Var> {
    check_task(cfg, task)?;
    let p = head_prefix(task);
    let l = tape.matmul(repr, vars.get(&format!("{p}w"))?)?;
    tape.add_bias(l, vars.get(&format!("{p}b"))?)
}

fn check_task(cfg: &EncoderConfig, task: usize) -> Result<()> {
    if task >= cfg.num_tasks() {
        return contract_err(format!("task {task} outside 0..{}", cfg.num_tasks()));
    }
    Ok(())
}

/// An intervention family together with one task's module parameters.
pub type TaskIntervention<'a> = (&'a InterventionSpec, &'a ParamSet);

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Forward-only final representations, `[batch × k]`.
pub fn represent<B: AsRef<[u8]>>(
    cfg: &EncoderConfig,
    params: &ParamSet,
    batch: &[B],
    intervention: Option<TaskIntervention<'_>>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false);
    let iv = intervention.map(|(spec, p)| InterventionVars::register(&mut tape, spec, p, false));
    let out = encode(&mut tape, cfg, &vars, batch, iv.as_ref())?;
    Ok(tape.value(out).clone())
}

fn to_predictions(logits: &Tensor) -> Vec<Prediction> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            Prediction {
                class: argmax(row),
                probs: e.iter().map(|v| v / s).collect(),
            }
        })
        .collect()
}

/// Forward-only logits of task `task`, `[batch × c_t]`.
pub fn logits<B: AsRef<[u8]>>(
    cfg: &EncoderConfig,
    params: &ParamSet,
    batch: &[B],
    task: usize,
    intervention: Option<TaskIntervention<'_>>,
) -> Result<Tensor> {
    check_task(cfg, task)?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false);
    let iv = intervention.map(|(spec, p)| InterventionVars::register(&mut tape, spec, p, false));
    let repr = encode(&mut tape, cfg, &vars, batch, iv.as_ref())?;
    let out = head_logits(&mut tape, cfg, &vars, repr, task)?;
    Ok(tape.value(out).clone())
}

pub fn predict<B: AsRef<[u8]>>(
    cfg: &EncoderConfig,
    params: &ParamSet,
    batch: &[B],
    task: usize,
    intervention: Option<TaskIntervention<'_>>,
) -> Result<Vec<Prediction>> {
    Ok(to_predictions(&logits(cfg, params, batch, task, intervention)?))
}

/// Predictions of the stitched network: `front` blocks `1..=split`, `back`
/// blocks after it, head `task` from `back`.
pub fn stitch_predict<B: AsRef<[u8]>>(
    cfg: &EncoderConfig,
    front: &ParamSet,
    back: &ParamSet,
    split: usize,
    batch: &[B],
    task: usize,
    front_intervention: Option<TaskIntervention<'_>>,
) -> Result<Vec<Prediction>> {
    check_task(cfg, task)?;
    front
        .ensure_same_schema(back, "stitch_forward")
        .map_err(|e| Error::Contract(e.to_string()))?;
    let mut tape = Tape::new();
    let fv = ParamVars::register(&mut tape, front, false);
    let bv = ParamVars::register(&mut tape, back, false);
    let iv = front_intervention.map(|(spec, p)| InterventionVars::register(&mut tape, spec, p, false));
    let repr = encode_stitched(&mut tape, cfg, &fv, &bv, split, batch, iv.as_ref())?;
    let out = head_logits(&mut tape, cfg, &bv, repr, task)?;
    Ok(to_predictions(tape.value(out)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interventions::{init_module_params, InterventionSet, Pattern, TokenSelector};
    use rand::Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            num_blocks: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            seq_len: 5,
            vocab: 6,
            num_classes: vec![3, 2],
        }
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize, cfg: &EncoderConfig) -> Vec<Vec<u8>> {
        (0..n)
            .map(|_| {
                (0..cfg.seq_len - 1)
                    .map(|_| rng.random_range(0..cfg.vocab as u8))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn param_count_matches_schema() {
        let cfg = tiny_cfg();
        assert_eq!(init_params(&cfg, 0).unwrap().numel(), cfg.param_count());
        let desk = EncoderConfig::desk(10, vec![4; 4]);
        assert_eq!(init_params(&desk, 0).unwrap().numel(), desk.param_count());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.seq_len = 1;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.num_blocks = 0;
        assert!(c.validate().is_err());
        assert!(EncoderConfig::paper_vitb32().dim % EncoderConfig::paper_vitb32().heads == 0);
    }

    #[test]
    fn layer_groups() {
        assert_eq!(LayerGroup::of("embed.tok", 4).unwrap(), LayerGroup::Embedding);
        assert_eq!(LayerGroup::of("block3.attn.wq", 4).unwrap(), LayerGroup::Block(3));
        assert_eq!(LayerGroup::of("final_ln.g", 4).unwrap(), LayerGroup::Block(4));
        assert_eq!(LayerGroup::of("head1.w", 4).unwrap(), LayerGroup::Head(1));
        assert!(LayerGroup::of("mystery", 4).is_err());
        assert_eq!(LayerGroup::Head(1).index(4), 6);
        assert_eq!(LayerGroup::count(4, 2), 7);
    }

    #[test]
    fn sequence_length_mismatch() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 1).unwrap();
        let bad = vec![vec![0u8; 3]];
        assert!(matches!(represent(&cfg, &p, &bad, None), Err(Error::Dimension(_))));
        let oov = vec![vec![0u8, 1, 2, 9]];
        assert!(matches!(represent(&cfg, &p, &oov, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn invalid_task_is_rejected() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 1).unwrap();
        let x = vec![vec![0u8; 4]];
        assert!(matches!(predict(&cfg, &p, &x, 2, None), Err(Error::Contract(_))));
    }

    #[test]
    fn predictions_are_normalized_and_deterministic() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = batch(&mut rng, 6, &cfg);
        let a = predict(&cfg, &p, &x, 0, None).unwrap();
        let b = predict(&cfg, &p, &x, 0, None).unwrap();
        assert_eq!(a, b);
        for pr in &a {
            assert!((pr.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(pr.class, argmax(&pr.probs));
        }
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn batching_does_not_change_results() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = batch(&mut rng, 4, &cfg);
        let all = represent(&cfg, &p, &x, None).unwrap();
        for (i, s) in x.iter().enumerate() {
            let one = represent(&cfg, &p, std::slice::from_ref(s), None).unwrap();
            assert!(one.data().iter().zip(all.row(i)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_interventions_leave_logits_bit_identical() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = batch(&mut rng, 8, &cfg);
        let base = logits(&cfg, &p, &x, 1, None).unwrap();
        for pattern in [Pattern::P1, Pattern::P3, Pattern::P4, Pattern::P5] {
            for tokens in TokenSelector::ALL {
                let spec = InterventionSpec::full(pattern, 2).with_tokens(tokens);
                let ip = init_module_params(&spec, cfg.dim, cfg.num_blocks, 8).unwrap();
                let with = logits(&cfg, &p, &x, 1, Some((&spec, &ip))).unwrap();
                assert_eq!(with.max_abs_diff(&base), 0.0, "{pattern} {tokens}");
            }
        }
    }

    #[test]
    fn cls_intervention_is_token_local() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = batch(&mut rng, 3, &cfg);
        let spec = InterventionSpec::full(Pattern::P4, 2).with_slice(2, 6);
        let mut set = InterventionSet::init(&spec, 1, cfg.dim, cfg.num_blocks, 0).unwrap();
        for (_, t) in set.tasks[0].iter_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }

        let run = |with: bool| {
            let mut tape = Tape::new();
            let vars = ParamVars::register(&mut tape, &p, false);
            let iv = InterventionVars::register(&mut tape, &spec, &set.tasks[0], false);
            let h = embed(&mut tape, &cfg, &vars, &x).unwrap();
            let bound = if with { iv.bind(1) } else { None };
            let out = block_forward(&mut tape, &cfg, &vars, 1, h, x.len(), bound).unwrap();
            tape.value(out).clone()
        };
        let (base, edited) = (run(false), run(true));
        for r in 0..x.len() * cfg.seq_len {
            let same = base.row(r) == edited.row(r);
            assert_eq!(same, r % cfg.seq_len != 0, "row {r}");
        }
    }

    #[test]
    fn mismatched_block_binding_is_rejected() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 11).unwrap();
        let spec = InterventionSpec::full(Pattern::P4, 1);
        let ip = init_module_params(&spec, cfg.dim, cfg.num_blocks, 0).unwrap();
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &p, false);
        let iv = InterventionVars::register(&mut tape, &spec, &ip, false);
        let h = embed(&mut tape, &cfg, &vars, &[vec![1u8, 2, 3, 4]]).unwrap();
        let r = block_forward(&mut tape, &cfg, &vars, 2, h, 1, iv.bind(1));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn stitch_endpoints() {
        let cfg = tiny_cfg();
        let front = init_params(&cfg, 12).unwrap();
        let back = init_params(&cfg, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = batch(&mut rng, 5, &cfg);
        let pure_back = predict(&cfg, &back, &x, 0, None).unwrap();
        // front encoder everywhere, back head.
        let mut front_with_back_head = front.clone();
        front_with_back_head.overlay(&back.filter_prefix("head"));
        let pure_front = predict(&cfg, &front_with_back_head, &x, 0, None).unwrap();

        let b0 = stitch_predict(&cfg, &front, &back, 0, &x, 0, None).unwrap();
        let bn = stitch_predict(&cfg, &front, &back, cfg.num_blocks, &x, 0, None).unwrap();
        assert_eq!(bn, pure_front);
        assert_eq!(b0, pure_back);
        let mid = stitch_predict(&cfg, &front, &back, 1, &x, 0, None).unwrap();
        assert_ne!(mid, pure_back);
        assert!(stitch_predict(&cfg, &front, &back, 3, &x, 0, None).is_err());
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let cfg = tiny_cfg();
        let mut p = init_params(&cfg, 15).unwrap();
        *p.get_mut("embed.pos").unwrap() = Tensor::zeros(&[cfg.seq_len, cfg.dim]);
        let x = vec![vec![0u8, 1, 2, 3]];
        let y = vec![vec![3u8, 1, 0, 2]];
        let a = represent(&cfg, &p, &x, None).unwrap();
        let b = represent(&cfg, &p, &y, None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    /// Straight-line single block (N=1) on one sample, written without the
    /// tape, as a hand-evaluation oracle.
    fn naive_encode(cfg: &EncoderConfig, p: &ParamSet, tokens: &[u8]) -> Vec<f64> {
        let k = cfg.dim;
        let g = |n: &str| p.get(n).unwrap().data().to_vec();
        let ln = |x: &[f64], gam: &[f64], bet: &[f64]| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / k as f64;
            let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / k as f64;
            (0..k)
                .map(|i| (x[i] - m) / (v + LN_EPS).sqrt() * gam[i] + bet[i])
                .collect()
        };
        let mv = |x: &[f64], w: &[f64], cols: usize| -> Vec<f64> {
            (0..cols)
                .map(|c| (0..x.len()).map(|r| x[r] * w[r * cols + c]).sum())
                .collect()
        };
        let add = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
        let (tok, pos, cls) = (g("embed.tok"), g("embed.pos"), g("embed.cls"));
        let mut h: Vec<Vec<f64>> = vec![add(&cls, &pos[..k])];
        for (i, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            h.push(add(&tok[t * k..(t + 1) * k], &pos[(i + 1) * k..(i + 2) * k]));
        }
        let s = h.len();
        let x: Vec<Vec<f64>> = h
            .iter()
            .map(|r| ln(r, &g("block1.ln1.g"), &g("block1.ln1.b")))
            .collect();
        let q: Vec<Vec<f64>> = x
            .iter()
            .map(|r| add(&mv(r, &g("block1.attn.wq"), k), &g("block1.attn.bq")))
            .collect();
        let kk: Vec<Vec<f64>> = x.iter().map(|r| mv(r, &g("block1.attn.wk"), k)).collect();
        let v: Vec<Vec<f64>> = x
            .iter()
            .map(|r| add(&mv(r, &g("block1.attn.wv"), k), &g("block1.attn.bv")))
            .collect();
        let dh = k / cfg.heads;
        let mut att = vec![vec![0.0; k]; s];
        for head in 0..cfg.heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..s {
                let sc: Vec<f64> = (0..s)
                    .map(|j| cols.clone().map(|c| q[i][c] * kk[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = sc.iter().map(|a| (a - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    att[i][c] = (0..s).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        let cls_row = 0;
        let z = add(&mv(&att[cls_row], &g("block1.attn.wo"), k), &g("block1.attn.bo"));
        let h1 = add(&h[cls_row], &z);
        let x2 = ln(&h1, &g("block1.ln2.g"), &g("block1.ln2.b"));
        let hid = cfg.hidden();
        let m: Vec<f64> = add(&mv(&x2, &g("block1.mlp.w1"), hid), &g("block1.mlp.b1"))
            .into_iter()
            .map(|u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u * u * u)).tanh()))
            .collect();
        let out = add(&h1, &add(&mv(&m, &g("block1.mlp.w2"), k), &g("block1.mlp.b2")));
        ln(&out, &g("final_ln.g"), &g("final_ln.b"))
    }

    #[test]
    fn single_block_matches_hand_evaluation() {
        let cfg = EncoderConfig {
            num_blocks: 1,
            dim: 4,
            heads: 2,
            mlp_ratio: 2.0,
            seq_len: 3,
            vocab: 5,
            num_classes: vec![2],
        };
        let mut p = init_params(&cfg, 16).unwrap();
        // Non-trivial affine and bias values so every term is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (name, t) in p.iter_mut() {
            if name.contains(".b") || name.ends_with(".g") {
                for v in t.data_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
        }
        for tokens in [[1u8, 3], [4, 0], [2, 2]] {
            let got = represent(&cfg, &p, &[tokens], None).unwrap();
            let want = naive_encode(&cfg, &p, &tokens);
            let diff = got
                .data()
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "{tokens:?}: {diff:e}");
        }
    }
}
