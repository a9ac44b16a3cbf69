//! Line-oriented `key = value` experiment configs with dotted section paths.
//!
//! ```text
//! version = 1
//! experiment.id = desk
//! intervention.pattern = p4   # comments run to end of line
//! ```
//!
//! Missing keys take the desk defaults (except `version`, which is
//! required). Unknown keys and out-of-range values are errors; every
//! message starts with the offending key path.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mergelab_core::interventions::{BlockSet, InterventionSpec, Pattern, TokenSelector};
use mergelab_core::merging::{MergeMethod, DEFAULT_TIES_TRIM};
use mergelab_core::training::TrainConfig;

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Gen,
    Pretrain,
    Finetune,
    Merge,
    Intervene,
    Eval,
    Stitch,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Gen,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Merge,
        Stage::Intervene,
        Stage::Eval,
        Stage::Stitch,
        Stage::Report,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Gen => "gen",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Merge => "merge",
            Stage::Intervene => "intervene",
            Stage::Eval => "eval",
            Stage::Stitch => "stitch",
            Stage::Report => "report",
        })
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// Repair module family compared in the report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Ours,
    Surgery,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ours => "ours",
            Variant::Surgery => "surgery",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ours" => Ok(Variant::Ours),
            "surgery" => Ok(Variant::Surgery),
            _ => Err(format!("unknown variant `{s}` (expected ours or surgery)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderShape {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeSettings {
    /// Merge the interventions are trained on (and the stitch probe uses).
    pub method: MergeMethod,
    /// λ for task arithmetic / TIES, or the AdaMerging initial value.
    /// `None` takes the method's default.
    pub lambda: Option<f64>,
    pub ties_trim: f64,
    /// Merges evaluated in the report.
    pub report_methods: Vec<MergeMethod>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub version: u32,
    pub id: String,
    pub seed: u64,
    pub out: PathBuf,
    pub stages: Vec<Stage>,
    pub tasks: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub encoder: EncoderShape,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub merge: MergeSettings,
    pub adamerging: TrainConfig,
    pub intervention: InterventionSpec,
    pub surgery_rank: usize,
    pub train: TrainConfig,
    pub data_fraction: f64,
    pub variants: Vec<Variant>,
    /// Slice widths for the part-size sweep (empty disables it).
    pub part_sizes: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sup = TrainConfig {
            iterations: 300,
            batch_size: 32,
            ..TrainConfig::default()
        };
        Self {
            version: CONFIG_VERSION,
            id: "desk".into(),
            seed: 0,
            out: PathBuf::from("runs/desk"),
            stages: Stage::ALL.to_vec(),
            tasks: 4,
            train_per_task: 512,
            test_per_task: 256,
            encoder: EncoderShape {
                blocks: 4,
                dim: 32,
                heads: 4,
                mlp_ratio: 4.0,
            },
            pretrain: sup.clone(),
            finetune: TrainConfig { iterations: 200, ..sup },
            merge: MergeSettings {
                method: MergeMethod::TaskArithmetic,
                lambda: None,
                ties_trim: DEFAULT_TIES_TRIM,
                report_methods: MergeMethod::ALL.to_vec(),
            },
            adamerging: TrainConfig {
                iterations: 100,
                ..TrainConfig::default()
            },
            intervention: InterventionSpec::full(Pattern::P4, 1),
            surgery_rank: 16,
            train: TrainConfig::default(),
            data_fraction: 1.0,
            variants: vec![Variant::Ours, Variant::Surgery],
            part_sizes: vec![16, 8],
        }
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn train_pairs(prefix: &str, t: &TrainConfig, with_lambdas: bool) -> Vec<(String, String)> {
    let mut v = vec![
        (format!("{prefix}.iterations"), t.iterations.to_string()),
        (format!("{prefix}.batch_size"), t.batch_size.to_string()),
        (format!("{prefix}.learning_rate"), t.learning_rate.to_string()),
        (format!("{prefix}.beta1"), t.beta1.to_string()),
        (format!("{prefix}.beta2"), t.beta2.to_string()),
        (format!("{prefix}.eps"), t.eps.to_string()),
    ];
    if with_lambdas {
        v.push((format!("{prefix}.learn_lambdas"), t.learn_lambdas.to_string()));
    }
    v
}

impl ExperimentConfig {
    /// Every key with its current value, in file order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let iv = &self.intervention;
        let mut v: Vec<(String, String)> = vec![
            ("version".into(), self.version.to_string()),
            ("experiment.id".into(), self.id.clone()),
            ("experiment.seed".into(), self.seed.to_string()),
            ("experiment.out".into(), self.out.display().to_string()),
            ("experiment.stages".into(), join(&self.stages)),
            ("tasks.count".into(), self.tasks.to_string()),
            ("tasks.train".into(), self.train_per_task.to_string()),
            ("tasks.test".into(), self.test_per_task.to_string()),
            ("encoder.blocks".into(), self.encoder.blocks.to_string()),
            ("encoder.dim".into(), self.encoder.dim.to_string()),
            ("encoder.heads".into(), self.encoder.heads.to_string()),
            ("encoder.mlp_ratio".into(), self.encoder.mlp_ratio.to_string()),
        ];
        v.extend(train_pairs("pretrain", &self.pretrain, false));
        v.extend(train_pairs("finetune", &self.finetune, false));
        v.push(("merge.method".into(), self.merge.method.to_string()));
        v.push((
            "merge.lambda".into(),
            self.merge.lambda.map_or("default".into(), |l| l.to_string()),
        ));
        v.push(("merge.ties_trim".into(), self.merge.ties_trim.to_string()));
        v.push(("merge.report_methods".into(), join(&self.merge.report_methods)));
        v.extend(train_pairs("adamerging", &self.adamerging, false));
        v.push(("intervention.pattern".into(), iv.pattern.to_string()));
        v.push(("intervention.rank".into(), iv.rank.to_string()));
        v.push((
            "intervention.slice".into(),
            iv.slice.map_or("full".into(), |(j, p)| format!("{j}:{p}")),
        ));
        v.push(("intervention.shift".into(), iv.shift_per_block.to_string()));
        v.push(("intervention.tokens".into(), iv.tokens.to_string()));
        v.push((
            "intervention.blocks".into(),
            match &iv.blocks {
                BlockSet::All => "all".into(),
                BlockSet::Only(s) => {
                    if s.is_empty() {
                        "none".into()
                    } else {
                        join(&s.iter().collect::<Vec<_>>())
                    }
                }
            },
        ));
        v.push(("surgery.rank".into(), self.surgery_rank.to_string()));
        v.extend(train_pairs("train", &self.train, true));
        v.push(("data.fraction".into(), self.data_fraction.to_string()));
        v.push(("report.variants".into(), join(&self.variants)));
        v.push(("report.part_sizes".into(), join(&self.part_sizes)));
        v
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut errors = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected `key = value`", i + 1));
                continue;
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if map.insert(k.clone(), v).is_some() {
                errors.push(format!("{k}: duplicate key (line {})", i + 1));
            }
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        Self::from_map(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn from_map(mut map: BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut p = Fields {
            map: &mut map,
            errors: Vec::new(),
        };
        match p.take("version") {
            None => p.errors.push("version: required field missing".into()),
            Some(v) => match v.parse::<u32>() {
                Ok(CONFIG_VERSION) => cfg.version = CONFIG_VERSION,
                _ => p
                    .errors
                    .push(format!("version: unsupported value `{v}` (expected {CONFIG_VERSION})")),
            },
        }
        p.string("experiment.id", &mut cfg.id);
        p.parsed("experiment.seed", &mut cfg.seed);
        if let Some(v) = p.take("experiment.out") {
            cfg.out = PathBuf::from(v);
        }
        p.list("experiment.stages", &mut cfg.stages);
        p.parsed("tasks.count", &mut cfg.tasks);
        p.parsed("tasks.train", &mut cfg.train_per_task);
        p.parsed("tasks.test", &mut cfg.test_per_task);
        p.parsed("encoder.blocks", &mut cfg.encoder.blocks);
        p.parsed("encoder.dim", &mut cfg.encoder.dim);
        p.parsed("encoder.heads", &mut cfg.encoder.heads);
        p.parsed("encoder.mlp_ratio", &mut cfg.encoder.mlp_ratio);
        p.train("pretrain", &mut cfg.pretrain, false);
        p.train("finetune", &mut cfg.finetune, false);
        if let Some(v) = p.take("merge.method") {
            match v.parse::<MergeMethod>() {
                Ok(m) => cfg.merge.method = m,
                Err(e) => p.errors.push(format!("merge.method: {e}")),
            }
        }
        if let Some(v) = p.take("merge.lambda") {
            if v == "default" {
                cfg.merge.lambda = None;
            } else {
                match v.parse::<f64>() {
                    Ok(l) => cfg.merge.lambda = Some(l),
                    Err(_) => p
                        .errors
                        .push(format!("merge.lambda: `{v}` is not a number or `default`")),
                }
            }
        }
        p.parsed("merge.ties_trim", &mut cfg.merge.ties_trim);
        if let Some(v) = p.take("merge.report_methods") {
            let parsed: std::result::Result<Vec<MergeMethod>, _> = v
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse())
                .collect();
            match parsed {
                Ok(m) => cfg.merge.report_methods = m,
                Err(e) => p.errors.push(format!("merge.report_methods: {e}")),
            }
        }
        p.train("adamerging", &mut cfg.adamerging, false);
        if let Some(v) = p.take("intervention.pattern") {
            match v.parse::<Pattern>() {
                Ok(pat) => cfg.intervention.pattern = pat,
                Err(e) => p.errors.push(format!("intervention.pattern: {e}")),
            }
        }
        p.parsed("intervention.rank", &mut cfg.intervention.rank);
        if let Some(v) = p.take("intervention.slice") {
            if v == "full" {
                cfg.intervention.slice = None;
            } else {
                match v.split_once(':').map(|(a, b)| (a.trim().parse(), b.trim().parse())) {
                    Some((Ok(j), Ok(e))) => cfg.intervention.slice = Some((j, e)),
                    _ => p
                        .errors
                        .push(format!("intervention.slice: `{v}` is not `full` or `start:end`")),
                }
            }
        }
        p.parsed("intervention.shift", &mut cfg.intervention.shift_per_block);
        if let Some(v) = p.take("intervention.tokens") {
            match v.parse::<TokenSelector>() {
                Ok(t) => cfg.intervention.tokens = t,
                Err(e) => p.errors.push(format!("intervention.tokens: {e}")),
            }
        }
        if let Some(v) = p.take("intervention.blocks") {
            if v == "all" {
                cfg.intervention.blocks = BlockSet::All;
            } else if v == "none" {
                cfg.intervention.blocks = BlockSet::only([]);
            } else {
                match v
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                {
                    Ok(b) => cfg.intervention.blocks = BlockSet::only(b),
                    Err(_) => p.errors.push(format!(
                        "intervention.blocks: `{v}` is not `all`, `none` or a list of block numbers"
                    )),
                }
            }
        }
        p.parsed("surgery.rank", &mut cfg.surgery_rank);
        p.train("train", &mut cfg.train, true);
        p.parsed("data.fraction", &mut cfg.data_fraction);
        p.list("report.variants", &mut cfg.variants);
        p.list("report.part_sizes", &mut cfg.part_sizes);
        let mut errors = p.errors;
        errors.extend(map.keys().map(|k| format!("{k}: unknown key")));
        if let Err(Error::Config(e)) = cfg.validate() {
            errors.extend(e);
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Range and consistency checks, all errors at once.
    pub fn validate(&self) -> Result<()> {
        let mut e: Vec<String> = Vec::new();
        let enc = &self.encoder;
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            e.push("experiment.id: must be a nonempty [A-Za-z0-9_-] identifier".into());
        }
        if self.stages.is_empty() {
            e.push("experiment.stages: at least one stage required".into());
        }
        if self.tasks < 2 {
            e.push(format!("tasks.count: {} < 2", self.tasks));
        }
        if self.tasks > 40 {
            e.push(format!(
                "tasks.count: {} exceeds the 255-token vocabulary budget",
                self.tasks
            ));
        }
        if self.train_per_task == 0 {
            e.push("tasks.train: must be at least 1".into());
        }
        if self.test_per_task == 0 {
            e.push("tasks.test: must be at least 1".into());
        }
        if enc.blocks == 0 {
            e.push("encoder.blocks: must be at least 1".into());
        }
        if enc.dim < 2 {
            e.push(format!("encoder.dim: {} < 2", enc.dim));
        }
        if enc.heads == 0 || enc.dim % enc.heads.max(1) != 0 {
            e.push(format!(
                "encoder.heads: {} does not divide encoder.dim {}",
                enc.heads, enc.dim
            ));
        }
        if !(enc.mlp_ratio > 0.0 && enc.mlp_ratio.is_finite()) {
            e.push(format!("encoder.mlp_ratio: {} must be positive", enc.mlp_ratio));
        }
        for (name, t) in [
            ("pretrain", &self.pretrain),
            ("finetune", &self.finetune),
            ("adamerging", &self.adamerging),
            ("train", &self.train),
        ] {
            if t.iterations == 0 {
                e.push(format!("{name}.iterations: must be at least 1"));
            }
            if t.batch_size == 0 {
                e.push(format!("{name}.batch_size: must be at least 1"));
            }
            if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
                e.push(format!("{name}.learning_rate: {} must be positive", t.learning_rate));
            }
            if !(0.0..1.0).contains(&t.beta1) {
                e.push(format!("{name}.beta1: {} outside [0, 1)", t.beta1));
            }
            if !(0.0..1.0).contains(&t.beta2) {
                e.push(format!("{name}.beta2: {} outside [0, 1)", t.beta2));
            }
            if !(t.eps > 0.0) {
                e.push(format!("{name}.eps: {} must be positive", t.eps));
            }
        }
        if let Some(l) = self.merge.lambda {
            if !l.is_finite() {
                e.push("merge.lambda: must be finite".into());
            }
        }
        if !(self.merge.ties_trim > 0.0 && self.merge.ties_trim <= 1.0) {
            e.push(format!("merge.ties_trim: {} outside (0, 1]", self.merge.ties_trim));
        }
        let iv = &self.intervention;
        if iv.pattern == Pattern::Surgery {
            e.push("intervention.pattern: surgery is configured through surgery.rank".into());
        }
        if iv.rank == 0 {
            e.push("intervention.rank: must be at least 1".into());
        }
        match iv.slice {
            Some((j, p)) if !(j < p && p <= enc.dim) => {
                e.push(format!(
                    "intervention.slice: [{j}:{p}) invalid for encoder.dim {}",
                    enc.dim
                ));
                if iv.rank > enc.dim {
                    e.push(format!(
                        "intervention.rank: {} exceeds encoder.dim {}",
                        iv.rank, enc.dim
                    ));
                }
            }
            _ => {
                if iv.rank > iv.width(enc.dim) {
                    e.push(format!(
                        "intervention.rank: {} exceeds the slice width {}",
                        iv.rank,
                        iv.width(enc.dim)
                    ));
                }
            }
        }
        if let BlockSet::Only(s) = &iv.blocks {
            for &b in s {
                if b == 0 || b > enc.blocks {
                    e.push(format!("intervention.blocks: block {b} outside 1..={}", enc.blocks));
                }
            }
        }
        if self.surgery_rank == 0 || self.surgery_rank > enc.dim {
            e.push(format!("surgery.rank: {} outside 1..={}", self.surgery_rank, enc.dim));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            e.push(format!("data.fraction: {} outside (0, 1]", self.data_fraction));
        }
        for &w in &self.part_sizes {
            if w < iv.rank || w > enc.dim {
                e.push(format!(
                    "report.part_sizes: width {w} outside intervention.rank..=encoder.dim ({}..={})",
                    iv.rank, enc.dim
                ));
            }
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e))
        }
    }
}

struct Fields<'a> {
    map: &'a mut BTreeMap<String, String>,
    errors: Vec<String>,
}

impl Fields<'_> {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn string(&mut self, key: &str, slot: &mut String) {
        if let Some(v) = self.take(key) {
            *slot = v;
        }
    }

    fn parsed<T: FromStr>(&mut self, key: &str, slot: &mut T) {
        if let Some(v) = self.take(key) {
            match v.parse() {
                Ok(x) => *slot = x,
                Err(_) => self.errors.push(format!("{key}: cannot parse `{v}`")),
            }
        }
    }

    fn list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>)
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.take(key) {
            let parsed: std::result::Result<Vec<T>, String> = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e: T::Err| format!("`{s}`: {e}")))
                .collect();
            match parsed {
                Ok(x) => *slot = x,
                Err(e) => self.errors.push(format!("{key}: {e}")),
            }
        }
    }

    fn train(&mut self, prefix: &str, t: &mut TrainConfig, with_lambdas: bool) {
        self.parsed(&format!("{prefix}.iterations"), &mut t.iterations);
        self.parsed(&format!("{prefix}.batch_size"), &mut t.batch_size);
        self.parsed(&format!("{prefix}.learning_rate"), &mut t.learning_rate);
        self.parsed(&format!("{prefix}.beta1"), &mut t.beta1);
        self.parsed(&format!("{prefix}.beta2"), &mut t.beta2);
        self.parsed(&format!("{prefix}.eps"), &mut t.eps);
        if with_lambdas {
            self.parsed(&format!("{prefix}.learn_lambdas"), &mut t.learn_lambdas);
        }
    }
}
