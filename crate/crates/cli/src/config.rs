//! Experiment configuration files.
//!
//! One `key = value` pair per line, keys in dotted `section.field` form.
//! Blank lines and lines starting with `#` are ignored, every key may appear
//! at most once, and unknown keys are rejected with the offending line.
//! Lists are comma separated. Relative paths resolve against the directory
//! holding the config file.
//!
//! ```text
//! out = runs/lit
//! dataset.kind = texture
//! teacher.blocks = 3,3,3
//! student.blocks = 1,1,1
//! train.variant = lit
//! train.beta = 0.75
//! ```
//!
//! The `train` block starts from `train.preset` (`desk`, `full` or
//! `generator`), optionally rescaled by `train.scale`; every other `train.*`
//! key overrides one field of that preset.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use blockdistill::losses::Penalty;
use blockdistill::netgraph::NetworkSpec;
use blockdistill::trainer::{PruneScope, TrainConfig, Variant};

use crate::CliError;

/// Every key the parser accepts, in echo order.
pub const KEYS: &[&str] = &[
    "out",
    "dataset.kind",
    "dataset.seed",
    "dataset.classes",
    "dataset.size",
    "dataset.train_per_class",
    "dataset.test_per_class",
    "dataset.samples",
    "dataset.test_samples",
    "dataset.val_fraction",
    "dataset.path",
    "dataset.test_path",
    "dataset.limit",
    "dataset.cache",
    "teacher.checkpoint",
    "teacher.arch",
    "teacher.blocks",
    "teacher.channels",
    "teacher.cardinality",
    "teacher.base",
    "teacher.epochs",
    "teacher.milestones",
    "teacher.seed",
    "student.arch",
    "student.blocks",
    "student.channels",
    "student.cardinality",
    "student.base",
    "train.preset",
    "train.scale",
    "train.variant",
    "train.epochs",
    "train.fine_tune_epochs",
    "train.batch_size",
    "train.lr0",
    "train.milestones",
    "train.lr_decay",
    "train.fine_tune_lr0",
    "train.fine_tune_milestones",
    "train.momentum",
    "train.weight_decay",
    "train.tau",
    "train.alpha",
    "train.beta",
    "train.penalty",
    "train.tau_sq_scaling",
    "train.hint_split",
    "train.freeze_copied",
    "train.seed",
    "sweep.param",
    "sweep.values",
    "sweep.seeds",
    "select.tau",
    "select.alpha",
    "select.beta",
    "select.small_blocks",
    "select.seeds",
    "prune.checkpoint",
    "prune.sparsity",
    "prune.scope",
    "prune.fine_tune_epochs",
    "eval.checkpoint",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// Synthetic patch-grammar classification.
    Texture,
    /// Synthetic image-to-image pairs.
    Translation,
    /// 32×32 binary image records read from disk.
    Binary,
}

impl DatasetKind {
    fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Texture => "texture",
            DatasetKind::Translation => "translation",
            DatasetKind::Binary => "binary",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "texture" => Ok(DatasetKind::Texture),
            "translation" => Ok(DatasetKind::Translation),
            "binary" => Ok(DatasetKind::Binary),
            _ => Err(format!("unknown dataset kind '{s}' (expected texture, translation or binary)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub seed: u64,
    pub classes: usize,
    pub size: usize,
    /// Texture samples per class drawn for train plus validation.
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Translation pairs drawn for train plus validation.
    pub samples: usize,
    pub test_samples: usize,
    pub val_fraction: f64,
    pub path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub limit: usize,
    /// Directory for cached dataset containers.
    pub cache: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Texture,
            seed: 1,
            classes: 10,
            size: 16,
            train_per_class: 500,
            test_per_class: 100,
            samples: 1000,
            test_samples: 200,
            val_fraction: 0.1,
            path: None,
            test_path: None,
            limit: 50_000,
            cache: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Resnet,
    Generator,
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "resnet" => Ok(Arch::Resnet),
            "generator" => Ok(Arch::Generator),
            _ => Err(format!("unknown arch '{s}' (expected resnet or generator)")),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Resnet => "resnet",
            Arch::Generator => "generator",
        })
    }
}

/// Architecture block shared by teacher and student.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub arch: Arch,
    /// Residual blocks per section; generators use the first entry.
    pub blocks: Vec<usize>,
    pub channels: Vec<usize>,
    pub cardinality: usize,
    /// Stem width of a generator.
    pub base: usize,
}

impl NetConfig {
    fn resnet(blocks: &[usize]) -> NetConfig {
        NetConfig {
            arch: Arch::Resnet,
            blocks: blocks.to_vec(),
            channels: vec![16, 32, 64],
            cardinality: 1,
            base: 8,
        }
    }

    /// Concrete spec for inputs of `input_shape`; `classes` is ignored by
    /// generators.
    pub fn spec(&self, input_shape: [usize; 3], classes: usize) -> NetworkSpec {
        match self.arch {
            Arch::Resnet => NetworkSpec::resnet(&self.blocks, &self.channels, self.cardinality, input_shape, classes),
            Arch::Generator => NetworkSpec::generator(self.blocks.first().copied().unwrap_or(0), self.base, input_shape),
        }
    }

    fn check(&self, section: &str) -> Result<(), CliError> {
        if self.blocks.is_empty() {
            return Err(CliError::Config(format!("{section}.blocks must not be empty")));
        }
        if self.arch == Arch::Resnet && self.blocks.len() != self.channels.len() {
            return Err(CliError::Config(format!(
                "{section}.blocks has {} entries but {section}.channels has {}",
                self.blocks.len(),
                self.channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    /// Load this checkpoint instead of training a teacher.
    pub checkpoint: Option<PathBuf>,
    pub net: NetConfig,
    /// Schedule overrides for a teacher trained from scratch.
    pub epochs: Option<usize>,
    pub milestones: Option<Vec<usize>>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
    Generator,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            "generator" => Ok(Preset::Generator),
            _ => Err(format!("unknown preset '{s}' (expected desk, full or generator)")),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
            Preset::Generator => "generator",
        })
    }
}

/// Hyperparameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Tau,
    Alpha,
    Beta,
    Penalty,
    Sparsity,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::Penalty => "penalty",
            SweepParam::Sparsity => "sparsity",
        }
    }

    /// Default grid when `sweep.values` is absent.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepParam::Tau => &["1", "2", "4", "6", "8"],
            SweepParam::Alpha => &["0", "0.25", "0.5", "0.75", "0.9", "0.95", "1"],
            SweepParam::Beta => &["0", "0.25", "0.5", "0.75", "1"],
            SweepParam::Penalty => &["l2", "l1", "smoothed_l1"],
            SweepParam::Sparsity => &["0", "0.25", "0.5", "0.75", "0.9"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tau" => Ok(SweepParam::Tau),
            "alpha" => Ok(SweepParam::Alpha),
            "beta" => Ok(SweepParam::Beta),
            "penalty" => Ok(SweepParam::Penalty),
            "sparsity" => Ok(SweepParam::Sparsity),
            _ => Err(format!("unknown sweep parameter '{s}' (expected tau, alpha, beta, penalty or sparsity)")),
        }
    }
}

/// One checked sweep value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SweepValue {
    Number(f64),
    Penalty(Penalty),
}

impl SweepValue {
    pub fn parse(param: SweepParam, text: &str) -> Result<SweepValue, String> {
        if param == SweepParam::Penalty {
            return text.parse::<Penalty>().map(SweepValue::Penalty).map_err(|e| e.to_string());
        }
        let v: f64 = text.parse().map_err(|_| format!("'{text}' is not a number"))?;
        let ok = match param {
            SweepParam::Tau => v > 0.0 && v.is_finite(),
            SweepParam::Alpha | SweepParam::Beta => (0.0..=1.0).contains(&v),
            SweepParam::Sparsity => (0.0..1.0).contains(&v),
            SweepParam::Penalty => unreachable!(),
        };
        if !ok {
            let range = match param {
                SweepParam::Tau => "(0, inf)",
                SweepParam::Sparsity => "[0, 1)",
                _ => "[0, 1]",
            };
            return Err(format!("{} value {v} is outside {range}", param.as_str()));
        }
        Ok(SweepValue::Number(v))
    }

    /// Sort key: numbers ascending, penalties in declaration order.
    pub fn rank(&self) -> f64 {
        match *self {
            SweepValue::Number(v) => v,
            SweepValue::Penalty(p) => Penalty::ALL.iter().position(|&q| q == p).unwrap_or(0) as f64,
        }
    }
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Number(v) => write!(f, "{v}"),
            SweepValue::Penalty(p) => write!(f, "{p}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub param: Option<SweepParam>,
    pub values: Option<Vec<String>>,
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    /// The parameter and its checked grid.
    pub fn grid(&self) -> Result<(SweepParam, Vec<SweepValue>), CliError> {
        let param = self
            .param
            .ok_or_else(|| CliError::Config("sweep.param is required for a sweep".into()))?;
        let raw = self.values.clone().unwrap_or_else(|| param.default_values());
        if raw.is_empty() {
            return Err(CliError::Config("sweep.values must not be empty".into()));
        }
        let values = raw
            .iter()
            .map(|t| SweepValue::parse(param, t).map_err(|e| CliError::Config(format!("sweep.values: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("sweep.seeds must not be empty".into()));
        }
        Ok((param, values))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectConfig {
    pub tau: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Blocks per section of the small student used to pick τ.
    pub small_blocks: Option<Vec<usize>>,
    /// Defaults to the training seed alone.
    pub seeds: Option<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneConfig {
    pub checkpoint: Option<PathBuf>,
    pub sparsity: f64,
    pub scope: PruneScope,
    pub fine_tune_epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub student: NetConfig,
    pub preset: Preset,
    pub scale: Option<f64>,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub select: SelectConfig,
    pub prune: PruneConfig,
    pub eval_checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::parse("", Path::new(".")).expect("empty config is valid")
    }
}

struct Raw<'a> {
    origin: &'a str,
    base: &'a Path,
    entries: BTreeMap<String, (usize, String)>,
}

impl Raw<'_> {
    fn err(&self, key: &str, msg: impl fmt::Display) -> CliError {
        match self.entries.get(key) {
            Some((line, _)) => CliError::Config(format!("{}:{line}: {key}: {msg}", self.origin)),
            None => CliError::Config(format!("{}: {key}: {msg}", self.origin)),
        }
    }

    fn text(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        self.text(key)
            .map(|v| v.parse::<T>().map_err(|e| self.err(key, format!("'{v}': {e}"))))
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: fmt::Display,
    {
        let Some(v) = self.text(key) else { return Ok(None) };
        if v.trim().is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| self.err(key, format!("'{}': {e}", p.trim()))))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.text(key).map(|v| self.base.join(v))
    }

    fn bool(&self, key: &str) -> Result<Option<bool>, CliError> {
        self.text(key)
            .map(|v| match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(self.err(key, format!("'{v}' is not a boolean"))),
            })
            .transpose()
    }

    fn net(&self, section: &str, default: NetConfig) -> Result<NetConfig, CliError> {
        let k = |f: &str| format!("{section}.{f}");
        let arch = self.or(&k("arch"), default.arch)?;
        let base_blocks = if arch == Arch::Generator && self.text(&k("blocks")).is_none() {
            vec![if section == "teacher" { 6 } else { 2 }]
        } else {
            default.blocks
        };
        let net = NetConfig {
            arch,
            blocks: self.list(&k("blocks"))?.unwrap_or(base_blocks),
            channels: self.list(&k("channels"))?.unwrap_or(default.channels),
            cardinality: self.or(&k("cardinality"), default.cardinality)?,
            base: self.or(&k("base"), default.base)?,
        };
        net.check(section)?;
        Ok(net)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        Self::parse_named(&text, base, &path.display().to_string())
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<ExperimentConfig, CliError> {
        Self::parse_named(text, base, "<config>")
    }

    fn parse_named(text: &str, base: &Path, origin: &str) -> Result<ExperimentConfig, CliError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!("{origin}:{n}: expected 'key = value', got '{line}'")));
            };
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(CliError::Config(format!("{origin}:{n}: unknown key '{key}'")));
            }
            if let Some((first, _)) = entries.insert(key.to_string(), (n, value.trim().to_string())) {
                return Err(CliError::Config(format!(
                    "{origin}:{n}: duplicate key '{key}' (first set on line {first})"
                )));
            }
        }
        let raw = Raw { origin, base, entries };

        let d = DatasetConfig::default();
        let dataset = DatasetConfig {
            kind: raw.or("dataset.kind", d.kind)?,
            seed: raw.or("dataset.seed", d.seed)?,
            classes: raw.or("dataset.classes", d.classes)?,
            size: raw.or("dataset.size", d.size)?,
            train_per_class: raw.or("dataset.train_per_class", d.train_per_class)?,
            test_per_class: raw.or("dataset.test_per_class", d.test_per_class)?,
            samples: raw.or("dataset.samples", d.samples)?,
            test_samples: raw.or("dataset.test_samples", d.test_samples)?,
            val_fraction: raw.or("dataset.val_fraction", d.val_fraction)?,
            path: raw.path("dataset.path"),
            test_path: raw.path("dataset.test_path"),
            limit: raw.or("dataset.limit", d.limit)?,
            cache: raw.path("dataset.cache"),
        };
        if !(0.0..1.0).contains(&dataset.val_fraction) {
            return Err(raw.err("dataset.val_fraction", "must lie in [0, 1)"));
        }
        if dataset.kind == DatasetKind::Binary && dataset.path.is_none() {
            return Err(raw.err("dataset.path", "is required for binary datasets"));
        }

        let teacher = TeacherConfig {
            checkpoint: raw.path("teacher.checkpoint"),
            net: raw.net("teacher", NetConfig::resnet(&[3, 3, 3]))?,
            epochs: raw.get("teacher.epochs")?,
            milestones: raw.list("teacher.milestones")?,
            seed: raw.or("teacher.seed", 0)?,
        };
        let student = raw.net("student", NetConfig::resnet(&[1, 1, 1]))?;

        let preset: Preset = raw.or("train.preset", Preset::Desk)?;
        let variant: Variant = raw.or("train.variant", Variant::Lit)?;
        let scale: Option<f64> = raw.get("train.scale")?;
        let mut t = match (preset, scale) {
            (Preset::Generator, Some(_)) => return Err(raw.err("train.scale", "does not apply to the generator preset")),
            (Preset::Generator, None) => TrainConfig::generator(variant),
            (_, Some(s)) if !(s > 0.0 && s.is_finite()) => return Err(raw.err("train.scale", "must be positive")),
            (_, Some(s)) => TrainConfig::scaled(variant, s),
            (Preset::Full, None) => TrainConfig::full(variant),
            (Preset::Desk, None) => TrainConfig::desk(variant),
        };
        t.epochs = raw.or("train.epochs", t.epochs)?;
        t.fine_tune_epochs = raw.or("train.fine_tune_epochs", t.fine_tune_epochs)?;
        t.batch_size = raw.or("train.batch_size", t.batch_size)?;
        t.lr0 = raw.or("train.lr0", t.lr0)?;
        t.milestones = raw.list("train.milestones")?.unwrap_or(t.milestones);
        t.lr_decay = raw.or("train.lr_decay", t.lr_decay)?;
        t.fine_tune_lr0 = raw.or("train.fine_tune_lr0", t.fine_tune_lr0)?;
        t.fine_tune_milestones = raw.list("train.fine_tune_milestones")?.unwrap_or(t.fine_tune_milestones);
        t.momentum = raw.or("train.momentum", t.momentum)?;
        t.weight_decay = raw.or("train.weight_decay", t.weight_decay)?;
        t.distill.tau = raw.or("train.tau", t.distill.tau)?;
        t.distill.alpha = raw.or("train.alpha", t.distill.alpha)?;
        t.distill.beta = raw.or("train.beta", t.distill.beta)?;
        t.distill.penalty = raw.or("train.penalty", t.distill.penalty)?;
        t.distill.tau_sq_scaling = raw.bool("train.tau_sq_scaling")?.unwrap_or(t.distill.tau_sq_scaling);
        t.hint_split = raw.or("train.hint_split", t.hint_split)?;
        t.freeze_copied = raw.bool("train.freeze_copied")?.unwrap_or(t.freeze_copied);
        t.seed = raw.or("train.seed", t.seed)?;
        t.validate().map_err(|e| CliError::Config(format!("{origin}: train: {e}")))?;

        let sweep = SweepConfig {
            param: raw.get("sweep.param")?,
            values: raw.list::<String>("sweep.values")?,
            seeds: raw.list("sweep.seeds")?.unwrap_or_else(|| vec![0, 1, 2]),
        };
        if sweep.param.is_some() {
            sweep.grid().map_err(|e| raw.err("sweep.values", e.message()))?;
        }

        let select = SelectConfig {
            tau: raw.list("select.tau")?.unwrap_or_else(|| vec![1.0, 2.0, 4.0, 6.0, 8.0]),
            alpha: raw.list("select.alpha")?.unwrap_or_else(|| vec![0.5, 0.75, 0.9, 0.95, 1.0]),
            beta: raw.list("select.beta")?.unwrap_or_else(|| vec![0.25, 0.5, 0.75, 1.0]),
            small_blocks: raw.list("select.small_blocks")?,
            seeds: raw.list("select.seeds")?,
        };
        for (key, grid, param) in [
            ("select.tau", &select.tau, SweepParam::Tau),
            ("select.alpha", &select.alpha, SweepParam::Alpha),
            ("select.beta", &select.beta, SweepParam::Beta),
        ] {
            if grid.is_empty() {
                return Err(raw.err(key, "grid must not be empty"));
            }
            for v in grid {
                SweepValue::parse(param, &v.to_string()).map_err(|e| raw.err(key, e))?;
            }
        }

        let prune = PruneConfig {
            checkpoint: raw.path("prune.checkpoint"),
            sparsity: raw.or("prune.sparsity", 0.5)?,
            scope: raw.or("prune.scope", PruneScope::PerTensor)?,
            fine_tune_epochs: raw.or("prune.fine_tune_epochs", 2)?,
        };
        if !(0.0..1.0).contains(&prune.sparsity) {
            return Err(raw.err("prune.sparsity", "must lie in [0, 1)"));
        }

        Ok(ExperimentConfig {
            out: raw.path("out").unwrap_or_else(|| base.join("out")),
            dataset,
            teacher,
            student,
            preset,
            scale,
            train: t,
            sweep,
            select,
            prune,
            eval_checkpoint: raw.path("eval.checkpoint"),
        })
    }

    /// Canonical text with every field spelled out. Parsing it again gives
    /// the same config, apart from `out` and `dataset.cache`, which are not
    /// echoed.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let path = |p: &Path| p.display().to_string();
        let d = &self.dataset;
        kv("dataset.kind", d.kind.as_str().into());
        kv("dataset.seed", d.seed.to_string());
        kv("dataset.classes", d.classes.to_string());
        kv("dataset.size", d.size.to_string());
        kv("dataset.train_per_class", d.train_per_class.to_string());
        kv("dataset.test_per_class", d.test_per_class.to_string());
        kv("dataset.samples", d.samples.to_string());
        kv("dataset.test_samples", d.test_samples.to_string());
        kv("dataset.val_fraction", d.val_fraction.to_string());
        if let Some(p) = &d.path {
            kv("dataset.path", path(p));
        }
        if let Some(p) = &d.test_path {
            kv("dataset.test_path", path(p));
        }
        kv("dataset.limit", d.limit.to_string());
        for (section, net) in [("teacher", &self.teacher.net), ("student", &self.student)] {
            if section == "teacher" {
                if let Some(p) = &self.teacher.checkpoint {
                    kv("teacher.checkpoint", path(p));
                }
            }
            kv(&format!("{section}.arch"), net.arch.to_string());
            kv(&format!("{section}.blocks"), join(&net.blocks));
            kv(&format!("{section}.channels"), join(&net.channels));
            kv(&format!("{section}.cardinality"), net.cardinality.to_string());
            kv(&format!("{section}.base"), net.base.to_string());
            if section == "teacher" {
                if let Some(e) = self.teacher.epochs {
                    kv("teacher.epochs", e.to_string());
                }
                if let Some(m) = &self.teacher.milestones {
                    kv("teacher.milestones", join(m));
                }
                kv("teacher.seed", self.teacher.seed.to_string());
            }
        }
        let t = &self.train;
        kv("train.preset", self.preset.to_string());
        if let Some(f) = self.scale {
            kv("train.scale", f.to_string());
        }
        kv("train.variant", t.variant.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.fine_tune_epochs", t.fine_tune_epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr0", t.lr0.to_string());
        kv("train.milestones", join(&t.milestones));
        kv("train.lr_decay", t.lr_decay.to_string());
        kv("train.fine_tune_lr0", t.fine_tune_lr0.to_string());
        kv("train.fine_tune_milestones", join(&t.fine_tune_milestones));
        kv("train.momentum", t.momentum.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.tau", t.distill.tau.to_string());
        kv("train.alpha", t.distill.alpha.to_string());
        kv("train.beta", t.distill.beta.to_string());
        kv("train.penalty", t.distill.penalty.to_string());
        kv("train.tau_sq_scaling", t.distill.tau_sq_scaling.to_string());
        kv("train.hint_split", t.hint_split.to_string());
        kv("train.freeze_copied", t.freeze_copied.to_string());
        kv("train.seed", t.seed.to_string());
        let floats = |v: &[f64]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let seeds = |v: &[u64]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        if let Some(p) = self.sweep.param {
            kv("sweep.param", p.as_str().into());
        }
        if let Some(v) = &self.sweep.values {
            kv("sweep.values", v.join(","));
        }
        kv("sweep.seeds", seeds(&self.sweep.seeds));
        kv("select.tau", floats(&self.select.tau));
        kv("select.alpha", floats(&self.select.alpha));
        kv("select.beta", floats(&self.select.beta));
        if let Some(b) = &self.select.small_blocks {
            kv("select.small_blocks", join(b));
        }
        if let Some(v) = &self.select.seeds {
            kv("select.seeds", seeds(v));
        }
        if let Some(p) = &self.prune.checkpoint {
            kv("prune.checkpoint", path(p));
        }
        kv("prune.sparsity", self.prune.sparsity.to_string());
        kv("prune.scope", self.prune.scope.to_string());
        kv("prune.fine_tune_epochs", self.prune.fine_tune_epochs.to_string());
        if let Some(p) = &self.eval_checkpoint {
            kv("eval.checkpoint", path(p));
        }
        s
    }

    pub fn teacher_spec(&self, input_shape: [usize; 3], classes: usize) -> NetworkSpec {
        self.teacher.net.spec(input_shape, classes)
    }

    pub fn student_spec(&self, input_shape: [usize; 3], classes: usize) -> NetworkSpec {
        self.student.spec(input_shape, classes)
    }

    /// Schedule used when the teacher is trained here rather than loaded.
    pub fn teacher_train_config(&self) -> TrainConfig {
        let mut c = match (self.preset, self.scale) {
            (Preset::Generator, _) => TrainConfig::generator(Variant::Scratch),
            (_, Some(s)) => TrainConfig::scaled(Variant::Scratch, s),
            (Preset::Full, None) => TrainConfig::full(Variant::Scratch),
            (Preset::Desk, None) => TrainConfig::desk(Variant::Scratch),
        };
        c.batch_size = self.train.batch_size;
        c.momentum = self.train.momentum;
        c.weight_decay = self.train.weight_decay;
        c.distill.penalty = self.train.distill.penalty;
        c.seed = self.teacher.seed;
        if let Some(e) = self.teacher.epochs {
            c.epochs = e;
            c.milestones.retain(|&m| m < e);
        }
        if let Some(m) = &self.teacher.milestones {
            c.milestones = m.clone();
        }
        c
    }
}
