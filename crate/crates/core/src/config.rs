//! Run configuration: line-oriented `key = value` text.
//!
//! `#` starts a comment, blank lines are ignored, and dotted keys name
//! sections (`backbone.depth = 4`). Every key has a default except
//! `command`. Unknown keys, malformed values and violated invariants are
//! parse errors carrying the offending line.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::AttentionKind;
use crate::bench::BenchConfig;
use crate::error::{Result, VcaError};
use crate::vca::{StageKind, StreamSource};
use crate::vit::BackboneConfig;

/// File the effective configuration is echoed to inside `output_dir`.
pub const ECHO_FILE: &str = "config.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Command {
    Train,
    Bench,
    Gradcheck,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Bench => "bench",
            Command::Gradcheck => "gradcheck",
        }
    }
}

impl FromStr for Command {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Command::Train),
            "bench" => Ok(Command::Bench),
            "gradcheck" => Ok(Command::Gradcheck),
            _ => Err(format!("expected train, bench or gradcheck, got {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

impl FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "idx" => Ok(DatasetKind::Idx),
            _ => Err(format!("expected synthetic or idx, got {s:?}")),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Idx => "idx",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Synthetic generator seed, independent of the run seed.
    pub seed: u64,
    pub classes: usize,
    pub samples: usize,
    pub noise_std: f64,
    pub images_path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    /// Trailing samples kept out of training and scored separately.
    pub held_out: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            seed: 0,
            classes: 10,
            samples: 2000,
            noise_std: crate::data::SYNTHETIC_NOISE_STD,
            images_path: None,
            labels_path: None,
            held_out: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            weight_decay: 0.05,
            steps: 2000,
            batch: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    /// Steps between training-accuracy evaluations (logged in `train_acc`).
    pub eval_every: usize,
    /// Stop once an evaluation reaches this training accuracy.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            eval_every: 50,
            target_accuracy: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradTarget {
    Mhsa,
    Diff,
    Vca,
    /// One pre-norm transformer block with VCA attention.
    Block,
}

impl GradTarget {
    pub const ALL: [GradTarget; 4] = [GradTarget::Mhsa, GradTarget::Diff, GradTarget::Vca, GradTarget::Block];

    pub fn as_str(self) -> &'static str {
        match self {
            GradTarget::Mhsa => "mhsa",
            GradTarget::Diff => "diff",
            GradTarget::Vca => "vca",
            GradTarget::Block => "block",
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradTarget {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        GradTarget::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("expected mhsa, diff, vca or block, got {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub targets: Vec<GradTarget>,
    /// Token grid `(H, W)`.
    pub grid: (usize, usize),
    /// Contrast grid `(h, w)`.
    pub pool: (usize, usize),
    pub width: usize,
    pub heads: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            targets: GradTarget::ALL.to_vec(),
            grid: (4, 4),
            pool: (2, 2),
            width: 8,
            heads: 2,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub dataset: DatasetConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainOptions,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        RunConfig {
            command,
            seed: 0,
            output_dir: PathBuf::from("out"),
            backbone: BackboneConfig::default(),
            dataset: DatasetConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainOptions::default(),
            bench: BenchConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }

    /// Canonical text of every key, in a fixed order. Parsing it gives back
    /// an equal config.
    pub fn to_text(&self) -> String {
        let b = &self.backbone;
        let d = &self.dataset;
        let o = &self.optimizer;
        let g = &self.gradcheck;
        let list = |items: Vec<String>| items.join(",");
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let lines: Vec<(&str, String)> = vec![
            ("command", self.command.as_str().into()),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            (
                "backbone.image_size",
                format!("{}x{}x{}", b.image_size.0, b.image_size.1, b.image_size.2),
            ),
            ("backbone.patch_size", b.patch_size.to_string()),
            ("backbone.depth", b.depth.to_string()),
            ("backbone.width", b.width.to_string()),
            ("backbone.heads", b.heads.to_string()),
            ("backbone.mlp_ratio", fmt_f64(b.mlp_ratio)),
            ("backbone.attention_kind", b.attention_kind.to_string()),
            ("backbone.num_classes", b.num_classes.to_string()),
            ("backbone.bias", b.bias.to_string()),
            ("backbone.lambda_init", fmt_f64(b.lambda_init)),
            ("backbone.lambda_depth_schedule", b.lambda_depth_schedule.to_string()),
            (
                "backbone.pool",
                b.pool.map_or("auto".into(), |(h, w)| format!("{h}x{w}")),
            ),
            ("backbone.vca.stage1", b.vca_flags.stage1.to_string()),
            ("backbone.vca.stage2", b.vca_flags.stage2.to_string()),
            ("backbone.vca.pos_stream", b.vca_flags.pos_stream.to_string()),
            ("backbone.vca.neg_stream", b.vca_flags.neg_stream.to_string()),
            ("dataset.kind", d.kind.to_string()),
            ("dataset.seed", d.seed.to_string()),
            ("dataset.classes", d.classes.to_string()),
            ("dataset.samples", d.samples.to_string()),
            ("dataset.noise_std", fmt_f64(d.noise_std)),
            ("dataset.images_path", path(&d.images_path)),
            ("dataset.labels_path", path(&d.labels_path)),
            ("dataset.held_out", d.held_out.to_string()),
            ("optimizer.lr", fmt_f64(o.lr)),
            ("optimizer.weight_decay", fmt_f64(o.weight_decay)),
            ("optimizer.steps", o.steps.to_string()),
            ("optimizer.batch", o.batch.to_string()),
            ("train.eval_every", self.train.eval_every.to_string()),
            (
                "train.target_accuracy",
                self.train.target_accuracy.map_or("none".into(), fmt_f64),
            ),
            (
                "bench.kinds",
                list(self.bench.kinds.iter().map(|k| k.to_string()).collect()),
            ),
            (
                "bench.sweep",
                list(self.bench.sweep.iter().map(|n| n.to_string()).collect()),
            ),
            ("bench.n", self.bench.contrast.to_string()),
            ("bench.C", self.bench.width.to_string()),
            ("bench.M", self.bench.heads.to_string()),
            ("bench.repeats", self.bench.repeats.to_string()),
            (
                "gradcheck.targets",
                list(g.targets.iter().map(|t| t.to_string()).collect()),
            ),
            ("gradcheck.grid", format!("{}x{}", g.grid.0, g.grid.1)),
            ("gradcheck.pool", format!("{}x{}", g.pool.0, g.pool.1)),
            ("gradcheck.width", g.width.to_string()),
            ("gradcheck.heads", g.heads.to_string()),
            ("gradcheck.step", fmt_f64(g.step)),
            ("gradcheck.tolerance", fmt_f64(g.tolerance)),
        ];
        lines
            .into_iter()
            .map(|(k, v)| {
                if v.is_empty() {
                    format!("{k} =\n")
                } else {
                    format!("{k} = {v}\n")
                }
            })
            .collect()
    }

    /// Writes [`RunConfig::to_text`] to `output_dir/config.txt`, creating the
    /// directory.
    pub fn write_echo(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir)?;
        let path = self.output_dir.join(ECHO_FILE);
        fs::write(&path, self.to_text())?;
        Ok(path)
    }
}

/// Shortest text that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut command = None;
    let mut cfg = RunConfig::new(Command::Train);
    let mut seen: HashMap<String, usize> = HashMap::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| VcaError::Parse {
            line,
            msg: format!("expected `key = value`, got {content:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if let Some(prev) = seen.insert(key.to_owned(), line) {
            return Err(VcaError::Parse {
                line,
                msg: format!("{key} already set on line {prev}"),
            });
        }
        let err = |msg: String| VcaError::Parse {
            line,
            msg: format!("{key}: {msg}"),
        };
        if key == "command" {
            command = Some(value.parse::<Command>().map_err(err)?);
            continue;
        }
        set_key(&mut cfg, key, value).map_err(err)?;
    }

    cfg.command = command.ok_or_else(|| VcaError::Parse {
        line: 0,
        msg: "command missing".into(),
    })?;
    check_sections(&cfg, &seen)?;
    Ok(cfg)
}

type FieldResult = std::result::Result<(), String>;

fn parse_val<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("invalid value {value:?}: {e}"))
}

fn positive(value: &str) -> std::result::Result<usize, String> {
    match parse_val::<usize>(value)? {
        0 => Err("must be positive, got 0".into()),
        v => Ok(v),
    }
}

fn positive_f64(value: &str) -> std::result::Result<f64, String> {
    let v: f64 = parse_val(value)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a positive finite number, got {value}"))
    }
}

fn non_negative_f64(value: &str) -> std::result::Result<f64, String> {
    let v: f64 = parse_val(value)?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a finite number >= 0, got {value}"))
    }
}

/// `AxB` or `AxBxC` with positive parts.
fn dims(value: &str, count: usize) -> std::result::Result<Vec<usize>, String> {
    let parts: Vec<&str> = value.split('x').map(str::trim).collect();
    if parts.len() != count {
        let example = if count == 2 { "4x4" } else { "16x16x1" };
        return Err(format!("expected {count} sizes like {example}, got {value:?}"));
    }
    parts.into_iter().map(positive).collect()
}

fn list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    let items = value
        .split(',')
        .map(|s| parse_val::<T>(s.trim()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if items.is_empty() {
        return Err("list must not be empty".into());
    }
    Ok(items)
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> FieldResult {
    let b = &mut cfg.backbone;
    let d = &mut cfg.dataset;
    let o = &mut cfg.optimizer;
    let g = &mut cfg.gradcheck;
    match key {
        "seed" => cfg.seed = parse_val(value)?,
        "output_dir" => {
            if value.is_empty() {
                return Err("must not be empty".into());
            }
            cfg.output_dir = PathBuf::from(value)
        }
        "backbone.image_size" => {
            let v = dims(value, 3)?;
            b.image_size = (v[0], v[1], v[2]);
        }
        "backbone.patch_size" => b.patch_size = positive(value)?,
        "backbone.depth" => b.depth = positive(value)?,
        "backbone.width" => b.width = positive(value)?,
        "backbone.heads" => b.heads = positive(value)?,
        "backbone.mlp_ratio" => b.mlp_ratio = positive_f64(value)?,
        "backbone.attention_kind" => b.attention_kind = parse_val::<AttentionKind>(value)?,
        "backbone.num_classes" => b.num_classes = parse_val(value)?,
        "backbone.bias" => b.bias = parse_val(value)?,
        "backbone.lambda_init" => b.lambda_init = parse_val(value)?,
        "backbone.lambda_depth_schedule" => b.lambda_depth_schedule = parse_val(value)?,
        "backbone.pool" => {
            b.pool = match value {
                "auto" => None,
                _ => {
                    let v = dims(value, 2)?;
                    Some((v[0], v[1]))
                }
            }
        }
        "backbone.vca.stage1" => b.vca_flags.stage1 = parse_val::<StageKind>(value)?,
        "backbone.vca.stage2" => b.vca_flags.stage2 = parse_val::<StageKind>(value)?,
        "backbone.vca.pos_stream" => b.vca_flags.pos_stream = parse_val::<StreamSource>(value)?,
        "backbone.vca.neg_stream" => b.vca_flags.neg_stream = parse_val::<StreamSource>(value)?,
        "dataset.kind" => d.kind = parse_val(value)?,
        "dataset.seed" => d.seed = parse_val(value)?,
        "dataset.classes" => d.classes = parse_val(value)?,
        "dataset.samples" => d.samples = positive(value)?,
        "dataset.noise_std" => d.noise_std = non_negative_f64(value)?,
        "dataset.images_path" => d.images_path = opt_path(value),
        "dataset.labels_path" => d.labels_path = opt_path(value),
        "dataset.held_out" => d.held_out = parse_val(value)?,
        "optimizer.lr" => o.lr = non_negative_f64(value)?,
        "optimizer.weight_decay" => o.weight_decay = non_negative_f64(value)?,
        "optimizer.steps" => o.steps = parse_val(value)?,
        "optimizer.batch" => o.batch = positive(value)?,
        "train.eval_every" => cfg.train.eval_every = positive(value)?,
        "train.target_accuracy" => {
            cfg.train.target_accuracy = match value {
                "none" => None,
                _ => Some(positive_f64(value)?),
            }
        }
        "bench.kinds" => cfg.bench.kinds = list(value)?,
        "bench.sweep" => cfg.bench.sweep = list(value)?,
        "bench.n" => cfg.bench.contrast = positive(value)?,
        "bench.C" => cfg.bench.width = positive(value)?,
        "bench.M" => cfg.bench.heads = positive(value)?,
        "bench.repeats" => cfg.bench.repeats = parse_val(value)?,
        "gradcheck.targets" => g.targets = list(value)?,
        "gradcheck.grid" => {
            let v = dims(value, 2)?;
            g.grid = (v[0], v[1]);
        }
        "gradcheck.pool" => {
            let v = dims(value, 2)?;
            g.pool = (v[0], v[1]);
        }
        "gradcheck.width" => g.width = positive(value)?,
        "gradcheck.heads" => g.heads = positive(value)?,
        "gradcheck.step" => g.step = positive_f64(value)?,
        "gradcheck.tolerance" => g.tolerance = positive_f64(value)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

/// Cross-field invariants. A failure is reported on the last line that set
/// a key of the offending section (line 0 when the section was untouched).
fn check_sections(cfg: &RunConfig, seen: &HashMap<String, usize>) -> Result<()> {
    let last_line = |prefix: &str| {
        seen.iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, &l)| l)
            .max()
            .unwrap_or(0)
    };
    let wrap = |prefix: &str, r: Result<()>| {
        r.map_err(|e| VcaError::Parse {
            line: last_line(prefix),
            msg: format!("{}: {}", prefix.trim_end_matches('.'), e),
        })
    };
    wrap("backbone.", cfg.backbone.validate())?;
    let d = &cfg.dataset;
    wrap("dataset.", {
        if d.kind == DatasetKind::Idx && (d.images_path.is_none() || d.labels_path.is_none()) {
            Err(VcaError::config("idx datasets need images_path and labels_path"))
        } else if d.kind == DatasetKind::Synthetic && d.classes < 2 {
            Err(VcaError::config("synthetic datasets need at least 2 classes"))
        } else if d.kind == DatasetKind::Synthetic && d.held_out >= d.samples {
            Err(VcaError::config("held_out must leave training samples"))
        } else {
            Ok(())
        }
    })?;
    if cfg.command == Command::Bench {
        wrap("bench.", cfg.bench.validate())?;
    }
    let g = &cfg.gradcheck;
    wrap("gradcheck.", {
        if !g.grid.0.is_multiple_of(g.pool.0) || !g.grid.1.is_multiple_of(g.pool.1) {
            Err(VcaError::config(format!(
                "pool {}x{} does not divide grid {}x{}",
                g.pool.0, g.pool.1, g.grid.0, g.grid.1
            )))
        } else if !g.width.is_multiple_of(g.heads) || !(g.width / g.heads).is_multiple_of(2) {
            Err(VcaError::config(
                "gradcheck width must split into heads of even dimension",
            ))
        } else {
            Ok(())
        }
    })
}
