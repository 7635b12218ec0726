//! Experiment configuration: a TOML file merged over built-in defaults,
//! plus repeatable dotted-path `--set KEY=VALUE` overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::data::{
    load_cifar_binary, load_idx, normalize_channels, synth_dataset, AugmentFlags, DataError,
    Dataset, SynthKind, CIFAR10_MEAN, CIFAR10_STD,
};
use crate::eval::SweepSpec;
use crate::rng::substream_indexed;
use crate::train::{Estimator, Phase, TrainConfig};

#[derive(Debug)]
pub enum ConfigError {
    Io(PathBuf, std::io::Error),
    /// TOML syntax error; the message carries line/column from the parser.
    Syntax(String),
    /// Field-level error with the dotted path to the offending key.
    Field { path: String, what: String },
    BadOverride { arg: String, what: String },
    Data(DataError),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(path, e) => write!(f, "cannot read config {}: {e}", path.display()),
            ConfigError::Syntax(msg) => write!(f, "config parse error: {msg}"),
            ConfigError::Field { path, what } => write!(f, "config field `{path}`: {what}"),
            ConfigError::BadOverride { arg, what } => write!(f, "bad --set '{arg}': {what}"),
            ConfigError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<DataError> for ConfigError {
    fn from(e: DataError) -> Self {
        ConfigError::Data(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    SynthBlobs,
    SynthXor,
    Cifar10,
    Idx,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory of CIFAR-10 binary batches, or the IDX train images file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// IDX test images file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    /// Synthetic train example count.
    #[serde(default = "default_count")]
    pub count: usize,
    /// Synthetic test example count.
    #[serde(default = "default_test_count")]
    pub test_count: usize,
    #[serde(default)]
    pub augment: AugmentFlags,
    /// Standardize channels with the documented CIFAR-10 constants
    /// (cifar10 source only).
    #[serde(default)]
    pub normalize: bool,
}

fn default_count() -> usize {
    2000
}
fn default_test_count() -> usize {
    1000
}

impl DataConfig {
    /// Loads (train, test) splits. Synthetic sources derive from the global
    /// seed; file sources require their paths to exist.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset), ConfigError> {
        let missing = |field: &str| ConfigError::Field {
            path: format!("data.{field}"),
            what: format!("required for source '{}'", source_name(self.source)),
        };
        if self.normalize && self.source != DataSource::Cifar10 {
            return Err(ConfigError::Field {
                path: "data.normalize".into(),
                what: "channel normalization constants are defined for the cifar10 source only".into(),
            });
        }
        match self.source {
            DataSource::SynthBlobs | DataSource::SynthXor => {
                let kind = if self.source == DataSource::SynthBlobs {
                    SynthKind::Blobs
                } else {
                    SynthKind::XorGrid
                };
                let train_seed = seed_for(seed, "data-train");
                let test_seed = seed_for(seed, "data-test");
                Ok((
                    synth_dataset(kind, self.count, train_seed),
                    synth_dataset(kind, self.test_count, test_seed),
                ))
            }
            DataSource::Cifar10 => {
                let dir = self.path.as_ref().ok_or_else(|| missing("path"))?;
                if !dir.exists() {
                    return Err(ConfigError::Field {
                        path: "data.path".into(),
                        what: format!("directory {} does not exist", dir.display()),
                    });
                }
                let (mut train, mut test) = load_cifar_binary(dir)?;
                if self.normalize {
                    normalize_channels(&mut train, &CIFAR10_MEAN, &CIFAR10_STD);
                    normalize_channels(&mut test, &CIFAR10_MEAN, &CIFAR10_STD);
                }
                Ok((train, test))
            }
            DataSource::Idx => {
                let train = self.path.as_ref().ok_or_else(|| missing("path"))?;
                let test = self.test_path.as_ref().ok_or_else(|| missing("test_path"))?;
                for (field, p) in [("path", train), ("test_path", test)] {
                    if !p.exists() {
                        return Err(ConfigError::Field {
                            path: format!("data.{field}"),
                            what: format!("file {} does not exist", p.display()),
                        });
                    }
                }
                Ok((load_idx(train)?, load_idx(test)?))
            }
        }
    }
}

fn source_name(s: DataSource) -> &'static str {
    match s {
        DataSource::SynthBlobs => "synth-blobs",
        DataSource::SynthXor => "synth-xor",
        DataSource::Cifar10 => "cifar10",
        DataSource::Idx => "idx",
    }
}

fn seed_for(seed: u64, name: &str) -> u64 {
    use rand::Rng;
    substream_indexed(seed, name, 0).random()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub datapath: TrainConfig,
    pub controller: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            datapath: TrainConfig::datapath_default(),
            controller: TrainConfig::controller_default(Estimator::Reinforce),
        }
    }
}

/// A fully-resolved experiment: architecture, data, both training phases,
/// and the sweep, under one global seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub architecture: ArchConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub sweep: SweepSpec,
}

impl ExperimentConfig {
    /// Forces derived invariants: phase tags per section and the global seed
    /// flowing into both phases.
    pub fn resolve(mut self) -> Self {
        self.train.datapath.phase = Phase::Datapath;
        self.train.controller.phase = Phase::Controller;
        self.train.datapath.seed = self.seed;
        self.train.controller.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |path: &str, what: String| ConfigError::Field { path: path.into(), what };
        self.architecture
            .validate()
            .map_err(|e| field("architecture", e.to_string()))?;
        self.train
            .datapath
            .validate()
            .map_err(|e| field("train.datapath", e.to_string()))?;
        self.train
            .controller
            .validate()
            .map_err(|e| field("train.controller", e.to_string()))?;
        self.sweep.validate().map_err(|e| field("sweep", e))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Built-in defaults as a TOML tree; user files and --set overrides merge
/// onto this, so partially-specified sections inherit sensible values.
fn default_tree() -> toml::Table {
    let mut root = toml::Table::new();
    root.insert("seed".into(), toml::Value::Integer(42));
    root.insert("out_dir".into(), toml::Value::String("runs/experiment".into()));
    root.insert("train".into(), to_value(&TrainSection::default()));
    root.insert("sweep".into(), to_value(&SweepSpec::default()));
    let mut data = toml::Table::new();
    data.insert("count".into(), toml::Value::Integer(default_count() as i64));
    data.insert("test_count".into(), toml::Value::Integer(default_test_count() as i64));
    root.insert("data".into(), toml::Value::Table(data));
    root
}

fn to_value<T: Serialize>(v: &T) -> toml::Value {
    toml::Value::try_from(v).expect("serializable")
}

fn deep_merge(base: &mut toml::Value, user: toml::Value) {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one dotted-path override, e.g. `train.datapath.epochs=1`.
/// The value parses as a TOML literal, falling back to a string.
fn apply_set(tree: &mut toml::Value, arg: &str) -> Result<(), ConfigError> {
    let (path, raw) = arg.split_once('=').ok_or_else(|| ConfigError::BadOverride {
        arg: arg.to_string(),
        what: "expected KEY=VALUE".into(),
    })?;
    let value = parse_literal(raw);
    let mut cur = tree;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(ConfigError::BadOverride {
            arg: arg.to_string(),
            what: "empty path segment".into(),
        });
    }
    for seg in &segments[..segments.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| ConfigError::BadOverride {
            arg: arg.to_string(),
            what: format!("`{seg}` is not a table"),
        })?;
        cur = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let last = segments.last().expect("nonempty path");
    let table = cur.as_table_mut().ok_or_else(|| ConfigError::BadOverride {
        arg: arg.to_string(),
        what: format!("`{last}` has a non-table parent"),
    })?;
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Loads, merges, overrides, validates, and resolves an experiment config.
pub fn load_config(path: &Path, sets: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
    parse_config(&text, sets)
}

/// As [`load_config`], from an in-memory TOML string.
pub fn parse_config(text: &str, sets: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let user: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let mut tree = toml::Value::Table(default_tree());
    deep_merge(&mut tree, toml::Value::Table(user));
    for arg in sets {
        apply_set(&mut tree, arg)?;
    }
    let de = tree;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Field {
        path: e.path().to_string(),
        what: e.inner().to_string(),
    })?;
    let cfg = cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::OptimizerKind;

    const MINIMAL: &str = r#"
[architecture]
arch = "t-mlp"
input = [1, 16, 16]
classes = 10

[data]
source = "synth-blobs"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.train.datapath.phase, Phase::Datapath);
        assert_eq!(cfg.train.datapath.epochs, 30);
        assert_eq!(cfg.train.controller.phase, Phase::Controller);
        assert_eq!(cfg.train.controller.optimizer, OptimizerKind::Adam);
        assert_eq!(cfg.sweep.grid.len(), 17);
        assert_eq!(cfg.train.datapath.seed, 42);
    }

    #[test]
    fn partial_controller_section_keeps_controller_defaults() {
        let text = format!("{MINIMAL}\n[train.controller]\nepochs = 5\n");
        let cfg = parse_config(&text, &[]).unwrap();
        assert_eq!(cfg.train.controller.epochs, 5);
        assert_eq!(cfg.train.controller.optimizer, OptimizerKind::Adam);
        assert_eq!(cfg.train.controller.lr, 1e-3);
    }

    #[test]
    fn set_overrides_apply_and_parse_types() {
        let sets = vec![
            "train.datapath.epochs=1".to_string(),
            "seed=7".to_string(),
            "architecture.fc_width=128".to_string(),
            "out_dir=\"runs/x\"".to_string(),
        ];
        let cfg = parse_config(MINIMAL, &sets).unwrap();
        assert_eq!(cfg.train.datapath.epochs, 1);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.datapath.seed, 7);
        assert_eq!(cfg.architecture.fc_width, 128);
        assert_eq!(cfg.out_dir, PathBuf::from("runs/x"));
    }

    #[test]
    fn unknown_field_is_named() {
        let text = format!("{MINIMAL}\nbanana = 1\n");
        let err = parse_config(&text, &[]).unwrap_err();
        assert!(err.to_string().contains("banana"), "{err}");
    }

    #[test]
    fn missing_required_field_is_named() {
        let err = parse_config("[architecture]\narch = \"t-mlp\"\ninput = [1,4,4]\nclasses = 2\n", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("data"), "{msg}");
    }

    #[test]
    fn bad_temperature_rejected_at_load() {
        let text = format!(
            "{MINIMAL}\n[train.controller.estimator]\nkind = \"concrete\"\ntemperature = 0.0\n"
        );
        let err = parse_config(&text, &[]).unwrap_err();
        assert!(err.to_string().contains("temperature"), "{err}");
    }

    #[test]
    fn resolved_config_roundtrips() {
        let cfg = parse_config(MINIMAL, &["train.datapath.epochs=2".into()]).unwrap();
        let echoed = cfg.to_toml();
        let again = parse_config(&echoed, &[]).unwrap();
        assert_eq!(again.to_toml(), echoed);
    }

    #[test]
    fn synth_data_loads_and_missing_path_named() {
        let cfg = parse_config(MINIMAL, &[]).unwrap();
        let (train, test) = cfg.data.load(cfg.seed).unwrap();
        assert_eq!(train.len(), 2000);
        assert_eq!(test.len(), 1000);

        let text = format!("{MINIMAL}");
        let mut cfg = parse_config(&text, &[]).unwrap();
        cfg.data.source = DataSource::Cifar10;
        let err = cfg.data.load(1).unwrap_err();
        assert!(err.to_string().contains("data.path"), "{err}");
    }
}
