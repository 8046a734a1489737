//! Experiment configuration files.
//!
//! A configuration is a TOML document. Every table except `[[system]]` has
//! defaults, so the smallest useful file names one system:
//!
//! ```toml
//! version = 1
//! seed = 7
//! output_dir = "runs/toy"
//! preset = "small"
//!
//! [[system]]
//! tx_antennas = [1, 1]
//! rx_antennas = 8
//! constellation = "QPSK"
//! ```
//!
//! Any key can be overridden from the command line with a dotted path, e.g.
//! `--set dit.epochs=4 --set eval.snr_db=[0,5]`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mudemod_core::diffusion::TrainConfig;
use mudemod_core::distill::DistillConfig;
use mudemod_core::sysmodel::{ChannelModel, Modulation, SystemConfig};
use mudemod_core::{Error, Preset, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// One cell of the system grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemCell {
    pub tx_antennas: Vec<usize>,
    pub rx_antennas: usize,
    pub constellation: Modulation,
    /// Per-user channel estimation error; perfect CSI when omitted.
    #[serde(default)]
    pub sigma_h_sq: Option<Vec<f64>>,
}

impl SystemCell {
    pub fn users(&self) -> usize {
        self.tx_antennas.len()
    }

    pub fn at_snr(&self, snr_db: f64) -> SystemConfig {
        SystemConfig {
            users: self.users(),
            tx_antennas: self.tx_antennas.clone(),
            rx_antennas: self.rx_antennas,
            constellation: self.constellation,
            snr_db,
            sigma_h_sq: self.sigma_h_sq.clone().unwrap_or_else(|| vec![0.0; self.users()]),
            seed: 0,
        }
    }
}

impl fmt::Display for SystemCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nt: Vec<String> = self.tx_antennas.iter().map(|n| n.to_string()).collect();
        write!(f, "U={} Nt=[{}] Nr={} {}", self.users(), nt.join(","), self.rx_antennas, self.constellation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    /// Training SNRs are drawn uniformly from this range per record.
    pub train_snr_db: (f64, f64),
    pub channel_model: ChannelModel,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_samples: 50_000, val_samples: 5_000, train_snr_db: (0.0, 10.0), channel_model: ChannelModel::IidRayleigh }
    }
}

/// Group stream budget, either fixed or relative to the receive antenna count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdPolicy {
    Absolute(usize),
    Fraction(f64),
}

impl ThresholdPolicy {
    pub fn resolve(self, rx_antennas: usize) -> usize {
        match self {
            ThresholdPolicy::Absolute(n) => n,
            ThresholdPolicy::Fraction(f) => ((f * rx_antennas as f64).floor() as usize).max(1),
        }
    }
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Fraction(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ls,
    Lmmse,
    /// Aligner plus multi-step teacher sampling.
    Teacher,
    /// Aligner plus the single-step distilled student.
    Student,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Ls => "LS",
            Method::Lmmse => "LMMSE",
            Method::Teacher => "teacher",
            Method::Student => "student",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub snr_db: Vec<f64>,
    pub methods: Vec<Method>,
    pub teacher_steps: usize,
    pub batch_size: usize,
    pub threshold: ThresholdPolicy,
    /// Channels kept per user for the equivalent noise power; 0 uses each
    /// sample's own estimate instead.
    pub buffer_capacity: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            snr_db: vec![0.0, 2.5, 5.0, 7.5, 10.0],
            methods: vec![Method::Ls, Method::Lmmse, Method::Teacher, Method::Student],
            teacher_steps: 10,
            batch_size: 100,
            threshold: ThresholdPolicy::default(),
            buffer_capacity: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    pub system: Vec<SystemCell>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "TrainConfig::aligner_default")]
    pub aligner: TrainConfig,
    #[serde(default = "TrainConfig::dit_default")]
    pub dit: TrainConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    /// Caps the number of training records used for distillation.
    #[serde(default)]
    pub distill_samples: Option<usize>,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_preset() -> Preset {
    Preset::Small
}

impl ExperimentConfig {
    /// A configuration with defaults everywhere except the grid and paths.
    pub fn new(output_dir: impl Into<PathBuf>, system: Vec<SystemCell>) -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: output_dir.into(),
            preset: Preset::Small,
            system,
            data: DataConfig::default(),
            aligner: TrainConfig::aligner_default(),
            dit: TrainConfig::dit_default(),
            distill: DistillConfig::default(),
            distill_samples: None,
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version)));
        }
        if self.system.is_empty() {
            return Err(Error::Config("the system grid is empty; add at least one [[system]] table".into()));
        }
        for (i, cell) in self.system.iter().enumerate() {
            cell.at_snr(0.0).validate().map_err(|e| Error::Config(format!("system[{i}]: {e}")))?;
        }
        let (lo, hi) = self.data.train_snr_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("data.train_snr_db must be an ordered finite range, got ({lo}, {hi})")));
        }
        if self.eval.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("eval.snr_db must be finite".into()));
        }
        if self.eval.batch_size == 0 || self.eval.teacher_steps == 0 {
            return Err(Error::Config("eval.batch_size and eval.teacher_steps must be positive".into()));
        }
        if let ThresholdPolicy::Fraction(f) = self.eval.threshold {
            if !(f > 0.0) {
                return Err(Error::Config(format!("threshold fraction must be positive, got {f}")));
            }
        }
        self.distill.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_value(parse_toml(text)?)
    }

    /// Reads a file and applies `key=value` overrides before validation.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut value = parse_toml(&text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    fn from_value(mut value: toml::Value) -> Result<Self> {
        fill_defaults(&mut value)?;
        let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Completes partially given sections from their defaults so overrides may
/// name single keys of tables the file omits.
fn fill_defaults(value: &mut toml::Value) -> Result<()> {
    let defaults = [
        ("data", toml_value(&DataConfig::default())?),
        ("aligner", toml_value(&TrainConfig::aligner_default())?),
        ("dit", toml_value(&TrainConfig::dit_default())?),
        ("distill", toml_value(&DistillConfig::default())?),
        ("eval", toml_value(&EvalConfig::default())?),
    ];
    let Some(root) = value.as_table_mut() else {
        return Ok(());
    };
    for (key, mut base) in defaults {
        if let Some(given) = root.remove(key) {
            merge(&mut base, given);
        }
        root.insert(key.to_string(), base);
    }
    Ok(())
}

fn toml_value<T: Serialize>(v: &T) -> Result<toml::Value> {
    toml::Value::try_from(v).map_err(|e| Error::Config(e.to_string()))
}

fn merge(base: &mut toml::Value, given: toml::Value) {
    match (base, given) {
        (toml::Value::Table(b), toml::Value::Table(g)) => {
            for (k, v) in g {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() && k != "threshold" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, g) => *b = g,
    }
}

fn parse_toml(text: &str) -> Result<toml::Value> {
    text.parse::<toml::Table>().map(toml::Value::Table).map_err(|e| Error::Config(e.to_string()))
}

/// Sets a dotted key path to a TOML literal; bare words become strings.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override '{assignment}' is not of the form key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override '{path}': '{}' is not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            table.insert(key.to_string(), value);
            return Ok(());
        }
        node = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Usage(format!("override '{assignment}' has an empty key")))
}
