//! Hyperparameters and the flat `key = value` config format.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! key = value
//! ```
//!
//! Blank lines and `#` comments are ignored, keys are case-sensitive, later
//! entries override earlier ones. Lists are comma-separated and booleans
//! accept `1/0/true/false`. CLI flags are applied on top with
//! [`RunConfig::set`].

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On/off switches for the model's structural components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_mpsd: bool,
    pub use_intra: bool,
    pub use_inter: bool,
    pub use_cross: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_mpsd: true,
            use_intra: true,
            use_inter: true,
            use_cross: true,
        }
    }
}

impl AblationFlags {
    pub const fn new(use_mpsd: bool, use_intra: bool, use_inter: bool, use_cross: bool) -> Self {
        AblationFlags {
            use_mpsd,
            use_intra,
            use_inter,
            use_cross,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_intra && !self.use_inter {
            return Err(Error::config(
                "at least one of use_intra/use_inter must be enabled",
            ));
        }
        if self.use_cross && !(self.use_intra && self.use_inter) {
            return Err(Error::config(
                "use_cross needs both the intra and inter paths",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Maximum number of periods kept per branch.
    pub rho: usize,
    /// Two-stage encoder blocks per branch.
    pub layers: usize,
    pub dropout: f64,
    /// Periods in detection rank order (strongest first).
    pub periods: Vec<usize>,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            context: 336,
            horizon: 96,
            d_model: 64,
            heads: 4,
            rho: 16,
            layers: 1,
            dropout: 0.1,
            periods: Vec::new(),
            ablation: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.rho == 0 || self.layers == 0 || self.horizon == 0 {
            return Err(Error::config("rho, layers and horizon must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.periods.is_empty() {
            return Err(Error::config(
                "no periods: preset them or run detection first",
            ));
        }
        if let Some(&p) = self.periods.iter().find(|&&p| p < 2 || p >= self.context) {
            return Err(Error::config(format!(
                "period {p} must satisfy 2 <= p < context ({})",
                self.context
            )));
        }
        self.ablation.validate()
    }

    /// Periods in ascending order without repeats.
    pub fn ascending_periods(&self) -> Vec<usize> {
        let mut p = self.periods.clone();
        p.sort_unstable();
        p.dedup();
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Cap on optimizer steps per epoch; 0 means a full pass.
    pub max_batches_per_epoch: usize,
    /// Spacing between validation window origins used for early stopping.
    pub val_stride: usize,
    /// Worker threads for validation and evaluation. Training steps are
    /// always serial.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            epochs: 30,
            patience: 5,
            seed: 2024,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            max_batches_per_epoch: 0,
            val_stride: 1,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("lr, batch_size and epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps.is_nan()
            || self.adam_eps <= 0.0
        {
            return Err(Error::config(
                "adam betas must lie in [0, 1) and eps must be positive",
            ));
        }
        if self.threads == 0 || self.val_stride == 0 {
            return Err(Error::config("threads and val_stride must be >= 1"));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::config("clip_norm must be >= 0"));
        }
        Ok(())
    }
}

/// Where period detection looks when periods are not preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Detection {
    /// Once over the whole training split.
    TrainSplit,
    /// Spectrum averaged over context-length windows of the training split.
    Window,
}

/// Train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SplitRatios {
    /// 6:2:2 for files named `ETT*`, 7:1:2 otherwise.
    Auto,
    Fixed(u32, u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstantChannels {
    Reject,
    /// Replace a zero standard deviation by 1.
    Guard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataOptions {
    pub split: SplitRatios,
    pub constant_channels: ConstantChannels,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            split: SplitRatios::Auto,
            constant_channels: ConstantChannels::Reject,
        }
    }
}

/// Everything a config file can set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `model.periods` empty means "detect `k` periods".
    pub model: ModelConfig,
    pub k: usize,
    pub detection: Detection,
    pub train: TrainConfig,
    pub data: DataOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            k: 2,
            detection: Detection::TrainSplit,
            train: TrainConfig::default(),
            data: DataOptions::default(),
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

pub fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "context" => m.context = parse(key, value)?,
            "horizon" => m.horizon = parse(key, value)?,
            "d_model" => m.d_model = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "rho" => m.rho = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "periods" => m.periods = parse_list(key, value)?,
            "use_mpsd" => m.ablation.use_mpsd = parse_bool(key, value)?,
            "use_intra" => m.ablation.use_intra = parse_bool(key, value)?,
            "use_inter" => m.ablation.use_inter = parse_bool(key, value)?,
            "use_cross" => m.ablation.use_cross = parse_bool(key, value)?,
            "k" => self.k = parse(key, value)?,
            "period_detection" => {
                self.detection = match value {
                    "train" => Detection::TrainSplit,
                    "window" => Detection::Window,
                    _ => {
                        return Err(Error::config(format!(
                            "period_detection must be train|window, got {value:?}"
                        )))
                    }
                }
            }
            "lr" => t.lr = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "max_batches_per_epoch" => t.max_batches_per_epoch = parse(key, value)?,
            "threads" => t.threads = parse(key, value)?,
            "val_stride" => t.val_stride = parse(key, value)?,
            "split" => {
                self.data.split = if value == "auto" {
                    SplitRatios::Auto
                } else {
                    let parts: Vec<u32> = value
                        .split(':')
                        .map(|s| parse(key, s.trim()))
                        .collect::<Result<_>>()?;
                    match parts.as_slice() {
                        &[a, b, c] if a > 0 && b > 0 && c > 0 => SplitRatios::Fixed(a, b, c),
                        _ => {
                            return Err(Error::config(format!(
                                "split must be auto or a:b:c, got {value:?}"
                            )))
                        }
                    }
                }
            }
            "constant_channels" => {
                self.data.constant_channels = match value {
                    "reject" => ConstantChannels::Reject,
                    "guard" => ConstantChannels::Guard,
                    _ => {
                        return Err(Error::config(format!(
                            "constant_channels must be reject|guard, got {value:?}"
                        )))
                    }
                }
            }
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        self.train.validate()?;
        self.model.ablation.validate()
    }
}

fn bool_str(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

impl ModelConfig {
    /// Serializes in the config-file grammar (used inside checkpoints).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let periods: Vec<String> = self.periods.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "context = {}", self.context);
        let _ = writeln!(s, "horizon = {}", self.horizon);
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "rho = {}", self.rho);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "periods = {}", periods.join(","));
        let _ = writeln!(s, "use_mpsd = {}", bool_str(self.ablation.use_mpsd));
        let _ = writeln!(s, "use_intra = {}", bool_str(self.ablation.use_intra));
        let _ = writeln!(s, "use_inter = {}", bool_str(self.ablation.use_inter));
        let _ = writeln!(s, "use_cross = {}", bool_str(self.ablation.use_cross));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg.model)
    }
}
