//! Run configuration: a flat `key = value` file merged with command-line
//! overrides.
//!
//! ```text
//! # comments and blank lines are ignored
//! epochs = 40
//! scale = 3
//! local_memory = false
//! ```
//!
//! Unknown or repeated keys are errors. Everything except `epochs` and the
//! data paths has a default.

use std::path::{Path, PathBuf};

use dmcn_core::image::DegradationSpec;
use dmcn_core::model::ModelConfig;
use dmcn_core::training::TrainConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Training settings; `train.epochs` is meaningful only when `epochs`
    /// is set.
    pub train: TrainConfig,
    pub epochs: Option<usize>,
    pub seed: u64,
    pub scale: usize,
    pub split_ratio: f64,
    /// Input images for `prepare`, prepared patches for `train`/`ablate`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::new(0, 0),
            epochs: None,
            seed: 0,
            scale: 2,
            split_ratio: 0.8,
            data_dir: None,
            out_dir: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "scale",
    "split_ratio",
    "epochs",
    "data_dir",
    "out_dir",
    "channels",
    "kernel",
    "blocks_per_stage",
    "local_memory",
    "global_memory",
    "hourglass",
    "input_channels",
    "lr0",
    "decay_every_epochs",
    "decay_factor",
    "batch_size",
    "beta1",
    "beta2",
    "epsilon",
    "weight_decay",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
}

impl RunConfig {
    /// Sets one key; `Err` carries a message without location.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "scale" => self.scale = parse(key, value)?,
            "split_ratio" => self.split_ratio = parse(key, value)?,
            "epochs" => self.epochs = Some(parse(key, value)?),
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "channels" => m.channels = parse(key, value)?,
            "kernel" => m.kernel = parse(key, value)?,
            "blocks_per_stage" => m.blocks_per_stage = parse(key, value)?,
            "local_memory" => m.enable_local_memory = parse(key, value)?,
            "global_memory" => m.enable_global_memory = parse(key, value)?,
            "hourglass" => m.enable_hourglass = parse(key, value)?,
            "input_channels" => m.input_channels = parse(key, value)?,
            "lr0" => t.lr0 = parse(key, value)?,
            "decay_every_epochs" => t.decay_every_epochs = parse(key, value)?,
            "decay_factor" => t.decay_factor = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "epsilon" => t.epsilon = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        self.sync();
        Ok(())
    }

    /// Propagates the shared seed and epoch count into the sub-configs.
    fn sync(&mut self) {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.train.epochs = self.epochs.unwrap_or(0);
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies the assignments in `text` on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Config { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("{key} given twice")));
            }
            self.set(key, value).map_err(err)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { line, message } => Error::Config {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    /// `key = value` lines for every key, readable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("seed", self.seed.to_string());
        put("scale", self.scale.to_string());
        put("split_ratio", self.split_ratio.to_string());
        if let Some(e) = self.epochs {
            put("epochs", e.to_string());
        }
        if let Some(d) = &self.data_dir {
            put("data_dir", d.display().to_string());
        }
        if let Some(d) = &self.out_dir {
            put("out_dir", d.display().to_string());
        }
        put("channels", m.channels.to_string());
        put("kernel", m.kernel.to_string());
        put("blocks_per_stage", m.blocks_per_stage.to_string());
        put("local_memory", m.enable_local_memory.to_string());
        put("global_memory", m.enable_global_memory.to_string());
        put("hourglass", m.enable_hourglass.to_string());
        put("input_channels", m.input_channels.to_string());
        put("lr0", t.lr0.to_string());
        put("decay_every_epochs", t.decay_every_epochs.to_string());
        put("decay_factor", t.decay_factor.to_string());
        put("batch_size", t.batch_size.to_string());
        put("beta1", t.beta1.to_string());
        put("beta2", t.beta2.to_string());
        put("epsilon", t.epsilon.to_string());
        put("weight_decay", t.weight_decay.to_string());
        s
    }

    pub fn degradation(&self) -> Result<DegradationSpec> {
        Ok(DegradationSpec::new(self.scale)?)
    }

    pub fn require_epochs(&self) -> Result<usize> {
        self.epochs
            .ok_or_else(|| Error::usage("epochs is required (set it in the config file)"))
    }

    pub fn require_data_dir(&self) -> Result<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| Error::usage("data_dir is required"))
    }

    pub fn require_out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::usage("out_dir is required (--out DIR)"))
    }

    /// Validated training settings.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = self.train.clone();
        t.epochs = self.require_epochs()?;
        t.seed = self.seed;
        t.validate()?;
        Ok(t)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        };
        m.validate()?;
        Ok(m)
    }
}
