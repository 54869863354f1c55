//! The optional `--config` TOML file. Every key mirrors a command-line flag;
//! precedence is flag, then environment (output_dir and jobs only), then
//! file, then built-in default.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use mamf_core::{Algorithm, Error, Result, TrainOverrides};

/// `T` given explicitly or resolved from the coverage rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskCount {
    Auto,
    Fixed(usize),
}

impl FromStr for TaskCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(TaskCount::Auto);
        }
        s.parse()
            .map(TaskCount::Fixed)
            .map_err(|_| Error::Usage(format!("task count must be a positive integer or \"auto\", got {s:?}")))
    }
}

impl fmt::Display for TaskCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskCount::Auto => f.write_str("auto"),
            TaskCount::Fixed(t) => write!(f, "{t}"),
        }
    }
}

impl Serialize for TaskCount {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TaskCount::Auto => s.serialize_str("auto"),
            TaskCount::Fixed(t) => s.serialize_u64(*t as u64),
        }
    }
}

impl<'de> Deserialize<'de> for TaskCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(t) => Ok(TaskCount::Fixed(t)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Generator settings; unset keys fall back to the generator defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub num_classes: Option<usize>,
    pub d_img: Option<usize>,
    pub d_txt: Option<usize>,
    pub d_joint: Option<usize>,
    pub n_train: Option<usize>,
    pub n_support: Option<usize>,
    pub n_query: Option<usize>,
    pub sigma_between: Option<f64>,
    pub sigma_within: Option<f64>,
    pub spurious: Option<bool>,
    pub spurious_strength: Option<f64>,
    pub orthogonal_centroids: Option<bool>,
    pub prompt_template: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<PathBuf>,
    pub dataset_name: Option<String>,
    pub output_dir: Option<PathBuf>,
    /// Output file of gen-synthetic, import and sample-tasks.
    pub out: Option<PathBuf>,
    /// Input directory of import.
    pub input_dir: Option<PathBuf>,
    /// Input results CSV of report.
    pub results: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub algorithm: Option<Algorithm>,
    pub algorithms: Option<Vec<Algorithm>>,
    pub num_classes: Option<usize>,
    pub n: Option<usize>,
    pub t: Option<TaskCount>,
    pub n_values: Option<Vec<usize>>,
    pub seed: Option<u64>,
    pub num_seeds: Option<usize>,
    pub jobs: Option<usize>,
    pub adapt_lr: Option<f64>,
    pub adapt_epochs: Option<usize>,
    pub train: TrainOverrides,
    pub synthetic: SyntheticSection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize effective config: {e}")))
    }
}

/// Flag value if given, else the file value.
pub fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

pub fn merge_overrides(flags: &TrainOverrides, file: &TrainOverrides) -> TrainOverrides {
    TrainOverrides {
        epochs: flags.epochs.or(file.epochs),
        lr: flags.lr.or(file.lr),
        inner_steps: flags.inner_steps.or(file.inner_steps),
        inner_lr: flags.inner_lr.or(file.inner_lr),
        batch_size: flags.batch_size.or(file.batch_size),
        scale: flags.scale.or(file.scale),
        normalize: flags.normalize.or(file.normalize),
        reset_adam_per_task: flags.reset_adam_per_task.or(file.reset_adam_per_task),
        resample_each_pass: flags.resample_each_pass.or(file.resample_each_pass),
        support_fraction: flags.support_fraction.or(file.support_fraction),
    }
}
