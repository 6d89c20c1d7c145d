//! Experiment configuration: a line-oriented `key = value` file whose keys
//! can also be set individually (command-line overrides).

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::audio::{AudioClip, DEFAULT_SAMPLE_RATE};
use crate::dsp::{log_mel_energies, MelChannels, MelConfig};
use crate::error::{Error, Result};
use crate::neural::model::{DEFAULT_FILTERS, DEFAULT_HIDDEN};
use crate::neural::TrainConfig;
use crate::spatial::{extract_acr, extract_dom_freq, extract_gcc_features, extract_tdoa, SpatialConfig};
use crate::volume::FeatureVolume;

/// How a multichannel feature is presented to its branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layering {
    /// `T x L x C`: channels as separate input layers.
    Volume,
    /// `T x (C*L) x 1`: channels concatenated along the feature axis.
    Concat,
}

impl FromStr for Layering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "volume" => Ok(Layering::Volume),
            "concat" => Ok(Layering::Concat),
            other => Err(Error::validation(format!("unknown layering `{other}` (volume|concat)"))),
        }
    }
}

impl fmt::Display for Layering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layering::Volume => "volume",
            Layering::Concat => "concat",
        })
    }
}

/// A feature as extracted and stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StoredFeature {
    Mel,
    MelMonaural,
    Tdoa,
    Gcc,
    DomFreq,
    Acr,
}

impl StoredFeature {
    pub const ALL: [StoredFeature; 6] = [
        StoredFeature::Mel,
        StoredFeature::MelMonaural,
        StoredFeature::Tdoa,
        StoredFeature::Gcc,
        StoredFeature::DomFreq,
        StoredFeature::Acr,
    ];

    /// Used in file names and normalizer keys.
    pub fn key(self) -> &'static str {
        match self {
            StoredFeature::Mel => "mel",
            StoredFeature::MelMonaural => "mel-monaural",
            StoredFeature::Tdoa => "tdoa",
            StoredFeature::Gcc => "gcc",
            StoredFeature::DomFreq => "domfreq",
            StoredFeature::Acr => "acr",
        }
    }

    pub fn extract(self, clip: &AudioClip, sample_rate: u32) -> Result<FeatureVolume> {
        let spatial = SpatialConfig {
            sample_rate,
            ..SpatialConfig::default()
        };
        let mel = |channels| MelConfig {
            sample_rate,
            channels,
            ..MelConfig::default()
        };
        match self {
            StoredFeature::Mel => log_mel_energies(clip, &mel(MelChannels::Binaural)),
            StoredFeature::MelMonaural => log_mel_energies(clip, &mel(MelChannels::Monaural)),
            StoredFeature::Tdoa => extract_tdoa(clip, &spatial),
            StoredFeature::Gcc => extract_gcc_features(clip, &spatial),
            StoredFeature::DomFreq => extract_dom_freq(clip, &spatial),
            StoredFeature::Acr => extract_acr(clip, &spatial),
        }
    }
}

/// One selected input: its branch name, stored source and arrangement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSpec {
    pub name: String,
    pub stored: StoredFeature,
    pub concat: bool,
}

/// Resolve feature names (`mel`, `mel-monaural`, `mel-concat`, `tdoa`, `gcc`,
/// `domfreq`, `acr`) under a layering mode.
pub fn resolve_features(names: &[String], layering: Layering) -> Result<Vec<FeatureSpec>> {
    if names.is_empty() {
        return Err(Error::validation("feature set is empty"));
    }
    let mut specs: Vec<FeatureSpec> = Vec::with_capacity(names.len());
    for name in names {
        let (stored, concat) = match name.as_str() {
            "mel" => (StoredFeature::Mel, layering == Layering::Concat),
            "mel-concat" => (StoredFeature::Mel, true),
            "mel-monaural" => (StoredFeature::MelMonaural, false),
            "tdoa" => (StoredFeature::Tdoa, layering == Layering::Concat),
            "gcc" => (StoredFeature::Gcc, layering == Layering::Concat),
            "domfreq" => (StoredFeature::DomFreq, layering == Layering::Concat),
            "acr" => (StoredFeature::Acr, layering == Layering::Concat),
            other => {
                return Err(Error::validation(format!(
                    "unknown feature `{other}` (mel, mel-monaural, mel-concat, tdoa, gcc, domfreq, acr)"
                )))
            }
        };
        if specs.iter().any(|s| s.stored == stored) {
            return Err(Error::validation(format!("feature `{name}` selected twice")));
        }
        specs.push(FeatureSpec {
            name: name.clone(),
            stored,
            concat,
        });
    }
    Ok(specs)
}

/// Every setting of an experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub features: Vec<String>,
    pub layering: Layering,
    /// Test folds to run; empty means every fold in the manifest.
    pub folds: Vec<u32>,
    pub threads: usize,
    pub force: bool,
    pub filters: usize,
    pub hidden: usize,
    pub normalize: bool,
    pub sample_rate: u32,
    /// Training settings; `train.seed` is the run seed.
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: PathBuf::from("runs"),
            features: vec!["mel".into()],
            layering: Layering::Volume,
            folds: Vec::new(),
            threads: 0,
            force: false,
            filters: DEFAULT_FILTERS,
            hidden: DEFAULT_HIDDEN,
            normalize: true,
            sample_rate: DEFAULT_SAMPLE_RATE,
            train: TrainConfig::default(),
        }
    }
}

/// Keys accepted by [`ExperimentConfig::set`], in file order.
pub const CONFIG_KEYS: [&str; 23] = [
    "dataset",
    "out",
    "features",
    "layering",
    "folds",
    "seed",
    "threads",
    "force",
    "filters",
    "hidden",
    "normalize",
    "sample_rate",
    "sequence_length",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "dropout",
    "patience",
    "max_epochs",
    "threshold",
    "min_delta",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::validation(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::validation(format!("invalid value `{value}` for `{key}`"))),
    }
}

/// Split a comma-separated list, dropping blanks.
pub fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl ExperimentConfig {
    /// Parse a config file body. Later lines override earlier ones.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "features" => self.features = split_list(value),
            "layering" => self.layering = value.parse()?,
            "folds" => {
                self.folds = split_list(value)
                    .iter()
                    .map(|f| parse::<u32>("folds", f))
                    .collect::<Result<_>>()?
            }
            "seed" => t.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "force" => self.force = parse_bool(key, value)?,
            "filters" => self.filters = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "normalize" => self.normalize = parse_bool(key, value)?,
            "sample_rate" => self.sample_rate = parse(key, value)?,
            "sequence_length" => t.sequence_length = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.adam.lr = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "epsilon" => t.adam.eps = parse(key, value)?,
            "dropout" => t.dropout = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "threshold" => t.threshold = parse(key, value)?,
            "min_delta" => t.min_delta = parse(key, value)?,
            other => {
                return Err(Error::validation(format!(
                    "unknown config key `{other}`; known keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Effective settings in the same `key = value` form [`Self::from_text`] reads.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let folds: Vec<String> = self.folds.iter().map(u32::to_string).collect();
        let values: [String; 23] = [
            self.dataset.as_ref().map_or(String::new(), |p| p.display().to_string()),
            self.out.display().to_string(),
            self.features.join(","),
            self.layering.to_string(),
            folds.join(","),
            t.seed.to_string(),
            self.threads.to_string(),
            self.force.to_string(),
            self.filters.to_string(),
            self.hidden.to_string(),
            self.normalize.to_string(),
            self.sample_rate.to_string(),
            t.sequence_length.to_string(),
            t.batch_size.to_string(),
            t.adam.lr.to_string(),
            t.adam.beta1.to_string(),
            t.adam.beta2.to_string(),
            t.adam.eps.to_string(),
            t.dropout.to_string(),
            t.patience.to_string(),
            t.max_epochs.to_string(),
            t.threshold.to_string(),
            t.min_delta.to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .filter(|(k, v)| !(v.is_empty() && **k == "dataset"))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn feature_specs(&self) -> Result<Vec<FeatureSpec>> {
        resolve_features(&self.features, self.layering)
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_specs()?;
        self.train.validate()?;
        if self.filters == 0 || self.hidden == 0 {
            return Err(Error::validation("filters and hidden must be positive"));
        }
        Ok(())
    }

    /// Short description used to tag reports.
    pub fn tag(&self) -> String {
        format!("features={} layering={}", self.features.join(","), self.layering)
    }
}
