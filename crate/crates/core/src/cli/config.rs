use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    build_augmented_dataset, generate_synthetic_dataset, parse_voc_annotations, DatasetManifest,
    DEFAULT_STRENGTHS, NUM_DEGRADATIONS,
};
use crate::detector::{ModelConfig, YOLOV3_ANCHORS};
use crate::error::{MarsError, Result};
use crate::evaluation::{DatasetMode, EvalConfig};
use crate::training::TrainConfig;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "MARS_SEED";

/// Generated in memory instead of read from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: u32,
    pub seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            train_images: 8,
            val_images: 8,
            image_size: 96,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSON manifest or VOC directory.
    pub train: Option<PathBuf>,
    /// Defaults to the training split.
    pub val: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
    pub mode: DatasetMode,
    /// In augmented mode, also degrade the validation split.
    pub augment_validation: bool,
    pub strengths: [f64; NUM_DEGRADATIONS],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            val: None,
            synthetic: None,
            mode: DatasetMode::Original,
            augment_validation: true,
            strengths: DEFAULT_STRENGTHS,
        }
    }
}

impl DataConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match (&self.train, &self.synthetic) {
            (None, None) => v.push("data.train or data.synthetic must be set".into()),
            (Some(_), Some(_)) => v.push("data.train and data.synthetic are mutually exclusive".into()),
            _ => {}
        }
        if self.val.is_some() && self.synthetic.is_some() {
            v.push("data.val cannot be combined with data.synthetic".into());
        }
        for p in [&self.train, &self.val].into_iter().flatten() {
            if !p.exists() {
                v.push(format!("data path {} does not exist", p.display()));
            }
        }
        if let Some(s) = &self.synthetic {
            if s.train_images == 0 || s.val_images == 0 {
                v.push("data.synthetic image counts must be >= 1".into());
            }
            if s.image_size < 32 {
                v.push("data.synthetic.image_size must be >= 32".into());
            }
        }
        if self.strengths.iter().any(|s| !(0.0..=1.0).contains(s)) {
            v.push("data.strengths must lie in [0, 1]".into());
        }
        v
    }

    /// Train and validation manifests for the configured mode.
    pub fn load(&self, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
        let (train, val) = match (&self.train, &self.synthetic) {
            (Some(t), _) => {
                let train = load_dataset(t)?;
                let val = match &self.val {
                    Some(v) => load_dataset(v)?,
                    None => train.clone(),
                };
                (train, val)
            }
            (None, Some(s)) => {
                let mut train = generate_synthetic_dataset(s.train_images, s.image_size, s.seed)?;
                train.split = "train".into();
                let mut val = generate_synthetic_dataset(s.val_images, s.image_size, s.seed.wrapping_add(1))?;
                val.split = "val".into();
                (train, val)
            }
            (None, None) => return Err(MarsError::config("data.train or data.synthetic must be set")),
        };
        match self.mode {
            DatasetMode::Original => Ok((train, val)),
            DatasetMode::Augmented => {
                let train = build_augmented_dataset(&train, &self.strengths, seed)?;
                let val = if self.augment_validation {
                    build_augmented_dataset(&val, &self.strengths, seed.wrapping_add(1))?
                } else {
                    val
                };
                Ok((train, val))
            }
        }
    }
}

/// A JSON manifest file or a VOC annotation directory.
pub fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    if path.is_dir() {
        parse_voc_annotations(path)
    } else {
        DatasetManifest::load(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

/// The seed from the environment, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| MarsError::config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// Parse TOML, requiring a top-level `seed`. When `[model]` gives no
/// anchors, the default set is rescaled to the configured input size.
pub(crate) fn parse_with_seed<T: serde::de::DeserializeOwned + HasModel>(
    text: &str,
    origin: &Path,
) -> Result<T> {
    let table: toml::Table = toml::from_str(text)
        .map_err(|e| MarsError::config(format!("{}: {}", origin.display(), e.message())))?;
    if !table.contains_key("seed") {
        return Err(MarsError::config(format!(
            "{}: missing mandatory field `seed`",
            origin.display()
        )));
    }
    let mut parsed: T = toml::from_str(text)
        .map_err(|e| MarsError::config(format!("{}: {}", origin.display(), e.message())))?;
    let explicit = table
        .get("model")
        .and_then(|m| m.as_table())
        .is_some_and(|m| m.contains_key("anchors"));
    if !explicit {
        let m = parsed.model_mut();
        let k = m.input_size as f64 / 416.0;
        m.anchors = YOLOV3_ANCHORS.iter().map(|[w, h]| [w * k, h * k]).collect();
    }
    Ok(parsed)
}

pub(crate) trait HasModel {
    fn model_mut(&mut self) -> &mut ModelConfig;
}

impl HasModel for RunConfig {
    fn model_mut(&mut self) -> &mut ModelConfig {
        &mut self.model
    }
}

impl RunConfig {
    /// Parse, apply the seed override, make paths absolute relative to the
    /// config's directory and validate.
    pub fn from_toml(text: &str, origin: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
        let mut cfg: RunConfig = parse_with_seed(text, origin)?;
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        let base = origin
            .parent()
            .map(|p| {
                if p.as_os_str().is_empty() {
                    Path::new(".")
                } else {
                    p
                }
            })
            .unwrap_or(Path::new("."));
        let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
        absolutize(&base, &mut cfg.output_dir);
        for p in [&mut cfg.data.train, &mut cfg.data.val].into_iter().flatten() {
            absolutize(&base, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read from disk; `MARS_SEED` wins over the file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| MarsError::io(path, e))?;
        RunConfig::from_toml(&text, path, env_seed()?)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.train.violations());
        v.extend(self.data.violations());
        v.extend(self.eval.violations());
        if self.data.mode == DatasetMode::Augmented && self.model.num_domains < NUM_DEGRADATIONS + 1 {
            v.push(format!(
                "model.num_domains must be >= {} for augmented data",
                NUM_DEGRADATIONS + 1
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(MarsError::Config(v))
        }
    }

    /// Every field written out, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin(dir: &Path) -> PathBuf {
        dir.join("run.toml")
    }

    #[test]
    fn missing_seed_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = RunConfig::from_toml("[data]\nsynthetic = {}\n", &origin(dir.path()), None).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        assert!(err.is_validation());
    }

    #[test]
    fn every_violation_is_listed() {
        let dir = tempfile::tempdir().unwrap();
        let text =
            "seed = 1\n[model]\ninput_size = 100\n[train]\nbatch_size = 0\n[eval]\nconf_threshold = 2.0\n";
        match RunConfig::from_toml(text, &origin(dir.path()), None) {
            Err(MarsError::Config(v)) => assert_eq!(v.len(), 4, "{v:?}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn resolution_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let text = "seed = 3\noutput_dir = \"out\"\n[model]\nbackbone = \"toy\"\ninput_size = 64\n[data.synthetic]\ntrain_images = 2\n";
        let a = RunConfig::from_toml(text, &origin(dir.path()), None).unwrap();
        let resolved = a.to_toml();
        let b = RunConfig::from_toml(&resolved, &origin(dir.path()), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(resolved, b.to_toml());
        assert!(a.output_dir.is_absolute());
        assert_eq!(a.model.anchors, ModelConfig::toy(64).anchors);
    }

    #[test]
    fn seed_override() {
        let dir = tempfile::tempdir().unwrap();
        let text = "seed = 3\n[data.synthetic]\n";
        let c = RunConfig::from_toml(text, &origin(dir.path()), Some(42)).unwrap();
        assert_eq!((c.seed, c.train.seed), (42, 42));
    }
}
