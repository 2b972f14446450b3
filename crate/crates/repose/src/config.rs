//! Run configuration: a TOML file with `model` / `extractor` / `data` /
//! `loss` / `optim` / `run` sections, every field defaulted, unknown keys
//! rejected. Command-line `--set a.b.c=value` overrides are applied to the
//! parsed tree before deserialization, and the resolved configuration is
//! dumped alongside each run for reproducibility.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extractor::FeatureExtractor;
use crate::imagegen::{Ablation, ImageGenConfig};
use crate::losses::LossWeights;
use crate::parsing::ParsingGenConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override {0:?} (expected key.path=value)")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Square working resolution; must be a multiple of 16.
    pub resolution: usize,
    /// Heatmap Gaussian sigma at 256x256; scales linearly with resolution.
    pub sigma256: f64,
    pub ablation: Ablation,
    pub parsing: ParsingGenConfig,
    pub image: ImageGenConfig,
    /// Discriminator stride-2 widths.
    pub disc_channels: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            resolution: 64,
            sigma256: 6.0,
            ablation: Ablation::Full,
            parsing: ParsingGenConfig::default(),
            image: ImageGenConfig::default(),
            disc_channels: vec![16, 32, 64, 128],
        }
    }
}

impl ModelSection {
    /// Sigma in pixels at the working resolution.
    pub fn sigma(&self) -> f64 {
        self.sigma256 * self.resolution as f64 / 256.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Stub,
    Vgg19,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSection {
    pub kind: ExtractorKind,
    /// Seed of the frozen stub weights.
    pub seed: u64,
    /// Checkpoint path for the pretrained kind.
    pub weights: Option<PathBuf>,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        ExtractorSection { kind: ExtractorKind::Stub, seed: 7, weights: None }
    }
}

impl ExtractorSection {
    pub fn build(&self, workdir: &Path) -> Result<FeatureExtractor, ConfigError> {
        match self.kind {
            ExtractorKind::Stub => Ok(FeatureExtractor::stub(self.seed)),
            ExtractorKind::Vgg19 => {
                let rel = self.weights.as_ref().ok_or_else(|| {
                    ConfigError::Invalid("extractor.kind = \"vgg19\" requires extractor.weights".into())
                })?;
                let path = if rel.is_absolute() { rel.clone() } else { workdir.join(rel) };
                FeatureExtractor::vgg19_from_checkpoint(&path)
                    .map_err(|e| ConfigError::Invalid(format!("loading {}: {e}", path.display())))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory (relative paths resolve against --workdir).
    pub root: PathBuf,
    /// Pair-list file inside `root`.
    pub pairs: String,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { root: PathBuf::from("fixtures"), pairs: "pairs.txt".into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    #[serde(flatten)]
    pub weights: LossWeights,
    /// Weight of the l1 term inside the stage-1 objective.
    pub lambda_parsing_l1: f64,
    /// Keep the stage-1 objective active during joint training.
    pub parsing_loss_in_joint: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            weights: LossWeights::default(),
            lambda_parsing_l1: 5.0,
            parsing_loss_in_joint: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection { lr_g: 2e-4, lr_d: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Which parsing map conditions stage 2 during the image phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsingSource {
    /// Teacher forcing with the ground-truth target parsing.
    GroundTruth,
    /// Hard output of a frozen stage-1 checkpoint.
    FrozenStage1,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub log_every: usize,
    /// 0 means checkpoint only at the end.
    pub ckpt_every: usize,
    pub parsing_source: ParsingSource,
    /// Stage-1 checkpoint for `frozen_stage1` and for joint training.
    pub parsing_ckpt: Option<PathBuf>,
    /// Stage-2 checkpoint to initialize joint training.
    pub image_ckpt: Option<PathBuf>,
    /// Resume training from this checkpoint.
    pub resume: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            steps: 200,
            batch: 1,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            log_every: 1,
            ckpt_every: 0,
            parsing_source: ParsingSource::GroundTruth,
            parsing_ckpt: None,
            image_ckpt: None,
            resume: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub extractor: ExtractorSection,
    pub data: DataSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub run: RunSection,
}

impl RunConfig {
    /// Load from an optional file and apply `--set key.path=value` overrides
    /// (overrides win). Unknown keys anywhere are errors.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut value: toml::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::Io { path: p.display().to_string(), source: e })?;
                toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
            }
            None => toml::Value::Table(Default::default()),
        };
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: RunConfig = value.try_into().map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        let r = self.model.resolution;
        if r < 32 || r % 16 != 0 {
            return inv(format!("model.resolution must be >= 32 and a multiple of 16, got {r}"));
        }
        if self.model.sigma256 <= 0.0 {
            return inv("model.sigma256 must be positive".into());
        }
        self.model.parsing.validate().or_else(|e| inv(format!("model.parsing: {e}")))?;
        self.model.image.validate().or_else(|e| inv(format!("model.image: {e}")))?;
        if self.model.disc_channels.is_empty() {
            return inv("model.disc_channels must not be empty".into());
        }
        self.loss.weights.validate().or_else(|e| inv(format!("loss: {e}")))?;
        if self.loss.lambda_parsing_l1 < 0.0 {
            return inv("loss.lambda_parsing_l1 must be >= 0".into());
        }
        if self.run.steps == 0 || self.run.batch == 0 {
            return inv("run.steps and run.batch must be positive".into());
        }
        for (name, v) in [
            ("optim.lr_g", self.optim.lr_g),
            ("optim.lr_d", self.optim.lr_d),
            ("optim.eps", self.optim.eps),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return inv(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return inv("optim.beta1/beta2 must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Pretty TOML of the fully resolved configuration.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Set a dotted-path key to a literal parsed as TOML (falling back to a
/// string), creating intermediate tables as needed.
fn apply_override(value: &mut toml::Value, spec: &str) -> Result<(), ConfigError> {
    let Some((path, raw)) = spec.split_once('=') else {
        return Err(ConfigError::BadOverride(spec.to_string()));
    };
    let (path, raw) = (path.trim(), raw.trim());
    if path.is_empty() {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let parsed: toml::Value = match format!("x = {raw}").parse::<toml::Table>() {
        Ok(t) => t["x"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(format!("{path}: {part} is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("loop always returns on the last path segment")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.resolution, 64);
        assert!((cfg.model.sigma() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn load_from_file_with_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        std::fs::write(&p, "[optim]\nlr_g = 1e-3\n\n[run]\nsteps = 50\n").unwrap();
        let cfg = RunConfig::load(Some(&p), &["optim.lr_g=5e-4".into(), "run.seed=9".into()]).unwrap();
        assert_eq!(cfg.optim.lr_g, 5e-4); // override wins over file
        assert_eq!(cfg.run.steps, 50);
        assert_eq!(cfg.run.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        std::fs::write(&p, "[optim]\nlearning_rate = 1e-3\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p), &[]), Err(ConfigError::Parse(_))));
        // unknown top-level section
        std::fs::write(&p, "[trainer]\nsteps = 5\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p), &[]), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = RunConfig::load(None, &["run.steps=0".into()]);
        assert!(matches!(bad, Err(ConfigError::Invalid(_))));
        let bad = RunConfig::load(None, &["model.resolution=40".into()]);
        assert!(matches!(bad, Err(ConfigError::Invalid(_))));
        let bad = RunConfig::load(None, &["optim.lr_g=-1".into()]);
        assert!(matches!(bad, Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn override_string_and_enum_values() {
        let cfg = RunConfig::load(
            None,
            &[
                "model.ablation=\"global_enc\"".into(),
                "run.parsing_source=frozen_stage1".into(),
                "data.pairs=train_pairs.txt".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.model.ablation, Ablation::GlobalEnc);
        assert_eq!(cfg.run.parsing_source, ParsingSource::FrozenStage1);
        assert_eq!(cfg.data.pairs, "train_pairs.txt");
    }

    #[test]
    fn malformed_override_rejected() {
        assert!(matches!(
            RunConfig::load(None, &["no_equals_sign".into()]),
            Err(ConfigError::BadOverride(_))
        ));
    }

    #[test]
    fn resolved_toml_roundtrips() {
        let cfg = RunConfig::load(None, &["run.seed=123".into()]).unwrap();
        let text = cfg.resolved_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.run.seed, 123);
        assert_eq!(back.model.resolution, cfg.model.resolution);
    }
}
