//! Run configuration: a JSON document with every field defaulted, then
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use bilevel_core::data::{BlurPreset, DatasetKind, DatasetSpec, Padding};
use bilevel_core::foe::FoeTrainConfig;
use bilevel_core::imgcore::{DegradationOp, Kernel};
use bilevel_core::tvdisc::{FilterFamily, Symmetry, TvTrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Deblur,
    Sr,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Deblur => "deblur",
            Task::Sr => "sr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    /// Binary edges at equi-spaced orientations.
    Edges { count: usize, size: usize },
    /// Synthetic piecewise-smooth scenes.
    Scenes { count: usize, size: usize },
    /// Patches from the PGM images in `dir`.
    Dir {
        dir: PathBuf,
        patches_per_image: usize,
        patch_size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: Source,
    pub task: Task,
    /// Blur for deblurring; super-resolution uses a delta kernel.
    pub blur: BlurPreset,
    pub sr_factor: usize,
    pub noise: f64,
    pub padding: Padding,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: Source::Edges { count: 8, size: 32 },
            task: Task::Deblur,
            blur: BlurPreset::GaussianC,
            sr_factor: 2,
            noise: 0.0,
            padding: Padding::ReflexiveCrop,
        }
    }
}

impl DataConfig {
    pub fn operator(&self) -> Result<DegradationOp, CliError> {
        match self.task {
            Task::Deblur => Ok(DegradationOp::Blur(self.blur.kernel())),
            Task::Sr => DegradationOp::decimated(Kernel::delta(), self.sr_factor).map_err(CliError::config_err),
        }
    }

    /// Short label such as `deblur/gaussianC/0.01`.
    pub fn label(&self) -> String {
        match self.task {
            Task::Deblur => format!("deblur/{}/{}", self.blur.name(), self.noise),
            Task::Sr => format!("sr/x{}/{}", self.sr_factor, self.noise),
        }
    }

    /// The setting column of the metrics table.
    pub fn setting(&self) -> String {
        let base = match self.task {
            Task::Deblur => self.blur.name().to_string(),
            Task::Sr => format!("x{}", self.sr_factor),
        };
        if self.noise > 0.0 {
            format!("{base} noisy")
        } else {
            base
        }
    }

    pub fn spec(&self, seed: u64) -> Result<DatasetSpec, CliError> {
        let kind = match &self.source {
            Source::Edges { count, size } => DatasetKind::EdgeSet {
                s: *count,
                size: *size,
                seed,
            },
            Source::Scenes { count, size } => DatasetKind::Scenes {
                count: *count,
                size: *size,
                seed,
            },
            Source::Dir {
                dir,
                patches_per_image,
                patch_size,
            } => DatasetKind::PatchSet {
                dir: dir.clone(),
                patches_per_image: *patches_per_image,
                patch_size: *patch_size,
                seed,
            },
        };
        let spec = DatasetSpec {
            kind,
            degradation: self.operator()?,
            noise_sigma: self.noise,
            padding: self.padding,
        };
        spec.validate().map_err(CliError::config_err)?;
        Ok(spec)
    }

    pub fn validate(&self, field: &str) -> Result<(), CliError> {
        if let Source::Dir { dir, .. } = &self.source {
            if !dir.is_dir() {
                return Err(CliError::Config(format!(
                    "{field}: dataset directory {} does not exist",
                    dir.display()
                )));
            }
        }
        self.spec(0).map(|_| ()).map_err(|e| CliError::Config(format!("{field}: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoeInit {
    #[default]
    Random,
    Dct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoeConfig {
    pub filters: usize,
    pub kappa: usize,
    pub init: FoeInit,
    pub init_alpha: f64,
    pub train: FoeTrainConfig,
}

impl Default for FoeConfig {
    fn default() -> Self {
        Self {
            filters: 4,
            kappa: 5,
            init: FoeInit::Random,
            init_alpha: 0.1,
            train: FoeTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TvConfig {
    pub filters: usize,
    pub symmetry: Symmetry,
    /// Start from a named preset instead of perturbed FD.
    pub init_preset: Option<String>,
    /// Variance of the perturbation added to the FD start.
    pub init_variance: f64,
    pub train: TvTrainConfig,
    /// Primal-dual iterations used when restoring.
    pub restore_iters: usize,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            filters: 2,
            symmetry: Symmetry::Transpose,
            init_preset: None,
            init_variance: 1e-3,
            train: TvTrainConfig::default(),
            restore_iters: 2000,
        }
    }
}

impl TvConfig {
    pub fn init_family_size(&self) -> usize {
        match self.init_preset.as_deref().map(FilterFamily::preset) {
            Some(Ok(f)) => f.num_filters(),
            _ => self.filters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestoreConfig {
    /// Model files or preset names (`fd`, `cd3`, `cd4`).
    pub models: Vec<String>,
    /// Degraded PGM inputs; when empty the test dataset is used.
    pub inputs: Vec<PathBuf>,
    /// Ground truths aligned with `inputs`; may be empty.
    pub ground_truth: Vec<PathBuf>,
    pub error_maps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTask {
    pub name: String,
    pub data: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossoverConfig {
    pub models: Vec<PathBuf>,
    /// Evaluation tasks; each uses its own test split.
    pub tasks: Vec<NamedTask>,
    pub presets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    /// Defaults to `data` with a different seed.
    pub test_data: Option<DataConfig>,
    pub foe: FoeConfig,
    pub tvdisc: TvConfig,
    pub restore: RestoreConfig,
    pub crossover: CrossoverConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            test_data: None,
            foe: FoeConfig::default(),
            tvdisc: TvConfig::default(),
            restore: RestoreConfig::default(),
            crossover: CrossoverConfig {
                presets: vec!["fd".into(), "cd3".into(), "cd4".into()],
                ..Default::default()
            },
        }
    }
}

/// Seed offset between a training split and its test split.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn test_data(&self) -> &DataConfig {
        self.test_data.as_ref().unwrap_or(&self.data)
    }

    pub fn train_seed(&self) -> u64 {
        self.seed
    }

    pub fn test_seed(&self) -> u64 {
        self.seed.wrapping_add(TEST_SEED_OFFSET)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate("data")?;
        if let Some(t) = &self.test_data {
            t.validate("test_data")?;
        }
        self.foe.train.validate().map_err(|e| CliError::Config(format!("foe.train: {e}")))?;
        if self.foe.filters == 0 || self.foe.kappa == 0 {
            return Err(CliError::Config("foe: filters and kappa must be positive".into()));
        }
        self.tvdisc
            .train
            .validate()
            .map_err(|e| CliError::Config(format!("tvdisc.train: {e}")))?;
        if let Some(p) = &self.tvdisc.init_preset {
            FilterFamily::preset(p).map_err(|e| CliError::Config(format!("tvdisc.init_preset: {e}")))?;
        } else if self.tvdisc.filters == 0 {
            return Err(CliError::Config("tvdisc.filters must be positive".into()));
        }
        self.tvdisc
            .symmetry
            .check_count(self.tvdisc.init_family_size())
            .map_err(|e| CliError::Config(format!("tvdisc: {e}")))?;
        if !(self.tvdisc.init_variance >= 0.0) {
            return Err(CliError::Config("tvdisc.init_variance must be nonnegative".into()));
        }
        for (i, t) in self.crossover.tasks.iter().enumerate() {
            t.data.validate(&format!("crossover.tasks[{i}]"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"tvdisc": {"train": {"alpah": 1}}}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 5, "data": {"noise": 0.01}}"#).unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.data.noise, 0.01);
        assert_eq!(partial.data.blur, BlurPreset::GaussianC);
    }

    #[test]
    fn missing_directory_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.data.source = Source::Dir {
            dir: "/nonexistent/images".into(),
            patches_per_image: 1,
            patch_size: 8,
        };
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/images"));
    }

    #[test]
    fn rot90_needs_multiples_of_four() {
        let mut cfg = RunConfig::default();
        cfg.tvdisc.symmetry = Symmetry::Rot90;
        cfg.tvdisc.filters = 3;
        assert!(cfg.validate().is_err());
        cfg.tvdisc.filters = 8;
        cfg.validate().unwrap();
    }
}
