//! The JSON experiment document. Every command reads one and copies it,
//! verbatim in meaning, into its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tif_core::baseline::LinearConfig;
use tif_core::denoiser::{ArchSpec, LayerSubset, OptimConfig};
use tif_core::schedule::LinearScheduleConfig;
use tif_core::tif::WeightScheme;
use tif_core::worldgen::{TestMode, WorldSpec};

use crate::error::{BenchError, BenchResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Classes per task.
    pub k: usize,
    /// Shots per class; one task per entry and seed.
    pub shots: Vec<usize>,
    pub rho: f64,
    pub test_mode: TestMode,
    /// Test images per class.
    pub test_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            k: 4,
            shots: vec![4],
            rho: 1.0,
            test_mode: TestMode::Anti,
            test_size: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub arch: ArchSpec,
    pub pretrain: OptimConfig,
    /// Pretraining pool: every (class, environment) combination this many times.
    pub pool_per_combo: usize,
    pub pretrain_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            arch: ArchSpec::default(),
            pretrain: OptimConfig {
                lr: 0.1,
                momentum: 0.9,
                steps: 10_000,
                batch_size: 64,
                max_grad_norm: Some(1.0),
            },
            pool_per_combo: 8,
            pretrain_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub subset: LayerSubset,
    pub scale: f64,
    pub optim: OptimConfig,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            subset: LayerSubset::new(&["last", "w1"]),
            scale: 1.0,
            optim: OptimConfig {
                lr: 0.05,
                momentum: 0.9,
                steps: 300,
                batch_size: 32,
                max_grad_norm: Some(1.0),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub scheme: WeightScheme,
    pub grid_size: usize,
    pub n_noise: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            scheme: WeightScheme::Tif,
            grid_size: 20,
            n_noise: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub schemes: Vec<WeightScheme>,
    pub ranks: Vec<usize>,
    pub subsets: Vec<LayerSubset>,
    /// Ancestral sampling steps for the per-rank sample sets.
    pub sample_steps: usize,
    pub samples_per_class: usize,
    /// A rank is visually acceptable when its glyph fidelity is within this
    /// many points of the best rank's.
    pub fidelity_slack: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            schemes: vec![
                WeightScheme::Tif,
                WeightScheme::Uniform,
                WeightScheme::SnrGamma(1.0),
                WeightScheme::SnrGamma(0.1),
            ],
            ranks: vec![1, 2, 4, 8],
            subsets: vec![
                LayerSubset::new(&["last"]),
                LayerSubset::new(&["last", "w1"]),
                LayerSubset::new(&["last", "w1", "w0"]),
            ],
            sample_steps: 50,
            samples_per_class: 8,
            fidelity_slack: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvesConfig {
    pub distances: Vec<f64>,
    /// Evenly spaced steps for the error curves; equal to T gives every step.
    pub err_points: usize,
    pub delta_stars: Vec<f64>,
    pub weight_points: usize,
}

impl Default for CurvesConfig {
    fn default() -> Self {
        Self {
            distances: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            err_points: 1000,
            delta_stars: vec![0.1, 1.0, 5.0, 50.0],
            weight_points: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub world: WorldSpec,
    pub schedule: LinearScheduleConfig,
    pub task: TaskConfig,
    pub denoiser: DenoiserConfig,
    pub adapter: AdapterConfig,
    pub baseline: LinearConfig,
    pub inference: InferenceConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub curves: CurvesConfig,
    pub seeds: Vec<u64>,
    /// Used when no `--out` is given on the command line.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let world = WorldSpec::default();
        let denoiser = DenoiserConfig {
            arch: ArchSpec {
                image_len: world.shape.len(),
                ..ArchSpec::default()
            },
            ..DenoiserConfig::default()
        };
        Self {
            schema_version: SCHEMA_VERSION,
            world,
            schedule: LinearScheduleConfig::default(),
            task: TaskConfig::default(),
            denoiser,
            adapter: AdapterConfig::default(),
            baseline: LinearConfig::default(),
            inference: InferenceConfig::default(),
            ablation: AblationConfig::default(),
            curves: CurvesConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> BenchResult<()> {
        let bad = |msg: String| Err(BenchError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.denoiser.arch.image_len != self.world.shape.len() {
            return bad(format!(
                "denoiser.arch.image_len = {} but world images have {} values",
                self.denoiser.arch.image_len,
                self.world.shape.len()
            ));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.task.shots.is_empty() || self.task.shots.contains(&0) {
            return bad("task.shots must be a non-empty list of positive counts".into());
        }
        if self.task.test_size == 0 {
            return bad("task.test_size must be positive".into());
        }
        if self.inference.n_noise == 0 {
            return bad("inference.n_noise must be positive".into());
        }
        self.schedule.build()?;
        self.denoiser.arch.validate()?;
        self.adapter.subset.resolve(&self.denoiser.arch)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> BenchResult<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> BenchResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| BenchError::MissingArtifact {
            path: path.to_path_buf(),
            hint: format!("could not read config: {e}"),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes this config into `dir`, creating the directory.
    pub fn save_into(&self, dir: &Path) -> BenchResult<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), self.to_json() + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn scheme_spelling() {
        let json = serde_json::to_string(&ExperimentConfig::default().ablation.schemes).unwrap();
        assert_eq!(
            json,
            r#"["tif","uniform",{"snr_gamma":1.0},{"snr_gamma":0.1}]"#
        );
    }

    #[test]
    fn rejects_bad_documents() {
        let mut cfg = ExperimentConfig::default();
        cfg.schema_version = 7;
        assert!(ExperimentConfig::from_json(&cfg.to_json()).is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.denoiser.arch.image_len = 10;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.adapter.subset = LayerSubset::new(&["w7"]);
        assert!(cfg.validate().is_err());

        let text = ExperimentConfig::default()
            .to_json()
            .replacen('{', r#"{"surprise": 1,"#, 1);
        assert!(ExperimentConfig::from_json(&text).is_err());
    }
}
