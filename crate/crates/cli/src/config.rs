//! Run configuration: one TOML file with a section per command.

use std::path::{Path, PathBuf};

use mdscore::egt::EgtConfig;
use mdscore::refmd::{GamdParams, ThermostatConfig};
use mdscore::sampler::SamplerConfig;
use mdscore::sde::DiffusionConfig;
use mdscore::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Overrides `train.optim.seed`.
    pub seed: u64,
    /// Directory receiving every output of the run.
    pub out: PathBuf,
    pub simulate: SimulateSection,
    pub train: TrainSection,
    pub generate: GenerateSection,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("."),
            simulate: SimulateSection::default(),
            train: TrainSection::default(),
            generate: GenerateSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    /// Built-in fixture name or path to a fixture TOML file.
    pub fixture: String,
    pub steps: usize,
    pub record_every: usize,
    /// Integration step; the fixture's own value when absent.
    pub dt: Option<f64>,
    /// Draw starting velocities at this `k_B T` instead of using the fixture's.
    pub temperature: Option<f64>,
    pub thermostat: Option<ThermostatConfig>,
    pub gamd: Option<GamdParams>,
    pub output: String,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            fixture: "harmonic_3d".into(),
            steps: 1000,
            record_every: 1,
            dt: None,
            temperature: None,
            thermostat: None,
            gamd: None,
            output: "trajectory.xyz".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Trajectory files; each one is split into train / validation / test pairs.
    pub data: Vec<PathBuf>,
    /// Training pairs per trajectory; all pairs not held out when absent.
    pub n_train: Option<usize>,
    /// Held-out pairs per trajectory (even), halved into validation and test.
    /// Defaults to about a tenth of the pairs.
    pub n_holdout: Option<usize>,
    pub model: EgtConfig,
    pub diffusion: DiffusionConfig,
    pub optim: TrainConfig,
    pub checkpoint: String,
    pub history: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            data: vec![],
            n_train: None,
            n_holdout: None,
            model: EgtConfig::default(),
            diffusion: DiffusionConfig::default(),
            optim: TrainConfig::default(),
            checkpoint: "model.mdsc".into(),
            history: "history.jsonl".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub checkpoint: Option<PathBuf>,
    /// Trajectory holding the start frame.
    pub start: Option<PathBuf>,
    /// Index of the start frame; the last frame when absent. Earlier frames
    /// are kept as context and copied to the output.
    pub start_frame: Option<usize>,
    pub frames: usize,
    pub sampler: SamplerConfig,
    pub output: String,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            start: None,
            start_frame: None,
            frames: 100,
            sampler: SamplerConfig::default(),
            output: "generated.xyz".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub generated: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    /// First scored frame; the first generated frame when the file says so, else 1.
    pub t1: Option<usize>,
    /// Last scored frame; the last frame both files share when absent.
    pub tn: Option<usize>,
    pub kabsch: bool,
    pub dump_csv: Option<PathBuf>,
    pub output: String,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            generated: None,
            reference: None,
            t1: None,
            tn: None,
            kabsch: false,
            dump_csv: None,
            output: "evaluation.json".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.simulate.thermostat = Some(ThermostatConfig { temperature: 0.1, tau: 0.5, dof: None });
        cfg.train.data = vec!["a.xyz".into()];
        cfg.evaluate.t1 = Some(3);
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[simulate]\nstep = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[train.optim]\nlearning_rate = 1.0").is_err());
    }

    #[test]
    fn partial_sections_take_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 9\n[train.diffusion.schedule]\nsigma_s = 0.5").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.diffusion.schedule.sigma_s, 0.5);
        assert_eq!(cfg.train.diffusion.schedule.a_bar, 1.0);
        assert_eq!(cfg.simulate, SimulateSection::default());
    }
}
