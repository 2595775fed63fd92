//! Pipeline configuration. Every section is optional; unknown keys are
//! rejected.

use nodecert::dynamics_sim::{self, Plant};
use nodecert::nn_model::{Optimizer, StepSchedule, TrainConfig, DEFAULT_EPSILON_MARGIN};
use nodecert::numerics::{self, Mat};
use nodecert::synthesis::SynthesisOptions;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA: &str = include_str!("../schema/pipeline.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PlantConfig {
    Pendulum {
        #[serde(default = "defaults::mass")]
        mass: f64,
        #[serde(default = "defaults::length")]
        length: f64,
        #[serde(default)]
        friction: f64,
        #[serde(default = "defaults::gravity")]
        gravity: f64,
    },
    Vehicle {
        #[serde(default = "defaults::kappa")]
        kappa: f64,
        #[serde(default = "defaults::nu")]
        nu: f64,
    },
    Linear {
        /// Rows of `A`.
        a: Vec<Vec<f64>>,
    },
}

mod defaults {
    pub fn mass() -> f64 {
        0.15
    }
    pub fn length() -> f64 {
        5.0
    }
    pub fn gravity() -> f64 {
        9.81
    }
    pub fn kappa() -> f64 {
        0.5
    }
    pub fn nu() -> f64 {
        1.0
    }
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig::Pendulum {
            mass: defaults::mass(),
            length: defaults::length(),
            friction: 0.0,
            gravity: defaults::gravity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSection {
    pub model: PlantConfig,
    /// Rows of the input matrix `g`; the plant's own when absent.
    pub input: Option<Vec<Vec<f64>>>,
    /// Half-width of a symmetric operating box replacing the default.
    pub box_radius: Option<f64>,
}

impl Default for PlantSection {
    fn default() -> Self {
        Self { model: PlantConfig::default(), input: None, box_radius: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub train_samples: usize,
    pub validation_samples: usize,
    pub seed: u64,
    /// Standard deviation of Gaussian noise added to derivatives.
    pub noise_std: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { train_samples: 2000, validation_samples: 5000, seed: 1, noise_std: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub schedule: StepSchedule,
    /// Multiplier on the largest validation residual when setting `ε`.
    pub epsilon_margin: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            hidden: vec![5],
            epochs: 5000,
            step_size: 1e-2,
            momentum: 0.9,
            batch_size: 128,
            optimizer: Optimizer::Adam,
            schedule: StepSchedule::Cosine,
            epsilon_margin: DEFAULT_EPSILON_MARGIN,
        }
    }
}

impl TrainingSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            step_size: self.step_size,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed,
            optimizer: self.optimizer,
            schedule: self.schedule,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SectorSection {
    /// Per-layer `(α, β)` used instead of interval propagation.
    pub layer_scalars: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub step: f64,
    pub horizon: f64,
    pub initial_conditions: Vec<Vec<f64>>,
    /// Extra initial conditions drawn uniformly from the box.
    pub random_starts: usize,
    pub seed: u64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            step: dynamics_sim::DEFAULT_STEP,
            horizon: dynamics_sim::DEFAULT_HORIZON,
            initial_conditions: Vec::new(),
            random_starts: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub plant: PlantSection,
    pub dataset: DatasetSection,
    pub training: TrainingSection,
    pub sector: SectorSection,
    pub synthesis: SynthesisOptions,
    pub simulation: SimulationSection,
    pub output_dir: Option<String>,
}

fn rows_to_mat(rows: &[Vec<f64>], what: &str) -> Result<Mat, String> {
    numerics::serde_mat::from_rows::<serde_json::Error>(rows.to_vec()).map_err(|e| format!("{what}: {e}"))
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate().map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.plant()?;
        if self.dataset.train_samples == 0 || self.dataset.validation_samples == 0 {
            return Err("dataset sizes must be positive".into());
        }
        if self.training.hidden.is_empty() || self.training.hidden.contains(&0) {
            return Err("training.hidden needs at least one non-empty layer".into());
        }
        if self.training.epsilon_margin < 1.0 {
            return Err("training.epsilon_margin must be at least 1".into());
        }
        if !(self.simulation.step > 0.0) || !(self.simulation.horizon >= 0.0) {
            return Err("simulation step must be positive and horizon non-negative".into());
        }
        let m = self.plant()?.state_dim();
        if let Some(ic) = self.simulation.initial_conditions.iter().find(|ic| ic.len() != m) {
            return Err(format!("initial condition {ic:?} does not have {m} entries"));
        }
        Ok(())
    }

    /// The configured ground-truth plant.
    pub fn plant(&self) -> Result<Plant, String> {
        let sim = |e: dynamics_sim::SimError| e.to_string();
        let mut plant = match &self.plant.model {
            PlantConfig::Pendulum { mass, length, friction, gravity } => {
                dynamics_sim::pendulum_plant(*mass, *length, *friction, *gravity).map_err(sim)?
            }
            PlantConfig::Vehicle { kappa, nu } => dynamics_sim::vehicle_plant(*kappa, *nu).map_err(sim)?,
            PlantConfig::Linear { a } => {
                let a = rows_to_mat(a, "plant.a")?;
                let n = a.nrows();
                let mut g = Mat::zeros(n, 1);
                g[(n - 1, 0)] = 1.0;
                dynamics_sim::linear_plant(a, g, 1.0).map_err(sim)?
            }
        };
        if let Some(g) = &self.plant.input {
            plant = plant.with_input(rows_to_mat(g, "plant.input")?).map_err(sim)?;
        }
        if let Some(r) = self.plant.box_radius {
            if !(r > 0.0) {
                return Err("plant.box_radius must be positive".into());
            }
            let dim = plant.state_dim();
            plant = plant.with_box(nodecert::nn_model::StateBox::symmetric(dim, r)).map_err(sim)?;
        }
        Ok(plant)
    }

    /// Applies `--seed`: training data, training and random starts.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.dataset.seed = s;
            self.simulation.seed = s;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Io(String),
    Invalid(String),
}
