//! JSON model description and the registry of named built-ins.

use serde::{Deserialize, Serialize};

use super::{Driver, LossFunction, ModelSpec, ObstaclePair, TerminalFunctional, TimeGrid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub horizon: f64,
    pub steps: usize,
    pub obstacles: ObstacleConfig,
    pub loss: LossConfig,
    #[serde(default = "default_driver")]
    pub driver: DriverConfig,
    #[serde(default = "default_terminal")]
    pub terminal: TerminalConfig,
}

fn default_driver() -> DriverConfig {
    DriverConfig::Zero
}

fn default_terminal() -> TerminalConfig {
    TerminalConfig::Affine { c: 1.0, d: 0.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObstacleConfig {
    Constant {
        lower: f64,
        upper: f64,
    },
    /// Linear interpolation in time between start and end values.
    Ramp {
        lower_start: f64,
        lower_end: f64,
        upper_start: f64,
        upper_end: f64,
    },
    /// Explicit node values, one per grid node.
    Sampled {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossConfig {
    Linear {
        a: f64,
        #[serde(default)]
        b: f64,
    },
    SinPerturbed {
        amplitude: f64,
    },
    /// `h(x) = x^3`, with user-declared bounds (never truly bi-Lipschitz).
    Cubic {
        gamma_l: f64,
        gamma_u: f64,
    },
    /// `h(x) = sin x`, non-monotone.
    Sine {
        gamma_l: f64,
        gamma_u: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverConfig {
    Zero,
    Constant {
        value: f64,
    },
    Cosine {
        #[serde(default = "one")]
        scale: f64,
    },
    AffineY {
        slope: f64,
        #[serde(default)]
        cos_scale: f64,
        #[serde(default)]
        constant: f64,
    },
    SinY {
        scale: f64,
        #[serde(default)]
        cos_scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalConfig {
    Affine { c: f64, d: f64 },
    /// `xi = scale * max_k B_k`.
    RunningMax { scale: f64 },
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl ModelConfig {
    /// Builds the model, reporting failures against `prefix` (the JSON path
    /// of this object in the enclosing document).
    pub fn build_at(&self, prefix: &str) -> Result<ModelSpec> {
        let at = |field: &str| {
            if prefix.is_empty() {
                field.to_string()
            } else {
                format!("{prefix}.{field}")
            }
        };
        if self.steps == 0 {
            return Err(config_error(&at("steps"), "TimeGrid requires steps n >= 1"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(config_error(&at("horizon"), "TimeGrid requires a positive finite horizon T"));
        }
        let grid = TimeGrid::new(self.horizon, self.steps)?;
        let obstacles = match &self.obstacles {
            ObstacleConfig::Constant { lower, upper } => ObstaclePair::constant(&grid, *lower, *upper),
            ObstacleConfig::Ramp {
                lower_start,
                lower_end,
                upper_start,
                upper_end,
            } => {
                let t_end = grid.horizon();
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t / t_end;
                ObstaclePair::from_fns(
                    &grid,
                    |t| lerp(*lower_start, *lower_end, t),
                    |t| lerp(*upper_start, *upper_end, t),
                )
            }
            ObstacleConfig::Sampled { lower, upper } => {
                if lower.len() != grid.nodes() || upper.len() != grid.nodes() {
                    return Err(config_error(
                        &at("obstacles"),
                        format!("sampled obstacles need {} values per barrier", grid.nodes()),
                    ));
                }
                ObstaclePair::new(lower.clone(), upper.clone())
            }
        };
        let loss = match &self.loss {
            LossConfig::Linear { a, b } => {
                if !(*a > 0.0) {
                    return Err(config_error(&at("loss.a"), "linear loss requires a > 0"));
                }
                LossFunction::linear(*a, *b)
            }
            LossConfig::SinPerturbed { amplitude } => {
                if !(amplitude.abs() < 1.0) {
                    return Err(config_error(&at("loss.amplitude"), "sin_perturbed requires |amplitude| < 1"));
                }
                LossFunction::sin_perturbed(*amplitude)
            }
            LossConfig::Cubic { gamma_l, gamma_u } => LossFunction::general("x^3", |x| x * x * x, *gamma_l, *gamma_u),
            LossConfig::Sine { gamma_l, gamma_u } => LossFunction::general("sin x", f64::sin, *gamma_l, *gamma_u),
        };
        let driver = match &self.driver {
            DriverConfig::Zero => Driver::zero(),
            DriverConfig::Constant { value } => Driver::constant(*value),
            DriverConfig::Cosine { scale } => Driver::cosine(*scale),
            DriverConfig::AffineY {
                slope,
                cos_scale,
                constant,
            } => Driver::affine_y(*slope, *cos_scale, *constant),
            DriverConfig::SinY { scale, cos_scale } => Driver::sin_y(*scale, *cos_scale),
        };
        let terminal = match &self.terminal {
            TerminalConfig::Affine { c, d } => TerminalFunctional::affine(*c, *d),
            TerminalConfig::RunningMax { scale } => {
                let scale = *scale;
                TerminalFunctional::path_dependent(format!("{scale} max B"), move |path| {
                    scale * path.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                })
            }
        };
        Ok(ModelSpec::new(grid, obstacles, loss, driver, terminal))
    }

    pub fn build(&self) -> Result<ModelSpec> {
        self.build_at("")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(&path, e.into_inner().to_string())
        })
    }
}
