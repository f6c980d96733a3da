//! qmap: scheme-agnostic diffusion parameter mapping on synthetic data.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`scheme`]: gradient schemes, q-space normalization, shell grouping,
//!   condition-number direction subsets.
//! - [`forward`]: ground-truth sampling, analytic DTI/NODDI signal models,
//!   Monte-Carlo random-walk simulation with PGSE phase accrual, dataset
//!   generation.
//! - [`qmatrix`]: quantized q-space encoding (2D projections or 3D grid)
//!   that makes network inputs independent of gradient scheme and b-value.
//! - [`fit`]: conventional reference reconstructions (log-linear DTI,
//!   grid-plus-refinement NODDI).
//! - [`regressor`]: compact residual conv / MLP regressors trained from
//!   scratch with Adam, plus volume inference.
//! - [`harness`]: NRMSE, exact Wilcoxon rank-sum, experiment orchestration.
//! - [`io`]: binary containers for datasets, network weights, and volumes.

pub mod error;
pub mod fit;
pub mod forward;
pub mod harness;
pub mod io;
pub mod math;
pub mod qmatrix;
pub mod regressor;
pub mod scheme;

pub use error::{QmapError, Result};

use serde::{Deserialize, Serialize};

/// The diffusion model a dataset, network, or map belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dti,
    Noddi,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Dti => 0,
            ModelKind::Noddi => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::Dti),
            1 => Ok(ModelKind::Noddi),
            t => Err(QmapError::Data(format!("unknown model tag {t}"))),
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Dti => &["fa", "md", "ad", "rd"],
            ModelKind::Noddi => &["icvf", "isovf", "odi"],
        }
    }

    pub fn param_dim(self) -> usize {
        self.param_names().len()
    }

    /// Factor mapping network outputs back to map units per channel.
    /// Diffusivities train in 1e-3 mm^2/s so every label is O(1).
    pub fn output_scale(self) -> Vec<f64> {
        match self {
            ModelKind::Dti => vec![1.0, 1e-3, 1e-3, 1e-3],
            ModelKind::Noddi => vec![1.0, 1.0, 1.0],
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = QmapError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dti" => Ok(ModelKind::Dti),
            "noddi" => Ok(ModelKind::Noddi),
            other => Err(QmapError::Config(format!("unknown model `{other}`"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Dti => write!(f, "dti"),
            ModelKind::Noddi => write!(f, "noddi"),
        }
    }
}

/// Model parameters in map units (FA, MD, AD, RD or ICVF, ISOVF, ODI).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub model: ModelKind,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(model: ModelKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != model.param_dim() {
            return Err(QmapError::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                model.param_dim()
            )));
        }
        Ok(ParamVector { model, values })
    }
}
