//! Crate-wide error with module-qualified codes for the command line.

use thiserror::Error;

use crate::adjoint::AdjointError;
use crate::farm::FarmError;
use crate::layout::LayoutError;
use crate::mesh::MeshError;
use crate::optimizer::OptimizeError;
use crate::scenario::ScenarioError;
use crate::shallow_water::SolverError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Farm(#[from] FarmError),
    #[error(transparent)]
    Adjoint(#[from] AdjointError),
    #[error(transparent)]
    Optimizer(#[from] OptimizeError<AdjointError>),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    /// A verification run that completed but did not pass.
    #[error("{message}")]
    Check { code: &'static str, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Stable `module.kind` code.
    pub fn code(&self) -> String {
        let solver = |e: &SolverError| match e {
            SolverError::Invalid(_) => "invalid",
            SolverError::Divergence { .. } => "divergence",
            SolverError::Linear { .. } => "linear",
            SolverError::TrajectoryTooLong { .. } => "trajectory_too_long",
        };
        let (module, kind) = match self {
            Self::Scenario(e) => (
                "scenario",
                match e {
                    ScenarioError::Io { .. } => "io",
                    ScenarioError::Parse(_) => "parse",
                    ScenarioError::Invalid { .. } => "invalid",
                },
            ),
            Self::Mesh(e) => (
                "mesh",
                match e {
                    MeshError::Parse { .. } => "parse",
                    MeshError::Validation { .. } => "invalid",
                    MeshError::Generation(_) => "generation",
                },
            ),
            Self::Solver(e) => ("shallow_water", solver(e)),
            Self::Farm(e) => (
                "farm",
                match e {
                    FarmError::Invalid(_) => "invalid",
                    FarmError::Parse { .. } => "parse",
                },
            ),
            Self::Adjoint(AdjointError::Forward(e)) => ("shallow_water", solver(e)),
            Self::Adjoint(AdjointError::Farm(_)) => ("farm", "invalid"),
            Self::Adjoint(e) => (
                "adjoint",
                match e {
                    AdjointError::Singular { .. } => "singular",
                    AdjointError::Residual { .. } => "residual",
                    _ => "invalid",
                },
            ),
            Self::Optimizer(e) => (
                "optimizer",
                match e {
                    OptimizeError::Invalid(_) => "invalid",
                    OptimizeError::NonFinite { .. } => "non_finite",
                    OptimizeError::Evaluation { .. } => "evaluation",
                },
            ),
            Self::Layout(e) => (
                "layout",
                match e {
                    LayoutError::Invalid(_) => "invalid",
                    LayoutError::PackingInfeasible { .. } => "packing_infeasible",
                    LayoutError::UnderResolved { .. } => "under_resolved",
                    LayoutError::Solver(_) => "solver",
                    LayoutError::Parse { .. } => "parse",
                },
            ),
            Self::Check { code, .. } => return code.to_string(),
            Self::Io { .. } => ("cli", "io"),
        };
        format!("{module}.{kind}")
    }
}
