use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::diff::DiffError;
use crate::met::MetError;
use crate::model::ModelError;
use crate::reward::RewardError;
use crate::ssa::SsaError;
use crate::statespace::StateSpaceError;
use crate::tasks::TaskError;

/// Top-level error. [`Error::exit_code`] maps it onto process exit codes:
/// 3 for numerical failures (unstable steps, diverging losses) and I/O
/// failures at run time, 2 for everything caused by bad input.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    StateSpace(#[from] StateSpaceError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Met(#[from] MetError),
    #[error(transparent)]
    Ssa(#[from] SsaError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("incompatible artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the input.
    pub fn is_numerical(&self) -> bool {
        fn ss(e: &StateSpaceError) -> bool {
            matches!(e, StateSpaceError::UnstableStep { .. })
        }
        fn rw(e: &RewardError) -> bool {
            match e {
                RewardError::DivergedLoss { .. } | RewardError::PretrainStalled(_) => true,
                RewardError::StateSpace(s) => ss(s),
                _ => false,
            }
        }
        fn met(e: &MetError) -> bool {
            match e {
                MetError::DivergedLoss { .. } => true,
                MetError::StateSpace(s) => ss(s),
                MetError::Reward(r) => rw(r),
                _ => false,
            }
        }
        match self {
            Error::Numerical(_) => true,
            Error::StateSpace(e) => ss(e),
            Error::Reward(e) => rw(e),
            Error::Met(e) => met(e),
            Error::Task(TaskError::Met(e)) => met(e),
            _ => false,
        }
    }

    fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::StateSpace(StateSpaceError::Io(_))
                | Error::Reward(RewardError::Io(_))
                | Error::Met(MetError::Io(_))
                | Error::Ssa(SsaError::Io(_))
                | Error::Diff(DiffError::Io(_))
        )
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() || self.is_io() {
            3
        } else {
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let unstable = StateSpaceError::UnstableStep {
            dt: 1.0,
            rate: 2.0,
            state: vec![0],
        };
        assert_eq!(Error::from(unstable).exit_code(), 3);
        let diverged = MetError::DivergedLoss {
            step: 1,
            kl: 100.0,
            limit: 50.0,
            updates: 3,
        };
        assert_eq!(Error::from(diverged).exit_code(), 3);
        let missing = RewardError::Set {
            path: "runs/set.json".into(),
            message: "missing".into(),
        };
        assert_eq!(Error::from(missing).exit_code(), 2);
        assert_eq!(Error::from(ModelError::MissingRate("k".into())).exit_code(), 2);
    }
}
