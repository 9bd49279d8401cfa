//! Action-constrained reinforcement learning at desk scale.
//!
//! The crate maps policy outputs onto state-dependent feasible action sets
//! (closest-point projection, alpha-projection, radial squashing), provides
//! the log-density corrections needed by entropy-regularized policies, and
//! ships TD3/SAC trainers plus a reproducible experiment harness.

pub mod constraints;
pub mod density;
pub mod envs;
pub mod error;
pub mod harness;
pub mod mappings;
pub mod nn;
pub mod optim;
pub mod rl;

pub use constraints::{
    ActionSpace, Boundary, ConstraintInstance, ConstraintSpec, EllipticalConstraint, Family, JointState,
    LinearConstraints, RayHit,
};
pub use envs::{ConstrainedEnv, Env, EnvConfig, PointMassConfig, ReacherConfig};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, Overrides, RunRecord, RuntimeMeasurement, RuntimeSetup};
pub use mappings::{MappingKind, MappingOutput};
pub use rl::{Agent, PenaltyMode, ReplayBuffer, TrainerConfig, Transition, Variant};

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;
