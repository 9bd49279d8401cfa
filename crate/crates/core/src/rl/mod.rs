//! TD3 and SAC trainers for action-constrained control.
//!
//! A [`Variant`] fixes which action the critic sees, which mapping turns
//! policy output into a feasible action, how the actor gradient treats that
//! mapping, and whether constraint violations are penalized.

mod agent;
mod buffer;

use serde::{Deserialize, Serialize};

pub use agent::{Action, Agent, Checkpoint, Counters, UpdateStats};
pub use buffer::{ReplayBuffer, Transition};

use crate::constraints::ConstraintInstance;
use crate::density::BoundaryDensityOptions;
use crate::error::{Error, Result};
use crate::mappings::MappingKind;
use crate::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    DPro,
    #[serde(rename = "DPro+")]
    DProPlus,
    DPre,
    #[serde(rename = "DPre+")]
    DPrePlus,
    DOpt,
    #[serde(rename = "DOpt+")]
    DOptPlus,
    #[serde(rename = "NFW")]
    Nfw,
    DAlpha,
    DRad,
    SPre,
    #[serde(rename = "SPre+")]
    SPrePlus,
    SAlpha,
    SRad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Base {
    Td3,
    Sac,
}

/// How the actor update treats the mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActorGradient {
    /// Critic gradient at the raw policy output.
    Plain,
    /// Critic gradient at the mapped action, pulled back through the
    /// mapping's Jacobian.
    MappingJacobian,
    /// Regression onto a Frank-Wolfe reference action.
    Regression,
    /// Reparametrized entropy-regularized objective.
    Reparam,
}

impl Variant {
    pub const ALL: [Variant; 13] = [
        Variant::DPro,
        Variant::DProPlus,
        Variant::DPre,
        Variant::DPrePlus,
        Variant::DOpt,
        Variant::DOptPlus,
        Variant::Nfw,
        Variant::DAlpha,
        Variant::DRad,
        Variant::SPre,
        Variant::SPrePlus,
        Variant::SAlpha,
        Variant::SRad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DPro => "DPro",
            Variant::DProPlus => "DPro+",
            Variant::DPre => "DPre",
            Variant::DPrePlus => "DPre+",
            Variant::DOpt => "DOpt",
            Variant::DOptPlus => "DOpt+",
            Variant::Nfw => "NFW",
            Variant::DAlpha => "DAlpha",
            Variant::DRad => "DRad",
            Variant::SPre => "SPre",
            Variant::SPrePlus => "SPre+",
            Variant::SAlpha => "SAlpha",
            Variant::SRad => "SRad",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }

    pub fn base(self) -> Base {
        match self {
            Variant::SPre | Variant::SPrePlus | Variant::SAlpha | Variant::SRad => Base::Sac,
            _ => Base::Td3,
        }
    }

    /// The critic is trained on the suggestion before mapping; the
    /// projection then happens inside the environment transition.
    pub fn critic_on_pre_map(self) -> bool {
        matches!(self, Variant::DPre | Variant::DPrePlus | Variant::SPre | Variant::SPrePlus)
    }

    pub fn mapping(self) -> MappingKind {
        match self {
            Variant::DAlpha | Variant::SAlpha => MappingKind::AlphaProjection,
            Variant::DRad | Variant::SRad => MappingKind::RadialSquashing,
            _ => MappingKind::ClosestPoint,
        }
    }

    pub fn actor_gradient(self) -> ActorGradient {
        match self {
            Variant::DPro | Variant::DProPlus | Variant::DPre | Variant::DPrePlus => ActorGradient::Plain,
            Variant::DOpt | Variant::DOptPlus | Variant::DAlpha | Variant::DRad => ActorGradient::MappingJacobian,
            Variant::Nfw => ActorGradient::Regression,
            Variant::SPre | Variant::SPrePlus | Variant::SAlpha | Variant::SRad => ActorGradient::Reparam,
        }
    }

    pub fn penalized(self) -> bool {
        matches!(self, Variant::DProPlus | Variant::DPrePlus | Variant::DOptPlus | Variant::SPrePlus)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// Where the violation penalty of the "+" variants enters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// Subtracted from the reward stored for training.
    Reward,
    /// Added to the actor loss at the policy output.
    ActorLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyCoef {
    /// Tuned toward the target entropy, starting from `init`.
    Auto { init: f64 },
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub buffer_size: usize,
    pub hidden: Vec<usize>,
    /// Environment steps taken with random feasible actions before learning.
    pub learning_starts: usize,
    /// Environment steps between rounds of gradient updates.
    pub train_freq: usize,
    pub gradient_steps: usize,
    /// Critic updates per actor (and target) update; TD3 only.
    pub policy_delay: usize,
    pub action_noise: f64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    /// Frank-Wolfe step size for the reference action.
    pub fw_rate: f64,
    pub ent_coef: EntropyCoef,
    /// Defaults to `-d`.
    pub target_entropy: Option<f64>,
    pub penalty_mode: PenaltyMode,
    pub penalty_coef: f64,
    /// Map the target policy's next action before the critic sees it, for
    /// variants whose critic is trained on executed actions.
    pub project_target_action: bool,
    pub boundary_density: BoundaryDensityOptions,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self::td3()
    }
}

impl TrainerConfig {
    pub fn td3() -> Self {
        Self {
            gamma: 0.98,
            tau: 0.005,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            batch_size: 64,
            buffer_size: 100_000,
            hidden: vec![64, 64],
            learning_starts: 1_000,
            train_freq: 1,
            gradient_steps: 1,
            policy_delay: 2,
            action_noise: 0.1,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            fw_rate: 0.05,
            ent_coef: EntropyCoef::Auto { init: 1.0 },
            target_entropy: None,
            penalty_mode: PenaltyMode::Reward,
            penalty_coef: 1.0,
            project_target_action: true,
            boundary_density: BoundaryDensityOptions::default(),
        }
    }

    pub fn sac() -> Self {
        Self { tau: 0.02, actor_lr: 7.3e-4, critic_lr: 7.3e-4, policy_delay: 1, ..Self::td3() }
    }

    pub fn for_base(base: Base) -> Self {
        match base {
            Base::Td3 => Self::td3(),
            Base::Sac => Self::sac(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("trainer: {what}")));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.buffer_size == 0 || self.train_freq == 0 || self.policy_delay == 0 {
            return bad("batch size, buffer size, train frequency and policy delay must be positive");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(0.0..=1.0).contains(&self.fw_rate) {
            return bad("fw_rate must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Training reward for a transition. Only the "+" variants in reward mode
/// subtract the violation of the suggestion; evaluation never calls this.
pub fn apply_penalty(
    variant: Variant,
    cfg: &TrainerConfig,
    reward: f64,
    pre_map_action: &Vector,
    inst: &ConstraintInstance,
) -> f64 {
    if variant.penalized() && cfg.penalty_mode == PenaltyMode::Reward {
        reward - cfg.penalty_coef * inst.violation_penalty(pre_map_action)
    } else {
        reward
    }
}
