//! Small deterministic environments and the wrapper that binds a constraint
//! family to them.
//!
//! The dynamics are deliberately simple: what matters for the experiments is
//! that joint angles and velocities move around so the feasible sets change
//! from state to state.

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::constraints::{ActionSpace, ConstraintInstance, ConstraintSpec, JointState};
use crate::error::{Error, Result};
use crate::mappings::{map_closest, select_center};
use crate::Vector;

/// Executed actions must satisfy the instance within this tolerance.
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vector,
    pub reward: f64,
    /// The episode ended inside the MDP.
    pub terminated: bool,
    /// The episode was cut by the time limit.
    pub truncated: bool,
}

pub trait Env: Send {
    fn obs_dim(&self) -> usize;
    fn action_space(&self) -> &ActionSpace;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vector;
    fn step(&mut self, action: &Vector) -> Result<Step>;
    fn observe(&self) -> Vector;
    fn joints(&self) -> JointState;
    /// Actions that had to be clipped into the box so far.
    fn clip_count(&self) -> u64;
}

fn check_finite(a: &Vector) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidAction(format!("non-finite action {:?}", a.as_slice())))
    }
}

// ---------------------------------------------------------------------------
// reacher

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReacherConfig {
    pub links: usize,
    pub link_length: f64,
    pub dt: f64,
    pub gain: f64,
    pub damping: f64,
    pub episode_length: usize,
    pub target_radius: [f64; 2],
}

impl Default for ReacherConfig {
    fn default() -> Self {
        Self {
            links: 2,
            link_length: 0.1,
            dt: 0.05,
            gain: 1.0,
            damping: 0.1,
            episode_length: 150,
            target_radius: [0.05, 0.18],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReacherState {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub target: [f64; 2],
    pub t: usize,
}

impl ReacherState {
    pub fn fingertip(&self, link_length: f64) -> [f64; 2] {
        let mut angle = 0.0;
        let mut tip = [0.0; 2];
        for th in &self.theta {
            angle += th;
            tip[0] += link_length * angle.cos();
            tip[1] += link_length * angle.sin();
        }
        tip
    }
}

/// One step of the planar n-link reacher (semi-implicit Euler).
///
/// Returns the next state, the reward and whether the episode is over.
pub fn reacher_step(cfg: &ReacherConfig, state: &ReacherState, action: &Vector) -> Result<(ReacherState, f64, bool)> {
    check_finite(action)?;
    if action.len() != state.theta.len() {
        return Err(Error::DimensionMismatch { expected: state.theta.len(), got: action.len() });
    }
    let mut next = state.clone();
    for i in 0..action.len() {
        next.omega[i] = (1.0 - cfg.damping * cfg.dt) * state.omega[i] + cfg.dt * cfg.gain * action[i];
        next.theta[i] = state.theta[i] + cfg.dt * next.omega[i];
    }
    next.t += 1;
    let tip = next.fingertip(cfg.link_length);
    let dist = (tip[0] - next.target[0]).hypot(tip[1] - next.target[1]);
    let reward = -dist - 0.01 * action.norm_squared();
    let done = next.t >= cfg.episode_length;
    Ok((next, reward, done))
}

pub struct Reacher {
    cfg: ReacherConfig,
    space: ActionSpace,
    state: ReacherState,
    clips: u64,
}

impl Reacher {
    pub fn new(cfg: ReacherConfig) -> Result<Self> {
        if cfg.links == 0 || !(cfg.dt > 0.0) || cfg.episode_length == 0 {
            return Err(Error::Config("reacher needs links > 0, dt > 0 and a positive episode length".into()));
        }
        let n = cfg.links;
        Ok(Self {
            space: ActionSpace::unit(n),
            state: ReacherState { theta: vec![0.0; n], omega: vec![0.0; n], target: [0.1, 0.0], t: 0 },
            clips: 0,
            cfg,
        })
    }

    pub fn state(&self) -> &ReacherState {
        &self.state
    }

    pub fn set_state(&mut self, state: ReacherState) {
        self.state = state;
    }
}

impl Env for Reacher {
    fn obs_dim(&self) -> usize {
        3 * self.cfg.links + 2
    }

    fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vector {
        let n = self.cfg.links;
        let mut theta = vec![0.0; n];
        theta[0] = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        for th in theta.iter_mut().skip(1) {
            *th = rng.random_range(-0.5..0.5);
        }
        let [r_lo, r_hi] = self.cfg.target_radius;
        let r = rng.random_range(r_lo..=r_hi);
        let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        self.state = ReacherState { theta, omega: vec![0.0; n], target: [r * phi.cos(), r * phi.sin()], t: 0 };
        self.observe()
    }

    fn step(&mut self, action: &Vector) -> Result<Step> {
        check_finite(action)?;
        let a = if self.space.contains(action, 0.0) {
            action.clone()
        } else {
            self.clips += 1;
            self.space.clip(action)
        };
        let (next, reward, done) = reacher_step(&self.cfg, &self.state, &a)?;
        self.state = next;
        Ok(Step { obs: self.observe(), reward, terminated: false, truncated: done })
    }

    fn observe(&self) -> Vector {
        let s = &self.state;
        let tip = s.fingertip(self.cfg.link_length);
        let mut obs = Vec::with_capacity(self.obs_dim());
        obs.extend(s.theta.iter().map(|t| t.cos()));
        obs.extend(s.theta.iter().map(|t| t.sin()));
        obs.extend(&s.omega);
        obs.push(tip[0] - s.target[0]);
        obs.push(tip[1] - s.target[1]);
        Vector::from_vec(obs)
    }

    fn joints(&self) -> JointState {
        JointState::new(self.state.theta.clone(), self.state.omega.clone())
    }

    fn clip_count(&self) -> u64 {
        self.clips
    }
}

// ---------------------------------------------------------------------------
// point mass

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointMassConfig {
    pub dim: usize,
    pub dt: f64,
    pub episode_length: usize,
    /// Goals are drawn uniformly from `[-goal_range, goal_range]^dim`.
    pub goal_range: f64,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self { dim: 2, dt: 0.05, episode_length: 100, goal_range: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMassState {
    pub pos: Vec<f64>,
    pub vel: Vec<f64>,
    pub goal: Vec<f64>,
    pub t: usize,
}

/// Double integrator: `v += dt a`, then `p += dt v`.
pub fn pointmass_step(
    cfg: &PointMassConfig,
    state: &PointMassState,
    action: &Vector,
) -> Result<(PointMassState, f64, bool)> {
    check_finite(action)?;
    if action.len() != state.pos.len() {
        return Err(Error::DimensionMismatch { expected: state.pos.len(), got: action.len() });
    }
    let mut next = state.clone();
    for i in 0..action.len() {
        next.vel[i] = state.vel[i] + cfg.dt * action[i];
        next.pos[i] = state.pos[i] + cfg.dt * next.vel[i];
    }
    next.t += 1;
    let dist = next.pos.iter().zip(&next.goal).map(|(p, g)| (p - g).powi(2)).sum::<f64>().sqrt();
    let reward = -dist - 0.01 * action.norm_squared();
    Ok((next.clone(), reward, next.t >= cfg.episode_length))
}

pub struct PointMass {
    cfg: PointMassConfig,
    space: ActionSpace,
    state: PointMassState,
    clips: u64,
}

impl PointMass {
    pub fn new(cfg: PointMassConfig) -> Result<Self> {
        if cfg.dim == 0 || !(cfg.dt > 0.0) || cfg.episode_length == 0 {
            return Err(Error::Config("point mass needs dim > 0, dt > 0 and a positive episode length".into()));
        }
        let d = cfg.dim;
        Ok(Self {
            space: ActionSpace::unit(d),
            state: PointMassState { pos: vec![0.0; d], vel: vec![0.0; d], goal: vec![0.0; d], t: 0 },
            clips: 0,
            cfg,
        })
    }

    pub fn state(&self) -> &PointMassState {
        &self.state
    }

    pub fn set_state(&mut self, state: PointMassState) {
        self.state = state;
    }
}

impl Env for PointMass {
    fn obs_dim(&self) -> usize {
        3 * self.cfg.dim
    }

    fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vector {
        let d = self.cfg.dim;
        let g = self.cfg.goal_range;
        let goal = (0..d).map(|_| rng.random_range(-g..=g)).collect();
        self.state = PointMassState { pos: vec![0.0; d], vel: vec![0.0; d], goal, t: 0 };
        self.observe()
    }

    fn step(&mut self, action: &Vector) -> Result<Step> {
        check_finite(action)?;
        let a = if self.space.contains(action, 0.0) {
            action.clone()
        } else {
            self.clips += 1;
            self.space.clip(action)
        };
        let (next, reward, done) = pointmass_step(&self.cfg, &self.state, &a)?;
        self.state = next;
        Ok(Step { obs: self.observe(), reward, terminated: false, truncated: done })
    }

    fn observe(&self) -> Vector {
        let s = &self.state;
        let mut obs = Vec::with_capacity(self.obs_dim());
        obs.extend(&s.pos);
        obs.extend(&s.vel);
        obs.extend(s.pos.iter().zip(&s.goal).map(|(p, g)| p - g));
        Vector::from_vec(obs)
    }

    /// Positions stand in for angles and velocities for angular velocities.
    fn joints(&self) -> JointState {
        JointState::new(self.state.pos.clone(), self.state.vel.clone())
    }

    fn clip_count(&self) -> u64 {
        self.clips
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    Reacher(ReacherConfig),
    PointMass(PointMassConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Reacher(ReacherConfig::default())
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn Env>> {
        Ok(match self {
            EnvConfig::Reacher(c) => Box::new(Reacher::new(c.clone())?),
            EnvConfig::PointMass(c) => Box::new(PointMass::new(c.clone())?),
        })
    }

    pub fn name(&self) -> String {
        match self {
            EnvConfig::Reacher(c) if c.links == 2 => "reacher".into(),
            EnvConfig::Reacher(c) => format!("reacher{}", c.links),
            EnvConfig::PointMass(_) => "pointmass".into(),
        }
    }
}

// ---------------------------------------------------------------------------
// constraint binding

#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedStep {
    pub obs: Vector,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub pre_map_action: Vector,
    pub executed_action: Vector,
    /// Feasible set at the next state.
    pub instance: Arc<ConstraintInstance>,
}

/// An environment whose every step is checked against the feasible set of
/// the current state.
///
/// With `project_in_env` the wrapper projects the incoming action itself,
/// which makes the projection part of the transition. Otherwise the action
/// must already be feasible and an infeasible one is refused.
pub struct ConstrainedEnv {
    env: Box<dyn Env>,
    spec: ConstraintSpec,
    project_in_env: bool,
    cache_centers: bool,
    instance: Arc<ConstraintInstance>,
    steps: usize,
    violations: u64,
}

impl ConstrainedEnv {
    pub fn new(env: Box<dyn Env>, spec: ConstraintSpec, project_in_env: bool, cache_centers: bool) -> Result<Self> {
        let d = env.action_space().dim();
        let probe = spec.instantiate(env.action_space(), &JointState::new(vec![0.0; d], vec![0.0; d]))?;
        Ok(Self {
            env,
            spec,
            project_in_env,
            cache_centers,
            instance: Arc::new(probe),
            steps: 0,
            violations: 0,
        })
    }

    pub fn env(&self) -> &dyn Env {
        self.env.as_ref()
    }

    pub fn spec(&self) -> &ConstraintSpec {
        &self.spec
    }

    pub fn instance(&self) -> &Arc<ConstraintInstance> {
        &self.instance
    }

    pub fn violations(&self) -> u64 {
        self.violations
    }

    /// Instance for the environment's current joints, with its anchor
    /// attached when centers are cached.
    fn bind(&self) -> Result<ConstraintInstance> {
        let inst = self.spec.instantiate(self.env.action_space(), &self.env.joints())?;
        if self.cache_centers {
            let c = select_center(&inst)?;
            inst.with_center(c)
        } else {
            Ok(inst)
        }
    }

    pub fn reset(&mut self, rng: &mut dyn RngCore) -> Result<Vector> {
        let obs = self.env.reset(rng);
        self.instance = Arc::new(self.bind()?);
        Ok(obs)
    }

    pub fn step(&mut self, action: &Vector) -> Result<ConstrainedStep> {
        let executed = if self.project_in_env && !self.instance.contains(action, 0.0) {
            map_closest(action, &self.instance, false)?.action
        } else {
            action.clone()
        };
        if !self.instance.contains(&executed, FEASIBILITY_TOL) {
            self.violations += 1;
            return Err(Error::FeasibilityViolation { step: self.steps, excess: self.instance.max_violation(&executed) });
        }
        let out = self.env.step(&executed)?;
        self.steps += 1;
        self.instance = Arc::new(self.bind()?);
        Ok(ConstrainedStep {
            obs: out.obs,
            reward: out.reward,
            terminated: out.terminated,
            truncated: out.truncated,
            pre_map_action: action.clone(),
            executed_action: executed,
            instance: Arc::clone(&self.instance),
        })
    }
}
