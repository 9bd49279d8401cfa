use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ActorGradient, Base, EntropyCoef, PenaltyMode, ReplayBuffer, TrainerConfig, Transition, Variant};
use crate::constraints::{ActionSpace, ConstraintInstance};
use crate::density::{
    alpha_parts, radial_parts, squashed_gaussian_parts, GaussianHead, LogProbParts, LOG_STD_MAX, LOG_STD_MIN,
};
use crate::error::{Error, Result};
use crate::mappings::{log_sech2, select_center, squash_box, MappingKind, MappingOutput};
use crate::nn::{Activation, AdamState, Gradients, Mlp};
use crate::optim::linear_maximize;
use crate::{Matrix, Vector};

/// What the policy did in one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub pre_map: Vector,
    pub executed: Vector,
    /// Log-density of the executed action (stochastic policies only).
    pub log_prob: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub critic_updates: u64,
    pub actor_updates: u64,
    /// Batch samples whose projection Jacobian was undefined and that
    /// contributed no actor gradient.
    pub degenerate_jacobians: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub mean_log_prob: Option<f64>,
}

/// One reparametrized sample pushed through a stochastic variant's pipeline.
struct SacSample {
    pre_map: Vector,
    executed: Vector,
    critic_action: Vector,
    parts: LogProbParts,
    /// Derivative of `critic_action` in the Gaussian sample.
    dcritic_dx: Matrix,
}

/// Trainer state for one variant: networks, targets, optimizer moments and
/// the noise stream.
#[derive(Clone)]
pub struct Agent {
    variant: Variant,
    cfg: TrainerConfig,
    space: ActionSpace,
    obs_dim: usize,
    actor: Mlp,
    actor_target: Mlp,
    critics: [Mlp; 2],
    critic_targets: [Mlp; 2],
    actor_opt: AdamState,
    critic_opts: [AdamState; 2],
    log_alpha: f64,
    alpha_opt: AdamState,
    target_entropy: f64,
    rng: ChaCha8Rng,
    counters: Counters,
}

fn columns<'a>(batch: &[&'a Transition], rows: usize, f: impl Fn(&'a Transition) -> &'a Vector) -> Matrix {
    let mut m = Matrix::zeros(rows, batch.len());
    for (k, t) in batch.iter().enumerate() {
        m.set_column(k, f(t));
    }
    m
}

fn stack(top: &Matrix, bottom: &Matrix) -> Matrix {
    let (r1, r2) = (top.nrows(), bottom.nrows());
    Matrix::from_fn(r1 + r2, top.ncols(), |r, c| if r < r1 { top[(r, c)] } else { bottom[(r - r1, c)] })
}

/// Anchor of the instance, preferring the cached one.
fn anchor(inst: &ConstraintInstance) -> Result<Vector> {
    match inst.center() {
        Some(c) => Ok(c.clone()),
        None => select_center(inst),
    }
}

/// `d(a_max tanh(u)) / du` per coordinate.
fn squash_slope(u: &Vector, space: &ActionSpace) -> Vector {
    Vector::from_iterator(u.len(), u.iter().zip(space.a_max()).map(|(x, m)| m * log_sech2(*x).exp()))
}

impl Agent {
    /// Networks are initialized from `init_seed`; exploration, target
    /// smoothing and reparametrization noise come from `noise_seed`.
    pub fn new(
        variant: Variant,
        obs_dim: usize,
        space: ActionSpace,
        cfg: TrainerConfig,
        init_seed: u64,
        noise_seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = space.dim();
        let mut init = ChaCha8Rng::seed_from_u64(init_seed);
        let out = match variant.base() {
            Base::Td3 => d,
            Base::Sac => 2 * d,
        };
        let widths = |inp: usize, out: usize| {
            let mut w = vec![inp];
            w.extend(&cfg.hidden);
            w.push(out);
            w
        };
        let actor = Mlp::new(&widths(obs_dim, out), Activation::Relu, Activation::Identity, &mut init);
        let critics = [
            Mlp::new(&widths(obs_dim + d, 1), Activation::Relu, Activation::Identity, &mut init),
            Mlp::new(&widths(obs_dim + d, 1), Activation::Relu, Activation::Identity, &mut init),
        ];
        let (log_alpha, target_entropy) = match cfg.ent_coef {
            EntropyCoef::Auto { init } | EntropyCoef::Fixed(init) => {
                if !(init > 0.0) {
                    return Err(Error::Config("entropy coefficient must be positive".into()));
                }
                (init.ln(), cfg.target_entropy.unwrap_or(-(d as f64)))
            }
        };
        Ok(Self {
            actor_opt: AdamState::for_net(&actor, cfg.actor_lr),
            critic_opts: [AdamState::for_net(&critics[0], cfg.critic_lr), AdamState::for_net(&critics[1], cfg.critic_lr)],
            alpha_opt: AdamState::new(1, cfg.actor_lr),
            actor_target: actor.clone(),
            critic_targets: critics.clone(),
            actor,
            critics,
            log_alpha,
            target_entropy,
            rng: ChaCha8Rng::seed_from_u64(noise_seed),
            counters: Counters::default(),
            variant,
            cfg,
            space,
            obs_dim,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn set_actor(&mut self, actor: Mlp) -> Result<()> {
        if actor.widths() != self.actor.widths() {
            return Err(Error::Config("actor widths do not match".into()));
        }
        self.actor = actor;
        Ok(())
    }

    pub fn critics(&self) -> &[Mlp; 2] {
        &self.critics
    }

    pub fn critic_targets(&self) -> &[Mlp; 2] {
        &self.critic_targets
    }

    pub fn actor_target(&self) -> &Mlp {
        &self.actor_target
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    fn d(&self) -> usize {
        self.space.dim()
    }

    /// The variant's mapping. When the feasible set is the box and the
    /// action already lies in it, every mapping is skipped; the returned flag
    /// says so.
    pub fn map_action(&self, a: &Vector, inst: &ConstraintInstance, want_jacobian: bool) -> Result<(MappingOutput, bool)> {
        if inst.is_box_only() && inst.space().contains(a, 0.0) {
            return Ok((MappingKind::Identity.apply(a, inst, a, false)?, true));
        }
        let kind = self.variant.mapping();
        let c = if kind.uses_center() { anchor(inst)? } else { Vector::zeros(a.len()) };
        Ok((kind.apply(a, inst, &c, want_jacobian)?, false))
    }

    fn head_of(&self, raw: &Vector) -> (GaussianHead, Vec<bool>) {
        let d = self.d();
        let mean = raw.rows(0, d).into_owned();
        let log_std = raw.rows(d, d).into_owned();
        let live = log_std.iter().map(|s| (LOG_STD_MIN..=LOG_STD_MAX).contains(s)).collect();
        (GaussianHead::new(mean, log_std), live)
    }

    fn normal_vec(&mut self, d: usize) -> Vector {
        Vector::from_fn(d, |_, _| self.rng.sample::<f64, _>(StandardNormal))
    }

    /// With `need_executed` false, variants whose critic sees the suggestion
    /// skip the projection and report the suggestion as executed.
    fn sac_sample(&self, head: &GaussianHead, x: &Vector, inst: &ConstraintInstance, need_executed: bool) -> Result<SacSample> {
        let space = &self.space;
        match self.variant.mapping() {
            MappingKind::AlphaProjection => {
                let c = anchor(inst)?;
                let (parts, out, _) = alpha_parts(head, x, inst, &c, &self.cfg.boundary_density)?;
                let d = x.len();
                Ok(SacSample {
                    pre_map: x.clone(),
                    critic_action: out.action.clone(),
                    executed: out.action,
                    parts,
                    dcritic_dx: out.jacobian.unwrap_or_else(|| Matrix::identity(d, d)),
                })
            }
            MappingKind::RadialSquashing if !inst.is_box_only() => {
                let c = anchor(inst)?;
                let (parts, out) = radial_parts(head, x, inst, &c)?;
                let slope = Matrix::from_diagonal(&squash_slope(x, space));
                let jac = out.jacobian.as_ref().map(|j| j * &slope).unwrap_or(slope);
                Ok(SacSample {
                    pre_map: squash_box(x, space),
                    critic_action: out.action.clone(),
                    executed: out.action,
                    parts,
                    dcritic_dx: jac,
                })
            }
            _ => {
                let pre = squash_box(x, space);
                let skip = !need_executed && self.variant.critic_on_pre_map();
                let executed = if skip { pre.clone() } else { self.map_action(&pre, inst, false)?.0.action };
                let critic_action = if self.variant.critic_on_pre_map() { pre.clone() } else { executed.clone() };
                Ok(SacSample {
                    parts: squashed_gaussian_parts(head, x, space),
                    dcritic_dx: Matrix::from_diagonal(&squash_slope(x, space)),
                    pre_map: pre,
                    executed,
                    critic_action,
                })
            }
        }
    }

    /// Policy action at `obs`. Exploration draws from the agent's noise
    /// stream; without it the call is a pure function of the parameters.
    pub fn act(&mut self, obs: &Vector, inst: &ConstraintInstance, explore: bool) -> Result<Action> {
        let d = self.d();
        let raw = self.actor.predict(obs)?;
        match self.variant.base() {
            Base::Td3 => {
                let mut a = squash_box(&raw, &self.space);
                if explore {
                    let noise = self.normal_vec(d);
                    for i in 0..d {
                        a[i] += self.cfg.action_noise * self.space.a_max()[i] * noise[i];
                    }
                    a = self.space.clip(&a);
                }
                let executed = self.map_action(&a, inst, false)?.0.action;
                Ok(Action { pre_map: a, executed, log_prob: None })
            }
            Base::Sac => {
                let (head, _) = self.head_of(&raw);
                let x = if explore {
                    let eps = self.normal_vec(d);
                    head.sample(&eps)
                } else {
                    head.mean.clone()
                };
                let s = self.sac_sample(&head, &x, inst, true)?;
                Ok(Action { pre_map: s.pre_map, executed: s.executed, log_prob: Some(s.parts.value) })
            }
        }
    }

    /// Deterministic action used for evaluation; touches no state.
    pub fn greedy_action(&self, obs: &Vector, inst: &ConstraintInstance) -> Result<Action> {
        let raw = self.actor.predict(obs)?;
        match self.variant.base() {
            Base::Td3 => {
                let a = squash_box(&raw, &self.space);
                let executed = self.map_action(&a, inst, false)?.0.action;
                Ok(Action { pre_map: a, executed, log_prob: None })
            }
            Base::Sac => {
                let (head, _) = self.head_of(&raw);
                let s = self.sac_sample(&head, &head.mean, inst, true)?;
                Ok(Action { pre_map: s.pre_map, executed: s.executed, log_prob: Some(s.parts.value) })
            }
        }
    }

    /// Warmup action: uniform in the box, then mapped.
    pub fn random_action(&mut self, inst: &ConstraintInstance) -> Result<Action> {
        let d = self.d();
        let b = Vector::from_fn(d, |i, _| {
            let m = self.space.a_max()[i];
            self.rng.random_range(-m..m)
        });
        let executed = self.map_action(&b, inst, false)?.0.action;
        Ok(Action { pre_map: b, executed, log_prob: None })
    }

    /// One round of the update schedule on a sampled minibatch.
    pub fn train_step(&mut self, buffer: &mut ReplayBuffer) -> Result<UpdateStats> {
        let idx = buffer.sample_indices(self.cfg.batch_size);
        let batch: Vec<&Transition> = idx.iter().map(|&i| buffer.get(i)).collect();
        self.update(&batch)
    }

    /// Critic update, then actor and target updates when due.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<UpdateStats> {
        let critic_loss = self.critic_update(batch)?;
        let due = match self.variant.base() {
            Base::Td3 => self.counters.critic_updates % self.cfg.policy_delay as u64 == 0,
            Base::Sac => true,
        };
        let mut stats = UpdateStats { critic_loss, actor_loss: None, mean_log_prob: None };
        if due {
            let (loss, logp) = self.actor_update(batch)?;
            stats.actor_loss = Some(loss);
            stats.mean_log_prob = logp;
            self.update_targets();
        }
        Ok(stats)
    }

    fn update_targets(&mut self) {
        let tau = self.cfg.tau;
        for j in 0..2 {
            self.critic_targets[j].polyak_update(&self.critics[j], tau);
        }
        if self.variant.base() == Base::Td3 {
            self.actor_target.polyak_update(&self.actor, tau);
        }
    }

    /// Clipped double-Q regression toward the one-step target. Returns the
    /// summed mean squared errors of both critics.
    pub fn critic_update(&mut self, batch: &[&Transition]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let y = self.td_targets(batch)?;
        let b = batch.len();
        let obs = columns(batch, self.obs_dim, |t| &t.obs);
        let input = stack(&obs, &self.critic_actions(batch));
        let mut loss = 0.0;
        for j in 0..2 {
            let (q, tape) = self.critics[j].forward(&input)?;
            let diff = Matrix::from_fn(1, b, |_, k| q[(0, k)] - y[k]);
            loss += diff.norm_squared() / b as f64;
            let grads = self.critics[j].backward(&tape, &(diff * (2.0 / b as f64)), None)?;
            self.critics[j].adam_step(&grads, &mut self.critic_opts[j])?;
        }
        self.counters.critic_updates += 1;
        Ok(loss)
    }

    /// Stored actions the critic is trained on, one column per sample.
    pub fn critic_actions(&self, batch: &[&Transition]) -> Matrix {
        let pre = self.variant.critic_on_pre_map();
        columns(batch, self.d(), |t| if pre { &t.pre_map_action } else { &t.executed_action })
    }

    /// `y = r + gamma (1 - done) (min_j Q'_j(s', a') - alpha log pi(a'|s'))`,
    /// the entropy term only for the stochastic variants.
    pub fn td_targets(&mut self, batch: &[&Transition]) -> Result<Vec<f64>> {
        let b = batch.len();
        let d = self.d();
        let next_obs = columns(batch, self.obs_dim, |t| &t.next_obs);
        let mut next_act = Matrix::zeros(d, b);
        let mut entropy = vec![0.0; b];
        match self.variant.base() {
            Base::Td3 => {
                let (u, _) = self.actor_target.forward(&next_obs)?;
                let clip = self.cfg.target_noise_clip;
                for (k, t) in batch.iter().enumerate() {
                    let mut uk = u.column(k).into_owned();
                    let noise = self.normal_vec(d);
                    for i in 0..d {
                        uk[i] += (self.cfg.target_noise * noise[i]).clamp(-clip, clip);
                    }
                    let a = squash_box(&uk, &self.space);
                    let a = if self.variant.critic_on_pre_map() || !self.cfg.project_target_action {
                        a
                    } else {
                        self.map_action(&a, &t.next_instance, false)?.0.action
                    };
                    next_act.set_column(k, &a);
                }
            }
            Base::Sac => {
                let (raw, _) = self.actor.forward(&next_obs)?;
                let alpha = self.alpha();
                for (k, t) in batch.iter().enumerate() {
                    let (head, _) = self.head_of(&raw.column(k).into_owned());
                    let eps = self.normal_vec(d);
                    let s = self.sac_sample(&head, &head.sample(&eps), &t.next_instance, false)?;
                    next_act.set_column(k, &s.critic_action);
                    entropy[k] = alpha * s.parts.value;
                }
            }
        }
        let input = stack(&next_obs, &next_act);
        let q1 = self.critic_targets[0].forward(&input)?.0;
        let q2 = self.critic_targets[1].forward(&input)?.0;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let not_done = if t.done { 0.0 } else { 1.0 };
                t.reward + self.cfg.gamma * not_done * (q1[(0, k)].min(q2[(0, k)]) - entropy[k])
            })
            .collect())
    }

    /// Gradient of the first critic with respect to the action, one column
    /// per sample, scaled by `scale`.
    fn critic_action_grad(&self, obs: &Matrix, acts: &Matrix, scale: f64) -> Result<(Matrix, Matrix)> {
        let input = stack(obs, acts);
        let (q, tape) = self.critics[0].forward(&input)?;
        let up = Matrix::from_element(1, acts.ncols(), scale);
        let g = self.critics[0].backward(&tape, &up, None)?.input;
        Ok((q, g.rows(self.obs_dim, self.d()).into_owned()))
    }

    /// Actor step for the variant. Returns the loss and, for stochastic
    /// variants, the mean log-probability of the reparametrized samples.
    pub fn actor_update(&mut self, batch: &[&Transition]) -> Result<(f64, Option<f64>)> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let out = match self.variant.actor_gradient() {
            ActorGradient::Reparam => self.sac_actor_update(batch).map(|(l, p)| (l, Some(p))),
            _ => self.deterministic_actor_update(batch).map(|l| (l, None)),
        }?;
        self.counters.actor_updates += 1;
        Ok(out)
    }

    /// Loss and parameter gradient of the deterministic actor objective on
    /// `batch`, with the count of samples dropped for a degenerate Jacobian.
    /// Nothing is updated. TD3-based variants only.
    pub fn actor_gradient(&self, batch: &[&Transition]) -> Result<(f64, Gradients, u64)> {
        if self.variant.base() != Base::Td3 {
            return Err(Error::Config(format!("{} has a stochastic actor", self.variant)));
        }
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        self.deterministic_actor_grads(batch)
    }

    fn penalty_in_loss(&self) -> bool {
        self.variant.penalized() && self.cfg.penalty_mode == PenaltyMode::ActorLoss
    }

    fn deterministic_actor_update(&mut self, batch: &[&Transition]) -> Result<f64> {
        let (loss, grads, degenerate) = self.deterministic_actor_grads(batch)?;
        self.counters.degenerate_jacobians += degenerate;
        self.actor.adam_step(&grads, &mut self.actor_opt)?;
        Ok(loss)
    }

    /// Loss and parameter gradient of the deterministic actor objective,
    /// with the number of samples dropped for an undefined Jacobian.
    fn deterministic_actor_grads(&self, batch: &[&Transition]) -> Result<(f64, Gradients, u64)> {
        let b = batch.len();
        let bf = b as f64;
        let d = self.d();
        let obs = columns(batch, self.obs_dim, |t| &t.obs);
        let (u, tape) = self.actor.forward(&obs)?;
        let mut mu = Matrix::zeros(d, b);
        let mut slope = Matrix::zeros(d, b);
        for k in 0..b {
            let uk = u.column(k).into_owned();
            mu.set_column(k, &squash_box(&uk, &self.space));
            slope.set_column(k, &squash_slope(&uk, &self.space));
        }

        let mut dmu = Matrix::zeros(d, b);
        let mut degenerate = 0;
        let mut loss;
        match self.variant.actor_gradient() {
            ActorGradient::Plain => {
                let (q, g) = self.critic_action_grad(&obs, &mu, -1.0 / bf)?;
                loss = -q.mean();
                dmu = g;
            }
            ActorGradient::MappingJacobian => {
                let mut mapped = Matrix::zeros(d, b);
                let mut jacs: Vec<Option<Matrix>> = Vec::with_capacity(b);
                let mut dead = vec![false; b];
                for (k, t) in batch.iter().enumerate() {
                    let (out, identity) = self.map_action(&mu.column(k).into_owned(), &t.instance, true)?;
                    mapped.set_column(k, &out.action);
                    match (identity, out.jacobian) {
                        (true, _) => jacs.push(None),
                        (false, Some(j)) => jacs.push(Some(j)),
                        (false, None) => {
                            dead[k] = true;
                            degenerate += 1;
                            jacs.push(None);
                        }
                    }
                }
                let (q, g) = self.critic_action_grad(&obs, &mapped, -1.0 / bf)?;
                loss = -q.mean();
                for k in 0..b {
                    if dead[k] {
                        continue;
                    }
                    let gk = g.column(k).into_owned();
                    match &jacs[k] {
                        Some(j) => dmu.set_column(k, &(j.transpose() * gk)),
                        None => dmu.set_column(k, &gk),
                    }
                }
            }
            ActorGradient::Regression => {
                let mut projected = Matrix::zeros(d, b);
                for (k, t) in batch.iter().enumerate() {
                    let out = self.map_action(&mu.column(k).into_owned(), &t.instance, false)?.0;
                    projected.set_column(k, &out.action);
                }
                let (_, g) = self.critic_action_grad(&obs, &projected, 1.0)?;
                loss = 0.0;
                for (k, t) in batch.iter().enumerate() {
                    let mk = mu.column(k).into_owned();
                    let target = self.reference_from(
                        &mk,
                        &projected.column(k).into_owned(),
                        &g.column(k).into_owned(),
                        &t.instance,
                    )?;
                    let diff = &mk - target;
                    loss += diff.norm_squared() / bf;
                    dmu.set_column(k, &(diff * (2.0 / bf)));
                }
            }
            ActorGradient::Reparam => unreachable!("stochastic variants use their own update"),
        }
        if self.penalty_in_loss() {
            let coef = self.cfg.penalty_coef / bf;
            for (k, t) in batch.iter().enumerate() {
                let mk = mu.column(k).into_owned();
                loss += coef * t.instance.violation_penalty(&mk);
                let g = t.instance.violation_penalty_grad(&mk) * coef;
                let mut col = dmu.column_mut(k);
                col += g;
            }
        }
        let du = dmu.component_mul(&slope);
        let grads = self.actor.backward(&tape, &du, None)?;
        Ok((loss, grads, degenerate))
    }

    /// `P(mu + rate (c - P(mu)))` with `c` maximizing the critic gradient
    /// over the feasible set.
    fn reference_from(&self, mu: &Vector, projected: &Vector, grad: &Vector, inst: &ConstraintInstance) -> Result<Vector> {
        let vertex = linear_maximize(grad, inst)?;
        let step = mu + (vertex - projected) * self.cfg.fw_rate;
        Ok(crate::mappings::map_closest(&step, inst, false)?.action)
    }

    /// Frank-Wolfe reference action for one state.
    pub fn nfwpo_reference(&self, obs: &Vector, inst: &ConstraintInstance) -> Result<Vector> {
        let mu = squash_box(&self.actor.predict(obs)?, &self.space);
        let projected = crate::mappings::map_closest(&mu, inst, false)?.action;
        let obs_m = Matrix::from_column_slice(obs.len(), 1, obs.as_slice());
        let acts = Matrix::from_column_slice(projected.len(), 1, projected.as_slice());
        let (_, g) = self.critic_action_grad(&obs_m, &acts, 1.0)?;
        self.reference_from(&mu, &projected, &g.column(0).into_owned(), inst)
    }

    fn sac_actor_update(&mut self, batch: &[&Transition]) -> Result<(f64, f64)> {
        let d = self.d();
        let noise: Vec<Vector> = (0..batch.len()).map(|_| self.normal_vec(d)).collect();
        let (loss, grads, mean_logp) = self.sac_actor_grads(batch, &noise)?;
        self.actor.adam_step(&grads, &mut self.actor_opt)?;
        if let EntropyCoef::Auto { .. } = self.cfg.ent_coef {
            let g = -(mean_logp + self.target_entropy);
            let mut p = [self.log_alpha];
            self.alpha_opt.step(&mut p, &[g])?;
            self.log_alpha = p[0];
        }
        Ok((loss, mean_logp))
    }

    /// Loss, parameter gradient and mean log-probability of the
    /// entropy-regularized objective for fixed reparametrization noise.
    fn sac_actor_grads(&self, batch: &[&Transition], noise: &[Vector]) -> Result<(f64, Gradients, f64)> {
        let b = batch.len();
        let bf = b as f64;
        let d = self.d();
        let alpha = self.alpha();
        let obs = columns(batch, self.obs_dim, |t| &t.obs);
        let (raw, tape) = self.actor.forward(&obs)?;
        let mut samples = Vec::with_capacity(b);
        let mut acts = Matrix::zeros(d, b);
        for (k, t) in batch.iter().enumerate() {
            let (head, live) = self.head_of(&raw.column(k).into_owned());
            let eps = noise[k].clone();
            let s = self.sac_sample(&head, &head.sample(&eps), &t.instance, false)?;
            acts.set_column(k, &s.critic_action);
            samples.push((head, live, eps, s));
        }

        let input = stack(&obs, &acts);
        let (q1, t1) = self.critics[0].forward(&input)?;
        let (q2, t2) = self.critics[1].forward(&input)?;
        let mut up1 = Matrix::zeros(1, b);
        let mut up2 = Matrix::zeros(1, b);
        let mut loss = 0.0;
        let mut mean_logp = 0.0;
        for k in 0..b {
            let (a, c) = (q1[(0, k)], q2[(0, k)]);
            if a <= c {
                up1[(0, k)] = -1.0 / bf;
            } else {
                up2[(0, k)] = -1.0 / bf;
            }
            let logp = samples[k].3.parts.value;
            loss += (alpha * logp - a.min(c)) / bf;
            mean_logp += logp / bf;
        }
        let g1 = self.critics[0].backward(&t1, &up1, None)?.input;
        let g2 = self.critics[1].backward(&t2, &up2, None)?.input;
        let ga = (g1 + g2).rows(self.obs_dim, d).into_owned();

        let mut upstream = Matrix::zeros(2 * d, b);
        let penalty = self.penalty_in_loss();
        for (k, (head, live, eps, s)) in samples.iter().enumerate() {
            let mut dx = &s.parts.d_x * (alpha / bf) + s.dcritic_dx.transpose() * ga.column(k);
            if penalty {
                let coef = self.cfg.penalty_coef / bf;
                let inst = &batch[k].instance;
                loss += coef * inst.violation_penalty(&s.pre_map);
                let slope = squash_slope(&head.sample(eps), &self.space);
                dx += inst.violation_penalty_grad(&s.pre_map).component_mul(&slope) * coef;
            }
            let std = head.std();
            for i in 0..d {
                upstream[(i, k)] = alpha / bf * s.parts.d_mean[i] + dx[i];
                if live[i] {
                    upstream[(d + i, k)] = alpha / bf * s.parts.d_log_std[i] + dx[i] * std[i] * eps[i];
                }
            }
        }
        let grads = self.actor.backward(&tape, &upstream, None)?;
        Ok((loss, grads, mean_logp))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            variant: self.variant,
            actor: self.actor.to_json()?,
            actor_target: self.actor_target.to_json()?,
            critics: vec![self.critics[0].to_json()?, self.critics[1].to_json()?],
            critic_targets: vec![self.critic_targets[0].to_json()?, self.critic_targets[1].to_json()?],
            actor_opt: self.actor_opt.clone(),
            critic_opts: vec![self.critic_opts[0].clone(), self.critic_opts[1].clone()],
            log_alpha: self.log_alpha,
            alpha_opt: self.alpha_opt.clone(),
            counters: self.counters,
        })
    }

    /// Restores parameters, optimizer moments and counters. The noise
    /// stream is not part of a checkpoint.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.variant != self.variant || ck.critics.len() != 2 || ck.critic_targets.len() != 2 || ck.critic_opts.len() != 2
        {
            return Err(Error::Config("checkpoint does not match this trainer".into()));
        }
        let load = |s: &str, like: &Mlp| -> Result<Mlp> {
            let net = Mlp::from_json(s)?;
            if net.widths() != like.widths() {
                return Err(Error::Config("checkpoint widths do not match".into()));
            }
            Ok(net)
        };
        let actor = load(&ck.actor, &self.actor)?;
        let actor_target = load(&ck.actor_target, &self.actor)?;
        let critics = [load(&ck.critics[0], &self.critics[0])?, load(&ck.critics[1], &self.critics[1])?];
        let targets = [load(&ck.critic_targets[0], &self.critics[0])?, load(&ck.critic_targets[1], &self.critics[1])?];
        self.actor = actor;
        self.actor_target = actor_target;
        self.critics = critics;
        self.critic_targets = targets;
        self.actor_opt = ck.actor_opt.clone();
        self.critic_opts = [ck.critic_opts[0].clone(), ck.critic_opts[1].clone()];
        self.log_alpha = ck.log_alpha;
        self.alpha_opt = ck.alpha_opt.clone();
        self.counters = ck.counters;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.checkpoint()?)?)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        self.restore(&ck)
    }
}

/// Serialized trainer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub variant: Variant,
    pub actor: String,
    pub actor_target: String,
    pub critics: Vec<String>,
    pub critic_targets: Vec<String>,
    pub actor_opt: AdamState,
    pub critic_opts: Vec<AdamState>,
    pub log_alpha: f64,
    pub alpha_opt: AdamState,
    pub counters: Counters,
}
