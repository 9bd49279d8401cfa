//! Seeded experiment runs, runtime measurement and report files.
//!
//! Every run is keyed by `(variant, family, seed)`. Random streams are
//! derived from the seed and a fixed purpose tag only, so runs of different
//! variants with the same seed share network initialization, environment
//! starts and noise draws, and adding variants or families to a config never
//! changes the runs already in it.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constraints::ConstraintSpec;
use crate::envs::{ConstrainedEnv, EnvConfig};
use crate::error::{Error, Result};
use crate::mappings::map_closest;
use crate::rl::{apply_penalty, Agent, EntropyCoef, PenaltyMode, ReplayBuffer, TrainerConfig, Transition, Variant};
use crate::nn::Mlp;
use crate::Vector;

/// Purpose tags for [`derive_seed`].
pub mod stream {
    pub const INIT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const BUFFER: u64 = 3;
    pub const ENV: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const FINAL_EVAL: u64 = 6;
    pub const RANDOM_POLICY: u64 = 7;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the random stream used for `purpose` in a run with `seed`:
/// two rounds of SplitMix64, the second after mixing in the tag.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut s = seed;
    let a = splitmix64(&mut s);
    let mut t = a ^ purpose.wrapping_mul(0xD1B5_4A32_D192_ED03);
    splitmix64(&mut t)
}

/// Trainer hyperparameters a config may override. Unset fields keep the
/// defaults of the variant's base algorithm.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub actor_lr: Option<f64>,
    pub critic_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub buffer_size: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub learning_starts: Option<usize>,
    pub train_freq: Option<usize>,
    pub gradient_steps: Option<usize>,
    pub policy_delay: Option<usize>,
    pub action_noise: Option<f64>,
    pub target_noise: Option<f64>,
    pub target_noise_clip: Option<f64>,
    pub fw_rate: Option<f64>,
    pub ent_coef: Option<EntropyCoef>,
    pub target_entropy: Option<f64>,
    pub penalty_mode: Option<PenaltyMode>,
    pub penalty_coef: Option<f64>,
    pub project_target_action: Option<bool>,
}

impl Overrides {
    pub fn apply(&self, mut c: TrainerConfig) -> TrainerConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = v.clone(); } )* };
        }
        set!(
            gamma,
            tau,
            actor_lr,
            critic_lr,
            batch_size,
            buffer_size,
            hidden,
            learning_starts,
            train_freq,
            gradient_steps,
            policy_delay,
            action_noise,
            target_noise,
            target_noise_clip,
            fw_rate,
            ent_coef,
            penalty_mode,
            penalty_coef,
            project_target_action
        );
        if self.target_entropy.is_some() {
            c.target_entropy = self.target_entropy;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub families: Vec<ConstraintSpec>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub final_eval_episodes: usize,
    /// Applied to both base algorithms.
    pub overrides: Overrides,
    /// Applied after `overrides` to TD3-based variants only.
    pub td3: Overrides,
    /// Applied after `overrides` to SAC-based variants only.
    pub sac: Overrides,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            families: vec![ConstraintSpec::new(crate::constraints::Family::L2)],
            variants: Variant::ALL.to_vec(),
            seeds: vec![0],
            total_steps: 30_000,
            eval_interval: 5_000,
            eval_episodes: 5,
            final_eval_episodes: 50,
            overrides: Overrides::default(),
            td3: Overrides::default(),
            sac: Overrides::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() || self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("families, variants and seeds must be nonempty".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.total_steps == 0 || self.eval_interval == 0 || self.eval_episodes == 0 || self.final_eval_episodes == 0 {
            return Err(Error::Config("step counts and episode counts must be positive".into()));
        }
        let env = self.env.build()?;
        for spec in &self.families {
            spec.validate()?;
            // binding check: the family must accept this environment's joints
            ConstrainedEnv::new(self.env.build()?, spec.clone(), false, false)?;
        }
        for v in &self.variants {
            self.trainer_config(*v).validate()?;
        }
        drop(env);
        Ok(())
    }

    pub fn trainer_config(&self, variant: Variant) -> TrainerConfig {
        let base = TrainerConfig::for_base(variant.base());
        let per_base = match variant.base() {
            crate::rl::Base::Td3 => &self.td3,
            crate::rl::Base::Sac => &self.sac,
        };
        per_base.apply(self.overrides.apply(base))
    }

    /// SHA-256 over the canonical JSON form (object keys sorted).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}

/// Short name of a constraint spec, with parameters that differ from the
/// family default, e.g. `O(budget=0.3)`.
pub fn family_label(spec: &ConstraintSpec) -> String {
    let bare = ConstraintSpec::new(spec.family);
    let custom: Vec<String> = spec
        .params
        .iter()
        .filter(|(k, v)| bare.param(k).map(|d| d != **v).unwrap_or(true))
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    if custom.is_empty() {
        spec.family.name().to_string()
    } else {
        format!("{}({})", spec.family.name(), custom.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub env: String,
    pub family: String,
    pub variant: Variant,
    pub seed: u64,
    pub curve: Vec<EvalPoint>,
    /// Step of the evaluation whose parameters were kept.
    pub best_step: usize,
    pub final_mean: f64,
    pub final_stderr: f64,
    pub violations: u64,
    /// Actions the environment had to clip into the box.
    pub env_clips: u64,
    pub degenerate_jacobians: u64,
    /// Wall time of each gradient step; not part of the reports.
    #[serde(skip)]
    pub grad_step_seconds: Vec<f64>,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bound_env(env: &EnvConfig, spec: &ConstraintSpec, variant: Variant) -> Result<ConstrainedEnv> {
    ConstrainedEnv::new(env.build()?, spec.clone(), variant.critic_on_pre_map(), variant.mapping().uses_center())
}

/// Returns of `episodes` deterministic episodes. Uses its own environment
/// and random stream, so the trainer and its buffer are untouched.
pub fn evaluate(
    agent: &Agent,
    env: &EnvConfig,
    spec: &ConstraintSpec,
    episodes: usize,
    stream_seed: u64,
) -> Result<Vec<f64>> {
    let variant = agent.variant();
    let mut cenv = bound_env(env, spec, variant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = cenv.reset(&mut rng)?;
        let mut total = 0.0;
        loop {
            let inst = Arc::clone(cenv.instance());
            let a = agent.greedy_action(&obs, &inst)?;
            let sent = if variant.critic_on_pre_map() { a.pre_map } else { a.executed };
            let out = cenv.step(&sent)?;
            total += out.reward;
            if out.terminated || out.truncated {
                break;
            }
            obs = out.obs;
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Returns of a policy that samples the box uniformly and projects.
pub fn random_policy_returns(env: &EnvConfig, spec: &ConstraintSpec, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    use rand::Rng;
    let mut cenv = ConstrainedEnv::new(env.build()?, spec.clone(), true, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::RANDOM_POLICY));
    let d = cenv.env().action_space().dim();
    let a_max = cenv.env().action_space().a_max().to_vec();
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        cenv.reset(&mut rng)?;
        let mut total = 0.0;
        loop {
            let a = Vector::from_fn(d, |i, _| rng.random_range(-a_max[i]..a_max[i]));
            let a = map_closest(&a, cenv.instance(), false)?.action;
            let out = cenv.step(&a)?;
            total += out.reward;
            if out.terminated || out.truncated {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Trains one variant on one family with one seed and evaluates it.
pub fn run_single(cfg: &ExperimentConfig, variant: Variant, spec: &ConstraintSpec, seed: u64) -> Result<RunRecord> {
    let tcfg = cfg.trainer_config(variant);
    let mut cenv = bound_env(&cfg.env, spec, variant)?;
    let space = cenv.env().action_space().clone();
    let obs_dim = cenv.env().obs_dim();
    let mut agent = Agent::new(
        variant,
        obs_dim,
        space,
        tcfg.clone(),
        derive_seed(seed, stream::INIT),
        derive_seed(seed, stream::NOISE),
    )?;
    let mut buffer = ReplayBuffer::new(tcfg.buffer_size, derive_seed(seed, stream::BUFFER));
    let mut env_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::ENV));
    let eval_seed = derive_seed(seed, stream::EVAL);

    let mut obs = cenv.reset(&mut env_rng)?;
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, Mlp)> = None;
    let mut grad_step_seconds = Vec::new();
    for step in 1..=cfg.total_steps {
        let inst = Arc::clone(cenv.instance());
        let action =
            if step <= tcfg.learning_starts { agent.random_action(&inst)? } else { agent.act(&obs, &inst, true)? };
        let sent = if variant.critic_on_pre_map() { &action.pre_map } else { &action.executed };
        let out = cenv.step(sent)?;
        let reward = apply_penalty(variant, &tcfg, out.reward, &action.pre_map, &inst);
        let ended = out.terminated || out.truncated;
        buffer.push(Transition {
            obs: std::mem::replace(&mut obs, out.obs.clone()),
            pre_map_action: action.pre_map,
            executed_action: out.executed_action,
            reward,
            next_obs: out.obs,
            done: out.terminated,
            instance: inst,
            next_instance: out.instance,
        });
        if ended {
            obs = cenv.reset(&mut env_rng)?;
        }
        if step > tcfg.learning_starts && step % tcfg.train_freq == 0 {
            for _ in 0..tcfg.gradient_steps {
                let t0 = Instant::now();
                agent.train_step(&mut buffer)?;
                grad_step_seconds.push(t0.elapsed().as_secs_f64());
            }
        }
        if step % cfg.eval_interval == 0 {
            let (mean, _) = mean_stderr(&evaluate(&agent, &cfg.env, spec, cfg.eval_episodes, eval_seed)?);
            curve.push(EvalPoint { step, mean_return: mean });
            if best.as_ref().is_none_or(|(b, _, _)| mean > *b) {
                best = Some((mean, step, agent.actor().clone()));
            }
        }
    }
    let best_step = match best {
        Some((_, step, actor)) => {
            agent.set_actor(actor)?;
            step
        }
        None => cfg.total_steps,
    };
    let finals = evaluate(&agent, &cfg.env, spec, cfg.final_eval_episodes, derive_seed(seed, stream::FINAL_EVAL))?;
    let (final_mean, final_stderr) = mean_stderr(&finals);
    Ok(RunRecord {
        env: cfg.env.name(),
        family: family_label(spec),
        variant,
        seed,
        curve,
        best_step,
        final_mean,
        final_stderr,
        violations: cenv.violations(),
        env_clips: cenv.env().clip_count(),
        degenerate_jacobians: agent.counters().degenerate_jacobians,
        grad_step_seconds,
    })
}

/// Every `(family, variant, seed)` run of the config, at most `jobs` at a
/// time. Records come back in config order.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let mut tasks = Vec::new();
    for spec in &cfg.families {
        for &variant in &cfg.variants {
            for &seed in &cfg.seeds {
                tasks.push((spec, variant, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| tasks.par_iter().map(|(spec, variant, seed)| run_single(cfg, *variant, spec, *seed)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub family: String,
    pub variant: Variant,
    pub seeds: usize,
    pub mean: f64,
    pub stderr: f64,
    pub median: f64,
}

/// Mean, standard error and median of the final returns across seeds, per
/// `(family, variant)` in order of first appearance.
pub fn aggregate(records: &[RunRecord]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, Variant)> = Vec::new();
    for r in records {
        let k = (r.family.clone(), r.variant);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(family, variant)| {
            let xs: Vec<f64> =
                records.iter().filter(|r| r.family == family && r.variant == variant).map(|r| r.final_mean).collect();
            let (mean, stderr) = mean_stderr(&xs);
            Aggregate { median: median(&xs), family, variant, seeds: xs.len(), mean, stderr }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeSetup {
    pub env: EnvConfig,
    pub family: ConstraintSpec,
    pub overrides: Overrides,
    /// Environment steps used to fill the buffer before timing.
    pub warm_steps: usize,
    pub trials: usize,
}

impl Default for RuntimeSetup {
    fn default() -> Self {
        Self {
            env: EnvConfig::Reacher(crate::envs::ReacherConfig { links: 6, ..Default::default() }),
            family: ConstraintSpec::new(crate::constraints::Family::O),
            overrides: Overrides::default(),
            warm_steps: 2_000,
            trials: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeMeasurement {
    pub variant: Variant,
    pub batch_size: usize,
    pub n_steps: usize,
    /// Wall time of `n_steps` gradient steps, mean and standard deviation
    /// over trials.
    pub seconds_mean: f64,
    pub seconds_std: f64,
    pub trials: Vec<f64>,
}

impl RuntimeMeasurement {
    pub fn per_step(&self) -> f64 {
        self.seconds_mean / self.n_steps as f64
    }
}

/// Times `n_steps` gradient steps after filling the buffer with exploratory
/// transitions. Environment stepping is excluded from the timing.
pub fn measure_runtime(setup: &RuntimeSetup, variant: Variant, batch_size: usize, n_steps: usize) -> Result<RuntimeMeasurement> {
    let mut tcfg = setup.overrides.apply(TrainerConfig::for_base(variant.base()));
    tcfg.batch_size = batch_size;
    let mut trials = Vec::with_capacity(setup.trials);
    for trial in 0..setup.trials.max(1) as u64 {
        let mut cenv = bound_env(&setup.env, &setup.family, variant)?;
        let obs_dim = cenv.env().obs_dim();
        let space = cenv.env().action_space().clone();
        let mut agent = Agent::new(
            variant,
            obs_dim,
            space,
            tcfg.clone(),
            derive_seed(trial, stream::INIT),
            derive_seed(trial, stream::NOISE),
        )?;
        let mut buffer = ReplayBuffer::new(tcfg.buffer_size.max(setup.warm_steps), derive_seed(trial, stream::BUFFER));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(trial, stream::ENV));
        let mut obs = cenv.reset(&mut rng)?;
        for _ in 0..setup.warm_steps.max(1) {
            let inst = Arc::clone(cenv.instance());
            let a = agent.act(&obs, &inst, true)?;
            let sent = if variant.critic_on_pre_map() { &a.pre_map } else { &a.executed };
            let out = cenv.step(sent)?;
            let ended = out.terminated || out.truncated;
            buffer.push(Transition {
                obs: std::mem::replace(&mut obs, out.obs.clone()),
                pre_map_action: a.pre_map,
                executed_action: out.executed_action,
                reward: out.reward,
                next_obs: out.obs,
                done: out.terminated,
                instance: inst,
                next_instance: out.instance,
            });
            if ended {
                obs = cenv.reset(&mut rng)?;
            }
        }
        let t0 = Instant::now();
        for _ in 0..n_steps {
            agent.train_step(&mut buffer)?;
        }
        trials.push(t0.elapsed().as_secs_f64());
    }
    let n = trials.len() as f64;
    let mean = trials.iter().sum::<f64>() / n;
    let std = if trials.len() > 1 {
        (trials.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(RuntimeMeasurement { variant, batch_size, n_steps, seconds_mean: mean, seconds_std: std, trials })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub rewards: PathBuf,
    pub learning_curves: PathBuf,
    pub manifest: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: String,
    config: &'a ExperimentConfig,
    crate_version: &'static str,
    report_format: u32,
    runs: usize,
    files: Vec<&'static str>,
}

/// Writes `rewards.csv`, `learning_curves.csv` and `manifest.json`.
pub fn emit_report(records: &[RunRecord], cfg: &ExperimentConfig, out_dir: &Path) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(Error::Config("no run records to report".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let files = ReportFiles {
        rewards: out_dir.join("rewards.csv"),
        learning_curves: out_dir.join("learning_curves.csv"),
        manifest: out_dir.join("manifest.json"),
    };

    let mut w = csv::Writer::from_writer(File::create(&files.rewards)?);
    w.write_record(["family", "variant", "seed", "final_mean", "stderr"])?;
    for r in records {
        w.write_record([
            r.family.clone(),
            r.variant.to_string(),
            r.seed.to_string(),
            r.final_mean.to_string(),
            r.final_stderr.to_string(),
        ])?;
    }
    for a in aggregate(records) {
        w.write_record([a.family, a.variant.to_string(), "aggregate".into(), a.mean.to_string(), a.stderr.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(File::create(&files.learning_curves)?);
    w.write_record(["family", "variant", "seed", "step", "mean_return"])?;
    for r in records {
        for p in &r.curve {
            w.write_record([
                r.family.clone(),
                r.variant.to_string(),
                r.seed.to_string(),
                p.step.to_string(),
                p.mean_return.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let manifest = Manifest {
        config_hash: cfg.hash(),
        config: cfg,
        crate_version: env!("CARGO_PKG_VERSION"),
        report_format: 1,
        runs: records.len(),
        files: vec!["rewards.csv", "learning_curves.csv"],
    };
    std::fs::write(&files.manifest, serde_json::to_string_pretty(&manifest)?)?;
    Ok(files)
}

/// Writes `runtime.csv`.
pub fn emit_runtime(rows: &[RuntimeMeasurement], out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("runtime.csv");
    let mut w = csv::Writer::from_writer(File::create(&path)?);
    w.write_record(["variant", "batch_size", "seconds_mean", "seconds_std"])?;
    for r in rows {
        w.write_record([r.variant.to_string(), r.batch_size.to_string(), r.seconds_mean.to_string(), r.seconds_std.to_string()])?;
    }
    w.flush()?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::Family;
    use crate::envs::PointMassConfig;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            env: EnvConfig::PointMass(PointMassConfig { episode_length: 20, ..Default::default() }),
            families: vec![ConstraintSpec::new(Family::O)],
            variants: vec![Variant::DAlpha],
            seeds: vec![0, 1],
            total_steps: 120,
            eval_interval: 60,
            eval_episodes: 2,
            final_eval_episodes: 3,
            overrides: Overrides {
                hidden: Some(vec![8]),
                batch_size: Some(8),
                learning_starts: Some(40),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn seed_streams_are_distinct_and_stable() {
        let a = derive_seed(0, stream::INIT);
        assert_eq!(a, derive_seed(0, stream::INIT));
        assert_ne!(a, derive_seed(0, stream::NOISE));
        assert_ne!(a, derive_seed(1, stream::INIT));
        // first SplitMix64 output for state 0
        let mut s = 0;
        assert_eq!(splitmix64(&mut s), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn two_seeds_give_two_records() {
        let cfg = tiny();
        let recs = run_experiment(&cfg, 1).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.violations == 0 && r.curve.len() == 2));
        let agg = aggregate(&recs);
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].seeds, 2);
    }

    #[test]
    fn eval_interval_equal_to_total_gives_one_point() {
        let cfg = ExperimentConfig { eval_interval: 120, seeds: vec![3], ..tiny() };
        let r = run_single(&cfg, Variant::DAlpha, &cfg.families[0], 3).unwrap();
        assert_eq!(r.curve.len(), 1);
        assert_eq!(r.best_step, 120);
    }

    #[test]
    fn rerun_is_identical() {
        let cfg = ExperimentConfig { variants: vec![Variant::SRad, Variant::Nfw], seeds: vec![5], ..tiny() };
        let strip = |mut v: Vec<RunRecord>| {
            v.iter_mut().for_each(|r| r.grad_step_seconds.clear());
            v
        };
        let a = strip(run_experiment(&cfg, 1).unwrap());
        let b = strip(run_experiment(&cfg, 2).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn stderr_of_identical_values_is_zero() {
        assert_eq!(mean_stderr(&[2.5, 2.5, 2.5]), (2.5, 0.0));
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }

    #[test]
    fn hash_tracks_every_field() {
        let base = ExperimentConfig::default();
        let h = base.hash();
        assert_eq!(h, ExperimentConfig::default().hash());
        let changed = [
            ExperimentConfig { total_steps: 30_001, ..base.clone() },
            ExperimentConfig { seeds: vec![1], ..base.clone() },
            ExperimentConfig { variants: vec![Variant::DPro], ..base.clone() },
            ExperimentConfig {
                overrides: Overrides { fw_rate: Some(0.01), ..Default::default() },
                ..base.clone()
            },
            ExperimentConfig { families: vec![ConstraintSpec::new(Family::L2).with_param("radius2", 0.06)], ..base.clone() },
        ];
        for c in changed {
            assert_ne!(c.hash(), h);
        }
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let cfg = tiny();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        let partial = r#"{"variants": ["DPro+", "SAlpha"], "seeds": [1, 2], "families": [{"family": "O", "params": {"budget": 0.3}}]}"#;
        let c = ExperimentConfig::from_json(partial).unwrap();
        assert_eq!(c.total_steps, 30_000);
        assert_eq!(family_label(&c.families[0]), "O(budget=0.3)");
        assert!(ExperimentConfig::from_json(r#"{"seeds": [1, 1]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"families": [{"family": "T"}], "env": {"kind": "reacher", "links": 3}}"#).is_err());
    }

    #[test]
    fn report_files_have_expected_shape() {
        let cfg = tiny();
        let recs = run_experiment(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&recs, &cfg, dir.path()).unwrap();
        let rewards = std::fs::read_to_string(&files.rewards).unwrap();
        let lines: Vec<&str> = rewards.lines().collect();
        assert_eq!(lines[0], "family,variant,seed,final_mean,stderr");
        assert_eq!(lines.len(), 1 + 2 + 1);
        assert!(lines[3].starts_with("O,DAlpha,aggregate,"));
        let curves = std::fs::read_to_string(&files.learning_curves).unwrap();
        assert_eq!(curves.lines().count(), 1 + 4);
        let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&files.manifest).unwrap()).unwrap();
        assert_eq!(manifest["config_hash"], cfg.hash());
        assert!(emit_report(&[], &cfg, dir.path()).is_err());
    }

    #[test]
    fn runtime_rows() {
        let setup = RuntimeSetup {
            env: EnvConfig::PointMass(PointMassConfig::default()),
            overrides: Overrides { hidden: Some(vec![8]), ..Default::default() },
            warm_steps: 50,
            trials: 2,
            ..Default::default()
        };
        let m = measure_runtime(&setup, Variant::DOpt, 4, 5).unwrap();
        assert_eq!(m.trials.len(), 2);
        assert!(m.seconds_mean > 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = emit_runtime(&[m], dir.path()).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("variant,batch_size,seconds_mean,seconds_std\nDOpt,4,"));
    }
}
