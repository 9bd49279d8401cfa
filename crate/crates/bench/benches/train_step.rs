use std::sync::Arc;

use acrl::harness::{derive_seed, stream};
use acrl::{Agent, ConstrainedEnv, ConstraintSpec, EnvConfig, Family, ReacherConfig, ReplayBuffer, TrainerConfig, Transition, Variant};
use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn warm(variant: Variant, batch: usize) -> (Agent, ReplayBuffer) {
    let env = EnvConfig::Reacher(ReacherConfig { links: 6, ..Default::default() });
    let spec = ConstraintSpec::new(Family::O);
    let mut cenv = ConstrainedEnv::new(env.build().unwrap(), spec, variant.critic_on_pre_map(), variant.mapping().uses_center()).unwrap();
    let cfg = TrainerConfig { batch_size: batch, ..TrainerConfig::for_base(variant.base()) };
    let mut agent = Agent::new(
        variant,
        cenv.env().obs_dim(),
        cenv.env().action_space().clone(),
        cfg,
        derive_seed(0, stream::INIT),
        derive_seed(0, stream::NOISE),
    )
    .unwrap();
    let mut buffer = ReplayBuffer::new(10_000, derive_seed(0, stream::BUFFER));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0, stream::ENV));
    let mut obs = cenv.reset(&mut rng).unwrap();
    for _ in 0..1_000 {
        let inst = Arc::clone(cenv.instance());
        let a = agent.act(&obs, &inst, true).unwrap();
        let sent = if variant.critic_on_pre_map() { &a.pre_map } else { &a.executed };
        let out = cenv.step(sent).unwrap();
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
            obs = cenv.reset(&mut rng).unwrap();
        }
    }
    (agent, buffer)
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step");
    g.sample_size(20);
    for batch in [1, 16, 100] {
        for v in Variant::ALL {
            let (agent, buffer) = warm(v, batch);
            g.bench_function(BenchmarkId::new(v.name(), batch), |b| {
                b.iter_batched(
                    || (agent.clone(), buffer.clone()),
                    |(mut a, mut buf)| a.train_step(&mut buf).unwrap(),
                    BatchSize::LargeInput,
                )
            });
        }
    }
    g.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
