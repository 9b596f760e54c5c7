use std::hint::black_box;

use assemblies_core::dgn::{LimbGrad, Policy, PolicyKind};
use assemblies_core::morphology::{link_prebuilt, MorphGraph};
use assemblies_core::sensing::{observe, OBS_DIM};
use assemblies_core::tasks::{spawn, ScenarioSpec, Task};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenario(task: Task) -> ScenarioSpec {
    ScenarioSpec {
        num_limbs: 6,
        ..ScenarioSpec::new(task)
    }
}

fn physics(c: &mut Criterion) {
    let (mut world, mut graph) = spawn(&scenario(Task::Standing)).unwrap();
    for i in 1..3 {
        link_prebuilt(&mut world, &mut graph, i, i - 1).unwrap();
    }
    let dt = world.config.dt;
    c.bench_function("substep_6_limbs", |b| {
        b.iter(|| {
            let mut w = world.clone();
            w.step(black_box(dt)).unwrap();
            w
        })
    });
}

fn policy(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let graph = MorphGraph::chain(6);
    let obs: Vec<f64> = (0..6 * OBS_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    let upstream = vec![
        LimbGrad {
            mu: [1.0; 3],
            value: 1.0,
            ..LimbGrad::default()
        };
        6
    ];
    for kind in [PolicyKind::Dgn, PolicyKind::MonoFixed] {
        let p = Policy::new(kind, 6, 64, 0);
        c.bench_function(&format!("forward_{kind}"), |b| b.iter(|| p.forward(black_box(&obs), &graph).unwrap()));
        let out = p.forward(&obs, &graph).unwrap();
        let mut grads = vec![0.0; p.num_params()];
        c.bench_function(&format!("backward_{kind}"), |b| {
            b.iter(|| p.backward(black_box(&out), &upstream, &mut grads).unwrap())
        });
    }
}

fn sensing(c: &mut Criterion) {
    let (world, graph) = spawn(&scenario(Task::Locomotion)).unwrap();
    c.bench_function("observe_one_limb", |b| b.iter(|| observe(black_box(&world), &graph, 3)));
}

criterion_group!(benches, physics, policy, sensing);
criterion_main!(benches);
