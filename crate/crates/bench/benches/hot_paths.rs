use criterion::{black_box, criterion_group, criterion_main, Criterion};
use jointpred_bench::{crossing_windows, random_gibbs, vehicle_model};
use jointpred_core::autodiff::{GradBuffer, Tape};
use jointpred_core::dynamics::AgentKind;
use jointpred_core::geometry::Footprint;
use jointpred_core::planner::{plan, CostWeights, LaneReference, Limits, Obstacle, PlanMode, PlanProblem, SolverOptions};
use jointpred_core::trainer::{elbo_loss, TrainingConfig};
use jointpred_core::PredictOptions;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gibbs(c: &mut Criterion) {
    let g = random_gibbs(4, 6, 1);
    c.bench_function("gibbs_enumerate_4x6", |b| b.iter(|| random_gibbs(black_box(4), 6, 1)));
    c.bench_function("gibbs_diverse_k5_beta2", |b| b.iter(|| g.diverse_sample(black_box(5), 2)));
}

fn model(c: &mut Criterion) {
    let model = vehicle_model(16);
    let window = crossing_windows(1).remove(0);
    let opts = PredictOptions { k: 3, beta: 1, ..Default::default() };
    c.bench_function("predict_2_agents_k3", |b| b.iter(|| model.predict(black_box(&window.agents), &opts).unwrap()));
    let cfg = TrainingConfig::default();
    c.bench_function("elbo_forward_backward", |b| {
        b.iter(|| {
            let tape = Tape::with_params(&model.store);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (root, _) = elbo_loss(&tape, &model, black_box(&window), &cfg, 0.5, &mut rng).unwrap();
            let mut grads = GradBuffer::zeros_like(&model.store);
            tape.backward(root).unwrap().accumulate_into(&mut grads);
            grads
        })
    });
}

fn planner(c: &mut Criterion) {
    let lead = |v: f64| Obstacle {
        id: 2,
        kind: AgentKind::Vehicle,
        footprint: Footprint::default_for(AgentKind::Vehicle),
        current: Some([20.0, 0.0, 10.0, 0.0]),
        states: (1..=8).map(|t| [20.0 + v * 0.5 * t as f64, 0.0, v, 0.0]).collect(),
    };
    let problem = PlanProblem {
        ego: [0.0, 0.0, 10.0, 0.0],
        ego_footprint: Footprint::default_for(AgentKind::Vehicle),
        modes: vec![PlanMode { probability: 0.6, obstacles: vec![lead(10.0)] }, PlanMode { probability: 0.4, obstacles: vec![lead(2.0)] }],
        reference: LaneReference { x: 0.0, y: 0.0, heading: 0.0, speed: 10.0 },
        weights: CostWeights::default(),
        limits: Limits::default(),
        clearance: 0.5,
        horizon: 8,
        dt: 0.5,
    };
    let opts = SolverOptions::fast();
    let mut group = c.benchmark_group("planner");
    group.sample_size(10);
    group.bench_function("two_branch_T8", |b| b.iter(|| plan(black_box(&problem), &opts, None).unwrap()));
    group.finish();
}

criterion_group!(benches, gibbs, model, planner);
criterion_main!(benches);
