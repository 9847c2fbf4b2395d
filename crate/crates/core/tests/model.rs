use std::collections::BTreeMap;

use jointpred_core::autodiff::Tape;
use jointpred_core::data::{windows, TrainingWindow, WindowConfig};
use jointpred_core::dynamics::{self, AgentKind};
use jointpred_core::latent::hamming;
use jointpred_core::model::{Model, ModelConfig, PredictOptions};
use jointpred_core::synth::{synth_scenarios, SynthSpec, Template};
use jointpred_core::trainer::{elbo_loss, train, TrainingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(future: usize) -> Model {
    let cfg = ModelConfig { future, seed: 3, ..ModelConfig::vehicles().with_width(8) };
    Model::new(cfg).unwrap()
}

fn following_windows(history: usize, future: usize, count: usize) -> Vec<TrainingWindow> {
    let mut spec = SynthSpec::new(Template::CarFollowing, count);
    spec.history = history;
    spec.future = future;
    let scenes = synth_scenarios(&spec, 11).unwrap();
    let cfg = WindowConfig { history, future, stride: 100, ..WindowConfig::vehicles() };
    scenes.iter().flat_map(|s| windows(s, &cfg)).collect()
}

#[test]
fn predict_is_deterministic_and_normalized() {
    let model = small_model(8);
    let w = &following_windows(4, 8, 1)[0];
    let opts = PredictOptions { k: 4, beta: 1, ..Default::default() };
    let a = model.predict(&w.agents, &opts).unwrap();
    let b = model.predict(&w.agents, &opts).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let total: f64 = a.modes.iter().map(|m| m.probability).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(a.modes.windows(2).all(|p| p[0].probability >= p[1].probability));
    for i in 0..a.modes.len() {
        for j in 0..i {
            let zi: Vec<usize> = a.modes[i].z.iter().map(|z| z.unwrap()).collect();
            let zj: Vec<usize> = a.modes[j].z.iter().map(|z| z.unwrap()).collect();
            assert!(hamming(&zi, &zj) >= 1);
        }
    }
}

#[test]
fn predicted_modes_replay_through_dynamics() {
    let model = small_model(8);
    let w = &following_windows(4, 8, 1)[0];
    let set = model.predict(&w.agents, &PredictOptions { k: 3, beta: 0, ..Default::default() }).unwrap();
    for mode in &set.modes {
        for (p, agent) in mode.agents.iter().zip(&w.agents) {
            let mut s = *agent.current();
            for (u, next) in p.controls.iter().zip(&p.states) {
                assert!(dynamics::within_bounds(AgentKind::Vehicle, u));
                s = dynamics::step(AgentKind::Vehicle, &s, u, model.config.dt);
                for d in 0..4 {
                    assert!((s[d] - next[d]).abs() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn conditioned_agent_passes_through_exactly() {
    let model = small_model(8);
    let w = &following_windows(4, 8, 1)[0];
    let leader = w.agents[1].id;
    let fixed = w.agents[1].future.clone().unwrap();
    let mut conditioned = BTreeMap::new();
    conditioned.insert(leader, fixed.clone());
    let set = model.predict(&w.agents, &PredictOptions { k: 3, beta: 0, conditioned }).unwrap();
    assert!(!set.modes.is_empty());
    for m in &set.modes {
        assert_eq!(m.z[1], None);
        assert!(m.agents[1].conditioned);
        assert_eq!(m.agents[1].states, fixed);
        assert!(m.agents[1].controls.is_empty());
    }
}

#[test]
fn unknown_conditioned_agent_rejected() {
    let model = small_model(8);
    let w = &following_windows(4, 8, 1)[0];
    let mut conditioned = BTreeMap::new();
    conditioned.insert(999, vec![[0.0; 4]; 8]);
    assert!(model.predict(&w.agents, &PredictOptions { k: 1, beta: 0, conditioned }).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let model = small_model(8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(model.content_hash(), loaded.content_hash());
    let w = &following_windows(4, 8, 1)[0];
    let opts = PredictOptions { k: 2, beta: 0, ..Default::default() };
    assert_eq!(model.predict(&w.agents, &opts).unwrap(), loaded.predict(&w.agents, &opts).unwrap());
}

/// Directional derivative of the full loss against central differences.
pub fn gradient_check(directions: usize, seed: u64) -> f64 {
    let mut model = small_model(3);
    let window = following_windows(4, 3, 1)[0].to_local_frame();
    let cfg = TrainingConfig { n_g: 2, n_r: 1, collision_weight: 5.0, ..Default::default() };
    let alpha = 0.5;
    let base = model.store.flatten();
    let eval = |model: &Model| {
        let tape = Tape::with_params(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (root, _) = elbo_loss(&tape, model, &window, &cfg, alpha, &mut rng).unwrap();
        let mut grads = jointpred_core::autodiff::GradBuffer::zeros_like(&model.store);
        tape.backward(root).unwrap().accumulate_into(&mut grads);
        (root.val(), grads.flatten())
    };
    let (_, grad) = eval(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let mut u: Vec<f64> = (0..base.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        let analytic: f64 = grad.iter().zip(&u).map(|(g, d)| g * d).sum();
        let shifted = |sign: f64| base.iter().zip(&u).map(|(p, d)| p + sign * h * d).collect::<Vec<_>>();
        model.store.unflatten(&shifted(1.0));
        let plus = eval(&model).0;
        model.store.unflatten(&shifted(-1.0));
        let minus = eval(&model).0;
        model.store.unflatten(&base);
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    let worst = gradient_check(10, 1);
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let data = following_windows(4, 8, 12);
    let cfg = TrainingConfig { epochs: 6, batch_size: 4, n_g: 2, n_r: 1, learning_rate: 1e-2, ..Default::default() };
    let mut a = small_model(8);
    let mut b = small_model(8);
    let ha = train(&mut a, &data, &cfg, |_| {}).unwrap();
    let hb = train(&mut b, &data, &cfg, |_| {}).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.content_hash(), b.content_hash());
    assert!(ha.last().unwrap().loss.total < ha[0].loss.total);
    assert!((ha[0].alpha - 0.2).abs() < 1e-12 && (ha[5].alpha - 1.0).abs() < 1e-12);
}

#[test]
fn pinned_rollouts_only_add_collision_loss() {
    let model = small_model(3);
    let window = following_windows(4, 3, 1)[0].to_local_frame();
    let penalty = jointpred_core::geometry::PenaltyParams { sharpness: 10.0, buffer: 40.0 };
    let report = |conditioned_penalty: f64| {
        let cfg = TrainingConfig { n_g: 2, n_r: 1, collision_weight: 1.0, penalty, conditioned_penalty, ..Default::default() };
        let tape = Tape::with_params(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        elbo_loss(&tape, &model, &window, &cfg, 0.5, &mut rng).unwrap().1
    };
    let (off, on) = (report(0.0), report(1.0));
    assert_eq!(off.likelihood, on.likelihood);
    assert_eq!(off.kl, on.kl);
    assert!(on.collision > off.collision, "{} vs {}", on.collision, off.collision);
    let cfg = TrainingConfig { conditioned_penalty: -1.0, ..Default::default() };
    assert!(cfg.validate().is_err());
}
