//! Fixtures shared by the benchmarks.

use jointpred_core::data::{windows, TrainingWindow, WindowConfig};
use jointpred_core::latent::{EdgeFactor, GibbsLatent};
use jointpred_core::synth::{synth_scenarios, SynthSpec, Template};
use jointpred_core::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fully connected clique of `n` agents with `card` values each.
pub fn random_gibbs(n: usize, card: usize, seed: u64) -> GibbsLatent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let node = (0..n).map(|_| (0..card).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push(EdgeFactor { i, j, table: (0..card * card).map(|_| rng.gen_range(-2.0..2.0)).collect() });
        }
    }
    GibbsLatent::new(vec![card; n], node, edges, usize::MAX).expect("valid factors")
}

pub fn vehicle_model(width: usize) -> Model {
    Model::new(ModelConfig { seed: 1, ..ModelConfig::vehicles().with_width(width) }).expect("valid config")
}

/// Two-vehicle crossing windows in their local frames.
pub fn crossing_windows(count: usize) -> Vec<TrainingWindow> {
    let scenes = synth_scenarios(&SynthSpec::new(Template::IntersectionYieldOrGo, count), 3).expect("synthesizable");
    scenes.iter().flat_map(|s| windows(s, &WindowConfig::vehicles())).map(|w| w.to_local_frame()).collect()
}
