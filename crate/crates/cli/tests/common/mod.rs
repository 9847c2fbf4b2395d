#![allow(dead_code)]

use std::path::Path;

use jointpred_core::synth::{synth_scenarios, SynthSpec, Template};
use jointpred_core::{Model, ModelConfig, Scene};

/// Small untrained vehicle model; deterministic in `seed`.
pub fn model(seed: u64) -> Model {
    Model::new(ModelConfig { seed, ..ModelConfig::vehicles().with_width(8) }).unwrap()
}

pub fn following_scenes(count: usize, seed: u64) -> Vec<Scene> {
    synth_scenarios(&SynthSpec::new(Template::CarFollowing, count), seed).unwrap()
}

/// Scene with a follower (id 1) and its leader (id 2).
pub fn following_scene() -> Scene {
    following_scenes(1, 11).remove(0)
}

pub fn write_model(dir: &Path, seed: u64) -> std::path::PathBuf {
    let path = dir.join(format!("model-{seed}.ckpt"));
    model(seed).save(&path).unwrap();
    path
}
