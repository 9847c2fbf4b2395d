//! Joint multi-agent trajectory prediction over interaction cliques.

pub mod autodiff;
pub mod data;
pub mod decoder;
pub mod dynamics;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod latent;
pub mod model;
pub mod planner;
pub mod plot;
pub mod scene_graph;
pub mod service;
pub mod synth;
pub mod trainer;

pub use data::{Pose, Scene, Track, TrainingWindow};
pub use dynamics::{Action, AgentKind, State};
pub use error::{Error, Result};
pub use geometry::{Body, Footprint};
pub use model::{Model, ModelConfig, PredictOptions, PredictionMode, PredictionSet};
pub use scene_graph::{Agent, AgentId, Clique};
pub use trainer::{LossReport, TrainingConfig};
