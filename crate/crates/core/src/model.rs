//! Model container, checkpoints and the inference path.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, ParamStore, Tape};
use crate::decoder::Decoder;
use crate::dynamics::{Action, AgentKind, State};
use crate::encoder::{Encoder, FactorMode};
use crate::error::{Error, Result};
use crate::latent::{self, Assignment};
use crate::scene_graph::{Agent, AgentId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Values per agent latent.
    pub latent_card: usize,
    pub pre_dim: usize,
    pub hidden: usize,
    pub edge_hidden: usize,
    pub factor_hidden: usize,
    pub ref_hidden: usize,
    pub action_hidden: usize,
    /// Length of the optional per-agent map vector; 0 disables it.
    pub map_dim: usize,
    pub kinds: Vec<AgentKind>,
    pub history: usize,
    pub future: usize,
    pub dt: f64,
    pub max_clique: usize,
    pub enumeration_cap: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_card: 6,
            pre_dim: 32,
            hidden: 64,
            edge_hidden: 64,
            factor_hidden: 64,
            ref_hidden: 64,
            action_hidden: 64,
            map_dim: 0,
            kinds: AgentKind::ALL.to_vec(),
            history: 4,
            future: 8,
            dt: 0.5,
            max_clique: 4,
            enumeration_cap: latent::DEFAULT_CAP,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn pedestrians() -> Self {
        ModelConfig { kinds: vec![AgentKind::Pedestrian], history: 8, future: 12, dt: 0.4, max_clique: 5, ..Self::default() }
    }

    pub fn vehicles() -> Self {
        ModelConfig { kinds: vec![AgentKind::Vehicle], ..Self::default() }
    }

    /// Shrinks every hidden width to `width`.
    pub fn with_width(mut self, width: usize) -> Self {
        self.pre_dim = width.div_ceil(2).max(4);
        self.hidden = width;
        self.edge_hidden = width;
        self.factor_hidden = width;
        self.ref_hidden = width;
        self.action_hidden = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.latent_card, self.pre_dim, self.hidden, self.edge_hidden, self.factor_hidden, self.ref_hidden, self.action_hidden];
        if dims.contains(&0) {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        if self.kinds.is_empty() || self.future == 0 || !(self.dt > 0.0) || self.max_clique == 0 {
            return Err(Error::Invalid("model needs agent kinds, a horizon, positive dt and a clique cap".into()));
        }
        Ok(())
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

const CHECKPOINT_KIND: &str = "jointpred-model";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub k: usize,
    pub beta: usize,
    /// Fixed future trajectories (at least `future` states each).
    pub conditioned: BTreeMap<AgentId, Vec<State>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPrediction {
    pub id: AgentId,
    pub kind: AgentKind,
    pub conditioned: bool,
    /// `T` future states; the current state is not repeated.
    pub states: Vec<State>,
    /// `T` controls; empty for conditioned agents.
    pub controls: Vec<Action>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMode {
    /// Latent value per agent; `None` for conditioned agents.
    pub z: Vec<Option<usize>>,
    pub probability: f64,
    pub agents: Vec<AgentPrediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub agents: Vec<AgentId>,
    pub modes: Vec<PredictionMode>,
}

impl PredictionSet {
    pub fn most_likely(&self) -> Option<&PredictionMode> {
        self.modes.first()
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng)?;
        let decoder = Decoder::new(&mut store, &config, &mut rng)?;
        Ok(Model { config, store, encoder, decoder })
    }

    pub fn supports(&self, kind: AgentKind) -> bool {
        self.config.kinds.contains(&kind)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "kind": CHECKPOINT_KIND, "config": self.config });
        Checkpoint::from_store(&self.store, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.metadata.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Checkpoint("not a model checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(ck.metadata["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let mut model = Model::new(config)?;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn content_hash(&self) -> String {
        self.checkpoint().content_hash()
    }

    fn check_clique(&self, agents: &[Agent]) -> Result<()> {
        if agents.is_empty() {
            return Err(Error::Invalid("empty clique".into()));
        }
        for a in agents {
            if !self.supports(a.kind) {
                return Err(Error::UnsupportedKind(a.kind));
            }
            if a.history.len() != agents[0].history.len() || a.history.is_empty() {
                return Err(Error::Shape("clique members need equal, non-empty histories".into()));
            }
        }
        if agents.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(Error::Invalid("clique agents must be sorted by unique id".into()));
        }
        Ok(())
    }

    /// Prior latent distribution of a clique.
    pub fn prior(&self, agents: &[Agent]) -> Result<latent::GibbsLatent> {
        self.check_clique(agents)?;
        crate::encoder::prior_tables(&self.encoder, &self.store, agents)?.gibbs(self.config.enumeration_cap)
    }

    /// Joint prediction for one clique (agents sorted by id). No randomness.
    pub fn predict(&self, agents: &[Agent], options: &PredictOptions) -> Result<PredictionSet> {
        self.check_clique(agents)?;
        if agents.len() > self.config.max_clique {
            log::warn!("clique of {} exceeds the trained maximum {}", agents.len(), self.config.max_clique);
        }
        let horizon = self.config.future;
        let pinned: Vec<usize> = (0..agents.len()).filter(|&i| options.conditioned.contains_key(&agents[i].id)).collect();
        for id in options.conditioned.keys() {
            if !agents.iter().any(|a| a.id == *id) {
                return Err(Error::Invalid(format!("conditioned agent {id} is not in the clique")));
            }
        }
        let fixed: Vec<Option<Vec<State>>> = agents.iter().map(|a| options.conditioned.get(&a.id).cloned()).collect();
        for (a, f) in agents.iter().zip(&fixed) {
            if let Some(f) = f {
                if f.len() < horizon {
                    return Err(Error::Invalid(format!("agent {}: fixed trajectory has {} states, need {horizon}", a.id, f.len())));
                }
            }
        }

        let tape = Tape::with_params(&self.store);
        let enc = self.encoder.encode(&tape, agents, false)?;
        let tables = self.encoder.factors(&tape, agents, &enc, FactorMode::Prior)?.tables();
        let gibbs = tables.gibbs(self.config.enumeration_cap)?.condition(&pinned)?;
        let picks = gibbs.diverse_sample(options.k.max(1), options.beta);
        let total: f64 = picks.iter().map(|p| p.1).sum();
        let free: Vec<usize> = (0..agents.len()).filter(|i| !pinned.contains(i)).collect();

        let mut modes = Vec::with_capacity(picks.len());
        for (reduced, p) in picks {
            let z = expand(&reduced, &free, agents.len());
            let roll = self.decoder.rollout(&tape, &self.encoder, agents, &enc, &z, &fixed, horizon)?;
            let states = roll.state_values();
            let controls = roll.control_values();
            let per_agent = agents
                .iter()
                .enumerate()
                .map(|(i, a)| AgentPrediction {
                    id: a.id,
                    kind: a.kind,
                    conditioned: z[i].is_none(),
                    states: match &fixed[i] {
                        Some(f) => f[..horizon].to_vec(),
                        None => states[i].clone(),
                    },
                    controls: controls[i].clone(),
                })
                .collect();
            modes.push(PredictionMode { z, probability: p / total, agents: per_agent });
        }
        Ok(PredictionSet { agents: agents.iter().map(|a| a.id).collect(), modes })
    }
}

/// Spreads a reduced assignment over the full clique, `None` at pinned slots.
pub fn expand(reduced: &Assignment, free: &[usize], n: usize) -> Vec<Option<usize>> {
    let mut z = vec![None; n];
    for (k, &i) in free.iter().enumerate() {
        z[i] = Some(reduced[k]);
    }
    z
}
