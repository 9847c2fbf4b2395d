//! History/future encoders and the node and edge factor networks that define
//! the prior `P(z | x)` and posterior `Q(z | x, y)`.
//!
//! Node features are taken in the agent's own frame at prediction time:
//! vehicles `[x, y, v, cos dpsi, sin dpsi]`, pedestrians `[x, y, vx, vy]`.
//! Edge features are seen from the observer's instantaneous frame: relative
//! position, relative velocity and both footprint extents.

use rand::Rng;

use crate::autodiff::{Linear, LstmCell, Mlp, ParamStore, Real, Tape, Var};
use crate::data::Pose;
use crate::dynamics::{self, AgentKind};
use crate::error::{Error, Result};
use crate::geometry::Footprint;
use crate::latent::{self, EdgeFactor, GibbsLatent};
use crate::model::ModelConfig;
use crate::scene_graph::Agent;

pub const POSITION_SCALE: f64 = 0.1;
pub const VELOCITY_SCALE: f64 = 0.2;
pub const SIZE_SCALE: f64 = 0.25;
pub const EDGE_FEATURES: usize = 8;

pub fn node_feature_dim(kind: AgentKind) -> usize {
    match kind {
        AgentKind::Vehicle => 5,
        AgentKind::Pedestrian => 4,
    }
}

pub fn node_features<R: Real>(kind: AgentKind, s: &[R; 4], frame: &Pose) -> Vec<R> {
    let l = frame.state_to_local(kind, s);
    match kind {
        AgentKind::Vehicle => vec![
            l[0] * POSITION_SCALE,
            l[1] * POSITION_SCALE,
            l[2] * VELOCITY_SCALE,
            l[3].cos(),
            l[3].sin(),
        ],
        AgentKind::Pedestrian => {
            vec![l[0] * POSITION_SCALE, l[1] * POSITION_SCALE, l[2] * VELOCITY_SCALE, l[3] * VELOCITY_SCALE]
        }
    }
}

/// Features of `other` as seen by `me`.
pub fn edge_features<R: Real>(me: (AgentKind, Footprint, &[R; 4]), other: (AgentKind, Footprint, &[R; 4])) -> [R; 8] {
    let (ki, fi, si) = me;
    let (kj, fj, sj) = other;
    let (c, s) = match ki {
        AgentKind::Vehicle => (si[3].cos(), si[3].sin()),
        AgentKind::Pedestrian => (si[0].lift(1.0), si[0].lift(0.0)),
    };
    let rot = |x: R, y: R| (x * c + y * s, y * c - x * s);
    let (px, py) = rot(sj[0] - si[0], sj[1] - si[1]);
    let vi = dynamics::velocity(ki, si);
    let vj = dynamics::velocity(kj, sj);
    let (vx, vy) = rot(vj[0] - vi[0], vj[1] - vi[1]);
    let (li, wi) = fi.extent();
    let (lj, wj) = fj.extent();
    let k = si[0].lift(SIZE_SCALE);
    [
        px * POSITION_SCALE,
        py * POSITION_SCALE,
        vx * VELOCITY_SCALE,
        vy * VELOCITY_SCALE,
        k * li,
        k * wi,
        k * lj,
        k * wj,
    ]
}

/// Ordered edge type index for observer kind `a` and observed kind `b`.
pub fn edge_type(a: AgentKind, b: AgentKind) -> usize {
    2 * a.index() + b.index()
}

pub(crate) fn slot<'m, T>(items: &'m [Option<T>], index: usize, kind: AgentKind) -> Result<&'m T> {
    items.get(index).and_then(Option::as_ref).ok_or(Error::UnsupportedKind(kind))
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

#[derive(Debug, Clone)]
pub struct Encoder {
    /// Per node kind; shared with the decoder.
    pub node_pre: Vec<Option<Linear>>,
    /// Per ordered edge type; shared with the decoder.
    pub edge_pre: Vec<Option<Linear>>,
    history: Vec<Option<LstmCell>>,
    edge_history: Vec<Option<LstmCell>>,
    future: Vec<Option<LstmCell>>,
    prior_node: Vec<Option<Mlp>>,
    posterior_node: Vec<Option<Mlp>>,
    prior_edge: Vec<Option<Mlp>>,
    posterior_edge: Vec<Option<Mlp>>,
    card: usize,
    map_dim: usize,
}

/// Encodings of one clique. `edge[i][j]` encodes `j` as seen by `i`.
pub struct Encodings<'a> {
    pub node: Vec<Var<'a>>,
    pub future: Option<Vec<Var<'a>>>,
    pub edge: Vec<Vec<Option<Var<'a>>>>,
    pub map: Vec<Var<'a>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorMode {
    Prior,
    Posterior,
}

/// Factor tables on the tape. Edges are listed for `i < j` in clique order.
pub struct TapeFactors<'a> {
    pub node: Vec<Var<'a>>,
    pub edge: Vec<(usize, usize, Var<'a>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorTables {
    pub node: Vec<Vec<f64>>,
    pub edges: Vec<EdgeFactor>,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let kinds = &cfg.kinds;
        let z = cfg.latent_card;
        let mut node_pre = vec![None, None];
        let mut history = vec![None, None];
        let mut future = vec![None, None];
        let mut prior_node = vec![None, None];
        let mut posterior_node = vec![None, None];
        for &k in kinds {
            let n = k.name();
            let i = k.index();
            node_pre[i] = Some(Linear::new(store, &format!("enc.node_pre.{n}"), node_feature_dim(k), cfg.pre_dim, rng)?);
            history[i] = Some(LstmCell::new(store, &format!("enc.history.{n}"), cfg.pre_dim, cfg.hidden, rng)?);
            future[i] = Some(LstmCell::new(store, &format!("enc.future.{n}"), cfg.pre_dim, cfg.hidden, rng)?);
            prior_node[i] = Some(Mlp::new(store, &format!("enc.prior_node.{n}"), &[cfg.hidden + cfg.map_dim, cfg.factor_hidden, z], rng)?);
            posterior_node[i] = Some(Mlp::new(
                store,
                &format!("enc.posterior_node.{n}"),
                &[2 * cfg.hidden + cfg.map_dim, cfg.factor_hidden, z],
                rng,
            )?);
        }
        let mut edge_pre = vec![None, None, None, None];
        let mut edge_history = vec![None, None, None, None];
        let mut prior_edge = vec![None, None, None, None];
        let mut posterior_edge = vec![None, None, None, None];
        for &a in kinds {
            for &b in kinds {
                let t = edge_type(a, b);
                let n = format!("{}_{}", a.name(), b.name());
                edge_pre[t] = Some(Linear::new(store, &format!("enc.edge_pre.{n}"), EDGE_FEATURES, cfg.pre_dim, rng)?);
                edge_history[t] = Some(LstmCell::new(store, &format!("enc.edge_history.{n}"), cfg.pre_dim, cfg.edge_hidden, rng)?);
                let base = 2 * cfg.hidden + 2 * cfg.edge_hidden;
                prior_edge[t] = Some(Mlp::new(store, &format!("enc.prior_edge.{n}"), &[base, cfg.factor_hidden, z * z], rng)?);
                posterior_edge[t] = Some(Mlp::new(
                    store,
                    &format!("enc.posterior_edge.{n}"),
                    &[base + 2 * cfg.hidden, cfg.factor_hidden, z * z],
                    rng,
                )?);
            }
        }
        Ok(Encoder {
            node_pre,
            edge_pre,
            history,
            edge_history,
            future,
            prior_node,
            posterior_node,
            prior_edge,
            posterior_edge,
            card: z,
            map_dim: cfg.map_dim,
        })
    }

    pub fn pre_encode_node<'a>(&self, tape: &'a Tape<'a>, kind: AgentKind, features: Var<'a>) -> Result<Var<'a>> {
        Ok(slot(&self.node_pre, kind.index(), kind)?.forward(tape, features)?.tanh())
    }

    pub fn pre_encode_edge<'a>(&self, tape: &'a Tape<'a>, a: AgentKind, b: AgentKind, features: Var<'a>) -> Result<Var<'a>> {
        Ok(slot(&self.edge_pre, edge_type(a, b), a)?.forward(tape, features)?.tanh())
    }

    fn map_var<'a>(&self, tape: &'a Tape<'a>, agent: &Agent) -> Result<Var<'a>> {
        match &agent.map {
            Some(m) if m.len() == self.map_dim => Ok(tape.constant(m.clone())),
            Some(m) => Err(Error::Shape(format!("agent {}: map vector has {} entries, model expects {}", agent.id, m.len(), self.map_dim))),
            None => Ok(tape.zeros(self.map_dim)),
        }
    }

    /// Encodes a clique. Agents must share the history length; futures are
    /// required when `with_future` is set.
    pub fn encode<'a>(&self, tape: &'a Tape<'a>, agents: &[Agent], with_future: bool) -> Result<Encodings<'a>> {
        let n = agents.len();
        let mut node = Vec::with_capacity(n);
        let mut map = Vec::with_capacity(n);
        let mut futures = Vec::new();
        for a in agents {
            let frame = Pose::of(a.kind, a.current());
            let lstm = slot(&self.history, a.kind.index(), a.kind)?;
            let mut state = lstm.zero_state(tape);
            for s in &a.history {
                let x = self.pre_encode_node(tape, a.kind, tape.constant(node_features(a.kind, s, &frame)))?;
                state = lstm.step(tape, x, state)?;
            }
            node.push(state.0);
            map.push(self.map_var(tape, a)?);
            if with_future {
                let fut = a.future.as_ref().ok_or(Error::MissingFuture)?;
                let lstm = slot(&self.future, a.kind.index(), a.kind)?;
                let mut state = lstm.zero_state(tape);
                for s in fut {
                    let x = self.pre_encode_node(tape, a.kind, tape.constant(node_features(a.kind, s, &frame)))?;
                    state = lstm.step(tape, x, state)?;
                }
                futures.push(state.0);
            }
        }
        let mut edge = vec![vec![None; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (a, b) = (&agents[i], &agents[j]);
                if a.history.len() != b.history.len() {
                    return Err(Error::Shape("clique members have different history lengths".into()));
                }
                let lstm = slot(&self.edge_history, edge_type(a.kind, b.kind), a.kind)?;
                let mut state = lstm.zero_state(tape);
                for (si, sj) in a.history.iter().zip(&b.history) {
                    let f = edge_features((a.kind, a.footprint, si), (b.kind, b.footprint, sj));
                    let x = self.pre_encode_edge(tape, a.kind, b.kind, tape.constant(f.to_vec()))?;
                    state = lstm.step(tape, x, state)?;
                }
                edge[i][j] = Some(state.0);
            }
        }
        Ok(Encodings { node, future: with_future.then_some(futures), edge, map })
    }

    pub fn factors<'a>(&self, tape: &'a Tape<'a>, agents: &[Agent], enc: &Encodings<'a>, mode: FactorMode) -> Result<TapeFactors<'a>> {
        let fut = match mode {
            FactorMode::Prior => None,
            FactorMode::Posterior => Some(enc.future.as_ref().ok_or(Error::MissingFuture)?),
        };
        let n = agents.len();
        let mut node = Vec::with_capacity(n);
        for (i, a) in agents.iter().enumerate() {
            let k = a.kind.index();
            let out = match fut {
                None => slot(&self.prior_node, k, a.kind)?.forward(tape, tape.concat(&[enc.node[i], enc.map[i]]))?,
                Some(f) => slot(&self.posterior_node, k, a.kind)?.forward(tape, tape.concat(&[enc.node[i], f[i], enc.map[i]]))?,
            };
            node.push(out);
        }
        let mut edge = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                // Clique order is id order, so (i, j) is the canonical orientation.
                let t = edge_type(agents[i].kind, agents[j].kind);
                let eij = enc.edge[i][j].expect("edge encoding");
                let eji = enc.edge[j][i].expect("edge encoding");
                let mut parts = vec![enc.node[i], enc.node[j], eij, eji];
                let net = match fut {
                    None => slot(&self.prior_edge, t, agents[i].kind)?,
                    Some(f) => {
                        parts.push(f[i]);
                        parts.push(f[j]);
                        slot(&self.posterior_edge, t, agents[i].kind)?
                    }
                };
                edge.push((i, j, net.forward(tape, tape.concat(&parts))?));
            }
        }
        Ok(TapeFactors { node, edge })
    }

    pub fn card(&self) -> usize {
        self.card
    }

    pub fn one_hot<'a>(&self, tape: &'a Tape<'a>, z: usize) -> Var<'a> {
        tape.constant(one_hot(self.card, z))
    }
}

impl<'a> TapeFactors<'a> {
    pub fn cards(&self) -> Vec<usize> {
        self.node.iter().map(|v| v.len()).collect()
    }

    /// Normalized joint log-probabilities over all assignments.
    pub fn joint_log_probs(&self, tape: &'a Tape<'a>, cap: usize) -> Result<Var<'a>> {
        let cards = self.cards();
        let size = cards.iter().try_fold(1usize, |a, &c| a.checked_mul(c)).unwrap_or(usize::MAX);
        if size > cap {
            return Err(Error::EnumerationCap { size, cap });
        }
        let mut score = tape.zeros(size);
        for (i, f) in self.node.iter().enumerate() {
            score = score + f.gather(latent::node_gather(&cards, i));
        }
        for (i, j, f) in &self.edge {
            score = score + f.gather(latent::edge_gather(&cards, *i, *j));
        }
        Ok(score.log_softmax())
    }

    pub fn tables(&self) -> FactorTables {
        FactorTables {
            node: self.node.iter().map(Var::to_vec).collect(),
            edges: self.edge.iter().map(|(i, j, f)| EdgeFactor { i: *i, j: *j, table: f.to_vec() }).collect(),
        }
    }
}

impl FactorTables {
    pub fn gibbs(&self, cap: usize) -> Result<GibbsLatent> {
        let cards = self.node.iter().map(Vec::len).collect();
        GibbsLatent::new(cards, self.node.clone(), self.edges.clone(), cap)
    }
}

/// Convenience: prior factor tables for a clique, evaluated without gradients.
pub fn prior_tables(encoder: &Encoder, store: &ParamStore, agents: &[Agent]) -> Result<FactorTables> {
    let tape = Tape::with_params(store);
    let enc = encoder.encode(&tape, agents, false)?;
    Ok(encoder.factors(&tape, agents, &enc, FactorMode::Prior)?.tables())
}

pub fn posterior_tables(encoder: &Encoder, store: &ParamStore, agents: &[Agent]) -> Result<FactorTables> {
    let tape = Tape::with_params(store);
    let enc = encoder.encode(&tape, agents, true)?;
    Ok(encoder.factors(&tape, agents, &enc, FactorMode::Posterior)?.tables())
}
