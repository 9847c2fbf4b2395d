//! Latent-conditioned reference trajectories and the closed-loop policy
//! rollout.
//!
//! References are `[x, y, vx, vy]` waypoints in the agent's frame at
//! prediction time, produced by a GRU emitting accelerations. Each rollout
//! step compares the state with the reference (tracking error `ds` and next
//! waypoint `ds_next`, both in the current body frame), pools the edge LSTM
//! states of all neighbours with attention, and feeds the action network.

use rand::Rng;

use crate::autodiff::{AttentionPool, GruCell, Linear, LstmCell, Mlp, ParamStore, Real, Tape, Var};
use crate::data::Pose;
use crate::dynamics::{self, AgentKind, State};
use crate::encoder::{edge_features, edge_type, node_features, slot, Encoder, Encodings};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scene_graph::Agent;

/// Reference accelerations are `tanh` outputs scaled by this, in m/s^2.
pub const REFERENCE_ACCEL: f64 = 4.0;
pub const TRACKING_SCALE: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Decoder {
    ref_init: Vec<Option<Linear>>,
    ref_gru: Vec<Option<GruCell>>,
    ref_out: Vec<Option<Linear>>,
    action: Vec<Option<Mlp>>,
    attention: Vec<Option<AttentionPool>>,
    edge_lstm: Vec<Option<LstmCell>>,
    card: usize,
    dt: f64,
}

pub type VarState<'a> = [Var<'a>; 4];

/// A rollout on the tape. `states[i]` holds the `T` predicted states of agent
/// `i`; `controls[i]` is empty for conditioned agents.
pub struct TapeRollout<'a> {
    pub states: Vec<Vec<VarState<'a>>>,
    pub controls: Vec<Vec<[Var<'a>; 2]>>,
}

impl TapeRollout<'_> {
    pub fn state_values(&self) -> Vec<Vec<State>> {
        self.states.iter().map(|s| s.iter().map(|v| v.map(|x| x.val())).collect()).collect()
    }

    pub fn control_values(&self) -> Vec<Vec<[f64; 2]>> {
        self.controls.iter().map(|s| s.iter().map(|v| v.map(|x| x.val())).collect()).collect()
    }
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let z = cfg.latent_card;
        let mut d = Decoder {
            ref_init: vec![None, None],
            ref_gru: vec![None, None],
            ref_out: vec![None, None],
            action: vec![None, None],
            attention: vec![None, None],
            edge_lstm: vec![None, None, None, None],
            card: z,
            dt: cfg.dt,
        };
        for &k in &cfg.kinds {
            let (n, i) = (k.name(), k.index());
            d.ref_init[i] = Some(Linear::new(store, &format!("dec.ref_init.{n}"), cfg.hidden + cfg.map_dim + z, cfg.ref_hidden, rng)?);
            d.ref_gru[i] = Some(GruCell::new(store, &format!("dec.ref_gru.{n}"), 4 + z, cfg.ref_hidden, rng)?);
            d.ref_out[i] = Some(Linear::new(store, &format!("dec.ref_out.{n}"), cfg.ref_hidden, 2, rng)?);
            let input = cfg.edge_hidden + z + 8 + cfg.pre_dim;
            d.action[i] = Some(Mlp::new(store, &format!("dec.action.{n}"), &[input, cfg.action_hidden, 2], rng)?);
            d.attention[i] = Some(AttentionPool::new(store, &format!("dec.attention.{n}"), cfg.pre_dim, cfg.edge_hidden, cfg.edge_hidden, rng)?);
        }
        for &a in &cfg.kinds {
            for &b in &cfg.kinds {
                let n = format!("{}_{}", a.name(), b.name());
                d.edge_lstm[edge_type(a, b)] = Some(LstmCell::new(store, &format!("dec.edge_lstm.{n}"), cfg.pre_dim, cfg.edge_hidden, rng)?);
            }
        }
        Ok(d)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `horizon + 1` waypoints in the agent's own frame; the first is the
    /// current state.
    pub fn reference<'a>(
        &self,
        tape: &'a Tape<'a>,
        agent: &Agent,
        node_encoding: Var<'a>,
        map: Var<'a>,
        z: usize,
        horizon: usize,
    ) -> Result<Vec<[Var<'a>; 4]>> {
        if z >= self.card {
            return Err(Error::Invalid(format!("latent value {z} outside 0..{}", self.card)));
        }
        let k = agent.kind;
        let onehot = {
            let mut v = vec![0.0; self.card];
            v[z] = 1.0;
            tape.constant(v)
        };
        let init = slot(&self.ref_init, k.index(), k)?;
        let gru = slot(&self.ref_gru, k.index(), k)?;
        let out = slot(&self.ref_out, k.index(), k)?;
        let mut h = init.forward(tape, tape.concat(&[node_encoding, map, onehot]))?.tanh();
        let frame = Pose::of(k, agent.current());
        let v0 = dynamics::velocity(k, agent.current());
        let (vx, vy) = frame.vector_to_local(v0[0], v0[1]);
        let mut wp = [tape.scalar(0.0), tape.scalar(0.0), tape.scalar(vx), tape.scalar(vy)];
        let mut refs = vec![wp];
        for _ in 0..horizon {
            let x = tape.concat(&[wp[0].scale(crate::encoder::POSITION_SCALE), wp[1].scale(crate::encoder::POSITION_SCALE),
                wp[2].scale(crate::encoder::VELOCITY_SCALE), wp[3].scale(crate::encoder::VELOCITY_SCALE), onehot]);
            h = gru.step(tape, x, h)?;
            let acc = out.forward(tape, h)?.tanh().scale(REFERENCE_ACCEL);
            let (ax, ay) = (acc.get(0), acc.get(1));
            wp = [wp[0] + wp[2] * self.dt, wp[1] + wp[3] * self.dt, wp[2] + ax * self.dt, wp[3] + ay * self.dt];
            refs.push(wp);
        }
        Ok(refs)
    }

    /// Closed-loop rollout of one joint mode. `z[i]` is `None` exactly for
    /// conditioned agents, whose states are taken from `fixed[i]`.
    #[allow(clippy::too_many_arguments)]
    pub fn rollout<'a>(
        &self,
        tape: &'a Tape<'a>,
        encoder: &Encoder,
        agents: &[Agent],
        enc: &Encodings<'a>,
        z: &[Option<usize>],
        fixed: &[Option<Vec<State>>],
        horizon: usize,
    ) -> Result<TapeRollout<'a>> {
        let n = agents.len();
        if z.len() != n || fixed.len() != n {
            return Err(Error::Shape("latent/conditioning vectors must match the clique".into()));
        }
        for i in 0..n {
            match (&z[i], &fixed[i]) {
                (Some(_), None) => {}
                (None, Some(f)) if f.len() >= horizon => {}
                (None, Some(_)) => return Err(Error::Invalid(format!("agent {}: fixed trajectory shorter than horizon", agents[i].id))),
                _ => return Err(Error::Invalid(format!("agent {}: needs exactly one of latent or fixed trajectory", agents[i].id))),
            }
        }
        let poses: Vec<Pose> = agents.iter().map(|a| Pose::of(a.kind, a.current())).collect();
        // References in scene coordinates.
        let mut refs: Vec<Option<Vec<[Var<'a>; 4]>>> = Vec::with_capacity(n);
        for i in 0..n {
            refs.push(match z[i] {
                None => None,
                Some(zi) => {
                    let local = self.reference(tape, &agents[i], enc.node[i], enc.map[i], zi, horizon)?;
                    let (c, s) = (poses[i].heading.cos(), poses[i].heading.sin());
                    Some(
                        local
                            .into_iter()
                            .map(|w| {
                                [
                                    w[0] * c - w[1] * s + poses[i].x,
                                    w[0] * s + w[1] * c + poses[i].y,
                                    w[2] * c - w[3] * s,
                                    w[2] * s + w[3] * c,
                                ]
                            })
                            .collect(),
                    )
                }
            });
        }
        let mut cur: Vec<VarState<'a>> = agents.iter().map(|a| a.current().map(|v| tape.scalar(v))).collect();
        let mut edge_state: Vec<Vec<Option<(Var<'a>, Var<'a>)>>> = vec![vec![None; n]; n];
        for i in 0..n {
            if z[i].is_none() {
                continue;
            }
            for j in 0..n {
                if i != j {
                    edge_state[i][j] = Some(slot(&self.edge_lstm, edge_type(agents[i].kind, agents[j].kind), agents[i].kind)?.zero_state(tape));
                }
            }
        }
        let mut states = vec![Vec::with_capacity(horizon); n];
        let mut controls = vec![Vec::new(); n];
        for t in 0..horizon {
            let mut next = cur.clone();
            for i in 0..n {
                let Some(zi) = z[i] else {
                    next[i] = fixed[i].as_ref().expect("validated")[t].map(|v| tape.scalar(v));
                    continue;
                };
                let a = &agents[i];
                let k = a.kind;
                let s = cur[i];
                let feats = node_features(k, &s, &poses[i]);
                let query = encoder.pre_encode_node(tape, k, tape.concat(&feats))?;
                let mut keys = Vec::with_capacity(n.saturating_sub(1));
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let b = &agents[j];
                    let f = edge_features((k, a.footprint, &s), (b.kind, b.footprint, &cur[j]));
                    let x = encoder.pre_encode_edge(tape, k, b.kind, tape.concat(&f))?;
                    let lstm = slot(&self.edge_lstm, edge_type(k, b.kind), k)?;
                    let st = lstm.step(tape, x, edge_state[i][j].expect("initialized"))?;
                    edge_state[i][j] = Some(st);
                    keys.push(st.0);
                }
                let (ctx, _) = slot(&self.attention, k.index(), k)?.pool(tape, query, &keys)?;
                let r = refs[i].as_ref().expect("unconditioned agent has a reference");
                let track = tracking_errors(k, &s, &r[t], &r[t + 1]);
                let onehot = {
                    let mut v = vec![0.0; self.card];
                    v[zi] = 1.0;
                    tape.constant(v)
                };
                let input = tape.concat(&[ctx, onehot, tape.concat(&track), query]);
                let out = slot(&self.action, k.index(), k)?.forward(tape, input)?;
                let bounds = k.action_bounds();
                let raw = [out.get(0) * bounds[0], out.get(1) * bounds[1]];
                let u = dynamics::clamp_action(&raw, k);
                next[i] = dynamics::step(k, &s, &u, self.dt);
                controls[i].push(u);
            }
            for i in 0..n {
                states[i].push(next[i]);
            }
            cur = next;
        }
        Ok(TapeRollout { states, controls })
    }
}

/// `[ds (4), ds_next (4)]` in the body frame of `s`, scaled.
fn tracking_errors<R: Real>(kind: AgentKind, s: &[R; 4], r: &[R; 4], r_next: &[R; 4]) -> Vec<R> {
    let (c, sn) = match kind {
        AgentKind::Vehicle => (s[3].cos(), s[3].sin()),
        AgentKind::Pedestrian => (s[0].lift(1.0), s[0].lift(0.0)),
    };
    let v = dynamics::velocity(kind, s);
    let rot = |x: R, y: R| (x * c + y * sn, y * c - x * sn);
    let mut out = Vec::with_capacity(8);
    for w in [r, r_next] {
        let (px, py) = rot(w[0] - s[0], w[1] - s[1]);
        let (vx, vy) = rot(w[2] - v[0], w[3] - v[1]);
        out.extend([px * TRACKING_SCALE, py * TRACKING_SCALE, vx * TRACKING_SCALE, vy * TRACKING_SCALE]);
    }
    out
}
