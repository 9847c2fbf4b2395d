//! Scene-level requests shared by the command line and the HTTP service:
//! snapshot a scene, group agents into cliques, turn conditioning directives
//! into fixed trajectories and predict every clique.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::dynamics::{self, Action, AgentKind, State};
use crate::error::{Error, Result};
use crate::geometry::Footprint;
use crate::model::{AgentPrediction, Model, PredictOptions, PredictionMode, PredictionSet};
use crate::planner::{self, ContingencyPlan, CostWeights, LaneReference, Limits, Obstacle, PlanMode, PlanProblem, SolverOptions};
use crate::scene_graph::{self, Agent, AgentId, GraphConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Constant-acceleration maneuver, written `brake a=-4` or
/// `accelerate a=4 cap=15`. `keep` holds the current velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Maneuver {
    /// Decelerate at `|accel|` until stopped; never reverses.
    Brake { accel: f64 },
    /// Speed up at `accel` until `cap` m/s.
    Accelerate { accel: f64, cap: f64 },
    Keep,
}

pub const DEFAULT_BRAKE: f64 = -4.0;
pub const DEFAULT_ACCEL: f64 = 4.0;

fn default_cap(kind: AgentKind) -> f64 {
    match kind {
        AgentKind::Vehicle => Limits::default().v_max,
        AgentKind::Pedestrian => 2.5,
    }
}

impl Maneuver {
    pub fn parse(text: &str) -> Result<Self> {
        let mut words = text.split_whitespace();
        let verb = words.next().ok_or_else(|| Error::Invalid("empty maneuver".into()))?;
        let mut args = BTreeMap::new();
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(|| Error::Invalid(format!("maneuver argument {w:?} is not key=value")))?;
            let v: f64 = v.parse().map_err(|_| Error::Invalid(format!("maneuver argument {w:?} is not numeric")))?;
            if !v.is_finite() {
                return Err(Error::Invalid(format!("maneuver argument {w:?} is not finite")));
            }
            args.insert(k.to_string(), v);
        }
        let allow = |keys: &[&str]| match args.keys().find(|k| !keys.contains(&k.as_str())) {
            Some(k) => Err(Error::Invalid(format!("unknown maneuver argument {k:?} for {verb}"))),
            None => Ok(()),
        };
        match verb {
            "brake" => {
                allow(&["a"])?;
                let accel = args.get("a").copied().unwrap_or(DEFAULT_BRAKE);
                if accel >= 0.0 {
                    return Err(Error::Invalid("brake needs a negative acceleration".into()));
                }
                Ok(Maneuver::Brake { accel })
            }
            "accelerate" => {
                allow(&["a", "cap"])?;
                let accel = args.get("a").copied().unwrap_or(DEFAULT_ACCEL);
                if accel <= 0.0 {
                    return Err(Error::Invalid("accelerate needs a positive acceleration".into()));
                }
                let cap = args.get("cap").copied().unwrap_or(f64::NAN);
                if cap < 0.0 {
                    return Err(Error::Invalid("speed cap must be non-negative".into()));
                }
                Ok(Maneuver::Accelerate { accel, cap })
            }
            "keep" => {
                allow(&[])?;
                Ok(Maneuver::Keep)
            }
            other => Err(Error::Invalid(format!("unknown maneuver {other:?}"))),
        }
    }

    /// Integrates the maneuver from `s0` for `horizon` steps. Returns the
    /// `horizon` states after `s0`.
    pub fn rollout(&self, kind: AgentKind, s0: &State, horizon: usize, dt: f64) -> Result<Vec<State>> {
        let bound = kind.action_bounds()[0];
        let (rate, target) = match *self {
            Maneuver::Brake { accel } => (-accel, 0.0),
            Maneuver::Accelerate { accel, cap } => (accel, if cap.is_nan() { default_cap(kind) } else { cap }),
            Maneuver::Keep => (0.0, f64::NAN),
        };
        if rate > bound {
            return Err(Error::Invalid(format!("|a| = {rate} exceeds the {} bound {bound}", kind.name())));
        }
        let mut out = Vec::with_capacity(horizon);
        let mut s = *s0;
        for _ in 0..horizon {
            let speed = dynamics::speed(kind, &s);
            let dv = if target.is_nan() { 0.0 } else { ((target - speed) / dt).clamp(-rate, rate) };
            let a: Action = match kind {
                AgentKind::Vehicle => [dv, 0.0],
                AgentKind::Pedestrian => {
                    let (ux, uy) = if speed > 1e-9 { (s[2] / speed, s[3] / speed) } else { (1.0, 0.0) };
                    [dv * ux, dv * uy]
                }
            };
            s = dynamics::step_checked(kind, &s, &a, dt)?;
            if target == 0.0 {
                // Landing exactly on zero can leave rounding residue.
                match kind {
                    AgentKind::Vehicle => s[2] = s[2].max(0.0),
                    AgentKind::Pedestrian if dynamics::speed(kind, &s) < 1e-9 => {
                        s[2] = 0.0;
                        s[3] = 0.0;
                    }
                    AgentKind::Pedestrian => {}
                }
            }
            out.push(s);
        }
        Ok(out)
    }
}

/// How to fix one agent's future: a maneuver macro or explicit states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Directive {
    Maneuver { maneuver: String },
    Trajectory { trajectory: Vec<State> },
}

fn default_k() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub scene: Scene,
    /// Frame to predict from; defaults to the last frame of the scene.
    #[serde(default)]
    pub frame: Option<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub beta: usize,
    #[serde(default)]
    pub conditioning: BTreeMap<AgentId, Directive>,
    /// Wall-clock timings make responses non-reproducible, so they are opt-in.
    #[serde(default)]
    pub include_timings: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliquePrediction {
    pub agents: Vec<AgentId>,
    pub prediction: PredictionSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_ms: f64,
    pub per_clique_ms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub schema_version: u32,
    pub scene_id: String,
    pub frame: usize,
    pub model_hash: String,
    pub cliques: Vec<CliquePrediction>,
    /// Agents without enough history or of a kind the model does not handle.
    pub skipped: Vec<AgentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

/// Agents a request can predict plus the frame used.
fn snapshot(model: &Model, scene: &Scene, frame: Option<usize>) -> Result<(usize, Vec<Agent>, Vec<AgentId>)> {
    scene.validate()?;
    if (scene.dt - model.config.dt).abs() > 1e-9 {
        return Err(Error::Invalid(format!("scene dt {} differs from the model's {}", scene.dt, model.config.dt)));
    }
    let frames = scene.frames();
    let frame = frame.unwrap_or(frames.saturating_sub(1));
    if frame >= frames {
        return Err(Error::Invalid(format!("frame {frame} is outside the scene ({frames} frames)")));
    }
    let snap = scene.snapshot(frame, model.config.history, 0);
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for mut a in snap {
        if model.supports(a.kind) {
            a.future = None;
            kept.push(a);
        } else {
            skipped.push(a.id);
        }
    }
    for t in &scene.agents {
        if !kept.iter().any(|a| a.id == t.id) && !skipped.contains(&t.id) {
            skipped.push(t.id);
        }
    }
    skipped.sort_unstable();
    Ok((frame, kept, skipped))
}

fn graph_config(model: &Model) -> GraphConfig {
    GraphConfig { horizon: model.config.future, dt: model.config.dt, ..GraphConfig::default() }
}

/// Fixed future states per conditioned agent. Unknown ids are reported as
/// [`Error::UnknownAgent`].
pub fn resolve_directives(model: &Model, agents: &[Agent], directives: &BTreeMap<AgentId, Directive>) -> Result<BTreeMap<AgentId, Vec<State>>> {
    let horizon = model.config.future;
    let mut out = BTreeMap::new();
    for (&id, d) in directives {
        let agent = agents.iter().find(|a| a.id == id).ok_or(Error::UnknownAgent(id))?;
        let states = match d {
            Directive::Maneuver { maneuver } => Maneuver::parse(maneuver)?.rollout(agent.kind, agent.current(), horizon, model.config.dt)?,
            Directive::Trajectory { trajectory } => {
                if trajectory.len() < horizon {
                    return Err(Error::Invalid(format!("agent {id}: trajectory has {} states, need {horizon}", trajectory.len())));
                }
                if trajectory.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Invalid(format!("agent {id}: trajectory is not finite")));
                }
                trajectory[..horizon].to_vec()
            }
        };
        out.insert(id, states);
    }
    Ok(out)
}

/// Prediction set for a clique whose members are all conditioned.
fn fixed_only(agents: &[Agent], fixed: &BTreeMap<AgentId, Vec<State>>) -> PredictionSet {
    let per_agent = agents
        .iter()
        .map(|a| AgentPrediction { id: a.id, kind: a.kind, conditioned: true, states: fixed[&a.id].clone(), controls: Vec::new() })
        .collect();
    PredictionSet {
        agents: agents.iter().map(|a| a.id).collect(),
        modes: vec![PredictionMode { z: vec![None; agents.len()], probability: 1.0, agents: per_agent }],
    }
}

pub fn predict_scene(model: &Model, request: &PredictRequest) -> Result<PredictResponse> {
    let start = Instant::now();
    let (frame, agents, skipped) = snapshot(model, &request.scene, request.frame)?;
    for id in request.conditioning.keys() {
        if !agents.iter().any(|a| a.id == *id) {
            return Err(Error::UnknownAgent(*id));
        }
    }
    let fixed = resolve_directives(model, &agents, &request.conditioning)?;
    let gc = graph_config(model);
    let graph = scene_graph::build_adjacency(&agents, &gc);
    let cap = scene_graph::default_max_clique_size(&graph.agents).min(model.config.max_clique);
    let mut cliques = scene_graph::partition_cliques(&graph, cap);
    let pinned: Vec<usize> = (0..graph.agents.len()).filter(|&i| fixed.contains_key(&graph.agents[i].id)).collect();
    scene_graph::attach_pinned(&graph, &mut cliques, &pinned, &gc);

    let mut out = Vec::with_capacity(cliques.len());
    let mut per_clique_ms = Vec::with_capacity(cliques.len());
    for c in &cliques {
        let t0 = Instant::now();
        let members: Vec<Agent> = c.members.iter().map(|&i| graph.agents[i].clone()).collect();
        let ids: Vec<AgentId> = members.iter().map(|a| a.id).collect();
        let conditioned: BTreeMap<AgentId, Vec<State>> = ids.iter().filter_map(|id| fixed.get(id).map(|s| (*id, s.clone()))).collect();
        let prediction = if conditioned.len() == members.len() {
            fixed_only(&members, &fixed)
        } else {
            model.predict(&members, &PredictOptions { k: request.k, beta: request.beta, conditioned })?
        };
        out.push(CliquePrediction { agents: ids, prediction });
        per_clique_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let timings = request.include_timings.then(|| Timings { total_ms: start.elapsed().as_secs_f64() * 1e3, per_clique_ms });
    Ok(PredictResponse {
        schema_version: SCHEMA_VERSION,
        scene_id: request.scene.id.clone(),
        frame,
        model_hash: model.content_hash(),
        cliques: out,
        skipped,
        timings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub scene: Scene,
    #[serde(default)]
    pub frame: Option<usize>,
    /// The planned vehicle; its own prediction is replaced by the plan.
    pub ego: AgentId,
    pub reference: LaneReference,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub beta: usize,
    #[serde(default)]
    pub clearance: f64,
    #[serde(default)]
    pub weights: CostWeights,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub solver: SolverOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResponse {
    pub schema_version: u32,
    pub scene_id: String,
    pub frame: usize,
    pub model_hash: String,
    pub problem: PlanProblem,
    pub plan: ContingencyPlan,
}

/// Builds the branching problem: one branch per mode of the ego's clique,
/// agents in other cliques follow their most likely mode in every branch.
pub fn plan_problem(model: &Model, request: &PlanRequest) -> Result<(usize, PlanProblem)> {
    let predict = PredictRequest {
        scene: request.scene.clone(),
        frame: request.frame,
        k: request.k,
        beta: request.beta,
        conditioning: BTreeMap::new(),
        include_timings: false,
    };
    let response = predict_scene(model, &predict)?;
    let track = request.scene.track(request.ego).ok_or(Error::UnknownAgent(request.ego))?;
    if track.kind != AgentKind::Vehicle {
        return Err(Error::UnsupportedKind(track.kind));
    }
    let ego_state = *track.state(response.frame).ok_or(Error::UnknownAgent(request.ego))?;
    let footprint_of = |id: AgentId| request.scene.track(id).map(|t| t.footprint).unwrap_or(Footprint::default_for(AgentKind::Vehicle));
    let current_of = |id: AgentId| request.scene.track(id).and_then(|t| t.state(response.frame)).copied();
    let obstacles = |mode: &PredictionMode| -> Vec<Obstacle> {
        mode.agents
            .iter()
            .filter(|a| a.id != request.ego)
            .map(|a| Obstacle { id: a.id, kind: a.kind, footprint: footprint_of(a.id), current: current_of(a.id), states: a.states.clone() })
            .collect()
    };
    let ego_clique = response.cliques.iter().position(|c| c.agents.contains(&request.ego)).ok_or(Error::UnknownAgent(request.ego))?;
    let background: Vec<Obstacle> = response
        .cliques
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ego_clique)
        .filter_map(|(_, c)| c.prediction.most_likely())
        .flat_map(obstacles)
        .collect();
    let modes = response.cliques[ego_clique]
        .prediction
        .modes
        .iter()
        .map(|m| PlanMode { probability: m.probability, obstacles: obstacles(m).into_iter().chain(background.iter().cloned()).collect() })
        .collect();
    let problem = PlanProblem {
        ego: ego_state,
        ego_footprint: track.footprint,
        modes,
        reference: request.reference,
        weights: request.weights,
        limits: request.limits,
        clearance: request.clearance,
        horizon: model.config.future,
        dt: model.config.dt,
    };
    Ok((response.frame, problem))
}

pub fn plan_scene(model: &Model, request: &PlanRequest) -> Result<PlanResponse> {
    let (frame, problem) = plan_problem(model, request)?;
    let plan = planner::plan(&problem, &request.solver, None)?;
    Ok(PlanResponse { schema_version: SCHEMA_VERSION, scene_id: request.scene.id.clone(), frame, model_hash: model.content_hash(), problem, plan })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_maneuvers() {
        assert_eq!(Maneuver::parse("brake a=-4").unwrap(), Maneuver::Brake { accel: -4.0 });
        assert_eq!(Maneuver::parse("brake").unwrap(), Maneuver::Brake { accel: -4.0 });
        assert_eq!(Maneuver::parse("accelerate a=4 cap=15").unwrap(), Maneuver::Accelerate { accel: 4.0, cap: 15.0 });
        assert_eq!(Maneuver::parse("keep").unwrap(), Maneuver::Keep);
        for bad in ["", "brake a=4", "brake a", "brake a=x", "fly", "accelerate a=-1", "keep a=1", "brake b=-1", "accelerate cap=-2"] {
            assert!(Maneuver::parse(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn brake_stops_without_reversing() {
        let s = Maneuver::Brake { accel: -4.0 }.rollout(AgentKind::Vehicle, &[0.0, 0.0, 10.0, 0.0], 8, 0.5).unwrap();
        let speeds: Vec<f64> = s.iter().map(|s| s[2]).collect();
        assert_eq!(speeds, vec![8.0, 6.0, 4.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        // Stopping distance v^2 / 2a = 12.5 m, integrated with forward Euler.
        assert!((s[7][0] - 15.0).abs() < 1e-12, "{}", s[7][0]);
    }

    #[test]
    fn accelerate_lands_on_cap() {
        let s = Maneuver::Accelerate { accel: 4.0, cap: 15.0 }.rollout(AgentKind::Vehicle, &[0.0, 0.0, 10.0, 0.0], 4, 0.5).unwrap();
        let speeds: Vec<f64> = s.iter().map(|s| s[2]).collect();
        assert_eq!(speeds, vec![12.0, 14.0, 15.0, 15.0]);
    }

    #[test]
    fn pedestrian_brake_keeps_direction() {
        let s = Maneuver::Brake { accel: -1.0 }.rollout(AgentKind::Pedestrian, &[0.0, 0.0, 0.6, 0.8], 3, 0.4).unwrap();
        assert!((s[0][2] - 0.36).abs() < 1e-12 && (s[0][3] - 0.48).abs() < 1e-12);
        assert_eq!([s[2][2], s[2][3]], [0.0, 0.0]);
    }

    #[test]
    fn over_bound_maneuver_rejected() {
        assert!(Maneuver::Brake { accel: -9.0 }.rollout(AgentKind::Vehicle, &[0.0, 0.0, 10.0, 0.0], 2, 0.5).is_err());
    }
}
