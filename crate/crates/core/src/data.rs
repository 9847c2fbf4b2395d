//! Scenes, trajectory-file loading, training windows and local frames.
//!
//! A [`Scene`] is the JSON wire format shared with the service:
//!
//! ```json
//! {"id": "s0", "dt": 0.5, "label": "brake",
//!  "agents": [{"id": 1, "kind": "vehicle",
//!              "footprint": {"shape": "rectangle", "length": 4.0, "width": 2.0},
//!              "start": 0, "states": [[0.0, 0.0, 10.0, 0.0], null]}]}
//! ```
//!
//! `states[k]` is the state at frame `start + k`; `null` marks a missing
//! observation. Vehicle states are `[x, y, v, heading]`, pedestrian states
//! `[x, y, vx, vy]`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::dynamics::{AgentKind, State};
use crate::error::{Error, Result};
use crate::geometry::Footprint;
use crate::scene_graph::{self, Agent, AgentId, GraphConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: AgentId,
    pub kind: AgentKind,
    pub footprint: Footprint,
    #[serde(default)]
    pub start: usize,
    pub states: Vec<Option<State>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<Vec<f64>>,
}

impl Track {
    pub fn state(&self, frame: usize) -> Option<&State> {
        frame.checked_sub(self.start).and_then(|k| self.states.get(k)).and_then(|s| s.as_ref())
    }

    /// States on `first..=last` if all are present.
    pub fn span(&self, first: usize, last: usize) -> Option<Vec<State>> {
        (first..=last).map(|f| self.state(f).copied()).collect()
    }

    pub fn end(&self) -> usize {
        self.start + self.states.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub agents: Vec<Track>,
}

impl Scene {
    pub fn frames(&self) -> usize {
        self.agents.iter().map(Track::end).max().unwrap_or(0)
    }

    pub fn track(&self, id: AgentId) -> Option<&Track> {
        self.agents.iter().find(|t| t.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Invalid(format!("scene {}: dt must be positive", self.id)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.agents {
            if !seen.insert(t.id) {
                return Err(Error::Track { agent: t.id, message: "duplicate agent id".into() });
            }
            if !t.footprint.is_valid() {
                return Err(Error::Track { agent: t.id, message: "footprint dimensions must be positive".into() });
            }
            if t.states.iter().flatten().any(|s| s.iter().any(|v| !v.is_finite())) {
                return Err(Error::Track { agent: t.id, message: "non-finite state".into() });
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serializes")
    }

    /// Agents with a complete history ending at `frame`. Futures are attached
    /// when `future` further frames are all present.
    pub fn snapshot(&self, frame: usize, history: usize, future: usize) -> Vec<Agent> {
        let Some(first) = frame.checked_sub(history) else { return Vec::new() };
        let mut out = Vec::new();
        for t in &self.agents {
            let Some(hist) = t.span(first, frame) else { continue };
            let fut = if future > 0 { t.span(frame + 1, frame + future) } else { None };
            out.push(Agent { id: t.id, kind: t.kind, footprint: t.footprint, history: hist, future: fut, map: t.map.clone() });
        }
        out.sort_by_key(|a| a.id);
        out
    }
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let scenes: Vec<Scene> = serde_json::from_str(&text)?;
    for s in &scenes {
        s.validate()?;
    }
    Ok(scenes)
}

pub fn save_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let text = serde_json::to_string(scenes)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Duration of one raw frame id increment. ETH/UCY annotate every tenth
    /// frame of 25 fps video, so the default gives 0.4 s windows.
    pub seconds_per_frame: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { seconds_per_frame: 0.04 }
    }
}

/// Reads whitespace-separated `frame agent x y` rows as pedestrian tracks.
pub fn load_trajectory_file(path: &Path, options: &LoadOptions) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_trajectory_text(&id, &text, options)
}

pub fn parse_trajectory_text(id: &str, text: &str, options: &LoadOptions) -> Result<Scene> {
    let mut rows: BTreeMap<AgentId, Vec<(i64, f64, f64)>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::Parse { line: line_no, message: format!("expected 4 fields, found {}", fields.len()) });
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse { line: line_no, message: format!("bad number {:?}", fields[i]) })
        };
        let (frame, agent, x, y) = (num(0)?, num(1)?, num(2)?, num(3)?);
        if frame.fract() != 0.0 || agent.fract() != 0.0 || agent < 0.0 {
            return Err(Error::Parse { line: line_no, message: "frame and agent ids must be integers".into() });
        }
        let entry = rows.entry(agent as AgentId).or_default();
        if let Some(&(last, _, _)) = entry.last() {
            if frame as i64 <= last {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("frames for agent {} are not increasing", agent as AgentId),
                });
            }
        }
        entry.push((frame as i64, x, y));
    }
    if rows.is_empty() {
        return Ok(Scene { id: id.to_string(), dt: 0.4, label: None, agents: Vec::new() });
    }
    let mut frames: Vec<i64> = rows.values().flatten().map(|r| r.0).collect();
    frames.sort_unstable();
    frames.dedup();
    let stride = frames.windows(2).map(|w| w[1] - w[0]).fold(0, gcd).max(1);
    let base = frames[0];
    let dt = stride as f64 * options.seconds_per_frame;

    let mut agents = Vec::new();
    for (aid, pts) in rows {
        let idx: Vec<usize> = pts.iter().map(|p| ((p.0 - base) / stride) as usize).collect();
        let start = idx[0];
        let mut states = vec![None; idx[idx.len() - 1] - start + 1];
        for (k, p) in pts.iter().enumerate() {
            let vel = finite_difference(&pts, &idx, k, dt);
            states[idx[k] - start] = Some([p.1, p.2, vel.0, vel.1]);
        }
        let kind = AgentKind::Pedestrian;
        agents.push(Track { id: aid, kind, footprint: Footprint::default_for(kind), start, states, map: None });
    }
    Ok(Scene { id: id.to_string(), dt, label: None, agents })
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Central difference where both neighbours are adjacent frames, one-sided
/// otherwise, zero for an isolated sample.
fn finite_difference(pts: &[(i64, f64, f64)], idx: &[usize], k: usize, dt: f64) -> (f64, f64) {
    let adj = |a: usize, b: usize| idx[b] == idx[a] + 1;
    let prev = k > 0 && adj(k - 1, k);
    let next = k + 1 < pts.len() && adj(k, k + 1);
    let (a, b, span) = match (prev, next) {
        (true, true) => (k - 1, k + 1, 2.0),
        (false, true) => (k, k + 1, 1.0),
        (true, false) => (k - 1, k, 1.0),
        (false, false) => return (0.0, 0.0),
    };
    ((pts[b].1 - pts[a].1) / (span * dt), (pts[b].2 - pts[a].2) / (span * dt))
}

/// Rigid frame: origin and heading in the parent frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    /// Frame attached to an agent's state. Pedestrian frames are not rotated.
    pub fn of(kind: AgentKind, s: &State) -> Self {
        Pose { x: s[0], y: s[1], heading: crate::dynamics::frame_heading(kind, s) }
    }

    pub fn point_to_local<R: Real>(&self, x: R, y: R) -> (R, R) {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        let (dx, dy) = (x - self.x, y - self.y);
        (dx * c + dy * s, dy * c - dx * s)
    }

    pub fn vector_to_local<R: Real>(&self, x: R, y: R) -> (R, R) {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        (x * c + y * s, y * c - x * s)
    }

    pub fn point_to_global(&self, x: f64, y: f64) -> (f64, f64) {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        (self.x + x * c - y * s, self.y + x * s + y * c)
    }

    pub fn state_to_local<R: Real>(&self, kind: AgentKind, s: &[R; 4]) -> [R; 4] {
        let (x, y) = self.point_to_local(s[0], s[1]);
        match kind {
            AgentKind::Vehicle => [x, y, s[2], s[3] - self.heading],
            AgentKind::Pedestrian => {
                let (vx, vy) = self.vector_to_local(s[2], s[3]);
                [x, y, vx, vy]
            }
        }
    }

    pub fn state_to_global(&self, kind: AgentKind, s: &State) -> State {
        let (x, y) = self.point_to_global(s[0], s[1]);
        match kind {
            AgentKind::Vehicle => [x, y, s[2], s[3] + self.heading],
            AgentKind::Pedestrian => {
                let (c, sn) = (self.heading.cos(), self.heading.sin());
                [x, y, s[2] * c - s[3] * sn, s[2] * sn + s[3] * c]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingWindow {
    pub scene_id: String,
    /// Current frame, the last history frame.
    pub frame: usize,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Clique members sorted by id.
    pub agents: Vec<Agent>,
    /// Pose of the frame the states are expressed in, relative to the scene.
    pub origin: Pose,
}

impl TrainingWindow {
    pub fn history_len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.history.len() - 1)
    }

    pub fn future_len(&self) -> usize {
        self.agents.first().and_then(|a| a.future.as_ref()).map_or(0, Vec::len)
    }

    fn map_states(&self, f: impl Fn(AgentKind, &State) -> State, origin: Pose) -> TrainingWindow {
        let mut out = self.clone();
        for a in &mut out.agents {
            let kind = a.kind;
            a.history.iter_mut().for_each(|s| *s = f(kind, s));
            if let Some(fut) = a.future.as_mut() {
                fut.iter_mut().for_each(|s| *s = f(kind, s));
            }
        }
        out.origin = origin;
        out
    }

    /// Re-expresses the window in the current pose of its first agent.
    pub fn to_local_frame(&self) -> TrainingWindow {
        let Some(anchor) = self.agents.first() else { return self.clone() };
        let pose = Pose::of(anchor.kind, anchor.current());
        let composed = {
            let (x, y) = self.origin.point_to_global(pose.x, pose.y);
            Pose { x, y, heading: self.origin.heading + pose.heading }
        };
        self.map_states(|k, s| pose.state_to_local(k, s), composed)
    }

    /// Returns the window to scene coordinates.
    pub fn to_global_frame(&self) -> TrainingWindow {
        let origin = self.origin;
        self.map_states(|k, s| origin.state_to_global(k, s), Pose::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub history: usize,
    pub future: usize,
    /// Frames between consecutive window start frames.
    pub stride: usize,
    /// Clique cap; `None` picks the per-type default.
    pub max_clique: Option<usize>,
    pub graph: GraphConfig,
}

impl WindowConfig {
    pub fn vehicles() -> Self {
        WindowConfig { history: 4, future: 8, stride: 1, max_clique: Some(4), graph: GraphConfig::default() }
    }

    pub fn pedestrians() -> Self {
        let graph = GraphConfig { horizon: 12, dt: 0.4, ..GraphConfig::default() };
        WindowConfig { history: 8, future: 12, stride: 1, max_clique: Some(5), graph }
    }
}

/// One window per (clique, current frame) among agents fully observed over
/// the history and future. States stay in scene coordinates.
pub fn windows(scene: &Scene, config: &WindowConfig) -> Vec<TrainingWindow> {
    let mut out = Vec::new();
    let frames = scene.frames();
    let graph_cfg = GraphConfig { dt: scene.dt, ..config.graph };
    let mut frame = config.history;
    while frame + config.future < frames {
        let agents: Vec<Agent> =
            scene.snapshot(frame, config.history, config.future).into_iter().filter(|a| a.future.is_some()).collect();
        if !agents.is_empty() {
            let graph = scene_graph::build_adjacency(&agents, &graph_cfg);
            let cap = config.max_clique.unwrap_or_else(|| scene_graph::default_max_clique_size(&agents));
            for clique in scene_graph::partition_cliques(&graph, cap) {
                out.push(TrainingWindow {
                    scene_id: scene.id.clone(),
                    frame,
                    dt: scene.dt,
                    label: scene.label.clone(),
                    agents: clique.members.iter().map(|&i| graph.agents[i].clone()).collect(),
                    origin: Pose::default(),
                });
            }
        }
        frame += config.stride.max(1);
    }
    out
}
