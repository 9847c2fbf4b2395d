//! Seeded synthetic scenes: small driving and crowd templates with a latent
//! maneuver label. Every scene has exactly `history + future + 1` frames and
//! the maneuver starts at frame `history`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Scene, Track};
use crate::dynamics::{self, Action, AgentKind, State};
use crate::error::{Error, Result};
use crate::geometry::{col_pair, Body, Footprint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    IntersectionYieldOrGo,
    CarFollowing,
    LaneChange,
    CrossingPedestrians,
}

impl Template {
    pub fn default_dt(self) -> f64 {
        match self {
            Template::CrossingPedestrians => 0.4,
            _ => 0.5,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string()))
            .map_err(|_| Error::InfeasibleSpec(format!("unknown template {name:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub template: Template,
    pub count: usize,
    pub history: usize,
    pub future: usize,
    pub dt: f64,
    /// Required clearance between ground-truth agents at every frame.
    pub clearance: f64,
}

impl SynthSpec {
    pub fn new(template: Template, count: usize) -> Self {
        let (history, future) = match template {
            Template::CrossingPedestrians => (8, 12),
            _ => (4, 8),
        };
        SynthSpec { template, count, history, future, dt: template.default_dt(), clearance: 0.5 }
    }
}

const MAX_ATTEMPTS: usize = 200;

pub fn synth_scenarios(spec: &SynthSpec, seed: u64) -> Result<Vec<Scene>> {
    if !(spec.dt > 0.0 && spec.dt.is_finite()) {
        return Err(Error::InfeasibleSpec("dt must be positive".into()));
    }
    if spec.future == 0 {
        return Err(Error::InfeasibleSpec("future horizon must be at least one step".into()));
    }
    if !(spec.clearance >= 0.0) {
        return Err(Error::InfeasibleSpec("clearance must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut attempt = 0;
        let scene = loop {
            let candidate = match spec.template {
                Template::IntersectionYieldOrGo => intersection(spec, &mut rng),
                Template::CarFollowing => car_following(spec, &mut rng),
                Template::LaneChange => lane_change(spec, &mut rng),
                Template::CrossingPedestrians => crossing_pedestrians(spec, &mut rng),
            };
            if collision_free(&candidate, spec.clearance) {
                break candidate;
            }
            attempt += 1;
            if attempt >= MAX_ATTEMPTS {
                return Err(Error::InfeasibleSpec(format!(
                    "no collision-free {:?} scene after {MAX_ATTEMPTS} draws",
                    spec.template
                )));
            }
        };
        let mut scene = scene;
        scene.id = format!("{}-{i:05}", template_tag(spec.template));
        scenes.push(scene);
    }
    Ok(scenes)
}

fn template_tag(t: Template) -> &'static str {
    match t {
        Template::IntersectionYieldOrGo => "intersection",
        Template::CarFollowing => "following",
        Template::LaneChange => "lanechange",
        Template::CrossingPedestrians => "crossing",
    }
}

fn collision_free(scene: &Scene, clearance: f64) -> bool {
    let n = scene.frames();
    for (a, ta) in scene.agents.iter().enumerate() {
        for tb in &scene.agents[a + 1..] {
            let (ba, bb) = (Body::new(ta.kind, ta.footprint), Body::new(tb.kind, tb.footprint));
            for f in 0..n {
                if let (Some(sa), Some(sb)) = (ta.state(f), tb.state(f)) {
                    if col_pair(sa, &ba, sb, &bb) <= clearance {
                        return false;
                    }
                }
            }
        }
    }
    true
}

fn track(id: u64, kind: AgentKind, states: Vec<State>) -> Track {
    Track { id, kind, footprint: Footprint::default_for(kind), start: 0, states: states.into_iter().map(Some).collect(), map: None }
}

/// Integrates a vehicle under a per-step control law.
fn drive(s0: State, steps: usize, dt: f64, mut law: impl FnMut(usize, &State) -> Action) -> Vec<State> {
    let mut out = vec![s0];
    for k in 0..steps {
        let s = out[k];
        let a = law(k, &s);
        out.push(dynamics::step(AgentKind::Vehicle, &s, &a, dt));
    }
    out
}

fn bounded_accel(a: f64) -> f64 {
    a.clamp(-dynamics::VEHICLE_ACCEL_BOUND, dynamics::VEHICLE_ACCEL_BOUND)
}

/// Speed change towards `target` at rate at most `rate`, landing exactly.
fn approach(v: f64, target: f64, rate: f64, dt: f64) -> f64 {
    bounded_accel(((target - v) / dt).clamp(-rate, rate))
}

/// Two vehicles meet at a crossing; exactly one yields. Labels `a_first` and
/// `b_first` are equally likely and invisible in the history.
fn intersection(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Scene {
    let (h, steps, dt) = (spec.history, spec.history + spec.future, spec.dt);
    let va: f64 = rng.gen_range(8.0..12.0);
    let vb: f64 = rng.gen_range(8.0..12.0);
    let ta: f64 = rng.gen_range(1.6..2.4);
    let tb = ta + rng.gen_range(-0.3..0.3);
    let a_first = rng.gen_bool(0.5);
    let go_accel: f64 = rng.gen_range(0.0..1.0);
    let brake: f64 = rng.gen_range(2.5..4.0);
    let crawl: f64 = rng.gen_range(0.5..2.5);
    let lead_time = h as f64 * dt;
    let sa = [0.0, -va * (ta + lead_time), va, std::f64::consts::FRAC_PI_2];
    let sb = [-vb * (tb + lead_time), 0.0, vb, 0.0];
    let law = |goes: bool| {
        move |k: usize, s: &State| -> Action {
            if k < h {
                [0.0, 0.0]
            } else if goes {
                [approach(s[2], 15.0, go_accel, dt), 0.0]
            } else {
                [approach(s[2], crawl, brake, dt), 0.0]
            }
        }
    };
    let a = drive(sa, steps, dt, law(a_first));
    let b = drive(sb, steps, dt, law(!a_first));
    Scene {
        id: String::new(),
        dt,
        label: Some(if a_first { "a_first" } else { "b_first" }.into()),
        agents: vec![track(1, AgentKind::Vehicle, a), track(2, AgentKind::Vehicle, b)],
    }
}

#[derive(Clone, Copy)]
struct Idm {
    desired_speed: f64,
    headway: f64,
    min_gap: f64,
    max_accel: f64,
    comfort_brake: f64,
}

impl Idm {
    fn accel(&self, v: f64, gap: f64, closing: f64) -> f64 {
        let s_star = self.min_gap + (v * self.headway + v * closing / (2.0 * (self.max_accel * self.comfort_brake).sqrt())).max(0.0);
        let a = self.max_accel * (1.0 - (v / self.desired_speed).powi(4) - (s_star / gap.max(0.1)).powi(2));
        bounded_accel(a)
    }
}

/// Leader cruises, brakes to a stop or accelerates; the follower runs IDM.
fn car_following(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Scene {
    let (h, steps, dt) = (spec.history, spec.history + spec.future, spec.dt);
    let length = Footprint::default_for(AgentKind::Vehicle).extent().0;
    let idm = Idm {
        desired_speed: rng.gen_range(13.0..17.0),
        headway: rng.gen_range(0.9..1.4),
        min_gap: 2.0,
        max_accel: 2.0,
        comfort_brake: 3.0,
    };
    let v_lead: f64 = rng.gen_range(7.0..12.0);
    let v_follow = (v_lead + rng.gen_range(-1.0..1.0)).max(0.0);
    let gap = idm.min_gap + v_follow * idm.headway + rng.gen_range(0.0..6.0);
    let maneuver = rng.gen_range(0..3);
    let rate: f64 = match maneuver {
        1 => rng.gen_range(2.0..4.5),
        2 => rng.gen_range(1.0..3.0),
        _ => 0.0,
    };
    let cap: f64 = rng.gen_range(14.0..17.0);

    let mut lead = vec![[gap + length, 0.0, v_lead, 0.0]];
    let mut follow = vec![[0.0, 0.0, v_follow, 0.0]];
    for k in 0..steps {
        let (l, f) = (lead[k], follow[k]);
        let al = if k < h {
            0.0
        } else {
            match maneuver {
                1 => approach(l[2], 0.0, rate, dt),
                2 => approach(l[2], cap, rate, dt),
                _ => 0.0,
            }
        };
        let af = idm.accel(f[2], l[0] - f[0] - length, f[2] - l[2]).max(-f[2] / dt);
        lead.push(dynamics::step(AgentKind::Vehicle, &l, &[al, 0.0], dt));
        follow.push(dynamics::step(AgentKind::Vehicle, &f, &[af, 0.0], dt));
    }
    let label = ["cruise", "brake", "accelerate"][maneuver];
    Scene {
        id: String::new(),
        dt,
        label: Some(label.into()),
        agents: vec![track(1, AgentKind::Vehicle, follow), track(2, AgentKind::Vehicle, lead)],
    }
}

/// A vehicle keeps its lane or moves one lane left; a second vehicle drives
/// ahead in the target lane.
fn lane_change(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Scene {
    let (h, steps, dt) = (spec.history, spec.history + spec.future, spec.dt);
    let v: f64 = rng.gen_range(8.0..12.0);
    let other_v = v + rng.gen_range(0.0..2.0);
    let ahead: f64 = rng.gen_range(20.0..35.0);
    let change = rng.gen_bool(0.5);
    let yaw: f64 = rng.gen_range(0.12..0.25);
    // Turn in, hold, turn back: equal-length phases of `q` steps.
    let q = (spec.future / 4).max(1);
    let back = h as f64 * dt;
    let ego = drive([-v * back, 0.0, v, 0.0], steps, dt, |k, _| {
        if !change || k < h {
            return [0.0, 0.0];
        }
        let j = k - h;
        let rate = if j < q {
            yaw
        } else if j < 2 * q {
            0.0
        } else if j < 3 * q {
            -yaw
        } else {
            0.0
        };
        [0.0, rate]
    });
    let other = drive([ahead - other_v * back, 3.5, other_v, 0.0], steps, dt, |_, _| [0.0, 0.0]);
    Scene {
        id: String::new(),
        dt,
        label: Some(if change { "change" } else { "keep" }.into()),
        agents: vec![track(1, AgentKind::Vehicle, ego), track(2, AgentKind::Vehicle, other)],
    }
}

/// Two to four pedestrians cross a plaza with goal seeking plus pairwise
/// exponential repulsion.
fn crossing_pedestrians(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Scene {
    let (steps, dt) = (spec.history + spec.future, spec.dt);
    let n = rng.gen_range(2..=4);
    let mut states: Vec<State> = Vec::new();
    let mut desired: Vec<[f64; 2]> = Vec::new();
    for _ in 0..n {
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let speed: f64 = rng.gen_range(1.0..1.6);
        let offset: f64 = rng.gen_range(-1.5..1.5);
        let r = speed * steps as f64 * dt / 2.0;
        let (c, s) = (angle.cos(), angle.sin());
        states.push([-r * c - offset * s, -r * s + offset * c, speed * c, speed * s]);
        desired.push([speed * c, speed * s]);
    }
    let bound = dynamics::PEDESTRIAN_ACCEL_BOUND;
    let mut traj: Vec<Vec<State>> = states.iter().map(|s| vec![*s]).collect();
    for k in 0..steps {
        let now: Vec<State> = traj.iter().map(|t| t[k]).collect();
        for i in 0..n {
            let s = now[i];
            let mut a = [(desired[i][0] - s[2]) / 0.8, (desired[i][1] - s[3]) / 0.8];
            for (j, o) in now.iter().enumerate() {
                if j == i {
                    continue;
                }
                let (dx, dy) = (s[0] - o[0], s[1] - o[1]);
                let d = dx.hypot(dy).max(1e-6);
                let push = 3.0 * (-(d - 0.6) / 0.5).exp();
                a[0] += push * dx / d;
                a[1] += push * dy / d;
            }
            let a = [a[0].clamp(-bound, bound), a[1].clamp(-bound, bound)];
            traj[i].push(dynamics::step(AgentKind::Pedestrian, &s, &a, dt));
        }
    }
    Scene {
        id: String::new(),
        dt,
        label: Some("cross".into()),
        agents: traj.into_iter().enumerate().map(|(i, t)| track(i as u64 + 1, AgentKind::Pedestrian, t)).collect(),
    }
}
