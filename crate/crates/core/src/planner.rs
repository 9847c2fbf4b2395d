//! Branching contingency planning: one ego control sequence per predicted
//! mode, all sharing the first control, minimizing the probability-weighted
//! cost subject to collision clearance and speed limits.
//!
//! Dynamics are eliminated by rollout. The solver is an augmented Lagrangian
//! (PHR form) whose inner problems are solved by projected gradient descent
//! with Armijo backtracking over the control box; it is restarted from a few
//! constant-control guesses and the best feasible result wins.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape};
use crate::dynamics::{self, Action, AgentKind, State};
use crate::error::{Error, Result};
use crate::geometry::{col_pair, Body, Footprint};
use crate::model::{Model, PredictOptions};
use crate::plot::{line_chart, Series};
use crate::scene_graph::{Agent, AgentId};

/// Straight lane to track at a target speed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneReference {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl LaneReference {
    pub fn lateral<R: Real>(&self, px: R, py: R) -> R {
        (py - self.y) * self.heading.cos() - (px - self.x) * self.heading.sin()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub lateral: f64,
    pub heading: f64,
    pub speed: f64,
    pub accel: f64,
    pub yaw_rate: f64,
    pub jerk: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { lateral: 1.0, heading: 1.0, speed: 0.5, accel: 0.05, yaw_rate: 0.5, jerk: 0.05 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Limits {
    pub accel: f64,
    pub yaw_rate: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        let b = AgentKind::Vehicle.action_bounds();
        Limits { accel: b[0], yaw_rate: b[1], v_min: 0.0, v_max: 30.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub id: AgentId,
    pub kind: AgentKind,
    pub footprint: Footprint,
    /// State at plan time, used only for the infeasible-start check.
    #[serde(default)]
    pub current: Option<State>,
    /// States at steps `1..=T`.
    pub states: Vec<State>,
}

impl Obstacle {
    fn body(&self) -> Body {
        Body::new(self.kind, self.footprint)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanMode {
    pub probability: f64,
    pub obstacles: Vec<Obstacle>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanProblem {
    pub ego: State,
    #[serde(default = "vehicle_footprint")]
    pub ego_footprint: Footprint,
    pub modes: Vec<PlanMode>,
    pub reference: LaneReference,
    #[serde(default)]
    pub weights: CostWeights,
    #[serde(default)]
    pub limits: Limits,
    /// Required collision margin in m.
    #[serde(default)]
    pub clearance: f64,
    pub horizon: usize,
    pub dt: f64,
}

fn vehicle_footprint() -> Footprint {
    Footprint::default_for(AgentKind::Vehicle)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Allowed constraint violation in m (or m/s for speed limits).
    pub tolerance: f64,
    pub gradient_tolerance: f64,
    pub initial_penalty: f64,
    /// Constant `[accel, yaw]` fractions of the bounds used as starts.
    pub starts: Vec<[f64; 2]>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        let mut starts = Vec::new();
        for a in [0.0, -0.5, 0.5] {
            for w in [0.0, -0.5, 0.5] {
                starts.push([a, w]);
            }
        }
        SolverOptions { max_outer: 25, max_inner: 400, tolerance: 1e-3, gradient_tolerance: 1e-7, initial_penalty: 10.0, starts }
    }
}

impl SolverOptions {
    /// Cheaper settings for receding-horizon use.
    pub fn fast() -> Self {
        SolverOptions { max_outer: 15, max_inner: 150, starts: vec![[0.0, 0.0], [-1.0, 0.0]], ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanBranch {
    pub probability: f64,
    /// `T` controls; the first equals the shared control.
    pub controls: Vec<Action>,
    /// `T` states after the initial one.
    pub states: Vec<State>,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContingencyPlan {
    pub shared_first: Action,
    pub branches: Vec<PlanBranch>,
    /// Probability-weighted cost.
    pub cost: f64,
    pub iterations: usize,
    pub max_violation: f64,
    pub feasible: bool,
    /// The ego already overlaps an obstacle at plan time.
    pub infeasible_start: bool,
}

impl PlanProblem {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.horizon == 0 || !(self.dt > 0.0) {
            return Err(Error::Invalid("plan needs at least one mode, a horizon and positive dt".into()));
        }
        let total: f64 = self.modes.iter().map(|m| m.probability).sum();
        if (total - 1.0).abs() > 1e-6 || self.modes.iter().any(|m| m.probability < 0.0) {
            return Err(Error::Invalid(format!("mode probabilities must sum to 1 (got {total})")));
        }
        for m in &self.modes {
            for o in &m.obstacles {
                if o.states.len() < self.horizon {
                    return Err(Error::Invalid(format!("obstacle {} has {} states, need {}", o.id, o.states.len(), self.horizon)));
                }
            }
        }
        if self.ego.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ego state".into()));
        }
        Ok(())
    }

    fn ego_body(&self) -> Body {
        Body::new(AgentKind::Vehicle, self.ego_footprint)
    }

    fn dim(&self) -> usize {
        2 + self.modes.len() * 2 * (self.horizon - 1)
    }

    /// Control `t` of branch `i` inside the decision vector.
    fn control<R: Real>(&self, x: &[R], i: usize, t: usize) -> [R; 2] {
        if t == 0 {
            return [x[0], x[1]];
        }
        let k = 2 + (i * (self.horizon - 1) + t - 1) * 2;
        [x[k], x[k + 1]]
    }

    fn project(&self, x: &mut [f64]) {
        for (k, v) in x.iter_mut().enumerate() {
            let b = if k % 2 == 0 { self.limits.accel } else { self.limits.yaw_rate };
            *v = v.clamp(-b, b);
        }
    }

    /// Per-branch costs and all constraint values (feasible when `<= 0`).
    fn evaluate<R: Real>(&self, x: &[R]) -> (Vec<R>, Vec<R>) {
        let w = &self.weights;
        let r = &self.reference;
        let body = self.ego_body();
        let mut costs = Vec::with_capacity(self.modes.len());
        let mut cons = Vec::new();
        for (i, mode) in self.modes.iter().enumerate() {
            let mut s = self.ego.map(|v| x[0].lift(v));
            let mut cost = x[0].lift(0.0);
            let mut prev: Option<[R; 2]> = None;
            for t in 0..self.horizon {
                let u = self.control(x, i, t);
                cost = cost + (u[0] * u[0]) * w.accel + (u[1] * u[1]) * w.yaw_rate;
                if let Some(p) = prev {
                    let (da, dw) = (u[0] - p[0], u[1] - p[1]);
                    cost = cost + (da * da + dw * dw) * w.jerk;
                }
                prev = Some(u);
                s = dynamics::step(AgentKind::Vehicle, &s, &u, self.dt);
                let lat = r.lateral(s[0], s[1]);
                let dpsi = s[3] - r.heading;
                let dv = s[2] - r.speed;
                cost = cost + (lat * lat) * w.lateral + (dpsi * dpsi) * w.heading + (dv * dv) * w.speed;
                cons.push(-s[2] + self.limits.v_min);
                cons.push(s[2] - self.limits.v_max);
                for o in &mode.obstacles {
                    let os = o.states[t].map(|v| x[0].lift(v));
                    cons.push(-col_pair(&s, &body, &os, &o.body()) + self.clearance);
                }
            }
            costs.push(cost);
        }
        (costs, cons)
    }

    fn objective<R: Real>(&self, x: &[R]) -> (R, Vec<R>) {
        let (costs, cons) = self.evaluate(x);
        let mut j = x[0].lift(0.0);
        for (c, m) in costs.iter().zip(&self.modes) {
            j = j + *c * m.probability;
        }
        (j, cons)
    }

    fn lagrangian<R: Real>(&self, x: &[R], lambda: &[f64], mu: f64) -> R {
        let (j, cons) = self.objective(x);
        let mut l = j;
        for (g, &lam) in cons.iter().zip(lambda) {
            if lam + mu * g.value() > 0.0 {
                l = l + *g * lam + (*g * *g) * (0.5 * mu);
            } else {
                l = l - lam * lam / (2.0 * mu);
            }
        }
        l
    }

    fn lagrangian_grad(&self, x: &[f64], lambda: &[f64], mu: f64) -> (f64, Vec<f64>) {
        let tape = Tape::new();
        let v = tape.constant(x.to_vec());
        let xs: Vec<_> = (0..x.len()).map(|k| v.get(k)).collect();
        let l = self.lagrangian(&xs, lambda, mu);
        let grads = tape.backward(l).expect("scalar objective");
        (l.val(), grads.wrt(v))
    }

    /// Weighted cost and largest constraint violation of a decision vector.
    fn score(&self, x: &[f64]) -> (f64, f64) {
        let (j, cons) = self.objective(x);
        (j, cons.iter().fold(0.0f64, |m, &g| m.max(g)))
    }

    fn decision_from_branches(&self, branches: &[Vec<Action>]) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        if let Some(b) = branches.first() {
            if let Some(u) = b.first() {
                x[0] = u[0];
                x[1] = u[1];
            }
        }
        for i in 0..self.modes.len() {
            let b = branches.get(i).or(branches.first());
            for t in 1..self.horizon {
                let u = b.and_then(|b| b.get(t).or(b.last())).copied().unwrap_or([0.0, 0.0]);
                let k = 2 + (i * (self.horizon - 1) + t - 1) * 2;
                x[k] = u[0];
                x[k + 1] = u[1];
            }
        }
        x
    }

    fn solve_from(&self, mut x: Vec<f64>, opts: &SolverOptions) -> (Vec<f64>, usize) {
        self.project(&mut x);
        let n_cons = self.objective(&x).1.len();
        let mut lambda = vec![0.0; n_cons];
        let mut mu = opts.initial_penalty;
        let mut iterations = 0;
        let mut prev_violation = f64::INFINITY;
        let mut prev_cost = f64::INFINITY;
        for _ in 0..opts.max_outer {
            let (mut l, mut g) = self.lagrangian_grad(&x, &lambda, mu);
            let mut step = 1.0;
            for _ in 0..opts.max_inner {
                iterations += 1;
                let mut pg = x.iter().zip(&g).map(|(a, b)| a - b).collect::<Vec<_>>();
                self.project(&mut pg);
                let pg_norm = pg.iter().zip(&x).map(|(p, a)| (p - a).powi(2)).sum::<f64>().sqrt();
                if pg_norm < opts.gradient_tolerance {
                    break;
                }
                let mut accepted = None;
                let mut t = step;
                for _ in 0..60 {
                    let mut cand: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - t * b).collect();
                    self.project(&mut cand);
                    let decrease: f64 = g.iter().zip(cand.iter().zip(&x)).map(|(gi, (c, xi))| gi * (c - xi)).sum();
                    if self.lagrangian(&cand, &lambda, mu) <= l + 1e-4 * decrease {
                        accepted = Some(cand);
                        break;
                    }
                    t *= 0.5;
                }
                let Some(cand) = accepted else { break };
                let (lc, gc) = self.lagrangian_grad(&cand, &lambda, mu);
                // Barzilai-Borwein step for the next iteration.
                let (mut ss, mut sy) = (0.0, 0.0);
                for k in 0..x.len() {
                    let sk = cand[k] - x[k];
                    ss += sk * sk;
                    sy += sk * (gc[k] - g[k]);
                }
                step = if sy > 1e-16 { (ss / sy).clamp(1e-8, 1e4) } else { (t * 2.0).min(1e4) };
                let stalled = l - lc <= 1e-14 * (1.0 + l.abs());
                x = cand;
                l = lc;
                g = gc;
                if stalled {
                    break;
                }
            }
            let (_, cons) = self.objective(&x);
            let violation = cons.iter().fold(0.0f64, |m, &c| m.max(c));
            let mut shift = 0.0f64;
            for (lam, c) in lambda.iter_mut().zip(&cons) {
                let next = (*lam + mu * c).max(0.0);
                shift = shift.max((next - *lam).abs());
                *lam = next;
            }
            let cost = self.objective(&x).0;
            if violation <= 0.1 * opts.tolerance && (shift <= 1e-9 || (cost - prev_cost).abs() <= 1e-7 * (1.0 + cost.abs())) {
                break;
            }
            if violation > 0.25 * prev_violation {
                mu = (mu * 10.0).min(1e8);
            }
            prev_violation = violation;
            prev_cost = cost;
        }
        (x, iterations)
    }

    fn branches_of(&self, x: &[f64]) -> Vec<PlanBranch> {
        let (costs, _) = self.evaluate(x);
        self.modes
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let controls: Vec<Action> = (0..self.horizon).map(|t| self.control(x, i, t)).collect();
                let states = dynamics::rollout(AgentKind::Vehicle, &self.ego, &controls, self.dt);
                PlanBranch { probability: m.probability, controls, states, cost: costs[i] }
            })
            .collect()
    }

    fn infeasible_start(&self) -> bool {
        let body = self.ego_body();
        self.modes.iter().flat_map(|m| &m.obstacles).any(|o| o.current.is_some_and(|c| col_pair(&self.ego, &body, &c, &o.body()) < 0.0))
    }
}

/// Solves the contingency problem. `warm_start` holds per-branch control
/// sequences (e.g. a shifted previous plan) tried before the fixed starts.
pub fn plan(problem: &PlanProblem, options: &SolverOptions, warm_start: Option<&[Vec<Action>]>) -> Result<ContingencyPlan> {
    problem.validate()?;
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(w) = warm_start {
        starts.push(problem.decision_from_branches(w));
    }
    for s in &options.starts {
        let u = [s[0] * problem.limits.accel, s[1] * problem.limits.yaw_rate];
        starts.push(problem.decision_from_branches(&[vec![u; problem.horizon]]));
    }
    if starts.is_empty() {
        starts.push(vec![0.0; problem.dim()]);
    }
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    let mut iterations = 0;
    for x0 in starts {
        let (x, it) = problem.solve_from(x0, options);
        iterations += it;
        let (cost, violation) = problem.score(&x);
        let better = match &best {
            None => true,
            Some((_, bc, bv)) => {
                let (feas, bfeas) = (violation <= options.tolerance, *bv <= options.tolerance);
                match (feas, bfeas) {
                    (true, false) => true,
                    (false, true) => false,
                    (true, true) => cost < *bc,
                    (false, false) => violation < *bv,
                }
            }
        };
        if better {
            best = Some((x, cost, violation));
        }
    }
    let (x, cost, max_violation) = best.expect("at least one start");
    let branches = problem.branches_of(&x);
    let infeasible_start = problem.infeasible_start();
    Ok(ContingencyPlan {
        shared_first: [x[0], x[1]],
        branches,
        cost,
        iterations,
        max_violation,
        feasible: max_violation <= options.tolerance && !infeasible_start,
        infeasible_start,
    })
}

/// Exhaustive search over open-loop control sequences on a grid with
/// `points` values per control dimension. Returns the best feasible weighted
/// cost and its per-branch controls, or `None` if no grid point is feasible.
pub fn grid_oracle(problem: &PlanProblem, points: usize, tolerance: f64) -> Result<Option<(f64, Vec<Vec<Action>>)>> {
    problem.validate()?;
    let axis = |b: f64| -> Vec<f64> { (0..points).map(|k| -b + 2.0 * b * k as f64 / (points - 1).max(1) as f64).collect() };
    let grid: Vec<Action> = axis(problem.limits.accel).into_iter().flat_map(|a| axis(problem.limits.yaw_rate).into_iter().map(move |w| [a, w])).collect();
    let tail_len = problem.horizon - 1;
    let tails = grid.len().pow(tail_len as u32);
    let mut best: Option<(f64, Vec<Vec<Action>>)> = None;
    for &u0 in &grid {
        let mut total = 0.0;
        let mut chosen = Vec::with_capacity(problem.modes.len());
        let mut feasible = true;
        for (i, mode) in problem.modes.iter().enumerate() {
            let single = PlanProblem { modes: vec![PlanMode { probability: 1.0, obstacles: mode.obstacles.clone() }], ..problem.clone() };
            let mut branch_best: Option<(f64, Vec<Action>)> = None;
            for code in 0..tails {
                let mut seq = vec![u0];
                let mut c = code;
                for _ in 0..tail_len {
                    seq.push(grid[c % grid.len()]);
                    c /= grid.len();
                }
                let x = single.decision_from_branches(&[seq.clone()]);
                let (j, v) = single.score(&x);
                if v <= tolerance && branch_best.as_ref().is_none_or(|b| j < b.0) {
                    branch_best = Some((j, seq));
                }
            }
            match branch_best {
                Some((j, seq)) => {
                    total += problem.modes[i].probability * j;
                    chosen.push(seq);
                }
                None => {
                    feasible = false;
                    break;
                }
            }
        }
        if feasible && best.as_ref().is_none_or(|b| total < b.0) {
            best = Some((total, chosen));
        }
    }
    Ok(best)
}

/// Weighted cost of explicit per-branch controls (shared first control is
/// taken from branch 0).
pub fn plan_cost(problem: &PlanProblem, branches: &[Vec<Action>]) -> (f64, f64) {
    problem.score(&problem.decision_from_branches(branches))
}

impl ContingencyPlan {
    pub fn to_svg(&self, problem: &PlanProblem) -> String {
        let mut series = Vec::new();
        let dashes = ["", "8 4", "2 3", "10 3 2 3"];
        for (i, b) in self.branches.iter().enumerate() {
            let mut pts = vec![(problem.ego[0], problem.ego[1])];
            pts.extend(b.states.iter().map(|s| (s[0], s[1])));
            series.push(Series::new(format!("ego mode {i} (p={:.2})", b.probability), pts).dashed(dashes[i % dashes.len()]));
        }
        for (i, m) in problem.modes.iter().enumerate() {
            for o in &m.obstacles {
                let mut pts: Vec<(f64, f64)> = o.current.iter().map(|s| (s[0], s[1])).collect();
                pts.extend(o.states.iter().take(problem.horizon).map(|s| (s[0], s[1])));
                series.push(Series::new(format!("agent {} mode {i}", o.id), pts).dashed(dashes[i % dashes.len()]));
            }
        }
        line_chart("Contingency plan", "x (m)", "y (m)", &series, true)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAgent {
    pub id: AgentId,
    pub kind: AgentKind,
    #[serde(default)]
    pub footprint: Option<Footprint>,
    /// Past states ending at the start time.
    pub history: Vec<State>,
    /// Scripted future (one state per step); unused for the ego.
    #[serde(default)]
    pub script: Vec<State>,
}

impl ScenarioAgent {
    fn footprint(&self) -> Footprint {
        self.footprint.unwrap_or_else(|| Footprint::default_for(self.kind))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldMode {
    /// Other agents follow their scripts.
    #[default]
    Scripted,
    /// Other agents follow the most likely predicted mode.
    MostLikely,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub ego: ScenarioAgent,
    pub others: Vec<ScenarioAgent>,
    pub reference: LaneReference,
    pub steps: usize,
    #[serde(default)]
    pub clearance: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub beta: usize,
    #[serde(default)]
    pub world: WorldMode,
    #[serde(default)]
    pub weights: CostWeights,
    #[serde(default)]
    pub limits: Limits,
}

fn default_k() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopResult {
    /// Executed ego states, starting with the initial one.
    pub ego: Vec<State>,
    pub controls: Vec<Action>,
    /// Other agents' executed states, aligned with `ego`.
    pub others: Vec<Vec<State>>,
    /// Smallest ego margin to any other agent at each executed state.
    pub margins: Vec<f64>,
    pub min_margin: f64,
    pub infeasible_steps: usize,
}

fn margin_to_others(ego: &State, ego_body: &Body, others: &[(State, Body)]) -> f64 {
    others.iter().map(|(s, b)| col_pair(ego, ego_body, s, b)).fold(f64::INFINITY, f64::min)
}

/// Receding-horizon loop: predict the clique, plan, apply the shared first
/// control, advance the world. Deterministic.
pub fn replan_loop(scenario: &Scenario, model: &Model, options: &SolverOptions) -> Result<LoopResult> {
    let h = model.config.history;
    let dt = model.config.dt;
    let horizon = model.config.future;
    if scenario.ego.kind != AgentKind::Vehicle {
        return Err(Error::UnsupportedKind(scenario.ego.kind));
    }
    let all: Vec<&ScenarioAgent> = std::iter::once(&scenario.ego).chain(&scenario.others).collect();
    for a in &all {
        if a.history.len() <= h {
            return Err(Error::Invalid(format!("agent {} needs {} history states", a.id, h + 1)));
        }
    }
    if scenario.world == WorldMode::Scripted {
        if let Some(a) = scenario.others.iter().find(|a| a.script.len() < scenario.steps) {
            return Err(Error::Invalid(format!("agent {} script shorter than {} steps", a.id, scenario.steps)));
        }
    }
    let mut histories: Vec<Vec<State>> = all.iter().map(|a| a.history.clone()).collect();
    let bodies: Vec<Body> = all.iter().map(|a| Body::new(a.kind, a.footprint())).collect();
    let ego_body = bodies[0];
    let current_others = |hist: &[Vec<State>]| -> Vec<(State, Body)> { (1..hist.len()).map(|i| (*hist[i].last().expect("history"), bodies[i])).collect() };

    let mut ego_states = vec![*histories[0].last().expect("history")];
    let mut others_exec: Vec<Vec<State>> = (1..histories.len()).map(|i| vec![*histories[i].last().expect("history")]).collect();
    let mut margins = vec![margin_to_others(&ego_states[0], &ego_body, &current_others(&histories))];
    let mut controls = Vec::with_capacity(scenario.steps);
    let mut warm: Option<Vec<Vec<Action>>> = None;
    let mut infeasible_steps = 0;

    for step in 0..scenario.steps {
        let mut agents: Vec<Agent> = all
            .iter()
            .zip(&histories)
            .map(|(a, hist)| {
                let mut ag = Agent::new(a.id, a.kind, hist[hist.len() - h - 1..].to_vec());
                ag.footprint = a.footprint();
                ag
            })
            .collect();
        agents.sort_by_key(|a| a.id);
        let prediction = model.predict(&agents, &PredictOptions { k: scenario.k, beta: scenario.beta, ..Default::default() })?;
        let index_of = |id: AgentId| agents.iter().position(|a| a.id == id).expect("present");
        let modes: Vec<PlanMode> = prediction
            .modes
            .iter()
            .map(|m| PlanMode {
                probability: m.probability,
                obstacles: scenario
                    .others
                    .iter()
                    .map(|o| {
                        let k = index_of(o.id);
                        Obstacle { id: o.id, kind: o.kind, footprint: o.footprint(), current: Some(*agents[k].current()), states: m.agents[k].states.clone() }
                    })
                    .collect(),
            })
            .collect();
        let problem = PlanProblem {
            ego: *ego_states.last().expect("non-empty"),
            ego_footprint: scenario.ego.footprint(),
            modes,
            reference: scenario.reference,
            weights: scenario.weights,
            limits: scenario.limits,
            clearance: scenario.clearance,
            horizon,
            dt,
        };
        let result = plan(&problem, options, warm.as_deref())?;
        if !result.feasible {
            infeasible_steps += 1;
            log::warn!("step {step}: plan violates constraints by {:.4}", result.max_violation);
        }
        let u = result.shared_first;
        warm = Some(result.branches.iter().map(|b| b.controls[1..].iter().chain(b.controls.last()).copied().collect()).collect());
        let next = dynamics::step_checked(AgentKind::Vehicle, ego_states.last().expect("non-empty"), &u, dt)?;
        controls.push(u);
        ego_states.push(next);
        histories[0].push(next);
        for (k, o) in scenario.others.iter().enumerate() {
            let s = match scenario.world {
                WorldMode::Scripted => o.script[step],
                WorldMode::MostLikely => prediction.modes[0].agents[index_of(o.id)].states[0],
            };
            histories[k + 1].push(s);
            others_exec[k].push(s);
        }
        margins.push(margin_to_others(&next, &ego_body, &current_others(&histories)));
    }
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(LoopResult { ego: ego_states, controls, others: others_exec, margins, min_margin, infeasible_steps })
}
