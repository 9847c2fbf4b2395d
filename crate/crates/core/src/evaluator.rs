//! Displacement errors, Best-of-N curves and collision rates.

use serde::{Deserialize, Serialize};

use crate::data::TrainingWindow;
use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::geometry::{col_pair, Body};
use crate::model::{Model, PredictOptions, PredictionMode, PredictionSet};
use crate::plot::{line_chart, Series};
use crate::scene_graph::Agent;

fn dist(a: &State, b: &State) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn displacement(pred: &[State], gt: &[State], steps: usize) -> (f64, f64) {
    let ade = (0..steps).map(|t| dist(&pred[t], &gt[t])).sum::<f64>() / steps as f64;
    (ade, dist(&pred[steps - 1], &gt[steps - 1]))
}

/// ADE and FDE over the first `steps` future steps, using the first
/// `min(n, modes)` modes. The per-agent minimum over modes is averaged over
/// the unconditioned clique agents. `ground_truth[i]` belongs to agent `i`.
pub fn ade_fde_at(modes: &[PredictionMode], ground_truth: &[Vec<State>], n: usize, steps: usize) -> Result<(f64, f64)> {
    let used = &modes[..n.max(1).min(modes.len())];
    if used.is_empty() {
        return Err(Error::Invalid("no prediction modes".into()));
    }
    let agents = used[0].agents.len();
    if ground_truth.len() != agents {
        return Err(Error::Shape(format!("{} ground-truth tracks for {agents} agents", ground_truth.len())));
    }
    let (mut ade, mut fde, mut count) = (0.0, 0.0, 0usize);
    for i in 0..agents {
        if used[0].agents[i].conditioned {
            continue;
        }
        let gt = &ground_truth[i];
        if steps == 0 || gt.len() < steps || used.iter().any(|m| m.agents[i].states.len() < steps) {
            return Err(Error::Shape(format!("horizon mismatch: need {steps} steps")));
        }
        let (mut best_a, mut best_f) = (f64::INFINITY, f64::INFINITY);
        for m in used {
            let (a, f) = displacement(&m.agents[i].states, gt, steps);
            best_a = best_a.min(a);
            best_f = best_f.min(f);
        }
        ade += best_a;
        fde += best_f;
        count += 1;
    }
    if count == 0 {
        return Err(Error::AllConditioned);
    }
    Ok((ade / count as f64, fde / count as f64))
}

/// ADE and FDE over the full predicted horizon.
pub fn ade_fde(modes: &[PredictionMode], ground_truth: &[Vec<State>], n: usize) -> Result<(f64, f64)> {
    let steps = modes.first().map(|m| m.agents.first().map_or(0, |a| a.states.len())).unwrap_or(0);
    ade_fde_at(modes, ground_truth, n, steps)
}

/// One evaluated clique: its agents (for footprints) and its predictions.
pub struct EvalCase<'a> {
    pub agents: &'a [Agent],
    pub predictions: &'a PredictionSet,
}

/// Step at which agent `i` of `mode` first overlaps a co-predicted agent.
fn first_collision(mode: &PredictionMode, bodies: &[Body], i: usize) -> Option<usize> {
    let traj = &mode.agents[i].states;
    (0..traj.len()).find(|&t| {
        (0..mode.agents.len()).any(|j| j != i && t < mode.agents[j].states.len() && col_pair(&traj[t], &bodies[i], &mode.agents[j].states[t], &bodies[j]) < 0.0)
    })
}

/// Cumulative collision rate per horizon (in steps): the fraction of
/// unconditioned predicted agents whose most likely mode overlaps any
/// co-predicted agent at or before that step. With `any_mode`, a collision
/// in any returned mode counts.
pub fn collision_rate(cases: &[EvalCase], horizons: &[usize], any_mode: bool) -> Vec<f64> {
    let mut hits = vec![0usize; horizons.len()];
    let mut total = 0usize;
    for case in cases {
        let bodies: Vec<Body> = case.agents.iter().map(Agent::body).collect();
        let modes: &[PredictionMode] = if any_mode { &case.predictions.modes } else { &case.predictions.modes[..case.predictions.modes.len().min(1)] };
        let Some(first) = modes.first() else { continue };
        for i in 0..first.agents.len() {
            if first.agents[i].conditioned {
                continue;
            }
            total += 1;
            let earliest = modes.iter().filter_map(|m| first_collision(m, &bodies, i)).min();
            if let Some(t) = earliest {
                for (h, &steps) in horizons.iter().enumerate() {
                    if t < steps {
                        hits[h] += 1;
                    }
                }
            }
        }
    }
    hits.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonPoint {
    pub n: usize,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub seconds: f64,
    pub steps: usize,
    pub ade: f64,
    pub fde: f64,
    pub collision_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cliques: usize,
    pub agents: usize,
    /// Most-likely-mode metrics per horizon.
    pub horizons: Vec<HorizonMetrics>,
    pub best_of_n: Vec<BonPoint>,
    /// How often mode rank `r` gave an agent's best final error.
    pub modes_used: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_max: usize,
    pub beta: usize,
    /// Horizons in seconds; rounded to whole steps of the model dt.
    pub horizons: Vec<f64>,
    pub collision_any_mode: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_max: 5, beta: 0, horizons: vec![1.0, 2.0, 3.0, 4.0], collision_any_mode: false }
    }
}

/// FDE (and ADE) for `N = 1..=n_max` averaged over cliques.
pub fn bon_curve(cases: &[EvalCase], ground_truth: &[Vec<Vec<State>>], n_max: usize) -> Result<Vec<BonPoint>> {
    let mut out = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let (mut a, mut f) = (0.0, 0.0);
        for (case, gt) in cases.iter().zip(ground_truth) {
            let (ca, cf) = ade_fde(&case.predictions.modes, gt, n)?;
            a += ca;
            f += cf;
        }
        let c = cases.len().max(1) as f64;
        out.push(BonPoint { n, ade: a / c, fde: f / c });
    }
    Ok(out)
}

/// Predicts every window with `model` and reports all metrics.
pub fn evaluate(model: &Model, windows: &[TrainingWindow], config: &EvalConfig) -> Result<MetricsReport> {
    let opts = PredictOptions { k: config.n_max.max(1), beta: config.beta, ..Default::default() };
    let mut predictions = Vec::with_capacity(windows.len());
    let mut truths = Vec::with_capacity(windows.len());
    for w in windows {
        let gt: Vec<Vec<State>> = w.agents.iter().map(|a| a.future.clone().ok_or(Error::MissingFuture)).collect::<Result<_>>()?;
        predictions.push(model.predict(&w.agents, &opts)?);
        truths.push(gt);
    }
    let cases: Vec<EvalCase> = windows.iter().zip(&predictions).map(|(w, p)| EvalCase { agents: &w.agents, predictions: p }).collect();
    report(&cases, &truths, model.config.dt, config)
}

/// Metrics for precomputed predictions.
pub fn report(cases: &[EvalCase], truths: &[Vec<Vec<State>>], dt: f64, config: &EvalConfig) -> Result<MetricsReport> {
    let horizon_len = cases.iter().filter_map(|c| c.predictions.modes.first()).filter_map(|m| m.agents.first()).map(|a| a.states.len()).min().unwrap_or(0);
    let steps: Vec<usize> = config.horizons.iter().map(|&s| ((s / dt).round() as usize).clamp(1, horizon_len.max(1))).collect();
    let rates = collision_rate(cases, &steps, config.collision_any_mode);
    let mut horizons = Vec::with_capacity(steps.len());
    for (k, &st) in steps.iter().enumerate() {
        let (mut a, mut f) = (0.0, 0.0);
        for (case, gt) in cases.iter().zip(truths) {
            let (ca, cf) = ade_fde_at(&case.predictions.modes, gt, 1, st)?;
            a += ca;
            f += cf;
        }
        let c = cases.len().max(1) as f64;
        horizons.push(HorizonMetrics { seconds: config.horizons[k], steps: st, ade: a / c, fde: f / c, collision_rate: rates[k] });
    }
    let mut modes_used = vec![0usize; config.n_max.max(1)];
    let mut agents = 0;
    for (case, gt) in cases.iter().zip(truths) {
        for i in 0..case.agents.len() {
            agents += 1;
            let best = case
                .predictions
                .modes
                .iter()
                .enumerate()
                .map(|(r, m)| (r, dist(m.agents[i].states.last().expect("non-empty"), &gt[i][m.agents[i].states.len() - 1])))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((r, _)) = best {
                let last = modes_used.len() - 1;
                modes_used[r.min(last)] += 1;
            }
        }
    }
    Ok(MetricsReport { cliques: cases.len(), agents, horizons, best_of_n: bon_curve(cases, truths, config.n_max.max(1))?, modes_used })
}

impl MetricsReport {
    pub fn horizon_csv(&self) -> String {
        let mut s = String::from("seconds,steps,ade,fde,collision_rate\n");
        for h in &self.horizons {
            s.push_str(&format!("{},{},{:.6},{:.6},{:.6}\n", h.seconds, h.steps, h.ade, h.fde, h.collision_rate));
        }
        s
    }

    pub fn bon_csv(&self) -> String {
        let mut s = String::from("n,ade,fde\n");
        for p in &self.best_of_n {
            s.push_str(&format!("{},{:.6},{:.6}\n", p.n, p.ade, p.fde));
        }
        s
    }

    pub fn bon_svg(&self) -> String {
        let fde = Series::new("FDE", self.best_of_n.iter().map(|p| (p.n as f64, p.fde)).collect());
        let ade = Series::new("ADE", self.best_of_n.iter().map(|p| (p.n as f64, p.ade)).collect()).dashed("6 4");
        line_chart("Best-of-N displacement error", "samples N", "error (m)", &[fde, ade], false)
    }

    pub fn collision_svg(&self) -> String {
        let s = Series::new("collision rate", self.horizons.iter().map(|h| (h.seconds, h.collision_rate)).collect());
        line_chart("Collision rate by horizon", "horizon (s)", "fraction of agents", &[s], false)
    }
}
