//! CVaR-weighted ELBO training.
//!
//! Per window: sample modes from the posterior (`n_g` most likely plus `n_r`
//! random), roll each out, and weight the per-mode squared errors by the
//! CVaR weights: the minimizer of `sum w_k loss_k` subject to
//! `0 <= w_k <= q_k / alpha`, `sum w_k = 1`. The active set is chosen on
//! values; the weights stay linear in `q` on the tape so the posterior
//! receives the reconstruction signal. The exact discrete KL and the
//! collision penalty (weighted like the errors) are added.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradBuffer, Tape, Var};
use crate::data::TrainingWindow;
use crate::encoder::FactorMode;
use crate::error::{Error, Result};
use crate::geometry::{collision_penalty, Body, PenaltyParams};
use crate::latent::{self, GibbsLatent};
use crate::model::Model;
use crate::scene_graph::Agent;

/// How the collision penalty of each sampled mode is weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyWeighting {
    /// The CVaR weights of the likelihood term.
    #[default]
    Cvar,
    /// Posterior probabilities renormalized over the sampled modes.
    Posterior,
    /// Equal weight for every sampled mode.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub beta_kl: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Above this alpha only the most likely posterior mode passes
    /// reconstruction gradients to the decoder.
    pub alpha_detach: f64,
    pub n_g: usize,
    pub n_r: usize,
    pub collision_weight: f64,
    pub penalty: PenaltyParams,
    pub penalty_weighting: PenaltyWeighting,
    /// Weight of an extra penalty-only term: one random agent replays its
    /// recorded future while the others roll out under the sampled modes.
    /// Exercises the situation conditioning creates at prediction time.
    /// Zero disables it.
    pub conditioned_penalty: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            beta_kl: 1.0,
            alpha_start: 0.2,
            alpha_end: 1.0,
            alpha_detach: 0.8,
            n_g: 3,
            n_r: 2,
            collision_weight: 1.0,
            penalty: PenaltyParams::default(),
            penalty_weighting: PenaltyWeighting::Cvar,
            conditioned_penalty: 0.0,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 8,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let alpha_ok = |a: f64| a > 0.0 && a <= 1.0;
        if !alpha_ok(self.alpha_start) || !alpha_ok(self.alpha_end) {
            return Err(Error::Invalid("alpha must lie in (0, 1]".into()));
        }
        if self.n_g + self.n_r == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("need n_g + n_r >= 1, epochs >= 1 and batch_size >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || self.beta_kl < 0.0 || self.collision_weight < 0.0 || self.conditioned_penalty < 0.0 {
            return Err(Error::Invalid("learning rate must be positive, weights non-negative".into()));
        }
        Ok(())
    }

    /// Linear from `alpha_start` at epoch 0 to `alpha_end` at the last epoch.
    pub fn alpha(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.alpha_end;
        }
        let f = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.alpha_start + (self.alpha_end - self.alpha_start) * f
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub likelihood: f64,
    pub kl: f64,
    pub collision: f64,
    pub total: f64,
}

impl LossReport {
    fn add(&mut self, o: &LossReport) {
        self.likelihood += o.likelihood;
        self.kl += o.kl;
        self.collision += o.collision;
        self.total += o.total;
    }

    fn scale(&mut self, s: f64) {
        self.likelihood *= s;
        self.kl *= s;
        self.collision *= s;
        self.total *= s;
    }

    pub fn is_finite(&self) -> bool {
        [self.likelihood, self.kl, self.collision, self.total].iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub alpha: f64,
    pub loss: LossReport,
}

/// Ascending-loss order, ties by index.
fn loss_order(losses: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    order
}

/// CVaR weights by greedy fill in ascending-loss order with caps `q / alpha`.
pub fn cvar_weights(q: &[f64], losses: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if q.len() != losses.len() || q.is_empty() {
        return Err(Error::Shape("q and losses must be non-empty and equally long".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Invalid(format!("alpha {alpha} outside (0, 1]")));
    }
    let sum: f64 = q.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || q.iter().any(|&v| v < 0.0) {
        return Err(Error::Invalid(format!("q must be a probability vector (sum {sum})")));
    }
    if alpha == 1.0 {
        return Ok(q.to_vec());
    }
    let mut w = vec![0.0; q.len()];
    let mut remaining = 1.0;
    for i in loss_order(losses) {
        if remaining <= 0.0 {
            break;
        }
        let take = (q[i] / alpha).min(remaining);
        w[i] = take;
        remaining -= take;
    }
    Ok(w)
}

/// The same weights on the tape, linear in `q` for a fixed active set.
pub fn cvar_weight_vars<'a>(tape: &'a Tape<'a>, q: Var<'a>, losses: &[f64], alpha: f64) -> Vec<Var<'a>> {
    let n = losses.len();
    let zero = tape.scalar(0.0);
    if alpha >= 1.0 {
        return (0..n).map(|i| q.get(i)).collect();
    }
    let mut w = vec![zero; n];
    let mut used = tape.scalar(0.0);
    let mut remaining = 1.0;
    for i in loss_order(losses) {
        if remaining <= 0.0 {
            break;
        }
        let cap = q.at(i) / alpha;
        if cap < remaining {
            w[i] = q.get(i) * (1.0 / alpha);
            used = used + w[i];
            remaining -= cap;
        } else {
            w[i] = 1.0 - used;
            remaining = 0.0;
        }
    }
    w
}

/// Sum of squared position errors over agents and future steps.
fn reconstruction<'a>(tape: &'a Tape<'a>, predicted: &[Vec<[Var<'a>; 4]>], window: &TrainingWindow) -> Var<'a> {
    let mut total = tape.scalar(0.0);
    for (pred, agent) in predicted.iter().zip(&window.agents) {
        let gt = agent.future.as_ref().expect("training windows carry futures");
        for (p, g) in pred.iter().zip(gt) {
            let dx = p[0] - g[0];
            let dy = p[1] - g[1];
            total = total + dx * dx + dy * dy;
        }
    }
    total
}

/// ELBO loss of one window on `tape`; returns the scalar root and its parts.
pub fn elbo_loss<'a, R: Rng>(
    tape: &'a Tape<'a>,
    model: &Model,
    window: &TrainingWindow,
    config: &TrainingConfig,
    alpha: f64,
    rng: &mut R,
) -> Result<(Var<'a>, LossReport)> {
    let agents = &window.agents;
    let horizon = window.future_len();
    if horizon == 0 {
        return Err(Error::MissingFuture);
    }
    let cap = model.config.enumeration_cap;
    let enc = model.encoder.encode(tape, agents, true)?;
    let prior = model.encoder.factors(tape, agents, &enc, FactorMode::Prior)?;
    let posterior = model.encoder.factors(tape, agents, &enc, FactorMode::Posterior)?;
    let cards = posterior.cards();
    let log_p = prior.joint_log_probs(tape, cap)?;
    let log_q = posterior.joint_log_probs(tape, cap)?;
    let kl = (log_q.exp() * (log_q - log_p)).sum();

    let q_dist = GibbsLatent::from_log_probs(cards.clone(), log_q.to_vec())?;
    let picks = q_dist.training_sample(config.n_g, config.n_r, rng);
    let idx: Vec<usize> = picks.iter().map(|(z, _)| latent::encode(&cards, z)).collect();
    let q_sel = log_q.gather(idx).exp();
    let q_norm = q_sel / q_sel.sum();

    let bodies: Vec<Body> = agents.iter().map(Agent::body).collect();
    let fixed = vec![None; agents.len()];
    let mut losses = Vec::with_capacity(picks.len());
    let mut penalties = Vec::with_capacity(picks.len());
    for (z, _) in &picks {
        let zs: Vec<Option<usize>> = z.iter().map(|&v| Some(v)).collect();
        let roll = model.decoder.rollout(tape, &model.encoder, agents, &enc, &zs, &fixed, horizon)?;
        losses.push(reconstruction(tape, &roll.states, window));
        penalties.push(collision_penalty(&roll.states, &bodies, &config.penalty));
    }
    let loss_values: Vec<f64> = losses.iter().map(Var::val).collect();
    let weights = cvar_weight_vars(tape, q_norm, &loss_values, alpha);
    let best_q = (0..picks.len()).max_by(|&a, &b| q_norm.at(a).total_cmp(&q_norm.at(b)).then(b.cmp(&a))).unwrap_or(0);

    let mut likelihood = tape.scalar(0.0);
    let mut collision = tape.scalar(0.0);
    for k in 0..picks.len() {
        let l = if alpha > config.alpha_detach && k != best_q { losses[k].detach() } else { losses[k] };
        likelihood = likelihood + weights[k] * l;
        if let Some(p) = penalties[k] {
            let w = match config.penalty_weighting {
                PenaltyWeighting::Cvar => weights[k],
                PenaltyWeighting::Posterior => q_norm.get(k),
                PenaltyWeighting::Uniform => tape.scalar(1.0 / picks.len() as f64),
            };
            collision = collision + w * p;
        }
    }
    if config.conditioned_penalty > 0.0 && agents.len() > 1 {
        let pinned = rng.gen_range(0..agents.len());
        let mut fixed = vec![None; agents.len()];
        fixed[pinned] = agents[pinned].future.clone();
        let mut seen = Vec::new();
        let mut extra = tape.scalar(0.0);
        for (z, _) in &picks {
            let mut zs: Vec<Option<usize>> = z.iter().map(|&v| Some(v)).collect();
            zs[pinned] = None;
            if seen.contains(&zs) {
                continue;
            }
            let roll = model.decoder.rollout(tape, &model.encoder, agents, &enc, &zs, &fixed, horizon)?;
            if let Some(p) = collision_penalty(&roll.states, &bodies, &config.penalty) {
                extra = extra + p;
            }
            seen.push(zs);
        }
        collision = collision + extra * (config.conditioned_penalty / seen.len() as f64);
    }
    let total = likelihood + kl * config.beta_kl + collision * config.collision_weight;
    let report = LossReport { likelihood: likelihood.val(), kl: kl.val(), collision: collision.val(), total: total.val() };
    Ok((total, report))
}

/// Adam over the flattened parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Trains `model` in place. Windows are moved to their local frames first.
/// Deterministic given `config.seed`.
pub fn train(
    model: &mut Model,
    windows: &[TrainingWindow],
    config: &TrainingConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let local: Vec<TrainingWindow> = windows.iter().map(TrainingWindow::to_local_frame).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate, model.store.numel());
    let mut order: Vec<usize> = (0..local.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut grads = GradBuffer::zeros_like(&model.store);
    for epoch in 0..config.epochs {
        let alpha = config.alpha(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = LossReport::default();
        for batch in order.chunks(config.batch_size) {
            grads.zero();
            for &w in batch {
                let tape = Tape::with_params(&model.store);
                let (root, report) = elbo_loss(&tape, model, &local[w], config, alpha, &mut rng)?;
                if !report.is_finite() {
                    return Err(Error::Diverged { epoch, detail: format!("window {} ({}): {report:?}", w, local[w].scene_id) });
                }
                let g = tape.backward(root).map_err(|e| Error::Diverged { epoch, detail: e.to_string() })?;
                g.accumulate_into(&mut grads);
                epoch_loss.add(&report);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::Diverged { epoch, detail: "non-finite gradient".into() });
            }
            let norm = grads.norm();
            if config.grad_clip > 0.0 && norm > config.grad_clip {
                grads.scale(config.grad_clip / norm);
            }
            let mut flat = model.store.flatten();
            adam.step(&mut flat, &grads.flatten());
            model.store.unflatten(&flat);
        }
        epoch_loss.scale(1.0 / local.len() as f64);
        let report = EpochReport { epoch, alpha, loss: epoch_loss };
        log::info!("epoch {epoch} alpha {alpha:.3} loss {:?}", report.loss);
        on_epoch(&report);
        history.push(report);
    }
    Ok(history)
}
