//! Discrete joint latent over a clique with node and edge factors, normalized
//! by full enumeration.
//!
//! Assignments are indexed in mixed radix with the first agent most
//! significant, so index order is lexicographic order.

use rand::Rng;

use crate::autodiff::tape;
use crate::error::{Error, Result};

/// Default enumeration cap: five agents with six values each.
pub const DEFAULT_CAP: usize = 7776;

pub type Assignment = Vec<usize>;

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeFactor {
    pub i: usize,
    pub j: usize,
    /// Row-major `cards[i] x cards[j]`.
    pub table: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GibbsLatent {
    cards: Vec<usize>,
    node: Vec<Vec<f64>>,
    edges: Vec<EdgeFactor>,
    log_probs: Vec<f64>,
    log_z: f64,
}

pub fn space_size(cards: &[usize]) -> usize {
    cards.iter().product()
}

pub fn decode(cards: &[usize], mut index: usize) -> Assignment {
    let mut z = vec![0; cards.len()];
    for k in (0..cards.len()).rev() {
        z[k] = index % cards[k];
        index /= cards[k];
    }
    z
}

pub fn encode(cards: &[usize], z: &[usize]) -> usize {
    z.iter().zip(cards).fold(0, |acc, (&v, &c)| acc * c + v)
}

/// For every joint assignment, the entry of node `i`'s table it selects.
pub fn node_gather(cards: &[usize], i: usize) -> Vec<usize> {
    (0..space_size(cards)).map(|x| decode(cards, x)[i]).collect()
}

/// For every joint assignment, the entry of the `(i, j)` edge table it selects.
pub fn edge_gather(cards: &[usize], i: usize, j: usize) -> Vec<usize> {
    (0..space_size(cards))
        .map(|x| {
            let z = decode(cards, x);
            z[i] * cards[j] + z[j]
        })
        .collect()
}

pub fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

impl GibbsLatent {
    pub fn new(cards: Vec<usize>, node: Vec<Vec<f64>>, edges: Vec<EdgeFactor>, cap: usize) -> Result<Self> {
        if cards.is_empty() || cards.contains(&0) {
            return Err(Error::Shape("every agent needs a non-empty latent space".into()));
        }
        let size = cards.iter().try_fold(1usize, |a, &c| a.checked_mul(c)).unwrap_or(usize::MAX);
        if size > cap {
            return Err(Error::EnumerationCap { size, cap });
        }
        if node.len() != cards.len() || node.iter().zip(&cards).any(|(f, &c)| f.len() != c) {
            return Err(Error::Shape("node factor sizes do not match cardinalities".into()));
        }
        for e in &edges {
            if e.i >= e.j || e.j >= cards.len() || e.table.len() != cards[e.i] * cards[e.j] {
                return Err(Error::Shape(format!("bad edge factor ({}, {})", e.i, e.j)));
            }
        }
        if node.iter().flatten().chain(edges.iter().flat_map(|e| &e.table)).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("factor table".into()));
        }
        let scores: Vec<f64> = (0..size)
            .map(|x| {
                let z = decode(&cards, x);
                let mut s: f64 = z.iter().enumerate().map(|(i, &v)| node[i][v]).sum();
                for e in &edges {
                    s += e.table[z[e.i] * cards[e.j] + z[e.j]];
                }
                s
            })
            .collect();
        let log_z = tape::log_sum_exp(&scores);
        let log_probs = scores.iter().map(|s| s - log_z).collect();
        Ok(GibbsLatent { cards, node, edges, log_probs, log_z })
    }

    /// All factors zero.
    pub fn uniform(cards: Vec<usize>) -> Result<Self> {
        let node = cards.iter().map(|&c| vec![0.0; c]).collect();
        GibbsLatent::new(cards, node, Vec::new(), usize::MAX)
    }

    /// Builds from a full vector of joint log-probabilities (already
    /// normalized), e.g. computed on a tape.
    pub fn from_log_probs(cards: Vec<usize>, log_probs: Vec<f64>) -> Result<Self> {
        if log_probs.len() != space_size(&cards) {
            return Err(Error::Shape("log-probability vector size".into()));
        }
        let log_z = tape::log_sum_exp(&log_probs);
        let log_probs = log_probs.iter().map(|l| l - log_z).collect();
        Ok(GibbsLatent { cards, node: Vec::new(), edges: Vec::new(), log_probs, log_z: 0.0 })
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn agents(&self) -> usize {
        self.cards.len()
    }

    pub fn size(&self) -> usize {
        self.log_probs.len()
    }

    pub fn log_partition(&self) -> f64 {
        self.log_z
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob(&self, z: &[usize]) -> Result<f64> {
        if z.len() != self.cards.len() || z.iter().zip(&self.cards).any(|(&v, &c)| v >= c) {
            return Err(Error::Shape(format!("assignment {z:?} does not fit cardinalities {:?}", self.cards)));
        }
        Ok(self.log_probs[encode(&self.cards, z)])
    }

    /// Indices ordered by probability, descending, ties by index.
    fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.size()).collect();
        idx.sort_by(|&a, &b| self.log_probs[b].total_cmp(&self.log_probs[a]).then(a.cmp(&b)));
        idx
    }

    /// The `min(n, |Z|)` most likely assignments with their probabilities.
    pub fn top_modes(&self, n: usize) -> Vec<(Assignment, f64)> {
        self.ranked().into_iter().take(n).map(|x| (decode(&self.cards, x), self.log_probs[x].exp())).collect()
    }

    /// The `n_g` most likely modes plus `n_r` drawn uniformly from the rest
    /// without replacement. Weights are the probabilities renormalized over
    /// the selection.
    pub fn training_sample<R: Rng>(&self, n_g: usize, n_r: usize, rng: &mut R) -> Vec<(Assignment, f64)> {
        let ranked = self.ranked();
        let mut chosen: Vec<usize> = ranked.iter().take(n_g).copied().collect();
        let mut rest: Vec<usize> = ranked.iter().skip(n_g).copied().collect();
        for _ in 0..n_r.min(rest.len()) {
            let pick = rng.gen_range(0..rest.len());
            chosen.push(rest.remove(pick));
        }
        let total: f64 = chosen.iter().map(|&x| self.log_probs[x].exp()).sum();
        chosen
            .into_iter()
            .map(|x| {
                let p = self.log_probs[x].exp();
                let w = if total > 0.0 { p / total } else { 1.0 / n_g.saturating_add(n_r).max(1) as f64 };
                (decode(&self.cards, x), w)
            })
            .collect()
    }

    /// Greedy most-likely selection keeping Hamming distance at least `beta`
    /// from every earlier pick. Stops early when nothing qualifies.
    pub fn diverse_sample(&self, k: usize, beta: usize) -> Vec<(Assignment, f64)> {
        let mut out: Vec<(Assignment, f64)> = Vec::new();
        for x in self.ranked() {
            if out.len() == k {
                break;
            }
            let z = decode(&self.cards, x);
            if out.iter().all(|(y, _)| hamming(&z, y) >= beta) {
                out.push((z, self.log_probs[x].exp()));
            }
        }
        out
    }

    /// Drops the factors touching `conditioned` agents and renormalizes over
    /// the rest. Remaining agents keep their relative order.
    pub fn condition(&self, conditioned: &[usize]) -> Result<GibbsLatent> {
        if self.node.len() != self.cards.len() {
            return Err(Error::Invalid("conditioning needs factor tables".into()));
        }
        let keep: Vec<usize> = (0..self.cards.len()).filter(|i| !conditioned.contains(i)).collect();
        if keep.is_empty() {
            return Err(Error::AllConditioned);
        }
        let pos = |i: usize| keep.iter().position(|&k| k == i);
        let cards = keep.iter().map(|&i| self.cards[i]).collect();
        let node = keep.iter().map(|&i| self.node[i].clone()).collect();
        let edges = self
            .edges
            .iter()
            .filter_map(|e| Some(EdgeFactor { i: pos(e.i)?, j: pos(e.j)?, table: e.table.clone() }))
            .collect();
        GibbsLatent::new(cards, node, edges, usize::MAX)
    }
}

/// Exact `KL(q || p)` over a shared assignment space.
pub fn kl_divergence(q: &GibbsLatent, p: &GibbsLatent) -> Result<f64> {
    if q.cards != p.cards {
        return Err(Error::Shape("KL between different latent spaces".into()));
    }
    Ok(q.log_probs.iter().zip(&p.log_probs).map(|(lq, lp)| if lq.is_finite() { lq.exp() * (lq - lp) } else { 0.0 }).sum())
}
