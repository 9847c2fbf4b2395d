//! Interaction graph over agents and its partition into size-capped cliques.
//!
//! Two agents interact when their zero-action flows come within a
//! type-dependent threshold `d0`. Edge weight is `d0 / d` for `d <= d0`.
//! Cliques come from a deterministic Louvain pass; communities larger than the
//! cap are split by deleting their weakest edges and re-running Louvain.

use serde::{Deserialize, Serialize};

use crate::dynamics::{self, AgentKind, State};
use crate::geometry::{Body, Footprint};

pub type AgentId = u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: AgentId,
    pub kind: AgentKind,
    pub footprint: Footprint,
    /// `H + 1` states at a fixed period, oldest first. The last one is current.
    pub history: Vec<State>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub future: Option<Vec<State>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<Vec<f64>>,
}

impl Agent {
    pub fn new(id: AgentId, kind: AgentKind, history: Vec<State>) -> Self {
        Agent { id, kind, footprint: Footprint::default_for(kind), history, future: None, map: None }
    }

    pub fn current(&self) -> &State {
        self.history.last().expect("agent without history")
    }

    pub fn body(&self) -> Body {
        Body::new(self.kind, self.footprint)
    }
}

/// Interaction distance thresholds per type pair, in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub vehicle_vehicle: f64,
    pub vehicle_pedestrian: f64,
    pub pedestrian_pedestrian: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { vehicle_vehicle: 30.0, vehicle_pedestrian: 15.0, pedestrian_pedestrian: 5.0 }
    }
}

impl Thresholds {
    pub fn get(&self, a: AgentKind, b: AgentKind) -> f64 {
        match (a, b) {
            (AgentKind::Vehicle, AgentKind::Vehicle) => self.vehicle_vehicle,
            (AgentKind::Pedestrian, AgentKind::Pedestrian) => self.pedestrian_pedestrian,
            _ => self.vehicle_pedestrian,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub thresholds: Thresholds,
    /// Flow horizon in steps.
    pub horizon: usize,
    pub dt: f64,
    /// Floor on the flow distance so weights stay finite.
    pub epsilon: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { thresholds: Thresholds::default(), horizon: 8, dt: 0.5, epsilon: 0.01 }
    }
}

/// Default clique cap: 4 when any vehicle is present, otherwise 5.
pub fn default_max_clique_size(agents: &[Agent]) -> usize {
    if agents.iter().any(|a| a.kind == AgentKind::Vehicle) {
        4
    } else {
        5
    }
}

/// Closest center distance between the two zero-action flows over `0..=horizon`.
pub fn closest_future_distance(a: &Agent, b: &Agent, horizon: usize, dt: f64) -> f64 {
    let fa = dynamics::flow(a.kind, a.current(), horizon, dt);
    let fb = dynamics::flow(b.kind, b.current(), horizon, dt);
    fa.iter()
        .zip(&fb)
        .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
        .fold(f64::INFINITY, f64::min)
}

/// Adjacency weight for a flow distance `d` under threshold `d0`.
pub fn edge_weight(d: f64, d0: f64, epsilon: f64) -> f64 {
    if d > d0 {
        0.0
    } else {
        d0 / d.max(epsilon)
    }
}

#[derive(Clone, Debug)]
pub struct SceneGraph {
    /// Sorted by id; indices below refer to this order.
    pub agents: Vec<Agent>,
    pub adjacency: Vec<Vec<f64>>,
}

pub fn build_adjacency(agents: &[Agent], config: &GraphConfig) -> SceneGraph {
    let mut agents = agents.to_vec();
    agents.sort_by_key(|a| a.id);
    let n = agents.len();
    let mut adjacency = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = closest_future_distance(&agents[i], &agents[j], config.horizon, config.dt);
            let d0 = config.thresholds.get(agents[i].kind, agents[j].kind);
            let w = edge_weight(d, d0, config.epsilon);
            adjacency[i][j] = w;
            adjacency[j][i] = w;
        }
    }
    SceneGraph { agents, adjacency }
}

/// A group of agents predicted jointly. `members` index into
/// [`SceneGraph::agents`] and are ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clique {
    pub members: Vec<usize>,
}

impl Clique {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Newman modularity of a labelling on a symmetric weighted graph.
pub fn modularity(w: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = w.len();
    let k: Vec<f64> = w.iter().map(|r| r.iter().sum()).collect();
    let m2: f64 = k.iter().sum();
    if m2 <= 0.0 {
        return 0.0;
    }
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += w[i][j] - k[i] * k[j] / m2;
            }
        }
    }
    q / m2
}

/// Deterministic Louvain. Nodes are visited in index order and ties keep the
/// current community, then prefer the lowest label.
pub fn louvain(w: &[Vec<f64>]) -> Vec<usize> {
    let n = w.len();
    let mut assignment: Vec<usize> = (0..n).collect();
    let mut graph: Vec<Vec<f64>> = w.to_vec();
    loop {
        let (labels, moved) = local_moving(&graph);
        if !moved {
            break;
        }
        // Relabel in order of first appearance.
        let mut remap = vec![usize::MAX; graph.len()];
        let mut next = 0;
        for &l in &labels {
            if remap[l] == usize::MAX {
                remap[l] = next;
                next += 1;
            }
        }
        let labels: Vec<usize> = labels.iter().map(|&l| remap[l]).collect();
        let mut agg = vec![vec![0.0; next]; next];
        for i in 0..graph.len() {
            for j in 0..graph.len() {
                agg[labels[i]][labels[j]] += graph[i][j];
            }
        }
        for a in assignment.iter_mut() {
            *a = labels[*a];
        }
        if next == graph.len() {
            break;
        }
        graph = agg;
    }
    assignment
}

fn local_moving(w: &[Vec<f64>]) -> (Vec<usize>, bool) {
    let n = w.len();
    let k: Vec<f64> = w.iter().map(|r| r.iter().sum()).collect();
    let m2: f64 = k.iter().sum();
    let mut label: Vec<usize> = (0..n).collect();
    if m2 <= 0.0 {
        return (label, false);
    }
    let mut tot = k.clone();
    let mut moved_any = false;
    loop {
        let mut moved = false;
        for i in 0..n {
            let own = label[i];
            tot[own] -= k[i];
            let mut links = vec![0.0; n];
            for j in 0..n {
                if j != i {
                    links[label[j]] += w[i][j];
                }
            }
            let gain = |c: usize| links[c] - tot[c] * k[i] / m2;
            let mut best = own;
            let mut best_gain = gain(own);
            for c in 0..n {
                if c == own || links[c] <= 0.0 {
                    continue;
                }
                let g = gain(c);
                if g > best_gain + 1e-12 {
                    best = c;
                    best_gain = g;
                }
            }
            tot[best] += k[i];
            if best != own {
                label[i] = best;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    (label, moved_any)
}

fn groups(labels: &[usize]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut index = std::collections::BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        let g = *index.entry(l).or_insert_with(|| {
            out.push(Vec::new());
            out.len() - 1
        });
        out[g].push(i);
    }
    out
}

/// Louvain partition with every part capped at `max_size`.
pub fn partition_cliques(graph: &SceneGraph, max_size: usize) -> Vec<Clique> {
    let max_size = max_size.max(1);
    let mut out = Vec::new();
    for group in groups(&louvain(&graph.adjacency)) {
        let sub = submatrix(&graph.adjacency, &group);
        split(group, sub, max_size, &mut out);
    }
    let mut cliques: Vec<Clique> = out
        .into_iter()
        .map(|mut m| {
            m.sort_unstable();
            Clique { members: m }
        })
        .collect();
    cliques.sort_by_key(|c| c.members[0]);
    cliques
}

fn submatrix(w: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| idx.iter().map(|&j| w[i][j]).collect()).collect()
}

fn split(members: Vec<usize>, mut w: Vec<Vec<f64>>, max_size: usize, out: &mut Vec<Vec<usize>>) {
    if members.len() <= max_size {
        out.push(members);
        return;
    }
    loop {
        // Weakest remaining edge; index order follows agent id, so the
        // first strict minimum found is the id tie-break.
        let mut weakest: Option<(usize, usize)> = None;
        for i in 0..w.len() {
            for j in i + 1..w.len() {
                if w[i][j] > 0.0 && weakest.map_or(true, |(a, b)| w[i][j] < w[a][b]) {
                    weakest = Some((i, j));
                }
            }
        }
        let Some((a, b)) = weakest else {
            out.extend(members.into_iter().map(|m| vec![m]));
            return;
        };
        w[a][b] = 0.0;
        w[b][a] = 0.0;
        let parts = groups(&louvain(&w));
        if parts.len() > 1 {
            for part in parts {
                let sub = submatrix(&w, &part);
                split(part.iter().map(|&p| members[p]).collect(), sub, max_size, out);
            }
            return;
        }
    }
}

/// Moves each agent in `pinned` whose clique holds no unpinned agent into the
/// clique of its most strongly connected unpinned agent. Closest flow distance
/// decides when there is no positive edge. Ties go to the lower index.
pub fn attach_pinned(graph: &SceneGraph, cliques: &mut Vec<Clique>, pinned: &[usize], config: &GraphConfig) {
    let is_pinned = |i: usize| pinned.contains(&i);
    for &p in pinned {
        let Some(ci) = cliques.iter().position(|c| c.members.contains(&p)) else { continue };
        if cliques[ci].members.iter().any(|&m| !is_pinned(m)) {
            continue;
        }
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..graph.agents.len() {
            if is_pinned(j) {
                continue;
            }
            let w = graph.adjacency[p][j];
            let d = closest_future_distance(&graph.agents[p], &graph.agents[j], config.horizon, config.dt);
            let better = match best {
                None => true,
                Some((_, bw, bd)) => w > bw || (w == bw && d < bd),
            };
            if better {
                best = Some((j, w, d));
            }
        }
        let Some((target, _, _)) = best else { continue };
        cliques[ci].members.retain(|&m| m != p);
        let ti = cliques.iter().position(|c| c.members.contains(&target)).expect("target in a clique");
        cliques[ti].members.push(p);
        cliques[ti].members.sort_unstable();
    }
    cliques.retain(|c| !c.members.is_empty());
    cliques.sort_by_key(|c| c.members[0]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ped(id: AgentId, x: f64, y: f64, vx: f64, vy: f64) -> Agent {
        Agent::new(id, AgentKind::Pedestrian, vec![[x, y, vx, vy]])
    }

    fn graph_from(w: Vec<Vec<f64>>) -> SceneGraph {
        let agents = (0..w.len()).map(|i| ped(i as u64, i as f64 * 100.0, 0.0, 0.0, 0.0)).collect();
        SceneGraph { agents, adjacency: w }
    }

    /// Independent modularity: sum over communities of (internal/2m - (deg/2m)^2).
    fn modularity_oracle(w: &[Vec<f64>], labels: &[usize]) -> f64 {
        let m2: f64 = w.iter().flatten().sum();
        let mut ids: Vec<usize> = labels.to_vec();
        ids.sort_unstable();
        ids.dedup();
        ids.iter()
            .map(|&c| {
                let mem: Vec<usize> = (0..w.len()).filter(|&i| labels[i] == c).collect();
                let internal: f64 = mem.iter().flat_map(|&i| mem.iter().map(move |&j| (i, j))).map(|(i, j)| w[i][j]).sum();
                let deg: f64 = mem.iter().map(|&i| w[i].iter().sum::<f64>()).sum();
                internal / m2 - (deg / m2).powi(2)
            })
            .sum()
    }

    #[test]
    fn distance_examples() {
        let a = ped(1, 0.0, 0.0, 0.0, 0.0);
        let b = ped(2, 3.0, 4.0, 0.0, 0.0);
        assert!((closest_future_distance(&a, &b, 5, 1.0) - 5.0).abs() < 1e-12);
        let a = ped(1, 0.0, 0.0, 1.0, 0.0);
        let b = ped(2, 10.0, 0.0, -1.0, 0.0);
        assert!(closest_future_distance(&a, &b, 10, 1.0).abs() < 1e-12);
        let a = ped(1, 0.0, 0.0, 1.0, 0.5);
        let b = ped(2, 0.0, 2.0, 1.0, 0.5);
        assert!((closest_future_distance(&a, &b, 10, 1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(edge_weight(5.0, 5.0, 0.01), 1.0);
        assert_eq!(edge_weight(2.5, 5.0, 0.01), 2.0);
        assert_eq!(edge_weight(5.1, 5.0, 0.01), 0.0);
        assert_eq!(edge_weight(0.0, 5.0, 0.01), 500.0);
    }

    #[test]
    fn two_disconnected_pairs() {
        let agents = vec![ped(1, 0.0, 0.0, 0.0, 0.0), ped(2, 1.0, 0.0, 0.0, 0.0), ped(3, 50.0, 0.0, 0.0, 0.0), ped(4, 51.0, 0.0, 0.0, 0.0)];
        let g = build_adjacency(&agents, &GraphConfig::default());
        let c = partition_cliques(&g, 5);
        assert_eq!(c, vec![Clique { members: vec![0, 1] }, Clique { members: vec![2, 3] }]);
    }

    #[test]
    fn chain_respects_cap() {
        let mut w = vec![vec![0.0; 6]; 6];
        for i in 0..5 {
            w[i][i + 1] = 2.0;
            w[i + 1][i] = 2.0;
        }
        let c = partition_cliques(&graph_from(w.clone()), 4);
        let mut all: Vec<usize> = c.iter().flat_map(|c| c.members.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert!(c.iter().all(|c| c.len() <= 4));
        // A uniform 6-clique must still be cut down.
        let full = vec![vec![1.0; 6]; 6].into_iter().enumerate().map(|(i, mut r)| { r[i] = 0.0; r }).collect();
        let c = partition_cliques(&graph_from(full), 4);
        assert!(c.iter().all(|c| c.len() <= 4));
        assert_eq!(c.iter().map(|c| c.len()).sum::<usize>(), 6);
    }

    #[test]
    fn modularity_matches_oracle_and_beats_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(3..12);
            let mut w = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in i + 1..n {
                    if rng.gen_bool(0.35) {
                        let x = rng.gen_range(1.0..5.0);
                        w[i][j] = x;
                        w[j][i] = x;
                    }
                }
            }
            if w.iter().flatten().sum::<f64>() == 0.0 {
                continue;
            }
            let labels = louvain(&w);
            let singletons: Vec<usize> = (0..n).collect();
            let q = modularity_oracle(&w, &labels);
            assert!((q - modularity(&w, &labels)).abs() < 1e-12);
            assert!(q >= modularity_oracle(&w, &singletons) - 1e-12);
        }
    }

    #[test]
    fn pinned_agent_joins_a_neighbor() {
        let agents = vec![ped(1, 0.0, 0.0, 0.0, 0.0), ped(2, 40.0, 0.0, 0.0, 0.0), ped(3, 100.0, 0.0, 0.0, 0.0)];
        let cfg = GraphConfig::default();
        let g = build_adjacency(&agents, &cfg);
        let mut c = partition_cliques(&g, 5);
        assert_eq!(c.len(), 3);
        attach_pinned(&g, &mut c, &[1], &cfg);
        assert_eq!(c, vec![Clique { members: vec![0, 1] }, Clique { members: vec![2] }]);
    }

    fn agents_strategy() -> impl Strategy<Value = Vec<Agent>> {
        prop::collection::vec((-30.0f64..30.0, -30.0f64..30.0, -2.0f64..2.0, -2.0f64..2.0), 1..14).prop_map(|v| {
            v.into_iter().enumerate().map(|(i, (x, y, vx, vy))| ped(i as u64 * 3 + 1, x, y, vx, vy)).collect()
        })
    }

    proptest! {
        #[test]
        fn partition_is_exhaustive_and_capped(agents in agents_strategy(), cap in 1usize..6) {
            let g = build_adjacency(&agents, &GraphConfig::default());
            let c = partition_cliques(&g, cap);
            let mut all: Vec<usize> = c.iter().flat_map(|c| c.members.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..agents.len()).collect::<Vec<_>>());
            prop_assert!(c.iter().all(|c| !c.is_empty() && c.len() <= cap));
        }

        #[test]
        fn distance_is_symmetric(agents in agents_strategy()) {
            for a in &agents {
                for b in &agents {
                    prop_assert_eq!(closest_future_distance(a, b, 8, 0.4), closest_future_distance(b, a, 8, 0.4));
                }
            }
        }

        #[test]
        fn far_apart_gives_singletons(n in 1usize..8) {
            let agents: Vec<Agent> = (0..n).map(|i| ped(i as u64, i as f64 * 20.0, 0.0, 0.0, 0.0)).collect();
            let g = build_adjacency(&agents, &GraphConfig::default());
            prop_assert!(partition_cliques(&g, 5).iter().all(|c| c.len() == 1));
        }

        #[test]
        fn adjacency_values_in_range(agents in agents_strategy()) {
            let g = build_adjacency(&agents, &GraphConfig::default());
            for i in 0..agents.len() {
                prop_assert_eq!(g.adjacency[i][i], 0.0);
                for j in 0..agents.len() {
                    let a = g.adjacency[i][j];
                    prop_assert!(a == 0.0 || a >= 1.0);
                    prop_assert_eq!(a, g.adjacency[j][i]);
                }
            }
        }
    }
}
