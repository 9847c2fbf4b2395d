//! Signed collision margins between agent footprints and the smooth penalty
//! built from them. A negative margin means collision.

use serde::{Deserialize, Serialize};

use crate::autodiff::real::max_all;
use crate::autodiff::Real;
use crate::dynamics::AgentKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Footprint {
    Circle { radius: f64 },
    Rectangle { length: f64, width: f64 },
}

impl Footprint {
    pub fn default_for(kind: AgentKind) -> Self {
        match kind {
            AgentKind::Vehicle => Footprint::Rectangle { length: 4.0, width: 2.0 },
            AgentKind::Pedestrian => Footprint::Circle { radius: 0.3 },
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            Footprint::Circle { radius } => radius > 0.0,
            Footprint::Rectangle { length, width } => length > 0.0 && width > 0.0,
        }
    }

    /// Bounding extent `(length, width)`; circles report their diameter twice.
    pub fn extent(&self) -> (f64, f64) {
        match *self {
            Footprint::Circle { radius } => (2.0 * radius, 2.0 * radius),
            Footprint::Rectangle { length, width } => (length, width),
        }
    }
}

/// Kind and footprint of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub kind: AgentKind,
    pub footprint: Footprint,
}

impl Body {
    pub fn new(kind: AgentKind, footprint: Footprint) -> Self {
        Body { kind, footprint }
    }

    pub fn default_for(kind: AgentKind) -> Self {
        Body { kind, footprint: Footprint::default_for(kind) }
    }
}

/// Margin of a point against an axis-aligned `length x width` rectangle at
/// the origin: `max(|dx| - L/2, |dy| - W/2)`.
pub fn col_point_rect<R: Real>(dx: R, dy: R, length: f64, width: f64) -> R {
    (dx.abs() - length / 2.0).max(dy.abs() - width / 2.0)
}

fn heading<R: Real>(kind: AgentKind, s: &[R; 4]) -> R {
    match kind {
        AgentKind::Vehicle => s[3],
        AgentKind::Pedestrian => s[0].lift(0.0),
    }
}

/// World offset `(dx, dy)` expressed in a frame rotated by `psi`.
fn into_frame<R: Real>(dx: R, dy: R, psi: R) -> (R, R) {
    let (c, s) = (psi.cos(), psi.sin());
    (c * dx + s * dy, c * dy - s * dx)
}

/// Separating-axis margin between two rectangles: over the four edge normals,
/// the largest gap between the projected extents. Positive iff separated;
/// when overlapping it is minus the smallest penetration depth.
fn rect_vs_rect<R: Real>(si: &[R; 4], psi_i: R, (li, wi): (f64, f64), sj: &[R; 4], psi_j: R, (lj, wj): (f64, f64)) -> R {
    let (ci, sni) = (psi_i.cos(), psi_i.sin());
    let (cj, snj) = (psi_j.cos(), psi_j.sin());
    let dx = sj[0] - si[0];
    let dy = sj[1] - si[1];
    let axes = [(ci, sni), (-sni, ci), (cj, snj), (-snj, cj)];
    let gaps: Vec<R> = axes
        .iter()
        .map(|&(ax, ay)| {
            let reach_i = (ci * ax + sni * ay).abs() * (li / 2.0) + (ci * ay - sni * ax).abs() * (wi / 2.0);
            let reach_j = (cj * ax + snj * ay).abs() * (lj / 2.0) + (cj * ay - snj * ax).abs() * (wj / 2.0);
            (dx * ax + dy * ay).abs() - (reach_i + reach_j)
        })
        .collect();
    max_all(&gaps)
}

/// Signed margin between two agents.
///
/// Circle pairs use center distance minus both radii; a circle against a
/// rectangle tests the circle center in the rectangle frame, inflated by the
/// radius; two rectangles use the separating-axis gap over both sets of edge
/// normals, which is negative exactly when the rectangles overlap.
pub fn col_pair<R: Real>(si: &[R; 4], bi: &Body, sj: &[R; 4], bj: &Body) -> R {
    match (bi.footprint, bj.footprint) {
        (Footprint::Circle { radius: ri }, Footprint::Circle { radius: rj }) => {
            let dx = sj[0] - si[0];
            let dy = sj[1] - si[1];
            (dx * dx + dy * dy + 1e-12).sqrt() - (ri + rj)
        }
        (Footprint::Rectangle { length, width }, Footprint::Circle { radius }) => {
            let (dx, dy) = into_frame(sj[0] - si[0], sj[1] - si[1], heading(bi.kind, si));
            col_point_rect(dx, dy, length, width) - radius
        }
        (Footprint::Circle { .. }, Footprint::Rectangle { .. }) => col_pair(sj, bj, si, bi),
        (Footprint::Rectangle { length: li, width: wi }, Footprint::Rectangle { length: lj, width: wj }) => {
            rect_vs_rect(si, heading(bi.kind, si), (li, wi), sj, heading(bj.kind, sj), (lj, wj))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyParams {
    /// Softplus sharpness in 1/m.
    pub sharpness: f64,
    /// Margin below which the penalty starts to bite, in m.
    pub buffer: f64,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        PenaltyParams { sharpness: 10.0, buffer: 0.0 }
    }
}

/// `sum_{i<j} sum_t softplus_k(buffer - margin_ij(t))` over trajectories that
/// share timestamps.
pub fn collision_penalty<R: Real>(trajectories: &[Vec<[R; 4]>], bodies: &[Body], params: &PenaltyParams) -> Option<R> {
    assert_eq!(trajectories.len(), bodies.len());
    let mut total: Option<R> = None;
    for i in 0..trajectories.len() {
        for j in i + 1..trajectories.len() {
            let steps = trajectories[i].len().min(trajectories[j].len());
            for t in 0..steps {
                let m = col_pair(&trajectories[i][t], &bodies[i], &trajectories[j][t], &bodies[j]);
                let p = (-m + params.buffer).softplus(params.sharpness);
                total = Some(match total {
                    Some(acc) => acc + p,
                    None => p,
                });
            }
        }
    }
    total
}

/// Plain-valued penalty; zero when there is nothing to compare.
pub fn collision_penalty_value(trajectories: &[Vec<[f64; 4]>], bodies: &[Body], params: &PenaltyParams) -> f64 {
    collision_penalty(trajectories, bodies, params).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;

    fn ped() -> Body {
        Body::default_for(AgentKind::Pedestrian)
    }
    fn car() -> Body {
        Body::default_for(AgentKind::Vehicle)
    }

    #[test]
    fn point_rect_examples() {
        assert_eq!(col_point_rect(0.0, 0.0, 4.0, 2.0), -1.0);
        assert_eq!(col_point_rect(2.5, 0.0, 4.0, 2.0), 0.5);
        assert_eq!(col_point_rect(1.0, 1.0, 4.0, 2.0), 0.0);
    }

    #[test]
    fn pedestrian_pair_margin() {
        let m = col_pair(&[0.0, 0.0, 0.0, 0.0], &ped(), &[1.0, 0.0, 0.0, 0.0], &ped());
        assert!((m - 0.4).abs() < 1e-9);
    }

    #[test]
    fn coincident_rectangles_collide() {
        let s = [1.0, 2.0, 3.0, 0.4];
        assert!(col_pair(&s, &car(), &s, &car()) < 0.0);
    }

    #[test]
    fn vehicle_pedestrian_face() {
        let m = col_pair(&[0.0, 0.0, 0.0, 0.0], &car(), &[2.2, 0.0, 0.0, 0.0], &ped());
        assert!((m - (-0.1)).abs() < 1e-12);
    }

    #[test]
    fn separated_rectangles_do_not_collide() {
        let a = [0.0, 0.0, 5.0, 0.0];
        let b = [6.0, 0.0, 5.0, 0.0];
        assert!(col_pair(&a, &car(), &b, &car()) > 0.0);
        // T-bone: corner of the second car pokes into the side of the first.
        let c = [0.0, 1.5, 0.0, std::f64::consts::FRAC_PI_2];
        assert!(col_pair(&a, &car(), &c, &car()) < 0.0);
    }

    #[test]
    fn penalty_vanishes_when_far_apart() {
        let a: Vec<_> = (0..5).map(|t| [t as f64, 0.0, 1.0, 0.0]).collect();
        let b: Vec<_> = (0..5).map(|t| [t as f64, 6.0, 1.0, 0.0]).collect();
        let p = collision_penalty_value(&[a.clone(), b], &[car(), car()], &PenaltyParams::default());
        assert!(p < 1e-6);
        let c: Vec<_> = (0..5).map(|t| [t as f64, 0.0, 1.0, 0.0]).collect();
        let p = collision_penalty_value(&[a, c], &[ped(), car()], &PenaltyParams::default());
        assert!(p > 1.0);
    }

    #[test]
    fn penalty_grows_with_overlap_duration() {
        let params = PenaltyParams::default();
        let mut last = 0.0;
        for t in 1..6 {
            let a = vec![[0.0, 0.0, 0.0, 0.0]; t];
            let p = collision_penalty_value(&[a.clone(), a], &[ped(), ped()], &params);
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let params = PenaltyParams { sharpness: 4.0, buffer: 0.5 };
        let bodies = [car(), ped()];
        let base: Vec<f64> = vec![
            0.0, 0.0, 2.0, 0.1, 0.9, 0.2, 2.0, 0.15, 1.8, 0.3, 2.0, 0.2, // car, 3 steps
            2.3, 0.4, 0.0, 0.0, 2.1, 0.5, 0.0, 0.0, 2.0, 0.45, 0.0, 0.0, // pedestrian
        ];
        let eval = |x: &[f64]| {
            let traj = |o: usize| -> Vec<[f64; 4]> {
                (0..3).map(|t| {
                    let k = o + 4 * t;
                    [x[k], x[k + 1], x[k + 2], x[k + 3]]
                }).collect()
            };
            collision_penalty_value(&[traj(0), traj(12)], &bodies, &params)
        };
        let tape = Tape::new();
        let vars: Vec<_> = base.iter().map(|&v| tape.scalar(v)).collect();
        let traj = |o: usize| -> Vec<[_; 4]> {
            (0..3).map(|t| {
                let k = o + 4 * t;
                [vars[k], vars[k + 1], vars[k + 2], vars[k + 3]]
            }).collect()
        };
        let root = collision_penalty(&[traj(0), traj(12)], &bodies, &params).unwrap();
        assert!(root.val() > 0.0);
        let g = tape.backward(root).unwrap();
        let h = 1e-6;
        for k in 0..base.len() {
            let (mut p, mut m) = (base.clone(), base.clone());
            p[k] += h;
            m[k] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h);
            let an = g.wrt(vars[k])[0];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom < 1e-4 || (fd - an).abs() < 1e-9, "{k}: {fd} vs {an}");
        }
    }

    #[test]
    fn crossed_rectangles_collide_without_corner_containment() {
        // A plus sign: neither rectangle has a corner inside the other.
        let long = Body::new(AgentKind::Vehicle, Footprint::Rectangle { length: 6.0, width: 1.0 });
        let m = col_pair(&[0.0, 0.0, 0.0, 0.0], &long, &[0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2], &long);
        assert!((m + 3.5).abs() < 1e-9, "{m}");
    }

    /// Dense point sampling of one rectangle tested against the other.
    fn overlap_by_sampling(si: &[f64; 4], bi: (f64, f64), sj: &[f64; 4], bj: (f64, f64)) -> bool {
        let n = 60;
        let (c, s) = (sj[3].cos(), sj[3].sin());
        for a in 0..=n {
            for b in 0..=n {
                let u = (a as f64 / n as f64 - 0.5) * bj.0;
                let v = (b as f64 / n as f64 - 0.5) * bj.1;
                let (px, py) = (sj[0] + c * u - s * v, sj[1] + s * u + c * v);
                let (dx, dy) = into_frame(px - si[0], py - si[1], si[3]);
                if dx.abs() < bi.0 / 2.0 && dy.abs() < bi.1 / 2.0 {
                    return true;
                }
            }
        }
        false
    }

    fn body_strategy() -> impl Strategy<Value = Body> {
        prop_oneof![
            (0.1f64..1.0).prop_map(|r| Body::new(AgentKind::Pedestrian, Footprint::Circle { radius: r })),
            (1.0f64..6.0, 0.5f64..3.0).prop_map(|(l, w)| Body::new(
                AgentKind::Vehicle,
                Footprint::Rectangle { length: l, width: w }
            )),
        ]
    }

    fn state_strategy() -> impl Strategy<Value = [f64; 4]> {
        (-10.0f64..10.0, -10.0f64..10.0, -3.0f64..3.0, -7.0f64..7.0).prop_map(|(a, b, c, d)| [a, b, c, d])
    }

    proptest! {
        #[test]
        fn col_pair_is_symmetric(si in state_strategy(), sj in state_strategy(),
                                 bi in body_strategy(), bj in body_strategy()) {
            let a = col_pair(&si, &bi, &sj, &bj);
            let b = col_pair(&sj, &bj, &si, &bi);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn col_pair_rigid_invariance(si in state_strategy(), sj in state_strategy(),
                                     bi in body_strategy(), bj in body_strategy(),
                                     tx in -50.0f64..50.0, ty in -50.0f64..50.0, rot in -3.2f64..3.2) {
            let tf = |s: [f64; 4], b: &Body| {
                let (c, sn) = (rot.cos(), rot.sin());
                let x = c * s[0] - sn * s[1] + tx;
                let y = sn * s[0] + c * s[1] + ty;
                match b.kind {
                    AgentKind::Vehicle => [x, y, s[2], s[3] + rot],
                    AgentKind::Pedestrian => [x, y, c * s[2] - sn * s[3], sn * s[2] + c * s[3]],
                }
            };
            let a = col_pair(&si, &bi, &sj, &bj);
            let b = col_pair(&tf(si, &bi), &bi, &tf(sj, &bj), &bj);
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }

        #[test]
        fn rectangle_margin_sign_matches_sampling(si in state_strategy(), sj in state_strategy(),
                                                  l1 in 1.0f64..6.0, w1 in 0.5f64..3.0,
                                                  l2 in 1.0f64..6.0, w2 in 0.5f64..3.0) {
            let bi = Body::new(AgentKind::Vehicle, Footprint::Rectangle { length: l1, width: w1 });
            let bj = Body::new(AgentKind::Vehicle, Footprint::Rectangle { length: l2, width: w2 });
            let m = col_pair(&si, &bi, &sj, &bj);
            prop_assume!(m.abs() > 0.1);
            prop_assert_eq!(m < 0.0, overlap_by_sampling(&si, (l1, w1), &sj, (l2, w2)));
        }

        #[test]
        fn penalty_non_increasing_with_separation(si in state_strategy(), bi in body_strategy(),
                                                  bj in body_strategy(), angle in -3.2f64..3.2,
                                                  d in 0.0f64..8.0, extra in 0.0f64..4.0, psi in -3.2f64..3.2) {
            let params = PenaltyParams::default();
            let place = |dist: f64| [si[0] + dist * angle.cos(), si[1] + dist * angle.sin(), 0.0, psi];
            let near = collision_penalty_value(&[vec![si], vec![place(d)]], &[bi, bj], &params);
            let far = collision_penalty_value(&[vec![si], vec![place(d + extra)]], &[bi, bj], &params);
            prop_assert!(far <= near + 1e-12, "near {} far {}", near, far);
        }
    }
}
