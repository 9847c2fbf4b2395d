//! Input-bounded agent dynamics.
//!
//! Vehicles follow a Dubins car `s = [X, Y, v, psi]`, `a = [v_dot, psi_dot]`;
//! pedestrians a planar double integrator `s = [X, Y, v_x, v_y]`,
//! `a = [v_x_dot, v_y_dot]`. Both use a forward-Euler update.
//!
//! Vehicle speed may become negative (reversing is not excluded). The
//! longitudinal bound is an acceleration of 5 m/s^2.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
}

impl AgentKind {
    pub const ALL: [AgentKind; 2] = [AgentKind::Vehicle, AgentKind::Pedestrian];

    /// Symmetric per-component control bounds.
    pub fn action_bounds(self) -> [f64; 2] {
        match self {
            AgentKind::Vehicle => [VEHICLE_ACCEL_BOUND, VEHICLE_YAW_RATE_BOUND],
            AgentKind::Pedestrian => [PEDESTRIAN_ACCEL_BOUND, PEDESTRIAN_ACCEL_BOUND],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Vehicle => "vehicle",
            AgentKind::Pedestrian => "pedestrian",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

pub type State = [f64; 4];
pub type Action = [f64; 2];

pub const VEHICLE_ACCEL_BOUND: f64 = 5.0;
pub const VEHICLE_YAW_RATE_BOUND: f64 = 1.0;
pub const PEDESTRIAN_ACCEL_BOUND: f64 = 5.0;

/// Sharpness of the smooth clamp relative to the bound.
const CLAMP_SHARPNESS: f64 = 15.0;

/// One Euler step. Differentiable in state and action when `R` is taped.
pub fn step<R: Real>(kind: AgentKind, s: &[R; 4], a: &[R; 2], dt: f64) -> [R; 4] {
    match kind {
        AgentKind::Vehicle => {
            let [x, y, v, psi] = *s;
            [
                x + v * psi.cos() * dt,
                y + v * psi.sin() * dt,
                v + a[0] * dt,
                psi + a[1] * dt,
            ]
        }
        AgentKind::Pedestrian => {
            let [x, y, vx, vy] = *s;
            [x + vx * dt, y + vy * dt, vx + a[0] * dt, vy + a[1] * dt]
        }
    }
}

/// [`step`] on plain values, rejecting non-finite inputs and non-positive `dt`.
pub fn step_checked(kind: AgentKind, s: &State, a: &Action, dt: f64) -> Result<State> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Invalid(format!("time step must be positive, got {dt}")));
    }
    if s.iter().chain(a.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("state {s:?} / action {a:?}")));
    }
    Ok(step(kind, s, a, dt))
}

/// Smooth saturation into the kind's bounds:
/// `x - sp(x - b) + sp(-x - b)` with `sp` a softplus of sharpness `15 / b`.
/// Within half the bound it deviates from the identity by well under 1e-3; the
/// output never leaves `(-b, b)` and its gradient never vanishes exactly.
pub fn clamp_action<R: Real>(raw: &[R; 2], kind: AgentKind) -> [R; 2] {
    let bounds = kind.action_bounds();
    let f = |x: R, b: f64| {
        let k = CLAMP_SHARPNESS / b;
        let hi = (x - b).softplus(k);
        let lo = (-x - b).softplus(k);
        let y = x - hi + lo;
        // Guard the far tails, where cancellation can round onto the bound.
        let limit = b * (1.0 - 1e-12);
        y.min(y.lift(limit)).max(y.lift(-limit))
    };
    [f(raw[0], bounds[0]), f(raw[1], bounds[1])]
}

/// True when every component lies within the kind's bounds.
pub fn within_bounds(kind: AgentKind, a: &Action) -> bool {
    let b = kind.action_bounds();
    a[0].abs() <= b[0] && a[1].abs() <= b[1]
}

/// Zero-action propagation; returns `horizon + 1` states starting with `s`.
pub fn flow(kind: AgentKind, s: &State, horizon: usize, dt: f64) -> Vec<State> {
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(*s);
    let zero = [0.0, 0.0];
    for t in 0..horizon {
        let next = step(kind, &out[t], &zero, dt);
        out.push(next);
    }
    out
}

/// Applies `controls` from `s0`; returns one state per control.
pub fn rollout(kind: AgentKind, s0: &State, controls: &[Action], dt: f64) -> Vec<State> {
    let mut s = *s0;
    controls
        .iter()
        .map(|a| {
            s = step(kind, &s, a, dt);
            s
        })
        .collect()
}

/// Planar velocity.
pub fn velocity<R: Real>(kind: AgentKind, s: &[R; 4]) -> [R; 2] {
    match kind {
        AgentKind::Vehicle => [s[2] * s[3].cos(), s[2] * s[3].sin()],
        AgentKind::Pedestrian => [s[2], s[3]],
    }
}

/// Orientation used for local frames: vehicle heading, zero for pedestrians.
pub fn frame_heading(kind: AgentKind, s: &State) -> f64 {
    match kind {
        AgentKind::Vehicle => s[3],
        AgentKind::Pedestrian => 0.0,
    }
}

/// Scalar speed.
pub fn speed(kind: AgentKind, s: &State) -> f64 {
    match kind {
        AgentKind::Vehicle => s[2],
        AgentKind::Pedestrian => s[2].hypot(s[3]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn vehicle_coasts_straight() {
        let s = step(AgentKind::Vehicle, &[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0], 0.1);
        assert!(close(&s, &[0.1, 0.0, 1.0, 0.0], 1e-15));
    }

    #[test]
    fn vehicle_heading_along_y() {
        let s = step(AgentKind::Vehicle, &[0.0, 0.0, 1.0, FRAC_PI_2], &[0.0, 0.0], 0.5);
        assert!(close(&s, &[0.0, 0.5, 1.0, FRAC_PI_2], 1e-15));
    }

    #[test]
    fn pedestrian_double_integrator() {
        let s = step(AgentKind::Pedestrian, &[0.0, 0.0, 1.0, 1.0], &[1.0, 0.0], 0.5);
        assert!(close(&s, &[0.5, 0.5, 1.5, 1.0], 1e-15));
    }

    #[test]
    fn checked_step_rejects_bad_input() {
        let k = AgentKind::Vehicle;
        assert!(step_checked(k, &[f64::NAN, 0.0, 0.0, 0.0], &[0.0, 0.0], 0.1).is_err());
        assert!(step_checked(k, &[0.0; 4], &[0.0, 0.0], 0.0).is_err());
        assert!(step_checked(k, &[0.0; 4], &[0.0, 0.0], 0.1).is_ok());
    }

    #[test]
    fn clamp_saturates_at_bounds() {
        let a = clamp_action(&[10.0, 0.0], AgentKind::Vehicle);
        assert!((a[0] - 5.0).abs() < 1e-3 && a[0] < 5.0);
        assert!(a[1].abs() < 1e-12);
        let a = clamp_action(&[0.0, -7.0], AgentKind::Vehicle);
        assert!((a[1] + 1.0).abs() < 1e-3 && a[1] > -1.0);
    }

    #[test]
    fn clamp_is_near_identity_inside() {
        for kind in AgentKind::ALL {
            let b = kind.action_bounds();
            for frac in [-0.5, -0.25, 0.0, 0.3, 0.5] {
                let raw = [frac * b[0], frac * b[1]];
                let a = clamp_action(&raw, kind);
                assert!((a[0] - raw[0]).abs() < 1e-3, "{kind:?} {frac}");
                assert!((a[1] - raw[1]).abs() < 1e-3, "{kind:?} {frac}");
            }
        }
    }

    #[test]
    fn clamp_keeps_gradient_at_saturation() {
        let tape = Tape::new();
        let raw = tape.scalar(6.0);
        let a = clamp_action(&[raw, tape.scalar(0.0)], AgentKind::Vehicle);
        let g = tape.backward(a[0]).unwrap();
        let d = g.wrt(raw)[0];
        assert!(d > 0.0 && d < 1.0);
    }

    #[test]
    fn flow_examples() {
        let xs: Vec<f64> = flow(AgentKind::Pedestrian, &[0.0, 0.0, 1.0, 0.0], 3, 1.0)
            .iter()
            .map(|s| s[0])
            .collect();
        assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0]);
        let still = flow(AgentKind::Vehicle, &[3.0, 4.0, 0.0, 1.0], 5, 0.5);
        assert!(still.iter().all(|s| *s == [3.0, 4.0, 0.0, 1.0]));
        let xs: Vec<f64> = flow(AgentKind::Vehicle, &[0.0, 0.0, 2.0, std::f64::consts::PI], 2, 0.5)
            .iter()
            .map(|s| s[0])
            .collect();
        assert!(close(&xs, &[0.0, -1.0, -2.0], 1e-12));
    }

    #[test]
    fn step_gradient_matches_finite_differences() {
        let s0 = [0.3, -1.2, 2.5, 0.7];
        let a0 = [0.4, -0.2];
        let dt = 0.5;
        let kind = AgentKind::Vehicle;
        let weights = [0.3, -1.1, 0.7, 1.9];
        let objective = |s: &[f64; 4], a: &[f64; 2]| -> f64 {
            let n = step(kind, s, a, dt);
            n.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>()
        };
        let tape = Tape::new();
        let sv: Vec<_> = s0.iter().map(|&v| tape.scalar(v)).collect();
        let av: Vec<_> = a0.iter().map(|&v| tape.scalar(v)).collect();
        let n = step(kind, &[sv[0], sv[1], sv[2], sv[3]], &[av[0], av[1]], dt);
        let mut root = n[0] * weights[0];
        for k in 1..4 {
            root = root + n[k] * weights[k];
        }
        let g = tape.backward(root).unwrap();
        let h = 1e-5;
        for k in 0..4 {
            let (mut p, mut m) = (s0, s0);
            p[k] += h;
            m[k] -= h;
            let fd = (objective(&p, &a0) - objective(&m, &a0)) / (2.0 * h);
            let an = g.wrt(sv[k])[0];
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "state {k}: {fd} vs {an}");
        }
        for k in 0..2 {
            let (mut p, mut m) = (a0, a0);
            p[k] += h;
            m[k] -= h;
            let fd = (objective(&s0, &p) - objective(&s0, &m)) / (2.0 * h);
            let an = g.wrt(av[k])[0];
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "action {k}: {fd} vs {an}");
        }
    }

    proptest! {
        #[test]
        fn clamp_output_always_within_bounds(x in -1e6f64..1e6, y in -1e6f64..1e6) {
            for kind in AgentKind::ALL {
                let a = clamp_action(&[x, y], kind);
                prop_assert!(within_bounds(kind, &a));
            }
        }

        #[test]
        fn flow_prefix_property(x in -10.0f64..10.0, y in -10.0f64..10.0, v in -5.0f64..15.0,
                                psi in -7.0f64..7.0, t in 0usize..12, k in 0usize..12) {
            let k = k.min(t);
            for kind in AgentKind::ALL {
                let long = flow(kind, &[x, y, v, psi], t, 0.4);
                let short = flow(kind, &[x, y, v, psi], k, 0.4);
                prop_assert_eq!(&long[..=k], &short[..]);
            }
        }
    }
}
