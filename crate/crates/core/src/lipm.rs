//! Linear inverted pendulum dynamics and the step-phase state machine.
//!
//! The centroidal model is the classic height-constrained point mass: the CoM
//! accelerates away from the stance pivot, x'' = omega^2 (x - p), with
//! omega = sqrt(g / h). Propagation over an interval has a closed form built
//! from cosh/sinh, so no integration error enters the pipeline; a numerical
//! integrator appears only in tests as an independent oracle.

use nalgebra::{Matrix4, Matrix4x2, Matrix6x2, Vector2, Vector4, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gravity, pendulum height and kinematic reach. `omega` is derived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipmParams {
    g: f64,
    h: f64,
    omega: f64,
    l_max: f64,
}

impl LipmParams {
    /// Builds params, enforcing positivity and `omega = sqrt(g / h)`.
    pub fn new(g: f64, h: f64, l_max: f64) -> Result<Self> {
        if !(g.is_finite() && h.is_finite() && l_max.is_finite()) {
            return Err(Error::NonFinite("lipm parameters"));
        }
        if g <= 0.0 || h <= 0.0 || l_max <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "lipm parameters must be positive: g={g}, h={h}, l_max={l_max}"
            )));
        }
        Ok(Self { g, h, omega: (g / h).sqrt(), l_max })
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Natural frequency sqrt(g / h), rad/s.
    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Maximum step length from the current stance, m.
    pub fn l_max(&self) -> f64 {
        self.l_max
    }
}

/// Planar CoM state [x, y, xd, yd] in world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipmState {
    pub x: f64,
    pub y: f64,
    pub xd: f64,
    pub yd: f64,
}

impl LipmState {
    pub fn new(x: f64, y: f64, xd: f64, yd: f64) -> Self {
        Self { x, y, xd, yd }
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.xd, self.yd)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self { x: v[0], y: v[1], xd: v[2], yd: v[3] }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.xd.is_finite() && self.yd.is_finite()
    }
}

/// Which leg currently carries the robot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// Stance pivot location and side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stance {
    pub px: f64,
    pub py: f64,
    pub side: Side,
}

impl Stance {
    pub fn new(px: f64, py: f64, side: Side) -> Self {
        Self { px, py, side }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.px, self.py)
    }

    pub fn is_finite(&self) -> bool {
        self.px.is_finite() && self.py.is_finite()
    }
}

/// Phase durations of one footstep cycle, seconds.
///
/// `t_land` is the landing window from the apex to touchdown, `t_lift` the
/// lifting window from touchdown to the next apex, `t_ds` the double-support
/// interval (zero means instantaneous stance exchange).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub t_lift: f64,
    pub t_land: f64,
    pub t_ds: f64,
}

impl StepTiming {
    pub fn new(t_lift: f64, t_land: f64, t_ds: f64) -> Result<Self> {
        let timing = Self { t_lift, t_land, t_ds };
        timing.validate()?;
        Ok(timing)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_lift.is_finite() && self.t_land.is_finite() && self.t_ds.is_finite()) {
            return Err(Error::NonFinite("step timing"));
        }
        if self.t_lift <= 0.0 || self.t_land <= 0.0 || self.t_ds < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "step timing requires t_lift > 0, t_land > 0, t_ds >= 0; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Apex-to-apex duration of one footstep.
    pub fn step_period(&self) -> f64 {
        self.t_lift + self.t_land + self.t_ds
    }
}

/// Closed-form state and stance transition matrices over an interval `t`.
///
/// With C1 = cosh(omega t), C2 = sinh(omega t)/omega, C3 = omega sinh(omega t):
/// the state map is block [[C1, C2], [C3, C1]] per axis and the stance enters
/// through [[1 - C1], [-C3]] per axis.
pub fn transition_matrices(params: &LipmParams, t: f64) -> Result<(Matrix4<f64>, Matrix4x2<f64>)> {
    if !t.is_finite() {
        return Err(Error::NonFinite("propagation time"));
    }
    let w = params.omega();
    let c1 = (w * t).cosh();
    let sh = (w * t).sinh();
    let c2 = sh / w;
    let c3 = w * sh;
    let f = Matrix4::new(
        c1, 0.0, c2, 0.0, //
        0.0, c1, 0.0, c2, //
        c3, 0.0, c1, 0.0, //
        0.0, c3, 0.0, c1,
    );
    let g = Matrix4x2::new(
        1.0 - c1, 0.0, //
        0.0, 1.0 - c1, //
        -c3, 0.0, //
        0.0, -c3,
    );
    Ok((f, g))
}

/// Propagates the CoM exactly for `t` seconds on a fixed stance.
pub fn propagate(params: &LipmParams, state: &LipmState, stance: &Stance, t: f64) -> Result<LipmState> {
    let (f, g) = transition_matrices(params, t)?;
    let next = f * state.as_vector() + g * stance.position();
    Ok(LipmState::from_vector(&next))
}

// ─── apex-to-apex footstep transition ───────────────────────────────────────

/// Drift term of the footstep transition: the upper state an action-free
/// pendulum would not reach, stacked as [CoM rows; 0, 0].
///
/// From one apex to the next the CoM rides the old stance through the landing
/// window (plus half of double support), then the new stance through the rest.
/// The affine decomposition `next = step_affine + step_gain * action` makes the
/// action dependence exactly linear, which the safety filter relies on.
pub fn step_affine(
    params: &LipmParams,
    timing: &StepTiming,
    state: &LipmState,
    stance: &Stance,
) -> Result<Vector6<f64>> {
    let t_pre = timing.t_land + 0.5 * timing.t_ds;
    let t_post = timing.t_lift + 0.5 * timing.t_ds;
    let mid = propagate(params, state, stance, t_pre)?;
    let (f_post, _) = transition_matrices(params, t_post)?;
    let top = f_post * mid.as_vector();
    Ok(Vector6::new(top[0], top[1], top[2], top[3], 0.0, 0.0))
}

/// Action gain of the footstep transition: [stance matrix over the lifting
/// window; identity], so the commanded target becomes the next stance exactly.
pub fn step_gain(params: &LipmParams, timing: &StepTiming) -> Result<Matrix6x2<f64>> {
    let t_post = timing.t_lift + 0.5 * timing.t_ds;
    let (_, g_post) = transition_matrices(params, t_post)?;
    let mut g = Matrix6x2::zeros();
    g.fixed_view_mut::<4, 2>(0, 0).copy_from(&g_post);
    g[(4, 0)] = 1.0;
    g[(5, 1)] = 1.0;
    Ok(g)
}

/// Upper state and stance stacked as [x, y, xd, yd, px, py].
pub fn upper_vector(state: &LipmState, stance: &Stance) -> Vector6<f64> {
    Vector6::new(state.x, state.y, state.xd, state.yd, stance.px, stance.py)
}

/// Executes one nominal footstep: next apex state plus the new stance.
pub fn apex_step(
    params: &LipmParams,
    timing: &StepTiming,
    state: &LipmState,
    stance: &Stance,
    action: &Vector2<f64>,
) -> Result<(LipmState, Stance)> {
    let next = step_affine(params, timing, state, stance)? + step_gain(params, timing)? * action;
    let next_state = LipmState::new(next[0], next[1], next[2], next[3]);
    let next_stance = Stance::new(action[0], action[1], stance.side.other());
    Ok((next_state, next_stance))
}

// ─── step-phase state machine ───────────────────────────────────────────────

/// Phases cycle DoubleSupport -> Lift -> Land.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    DoubleSupport,
    Lift,
    Land,
}

/// Events emitted while the clock runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseEvent {
    /// Midpoint of double support; stance bookkeeping switches here.
    SwitchingMoment,
    /// Lift -> Land boundary; footstep decisions are made here.
    ApexMoment,
    /// Land expiry; the swing foot reaches the ground.
    Touchdown,
}

/// Tracks the current phase and elapsed time within it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseClock {
    pub phase: Phase,
    pub elapsed: f64,
    switching_emitted: bool,
}

/// Tolerance for phase-boundary comparisons, absorbing dt accumulation error.
const BOUNDARY_EPS: f64 = 1e-9;

impl PhaseClock {
    pub fn new(phase: Phase) -> Self {
        Self { phase, elapsed: 0.0, switching_emitted: false }
    }

    /// Advances the clock by `dt`, emitting every boundary event crossed.
    ///
    /// Crossing a boundary rolls leftover time into the next phase, so a dt
    /// spanning several boundaries emits all of their events in order.
    pub fn advance(&mut self, timing: &StepTiming, dt: f64) -> Vec<PhaseEvent> {
        let mut events = Vec::new();
        let mut remaining = dt.max(0.0);
        loop {
            match self.phase {
                Phase::DoubleSupport => {
                    let half = 0.5 * timing.t_ds;
                    if !self.switching_emitted && self.elapsed + remaining >= half - BOUNDARY_EPS {
                        remaining -= (half - self.elapsed).max(0.0);
                        self.elapsed = half;
                        self.switching_emitted = true;
                        events.push(PhaseEvent::SwitchingMoment);
                        continue;
                    }
                    if self.switching_emitted && self.elapsed + remaining >= timing.t_ds - BOUNDARY_EPS {
                        remaining -= (timing.t_ds - self.elapsed).max(0.0);
                        self.phase = Phase::Lift;
                        self.elapsed = 0.0;
                        self.switching_emitted = false;
                        continue;
                    }
                    self.elapsed += remaining;
                    return events;
                }
                Phase::Lift => {
                    if self.elapsed + remaining >= timing.t_lift - BOUNDARY_EPS {
                        remaining -= (timing.t_lift - self.elapsed).max(0.0);
                        self.phase = Phase::Land;
                        self.elapsed = 0.0;
                        events.push(PhaseEvent::ApexMoment);
                        continue;
                    }
                    self.elapsed += remaining;
                    return events;
                }
                Phase::Land => {
                    if self.elapsed + remaining >= timing.t_land - BOUNDARY_EPS {
                        remaining -= (timing.t_land - self.elapsed).max(0.0);
                        self.phase = Phase::DoubleSupport;
                        self.elapsed = 0.0;
                        events.push(PhaseEvent::Touchdown);
                        continue;
                    }
                    self.elapsed += remaining;
                    return events;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::{stream, StreamLabel};

    fn draco_params() -> LipmParams {
        LipmParams::new(9.81, 0.93, 0.7).unwrap()
    }

    /// Independent oracle: RK4 on x'' = omega^2 (x - p).
    fn rk4_propagate(params: &LipmParams, state: &LipmState, stance: &Stance, t: f64, dt: f64) -> LipmState {
        let w2 = params.omega() * params.omega();
        let deriv = |s: [f64; 4]| {
            [s[2], s[3], w2 * (s[0] - stance.px), w2 * (s[1] - stance.py)]
        };
        let add = |a: [f64; 4], b: [f64; 4], c: f64| {
            [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2], a[3] + c * b[3]]
        };
        let mut s = [state.x, state.y, state.xd, state.yd];
        let n = (t.abs() / dt).ceil().max(1.0) as usize;
        let h = t / n as f64;
        for _ in 0..n {
            let k1 = deriv(s);
            let k2 = deriv(add(s, k1, 0.5 * h));
            let k3 = deriv(add(s, k2, 0.5 * h));
            let k4 = deriv(add(s, k3, h));
            for i in 0..4 {
                s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        LipmState::new(s[0], s[1], s[2], s[3])
    }

    #[test]
    fn test_closed_form_matches_integrated_dynamics() {
        let params = draco_params();
        let state = LipmState::new(0.05, -0.02, 0.31, 0.12);
        let stance = Stance::new(0.0, 0.1, Side::Left);
        let exact = propagate(&params, &state, &stance, 0.16).unwrap();
        let numeric = rk4_propagate(&params, &state, &stance, 0.16, 1e-5);
        assert!((exact.x - numeric.x).abs() < 1e-9);
        assert!((exact.y - numeric.y).abs() < 1e-9);
        assert!((exact.xd - numeric.xd).abs() < 1e-9);
        assert!((exact.yd - numeric.yd).abs() < 1e-9);
    }

    #[test]
    fn test_propagate_at_zero_is_identity() {
        let params = draco_params();
        let (f, g) = transition_matrices(&params, 0.0).unwrap();
        assert_eq!(f, Matrix4::identity());
        assert_eq!(g, Matrix4x2::zeros());
    }

    #[test]
    fn test_equilibrium_is_a_fixed_point() {
        let params = draco_params();
        let state = LipmState::new(0.3, -0.2, 0.0, 0.0);
        let stance = Stance::new(0.3, -0.2, Side::Right);
        let next = propagate(&params, &state, &stance, 1.7).unwrap();
        assert!((next.x - state.x).abs() < 1e-12);
        assert!((next.y - state.y).abs() < 1e-12);
        assert!(next.xd.abs() < 1e-12);
        assert!(next.yd.abs() < 1e-12);
    }

    #[test]
    fn test_semigroup_composition() {
        let params = draco_params();
        let mut rng = stream(42, StreamLabel::Verify, 0, 0);
        for _ in 0..200 {
            let state = LipmState::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let stance = Stance::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), Side::Left);
            let t1 = rng.gen_range(0.0..0.4);
            let t2 = rng.gen_range(0.0..0.4);
            let two_hops = propagate(
                &params,
                &propagate(&params, &state, &stance, t1).unwrap(),
                &stance,
                t2,
            )
            .unwrap();
            let one_hop = propagate(&params, &state, &stance, t1 + t2).unwrap();
            assert!((two_hops.x - one_hop.x).abs() < 1e-9);
            assert!((two_hops.y - one_hop.y).abs() < 1e-9);
            assert!((two_hops.xd - one_hop.xd).abs() < 1e-9);
            assert!((two_hops.yd - one_hop.yd).abs() < 1e-9);
        }
    }

    #[test]
    fn test_orbital_energy_is_conserved() {
        // E = (v^2 - omega^2 (x - p)^2) / 2 per axis is an invariant of the flow.
        let params = draco_params();
        let w2 = params.omega() * params.omega();
        let mut rng = stream(43, StreamLabel::Verify, 0, 0);
        for _ in 0..200 {
            let state = LipmState::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let stance = Stance::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), Side::Right);
            let t = rng.gen_range(0.0..0.6);
            let next = propagate(&params, &state, &stance, t).unwrap();
            let e0x = 0.5 * (state.xd * state.xd - w2 * (state.x - stance.px).powi(2));
            let e1x = 0.5 * (next.xd * next.xd - w2 * (next.x - stance.px).powi(2));
            let e0y = 0.5 * (state.yd * state.yd - w2 * (state.y - stance.py).powi(2));
            let e1y = 0.5 * (next.yd * next.yd - w2 * (next.y - stance.py).powi(2));
            assert!((e0x - e1x).abs() < 1e-8);
            assert!((e0y - e1y).abs() < 1e-8);
        }
    }

    #[test]
    fn test_capture_point_offset_grows_exponentially() {
        // The unstable mode x + xd/omega - px scales by exactly e^(omega t).
        let params = draco_params();
        let w = params.omega();
        let state = LipmState::new(0.08, -0.03, 0.2, 0.4);
        let stance = Stance::new(0.01, 0.02, Side::Left);
        let t = 0.27;
        let next = propagate(&params, &state, &stance, t).unwrap();
        let u0 = state.x + state.xd / w - stance.px;
        let u1 = next.x + next.xd / w - stance.px;
        assert!((u1 - u0 * (w * t).exp()).abs() < 1e-12);
    }

    #[test]
    fn test_rejects_nonfinite_time() {
        let params = draco_params();
        assert!(transition_matrices(&params, f64::NAN).is_err());
        assert!(transition_matrices(&params, f64::INFINITY).is_err());
    }

    #[test]
    fn test_rejects_bad_params() {
        assert!(LipmParams::new(9.81, 0.0, 0.7).is_err());
        assert!(LipmParams::new(-1.0, 0.9, 0.7).is_err());
        assert!(LipmParams::new(9.81, f64::NAN, 0.7).is_err());
        assert!(StepTiming::new(0.0, 0.16, 0.0).is_err());
        assert!(StepTiming::new(0.16, 0.16, -0.1).is_err());
    }

    #[test]
    fn test_apex_step_matches_two_phase_propagation() {
        let params = draco_params();
        let timing = StepTiming::new(0.16, 0.16, 0.0).unwrap();
        let state = LipmState::new(0.04, -0.01, 0.35, 0.05);
        let stance = Stance::new(-0.02, 0.08, Side::Left);
        let action = Vector2::new(0.12, -0.03);

        let (next, next_stance) = apex_step(&params, &timing, &state, &stance, &action).unwrap();

        let touchdown = propagate(&params, &state, &stance, timing.t_land).unwrap();
        let landed = Stance::new(action[0], action[1], Side::Right);
        let lifted = propagate(&params, &touchdown, &landed, timing.t_lift).unwrap();
        assert!((next.x - lifted.x).abs() < 1e-12);
        assert!((next.y - lifted.y).abs() < 1e-12);
        assert!((next.xd - lifted.xd).abs() < 1e-12);
        assert!((next.yd - lifted.yd).abs() < 1e-12);
        assert_eq!(next_stance.side, Side::Right);
    }

    #[test]
    fn test_next_stance_equals_action_bit_exactly() {
        let params = draco_params();
        let timing = StepTiming::new(0.16, 0.16, 0.04).unwrap();
        let state = LipmState::new(0.04, -0.01, 0.35, 0.05);
        let stance = Stance::new(-0.02, 0.08, Side::Right);
        let action = Vector2::new(0.1234567890123, -0.0312345678901);
        let (_, next_stance) = apex_step(&params, &timing, &state, &stance, &action).unwrap();
        assert_eq!(next_stance.px, action[0]);
        assert_eq!(next_stance.py, action[1]);
        assert_eq!(next_stance.side, Side::Left);
    }

    #[test]
    fn test_double_support_splits_around_stance_switch() {
        let params = draco_params();
        let timing = StepTiming::new(0.16, 0.16, 0.06).unwrap();
        let state = LipmState::new(0.0, 0.05, 0.3, -0.1);
        let stance = Stance::new(0.0, 0.0, Side::Left);
        let action = Vector2::new(0.15, 0.02);
        let (next, _) = apex_step(&params, &timing, &state, &stance, &action).unwrap();

        let pre = propagate(&params, &state, &stance, timing.t_land + 0.03).unwrap();
        let landed = Stance::new(action[0], action[1], Side::Right);
        let post = propagate(&params, &pre, &landed, 0.03 + timing.t_lift).unwrap();
        assert!((next.x - post.x).abs() < 1e-12);
        assert!((next.xd - post.xd).abs() < 1e-12);
    }

    #[test]
    fn test_full_cycle_emits_each_event_once() {
        let timing = StepTiming::new(0.16, 0.16, 0.04).unwrap();
        let mut clock = PhaseClock::new(Phase::DoubleSupport);
        let mut counts = [0usize; 3];
        let dt = 0.01;
        let steps = (timing.step_period() / dt).round() as usize;
        for _ in 0..steps {
            for event in clock.advance(&timing, dt) {
                match event {
                    PhaseEvent::SwitchingMoment => counts[0] += 1,
                    PhaseEvent::ApexMoment => counts[1] += 1,
                    PhaseEvent::Touchdown => counts[2] += 1,
                }
            }
        }
        assert_eq!(counts, [1, 1, 1]);
    }

    #[test]
    fn test_apex_fires_at_step_16_of_lift() {
        // Table-style timing 0.16/0.16 at dt = 0.01.
        let timing = StepTiming::new(0.16, 0.16, 0.0).unwrap();
        let mut clock = PhaseClock::new(Phase::Lift);
        let mut apex_step = None;
        for step in 1..=32 {
            let events = clock.advance(&timing, 0.01);
            if events.contains(&PhaseEvent::ApexMoment) {
                apex_step = Some(step);
                break;
            }
        }
        assert_eq!(apex_step, Some(16));
    }

    #[test]
    fn test_zero_double_support_switches_instantly() {
        let timing = StepTiming::new(0.16, 0.16, 0.0).unwrap();
        let mut clock = PhaseClock::new(Phase::Land);
        // One dt crossing the Land boundary must emit Touchdown, pass through the
        // zero-length double support (emitting SwitchingMoment), and enter Lift.
        let events = clock.advance(&timing, 0.16);
        assert_eq!(events, vec![PhaseEvent::Touchdown, PhaseEvent::SwitchingMoment]);
        assert_eq!(clock.phase, Phase::Lift);
    }

    #[test]
    fn test_oversized_dt_wraps_multiple_cycles() {
        let timing = StepTiming::new(0.16, 0.16, 0.02).unwrap();
        let mut clock = PhaseClock::new(Phase::DoubleSupport);
        let events = clock.advance(&timing, 2.0 * timing.step_period());
        let apexes = events.iter().filter(|e| **e == PhaseEvent::ApexMoment).count();
        assert_eq!(apexes, 2);
    }
}
