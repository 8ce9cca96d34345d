//! Surrogate stepping environment.
//!
//! Stands in for the robot plus its whole-body controller: one environment
//! step spans one footstep, apex to apex. The upper state follows the exact
//! closed-form step map plus an injected ground-truth residual and optional
//! push impulses; the lower state (torso attitude, heading) is synthesized by
//! a damped second-order model because it has no closed form. Rewards and the
//! fall test are computed on the post-step state.

use nalgebra::{Matrix2, SVector, Vector2, Vector3, Vector4, Vector6};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capturability::{capture_offset, RadiusConvention, SafePolytope};
use crate::error::{Error, Result};
use crate::lipm::{
    step_affine, step_gain, transition_matrices, LipmParams, LipmState,
    Side, Stance, StepTiming,
};
use crate::policy::{featurize, OBS_DIM};
use crate::rng::normal;

const PI: f64 = std::f64::consts::PI;

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

// ─── ground-truth residual ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    Zero,
    /// The per-row magnitudes, applied verbatim every step.
    ConstantBias,
    /// Sinusoidal in the CoM position; phases derive from `rng_seed`.
    SmoothField,
    /// Constant-slope drift: magnitudes 0 and 1 are slope angles (rad) about
    /// the y and x axes, converted to the exact per-step position and
    /// velocity offsets of a constant acceleration g tan(angle).
    TiltPreset,
}

/// Ground-truth residual injected on the state rows of the step map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSpec {
    pub kind: ResidualKind,
    /// Per-row scale on [x, y, xd, yd]; the residual never exceeds it in
    /// magnitude (slope kinds excepted, where rows 0-1 are angles).
    pub magnitude: [f64; 4],
    pub rng_seed: u64,
}

impl ResidualSpec {
    pub fn zero() -> Self {
        Self { kind: ResidualKind::Zero, magnitude: [0.0; 4], rng_seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.magnitude.iter().all(|m| m.is_finite()) {
            return Err(Error::NonFinite("residual magnitude"));
        }
        Ok(())
    }

    /// d on [x, y, xd, yd], evaluated at the pre-step state.
    pub fn evaluate(
        &self,
        params: &LipmParams,
        timing: &StepTiming,
        state: &LipmState,
        _stance: &Stance,
    ) -> Vector4<f64> {
        match self.kind {
            ResidualKind::Zero => Vector4::zeros(),
            ResidualKind::ConstantBias => Vector4::from_column_slice(&self.magnitude),
            ResidualKind::SmoothField => {
                let phase = |i: u64| -> f64 {
                    let mut h = self.rng_seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(i);
                    h ^= h >> 31;
                    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
                    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 * PI
                };
                Vector4::from_fn(|i, _| {
                    self.magnitude[i] * (3.0 * state.x + 1.7 * state.y + phase(i as u64)).sin()
                })
            }
            ResidualKind::TiltPreset => {
                let t = timing.step_period();
                let ax = params.g() * self.magnitude[0].tan();
                let ay = params.g() * self.magnitude[1].tan();
                Vector4::new(0.5 * ax * t * t, 0.5 * ay * t * t, ax * t, ay * t)
            }
        }
    }
}

// ─── disturbances ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceTiming {
    /// Shortly after the current apex (midpoint of the pre-switch window).
    PostApex,
    /// Shortly before the next apex (midpoint of the post-switch window).
    PreApex,
    /// Uniformly random within the step.
    Random,
}

/// Push impulses mapped to CoM velocity jumps dv = F * duration / mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    /// Peak force magnitude in newtons; each step samples U(-force, force).
    pub force: f64,
    pub duration: f64,
    pub mass: f64,
    pub timing: DisturbanceTiming,
}

impl DisturbanceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.force.is_finite() && self.duration.is_finite() && self.mass.is_finite()) {
            return Err(Error::NonFinite("disturbance spec"));
        }
        if self.force < 0.0 || self.duration <= 0.0 || self.mass <= 0.0 {
            return Err(Error::InvalidParameter(format!("bad disturbance spec {self:?}")));
        }
        Ok(())
    }
}

// ─── rewards and references ─────────────────────────────────────────────────

/// Five-term stepping reward. Names follow the conventional shorthand:
/// alive bonus r_a, body posture w_b, tracking w_t, speed w_s, step cost w_c.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub r_a: f64,
    pub w_b: f64,
    pub w_t: f64,
    pub w_s: f64,
    pub w_c: f64,
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.r_a, self.w_b, self.w_t, self.w_s, self.w_c];
        if !all.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("reward weights"));
        }
        if [self.w_b, self.w_t, self.w_s, self.w_c].iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidParameter("reward weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Commanded gait: heading-frame velocity plus turn rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesiredMotion {
    pub vx: f64,
    pub vy: f64,
    pub turn_rate: f64,
}

impl DesiredMotion {
    pub fn validate(&self) -> Result<()> {
        if !(self.vx.is_finite() && self.vy.is_finite() && self.turn_rate.is_finite()) {
            return Err(Error::NonFinite("desired motion"));
        }
        Ok(())
    }
}

/// Moving pose reference the reward tracks; advances one step period at a
/// time along the commanded motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceState {
    pub pos: Vector2<f64>,
    pub yaw: f64,
}

impl ReferenceState {
    fn advanced(&self, desired: &DesiredMotion, dt: f64) -> Self {
        let (s, c) = self.yaw.sin_cos();
        let v_world = Vector2::new(c * desired.vx - s * desired.vy, s * desired.vx + c * desired.vy);
        Self { pos: self.pos + v_world * dt, yaw: wrap_angle(self.yaw + desired.turn_rate * dt) }
    }

    /// World-frame desired velocity at this reference heading.
    pub fn desired_velocity(&self, desired: &DesiredMotion) -> Vector2<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector2::new(c * desired.vx - s * desired.vy, s * desired.vx + c * desired.vy)
    }
}

// ─── apex state ─────────────────────────────────────────────────────────────

/// Synthesized lower state: torso attitude, rates, and the stance heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorsoState {
    pub rpy: Vector3<f64>,
    pub angvel: Vector3<f64>,
    pub pivot_yaw: f64,
}

impl TorsoState {
    pub fn level() -> Self {
        Self { rpy: Vector3::zeros(), angvel: Vector3::zeros(), pivot_yaw: 0.0 }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.rpy.x, self.rpy.y, self.rpy.z, self.angvel.x, self.angvel.y, self.angvel.z]
    }
}

/// Full decision-point state: closed-form upper part plus synthetic lower part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApexState {
    pub state: LipmState,
    pub stance: Stance,
    pub torso: TorsoState,
}

// ─── environment ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EnvParams {
    pub lipm: LipmParams,
    pub timing: StepTiming,
    pub reward: RewardWeights,
    pub desired: DesiredMotion,
    pub residual: ResidualSpec,
    pub disturbance: Option<DisturbanceSpec>,
    pub horizon: usize,
    /// Fall when the 2-step barrier drops below -fall_margin.
    pub fall_margin: f64,
    pub convention: RadiusConvention,
    /// Scale of the random apex perturbation applied at reset.
    pub reset_noise: f64,
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        self.timing.validate()?;
        self.reward.validate()?;
        self.desired.validate()?;
        self.residual.validate()?;
        if let Some(d) = &self.disturbance {
            d.validate()?;
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be positive".into()));
        }
        if !(self.fall_margin.is_finite() && self.fall_margin >= 0.0) {
            return Err(Error::InvalidParameter(format!("bad fall margin {}", self.fall_margin)));
        }
        if !(self.reset_noise.is_finite() && self.reset_noise >= 0.0) {
            return Err(Error::InvalidParameter(format!("bad reset noise {}", self.reset_noise)));
        }
        Ok(())
    }
}

/// Result of one footstep.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Upper state actually reached, residual and pushes included.
    pub observed_upper: Vector6<f64>,
    pub reward: f64,
    /// True on a fall; horizon exhaustion is reported separately.
    pub terminated: bool,
    /// Smallest 2-step barrier component after the step.
    pub h_min: f64,
}

// Torso response tuning; see `torso_transition`.
const TORSO_OMEGA: f64 = 6.0;
const TORSO_ZETA: f64 = 0.7;
const TORSO_NOISE_FLOOR: f64 = 0.002;
const TORSO_NOISE_GAIN: f64 = 0.05;
const YAW_NOISE: f64 = 0.002;
/// Torso roll or pitch beyond this is a fall regardless of capturability.
pub const TORSO_FALL_LIMIT: f64 = PI / 3.0;

/// Exact discrete transition of the damped oscillator
/// theta'' = -omega^2 theta - 2 zeta omega theta' over dt.
fn torso_transition(dt: f64) -> Matrix2<f64> {
    let wn = TORSO_OMEGA;
    let z = TORSO_ZETA;
    let wd = wn * (1.0 - z * z).sqrt();
    let e = (-z * wn * dt).exp();
    let (s, c) = (wd * dt).sin_cos();
    let k = z / (1.0 - z * z).sqrt();
    Matrix2::new(e * (c + k * s), e * s / wd, -e * wn * s / (1.0 - z * z).sqrt(), e * (c - k * s))
}

pub struct SurrogateEnv {
    params: EnvParams,
    fall_poly: SafePolytope,
    gain: nalgebra::Matrix6x2<f64>,
    torso_step: Matrix2<f64>,
    rng: ChaCha8Rng,
    apex: ApexState,
    reference: ReferenceState,
    steps: usize,
    terminated: bool,
    pending_impulse: Option<(Vector2<f64>, DisturbanceTiming)>,
}

impl SurrogateEnv {
    /// Builds the environment and performs the initial reset.
    pub fn new(params: EnvParams, rng: ChaCha8Rng) -> Result<Self> {
        params.validate()?;
        let fall_poly = SafePolytope::from_steps(&params.lipm, &params.timing, 2, params.convention)?;
        let gain = step_gain(&params.lipm, &params.timing)?;
        let torso_step = torso_transition(params.timing.step_period());
        let mut env = Self {
            params,
            fall_poly,
            gain,
            torso_step,
            rng,
            apex: ApexState {
                state: LipmState::new(0.0, 0.0, 0.0, 0.0),
                stance: Stance::new(0.0, 0.0, Side::Left),
                torso: TorsoState::level(),
            },
            reference: ReferenceState { pos: Vector2::zeros(), yaw: 0.0 },
            steps: 0,
            terminated: false,
            pending_impulse: None,
        };
        env.reset();
        Ok(env)
    }

    /// Periodic apex state for a constant step displacement, relative to a
    /// stance at the origin. Solving r = M r - shift per axis, where M is the
    /// full-period transition and the shift re-expresses the state about the
    /// advanced stance.
    pub fn steady_gait(
        params: &LipmParams,
        timing: &StepTiming,
        step: Vector2<f64>,
    ) -> Result<(LipmState, Stance)> {
        let t_pre = timing.t_land + 0.5 * timing.t_ds;
        let t_post = timing.t_lift + 0.5 * timing.t_ds;
        let (f_pre, _) = transition_matrices(params, t_pre)?;
        let (f_post, _) = transition_matrices(params, t_post)?;
        let axis = |m: &nalgebra::Matrix4<f64>| Matrix2::new(m[(0, 0)], m[(0, 2)], m[(2, 0)], m[(2, 2)]);
        let m = axis(&f_post) * axis(&f_pre);
        let pose_shift = axis(&f_post) * Vector2::new(1.0, 0.0);
        let solve = |delta: f64| -> Result<Vector2<f64>> {
            let lhs = m - Matrix2::identity();
            lhs.lu()
                .solve(&(pose_shift * delta))
                .ok_or_else(|| Error::NumericalFault("steady gait system is singular".into()))
        };
        let rx = solve(step.x)?;
        let ry = solve(step.y)?;
        Ok((LipmState::new(rx[0], ry[0], rx[1], ry[1]), Stance::new(0.0, 0.0, Side::Left)))
    }

    /// Re-initializes on the steady gait for the commanded motion, with a
    /// small random perturbation, and re-centers the reference.
    pub fn reset(&mut self) -> &ApexState {
        let dt = self.params.timing.step_period();
        let step = Vector2::new(self.params.desired.vx * dt, self.params.desired.vy * dt);
        let (state, stance) = Self::steady_gait(&self.params.lipm, &self.params.timing, step)
            .expect("validated params always admit a steady gait");
        let n = self.params.reset_noise;
        self.apex = ApexState {
            state: LipmState::new(
                state.x + n * normal(&mut self.rng),
                state.y + n * normal(&mut self.rng),
                state.xd + n * normal(&mut self.rng),
                state.yd + n * normal(&mut self.rng),
            ),
            stance,
            torso: TorsoState::level(),
        };
        self.reference = ReferenceState { pos: Vector2::new(self.apex.state.x, self.apex.state.y), yaw: 0.0 };
        self.steps = 0;
        self.terminated = false;
        self.pending_impulse = None;
        &self.apex
    }

    /// Queues a deterministic velocity jump for the next `step` call,
    /// overriding the configured random disturbance for that one step.
    pub fn schedule_impulse(&mut self, delta_v: Vector2<f64>, timing: DisturbanceTiming) {
        self.pending_impulse = Some((delta_v, timing));
    }

    pub fn state(&self) -> &ApexState {
        &self.apex
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn reference(&self) -> &ReferenceState {
        &self.reference
    }

    /// Reference pose one step ahead: the target for the upcoming footstep.
    pub fn next_reference(&self) -> ReferenceState {
        self.reference.advanced(&self.params.desired, self.params.timing.step_period())
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    pub fn horizon_reached(&self) -> bool {
        self.steps >= self.params.horizon
    }

    pub fn observation(&self) -> SVector<f64, OBS_DIM> {
        featurize(
            &self.params.lipm,
            &self.apex.state,
            &self.apex.stance,
            &self.apex.torso.as_array(),
            self.apex.torso.pivot_yaw,
        )
    }

    /// Fall test on an arbitrary state: 2-step barrier below the margin or
    /// torso attitude beyond the hard limit.
    pub fn fall_test(&self, apex: &ApexState) -> bool {
        let h_min = self.fall_poly.barrier(&apex.state, &apex.stance).min();
        h_min < -self.params.fall_margin
            || apex.torso.rpy.x.abs() > TORSO_FALL_LIMIT
            || apex.torso.rpy.y.abs() > TORSO_FALL_LIMIT
    }

    /// Executes one footstep to `action` (an absolute target).
    pub fn step(&mut self, action: &Vector2<f64>) -> Result<StepOutcome> {
        if !action.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalFault(format!("non-finite action {action:?}")));
        }
        if self.terminated {
            return Err(Error::InvalidParameter("step on terminated episode; reset first".into()));
        }
        let params = self.params.clone();
        let dt = params.timing.step_period();

        // Closed-form step plus residual; the impulse response rides the
        // homogeneous transition of whatever time remains after the push.
        let drift = step_affine(&params.lipm, &params.timing, &self.apex.state, &self.apex.stance)?;
        let mut upper: Vector6<f64> = drift + self.gain * action;
        let d = params.residual.evaluate(&params.lipm, &params.timing, &self.apex.state, &self.apex.stance);
        for i in 0..4 {
            upper[i] += d[i];
        }
        let push = if let Some((impulse, timing)) = self.pending_impulse.take() {
            Some((impulse, timing))
        } else if let Some(spec) = &params.disturbance {
            let magnitude = self.rng.gen_range(-spec.force..=spec.force);
            let angle = self.rng.gen_range(0.0..2.0 * PI);
            let dv = magnitude * spec.duration / spec.mass;
            Some((Vector2::new(dv * angle.cos(), dv * angle.sin()), spec.timing))
        } else {
            None
        };
        if let Some((impulse, timing)) = push {
            let t_pre = params.timing.t_land + 0.5 * params.timing.t_ds;
            let t_post = params.timing.t_lift + 0.5 * params.timing.t_ds;
            let remaining = match timing {
                DisturbanceTiming::PostApex => 0.5 * t_pre + t_post,
                DisturbanceTiming::PreApex => 0.5 * t_post,
                DisturbanceTiming::Random => self.rng.gen_range(0.0..dt),
            };
            let (m, _) = transition_matrices(&params.lipm, remaining)?;
            // Velocity jump evolves through [[C1, C2], [C3, C1]] per axis.
            upper[0] += m[(0, 2)] * impulse.x;
            upper[1] += m[(1, 3)] * impulse.y;
            upper[2] += m[(2, 2)] * impulse.x;
            upper[3] += m[(3, 3)] * impulse.y;
        }

        let next_state = LipmState::new(upper[0], upper[1], upper[2], upper[3]);
        let next_stance = Stance::new(upper[4], upper[5], self.apex.stance.side.other());
        let next_torso = self.step_torso();
        let next = ApexState { state: next_state, stance: next_stance, torso: next_torso };

        self.reference = self.reference.advanced(&params.desired, dt);
        let reward = self.reward(&next, action);
        let h_min = self.fall_poly.barrier(&next.state, &next.stance).min();
        let terminated = self.fall_test(&next);

        self.apex = next;
        self.steps += 1;
        self.terminated = terminated;
        Ok(StepOutcome { observed_upper: upper, reward, terminated, h_min })
    }

    /// Damped second-order roll/pitch excited by noise scaled with the
    /// capture-point error; yaw and pivot integrate the commanded turn rate.
    fn step_torso(&mut self) -> TorsoState {
        let dt = self.params.timing.step_period();
        let cp = capture_offset(&self.params.lipm, &self.apex.state, &self.apex.stance);
        let noise = TORSO_NOISE_FLOOR + TORSO_NOISE_GAIN * cp.norm();
        let t = &self.apex.torso;
        let mut rpy = Vector3::zeros();
        let mut angvel = Vector3::zeros();
        for axis in 0..2 {
            let v = self.torso_step * Vector2::new(t.rpy[axis], t.angvel[axis]);
            rpy[axis] = v.x + noise * normal(&mut self.rng);
            angvel[axis] = v.y + noise * TORSO_OMEGA * normal(&mut self.rng);
        }
        let turn = self.params.desired.turn_rate;
        rpy.z = wrap_angle(t.rpy.z + turn * dt + YAW_NOISE * normal(&mut self.rng));
        angvel.z = turn + YAW_NOISE * normal(&mut self.rng);
        let pivot_yaw = wrap_angle(t.pivot_yaw + turn * dt + YAW_NOISE * normal(&mut self.rng));
        TorsoState { rpy, angvel, pivot_yaw }
    }

    /// Five-term reward on the post-step state; the reference has already
    /// advanced to the same instant.
    fn reward(&self, next: &ApexState, action: &Vector2<f64>) -> f64 {
        let w = &self.params.reward;
        let body = next.torso.rpy.x * next.torso.rpy.x + next.torso.rpy.y * next.torso.rpy.y;
        let pos_err = Vector2::new(next.state.x, next.state.y) - self.reference.pos;
        let yaw_err = wrap_angle(next.torso.rpy.z - self.reference.yaw);
        let pose = pos_err.norm_squared() + yaw_err * yaw_err;
        let v_des = self.reference.desired_velocity(&self.params.desired);
        let vel = (Vector2::new(next.state.xd, next.state.yd) - v_des).norm_squared();
        let effort = (action - self.apex.stance.position()).norm_squared();
        w.r_a - w.w_b * body - w.w_t * pose - w.w_s * vel - w.w_c * effort
    }
}
