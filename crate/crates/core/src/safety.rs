//! Footstep safety filter.
//!
//! Given a nominal footstep target, the filter finds the smallest correction
//! that keeps the next apex state inside the capture polytope, in the
//! discrete barrier sense: every barrier component may shrink by at most a
//! factor (1 - eta) per step. Residual-model uncertainty tightens the
//! constraint by k_delta standard deviations, weighted row-wise by the L1
//! norm of the polytope rows, so that the guarantee holds for any residual
//! within the confidence band.
//!
//! The program over [correction_x, correction_y, slack]:
//!
//!   minimize 1/2 ||correction||^2 + slack_penalty * slack
//!   s.t.     -(A g) correction - slack <= b_row    (4 decay rows)
//!            nominal + correction within the reach box (4 rows)
//!            slack >= 0
//!
//! The slack keeps the program feasible when no in-reach footstep can honor
//! the decay; the linear penalty makes it an exact penalty, so the slack is
//! zero whenever zero is feasible.

use nalgebra::{Matrix3, Matrix4x2, SMatrix, SVector, Vector2, Vector3, Vector4, Vector6};

use crate::capturability::{RadiusConvention, SafePolytope};
use crate::error::{Error, Result};
use crate::gp::{GpInput, ResidualModel};
use crate::lipm::{step_affine, step_gain, upper_vector, LipmParams, LipmState, Stance, StepTiming};
use crate::qp::{self, Qp, QP_ROWS, QP_VARS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyFilterParams {
    /// Maximum per-step barrier decay fraction; require h' >= (1 - eta) h.
    pub eta: f64,
    /// Linear cost on the feasibility slack.
    pub slack_penalty: f64,
    /// Which capture polytope the filter enforces (1 or 2 steps).
    pub capture_steps: usize,
    pub convention: RadiusConvention,
}

impl Default for SafetyFilterParams {
    fn default() -> Self {
        Self { eta: 0.8, slack_penalty: 1e5, capture_steps: 1, convention: RadiusConvention::OmegaScaled }
    }
}

impl SafetyFilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.slack_penalty.is_finite()) {
            return Err(Error::NonFinite("safety filter parameters"));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidParameter(format!("eta must be in (0, 1], got {}", self.eta)));
        }
        if self.slack_penalty <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "slack_penalty must be positive, got {}",
                self.slack_penalty
            )));
        }
        Ok(())
    }
}

/// Filter with its polytope and step-map pieces precomputed.
#[derive(Debug, Clone)]
pub struct SafetyFilter {
    lipm: LipmParams,
    timing: StepTiming,
    params: SafetyFilterParams,
    polytope: SafePolytope,
    gain: nalgebra::Matrix6x2<f64>,
    /// A g, the action sensitivity of each barrier row.
    decay_gain: Matrix4x2<f64>,
    /// Row-wise L1 norms of A, the uncertainty weights.
    row_l1: Vector4<f64>,
    /// Half-width of the reach box around the stance foot.
    reach: f64,
}

/// What the filter did to one action.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    /// Footstep target to execute.
    pub action: Vector2<f64>,
    /// action - clamped nominal.
    pub correction: Vector2<f64>,
    /// Feasibility slack; positive means the decay could not be fully honored.
    pub slack: f64,
    /// Whether the nominal had to be clamped into the reach box first.
    pub nominal_clamped: bool,
    pub active_rows: Vec<usize>,
    /// Barrier at the current apex.
    pub barrier_now: Vector4<f64>,
    /// Model-mean barrier prediction at the next apex under `action`.
    pub barrier_predicted: Vector4<f64>,
}

impl SafetyFilter {
    pub fn new(lipm: LipmParams, timing: StepTiming, params: SafetyFilterParams) -> Result<Self> {
        params.validate()?;
        timing.validate()?;
        let polytope = SafePolytope::from_steps(&lipm, &timing, params.capture_steps, params.convention)?;
        let gain = step_gain(&lipm, &timing)?;
        let decay_gain = polytope.matrix() * gain;
        let row_l1 = Vector4::from_fn(|r, _| polytope.matrix().row(r).iter().map(|v| v.abs()).sum());
        let reach = lipm.l_max() / 2.0_f64.sqrt();
        Ok(Self { lipm, timing, params, polytope, gain, decay_gain, row_l1, reach })
    }

    pub fn polytope(&self) -> &SafePolytope {
        &self.polytope
    }

    pub fn params(&self) -> &SafetyFilterParams {
        &self.params
    }

    /// Axis-aligned reach box, inscribed in the leg-length disk.
    pub fn reach_box(&self, stance: &Stance) -> (Vector2<f64>, Vector2<f64>) {
        let p = stance.position();
        (p - Vector2::from_element(self.reach), p + Vector2::from_element(self.reach))
    }

    fn clamp_to_reach(&self, stance: &Stance, nominal: &Vector2<f64>) -> Vector2<f64> {
        let (lo, hi) = self.reach_box(stance);
        Vector2::new(nominal.x.clamp(lo.x, hi.x), nominal.y.clamp(lo.y, hi.y))
    }

    /// Builds the correction program around the (clamped) nominal action.
    pub fn assemble(
        &self,
        state: &LipmState,
        stance: &Stance,
        model: &ResidualModel,
        nominal: &Vector2<f64>,
    ) -> Result<(Qp, Vector2<f64>)> {
        if !state.is_finite() || !stance.is_finite() || !nominal.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("safety filter inputs"));
        }
        let nominal = self.clamp_to_reach(stance, nominal);
        let psi = upper_vector(state, stance);
        let input: GpInput = [psi[0], psi[1], psi[2], psi[3], psi[4], psi[5]];
        let (mu, sigma) = model.predict(&input);
        let k_delta = model.hyper().k_delta;
        let drift = step_affine(&self.lipm, &self.timing, state, stance)?;
        let a = self.polytope.matrix();
        let b = self.polytope.offset();

        let predicted = a * (drift + mu + self.gain * nominal);
        let now = a * psi;
        let tighten = Vector4::from_fn(|r, _| k_delta * self.row_l1[r] * sigma[r.min(5)]);
        let decay_rhs = predicted - (1.0 - self.params.eta) * now - tighten + self.params.eta * b;

        let mut a_ineq = SMatrix::<f64, QP_ROWS, QP_VARS>::zeros();
        let mut b_ineq = SVector::<f64, QP_ROWS>::zeros();
        for r in 0..4 {
            a_ineq[(r, 0)] = -self.decay_gain[(r, 0)];
            a_ineq[(r, 1)] = -self.decay_gain[(r, 1)];
            a_ineq[(r, 2)] = -1.0;
            b_ineq[r] = decay_rhs[r];
        }
        let (lo, hi) = self.reach_box(stance);
        a_ineq[(4, 0)] = 1.0;
        b_ineq[4] = hi.x - nominal.x;
        a_ineq[(5, 0)] = -1.0;
        b_ineq[5] = nominal.x - lo.x;
        a_ineq[(6, 1)] = 1.0;
        b_ineq[6] = hi.y - nominal.y;
        a_ineq[(7, 1)] = -1.0;
        b_ineq[7] = nominal.y - lo.y;
        a_ineq[(8, 2)] = -1.0;
        b_ineq[8] = 0.0;

        let qp = Qp {
            hessian: Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)),
            linear: Vector3::new(0.0, 0.0, self.params.slack_penalty),
            a_ineq,
            b_ineq,
        };
        Ok((qp, nominal))
    }

    /// Filters one nominal action.
    pub fn filter(
        &self,
        state: &LipmState,
        stance: &Stance,
        model: &ResidualModel,
        nominal: &Vector2<f64>,
    ) -> Result<FilterOutcome> {
        let (qp, clamped) = self.assemble(state, stance, model, nominal)?;
        let solution = qp::solve(&qp)?;
        let correction = Vector2::new(solution.z[0], solution.z[1]);
        let action = clamped + correction;

        let psi = upper_vector(state, stance);
        let input: GpInput = [psi[0], psi[1], psi[2], psi[3], psi[4], psi[5]];
        let (mu, _) = model.predict(&input);
        let drift = step_affine(&self.lipm, &self.timing, state, stance)?;
        let predicted_next: Vector6<f64> = drift + mu + self.gain * action;
        let barrier_predicted = self.polytope.matrix() * predicted_next + self.polytope.offset();

        Ok(FilterOutcome {
            action,
            correction,
            slack: solution.z[2].max(0.0),
            nominal_clamped: clamped != *nominal,
            active_rows: solution.active,
            barrier_now: self.polytope.barrier(state, stance),
            barrier_predicted,
        })
    }
}
