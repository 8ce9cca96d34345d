//! Velocity-reversal footstep planner.
//!
//! The planner reads the CoM state at the switching moment and places the next
//! footstep so that, a tuning time T' after the exchange, each velocity
//! component would cross zero. A proportional term kappa blends in a pull
//! toward a desired CoM position, which turns the stopping policy into a
//! steady gait when the desired position is advanced every step.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lipm::{propagate, LipmParams, LipmState, Stance, StepTiming};

/// Planned footstep location in world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FootTarget {
    pub x: f64,
    pub y: f64,
}

impl FootTarget {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Reversal times, position gains, and the desired CoM position.
///
/// `t_x` / `t_y` are the per-axis times after stance exchange at which the
/// velocity component should reverse; `kappa_x` / `kappa_y` blend the desired
/// position in; `com_desired` is the (moving) position reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvrGains {
    pub t_x: f64,
    pub t_y: f64,
    pub kappa_x: f64,
    pub kappa_y: f64,
    pub com_desired: [f64; 2],
}

/// Reversal times below this would put the plan near the coth pole.
const MIN_REVERSAL_TIME: f64 = 1e-3;

impl TvrGains {
    pub fn new(t_x: f64, t_y: f64, kappa_x: f64, kappa_y: f64, com_desired: [f64; 2]) -> Result<Self> {
        let gains = Self { t_x, t_y, kappa_x, kappa_y, com_desired };
        gains.validate()?;
        Ok(gains)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.t_x.is_finite()
            && self.t_y.is_finite()
            && self.kappa_x.is_finite()
            && self.kappa_y.is_finite()
            && self.com_desired.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("tvr gains"));
        }
        if self.t_x < MIN_REVERSAL_TIME || self.t_y < MIN_REVERSAL_TIME {
            return Err(Error::InvalidParameter(format!(
                "tvr reversal times must be >= {MIN_REVERSAL_TIME}; got t_x={}, t_y={}",
                self.t_x, self.t_y
            )));
        }
        Ok(())
    }

    /// Returns a copy with the desired CoM position replaced.
    pub fn with_com_desired(&self, com_desired: [f64; 2]) -> Self {
        Self { com_desired, ..*self }
    }
}

/// Velocity coefficient (e^(wT) + e^(-wT)) / (w (e^(wT) - e^(-wT))).
fn c4(omega: f64, t: f64) -> f64 {
    let e = (omega * t).exp();
    let ei = (-omega * t).exp();
    (e + ei) / (omega * (e - ei))
}

/// CoM state at the switching moment: the apex state propagated through the
/// landing window on the current stance.
pub fn switching_state(
    params: &LipmParams,
    apex: &LipmState,
    stance: &Stance,
    timing: &StepTiming,
) -> Result<LipmState> {
    propagate(params, apex, stance, timing.t_land)
}

/// Plans the footstep from the switching state:
/// a = (1 - kappa) s + C4(T') sd + kappa com_desired, per axis.
pub fn plan(params: &LipmParams, gains: &TvrGains, switching: &LipmState) -> Result<FootTarget> {
    gains.validate()?;
    if !switching.is_finite() {
        return Err(Error::NonFinite("switching state"));
    }
    let w = params.omega();
    let ax = (1.0 - gains.kappa_x) * switching.x
        + c4(w, gains.t_x) * switching.xd
        + gains.kappa_x * gains.com_desired[0];
    let ay = (1.0 - gains.kappa_y) * switching.y
        + c4(w, gains.t_y) * switching.yd
        + gains.kappa_y * gains.com_desired[1];
    Ok(FootTarget::new(ax, ay))
}
