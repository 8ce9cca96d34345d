//! Capture-region safe sets.
//!
//! A state is i-step capturable when at most i footsteps can bring the robot
//! to a stop. The analytic regions are disks in the capture-point offset
//! (u, v) = (x + xd/w - px, y + yd/w - py); the safe set handed to the safety
//! filter is the inscribed L1 ball written as four half-space constraints so
//! the barrier stays linear in state and stance.
//!
//! A brute-force oracle (grid search over footstep sequences, nothing shared
//! with the analytic formulas) backs the radii empirically.

use nalgebra::{Matrix4x6, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lipm::{propagate, LipmParams, LipmState, Stance, StepTiming};

/// Which decay the capture radius uses per landing window.
///
/// `OmegaScaled` uses e^(-w T_LN), consistent with the pendulum time constant
/// and the oracle; `Literal` drops the w factor and is kept for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusConvention {
    OmegaScaled,
    Literal,
}

/// Analytic i-step capture radius (i = 1 or 2).
pub fn capture_radius(
    params: &LipmParams,
    timing: &StepTiming,
    steps: usize,
    convention: RadiusConvention,
) -> Result<f64> {
    timing.validate()?;
    let decay = match convention {
        RadiusConvention::OmegaScaled => (-params.omega() * timing.t_land).exp(),
        RadiusConvention::Literal => (-timing.t_land).exp(),
    };
    let one_step = params.l_max() * decay;
    match steps {
        1 => Ok(one_step),
        2 => Ok(one_step * (1.0 + decay)),
        _ => Err(Error::InvalidParameter(format!(
            "capture radius defined for 1 or 2 steps, got {steps}"
        ))),
    }
}

/// Capture-point offset of a state from a stance.
pub fn capture_offset(params: &LipmParams, state: &LipmState, stance: &Stance) -> Vector2<f64> {
    let w = params.omega();
    Vector2::new(state.x + state.xd / w - stance.px, state.y + state.yd / w - stance.py)
}

/// Builds a state whose capture-point offset from `stance` is exactly (u, v)
/// at the given velocity. Useful for sampling safe-set members directly.
pub fn state_with_offset(
    params: &LipmParams,
    stance: &Stance,
    u: f64,
    v: f64,
    xd: f64,
    yd: f64,
) -> LipmState {
    let w = params.omega();
    LipmState::new(stance.px + u - xd / w, stance.py + v - yd / w, xd, yd)
}

/// Inscribed polytope of a capture disk: |u| + |v| <= radius as h >= 0 with
/// h = A [x; p] + b, A scaled by 1/radius and b = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SafePolytope {
    a: Matrix4x6<f64>,
    b: Vector4<f64>,
    radius: f64,
}

impl SafePolytope {
    pub fn new(params: &LipmParams, radius: f64) -> Result<Self> {
        if !radius.is_finite() || radius <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "polytope radius must be positive and finite, got {radius}"
            )));
        }
        let iw = 1.0 / params.omega();
        let r = 1.0 / radius;
        #[rustfmt::skip]
        let a = Matrix4x6::from_row_slice(&[
            -r, -r, -r * iw, -r * iw,  r,  r,
            -r,  r, -r * iw,  r * iw,  r, -r,
             r, -r,  r * iw, -r * iw, -r,  r,
             r,  r,  r * iw,  r * iw, -r, -r,
        ]);
        Ok(Self { a, b: Vector4::from_element(1.0), radius })
    }

    /// Polytope for the analytic i-step region.
    pub fn from_steps(
        params: &LipmParams,
        timing: &StepTiming,
        steps: usize,
        convention: RadiusConvention,
    ) -> Result<Self> {
        let radius = capture_radius(params, timing, steps, convention)?;
        Self::new(params, radius)
    }

    pub fn matrix(&self) -> &Matrix4x6<f64> {
        &self.a
    }

    pub fn offset(&self) -> &Vector4<f64> {
        &self.b
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Barrier components h = A [x; p] + b; all >= 0 inside the safe set.
    pub fn barrier(&self, state: &LipmState, stance: &Stance) -> Vector4<f64> {
        self.a * crate::lipm::upper_vector(state, stance) + self.b
    }

    pub fn contains(&self, state: &LipmState, stance: &Stance) -> bool {
        self.barrier(state, stance).min() >= 0.0
    }
}

// ─── brute-force oracle ─────────────────────────────────────────────────────

/// Grid and tolerance settings for the brute-force capturability search.
#[derive(Debug, Clone, Copy)]
pub struct OracleSettings {
    /// Candidate footholds per axis at each refinement level (odd keeps the
    /// window center on the grid).
    pub grid_per_axis: usize,
    /// Local refinement passes around the best candidate.
    pub refine_levels: usize,
    /// Stopping tolerance on the capture-point error, as a fraction of l_max.
    pub tolerance_rel: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { grid_per_axis: 21, refine_levels: 3, tolerance_rel: 0.01 }
    }
}

/// Returns true when a sequence of at most `steps` footsteps, each within
/// l_max of the prior stance and separated by one landing window, drives the
/// capture-point error below tolerance on the discretized foothold grid.
///
/// The search knows only the propagation map and the capture-point
/// definition; the analytic radii never enter.
pub fn oracle_capturable(
    params: &LipmParams,
    timing: &StepTiming,
    state: &LipmState,
    stance: &Stance,
    steps: usize,
    settings: &OracleSettings,
) -> Result<bool> {
    if steps == 0 || steps > 4 {
        return Err(Error::InvalidParameter(format!("oracle supports 1..=4 steps, got {steps}")));
    }
    if settings.grid_per_axis < 3 || settings.tolerance_rel <= 0.0 {
        return Err(Error::InvalidParameter("oracle grid too coarse or tolerance nonpositive".into()));
    }
    let tol = settings.tolerance_rel * params.l_max();
    search(params, timing, state, stance, steps, settings, tol)
}

fn search(
    params: &LipmParams,
    timing: &StepTiming,
    state: &LipmState,
    stance: &Stance,
    steps_left: usize,
    settings: &OracleSettings,
    tol: f64,
) -> Result<bool> {
    let touchdown = propagate(params, state, stance, timing.t_land)?;
    let w = params.omega();
    let cp = Vector2::new(touchdown.x + touchdown.xd / w, touchdown.y + touchdown.yd / w);
    let center = stance.position();
    let l_max = params.l_max();

    // Placing the foot (nearly) on the capture point ends the search at this
    // depth; this also covers "capturable in fewer than steps_left".
    if refined_min_distance(&cp, &center, l_max, settings) < tol {
        return Ok(true);
    }
    if steps_left == 1 {
        return Ok(false);
    }

    // Candidates ordered by closeness to the capture point clamped into reach;
    // the greedy candidate almost always succeeds, the rest guarantee
    // exhaustiveness. The window shrinks around the best candidate so exact
    // boundary states survive discretization.
    let to_cp = cp - center;
    let reach = to_cp.norm();
    let target = if reach > l_max { center + to_cp * (l_max / reach) } else { cp };

    let n = settings.grid_per_axis;
    let mut window_center = center;
    let mut span = l_max;
    for _ in 0..=settings.refine_levels {
        let mut candidates: Vec<Vector2<f64>> = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let a = Vector2::new(
                    window_center[0] - span + 2.0 * span * i as f64 / (n - 1) as f64,
                    window_center[1] - span + 2.0 * span * j as f64 / (n - 1) as f64,
                );
                if (a - center).norm() <= l_max {
                    candidates.push(a);
                }
            }
        }
        candidates.sort_by(|p, q| (p - target).norm().total_cmp(&(q - target).norm()));

        let mut best: Option<(f64, Vector2<f64>)> = None;
        for a in candidates {
            let next_stance = Stance::new(a[0], a[1], stance.side.other());
            if search(params, timing, &touchdown, &next_stance, steps_left - 1, settings, tol)? {
                return Ok(true);
            }
            // Track how close this first placement came to the capture point;
            // the refinement window recenters on the most promising candidate.
            let gap = (a - target).norm();
            if best.map_or(true, |(g, _)| gap < g) {
                best = Some((gap, a));
            }
        }
        match best {
            Some((_, a)) => window_center = a,
            None => return Ok(false),
        }
        span *= 1.0 / (n - 1) as f64 * 2.0;
    }
    Ok(false)
}

/// Minimum distance from `point` to a refined grid over the reach disk.
fn refined_min_distance(
    point: &Vector2<f64>,
    center: &Vector2<f64>,
    l_max: f64,
    settings: &OracleSettings,
) -> f64 {
    let n = settings.grid_per_axis;
    let mut window_center = *center;
    let mut span = l_max;
    let mut best = f64::INFINITY;
    for _ in 0..=settings.refine_levels {
        let mut best_at = window_center;
        for i in 0..n {
            for j in 0..n {
                let a = Vector2::new(
                    window_center[0] - span + 2.0 * span * i as f64 / (n - 1) as f64,
                    window_center[1] - span + 2.0 * span * j as f64 / (n - 1) as f64,
                );
                if (a - *center).norm() > l_max {
                    continue;
                }
                let d = (a - *point).norm();
                if d < best {
                    best = d;
                    best_at = a;
                }
            }
        }
        window_center = best_at;
        span *= 1.0 / (n - 1) as f64 * 2.0;
    }
    best
}

/// Largest oracle-capturable capture-point offset along `direction`
/// (unit-normalized internally), found by bisection to `resolution`.
pub fn empirical_capture_radius(
    params: &LipmParams,
    timing: &StepTiming,
    steps: usize,
    direction: Vector2<f64>,
    settings: &OracleSettings,
    resolution: f64,
) -> Result<f64> {
    let dir = direction / direction.norm();
    let stance = Stance::new(0.0, 0.0, crate::lipm::Side::Left);
    let capturable = |radius: f64| -> Result<bool> {
        let state = state_with_offset(params, &stance, radius * dir[0], radius * dir[1], 0.0, 0.0);
        oracle_capturable(params, timing, &state, &stance, steps, settings)
    };
    let mut lo = 0.0;
    let mut hi = 2.0 * params.l_max();
    if !capturable(lo)? {
        return Ok(0.0);
    }
    while capturable(hi)? {
        hi *= 2.0;
        if hi > 100.0 * params.l_max() {
            return Err(Error::NumericalFault("empirical radius did not bracket".into()));
        }
    }
    while hi - lo > resolution {
        let mid = 0.5 * (lo + hi);
        if capturable(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Uniform sample of capture-point offsets inside the polytope (the L1 ball).
pub fn sample_offset_in_polytope<R: rand::Rng>(rng: &mut R, radius: f64) -> (f64, f64) {
    loop {
        let a: f64 = rng.gen_range(-1.0..1.0);
        let b: f64 = rng.gen_range(-1.0..1.0);
        if a.abs() + b.abs() <= 1.0 {
            return (radius * a, radius * b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::lipm::Side;
    use crate::rng::{stream, StreamLabel};

    fn draco() -> (LipmParams, StepTiming) {
        (LipmParams::new(9.81, 0.93, 0.7).unwrap(), StepTiming::new(0.16, 0.16, 0.0).unwrap())
    }

    #[test]
    fn test_radius_formulas() {
        let (params, timing) = draco();
        let w = params.omega();
        let r1 = capture_radius(&params, &timing, 1, RadiusConvention::OmegaScaled).unwrap();
        let r2 = capture_radius(&params, &timing, 2, RadiusConvention::OmegaScaled).unwrap();
        assert!((r1 - 0.7 * (-w * 0.16).exp()).abs() < 1e-15);
        assert!((r2 - r1 * (1.0 + (-w * 0.16).exp())).abs() < 1e-15);
        assert!(r2 > r1);

        let l1 = capture_radius(&params, &timing, 1, RadiusConvention::Literal).unwrap();
        assert!((l1 - 0.7 * (-0.16f64).exp()).abs() < 1e-15);
        assert!(l1 > r1, "dropping omega from the exponent weakens the decay");

        assert!(capture_radius(&params, &timing, 3, RadiusConvention::OmegaScaled).is_err());
        assert!(capture_radius(&params, &timing, 0, RadiusConvention::OmegaScaled).is_err());
    }

    #[test]
    fn test_vertex_touches_two_faces() {
        let (params, timing) = draco();
        let poly = SafePolytope::from_steps(&params, &timing, 1, RadiusConvention::OmegaScaled).unwrap();
        let stance = Stance::new(0.3, -0.2, Side::Left);
        let state = state_with_offset(&params, &stance, poly.radius(), 0.0, 0.4, -0.2);
        let h = poly.barrier(&state, &stance);
        let zeros = h.iter().filter(|c| c.abs() < 1e-12).count();
        let twos = h.iter().filter(|c| (**c - 2.0).abs() < 1e-12).count();
        assert_eq!(zeros, 2);
        assert_eq!(twos, 2);
    }

    #[test]
    fn test_polytope_inside_capture_disk() {
        let (params, timing) = draco();
        for steps in [1, 2] {
            let poly =
                SafePolytope::from_steps(&params, &timing, steps, RadiusConvention::OmegaScaled).unwrap();
            let mut rng = stream(17, StreamLabel::Verify, steps as u64, 0);
            for _ in 0..10_000 {
                let (u, v) = sample_offset_in_polytope(&mut rng, poly.radius());
                let stance = Stance::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), Side::Left);
                let state = state_with_offset(&params, &stance, u, v, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                assert!(poly.contains(&state, &stance));
                let offset = capture_offset(&params, &state, &stance);
                assert!(offset.norm() <= poly.radius() + 1e-12);
            }
        }
    }

    #[test]
    fn test_barrier_translation_invariant() {
        let (params, timing) = draco();
        let poly = SafePolytope::from_steps(&params, &timing, 2, RadiusConvention::OmegaScaled).unwrap();
        let stance = Stance::new(0.1, 0.2, Side::Right);
        let state = LipmState::new(0.15, 0.12, 0.5, -0.3);
        let h0 = poly.barrier(&state, &stance);
        let shifted_state = LipmState::new(state.x + 3.7, state.y - 1.1, state.xd, state.yd);
        let shifted_stance = Stance::new(stance.px + 3.7, stance.py - 1.1, Side::Right);
        let h1 = poly.barrier(&shifted_state, &shifted_stance);
        assert!((h0 - h1).amax() < 1e-12);
    }

    #[test]
    fn test_rest_state_capturable_for_all_steps() {
        let (params, timing) = draco();
        let stance = Stance::new(0.05, -0.03, Side::Left);
        let state = LipmState::new(0.05, -0.03, 0.0, 0.0);
        let settings = OracleSettings::default();
        for steps in [1, 2] {
            assert!(oracle_capturable(&params, &timing, &state, &stance, steps, &settings).unwrap());
        }
    }

    #[test]
    fn test_runaway_velocity_not_capturable() {
        let (params, timing) = draco();
        let stance = Stance::new(0.0, 0.0, Side::Left);
        let w = params.omega();
        // Capture point far beyond anything two max-length steps can chase.
        let xd = 3.0 * w * params.l_max() * (1.0 + (-w * timing.t_land).exp() + 1.0);
        let state = LipmState::new(0.0, 0.0, xd, 0.0);
        let settings = OracleSettings::default();
        for steps in [1, 2] {
            assert!(!oracle_capturable(&params, &timing, &state, &stance, steps, &settings).unwrap());
        }
    }

    #[test]
    fn test_empirical_radius_bounds_analytic() {
        let (params, timing) = draco();
        let settings = OracleSettings::default();
        for steps in [1, 2] {
            let analytic =
                capture_radius(&params, &timing, steps, RadiusConvention::OmegaScaled).unwrap();
            for dir in [Vector2::new(1.0, 0.0), Vector2::new(1.0, 1.0)] {
                let empirical =
                    empirical_capture_radius(&params, &timing, steps, dir, &settings, 2e-4).unwrap();
                assert!(
                    empirical >= analytic,
                    "steps={steps}: empirical {empirical:.4} < analytic {analytic:.4}"
                );
                assert!(
                    empirical <= analytic + 0.012,
                    "steps={steps}: empirical {empirical:.4} far above analytic {analytic:.4}"
                );
            }
        }
    }

    #[test]
    fn test_oracle_confirms_polytope_members() {
        let (params, timing) = draco();
        let settings = OracleSettings::default();
        for steps in [1, 2] {
            let poly =
                SafePolytope::from_steps(&params, &timing, steps, RadiusConvention::OmegaScaled).unwrap();
            let mut rng = stream(23, StreamLabel::Verify, steps as u64, 1);
            let mut confirmed = 0;
            let total = 500;
            for _ in 0..total {
                let (u, v) = sample_offset_in_polytope(&mut rng, poly.radius());
                let stance = Stance::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), Side::Left);
                let state =
                    state_with_offset(&params, &stance, u, v, rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8));
                if oracle_capturable(&params, &timing, &state, &stance, steps, &settings).unwrap() {
                    confirmed += 1;
                }
            }
            assert!(
                confirmed == total,
                "steps={steps}: only {confirmed}/{total} polytope members confirmed"
            );
        }
    }

    #[test]
    fn test_oracle_rejects_bad_settings() {
        let (params, timing) = draco();
        let state = LipmState::new(0.0, 0.0, 0.0, 0.0);
        let stance = Stance::new(0.0, 0.0, Side::Left);
        let coarse = OracleSettings { grid_per_axis: 2, ..OracleSettings::default() };
        assert!(oracle_capturable(&params, &timing, &state, &stance, 1, &coarse).is_err());
        let settings = OracleSettings::default();
        assert!(oracle_capturable(&params, &timing, &state, &stance, 0, &settings).is_err());
    }
}
