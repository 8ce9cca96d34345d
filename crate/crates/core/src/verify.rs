//! Oracle-backed verification of the safe set, the filter program, and
//! barrier forward invariance. The same checks back the command-line
//! verify subcommand and the acceptance suite; each returns a serializable
//! report rather than asserting, so callers decide the thresholds.

use nalgebra::Vector2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capturability::{
    capture_offset, capture_radius, oracle_capturable, sample_offset_in_polytope,
    state_with_offset, OracleSettings, RadiusConvention, SafePolytope,
};
use crate::config::ScenarioConfig;
use crate::env::{EnvParams, ResidualSpec, SurrogateEnv};
use crate::error::Result;
use crate::gp::{GpHyper, ResidualModel};
use crate::lipm::{LipmParams, Side, Stance, StepTiming};
use crate::qp;
use crate::rng::{stream, StreamLabel};
use crate::safety::{SafetyFilter, SafetyFilterParams};

/// Capture radii under both exponent conventions, for 1 and 2 steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadiiReport {
    pub omega_scaled: [f64; 2],
    pub literal: [f64; 2],
}

pub fn radii_report(lipm: &LipmParams, timing: &StepTiming) -> Result<RadiiReport> {
    let r = |c, s| capture_radius(lipm, timing, s, c);
    Ok(RadiiReport {
        omega_scaled: [
            r(RadiusConvention::OmegaScaled, 1)?,
            r(RadiusConvention::OmegaScaled, 2)?,
        ],
        literal: [r(RadiusConvention::Literal, 1)?, r(RadiusConvention::Literal, 2)?],
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InclusionReport {
    pub samples: usize,
    pub violations: usize,
}

/// Samples states in the i-step polytope and checks each lies inside the
/// capture disk of the same radius (the polytope is the disk's inscribed
/// diamond in capture-point coordinates).
pub fn check_polytope_inclusion(
    lipm: &LipmParams,
    timing: &StepTiming,
    steps: usize,
    convention: RadiusConvention,
    samples: usize,
    seed: u64,
) -> Result<InclusionReport> {
    let poly = SafePolytope::from_steps(lipm, timing, steps, convention)?;
    let radius = poly.radius();
    let mut rng = stream(seed, StreamLabel::Verify, 10, steps as u64);
    let mut violations = 0;
    for _ in 0..samples {
        let stance = Stance::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            if rng.gen::<bool>() { Side::Left } else { Side::Right },
        );
        let (u, v) = sample_offset_in_polytope(&mut rng, radius);
        let state = state_with_offset(
            lipm,
            &stance,
            u,
            v,
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let inside_polytope = poly.contains(&state, &stance);
        let inside_disk = u * u + v * v <= radius * radius * (1.0 + 1e-12);
        if !inside_polytope || !inside_disk {
            violations += 1;
        }
    }
    Ok(InclusionReport { samples, violations })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub samples: usize,
    pub confirmed: usize,
    pub rate: f64,
}

/// Fraction of polytope samples the brute-force capturability search
/// confirms. Parallel over samples; each index owns a derived stream.
pub fn check_oracle_agreement(
    lipm: &LipmParams,
    timing: &StepTiming,
    steps: usize,
    convention: RadiusConvention,
    samples: usize,
    seed: u64,
) -> Result<OracleReport> {
    let poly = SafePolytope::from_steps(lipm, timing, steps, convention)?;
    let radius = poly.radius();
    let settings = OracleSettings::default();
    let confirmed = (0..samples)
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let mut rng = stream(seed, StreamLabel::Verify, 11, i as u64);
            let stance = Stance::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                if rng.gen::<bool>() { Side::Left } else { Side::Right },
            );
            let (u, v) = sample_offset_in_polytope(&mut rng, radius);
            let state = state_with_offset(
                lipm,
                &stance,
                u,
                v,
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            Ok(oracle_capturable(lipm, timing, &state, &stance, steps, &settings)? as usize)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(OracleReport { samples, confirmed, rate: confirmed as f64 / samples.max(1) as f64 })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpReport {
    pub instances: usize,
    /// Largest |solver objective - grid oracle objective|.
    pub max_objective_gap: f64,
    /// Instances where the unmodified nominal already satisfied every row.
    pub passthrough_instances: usize,
    /// Of those, how many returned an exactly zero correction.
    pub passthrough_exact: usize,
}

/// Compares the filter QP solver against an adaptive grid search over the
/// correction box, with the slack eliminated in closed form.
pub fn check_qp_against_grid(
    lipm: &LipmParams,
    timing: &StepTiming,
    params: &SafetyFilterParams,
    gp_hyper: &GpHyper,
    instances: usize,
    seed: u64,
) -> Result<QpReport> {
    let filter = SafetyFilter::new(*lipm, *timing, *params)?;
    let model = ResidualModel::empty(*gp_hyper)?;
    let radius = filter.polytope().radius();
    let gaps = (0..instances)
        .into_par_iter()
        .map(|i| -> Result<(f64, bool, bool)> {
            let mut rng = stream(seed, StreamLabel::Verify, 12, i as u64);
            let stance = Stance::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                if rng.gen::<bool>() { Side::Left } else { Side::Right },
            );
            // Scale beyond 1 exercises states slightly outside the safe set.
            let scale = rng.gen_range(0.2..1.1);
            let (u, v) = sample_offset_in_polytope(&mut rng, radius * scale);
            let state = state_with_offset(
                lipm,
                &stance,
                u,
                v,
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            );
            let (lo, hi) = filter.reach_box(&stance);
            // Alternate arbitrary targets with the classic capture step
            // (foot to the touchdown capture point), which satisfies the
            // untightened decay rows and exercises the pass-through path.
            let nominal = if i % 2 == 0 {
                Vector2::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y))
            } else {
                let growth = (lipm.omega() * (timing.t_land + 0.5 * timing.t_ds)).exp();
                stance.position() + capture_offset(lipm, &state, &stance) * growth
            };
            let (qp, _) = filter.assemble(&state, &stance, &model, &nominal)?;
            let solution = qp::solve(&qp)?;
            let oracle = grid_objective(&qp);
            let gap = (solution.objective - oracle).abs();
            let passthrough = (0..9).all(|r| qp.b_ineq[r] >= 0.0);
            let exact_zero = solution.z[0] == 0.0 && solution.z[1] == 0.0;
            Ok((gap, passthrough, passthrough && exact_zero))
        })
        .collect::<Result<Vec<_>>>()?;
    let max_objective_gap = gaps.iter().map(|g| g.0).fold(0.0, f64::max);
    let passthrough_instances = gaps.iter().filter(|g| g.1).count();
    let passthrough_exact = gaps.iter().filter(|g| g.2).count();
    Ok(QpReport { instances, max_objective_gap, passthrough_instances, passthrough_exact })
}

/// Brute-force objective over the correction box with the slack eliminated
/// in closed form. The reduced objective is strictly convex in the
/// correction (quadratic plus a max of affine pieces), so nested ternary
/// search converges to the global optimum regardless of how steep the
/// penalty valley is.
fn grid_objective(qp: &qp::Qp) -> f64 {
    // Box bounds sit in rows 4..8 as +-c <= b relative to the nominal.
    let (lo_x, hi_x) = (-qp.b_ineq[5], qp.b_ineq[4]);
    let (lo_y, hi_y) = (-qp.b_ineq[7], qp.b_ineq[6]);
    let objective = |cx: f64, cy: f64| -> f64 {
        let mut eps = 0.0f64;
        for r in 0..4 {
            let need = qp.a_ineq[(r, 0)] * cx + qp.a_ineq[(r, 1)] * cy - qp.b_ineq[r];
            eps = eps.max(need);
        }
        0.5 * (cx * cx + cy * cy) + qp.linear[2] * eps
    };
    let ternary = |mut lo: f64, mut hi: f64, f: &dyn Fn(f64) -> f64| -> f64 {
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if f(m1) <= f(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        f(0.5 * (lo + hi))
    };
    let min_over_y = |cx: f64| ternary(lo_y, hi_y, &|cy| objective(cx, cy));
    ternary(lo_x, hi_x, &min_over_y)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Worst componentwise violation of h_next >= (1 - eta) h across all
    /// filtered steps; negative means the decay held with margin.
    pub max_decay_violation: f64,
    pub terminations_filtered: usize,
    pub terminations_unfiltered: usize,
}

/// Rolls adversarial random footstep targets through residual-free
/// dynamics, once through the filter and once raw, and records barrier
/// decay and falls. The residual model is the flat prior with k_delta = 0,
/// which makes the decay constraint feasible without slack.
pub fn check_cbf_invariance(
    env_params: &EnvParams,
    filter_params: &SafetyFilterParams,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<InvarianceReport> {
    let mut clean = env_params.clone();
    clean.residual = ResidualSpec::zero();
    clean.disturbance = None;
    let filter = SafetyFilter::new(clean.lipm, clean.timing, *filter_params)?;
    let hyper = GpHyper { k_delta: 0.0, ..GpHyper::default() };
    let model = ResidualModel::empty(hyper)?;
    let eta = filter_params.eta;

    let per_episode = (0..episodes)
        .into_par_iter()
        .map(|e| -> Result<(f64, bool, bool)> {
            let mut worst = f64::NEG_INFINITY;
            let mut fell_filtered = false;
            let mut fell_raw = false;
            for filtered in [true, false] {
                let mut env =
                    SurrogateEnv::new(clean.clone(), stream(seed, StreamLabel::Verify, 13, e as u64))?;
                let mut adversary = stream(seed, StreamLabel::Verify, 14, e as u64);
                for _ in 0..steps {
                    let apex = *env.state();
                    let (lo, hi) = filter.reach_box(&apex.stance);
                    let nominal = Vector2::new(
                        adversary.gen_range(lo.x..hi.x),
                        adversary.gen_range(lo.y..hi.y),
                    );
                    let action = if filtered {
                        let h_now = filter.polytope().barrier(&apex.state, &apex.stance);
                        let outcome = filter.filter(&apex.state, &apex.stance, &model, &nominal)?;
                        let out = env.step(&outcome.action)?;
                        let next = env.state();
                        let h_next = filter.polytope().barrier(&next.state, &next.stance);
                        for r in 0..4 {
                            worst = worst.max((1.0 - eta) * h_now[r] - h_next[r]);
                        }
                        if out.terminated {
                            fell_filtered = true;
                            break;
                        }
                        continue;
                    } else {
                        nominal
                    };
                    let out = env.step(&action)?;
                    if out.terminated {
                        fell_raw = true;
                        break;
                    }
                }
            }
            Ok((worst, fell_filtered, fell_raw))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(InvarianceReport {
        episodes,
        steps_per_episode: steps,
        max_decay_violation: per_episode.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max),
        terminations_filtered: per_episode.iter().filter(|r| r.1).count(),
        terminations_unfiltered: per_episode.iter().filter(|r| r.2).count(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub radii: RadiiReport,
    pub inclusion: InclusionReport,
    pub oracle: OracleReport,
    pub qp: QpReport,
    pub invariance: InvarianceReport,
}

/// Full verification pass at a sample budget; the expensive checks scale
/// down from `samples` to keep the default run interactive.
pub fn run_verification(config: &ScenarioConfig, samples: usize) -> Result<VerifyReport> {
    let lipm = config.build_lipm()?;
    let timing = config.build_timing()?;
    let filter_params = config.build_filter_params()?;
    let gp_hyper = config.build_gp_hyper()?;
    let env_params = config.build_env()?;
    let steps = filter_params.capture_steps;
    let convention = filter_params.convention;
    let seed = config.seed;

    Ok(VerifyReport {
        radii: radii_report(&lipm, &timing)?,
        inclusion: check_polytope_inclusion(&lipm, &timing, steps, convention, samples, seed)?,
        oracle: check_oracle_agreement(
            &lipm,
            &timing,
            steps,
            convention,
            (samples / 10).max(1),
            seed,
        )?,
        qp: check_qp_against_grid(
            &lipm,
            &timing,
            &filter_params,
            &gp_hyper,
            samples.clamp(1, 1000),
            seed,
        )?,
        invariance: check_cbf_invariance(
            &env_params,
            &filter_params,
            (samples / 20).clamp(1, 500),
            50,
            seed,
        )?,
    })
}
