use std::fs;

use nalgebra::Vector2;
use serde_json::json;

use caplearn::config::ScenarioConfig;
use caplearn::env::{DisturbanceTiming, EnvParams, SurrogateEnv};
use caplearn::error::Error;
use caplearn::gp::ResidualModel;
use caplearn::policy::{GaussianPolicy, ACTION_DIM, DELTA_LIMIT, OBS_DIM};
use caplearn::ppo::{planner_target, Checkpoint, TrainSetup};
use caplearn::rng::{stream, StreamLabel};
use caplearn::safety::SafetyFilter;

use crate::common;
use crate::EvalArgs;

/// Episode indices for evaluation live far above any training episode so
/// the derived streams never collide.
const EVAL_STREAM_BASE: u64 = 1 << 32;

/// Push applied in the middle of an episode, after the gait has settled.
const IMPULSE_STEP: usize = 8;

struct EpisodeOutcome {
    steps: usize,
    travel: f64,
    mean_speed: f64,
    mean_stride: f64,
    episode_return: f64,
    terminated: bool,
}

pub fn run(args: &EvalArgs) -> Result<(), Error> {
    let cfg = common::resolve_config(&args.source)?;
    let setup = cfg.build_setup()?;
    let filter = SafetyFilter::new(setup.env.lipm, setup.env.timing, setup.filter)?;

    let (policy, model, checkpoint_episode) = load_checkpoint(args, &cfg, &setup)?;
    let policy = if setup.train.use_policy { policy } else { None };

    let base: Vec<EpisodeOutcome> = (0..args.episodes)
        .map(|e| {
            run_episode(&setup, &filter, policy.as_ref(), &model, setup.env.clone(), e as u64, None)
        })
        .collect::<Result<_, _>>()?;

    // The three push scenarios run on the otherwise undisturbed
    // environment so the scheduled impulse is the only perturbation.
    let mut calm = setup.env.clone();
    calm.disturbance = None;
    let (duration, mass) = cfg
        .disturbance
        .as_ref()
        .map(|d| (d.duration, d.mass))
        .unwrap_or((0.05, 50.0));
    let cases = [
        ("pre_apex_600n", 600.0, DisturbanceTiming::PreApex),
        ("post_apex_300n", 300.0, DisturbanceTiming::PostApex),
        ("post_apex_600n", 600.0, DisturbanceTiming::PostApex),
    ];
    let mut case_reports = Vec::new();
    for (label, force, timing) in cases {
        let dv = force * duration / mass;
        let impulse = Some((Vector2::new(dv, dv), timing, IMPULSE_STEP));
        let outcomes: Vec<EpisodeOutcome> = (0..args.episodes)
            .map(|e| {
                run_episode(
                    &setup,
                    &filter,
                    policy.as_ref(),
                    &model,
                    calm.clone(),
                    (args.episodes + e) as u64,
                    impulse,
                )
            })
            .collect::<Result<_, _>>()?;
        let recovered = outcomes.iter().filter(|o| !o.terminated).count();
        case_reports.push(json!({
            "case": label,
            "force_n": force,
            "delta_v": dv,
            "episodes": outcomes.len(),
            "recovered": recovered,
            "recovery_rate": rate(recovered, outcomes.len()),
        }));
    }

    let terminated = base.iter().filter(|o| o.terminated).count();
    let summary = json!({
        "episodes": base.len(),
        "checkpoint_episode": checkpoint_episode,
        "policy_active": policy.is_some(),
        "mean_return": mean(&base, |o| o.episode_return),
        "travel_distance_m": mean(&base, |o| o.travel),
        "mean_speed_mps": mean(&base, |o| o.mean_speed),
        "mean_stride_m": mean(&base, |o| o.mean_stride),
        "mean_steps": mean(&base, |o| o.steps as f64),
        "termination_rate": rate(terminated, base.len()),
        "disturbance_cases": case_reports,
    });
    let rendered = serde_json::to_string_pretty(&summary)?;
    println!("{rendered}");
    if let Some(out) = &args.out {
        common::write_run_preamble(out, "eval", &cfg)?;
        fs::write(out.join("eval_summary.json"), &rendered)?;
    }
    Ok(())
}

type Loaded = (Option<GaussianPolicy>, ResidualModel, Option<usize>);

fn load_checkpoint(args: &EvalArgs, cfg: &ScenarioConfig, setup: &TrainSetup) -> Result<Loaded, Error> {
    match &args.checkpoint {
        Some(path) => {
            let raw = fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read checkpoint {}: {e}", path.display()))
            })?;
            let cp: Checkpoint = serde_json::from_str(&raw)?;
            let expect: Vec<usize> = std::iter::once(OBS_DIM)
                .chain(cfg.train.hidden.iter().copied())
                .chain(std::iter::once(ACTION_DIM))
                .collect();
            if cp.policy.mean.sizes != expect {
                return Err(Error::Config(format!(
                    "checkpoint/config mismatch: checkpoint layers {:?}, config expects {:?}",
                    cp.policy.mean.sizes, expect
                )));
            }
            let model = cp.gp_data.fit(setup.gp_hyper)?;
            Ok((Some(GaussianPolicy::from_snapshot(&cp.policy)?), model, Some(cp.episode)))
        }
        None => Ok((None, ResidualModel::empty(setup.gp_hyper)?, None)),
    }
}

fn run_episode(
    setup: &TrainSetup,
    filter: &SafetyFilter,
    policy: Option<&GaussianPolicy>,
    model: &ResidualModel,
    params: EnvParams,
    episode: u64,
    impulse: Option<(Vector2<f64>, DisturbanceTiming, usize)>,
) -> Result<EpisodeOutcome, Error> {
    let mut env =
        SurrogateEnv::new(params, stream(setup.seed, StreamLabel::Env, EVAL_STREAM_BASE + episode, 0))?;
    let start = Vector2::new(env.state().state.x, env.state().state.y);
    let mut episode_return = 0.0;
    let mut stride_sum = 0.0;
    let mut steps = 0usize;
    let mut terminated = false;
    while !env.terminated() && !env.horizon_reached() {
        if let Some((dv, timing, at)) = impulse {
            if steps == at {
                env.schedule_impulse(dv, timing);
            }
        }
        let a_tvr = planner_target(setup, &env)?;
        let delta = match policy {
            Some(p) => {
                let m = p.mean(&env.observation());
                Vector2::new(m.x.clamp(-DELTA_LIMIT, DELTA_LIMIT), m.y.clamp(-DELTA_LIMIT, DELTA_LIMIT))
            }
            None => Vector2::zeros(),
        };
        let nominal = a_tvr + delta;
        let apex = *env.state();
        let action = if setup.train.use_safety_filter {
            filter.filter(&apex.state, &apex.stance, model, &nominal)?.action
        } else {
            nominal
        };
        stride_sum += (action - apex.stance.position()).norm();
        let out = env.step(&action)?;
        episode_return += out.reward;
        steps += 1;
        terminated = out.terminated;
    }
    let end = Vector2::new(env.state().state.x, env.state().state.y);
    let travel = (end - start).norm();
    let duration = steps as f64 * setup.env.timing.step_period();
    Ok(EpisodeOutcome {
        steps,
        travel,
        mean_speed: if duration > 0.0 { travel / duration } else { 0.0 },
        mean_stride: stride_sum / steps.max(1) as f64,
        episode_return,
        terminated,
    })
}

fn mean(outcomes: &[EpisodeOutcome], f: impl Fn(&EpisodeOutcome) -> f64) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().map(f).sum::<f64>() / outcomes.len() as f64
}

fn rate(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}
