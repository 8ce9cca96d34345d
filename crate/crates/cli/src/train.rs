use std::fs;
use std::io::Write;

use caplearn::error::Error;
use caplearn::ppo::{self, Checkpoint, TrainProgress};

use crate::common;
use crate::TrainArgs;

pub fn run(args: &TrainArgs) -> Result<(), Error> {
    let mut cfg = common::resolve_config(&args.source)?;
    if let Some(episodes) = args.episodes {
        cfg.train.episodes = episodes;
    }
    let setup = cfg.build_setup()?;
    common::write_run_preamble(&args.out, "train", &cfg)?;

    let resume: Option<Checkpoint> = match &args.resume {
        Some(path) => {
            let raw = fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read checkpoint {}: {e}", path.display()))
            })?;
            Some(serde_json::from_str(&raw)?)
        }
        None => None,
    };

    let mut metrics_file = fs::File::create(args.out.join("metrics.jsonl"))?;
    let mut trajectories = csv::Writer::from_path(args.out.join("trajectories.csv"))
        .map_err(|e| Error::Config(format!("trajectories.csv: {e}")))?;
    trajectories
        .write_record([
            "episode", "step", "x", "y", "xd", "yd", "px", "py", "ax", "ay", "a_tvr_x",
            "a_tvr_y", "a_nn_x", "a_nn_y", "a_sf_x", "a_sf_y", "reward", "h_min", "terminated",
        ])
        .map_err(csv_err)?;

    let every = setup.train.checkpoint_every;
    let total = setup.train.episodes;
    let artifacts = ppo::train_with(&setup, resume, |progress: &TrainProgress| {
        let m = progress.metrics;
        serde_json::to_writer(&mut metrics_file, m)?;
        metrics_file.write_all(b"\n")?;
        for t in progress.batch {
            trajectories
                .write_record([
                    t.episode.to_string(),
                    t.step.to_string(),
                    t.upper_before[0].to_string(),
                    t.upper_before[1].to_string(),
                    t.upper_before[2].to_string(),
                    t.upper_before[3].to_string(),
                    t.upper_before[4].to_string(),
                    t.upper_before[5].to_string(),
                    t.action.x.to_string(),
                    t.action.y.to_string(),
                    t.a_tvr.x.to_string(),
                    t.a_tvr.y.to_string(),
                    t.a_nn.x.to_string(),
                    t.a_nn.y.to_string(),
                    t.a_sf.x.to_string(),
                    t.a_sf.y.to_string(),
                    t.reward.to_string(),
                    t.h_min.to_string(),
                    u8::from(t.terminated).to_string(),
                ])
                .map_err(csv_err)?;
        }
        let done = m.episode + 1;
        if done % every == 0 || done == total || progress.fault.is_some() {
            let snapshot = serde_json::to_string(progress.checkpoint)?;
            fs::write(args.out.join("checkpoint.json"), &snapshot)?;
            if progress.fault.is_some() {
                fs::write(args.out.join("checkpoint_fault.json"), &snapshot)?;
            } else {
                fs::write(args.out.join(format!("checkpoint_ep{done:04}.json")), &snapshot)?;
            }
        }
        println!(
            "episode {done}/{total}  return {:+.3}  terminations {}  slack {:.2e}  gp {}",
            m.mean_return, m.terminations, m.mean_slack, m.gp_points
        );
        if let Some(fault) = progress.fault {
            eprintln!("numerical fault: {fault}; checkpoint_fault.json written");
        }
        Ok(())
    })?;

    trajectories.flush()?;
    metrics_file.flush()?;
    let last = artifacts.metrics.last();
    println!(
        "done: {} episodes, {} transitions, final return {}",
        artifacts.metrics.len(),
        artifacts.transitions_seen,
        last.map_or("n/a".to_string(), |m| format!("{:+.3}", m.mean_return)),
    );
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv write: {e}"))
}
