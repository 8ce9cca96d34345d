use std::fs;
use std::path::Path;

use caplearn::error::Error;
use caplearn::ppo::EpisodeMetrics;

use crate::ExportArgs;

const WINDOW: usize = 20;

pub fn run(args: &ExportArgs) -> Result<(), Error> {
    let out = args.out.clone().unwrap_or_else(|| args.run.join("export"));
    fs::create_dir_all(&out)?;

    let metrics = read_metrics(&args.run.join("metrics.jsonl"))?;
    write_learning_curve(&out, &metrics)?;
    write_windows(&out, &metrics)?;
    write_filter_activity(&out, &metrics)?;
    let mut written = 3;

    let trajectories = args.run.join("trajectories.csv");
    if trajectories.exists() {
        write_footsteps(&out, &trajectories)?;
        written += 1;
    }
    println!("wrote {written} files to {}", out.display());
    Ok(())
}

fn read_metrics(path: &Path) -> Result<Vec<EpisodeMetrics>, Error> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn write_learning_curve(out: &Path, metrics: &[EpisodeMetrics]) -> Result<(), Error> {
    let mut rows = String::from("episode,mean_return,mean_reward,policy_loss,value_loss,entropy,gp_points\n");
    for m in metrics {
        rows.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.episode, m.mean_return, m.mean_reward, m.policy_loss, m.value_loss, m.entropy, m.gp_points
        ));
    }
    fs::write(out.join("learning_curve.csv"), rows)?;
    Ok(())
}

/// Window aggregates smooth the termination trend the same way the
/// acceptance checks do.
fn write_windows(out: &Path, metrics: &[EpisodeMetrics]) -> Result<(), Error> {
    let mut rows = String::from("window_start,window_end,terminations,mean_return\n");
    for chunk in metrics.chunks(WINDOW) {
        let terms: usize = chunk.iter().map(|m| m.terminations).sum();
        let ret: f64 = chunk.iter().map(|m| m.mean_return).sum::<f64>() / chunk.len() as f64;
        rows.push_str(&format!(
            "{},{},{},{}\n",
            chunk.first().unwrap().episode,
            chunk.last().unwrap().episode,
            terms,
            ret
        ));
    }
    fs::write(out.join("terminations.csv"), rows)?;
    Ok(())
}

fn write_filter_activity(out: &Path, metrics: &[EpisodeMetrics]) -> Result<(), Error> {
    let mut rows = String::from("episode,mean_slack,mean_correction\n");
    for m in metrics {
        rows.push_str(&format!("{},{},{}\n", m.episode, m.mean_slack, m.mean_correction));
    }
    fs::write(out.join("filter_activity.csv"), rows)?;
    Ok(())
}

/// Foot placement track of the final recorded episode, for gait plots.
fn write_footsteps(out: &Path, trajectories: &Path) -> Result<(), Error> {
    let mut reader = csv::Reader::from_path(trajectories)
        .map_err(|e| Error::Config(format!("{}: {e}", trajectories.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Config(format!("csv header: {e}")))?
        .clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("trajectories.csv lacks column {name}")))
    };
    let (c_ep, c_step) = (col("episode")?, col("step")?);
    let picks = [col("x")?, col("y")?, col("px")?, col("py")?, col("ax")?, col("ay")?, col("reward")?, col("h_min")?];

    let mut records = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Config(format!("csv row: {e}")))?;
        records.push(record);
    }
    let last_episode = records
        .iter()
        .filter_map(|r| r.get(c_ep).and_then(|v| v.parse::<usize>().ok()))
        .max()
        .unwrap_or(0);

    let mut rows = String::from("step,x,y,px,py,ax,ay,reward,h_min\n");
    for record in &records {
        let ep: usize = record.get(c_ep).and_then(|v| v.parse().ok()).unwrap_or(usize::MAX);
        if ep != last_episode {
            continue;
        }
        let step = record.get(c_step).unwrap_or("");
        let values: Vec<&str> = picks.iter().map(|&c| record.get(c).unwrap_or("")).collect();
        rows.push_str(&format!("{step},{}\n", values.join(",")));
    }
    fs::write(out.join("footsteps.csv"), rows)?;
    Ok(())
}
