//! Policy learning loop.
//!
//! Each training episode collects a fixed batch of footstep transitions from
//! parallel environment instances, runs clipped-surrogate policy and value
//! updates over the batch, then refits the residual model on the step-map
//! errors observed so far. The composed action per step is planner target
//! plus clamped policy delta, passed through the safety filter.
//!
//! Determinism: every random draw comes from a stream keyed by (seed,
//! purpose, episode, instance), so no state leaks across episodes other than
//! the learned parameters, the optimizer moments, and the residual dataset.
//! A checkpoint carries exactly those, which makes resume bit-exact.

use nalgebra::{DVector, SVector, Vector2, Vector6};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvParams, StepOutcome, SurrogateEnv};
use crate::error::{Error, Result};
use crate::gp::{GpHyper, GpInput, ResidualDataset, ResidualModel, SubsamplePolicy};
use crate::lipm::{step_affine, step_gain, upper_vector};
use crate::policy::{
    GaussianPolicy, MlpSnapshot, PolicySnapshot, ValueNet, DELTA_LIMIT, OBS_DIM,
};
use crate::rng::{stream, StreamLabel};
use crate::safety::{SafetyFilter, SafetyFilterParams};
use crate::tvr::{plan, switching_state, TvrGains};

/// One executed footstep with everything the update and the logs need.
#[derive(Debug, Clone)]
pub struct Transition {
    /// Training episode and position within the episode batch.
    pub episode: usize,
    pub step: usize,
    pub obs: SVector<f64, OBS_DIM>,
    /// Upper state [x, y, xd, yd, px, py] at the decision point.
    pub upper_before: Vector6<f64>,
    /// Planner footstep target (absolute).
    pub a_tvr: Vector2<f64>,
    /// Raw policy delta as sampled; the executed delta is clamped.
    pub a_nn: Vector2<f64>,
    /// Safety-filter correction.
    pub a_sf: Vector2<f64>,
    /// Executed footstep target.
    pub action: Vector2<f64>,
    pub reward: f64,
    pub terminated: bool,
    /// Batch or horizon boundary without a fall; bootstraps on value_next.
    pub truncated: bool,
    pub log_prob_old: f64,
    pub value_old: f64,
    /// V(s') at collection time, zero when terminated.
    pub value_next: f64,
    pub observed_upper: Vector6<f64>,
    /// f + g a, the residual-free prediction.
    pub analytic_upper: Vector6<f64>,
    pub slack: f64,
    pub h_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Training episodes (outer loop count).
    pub episodes: usize,
    /// Transitions collected per episode.
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    /// Parallel environment instances; must divide batch_size.
    pub instances: usize,
    pub use_tvr: bool,
    pub use_policy: bool,
    pub use_safety_filter: bool,
    pub gp_capacity: usize,
    pub gp_policy: SubsamplePolicy,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs: 10,
            minibatch: 64,
            lr_policy: 3e-4,
            lr_value: 1e-3,
            entropy_coef: 1e-3,
            value_coef: 0.5,
            episodes: 200,
            batch_size: 1024,
            hidden: vec![64, 64],
            instances: 8,
            use_tvr: true,
            use_policy: true,
            use_safety_filter: true,
            gp_capacity: 512,
            gp_policy: SubsamplePolicy::Fifo,
            checkpoint_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must be in (0,1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda must be in [0,1], got {}", self.gae_lambda));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps <= 0.5) {
            return bad(format!("clip_eps must be in (0,0.5], got {}", self.clip_eps));
        }
        if self.lr_policy <= 0.0 || self.lr_value <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return bad("loss coefficients must be nonnegative".into());
        }
        if self.epochs == 0 || self.minibatch == 0 || self.batch_size == 0 || self.instances == 0 {
            return bad("epochs, minibatch, batch_size, instances must be positive".into());
        }
        if self.batch_size % self.instances != 0 {
            return bad(format!(
                "instances ({}) must divide batch_size ({})",
                self.instances, self.batch_size
            ));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|h| *h == 0) {
            return bad(format!("bad hidden sizes {:?}", self.hidden));
        }
        if self.gp_capacity == 0 || self.checkpoint_every == 0 {
            return bad("gp_capacity and checkpoint_every must be positive".into());
        }
        Ok(())
    }
}

/// Everything a training run needs.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub env: EnvParams,
    pub tvr: TvrGains,
    pub filter: SafetyFilterParams,
    pub gp_hyper: GpHyper,
    pub train: TrainConfig,
    pub seed: u64,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.tvr.validate()?;
        self.filter.validate()?;
        self.gp_hyper.validate()?;
        self.train.validate()
    }
}

// ─── advantage estimation ───────────────────────────────────────────────────

/// GAE over a batch ordered by (instance, step). Returns per-transition
/// (advantage, return target); advantages are normalized afterwards by
/// `compute_advantages`.
fn gae_raw(batch: &[Transition], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = batch.len();
    let mut adv = vec![0.0; n];
    let mut ret = vec![0.0; n];
    let mut acc = 0.0;
    for k in (0..n).rev() {
        let t = &batch[k];
        let delta = t.reward + gamma * t.value_next - t.value_old;
        // Both fall terminations and truncations end the credit chain; the
        // difference is value_next, which is zero only for falls.
        acc = if t.terminated || t.truncated { delta } else { delta + gamma * lambda * acc };
        adv[k] = acc;
        ret[k] = acc + t.value_old;
    }
    (adv, ret)
}

/// Normalized advantages plus raw return targets.
pub fn compute_advantages(
    batch: &[Transition],
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let (mut adv, ret) = gae_raw(batch, cfg.gamma, cfg.gae_lambda);
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
    Ok((adv, ret))
}

// ─── ppo objective ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Default)]
pub struct PpoLossReport {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

pub struct PpoGrads {
    pub policy_mean: DVector<f64>,
    pub log_std: Vector2<f64>,
    pub value: DVector<f64>,
}

/// Guard against ratio overflow on far-off-policy samples; the clipped
/// objective is flat there anyway.
const MAX_LOG_RATIO: f64 = 20.0;

/// Clipped-surrogate loss with value and entropy terms over the indexed
/// subset, together with its exact gradient.
pub fn ppo_loss(
    batch: &[Transition],
    advantages: &[f64],
    returns: &[f64],
    idx: &[usize],
    policy: &GaussianPolicy,
    value: &ValueNet,
    cfg: &TrainConfig,
) -> (PpoLossReport, PpoGrads) {
    let n = idx.len().max(1) as f64;
    let mut policy_sum = 0.0;
    let mut value_sum = 0.0;
    let mut grad_mean = DVector::zeros(policy.mean_net.n_params());
    let mut grad_ls = Vector2::zeros();
    let mut grad_value = DVector::zeros(value.net.n_params());
    for &i in idx {
        let t = &batch[i];
        let a = advantages[i];
        let (lp, pg) = policy.log_prob_grad(&t.obs, &t.a_nn);
        let ratio = (lp - t.log_prob_old).clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * a;
        if unclipped <= clipped {
            policy_sum -= unclipped;
            let scale = -a * ratio / n;
            grad_mean.axpy(scale, &pg.mean_net, 1.0);
            grad_ls += pg.log_std * scale;
        } else {
            // Clipped branch is locally constant in the parameters.
            policy_sum -= clipped;
        }
        let (v, vg) = value.value_grad(&t.obs);
        let err = v - returns[i];
        value_sum += err * err;
        grad_value.axpy(cfg.value_coef * 2.0 * err / n, &vg, 1.0);
    }
    let entropy = policy.entropy();
    let report = PpoLossReport {
        policy: policy_sum / n,
        value: value_sum / n,
        entropy,
        total: policy_sum / n + cfg.value_coef * value_sum / n - cfg.entropy_coef * entropy,
    };
    grad_ls -= policy.entropy_grad() * cfg.entropy_coef;
    (report, PpoGrads { policy_mean: grad_mean, log_std: grad_ls, value: grad_value })
}

// ─── optimizer ──────────────────────────────────────────────────────────────

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: DVector<f64>,
    v: DVector<f64>,
    t: usize,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: DVector::zeros(n), v: DVector::zeros(n), t: 0 }
    }

    pub fn step(&mut self, params: &mut DVector<f64>, grad: &DVector<f64>) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }

    pub fn snapshot(&self) -> AdamSnapshot {
        AdamSnapshot {
            lr: self.lr,
            m: self.m.iter().copied().collect(),
            v: self.v.iter().copied().collect(),
            t: self.t,
        }
    }

    pub fn from_snapshot(s: &AdamSnapshot) -> Self {
        Self {
            lr: s.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: DVector::from_column_slice(&s.m),
            v: DVector::from_column_slice(&s.v),
            t: s.t,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamSnapshot {
    pub lr: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
}

// ─── training loop ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    /// Mean undiscounted return per rollout segment.
    pub mean_return: f64,
    pub mean_reward: f64,
    /// Fall count in this episode's batch.
    pub terminations: usize,
    /// Completed or truncated rollout segments in the batch.
    pub segments: usize,
    pub mean_slack: f64,
    pub mean_correction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub gp_points: usize,
}

/// Resumable training state: parameters, optimizer moments, residual data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Episodes completed; training resumes here.
    pub episode: usize,
    pub seed: u64,
    pub policy: PolicySnapshot,
    pub value: MlpSnapshot,
    pub policy_opt: AdamSnapshot,
    pub value_opt: AdamSnapshot,
    pub gp_data: ResidualDataset,
    pub transitions_seen: usize,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub struct TrainArtifacts {
    pub policy: GaussianPolicy,
    pub value: ValueNet,
    pub gp: ResidualModel,
    pub metrics: Vec<EpisodeMetrics>,
    pub transitions_seen: usize,
}

/// Progress handed to the caller after every episode. `fault` carries the
/// abort reason when training is about to stop on a numerical failure.
pub struct TrainProgress<'a> {
    pub metrics: &'a EpisodeMetrics,
    pub checkpoint: &'a Checkpoint,
    pub batch: &'a [Transition],
    pub fault: Option<&'a str>,
}

pub fn train(setup: &TrainSetup) -> Result<TrainArtifacts> {
    train_with(setup, None, |_| Ok(()))
}

pub fn train_from(setup: &TrainSetup, checkpoint: Checkpoint) -> Result<TrainArtifacts> {
    train_with(setup, Some(checkpoint), |_| Ok(()))
}

/// Runs the learning loop, invoking `on_episode` after every episode.
pub fn train_with<F>(
    setup: &TrainSetup,
    resume: Option<Checkpoint>,
    mut on_episode: F,
) -> Result<TrainArtifacts>
where
    F: FnMut(&TrainProgress) -> Result<()>,
{
    setup.validate()?;
    let cfg = &setup.train;
    let seed = setup.seed;

    let (mut policy, mut value, mut policy_opt, mut value_opt, mut dataset, start_episode, mut seen) =
        match resume {
            Some(cp) => {
                if cp.version != CHECKPOINT_VERSION {
                    return Err(Error::InvalidParameter(format!(
                        "checkpoint version {} unsupported",
                        cp.version
                    )));
                }
                if cp.seed != seed {
                    return Err(Error::InvalidParameter(format!(
                        "checkpoint seed {} does not match run seed {seed}",
                        cp.seed
                    )));
                }
                (
                    GaussianPolicy::from_snapshot(&cp.policy)?,
                    ValueNet::from_snapshot(&cp.value)?,
                    Adam::from_snapshot(&cp.policy_opt),
                    Adam::from_snapshot(&cp.value_opt),
                    cp.gp_data,
                    cp.episode,
                    cp.transitions_seen,
                )
            }
            None => {
                let mut init_rng = stream(seed, StreamLabel::Policy, u64::MAX, 0);
                let policy = GaussianPolicy::new(&cfg.hidden, &mut init_rng)?;
                let mut value_rng = stream(seed, StreamLabel::Policy, u64::MAX, 1);
                let value = ValueNet::new(&cfg.hidden, &mut value_rng)?;
                let policy_opt = Adam::new(policy.mean_net.n_params() + 2, cfg.lr_policy);
                let value_opt = Adam::new(value.net.n_params(), cfg.lr_value);
                let dataset = ResidualDataset::new(cfg.gp_capacity, cfg.gp_policy);
                (policy, value, policy_opt, value_opt, dataset, 0, 0)
            }
        };

    let mut gp = dataset.fit(setup.gp_hyper)?;
    let filter = SafetyFilter::new(setup.env.lipm, setup.env.timing, setup.filter)?;
    let mut metrics = Vec::new();

    for episode in start_episode..cfg.episodes {
        let batch = collect_batch(setup, &filter, &policy, &value, &gp, episode)?;
        seen += batch.len();

        let mut report_sum = PpoLossReport::default();
        let mut report_count = 0usize;
        if cfg.use_policy {
            let (advantages, returns) = compute_advantages(&batch, cfg)?;
            for epoch in 0..cfg.epochs {
                let mut order: Vec<usize> = (0..batch.len()).collect();
                let mut shuffle_rng = stream(seed, StreamLabel::Shuffle, episode as u64, epoch as u64);
                for i in (1..order.len()).rev() {
                    order.swap(i, shuffle_rng.gen_range(0..=i));
                }
                for chunk in order.chunks(cfg.minibatch) {
                    let (report, grads) =
                        ppo_loss(&batch, &advantages, &returns, chunk, &policy, &value, cfg);
                    report_sum.total += report.total;
                    report_sum.policy += report.policy;
                    report_sum.value += report.value;
                    report_sum.entropy += report.entropy;
                    report_count += 1;
                    // Policy parameters and log_std update as one vector.
                    let np = policy.mean_net.n_params();
                    let mut flat = DVector::zeros(np + 2);
                    flat.rows_mut(0, np).copy_from(policy.mean_net.params());
                    flat[np] = policy.log_std.x;
                    flat[np + 1] = policy.log_std.y;
                    let mut gflat = DVector::zeros(np + 2);
                    gflat.rows_mut(0, np).copy_from(&grads.policy_mean);
                    gflat[np] = grads.log_std.x;
                    gflat[np + 1] = grads.log_std.y;
                    policy_opt.step(&mut flat, &gflat);
                    policy.mean_net.params_mut().copy_from(&flat.rows(0, np));
                    policy.log_std.x = flat[np];
                    policy.log_std.y = flat[np + 1];
                    value_opt.step(value.net.params_mut(), &grads.value);
                }
            }
        }

        // Residual observations accumulate; the model refits on the
        // capacity-limited dataset once per episode.
        for t in &batch {
            let input: GpInput = [
                t.upper_before[0],
                t.upper_before[1],
                t.upper_before[2],
                t.upper_before[3],
                t.upper_before[4],
                t.upper_before[5],
            ];
            let residual = t.observed_upper - t.analytic_upper;
            let target = [residual[0], residual[1], residual[2], residual[3], residual[4], residual[5]];
            dataset.push(input, target);
        }
        gp = dataset.fit(setup.gp_hyper)?;

        let m = summarize(episode, &batch, &report_sum, report_count, gp.len());
        let finite = policy.mean_net.params().iter().all(|v| v.is_finite())
            && policy.log_std.iter().all(|v| v.is_finite())
            && value.net.params().iter().all(|v| v.is_finite())
            && m.policy_loss.is_finite()
            && m.value_loss.is_finite();
        let checkpoint = Checkpoint {
            version: CHECKPOINT_VERSION,
            episode: episode + 1,
            seed,
            policy: policy.snapshot(),
            value: value.snapshot(),
            policy_opt: policy_opt.snapshot(),
            value_opt: value_opt.snapshot(),
            gp_data: dataset.clone(),
            transitions_seen: seen,
        };
        if !finite {
            let msg = format!("non-finite parameters or losses at episode {episode}");
            on_episode(&TrainProgress {
                metrics: &m,
                checkpoint: &checkpoint,
                batch: &batch,
                fault: Some(&msg),
            })?;
            return Err(Error::NumericalFault(msg));
        }
        metrics.push(m);
        on_episode(&TrainProgress {
            metrics: metrics.last().unwrap(),
            checkpoint: &checkpoint,
            batch: &batch,
            fault: None,
        })?;
    }

    Ok(TrainArtifacts { policy, value, gp, metrics, transitions_seen: seen })
}

fn summarize(
    episode: usize,
    batch: &[Transition],
    report_sum: &PpoLossReport,
    report_count: usize,
    gp_points: usize,
) -> EpisodeMetrics {
    let mut segment_returns = Vec::new();
    let mut acc = 0.0;
    let mut terminations = 0;
    let mut slack = 0.0;
    let mut correction = 0.0;
    let mut reward_sum = 0.0;
    for t in batch {
        acc += t.reward;
        reward_sum += t.reward;
        slack += t.slack;
        correction += t.a_sf.norm();
        if t.terminated || t.truncated {
            segment_returns.push(acc);
            acc = 0.0;
            if t.terminated {
                terminations += 1;
            }
        }
    }
    let n = batch.len().max(1) as f64;
    let segs = segment_returns.len().max(1) as f64;
    let rc = report_count.max(1) as f64;
    EpisodeMetrics {
        episode,
        mean_return: segment_returns.iter().sum::<f64>() / segs,
        mean_reward: reward_sum / n,
        terminations,
        segments: segment_returns.len(),
        mean_slack: slack / n,
        mean_correction: correction / n,
        policy_loss: report_sum.policy / rc,
        value_loss: report_sum.value / rc,
        entropy: report_sum.entropy / rc,
        gp_points,
    }
}

/// Collects one episode batch across parallel instances. Instance results are
/// concatenated in index order, so scheduling cannot affect the outcome.
fn collect_batch(
    setup: &TrainSetup,
    filter: &SafetyFilter,
    policy: &GaussianPolicy,
    value: &ValueNet,
    gp: &ResidualModel,
    episode: usize,
) -> Result<Vec<Transition>> {
    let cfg = &setup.train;
    let per_instance = cfg.batch_size / cfg.instances;
    let rollouts: Result<Vec<Vec<Transition>>> = (0..cfg.instances)
        .into_par_iter()
        .map(|instance| {
            rollout_instance(setup, filter, policy, value, gp, episode, instance, per_instance)
        })
        .collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for (i, mut chunk) in rollouts?.into_iter().enumerate() {
        for (j, t) in chunk.iter_mut().enumerate() {
            t.episode = episode;
            t.step = i * per_instance + j;
        }
        batch.append(&mut chunk);
    }
    Ok(batch)
}

/// Planner footstep target for the current apex: the velocity-reversal plan
/// toward the advanced reference, or the current stance when the planner is
/// disabled.
pub fn planner_target(setup: &TrainSetup, env: &SurrogateEnv) -> Result<Vector2<f64>> {
    let apex = env.state();
    if !setup.train.use_tvr {
        return Ok(apex.stance.position());
    }
    let refs = env.next_reference();
    let gains = setup.tvr.with_com_desired([refs.pos.x, refs.pos.y]);
    let sw = switching_state(&setup.env.lipm, &apex.state, &apex.stance, &setup.env.timing)?;
    let target = plan(&setup.env.lipm, &gains, &sw)?;
    Ok(Vector2::new(target.x, target.y))
}

#[allow(clippy::too_many_arguments)]
fn rollout_instance(
    setup: &TrainSetup,
    filter: &SafetyFilter,
    policy: &GaussianPolicy,
    value: &ValueNet,
    gp: &ResidualModel,
    episode: usize,
    instance: usize,
    steps: usize,
) -> Result<Vec<Transition>> {
    let cfg = &setup.train;
    let mut env = SurrogateEnv::new(
        setup.env.clone(),
        stream(setup.seed, StreamLabel::Env, episode as u64, instance as u64),
    )?;
    let mut policy_rng = stream(setup.seed, StreamLabel::Policy, episode as u64, instance as u64);
    let gain = step_gain(&setup.env.lipm, &setup.env.timing)?;
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        if env.terminated() || env.horizon_reached() {
            env.reset();
        }
        let apex = *env.state();
        let obs = env.observation();
        let upper_before = upper_vector(&apex.state, &apex.stance);

        let a_tvr = planner_target(setup, &env)?;
        let (a_nn, log_prob_old) = if cfg.use_policy {
            policy.sample(&obs, &mut policy_rng)
        } else {
            (Vector2::zeros(), 0.0)
        };
        let delta = Vector2::new(
            a_nn.x.clamp(-DELTA_LIMIT, DELTA_LIMIT),
            a_nn.y.clamp(-DELTA_LIMIT, DELTA_LIMIT),
        );
        let nominal = a_tvr + delta;
        let (action, a_sf, slack) = if cfg.use_safety_filter {
            let outcome = filter.filter(&apex.state, &apex.stance, gp, &nominal)?;
            (outcome.action, outcome.correction, outcome.slack)
        } else {
            (nominal, Vector2::zeros(), 0.0)
        };

        let value_old = value.value(&obs);
        let StepOutcome { observed_upper, reward, terminated, h_min } = env.step(&action)?;
        let analytic_upper =
            step_affine(&setup.env.lipm, &setup.env.timing, &apex.state, &apex.stance)? + gain * action;
        let truncated = !terminated && (k + 1 == steps || env.horizon_reached());
        let value_next = if terminated { 0.0 } else { value.value(&env.observation()) };

        out.push(Transition {
            episode,
            step: k,
            obs,
            upper_before,
            a_tvr,
            a_nn,
            a_sf,
            action,
            reward,
            terminated,
            truncated,
            log_prob_old,
            value_old,
            value_next,
            observed_upper,
            analytic_upper,
            slack,
            h_min,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capturability::RadiusConvention;
    use crate::env::{DesiredMotion, ResidualKind, ResidualSpec, RewardWeights};
    use crate::lipm::{LipmParams, StepTiming};

    fn small_setup(seed: u64) -> TrainSetup {
        let lipm = LipmParams::new(9.81, 0.93, 0.7).unwrap();
        let timing = StepTiming::new(0.16, 0.16, 0.0).unwrap();
        TrainSetup {
            env: EnvParams {
                lipm,
                timing,
                reward: RewardWeights { r_a: 5.0, w_b: 3.0, w_t: 3.0, w_s: 1.0, w_c: 1.0 },
                desired: DesiredMotion { vx: 0.3, vy: 0.0, turn_rate: 0.0 },
                residual: ResidualSpec {
                    kind: ResidualKind::ConstantBias,
                    magnitude: [0.01, 0.0, 0.02, 0.0],
                    rng_seed: 0,
                },
                disturbance: None,
                horizon: 25,
                fall_margin: 0.1,
                convention: RadiusConvention::OmegaScaled,
                reset_noise: 0.01,
            },
            tvr: TvrGains { t_x: 0.22, t_y: 0.22, kappa_x: -0.18, kappa_y: -0.18, com_desired: [0.0, 0.0] },
            filter: SafetyFilterParams::default(),
            gp_hyper: GpHyper::default(),
            train: TrainConfig {
                episodes: 2,
                batch_size: 64,
                instances: 2,
                epochs: 2,
                minibatch: 16,
                hidden: vec![16],
                gp_capacity: 64,
                ..TrainConfig::default()
            },
            seed,
        }
    }

    fn synthetic_batch() -> Vec<Transition> {
        // Three-step single segment with hand-set rewards and values.
        let mk = |reward: f64, value_old: f64, value_next: f64, terminated, truncated| Transition {
            episode: 0,
            step: 0,
            obs: SVector::<f64, OBS_DIM>::zeros(),
            upper_before: Vector6::zeros(),
            a_tvr: Vector2::zeros(),
            a_nn: Vector2::zeros(),
            a_sf: Vector2::zeros(),
            action: Vector2::zeros(),
            reward,
            terminated,
            truncated,
            log_prob_old: 0.0,
            value_old,
            value_next,
            observed_upper: Vector6::zeros(),
            analytic_upper: Vector6::zeros(),
            slack: 0.0,
            h_min: 1.0,
        };
        vec![
            mk(1.0, 0.5, 1.0, false, false),
            mk(2.0, 1.0, 1.5, false, false),
            mk(3.0, 1.5, 2.0, false, true),
        ]
    }

    #[test]
    fn test_gae_three_step_hand_example() {
        let batch = synthetic_batch();
        let (adv, ret) = gae_raw(&batch, 0.9, 0.95);
        // Deltas: 1.4, 2.35, 3.3; accumulated with gamma*lambda = 0.855.
        let expected = [5.8216325, 5.1715, 3.3];
        for i in 0..3 {
            assert!((adv[i] - expected[i]).abs() < 1e-12, "adv[{i}] = {}", adv[i]);
            assert!((ret[i] - (expected[i] + batch[i].value_old)).abs() < 1e-12);
        }
        // Direct-sum cross-check of the recursion.
        let direct = 1.4 + 0.855 * 2.35 + 0.855 * 0.855 * 3.3;
        assert!((adv[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn test_gae_lambda_one_is_discounted_return_minus_value() {
        let batch = synthetic_batch();
        let (adv, _) = gae_raw(&batch, 0.9, 1.0);
        let g0 = 1.0 + 0.9 * 2.0 + 0.81 * 3.0 + 0.729 * 2.0;
        assert!((adv[0] - (g0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn test_gae_constant_reward_self_consistent_critic() {
        let gamma: f64 = 0.9;
        let r = 2.0;
        let v = r / (1.0 - gamma);
        let mut batch = synthetic_batch();
        for t in batch.iter_mut() {
            t.reward = r;
            t.value_old = v;
            t.value_next = v;
            t.terminated = false;
            t.truncated = false;
        }
        batch[2].truncated = true;
        let (adv, _) = gae_raw(&batch, gamma, 0.95);
        for a in adv {
            assert!(a.abs() < 1e-12);
        }
    }

    #[test]
    fn test_gae_resets_across_termination() {
        let mut batch = synthetic_batch();
        batch[0].terminated = true;
        batch[0].value_next = 0.0;
        let (adv, _) = gae_raw(&batch, 0.9, 0.95);
        // First transition's advantage is just its own delta.
        assert!((adv[0] - (1.0 + 0.0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn test_compute_advantages_normalizes() {
        let batch = synthetic_batch();
        let cfg = TrainConfig::default();
        let (adv, _) = compute_advantages(&batch, &cfg).unwrap();
        let mean: f64 = adv.iter().sum::<f64>() / adv.len() as f64;
        let var: f64 = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / adv.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
        assert!(compute_advantages(&[], &cfg).is_err());
    }

    #[test]
    fn test_ppo_loss_matches_naive_reimplementation() {
        let mut rng = stream(41, StreamLabel::Verify, 0, 0);
        let policy = GaussianPolicy::new(&[8], &mut rng).unwrap();
        let value = ValueNet::new(&[8], &mut rng).unwrap();
        let cfg = TrainConfig::default();
        let mut batch = synthetic_batch();
        for (i, t) in batch.iter_mut().enumerate() {
            t.obs = SVector::<f64, OBS_DIM>::from_fn(|j, _| ((i * 13 + j) as f64 * 0.17).sin() * 0.2);
            t.a_nn = Vector2::new(0.05 * (i as f64 + 1.0), -0.03);
            // Old log-probs differ from current so the ratios are nontrivial.
            t.log_prob_old = policy.log_prob(&t.obs, &t.a_nn) - 0.1 * (i as f64 - 1.0);
        }
        let adv = vec![0.7, -1.2, 0.5];
        let ret = vec![0.3, 0.1, -0.2];
        let idx = [0, 1, 2];
        let (report, _) = ppo_loss(&batch, &adv, &ret, &idx, &policy, &value, &cfg);

        let mut naive_policy = 0.0;
        let mut naive_value = 0.0;
        for (i, t) in batch.iter().enumerate() {
            let ratio = (policy.log_prob(&t.obs, &t.a_nn) - t.log_prob_old).exp();
            let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
            naive_policy -= (ratio * adv[i]).min(clipped * adv[i]);
            naive_value += (value.value(&t.obs) - ret[i]).powi(2);
        }
        naive_policy /= 3.0;
        naive_value /= 3.0;
        let naive_total =
            naive_policy + cfg.value_coef * naive_value - cfg.entropy_coef * policy.entropy();
        assert!((report.policy - naive_policy).abs() < 1e-10);
        assert!((report.value - naive_value).abs() < 1e-10);
        assert!((report.total - naive_total).abs() < 1e-10);
    }

    #[test]
    fn test_ppo_ratio_identity_at_old_params() {
        let mut rng = stream(42, StreamLabel::Verify, 0, 0);
        let policy = GaussianPolicy::new(&[8], &mut rng).unwrap();
        let value = ValueNet::new(&[8], &mut rng).unwrap();
        let cfg = TrainConfig::default();
        let mut batch = synthetic_batch();
        for t in batch.iter_mut() {
            t.a_nn = Vector2::new(0.02, 0.01);
            t.log_prob_old = policy.log_prob(&t.obs, &t.a_nn);
        }
        let adv = vec![0.5, -0.25, 1.0];
        let ret = vec![0.0; 3];
        let (report, _) = ppo_loss(&batch, &adv, &ret, &[0, 1, 2], &policy, &value, &cfg);
        let mean_adv: f64 = adv.iter().sum::<f64>() / 3.0;
        assert!((report.policy + mean_adv).abs() < 1e-12);
    }

    #[test]
    fn test_ppo_clip_saturation_kills_gradient() {
        let mut rng = stream(43, StreamLabel::Verify, 0, 0);
        let policy = GaussianPolicy::new(&[8], &mut rng).unwrap();
        let value = ValueNet::new(&[8], &mut rng).unwrap();
        let cfg = TrainConfig { entropy_coef: 0.0, ..TrainConfig::default() };
        let mut batch = synthetic_batch();
        batch.truncate(1);
        batch[0].a_nn = Vector2::new(0.01, 0.0);
        // Old log-prob far below current: ratio >> 1 + eps, advantage > 0.
        batch[0].log_prob_old = policy.log_prob(&batch[0].obs, &batch[0].a_nn) - 2.0;
        let adv = vec![1.5];
        let ret = vec![0.0];
        let (_, grads) = ppo_loss(&batch, &adv, &ret, &[0], &policy, &value, &cfg);
        assert_eq!(grads.policy_mean.norm(), 0.0);
        assert_eq!(grads.log_std.norm(), 0.0);
    }

    #[test]
    fn test_ppo_gradient_matches_finite_differences() {
        let mut rng = stream(44, StreamLabel::Verify, 0, 0);
        let mut policy = GaussianPolicy::new(&[8], &mut rng).unwrap();
        let mut value = ValueNet::new(&[8], &mut rng).unwrap();
        let cfg = TrainConfig::default();
        let mut batch = synthetic_batch();
        for (i, t) in batch.iter_mut().enumerate() {
            t.obs = SVector::<f64, OBS_DIM>::from_fn(|j, _| ((i + j) as f64 * 0.23).cos() * 0.3);
            t.a_nn = Vector2::new(-0.04 * (i as f64 + 1.0), 0.06);
            t.log_prob_old = policy.log_prob(&t.obs, &t.a_nn) + 0.05 * (i as f64 - 1.0);
        }
        let adv = vec![0.9, -0.6, 0.3];
        let ret = vec![0.2, -0.1, 0.4];
        let idx = [0, 1, 2];
        let (_, grads) = ppo_loss(&batch, &adv, &ret, &idx, &policy, &value, &cfg);
        let eps = 1e-6;
        let mut probe_rng = stream(45, StreamLabel::Verify, 0, 0);
        for _ in 0..30 {
            let k = probe_rng.gen_range(0..policy.mean_net.n_params());
            let orig = policy.mean_net.params()[k];
            policy.mean_net.params_mut()[k] = orig + eps;
            let (up, _) = ppo_loss(&batch, &adv, &ret, &idx, &policy, &value, &cfg);
            policy.mean_net.params_mut()[k] = orig - eps;
            let (down, _) = ppo_loss(&batch, &adv, &ret, &idx, &policy, &value, &cfg);
            policy.mean_net.params_mut()[k] = orig;
            let fd = (up.total - down.total) / (2.0 * eps);
            assert!(
                (grads.policy_mean[k] - fd).abs() < 1e-3 * (1.0 + fd.abs()),
                "policy param {k}: {} vs {fd}",
                grads.policy_mean[k]
            );
        }
        for i in 0..2 {
            let orig = policy.log_std[i];
            policy.log_std[i] = orig + eps;
            let (up, _) = ppo_loss(&batch, &adv, &ret, &idx, &policy, &value, &cfg);
            policy.log_std[i] = orig - eps;
            let (down, _) = ppo_loss(&batch, &adv, &ret, &idx, &policy, &value, &cfg);
            policy.log_std[i] = orig;
            let fd = (up.total - down.total) / (2.0 * eps);
            assert!((grads.log_std[i] - fd).abs() < 1e-4 * (1.0 + fd.abs()), "log_std {i}");
        }
        for _ in 0..30 {
            let k = probe_rng.gen_range(0..value.net.n_params());
            let orig = value.net.params()[k];
            value.net.params_mut()[k] = orig + eps;
            let (up, _) = ppo_loss(&batch, &adv, &ret, &idx, &policy, &value, &cfg);
            value.net.params_mut()[k] = orig - eps;
            let (down, _) = ppo_loss(&batch, &adv, &ret, &idx, &policy, &value, &cfg);
            value.net.params_mut()[k] = orig;
            let fd = (up.total - down.total) / (2.0 * eps);
            assert!((grads.value[k] - fd).abs() < 1e-4 * (1.0 + fd.abs()), "value param {k}");
        }
    }

    #[test]
    fn test_adam_converges_on_quadratic() {
        let mut adam = Adam::new(2, 0.1);
        let mut x = DVector::from_column_slice(&[3.0, -2.0]);
        for _ in 0..500 {
            let grad = 2.0 * &x;
            adam.step(&mut x, &grad);
        }
        assert!(x.norm() < 1e-3, "adam stalled at {x:?}");
    }

    #[test]
    fn test_zero_episodes_returns_initial_state() {
        let mut setup = small_setup(50);
        setup.train.episodes = 0;
        let art = train(&setup).unwrap();
        assert!(art.metrics.is_empty());
        assert_eq!(art.transitions_seen, 0);
        assert_eq!(art.gp.len(), 0);
    }

    #[test]
    fn test_training_is_reproducible() {
        let setup = small_setup(51);
        let a = train(&setup).unwrap();
        let b = train(&setup).unwrap();
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (x, y) in a.metrics.iter().zip(b.metrics.iter()) {
            assert_eq!(x.mean_return, y.mean_return);
            assert_eq!(x.policy_loss, y.policy_loss);
            assert_eq!(x.terminations, y.terminations);
        }
        assert_eq!(a.policy.mean_net.params(), b.policy.mean_net.params());
    }

    #[test]
    fn test_checkpoint_resume_is_bit_exact() {
        let mut setup = small_setup(52);
        setup.train.episodes = 4;
        let full = train(&setup).unwrap();

        let mut half = setup.clone();
        half.train.episodes = 2;
        let mut checkpoint = None;
        let _ = train_with(&half, None, |p| {
            checkpoint = Some(serde_json::to_string(p.checkpoint).unwrap());
            Ok(())
        })
        .unwrap();
        let cp: Checkpoint = serde_json::from_str(&checkpoint.unwrap()).unwrap();
        assert_eq!(cp.episode, 2);
        let resumed = train_from(&setup, cp).unwrap();

        assert_eq!(resumed.metrics.len(), 2);
        for (a, b) in full.metrics[2..].iter().zip(resumed.metrics.iter()) {
            assert_eq!(a.mean_return, b.mean_return);
            assert_eq!(a.policy_loss, b.policy_loss);
        }
        assert_eq!(full.policy.mean_net.params(), resumed.policy.mean_net.params());
        assert_eq!(full.value.net.params(), resumed.value.net.params());
    }

    #[test]
    fn test_residual_targets_vanish_without_residual() {
        let mut setup = small_setup(53);
        setup.env.residual = ResidualSpec::zero();
        setup.train.episodes = 1;
        let mut max_target: f64 = 0.0;
        let _ = train_with(&setup, None, |p| {
            for t in p.batch {
                max_target = max_target.max((t.observed_upper - t.analytic_upper).norm());
            }
            Ok(())
        })
        .unwrap();
        assert!(max_target <= 1e-9, "residual target {max_target}");
    }

    #[test]
    fn test_disabled_policy_matches_manual_tvr_rollout() {
        let mut setup = small_setup(54);
        setup.train.use_policy = false;
        setup.train.instances = 1;
        setup.train.batch_size = 32;
        setup.train.episodes = 1;
        let art = train(&setup).unwrap();

        // Manual rollout with the same streams must reproduce the rewards.
        let filter = SafetyFilter::new(setup.env.lipm, setup.env.timing, setup.filter).unwrap();
        let gp = ResidualModel::empty(setup.gp_hyper).unwrap();
        let mut env =
            SurrogateEnv::new(setup.env.clone(), stream(setup.seed, StreamLabel::Env, 0, 0)).unwrap();
        let mut rewards = Vec::new();
        for _ in 0..32 {
            if env.terminated() || env.horizon_reached() {
                env.reset();
            }
            let apex = *env.state();
            let refs = env.next_reference();
            let gains = setup.tvr.with_com_desired([refs.pos.x, refs.pos.y]);
            let sw =
                switching_state(&setup.env.lipm, &apex.state, &apex.stance, &setup.env.timing).unwrap();
            let target = plan(&setup.env.lipm, &gains, &sw).unwrap();
            let out = filter
                .filter(&apex.state, &apex.stance, &gp, &Vector2::new(target.x, target.y))
                .unwrap();
            rewards.push(env.step(&out.action).unwrap().reward);
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        assert!((art.metrics[0].mean_reward - mean).abs() < 1e-12);
    }

    #[test]
    fn test_config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.gamma = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.instances = 3;
        cfg.batch_size = 64;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.clip_eps = 0.6;
        assert!(cfg.validate().is_err());
    }
}
