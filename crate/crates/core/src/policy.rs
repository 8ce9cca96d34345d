//! Gaussian footstep policy and value function.
//!
//! Small dense networks with hand-written backprop: parameter counts are in
//! the low thousands, gradients are needed inside a tight PPO loop, and exact
//! control over the arithmetic keeps training bit-reproducible.

use nalgebra::{DVector, SVector, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::capturability::capture_offset;
use crate::error::{Error, Result};
use crate::lipm::{LipmParams, LipmState, Stance};
use crate::rng::normal;

pub const OBS_DIM: usize = 13;
pub const ACTION_DIM: usize = 2;
/// Per-axis clamp on the learned footstep delta at execution time.
pub const DELTA_LIMIT: f64 = 0.25;
/// ln(0.1), the initial exploration scale.
pub const LOG_STD_INIT: f64 = -2.302585092994046;
const MIN_STD: f64 = 1e-4;
const MAX_STD: f64 = 1.0;
/// Output-layer weights start near zero so the policy initially defers to the
/// model-based planner.
const OUTPUT_INIT_SCALE: f64 = 0.01;

/// Observation: stance-relative CoM position and velocity, capture-point
/// offset, torso attitude and rate, and the stance yaw.
pub fn featurize(
    params: &LipmParams,
    state: &LipmState,
    stance: &Stance,
    torso: &[f64; 6],
    pivot_yaw: f64,
) -> SVector<f64, OBS_DIM> {
    let cp = capture_offset(params, state, stance);
    SVector::<f64, OBS_DIM>::from_column_slice(&[
        state.x - stance.px,
        state.y - stance.py,
        state.xd,
        state.yd,
        cp.x,
        cp.y,
        torso[0],
        torso[1],
        torso[2],
        torso[3],
        torso[4],
        torso[5],
        pivot_yaw,
    ])
}

// ─── multilayer perceptron ──────────────────────────────────────────────────

/// Fully connected net, tanh hidden activations, linear output. Parameters
/// live in one flat vector laid out layer by layer (weights row-major, then
/// biases) so optimizers can treat the whole net as a single vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: DVector<f64>,
}

/// Intermediate activations saved by the forward pass for backprop.
pub struct MlpCache {
    inputs: Vec<DVector<f64>>,
    outputs: Vec<DVector<f64>>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|s| *s == 0) {
            return Err(Error::InvalidParameter(format!("bad layer sizes {sizes:?}")));
        }
        Ok(Self { sizes: sizes.to_vec(), params: DVector::zeros(param_count(sizes)) })
    }

    /// Glorot-uniform init; the final layer is additionally scaled down so the
    /// net starts near the zero function.
    pub fn glorot<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let n_layers = sizes.len() - 1;
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let mut bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            if l == n_layers - 1 {
                bound *= OUTPUT_INIT_SCALE;
            }
            for i in 0..fan_in * fan_out {
                net.params[offset + i] = rng.gen_range(-bound..bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &DVector<f64> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut DVector<f64> {
        &mut self.params
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &DVector<f64>) -> (DVector<f64>, MlpCache) {
        assert_eq!(x.len(), self.sizes[0], "input size mismatch");
        let n_layers = self.sizes.len() - 1;
        let mut inputs = Vec::with_capacity(n_layers);
        let mut outputs = Vec::with_capacity(n_layers);
        let mut h = x.clone();
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let mut z = DVector::zeros(n_out);
            for i in 0..n_out {
                let mut acc = self.params[offset + n_in * n_out + i];
                let row = offset + i * n_in;
                for j in 0..n_in {
                    acc += self.params[row + j] * h[j];
                }
                z[i] = acc;
            }
            if l + 1 < n_layers {
                for v in z.iter_mut() {
                    *v = v.tanh();
                }
            }
            inputs.push(h);
            h = z.clone();
            outputs.push(z);
            offset += n_in * n_out + n_out;
        }
        (h, MlpCache { inputs, outputs })
    }

    /// Gradient of `grad_out . output` with respect to the flat parameters.
    pub fn backward(&self, cache: &MlpCache, grad_out: &DVector<f64>) -> DVector<f64> {
        let n_layers = self.sizes.len() - 1;
        let mut grad = DVector::zeros(self.params.len());
        let mut delta = grad_out.clone();
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for l in 0..n_layers {
            offsets.push(offset);
            offset += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let offset = offsets[l];
            // Hidden layers carry tanh; its derivative uses the stored output.
            if l + 1 < n_layers {
                for i in 0..n_out {
                    let y = cache.outputs[l][i];
                    delta[i] *= 1.0 - y * y;
                }
            }
            let input = &cache.inputs[l];
            for i in 0..n_out {
                let row = offset + i * n_in;
                for j in 0..n_in {
                    grad[row + j] = delta[i] * input[j];
                }
                grad[offset + n_in * n_out + i] = delta[i];
            }
            if l > 0 {
                let mut next = DVector::zeros(n_in);
                for i in 0..n_out {
                    let row = offset + i * n_in;
                    for j in 0..n_in {
                        next[j] += self.params[row + j] * delta[i];
                    }
                }
                delta = next;
            }
        }
        grad
    }

    pub fn snapshot(&self) -> MlpSnapshot {
        MlpSnapshot { sizes: self.sizes.clone(), params: self.params.iter().copied().collect() }
    }

    pub fn from_snapshot(snap: &MlpSnapshot) -> Result<Self> {
        let mut net = Self::zeros(&snap.sizes)?;
        if snap.params.len() != net.params.len() {
            return Err(Error::InvalidParameter(format!(
                "parameter count {} does not match sizes {:?}",
                snap.params.len(),
                snap.sizes
            )));
        }
        net.params = DVector::from_column_slice(&snap.params);
        Ok(net)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpSnapshot {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

// ─── gaussian policy ────────────────────────────────────────────────────────

/// Diagonal Gaussian over footstep deltas with a state-independent scale.
#[derive(Debug, Clone)]
pub struct GaussianPolicy {
    pub mean_net: Mlp,
    pub log_std: Vector2<f64>,
}

/// Per-parameter gradient of one log-probability.
pub struct PolicyGrad {
    pub mean_net: DVector<f64>,
    pub log_std: Vector2<f64>,
}

impl GaussianPolicy {
    pub fn new<R: Rng>(hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut sizes = vec![OBS_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(ACTION_DIM);
        Ok(Self { mean_net: Mlp::glorot(&sizes, rng)?, log_std: Vector2::from_element(LOG_STD_INIT) })
    }

    pub fn mean(&self, obs: &SVector<f64, OBS_DIM>) -> Vector2<f64> {
        let out = self.mean_net.forward(&DVector::from_column_slice(obs.as_slice()));
        Vector2::new(out[0], out[1])
    }

    pub fn std(&self) -> Vector2<f64> {
        Vector2::new(self.log_std.x.exp().clamp(MIN_STD, MAX_STD), self.log_std.y.exp().clamp(MIN_STD, MAX_STD))
    }

    /// Draws a raw (unclamped) delta and returns its log-probability.
    pub fn sample<R: Rng>(&self, obs: &SVector<f64, OBS_DIM>, rng: &mut R) -> (Vector2<f64>, f64) {
        let mu = self.mean(obs);
        let sd = self.std();
        let action = Vector2::new(mu.x + sd.x * normal(rng), mu.y + sd.y * normal(rng));
        let lp = self.log_prob(obs, &action);
        (action, lp)
    }

    pub fn log_prob(&self, obs: &SVector<f64, OBS_DIM>, action: &Vector2<f64>) -> f64 {
        let mu = self.mean(obs);
        let sd = self.std();
        let mut lp = 0.0;
        for i in 0..2 {
            let z = (action[i] - mu[i]) / sd[i];
            lp += -0.5 * z * z - sd[i].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        lp
    }

    /// Entropy of the clamped-scale Gaussian.
    pub fn entropy(&self) -> f64 {
        let sd = self.std();
        (0..2).map(|i| sd[i].ln() + 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln())).sum()
    }

    /// Log-probability together with its gradient in all parameters.
    ///
    /// Entropy depends only on log_std; its gradient is 1 per unclamped
    /// dimension, which callers fold into their own objective.
    pub fn log_prob_grad(&self, obs: &SVector<f64, OBS_DIM>, action: &Vector2<f64>) -> (f64, PolicyGrad) {
        let x = DVector::from_column_slice(obs.as_slice());
        let (out, cache) = self.mean_net.forward_cached(&x);
        let mu = Vector2::new(out[0], out[1]);
        let sd = self.std();
        let mut lp = 0.0;
        let mut dmu = DVector::zeros(2);
        let mut dls = Vector2::zeros();
        for i in 0..2 {
            let z = (action[i] - mu[i]) / sd[i];
            lp += -0.5 * z * z - sd[i].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            dmu[i] = z / sd[i];
            let raw = self.log_std[i].exp();
            // Clamped scale: the parameter has no local effect there.
            dls[i] = if (MIN_STD..=MAX_STD).contains(&raw) { z * z - 1.0 } else { 0.0 };
        }
        let grad = self.mean_net.backward(&cache, &dmu);
        (lp, PolicyGrad { mean_net: grad, log_std: dls })
    }

    /// Gradient of the entropy in log_std (zero on clamped dimensions).
    pub fn entropy_grad(&self) -> Vector2<f64> {
        Vector2::from_fn(|i, _| {
            let raw = self.log_std[i].exp();
            if (MIN_STD..=MAX_STD).contains(&raw) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot { mean: self.mean_net.snapshot(), log_std: [self.log_std.x, self.log_std.y] }
    }

    pub fn from_snapshot(snap: &PolicySnapshot) -> Result<Self> {
        Ok(Self {
            mean_net: Mlp::from_snapshot(&snap.mean)?,
            log_std: Vector2::new(snap.log_std[0], snap.log_std[1]),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub mean: MlpSnapshot,
    pub log_std: [f64; 2],
}

// ─── value function ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ValueNet {
    pub net: Mlp,
}

impl ValueNet {
    pub fn new<R: Rng>(hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut sizes = vec![OBS_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self { net: Mlp::glorot(&sizes, rng)? })
    }

    pub fn value(&self, obs: &SVector<f64, OBS_DIM>) -> f64 {
        self.net.forward(&DVector::from_column_slice(obs.as_slice()))[0]
    }

    /// Value and the gradient of the value in the net parameters.
    pub fn value_grad(&self, obs: &SVector<f64, OBS_DIM>) -> (f64, DVector<f64>) {
        let x = DVector::from_column_slice(obs.as_slice());
        let (out, cache) = self.net.forward_cached(&x);
        let grad = self.net.backward(&cache, &DVector::from_element(1, 1.0));
        (out[0], grad)
    }

    pub fn snapshot(&self) -> MlpSnapshot {
        self.net.snapshot()
    }

    pub fn from_snapshot(snap: &MlpSnapshot) -> Result<Self> {
        Ok(Self { net: Mlp::from_snapshot(snap)? })
    }
}
