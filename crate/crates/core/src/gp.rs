//! Gaussian-process model of the residual step dynamics.
//!
//! One independent squared-exponential GP per output dimension, all sharing
//! the same ARD hyperparameters, so a single Cholesky factorization serves
//! every output. Hyperparameters are fixed rather than optimized: the filter
//! needs honest, stable uncertainty more than it needs a tight fit.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Residual model input: the upper state [x, y, xd, yd, px, py] at an apex.
pub type GpInput = [f64; 6];
/// Residual observation for all six upper-state rows.
pub type GpTarget = [f64; 6];

/// Squared-exponential ARD hyperparameters plus the confidence multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub lengthscales: [f64; 6],
    pub signal_var: f64,
    pub noise_var: f64,
    /// Confidence-bound multiplier k_delta; bounds are mu +- k_delta sigma.
    pub k_delta: f64,
}

impl Default for GpHyper {
    fn default() -> Self {
        Self { lengthscales: [0.5; 6], signal_var: 1e-3, noise_var: 1e-6, k_delta: 2.0 }
    }
}

impl GpHyper {
    pub fn validate(&self) -> Result<()> {
        let finite = self.lengthscales.iter().all(|l| l.is_finite())
            && self.signal_var.is_finite()
            && self.noise_var.is_finite()
            && self.k_delta.is_finite();
        if !finite {
            return Err(Error::NonFinite("gp hyperparameters"));
        }
        if self.lengthscales.iter().any(|l| *l <= 0.0) || self.signal_var <= 0.0 || self.noise_var < 0.0 || self.k_delta < 0.0 {
            return Err(Error::InvalidParameter(format!("gp hyperparameters out of range: {self:?}")));
        }
        Ok(())
    }
}

/// k(a, b) = signal_var * exp(-1/2 sum_i ((a_i - b_i) / l_i)^2).
pub fn kernel(hyper: &GpHyper, a: &GpInput, b: &GpInput) -> f64 {
    let mut q = 0.0;
    for i in 0..6 {
        let d = (a[i] - b[i]) / hyper.lengthscales[i];
        q += d * d;
    }
    hyper.signal_var * (-0.5 * q).exp()
}

/// Jitter ladder tried when the noise term alone leaves the covariance
/// numerically indefinite.
const JITTERS: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Fitted posterior over the residual map.
#[derive(Debug, Clone)]
pub struct ResidualModel {
    hyper: GpHyper,
    inputs: Vec<GpInput>,
    targets: Vec<GpTarget>,
    chol: Option<Cholesky<f64, Dyn>>,
    /// (K + noise I)^-1 Y, one column per output dimension.
    alpha: DMatrix<f64>,
    jitter: f64,
}

impl ResidualModel {
    /// Model with no data: prior mean zero, prior std sqrt(signal_var).
    pub fn empty(hyper: GpHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(Self { hyper, inputs: Vec::new(), targets: Vec::new(), chol: None, alpha: DMatrix::zeros(0, 6), jitter: 0.0 })
    }

    /// Fits the model. Data is sorted canonically first, so any permutation of
    /// the same observations produces bit-identical posteriors.
    pub fn fit(hyper: GpHyper, data: &[(GpInput, GpTarget)]) -> Result<Self> {
        hyper.validate()?;
        if data.is_empty() {
            return Self::empty(hyper);
        }
        for (input, target) in data {
            if !(input.iter().all(|v| v.is_finite()) && target.iter().all(|v| v.is_finite())) {
                return Err(Error::NonFinite("gp training data"));
            }
        }
        let mut sorted: Vec<(GpInput, GpTarget)> = data.to_vec();
        sorted.sort_by(|(a, _), (b, _)| {
            a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        });
        let n = sorted.len();
        let inputs: Vec<GpInput> = sorted.iter().map(|(i, _)| *i).collect();
        let targets: Vec<GpTarget> = sorted.iter().map(|(_, t)| *t).collect();

        let mut base = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let k = kernel(&hyper, &inputs[i], &inputs[j]);
                base[(i, j)] = k;
                base[(j, i)] = k;
            }
        }
        let mut fitted = None;
        for &jitter in JITTERS.iter() {
            let mut k = base.clone();
            for i in 0..n {
                k[(i, i)] += hyper.noise_var + jitter;
            }
            if let Some(chol) = Cholesky::new(k) {
                fitted = Some((chol, jitter));
                break;
            }
        }
        let Some((chol, jitter)) = fitted else {
            return Err(Error::GpNotPositiveDefinite { max_jitter: *JITTERS.last().unwrap() });
        };

        let mut y = DMatrix::zeros(n, 6);
        for (i, t) in targets.iter().enumerate() {
            for d in 0..6 {
                y[(i, d)] = t[d];
            }
        }
        let alpha = chol.solve(&y);
        Ok(Self { hyper, inputs, targets, chol: Some(chol), alpha, jitter })
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Diagonal jitter the factorization ended up needing.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Posterior mean and standard deviation at `query`.
    ///
    /// The kernel is shared across outputs, so sigma is the same in every
    /// dimension; it is returned as a vector to match the mean's shape.
    pub fn predict(&self, query: &GpInput) -> (Vector6<f64>, Vector6<f64>) {
        let prior_var = self.hyper.signal_var;
        let Some(chol) = &self.chol else {
            return (Vector6::zeros(), Vector6::from_element(prior_var.sqrt()));
        };
        let n = self.inputs.len();
        let mut k_star = DVector::zeros(n);
        for i in 0..n {
            k_star[i] = kernel(&self.hyper, &self.inputs[i], query);
        }
        let mut mu = Vector6::zeros();
        for d in 0..6 {
            let mut acc = 0.0;
            for i in 0..n {
                acc += k_star[i] * self.alpha[(i, d)];
            }
            mu[d] = acc;
        }
        // var = k(q, q) - || L^-1 k_star ||^2, floored at zero.
        let l = chol.l_dirty();
        let mut w = k_star;
        let _ = l.solve_lower_triangular_mut(&mut w);
        let var = (prior_var - w.norm_squared()).max(0.0);
        (mu, Vector6::from_element(var.sqrt()))
    }

    /// (mu - k_delta sigma, mu + k_delta sigma) at `query`.
    pub fn confidence_bound(&self, query: &GpInput) -> (Vector6<f64>, Vector6<f64>) {
        let (mu, sigma) = self.predict(query);
        (mu - sigma * self.hyper.k_delta, mu + sigma * self.hyper.k_delta)
    }

    pub fn snapshot(&self) -> GpSnapshot {
        GpSnapshot { hyper: self.hyper, inputs: self.inputs.clone(), targets: self.targets.clone() }
    }
}

/// Serializable record of everything needed to rebuild a fitted model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpSnapshot {
    pub hyper: GpHyper,
    pub inputs: Vec<GpInput>,
    pub targets: Vec<GpTarget>,
}

impl GpSnapshot {
    pub fn restore(&self) -> Result<ResidualModel> {
        let data: Vec<(GpInput, GpTarget)> =
            self.inputs.iter().copied().zip(self.targets.iter().copied()).collect();
        ResidualModel::fit(self.hyper, &data)
    }
}

// ─── data budget ────────────────────────────────────────────────────────────

/// How the dataset stays within its capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsamplePolicy {
    /// Keep the newest `capacity` observations.
    Fifo,
    /// Keep a spread-out subset chosen by farthest-point selection in
    /// lengthscale-normalized input space (a cheap posterior-variance proxy).
    GreedyVariance,
}

/// Rolling residual dataset with a point budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualDataset {
    entries: VecDeque<(GpInput, GpTarget)>,
    capacity: usize,
    policy: SubsamplePolicy,
}

impl ResidualDataset {
    pub fn new(capacity: usize, policy: SubsamplePolicy) -> Self {
        Self { entries: VecDeque::new(), capacity: capacity.max(1), policy }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, input: GpInput, target: GpTarget) {
        self.entries.push_back((input, target));
        // Greedy selection happens at fit time; the raw buffer keeps twice the
        // budget so the selector has history to choose from.
        let buffer_cap = match self.policy {
            SubsamplePolicy::Fifo => self.capacity,
            SubsamplePolicy::GreedyVariance => 2 * self.capacity,
        };
        while self.entries.len() > buffer_cap {
            self.entries.pop_front();
        }
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = (GpInput, GpTarget)>) {
        for (input, target) in items {
            self.push(input, target);
        }
    }

    /// Fits a model on the budgeted subset.
    pub fn fit(&self, hyper: GpHyper) -> Result<ResidualModel> {
        let selected: Vec<(GpInput, GpTarget)> = match self.policy {
            SubsamplePolicy::Fifo => self.entries.iter().copied().collect(),
            SubsamplePolicy::GreedyVariance => self.greedy_subset(&hyper),
        };
        ResidualModel::fit(hyper, &selected)
    }

    fn greedy_subset(&self, hyper: &GpHyper) -> Vec<(GpInput, GpTarget)> {
        let all: Vec<(GpInput, GpTarget)> = self.entries.iter().copied().collect();
        if all.len() <= self.capacity {
            return all;
        }
        let dist = |a: &GpInput, b: &GpInput| -> f64 {
            let mut q = 0.0;
            for i in 0..6 {
                let d = (a[i] - b[i]) / hyper.lengthscales[i];
                q += d * d;
            }
            q
        };
        // Farthest-point selection seeded on the newest observation.
        let mut chosen = vec![all.len() - 1];
        let mut min_d: Vec<f64> = all.iter().map(|(x, _)| dist(x, &all[all.len() - 1].0)).collect();
        while chosen.len() < self.capacity {
            let (best, _) = min_d
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.total_cmp(b))
                .expect("nonempty");
            chosen.push(best);
            for (i, d) in min_d.iter_mut().enumerate() {
                *d = d.min(dist(&all[i].0, &all[best].0));
            }
        }
        chosen.sort_unstable();
        chosen.into_iter().map(|i| all[i]).collect()
    }
}
