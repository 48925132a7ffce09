//! Hamiltonian Monte Carlo over a flat coordinate vector and Adagrad ascent
//! for parameters. Both work against a closure returning a log density and
//! its gradient, so the same machinery runs on either network form. Any
//! numerical failure inside a trajectory (non-finite density, domain error
//! from a quantile) rejects the proposal instead of crashing the chain.

use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Leapfrog trajectory length and step size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HmcConfig {
    #[serde(default = "default_leapfrog_steps")]
    pub leapfrog_steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
}

fn default_leapfrog_steps() -> usize {
    5
}

fn default_step_size() -> f64 {
    0.01
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            leapfrog_steps: default_leapfrog_steps(),
            step_size: default_step_size(),
        }
    }
}

/// Current chain position with its cached log density and gradient, plus
/// lifetime acceptance counters.
#[derive(Debug, Clone)]
pub struct ChainState {
    position: Array1<f64>,
    logp: f64,
    grad: Array1<f64>,
    accepted: u64,
    proposed: u64,
}

impl ChainState {
    pub fn new<F>(position: Array1<f64>, objective: &mut F) -> Result<Self>
    where
        F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
    {
        let (logp, grad) = objective(&position)?;
        Ok(ChainState {
            position,
            logp,
            grad,
            accepted: 0,
            proposed: 0,
        })
    }

    pub fn position(&self) -> &Array1<f64> {
        &self.position
    }

    pub fn log_density(&self) -> f64 {
        self.logp
    }

    pub fn grad(&self) -> &Array1<f64> {
        &self.grad
    }

    /// Re-evaluate the cached density and gradient at the current position.
    /// Required after anything the objective closes over (the parameters,
    /// during learning) has changed.
    pub fn refresh<F>(&mut self, objective: &mut F) -> Result<()>
    where
        F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
    {
        let (logp, grad) = objective(&self.position)?;
        self.logp = logp;
        self.grad = grad;
        Ok(())
    }

    /// Install an externally computed density and gradient for the current
    /// position, when the caller already evaluated the objective.
    pub fn install(&mut self, logp: f64, grad: Array1<f64>) {
        debug_assert_eq!(grad.len(), self.position.len());
        self.logp = logp;
        self.grad = grad;
    }

    pub fn accept_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn counters(&self) -> (u64, u64) {
        (self.accepted, self.proposed)
    }
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NonFinite | Error::Domain(_))
}

/// One leapfrog trajectory: half momentum kick, full position drift, half
/// kick, repeated. Returns None when the objective fails numerically along
/// the way, which the caller treats as a rejection.
#[allow(clippy::type_complexity)]
pub fn leapfrog<F>(
    q0: &Array1<f64>,
    p0: &Array1<f64>,
    grad0: &Array1<f64>,
    cfg: &HmcConfig,
    objective: &mut F,
) -> Result<Option<(Array1<f64>, Array1<f64>, f64, Array1<f64>)>>
where
    F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
{
    let eps = cfg.step_size;
    let mut q = q0.clone();
    let mut p = p0.clone();
    let mut g = grad0.clone();
    let mut logp = f64::NAN;
    for _ in 0..cfg.leapfrog_steps {
        p = p + &g * (eps / 2.0);
        q = q + &p * eps;
        match objective(&q) {
            Ok((lp, gr)) => {
                logp = lp;
                g = gr;
            }
            Err(e) if is_numerical(&e) => return Ok(None),
            Err(e) => return Err(e),
        }
        p = p + &g * (eps / 2.0);
    }
    Ok(Some((q, p, logp, g)))
}

/// One proposal: draw momentum, run the trajectory, accept with the usual
/// energy-difference probability. Returns whether the move was accepted.
pub fn hmc_step<F, R>(
    state: &mut ChainState,
    cfg: &HmcConfig,
    objective: &mut F,
    rng: &mut R,
) -> Result<bool>
where
    F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
    R: Rng + ?Sized,
{
    let n = state.position.len();
    let mut p0 = Array1::zeros(n);
    for v in p0.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    state.proposed += 1;

    let traj = leapfrog(&state.position, &p0, &state.grad, cfg, objective)?;
    let (q1, p1, logp1, grad1) = match traj {
        Some(t) => t,
        None => return Ok(false),
    };

    let h0 = -state.logp + 0.5 * p0.dot(&p0);
    let h1 = -logp1 + 0.5 * p1.dot(&p1);
    let dh = h0 - h1;
    if !dh.is_finite() {
        return Ok(false);
    }
    let u: f64 = rng.gen();
    if u.ln() < dh {
        state.position = q1;
        state.logp = logp1;
        state.grad = grad1;
        state.accepted += 1;
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Adagrad ascent: per-coordinate steps scaled by accumulated squared
/// gradients. The first step moves each touched coordinate by almost
/// exactly the learning rate.
#[derive(Debug, Clone)]
pub struct Adagrad {
    pub learning_rate: f64,
    pub damping: f64,
    accum: Array1<f64>,
}

impl Adagrad {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Adagrad {
            learning_rate,
            damping: 1e-8,
            accum: Array1::zeros(dim),
        }
    }

    /// Accumulate the squared gradient, then move along it.
    pub fn step(&mut self, params: &mut Array1<f64>, grad: &Array1<f64>) {
        assert_eq!(params.len(), self.accum.len());
        assert_eq!(grad.len(), self.accum.len());
        for i in 0..grad.len() {
            self.accum[i] += grad[i] * grad[i];
            params[i] += self.learning_rate * grad[i] / (self.damping + self.accum[i].sqrt());
        }
    }
}
