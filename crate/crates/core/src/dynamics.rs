//! Fixed-step integrators for the generative ODE and SDE.
//!
//! Rows are integrated independently and in parallel; each row's Brownian
//! increments come from its own stream `(seed, BROWNIAN, row)`, so results do
//! not depend on the number of worker threads.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{SampleBatch, Trajectory};
use crate::drift::{DriftOracle, ScoreOracle};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::schedule::Schedule;
use crate::targets::Target;

/// States whose Euclidean norm exceeds this abort the integration.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Euler,
    Heun,
    Rk4,
    EulerMaruyama,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euler" => Some(Method::Euler),
            "heun" => Some(Method::Heun),
            "rk4" => Some(Method::Rk4),
            "euler-maruyama" | "em" => Some(Method::EulerMaruyama),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    pub steps: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub store_trajectory: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            method: Method::Rk4,
            steps: 20,
            t_min: 1e-3,
            t_max: 1.0 - 1e-3,
            store_trajectory: false,
        }
    }
}

impl IntegratorConfig {
    pub fn new(method: Method, steps: usize) -> Self {
        IntegratorConfig {
            method,
            steps,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("step count must be at least 1"));
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(Error::param(format!(
                "need 0 < t_min < t_max < 1, got t_min = {}, t_max = {}",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        (self.t_max - self.t_min) / self.steps as f64
    }

    /// Time at the start of step `k`; `time(steps) == t_max`.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_max
        } else {
            self.t_min + k as f64 * self.step_size()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Integration {
    pub batch: SampleBatch,
    /// Every step's states, starting with the initial batch.
    pub trajectory: Option<Trajectory>,
}

/// `X_{t_min} = alpha_{t_min} z`: the interpolant at `t_min` with the target
/// contribution (of size `beta_{t_min}`) dropped.
pub fn initial_noise(schedule: &Schedule, target: &Target, n: usize, seed: u64, t_min: f64) -> Result<SampleBatch> {
    let st = schedule.eval(t_min)?;
    let mut z = target.sample_noise(n, seed)?;
    z.as_mut_slice().iter_mut().for_each(|v| *v *= st.alpha);
    z.t = t_min;
    Ok(z)
}

enum RowFailure {
    Diverged { step: usize, t: f64 },
    Oracle(Error),
}

fn diverged(x: &[f64]) -> bool {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    !(sq.is_finite() && sq <= DIVERGENCE_THRESHOLD * DIVERGENCE_THRESHOLD)
}

/// Runs `advance(row_state, x, scratch, step, t, h)` over every row and
/// step, keeping per-step snapshots if requested, and reports the earliest
/// failure. `row_state(i)` builds per-row auxiliary state.
fn drive<S, I, F>(initial: &SampleBatch, config: &IntegratorConfig, row_state: I, advance: F) -> Result<Integration>
where
    I: Fn(usize) -> S + Sync,
    F: Fn(&mut S, &mut [f64], &mut [f64], usize, f64, f64) -> Result<()> + Sync,
{
    config.validate()?;
    let d = initial.dim();
    let n = initial.n();
    let store = config.store_trajectory;
    let mut out = initial.clone();
    let mut history: Vec<Vec<f64>> = vec![Vec::new(); if store { n } else { 0 }];

    let failures: Vec<Option<RowFailure>> = if store {
        out.as_mut_slice()
            .par_chunks_mut(d)
            .zip(history.par_iter_mut())
            .enumerate()
            .map(|(i, (x, hist))| run_row(&mut row_state(i), x, Some(hist), config, &advance))
            .collect()
    } else {
        out.as_mut_slice()
            .par_chunks_mut(d)
            .enumerate()
            .map(|(i, x)| run_row(&mut row_state(i), x, None, config, &advance))
            .collect()
    };

    let mut first_div: Option<(usize, f64)> = None;
    for f in failures.into_iter().flatten() {
        match f {
            RowFailure::Oracle(e) => return Err(e),
            RowFailure::Diverged { step, t } => {
                if first_div.map_or(true, |(s, _)| step < s) {
                    first_div = Some((step, t));
                }
            }
        }
    }
    if let Some((step, t)) = first_div {
        return Err(Error::Divergence { step, t });
    }

    out.t = config.t_max;
    let trajectory = store.then(|| {
        let mut frames = Vec::with_capacity(config.steps + 1);
        for k in 0..=config.steps {
            let mut data = Vec::with_capacity(n * d);
            for hist in &history {
                data.extend_from_slice(&hist[k * d..(k + 1) * d]);
            }
            frames.push((k, config.time(k), data));
        }
        Trajectory { n, d, frames }
    });
    Ok(Integration { batch: out, trajectory })
}

fn run_row<S, F>(
    state: &mut S,
    x: &mut [f64],
    mut hist: Option<&mut Vec<f64>>,
    config: &IntegratorConfig,
    advance: &F,
) -> Option<RowFailure>
where
    F: Fn(&mut S, &mut [f64], &mut [f64], usize, f64, f64) -> Result<()>,
{
    let mut scratch = vec![0.0; 5 * x.len()];
    if let Some(hist) = hist.as_deref_mut() {
        hist.reserve(x.len() * (config.steps + 1));
        hist.extend_from_slice(x);
    }
    for k in 0..config.steps {
        let t = config.time(k);
        let h = config.time(k + 1) - t;
        if let Err(e) = advance(state, x, &mut scratch, k, t, h) {
            return Some(RowFailure::Oracle(e));
        }
        if diverged(x) {
            return Some(RowFailure::Diverged {
                step: k,
                t: config.time(k + 1),
            });
        }
        if let Some(hist) = hist.as_deref_mut() {
            hist.extend_from_slice(x);
        }
    }
    None
}

/// Integrates `dX = b_t(X) dt` from `t_min` to `t_max` with a fixed-step method.
pub fn integrate_ode(drift: &dyn DriftOracle, initial: &SampleBatch, config: &IntegratorConfig) -> Result<Integration> {
    if drift.dim() != initial.dim() {
        return Err(Error::Shape(format!(
            "drift has dimension {}, batch has {}",
            drift.dim(),
            initial.dim()
        )));
    }
    let method = config.method;
    if method == Method::EulerMaruyama {
        return Err(Error::param("Euler-Maruyama is an SDE method; use integrate_sde"));
    }
    drive(
        initial,
        config,
        |_| (),
        |_, x, scratch, _, t, h| {
            let d = x.len();
            let (k1, rest) = scratch.split_at_mut(d);
            let (k2, rest) = rest.split_at_mut(d);
            let (k3, rest) = rest.split_at_mut(d);
            let (k4, tmp) = rest.split_at_mut(d);
            match method {
                Method::Euler => {
                    drift.eval(t, x, k1)?;
                    for (xi, a) in x.iter_mut().zip(k1.iter()) {
                        *xi += h * a;
                    }
                }
                Method::Heun => {
                    drift.eval(t, x, k1)?;
                    for ((s, xi), a) in tmp.iter_mut().zip(x.iter()).zip(k1.iter()) {
                        *s = xi + h * a;
                    }
                    drift.eval(t + h, tmp, k2)?;
                    for ((xi, a), b) in x.iter_mut().zip(k1.iter()).zip(k2.iter()) {
                        *xi += 0.5 * h * (a + b);
                    }
                }
                Method::Rk4 => {
                    let half = 0.5 * h;
                    drift.eval(t, x, k1)?;
                    for ((s, xi), a) in tmp.iter_mut().zip(x.iter()).zip(k1.iter()) {
                        *s = xi + half * a;
                    }
                    drift.eval(t + half, tmp, k2)?;
                    for ((s, xi), a) in tmp.iter_mut().zip(x.iter()).zip(k2.iter()) {
                        *s = xi + half * a;
                    }
                    drift.eval(t + half, tmp, k3)?;
                    for ((s, xi), a) in tmp.iter_mut().zip(x.iter()).zip(k3.iter()) {
                        *s = xi + h * a;
                    }
                    drift.eval(t + h, tmp, k4)?;
                    for (j, xi) in x.iter_mut().enumerate() {
                        *xi += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
                    }
                }
                Method::EulerMaruyama => unreachable!(),
            }
            Ok(())
        },
    )
}

/// Euler-Maruyama for `dX = (b_t + eps_t s_t)(X) dt + sqrt(2 eps_t) dW`, with
/// `eps` evaluated at the left end of each step.
pub fn integrate_sde(
    drift: &dyn DriftOracle,
    score: &dyn ScoreOracle,
    epsilon: &(dyn Fn(f64) -> Result<f64> + Sync),
    initial: &SampleBatch,
    config: &IntegratorConfig,
    seed: u64,
) -> Result<Integration> {
    if config.method != Method::EulerMaruyama {
        return Err(Error::param("integrate_sde requires the Euler-Maruyama method"));
    }
    if drift.dim() != initial.dim() || score.dim() != initial.dim() {
        return Err(Error::Shape("drift, score and batch dimensions differ".into()));
    }
    config.validate()?;
    let eps: Vec<f64> = (0..config.steps)
        .map(|k| epsilon(config.time(k)))
        .collect::<Result<_>>()?;
    if let Some((k, e)) = eps.iter().enumerate().find(|(_, e)| !(e.is_finite() && **e >= 0.0)) {
        return Err(Error::param(format!(
            "diffusion coefficient must be finite and nonnegative, got {e} at t = {}",
            config.time(k)
        )));
    }
    let brownian = |i: usize| stream(seed, &[tag::BROWNIAN, i as u64]);
    drive(initial, config, brownian, |rng, x, scratch, k, t, h| {
        let d = x.len();
        let (b, rest) = scratch.split_at_mut(d);
        let (s, _) = rest.split_at_mut(d);
        drift.eval(t, x, b)?;
        score.eval(t, x, s)?;
        let e = eps[k];
        let noise = (2.0 * e * h).sqrt();
        for j in 0..d {
            let xi: f64 = rng.sample(StandardNormal);
            x[j] = x[j] + h * (b[j] + e * s[j]) + noise * xi;
        }
        Ok(())
    })
}
