//! Desk-scale benches: few-step mode weights on a bimodal mixture, GRF
//! spectra across resolutions, and KL* across schedules. Also the 1D
//! projection and two-component EM fit the mixture bench relies on.
//!
//! Results directories contain:
//!
//! ```text
//! config.json           resolved configuration
//! results.csv           one row per (schedule, steps[, resolution]) run
//! truth_N{n}.csv        k,energy     (GRF only)
//! analytic_N{n}.csv     k,energy     (GRF only)
//! spectrum_N{n}_{schedule}_{steps}.csv   k,energy   (GRF only)
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{fmt_f64, SampleBatch, Trajectory};
use crate::diagnostics::{kl_star, spectrum, KlEstimate, SpectrumReport, TransformKind, DEFAULT_KL_NODES};
use crate::drift::{bimodal_drift, eta_family_score, gaussian_drift};
use crate::dynamics::{initial_noise, integrate_ode, IntegratorConfig, Method};
use crate::error::{Error, Result};
use crate::rng::{child_seed, stream, tag};
use crate::schedule::{Schedule, ScheduleSpec};
use crate::targets::{grid_normals, unpack_interior, BimodalGmmTarget, GaussianTarget, GrfSpec, Target};
use crate::transform::SineTransform2d;

pub const PCA_TOLERANCE: f64 = 1e-8;
pub const PCA_MAX_ITER: usize = 500;
/// Samples used to fix the sign of the principal direction.
pub const PCA_SIGN_SAMPLES: usize = 10;
pub const EM_TOLERANCE: f64 = 1e-8;
pub const EM_MAX_ITER: usize = 500;
pub const EM_VARIANCE_FLOOR: f64 = 1e-6;
const KMEANS_MAX_ITER: usize = 100;
/// Rows per block in deterministic reductions.
const BLOCK: usize = 256;

/// Projects centered samples onto the leading eigenvector of their sample
/// covariance.
///
/// Power iteration starts from the largest-norm centered sample. The sign is
/// chosen so that the `PCA_SIGN_SAMPLES` largest-norm samples project to a
/// positive mean. Reductions use fixed row blocks, so the result does not
/// depend on the thread count.
pub fn pca_project_1d(batch: &SampleBatch) -> Result<Vec<f64>> {
    let (n, d) = (batch.n(), batch.dim());
    if n < 2 {
        return Err(Error::param(format!("PCA needs at least 2 samples, got {n}")));
    }
    let mean = batch.mean();
    let mut xc = batch.as_slice().to_vec();
    xc.par_chunks_mut(d).for_each(|row| {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    });
    let norms: Vec<f64> = xc.par_chunks(d).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    if !(norms[order[0]] > 0.0) {
        return Err(Error::Degenerate("sample covariance is zero".into()));
    }

    let project = |v: &[f64]| -> Vec<f64> { xc.par_chunks(d).map(|r| dot(r, v)).collect() };
    let mut v: Vec<f64> = xc[order[0] * d..(order[0] + 1) * d].to_vec();
    normalize(&mut v);
    for _ in 0..PCA_MAX_ITER {
        let p = project(&v);
        let mut w: Vec<f64> = xc
            .par_chunks(BLOCK * d)
            .zip(p.par_chunks(BLOCK))
            .map(|(rows, ps)| {
                let mut acc = vec![0.0; d];
                for (r, pi) in rows.chunks(d).zip(ps) {
                    for (a, x) in acc.iter_mut().zip(r) {
                        *a += pi * x;
                    }
                }
                acc
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(vec![0.0; d], |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                a
            });
        if normalize(&mut w) == 0.0 {
            return Err(Error::Degenerate("sample covariance is zero".into()));
        }
        let change = w.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = w;
        if change < PCA_TOLERANCE {
            break;
        }
    }
    let mut proj = project(&v);
    let k = PCA_SIGN_SAMPLES.min(n);
    let lead: f64 = order[..k].iter().map(|&i| proj[i]).sum();
    if lead < 0.0 {
        proj.iter_mut().for_each(|p| *p = -*p);
    }
    Ok(proj)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Two-component 1D Gaussian mixture, components ordered by mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BimodalFit {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub iterations: usize,
    /// Mean log-likelihood per sample.
    pub log_likelihood: f64,
    /// `|mu_1 - mu_2| / (sigma_1 + sigma_2)`.
    pub separation: f64,
}

impl BimodalFit {
    pub fn minor_weight(&self) -> f64 {
        self.weights[0].min(self.weights[1])
    }

    /// Below separation 1 the two components overlap and the weights are not
    /// identifiable.
    pub fn is_separated(&self) -> bool {
        self.separation >= 1.0
    }
}

/// EM fit of a two-component Gaussian mixture to `values`, initialized by
/// k-means++ and Lloyd iterations. Stops when the mean log-likelihood gains
/// less than `EM_TOLERANCE` or after `EM_MAX_ITER` iterations.
pub fn fit_bimodal_1d(values: &[f64], seed: u64) -> Result<BimodalFit> {
    let n = values.len();
    if n < 10 {
        return Err(Error::param(format!("EM fit needs at least 10 values, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("EM input contains non-finite values"));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo == hi {
        return Err(Error::Degenerate(format!("all {n} values equal {lo}")));
    }

    let mut rng = stream(seed, &[tag::EM_INIT]);
    let c0 = values[rng.random_range(0..n)];
    let d2: Vec<f64> = values.iter().map(|v| (v - c0) * (v - c0)).collect();
    let total: f64 = d2.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut c1 = values[n - 1];
    for (v, w) in values.iter().zip(&d2) {
        if pick < *w {
            c1 = *v;
            break;
        }
        pick -= w;
    }
    if c1 == c0 {
        c1 = if (hi - c0).abs() > (c0 - lo).abs() { hi } else { lo };
    }
    let mut centers = [c0.min(c1), c0.max(c1)];
    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mid = 0.5 * (centers[0] + centers[1]);
        let mut changed = false;
        for (a, v) in assign.iter_mut().zip(values) {
            let c = usize::from(*v > mid);
            changed |= *a != c;
            *a = c;
        }
        let mut sum = [0.0; 2];
        let mut cnt = [0usize; 2];
        for (a, v) in assign.iter().zip(values) {
            sum[*a] += v;
            cnt[*a] += 1;
        }
        if cnt[0] == 0 || cnt[1] == 0 {
            break;
        }
        centers = [sum[0] / cnt[0] as f64, sum[1] / cnt[1] as f64];
        if !changed {
            break;
        }
    }

    let mut w = [0.0; 2];
    let mut mu = [0.0; 2];
    let mut var = [0.0; 2];
    for c in 0..2 {
        let members: Vec<f64> = values
            .iter()
            .zip(&assign)
            .filter(|(_, a)| **a == c)
            .map(|(v, _)| *v)
            .collect();
        if members.is_empty() {
            w[c] = 0.5;
            mu[c] = centers[c];
            var[c] = variance(values);
        } else {
            w[c] = members.len() as f64 / n as f64;
            mu[c] = members.iter().sum::<f64>() / members.len() as f64;
            var[c] = variance(&members).max(EM_VARIANCE_FLOOR);
        }
    }
    let wsum = w[0] + w[1];
    w.iter_mut().for_each(|x| *x /= wsum);

    let mut resp = vec![0.0; n];
    let mut ll = e_step(values, &w, &mu, &var, &mut resp);
    let mut iterations = 0;
    while iterations < EM_MAX_ITER {
        iterations += 1;
        let (mut s0, mut s1) = (0.0, 0.0);
        let (mut m0, mut m1) = (0.0, 0.0);
        for (r, v) in resp.iter().zip(values) {
            s0 += 1.0 - r;
            s1 += r;
            m0 += (1.0 - r) * v;
            m1 += r * v;
        }
        if s0 <= 0.0 || s1 <= 0.0 {
            break;
        }
        mu = [m0 / s0, m1 / s1];
        let (mut v0, mut v1) = (0.0, 0.0);
        for (r, v) in resp.iter().zip(values) {
            v0 += (1.0 - r) * (v - mu[0]) * (v - mu[0]);
            v1 += r * (v - mu[1]) * (v - mu[1]);
        }
        var = [(v0 / s0).max(EM_VARIANCE_FLOOR), (v1 / s1).max(EM_VARIANCE_FLOOR)];
        w = [s0 / n as f64, s1 / n as f64];
        let next = e_step(values, &w, &mu, &var, &mut resp);
        let gain = next - ll;
        ll = next;
        if gain < EM_TOLERANCE {
            break;
        }
    }

    let (a, b) = if mu[0] <= mu[1] { (0, 1) } else { (1, 0) };
    Ok(BimodalFit {
        weights: [w[a], w[b]],
        means: [mu[a], mu[b]],
        variances: [var[a], var[b]],
        iterations,
        log_likelihood: ll,
        separation: (mu[0] - mu[1]).abs() / (var[0].sqrt() + var[1].sqrt()),
    })
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Fills the responsibilities of component 1 and returns the mean
/// log-likelihood.
fn e_step(values: &[f64], w: &[f64; 2], mu: &[f64; 2], var: &[f64; 2], resp: &mut [f64]) -> f64 {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let c: [f64; 2] = std::array::from_fn(|k| w[k].ln() - 0.5 * var[k].ln() - half_log_2pi);
    let mut ll = 0.0;
    for (r, v) in resp.iter_mut().zip(values) {
        let l0 = c[0] - 0.5 * (v - mu[0]) * (v - mu[0]) / var[0];
        let l1 = c[1] - 0.5 * (v - mu[1]) * (v - mu[1]) / var[1];
        let m = l0.max(l1);
        let s = (l0 - m).exp() + (l1 - m).exp();
        *r = (l1 - m).exp() / s;
        ll += m + s.ln();
    }
    ll / values.len() as f64
}

/// Schedules compared in the mode-weight bench.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GmmSchedule {
    /// `beta = t`, `alpha = sqrt(1 - t^2)`.
    LinearTrig,
    /// Approximate minimizer of the averaged squared Lipschitz constant with
    /// `M = sqrt(d)`.
    #[serde(rename = "approx-minlip")]
    ApproxMinLip,
}

impl GmmSchedule {
    pub fn build(self, d: usize) -> Result<Schedule> {
        match self {
            GmmSchedule::LinearTrig => Ok(Schedule::trig()),
            GmmSchedule::ApproxMinLip => Schedule::approx_min_lip_gmm((d as f64).sqrt()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GmmSchedule::LinearTrig => "linear-trig",
            GmmSchedule::ApproxMinLip => "approx-minlip",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear-trig" => Some(GmmSchedule::LinearTrig),
            "approx-minlip" => Some(GmmSchedule::ApproxMinLip),
            _ => None,
        }
    }
}

impl std::str::FromStr for GmmSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s.trim()).ok_or_else(|| Error::Parse(format!("unknown mode-weight schedule '{s}'")))
    }
}

impl std::fmt::Display for GmmSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmBenchConfig {
    pub d: usize,
    pub p: f64,
    pub n: usize,
    pub steps: Vec<usize>,
    pub schedules: Vec<GmmSchedule>,
    pub seed: u64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for GmmBenchConfig {
    fn default() -> Self {
        GmmBenchConfig {
            d: 1000,
            p: 0.3,
            n: 10_000,
            steps: vec![2, 3, 4],
            schedules: vec![GmmSchedule::LinearTrig, GmmSchedule::ApproxMinLip],
            seed: 0,
            t_min: 1e-3,
            t_max: 1.0 - 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeWeightResult {
    pub schedule: String,
    pub rk4_steps: usize,
    /// Smaller of the two fitted weights.
    pub recovered_minor_weight: f64,
    pub em_iterations: usize,
    pub seed: u64,
    pub separation: f64,
}

impl ModeWeightResult {
    pub fn is_separated(&self) -> bool {
        self.separation >= 1.0
    }
}

/// RK4 from noise with the closed-form bimodal drift, then PCA and EM on the
/// generated samples, for every (schedule, steps) pair.
pub fn gmm_mode_weight_bench(config: &GmmBenchConfig) -> Result<Vec<ModeWeightResult>> {
    let target = BimodalGmmTarget::preset(config.d, config.p)?;
    let as_target = Target::Bimodal(target.clone());
    if config.n < 10 {
        return Err(Error::param(format!("need at least 10 samples, got {}", config.n)));
    }
    let mut out = Vec::with_capacity(config.schedules.len() * config.steps.len());
    for &kind in &config.schedules {
        let schedule = kind.build(config.d)?;
        let drift = bimodal_drift(&schedule, &target)?;
        let x0 = initial_noise(&schedule, &as_target, config.n, config.seed, config.t_min)?;
        for &steps in &config.steps {
            let ic = IntegratorConfig {
                method: Method::Rk4,
                steps,
                t_min: config.t_min,
                t_max: config.t_max,
                store_trajectory: false,
            };
            let run = integrate_ode(&drift, &x0, &ic)?;
            let proj = pca_project_1d(&run.batch)?;
            let fit = fit_bimodal_1d(&proj, child_seed(config.seed, &[tag::EM_INIT, steps as u64]))?;
            out.push(ModeWeightResult {
                schedule: kind.name().into(),
                rk4_steps: steps,
                recovered_minor_weight: fit.minor_weight(),
                em_iterations: fit.iterations,
                seed: config.seed,
                separation: fit.separation,
            });
        }
    }
    Ok(out)
}

/// Mean and sample standard deviation of the minor weight over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeWeightSummary {
    pub schedule: String,
    pub rk4_steps: usize,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

/// Runs the mode-weight bench for each seed in `seeds` and summarizes.
pub fn gmm_seed_summary(config: &GmmBenchConfig, seeds: &[u64]) -> Result<Vec<ModeWeightSummary>> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = GmmBenchConfig { seed, ..config.clone() };
        runs.push(gmm_mode_weight_bench(&cfg)?);
    }
    let Some(first) = runs.first() else {
        return Err(Error::param("no seeds given"));
    };
    Ok((0..first.len())
        .map(|i| {
            let values: Vec<f64> = runs.iter().map(|r| r[i].recovered_minor_weight).collect();
            let m = values.iter().sum::<f64>() / values.len() as f64;
            let s = if values.len() > 1 {
                (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            ModeWeightSummary {
                schedule: first[i].schedule.clone(),
                rk4_steps: first[i].rk4_steps,
                mean: m,
                std: s,
                values,
            }
        })
        .collect())
}

/// Counts samples whose projection on `r` is positive at some stored step
/// and non-positive at a later one. Under the exact bimodal flow with
/// `h > 0` no sample crosses back (for `h < 0`, pass `-r`).
pub fn positive_side_violations(trajectory: &Trajectory, r: &[f64]) -> Result<usize> {
    if trajectory.d != r.len() {
        return Err(Error::Shape(format!(
            "direction has length {}, states have {}",
            r.len(),
            trajectory.d
        )));
    }
    let d = trajectory.d;
    Ok((0..trajectory.n)
        .into_par_iter()
        .filter(|&i| {
            let mut positive = false;
            for (_, _, data) in &trajectory.frames {
                let s = dot(&data[i * d..(i + 1) * d], r);
                if positive && s <= 0.0 {
                    return true;
                }
                positive |= s > 0.0;
            }
            false
        })
        .count())
}

/// Schedules compared in the GRF spectrum bench.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrfSchedule {
    Linear,
    /// Designed Gaussian schedule with `lambda*` the smallest covariance
    /// eigenvalue at the given resolution.
    Designed,
}

impl GrfSchedule {
    pub fn build(self, spec: &GrfSpec) -> Result<Schedule> {
        match self {
            GrfSchedule::Linear => Ok(Schedule::linear()),
            GrfSchedule::Designed => Schedule::designed_gaussian(spec.min_eigenvalue()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GrfSchedule::Linear => "linear",
            GrfSchedule::Designed => "designed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(GrfSchedule::Linear),
            "designed" => Some(GrfSchedule::Designed),
            _ => None,
        }
    }
}

impl std::str::FromStr for GrfSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s.trim()).ok_or_else(|| Error::Parse(format!("unknown GRF schedule '{s}'")))
    }
}

impl std::fmt::Display for GrfSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrfBenchConfig {
    pub resolutions: Vec<usize>,
    pub steps: Vec<usize>,
    pub schedules: Vec<GrfSchedule>,
    pub n_samples: usize,
    pub seed: u64,
    pub t_min: f64,
    pub t_max: f64,
    /// Bins `1..=max_bin` enter the mean relative error.
    pub max_bin: usize,
}

impl Default for GrfBenchConfig {
    fn default() -> Self {
        GrfBenchConfig {
            resolutions: vec![32, 64, 128],
            steps: vec![20, 40, 80],
            schedules: vec![GrfSchedule::Linear, GrfSchedule::Designed],
            n_samples: 512,
            seed: 0,
            t_min: 1e-3,
            t_max: 1.0 - 1e-3,
            max_bin: 16,
        }
    }
}

/// Reference spectra at one resolution.
#[derive(Debug, Clone)]
pub struct GrfTruth {
    pub resolution: usize,
    /// Spectrum of exact samples.
    pub sampled: SpectrumReport,
    /// Shell sums of the covariance eigenvalues.
    pub analytic: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GrfRun {
    pub resolution: usize,
    pub steps: usize,
    pub schedule: String,
    pub lambda_star: Option<f64>,
    pub spectrum: SpectrumReport,
    pub mean_relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GrfBenchResult {
    pub truths: Vec<GrfTruth>,
    pub runs: Vec<GrfRun>,
}

/// `mean_{1 <= k <= max_bin} |E(k) - E_ref(k)| / E_ref(k)` over bins where
/// the reference is positive.
pub fn mean_relative_spectrum_error(energy: &[f64], reference: &[f64], max_bin: usize) -> Result<f64> {
    let hi = max_bin
        .min(energy.len().saturating_sub(1))
        .min(reference.len().saturating_sub(1));
    let errs: Vec<f64> = (1..=hi)
        .filter(|&k| reference[k] > 0.0)
        .map(|k| (energy[k] - reference[k]).abs() / reference[k])
        .collect();
    if errs.is_empty() {
        return Err(Error::param("no spectrum bins to compare"));
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Generated fields for one (resolution, schedule, steps) configuration.
///
/// The flow runs in sine coefficients, where the GRF covariance is diagonal;
/// coefficient `(j, k)` of sample `i` starts from draw `k` of stream
/// `(seed, NOISE, i, j)`, so low modes share noise across resolutions.
pub fn grf_generate(
    spec: &GrfSpec,
    schedule: &Schedule,
    steps: usize,
    n_samples: usize,
    seed: u64,
    t_min: f64,
    t_max: f64,
) -> Result<SampleBatch> {
    let n = spec.n;
    let coeff_target = GaussianTarget::diagonal(spec.eigenvalues())?;
    let drift = gaussian_drift(schedule, &coeff_target);
    let dim = coeff_target.dim();
    let alpha0 = schedule.eval(t_min)?.alpha;
    let mut x0 = SampleBatch::zeros(n_samples, dim, t_min, seed);
    x0.as_mut_slice().par_chunks_mut(dim).enumerate().for_each(|(i, row)| {
        let c = grid_normals(n, &|j: Option<usize>| {
            stream(seed, &[tag::NOISE, i as u64, j.unwrap_or(0) as u64])
        });
        for (r, v) in row.iter_mut().zip(c) {
            *r = alpha0 * v;
        }
    });
    let ic = IntegratorConfig {
        method: Method::Rk4,
        steps,
        t_min,
        t_max,
        store_trajectory: false,
    };
    let coeffs = integrate_ode(&drift, &x0, &ic)?.batch;
    let sine = SineTransform2d::new(n)?;
    let mut fields = SampleBatch::zeros(n_samples, n * n, t_max, seed);
    fields
        .as_mut_slice()
        .par_chunks_mut(n * n)
        .zip(coeffs.as_slice().par_chunks(dim))
        .try_for_each(|(f, c)| -> Result<()> {
            f.copy_from_slice(&unpack_interior(c, n));
            sine.apply(f)
        })?;
    Ok(fields)
}

/// Spectra of exact and generated GRF samples for every configuration.
pub fn grf_spectrum_bench(config: &GrfBenchConfig) -> Result<GrfBenchResult> {
    if config.n_samples == 0 {
        return Err(Error::param("need at least one sample"));
    }
    let truths: Vec<GrfTruth> = config
        .resolutions
        .par_iter()
        .map(|&n| -> Result<GrfTruth> {
            let spec = GrfSpec::preset(n)?;
            let sampled = spectrum(
                &Target::grf(&spec)?.sample(config.n_samples, config.seed)?,
                TransformKind::Sine,
            )?;
            Ok(GrfTruth {
                resolution: n,
                sampled,
                analytic: spec.shell_sums(),
            })
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, GrfSchedule, usize)> = config
        .resolutions
        .iter()
        .flat_map(|&n| {
            config
                .schedules
                .iter()
                .flat_map(move |&s| config.steps.iter().map(move |&k| (n, s, k)))
        })
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(n, kind, steps)| -> Result<GrfRun> {
            let spec = GrfSpec::preset(n)?;
            let schedule = kind.build(&spec)?;
            let fields = grf_generate(
                &spec,
                &schedule,
                steps,
                config.n_samples,
                config.seed,
                config.t_min,
                config.t_max,
            )?;
            let report = spectrum(&fields, TransformKind::Sine)?;
            let analytic = spec.shell_sums();
            Ok(GrfRun {
                resolution: n,
                steps,
                schedule: kind.name().into(),
                lambda_star: matches!(kind, GrfSchedule::Designed).then(|| spec.min_eigenvalue()),
                mean_relative_error: mean_relative_spectrum_error(&report.energy, &analytic, config.max_bin)?,
                spectrum: report,
            })
        })
        .collect::<Result<_>>()?;
    Ok(GrfBenchResult { truths, runs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlBenchConfig {
    /// Target variance.
    pub m: f64,
    pub delta: f64,
    pub schedules: Vec<ScheduleSpec>,
    pub quad_nodes: usize,
    pub mc_per_node: usize,
    pub seed: u64,
}

impl Default for KlBenchConfig {
    fn default() -> Self {
        KlBenchConfig {
            m: 1.0,
            delta: 0.2,
            schedules: vec![
                ScheduleSpec::Linear,
                ScheduleSpec::Trig,
                ScheduleSpec::DesignedGaussian(0.01),
                ScheduleSpec::ApproxMinLipGmm(2.0),
            ],
            quad_nodes: DEFAULT_KL_NODES,
            mc_per_node: 2048,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlBenchRow {
    pub schedule: String,
    pub estimate: KlEstimate,
    /// `delta^2 / (2 M^2)`.
    pub reference: f64,
}

/// KL* of the noise-ratio estimator family under each schedule.
pub fn kl_invariance_bench(config: &KlBenchConfig) -> Result<Vec<KlBenchRow>> {
    let target = Target::Gaussian(GaussianTarget::scalar(config.m)?);
    let reference = config.delta * config.delta / (2.0 * config.m * config.m);
    config
        .schedules
        .iter()
        .map(|spec| -> Result<KlBenchRow> {
            let schedule = spec.build()?;
            let truth = eta_family_score(&schedule, config.m, 0.0)?;
            let est = eta_family_score(&schedule, config.m, config.delta)?;
            let estimate = kl_star(
                &schedule,
                &truth,
                &est,
                &target,
                config.quad_nodes,
                config.mc_per_node,
                config.seed,
            )?;
            Ok(KlBenchRow {
                schedule: spec.to_string(),
                estimate,
                reference,
            })
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, |b|)` over pairs of values.
pub fn max_pairwise_relative_spread(values: &[f64]) -> f64 {
    let mut worst = 0.0_f64;
    for (i, a) in values.iter().enumerate() {
        for b in &values[i + 1..] {
            let scale = a.abs().max(b.abs());
            if scale > 0.0 {
                worst = worst.max((a - b).abs() / scale);
            }
        }
    }
    worst
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Writes `value` as pretty JSON to `dir/config.json`.
pub fn write_config_json<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    let mut w = create(dir, "config.json")?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Parse(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// `schedule,rk4_steps,seed,minor_weight,em_iterations,separation`.
pub fn write_gmm_results(dir: &Path, results: &[ModeWeightResult]) -> Result<()> {
    let mut w = create(dir, "results.csv")?;
    writeln!(w, "schedule,rk4_steps,seed,minor_weight,em_iterations,separation")?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.schedule,
            r.rk4_steps,
            r.seed,
            fmt_f64(r.recovered_minor_weight),
            r.em_iterations,
            fmt_f64(r.separation)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// `schedule,rk4_steps,mean,std,n_seeds` in `dir/summary.csv`.
pub fn write_gmm_summary(dir: &Path, summary: &[ModeWeightSummary]) -> Result<()> {
    let mut w = create(dir, "summary.csv")?;
    writeln!(w, "schedule,rk4_steps,mean,std,n_seeds")?;
    for s in summary {
        writeln!(
            w,
            "{},{},{},{},{}",
            s.schedule,
            s.rk4_steps,
            fmt_f64(s.mean),
            fmt_f64(s.std),
            s.values.len()
        )?;
    }
    w.flush()?;
    Ok(())
}

/// `results.csv` (`resolution,steps,schedule,lambda_star,mean_relative_error`)
/// plus one `k,energy` file per spectrum.
pub fn write_grf_results(dir: &Path, result: &GrfBenchResult) -> Result<()> {
    let mut w = create(dir, "results.csv")?;
    writeln!(w, "resolution,steps,schedule,lambda_star,mean_relative_error")?;
    for r in &result.runs {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.resolution,
            r.steps,
            r.schedule,
            r.lambda_star.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.mean_relative_error)
        )?;
        let mut f = create(
            dir,
            &format!("spectrum_N{}_{}_{}.csv", r.resolution, r.schedule, r.steps),
        )?;
        r.spectrum.write_csv(&mut f)?;
        f.flush()?;
    }
    w.flush()?;
    for t in &result.truths {
        let mut f = create(dir, &format!("truth_N{}.csv", t.resolution))?;
        t.sampled.write_csv(&mut f)?;
        f.flush()?;
        let mut f = create(dir, &format!("analytic_N{}.csv", t.resolution))?;
        writeln!(f, "k,energy")?;
        for (k, e) in t.analytic.iter().enumerate() {
            writeln!(f, "{k},{}", fmt_f64(*e))?;
        }
        f.flush()?;
    }
    Ok(())
}

/// `schedule,kl,mc_error,quad_error,reference`.
pub fn write_kl_results(dir: &Path, rows: &[KlBenchRow]) -> Result<()> {
    let mut w = create(dir, "results.csv")?;
    writeln!(w, "schedule,kl,mc_error,quad_error,reference")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.schedule,
            fmt_f64(r.estimate.value),
            fmt_f64(r.estimate.mc_error),
            fmt_f64(r.estimate.quad_error),
            fmt_f64(r.reference)
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn normals(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = stream(seed, &[tag::PROBE]);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn mixture(seed: u64, n: usize, p: f64, m: [f64; 2]) -> Vec<f64> {
        let mut rng = stream(seed, &[tag::PROBE, 1]);
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                if rng.random::<f64>() < p {
                    m[0] + z
                } else {
                    m[1] + z
                }
            })
            .collect()
    }

    #[test]
    fn pca_recovers_line_direction() {
        let d = 20;
        let n = 500;
        let r: Vec<f64> = (0..d).map(|j| (j as f64 + 1.0).sin()).collect();
        let rn = dot(&r, &r).sqrt();
        let a = normals(1, n);
        let eps = normals(2, n * d);
        let data: Vec<f64> = (0..n)
            .flat_map(|i| {
                let (a, r, eps) = (a[i], &r, &eps);
                (0..d).map(move |j| a * r[j] + 1e-3 * eps[i * d + j])
            })
            .collect();
        let batch = SampleBatch::from_vec(n, d, data.clone(), 1.0, 0).unwrap();
        let proj = pca_project_1d(&batch).unwrap();
        let exact: Vec<f64> = data.chunks(d).map(|x| dot(x, &r) / rn).collect();
        let corr = correlation(&proj, &exact);
        assert!(corr.abs() > 0.999, "{corr}");
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn pca_isotropic_variance_near_one() {
        let (n, d) = (20_000, 3);
        let batch = SampleBatch::from_vec(n, d, normals(3, n * d), 1.0, 0).unwrap();
        let proj = pca_project_1d(&batch).unwrap();
        let v = variance(&proj);
        assert!((v - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn pca_bimodal_modes_near_sqrt_d() {
        let d = 1000;
        let t = Target::Bimodal(BimodalGmmTarget::preset(d, 0.3).unwrap());
        let batch = t.sample(2000, 4).unwrap();
        let proj = pca_project_1d(&batch).unwrap();
        let fit = fit_bimodal_1d(&proj, 0).unwrap();
        let sq = (d as f64).sqrt();
        let spread = fit.means[1] - fit.means[0];
        assert!((spread - 2.0 * sq).abs() < 0.5, "{spread}");
        assert!((fit.minor_weight() - 0.3).abs() < 0.04);
    }

    #[test]
    fn pca_rejects_constant_batch() {
        let batch = SampleBatch::from_vec(5, 2, vec![1.0; 10], 1.0, 0).unwrap();
        assert!(matches!(pca_project_1d(&batch), Err(Error::Degenerate(_))));
        let one = SampleBatch::from_vec(1, 2, vec![1.0; 2], 1.0, 0).unwrap();
        assert!(pca_project_1d(&one).is_err());
    }

    #[test]
    fn em_recovers_synthetic_weights() {
        let v = mixture(5, 10_000, 0.3, [5.0, -5.0]);
        let fit = fit_bimodal_1d(&v, 1).unwrap();
        assert!((fit.minor_weight() - 0.3).abs() < 0.02, "{fit:?}");
        assert!((fit.means[1] - 5.0).abs() < 0.1);
        assert!((fit.weights[0] + fit.weights[1] - 1.0).abs() < 1e-12);
        assert!(fit.is_separated());
    }

    #[test]
    fn em_symmetric_mixture() {
        let v = mixture(6, 10_000, 0.5, [3.0, -3.0]);
        let fit = fit_bimodal_1d(&v, 2).unwrap();
        assert!((fit.weights[0] - 0.5).abs() < 0.02, "{fit:?}");
    }

    #[test]
    fn em_unimodal_flagged() {
        let fit = fit_bimodal_1d(&normals(7, 5000), 3).unwrap();
        assert!(!fit.is_separated(), "{fit:?}");
    }

    #[test]
    fn em_rejects_bad_input() {
        assert!(matches!(fit_bimodal_1d(&[2.0; 20], 0), Err(Error::Degenerate(_))));
        assert!(fit_bimodal_1d(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn em_is_reproducible() {
        let v = mixture(8, 2000, 0.4, [1.5, -1.5]);
        assert_eq!(fit_bimodal_1d(&v, 9).unwrap(), fit_bimodal_1d(&v, 9).unwrap());
    }

    #[test]
    fn small_gmm_bench_shape_and_reproducibility() {
        let cfg = GmmBenchConfig {
            d: 50,
            n: 400,
            seed: 3,
            ..GmmBenchConfig::default()
        };
        let a = gmm_mode_weight_bench(&cfg).unwrap();
        assert_eq!(a.len(), 6);
        for r in &a {
            assert!((0.0..=0.5).contains(&r.recovered_minor_weight));
        }
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| gmm_mode_weight_bench(&cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn linear_trajectories_stay_on_majority_side() {
        let d = 30;
        for p in [0.7, 0.3] {
            let target = BimodalGmmTarget::preset(d, p).unwrap();
            let s = Schedule::trig();
            let drift = bimodal_drift(&s, &target).unwrap();
            let x0 = initial_noise(&s, &Target::Bimodal(target.clone()), 500, 1, 1e-3).unwrap();
            let ic = IntegratorConfig {
                method: Method::Rk4,
                steps: 200,
                t_min: 1e-3,
                t_max: 1.0 - 1e-3,
                store_trajectory: true,
            };
            let traj = integrate_ode(&drift, &x0, &ic).unwrap().trajectory.unwrap();
            let dir: Vec<f64> = target.r().iter().map(|v| v * target.h().signum()).collect();
            assert_eq!(positive_side_violations(&traj, &dir).unwrap(), 0);
        }
    }

    #[test]
    fn grf_truth_matches_shell_sums() {
        let spec = GrfSpec::preset(16).unwrap();
        let batch = Target::grf(&spec).unwrap().sample(4000, 2).unwrap();
        let rep = spectrum(&batch, TransformKind::Sine).unwrap();
        let err = mean_relative_spectrum_error(&rep.energy, &spec.shell_sums(), 8).unwrap();
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn grf_designed_beats_linear_small() {
        let cfg = GrfBenchConfig {
            resolutions: vec![16],
            steps: vec![10],
            n_samples: 128,
            ..GrfBenchConfig::default()
        };
        let res = grf_spectrum_bench(&cfg).unwrap();
        let err = |s: &str| res.runs.iter().find(|r| r.schedule == s).unwrap().mean_relative_error;
        assert!(err("designed") < err("linear"));
    }

    #[test]
    fn kl_bench_zero_delta_and_invariance() {
        let cfg = KlBenchConfig {
            delta: 0.0,
            mc_per_node: 64,
            quad_nodes: 33,
            ..KlBenchConfig::default()
        };
        for r in kl_invariance_bench(&cfg).unwrap() {
            assert_eq!(r.estimate.value, 0.0);
        }
        let cfg = KlBenchConfig {
            mc_per_node: 256,
            ..KlBenchConfig::default()
        };
        let rows = kl_invariance_bench(&cfg).unwrap();
        let vals: Vec<f64> = rows.iter().map(|r| r.estimate.value).collect();
        assert!(max_pairwise_relative_spread(&vals) < 1e-2);
        for r in &rows {
            assert!(
                (r.estimate.value - 0.02).abs() < 3.0 * r.estimate.error_budget(),
                "{r:?}"
            );
        }
    }

    #[test]
    fn spread_of_values() {
        assert_eq!(max_pairwise_relative_spread(&[1.0, 1.0, 1.0]), 0.0);
        assert!((max_pairwise_relative_spread(&[1.0, 2.0, 1.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn writers_produce_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = ModeWeightResult {
            schedule: "linear-trig".into(),
            rk4_steps: 2,
            recovered_minor_weight: 0.1,
            em_iterations: 3,
            seed: 0,
            separation: 2.0,
        };
        write_gmm_results(dir.path(), &[r]).unwrap();
        write_config_json(dir.path(), &GmmBenchConfig::default()).unwrap();
        let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        let cfg: GmmBenchConfig =
            serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
        assert_eq!(cfg, GmmBenchConfig::default());
    }
}
