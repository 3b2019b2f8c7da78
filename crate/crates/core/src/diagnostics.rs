//! Path functionals and field spectra.
//!
//! Time integrals over `(0, 1)` use the midpoint rule with a Monte-Carlo
//! mean at each node; node `i` samples from the stream family
//! `(seed, QUADRATURE, i)`, so two runs that differ only in schedule or drift
//! see the same noise and target draws. Sums are pairwise in a fixed order
//! and do not depend on the thread count.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::batch::{fmt_f64, SampleBatch};
use crate::drift::{matrix_spectral_norm, spectral_norm, transfer_jacobian, DriftOracle, ScoreOracle};
use crate::error::{Error, Result};
use crate::rng::{child_seed, stream, tag};
use crate::schedule::{Schedule, ScheduleState, WeightMode};
use crate::targets::{sample_interpolant, shell_index, Target};
use crate::transform::{fft2_unitary, wrapped_mode, SineTransform2d};

pub const DEFAULT_T_GRID: usize = 128;
pub const DEFAULT_MC_PER_T: usize = 256;
pub const DEFAULT_KL_NODES: usize = 129;
pub const ETA_MIN: f64 = 1e-3;
pub const ETA_MAX: f64 = 1e3;

/// Sum with pairwise splitting; deterministic for a fixed slice.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        v.iter().sum()
    } else {
        let (a, b) = v.split_at(v.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    let dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = if v.len() > 1 {
        pairwise_sum(&dev) / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// Averaged squared Lipschitz constant of a drift along its interpolant.
#[derive(Debug, Clone, PartialEq)]
pub struct LipReport {
    pub a2_estimate: f64,
    pub std_error: f64,
    pub t_grid_size: usize,
    pub mc_per_t: usize,
    /// Largest `||grad b_t(x)||_2` seen at any probe.
    pub sup_lipschitz: f64,
}

impl LipReport {
    /// `key,value` lines.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "key,value")?;
        writeln!(w, "a2_estimate,{}", fmt_f64(self.a2_estimate))?;
        writeln!(w, "std_error,{}", fmt_f64(self.std_error))?;
        writeln!(w, "t_grid_size,{}", self.t_grid_size)?;
        writeln!(w, "mc_per_t,{}", self.mc_per_t)?;
        writeln!(w, "sup_lipschitz,{}", fmt_f64(self.sup_lipschitz))?;
        Ok(())
    }
}

/// Draws `n` states at time `t` from a given seed.
pub type Sampler<'a> = dyn Fn(f64, usize, u64) -> Result<SampleBatch> + Sync + 'a;

struct PathAverage {
    estimate: Estimate,
    max: f64,
}

fn midpoint_average(
    t_grid_size: usize,
    mc_per_t: usize,
    seed: u64,
    sampler: &Sampler<'_>,
    integrand: &(dyn Fn(f64, &[f64]) -> Result<f64> + Sync),
) -> Result<PathAverage> {
    if t_grid_size == 0 || mc_per_t == 0 {
        return Err(Error::param("time grid and Monte-Carlo sizes must be positive"));
    }
    let mut means = Vec::with_capacity(t_grid_size);
    let mut var_sum = Vec::with_capacity(t_grid_size);
    let mut max = 0.0_f64;
    for i in 0..t_grid_size {
        let t = (i as f64 + 0.5) / t_grid_size as f64;
        let batch = sampler(t, mc_per_t, child_seed(seed, &[tag::QUADRATURE, i as u64]))?;
        let vals: Vec<f64> = batch
            .as_slice()
            .par_chunks(batch.dim())
            .map(|x| integrand(t, x))
            .collect::<Result<_>>()?;
        if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
            return Err(Error::Oracle(format!("non-finite integrand {v} at t = {t}")));
        }
        let (m, v) = mean_var(&vals);
        max = vals.iter().fold(max, |a, v| a.max(*v));
        means.push(m);
        var_sum.push(v / mc_per_t as f64);
    }
    let tn = t_grid_size as f64;
    Ok(PathAverage {
        estimate: Estimate {
            value: pairwise_sum(&means) / tn,
            std_error: pairwise_sum(&var_sum).sqrt() / tn,
        },
        max,
    })
}

/// `A_2 = int_0^1 E ||grad b_t(I_t)||_2^2 dt` with `I_t` drawn from `sampler`.
pub fn avg_lip2_with_sampler(
    drift: &dyn DriftOracle,
    sampler: &Sampler<'_>,
    t_grid_size: usize,
    mc_per_t: usize,
    seed: u64,
) -> Result<LipReport> {
    let avg = midpoint_average(t_grid_size, mc_per_t, seed, sampler, &|t, x| {
        let n =
            spectral_norm(drift, t, x).map_err(|e| Error::Oracle(format!("Jacobian probe failed at t = {t}: {e}")))?;
        Ok(n * n)
    })?;
    Ok(LipReport {
        a2_estimate: avg.estimate.value,
        std_error: avg.estimate.std_error,
        t_grid_size,
        mc_per_t,
        sup_lipschitz: avg.max.sqrt(),
    })
}

/// [`avg_lip2_with_sampler`] along the scalar interpolant of `schedule` and `target`.
pub fn avg_lip2(
    drift: &dyn DriftOracle,
    schedule: &Schedule,
    target: &Target,
    t_grid_size: usize,
    mc_per_t: usize,
    seed: u64,
) -> Result<LipReport> {
    let sampler = |t: f64, n: usize, s: u64| sample_interpolant(schedule, target, t, n, s);
    avg_lip2_with_sampler(drift, &sampler, t_grid_size, mc_per_t, seed)
}

/// `P = int_0^1 E ||b_t(I_t)||^2 dt` with `I_t` drawn from `sampler`.
pub fn kinetic_energy_with_sampler(
    drift: &dyn DriftOracle,
    sampler: &Sampler<'_>,
    t_grid_size: usize,
    mc_per_t: usize,
    seed: u64,
) -> Result<Estimate> {
    let d = drift.dim();
    let avg = midpoint_average(t_grid_size, mc_per_t, seed, sampler, &|t, x| {
        let mut b = vec![0.0; d];
        drift.eval(t, x, &mut b)?;
        Ok(b.iter().map(|v| v * v).sum())
    })?;
    Ok(avg.estimate)
}

/// [`kinetic_energy_with_sampler`] along the scalar interpolant.
pub fn kinetic_energy(
    drift: &dyn DriftOracle,
    schedule: &Schedule,
    target: &Target,
    t_grid_size: usize,
    mc_per_t: usize,
    seed: u64,
) -> Result<Estimate> {
    let sampler = |t: f64, n: usize, s: u64| sample_interpolant(schedule, target, t, n, s);
    kinetic_energy_with_sampler(drift, &sampler, t_grid_size, mc_per_t, seed)
}

/// KL functional estimate with separate error components.
#[derive(Debug, Clone, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    pub mc_error: f64,
    pub quad_error: f64,
    pub nodes: usize,
    pub mc_per_node: usize,
}

impl KlEstimate {
    pub fn error_budget(&self) -> f64 {
        self.mc_error + self.quad_error
    }
}

/// The time `t` at which `alpha_t / beta_t = eta`.
pub fn time_for_noise_ratio(schedule: &Schedule, eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::param(format!("noise ratio must be positive, got {eta}")));
    }
    if schedule.is_linear() {
        return Ok(1.0 / (1.0 + eta));
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let st = schedule.eval(mid)?;
        if st.alpha - eta * st.beta > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let c = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect()
}

/// `KL* = 2 int alpha^2 (beta_dot/beta - alpha_dot/alpha) E ||s_t - s_hat_t||^2 dt`.
///
/// The time integral is taken in `v = log(alpha/beta)` over
/// `[log ETA_MIN, log ETA_MAX]` with composite Simpson on `quad_nodes` (odd)
/// points, where the integrand becomes `2 eta^2 beta^2 E ||s_t - s_hat_t||^2`.
pub fn kl_star(
    schedule: &Schedule,
    true_score: &dyn ScoreOracle,
    estimated_score: &dyn ScoreOracle,
    target: &Target,
    quad_nodes: usize,
    mc_per_node: usize,
    seed: u64,
) -> Result<KlEstimate> {
    if quad_nodes < 3 || quad_nodes % 2 == 0 {
        return Err(Error::param(format!(
            "Simpson quadrature needs an odd node count >= 3, got {quad_nodes}"
        )));
    }
    if mc_per_node < 2 {
        return Err(Error::param("need at least 2 samples per node"));
    }
    let d = target.dim();
    let (v0, v1) = (ETA_MIN.ln(), ETA_MAX.ln());
    let h = (v1 - v0) / (quad_nodes - 1) as f64;
    let mut f = Vec::with_capacity(quad_nodes);
    let mut var = Vec::with_capacity(quad_nodes);
    for i in 0..quad_nodes {
        let eta = (v0 + i as f64 * h).exp();
        let t = time_for_noise_ratio(schedule, eta)?;
        let st = schedule.eval(t)?;
        let batch = sample_interpolant(
            schedule,
            target,
            t,
            mc_per_node,
            child_seed(seed, &[tag::QUADRATURE, i as u64]),
        )?;
        let sq: Vec<f64> = batch
            .as_slice()
            .par_chunks(d)
            .map(|x| -> Result<f64> {
                let mut a = vec![0.0; d];
                let mut b = vec![0.0; d];
                true_score.eval(t, x, &mut a)?;
                estimated_score.eval(t, x, &mut b)?;
                Ok(a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum())
            })
            .collect::<Result<_>>()?;
        let (m, v) = mean_var(&sq);
        let scale = 2.0 * eta * eta * st.beta * st.beta;
        let value = scale * m;
        if !value.is_finite() {
            return Err(Error::Singularity { t });
        }
        f.push(value);
        var.push(scale * scale * v / mc_per_node as f64);
    }
    let w = simpson_weights(quad_nodes, h);
    let terms: Vec<f64> = w.iter().zip(&f).map(|(a, b)| a * b).collect();
    let value = pairwise_sum(&terms);
    let mc_terms: Vec<f64> = w.iter().zip(&var).map(|(a, v)| a * a * v).collect();
    let mc_error = pairwise_sum(&mc_terms).sqrt();
    let quad_error = if (quad_nodes - 1) % 4 == 0 {
        let coarse: Vec<f64> = f.iter().step_by(2).copied().collect();
        let wc = simpson_weights(coarse.len(), 2.0 * h);
        let sc: f64 = pairwise_sum(&wc.iter().zip(&coarse).map(|(a, b)| a * b).collect::<Vec<_>>());
        (value - sc).abs() / 15.0
    } else {
        let trap: f64 = h * (pairwise_sum(&f) - 0.5 * (f[0] + f[quad_nodes - 1]));
        (value - trap).abs()
    };
    Ok(KlEstimate {
        value,
        mc_error,
        quad_error,
        nodes: quad_nodes,
        mc_per_node,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    /// Unitary DFT with wrapped wavenumbers.
    Fourier,
    /// Orthonormal Dirichlet sine transform, modes from 1.
    Sine,
}

/// Shell-binned energy spectrum averaged over a batch of square fields.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub k_bins: Vec<usize>,
    pub energy: Vec<f64>,
    pub sample_count: usize,
    /// Mean of `sum u^2` over the transformed grid points.
    pub mean_field_energy: f64,
}

impl SpectrumReport {
    pub fn total(&self) -> f64 {
        pairwise_sum(&self.energy)
    }

    /// `k,energy` lines.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "k,energy")?;
        for (k, e) in self.k_bins.iter().zip(&self.energy) {
            writeln!(w, "{k},{}", fmt_f64(*e))?;
        }
        Ok(())
    }
}

/// Grid size of a square field with `d` points.
pub fn field_side(d: usize) -> Result<usize> {
    let n = (d as f64).sqrt().round() as usize;
    if n * n != d || n < 2 {
        return Err(Error::Shape(format!("{d} values do not form a square grid")));
    }
    Ok(n)
}

/// `E(k) = sum_{k <= |m| < k+1} |u_hat(m)|^2`, averaged over samples.
pub fn spectrum(samples: &SampleBatch, kind: TransformKind) -> Result<SpectrumReport> {
    let n = field_side(samples.dim())?;
    let sine = SineTransform2d::new(n)?;
    let kmax = match kind {
        TransformKind::Sine => shell_index(n - 1, n - 1),
        TransformKind::Fourier => shell_index(n / 2, n / 2),
    };
    let per_sample: Vec<(Vec<f64>, f64)> = samples
        .as_slice()
        .par_chunks(samples.dim())
        .map(|field| -> Result<(Vec<f64>, f64)> {
            let mut bins = vec![0.0; kmax + 1];
            let energy = match kind {
                TransformKind::Sine => {
                    let mut c = field.to_vec();
                    sine.apply(&mut c)?;
                    let mut e = 0.0;
                    for j in 1..n {
                        for k in 1..n {
                            bins[shell_index(j, k)] += c[j * n + k] * c[j * n + k];
                            e += field[j * n + k] * field[j * n + k];
                        }
                    }
                    e
                }
                TransformKind::Fourier => {
                    let c = fft2_unitary(field, n)?;
                    for j in 0..n {
                        for k in 0..n {
                            let (mj, mk) = (
                                wrapped_mode(j, n).unsigned_abs() as usize,
                                wrapped_mode(k, n).unsigned_abs() as usize,
                            );
                            bins[shell_index(mj, mk)] += c[j * n + k].norm_sqr();
                        }
                    }
                    field.iter().map(|v| v * v).sum()
                }
            };
            Ok((bins, energy))
        })
        .collect::<Result<_>>()?;
    let count = per_sample.len();
    if count == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut energy = vec![0.0; kmax + 1];
    for (k, e) in energy.iter_mut().enumerate() {
        let col: Vec<f64> = per_sample.iter().map(|(b, _)| b[k]).collect();
        *e = pairwise_sum(&col) / count as f64;
    }
    let fe: Vec<f64> = per_sample.iter().map(|(_, e)| *e).collect();
    Ok(SpectrumReport {
        k_bins: (0..=kmax).collect(),
        energy,
        sample_count: count,
        mean_field_energy: pairwise_sum(&fe) / count as f64,
    })
}

/// Lipschitz profile `G(u)` entering the schedule optimizer, evaluated at the
/// variance-preserving point `beta = u`, `alpha = sqrt(1 - u^2)`.
#[derive(Clone)]
pub enum GFunction {
    /// `E sech^{4k}(h + u <r, sqrt(1-u^2) z + u x_1>)`, reduced to the scalar
    /// projections `a = <r, z>`, `b = <r, x_1>`.
    Bimodal { h: f64, a: Vec<f64>, b: Vec<f64>, k: u32 },
    /// `max_j |u (lambda_j - 1) / (1 + u^2 (lambda_j - 1))|^{2k}`.
    Gaussian { eigenvalues: Vec<f64>, k: u32 },
    /// `E ||grad b_u(I_u)||_2^{2k}` at unit `beta_dot`, from a linear-schedule
    /// reference drift.
    General {
        reference: Arc<dyn DriftOracle>,
        z: SampleBatch,
        x1: SampleBatch,
        k: u32,
    },
}

impl std::fmt::Debug for GFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GFunction::Bimodal { h, a, k, .. } => write!(f, "GFunction::Bimodal(h = {h}, n = {}, k = {k})", a.len()),
            GFunction::Gaussian { eigenvalues, k } => {
                write!(f, "GFunction::Gaussian(d = {}, k = {k})", eigenvalues.len())
            }
            GFunction::General { reference, z, k, .. } => {
                write!(f, "GFunction::General({}, n = {}, k = {k})", reference.name(), z.n())
            }
        }
    }
}

/// `u` is clamped below this so that `alpha_dot = -u / alpha` stays finite.
pub const G_U_MAX: f64 = 1.0 - 1e-6;

impl GFunction {
    pub fn k(&self) -> u32 {
        match self {
            GFunction::Bimodal { k, .. } | GFunction::Gaussian { k, .. } | GFunction::General { k, .. } => *k,
        }
    }

    /// Which optimizer weight matches this profile.
    pub fn weight_mode(&self) -> WeightMode {
        match self {
            GFunction::Bimodal { .. } => WeightMode::Mixture,
            _ => WeightMode::General,
        }
    }

    pub fn eval(&self, u: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::domain(u, 0.0, 1.0));
        }
        match self {
            GFunction::Bimodal { h, a, b, k } => {
                let c = (1.0 - u * u).max(0.0).sqrt();
                let vals: Vec<f64> = a
                    .iter()
                    .zip(b)
                    .map(|(ai, bi)| {
                        let s = 1.0 / (h + u * (c * ai + u * bi)).abs().min(350.0).cosh();
                        s.powi(4 * *k as i32)
                    })
                    .collect();
                Ok(pairwise_sum(&vals) / a.len() as f64)
            }
            GFunction::Gaussian { eigenvalues, k } => {
                let m = eigenvalues
                    .iter()
                    .map(|l| (u * (l - 1.0) / (1.0 + u * u * (l - 1.0))).abs())
                    .fold(0.0, f64::max);
                Ok(m.powi(2 * *k as i32))
            }
            GFunction::General { reference, z, x1, k } => {
                let u = u.min(G_U_MAX);
                let alpha = (1.0 - u * u).sqrt();
                let st = ScheduleState {
                    alpha,
                    beta: u,
                    alpha_dot: -u / alpha,
                    beta_dot: 1.0,
                    alpha_alpha_dot: -u,
                    beta_beta_dot: u,
                };
                let d = z.dim();
                let vals: Vec<f64> = z
                    .as_slice()
                    .par_chunks(d)
                    .zip(x1.as_slice().par_chunks(d))
                    .map(|(zi, xi)| -> Result<f64> {
                        let state: Vec<f64> = zi.iter().zip(xi).map(|(a, b)| alpha * a + u * b).collect();
                        let j = transfer_jacobian(reference.as_ref(), &st, &state)?;
                        Ok(matrix_spectral_norm(&j)?.powi(2 * *k as i32))
                    })
                    .collect::<Result<_>>()?;
                Ok(pairwise_sum(&vals) / vals.len() as f64)
            }
        }
    }

    /// Infallible form for the optimizer: failures become NaN, which the
    /// optimizer reports as an oracle error.
    pub fn as_fn(&self) -> impl Fn(f64) -> f64 + Sync + '_ {
        move |u| self.eval(u).unwrap_or(f64::NAN)
    }
}

/// Builds the optimizer profile for `target`. Bimodal targets use the closed
/// sech form; Gaussian targets the closed multiplier form unless a reference
/// drift is given; other targets need a linear-schedule reference drift.
pub fn g_function_for_optimizer(
    target: &Target,
    reference: Option<Arc<dyn DriftOracle>>,
    k: u32,
    mc: usize,
    seed: u64,
) -> Result<GFunction> {
    if k == 0 {
        return Err(Error::param("k must be a positive integer"));
    }
    if mc == 0 {
        return Err(Error::param("Monte-Carlo size must be positive"));
    }
    match (target, reference) {
        (Target::Bimodal(b), _) => {
            use rand::Rng;
            use rand_distr::StandardNormal;
            let rn = b.r_norm_sq().sqrt();
            let (a, bv): (Vec<f64>, Vec<f64>) = (0..mc)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream(seed, &[tag::G_FUNCTION, i as u64]);
                    let sign = if rng.random::<f64>() < b.p() { 1.0 } else { -1.0 };
                    let z: f64 = rng.sample(StandardNormal);
                    let w: f64 = rng.sample(StandardNormal);
                    (rn * z, sign * rn * rn + rn * w)
                })
                .unzip();
            Ok(GFunction::Bimodal { h: b.h(), a, b: bv, k })
        }
        (Target::Gaussian(g), None) => Ok(GFunction::Gaussian {
            eigenvalues: g.eigenvalues().to_vec(),
            k,
        }),
        (_, Some(reference)) => {
            match reference.schedule() {
                Some(s) if s.is_linear() => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "the profile needs a linear-schedule reference drift, got `{}`",
                        reference.name()
                    )))
                }
            }
            let s = child_seed(seed, &[tag::G_FUNCTION]);
            Ok(GFunction::General {
                reference,
                z: target.sample_noise(mc, s)?,
                x1: target.sample(mc, s)?,
                k,
            })
        }
        (Target::General(_), None) => Err(Error::param("a general mixture profile needs a reference drift")),
    }
}
