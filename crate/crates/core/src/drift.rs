//! Drift, score and diffusion-coefficient oracles.
//!
//! A drift oracle evaluates `b_t(x) = E[d/dt I_t | I_t = x]` one state at a
//! time; batch evaluation and integrators parallelize over rows on top of it.
//! Jacobians are optional: [`spectral_norm`] falls back from an analytic norm
//! to an analytic Jacobian to central finite differences.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::batch::SampleBatch;
use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::schedule::{Schedule, ScheduleState};
use crate::targets::{BimodalGmmTarget, GaussianTarget, GeneralGmmTarget};

/// Largest dimension for which spectral norms use a full SVD.
pub const SVD_MAX_DIM: usize = 64;
pub const POWER_ITERATIONS: usize = 20;
pub const POWER_TOLERANCE: f64 = 1e-6;

/// Time-indexed vector field `b_t(x)`.
pub trait DriftOracle: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes `b_t(x)` into `out`.
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// `d b_t / dx`, when available in closed form.
    fn jacobian(&self, _t: f64, _x: &[f64]) -> Option<Result<DMatrix<f64>>> {
        None
    }

    /// `||d b_t / dx||_2`, when available without forming the Jacobian.
    fn jacobian_norm(&self, _t: f64, _x: &[f64]) -> Option<Result<f64>> {
        None
    }

    /// The scalar schedule the drift belongs to, if any.
    fn schedule(&self) -> Option<&Schedule> {
        None
    }

    fn name(&self) -> String;
}

/// Score `grad log rho_t(x)` of the interpolant's marginal.
pub trait ScoreOracle: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;
    fn name(&self) -> String;
}

/// Evaluates a drift on every row of `batch` in parallel.
pub fn eval_drift_batch(drift: &dyn DriftOracle, t: f64, batch: &SampleBatch) -> Result<SampleBatch> {
    let d = batch.dim();
    check_dim(drift.dim(), d)?;
    let mut out = SampleBatch::zeros(batch.n(), d, t, batch.seed);
    out.as_mut_slice()
        .par_chunks_mut(d)
        .zip(batch.as_slice().par_chunks(d))
        .try_for_each(|(o, x)| drift.eval(t, x, o))?;
    Ok(out)
}

/// Evaluates a score on every row of `batch` in parallel.
pub fn eval_score_batch(score: &dyn ScoreOracle, t: f64, batch: &SampleBatch) -> Result<SampleBatch> {
    let d = batch.dim();
    check_dim(score.dim(), d)?;
    let mut out = SampleBatch::zeros(batch.n(), d, t, batch.seed);
    out.as_mut_slice()
        .par_chunks_mut(d)
        .zip(batch.as_slice().par_chunks(d))
        .try_for_each(|(o, x)| score.eval(t, x, o))?;
    Ok(out)
}

fn check_dim(want: usize, got: usize) -> Result<()> {
    if want == got {
        Ok(())
    } else {
        Err(Error::Shape(format!("oracle has dimension {want}, state has {got}")))
    }
}

fn open_interval(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(t, 0.0, 1.0))
    }
}

/// Drift of `N(0, U diag(lambda) U^T)` under a scalar schedule: per
/// eigendirection `(alpha alpha_dot + beta beta_dot lambda) / (alpha^2 + beta^2 lambda)`.
#[derive(Debug, Clone)]
pub struct GaussianDrift {
    schedule: Schedule,
    target: Arc<GaussianTarget>,
}

pub fn gaussian_drift(schedule: &Schedule, target: &GaussianTarget) -> GaussianDrift {
    GaussianDrift {
        schedule: schedule.clone(),
        target: Arc::new(target.clone()),
    }
}

#[inline]
fn gaussian_multiplier(st: &ScheduleState, lambda: f64) -> f64 {
    (st.alpha_alpha_dot + st.beta_beta_dot * lambda) / (st.alpha * st.alpha + st.beta * st.beta * lambda)
}

impl GaussianDrift {
    pub fn target(&self) -> &GaussianTarget {
        &self.target
    }

    /// Per-eigendirection multipliers at time `t`.
    pub fn multipliers(&self, t: f64) -> Result<Vec<f64>> {
        let st = self.schedule.eval(t)?;
        Ok(self
            .target
            .eigenvalues()
            .iter()
            .map(|&l| gaussian_multiplier(&st, l))
            .collect())
    }
}

impl DriftOracle for GaussianDrift {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let st = self.schedule.eval(t)?;
        let lam = self.target.eigenvalues();
        self.target.apply_spectral(x, |j| gaussian_multiplier(&st, lam[j]), out)
    }

    fn jacobian(&self, t: f64, _x: &[f64]) -> Option<Result<DMatrix<f64>>> {
        let m = match self.multipliers(t) {
            Ok(m) => m,
            Err(e) => return Some(Err(e)),
        };
        match self.target.basis() {
            crate::targets::Basis::Identity => Some(Ok(DMatrix::from_diagonal(&DVector::from_vec(m)))),
            crate::targets::Basis::Explicit(u) => {
                Some(Ok(u * DMatrix::from_diagonal(&DVector::from_vec(m)) * u.transpose()))
            }
            crate::targets::Basis::Sine { .. } => None,
        }
    }

    fn jacobian_norm(&self, t: f64, _x: &[f64]) -> Option<Result<f64>> {
        Some(self.schedule.eval(t).map(|st| {
            self.target
                .eigenvalues()
                .iter()
                .fold(0.0_f64, |a, &l| a.max(gaussian_multiplier(&st, l).abs()))
        }))
    }

    fn schedule(&self) -> Option<&Schedule> {
        Some(&self.schedule)
    }

    fn name(&self) -> String {
        format!("gaussian[{}]", self.schedule.name())
    }
}

/// Drift of a `J`-component Gaussian mixture with noise covariance `C_0`.
///
/// Component `j` contributes `beta_dot m_j + A_j (x - beta m_j)` with
/// `A_j = (beta beta_dot C_j + alpha alpha_dot C_0) Cbar_j^{-1}` and
/// `Cbar_j = beta^2 C_j + alpha^2 C_0`, weighted by log-domain softmax
/// responsibilities.
#[derive(Debug, Clone)]
pub struct GeneralGmmDrift {
    schedule: Schedule,
    target: Arc<GeneralGmmTarget>,
}

pub fn general_gmm_drift(schedule: &Schedule, target: &GeneralGmmTarget) -> GeneralGmmDrift {
    GeneralGmmDrift {
        schedule: schedule.clone(),
        target: Arc::new(target.clone()),
    }
}

struct GmmTerms {
    weights: Vec<f64>,
    velocities: Vec<DVector<f64>>,
    gains: Vec<DMatrix<f64>>,
    grads: Vec<DVector<f64>>,
}

impl GeneralGmmDrift {
    fn terms(&self, t: f64, x: &[f64], with_gains: bool) -> Result<GmmTerms> {
        let st = self.schedule.eval(t)?;
        let tg = &self.target;
        let d = tg.dim();
        check_dim(d, x.len())?;
        let x = DVector::from_column_slice(x);
        let c0 = tg.noise_covariance();
        let jn = tg.components();
        let mut logw = Vec::with_capacity(jn);
        let mut velocities = Vec::with_capacity(jn);
        let mut gains = Vec::with_capacity(if with_gains { jn } else { 0 });
        let mut grads = Vec::with_capacity(jn);
        for j in 0..jn {
            let cbar = &tg.covariances()[j] * (st.beta * st.beta) + c0 * (st.alpha * st.alpha);
            let chol = Cholesky::new(cbar).ok_or_else(|| {
                Error::LinearAlgebra(format!("component {j} covariance is not positive-definite at t = {t}"))
            })?;
            let diff = &x - &tg.means()[j] * st.beta;
            let sol = chol.solve(&diff);
            let half_logdet: f64 = chol.l_dirty().diagonal().iter().take(d).map(|v| v.ln()).sum();
            logw.push(tg.weights()[j].ln() - 0.5 * diff.dot(&sol) - half_logdet);
            let k = &tg.covariances()[j] * st.beta_beta_dot + c0 * st.alpha_alpha_dot;
            velocities.push(&tg.means()[j] * st.beta_dot + &k * &sol);
            if with_gains {
                gains.push(chol.solve(&k).transpose());
            }
            grads.push(-sol);
        }
        let mx = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !mx.is_finite() {
            return Err(Error::Oracle(format!(
                "mixture responsibilities are undefined at t = {t}"
            )));
        }
        let mut weights: Vec<f64> = logw.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= z);
        Ok(GmmTerms {
            weights,
            velocities,
            gains,
            grads,
        })
    }
}

impl DriftOracle for GeneralGmmDrift {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), out.len())?;
        let terms = self.terms(t, x, false)?;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (w, v) in terms.weights.iter().zip(&terms.velocities) {
            for (o, vi) in out.iter_mut().zip(v.iter()) {
                *o += w * vi;
            }
        }
        Ok(())
    }

    fn jacobian(&self, t: f64, x: &[f64]) -> Option<Result<DMatrix<f64>>> {
        Some(self.terms(t, x, true).map(|terms| {
            let d = self.dim();
            let mut gbar = DVector::zeros(d);
            for (w, g) in terms.weights.iter().zip(&terms.grads) {
                gbar += g * *w;
            }
            let mut jac = DMatrix::zeros(d, d);
            for j in 0..terms.weights.len() {
                let w = terms.weights[j];
                jac += &terms.gains[j] * w;
                jac += &terms.velocities[j] * (&terms.grads[j] - &gbar).transpose() * w;
            }
            jac
        }))
    }

    fn schedule(&self) -> Option<&Schedule> {
        Some(&self.schedule)
    }

    fn name(&self) -> String {
        format!("gmm{}[{}]", self.target.components(), self.schedule.name())
    }
}

/// `b_t(x) = beta_dot r tanh(h + beta <r, x>)` for `p N(r, I) + (1-p) N(-r, I)`
/// under a variance-preserving schedule.
#[derive(Debug, Clone)]
pub struct BimodalDrift {
    schedule: Schedule,
    target: Arc<BimodalGmmTarget>,
    r_norm_sq: f64,
}

pub fn bimodal_drift(schedule: &Schedule, target: &BimodalGmmTarget) -> Result<BimodalDrift> {
    if !schedule.is_variance_preserving() {
        return Err(Error::Contract(format!(
            "the closed-form mixture drift needs alpha^2 + beta^2 = 1; schedule `{}` does not satisfy it",
            schedule.name()
        )));
    }
    Ok(BimodalDrift {
        schedule: schedule.clone(),
        target: Arc::new(target.clone()),
        r_norm_sq: target.r_norm_sq(),
    })
}

impl BimodalDrift {
    fn argument(&self, beta: f64, x: &[f64]) -> f64 {
        let proj: f64 = self.target.r().iter().zip(x).map(|(r, v)| r * v).sum();
        self.target.h() + beta * proj
    }
}

fn sech2(a: f64) -> f64 {
    let c = a.abs().min(350.0).cosh();
    1.0 / (c * c)
}

impl DriftOracle for BimodalDrift {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        let st = self.schedule.eval(t)?;
        let c = st.beta_dot * self.argument(st.beta, x).tanh();
        for (o, r) in out.iter_mut().zip(self.target.r()) {
            *o = c * r;
        }
        Ok(())
    }

    fn jacobian(&self, t: f64, x: &[f64]) -> Option<Result<DMatrix<f64>>> {
        Some(self.schedule.eval(t).map(|st| {
            let c = st.beta_beta_dot * sech2(self.argument(st.beta, x));
            let r = DVector::from_column_slice(self.target.r());
            &r * r.transpose() * c
        }))
    }

    fn jacobian_norm(&self, t: f64, x: &[f64]) -> Option<Result<f64>> {
        Some(
            self.schedule
                .eval(t)
                .map(|st| (st.beta_beta_dot * sech2(self.argument(st.beta, x))).abs() * self.r_norm_sq),
        )
    }

    fn schedule(&self) -> Option<&Schedule> {
        Some(&self.schedule)
    }

    fn name(&self) -> String {
        format!("bimodal[{}]", self.schedule.name())
    }
}

/// Optimal-transport drift between `N(0, C_0)` and `N(0, M)` in one dimension:
/// `b_t(x) = (s - 1) / (1 - t + t s) x` with `s = sqrt(M / C_0)`.
#[derive(Debug, Clone, Copy)]
pub struct OtGaussianDrift {
    m: f64,
    c0: f64,
}

pub fn ot_gaussian_drift(m: f64, c0: f64) -> Result<OtGaussianDrift> {
    if !(m > 0.0 && c0 > 0.0 && m.is_finite() && c0.is_finite()) {
        return Err(Error::param(format!(
            "variances must be positive, got M = {m}, C0 = {c0}"
        )));
    }
    Ok(OtGaussianDrift { m, c0 })
}

impl OtGaussianDrift {
    pub fn coefficient(&self, t: f64) -> f64 {
        let s = (self.m / self.c0).sqrt();
        (s - 1.0) / (1.0 - t + t * s)
    }

    /// `n` draws of the transport path `X_t = (1 - t + t s) X_0`, `X_0 ~ N(0, C_0)`.
    pub fn sample_path(&self, t: f64, n: usize, seed: u64) -> Result<SampleBatch> {
        crate::error::check_time(t, 0.0, 1.0)?;
        let s = (self.m / self.c0).sqrt();
        let scale = (1.0 - t + t * s) * self.c0.sqrt();
        let vals: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| scale * stream(seed, &[tag::NOISE, i as u64]).sample::<f64, _>(StandardNormal))
            .collect();
        Ok(SampleBatch::from_scalars(&vals, t, seed))
    }
}

impl DriftOracle for OtGaussianDrift {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        crate::error::check_time(t, 0.0, 1.0)?;
        out[0] = self.coefficient(t) * x[0];
        Ok(())
    }

    fn jacobian(&self, t: f64, _x: &[f64]) -> Option<Result<DMatrix<f64>>> {
        Some(Ok(DMatrix::from_element(1, 1, self.coefficient(t))))
    }

    fn jacobian_norm(&self, t: f64, _x: &[f64]) -> Option<Result<f64>> {
        Some(Ok(self.coefficient(t).abs()))
    }

    fn name(&self) -> String {
        format!("ot-gaussian[M={}, C0={}]", self.m, self.c0)
    }
}

/// Drift of a new scalar schedule obtained from a drift on the linear schedule.
///
/// With `y = x / (alpha + beta)` and `t' = beta / (alpha + beta)`:
/// `b_t(x) = alpha_dot/(alpha+beta) (x - beta b'_{t'}(y)) + beta_dot ((1-t') b'_{t'}(y) + y)`,
/// the noise and denoiser estimates of the reference recombined with the new
/// schedule's velocities. The form has no division by `alpha` or `beta`.
#[derive(Clone)]
pub struct TransferDrift {
    reference: Arc<dyn DriftOracle>,
    schedule: Schedule,
}

impl std::fmt::Debug for TransferDrift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransferDrift")
            .field("reference", &self.reference.name())
            .field("schedule", &self.schedule)
            .finish()
    }
}

pub fn transfer_drift(reference: Arc<dyn DriftOracle>, schedule: &Schedule) -> Result<TransferDrift> {
    match reference.schedule() {
        Some(s) if s.is_linear() => Ok(TransferDrift {
            reference,
            schedule: schedule.clone(),
        }),
        _ => Err(Error::Contract(format!(
            "transfer needs a reference drift on the linear schedule, got `{}`",
            reference.name()
        ))),
    }
}

/// Transfer of `reference` (linear schedule) to the schedule state `st`.
pub(crate) fn transfer_eval(reference: &dyn DriftOracle, st: &ScheduleState, x: &[f64], out: &mut [f64]) -> Result<()> {
    let sum = st.alpha + st.beta;
    if !(sum > 0.0) {
        return Err(Error::Domain {
            t: f64::NAN,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let tdag = st.beta / sum;
    let y: Vec<f64> = x.iter().map(|v| v / sum).collect();
    reference.eval(tdag, &y, out)?;
    let ca = st.alpha_dot / sum;
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(&y) {
        let r = *o;
        *o = ca * (xi - st.beta * r) + st.beta_dot * ((1.0 - tdag) * r + yi);
    }
    Ok(())
}

/// Jacobian of [`transfer_eval`] given the reference Jacobian at `(t', y)`.
pub(crate) fn transfer_jacobian(reference: &dyn DriftOracle, st: &ScheduleState, x: &[f64]) -> Result<DMatrix<f64>> {
    let sum = st.alpha + st.beta;
    let tdag = st.beta / sum;
    let y: Vec<f64> = x.iter().map(|v| v / sum).collect();
    let jr = match reference.jacobian(tdag, &y) {
        Some(j) => j?,
        None => fd_jacobian(reference, tdag, &y)?,
    };
    let d = x.len();
    let coef_r = (-st.alpha_dot * st.beta / sum + st.beta_dot * (1.0 - tdag)) / sum;
    let coef_i = (st.alpha_dot + st.beta_dot) / sum;
    Ok(jr * coef_r + DMatrix::identity(d, d) * coef_i)
}

impl DriftOracle for TransferDrift {
    fn dim(&self) -> usize {
        self.reference.dim()
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let st = self.schedule.eval(t)?;
        transfer_eval(self.reference.as_ref(), &st, x, out).map_err(|e| match e {
            Error::Domain { .. } => Error::domain(t, 0.0, 1.0),
            e => e,
        })
    }

    fn jacobian(&self, t: f64, x: &[f64]) -> Option<Result<DMatrix<f64>>> {
        Some(
            self.schedule
                .eval(t)
                .and_then(|st| transfer_jacobian(self.reference.as_ref(), &st, x)),
        )
    }

    fn schedule(&self) -> Option<&Schedule> {
        Some(&self.schedule)
    }

    fn name(&self) -> String {
        format!("transfer[{} -> {}]", self.reference.name(), self.schedule.name())
    }
}

/// Time-independent drift `1/2 U diag(log lambda) U^T x` of the matrix-valued
/// schedule whose interpolant has covariance `U diag(lambda^t) U^T`.
#[derive(Debug, Clone)]
pub struct MatrixScheduleDrift {
    target: Arc<GaussianTarget>,
    rates: Vec<f64>,
}

pub fn matrix_schedule_drift(target: &GaussianTarget) -> MatrixScheduleDrift {
    MatrixScheduleDrift {
        rates: target.eigenvalues().iter().map(|l| 0.5 * l.ln()).collect(),
        target: Arc::new(target.clone()),
    }
}

impl MatrixScheduleDrift {
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// `n` draws of the interpolant `U diag(lambda^(t/2)) U^T z`.
    pub fn sample_marginal(&self, t: f64, n: usize, seed: u64) -> Result<SampleBatch> {
        crate::error::check_time(t, 0.0, 1.0)?;
        let noise = crate::targets::Target::Gaussian((*self.target).clone()).sample_noise(n, seed)?;
        let d = self.dim();
        let mut out = SampleBatch::zeros(n, d, t, seed);
        out.as_mut_slice()
            .par_chunks_mut(d)
            .zip(noise.as_slice().par_chunks(d))
            .try_for_each(|(o, z)| self.target.apply_spectral(z, |j| (self.rates[j] * t).exp(), o))?;
        Ok(out)
    }
}

impl DriftOracle for MatrixScheduleDrift {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.target.apply_spectral(x, |j| self.rates[j], out)
    }

    fn jacobian_norm(&self, _t: f64, _x: &[f64]) -> Option<Result<f64>> {
        Some(Ok(self.rates.iter().fold(0.0_f64, |a, r| a.max(r.abs()))))
    }

    fn name(&self) -> String {
        "matrix-schedule".into()
    }
}

/// Exact score of a Gaussian target's interpolant: `-x / (alpha^2 + beta^2 lambda)`
/// per eigendirection.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    schedule: Schedule,
    target: Arc<GaussianTarget>,
}

pub fn gaussian_score(schedule: &Schedule, target: &GaussianTarget) -> GaussianScore {
    GaussianScore {
        schedule: schedule.clone(),
        target: Arc::new(target.clone()),
    }
}

impl ScoreOracle for GaussianScore {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let st = self.schedule.eval(t)?;
        let lam = self.target.eigenvalues();
        self.target
            .apply_spectral(x, |j| -1.0 / (st.alpha * st.alpha + st.beta * st.beta * lam[j]), out)
    }

    fn name(&self) -> String {
        format!("gaussian-score[{}]", self.schedule.name())
    }
}

/// Score estimator for a 1D Gaussian of variance `M`, defined in noise-ratio
/// form `S_eta(y) = -y/(M + eta^2) + delta y/(M + eta^2)^2` and mapped to a
/// schedule by `s_t(x) = S_{alpha/beta}(x/beta) / beta`. `delta = 0` gives the
/// exact score.
#[derive(Debug, Clone)]
pub struct EtaFamilyScore {
    schedule: Schedule,
    m: f64,
    delta: f64,
}

pub fn eta_family_score(schedule: &Schedule, m: f64, delta: f64) -> Result<EtaFamilyScore> {
    if !(m > 0.0 && m.is_finite() && delta.is_finite()) {
        return Err(Error::param(format!(
            "need M > 0 and finite delta, got M = {m}, delta = {delta}"
        )));
    }
    Ok(EtaFamilyScore {
        schedule: schedule.clone(),
        m,
        delta,
    })
}

impl ScoreOracle for EtaFamilyScore {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let st = self.schedule.eval(t)?;
        if !(st.beta > 0.0) {
            return Err(Error::domain(t, 0.0, 1.0));
        }
        let eta = st.alpha / st.beta;
        let q = self.m + eta * eta;
        let y = x[0] / st.beta;
        out[0] = (-y / q + self.delta * y / (q * q)) / st.beta;
        Ok(())
    }

    fn name(&self) -> String {
        format!(
            "eta-family[M={}, delta={}; {}]",
            self.m,
            self.delta,
            self.schedule.name()
        )
    }
}

/// `epsilon_t = alpha^2 (beta_dot/beta - alpha_dot/alpha)` on `(0, 1)`.
pub fn optimal_epsilon(schedule: &Schedule) -> impl Fn(f64) -> Result<f64> + Send + Sync + Clone {
    let schedule = schedule.clone();
    move |t| {
        open_interval(t)?;
        Ok(schedule.eval(t)?.optimal_epsilon())
    }
}

/// Score recovered from a drift: `s = (b - (beta_dot/beta) x) / epsilon_t`.
#[derive(Clone)]
pub struct ScoreFromDrift {
    drift: Arc<dyn DriftOracle>,
    schedule: Schedule,
}

pub fn score_from_drift(drift: Arc<dyn DriftOracle>, schedule: &Schedule) -> ScoreFromDrift {
    ScoreFromDrift {
        drift,
        schedule: schedule.clone(),
    }
}

impl ScoreOracle for ScoreFromDrift {
    fn dim(&self) -> usize {
        self.drift.dim()
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        open_interval(t)?;
        let st = self.schedule.eval(t)?;
        let eps = st.optimal_epsilon();
        let rate = st.beta_dot / st.beta;
        self.drift.eval(t, x, out)?;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = (*o - rate * xi) / eps;
        }
        Ok(())
    }

    fn name(&self) -> String {
        format!("score-from[{}]", self.drift.name())
    }
}

/// Drift assembled from a score: `b = (beta_dot/beta) x + epsilon_t s`.
#[derive(Clone)]
pub struct DriftFromScore {
    score: Arc<dyn ScoreOracle>,
    schedule: Schedule,
}

pub fn drift_from_score(score: Arc<dyn ScoreOracle>, schedule: &Schedule) -> DriftFromScore {
    DriftFromScore {
        score,
        schedule: schedule.clone(),
    }
}

impl DriftOracle for DriftFromScore {
    fn dim(&self) -> usize {
        self.score.dim()
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        open_interval(t)?;
        let st = self.schedule.eval(t)?;
        let eps = st.optimal_epsilon();
        let rate = st.beta_dot / st.beta;
        self.score.eval(t, x, out)?;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = rate * xi + eps * *o;
        }
        Ok(())
    }

    fn schedule(&self) -> Option<&Schedule> {
        Some(&self.schedule)
    }

    fn name(&self) -> String {
        format!("drift-from[{}]", self.score.name())
    }
}

/// Central finite-difference Jacobian with step `1e-5 (1 + |x_i|)`.
pub fn fd_jacobian(drift: &dyn DriftOracle, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
    let d = x.len();
    check_dim(drift.dim(), d)?;
    let mut jac = DMatrix::zeros(d, d);
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    for i in 0..d {
        let h = 1e-5 * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        drift.eval(t, &xp, &mut fp)?;
        xp[i] = x[i] - h;
        drift.eval(t, &xp, &mut fm)?;
        xp[i] = x[i];
        for k in 0..d {
            jac[(k, i)] = (fp[k] - fm[k]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Largest singular value: full SVD up to [`SVD_MAX_DIM`], power iteration
/// on `J^T J` above it.
pub fn matrix_spectral_norm(j: &DMatrix<f64>) -> Result<f64> {
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::Oracle("Jacobian has non-finite entries".into()));
    }
    if j.nrows().max(j.ncols()) <= SVD_MAX_DIM {
        let sv = j.clone().svd(false, false).singular_values;
        return Ok(sv.iter().copied().fold(0.0, f64::max));
    }
    let mut rng = stream(0, &[tag::PROBE]);
    let mut v = DVector::from_iterator(j.ncols(), (0..j.ncols()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    v /= v.norm();
    let mut sigma = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let w = j.transpose() * (j * &v);
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = norm.sqrt();
        v = w / norm;
        let done = (next - sigma).abs() <= POWER_TOLERANCE * next;
        sigma = next;
        if done {
            break;
        }
    }
    Ok(sigma)
}

/// `||d b_t/dx (x)||_2` using the cheapest route the oracle offers.
pub fn spectral_norm(drift: &dyn DriftOracle, t: f64, x: &[f64]) -> Result<f64> {
    if let Some(n) = drift.jacobian_norm(t, x) {
        return n;
    }
    let j = match drift.jacobian(t, x) {
        Some(j) => j?,
        None => fd_jacobian(drift, t, x)?,
    };
    matrix_spectral_norm(&j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::Basis;
    use approx::assert_abs_diff_eq;
    use proptest::{prop_assert, proptest};

    fn one(drift: &dyn DriftOracle, t: f64, x: f64) -> f64 {
        let mut o = [0.0];
        drift.eval(t, &[x], &mut o).unwrap();
        o[0]
    }

    #[test]
    fn gaussian_examples() {
        let unit = GaussianTarget::scalar(1.0).unwrap();
        let trig = gaussian_drift(&Schedule::trig(), &unit);
        assert_abs_diff_eq!(one(&trig, 0.4, 2.0), 0.0, epsilon = 1e-15);

        let four = GaussianTarget::scalar(4.0).unwrap();
        let lin = gaussian_drift(&Schedule::linear(), &four);
        assert_abs_diff_eq!(lin.multipliers(0.5).unwrap()[0], 1.2, epsilon = 1e-15);

        let m: f64 = 7.0;
        let des = gaussian_drift(
            &Schedule::designed_gaussian(m).unwrap(),
            &GaussianTarget::scalar(m).unwrap(),
        );
        for &t in &[0.0, 0.2, 0.9, 1.0] {
            assert_abs_diff_eq!(one(&des, t, 1.5), 0.5 * m.ln() * 1.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn designed_lipschitz_is_constant() {
        for &ls in &[1e-4, 1e-2, 0.5] {
            let target = GaussianTarget::diagonal(vec![1.0, 0.5 * (1.0 + ls), ls]).unwrap();
            let d = gaussian_drift(&Schedule::designed_gaussian(ls).unwrap(), &target);
            for i in 0..128 {
                let t = (i as f64 + 0.5) / 128.0;
                let n = d.jacobian_norm(t, &[0.0; 3]).unwrap().unwrap();
                assert_abs_diff_eq!(n, 0.5 * f64::ln(ls).abs(), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn general_gmm_single_mode_is_gaussian() {
        let m = 3.5;
        let g = GeneralGmmTarget::new(
            vec![1.0],
            vec![DVector::zeros(1)],
            vec![DMatrix::from_element(1, 1, m)],
            None,
        )
        .unwrap();
        for s in [
            Schedule::linear(),
            Schedule::trig(),
            Schedule::approx_min_lip_gmm(2.0).unwrap(),
        ] {
            let a = general_gmm_drift(&s, &g);
            let b = gaussian_drift(&s, &GaussianTarget::scalar(m).unwrap());
            for &t in &[0.1, 0.5, 0.9] {
                for &x in &[-2.0, 0.3, 4.0] {
                    assert_abs_diff_eq!(one(&a, t, x), one(&b, t, x), epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn general_matches_bimodal() {
        let b = BimodalGmmTarget::scalar(2.0, 0.3).unwrap();
        let g = GeneralGmmTarget::from_bimodal(&b);
        let s = Schedule::trig();
        let bd = bimodal_drift(&s, &b).unwrap();
        let gd = general_gmm_drift(&s, &g);
        assert_abs_diff_eq!(one(&bd, 0.5, 1.0), one(&gd, 0.5, 1.0), epsilon = 1e-10);

        let sym = GeneralGmmTarget::from_bimodal(&BimodalGmmTarget::scalar(2.0, 0.5).unwrap());
        assert_abs_diff_eq!(one(&general_gmm_drift(&s, &sym), 0.4, 0.0), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn bimodal_examples() {
        let b = BimodalGmmTarget::scalar(2.0, 0.5).unwrap();
        let d = bimodal_drift(&Schedule::trig(), &b).unwrap();
        assert_abs_diff_eq!(one(&d, 0.5, 1.0), 2.0 * 1f64.tanh(), epsilon = 1e-15);
        assert_eq!(one(&d, 0.3, 0.0), 0.0);
        let skew = BimodalGmmTarget::scalar(2.0, 0.3).unwrap();
        let d = bimodal_drift(&Schedule::trig(), &skew).unwrap();
        assert_abs_diff_eq!(one(&d, 0.0, 5.0), 2.0 * skew.h().tanh(), epsilon = 1e-15);
        assert!(matches!(
            bimodal_drift(&Schedule::linear(), &b),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn general_gmm_is_finite_for_far_modes() {
        let g = GeneralGmmTarget::new(
            vec![0.4, 0.6],
            vec![DVector::from_vec(vec![1e3, 0.0]), DVector::from_vec(vec![-1e3, 5.0])],
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 2.0],
            None,
        )
        .unwrap();
        let d = general_gmm_drift(&Schedule::trig(), &g);
        let mut o = [0.0; 2];
        d.eval(0.8, &[3.0, -1.0], &mut o).unwrap();
        assert!(o.iter().all(|v| v.is_finite()));
    }

    fn check_jacobian(drift: &dyn DriftOracle, t: f64, x: &[f64]) {
        let a = drift.jacobian(t, x).unwrap().unwrap();
        let f = fd_jacobian(drift, t, x).unwrap();
        let scale = a.amax().max(1.0);
        assert!((a - f).amax() < 1e-4 * scale, "{}", drift.name());
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = stream(1, &[tag::PROBE]);
        let nc = GeneralGmmTarget::new(
            vec![0.2, 0.5, 0.3],
            vec![
                DVector::from_vec(vec![1.0, 2.0]),
                DVector::from_vec(vec![-1.0, 0.5]),
                DVector::from_vec(vec![0.0, -2.0]),
            ],
            vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]),
                DMatrix::identity(2, 2) * 0.7,
                DMatrix::from_row_slice(2, 2, &[2.0, -0.4, -0.4, 1.0]),
            ],
            Some(DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8])),
        )
        .unwrap();
        let b = BimodalGmmTarget::new(vec![1.0, -2.0, 0.5], 0.3).unwrap();
        let lin_ref: Arc<dyn DriftOracle> = Arc::new(general_gmm_drift(&Schedule::linear(), &nc));
        let oracles: Vec<Box<dyn DriftOracle>> = vec![
            Box::new(general_gmm_drift(&Schedule::trig(), &nc)),
            Box::new(general_gmm_drift(&Schedule::linear(), &nc)),
            Box::new(bimodal_drift(&Schedule::trig_power(2.0).unwrap(), &b).unwrap()),
            Box::new(transfer_drift(lin_ref, &Schedule::approx_min_lip_gmm(1.5).unwrap()).unwrap()),
            Box::new(gaussian_drift(
                &Schedule::trig(),
                &GaussianTarget::diagonal(vec![3.0, 0.2]).unwrap(),
            )),
        ];
        for o in &oracles {
            for _ in 0..50 {
                let t = rng.random_range(0.05..0.95);
                let x: Vec<f64> = (0..o.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
                check_jacobian(o.as_ref(), t, &x);
            }
        }
    }

    #[test]
    fn transfer_to_linear_is_identity() {
        let b = BimodalGmmTarget::scalar(2.0, 0.3).unwrap();
        let reference: Arc<dyn DriftOracle> = Arc::new(general_gmm_drift(
            &Schedule::linear(),
            &GeneralGmmTarget::from_bimodal(&b),
        ));
        let tr = transfer_drift(reference.clone(), &Schedule::linear()).unwrap();
        let mut rng = stream(2, &[tag::PROBE]);
        for _ in 0..200 {
            let t = rng.random_range(0.0..=1.0);
            let x = rng.random_range(-4.0..4.0);
            assert!((one(&tr, t, x) - one(reference.as_ref(), t, x)).abs() < 1e-12);
        }
        let nonlinear: Arc<dyn DriftOracle> =
            Arc::new(gaussian_drift(&Schedule::trig(), &GaussianTarget::scalar(2.0).unwrap()));
        assert!(matches!(
            transfer_drift(nonlinear, &Schedule::trig()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn transfer_gaussian_to_designed() {
        let m: f64 = 0.05;
        let target = GaussianTarget::scalar(m).unwrap();
        let reference: Arc<dyn DriftOracle> = Arc::new(gaussian_drift(&Schedule::linear(), &target));
        let tr = transfer_drift(reference, &Schedule::designed_gaussian(m).unwrap()).unwrap();
        for i in 0..=100 {
            let t = 1e-3 + (1.0 - 2e-3) * i as f64 / 100.0;
            assert_abs_diff_eq!(one(&tr, t, 0.7), 0.5 * m.ln() * 0.7, epsilon = 1e-9);
        }
    }

    #[test]
    fn score_drift_round_trip() {
        let target = GaussianTarget::diagonal(vec![4.0, 0.5]).unwrap();
        let s = Schedule::designed_gaussian(0.5).unwrap();
        let drift: Arc<dyn DriftOracle> = Arc::new(gaussian_drift(&s, &target));
        let score = Arc::new(score_from_drift(drift.clone(), &s));
        let back = drift_from_score(score.clone(), &s);
        let exact = gaussian_score(&s, &target);
        let mut rng = stream(3, &[tag::PROBE]);
        for _ in 0..100 {
            let t = rng.random_range(0.01..0.99);
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let (mut a, mut b, mut c) = ([0.0; 2], [0.0; 2], [0.0; 2]);
            drift.eval(t, &x, &mut a).unwrap();
            back.eval(t, &x, &mut b).unwrap();
            score.eval(t, &x, &mut c).unwrap();
            let mut e = [0.0; 2];
            exact.eval(t, &x, &mut e).unwrap();
            for k in 0..2 {
                assert!((a[k] - b[k]).abs() < 1e-10);
                assert!((c[k] - e[k]).abs() < 1e-10);
            }
        }
        let mut o = [0.0; 2];
        assert!(matches!(
            score.eval(0.0, &[1.0, 1.0], &mut o),
            Err(Error::Domain { .. })
        ));
        assert!(matches!(back.eval(1.0, &[1.0, 1.0], &mut o), Err(Error::Domain { .. })));
    }

    #[test]
    fn linear_drift_from_exact_score() {
        let s = Schedule::linear();
        let target = GaussianTarget::scalar(1.0).unwrap();
        let from = drift_from_score(Arc::new(gaussian_score(&s, &target)), &s);
        let direct = gaussian_drift(&s, &target);
        for &t in &[0.1, 0.5, 0.9] {
            assert_abs_diff_eq!(one(&from, t, 1.3), one(&direct, t, 1.3), epsilon = 1e-10);
        }
    }

    #[test]
    fn epsilon_examples() {
        let e = optimal_epsilon(&Schedule::linear());
        assert_abs_diff_eq!(e(0.25).unwrap(), 3.0, epsilon = 1e-14);
        let e = optimal_epsilon(&Schedule::trig());
        assert_abs_diff_eq!(e(0.25).unwrap(), 4.0, epsilon = 1e-14);
        assert!(e(0.0).is_err());
    }

    #[test]
    fn ot_examples() {
        let same = ot_gaussian_drift(2.0, 2.0).unwrap();
        assert_eq!(same.coefficient(0.3), 0.0);
        assert_abs_diff_eq!(
            ot_gaussian_drift(4.0, 1.0).unwrap().coefficient(0.0),
            1.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            ot_gaussian_drift(100.0, 1.0).unwrap().coefficient(0.0),
            9.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn matrix_schedule_examples() {
        let e2 = std::f64::consts::E.powi(2);
        let d = matrix_schedule_drift(&GaussianTarget::diagonal(vec![e2, 1.0 / e2]).unwrap());
        let mut o = [0.0; 2];
        d.eval(0.3, &[2.0, 3.0], &mut o).unwrap();
        assert_abs_diff_eq!(o[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(o[1], -3.0, epsilon = 1e-14);
        let flat = matrix_schedule_drift(&GaussianTarget::diagonal(vec![1.0; 3]).unwrap());
        assert_eq!(flat.jacobian_norm(0.5, &[0.0; 3]).unwrap().unwrap(), 0.0);
    }

    #[test]
    fn spectral_norm_routes_agree() {
        let b = BimodalGmmTarget::preset(80, 0.3).unwrap();
        let d = bimodal_drift(&Schedule::trig(), &b).unwrap();
        let x = vec![0.05; 80];
        let analytic = d.jacobian_norm(0.4, &x).unwrap().unwrap();
        let power = matrix_spectral_norm(&d.jacobian(0.4, &x).unwrap().unwrap()).unwrap();
        assert!((analytic - power).abs() < 1e-6 * analytic);
        let small = bimodal_drift(&Schedule::trig(), &BimodalGmmTarget::preset(5, 0.3).unwrap()).unwrap();
        let fd = matrix_spectral_norm(&fd_jacobian(&small, 0.4, &[0.1; 5]).unwrap()).unwrap();
        let an = small.jacobian_norm(0.4, &[0.1; 5]).unwrap().unwrap();
        assert!((fd - an).abs() < 1e-6 * an);
    }

    #[test]
    fn sine_basis_drift_acts_per_mode() {
        let spec = crate::targets::GrfSpec::preset(8).unwrap();
        let target = spec.to_gaussian().unwrap();
        let s = Schedule::linear();
        let d = gaussian_drift(&s, &target);
        let mut coef = vec![0.0; 49];
        coef[2] = 1.0;
        let x = target.from_coefficients(&coef).unwrap();
        let mut out = vec![0.0; 64];
        d.eval(0.3, &x, &mut out).unwrap();
        let c = target.to_coefficients(&out).unwrap();
        let expect = d.multipliers(0.3).unwrap()[2];
        assert_abs_diff_eq!(c[2], expect, epsilon = 1e-12);
        assert!(matches!(target.basis(), Basis::Sine { .. }));
    }

    proptest! {
        #[test]
        fn bimodal_drift_is_odd_when_symmetric(x in -5.0f64..5.0, t in 0.01f64..0.99) {
            let d = bimodal_drift(&Schedule::trig(), &BimodalGmmTarget::scalar(1.5, 0.5).unwrap()).unwrap();
            prop_assert!((one(&d, t, x) + one(&d, t, -x)).abs() < 1e-14);
        }
    }
}
