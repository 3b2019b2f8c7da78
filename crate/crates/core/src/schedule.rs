//! Interpolation schedules `(alpha_t, beta_t)` on `[0, 1]`.
//!
//! Every schedule satisfies `alpha(0) = beta(1) = 1`, `alpha(1) = beta(0) = 0`.
//! All kinds except [`Schedule::Linear`] are variance preserving
//! (`alpha^2 + beta^2 = 1`), which is what the closed-form mixture drifts need.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::batch::fmt_f64;
use crate::error::{check_time, Error, Result};
use crate::interp::MonotoneCubic;

/// Below this distance from one, the designed-Gaussian closed form is
/// replaced by its second-order expansion in `log lambda*`.
const DESIGNED_SERIES_BAND: f64 = 1e-6;

/// Schedule values and derivatives at one time.
///
/// The products `alpha*alpha_dot` and `beta*beta_dot` are stored separately:
/// they stay finite at endpoints where `beta_dot` or `alpha_dot` blow up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_dot: f64,
    pub beta_dot: f64,
    pub alpha_alpha_dot: f64,
    pub beta_beta_dot: f64,
}

impl ScheduleState {
    fn from_squares(beta_sq: f64, beta_sq_dot: f64) -> Self {
        let s = beta_sq.clamp(0.0, 1.0);
        let beta = s.sqrt();
        let alpha = (1.0 - s).sqrt();
        ScheduleState {
            alpha,
            beta,
            alpha_dot: -0.5 * beta_sq_dot / alpha,
            beta_dot: 0.5 * beta_sq_dot / beta,
            alpha_alpha_dot: -0.5 * beta_sq_dot,
            beta_beta_dot: 0.5 * beta_sq_dot,
        }
    }

    fn from_trig_beta(beta: f64, beta_dot: f64) -> Self {
        let beta = beta.clamp(0.0, 1.0);
        let alpha = (1.0 - beta * beta).max(0.0).sqrt();
        let bbd = beta * beta_dot;
        ScheduleState {
            alpha,
            beta,
            alpha_dot: -bbd / alpha,
            beta_dot,
            alpha_alpha_dot: -bbd,
            beta_beta_dot: bbd,
        }
    }

    /// Optimal diffusion coefficient `alpha^2 (beta_dot/beta - alpha_dot/alpha)`.
    pub fn optimal_epsilon(&self) -> f64 {
        self.alpha * self.alpha * self.beta_dot / self.beta - self.alpha_alpha_dot
    }
}

/// Shape of `beta` for [`Schedule::TrigFromBeta`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaCurve {
    /// `beta = t^p`, `p > 0`.
    Power(f64),
}

impl BetaCurve {
    fn eval(&self, t: f64) -> Result<(f64, f64)> {
        match *self {
            BetaCurve::Power(p) => {
                if !(p > 0.0 && p.is_finite()) {
                    return Err(Error::param(format!("power exponent must be positive, got {p}")));
                }
                if p == 1.0 {
                    Ok((t, 1.0))
                } else {
                    Ok((t.powf(p), p * t.powf(p - 1.0)))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// `alpha = 1 - t`, `beta = t`.
    Linear,
    /// `beta` from a curve, `alpha = sqrt(1 - beta^2)`.
    TrigFromBeta(BetaCurve),
    /// `alpha^2 + beta^2 lambda* = (lambda*)^t` with `alpha^2 + beta^2 = 1`.
    DesignedGaussian {
        lambda_star: f64,
    },
    /// `beta = sqrt(-log(1 + (exp(-M^2) - 1) t)) / M`.
    ApproxMinLipGmm {
        scale_m: f64,
    },
    /// Piecewise-linear time dilation: slow first half, linear catch-up after.
    Dilated {
        kappa: f64,
        scale_m: f64,
    },
    Tabulated(Arc<TabulatedSchedule>),
}

impl Schedule {
    pub fn linear() -> Self {
        Schedule::Linear
    }

    /// `beta = t`, `alpha = sqrt(1 - t^2)`.
    pub fn trig() -> Self {
        Schedule::TrigFromBeta(BetaCurve::Power(1.0))
    }

    pub fn trig_power(p: f64) -> Result<Self> {
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::param(format!("power exponent must be positive, got {p}")));
        }
        Ok(Schedule::TrigFromBeta(BetaCurve::Power(p)))
    }

    pub fn designed_gaussian(lambda_star: f64) -> Result<Self> {
        if !(lambda_star > 0.0 && lambda_star.is_finite()) {
            return Err(Error::param(format!("lambda* must be positive, got {lambda_star}")));
        }
        Ok(Schedule::DesignedGaussian { lambda_star })
    }

    pub fn approx_min_lip_gmm(scale_m: f64) -> Result<Self> {
        if !(scale_m > 0.0 && scale_m.is_finite()) {
            return Err(Error::param(format!("scale M must be positive, got {scale_m}")));
        }
        Ok(Schedule::ApproxMinLipGmm { scale_m })
    }

    pub fn dilated(kappa: f64, scale_m: f64) -> Result<Self> {
        if !(kappa > 0.0 && scale_m > kappa && scale_m.is_finite()) {
            return Err(Error::param(format!(
                "dilated schedule needs 0 < kappa < M, got kappa = {kappa}, M = {scale_m}"
            )));
        }
        Ok(Schedule::Dilated { kappa, scale_m })
    }

    pub fn tabulated(table: TabulatedSchedule) -> Self {
        Schedule::Tabulated(Arc::new(table))
    }

    /// True when `alpha^2 + beta^2 = 1` holds identically.
    pub fn is_variance_preserving(&self) -> bool {
        !matches!(self, Schedule::Linear)
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Schedule::Linear)
    }

    pub fn name(&self) -> String {
        match self {
            Schedule::Linear => "linear".into(),
            Schedule::TrigFromBeta(BetaCurve::Power(p)) if *p == 1.0 => "trig".into(),
            Schedule::TrigFromBeta(BetaCurve::Power(p)) => format!("trig-power({p})"),
            Schedule::DesignedGaussian { lambda_star } => {
                format!("designed-gaussian({lambda_star:e})")
            }
            Schedule::ApproxMinLipGmm { scale_m } => format!("approx-minlip-gmm({scale_m})"),
            Schedule::Dilated { kappa, scale_m } => format!("dilated({kappa},{scale_m})"),
            Schedule::Tabulated(t) => format!("tabulated({} nodes)", t.len()),
        }
    }

    pub fn eval(&self, t: f64) -> Result<ScheduleState> {
        check_time(t, 0.0, 1.0)?;
        match self {
            Schedule::Linear => Ok(ScheduleState {
                alpha: 1.0 - t,
                beta: t,
                alpha_dot: -1.0,
                beta_dot: 1.0,
                alpha_alpha_dot: -(1.0 - t),
                beta_beta_dot: t,
            }),
            Schedule::TrigFromBeta(curve) => {
                let (b, bd) = curve.eval(t)?;
                Ok(ScheduleState::from_trig_beta(b, bd))
            }
            Schedule::DesignedGaussian { lambda_star } => {
                let (s, sd) = designed_beta_sq(*lambda_star, t)?;
                Ok(ScheduleState::from_squares(s, sd))
            }
            Schedule::ApproxMinLipGmm { scale_m } => {
                let m = *scale_m;
                if !(m > 0.0 && m.is_finite()) {
                    return Err(Error::param(format!("scale M must be positive, got {m}")));
                }
                // 1 + (e^{-M^2} - 1) t written as 1 - c t with c = 1 - e^{-M^2}
                let c = -(-m * m).exp_m1();
                let one_minus = if t == 1.0 { (-m * m).exp() } else { 1.0 - c * t };
                if t == 1.0 {
                    let bbd = c / (2.0 * m * m * one_minus);
                    return Ok(ScheduleState {
                        alpha: 0.0,
                        beta: 1.0,
                        alpha_dot: f64::NEG_INFINITY,
                        beta_dot: bbd,
                        alpha_alpha_dot: -bbd,
                        beta_beta_dot: bbd,
                    });
                }
                let g = -(-c * t).ln_1p();
                let s = g / (m * m);
                let sd = c / (m * m * one_minus);
                Ok(ScheduleState::from_squares(s, sd))
            }
            Schedule::Dilated { kappa, scale_m } => {
                let r = kappa / scale_m;
                if !(r > 0.0 && r < 1.0) {
                    return Err(Error::param("dilated schedule needs 0 < kappa < M"));
                }
                let (b, bd) = if t <= 0.5 {
                    (2.0 * r * t, 2.0 * r)
                } else {
                    (r + (1.0 - r) * (2.0 * t - 1.0), 2.0 * (1.0 - r))
                };
                Ok(ScheduleState::from_trig_beta(b, bd))
            }
            Schedule::Tabulated(table) => Ok(table.eval(t)),
        }
    }
}

/// Evaluates `(alpha, beta, alpha_dot, beta_dot)` and the endpoint-safe products.
pub fn eval_schedule(schedule: &Schedule, t: f64) -> Result<ScheduleState> {
    schedule.eval(t)
}

/// `beta^2` and its time derivative for the designed Gaussian schedule.
fn designed_beta_sq(lambda_star: f64, t: f64) -> Result<(f64, f64)> {
    if !(lambda_star > 0.0 && lambda_star.is_finite()) {
        return Err(Error::param(format!("lambda* must be positive, got {lambda_star}")));
    }
    let l = lambda_star.ln();
    if (lambda_star - 1.0).abs() < DESIGNED_SERIES_BAND {
        let s = t + 0.5 * t * (t - 1.0) * l + t * (2.0 * t - 1.0) * (t - 1.0) * l * l / 12.0;
        let sd = 1.0 + 0.5 * (2.0 * t - 1.0) * l + (6.0 * t * t - 6.0 * t + 1.0) * l * l / 12.0;
        return Ok((s, sd));
    }
    let denom = l.exp_m1();
    Ok(((t * l).exp_m1() / denom, l * (t * l).exp() / denom))
}

/// A variance-preserving schedule given by samples of `beta` on a time grid.
///
/// Interpolation runs on `beta^2` with a monotone cubic, so `beta` is
/// monotone, `beta*beta_dot` is continuous, and square-root growth at `t = 0`
/// is represented exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedSchedule {
    t_grid: Vec<f64>,
    beta_grid: Vec<f64>,
    spline: MonotoneCubic,
}

impl TabulatedSchedule {
    pub fn new(t_grid: Vec<f64>, beta_grid: Vec<f64>) -> Result<Self> {
        Self::build(t_grid, beta_grid, None)
    }

    /// Like [`TabulatedSchedule::new`] with known `d(beta^2)/dt` at the nodes;
    /// non-finite entries fall back to estimated slopes.
    pub fn with_beta_sq_slopes(t_grid: Vec<f64>, beta_grid: Vec<f64>, slopes: &[f64]) -> Result<Self> {
        Self::build(t_grid, beta_grid, Some(slopes))
    }

    fn build(mut t_grid: Vec<f64>, mut beta_grid: Vec<f64>, slopes: Option<&[f64]>) -> Result<Self> {
        const EDGE_TOL: f64 = 1e-12;
        let n = t_grid.len();
        if n < 2 || beta_grid.len() != n {
            return Err(Error::Shape(format!(
                "tabulated schedule needs matching grids of length >= 2 (got {} and {})",
                n,
                beta_grid.len()
            )));
        }
        if t_grid[0].abs() > EDGE_TOL || (t_grid[n - 1] - 1.0).abs() > EDGE_TOL {
            return Err(Error::param("time grid must start at 0 and end at 1"));
        }
        if beta_grid[0].abs() > EDGE_TOL || (beta_grid[n - 1] - 1.0).abs() > EDGE_TOL {
            return Err(Error::param("beta grid must start at 0 and end at 1"));
        }
        t_grid[0] = 0.0;
        t_grid[n - 1] = 1.0;
        beta_grid[0] = 0.0;
        beta_grid[n - 1] = 1.0;
        if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("time grid must be strictly increasing"));
        }
        if beta_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::DegenerateSchedule(
                "beta grid must be strictly increasing".into(),
            ));
        }
        let sq: Vec<f64> = beta_grid.iter().map(|b| b * b).collect();
        let spline = match slopes {
            Some(s) => MonotoneCubic::with_slopes(t_grid.clone(), sq, s)?,
            None => MonotoneCubic::new(t_grid.clone(), sq)?,
        };
        Ok(TabulatedSchedule {
            t_grid,
            beta_grid,
            spline,
        })
    }

    pub fn len(&self) -> usize {
        self.t_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_grid.is_empty()
    }

    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    pub fn beta_grid(&self) -> &[f64] {
        &self.beta_grid
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.spline.eval(t).0.clamp(0.0, 1.0).sqrt()
    }

    fn eval(&self, t: f64) -> ScheduleState {
        let (s, sd) = self.spline.eval(t);
        let mut st = ScheduleState::from_squares(s, sd);
        if st.beta == 0.0 && sd == 0.0 {
            // beta ~ c t near a flat start: beta_dot = lim sqrt(s(t + h)) / h
            let h = 1e-7;
            st.beta_dot = self.spline.eval(t + h).0.max(0.0).sqrt() / h;
        }
        st
    }

    /// Writes the `t,beta` CSV form.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,beta")?;
        for (t, b) in self.t_grid.iter().zip(&self.beta_grid) {
            writeln!(w, "{},{}", fmt_f64(*t), fmt_f64(*b))?;
        }
        Ok(())
    }

    /// Reads the `t,beta` CSV form; monotonicity and boundary values are validated.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty schedule file".into()))??;
        if header.trim() != "t,beta" {
            return Err(Error::Parse(format!(
                "expected header `t,beta`, found `{}`",
                header.trim()
            )));
        }
        let mut t = Vec::new();
        let mut b = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut cells = line.split(',');
            let parse = |c: Option<&str>| -> Result<f64> {
                c.ok_or_else(|| Error::Parse(format!("line {}: missing column", lineno + 2)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))
            };
            t.push(parse(cells.next())?);
            b.push(parse(cells.next())?);
            if cells.next().is_some() {
                return Err(Error::Parse(format!("line {}: expected two columns", lineno + 2)));
            }
        }
        TabulatedSchedule::new(t, b)
    }
}

/// How the optimal-schedule quadrature weights `G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// `t(beta) ∝ ∫_0^beta u G(u)^(1/2k) du`, for `||∇b||^2 = beta_dot^2 beta^2 G(beta)`.
    Mixture,
    /// `t(beta) ∝ ∫_0^beta G(u)^(1/2k) du`, for `||∇b||^2 = beta_dot^2 G(beta)`.
    General,
}

/// Default number of `u` nodes for the optimal-schedule quadrature.
pub const DEFAULT_OPTIMIZER_GRID: usize = 512;

/// Cumulative composite Simpson integral on a uniform grid with spacing `h`.
///
/// Even nodes use the Simpson pair rule; odd nodes add the parabolic
/// integral over the last interval.
pub fn cumulative_simpson(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    if n == 2 {
        out[1] = 0.5 * h * (f[0] + f[1]);
        return out;
    }
    out[1] = h / 12.0 * (5.0 * f[0] + 8.0 * f[1] - f[2]);
    for i in 2..n {
        out[i] = if i % 2 == 0 {
            out[i - 2] + h / 3.0 * (f[i - 2] + 4.0 * f[i - 1] + f[i])
        } else {
            out[i - 1] + h / 12.0 * (-f[i - 2] + 8.0 * f[i - 1] + 5.0 * f[i])
        };
    }
    out
}

/// Refinement factor of the initial quadrature grid relative to the output grid.
const OPTIMIZER_REFINE: usize = 8;
/// Per-unit-length tolerance of the adaptive quadrature, relative to the total weight.
const OPTIMIZER_QUAD_TOL: f64 = 1e-11;
const OPTIMIZER_MAX_DEPTH: u32 = 40;

/// One accepted quadrature interval `[a, b]` with weights at `a`, the midpoint and `b`.
#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    wa: f64,
    wm: f64,
    wb: f64,
    integral: f64,
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn refine_panel<W>(weight: &W, p: Panel, tol: f64, depth: u32, out: &mut Vec<Panel>) -> Result<()>
where
    W: Fn(f64) -> Result<(f64, f64)>,
{
    let m = 0.5 * (p.a + p.b);
    let (wl, _) = weight(0.5 * (p.a + m))?;
    let (wr, _) = weight(0.5 * (m + p.b))?;
    let left = simpson(p.a, m, p.wa, wl, p.wm);
    let right = simpson(m, p.b, p.wm, wr, p.wb);
    let diff = left + right - p.integral;
    if depth >= OPTIMIZER_MAX_DEPTH || diff.abs() <= 15.0 * tol * (p.b - p.a) {
        out.push(Panel {
            integral: left + right + diff / 15.0,
            ..p
        });
        return Ok(());
    }
    let l = Panel {
        a: p.a,
        b: m,
        wa: p.wa,
        wm: wl,
        wb: p.wm,
        integral: left,
    };
    let r = Panel {
        a: m,
        b: p.b,
        wa: p.wm,
        wm: wr,
        wb: p.wb,
        integral: right,
    };
    refine_panel(weight, l, tol, depth + 1, out)?;
    refine_panel(weight, r, tol, depth + 1, out)
}

/// Solves the Beltrami first integral `beta_dot * beta^a * G(beta)^(1/2k) = const`
/// for a variance-preserving schedule.
///
/// The cumulative weight `int_0^u w` is built by adaptive Simpson starting
/// from a uniform grid of `[0, 1]` (panels are refined in parallel) and
/// normalized into `t(beta)`. The returned table has `grid_size` nodes
/// spread evenly in `(beta + t) / 2`, so neither a flat nor a steep stretch
/// of `G` leaves gaps in `t`.
pub fn solve_optimal_schedule<G>(g: G, k: u32, grid_size: usize, weight: WeightMode) -> Result<TabulatedSchedule>
where
    G: Fn(f64) -> f64 + Sync,
{
    if k == 0 {
        return Err(Error::param("k must be a positive integer"));
    }
    if grid_size < 3 {
        return Err(Error::param("optimizer grid needs at least 3 nodes"));
    }
    let exponent = 1.0 / (2.0 * k as f64);
    let weight_at = |ui: f64| -> Result<(f64, f64)> {
        let v = g(ui);
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Oracle(format!("G({ui}) = {v} is negative or non-finite")));
        }
        let r = v.powf(exponent);
        Ok(match weight {
            WeightMode::Mixture => (ui * r, r),
            WeightMode::General => (r, r),
        })
    };

    let coarse = (grid_size - 1) * OPTIMIZER_REFINE;
    let h = 1.0 / coarse as f64;
    let nodes: Vec<f64> = (0..=2 * coarse).map(|i| (i as f64 * 0.5 * h).min(1.0)).collect();
    let wn: Vec<f64> = nodes
        .par_iter()
        .map(|&ui| weight_at(ui).map(|p| p.0))
        .collect::<Result<_>>()?;
    let initial: Vec<Panel> = (0..coarse)
        .map(|i| {
            let (a, b) = (nodes[2 * i], nodes[2 * i + 2]);
            let (wa, wm, wb) = (wn[2 * i], wn[2 * i + 1], wn[2 * i + 2]);
            Panel {
                a,
                b,
                wa,
                wm,
                wb,
                integral: simpson(a, b, wa, wm, wb),
            }
        })
        .collect();
    let estimate: f64 = initial.iter().map(|p| p.integral).sum();
    if !(estimate > 0.0 && estimate.is_finite()) {
        return Err(Error::DegenerateSchedule("G vanishes on all of [0, 1]".into()));
    }
    let tol = OPTIMIZER_QUAD_TOL * estimate;
    let panels: Vec<Panel> = initial
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::new();
            refine_panel(&weight_at, p, tol, 0, &mut out)?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut cum = Vec::with_capacity(panels.len() + 1);
    cum.push(0.0);
    for p in &panels {
        cum.push(cum[cum.len() - 1] + p.integral);
    }
    let total = cum[panels.len()];
    if let Some(p) = panels
        .iter()
        .zip(cum.windows(2))
        .find(|(_, c)| !(c[1] > c[0]))
        .map(|(p, _)| p)
    {
        return Err(Error::DegenerateSchedule(format!(
            "cumulative weight is flat on [{}, {}]; G vanishes on a set of positive measure",
            p.a, p.b
        )));
    }

    let sigma_at = |i: usize| {
        let u = if i == 0 { 0.0 } else { panels[i - 1].b };
        0.5 * (u + cum[i] / total)
    };
    let mut u_out = Vec::with_capacity(grid_size);
    let mut t_out = Vec::with_capacity(grid_size);
    let mut r_out = Vec::with_capacity(grid_size);
    let mut seg = 0;
    for j in 0..grid_size {
        if j == 0 || j == grid_size - 1 {
            let uj = if j == 0 { 0.0 } else { 1.0 };
            u_out.push(uj);
            t_out.push(if j == 0 { 0.0 } else { 1.0 });
            r_out.push(weight_at(uj)?.1);
            continue;
        }
        let target = j as f64 / (grid_size - 1) as f64;
        while sigma_at(seg + 1) < target {
            seg += 1;
        }
        let p = panels[seg];
        let (s0, s1) = (sigma_at(seg), sigma_at(seg + 1));
        let frac = (target - s0) / (s1 - s0);
        let uj = p.a + frac * (p.b - p.a);
        let (w_mid, _) = weight_at(0.5 * (p.a + uj))?;
        let (w_j, r_j) = weight_at(uj)?;
        u_out.push(uj);
        t_out.push((cum[seg] + simpson(p.a, uj, p.wa, w_mid, w_j)) / total);
        r_out.push(r_j);
    }
    // d(beta^2)/dt = 2 u (dt/du)^{-1} = 2 u total / w(u)
    let slopes: Vec<f64> = u_out
        .iter()
        .zip(&r_out)
        .map(|(ui, r)| match weight {
            WeightMode::Mixture => 2.0 * total / r,
            WeightMode::General => 2.0 * ui * total / r,
        })
        .collect();
    TabulatedSchedule::with_beta_sq_slopes(t_out, u_out, &slopes)
}

/// First-integral residuals of a schedule, centered by their mean.
#[derive(Debug, Clone)]
pub struct ElResidual {
    pub t: Vec<f64>,
    /// `beta_dot * beta^a * G(beta)^(1/2k)` minus its mean.
    pub residual: Vec<f64>,
    pub mean: f64,
}

impl ElResidual {
    pub fn max_abs(&self) -> f64 {
        self.residual.iter().fold(0.0, |a, r| a.max(r.abs()))
    }

    /// `max |residual| / |mean|`.
    pub fn max_relative(&self) -> f64 {
        self.max_abs() / self.mean.abs()
    }
}

/// Evaluates the Beltrami first integral along `schedule`; an optimal
/// schedule for `g` makes it constant. Times where `beta_dot` is infinite
/// (e.g. `t = 0` for square-root starts) should be left out of `t_grid`.
pub fn euler_lagrange_residual<G>(
    schedule: &Schedule,
    g: G,
    k: u32,
    weight: WeightMode,
    t_grid: &[f64],
) -> Result<ElResidual>
where
    G: Fn(f64) -> f64,
{
    if k == 0 {
        return Err(Error::param("k must be a positive integer"));
    }
    if t_grid.is_empty() {
        return Err(Error::param("empty time grid"));
    }
    let exponent = 1.0 / (2.0 * k as f64);
    let mut values = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let st = schedule.eval(t)?;
        let gv = g(st.beta);
        if !(gv.is_finite() && gv >= 0.0) {
            return Err(Error::Oracle(format!(
                "G({}) = {gv} is negative or non-finite",
                st.beta
            )));
        }
        let speed = match weight {
            WeightMode::Mixture => st.beta_beta_dot,
            WeightMode::General => st.beta_dot,
        };
        values.push(speed * gv.powf(exponent));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(ElResidual {
        t: t_grid.to_vec(),
        residual: values.iter().map(|v| v - mean).collect(),
        mean,
    })
}

/// Textual schedule description: `linear`, `trig`, `trig-power:P`,
/// `designed-gaussian:LAMBDA`, `approx-minlip-gmm:M` or `dilated:KAPPA:M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleSpec {
    Linear,
    Trig,
    TrigPower(f64),
    DesignedGaussian(f64),
    ApproxMinLipGmm(f64),
    Dilated(f64, f64),
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<Schedule> {
        match *self {
            ScheduleSpec::Linear => Ok(Schedule::linear()),
            ScheduleSpec::Trig => Ok(Schedule::trig()),
            ScheduleSpec::TrigPower(p) => Schedule::trig_power(p),
            ScheduleSpec::DesignedGaussian(l) => Schedule::designed_gaussian(l),
            ScheduleSpec::ApproxMinLipGmm(m) => Schedule::approx_min_lip_gmm(m),
            ScheduleSpec::Dilated(k, m) => Schedule::dilated(k, m),
        }
    }
}

impl std::fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleSpec::Linear => write!(f, "linear"),
            ScheduleSpec::Trig => write!(f, "trig"),
            ScheduleSpec::TrigPower(p) => write!(f, "trig-power:{p}"),
            ScheduleSpec::DesignedGaussian(l) => write!(f, "designed-gaussian:{l}"),
            ScheduleSpec::ApproxMinLipGmm(m) => write!(f, "approx-minlip-gmm:{m}"),
            ScheduleSpec::Dilated(k, m) => write!(f, "dilated:{k}:{m}"),
        }
    }
}

impl std::str::FromStr for ScheduleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let kind = parts.next().unwrap_or_default();
        let args: Vec<f64> = parts
            .map(|a| {
                a.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad number '{a}' in schedule '{s}'")))
            })
            .collect::<Result<_>>()?;
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(Error::Parse(format!(
                    "schedule '{kind}' takes {n} argument(s), got {}",
                    args.len()
                )))
            }
        };
        let spec = match kind {
            "linear" => arity(0).map(|_| ScheduleSpec::Linear),
            "trig" => arity(0).map(|_| ScheduleSpec::Trig),
            "trig-power" => arity(1).map(|_| ScheduleSpec::TrigPower(args[0])),
            "designed-gaussian" => arity(1).map(|_| ScheduleSpec::DesignedGaussian(args[0])),
            "approx-minlip-gmm" => arity(1).map(|_| ScheduleSpec::ApproxMinLipGmm(args[0])),
            "dilated" => arity(2).map(|_| ScheduleSpec::Dilated(args[0], args[1])),
            _ => Err(Error::Parse(format!("unknown schedule kind '{kind}'"))),
        }?;
        spec.build()?;
        Ok(spec)
    }
}

impl serde::Serialize for ScheduleSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for ScheduleSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn all_kinds() -> Vec<Schedule> {
        let table = TabulatedSchedule::new(vec![0.0, 0.2, 0.5, 0.8, 1.0], vec![0.0, 0.3, 0.6, 0.85, 1.0]).unwrap();
        vec![
            Schedule::linear(),
            Schedule::trig(),
            Schedule::trig_power(2.0).unwrap(),
            Schedule::designed_gaussian(0.01).unwrap(),
            Schedule::designed_gaussian(1.0 + 1e-8).unwrap(),
            Schedule::designed_gaussian(50.0).unwrap(),
            Schedule::approx_min_lip_gmm(2.0).unwrap(),
            Schedule::approx_min_lip_gmm(1000f64.sqrt()).unwrap(),
            Schedule::dilated(1.0, 5.0).unwrap(),
            Schedule::tabulated(table),
        ]
    }

    #[test]
    fn linear_quarter() {
        let s = Schedule::linear().eval(0.25).unwrap();
        assert_eq!((s.alpha, s.beta, s.alpha_dot, s.beta_dot), (0.75, 0.25, -1.0, 1.0));
    }

    #[test]
    fn designed_gaussian_identity_at_half() {
        let ls = E.powi(-2);
        let s = Schedule::designed_gaussian(ls).unwrap().eval(0.5).unwrap();
        assert_abs_diff_eq!(s.alpha * s.alpha + s.beta * s.beta * ls, E.recip(), epsilon = 1e-15);
    }

    #[test]
    fn approx_min_lip_boundaries() {
        let s = Schedule::approx_min_lip_gmm(2.0).unwrap();
        assert_eq!(s.eval(0.0).unwrap().beta, 0.0);
        assert_abs_diff_eq!(s.eval(1.0).unwrap().beta, 1.0, epsilon = 1e-15);
        // e^{-M^2} underflows for M^2 = 1000; the endpoint must still be exact
        let s = Schedule::approx_min_lip_gmm(1000f64.sqrt()).unwrap();
        assert_eq!(s.eval(1.0).unwrap().beta, 1.0);
        assert!(s.eval(1.0 - 1e-3).unwrap().beta.is_finite());
    }

    #[test]
    fn domain_and_parameter_errors() {
        assert!(matches!(Schedule::linear().eval(1.5), Err(Error::Domain { .. })));
        assert!(matches!(Schedule::linear().eval(-1e-9), Err(Error::Domain { .. })));
        assert!(matches!(Schedule::designed_gaussian(0.0), Err(Error::Parameter(_))));
        assert!(matches!(
            Schedule::DesignedGaussian { lambda_star: -1.0 }.eval(0.5),
            Err(Error::Parameter(_))
        ));
        assert!(Schedule::dilated(5.0, 5.0).is_err());
    }

    #[test]
    fn boundary_conditions_hold_for_every_kind() {
        for s in all_kinds() {
            let a = s.eval(0.0).unwrap();
            let b = s.eval(1.0).unwrap();
            assert_abs_diff_eq!(a.alpha, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(a.beta, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(b.alpha, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(b.beta, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn designed_series_matches_closed_form_across_the_band() {
        for &ls in &[1.0 - 2e-6, 1.0 + 2e-6] {
            for &t in &[0.1, 0.5, 0.9] {
                let l = f64::ln(ls);
                let series_s = t + 0.5 * t * (t - 1.0) * l + t * (2.0 * t - 1.0) * (t - 1.0) * l * l / 12.0;
                let (closed, _) = designed_beta_sq(ls, t).unwrap();
                assert_abs_diff_eq!(series_s, closed, epsilon = 1e-14);
            }
        }
        // the band itself: behaves like beta^2 = t
        let s = Schedule::designed_gaussian(1.0).unwrap().eval(0.3).unwrap();
        assert_abs_diff_eq!(s.beta * s.beta, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for s in all_kinds() {
            for &t in &[0.13, 0.37, 0.61, 0.87] {
                let st = s.eval(t).unwrap();
                let p = s.eval(t + h).unwrap();
                let m = s.eval(t - h).unwrap();
                let fd_b = (p.beta - m.beta) / (2.0 * h);
                let fd_a = (p.alpha - m.alpha) / (2.0 * h);
                assert!(
                    (fd_b - st.beta_dot).abs() < 1e-5 * (1.0 + st.beta_dot.abs()),
                    "{}: {fd_b} vs {}",
                    s.name(),
                    st.beta_dot
                );
                assert!(
                    (fd_a - st.alpha_dot).abs() < 1e-5 * (1.0 + st.alpha_dot.abs()),
                    "{}",
                    s.name()
                );
            }
        }
    }

    #[test]
    fn approx_min_lip_solves_its_ode() {
        // -b'^2 b - b'' b^2 + 2 b'^2 b^3 M^2 = 0, i.e. f'' = M^2 f'^2 with f = beta^2
        let m = 2.0;
        let s = Schedule::approx_min_lip_gmm(m).unwrap();
        let h = 1e-4;
        let mut t = 0.05;
        while t <= 0.95 {
            let b = s.eval(t).unwrap();
            let bp = s.eval(t + h).unwrap().beta;
            let bm = s.eval(t - h).unwrap().beta;
            let bdd = (bp - 2.0 * b.beta + bm) / (h * h);
            let bd = b.beta_dot;
            let r = -bd * bd * b.beta - bdd * b.beta * b.beta + 2.0 * bd * bd * b.beta.powi(3) * m * m;
            let scale = bd * bd * b.beta * (1.0 + 2.0 * b.beta * b.beta * m * m);
            assert!((r / scale).abs() < 1e-4, "t = {t}: residual {r}");
            t += 0.05;
        }
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(t in 0.0f64..=1.0, dt in 1e-4f64..0.05) {
            for s in all_kinds() {
                let a = s.eval(t).unwrap();
                let b = s.eval((t + dt).min(1.0)).unwrap();
                prop_assert!(b.beta >= a.beta - 1e-12);
                prop_assert!(b.alpha <= a.alpha + 1e-12);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&a.beta));
                if s.is_variance_preserving() {
                    prop_assert!((a.alpha * a.alpha + a.beta * a.beta - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn designed_variance_interpolates_log_linearly(t in 0.0f64..=1.0, ls in 1e-6f64..20.0) {
            let s = Schedule::designed_gaussian(ls).unwrap().eval(t).unwrap();
            let lhs = s.alpha * s.alpha + s.beta * s.beta * ls;
            prop_assert!((lhs - ls.powf(t)).abs() < 1e-12 * ls.powf(t).max(1.0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn optimizer_recovers_designed_gaussian(log_ls in -10.0f64..-0.1) {
            let ls = log_ls.exp();
            let g = |u: f64| (u * (ls - 1.0) / (1.0 + u * u * (ls - 1.0))).powi(2);
            let solved = Schedule::tabulated(solve_optimal_schedule(g, 1, 257, WeightMode::General).unwrap());
            let exact = Schedule::designed_gaussian(ls).unwrap();
            for i in 0..=200 {
                let t = i as f64 / 200.0;
                let d = (solved.eval(t).unwrap().beta - exact.eval(t).unwrap().beta).abs();
                prop_assert!(d < 1e-6, "lambda = {}, t = {}: {}", ls, t, d);
            }
        }
    }

    #[test]
    fn constant_g_gives_closed_form_schedules() {
        let sq = solve_optimal_schedule(|_| 3.0, 1, 513, WeightMode::Mixture).unwrap();
        let lin = solve_optimal_schedule(|_| 3.0, 1, 513, WeightMode::General).unwrap();
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            assert_abs_diff_eq!(sq.beta(t), t.sqrt(), epsilon = 1e-9);
            assert_abs_diff_eq!(lin.beta(t), t, epsilon = 1e-9);
        }
    }

    #[test]
    fn optimizer_is_scale_invariant() {
        let g = |u: f64| 1.0 + 4.0 * (3.0 * u).sin().powi(2);
        let a = solve_optimal_schedule(g, 2, 257, WeightMode::Mixture).unwrap();
        let b = solve_optimal_schedule(|u| 1234.5 * g(u), 2, 257, WeightMode::Mixture).unwrap();
        for i in 0..=50 {
            let t = i as f64 / 50.0;
            assert_abs_diff_eq!(a.beta(t), b.beta(t), epsilon = 1e-9);
        }
    }

    #[test]
    fn optimizer_errors() {
        assert!(matches!(
            solve_optimal_schedule(|u| if u > 0.5 { -1.0 } else { 1.0 }, 1, 65, WeightMode::General),
            Err(Error::Oracle(_))
        ));
        assert!(matches!(
            solve_optimal_schedule(|_| f64::NAN, 1, 65, WeightMode::General),
            Err(Error::Oracle(_))
        ));
        assert!(matches!(
            solve_optimal_schedule(
                |u| if (0.2..0.6).contains(&u) { 0.0 } else { 1.0 },
                1,
                65,
                WeightMode::General
            ),
            Err(Error::DegenerateSchedule(_))
        ));
        assert!(solve_optimal_schedule(|_| 1.0, 0, 65, WeightMode::General).is_err());
    }

    #[test]
    fn residual_vanishes_for_sqrt_schedule_with_flat_g() {
        let s = Schedule::trig_power(0.5).unwrap();
        let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        let r = euler_lagrange_residual(&s, |_| 1.0, 1, WeightMode::Mixture, &grid).unwrap();
        assert!(r.max_abs() < 1e-14);
        assert_abs_diff_eq!(r.mean, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let table = solve_optimal_schedule(|u| 1.0 + u, 1, 33, WeightMode::General).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,beta\n"));
        let back = TabulatedSchedule::read_csv(&buf[..]).unwrap();
        assert_eq!(back.t_grid(), table.t_grid());
        assert_eq!(back.beta_grid(), table.beta_grid());

        let bad = "t,beta\n0,0\n0.5,0.7\n0.6,0.6\n1,1\n";
        assert!(TabulatedSchedule::read_csv(bad.as_bytes()).is_err());
        let bad_header = "time,b\n0,0\n1,1\n";
        assert!(matches!(
            TabulatedSchedule::read_csv(bad_header.as_bytes()),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn tabulated_beta_dot_positive_at_interior_nodes() {
        let table = solve_optimal_schedule(|u| (1.0 + 10.0 * u * u).powi(2), 1, 129, WeightMode::Mixture).unwrap();
        let s = Schedule::tabulated(table.clone());
        for &t in &table.t_grid()[1..table.len() - 1] {
            assert!(s.eval(t).unwrap().beta_dot > 0.0);
        }
    }

    #[test]
    fn epsilon_of_linear_and_trig() {
        for &t in &[0.1, 0.4, 0.9] {
            let e = Schedule::linear().eval(t).unwrap().optimal_epsilon();
            assert_abs_diff_eq!(e, (1.0 - t) / t, epsilon = 1e-12);
            let e = Schedule::trig().eval(t).unwrap().optimal_epsilon();
            assert_abs_diff_eq!(e, 1.0 / t, epsilon = 1e-12);
        }
    }

    #[test]
    fn schedule_spec_round_trip() {
        for s in [
            "linear",
            "trig",
            "trig-power:2",
            "designed-gaussian:0.01",
            "approx-minlip-gmm:5",
            "dilated:1:5",
        ] {
            let spec: ScheduleSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
            spec.build().unwrap();
        }
        assert!("dilated:5:1".parse::<ScheduleSpec>().is_err());
        assert!("cosine".parse::<ScheduleSpec>().is_err());
        assert!("trig:1".parse::<ScheduleSpec>().is_err());
    }
}
