//! Target distributions and the unit-noise endpoint.
//!
//! Sampling is parallel over rows. Row `i` of a target batch draws from the
//! stream `(seed, TARGET, i)` and row `i` of a noise batch from
//! `(seed, NOISE, i)`; grid-valued targets use one stream per grid row
//! `(seed, tag, i, j)`, drawing along the row. Low modes therefore receive
//! the same normals at every resolution.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::batch::SampleBatch;
use crate::error::{check_time, Error, Result};
use crate::rng::{stream, tag};
use crate::schedule::Schedule;
use crate::transform::SineTransform2d;

/// Orthonormal frame in which a Gaussian covariance is diagonal.
#[derive(Debug, Clone)]
pub enum Basis {
    Identity,
    /// Columns are eigenvectors.
    Explicit(DMatrix<f64>),
    /// Dirichlet sine modes of an `n x n` grid; states are grid fields of
    /// length `n*n` and eigenvalues are packed over modes `1 <= j, k < n`
    /// as `(j-1)*(n-1) + (k-1)`.
    Sine {
        n: usize,
    },
}

/// Centered Gaussian `N(0, U diag(lambda) U^T)`.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    eigenvalues: Vec<f64>,
    basis: Basis,
    sine: Option<SineTransform2d>,
}

impl GaussianTarget {
    pub fn new(eigenvalues: Vec<f64>, basis: Basis) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::param("Gaussian target needs at least one eigenvalue"));
        }
        if let Some(v) = eigenvalues.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::param(format!(
                "eigenvalues must be positive and finite, got {v}"
            )));
        }
        let d = eigenvalues.len();
        let mut sine = None;
        match &basis {
            Basis::Identity => {}
            Basis::Explicit(u) => {
                if u.nrows() != d || u.ncols() != d {
                    return Err(Error::Shape(format!(
                        "basis is {}x{}, expected {d}x{d}",
                        u.nrows(),
                        u.ncols()
                    )));
                }
                let defect = (u.transpose() * u - DMatrix::<f64>::identity(d, d)).amax();
                if defect > 1e-10 {
                    return Err(Error::param(format!(
                        "basis is not orthogonal (|U^T U - I| = {defect:e})"
                    )));
                }
            }
            Basis::Sine { n } => {
                if *n < 2 || (n - 1) * (n - 1) != d {
                    return Err(Error::Shape(format!(
                        "sine basis on an {n} x {n} grid needs {} eigenvalues, got {d}",
                        n.saturating_sub(1).pow(2)
                    )));
                }
                sine = Some(SineTransform2d::new(*n)?);
            }
        }
        Ok(GaussianTarget {
            eigenvalues,
            basis,
            sine,
        })
    }

    /// Diagonal covariance in the standard basis.
    pub fn diagonal(eigenvalues: Vec<f64>) -> Result<Self> {
        Self::new(eigenvalues, Basis::Identity)
    }

    pub fn scalar(variance: f64) -> Result<Self> {
        Self::new(vec![variance], Basis::Identity)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        match self.basis {
            Basis::Sine { n } => n * n,
            _ => self.eigenvalues.len(),
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Coordinates of `x` in the eigenbasis (packed like the eigenvalues).
    pub fn to_coefficients(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(x.len(), self.dim())?;
        Ok(match &self.basis {
            Basis::Identity => x.to_vec(),
            Basis::Explicit(u) => (u.transpose() * DVector::from_column_slice(x)).as_slice().to_vec(),
            Basis::Sine { n } => {
                let mut f = x.to_vec();
                self.sine.as_ref().expect("sine plan").apply(&mut f)?;
                pack_interior(&f, *n)
            }
        })
    }

    /// Inverse of [`GaussianTarget::to_coefficients`].
    pub fn from_coefficients(&self, c: &[f64]) -> Result<Vec<f64>> {
        check_len(c.len(), self.eigenvalues.len())?;
        Ok(match &self.basis {
            Basis::Identity => c.to_vec(),
            Basis::Explicit(u) => (u * DVector::from_column_slice(c)).as_slice().to_vec(),
            Basis::Sine { n } => {
                let mut f = unpack_interior(c, *n);
                self.sine.as_ref().expect("sine plan").apply(&mut f)?;
                f
            }
        })
    }

    /// Applies `U diag(f(lambda_j)) U^T` to `x`.
    pub fn apply_spectral<F: Fn(usize) -> f64>(&self, x: &[f64], f: F, out: &mut [f64]) -> Result<()> {
        check_len(out.len(), self.dim())?;
        if let Basis::Identity = self.basis {
            check_len(x.len(), self.dim())?;
            for (j, (o, xi)) in out.iter_mut().zip(x).enumerate() {
                *o = f(j) * xi;
            }
            return Ok(());
        }
        let mut c = self.to_coefficients(x)?;
        for (j, cj) in c.iter_mut().enumerate() {
            *cj *= f(j);
        }
        out.copy_from_slice(&self.from_coefficients(&c)?);
        Ok(())
    }

    fn fill_sample(&self, rng_row: impl Fn(Option<usize>) -> ChaCha8Rng, out: &mut [f64]) -> Result<()> {
        let mut c = match self.basis {
            Basis::Sine { n } => grid_normals(n, &rng_row),
            _ => {
                let mut rng = rng_row(None);
                (0..self.eigenvalues.len())
                    .map(|_| rng.sample(StandardNormal))
                    .collect()
            }
        };
        for (cj, l) in c.iter_mut().zip(&self.eigenvalues) {
            *cj *= l.sqrt();
        }
        if let Basis::Identity = self.basis {
            out.copy_from_slice(&c);
        } else {
            out.copy_from_slice(&self.from_coefficients(&c)?);
        }
        Ok(())
    }
}

/// Packed interior normals for an `n x n` grid, one stream per mode row.
pub(crate) fn grid_normals(n: usize, rng_row: &impl Fn(Option<usize>) -> ChaCha8Rng) -> Vec<f64> {
    let mut c = Vec::with_capacity((n - 1) * (n - 1));
    for j in 1..n {
        let mut rng = rng_row(Some(j));
        for _ in 1..n {
            c.push(rng.sample(StandardNormal));
        }
    }
    c
}

fn check_len(got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Shape(format!("expected length {want}, got {got}")))
    }
}

/// Interior entries `(j, k)`, `1 <= j, k < n`, of an `n*n` array in packed order.
pub fn pack_interior(field: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((n - 1) * (n - 1));
    for j in 1..n {
        out.extend_from_slice(&field[j * n + 1..(j + 1) * n]);
    }
    out
}

/// Inverse of [`pack_interior`]; boundary entries are zero.
pub fn unpack_interior(packed: &[f64], n: usize) -> Vec<f64> {
    let mut f = vec![0.0; n * n];
    for j in 1..n {
        f[j * n + 1..(j + 1) * n].copy_from_slice(&packed[(j - 1) * (n - 1)..j * (n - 1)]);
    }
    f
}

/// `p N(r, I) + (1 - p) N(-r, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BimodalGmmTarget {
    r: Vec<f64>,
    p: f64,
    h: f64,
}

impl BimodalGmmTarget {
    pub fn new(r: Vec<f64>, p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::param(format!("mode weight p must lie in (0, 1), got {p}")));
        }
        if r.is_empty() || r.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("separation vector must be non-empty and finite"));
        }
        let h = 0.5 * (p / (1.0 - p)).ln();
        Ok(BimodalGmmTarget { r, p, h })
    }

    /// One-dimensional mixture with modes at `+-m`.
    pub fn scalar(m: f64, p: f64) -> Result<Self> {
        Self::new(vec![m], p)
    }

    /// `r = (1, ..., 1)`, so `|r| = sqrt(d)`.
    pub fn preset(d: usize, p: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::param("dimension must be positive"));
        }
        Self::new(vec![1.0; d], p)
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Logit with `p = e^h / (e^h + e^-h)`.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn r_norm_sq(&self) -> f64 {
        self.r.iter().map(|v| v * v).sum()
    }

    fn fill_sample(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let u: f64 = rng.random();
        let sign = if u < self.p { 1.0 } else { -1.0 };
        for (o, r) in out.iter_mut().zip(&self.r) {
            let z: f64 = rng.sample(StandardNormal);
            *o = sign * r + z;
        }
    }
}

/// `sum_j p_j N(m_j, C_j)` paired with noise `N(0, C_0)`.
#[derive(Debug, Clone)]
pub struct GeneralGmmTarget {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    noise_cov: DMatrix<f64>,
    chol: Vec<DMatrix<f64>>,
    noise_chol: DMatrix<f64>,
}

impl GeneralGmmTarget {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
        noise_cov: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let j = weights.len();
        if j == 0 || means.len() != j || covs.len() != j {
            return Err(Error::Shape(format!(
                "need matching component lists, got {} weights, {} means, {} covariances",
                j,
                means.len(),
                covs.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param("component weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::param(format!("component weights sum to {total}, not 1")));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::param("dimension must be positive"));
        }
        let noise_cov = noise_cov.unwrap_or_else(|| DMatrix::identity(d, d));
        let factor = |c: &DMatrix<f64>, what: &str| -> Result<DMatrix<f64>> {
            if c.nrows() != d || c.ncols() != d {
                return Err(Error::Shape(format!(
                    "{what} is {}x{}, expected {d}x{d}",
                    c.nrows(),
                    c.ncols()
                )));
            }
            if (c - c.transpose()).amax() > 1e-12 * c.amax().max(1.0) {
                return Err(Error::param(format!("{what} is not symmetric")));
            }
            Cholesky::new(c.clone())
                .map(|ch| ch.l())
                .ok_or_else(|| Error::param(format!("{what} is not positive-definite")))
        };
        let mut chol = Vec::with_capacity(j);
        for (i, (m, c)) in means.iter().zip(&covs).enumerate() {
            if m.len() != d {
                return Err(Error::Shape(format!("mean {i} has length {}, expected {d}", m.len())));
            }
            chol.push(factor(c, &format!("covariance {i}"))?);
        }
        let noise_chol = factor(&noise_cov, "noise covariance")?;
        Ok(GeneralGmmTarget {
            weights,
            means,
            covs,
            noise_cov,
            chol,
            noise_chol,
        })
    }

    /// The two-component isotropic mixture `p N(r, I) + (1 - p) N(-r, I)`.
    pub fn from_bimodal(b: &BimodalGmmTarget) -> Self {
        let d = b.dim();
        let r = DVector::from_column_slice(b.r());
        GeneralGmmTarget::new(
            vec![b.p(), 1.0 - b.p()],
            vec![r.clone(), -r],
            vec![DMatrix::identity(d, d), DMatrix::identity(d, d)],
            None,
        )
        .expect("bimodal parameters were validated")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    pub fn noise_covariance(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    fn fill_sample(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = i;
                break;
            }
        }
        let xi = DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        let x = &self.means[comp] + &self.chol[comp] * xi;
        out.copy_from_slice(x.as_slice());
    }

    fn fill_noise(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let xi = DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        out.copy_from_slice((&self.noise_chol * xi).as_slice());
    }
}

/// `N(0, sigma^2 (-Laplacian + tau^2)^(-s))` on `[0, 1]^2` with homogeneous
/// Dirichlet conditions, resolved on an `n x n` grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrfSpec {
    pub n: usize,
    pub s: f64,
    pub tau: f64,
    pub sigma2: f64,
}

impl GrfSpec {
    pub fn new(n: usize, s: f64, tau: f64, sigma2: f64) -> Result<Self> {
        if n < 4 {
            return Err(Error::param(format!("grid resolution must be at least 4, got {n}")));
        }
        if !(s >= 0.0 && tau > 0.0 && sigma2 > 0.0) || !(s.is_finite() && tau.is_finite() && sigma2.is_finite()) {
            return Err(Error::param(format!(
                "need s >= 0, tau > 0, sigma^2 > 0 (got s = {s}, tau = {tau}, sigma^2 = {sigma2})"
            )));
        }
        Ok(GrfSpec { n, s, tau, sigma2 })
    }

    /// `s = 3`, `tau = 1`, `sigma^2 = (4 pi^2 + 1)^3`.
    pub fn preset(n: usize) -> Result<Self> {
        let tau = 1.0;
        let s = 3.0;
        Self::new(n, s, tau, (4.0 * PI * PI + tau * tau).powf(s))
    }

    /// Covariance eigenvalue of sine mode `(j, k)`.
    pub fn eigenvalue(&self, j: usize, k: usize) -> f64 {
        let m2 = (j * j + k * k) as f64;
        self.sigma2 * (PI * PI * m2 + self.tau * self.tau).powf(-self.s)
    }

    /// Eigenvalues of modes `1 <= j, k < n`, packed row-major.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = Vec::with_capacity((n - 1) * (n - 1));
        for j in 1..n {
            for k in 1..n {
                out.push(self.eigenvalue(j, k));
            }
        }
        out
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalue(self.n - 1, self.n - 1)
    }

    pub fn to_gaussian(&self) -> Result<GaussianTarget> {
        GaussianTarget::new(self.eigenvalues(), Basis::Sine { n: self.n })
    }

    /// Expected spectrum: eigenvalues summed over shells `k <= |m| < k + 1`.
    pub fn shell_sums(&self) -> Vec<f64> {
        shell_sums(self.n, |j, k| self.eigenvalue(j, k))
    }
}

/// Sums `f(j, k)` over sine modes `1 <= j, k < n` binned by `floor(|(j, k)|)`.
pub fn shell_sums<F: Fn(usize, usize) -> f64>(n: usize, f: F) -> Vec<f64> {
    let kmax = shell_index(n - 1, n - 1);
    let mut out = vec![0.0; kmax + 1];
    for j in 1..n {
        for k in 1..n {
            out[shell_index(j, k)] += f(j, k);
        }
    }
    out
}

/// `floor(sqrt(j^2 + k^2))`, computed exactly in integers.
pub fn shell_index(j: usize, k: usize) -> usize {
    let m2 = j * j + k * k;
    let mut s = (m2 as f64).sqrt() as usize;
    while s * s > m2 {
        s -= 1;
    }
    while (s + 1) * (s + 1) <= m2 {
        s += 1;
    }
    s
}

#[derive(Debug, Clone)]
pub enum Target {
    Gaussian(GaussianTarget),
    Bimodal(BimodalGmmTarget),
    General(GeneralGmmTarget),
}

impl From<GaussianTarget> for Target {
    fn from(t: GaussianTarget) -> Self {
        Target::Gaussian(t)
    }
}

impl From<BimodalGmmTarget> for Target {
    fn from(t: BimodalGmmTarget) -> Self {
        Target::Bimodal(t)
    }
}

impl From<GeneralGmmTarget> for Target {
    fn from(t: GeneralGmmTarget) -> Self {
        Target::General(t)
    }
}

impl Target {
    pub fn grf(spec: &GrfSpec) -> Result<Self> {
        Ok(Target::Gaussian(spec.to_gaussian()?))
    }

    pub fn dim(&self) -> usize {
        match self {
            Target::Gaussian(g) => g.dim(),
            Target::Bimodal(b) => b.dim(),
            Target::General(g) => g.dim(),
        }
    }

    /// `n` i.i.d. draws of `x_1`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleBatch> {
        let d = self.dim();
        let mut batch = SampleBatch::zeros(n, d, 1.0, seed);
        batch
            .as_mut_slice()
            .par_chunks_mut(d)
            .enumerate()
            .try_for_each(|(i, row)| -> Result<()> {
                let i = i as u64;
                match self {
                    Target::Gaussian(g) => g.fill_sample(
                        |j| match j {
                            Some(j) => stream(seed, &[tag::TARGET, i, j as u64]),
                            None => stream(seed, &[tag::TARGET, i]),
                        },
                        row,
                    )?,
                    Target::Bimodal(b) => b.fill_sample(&mut stream(seed, &[tag::TARGET, i]), row),
                    Target::General(g) => g.fill_sample(&mut stream(seed, &[tag::TARGET, i]), row),
                }
                Ok(())
            })?;
        Ok(batch)
    }

    /// `n` draws of the noise endpoint `z`: standard normal, zero on the
    /// Dirichlet boundary for grid targets, `N(0, C_0)` for general mixtures.
    pub fn sample_noise(&self, n: usize, seed: u64) -> Result<SampleBatch> {
        let d = self.dim();
        let mut batch = SampleBatch::zeros(n, d, 0.0, seed);
        batch.as_mut_slice().par_chunks_mut(d).enumerate().for_each(|(i, row)| {
            let i = i as u64;
            match self {
                Target::Gaussian(GaussianTarget {
                    basis: Basis::Sine { n: grid },
                    ..
                }) => {
                    let c = grid_normals(*grid, &|j: Option<usize>| {
                        stream(seed, &[tag::NOISE, i, j.unwrap_or(0) as u64])
                    });
                    row.copy_from_slice(&unpack_interior(&c, *grid));
                }
                Target::General(g) => g.fill_noise(&mut stream(seed, &[tag::NOISE, i]), row),
                _ => standard_normal_row(&mut stream(seed, &[tag::NOISE, i]), row),
            }
        });
        Ok(batch)
    }
}

pub(crate) fn standard_normal_row(rng: &mut ChaCha8Rng, row: &mut [f64]) {
    for v in row.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// `n` draws of `x_1 ~ target`.
pub fn sample_target(target: &Target, n: usize, seed: u64) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::param("sample count must be at least 1"));
    }
    target.sample(n, seed)
}

/// `n` draws of `I_t = alpha_t z + beta_t x_1` with independent `z` and `x_1`.
pub fn sample_interpolant(schedule: &Schedule, target: &Target, t: f64, n: usize, seed: u64) -> Result<SampleBatch> {
    check_time(t, 0.0, 1.0)?;
    let st = schedule.eval(t)?;
    let x1 = sample_target(target, n, seed)?;
    let mut z = target.sample_noise(n, seed)?;
    for (zi, xi) in z.as_mut_slice().iter_mut().zip(x1.as_slice()) {
        *zi = st.alpha * *zi + st.beta * xi;
    }
    z.t = t;
    Ok(z)
}
