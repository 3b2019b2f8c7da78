//! Orthonormal sine and unitary Fourier transforms of square grids.
//!
//! Fields are stored row-major as `n*n` values at nodes `x_i = i/n`,
//! `i = 0..n`. Row 0 and column 0 are the homogeneous Dirichlet boundary;
//! sine mode `(j, k)` with `1 <= j, k < n` lives at index `j*n + k`.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Orthonormal type-I discrete sine transform on the interior of an
/// `n x n` grid: `S[j][a] = sqrt(2/n) sin(pi j a / n)`. `S` is symmetric
/// and involutive, so the same call performs analysis and synthesis.
#[derive(Clone)]
pub struct SineTransform2d {
    n: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SineTransform2d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SineTransform2d").field("n", &self.n).finish()
    }
}

impl SineTransform2d {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::param(format!("sine transform needs n >= 2, got {n}")));
        }
        let fft = FftPlanner::new().plan_fft_forward(2 * n);
        Ok(SineTransform2d { n, fft })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// In-place transform of an `n*n` field. Boundary entries are set to zero.
    pub fn apply(&self, field: &mut [f64]) -> Result<()> {
        let n = self.n;
        if field.len() != n * n {
            return Err(Error::Shape(format!(
                "expected {} values for an {n} x {n} grid, got {}",
                n * n,
                field.len()
            )));
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); 2 * n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        field[..n].iter_mut().for_each(|v| *v = 0.0);
        for j in 1..n {
            field[j * n] = 0.0;
            line.copy_from_slice(&field[j * n..(j + 1) * n]);
            self.dst_line(&line, &mut out, &mut buf, &mut scratch);
            field[j * n..(j + 1) * n].copy_from_slice(&out);
        }
        for k in 1..n {
            for j in 0..n {
                line[j] = field[j * n + k];
            }
            self.dst_line(&line, &mut out, &mut buf, &mut scratch);
            for j in 0..n {
                field[j * n + k] = out[j];
            }
        }
        Ok(())
    }

    /// `out[j] = sqrt(2/n) sum_a u[a] sin(pi j a / n)` for `j, a in 1..n`,
    /// via the odd extension of `u` to length `2n`.
    fn dst_line(&self, u: &[f64], out: &mut [f64], buf: &mut [Complex64], scratch: &mut [Complex64]) {
        let n = self.n;
        buf[0] = Complex64::new(0.0, 0.0);
        buf[n] = Complex64::new(0.0, 0.0);
        for a in 1..n {
            buf[a] = Complex64::new(u[a], 0.0);
            buf[2 * n - a] = Complex64::new(-u[a], 0.0);
        }
        self.fft.process_with_scratch(buf, scratch);
        let scale = -0.5 * (2.0 / n as f64).sqrt();
        out[0] = 0.0;
        for j in 1..n {
            out[j] = scale * buf[j].im;
        }
    }
}

/// Unitary 2D DFT, `u_hat(m) = (1/n) sum_x u(x) exp(-2 pi i m.x / n)`.
pub fn fft2_unitary(field: &[f64], n: usize) -> Result<Vec<Complex64>> {
    if field.len() != n * n || n == 0 {
        return Err(Error::Shape(format!(
            "expected {} values for an {n} x {n} grid, got {}",
            n * n,
            field.len()
        )));
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut data: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for row in data.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..n {
        for j in 0..n {
            col[j] = data[j * n + k];
        }
        fft.process(&mut col);
        for j in 0..n {
            data[j * n + k] = col[j];
        }
    }
    let scale = 1.0 / n as f64;
    data.iter_mut().for_each(|c| *c *= scale);
    Ok(data)
}

/// Signed wavenumber of FFT index `i` on a length-`n` axis.
pub fn wrapped_mode(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}
