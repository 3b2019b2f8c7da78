//! Shape-preserving piecewise-cubic Hermite interpolation.

use crate::error::{Error, Result};

/// Monotone piecewise-cubic Hermite interpolant through `(x_i, y_i)`.
///
/// Node slopes are either estimated with the PCHIP weighted-harmonic-mean
/// rule or supplied by the caller; in both cases they pass through the
/// Fritsch–Carlson limiter, so monotone data gives a monotone interpolant.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        Self::validate(&x, &y)?;
        let m = pchip_slopes(&x, &y);
        Ok(MonotoneCubic { x, y, m })
    }

    /// Uses `slopes[i]` where it is finite, the PCHIP estimate elsewhere.
    pub fn with_slopes(x: Vec<f64>, y: Vec<f64>, slopes: &[f64]) -> Result<Self> {
        Self::validate(&x, &y)?;
        if slopes.len() != x.len() {
            return Err(Error::Shape("slope count differs from node count".into()));
        }
        let mut m = pchip_slopes(&x, &y);
        for (mi, s) in m.iter_mut().zip(slopes) {
            if s.is_finite() {
                *mi = *s;
            }
        }
        limit_slopes(&x, &y, &mut m);
        Ok(MonotoneCubic { x, y, m })
    }

    fn validate(x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != y.len() || x.len() < 2 {
            return Err(Error::Shape(format!(
                "interpolation needs matching node arrays of length >= 2 (got {} and {})",
                x.len(),
                y.len()
            )));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("interpolation nodes must be strictly increasing"));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::param("interpolation data must be finite"));
        }
        Ok(())
    }

    pub fn nodes(&self) -> (&[f64], &[f64]) {
        (&self.x, &self.y)
    }

    pub fn slopes(&self) -> &[f64] {
        &self.m
    }

    fn locate(&self, xq: f64) -> usize {
        let last = self.x.len() - 2;
        self.x.partition_point(|&v| v <= xq).saturating_sub(1).min(last)
    }

    /// Value and first derivative at `xq` (clamped to the node range).
    pub fn eval(&self, xq: f64) -> (f64, f64) {
        let xq = xq.clamp(self.x[0], self.x[self.x.len() - 1]);
        let k = self.locate(xq);
        let h = self.x[k + 1] - self.x[k];
        let s = (xq - self.x[k]) / h;
        let (y0, y1, m0, m1) = (self.y[k], self.y[k + 1], self.m[k], self.m[k + 1]);
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let value = h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1;
        let d00 = (6.0 * s2 - 6.0 * s) / h;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = (-6.0 * s2 + 6.0 * s) / h;
        let d11 = 3.0 * s2 - 2.0 * s;
        let deriv = d00 * y0 + d10 * m0 + d01 * y1 + d11 * m1;
        (value, deriv)
    }
}

fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    let mut m = vec![0.0; n];
    if n == 2 {
        m[0] = delta[0];
        m[1] = delta[0];
        return m;
    }
    for k in 1..n - 1 {
        let (d0, d1) = (delta[k - 1], delta[k]);
        if d0 * d1 <= 0.0 {
            m[k] = 0.0;
        } else {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            m[k] = (w1 + w2) / (w1 / d0 + w2 / d1);
        }
    }
    m[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    m[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    m
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m.signum() != d0.signum() || d0 == 0.0 {
        0.0
    } else if d0.signum() != d1.signum() && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

fn limit_slopes(x: &[f64], y: &[f64], m: &mut [f64]) {
    for k in 0..x.len() - 1 {
        let delta = (y[k + 1] - y[k]) / (x[k + 1] - x[k]);
        if delta == 0.0 {
            m[k] = 0.0;
            m[k + 1] = 0.0;
            continue;
        }
        if m[k].signum() != delta.signum() {
            m[k] = 0.0;
        }
        if m[k + 1].signum() != delta.signum() {
            m[k + 1] = 0.0;
        }
        let a = m[k] / delta;
        let b = m[k + 1] / delta;
        let r = a * a + b * b;
        if r > 9.0 {
            let tau = 3.0 / r.sqrt();
            m[k] = tau * a * delta;
            m[k + 1] = tau * b * delta;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reproduces_nodes_and_linear_data() {
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.2).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let p = MonotoneCubic::new(x.clone(), y.clone()).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!((p.eval(*xi).0 - yi).abs() < 1e-14);
        }
        let (v, d) = p.eval(0.37);
        assert!((v - (3.0 * 0.37 - 1.0)).abs() < 1e-13);
        assert!((d - 3.0).abs() < 1e-12);
    }

    #[test]
    fn exact_slopes_give_fourth_order_values() {
        let f = |x: f64| x.exp();
        let errs: Vec<f64> = [16usize, 32]
            .iter()
            .map(|&n| {
                let x: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
                let y: Vec<f64> = x.iter().map(|v| f(*v)).collect();
                let p = MonotoneCubic::with_slopes(x, y.clone(), &y).unwrap();
                (0..200)
                    .map(|i| {
                        let q = (i as f64 + 0.5) / 200.0;
                        (p.eval(q).0 - f(q)).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        assert!(errs[0] / errs[1] > 12.0, "ratio {}", errs[0] / errs[1]);
    }

    #[test]
    fn rejects_unsorted_nodes() {
        assert!(MonotoneCubic::new(vec![0.0, 0.5, 0.5], vec![0.0, 1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn monotone_data_stays_monotone(incs in proptest::collection::vec(1e-6f64..1.0, 3..20),
                                        steps in proptest::collection::vec(1e-3f64..1.0, 20)) {
            let mut x = vec![0.0];
            for s in steps.iter().take(incs.len()) { x.push(x.last().unwrap() + s); }
            let mut y = vec![0.0];
            for d in &incs { y.push(y.last().unwrap() + d); }
            let p = MonotoneCubic::new(x.clone(), y).unwrap();
            let lo = x[0];
            let hi = *x.last().unwrap();
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=400 {
                let (v, d) = p.eval(lo + (hi - lo) * i as f64 / 400.0);
                prop_assert!(v >= prev - 1e-12);
                prop_assert!(d >= -1e-12);
                prev = v;
            }
        }
    }
}
