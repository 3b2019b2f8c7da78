//! Row-major batches of states and their on-disk formats.
//!
//! Binary layout (little endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"ILBATCH1"
//! 8       8     n      u64, number of rows
//! 16      8     d      u64, row dimension
//! 24      8     t      f64, time annotation
//! 32      8     seed   u64
//! 40      8*n*d data   f64, row-major
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ILBATCH1";
const TRAJ_MAGIC: &[u8; 8] = b"ILTRAJ01";

/// `n` states of dimension `d`, with the time and seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    n: usize,
    d: usize,
    data: Vec<f64>,
    pub t: f64,
    pub seed: u64,
}

impl SampleBatch {
    pub fn zeros(n: usize, d: usize, t: f64, seed: u64) -> Self {
        SampleBatch {
            n,
            d,
            data: vec![0.0; n * d],
            t,
            seed,
        }
    }

    pub fn from_vec(n: usize, d: usize, data: Vec<f64>, t: f64, seed: u64) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Shape(format!(
                "batch data has {} values, expected {n} x {d}",
                data.len()
            )));
        }
        Ok(SampleBatch { n, d, data, t, seed })
    }

    /// Builds a one-dimensional batch from scalar values.
    pub fn from_scalars(values: &[f64], t: f64, seed: u64) -> Self {
        SampleBatch {
            n: values.len(),
            d: 1,
            data: values.to_vec(),
            t,
            seed,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> std::slice::Chunks<'_, f64> {
        self.data.chunks(self.d.max(1))
    }

    /// Per-coordinate sample mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for row in self.rows() {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let inv = 1.0 / self.n as f64;
        m.iter_mut().for_each(|v| *v *= inv);
        m
    }

    /// Per-coordinate unbiased sample variance.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut var = vec![0.0; self.d];
        for row in self.rows() {
            for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let inv = 1.0 / (self.n as f64 - 1.0).max(1.0);
        var.iter_mut().for_each(|v| *v *= inv);
        var
    }

    /// Column `j` as an owned vector.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.d as u64).to_le_bytes())?;
        w.write_all(&self.t.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        write_f64s(&mut w, &self.data)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse("not a sample batch file (bad magic)".into()));
        }
        let n = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        let t = f64::from_bits(read_u64(&mut r)?);
        let seed = read_u64(&mut r)?;
        let len = n
            .checked_mul(d)
            .ok_or_else(|| Error::Parse("batch header overflows".into()))?;
        let data = read_f64s(&mut r, len)?;
        Ok(SampleBatch { n, d, data, t, seed })
    }

    /// CSV export with header `x0,x1,...`; only for `d <= 4`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        if self.d > 4 {
            return Err(Error::Shape(format!(
                "CSV export supports d <= 4, batch has d = {}",
                self.d
            )));
        }
        let header: Vec<String> = (0..self.d).map(|j| format!("x{j}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in self.rows() {
            let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Snapshots of a batch along an integration path.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub n: usize,
    pub d: usize,
    /// `(step index, time, row-major states)`
    pub frames: Vec<(usize, f64, Vec<f64>)>,
}

impl Trajectory {
    /// Writes `b"ILTRAJ01"`, `n`, `d`, frame count, then per frame the step
    /// index (u64), time (f64) and `n*d` f64 values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TRAJ_MAGIC)?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.d as u64).to_le_bytes())?;
        w.write_all(&(self.frames.len() as u64).to_le_bytes())?;
        for (step, t, data) in &self.frames {
            w.write_all(&(*step as u64).to_le_bytes())?;
            w.write_all(&t.to_le_bytes())?;
            write_f64s(&mut w, data)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TRAJ_MAGIC {
            return Err(Error::Parse("not a trajectory file (bad magic)".into()));
        }
        let n = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let mut frames = Vec::with_capacity(count);
        for _ in 0..count {
            let step = read_u64(&mut r)? as usize;
            let t = f64::from_bits(read_u64(&mut r)?);
            frames.push((step, t, read_f64s(&mut r, n * d)?));
        }
        Ok(Trajectory { n, d, frames })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn moments() {
        let b = SampleBatch::from_vec(4, 2, vec![1., 0., 3., 0., 5., 1., 7., 1.], 0.5, 1).unwrap();
        assert_eq!(b.mean(), vec![4.0, 0.5]);
        let v = b.variance();
        assert!((v[0] - 20.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_shape() {
        assert!(SampleBatch::from_vec(2, 2, vec![1.0; 3], 0.0, 0).is_err());
    }

    #[test]
    fn csv_limited_to_small_dim() {
        let b = SampleBatch::zeros(2, 5, 0.0, 0);
        assert!(matches!(b.write_csv(Vec::new()), Err(Error::Shape(_))));
        let b = SampleBatch::from_scalars(&[1.5, -2.0], 0.0, 0);
        let mut out = Vec::new();
        b.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert!(s.starts_with("x0\n1.5000000000000000e0\n"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let bytes = [0u8; 64];
        assert!(matches!(SampleBatch::read_binary(&bytes[..]), Err(Error::Parse(_))));
    }

    proptest! {
        #[test]
        fn binary_round_trip(n in 1usize..6, d in 1usize..5, t in 0.0f64..1.0, seed in any::<u64>(),
                             vals in proptest::collection::vec(-1e6f64..1e6, 30)) {
            let data: Vec<f64> = vals.iter().cycle().take(n * d).copied().collect();
            let b = SampleBatch::from_vec(n, d, data, t, seed).unwrap();
            let mut buf = Vec::new();
            b.write_binary(&mut buf).unwrap();
            prop_assert_eq!(buf.len(), 40 + 8 * n * d);
            let back = SampleBatch::read_binary(&buf[..]).unwrap();
            prop_assert_eq!(back, b);
        }
    }

    #[test]
    fn trajectory_round_trip() {
        let tr = Trajectory {
            n: 2,
            d: 1,
            frames: vec![(0, 0.1, vec![1.0, 2.0]), (1, 0.2, vec![3.0, 4.0])],
        };
        let mut buf = Vec::new();
        tr.write_binary(&mut buf).unwrap();
        let back = Trajectory::read_binary(&buf[..]).unwrap();
        assert_eq!(back.frames, tr.frames);
    }
}
