use nalgebra::{DMatrix, DVector};

/// Symmetric matrix stored as its lower band: entry `(i, j)` with
/// `0 <= i - j <= bandwidth` lives at `data[i * (bandwidth + 1) + (i - j)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedMatrix {
    n: usize,
    bandwidth: usize,
    data: Vec<f64>,
}

/// A write outside the declared band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutOfBand {
    pub row: usize,
    pub col: usize,
}

impl BandedMatrix {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        let bandwidth = bandwidth.min(n.saturating_sub(1));
        Self { n, bandwidth, data: vec![0.0; n * (bandwidth + 1)] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bandwidth {
            0.0
        } else {
            self.data[i * (self.bandwidth + 1) + (i - j)]
        }
    }

    /// Add `v` to the symmetric pair `(i, j)`/`(j, i)`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) -> Result<(), OutOfBand> {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        if r - c > self.bandwidth {
            return Err(OutOfBand { row: i, col: j });
        }
        self.data[r * (self.bandwidth + 1) + (r - c)] += v;
        Ok(())
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.n {
            self.data[i * (self.bandwidth + 1)] += v;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| {
            let lo = i.saturating_sub(self.bandwidth);
            let hi = (i + self.bandwidth).min(self.n - 1);
            (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
        })
    }

    /// Banded Cholesky factor `L` (same band), or `None` if not positive definite.
    pub fn cholesky(&self) -> Option<BandedCholesky> {
        let (n, bw) = (self.n, self.bandwidth);
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        let at = |i: usize, j: usize| i * w + (i - j);
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let mut s = self.data[at(j, j)];
            for k in lo..j {
                s -= l[at(j, k)] * l[at(j, k)];
            }
            if !(s > 0.0) || !s.is_finite() {
                return None;
            }
            let d = s.sqrt();
            l[at(j, j)] = d;
            for i in j + 1..=(j + bw).min(n - 1) {
                let mut s = self.data[at(i, j)];
                for k in i.saturating_sub(bw)..j {
                    s -= l[at(i, k)] * l[at(j, k)];
                }
                l[at(i, j)] = s / d;
            }
        }
        Some(BandedCholesky { n, bandwidth: bw, l })
    }
}

#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bandwidth: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let (n, bw) = (self.n, self.bandwidth);
        let w = bw + 1;
        let at = |i: usize, j: usize| i * w + (i - j);
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.l[at(i, k)] * y[k];
            }
            y[i] = s / self.l[at(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..=(i + bw).min(n - 1) {
                s -= self.l[at(k, i)] * y[k];
            }
            y[i] = s / self.l[at(i, i)];
        }
        y
    }
}
