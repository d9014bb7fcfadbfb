//! Square linear systems whose leading columns are banded and whose last few
//! columns are dense (a bordered band matrix). Rows may sit anywhere relative
//! to the diagonal; elimination uses partial pivoting inside the band.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Row {
    lo: usize,
    vals: Vec<f64>,
    tail: Vec<f64>,
}

impl Row {
    fn hi(&self) -> usize {
        self.lo + self.vals.len()
    }

    fn get(&self, c: usize) -> f64 {
        if c >= self.lo && c < self.hi() {
            self.vals[c - self.lo]
        } else {
            0.0
        }
    }

    fn cover(&mut self, lo: usize, hi: usize) {
        if self.vals.is_empty() {
            self.lo = lo;
            self.vals = vec![0.0; hi - lo];
            return;
        }
        if lo < self.lo {
            let mut v = vec![0.0; self.lo - lo];
            v.extend_from_slice(&self.vals);
            self.vals = v;
            self.lo = lo;
        }
        if hi > self.hi() {
            let extra = hi - self.hi();
            self.vals.extend(std::iter::repeat_n(0.0, extra));
        }
    }
}

/// Bordered band matrix with `n` rows/columns, of which the last `border`
/// columns are stored densely.
#[derive(Debug, Clone)]
pub struct BorderedBand {
    n: usize,
    border: usize,
    rows: Vec<Row>,
}

impl BorderedBand {
    pub fn new(n: usize, border: usize) -> Self {
        assert!(border <= n);
        let rows = (0..n)
            .map(|_| Row {
                lo: 0,
                vals: Vec::new(),
                tail: vec![0.0; border],
            })
            .collect();
        BorderedBand { n, border, rows }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let nb = self.n - self.border;
        if c >= nb {
            self.rows[r].tail[c - nb] += v;
        } else {
            let row = &mut self.rows[r];
            row.cover(c, c + 1);
            row.vals[c - row.lo] += v;
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let nb = self.n - self.border;
        if c >= nb {
            self.rows[r].tail[c - nb]
        } else {
            self.rows[r].get(c)
        }
    }

    /// Matrix-vector product.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let nb = self.n - self.border;
        self.rows
            .iter()
            .map(|row| {
                let mut s: f64 = row
                    .vals
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * x[row.lo + i])
                    .sum();
                for (t, xv) in row.tail.iter().zip(&x[nb..]) {
                    s += t * xv;
                }
                s
            })
            .collect()
    }

    /// Solves `A x = b`, consuming the matrix.
    pub fn solve(mut self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        let nb = n - self.border;
        let mut rhs = b.to_vec();
        let scale = self
            .rows
            .iter()
            .flat_map(|r| r.vals.iter().chain(r.tail.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let tiny = scale * 1e-300_f64.max(f64::EPSILON * 1e-6);
        // rows are searched in a window below the current column
        let reach = self
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.vals.is_empty())
            .map(|(i, r)| i.saturating_sub(r.lo))
            .max()
            .unwrap_or(0)
            + 1;
        for j in 0..nb {
            let end = (j + reach + 1).min(n);
            let mut piv = j;
            let mut best = self.rows[j].get(j).abs();
            for r in j + 1..end {
                let v = self.rows[r].get(j).abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best <= tiny {
                return Err(Error::SingularSystem(j));
            }
            self.rows.swap(j, piv);
            rhs.swap(j, piv);
            let pivot_row = self.rows[j].clone();
            let p = pivot_row.get(j);
            for r in j + 1..end {
                let a = self.rows[r].get(j);
                if a == 0.0 {
                    continue;
                }
                let f = a / p;
                let row = &mut self.rows[r];
                row.cover(j, pivot_row.hi().max(j + 1));
                for c in j..pivot_row.hi() {
                    row.vals[c - row.lo] -= f * pivot_row.vals[c - pivot_row.lo];
                }
                row.vals[j - row.lo] = 0.0;
                for (t, pt) in row.tail.iter_mut().zip(&pivot_row.tail) {
                    *t -= f * pt;
                }
                rhs[r] -= f * rhs[j];
            }
        }
        // dense border block
        let k = self.border;
        let mut x = vec![0.0; n];
        if k > 0 {
            let mut m = nalgebra::DMatrix::<f64>::zeros(k, k);
            let mut v = nalgebra::DVector::<f64>::zeros(k);
            for i in 0..k {
                for c in 0..k {
                    m[(i, c)] = self.rows[nb + i].tail[c];
                }
                v[i] = rhs[nb + i];
            }
            let sol = m
                .lu()
                .solve(&v)
                .ok_or(Error::SingularSystem(nb))?;
            for i in 0..k {
                x[nb + i] = sol[i];
            }
        }
        for j in (0..nb).rev() {
            let row = &self.rows[j];
            let mut s = rhs[j];
            for c in j + 1..row.hi() {
                s -= row.vals[c - row.lo] * x[c];
            }
            for (t, xv) in row.tail.iter().zip(&x[nb..]) {
                s -= t * xv;
            }
            x[j] = s / row.get(j);
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn sample(n: usize, border: usize) -> (BorderedBand, DMatrix<f64>) {
        let mut a = BorderedBand::new(n, border);
        let mut d = DMatrix::<f64>::zeros(n, n);
        let nb = n - border;
        for r in 0..n {
            // band shifted off the diagonal for the last rows
            let centre = (r * nb) / n;
            for c in centre.saturating_sub(3)..(centre + 4).min(nb) {
                let v = ((r * 7 + c * 3) % 11) as f64 - 5.0 + if c == centre { 20.0 } else { 0.0 };
                a.add(r, c, v);
                d[(r, c)] += v;
            }
            for c in nb..n {
                let v = ((r + 2 * c) % 5) as f64 - 2.0;
                a.add(r, c, v);
                d[(r, c)] += v;
            }
        }
        (a, d)
    }

    #[test]
    fn bordered_solve_matches_dense_lu() {
        let (a, d) = sample(40, 2);
        let b: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = a.clone().solve(&b).unwrap();
        let xd = d.clone().lu().solve(&DVector::from_vec(b.clone())).unwrap();
        for i in 0..40 {
            assert!((x[i] - xd[i]).abs() < 1e-10, "{i}: {} vs {}", x[i], xd[i]);
        }
        let r = a.apply(&x);
        for i in 0..40 {
            assert!((r[i] - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn pure_band_solve() {
        let n = 50;
        let mut a = BorderedBand::new(n, 0);
        for i in 0..n {
            a.add(i, i, 4.0);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                a.add(i, i + 1, -1.0);
            }
        }
        let b = vec![1.0; n];
        let x = a.clone().solve(&b).unwrap();
        let r = a.apply(&x);
        assert!(r.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-12));
    }
}
