//! Truncated Taylor series ("jets") in one variable.
//!
//! Coefficient `c[k]` stores `f^(k)(x0) / k!`. Products and the elementary
//! functions below are exact up to the truncation order, which lets us take
//! up to `N-1` derivatives of composed expressions without grid differencing.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet<const N: usize>(pub [f64; N]);

impl<const N: usize> Jet<N> {
    pub fn constant(v: f64) -> Self {
        let mut c = [0.0; N];
        c[0] = v;
        Jet(c)
    }

    /// The identity function expanded at `x0`.
    pub fn variable(x0: f64) -> Self {
        let mut c = [0.0; N];
        c[0] = x0;
        if N > 1 {
            c[1] = 1.0;
        }
        Jet(c)
    }

    pub fn zero() -> Self {
        Jet([0.0; N])
    }

    pub fn value(&self) -> f64 {
        self.0[0]
    }

    /// The `k`-th derivative at the expansion point.
    pub fn deriv(&self, k: usize) -> f64 {
        let mut f = 1.0;
        for j in 2..=k {
            f *= j as f64;
        }
        self.0[k] * f
    }

    /// All derivatives `0..N`.
    pub fn derivs(&self) -> [f64; N] {
        let mut out = [0.0; N];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.deriv(k);
        }
        out
    }

    /// Builds a jet from derivative values `f^(k)(x0)`.
    pub fn from_derivs(d: &[f64]) -> Self {
        let mut c = [0.0; N];
        let mut f = 1.0;
        for k in 0..N.min(d.len()) {
            if k >= 2 {
                f *= k as f64;
            }
            c[k] = d[k] / f;
        }
        Jet(c)
    }

    /// Jet of the derivative; the top coefficient is lost and set to zero.
    pub fn differentiate(&self) -> Self {
        let mut c = [0.0; N];
        for k in 0..N - 1 {
            c[k] = (k + 1) as f64 * self.0[k + 1];
        }
        Jet(c)
    }

    /// Keeps the first `M` coefficients (`M <= N`).
    pub fn truncate<const M: usize>(&self) -> Jet<M> {
        let mut c = [0.0; M];
        c.copy_from_slice(&self.0[..M]);
        Jet(c)
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut c = self.0;
        for v in c.iter_mut() {
            *v *= s;
        }
        Jet(c)
    }

    pub fn sin_cos(&self) -> (Self, Self) {
        let a = &self.0;
        let mut s = [0.0; N];
        let mut c = [0.0; N];
        s[0] = a[0].sin();
        c[0] = a[0].cos();
        for k in 1..N {
            let (mut sk, mut ck) = (0.0, 0.0);
            for j in 1..=k {
                let ja = j as f64 * a[j];
                sk += ja * c[k - j];
                ck -= ja * s[k - j];
            }
            s[k] = sk / k as f64;
            c[k] = ck / k as f64;
        }
        (Jet(s), Jet(c))
    }

    pub fn exp(&self) -> Self {
        let a = &self.0;
        let mut e = [0.0; N];
        e[0] = a[0].exp();
        for k in 1..N {
            let mut acc = 0.0;
            for j in 1..=k {
                acc += j as f64 * a[j] * e[k - j];
            }
            e[k] = acc / k as f64;
        }
        Jet(e)
    }

    pub fn recip(&self) -> Self {
        let a = &self.0;
        let mut r = [0.0; N];
        r[0] = 1.0 / a[0];
        for k in 1..N {
            let mut acc = 0.0;
            for j in 1..=k {
                acc += a[j] * r[k - j];
            }
            r[k] = -acc * r[0];
        }
        Jet(r)
    }

    pub fn powi(&self, n: u32) -> Self {
        let mut out = Self::constant(1.0);
        for _ in 0..n {
            out = out * *self;
        }
        out
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut c = self.0;
        for (a, b) in c.iter_mut().zip(rhs.0) {
            *a += b;
        }
        Jet(c)
    }
}

impl<const N: usize> AddAssign for Jet<N> {
    fn add_assign(&mut self, rhs: Self) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let mut c = self.0;
        for (a, b) in c.iter_mut().zip(rhs.0) {
            *a -= b;
        }
        Jet(c)
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut c = [0.0; N];
        for i in 0..N {
            if self.0[i] == 0.0 {
                continue;
            }
            for j in 0..N - i {
                c[i + j] += self.0[i] * rhs.0[j];
            }
        }
        Jet(c)
    }
}

impl<const N: usize> Mul<f64> for Jet<N> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.scale(rhs)
    }
}

impl<const N: usize> Add<f64> for Jet<N> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        let mut c = self.0;
        c[0] += rhs;
        Jet(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sin_of_linear_matches_closed_form() {
        let x0 = 0.7;
        let a = Jet::<5>::variable(x0).scale(3.0);
        let (s, c) = a.sin_cos();
        let expect_s = [
            (3.0 * x0).sin(),
            3.0 * (3.0 * x0).cos(),
            -9.0 * (3.0 * x0).sin(),
            -27.0 * (3.0 * x0).cos(),
            81.0 * (3.0 * x0).sin(),
        ];
        for k in 0..5 {
            assert!((s.deriv(k) - expect_s[k]).abs() < 1e-12, "k={k}");
        }
        assert!((c.value() - (3.0 * x0).cos()).abs() < 1e-15);
    }

    #[test]
    fn exp_recip_product_rule() {
        let x = Jet::<6>::variable(0.3);
        let f = (x * x).exp() * (x + 2.0).recip();
        // compare against centered differences of the scalar function
        let g = |t: f64| (t * t).exp() / (t + 2.0);
        let h = 1e-3;
        let d1 = (g(0.3 + h) - g(0.3 - h)) / (2.0 * h);
        let d2 = (g(0.3 + h) - 2.0 * g(0.3) + g(0.3 - h)) / (h * h);
        assert!((f.deriv(1) - d1).abs() < 1e-5);
        assert!((f.deriv(2) - d2).abs() < 1e-5);
    }

    #[test]
    fn differentiate_shifts_coefficients() {
        let x = Jet::<5>::variable(2.0);
        let cube = x.powi(3);
        let d = cube.differentiate();
        assert!((d.value() - 12.0).abs() < 1e-14);
        assert!((d.deriv(1) - 12.0).abs() < 1e-14);
        assert!((d.deriv(2) - 6.0).abs() < 1e-14);
    }
}
