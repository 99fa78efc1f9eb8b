//! Truncated Taylor form of a kernel expansion in low dimension.
//!
//! Since `k₂(q,x) = Σ_{k≠1} ηᵏ⟨q,x⟩ᵏ/k!`, an expansion is the power series
//! `Σ_α a_α x^α` with `a_α = η^|α| M_α / α!` and moments `M_α = Σᵢ cᵢ qᵢ^α`
//! (degree one is the linear part `w`). The moments absorb the cancellation
//! among huge coefficients once, in MPFR; afterwards each evaluation is a plain
//! `f64` polynomial with a running error bound.

use num_complex::Complex64;
use rug::ops::PowAssign;
use rug::{Assign, Complex, Float};

use crate::hp;

/// Largest number of monomials worth tabulating.
pub const MAX_MONOMIALS: usize = 6000;

/// Truncation tails are pushed below this fraction of `1 + ‖w‖·reach`.
const TAIL_RELATIVE: f64 = 1e-30;

/// Accepted bound on the relative error of a polynomial evaluation.
pub const ACCEPT_RELATIVE: f64 = 1.0 / (1u64 << 30) as f64;

#[derive(Debug, Clone)]
pub struct MonomialForm {
    n: usize,
    degree: usize,
    exponents: Vec<u32>,
    coeffs: Vec<Complex64>,
    tail_value: f64,
    tail_per_dir: f64,
    reach: f64,
}

fn exponents_of_degree(n: usize, k: usize, out: &mut Vec<u32>, cur: &mut Vec<u32>) {
    if cur.len() == n - 1 {
        let used: usize = cur.iter().map(|e| *e as usize).sum();
        out.extend_from_slice(cur);
        out.push((k - used) as u32);
        return;
    }
    let used: usize = cur.iter().map(|e| *e as usize).sum();
    for e in (0..=k - used).rev() {
        cur.push(e as u32);
        exponents_of_degree(n, k, out, cur);
        cur.pop();
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `Σ_{k≥K} sᵏ/k!`, bounded by its first term and a geometric tail.
fn exp_tail(s: f64, from: usize) -> f64 {
    if s == 0.0 {
        return if from == 0 { 1.0 } else { 0.0 };
    }
    let ratio = s / (from + 1) as f64;
    if ratio >= 1.0 {
        return f64::INFINITY;
    }
    let log_first = from as f64 * s.ln() - (1..=from).map(|i| (i as f64).ln()).sum::<f64>();
    log_first.exp() / (1.0 - ratio)
}

impl MonomialForm {
    /// Tabulates the expansion, or `None` when the required degree would need
    /// more than [`MAX_MONOMIALS`] terms or a coefficient overflows `f64`.
    pub fn build(eta: f64, points: &[Vec<f64>], coeffs: &[Complex], linear: &[Complex64], reach: f64) -> Option<Self> {
        let n = linear.len();
        if n == 0 {
            return None;
        }
        let abs_c: Vec<f64> = coeffs.iter().map(|c| Float::with_val(64, c.abs_ref()).to_f64()).collect();
        if abs_c.iter().any(|a| !a.is_finite()) {
            return None;
        }
        let s: Vec<f64> = points.iter().map(|q| eta * q.iter().map(|v| v * v).sum::<f64>().sqrt() * reach).collect();
        let w_norm: f64 = linear.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let target = TAIL_RELATIVE * (1.0 + w_norm * reach);
        let tails = |deg: usize| {
            let tv: f64 = abs_c.iter().zip(&s).map(|(c, s)| c * exp_tail(*s, deg + 1)).sum();
            let td: f64 = abs_c.iter().zip(&s).zip(points).map(|((c, s), q)| {
                let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                c * eta * qn * exp_tail(*s, deg)
            }).sum();
            (tv, td)
        };
        let mut degree = 2;
        let (tail_value, tail_per_dir) = loop {
            if binomial(n + degree, n) > MAX_MONOMIALS as f64 {
                return None;
            }
            let (tv, td) = tails(degree);
            if tv <= target && td <= target {
                break (tv, td);
            }
            degree += 1;
        };
        let mut exponents = Vec::new();
        for k in 0..=degree {
            exponents_of_degree(n, k, &mut exponents, &mut Vec::with_capacity(n));
        }
        let bits = coeffs.iter().map(|c| c.prec().0).max().unwrap_or(64).max(64);
        let count = exponents.len() / n;
        let mut moments: Vec<Complex> = (0..count).map(|_| Complex::new(bits)).collect();
        let mut pw: Vec<Vec<Float>> = vec![Vec::new(); n];
        let mut prod = Float::new(bits);
        let mut tmp = Complex::new(bits);
        for (q, c) in points.iter().zip(coeffs) {
            for (k, table) in pw.iter_mut().enumerate() {
                table.clear();
                table.push(Float::with_val(bits, 1));
                for d in 1..=degree {
                    let next = Float::with_val(bits, &table[d - 1] * q[k]);
                    table.push(next);
                }
            }
            for (i, alpha) in exponents.chunks(n).enumerate() {
                prod.assign(1);
                for (k, e) in alpha.iter().enumerate() {
                    prod *= &pw[k][*e as usize];
                }
                tmp.assign(c * &prod);
                moments[i] += &tmp;
            }
        }
        let mut out = Vec::with_capacity(count);
        for (alpha, m) in exponents.chunks(n).zip(moments) {
            let deg: u32 = alpha.iter().sum();
            if deg == 1 {
                let k = alpha.iter().position(|e| *e == 1).expect("unit exponent");
                out.push(linear[k]);
                continue;
            }
            let mut scale = Float::with_val(bits, eta);
            scale.pow_assign(deg);
            for e in alpha {
                for i in 2..=*e {
                    scale /= i;
                }
            }
            let z = hp::to_c64(&Complex::with_val(bits, &m * &scale));
            if !(z.re.is_finite() && z.im.is_finite()) {
                return None;
            }
            out.push(z);
        }
        Some(Self {
            n,
            degree,
            exponents,
            coeffs: out,
            tail_value,
            tail_per_dir,
            reach,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    fn powers(&self, x: &[f64]) -> Vec<f64> {
        let d = self.degree + 1;
        let mut pw = vec![1.0; self.n * d];
        for (k, xk) in x.iter().enumerate() {
            for e in 1..d {
                pw[k * d + e] = pw[k * d + e - 1] * xk;
            }
        }
        pw
    }

    fn in_reach(&self, x: &[f64]) -> bool {
        x.iter().map(|v| v * v).sum::<f64>().sqrt() <= self.reach
    }

    /// Rounding-error factor for sums of this many terms.
    fn gamma(&self) -> f64 {
        (self.coeffs.len() + 2 * self.n + 2) as f64 * f64::EPSILON
    }

    /// `f(x)`, or `None` when the error bound is not small enough.
    pub fn value(&self, x: &[f64]) -> Option<Complex64> {
        if !self.in_reach(x) {
            return None;
        }
        let d = self.degree + 1;
        let pw = self.powers(x);
        let mut val = Complex64::default();
        let mut mag = 0.0;
        for (alpha, a) in self.exponents.chunks(self.n).zip(&self.coeffs) {
            let mut p = 1.0;
            for (k, e) in alpha.iter().enumerate() {
                p *= pw[k * d + *e as usize];
            }
            val += a * p;
            mag += a.norm() * p.abs();
        }
        let bound = self.gamma() * mag + self.tail_value;
        (bound <= ACCEPT_RELATIVE * val.norm()).then_some(val)
    }

    /// `f(x)` and `⟨dir, ∇f(x)⟩`, or `None` when either bound is too loose.
    pub fn value_and_derivative(&self, x: &[f64], dir: &[f64]) -> Option<(Complex64, Complex64)> {
        if !self.in_reach(x) {
            return None;
        }
        let d = self.degree + 1;
        let pw = self.powers(x);
        let (mut val, mut der) = (Complex64::default(), Complex64::default());
        let (mut mag, mut dmag) = (0.0, 0.0);
        for (alpha, a) in self.exponents.chunks(self.n).zip(&self.coeffs) {
            let mut p = 1.0;
            for (k, e) in alpha.iter().enumerate() {
                p *= pw[k * d + *e as usize];
            }
            val += a * p;
            mag += a.norm() * p.abs();
            let mut dp = 0.0;
            let mut dpm = 0.0;
            for (k, e) in alpha.iter().enumerate() {
                if *e == 0 || dir[k] == 0.0 {
                    continue;
                }
                let mut t = *e as f64 * dir[k] * pw[k * d + *e as usize - 1];
                for (l, el) in alpha.iter().enumerate() {
                    if l != k {
                        t *= pw[l * d + *el as usize];
                    }
                }
                dp += t;
                dpm += t.abs();
            }
            der += a * dp;
            dmag += a.norm() * dpm;
        }
        let dir_norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let g = self.gamma();
        let ok_v = g * mag + self.tail_value <= ACCEPT_RELATIVE * val.norm();
        let ok_d = g * dmag + self.tail_per_dir * dir_norm <= ACCEPT_RELATIVE * der.norm();
        (ok_v && ok_d).then_some((val, der))
    }
}
