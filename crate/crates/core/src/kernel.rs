//! The split exponential kernel, collocation sets, Gram matrices and kernel
//! expansions `f(x) = wᵀx + Σᵢ cᵢ k₂(qᵢ, x)`.
//!
//! The full kernel `exp(η⟨x,y⟩)` splits as `η k₁ + k₂` with `k₁(x,y) = ⟨x,y⟩`
//! the linear part; only `k₂` enters the Gram matrix.

use std::sync::Arc;

use num_complex::Complex64;
use rug::ops::CompleteRound;
use rug::{Assign, Complex, Float};
use serde::{Deserialize, Serialize};

use crate::dynsys::DomainBox;
use crate::hp::{self, Cholesky, RealMat};
use crate::monomial::MonomialForm;
use crate::par::*;
use crate::{Error, Result};

/// Condition numbers above this are flagged in diagnostics.
pub const CONDITION_WARNING: f64 = 1e12;

/// Minimum pairwise distance between collocation points.
pub const MIN_POINT_DISTANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorKernel {
    eta: f64,
}

impl TaylorKernel {
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::InvalidParameter {
                name: "eta".into(),
                reason: format!("must be positive and finite, got {eta}"),
            });
        }
        Ok(Self { eta })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `k₂(x, y) = exp(η⟨x,y⟩) − η⟨x,y⟩`.
    pub fn k2_eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(x, y)?;
        let t = self.eta * dot(x, y);
        Ok(t.exp() - t)
    }

    /// `∇_y k₂(x, y) = η x (exp(η⟨x,y⟩) − 1)`.
    pub fn k2_grad_second(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_dims(x, y)?;
        let d = self.eta * (self.eta * dot(x, y)).exp_m1();
        Ok(x.iter().map(|v| d * v).collect())
    }

    /// `η⟨x,y⟩` rounded once at `bits`.
    pub(crate) fn exponent_hp(&self, x: &[f64], y: &[f64], bits: u32) -> Float {
        let mut acc = Float::new(bits);
        let mut t = Float::new(bits);
        for (a, b) in x.iter().zip(y) {
            t.assign(*a);
            t *= *b;
            acc += &t;
        }
        acc *= self.eta;
        acc
    }

    pub(crate) fn k2_hp(&self, x: &[f64], y: &[f64], bits: u32) -> Float {
        let t = self.exponent_hp(x, y, bits);
        let e = t.exp_ref().complete(bits);
        e - t
    }
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(())
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Distinct points strictly inside a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollocationSet {
    points: Vec<Vec<f64>>,
}

impl CollocationSet {
    pub fn new(points: Vec<Vec<f64>>, domain: &DomainBox) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("collocation set"));
        }
        let n = domain.dim();
        for (i, p) in points.iter().enumerate() {
            if p.len() != n {
                return Err(Error::at(i, Error::DimensionMismatch { expected: n, got: p.len() }));
            }
            if !domain.contains_strictly(p) {
                return Err(Error::PointOutsideDomain(i));
            }
        }
        let set = Self { points };
        set.check_distinct()?;
        Ok(set)
    }

    fn check_distinct(&self) -> Result<()> {
        let pts = &self.points;
        let hit = (0..pts.len()).into_par_iter().find_map_first(|i| {
            (0..i).find_map(|j| {
                let d2: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2.sqrt() <= MIN_POINT_DISTANCE).then_some((j, i, d2.sqrt()))
            })
        });
        match hit {
            Some((i, j, d)) => Err(Error::DuplicatePoints { i, j, min_dist: d }),
            None => Ok(()),
        }
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Largest Euclidean norm among the points.
    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|p| dot(p, p).sqrt()).fold(0.0, f64::max)
    }
}

/// `G_ij = k₂(q_i, q_j)` with entries and Cholesky factor in MPFR arithmetic.
///
/// The precision starts at [`hp::MIN_BITS`] and is raised until the factor's
/// diagonal-ratio condition estimate leaves [`hp::GUARD_BITS`] to spare.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    kernel: TaylorKernel,
    points: Arc<CollocationSet>,
    entries: RealMat,
    chol: Cholesky,
}

impl GramMatrix {
    pub fn new(kernel: TaylorKernel, points: Arc<CollocationSet>) -> Result<Self> {
        let mut bits = hp::MIN_BITS;
        loop {
            let entries = gram_entries(&kernel, &points, bits);
            match Cholesky::factor(&entries, bits) {
                Ok(chol) => {
                    let need = hp::bits_for_condition(chol.log2_condition());
                    if need <= bits || bits >= hp::MAX_BITS {
                        return Ok(Self {
                            kernel,
                            points,
                            entries,
                            chol,
                        });
                    }
                    bits = need;
                }
                Err(pivot) => {
                    if bits >= hp::MAX_BITS {
                        return Err(Error::NotPositiveDefinite { pivot, bits });
                    }
                    bits = (2 * bits).min(hp::MAX_BITS);
                }
            }
        }
    }

    pub fn kernel(&self) -> TaylorKernel {
        self.kernel
    }

    pub fn points(&self) -> &Arc<CollocationSet> {
        &self.points
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    /// Working precision of the entries and factor.
    pub fn bits(&self) -> u32 {
        self.chol.bits()
    }

    pub fn entries(&self) -> &RealMat {
        &self.entries
    }

    pub fn entries_f64(&self) -> nalgebra::DMatrix<f64> {
        self.entries.to_f64()
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.chol
    }

    /// Squared diagonal ratio of the Cholesky factor (the pivots of `G`).
    pub fn pivots(&self) -> Vec<f64> {
        self.chol.diagonal().iter().map(|d| d * d).collect()
    }

    /// `log10` of the condition estimate `(max Lᵢᵢ / min Lᵢᵢ)²`.
    pub fn log10_condition(&self) -> f64 {
        self.chol.log2_condition() * std::f64::consts::LOG10_2
    }

    /// Condition estimate; may be `inf` when it exceeds the `f64` range.
    pub fn condition_estimate(&self) -> f64 {
        10f64.powf(self.log10_condition())
    }

    pub fn ill_conditioned(&self) -> bool {
        self.condition_estimate() > CONDITION_WARNING
    }

    /// Solves `G α = v`. The interpolant `Σⱼ αⱼ k₂(qⱼ, ·)` reproduces `v` at
    /// the collocation points.
    pub fn interpolate(&self, values: &[Complex64]) -> Result<KernelExpansion> {
        let bits = self.bits();
        let hp_values: Vec<Complex> = values.iter().map(|z| hp::complex(bits, *z)).collect();
        self.interpolate_hp(&hp_values)
    }

    /// [`interpolate`](Self::interpolate) with right-hand side already in MPFR.
    pub fn interpolate_hp(&self, values: &[Complex]) -> Result<KernelExpansion> {
        if values.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: values.len(),
            });
        }
        let coeffs = self.chol.solve_complex(values);
        let n = self.points.dim();
        KernelExpansion::new(self.kernel, self.points.clone(), vec![Complex64::new(0.0, 0.0); n], coeffs, None)
    }
}

fn gram_entries(kernel: &TaylorKernel, set: &CollocationSet, bits: u32) -> RealMat {
    let pts = set.points();
    let m = pts.len();
    let lower: Vec<Vec<Float>> = (0..m)
        .into_par_iter()
        .map(|i| (0..=i).map(|j| kernel.k2_hp(&pts[i], &pts[j], bits)).collect())
        .collect();
    RealMat::from_fn(m, m, |i, j| if j <= i { lower[i][j].clone() } else { lower[j][i].clone() })
}

/// `f(x) = wᵀx + Σᵢ cᵢ k₂(qᵢ, x)` with complex `w` and `c`.
///
/// Coefficients are stored in MPFR. Kernel coefficients of collocation solves
/// routinely reach 1e30 and cancel to O(1) values, so evaluation runs either in
/// `f64` or at an MPFR precision sized from `Σ|cᵢ| · max k₂` over the reach
/// ball, whichever keeps roughly 50 correct bits.
#[derive(Debug, Clone)]
pub struct KernelExpansion {
    kernel: TaylorKernel,
    points: Arc<CollocationSet>,
    linear: Vec<Complex64>,
    coeffs: Vec<Complex>,
    coeffs_f64: Vec<Complex64>,
    eval_bits: Option<u32>,
    reach: f64,
    /// Fast path for the MPFR tier in low dimension.
    monomials: Option<Arc<MonomialForm>>,
}

/// Bits kept beyond the cancellation loss when evaluating in MPFR.
const EVAL_GUARD_BITS: f64 = 117.0;

impl KernelExpansion {
    /// `reach` is the radius of the ball on which evaluation must be accurate;
    /// `None` uses `1 + max‖qᵢ‖`.
    pub fn new(
        kernel: TaylorKernel,
        points: Arc<CollocationSet>,
        linear: Vec<Complex64>,
        coeffs: Vec<Complex>,
        reach: Option<f64>,
    ) -> Result<Self> {
        let n = points.dim();
        if linear.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: linear.len() });
        }
        if coeffs.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: coeffs.len(),
            });
        }
        if coeffs.iter().any(|c| !(c.real().is_finite() && c.imag().is_finite())) {
            return Err(Error::NonFinite("kernel coefficients"));
        }
        let reach = reach.unwrap_or(1.0 + points.max_norm());
        let coeffs_f64: Vec<Complex64> = coeffs.iter().map(hp::to_c64).collect();
        let mut e = Self {
            kernel,
            points,
            linear,
            coeffs,
            coeffs_f64,
            eval_bits: None,
            reach,
            monomials: None,
        };
        e.eval_bits = e.choose_bits();
        if e.eval_bits.is_some() {
            e.monomials = MonomialForm::build(kernel.eta, e.points.points(), &e.coeffs, &e.linear, reach).map(Arc::new);
        }
        Ok(e)
    }

    fn choose_bits(&self) -> Option<u32> {
        // log2 of Σ|cᵢ| in MPFR since the sum may exceed f64
        let bits = self.coeffs.first().map_or(64, |c| c.prec().0);
        let mut total = Float::new(bits.max(64));
        for c in &self.coeffs {
            total += c.clone().abs().real();
        }
        if total.is_zero() {
            return None;
        }
        let kmax = (self.kernel.eta * self.points.max_norm() * self.reach).exp();
        let w_norm: f64 = self.linear.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let scale = 1.0 + w_norm * self.reach;
        let log2_loss = total.log2().to_f64() + kmax.log2() - scale.log2();
        // f64 keeps ~52 bits; accept it when at least 30 survive the cancellation
        if log2_loss <= 22.0 {
            None
        } else {
            let b = (log2_loss + EVAL_GUARD_BITS).ceil() as u32;
            Some(b.div_ceil(64) * 64)
        }
    }

    pub fn kernel(&self) -> TaylorKernel {
        self.kernel
    }

    pub fn points(&self) -> &Arc<CollocationSet> {
        &self.points
    }

    pub fn linear(&self) -> &[Complex64] {
        &self.linear
    }

    pub fn coefficients(&self) -> &[Complex] {
        &self.coeffs
    }

    /// Coefficients rounded to `f64` (lossless only when `eval_bits` is `None`).
    pub fn coefficients_f64(&self) -> &[Complex64] {
        &self.coeffs_f64
    }

    /// MPFR precision used by the evaluators, `None` for plain `f64`.
    pub fn eval_bits(&self) -> Option<u32> {
        self.eval_bits
    }

    pub fn reach(&self) -> f64 {
        self.reach
    }

    /// Degree of the tabulated Taylor form used ahead of MPFR, if any.
    pub fn monomial_degree(&self) -> Option<usize> {
        self.monomials.as_ref().map(|m| m.degree())
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `f(x)`.
    pub fn eval(&self, x: &[f64]) -> Result<Complex64> {
        self.check(x)?;
        Ok(match self.eval_bits {
            None => self.value_f64(x),
            Some(bits) => match self.monomials.as_ref().and_then(|m| m.value(x)) {
                Some(v) => v,
                None => hp::to_c64(&self.value_hp(x, bits)),
            },
        })
    }

    /// `f(x)` together with the directional derivative `⟨dir, ∇f(x)⟩`.
    pub fn eval_with_derivative(&self, x: &[f64], dir: &[f64]) -> Result<(Complex64, Complex64)> {
        self.check(x)?;
        self.check(dir)?;
        Ok(match self.eval_bits {
            None => self.value_and_derivative_f64(x, dir),
            Some(bits) => match self.monomials.as_ref().and_then(|m| m.value_and_derivative(x, dir)) {
                Some(vd) => vd,
                None => {
                    let (v, d) = self.value_and_derivative_hp(x, dir, bits);
                    (hp::to_c64(&v), hp::to_c64(&d))
                }
            },
        })
    }

    /// `∇f(x) = w + Σᵢ cᵢ η qᵢ (exp(η⟨qᵢ,x⟩) − 1)`.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        self.check(x)?;
        let eta = self.kernel.eta;
        match self.eval_bits {
            None => {
                let mut g = self.linear.clone();
                for (q, c) in self.points.points().iter().zip(&self.coeffs_f64) {
                    let d = c * (eta * (eta * dot(q, x)).exp_m1());
                    for (gk, qk) in g.iter_mut().zip(q) {
                        *gk += d * qk;
                    }
                }
                Ok(g)
            }
            Some(bits) => {
                let mut g: Vec<Complex> = self.linear.iter().map(|z| hp::complex(bits, *z)).collect();
                let mut tmp = Complex::new(bits);
                for (q, c) in self.points.points().iter().zip(&self.coeffs) {
                    let mut d = self.kernel.exponent_hp(q, x, bits);
                    d.exp_m1_mut();
                    d *= eta;
                    let cd = Complex::with_val(bits, c * &d);
                    for (gk, qk) in g.iter_mut().zip(q) {
                        tmp.assign(&cd * *qk);
                        *gk += &tmp;
                    }
                }
                Ok(g.iter().map(hp::to_c64).collect())
            }
        }
    }

    /// `f(x)` in MPFR at the evaluation precision (or 128 bits in the `f64` tier).
    pub fn eval_hp(&self, x: &[f64]) -> Result<Complex> {
        self.check(x)?;
        Ok(self.value_hp(x, self.eval_bits.unwrap_or(128)))
    }

    /// Value and directional derivative in MPFR at `bits`.
    pub(crate) fn value_and_derivative_hp(&self, x: &[f64], dir: &[f64], bits: u32) -> (Complex, Complex) {
        let eta = self.kernel.eta;
        let mut val = Complex::with_val(bits, (0.0, 0.0));
        let mut der = Complex::with_val(bits, (0.0, 0.0));
        let mut tmp = Complex::new(bits);
        for ((wk, xk), dk) in self.linear.iter().zip(x).zip(dir) {
            tmp.assign(hp::complex(bits, *wk) * *xk);
            val += &tmp;
            tmp.assign(hp::complex(bits, *wk) * *dk);
            der += &tmp;
        }
        let mut km = Float::new(bits);
        let mut s = Float::new(bits);
        let mut prod = Float::new(bits);
        for (q, c) in self.points.points().iter().zip(&self.coeffs) {
            let t = self.kernel.exponent_hp(q, x, bits);
            let em1 = t.exp_m1_ref().complete(bits);
            // k₂ = (e^t − 1) + 1 − t
            km.assign(&em1 - &t);
            km += 1u32;
            tmp.assign(c * &km);
            val += &tmp;
            s.assign(0u32);
            for (qk, dk) in q.iter().zip(dir) {
                prod.assign(*qk);
                prod *= *dk;
                s += &prod;
            }
            s *= &em1;
            s *= eta;
            tmp.assign(c * &s);
            der += &tmp;
        }
        (val, der)
    }

    fn value_hp(&self, x: &[f64], bits: u32) -> Complex {
        let mut val = Complex::with_val(bits, (0.0, 0.0));
        let mut tmp = Complex::new(bits);
        for (wk, xk) in self.linear.iter().zip(x) {
            tmp.assign(hp::complex(bits, *wk) * *xk);
            val += &tmp;
        }
        let mut k = Float::new(bits);
        for (q, c) in self.points.points().iter().zip(&self.coeffs) {
            let t = self.kernel.exponent_hp(q, x, bits);
            k.assign(t.exp_ref());
            k -= &t;
            tmp.assign(c * &k);
            val += &tmp;
        }
        val
    }

    fn value_f64(&self, x: &[f64]) -> Complex64 {
        let mut val: Complex64 = self.linear.iter().zip(x).map(|(w, v)| w * v).sum();
        for (q, c) in self.points.points().iter().zip(&self.coeffs_f64) {
            let t = self.kernel.eta * dot(q, x);
            val += c * (t.exp() - t);
        }
        val
    }

    fn value_and_derivative_f64(&self, x: &[f64], dir: &[f64]) -> (Complex64, Complex64) {
        let eta = self.kernel.eta;
        let mut val: Complex64 = self.linear.iter().zip(x).map(|(w, v)| w * v).sum();
        let mut der: Complex64 = self.linear.iter().zip(dir).map(|(w, v)| w * v).sum();
        for (q, c) in self.points.points().iter().zip(&self.coeffs_f64) {
            let t = eta * dot(q, x);
            let em1 = t.exp_m1();
            val += c * (em1 + 1.0 - t);
            der += c * (eta * em1 * dot(q, dir));
        }
        (val, der)
    }
}
