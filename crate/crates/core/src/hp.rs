//! MPFR-backed dense linear algebra for the Gram and collocation systems.
//!
//! The exponential kernel split over a small collocation box produces Gram
//! matrices whose eigenvalues span thirty or more decades, so every
//! factorization in the pipeline is carried out here at a working precision
//! chosen from the conditioning (see [`bits_for_condition`]).

use nalgebra::{DVector, Dyn};
use num_complex::Complex64;
use rug::ops::{CompleteRound, NegAssign};
use rug::{Assign, Complex, Float};

/// Smallest working precision used for any factorization.
pub const MIN_BITS: u32 = 256;
/// Hard ceiling on the working precision.
pub const MAX_BITS: u32 = 8192;
/// Extra bits kept beyond `log2(κ)` so that solutions carry this many correct bits.
pub const GUARD_BITS: u32 = 192;

/// Working precision for a matrix whose condition number is `2^log2_cond`.
pub fn bits_for_condition(log2_cond: f64) -> u32 {
    let need = if log2_cond.is_finite() { log2_cond.max(0.0).ceil() as u32 } else { MAX_BITS };
    let bits = need.saturating_add(GUARD_BITS).clamp(MIN_BITS, MAX_BITS);
    bits.div_ceil(64) * 64
}

#[inline]
pub fn real(bits: u32, x: f64) -> Float {
    Float::with_val(bits, x)
}

#[inline]
pub fn complex(bits: u32, z: Complex64) -> Complex {
    Complex::with_val(bits, (z.re, z.im))
}

#[inline]
pub fn to_c64(z: &Complex) -> Complex64 {
    Complex64::new(z.real().to_f64(), z.imag().to_f64())
}

#[inline]
fn cabs(z: &Complex) -> f64 {
    z.real().to_f64().hypot(z.imag().to_f64())
}

/// Row-major dense matrix of MPFR values.
#[derive(Debug, Clone)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type RealMat = Mat<Float>;
pub type ComplexMat = Mat<Complex>;

impl<T> Mat<T> {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[i * self.cols + j]
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        let (lo, hi) = (a.min(b), a.max(b));
        let (head, tail) = self.data.split_at_mut(hi * self.cols);
        head[lo * self.cols..(lo + 1) * self.cols].swap_with_slice(&mut tail[..self.cols]);
    }
}

impl RealMat {
    pub fn to_f64(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).to_f64())
    }
}

impl ComplexMat {
    pub fn to_c64(&self) -> nalgebra::DMatrix<Complex64> {
        nalgebra::DMatrix::from_fn(self.rows, self.cols, |i, j| to_c64(self.get(i, j)))
    }

    fn norm1(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| cabs(self.get(i, j))).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Lower Cholesky factor `G = L Lᵀ` of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    bits: u32,
    l: RealMat,
}

impl Cholesky {
    /// Factors `g`, reading only its lower triangle. On failure returns the
    /// index of the first non-positive pivot.
    pub fn factor(g: &RealMat, bits: u32) -> Result<Self, usize> {
        let n = g.rows();
        assert_eq!(n, g.cols());
        let mut l = Mat::from_fn(n, n, |_, _| Float::new(bits));
        let mut acc = Float::new(bits);
        for j in 0..n {
            acc.assign(g.get(j, j));
            for k in 0..j {
                acc -= l.get(j, k).square_ref().complete(bits);
            }
            if !acc.is_finite() || acc <= 0 {
                return Err(j);
            }
            let d = acc.clone().sqrt();
            for i in j + 1..n {
                acc.assign(g.get(i, j));
                {
                    let (ri, rj) = (l.row(i), l.row(j));
                    for k in 0..j {
                        acc -= &ri[k] * &rj[k];
                    }
                }
                acc /= &d;
                l.get_mut(i, j).assign(&acc);
            }
            *l.get_mut(j, j) = d;
        }
        Ok(Self { bits, l })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Diagonal of the factor (the square roots of the pivots).
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.l.get(i, i).to_f64()).collect()
    }

    /// `log2` of the condition estimate `(max Lᵢᵢ / min Lᵢᵢ)²`.
    pub fn log2_condition(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for i in 0..self.dim() {
            // log2 via MPFR keeps this meaningful below f64's exponent range too
            let v = self.l.get(i, i).clone().log2().to_f64();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        2.0 * (hi - lo)
    }

    pub fn factor_matrix(&self) -> &RealMat {
        &self.l
    }

    /// Solves `G x = b` for complex `b`.
    pub fn solve_complex(&self, b: &[Complex]) -> Vec<Complex> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut y: Vec<Complex> = b.iter().map(|z| Complex::with_val(self.bits, z)).collect();
        let mut tmp = Complex::new(self.bits);
        for i in 0..n {
            let row = self.l.row(i);
            for k in 0..i {
                tmp.assign(&y[k] * &row[k]);
                y[i] -= &tmp;
            }
            y[i] /= &row[i];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                tmp.assign(&y[k] * self.l.get(k, i));
                y[i] -= &tmp;
            }
            y[i] /= self.l.get(i, i);
        }
        y
    }

    /// Solves `G x = b` for real `b`.
    pub fn solve_real(&self, b: &[Float]) -> Vec<Float> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut y: Vec<Float> = b.iter().map(|z| Float::with_val(self.bits, z)).collect();
        for i in 0..n {
            let row = self.l.row(i);
            for k in 0..i {
                let t = Float::with_val(self.bits, &y[k] * &row[k]);
                y[i] -= t;
            }
            y[i] /= &row[i];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let t = Float::with_val(self.bits, &y[k] * self.l.get(k, i));
                y[i] -= t;
            }
            y[i] /= self.l.get(i, i);
        }
        y
    }
}

/// `P M = L U` with partial pivoting for a square complex matrix.
#[derive(Debug, Clone)]
pub struct ComplexLu {
    bits: u32,
    lu: ComplexMat,
    perm: Vec<usize>,
    norm1: f64,
}

impl ComplexLu {
    /// Factors `m`. On an exactly zero pivot returns its column index.
    pub fn factor(mut m: ComplexMat, bits: u32) -> Result<Self, usize> {
        let n = m.rows();
        assert_eq!(n, m.cols());
        let norm1 = m.norm1();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut factor = Complex::new(bits);
        let mut tmp = Complex::new(bits);
        for k in 0..n {
            let (p, pmag) = (k..n)
                .map(|i| (i, cabs(m.get(i, k))))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pmag > 0.0) || !pmag.is_finite() {
                return Err(k);
            }
            m.swap_rows(k, p);
            perm.swap(k, p);
            let pivot = m.get(k, k).clone();
            for i in k + 1..n {
                factor.assign(m.get(i, k) / &pivot);
                let (head, tail) = m.data.split_at_mut(i * n);
                let rk = &head[k * n..(k + 1) * n];
                let ri = &mut tail[..n];
                for j in k + 1..n {
                    tmp.assign(&factor * &rk[j]);
                    ri[j] -= &tmp;
                }
                ri[k].assign(&factor);
            }
        }
        Ok(Self { bits, lu: m, perm, norm1 })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn dim(&self) -> usize {
        self.lu.rows()
    }

    /// Solves `M x = b`.
    pub fn solve(&self, b: &[Complex]) -> Vec<Complex> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut y: Vec<Complex> = self.perm.iter().map(|&p| Complex::with_val(self.bits, &b[p])).collect();
        let mut tmp = Complex::new(self.bits);
        for i in 0..n {
            let row = self.lu.row(i);
            for k in 0..i {
                tmp.assign(&row[k] * &y[k]);
                y[i] -= &tmp;
            }
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            for k in i + 1..n {
                tmp.assign(&row[k] * &y[k]);
                y[i] -= &tmp;
            }
            y[i] /= &row[i];
        }
        y
    }

    /// Solves `Mᴴ x = b`.
    pub fn solve_adjoint(&self, b: &[Complex]) -> Vec<Complex> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        // Mᴴ = Uᴴ Lᴴ P, so solve Uᴴ z = b, Lᴴ y = z, x = Pᵀ y.
        let mut z: Vec<Complex> = b.iter().map(|v| Complex::with_val(self.bits, v)).collect();
        let mut tmp = Complex::new(self.bits);
        let mut c = Complex::new(self.bits);
        for i in 0..n {
            for k in 0..i {
                c.assign(self.lu.get(k, i));
                c.conj_mut();
                tmp.assign(&c * &z[k]);
                z[i] -= &tmp;
            }
            c.assign(self.lu.get(i, i));
            c.conj_mut();
            z[i] /= &c;
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                c.assign(self.lu.get(k, i));
                c.conj_mut();
                tmp.assign(&c * &z[k]);
                z[i] -= &tmp;
            }
        }
        let mut x = vec![Complex::new(self.bits); n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p].assign(&z[i]);
        }
        x
    }

    /// Estimate of the 1-norm condition number `‖M‖₁‖M⁻¹‖₁` (Hager–Higham).
    pub fn condition_estimate(&self) -> f64 {
        let n = self.dim();
        if n == 0 {
            return 1.0;
        }
        let bits = self.bits;
        let mut x: Vec<Complex> = vec![Complex::with_val(bits, (1.0 / n as f64, 0.0)); n];
        let mut est = 0.0;
        for iter in 0..5 {
            let y = self.solve(&x);
            let ynorm: f64 = y.iter().map(cabs).sum();
            if iter > 0 && ynorm <= est {
                break;
            }
            est = ynorm;
            let xi: Vec<Complex> = y
                .iter()
                .map(|v| {
                    let a = cabs(v);
                    if a > 0.0 {
                        let mut s = Complex::with_val(bits, v);
                        s /= a;
                        s
                    } else {
                        Complex::with_val(bits, (1.0, 0.0))
                    }
                })
                .collect();
            let z = self.solve_adjoint(&xi);
            let (j, zmax) = z
                .iter()
                .enumerate()
                .map(|(i, v)| (i, cabs(v)))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            let ztx: f64 = z
                .iter()
                .zip(&x)
                .map(|(zi, xi)| zi.real().to_f64() * xi.real().to_f64() + zi.imag().to_f64() * xi.imag().to_f64())
                .sum();
            if iter > 0 && zmax <= ztx {
                break;
            }
            x = vec![Complex::new(bits); n];
            x[j].assign((1.0, 0.0));
        }
        est * self.norm1
    }
}

/// Minimum-norm least-squares solution of `M x ≈ b` through a complete
/// orthogonal decomposition built from Householder QR with column pivoting.
///
/// Columns whose pivot magnitude falls below `rtol · |R₁₁|` are treated as
/// rank deficient. Returns the solution and the numerical rank.
pub fn min_norm_lstsq(m: &ComplexMat, b: &[Complex], rtol: f64, bits: u32) -> (Vec<Complex>, usize) {
    let (rows, cols) = (m.rows(), m.cols());
    assert_eq!(b.len(), rows);
    let mut a: Vec<Vec<Complex>> = (0..cols)
        .map(|j| (0..rows).map(|i| Complex::with_val(bits, m.get(i, j))).collect())
        .collect();
    let mut rhs: Vec<Complex> = b.iter().map(|v| Complex::with_val(bits, v)).collect();
    let mut perm: Vec<usize> = (0..cols).collect();
    let kmax = rows.min(cols);
    let mut rank = 0;
    let mut r11 = 0.0;
    for k in 0..kmax {
        // pivot on the largest remaining column norm
        let (p, _) = (k..cols)
            .map(|j| (j, col_norm_sq(&a[j][k..], bits)))
            .fold((k, Float::new(bits)), |best, cur| if cur.1 > best.1 { cur } else { best });
        a.swap(k, p);
        perm.swap(k, p);
        let norm = col_norm_sq(&a[k][k..], bits).sqrt();
        let norm_f = norm.to_f64();
        if k == 0 {
            r11 = norm_f;
        }
        if !(norm_f > rtol * r11) || norm_f == 0.0 {
            break;
        }
        let v = householder(&a[k][k..], &norm, bits);
        for col in a.iter_mut().skip(k) {
            apply_reflector(&v, &mut col[k..], bits);
        }
        apply_reflector(&v, &mut rhs[k..], bits);
        rank += 1;
    }
    // R = [R11 R12] is rank x cols (upper trapezoidal). Reduce [R11 R12]ᴴ = Z T
    // with a second QR, so that x = P Z T⁻ᴴ c with c = (Qᴴ b)[..rank].
    let mut rt: Vec<Vec<Complex>> = (0..rank)
        .map(|i| {
            (0..cols)
                .map(|j| {
                    if j < i {
                        Complex::new(bits)
                    } else {
                        let mut z = Complex::with_val(bits, &a[j][i]);
                        z.conj_mut();
                        z
                    }
                })
                .collect()
        })
        .collect();
    let mut reflectors = Vec::with_capacity(rank);
    for k in 0..rank {
        let norm = col_norm_sq(&rt[k][k..], bits).sqrt();
        let v = householder(&rt[k][k..], &norm, bits);
        for col in rt.iter_mut().skip(k) {
            apply_reflector(&v, &mut col[k..], bits);
        }
        reflectors.push(v);
    }
    // T is upper triangular (rank x rank) stored column-wise in rt[j][i], i <= j.
    // Solve Tᴴ y = c (forward substitution on the lower-triangular Tᴴ).
    let mut y: Vec<Complex> = Vec::with_capacity(rank);
    let mut tmp = Complex::new(bits);
    for i in 0..rank {
        let mut acc = Complex::with_val(bits, &rhs[i]);
        for (k, yk) in y.iter().enumerate() {
            let mut t = Complex::with_val(bits, &rt[i][k]);
            t.conj_mut();
            tmp.assign(&t * yk);
            acc -= &tmp;
        }
        let mut d = Complex::with_val(bits, &rt[i][i]);
        d.conj_mut();
        acc /= &d;
        y.push(acc);
    }
    // z = Z [y; 0], applying the reflectors in reverse order.
    let mut z: Vec<Complex> = (0..cols)
        .map(|i| if i < rank { y[i].clone() } else { Complex::new(bits) })
        .collect();
    for (k, v) in reflectors.iter().enumerate().rev() {
        apply_reflector(v, &mut z[k..], bits);
    }
    let mut x = vec![Complex::new(bits); cols];
    for (i, &p) in perm.iter().enumerate() {
        x[p].assign(&z[i]);
    }
    (x, rank)
}

fn col_norm_sq(col: &[Complex], bits: u32) -> Float {
    let mut s = Float::new(bits);
    for z in col {
        s += z.real().square_ref().complete(bits);
        s += z.imag().square_ref().complete(bits);
    }
    s
}

/// Householder vector `v` (unit 2-norm) with `(I − 2vvᴴ)x = α e₁`.
fn householder(x: &[Complex], norm: &Float, bits: u32) -> Vec<Complex> {
    let mut v: Vec<Complex> = x.iter().map(|z| Complex::with_val(bits, z)).collect();
    if norm.is_zero() {
        return v;
    }
    let x0 = cabs(&x[0]);
    // α = −e^{i arg x₀}‖x‖, v = x − α e₁
    let mut phase = if x0 > 0.0 {
        let a = Float::with_val(bits, x[0].abs_ref());
        let mut p = Complex::with_val(bits, &x[0]);
        p /= &a;
        p
    } else {
        Complex::with_val(bits, (1.0, 0.0))
    };
    phase *= norm;
    v[0] += &phase;
    let vn = col_norm_sq(&v, bits).sqrt();
    if !vn.is_zero() {
        for z in v.iter_mut() {
            *z /= &vn;
        }
    }
    v
}

fn apply_reflector(v: &[Complex], x: &mut [Complex], bits: u32) {
    // x ← x − 2 v (vᴴ x)
    let mut dot = Complex::new(bits);
    let mut tmp = Complex::new(bits);
    let mut c = Complex::new(bits);
    for (vi, xi) in v.iter().zip(x.iter()) {
        c.assign(vi);
        c.conj_mut();
        tmp.assign(&c * xi);
        dot += &tmp;
    }
    dot *= 2;
    for (vi, xi) in v.iter().zip(x.iter_mut()) {
        tmp.assign(vi * &dot);
        *xi -= &tmp;
    }
}

/// Matrix–vector product `M x`.
pub fn matvec(m: &ComplexMat, x: &[Complex], bits: u32) -> Vec<Complex> {
    let mut tmp = Complex::new(bits);
    (0..m.rows())
        .map(|i| {
            let mut acc = Complex::new(bits);
            for (a, b) in m.row(i).iter().zip(x) {
                tmp.assign(a * b);
                acc += &tmp;
            }
            acc
        })
        .collect()
}

/// Exact hexadecimal text encoding of an MPFR value (`<prec>:<mantissa>@<exp>`).
pub fn float_to_hex(x: &Float) -> String {
    format!("{}:{}", x.prec(), x.to_string_radix(16, None))
}

pub fn float_from_hex(s: &str) -> Option<Float> {
    let (prec, body) = s.split_once(':')?;
    let prec: u32 = prec.parse().ok()?;
    if !(rug::float::prec_min()..=rug::float::prec_max()).contains(&prec) {
        return None;
    }
    let parsed = Float::parse_radix(body, 16).ok()?;
    Some(Float::with_val(prec, parsed))
}

/// Negated copy, used when forming right-hand sides.
pub fn neg(z: &Complex) -> Complex {
    let mut c = z.clone();
    c.neg_assign();
    c
}


/// `‖M⁻¹‖₁` estimate (Hager–Higham) from solves with `M` and `Mᴴ` in `f64`.
fn hager_inverse_norm1(n: usize, solve: impl Fn(&DVector<Complex64>) -> DVector<Complex64>, solve_adj: impl Fn(&DVector<Complex64>) -> DVector<Complex64>) -> f64 {
    let mut x = DVector::from_element(n, Complex64::new(1.0 / n as f64, 0.0));
    let mut est = 0.0;
    for iter in 0..5 {
        let y = solve(&x);
        let ynorm: f64 = y.iter().map(|v| v.norm()).sum();
        if !ynorm.is_finite() {
            return f64::INFINITY;
        }
        if iter > 0 && ynorm <= est {
            break;
        }
        est = ynorm;
        let xi = y.map(|v| if v.norm() > 0.0 { v / v.norm() } else { Complex64::new(1.0, 0.0) });
        let z = solve_adj(&xi);
        let (j, zmax) = z.iter().enumerate().map(|(i, v)| (i, v.norm())).fold((0, -1.0), |b, c| if c.1 > b.1 { c } else { b });
        let ztx: f64 = z.iter().zip(x.iter()).map(|(a, b)| (a.conj() * b).re).sum();
        if iter > 0 && zmax <= ztx {
            break;
        }
        x = DVector::zeros(n);
        x[j] = Complex64::new(1.0, 0.0);
    }
    est
}

/// Largest `f64` condition estimate for which the refined `f64` path is used.
const F64_CONDITION_LIMIT: f64 = 1e12;

enum Backend {
    /// `f64` LU of `M` refined against the MPFR residual.
    Refined(nalgebra::LU<Complex64, Dyn, Dyn>),
    Full(ComplexLu),
}

/// Square complex solver that factors in `f64` and recovers full working
/// precision by iterative refinement when `M` is well enough conditioned,
/// and otherwise factors in MPFR.
pub struct MixedSolver {
    m: ComplexMat,
    bits: u32,
    backend: Backend,
    log2_cond: f64,
}

impl std::fmt::Debug for MixedSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MixedSolver")
            .field("dim", &self.m.rows())
            .field("bits", &self.bits)
            .field("refined", &self.is_refined())
            .field("log2_cond", &self.log2_cond)
            .finish()
    }
}

impl MixedSolver {
    /// On an exactly singular MPFR factorization returns the zero pivot column.
    pub fn new(m: ComplexMat, bits: u32) -> Result<Self, usize> {
        let n = m.rows();
        assert_eq!(n, m.cols());
        let m64 = m.to_c64();
        if m64.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            let norm1 = (0..n).map(|j| m64.column(j).iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max);
            let lu = m64.clone().lu();
            let lu_adj = m64.adjoint().lu();
            let inv = hager_inverse_norm1(
                n,
                |b| lu.solve(b).unwrap_or_else(|| DVector::from_element(n, Complex64::new(f64::INFINITY, 0.0))),
                |b| lu_adj.solve(b).unwrap_or_else(|| DVector::from_element(n, Complex64::new(f64::INFINITY, 0.0))),
            );
            let cond = norm1 * inv;
            if cond.is_finite() && cond <= F64_CONDITION_LIMIT {
                return Ok(Self {
                    m,
                    bits,
                    backend: Backend::Refined(lu),
                    log2_cond: cond.log2(),
                });
            }
        }
        let lu = ComplexLu::factor(m.clone(), bits)?;
        let log2_cond = lu.condition_estimate().log2();
        Ok(Self {
            m,
            bits,
            backend: Backend::Full(lu),
            log2_cond,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn is_refined(&self) -> bool {
        matches!(self.backend, Backend::Refined(_))
    }

    /// `log2` of the 1-norm condition estimate.
    pub fn log2_condition(&self) -> f64 {
        self.log2_cond
    }

    pub fn matrix(&self) -> &ComplexMat {
        &self.m
    }

    /// Solves `M x = b` to about `bits − 64` correct bits (relative).
    pub fn solve(&self, b: &[Complex]) -> Vec<Complex> {
        match &self.backend {
            Backend::Full(lu) => lu.solve(b),
            Backend::Refined(lu) => self.refine(lu, b).unwrap_or_else(|| {
                // refinement stalled: fall back to a full factorization
                ComplexLu::factor(self.m.clone(), self.bits)
                    .map(|f| f.solve(b))
                    .unwrap_or_else(|_| vec![Complex::with_val(self.bits, (f64::NAN, f64::NAN)); b.len()])
            }),
        }
    }

    fn refine(&self, lu: &nalgebra::LU<Complex64, Dyn, Dyn>, b: &[Complex]) -> Option<Vec<Complex>> {
        let n = b.len();
        let bits = self.bits;
        let mut x = vec![Complex::with_val(bits, (0.0, 0.0)); n];
        let mut r: Vec<Complex> = b.to_vec();
        let target = (2f64).powi(-(bits as i32 - 64).max(53));
        let mut last = f64::INFINITY;
        let mut stalls = 0;
        for _ in 0..200 {
            // scale the residual into f64 range before the correction solve
            let rmax = r.iter().map(|z| z.real().clone().abs().max(&z.imag().clone().abs())).fold(Float::new(bits), |a, b| a.max(&b));
            if rmax.is_zero() {
                return Some(x);
            }
            let exp = rmax.get_exp().unwrap_or(0);
            let rs = DVector::from_iterator(n, r.iter().map(|z| {
                let mut w = z.clone();
                w >>= exp;
                to_c64(&w)
            }));
            let d = lu.solve(&rs)?;
            if d.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
                return None;
            }
            let mut dn = 0.0f64;
            let mut xn = 0.0f64;
            for (xi, di) in x.iter_mut().zip(d.iter()) {
                let mut dh = complex(bits, *di);
                dh <<= exp;
                *xi += &dh;
                dn = dn.max(cabs(&dh));
                xn = xn.max(cabs(xi));
            }
            if dn <= target * xn {
                return Some(x);
            }
            if dn > 0.5 * last {
                stalls += 1;
                if stalls >= 3 {
                    return None;
                }
            }
            last = dn;
            let mx = matvec(&self.m, &x, bits);
            for (ri, (bi, mi)) in r.iter_mut().zip(b.iter().zip(&mx)) {
                ri.assign(bi - mi);
            }
        }
        None
    }
}
