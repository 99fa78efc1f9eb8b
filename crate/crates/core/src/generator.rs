//! Finite-dimensional representation of the Koopman generator on
//! `span{x₁,…,xₙ} ⊕ span{k₂(qᵢ,·)}` and the eigenfunction solve.
//!
//! With `N(x) = F(x) − J x`, `N_ij = N_j(q_i)` and
//! `A_ij = (ℒ k₂(q_j, ·))(q_i) = η (exp(η⟨q_j,q_i⟩) − 1) ⟨q_j, F(q_i)⟩`, the
//! generator acts on coefficient vectors `[a; b]` of `aᵀx + Σ bᵢ k₂(qᵢ,x)` as
//!
//! ```text
//! L = [ Jᵀ      0     ]
//!     [ G⁻¹N    G⁻¹A  ]
//! ```
//!
//! Block-triangularity puts every eigenvalue of `J` in `σ(L)`. For a left
//! eigenpair `Jᵀw = λw` the matching eigenvector is `[w; v]` with
//! `(A − λG) v = −N w`, which is solved without forming `G⁻¹`.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rug::ops::NegAssign;
use rug::{Assign, Complex, Float};
use serde::{Deserialize, Serialize};

use crate::dynsys::VectorField;
use crate::hp::{self, ComplexMat, MixedSolver, RealMat};
use crate::kernel::{CollocationSet, GramMatrix, KernelExpansion, TaylorKernel};
use crate::par::*;
use crate::{Error, Result};

/// Eigenvalues whose real part is below this (relative to `1 + max|J_ij|`)
/// violate hyperbolicity.
pub const HYPERBOLICITY_TOL: f64 = 1e-8;

/// Eigenvalues closer than this (relative) are treated as one repeated eigenvalue.
const CLUSTER_TOL: f64 = 1e-6;

/// Smallest admissible singular value of the unit-column eigenvector matrix.
const DEFECT_TOL: f64 = 1e-8;

/// Bits beyond `log2 κ(A − λG)` required for a direct solve.
const SOLVE_GUARD_BITS: f64 = 117.0;

/// One eigenvalue of `J` with a unit left eigenvector (eigenvector of `Jᵀ`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub lambda: Complex64,
    pub w: Vec<Complex64>,
    /// Index of the conjugate partner for non-real eigenvalues.
    pub conjugate: Option<usize>,
    /// Real eigenvalues and the `Im λ > 0` member of each conjugate pair.
    pub representative: bool,
}

/// All `n` eigenpairs, sorted by decreasing real part with each `Im λ > 0`
/// representative immediately followed by its conjugate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pairs: Vec<EigenPair>,
}

impl Spectrum {
    pub fn pairs(&self) -> &[EigenPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn eigenvalues(&self) -> Vec<Complex64> {
        self.pairs.iter().map(|p| p.lambda).collect()
    }

    pub fn representatives(&self) -> impl Iterator<Item = &EigenPair> {
        self.pairs.iter().filter(|p| p.representative)
    }

    pub fn is_hurwitz(&self) -> bool {
        self.pairs.iter().all(|p| p.lambda.re < 0.0)
    }
}

/// Eigenpairs of `Jᵀ`.
///
/// Vectors have unit 2-norm; real eigenvalues get real vectors with a positive
/// first nonzero entry, complex ones a real positive first nonzero entry.
/// Conjugate partners carry exactly conjugated values.
pub fn left_eigenpairs(j: &DMatrix<f64>) -> Result<Spectrum> {
    let n = j.nrows();
    if j.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: j.ncols() });
    }
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Jacobian"));
    }
    let scale = 1.0 + j.abs().max();
    let mut eigs: Vec<Complex64> = j.complex_eigenvalues().iter().copied().collect();
    for ev in &eigs {
        if ev.re.abs() < HYPERBOLICITY_TOL * scale {
            return Err(Error::NonHyperbolic { re: ev.re, im: ev.im });
        }
    }
    for ev in eigs.iter_mut() {
        if ev.im.abs() <= 1e-12 * scale {
            ev.im = 0.0;
        }
    }
    // keep one member per conjugate pair
    let mut upper: Vec<Complex64> = eigs.iter().copied().filter(|z| z.im >= 0.0).collect();
    upper.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    let mut clusters: Vec<Vec<Complex64>> = Vec::new();
    for z in upper {
        match clusters.last_mut() {
            Some(c) if (c[0] - z).norm() <= CLUSTER_TOL * scale => c.push(z),
            _ => clusters.push(vec![z]),
        }
    }
    let jt = j.transpose();
    let mut pairs = Vec::with_capacity(n);
    for cluster in clusters {
        let k = cluster.len();
        let mu = cluster.iter().sum::<Complex64>() / k as f64;
        let basis = if mu.im == 0.0 {
            let shifted = &jt - DMatrix::identity(n, n) * mu.re;
            null_space(&shifted.map(|v| Complex64::new(v, 0.0)), k, scale)
        } else {
            let shifted = jt.map(|v| Complex64::new(v, 0.0)) - DMatrix::identity(n, n) * mu;
            null_space(&shifted, k, scale)
        };
        let Some(basis) = basis else {
            let rank = null_space_dim(&(jt.map(|v| Complex64::new(v, 0.0)) - DMatrix::identity(n, n) * mu), scale);
            return Err(Error::Defective {
                re: mu.re,
                im: mu.im,
                multiplicity: k,
                rank,
            });
        };
        for w in basis {
            if mu.im == 0.0 {
                let w: Vec<Complex64> = normalize(w.iter().map(|z| Complex64::new(z.re, 0.0)).collect());
                pairs.push(EigenPair {
                    lambda: Complex64::new(mu.re, 0.0),
                    w,
                    conjugate: None,
                    representative: true,
                });
            } else {
                let w = normalize(w);
                let idx = pairs.len();
                pairs.push(EigenPair {
                    lambda: mu,
                    w: w.clone(),
                    conjugate: Some(idx + 1),
                    representative: true,
                });
                pairs.push(EigenPair {
                    lambda: mu.conj(),
                    w: w.iter().map(|z| z.conj()).collect(),
                    conjugate: Some(idx),
                    representative: false,
                });
            }
        }
    }
    if pairs.len() != n {
        return Err(Error::InvalidArgument(format!(
            "eigen-decomposition produced {} eigenpairs for a {n}×{n} matrix",
            pairs.len()
        )));
    }
    // the eigenvectors must span ℂⁿ
    let w = DMatrix::from_fn(n, n, |r, c| pairs[c].w[r]);
    let sv = w.singular_values();
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if smin < DEFECT_TOL {
        let p = &pairs[0];
        return Err(Error::Defective {
            re: p.lambda.re,
            im: p.lambda.im,
            multiplicity: n,
            rank: n - 1,
        });
    }
    Ok(Spectrum { pairs })
}

/// `k` orthonormal vectors spanning the numerical null space of `m`, or `None`
/// if it is smaller than `k`.
fn null_space(m: &DMatrix<Complex64>, k: usize, scale: f64) -> Option<Vec<Vec<Complex64>>> {
    let n = m.nrows();
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.as_ref()?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let tol = 1e-7 * scale;
    let chosen = &order[..k];
    if chosen.iter().any(|&i| svd.singular_values[i] > tol) {
        return None;
    }
    Some(chosen.iter().map(|&i| vt.row(i).iter().map(|z| z.conj()).collect()).collect())
}

fn null_space_dim(m: &DMatrix<Complex64>, scale: f64) -> usize {
    m.clone().singular_values().iter().filter(|&&s| s <= 1e-7 * scale).count()
}

fn normalize(mut w: Vec<Complex64>) -> Vec<Complex64> {
    let norm = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let wmax = w.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let first = w.iter().copied().find(|z| z.norm() > 1e-10 * wmax).unwrap_or(Complex64::new(1.0, 0.0));
    let phase = first.conj() / first.norm();
    for z in w.iter_mut() {
        *z = *z * phase / norm;
    }
    w
}

/// `G`, `N`, `A` and `J` for one system, kernel and collocation set.
#[derive(Debug, Clone)]
pub struct GeneratorMatrices {
    vf: VectorField,
    gram: GramMatrix,
    jac: DMatrix<f64>,
    field_values: Vec<Vec<f64>>,
    nmat: RealMat,
    amat: RealMat,
}

/// Builds the generator blocks. Entries are in MPFR at the Gram precision.
pub fn assemble(vf: &VectorField, kernel: TaylorKernel, points: Arc<CollocationSet>) -> Result<GeneratorMatrices> {
    let n = vf.dim();
    if points.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: points.dim() });
    }
    for (i, q) in points.points().iter().enumerate() {
        if !vf.domain().contains_strictly(q) {
            return Err(Error::PointOutsideDomain(i));
        }
    }
    let jac = vf.jacobian_at_origin()?;
    let field_values = points
        .points()
        .iter()
        .enumerate()
        .map(|(i, q)| vf.eval_field(q).map_err(|e| Error::at(i, e)))
        .collect::<Result<Vec<_>>>()?;
    let gram = GramMatrix::new(kernel, points)?;
    let bits = gram.bits();
    let (nmat, amat) = nonlinear_blocks(&kernel, gram.points(), &field_values, &jac, bits);
    Ok(GeneratorMatrices {
        vf: vf.clone(),
        gram,
        jac,
        field_values,
        nmat,
        amat,
    })
}

fn nonlinear_blocks(kernel: &TaylorKernel, set: &CollocationSet, fq: &[Vec<f64>], jac: &DMatrix<f64>, bits: u32) -> (RealMat, RealMat) {
    let pts = set.points();
    let (m, n) = (pts.len(), set.dim());
    let eta = kernel.eta();
    // in f64 with the same summation order as a linear field, so that N
    // vanishes exactly when F is linear
    let nmat = RealMat::from_fn(m, n, |i, j| {
        let jq: f64 = (0..n).map(|k| jac[(j, k)] * pts[i][k]).sum();
        Float::with_val(bits, fq[i][j] - jq)
    });
    let rows: Vec<Vec<Float>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut s = Float::new(bits);
            let mut t = Float::new(bits);
            (0..m)
                .map(|j| {
                    let mut d = kernel.exponent_hp(&pts[j], &pts[i], bits);
                    d.exp_m1_mut();
                    d *= eta;
                    s.assign(0u32);
                    for (a, b) in pts[j].iter().zip(&fq[i]) {
                        t.assign(*a);
                        t *= *b;
                        s += &t;
                    }
                    d *= &s;
                    d
                })
                .collect()
        })
        .collect();
    let amat = RealMat::from_fn(m, m, |i, j| rows[i][j].clone());
    (nmat, amat)
}

impl GeneratorMatrices {
    pub fn vector_field(&self) -> &VectorField {
        &self.vf
    }

    pub fn gram(&self) -> &GramMatrix {
        &self.gram
    }

    pub fn kernel(&self) -> TaylorKernel {
        self.gram.kernel()
    }

    pub fn points(&self) -> &Arc<CollocationSet> {
        self.gram.points()
    }

    pub fn jac(&self) -> &DMatrix<f64> {
        &self.jac
    }

    /// `F(q_i)` for every collocation point.
    pub fn field_values(&self) -> &[Vec<f64>] {
        &self.field_values
    }

    pub fn bits(&self) -> u32 {
        self.gram.bits()
    }

    /// `m` collocation points.
    pub fn len(&self) -> usize {
        self.field_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.field_values.is_empty()
    }

    pub fn nmat(&self) -> DMatrix<f64> {
        self.nmat.to_f64()
    }

    pub fn amat(&self) -> DMatrix<f64> {
        self.amat.to_f64()
    }

    pub fn nmat_hp(&self) -> &RealMat {
        &self.nmat
    }

    pub fn amat_hp(&self) -> &RealMat {
        &self.amat
    }

    /// `(G, A, N)` at `bits`, recomputed when above the stored precision.
    fn blocks_at(&self, bits: u32) -> (RealMat, RealMat, RealMat) {
        if bits <= self.bits() {
            return (self.gram.entries().clone(), self.amat.clone(), self.nmat.clone());
        }
        let kernel = self.kernel();
        let pts = self.points().points();
        let g = RealMat::from_fn(pts.len(), pts.len(), |i, j| kernel.k2_hp(&pts[i], &pts[j], bits));
        let (n, a) = nonlinear_blocks(&kernel, self.points(), &self.field_values, &self.jac, bits);
        (g, a, n)
    }
}

/// Controls for [`solve_eigenfunction_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Treat `A − λG` as singular once its reciprocal condition estimate drops
    /// below this, regardless of working precision. `None` declares it singular
    /// only when no admissible precision resolves it.
    pub singular_rtol: Option<f64>,
    /// Report `φ(x) − φ(0)` instead of `φ(x)`.
    pub center: bool,
}

/// `φ(x) = wᵀx + Σᵢ vᵢ k₂(qᵢ, x)` for one eigenvalue of `J`.
#[derive(Debug, Clone)]
pub struct ApproxEigenfunction {
    lambda: Complex64,
    expansion: KernelExpansion,
    residual: f64,
    fallback_used: bool,
    solve_bits: u32,
    log10_condition: f64,
    offset: Complex64,
    centered: bool,
}

impl ApproxEigenfunction {
    /// Reassembles an eigenfunction from stored parts; the residual is recomputed.
    pub fn from_parts(lambda: Complex64, expansion: KernelExpansion, fallback_used: bool, solve_bits: u32, log10_condition: f64, vf: &VectorField) -> Result<Self> {
        let mut ef = Self {
            lambda,
            offset: offset_of(&expansion),
            expansion,
            residual: 0.0,
            fallback_used,
            solve_bits,
            log10_condition,
            centered: false,
        };
        ef.residual = collocation_residual(&ef, vf);
        Ok(ef)
    }

    pub fn lambda(&self) -> Complex64 {
        self.lambda
    }

    pub fn w(&self) -> &[Complex64] {
        self.expansion.linear()
    }

    /// Kernel coefficients rounded to `f64`.
    pub fn v(&self) -> &[Complex64] {
        self.expansion.coefficients_f64()
    }

    pub fn coefficients(&self) -> &[Complex] {
        self.expansion.coefficients()
    }

    pub fn expansion(&self) -> &KernelExpansion {
        &self.expansion
    }

    pub fn points(&self) -> &Arc<CollocationSet> {
        self.expansion.points()
    }

    pub fn kernel(&self) -> TaylorKernel {
        self.expansion.kernel()
    }

    /// Largest normalized collocation residual `|ℒφ(qᵢ) − λφ(qᵢ)| / (1 + |λφ(qᵢ)|)`.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn fallback_used(&self) -> bool {
        self.fallback_used
    }

    pub fn solve_bits(&self) -> u32 {
        self.solve_bits
    }

    /// `log10` of the condition estimate of `A − λG`.
    pub fn log10_condition(&self) -> f64 {
        self.log10_condition
    }

    /// `φ(0) = Σᵢ vᵢ` (before centering).
    pub fn offset(&self) -> Complex64 {
        self.offset
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// Switches between `φ` and `φ − φ(0)`. Centering breaks exact collocation.
    pub fn centered(mut self, on: bool) -> Self {
        self.centered = on;
        self
    }

    pub fn dim(&self) -> usize {
        self.expansion.dim()
    }

    pub fn eval(&self, x: &[f64]) -> Result<Complex64> {
        let v = self.expansion.eval(x)?;
        Ok(if self.centered { v - self.offset } else { v })
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        self.expansion.gradient(x)
    }

    /// `(φ(x), ⟨f, ∇φ(x)⟩)`; with `f = F(x)` the second entry is `ℒφ(x)`.
    pub fn eval_with_derivative(&self, x: &[f64], f: &[f64]) -> Result<(Complex64, Complex64)> {
        let (v, d) = self.expansion.eval_with_derivative(x, f)?;
        Ok((if self.centered { v - self.offset } else { v }, d))
    }

    /// `ℒφ(x) = ⟨F(x), ∇φ(x)⟩`.
    pub fn generator_value(&self, vf: &VectorField, x: &[f64]) -> Result<Complex64> {
        let f = vf.eval_field(x)?;
        Ok(self.eval_with_derivative(x, &f)?.1)
    }
}

fn offset_of(e: &KernelExpansion) -> Complex64 {
    let bits = e.coefficients().first().map_or(64, |c| c.prec().0);
    let mut s = Complex::with_val(bits, (0.0, 0.0));
    for c in e.coefficients() {
        s += c;
    }
    hp::to_c64(&s)
}

/// [`solve_eigenfunction_with`] with default options.
pub fn solve_eigenfunction(mats: &GeneratorMatrices, lambda: Complex64, w: &[Complex64]) -> Result<ApproxEigenfunction> {
    solve_eigenfunction_with(mats, lambda, w, &SolveOptions::default())
}

/// Solves `(A − λG) v = −N w`.
///
/// The working precision starts at the Gram precision and is raised until it
/// exceeds `log2 κ(A − λG)` by a safety margin. A minimum-norm least-squares
/// solution replaces the direct solve when the matrix is singular at the
/// highest precision or, with `singular_rtol`, below that reciprocal condition.
pub fn solve_eigenfunction_with(mats: &GeneratorMatrices, lambda: Complex64, w: &[Complex64], opts: &SolveOptions) -> Result<ApproxEigenfunction> {
    let n = mats.jac.nrows();
    if w.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: w.len() });
    }
    if !(lambda.re.is_finite() && lambda.im.is_finite()) || w.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
        return Err(Error::NonFinite("eigenpair"));
    }
    let m = mats.len();
    let mut bits = mats.bits();
    let (v, fallback_used, log2_cond, bits) = loop {
        let (g, a, nm) = mats.blocks_at(bits);
        let lam = hp::complex(bits, lambda);
        let mat = ComplexMat::from_fn(m, m, |i, j| {
            let mut z = Complex::with_val(bits, &lam * g.get(i, j));
            z.neg_assign();
            z += a.get(i, j);
            z
        });
        let wh: Vec<Complex> = w.iter().map(|z| hp::complex(bits, *z)).collect();
        let mut tmp = Complex::new(bits);
        let rhs: Vec<Complex> = (0..m)
            .map(|i| {
                let mut acc = Complex::with_val(bits, (0.0, 0.0));
                for (k, wk) in wh.iter().enumerate() {
                    tmp.assign(wk * nm.get(i, k));
                    acc -= &tmp;
                }
                acc
            })
            .collect();
        let lstsq = |mat: &ComplexMat, log2_cond: f64| {
            let rtol = opts.singular_rtol.unwrap_or_else(|| (2f64).powf(-(bits as f64 - SOLVE_GUARD_BITS)));
            let (v, _rank) = hp::min_norm_lstsq(mat, &rhs, rtol, bits);
            (v, true, log2_cond, bits)
        };
        match MixedSolver::new(mat.clone(), bits) {
            Err(_) => {
                if bits < hp::MAX_BITS {
                    bits = (2 * bits).min(hp::MAX_BITS);
                    continue;
                }
                break lstsq(&mat, f64::INFINITY);
            }
            Ok(solver) => {
                let log2_cond = solver.log2_condition();
                if let Some(rtol) = opts.singular_rtol {
                    if !(log2_cond < -rtol.log2()) {
                        break lstsq(&mat, log2_cond);
                    }
                }
                if !(log2_cond + SOLVE_GUARD_BITS <= bits as f64) {
                    if bits < hp::MAX_BITS {
                        bits = hp::bits_for_condition(log2_cond).max(bits + 64).min(hp::MAX_BITS);
                        continue;
                    }
                    break lstsq(&mat, log2_cond);
                }
                break (solver.solve(&rhs), false, log2_cond, bits);
            }
        }
    };
    if v.iter().any(|z| !(z.real().is_finite() && z.imag().is_finite())) {
        return Err(Error::NonFinite("eigenfunction coefficients"));
    }
    let expansion = KernelExpansion::new(mats.kernel(), mats.points().clone(), w.to_vec(), v, Some(mats.vf.domain().radius()))?;
    let mut ef = ApproxEigenfunction {
        lambda,
        offset: offset_of(&expansion),
        expansion,
        residual: 0.0,
        fallback_used,
        solve_bits: bits,
        log10_condition: log2_cond * std::f64::consts::LOG10_2,
        centered: opts.center,
    };
    ef.residual = residual_at(&ef, mats.points().points(), &mats.field_values);
    Ok(ef)
}

/// Solves every representative eigenpair of `spectrum`; conjugates are implied.
pub fn solve_all(mats: &GeneratorMatrices, spectrum: &Spectrum, opts: &SolveOptions) -> Result<Vec<ApproxEigenfunction>> {
    spectrum
        .representatives()
        .map(|p| solve_eigenfunction_with(mats, p.lambda, &p.w, opts))
        .collect()
}

/// `maxᵢ |⟨F(qᵢ), ∇φ(qᵢ)⟩ − λφ(qᵢ)| / (1 + |λφ(qᵢ)|)` over the collocation set.
pub fn collocation_residual(ef: &ApproxEigenfunction, vf: &VectorField) -> f64 {
    let pts = ef.points().points();
    let fq: Vec<Vec<f64>> = pts.iter().map(|q| vf.eval_field(q).unwrap_or_else(|_| vec![f64::NAN; q.len()])).collect();
    residual_at(ef, pts, &fq)
}

fn residual_at(ef: &ApproxEigenfunction, pts: &[Vec<f64>], fq: &[Vec<f64>]) -> f64 {
    let lambda = ef.lambda;
    let e = &ef.expansion;
    let per_point: Vec<f64> = (0..pts.len())
        .into_par_iter()
        .map(|i| match e.eval_bits() {
            None => {
                let (v, d) = e.eval_with_derivative(&pts[i], &fq[i]).expect("dimensions checked");
                let lv = lambda * v;
                (d - lv).norm() / (1.0 + lv.norm())
            }
            Some(bits) => {
                let (v, d) = e.value_and_derivative_hp(&pts[i], &fq[i], bits);
                let lv = Complex::with_val(bits, &v * &hp::complex(bits, lambda));
                let diff = Complex::with_val(bits, &d - &lv);
                let r = hp::to_c64(&diff).norm();
                r / (1.0 + hp::to_c64(&lv).norm())
            }
        })
        .collect();
    per_point.into_iter().fold(0.0, |a, r| if r.is_nan() || a.is_nan() { f64::NAN } else { a.max(r) })
}

/// The full `(n+m)×(n+m)` matrix `[[Jᵀ, 0], [G⁻¹N, G⁻¹A]]` in MPFR.
///
/// Costs `O(m³)` high-precision operations; intended for verification.
pub fn block_matrix(mats: &GeneratorMatrices) -> RealMat {
    let n = mats.jac.nrows();
    let m = mats.len();
    let bits = mats.bits();
    let chol = mats.gram.cholesky();
    let cols: Vec<Vec<Float>> = (0..n + m)
        .into_par_iter()
        .map(|c| {
            if c < n {
                let b: Vec<Float> = (0..m).map(|i| mats.nmat.get(i, c).clone()).collect();
                chol.solve_real(&b)
            } else {
                let b: Vec<Float> = (0..m).map(|i| mats.amat.get(i, c - n).clone()).collect();
                chol.solve_real(&b)
            }
        })
        .collect();
    RealMat::from_fn(n + m, n + m, |r, c| {
        if r < n {
            if c < n {
                Float::with_val(bits, mats.jac[(c, r)])
            } else {
                Float::new(bits)
            }
        } else {
            cols[c][r - n].clone()
        }
    })
}

/// Eigenvalue of `l` nearest to `shift` with its eigenvector, by shifted
/// inverse iteration in MPFR at `bits`.
pub fn nearest_eigenpair(l: &RealMat, shift: Complex64, bits: u32) -> Result<(Complex64, Vec<Complex64>)> {
    let size = l.rows();
    if l.cols() != size || size == 0 {
        return Err(Error::InvalidArgument("square non-empty matrix required".into()));
    }
    let sigma = hp::complex(bits, shift);
    let shifted = ComplexMat::from_fn(size, size, |i, j| {
        let mut z = Complex::with_val(bits, (l.get(i, j), 0));
        if i == j {
            z -= &sigma;
        }
        z
    });
    let lc = ComplexMat::from_fn(size, size, |i, j| Complex::with_val(bits, (l.get(i, j), 0)));
    let solver = MixedSolver::new(shifted, bits).map_err(|_| Error::InvalidArgument("shift is an exact eigenvalue".into()))?;
    let mut u: Vec<Complex> = (0..size).map(|k| Complex::with_val(bits, (1.0 / (k + 1) as f64, 0.1 * ((k % 7) as f64 - 3.0)))).collect();
    let mut mu = Complex64::new(f64::NAN, f64::NAN);
    for _ in 0..60 {
        let y = solver.solve(&u);
        let ymax = y.iter().map(|z| Float::with_val(bits, z.abs_ref())).fold(Float::new(bits), |a, b| a.max(&b));
        if !ymax.is_finite() || ymax.is_zero() {
            return Err(Error::NonFinite("inverse iteration"));
        }
        u = y.into_iter().map(|z| z / &ymax).collect();
        // Rayleigh quotient uᴴ L u / uᴴ u
        let lu = hp::matvec(&lc, &u, bits);
        let mut num = Complex::with_val(bits, (0.0, 0.0));
        let mut den = Float::new(bits);
        for (a, b) in u.iter().zip(&lu) {
            num += Complex::with_val(bits, a.conj_ref()) * b;
            den += Float::with_val(bits, a.abs_ref()).square();
        }
        let next = hp::to_c64(&(num / den));
        if (next - mu).norm() <= 1e-15 * (1.0 + next.norm()) {
            mu = next;
            break;
        }
        mu = next;
    }
    Ok((mu, u.iter().map(hp::to_c64).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::{builtin, BuiltinParams, DomainBox};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_set(m: usize, n: usize, a: f64, seed: u64, domain: &DomainBox) -> Arc<CollocationSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..m).map(|_| (0..n).map(|_| rng.random_range(-a..a)).collect()).collect();
        Arc::new(CollocationSet::new(pts, domain).unwrap())
    }

    fn vdp() -> VectorField {
        builtin("vdp", &BuiltinParams::new(), 0).unwrap()
    }

    #[test]
    fn vdp_spectrum() {
        let s = left_eigenpairs(&vdp().jacobian_at_origin().unwrap()).unwrap();
        assert_eq!(s.len(), 2);
        let p = &s.pairs()[0];
        assert_relative_eq!(p.lambda.re, -0.5, epsilon = 1e-14);
        assert_relative_eq!(p.lambda.im, 3f64.sqrt() / 2.0, epsilon = 1e-14);
        assert!(p.representative && p.conjugate == Some(1));
        assert_eq!(s.pairs()[1].lambda, p.lambda.conj());
        assert!(!s.pairs()[1].representative);
        let jt = vdp().jacobian_at_origin().unwrap().transpose().map(|v| Complex64::new(v, 0.0));
        let w = nalgebra::DVector::from_vec(p.w.clone());
        assert!((jt * &w - w.clone() * p.lambda).norm() < 1e-14);
        assert_relative_eq!(w.norm(), 1.0, epsilon = 1e-15);
        let first = p.w.iter().find(|z| z.norm() > 1e-12).unwrap();
        assert!(first.im == 0.0 && first.re > 0.0);
    }

    #[test]
    fn two_machine_spectrum() {
        let j = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.5, -0.5]);
        let s = left_eigenpairs(&j).unwrap();
        assert_relative_eq!(s.pairs()[0].lambda.re, -0.25, epsilon = 1e-14);
        assert_relative_eq!(s.pairs()[0].lambda.im, 0.4375f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn repeated_semisimple_and_defective() {
        let s = left_eigenpairs(&(-DMatrix::<f64>::identity(3, 3))).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.pairs().iter().all(|p| p.lambda == Complex64::new(-1.0, 0.0) && p.representative));
        let j = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]);
        assert!(matches!(left_eigenpairs(&j), Err(Error::Defective { .. })));
        let j = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(matches!(left_eigenpairs(&j), Err(Error::NonHyperbolic { .. })));
    }

    #[test]
    fn spectrum_ordering() {
        let j = DMatrix::from_row_slice(3, 3, &[-3.0, 0.0, 0.0, 0.0, -1.0, 2.0, 0.0, -2.0, -1.0]);
        let s = left_eigenpairs(&j).unwrap();
        let l = s.eigenvalues();
        assert_relative_eq!(l[0].re, -1.0, epsilon = 1e-14);
        assert!(l[0].im > 0.0 && l[1].im < 0.0);
        assert_relative_eq!(l[2].re, -3.0, epsilon = 1e-14);
        assert_eq!(s.representatives().count(), 2);
    }

    #[test]
    fn assembly_blocks() {
        let vf = vdp();
        let set = Arc::new(CollocationSet::new(vec![vec![0.1, 0.1], vec![-0.05, 0.12], vec![0.02, -0.08]], vf.domain()).unwrap());
        let mats = assemble(&vf, TaylorKernel::new(1.0).unwrap(), set.clone()).unwrap();
        let nm = mats.nmat();
        assert!(nm[(0, 0)].abs() < 1e-17);
        assert_relative_eq!(nm[(0, 1)], 0.009, epsilon = 1e-15);
        // A_ij = ⟨∇₂k₂(q_j, q_i), F(q_i)⟩
        let k = TaylorKernel::new(1.0).unwrap();
        let a = mats.amat();
        for i in 0..3 {
            let qi = &set.points()[i];
            let f = vf.eval_field(qi).unwrap();
            for j in 0..3 {
                let g = k.k2_grad_second(&set.points()[j], qi).unwrap();
                let want: f64 = g.iter().zip(&f).map(|(a, b)| a * b).sum();
                assert!((want - a[(i, j)]).abs() <= 1e-12 * want.abs(), "{want} {}", a[(i, j)]);
            }
        }
    }

    #[test]
    fn linear_field_has_exact_eigenfunctions() {
        let jm = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, -0.5, -2.0]);
        let vf = VectorField::linear("lin", jm.clone(), DomainBox::symmetric(2, 1.0).unwrap()).unwrap();
        let set = uniform_set(20, 2, 0.5, 1, vf.domain());
        let mats = assemble(&vf, TaylorKernel::new(1.0).unwrap(), set).unwrap();
        assert!(mats.nmat().iter().all(|v| *v == 0.0));
        let s = left_eigenpairs(&jm).unwrap();
        for p in s.pairs() {
            let ef = solve_eigenfunction(&mats, p.lambda, &p.w).unwrap();
            assert!(!ef.fallback_used());
            assert!(ef.v().iter().all(|c| c.norm() <= 1e-10));
            assert!(ef.residual() <= 1e-12);
            assert!(ef.eval(&[0.0, 0.0]).unwrap().norm() <= 1e-10);
            let x = [0.3, -0.7];
            let wx: Complex64 = p.w.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((ef.eval(&x).unwrap() - wx).norm() <= 1e-10);
            for (g, wk) in ef.grad(&x).unwrap().iter().zip(&p.w) {
                assert!((g - wk).norm() <= 1e-10);
            }
        }
    }

    #[test]
    fn vdp_collocation_and_conjugate_symmetry() {
        let vf = vdp();
        let set = uniform_set(100, 2, 0.15, 11, vf.domain());
        let mats = assemble(&vf, TaylorKernel::new(1.0).unwrap(), set).unwrap();
        let s = left_eigenpairs(mats.jac()).unwrap();
        let p = &s.pairs()[0];
        let ef = solve_eigenfunction(&mats, p.lambda, &p.w).unwrap();
        assert!(!ef.fallback_used());
        assert!(ef.residual() <= 1e-6, "residual {}", ef.residual());
        assert_eq!(collocation_residual(&ef, &vf), ef.residual());
        let q = &s.pairs()[1];
        let efc = solve_eigenfunction(&mats, q.lambda, &q.w).unwrap();
        let vmax = ef.v().iter().map(|z| z.norm()).fold(0.0, f64::max);
        for (a, b) in ef.v().iter().zip(efc.v()) {
            assert!((a.conj() - b).norm() <= 1e-10 * vmax);
        }
        // the origin offset is Σ vᵢ
        assert!((ef.eval(&[0.0, 0.0]).unwrap() - ef.offset()).norm() <= 1e-9 * (1.0 + ef.offset().norm()));
        let centered = ef.clone().centered(true);
        assert!(centered.eval(&[0.0, 0.0]).unwrap().norm() <= 1e-9);
    }

    #[test]
    fn eigenfunction_gradient_matches_differences() {
        let vf = vdp();
        let set = uniform_set(100, 2, 0.15, 12, vf.domain());
        let mats = assemble(&vf, TaylorKernel::new(1.0).unwrap(), set).unwrap();
        let s = left_eigenpairs(mats.jac()).unwrap();
        let ef = solve_eigenfunction(&mats, s.pairs()[0].lambda, &s.pairs()[0].w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let g = ef.grad(&x).unwrap();
            let gn = g.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            for i in 0..2 {
                let h = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (ef.eval(&xp).unwrap() - ef.eval(&xm).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).norm() <= 1e-6 * gn, "{fd} {}", g[i]);
            }
        }
    }

    #[test]
    fn explicit_least_squares_threshold() {
        let vf = vdp();
        let set = uniform_set(100, 2, 0.15, 11, vf.domain());
        let mats = assemble(&vf, TaylorKernel::new(1.0).unwrap(), set).unwrap();
        let s = left_eigenpairs(mats.jac()).unwrap();
        let opts = SolveOptions {
            singular_rtol: Some(1e-10),
            center: false,
        };
        let ef = solve_eigenfunction_with(&mats, s.pairs()[0].lambda, &s.pairs()[0].w, &opts).unwrap();
        assert!(ef.fallback_used());
        assert!(ef.residual().is_finite());
    }

    #[test]
    fn block_matrix_contains_jacobian_spectrum_and_eigenvectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let vf = vdp();
        let set = uniform_set(30, 2, 0.15, 22, vf.domain());
        let mats = assemble(&vf, TaylorKernel::new(1.0).unwrap(), set).unwrap();
        let l = block_matrix(&mats);
        let s = left_eigenpairs(mats.jac()).unwrap();
        for p in s.pairs() {
            let shift = p.lambda + Complex64::from_polar(1e-4, rng.random_range(0.0..6.0));
            let (mu, u) = nearest_eigenpair(&l, shift, mats.bits()).unwrap();
            assert!((mu - p.lambda).norm() <= 1e-8, "{mu} vs {}", p.lambda);
            let ef = solve_eigenfunction(&mats, p.lambda, &p.w).unwrap();
            // scale u so its leading block equals w
            let wu: Complex64 = p.w.iter().zip(&u).map(|(a, b)| a.conj() * b).sum();
            let vmax = ef.v().iter().map(|z| z.norm()).fold(0.0, f64::max);
            for (k, vk) in ef.v().iter().enumerate() {
                assert!((u[2 + k] / wu - vk).norm() <= 1e-6 * vmax);
            }
        }
    }
}
