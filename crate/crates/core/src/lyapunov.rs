//! Candidate Lyapunov functions `V(x) = Σ |φ_λ(x)|²` built from approximate
//! eigenfunctions, and their bulk evaluation.

use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;

use crate::dynsys::VectorField;
use crate::generator::{ApproxEigenfunction, Spectrum};
use crate::kernel::dot;
use crate::par::*;
use crate::{Error, Result};

/// One `weight · |φ|²` summand.
#[derive(Debug, Clone)]
pub struct Term {
    pub eigenfunction: ApproxEigenfunction,
    /// 1 for real eigenvalues, 2 for the retained member of a conjugate pair.
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct LyapunovCandidate {
    terms: Vec<Term>,
    vf: VectorField,
    shared: Option<SharedBasis>,
}

/// Kernel data common to every term, enabling one pass over the points per
/// evaluation when all terms live in the `f64` tier.
#[derive(Debug, Clone)]
struct SharedBasis {
    eta: f64,
    points: Arc<crate::kernel::CollocationSet>,
    /// `coeffs[i][k]`: coefficient of point `i` in term `k`.
    coeffs: Vec<Vec<Complex64>>,
}

/// Pairs every representative eigenvalue of `spectrum` with its eigenfunction.
///
/// `eigenfunctions` must hold exactly one entry per representative, matched by
/// eigenvalue (to `1e-12` relative).
pub fn build_candidate(vf: &VectorField, spectrum: &Spectrum, eigenfunctions: Vec<ApproxEigenfunction>) -> Result<LyapunovCandidate> {
    for p in spectrum.pairs() {
        if p.lambda.re >= 0.0 {
            return Err(Error::Unstable { re: p.lambda.re, im: p.lambda.im });
        }
    }
    let mut pool: Vec<Option<ApproxEigenfunction>> = eigenfunctions.into_iter().map(Some).collect();
    let mut terms = Vec::new();
    for p in spectrum.representatives() {
        let tol = 1e-12 * (1.0 + p.lambda.norm());
        let slot = pool
            .iter_mut()
            .find(|e| e.as_ref().is_some_and(|e| (e.lambda() - p.lambda).norm() <= tol))
            .ok_or(Error::MissingEigenfunction { re: p.lambda.re, im: p.lambda.im })?;
        let ef = slot.take().expect("matched above");
        if ef.dim() != vf.dim() {
            return Err(Error::DimensionMismatch { expected: vf.dim(), got: ef.dim() });
        }
        let weight = if p.conjugate.is_some() { 2.0 } else { 1.0 };
        terms.push(Term { eigenfunction: ef, weight });
    }
    if pool.iter().any(Option::is_some) {
        return Err(Error::InvalidArgument("eigenfunction without a matching eigenvalue".into()));
    }
    LyapunovCandidate::from_terms(vf, terms)
}

impl LyapunovCandidate {
    /// Builds a candidate from explicit terms; weights must be positive.
    pub fn from_terms(vf: &VectorField, terms: Vec<Term>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Empty("Lyapunov terms"));
        }
        for t in &terms {
            if !(t.weight > 0.0 && t.weight.is_finite()) {
                return Err(Error::InvalidParameter {
                    name: "weight".into(),
                    reason: format!("{} is not positive", t.weight),
                });
            }
            if t.eigenfunction.lambda().re >= 0.0 {
                let l = t.eigenfunction.lambda();
                return Err(Error::Unstable { re: l.re, im: l.im });
            }
        }
        let shared = shared_basis(&terms);
        Ok(Self {
            terms,
            vf: vf.clone(),
            shared,
        })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn vector_field(&self) -> &VectorField {
        &self.vf
    }

    pub fn dim(&self) -> usize {
        self.vf.dim()
    }

    /// Sum of the weights; equals `n` for candidates from [`build_candidate`].
    pub fn total_weight(&self) -> f64 {
        self.terms.iter().map(|t| t.weight).sum()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("evaluation point"));
        }
        Ok(())
    }

    /// `V(x) = Σ weight·|φ(x)|²`.
    pub fn v_eval(&self, x: &[f64]) -> Result<f64> {
        // shares the code path of eval_both so batch and scalar results agree bitwise
        Ok(self.eval_both(x)?.0)
    }

    /// `V̇(x) = Σ weight·2 Re(conj(φ(x)) ⟨F(x), ∇φ(x)⟩)`.
    pub fn vdot_eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.eval_both(x)?.1)
    }

    /// `(V(x), V̇(x))` in one pass.
    pub fn eval_both(&self, x: &[f64]) -> Result<(f64, f64)> {
        self.check(x)?;
        let f = self.vf.eval_field(x)?;
        if let Some(s) = &self.shared {
            return Ok(self.eval_shared(s, x, &f));
        }
        let (mut v, mut vd) = (0.0, 0.0);
        for t in &self.terms {
            let (p, d) = t.eigenfunction.eval_with_derivative(x, &f)?;
            v += t.weight * (p.re * p.re + p.im * p.im);
            vd += t.weight * 2.0 * (p.re * d.re + p.im * d.im);
        }
        Ok((v, vd))
    }

    fn eval_shared(&self, s: &SharedBasis, x: &[f64], f: &[f64]) -> (f64, f64) {
        let k = self.terms.len();
        let mut val: Vec<Complex64> = Vec::with_capacity(k);
        let mut der: Vec<Complex64> = Vec::with_capacity(k);
        for t in &self.terms {
            let ef = &t.eigenfunction;
            val.push(ef.w().iter().zip(x).map(|(w, v)| w * v).sum());
            der.push(ef.w().iter().zip(f).map(|(w, v)| w * v).sum());
        }
        for (q, row) in s.points.points().iter().zip(&s.coeffs) {
            let t = s.eta * dot(q, x);
            let em1 = t.exp_m1();
            let kv = em1 + 1.0 - t;
            let kd = s.eta * em1 * dot(q, f);
            for ((c, v), d) in row.iter().zip(val.iter_mut()).zip(der.iter_mut()) {
                *v += c * kv;
                *d += c * kd;
            }
        }
        let (mut v, mut vd) = (0.0, 0.0);
        for ((t, p), d) in self.terms.iter().zip(&val).zip(&der) {
            let p = if t.eigenfunction.is_centered() { p - t.eigenfunction.offset() } else { *p };
            v += t.weight * (p.re * p.re + p.im * p.im);
            vd += t.weight * 2.0 * (p.re * d.re + p.im * d.im);
        }
        (v, vd)
    }

    /// Evaluates every point, in parallel when enabled. Output order matches input.
    pub fn batch_eval(&self, points: Vec<Vec<f64>>) -> Result<EvaluatedSample> {
        let vals: Vec<(f64, f64)> = points
            .par_iter()
            .enumerate()
            .map(|(i, x)| self.eval_both(x).map_err(|e| Error::at(i, e)))
            .collect::<Result<_>>()?;
        let (v, vdot) = vals.into_iter().unzip();
        Ok(EvaluatedSample { points, v, vdot })
    }

    /// [`batch_eval`](Self::batch_eval) without parallelism, for comparison.
    pub fn batch_eval_sequential(&self, points: Vec<Vec<f64>>) -> Result<EvaluatedSample> {
        let mut v = Vec::with_capacity(points.len());
        let mut vdot = Vec::with_capacity(points.len());
        for (i, x) in points.iter().enumerate() {
            let (a, b) = self.eval_both(x).map_err(|e| Error::at(i, e))?;
            v.push(a);
            vdot.push(b);
        }
        Ok(EvaluatedSample { points, v, vdot })
    }
}

fn shared_basis(terms: &[Term]) -> Option<SharedBasis> {
    let first = &terms[0].eigenfunction;
    let points = first.points().clone();
    let eta = first.kernel().eta();
    let compatible = terms.iter().all(|t| {
        let e = &t.eigenfunction;
        e.expansion().eval_bits().is_none() && Arc::ptr_eq(e.points(), &points) && e.kernel().eta() == eta
    });
    if !compatible {
        return None;
    }
    let coeffs = (0..points.len()).map(|i| terms.iter().map(|t| t.eigenfunction.v()[i]).collect()).collect();
    Some(SharedBasis { eta, points, coeffs })
}

/// `V` and `V̇` at a list of points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvaluatedSample {
    pub points: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    pub vdot: Vec<f64>,
}

impl EvaluatedSample {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    /// Writes `x1,…,xn,V,Vdot` rows with a header line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| Error::InvalidArgument(format!("csv output: {e}"));
        let mut w = csv::Writer::from_writer(out);
        let n = self.points.first().map_or(0, Vec::len);
        let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        header.push("V".into());
        header.push("Vdot".into());
        w.write_record(&header).map_err(io)?;
        for ((x, v), d) in self.points.iter().zip(&self.v).zip(&self.vdot) {
            let mut rec: Vec<String> = x.iter().map(|c| format!("{c:e}")).collect();
            rec.push(format!("{v:e}"));
            rec.push(format!("{d:e}"));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| Error::InvalidArgument(format!("csv output: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::{builtin, BuiltinParams, DomainBox};
    use crate::generator::{assemble, left_eigenpairs, solve_all, solve_eigenfunction, SolveOptions};
    use crate::kernel::{CollocationSet, TaylorKernel};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(m: usize, n: usize, a: f64, seed: u64, domain: &DomainBox) -> Arc<CollocationSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..m).map(|_| (0..n).map(|_| rng.random_range(-a..a)).collect()).collect();
        Arc::new(CollocationSet::new(pts, domain).unwrap())
    }

    fn candidate_for(vf: &VectorField, m: usize, a: f64, seed: u64) -> LyapunovCandidate {
        let set = random_set(m, vf.dim(), a, seed, vf.domain());
        let mats = assemble(vf, TaylorKernel::new(1.0).unwrap(), set).unwrap();
        let s = left_eigenpairs(mats.jac()).unwrap();
        let efs = solve_all(&mats, &s, &SolveOptions::default()).unwrap();
        build_candidate(vf, &s, efs).unwrap()
    }

    #[test]
    fn weights_follow_conjugate_pairs() {
        let vf = builtin("vdp", &BuiltinParams::new(), 0).unwrap();
        let c = candidate_for(&vf, 30, 0.15, 1);
        assert_eq!(c.terms().len(), 1);
        assert_eq!(c.terms()[0].weight, 2.0);
        assert_eq!(c.total_weight(), 2.0);

        let j = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, -3.0]);
        let lin = VectorField::linear("lin", j, DomainBox::symmetric(2, 1.0).unwrap()).unwrap();
        let c = candidate_for(&lin, 10, 0.5, 2);
        assert_eq!(c.terms().len(), 2);
        assert!(c.terms().iter().all(|t| t.weight == 1.0));
    }

    #[test]
    fn build_rejects_missing_and_unstable() {
        let vf = builtin("vdp", &BuiltinParams::new(), 0).unwrap();
        let s = left_eigenpairs(&vf.jacobian_at_origin().unwrap()).unwrap();
        assert!(matches!(build_candidate(&vf, &s, vec![]), Err(Error::MissingEigenfunction { .. })));
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let s = left_eigenpairs(&j).unwrap();
        let unstable = VectorField::linear("u", j, DomainBox::symmetric(2, 1.0).unwrap());
        // a field with an unstable origin is rejected whether or not it constructs
        if let Ok(u) = unstable {
            assert!(matches!(build_candidate(&u, &s, vec![]), Err(Error::Unstable { .. })));
        }
    }

    #[test]
    fn negative_identity_gives_squared_norm() {
        let lin = VectorField::linear("neg", -DMatrix::identity(2, 2), DomainBox::symmetric(2, 1.0).unwrap()).unwrap();
        let c = candidate_for(&lin, 10, 0.5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let r2 = x[0] * x[0] + x[1] * x[1];
            let (v, vd) = c.eval_both(&x).unwrap();
            assert!((v - r2).abs() <= 1e-12);
            assert!((vd + 2.0 * r2).abs() <= 1e-12);
        }
        assert!((c.vdot_eval(&[1.0, 0.0]).unwrap() + 2.0).abs() <= 1e-12);
    }

    #[test]
    fn derivative_matches_flow_differences() {
        let vf = builtin("vdp", &BuiltinParams::new(), 0).unwrap();
        let c = candidate_for(&vf, 100, 0.15, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tau = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let f = vf.eval_field(&x).unwrap();
            let xp: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + tau * b).collect();
            let xm: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a - tau * b).collect();
            let fd = (c.v_eval(&xp).unwrap() - c.v_eval(&xm).unwrap()) / (2.0 * tau);
            let vd = c.vdot_eval(&x).unwrap();
            // skip near-critical points of V along the flow
            if vd.abs() < 1e-8 {
                continue;
            }
            assert!((fd - vd).abs() <= 1e-5 * vd.abs(), "{x:?}: {fd} vs {vd}");
            assert!(c.v_eval(&x).unwrap() >= 0.0);
            checked += 1;
        }
    }

    #[test]
    fn origin_offset_is_twice_squared_coefficient_sum() {
        let vf = builtin("vdp", &BuiltinParams::new(), 0).unwrap();
        let c = candidate_for(&vf, 100, 0.15, 5);
        let off = c.terms()[0].eigenfunction.offset();
        let v0 = c.v_eval(&[0.0, 0.0]).unwrap();
        assert!(v0 > 0.0);
        assert!((v0 - 2.0 * off.norm_sqr()).abs() <= 1e-9 * (1.0 + v0));
    }

    #[test]
    fn shared_path_matches_per_term_path() {
        let vf = builtin("two_machine", &BuiltinParams::new(), 0).unwrap();
        let c = candidate_for(&vf, 40, 0.08, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let x = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let f = vf.eval_field(&x).unwrap();
            let (mut v, mut vd) = (0.0, 0.0);
            for t in c.terms() {
                let (p, d) = t.eigenfunction.eval_with_derivative(&x, &f).unwrap();
                v += t.weight * p.norm_sqr();
                vd += t.weight * 2.0 * (p.conj() * d).re;
            }
            let (a, b) = c.eval_both(&x).unwrap();
            assert!((a - v).abs() <= 1e-12 * (1.0 + v.abs()));
            assert!((b - vd).abs() <= 1e-12 * (1.0 + vd.abs()));
        }
    }

    #[test]
    fn conjugate_weight_equals_explicit_pair() {
        let vf = builtin("vdp", &BuiltinParams::new(), 0).unwrap();
        let set = random_set(100, 2, 0.15, 9, vf.domain());
        let mats = assemble(&vf, TaylorKernel::new(1.0).unwrap(), set).unwrap();
        let s = left_eigenpairs(mats.jac()).unwrap();
        let both: Vec<Term> = s
            .pairs()
            .iter()
            .map(|p| Term {
                eigenfunction: solve_eigenfunction(&mats, p.lambda, &p.w).unwrap(),
                weight: 1.0,
            })
            .collect();
        let explicit = LyapunovCandidate::from_terms(&vf, both).unwrap();
        let efs = solve_all(&mats, &s, &SolveOptions::default()).unwrap();
        let c = build_candidate(&vf, &s, efs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let (a, b) = c.eval_both(&x).unwrap();
            let (ea, eb) = explicit.eval_both(&x).unwrap();
            assert!((a - ea).abs() <= 1e-12 * (1.0 + a.abs()), "{a} {ea}");
            assert!((b - eb).abs() <= 1e-12 * (1.0 + b.abs()), "{b} {eb}");
        }
    }

    #[test]
    fn batch_is_order_preserving_and_matches_scalar() {
        let vf = builtin("vdp", &BuiltinParams::new(), 0).unwrap();
        let c = candidate_for(&vf, 30, 0.15, 11);
        assert!(c.batch_eval(vec![]).unwrap().is_empty());
        let x = vec![0.3, -0.2];
        let one = c.batch_eval(vec![x.clone()]).unwrap();
        assert_eq!(one.v[0].to_bits(), c.v_eval(&x).unwrap().to_bits());
        assert_eq!(one.vdot[0].to_bits(), c.vdot_eval(&x).unwrap().to_bits());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let a = c.batch_eval(pts.clone()).unwrap();
        let b = c.batch_eval_sequential(pts).unwrap();
        assert_eq!(a, b);
        let bad = c.batch_eval(vec![vec![0.0, 0.0], vec![0.0]]);
        assert!(matches!(bad, Err(Error::AtIndex { index: 1, .. })));
    }

    #[test]
    fn csv_layout() {
        let s = EvaluatedSample {
            points: vec![vec![0.5, -1.0]],
            v: vec![2.0],
            vdot: vec![-0.25],
        };
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x1,x2,V,Vdot"));
        let vals: Vec<f64> = lines.next().unwrap().split(',').map(|t| t.parse().unwrap()).collect();
        assert_eq!(vals, vec![0.5, -1.0, 2.0, -0.25]);
    }
}
