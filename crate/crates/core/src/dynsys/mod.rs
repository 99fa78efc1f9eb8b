//! Autonomous vector fields `ẋ = F(x)` on a box around a stable equilibrium at
//! the origin.

mod builtin;
mod expr;

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use builtin::{builtin, networked_van_der_pol, BuiltinParams, NetworkParameters, BUILTIN_NAMES};
pub use expr::{parse_expression, Expr};

/// Axis-aligned box `[lower, upper]` strictly containing the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    /// `[-a, a]ⁿ`.
    pub fn symmetric(dim: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    /// Checks the invariants; useful after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::InvalidDomain(format!(
                "lower has {} entries, upper has {}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        if self.lower.is_empty() {
            return Err(Error::InvalidDomain("zero-dimensional box".into()));
        }
        for (i, (&lo, &hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(Error::InvalidDomain(format!("axis {i} has a non-finite bound")));
            }
            if !(lo < 0.0 && 0.0 < hi) {
                return Err(Error::InvalidDomain(format!(
                    "axis {i}: [{lo}, {hi}] does not contain the origin in its interior"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (u - l)).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (u + l)).collect()
    }

    /// Euclidean norm of the farthest corner from the origin.
    pub fn radius(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l.abs().max(u.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn diameter(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| (u - l).powi(2)).sum::<f64>().sqrt()
    }

    /// Product of the side lengths.
    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn contains_strictly(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| *l < *v && *v < *u)
    }

    /// Whether `other` is a subset of `self`.
    pub fn contains_box(&self, other: &DomainBox) -> bool {
        other.dim() == self.dim() && self.contains(&other.lower) && self.contains(&other.upper)
    }

    fn is_centered(&self) -> bool {
        self.lower.iter().zip(&self.upper).all(|(l, u)| (l + u).abs() <= 1e-12 * (u - l))
    }
}

type FieldFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// A vector field on a [`DomainBox`] with an equilibrium at the origin.
///
/// Immutable after construction and cheap to clone.
#[derive(Clone)]
pub struct VectorField {
    name: String,
    domain: DomainBox,
    field: Arc<FieldFn>,
    jacobian_origin: Option<DMatrix<f64>>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("domain", &self.domain)
            .field("jacobian_origin", &self.jacobian_origin)
            .finish()
    }
}

/// Number of deterministic probe points used to validate a new field.
const PROBE_POINTS: usize = 32;

impl VectorField {
    /// Builds and validates a field. `field(x, out)` writes `F(x)` into `out`.
    ///
    /// Fails if the origin is not an equilibrium or a supplied Jacobian
    /// disagrees with central differences.
    pub fn new<F>(name: impl Into<String>, domain: DomainBox, field: F, jacobian_origin: Option<DMatrix<f64>>) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        domain.validate()?;
        let n = domain.dim();
        if let Some(j) = &jacobian_origin {
            if j.nrows() != n || j.ncols() != n {
                return Err(Error::DimensionMismatch { expected: n, got: j.nrows() });
            }
        }
        let vf = Self {
            name: name.into(),
            domain,
            field: Arc::new(field),
            jacobian_origin,
        };
        vf.check_equilibrium()?;
        if let Some(j) = &vf.jacobian_origin {
            let fd = vf.finite_difference_jacobian()?;
            let scale = 1.0 + j.abs().max();
            let err = (j - &fd).abs().max();
            if err > 1e-5 * scale {
                return Err(Error::InvalidParameter {
                    name: "jacobian_origin".into(),
                    reason: format!("differs from finite differences by {err:e}"),
                });
            }
        }
        Ok(vf)
    }

    /// `F(x) = A x`.
    pub fn linear(name: impl Into<String>, a: DMatrix<f64>, domain: DomainBox) -> Result<Self> {
        let n = domain.dim();
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: a.nrows() });
        }
        let m = a.clone();
        Self::new(
            name,
            domain,
            move |x, out| {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..x.len()).map(|j| m[(i, j)] * x[j]).sum();
                }
            },
            Some(a),
        )
    }

    fn check_equilibrium(&self) -> Result<()> {
        let n = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut out = vec![0.0; n];
        let mut max_norm: f64 = 0.0;
        let mut x = vec![0.0; n];
        for _ in 0..PROBE_POINTS {
            for (i, xi) in x.iter_mut().enumerate() {
                let (l, u) = (self.domain.lower[i], self.domain.upper[i]);
                *xi = l + (u - l) * rng.random::<f64>();
            }
            (self.field)(&x, &mut out);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("vector field on the domain"));
            }
            max_norm = max_norm.max(norm(&out));
        }
        (self.field)(&vec![0.0; n], &mut out);
        let f0 = norm(&out);
        if !(f0 <= 1e-10 * (1.0 + max_norm)) {
            return Err(Error::NotEquilibrium { residual: out.clone() });
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    /// `F(x)`.
    pub fn eval_field(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    /// `F(x)` written into `out`.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dim();
        if x.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: x.len() });
        }
        if out.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: out.len() });
        }
        (self.field)(x, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector field value"));
        }
        Ok(())
    }

    /// Unchecked evaluation for integrators that handle blow-up themselves.
    pub(crate) fn eval_raw(&self, x: &[f64], out: &mut [f64]) {
        (self.field)(x, out)
    }

    pub fn analytic_jacobian(&self) -> Option<&DMatrix<f64>> {
        self.jacobian_origin.as_ref()
    }

    /// Central differences at the origin with per-axis step
    /// `max(1e-6, 1e-6 · half-width)`.
    pub fn finite_difference_jacobian(&self) -> Result<DMatrix<f64>> {
        let n = self.dim();
        let hw = self.domain.half_widths();
        let mut jac = DMatrix::zeros(n, n);
        let mut xp = vec![0.0; n];
        let mut xm = vec![0.0; n];
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            let h = (1e-6 * hw[j]).max(1e-6);
            xp[j] = h;
            xm[j] = -h;
            self.eval_into(&xp, &mut fp)?;
            self.eval_into(&xm, &mut fm)?;
            for i in 0..n {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
            xp[j] = 0.0;
            xm[j] = 0.0;
        }
        Ok(jac)
    }

    /// `J_F(0)`: the stored analytic Jacobian if present, else central
    /// differences. Rejects non-hyperbolic equilibria.
    pub fn jacobian_at_origin(&self) -> Result<DMatrix<f64>> {
        let jac = match &self.jacobian_origin {
            Some(j) => j.clone(),
            None => self.finite_difference_jacobian()?,
        };
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Jacobian at the origin"));
        }
        let scale = 1.0 + jac.abs().max();
        for ev in jac.complex_eigenvalues().iter() {
            if ev.re.abs() < 1e-8 * scale {
                return Err(Error::NonHyperbolic { re: ev.re, im: ev.im });
            }
        }
        Ok(jac)
    }

    /// Rescales a centered box `[-a, a]` to `[-1, 1]ⁿ`:
    /// `G(y) = D⁻¹ F(D y)` with `D = diag(a)`.
    pub fn rescale_to_unit_box(&self) -> Result<VectorField> {
        if !self.domain.is_centered() {
            return Err(Error::InvalidDomain(format!("`{}` is not on a centered box", self.name)));
        }
        let a = self.domain.upper.clone();
        let n = a.len();
        let inner = self.field.clone();
        let scale = a.clone();
        let field = move |y: &[f64], out: &mut [f64]| {
            let x: Vec<f64> = y.iter().zip(&scale).map(|(yi, ai)| yi * ai).collect();
            inner(&x, out);
            for (o, ai) in out.iter_mut().zip(&scale) {
                *o /= ai;
            }
        };
        let jac = self
            .jacobian_origin
            .as_ref()
            .map(|j| DMatrix::from_fn(n, n, |r, c| j[(r, c)] * a[c] / a[r]));
        VectorField::new(format!("{} (unit box)", self.name), DomainBox::symmetric(n, 1.0)?, field, jac)
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A system given as one expression per state component over `x1..xn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub expressions: Vec<String>,
    pub domain: DomainBox,
}

/// Parses `spec` into a vector field with a finite-difference Jacobian.
pub fn parse_system(spec: &SystemSpec) -> Result<VectorField> {
    spec.domain.validate()?;
    let n = spec.domain.dim();
    if spec.expressions.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: spec.expressions.len(),
        });
    }
    let exprs = spec
        .expressions
        .iter()
        .map(|s| parse_expression(s, n))
        .collect::<Result<Vec<_>>>()?;
    let name = format!("[{}]", spec.expressions.join(", "));
    VectorField::new(
        name,
        spec.domain.clone(),
        move |x, out| {
            for (o, e) in out.iter_mut().zip(&exprs) {
                *o = e.eval(x);
            }
        },
        None,
    )
}
