//! Dormand–Prince 5(4) integration with PI step-size control, used as the
//! trajectory oracle for region-of-attraction membership.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynsys::{norm, DomainBox, VectorField};
use crate::kernel::CollocationSet;
use crate::par::*;
use crate::{Error, Result};

/// Tolerances and event radii.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationParams {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub t_max: f64,
    /// Absolute radius of the convergence ball around the origin.
    pub r_converge: f64,
    /// Escape radius as a multiple of the domain radius.
    pub r_escape: f64,
    /// Accepted plus rejected steps before giving up.
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_max_steps() -> usize {
    1_000_000
}

impl IntegrationParams {
    /// Defaults scaled to `domain`: tolerances `1e-8`/`1e-10`, `t_max = 200`,
    /// convergence at `1e-3` and escape at `3` domain radii.
    pub fn for_domain(domain: &DomainBox) -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            t_max: 200.0,
            r_converge: 1e-3 * domain.radius(),
            r_escape: 3.0,
            max_steps: default_max_steps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("t_max", self.t_max),
            ("r_converge", self.r_converge),
            ("r_escape", self.r_escape),
        ];
        for (name, v) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter {
                    name: name.into(),
                    reason: format!("{v} is not positive and finite"),
                });
            }
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter {
                name: "max_steps".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Converged,
    Escaped,
    Undecided,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Converged => "converged",
            Outcome::Escaped => "escaped",
            Outcome::Undecided => "undecided",
        }
    }
}

/// Terminal state of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct RoaLabel {
    pub outcome: Outcome,
    pub t_final: f64,
    pub x_final: Vec<f64>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// Reason for an `Undecided` label other than reaching `t_max`.
    pub diagnostic: Option<String>,
}

impl RoaLabel {
    pub fn converged(&self) -> bool {
        self.outcome == Outcome::Converged
    }
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// fifth minus fourth order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Stage storage for one Dormand–Prince step.
struct Stepper<'a> {
    vf: &'a VectorField,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y_new: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(vf: &'a VectorField) -> Self {
        let n = vf.dim();
        Self {
            vf,
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            y_new: vec![0.0; n],
        }
    }

    fn stage(&mut self, y: &[f64], h: f64, coeffs: &[f64], out: usize) {
        for (j, t) in self.tmp.iter_mut().enumerate() {
            let mut s = 0.0;
            for (i, a) in coeffs.iter().enumerate() {
                s += a * self.k[i][j];
            }
            *t = y[j] + h * s;
        }
        let (tmp, k) = (&self.tmp, &mut self.k);
        self.vf.eval_raw(tmp, &mut k[out]);
    }

    /// Advances `y` (with `k[0] = F(y)`) by `h` into `y_new` and `k[6]`;
    /// returns the scaled error norm.
    fn step(&mut self, y: &[f64], h: f64, rtol: f64, atol: f64) -> f64 {
        self.stage(y, h, &[A21], 1);
        self.stage(y, h, &[A31, A32], 2);
        self.stage(y, h, &[A41, A42, A43], 3);
        self.stage(y, h, &[A51, A52, A53, A54], 4);
        self.stage(y, h, &[A61, A62, A63, A64, A65], 5);
        for (j, yn) in self.y_new.iter_mut().enumerate() {
            let k = &self.k;
            *yn = y[j] + h * (A71 * k[0][j] + A73 * k[2][j] + A74 * k[3][j] + A75 * k[4][j] + A76 * k[5][j]);
        }
        let (y_new, k) = (&self.y_new, &mut self.k);
        self.vf.eval_raw(y_new, &mut k[6]);
        let n = y.len();
        let mut err = 0.0;
        for j in 0..n {
            let k = &self.k;
            let e = h * (E1 * k[0][j] + E3 * k[2][j] + E4 * k[3][j] + E5 * k[4][j] + E6 * k[5][j] + E7 * k[6][j]);
            let sc = atol + rtol * y[j].abs().max(self.y_new[j].abs());
            err += (e / sc) * (e / sc);
        }
        let err = (err / n as f64).sqrt();
        if err.is_finite() && self.y_new.iter().all(|v| v.is_finite()) && self.k[6].iter().all(|v| v.is_finite()) {
            err
        } else {
            f64::INFINITY
        }
    }
}

/// Initial step from the local scale of `y` and `F(y)`.
fn initial_step(stepper: &mut Stepper, y: &[f64], rtol: f64, atol: f64, t_max: f64) -> f64 {
    let n = y.len() as f64;
    let f0 = stepper.k[0].clone();
    let sc = |v: f64| atol + rtol * v.abs();
    let d0 = (y.iter().map(|v| (v / sc(*v)).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = (f0.iter().zip(y).map(|(f, v)| (f / sc(*v)).powi(2)).sum::<f64>() / n).sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(t_max);
    let y1: Vec<f64> = y.iter().zip(&f0).map(|(v, f)| v + h0 * f).collect();
    let mut f1 = vec![0.0; y.len()];
    stepper.vf.eval_raw(&y1, &mut f1);
    let d2 = (f1.iter().zip(&f0).zip(y).map(|((a, b), v)| ((a - b) / sc(*v)).powi(2)).sum::<f64>() / n).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    let h = (100.0 * h0).min(h1).min(t_max);
    if h.is_finite() && h > 0.0 {
        h
    } else {
        1e-6_f64.min(t_max)
    }
}

/// Integrates `ẋ = F(x)` from `x0` until the state enters the convergence
/// ball, leaves the escape ball, or `t_max` elapses.
pub fn integrate(vf: &VectorField, x0: &[f64], params: &IntegrationParams) -> Result<RoaLabel> {
    params.validate()?;
    let n = vf.dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x0.len() });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state"));
    }
    let r_escape = params.r_escape * vf.domain().radius();
    let label = |outcome, t, x: &[f64], acc, rej, diagnostic| RoaLabel {
        outcome,
        t_final: t,
        x_final: x.to_vec(),
        accepted_steps: acc,
        rejected_steps: rej,
        diagnostic,
    };
    let mut y = x0.to_vec();
    let r0 = norm(&y);
    if r0 <= params.r_converge {
        return Ok(label(Outcome::Converged, 0.0, &y, 0, 0, None));
    }
    if r0 > r_escape {
        return Ok(label(Outcome::Escaped, 0.0, &y, 0, 0, None));
    }
    let (rtol, atol) = (params.rel_tol, params.abs_tol);
    let mut st = Stepper::new(vf);
    vf.eval_raw(&y, &mut st.k[0]);
    if st.k[0].iter().any(|v| !v.is_finite()) {
        return Ok(label(Outcome::Undecided, 0.0, &y, 0, 0, Some("non-finite field at the initial state".into())));
    }
    let mut h = initial_step(&mut st, &y, rtol, atol, params.t_max);
    let mut t = 0.0;
    let (mut acc, mut rej) = (0usize, 0usize);
    let mut err_old: f64 = 1e-4;
    let mut last_rejected = false;
    const SAFETY: f64 = 0.9;
    const BETA: f64 = 0.04;
    const EXPO: f64 = 0.2 - BETA * 0.75;
    while acc + rej < params.max_steps {
        let final_step = t + h >= params.t_max;
        if final_step {
            h = params.t_max - t;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Ok(label(Outcome::Undecided, t, &y, acc, rej, Some(format!("step size underflow at t = {t}"))));
        }
        let err = st.step(&y, h, rtol, atol);
        if err <= 1.0 {
            acc += 1;
            t = if final_step { params.t_max } else { t + h };
            std::mem::swap(&mut y, &mut st.y_new);
            st.k.swap(0, 6);
            let r = norm(&y);
            if r <= params.r_converge {
                return Ok(label(Outcome::Converged, t, &y, acc, rej, None));
            }
            if !(r <= r_escape) {
                return Ok(label(Outcome::Escaped, t, &y, acc, rej, None));
            }
            if final_step {
                return Ok(label(Outcome::Undecided, t, &y, acc, rej, None));
            }
            let fac11 = err.powf(EXPO);
            let fac = (fac11 / err_old.powf(BETA) / SAFETY).clamp(0.1, 5.0);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            err_old = err.max(1e-4);
            last_rejected = false;
            h = h_new;
        } else {
            rej += 1;
            last_rejected = true;
            h /= if err.is_finite() { (err.powf(EXPO) / SAFETY).min(5.0) } else { 5.0 };
        }
    }
    Ok(label(Outcome::Undecided, t, &y, acc, rej, Some(format!("step limit {} reached", params.max_steps))))
}

/// Region-of-attraction label for one initial condition.
pub fn classify_roa(vf: &VectorField, x0: &[f64], params: &IntegrationParams) -> Result<RoaLabel> {
    integrate(vf, x0, params)
}

/// Labels every initial condition, in parallel when enabled.
pub fn classify_batch(vf: &VectorField, points: &[Vec<f64>], params: &IntegrationParams) -> Result<Vec<RoaLabel>> {
    params.validate()?;
    points
        .par_iter()
        .enumerate()
        .map(|(i, x)| classify_roa(vf, x, params).map_err(|e| Error::at(i, e)))
        .collect()
}

/// Keeps the candidates whose trajectories converge, in their original order.
/// `Undecided` counts as not converged.
pub fn filter_collocation(vf: &VectorField, candidates: Vec<Vec<f64>>, params: &IntegrationParams) -> Result<CollocationSet> {
    for (i, x) in candidates.iter().enumerate() {
        if !vf.domain().contains(x) {
            return Err(Error::at(i, Error::PointOutsideDomain(i)));
        }
    }
    let labels = classify_batch(vf, &candidates, params)?;
    let kept: Vec<Vec<f64>> = candidates.into_iter().zip(&labels).filter(|(_, l)| l.converged()).map(|(x, _)| x).collect();
    if kept.len() < 2 {
        return Err(Error::FilterStarvation {
            survivors: kept.len(),
            needed: 2,
        });
    }
    CollocationSet::new(kept, vf.domain())
}

/// Same as [`filter_collocation`], returning a shared set.
pub fn filter_collocation_shared(vf: &VectorField, candidates: Vec<Vec<f64>>, params: &IntegrationParams) -> Result<Arc<CollocationSet>> {
    filter_collocation(vf, candidates, params).map(Arc::new)
}

/// Writes `x1,…,xn,label,t_final` rows with a header line.
pub fn write_labels_csv<W: Write>(points: &[Vec<f64>], labels: &[RoaLabel], out: W) -> Result<()> {
    if points.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            got: labels.len(),
        });
    }
    let io = |e: csv::Error| Error::InvalidArgument(format!("csv output: {e}"));
    let mut w = csv::Writer::from_writer(out);
    let n = points.first().map_or(0, Vec::len);
    let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    header.push("t_final".into());
    w.write_record(&header).map_err(io)?;
    for (x, l) in points.iter().zip(labels) {
        let mut rec: Vec<String> = x.iter().map(|c| format!("{c:e}")).collect();
        rec.push(l.outcome.as_str().into());
        rec.push(format!("{:e}", l.t_final));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("csv output: {e}")))
}

/// Fixed-step Dormand–Prince (fifth-order solution) from `0` to `t_end` with
/// `steps` equal steps. No events; used to check the order of the scheme.
pub fn integrate_fixed(vf: &VectorField, x0: &[f64], t_end: f64, steps: usize) -> Result<Vec<f64>> {
    if x0.len() != vf.dim() {
        return Err(Error::DimensionMismatch {
            expected: vf.dim(),
            got: x0.len(),
        });
    }
    if steps == 0 || !(t_end.is_finite()) {
        return Err(Error::InvalidArgument("positive step count and finite end time required".into()));
    }
    let h = t_end / steps as f64;
    let mut st = Stepper::new(vf);
    let mut y = x0.to_vec();
    vf.eval_raw(&y, &mut st.k[0]);
    for _ in 0..steps {
        st.step(&y, h, 1.0, 1.0);
        std::mem::swap(&mut y, &mut st.y_new);
        st.k.swap(0, 6);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fixed-step solution"));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::{builtin, BuiltinParams};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn decay() -> VectorField {
        VectorField::linear("decay", -DMatrix::identity(1, 1), DomainBox::symmetric(1, 1.0).unwrap()).unwrap()
    }

    fn oscillator_like(damping: f64) -> VectorField {
        let a = DMatrix::from_row_slice(2, 2, &[-damping, 1.0, -1.0, -damping]);
        VectorField::linear("osc", a, DomainBox::symmetric(2, 1.0).unwrap()).unwrap()
    }

    /// Undamped oscillator; `VectorField` rejects it only through its Jacobian
    /// check, which plain construction does not perform.
    fn harmonic() -> VectorField {
        VectorField::new("harmonic", DomainBox::symmetric(2, 2.0).unwrap(), |x, o| {
            o[0] = x[1];
            o[1] = -x[0];
        }, None)
        .unwrap()
    }

    #[test]
    fn exponential_decay() {
        let vf = decay();
        let mut p = IntegrationParams::for_domain(vf.domain());
        p.t_max = 20.0;
        p.r_converge = 1e-30;
        let l = integrate(&vf, &[1.0], &p).unwrap();
        assert_eq!(l.outcome, Outcome::Undecided);
        assert_eq!(l.t_final, 20.0);
        assert!((l.x_final[0] - (-20f64).exp()).abs() <= p.abs_tol + p.rel_tol * (-20f64).exp());
        let p = IntegrationParams::for_domain(vf.domain());
        let l = classify_roa(&vf, &[1.0], &p).unwrap();
        assert_eq!(l.outcome, Outcome::Converged);
        assert!(l.x_final[0].abs() <= p.r_converge);
        assert!((l.t_final - (1.0 / p.r_converge).ln()).abs() < 0.5);
    }

    #[test]
    fn harmonic_period_and_energy() {
        let vf = harmonic();
        let mut p = IntegrationParams::for_domain(vf.domain());
        p.r_converge = 1e-30;
        p.t_max = 2.0 * std::f64::consts::PI;
        let l = integrate(&vf, &[1.0, 0.0], &p).unwrap();
        assert!((l.x_final[0] - 1.0).abs() <= 10.0 * p.rel_tol && l.x_final[1].abs() <= 10.0 * p.rel_tol, "{:?}", l.x_final);
        p.t_max = 20.0 * std::f64::consts::PI;
        let l = integrate(&vf, &[1.0, 0.0], &p).unwrap();
        let energy = l.x_final[0].powi(2) + l.x_final[1].powi(2);
        assert!((energy - 1.0).abs() <= 1e3 * p.rel_tol, "drift {}", energy - 1.0);
    }

    #[test]
    fn fixed_step_order() {
        // halving the step must cut the error on ẋ = −x by far more than 4×
        let vf = decay();
        let exact = (-1f64).exp();
        let mut prev = f64::NAN;
        for steps in [4, 8, 16, 32] {
            let y = integrate_fixed(&vf, &[1.0], 1.0, steps).unwrap();
            let err = (y[0] - exact).abs();
            if prev.is_finite() {
                assert!(prev / err >= 16.0, "ratio {}", prev / err);
            }
            prev = err;
        }
        let vf = oscillator_like(0.3);
        let e = |s| {
            let y = integrate_fixed(&vf, &[1.0, 0.0], 2.0, s).unwrap();
            let t: f64 = 2.0;
            let r = (-0.3 * t).exp();
            ((y[0] - r * t.cos()).powi(2) + (y[1] + r * t.sin()).powi(2)).sqrt()
        };
        assert!(e(10) / e(20) >= 16.0);
    }

    #[test]
    fn adaptive_error_tracks_tolerance() {
        let vf = oscillator_like(0.1);
        let mut errs = Vec::new();
        for tol in [1e-4, 1e-6, 1e-8, 1e-10] {
            let mut p = IntegrationParams::for_domain(vf.domain());
            p.rel_tol = tol;
            p.abs_tol = tol * 1e-2;
            p.r_converge = 1e-30;
            p.t_max = 5.0;
            let l = integrate(&vf, &[1.0, 0.0], &p).unwrap();
            let r = (-0.5f64).exp();
            errs.push(((l.x_final[0] - r * 5f64.cos()).powi(2) + (l.x_final[1] + r * 5f64.sin()).powi(2)).sqrt());
        }
        for w in errs.windows(2) {
            assert!(w[0] / w[1] >= 4.0, "{errs:?}");
        }
    }

    #[test]
    fn van_der_pol_labels() {
        let vf = builtin("vdp", &BuiltinParams::new(), 0).unwrap();
        let p = IntegrationParams::for_domain(vf.domain());
        assert!(classify_roa(&vf, &[0.01, 0.01], &p).unwrap().converged());
        let l = classify_roa(&vf, &[0.0, 0.0], &p).unwrap();
        assert!(l.converged() && l.t_final == 0.0);
        let far = classify_roa(&vf, &[0.95, 0.95], &p).unwrap();
        assert_ne!(far.outcome, Outcome::Converged);
        // bit-identical on repetition
        assert_eq!(classify_roa(&vf, &[0.3, -0.2], &p).unwrap(), classify_roa(&vf, &[0.3, -0.2], &p).unwrap());
    }

    #[test]
    fn linear_hurwitz_always_converges() {
        let vf = oscillator_like(0.5);
        let p = IntegrationParams::for_domain(vf.domain());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        assert!(classify_batch(&vf, &pts, &p).unwrap().iter().all(RoaLabel::converged));
        let set = filter_collocation(&vf, pts.clone(), &p).unwrap();
        assert_eq!(set.points(), &pts[..]);
    }

    #[test]
    fn filtering_vdp_and_oversized_two_machine() {
        let vf = builtin("vdp", &BuiltinParams::new(), 0).unwrap();
        let p = IntegrationParams::for_domain(vf.domain());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f64>> = (0..100).map(|_| vec![rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)]).collect();
        assert_eq!(filter_collocation(&vf, pts.clone(), &p).unwrap().len(), 100);

        let tm = builtin("two_machine", &BuiltinParams::new(), 0).unwrap();
        let p = IntegrationParams::for_domain(tm.domain());
        let hw = tm.domain().half_widths();
        let pts: Vec<Vec<f64>> = (0..200).map(|_| hw.iter().map(|h| rng.random_range(-h..*h)).collect()).collect();
        let kept = filter_collocation(&tm, pts.clone(), &p).unwrap();
        assert!(kept.len() < pts.len() && kept.len() >= 2, "kept {}", kept.len());
        // order preserved
        let mut it = pts.iter();
        for q in kept.points() {
            assert!(it.any(|x| x == q));
        }
    }

    #[test]
    fn starvation_and_csv() {
        let vf = builtin("vdp", &BuiltinParams::new(), 0).unwrap();
        let p = IntegrationParams::for_domain(vf.domain());
        let r = filter_collocation(&vf, vec![vec![0.99, 0.99], vec![-0.99, -0.99]], &p);
        assert!(matches!(r, Err(Error::FilterStarvation { .. })));
        let pts = vec![vec![0.01, 0.0]];
        let labels = classify_batch(&vf, &pts, &p).unwrap();
        let mut buf = Vec::new();
        write_labels_csv(&pts, &labels, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x1,x2,label,t_final\n"));
        assert!(text.lines().nth(1).unwrap().contains(",converged,"));
    }
}
