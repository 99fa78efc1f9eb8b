//! Scenario certification of sublevel shells `{θ₁ ≤ V ≤ θ₂}`.
//!
//! Scenarios are i.i.d. uniform points of the domain. A scenario is *bad* when
//! `V̇ ≥ 0` there; a shell is feasible when it contains no bad scenario. The
//! feasible shell holding the most scenarios is found by sorting the bad
//! values, and the probability that an unseen point violates it is bounded by
//! `ε(2)` with confidence `1 − β`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dynsys::DomainBox;
use crate::lyapunov::{EvaluatedSample, LyapunovCandidate};
use crate::{Error, Result};

/// Size of the support set of the two-parameter shell program.
pub const SUPPORT_SIZE: usize = 2;

/// Relative default for `ξ`: `ξ = XI_RELATIVE · (max V − min V)`.
pub const XI_RELATIVE: f64 = 1e-9;

/// `n` i.i.d. uniform points of `domain` from a ChaCha8 stream seeded with `seed`.
///
/// Coordinates are drawn point by point, axis by axis, as `lo + (hi − lo)·u`
/// with `u` uniform on `[0, 1)`.
pub fn sample_uniform(domain: &DomainBox, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    domain.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter {
            name: "N".into(),
            reason: "at least one scenario is required".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (domain.lower(), domain.upper());
    Ok((0..n)
        .map(|_| {
            lo.iter()
                .zip(hi)
                .map(|(a, b)| {
                    let u: f64 = rng.random();
                    // guard against rounding onto the open upper face
                    (a + (b - a) * u).min(*b)
                })
                .collect()
        })
        .collect())
}

/// Evaluated scenarios with their provenance.
#[derive(Debug, Clone)]
pub struct ScenarioSample {
    pub values: EvaluatedSample,
    pub seed: u64,
    pub domain: DomainBox,
}

impl ScenarioSample {
    /// Samples `n ≥ 3` scenarios and evaluates the candidate on them.
    pub fn draw(candidate: &LyapunovCandidate, domain: &DomainBox, n: usize, seed: u64) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidParameter {
                name: "N".into(),
                reason: format!("{n} < 3 scenarios"),
            });
        }
        if domain.dim() != candidate.dim() {
            return Err(Error::DimensionMismatch {
                expected: candidate.dim(),
                got: domain.dim(),
            });
        }
        let points = sample_uniform(domain, n, seed)?;
        let values = candidate.batch_eval(points)?;
        Ok(Self {
            values,
            seed,
            domain: domain.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Boundary separation `ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Xi {
    /// `XI_RELATIVE · (max V − min V)` over the sample.
    #[default]
    Auto,
    Value(f64),
}

/// Options for [`certify`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyOptions {
    pub beta: f64,
    pub xi: Xi,
    /// Consider only the shell adjacent to the origin, `[ξ, min bad V − ξ]`.
    pub force_origin_shell: bool,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            beta: 1e-6,
            xi: Xi::Auto,
            force_origin_shell: false,
        }
    }
}

/// A certified shell and its violation bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub theta1: f64,
    pub theta2: f64,
    pub epsilon: f64,
    pub beta: f64,
    #[serde(rename = "N")]
    pub n_scenarios: usize,
    pub xi: f64,
    pub seed: u64,
    /// Bad scenarios bounding the shell; `None` marks a sentinel.
    pub support: [Option<usize>; 2],
    /// Scenarios with `V` strictly between the two bounding bad values.
    pub inlier_count: usize,
    pub warnings: Vec<String>,
}

impl Certificate {
    /// Whether `v` lies in the closed shell.
    pub fn contains(&self, v: f64) -> bool {
        self.theta1 <= v && v <= self.theta2
    }
}

/// Optimal shell of `values` (sorting-based scan over consecutive bad values).
pub fn certify(sample: &ScenarioSample, opts: &CertifyOptions) -> Result<Certificate> {
    let s = &sample.values;
    if s.len() < 3 {
        return Err(Error::InvalidParameter {
            name: "N".into(),
            reason: format!("{} < 3 scenarios", s.len()),
        });
    }
    if !(opts.beta > 0.0 && opts.beta < 1.0) {
        return Err(Error::InvalidParameter {
            name: "beta".into(),
            reason: format!("{} is outside (0, 1)", opts.beta),
        });
    }
    if s.v.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("scenario V values"));
    }
    let vmax = s.v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let vmin = s.v.iter().copied().fold(f64::INFINITY, f64::min);
    let xi = match opts.xi {
        Xi::Value(x) => x,
        Xi::Auto => {
            let x = XI_RELATIVE * (vmax - vmin);
            if x > 0.0 {
                x
            } else {
                XI_RELATIVE * vmax.max(f64::MIN_POSITIVE)
            }
        }
    };
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "xi".into(),
            reason: format!("{xi} is not positive"),
        });
    }
    let bad: Vec<usize> = (0..s.len()).filter(|&i| !(s.vdot[i] < 0.0)).collect();
    let (scan, skipped) = scan_intervals(&s.v, &bad, xi, opts.force_origin_shell);
    let mut warnings = Vec::new();
    let Some(best) = scan else {
        return Err(Error::InvalidArgument(
            "no gap between bad scenarios is wider than 2ξ; no shell can be certified".into(),
        ));
    };
    if skipped > best.count {
        warnings.push(format!(
            "an interval holding {skipped} scenarios is too narrow for ξ = {xi:e}; a smaller ξ would certify a larger shell"
        ));
    }
    if best.count == 0 {
        warnings.push("certified shell contains no scenario".to_string());
    }
    if bad.is_empty() {
        warnings.push("no scenario with nonnegative derivative was sampled".to_string());
    }
    Ok(Certificate {
        theta1: best.lo + xi,
        theta2: best.hi - xi,
        epsilon: epsilon_bound(SUPPORT_SIZE, s.len(), opts.beta)?,
        beta: opts.beta,
        n_scenarios: s.len(),
        xi,
        seed: sample.seed,
        support: best.support,
        inlier_count: best.count,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Interval {
    lo: f64,
    hi: f64,
    support: [Option<usize>; 2],
    count: usize,
}

/// Whether `[a + ξ, b − ξ]` is a nonempty shell strictly inside `(a, b)` in
/// floating point. Near large `a` the sum `a + ξ` can round back to `a`.
pub fn shell_fits(a: f64, b: f64, xi: f64) -> bool {
    let (t1, t2) = (a + xi, b - xi);
    a < t1 && t1 < t2 && t2 < b
}

/// Best interval between consecutive boundaries `0 ≤ bad V… ≤ max V + 2ξ`,
/// and the largest count among intervals too narrow for a shell.
fn scan_intervals(v: &[f64], bad: &[usize], xi: f64, origin_only: bool) -> (Option<Interval>, usize) {
    let vmax = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut bounds: Vec<(f64, Option<usize>)> = Vec::with_capacity(bad.len() + 2);
    bounds.push((0.0, None));
    let mut bad_sorted: Vec<(f64, Option<usize>)> = bad.iter().map(|&i| (v[i], Some(i))).collect();
    bad_sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    bounds.extend(bad_sorted);
    bounds.push((vmax + 2.0 * xi, None));

    let mut all = v.to_vec();
    all.sort_by(f64::total_cmp);
    let count_open = |a: f64, b: f64| all.partition_point(|&x| x < b).saturating_sub(all.partition_point(|&x| x <= a));

    let mut best: Option<Interval> = None;
    let mut skipped = 0;
    for pair in bounds.windows(2) {
        let ((lo, sl), (hi, sh)) = (pair[0], pair[1]);
        if origin_only && sl.is_some() {
            break;
        }
        let count = count_open(lo, hi);
        if !shell_fits(lo, hi, xi) {
            skipped = skipped.max(count);
            if origin_only {
                break;
            }
            continue;
        }
        // strict comparison keeps the first, i.e. innermost, of equal counts
        if best.is_none_or(|b| count > b.count) {
            best = Some(Interval {
                lo,
                hi,
                support: [sl, sh],
                count,
            });
        }
        if origin_only {
            break;
        }
    }
    (best, skipped)
}

/// `ε(k) = 1 − (β / (N·C(N,k)))^{1/(N−k)}`, and 1 for `k = N`.
///
/// Evaluated in the log domain with `ln C(N,k)` from log-gamma.
pub fn epsilon_bound(k: usize, n: usize, beta: f64) -> Result<f64> {
    if k > n {
        return Err(Error::InvalidParameter {
            name: "k".into(),
            reason: format!("{k} exceeds N = {n}"),
        });
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParameter {
            name: "beta".into(),
            reason: format!("{beta} is outside (0, 1)"),
        });
    }
    if k == n {
        return Ok(1.0);
    }
    let (nf, kf) = (n as f64, k as f64);
    let ln_binom = ln_gamma(nf + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(nf - kf + 1.0);
    let expo = (beta.ln() - nf.ln() - ln_binom) / (nf - kf);
    Ok(-expo.exp_m1())
}

/// Fraction of `values` inside the open shell `(θ₁, θ₂)` with `V̇ ≥ 0`.
pub fn violation_fraction_of(values: &EvaluatedSample, cert: &Certificate) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("validation points"));
    }
    let bad = values
        .v
        .iter()
        .zip(&values.vdot)
        .filter(|(v, d)| cert.theta1 < **v && **v < cert.theta2 && !(**d < 0.0))
        .count();
    Ok(bad as f64 / values.len() as f64)
}

/// Evaluates the candidate on fresh points and returns [`violation_fraction_of`].
pub fn violation_fraction(candidate: &LyapunovCandidate, cert: &Certificate, fresh_points: Vec<Vec<f64>>) -> Result<f64> {
    if fresh_points.is_empty() {
        return Err(Error::Empty("validation points"));
    }
    violation_fraction_of(&candidate.batch_eval(fresh_points)?, cert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rug::Float;

    fn sample_of(v: Vec<f64>, vdot: Vec<f64>) -> ScenarioSample {
        let n = v.len();
        ScenarioSample {
            values: EvaluatedSample {
                points: vec![vec![0.0]; n],
                v,
                vdot,
            },
            seed: 0,
            domain: DomainBox::symmetric(1, 1.0).unwrap(),
        }
    }

    /// Every pair of boundaries drawn from {0, bad V, max V + 2ξ} with no bad
    /// value strictly inside, scored by the number of scenarios strictly inside.
    fn brute_force(v: &[f64], vdot: &[f64], xi: f64) -> (f64, f64, usize) {
        let vmax = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut cand = vec![0.0, vmax + 2.0 * xi];
        cand.extend(v.iter().zip(vdot).filter(|(_, d)| **d >= 0.0).map(|(x, _)| *x));
        let mut best: Option<(f64, f64, usize)> = None;
        for &a in &cand {
            for &b in &cand {
                if !shell_fits(a, b, xi) {
                    continue;
                }
                let blocked = v.iter().zip(vdot).any(|(x, d)| *d >= 0.0 && a < *x && *x < b);
                if blocked {
                    continue;
                }
                let count = v.iter().filter(|x| a < **x && **x < b).count();
                let better = match best {
                    None => true,
                    Some((ba, _, bc)) => count > bc || (count == bc && a < ba),
                };
                if better {
                    best = Some((a, b, count));
                }
            }
        }
        let (a, b, c) = best.unwrap();
        (a + xi, b - xi, c)
    }

    #[test]
    fn duplicate_bad_values_and_narrow_gaps() {
        let v = vec![0.5, 0.5, 0.1, 0.2, 0.3, 0.6];
        let vdot = vec![1.0, 1.0, -1.0, -1.0, -1.0, -1.0];
        let opts = CertifyOptions {
            xi: Xi::Value(1e-6),
            ..Default::default()
        };
        let c = certify(&sample_of(v.clone(), vdot.clone()), &opts).unwrap();
        assert_eq!(c.inlier_count, 3);
        assert!(c.warnings.is_empty(), "{:?}", c.warnings);
        // a margin wider than the origin gap pushes the shell outward and says so
        let wide = CertifyOptions {
            xi: Xi::Value(0.3),
            ..Default::default()
        };
        let v = vec![0.5, 0.1, 0.2, 0.3, 0.4, 1.0, 1.2, 2.5];
        let vdot = vec![1.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0];
        let c = certify(&sample_of(v, vdot), &wide).unwrap();
        assert_eq!(c.inlier_count, 3);
        assert_eq!(c.support, [Some(0), None]);
        assert_eq!(c.warnings.len(), 1);
        assert!(c.warnings[0].contains("holding 4 scenarios"));
        assert!(!shell_fits(1e9, 2e9, 1e-9));
        assert!(shell_fits(0.0, 1.0, 1e-9));
    }

    #[test]
    fn hand_enumerated_instance() {
        let v = vec![0.5, 0.9, 0.1, 0.2, 0.3, 0.6, 0.7, 1.0];
        let vdot = vec![1.0, 0.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0];
        let xi = 1e-6;
        let opts = CertifyOptions {
            xi: Xi::Value(xi),
            ..Default::default()
        };
        let c = certify(&sample_of(v, vdot), &opts).unwrap();
        assert_eq!(c.theta1, xi);
        assert_eq!(c.theta2, 0.5 - xi);
        assert_eq!(c.inlier_count, 3);
        assert_eq!(c.support, [None, Some(0)]);
    }

    #[test]
    fn no_bad_scenarios_gives_whole_range() {
        let v = vec![0.3, 0.1, 0.8, 0.4];
        let c = certify(&sample_of(v, vec![-1.0; 4]), &CertifyOptions::default()).unwrap();
        let xi = c.xi;
        assert_eq!(xi, XI_RELATIVE * (0.8 - 0.1));
        assert_eq!(c.theta1, xi);
        assert_eq!(c.theta2, (0.8 + 2.0 * xi) - xi);
        assert_eq!(c.inlier_count, 4);
        assert_eq!(c.support, [None, None]);
        assert!(!c.warnings.is_empty());
    }

    #[test]
    fn ties_prefer_the_inner_interval_and_origin_flag() {
        // (0,1): 2 points, (1,3): 2 points, (3,top): 3 points
        let v = vec![0.2, 0.4, 1.0, 1.5, 2.5, 3.0, 3.5, 4.0, 4.5];
        let vdot = vec![-1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0, -1.0];
        let s = sample_of(v, vdot);
        let c = certify(&s, &CertifyOptions::default()).unwrap();
        assert_eq!(c.inlier_count, 3);
        assert_eq!(c.support, [Some(5), None]);
        let o = certify(
            &s,
            &CertifyOptions {
                force_origin_shell: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(o.inlier_count, 2);
        assert_eq!(o.support, [None, Some(2)]);
        // equal counts: first interval wins
        let v = vec![0.2, 0.4, 1.0, 1.5, 2.5, 3.0];
        let vdot = vec![-1.0, -1.0, 1.0, -1.0, -1.0, 1.0];
        let c = certify(&sample_of(v, vdot), &CertifyOptions::default()).unwrap();
        assert_eq!(c.support, [None, Some(2)]);
    }

    #[test]
    fn matches_exhaustive_scan_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let n = 200;
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            let p_bad = rng.random_range(0.0..0.3);
            let vdot: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p_bad { 1.0 } else { -1.0 }).collect();
            let xi = 1e-9;
            let c = certify(
                &sample_of(v.clone(), vdot.clone()),
                &CertifyOptions {
                    xi: Xi::Value(xi),
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!((c.theta1, c.theta2, c.inlier_count), brute_force(&v, &vdot, xi));
        }
    }

    #[test]
    fn feasibility_and_support_necessity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let n = 300;
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let vdot: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.05 { 0.0 } else { -1.0 }).collect();
            let s = sample_of(v.clone(), vdot.clone());
            let c = certify(&s, &CertifyOptions::default()).unwrap();
            assert!(0.0 <= c.theta1 && c.theta1 < c.theta2);
            assert_eq!(violation_fraction_of(&s.values, &c).unwrap(), 0.0);
            for (x, d) in v.iter().zip(&vdot) {
                assert!(!(c.contains(*x) && *d >= 0.0));
            }
            // dropping a bounding bad scenario always lets a larger shell win
            for idx in c.support.iter().flatten() {
                let mut relaxed = vdot.clone();
                relaxed[*idx] = -1.0;
                let r = certify(&sample_of(v.clone(), relaxed), &CertifyOptions { xi: Xi::Value(c.xi), ..Default::default() }).unwrap();
                assert!(r.inlier_count > c.inlier_count);
                assert_ne!((r.theta1, r.theta2), (c.theta1, c.theta2));
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let s = sample_of(vec![0.1, 0.2, 0.3], vec![-1.0; 3]);
        for beta in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(certify(&s, &CertifyOptions { beta, ..Default::default() }).is_err());
        }
        assert!(certify(&s, &CertifyOptions { xi: Xi::Value(0.0), ..Default::default() }).is_err());
        assert!(certify(&sample_of(vec![0.1, 0.2], vec![-1.0; 2]), &CertifyOptions::default()).is_err());
        assert!(epsilon_bound(3, 2, 0.5).is_err());
        assert!(epsilon_bound(1, 2, 1.0).is_err());
        assert!(violation_fraction_of(&EvaluatedSample::default(), &certify(&s, &CertifyOptions::default()).unwrap()).is_err());
    }

    #[test]
    fn epsilon_reference_values() {
        assert_eq!(epsilon_bound(7, 7, 1e-6).unwrap(), 1.0);
        let e1 = epsilon_bound(2, 10_000, 1e-6).unwrap();
        assert_eq!(format!("{e1:.1e}"), "4.1e-3");
        let e3 = epsilon_bound(2, 500_000, 1e-6).unwrap();
        assert_eq!(format!("{e3:.2e}"), "1.05e-4");
    }

    fn epsilon_reference(n: u64, beta: f64) -> f64 {
        // ε(2) with C(N,2) = N(N−1)/2 in 256-bit arithmetic
        let bits = 256;
        let nf = Float::with_val(bits, n);
        let binom = Float::with_val(bits, &nf * Float::with_val(bits, n - 1)) / 2u32;
        let denom = Float::with_val(bits, &nf * &binom);
        let ratio = Float::with_val(bits, beta) / denom;
        let root = ratio.ln() / Float::with_val(bits, n - 2);
        (-root.exp_m1()).to_f64()
    }

    #[test]
    fn epsilon_log_domain_accuracy() {
        let mut n = 10u64;
        while n <= 10_000_000 {
            for beta in [1e-6, 1e-3, 0.1] {
                let got = epsilon_bound(2, n as usize, beta).unwrap();
                let want = epsilon_reference(n, beta);
                assert!((got - want).abs() <= 1e-6 * want, "N={n} β={beta}: {got} vs {want}");
            }
            n = n * 3 + 1;
        }
    }

    #[test]
    fn epsilon_monotonicity() {
        for beta in [1e-9, 1e-6, 1e-2] {
            for n in [10usize, 50, 200, 1000, 10_000] {
                let e = |k, n| epsilon_bound(k, n, beta).unwrap();
                assert!(e(2, n) >= e(2, n + 1));
                assert!(e(2, n) >= e(2, 2 * n));
                for k in 0..n.min(20) {
                    assert!(e(k, n) <= e(k + 1, n));
                }
            }
        }
    }

    #[test]
    fn uniform_sampling() {
        let b = DomainBox::symmetric(2, 1.0).unwrap();
        assert_eq!(sample_uniform(&b, 100, 3).unwrap(), sample_uniform(&b, 100, 3).unwrap());
        assert_ne!(sample_uniform(&b, 100, 3).unwrap(), sample_uniform(&b, 100, 4).unwrap());
        let one = sample_uniform(&b, 1, 9).unwrap();
        assert_eq!(one.len(), 1);
        assert!(b.contains(&one[0]));
        let pts = sample_uniform(&b, 10_000, 17).unwrap();
        for axis in 0..2 {
            let mean = pts.iter().map(|p| p[axis]).sum::<f64>() / pts.len() as f64;
            assert!(mean.abs() <= 0.04, "axis {axis} mean {mean}");
        }
        assert!(pts.iter().all(|p| b.contains(p)));
        assert!(sample_uniform(&b, 0, 1).is_err());
    }
}
