//! The reference systems: reversed Van der Pol, the two-machine power system
//! and a sparse network of coupled Van der Pol oscillators.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DomainBox, VectorField};
use crate::{Error, Result};

/// Named numeric parameters for [`builtin`]. Unrecognized keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BuiltinParams(BTreeMap<String, f64>);

impl BuiltinParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.0.insert(key.to_string(), value);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.0.get(key).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for k in self.0.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::InvalidParameter {
                    name: k.clone(),
                    reason: format!("not a parameter of this system (expected one of {allowed:?})"),
                });
            }
        }
        Ok(())
    }

    fn positive(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.get(key).unwrap_or(default);
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidParameter {
                name: key.into(),
                reason: format!("must be positive and finite, got {v}"),
            });
        }
        Ok(v)
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(v) if v == 0.0 => Ok(false),
            Some(v) if v == 1.0 => Ok(true),
            Some(v) => Err(Error::InvalidParameter {
                name: key.into(),
                reason: format!("must be 0 or 1, got {v}"),
            }),
        }
    }

    fn count(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) if v >= 1.0 && v.fract() == 0.0 && v <= 1e6 => Ok(v as usize),
            Some(v) => Err(Error::InvalidParameter {
                name: key.into(),
                reason: format!("must be a positive integer, got {v}"),
            }),
        }
    }
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 3] = ["vdp", "two_machine", "networked_vdp"];

/// Instantiates a reference system.
///
/// * `vdp`: `ẋ₁ = −x₂`, `ẋ₂ = −μ(1 − 9x₁²)x₂ + x₁` on `[−1,1]²`. Parameters `mu` (1).
/// * `two_machine`: `ẋ₁ = x₂`, `ẋ₂ = −x₂/2 − sin(3x₁ + π/3)/3 + √3/6` on `[−1,1]²`.
///   Setting `literal = 1` drops the `1/3` factor on the sine, a form whose
///   origin is not an equilibrium, so construction then fails.
/// * `networked_vdp`: `nodes` (5) Van der Pol units with random damping and
///   two random couplings each (see [`NetworkParameters`]), on
///   `[−half_width, half_width]^(2·nodes)` with `half_width` 4, rescaled to the
///   unit box unless `rescale = 0`. Only this system uses `seed`.
pub fn builtin(name: &str, params: &BuiltinParams, seed: u64) -> Result<VectorField> {
    match name {
        "vdp" => {
            params.check_keys(&["mu"])?;
            van_der_pol(params.positive("mu", 1.0)?)
        }
        "two_machine" => {
            params.check_keys(&["literal"])?;
            two_machine(params.flag("literal", false)?)
        }
        "networked_vdp" => {
            params.check_keys(&["nodes", "half_width", "rescale", "alpha_min", "alpha_max", "beta_max", "couplings"])?;
            let nodes = params.count("nodes", 5)?;
            let couplings = params.count("couplings", 2)?;
            let alpha_min = params.positive("alpha_min", 0.5)?;
            let alpha_max = params.positive("alpha_max", 2.5)?;
            let beta_max = params.get("beta_max").unwrap_or(0.1);
            if alpha_max < alpha_min {
                return Err(Error::InvalidParameter {
                    name: "alpha_max".into(),
                    reason: format!("{alpha_max} < alpha_min = {alpha_min}"),
                });
            }
            if !(beta_max.is_finite() && beta_max >= 0.0) {
                return Err(Error::InvalidParameter {
                    name: "beta_max".into(),
                    reason: format!("must be nonnegative, got {beta_max}"),
                });
            }
            let p = NetworkParameters::sample(nodes, couplings, (alpha_min, alpha_max), beta_max, seed)?;
            let vf = networked_van_der_pol(&p, params.positive("half_width", 4.0)?)?;
            if params.flag("rescale", true)? {
                vf.rescale_to_unit_box()
            } else {
                Ok(vf)
            }
        }
        other => Err(Error::UnknownSystem(other.to_string())),
    }
}

fn unit_square() -> DomainBox {
    DomainBox::symmetric(2, 1.0).expect("valid box")
}

fn van_der_pol(mu: f64) -> Result<VectorField> {
    let jac = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, -mu]);
    VectorField::new(
        "vdp",
        unit_square(),
        move |x, out| {
            out[0] = -x[1];
            out[1] = -mu * (1.0 - 9.0 * x[0] * x[0]) * x[1] + x[0];
        },
        Some(jac),
    )
}

fn two_machine(literal: bool) -> Result<VectorField> {
    let gain = if literal { 1.0 } else { 1.0 / 3.0 };
    let offset = 3f64.sqrt() / 6.0;
    // d/dx₁ of −gain·sin(3x₁ + π/3) at 0
    let j21 = -3.0 * gain * (PI / 3.0).cos();
    let jac = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, j21, -0.5]);
    VectorField::new(
        if literal { "two_machine (literal)" } else { "two_machine" },
        unit_square(),
        move |x, out| {
            out[0] = x[1];
            out[1] = -0.5 * x[1] - gain * (3.0 * x[0] + PI / 3.0).sin() + offset;
        },
        Some(jac),
    )
}

/// Random parameters of the coupled oscillator network.
///
/// Node `i` has states `(x_{i1}, x_{i2})` at positions `2i, 2i+1` and obeys
/// `ẋ_{i1} = −x_{i2}`,
/// `ẋ_{i2} = x_{i1} − α_i(1 − x_{i1}²)x_{i2} + Σ_j β_ij x_{i1} x_{j2}`.
///
/// Draw order from `ChaCha8Rng::seed_from_u64(seed)`: all `α_i` first, then per
/// node its coupling support (uniform without replacement among the other
/// nodes) followed by the coupling values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParameters {
    pub alpha: Vec<f64>,
    /// Dense `nodes × nodes`, zero outside the supports and on the diagonal.
    pub beta: Vec<Vec<f64>>,
    /// Sorted coupled-node indices per node.
    pub supports: Vec<Vec<usize>>,
    pub seed: u64,
}

impl NetworkParameters {
    pub fn sample(nodes: usize, couplings: usize, alpha_range: (f64, f64), beta_max: f64, seed: u64) -> Result<Self> {
        if couplings >= nodes {
            return Err(Error::InvalidParameter {
                name: "couplings".into(),
                reason: format!("{couplings} couplings need more than {nodes} nodes"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha: Vec<f64> = (0..nodes)
            .map(|_| alpha_range.0 + (alpha_range.1 - alpha_range.0) * rng.random::<f64>())
            .collect();
        let mut beta = vec![vec![0.0; nodes]; nodes];
        let mut supports = Vec::with_capacity(nodes);
        for (i, row) in beta.iter_mut().enumerate() {
            let picked: Vec<usize> = index::sample(&mut rng, nodes - 1, couplings)
                .into_iter()
                .map(|k| if k >= i { k + 1 } else { k })
                .collect();
            for &j in &picked {
                row[j] = -beta_max + 2.0 * beta_max * rng.random::<f64>();
            }
            let mut sorted = picked;
            sorted.sort_unstable();
            supports.push(sorted);
        }
        Ok(Self { alpha, beta, supports, seed })
    }

    pub fn nodes(&self) -> usize {
        self.alpha.len()
    }

    /// `J_F(0)`: block diagonal with blocks `[[0, −1], [1, −α_i]]`.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let n = 2 * self.nodes();
        let mut j = DMatrix::zeros(n, n);
        for (i, a) in self.alpha.iter().enumerate() {
            j[(2 * i, 2 * i + 1)] = -1.0;
            j[(2 * i + 1, 2 * i)] = 1.0;
            j[(2 * i + 1, 2 * i + 1)] = -a;
        }
        j
    }
}

/// The oscillator network on `[−half_width, half_width]^(2·nodes)`, not rescaled.
pub fn networked_van_der_pol(p: &NetworkParameters, half_width: f64) -> Result<VectorField> {
    let nodes = p.nodes();
    let jac = p.jacobian();
    for ev in jac.complex_eigenvalues().iter() {
        if !(ev.re < 0.0) {
            return Err(Error::Unstable { re: ev.re, im: ev.im });
        }
    }
    let alpha = p.alpha.clone();
    let couplings: Vec<Vec<(usize, f64)>> = p
        .supports
        .iter()
        .zip(&p.beta)
        .map(|(s, row)| s.iter().map(|&j| (j, row[j])).collect())
        .collect();
    VectorField::new(
        format!("networked_vdp(seed={})", p.seed),
        DomainBox::symmetric(2 * nodes, half_width)?,
        move |x, out| {
            for i in 0..nodes {
                let (x1, x2) = (x[2 * i], x[2 * i + 1]);
                let coupling: f64 = couplings[i].iter().map(|&(j, b)| b * x1 * x[2 * j + 1]).sum();
                out[2 * i] = -x2;
                out[2 * i + 1] = x1 - alpha[i] * (1.0 - x1 * x1) * x2 + coupling;
            }
        },
        Some(jac),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn vdp_values() {
        let vf = builtin("vdp", &BuiltinParams::new(), 0).unwrap();
        assert_eq!(vf.eval_field(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let f = vf.eval_field(&[0.5, 0.5]).unwrap();
        assert_relative_eq!(f[0], -0.5);
        assert_relative_eq!(f[1], 1.125, epsilon = 1e-15);
        let f = vf.eval_field(&[0.1, 0.1]).unwrap();
        assert_relative_eq!(f[0], -0.1);
        assert_relative_eq!(f[1], 0.009, epsilon = 1e-15);
        let j = vf.jacobian_at_origin().unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, -1.0]));
    }

    #[test]
    fn two_machine_corrected_is_equilibrium() {
        let vf = builtin("two_machine", &BuiltinParams::new(), 0).unwrap();
        let f0 = vf.eval_field(&[0.0, 0.0]).unwrap();
        assert!(f0[0] == 0.0 && f0[1].abs() < 1e-15);
        let j = vf.jacobian_at_origin().unwrap();
        assert!((j - DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.5, -0.5])).abs().max() < 1e-15);
    }

    #[test]
    fn two_machine_literal_is_rejected() {
        let p = BuiltinParams::new().with("literal", 1.0);
        match builtin("two_machine", &p, 0) {
            Err(Error::NotEquilibrium { residual }) => {
                assert_relative_eq!(residual[1], -3f64.sqrt() / 3.0, epsilon = 1e-15);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn builtins_vanish_at_origin() {
        for name in BUILTIN_NAMES {
            let vf = builtin(name, &BuiltinParams::new(), 7).unwrap();
            let f0 = vf.eval_field(&vec![0.0; vf.dim()]).unwrap();
            assert!(super::super::norm(&f0) <= 1e-12 * vf.domain().diameter(), "{name}");
        }
    }

    #[test]
    fn unknown_name_and_parameters() {
        assert!(matches!(builtin("lorenz", &BuiltinParams::new(), 0), Err(Error::UnknownSystem(_))));
        let p = BuiltinParams::new().with("sigma", 1.0);
        assert!(matches!(builtin("vdp", &p, 0), Err(Error::InvalidParameter { .. })));
        let p = BuiltinParams::new().with("mu", -1.0);
        assert!(matches!(builtin("vdp", &p, 0), Err(Error::InvalidParameter { .. })));
        let p = BuiltinParams::new().with("nodes", 2.5);
        assert!(matches!(builtin("networked_vdp", &p, 0), Err(Error::InvalidParameter { .. })));
        let p = BuiltinParams::new().with("nodes", 2.0);
        assert!(matches!(builtin("networked_vdp", &p, 0), Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn network_is_reproducible_and_well_formed() {
        let a = NetworkParameters::sample(5, 2, (0.5, 2.5), 0.1, 7).unwrap();
        let b = NetworkParameters::sample(5, 2, (0.5, 2.5), 0.1, 7).unwrap();
        assert_eq!(a, b);
        let c = NetworkParameters::sample(5, 2, (0.5, 2.5), 0.1, 8).unwrap();
        assert_ne!(a, c);
        for i in 0..5 {
            assert!((0.5..2.5).contains(&a.alpha[i]));
            assert_eq!(a.supports[i].len(), 2);
            assert!(!a.supports[i].contains(&i));
            for j in 0..5 {
                if a.supports[i].contains(&j) {
                    assert!(a.beta[i][j].abs() <= 0.1 && a.beta[i][j] != 0.0);
                } else {
                    assert_eq!(a.beta[i][j], 0.0);
                }
            }
        }
        let x: Vec<f64> = (0..10).map(|i| 0.1 * i as f64 - 0.45).collect();
        let f1 = builtin("networked_vdp", &BuiltinParams::new(), 7).unwrap().eval_field(&x).unwrap();
        let f2 = builtin("networked_vdp", &BuiltinParams::new(), 7).unwrap().eval_field(&x).unwrap();
        assert_eq!(f1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), f2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn network_field_matches_hand_expansion() {
        let p = NetworkParameters::sample(5, 2, (0.5, 2.5), 0.1, 3).unwrap();
        let vf = networked_van_der_pol(&p, 4.0).unwrap();
        let x: Vec<f64> = (0..10).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect();
        let f = vf.eval_field(&x).unwrap();
        for i in 0..5 {
            let mut want = x[2 * i] - p.alpha[i] * (1.0 - x[2 * i] * x[2 * i]) * x[2 * i + 1];
            for j in 0..5 {
                want += p.beta[i][j] * x[2 * i] * x[2 * j + 1];
            }
            assert_relative_eq!(f[2 * i + 1], want, epsilon = 1e-14);
            assert_eq!(f[2 * i], -x[2 * i + 1]);
        }
    }

    #[test]
    fn rescaled_network_keeps_spectrum_and_scales_field() {
        let p = NetworkParameters::sample(5, 2, (0.5, 2.5), 0.1, 7).unwrap();
        let raw = networked_van_der_pol(&p, 4.0).unwrap();
        let unit = builtin("networked_vdp", &BuiltinParams::new(), 7).unwrap();
        assert_eq!(unit.domain(), &DomainBox::symmetric(10, 1.0).unwrap());
        let y: Vec<f64> = (0..10).map(|i| 0.05 * i as f64 - 0.2).collect();
        let x: Vec<f64> = y.iter().map(|v| 4.0 * v).collect();
        let g = unit.eval_field(&y).unwrap();
        let f = raw.eval_field(&x).unwrap();
        for k in 0..10 {
            assert_relative_eq!(g[k], f[k] / 4.0, epsilon = 1e-15);
        }
        let sort = |m: DMatrix<f64>| {
            let mut e: Vec<_> = m.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect();
            e.sort_by(|a, b| a.partial_cmp(b).unwrap());
            e
        };
        for (a, b) in sort(raw.jacobian_at_origin().unwrap()).iter().zip(&sort(unit.jacobian_at_origin().unwrap())) {
            assert!((a.0 - b.0).abs() < 1e-10 && (a.1 - b.1).abs() < 1e-10);
        }
    }

    #[test]
    fn parsed_system_agrees_with_builtin_jacobian() {
        use super::super::{parse_system, SystemSpec};
        let spec = SystemSpec {
            expressions: vec!["-x2".into(), "-(1 - 9*x1^2)*x2 + x1".into()],
            domain: DomainBox::symmetric(2, 1.0).unwrap(),
        };
        let parsed = parse_system(&spec).unwrap().jacobian_at_origin().unwrap();
        let exact = builtin("vdp", &BuiltinParams::new(), 0).unwrap().jacobian_at_origin().unwrap();
        assert!((&parsed - &exact).abs().max() <= 1e-5 * exact.abs().max());

        let spec = SystemSpec {
            expressions: vec!["x2".into(), "-x2/2 - sin(3*x1 + pi/3)/3 + 3^0.5/6".into()],
            domain: DomainBox::symmetric(2, 1.0).unwrap(),
        };
        let parsed = parse_system(&spec).unwrap().jacobian_at_origin().unwrap();
        let exact = builtin("two_machine", &BuiltinParams::new(), 0).unwrap().jacobian_at_origin().unwrap();
        assert!((&parsed - &exact).abs().max() <= 1e-5 * exact.abs().max());
    }
}
