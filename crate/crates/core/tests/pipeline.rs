use std::sync::Arc;

use koopman_roa::dynsys::{builtin, parse_system, BuiltinParams, DomainBox, SystemSpec, VectorField};
use koopman_roa::generator::{assemble, left_eigenpairs, solve_all, SolveOptions};
use koopman_roa::kernel::{CollocationSet, TaylorKernel};
use koopman_roa::lyapunov::{build_candidate, LyapunovCandidate};
use koopman_roa::odeint::{classify_batch, IntegrationParams};
use koopman_roa::scenario::{certify, sample_uniform, CertifyOptions, ScenarioSample, Xi};

fn candidate(vf: &VectorField, m: usize, half_width: f64) -> LyapunovCandidate {
    let box_ = DomainBox::symmetric(vf.dim(), half_width).unwrap();
    let pts = sample_uniform(&box_, m, 1).unwrap();
    let set = Arc::new(CollocationSet::new(pts, vf.domain()).unwrap());
    let mats = assemble(vf, TaylorKernel::new(1.0).unwrap(), set).unwrap();
    let spectrum = left_eigenpairs(mats.jac()).unwrap();
    let efs = solve_all(&mats, &spectrum, &SolveOptions::default()).unwrap();
    build_candidate(vf, &spectrum, efs).unwrap()
}

#[test]
fn parsed_expressions_match_the_builtin() {
    let vdp = builtin("vdp", &BuiltinParams::new(), 0).unwrap();
    let parsed = parse_system(&SystemSpec {
        expressions: vec!["-x2".into(), "-(1 - 9*x1^2)*x2 + x1".into()],
        domain: DomainBox::symmetric(2, 1.0).unwrap(),
    })
    .unwrap();
    for x in sample_uniform(vdp.domain(), 50, 4).unwrap() {
        // `^` goes through powf, so only the last bits may differ
        for (a, b) in vdp.eval_field(&x).unwrap().iter().zip(parsed.eval_field(&x).unwrap()) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn certified_shell_converges_under_the_flow() {
    let vf = builtin("vdp", &BuiltinParams::new(), 0).unwrap();
    let cand = candidate(&vf, 30, 0.15);
    let sample = ScenarioSample::draw(&cand, vf.domain(), 2000, 2).unwrap();
    let opts = CertifyOptions {
        beta: 1e-6,
        xi: Xi::Value(1e-9),
        force_origin_shell: false,
    };
    let cert = certify(&sample, &opts).unwrap();
    assert!(cert.theta1 < cert.theta2);
    assert!(cert.inlier_count > 0);

    let fresh = cand.batch_eval(sample_uniform(vf.domain(), 2000, 3).unwrap()).unwrap();
    let shell: Vec<Vec<f64>> = fresh
        .points
        .iter()
        .zip(&fresh.v)
        .filter(|(_, v)| cert.contains(**v))
        .map(|(x, _)| x.clone())
        .take(100)
        .collect();
    assert!(!shell.is_empty());
    let labels = classify_batch(&vf, &shell, &IntegrationParams::for_domain(vf.domain())).unwrap();
    assert!(labels.iter().all(|l| l.converged()));
}
