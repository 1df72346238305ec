//! Property tests for the module invariants.

use std::sync::Arc;

use proptest::prelude::*;
use tatonnement::critical::{find_critical_points, CriticalSearchSettings, Stability, DEDUP_DISTANCE};
use tatonnement::dynamics::{
    energy_identity_check, integrate_deterministic, sample_ensemble, NoiseSpec,
};
use tatonnement::field::{
    asymmetry_norm, make_appendix_field, AppendixParams, DomainBox, FieldSpec, JacobianMode, Monomial,
    Polynomial, PolynomialModel, PriceVector,
};
use tatonnement::hodge::{analytic_decomposition, decompose_on_grid, GridSpec};
use tatonnement::paths::{
    appendix_paths, line_integral_solenoidal, onsager_machlup_action_with, positivity_margin, reversal_identity,
    ActionQuadrature, PiecewisePath,
};

fn appendix(a: f64, b: f64, k: f64, r: [f64; 2], half: f64) -> FieldSpec {
    let params = AppendixParams::with_reference(a, b, k, PriceVector::from(r)).unwrap();
    let domain = DomainBox::new(vec![r[0] - half, r[1] - half], vec![r[0] + half, r[1] + half]).unwrap();
    make_appendix_field(&params, domain).unwrap()
}

fn poly2(terms: &[(f64, u32, u32)]) -> Polynomial {
    Polynomial::from_terms(terms.iter().map(|&(c, i, j)| Monomial::new(c, vec![i, j])).collect())
}

/// Random quartic potential plus a rotation-type solenoidal part `c·J∇H`.
fn random_parts_field(v: [f64; 6], c: f64) -> FieldSpec {
    let potential = poly2(&[
        (v[0], 2, 0),
        (v[1], 0, 2),
        (v[2], 1, 1),
        (v[3], 4, 0),
        (v[4], 0, 4),
        (v[5], 3, 1),
    ]);
    // H = (x² + y²)/2 + x²y; J∇H = (∂yH, -∂xH)
    let solenoidal = vec![poly2(&[(c, 0, 1), (c, 2, 0)]), poly2(&[(-c, 1, 0), (-2.0 * c, 1, 1)])];
    let model = PolynomialModel::from_parts(2, Some(potential), Some(solenoidal)).unwrap();
    FieldSpec::new(Arc::new(model), DomainBox::symmetric(2, 2.0).unwrap()).unwrap()
}

fn coeff() -> impl Strategy<Value = f64> {
    -1.0f64..1.0
}

fn two_well() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.5f64..2.0, 0.5f64..2.0, 0.0f64..1.0).prop_map(|(a, b, frac)| {
        // k chosen so that a² - k²/b stays clearly positive
        let kmax = a * b.sqrt();
        (a, b, 0.9 * frac * kmax)
    })
}

fn smooth_path(field: &FieldSpec, coeffs: &[f64; 8], t_final: f64) -> PiecewisePath {
    let n = 65;
    let nodes: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let s = i as f64 / (n - 1) as f64;
            let w = std::f64::consts::PI * s;
            vec![
                coeffs[0] + coeffs[1] * s + coeffs[2] * w.sin() + coeffs[3] * (2.0 * w).sin(),
                coeffs[4] + coeffs[5] * s + coeffs[6] * w.sin() + coeffs[7] * (3.0 * w).sin(),
            ]
        })
        .collect();
    for node in &nodes {
        assert!(field.domain().contains(node));
    }
    PiecewisePath::timed(nodes, t_final).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn declared_parts_reproduce_the_field(v in prop::array::uniform6(coeff()), c in coeff(), x in -2.0f64..2.0, y in -2.0f64..2.0) {
        let f = random_parts_field(v, c);
        let a = f.eval(&[x, y]).unwrap();
        let g = f.potential_gradient(&[x, y]).unwrap();
        let s = f.solenoidal(&[x, y]).unwrap();
        for i in 0..2 {
            prop_assert!((a[i] + g[i] - s[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn appendix_parts_reproduce_the_field((a, b, k) in two_well(), r0 in -1.0f64..1.0, d in prop::array::uniform2(-1.5f64..1.5)) {
        let f = appendix(a, b, k, [r0, -r0], 2.0);
        let p = [r0 + d[0], -r0 + d[1]];
        let av = f.eval(&p).unwrap();
        let g = f.potential_gradient(&p).unwrap();
        let s = f.solenoidal(&p).unwrap();
        for i in 0..2 {
            prop_assert!((av[i] + g[i] - s[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn appendix_is_odd_about_the_reference((a, b, k) in two_well(), r in prop::array::uniform2(-1.0f64..1.0), d in prop::array::uniform2(-1.5f64..1.5)) {
        let f = appendix(a, b, k, r, 2.0);
        let plus = f.eval(&[r[0] + d[0], r[1] + d[1]]).unwrap();
        let minus = f.eval(&[r[0] - d[0], r[1] - d[1]]).unwrap();
        for i in 0..2 {
            prop_assert!((plus[i] + minus[i]).abs() <= 1e-12 * (1.0 + plus[i].abs()));
        }
    }

    #[test]
    fn gradient_fields_have_symmetric_jacobians(v in prop::array::uniform6(coeff()), x in -1.9f64..1.9, y in -1.9f64..1.9) {
        let f = random_parts_field(v, 0.0);
        let p = PriceVector::new(vec![x, y]).unwrap();
        prop_assert!(asymmetry_norm(&f, &p).unwrap() <= 1e-12);
    }

    #[test]
    fn central_differences_converge_quadratically((a, b, k) in two_well(), x in -1.5f64..1.5, y in -1.5f64..1.5) {
        let f = appendix(a, b, k, [0.0, 0.0], 2.0);
        let exact = f.jacobian(&[x, y], JacobianMode::Analytic).unwrap();
        let err = |h: f64| {
            let fd = f.finite_difference_jacobian(&[x, y], Some(h)).unwrap();
            (fd - exact.matrix()).abs().max()
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        // the cubic term is the only source of truncation error, which scales as h²
        prop_assume!(e1 > 1e-9);
        prop_assert!(e1 / e2 > 3.5 && e1 / e2 < 4.5, "ratio {}", e1 / e2);
    }

    #[test]
    fn critical_points_are_zeros_and_distinct((a, b, k) in two_well()) {
        let f = appendix(a, b, k, [0.0, 0.0], 2.5);
        let found = find_critical_points(&f, &CriticalSearchSettings::for_box(f.domain().clone())).unwrap();
        for c in &found.points {
            prop_assert!(c.residual <= 1e-10);
            let r = f.eval(c.location.as_slice()).unwrap();
            prop_assert!(r.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-10);
        }
        for i in 0..found.points.len() {
            for j in 0..i {
                prop_assert!(found.points[i].location.distance(found.points[j].location.as_slice()) >= DEDUP_DISTANCE);
            }
        }
        // the set maps to itself under reflection through the reference point
        for c in &found.points {
            let mirror: Vec<f64> = c.location.as_slice().iter().map(|v| -v).collect();
            prop_assert!(found.points.iter().any(|o| o.location.distance(&mirror) <= 1e-8));
        }
    }

    #[test]
    fn deterministic_paths_satisfy_positivity((a, b, k) in two_well(), p0 in prop::array::uniform2(-1.5f64..1.5)) {
        let f = appendix(a, b, k, [0.0, 0.0], 3.0);
        let traj = integrate_deterministic(&f, &PriceVector::from(p0), 2.0, 1e-3).unwrap();
        let d = analytic_decomposition(&f).unwrap();
        let e = energy_identity_check(&traj, &d).unwrap();
        prop_assert!(e.positivity_margin() >= -1e-4);
        prop_assert!(e.residual.abs() <= 1e-4);
    }

    #[test]
    fn gradient_flow_descends(v0 in 0.5f64..1.5, v1 in 0.5f64..1.5, v3 in 0.0f64..0.5, p0 in prop::array::uniform2(-1.2f64..1.2)) {
        // convex enough to stay in the box: V = v0 x² + v1 y² + v3 x⁴
        let f = random_parts_field([v0, v1, 0.0, v3, 0.0, 0.0], 0.0);
        let traj = integrate_deterministic(&f, &PriceVector::from(p0), 3.0, 1e-2).unwrap();
        let mut prev = f.potential(traj.state(0)).unwrap();
        for i in 1..traj.len() {
            let v = f.potential(traj.state(i)).unwrap();
            prop_assert!(v <= prev + 1e-12, "V rose from {prev} to {v} at step {i}");
            prev = v;
        }
    }

    #[test]
    fn line_integral_is_odd_under_reversal(c in prop::array::uniform8(-0.3f64..0.3), k in -1.0f64..1.0) {
        let f = appendix(1.0, 1.0, k, [0.0, 0.0], 2.0);
        let p = smooth_path(&f, &c, 1.0);
        let fwd = line_integral_solenoidal(&p, &f).unwrap();
        let rev = line_integral_solenoidal(&p.reversed(), &f).unwrap();
        prop_assert!((fwd + rev).abs() <= 1e-14 * (1.0 + fwd.abs()));
    }

    #[test]
    fn potential_drop_depends_only_on_endpoints(c in prop::array::uniform8(-0.3f64..0.3), bend in -0.5f64..0.5) {
        let f = appendix(1.0, 1.0, 0.5, [0.0, 0.0], 2.0);
        let p = smooth_path(&f, &c, 1.0);
        let mut c2 = c;
        c2[2] += bend;
        c2[6] -= bend;
        let q = smooth_path(&f, &c2, 1.0);
        let mp = positivity_margin(&p, &f).unwrap();
        let mq = positivity_margin(&q, &f).unwrap();
        prop_assert!((mp.potential_drop - mq.potential_drop).abs() <= 1e-12);
    }

    #[test]
    fn action_is_non_negative(c in prop::array::uniform8(-0.3f64..0.3), eps in 0.05f64..2.0, t in 0.5f64..10.0) {
        let f = appendix(1.0, 1.0, 0.5, [0.0, 0.0], 2.0);
        let p = smooth_path(&f, &c, t);
        for q in 1..=5 {
            let s = onsager_machlup_action_with(&p, &f, eps, ActionQuadrature::new(q).unwrap()).unwrap();
            prop_assert!(s.total >= 0.0);
        }
    }

    #[test]
    fn reversal_identity_holds(c in prop::array::uniform8(-0.3f64..0.3), eps in 0.05f64..2.0, t in 0.5f64..10.0, k in -1.0f64..1.0) {
        let f = appendix(1.0, 1.0, k, [0.0, 0.0], 2.0);
        let p = smooth_path(&f, &c, t);
        let r = reversal_identity(&p, &f, eps, ActionQuadrature::GAUSS5).unwrap();
        prop_assert!((r.lhs - r.rhs).abs() <= 1e-6 * r.lhs.abs().max(r.rhs.abs()).max(1e-12));
    }

    #[test]
    fn reversal_identity_for_polynomial_parts(v in prop::array::uniform6(coeff()), cc in coeff(), c in prop::array::uniform8(-0.3f64..0.3)) {
        let f = random_parts_field(v, cc);
        let p = smooth_path(&f, &c, 2.0);
        let r = reversal_identity(&p, &f, 0.3, ActionQuadrature::GAUSS5).unwrap();
        prop_assert!((r.lhs - r.rhs).abs() <= 1e-6 * r.lhs.abs().max(r.rhs.abs()).max(1e-12));
    }

    #[test]
    fn appendix_quadrature_matches_closed_form((a, b, k) in two_well()) {
        let rep = appendix_paths(&AppendixParams::new(a, b, k).unwrap()).unwrap();
        prop_assert!((rep.closed_form.path_a - rep.quadrature.path_a).abs() <= 1e-10);
        prop_assert!((rep.closed_form.path_b - rep.quadrature.path_b).abs() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn discrete_reconstruction_is_exact(v in prop::array::uniform6(coeff()), c in coeff()) {
        let f = random_parts_field(v, c);
        let grid = GridSpec::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![33, 33]).unwrap();
        let r = decompose_on_grid(&f, &grid).unwrap();
        prop_assert!(r.reconstruction_residual <= 1e-12);
    }

    #[test]
    fn sde_output_is_independent_of_workers(seed in any::<u64>()) {
        let f = appendix(1.0, 1.0, 0.5, [0.0, 0.0], 3.0);
        let noise = NoiseSpec::new(vec![vec![0.2, 0.05], vec![0.05, 0.1]], seed).unwrap();
        let p0 = PriceVector::from([0.9, -0.4]);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
                .install(|| sample_ensemble(&f, &noise, &p0, 1.0, 1e-3, 12, 50).unwrap())
        };
        prop_assert_eq!(run(1), run(3));
    }
}

#[test]
fn adding_a_constant_to_v_changes_nothing_downstream() {
    let base = poly2(&[(0.5, 2, 0), (0.25, 0, 4), (0.1, 1, 1)]);
    let shifted = base.plus(&poly2(&[(3.7, 0, 0)]));
    let sol = vec![poly2(&[(0.4, 0, 1)]), poly2(&[(-0.4, 1, 0)])];
    let build = |v: Polynomial| {
        let m = PolynomialModel::from_parts(2, Some(v), Some(sol.clone())).unwrap();
        FieldSpec::new(Arc::new(m), DomainBox::symmetric(2, 2.0).unwrap()).unwrap()
    };
    let (f0, f1) = (build(base), build(shifted));
    let grid = GridSpec::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![33, 33]).unwrap();
    let (r0, r1) = (decompose_on_grid(&f0, &grid).unwrap(), decompose_on_grid(&f1, &grid).unwrap());
    assert_eq!(r0.solenoidal, r1.solenoidal);
    assert_eq!(r0.potential, r1.potential);
    let path = PiecewisePath::geometric(vec![vec![-1.0, 0.5], vec![0.3, -0.2], vec![1.2, 1.0]]).unwrap();
    let (m0, m1) = (positivity_margin(&path, &f0).unwrap(), positivity_margin(&path, &f1).unwrap());
    assert!((m0.potential_drop - m1.potential_drop).abs() <= 1e-14);
    assert_eq!(m0.solenoidal_integral, m1.solenoidal_integral);
}

#[test]
fn appendix_indices_over_a_parameter_lattice() {
    for a in [0.6, 1.0, 1.5] {
        for b in [0.5, 1.0, 2.0] {
            for frac in [0.0, 0.4, 0.8] {
                let k = frac * a * f64::sqrt(b);
                let f = appendix(a, b, k, [0.0, 0.0], 2.5 * a);
                let found = find_critical_points(&f, &CriticalSearchSettings::for_box(f.domain().clone())).unwrap();
                let mut idx: Vec<usize> = found.points.iter().map(|c| c.index).collect();
                idx.sort();
                assert_eq!(idx, vec![0, 0, 1], "a={a} b={b} k={k}");
                let saddle = found.points.iter().find(|c| c.stability == Stability::Saddle).unwrap();
                assert!(saddle.location.distance(&[0.0, 0.0]) <= 1e-10);
            }
        }
    }
}

#[test]
fn gradient_field_solenoidal_part_vanishes_under_refinement() {
    let f = appendix(1.0, 1.0, 0.0, [0.0, 0.0], 2.0);
    for n in [33, 65] {
        let grid = GridSpec::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![n, n]).unwrap();
        let r = decompose_on_grid(&f, &grid).unwrap();
        let interior_max = (0..grid.node_count())
            .filter(|i| grid.is_inside_margin(*i, 0.4))
            .flat_map(|i| r.solenoidal[2 * i..2 * i + 2].to_vec())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(interior_max <= 1e-8, "n={n}: {interior_max}");
    }
}

#[test]
fn potential_error_halves_under_refinement_for_gradient_fields() {
    use tatonnement::hodge::compare_with_analytic;
    let f = appendix(1.0, 1.0, 0.0, [0.0, 0.0], 2.0);
    let err = |n: usize| {
        let grid = GridSpec::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![n, n]).unwrap();
        compare_with_analytic(&decompose_on_grid(&f, &grid).unwrap(), &f, 0.4).unwrap().potential_max_error
    };
    let (coarse, fine) = (err(65), err(129));
    assert!(coarse / fine >= 2.0, "{coarse} -> {fine}");
}
