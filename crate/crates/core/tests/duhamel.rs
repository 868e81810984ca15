use hypoheat::duhamel::{
    build_perturbation, conv1, conv2, expansion_coefficient, grad_log_kernel, remainder_integrand, remainder_probe,
    second_order_coefficient, second_order_coefficient_numeric, DuhamelError, MonomialOp, TaylorData,
};
use hypoheat::gaussian::kernel_eval;
use hypoheat::{LQOperator, Var, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn m(a: u32, b: u32, v: Var) -> MonomialOp {
    MonomialOp::new(1.0, a, b, v).unwrap()
}

/// The nine identities, normalized by `q0(1, 0, 0)`.
fn table(s: f64) -> Vec<(Vec<MonomialOp>, f64)> {
    let d1 = m(0, 0, Var::X1);
    let q = m(2, 0, Var::X2);
    vec![
        (vec![d1], 0.0),
        (vec![q], 0.0),
        (vec![m(1, 0, Var::X1)], -0.5),
        (vec![q, d1], 3.0 / (14.0 * s)),
        (vec![d1, q], -3.0 / (14.0 * s)),
        (vec![d1, d1], -0.5),
        (vec![m(0, 1, Var::X2)], -0.5),
        (vec![m(3, 0, Var::X2)], -3.0 / (14.0 * s)),
        (vec![q, q], 9.0 / (70.0 * s * s)),
    ]
}

#[test]
fn convolution_table() {
    for &s in &[1.0, -1.0, 2.0, 0.5] {
        let op = LQOperator::kolmogorov(s).unwrap();
        let leading = op.diagonal_at_one().unwrap();
        for (ops, want) in table(s) {
            let c = match ops.as_slice() {
                [a] => conv1(&op, a).unwrap(),
                [a, b] => conv2(&op, a, b).unwrap(),
                _ => unreachable!(),
            };
            assert!((c.normalized - want).abs() < 1e-6, "S={s} {ops:?}: {} vs {want}", c.normalized);
            assert!((c.raw - want * leading).abs() < 1e-6 * leading);
        }
    }
}

#[test]
fn odd_integrands_vanish() {
    let op = LQOperator::kolmogorov(1.3).unwrap();
    // z-polynomial of odd total degree once the kernel-gradient factor is included
    for d in [m(0, 0, Var::X2), m(1, 1, Var::X2), m(2, 0, Var::X1), m(0, 2, Var::X2), m(1, 1, Var::X1)] {
        let c = conv1(&op, &d).unwrap();
        assert!(c.normalized.abs() < 1e-9, "{d}: {}", c.normalized);
    }
}

#[test]
fn mixed_pair_is_antisymmetric() {
    for &s in &[1.0, -0.7, 3.0] {
        let op = LQOperator::kolmogorov(s).unwrap();
        let (d1, q) = (m(0, 0, Var::X1), m(2, 0, Var::X2));
        let a = conv2(&op, &q, &d1).unwrap().normalized;
        let b = conv2(&op, &d1, &q).unwrap().normalized;
        assert!((a + b).abs() < 1e-7);
    }
}

#[test]
fn coefficient_scales_linearly() {
    let op = LQOperator::kolmogorov(1.0).unwrap();
    let unit = conv1(&op, &m(1, 0, Var::X1)).unwrap().normalized;
    let scaled = conv1(&op, &MonomialOp::new(-2.5, 1, 0, Var::X1).unwrap()).unwrap().normalized;
    assert!((scaled + 2.5 * unit).abs() < 1e-12);
    assert!(matches!(MonomialOp::new(1.0, 3, 1, Var::X2), Err(DuhamelError::DegreeTooHigh { .. })));
}

#[test]
fn gradient_of_log_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let s = rng.random_range(0.5..2.0);
        let op = LQOperator::kolmogorov(s).unwrap();
        let t = rng.random_range(0.3..1.5);
        let x = Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let y = Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let g = grad_log_kernel(&op, t, x, y).unwrap();
        let q = kernel_eval(&op, t, x, y).unwrap();
        let h = 1e-6;
        for (i, e) in [Vec2::new(h, 0.0), Vec2::new(0.0, h)].into_iter().enumerate() {
            let fd = (kernel_eval(&op, t, x + e, y).unwrap() - kernel_eval(&op, t, x - e, y).unwrap()) / (2.0 * h * q);
            assert!((fd - g[i]).abs() < 1e-5 * g[i].abs().max(1.0), "{fd} vs {}", g[i]);
        }
    }
    let op = LQOperator::kolmogorov(1.0).unwrap();
    let y = Vec2::new(0.4, -0.3);
    let x = op.exp(-0.8).mul_vec(&y);
    assert!(grad_log_kernel(&op, 0.8, x, y).unwrap().norm() < 1e-14);
    assert_eq!(grad_log_kernel(&op, 1.0, Vec2::ZERO, Vec2::ZERO).unwrap(), Vec2::ZERO);
}

#[test]
fn perturbation_examples() {
    let k = build_perturbation(&TaylorData::kolmogorov(1.7)).unwrap();
    assert_eq!(k.x_terms.len(), 3);
    assert_eq!(k.y_terms.len(), 4);
    assert!(k.x_terms.iter().chain(&k.y_terms).all(|d| d.coeff == 0.0));

    let quad = TaylorData {
        s: 1.0,
        d11_alpha2_0: 1.0,
        ..TaylorData::default()
    };
    let p = build_perturbation(&quad).unwrap();
    let nonzero = |v: &[MonomialOp]| v.iter().filter(|d| d.coeff != 0.0).copied().collect::<Vec<_>>();
    assert_eq!(
        nonzero(&p.x_terms),
        vec![MonomialOp::new(0.5, 2, 0, Var::X2).unwrap(), MonomialOp::new(-0.5, 0, 0, Var::X1).unwrap()]
    );
    assert_eq!(nonzero(&p.y_terms), vec![MonomialOp::new(0.5, 1, 0, Var::X1).unwrap()]);

    let drift = TaylorData {
        alpha1_0: 0.8,
        ..TaylorData::kolmogorov(1.0)
    };
    let p = build_perturbation(&drift).unwrap();
    assert_eq!(nonzero(&p.x_terms), vec![MonomialOp::new(0.8, 0, 0, Var::X1).unwrap()]);
    assert!(nonzero(&p.y_terms).is_empty());
    assert!(matches!(build_perturbation(&TaylorData::default()), Err(DuhamelError::DegenerateS)));
}

#[test]
fn closed_form_examples() {
    assert_eq!(second_order_coefficient(&TaylorData::kolmogorov(2.0)).unwrap(), 0.0);
    let quad = |d11: f64| TaylorData {
        s: 1.0,
        d11_alpha2_0: d11,
        ..TaylorData::default()
    };
    assert!((second_order_coefficient(&quad(1.0)).unwrap() + 12.0 / 35.0).abs() < 1e-15);
    assert!((second_order_coefficient(&quad(2.0)).unwrap() + 48.0 / 35.0).abs() < 1e-14);
    let e = expansion_coefficient(&TaylorData::kolmogorov(1.0)).unwrap();
    assert!((e.leading - 12f64.sqrt() / (2.0 * std::f64::consts::PI)).abs() < 1e-15);
}

fn random_taylor(rng: &mut ChaCha8Rng) -> TaylorData {
    let s = rng.random_range(0.2..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    TaylorData {
        alpha1_0: rng.random_range(-1.0..1.0),
        d1_alpha1_0: rng.random_range(-1.0..1.0),
        d2_alpha2_0: rng.random_range(-1.0..1.0),
        s,
        d11_alpha2_0: rng.random_range(-1.0..1.0),
        d111_alpha2_0: rng.random_range(-1.0..1.0),
    }
}

#[test]
fn quadrature_assembly_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut cases = vec![
        TaylorData::kolmogorov(1.0),
        TaylorData {
            s: 1.0,
            d11_alpha2_0: 1.0,
            ..TaylorData::default()
        },
    ];
    cases.extend((0..10).map(|_| random_taylor(&mut rng)));
    for t in cases {
        let op = LQOperator::kolmogorov(t.s).unwrap();
        let numeric = second_order_coefficient_numeric(&op, &build_perturbation(&t).unwrap()).unwrap();
        let closed = second_order_coefficient(&t).unwrap();
        assert!((numeric.value - closed).abs() < 1e-6, "{t:?}: {} vs {closed}", numeric.value);
        assert!(numeric.first_order.abs() < 1e-8);
    }
}

#[test]
fn remainder_is_bounded() {
    let op = LQOperator::kolmogorov(1.0).unwrap();
    let d = m(0, 0, Var::X1);
    let probe = remainder_probe(&op, [&d, &d, &d], 200).unwrap();
    assert!(probe.max.is_finite() && probe.max > 0.0);
    assert!(probe.boundary_max <= 10.0 * probe.interior_max);
    let at_origin = remainder_integrand(&op, [&d, &d, &d], 0.0, Vec2::ZERO).unwrap();
    let gam = op.gamma(1.0);
    assert!((at_origin - 1.0 / (2.0 * std::f64::consts::PI * gam.det().sqrt())).abs() < 1e-14);
}
