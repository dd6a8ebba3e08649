use hyperdisc_core::mechanics::*;
use proptest::prelude::*;

/// Central-difference ∂W̄/∂F computed only from energy evaluations.
fn fd_energy_gradient(lib: &ModelLibrary, kappa: &[f64], f: &Mat3, h: f64) -> Mat3 {
    let energy = |m: Mat3| {
        let inv = invariants_of(&DeformationGradient::new(m).unwrap(), None).unwrap();
        sef_value(lib, kappa, &inv).unwrap().value
    };
    Mat3::from_fn(|i, j| {
        let mut p = *f;
        p[(i, j)] += h;
        let mut m = *f;
        m[(i, j)] -= h;
        (energy(p) - energy(m)) / (2.0 * h)
    })
}

fn rel_err(a: &Mat3, b: &Mat3) -> f64 {
    (a - b).abs().max() / b.abs().max().max(1e-12)
}

fn protocols() -> Vec<(Protocol, f64, f64)> {
    let mut v = vec![
        (Protocol::Uniaxial, 0.5, 4.0),
        (Protocol::Equibiaxial, 0.7, 2.5),
        (Protocol::PureShear, 0.6, 3.0),
    ];
    for (rf, rn) in [(1.0, 1.0), (1.0, 0.75), (0.75, 1.0), (1.0, 0.5), (0.5, 1.0)] {
        v.push((Protocol::Biaxial { ratio_f: rf, ratio_n: rn }, 1.0, 1.1));
    }
    for id in ["SS_fs", "SS_sf", "SS_fn", "SS_nf", "SS_sn", "SS_ns"] {
        v.push((Protocol::parse(id, None).unwrap(), 0.0, 0.5));
    }
    v
}

/// A protocol, a control in its range and a library that applies to it.
fn case() -> impl Strategy<Value = (Protocol, f64, ModelLibrary, Vec<f64>)> {
    let ps = protocols();
    (0..ps.len(), 0.0..1.0f64, prop::collection::vec(0.0..1.0f64, 30)).prop_map(move |(k, t, raw)| {
        let (p, lo, hi) = ps[k];
        let control = lo + t * (hi - lo);
        let (lib, kappa) = if matches!(p, Protocol::SimpleShear { .. } | Protocol::Biaxial { .. }) {
            let lib = ModelLibrary::anisotropic_cann();
            // Outer coefficients in [0, 1] kPa, inner parameters in [0, 10].
            let kappa = raw.iter().enumerate().map(|(i, r)| if i < 20 { *r } else { 10.0 * r }).collect();
            (lib, kappa)
        } else {
            (ModelLibrary::isotropic_default(), raw[..17].to_vec())
        };
        (p, control, lib, kappa)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn protocol_states_are_isochoric((p, control, _lib, _k) in case()) {
        let f = protocol_deformation(&p, control).unwrap();
        prop_assert!((f.det() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn analytic_energy_gradient_matches_finite_differences((p, control, lib, kappa) in case()) {
        let f = protocol_deformation(&p, control).unwrap();
        let analytic = energy_gradient(&lib, &kappa, &f, &Frame::default()).unwrap().value;
        let fd = fd_energy_gradient(&lib, &kappa, f.matrix(), 1e-6);
        prop_assert!(rel_err(&analytic, &fd) < 1e-5, "{} {}: {} vs {}", p, control, analytic, fd);
    }

    #[test]
    fn first_piola_and_cauchy_are_consistent((p, control, lib, kappa) in case()) {
        let f = protocol_deformation(&p, control).unwrap();
        let rule = p.pressure_rule();
        let state = stress_state(&lib, &kappa, &f, rule, &Frame::default()).unwrap().value;
        let pk = state.first_piola();
        let sigma = state.cauchy();
        let mapped = pk * f.matrix().transpose();
        prop_assert!((mapped - sigma).abs().max() < 1e-10 * sigma.abs().max().max(1.0));
        // The designated boundary component vanishes.
        let zeroed = match rule {
            PressureRule::FirstPiolaZero { i, j } => pk[(i, j)],
            PressureRule::CauchyNormalZero { i } => sigma[(i, i)],
        };
        prop_assert!(zeroed.abs() < 1e-10 * sigma.abs().max().max(1.0));
        prop_assert_eq!(stress_first_pk(&lib, &kappa, &f, rule).unwrap().value, pk);
        prop_assert_eq!(stress_cauchy(&lib, &kappa, &f, rule).unwrap().value, sigma);
    }

    #[test]
    fn shear_stresses_ignore_pressure((p, control, lib, kappa) in case(), dp in -50.0..50.0f64) {
        let f = protocol_deformation(&p, control).unwrap();
        let state = stress_state(&lib, &kappa, &f, p.pressure_rule(), &Frame::default()).unwrap().value;
        let a = state.cauchy();
        let b = state.with_pressure(state.pressure + dp).cauchy();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    prop_assert_eq!(a[(i, j)], b[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn energy_and_stress_are_linear_in_each_outer_coefficient(
        (p, control, lib, kappa) in case(), term in 0usize..17,
    ) {
        let f = protocol_deformation(&p, control).unwrap();
        let inv = invariants_of(&f, None).unwrap();
        let t = &lib.terms()[term];
        let mut single = vec![0.0; lib.n_kappa()];
        if let Some(w) = t.inner_index {
            single[w] = kappa[w];
        }
        single[t.outer_index] = kappa[t.outer_index];
        let mut doubled = single.clone();
        doubled[t.outer_index] *= 2.0;
        let w1 = sef_value(&lib, &single, &inv).unwrap().value;
        let w2 = sef_value(&lib, &doubled, &inv).unwrap().value;
        prop_assert!((w2 - 2.0 * w1).abs() <= 1e-12 * w1.abs().max(1e-300));
        let s1 = stress_cauchy(&lib, &single, &f, p.pressure_rule()).unwrap().value;
        let s2 = stress_cauchy(&lib, &doubled, &f, p.pressure_rule()).unwrap().value;
        prop_assert!((s2 - 2.0 * s1).abs().max() <= 1e-12 * s1.abs().max().max(1e-300));
    }

    #[test]
    fn energy_is_nonnegative((p, control, lib, kappa) in case()) {
        let f = protocol_deformation(&p, control).unwrap();
        let inv = invariants_of(&f, None).unwrap();
        prop_assert!(inv.i1 >= 3.0 - 1e-12 && inv.i2 >= 3.0 - 1e-12);
        prop_assert!(sef_value(&lib, &kappa, &inv).unwrap().value >= -1e-12);
    }

    #[test]
    fn compressed_fibres_carry_no_fourth_invariant_energy(l in 0.5..1.0f64, w in 0.0..20.0f64) {
        // Uniaxial compression along f shortens the fibre (I4f < 1).
        let lib = ModelLibrary::anisotropic_cann().select(&["c(2,11)", "c(2,12)"]).unwrap();
        let kappa = [1.3, 0.7, w];
        let f = protocol_deformation(&Protocol::Uniaxial, l).unwrap();
        let inv = invariants_of(&f, None).unwrap();
        prop_assert!(inv.i4(Axis::F) <= 1.0);
        prop_assert_eq!(sef_value(&lib, &kappa, &inv).unwrap().value, 0.0);
        let d = energy_gradient(&lib, &kappa, &f, &Frame::default()).unwrap().value;
        prop_assert_eq!(d, Mat3::zeros());
    }
}

/// The four-term generator written out symbol by symbol for simple shear fs.
#[test]
fn four_term_generator_energy_in_simple_shear() {
    let g: f64 = 0.3;
    // F = I + g e_f ⊗ e_s, C = [[1, g, 0], [g, 1 + g², 0], [0, 0, 1]].
    let i1 = 3.0 + g * g;
    let tr_c2 = 1.0 + 2.0 * g * g + (1.0 + g * g) * (1.0 + g * g) + 1.0;
    let i2 = 0.5 * (i1 * i1 - tr_c2);
    let i4f: f64 = 1.0;
    let i4n: f64 = 1.0;
    let i8fs = g;
    let expected = 5.162 * (i2 - 3.0).powi(2)
        + 0.081 * ((21.151 * (i4f.max(1.0) - 1.0).powi(2)).exp() - 1.0)
        + 0.315 * ((4.371 * (i4n.max(1.0) - 1.0).powi(2)).exp() - 1.0)
        + 0.486 * ((0.508 * i8fs * i8fs).exp() - 1.0);

    let lib = ModelLibrary::anisotropic_cann()
        .select(&["c(2,7)", "c(2,12)", "c(2,20)", "c(2,24)"])
        .unwrap();
    assert_eq!(
        lib.parameter_names(),
        ["c(2,7)", "c(2,12)", "c(2,20)", "c(2,24)", "w(1,12)", "w(1,20)", "w(1,24)"]
    );
    let kappa = [5.162, 0.081, 0.315, 0.486, 21.151, 4.371, 0.508];
    let f = protocol_deformation(&Protocol::parse("SS_fs", None).unwrap(), g).unwrap();
    let inv = invariants_of(&f, None).unwrap();
    let got = sef_value(&lib, &kappa, &inv).unwrap().value;
    assert!((got - expected).abs() < 1e-12 * expected, "{got} vs {expected}");
}

#[test]
fn mooney_rivlin_equibiaxial_against_finite_differences() {
    let lib = ModelLibrary::isotropic_default().select(&["c(0,1)", "c(1,0)"]).unwrap();
    let kappa = [0.1, 0.3];
    let f = protocol_deformation(&Protocol::Equibiaxial, 1.5).unwrap();
    let fd = fd_energy_gradient(&lib, &kappa, f.matrix(), 1e-6);
    let f_inv_t = f.inverse_transpose();
    let p = fd[(2, 2)] / f_inv_t[(2, 2)];
    let p11_fd = fd[(0, 0)] - p * f_inv_t[(0, 0)];
    let p11 = stress_first_pk(&lib, &kappa, &f, Protocol::Equibiaxial.pressure_rule()).unwrap().value[(0, 0)];
    assert!(((p11 - p11_fd) / p11_fd).abs() < 1e-5);
}
