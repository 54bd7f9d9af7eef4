use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zaklab::bloch_cell::{build_h_theta, hermitian_eigen, GaussianTerm};
use zaklab::covariance::{
    evolve_covariance, evolve_table, evolve_via_coeffs, gibbs, initial_covariance_table, limit_covariance,
    quadratic_form, trace_diagnostic, CovarianceMatrix, InitialMeasureSpec, LatticeWeight, MaKernels,
    MovingAverage, NoiseLaw,
};
use zaklab::dispersion::band_structure;
use zaklab::grid::ThetaGrid;
use zaklab::propagator::test_function::Slot;
use zaklab::propagator::{propagator_matrix, zak_forward, zak_inverse, BlochGrid, LatticeState, TestFunction};
use zaklab::{CouplingSpec, ModelParams, SpectralData, C64};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

prop_compose! {
    fn coupled_model(max_k: usize)(
        dim in 1usize..=2,
        components in 1usize..=2,
        cutoff in 1usize..=max_k,
        m0 in 0.5f64..2.0,
        nu0 in 0.5f64..2.0,
        amp in -0.2f64..0.2,
        width in 0.1f64..0.5,
        center in -0.5f64..0.5,
    ) -> ModelParams {
        let cutoff = if dim == 2 { cutoff.min(1) } else { cutoff };
        ModelParams {
            dim,
            components,
            m0,
            nu0,
            cutoff,
            coupling: CouplingSpec::sum_of_gaussians(vec![GaussianTerm {
                amplitude: (0..components).map(|a| amp / (a + 1) as f64).collect(),
                width,
                center: vec![center; dim],
            }]),
            cells: 4,
        }
    }
}

fn theta_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-std::f64::consts::PI..std::f64::consts::PI, dim)
}

fn random_psd(m: usize, theta: &[f64], seed: u64) -> CovarianceMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(2 * m, 2 * m, |_, _| {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    CovarianceMatrix::new(theta.to_vec(), &a * a.adjoint()).unwrap()
}

fn random_state(model: &ModelParams, seed: u64) -> LatticeState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = LatticeState::zeros(model);
    for x in s.psi.iter_mut().chain(&mut s.u).chain(&mut s.pi).chain(&mut s.v) {
        *x = rng.random_range(-1.0..1.0);
    }
    s
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn cell_operator_is_hermitian_with_accurate_eigenpairs(
        (model, theta) in coupled_model(3).prop_flat_map(|m| { let d = m.dim; (Just(m), theta_strategy(d)) })
    ) {
        let h = build_h_theta(&model, &theta);
        prop_assert_eq!(max_abs(&(&h - h.adjoint())), 0.0);
        let (vals, vecs) = hermitian_eigen(&h);
        let residual = max_abs(&(&h * &vecs - &vecs * DMatrix::from_diagonal(
            &nalgebra::DVector::from_iterator(vals.len(), vals.iter().map(|&v| C64::new(v, 0.0))),
        )));
        prop_assert!(residual <= 1e-10 * max_abs(&h).max(1.0), "residual {}", residual);
    }

    #[test]
    fn decoupled_eigenvalues_have_closed_forms(
        dim in 1usize..=2,
        cutoff in 1usize..=3,
        m0 in 0.3f64..3.0,
        nu0 in 0.3f64..3.0,
        seed in any::<u64>(),
    ) {
        let model = ModelParams {
            dim, components: 1, m0, nu0, cutoff: if dim == 2 { 1 } else { cutoff },
            coupling: CouplingSpec::zero(), cells: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let spec = SpectralData::at(&model, &theta).unwrap();
        let mut exact: Vec<f64> = (0..model.field_dim())
            .map(|i| {
                let k = model.mode(i);
                k.iter().zip(&theta).map(|(&m, t)| (std::f64::consts::TAU * m as f64 + t).powi(2)).sum::<f64>()
                    + m0 * m0
            })
            .chain(std::iter::once(
                theta.iter().map(|t| 2.0 * (1.0 - t.cos())).sum::<f64>() + nu0 * nu0,
            ))
            .map(f64::sqrt)
            .collect();
        exact.sort_by(f64::total_cmp);
        for (w, e) in spec.omegas.iter().zip(&exact) {
            prop_assert!(((w - e) / e).abs() < 1e-12, "{} vs {}", w, e);
        }
    }

    #[test]
    fn matrix_functions_multiply(
        (model, theta) in coupled_model(3).prop_flat_map(|m| { let d = m.dim; (Just(m), theta_strategy(d)) })
    ) {
        let spec = SpectralData::at(&model, &theta).unwrap();
        let f = spec.matrix_function(|w| w.cos()).unwrap();
        let g = spec.matrix_function(|w| 1.0 / w).unwrap();
        let fg = spec.matrix_function(|w| w.cos() / w).unwrap();
        prop_assert!(max_abs(&(&f * &g - fg)) < 1e-10);
    }

    #[test]
    fn even_coupling_gives_even_bands(
        amp in -0.2f64..0.2,
        width in 0.1f64..0.5,
        theta in 0.01f64..3.1,
    ) {
        let model = ModelParams {
            dim: 1, components: 1, m0: 1.0, nu0: 1.0, cutoff: 3,
            coupling: CouplingSpec::gaussian(vec![amp], width, vec![0.0]), cells: 4,
        };
        let a = SpectralData::at(&model, &[theta]).unwrap();
        let b = SpectralData::at(&model, &[std::f64::consts::TAU - theta]).unwrap();
        for (x, y) in a.omegas.iter().zip(&b.omegas) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn propagator_preserves_energy_form_and_group_law(
        (model, theta) in coupled_model(3).prop_flat_map(|m| { let d = m.dim; (Just(m), theta_strategy(d)) }),
        t in -20.0f64..20.0,
        s in -20.0f64..20.0,
    ) {
        let spec = SpectralData::at(&model, &theta).unwrap();
        let m = spec.dim();
        let mut e = DMatrix::<C64>::identity(2 * m, 2 * m);
        e.view_mut((0, 0), (m, m)).copy_from(&spec.h);
        let g = propagator_matrix(&spec, t);
        let scale = max_abs(&e);
        prop_assert!(max_abs(&(g.adjoint() * &e * &g - &e)) < 1e-10 * scale);
        let gs = propagator_matrix(&spec, s);
        let gts = propagator_matrix(&spec, t + s);
        prop_assert!(max_abs(&(&g * &gs - gts)) < 1e-10 * scale);
        let inv = propagator_matrix(&spec, -t);
        prop_assert!(max_abs(&(inv * &g - DMatrix::<C64>::identity(2 * m, 2 * m))) < 1e-10 * scale);
    }

    #[test]
    fn covariance_evolution_keeps_trace_and_positivity(
        (model, theta) in coupled_model(3).prop_flat_map(|m| { let d = m.dim; (Just(m), theta_strategy(d)) }),
        t in -50.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let spec = SpectralData::at(&model, &theta).unwrap();
        let q0 = random_psd(spec.dim(), &theta, seed);
        let qt = evolve_covariance(&q0, &spec, t);
        let tr0 = trace_diagnostic(&q0, &spec);
        prop_assert!((trace_diagnostic(&qt, &spec) - tr0).abs() <= 1e-10 * (1.0 + tr0));
        prop_assert!(qt.min_eigenvalue() >= -1e-10 * qt.norm());
        let via = evolve_via_coeffs(&q0, &spec, t);
        prop_assert!(max_abs(&(&via.q - &qt.q)) < 1e-9 * qt.norm().max(1.0));
        let lim = limit_covariance(&q0, &spec).unwrap();
        prop_assert!(lim.min_eigenvalue() >= -1e-10 * lim.norm());
    }

    #[test]
    fn gibbs_is_a_fixed_point(
        (model, theta) in coupled_model(3).prop_flat_map(|m| { let d = m.dim; (Just(m), theta_strategy(d)) }),
        temperature in 0.1f64..10.0,
        t in -50.0f64..50.0,
    ) {
        let spec = SpectralData::at(&model, &theta).unwrap();
        let q = gibbs(temperature, &spec).unwrap();
        let scale = q.norm();
        prop_assert!(max_abs(&(evolve_covariance(&q, &spec, t).q - &q.q)) < 1e-10 * scale);
        prop_assert!(max_abs(&(limit_covariance(&q, &spec).unwrap().q - &q.q)) < 1e-10 * scale);
    }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn zak_round_trip_and_parseval(
        model in coupled_model(2),
        half_cells in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let model = ModelParams { cells: 2 * half_cells + if model.dim == 1 { 4 } else { 0 }, ..model };
        let a = random_state(&model, seed);
        let b = random_state(&model, seed.wrapping_add(1));
        let za = zak_forward(&a, &model).unwrap();
        let zb = zak_forward(&b, &model).unwrap();
        prop_assert!(za.reality_defect() < 1e-12);
        prop_assert!(zak_inverse(&za, &model).unwrap().max_abs_diff(&a) < 1e-12);
        let physical = a.pairing(&b);
        prop_assert!((physical - za.pairing(&zb)).abs() < 1e-10 * (1.0 + physical.abs()));
    }

    #[test]
    fn evolution_is_dual_and_reversible(
        model in coupled_model(2),
        t in 0.0f64..30.0,
        seed in any::<u64>(),
    ) {
        let model = ModelParams { cells: 6, ..model };
        let bloch = BlochGrid::new(&model).unwrap();
        let y = zak_forward(&random_state(&model, seed), &model).unwrap();
        let z = zak_forward(&random_state(&model, seed ^ 0x5eed), &model).unwrap();
        let lhs = bloch.evolve(&y, t).unwrap().pairing(&z);
        let rhs = y.pairing(&bloch.adjoint_evolve(&z, t).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
        let back = bloch.evolve(&bloch.evolve(&y, t).unwrap(), -t).unwrap();
        let orig = zak_inverse(&y, &model).unwrap();
        prop_assert!(zak_inverse(&back, &model).unwrap().max_abs_diff(&orig) < 1e-10);
    }

    #[test]
    fn quadratic_form_is_nonnegative(
        w0 in -1.0f64..1.0,
        w1 in -1.0f64..1.0,
        v0 in -1.0f64..1.0,
        cell in 0i64..16,
        t in 0.0f64..20.0,
    ) {
        let model = ModelParams {
            dim: 1, components: 1, m0: 1.0, nu0: 1.0, cutoff: 2,
            coupling: CouplingSpec::gaussian(vec![0.1], 0.2, vec![0.0]), cells: 16,
        };
        let bloch = BlochGrid::new(&model).unwrap();
        let spec = InitialMeasureSpec::MovingAverage(MovingAverage {
            position: MaKernels {
                field: None,
                lattice: vec![
                    LatticeWeight { offset: vec![0], value: vec![w0] },
                    LatticeWeight { offset: vec![1], value: vec![w1] },
                ],
            },
            momentum: MaKernels { field: None, lattice: vec![LatticeWeight { offset: vec![0], value: vec![v0] }] },
            noise: NoiseLaw::Gaussian,
            shared_noise: false,
        });
        let q0 = initial_covariance_table(&spec, &bloch).unwrap();
        let z = TestFunction::lattice_delta(Slot::Position, vec![cell], vec![1.0]).with_band_filter(2);
        let q = quadratic_form(&evolve_table(&q0, &bloch, t).unwrap(), &z.to_zak(&bloch).unwrap()).unwrap();
        prop_assert!(q >= -1e-12, "Q = {}", q);
    }
}

#[test]
fn sorted_bands_are_lipschitz_on_a_coupled_grid() {
    let model = ModelParams {
        dim: 1,
        components: 1,
        m0: 1.0,
        nu0: 1.0,
        cutoff: 3,
        coupling: CouplingSpec::gaussian(vec![0.15], 0.25, vec![0.0]),
        cells: 4,
    };
    let grid = ThetaGrid::uniform(1, 128);
    let bands = band_structure(&model, &grid).unwrap();
    let gamma = zaklab::dispersion::max_group_speed(&bands).max_speed;
    let dtheta = grid.spacing().unwrap();
    for g in 0..bands.len() {
        let h = (g + 1) % bands.len();
        for l in 0..bands.band_count() {
            assert!((bands.omegas[g][l] - bands.omegas[h][l]).abs() <= 2.0 * gamma * dtheta + 1e-12);
        }
    }
}
