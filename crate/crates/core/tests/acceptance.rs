//! Acceptance run on the reference model. Prints one PASS/FAIL line per
//! criterion and exits nonzero if any fails or exceeds its time budget.

use std::f64::consts::{PI, TAU};
use std::path::Path;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zaklab::bloch_cell::{check_r2, check_r2_prime, spectral_decompose, SpectralData};
use zaklab::covariance::{
    evolve_covariance, evolve_via_coeffs, gibbs, limit_covariance, trace_diagnostic, CovarianceMatrix,
};
use zaklab::dispersion::{band_structure, critical_points};
use zaklab::grid::ThetaGrid;
use zaklab::harness::{run_experiment, validate_config, Summary};
use zaklab::propagator::test_function::Slot;
use zaklab::propagator::{
    propagator_matrix, zak_forward, zak_inverse, BlochGrid, FieldPacket, LatticeState, TestFunction,
};
use zaklab::{CouplingSpec, ModelParams, C64};

type Verdict = Result<String, String>;

fn reference() -> ModelParams {
    ModelParams {
        dim: 1,
        components: 1,
        m0: 1.0,
        nu0: 1.0,
        cutoff: 8,
        coupling: CouplingSpec::gaussian(vec![0.1], 0.2, vec![0.0]),
        cells: 4096,
    }
}

fn bloch() -> &'static BlochGrid {
    static GRID: OnceLock<BlochGrid> = OnceLock::new();
    GRID.get_or_init(|| BlochGrid::new(&reference()).expect("reference grid"))
}

fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn random_psd(m: usize, theta: &[f64], rng: &mut ChaCha8Rng) -> CovarianceMatrix {
    let a = DMatrix::from_fn(2 * m, 2 * m, |_, _| {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    CovarianceMatrix::new(theta.to_vec(), &a * a.adjoint()).unwrap()
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_config(name: &str) -> Result<Summary, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut cfg = validate_config(&text).map_err(|e| format!("{e:?}"))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    cfg.output_dir = dir.path().to_path_buf();
    run_experiment(&cfg).map_err(|e| e.to_string())
}

fn describe(summary: &Summary) -> String {
    summary
        .assertions
        .iter()
        .map(|a| format!("{} {:.3e} (limit {:.1e})", a.name, a.measured, a.threshold))
        .collect::<Vec<_>>()
        .join(", ")
}

fn summary_verdict(summary: Summary) -> Verdict {
    check(summary.passed, describe(&summary))
}

/// Decoupled bands against the lattice and free-field dispersion relations.
fn decoupled_exactness() -> Verdict {
    let model = ModelParams {
        coupling: CouplingSpec::zero(),
        ..reference()
    };
    let grid = ThetaGrid::uniform(1, 256);
    let bands = band_structure(&model, &grid).map_err(|e| e.to_string())?;
    let k = model.cutoff as i64;
    let mut worst = 0.0f64;
    for g in 0..grid.len() {
        let theta = grid.point(g)[0];
        let folded = theta - TAU * (theta / TAU).round();
        let mut exact: Vec<f64> = (-k..=k)
            .map(|m| ((TAU * m as f64 + folded).powi(2) + 1.0).sqrt())
            .collect();
        exact.push((1.0 + 2.0 * (1.0 - theta.cos())).sqrt());
        exact.sort_by(f64::total_cmp);
        for (w, e) in bands.omegas[g].iter().zip(&exact) {
            worst = worst.max(((w - e) / e).abs());
        }
    }
    check(worst < 1e-12, format!("max relative error {worst:.2e}"))
}

fn coupling_conditions() -> Verdict {
    let r2p = check_r2_prime(&reference());
    let strong = check_r2_prime(&ModelParams {
        coupling: CouplingSpec::gaussian(vec![10.0], 0.2, vec![0.0]),
        ..reference()
    });
    let r2 = check_r2(&reference(), &ThetaGrid::uniform(1, 256));
    let detail = format!(
        "integral {:.3e} < {:.3e}, A=10 rejected: {}, min eigenvalue {:.3e}",
        r2p.lhs, r2p.rhs, !strong.pass, r2.min_eigenvalue
    );
    check(r2p.pass && r2p.margin > 0.0 && !strong.pass && r2.min_eigenvalue > 0.0, detail)
}

fn hamiltonian_structure() -> Verdict {
    let model = reference();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let theta = [rng.random_range(-PI..PI)];
        let t = rng.random_range(-50.0..50.0);
        let s = rng.random_range(-50.0..50.0);
        let spec = SpectralData::at(&model, &theta).map_err(|e| e.to_string())?;
        let m = spec.dim();
        let mut e = DMatrix::<C64>::identity(2 * m, 2 * m);
        e.view_mut((0, 0), (m, m)).copy_from(&spec.h);
        let scale = max_abs(&e);
        let g = propagator_matrix(&spec, t);
        let gs = propagator_matrix(&spec, s);
        let id = DMatrix::<C64>::identity(2 * m, 2 * m);
        worst = worst
            .max(max_abs(&(g.adjoint() * &e * &g - &e)) / scale)
            .max(max_abs(&(&g * &gs - propagator_matrix(&spec, t + s))) / scale)
            .max(max_abs(&(propagator_matrix(&spec, -t) * &g - id)) / scale);
    }
    let mut worst_zak = 0.0f64;
    for _ in 0..100 {
        let a = random_state(&model, &mut rng);
        let b = random_state(&model, &mut rng);
        let za = zak_forward(&a, &model).map_err(|e| e.to_string())?;
        let zb = zak_forward(&b, &model).map_err(|e| e.to_string())?;
        let back = zak_inverse(&za, &model).map_err(|e| e.to_string())?;
        let physical = a.pairing(&b);
        worst_zak = worst_zak
            .max(back.max_abs_diff(&a) / a.max_abs())
            .max((physical - za.pairing(&zb)).abs() / physical.abs().max(1.0));
    }
    check(
        worst < 1e-10 && worst_zak < 1e-10,
        format!("propagator {worst:.2e}, transform {worst_zak:.2e}"),
    )
}

fn random_state(model: &ModelParams, rng: &mut ChaCha8Rng) -> LatticeState {
    let mut s = LatticeState::zeros(model);
    for x in s.psi.iter_mut().chain(&mut s.u).chain(&mut s.pi).chain(&mut s.v) {
        *x = rng.random_range(-1.0..1.0);
    }
    s
}

fn trace_invariance() -> Verdict {
    let bloch = bloch();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut worst_coeffs = 0.0f64;
    for _ in 0..50 {
        for k in 0..16 {
            let sd = &bloch.spectra[k * bloch.len() / 16 + 7];
            let q0 = random_psd(sd.dim(), &sd.theta, &mut rng);
            let tr0 = trace_diagnostic(&q0, sd);
            for t in [0.0, 0.1, 1.0, 10.0, 100.0] {
                let qt = evolve_covariance(&q0, sd, t);
                worst = worst.max(((trace_diagnostic(&qt, sd) - tr0) / tr0).abs());
                if k == 0 {
                    let via = evolve_via_coeffs(&q0, sd, t);
                    worst_coeffs = worst_coeffs.max(max_abs(&(&via.q - &qt.q)) / qt.norm());
                }
            }
        }
    }
    check(
        worst < 1e-10 && worst_coeffs < 1e-9,
        format!("trace {worst:.2e}, coefficient route {worst_coeffs:.2e}"),
    )
}

/// Taylor series for `exp(a)` after scaling into the unit ball.
fn expm(a: &DMatrix<C64>) -> DMatrix<C64> {
    let n = a.nrows();
    let squarings = (max_abs(a) * n as f64).log2().ceil().max(0.0) as i32 + 1;
    let b = a / C64::new(2f64.powi(squarings), 0.0);
    let mut term = DMatrix::<C64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..30 {
        term = &term * &b / C64::new(k as f64, 0.0);
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Time average of `G(t) q0 G(t)^*` over `[0, T]`, by trapezoid on a short
/// window followed by repeated doubling.
fn cesaro_average(h: &DMatrix<C64>, q0: &DMatrix<C64>, horizon: f64) -> DMatrix<C64> {
    let m = h.nrows();
    let mut a = DMatrix::<C64>::zeros(2 * m, 2 * m);
    a.view_mut((0, m), (m, m)).copy_from(&DMatrix::identity(m, m));
    a.view_mut((m, 0), (m, m)).copy_from(&(-h));
    let (window, steps) = (1.0, 4000);
    let dt = window / steps as f64;
    let step = expm(&(&a * C64::new(dt, 0.0)));
    let mut g = DMatrix::<C64>::identity(2 * m, 2 * m);
    let mut integral = q0 * C64::new(0.5 * dt, 0.0);
    for k in 1..=steps {
        g = &step * &g;
        let weight = if k == steps { 0.5 * dt } else { dt };
        integral += &g * q0 * g.adjoint() * C64::new(weight, 0.0);
    }
    let mut span = window;
    while span < horizon {
        integral = &integral + &g * &integral * g.adjoint();
        g = &g * &g;
        span *= 2.0;
    }
    integral / C64::new(span, 0.0)
}

/// Deviations are measured entrywise against the largest entry of the limit.
fn limit_oracle() -> Verdict {
    let h = DMatrix::from_element(1, 1, C64::new(4.0, 0.0));
    let single = spectral_decompose(&[0.0], h, None).map_err(|e| e.to_string())?;
    let q0 = CovarianceMatrix::new(
        vec![0.0],
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]).map(|x| C64::new(x, 0.0)),
    )
    .unwrap();
    let lim = limit_covariance(&q0, &single).map_err(|e| e.to_string())?;
    let expected = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]).map(|x| C64::new(x, 0.0));
    let worked = max_abs(&(&lim.q - expected));

    let bloch = bloch();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut used = 0;
    let mut j = 37;
    while used < 16 && j < bloch.len() {
        let sd = &bloch.spectra[j];
        j += bloch.len() / 17;
        let gap = sd.omegas.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if gap < 1e-3 {
            continue;
        }
        used += 1;
        let q0 = random_psd(sd.dim(), &sd.theta, &mut rng);
        let lim = limit_covariance(&q0, sd).map_err(|e| e.to_string())?;
        let scale = max_abs(&lim.q);
        let avg = cesaro_average(&sd.h, &q0.q, 1e4 / gap);
        worst = worst.max(max_abs(&(avg - &lim.q)) / scale);
    }
    check(
        worked < 1e-12 && used == 16 && worst < 1e-3,
        format!("single mode {worked:.1e}, time average vs limit {worst:.2e} at {used} points"),
    )
}

fn gibbs_invariance() -> Verdict {
    let bloch = bloch();
    let mut worst = 0.0f64;
    for temperature in [0.5, 1.0, 2.0] {
        for sd in bloch.spectra.iter().step_by(16) {
            let q = gibbs(temperature, sd).map_err(|e| e.to_string())?;
            let scale = q.norm();
            for t in [1.0, 10.0, 100.0] {
                worst = worst.max((evolve_covariance(&q, sd, t).q - &q.q).norm() / scale);
            }
            let lim = limit_covariance(&q, sd).map_err(|e| e.to_string())?;
            worst = worst.max((lim.q - &q.q).norm() / scale);
        }
    }
    check(worst < 1e-10, format!("max relative change {worst:.2e}"))
}

fn deterministic_convergence() -> Verdict {
    let summary = run_config("converge.toml")?;
    // The cutoff must vanish on every flagged critical point and at theta = 0.
    let z = TestFunction::lattice_delta(Slot::Position, vec![2048], vec![1.0])
        .with_band_filter(6)
        .with_cutoff(Default::default());
    let bloch = bloch();
    let zt = z.to_zak(bloch).map_err(|e| e.to_string())?;
    let bands = bloch.bands().map_err(|e| e.to_string())?;
    let mut flagged = critical_points(bands, 6, 1e-6).flagged();
    flagged.push(0);
    let leak = flagged
        .iter()
        .flat_map(|&j| zt.at(j).iter().map(|c| c.norm()))
        .fold(0.0, f64::max);
    let detail = format!("{}, weight at {} critical points {leak:.1e}", describe(&summary), flagged.len());
    check(summary.passed && leak == 0.0, detail)
}

fn dispersive_decay() -> Verdict {
    summary_verdict(run_config("decay.toml")?)
}

fn gaussianization() -> Verdict {
    summary_verdict(run_config("gaussianity.toml")?)
}

fn mixing() -> Verdict {
    summary_verdict(run_config("mixing.toml")?)
}

/// Fourth-order Runge-Kutta on the mode equations at a subset of grid points.
fn propagator_against_time_stepping() -> Verdict {
    let bloch = bloch();
    let z = TestFunction::packet(FieldPacket {
        slot: Slot::Position,
        amplitude: 1.0,
        center: vec![2048.3],
        width: 1.0,
        carrier: vec![],
    });
    let zf = z.to_zak(bloch).map_err(|e| e.to_string())?;
    let evolved = bloch.evolve(&zf, 1.0).map_err(|e| e.to_string())?;
    let scale = zf.max_abs();
    let dt = 1e-3;
    let mut worst = 0.0f64;
    for k in 0..64 {
        let j = k * bloch.len() / 64 + 5;
        let h = &bloch.spectra[j].h;
        let m = h.nrows();
        let deriv = |x: &[C64]| -> Vec<C64> {
            let psi = nalgebra::DVector::from_column_slice(&x[..m]);
            let force = -(h * psi);
            x[m..].iter().copied().chain(force.iter().copied()).collect()
        };
        let mut x = zf.at(j).to_vec();
        for _ in 0..1000 {
            let axpy = |a: &[C64], b: &[C64], c: f64| -> Vec<C64> {
                a.iter().zip(b).map(|(p, q)| p + q * c).collect()
            };
            let k1 = deriv(&x);
            let k2 = deriv(&axpy(&x, &k1, dt / 2.0));
            let k3 = deriv(&axpy(&x, &k2, dt / 2.0));
            let k4 = deriv(&axpy(&x, &k3, dt));
            for i in 0..x.len() {
                x[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0);
            }
        }
        for (a, b) in x.iter().zip(evolved.at(j)) {
            worst = worst.max((a - b).norm() / scale);
        }
    }
    check(worst < 1e-8, format!("max deviation from time stepping {worst:.2e}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, u64, fn() -> Verdict); 11] = [
        ("decoupled-exactness", 1, decoupled_exactness),
        ("coupling-conditions", 5, coupling_conditions),
        ("hamiltonian-structure", 30, hamiltonian_structure),
        ("trace-invariance", 30, trace_invariance),
        ("limit-covariance", 120, limit_oracle),
        ("gibbs-invariance", 10, gibbs_invariance),
        ("deterministic-convergence", 120, deterministic_convergence),
        ("dispersive-decay", 120, dispersive_decay),
        ("gaussianization", 600, gaussianization),
        ("mixing", 300, mixing),
        ("propagator-oracle", 60, propagator_against_time_stepping),
    ];
    let setup = Instant::now();
    bloch();
    println!("setup: reference grid in {:.1} s", setup.elapsed().as_secs_f64());
    let mut failures = 0;
    for (k, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = f();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= Duration::from_secs(*budget);
        let (ok, detail) = match verdict {
            Ok(d) => (in_budget, d),
            Err(d) => (false, d),
        };
        if !ok {
            failures += 1;
        }
        println!(
            "{} {:>2} {name}: {detail} [{:.1} s, budget {budget} s]",
            if ok { "PASS" } else { "FAIL" },
            k + 1,
            elapsed.as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
