use crate::bloch_cell::{check_r2, check_r2_prime, CouplingSpec, ModelParams};
use crate::covariance::{
    evolve_table, initial_covariance_table, limit_table, quadratic_form, trace_diagnostic, CovarianceMatrix,
    InitialMeasureSpec,
};
use crate::dispersion::{band_structure, check_e1_e2, max_group_speed, scan_coupling, write_bands_csv, ScanVerdict};
use crate::ensemble::{
    char_functional, estimate_quadratic_form, mixing_correlation, normality_stats, observe_series, EnsembleConfig,
};
use crate::grid::ThetaGrid;
use crate::propagator::{decay_profile, BlochGrid, TestFunction};

use super::config::{Experiment, ExperimentConfig};
use super::{Assertion, HarnessError, Report};

type Outcome = Result<(), HarnessError>;

pub(super) fn run(config: &ExperimentConfig, report: &mut Report) -> Outcome {
    match config.experiment {
        Experiment::Bands => bands(config, report),
        Experiment::Conditions => conditions(config, report),
        Experiment::CouplingScan => coupling_scan(config, report),
        Experiment::Converge => converge(config, report),
        Experiment::Decay => decay(config, report),
        Experiment::Gaussianity => gaussianity(config, report),
        Experiment::Mixing => mixing(config, report),
        Experiment::Invariance => invariance(config, report),
    }
}

fn sweep_grid(config: &ExperimentConfig) -> ThetaGrid {
    ThetaGrid::uniform(config.model.dim, config.grid_points)
}

fn test_function(config: &ExperimentConfig) -> &TestFunction {
    config.test_function.as_ref().expect("validated config has a test function")
}

fn initial(config: &ExperimentConfig) -> &InitialMeasureSpec {
    config.initial.as_ref().expect("validated config has an initial law")
}

/// Sorted decoupled frequencies: `n` lattice copies and every field mode.
fn decoupled_frequencies(model: &ModelParams, theta: &[f64]) -> Vec<f64> {
    let lattice = model.lattice_frequency_sq(theta).sqrt();
    let mut out: Vec<f64> = (0..model.field_dim())
        .map(|i| model.field_frequency_sq(theta, i).sqrt())
        .chain(std::iter::repeat_n(lattice, model.components))
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

fn bands(config: &ExperimentConfig, report: &mut Report) -> Outcome {
    let grid = sweep_grid(config);
    let bands = band_structure(&config.model, &grid)?;
    report.with_file("bands", |f| write_bands_csv(&bands, f))?;
    let min_omega = bands.omegas.iter().map(|row| row[0]).fold(f64::INFINITY, f64::min);
    report.assert(Assertion::above(
        "min_frequency",
        "every band frequency is positive",
        min_omega,
        0.0,
    ));
    report.observe("band_count", bands.band_count());
    report.observe("max_group_speed", max_group_speed(&bands).max_speed);
    if config.model.coupling.is_zero() {
        let worst = bands
            .omegas
            .iter()
            .enumerate()
            .flat_map(|(g, row)| {
                let exact = decoupled_frequencies(&config.model, grid.point(g));
                row.iter()
                    .zip(exact)
                    .map(|(w, e)| ((w - e) / e).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max);
        report.assert(Assertion::below(
            "decoupled_rel_error",
            "without coupling the bands equal the lattice and free-field closed forms",
            worst,
            config.thresholds.bands_rel,
        ));
    }
    Ok(())
}

fn conditions(config: &ExperimentConfig, report: &mut Report) -> Outcome {
    let t = &config.thresholds;
    let grid = sweep_grid(config);
    let r2p = check_r2_prime(&config.model);
    report.observe("r2_prime", r2p.clone());
    report.assert(Assertion::below(
        "coupling_integral",
        "squared periodised coupling integral stays below nu0^2 m0^2 / 2",
        r2p.lhs,
        r2p.rhs,
    ));
    let r2 = check_r2(&config.model, &grid);
    report.observe("r2", r2.clone());
    report.assert(Assertion::above(
        "min_eigenvalue",
        "the cell operator is positive definite on the grid",
        r2.min_eigenvalue,
        0.0,
    ));
    let bands = band_structure(&config.model, &grid)?.lowest(t.condition_bands);
    let e1 = check_e1_e2(&bands, t.e1_tol);
    let e2 = check_e1_e2(&bands, t.e2_tol);
    let rows: Vec<Vec<f64>> = e1
        .e1_fractions
        .iter()
        .enumerate()
        .map(|(l, &f)| vec![l as f64, f])
        .collect();
    report.table("hessian_zero_fraction", &["band", "fraction"], &rows)?;
    let worst_fraction = e1.e1_fractions.iter().copied().fold(0.0, f64::max);
    report.assert(Assertion::below(
        "hessian_zero_fraction",
        "no band has a vanishing Hessian determinant on a set of positive measure",
        worst_fraction,
        0.05,
    ));
    report.assert(Assertion::above(
        "min_pair_variance",
        "no sum or difference of two bands is constant",
        e2.min_pair_variance,
        t.e2_tol,
    ));
    Ok(())
}

fn coupling_scan(config: &ExperimentConfig, report: &mut Report) -> Outcome {
    let t = &config.thresholds;
    let grid = sweep_grid(config);
    let bases: Vec<CouplingSpec> = config
        .model
        .coupling
        .terms
        .iter()
        .map(|term| CouplingSpec::sum_of_gaussians(vec![term.clone()]))
        .collect();
    let rows = scan_coupling(&config.model, &bases, &config.scan_amplitudes, &grid, t.e1_tol, t.e2_tol)?;
    let mut header: Vec<String> = (0..bases.len()).map(|s| format!("amplitude{s}")).collect();
    header.extend(["evaluated", "e1_pass", "e2_pass", "max_e1_fraction", "min_pair_variance"].map(String::from));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let nan = f64::NAN;
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut v = r.amplitudes.clone();
            match &r.verdict {
                ScanVerdict::Evaluated {
                    e1_pass,
                    e2_pass,
                    max_e1_fraction,
                    min_pair_variance,
                } => v.extend([
                    1.0,
                    f64::from(u8::from(*e1_pass)),
                    f64::from(u8::from(*e2_pass)),
                    *max_e1_fraction,
                    *min_pair_variance,
                ]),
                ScanVerdict::Skipped { .. } => v.extend([0.0, nan, nan, nan, nan]),
            }
            v
        })
        .collect();
    report.table("scan", &header, &table)?;
    let evaluated = rows
        .iter()
        .filter(|r| matches!(r.verdict, ScanVerdict::Evaluated { .. }))
        .count();
    report.observe("rows", rows);
    report.assert(Assertion::above(
        "evaluated_rows",
        "at least one amplitude vector satisfies the coupling integral criterion",
        evaluated as f64,
        0.0,
    ));
    Ok(())
}

/// Largest value of `f` over times before and from `t_max / 4`.
fn envelope(times: &[f64], values: &[f64]) -> (f64, f64) {
    let t_max = times[times.len() - 1];
    let mut early = 0.0f64;
    let mut late = 0.0f64;
    for (&t, v) in times.iter().zip(values) {
        if t < t_max / 4.0 {
            early = early.max(v.abs());
        } else {
            late = late.max(v.abs());
        }
    }
    (early, late)
}

fn converge(config: &ExperimentConfig, report: &mut Report) -> Outcome {
    let t = &config.thresholds;
    let bloch = BlochGrid::new(&config.model)?;
    let z = test_function(config);
    let zt = z.to_zak(&bloch)?;
    let q0 = initial_covariance_table(initial(config), &bloch)?;
    let q_inf = quadratic_form(&limit_table(&q0, &bloch)?, &zt)?;
    let q_t: Vec<f64> = config
        .times
        .iter()
        .map(|&s| quadratic_form(&evolve_table(&q0, &bloch, s)?, &zt))
        .collect::<crate::Result<_>>()?;
    let rel: Vec<f64> = q_t.iter().map(|q| (q - q_inf) / q_inf).collect();
    let rows: Vec<Vec<f64>> = config
        .times
        .iter()
        .zip(&q_t)
        .zip(&rel)
        .map(|((&s, &q), &r)| vec![s, q, q_inf, r])
        .collect();
    report.table("quadratic_form", &["t", "q_t", "q_inf", "rel_deviation"], &rows)?;
    report.observe("q_inf", q_inf);
    let last = rel[rel.len() - 1].abs();
    report.assert(Assertion::below(
        "final_rel_deviation",
        "Q_t(Z,Z) approaches the time-averaged limit Q_inf(Z,Z)",
        last,
        t.converge_rel,
    ));
    let (early, late) = envelope(&config.times, &rel);
    report.assert(Assertion::below(
        "envelope_ratio",
        "the oscillation envelope of Q_t - Q_inf decays",
        late / early,
        t.envelope_ratio,
    ));
    if config.samples >= 100 {
        let t_last = config.times[config.times.len() - 1];
        let ens = EnsembleConfig::new(config.samples, config.seed, initial(config).clone());
        let est = estimate_quadratic_form(&ens, &bloch, t_last, z)?;
        let q_last = q_t[q_t.len() - 1];
        report.observe("monte_carlo", est);
        report.assert(Assertion::below(
            "monte_carlo_z",
            "the Monte-Carlo second moment agrees with the covariance table",
            (est.q_hat - q_last).abs() / est.stderr,
            t.variance_sigmas,
        ));
    }
    Ok(())
}

/// Least-squares slope of `log y` against `log x`.
fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn decay(config: &ExperimentConfig, report: &mut Report) -> Outcome {
    let t = &config.thresholds;
    let bloch = BlochGrid::new(&config.model)?;
    let profile = decay_profile(test_function(config), &bloch, &config.times, t.cone_factor)?;
    let rows: Vec<Vec<f64>> = profile
        .iter()
        .map(|r| vec![r.t, r.sup_all, r.sup_inside_cone, r.sup_outside_cone, r.radius])
        .collect();
    report.table("decay", &["t", "sup_all", "sup_inside", "sup_outside", "cone_radius"], &rows)?;
    report.observe("max_group_speed", max_group_speed(bloch.bands()?).max_speed);
    let window: Vec<(f64, f64)> = profile
        .iter()
        .filter(|r| r.t > 0.0 && r.t >= t.fit_window[0] && r.t <= t.fit_window[1])
        .map(|r| (r.t, r.sup_all))
        .collect();
    let slope = log_log_slope(&window);
    let expected = -(config.model.dim as f64) / 2.0;
    report.observe("fitted_exponent", slope);
    report.assert(Assertion::below(
        "exponent_deviation",
        "sup |W'(t) Z| decays like t^(-d/2)",
        (slope - expected).abs(),
        t.decay_exponent_tol,
    ));
    let row = profile.iter().find(|r| r.t == t.cone_time).expect("validated cone time");
    report.assert(Assertion::below(
        "outside_cone_ratio",
        "W'(t) Z is negligible outside the cone of the maximal group speed",
        row.sup_outside_cone / row.sup_all,
        t.cone_ratio,
    ));
    Ok(())
}

fn gaussianity(config: &ExperimentConfig, report: &mut Report) -> Outcome {
    let t = &config.thresholds;
    let bloch = BlochGrid::new(&config.model)?;
    let z = test_function(config);
    let zt = z.to_zak(&bloch)?;
    let spec = initial(config);
    let q0 = initial_covariance_table(spec, &bloch)?;
    let q_inf = quadratic_form(&limit_table(&q0, &bloch)?, &zt)?;
    let t_first = config.times[0];
    let q_first = quadratic_form(&evolve_table(&q0, &bloch, t_first)?, &zt)?;
    let ens = EnsembleConfig::new(config.samples, config.seed, spec.clone());
    let series = observe_series(&ens, &bloch, z, &config.times)?;

    let mut moments = Vec::new();
    let stats: Vec<_> = series.values.iter().map(|xs| normality_stats(xs, None)).collect();
    for ((&s, st), &exact) in config.times.iter().zip(&stats).zip(&series.exact_kurtosis) {
        moments.push(vec![
            s,
            st.mean,
            st.variance,
            st.skewness,
            st.excess_kurtosis,
            exact,
            st.ks_statistic,
            st.ks_critical,
        ]);
    }
    report.table(
        "moments",
        &["t", "mean", "variance", "skewness", "excess_kurtosis", "exact_kurtosis", "ks", "ks_critical"],
        &moments,
    )?;

    let s_grid: Vec<f64> = (0..config.s_points)
        .map(|k| k as f64 * config.s_step / q_inf.sqrt())
        .collect();
    let last = series.values.len() - 1;
    let first_rows = char_functional(&series.values[0], &s_grid, q_first);
    let last_rows = char_functional(&series.values[last], &s_grid, q_inf);
    let char_table: Vec<Vec<f64>> = [(t_first, &first_rows), (config.times[last], &last_rows)]
        .iter()
        .flat_map(|(s, rows)| {
            rows.iter()
                .map(move |r| vec![*s, r.s, r.re, r.im, r.reference, r.deviation, r.stderr])
        })
        .collect();
    report.table(
        "char_functional",
        &["t", "s", "re", "im", "reference", "deviation", "stderr"],
        &char_table,
    )?;
    let worst_z = |rows: &[crate::ensemble::CharRow]| {
        rows.iter()
            .filter(|r| r.stderr > 0.0)
            .map(|r| r.deviation / r.stderr)
            .fold(0.0, f64::max)
    };

    report.observe("q_inf", q_inf);
    report.observe("q_first", q_first);
    report.observe("exact_kurtosis", &series.exact_kurtosis);
    report.observe("ks_final", stats[last].ks_statistic);
    report.observe("ks_critical", stats[last].ks_critical);
    report.assert(Assertion::above(
        "initial_kurtosis",
        "the initial observable is visibly non-Gaussian",
        stats[0].excess_kurtosis.abs(),
        t.kurtosis_initial_min,
    ));
    report.assert(Assertion::above(
        "initial_char_z",
        "the initial characteristic function differs from the Gaussian one",
        worst_z(&first_rows),
        t.initial_char_sigmas,
    ));
    report.assert(Assertion::below(
        "final_kurtosis",
        "the evolved observable has near-Gaussian kurtosis",
        stats[last].excess_kurtosis.abs(),
        t.kurtosis_final_max,
    ));
    report.assert(Assertion::below(
        "final_char_z",
        "the evolved characteristic function matches exp(-s^2 Q_inf / 2)",
        worst_z(&last_rows),
        t.char_sigmas,
    ));
    Ok(())
}

fn mixing(config: &ExperimentConfig, report: &mut Report) -> Outcome {
    let t = &config.thresholds;
    let bloch = BlochGrid::new(&config.model)?;
    let z = test_function(config);
    let z1 = config.aux_test_function.as_ref().unwrap_or(z);
    let q0 = initial_covariance_table(initial(config), &bloch)?;
    let q_inf_table = limit_table(&q0, &bloch)?;
    let q_inf = quadratic_form(&q_inf_table, &z.to_zak(&bloch)?)?;
    let rows = mixing_correlation(&bloch, &q_inf_table, z, z1, &config.times, config.samples, config.seed)?;
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| vec![r.t, r.exact, r.monte_carlo, r.stderr, r.exact / q_inf])
        .collect();
    report.table("mixing", &["t", "exact", "monte_carlo", "stderr", "exact_over_q_inf"], &table)?;
    report.observe("q_inf", q_inf);
    let at = rows.iter().find(|r| r.t == t.mixing_time).expect("validated mixing time");
    report.assert(Assertion::below(
        "correlation_ratio",
        "the stationary correlation of W(t)Y and Y decays",
        at.exact.abs() / q_inf,
        t.mixing_ratio,
    ));
    let worst = rows
        .iter()
        .map(|r| {
            if r.stderr > 0.0 {
                (r.monte_carlo - r.exact).abs() / r.stderr
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    report.assert(Assertion::below(
        "monte_carlo_z",
        "the Monte-Carlo correlation tracks the exact one",
        worst,
        t.mixing_sigmas,
    ));
    Ok(())
}

fn rel_distance(a: &CovarianceMatrix, b: &CovarianceMatrix) -> f64 {
    (&a.q - &b.q).norm() / b.q.norm().max(f64::MIN_POSITIVE)
}

fn invariance(config: &ExperimentConfig, report: &mut Report) -> Outcome {
    let tol = config.thresholds.invariance_tol;
    let bloch = BlochGrid::new(&config.model)?;
    let spec = initial(config);
    let q0 = initial_covariance_table(spec, &bloch)?;
    let traces0: Vec<f64> = q0
        .iter()
        .zip(&bloch.spectra)
        .map(|(q, sd)| trace_diagnostic(q, sd))
        .collect();
    let mut rows = Vec::new();
    let mut worst_trace = 0.0f64;
    let mut worst_fixed = 0.0f64;
    for &s in &config.times {
        let qt = evolve_table(&q0, &bloch, s)?;
        let trace_dev = qt
            .iter()
            .zip(&bloch.spectra)
            .zip(&traces0)
            .map(|((q, sd), &t0)| ((trace_diagnostic(q, sd) - t0) / t0).abs())
            .fold(0.0, f64::max);
        let fixed_dev = qt.iter().zip(&q0).map(|(a, b)| rel_distance(a, b)).fold(0.0, f64::max);
        worst_trace = worst_trace.max(trace_dev);
        worst_fixed = worst_fixed.max(fixed_dev);
        rows.push(vec![s, trace_dev, fixed_dev]);
    }
    report.table("invariance", &["t", "trace_rel_deviation", "covariance_rel_change"], &rows)?;
    report.assert(Assertion::below(
        "trace_deviation",
        "tr(Omega q_t Omega) + tr(q_t^11) is constant in time",
        worst_trace,
        tol,
    ));
    if matches!(spec, InitialMeasureSpec::Gibbs { .. }) {
        let limit = limit_table(&q0, &bloch)?;
        let limit_dev = limit.iter().zip(&q0).map(|(a, b)| rel_distance(a, b)).fold(0.0, f64::max);
        report.assert(Assertion::below(
            "evolution_fixed_point",
            "the Gibbs covariance is invariant under the evolution",
            worst_fixed,
            tol,
        ));
        report.assert(Assertion::below(
            "limit_fixed_point",
            "the Gibbs covariance is its own time-averaged limit",
            limit_dev,
            tol,
        ));
    } else {
        report.observe("max_covariance_change", worst_fixed);
    }
    Ok(())
}
