//! Monte-Carlo ensembles of random initial data.
//!
//! Every sample `i` draws from its own ChaCha stream `(seed, i)`, so results
//! do not depend on the thread schedule. Observables `<Y(t), Z>` are computed
//! as `<Y_0, W'(t) Z>`: the test function is evolved once and each sample is
//! only paired with it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covariance::{
    bilinear_form, CovarianceMatrix, InitialMeasureSpec, MaKernels, MovingAverage, NoiseLaw,
};
use crate::dispersion::max_group_speed;
use crate::error::{Error, Result};
use crate::grid::BoxIndex;
use crate::propagator::decay::check_wraparound;
use crate::propagator::{zak_forward, zak_inverse, BlochGrid, LatticeState, TestFunction, ZakField};
use crate::C64;

/// Settings shared by all estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub samples: usize,
    pub seed: u64,
    pub spec: InitialMeasureSpec,
    /// Multiple of the standard error used for pass/fail decisions.
    pub sigmas: f64,
}

impl EnsembleConfig {
    pub fn new(samples: usize, seed: u64, spec: InitialMeasureSpec) -> Self {
        Self {
            samples,
            seed,
            spec,
            sigmas: 3.0,
        }
    }
}

/// Deterministic per-sample stream.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw(law: NoiseLaw, rng: &mut ChaCha8Rng) -> f64 {
    match law {
        NoiseLaw::Gaussian => rng.sample(StandardNormal),
        NoiseLaw::Rademacher => {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
        NoiseLaw::Uniform => rng.random_range(-(3f64.sqrt())..3f64.sqrt()),
    }
}

enum Kind {
    /// Hermitian square roots of the covariance at each grid point.
    Gaussian(Vec<nalgebra::DMatrix<C64>>),
    MovingAverage {
        ma: MovingAverage,
        position: Vec<(Vec<i64>, f64)>,
        momentum: Vec<(Vec<i64>, f64)>,
    },
}

/// Draws initial states for one crystal.
pub struct Sampler<'a> {
    bloch: &'a BlochGrid,
    kind: Kind,
}

impl<'a> Sampler<'a> {
    pub fn new(spec: &InitialMeasureSpec, bloch: &'a BlochGrid) -> Result<Self> {
        match spec {
            InitialMeasureSpec::MovingAverage(ma) => {
                spec.validate(&bloch.model)?;
                let samples = |k: &MaKernels| {
                    k.field
                        .as_ref()
                        .map(|f| MovingAverage::kernel_samples(f, &bloch.model))
                        .unwrap_or_default()
                };
                Ok(Self {
                    bloch,
                    kind: Kind::MovingAverage {
                        position: samples(&ma.position),
                        momentum: samples(&ma.momentum),
                        ma: ma.clone(),
                    },
                })
            }
            _ => {
                let table = crate::covariance::initial_covariance_table(spec, bloch)?;
                Self::gaussian(&table, bloch)
            }
        }
    }

    /// Centred Gaussian sampler with covariance table `q(theta_j)`.
    pub fn gaussian(table: &[CovarianceMatrix], bloch: &'a BlochGrid) -> Result<Self> {
        if table.len() != bloch.len() {
            return Err(Error::GridMismatch("covariance table does not match the crystal".into()));
        }
        let roots = table
            .par_iter()
            .map(|c| {
                c.check_psd()?;
                Ok(c.sqrt())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            bloch,
            kind: Kind::Gaussian(roots),
        })
    }

    /// Sample number `index` of the stream `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> Result<LatticeState> {
        let mut rng = sample_rng(seed, index);
        match &self.kind {
            Kind::Gaussian(roots) => self.sample_gaussian(roots, &mut rng),
            Kind::MovingAverage { ma, position, momentum } => {
                Ok(self.sample_moving_average(ma, position, momentum, &mut rng))
            }
        }
    }

    /// White noise with `q = 1` in mode space, coloured by `sqrt q(theta)` on
    /// one member of each `{theta, -theta}` pair and mirrored onto the other.
    fn sample_gaussian(&self, roots: &[nalgebra::DMatrix<C64>], rng: &mut ChaCha8Rng) -> Result<LatticeState> {
        let model = &self.bloch.model;
        let mut white = LatticeState::zeros(model);
        let field_sd = (model.field_dim() as f64).sqrt();
        for x in white.psi.iter_mut() {
            *x = field_sd * rng.sample::<f64, _>(StandardNormal);
        }
        for x in white.u.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        for x in white.pi.iter_mut() {
            *x = field_sd * rng.sample::<f64, _>(StandardNormal);
        }
        for x in white.v.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let noise = zak_forward(&white, model)?;
        let cells = BoxIndex::new(model.dim, model.cells);
        let mut out = noise.clone();
        out.par_chunks_mut().enumerate().for_each(|(j, slot)| {
            if j <= cells.negate(j) {
                let v = &roots[j] * nalgebra::DVectorView::from_slice(noise.at(j), slot.len());
                slot.copy_from_slice(v.as_slice());
            }
        });
        for j in 0..out.len() {
            let (jp, row) = out.partner_row(j);
            if jp == j || j > jp {
                continue;
            }
            for (i, &ip) in row.iter().enumerate() {
                let v = out.at(j)[i].conj();
                out.at_mut(jp)[ip] = v;
            }
        }
        zak_inverse(&out, model)
    }

    fn sample_moving_average(
        &self,
        ma: &MovingAverage,
        position: &[(Vec<i64>, f64)],
        momentum: &[(Vec<i64>, f64)],
        rng: &mut ChaCha8Rng,
    ) -> LatticeState {
        let model = &self.bloch.model;
        let sizes = self.noise_sizes(ma);
        let mut channels: Vec<Vec<f64>> = Vec::with_capacity(4);
        for (c, &len) in sizes.iter().enumerate() {
            if ma.shared_noise && c >= 2 {
                channels.push(channels[c - 2].clone());
            } else {
                channels.push((0..len).map(|_| draw(ma.noise, rng)).collect());
            }
        }
        let mut s = LatticeState::zeros(model);
        self.field_taps(position, &channels[0], |_, idx, w| s.psi[idx] += w);
        self.lattice_taps(&ma.position, &channels[1], |_, idx, w| s.u[idx] += w);
        self.field_taps(momentum, &channels[2], |_, idx, w| s.pi[idx] += w);
        self.lattice_taps(&ma.momentum, &channels[3], |_, idx, w| s.v[idx] += w);
        s
    }

    /// Noise lengths for the channels (position field, position lattice,
    /// momentum field, momentum lattice); empty channels are not drawn.
    fn noise_sizes(&self, ma: &MovingAverage) -> [usize; 4] {
        let model = &self.bloch.model;
        let nc = model.cell_count();
        let n = model.components;
        let field = |k: &MaKernels| if k.field.is_some() { nc } else { 0 };
        let lattice = |k: &MaKernels| if k.lattice.is_empty() { 0 } else { nc * n };
        let mut sizes = [
            field(&ma.position),
            lattice(&ma.position),
            field(&ma.momentum),
            lattice(&ma.momentum),
        ];
        if ma.shared_noise {
            sizes[0] = sizes[0].max(sizes[2]);
            sizes[1] = sizes[1].max(sizes[3]);
            sizes[2] = sizes[0];
            sizes[3] = sizes[1];
        }
        sizes
    }

    /// Visit `psi(k + p/P) += kappa(k + p/P - l) xi(l)` on the periodic crystal
    /// as `(l, flat field index, kappa xi)`.
    fn field_taps(&self, kernel: &[(Vec<i64>, f64)], noise: &[f64], mut f: impl FnMut(usize, usize, f64)) {
        if noise.is_empty() {
            return;
        }
        let model = &self.bloch.model;
        let p = model.samples_per_axis() as i64;
        let n = model.cells as i64;
        let cells = BoxIndex::new(model.dim, model.cells);
        let intra = BoxIndex::new(model.dim, model.samples_per_axis());
        // grid offset -> (cell shift per axis, intra-cell sample)
        let taps: Vec<(Vec<i64>, usize, f64)> = kernel
            .iter()
            .map(|(off, kv)| {
                let shift = off.iter().map(|o| o.div_euclid(p)).collect();
                let sub: Vec<usize> = off.iter().map(|o| o.rem_euclid(p) as usize).collect();
                (shift, intra.flatten(&sub), *kv)
            })
            .collect();
        let mut cell = vec![0usize; model.dim];
        for (l, &xi) in noise.iter().enumerate() {
            let base = cells.unflatten(l);
            for (shift, sub, kv) in &taps {
                for a in 0..model.dim {
                    cell[a] = (base[a] as i64 + shift[a]).rem_euclid(n) as usize;
                }
                f(l, cells.flatten(&cell) * intra.len() + sub, kv * xi);
            }
        }
    }

    /// Visit `u_a(k) += w_a(j) eta_a(k - j)` as `(noise index, flat index, w eta)`.
    fn lattice_taps(&self, kernels: &MaKernels, noise: &[f64], mut f: impl FnMut(usize, usize, f64)) {
        if noise.is_empty() {
            return;
        }
        let model = &self.bloch.model;
        let n = model.components;
        let size = model.cells as i64;
        let cells = BoxIndex::new(model.dim, model.cells);
        for k in 0..cells.len() {
            let base = cells.unflatten(k);
            for w in &kernels.lattice {
                let src: Vec<usize> = base
                    .iter()
                    .zip(&w.offset)
                    .map(|(&b, &o)| (b as i64 - o).rem_euclid(size) as usize)
                    .collect();
                let s = cells.flatten(&src);
                for a in 0..n {
                    f(s * n + a, k * n + a, w.value[a] * noise[s * n + a]);
                }
            }
        }
    }

    /// Coefficients `c` with `<Y_0, obs> = sum_i c_i noise_i` for a moving
    /// average (`None` for a Gaussian sampler).
    pub fn noise_coefficients(&self, obs: &LatticeState) -> Option<Vec<f64>> {
        let Kind::MovingAverage { ma, position, momentum } = &self.kind else {
            return None;
        };
        let model = &self.bloch.model;
        let field_weight = 1.0 / model.field_dim() as f64;
        let sizes = self.noise_sizes(ma);
        let mut coeffs: Vec<Vec<f64>> = sizes.iter().map(|&len| vec![0.0; len]).collect();
        let ones: Vec<Vec<f64>> = sizes.iter().map(|&len| vec![1.0; len]).collect();
        self.field_taps(position, &ones[0], |l, idx, w| coeffs[0][l] += w * obs.psi[idx] * field_weight);
        self.lattice_taps(&ma.position, &ones[1], |l, idx, w| coeffs[1][l] += w * obs.u[idx]);
        self.field_taps(momentum, &ones[2], |l, idx, w| coeffs[2][l] += w * obs.pi[idx] * field_weight);
        self.lattice_taps(&ma.momentum, &ones[3], |l, idx, w| coeffs[3][l] += w * obs.v[idx]);
        if ma.shared_noise {
            let (pos, mom) = coeffs.split_at_mut(2);
            for c in 0..2 {
                pos[c].iter_mut().zip(&mom[c]).for_each(|(a, b)| *a += b);
            }
            coeffs.truncate(2);
        }
        Some(coeffs.concat())
    }

    /// Exact excess kurtosis of `<Y_0, obs>`: `kappa_noise sum c^4 / (sum c^2)^2`
    /// for a moving average, zero for a Gaussian law.
    pub fn exact_excess_kurtosis(&self, obs: &LatticeState) -> f64 {
        let Kind::MovingAverage { ma, .. } = &self.kind else {
            return 0.0;
        };
        let noise_kurtosis = match ma.noise {
            NoiseLaw::Gaussian => 0.0,
            NoiseLaw::Rademacher => -2.0,
            NoiseLaw::Uniform => -1.2,
        };
        let c = self.noise_coefficients(obs).unwrap_or_default();
        let s2: f64 = c.iter().map(|x| x * x).sum();
        let s4: f64 = c.iter().map(|x| x.powi(4)).sum();
        if s2 == 0.0 {
            0.0
        } else {
            noise_kurtosis * s4 / (s2 * s2)
        }
    }
}

/// `<Y_0^{(i)}, obs_k>` for every sample `i` (outer) and observer `k` (inner).
pub fn observe(
    config: &EnsembleConfig,
    sampler: &Sampler<'_>,
    observers: &[LatticeState],
) -> Result<Vec<Vec<f64>>> {
    (0..config.samples as u64)
        .into_par_iter()
        .map(|i| {
            let y = sampler.sample(config.seed, i)?;
            Ok(observers.iter().map(|o| y.pairing(o)).collect())
        })
        .collect()
}

/// Physical form of `W'(t) Z` for pairing with initial samples.
pub fn evolved_observer(bloch: &BlochGrid, z: &ZakField, t: f64) -> Result<LatticeState> {
    zak_inverse(&bloch.adjoint_evolve(z, t)?, &bloch.model)
}

/// Ensure the largest time cannot wrap around the crystal.
pub fn guard_times(bloch: &BlochGrid, times: &[f64]) -> Result<()> {
    let speed = max_group_speed(bloch.bands()?).max_speed;
    check_wraparound(bloch.model.cells, speed, times.iter().copied().fold(0.0, f64::max))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    let mu = mean(xs);
    xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadraticEstimate {
    pub mean: f64,
    pub mean_stderr: f64,
    /// `(1/M) sum X^2`, unbiased for a centred law.
    pub q_hat: f64,
    pub stderr: f64,
}

/// Estimates from a sample of the centred scalar `X = <Y(t), Z>`.
pub fn quadratic_estimate(xs: &[f64]) -> QuadraticEstimate {
    let m = xs.len() as f64;
    let squares: Vec<f64> = xs.iter().map(|x| x * x).collect();
    QuadraticEstimate {
        mean: mean(xs),
        mean_stderr: (sample_variance(xs) / m).sqrt(),
        q_hat: mean(&squares),
        stderr: (sample_variance(&squares) / m).sqrt(),
    }
}

/// `E <Y(t), Z>^2` by Monte Carlo.
pub fn estimate_quadratic_form(
    config: &EnsembleConfig,
    bloch: &BlochGrid,
    t: f64,
    z: &TestFunction,
) -> Result<QuadraticEstimate> {
    guard_times(bloch, &[t])?;
    let sampler = Sampler::new(&config.spec, bloch)?;
    let obs = evolved_observer(bloch, &z.to_zak(bloch)?, t)?;
    let xs: Vec<f64> = observe(config, &sampler, &[obs])?.into_iter().map(|v| v[0]).collect();
    Ok(quadratic_estimate(&xs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CharRow {
    pub s: f64,
    pub re: f64,
    pub im: f64,
    /// `exp(-s^2 Q / 2)`.
    pub reference: f64,
    pub deviation: f64,
    pub stderr: f64,
}

/// `(1/M) sum exp(i s X)` against the Gaussian reference with variance `q`.
pub fn char_functional(xs: &[f64], s_grid: &[f64], q: f64) -> Vec<CharRow> {
    let m = xs.len() as f64;
    s_grid
        .iter()
        .map(|&s| {
            let cos: Vec<f64> = xs.iter().map(|x| (s * x).cos()).collect();
            let sin: Vec<f64> = xs.iter().map(|x| (s * x).sin()).collect();
            let re = mean(&cos);
            let im = mean(&sin);
            let reference = (-0.5 * s * s * q).exp();
            let stderr = ((sample_variance(&cos) + sample_variance(&sin)) / m).sqrt();
            CharRow {
                s,
                re,
                im,
                reference,
                deviation: ((re - reference).powi(2) + im * im).sqrt(),
                stderr,
            }
        })
        .collect()
}

/// Empirical characteristic function of `<Y(t), Z>` on `s_grid`.
pub fn empirical_char_functional(
    config: &EnsembleConfig,
    bloch: &BlochGrid,
    t: f64,
    z: &TestFunction,
    s_grid: &[f64],
    q_reference: f64,
) -> Result<Vec<CharRow>> {
    guard_times(bloch, &[t])?;
    let sampler = Sampler::new(&config.spec, bloch)?;
    let obs = evolved_observer(bloch, &z.to_zak(bloch)?, t)?;
    let xs: Vec<f64> = observe(config, &sampler, &[obs])?.into_iter().map(|v| v[0]).collect();
    Ok(char_functional(&xs, s_grid, q_reference))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormalityStats {
    pub samples: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Normal-theory standard errors `sqrt(6/M)` and `sqrt(24/M)`.
    pub skewness_stderr: f64,
    pub kurtosis_stderr: f64,
    /// Kolmogorov-Smirnov distance to `N(0, variance)`.
    pub ks_statistic: f64,
    /// Asymptotic 1% critical value `1.628 / sqrt(M)`.
    pub ks_critical: f64,
}

/// Moment statistics of a scalar sample; the KS test uses `reference_variance`
/// (zero mean) when given, otherwise the sample mean and variance.
pub fn normality_stats(xs: &[f64], reference_variance: Option<f64>) -> NormalityStats {
    let m = xs.len() as f64;
    let mu = mean(xs);
    let m2 = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / m;
    let m3 = xs.iter().map(|x| (x - mu).powi(3)).sum::<f64>() / m;
    let m4 = xs.iter().map(|x| (x - mu).powi(4)).sum::<f64>() / m;
    let (loc, var) = match reference_variance {
        Some(v) => (0.0, v),
        None => (mu, m2),
    };
    let normal = Normal::new(loc, var.sqrt().max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let ks_statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / m).abs().max((((i + 1) as f64) / m - f).abs())
        })
        .fold(0.0, f64::max);
    NormalityStats {
        samples: xs.len(),
        mean: mu,
        variance: m2,
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        skewness_stderr: (6.0 / m).sqrt(),
        kurtosis_stderr: (24.0 / m).sqrt(),
        ks_statistic,
        ks_critical: 1.628 / m.sqrt(),
    }
}

/// Moments of `<Y(t), Z>` under the configured initial law.
pub fn normality_at(config: &EnsembleConfig, bloch: &BlochGrid, t: f64, z: &TestFunction) -> Result<NormalityStats> {
    guard_times(bloch, &[t])?;
    let sampler = Sampler::new(&config.spec, bloch)?;
    let obs = evolved_observer(bloch, &z.to_zak(bloch)?, t)?;
    let xs: Vec<f64> = observe(config, &sampler, &[obs])?.into_iter().map(|v| v[0]).collect();
    Ok(normality_stats(&xs, None))
}

/// Samples of `<Y(t), Z>` at several times, all from the same draws.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservedSeries {
    pub times: Vec<f64>,
    /// `values[k][i]` for time `k` and sample `i`.
    pub values: Vec<Vec<f64>>,
    /// Exact excess kurtosis of the law at each time.
    pub exact_kurtosis: Vec<f64>,
}

pub fn observe_series(
    config: &EnsembleConfig,
    bloch: &BlochGrid,
    z: &TestFunction,
    times: &[f64],
) -> Result<ObservedSeries> {
    guard_times(bloch, times)?;
    let sampler = Sampler::new(&config.spec, bloch)?;
    let zt = z.to_zak(bloch)?;
    let observers: Vec<LatticeState> = times
        .iter()
        .map(|&t| evolved_observer(bloch, &zt, t))
        .collect::<Result<_>>()?;
    let obs = observe(config, &sampler, &observers)?;
    Ok(ObservedSeries {
        times: times.to_vec(),
        values: (0..times.len())
            .map(|k| obs.iter().map(|row| row[k]).collect())
            .collect(),
        exact_kurtosis: observers.iter().map(|o| sampler.exact_excess_kurtosis(o)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixingRow {
    pub t: f64,
    /// `E <W(t) Y, Z> <Y, Z1>` from the covariance table.
    pub exact: f64,
    pub monte_carlo: f64,
    pub stderr: f64,
}

/// Correlation decay under the Gaussian law with covariance `q_inf`: the exact
/// pairing `(1/N^d) sum (q W'(t) Z, Z1)` and a Monte-Carlo estimate over
/// `samples` draws from that law.
pub fn mixing_correlation(
    bloch: &BlochGrid,
    q_inf: &[CovarianceMatrix],
    z: &TestFunction,
    z1: &TestFunction,
    times: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<MixingRow>> {
    guard_times(bloch, times)?;
    let zt0 = z.to_zak(bloch)?;
    let z1t = z1.to_zak(bloch)?;
    let evolved: Vec<ZakField> = times
        .iter()
        .map(|&t| bloch.adjoint_evolve(&zt0, t))
        .collect::<Result<_>>()?;
    let exact: Vec<f64> = evolved
        .iter()
        .map(|e| Ok(bilinear_form(q_inf, e, &z1t)?.re))
        .collect::<Result<_>>()?;
    let mut observers: Vec<LatticeState> = evolved
        .iter()
        .map(|e| zak_inverse(e, &bloch.model))
        .collect::<Result<_>>()?;
    observers.push(zak_inverse(&z1t, &bloch.model)?);
    let sampler = Sampler::gaussian(q_inf, bloch)?;
    let config = EnsembleConfig::new(samples, seed, InitialMeasureSpec::Gibbs { temperature: 1.0 });
    let obs = observe(&config, &sampler, &observers)?;
    let k1 = times.len();
    Ok(times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let prods: Vec<f64> = obs.iter().map(|row| row[k] * row[k1]).collect();
            MixingRow {
                t,
                exact: exact[k],
                monte_carlo: mean(&prods),
                stderr: (sample_variance(&prods) / samples as f64).sqrt(),
            }
        })
        .collect())
}
