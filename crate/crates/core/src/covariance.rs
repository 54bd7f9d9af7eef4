//! Per-quasimomentum covariances of translation-invariant random initial data.
//!
//! With `Y(theta)` the Zak transform of a random state on `N^d` cells, the
//! covariance at a grid point is `q(theta) = (1/N^d) E[Y(theta) Y(theta)^*]`,
//! a Hermitian `2m x 2m` matrix in `(Y^0, Y^1)` block form. With this
//! normalisation `Var <Y, Z> = (1/N^d) sum_j (q Z, Z)`, and lattice white noise
//! has `q = 1`.

use std::io::Write;

use nalgebra::{DMatrix, Matrix2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch_cell::{ModelParams, SpectralData};
use crate::error::{Error, Result};
use crate::grid::{circle_distance, wrap_theta};
use crate::propagator::{propagator_matrix, BlochGrid, ZakField};
use crate::C64;

/// Relative tolerance for Hermiticity and positivity checks.
pub const PSD_TOL: f64 = 1e-10;

/// `q(theta)` at one quasimomentum.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    pub theta: Vec<f64>,
    pub q: DMatrix<C64>,
}

impl CovarianceMatrix {
    pub fn new(theta: Vec<f64>, q: DMatrix<C64>) -> Result<Self> {
        if q.nrows() != q.ncols() || q.nrows() % 2 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "covariance must be square of even size, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        Ok(Self { theta, q })
    }

    pub fn zeros(theta: &[f64], m: usize) -> Self {
        Self {
            theta: theta.to_vec(),
            q: DMatrix::zeros(2 * m, 2 * m),
        }
    }

    /// Half size `m`.
    pub fn m(&self) -> usize {
        self.q.nrows() / 2
    }

    /// Block `q^{ij}`, `i, j` in `{0, 1}`.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<C64> {
        let m = self.m();
        self.q.view((i * m, j * m), (m, m)).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.q.norm()
    }

    pub fn hermitian_defect(&self) -> f64 {
        (&self.q - self.q.adjoint()).norm()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.q + self.q.adjoint()) * C64::new(0.5, 0.0);
        h.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Hermitian to `PSD_TOL` and eigenvalues `>= -PSD_TOL |q|`.
    pub fn check_psd(&self) -> Result<()> {
        let scale = self.norm().max(f64::MIN_POSITIVE);
        let min_eigenvalue = self.min_eigenvalue();
        if self.hermitian_defect() > PSD_TOL * scale || min_eigenvalue < -PSD_TOL * scale {
            return Err(Error::NotPsd { min_eigenvalue });
        }
        Ok(())
    }

    /// Hermitian square root with negative round-off eigenvalues clipped.
    pub fn sqrt(&self) -> DMatrix<C64> {
        let h = (&self.q + self.q.adjoint()) * C64::new(0.5, 0.0);
        let eig = h.symmetric_eigen();
        let mut v = eig.eigenvectors.clone();
        for (mut col, &l) in v.column_iter_mut().zip(eig.eigenvalues.iter()) {
            col *= C64::new(l.max(0.0).sqrt(), 0.0);
        }
        v * eig.eigenvectors.adjoint()
    }
}

/// Distribution of the i.i.d. driving noise of a moving average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLaw {
    Gaussian,
    Rademacher,
    /// Uniform on `[-sqrt 3, sqrt 3]`.
    Uniform,
}

/// `kappa(x) = A exp(-|x|^2 / (2 w^2))` sampled on the collocation grid and
/// truncated to `|x|_inf <= range`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldKernel {
    pub amplitude: f64,
    pub width: f64,
    pub range: f64,
}

/// Lattice kernel weight `w(offset)`, one value per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeWeight {
    pub offset: Vec<i64>,
    pub value: Vec<f64>,
}

/// Kernels producing one of the two halves `Y^0 = (psi, u)` or `Y^1 = (pi, v)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MaKernels {
    #[serde(default)]
    pub field: Option<FieldKernel>,
    #[serde(default)]
    pub lattice: Vec<LatticeWeight>,
}

impl MaKernels {
    pub fn is_empty(&self) -> bool {
        self.field.is_none() && self.lattice.is_empty()
    }
}

/// Moving-average initial data: `psi(x) = sum_k kappa(x - k) xi(k)` and
/// `u_a(k) = sum_j w_a(j) eta_a(k - j)` with independent unit-variance noise
/// per cell and component. With `shared_noise` the momentum half reuses the
/// position noise, which makes `q^{01}` nonzero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingAverage {
    #[serde(default)]
    pub position: MaKernels,
    #[serde(default)]
    pub momentum: MaKernels,
    pub noise: NoiseLaw,
    #[serde(default)]
    pub shared_noise: bool,
}

impl MovingAverage {
    /// Largest dependence range of the kernels (in cells).
    pub fn mixing_range(&self) -> f64 {
        [&self.position, &self.momentum]
            .iter()
            .flat_map(|k| {
                k.field.iter().map(|f| f.range).chain(k.lattice.iter().map(|w| {
                    w.offset.iter().map(|&o| o.unsigned_abs() as f64).fold(0.0, f64::max)
                }))
            })
            .fold(0.0, f64::max)
    }

    pub fn problems(&self, model: &ModelParams) -> Vec<String> {
        let mut out = Vec::new();
        for (name, k) in [("position", &self.position), ("momentum", &self.momentum)] {
            if let Some(f) = k.field {
                if !(f.width > 0.0 && f.range >= 0.0) {
                    out.push(format!("{name} field kernel needs width > 0 and range >= 0"));
                }
                if 2.0 * f.range + 1.0 >= model.cells as f64 {
                    out.push(format!("{name} field kernel range exceeds the crystal"));
                }
            }
            for w in &k.lattice {
                if w.offset.len() != model.dim || w.value.len() != model.components {
                    out.push(format!(
                        "{name} lattice weight needs {} offsets and {} values",
                        model.dim, model.components
                    ));
                }
            }
        }
        if self.position.is_empty() && self.momentum.is_empty() {
            out.push("moving average has no kernels".into());
        }
        out
    }

    /// Collocation samples `(offset in grid steps, kappa)` of a field kernel.
    pub(crate) fn kernel_samples(kernel: &FieldKernel, model: &ModelParams) -> Vec<(Vec<i64>, f64)> {
        let p = model.samples_per_axis() as f64;
        let reach = (kernel.range * p + 1e-9).floor() as i64;
        let side = (2 * reach + 1) as usize;
        let b = crate::grid::BoxIndex::new(model.dim, side);
        (0..b.len())
            .map(|f| {
                let s: Vec<i64> = b.unflatten(f).into_iter().map(|i| i as i64 - reach).collect();
                let r2: f64 = s.iter().map(|&i| (i as f64 / p).powi(2)).sum();
                let v = kernel.amplitude * (-r2 / (2.0 * kernel.width * kernel.width)).exp();
                (s, v)
            })
            .collect()
    }

    /// Mode-space vector of one half at `theta`: field entries are the exact
    /// grid transform `(1/P^d) sum e^{i q x} kappa(x)` at `q = theta' + 2 pi m`,
    /// lattice entries `sum_j e^{i j theta} w(j)`.
    fn half_vector(kernels: &MaKernels, model: &ModelParams, theta: &[f64]) -> Vec<C64> {
        let m = model.cell_dim();
        let nf = model.field_dim();
        let mut out = vec![C64::new(0.0, 0.0); m];
        let tw = wrap_theta(theta);
        if let Some(kernel) = &kernels.field {
            let p = model.samples_per_axis() as f64;
            let samples = Self::kernel_samples(kernel, model);
            let norm = 1.0 / p.powi(model.dim as i32);
            for (i, slot) in out.iter_mut().enumerate().take(nf) {
                let mode = model.mode(i);
                let q: Vec<f64> = tw
                    .iter()
                    .zip(&mode)
                    .map(|(t, &k)| t + std::f64::consts::TAU * k as f64)
                    .collect();
                *slot = samples
                    .iter()
                    .map(|(s, v)| {
                        let phase: f64 = s.iter().zip(&q).map(|(&a, b)| a as f64 / p * b).sum();
                        C64::from_polar(*v, phase)
                    })
                    .sum::<C64>()
                    * norm;
            }
        }
        for w in &kernels.lattice {
            let phase: f64 = w.offset.iter().zip(theta).map(|(&o, t)| o as f64 * t).sum();
            let e = C64::from_polar(1.0, phase);
            for (a, v) in w.value.iter().enumerate() {
                out[nf + a] += e * *v;
            }
        }
        out
    }
}

/// Law of the initial data.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialMeasureSpec {
    /// Gaussian with `q^{00} = T H^{-1}`, `q^{11} = T`.
    Gibbs { temperature: f64 },
    MovingAverage(MovingAverage),
    /// Gaussian with an explicit table, one entry per grid point.
    Direct(Vec<CovarianceMatrix>),
}

impl InitialMeasureSpec {
    pub fn is_gaussian(&self) -> bool {
        match self {
            Self::Gibbs { .. } | Self::Direct(_) => true,
            Self::MovingAverage(ma) => ma.noise == NoiseLaw::Gaussian,
        }
    }

    pub fn validate(&self, model: &ModelParams) -> Result<()> {
        match self {
            Self::Gibbs { temperature } if !(*temperature > 0.0 && temperature.is_finite()) => {
                Err(Error::Config(format!("temperature must be positive, got {temperature}")))
            }
            Self::MovingAverage(ma) => {
                let p = ma.problems(model);
                if p.is_empty() {
                    Ok(())
                } else {
                    Err(Error::Config(p.join("; ")))
                }
            }
            Self::Direct(table) => table.iter().try_for_each(|c| {
                if c.m() != model.cell_dim() {
                    return Err(Error::DimensionMismatch("direct covariance has wrong size".into()));
                }
                c.check_psd()
            }),
            _ => Ok(()),
        }
    }
}

/// `q_0(theta)` for one quasimomentum.
pub fn initial_covariance(spec: &InitialMeasureSpec, model: &ModelParams, theta: &[f64]) -> Result<CovarianceMatrix> {
    match spec {
        InitialMeasureSpec::Gibbs { .. } => gibbs_from(spec, &SpectralData::at(model, theta)?),
        InitialMeasureSpec::MovingAverage(ma) => Ok(moving_average_covariance(ma, model, theta)),
        InitialMeasureSpec::Direct(table) => {
            let found = table.iter().find(|c| {
                c.theta.len() == theta.len()
                    && c.theta.iter().zip(theta).all(|(a, b)| circle_distance(*a, *b) < 1e-12)
            });
            let c = found.ok_or_else(|| Error::GridMismatch(format!("no direct entry at theta {theta:?}")))?;
            c.check_psd()?;
            Ok(c.clone())
        }
    }
}

fn gibbs_from(spec: &InitialMeasureSpec, sd: &SpectralData) -> Result<CovarianceMatrix> {
    let InitialMeasureSpec::Gibbs { temperature } = spec else {
        unreachable!()
    };
    let m = sd.dim();
    let t = *temperature;
    let inv = sd.matrix_function(|w| t / (w * w))?;
    let mut q = DMatrix::zeros(2 * m, 2 * m);
    q.view_mut((0, 0), (m, m)).copy_from(&inv);
    q.view_mut((m, m), (m, m)).fill_with_identity();
    q.view_mut((m, m), (m, m)).scale_mut(t);
    Ok(CovarianceMatrix {
        theta: sd.theta.clone(),
        q,
    })
}

/// `gibbs(T)` at one quasimomentum from its spectral data.
pub fn gibbs(temperature: f64, sd: &SpectralData) -> Result<CovarianceMatrix> {
    gibbs_from(&InitialMeasureSpec::Gibbs { temperature }, sd)
}

fn moving_average_covariance(ma: &MovingAverage, model: &ModelParams, theta: &[f64]) -> CovarianceMatrix {
    let m = model.cell_dim();
    let nf = model.field_dim();
    let a = MovingAverage::half_vector(&ma.position, model, theta);
    let b = MovingAverage::half_vector(&ma.momentum, model, theta);
    let mut q = DMatrix::zeros(2 * m, 2 * m);
    // independent noise per component: field and each lattice component decouple
    let mut fill = |row_off: usize, col_off: usize, x: &[C64], y: &[C64]| {
        for i in 0..nf {
            for j in 0..nf {
                q[(row_off + i, col_off + j)] = x[i] * y[j].conj();
            }
        }
        for c in nf..m {
            q[(row_off + c, col_off + c)] = x[c] * y[c].conj();
        }
    };
    fill(0, 0, &a, &a);
    fill(m, m, &b, &b);
    if ma.shared_noise {
        fill(0, m, &a, &b);
        fill(m, 0, &b, &a);
    }
    CovarianceMatrix {
        theta: theta.to_vec(),
        q,
    }
}

/// `q_0(theta_j)` at every point of the crystal's grid.
pub fn initial_covariance_table(spec: &InitialMeasureSpec, bloch: &BlochGrid) -> Result<Vec<CovarianceMatrix>> {
    spec.validate(&bloch.model)?;
    match spec {
        InitialMeasureSpec::Direct(table) => {
            if table.len() != bloch.len() {
                return Err(Error::GridMismatch(format!(
                    "direct table has {} entries for {} grid points",
                    table.len(),
                    bloch.len()
                )));
            }
            Ok(table.clone())
        }
        InitialMeasureSpec::Gibbs { .. } => bloch.spectra.par_iter().map(|sd| gibbs_from(spec, sd)).collect(),
        InitialMeasureSpec::MovingAverage(ma) => Ok((0..bloch.len())
            .into_par_iter()
            .map(|j| moving_average_covariance(ma, &bloch.model, bloch.grid.point(j)))
            .collect()),
    }
}

/// `G(t) q G(t)^*`.
pub fn evolve_covariance(q0: &CovarianceMatrix, spec: &SpectralData, t: f64) -> CovarianceMatrix {
    let g = propagator_matrix(spec, t);
    CovarianceMatrix {
        theta: q0.theta.clone(),
        q: &g * &q0.q * g.adjoint(),
    }
}

/// Time-average limit: `M = 1/2 [[q00 + H^-1 q11, q01 - q10], [q10 - q01, H q00 + q11]]`
/// sandwiched between `P_g (+) P_g` and summed over degeneracy groups.
pub fn limit_covariance(q0: &CovarianceMatrix, spec: &SpectralData) -> Result<CovarianceMatrix> {
    let m = spec.dim();
    if q0.m() != m {
        return Err(Error::DimensionMismatch("covariance and spectrum sizes differ".into()));
    }
    let h = &spec.h;
    let hinv = spec.matrix_function(|w| 1.0 / (w * w))?;
    let (q00, q01, q10, q11) = (q0.block(0, 0), q0.block(0, 1), q0.block(1, 0), q0.block(1, 1));
    let half = C64::new(0.5, 0.0);
    let blocks = [
        [(&q00 + &hinv * &q11) * half, (&q01 - &q10) * half],
        [(&q10 - &q01) * half, (h * &q00 + &q11) * half],
    ];
    let mut q = DMatrix::zeros(2 * m, 2 * m);
    for g in &spec.groups {
        let p = spec.projector(g.clone());
        for (i, row) in blocks.iter().enumerate() {
            for (j, b) in row.iter().enumerate() {
                let mut view = q.view_mut((i * m, j * m), (m, m));
                view += &p * b * &p;
            }
        }
    }
    Ok(CovarianceMatrix {
        theta: q0.theta.clone(),
        q,
    })
}

/// Apply [`evolve_covariance`] across a grid.
pub fn evolve_table(table: &[CovarianceMatrix], bloch: &BlochGrid, t: f64) -> Result<Vec<CovarianceMatrix>> {
    check_table(table, bloch)?;
    Ok(table
        .par_iter()
        .zip(&bloch.spectra)
        .map(|(q, sd)| evolve_covariance(q, sd, t))
        .collect())
}

/// Apply [`limit_covariance`] across a grid.
pub fn limit_table(table: &[CovarianceMatrix], bloch: &BlochGrid) -> Result<Vec<CovarianceMatrix>> {
    check_table(table, bloch)?;
    table
        .par_iter()
        .zip(&bloch.spectra)
        .map(|(q, sd)| limit_covariance(q, sd))
        .collect()
}

fn check_table(table: &[CovarianceMatrix], bloch: &BlochGrid) -> Result<()> {
    if table.len() != bloch.len() || table.iter().any(|c| c.m() != bloch.model.cell_dim()) {
        return Err(Error::GridMismatch(format!(
            "covariance table has {} entries for {} grid points",
            table.len(),
            bloch.len()
        )));
    }
    Ok(())
}

/// `(1/N^d) sum_j (q(theta_j) a_j, b_j)`; equals `E <Y, a> <Y, b>` for real data.
pub fn bilinear_form(table: &[CovarianceMatrix], a: &ZakField, b: &ZakField) -> Result<C64> {
    if table.len() != a.len() || a.len() != b.len() || table.iter().any(|c| 2 * c.m() != a.at(0).len()) {
        return Err(Error::GridMismatch(format!(
            "table of {} entries against fields on {} and {} points",
            table.len(),
            a.len(),
            b.len()
        )));
    }
    let s: C64 = table
        .par_iter()
        .enumerate()
        .map(|(j, c)| {
            let av = nalgebra::DVectorView::from_slice(a.at(j), a.at(j).len());
            let bv = nalgebra::DVectorView::from_slice(b.at(j), b.at(j).len());
            bv.dotc(&(&c.q * av))
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(s / table.len() as f64)
}

/// `Q(Z, Z) = (1/N^d) sum_j (q(theta_j) Z_j, Z_j)`.
pub fn quadratic_form(table: &[CovarianceMatrix], z: &ZakField) -> Result<f64> {
    Ok(bilinear_form(table, z, z)?.re)
}

/// `p_{ll'}^{ij} = F_l^* q^{ij} F_{l'}` as 2x2 matrices, indexed `[l * m + l']`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCoeffs {
    pub m: usize,
    pub p: Vec<Matrix2<C64>>,
}

impl SpectralCoeffs {
    pub fn get(&self, l: usize, l2: usize) -> &Matrix2<C64> {
        &self.p[l * self.m + l2]
    }
}

fn block_diag(f: &DMatrix<C64>) -> DMatrix<C64> {
    let m = f.nrows();
    let mut out = DMatrix::zeros(2 * m, 2 * m);
    out.view_mut((0, 0), (m, m)).copy_from(f);
    out.view_mut((m, m), (m, m)).copy_from(f);
    out
}

pub fn spectral_coeffs(q0: &CovarianceMatrix, spec: &SpectralData) -> SpectralCoeffs {
    let m = spec.dim();
    let fx = block_diag(&spec.vectors);
    let b = fx.adjoint() * &q0.q * &fx;
    let p = (0..m * m)
        .map(|idx| {
            let (l, l2) = (idx / m, idx % m);
            Matrix2::new(b[(l, l2)], b[(l, m + l2)], b[(m + l, l2)], b[(m + l, m + l2)])
        })
        .collect();
    SpectralCoeffs { m, p }
}

/// `sum_{ll'} F_l r_{ll'}^{ij} F_{l'}^*` for a table of 2x2 coefficients.
pub fn assemble(coeffs: &SpectralCoeffs, spec: &SpectralData) -> DMatrix<C64> {
    let m = coeffs.m;
    let mut b = DMatrix::zeros(2 * m, 2 * m);
    for l in 0..m {
        for l2 in 0..m {
            let r = coeffs.get(l, l2);
            for i in 0..2 {
                for j in 0..2 {
                    b[(i * m + l, j * m + l2)] = r[(i, j)];
                }
            }
        }
    }
    let fx = block_diag(&spec.vectors);
    &fx * b * fx.adjoint()
}

/// `C_l = [[0, 1/w], [-w, 0]]`.
fn c_matrix(w: f64) -> Matrix2<C64> {
    Matrix2::new(
        C64::new(0.0, 0.0),
        C64::new(1.0 / w, 0.0),
        C64::new(-w, 0.0),
        C64::new(0.0, 0.0),
    )
}

/// `r_{ll'}(t) = 1/2 sum_{+-} { cos((w_l +- w_l') t) (p -+ C_l p C_l'^T)
///                              + sin((w_l +- w_l') t) (C_l p +- p C_l'^T) }`.
pub fn r_matrix(p: &Matrix2<C64>, w_l: f64, w_l2: f64, t: f64) -> Matrix2<C64> {
    let c = c_matrix(w_l);
    let c2t = c_matrix(w_l2).transpose();
    let cpc = c * p * c2t;
    let half = C64::new(0.5, 0.0);
    let mut out = Matrix2::zeros();
    for sign in [1.0, -1.0] {
        let phase = (w_l + sign * w_l2) * t;
        let cos = C64::new(phase.cos(), 0.0);
        let sin = C64::new(phase.sin(), 0.0);
        let s = C64::new(sign, 0.0);
        out += (p - cpc * s) * cos + (c * p + p * c2t * s) * sin;
    }
    out * half
}

/// `q_t` through the spectral coefficients: `r_{ll'}(t)` assembled back with `F`.
pub fn evolve_via_coeffs(q0: &CovarianceMatrix, spec: &SpectralData, t: f64) -> CovarianceMatrix {
    let p = spectral_coeffs(q0, spec);
    let m = p.m;
    let r = SpectralCoeffs {
        m,
        p: (0..m * m)
            .map(|idx| r_matrix(&p.p[idx], spec.omegas[idx / m], spec.omegas[idx % m], t))
            .collect(),
    };
    CovarianceMatrix {
        theta: q0.theta.clone(),
        q: assemble(&r, spec),
    }
}

/// `tr(W q W)` with `W = diag(Omega, I)`; constant along the evolution.
pub fn trace_diagnostic(q: &CovarianceMatrix, spec: &SpectralData) -> f64 {
    let omega = spec.weighted_outer(&spec.omegas);
    let q00 = q.block(0, 0);
    let q11 = q.block(1, 1);
    (&omega * q00 * &omega).trace().re + q11.trace().re
}

/// Rows `theta_index,i,j,row,col,re,im`.
pub fn write_covariance_csv<W: Write>(table: &[CovarianceMatrix], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["theta_index", "i", "j", "row", "col", "re", "im"])?;
    for (g, c) in table.iter().enumerate() {
        let m = c.m();
        for r in 0..2 * m {
            for k in 0..2 * m {
                let v = c.q[(r, k)];
                w.write_record(&[
                    g.to_string(),
                    (r / m).to_string(),
                    (k / m).to_string(),
                    (r % m).to_string(),
                    (k % m).to_string(),
                    v.re.to_string(),
                    v.im.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
