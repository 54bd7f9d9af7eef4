//! Unit-cell operator `H(theta)` on the truncated plane-wave + lattice basis.
//!
//! Basis ordering: the `(2K+1)^d` field plane waves `phi_m(y) = exp(-2 pi i m.y)`
//! come first (mode index `i = sum_a (m_a + K) (2K+1)^a`), followed by the `n`
//! lattice unit vectors. Plane-wave wavenumbers are `xi = theta' + 2 pi m` where
//! `theta'` is the representative of `theta` in `(-pi, pi]`, which makes the
//! truncated mode set closed under `theta -> -theta`.

use std::f64::consts::{PI, TAU};
use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{wrap_theta, ThetaGrid};
use crate::C64;

/// One Gaussian bump `A exp(-|x - c|^2 / (2 sigma^2))` of the coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianTerm {
    pub amplitude: Vec<f64>,
    pub width: f64,
    pub center: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingFamily {
    Zero,
    Gaussian,
    SumOfGaussians,
}

/// Coupling function `R: R^d -> R^n` as a finite sum of Gaussian bumps.
///
/// The continuum transform uses the convention `R^(xi) = int exp(i xi.x) R(x) dx`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CouplingSpec {
    pub terms: Vec<GaussianTerm>,
}

impl CouplingSpec {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn gaussian(amplitude: Vec<f64>, width: f64, center: Vec<f64>) -> Self {
        Self {
            terms: vec![GaussianTerm {
                amplitude,
                width,
                center,
            }],
        }
    }

    pub fn sum_of_gaussians(terms: Vec<GaussianTerm>) -> Self {
        Self { terms }
    }

    pub fn family(&self) -> CouplingFamily {
        match self.terms.len() {
            0 => CouplingFamily::Zero,
            1 => CouplingFamily::Gaussian,
            _ => CouplingFamily::SumOfGaussians,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.amplitude.iter().all(|&a| a == 0.0))
    }

    /// Linear combination `sum_s c_s R_s`.
    pub fn combine(parts: &[(f64, &CouplingSpec)]) -> Self {
        let terms = parts
            .iter()
            .flat_map(|(c, spec)| {
                spec.terms.iter().map(move |t| GaussianTerm {
                    amplitude: t.amplitude.iter().map(|a| a * c).collect(),
                    width: t.width,
                    center: t.center.clone(),
                })
            })
            .collect();
        Self { terms }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::combine(&[(factor, self)])
    }

    /// Largest distance from the origin at which a bump is still significant,
    /// measured as `|c| + width`.
    pub fn reach(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| t.center.iter().map(|c| c * c).sum::<f64>().sqrt() + t.width)
            .fold(0.0, f64::max)
    }

    pub fn max_width(&self) -> f64 {
        self.terms.iter().map(|t| t.width).fold(0.0, f64::max)
    }

    /// Real-space value `R(x)` (length `n`).
    pub fn value(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for t in &self.terms {
            let r2: f64 = x
                .iter()
                .zip(&t.center)
                .map(|(xi, ci)| (xi - ci).powi(2))
                .sum();
            let g = (-r2 / (2.0 * t.width * t.width)).exp();
            for (o, a) in out.iter_mut().zip(&t.amplitude) {
                *o += a * g;
            }
        }
        out
    }

    /// Closed-form transform `R^(xi)` (length `n`).
    pub fn fourier(&self, xi: &[f64], n: usize) -> Vec<C64> {
        let d = xi.len() as i32;
        let mut out = vec![C64::new(0.0, 0.0); n];
        for t in &self.terms {
            let xi2: f64 = xi.iter().map(|v| v * v).sum();
            let phase: f64 = xi.iter().zip(&t.center).map(|(a, b)| a * b).sum();
            let mag = TAU.powf(d as f64 / 2.0) * t.width.powi(d)
                * (-0.5 * t.width * t.width * xi2).exp();
            let e = C64::from_polar(mag, phase);
            for (o, a) in out.iter_mut().zip(&t.amplitude) {
                *o += e * *a;
            }
        }
        out
    }

    /// Gradient `d R^(xi) / d xi_axis`, indexed `[axis][component]`.
    pub fn fourier_gradient(&self, xi: &[f64], n: usize) -> Vec<Vec<C64>> {
        let d = xi.len();
        let mut out = vec![vec![C64::new(0.0, 0.0); n]; d];
        for t in &self.terms {
            let xi2: f64 = xi.iter().map(|v| v * v).sum();
            let phase: f64 = xi.iter().zip(&t.center).map(|(a, b)| a * b).sum();
            let mag = TAU.powf(d as f64 / 2.0) * t.width.powi(d as i32)
                * (-0.5 * t.width * t.width * xi2).exp();
            let e = C64::from_polar(mag, phase);
            for (axis, row) in out.iter_mut().enumerate() {
                let factor = C64::new(-t.width * t.width * xi[axis], t.center[axis]);
                for (o, a) in row.iter_mut().zip(&t.amplitude) {
                    *o += e * factor * *a;
                }
            }
        }
        out
    }
}

/// Physical constants and discretisation of the coupled model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Spatial dimension `d` (1 or 2).
    pub dim: usize,
    /// Lattice displacement components `n`.
    pub components: usize,
    pub m0: f64,
    pub nu0: f64,
    /// Plane-wave cutoff `K`: modes with `|m|_inf <= K`.
    pub cutoff: usize,
    pub coupling: CouplingSpec,
    /// Cells per axis `N` of the finite periodic crystal.
    pub cells: usize,
}

impl ModelParams {
    /// Collect every violated invariant.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.dim == 1 || self.dim == 2) {
            out.push(format!("d must be 1 or 2, got {}", self.dim));
        }
        if self.components == 0 {
            out.push("n must be at least 1".into());
        }
        if !(self.m0 > 0.0 && self.m0.is_finite()) {
            out.push(format!("m0 must be positive, got {}", self.m0));
        }
        if !(self.nu0 > 0.0 && self.nu0.is_finite()) {
            out.push(format!("nu0 must be positive, got {}", self.nu0));
        }
        if self.cells < 2 || self.cells % 2 != 0 {
            out.push(format!("N must be even and at least 2, got {}", self.cells));
        }
        for (i, t) in self.coupling.terms.iter().enumerate() {
            if t.amplitude.len() != self.components {
                out.push(format!(
                    "coupling term {i}: amplitude has {} entries, expected n = {}",
                    t.amplitude.len(),
                    self.components
                ));
            }
            if t.center.len() != self.dim {
                out.push(format!(
                    "coupling term {i}: center has {} entries, expected d = {}",
                    t.center.len(),
                    self.dim
                ));
            }
            if !(t.width > 0.0 && t.width.is_finite()) {
                out.push(format!("coupling term {i}: width must be positive"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidModel(problems.join("; ")))
        }
    }

    /// Collocation points (and plane waves) per axis, `P = 2K + 1`.
    pub fn samples_per_axis(&self) -> usize {
        2 * self.cutoff + 1
    }

    pub fn field_dim(&self) -> usize {
        self.samples_per_axis().pow(self.dim as u32)
    }

    /// Cell dimension `m = (2K+1)^d + n`.
    pub fn cell_dim(&self) -> usize {
        self.field_dim() + self.components
    }

    pub fn cell_count(&self) -> usize {
        self.cells.pow(self.dim as u32)
    }

    /// Integer mode vector of field basis index `i`.
    pub fn mode(&self, mut i: usize) -> Vec<i64> {
        let p = self.samples_per_axis();
        let k = self.cutoff as i64;
        (0..self.dim)
            .map(|_| {
                let digit = (i % p) as i64;
                i /= p;
                digit - k
            })
            .collect()
    }

    pub fn mode_index(&self, mode: &[i64]) -> usize {
        let p = self.samples_per_axis() as i64;
        let k = self.cutoff as i64;
        mode.iter()
            .rev()
            .fold(0i64, |acc, &m| acc * p + (m + k)) as usize
    }

    /// Lattice dispersion `omega_*^2(theta) = sum 2(1 - cos theta_i) + nu0^2`.
    pub fn lattice_frequency_sq(&self, theta: &[f64]) -> f64 {
        theta.iter().map(|t| 2.0 * (1.0 - t.cos())).sum::<f64>() + self.nu0 * self.nu0
    }

    /// Decoupled field dispersion `(2 pi m + theta)^2 + m0^2` for the basis mode `i`.
    pub fn field_frequency_sq(&self, theta: &[f64], i: usize) -> f64 {
        let w = wrap_theta(theta);
        let m = self.mode(i);
        w.iter()
            .zip(&m)
            .map(|(t, &mi)| (t + TAU * mi as f64).powi(2))
            .sum::<f64>()
            + self.m0 * self.m0
    }
}

/// Wavenumber of one truncated plane wave at a given `theta`.
///
/// On axes where `theta' = pi` and `m = K` the wavenumber `pi(2K+1)` is the
/// self-conjugate alias of `-pi(2K+1)`; quantities on such modes are averaged
/// over both signs so that the truncated operator stays real in physical space.
#[derive(Debug, Clone)]
pub(crate) struct Wavenumber {
    pub xi: Vec<f64>,
    pub alias_axes: Vec<usize>,
}

impl Wavenumber {
    /// Every aliased representative of this wavenumber.
    pub fn representatives(&self) -> Vec<Vec<f64>> {
        let mut out = vec![self.xi.clone()];
        for &axis in &self.alias_axes {
            let flipped: Vec<Vec<f64>> = out
                .iter()
                .map(|x| {
                    let mut y = x.clone();
                    y[axis] = -y[axis];
                    y
                })
                .collect();
            out.extend(flipped);
        }
        out
    }

    /// Average of a vector-valued map over all representatives.
    pub fn average<F>(&self, f: F) -> Vec<C64>
    where
        F: Fn(&[f64]) -> Vec<C64>,
    {
        let reps = self.representatives();
        let scale = 1.0 / reps.len() as f64;
        let mut acc = f(&reps[0]);
        for r in &reps[1..] {
            for (a, b) in acc.iter_mut().zip(f(r)) {
                *a += b;
            }
        }
        acc.iter_mut().for_each(|a| *a *= scale);
        acc
    }
}

pub(crate) fn wavenumbers(model: &ModelParams, theta: &[f64]) -> Vec<Wavenumber> {
    let w = wrap_theta(theta);
    let k = model.cutoff as i64;
    (0..model.field_dim())
        .map(|i| {
            let m = model.mode(i);
            let xi: Vec<f64> = w
                .iter()
                .zip(&m)
                .map(|(t, &mi)| t + TAU * mi as f64)
                .collect();
            let alias_axes = w
                .iter()
                .zip(&m)
                .enumerate()
                .filter(|(_, (t, &mi))| (**t - PI).abs() < 1e-12 && mi == k)
                .map(|(a, _)| a)
                .collect();
            Wavenumber { xi, alias_axes }
        })
        .collect()
}

/// Plane-wave coefficients `c_m(theta) = R^(theta + 2 pi m)`, indexed
/// `[component][mode]`.
pub fn coupling_coefficients(model: &ModelParams, theta: &[f64]) -> Vec<Vec<C64>> {
    let n = model.components;
    let mut out = vec![vec![C64::new(0.0, 0.0); model.field_dim()]; n];
    if model.coupling.terms.is_empty() {
        return out;
    }
    for (i, wn) in wavenumbers(model, theta).iter().enumerate() {
        let c = wn.average(|xi| model.coupling.fourier(xi, n));
        for (a, v) in c.into_iter().enumerate() {
            out[a][i] = v;
        }
    }
    out
}

/// Assemble the Hermitian cell operator `H(theta)`.
pub fn build_h_theta(model: &ModelParams, theta: &[f64]) -> DMatrix<C64> {
    let nf = model.field_dim();
    let m = model.cell_dim();
    let mut h = DMatrix::from_element(m, m, C64::new(0.0, 0.0));
    let m0sq = model.m0 * model.m0;
    for (i, wn) in wavenumbers(model, theta).iter().enumerate() {
        let k2: f64 = wn.xi.iter().map(|x| x * x).sum();
        h[(i, i)] = C64::new(k2 + m0sq, 0.0);
    }
    let lat = model.lattice_frequency_sq(theta);
    for a in 0..model.components {
        h[(nf + a, nf + a)] = C64::new(lat, 0.0);
    }
    for (a, row) in coupling_coefficients(model, theta).iter().enumerate() {
        for (i, c) in row.iter().enumerate() {
            h[(i, nf + a)] = *c;
            h[(nf + a, i)] = c.conj();
        }
    }
    h
}

/// Closed-form `d H(theta) / d theta_axis` for every axis.
pub fn h_theta_derivatives(model: &ModelParams, theta: &[f64]) -> Vec<DMatrix<C64>> {
    let nf = model.field_dim();
    let m = model.cell_dim();
    let n = model.components;
    let wns = wavenumbers(model, theta);
    (0..model.dim)
        .map(|axis| {
            let mut dh = DMatrix::from_element(m, m, C64::new(0.0, 0.0));
            for (i, wn) in wns.iter().enumerate() {
                let v = wn.average(|xi| vec![C64::new(2.0 * xi[axis], 0.0)]);
                dh[(i, i)] = v[0];
                if !model.coupling.terms.is_empty() {
                    let g = wn.average(|xi| model.coupling.fourier_gradient(xi, n)[axis].clone());
                    for (a, c) in g.into_iter().enumerate() {
                        dh[(i, nf + a)] = c;
                        dh[(nf + a, i)] = c.conj();
                    }
                }
            }
            let s = 2.0 * theta[axis].sin();
            for a in 0..n {
                dh[(nf + a, nf + a)] = C64::new(s, 0.0);
            }
            dh
        })
        .collect()
}

/// Ascending eigenvalues and matching orthonormal eigenvector columns.
pub fn hermitian_eigen(h: &DMatrix<C64>) -> (Vec<f64>, DMatrix<C64>) {
    let eig = h.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..h.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(h.nrows(), h.ncols(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn default_gap_tol(eigenvalues: &[f64]) -> f64 {
    let top = eigenvalues.last().copied().unwrap_or(0.0).abs();
    1e-8 * (1.0 + top)
}

/// Spectral data of `H(theta)` at one quasimomentum.
#[derive(Debug, Clone)]
pub struct SpectralData {
    pub theta: Vec<f64>,
    pub h: DMatrix<C64>,
    /// `lambda_1 <= ... <= lambda_m`, all positive.
    pub eigenvalues: Vec<f64>,
    /// `omega_l = sqrt(lambda_l)`.
    pub omegas: Vec<f64>,
    /// Column `l` is `F_l`.
    pub vectors: DMatrix<C64>,
    /// Degeneracy groups as contiguous band ranges.
    pub groups: Vec<Range<usize>>,
    pub gap_tol: f64,
}

/// Decompose a Hermitian matrix; fails when the spectrum is not positive.
pub fn spectral_decompose(theta: &[f64], h: DMatrix<C64>, gap_tol: Option<f64>) -> Result<SpectralData> {
    let (eigenvalues, vectors) = hermitian_eigen(&h);
    if eigenvalues[0] <= 0.0 {
        return Err(Error::NonPositiveSpectrum {
            lambda: eigenvalues[0],
            theta: theta.to_vec(),
        });
    }
    let gap_tol = gap_tol.unwrap_or_else(|| default_gap_tol(&eigenvalues));
    let groups = degeneracy_groups(&eigenvalues, gap_tol);
    let omegas = eigenvalues.iter().map(|l| l.sqrt()).collect();
    Ok(SpectralData {
        theta: theta.to_vec(),
        h,
        eigenvalues,
        omegas,
        vectors,
        groups,
        gap_tol,
    })
}

fn degeneracy_groups(eigenvalues: &[f64], gap_tol: f64) -> Vec<Range<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    for l in 1..=eigenvalues.len() {
        if l == eigenvalues.len() || eigenvalues[l] - eigenvalues[l - 1] >= gap_tol {
            groups.push(start..l);
            start = l;
        }
    }
    groups
}

impl SpectralData {
    /// Build and decompose `H(theta)` for the model.
    pub fn at(model: &ModelParams, theta: &[f64]) -> Result<Self> {
        spectral_decompose(theta, build_h_theta(model, theta), None)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Degeneracy group containing band `l`.
    pub fn group_of(&self, l: usize) -> Range<usize> {
        self.groups
            .iter()
            .find(|g| g.contains(&l))
            .cloned()
            .expect("band index within spectrum")
    }

    pub fn is_nondegenerate(&self, l: usize) -> bool {
        self.group_of(l).len() == 1
    }

    /// Smallest gap between adjacent eigenvalues.
    pub fn min_gap(&self) -> f64 {
        self.eigenvalues
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    /// Orthogonal projector onto the span of bands `range`.
    pub fn projector(&self, range: Range<usize>) -> DMatrix<C64> {
        let f = self.vectors.columns(range.start, range.len());
        &f * f.adjoint()
    }

    /// `sum_l f(omega_l) F_l F_l^*` for a real scalar map.
    pub fn matrix_function<F>(&self, f: F) -> Result<DMatrix<C64>>
    where
        F: Fn(f64) -> f64,
    {
        let values: Vec<f64> = self
            .omegas
            .iter()
            .map(|&w| {
                let v = f(w);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::SingularFunction { omega: w })
                }
            })
            .collect::<Result<_>>()?;
        Ok(self.weighted_outer(&values))
    }

    /// `F diag(values) F^*`.
    pub(crate) fn weighted_outer(&self, values: &[f64]) -> DMatrix<C64> {
        let mut scaled = self.vectors.clone();
        for (mut col, &v) in scaled.column_iter_mut().zip(values) {
            col *= C64::new(v, 0.0);
        }
        scaled * self.vectors.adjoint()
    }
}

/// Free-function form of [`SpectralData::matrix_function`].
pub fn matrix_function<F>(spec: &SpectralData, f: F) -> Result<DMatrix<C64>>
where
    F: Fn(f64) -> f64,
{
    spec.matrix_function(f)
}

/// Finite-grid positivity certificate for `H(theta)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct R2Report {
    /// `min over grid of lambda_1(theta)`.
    pub min_eigenvalue: f64,
    pub worst_theta: Vec<f64>,
    pub pass: bool,
}

/// Lowest eigenvalue of `H(theta)` over a grid. This certifies positivity
/// of the K-truncated operator on the sampled points only.
pub fn check_r2(model: &ModelParams, grid: &ThetaGrid) -> R2Report {
    let (min_eigenvalue, worst) = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (vals, _) = hermitian_eigen(&build_h_theta(model, grid.point(i)));
            (vals[0], i)
        })
        .reduce(
            || (f64::INFINITY, usize::MAX),
            |a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a },
        );
    R2Report {
        min_eigenvalue,
        worst_theta: if worst == usize::MAX {
            Vec::new()
        } else {
            grid.point(worst).to_vec()
        },
        pass: min_eigenvalue > 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct R2PrimeReport {
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

/// Quadrature of `int_{[0,1]^d} |sum_k R(k + y)|^2 dy` against `nu0^2 m0^2 / 2`.
pub fn check_r2_prime(model: &ModelParams) -> R2PrimeReport {
    const POINTS: usize = 256;
    let d = model.dim;
    let n = model.components;
    let reach = (8.0 * model.coupling.max_width() + 8.0 + model.coupling.reach()).ceil() as i64;
    let shifts: Vec<Vec<i64>> = {
        let side = (2 * reach + 1) as usize;
        let b = crate::grid::BoxIndex::new(d, side);
        (0..b.len())
            .map(|f| b.unflatten(f).into_iter().map(|i| i as i64 - reach).collect())
            .collect()
    };
    let quad = crate::grid::BoxIndex::new(d, POINTS);
    let lhs = if model.coupling.is_zero() {
        0.0
    } else {
        (0..quad.len())
            .into_par_iter()
            .map(|flat| {
                let y: Vec<f64> = quad
                    .unflatten(flat)
                    .into_iter()
                    .map(|i| (i as f64 + 0.5) / POINTS as f64)
                    .collect();
                let mut acc = vec![0.0; n];
                for k in &shifts {
                    let x: Vec<f64> = y.iter().zip(k).map(|(a, &b)| a + b as f64).collect();
                    for (s, v) in acc.iter_mut().zip(model.coupling.value(&x, n)) {
                        *s += v;
                    }
                }
                acc.iter().map(|v| v * v).sum::<f64>()
            })
            .collect::<Vec<_>>()
            .iter()
            .sum::<f64>()
            / quad.len() as f64
    };
    let rhs = model.nu0 * model.nu0 * model.m0 * model.m0 / 2.0;
    R2PrimeReport {
        lhs,
        rhs,
        margin: rhs - lhs,
        pass: lhs < rhs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decoupled(k: usize) -> ModelParams {
        ModelParams {
            dim: 1,
            components: 1,
            m0: 1.0,
            nu0: 1.0,
            cutoff: k,
            coupling: CouplingSpec::zero(),
            cells: 8,
        }
    }

    fn gaussian(amp: f64) -> ModelParams {
        ModelParams {
            coupling: CouplingSpec::gaussian(vec![amp], 0.2, vec![0.0]),
            cutoff: 2,
            ..decoupled(2)
        }
    }

    /// `int_0^1 e^{2 pi i m y} e^{i y theta} sum_{|k|<=40} e^{i k theta} R(k+y) dy`
    /// by composite Simpson quadrature.
    fn quadrature_coefficient(model: &ModelParams, theta: f64, m: i64) -> C64 {
        let steps = 4000;
        let h = 1.0 / steps as f64;
        let f = |y: f64| {
            let mut s = C64::new(0.0, 0.0);
            for k in -40..=40 {
                let r = model.coupling.value(&[k as f64 + y], 1)[0];
                s += C64::from_polar(r, k as f64 * theta);
            }
            s * C64::from_polar(1.0, TAU * m as f64 * y + y * theta)
        };
        let mut acc = f(0.0) + f(1.0);
        for i in 1..steps {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += f(i as f64 * h) * w;
        }
        acc * (h / 3.0)
    }

    #[test]
    fn zero_coupling_has_zero_coefficients() {
        let c = coupling_coefficients(&decoupled(3), &[0.7]);
        assert!(c.iter().flatten().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn gaussian_coefficients_match_quadrature() {
        let model = gaussian(0.1);
        let c0 = coupling_coefficients(&model, &[0.0])[0][model.mode_index(&[0])];
        assert!((c0.re - 0.050_132_6).abs() < 1e-7, "{c0}");
        let q0 = quadrature_coefficient(&model, 0.0, 0);
        assert!((c0 - q0).norm() < 1e-10);

        let c1 = coupling_coefficients(&model, &[PI])[0][model.mode_index(&[1])];
        let expected = 0.1 * TAU.sqrt() * 0.2 * (-0.02 * 9.0 * PI * PI).exp();
        assert!((c1.norm() - expected).abs() < 1e-12);
        assert!((c1.norm() - 0.008_484).abs() < 1e-6);
        let q1 = quadrature_coefficient(&model, PI, 1);
        assert!((c1 - q1).norm() < 1e-10, "{c1} vs {q1}");
    }

    #[test]
    fn decoupled_h_is_diagonal_closed_form() {
        let h = build_h_theta(&decoupled(1), &[0.0]);
        let diag: Vec<f64> = (0..4).map(|i| h[(i, i)].re).collect();
        let tp2 = TAU * TAU;
        assert_eq!(diag, vec![tp2 + 1.0, 1.0, tp2 + 1.0, 1.0]);
        let off: f64 = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| h[(i, j)].norm())
            .sum();
        assert_eq!(off, 0.0);
        let h = build_h_theta(&decoupled(0), &[PI]);
        assert!((h[(1, 1)].re - 5.0).abs() < 1e-15);
    }

    #[test]
    fn coupled_h_embeds_coefficients_and_is_hermitian() {
        let model = gaussian(0.1);
        let theta = [1.1];
        let h = build_h_theta(&model, &theta);
        let c = coupling_coefficients(&model, &theta);
        let nf = model.field_dim();
        for i in 0..nf {
            assert_eq!(h[(i, nf)], c[0][i]);
        }
        assert_eq!(&h - h.adjoint(), DMatrix::zeros(h.nrows(), h.ncols()));
    }

    #[test]
    fn scalar_decomposition() {
        let h = DMatrix::from_element(1, 1, C64::new(4.0, 0.0));
        let s = spectral_decompose(&[0.0], h, None).unwrap();
        assert_eq!(s.eigenvalues, vec![4.0]);
        assert_eq!(s.omegas, vec![2.0]);
        assert!((s.vectors[(0, 0)].norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn field_band_at_pi_and_degenerate_pair() {
        let mut model = decoupled(0);
        let s = SpectralData::at(&model, &[PI]).unwrap();
        let field = (PI * PI + 1.0).sqrt();
        assert!(s.omegas.iter().any(|w| (w - field).abs() < 1e-12));
        assert!((field - 3.296_908_3).abs() < 1e-7);

        model.cutoff = 1;
        let s = SpectralData::at(&model, &[PI]).unwrap();
        let pair = s
            .groups
            .iter()
            .find(|g| (s.eigenvalues[g.start] - (PI * PI + 1.0)).abs() < 1e-9)
            .unwrap();
        assert_eq!(pair.len(), 2);
    }

    #[test]
    fn non_positive_spectrum_is_reported() {
        let h = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            C64::new(-1.0, 0.0),
            C64::new(2.0, 0.0),
        ]));
        match spectral_decompose(&[0.3], h, None) {
            Err(Error::NonPositiveSpectrum { lambda, theta }) => {
                assert_eq!(lambda, -1.0);
                assert_eq!(theta, vec![0.3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matrix_function_identities() {
        let model = gaussian(0.3);
        let s = SpectralData::at(&model, &[0.9]).unwrap();
        let scale = s.h.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let rebuilt = s.matrix_function(|w| w * w).unwrap();
        assert!((&rebuilt - &s.h).iter().all(|v| v.norm() <= 1e-10 * scale));

        let id = s.matrix_function(|w| (w * 0.0).cos()).unwrap();
        let eye = DMatrix::<C64>::identity(s.dim(), s.dim());
        assert!((&id - &eye).iter().all(|v| v.norm() < 1e-12));

        let inv = s.matrix_function(|w| 1.0 / (w * w)).unwrap();
        let solved = s.h.clone().lu().solve(&eye).unwrap();
        assert!((&inv - &solved).iter().all(|v| v.norm() < 1e-12));
        assert!((&inv * &s.h - &eye).iter().all(|v| v.norm() < 1e-10));
    }

    #[test]
    fn singular_function_is_rejected() {
        let s = SpectralData::at(&decoupled(1), &[0.4]).unwrap();
        assert!(matches!(
            s.matrix_function(|_| f64::INFINITY),
            Err(Error::SingularFunction { .. })
        ));
    }

    #[test]
    fn r2_on_decoupled_model() {
        let r = check_r2(&decoupled(2), &ThetaGrid::uniform(1, 64));
        assert!((r.min_eigenvalue - 1.0).abs() < 1e-12);
        assert!(r.pass);
        let single = check_r2(&decoupled(2), &ThetaGrid::single(&[0.0]));
        assert!((single.min_eigenvalue - 1.0).abs() < 1e-12);
    }

    #[test]
    fn r2_detects_strong_coupling() {
        let model = gaussian(10.0);
        let r = check_r2(&model, &ThetaGrid::uniform(1, 32));
        let (vals, _) = hermitian_eigen(&build_h_theta(&model, &r.worst_theta));
        assert!(vals[0] < 0.0);
        assert!(!r.pass);
        assert_eq!(vals[0], r.min_eigenvalue);
    }

    #[test]
    fn r2_prime_examples() {
        let zero = check_r2_prime(&decoupled(1));
        assert_eq!(zero.lhs, 0.0);
        assert!(zero.pass);

        // periodised Gaussian: sum_j A^2 sigma sqrt(pi) exp(-j^2 / (4 sigma^2))
        let weak = check_r2_prime(&gaussian(0.1));
        let closed: f64 = (-5..=5)
            .map(|j: i32| 0.01 * 0.2 * PI.sqrt() * (-(j * j) as f64 / 0.16).exp())
            .sum();
        assert!((weak.lhs - closed).abs() < 1e-6 * closed, "{}", weak.lhs);
        assert!(weak.pass);

        let strong = check_r2_prime(&gaussian(10.0));
        assert!((strong.lhs - 1e4 * closed).abs() < 1e-6 * 1e4 * closed);
        assert!((strong.lhs - 35.59).abs() < 0.01);
        assert!(!strong.pass);
    }
}
