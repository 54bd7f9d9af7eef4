//! Band-structure sweeps and dispersion diagnostics.
//!
//! Bands are reported in sorted order at every grid point; no attempt is made
//! to continue them analytically through crossings. Crossing neighbourhoods
//! are flagged instead and excluded from velocity/Hessian stencils.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::bloch_cell::{
    build_h_theta, check_r2_prime, default_gap_tol, h_theta_derivatives, CouplingSpec,
    ModelParams, SpectralData,
};
use crate::error::{Error, Result};
use crate::grid::ThetaGrid;

/// Finite-difference step for Hessians.
pub const HESSIAN_STEP: f64 = 1e-4;

/// Sorted band data on a grid.
#[derive(Debug, Clone)]
pub struct Bands {
    pub grid: ThetaGrid,
    /// `omegas[g][l]`.
    pub omegas: Vec<Vec<f64>>,
    /// Smallest adjacent frequency gap at each grid point.
    pub gaps: Vec<f64>,
    /// Group velocity, `None` where the band is degenerate.
    pub velocities: Vec<Vec<Option<Vec<f64>>>>,
    /// `D_l(theta)`, `None` where the stencil touches a degeneracy.
    pub hessian_dets: Vec<Vec<Option<f64>>>,
}

impl Bands {
    pub fn band_count(&self) -> usize {
        self.omegas.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.omegas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }

    /// Adjacent frequency gap `omega_{l+1} - omega_l` at grid point `g`.
    pub fn pair_gap(&self, g: usize, l: usize) -> f64 {
        self.omegas[g][l + 1] - self.omegas[g][l]
    }

    /// The `count` lowest bands. Gaps still include the spacing to the first
    /// dropped band.
    pub fn lowest(&self, count: usize) -> Bands {
        let count = count.min(self.band_count());
        let total = self.band_count();
        Bands {
            grid: self.grid.clone(),
            omegas: self.omegas.iter().map(|r| r[..count].to_vec()).collect(),
            gaps: (0..self.len())
                .map(|g| {
                    (0..count.min(total.saturating_sub(1)))
                        .map(|l| self.pair_gap(g, l))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect(),
            velocities: self.velocities.iter().map(|r| r[..count].to_vec()).collect(),
            hessian_dets: self.hessian_dets.iter().map(|r| r[..count].to_vec()).collect(),
        }
    }
}

/// Eigenvalues only, ascending.
fn eigenvalues(model: &ModelParams, theta: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = build_h_theta(model, theta)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

fn nondegenerate_in(values: &[f64], l: usize) -> bool {
    let tol = default_gap_tol(values);
    let below = l == 0 || values[l] - values[l - 1] >= tol;
    let above = l + 1 == values.len() || values[l + 1] - values[l] >= tol;
    below && above
}

/// Hellmann-Feynman gradient `(F_l, dH F_l) / (2 omega_l)` from precomputed data.
fn velocity_from(spec: &SpectralData, derivs: &[nalgebra::DMatrix<crate::C64>], l: usize) -> Vec<f64> {
    let f = spec.vectors.column(l);
    derivs
        .iter()
        .map(|dh| (f.adjoint() * dh * f)[(0, 0)].re / (2.0 * spec.omegas[l]))
        .collect()
}

/// Group velocity `grad omega_l(theta)`.
pub fn group_velocity(model: &ModelParams, theta: &[f64], l: usize) -> Result<Vec<f64>> {
    let spec = SpectralData::at(model, theta)?;
    if !spec.is_nondegenerate(l) {
        return Err(Error::DegenerateBand {
            theta: theta.to_vec(),
            band: l,
        });
    }
    Ok(velocity_from(&spec, &h_theta_derivatives(model, theta), l))
}

/// Stencil offsets (in units of the step) for a second-difference Hessian.
fn stencil(dim: usize) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dim]];
    for i in 0..dim {
        for s in [1.0, -1.0] {
            let mut p = vec![0.0; dim];
            p[i] = s;
            pts.push(p);
        }
        for j in (i + 1)..dim {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut p = vec![0.0; dim];
                p[i] = si;
                p[j] = sj;
                pts.push(p);
            }
        }
    }
    pts
}

/// Hessians of every band at `theta` for one step; `None` where degenerate.
fn hessians_at_step(model: &ModelParams, theta: &[f64], step: f64) -> Result<Vec<Option<Vec<f64>>>> {
    let d = model.dim;
    let offsets = stencil(d);
    let mut values = Vec::with_capacity(offsets.len());
    for off in &offsets {
        let p: Vec<f64> = theta.iter().zip(off).map(|(t, o)| t + o * step).collect();
        let ev = eigenvalues(model, &p);
        if ev[0] <= 0.0 {
            return Err(Error::NonPositiveSpectrum {
                lambda: ev[0],
                theta: p,
            });
        }
        values.push(ev);
    }
    let find = |off: &[f64]| offsets.iter().position(|o| o == off).expect("stencil point");
    let m = values[0].len();
    let mut out = Vec::with_capacity(m);
    for l in 0..m {
        if !values.iter().all(|v| nondegenerate_in(v, l)) {
            out.push(None);
            continue;
        }
        let w = |idx: usize| values[idx][l].sqrt();
        let centre = w(0);
        let mut hess = vec![0.0; d * d];
        for i in 0..d {
            let mut plus = vec![0.0; d];
            plus[i] = 1.0;
            let mut minus = vec![0.0; d];
            minus[i] = -1.0;
            hess[i * d + i] = (w(find(&plus)) - 2.0 * centre + w(find(&minus))) / (step * step);
            for j in (i + 1)..d {
                let mut pp = vec![0.0; d];
                pp[i] = 1.0;
                pp[j] = 1.0;
                let mut pm = pp.clone();
                pm[j] = -1.0;
                let mut mp = pp.clone();
                mp[i] = -1.0;
                let mut mm = mp.clone();
                mm[j] = -1.0;
                let v = (w(find(&pp)) - w(find(&pm)) - w(find(&mp)) + w(find(&mm)))
                    / (4.0 * step * step);
                hess[i * d + j] = v;
                hess[j * d + i] = v;
            }
        }
        out.push(Some(hess));
    }
    Ok(out)
}

fn det(h: &[f64], d: usize) -> f64 {
    match d {
        1 => h[0],
        2 => h[0] * h[3] - h[1] * h[2],
        _ => nalgebra::DMatrix::from_row_slice(d, d, h).determinant(),
    }
}

/// `D_l` for every band at `theta`, one Richardson step on the second
/// differences with steps `h` and `h/2`.
fn hessian_dets_at(model: &ModelParams, theta: &[f64]) -> Result<Vec<Option<f64>>> {
    let coarse = hessians_at_step(model, theta, HESSIAN_STEP)?;
    let fine = hessians_at_step(model, theta, HESSIAN_STEP / 2.0)?;
    Ok(coarse
        .into_iter()
        .zip(fine)
        .map(|(c, f)| match (c, f) {
            (Some(c), Some(f)) => {
                let h: Vec<f64> = c.iter().zip(&f).map(|(a, b)| (4.0 * b - a) / 3.0).collect();
                Some(det(&h, model.dim))
            }
            _ => None,
        })
        .collect())
}

/// Determinant of the Hessian of `omega_l` at `theta`.
pub fn hessian_det(model: &ModelParams, theta: &[f64], l: usize) -> Result<f64> {
    hessian_dets_at(model, theta)?[l].ok_or_else(|| Error::DegenerateBand {
        theta: theta.to_vec(),
        band: l,
    })
}

/// Sweep a grid and collate sorted bands, velocities and Hessian determinants.
pub fn band_structure(model: &ModelParams, grid: &ThetaGrid) -> Result<Bands> {
    let rows: Vec<_> = (0..grid.len())
        .into_par_iter()
        .map(|g| -> Result<_> {
            let theta = grid.point(g);
            let spec = SpectralData::at(model, theta)?;
            let derivs = h_theta_derivatives(model, theta);
            let vel = (0..spec.dim())
                .map(|l| spec.is_nondegenerate(l).then(|| velocity_from(&spec, &derivs, l)))
                .collect();
            let gap = spec
                .omegas
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(f64::INFINITY, f64::min);
            let hd = hessian_dets_at(model, theta)?;
            Ok((spec.omegas, gap, vel, hd))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut bands = Bands {
        grid: grid.clone(),
        omegas: Vec::with_capacity(rows.len()),
        gaps: Vec::with_capacity(rows.len()),
        velocities: Vec::with_capacity(rows.len()),
        hessian_dets: Vec::with_capacity(rows.len()),
    };
    for (w, gap, v, h) in rows {
        bands.omegas.push(w);
        bands.gaps.push(gap);
        bands.velocities.push(v);
        bands.hessian_dets.push(h);
    }
    Ok(bands)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairVariance {
    pub l: usize,
    pub l2: usize,
    pub var_sum: f64,
    /// `None` for the diagonal pair or when the two bands coincide identically.
    pub var_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct E1E2Report {
    /// Per band: fraction of evaluated grid points with `|D_l| < tol`.
    pub e1_fractions: Vec<f64>,
    pub e1_pass: bool,
    pub pairs: Vec<PairVariance>,
    pub min_pair_variance: f64,
    pub e2_pass: bool,
}

fn variance(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Grid-measure estimates for the non-degeneracy conditions on the bands.
///
/// The Hessian condition passes when every band has `|D_l| < tol` on less than
/// 5% of its evaluated points. The phase condition requires the grid variance
/// of `omega_l + omega_l'` (all pairs, including `l = l'`) and of
/// `omega_l - omega_l'` (distinct, not identically equal bands) to exceed `tol`.
pub fn check_e1_e2(bands: &Bands, tol: f64) -> E1E2Report {
    let m = bands.band_count();
    let e1_fractions: Vec<f64> = (0..m)
        .map(|l| {
            let evaluated: Vec<f64> = bands
                .hessian_dets
                .iter()
                .filter_map(|row| row.get(l).copied().flatten())
                .collect();
            if evaluated.is_empty() {
                0.0
            } else {
                evaluated.iter().filter(|d| d.abs() < tol).count() as f64 / evaluated.len() as f64
            }
        })
        .collect();
    let e1_pass = e1_fractions.iter().all(|&f| f < 0.05);

    let mut pairs = Vec::new();
    for l in 0..m {
        for l2 in l..m {
            let col = |b: usize| bands.omegas.iter().map(move |row| row[b]);
            let var_sum = variance(col(l).zip(col(l2)).map(|(a, b)| a + b));
            let var_diff = if l == l2 {
                None
            } else {
                let identical = col(l).zip(col(l2)).all(|(a, b)| (a - b).abs() < tol);
                (!identical).then(|| variance(col(l).zip(col(l2)).map(|(a, b)| a - b)))
            };
            pairs.push(PairVariance {
                l,
                l2,
                var_sum,
                var_diff,
            });
        }
    }
    let min_pair_variance = pairs
        .iter()
        .flat_map(|p| std::iter::once(p.var_sum).chain(p.var_diff))
        .fold(f64::INFINITY, f64::min);
    let e2_pass = min_pair_variance > tol;
    E1E2Report {
        e1_fractions,
        e1_pass,
        pairs,
        min_pair_variance,
        e2_pass,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupSpeed {
    pub max_speed: f64,
    /// `1.1 * max_speed`.
    pub with_margin: f64,
}

/// `max |grad omega_l(theta)|` over all evaluated samples of bands `< band_limit`.
pub fn max_group_speed_bands(bands: &Bands, band_limit: Option<usize>) -> GroupSpeed {
    let limit = band_limit.unwrap_or(usize::MAX);
    let max_speed = bands
        .velocities
        .iter()
        .flat_map(|row| row.iter().take(limit).flatten())
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    GroupSpeed {
        max_speed,
        with_margin: 1.1 * max_speed,
    }
}

pub fn max_group_speed(bands: &Bands) -> GroupSpeed {
    max_group_speed_bands(bands, None)
}

/// Grid points flagged as critical for the bands `< band_limit`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalPoints {
    /// Resolution-limited crossings between adjacent bands.
    pub crossing: Vec<bool>,
    /// Sign changes or near-zeros of `D_l`.
    pub hessian: Vec<bool>,
}

impl CriticalPoints {
    pub fn any(&self, g: usize) -> bool {
        self.crossing[g] || self.hessian[g]
    }

    pub fn flagged(&self) -> Vec<usize> {
        (0..self.crossing.len()).filter(|&g| self.any(g)).collect()
    }
}

/// Flag crossings among the pairs `(l, l+1)` with `l < band_limit` (so the
/// boundary pair is included) and Hessian zeros of bands `< band_limit`.
///
/// A pair is flagged at `g` when its gap is below the degeneracy tolerance, or
/// when the gap is a local minimum smaller than its variation across one grid
/// cell (the crossing is not resolved by the grid).
pub fn critical_points(bands: &Bands, band_limit: usize, hessian_tol: f64) -> CriticalPoints {
    let n = bands.len();
    let m = bands.band_count();
    let pair_limit = band_limit.min(m.saturating_sub(1));
    let mut crossing = vec![false; n];
    let mut hessian = vec![false; n];
    for g in 0..n {
        let nbs = bands.grid.neighbours(g);
        for l in 0..pair_limit {
            let gap = bands.pair_gap(g, l);
            let lam_tol = default_gap_tol(&bands.omegas[g].iter().map(|w| w * w).collect::<Vec<_>>());
            if gap * (bands.omegas[g][l] + bands.omegas[g][l + 1]) < lam_tol {
                crossing[g] = true;
                continue;
            }
            if nbs.is_empty() {
                continue;
            }
            let local_min = nbs.iter().all(|&b| gap <= bands.pair_gap(b, l));
            let variation = nbs
                .iter()
                .map(|&b| (bands.pair_gap(b, l) - gap).abs())
                .fold(0.0, f64::max);
            if local_min && gap < variation {
                crossing[g] = true;
            }
        }
        for l in 0..band_limit.min(m) {
            match bands.hessian_dets[g][l] {
                None => hessian[g] = true,
                Some(dv) if dv.abs() < hessian_tol => hessian[g] = true,
                Some(dv) => {
                    for &b in &nbs {
                        if let Some(other) = bands.hessian_dets[b][l] {
                            if other.signum() != dv.signum() {
                                hessian[g] = true;
                            }
                        }
                    }
                }
            }
        }
    }
    CriticalPoints { crossing, hessian }
}

/// Grid points where some band `< band_limit` has a group-velocity zero not
/// resolved by the grid: `|v_l(g)|` is no larger than its change to a
/// neighbour. Degenerate samples count as stationary.
pub fn stationary_points(bands: &Bands, band_limit: usize) -> Vec<bool> {
    let speed = |g: usize, l: usize| {
        bands.velocities[g][l]
            .as_ref()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let limit = band_limit.min(bands.band_count());
    (0..bands.len())
        .map(|g| {
            let nbs = bands.grid.neighbours(g);
            (0..limit).any(|l| match speed(g, l) {
                None => true,
                Some(s) => {
                    let change = nbs
                        .iter()
                        .filter_map(|&b| speed(b, l).map(|o| (o - s).abs()))
                        .fold(0.0, f64::max);
                    s <= change
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ScanVerdict {
    Evaluated {
        e1_pass: bool,
        e2_pass: bool,
        max_e1_fraction: f64,
        min_pair_variance: f64,
    },
    Skipped {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRow {
    pub amplitudes: Vec<f64>,
    pub verdict: ScanVerdict,
}

/// Evaluate the band conditions for `R_C = sum_s C_s R_s` over a list of
/// amplitude vectors `C`. Rows whose coupling violates the integral
/// positivity criterion are skipped.
pub fn scan_coupling(
    template: &ModelParams,
    bases: &[CouplingSpec],
    amplitudes: &[Vec<f64>],
    grid: &ThetaGrid,
    e1_tol: f64,
    e2_tol: f64,
) -> Result<Vec<ScanRow>> {
    amplitudes
        .iter()
        .map(|c| {
            if c.len() != bases.len() {
                return Err(Error::DimensionMismatch(format!(
                    "amplitude vector has {} entries for {} base couplings",
                    c.len(),
                    bases.len()
                )));
            }
            let parts: Vec<(f64, &CouplingSpec)> = c.iter().copied().zip(bases.iter()).collect();
            let model = ModelParams {
                coupling: CouplingSpec::combine(&parts),
                ..template.clone()
            };
            let r2p = check_r2_prime(&model);
            if !r2p.pass {
                return Ok(ScanRow {
                    amplitudes: c.clone(),
                    verdict: ScanVerdict::Skipped {
                        reason: format!("integral criterion fails: {:.4e} >= {:.4e}", r2p.lhs, r2p.rhs),
                    },
                });
            }
            let bands = band_structure(&model, grid)?;
            let report = check_e1_e2(&bands, e2_tol);
            let e1 = check_e1_e2(&bands, e1_tol);
            Ok(ScanRow {
                amplitudes: c.clone(),
                verdict: ScanVerdict::Evaluated {
                    e1_pass: e1.e1_pass,
                    e2_pass: report.e2_pass,
                    max_e1_fraction: e1.e1_fractions.iter().copied().fold(0.0, f64::max),
                    min_pair_variance: report.min_pair_variance,
                },
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.17e}"))
}

/// CSV with columns `theta[..d], band_index, omega, velocity[..d], hessian_det, gap`.
pub fn write_bands_csv<W: Write>(bands: &Bands, out: W) -> csv::Result<()> {
    let d = bands.grid.dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..d).map(|i| format!("theta{i}")).collect();
    header.push("band_index".into());
    header.push("omega".into());
    header.extend((0..d).map(|i| format!("velocity{i}")));
    header.push("hessian_det".into());
    header.push("gap".into());
    w.write_record(&header)?;
    for g in 0..bands.len() {
        for l in 0..bands.band_count() {
            let mut rec: Vec<String> = bands.grid.point(g).iter().map(|t| format!("{t:.17e}")).collect();
            rec.push(l.to_string());
            rec.push(format!("{:.17e}", bands.omegas[g][l]));
            match &bands.velocities[g][l] {
                Some(v) => rec.extend(v.iter().map(|x| format!("{x:.17e}"))),
                None => rec.extend((0..d).map(|_| "nan".to_string())),
            }
            rec.push(fmt_opt(bands.hessian_dets[g][l]));
            rec.push(format!("{:.17e}", bands.gaps[g]));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{PI, TAU};

    fn model(k: usize, amp: f64) -> ModelParams {
        ModelParams {
            dim: 1,
            components: 1,
            m0: 1.0,
            nu0: 1.0,
            cutoff: k,
            coupling: if amp == 0.0 {
                CouplingSpec::zero()
            } else {
                CouplingSpec::gaussian(vec![amp], 0.2, vec![0.0])
            },
            cells: 8,
        }
    }

    fn lattice_band(theta: f64) -> f64 {
        (3.0 - 2.0 * theta.cos()).sqrt()
    }

    fn band_of(model: &ModelParams, theta: f64, target: f64) -> usize {
        let s = SpectralData::at(model, &[theta]).unwrap();
        s.omegas
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
            .unwrap()
            .0
    }

    #[test]
    fn decoupled_bands_match_closed_forms() {
        let m = model(1, 0.0);
        let bands = band_structure(&m, &ThetaGrid::uniform(1, 256)).unwrap();
        for g in 0..bands.len() {
            let t = bands.grid.point(g)[0];
            let tw = crate::grid::wrap_angle(t);
            let mut expected: Vec<f64> = (-1..=1)
                .map(|k| ((TAU * k as f64 + tw).powi(2) + 1.0).sqrt())
                .chain(std::iter::once(lattice_band(t)))
                .collect();
            expected.sort_by(f64::total_cmp);
            for (a, b) in bands.omegas[g].iter().zip(&expected) {
                assert!((a - b).abs() <= 1e-12 * b, "{a} vs {b} at {t}");
            }
        }
    }

    #[test]
    fn single_point_grid() {
        let bands = band_structure(&model(1, 0.0), &ThetaGrid::single(&[0.0])).unwrap();
        assert_eq!(bands.len(), 1);
        assert_eq!(bands.band_count(), 4);
    }

    #[test]
    fn weak_coupling_is_second_order_perturbation() {
        let m = model(2, 0.01);
        let theta = 1.3;
        let coeffs = crate::bloch_cell::coupling_coefficients(&m, &[theta]);
        let lat = m.lattice_frequency_sq(&[theta]);
        let field: Vec<f64> = (0..m.field_dim()).map(|i| m.field_frequency_sq(&[theta], i)).collect();
        let s = SpectralData::at(&m, &[theta]).unwrap();
        // lattice level shifted by sum |c|^2 / (lat - field_i)
        let shift: f64 = coeffs[0]
            .iter()
            .zip(&field)
            .map(|(c, f)| c.norm_sqr() / (lat - f))
            .sum();
        let nearest = s
            .eigenvalues
            .iter()
            .min_by(|a, b| (*a - lat).abs().total_cmp(&(*b - lat).abs()))
            .unwrap();
        assert!((nearest - (lat + shift)).abs() < 1e-7, "{nearest} {lat} {shift}");
        assert!(shift.abs() > 1e-5 && shift.abs() < 1e-3);
    }

    #[test]
    fn field_band_velocity() {
        let m = model(1, 0.0);
        let l = band_of(&m, PI / 2.0, ((PI / 2.0).powi(2) + 1.0).sqrt());
        let v = group_velocity(&m, &[PI / 2.0], l).unwrap()[0];
        let fd = {
            let f = |t: f64| (t * t + 1.0_f64).sqrt();
            (f(PI / 2.0 + 1e-5) - f(PI / 2.0 - 1e-5)) / 2e-5
        };
        assert!((v - fd).abs() < 1e-8);
        assert!((v - 0.843_564).abs() < 1e-6);
    }

    #[test]
    fn lattice_velocity_vanishes_at_zero() {
        let m = model(1, 0.0);
        // at theta = 0 the lattice band touches field mode m = 0, so use a tiny offset
        let l = band_of(&m, 0.3, lattice_band(0.3));
        let v = group_velocity(&m, &[0.3], l).unwrap()[0];
        let exact = 0.3f64.sin() / lattice_band(0.3);
        assert!((v - exact).abs() < 1e-12);
        assert!(matches!(
            group_velocity(&m, &[0.0], 0),
            Err(Error::DegenerateBand { .. })
        ));
    }

    #[test]
    fn coupled_velocity_matches_finite_difference() {
        let m = model(3, 0.1);
        for &theta in &[0.4, 1.2, 2.5, 4.0] {
            let s = SpectralData::at(&m, &[theta]).unwrap();
            for l in 0..s.dim() {
                let Ok(v) = group_velocity(&m, &[theta], l) else { continue };
                let h = 1e-5;
                let wp = SpectralData::at(&m, &[theta + h]).unwrap().omegas[l];
                let wm = SpectralData::at(&m, &[theta - h]).unwrap().omegas[l];
                let fd = (wp - wm) / (2.0 * h);
                assert!((v[0] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "l={l} {v:?} {fd}");
            }
        }
    }

    #[test]
    fn hessian_closed_forms() {
        let m = model(1, 0.0);
        // field band m = 0 at theta = 0 is degenerate with the lattice band, so
        // evaluate the closed form m0^2 / omega^3 away from zero as well.
        let theta = 0.5f64;
        let w = (theta * theta + 1.0).sqrt();
        let l = band_of(&m, theta, w);
        let d = hessian_det(&m, &[theta], l).unwrap();
        assert!((d - 1.0 / w.powi(3)).abs() < 1e-5, "{d}");

        let m2 = ModelParams { nu0: 1.0, m0: 3.0, ..m.clone() };
        let d0 = hessian_det(&m2, &[0.0], 0).unwrap();
        assert!((d0 - 1.0).abs() < 1e-5, "lattice {d0}");
        let m3 = ModelParams { nu0: 3.0, m0: 1.0, ..m };
        let f0 = hessian_det(&m3, &[0.0], 0).unwrap();
        assert!((f0 - 1.0).abs() < 1e-5, "field {f0}");
    }

    #[test]
    fn lattice_hessian_changes_sign() {
        // separate the lattice band from the field bands
        let m = ModelParams { m0: 3.0, ..model(1, 0.0) };
        let grid = ThetaGrid::uniform(1, 512);
        let bands = band_structure(&m, &grid).unwrap();
        let interior: Vec<f64> = (1..256).map(|g| bands.hessian_dets[g][0].unwrap()).collect();
        assert!(interior.windows(2).any(|w| w[0].signum() != w[1].signum()));
    }

    #[test]
    fn e2_holds_when_decoupled_and_fails_for_constant_band() {
        let bands = band_structure(&model(1, 0.0), &ThetaGrid::uniform(1, 128)).unwrap();
        let r = check_e1_e2(&bands, 1e-8);
        assert!(r.e2_pass);

        let flat = Bands {
            grid: ThetaGrid::uniform(1, 4),
            omegas: vec![vec![1.0]; 4],
            gaps: vec![f64::INFINITY; 4],
            velocities: vec![vec![Some(vec![0.0])]; 4],
            hessian_dets: vec![vec![Some(0.0)]; 4],
        };
        let r = check_e1_e2(&flat, 1e-8);
        assert_eq!(r.min_pair_variance, 0.0);
        assert!(!r.e2_pass);
    }

    #[test]
    fn weakly_coupled_conditions() {
        let bands = band_structure(&model(2, 0.05), &ThetaGrid::uniform(1, 128)).unwrap();
        let r = check_e1_e2(&bands, 1e-8);
        assert!(r.e2_pass, "{}", r.min_pair_variance);
        assert!(r.e1_pass, "{:?}", r.e1_fractions);
    }

    #[test]
    fn group_speed_bounds() {
        let m = ModelParams { nu0: 1.0, m0: 1.0, ..model(2, 0.0) };
        let bands = band_structure(&m, &ThetaGrid::uniform(1, 256)).unwrap();
        let g = max_group_speed(&bands);
        assert!(g.max_speed < 1.0);
        assert!((g.with_margin - 1.1 * g.max_speed).abs() < 1e-15);

        // lattice band alone: dense scan of sin / sqrt(3 - 2 cos)
        let lat = ModelParams { m0: 5.0, ..m };
        let bands = band_structure(&lat, &ThetaGrid::uniform(1, 1024)).unwrap();
        let g = max_group_speed_bands(&bands, Some(1));
        let dense = (0..10_000)
            .map(|i| {
                let t = TAU * i as f64 / 10_000.0;
                (t.sin() / lattice_band(t)).abs()
            })
            .fold(0.0, f64::max);
        assert!((g.max_speed - dense).abs() < 1e-4, "{} {dense}", g.max_speed);

        let one = band_structure(&lat, &ThetaGrid::single(&[1.0])).unwrap();
        let v = one.velocities[0][0].as_ref().unwrap()[0].abs();
        assert_eq!(max_group_speed_bands(&one, Some(1)).max_speed, v);
    }

    #[test]
    fn crossing_at_pi_is_detected() {
        let m = model(1, 0.0);
        let bands = band_structure(&m, &ThetaGrid::uniform(1, 64)).unwrap();
        let crit = critical_points(&bands, 3, 1e-6);
        assert!(crit.crossing[32]);
        // an odd grid misses pi by half a cell but still flags a neighbour
        let grid = ThetaGrid::uniform(1, 63);
        let bands = band_structure(&m, &grid).unwrap();
        let crit = critical_points(&bands, 3, 1e-6);
        let near: Vec<usize> = crit
            .flagged()
            .into_iter()
            .filter(|&g| crate::grid::circle_distance(grid.point(g)[0], PI) < TAU / 63.0)
            .collect();
        assert!(!near.is_empty());
    }

    #[test]
    fn sorted_bands_are_lipschitz_and_symmetric() {
        let m = ModelParams { cutoff: 3, ..model(3, 0.1) };
        let n = 128;
        let bands = band_structure(&m, &ThetaGrid::uniform(1, n)).unwrap();
        let gamma = max_group_speed(&bands).max_speed;
        let dt = TAU / n as f64;
        for g in 0..n {
            let next = (g + 1) % n;
            for l in 0..bands.band_count() {
                let jump = (bands.omegas[next][l] - bands.omegas[g][l]).abs();
                assert!(jump <= 2.0 * gamma * dt, "g={g} l={l} jump={jump}");
            }
            let mirror = (n - g) % n;
            for l in 0..bands.band_count() {
                let a = bands.omegas[g][l];
                let b = bands.omegas[mirror][l];
                assert!((a - b).abs() <= 1e-10 * a, "{a} {b}");
            }
        }
    }

    #[test]
    fn scan_marks_rows() {
        let base = CouplingSpec::gaussian(vec![1.0], 0.2, vec![0.0]);
        let rows = scan_coupling(
            &model(1, 0.0),
            &[base],
            &[vec![0.0], vec![0.05], vec![10.0]],
            &ThetaGrid::uniform(1, 64),
            1e-3,
            1e-8,
        )
        .unwrap();
        assert!(matches!(rows[0].verdict, ScanVerdict::Evaluated { e2_pass: true, e1_pass: true, .. }));
        assert!(matches!(rows[1].verdict, ScanVerdict::Evaluated { e2_pass: true, .. }));
        assert!(matches!(rows[2].verdict, ScanVerdict::Skipped { .. }));
    }

    #[test]
    fn csv_has_expected_columns() {
        let bands = band_structure(&model(0, 0.0), &ThetaGrid::uniform(1, 4)).unwrap();
        let mut buf = Vec::new();
        write_bands_csv(&bands, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "theta0,band_index,omega,velocity0,hessian_det,gap");
        assert_eq!(lines.count(), 8);
    }
}
