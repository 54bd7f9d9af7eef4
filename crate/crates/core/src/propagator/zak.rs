//! Physical lattice states and their Zak (Bloch-Floquet) transforms.
//!
//! A state lives on a periodic crystal of `N^d` cells; each cell carries the
//! field on `P^d` collocation points `y_p = p / P` and `n` displacement
//! components. The forward transform is a DFT across cells with kernel
//! `exp(+i k.theta)`, the twist `exp(i y.theta')`, and a square DFT from
//! collocation samples to the `P^d` plane-wave coefficients.

use std::f64::consts::TAU;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::bloch_cell::ModelParams;
use crate::error::{Error, Result};
use crate::grid::{wrap_angle, BoxIndex};
use crate::C64;

/// Largest tolerated relative reality defect for [`zak_inverse`].
pub const REALITY_TOL: f64 = 1e-8;

/// Physical-space data `(psi, u, pi, v)` on a finite periodic crystal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeState {
    pub dim: usize,
    pub components: usize,
    /// Collocation points per axis inside a cell.
    pub samples: usize,
    pub cells: usize,
    /// `psi[cell * P^d + intra]`.
    pub psi: Vec<f64>,
    /// `u[cell * n + a]`.
    pub u: Vec<f64>,
    pub pi: Vec<f64>,
    pub v: Vec<f64>,
}

impl LatticeState {
    pub fn zeros(model: &ModelParams) -> Self {
        let cells = model.cell_count();
        let field = cells * model.field_dim();
        let lat = cells * model.components;
        Self {
            dim: model.dim,
            components: model.components,
            samples: model.samples_per_axis(),
            cells: model.cells,
            psi: vec![0.0; field],
            u: vec![0.0; lat],
            pi: vec![0.0; field],
            v: vec![0.0; lat],
        }
    }

    pub fn matches(&self, model: &ModelParams) -> bool {
        let cells = model.cell_count();
        self.dim == model.dim
            && self.components == model.components
            && self.samples == model.samples_per_axis()
            && self.cells == model.cells
            && self.psi.len() == cells * model.field_dim()
            && self.pi.len() == self.psi.len()
            && self.u.len() == cells * model.components
            && self.v.len() == self.u.len()
    }

    pub fn intra_count(&self) -> usize {
        self.samples.pow(self.dim as u32)
    }

    /// Physical position of field sample `idx`.
    pub fn field_position(&self, idx: usize) -> Vec<f64> {
        let intra = self.intra_count();
        let cell = BoxIndex::new(self.dim, self.cells).unflatten(idx / intra);
        let y = BoxIndex::new(self.dim, self.samples).unflatten(idx % intra);
        cell.iter()
            .zip(&y)
            .map(|(&k, &p)| k as f64 + p as f64 / self.samples as f64)
            .collect()
    }

    pub fn lattice_position(&self, idx: usize) -> Vec<f64> {
        BoxIndex::new(self.dim, self.cells)
            .unflatten(idx / self.components)
            .into_iter()
            .map(|k| k as f64)
            .collect()
    }

    /// Physical pairing `<Y, Z>`: cell-grid quadrature for the field parts,
    /// plain sums for the lattice parts.
    pub fn pairing(&self, other: &LatticeState) -> f64 {
        let w = 1.0 / self.intra_count() as f64;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        w * (dot(&self.psi, &other.psi) + dot(&self.pi, &other.pi))
            + dot(&self.u, &other.u)
            + dot(&self.v, &other.v)
    }

    pub fn max_abs(&self) -> f64 {
        self.psi
            .iter()
            .chain(&self.u)
            .chain(&self.pi)
            .chain(&self.v)
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &LatticeState) -> f64 {
        let pairs = self
            .psi
            .iter()
            .zip(&other.psi)
            .chain(self.u.iter().zip(&other.u))
            .chain(self.pi.iter().zip(&other.pi))
            .chain(self.v.iter().zip(&other.v));
        pairs.fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Mode-space data: for every grid point `theta_j = 2 pi j / N` a vector
/// `(Y^0, Y^1)` of length `2m`, each half ordered as field plane waves then
/// lattice components.
#[derive(Debug, Clone, PartialEq)]
pub struct ZakField {
    pub dim: usize,
    pub cells: usize,
    pub cutoff: usize,
    pub components: usize,
    data: Vec<C64>,
}

impl ZakField {
    pub fn zeros(model: &ModelParams) -> Self {
        Self {
            dim: model.dim,
            cells: model.cells,
            cutoff: model.cutoff,
            components: model.components,
            data: vec![C64::new(0.0, 0.0); model.cell_count() * 2 * model.cell_dim()],
        }
    }

    pub fn field_dim(&self) -> usize {
        (2 * self.cutoff + 1).pow(self.dim as u32)
    }

    /// `m`, the length of one half-vector.
    pub fn cell_dim(&self) -> usize {
        self.field_dim() + self.components
    }

    pub fn len(&self) -> usize {
        self.cells.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn matches(&self, model: &ModelParams) -> bool {
        self.dim == model.dim
            && self.cells == model.cells
            && self.cutoff == model.cutoff
            && self.components == model.components
    }

    pub fn at(&self, j: usize) -> &[C64] {
        let w = 2 * self.cell_dim();
        &self.data[j * w..(j + 1) * w]
    }

    pub fn at_mut(&mut self, j: usize) -> &mut [C64] {
        let w = 2 * self.cell_dim();
        &mut self.data[j * w..(j + 1) * w]
    }

    pub fn chunks_mut(&mut self) -> std::slice::ChunksMut<'_, C64> {
        let w = 2 * self.cell_dim();
        self.data.chunks_mut(w)
    }

    pub fn par_chunks_mut(&mut self) -> rayon::slice::ChunksMut<'_, C64> {
        let w = 2 * self.cell_dim();
        self.data.par_chunks_mut(w)
    }

    pub fn values(&self) -> &[C64] {
        &self.data
    }

    /// Discrete Parseval pairing `(1/N^d) sum_j (Y(theta_j), Z(theta_j))`
    /// with the Euclidean inner product conjugate-linear in `other`.
    pub fn inner(&self, other: &ZakField) -> C64 {
        let s: C64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b.conj())
            .sum();
        s / self.len() as f64
    }

    /// Real part of [`ZakField::inner`]; equals the physical pairing for real states.
    pub fn pairing(&self, other: &ZakField) -> f64 {
        self.inner(other).re
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, z| m.max(z.norm()))
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|z| *z *= factor);
    }

    /// Index of the partner entry for the reality constraint:
    /// `Y(-theta)[partner(i)] = conj(Y(theta)[i])`.
    pub fn partner(&self, j: usize, i: usize) -> (usize, usize) {
        let (jn, row) = self.partner_row(j);
        (jn, row[i])
    }

    /// Partner cell index and the component permutation for all entries at `j`.
    pub fn partner_row(&self, j: usize) -> (usize, Vec<usize>) {
        let cells = BoxIndex::new(self.dim, self.cells);
        let jn = cells.negate(j);
        let m = self.cell_dim();
        let nf = self.field_dim();
        let p = 2 * self.cutoff + 1;
        let k = self.cutoff as i64;
        let modes = BoxIndex::new(self.dim, p);
        let jj = cells.unflatten(j);
        let field: Vec<usize> = (0..nf)
            .map(|local| {
                let digits: Vec<usize> = modes
                    .unflatten(local)
                    .into_iter()
                    .zip(&jj)
                    .map(|(dgt, &ja)| {
                        let mode = dgt as i64 - k;
                        let partner = if 2 * ja == self.cells {
                            if mode == k {
                                k
                            } else {
                                -mode - 1
                            }
                        } else {
                            -mode
                        };
                        (partner + k) as usize
                    })
                    .collect();
                modes.flatten(&digits)
            })
            .collect();
        let row = (0..2 * m)
            .map(|i| {
                let (half, local) = (i / m, i % m);
                if local < nf {
                    half * m + field[local]
                } else {
                    i
                }
            })
            .collect();
        (jn, row)
    }

    /// `max |Y(-theta)[partner] - conj Y(theta)| / max |Y|` (0 for the zero field).
    pub fn reality_defect(&self) -> f64 {
        let scale = self.max_abs();
        if scale == 0.0 {
            return 0.0;
        }
        let w = 2 * self.cell_dim();
        let worst = (0..self.len())
            .into_par_iter()
            .map(|j| {
                let (jp, row) = self.partner_row(j);
                (0..w)
                    .map(|i| (self.at(jp)[row[i]] - self.at(j)[i].conj()).norm())
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max);
        worst / scale
    }
}

/// FFT plans for the cell transform in 1 or 2 dimensions.
struct CellFft {
    dim: usize,
    size: usize,
    forward: Arc<dyn Fft<f64>>,
    backward: Arc<dyn Fft<f64>>,
}

impl CellFft {
    fn new(dim: usize, size: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            dim,
            size,
            forward: planner.plan_fft_forward(size),
            backward: planner.plan_fft_inverse(size),
        }
    }

    /// Unnormalised transform over the `size^dim` box. `positive` selects the
    /// kernel `exp(+2 pi i j.k / N)`.
    fn run(&self, buf: &mut [C64], positive: bool) {
        let plan = if positive { &self.backward } else { &self.forward };
        let n = self.size;
        match self.dim {
            1 => plan.process(buf),
            2 => {
                for row in buf.chunks_mut(n) {
                    plan.process(row);
                }
                let mut col = vec![C64::new(0.0, 0.0); n];
                for c in 0..n {
                    for r in 0..n {
                        col[r] = buf[r * n + c];
                    }
                    plan.process(&mut col);
                    for r in 0..n {
                        buf[r * n + c] = col[r];
                    }
                }
            }
            _ => unreachable!("dimension validated by the model"),
        }
    }
}

/// Matrices for the intra-cell transform along one axis:
/// `to_modes[m][p] = exp(2 pi i m p / P) / P` and its inverse.
struct IntraTransform {
    p: usize,
    dim: usize,
    to_modes: Vec<C64>,
    to_samples: Vec<C64>,
}

impl IntraTransform {
    fn new(model: &ModelParams) -> Self {
        let p = model.samples_per_axis();
        let k = model.cutoff as i64;
        let mut to_modes = vec![C64::new(0.0, 0.0); p * p];
        let mut to_samples = vec![C64::new(0.0, 0.0); p * p];
        for mi in 0..p {
            let m = mi as i64 - k;
            for s in 0..p {
                let phase = TAU * (m * s as i64) as f64 / p as f64;
                to_modes[mi * p + s] = C64::from_polar(1.0 / p as f64, phase);
                to_samples[s * p + mi] = C64::from_polar(1.0, -phase);
            }
        }
        Self {
            p,
            dim: model.dim,
            to_modes,
            to_samples,
        }
    }

    /// Apply a per-axis `P x P` matrix separably to a `P^d` block.
    fn apply(&self, mat: &[C64], input: &[C64]) -> Vec<C64> {
        let p = self.p;
        let mut cur = input.to_vec();
        let mut stride = 1;
        for _ in 0..self.dim {
            let mut next = vec![C64::new(0.0, 0.0); cur.len()];
            for base in 0..cur.len() {
                if (base / stride) % p != 0 {
                    continue;
                }
                for r in 0..p {
                    let mut acc = C64::new(0.0, 0.0);
                    for c in 0..p {
                        acc += mat[r * p + c] * cur[base + c * stride];
                    }
                    next[base + r * stride] = acc;
                }
            }
            cur = next;
            stride *= p;
        }
        cur
    }
}

/// Twist phases `exp(sign * i y_p . theta')` for every collocation point.
fn twist(model: &ModelParams, theta_index: &[usize], sign: f64) -> Vec<C64> {
    let p = model.samples_per_axis();
    let intra = BoxIndex::new(model.dim, p);
    let wrapped: Vec<f64> = theta_index
        .iter()
        .map(|&j| wrap_angle(TAU * j as f64 / model.cells as f64))
        .collect();
    (0..intra.len())
        .map(|s| {
            let y = intra.unflatten(s);
            let phase: f64 = y
                .iter()
                .zip(&wrapped)
                .map(|(&yi, t)| yi as f64 / p as f64 * t)
                .sum();
            C64::from_polar(1.0, sign * phase)
        })
        .collect()
}

/// Forward Zak transform of a physical state.
pub fn zak_forward(state: &LatticeState, model: &ModelParams) -> Result<ZakField> {
    if !state.matches(model) {
        return Err(Error::DimensionMismatch(format!(
            "state (d={}, n={}, P={}, N={}) does not match model (d={}, n={}, P={}, N={})",
            state.dim,
            state.components,
            state.samples,
            state.cells,
            model.dim,
            model.components,
            model.samples_per_axis(),
            model.cells
        )));
    }
    let cells = BoxIndex::new(model.dim, model.cells);
    let nc = cells.len();
    let intra = model.field_dim();
    let n = model.components;
    let m = model.cell_dim();
    let fft = CellFft::new(model.dim, model.cells);
    let xf = IntraTransform::new(model);

    // cell transforms, stored [component-slot][j]
    let transform_field = |values: &[f64]| -> Vec<Vec<C64>> {
        (0..intra)
            .into_par_iter()
            .map(|s| {
                let mut buf: Vec<C64> = (0..nc)
                    .map(|c| C64::new(values[c * intra + s], 0.0))
                    .collect();
                fft.run(&mut buf, true);
                buf
            })
            .collect()
    };
    let transform_lattice = |values: &[f64]| -> Vec<Vec<C64>> {
        (0..n)
            .map(|a| {
                let mut buf: Vec<C64> = (0..nc).map(|c| C64::new(values[c * n + a], 0.0)).collect();
                fft.run(&mut buf, true);
                buf
            })
            .collect()
    };
    let psi = transform_field(&state.psi);
    let pi = transform_field(&state.pi);
    let u = transform_lattice(&state.u);
    let v = transform_lattice(&state.v);

    let mut out = ZakField::zeros(model);
    out.par_chunks_mut().enumerate().for_each(|(j, slot)| {
        let tw = twist(model, &cells.unflatten(j), 1.0);
        for (half, (field, lat)) in [(&psi, &u), (&pi, &v)].into_iter().enumerate() {
            let samples: Vec<C64> = (0..intra).map(|s| field[s][j] * tw[s]).collect();
            let modes = xf.apply(&xf.to_modes, &samples);
            let base = half * m;
            slot[base..base + intra].copy_from_slice(&modes);
            for a in 0..n {
                slot[base + intra + a] = lat[a][j];
            }
        }
    });
    Ok(out)
}

/// Inverse Zak transform; rejects fields that are not the transform of a real state.
pub fn zak_inverse(zf: &ZakField, model: &ModelParams) -> Result<LatticeState> {
    if !zf.matches(model) {
        return Err(Error::DimensionMismatch("Zak field does not match model".into()));
    }
    let defect = zf.reality_defect();
    if defect > REALITY_TOL {
        return Err(Error::NonRealField { defect });
    }
    let cells = BoxIndex::new(model.dim, model.cells);
    let nc = cells.len();
    let intra = model.field_dim();
    let n = model.components;
    let m = model.cell_dim();
    let fft = CellFft::new(model.dim, model.cells);
    let xf = IntraTransform::new(model);

    // per-theta samples for both halves: [j][half][intra]
    let samples: Vec<[Vec<C64>; 2]> = (0..nc)
        .into_par_iter()
        .map(|j| {
            let tw = twist(model, &cells.unflatten(j), -1.0);
            let slot = zf.at(j);
            let one = |half: usize| {
                let base = half * m;
                let mut s = xf.apply(&xf.to_samples, &slot[base..base + intra]);
                s.iter_mut().zip(&tw).for_each(|(a, b)| *a *= b);
                s
            };
            [one(0), one(1)]
        })
        .collect();

    let scale = 1.0 / nc as f64;
    let mut state = LatticeState::zeros(model);
    for half in 0..2 {
        let cols: Vec<Vec<f64>> = (0..intra)
            .into_par_iter()
            .map(|s| {
                let mut buf: Vec<C64> = (0..nc).map(|j| samples[j][half][s]).collect();
                fft.run(&mut buf, false);
                buf.iter().map(|z| z.re * scale).collect()
            })
            .collect();
        let target = if half == 0 { &mut state.psi } else { &mut state.pi };
        for (s, col) in cols.iter().enumerate() {
            for (c, val) in col.iter().enumerate() {
                target[c * intra + s] = *val;
            }
        }
        let target = if half == 0 { &mut state.u } else { &mut state.v };
        for a in 0..n {
            let mut buf: Vec<C64> = (0..nc).map(|j| zf.at(j)[half * m + intra + a]).collect();
            fft.run(&mut buf, false);
            for (c, z) in buf.iter().enumerate() {
                target[c * n + a] = z.re * scale;
            }
        }
    }
    Ok(state)
}
