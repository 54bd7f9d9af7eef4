//! Exact time evolution on the quasimomentum grid of a finite crystal.
//!
//! At every `theta` the first-order system `Y' = [[0, 1], [-H, 0]] Y` is
//! solved in closed form through the eigen-decomposition of `H(theta)`.

pub mod decay;
pub mod test_function;
pub mod zak;

use std::io::Write;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::bloch_cell::{ModelParams, SpectralData};
use crate::dispersion::{band_structure, Bands};
use crate::error::{Error, Result};
use crate::grid::ThetaGrid;
use crate::C64;

pub use decay::{decay_profile, DecayRow};
pub use test_function::{Cutoff, CutoffScope, FieldPacket, LatticeTerm, TestFunction};
pub use zak::{zak_forward, zak_inverse, LatticeState, ZakField};

/// Spectral data of `H(theta_j)` at every point of the crystal's Zak grid.
#[derive(Debug)]
pub struct BlochGrid {
    pub model: ModelParams,
    pub grid: ThetaGrid,
    pub spectra: Vec<SpectralData>,
    bands: OnceLock<Bands>,
}

impl BlochGrid {
    pub fn new(model: &ModelParams) -> Result<Self> {
        model.validate()?;
        let grid = ThetaGrid::uniform(model.dim, model.cells);
        let spectra = (0..grid.len())
            .into_par_iter()
            .map(|j| SpectralData::at(model, grid.point(j)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: model.clone(),
            grid,
            spectra,
            bands: OnceLock::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.spectra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectra.is_empty()
    }

    /// Band structure (with velocities and Hessians) on the same grid, computed once.
    pub fn bands(&self) -> Result<&Bands> {
        if let Some(b) = self.bands.get() {
            return Ok(b);
        }
        let b = band_structure(&self.model, &self.grid)?;
        Ok(self.bands.get_or_init(|| b))
    }

    fn check(&self, zf: &ZakField) -> Result<()> {
        if zf.matches(&self.model) {
            Ok(())
        } else {
            Err(Error::GridMismatch("Zak field was built for a different model".into()))
        }
    }

    /// `W(t) Y`.
    pub fn evolve(&self, zf: &ZakField, t: f64) -> Result<ZakField> {
        self.check(zf)?;
        let mut out = zf.clone();
        out.par_chunks_mut()
            .zip(&self.spectra)
            .for_each(|(slot, spec)| propagate_slot(spec, t, slot, false));
        Ok(out)
    }

    /// `W'(t) Z`, the adjoint of [`BlochGrid::evolve`] for the pairing `<., .>`.
    pub fn adjoint_evolve(&self, zf: &ZakField, t: f64) -> Result<ZakField> {
        self.check(zf)?;
        let mut out = zf.clone();
        out.par_chunks_mut()
            .zip(&self.spectra)
            .for_each(|(slot, spec)| propagate_slot(spec, t, slot, true));
        Ok(out)
    }

    /// `(1/2) (1/N^d) sum_j [ |Y^1|^2 + (Y^0, H Y^0) ]`.
    pub fn energy(&self, zf: &ZakField) -> Result<f64> {
        self.check(zf)?;
        let m = self.model.cell_dim();
        let total: f64 = self
            .spectra
            .par_iter()
            .enumerate()
            .map(|(j, spec)| {
                let slot = zf.at(j);
                let y0 = nalgebra::DVectorView::from_slice(&slot[..m], m);
                let y1 = &slot[m..];
                let kinetic: f64 = y1.iter().map(|z| z.norm_sqr()).sum();
                let hy = &spec.h * y0;
                let potential = y0.dotc(&hy).re;
                kinetic + potential
            })
            .collect::<Vec<_>>()
            .iter()
            .sum();
        Ok(0.5 * total / self.len() as f64)
    }
}

/// Coefficients of the propagator at frequency `w`: `(cos wt, sin wt / w, w sin wt)`.
fn mode_coefficients(w: f64, t: f64) -> (f64, f64, f64) {
    let (s, c) = (w * t).sin_cos();
    (c, s / w, w * s)
}

/// Apply `G(t)` (or its adjoint) to one `(Y^0, Y^1)` slot in place.
fn propagate_slot(spec: &SpectralData, t: f64, slot: &mut [C64], adjoint: bool) {
    let m = spec.dim();
    let f = &spec.vectors;
    let a = f.adjoint() * nalgebra::DVectorView::from_slice(&slot[..m], m);
    let b = f.adjoint() * nalgebra::DVectorView::from_slice(&slot[m..], m);
    let mut a2 = a.clone();
    let mut b2 = b.clone();
    for l in 0..m {
        let (c, s_over, w_s) = mode_coefficients(spec.omegas[l], t);
        if adjoint {
            a2[l] = a[l] * c - b[l] * w_s;
            b2[l] = a[l] * s_over + b[l] * c;
        } else {
            a2[l] = a[l] * c + b[l] * s_over;
            b2[l] = -a[l] * w_s + b[l] * c;
        }
    }
    let y0 = f * a2;
    let y1 = f * b2;
    slot[..m].copy_from_slice(y0.as_slice());
    slot[m..].copy_from_slice(y1.as_slice());
}

/// The `2m x 2m` matrix `G_theta(t) = [[cos Wt, sin Wt W^-1], [-W sin Wt, cos Wt]]`.
pub fn propagator_matrix(spec: &SpectralData, t: f64) -> DMatrix<C64> {
    let m = spec.dim();
    let mut cos = Vec::with_capacity(m);
    let mut sin_over = Vec::with_capacity(m);
    let mut w_sin = Vec::with_capacity(m);
    for &w in &spec.omegas {
        let (c, so, ws) = mode_coefficients(w, t);
        cos.push(c);
        sin_over.push(so);
        w_sin.push(-ws);
    }
    let mut g = DMatrix::zeros(2 * m, 2 * m);
    let c = spec.weighted_outer(&cos);
    g.view_mut((0, 0), (m, m)).copy_from(&c);
    g.view_mut((m, m), (m, m)).copy_from(&c);
    g.view_mut((0, m), (m, m)).copy_from(&spec.weighted_outer(&sin_over));
    g.view_mut((m, 0), (m, m)).copy_from(&spec.weighted_outer(&w_sin));
    g
}

/// `W(t) Y` for a mode-space field, building the spectral cache on the fly.
pub fn evolve(zf: &ZakField, model: &ModelParams, t: f64) -> Result<ZakField> {
    BlochGrid::new(model)?.evolve(zf, t)
}

pub fn adjoint_evolve(zf: &ZakField, model: &ModelParams, t: f64) -> Result<ZakField> {
    BlochGrid::new(model)?.adjoint_evolve(zf, t)
}

/// Physical solution `Y(t) = W(t) Y_0` at each requested time.
pub fn solve(initial: &LatticeState, model: &ModelParams, times: &[f64]) -> Result<Vec<LatticeState>> {
    let bloch = BlochGrid::new(model)?;
    let z0 = zak_forward(initial, model)?;
    times
        .iter()
        .map(|&t| zak_inverse(&bloch.evolve(&z0, t)?, model))
        .collect()
}

/// Energy of a physical state.
pub fn energy(state: &LatticeState, model: &ModelParams) -> Result<f64> {
    let bloch = BlochGrid::new(model)?;
    bloch.energy(&zak_forward(state, model)?)
}

/// One row per value: `quantity,index,x0[,x1],value`.
pub fn write_state_csv<W: Write>(state: &LatticeState, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["quantity".to_string(), "index".to_string()];
    header.extend((0..state.dim).map(|a| format!("x{a}")));
    header.push("value".into());
    w.write_record(&header)?;
    let field = [("psi", &state.psi), ("pi", &state.pi)];
    for (name, values) in field {
        for (i, v) in values.iter().enumerate() {
            let mut rec = vec![name.to_string(), i.to_string()];
            rec.extend(state.field_position(i).iter().map(|x| x.to_string()));
            rec.push(v.to_string());
            w.write_record(&rec)?;
        }
    }
    let lattice = [("u", &state.u), ("v", &state.v)];
    for (name, values) in lattice {
        for (i, v) in values.iter().enumerate() {
            let mut rec = vec![name.to_string(), i.to_string()];
            rec.extend(state.lattice_position(i).iter().map(|x| x.to_string()));
            rec.push(v.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
