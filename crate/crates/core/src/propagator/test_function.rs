//! Smooth test functions built directly in mode space.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch_cell::{wavenumbers, ModelParams};
use crate::dispersion::{critical_points, stationary_points};
use crate::error::{Error, Result};
use crate::grid::{circle_distance, wrap_theta, BoxIndex};
use crate::C64;

use super::zak::{zak_inverse, LatticeState, ZakField};
use super::BlochGrid;

/// Which half of `(Y^0, Y^1)` a term lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Position,
    Momentum,
}

impl Slot {
    fn offset(self, m: usize) -> usize {
        match self {
            Slot::Position => 0,
            Slot::Momentum => m,
        }
    }
}

/// A finitely supported lattice term at cell `cell`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeTerm {
    pub slot: Slot,
    pub cell: Vec<i64>,
    /// One value per displacement component.
    pub value: Vec<f64>,
}

/// `A exp(-|x - c|^2 / (2 w^2)) cos(k . (x - c))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldPacket {
    pub slot: Slot,
    pub amplitude: f64,
    pub center: Vec<f64>,
    pub width: f64,
    #[serde(default)]
    pub carrier: Vec<f64>,
}

impl FieldPacket {
    /// Continuous Fourier transform `int e^{i xi x} f(x) dx`.
    pub fn fourier(&self, xi: &[f64]) -> C64 {
        let d = xi.len();
        let carrier = |i: usize| self.carrier.get(i).copied().unwrap_or(0.0);
        let phase: f64 = xi.iter().zip(&self.center).map(|(x, c)| x * c).sum();
        let gauss = |sign: f64| {
            let r2: f64 = (0..d).map(|i| (xi[i] + sign * carrier(i)).powi(2)).sum();
            (-0.5 * self.width * self.width * r2).exp()
        };
        let norm = self.amplitude * (TAU.sqrt() * self.width).powi(d as i32);
        C64::from_polar(norm * 0.5 * (gauss(1.0) + gauss(-1.0)), phase)
    }
}

/// Which grid points a [`Cutoff`] removes (besides `theta_a = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffScope {
    /// Band crossings and Hessian zeros.
    #[default]
    Critical,
    /// Band crossings and group-velocity zeros only.
    Stationary,
}

/// Smooth exclusion of neighbourhoods of critical points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Cutoff {
    /// Weight is zero within this distance of an excluded point.
    pub delta: f64,
    /// Width over which the weight rises from 0 to 1; `delta + ramp < pi`.
    pub ramp: f64,
    /// `|D_l|` below this counts as a Hessian zero.
    pub hessian_tol: f64,
    pub scope: CutoffScope,
}

impl Default for Cutoff {
    fn default() -> Self {
        Self {
            delta: 0.05,
            ramp: 1.5,
            hessian_tol: 1e-6,
            scope: CutoffScope::Critical,
        }
    }
}

/// `C^infinity` step: 0 for `x <= 0`, 1 for `x >= 1`.
pub fn smooth_step(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / x).exp();
    let b = (-1.0 / (1.0 - x)).exp();
    a / (a + b)
}

/// Test function `Z = (Z^0, Z^1)`: finitely many lattice terms and Gaussian
/// field packets, optionally projected onto the lowest bands and multiplied by
/// a smooth cutoff vanishing near critical points and the boundary of the torus.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TestFunction {
    #[serde(default)]
    pub lattice: Vec<LatticeTerm>,
    #[serde(default)]
    pub field: Vec<FieldPacket>,
    /// Keep the degeneracy groups that start below this band index.
    #[serde(default)]
    pub band_filter: Option<usize>,
    #[serde(default)]
    pub cutoff: Option<Cutoff>,
}

impl TestFunction {
    pub fn lattice_delta(slot: Slot, cell: Vec<i64>, value: Vec<f64>) -> Self {
        Self {
            lattice: vec![LatticeTerm { slot, cell, value }],
            ..Self::default()
        }
    }

    pub fn packet(packet: FieldPacket) -> Self {
        Self {
            field: vec![packet],
            ..Self::default()
        }
    }

    pub fn with_band_filter(mut self, bands: usize) -> Self {
        self.band_filter = Some(bands);
        self
    }

    pub fn with_cutoff(mut self, cutoff: Cutoff) -> Self {
        self.cutoff = Some(cutoff);
        self
    }

    fn cutoff_problem(&self) -> Option<String> {
        let c = self.cutoff?;
        (!(c.delta >= 0.0 && c.ramp > 0.0 && c.delta + c.ramp < PI)).then(|| {
            format!(
                "cutoff needs delta >= 0, ramp > 0 and delta + ramp < pi (got {}, {})",
                c.delta, c.ramp
            )
        })
    }

    fn shape_problems(&self, model: &ModelParams) -> Vec<String> {
        let mut out = Vec::new();
        for t in &self.lattice {
            if t.cell.len() != model.dim || t.value.len() != model.components {
                out.push(format!(
                    "lattice term needs {} cell coordinates and {} values",
                    model.dim, model.components
                ));
            }
        }
        for p in &self.field {
            if p.center.len() != model.dim || p.carrier.len() > model.dim || p.width <= 0.0 {
                out.push(format!(
                    "field packet needs a {}-dimensional centre and positive width",
                    model.dim
                ));
            }
        }
        if self.band_filter == Some(0) {
            out.push("band_filter must keep at least one band".into());
        }
        out
    }

    /// Every inconsistency with `model`.
    pub fn problems(&self, model: &ModelParams) -> Vec<String> {
        let mut out: Vec<String> = self.cutoff_problem().into_iter().collect();
        out.extend(self.shape_problems(model));
        out
    }

    fn validate(&self, model: &ModelParams) -> Result<()> {
        if let Some(msg) = self.cutoff_problem() {
            return Err(Error::Config(msg));
        }
        let shape = self.shape_problems(model);
        if !shape.is_empty() {
            return Err(Error::DimensionMismatch(shape.join("; ")));
        }
        Ok(())
    }

    /// Mean position of all terms, used as the centre of the light cone.
    pub fn center(&self, dim: usize) -> Vec<f64> {
        let pts: Vec<Vec<f64>> = self
            .lattice
            .iter()
            .map(|t| t.cell.iter().map(|&c| c as f64).collect())
            .chain(self.field.iter().map(|p| p.center.clone()))
            .collect();
        if pts.is_empty() {
            return vec![0.0; dim];
        }
        (0..dim)
            .map(|a| pts.iter().map(|p| p[a]).sum::<f64>() / pts.len() as f64)
            .collect()
    }

    /// Unfiltered mode-space values at one quasimomentum.
    fn raw_slot(&self, model: &ModelParams, theta: &[f64]) -> Vec<C64> {
        let m = model.cell_dim();
        let nf = model.field_dim();
        let mut out = vec![C64::new(0.0, 0.0); 2 * m];
        for t in &self.lattice {
            let phase: f64 = t.cell.iter().zip(theta).map(|(&k, th)| k as f64 * th).sum();
            let e = C64::from_polar(1.0, phase);
            let off = t.slot.offset(m) + nf;
            for (a, v) in t.value.iter().enumerate() {
                out[off + a] += e * *v;
            }
        }
        if !self.field.is_empty() {
            let waves = wavenumbers(model, theta);
            for p in &self.field {
                let off = p.slot.offset(m);
                for (i, w) in waves.iter().enumerate() {
                    out[off + i] += w.average(|xi| vec![p.fourier(xi)])[0];
                }
            }
        }
        out
    }

    /// Cutoff weight at each grid point (all ones without a cutoff).
    pub fn weights(&self, bloch: &BlochGrid) -> Result<Vec<f64>> {
        self.validate(&bloch.model)?;
        let Some(cut) = self.cutoff else {
            return Ok(vec![1.0; bloch.len()]);
        };
        let bands = bloch.bands()?;
        let limit = self.band_filter.unwrap_or(bands.band_count());
        let crit = critical_points(bands, limit, cut.hessian_tol);
        let flagged: Vec<usize> = match cut.scope {
            CutoffScope::Critical => crit.flagged(),
            CutoffScope::Stationary => {
                let stat = stationary_points(bands, limit);
                (0..bands.len()).filter(|&g| crit.crossing[g] || stat[g]).collect()
            }
        };
        // symmetrise under theta -> -theta so the weights respect reality
        let mut excluded: Vec<Vec<f64>> = Vec::new();
        for g in flagged {
            let p = wrap_theta(bands.grid.point(g));
            excluded.push(p.iter().map(|x| -x).collect());
            excluded.push(p);
        }
        let cells = BoxIndex::new(bloch.model.dim, bloch.model.cells);
        let rise = |dist: f64| smooth_step((dist - cut.delta) / cut.ramp);
        let half: Vec<f64> = (0..bloch.len())
            .into_par_iter()
            .map(|j| {
                let theta = bloch.grid.point(j);
                // a product of factors, each smooth, vanishing on a max-norm ball
                // around one excluded point (or on one face of the torus boundary)
                let mut w: f64 = theta.iter().map(|&t| rise(circle_distance(t, 0.0))).product();
                for e in &excluded {
                    let inside: f64 = theta
                        .iter()
                        .zip(e)
                        .map(|(&a, &b)| 1.0 - rise(circle_distance(a, b)))
                        .product();
                    w *= 1.0 - inside;
                    if w == 0.0 {
                        break;
                    }
                }
                w
            })
            .collect();
        // copy from the canonical member of each {theta, -theta} pair so the
        // weights are exactly even
        Ok((0..bloch.len())
            .map(|j| half[j.min(cells.negate(j))])
            .collect())
    }

    /// Mode-space representation on the crystal's Zak grid.
    pub fn to_zak(&self, bloch: &BlochGrid) -> Result<ZakField> {
        let model = &bloch.model;
        self.validate(model)?;
        let weights = self.weights(bloch)?;
        let m = model.cell_dim();
        let mut out = ZakField::zeros(model);
        out.par_chunks_mut().enumerate().for_each(|(j, slot)| {
            let theta = bloch.grid.point(j);
            let mut raw = self.raw_slot(model, theta);
            if let Some(keep) = self.band_filter {
                let spec = &bloch.spectra[j];
                let mut proj = DMatrix::<C64>::zeros(m, m);
                for g in spec.groups.iter().filter(|g| g.start < keep) {
                    proj += spec.projector(g.clone());
                }
                for half in 0..2 {
                    let v = &proj * DVector::from_column_slice(&raw[half * m..(half + 1) * m]);
                    raw[half * m..(half + 1) * m].copy_from_slice(v.as_slice());
                }
            }
            for (dst, src) in slot.iter_mut().zip(&raw) {
                *dst = src * weights[j];
            }
        });
        Ok(out)
    }

    /// Physical-space values on the crystal.
    pub fn to_physical(&self, bloch: &BlochGrid) -> Result<LatticeState> {
        zak_inverse(&self.to_zak(bloch)?, &bloch.model)
    }
}
