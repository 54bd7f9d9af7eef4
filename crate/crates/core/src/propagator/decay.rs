//! Light-cone localisation of adjoint-evolved test functions.

use serde::Serialize;

use crate::dispersion::max_group_speed;
use crate::error::{Error, Result};

use super::test_function::TestFunction;
use super::zak::{zak_inverse, LatticeState};
use super::BlochGrid;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayRow {
    pub t: f64,
    pub sup_all: f64,
    pub sup_inside_cone: f64,
    pub sup_outside_cone: f64,
    /// Cone radius `v_factor * speed * t`.
    pub radius: f64,
}

/// Distance on the periodic crystal of `cells` cells per axis.
pub fn ring_distance(x: &[f64], c: &[f64], cells: usize) -> f64 {
    let n = cells as f64;
    x.iter()
        .zip(c)
        .map(|(a, b)| {
            let r = (a - b).rem_euclid(n);
            r.min(n - r).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Require `N/2 > 1.5 speed t_max` so the cone never wraps around the crystal.
pub fn check_wraparound(cells: usize, speed: f64, t_max: f64) -> Result<()> {
    let half_extent = cells as f64 / 2.0;
    let required = 1.5 * speed * t_max;
    if half_extent > required {
        Ok(())
    } else {
        Err(Error::WraparoundRisk {
            half_extent,
            required,
            speed,
            t_max,
        })
    }
}

fn split_sup(state: &LatticeState, center: &[f64], radius: f64) -> (f64, f64) {
    let mut inside = 0.0f64;
    let mut outside = 0.0f64;
    let mut visit = |pos: Vec<f64>, value: f64| {
        if ring_distance(&pos, center, state.cells) <= radius {
            inside = inside.max(value.abs());
        } else {
            outside = outside.max(value.abs());
        }
    };
    for i in 0..state.psi.len() {
        let pos = state.field_position(i);
        visit(pos.clone(), state.psi[i]);
        visit(pos, state.pi[i]);
    }
    for i in 0..state.u.len() {
        let pos = state.lattice_position(i);
        visit(pos.clone(), state.u[i]);
        visit(pos, state.v[i]);
    }
    (inside, outside)
}

/// Supremum of `W'(t) Z` inside and outside the cone `|x - c| <= v_factor speed t`,
/// where `speed` is the largest group speed over all bands on the grid.
pub fn decay_profile(
    z: &TestFunction,
    bloch: &BlochGrid,
    times: &[f64],
    v_factor: f64,
) -> Result<Vec<DecayRow>> {
    let speed = max_group_speed(bloch.bands()?).max_speed;
    let t_max = times.iter().copied().fold(0.0, f64::max);
    check_wraparound(bloch.model.cells, speed, t_max)?;
    let center = z.center(bloch.model.dim);
    let z0 = z.to_zak(bloch)?;
    times
        .iter()
        .map(|&t| {
            let state = zak_inverse(&bloch.adjoint_evolve(&z0, t)?, &bloch.model)?;
            let radius = v_factor * speed * t;
            let (inside, outside) = split_sup(&state, &center, radius);
            Ok(DecayRow {
                t,
                sup_all: inside.max(outside),
                sup_inside_cone: inside,
                sup_outside_cone: outside,
                radius,
            })
        })
        .collect()
}
