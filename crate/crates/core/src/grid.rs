//! Quasimomentum grids and flat multi-index helpers.

use std::f64::consts::{PI, TAU};

/// Map an angle to its representative in `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut w = theta.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    // rem_euclid can land on TAU itself for tiny negative inputs
    if w <= -PI {
        w += TAU;
    }
    w
}

/// Per-axis wrap of a quasimomentum point.
pub fn wrap_theta(theta: &[f64]) -> Vec<f64> {
    theta.iter().map(|&t| wrap_angle(t)).collect()
}

/// Distance between two angles on the circle.
pub fn circle_distance(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Flat row-major (axis 0 fastest) indexing of a `size^dim` box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxIndex {
    pub dim: usize,
    pub size: usize,
}

impl BoxIndex {
    pub fn new(dim: usize, size: usize) -> Self {
        Self { dim, size }
    }

    pub fn len(&self) -> usize {
        self.size.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dim);
        for _ in 0..self.dim {
            out.push(flat % self.size);
            flat /= self.size;
        }
        out
    }

    pub fn flatten(&self, idx: &[usize]) -> usize {
        idx.iter()
            .rev()
            .fold(0, |acc, &i| acc * self.size + (i % self.size))
    }

    /// Index of `-j` modulo `size` on every axis.
    pub fn negate(&self, flat: usize) -> usize {
        let idx: Vec<usize> = self
            .unflatten(flat)
            .into_iter()
            .map(|i| (self.size - i) % self.size)
            .collect();
        self.flatten(&idx)
    }
}

/// A finite set of quasimomentum points in `[0, 2pi]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGrid {
    dim: usize,
    points: Vec<f64>,
    /// Points per axis when the grid is a uniform product grid.
    per_axis: Option<usize>,
}

impl ThetaGrid {
    /// Uniform product grid `theta_j = 2 pi j / size` on each axis.
    pub fn uniform(dim: usize, size: usize) -> Self {
        let index = BoxIndex::new(dim, size);
        let mut points = Vec::with_capacity(index.len() * dim);
        for flat in 0..index.len() {
            for j in index.unflatten(flat) {
                points.push(TAU * j as f64 / size as f64);
            }
        }
        Self {
            dim,
            points,
            per_axis: Some(size),
        }
    }

    pub fn from_points(dim: usize, points: Vec<Vec<f64>>) -> Self {
        assert!(points.iter().all(|p| p.len() == dim), "point dimension");
        Self {
            dim,
            points: points.into_iter().flatten().collect(),
            per_axis: None,
        }
    }

    pub fn single(theta: &[f64]) -> Self {
        Self::from_points(theta.len(), vec![theta.to_vec()])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn per_axis(&self) -> Option<usize> {
        self.per_axis
    }

    pub fn spacing(&self) -> Option<f64> {
        self.per_axis.map(|n| TAU / n as f64)
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks(self.dim)
    }

    /// Grid neighbours along each axis (periodic) for uniform grids.
    pub fn neighbours(&self, i: usize) -> Vec<usize> {
        let Some(size) = self.per_axis else {
            return Vec::new();
        };
        if size < 2 {
            return Vec::new();
        }
        let index = BoxIndex::new(self.dim, size);
        let base = index.unflatten(i);
        let mut out = Vec::with_capacity(2 * self.dim);
        for axis in 0..self.dim {
            for step in [1, size - 1] {
                let mut idx = base.clone();
                idx[axis] = (idx[axis] + step) % size;
                out.push(index.flatten(&idx));
            }
        }
        out
    }
}
