use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Grid;

/// A function of (t, x) sampled on the lattice, slice-major:
/// `values[k * n_x + i]` is the value at `(t_k, x_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub grid: Grid,
    pub horizon: f64,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn zeros(grid: &Grid, horizon: f64) -> Self {
        GridField {
            grid: grid.clone(),
            horizon,
            values: vec![0.0; (grid.n_t + 1) * grid.n_x],
        }
    }

    pub fn from_fn(grid: &Grid, horizon: f64, fun: impl Fn(f64, f64) -> f64) -> Self {
        let mut field = GridField::zeros(grid, horizon);
        for k in 0..=grid.n_t {
            let t = grid.time(k, horizon);
            for i in 0..grid.n_x {
                field.values[k * grid.n_x + i] = fun(t, grid.x(i));
            }
        }
        field
    }

    /// The same space profile repeated at every slice.
    pub fn broadcast(grid: &Grid, horizon: f64, profile: &[f64]) -> Self {
        assert_eq!(profile.len(), grid.n_x);
        let mut values = Vec::with_capacity((grid.n_t + 1) * grid.n_x);
        for _ in 0..=grid.n_t {
            values.extend_from_slice(profile);
        }
        GridField {
            grid: grid.clone(),
            horizon,
            values,
        }
    }

    pub fn from_values(grid: &Grid, horizon: f64, values: Vec<f64>) -> Result<Self> {
        let expected = (grid.n_t + 1) * grid.n_x;
        if values.len() != expected {
            return Err(Error::GridMismatch(format!(
                "expected {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::GridMismatch(format!("non-finite value at index {pos}")));
        }
        Ok(GridField {
            grid: grid.clone(),
            horizon,
            values,
        })
    }

    #[inline]
    pub fn n_slices(&self) -> usize {
        self.grid.n_t + 1
    }

    #[inline]
    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.grid.n_x;
        &self.values[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.grid.n_x;
        &mut self.values[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn at(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.grid.n_x + i]
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.grid.time(k, self.horizon)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Index of the slice nearest to `t`.
    pub fn nearest_slice(&self, t: f64) -> usize {
        let dt = self.grid.dt(self.horizon);
        (t / dt).round().clamp(0.0, self.grid.n_t as f64) as usize
    }

    /// Bilinear interpolation in (t, x), clamped at the domain edges.
    pub fn interpolate(&self, t: f64, x: f64) -> f64 {
        let g = &self.grid;
        let dx = g.dx();
        let pos_x = ((x - g.x_min) / dx - 1.0).clamp(0.0, (g.n_x - 1) as f64);
        let i = (pos_x.floor() as usize).min(g.n_x - 2);
        let wx = pos_x - i as f64;
        let dt = g.dt(self.horizon);
        let pos_t = (t / dt).clamp(0.0, g.n_t as f64);
        let k = (pos_t.floor() as usize).min(g.n_t - 1);
        let wt = pos_t - k as f64;
        let row = |k: usize| self.at(k, i) * (1.0 - wx) + self.at(k, i + 1) * wx;
        row(k) * (1.0 - wt) + row(k + 1) * wt
    }

    /// Linear interpolation in x on slice `k`, clamped at the edges.
    pub fn interpolate_slice(&self, k: usize, x: f64) -> f64 {
        interpolate_profile(&self.grid, self.slice(k), x)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn sup_diff(&self, other: &GridField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn check_compatible(&self, other: &GridField) -> Result<()> {
        if self.grid != other.grid || self.horizon != other.horizon {
            return Err(Error::GridMismatch("fields live on different lattices".into()));
        }
        Ok(())
    }
}

/// Linear interpolation of a space profile, clamped at the edges.
pub fn interpolate_profile(grid: &Grid, profile: &[f64], x: f64) -> f64 {
    let pos = ((x - grid.x_min) / grid.dx() - 1.0).clamp(0.0, (grid.n_x - 1) as f64);
    let i = (pos.floor() as usize).min(grid.n_x - 2);
    let w = pos - i as f64;
    profile[i] * (1.0 - w) + profile[i + 1] * w
}

/// Central first difference at interior nodes, one-sided at the two ends.
pub fn gradient(profile: &[f64], dx: f64) -> Vec<f64> {
    let n = profile.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    out[0] = (profile[1] - profile[0]) / dx;
    out[n - 1] = (profile[n - 1] - profile[n - 2]) / dx;
    for i in 1..n - 1 {
        out[i] = (profile[i + 1] - profile[i - 1]) / (2.0 * dx);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_is_exact_on_affine_data() {
        let grid = Grid::new(0.0, 2.0, 19, 8).unwrap();
        let f = GridField::from_fn(&grid, 4.0, |t, x| 3.0 - x + 0.5 * t);
        let v = f.interpolate(1.3, 0.77);
        assert!((v - (3.0 - 0.77 + 0.65)).abs() < 1e-12);
        // clamped outside
        let edge = f.interpolate(-1.0, 5.0);
        assert!((edge - f.at(0, grid.n_x - 1)).abs() < 1e-14);
    }

    #[test]
    fn gradient_of_quadratic() {
        let grid = Grid::new(0.0, 1.0, 9, 1).unwrap();
        let p: Vec<f64> = grid.nodes().map(|x| x * x).collect();
        let d = gradient(&p, grid.dx());
        for i in 1..grid.n_x - 1 {
            assert!((d[i] - 2.0 * grid.x(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let grid = Grid::new(0.0, 1.0, 3, 1).unwrap();
        let mut v = vec![0.0; 6];
        v[4] = f64::NAN;
        assert!(GridField::from_values(&grid, 1.0, v).is_err());
    }
}
