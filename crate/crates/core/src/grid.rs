//! Uniform 2D structured grid and the conservative variable-coefficient
//! Laplacian `div(c grad u)` with homogeneous Neumann (no-flux) boundaries.
//!
//! Cells are stored row-major: the flat index of cell `(x, y)` is `y * nx + x`.

use crate::error::{check_len, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    nx: usize,
    ny: usize,
    dx: f64,
}

/// Builds a grid of `nx * ny` square cells with spacing `dx` (km).
pub fn build_grid(nx: usize, ny: usize, dx: f64) -> Result<Grid> {
    if nx < 3 || ny < 3 {
        return Err(Error::InvalidDimension(format!(
            "grid must be at least 3x3, got {nx}x{ny}"
        )));
    }
    if !(dx.is_finite() && dx > 0.0) {
        return Err(Error::InvalidDimension(format!(
            "cell spacing must be positive, got {dx}"
        )));
    }
    Ok(Grid { nx, ny, dx })
}

impl Grid {
    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dx
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.nx + x
    }

    #[inline]
    pub fn coords(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    /// Physical position (km) of the centre of cell `k`.
    pub fn cell_center(&self, k: usize) -> (f64, f64) {
        let (x, y) = self.coords(k);
        ((x as f64 + 0.5) * self.dx, (y as f64 + 0.5) * self.dx)
    }

    /// Neighbours of `k` in the fixed order west, east, south, north.
    /// Missing neighbours (domain edge) are `None`.
    #[inline]
    fn neighbours(&self, k: usize) -> [Option<usize>; 4] {
        let (x, y) = self.coords(k);
        [
            (x > 0).then(|| k - 1),
            (x + 1 < self.nx).then(|| k + 1),
            (y > 0).then(|| k - self.nx),
            (y + 1 < self.ny).then(|| k + self.nx),
        ]
    }
}

/// Flux-form discretisation of `div(coeff grad u)`.
///
/// Every interior face carries `c_face * (u_nbr - u_cell) / dx^2` with
/// `c_face` the arithmetic mean of the two adjacent coefficients; boundary
/// faces carry nothing. Each face flux enters its two cells with opposite
/// signs, so the output sums to zero up to rounding.
pub fn laplacian_varcoef(u: &[f64], coeff: &[f64], grid: &Grid) -> Result<Vec<f64>> {
    let mut out = vec![0.0; grid.n_cells()];
    laplacian_varcoef_into(u, coeff, grid, &mut out)?;
    Ok(out)
}

pub fn laplacian_varcoef_into(u: &[f64], coeff: &[f64], grid: &Grid, out: &mut [f64]) -> Result<()> {
    let n = grid.n_cells();
    check_len("laplacian u", n, u.len())?;
    check_len("laplacian coeff", n, coeff.len())?;
    check_len("laplacian output", n, out.len())?;
    let inv_dx2 = 1.0 / (grid.dx * grid.dx);
    for (k, o) in out.iter_mut().enumerate() {
        let face = |nb: Option<usize>| match nb {
            Some(m) => 0.5 * (coeff[k] + coeff[m]) * (u[m] - u[k]),
            None => 0.0,
        };
        let [w, e, s, nn] = grid.neighbours(k);
        // pairs are summed first so mirror images produce identical bits
        *o = ((face(w) + face(e)) + (face(s) + face(nn))) * inv_dx2;
    }
    Ok(())
}

/// Vector-Jacobian product of [`laplacian_varcoef`]: given the cotangent
/// `v` of the output, accumulates `dL/du` into `grad_u` and `dL/dcoeff`
/// into `grad_coeff`.
pub fn laplacian_vjp(
    u: &[f64],
    coeff: &[f64],
    grid: &Grid,
    v: &[f64],
    grad_u: &mut [f64],
    grad_coeff: &mut [f64],
) -> Result<()> {
    let n = grid.n_cells();
    for (ctx, len) in [
        ("laplacian_vjp u", u.len()),
        ("laplacian_vjp coeff", coeff.len()),
        ("laplacian_vjp cotangent", v.len()),
        ("laplacian_vjp grad_u", grad_u.len()),
        ("laplacian_vjp grad_coeff", grad_coeff.len()),
    ] {
        check_len(ctx, n, len)?;
    }
    let inv_dx2 = 1.0 / (grid.dx * grid.dx);
    for k in 0..n {
        let vk = v[k] * inv_dx2;
        if vk == 0.0 {
            continue;
        }
        for m in grid.neighbours(k).into_iter().flatten() {
            let c_face = 0.5 * (coeff[k] + coeff[m]);
            let du = u[m] - u[k];
            grad_u[m] += vk * c_face;
            grad_u[k] -= vk * c_face;
            grad_coeff[k] += vk * 0.5 * du;
            grad_coeff[m] += vk * 0.5 * du;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_grid_counts_cells() {
        assert_eq!(build_grid(3, 3, 1.0).unwrap().n_cells(), 9);
        let g = build_grid(32, 32, 1.0).unwrap();
        assert_eq!(g.n_cells(), 1024);
        assert_eq!(g.dx(), 1.0);
    }

    #[test]
    fn build_grid_rejects_small_or_degenerate() {
        assert!(matches!(build_grid(2, 3, 1.0), Err(Error::InvalidDimension(_))));
        assert!(matches!(build_grid(3, 2, 1.0), Err(Error::InvalidDimension(_))));
        assert!(matches!(build_grid(3, 3, 0.0), Err(Error::InvalidDimension(_))));
        assert!(matches!(build_grid(3, 3, f64::NAN), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn row_major_indexing() {
        let g = build_grid(4, 3, 1.0).unwrap();
        assert_eq!(g.index(1, 2), 9);
        assert_eq!(g.coords(9), (1, 2));
        assert_eq!(g.cell_center(0), (0.5, 0.5));
    }

    #[test]
    fn constant_field_has_zero_laplacian() {
        let g = build_grid(5, 4, 0.7).unwrap();
        let u = vec![3.25; g.n_cells()];
        let c: Vec<f64> = (0..g.n_cells()).map(|k| 0.1 + k as f64).collect();
        assert!(laplacian_varcoef(&u, &c, &g).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_profile_is_exact_in_interior() {
        let g = build_grid(6, 5, 1.0).unwrap();
        let u: Vec<f64> = (0..g.n_cells())
            .map(|k| {
                let x = g.coords(k).0 as f64;
                x * x
            })
            .collect();
        let c = vec![1.0; g.n_cells()];
        let out = laplacian_varcoef(&u, &c, &g).unwrap();
        for y in 0..5 {
            for x in 1..5 {
                assert_eq!(out[g.index(x, y)], 2.0);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let g = build_grid(3, 3, 1.0).unwrap();
        let err = laplacian_varcoef(&[0.0; 8], &[0.0; 9], &g).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 9,
                found: 8,
                ..
            }
        ));
    }

    /// Independent oracle: enumerate every interior face once and add its
    /// flux to both sides.
    fn face_enumeration(u: &[f64], c: &[f64], g: &Grid) -> (Vec<f64>, f64) {
        let mut out = vec![0.0; g.n_cells()];
        let mut abs_flux = 0.0;
        let mut add = |a: usize, b: usize| {
            let flux = 0.5 * (c[a] + c[b]) * (u[b] - u[a]) / (g.dx() * g.dx());
            out[a] += flux;
            out[b] -= flux;
            abs_flux += 2.0 * flux.abs();
        };
        for y in 0..g.ny() {
            for x in 0..g.nx() {
                if x + 1 < g.nx() {
                    add(g.index(x, y), g.index(x + 1, y));
                }
                if y + 1 < g.ny() {
                    add(g.index(x, y), g.index(x, y + 1));
                }
            }
        }
        (out, abs_flux)
    }

    fn field(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn matches_face_enumeration_and_conserves(u in field(64), c in field(64)) {
            let g = build_grid(8, 8, 1.3).unwrap();
            let out = laplacian_varcoef(&u, &c, &g).unwrap();
            let (oracle, abs_flux) = face_enumeration(&u, &c, &g);
            for (a, b) in out.iter().zip(&oracle) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
            let total: f64 = out.iter().sum();
            prop_assert!(total.abs() <= 1e-12 * abs_flux.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn reflection_is_exact(u in field(35), c in field(35)) {
            let g = build_grid(7, 5, 1.0).unwrap();
            let out = laplacian_varcoef(&u, &c, &g).unwrap();
            let flip_x = |v: &[f64]| -> Vec<f64> {
                (0..g.n_cells()).map(|k| {
                    let (x, y) = g.coords(k);
                    v[g.index(g.nx() - 1 - x, y)]
                }).collect()
            };
            let flip_y = |v: &[f64]| -> Vec<f64> {
                (0..g.n_cells()).map(|k| {
                    let (x, y) = g.coords(k);
                    v[g.index(x, g.ny() - 1 - y)]
                }).collect()
            };
            let fx = laplacian_varcoef(&flip_x(&u), &flip_x(&c), &g).unwrap();
            prop_assert_eq!(fx, flip_x(&out));
            let fy = laplacian_varcoef(&flip_y(&u), &flip_y(&c), &g).unwrap();
            prop_assert_eq!(fy, flip_y(&out));
        }

        #[test]
        fn vjp_matches_directional_derivative(
            u in field(16), c in field(16), v in field(16), du in field(16), dc in field(16)
        ) {
            // the operator is bilinear, so <v, L(u+du, c+dc) - L(u, c) - L(du, dc)>
            // equals <grad_u, du> + <grad_c, dc> exactly up to rounding
            let g = build_grid(4, 4, 0.5).unwrap();
            let mut gu = vec![0.0; 16];
            let mut gc = vec![0.0; 16];
            laplacian_vjp(&u, &c, &g, &v, &mut gu, &mut gc).unwrap();
            let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
            let full = laplacian_varcoef(&add(&u, &du), &add(&c, &dc), &g).unwrap();
            let base = laplacian_varcoef(&u, &c, &g).unwrap();
            let cross = laplacian_varcoef(&du, &dc, &g).unwrap();
            let lhs: f64 = (0..16).map(|k| v[k] * (full[k] - base[k] - cross[k])).sum();
            let rhs: f64 = (0..16).map(|k| gu[k] * du[k] + gc[k] * dc[k]).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
