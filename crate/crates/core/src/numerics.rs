//! Periodic square grids, finite-difference stencils, the Arakawa Jacobian,
//! 2-D FFTs and the spectral Poisson solver.
//!
//! Layout: a field on an `n x n` grid is stored row-major with the row index
//! along y and the column index along x, i.e. `values[iy * n + ix]`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{config, Result};

/// Uniform periodic square grid of side `L = 2 pi / k0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub n: usize,
    pub k0: f64,
    pub length: f64,
    pub dx: f64,
}

impl Grid {
    pub fn new(n: usize, k0: f64) -> Result<Self> {
        if n < 8 || n % 2 != 0 {
            return Err(config(format!("grid size must be even and at least 8, got {n}")));
        }
        if !(k0 > 0.0 && k0.is_finite()) {
            return Err(config(format!("k0 must be positive, got {k0}")));
        }
        let length = 2.0 * PI / k0;
        Ok(Grid { n, k0, length, dx: length / n as f64 })
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Integer mode number of FFT bin `i`: `0, 1, .., n/2 - 1, -n/2, .., -1`.
    /// The Nyquist bin carries `-n/2`.
    pub fn mode(&self, i: usize) -> i64 {
        let n = self.n as i64;
        let i = i as i64;
        if i < n / 2 { i } else { i - n }
    }

    /// Wavenumbers `k0 * mode(i)` along x.
    pub fn kx(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.k0 * self.mode(i) as f64).collect()
    }

    /// Wavenumbers along y; identical to [`Grid::kx`] on a square grid.
    pub fn ky(&self) -> Vec<f64> {
        self.kx()
    }

    /// Physical coordinate of column / row `i`.
    pub fn coord(&self, i: usize) -> f64 {
        i as f64 * self.dx
    }

    /// Field sampled from `f(x, y)`.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64) -> Field {
        let mut values = Vec::with_capacity(self.len());
        for iy in 0..self.n {
            for ix in 0..self.n {
                values.push(f(self.coord(ix), self.coord(iy)));
            }
        }
        Field { grid: *self, values }
    }
}

pub fn make_grid(n: usize, k0: f64) -> Result<Grid> {
    Grid::new(n, k0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: Grid) -> Self {
        Field { grid, values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Field { grid, values: vec![c; grid.len()] }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(config(format!("{} values for a {}x{} grid", values.len(), grid.n, grid.n)));
        }
        Ok(Field { grid, values })
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.grid.n + ix]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn rms(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        assert_eq!(self.grid.n, other.grid.n, "fields on different grids");
        Field { grid: self.grid, values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Periodic neighbour tables: `plus[i] = (i + 1) mod n`, `minus[i] = (i - 1) mod n`.
pub(crate) fn neighbours(n: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..n).map(|i| (i + 1) % n).collect(), (0..n).map(|i| (i + n - 1) % n).collect())
}

/// Centered second-order difference along `axis` into `out`.
pub fn fd_deriv_into(n: usize, dx: f64, f: &[f64], axis: Axis, out: &mut [f64]) {
    let inv = 1.0 / (2.0 * dx);
    let (p, m) = neighbours(n);
    for iy in 0..n {
        let row = iy * n;
        match axis {
            Axis::X => {
                for ix in 0..n {
                    out[row + ix] = (f[row + p[ix]] - f[row + m[ix]]) * inv;
                }
            }
            Axis::Y => {
                let (up, down) = (p[iy] * n, m[iy] * n);
                for ix in 0..n {
                    out[row + ix] = (f[up + ix] - f[down + ix]) * inv;
                }
            }
        }
    }
}

pub fn fd_deriv(f: &Field, axis: Axis) -> Field {
    let mut out = Field::zeros(f.grid);
    fd_deriv_into(f.grid.n, f.grid.dx, &f.values, axis, &mut out.values);
    out
}

/// Five-point periodic Laplacian into `out`.
pub fn fd_laplacian_into(n: usize, dx: f64, f: &[f64], out: &mut [f64]) {
    let inv = 1.0 / (dx * dx);
    let (p, m) = neighbours(n);
    for iy in 0..n {
        let (row, up, down) = (iy * n, p[iy] * n, m[iy] * n);
        for ix in 0..n {
            let c = f[row + ix];
            out[row + ix] = ((f[row + p[ix]] + f[row + m[ix]]) + (f[up + ix] + f[down + ix]) - 4.0 * c) * inv;
        }
    }
}

pub fn fd_laplacian(f: &Field) -> Field {
    let mut out = Field::zeros(f.grid);
    fd_laplacian_into(f.grid.n, f.grid.dx, &f.values, &mut out.values);
    out
}

/// `order` compositions of the five-point Laplacian; `scratch` has the field length.
pub fn iterated_laplacian_into(n: usize, dx: f64, f: &[f64], order: u32, out: &mut [f64], scratch: &mut [f64]) {
    assert!(order >= 1, "iterated Laplacian needs order >= 1");
    // Alternate between out and scratch so the final pass lands in out.
    if order % 2 == 1 {
        fd_laplacian_into(n, dx, f, out);
    } else {
        fd_laplacian_into(n, dx, f, scratch);
    }
    for k in 1..order {
        if (order - k) % 2 == 1 {
            fd_laplacian_into(n, dx, scratch, out);
        } else {
            fd_laplacian_into(n, dx, out, scratch);
        }
    }
}

pub fn iterated_laplacian(f: &Field, order: u32) -> Result<Field> {
    if order == 0 {
        return Err(config("iterated Laplacian order must be at least 1"));
    }
    let mut out = Field::zeros(f.grid);
    let mut scratch = vec![0.0; f.values.len()];
    iterated_laplacian_into(f.grid.n, f.grid.dx, &f.values, order, &mut out.values, &mut scratch);
    Ok(out)
}

/// Fourier symbol of one five-point Laplacian for mode numbers `(mx, my)`.
pub fn fd_laplacian_symbol(grid: &Grid, mx: i64, my: i64) -> f64 {
    let h = grid.dx;
    let theta = |m: i64| 2.0 * PI * m as f64 / grid.n as f64;
    (2.0 * theta(mx).cos() - 2.0 + 2.0 * theta(my).cos() - 2.0) / (h * h)
}

/// Arakawa Jacobian `J(p, q)` into `out`.
///
/// Stencil sum `(A(p,q) - A(q,p)) + (B(p,q) - B(q,p))` of the classic
/// Arakawa Jacobian, with `A` the centered-difference product and `B` the
/// J+x numerator, over the neighbour indices
/// `[e, w, u, d, ue, de, uw, dw]` of one point. Swapping the arguments
/// negates every rounded intermediate, so the sum is bitwise antisymmetric.
#[inline(always)]
fn arakawa_sum(p: &[f64], q: &[f64], k: [usize; 8]) -> f64 {
    let [e, w, u, d, ue, de, uw, dw] = k;
    let a_pq = (p[e] - p[w]) * (q[u] - q[d]);
    let a_qp = (q[e] - q[w]) * (p[u] - p[d]);
    let b_pq = p[e] * (q[ue] - q[de]) - p[w] * (q[uw] - q[dw]) - (p[u] * (q[ue] - q[uw]) - p[d] * (q[de] - q[dw]));
    let b_qp = q[e] * (p[ue] - p[de]) - q[w] * (p[uw] - p[dw]) - (q[u] * (p[ue] - p[uw]) - q[d] * (p[de] - p[dw]));
    (a_pq - a_qp) + (b_pq - b_qp)
}

/// Classic second-order Arakawa Jacobian, the mean of J++, J+x and Jx+.
pub fn arakawa2_into(n: usize, dx: f64, p: &[f64], q: &[f64], out: &mut [f64]) {
    let scale = 1.0 / (12.0 * dx * dx);
    let (xp, xm) = neighbours(n);
    for iy in 0..n {
        let (r, u, d) = (iy * n, xp[iy] * n, xm[iy] * n);
        for ix in 0..n {
            let (e, w) = (xp[ix], xm[ix]);
            let k = [r + e, r + w, u + ix, d + ix, u + e, d + e, u + w, d + w];
            out[r + ix] = arakawa_sum(p, q, k) * scale;
        }
    }
}

/// Fourth-order Arakawa Jacobian `2 J1 - J2`: `J1` is the classic scheme on
/// the axis-aligned stencil, `J2` the same scheme on the 45-degree rotated
/// lattice with spacing `sqrt(2) dx`. Both conserve the domain sums of `J`,
/// `p J` and `q J`, and so does the combination.
pub fn arakawa_into(n: usize, dx: f64, p: &[f64], q: &[f64], out: &mut [f64]) {
    let scale = 1.0 / (24.0 * dx * dx);
    let (xp, xm) = neighbours(n);
    let xp2: Vec<usize> = (0..n).map(|i| (i + 2) % n).collect();
    let xm2: Vec<usize> = (0..n).map(|i| (i + n - 2) % n).collect();
    for iy in 0..n {
        let (r, u, d) = (iy * n, xp[iy] * n, xm[iy] * n);
        let (u2, d2) = (xp2[iy] * n, xm2[iy] * n);
        for ix in 0..n {
            let (e, w) = (xp[ix], xm[ix]);
            let axis = [r + e, r + w, u + ix, d + ix, u + e, d + e, u + w, d + w];
            // Rotated axes: xi along (1, 1), eta along (-1, 1).
            let diag = [u + e, d + w, u + w, d + e, u2 + ix, r + xp2[ix], r + xm2[ix], d2 + ix];
            out[r + ix] = (4.0 * arakawa_sum(p, q, axis) - arakawa_sum(p, q, diag)) * scale;
        }
    }
}

fn bracket_with(p: &Field, q: &Field, kernel: fn(usize, f64, &[f64], &[f64], &mut [f64])) -> Result<Field> {
    if p.grid != q.grid {
        return Err(config("Arakawa bracket operands live on different grids"));
    }
    let mut out = Field::zeros(p.grid);
    kernel(p.grid.n, p.grid.dx, &p.values, &q.values, &mut out.values);
    Ok(out)
}

/// Fourth-order energy- and enstrophy-conserving Poisson bracket `[p, q]`.
pub fn arakawa_bracket(p: &Field, q: &Field) -> Result<Field> {
    bracket_with(p, q, arakawa_into)
}

/// Second-order variant of [`arakawa_bracket`].
pub fn arakawa2_bracket(p: &Field, q: &Field) -> Result<Field> {
    bracket_with(p, q, arakawa2_into)
}

struct Plan {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Plan>> = RefCell::new(HashMap::new());
}

fn with_plan<R>(n: usize, f: impl FnOnce(&mut Plan) -> R) -> R {
    PLANS.with(|plans| {
        let mut plans = plans.borrow_mut();
        let plan = plans.entry(n).or_insert_with(|| {
            let mut planner = FftPlanner::new();
            let forward = planner.plan_fft_forward(n);
            let inverse = planner.plan_fft_inverse(n);
            let len = forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len());
            Plan { forward, inverse, scratch: vec![Complex64::default(); len] }
        });
        f(plan)
    })
}

fn transpose(buf: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            buf.swap(i * n + j, j * n + i);
        }
    }
}

/// Unnormalized 1-D transforms of every row, then of every column, leaving
/// the result transposed (`[kx][ky]`). Inverse transforms are not scaled.
pub(crate) fn fft2_transposed(buf: &mut [Complex64], n: usize, inverse: bool) {
    with_plan(n, |plan| {
        let fft = if inverse { &plan.inverse } else { &plan.forward };
        fft.process_with_scratch(buf, &mut plan.scratch);
        transpose(buf, n);
        fft.process_with_scratch(buf, &mut plan.scratch);
    });
}

/// 2-D DFT of a real field, `F[ky][kx] = sum f[y][x] exp(-i (kx x + ky y))`.
pub fn fft2(f: &Field) -> Vec<Complex64> {
    let n = f.grid.n;
    let mut buf: Vec<Complex64> = f.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_transposed(&mut buf, n, false);
    transpose(&mut buf, n);
    buf
}

/// Inverse of [`fft2`], including the `1 / n^2` normalization.
pub fn ifft2(spectrum: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut buf = spectrum.to_vec();
    fft2_transposed(&mut buf, n, true);
    transpose(&mut buf, n);
    let s = 1.0 / (n * n) as f64;
    buf.iter_mut().for_each(|c| *c *= s);
    buf
}

/// Real part of [`ifft2`] as a field.
pub fn ifft2_real(spectrum: &[Complex64], grid: Grid) -> Field {
    Field { grid, values: ifft2(spectrum, grid.n).into_iter().map(|c| c.re).collect() }
}

/// Reusable spectral Poisson solver for one grid.
pub struct PoissonSolver {
    grid: Grid,
    /// `-1 / |k|^2`, zero at the mean mode (same in either index order).
    inv_symbol: Vec<f64>,
    buf: Vec<Complex64>,
}

impl PoissonSolver {
    pub fn new(grid: Grid) -> Self {
        let k = grid.kx();
        let n = grid.n;
        let mut inv_symbol = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let k2 = k[i] * k[i] + k[j] * k[j];
                inv_symbol[i * n + j] = if k2 > 0.0 { -1.0 / k2 } else { 0.0 };
            }
        }
        PoissonSolver { grid, inv_symbol, buf: vec![Complex64::default(); n * n] }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// `phi` with spectral Laplacian equal to the zero-mean part of `omega`.
    pub fn solve_into(&mut self, omega: &[f64], phi: &mut [f64]) {
        let n = self.grid.n;
        for (b, &v) in self.buf.iter_mut().zip(omega) {
            *b = Complex64::new(v, 0.0);
        }
        fft2_transposed(&mut self.buf, n, false);
        // The symbol is symmetric in (kx, ky), so the transposed layout needs no fix-up.
        let s = 1.0 / (n * n) as f64;
        for (b, &g) in self.buf.iter_mut().zip(&self.inv_symbol) {
            *b *= g * s;
        }
        fft2_transposed(&mut self.buf, n, true);
        for (p, b) in phi.iter_mut().zip(&self.buf) {
            *p = b.re;
        }
    }

    pub fn solve(&mut self, omega: &Field) -> Field {
        let mut phi = Field::zeros(self.grid);
        self.solve_into(&omega.values, &mut phi.values);
        phi
    }
}

pub fn spectral_poisson_solve(omega: &Field) -> Field {
    PoissonSolver::new(omega.grid).solve(omega)
}

/// Laplacian applied through its Fourier symbol `-|k|^2`.
pub fn spectral_laplacian(f: &Field) -> Field {
    let n = f.grid.n;
    let k = f.grid.kx();
    let mut spec = fft2(f);
    for iy in 0..n {
        for ix in 0..n {
            spec[iy * n + ix] *= -(k[ix] * k[ix] + k[iy] * k[iy]);
        }
    }
    ifft2_real(&spec, f.grid)
}
