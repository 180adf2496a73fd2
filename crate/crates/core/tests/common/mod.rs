#![allow(dead_code)]

use hwlab::numerics::{Field, Grid};
use rand::Rng;
use rand::SeedableRng;

pub fn random_field(grid: Grid, seed: u64) -> Field {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Field { grid, values: (0..grid.len()).map(|_| r.random_range(-1.0..1.0)).collect() }
}

pub fn zero_mean(mut f: Field) -> Field {
    let m = f.mean();
    f.values.iter_mut().for_each(|v| *v -= m);
    f
}

pub fn max_abs_diff(a: &Field, b: &Field) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Value at (ix + dx, iy + dy) with periodic wrap.
pub fn at(f: &Field, ix: usize, iy: usize, dx: isize, dy: isize) -> f64 {
    let n = f.grid.n;
    f.values[wrap(iy as isize + dy, n) * n + wrap(ix as isize + dx, n)]
}

pub fn naive_ddx(f: &Field) -> Field {
    let g = f.grid;
    let mut out = Field::zeros(g);
    for iy in 0..g.n {
        for ix in 0..g.n {
            out.values[iy * g.n + ix] = (at(f, ix, iy, 1, 0) - at(f, ix, iy, -1, 0)) / (2.0 * g.dx);
        }
    }
    out
}

pub fn naive_ddy(f: &Field) -> Field {
    let g = f.grid;
    let mut out = Field::zeros(g);
    for iy in 0..g.n {
        for ix in 0..g.n {
            out.values[iy * g.n + ix] = (at(f, ix, iy, 0, 1) - at(f, ix, iy, 0, -1)) / (2.0 * g.dx);
        }
    }
    out
}

pub fn naive_laplacian(f: &Field) -> Field {
    let g = f.grid;
    let mut out = Field::zeros(g);
    for iy in 0..g.n {
        for ix in 0..g.n {
            let s = at(f, ix, iy, 1, 0) + at(f, ix, iy, -1, 0) + at(f, ix, iy, 0, 1) + at(f, ix, iy, 0, -1)
                - 4.0 * at(f, ix, iy, 0, 0);
            out.values[iy * g.n + ix] = s / (g.dx * g.dx);
        }
    }
    out
}

/// Textbook Arakawa Jacobian (J++ + J+x + Jx+) / 3 on a lattice whose unit
/// steps along its two axes are `ax` and `ay` grid offsets, with spacing `h`.
fn naive_arakawa_on(p: &Field, q: &Field, ax: (isize, isize), ay: (isize, isize), h: f64) -> Field {
    let g = p.grid;
    let mut out = Field::zeros(g);
    for j in 0..g.n {
        for i in 0..g.n {
            let off = |a: isize, b: isize| (a * ax.0 + b * ay.0, a * ax.1 + b * ay.1);
            let p_ = |a, b| {
                let (dx, dy) = off(a, b);
                at(p, i, j, dx, dy)
            };
            let q_ = |a, b| {
                let (dx, dy) = off(a, b);
                at(q, i, j, dx, dy)
            };
            let jpp = (p_(1, 0) - p_(-1, 0)) * (q_(0, 1) - q_(0, -1)) - (p_(0, 1) - p_(0, -1)) * (q_(1, 0) - q_(-1, 0));
            let jpx = p_(1, 0) * (q_(1, 1) - q_(1, -1)) - p_(-1, 0) * (q_(-1, 1) - q_(-1, -1))
                - p_(0, 1) * (q_(1, 1) - q_(-1, 1))
                + p_(0, -1) * (q_(1, -1) - q_(-1, -1));
            let jxp = q_(0, 1) * (p_(1, 1) - p_(-1, 1)) - q_(0, -1) * (p_(1, -1) - p_(-1, -1))
                - q_(1, 0) * (p_(1, 1) - p_(1, -1))
                + q_(-1, 0) * (p_(-1, 1) - p_(-1, -1));
            out.values[j * g.n + i] = (jpp + jpx + jxp) / (12.0 * h * h);
        }
    }
    out
}

/// Classic second-order Arakawa Jacobian.
pub fn naive_arakawa(p: &Field, q: &Field) -> Field {
    naive_arakawa_on(p, q, (1, 0), (0, 1), p.grid.dx)
}

/// Arakawa's fourth-order combination: twice the axis-aligned Jacobian minus
/// the Jacobian on the diagonal lattice (axes (1,1) and (-1,1), spacing sqrt(2) dx).
pub fn naive_arakawa4(p: &Field, q: &Field) -> Field {
    let j1 = naive_arakawa(p, q);
    let j2 = naive_arakawa_on(p, q, (1, 1), (-1, 1), p.grid.dx * 2f64.sqrt());
    j1.zip_map(&j2, |a, b| 2.0 * a - b)
}

/// Observed order from errors at successively doubled resolutions.
pub fn orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}
