//! Hasegawa-Wakatani right-hand side, RK4 stepping with a Poisson solve per
//! stage, Gaussian random field initial conditions and the run driver.

use std::time::Instant;

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config, Error, Result};
use crate::numerics::{
    arakawa_into, fd_deriv_into, fft2, ifft2_real, iterated_laplacian_into, Axis, Field, Grid, PoissonSolver,
};
use crate::rng::{self, derive_seed};

pub const DEFAULT_NU: f64 = 5e-10;
pub const DEFAULT_ORDER: u32 = 3;
/// Runs abort once `max |omega|` exceeds this.
pub const BLOW_UP_THRESHOLD: f64 = 1e6;

pub const C1_RANGE: (f64, f64) = (0.9, 1.1);
pub const K0_RANGE: (f64, f64) = (0.55, 0.65);
pub const KAPPA_RANGE: (f64, f64) = (0.9, 1.1);
pub const C_PB_RANGE: (f64, f64) = (0.9, 1.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HwParams {
    pub c1: f64,
    pub k0: f64,
    pub kappa: f64,
    pub c_pb: f64,
    pub nu: f64,
    /// Hyperdiffusion order `N` in `nu * laplacian^N`.
    pub order: u32,
}

impl Default for HwParams {
    fn default() -> Self {
        HwParams { c1: 1.0, k0: 0.6, kappa: 1.0, c_pb: 1.0, nu: DEFAULT_NU, order: DEFAULT_ORDER }
    }
}

impl HwParams {
    pub fn new(c1: f64, k0: f64, kappa: f64, c_pb: f64) -> Self {
        HwParams { c1, k0, kappa, c_pb, ..Default::default() }
    }

    /// `[c1, k0, kappa, c_pb]`.
    pub fn scalars(&self) -> [f64; 4] {
        [self.c1, self.k0, self.kappa, self.c_pb]
    }

    pub fn with_scalars(&self, s: [f64; 4]) -> Self {
        HwParams { c1: s[0], k0: s[1], kappa: s[2], c_pb: s[3], ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        let all_positive = self.scalars().iter().chain([&self.nu]).all(|v| *v > 0.0 && v.is_finite());
        if !all_positive || self.order == 0 {
            return Err(config(format!("PDE parameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Four independent uniforms over the sampling ranges; `nu` and `order` at defaults.
pub fn sample_params<R: rand::Rng + ?Sized>(rng: &mut R) -> HwParams {
    let mut u = |(lo, hi): (f64, f64)| rng.random_range(lo..=hi);
    let c1 = u(C1_RANGE);
    let k0 = u(K0_RANGE);
    let kappa = u(KAPPA_RANGE);
    let c_pb = u(C_PB_RANGE);
    HwParams::new(c1, k0, kappa, c_pb)
}

/// Which field's hyperdiffusion enters which equation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Hyperdiffusion {
    /// `nu lap^N omega` in the vorticity equation, `nu lap^N n` in the density equation.
    #[default]
    OwnField,
    /// Each equation damps the other field.
    Swapped,
}

impl std::str::FromStr for Hyperdiffusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "own" | "own_field" => Ok(Hyperdiffusion::OwnField),
            "swapped" => Ok(Hyperdiffusion::Swapped),
            _ => Err(config(format!("unknown hyperdiffusion placement {s:?} (own, swapped)"))),
        }
    }
}

impl std::fmt::Display for Hyperdiffusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Hyperdiffusion::OwnField => "own",
            Hyperdiffusion::Swapped => "swapped",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlasmaState {
    pub omega: Field,
    pub phi: Field,
    pub n: Field,
    pub t: f64,
}

impl PlasmaState {
    pub fn zeros(grid: Grid) -> Self {
        PlasmaState { omega: Field::zeros(grid), phi: Field::zeros(grid), n: Field::zeros(grid), t: 0.0 }
    }

    /// State with `phi` solved from `omega`.
    pub fn from_omega_n(omega: Field, n: Field, t: f64) -> Self {
        let phi = PoissonSolver::new(omega.grid).solve(&omega);
        PlasmaState { omega, phi, n, t }
    }

    pub fn grid(&self) -> Grid {
        self.omega.grid
    }

    pub fn all_finite(&self) -> bool {
        self.omega.all_finite() && self.phi.all_finite() && self.n.all_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub grid_n: usize,
    pub params: HwParams,
    pub dt: f64,
    pub n_steps: u64,
    pub snapshot_every: u64,
    pub seed: u64,
    pub grf_amplitude: f64,
    /// Gaussian envelope width; `None` means four grid spacings.
    pub grf_corr_length: Option<f64>,
    pub hyperdiffusion: Hyperdiffusion,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            grid_n: 128,
            params: HwParams::default(),
            dt: 0.005,
            n_steps: 40_000,
            snapshot_every: 20,
            seed: 0,
            grf_amplitude: 0.01,
            grf_corr_length: None,
            hyperdiffusion: Hyperdiffusion::OwnField,
        }
    }
}

impl SimConfig {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid_n, self.params.k0)
    }

    pub fn corr_length(&self, grid: &Grid) -> f64 {
        self.grf_corr_length.unwrap_or(4.0 * grid.dx)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.grid()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.snapshot_every == 0 {
            return Err(config("snapshot_every must be at least 1"));
        }
        if !(self.grf_amplitude > 0.0) || self.grf_corr_length.is_some_and(|c| !(c > 0.0)) {
            return Err(config("GRF amplitude and correlation length must be positive"));
        }
        Ok(())
    }
}

/// Zero-mean field with RMS `amplitude`: white noise filtered by the
/// envelope `exp(-k^2 corr^2 / 2)` in Fourier space.
pub fn gaussian_random_field(grid: Grid, seed: u64, amplitude: f64, corr_length: f64) -> Result<Field> {
    if !(amplitude > 0.0) || !(corr_length > 0.0) {
        return Err(config("GRF amplitude and correlation length must be positive"));
    }
    let mut rng = rng::seeded(seed);
    let noise: Vec<f64> = (0..grid.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut spec = fft2(&Field { grid, values: noise });
    let k = grid.kx();
    let n = grid.n;
    for iy in 0..n {
        for ix in 0..n {
            let k2 = k[ix] * k[ix] + k[iy] * k[iy];
            spec[iy * n + ix] *= (-0.5 * k2 * corr_length * corr_length).exp();
        }
    }
    spec[0] = Complex64::new(0.0, 0.0);
    let mut f = ifft2_real(&spec, grid);
    let mean = f.mean();
    f.values.iter_mut().for_each(|v| *v -= mean);
    let rms = f.rms();
    if rms == 0.0 {
        return Err(config("correlation length too large: filtered field vanished"));
    }
    let s = amplitude / rms;
    f.values.iter_mut().for_each(|v| *v *= s);
    Ok(f)
}

/// Independent GRFs for omega and n (separate sub-streams of the seed), phi solved, `t = 0`.
pub fn init_state(cfg: &SimConfig) -> Result<PlasmaState> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let corr = cfg.corr_length(&grid);
    let omega = gaussian_random_field(grid, derive_seed(cfg.seed, "omega"), cfg.grf_amplitude, corr)?;
    let n = gaussian_random_field(grid, derive_seed(cfg.seed, "density"), cfg.grf_amplitude, corr)?;
    Ok(PlasmaState::from_omega_n(omega, n, 0.0))
}

/// Buffers for evaluating the right-hand side without allocation.
pub struct RhsWorkspace {
    grid: Grid,
    jac: Vec<f64>,
    lap_omega: Vec<f64>,
    lap_n: Vec<f64>,
    scratch: Vec<f64>,
    dphi_dy: Vec<f64>,
}

impl RhsWorkspace {
    pub fn new(grid: Grid) -> Self {
        let z = vec![0.0; grid.len()];
        RhsWorkspace {
            grid,
            jac: z.clone(),
            lap_omega: z.clone(),
            lap_n: z.clone(),
            scratch: z.clone(),
            dphi_dy: z,
        }
    }

    /// Time derivatives of omega and n given a consistent phi.
    #[allow(clippy::too_many_arguments)]
    pub fn eval(
        &mut self,
        params: &HwParams,
        placement: Hyperdiffusion,
        omega: &[f64],
        n: &[f64],
        phi: &[f64],
        d_omega: &mut [f64],
        d_n: &mut [f64],
    ) {
        let (gn, dx) = (self.grid.n, self.grid.dx);
        let HwParams { c1, kappa, c_pb, nu, order, .. } = *params;
        iterated_laplacian_into(gn, dx, omega, order, &mut self.lap_omega, &mut self.scratch);
        iterated_laplacian_into(gn, dx, n, order, &mut self.lap_n, &mut self.scratch);
        let (damp_omega, damp_n) = match placement {
            Hyperdiffusion::OwnField => (&self.lap_omega, &self.lap_n),
            Hyperdiffusion::Swapped => (&self.lap_n, &self.lap_omega),
        };

        arakawa_into(gn, dx, phi, omega, &mut self.jac);
        for i in 0..d_omega.len() {
            d_omega[i] = c1 * (phi[i] - n[i]) - c_pb * self.jac[i] + nu * damp_omega[i];
        }

        arakawa_into(gn, dx, phi, n, &mut self.jac);
        fd_deriv_into(gn, dx, phi, Axis::Y, &mut self.dphi_dy);
        for i in 0..d_n.len() {
            d_n[i] = c1 * (phi[i] - n[i]) - c_pb * self.jac[i] - kappa * self.dphi_dy[i] + nu * damp_n[i];
        }
    }
}

/// `(d omega / dt, d n / dt)` with each field's hyperdiffusion in its own equation.
pub fn hw_rhs(state: &PlasmaState, params: &HwParams) -> (Field, Field) {
    hw_rhs_with(state, params, Hyperdiffusion::OwnField)
}

pub fn hw_rhs_with(state: &PlasmaState, params: &HwParams, placement: Hyperdiffusion) -> (Field, Field) {
    let grid = state.grid();
    let mut ws = RhsWorkspace::new(grid);
    let mut d_omega = Field::zeros(grid);
    let mut d_n = Field::zeros(grid);
    ws.eval(
        params,
        placement,
        &state.omega.values,
        &state.n.values,
        &state.phi.values,
        &mut d_omega.values,
        &mut d_n.values,
    );
    (d_omega, d_n)
}

/// Classical fourth-order Runge-Kutta over a flat state vector.
pub struct Rk4 {
    k: [Vec<f64>; 4],
    stage: Vec<f64>,
}

impl Rk4 {
    pub fn new(len: usize) -> Self {
        Rk4 { k: std::array::from_fn(|_| vec![0.0; len]), stage: vec![0.0; len] }
    }

    /// Advance `u` by `dt`. `f(stage, u_stage, du)` writes the derivative;
    /// `stage` runs 0..4 and stage 0 always sees `u` itself.
    pub fn advance(&mut self, u: &mut [f64], dt: f64, mut f: impl FnMut(usize, &[f64], &mut [f64])) {
        let [k1, k2, k3, k4] = &mut self.k;
        f(0, u, k1);
        for ((s, &ui), &ki) in self.stage.iter_mut().zip(u.iter()).zip(k1.iter()) {
            *s = ui + 0.5 * dt * ki;
        }
        f(1, &self.stage, k2);
        for ((s, &ui), &ki) in self.stage.iter_mut().zip(u.iter()).zip(k2.iter()) {
            *s = ui + 0.5 * dt * ki;
        }
        f(2, &self.stage, k3);
        for ((s, &ui), &ki) in self.stage.iter_mut().zip(u.iter()).zip(k3.iter()) {
            *s = ui + dt * ki;
        }
        f(3, &self.stage, k4);
        let w = dt / 6.0;
        for i in 0..u.len() {
            u[i] += w * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// Single-owner time stepper holding all work buffers for one grid.
pub struct Stepper {
    params: HwParams,
    placement: Hyperdiffusion,
    poisson: PoissonSolver,
    rhs: RhsWorkspace,
    rk: Rk4,
    u: Vec<f64>,
    phi: Vec<f64>,
}

impl Stepper {
    pub fn new(grid: Grid, params: HwParams, placement: Hyperdiffusion) -> Self {
        let len = grid.len();
        Stepper {
            params,
            placement,
            poisson: PoissonSolver::new(grid),
            rhs: RhsWorkspace::new(grid),
            rk: Rk4::new(2 * len),
            u: vec![0.0; 2 * len],
            phi: vec![0.0; len],
        }
    }

    /// One RK4 step of `(omega, n)`, then phi re-solved and `t += dt`.
    /// Does not check for blow-up; see [`check_blow_up`].
    pub fn step(&mut self, state: &mut PlasmaState, dt: f64) {
        let len = state.omega.values.len();
        self.u[..len].copy_from_slice(&state.omega.values);
        self.u[len..].copy_from_slice(&state.n.values);
        let Stepper { params, placement, poisson, rhs, rk, u, phi } = self;
        let state_phi = &state.phi.values;
        rk.advance(u, dt, |stage, us, du| {
            let (omega, n) = us.split_at(len);
            let (d_omega, d_n) = du.split_at_mut(len);
            let phi_s: &[f64] = if stage == 0 {
                state_phi
            } else {
                poisson.solve_into(omega, phi);
                phi
            };
            rhs.eval(params, *placement, omega, n, phi_s, d_omega, d_n);
        });
        state.omega.values.copy_from_slice(&self.u[..len]);
        state.n.values.copy_from_slice(&self.u[len..]);
        self.poisson.solve_into(&state.omega.values, &mut state.phi.values);
        state.t += dt;
    }
}

/// Blow-up error when `max |omega|` exceeds the threshold or any value is non-finite.
pub fn check_blow_up(state: &PlasmaState, step: u64) -> Result<()> {
    let mut max = 0.0f64;
    let mut finite = true;
    for (&o, &n) in state.omega.values.iter().zip(&state.n.values) {
        finite &= o.is_finite() && n.is_finite();
        max = max.max(o.abs());
    }
    if !finite || max > BLOW_UP_THRESHOLD {
        let max_abs_omega = if finite { max } else { f64::INFINITY };
        return Err(Error::BlowUp { step, time: state.t, max_abs_omega });
    }
    Ok(())
}

pub fn rk4_step(state: &PlasmaState, params: &HwParams, dt: f64) -> Result<PlasmaState> {
    if !(dt > 0.0) {
        return Err(config(format!("dt must be positive, got {dt}")));
    }
    let mut next = state.clone();
    Stepper::new(state.grid(), *params, Hyperdiffusion::OwnField).step(&mut next, dt);
    check_blow_up(&next, 1)?;
    Ok(next)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunStats {
    pub steps: u64,
    pub wall_seconds: f64,
    pub seconds_per_step: f64,
}

/// Run `cfg`, handing every `snapshot_every`-th state (including `t = 0`) to
/// `on_snapshot`. Time stamps are `step * dt`, not an accumulated sum.
pub fn simulate_with(cfg: &SimConfig, mut on_snapshot: impl FnMut(&PlasmaState) -> Result<()>) -> Result<RunStats> {
    let mut state = init_state(cfg)?;
    on_snapshot(&state)?;
    let mut stepper = Stepper::new(state.grid(), cfg.params, cfg.hyperdiffusion);
    let start = Instant::now();
    for step in 1..=cfg.n_steps {
        stepper.step(&mut state, cfg.dt);
        state.t = step as f64 * cfg.dt;
        check_blow_up(&state, step)?;
        if step % cfg.snapshot_every == 0 {
            on_snapshot(&state)?;
        }
    }
    let wall_seconds = start.elapsed().as_secs_f64();
    Ok(RunStats {
        steps: cfg.n_steps,
        wall_seconds,
        seconds_per_step: if cfg.n_steps > 0 { wall_seconds / cfg.n_steps as f64 } else { 0.0 },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub params: HwParams,
    pub snapshots: Vec<PlasmaState>,
    pub stats: RunStats,
}

impl Trajectory {
    pub fn grid(&self) -> Option<Grid> {
        self.snapshots.first().map(|s| s.grid())
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }
}

pub fn simulate(cfg: &SimConfig) -> Result<Trajectory> {
    let mut snapshots = Vec::new();
    let stats = simulate_with(cfg, |s| {
        snapshots.push(s.clone());
        Ok(())
    })?;
    Ok(Trajectory { params: cfg.params, snapshots, stats })
}

/// Independent runs, one per config, in parallel when the `parallel`
/// feature is enabled. Results keep the input order.
pub fn run_ensemble<R, F>(configs: &[SimConfig], run: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize, &SimConfig) -> R + Sync + Send,
{
    crate::par::map_indexed(configs, run)
}
