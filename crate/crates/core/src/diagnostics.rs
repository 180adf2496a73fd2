//! Flux diagnostics (particle flux and resistive dissipation), their
//! temporal statistics and spectra, and the radial spectrum of `|grad phi|^2`.

use std::io::Write;

use rustfft::FftPlanner;
use num_complex::Complex64;

use crate::error::{config, data, Result};
use crate::hwsim::{HwParams, PlasmaState};
use crate::numerics::{fd_deriv, fft2, Axis, Field};

/// How a domain quadrature is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QoiNormalization {
    /// Riemann sum times `dx^2`: the area integral.
    #[default]
    Integral,
    /// Grid mean: the integral divided by the domain area.
    DomainMean,
}

impl QoiNormalization {
    fn weight(self, f: &Field) -> f64 {
        match self {
            QoiNormalization::Integral => f.grid.dx * f.grid.dx,
            QoiNormalization::DomainMean => 1.0 / f.values.len() as f64,
        }
    }
}

impl std::str::FromStr for QoiNormalization {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "integral" => Ok(QoiNormalization::Integral),
            "mean" | "domain_mean" => Ok(QoiNormalization::DomainMean),
            _ => Err(config(format!("unknown QoI normalization {s:?} (integral, mean)"))),
        }
    }
}

impl std::fmt::Display for QoiNormalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QoiNormalization::Integral => "integral",
            QoiNormalization::DomainMean => "mean",
        })
    }
}

/// Particle flux `-int n d(phi)/dy dx dy`.
pub fn gamma_n(state: &PlasmaState) -> f64 {
    gamma_n_with(state, QoiNormalization::Integral)
}

pub fn gamma_n_with(state: &PlasmaState, norm: QoiNormalization) -> f64 {
    let dphi = fd_deriv(&state.phi, Axis::Y);
    let s: f64 = state.n.values.iter().zip(&dphi.values).map(|(n, d)| n * d).sum();
    -s * norm.weight(&state.n)
}

/// Resistive dissipation `c1 int (n - phi)^2 dx dy`.
pub fn gamma_c(state: &PlasmaState, params: &HwParams) -> f64 {
    gamma_c_with(state, params, QoiNormalization::Integral)
}

pub fn gamma_c_with(state: &PlasmaState, params: &HwParams, norm: QoiNormalization) -> f64 {
    let s: f64 = state.n.values.iter().zip(&state.phi.values).map(|(n, p)| (n - p) * (n - p)).sum();
    params.c1 * (s * norm.weight(&state.n))
}

/// `0.5 * mean(n^2 + |grad phi|^2)`.
pub fn fluctuation_energy(state: &PlasmaState) -> f64 {
    let gx = fd_deriv(&state.phi, Axis::X);
    let gy = fd_deriv(&state.phi, Axis::Y);
    let s: f64 = (0..state.n.values.len())
        .map(|i| state.n.values[i].powi(2) + gx.values[i].powi(2) + gy.values[i].powi(2))
        .sum();
    0.5 * s / state.n.values.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QoiSeries {
    pub times: Vec<f64>,
    pub gamma_n: Vec<f64>,
    pub gamma_c: Vec<f64>,
}

impl QoiSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Append one snapshot; times must increase strictly.
    pub fn push(&mut self, state: &PlasmaState, params: &HwParams, norm: QoiNormalization) -> Result<()> {
        if self.times.last().is_some_and(|&t| state.t <= t) {
            return Err(data(format!("QoI times must increase, got {} after {:?}", state.t, self.times.last())));
        }
        self.times.push(state.t);
        self.gamma_n.push(gamma_n_with(state, norm));
        self.gamma_c.push(gamma_c_with(state, params, norm));
        Ok(())
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "t,gamma_n,gamma_c")?;
        for i in 0..self.len() {
            writeln!(w, "{},{},{}", self.times[i], self.gamma_n[i], self.gamma_c[i])?;
        }
        Ok(())
    }
}

pub fn qoi_series(states: &[PlasmaState], params: &HwParams, norm: QoiNormalization) -> Result<QoiSeries> {
    let mut s = QoiSeries::default();
    for st in states {
        s.push(st, params, norm)?;
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn stats(values: &[f64]) -> Result<Stats> {
    if values.is_empty() {
        return Err(data("statistics of an empty window"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(Stats { mean, std: var.sqrt() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QoiStats {
    pub gamma_n: Stats,
    pub gamma_c: Stats,
    pub samples: usize,
}

/// Mean and standard deviation of both fluxes over samples with `t` in `[t_lo, t_hi]`.
pub fn temporal_stats(series: &QoiSeries, t_lo: f64, t_hi: f64) -> Result<QoiStats> {
    let idx: Vec<usize> = (0..series.len()).filter(|&i| (t_lo..=t_hi).contains(&series.times[i])).collect();
    if idx.is_empty() {
        return Err(data(format!("no samples in window [{t_lo}, {t_hi}]")));
    }
    let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    Ok(QoiStats { gamma_n: stats(&pick(&series.gamma_n))?, gamma_c: stats(&pick(&series.gamma_c))?, samples: idx.len() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencySpectrum {
    /// Cycles per unit time, bins `0..=len/2`.
    pub freq: Vec<f64>,
    /// `|DFT|` of the mean-removed series.
    pub magnitude: Vec<f64>,
}

/// Magnitude spectrum of a uniformly sampled series after removing its mean.
pub fn series_fft(times: &[f64], values: &[f64]) -> Result<FrequencySpectrum> {
    if times.len() != values.len() || times.len() < 2 {
        return Err(data("series_fft needs at least two samples with matching times"));
    }
    let dt = times[1] - times[0];
    let uniform = times.windows(2).all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.abs().max(1e-300));
    if !(dt > 0.0) || !uniform {
        return Err(data("series_fft requires uniformly increasing sample times"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    Ok(FrequencySpectrum {
        freq: (0..=half).map(|k| k as f64 / (n as f64 * dt)).collect(),
        magnitude: buf[..=half].iter().map(|c| c.norm()).collect(),
    })
}

impl FrequencySpectrum {
    pub fn write_csv(&self, w: &mut impl Write, label: &str) -> std::io::Result<()> {
        writeln!(w, "freq,{label}")?;
        for (f, m) in self.freq.iter().zip(&self.magnitude) {
            writeln!(w, "{f},{m}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadialSpectrum {
    /// Shell centres `s * k0`, strictly increasing.
    pub k_bins: Vec<f64>,
    /// Mean mode power in each shell.
    pub power: Vec<f64>,
    /// Modes per shell.
    pub counts: Vec<usize>,
}

impl RadialSpectrum {
    /// Sum of mode powers over every shell except the mean mode.
    pub fn fluctuation_power(&self) -> f64 {
        self.power.iter().zip(&self.counts).skip(1).map(|(p, &c)| p * c as f64).sum()
    }

    pub fn peak_index(&self) -> usize {
        (1..self.power.len()).fold(1, |best, i| if self.power[i] > self.power[best] { i } else { best })
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "k,power,modes")?;
        for i in 0..self.k_bins.len() {
            writeln!(w, "{},{},{}", self.k_bins[i], self.power[i], self.counts[i])?;
        }
        Ok(())
    }
}

/// Radial spectrum of `|grad phi|^2` (centered differences) in shells of
/// width `k0` centred on integer multiples of `k0`. Mode power is
/// `|F|^2 / n^4`, so the powers of all non-mean modes sum to the grid
/// variance of `|grad phi|^2`.
pub fn grad_phi_spectrum(state: &PlasmaState) -> RadialSpectrum {
    let grid = state.grid();
    let gx = fd_deriv(&state.phi, Axis::X);
    let gy = fd_deriv(&state.phi, Axis::Y);
    let g = gx.zip_map(&gy, |a, b| a * a + b * b);
    let spec = fft2(&g);
    let n = grid.n;
    let norm = 1.0 / (n as f64).powi(4);
    let shells = ((n / 2) as f64 * std::f64::consts::SQRT_2).ceil() as usize + 1;
    let mut sum = vec![0.0; shells];
    let mut counts = vec![0usize; shells];
    for iy in 0..n {
        for ix in 0..n {
            let (mx, my) = (grid.mode(ix) as f64, grid.mode(iy) as f64);
            let s = (mx * mx + my * my).sqrt().round() as usize;
            sum[s] += spec[iy * n + ix].norm_sqr() * norm;
            counts[s] += 1;
        }
    }
    let used = counts.iter().rposition(|&c| c > 0).map_or(0, |i| i + 1);
    RadialSpectrum {
        k_bins: (0..used).map(|s| s as f64 * grid.k0).collect(),
        power: (0..used).map(|s| if counts[s] > 0 { sum[s] / counts[s] as f64 } else { 0.0 }).collect(),
        counts: counts[..used].to_vec(),
    }
}

/// Least-squares slope of `ln(power)` against `ln(k)` over shells with `k` in `[k_lo, k_hi]`.
pub fn fit_loglog_slope(spectrum: &RadialSpectrum, k_lo: f64, k_hi: f64) -> Result<f64> {
    let pts: Vec<(f64, f64)> = spectrum
        .k_bins
        .iter()
        .zip(&spectrum.power)
        .filter(|(k, _)| **k >= k_lo && **k <= k_hi)
        .map(|(&k, &p)| (k, p))
        .collect();
    if pts.len() < 3 {
        return Err(data(format!("slope fit needs at least 3 shells in [{k_lo}, {k_hi}], found {}", pts.len())));
    }
    if pts.iter().any(|&(k, p)| !(k > 0.0) || !(p > 0.0)) {
        return Err(data("slope fit range contains non-positive wavenumber or power"));
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}
