//! FI-Conv: a U-Net with ConvNeXt-V2 encoder blocks that maps
//! (omega, phi, n, dt_i, c1, k0, kappa, c_pb) to the increments of
//! (omega, n), with the output tied to the input state at `dt_i = 0`.
//!
//! Every spatial convolution pads circularly; the 2x2 stride-2
//! down/up-sampling layers tile the grid exactly and need no padding.

use std::path::Path;

use hwlab_autodiff::{checkpoint, init, Checkpoint, ConvSpec, PaddingMode, Precision, Real, Shape, Tape, Tensor, Var};

use crate::dataset::SnapshotPair;
use crate::error::{config, data, Error, Result};
use crate::hwsim::{HwParams, PlasmaState};
use crate::numerics::Field;
use crate::rng;

pub const IN_CHANNELS: usize = 8;
pub const OUT_CHANNELS: usize = 2;
pub const LEVELS: usize = 4;
/// Output scale of the omega increment.
pub const OMEGA_SCALE: f64 = 100.0;
/// Output scale of the density increment.
pub const DENSITY_SCALE: f64 = 20.0;
const DW_KERNEL: usize = 7;
const EXPANSION: usize = 4;
const NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct FiConvConfig {
    pub grid_n: usize,
    pub base_width: usize,
    pub blocks_per_level: [usize; LEVELS],
    /// ConvNeXt-V2 blocks at the coarsest resolution, after the last downsampling.
    pub bottleneck_blocks: usize,
    /// 3x3 convolutions (each followed by GELU) after every skip concatenation; at least 1.
    pub mix_convs_per_level: [usize; LEVELS],
    /// Multipliers for the dt_i, c1, k0, kappa, c_pb input planes.
    pub param_scaling: [f64; 5],
    pub precision: Precision,
}

impl Default for FiConvConfig {
    fn default() -> Self {
        FiConvConfig {
            grid_n: 32,
            base_width: 16,
            blocks_per_level: [1; LEVELS],
            bottleneck_blocks: 0,
            mix_convs_per_level: [1; LEVELS],
            param_scaling: [1.0; 5],
            precision: Precision::F32,
        }
    }
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct WeightSpec {
    name: String,
    shape: Shape,
    init: Init,
}

fn conv_specs(out: &mut Vec<WeightSpec>, name: &str, cout: usize, cin: usize, k: usize) {
    out.push(WeightSpec { name: format!("{name}.weight"), shape: [cout, cin, k, k], init: Init::Normal });
    out.push(WeightSpec { name: format!("{name}.bias"), shape: [cout, 1, 1, 1], init: Init::Zeros });
}

fn block_specs(out: &mut Vec<WeightSpec>, name: &str, c: usize) {
    let h = EXPANSION * c;
    out.push(WeightSpec { name: format!("{name}.dw.weight"), shape: [c, 1, DW_KERNEL, DW_KERNEL], init: Init::Normal });
    out.push(WeightSpec { name: format!("{name}.dw.bias"), shape: [c, 1, 1, 1], init: Init::Zeros });
    out.push(WeightSpec { name: format!("{name}.norm.gamma"), shape: [c, 1, 1, 1], init: Init::Ones });
    out.push(WeightSpec { name: format!("{name}.norm.beta"), shape: [c, 1, 1, 1], init: Init::Zeros });
    conv_specs(out, &format!("{name}.expand"), h, c, 1);
    out.push(WeightSpec { name: format!("{name}.grn.gamma"), shape: [h, 1, 1, 1], init: Init::Zeros });
    out.push(WeightSpec { name: format!("{name}.grn.beta"), shape: [h, 1, 1, 1], init: Init::Zeros });
    conv_specs(out, &format!("{name}.contract"), c, h, 1);
}

impl FiConvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_n < 16 || self.grid_n % 16 != 0 {
            return Err(config(format!("model grid n = {} must be a positive multiple of 16", self.grid_n)));
        }
        if self.base_width < 4 {
            return Err(config(format!("base_width = {} must be at least 4", self.base_width)));
        }
        if self.mix_convs_per_level.contains(&0) {
            return Err(config("mix_convs_per_level entries must be at least 1"));
        }
        if self.param_scaling.iter().any(|s| !s.is_finite()) {
            return Err(config("param_scaling entries must be finite"));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Every weight tensor in forward order.
    fn weight_specs(&self) -> Vec<WeightSpec> {
        let mut out = Vec::new();
        let w = self.base_width;
        conv_specs(&mut out, "stem", w, IN_CHANNELS, 3);
        for l in 0..LEVELS {
            let c = self.width(l);
            for b in 0..self.blocks_per_level[l] {
                block_specs(&mut out, &format!("enc{l}.block{b}"), c);
            }
            conv_specs(&mut out, &format!("enc{l}.down"), 2 * c, c, 2);
        }
        for b in 0..self.bottleneck_blocks {
            block_specs(&mut out, &format!("mid.block{b}"), self.width(LEVELS));
        }
        for l in (0..LEVELS).rev() {
            let c = self.width(l);
            // Transposed weights are [in, out, k, k]; the bias has `out` entries.
            out.push(WeightSpec { name: format!("dec{l}.up.weight"), shape: [2 * c, c, 2, 2], init: Init::Normal });
            out.push(WeightSpec { name: format!("dec{l}.up.bias"), shape: [c, 1, 1, 1], init: Init::Zeros });
            conv_specs(&mut out, &format!("dec{l}.mix"), c, 2 * c, 3);
            for m in 1..self.mix_convs_per_level[l] {
                conv_specs(&mut out, &format!("dec{l}.mix{m}"), c, c, 3);
            }
        }
        conv_specs(&mut out, "head", OUT_CHANNELS, w, 1);
        out
    }

    pub fn to_text(&self) -> String {
        let b = self.blocks_per_level.map(|v| v.to_string()).join(",");
        let m = self.mix_convs_per_level.map(|v| v.to_string()).join(",");
        let s = self.param_scaling.map(|v| v.to_string()).join(",");
        format!(
            "model = ficonv\ngrid_n = {}\nbase_width = {}\nblocks_per_level = {b}\nbottleneck_blocks = {}\nmix_convs_per_level = {m}\nparam_scaling = {s}\nprecision = {}\n",
            self.grid_n, self.base_width, self.bottleneck_blocks, self.precision
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = FiConvConfig::default();
        let mut seen_model = false;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| data(format!("model header line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || data(format!("model header: cannot parse {k} = {v}"));
            match k {
                "model" => seen_model = v == "ficonv",
                "grid_n" => cfg.grid_n = v.parse().map_err(|_| bad())?,
                "base_width" => cfg.base_width = v.parse().map_err(|_| bad())?,
                "bottleneck_blocks" => cfg.bottleneck_blocks = v.parse().map_err(|_| bad())?,
                "blocks_per_level" => {
                    let vals: Vec<usize> = v.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
                    cfg.blocks_per_level = vals.try_into().map_err(|_| bad())?;
                }
                "mix_convs_per_level" => {
                    let vals: Vec<usize> = v.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
                    cfg.mix_convs_per_level = vals.try_into().map_err(|_| bad())?;
                }
                "param_scaling" => {
                    let vals: Vec<f64> = v.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
                    cfg.param_scaling = vals.try_into().map_err(|_| bad())?;
                }
                "precision" => cfg.precision = v.parse().map_err(|_| bad())?,
                _ => return Err(data(format!("model header: unknown key {k}"))),
            }
        }
        if !seen_model {
            return Err(data("checkpoint header does not describe an FI-Conv model"));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Closed-form trainable parameter count.
pub fn count_params(cfg: &FiConvConfig) -> usize {
    let w = cfg.base_width;
    let block = |c: usize| 8 * c * c + 65 * c;
    let mut total = 73 * w + 2 * w + 2;
    for l in 0..LEVELS {
        let c = cfg.width(l);
        // down 8c^2 + 2c, up 8c^2 + c, first mix 18c^2 + c, further mixes 9c^2 + c
        total += cfg.blocks_per_level[l] * block(c) + 34 * c * c + 4 * c;
        total += (cfg.mix_convs_per_level[l] - 1) * (9 * c * c + c);
    }
    total + cfg.bottleneck_blocks * block(cfg.width(LEVELS))
}

/// Widths and depths that reach the published full-scale parameter count
/// of 31,004,978 for a 128 x 128 grid.
pub fn full_scale_config() -> FiConvConfig {
    FiConvConfig {
        grid_n: 128,
        base_width: 48,
        blocks_per_level: [3, 1, 0, 0],
        bottleneck_blocks: 5,
        mix_convs_per_level: [2, 1, 2, 1],
        ..FiConvConfig::default()
    }
}

/// Tape handles of a bound model.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
    fn pair(&mut self) -> (Var, Var) {
        let w = self.next();
        (w, self.next())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: FiConvConfig,
    weights: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Model<T> {
    /// Truncated-normal (std 0.02) weights, zero biases, unit LayerNorm scales.
    pub fn new(config: FiConvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.precision != T::PRECISION {
            return Err(config_err_precision(&config, T::PRECISION));
        }
        let mut r = rng::stream(seed, "model-init");
        let weights = config
            .weight_specs()
            .into_iter()
            .map(|s| {
                let t = match s.init {
                    Init::Normal => init::trunc_normal(s.shape, INIT_STD, &mut r),
                    Init::Zeros => Tensor::zeros(s.shape),
                    Init::Ones => Tensor::full(s.shape, T::one()),
                };
                (s.name, t)
            })
            .collect();
        Ok(Model { config, weights })
    }

    pub fn config(&self) -> &FiConvConfig {
        &self.config
    }

    pub fn weights(&self) -> &[(String, Tensor<T>)] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.weights.iter_mut().map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|(_, t)| t.all_finite())
    }

    /// CRC32 over the little-endian bytes of every weight.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        let mut buf = Vec::new();
        for (name, t) in &self.weights {
            h.update(name.as_bytes());
            buf.clear();
            t.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        h.finalize()
    }

    /// Place every weight on `tape`; `trainable` decides whether they collect gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound { vars: self.weights.iter().map(|(_, t)| tape.leaf(t.clone(), trainable)).collect() }
    }

    /// Raw two-channel output for an `[B, 8, n, n]` input.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, bound: &Bound, input: Var) -> Result<Var> {
        let [_, c, h, w] = tape.shape(input);
        let n = self.config.grid_n;
        if c != IN_CHANNELS || h != n || w != n {
            return Err(data(format!("model expects [B, {IN_CHANNELS}, {n}, {n}] input, got {:?}", tape.shape(input))));
        }
        let mut cur = Cursor { vars: &bound.vars, pos: 0 };
        let same3 = ConvSpec::same(3, PaddingMode::Circular);
        let half = ConvSpec::strided(2);
        let (sw, sb) = cur.pair();
        let mut x = tape.conv2d(input, sw, Some(sb), same3)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            for _ in 0..self.config.blocks_per_level[l] {
                x = block(tape, &mut cur, x)?;
            }
            skips.push(x);
            let (dw, db) = cur.pair();
            x = tape.conv2d(x, dw, Some(db), half)?;
        }
        for _ in 0..self.config.bottleneck_blocks {
            x = block(tape, &mut cur, x)?;
        }
        for l in (0..LEVELS).rev() {
            let (uw, ub) = cur.pair();
            x = tape.conv_transpose2d(x, uw, Some(ub), half)?;
            x = tape.concat_channels(&[x, skips[l]])?;
            let (mw, mb) = cur.pair();
            x = tape.conv2d(x, mw, Some(mb), same3)?;
            x = tape.gelu(x);
            for _ in 1..self.config.mix_convs_per_level[l] {
                let (mw, mb) = cur.pair();
                x = tape.conv2d(x, mw, Some(mb), same3)?;
                x = tape.gelu(x);
            }
        }
        let (hw, hb) = cur.pair();
        let out = tape.linear(x, hw, Some(hb))?;
        debug_assert_eq!(cur.pos, bound.vars.len());
        Ok(out)
    }

    /// Forward pass without gradient tracking.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let out = self.forward_on_tape(&mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint { header: self.config.to_text(), tensors: self.weights.clone() }
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let config = FiConvConfig::parse(&ckpt.header)?;
        if config.precision != T::PRECISION {
            return Err(config_err_precision(&config, T::PRECISION));
        }
        let specs = config.weight_specs();
        if specs.len() != ckpt.tensors.len() {
            return Err(data(format!("checkpoint has {} tensors, model needs {}", ckpt.tensors.len(), specs.len())));
        }
        for (s, (name, t)) in specs.iter().zip(&ckpt.tensors) {
            if &s.name != name || s.shape != t.shape() {
                return Err(data(format!("checkpoint tensor {name} {:?} does not match {} {:?}", t.shape(), s.name, s.shape)));
            }
        }
        Ok(Model { config, weights: ckpt.tensors })
    }

    /// The same weights at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let config = FiConvConfig { precision: U::PRECISION, ..self.config.clone() };
        Model { config, weights: self.weights.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = checkpoint::read_bytes(path).map_err(|e| match e {
            hwlab_autodiff::AutodiffError::Io(source) => Error::MissingInput { path: path.to_path_buf(), source },
            other => other.into(),
        })?;
        Self::from_checkpoint(checkpoint::decode(&bytes)?)
    }
}

fn config_err_precision(cfg: &FiConvConfig, actual: Precision) -> Error {
    config(format!("model precision {} does not match element type {actual}", cfg.precision))
}

/// Precision stored in a checkpoint file.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = checkpoint::read_bytes(path)
        .map_err(|e| match e {
            hwlab_autodiff::AutodiffError::Io(source) => Error::MissingInput { path: path.to_path_buf(), source },
            other => other.into(),
        })?;
    Ok(checkpoint::peek_precision(&bytes)?)
}

fn block<T: Real>(tape: &mut Tape<T>, cur: &mut Cursor<'_>, x: Var) -> Result<Var> {
    let (dw, db) = cur.pair();
    let mut y = tape.depthwise_conv2d(x, dw, Some(db), PaddingMode::Circular)?;
    let (g, b) = cur.pair();
    y = tape.layer_norm(y, g, b, NORM_EPS)?;
    let (ew, eb) = cur.pair();
    y = tape.linear(y, ew, Some(eb))?;
    y = tape.gelu(y);
    let (g, b) = cur.pair();
    y = tape.grn(y, g, b, NORM_EPS)?;
    let (cw, cb) = cur.pair();
    y = tape.linear(y, cw, Some(cb))?;
    Ok(tape.add(x, y)?)
}

/// The 8-channel input `[1, 8, n, n]`: omega, phi, n, then dt_i, c1, k0,
/// kappa, c_pb as constant planes, each multiplied by its scaling entry.
pub fn assemble_input<T: Real>(state: &PlasmaState, dt_i: f64, params: &HwParams, cfg: &FiConvConfig) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&dt_i) {
        return Err(data(format!("dt_i = {dt_i} outside [0, 1]")));
    }
    let n = state.grid().n;
    if n != cfg.grid_n {
        return Err(data(format!("state grid {n} vs model grid {}", cfg.grid_n)));
    }
    let plane = n * n;
    let mut v = Vec::with_capacity(IN_CHANNELS * plane);
    for f in [&state.omega, &state.phi, &state.n] {
        v.extend(f.values.iter().map(|&x| T::from_f64(x)));
    }
    let s = params.scalars();
    let scalars = [dt_i, s[0], s[1], s[2], s[3]];
    for (x, k) in scalars.iter().zip(cfg.param_scaling) {
        v.extend(std::iter::repeat_n(T::from_f64(x * k), plane));
    }
    Ok(Tensor::from_vec([1, IN_CHANNELS, n, n], v)?)
}

/// Tensors for a batch of pairs. Scalars are `[B, 1, 1, 1]`, planes `[B, 1, n, n]`.
#[derive(Clone, Debug)]
pub struct PairBatch<T> {
    pub fields: Tensor<T>,
    pub dt: Tensor<T>,
    /// c1, k0, kappa, c_pb.
    pub scalars: [Tensor<T>; 4],
    pub omega_in: Tensor<T>,
    pub n_in: Tensor<T>,
    pub omega_target: Tensor<T>,
    pub n_target: Tensor<T>,
}

impl<T: Real> PairBatch<T> {
    pub fn from_pairs(pairs: &[&SnapshotPair]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| data("empty batch"))?;
        let n = first.grid_n;
        let bsz = pairs.len();
        fn conv<T: Real>(v: &[f32]) -> impl Iterator<Item = T> + '_ {
            v.iter().map(|&x| T::from_f64(f64::from(x)))
        }
        let mut fields = Vec::with_capacity(bsz * 3 * n * n);
        let mut planes: [Vec<T>; 4] = Default::default();
        let mut scalars: [Vec<T>; 4] = Default::default();
        let mut dt = Vec::with_capacity(bsz);
        for p in pairs {
            if p.grid_n != n {
                return Err(data("pairs in one batch must share the grid"));
            }
            fields.extend(conv::<T>(&p.input_omega));
            fields.extend(conv::<T>(&p.input_phi));
            fields.extend(conv::<T>(&p.input_n));
            planes[0].extend(conv::<T>(&p.input_omega));
            planes[1].extend(conv::<T>(&p.input_n));
            planes[2].extend(conv::<T>(&p.target_omega));
            planes[3].extend(conv::<T>(&p.target_n));
            dt.push(T::from_f64(p.dt_i));
            for (dst, v) in scalars.iter_mut().zip(p.params.scalars()) {
                dst.push(T::from_f64(v));
            }
        }
        let [oi, ni, ot, nt] = planes.map(|v| Tensor::from_vec([bsz, 1, n, n], v));
        let sc = scalars.map(|v| Tensor::from_vec([bsz, 1, 1, 1], v));
        let [s0, s1, s2, s3] = sc;
        Ok(PairBatch {
            fields: Tensor::from_vec([bsz, 3, n, n], fields)?,
            dt: Tensor::from_vec([bsz, 1, 1, 1], dt)?,
            scalars: [s0?, s1?, s2?, s3?],
            omega_in: oi?,
            n_in: ni?,
            omega_target: ot?,
            n_target: nt?,
        })
    }

    pub fn len(&self) -> usize {
        self.dt.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Build the 8-channel input on the tape from field and scalar handles, so
/// that gradients can reach the scalars.
pub fn input_on_tape<T: Real>(tape: &mut Tape<T>, cfg: &FiConvConfig, fields: Var, dt: Var, scalars: [Var; 4]) -> Result<Var> {
    let [bsz, _, h, w] = tape.shape(fields);
    let mut parts = vec![fields];
    for (s, k) in std::iter::once(dt).chain(scalars).zip(cfg.param_scaling) {
        let p = tape.plane(s, bsz, h, w)?;
        parts.push(if k == 1.0 { p } else { tape.scale(p, k) });
    }
    Ok(tape.concat_channels(&parts)?)
}

/// Hard initial-condition constraint on the tape:
/// `omega = dt * raw_omega * 100 + omega_in`, `n = dt * raw_n * 20 + n_in`.
pub fn constrain_on_tape<T: Real>(tape: &mut Tape<T>, raw: Var, dt: Var, omega_in: Var, n_in: Var) -> Result<(Var, Var)> {
    let ro = tape.slice_channels(raw, 0, 1)?;
    let rn = tape.slice_channels(raw, 1, 1)?;
    let ro = tape.mul_per_sample(ro, dt)?;
    let rn = tape.mul_per_sample(rn, dt)?;
    let ro = tape.scale(ro, OMEGA_SCALE);
    let rn = tape.scale(rn, DENSITY_SCALE);
    Ok((tape.add(ro, omega_in)?, tape.add(rn, n_in)?))
}

fn constrained(input: f64, raw: f64, dt: f64, scale: f64) -> f64 {
    let inc = dt * raw * scale;
    // Keeps the input bit pattern (including -0.0) when nothing is added.
    if inc == 0.0 {
        input
    } else {
        inc + input
    }
}

/// Apply the hard constraint to a raw `[1, 2, n, n]` output.
pub fn apply_hard_constraint<T: Real>(raw: &Tensor<T>, dt_i: f64, input: &PlasmaState) -> Result<(Field, Field)> {
    let grid = input.grid();
    let [b, c, h, w] = raw.shape();
    if b != 1 || c != OUT_CHANNELS || h != grid.n || w != grid.n {
        return Err(data(format!("raw output {:?} does not match a single {}x{} state", raw.shape(), grid.n, grid.n)));
    }
    let omega = input.omega.zip_map(&Field { grid, values: raw.plane(0, 0).iter().map(|v| v.as_f64()).collect() }, |i, r| {
        constrained(i, r, dt_i, OMEGA_SCALE)
    });
    let n = input.n.zip_map(&Field { grid, values: raw.plane(0, 1).iter().map(|v| v.as_f64()).collect() }, |i, r| {
        constrained(i, r, dt_i, DENSITY_SCALE)
    });
    Ok((omega, n))
}

/// One-step prediction of (omega, n) at `dt_i` ahead.
pub fn predict<T: Real>(model: &Model<T>, state: &PlasmaState, dt_i: f64, params: &HwParams) -> Result<(Field, Field)> {
    let x = assemble_input::<T>(state, dt_i, params, model.config())?;
    let raw = model.forward(&x)?;
    apply_hard_constraint(&raw, dt_i, state)
}
