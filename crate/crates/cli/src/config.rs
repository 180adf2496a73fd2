//! Layered run configuration: built-in reference values, then the config
//! file, then `--set section.key=value` overrides.

use std::path::PathBuf;

use toml::{Table, Value};

use crate::CliError;

/// Every key the tool understands, with its default.
pub const REFERENCE_CONFIG: &str = r#"# hwlab reference configuration.
# Sections map to commands; `hwlab <command> --config FILE --set section.key=value`.

[simulate]
# Number of independent runs.
instances = 1
# "reference" (c1=1, k0=0.6, kappa=1, c_pb=1), "sample" (uniform over the
# training ranges) or "explicit" (the four values below).
params = "reference"
c1 = 1.0
k0 = 0.6
kappa = 1.0
c_pb = 1.0
nu = 5e-10
# Hyperdiffusion exponent N in nu * lap^N.
order = 3
# "own_field" or "swapped".
hyperdiffusion = "own_field"
grid_n = 128
dt = 0.005
n_steps = 40000
# Steps between QoI samples.
snapshot_every = 20
# Keep every k-th sample in the trajectory file (0 writes none).
save_stride = 1
# Only samples with t >= save_after go to the trajectory file.
save_after = 0.0
grf_amplitude = 0.01
# Gaussian envelope width; 0 means four grid spacings.
grf_corr_length = 0.0
# "mean" (domain average) or "integral" for the QoI CSV.
qoi_normalization = "mean"

[dataset]
# Directory written by `hwlab simulate`.
trajectories = "runs/simulate"
train_fraction = 0.75
t_cut = 100.0
max_dt = 1.0
pairs_per_instance = 200
# "full", "reduced_instances" or "reduced_sampling".
reduced = "full"

[model]
base_width = 16
blocks_per_level = [1, 1, 1, 1]
bottleneck_blocks = 0
mix_convs_per_level = [1, 1, 1, 1]
# Multipliers for the dt_i, c1, k0, kappa, c_pb input planes.
param_scaling = [1.0, 1.0, 1.0, 1.0, 1.0]
# "f32" or "f64".
precision = "f32"

[train]
# Pair file written by `hwlab dataset`.
dataset = "runs/dataset/pairs.hwds"
lr = 3e-4
weight_decay = 0.01
batch_size = 30
epochs = 14
# Stop after this many optimizer steps (0: no limit).
max_steps = 0
omega_weight = 0.01
density_weight = 0.05

[eval]
checkpoint = "runs/train/best.ficw"
dataset = "runs/dataset/pairs.hwds"
# "train", "test" or "all".
split = "test"
# Only pairs with dt_i <= max_dt are scored.
max_dt = 1.0
batch_size = 16

[rollout]
checkpoint = "runs/train/best.ficw"
# Trajectory file written by `hwlab simulate`.
trajectory = "runs/simulate/traj_0000.hwtr"
# Index of the starting snapshot in that file.
start_index = 0
t_a = 1.0
n_steps = 100
qoi_normalization = "mean"

[diagnose]
trajectory = "runs/simulate/traj_0000.hwtr"
t_lo = 300.0
t_hi = 600.0
qoi_normalization = "mean"
# Wavenumber ranges for the two power-law fits of the |grad phi|^2 spectrum.
low_k = [0.6, 3.0]
high_k = [6.0, 20.0]

[invert]
checkpoint = "runs/train/best.ficw"
dataset = "runs/dataset/pairs.hwds"
split = "test"
trials = 1
n_pairs = 32
lr = 0.01
steps = 400
# "sample" draws the start from the training ranges; "explicit" uses the values below.
init_guess = "sample"
c1 = 1.0
k0 = 0.6
kappa = 1.0
c_pb = 1.0
# Pairs per forward/backward pass.
chunk = 8
"#;

pub fn reference() -> Table {
    REFERENCE_CONFIG.parse().expect("reference config parses")
}

/// Parse `key=value`; the value is read as TOML, falling back to a bare string.
fn parse_override(s: &str) -> Result<(Vec<String>, Value), CliError> {
    let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects key=value, got {s:?}")))?;
    let path: Vec<String> = k.trim().split('.').map(str::to_string).collect();
    if path.len() != 2 || path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set key must be section.key, got {k:?}")));
    }
    let v = v.trim();
    let value = format!("x = {v}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((path, value))
}

fn same_kind(a: &Value, b: &Value) -> bool {
    matches!(
        (a, b),
        (Value::String(_), Value::String(_))
            | (Value::Integer(_), Value::Integer(_))
            | (Value::Float(_), Value::Float(_) | Value::Integer(_))
            | (Value::Boolean(_), Value::Boolean(_))
            | (Value::Array(_), Value::Array(_))
    )
}

fn set(base: &mut Table, section: &str, key: &str, value: Value, origin: &str) -> Result<(), CliError> {
    let sec = base
        .get_mut(section)
        .and_then(Value::as_table_mut)
        .ok_or_else(|| CliError::Config(format!("{origin}: unknown section [{section}]")))?;
    let slot = sec.get_mut(key).ok_or_else(|| CliError::Config(format!("{origin}: unknown key {section}.{key}")))?;
    if !same_kind(slot, &value) {
        return Err(CliError::Config(format!("{origin}: {section}.{key} expects a {}, got {value}", slot.type_str())));
    }
    // Integers given for float keys are widened.
    *slot = match (&*slot, value) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    };
    Ok(())
}

/// Reference values overlaid with the file and then the overrides.
pub fn merge(file: Option<&str>, overrides: &[String]) -> Result<Table, CliError> {
    let mut base = reference();
    if let Some(text) = file {
        let user: Table = text.parse().map_err(|e| CliError::Config(format!("config file: {e}")))?;
        for (section, body) in user {
            let body = body
                .as_table()
                .ok_or_else(|| CliError::Config(format!("config file: top-level key {section} must be a [section]")))?;
            for (k, v) in body {
                set(&mut base, &section, k, v.clone(), "config file")?;
            }
        }
    }
    for o in overrides {
        let (path, value) = parse_override(o)?;
        set(&mut base, &path[0], &path[1], value, "--set")?;
    }
    Ok(base)
}

/// Typed access to one section of a merged config.
pub struct Section<'a> {
    name: &'static str,
    table: &'a Table,
}

impl<'a> Section<'a> {
    pub fn new(cfg: &'a Table, name: &'static str) -> Self {
        Section { name, table: cfg[name].as_table().expect("reference sections are tables") }
    }

    fn get(&self, key: &str) -> &Value {
        self.table.get(key).unwrap_or_else(|| panic!("reference config lacks {}.{key}", self.name))
    }

    fn bad(&self, key: &str, what: &str) -> CliError {
        CliError::Config(format!("{}.{key}: {what}", self.name))
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        match self.get(key) {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            _ => Err(self.bad(key, "expected a number")),
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        self.get(key).as_integer().and_then(|i| u64::try_from(i).ok()).ok_or_else(|| self.bad(key, "expected a non-negative integer"))
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        Ok(self.u64(key)? as usize)
    }

    pub fn str(&self, key: &str) -> Result<&'a str, CliError> {
        self.table.get(key).and_then(Value::as_str).ok_or_else(|| self.bad(key, "expected a string"))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.str(key)?))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.str(key)?.parse().map_err(|e: T::Err| self.bad(key, &e.to_string()))
    }

    pub fn f64_array<const N: usize>(&self, key: &str) -> Result<[f64; N], CliError> {
        let arr = self.get(key).as_array().ok_or_else(|| self.bad(key, "expected an array"))?;
        let vals: Vec<f64> = arr
            .iter()
            .map(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))
            .collect::<Option<_>>()
            .ok_or_else(|| self.bad(key, "expected numbers"))?;
        vals.try_into().map_err(|_| self.bad(key, &format!("expected {N} values")))
    }

    pub fn usize_array<const N: usize>(&self, key: &str) -> Result<[usize; N], CliError> {
        let arr = self.get(key).as_array().ok_or_else(|| self.bad(key, "expected an array"))?;
        let vals: Vec<usize> = arr
            .iter()
            .map(|v| v.as_integer().and_then(|i| usize::try_from(i).ok()))
            .collect::<Option<_>>()
            .ok_or_else(|| self.bad(key, "expected non-negative integers"))?;
        vals.try_into().map_err(|_| self.bad(key, &format!("expected {N} values")))
    }
}
