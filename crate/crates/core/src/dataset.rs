//! Snapshot pairs, instance-level train/test splits, and the binary
//! storage formats for pair datasets (`HWDS`) and trajectories (`HWTR`).
//!
//! Pair dataset layout (little-endian):
//!
//! ```text
//! b"HWDS"  version u32  grid n u32  record count u64
//! record: c1 k0 kappa c_pb (f64)  dt_i f64
//!         input omega, phi, n; target omega, n  (n*n f32 each, row-major)
//!         crc32 u32 over the record bytes above
//! ```
//!
//! Trajectory layout: `b"HWTR"`, version u32, grid n u32, c1 k0 kappa c_pb
//! nu (f64), order u32, snapshot count u64, then per snapshot `t` and the
//! omega, phi, n planes as f64 followed by a crc32 of those bytes.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{config, data, Error, Result};
use crate::hwsim::{HwParams, PlasmaState, Trajectory};
use crate::numerics::{Field, Grid, PoissonSolver};
use crate::rng;

pub const DATASET_MAGIC: &[u8; 4] = b"HWDS";
pub const TRAJECTORY_MAGIC: &[u8; 4] = b"HWTR";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_T_CUT: f64 = 100.0;

/// One training / inversion sample. Planes are stored at 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotPair {
    pub grid_n: usize,
    pub params: HwParams,
    /// Target time minus input time.
    pub dt_i: f64,
    pub input_omega: Vec<f32>,
    pub input_phi: Vec<f32>,
    pub input_n: Vec<f32>,
    pub target_omega: Vec<f32>,
    pub target_n: Vec<f32>,
}

fn to_f32(f: &Field) -> Vec<f32> {
    f.values.iter().map(|&v| v as f32).collect()
}

fn to_field(grid: Grid, v: &[f32]) -> Field {
    Field { grid, values: v.iter().map(|&x| f64::from(x)).collect() }
}

impl SnapshotPair {
    pub fn new(input: &PlasmaState, target: &PlasmaState, params: HwParams) -> Result<Self> {
        let dt_i = target.t - input.t;
        if !(dt_i > 0.0 && dt_i <= 1.0 + 1e-9) {
            return Err(data(format!("pair time gap {dt_i} outside (0, 1]")));
        }
        if input.grid() != target.grid() {
            return Err(data("pair states on different grids"));
        }
        Ok(SnapshotPair {
            grid_n: input.grid().n,
            params,
            dt_i,
            input_omega: to_f32(&input.omega),
            input_phi: to_f32(&input.phi),
            input_n: to_f32(&input.n),
            target_omega: to_f32(&target.omega),
            target_n: to_f32(&target.n),
        })
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid_n, self.params.k0)
    }

    /// Input state at `t = 0`, widened to f64.
    pub fn input_state(&self) -> Result<PlasmaState> {
        let g = self.grid()?;
        Ok(PlasmaState {
            omega: to_field(g, &self.input_omega),
            phi: to_field(g, &self.input_phi),
            n: to_field(g, &self.input_n),
            t: 0.0,
        })
    }

    /// Target state at `t = dt_i`, phi re-solved from the stored omega.
    pub fn target_state(&self) -> Result<PlasmaState> {
        let g = self.grid()?;
        let omega = to_field(g, &self.target_omega);
        let phi = PoissonSolver::new(g).solve(&omega);
        Ok(PlasmaState { omega, phi, n: to_field(g, &self.target_n), t: self.dt_i })
    }
}

/// Draw `count` distinct pairs `(input, input + m)` from a uniformly spaced
/// trajectory: `m` uniform over the offsets with `m * spacing <= max_dt`
/// that have at least one eligible input, then the input uniform among
/// snapshots with `t >= t_cut`. A repeated draw is discarded and redrawn.
pub fn extract_pairs<R: Rng + ?Sized>(
    snapshots: &[PlasmaState],
    params: &HwParams,
    max_dt: f64,
    t_cut: f64,
    rng: &mut R,
    count: usize,
) -> Result<Vec<SnapshotPair>> {
    if count == 0 {
        return Err(config("pair count must be at least 1"));
    }
    if !(max_dt > 0.0 && max_dt <= 1.0) {
        return Err(config(format!("max_dt must lie in (0, 1], got {max_dt}")));
    }
    if snapshots.len() < 2 {
        return Err(data("insufficient snapshots: need at least two"));
    }
    let spacing = snapshots[1].t - snapshots[0].t;
    let uniform = snapshots.windows(2).all(|w| ((w[1].t - w[0].t) - spacing).abs() <= 1e-9 * spacing.abs().max(1e-12));
    if !(spacing > 0.0) || !uniform {
        return Err(data("snapshots must be uniformly spaced in time"));
    }
    let first = snapshots.iter().position(|s| s.t >= t_cut - 1e-9 * spacing);
    let Some(first) = first else {
        return Err(data(format!("insufficient snapshots: none at or after t_cut = {t_cut}")));
    };
    let last = snapshots.len() - 1;
    let max_offset = ((max_dt / spacing) * (1.0 + 1e-9)).floor() as usize;
    // Offsets with at least one input index i in [first, last - m].
    let offsets: Vec<usize> = (1..=max_offset).filter(|&m| first + m <= last).collect();
    let capacity: usize = offsets.iter().map(|&m| last - m - first + 1).sum();
    if offsets.is_empty() || capacity < count {
        return Err(data(format!(
            "insufficient snapshots: {capacity} distinct pairs available after t_cut, {count} requested"
        )));
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let m = offsets[rng.random_range(0..offsets.len())];
        let i = rng.random_range(first..=last - m);
        if seen.insert((i, m)) {
            out.push(SnapshotPair::new(&snapshots[i], &snapshots[i + m], *params)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// A simulation instance as seen by the dataset builder.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceInfo {
    pub id: u64,
    pub seed: u64,
    pub params: HwParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub id: u64,
    pub seed: u64,
    pub params: HwParams,
    pub split: Split,
    /// Pairs drawn (or to be drawn) from this instance.
    pub pairs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub grid_n: usize,
    pub t_cut: f64,
    pub max_dt: f64,
    pub split_seed: u64,
    pub train_fraction: f64,
    /// Record order in the pair file follows this order.
    pub instances: Vec<InstanceRecord>,
}

/// Instance-level split: `round(fraction * n)` instances, chosen by a
/// seeded shuffle, go to training and the rest to testing.
pub fn split_instances(instances: &[InstanceInfo], train_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if instances.len() < 2 {
        return Err(config("splitting needs at least two instances"));
    }
    let n = instances.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if !(train_fraction > 0.0 && train_fraction < 1.0) || n_train == 0 || n_train >= n {
        return Err(config(format!("train fraction {train_fraction} leaves an empty side for {n} instances")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut is_train = vec![false; n];
    order[..n_train].iter().for_each(|&i| is_train[i] = true);
    let manifest = DatasetManifest {
        grid_n: 0,
        t_cut: DEFAULT_T_CUT,
        max_dt: 1.0,
        split_seed: seed,
        train_fraction,
        instances: instances
            .iter()
            .zip(is_train)
            .map(|(inst, tr)| InstanceRecord {
                id: inst.id,
                seed: inst.seed,
                params: inst.params,
                split: if tr { Split::Train } else { Split::Test },
                pairs: 0,
            })
            .collect(),
    };
    manifest.check_partition()?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReducedMode {
    Full,
    /// One third of the training instances.
    Instances,
    /// 30% of the pairs of every training instance.
    Sampling,
}

impl std::str::FromStr for ReducedMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "none" => Ok(ReducedMode::Full),
            "reduced_instances" | "instances" => Ok(ReducedMode::Instances),
            "reduced_sampling" | "sampling" => Ok(ReducedMode::Sampling),
            _ => Err(config(format!("unknown reduced mode {s:?} (full, reduced_instances, reduced_sampling)"))),
        }
    }
}

impl std::fmt::Display for ReducedMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReducedMode::Full => "full",
            ReducedMode::Instances => "reduced_instances",
            ReducedMode::Sampling => "reduced_sampling",
        })
    }
}

/// Reduced-data variant of a manifest. Test instances are untouched.
/// `Instances` keeps `round(n_train / 3)` training instances chosen by a
/// seeded shuffle; `Sampling` keeps `round(0.3 * pairs)` per training instance.
pub fn reduced_config(manifest: &DatasetManifest, mode: ReducedMode, seed: u64) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    match mode {
        ReducedMode::Full => {}
        ReducedMode::Instances => {
            let train: Vec<usize> = (0..out.instances.len()).filter(|&i| out.instances[i].split == Split::Train).collect();
            let keep_n = ((train.len() as f64) / 3.0).round().max(1.0) as usize;
            let mut shuffled = train.clone();
            shuffled.shuffle(&mut rng::seeded(seed));
            let keep: HashSet<usize> = shuffled[..keep_n].iter().copied().collect();
            out.instances = (0..out.instances.len())
                .filter(|i| out.instances[*i].split == Split::Test || keep.contains(i))
                .map(|i| out.instances[i].clone())
                .collect();
        }
        ReducedMode::Sampling => {
            for inst in out.instances.iter_mut().filter(|i| i.split == Split::Train) {
                inst.pairs = ((inst.pairs as f64) * 0.3).round() as u64;
            }
        }
    }
    out.check_partition()?;
    Ok(out)
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.instances.iter().filter(|i| i.split == split).count()
    }

    pub fn pairs_in(&self, split: Split) -> u64 {
        self.instances.iter().filter(|i| i.split == split).map(|i| i.pairs).sum()
    }

    pub fn total_pairs(&self) -> u64 {
        self.instances.iter().map(|i| i.pairs).sum()
    }

    /// Every id appears once, so no instance lies on both sides of the split.
    pub fn check_partition(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for inst in &self.instances {
            if !ids.insert(inst.id) {
                return Err(data(format!("instance {} appears more than once: train/test leakage", inst.id)));
            }
        }
        let train: HashSet<u64> = self.instances.iter().filter(|i| i.split == Split::Train).map(|i| i.id).collect();
        let test: HashSet<u64> = self.instances.iter().filter(|i| i.split == Split::Test).map(|i| i.id).collect();
        if !train.is_disjoint(&test) {
            return Err(data("train and test splits share instances"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("format = hwlab-manifest-1\n");
        s.push_str(&format!("grid_n = {}\n", self.grid_n));
        s.push_str(&format!("t_cut = {}\n", self.t_cut));
        s.push_str(&format!("max_dt = {}\n", self.max_dt));
        s.push_str(&format!("split_seed = {}\n", self.split_seed));
        s.push_str(&format!("train_fraction = {}\n", self.train_fraction));
        s.push_str(&format!("instances = {}\n", self.instances.len()));
        for (k, inst) in self.instances.iter().enumerate() {
            let p = &inst.params;
            s.push_str(&format!("instance.{k}.id = {}\n", inst.id));
            s.push_str(&format!("instance.{k}.seed = {}\n", inst.seed));
            s.push_str(&format!("instance.{k}.params = {},{},{},{}\n", p.c1, p.k0, p.kappa, p.c_pb));
            s.push_str(&format!("instance.{k}.split = {}\n", inst.split));
            s.push_str(&format!("instance.{k}.pairs = {}\n", inst.pairs));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| data(format!("manifest line {}: expected key = value", ln + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| data(format!("manifest missing key {k}")));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| data(format!("manifest key {k}: cannot parse {v:?}")))
        }
        if get("format")? != "hwlab-manifest-1" {
            return Err(data("unsupported manifest format"));
        }
        let count: usize = num("instances", get("instances")?)?;
        let mut instances = Vec::with_capacity(count);
        for k in 0..count {
            let key = |f: &str| format!("instance.{k}.{f}");
            let ps: Vec<f64> = get(&key("params"))?
                .split(',')
                .map(|x| num(&key("params"), x.trim()))
                .collect::<Result<_>>()?;
            if ps.len() != 4 {
                return Err(data(format!("{} needs four values", key("params"))));
            }
            let split = match get(&key("split"))?.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(data(format!("{}: unknown split {other:?}", key("split")))),
            };
            instances.push(InstanceRecord {
                id: num(&key("id"), get(&key("id"))?)?,
                seed: num(&key("seed"), get(&key("seed"))?)?,
                params: HwParams::new(ps[0], ps[1], ps[2], ps[3]),
                split,
                pairs: num(&key("pairs"), get(&key("pairs"))?)?,
            });
        }
        let m = DatasetManifest {
            grid_n: num("grid_n", get("grid_n")?)?,
            t_cut: num("t_cut", get("t_cut")?)?,
            max_dt: num("max_dt", get("max_dt")?)?,
            split_seed: num("split_seed", get("split_seed")?)?,
            train_fraction: num("train_fraction", get("train_fraction")?)?,
            instances,
        };
        m.check_partition()?;
        Ok(m)
    }

    /// Split `pairs` (stored in manifest order) into `(train, test)`.
    pub fn partition_pairs(&self, pairs: Vec<SnapshotPair>) -> Result<(Vec<SnapshotPair>, Vec<SnapshotPair>)> {
        if pairs.len() as u64 != self.total_pairs() {
            return Err(data(format!("manifest lists {} pairs, file holds {}", self.total_pairs(), pairs.len())));
        }
        let mut it = pairs.into_iter();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for inst in &self.instances {
            let dst = if inst.split == Split::Train { &mut train } else { &mut test };
            dst.extend(it.by_ref().take(inst.pairs as usize));
        }
        Ok((train, test))
    }
}

/// Manifest path stored next to a pair file.
pub fn manifest_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("manifest")
}

fn put_plane(buf: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_pairs(grid_n: usize, pairs: &[SnapshotPair]) -> Result<Vec<u8>> {
    let plane = grid_n * grid_n;
    let mut buf = Vec::with_capacity(20 + pairs.len() * (44 + 20 * plane));
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(grid_n as u32).to_le_bytes());
    buf.extend_from_slice(&(pairs.len() as u64).to_le_bytes());
    for p in pairs {
        let planes = [&p.input_omega, &p.input_phi, &p.input_n, &p.target_omega, &p.target_n];
        if p.grid_n != grid_n || planes.iter().any(|v| v.len() != plane) {
            return Err(data("pair grid size differs from the dataset grid"));
        }
        let start = buf.len();
        for v in p.params.scalars().into_iter().chain([p.dt_i]) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in planes {
            put_plane(&mut buf, v);
        }
        let crc = crc32fast::hash(&buf[start..]);
        buf.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(data("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<usize> {
        if self.take(4)? != magic {
            return Err(data(format!("bad magic, expected {:?}", std::str::from_utf8(magic).unwrap())));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(data(format!("unsupported format version {version}")));
        }
        Ok(self.u32()? as usize)
    }
}

pub fn decode_pairs(bytes: &[u8]) -> Result<(usize, Vec<SnapshotPair>)> {
    let mut r = Reader { bytes, pos: 0 };
    let grid_n = r.header(DATASET_MAGIC)?;
    let count = r.u64()?;
    let plane = grid_n * grid_n;
    let mut pairs = Vec::new();
    for record in 0..count {
        let start = r.pos;
        let s = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let dt_i = r.f64()?;
        let planes = [r.f32s(plane)?, r.f32s(plane)?, r.f32s(plane)?, r.f32s(plane)?, r.f32s(plane)?];
        let body = &bytes[start..r.pos];
        if crc32fast::hash(body) != r.u32()? {
            return Err(Error::Checksum { record });
        }
        let [input_omega, input_phi, input_n, target_omega, target_n] = planes;
        pairs.push(SnapshotPair {
            grid_n,
            params: HwParams::new(s[0], s[1], s[2], s[3]),
            dt_i,
            input_omega,
            input_phi,
            input_n,
            target_omega,
            target_n,
        });
    }
    if r.pos != bytes.len() {
        return Err(data("trailing bytes after last record"));
    }
    Ok((grid_n, pairs))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|source| Error::MissingInput { path: path.to_path_buf(), source })?
        .read_to_end(&mut bytes)?;
    Ok(bytes)
}

/// Write the pair file at `path` and its manifest next to it.
pub fn write_dataset(path: &Path, pairs: &[SnapshotPair], manifest: &DatasetManifest) -> Result<()> {
    manifest.check_partition()?;
    if pairs.len() as u64 != manifest.total_pairs() {
        return Err(data(format!("manifest lists {} pairs, writing {}", manifest.total_pairs(), pairs.len())));
    }
    let bytes = encode_pairs(manifest.grid_n, pairs)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    std::fs::write(manifest_path(path), manifest.to_text())?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(Vec<SnapshotPair>, DatasetManifest)> {
    let (grid_n, pairs) = decode_pairs(&read_all(path)?)?;
    let mpath = manifest_path(path);
    let text = String::from_utf8(read_all(&mpath)?).map_err(|_| data("manifest is not UTF-8"))?;
    let manifest = DatasetManifest::parse(&text)?;
    if manifest.grid_n != grid_n {
        return Err(data(format!("manifest grid {} vs file grid {grid_n}", manifest.grid_n)));
    }
    if manifest.total_pairs() != pairs.len() as u64 {
        return Err(data(format!("manifest lists {} pairs, file holds {}", manifest.total_pairs(), pairs.len())));
    }
    Ok((pairs, manifest))
}

fn snapshot_bytes(state: &PlasmaState, buf: &mut Vec<u8>) {
    buf.clear();
    buf.extend_from_slice(&state.t.to_le_bytes());
    for f in [&state.omega, &state.phi, &state.n] {
        for v in &f.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Streams snapshots to an `HWTR` file; the count is patched on `finish`.
pub struct TrajectoryWriter {
    out: BufWriter<File>,
    grid_n: usize,
    count: u64,
    buf: Vec<u8>,
}

const TRAJECTORY_COUNT_OFFSET: u64 = 4 + 4 + 4 + 5 * 8 + 4;

impl TrajectoryWriter {
    pub fn create(path: &Path, grid_n: usize, params: &HwParams) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(TRAJECTORY_MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(grid_n as u32).to_le_bytes())?;
        for v in params.scalars().into_iter().chain([params.nu]) {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&params.order.to_le_bytes())?;
        out.write_all(&0u64.to_le_bytes())?;
        Ok(TrajectoryWriter { out, grid_n, count: 0, buf: Vec::new() })
    }

    pub fn push(&mut self, state: &PlasmaState) -> Result<()> {
        if state.grid().n != self.grid_n {
            return Err(data("snapshot grid differs from the trajectory grid"));
        }
        snapshot_bytes(state, &mut self.buf);
        self.out.write_all(&self.buf)?;
        self.out.write_all(&crc32fast::hash(&self.buf).to_le_bytes())?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64> {
        self.out.flush()?;
        let mut f = self.out.into_inner().map_err(|e| e.into_error())?;
        f.seek(SeekFrom::Start(TRAJECTORY_COUNT_OFFSET))?;
        f.write_all(&self.count.to_le_bytes())?;
        f.sync_all()?;
        Ok(self.count)
    }
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let grid = traj.grid().ok_or_else(|| data("empty trajectory"))?;
    let mut w = TrajectoryWriter::create(path, grid.n, &traj.params)?;
    for s in &traj.snapshots {
        w.push(s)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let bytes = read_all(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let grid_n = r.header(TRAJECTORY_MAGIC)?;
    let s = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
    let nu = r.f64()?;
    let order = r.u32()?;
    let params = HwParams { nu, order, ..HwParams::new(s[0], s[1], s[2], s[3]) };
    let grid = Grid::new(grid_n, params.k0)?;
    let count = r.u64()?;
    let plane = grid.len();
    let mut snapshots = Vec::new();
    for record in 0..count {
        let start = r.pos;
        let t = r.f64()?;
        let omega = Field { grid, values: r.f64s(plane)? };
        let phi = Field { grid, values: r.f64s(plane)? };
        let n = Field { grid, values: r.f64s(plane)? };
        if crc32fast::hash(&bytes[start..r.pos]) != r.u32()? {
            return Err(Error::Checksum { record });
        }
        snapshots.push(PlasmaState { omega, phi, n, t });
    }
    if r.pos != bytes.len() {
        return Err(data("trailing bytes after last snapshot"));
    }
    Ok(Trajectory { params, snapshots, stats: Default::default() })
}
