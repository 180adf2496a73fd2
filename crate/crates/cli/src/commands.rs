use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hwlab::autodiff::{Precision, Real};
use hwlab::dataset::{
    extract_pairs, read_dataset, read_trajectory, reduced_config, split_instances, write_dataset, write_trajectory,
    DatasetManifest, InstanceInfo, ReducedMode, SnapshotPair, Split, TrajectoryWriter,
};
use hwlab::diagnostics::{fit_loglog_slope, grad_phi_spectrum, qoi_series, series_fft, temporal_stats, QoiNormalization, QoiSeries, RadialSpectrum};
use hwlab::ficonv::{checkpoint_precision, FiConvConfig, Model};
use hwlab::hwsim::{run_ensemble, sample_params, simulate_with, HwParams, Hyperdiffusion, SimConfig, Trajectory};
use hwlab::learn::{self, InverseConfig, RolloutConfig, TrainConfig};
use hwlab::rng::{derive_indexed, derive_seed, seeded};
use toml::Table;

use crate::config::{merge, Section};
use crate::{CliError, RunArgs};

type Result<T, E = CliError> = std::result::Result<T, E>;

/// Merge the config, prepare `--out`, echo the effective config, then run.
pub fn with_config(name: &str, args: &RunArgs, f: fn(&Table, &Path, u64) -> Result<()>) -> Result<()> {
    let text = match &args.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let cfg = merge(text.as_deref(), &args.overrides)?;
    std::fs::create_dir_all(&args.out).map_err(CliError::io(&args.out))?;
    let echo = format!(
        "# effective config of `hwlab {name} --seed {}`\n{}",
        args.seed,
        toml::to_string(&cfg).map_err(|e| CliError::Config(e.to_string()))?
    );
    let path = args.out.join("config.toml");
    std::fs::write(&path, echo).map_err(CliError::io(&path))?;
    f(&cfg, &args.out, args.seed)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(CliError::io(path))?))
}

/// Write a CSV through `body`, mapping I/O failures to the file path.
fn write_csv(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    body(&mut w).and_then(|_| w.flush()).map_err(CliError::io(path))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!("missing input: expected {}", path.display())))
    }
}

fn explicit_params(s: &Section) -> Result<HwParams> {
    Ok(HwParams::new(s.f64("c1")?, s.f64("k0")?, s.f64("kappa")?, s.f64("c_pb")?))
}

fn traj_name(id: u64) -> String {
    format!("traj_{id:04}.hwtr")
}

// ---------------------------------------------------------------- simulate

struct InstanceRow {
    id: u64,
    seed: u64,
    params: HwParams,
    status: String,
    error: Option<hwlab::Error>,
}

pub fn simulate(cfg: &Table, out: &Path, seed: u64) -> Result<()> {
    let s = Section::new(cfg, "simulate");
    let instances = s.u64("instances")?;
    if instances == 0 {
        return Err(CliError::Config("simulate.instances must be at least 1".into()));
    }
    let corr = s.f64("grf_corr_length")?;
    let placement: Hyperdiffusion = s.parse("hyperdiffusion")?;
    let norm: QoiNormalization = s.parse("qoi_normalization")?;
    let stride = s.u64("save_stride")?;
    let save_after = s.f64("save_after")?;
    let mode = s.str("params")?;
    let mut configs = Vec::new();
    for i in 0..instances {
        let base = match mode {
            "reference" => HwParams::default(),
            "sample" => sample_params(&mut seeded(derive_indexed(seed, "simulate", i))),
            "explicit" => explicit_params(&s)?,
            other => return Err(CliError::Config(format!("simulate.params: unknown mode {other:?} (reference, sample, explicit)"))),
        };
        let params = HwParams { nu: s.f64("nu")?, order: s.u64("order")? as u32, ..base };
        params.validate()?;
        configs.push(SimConfig {
            grid_n: s.usize("grid_n")?,
            params,
            dt: s.f64("dt")?,
            n_steps: s.u64("n_steps")?,
            snapshot_every: s.u64("snapshot_every")?,
            seed: derive_indexed(seed, "init", i),
            grf_amplitude: s.f64("grf_amplitude")?,
            grf_corr_length: (corr > 0.0).then_some(corr),
            hyperdiffusion: placement,
        });
    }
    if configs[0].snapshot_every == 0 || !(configs[0].dt > 0.0) {
        return Err(CliError::Config("simulate.snapshot_every and simulate.dt must be positive".into()));
    }

    let rows = run_ensemble(&configs, |i, c| {
        let id = i as u64;
        let result = run_instance(c, out, id, stride, save_after, norm);
        let (status, error) = match result {
            Ok(steps) => (format!("ok:{steps}"), None),
            Err(CliError::Core(e)) => (format!("failed:{}", e.to_string().replace(',', ";")), Some(e)),
            Err(e) => (format!("failed:{}", e.to_string().replace(',', ";")), Some(hwlab::Error::Data(e.to_string()))),
        };
        InstanceRow { id, seed: c.seed, params: c.params, status, error }
    });

    let path = out.join("instances.csv");
    write_csv(&path, |w| {
        writeln!(w, "id,seed,c1,k0,kappa,c_pb,nu,order,status")?;
        for r in &rows {
            let p = &r.params;
            writeln!(w, "{},{},{},{},{},{},{},{},{}", r.id, r.seed, p.c1, p.k0, p.kappa, p.c_pb, p.nu, p.order, r.status)?;
        }
        Ok(())
    })?;
    let failed: Vec<&InstanceRow> = rows.iter().filter(|r| r.error.is_some()).collect();
    println!("simulate: {} of {} instances completed", rows.len() - failed.len(), rows.len());
    for r in &failed {
        eprintln!("instance {}: {}", r.id, r.status);
    }
    match rows.into_iter().find_map(|r| r.error) {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn run_instance(c: &SimConfig, out: &Path, id: u64, stride: u64, save_after: f64, norm: QoiNormalization) -> Result<u64> {
    let traj_path = out.join(traj_name(id));
    let mut writer = if stride > 0 { Some(TrajectoryWriter::create(&traj_path, c.grid_n, &c.params)?) } else { None };
    let mut series = QoiSeries::default();
    let mut sample = 0u64;
    let outcome = simulate_with(c, |st| {
        series.push(st, &c.params, norm)?;
        if let Some(w) = writer.as_mut() {
            if sample % stride == 0 && st.t >= save_after - 1e-9 * c.dt {
                w.push(st)?;
            }
        }
        sample += 1;
        Ok(())
    });
    // QoIs up to a blow-up are still useful.
    let qoi_path = out.join(format!("qoi_{id:04}.csv"));
    write_csv(&qoi_path, |w| series.write_csv(w))?;
    if let Some(w) = writer {
        w.finish()?;
    }
    let stats = outcome?;
    Ok(stats.steps)
}

// ---------------------------------------------------------------- dataset

struct SimRecord {
    id: u64,
    seed: u64,
    params: HwParams,
    ok: bool,
}

fn read_instances(dir: &Path) -> Result<Vec<SimRecord>> {
    let path = dir.join("instances.csv");
    require(&path)?;
    let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let bad = |ln: usize| CliError::Data(format!("{}:{}: malformed instance row", path.display(), ln + 1));
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad(ln));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(ln));
        let params = HwParams {
            nu: num(6)?,
            order: f[7].parse().map_err(|_| bad(ln))?,
            ..HwParams::new(num(2)?, num(3)?, num(4)?, num(5)?)
        };
        out.push(SimRecord {
            id: f[0].parse().map_err(|_| bad(ln))?,
            seed: f[1].parse().map_err(|_| bad(ln))?,
            params,
            ok: f[8].starts_with("ok"),
        });
    }
    Ok(out)
}

pub fn dataset(cfg: &Table, out: &Path, seed: u64) -> Result<()> {
    let s = Section::new(cfg, "dataset");
    let dir = s.path("trajectories")?;
    let records: Vec<SimRecord> = read_instances(&dir)?.into_iter().filter(|r| r.ok).collect();
    let infos: Vec<InstanceInfo> = records.iter().map(|r| InstanceInfo { id: r.id, seed: r.seed, params: r.params }).collect();
    let mut manifest = split_instances(&infos, s.f64("train_fraction")?, derive_seed(seed, "split"))?;
    manifest.t_cut = s.f64("t_cut")?;
    manifest.max_dt = s.f64("max_dt")?;
    let per = s.u64("pairs_per_instance")?;
    manifest.instances.iter_mut().for_each(|i| i.pairs = per);
    let mode: ReducedMode = s.parse("reduced")?;
    let mut manifest = reduced_config(&manifest, mode, derive_seed(seed, "reduced"))?;

    let mut pairs = Vec::new();
    for inst in &manifest.instances {
        let path = dir.join(traj_name(inst.id));
        require(&path)?;
        let traj = read_trajectory(&path)?;
        let grid_n = traj.grid().map(|g| g.n).ok_or_else(|| CliError::Data(format!("{} holds no snapshots", path.display())))?;
        if manifest.grid_n == 0 {
            manifest.grid_n = grid_n;
        } else if manifest.grid_n != grid_n {
            return Err(CliError::Data(format!("{} has grid {grid_n}, expected {}", path.display(), manifest.grid_n)));
        }
        let mut r = seeded(derive_indexed(seed, "pairs", inst.id));
        pairs.extend(extract_pairs(&traj.snapshots, &traj.params, manifest.max_dt, manifest.t_cut, &mut r, inst.pairs as usize)?);
    }
    let path = out.join("pairs.hwds");
    write_dataset(&path, &pairs, &manifest)?;
    println!(
        "dataset: {} train / {} test instances, {} / {} pairs ({mode})",
        manifest.count(Split::Train),
        manifest.count(Split::Test),
        manifest.pairs_in(Split::Train),
        manifest.pairs_in(Split::Test)
    );
    Ok(())
}

fn load_dataset(path: &Path) -> Result<(Vec<SnapshotPair>, DatasetManifest)> {
    require(path)?;
    Ok(read_dataset(path)?)
}

/// Pairs of each instance on `split` (or every instance for "all"), in manifest order.
fn instance_groups(pairs: Vec<SnapshotPair>, manifest: &DatasetManifest, split: &str) -> Result<Vec<(u64, Vec<SnapshotPair>)>> {
    let want = match split {
        "train" => Some(Split::Train),
        "test" => Some(Split::Test),
        "all" => None,
        other => return Err(CliError::Config(format!("split must be train, test or all, got {other:?}"))),
    };
    let mut it = pairs.into_iter();
    let mut groups = Vec::new();
    for inst in &manifest.instances {
        let g: Vec<SnapshotPair> = it.by_ref().take(inst.pairs as usize).collect();
        if want.is_none_or(|w| w == inst.split) {
            groups.push((inst.id, g));
        }
    }
    Ok(groups)
}

// ---------------------------------------------------------------- train

fn model_config(cfg: &Table, grid_n: usize) -> Result<FiConvConfig> {
    let s = Section::new(cfg, "model");
    let c = FiConvConfig {
        grid_n,
        base_width: s.usize("base_width")?,
        blocks_per_level: s.usize_array("blocks_per_level")?,
        bottleneck_blocks: s.usize("bottleneck_blocks")?,
        mix_convs_per_level: s.usize_array("mix_convs_per_level")?,
        param_scaling: s.f64_array("param_scaling")?,
        precision: s.parse("precision")?,
    };
    c.validate()?;
    Ok(c)
}

pub fn train(cfg: &Table, out: &Path, seed: u64) -> Result<()> {
    let s = Section::new(cfg, "train");
    let (pairs, manifest) = load_dataset(&s.path("dataset")?)?;
    let (train_pairs, test_pairs) = manifest.partition_pairs(pairs)?;
    let mc = model_config(cfg, manifest.grid_n)?;
    let max_steps = s.usize("max_steps")?;
    let tc = TrainConfig {
        lr: s.f64("lr")?,
        weight_decay: s.f64("weight_decay")?,
        batch_size: s.usize("batch_size")?,
        epochs: s.usize("epochs")?,
        max_steps: (max_steps > 0).then_some(max_steps),
        seed: derive_seed(seed, "train"),
        omega_weight: s.f64("omega_weight")?,
        density_weight: s.f64("density_weight")?,
    };
    match mc.precision {
        Precision::F32 => train_with::<f32>(mc, &train_pairs, &test_pairs, &tc, out, seed),
        Precision::F64 => train_with::<f64>(mc, &train_pairs, &test_pairs, &tc, out, seed),
    }
}

fn train_with<T: Real>(mc: FiConvConfig, tr: &[SnapshotPair], te: &[SnapshotPair], tc: &TrainConfig, out: &Path, seed: u64) -> Result<()> {
    let mut model = Model::<T>::new(mc, derive_seed(seed, "init"))?;
    let params = model.param_count();
    let log = learn::train(&mut model, tr, te, tc, Some(out))?;
    model.save(&out.join("final.ficw"))?;
    let p = out.join("step_loss.csv");
    write_csv(&p, |w| log.write_step_csv(w).map_err(std::io::Error::other))?;
    let p = out.join("epoch_loss.csv");
    write_csv(&p, |w| log.write_epoch_csv(w).map_err(std::io::Error::other))?;
    let k = (log.step_losses.len() / 20).max(1);
    println!(
        "train: {params} parameters, {} steps, loss {:.4e} -> {:.4e} (first/last {k}-step means ratio {:.2})",
        log.step_losses.len(),
        log.step_losses.first().copied().unwrap_or(f64::NAN),
        log.step_losses.last().copied().unwrap_or(f64::NAN),
        log.reduction_factor(k).unwrap_or(f64::NAN)
    );
    Ok(())
}

// ---------------------------------------------------------------- eval

fn checkpoint_path(s: &Section) -> Result<PathBuf> {
    let p = s.path("checkpoint")?;
    require(&p)?;
    Ok(p)
}

pub fn eval(cfg: &Table, out: &Path, _seed: u64) -> Result<()> {
    let s = Section::new(cfg, "eval");
    let ckpt = checkpoint_path(&s)?;
    let (pairs, manifest) = load_dataset(&s.path("dataset")?)?;
    let max_dt = s.f64("max_dt")?;
    let selected: Vec<SnapshotPair> = instance_groups(pairs, &manifest, s.str("split")?)?
        .into_iter()
        .flat_map(|(_, g)| g)
        .filter(|p| p.dt_i <= max_dt + 1e-12)
        .collect();
    if selected.is_empty() {
        return Err(CliError::Data("no pairs selected for evaluation".into()));
    }
    let batch = s.usize("batch_size")?;
    let report = match checkpoint_precision(&ckpt)? {
        Precision::F32 => learn::evaluate(&Model::<f32>::load(&ckpt)?, &selected, batch)?,
        Precision::F64 => learn::evaluate(&Model::<f64>::load(&ckpt)?, &selected, batch)?,
    };
    write_csv(&out.join("eval.csv"), |w| {
        writeln!(w, "pair,dt_i,model_loss,persistence_loss")?;
        for (i, (p, (m, b))) in selected.iter().zip(&report.per_pair).enumerate() {
            writeln!(w, "{i},{},{m:e},{b:e}", p.dt_i)?;
        }
        Ok(())
    })?;
    write_csv(&out.join("eval_summary.csv"), |w| {
        writeln!(w, "pairs,mse,persistence_mse,win_fraction")?;
        writeln!(w, "{},{:e},{:e},{}", selected.len(), report.mse, report.persistence_mse, report.win_fraction())
    })?;
    println!(
        "eval: {} pairs, mse {:.4e}, persistence {:.4e}, beats persistence on {:.1}%",
        selected.len(),
        report.mse,
        report.persistence_mse,
        100.0 * report.win_fraction()
    );
    Ok(())
}

// ---------------------------------------------------------------- rollout

pub fn rollout(cfg: &Table, out: &Path, _seed: u64) -> Result<()> {
    let s = Section::new(cfg, "rollout");
    let ckpt = checkpoint_path(&s)?;
    let tpath = s.path("trajectory")?;
    require(&tpath)?;
    let truth = read_trajectory(&tpath)?;
    let start = s.usize("start_index")?;
    let initial = truth
        .snapshots
        .get(start)
        .ok_or_else(|| CliError::Data(format!("start_index {start} beyond the {} snapshots of {}", truth.snapshots.len(), tpath.display())))?;
    let rc = RolloutConfig { t_a: s.f64("t_a")?, n_steps: s.usize("n_steps")? };
    let norm: QoiNormalization = s.parse("qoi_normalization")?;
    let states = match checkpoint_precision(&ckpt)? {
        Precision::F32 => learn::rollout(&Model::<f32>::load(&ckpt)?, initial, &truth.params, &rc)?,
        Precision::F64 => learn::rollout(&Model::<f64>::load(&ckpt)?, initial, &truth.params, &rc)?,
    };
    let predicted = qoi_series(&states, &truth.params, norm)?;
    write_csv(&out.join("rollout_qoi.csv"), |w| predicted.write_csv(w))?;
    let reference = qoi_series(&truth.snapshots[start..], &truth.params, norm)?;
    write_csv(&out.join("reference_qoi.csv"), |w| reference.write_csv(w))?;
    let traj = Trajectory { params: truth.params, snapshots: states, stats: Default::default() };
    write_trajectory(&out.join("rollout.hwtr"), &traj)?;
    println!("rollout: {} steps of t_a = {} from t = {}", rc.n_steps, rc.t_a, initial.t);
    Ok(())
}

// ---------------------------------------------------------------- diagnose

/// Mode-weighted average of the spectra of several snapshots.
fn mean_spectrum(specs: &[RadialSpectrum]) -> RadialSpectrum {
    let mut acc = specs[0].clone();
    for s in &specs[1..] {
        acc.power.iter_mut().zip(&s.power).for_each(|(a, b)| *a += b);
    }
    acc.power.iter_mut().for_each(|p| *p /= specs.len() as f64);
    acc
}

pub fn diagnose(cfg: &Table, out: &Path, _seed: u64) -> Result<()> {
    let s = Section::new(cfg, "diagnose");
    let tpath = s.path("trajectory")?;
    require(&tpath)?;
    let traj = read_trajectory(&tpath)?;
    let norm: QoiNormalization = s.parse("qoi_normalization")?;
    let (t_lo, t_hi) = (s.f64("t_lo")?, s.f64("t_hi")?);
    let series = qoi_series(&traj.snapshots, &traj.params, norm)?;
    write_csv(&out.join("qoi.csv"), |w| series.write_csv(w))?;
    let st = temporal_stats(&series, t_lo, t_hi)?;
    write_csv(&out.join("qoi_stats.csv"), |w| {
        writeln!(w, "quantity,mean,std,samples,t_lo,t_hi")?;
        writeln!(w, "gamma_n,{},{},{},{t_lo},{t_hi}", st.gamma_n.mean, st.gamma_n.std, st.samples)?;
        writeln!(w, "gamma_c,{},{},{},{t_lo},{t_hi}", st.gamma_c.mean, st.gamma_c.std, st.samples)
    })?;

    let window: Vec<usize> = (0..series.len()).filter(|&i| (t_lo..=t_hi).contains(&series.times[i])).collect();
    let times: Vec<f64> = window.iter().map(|&i| series.times[i]).collect();
    if window.len() >= 2 {
        for (name, values) in [("gamma_n", &series.gamma_n), ("gamma_c", &series.gamma_c)] {
            let v: Vec<f64> = window.iter().map(|&i| values[i]).collect();
            let fft = series_fft(&times, &v)?;
            write_csv(&out.join(format!("fft_{name}.csv")), |w| fft.write_csv(w, name))?;
        }
    }
    let specs: Vec<RadialSpectrum> = window.iter().map(|&i| grad_phi_spectrum(&traj.snapshots[i])).collect();
    let spec = mean_spectrum(&specs);
    write_csv(&out.join("spectrum.csv"), |w| spec.write_csv(w))?;
    let low: [f64; 2] = s.f64_array("low_k")?;
    let high: [f64; 2] = s.f64_array("high_k")?;
    let slope_lo = fit_loglog_slope(&spec, low[0], low[1])?;
    let slope_hi = fit_loglog_slope(&spec, high[0], high[1])?;
    write_csv(&out.join("slopes.csv"), |w| {
        writeln!(w, "range,k_lo,k_hi,slope")?;
        writeln!(w, "low,{},{},{slope_lo}", low[0], low[1])?;
        writeln!(w, "high,{},{},{slope_hi}", high[0], high[1])
    })?;
    println!(
        "diagnose: t in [{t_lo}, {t_hi}] ({} samples): gamma_n {:.4} +- {:.4}, gamma_c {:.4} +- {:.4}; spectrum slopes {slope_lo:.2} (low k), {slope_hi:.2} (high k)",
        st.samples, st.gamma_n.mean, st.gamma_n.std, st.gamma_c.mean, st.gamma_c.std
    );
    Ok(())
}

// ---------------------------------------------------------------- invert

struct TrialRow {
    instance: u64,
    truth: HwParams,
    init: HwParams,
    result: learn::InversionResult,
}

pub fn invert(cfg: &Table, out: &Path, seed: u64) -> Result<()> {
    let s = Section::new(cfg, "invert");
    let ckpt = checkpoint_path(&s)?;
    let (pairs, manifest) = load_dataset(&s.path("dataset")?)?;
    let groups = instance_groups(pairs, &manifest, s.str("split")?)?;
    if groups.is_empty() {
        return Err(CliError::Data("no instances on the selected split".into()));
    }
    let trials = s.u64("trials")?;
    let mode = s.str("init_guess")?;
    let base = InverseConfig {
        lr: s.f64("lr")?,
        steps: s.usize("steps")?,
        n_pairs: s.usize("n_pairs")?,
        chunk: s.usize("chunk")?,
        ..InverseConfig::default()
    };
    let precision = checkpoint_precision(&ckpt)?;
    let m32 = if precision == Precision::F32 { Some(Model::<f32>::load(&ckpt)?) } else { None };
    let m64 = if precision == Precision::F64 { Some(Model::<f64>::load(&ckpt)?) } else { None };
    let mut rows = Vec::new();
    for k in 0..trials {
        let (instance, group) = &groups[(k as usize) % groups.len()];
        let truth = group.first().map(|p| p.params).ok_or_else(|| CliError::Data(format!("instance {instance} has no pairs")))?;
        let init = match mode {
            "sample" => HwParams { nu: truth.nu, order: truth.order, ..sample_params(&mut seeded(derive_indexed(seed, "invert-init", k))) },
            "explicit" => HwParams { nu: truth.nu, order: truth.order, ..explicit_params(&s)? },
            other => return Err(CliError::Config(format!("invert.init_guess: unknown mode {other:?} (sample, explicit)"))),
        };
        let ic = InverseConfig { init_guess: init, seed: derive_indexed(seed, "invert", k), ..base.clone() };
        let chosen = learn::select_pairs(group, ic.n_pairs, ic.seed)?;
        let result = match (&m32, &m64) {
            (Some(m), _) => learn::invert(m, &chosen, &ic),
            (_, Some(m)) => learn::invert(m, &chosen, &ic),
            _ => unreachable!("one model is loaded"),
        };
        let result = match result {
            Ok(r) => r,
            Err(hwlab::Error::InversionDiverged { step, partial }) => {
                let p = out.join(format!("invert_trace_{k:02}.csv"));
                write_csv(&p, |w| partial.write_csv(w).map_err(std::io::Error::other))?;
                return Err(hwlab::Error::InversionDiverged { step, partial }.into());
            }
            Err(e) => return Err(e.into()),
        };
        if result.checksum_before != result.checksum_after {
            return Err(CliError::Data("model weights changed during inversion".into()));
        }
        let p = out.join(format!("invert_trace_{k:02}.csv"));
        write_csv(&p, |w| result.write_csv(w).map_err(std::io::Error::other))?;
        rows.push(TrialRow { instance: *instance, truth, init, result });
    }

    write_csv(&out.join("invert_summary.csv"), |w| {
        writeln!(
            w,
            "trial,instance,true_c1,true_k0,true_kappa,true_c_pb,init_c1,init_k0,init_kappa,init_c_pb,est_c1,est_k0,est_kappa,est_c_pb,loss_initial,loss_final,weights_crc32"
        )?;
        for (k, r) in rows.iter().enumerate() {
            let [t, i, e] = [r.truth.scalars(), r.init.scalars(), r.result.estimate.scalars()];
            let (l0, l1) = (r.result.loss_trace[0], *r.result.loss_trace.last().unwrap());
            writeln!(
                w,
                "{k},{},{},{},{},{},{},{},{},{},{},{},{},{},{l0:e},{l1:e},{:08x}",
                r.instance, t[0], t[1], t[2], t[3], i[0], i[1], i[2], i[3], e[0], e[1], e[2], e[3], r.result.checksum_after
            )?;
        }
        Ok(())
    })?;
    let truth: Vec<HwParams> = rows.iter().map(|r| r.truth).collect();
    let init: Vec<HwParams> = rows.iter().map(|r| r.init).collect();
    let est: Vec<HwParams> = rows.iter().map(|r| r.result.estimate).collect();
    if !rows.is_empty() {
        let (m0, m1) = (learn::mae(&truth, &init)?, learn::mae(&truth, &est)?);
        write_csv(&out.join("invert_mae.csv"), |w| {
            writeln!(w, "parameter,mae_initial,mae_final")?;
            for (k, name) in ["c1", "k0", "kappa", "c_pb"].iter().enumerate() {
                writeln!(w, "{name},{},{}", m0[k], m1[k])?;
            }
            Ok(())
        })?;
        println!(
            "invert: {} trials, MAE initial {:?} -> final {:?}",
            rows.len(),
            m0.map(|v| (v * 1e4).round() / 1e4),
            m1.map(|v| (v * 1e4).round() / 1e4)
        );
    }
    Ok(())
}
