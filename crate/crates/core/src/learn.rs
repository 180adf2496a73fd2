//! Training, evaluation, autoregressive rollout and frozen-weight inverse
//! estimation of the four HW parameters.

use std::io::Write;
use std::path::{Path, PathBuf};

use hwlab_autodiff::{AdamW, AdamWConfig, Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;

use crate::dataset::SnapshotPair;
use crate::error::{config, data, Error, Result};
use crate::ficonv::{self, Bound, Model, PairBatch};
use crate::hwsim::{HwParams, PlasmaState};
use crate::numerics::PoissonSolver;
use crate::rng;

pub const OMEGA_WEIGHT: f64 = 1.0 / 100.0;
pub const DENSITY_WEIGHT: f64 = 1.0 / 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub omega_weight: f64,
    pub density_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 0.01,
            batch_size: 30,
            epochs: 14,
            max_steps: None,
            seed: 0,
            omega_weight: OMEGA_WEIGHT,
            density_weight: DENSITY_WEIGHT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config(format!("lr = {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_steps == Some(0) {
            return Err(config("batch_size, epochs and max_steps must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.omega_weight > 0.0 && self.density_weight > 0.0) {
            return Err(config("weight_decay must be >= 0 and loss weights positive"));
        }
        Ok(())
    }

    fn weights(&self) -> LossWeights {
        LossWeights { omega: self.omega_weight, density: self.density_weight }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub omega: f64,
    pub density: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { omega: OMEGA_WEIGHT, density: DENSITY_WEIGHT }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutConfig {
    pub t_a: f64,
    pub n_steps: usize,
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_a > 0.0 && self.t_a <= 1.0) {
            return Err(config(format!("rollout step t_a = {} outside (0, 1]", self.t_a)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InverseConfig {
    pub lr: f64,
    pub steps: usize,
    pub n_pairs: usize,
    pub init_guess: HwParams,
    pub seed: u64,
    /// Pairs per forward/backward pass; bounds memory, not the result.
    pub chunk: usize,
}

impl Default for InverseConfig {
    fn default() -> Self {
        InverseConfig { lr: 0.01, steps: 400, n_pairs: 32, init_guess: HwParams::default(), seed: 0, chunk: 8 }
    }
}

impl InverseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.n_pairs == 0 || self.chunk == 0 {
            return Err(config("inverse lr must be >= 0 and n_pairs, chunk positive"));
        }
        Ok(())
    }
}

fn mean_square_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    s / a.len().max(1) as f64
}

/// Weighted loss per sample of `[B, 1, n, n]` tensors.
pub fn per_sample_loss<T: Real>(
    pred_omega: &Tensor<T>,
    pred_n: &Tensor<T>,
    true_omega: &Tensor<T>,
    true_n: &Tensor<T>,
    w: LossWeights,
) -> Result<Vec<f64>> {
    let s = pred_omega.shape();
    if [pred_n.shape(), true_omega.shape(), true_n.shape()].iter().any(|x| *x != s) {
        return Err(data("loss operands differ in shape"));
    }
    Ok((0..s[0])
        .map(|b| {
            w.omega * mean_square_diff(pred_omega.sample(b), true_omega.sample(b))
                + w.density * mean_square_diff(pred_n.sample(b), true_n.sample(b))
        })
        .collect())
}

/// Batch loss: `sum_b mean_px(dOmega^2) / (100 N) + sum_b mean_px(dn^2) / (20 N)`.
pub fn loss<T: Real>(pred_omega: &Tensor<T>, pred_n: &Tensor<T>, true_omega: &Tensor<T>, true_n: &Tensor<T>) -> Result<f64> {
    let per = per_sample_loss(pred_omega, pred_n, true_omega, true_n, LossWeights::default())?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Tape version of [`loss`] with configurable weights.
pub fn loss_on_tape<T: Real>(tape: &mut Tape<T>, pred_omega: Var, pred_n: Var, true_omega: Var, true_n: Var, w: LossWeights) -> Result<Var> {
    let d_o = tape.sub(pred_omega, true_omega)?;
    let d_n = tape.sub(pred_n, true_n)?;
    let m_o = tape.mean_square(d_o);
    let m_n = tape.mean_square(d_n);
    let a = tape.scale(m_o, w.omega);
    let b = tape.scale(m_n, w.density);
    Ok(tape.add(a, b)?)
}

/// Handles of a batch placed on a tape.
pub struct BatchVars {
    pub scalars: [Var; 4],
    pub pred_omega: Var,
    pub pred_n: Var,
    pub loss: Var,
}

/// Forward a batch through the constrained model and attach the loss.
/// `scalars` overrides the batch parameters (used by inversion).
pub fn batch_on_tape<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    bound: &Bound,
    batch: &PairBatch<T>,
    scalars: Option<[Var; 4]>,
    w: LossWeights,
) -> Result<BatchVars> {
    let fields = tape.constant(batch.fields.clone());
    let dt = tape.constant(batch.dt.clone());
    let scalars = match scalars {
        Some(s) => s,
        None => batch.scalars.clone().map(|t| tape.constant(t)),
    };
    let input = ficonv::input_on_tape(tape, model.config(), fields, dt, scalars)?;
    let raw = model.forward_on_tape(tape, bound, input)?;
    let oi = tape.constant(batch.omega_in.clone());
    let ni = tape.constant(batch.n_in.clone());
    let (pred_omega, pred_n) = ficonv::constrain_on_tape(tape, raw, dt, oi, ni)?;
    let ot = tape.constant(batch.omega_target.clone());
    let nt = tape.constant(batch.n_target.clone());
    let loss = loss_on_tape(tape, pred_omega, pred_n, ot, nt, w)?;
    Ok(BatchVars { scalars, pred_omega, pred_n, loss })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Loss of every optimizer step, before the update.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub epoch_test: Vec<Option<f64>>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn write_step_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "step,loss")?;
        for (i, l) in self.step_losses.iter().enumerate() {
            writeln!(w, "{i},{l:e}")?;
        }
        Ok(())
    }

    pub fn write_epoch_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "epoch,train_loss,test_loss")?;
        for (i, (l, t)) in self.epoch_losses.iter().zip(&self.epoch_test).enumerate() {
            let t = t.map(|v| format!("{v:e}")).unwrap_or_default();
            writeln!(w, "{i},{l:e},{t}")?;
        }
        Ok(())
    }

    /// Mean of the first `k` step losses over the mean of the last `k`.
    pub fn reduction_factor(&self, k: usize) -> Option<f64> {
        let n = self.step_losses.len();
        if n == 0 || k == 0 {
            return None;
        }
        let k = k.min(n);
        let head = self.step_losses[..k].iter().sum::<f64>() / k as f64;
        let tail = self.step_losses[n - k..].iter().sum::<f64>() / k as f64;
        Some(head / tail)
    }
}

/// AdamW over shuffled mini-batches. With `out_dir`, a checkpoint is written
/// after every epoch (`epoch_XXX.ficw`) and for the best epoch (`best.ficw`),
/// judged by test loss when test pairs are given, otherwise training loss.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_pairs: &[SnapshotPair],
    test_pairs: &[SnapshotPair],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(data("training set is empty"));
    }
    let sizes: Vec<usize> = model.weights().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::<T>::new(AdamWConfig::new(cfg.lr, cfg.weight_decay), &sizes)?;
    let mut order_rng = rng::stream(cfg.seed, "train");
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut log = TrainLog::default();
    let mut best = f64::INFINITY;
    let w = cfg.weights();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| log.step_losses.len() >= m) {
                break;
            }
            let refs: Vec<&SnapshotPair> = idx.iter().map(|&i| &train_pairs[i]).collect();
            let batch = PairBatch::<T>::from_pairs(&refs)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let vars = batch_on_tape(&mut tape, model, &bound, &batch, None, w)?;
            let l = tape.value(vars.loss).data()[0].as_f64();
            let step = log.step_losses.len() as u64;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            tape.backward(vars.loss)?;
            let grads: Vec<Tensor<T>> = bound.vars().iter().map(|&v| tape.grad_or_zeros(v)).collect();
            drop(tape);
            opt.step(model.weights_mut().zip(&grads).map(|(p, g)| (p.data_mut(), g.data())));
            log.step_losses.push(l);
            sum += l * idx.len() as f64;
            count += idx.len();
        }
        if count == 0 {
            break 'epochs;
        }
        let train_loss = sum / count as f64;
        let test_loss = if test_pairs.is_empty() { None } else { Some(evaluate(model, test_pairs, cfg.batch_size)?.mse) };
        log.epoch_losses.push(train_loss);
        log.epoch_test.push(test_loss);
        let score = test_loss.unwrap_or(train_loss);
        if score < best {
            best = score;
            log.best_epoch = Some(epoch);
        }
        if let Some(dir) = out_dir {
            model.save(&dir.join(format!("epoch_{epoch:03}.ficw")))?;
            if log.best_epoch == Some(epoch) {
                model.save(&dir.join("best.ficw"))?;
            }
        }
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean loss of the model over the pairs.
    pub mse: f64,
    /// Mean loss of predicting the input unchanged.
    pub persistence_mse: f64,
    /// `(model, persistence)` loss of each pair.
    pub per_pair: Vec<(f64, f64)>,
}

impl EvalReport {
    /// Fraction of pairs on which the model beats persistence.
    pub fn win_fraction(&self) -> f64 {
        let wins = self.per_pair.iter().filter(|(m, p)| m < p).count();
        wins as f64 / self.per_pair.len().max(1) as f64
    }
}

/// Model loss and persistence-baseline loss over `pairs`, no updates.
pub fn evaluate<T: Real>(model: &Model<T>, pairs: &[SnapshotPair], batch_size: usize) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(data("evaluation set is empty"));
    }
    let w = LossWeights::default();
    let mut per_pair = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&SnapshotPair> = chunk.iter().collect();
        let batch = PairBatch::<T>::from_pairs(&refs)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let vars = batch_on_tape(&mut tape, model, &bound, &batch, None, w)?;
        let model_loss = per_sample_loss(
            tape.value(vars.pred_omega),
            tape.value(vars.pred_n),
            &batch.omega_target,
            &batch.n_target,
            w,
        )?;
        let base = per_sample_loss(&batch.omega_in, &batch.n_in, &batch.omega_target, &batch.n_target, w)?;
        per_pair.extend(model_loss.into_iter().zip(base));
    }
    let n = per_pair.len() as f64;
    Ok(EvalReport {
        mse: per_pair.iter().map(|p| p.0).sum::<f64>() / n,
        persistence_mse: per_pair.iter().map(|p| p.1).sum::<f64>() / n,
        per_pair,
    })
}

/// Autoregressive prediction in steps of `t_a`; phi is re-solved from the
/// predicted omega before each step. Returns the initial state and every
/// predicted state.
pub fn rollout<T: Real>(model: &Model<T>, initial: &PlasmaState, params: &HwParams, cfg: &RolloutConfig) -> Result<Vec<PlasmaState>> {
    cfg.validate()?;
    let grid = initial.grid();
    let mut poisson = PoissonSolver::new(grid);
    let mut state = initial.clone();
    state.phi = poisson.solve(&state.omega);
    let mut out = Vec::with_capacity(cfg.n_steps + 1);
    out.push(state.clone());
    for step in 0..cfg.n_steps {
        let (omega, n) = ficonv::predict(model, &state, cfg.t_a, params)?;
        let t = state.t + cfg.t_a;
        if !omega.all_finite() || !n.all_finite() {
            return Err(Error::BlowUp { step: step as u64 + 1, time: t, max_abs_omega: omega.max_abs() });
        }
        let phi = poisson.solve(&omega);
        state = PlasmaState { omega, phi, n, t };
        out.push(state.clone());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    pub estimate: HwParams,
    /// Loss at the parameters of the matching `param_trace` row.
    pub loss_trace: Vec<f64>,
    /// c1, k0, kappa, c_pb before each update, then the final values.
    pub param_trace: Vec<[f64; 4]>,
    pub checksum_before: u32,
    pub checksum_after: u32,
}

impl InversionResult {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "step,loss,c1,k0,kappa,c_pb")?;
        for (i, (l, p)) in self.loss_trace.iter().zip(&self.param_trace).enumerate() {
            writeln!(w, "{i},{l:e},{},{},{},{}", p[0], p[1], p[2], p[3])?;
        }
        Ok(())
    }
}

/// Loss over `pairs` with the four parameters replaced by `theta`, and its
/// gradient with respect to `theta`. Weights enter as constants.
pub fn inversion_loss_and_grad<T: Real>(model: &Model<T>, pairs: &[&SnapshotPair], theta: [f64; 4], chunk: usize) -> Result<(f64, [f64; 4])> {
    if pairs.is_empty() {
        return Err(data("inversion needs at least one pair"));
    }
    let total = pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for part in pairs.chunks(chunk.max(1)) {
        let batch = PairBatch::<T>::from_pairs(part)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let leaves = theta.map(|v| tape.leaf(Tensor::scalar(T::from_f64(v)), true));
        let vars = batch_on_tape(&mut tape, model, &bound, &batch, Some(leaves), LossWeights::default())?;
        let frac = part.len() as f64 / total;
        loss += frac * tape.value(vars.loss).data()[0].as_f64();
        tape.backward(vars.loss)?;
        for (g, v) in grad.iter_mut().zip(leaves) {
            *g += frac * tape.grad_or_zeros(v).data()[0].as_f64();
        }
    }
    Ok((loss, grad))
}

/// Uniformly chosen distinct pairs.
pub fn select_pairs<'a>(pairs: &'a [SnapshotPair], n: usize, seed: u64) -> Result<Vec<&'a SnapshotPair>> {
    if n > pairs.len() {
        return Err(data(format!("{n} pairs requested, {} available", pairs.len())));
    }
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "invert-pairs"));
    Ok(idx[..n].iter().map(|&i| &pairs[i]).collect())
}

/// Gradient descent (AdamW without decay) on c1, k0, kappa, c_pb only.
pub fn invert<T: Real>(model: &Model<T>, pairs: &[&SnapshotPair], cfg: &InverseConfig) -> Result<InversionResult> {
    cfg.validate()?;
    let checksum_before = model.checksum();
    let mut theta = cfg.init_guess.scalars();
    let mut opt = AdamW::<f64>::new(AdamWConfig::new(cfg.lr, 0.0), &[4])?;
    let mut loss_trace = Vec::with_capacity(cfg.steps + 1);
    let mut param_trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let (l, g) = inversion_loss_and_grad(model, pairs, theta, cfg.chunk)?;
        loss_trace.push(l);
        param_trace.push(theta);
        if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
            let partial = InversionResult {
                estimate: cfg.init_guess.with_scalars(theta),
                loss_trace,
                param_trace,
                checksum_before,
                checksum_after: model.checksum(),
            };
            return Err(Error::InversionDiverged { step: step as u64, partial: Box::new(partial) });
        }
        if step < cfg.steps {
            opt.step([(&mut theta[..], &g[..])]);
        }
    }
    Ok(InversionResult {
        estimate: cfg.init_guess.with_scalars(theta),
        loss_trace,
        param_trace,
        checksum_before,
        checksum_after: model.checksum(),
    })
}

/// Mean absolute error per parameter (c1, k0, kappa, c_pb).
pub fn mae(truth: &[HwParams], pred: &[HwParams]) -> Result<[f64; 4]> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(data(format!("mae needs equal non-empty lists, got {} and {}", truth.len(), pred.len())));
    }
    let mut acc = [0.0; 4];
    for (t, p) in truth.iter().zip(pred) {
        for ((a, x), y) in acc.iter_mut().zip(t.scalars()).zip(p.scalars()) {
            *a += (x - y).abs();
        }
    }
    Ok(acc.map(|a| a / truth.len() as f64))
}

/// Checkpoint path for a training run directory.
pub fn best_checkpoint(dir: &Path) -> PathBuf {
    dir.join("best.ficw")
}
