//! Rectified-flow objective, representation-alignment loss, per-modality
//! condition dropout, the training loop and the guided Euler sampler.
//!
//! Time runs from noise at `t = 0` to data at `t = 1` along the straight line
//! `x_t = (1 - t) x0 + t x1`, whose velocity is `x1 - x0`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FoleyModel;
use crate::stubs::FeatureBundle;
use crate::tensor::{no_grad, read_container, write_container, AdamW, AdamWConfig, ParamStore, Tensor};

/// Which modalities are replaced by their learned null embedding for one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfgMask {
    pub drop_video: bool,
    pub drop_text: bool,
    pub drop_sync: bool,
}

/// Interpolant and regression target for a batch.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: Vec<f32>,
    pub x0: Tensor,
    pub x1: Tensor,
    pub x_t: Tensor,
    pub v_target: Tensor,
}

impl FlowState {
    /// `x0`, `x1`: `[B, ...]`; one `t` per batch element.
    pub fn new(x0: &Tensor, x1: &Tensor, t: &[f32]) -> Result<Self> {
        if x0.shape() != x1.shape() {
            return Err(Error::shape("flow state", x0.shape(), x1.shape()));
        }
        if x0.rank() == 0 || t.len() != x0.dim(0) {
            return Err(Error::InvalidArgument(format!("{} timesteps for shape {:?}", t.len(), x0.shape())));
        }
        if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("timestep {bad} outside [0, 1]")));
        }
        let per = x0.numel() / t.len();
        let mut x_t = Vec::with_capacity(x0.numel());
        for (i, (a, b)) in x0.data().iter().zip(x1.data()).enumerate() {
            let tv = t[i / per];
            x_t.push((1.0 - tv) * a + tv * b);
        }
        let v_target: Vec<f32> = x1.data().iter().zip(x0.data()).map(|(b, a)| b - a).collect();
        Ok(Self {
            t: t.to_vec(),
            x0: x0.detach(),
            x1: x1.detach(),
            x_t: Tensor::new(x_t, x0.shape())?,
            v_target: Tensor::new(v_target, x0.shape())?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub flow_loss: f32,
    pub repa_loss: f32,
    pub total: f32,
    /// Frames where either vector had zero norm; they contribute 0 to the alignment loss.
    pub zero_norm_frames: usize,
}

/// Mean squared error between predicted and target velocity.
pub fn flow_matching_loss(pred: &Tensor, v_target: &Tensor) -> Result<Tensor> {
    if pred.shape() != v_target.shape() {
        return Err(Error::shape("flow loss", pred.shape(), v_target.shape()));
    }
    let d = pred.sub(v_target)?;
    Ok(d.mul(&d)?.mean())
}

/// Negative per-frame cosine similarity between projected hiddens `[B, L_a, D_r]`
/// and targets `[B, L_r, D_r]`, averaged over all frames. Targets are aligned
/// to `L_a` by nearest-neighbour indexing first.
pub fn repa_loss(h: &Tensor, target: &Tensor) -> Result<(Tensor, usize)> {
    if h.rank() != 3 || target.rank() != 3 || h.dim(0) != target.dim(0) || h.dim(2) != target.dim(2) {
        return Err(Error::shape("alignment loss", h.shape(), target.shape()));
    }
    let la = h.dim(1);
    let f = if target.dim(1) == la { target.detach() } else { target.detach().interp_nearest(la, 1)? };

    let dot = h.mul(&f)?.sum_axis(2, false)?;
    let hh = h.mul(h)?.sum_axis(2, false)?;
    let ff = f.mul(&f)?.sum_axis(2, false)?;
    // frames with a zero vector get a unit denominator and a zero numerator
    let zero: Vec<bool> = hh.data().iter().zip(ff.data()).map(|(a, b)| *a == 0.0 || *b == 0.0).collect();
    let pad = Tensor::new(zero.iter().map(|z| if *z { 1.0 } else { 0.0 }).collect(), hh.shape())?;
    let keep = Tensor::new(zero.iter().map(|z| if *z { 0.0 } else { 1.0 }).collect(), hh.shape())?;
    let denom = hh.add(&pad)?.sqrt().mul(&ff.add(&pad)?.sqrt())?;
    let cos = dot.mul(&keep)?.div(&denom)?;
    Ok((cos.mean().neg(), zero.iter().filter(|z| **z).count()))
}

/// Total training loss for one batch at fixed `t` and noise.
pub fn training_loss(
    model: &FoleyModel,
    store: &ParamStore,
    bundle: &FeatureBundle,
    state: &FlowState,
    repa_weight: f32,
) -> Result<(Tensor, LossReport)> {
    let out = model.forward_with(store, &state.x_t, &state.t, bundle)?;
    let flow = flow_matching_loss(&out.velocity, &state.v_target)?;
    let (repa, zero_norm_frames) = match &bundle.repa_target {
        Some(target) if repa_weight != 0.0 => {
            let proj = model.repa_head.project(store, &out.repa_hidden)?;
            repa_loss(&proj, target)?
        }
        Some(target) => no_grad(|| {
            let proj = model.repa_head.project(store, &out.repa_hidden.detach())?;
            repa_loss(&proj, target)
        })?,
        None => (Tensor::scalar(0.0), 0),
    };
    let total = if repa_weight != 0.0 { flow.add(&repa.scale(repa_weight))? } else { flow.clone() };
    let report = LossReport {
        flow_loss: flow.item()?,
        repa_loss: repa.item()?,
        total: total.item()?,
        zero_norm_frames,
    };
    Ok((total, report))
}

/// Independently drops each modality of each sample with probability `rate`.
pub fn apply_cfg_dropout<R: Rng + ?Sized>(bundle: &FeatureBundle, rng: &mut R, rate: f64) -> Result<(FeatureBundle, Vec<CfgMask>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    let masks: Vec<CfgMask> = (0..bundle.batch())
        .map(|_| CfgMask {
            drop_video: rng.random_bool(rate),
            drop_text: rng.random_bool(rate),
            drop_sync: rng.random_bool(rate),
        })
        .collect();
    let mut out = bundle.clone();
    out.drop = masks.clone();
    Ok((out, masks))
}

/// Anything that predicts a velocity for a noisy latent.
pub trait VelocityField {
    fn velocity(&self, x_t: &Tensor, t: &[f32], bundle: &FeatureBundle) -> Result<Tensor>;
}

impl VelocityField for FoleyModel {
    fn velocity(&self, x_t: &Tensor, t: &[f32], bundle: &FeatureBundle) -> Result<Tensor> {
        no_grad(|| Ok(self.forward(x_t, t, bundle)?.velocity))
    }
}

/// Euler integration from `x0` at `t = 0` to `t = 1` with guidance
/// `v = v_uncond + s (v_cond - v_uncond)`. A scale of exactly 1 skips the
/// unconditional pass. Drop masks already set on `bundle` mark modalities
/// that are absent at inference and stay dropped in the conditional pass.
pub fn sample_from(field: &impl VelocityField, bundle: &FeatureBundle, x0: &Tensor, steps: usize, guidance: f32) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampling needs at least one step".into()));
    }
    let b = x0.dim(0);
    let cond = bundle;
    let uncond = bundle.unconditional();
    let dt = 1.0 / steps as f32;
    let mut x = x0.detach();
    for k in 0..steps {
        let t = vec![k as f32 / steps as f32; b];
        let v_c = field.velocity(&x, &t, cond)?;
        let v = if guidance == 1.0 {
            v_c
        } else {
            let v_u = field.velocity(&x, &t, &uncond)?;
            v_u.add(&v_c.sub(&v_u)?.scale(guidance))?
        };
        if !v.all_finite() {
            return Err(Error::NonFinite(format!("velocity at sampling step {k}")));
        }
        x = x.add(&v.scale(dt))?;
    }
    Ok(x)
}

/// Draws `x0` from `seed` at the shape of `bundle.latent`, then integrates.
pub fn sample(field: &impl VelocityField, bundle: &FeatureBundle, steps: usize, guidance: f32, seed: u64) -> Result<Tensor> {
    let x0 = Tensor::randn(bundle.latent.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    sample_from(field, bundle, &x0, steps, guidance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Independent noise draws of one clip per step.
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub repa_weight: f32,
    pub cfg_dropout: f64,
    /// `0` disables intermediate checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            lr: 1e-4,
            weight_decay: 0.0,
            repa_weight: 0.5,
            cfg_dropout: 0.1,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub report: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<CurveRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Where checkpoints and the loss curve go. `None` keeps training in memory.
#[derive(Debug, Clone, Default)]
pub struct RunDir(pub Option<PathBuf>);

pub const LOSS_CSV: &str = "loss.csv";

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.hvfw"))
}

pub fn optimizer_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("optim_{step:06}.hvfw"))
}

/// Per-step RNG, so a resumed run draws exactly what an uninterrupted one would.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step as u64 + 1);
    r
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x0D15_EA5E);
    r.set_stream(epoch as u64);
    order.shuffle(&mut r);
    order
}

/// Resume point: step count already taken plus matching optimizer state.
pub struct Resume {
    pub step: usize,
    pub optimizer: AdamW,
}

pub fn save_checkpoint(model: &FoleyModel, opt: &AdamW, dir: &Path, step: usize) -> Result<PathBuf> {
    let p = checkpoint_path(dir, step);
    model.store.save(BufWriter::new(fs::File::create(&p)?))?;
    write_container(BufWriter::new(fs::File::create(optimizer_path(dir, step))?), &opt.state_entries(&model.store))?;
    Ok(p)
}

/// Loads the checkpoint and optimizer state written at `step`.
pub fn load_resume(model: &mut FoleyModel, cfg: &TrainConfig, dir: &Path, step: usize) -> Result<Resume> {
    model.store.load(fs::File::open(checkpoint_path(dir, step))?)?;
    let mut opt = AdamW::new(adamw_config(cfg), &model.store);
    opt.load_state(&model.store, read_container(fs::File::open(optimizer_path(dir, step))?)?)?;
    if opt.steps_taken() as usize != step {
        return Err(Error::Format(format!("optimizer state is at step {}, expected {step}", opt.steps_taken())));
    }
    Ok(Resume { step, optimizer: opt })
}

fn adamw_config(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() }
}

/// Minimizes `flow + repa_weight * repa` over `dataset` (single-clip bundles).
///
/// Step `k` trains on one clip replicated `batch_size` times with fresh `t`,
/// noise and dropout masks. A non-finite loss or gradient halts training
/// after writing the last good parameters.
pub fn train_loop(
    model: &mut FoleyModel,
    dataset: &[FeatureBundle],
    cfg: &TrainConfig,
    run_dir: &RunDir,
    resume: Option<Resume>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    for item in dataset {
        item.check_batch(1)?;
    }
    let (start, mut opt) = match resume {
        Some(r) => (r.step, r.optimizer),
        None => (0, AdamW::new(adamw_config(cfg), &model.store)),
    };
    let mut csv = match &run_dir.0 {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(LOSS_CSV);
            let f = if start == 0 {
                let mut f = fs::File::create(&path)?;
                writeln!(f, "step,flow_loss,repa_loss,total")?;
                f
            } else {
                fs::OpenOptions::new().append(true).open(&path)?
            };
            Some(BufWriter::new(f))
        }
        None => None,
    };

    let mut curve = Vec::with_capacity(cfg.steps.saturating_sub(start));
    let mut checkpoints = Vec::new();
    let n = dataset.len();
    let mut order_epoch = usize::MAX;
    let mut order = Vec::new();
    for step in start..cfg.steps {
        let epoch = step / n;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, epoch, n);
            order_epoch = epoch;
        }
        let item = &dataset[order[step % n]];
        let mut rng = step_rng(cfg.seed, step);
        let batch = item.repeat(cfg.batch_size)?;
        let (batch, _) = apply_cfg_dropout(&batch, &mut rng, cfg.cfg_dropout)?;
        let t: Vec<f32> = (0..cfg.batch_size).map(|_| rng.random::<f32>()).collect();
        let x0 = Tensor::randn(batch.latent.shape(), 1.0, &mut rng);
        let state = FlowState::new(&x0, &batch.latent, &t)?;

        model.store.zero_grad();
        let (total, report) = training_loss(model, &model.store, &batch, &state, cfg.repa_weight)?;
        let finite = report.total.is_finite() && report.flow_loss.is_finite() && report.repa_loss.is_finite();
        let stepped = if finite {
            total.backward()?;
            opt.step(&mut model.store)
        } else {
            Err(Error::NonFinite(format!("loss at step {step}: {report:?}")))
        };
        if let Err(e) = stepped {
            if let Some(dir) = &run_dir.0 {
                checkpoints.push(save_checkpoint(model, &opt, dir, step)?);
                if let Some(w) = csv.as_mut() {
                    w.flush()?;
                }
            }
            return Err(e);
        }

        curve.push(CurveRow { step, report });
        if let Some(w) = csv.as_mut() {
            writeln!(w, "{step},{},{},{}", report.flow_loss, report.repa_loss, report.total)?;
        }
        let done = step + 1;
        if let Some(dir) = &run_dir.0 {
            if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.steps {
                checkpoints.push(save_checkpoint(model, &opt, dir, done)?);
            }
        }
    }
    if let Some(w) = csv.as_mut() {
        w.flush()?;
    }
    Ok(TrainOutcome { curve, checkpoints })
}

/// Flow loss averaged over a fixed panel of evenly spaced `t` with fixed
/// noise and no dropout. Used to compare a model before and after training.
pub fn panel_flow_loss(model: &FoleyModel, bundle: &FeatureBundle, points: usize, seed: u64) -> Result<f32> {
    if points == 0 {
        return Err(Error::InvalidArgument("panel needs at least one point".into()));
    }
    let single = bundle.conditional();
    let batch = single.repeat(points)?;
    let t: Vec<f32> = (0..points).map(|i| (i as f32 + 0.5) / points as f32).collect();
    let x0 = Tensor::randn(batch.latent.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let state = FlowState::new(&x0, &batch.latent, &t)?;
    no_grad(|| {
        let out = model.forward(&state.x_t, &state.t, &batch)?;
        flow_matching_loss(&out.velocity, &state.v_target)?.item()
    })
}

/// Mean squared difference between two latents.
pub fn latent_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("latent mse", a.shape(), b.shape()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    Ok(s / a.numel() as f64)
}
