//! Losses, batch composition and the optimisation loop.
//!
//! The objective is `λ_l1·L1 + λ_f·Focal`, both averaged over pixels, where
//! the focal term per pixel is `−α(1 − p_t)^γ·ln p_t` with `p_t = p` on
//! anomalous pixels and `1 − p` elsewhere, `p` clamped to `[ε, 1 − ε]`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly_sim::{simulate, NoiseKind, SimConfig};
use crate::autograd::{focal_term, FocalParams, Graph};
use crate::data_io::{ImageSource, TextureSource};
use crate::error::{shape_err, Error, Result};
use crate::network::SegModel;
use crate::params::ParamKind;
use crate::tensor::Tensor;

/// Probability clamp guarding `ln 0`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub lambda_l1: f64,
    pub lambda_focal: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 4.0,
            alpha: 1.0,
            lambda_l1: 0.6,
            lambda_focal: 0.4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.lambda_l1 >= 0.0 && self.lambda_focal >= 0.0 && self.alpha >= 0.0) {
            return Err(Error::InvalidConfig("loss weights and gamma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn focal_params(&self) -> FocalParams {
        FocalParams {
            alpha: self.alpha,
            gamma: self.gamma,
            eps: PROB_EPS,
        }
    }
}

fn check_dims(s: &Array2<f64>, p: &Array2<f64>) -> Result<()> {
    if s.dim() != p.dim() {
        return Err(shape_err(format!("mask {:?} vs prediction {:?}", s.dim(), p.dim())));
    }
    Ok(())
}

/// Mean absolute difference between mask and prediction.
pub fn l1_loss(s: &Array2<f64>, p: &Array2<f64>) -> Result<f64> {
    check_dims(s, p)?;
    let mut sum = 0.0;
    Zip::from(s).and(p).for_each(|a, b| sum += (a - b).abs());
    Ok(sum / s.len() as f64)
}

/// Pixel-mean focal loss.
pub fn focal_loss(s: &Array2<f64>, p: &Array2<f64>, cfg: &LossConfig) -> Result<f64> {
    check_dims(s, p)?;
    let fp = cfg.focal_params();
    let mut sum = 0.0;
    Zip::from(s).and(p).for_each(|&t, &q| sum += focal_term(q, t, fp));
    Ok(sum / s.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l1: f64,
    pub focal: f64,
    pub total: f64,
}

pub fn total_loss(s: &Array2<f64>, p: &Array2<f64>, cfg: &LossConfig) -> Result<LossParts> {
    let l1 = l1_loss(s, p)?;
    let focal = focal_loss(s, p, cfg)?;
    Ok(LossParts {
        l1,
        focal,
        total: cfg.lambda_l1 * l1 + cfg.lambda_focal * focal,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub weight_decay: f64,
    /// Adam moment decay rates.
    pub betas: (f64, f64),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.04,
            momentum: 0.9,
            weight_decay: 0.0,
            betas: (0.9, 0.999),
        }
    }
}

/// Per-parameter optimiser state, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer {
            cfg,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        }
    }

    /// Apply one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, model: &mut SegModel, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.steps += 1;
        let trainable = model.trainable_parameters();
        let c = self.cfg;
        for (name, grad) in grads.iter().filter(|(n, _)| trainable.contains(*n)) {
            let p = model.param_mut(name)?;
            let mut g = grad.clone();
            if c.weight_decay != 0.0 {
                g = g.zip_map(p, |gv, pv| gv + c.weight_decay * pv)?;
            }
            match c.kind {
                OptimizerKind::Sgd => {
                    let v = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    for ((vv, gv), pv) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                        *vv = c.momentum * *vv + gv;
                        *pv -= c.lr * *vv;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = c.betas;
                    let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let bc1 = 1.0 - b1.powi(self.steps as i32);
                    let bc2 = 1.0 - b2.powi(self.steps as i32);
                    for (((mv, vv), gv), pv) in m
                        .data_mut()
                        .iter_mut()
                        .zip(v.data_mut().iter_mut())
                        .zip(g.data())
                        .zip(p.data_mut())
                    {
                        *mv = b1 * *mv + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        *pv -= c.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + 1e-8);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_normal: usize,
    pub batch_anomalous: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub sim: SimConfig,
    /// Save a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Log progress every this many iterations (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2700,
            batch_normal: 4,
            batch_anomalous: 4,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            sim: SimConfig::default(),
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.sim.validate()?;
        if self.batch_normal + self.batch_anomalous == 0 {
            return Err(Error::InvalidConfig("batch must contain at least one image".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// A training batch: normal items first, then simulated anomalies.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    /// `[B, 3, H, W]` in `[0, 1]`.
    pub images: Tensor,
    /// `[B, 1, H, W]`, all zero for normal items.
    pub masks: Tensor,
    /// Index of the source training image of each item.
    pub sources: Vec<usize>,
    /// Noise kind and `δ` of simulated items; `None` for normal ones.
    pub sim: Vec<Option<(NoiseKind, f64)>>,
}

pub fn make_batch<S: ImageSource + ?Sized, R: Rng>(
    train: &S,
    n_normal: usize,
    n_anomalous: usize,
    sim: &SimConfig,
    tex: &TextureSource,
    rng: &mut R,
) -> Result<TrainBatch> {
    if train.is_empty() {
        return Err(Error::NotEnoughItems { needed: 1, got: 0 });
    }
    let total = n_normal + n_anomalous;
    // draw everything up front so parallel simulation stays deterministic
    let plan: Vec<(usize, u64)> = (0..total).map(|_| (rng.gen_range(0..train.len()), rng.gen())).collect();
    let items = plan
        .par_iter()
        .enumerate()
        .map(|(i, &(src, seed))| {
            let img = train.load(src)?;
            let (h, w) = (img.height(), img.width());
            if i < n_normal {
                Ok((img.to_tensor(), Tensor::zeros([1, 1, h, w]), None))
            } else {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let s = simulate(&img, sim, tex, &mut r)?;
                let mask = Tensor::from_vec([1, 1, h, w], s.mask.values().iter().copied().collect())?;
                Ok((s.image.to_tensor(), mask, Some((s.kind, s.delta))))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (imgs, rest): (Vec<_>, Vec<_>) = items.into_iter().map(|(a, b, c)| (a, (b, c))).unzip();
    let (masks, sim): (Vec<_>, Vec<_>) = rest.into_iter().unzip();
    Ok(TrainBatch {
        images: Tensor::stack(&imgs)?,
        masks: Tensor::stack(&masks)?,
        sources: plan.iter().map(|p| p.0).collect(),
        sim,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub l1: f64,
    pub focal: f64,
    pub total: f64,
}

/// Build the loss graph of one batch. Returns the graph and
/// `(l1, focal, total)` nodes.
pub fn loss_graph(model: &SegModel, batch: &TrainBatch, loss: &LossConfig) -> Result<(Graph, [crate::autograd::Var; 3])> {
    let mut g = Graph::new(true);
    let out = model.forward(&mut g, &batch.images)?;
    let l1 = g.l1_loss(out.probs, &batch.masks)?;
    let focal = g.focal_loss(out.probs, &batch.masks, loss.focal_params())?;
    let total = g.weighted_sum(&[(l1, loss.lambda_l1), (focal, loss.lambda_focal)])?;
    Ok((g, [l1, focal, total]))
}

/// One optimisation step on `batch`.
pub fn train_step(model: &mut SegModel, opt: &mut Optimizer, batch: &TrainBatch, loss: &LossConfig, iteration: usize) -> Result<LossRecord> {
    let (mut g, [l1, focal, total]) = loss_graph(model, batch, loss)?;
    let rec = LossRecord {
        iteration,
        l1: g.value(l1).data()[0],
        focal: g.value(focal).data()[0],
        total: g.value(total).data()[0],
    };
    if !(rec.l1.is_finite() && rec.focal.is_finite() && rec.total.is_finite()) {
        return Err(Error::NonFiniteLoss {
            iteration,
            l1: rec.l1,
            focal: rec.focal,
            total: rec.total,
        });
    }
    let grads = g.backward(total);
    opt.step(model, grads.params())?;
    model.apply_bn_observations(&g.take_bn_observations())?;
    Ok(rec)
}

/// Run `cfg.iterations` steps. `on_step` sees the model after every step
/// (used for logging and periodic checkpoints).
pub fn train_with<S: ImageSource + ?Sized>(
    model: &mut SegModel,
    train: &S,
    tex: &TextureSource,
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&SegModel, &LossRecord) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let s = model.config().image_size;
    cfg.sim.validate_for(s, s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = make_batch(train, cfg.batch_normal, cfg.batch_anomalous, &cfg.sim, tex, &mut rng)?;
        let rec = train_step(model, &mut opt, &batch, &cfg.loss, it)?;
        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            log::info!("iter {} l1 {:.5} focal {:.5} total {:.5}", it + 1, rec.l1, rec.focal, rec.total);
        }
        on_step(model, &rec)?;
        trace.push(rec);
    }
    Ok(trace)
}

pub fn train<S: ImageSource + ?Sized>(
    model: &mut SegModel,
    train: &S,
    tex: &TextureSource,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<LossRecord>> {
    train_with(model, train, tex, cfg, seed, |_, _| Ok(()))
}

/// Write the loss trace as CSV with columns `iteration,l1,focal,total`.
pub fn write_loss_csv(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in trace {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Names whose kind is trainable or buffer in either store; what training
/// is allowed to modify.
pub fn mutable_names(model: &SegModel) -> std::collections::BTreeSet<String> {
    let mut out = model.trainable_parameters();
    for store in [model.encoder().store(), model.head_store()] {
        out.extend(store.names_of(ParamKind::Buffer).map(str::to_owned));
    }
    out
}
