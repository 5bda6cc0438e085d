//! Rate-distortion pre-training, gradient-regularised teacher training and
//! adversarial finetuning with a distilled rate prior.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rn_autodiff::{grad, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attack::{attack_batch, AttackConfig, AttackKind, AttackQuantization, NoiseInit};
use crate::codec::{rd_loss, BoundParams, CodecGraph, Quantizer};
use crate::data::DatasetHandle;
use crate::io::write_atomic;
use crate::optim::{Adam, LrSchedule};
use crate::{Codec, Error, ImageBatch, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub lr: LrSchedule,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            steps_per_epoch: 50,
            batch_size: 8,
            lambda: 1000.0,
            lr: LrSchedule {
                initial: 1e-3,
                decay_start: 8,
                decay_every: 4,
            },
        }
    }
}

impl PretrainConfig {
    /// 100 epochs at 1e-4, halved every 25 after 50, batch 16.
    pub fn full_scale() -> Self {
        Self {
            epochs: 100,
            steps_per_epoch: 1000,
            batch_size: 16,
            lambda: 1000.0,
            lr: LrSchedule::pretrain(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("pretrain.steps_per_epoch", self.steps_per_epoch)?;
        positive("pretrain.batch_size", self.batch_size)?;
        positive_f("pretrain.lambda", self.lambda)?;
        validate_lr("pretrain.lr", &self.lr)
    }
}

/// What the finetune reconstruction term compares against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistortionTarget {
    /// The mixed batch itself, adversarial members included.
    Adversarial,
    /// The clean originals.
    Clean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lambda: f64,
    /// Stage I smooth weight and Stage II rate-prior weight.
    pub alpha: f64,
    /// Stage II smooth weight.
    pub beta: f64,
    pub lr: LrSchedule,
    pub batch_size_stage1: usize,
    pub batch_size_stage2: usize,
    pub psnr_iterations: usize,
    pub bpp_iterations: usize,
    pub epsilon: f64,
    pub attack_step_size: f64,
    /// Include `||d bpp_main / dx||^2` in the smooth loss.
    pub smooth_bpp: bool,
    /// Include the Hutchinson `||dy/dx||_F^2` estimate in the smooth loss.
    pub smooth_jacobian: bool,
    pub distortion_target: DistortionTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            steps_per_epoch: 25,
            lambda: 1000.0,
            alpha: 1.0,
            beta: 0.01,
            lr: LrSchedule {
                initial: 2e-4,
                decay_start: 2,
                decay_every: 1,
            },
            batch_size_stage1: 16,
            batch_size_stage2: 3,
            psnr_iterations: 200,
            bpp_iterations: 100,
            epsilon: 5e-4,
            attack_step_size: 1e-3,
            smooth_bpp: true,
            smooth_jacobian: true,
            distortion_target: DistortionTarget::Adversarial,
        }
    }
}

impl TrainConfig {
    /// 100 epochs at 5e-5, halved every 25 after 25.
    pub fn full_scale() -> Self {
        Self {
            epochs: 100,
            steps_per_epoch: 1000,
            lr: LrSchedule::finetune(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("train.steps_per_epoch", self.steps_per_epoch)?;
        positive("train.batch_size_stage1", self.batch_size_stage1)?;
        if self.batch_size_stage2 != 3 {
            return Err(Error::config(
                "train.batch_size_stage2",
                "must be 3 (psnr-attacked, bpp-attacked, clean)",
            ));
        }
        positive_f("train.lambda", self.lambda)?;
        non_negative("train.alpha", self.alpha)?;
        non_negative("train.beta", self.beta)?;
        positive_f("train.epsilon", self.epsilon)?;
        positive_f("train.attack_step_size", self.attack_step_size)?;
        validate_lr("train.lr", &self.lr)
    }

    pub fn smooth_terms(&self) -> SmoothTerms {
        SmoothTerms {
            bpp: self.smooth_bpp,
            jacobian: self.smooth_jacobian,
        }
    }

    /// Attack used to build the adversarial members of a Stage II batch.
    pub fn attack(&self, kind: AttackKind, seed: u64) -> AttackConfig {
        AttackConfig {
            kind,
            iterations: match kind {
                AttackKind::Psnr => self.psnr_iterations,
                AttackKind::Bpp => self.bpp_iterations,
            },
            epsilon: self.epsilon,
            step_size: self.attack_step_size,
            seed,
            init: NoiseInit::Uniform,
            init_scale: 1e-3,
            quantization: AttackQuantization::Round,
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(field, "must be at least 1"));
    }
    Ok(())
}

fn positive_f(field: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::config(field, format!("must be positive, got {v}")));
    }
    Ok(())
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::config(field, format!("must be non-negative, got {v}")));
    }
    Ok(())
}

fn validate_lr(field: &str, lr: &LrSchedule) -> Result<()> {
    positive_f(&format!("{field}.initial"), lr.initial)?;
    positive(&format!("{field}.decay_every"), lr.decay_every)
}

fn step_seed(seed: u64, stream: u64, step: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

const STREAM_QUANT: u64 = 1;
const STREAM_PROBE: u64 = 2;
const STREAM_ATTACK: u64 = 3;

/// Which input-gradient penalties the smooth loss includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SmoothTerms {
    pub bpp: bool,
    pub jacobian: bool,
}

impl SmoothTerms {
    pub const ALL: SmoothTerms = SmoothTerms {
        bpp: true,
        jacobian: true,
    };
}

/// Rademacher (+1/-1) probe.
pub fn rademacher(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| if rng.random::<bool>() { 1.0 } else { -1.0 })
}

/// `||d<y, v>/dx||^2`, a one-probe unbiased estimate of `||dy/dx||_F^2`.
/// Differentiable with respect to everything `y` depends on.
pub fn hutchinson_term(y: &Var, x: &Var, probe: &Tensor) -> Result<Var> {
    let g = grad(&y.mul_const(probe).sum(), &[x], true)?.remove(0);
    Ok(g.square().sum())
}

/// `||d bpp_main / dx||^2`, differentiable.
pub fn bpp_gradient_term(graph: &CodecGraph, x: &Var) -> Result<Var> {
    let g = grad(&graph.rate.bpp_main, &[x], true)?.remove(0);
    Ok(g.square().sum())
}

/// Smooth-loss components as graph values; `total` is divided by the
/// element count of `x`.
pub struct SmoothVars {
    pub bpp: Option<Var>,
    pub jacobian: Option<Var>,
    pub total: Var,
}

/// Smooth loss of an already-built graph whose input `x` requires grad.
pub fn smooth_from_graph(graph: &CodecGraph, x: &Var, terms: SmoothTerms, probe_seed: u64) -> Result<SmoothVars> {
    let bpp = terms.bpp.then(|| bpp_gradient_term(graph, x)).transpose()?;
    let jacobian = terms
        .jacobian
        .then(|| hutchinson_term(&graph.y, x, &rademacher(graph.y.shape(), probe_seed)))
        .transpose()?;
    let n = x.value().len() as f64;
    let mut total = Var::constant(Tensor::zeros(&[1]));
    for t in bpp.iter().chain(jacobian.iter()) {
        total = total.add(t);
    }
    let total = total.scale(1.0 / n);
    if !total.value().all_finite() {
        return Err(Error::NonFinite("smooth loss input gradient".into()));
    }
    Ok(SmoothVars { bpp, jacobian, total })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothLoss {
    /// `||d bpp_main / dx||^2 / numel(x)`.
    pub bpp: f64,
    /// Hutchinson `||dy/dx||_F^2 / numel(x)`.
    pub jacobian: f64,
    pub total: f64,
}

/// Smooth loss of `codec` at `x` under `quantizer`.
pub fn smooth_loss(
    codec: &Codec,
    x: &ImageBatch,
    quantizer: &mut Quantizer,
    terms: SmoothTerms,
    probe_seed: u64,
) -> Result<SmoothLoss> {
    let p = codec.params.bind(false);
    let xv = Var::param(x.tensor().clone());
    let g = codec.forward_graph(&p, &xv, quantizer)?;
    let s = smooth_from_graph(&g, &xv, terms, probe_seed)?;
    let n = x.tensor().len() as f64;
    Ok(SmoothLoss {
        bpp: s.bpp.map_or(0.0, |v| v.item() / n),
        jacobian: s.jacobian.map_or(0.0, |v| v.item() / n),
        total: s.total.item(),
    })
}

/// Mean over images of `||d bpp_main / dx||` under eval quantization.
pub fn mean_rate_gradient_norm(codec: &Codec, images: &[ImageBatch]) -> Result<f64> {
    let p = codec.params.bind(false);
    let mut total = 0.0;
    for x in images {
        let xv = Var::param(x.tensor().clone());
        let g = codec.forward_graph(&p, &xv, &mut Quantizer::Round)?;
        let gx = grad(&g.rate.bpp_main, &[&xv], false)?.remove(0);
        total += gx.value().sum_squares().sqrt();
    }
    Ok(total / images.len().max(1) as f64)
}

/// Scalar parts of one training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    /// Distortion: MSE for RD training, L1 for finetuning.
    pub d_loss: f64,
    /// Rate: bpp for RD training, rate-prior L1 for finetuning.
    pub r_loss: f64,
    pub smooth_loss: f64,
    pub total: f64,
}

/// `RD_loss + alpha * smooth_loss` for the batch `x`.
pub fn teacher_objective(
    codec: &Codec,
    p: &BoundParams,
    x: &ImageBatch,
    quantizer: &mut Quantizer,
    cfg: &TrainConfig,
    probe_seed: u64,
) -> Result<(Var, LossParts)> {
    let xv = Var::param(x.tensor().clone());
    let g = codec.forward_graph(p, &xv, quantizer)?;
    let rd = rd_loss(&g, &xv, cfg.lambda);
    let mut parts = LossParts {
        d_loss: g.mse(&xv).item(),
        r_loss: g.rate.bpp_total.item(),
        ..LossParts::default()
    };
    let total = if cfg.alpha > 0.0 {
        let s = smooth_from_graph(&g, &xv, cfg.smooth_terms(), probe_seed)?;
        parts.smooth_loss = s.total.item();
        rd.add(&s.total.scale(cfg.alpha))
    } else {
        rd
    };
    parts.total = total.item();
    Ok((total, parts))
}

/// One log row per epoch, averaged over its steps.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub d_loss: f64,
    pub r_loss: f64,
    pub smooth_loss: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(["epoch", "step", "d_loss", "r_loss", "smooth_loss", "total", "lr"])
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }
}

struct EpochAccumulator {
    sum: LossParts,
    steps: usize,
}

impl EpochAccumulator {
    fn new() -> Self {
        Self {
            sum: LossParts::default(),
            steps: 0,
        }
    }

    fn add(&mut self, p: &LossParts) {
        self.sum.d_loss += p.d_loss;
        self.sum.r_loss += p.r_loss;
        self.sum.smooth_loss += p.smooth_loss;
        self.sum.total += p.total;
        self.steps += 1;
    }

    fn row(&self, epoch: usize, step: usize, lr: f64) -> LogRow {
        let n = self.steps.max(1) as f64;
        LogRow {
            epoch,
            step,
            d_loss: self.sum.d_loss / n,
            r_loss: self.sum.r_loss / n,
            smooth_loss: self.sum.smooth_loss / n,
            total: self.sum.total / n,
            lr,
        }
    }
}

fn apply_update(codec: &mut Codec, p: &BoundParams, loss: &Var, adam: &mut Adam, lr: f64) -> Result<()> {
    let vars = p.vars();
    let grads = grad(loss, &vars, false)?;
    let named: Vec<(String, Tensor)> = p
        .names()
        .into_iter()
        .zip(grads.into_iter().map(|g| g.value().clone()))
        .collect();
    if let Some((name, _)) = named.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{name}`")));
    }
    adam.step(&mut codec.params, &named, lr);
    Ok(())
}

/// Plain rate-distortion training.
pub fn pretrain(
    codec: &mut Codec,
    ds: &DatasetHandle,
    cfg: &PretrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainLog> {
    cfg.validate()?;
    ds.check_crop(codec.config.downsampling_factor())?;
    let mut adam = Adam::new();
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.rate(epoch);
        let mut acc = EpochAccumulator::new();
        for _ in 0..cfg.steps_per_epoch {
            let x = ds.random_sample(cfg.batch_size, step as u64)?;
            let p = codec.params.bind(true);
            let xv = Var::constant(x.tensor().clone());
            let mut q = Quantizer::noise(step_seed(seed, STREAM_QUANT, step as u64));
            let g = codec.forward_graph(&p, &xv, &mut q)?;
            let loss = rd_loss(&g, &xv, cfg.lambda);
            let parts = LossParts {
                d_loss: g.mse(&xv).item(),
                r_loss: g.rate.bpp_total.item(),
                smooth_loss: 0.0,
                total: loss.item(),
            };
            if !parts.total.is_finite() {
                return Err(Error::NonFinite(format!("pretrain loss at step {step}")));
            }
            apply_update(codec, &p, &loss, &mut adam, lr)?;
            acc.add(&parts);
            step += 1;
        }
        let row = acc.row(epoch, step, lr);
        on_epoch(&row);
        log.rows.push(row);
    }
    Ok(log)
}

/// One Stage I update: `RD_loss + alpha * smooth_loss` on `batch`.
/// Returns the loss parts evaluated before the update.
pub fn teacher_train_step(
    teacher: &mut Codec,
    batch: &ImageBatch,
    cfg: &TrainConfig,
    adam: &mut Adam,
    lr: f64,
    step_seed_value: u64,
) -> Result<LossParts> {
    let p = teacher.params.bind(true);
    let mut q = Quantizer::noise(step_seed(step_seed_value, STREAM_QUANT, 0));
    let (loss, parts) = teacher_objective(
        teacher,
        &p,
        batch,
        &mut q,
        cfg,
        step_seed(step_seed_value, STREAM_PROBE, 0),
    )?;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite("teacher loss".into()));
    }
    apply_update(teacher, &p, &loss, adam, lr)?;
    Ok(parts)
}

/// Stage I: starts from the pre-trained weights.
pub fn train_teacher(
    pretrained: &Codec,
    ds: &DatasetHandle,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<(Codec, TrainLog)> {
    cfg.validate()?;
    ds.check_crop(pretrained.config.downsampling_factor())?;
    let mut teacher = pretrained.clone();
    let mut adam = Adam::new();
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.rate(epoch);
        let mut acc = EpochAccumulator::new();
        for _ in 0..cfg.steps_per_epoch {
            let x = ds.random_sample(cfg.batch_size_stage1, step as u64)?;
            let parts = teacher_train_step(
                &mut teacher,
                &x,
                cfg,
                &mut adam,
                lr,
                step_seed(seed, 0, step as u64),
            )?;
            acc.add(&parts);
            step += 1;
        }
        let row = acc.row(epoch, step, lr);
        on_epoch(&row);
        log.rows.push(row);
    }
    Ok((teacher, log))
}

/// A Stage II batch: clean triplet, mixed triplet and the teacher's rates.
#[derive(Clone, Debug)]
pub struct DistillBatch {
    pub x_ori: ImageBatch,
    /// `[psnr-attacked x1, bpp-attacked x2, clean x3]`.
    pub x_new: ImageBatch,
    /// Per-image teacher bpp on `x_ori`, eval quantization, no gradient.
    pub bpp_tc: Vec<f64>,
}

/// Per-image eval-mode total bpp.
pub fn per_image_bpp(codec: &Codec, x: &ImageBatch) -> Result<Vec<f64>> {
    let _guard = rn_autodiff::no_grad();
    let p = codec.params.bind(false);
    let g = codec.forward_graph(&p, &Var::constant(x.tensor().clone()), &mut Quantizer::Round)?;
    Ok(g.rate.bpp_per_image().value().data().to_vec())
}

/// Attacks images 1 and 2 of the triplet against the current finetune
/// model and takes the rate prior from the teacher on the clean triplet.
pub fn build_distill_batch(
    x_ori: &ImageBatch,
    teacher: &Codec,
    finetune_model: &Codec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<DistillBatch> {
    if x_ori.batch() != 3 {
        return Err(Error::InvalidArgument(format!(
            "distillation batch needs 3 images, got {}",
            x_ori.batch()
        )));
    }
    let items = x_ori.items();
    let attacked = |i: usize, kind: AttackKind, iterations: usize| -> Result<ImageBatch> {
        if iterations == 0 {
            return Ok(items[i].clone());
        }
        let acfg = cfg.attack(kind, step_seed(seed, STREAM_ATTACK, i as u64));
        let (adv, _) = attack_batch(&items[i], finetune_model, &acfg)?;
        Ok(adv)
    };
    let x1 = attacked(0, AttackKind::Psnr, cfg.psnr_iterations)?;
    let x2 = attacked(1, AttackKind::Bpp, cfg.bpp_iterations)?;
    let x_new = ImageBatch::stack(&[x1, x2, items[2].clone()])?;
    let bpp_tc = per_image_bpp(teacher, x_ori)?;
    Ok(DistillBatch {
        x_ori: x_ori.clone(),
        x_new,
        bpp_tc,
    })
}

/// `D_loss + alpha * R_loss + beta * smooth_loss` for a distillation batch.
pub fn finetune_objective(
    model: &Codec,
    p: &BoundParams,
    batch: &DistillBatch,
    quantizer: &mut Quantizer,
    cfg: &TrainConfig,
    probe_seed: u64,
) -> Result<(Var, LossParts)> {
    let xv = Var::param(batch.x_new.tensor().clone());
    let g = codec_graph(model, p, &xv, quantizer)?;
    let target = match cfg.distortion_target {
        DistortionTarget::Adversarial => xv.clone(),
        DistortionTarget::Clean => Var::constant(batch.x_ori.tensor().clone()),
    };
    let d = g.x_hat.sub(&target).abs().mean();
    let prior = Var::constant(Tensor::new(&[batch.bpp_tc.len()], batch.bpp_tc.clone())?);
    let r = g.rate.bpp_per_image().sub(&prior).abs().mean();
    let mut total = d.add(&r.scale(cfg.alpha));
    let mut parts = LossParts {
        d_loss: d.item(),
        r_loss: r.item(),
        ..LossParts::default()
    };
    if cfg.beta > 0.0 && (cfg.smooth_bpp || cfg.smooth_jacobian) {
        let s = smooth_from_graph(&g, &xv, cfg.smooth_terms(), probe_seed)?;
        parts.smooth_loss = s.total.item();
        total = total.add(&s.total.scale(cfg.beta));
    }
    parts.total = total.item();
    Ok((total, parts))
}

fn codec_graph(model: &Codec, p: &BoundParams, x: &Var, q: &mut Quantizer) -> Result<CodecGraph> {
    model.forward_graph(p, x, q)
}

/// `(D_loss, R_loss)` of the finetune model on a batch, eval quantization.
pub fn distill_losses(batch: &DistillBatch, model: &Codec, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let p = model.params.bind(false);
    let cfg = TrainConfig {
        beta: 0.0,
        ..cfg.clone()
    };
    let (_, parts) = finetune_objective(model, &p, batch, &mut Quantizer::Round, &cfg, 0)?;
    Ok((parts.d_loss, parts.r_loss))
}

/// One Stage II update of the finetune model. The teacher is not involved.
pub fn finetune_step(
    model: &mut Codec,
    batch: &DistillBatch,
    cfg: &TrainConfig,
    adam: &mut Adam,
    lr: f64,
    step_seed_value: u64,
) -> Result<LossParts> {
    let p = model.params.bind(true);
    let mut q = Quantizer::noise(step_seed(step_seed_value, STREAM_QUANT, 0));
    let (loss, parts) = finetune_objective(
        model,
        &p,
        batch,
        &mut q,
        cfg,
        step_seed(step_seed_value, STREAM_PROBE, 0),
    )?;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite("finetune loss".into()));
    }
    apply_update(model, &p, &loss, adam, lr)?;
    Ok(parts)
}

/// Stage II: the finetune model starts from the pre-trained weights, not
/// the teacher's.
pub fn finetune(
    pretrained: &Codec,
    teacher: &Codec,
    ds: &DatasetHandle,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<(Codec, TrainLog)> {
    cfg.validate()?;
    pretrained.params.check_compatible(&teacher.params)?;
    if pretrained.config != teacher.config {
        return Err(Error::Architecture("teacher and pretrained configs differ".into()));
    }
    ds.check_crop(pretrained.config.downsampling_factor())?;
    let mut model = pretrained.clone();
    let mut adam = Adam::new();
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.rate(epoch);
        let mut acc = EpochAccumulator::new();
        for _ in 0..cfg.steps_per_epoch {
            let x = ds.random_sample(cfg.batch_size_stage2, step as u64)?;
            let s = step_seed(seed, 0, step as u64);
            let batch = build_distill_batch(&x, teacher, &model, cfg, s)?;
            let parts = finetune_step(&mut model, &batch, cfg, &mut adam, lr, s)?;
            acc.add(&parts);
            step += 1;
        }
        let row = acc.row(epoch, step, lr);
        on_epoch(&row);
        log.rows.push(row);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_images;
    use crate::CodecConfig;

    fn tiny() -> (Codec, DatasetHandle) {
        let codec = Codec::new(CodecConfig::tiny(), 5).unwrap();
        let ds = DatasetHandle::from_images(synthetic_images(4, 32, 1), 32, 2).unwrap();
        (codec, ds)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            steps_per_epoch: 1,
            batch_size_stage1: 2,
            psnr_iterations: 2,
            bpp_iterations: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rejects_other_stage_two_batch_sizes() {
        let cfg = TrainConfig {
            batch_size_stage2: 4,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "train.batch_size_stage2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_epochs_keep_weights() {
        let (codec, ds) = tiny();
        let cfg = TrainConfig {
            epochs: 0,
            ..quick()
        };
        let (t, log) = train_teacher(&codec, &ds, &cfg, 0, |_| {}).unwrap();
        assert_eq!(t.digest(), codec.digest());
        assert!(log.rows.is_empty());
        let (f, _) = finetune(&codec, &t, &ds, &cfg, 0, |_| {}).unwrap();
        assert_eq!(f.digest(), codec.digest());
    }

    #[test]
    fn alpha_zero_is_plain_rd() {
        let (codec, ds) = tiny();
        let x = ds.random_sample(2, 0).unwrap();
        let cfg = TrainConfig {
            alpha: 0.0,
            ..quick()
        };
        let p = codec.params.bind(false);
        let (_, parts) = teacher_objective(&codec, &p, &x, &mut Quantizer::noise(3), &cfg, 1).unwrap();
        let xv = Var::constant(x.tensor().clone());
        let g = codec.forward_graph(&p, &xv, &mut Quantizer::noise(3)).unwrap();
        assert_eq!(parts.total, rd_loss(&g, &xv, cfg.lambda).item());
    }

    #[test]
    fn objective_is_rd_plus_weighted_smooth() {
        let (codec, ds) = tiny();
        let x = ds.random_sample(2, 0).unwrap();
        let cfg = TrainConfig {
            alpha: 3.0,
            ..quick()
        };
        let p = codec.params.bind(false);
        let (_, parts) = teacher_objective(&codec, &p, &x, &mut Quantizer::noise(3), &cfg, 1).unwrap();
        let s = smooth_loss(&codec, &x, &mut Quantizer::noise(3), SmoothTerms::ALL, 1).unwrap();
        let rd = parts.r_loss + cfg.lambda * parts.d_loss;
        assert!((parts.total - (rd + 3.0 * s.total)).abs() < 1e-9 * parts.total.abs());
        assert!((s.total - (s.bpp + s.jacobian)).abs() < 1e-15);
    }

    #[test]
    fn no_attack_keeps_clean_batch() {
        let (codec, ds) = tiny();
        let x = ds.random_sample(3, 0).unwrap();
        let cfg = TrainConfig {
            psnr_iterations: 0,
            bpp_iterations: 0,
            ..quick()
        };
        let b = build_distill_batch(&x, &codec, &codec, &cfg, 0).unwrap();
        assert_eq!(b.x_new.tensor(), x.tensor());
        let own: Vec<f64> = x
            .items()
            .iter()
            .map(|xi| codec.forward_eval(xi).unwrap().rate.bpp_total)
            .collect();
        for (a, b) in b.bpp_tc.iter().zip(&own) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn third_member_stays_clean() {
        let (codec, ds) = tiny();
        let x = ds.random_sample(3, 0).unwrap();
        let b = build_distill_batch(&x, &codec, &codec, &quick(), 0).unwrap();
        assert_eq!(b.x_new.item(2).tensor(), x.item(2).tensor());
        assert_ne!(b.x_new.item(0).tensor(), x.item(0).tensor());
    }

    #[test]
    fn rate_prior_is_mean_absolute_gap() {
        let (codec, ds) = tiny();
        let x = ds.random_sample(3, 0).unwrap();
        let cfg = TrainConfig {
            psnr_iterations: 0,
            bpp_iterations: 0,
            ..quick()
        };
        let mut b = build_distill_batch(&x, &codec, &codec, &cfg, 0).unwrap();
        let (_, r) = distill_losses(&b, &codec, &cfg).unwrap();
        assert!(r.abs() < 1e-12);
        let own = b.bpp_tc.clone();
        b.bpp_tc = vec![own[0] - 0.2, own[1] + 0.1, own[2]];
        let (_, r) = distill_losses(&b, &codec, &cfg).unwrap();
        assert!((r - 0.1).abs() < 1e-12, "{r}");
    }

    #[test]
    fn coefficients_zero_leave_d_loss() {
        let (codec, ds) = tiny();
        let x = ds.random_sample(3, 0).unwrap();
        let cfg = TrainConfig {
            alpha: 0.0,
            beta: 0.0,
            ..quick()
        };
        let b = build_distill_batch(&x, &codec, &codec, &cfg, 0).unwrap();
        let p = codec.params.bind(false);
        let (_, parts) = finetune_objective(&codec, &p, &b, &mut Quantizer::noise(1), &cfg, 0).unwrap();
        assert_eq!(parts.total, parts.d_loss);
    }

    #[test]
    fn finetune_step_leaves_teacher() {
        let (codec, ds) = tiny();
        let teacher = codec.clone();
        let before = teacher.digest();
        let mut model = codec.clone();
        let x = ds.random_sample(3, 0).unwrap();
        let b = build_distill_batch(&x, &teacher, &model, &quick(), 0).unwrap();
        finetune_step(&mut model, &b, &quick(), &mut Adam::new(), 1e-3, 0).unwrap();
        assert_eq!(teacher.digest(), before);
        assert_ne!(model.digest(), before);
    }

    #[test]
    fn log_records_each_epoch() {
        let (codec, ds) = tiny();
        let cfg = TrainConfig {
            epochs: 2,
            ..quick()
        };
        let (_, log) = finetune(&codec, &codec, &ds, &cfg, 0, |_| {}).unwrap();
        assert_eq!(log.rows.len(), 2);
        assert!(log.rows.iter().all(|r| r.d_loss > 0.0 && r.smooth_loss > 0.0));
        let csv = String::from_utf8(log.to_csv().unwrap()).unwrap();
        assert!(csv.starts_with("epoch,step,d_loss,r_loss,smooth_loss,total,lr\n"));
    }
}
