//! Constrained-noise attacks on a frozen codec.
//!
//! A trainable perturbation `n` is optimised with Adam. While the mean
//! squared noise power is at or above `epsilon` the loss pulls the noise back
//! toward the budget while holding the untargeted metric at its clean value;
//! below the budget the loss attacks the targeted metric directly.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rn_autodiff::{grad, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{mse, BoundParams, Quantizer};
use crate::eval::psnr_from_mse;
use crate::io::write_atomic;
use crate::optim::Adam;
use crate::{Codec, Error, ImageBatch, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    /// Degrade reconstruction quality at constant rate.
    Psnr,
    /// Inflate the rate at constant reconstruction quality.
    Bpp,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Psnr => "psnr",
            AttackKind::Bpp => "bpp",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseInit {
    Uniform,
    Zeros,
}

/// How latents are quantized inside the attack graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackQuantization {
    /// Rounding with a straight-through gradient.
    Round,
    /// No quantization; smooth, for finite-difference checks.
    Passthrough,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub iterations: usize,
    /// Budget on the mean squared perturbation per element.
    pub epsilon: f64,
    pub step_size: f64,
    pub seed: u64,
    pub init: NoiseInit,
    /// Half-width of the uniform initial noise.
    pub init_scale: f64,
    pub quantization: AttackQuantization,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::Psnr,
            iterations: 200,
            epsilon: 5e-4,
            step_size: 1e-3,
            seed: 0,
            init: NoiseInit::Uniform,
            init_scale: 1e-3,
            quantization: AttackQuantization::Round,
        }
    }
}

impl AttackConfig {
    pub fn psnr(iterations: usize) -> Self {
        Self {
            kind: AttackKind::Psnr,
            iterations,
            ..Self::default()
        }
    }

    pub fn bpp(iterations: usize) -> Self {
        Self {
            kind: AttackKind::Bpp,
            iterations,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("step_size", "must be positive"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("init_scale", "must be non-negative"));
        }
        Ok(())
    }

    /// Short stable identifier of every field.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("attack config serialises");
        crate::hex(&Sha256::digest(text.as_bytes())[..8])
    }

    fn quantizer(&self) -> Quantizer {
        match self.quantization {
            AttackQuantization::Round => Quantizer::Round,
            AttackQuantization::Passthrough => Quantizer::Passthrough,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Noise power at or above the budget.
    Upper,
    Lower,
}

impl Branch {
    pub fn select(noise_power: f64, epsilon: f64) -> Self {
        if noise_power >= epsilon {
            Branch::Upper
        } else {
            Branch::Lower
        }
    }
}

/// One attack iteration, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub branch: Branch,
    pub noise_power: f64,
    pub loss: f64,
    pub bpp: f64,
    pub mse: f64,
}

#[derive(Clone, Debug)]
pub struct AttackState {
    pub noise: Tensor,
    x: ImageBatch,
    bpp_ori: f64,
    mse_ori: f64,
    pub iteration: usize,
    pub trace: Vec<TraceRecord>,
    adam: Adam,
}

impl AttackState {
    pub fn clean(&self) -> &ImageBatch {
        &self.x
    }

    pub fn bpp_ori(&self) -> f64 {
        self.bpp_ori
    }

    pub fn mse_ori(&self) -> f64 {
        self.mse_ori
    }

    /// `clamp(x + n, 0, 1)`.
    pub fn adversarial(&self) -> ImageBatch {
        ImageBatch::clamped(self.x.tensor().zip_map(&self.noise, |a, b| a + b))
            .expect("clamped image is valid")
    }
}

/// The attack objective at one noise value.
pub struct AttackLoss {
    pub loss: Var,
    pub branch: Branch,
    pub noise_power: f64,
    pub bpp: f64,
    pub mse: f64,
}

struct Measure {
    bpp: Var,
    mse: Var,
}

fn measure(codec: &Codec, p: &BoundParams, x: &Var, noise: &Var, cfg: &AttackConfig) -> Result<Measure> {
    let x_adv = x.add(noise).clamp(0.0, 1.0);
    let g = codec.forward_graph(p, &x_adv, &mut cfg.quantizer())?;
    Ok(Measure {
        bpp: g.rate.bpp_total.clone(),
        mse: mse(x, &g.x_hat),
    })
}

/// Mean squared noise power `||n||^2`.
pub fn noise_power(noise: &Tensor) -> f64 {
    noise.sum_squares() / noise.len() as f64
}

/// Builds the branch loss for `noise` against the state's clean image.
pub fn attack_loss(
    state: &AttackState,
    codec: &Codec,
    p: &BoundParams,
    noise: &Var,
    cfg: &AttackConfig,
) -> Result<AttackLoss> {
    let x = Var::constant(state.x.tensor().clone());
    let m = measure(codec, p, &x, noise, cfg)?;
    let power = noise.square().mean();
    let np = power.item();
    let branch = Branch::select(np, cfg.epsilon);
    let loss = match (cfg.kind, branch) {
        (AttackKind::Psnr, Branch::Upper) => power.sqrt().add(&m.bpp.shift(-state.bpp_ori).abs()),
        (AttackKind::Psnr, Branch::Lower) => m.mse.neg().shift(1.0),
        (AttackKind::Bpp, Branch::Upper) => power.sqrt().add(&m.mse.shift(-state.mse_ori).abs()),
        (AttackKind::Bpp, Branch::Lower) => m.bpp.neg(),
    };
    Ok(AttackLoss {
        branch,
        noise_power: np,
        bpp: m.bpp.item(),
        mse: m.mse.item(),
        loss,
    })
}

/// Psnr-attack objective at the state's current noise.
pub fn psnr_attack_loss(state: &AttackState, codec: &Codec, cfg: &AttackConfig) -> Result<f64> {
    let cfg = AttackConfig { kind: AttackKind::Psnr, ..cfg.clone() };
    current_loss(state, codec, &cfg)
}

/// Bpp-attack objective at the state's current noise.
pub fn bpp_attack_loss(state: &AttackState, codec: &Codec, cfg: &AttackConfig) -> Result<f64> {
    let cfg = AttackConfig { kind: AttackKind::Bpp, ..cfg.clone() };
    current_loss(state, codec, &cfg)
}

fn current_loss(state: &AttackState, codec: &Codec, cfg: &AttackConfig) -> Result<f64> {
    let _guard = rn_autodiff::no_grad();
    let p = codec.params.bind(false);
    let noise = Var::constant(state.noise.clone());
    Ok(attack_loss(state, codec, &p, &noise, cfg)?.loss.item())
}

pub fn init_attack(x: &ImageBatch, codec: &Codec, cfg: &AttackConfig) -> Result<AttackState> {
    cfg.validate()?;
    codec.check_input(x.tensor().shape())?;
    let noise = match cfg.init {
        NoiseInit::Zeros => Tensor::zeros(x.tensor().shape()),
        NoiseInit::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let s = cfg.init_scale;
            Tensor::from_fn(x.tensor().shape(), |_| {
                if s > 0.0 {
                    rng.random_range(-s..=s)
                } else {
                    0.0
                }
            })
        }
    };
    let (bpp_ori, mse_ori) = {
        let _guard = rn_autodiff::no_grad();
        let p = codec.params.bind(false);
        let xv = Var::constant(x.tensor().clone());
        let m = measure(codec, &p, &xv, &Var::constant(Tensor::zeros(x.tensor().shape())), cfg)?;
        (m.bpp.item(), m.mse.item())
    };
    Ok(AttackState {
        noise,
        x: x.clone(),
        bpp_ori,
        mse_ori,
        iteration: 0,
        trace: Vec::new(),
        adam: Adam::new(),
    })
}

/// One Adam update of the noise. Codec weights are never touched.
pub fn attack_step(state: &mut AttackState, codec: &Codec, cfg: &AttackConfig) -> Result<()> {
    let p = codec.params.bind(false);
    let noise = Var::param(state.noise.clone());
    let l = attack_loss(state, codec, &p, &noise, cfg)?;
    let value = l.loss.item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "{} attack loss at iteration {} (noise power {})",
            cfg.kind, state.iteration, l.noise_power
        )));
    }
    let g = grad(&l.loss, &[&noise], false)?.remove(0);
    if !g.value().all_finite() {
        return Err(Error::NonFinite(format!(
            "{} attack gradient at iteration {}",
            cfg.kind, state.iteration
        )));
    }
    state.trace.push(TraceRecord {
        iteration: state.iteration,
        branch: l.branch,
        noise_power: l.noise_power,
        loss: value,
        bpp: l.bpp,
        mse: l.mse,
    });
    state.adam.begin_step();
    state.adam.update("noise", &mut state.noise, g.value(), cfg.step_size);
    state.iteration += 1;
    Ok(())
}

/// Eval-mode measurements of one codec input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub bpp: f64,
    /// Clamped reconstruction against the clean image.
    pub psnr: f64,
    /// Clamped reconstruction against the input that was coded.
    pub psnr_vs_input: f64,
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub kind: AttackKind,
    pub adversarial_image: ImageBatch,
    pub clean: Metrics,
    pub attacked: Metrics,
    pub delta_psnr: f64,
    pub delta_bpp: f64,
    pub final_noise_power: f64,
    pub trace: Vec<TraceRecord>,
}

impl AttackResult {
    pub fn relative_bpp_change(&self) -> f64 {
        self.delta_bpp / self.clean.bpp
    }
}

/// Eval-mode bpp and PSNR of coding `input`, whose clean original is
/// `clean`.
pub fn measure_eval(codec: &Codec, clean: &ImageBatch, input: &ImageBatch) -> Result<Metrics> {
    let out = codec.forward_eval(input)?;
    let rec = out.clamped_reconstruction();
    let err = |r: &ImageBatch| r.tensor().zip_map(rec.tensor(), |a, b| (a - b) * (a - b)).mean();
    Ok(Metrics {
        bpp: out.rate.bpp_total,
        psnr: psnr_from_mse(err(clean)),
        psnr_vs_input: psnr_from_mse(err(input)),
    })
}

pub fn run_attack(x: &ImageBatch, codec: &Codec, cfg: &AttackConfig) -> Result<AttackResult> {
    let mut state = init_attack(x, codec, cfg)?;
    for _ in 0..cfg.iterations {
        attack_step(&mut state, codec, cfg)?;
    }
    finish(state, codec, cfg.kind)
}

fn finish(state: AttackState, codec: &Codec, kind: AttackKind) -> Result<AttackResult> {
    let adversarial_image = state.adversarial();
    let clean = measure_eval(codec, &state.x, &state.x)?;
    let attacked = measure_eval(codec, &state.x, &adversarial_image)?;
    Ok(AttackResult {
        kind,
        adversarial_image,
        clean,
        attacked,
        delta_psnr: attacked.psnr - clean.psnr,
        delta_bpp: attacked.bpp - clean.bpp,
        final_noise_power: noise_power(&state.noise),
        trace: state.trace,
    })
}

/// Attacks every image of a batch independently; returns the stacked
/// adversarial batch and per-image results.
pub fn attack_batch(x: &ImageBatch, codec: &Codec, cfg: &AttackConfig) -> Result<(ImageBatch, Vec<AttackResult>)> {
    let results = x
        .items()
        .iter()
        .map(|xi| run_attack(xi, codec, cfg))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<_> = results.iter().map(|r| r.adversarial_image.clone()).collect();
    Ok((ImageBatch::stack(&images)?, results))
}

pub fn trace_csv(trace: &[TraceRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in trace {
        w.serialize(r)
            .map_err(|e| Error::InvalidArgument(format!("trace row: {e}")))?;
    }
    if trace.is_empty() {
        w.write_record(["iteration", "branch", "noise_power", "loss", "bpp", "mse"])
            .map_err(|e| Error::InvalidArgument(format!("trace header: {e}")))?;
    }
    let mut out = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("trace csv: {e}")))?;
    out.flush().ok();
    Ok(out)
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    write_atomic(path, &trace_csv(trace)?)
}
