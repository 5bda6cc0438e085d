//! A compact scale-hyperprior codec.
//!
//! ```text
//! x -> g_a -> y -> h_a -> z -> Q -> z_hat -> h_s -> scales
//!             |                                       |
//!             Q -> y_hat ---------- rate(y_hat | scales)
//!             |
//!             g_s -> x_hat
//! ```
//!
//! `g_a` is four stride-2 convolutions with GDN between them, `g_s` mirrors
//! it with transposed convolutions and inverse GDN, and the hyper path is two
//! layers each way. The hyper latent `z` uses a per-channel zero-mean
//! Gaussian; `y` uses a zero-mean Gaussian whose scales come from `h_s`.

pub mod entropy;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rn_autodiff::{no_grad, ConvSpec, Padding, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use entropy::{
    estimate_rate, gaussian_likelihood, rate_from_likelihoods, QuantMode, Quantizer, RateReport,
    RateVars, LIKELIHOOD_FLOOR, SCALE_FLOOR,
};
pub use params::{BoundParams, ParamSet};

use crate::{Error, ImageBatch, Result};

const ANALYSIS_LAYERS: usize = 4;
const GDN_BETA_MIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    /// Periodic boundary: tiled content codes at exactly the same rate.
    #[default]
    Circular,
    Zero,
}

impl From<PaddingMode> for Padding {
    fn from(p: PaddingMode) -> Self {
        match p {
            PaddingMode::Circular => Padding::Circular,
            PaddingMode::Zero => Padding::Zero,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Width of the analysis/synthesis transforms.
    pub channels: usize,
    /// Channels of the main latent `y`.
    pub latent_channels: usize,
    /// Channels of the hyper latent `z`.
    pub hyper_channels: usize,
    /// Kernel size of the strided convolutions (odd).
    pub kernel: usize,
    pub padding: PaddingMode,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            latent_channels: 96,
            hyper_channels: 64,
            kernel: 5,
            padding: PaddingMode::Circular,
        }
    }
}

impl CodecConfig {
    /// Small widths for desk-scale experiments.
    pub fn toy() -> Self {
        Self {
            channels: 16,
            latent_channels: 32,
            hyper_channels: 16,
            kernel: 5,
            padding: PaddingMode::Circular,
        }
    }

    /// Tiny widths for gradient checks.
    pub fn tiny() -> Self {
        Self {
            channels: 4,
            latent_channels: 6,
            hyper_channels: 3,
            kernel: 3,
            padding: PaddingMode::Circular,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("codec.channels", self.channels),
            ("codec.latent_channels", self.latent_channels),
            ("codec.hyper_channels", self.hyper_channels),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.kernel < 3 || self.kernel % 2 == 0 {
            return Err(Error::config("codec.kernel", "must be odd and >= 3"));
        }
        Ok(())
    }

    /// Spatial downsampling of the main latent.
    pub fn main_factor(&self) -> usize {
        1 << ANALYSIS_LAYERS
    }

    /// Total downsampling including the hyper path; image sides must be
    /// multiples of this.
    pub fn downsampling_factor(&self) -> usize {
        self.main_factor() * 2
    }

    fn strided(&self) -> ConvSpec {
        ConvSpec::new(self.kernel, 2, self.kernel / 2, self.padding.into())
    }

    fn same3(&self) -> ConvSpec {
        ConvSpec::new(3, 1, 1, self.padding.into())
    }

    fn pointwise(&self) -> ConvSpec {
        ConvSpec::new(1, 1, 0, Padding::Zero)
    }
}

/// Main latent, hyper latent and the conditional scales of `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub y: Tensor,
    pub z: Tensor,
    pub scales: Tensor,
}

/// Plain-value result of a codec pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecOutput {
    /// Unclamped reconstruction.
    pub reconstruction: Tensor,
    pub latents: LatentPair,
    pub rate: RateReport,
}

impl CodecOutput {
    /// Reconstruction clamped to `[0, 1]`, as used for metrics.
    pub fn clamped_reconstruction(&self) -> ImageBatch {
        ImageBatch::clamped(self.reconstruction.clone()).expect("clamped reconstruction")
    }
}

/// Graph-valued result of a codec pass.
pub struct CodecGraph {
    pub x_hat: Var,
    pub y: Var,
    pub y_hat: Var,
    pub z: Var,
    pub z_hat: Var,
    pub scales: Var,
    pub rate: RateVars,
}

impl CodecGraph {
    pub fn to_output(&self) -> CodecOutput {
        CodecOutput {
            reconstruction: self.x_hat.value().clone(),
            latents: LatentPair {
                y: self.y.value().clone(),
                z: self.z.value().clone(),
                scales: self.scales.value().clone(),
            },
            rate: self.rate.report(),
        }
    }

    /// Mean squared error between the reconstruction and `x`.
    pub fn mse(&self, x: &Var) -> Var {
        mse(&self.x_hat, x)
    }
}

pub fn mse(a: &Var, b: &Var) -> Var {
    a.sub(b).square().mean()
}

/// Per-image mean squared error, `[B]`.
pub fn mse_per_image(a: &Var, b: &Var) -> Var {
    let per = (a.value().len() / a.shape()[0]) as f64;
    a.sub(b).square().sum_batch().scale(1.0 / per)
}

/// `R + lambda * D` with `D` the MSE on the `[0, 1]` scale.
pub fn rd_loss(graph: &CodecGraph, x: &Var, lambda: f64) -> Var {
    graph.rate.bpp_total.add(&graph.mse(x).scale(lambda))
}

/// Scalar form of [`rd_loss`] for already-measured quantities.
pub fn rd_loss_value(bpp_total: f64, mse: f64, lambda: f64) -> f64 {
    bpp_total + lambda * mse
}

/// Codec weights plus architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamSet,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Weight with variance `1 / fan_in` plus a zero bias of `outputs` channels.
fn conv_layer(
    params: &mut ParamSet,
    name: &str,
    shape: [usize; 4],
    fan_in: f64,
    outputs: usize,
    rng: &mut ChaCha8Rng,
) {
    let bound = (3.0 / fan_in).sqrt();
    params.insert(format!("{name}.weight"), uniform(&shape, bound, rng));
    params.insert(format!("{name}.bias"), Tensor::zeros(&[outputs]));
}

fn gdn_layer(params: &mut ParamSet, name: &str, channels: usize) {
    params.insert(format!("{name}.beta"), Tensor::ones(&[channels]));
    params.insert(
        format!("{name}.gamma"),
        Tensor::full(&[channels, channels, 1, 1], 0.1),
    );
}

/// Inverse softplus, for initialising raw scale parameters.
fn softplus_inv(v: f64) -> f64 {
    v.exp_m1().ln()
}

impl Codec {
    /// Randomly initialised codec.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m, nh, k) = (
            config.channels,
            config.latent_channels,
            config.hyper_channels,
            config.kernel,
        );
        let kk = (k * k) as f64;
        let mut p = ParamSet::new();

        let widths = [3, n, n, n, m];
        for i in 0..ANALYSIS_LAYERS {
            let (cin, cout) = (widths[i], widths[i + 1]);
            conv_layer(&mut p, &format!("g_a.conv{i}"), [cout, cin, k, k], cin as f64 * kk, cout, &mut rng);
            if i + 1 < ANALYSIS_LAYERS {
                gdn_layer(&mut p, &format!("g_a.gdn{i}"), cout);
            }
        }
        // Synthesis layer i maps widths_s[i] -> widths_s[i + 1]; transposed
        // weights are stored as [in, out, k, k].
        let widths_s = [m, n, n, n, 3];
        for i in 0..ANALYSIS_LAYERS {
            let (cin, cout) = (widths_s[i], widths_s[i + 1]);
            conv_layer(&mut p, &format!("g_s.conv{i}"), [cin, cout, k, k], cin as f64 * kk / 4.0, cout, &mut rng);
            if i + 1 < ANALYSIS_LAYERS {
                gdn_layer(&mut p, &format!("g_s.igdn{i}"), cout);
            }
        }
        conv_layer(&mut p, "h_a.conv0", [nh, m, 3, 3], m as f64 * 9.0, nh, &mut rng);
        conv_layer(&mut p, "h_a.conv1", [nh, nh, k, k], nh as f64 * kk, nh, &mut rng);
        conv_layer(&mut p, "h_s.conv0", [nh, nh, k, k], nh as f64 * kk / 4.0, nh, &mut rng);
        conv_layer(&mut p, "h_s.conv1", [m, nh, 3, 3], nh as f64 * 9.0, m, &mut rng);
        p.insert("h_s.conv1.bias", Tensor::full(&[m], softplus_inv(1.0)));
        p.insert("entropy.z_scale", Tensor::full(&[nh], softplus_inv(1.0)));

        Ok(Self { config, params: p })
    }

    /// Rebuilds a codec from stored weights, checking every array's shape.
    pub fn from_params(config: CodecConfig, params: ParamSet) -> Result<Self> {
        let reference = Codec::new(config.clone(), 0)?;
        reference.params.check_compatible(&params)?;
        Ok(Self { config, params })
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!(
                "codec input must be [batch, 3, height, width], got {shape:?}"
            )));
        }
        let f = self.config.downsampling_factor();
        if shape[2] % f != 0 || shape[3] % f != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::NotDivisible {
                height: shape[2],
                width: shape[3],
                factor: f,
            });
        }
        Ok(())
    }

    fn gdn(&self, p: &BoundParams, name: &str, x: &Var, inverse: bool) -> Var {
        let beta = p.get(&format!("{name}.beta")).square().shift(GDN_BETA_MIN);
        let gamma = p.get(&format!("{name}.gamma")).square();
        let norm = x
            .square()
            .conv2d(&gamma, self.config.pointwise())
            .expect("gdn pointwise conv")
            .add_channel_bias(&beta)
            .sqrt();
        if inverse {
            x.mul(&norm)
        } else {
            x.div(&norm)
        }
    }

    fn conv(&self, p: &BoundParams, name: &str, x: &Var, spec: ConvSpec) -> Result<Var> {
        Ok(x
            .conv2d(p.get(&format!("{name}.weight")), spec)?
            .add_channel_bias(p.get(&format!("{name}.bias"))))
    }

    fn conv_up(&self, p: &BoundParams, name: &str, x: &Var) -> Result<Var> {
        let (h, w) = (x.shape()[2] * 2, x.shape()[3] * 2);
        Ok(x
            .conv_transpose2d(p.get(&format!("{name}.weight")), self.config.strided(), (h, w))?
            .add_channel_bias(p.get(&format!("{name}.bias"))))
    }

    /// `g_a`: image to main latent.
    pub fn analysis(&self, p: &BoundParams, x: &Var) -> Result<Var> {
        self.check_input(x.shape())?;
        let mut h = x.shift(-0.5);
        for i in 0..ANALYSIS_LAYERS {
            h = self.conv(p, &format!("g_a.conv{i}"), &h, self.config.strided())?;
            if i + 1 < ANALYSIS_LAYERS {
                h = self.gdn(p, &format!("g_a.gdn{i}"), &h, false);
            }
        }
        Ok(h)
    }

    /// `g_s`: quantized latent to (unclamped) image.
    pub fn synthesis(&self, p: &BoundParams, y_hat: &Var) -> Result<Var> {
        let mut h = y_hat.clone();
        for i in 0..ANALYSIS_LAYERS {
            h = self.conv_up(p, &format!("g_s.conv{i}"), &h)?;
            if i + 1 < ANALYSIS_LAYERS {
                h = self.gdn(p, &format!("g_s.igdn{i}"), &h, true);
            }
        }
        Ok(h.shift(0.5))
    }

    fn hyper_analysis(&self, p: &BoundParams, y: &Var) -> Result<Var> {
        let h = self.conv(p, "h_a.conv0", y, self.config.same3())?.softplus();
        self.conv(p, "h_a.conv1", &h, self.config.strided())
    }

    fn hyper_synthesis(&self, p: &BoundParams, z_hat: &Var) -> Result<Var> {
        let h = self.conv_up(p, "h_s.conv0", z_hat)?.softplus();
        let raw = self.conv(p, "h_s.conv1", &h, self.config.same3())?;
        Ok(raw.softplus().shift(SCALE_FLOOR))
    }

    fn z_scales(&self, p: &BoundParams, shape: &[usize]) -> Var {
        p.get("entropy.z_scale")
            .softplus()
            .shift(SCALE_FLOOR)
            .expand_channels(shape)
    }

    /// Full differentiable pass.
    pub fn forward_graph(
        &self,
        p: &BoundParams,
        x: &Var,
        quantizer: &mut Quantizer,
    ) -> Result<CodecGraph> {
        let y = self.analysis(p, x)?;
        let z = self.hyper_analysis(p, &y)?;
        let z_hat = quantizer.apply(&z);
        let scales = self.hyper_synthesis(p, &z_hat)?;
        let y_hat = quantizer.apply(&y);
        let pixels = x.shape()[2] * x.shape()[3];
        let rate = estimate_rate(&y_hat, &scales, &z_hat, &self.z_scales(p, z_hat.shape()), pixels)?;
        let x_hat = self.synthesis(p, &y_hat)?;
        Ok(CodecGraph {
            x_hat,
            y,
            y_hat,
            z,
            z_hat,
            scales,
            rate,
        })
    }

    /// Inference pass without graph recording.
    pub fn forward(&self, x: &ImageBatch, quantizer: &mut Quantizer) -> Result<CodecOutput> {
        let _guard = no_grad();
        let p = self.params.bind(false);
        let g = self.forward_graph(&p, &Var::constant(x.tensor().clone()), quantizer)?;
        Ok(g.to_output())
    }

    /// Deterministic (rounded) inference pass.
    pub fn forward_eval(&self, x: &ImageBatch) -> Result<CodecOutput> {
        self.forward(x, &mut Quantizer::Round)
    }

    /// Main latent only, without graph recording.
    pub fn analysis_transform(&self, x: &ImageBatch) -> Result<Tensor> {
        let _guard = no_grad();
        let p = self.params.bind(false);
        Ok(self
            .analysis(&p, &Var::constant(x.tensor().clone()))?
            .value()
            .clone())
    }
}
