//! Quantization relaxation and rate estimation.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rn_autodiff::{Tensor, Var};

use crate::{Error, Result};

/// Lower bound applied to every per-element likelihood before the log.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Lower bound of every Gaussian scale parameter.
pub const SCALE_FLOOR: f64 = 0.11;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive uniform noise in `[-0.5, 0.5)`.
    Train,
    /// Round to nearest, straight-through gradient.
    Eval,
    /// No quantization at all (the relaxed path at zero noise).
    Passthrough,
}

/// Quantizer with its own noise source.
#[derive(Clone, Debug)]
pub enum Quantizer {
    Noise(ChaCha8Rng),
    Round,
    Passthrough,
}

impl Quantizer {
    pub fn noise(seed: u64) -> Self {
        Quantizer::Noise(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn mode(&self) -> QuantMode {
        match self {
            Quantizer::Noise(_) => QuantMode::Train,
            Quantizer::Round => QuantMode::Eval,
            Quantizer::Passthrough => QuantMode::Passthrough,
        }
    }

    pub fn apply(&mut self, y: &Var) -> Var {
        match self {
            Quantizer::Noise(rng) => {
                let noise = Tensor::from_fn(y.shape(), |_| rng.random_range(-0.5..0.5));
                y.add_const(&noise)
            }
            Quantizer::Round => y.round_ste(),
            Quantizer::Passthrough => y.clone(),
        }
    }
}

/// Per-element probability mass of the integer bin around each value under
/// a zero-mean Gaussian with the given scales, floored at [`LIKELIHOOD_FLOOR`].
pub fn gaussian_likelihood(values: &Var, scales: &Var) -> Var {
    // Evaluate in the lower tail: the density is symmetric, and
    // Phi((0.5 - |v|)/s) - Phi((-0.5 - |v|)/s) avoids cancellation near 1.
    let v = values.abs();
    let upper = v.neg().shift(0.5).div(scales).normal_cdf();
    let lower = v.neg().shift(-0.5).div(scales).normal_cdf();
    upper.sub(&lower).clamp_min(LIKELIHOOD_FLOOR)
}

/// Bit costs of the main and side latents, as graph values.
#[derive(Clone, Debug)]
pub struct RateVars {
    /// Per-image bits spent on the main latent, `[B]`.
    pub bits_main: Var,
    /// Per-image bits spent on the hyper latent, `[B]`.
    pub bits_side: Var,
    pub bpp_main: Var,
    pub bpp_side: Var,
    pub bpp_total: Var,
    pub pixels_per_image: usize,
}

impl RateVars {
    /// Per-image total bits per pixel, `[B]`.
    pub fn bpp_per_image(&self) -> Var {
        self.bits_main
            .add(&self.bits_side)
            .scale(1.0 / self.pixels_per_image as f64)
    }

    pub fn report(&self) -> RateReport {
        let bpp_main = self.bpp_main.item();
        let bpp_side = self.bpp_side.item();
        RateReport {
            bpp_main,
            bpp_side,
            bpp_total: self.bpp_total.item(),
        }
    }
}

/// Estimated bits per pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateReport {
    pub bpp_main: f64,
    pub bpp_side: f64,
    pub bpp_total: f64,
}

fn bits(likelihood: &Var) -> Var {
    likelihood.ln().scale(-1.0 / LN_2).sum_batch()
}

/// Turns per-element likelihoods into a rate. `pixels_per_image` is the
/// pixel count (`H * W`) of the original image, not of the latent.
pub fn rate_from_likelihoods(
    y_likelihood: &Var,
    z_likelihood: &Var,
    pixels_per_image: usize,
) -> Result<RateVars> {
    for (name, lik) in [("main", y_likelihood), ("side", z_likelihood)] {
        if let Some(bad) = lik
            .value()
            .data()
            .iter()
            .find(|p| !p.is_finite() || **p < LIKELIHOOD_FLOOR || **p > 1.0 + 1e-12)
        {
            return Err(Error::NonFinite(format!(
                "{name} likelihood {bad} outside [{LIKELIHOOD_FLOOR}, 1]"
            )));
        }
    }
    let batch = y_likelihood.shape()[0];
    let pixels = (batch * pixels_per_image) as f64;
    let bits_main = bits(y_likelihood);
    let bits_side = bits(z_likelihood);
    let bpp_main = bits_main.sum().scale(1.0 / pixels);
    let bpp_side = bits_side.sum().scale(1.0 / pixels);
    let bpp_total = bpp_main.add(&bpp_side);
    Ok(RateVars {
        bits_main,
        bits_side,
        bpp_main,
        bpp_side,
        bpp_total,
        pixels_per_image,
    })
}

/// Rate of quantized latents under Gaussian conditionals.
pub fn estimate_rate(
    y_hat: &Var,
    y_scales: &Var,
    z_hat: &Var,
    z_scales: &Var,
    pixels_per_image: usize,
) -> Result<RateVars> {
    let y_lik = gaussian_likelihood(y_hat, y_scales);
    let z_lik = gaussian_likelihood(z_hat, z_scales);
    rate_from_likelihoods(&y_lik, &z_lik, pixels_per_image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};
    use std::collections::HashMap;

    fn constant(shape: &[usize], v: f64) -> Var {
        Var::constant(Tensor::full(shape, v))
    }

    #[test]
    fn eval_rounds_to_nearest() {
        let y = Var::constant(Tensor::new(&[2], vec![0.4, -1.6]).unwrap());
        let out = Quantizer::Round.apply(&y);
        assert_eq!(out.value().data(), &[0.0, -2.0]);
    }

    #[test]
    fn train_noise_is_zero_mean() {
        let y = constant(&[1_000_000], 0.0);
        let out = Quantizer::noise(7).apply(&y);
        let data = out.value().data();
        assert!(data.iter().all(|v| (-0.5..0.5).contains(v)));
        // std of the mean = (1/sqrt(12)) / 1e3 ~ 2.9e-4
        assert!(out.value().mean().abs() < 0.002);
    }

    #[test]
    fn train_noise_keeps_gradient() {
        let y = Var::param(Tensor::zeros(&[4]));
        let out = Quantizer::noise(1).apply(&y).sum();
        let g = rn_autodiff::grad(&out, &[&y], false).unwrap();
        assert_eq!(g[0].value().data(), &[1.0; 4]);
    }

    #[test]
    fn certain_symbols_cost_nothing() {
        let ones = constant(&[1, 4, 2, 2], 1.0);
        let r = rate_from_likelihoods(&ones, &constant(&[1, 2, 1, 1], 1.0), 64 * 64).unwrap();
        assert_eq!(r.report(), RateReport { bpp_main: 0.0, bpp_side: 0.0, bpp_total: 0.0 });
    }

    #[test]
    fn single_bit_symbol() {
        let mut lik = Tensor::ones(&[1, 4, 4, 4]);
        lik.data_mut()[5] = 0.5;
        let r = rate_from_likelihoods(&Var::constant(lik), &constant(&[1, 1, 1, 1], 1.0), 64 * 64)
            .unwrap();
        assert!((r.report().bpp_main - 1.0 / 4096.0).abs() < 1e-15);
        assert_eq!(r.report().bpp_side, 0.0);
    }

    #[test]
    fn rejects_non_finite_likelihood() {
        let bad = constant(&[1, 1, 1, 1], f64::NAN);
        let ok = constant(&[1, 1, 1, 1], 1.0);
        assert!(matches!(
            rate_from_likelihoods(&bad, &ok, 16),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn likelihood_floor_applies() {
        let far = constant(&[1, 1, 1, 1], 1e3);
        let lik = gaussian_likelihood(&far, &constant(&[1, 1, 1, 1], SCALE_FLOOR));
        assert_eq!(lik.item(), LIKELIHOOD_FLOOR);
    }

    #[test]
    fn likelihoods_of_all_bins_sum_to_one() {
        let values = Var::constant(Tensor::from_fn(&[1, 1, 1, 81], |i| i as f64 - 40.0));
        let lik = gaussian_likelihood(&values, &constant(&[1, 1, 1, 81], 3.0));
        // far-tail bins sit at the floor, adding ~1e-9 each
        assert!((lik.value().sum() - 1.0).abs() < 1e-6);
    }

    /// Rate of N(0, 2) samples under the matching model vs the Monte-Carlo
    /// discrete entropy of the rounded samples.
    #[test]
    fn gaussian_rate_matches_monte_carlo_entropy() {
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 2.0).unwrap();
        let samples: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();

        let mut counts: HashMap<i64, usize> = HashMap::new();
        for s in &samples {
            *counts.entry(s.round() as i64).or_default() += 1;
        }
        let entropy: f64 = counts
            .values()
            .map(|&c| {
                let p = c as f64 / n as f64;
                -p * p.log2()
            })
            .sum();

        let y = Var::constant(Tensor::new(&[1, 1, 1, n], samples).unwrap());
        let y_hat = Quantizer::Round.apply(&y);
        let rate = estimate_rate(
            &y_hat,
            &constant(&[1, 1, 1, n], 2.0),
            &constant(&[1, 1, 1, 1], 0.0),
            &constant(&[1, 1, 1, 1], 1.0),
            n,
        )
        .unwrap();
        let bpp = rate.report().bpp_main;
        assert!(((bpp - entropy) / entropy).abs() < 0.02, "{bpp} vs {entropy}");
    }

    #[test]
    fn eval_rate_on_integers_matches_passthrough() {
        let y = Var::constant(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, -2.0, 3.0]).unwrap());
        let s = constant(&[1, 1, 2, 2], 0.8);
        let z = constant(&[1, 1, 1, 1], 1.0);
        let zs = constant(&[1, 1, 1, 1], 0.5);
        let eval = estimate_rate(&Quantizer::Round.apply(&y), &s, &z, &zs, 16).unwrap();
        let pass = estimate_rate(&Quantizer::Passthrough.apply(&y), &s, &z, &zs, 16).unwrap();
        assert_eq!(eval.report(), pass.report());
    }
}
