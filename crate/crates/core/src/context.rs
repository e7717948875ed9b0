//! Global context block: attention-pooled global feature, bottleneck
//! transform with layer norm and ReLU, and a residual broadcast addition
//! of the resulting context vector onto every position.
//!
//! The block is forward-only here; its parameters are supplied (typically
//! seeded) rather than trained. All per-position reductions go through
//! [`canonical_sum`], so permuting the positions of the input permutes the
//! output exactly, with no floating-point drift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{canonical_sum, layer_norm, matvec, relu, Tensor};

/// Layer-norm epsilon used inside the bottleneck transform.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Default bottleneck ratio.
pub const DEFAULT_BOTTLENECK_RATIO: usize = 4;

/// Parameters of one global context block over `C` channels with bottleneck
/// ratio `r` (the bottleneck width is `C / r`).
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalContextParams {
    /// 1x1 attention projection, length `C`.
    theta_k: Vec<f64>,
    /// Bottleneck down-projection, `C/r x C`.
    theta_1: Tensor,
    /// Bottleneck up-projection, `C x C/r`.
    theta_2: Tensor,
    ln_gain: Vec<f64>,
    ln_bias: Vec<f64>,
    ratio: usize,
}

impl GlobalContextParams {
    pub fn new(
        theta_k: Vec<f64>,
        theta_1: Tensor,
        theta_2: Tensor,
        ln_gain: Vec<f64>,
        ln_bias: Vec<f64>,
        ratio: usize,
    ) -> Result<Self> {
        let channels = theta_k.len();
        if channels == 0 {
            return Err(Error::invalid("context block needs at least one channel"));
        }
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::invalid(format!(
                "channel count {channels} must be divisible by bottleneck ratio {ratio}"
            )));
        }
        let bottleneck = channels / ratio;
        if theta_1.rank() != 2 || theta_1.rows() != bottleneck || theta_1.cols() != channels {
            return Err(Error::invalid(format!(
                "theta_1 must be {bottleneck}x{channels}"
            )));
        }
        if theta_2.rank() != 2 || theta_2.rows() != channels || theta_2.cols() != bottleneck {
            return Err(Error::invalid(format!(
                "theta_2 must be {channels}x{bottleneck}"
            )));
        }
        if ln_gain.len() != bottleneck || ln_bias.len() != bottleneck {
            return Err(Error::invalid(format!(
                "layer-norm parameters must have length {bottleneck}"
            )));
        }
        if !theta_k.iter().all(|v| v.is_finite())
            || !ln_gain.iter().all(|v| v.is_finite())
            || !ln_bias.iter().all(|v| v.is_finite())
        {
            return Err(Error::invalid("context block parameters must be finite"));
        }
        Ok(GlobalContextParams {
            theta_k,
            theta_1,
            theta_2,
            ln_gain,
            ln_bias,
            ratio,
        })
    }

    /// Deterministic seeded parameters, uniform in [-0.1, 0.1], with
    /// layer-norm gain 1 and bias 0.
    pub fn seeded(channels: usize, ratio: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bottleneck = if ratio > 0 && channels % ratio == 0 {
            channels / ratio
        } else {
            return Err(Error::invalid(format!(
                "channel count {channels} must be divisible by bottleneck ratio {ratio}"
            )));
        };
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-0.1..=0.1)).collect()
        };
        let theta_k = draw(channels);
        let theta_1 = Tensor::new(vec![bottleneck, channels], draw(bottleneck * channels))?;
        let theta_2 = Tensor::new(vec![channels, bottleneck], draw(channels * bottleneck))?;
        GlobalContextParams::new(
            theta_k,
            theta_1,
            theta_2,
            vec![1.0; bottleneck],
            vec![0.0; bottleneck],
            ratio,
        )
    }

    /// Same block with the up-projection zeroed, turning the block into the
    /// identity map.
    pub fn with_zero_theta_2(&self) -> Self {
        let mut p = self.clone();
        p.theta_2 = Tensor::zeros(vec![self.channels(), self.bottleneck()]).expect("valid shape");
        p
    }

    pub fn channels(&self) -> usize {
        self.theta_k.len()
    }

    pub fn bottleneck(&self) -> usize {
        self.channels() / self.ratio
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn theta_k(&self) -> &[f64] {
        &self.theta_k
    }
}

/// Interprets a feature tensor as `C x N` where `N` is the product of all
/// trailing dimensions (`C x H x W` flattens to `C x (H*W)`).
fn channels_and_positions(x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::invalid(
            "feature tensor must have a channel dimension plus at least one position dimension",
        ));
    }
    let channels = x.shape()[0];
    let positions: usize = x.shape()[1..].iter().product();
    Ok((channels, positions))
}

/// Attention weights over the positions of a `C x ...` feature tensor:
/// a softmax over the per-position logits `theta_k . X_j`.
///
/// The returned weights sum to 1 within 1e-12 and permute exactly with the
/// positions of the input.
pub fn attention_weights(x: &Tensor, theta_k: &[f64]) -> Result<Vec<f64>> {
    let (channels, positions) = channels_and_positions(x)?;
    if theta_k.len() != channels {
        return Err(Error::invalid(format!(
            "attention projection has length {}, feature tensor has {} channels",
            theta_k.len(),
            channels
        )));
    }
    let data = x.data();
    let logits: Vec<f64> = (0..positions)
        .map(|j| {
            (0..channels)
                .map(|c| theta_k[c] * data[c * positions + j])
                .sum()
        })
        .collect();
    // max is an exact, order-independent reduction; the denominator uses the
    // canonical sum so that position permutations commute exactly
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let denom = canonical_sum(&exps);
    Ok(exps.into_iter().map(|e| e / denom).collect())
}

/// Forward pass of the global context block.
///
/// `context = sum_j alpha_j X_j` is pooled over positions, pushed through the
/// bottleneck (`theta_2 ReLU(LN(theta_1 context))`), and the resulting delta
/// is added to every position: `Z_i = X_i + delta`.
pub fn global_context_forward(x: &Tensor, params: &GlobalContextParams) -> Result<Tensor> {
    let (channels, positions) = channels_and_positions(x)?;
    if channels != params.channels() {
        return Err(Error::invalid(format!(
            "feature tensor has {} channels, block expects {}",
            channels,
            params.channels()
        )));
    }
    let alpha = attention_weights(x, &params.theta_k)?;
    let data = x.data();

    let mut pooled = Vec::with_capacity(channels);
    let mut weighted = vec![0.0; positions];
    for c in 0..channels {
        for j in 0..positions {
            weighted[j] = alpha[j] * data[c * positions + j];
        }
        pooled.push(canonical_sum(&weighted));
    }

    let squeezed = matvec(&params.theta_1, &pooled)?;
    let normed = layer_norm(&squeezed, &params.ln_gain, &params.ln_bias, LAYER_NORM_EPS)?;
    let delta = matvec(&params.theta_2, &relu(&normed))?;

    let mut out = data.to_vec();
    for c in 0..channels {
        for j in 0..positions {
            out[c * positions + j] += delta[c];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_feature(channels: usize, positions: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * positions)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        Tensor::new(vec![channels, positions], data).unwrap()
    }

    #[test]
    fn uniform_weights_for_zero_projection() {
        let x = random_feature(4, 6, 1);
        let alpha = attention_weights(&x, &[0.0; 4]).unwrap();
        for a in &alpha {
            assert!((a - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_position_gets_full_weight() {
        let x = Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(attention_weights(&x, &[0.3, 0.1, -0.4]).unwrap(), vec![1.0]);
    }

    #[test]
    fn scaling_the_projection_sharpens_toward_argmax() {
        let x = random_feature(4, 8, 7);
        let theta: Vec<f64> = (0..4).map(|i| 0.2 + 0.1 * i as f64).collect();
        let base = attention_weights(&x, &theta).unwrap();
        let argmax = base
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let sharp_theta: Vec<f64> = theta.iter().map(|v| v * 50.0).collect();
        let sharp = attention_weights(&x, &sharp_theta).unwrap();
        assert!(sharp[argmax] > 0.999, "expected near-argmax weight, got {}", sharp[argmax]);
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let x = random_feature(8, 5, 3);
        let params = GlobalContextParams::seeded(8, 4, 11).unwrap().with_zero_theta_2();
        let z = global_context_forward(&x, &params).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn single_position_context_is_that_position() {
        let x = Tensor::new(vec![4, 1], vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        let params = GlobalContextParams::seeded(4, 2, 5).unwrap();
        let alpha = attention_weights(&x, params.theta_k()).unwrap();
        assert_eq!(alpha, vec![1.0]);
        let z = global_context_forward(&x, &params).unwrap();
        // Z_1 = X_1 + delta(X_1); delta must be a single consistent vector
        let delta: Vec<f64> = z
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| a - b)
            .collect();
        assert_eq!(delta.len(), 4);
    }

    #[test]
    fn delta_is_position_constant() {
        let x = random_feature(8, 12, 21);
        let params = GlobalContextParams::seeded(8, 4, 22).unwrap();
        let z = global_context_forward(&x, &params).unwrap();
        let positions = 12;
        for c in 0..8 {
            let d0 = z.data()[c * positions] - x.data()[c * positions];
            for j in 1..positions {
                let dj = z.data()[c * positions + j] - x.data()[c * positions + j];
                assert!((dj - d0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn accepts_three_dimensional_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..4 * 3 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![4, 3, 2], data).unwrap();
        let params = GlobalContextParams::seeded(4, 2, 10).unwrap();
        let z = global_context_forward(&x, &params).unwrap();
        assert_eq!(z.shape(), &[4, 3, 2]);
    }

    #[test]
    fn permuting_positions_permutes_output_exactly() {
        let channels = 6;
        let positions = 10;
        let x = random_feature(channels, positions, 33);
        let params = GlobalContextParams::seeded(channels, 2, 34).unwrap();
        let z = global_context_forward(&x, &params).unwrap();

        // reverse the position order
        let mut permuted = vec![0.0; channels * positions];
        for c in 0..channels {
            for j in 0..positions {
                permuted[c * positions + j] = x.data()[c * positions + (positions - 1 - j)];
            }
        }
        let xp = Tensor::new(vec![channels, positions], permuted).unwrap();
        let zp = global_context_forward(&xp, &params).unwrap();
        for c in 0..channels {
            for j in 0..positions {
                let expected = z.data()[c * positions + (positions - 1 - j)];
                assert_eq!(zp.data()[c * positions + j], expected);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x = random_feature(6, 4, 2);
        let params = GlobalContextParams::seeded(8, 4, 2).unwrap();
        assert!(global_context_forward(&x, &params).is_err());
        assert!(attention_weights(&x, &[0.0; 8]).is_err());
    }

    #[test]
    fn jacobian_probe_agrees_with_directional_derivative() {
        use crate::numerics::finite_diff_grad;
        let channels = 4;
        let positions = 3;
        let x = random_feature(channels, positions, 55);
        let params = GlobalContextParams::seeded(channels, 2, 56).unwrap();
        let shape = x.shape().to_vec();
        let g = |flat: &[f64]| -> f64 {
            let t = Tensor::new(shape.clone(), flat.to_vec()).unwrap();
            global_context_forward(&t, &params).unwrap().data().iter().sum()
        };

        let grad = finite_diff_grad(&g, x.data(), 1e-6).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let dir: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = 1e-6;
        let plus: Vec<f64> = x.data().iter().zip(&dir).map(|(v, d)| v + h * d).collect();
        let minus: Vec<f64> = x.data().iter().zip(&dir).map(|(v, d)| v - h * d).collect();
        let directional = (g(&plus) - g(&minus)) / (2.0 * h);
        let from_grad: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let rel = (directional - from_grad).abs() / directional.abs().max(1e-8);
        assert!(rel < 1e-4, "relative error {rel}");
    }
}
