//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward closures it is checking.
//!
//! Piecewise-linear ops (ReLU, max-pool, `|x|`) make the loss
//! non-differentiable on a measure-zero set. When the `±step` window around
//! an element straddles such a point, the one-sided differences disagree;
//! those elements are re-differenced with `step / 100` and counted in
//! [`InputCheck::kinks`].

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient norms below this are compared in absolute terms.
pub const NORM_FLOOR: f64 = 1e-5;

/// One-sided differences disagreeing by more than this fraction of their
/// magnitude mark a kink inside the differencing window. Smooth curvature
/// only trips this when it is large, and then the finer step is still exact
/// enough.
const KINK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct InputCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_error: f64,
    /// Elements re-differenced with a smaller step because of a kink.
    pub kinks: usize,
}

/// `‖a − n‖₂ / max(‖a‖₂ + ‖n‖₂, NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (norm(analytic) + norm(numeric)).max(NORM_FLOOR)
}

fn straddles_kink(minus: f64, center: f64, plus: f64, step: f64) -> bool {
    let right = (plus - center) / step;
    let left = (center - minus) / step;
    // The floor keeps round-off in near-zero derivatives from reading as a kink.
    (right - left).abs() > KINK_TOLERANCE * (right.abs() + left.abs()).max(1e-4)
}

/// Compares backward-pass gradients of the scalar `f()` against central
/// differences for every element of every tensor in `inputs`. Inputs must be
/// trainable leaves that `f` reads.
pub fn check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<InputCheck>>
where
    F: Fn() -> Result<Tensor>,
{
    for t in inputs {
        t.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs.iter().map(Tensor::grad_or_zeros).collect();
    for t in inputs {
        t.zero_grad();
    }

    let _guard = no_grad();
    let center = f()?.item();
    let mut out = Vec::with_capacity(inputs.len());
    for (t, analytic) in inputs.iter().zip(analytic) {
        let mut numeric = vec![0.0; t.numel()];
        let mut kinks = 0;
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = t.data()[i];
            let eval = |x: f64| -> Result<f64> {
                t.data_mut()[i] = x;
                let v = f()?.item();
                t.data_mut()[i] = orig;
                Ok(v)
            };
            let (plus, minus) = (eval(orig + step)?, eval(orig - step)?);
            *slot = (plus - minus) / (2.0 * step);
            if straddles_kink(minus, center, plus, step) {
                kinks += 1;
                let h = step / 100.0;
                *slot = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
            }
        }
        let rel_error = relative_error(&analytic, &numeric);
        out.push(InputCheck {
            analytic,
            numeric,
            rel_error,
            kinks,
        });
    }
    Ok(out)
}

/// Largest relative error over all inputs.
pub fn max_rel_error<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    Ok(check(f, inputs, DEFAULT_STEP)?
        .iter()
        .map(|c| c.rel_error)
        .fold(0.0, f64::max))
}

/// Outcome of one named check in [`run_suite`].
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }
}

/// Tolerance for single layers and losses.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Tolerance for the whole network.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

/// Finite-difference checks of every layer, every loss, and a toy network
/// (depth 2, base width 2, one 8x8 triplet) trained on the full objective.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    use crate::layers::{
        batchnorm, conv2d, relu, se_block, sigmoid, transposed_conv2d, BatchNormParams, ConvParams, Mode, SEParams,
    };
    use crate::losses::{dice_loss, mae, mse, total_loss, weighted_ce};
    use crate::model::{i2_fusion, EaaNet, I2Params, NetworkConfig};
    use crate::rng::SplitMix64;

    let mut rng = SplitMix64::new(seed);
    let input = |shape: &[usize], rng: &mut SplitMix64| Tensor::rand_uniform(shape, -1.0, 1.0, rng).requires_grad();
    let mut out = Vec::new();
    let mut push = |name, rel_error, tolerance| {
        out.push(SuiteResult {
            name,
            rel_error,
            tolerance,
        })
    };
    // A fixed weighting makes every output element matter to the scalar.
    let probe = |t: &Tensor| -> Result<Tensor> {
        let w: Vec<f64> = (0..t.numel()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        Ok(t.mul(&Tensor::new(t.shape(), w)?)?.sum())
    };

    let x = input(&[2, 3, 6, 6], &mut rng);
    let conv = ConvParams::new(3, 4, 3, &mut rng)?;
    let mut all = vec![x.clone(), conv.weight.clone(), conv.bias.clone()];
    push("conv2d", max_rel_error(|| probe(&conv2d(&x, &conv)?), &all)?, LAYER_TOLERANCE);

    let up = ConvParams::upsample(3, 2, &mut rng);
    all = vec![x.clone(), up.weight.clone(), up.bias.clone()];
    push("transposed_conv2d", max_rel_error(|| probe(&transposed_conv2d(&x, &up)?), &all)?, LAYER_TOLERANCE);

    let bn = BatchNormParams::new(3);
    bn.gamma.data_mut().copy_from_slice(&[1.3, 0.7, -0.4]);
    bn.beta.data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
    all = vec![x.clone(), bn.gamma.clone(), bn.beta.clone()];
    // The probe is not annihilated by the per-channel mean subtraction.
    push("batchnorm_train", max_rel_error(|| probe(&batchnorm(&x, &bn, Mode::Train)?), &all)?, LAYER_TOLERANCE);
    push("batchnorm_eval", max_rel_error(|| probe(&batchnorm(&x, &bn, Mode::Eval)?), &all)?, LAYER_TOLERANCE);

    push("relu", max_rel_error(|| probe(&relu(&x)), std::slice::from_ref(&x))?, LAYER_TOLERANCE);
    push("sigmoid", max_rel_error(|| probe(&sigmoid(&x)), std::slice::from_ref(&x))?, LAYER_TOLERANCE);
    push("max_pool2x2", max_rel_error(|| probe(&x.max_pool2x2()?), std::slice::from_ref(&x))?, LAYER_TOLERANCE);

    let xs = input(&[2, 4, 4, 4], &mut rng);
    let se = SEParams::new(4, 2, &mut rng)?;
    all = vec![xs.clone(), se.reduce_weight.clone(), se.expand_weight.clone()];
    push("se_block", max_rel_error(|| probe(&se_block(&xs, &se)?), &all)?, LAYER_TOLERANCE);

    let x_bd = input(&[2, 4, 4, 4], &mut rng);
    let x_rd = input(&[2, 2, 4, 4], &mut rng);
    let i2 = I2Params::new(4, 2, &mut rng)?;
    all = vec![x_bd.clone(), x_rd.clone(), i2.weight.weight.clone(), i2.weight.bias.clone()];
    if let Some(m) = &i2.channel_match {
        all.push(m.weight.clone());
        all.push(m.bias.clone());
    }
    push(
        "i2_fusion",
        max_rel_error(|| probe(&i2_fusion(&x_bd, &x_rd, &i2, Mode::Train)?), &all)?,
        LAYER_TOLERANCE,
    );

    let scores = input(&[2, 3, 4, 4], &mut rng);
    let mut onehot = vec![0.0; scores.numel()];
    for b in 0..2 {
        for i in 0..16 {
            onehot[(b * 3 + rng.below(3)) * 16 + i] = 1.0;
        }
    }
    let target = Tensor::new(&[2, 3, 4, 4], onehot)?;
    let s = [scores.clone()];
    push("cross_entropy", max_rel_error(|| weighted_ce(&scores, &target), &s)?, LAYER_TOLERANCE);
    push("dice", max_rel_error(|| dice_loss(&scores, &target), &s)?, LAYER_TOLERANCE);
    let img = Tensor::rand_uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut rng);
    let pred = input(&[2, 1, 4, 4], &mut rng);
    let p = [pred.clone()];
    push("mae", max_rel_error(|| mae(&pred, &img), &p)?, LAYER_TOLERANCE);
    push("mse", max_rel_error(|| mse(&pred, &img), &p)?, LAYER_TOLERANCE);

    let cfg = NetworkConfig {
        depth: 2,
        base_channels: 2,
        height: 8,
        width: 8,
        ..NetworkConfig::default()
    };
    let net = EaaNet::new(cfg, seed)?;
    let image = |rng: &mut SplitMix64| Tensor::rand_uniform(&[1, 1, 8, 8], 0.0, 1.0, rng);
    let (prev, curr, next) = (image(&mut rng), image(&mut rng), image(&mut rng));
    let mut label = vec![0.0; 2 * 64];
    for i in 0..64 {
        label[rng.below(2) * 64 + i] = 1.0;
    }
    let label = Tensor::new(&[1, 2, 8, 8], label)?;
    let network = || {
        let out = net.forward(&prev, &curr, &next, Mode::Train)?;
        Ok(total_loss(&out, &curr, &label)?.total)
    };
    push("network", max_rel_error(network, &net.params())?, NETWORK_TOLERANCE);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[3.0]) - 0.5).abs() < 1e-15);
        // both tiny: absolute comparison against the floor
        assert!(relative_error(&[1e-12], &[3e-11]) < 1e-5);
    }

    #[test]
    fn kink_detection() {
        // |x| near 0 with the window straddling the kink
        assert!(straddles_kink(1e-5, 2e-6, 1e-5 + 4e-6, 1e-5));
        // smooth quadratic x² at x = 1
        let f = |x: f64| x * x;
        assert!(!straddles_kink(f(1.0 - 1e-5), f(1.0), f(1.0 + 1e-5), 1e-5));
    }

    #[test]
    fn detects_wrong_gradient() {
        // d/dx of x·x·x computed with a deliberately broken "square" chain:
        // use the implementation on x² but compare to f = x³.
        let x = Tensor::new(&[2], vec![0.7, -1.3]).unwrap().requires_grad();
        let cube = || x.square().mul(&x).map(|t| t.sum());
        assert!(max_rel_error(cube, std::slice::from_ref(&x)).unwrap() < 1e-8);
        let checks = check(cube, std::slice::from_ref(&x), DEFAULT_STEP).unwrap();
        let wrong: Vec<f64> = checks[0].analytic.iter().map(|g| g * 1.01).collect();
        assert!(relative_error(&wrong, &checks[0].numeric) > 1e-3);
    }

    #[test]
    fn resolves_kinks_with_smaller_step() {
        let x = Tensor::new(&[1], vec![3e-6]).unwrap().requires_grad();
        let c = check(|| Ok(x.abs().sum()), std::slice::from_ref(&x), DEFAULT_STEP).unwrap();
        assert_eq!(c[0].kinks, 1);
        assert!(c[0].rel_error < 1e-9);
    }

    #[test]
    fn suite_passes() {
        for r in run_suite(1).unwrap() {
            assert!(r.passed(), "{}: {}", r.name, r.rel_error);
        }
    }
}
