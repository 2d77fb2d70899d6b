//! The multi-task objective: MAE + MSE on the reconstruction, and
//! `0.4·CE + Dice` on each segmentation head.

use crate::error::{Error, Result};
use crate::model::EAAOutputs;
use crate::tensor::Tensor;

/// Weight on the cross-entropy term of each segmentation loss.
pub const CE_WEIGHT: f64 = 0.4;
/// Clamp inside `ln` for cross-entropy.
pub const CE_EPSILON: f64 = 1e-12;
/// Smoothing in the soft Dice ratio.
pub const DICE_EPSILON: f64 = 1e-6;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute error over all elements.
pub fn mae(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "mae")?;
    Ok(pred.sub(target)?.abs().mean())
}

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "mse")?;
    Ok(pred.sub(target)?.square().mean())
}

/// Checks `[N, K, H, W]` agreement and that every pixel's target sums to 1.
fn check_one_hot(scores: &Tensor, target: &Tensor) -> Result<()> {
    let (s, t) = (scores.shape(), target.shape());
    if s.len() != 4 || t.len() != 4 {
        return Err(Error::Shape(format!("scores {s:?} and target {t:?} must be 4-D")));
    }
    if s[1] != t[1] {
        return Err(Error::Shape(format!("class count mismatch: scores {} vs target {}", s[1], t[1])));
    }
    same_shape(scores, target, "segmentation target")?;
    let (n, k, hw) = (t[0], t[1], t[2] * t[3]);
    let d = target.data();
    for b in 0..n {
        for i in 0..hw {
            let row = (0..k).map(|c| d[(b * k + c) * hw + i]);
            let (mut sum, mut ok) = (0.0, true);
            for v in row {
                ok &= (0.0..=1.0).contains(&v);
                sum += v;
            }
            if !ok || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "target pixel {i} of sample {b} is not one-hot (sum {sum})"
                )));
            }
        }
    }
    Ok(())
}

/// Unweighted cross-entropy of softmax(`scores`) against a one-hot target,
/// averaged over pixels.
pub fn weighted_ce(scores: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_one_hot(scores, target)?;
    let s = scores.shape();
    let pixels = (s[0] * s[2] * s[3]) as f64;
    let logp = scores.softmax(1)?.ln_clamped(CE_EPSILON);
    Ok(logp.mul(target)?.sum().scale(-1.0 / pixels))
}

/// Soft Dice on probabilities: `K − Σ_k (2·Σ p·t + ε) / (Σ p + Σ t + ε)`,
/// sums running over batch and pixels per class.
pub fn soft_dice(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(probs, target, "dice")?;
    let k = probs.shape()[1] as f64;
    let axes: &[usize] = &[0, 2, 3];
    let inter = probs.mul(target)?.sum_axes(axes)?;
    let denom = probs.sum_axes(axes)?.add(&target.sum_axes(axes)?)?;
    let ratio = inter.scale(2.0).add_scalar(DICE_EPSILON).div(&denom.add_scalar(DICE_EPSILON))?;
    Ok(ratio.sum().neg().add_scalar(k))
}

pub fn dice_loss(scores: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_one_hot(scores, target)?;
    soft_dice(&scores.softmax(1)?, target)
}

/// `0.4·CE + Dice`, shared by both segmentation heads.
pub fn seg_loss(scores: &Tensor, target: &Tensor) -> Result<Tensor> {
    weighted_ce(scores, target)?.scale(CE_WEIGHT).add(&dice_loss(scores, target)?)
}

#[derive(Debug, Clone)]
pub struct LossBundle {
    pub loss_a: Tensor,
    pub loss_s: Tensor,
    pub loss_b: Tensor,
    pub loss_c: Tensor,
    pub total: Tensor,
}

/// Plain-number snapshot of a [`LossBundle`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub loss_a: f64,
    pub loss_s: f64,
    pub loss_b: f64,
    pub loss_c: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn values(&self) -> LossValues {
        LossValues {
            loss_a: self.loss_a.item(),
            loss_s: self.loss_s.item(),
            loss_b: self.loss_b.item(),
            loss_c: self.loss_c.item(),
            total: self.total.item(),
        }
    }
}

impl LossValues {
    /// First non-finite term, by name.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("loss_a", self.loss_a),
            ("loss_s", self.loss_s),
            ("loss_b", self.loss_b),
            ("loss_c", self.loss_c),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Total objective: reconstruction of `x_curr` plus both segmentation losses.
pub fn total_loss(out: &EAAOutputs, x_curr: &Tensor, label: &Tensor) -> Result<LossBundle> {
    let loss_a = mae(&out.recon, x_curr)?;
    let loss_s = mse(&out.recon, x_curr)?;
    let loss_b = seg_loss(&out.seg_basic, label)?;
    let loss_c = seg_loss(&out.seg_complete, label)?;
    let total = loss_a.add(&loss_s)?.add(&loss_b)?.add(&loss_c)?;
    Ok(LossBundle {
        loss_a,
        loss_s,
        loss_b,
        loss_c,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_rel_error;
    use crate::rng::SplitMix64;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    fn random_one_hot(n: usize, k: usize, hw: usize, rng: &mut SplitMix64) -> Tensor {
        let mut d = vec![0.0; n * k * hw * hw];
        for b in 0..n {
            for i in 0..hw * hw {
                let c = rng.below(k);
                d[(b * k + c) * hw * hw + i] = 1.0;
            }
        }
        t(&[n, k, hw, hw], &d)
    }

    /// Scores that put `margin` on the labelled class.
    fn confident(target: &Tensor, margin: f64) -> Tensor {
        target.scale(margin).detach()
    }

    #[test]
    fn mae_examples() {
        let a = t(&[2], &[1.0, 3.0]);
        let b = t(&[2], &[0.0, 1.0]);
        assert_eq!(mae(&a, &a).unwrap().item(), 0.0);
        assert_eq!(mae(&a, &b).unwrap().item(), 1.5);
        assert_eq!(mae(&a, &b).unwrap().item(), mae(&b, &a).unwrap().item());
        assert!(mae(&a, &t(&[3], &[0.0; 3])).is_err());
    }

    #[test]
    fn mse_examples() {
        let a = t(&[2], &[1.0, 3.0]);
        let b = t(&[2], &[0.0, 1.0]);
        assert_eq!(mse(&a, &a).unwrap().item(), 0.0);
        assert_eq!(mse(&a, &b).unwrap().item(), 2.5);
        let mut r = SplitMix64::new(1);
        for _ in 0..20 {
            let x = Tensor::rand_uniform(&[3, 4], -2.0, 2.0, &mut r);
            let y = Tensor::rand_uniform(&[3, 4], -2.0, 2.0, &mut r);
            assert!(mse(&x, &y).unwrap().item() >= 0.0);
        }
    }

    #[test]
    fn ce_examples() {
        let target = t(&[1, 2, 1, 1], &[1.0, 0.0]);
        let uniform = Tensor::zeros(&[1, 2, 1, 1]);
        assert!((weighted_ce(&uniform, &target).unwrap().item() - 2f64.ln()).abs() < 1e-12);
        let sharp = weighted_ce(&confident(&target, 60.0), &target).unwrap().item();
        assert!(sharp < 1e-20);
        let s = t(&[1, 2, 1, 1], &[2.0, 0.0]);
        let expected = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((weighted_ce(&s, &target).unwrap().item() - expected).abs() < 1e-12);
        assert!((expected - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn ce_of_uniform_scores_is_ln_k() {
        let mut r = SplitMix64::new(4);
        for k in 2..6 {
            let target = random_one_hot(2, k, 3, &mut r);
            let scores = Tensor::full(target.shape(), 0.37);
            let ce = weighted_ce(&scores, &target).unwrap().item();
            assert!((ce - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn target_validation() {
        let scores = Tensor::zeros(&[1, 2, 1, 2]);
        let bad = t(&[1, 2, 1, 2], &[1.0, 1.0, 0.0, 1.0]);
        assert!(matches!(weighted_ce(&scores, &bad), Err(Error::Validation(_))));
        assert!(matches!(dice_loss(&scores, &bad), Err(Error::Validation(_))));
        let three = Tensor::zeros(&[1, 3, 1, 2]);
        assert!(matches!(weighted_ce(&three, &t(&[1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let mut r = SplitMix64::new(5);
        let target = random_one_hot(2, 2, 4, &mut r);
        assert!(soft_dice(&target, &target).unwrap().item() < 1e-9);
        assert!(dice_loss(&confident(&target, 60.0), &target).unwrap().item() < 1e-5);

        // class 1 predicted where it is absent and vice versa
        let target = t(&[1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        let probs = t(&[1, 2, 1, 2], &[0.0, 1.0, 1.0, 0.0]);
        let loss = soft_dice(&probs, &target).unwrap().item();
        assert!((loss - 2.0).abs() < 1e-5);
    }

    /// Brute-force set overlap per class with the same smoothing constant.
    fn dice_oracle(probs: &[f64], target: &[f64], n: usize, k: usize, hw: usize) -> f64 {
        let mut loss = k as f64;
        for c in 0..k {
            let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
            for b in 0..n {
                for i in 0..hw {
                    let idx = (b * k + c) * hw + i;
                    inter += probs[idx] * target[idx];
                    ps += probs[idx];
                    ts += target[idx];
                }
            }
            loss -= (2.0 * inter + DICE_EPSILON) / (ps + ts + DICE_EPSILON);
        }
        loss
    }

    #[test]
    fn dice_matches_overlap_oracle() {
        // background first, foreground second
        let probs = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let target = [0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let got = soft_dice(&t(&[1, 2, 2, 2], &probs), &t(&[1, 2, 2, 2], &target)).unwrap().item();
        let want = dice_oracle(&probs, &target, 1, 2, 4);
        assert!((got - want).abs() < 1e-9);
        // dice_fg = 2/3, dice_bg = 4/5 up to smoothing
        assert!((want - (2.0 - 2.0 / 3.0 - 0.8)).abs() < 1e-6);

        let mut r = SplitMix64::new(6);
        for _ in 0..50 {
            let target = random_one_hot(2, 3, 3, &mut r);
            let probs = Tensor::rand_uniform(&[2, 3, 3, 3], -2.0, 2.0, &mut r).softmax(1).unwrap();
            let got = soft_dice(&probs, &target).unwrap().item();
            let want = dice_oracle(&probs.data(), &target.data(), 2, 3, 9);
            assert!((got - want).abs() < 1e-9);
            assert!((0.0..=3.0).contains(&got));
        }
    }

    #[test]
    fn seg_loss_is_weighted_sum() {
        let mut r = SplitMix64::new(7);
        for _ in 0..20 {
            let target = random_one_hot(2, 2, 4, &mut r);
            let scores = Tensor::rand_uniform(&[2, 2, 4, 4], -3.0, 3.0, &mut r);
            let total = seg_loss(&scores, &target).unwrap().item();
            let ce = weighted_ce(&scores, &target).unwrap().item();
            let dice = dice_loss(&scores, &target).unwrap().item();
            assert!((total - (0.4 * ce + dice)).abs() < 1e-12);
            assert!(total >= 0.0);
        }
        let target = random_one_hot(1, 2, 4, &mut r);
        assert!(seg_loss(&confident(&target, 60.0), &target).unwrap().item() < 1e-5);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut r = SplitMix64::new(8);
        for trial in 0..20 {
            let target = random_one_hot(2, 2, 3, &mut r);
            let scores = Tensor::rand_uniform(&[2, 2, 3, 3], -2.0, 2.0, &mut r).requires_grad();
            let img = Tensor::rand_uniform(&[2, 1, 3, 3], 0.0, 1.0, &mut r);
            let pred = Tensor::rand_uniform(&[2, 1, 3, 3], 0.0, 1.0, &mut r).requires_grad();
            let s = [scores.clone()];
            let p = [pred.clone()];
            for (name, err) in [
                ("ce", max_rel_error(|| weighted_ce(&scores, &target), &s).unwrap()),
                ("dice", max_rel_error(|| dice_loss(&scores, &target), &s).unwrap()),
                ("seg", max_rel_error(|| seg_loss(&scores, &target), &s).unwrap()),
                ("mae", max_rel_error(|| mae(&pred, &img), &p).unwrap()),
                ("mse", max_rel_error(|| mse(&pred, &img), &p).unwrap()),
            ] {
                assert!(err < 1e-4, "{name} trial {trial}: {err}");
            }
        }
    }

    #[test]
    fn non_finite_term_is_named() {
        let v = LossValues {
            loss_b: f64::NAN,
            ..LossValues::default()
        };
        assert_eq!(v.non_finite_term(), Some("loss_b"));
        assert_eq!(LossValues::default().non_finite_term(), None);
    }
}
