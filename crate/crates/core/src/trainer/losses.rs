//! Scalar loss arithmetic for adversarial harmonization training.
//!
//! These are the plain-`f64` definitions of the three training losses and
//! the generator objective that combines them. The tape-based training
//! steps in [`super::train`] build the same quantities out of differentiable
//! ops; keeping the closed-form versions here gives tests and logging a
//! single authoritative definition to compare against.

use ndarray::ArrayD;

use crate::error::{IguaneError, Result};
use crate::volume::Volume;

/// Least-squares adversarial loss: `mean((s - target)^2)` over a patch
/// score map. `target` is 1.0 for "should look real" and 0.0 for "should
/// look fake".
pub fn adversarial_loss(scores: &ArrayD<f64>, target: f64) -> f64 {
    let n = scores.len() as f64;
    scores.iter().map(|&s| (s - target) * (s - target)).sum::<f64>() / n
}

/// Discriminator loss for one update: the average of the real-batch loss
/// toward 1 and the fake-batch loss toward 0, i.e.
/// `0.5 * mean((D(real) - 1)^2) + 0.5 * mean(D(fake)^2)`.
pub fn discriminator_loss(real_scores: &ArrayD<f64>, fake_scores: &ArrayD<f64>) -> f64 {
    0.5 * adversarial_loss(real_scores, 1.0) + 0.5 * adversarial_loss(fake_scores, 0.0)
}

/// Mean absolute difference between an image and its reconstruction,
/// taken over the whole grid (background voxels included).
pub fn cycle_loss(x: &Volume, x_cycled: &Volume) -> Result<f64> {
    if x.dims() != x_cycled.dims() {
        return Err(IguaneError::Shape(format!(
            "cycle_loss: dims {:?} vs {:?}",
            x.dims(),
            x_cycled.dims()
        )));
    }
    let n = x.data.len() as f64;
    let s: f64 = x
        .data
        .iter()
        .zip(x_cycled.data.iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(s / n)
}

/// Identity loss is the same mean-L1 penalty as the cycle loss, applied to
/// `G(x)` where `x` is already from the generator's target domain.
pub fn identity_loss(x: &Volume, x_mapped: &Volume) -> Result<f64> {
    cycle_loss(x, x_mapped)
}

/// Total generator objective
/// `L = L_adv + lambda * L_cyc + (lambda / 2) * L_id`.
///
/// `lambda` weights the cycle term; the identity term always uses half of
/// it, which is the tie the training configuration also enforces.
pub fn generator_objective(adv: f64, cyc: f64, id: f64, lambda: f64) -> f64 {
    adv + lambda * cyc + (lambda / 2.0) * id
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, IxDyn};

    use crate::volume::Space;

    fn scores(vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap()
    }

    fn flat_volume(vals: &[f64]) -> Volume {
        let n = vals.len();
        let data = Array3::from_shape_vec((n, 1, 1), vals.to_vec()).unwrap();
        let mask = Array3::from_elem((n, 1, 1), true);
        Volume::new(data, mask, [1.0, 1.0, 1.0], Space::ModelSpace).unwrap()
    }

    #[test]
    fn adversarial_loss_of_half_right_scores_is_half() {
        // Scores {0, 1} against target 1: mean((0-1)^2, (1-1)^2) = 0.5.
        let l = adversarial_loss(&scores(&[0.0, 1.0]), 1.0);
        assert!((l - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adversarial_loss_is_symmetric_under_target_flip() {
        // mean((s-0)^2) == mean(((1-s)-1)^2) for any scores.
        let s = scores(&[0.3, -0.2, 0.9, 1.4]);
        let flipped = s.mapv(|v| 1.0 - v);
        assert!((adversarial_loss(&s, 0.0) - adversarial_loss(&flipped, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn adversarial_loss_of_perfect_scores_is_zero() {
        assert_eq!(adversarial_loss(&scores(&[1.0, 1.0, 1.0]), 1.0), 0.0);
        assert_eq!(adversarial_loss(&scores(&[0.0, 0.0]), 0.0), 0.0);
    }

    #[test]
    fn discriminator_loss_averages_both_batches() {
        // Real scores {0,1} -> 0.5 toward 1; fake scores {1,1} -> 1.0 toward 0.
        let l = discriminator_loss(&scores(&[0.0, 1.0]), &scores(&[1.0, 1.0]));
        assert!((l - (0.5 * 0.5 + 0.5 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn cycle_loss_is_mean_absolute_difference() {
        // x = (0, 0), x' = (1, 3): mean(|0-1|, |0-3|) = 2.0.
        let l = cycle_loss(&flat_volume(&[0.0, 0.0]), &flat_volume(&[1.0, 3.0])).unwrap();
        assert!((l - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cycle_loss_scales_linearly_with_error() {
        let x = flat_volume(&[0.2, -0.4, 0.9]);
        let y = flat_volume(&[0.3, -0.1, 0.5]);
        let y2 = flat_volume(&[0.4, 0.2, 0.1]); // errors doubled
        let l1 = cycle_loss(&x, &y).unwrap();
        let l2 = cycle_loss(&x, &y2).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn cycle_loss_rejects_mismatched_dims() {
        let err = cycle_loss(&flat_volume(&[0.0, 0.0]), &flat_volume(&[1.0])).unwrap_err();
        assert!(matches!(err, IguaneError::Shape(_)));
    }

    #[test]
    fn generator_objective_weights_terms() {
        // 0.5 + 30*0.1 + 15*0.02 = 3.8
        let total = generator_objective(0.5, 0.1, 0.02, 30.0);
        assert!((total - 3.8).abs() < 1e-9);
    }

    #[test]
    fn generator_objective_with_zero_lambda_is_adversarial_only() {
        assert_eq!(generator_objective(0.7, 123.0, 456.0, 0.0), 0.7);
    }
}
