//! Losses, schedules, configuration presets and the staged trainer.

mod config;
mod run;

pub use config::{CouplingConfig, ModelKind, Preset, StagePlan, StageSpec, TrainConfig};
pub use run::{
    run_stages, stage3_batch_loss, validation_score, Checkpoint, CoupledContext, EpochLog, LossParts, Localizer,
    RunManifest, SelectedCheckpoint, TrainedRun,
};

use crate::autodiff::Var;
use crate::geometry::Point;
use crate::tensor::Matrix;
use crate::Scalar;

/// Mean over the batch of the squared distance between each `1×2` prediction
/// and its target.
pub fn loss_localization<'t, T: Scalar>(predictions: &[Var<'t, T>], targets: &[Point]) -> Var<'t, T> {
    assert_eq!(predictions.len(), targets.len());
    assert!(!predictions.is_empty(), "empty batch");
    let tape = predictions[0].tape();
    let preds = Var::concat_rows(predictions);
    let t = Matrix::from_fn(targets.len(), 2, |r, c| T::lit(targets[r][c]));
    let diff = preds.sub(tape.constant(t));
    diff.square().sum().scale(T::one() / T::from_usize_lossy(targets.len()))
}

/// `(ΔE + ε) / ε`.
pub fn focus_weight(delta_e: f64, eps: f64) -> f64 {
    (delta_e + eps) / eps
}

/// Focus-weighted squared error of one `P_f×1` prediction, summed over
/// paths (divide by the path count for the mean).
pub fn weighted_forward_error<'t, T: Scalar>(prediction: Var<'t, T>, target: &[T], eps: f64) -> Var<'t, T> {
    let tape = prediction.tape();
    let weights = Matrix::column_vector(
        target
            .iter()
            .map(|&v| T::lit(focus_weight(v.to_f64_lossy(), eps)))
            .collect(),
    );
    let diff = prediction.sub(tape.constant(Matrix::column_vector(target.to_vec())));
    diff.square().mul(tape.constant(weights)).sum()
}

/// Mean over samples and paths of the focus-weighted squared error.
pub fn loss_forward_pretrain<'t, T: Scalar>(predictions: &[Var<'t, T>], targets: &[&[T]], eps: f64) -> Var<'t, T> {
    assert_eq!(predictions.len(), targets.len());
    assert!(!predictions.is_empty(), "empty batch");
    let terms: Vec<Var<'t, T>> = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| weighted_forward_error(*p, t, eps))
        .collect();
    let count = predictions.len() * targets[0].len();
    Var::concat_rows(&terms).sum().scale(T::one() / T::from_usize_lossy(count))
}

/// Coupling weight for a Stage III epoch (0-based): zero during warm-up,
/// then a linear ramp to `lambda_max` over `ramp` epochs.
pub fn lambda_schedule(epoch: usize, cfg: &CouplingConfig) -> f64 {
    if epoch < cfg.warmup {
        return 0.0;
    }
    if cfg.ramp == 0 {
        return cfg.lambda_max;
    }
    let progress = (epoch - cfg.warmup) as f64 / cfg.ramp as f64;
    cfg.lambda_max * progress.min(1.0)
}

/// `g / (‖g‖ + ε)`.
pub fn correction_direction<T: Scalar>(g: [T; 2], eps: f64) -> [T; 2] {
    let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
    let denom = norm + T::lit(eps);
    [g[0] / denom, g[1] / denom]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;

    #[test]
    fn localization_loss_values() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Matrix::row_vector(vec![0.0, 0.0]));
        assert_eq!(loss_localization(&[p], &[[3.0, 4.0]]).scalar_value(), 25.0);
        let q = tape.constant(Matrix::row_vector(vec![-0.001, -0.001]));
        assert_eq!(loss_localization(&[q], &[[-0.001, -0.001]]).scalar_value(), 0.0);
        assert_eq!(loss_localization(&[p, q], &[[3.0, 4.0], [-0.001, -0.001]]).scalar_value(), 12.5);
    }

    #[test]
    fn focus_weights() {
        assert_eq!(focus_weight(0.0, 0.01), 1.0);
        assert!((focus_weight(1.0, 0.01) - 101.0).abs() < 1e-12);
        assert!((focus_weight(0.5, 0.01) - 51.0).abs() < 1e-12);
    }

    #[test]
    fn forward_pretrain_loss_against_loop_oracle() {
        let tape = Tape::<f64>::new();
        let preds = [vec![0.1, 0.5, 0.0], vec![0.9, 0.2, 0.4]];
        let targets = [vec![0.0, 0.7, 0.0], vec![1.0, 0.0, 0.3]];
        let vars: Vec<_> = preds
            .iter()
            .map(|p| tape.constant(Matrix::column_vector(p.clone())))
            .collect();
        let t: Vec<&[f64]> = targets.iter().map(|t| t.as_slice()).collect();
        let got = loss_forward_pretrain(&vars, &t, 0.01).scalar_value();
        let mut acc = 0.0;
        for s in 0..2 {
            for k in 0..3 {
                let w = (targets[s][k] + 0.01) / 0.01;
                acc += w * (preds[s][k] - targets[s][k]).powi(2);
            }
        }
        assert!((got - acc / 6.0).abs() < 1e-12);
        // uniform error on zero targets gives e²
        let v = tape.constant(Matrix::column_vector(vec![0.2; 4]));
        let zero = [0.0; 4];
        assert!((loss_forward_pretrain(&[v], &[&zero], 0.01).scalar_value() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn lambda_schedule_values() {
        let cfg = CouplingConfig::default();
        for e in 0..40 {
            assert_eq!(lambda_schedule(e, &cfg), 0.0);
        }
        assert!((lambda_schedule(90, &cfg) - 1.5).abs() < 1e-12);
        assert_eq!(lambda_schedule(140, &cfg), 3.0);
        assert_eq!(lambda_schedule(599, &cfg), 3.0);
    }

    #[test]
    fn correction_direction_norms() {
        let d = correction_direction([3.0f64, 4.0], 1e-8);
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
        assert!((1.0 - 1e-6..=1.0).contains(&n));
        assert_eq!(correction_direction([0.0f64, 0.0], 1e-8), [0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn lambda_is_monotone_and_bounded(warmup in 0usize..100, ramp in 0usize..200, epoch in 0usize..1000) {
            let cfg = CouplingConfig { warmup, ramp, ..CouplingConfig::default() };
            let a = lambda_schedule(epoch, &cfg);
            let b = lambda_schedule(epoch + 1, &cfg);
            prop_assert!(a <= b);
            prop_assert!((0.0..=cfg.lambda_max).contains(&a));
            if epoch < warmup { prop_assert_eq!(a, 0.0); }
            if epoch >= warmup + ramp { prop_assert_eq!(a, cfg.lambda_max); }
        }

        #[test]
        fn correction_direction_is_unit_for_large_gradients(gx in -1e3f64..1e3, gy in -1e3f64..1e3) {
            prop_assume!((gx * gx + gy * gy).sqrt() > 1e-3);
            let d = correction_direction([gx, gy], 1e-8);
            let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
            prop_assert!(n <= 1.0 && n >= 1.0 - 1e-5);
        }
    }
}
