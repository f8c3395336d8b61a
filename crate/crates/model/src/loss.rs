//! Training objective: soft Dice over appliance states plus an L1/L2
//! injection term.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum InjectionLossKind {
    L1,
    #[default]
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub injection: InjectionLossKind,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            injection: InjectionLossKind::L2,
            dice_smooth: 1.0,
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err(format!("{what}: prediction {:?} vs truth {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Soft Dice loss summed over appliances. `pred` and `truth` are `[B, K]`;
/// overlap and set sizes are sums over the batch axis, smoothed by
/// `smooth` in numerator and denominator.
pub fn dice_loss(pred: &Tensor, truth: &Tensor, smooth: f64) -> Result<Tensor> {
    same_shape(pred, truth, "dice loss")?;
    if pred.rank() != 2 {
        return Err(shape_err(format!("dice loss expects [B, K], got {:?}", pred.dims())));
    }
    let inter = (pred * truth)?.sum(0)?;
    let sizes = (pred.sum(0)? + truth.sum(0)?)?;
    let ratio = (inter.affine(2.0, smooth)? / sizes.affine(1.0, smooth)?)?;
    Ok(ratio.affine(-1.0, 1.0)?.sum_all()?)
}

/// Mean absolute (L1) or squared (L2) error over all entries.
pub fn injection_loss(pred: &Tensor, truth: &Tensor, kind: InjectionLossKind) -> Result<Tensor> {
    same_shape(pred, truth, "injection loss")?;
    let diff = (pred - truth)?;
    Ok(match kind {
        InjectionLossKind::L1 => diff.abs()?.mean_all()?,
        InjectionLossKind::L2 => diff.sqr()?.mean_all()?,
    })
}

/// The weighted objective with both parts kept for reporting. A part is
/// absent when the model has no head for that task.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub dice: Option<Tensor>,
    pub injection: Option<Tensor>,
}

pub fn total_loss(
    states: Option<&Tensor>,
    injection: Option<&Tensor>,
    labels: &Tensor,
    targets: &Tensor,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let dice = states.map(|p| dice_loss(p, labels, cfg.dice_smooth)).transpose()?;
    let inj = injection
        .map(|p| injection_loss(p, targets, cfg.injection))
        .transpose()?;
    let total = match (&dice, &inj) {
        (Some(d), Some(i)) => (d.affine(cfg.lambda1, 0.0)? + i.affine(cfg.lambda2, 0.0)?)?,
        (Some(d), None) => d.affine(cfg.lambda1, 0.0)?,
        (None, Some(i)) => i.affine(cfg.lambda2, 0.0)?,
        (None, None) => return Err(shape_err("model produced no outputs to score")),
    };
    Ok(LossParts {
        total,
        dice,
        injection: inj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let k = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), k), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn dice_examples() {
        let truth = t2(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(scalar(&dice_loss(&truth, &truth, 1.0).unwrap()), 0.0);
        let opposite = t2(&[&[0.0, 1.0], &[1.0, 0.0], &[0.0, 0.0]]);
        // per appliance 1 - 1/(3 + 1) with two ones in truth and one in pred
        let expected = 2.0 * (1.0 - 1.0 / 4.0);
        assert!((scalar(&dice_loss(&opposite, &truth, 1.0).unwrap()) - expected).abs() < 1e-12);
        assert_eq!(scalar(&dice_loss(&opposite, &truth, 0.0).unwrap()), 2.0);
    }

    #[test]
    fn dice_half_overlap() {
        // n = 4 ones each, two shared
        let truth = t2(&[&[1.0], &[1.0], &[1.0], &[1.0], &[0.0], &[0.0]]);
        let pred = t2(&[&[1.0], &[1.0], &[0.0], &[0.0], &[1.0], &[1.0]]);
        assert_eq!(scalar(&dice_loss(&pred, &truth, 0.0).unwrap()), 0.5);
        let smoothed = scalar(&dice_loss(&pred, &truth, 1.0).unwrap());
        assert!((smoothed - 4.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn injection_examples() {
        let a = t2(&[&[0.5, 0.5]]);
        let b = t2(&[&[0.0, 1.0]]);
        assert_eq!(scalar(&injection_loss(&a, &b, InjectionLossKind::L1).unwrap()), 0.5);
        assert_eq!(scalar(&injection_loss(&a, &b, InjectionLossKind::L2).unwrap()), 0.25);
        let zeros = t2(&[&[0.0, 0.0]]);
        let ones = t2(&[&[1.0, 1.0]]);
        assert_eq!(scalar(&injection_loss(&zeros, &ones, InjectionLossKind::L1).unwrap()), 1.0);
        assert_eq!(scalar(&injection_loss(&zeros, &ones, InjectionLossKind::L2).unwrap()), 1.0);
        assert_eq!(scalar(&injection_loss(&a, &a, InjectionLossKind::L2).unwrap()), 0.0);
        assert!(injection_loss(&a, &t2(&[&[1.0]]), InjectionLossKind::L1).is_err());
    }

    #[test]
    fn total_weights_parts() {
        // dice 0.5 (smooth 0, half overlap), injection 0.25
        let truth = t2(&[&[1.0], &[1.0], &[0.0], &[0.0]]);
        let pred = t2(&[&[1.0], &[0.0], &[1.0], &[0.0]]);
        let inj = t2(&[&[0.5, 0.5]]);
        let target = t2(&[&[0.0, 1.0]]);
        let cfg = LossConfig {
            dice_smooth: 0.0,
            ..LossConfig::default()
        };
        let parts = total_loss(Some(&pred), Some(&inj), &truth, &target, &cfg).unwrap();
        assert_eq!(scalar(&parts.total), 0.75);
        assert_eq!(scalar(parts.dice.as_ref().unwrap()), 0.5);
        assert_eq!(scalar(parts.injection.as_ref().unwrap()), 0.25);
        let only_inj = LossConfig { lambda1: 0.0, ..cfg };
        let parts = total_loss(Some(&pred), Some(&inj), &truth, &target, &only_inj).unwrap();
        assert_eq!(scalar(&parts.total), 0.25);
        let only_dice = LossConfig { lambda2: 0.0, ..cfg };
        let parts = total_loss(Some(&pred), Some(&inj), &truth, &target, &only_dice).unwrap();
        assert_eq!(scalar(&parts.total), 0.5);
    }
}
