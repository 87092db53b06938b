//! Segmentation losses: soft Dice, weighted smoothed BCE, soft-skeleton
//! centreline Dice, their weighted composite and the deep-supervised total.

use hmsv_tensor::ops::bilinear_resize;
use hmsv_tensor::{PoolMode, PoolPadding, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelOutputs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClDiceForm {
    /// `1 - 2 Tp Ts / (Tp + Ts)`.
    Harmonic,
    /// `1 - 2 Tp Ts / (Tp Ts)`, which is identically -1.
    Product,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub w_dice: f64,
    pub w_bce: f64,
    pub w_cldice: f64,
    pub dice_eps: f64,
    pub cldice_eps: f64,
    pub label_smoothing: f64,
    pub skeleton_iters: usize,
    pub cldice_form: ClDiceForm,
    /// Fused, S2, S3, S4.
    pub deep_supervision: [f64; 4],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_dice: 0.40,
            w_bce: 0.30,
            w_cldice: 0.30,
            dice_eps: 1.0,
            cldice_eps: 1e-6,
            label_smoothing: 0.05,
            skeleton_iters: 5,
            cldice_form: ClDiceForm::Harmonic,
            deep_supervision: [0.50, 0.20, 0.15, 0.15],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_dice, self.w_bce, self.w_cldice];
        if w.iter().any(|&v| v < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "loss.weights",
                "must be nonnegative and sum to 1",
            ));
        }
        let ds = self.deep_supervision;
        if ds.iter().any(|&v| v < 0.0) || (ds.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "loss.deep_supervision",
                "must be nonnegative and sum to 1",
            ));
        }
        if self.skeleton_iters == 0 {
            return Err(Error::config("loss.skeleton_iters", "must be at least 1"));
        }
        if !(self.dice_eps > 0.0 && self.cldice_eps > 0.0) {
            return Err(Error::config(
                "loss.eps",
                "smoothing constants must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("loss.label_smoothing", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn check_shapes<T: Real>(op: &str, p: &Var<T>, g: &Tensor<T>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::invalid(format!(
            "{op}: prediction {:?} vs target {:?}",
            p.shape(),
            g.shape()
        )));
    }
    Ok(())
}

/// `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`.
pub fn dice_loss<T: Real>(tape: &Tape<T>, p: &Var<T>, g: &Tensor<T>, eps: f64) -> Result<Var<T>> {
    check_shapes("dice_loss", p, g)?;
    let gv = tape.constant(g.clone());
    let inter = tape.sum(&tape.mul(p, &gv)?);
    let num = tape.add_scalar(&tape.mul_scalar(&inter, 2.0), eps);
    let den = tape.add_scalar(&tape.sum(p), g.sum_f64() + eps);
    Ok(tape.one_minus(&tape.div(&num, &den)?))
}

/// Weighted BCE against labels smoothed towards 0.5 by `smoothing`.
pub fn weighted_bce<T: Real>(
    tape: &Tape<T>,
    p: &Var<T>,
    g: &Tensor<T>,
    w: &Tensor<T>,
    smoothing: f64,
) -> Result<Var<T>> {
    check_shapes("weighted_bce", p, g)?;
    check_shapes("weighted_bce", p, w)?;
    let pc = tape.clamp(p, 1e-12, 1.0 - 1e-12);
    let gs = g.map(|v| T::of((1.0 - smoothing) * v.as_f64() + smoothing / 2.0));
    let pos = tape.mul(&tape.log(&pc), &tape.constant(gs.clone()))?;
    let neg = tape.mul(
        &tape.log(&tape.one_minus(&pc)),
        &tape.constant(gs.map(|v| T::one() - v)),
    )?;
    let weighted = tape.mul(&tape.add(&pos, &neg)?, &tape.constant(w.clone()))?;
    Ok(tape.mul_scalar(&tape.mean(&weighted), -1.0))
}

fn erode<T: Real>(tape: &Tape<T>, m: &Var<T>) -> Result<Var<T>> {
    Ok(tape.pool2d(m, PoolMode::Min, 3, 1, PoolPadding::Replicate)?)
}

fn dilate<T: Real>(tape: &Tape<T>, m: &Var<T>) -> Result<Var<T>> {
    Ok(tape.pool2d(m, PoolMode::Max, 3, 1, PoolPadding::Replicate)?)
}

fn open_residual<T: Real>(tape: &Tape<T>, m: &Var<T>) -> Result<Var<T>> {
    let opened = dilate(tape, &erode(tape, m)?)?;
    Ok(tape.relu(&tape.sub(m, &opened)?))
}

/// Iterated soft morphological skeleton of an `[N, C, H, W]` map.
pub fn soft_skeletonize<T: Real>(tape: &Tape<T>, m: &Var<T>, iterations: usize) -> Result<Var<T>> {
    let mut img = m.clone();
    let mut skel = open_residual(tape, &img)?;
    for _ in 0..iterations {
        img = erode(tape, &img)?;
        let delta = open_residual(tape, &img)?;
        let overlap = tape.mul(&skel, &delta)?;
        skel = tape.add(&skel, &tape.relu(&tape.sub(&delta, &overlap)?))?;
    }
    Ok(skel)
}

/// Topology precision and sensitivity terms.
pub fn cldice_terms<T: Real>(
    tape: &Tape<T>,
    p: &Var<T>,
    g: &Tensor<T>,
    iterations: usize,
    eps: f64,
) -> Result<(Var<T>, Var<T>)> {
    check_shapes("cldice_loss", p, g)?;
    let gv = tape.constant(g.clone());
    let sp = soft_skeletonize(tape, p, iterations)?;
    let sg = soft_skeletonize(tape, &gv, iterations)?;
    let tprec = tape.div(
        &tape.add_scalar(&tape.sum(&tape.mul(&sp, &gv)?), eps),
        &tape.add_scalar(&tape.sum(&sp), eps),
    )?;
    let tsens = tape.div(
        &tape.add_scalar(&tape.sum(&tape.mul(&sg, p)?), eps),
        &tape.constant(Tensor::scalar(T::of(sg.value().sum_f64() + eps))),
    )?;
    Ok((tprec, tsens))
}

pub fn cldice_loss<T: Real>(
    tape: &Tape<T>,
    p: &Var<T>,
    g: &Tensor<T>,
    iterations: usize,
    eps: f64,
    form: ClDiceForm,
) -> Result<Var<T>> {
    let (tp, ts) = cldice_terms(tape, p, g, iterations, eps)?;
    let prod = tape.mul(&tp, &ts)?;
    let den = match form {
        ClDiceForm::Harmonic => tape.add(&tp, &ts)?,
        ClDiceForm::Product => prod.clone(),
    };
    Ok(tape.one_minus(&tape.mul_scalar(&tape.div(&prod, &den)?, 2.0)))
}

/// A scalar loss with its unweighted constituents.
#[derive(Debug, Clone)]
pub struct LossTerms<T: Real> {
    pub total: Var<T>,
    pub dice: f64,
    pub bce: f64,
    pub cldice: f64,
}

/// Composite loss weights, with the centreline term dropped and the rest
/// renormalised when the target is a mixup blend.
pub fn composite_weights(cfg: &LossConfig, mixed: bool) -> [f64; 3] {
    if mixed {
        let s = cfg.w_dice + cfg.w_bce;
        [cfg.w_dice / s, cfg.w_bce / s, 0.0]
    } else {
        [cfg.w_dice, cfg.w_bce, cfg.w_cldice]
    }
}

/// `w_d Dice + w_b BCE + w_c clDice` on one probability map.
pub fn composite_loss<T: Real>(
    tape: &Tape<T>,
    p: &Var<T>,
    g: &Tensor<T>,
    w: &Tensor<T>,
    cfg: &LossConfig,
    mixed: bool,
) -> Result<LossTerms<T>> {
    let [wd, wb, wc] = composite_weights(cfg, mixed);
    let dice = dice_loss(tape, p, g, cfg.dice_eps)?;
    let bce = weighted_bce(tape, p, g, w, cfg.label_smoothing)?;
    let mut total = tape.add(&tape.mul_scalar(&dice, wd), &tape.mul_scalar(&bce, wb))?;
    let mut cl_value = f64::NAN;
    if wc != 0.0 {
        let cl = cldice_loss(
            tape,
            p,
            g,
            cfg.skeleton_iters,
            cfg.cldice_eps,
            cfg.cldice_form,
        )?;
        cl_value = cl.item().as_f64();
        total = tape.add(&total, &tape.mul_scalar(&cl, wc))?;
    }
    Ok(LossTerms {
        dice: dice.item().as_f64(),
        bce: bce.item().as_f64(),
        cldice: cl_value,
        total,
    })
}

/// Composite loss per sample of an `[N, 1, H, W]` batch, averaged.
pub fn batch_composite<T: Real>(
    tape: &Tape<T>,
    p: &Var<T>,
    g: &Tensor<T>,
    w: &Tensor<T>,
    cfg: &LossConfig,
    mixed: &[bool],
) -> Result<LossTerms<T>> {
    let n = p.shape()[0];
    if mixed.len() != n {
        return Err(Error::invalid(format!(
            "{} mixup flags for batch of {n}",
            mixed.len()
        )));
    }
    check_shapes("batch_composite", p, g)?;
    let mut terms: Option<LossTerms<T>> = None;
    let (mut cl_sum, mut cl_n) = (0.0, 0usize);
    for (i, &mix) in mixed.iter().enumerate() {
        let t = composite_loss(
            tape,
            &tape.batch_item(p, i)?,
            &g.batch_item(i)?,
            &w.batch_item(i)?,
            cfg,
            mix,
        )?;
        if !t.cldice.is_nan() {
            cl_sum += t.cldice;
            cl_n += 1;
        }
        terms = Some(match terms {
            None => t,
            Some(acc) => LossTerms {
                total: tape.add(&acc.total, &t.total)?,
                dice: acc.dice + t.dice,
                bce: acc.bce + t.bce,
                cldice: 0.0,
            },
        });
    }
    let t = terms.ok_or_else(|| Error::invalid("empty batch"))?;
    let inv = 1.0 / n as f64;
    Ok(LossTerms {
        total: tape.mul_scalar(&t.total, inv),
        dice: t.dice * inv,
        bce: t.bce * inv,
        cldice: if cl_n > 0 {
            cl_sum / cl_n as f64
        } else {
            f64::NAN
        },
    })
}

/// Resizes an `[N, 1, H, W]` target; hard targets are re-binarised at 0.5,
/// soft (mixup) targets stay continuous.
pub fn downsample_target<T: Real>(g: &Tensor<T>, size: usize, mixed: &[bool]) -> Result<Tensor<T>> {
    let mut r = bilinear_resize(g, size, size)?;
    let plane = size * size;
    for (i, &mix) in mixed.iter().enumerate() {
        if !mix {
            for v in &mut r.data_mut()[i * plane..(i + 1) * plane] {
                *v = if v.as_f64() >= 0.5 {
                    T::one()
                } else {
                    T::zero()
                };
            }
        }
    }
    Ok(r)
}

/// Loss of each supervised head and the weighted total.
#[derive(Debug, Clone)]
pub struct DeepLoss<T: Real> {
    pub total: Var<T>,
    /// Fused, S2, S3, S4.
    pub heads: Vec<LossTerms<T>>,
}

/// `0.50 L(fused) + 0.20 L(S2) + 0.15 L(S3) + 0.15 L(S4)`; S1 enters only
/// through the fused map.
pub fn deep_supervised_total<T: Real>(
    tape: &Tape<T>,
    outputs: &ModelOutputs<T>,
    g_full: &Tensor<T>,
    w_full: &Tensor<T>,
    cfg: &LossConfig,
    mixed: &[bool],
) -> Result<DeepLoss<T>> {
    if outputs.branches.len() != 4 {
        return Err(Error::invalid(format!(
            "expected 4 branch outputs, got {}",
            outputs.branches.len()
        )));
    }
    let mut heads = Vec::with_capacity(4);
    let mut total: Option<Var<T>> = None;
    let logits = [
        &outputs.fused,
        &outputs.branches[1],
        &outputs.branches[2],
        &outputs.branches[3],
    ];
    for (k, (l, &wk)) in logits.iter().zip(&cfg.deep_supervision).enumerate() {
        let size = l.shape()[2];
        let (g, w) = if k == 0 {
            (g_full.clone(), w_full.clone())
        } else {
            (
                downsample_target(g_full, size, mixed)?,
                bilinear_resize(w_full, size, size)?,
            )
        };
        let p = tape.sigmoid(l);
        let terms = batch_composite(tape, &p, &g, &w, cfg, mixed)?;
        let weighted = tape.mul_scalar(&terms.total, wk);
        total = Some(match total {
            None => weighted,
            Some(a) => tape.add(&a, &weighted)?,
        });
        heads.push(terms);
    }
    Ok(DeepLoss {
        total: total.expect("four heads"),
        heads,
    })
}

/// Weighted sum of per-head losses, as used by [`deep_supervised_total`].
pub fn combine_heads(values: [f64; 4], cfg: &LossConfig) -> f64 {
    values
        .iter()
        .zip(&cfg.deep_supervision)
        .map(|(v, w)| v * w)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(tape: &Tape<f64>, shape: &[usize], v: &[f64]) -> Var<f64> {
        tape.param(Tensor::new(shape, v.to_vec()).unwrap())
    }

    #[test]
    fn mixup_weights_renormalise() {
        let cfg = LossConfig::default();
        let w = composite_weights(&cfg, true);
        assert!((w[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((w[1] - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn dice_total_miss_closed_form() {
        let tape = Tape::new();
        let p = var(&tape, &[1, 1, 2, 2], &[0.0; 4]);
        let g = Tensor::ones(&[1, 1, 2, 2]);
        let l = dice_loss(&tape, &p, &g, 1.0).unwrap();
        assert!((l.item() - (1.0 - 1.0 / 5.0)).abs() < 1e-15);
    }

    #[test]
    fn downsample_keeps_soft_targets() {
        let g = Tensor::<f64>::full(&[2, 1, 4, 4], 0.3);
        let r = downsample_target(&g, 2, &[false, true]).unwrap();
        assert!(r.data()[..4].iter().all(|&v| v == 0.0));
        assert!(r.data()[4..].iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }
}
