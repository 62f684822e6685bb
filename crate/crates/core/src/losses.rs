//! Per-pixel robust losses, soft Dice, the deep-supervised objective and the
//! sorted cumulative loss distribution used to inspect outlier dominance.
//!
//! All per-pixel functions return the loss together with `dL/dp`, where `p`
//! is the predicted foreground probability and `t ∈ {0, 1}` the label.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LevelVars;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Probabilities are clamped into `[P_CLAMP, 1 - P_CLAMP]` before the loss
/// is evaluated inside the training objective (f32 sigmoids saturate).
pub const P_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NucleiLoss {
    Bce,
    Bootstrapped,
    Truncated,
    SmoothTruncated,
}

impl std::str::FromStr for NucleiLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(NucleiLoss::Bce),
            "bootstrapped" => Ok(NucleiLoss::Bootstrapped),
            "truncated" => Ok(NucleiLoss::Truncated),
            "smooth_truncated" => Ok(NucleiLoss::SmoothTruncated),
            other => Err(Error::Config(format!(
                "unknown loss {other:?} (expected bce, bootstrapped, truncated or smooth_truncated)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub nuclei_loss: NucleiLoss,
    pub bootstrap_beta: f64,
    /// One weight per supervised level: 1/8, 1/4, 1/2, full resolution.
    pub level_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.2,
            lambda: 0.42,
            nuclei_loss: NucleiLoss::SmoothTruncated,
            bootstrap_beta: 0.95,
            level_weights: vec![1.0; 4],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 0.5]", self.gamma)));
        }
        if self.nuclei_loss == NucleiLoss::Truncated && self.gamma == 0.0 {
            return Err(Error::Config("truncated loss needs gamma > 0 (use bce)".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if !(self.bootstrap_beta > 0.0 && self.bootstrap_beta <= 1.0) {
            return Err(Error::Config(format!("bootstrap_beta {} outside (0, 1]", self.bootstrap_beta)));
        }
        if self.level_weights.iter().any(|w| !(*w >= 0.0)) || self.level_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("level_weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }

    /// The configured nuclei loss at one pixel.
    pub fn pixel(&self, p: f64, t: f64) -> Result<PixelLoss> {
        match self.nuclei_loss {
            NucleiLoss::Bce => bce(p, t),
            NucleiLoss::Bootstrapped => bootstrapped_soft(p, t, self.bootstrap_beta),
            NucleiLoss::Truncated => truncated(p, t, self.gamma),
            NucleiLoss::SmoothTruncated => smooth_truncated(p, t, self.gamma),
        }
    }
}

/// Loss value and its derivative with respect to `p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelLoss {
    pub value: f64,
    pub grad: f64,
}

/// `(p_t, dp_t/dp)`.
fn p_true(p: f64, t: f64) -> Result<(f64, f64)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("probability {p} outside (0, 1)")));
    }
    Ok(if t >= 0.5 { (p, 1.0) } else { (1.0 - p, -1.0) })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 0.5) {
        return Err(Error::Domain(format!("gamma {gamma} outside (0, 0.5]")));
    }
    Ok(())
}

/// `-log p_t`.
pub fn bce(p: f64, t: f64) -> Result<PixelLoss> {
    let (pt, dpt) = p_true(p, t)?;
    Ok(PixelLoss {
        value: -pt.ln(),
        grad: -dpt / pt,
    })
}

/// `-max(log p_t, log γ)`; the derivative is 0 on the clipped side and at the kink.
pub fn truncated(p: f64, t: f64, gamma: f64) -> Result<PixelLoss> {
    check_gamma(gamma)?;
    let (pt, dpt) = p_true(p, t)?;
    Ok(if pt <= gamma {
        PixelLoss {
            value: -gamma.ln(),
            grad: 0.0,
        }
    } else {
        PixelLoss {
            value: -pt.ln(),
            grad: -dpt / pt,
        }
    })
}

/// Below `γ` the log-likelihood is replaced by the quadratic
/// `-log γ + ½(1 - p_t²/γ²)`, which matches value and slope at `p_t = γ`.
/// `γ = 0` is plain cross-entropy.
pub fn smooth_truncated(p: f64, t: f64, gamma: f64) -> Result<PixelLoss> {
    if gamma == 0.0 {
        return bce(p, t);
    }
    check_gamma(gamma)?;
    let (pt, dpt) = p_true(p, t)?;
    Ok(if pt < gamma {
        let g2 = gamma * gamma;
        PixelLoss {
            value: -gamma.ln() + 0.5 * (1.0 - pt * pt / g2),
            grad: -pt / g2 * dpt,
        }
    } else {
        PixelLoss {
            value: -pt.ln(),
            grad: -dpt / pt,
        }
    })
}

/// Soft bootstrapping: the target is blended with the prediction,
/// `q = β·t + (1-β)·p`, and cross-entropy is taken against `q`.
pub fn bootstrapped_soft(p: f64, t: f64, beta: f64) -> Result<PixelLoss> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Domain(format!("bootstrap beta {beta} outside (0, 1]")));
    }
    p_true(p, t)?;
    let q1 = beta * t + (1.0 - beta) * p;
    let q0 = beta * (1.0 - t) + (1.0 - beta) * (1.0 - p);
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    Ok(PixelLoss {
        value: -q1 * lp - q0 * lq,
        grad: -(1.0 - beta) * lp - q1 / p + (1.0 - beta) * lq + q0 / (1.0 - p),
    })
}

/// Soft Dice loss with its gradient with respect to `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `1 - 2Σpq / (Σp² + Σq²)`; defined as 0 when both maps are empty.
pub fn soft_dice(p: &[f64], q: &[f64]) -> Result<DiceLoss> {
    if p.len() != q.len() {
        return Err(Error::dim("soft_dice", "pixels", q.len(), p.len()));
    }
    let mut inter = 0.0;
    let mut denom = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        inter += a * b;
        denom += a * a + b * b;
    }
    if denom == 0.0 {
        return Ok(DiceLoss {
            value: 0.0,
            grad: vec![0.0; p.len()],
        });
    }
    let d2 = denom * denom;
    Ok(DiceLoss {
        value: 1.0 - 2.0 * inter / denom,
        grad: p
            .iter()
            .zip(q)
            .map(|(&a, &b)| -2.0 * (b * denom - 2.0 * a * inter) / d2)
            .collect(),
    })
}

/// Ground truth for one supervised level (each N×1×h×w, values 0/1).
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets<T> {
    pub nuclei: Tensor<T>,
    pub contour: Tensor<T>,
}

/// Recorded objective plus its per-level breakdown.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub var: Var,
    pub value: f64,
    /// `(nuclei term, dice term)` per level.
    pub per_level: Vec<(f64, f64)>,
}

/// Mean configured nuclei loss over every pixel of `p`, as a tape scalar.
pub fn nuclei_term<T: Scalar>(tape: &mut Tape<T>, p: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<(Var, f64)> {
    let pv = tape.value(p);
    if pv.shape() != target.shape() {
        return Err(Error::dim("total_loss", "pixels", target.len(), pv.len()));
    }
    let inv = 1.0 / pv.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(pv.len());
    for (&pp, &tt) in pv.data().iter().zip(target.data()) {
        let pc = pp.as_f64().clamp(P_CLAMP, 1.0 - P_CLAMP);
        let l = cfg.pixel(pc, tt.as_f64())?;
        sum += l.value;
        grad.push(T::from_f64(l.grad * inv));
    }
    let grad = Tensor::from_vec(pv.shape(), grad)?;
    let mean = sum * inv;
    Ok((tape.scalar_with_grad(p, T::from_f64(mean), grad)?, mean))
}

/// Soft Dice computed per image, then averaged over the batch.
pub fn dice_term<T: Scalar>(tape: &mut Tape<T>, p: Var, target: &Tensor<T>) -> Result<(Var, f64)> {
    let pv = tape.value(p);
    let s = pv.shape();
    if s != target.shape() {
        return Err(Error::dim("total_loss", "pixels", target.len(), pv.len()));
    }
    let inv_n = 1.0 / s.n as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pv.len());
    for n in 0..s.n {
        let a: Vec<f64> = pv.item(n).data().iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = target.item(n).data().iter().map(|v| v.as_f64()).collect();
        let d = soft_dice(&a, &b)?;
        total += d.value;
        grad.extend(d.grad.into_iter().map(|g| T::from_f64(g * inv_n)));
    }
    let grad = Tensor::from_vec(s, grad)?;
    let mean = total * inv_n;
    Ok((tape.scalar_with_grad(p, T::from_f64(mean), grad)?, mean))
}

/// `Σ_ℓ w_ℓ·[nuclei_loss_ℓ + λ·dice_ℓ] / Σ_ℓ w_ℓ`.
///
/// Weight decay is not part of this scalar; the optimizer applies it.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &[LevelVars],
    targets: &[LevelTargets<T>],
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    if outputs.len() != targets.len() {
        return Err(Error::dim("total_loss", "levels", outputs.len(), targets.len()));
    }
    if cfg.level_weights.len() != outputs.len() {
        return Err(Error::dim("total_loss", "level_weights", outputs.len(), cfg.level_weights.len()));
    }
    let wsum: f64 = cfg.level_weights.iter().sum();
    let mut vars = Vec::with_capacity(2 * outputs.len());
    let mut weights = Vec::with_capacity(2 * outputs.len());
    let mut per_level = Vec::with_capacity(outputs.len());
    let mut value = 0.0;
    for ((out, tgt), &w) in outputs.iter().zip(targets).zip(&cfg.level_weights) {
        let (nv, nval) = nuclei_term(tape, out.nuclei, &tgt.nuclei, cfg)?;
        let (dv, dval) = dice_term(tape, out.contour, &tgt.contour)?;
        vars.extend([nv, dv]);
        weights.extend([T::from_f64(w / wsum), T::from_f64(cfg.lambda * w / wsum)]);
        value += w / wsum * (nval + cfg.lambda * dval);
        per_level.push((nval, dval));
    }
    let var = tape.weighted_sum(&vars, &weights)?;
    Ok(TotalLoss { var, value, per_level })
}

/// Sorted cumulative distribution of normalized per-sample losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossCdf {
    /// `(i + 1) / n` for the i-th largest loss.
    pub fractions: Vec<f64>,
    /// Share of the total loss carried by the top `fractions[i]` samples.
    pub cumulative: Vec<f64>,
    /// All losses were zero; the curve is 0 until the last point.
    pub degenerate: bool,
}

pub fn loss_cdf(losses: &[f64]) -> Result<LossCdf> {
    if losses.is_empty() {
        return Err(Error::Contract("loss_cdf needs at least one sample".into()));
    }
    if let Some(bad) = losses.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(Error::Domain(format!("loss_cdf needs finite non-negative losses, got {bad}")));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for v in &sorted {
        acc += v;
        cum.push(acc);
    }
    let total = acc;
    let degenerate = total == 0.0;
    let cumulative = if degenerate {
        let mut c = vec![0.0; n];
        c[n - 1] = 1.0;
        c
    } else {
        cum.iter().map(|c| c / total).collect()
    };
    Ok(LossCdf {
        fractions: (1..=n).map(|i| i as f64 / n as f64).collect(),
        cumulative,
        degenerate,
    })
}

impl LossCdf {
    /// Share of the total loss carried by the top `fraction` of samples.
    pub fn top_share(&self, fraction: f64) -> f64 {
        let n = self.fractions.len();
        let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
        self.cumulative[k - 1]
    }

    /// Writes `fraction,cumulative_loss` rows, thinned to at most `max_rows`
    /// evenly spaced points (the last point is always kept).
    pub fn write_csv<W: Write>(&self, w: &mut W, max_rows: usize) -> std::io::Result<()> {
        writeln!(w, "fraction,cumulative_loss")?;
        let n = self.fractions.len();
        let rows = max_rows.clamp(1, n);
        for r in 0..rows {
            let i = if rows == n { r } else { ((r + 1) * n).div_ceil(rows) - 1 };
            writeln!(w, "{},{}", self.fractions[i], self.cumulative[i])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn bce_values_and_domain() {
        assert_eq!(bce(0.5, 1.0).unwrap().value, LN2);
        assert!((bce(0.9, 0.0).unwrap().value - 2.302585).abs() < 1e-6);
        assert!(bce(1.0 - 1e-15, 1.0).unwrap().value < 1e-14);
        assert!(matches!(bce(1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(bce(0.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn truncated_clips_below_gamma() {
        assert!((truncated(0.5, 1.0, 0.2).unwrap().value - LN2).abs() < 1e-12);
        let clipped = truncated(0.1, 1.0, 0.2).unwrap();
        assert!((clipped.value - 1.6094379).abs() < 1e-6);
        assert_eq!(clipped.grad, 0.0);
        let at = truncated(0.2, 1.0, 0.2).unwrap();
        assert!((at.value - 1.6094379).abs() < 1e-6);
        // Left derivative 0, right derivative -1/γ.
        assert_eq!(at.grad, 0.0);
        assert!((truncated(0.2 + 1e-9, 1.0, 0.2).unwrap().grad + 5.0).abs() < 1e-6);
        assert!(matches!(truncated(0.3, 1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn smooth_truncated_values() {
        let v = smooth_truncated(0.1, 1.0, 0.2).unwrap();
        assert!((v.value - 1.984438).abs() < 1e-6);
        let below = smooth_truncated(0.2 - 1e-15, 1.0, 0.2).unwrap();
        let above = smooth_truncated(0.2, 1.0, 0.2).unwrap();
        assert!((below.value - above.value).abs() < 1e-12);
        assert!((below.grad + 5.0).abs() < 1e-9 && (above.grad + 5.0).abs() < 1e-12);
        assert!(smooth_truncated(1.0 - 1e-16, 1.0, 0.2).unwrap().value.abs() < 1e-15);
        assert_eq!(smooth_truncated(0.3, 0.0, 0.0).unwrap(), bce(0.3, 0.0).unwrap());
        // t = 0: p_t = 1 - p, so dL/dp flips sign.
        let neg = smooth_truncated(0.9, 0.0, 0.2).unwrap();
        assert!((neg.grad - 0.1 / 0.04).abs() < 1e-12);
    }

    #[test]
    fn bootstrapped_reduces_to_bce() {
        assert!((bootstrapped_soft(0.5, 1.0, 0.95).unwrap().value - LN2).abs() < 1e-12);
        for p in [0.1, 0.4, 0.77] {
            for t in [0.0, 1.0] {
                let b = bootstrapped_soft(p, t, 1.0).unwrap();
                let c = bce(p, t).unwrap();
                assert!((b.value - c.value).abs() < 1e-12);
                assert!((b.grad - c.grad).abs() < 1e-12);
            }
        }
        assert!(bootstrapped_soft(1.0 - 1e-12, 1.0, 0.95).unwrap().value < 1e-9);
    }

    #[test]
    fn dice_cases() {
        let q = [1.0, 0.0, 1.0, 1.0];
        assert_eq!(soft_dice(&q, &q).unwrap().value, 0.0);
        assert_eq!(soft_dice(&[0.0, 1.0, 0.0, 0.0], &q).unwrap().value, 1.0);
        let n = 100;
        let d = soft_dice(&vec![0.5; n], &vec![1.0; n]).unwrap();
        assert!((d.value - 0.2).abs() < 1e-12);
        assert_eq!(soft_dice(&[0.0; 3], &[0.0; 3]).unwrap().value, 0.0);
        assert!(soft_dice(&[0.0; 3], &[0.0; 2]).is_err());
    }

    #[test]
    fn cdf_shapes() {
        let c = loss_cdf(&[1.0; 100]).unwrap();
        assert!((c.top_share(0.1) - 0.1).abs() < 1e-12);
        assert_eq!(*c.cumulative.last().unwrap(), 1.0);
        let mut spike = vec![0.0; 50];
        spike[17] = 3.0;
        let c = loss_cdf(&spike).unwrap();
        assert_eq!(c.cumulative[0], 1.0);
        let z = loss_cdf(&[0.0; 4]).unwrap();
        assert!(z.degenerate);
        assert_eq!(z.cumulative, vec![0.0, 0.0, 0.0, 1.0]);
        assert!(loss_cdf(&[]).is_err());
        assert!(loss_cdf(&[-1.0]).is_err());
    }

    #[test]
    fn cdf_csv_keeps_last_point() {
        let c = loss_cdf(&(0..1000).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf, 10).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "fraction,cumulative_loss");
        assert_eq!(lines.len(), 11);
        assert_eq!(*lines.last().unwrap(), "1,1");
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            gamma: 0.6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("smooth_truncated".parse::<NucleiLoss>().unwrap(), NucleiLoss::SmoothTruncated);
        assert!("focal".parse::<NucleiLoss>().is_err());
    }
}
