//! Losses and evaluation metrics.
//!
//! The settling-time protocol excludes the first part of each window from
//! losses and scalar metrics while the decay states charge up; `settle_bin`
//! is the first bin index that counts.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// First bin whose start lies at or after the settling time.
pub fn settle_bin(settle_us: u64, bin_us: u64) -> usize {
    settle_us.div_ceil(bin_us) as usize
}

/// Mean absolute error over cells where `valid` is 1 and the bin index is at
/// least `settle`; 0 when no cell qualifies.
///
/// Shapes: (D, T) predictions with a (T) mask, or (W, H, C, T) predictions
/// with a (W, H, T) mask shared across channels.
pub fn loss_l1(pred: &Tensor, gt: &Tensor, valid: &Tensor, settle: usize) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "loss_l1",
            format!("{:?} vs {:?}", pred.shape(), gt.shape()),
        ));
    }
    let (mut total, mut count) = (0.0, 0usize);
    match (pred.shape(), valid.shape()) {
        ([d, t], [tv]) if t == tv => {
            for ti in settle..*t {
                if valid.data()[ti] == 0.0 {
                    continue;
                }
                for j in 0..*d {
                    total += (pred.data()[j * t + ti] - gt.data()[j * t + ti]).abs();
                    count += 1;
                }
            }
        }
        ([w, h, c, t], [wv, hv, tv]) if w == wv && h == hv && t == tv => {
            for x in 0..*w {
                for y in 0..*h {
                    for ti in settle..*t {
                        if valid.data()[(x * h + y) * t + ti] == 0.0 {
                            continue;
                        }
                        for ci in 0..*c {
                            let i = ((x * h + y) * c + ci) * t + ti;
                            total += (pred.data()[i] - gt.data()[i]).abs();
                            count += 1;
                        }
                    }
                }
            }
        }
        (p, v) => {
            return Err(Error::shape(
                "loss_l1",
                format!("prediction {p:?} with mask {v:?}"),
            ))
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Root mean squared error of (D, T) predictions over post-settle bins.
pub fn metric_rmse(pred: &Tensor, gt: &Tensor, settle: usize) -> Result<f64> {
    let [d, t] = match (pred.shape(), gt.shape()) {
        ([a, b], [c, e]) if a == c && b == e => [*a, *b],
        (p, g) => {
            return Err(Error::shape(
                "metric_rmse",
                format!("{p:?} vs {g:?}"),
            ))
        }
    };
    if settle >= t {
        return Err(Error::Metric {
            msg: format!("settle bin {settle} leaves no bins of {t}"),
        });
    }
    let mut total = 0.0;
    for j in 0..d {
        for ti in settle..t {
            let e = pred.data()[j * t + ti] - gt.data()[j * t + ti];
            total += e * e;
        }
    }
    Ok((total / (d * (t - settle)) as f64).sqrt())
}

/// RMSE of a constant baseline prediction against (D, T) ground truth.
pub fn rmse_constant(baseline: &[f64], gt: &Tensor, settle: usize) -> Result<f64> {
    let [d, t] = match gt.shape() {
        [a, b] => [*a, *b],
        s => return Err(Error::shape("rmse_constant", format!("{s:?}"))),
    };
    if baseline.len() != d {
        return Err(Error::shape(
            "rmse_constant",
            format!("baseline dim {} vs {d}", baseline.len()),
        ));
    }
    let pred = {
        let mut p = Tensor::zeros(&[d, t]);
        for j in 0..d {
            for ti in 0..t {
                p.data_mut()[j * t + ti] = baseline[j];
            }
        }
        p
    };
    metric_rmse(&pred, gt, settle)
}

/// RMSE ratio against a baseline predictor; the baseline scores exactly 1.
pub fn relative_error(rmse_pred: f64, rmse_baseline: f64) -> Result<f64> {
    if rmse_baseline == 0.0 {
        return Err(Error::Metric {
            msg: "baseline RMSE is zero".into(),
        });
    }
    Ok(rmse_pred / rmse_baseline)
}

/// Per-axis mean of ground-truth (D, T) tensors over post-settle bins —
/// the constant the mean predictor emits.
pub fn mean_ground_truth(gts: &[&Tensor], settle: usize) -> Result<Vec<f64>> {
    let first = gts.first().ok_or(Error::Metric {
        msg: "empty ground-truth set".into(),
    })?;
    let [d, _] = match first.shape() {
        [a, b] => [*a, *b],
        s => return Err(Error::shape("mean_ground_truth", format!("{s:?}"))),
    };
    let mut sums = vec![0.0; d];
    let mut n = 0usize;
    for gt in gts {
        let t = gt.shape()[1];
        for j in 0..d {
            for ti in settle..t {
                sums[j] += gt.data()[j * t + ti];
            }
        }
        n += t.saturating_sub(settle);
    }
    if n == 0 {
        return Err(Error::Metric {
            msg: "no post-settle bins".into(),
        });
    }
    Ok(sums.iter().map(|s| s / n as f64).collect())
}

/// Average endpoint error: mean Euclidean norm of the flow difference over
/// valid pixels. Flows are (W, H, 2, T); the mask is (W, H, T).
pub fn metric_aee(pred: &Tensor, gt: &Tensor, valid: &Tensor) -> Result<f64> {
    let [w, h, c, t] = match (pred.shape(), gt.shape()) {
        (p, g) if p == g => match p {
            [a, b, c, d] => [*a, *b, *c, *d],
            s => return Err(Error::shape("metric_aee", format!("{s:?}"))),
        },
        (p, g) => {
            return Err(Error::shape(
                "metric_aee",
                format!("{p:?} vs {g:?}"),
            ))
        }
    };
    if c != 2 {
        return Err(Error::shape("metric_aee", "flow needs 2 channels"));
    }
    if valid.shape() != [w, h, t] {
        return Err(Error::shape(
            "metric_aee",
            format!("mask {:?} for flow {:?}", valid.shape(), pred.shape()),
        ));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for x in 0..w {
        for y in 0..h {
            for ti in 0..t {
                if valid.data()[(x * h + y) * t + ti] == 0.0 {
                    continue;
                }
                let du = pred.at4(x, y, 0, ti) - gt.at4(x, y, 0, ti);
                let dv = pred.at4(x, y, 1, ti) - gt.at4(x, y, 1, ti);
                total += (du * du + dv * dv).sqrt();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
