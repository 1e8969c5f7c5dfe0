//! Forecast accuracy metrics and naive reference forecasters.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn check(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.is_empty() || y.len() != yhat.len() {
        return Err(Error::contract(format!(
            "metric needs equal non-empty lengths, got {} and {}",
            y.len(),
            yhat.len()
        )));
    }
    Ok(())
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Percent, in `[0, 200]`. A step with `y = ŷ = 0` is undefined.
pub fn smape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    let mut acc = 0.0;
    for (h, (a, b)) in y.iter().zip(yhat).enumerate() {
        let den = a.abs() + b.abs();
        if den == 0.0 {
            return Err(Error::UndefinedMetric(format!("smape: |y|+|yhat| = 0 at step {h}")));
        }
        acc += (a - b).abs() / den;
    }
    Ok(200.0 * acc / y.len() as f64)
}

pub fn mape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    let mut acc = 0.0;
    for (h, (a, b)) in y.iter().zip(yhat).enumerate() {
        if *a == 0.0 {
            return Err(Error::UndefinedMetric(format!("mape: y = 0 at step {h}")));
        }
        acc += (a - b).abs() / a.abs();
    }
    Ok(100.0 * acc / y.len() as f64)
}

/// Scale denominator is the mean seasonal difference of `y` over the
/// forecast window itself, not over the in-sample history.
pub fn mase(y: &[f64], yhat: &[f64], s: usize) -> Result<f64> {
    check(y, yhat)?;
    let h = y.len();
    if s == 0 || s >= h {
        return Err(Error::contract(format!("mase needs H > s >= 1, got H={h}, s={s}")));
    }
    let num = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / h as f64;
    let den = (s..h).map(|j| (y[j] - y[j - s]).abs()).sum::<f64>() / (h - s) as f64;
    if den == 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "mase: seasonal differences at lag {s} are all zero"
        )));
    }
    Ok(num / den)
}

pub fn owa(smape: f64, mase: f64, smape_ref: f64, mase_ref: f64) -> Result<f64> {
    if !(smape_ref > 0.0 && mase_ref > 0.0) {
        return Err(Error::UndefinedMetric(format!(
            "owa needs positive references, got smape_ref={smape_ref}, mase_ref={mase_ref}"
        )));
    }
    Ok(0.5 * (smape / smape_ref + mase / mase_ref))
}

pub fn naive_repeat_last(history: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let last = *history
        .last()
        .ok_or_else(|| Error::InsufficientData("naive forecast needs a non-empty history".into()))?;
    Ok(vec![last; horizon])
}

/// `ŷ_{t+h} = y_{t+h-s·k}` with `k` the smallest count that lands in the history.
pub fn seasonal_naive(history: &[f64], horizon: usize, s: usize) -> Result<Vec<f64>> {
    if s == 0 || history.len() < s {
        return Err(Error::InsufficientData(format!(
            "seasonal naive with period {s} needs at least {s} history values, got {}",
            history.len()
        )));
    }
    let season = &history[history.len() - s..];
    Ok((0..horizon).map(|h| season[h % s]).collect())
}

/// Aggregated metrics over a set of forecasts. Undefined values are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub horizon: usize,
    pub periodicity: usize,
    pub count: usize,
    pub mse: f64,
    pub mae: f64,
    pub smape: Option<f64>,
    pub mape: Option<f64>,
    pub mase: Option<f64>,
    pub owa: Option<f64>,
}

/// One scored forecast: truth, model prediction, and the repeat-last reference.
#[derive(Debug, Clone)]
pub struct Scored<'a> {
    pub truth: &'a [f64],
    pub prediction: &'a [f64],
    pub reference: &'a [f64],
}

fn mean_defined<F>(items: &[Scored<'_>], f: F) -> Result<Option<f64>>
where
    F: Fn(&Scored<'_>) -> Result<f64>,
{
    let mut acc = 0.0;
    for s in items {
        match f(s) {
            Ok(v) => acc += v,
            Err(Error::UndefinedMetric(_)) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(acc / items.len() as f64))
}

impl MetricReport {
    /// Averages per-forecast metrics. A metric that is undefined on any
    /// forecast is reported as `None`. OWA is relative to the references.
    pub fn aggregate(items: &[Scored<'_>], periodicity: usize) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InsufficientData("no forecasts to score".into()))?;
        let horizon = first.truth.len();
        let n = items.len() as f64;
        let mut mse_acc = 0.0;
        let mut mae_acc = 0.0;
        for s in items {
            mse_acc += mse(s.truth, s.prediction)?;
            mae_acc += mae(s.truth, s.prediction)?;
        }
        let smape_v = mean_defined(items, |s| smape(s.truth, s.prediction))?;
        let mape_v = mean_defined(items, |s| mape(s.truth, s.prediction))?;
        let (mase_v, mase_ref) = if horizon > periodicity {
            (
                mean_defined(items, |s| mase(s.truth, s.prediction, periodicity))?,
                mean_defined(items, |s| mase(s.truth, s.reference, periodicity))?,
            )
        } else {
            (None, None)
        };
        let smape_ref = mean_defined(items, |s| smape(s.truth, s.reference))?;
        let owa_v = match (smape_v, mase_v, smape_ref, mase_ref) {
            (Some(a), Some(b), Some(c), Some(d)) => owa(a, b, c, d).ok(),
            _ => None,
        };
        Ok(Self {
            horizon,
            periodicity,
            count: items.len(),
            mse: mse_acc / n,
            mae: mae_acc / n,
            smape: smape_v,
            mape: mape_v,
            mase: mase_v,
            owa: owa_v,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!((mse(&[1.0, 2.0, 3.0], &[2.0; 3]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((mae(&[1.0, 2.0, 3.0], &[2.0; 3]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(smape(&[1.0], &[3.0]).unwrap(), 100.0);
        assert_eq!(smape(&[2.0, -1.0], &[2.0, -1.0]).unwrap(), 0.0);
        assert_eq!(mape(&[2.0], &[1.0]).unwrap(), 50.0);
        assert_eq!(mase(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 4.0, 5.0], 1).unwrap(), 1.0);
        assert_eq!(mase(&[1.0, 5.0, 2.0], &[1.0, 5.0, 2.0], 1).unwrap(), 0.0);
        assert_eq!(owa(3.0, 2.0, 3.0, 2.0).unwrap(), 1.0);
        assert_eq!(owa(1.5, 1.0, 3.0, 2.0).unwrap(), 0.5);
        assert!((owa(10.0, 1.6, 12.0, 2.0).unwrap() - 0.816_666_666_666_666_7).abs() < 1e-12);
    }

    #[test]
    fn undefined_cases_raise() {
        assert!(matches!(mape(&[0.0, 1.0], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(mase(&[2.0; 5], &[1.0; 5], 1), Err(Error::UndefinedMetric(_))));
        assert!(matches!(smape(&[0.0], &[0.0]), Err(Error::UndefinedMetric(_))));
        assert!(mase(&[1.0, 2.0], &[1.0, 2.0], 2).is_err());
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn naive_forecasters() {
        assert_eq!(naive_repeat_last(&[1.0, 2.0, 7.0], 3).unwrap(), vec![7.0; 3]);
        assert_eq!(
            seasonal_naive(&[1.0, 2.0, 3.0, 4.0, 5.0], 5, 2).unwrap(),
            vec![4.0, 5.0, 4.0, 5.0, 4.0]
        );
        assert!(naive_repeat_last(&[], 2).is_err());
    }

    #[test]
    fn report_marks_undefined_metrics() {
        let truth = [0.0, 1.0, 2.0, 3.0];
        let pred = [0.5, 1.5, 2.5, 3.5];
        let reference = [3.0; 4];
        let items = [Scored {
            truth: &truth,
            prediction: &pred,
            reference: &reference,
        }];
        let r = MetricReport::aggregate(&items, 1).unwrap();
        assert_eq!(r.mse, 0.25);
        assert!(r.mape.is_none());
        assert!(r.smape.is_some() && r.mase.is_some() && r.owa.is_some());
    }
}
