//! Technical indicators for the SMA dataset.
//!
//! All rolling statistics use an expanding window until `window` samples are
//! available, so every output is defined from the first date onwards.
//! Wilder smoothing (RSI, DX) uses the running mean for the first `window`
//! samples and the recursive `s += (x - s) / window` update afterwards.

use log::warn;

use crate::error::{Error, Result};
use crate::market_data::{DatasetKind, MarketFrame, SMA_INDICATORS, TECHNICAL_INDICATORS};

#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorSeries {
    pub name: String,
    pub values: Vec<f64>,
    /// Leading samples computed from fewer than a full window.
    pub warmup: usize,
}

impl IndicatorSeries {
    fn new(name: impl Into<String>, values: Vec<f64>, warmup: usize) -> Self {
        let warmup = warmup.min(values.len());
        Self {
            name: name.into(),
            values,
            warmup,
        }
    }
}

fn check_window(window: usize, what: &str) -> Result<()> {
    if window == 0 {
        return Err(Error::Parameter(format!("{what} window must be positive")));
    }
    Ok(())
}

fn check_nonempty(series: &[f64]) -> Result<()> {
    if series.is_empty() {
        return Err(Error::Parameter("series is empty".into()));
    }
    Ok(())
}

/// Rolling statistics over the trailing `window` values, expanding during warmup.
fn rolling<F>(series: &[f64], window: usize, mut stat: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    (0..series.len())
        .map(|t| {
            let start = (t + 1).saturating_sub(window);
            stat(&series[start..=t])
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sma(close: &[f64], window: usize) -> Result<IndicatorSeries> {
    check_window(window, "sma")?;
    check_nonempty(close)?;
    Ok(IndicatorSeries::new(
        format!("close_{window}_sma"),
        rolling(close, window, mean),
        window - 1,
    ))
}

/// Exponential smoothing with `alpha = 2 / (span + 1)`, seeded with the first value.
pub fn ema(series: &[f64], span: usize) -> Result<Vec<f64>> {
    check_window(span, "ema")?;
    let alpha = 2.0 / (span as f64 + 1.0);
    let mut out = Vec::with_capacity(series.len());
    let mut state = match series.first() {
        Some(&v) => v,
        None => return Ok(out),
    };
    for &x in series {
        state += alpha * (x - state);
        out.push(state);
    }
    Ok(out)
}

pub fn macd(close: &[f64]) -> Result<IndicatorSeries> {
    check_nonempty(close)?;
    let fast = ema(close, 12)?;
    let slow = ema(close, 26)?;
    let values = fast.iter().zip(&slow).map(|(f, s)| f - s).collect();
    Ok(IndicatorSeries::new("macd", values, 25))
}

/// Upper and lower bands: rolling mean ± `k` rolling population std.
pub fn bollinger(
    close: &[f64],
    window: usize,
    k: f64,
) -> Result<(IndicatorSeries, IndicatorSeries)> {
    check_window(window, "bollinger")?;
    check_nonempty(close)?;
    let upper = rolling(close, window, |w| {
        let m = mean(w);
        let var = w.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / w.len() as f64;
        m + k * var.sqrt()
    });
    let lower = rolling(close, window, |w| {
        let m = mean(w);
        let var = w.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / w.len() as f64;
        m - k * var.sqrt()
    });
    Ok((
        IndicatorSeries::new("boll_ub", upper, window - 1),
        IndicatorSeries::new("boll_lb", lower, window - 1),
    ))
}

/// Wilder smoothing of `xs[1..]`; index 0 is left at zero.
fn wilder(xs: &[f64], window: usize) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    let mut state = 0.0;
    for j in 1..xs.len() {
        let n = j.min(window) as f64;
        state += (xs[j] - state) / n;
        out[j] = state;
    }
    out
}

pub fn rsi(close: &[f64], window: usize) -> Result<IndicatorSeries> {
    check_window(window, "rsi")?;
    check_nonempty(close)?;
    let mut gains = vec![0.0; close.len()];
    let mut losses = vec![0.0; close.len()];
    for t in 1..close.len() {
        let diff = close[t] - close[t - 1];
        gains[t] = diff.max(0.0);
        losses[t] = (-diff).max(0.0);
    }
    let avg_gain = wilder(&gains, window);
    let avg_loss = wilder(&losses, window);
    let values = avg_gain
        .iter()
        .zip(&avg_loss)
        .map(|(&g, &l)| rsi_from_averages(g, l))
        .collect();
    Ok(IndicatorSeries::new(format!("rsi_{window}"), values, window))
}

fn rsi_from_averages(gain: f64, loss: f64) -> f64 {
    if loss == 0.0 {
        if gain > 0.0 {
            100.0
        } else {
            50.0
        }
    } else {
        100.0 - 100.0 / (1.0 + gain / loss)
    }
}

fn check_hlc(high: &[f64], low: &[f64], close: &[f64]) -> Result<()> {
    if high.len() != low.len() || high.len() != close.len() {
        return Err(Error::Parameter(format!(
            "high/low/close lengths differ: {}/{}/{}",
            high.len(),
            low.len(),
            close.len()
        )));
    }
    Ok(())
}

pub fn cci(high: &[f64], low: &[f64], close: &[f64], window: usize) -> Result<IndicatorSeries> {
    check_hlc(high, low, close)?;
    check_window(window, "cci")?;
    check_nonempty(close)?;
    let typical: Vec<f64> = (0..close.len())
        .map(|t| (high[t] + low[t] + close[t]) / 3.0)
        .collect();
    let values = rolling(&typical, window, |w| {
        let m = mean(w);
        let mad = w.iter().map(|x| (x - m).abs()).sum::<f64>() / w.len() as f64;
        let last = w[w.len() - 1];
        if mad == 0.0 {
            0.0
        } else {
            (last - m) / (0.015 * mad)
        }
    });
    Ok(IndicatorSeries::new(format!("cci_{window}"), values, window - 1))
}

pub fn dx(high: &[f64], low: &[f64], close: &[f64], window: usize) -> Result<IndicatorSeries> {
    check_hlc(high, low, close)?;
    check_window(window, "dx")?;
    if close.len() < 2 {
        return Err(Error::Parameter("dx needs at least two samples".into()));
    }
    let n = close.len();
    let mut plus_dm = vec![0.0; n];
    let mut minus_dm = vec![0.0; n];
    let mut true_range = vec![0.0; n];
    for t in 1..n {
        let up = high[t] - high[t - 1];
        let down = low[t - 1] - low[t];
        plus_dm[t] = if up > down && up > 0.0 { up } else { 0.0 };
        minus_dm[t] = if down > up && down > 0.0 { down } else { 0.0 };
        true_range[t] = (high[t] - low[t])
            .max((high[t] - close[t - 1]).abs())
            .max((low[t] - close[t - 1]).abs());
    }
    let plus = wilder(&plus_dm, window);
    let minus = wilder(&minus_dm, window);
    let range = wilder(&true_range, window);
    let values = (0..n)
        .map(|t| dx_from_smoothed(plus[t], minus[t], range[t]))
        .collect();
    Ok(IndicatorSeries::new(format!("dx_{window}"), values, window))
}

fn dx_from_smoothed(plus: f64, minus: f64, range: f64) -> f64 {
    if range == 0.0 {
        return 0.0;
    }
    let plus_di = 100.0 * plus / range;
    let minus_di = 100.0 * minus / range;
    let total = plus_di + minus_di;
    if total == 0.0 {
        0.0
    } else {
        100.0 * (plus_di - minus_di).abs() / total
    }
}

/// Output of [`turbulence`]: one market-wide value per date.
#[derive(Debug, Clone, PartialEq)]
pub struct Turbulence {
    pub series: IndicatorSeries,
    /// Set when the frame is too short for any date to get a value.
    pub insufficient_history: bool,
}

/// Mahalanobis distance of each date's cross-sectional close-to-close
/// return vector from the mean and sample covariance of the previous
/// `lookback` return vectors. Singular covariances use the pseudo-inverse.
pub fn turbulence(frame: &MarketFrame, lookback: usize) -> Result<Turbulence> {
    check_window(lookback, "turbulence")?;
    let n_dates = frame.n_dates();
    let d = frame.n_tickers();
    let close = frame
        .column("close")
        .ok_or_else(|| Error::Schema("close".into()))?;
    let mut values = vec![0.0; n_dates];
    // returns[t] is defined for t >= 1; date t needs returns t-lookback..t-1.
    let first = lookback + 1;
    if n_dates <= first {
        warn!("turbulence: {n_dates} dates is not enough for lookback {lookback}");
        return Ok(Turbulence {
            series: IndicatorSeries::new("turbulence", values, n_dates),
            insufficient_history: true,
        });
    }
    let returns: Vec<Vec<f64>> = (0..n_dates)
        .map(|t| {
            if t == 0 {
                vec![0.0; d]
            } else {
                (0..d)
                    .map(|i| close[t * d + i] / close[(t - 1) * d + i] - 1.0)
                    .collect()
            }
        })
        .collect();
    for (t, value) in values.iter_mut().enumerate().skip(first) {
        let history = &returns[t - lookback..t];
        let mu: Vec<f64> = (0..d)
            .map(|i| history.iter().map(|r| r[i]).sum::<f64>() / lookback as f64)
            .collect();
        let mut cov = vec![0.0; d * d];
        let denom = (lookback.max(2) - 1) as f64;
        for r in history {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (r[i] - mu[i]) * (r[j] - mu[j]);
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= denom);
        let dev: Vec<f64> = (0..d).map(|i| returns[t][i] - mu[i]).collect();
        *value = mahalanobis_pinv(&cov, &dev, d);
    }
    Ok(Turbulence {
        series: IndicatorSeries::new("turbulence", values, first),
        insufficient_history: false,
    })
}

/// `devᵀ Σ⁺ dev` via a symmetric eigendecomposition.
fn mahalanobis_pinv(cov: &[f64], dev: &[f64], d: usize) -> f64 {
    let (eigenvalues, eigenvectors) = symmetric_eigen(cov, d);
    let largest = eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    // Returns are O(1e-2), so variances below 1e-18 are rounding noise.
    let cutoff = (largest * d as f64 * 1e-12).max(1e-18);
    let mut total = 0.0;
    for k in 0..d {
        let lambda = eigenvalues[k];
        if lambda.abs() <= cutoff || lambda == 0.0 {
            continue;
        }
        let proj: f64 = (0..d).map(|i| eigenvectors[i * d + k] * dev[i]).sum();
        total += proj * proj / lambda;
    }
    total.max(0.0)
}

/// Cyclic Jacobi rotations. Returns eigenvalues and column eigenvectors (row-major).
fn symmetric_eigen(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum();
        if off <= scale * 1e-30 || off == 0.0 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

/// Default turbulence lookback: one trading year.
pub const TURBULENCE_LOOKBACK: usize = 252;

/// Adds the dataset's derived columns, leaving existing ones untouched.
///
/// SMA frames gain the eight per-company indicators and, when the history
/// allows it, a market-wide `turbulence` column. Technical frames must
/// already carry all fifteen ratio columns.
pub fn enrich(frame: &MarketFrame, kind: DatasetKind) -> Result<MarketFrame> {
    for base in crate::market_data::BASE_COLUMNS {
        if !frame.has_column(base) {
            return Err(Error::Schema(base.to_string()));
        }
    }
    let mut out = frame.clone();
    match kind {
        DatasetKind::Technical => {
            for name in TECHNICAL_INDICATORS {
                if !frame.has_column(name) {
                    return Err(Error::Schema(name.to_string()));
                }
            }
        }
        DatasetKind::Sma => {
            for ticker in 0..frame.n_tickers() {
                let series = |name: &str| frame.series(name, ticker).unwrap_or_default();
                let close = series("close");
                let high = series("high");
                let low = series("low");
                for name in SMA_INDICATORS {
                    if frame.has_column(name) {
                        continue;
                    }
                    let values = match name {
                        "macd" => macd(&close)?.values,
                        "boll_ub" => bollinger(&close, 20, 2.0)?.0.values,
                        "boll_lb" => bollinger(&close, 20, 2.0)?.1.values,
                        "rsi_30" => rsi(&close, 30)?.values,
                        "cci_30" => cci(&high, &low, &close, 30)?.values,
                        "dx_30" if close.len() >= 2 => dx(&high, &low, &close, 30)?.values,
                        "dx_30" => vec![0.0; close.len()],
                        "close_30_sma" => sma(&close, 30)?.values,
                        "close_60_sma" => sma(&close, 60)?.values,
                        _ => unreachable!("unknown SMA indicator {name}"),
                    };
                    out.set_series(name, ticker, &values)?;
                }
            }
            if !frame.has_column("turbulence") && frame.n_dates() > TURBULENCE_LOOKBACK + 1 {
                let turb = turbulence(frame, TURBULENCE_LOOKBACK)?;
                let d = frame.n_tickers();
                let spread = turb
                    .series
                    .values
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, d))
                    .collect();
                out.insert_column("turbulence", spread)?;
            }
        }
    }
    Ok(out)
}
