//! Seeded synthetic markets for tests, benchmarks and demos.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::market_data::{MarketFrame, TECHNICAL_INDICATORS};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_tickers: usize,
    pub n_days: usize,
    /// Daily log drift, e.g. `0.002` for +0.2%/day.
    pub drift: f64,
    /// Standard deviation of the daily log noise.
    pub noise: f64,
    /// Noise accumulates (random walk) instead of scattering around the trend.
    pub random_walk: bool,
    pub start_price: f64,
    /// Also emit the fifteen financial-ratio columns.
    pub with_ratios: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_tickers: 2,
            n_days: 300,
            drift: 0.0005,
            noise: 0.01,
            random_walk: true,
            start_price: 100.0,
            with_ratios: true,
            seed: 0,
        }
    }
}

/// Civil date for a day count since 1970-01-01.
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let y = yoe + era * 400 + i64::from(m <= 2);
    (y, m, d)
}

/// `n` weekday dates starting on 2010-01-04, as ISO-8601 strings.
pub fn business_dates(n: usize) -> Vec<String> {
    // 2010-01-04 is a Monday, day 14_613 since the epoch
    let mut day = 14_613i64;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        // 1970-01-01 was a Thursday
        let weekday = (day + 3).rem_euclid(7);
        if weekday < 5 {
            let (y, m, d) = civil_from_days(day);
            out.push(format!("{y:04}-{m:02}-{d:02}"));
        }
        day += 1;
    }
    out
}

pub fn synthetic_frame(spec: &SyntheticSpec) -> Result<MarketFrame> {
    if spec.n_tickers == 0 || spec.n_days == 0 {
        return Err(Error::Parameter("synthetic market needs tickers and days".into()));
    }
    if !(spec.start_price > 0.0) || !(spec.noise >= 0.0) {
        return Err(Error::Parameter("start_price must be positive and noise non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (n, d) = (spec.n_days, spec.n_tickers);
    let mut close = vec![0.0; n * d];
    for i in 0..d {
        let mut walk = 0.0;
        for t in 0..n {
            let shock = spec.noise * normal.sample(&mut rng);
            let log_price = if spec.random_walk {
                walk += shock;
                spec.drift * t as f64 + walk
            } else {
                spec.drift * t as f64 + shock
            };
            close[t * d + i] = spec.start_price * (1.0 + 0.1 * i as f64) * log_price.exp();
        }
    }
    let mut open = vec![0.0; n * d];
    let mut high = vec![0.0; n * d];
    let mut low = vec![0.0; n * d];
    let mut volume = vec![0.0; n * d];
    for t in 0..n {
        for i in 0..d {
            let c = close[t * d + i];
            let o = if t == 0 { c } else { close[(t - 1) * d + i] };
            let spread = c * (0.002 + 0.003 * normal.sample(&mut rng).abs());
            open[t * d + i] = o;
            high[t * d + i] = c.max(o) + spread;
            low[t * d + i] = c.min(o) - spread;
            volume[t * d + i] = (1.0e6 * (1.0 + 0.2 * normal.sample(&mut rng))).abs().round();
        }
    }
    let mut columns = IndexMap::new();
    columns.insert("open".to_string(), open);
    columns.insert("high".to_string(), high);
    columns.insert("low".to_string(), low);
    columns.insert("close".to_string(), close);
    columns.insert("volume".to_string(), volume);
    if spec.with_ratios {
        for (k, name) in TECHNICAL_INDICATORS.iter().enumerate() {
            let mut values = vec![0.0; n * d];
            for i in 0..d {
                let level = 0.5 + k as f64 * 0.3 + i as f64 * 0.1;
                let mut x = level;
                for t in 0..n {
                    // ratios move slowly, like quarterly fundamentals
                    if t % 63 == 0 {
                        x = level * (1.0 + 0.1 * normal.sample(&mut rng));
                    }
                    values[t * d + i] = x;
                }
            }
            columns.insert(name.to_string(), values);
        }
    }
    let tickers = (0..d).map(|i| format!("T{i:02}")).collect();
    MarketFrame::from_dense(business_dates(n), tickers, columns)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dates_skip_weekends() {
        let dates = business_dates(6);
        assert_eq!(
            dates,
            ["2010-01-04", "2010-01-05", "2010-01-06", "2010-01-07", "2010-01-08", "2010-01-11"]
        );
    }

    #[test]
    fn same_seed_same_frame() {
        let spec = SyntheticSpec::default();
        assert_eq!(synthetic_frame(&spec).unwrap(), synthetic_frame(&spec).unwrap());
    }

    #[test]
    fn noiseless_trend_is_exact() {
        let spec = SyntheticSpec {
            n_tickers: 1,
            n_days: 5,
            drift: 0.01,
            noise: 0.0,
            with_ratios: false,
            ..SyntheticSpec::default()
        };
        let f = synthetic_frame(&spec).unwrap();
        let c = f.column("close").unwrap();
        assert!((c[4] / c[0] - (0.04f64).exp()).abs() < 1e-12);
    }
}
