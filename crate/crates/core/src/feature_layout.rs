//! Daily feature vectors, column layouts and the stacked `T × F` observation.
//!
//! The canonical (category-major) vector for `D` companies and `K`
//! indicators is
//!
//! ```text
//! [amount, price_1..D, hold_1..D, ind¹_1..D, ..., indᴷ_1..D]
//! ```
//!
//! The company-major layout groups each company's `2 + K` columns
//! contiguously while keeping the amount at position 0.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{DatasetKind, MarketFrame};
use crate::trading_env::PortfolioState;

/// Trading days per calendar week.
pub const DAYS_PER_WEEK: usize = 5;

pub fn weeks_to_days(weeks: usize) -> usize {
    weeks * DAYS_PER_WEEK
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub n_stocks: usize,
    pub indicator_names: Vec<String>,
}

impl FeatureSchema {
    pub fn new(n_stocks: usize, indicator_names: Vec<String>) -> Self {
        Self {
            n_stocks,
            indicator_names,
        }
    }

    pub fn for_kind(kind: DatasetKind, n_stocks: usize) -> Self {
        Self::new(
            n_stocks,
            kind.indicator_names().iter().map(|s| s.to_string()).collect(),
        )
    }

    /// A schema with `k` anonymous indicators, handy for sizing.
    pub fn anonymous(n_stocks: usize, k: usize) -> Self {
        Self::new(n_stocks, (0..k).map(|i| format!("ind{i}")).collect())
    }

    pub fn n_indicators(&self) -> usize {
        self.indicator_names.len()
    }

    /// `1 + (2 + K) · D`
    pub fn width(&self) -> usize {
        1 + (2 + self.n_indicators()) * self.n_stocks
    }

    /// Category-major column names: `amount`, `price_<tic>`, `holdings_<tic>`, `<indicator>_<tic>`.
    pub fn column_names(&self, tickers: &[String]) -> Result<Vec<String>> {
        if tickers.len() != self.n_stocks {
            return Err(Error::Dimension(format!(
                "{} tickers for a schema of {}",
                tickers.len(),
                self.n_stocks
            )));
        }
        let mut names = vec!["amount".to_string()];
        names.extend(tickers.iter().map(|t| format!("price_{t}")));
        names.extend(tickers.iter().map(|t| format!("holdings_{t}")));
        for ind in &self.indicator_names {
            names.extend(tickers.iter().map(|t| format!("{ind}_{t}")));
        }
        Ok(names)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutMode {
    /// All prices, then all holdings, then each indicator across companies.
    Category,
    /// Each company's price, holding and indicators side by side.
    Company,
}

impl LayoutMode {
    pub const ALL: [LayoutMode; 2] = [LayoutMode::Category, LayoutMode::Company];

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutMode::Category => "category",
            LayoutMode::Company => "company",
        }
    }
}

impl fmt::Display for LayoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "category" => Ok(LayoutMode::Category),
            "company" => Ok(LayoutMode::Company),
            other => Err(Error::Parameter(format!("unknown layout `{other}`"))),
        }
    }
}

/// A column ordering: `permutation[i]` is where category-major column `i` lands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    pub mode: LayoutMode,
    pub permutation: Vec<usize>,
}

impl FeatureLayout {
    pub fn identity(width: usize) -> Self {
        Self {
            mode: LayoutMode::Category,
            permutation: (0..width).collect(),
        }
    }

    pub fn for_mode(mode: LayoutMode, schema: &FeatureSchema) -> Self {
        match mode {
            LayoutMode::Category => Self::identity(schema.width()),
            LayoutMode::Company => company_major_permutation(schema),
        }
    }

    pub fn width(&self) -> usize {
        self.permutation.len()
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.permutation.len()];
        for (i, &p) in self.permutation.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }
}

pub fn company_major_permutation(schema: &FeatureSchema) -> FeatureLayout {
    let d = schema.n_stocks;
    let group = 2 + schema.n_indicators();
    let mut permutation = vec![0; schema.width()];
    for c in 0..d {
        let base = 1 + c * group;
        permutation[1 + c] = base;
        permutation[1 + d + c] = base + 1;
        for k in 0..schema.n_indicators() {
            permutation[1 + (2 + k) * d + c] = base + 2 + k;
        }
    }
    FeatureLayout {
        mode: LayoutMode::Company,
        permutation,
    }
}

/// `out[permutation[i]] = vector[i]`
pub fn apply_layout(vector: &[f64], layout: &FeatureLayout) -> Result<Vec<f64>> {
    if vector.len() != layout.width() {
        return Err(Error::Dimension(format!(
            "feature vector has {} columns, layout expects {}",
            vector.len(),
            layout.width()
        )));
    }
    let mut out = vec![0.0; vector.len()];
    for (&v, &p) in vector.iter().zip(&layout.permutation) {
        out[p] = v;
    }
    Ok(out)
}

/// Inverse of [`apply_layout`].
pub fn unapply_layout(vector: &[f64], layout: &FeatureLayout) -> Result<Vec<f64>> {
    if vector.len() != layout.width() {
        return Err(Error::Dimension(format!(
            "feature vector has {} columns, layout expects {}",
            vector.len(),
            layout.width()
        )));
    }
    Ok(layout.permutation.iter().map(|&p| vector[p]).collect())
}

/// Category-major feature vector for one trading day.
///
/// `features[i]` holds the `K` indicator values of company `i`.
pub fn build_feature_vector(
    portfolio: &PortfolioState,
    features: &[Vec<f64>],
    schema: &FeatureSchema,
) -> Result<Vec<f64>> {
    let d = schema.n_stocks;
    let k = schema.n_indicators();
    if portfolio.prices.len() != d || portfolio.holdings.len() != d {
        return Err(Error::Dimension(format!(
            "portfolio has {} prices and {} holdings, schema expects {d}",
            portfolio.prices.len(),
            portfolio.holdings.len()
        )));
    }
    if features.len() != d {
        return Err(Error::Schema(format!(
            "indicators for {} of {d} tickers",
            features.len()
        )));
    }
    if let Some((i, f)) = features.iter().enumerate().find(|(_, f)| f.len() != k) {
        return Err(Error::Schema(format!(
            "ticker {i} has {} of {k} indicators",
            f.len()
        )));
    }
    let mut out = Vec::with_capacity(schema.width());
    out.push(portfolio.balance);
    out.extend_from_slice(&portfolio.prices);
    out.extend(portfolio.holdings.iter().map(|&h| h as f64));
    for j in 0..k {
        out.extend(features.iter().map(|f| f[j]));
    }
    Ok(out)
}

/// `T` stacked laid-out feature vectors, oldest first.
///
/// Rows are reference counted so consecutive windows share storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    rows: Vec<Arc<[f64]>>,
    width: usize,
}

impl Observation {
    pub fn from_rows(rows: Vec<Arc<[f64]>>) -> Result<Self> {
        let width = rows.first().map(|r| r.len()).ok_or_else(|| {
            Error::Parameter("observation needs at least one row".into())
        })?;
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Dimension("observation rows differ in width".into()));
        }
        Ok(Self { rows, width })
    }

    pub fn window_days(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(|r| &r[..])
    }

    /// Copies the matrix row-major into `out` (length `T · F`).
    pub fn write_into(&self, out: &mut [f64]) {
        for (chunk, row) in out.chunks_exact_mut(self.width).zip(&self.rows) {
            chunk.copy_from_slice(row);
        }
    }

    pub fn to_matrix(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len() * self.width];
        self.write_into(&mut out);
        out
    }
}

/// Stacks the last `window` vectors of `history`, repeating the earliest
/// vector on top when the history is shorter than the window.
pub fn build_observation(history: &[Arc<[f64]>], window: usize) -> Result<Observation> {
    if window == 0 {
        return Err(Error::Parameter("observation window must be positive".into()));
    }
    let first = history
        .first()
        .ok_or_else(|| Error::Parameter("empty history".into()))?;
    let rows = if history.len() >= window {
        history[history.len() - window..].to_vec()
    } else {
        let pad = window - history.len();
        std::iter::repeat_n(first.clone(), pad)
            .chain(history.iter().cloned())
            .collect()
    };
    Observation::from_rows(rows)
}

/// Scales a category-major vector into the range the network sees.
///
/// Amount is divided by the starting capital, prices by each ticker's first
/// training close, holdings by `hmax`; indicators are standardized with
/// per-column statistics from the training frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub initial_amount: f64,
    pub hmax: f64,
    pub price_base: Vec<f64>,
    /// `[k * D + i]` for indicator `k`, ticker `i`.
    pub indicator_mean: Vec<f64>,
    pub indicator_std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(
        train: &MarketFrame,
        schema: &FeatureSchema,
        initial_amount: f64,
        hmax: f64,
    ) -> Result<Self> {
        let d = schema.n_stocks;
        if train.n_tickers() != d {
            return Err(Error::Dimension(format!(
                "frame has {} tickers, schema expects {d}",
                train.n_tickers()
            )));
        }
        if train.n_dates() == 0 {
            return Err(Error::Parameter("cannot fit scaler on an empty frame".into()));
        }
        let close = train.column("close").ok_or_else(|| Error::Schema("close".into()))?;
        let price_base = close[..d].to_vec();
        let mut mean = Vec::with_capacity(d * schema.n_indicators());
        let mut std = Vec::with_capacity(d * schema.n_indicators());
        for name in &schema.indicator_names {
            for i in 0..d {
                let series = train
                    .series(name, i)
                    .ok_or_else(|| Error::Schema(name.clone()))?;
                let n = series.len() as f64;
                let m = series.iter().sum::<f64>() / n;
                let var = series.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
                mean.push(m);
                std.push(if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 });
            }
        }
        Ok(Self {
            initial_amount,
            hmax,
            price_base,
            indicator_mean: mean,
            indicator_std: std,
        })
    }

    /// Leaves vectors unchanged.
    pub fn identity(n_stocks: usize, n_indicators: usize) -> Self {
        Self {
            initial_amount: 1.0,
            hmax: 1.0,
            price_base: vec![1.0; n_stocks],
            indicator_mean: vec![0.0; n_stocks * n_indicators],
            indicator_std: vec![1.0; n_stocks * n_indicators],
        }
    }

    pub fn transform(&self, vector: &mut [f64]) {
        let d = self.price_base.len();
        vector[0] /= self.initial_amount;
        for i in 0..d {
            vector[1 + i] /= self.price_base[i];
            vector[1 + d + i] /= self.hmax;
        }
        for (j, v) in vector[1 + 2 * d..].iter_mut().enumerate() {
            *v = (*v - self.indicator_mean[j]) / self.indicator_std[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn portfolio(balance: f64, prices: Vec<f64>, holdings: Vec<u64>) -> PortfolioState {
        PortfolioState {
            balance,
            prices,
            holdings,
            day_index: 0,
        }
    }

    #[test]
    fn feature_vector_direct_layout() {
        let p = portfolio(5.0, vec![2.0], vec![3]);
        let v = build_feature_vector(&p, &[vec![7.0]], &FeatureSchema::anonymous(1, 1)).unwrap();
        assert_eq!(v, vec![5.0, 2.0, 3.0, 7.0]);
    }

    #[test]
    fn feature_vector_widths() {
        // 1 + (2 + 8) * 29 and 1 + (2 + 15) * 30
        assert_eq!(FeatureSchema::for_kind(DatasetKind::Sma, 29).width(), 291);
        assert_eq!(FeatureSchema::for_kind(DatasetKind::Technical, 30).width(), 511);
        let schema = FeatureSchema::for_kind(DatasetKind::Technical, 30);
        let p = portfolio(1.0, vec![1.0; 30], vec![0; 30]);
        let v = build_feature_vector(&p, &vec![vec![0.0; 15]; 30], &schema).unwrap();
        assert_eq!(v.len(), 511);
    }

    #[test]
    fn feature_vector_missing_indicator() {
        let p = portfolio(1.0, vec![1.0, 1.0], vec![0, 0]);
        let schema = FeatureSchema::anonymous(2, 2);
        let err = build_feature_vector(&p, &[vec![1.0, 2.0], vec![1.0]], &schema).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn company_major_small_example() {
        let schema = FeatureSchema::anonymous(2, 2);
        let layout = company_major_permutation(&schema);
        // amt p1 p2 h1 h2 a1 a2 b1 b2
        let v: Vec<f64> = (0..9).map(f64::from).collect();
        let out = apply_layout(&v, &layout).unwrap();
        // amt p1 h1 a1 b1 p2 h2 a2 b2
        assert_eq!(out, vec![0.0, 1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0]);
        assert_eq!(unapply_layout(&out, &layout).unwrap(), v);
    }

    #[test]
    fn single_company_is_identity() {
        for k in 1..6 {
            let layout = company_major_permutation(&FeatureSchema::anonymous(1, k));
            assert_eq!(layout.permutation, (0..k + 3).collect::<Vec<_>>());
        }
    }

    #[test]
    fn layout_length_mismatch() {
        let layout = FeatureLayout::identity(4);
        assert!(matches!(apply_layout(&[1.0; 3], &layout), Err(Error::Dimension(_))));
    }

    #[test]
    fn observation_suffix_and_padding() {
        let history: Vec<Arc<[f64]>> = (0..60).map(|i| Arc::from(vec![i as f64, 0.5])).collect();
        let obs = build_observation(&history, 10).unwrap();
        assert_eq!(obs.window_days(), 10);
        assert_eq!(obs.row(0)[0], 50.0);
        assert_eq!(obs.row(9)[0], 59.0);

        let obs = build_observation(&history[..3], 5).unwrap();
        let firsts: Vec<f64> = obs.rows().map(|r| r[0]).collect();
        assert_eq!(firsts, vec![0.0, 0.0, 0.0, 1.0, 2.0]);

        let obs = build_observation(&history, 1).unwrap();
        assert_eq!(obs.to_matrix(), vec![59.0, 0.5]);

        assert!(build_observation(&history, 0).is_err());
        assert!(build_observation(&[], 3).is_err());
    }

    #[test]
    fn weeks_map_to_trading_days() {
        let days: Vec<usize> = [2, 4, 6, 8, 10, 12].iter().map(|&w| weeks_to_days(w)).collect();
        assert_eq!(days, vec![10, 20, 30, 40, 50, 60]);
    }

    #[test]
    fn parse_layout_mode() {
        assert_eq!("company".parse::<LayoutMode>().unwrap(), LayoutMode::Company);
        assert_eq!("category".parse::<LayoutMode>().unwrap(), LayoutMode::Category);
        assert!("diagonal".parse::<LayoutMode>().is_err());
    }
}
