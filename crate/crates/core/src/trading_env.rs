//! The stock-trading MDP.
//!
//! State is cash, integer share holdings and the day's close prices. An
//! action is a vector in `[-1, 1]^D` scaled by `hmax` into share orders;
//! sells execute before buys, buys run in ticker order under the cash
//! constraint. The reward is the change in portfolio value `pᵀh + b`
//! from before the trade to the next day's close.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_layout::{
    apply_layout, build_feature_vector, build_observation, FeatureLayout, FeatureScaler,
    FeatureSchema, LayoutMode, Observation,
};
use crate::market_data::MarketFrame;

#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioState {
    pub balance: f64,
    pub prices: Vec<f64>,
    pub holdings: Vec<u64>,
    pub day_index: usize,
}

impl PortfolioState {
    pub fn value(&self) -> f64 {
        portfolio_value(self)
    }
}

/// `pᵀh + b`
pub fn portfolio_value(state: &PortfolioState) -> f64 {
    state
        .prices
        .iter()
        .zip(&state.holdings)
        .map(|(p, &h)| p * h as f64)
        .sum::<f64>()
        + state.balance
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub initial_amount: f64,
    /// Maximum shares traded per ticker per step.
    pub hmax: u64,
    /// Proportional transaction cost, charged on both sides.
    pub cost_rate: f64,
    pub window_days: usize,
    pub layout: LayoutMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            initial_amount: 1_000_000.0,
            hmax: 100,
            cost_rate: 0.001,
            window_days: 10,
            layout: LayoutMode::Category,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_amount > 0.0) {
            return Err(Error::Parameter("initial_amount must be positive".into()));
        }
        if self.hmax < 1 {
            return Err(Error::Parameter("hmax must be at least 1".into()));
        }
        if !(self.cost_rate >= 0.0) {
            return Err(Error::Parameter("cost_rate must be non-negative".into()));
        }
        if self.window_days < 1 {
            return Err(Error::Parameter("window_days must be at least 1".into()));
        }
        Ok(())
    }
}

/// Applies one action at the state's prices.
pub fn execute_trades(
    state: &PortfolioState,
    action: &[f64],
    hmax: u64,
    cost_rate: f64,
) -> Result<PortfolioState> {
    if action.len() != state.prices.len() {
        return Err(Error::Action(format!(
            "action has {} components, expected {}",
            action.len(),
            state.prices.len()
        )));
    }
    if let Some(bad) = action.iter().find(|a| !a.is_finite() || a.abs() > 1.0) {
        return Err(Error::Action(format!("component {bad} outside [-1, 1]")));
    }
    let orders: Vec<i64> = action
        .iter()
        .map(|a| (a * hmax as f64).round() as i64)
        .collect();
    let mut next = state.clone();

    for (i, &order) in orders.iter().enumerate() {
        if order < 0 {
            let shares = order.unsigned_abs().min(next.holdings[i]);
            next.holdings[i] -= shares;
            next.balance += shares as f64 * next.prices[i] * (1.0 - cost_rate);
        }
    }
    for (i, &order) in orders.iter().enumerate() {
        if order > 0 {
            let unit_cost = next.prices[i] * (1.0 + cost_rate);
            let affordable = (next.balance / unit_cost).floor().max(0.0) as u64;
            let shares = (order as u64).min(affordable);
            if shares == 0 {
                continue;
            }
            next.holdings[i] += shares;
            next.balance = (next.balance - shares as f64 * unit_cost).max(0.0);
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub day: usize,
    pub value: f64,
    pub reward: f64,
    pub cash: f64,
    pub holdings: Vec<u64>,
}

/// Frame-derived arrays shared by every environment over the same data.
#[derive(Debug)]
struct MarketTape {
    prices: Vec<f64>,
    /// `[date][ticker][indicator]`
    features: Vec<f64>,
    n_dates: usize,
    n_stocks: usize,
    n_indicators: usize,
}

#[derive(Debug, Clone)]
pub struct TradingEnv {
    tape: Arc<MarketTape>,
    tickers: Vec<String>,
    schema: FeatureSchema,
    layout: FeatureLayout,
    scaler: FeatureScaler,
    config: EnvConfig,
    state: PortfolioState,
    history: VecDeque<Arc<[f64]>>,
    trajectory: Vec<TrajectoryRecord>,
    done: bool,
}

impl TradingEnv {
    pub fn new(
        frame: &MarketFrame,
        schema: FeatureSchema,
        scaler: FeatureScaler,
        config: EnvConfig,
    ) -> Result<Self> {
        config.validate()?;
        if !frame.is_dense() {
            return Err(Error::Parameter("environment needs an aligned frame".into()));
        }
        if frame.n_dates() < 2 {
            return Err(Error::Parameter("an episode needs at least two dates".into()));
        }
        if frame.n_tickers() != schema.n_stocks {
            return Err(Error::Dimension(format!(
                "frame has {} tickers, schema expects {}",
                frame.n_tickers(),
                schema.n_stocks
            )));
        }
        let n_dates = frame.n_dates();
        let d = schema.n_stocks;
        let k = schema.n_indicators();
        let prices = frame
            .column("close")
            .ok_or_else(|| Error::Schema("close".into()))?
            .to_vec();
        if prices.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Parameter("close prices must be positive".into()));
        }
        let columns: Vec<&[f64]> = schema
            .indicator_names
            .iter()
            .map(|name| frame.column(name).ok_or_else(|| Error::Schema(name.clone())))
            .collect::<Result<_>>()?;
        let mut features = Vec::with_capacity(n_dates * d * k);
        for t in 0..n_dates {
            for i in 0..d {
                features.extend(columns.iter().map(|c| c[t * d + i]));
            }
        }
        let layout = FeatureLayout::for_mode(config.layout, &schema);
        let state = PortfolioState {
            balance: config.initial_amount,
            prices: prices[..d].to_vec(),
            holdings: vec![0; d],
            day_index: 0,
        };
        Ok(Self {
            tape: Arc::new(MarketTape {
                prices,
                features,
                n_dates,
                n_stocks: d,
                n_indicators: k,
            }),
            tickers: frame.tickers().to_vec(),
            schema,
            layout,
            scaler,
            config,
            state,
            history: VecDeque::new(),
            trajectory: Vec::new(),
            done: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn state(&self) -> &PortfolioState {
        &self.state
    }

    pub fn n_stocks(&self) -> usize {
        self.tape.n_stocks
    }

    pub fn n_days(&self) -> usize {
        self.tape.n_dates
    }

    /// `(T, F)` of the observations this environment emits.
    pub fn observation_shape(&self) -> (usize, usize) {
        (self.config.window_days, self.schema.width())
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn trajectory(&self) -> &[TrajectoryRecord] {
        &self.trajectory
    }

    fn prices_at(&self, day: usize) -> &[f64] {
        let d = self.tape.n_stocks;
        &self.tape.prices[day * d..(day + 1) * d]
    }

    fn features_at(&self, day: usize) -> Vec<Vec<f64>> {
        let d = self.tape.n_stocks;
        let k = self.tape.n_indicators;
        let base = day * d * k;
        (0..d)
            .map(|i| self.tape.features[base + i * k..base + (i + 1) * k].to_vec())
            .collect()
    }

    fn push_row(&mut self) -> Result<()> {
        let mut row = build_feature_vector(
            &self.state,
            &self.features_at(self.state.day_index),
            &self.schema,
        )?;
        self.scaler.transform(&mut row);
        let row = apply_layout(&row, &self.layout)?;
        self.history.push_back(Arc::from(row));
        while self.history.len() > self.config.window_days {
            self.history.pop_front();
        }
        Ok(())
    }

    pub fn observation(&self) -> Result<Observation> {
        let rows: Vec<Arc<[f64]>> = self.history.iter().cloned().collect();
        build_observation(&rows, self.config.window_days)
    }

    pub fn reset(&mut self) -> Result<Observation> {
        let d = self.tape.n_stocks;
        self.state = PortfolioState {
            balance: self.config.initial_amount,
            prices: self.prices_at(0).to_vec(),
            holdings: vec![0; d],
            day_index: 0,
        };
        self.done = false;
        self.history.clear();
        self.trajectory.clear();
        self.trajectory.push(TrajectoryRecord {
            day: 0,
            value: self.state.value(),
            reward: 0.0,
            cash: self.state.balance,
            holdings: self.state.holdings.clone(),
        });
        self.push_row()?;
        self.observation()
    }

    /// Trades at today's prices, then moves to the next trading day.
    pub fn step(&mut self, action: &[f64]) -> Result<(Observation, StepOutcome)> {
        if self.done {
            return Err(Error::Episode("step called after the episode ended".into()));
        }
        if self.history.is_empty() {
            return Err(Error::Episode("step called before reset".into()));
        }
        let before = self.state.value();
        let mut next = execute_trades(&self.state, action, self.config.hmax, self.config.cost_rate)?;
        next.day_index += 1;
        next.prices = self.prices_at(next.day_index).to_vec();
        let reward = next.value() - before;
        self.state = next;
        self.done = self.state.day_index + 1 >= self.tape.n_dates;
        self.trajectory.push(TrajectoryRecord {
            day: self.state.day_index,
            value: self.state.value(),
            reward,
            cash: self.state.balance,
            holdings: self.state.holdings.clone(),
        });
        self.push_row()?;
        Ok((self.observation()?, StepOutcome { reward, done: self.done }))
    }

    /// `day,value,reward,cash,<ticker>...`
    pub fn write_trajectory<W: Write>(&self, writer: W) -> Result<()> {
        write_trajectory(&self.trajectory, &self.tickers, writer)
    }
}

pub fn write_trajectory<W: Write>(
    records: &[TrajectoryRecord],
    tickers: &[String],
    writer: W,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec!["day".to_string(), "value".into(), "reward".into(), "cash".into()];
    header.extend(tickers.iter().cloned());
    out.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.day.to_string(),
            r.value.to_string(),
            r.reward.to_string(),
            r.cash.to_string(),
        ];
        row.extend(r.holdings.iter().map(u64::to_string));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
