//! Deep-RL trading lab: market data and indicators, a trading environment,
//! a small autodiff engine, a CNN actor-critic trained with PPO, and the
//! experiment grid over observation windows and feature layouts.

pub mod error;
pub mod feature_layout;
pub mod harness;
pub mod indicators;
pub mod market_data;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod synthetic;
pub mod trading_env;

pub use error::{Error, Result};
pub use feature_layout::{FeatureLayout, FeatureScaler, FeatureSchema, LayoutMode, Observation};
pub use harness::{
    CellKey, ExperimentConfig, ExperimentOutcome, GridReport, MetricsReport,
};
pub use market_data::{DatasetKind, MarketFrame};
pub use policy::{PolicyNetwork, Preset};
pub use ppo::{PpoConfig, RolloutBuffer, TrainingLog};
pub use trading_env::{EnvConfig, PortfolioState, TradingEnv};
