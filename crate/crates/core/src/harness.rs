//! Experiments: one train/backtest run, the 24-cell grid, and report files.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_layout::{
    apply_layout, build_feature_vector, weeks_to_days, FeatureLayout, FeatureSchema, FeatureScaler, LayoutMode,
};
use crate::indicators::enrich;
use crate::market_data::{load_frame, split_at, split_frame, DatasetKind, MarketFrame};
use crate::policy::{CheckpointMeta, PolicyNetwork, Preset};
use crate::ppo::{train, PpoConfig, TrainingLog};
use crate::trading_env::{EnvConfig, PortfolioState, TradingEnv, TrajectoryRecord};

/// Observation windows swept by the grid, in weeks.
pub const WINDOW_WEEKS: [usize; 6] = [2, 4, 6, 8, 10, 12];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    pub kind: DatasetKind,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            path: None,
            kind: DatasetKind::Sma,
        }
    }
}

/// Dataset files for the two grid columns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub sma_path: Option<PathBuf>,
    pub technical_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub initial_amount: f64,
    pub hmax: u64,
    pub cost_rate: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let env = EnvConfig::default();
        Self {
            initial_amount: env.initial_amount,
            hmax: env.hmax,
            cost_rate: env.cost_rate,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Overrides `ppo.total_timesteps` when set.
    pub total_timesteps: Option<usize>,
}

/// Date boundaries, or a positional fraction when no dates are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_end: Option<String>,
    pub test_end: Option<String>,
    pub train_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            train_end: None,
            test_end: None,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub preset: Preset,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            preset: Preset::Adaptive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub grid: GridSection,
    pub layout: LayoutMode,
    pub window_weeks: usize,
    pub env: EnvSection,
    pub ppo: PpoConfig,
    pub train: TrainSection,
    pub split: SplitSection,
    pub policy: PolicySection,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            grid: GridSection::default(),
            layout: LayoutMode::Category,
            window_weeks: 2,
            env: EnvSection::default(),
            ppo: PpoConfig::default(),
            train: TrainSection::default(),
            split: SplitSection::default(),
            policy: PolicySection::default(),
            seed: 0,
            out_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        Self::from_toml_str(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !WINDOW_WEEKS.contains(&self.window_weeks) {
            return Err(Error::Config(format!(
                "window_weeks must be one of {WINDOW_WEEKS:?}, got {}",
                self.window_weeks
            )));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(Error::Config("split.train_fraction must lie in (0, 1)".into()));
        }
        self.env_config().validate()?;
        self.ppo_config().validate()
    }

    pub fn window_days(&self) -> usize {
        weeks_to_days(self.window_weeks)
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            initial_amount: self.env.initial_amount,
            hmax: self.env.hmax,
            cost_rate: self.env.cost_rate,
            window_days: self.window_days(),
            layout: self.layout,
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        let mut ppo = self.ppo.clone();
        if let Some(total) = self.train.total_timesteps {
            ppo.total_timesteps = total;
        }
        ppo
    }

    pub fn total_timesteps(&self) -> usize {
        self.ppo_config().total_timesteps
    }
}

/// `100 · (final / initial − 1)`.
pub fn cumulative_reward(initial: f64, final_value: f64) -> Result<f64> {
    if !(initial > 0.0) {
        return Err(Error::Parameter(format!("initial capital must be positive, got {initial}")));
    }
    Ok(100.0 * (final_value / initial - 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub cumulative_reward: f64,
    pub final_value: f64,
    /// Portfolio value on each date of the span.
    pub values: Vec<f64>,
}

/// Equal currency split across tickers at the first close, held to the end.
/// Fractional shares, no costs.
pub fn buy_and_hold_baseline(frame: &MarketFrame, initial: f64) -> Result<Baseline> {
    if frame.n_dates() == 0 {
        return Err(Error::Range("baseline span is empty".into()));
    }
    let close = frame.column("close").ok_or_else(|| Error::Schema("close".into()))?;
    let d = frame.n_tickers();
    let shares: Vec<f64> = close[..d].iter().map(|p| initial / d as f64 / p).collect();
    let values: Vec<f64> = close
        .chunks_exact(d)
        .map(|row| row.iter().zip(&shares).map(|(p, s)| p * s).sum())
        .collect();
    let final_value = *values.last().expect("nonempty");
    Ok(Baseline {
        cumulative_reward: cumulative_reward(initial, final_value)?,
        final_value,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub cumulative_reward: f64,
    pub initial_amount: f64,
    pub final_value: f64,
    /// Backtest reward of every step.
    pub episode_rewards: Vec<f64>,
    pub baseline_cumulative_reward: f64,
    pub training_timesteps: usize,
    /// Digest of the trained weights, identical before and after the backtest.
    pub policy_digest: String,
    /// Not part of the serialized report, so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Everything a single run produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub log: TrainingLog,
    pub trajectory: Vec<TrajectoryRecord>,
    pub tickers: Vec<String>,
    pub policy: PolicyNetwork,
}

/// Enriched train and test frames plus the scaler fit on the train part.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: MarketFrame,
    pub test: MarketFrame,
    pub schema: FeatureSchema,
    pub scaler: FeatureScaler,
}

pub fn prepare_data(raw: &MarketFrame, kind: DatasetKind, config: &ExperimentConfig) -> Result<PreparedData> {
    let enriched = enrich(raw, kind)?;
    let (train, test) = match (&config.split.train_end, &config.split.test_end) {
        (Some(a), Some(b)) => split_frame(&enriched, a, b)?,
        (Some(a), None) => {
            let last = enriched.dates().last().cloned().unwrap_or_default();
            split_frame(&enriched, a, &last)?
        }
        _ => {
            let n = enriched.n_dates();
            let train_len = ((n as f64) * config.split.train_fraction).round() as usize;
            split_at(&enriched, train_len.clamp(1, n.saturating_sub(1).max(1)))?
        }
    };
    if train.n_dates() < 2 || test.n_dates() < 2 {
        return Err(Error::Range(format!(
            "split leaves {} train and {} test dates; each needs at least two",
            train.n_dates(),
            test.n_dates()
        )));
    }
    let schema = FeatureSchema::for_kind(kind, raw.n_tickers());
    let scaler = FeatureScaler::fit(&train, &schema, config.env.initial_amount, config.env.hmax as f64)?;
    Ok(PreparedData {
        train,
        test,
        schema,
        scaler,
    })
}

/// Unscaled per-day feature vectors of an enriched frame, for an idle
/// portfolio holding `initial_amount` in cash. Returns laid-out column
/// names and one row per date.
pub fn feature_matrix(
    enriched: &MarketFrame,
    kind: DatasetKind,
    layout: LayoutMode,
    initial_amount: f64,
) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let d = enriched.n_tickers();
    let schema = FeatureSchema::for_kind(kind, d);
    let order = FeatureLayout::for_mode(layout, &schema);
    let columns: Vec<&[f64]> = schema
        .indicator_names
        .iter()
        .map(|name| enriched.column(name).ok_or_else(|| Error::Schema(name.clone())))
        .collect::<Result<_>>()?;
    let close = enriched.column("close").ok_or_else(|| Error::Schema("close".into()))?;
    let mut names = vec![String::new(); schema.width()];
    for (name, &p) in schema.column_names(enriched.tickers())?.into_iter().zip(&order.permutation) {
        names[p] = name;
    }
    let rows = (0..enriched.n_dates())
        .map(|t| {
            let portfolio = PortfolioState {
                balance: initial_amount,
                prices: close[t * d..(t + 1) * d].to_vec(),
                holdings: vec![0; d],
                day_index: t,
            };
            let features: Vec<Vec<f64>> = (0..d).map(|i| columns.iter().map(|c| c[t * d + i]).collect()).collect();
            apply_layout(&build_feature_vector(&portfolio, &features, &schema)?, &order)
        })
        .collect::<Result<_>>()?;
    Ok((names, rows))
}

/// Builds the policy for `config` on `data`'s geometry.
pub fn build_policy(data: &PreparedData, config: &ExperimentConfig) -> Result<PolicyNetwork> {
    let shape = [1, config.window_days(), data.schema.width()];
    PolicyNetwork::new(shape, data.schema.n_stocks, config.policy.preset, config.seed)
}

/// Runs the policy with mean actions over `frame` once.
pub fn backtest(
    policy: &mut PolicyNetwork,
    frame: &MarketFrame,
    data: &PreparedData,
    env_config: &EnvConfig,
) -> Result<Vec<TrajectoryRecord>> {
    let mut env = TradingEnv::new(frame, data.schema.clone(), data.scaler.clone(), env_config.clone())?;
    let mut obs = env.reset()?;
    while !env.is_done() {
        let (mean, _) = policy.predict(&obs)?;
        let action: Vec<f64> = mean.iter().map(|u| u.tanh()).collect();
        obs = env.step(&action)?.0;
    }
    Ok(env.trajectory().to_vec())
}

/// Trains on the train split and backtests on the test split of `raw`.
pub fn run_experiment_on(raw: &MarketFrame, config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let started = Instant::now();
    let kind = config.dataset.kind;
    let data = prepare_data(raw, kind, config)?;
    let env_config = config.env_config();
    let ppo = config.ppo_config();
    let mut policy = build_policy(&data, config)?;
    let log = if ppo.total_timesteps == 0 {
        TrainingLog::default()
    } else {
        let make_env = |_| TradingEnv::new(&data.train, data.schema.clone(), data.scaler.clone(), env_config.clone());
        train(make_env, &mut policy, &ppo, config.seed)?
    };
    evaluate(&data, config, policy, log, started)
}

/// Backtests an already trained policy on the test split of `raw`.
pub fn backtest_policy(raw: &MarketFrame, config: &ExperimentConfig, policy: PolicyNetwork) -> Result<ExperimentOutcome> {
    config.validate()?;
    let started = Instant::now();
    let data = prepare_data(raw, config.dataset.kind, config)?;
    let expected = [1, config.window_days(), data.schema.width()];
    if policy.input_shape() != expected || policy.n_actions() != data.schema.n_stocks {
        return Err(Error::Dimension(format!(
            "checkpoint expects input {:?} with {} actions, the data gives {expected:?} with {}",
            policy.input_shape(),
            policy.n_actions(),
            data.schema.n_stocks
        )));
    }
    evaluate(&data, config, policy, TrainingLog::default(), started)
}

fn evaluate(
    data: &PreparedData,
    config: &ExperimentConfig,
    mut policy: PolicyNetwork,
    log: TrainingLog,
    started: Instant,
) -> Result<ExperimentOutcome> {
    let kind = config.dataset.kind;
    let env_config = config.env_config();
    let digest = policy.state_digest();
    let trajectory = backtest(&mut policy, &data.test, data, &env_config)?;
    if policy.state_digest() != digest {
        return Err(Error::State("backtest modified the policy".into()));
    }
    let initial = env_config.initial_amount;
    let final_value = trajectory.last().map(|r| r.value).unwrap_or(initial);
    let baseline = buy_and_hold_baseline(&data.test, initial)?;
    let report = MetricsReport {
        config: config.clone(),
        cumulative_reward: cumulative_reward(initial, final_value)?,
        initial_amount: initial,
        final_value,
        episode_rewards: trajectory.iter().skip(1).map(|r| r.reward).collect(),
        baseline_cumulative_reward: baseline.cumulative_reward,
        training_timesteps: log.rows.last().map(|r| r.timesteps).unwrap_or(0),
        policy_digest: digest,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    log::info!(
        "{} {} {}w: cumulative reward {:.3}% (baseline {:.3}%) in {:.1}s",
        kind,
        config.layout,
        config.window_weeks,
        report.cumulative_reward,
        report.baseline_cumulative_reward,
        report.wall_clock_seconds
    );
    Ok(ExperimentOutcome {
        report,
        log,
        trajectory,
        tickers: data.test.tickers().to_vec(),
        policy,
    })
}

/// Loads `dataset.path` and runs [`run_experiment_on`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let path = config
        .dataset
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("dataset.path is not set".into()))?;
    let frame = load_frame(path, config.dataset.kind)?;
    let ctx = format!(
        "experiment {} {} {}w seed {}",
        config.dataset.kind, config.layout, config.window_weeks, config.seed
    );
    run_experiment_on(&frame, config).map_err(|e| e.context(ctx))
}

/// Writes the report, training log, trajectory and checkpoint of one run.
pub fn write_outcome(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let report = serde_json::to_string_pretty(&outcome.report)
        .map_err(|e| Error::State(format!("report serialization: {e}")))?;
    fs::write(dir.join("report.json"), report + "\n")?;
    outcome
        .log
        .write_csv(BufWriter::new(fs::File::create(dir.join("training_log.csv"))?))?;
    crate::trading_env::write_trajectory(
        &outcome.trajectory,
        &outcome.tickers,
        BufWriter::new(fs::File::create(dir.join("trajectory.csv"))?),
    )?;
    let meta = CheckpointMeta {
        layout: Some(outcome.report.config.layout),
        kind: Some(outcome.report.config.dataset.kind),
    };
    outcome
        .policy
        .save(BufWriter::new(fs::File::create(dir.join("policy.ckpt"))?), &meta)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub weeks: usize,
    pub kind: DatasetKind,
    pub layout: LayoutMode,
}

impl CellKey {
    /// File-friendly name such as `sma_company_4w`.
    pub fn slug(&self) -> String {
        format!("{}_{}_{}w", self.kind, self.layout, self.weeks)
    }

    /// Column of the grid table this cell belongs to.
    pub fn column(&self) -> String {
        format!("{}_{}", self.kind, self.layout)
    }
}

/// Grid order: weeks, then dataset, then layout (company-major first, as in
/// the published table).
pub fn grid_keys() -> Vec<CellKey> {
    let mut keys = Vec::with_capacity(24);
    for weeks in WINDOW_WEEKS {
        for kind in [DatasetKind::Sma, DatasetKind::Technical] {
            for layout in [LayoutMode::Company, LayoutMode::Category] {
                keys.push(CellKey { weeks, kind, layout });
            }
        }
    }
    keys
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub key: CellKey,
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub log: Option<TrainingLog>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn cell(&self, key: &CellKey) -> Option<&GridCell> {
        self.cells.iter().find(|c| &c.key == key)
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::State(format!("grid serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("grid report: {e}")))
    }
}

/// Raw frames for the two dataset columns of the grid.
#[derive(Debug, Clone)]
pub struct GridData {
    pub sma: MarketFrame,
    pub technical: MarketFrame,
}

impl GridData {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let pick = |kind: DatasetKind, path: &Option<PathBuf>| -> Result<MarketFrame> {
            let path = path
                .clone()
                .or_else(|| (config.dataset.kind == kind).then(|| config.dataset.path.clone()).flatten())
                .ok_or_else(|| Error::Config(format!("no dataset path for the {kind} grid column")))?;
            load_frame(&path, kind).map_err(|e| e.context(path.display().to_string()))
        };
        Ok(Self {
            sma: pick(DatasetKind::Sma, &config.grid.sma_path)?,
            technical: pick(DatasetKind::Technical, &config.grid.technical_path)?,
        })
    }

    fn frame(&self, kind: DatasetKind) -> &MarketFrame {
        match kind {
            DatasetKind::Sma => &self.sma,
            DatasetKind::Technical => &self.technical,
        }
    }
}

/// Runs all 24 cells on at most `jobs` threads. Cell `i` uses seed
/// `base.seed + i`; a failing cell is recorded and the rest continue.
pub fn run_grid_on(data: &GridData, base: &ExperimentConfig, jobs: usize) -> GridReport {
    let keys = grid_keys();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<GridCell>>> = Mutex::new(vec![None; keys.len()]);
    let workers = jobs.clamp(1, keys.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&key) = keys.get(i) else { break };
                let mut config = base.clone();
                config.seed = base.seed.wrapping_add(i as u64);
                config.window_weeks = key.weeks;
                config.dataset.kind = key.kind;
                config.layout = key.layout;
                let result = run_experiment_on(data.frame(key.kind), &config);
                let cell = match result {
                    Ok(out) => GridCell {
                        key,
                        seed: config.seed,
                        report: Some(out.report),
                        log: Some(out.log),
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("cell {} failed: {e}", key.slug());
                        GridCell {
                            key,
                            seed: config.seed,
                            report: None,
                            log: None,
                            error: Some(e.to_string()),
                        }
                    }
                };
                slots.lock().expect("no worker panicked")[i] = Some(cell);
            });
        }
    });
    let cells = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|c| c.expect("every cell visited"))
        .collect();
    GridReport { cells }
}

pub fn run_grid(base: &ExperimentConfig, jobs: usize) -> Result<GridReport> {
    let data = GridData::load(base)?;
    Ok(run_grid_on(&data, base, jobs))
}

const GRID_COLUMNS: [&str; 4] = ["sma_company", "sma_category", "technical_company", "technical_category"];

fn fmt_value(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".to_string())
}

/// `weeks` rows × (dataset, layout) columns of cumulative reward.
pub fn grid_table(grid: &GridReport) -> String {
    let mut out = String::from("weeks");
    for c in GRID_COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    let mut weeks: Vec<usize> = grid.cells.iter().map(|c| c.key.weeks).collect();
    weeks.sort_unstable();
    weeks.dedup();
    for w in weeks {
        out.push_str(&w.to_string());
        for col in GRID_COLUMNS {
            let value = grid
                .cells
                .iter()
                .find(|c| c.key.weeks == w && c.key.column() == col)
                .and_then(|c| c.report.as_ref())
                .map(|r| r.cumulative_reward);
            out.push(',');
            out.push_str(&fmt_value(value));
        }
        out.push('\n');
    }
    out
}

/// Grouped bar chart: one group per window, one bar per layout.
fn bar_chart_svg(title: &str, rows: &[(usize, Option<f64>, Option<f64>)]) -> String {
    let (width, height, margin) = (640.0, 360.0, 50.0);
    let values: Vec<f64> = rows.iter().flat_map(|r| [r.1, r.2]).flatten().collect();
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let min = values.iter().cloned().fold(0.0f64, f64::min);
    let span = if max - min > 0.0 { max - min } else { 1.0 };
    let plot_h = height - 2.0 * margin;
    let y_of = |v: f64| margin + (max - v) / span * plot_h;
    let zero = y_of(0.0);
    let group_w = (width - 2.0 * margin) / rows.len().max(1) as f64;
    let bar_w = group_w * 0.35;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#,
        width / 2.0
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{margin}" y1="{zero:.2}" x2="{}" y2="{zero:.2}" stroke="#333"/>"##,
        width - margin
    );
    for (g, (weeks, company, category)) in rows.iter().enumerate() {
        let x0 = margin + g as f64 * group_w + group_w * 0.15;
        for (j, (value, color)) in [(company, "#1f77b4"), (category, "#ff7f0e")].into_iter().enumerate() {
            if let Some(v) = value {
                let y = y_of(*v);
                let (top, h) = if y < zero { (y, zero - y) } else { (zero, y - zero) };
                let _ = writeln!(
                    svg,
                    r#"<rect x="{:.2}" y="{top:.2}" width="{bar_w:.2}" height="{h:.2}" fill="{color}"><title>{v:.4}</title></rect>"#,
                    x0 + j as f64 * bar_w
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{weeks}w</text>"#,
            x0 + bar_w,
            height - margin + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r##"<text x="{margin}" y="{}" font-family="sans-serif" font-size="12" fill="#1f77b4">company-major</text>"##,
        height - 10.0
    );
    let _ = writeln!(
        svg,
        r##"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="#ff7f0e">category-major</text>"##,
        margin + 140.0,
        height - 10.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// Writes `grid.csv`, `grid.json`, per-cell logs and per-dataset plot data.
/// Returns the paths written.
pub fn emit_report(grid: &GridReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if grid.cells.is_empty() {
        return Err(Error::State("grid report is empty".into()));
    }
    let logs_dir = out_dir.join("logs");
    fs::create_dir_all(&logs_dir)?;
    let mut written = Vec::new();
    let mut put = |path: PathBuf, contents: String| -> Result<()> {
        fs::write(&path, contents).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        written.push(path);
        Ok(())
    };
    put(out_dir.join("grid.csv"), grid_table(grid))?;
    put(out_dir.join("grid.json"), grid.to_json()? + "\n")?;
    for cell in &grid.cells {
        if let Some(log) = &cell.log {
            let mut buf = Vec::new();
            log.write_csv(&mut buf)?;
            put(
                logs_dir.join(format!("{}.csv", cell.key.slug())),
                String::from_utf8(buf).expect("csv is utf-8"),
            )?;
        }
    }
    for kind in [DatasetKind::Sma, DatasetKind::Technical] {
        let mut weeks: Vec<usize> = grid
            .cells
            .iter()
            .filter(|c| c.key.kind == kind)
            .map(|c| c.key.weeks)
            .collect();
        weeks.sort_unstable();
        weeks.dedup();
        if weeks.is_empty() {
            continue;
        }
        let value = |w: usize, layout: LayoutMode| {
            grid.cell(&CellKey { weeks: w, kind, layout })
                .and_then(|c| c.report.as_ref())
                .map(|r| r.cumulative_reward)
        };
        let rows: Vec<(usize, Option<f64>, Option<f64>)> = weeks
            .iter()
            .map(|&w| (w, value(w, LayoutMode::Company), value(w, LayoutMode::Category)))
            .collect();
        let mut csv = String::from("weeks,company,category\n");
        for (w, a, b) in &rows {
            let _ = writeln!(csv, "{w},{},{}", fmt_value(*a), fmt_value(*b));
        }
        put(out_dir.join(format!("plot_{kind}.csv")), csv)?;
        let title = format!("Cumulative reward (%), {kind} dataset");
        put(out_dir.join(format!("plot_{kind}.svg")), bar_chart_svg(&title, &rows))?;
    }
    Ok(written)
}
