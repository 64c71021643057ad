use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use winlab::harness::{
    backtest_policy, emit_report, feature_matrix, grid_table, run_experiment, run_grid, write_outcome,
};
use winlab::indicators::enrich;
use winlab::market_data::{align_calendar, load_frame};
use winlab::policy::{describe, Preset, TABLE_EXACT_INPUT};
use winlab::{DatasetKind, ExperimentConfig, FeatureSchema, GridReport, LayoutMode, PolicyNetwork};

#[derive(Parser)]
#[command(name = "winlab", version, about = "CNN-PPO stock trading with a tunable observation window")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Validate and calendar-align a market CSV, writing the canonical frame.
    Ingest(Common),
    /// Enrich a frame and dump its per-day feature vectors under a layout.
    Features(Common),
    /// Train on the train split and backtest on the test split.
    Train(Common),
    /// Backtest a saved checkpoint on the test split.
    Backtest {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train` (policy.ckpt).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run all 24 (weeks, dataset, layout) cells and write the report.
    Grid(Common),
    /// Re-emit report files from a stored grid.json.
    Report {
        #[command(flatten)]
        common: Common,
        /// grid.json written by `grid`.
        #[arg(long)]
        from: PathBuf,
    },
    /// Print the extractor's shape and parameter chain.
    Shapes {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "table_exact")]
        preset: Preset,
        /// Input rows T; defaults to the table input or 5 × weeks.
        #[arg(long)]
        window: Option<usize>,
        /// Input columns F; defaults to the table input or the dataset width.
        #[arg(long)]
        width: Option<usize>,
        /// Tickers used to derive F when --width is absent.
        #[arg(long, default_value_t = 29)]
        stocks: usize,
    },
}

/// Flags shared by every verb. Each overrides the matching config key.
#[derive(Args, Default)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Market CSV (dataset.path).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    kind: Option<DatasetKind>,
    #[arg(long)]
    layout: Option<LayoutMode>,
    /// Observation window in weeks (window_weeks).
    #[arg(long)]
    weeks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the grid.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory, or output file for ingest/features.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    print_config: bool,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,

    #[arg(long, help_heading = "Grid")]
    sma_dataset: Option<PathBuf>,
    #[arg(long, help_heading = "Grid")]
    technical_dataset: Option<PathBuf>,

    #[arg(long, help_heading = "Environment")]
    initial_amount: Option<f64>,
    #[arg(long, help_heading = "Environment")]
    hmax: Option<u64>,
    #[arg(long, help_heading = "Environment")]
    cost_rate: Option<f64>,

    /// Training budget (train.total_timesteps).
    #[arg(long, help_heading = "Training")]
    timesteps: Option<usize>,
    #[arg(long, help_heading = "Training")]
    clip_eps: Option<f64>,
    #[arg(long, help_heading = "Training")]
    gamma: Option<f64>,
    #[arg(long, help_heading = "Training")]
    gae_lambda: Option<f64>,
    #[arg(long, help_heading = "Training")]
    epochs: Option<usize>,
    #[arg(long, help_heading = "Training")]
    minibatch_size: Option<usize>,
    #[arg(long, help_heading = "Training")]
    learning_rate: Option<f64>,
    #[arg(long, help_heading = "Training")]
    entropy_coef: Option<f64>,
    #[arg(long, help_heading = "Training")]
    value_coef: Option<f64>,
    #[arg(long, help_heading = "Training")]
    max_grad_norm: Option<f64>,
    #[arg(long, help_heading = "Training")]
    n_steps: Option<usize>,
    #[arg(long, help_heading = "Training")]
    n_envs: Option<usize>,
    #[arg(long, help_heading = "Training")]
    reward_scale: Option<f64>,
    #[arg(long, help_heading = "Training")]
    dropout_in_updates: Option<bool>,

    #[arg(long, help_heading = "Split")]
    train_end: Option<String>,
    #[arg(long, help_heading = "Split")]
    test_end: Option<String>,
    #[arg(long, help_heading = "Split")]
    train_fraction: Option<f64>,

    /// Extractor preset for train (policy.preset).
    #[arg(long, help_heading = "Policy")]
    policy_preset: Option<Preset>,
}

macro_rules! set {
    ($flag:expr => $target:expr) => {
        if let Some(v) = $flag.clone() {
            $target = v;
        }
    };
}

impl Common {
    /// File values first, then every flag that was given.
    fn resolve(&self) -> winlab::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if self.dataset.is_some() {
            c.dataset.path = self.dataset.clone();
        }
        set!(self.kind => c.dataset.kind);
        set!(self.layout => c.layout);
        set!(self.weeks => c.window_weeks);
        set!(self.seed => c.seed);
        set!(self.out => c.out_dir);
        if self.sma_dataset.is_some() {
            c.grid.sma_path = self.sma_dataset.clone();
        }
        if self.technical_dataset.is_some() {
            c.grid.technical_path = self.technical_dataset.clone();
        }
        set!(self.initial_amount => c.env.initial_amount);
        set!(self.hmax => c.env.hmax);
        set!(self.cost_rate => c.env.cost_rate);
        if self.timesteps.is_some() {
            c.train.total_timesteps = self.timesteps;
        }
        set!(self.clip_eps => c.ppo.clip_eps);
        set!(self.gamma => c.ppo.gamma);
        set!(self.gae_lambda => c.ppo.gae_lambda);
        set!(self.epochs => c.ppo.epochs);
        set!(self.minibatch_size => c.ppo.minibatch_size);
        set!(self.learning_rate => c.ppo.learning_rate);
        set!(self.entropy_coef => c.ppo.entropy_coef);
        set!(self.value_coef => c.ppo.value_coef);
        set!(self.max_grad_norm => c.ppo.max_grad_norm);
        set!(self.n_steps => c.ppo.n_steps);
        set!(self.n_envs => c.ppo.n_envs);
        set!(self.reward_scale => c.ppo.reward_scale);
        set!(self.dropout_in_updates => c.ppo.dropout_in_updates);
        if self.train_end.is_some() {
            c.split.train_end = self.train_end.clone();
        }
        if self.test_end.is_some() {
            c.split.test_end = self.test_end.clone();
        }
        set!(self.train_fraction => c.split.train_fraction);
        set!(self.policy_preset => c.policy.preset);
        Ok(c)
    }
}

fn dataset_path(config: &ExperimentConfig) -> winlab::Result<&Path> {
    config
        .dataset
        .path
        .as_deref()
        .ok_or_else(|| winlab::Error::Config("no dataset: pass --dataset or set dataset.path".into()))
}

/// Opens `path`, or stdout when absent.
fn output(path: Option<&Path>) -> winlab::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(fs::File::create(p)?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn common(verb: &Verb) -> &Common {
    match verb {
        Verb::Ingest(c) | Verb::Features(c) | Verb::Train(c) | Verb::Grid(c) => c,
        Verb::Backtest { common, .. } | Verb::Report { common, .. } | Verb::Shapes { common, .. } => common,
    }
}

fn run(cli: Cli) -> winlab::Result<()> {
    let flags = common(&cli.verb);
    let config = flags.resolve()?;
    if flags.print_config {
        print!("{}", config.to_toml_string()?);
        return Ok(());
    }
    match &cli.verb {
        Verb::Ingest(_) => {
            let frame = align_calendar(&load_frame(dataset_path(&config)?, config.dataset.kind)?)?;
            log::info!("{} dates x {} tickers after alignment", frame.n_dates(), frame.n_tickers());
            let mut out = output(flags.out.as_deref())?;
            frame.write_csv(&mut out)?;
            out.flush()?;
        }
        Verb::Features(_) => {
            let frame = align_calendar(&load_frame(dataset_path(&config)?, config.dataset.kind)?)?;
            let enriched = enrich(&frame, config.dataset.kind)?;
            let (names, rows) =
                feature_matrix(&enriched, config.dataset.kind, config.layout, config.env.initial_amount)?;
            let mut out = output(flags.out.as_deref())?;
            writeln!(out, "date,{}", names.join(","))?;
            for (date, row) in enriched.dates().iter().zip(rows) {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{date},{}", cells.join(","))?;
            }
            out.flush()?;
        }
        Verb::Train(_) => {
            let outcome = run_experiment(&config)?;
            write_outcome(&outcome, &config.out_dir)?;
            let r = &outcome.report;
            println!(
                "cumulative_reward {:.4} baseline {:.4} final_value {:.2} -> {}",
                r.cumulative_reward,
                r.baseline_cumulative_reward,
                r.final_value,
                config.out_dir.display()
            );
        }
        Verb::Backtest { checkpoint, .. } => {
            let file = fs::File::open(checkpoint)
                .map_err(|e| winlab::Error::from(e).context(checkpoint.display().to_string()))?;
            let (policy, meta) = PolicyNetwork::load(io::BufReader::new(file))?;
            let mut config = config;
            // the checkpoint knows what it was trained on unless a flag says otherwise
            if flags.layout.is_none() {
                config.layout = meta.layout.unwrap_or(config.layout);
            }
            if flags.kind.is_none() {
                config.dataset.kind = meta.kind.unwrap_or(config.dataset.kind);
            }
            if flags.weeks.is_none() {
                config.window_weeks = policy.input_shape()[1] / winlab::feature_layout::DAYS_PER_WEEK;
            }
            config.policy.preset = policy.preset();
            let frame = load_frame(dataset_path(&config)?, config.dataset.kind)?;
            let outcome = backtest_policy(&frame, &config, policy)?;
            write_outcome(&outcome, &config.out_dir)?;
            println!(
                "cumulative_reward {:.4} baseline {:.4} final_value {:.2} -> {}",
                outcome.report.cumulative_reward,
                outcome.report.baseline_cumulative_reward,
                outcome.report.final_value,
                config.out_dir.display()
            );
        }
        Verb::Grid(_) => {
            let grid = run_grid(&config, flags.jobs)?;
            emit_report(&grid, &config.out_dir)?;
            print!("{}", grid_table(&grid));
            if grid.failures() > 0 {
                for cell in grid.cells.iter().filter(|c| c.error.is_some()) {
                    log::error!("{}: {}", cell.key.slug(), cell.error.as_deref().unwrap_or(""));
                }
                return Err(winlab::Error::Training(format!("{} of 24 grid cells failed", grid.failures())));
            }
        }
        Verb::Report { from, .. } => {
            let text = fs::read_to_string(from).map_err(|e| winlab::Error::from(e).context(from.display().to_string()))?;
            let grid = GridReport::from_json(&text)?;
            emit_report(&grid, &config.out_dir)?;
            print!("{}", grid_table(&grid));
        }
        Verb::Shapes {
            preset,
            window,
            width,
            stocks,
            ..
        } => {
            let (t, f) = match preset {
                Preset::TableExact => (
                    window.unwrap_or(TABLE_EXACT_INPUT[1]),
                    width.unwrap_or(TABLE_EXACT_INPUT[2]),
                ),
                Preset::Adaptive => (
                    window.unwrap_or_else(|| config.window_days()),
                    width.unwrap_or_else(|| FeatureSchema::for_kind(config.dataset.kind, *stocks).width()),
                ),
            };
            let rows = describe(*preset, t, f)?;
            let mut out = io::stdout().lock();
            writeln!(out, "input [1, {t}, {f}]")?;
            for row in &rows {
                writeln!(out, "{:<16}{:<20}{}", row.name, format!("{:?}", row.output_shape), row.params)?;
            }
            writeln!(out, "total params {}", rows.iter().map(|r| r.params).sum::<usize>())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match common(&cli.verb).verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
