use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Deserialize;

use tsaug::data::{
    ema_smooth, load_price_csv, make_windows, normalize_set, split_dataset, SequenceSet, SplitMethod, SplitSpec,
    WindowSpec,
};
use tsaug::experiment::{run_experiment, Defaults, ExperimentSpec};
use tsaug::forecaster::{evaluate_mse, train_forecaster, ForecastModel, ForecasterConfig};
use tsaug::gan::{load_checkpoint, DiscriminatorConfig, GeneratorConfig};
use tsaug::metrics::compare;
use tsaug::training::{generate_dataset, train_from, write_epoch_log, SelectBy, TrainOptions, TrainingConfig, TrainingState};
use tsaug::ErrorKind;

#[derive(Parser)]
#[command(name = "tsaug", version, about = "Transformer GAN augmentation for scarce time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Smooth, window, normalize and split a price CSV.
    Ingest(IngestArgs),
    /// Train the GAN on a sample set.
    TrainGan(TrainGanArgs),
    /// Draw synthetic samples from a GAN checkpoint.
    Generate(GenerateArgs),
    /// Quality metrics between sample sets.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Train an LSTM forecaster with best-validation selection.
    TrainForecaster(TrainForecasterArgs),
    /// Forecaster evaluation.
    #[command(subcommand)]
    Forecast(ForecastCommand),
    /// Multi-window augmentation experiments.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Print every default value as JSON.
    Defaults,
}

#[derive(Args)]
struct IngestArgs {
    /// CSV with `date,value` rows.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 5)]
    ema_span: usize,
    /// Sample length.
    #[arg(long, default_value_t = 90)]
    k: usize,
    /// Observation length; the remaining k - t points are forecast.
    #[arg(long, default_value_t = 60)]
    t: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Chronological)]
    split: SplitArg,
    /// Seed for the random split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes train.json, validation.json and test.json here.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Chronological,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectArg {
    Final,
    DtwDedims,
}

impl From<SelectArg> for SelectBy {
    fn from(s: SelectArg) -> Self {
        match s {
            SelectArg::Final => SelectBy::Final,
            SelectArg::DtwDedims => SelectBy::DtwDedims,
        }
    }
}

#[derive(Args)]
struct TrainGanArgs {
    /// SequenceSet JSON; must not be a test split.
    #[arg(long)]
    data: PathBuf,
    /// JSON with optional `generator`, `discriminator` and `training` objects.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory (`epoch_NNNN/` and `final/`).
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log; defaults to `<out>/curves.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a checkpoint directory written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GanConfigFile {
    #[serde(default)]
    generator: Option<GeneratorConfig>,
    #[serde(default)]
    discriminator: Option<DiscriminatorConfig>,
    #[serde(default)]
    training: TrainingConfig,
}

#[derive(Args)]
struct GenerateArgs {
    /// Checkpoint directory or `model.safetensors` file.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Observation length recorded in the output; defaults to two thirds of K.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Wasserstein and DTW DeD-iMs between two sets, as JSON on stdout.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Subsample size; defaults to min(64, |a|, |b|).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainForecasterArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// ForecasterConfig JSON; T and S always follow the data.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ForecastCommand {
    /// Test-set MSE of a trained forecaster, as JSON on stdout.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Run every window of an experiment spec.
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's checkpoint choice.
        #[arg(long, value_enum)]
        select_by: Option<SelectArg>,
        /// Run windows concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| tsaug::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let value = serde_json::from_str(&text).map_err(tsaug::Error::from)?;
    Ok(value)
}

fn ingest(a: IngestArgs) -> anyhow::Result<()> {
    if a.t >= a.k {
        return Err(tsaug::Error::InvalidWindow(format!("t = {} must be below k = {}", a.t, a.k)).into());
    }
    let window = WindowSpec::new(a.t, a.k - a.t, a.stride)?;
    let series = load_price_csv(&a.input)?;
    let smooth = ema_smooth(&series, a.ema_span)?;
    let (set, dropped) = normalize_set(&make_windows(&smooth, &window)?)?;
    if dropped > 0 {
        log::warn!("dropped {dropped} samples with a constant observation window");
    }
    let method = match a.split {
        SplitArg::Chronological => SplitMethod::Chronological,
        SplitArg::Random => SplitMethod::Random,
    };
    let splits = split_dataset(&set, &SplitSpec::default(), method, a.seed)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, part) in [("train", &splits.train), ("validation", &splits.validation), ("test", &splits.test)] {
        part.save(a.out.join(format!("{name}.json")))?;
    }
    info!(
        "{} samples: {} train, {} validation, {} test",
        set.len(),
        splits.train.len(),
        splits.validation.len(),
        splits.test.len()
    );
    Ok(())
}

fn train_gan(a: TrainGanArgs) -> anyhow::Result<()> {
    let data = SequenceSet::load(&a.data)?;
    let cfg: GanConfigFile = match &a.config {
        Some(p) => read_json(p)?,
        None => GanConfigFile::default(),
    };
    let k = data.window.k;
    let g = cfg.generator.unwrap_or_else(|| GeneratorConfig::for_seq_len(k));
    let d = cfg.discriminator.unwrap_or_else(|| DiscriminatorConfig::for_seq_len(k));
    let state = match &a.resume {
        Some(dir) => TrainingState::load(dir)?,
        None => TrainingState::new(&g, &d, &cfg.training)?,
    };
    let opts = TrainOptions {
        checkpoint_dir: Some(a.out.clone()),
        select_by: SelectBy::Final,
    };
    let outcome = train_from(&data, state, &cfg.training, &opts)?;
    let log_path = a.log.unwrap_or_else(|| a.out.join("curves.csv"));
    write_epoch_log(&log_path, &outcome.log)?;
    if let Some(r) = &outcome.final_report {
        info!("final wasserstein {:.6}, dtw dedims {:.6}", r.wasserstein, r.dtw_dedims);
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let (generator, _) = load_checkpoint(&a.ckpt)?;
    let k = generator.config.seq_len;
    let t = a.t.unwrap_or((2 * k) / 3);
    if t == 0 || t >= k {
        return Err(tsaug::Error::InvalidWindow(format!("t = {t} must lie in 1..{k}")).into());
    }
    let window = WindowSpec::new(t, k - t, 1)?;
    let set = generate_dataset(&generator, a.n, a.seed, &window)?;
    set.save(&a.out)?;
    info!("wrote {} samples of length {k} to {}", set.len(), a.out.display());
    Ok(())
}

fn train_forecaster_cmd(a: TrainForecasterArgs) -> anyhow::Result<()> {
    let train = SequenceSet::load(&a.train)?;
    let val = SequenceSet::load(&a.val)?;
    let base: ForecasterConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ForecasterConfig::default(),
    };
    let cfg = ForecasterConfig {
        input_len: train.window.t,
        horizon: train.window.s,
        ..base
    };
    let trained = train_forecaster(&train, &val, &cfg)?;
    trained.model.save(&a.out)?;
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for e in &trained.history {
        let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, val));
    }
    let path = a.out.join("history.csv");
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    info!("selected epoch {} of {}", trained.best_epoch, cfg.epochs);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::TrainGan(a) => train_gan(a),
        Command::Generate(a) => generate(a),
        Command::Metrics(MetricsCommand::Compare { a, b, n, seed }) => {
            let set_a = SequenceSet::load(&a)?;
            let set_b = SequenceSet::load(&b)?;
            if n == Some(0) {
                bail!(tsaug::Error::InvalidConfig("--n must be positive".into()));
            }
            let report = compare(&set_a, &set_b, n, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::TrainForecaster(a) => train_forecaster_cmd(a),
        Command::Forecast(ForecastCommand::Eval { model, test }) => {
            let model = ForecastModel::load(&model)?;
            let test = SequenceSet::load(&test)?;
            let result = evaluate_mse(&model, &test)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
            Ok(())
        }
        Command::Experiment(ExperimentCommand::Run {
            spec,
            out,
            select_by,
            parallel,
        }) => {
            let mut spec = ExperimentSpec::load(&spec)?;
            if let Some(s) = select_by {
                spec.select_by = s.into();
            }
            spec.parallel |= parallel;
            let report = run_experiment(&spec, Some(&out))?;
            info!(
                "{} windows succeeded, {} failed; results in {}",
                report.windows.len(),
                report.failures.len(),
                out.display()
            );
            Ok(())
        }
        Command::Defaults => {
            println!("{}", serde_json::to_string_pretty(&Defaults::default())?);
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<tsaug::Error>()) {
        Some(e) => match e.kind() {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numerical => 3,
        },
        None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
