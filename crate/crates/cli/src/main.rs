use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mimalloc::MiMalloc;

use janossy::experiment::{self, ExperimentConfig, ExperimentError, TableFormat};
use janossy::nets::{Checkpoint, FArch, ModelSpec, RhoArch};
use janossy::pooling::{CanonicalKey, PoolingSpec};
use janossy::seed;
use janossy::tasks::{self, Metrics, TaskDataset, TaskName, TaskSpec};
use janossy::training::{self, LossKind, OptimizerKind, TrainConfig};
use janossy::verify::{self, Level, Mutations};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(name = "janossy", version, about = "Janossy pooling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a train/test dataset as CSV.
    GenData(GenDataArgs),
    /// Train all replicates of an experiment.
    Train(TrainArgs),
    /// Score a saved checkpoint on a test split.
    Eval(EvalArgs),
    /// Run the numeric property suite.
    Verify(VerifyArgs),
    /// Aggregate saved reports into a results table.
    Report(ReportArgs),
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long, default_value = "sum")]
    task: String,
    #[arg(long, default_value_t = 20_000)]
    n_train: usize,
    #[arg(long, default_value_t = 2_000)]
    n_test: usize,
    /// Sequence length; defaults to the task's standard length.
    #[arg(long)]
    seq_len: Option<usize>,
    /// Digit vocabulary size; defaults to the task's standard size.
    #[arg(long)]
    vocab: Option<usize>,
}

impl TaskArgs {
    fn spec(&self, seed: u64) -> Result<TaskSpec, Failure> {
        let name: TaskName = self
            .task
            .parse()
            .map_err(|e: tasks::TaskError| Failure::Config(e.to_string()))?;
        let mut spec = TaskSpec::desk(name, seed).with_sizes(self.n_train, self.n_test);
        if let Some(n) = self.seq_len {
            spec.seq_len = n;
        }
        if let Some(v) = self.vocab {
            spec.vocab = v;
        }
        spec.validate().map_err(Failure::Config)?;
        Ok(spec)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FChoice {
    Mlp,
    Lstm,
    Gru,
}

#[derive(Clone, Copy, ValueEnum)]
enum RhoChoice {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingChoice {
    Exact,
    Kary,
    Sampled,
    Canonical,
}

#[derive(Clone, Copy, ValueEnum)]
enum KeyChoice {
    Ascending,
    Descending,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossChoice {
    L1,
    Mse,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Args)]
struct PoolingArgs {
    #[arg(long, value_enum, default_value = "kary")]
    pooling: PoolingChoice,
    /// Permutations per example per training step (sampled pooling).
    #[arg(long, default_value_t = 1)]
    train_samples: usize,
    /// Permutations averaged at test time (sampled pooling).
    #[arg(long, default_value_t = 1)]
    infer_samples: usize,
    #[arg(long, value_enum, default_value = "ascending")]
    canonical_key: KeyChoice,
}

impl PoolingArgs {
    fn spec(&self, k: Option<usize>) -> PoolingSpec {
        let key = match self.canonical_key {
            KeyChoice::Ascending => CanonicalKey::Ascending,
            KeyChoice::Descending => CanonicalKey::Descending,
        };
        let mut spec = match self.pooling {
            PoolingChoice::Exact => PoolingSpec::exact(),
            PoolingChoice::Kary => PoolingSpec::kary(k.unwrap_or(1)),
            PoolingChoice::Sampled => PoolingSpec::sampled(self.train_samples, self.infer_samples),
            PoolingChoice::Canonical => PoolingSpec::canonical(key),
        };
        spec.canonical_key = key;
        spec
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config as JSON. When given, it takes precedence over all
    /// other flags except --output-dir, which fills in a missing value.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, value_enum, default_value = "mlp")]
    f: FChoice,
    /// Arity of an MLP f.
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, value_enum, default_value = "linear")]
    rho: RhoChoice,
    /// Multiplier on rho's input; the sequence length with --k 1 gives
    /// sum pooling.
    #[arg(long, default_value_t = 1.0)]
    rho_input_scale: f64,
    #[command(flatten)]
    pooling: PoolingArgs,
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate; repeat to search a grid on a validation split.
    #[arg(long = "lr")]
    lr: Vec<f64>,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, value_enum, default_value = "l1")]
    loss: LossChoice,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerChoice,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    variance_reg: f64,
    #[arg(long, default_value_t = 10)]
    eval_every: usize,
    #[arg(long, default_value_t = 3)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Read the dataset written by gen-data instead of generating it.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

impl TrainArgs {
    fn config(&self) -> Result<ExperimentConfig, Failure> {
        if let Some(path) = &self.config {
            let mut config = ExperimentConfig::load(path)?;
            if config.output_dir.is_none() {
                config.output_dir = self.output_dir.clone();
            }
            return Ok(config);
        }
        let task = self.task.spec(0)?;
        let rho = match self.rho {
            RhoChoice::Linear => RhoArch::Linear,
            RhoChoice::Mlp => RhoArch::Mlp100,
        };
        let mut model = match self.f {
            FChoice::Mlp => ModelSpec::kary(task.vocab, self.k, rho),
            FChoice::Lstm => ModelSpec::full(task.vocab, FArch::Lstm50, rho),
            FChoice::Gru => ModelSpec::full(task.vocab, FArch::Gru80, rho),
        };
        model.rho_input_scale = self.rho_input_scale;
        let pooling = self.pooling.spec(model.k);
        let mut config = ExperimentConfig::desk(task.name, model, pooling, self.seed);
        config.task = task;
        config.replicates = self.replicates;
        config.output_dir = self.output_dir.clone();
        config.data_dir = self.data_dir.clone();
        config.train = TrainConfig {
            optimizer: match self.optimizer {
                OptimizerChoice::Adam => OptimizerKind::AdamStyle,
                OptimizerChoice::Sgd => OptimizerKind::SgdSchedule,
            },
            lr_grid: if self.lr.is_empty() {
                config.train.lr_grid
            } else {
                self.lr.clone()
            },
            base_lr: self.lr.first().copied().unwrap_or(config.train.base_lr),
            batch_size: self.batch_size,
            epochs: self.epochs.unwrap_or(config.train.epochs),
            loss: match self.loss {
                LossChoice::L1 => LossKind::L1,
                LossChoice::Mse => LossKind::Mse,
            },
            variance_reg_weight: self.variance_reg,
            lr_decay: self.lr_decay,
            eval_every: self.eval_every,
            ..config.train
        };
        Ok(config)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory written by gen-data. Without it the test split is
    /// generated from the task flags and --seed.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    pooling: PoolingArgs,
    /// Seeds data generation and the inference permutations.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "fast")]
    level: LevelChoice,
    /// Scale k-ary pooling by a wrong prefactor; the suite should fail.
    #[arg(long)]
    break_kary_prefactor: bool,
    /// Emit the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelChoice {
    Fast,
    Full,
}

#[derive(Args)]
struct ReportArgs {
    /// Glob over report.json files.
    #[arg(long, default_value = "runs/**/report.json")]
    glob: String,
    #[arg(long, value_enum, default_value = "markdown")]
    format: FormatChoice,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatChoice {
    Csv,
    Markdown,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Verify,
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<tasks::TaskError> for Failure {
    fn from(e: tasks::TaskError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn gen_data(args: &GenDataArgs) -> Result<(), Failure> {
    let spec = args.task.spec(seed::derive(args.seed, seed::stream::DATA, 0))?;
    let data = tasks::generate(&spec);
    data.save(&args.out_dir)?;
    println!(
        "wrote {} train and {} test examples of {} to {}",
        data.train.len(),
        data.test.len(),
        spec.name,
        args.out_dir.display()
    );
    Ok(())
}

fn train(args: &TrainArgs) -> Result<(), Failure> {
    let config = args.config()?;
    config.validate().map_err(Failure::Config)?;
    if args.print_config {
        println!(
            "{}",
            serde_json::to_string_pretty(&config).map_err(|e| Failure::Runtime(e.to_string()))?
        );
        return Ok(());
    }
    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(&config).map_err(|e| Failure::Runtime(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    let metric = config.task.name.primary_metric();
    let outcome = experiment::run_with_progress(&config, |r, run| {
        let m = &run.report.final_test;
        eprintln!(
            "replicate {r}: lr {} {metric:?} {:.4} (averaged {:.4}) in {:.1}s",
            run.report.selected_lr,
            m.single.get(metric),
            m.averaged.get(metric),
            run.report.wall_seconds
        );
    })?;
    println!(
        "{}",
        serde_json::to_string_pretty(&outcome.summary).map_err(|e| Failure::Runtime(e.to_string()))?
    );
    Ok(())
}

fn test_split(args: &EvalArgs) -> Result<TaskDataset, Failure> {
    match &args.data_dir {
        Some(dir) => Ok(TaskDataset::load(dir)?),
        None => Ok(tasks::generate(&args.task.spec(seed::derive(
            args.seed,
            seed::stream::DATA,
            0,
        ))?)),
    }
}

fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let model = Checkpoint::load(&args.checkpoint)
        .and_then(Checkpoint::into_model)
        .map_err(|e| Failure::Config(format!("{}: {e}", args.checkpoint.display())))?;
    let pooling = args.pooling.spec(model.spec.k);
    pooling.validate().map_err(Failure::Config)?;
    let data = test_split(args)?;
    if data.spec.vocab > model.spec.vocab {
        return Err(Failure::Config(format!(
            "dataset vocabulary {} exceeds the model's {}",
            data.spec.vocab, model.spec.vocab
        )));
    }
    let mut rng = seed::rng(seed::derive(args.seed, seed::stream::EVAL, 0));
    let inputs: Vec<Vec<usize>> = data.test.inputs.clone();
    let preds = training::predict_averaged(&model, &pooling, &inputs, pooling.infer_samples, &mut rng)
        .map_err(|e| Failure::Config(e.to_string()))?;
    let metrics = Metrics::compute(&preds, &data.test.targets)?;
    let out = serde_json::json!({
        "task": data.spec.name,
        "examples": inputs.len(),
        "infer_samples": pooling.infer_samples,
        "metrics": metrics,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&out).map_err(|e| Failure::Runtime(e.to_string()))?
    );
    Ok(())
}

fn run_verify(args: &VerifyArgs) -> Result<(), Failure> {
    let level = match args.level {
        LevelChoice::Fast => Level::Fast,
        LevelChoice::Full => Level::Full,
    };
    let report = verify::verify(
        level,
        Mutations {
            kary_prefactor: args.break_kary_prefactor,
        },
    );
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?
        );
    } else {
        for c in &report.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            println!("{status} {:<32} {:>7.2}s  {}", c.name, c.seconds, c.detail);
        }
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn report(args: &ReportArgs) -> Result<(), Failure> {
    let format = match args.format {
        FormatChoice::Csv => TableFormat::Csv,
        FormatChoice::Markdown => TableFormat::Markdown,
    };
    print!("{}", experiment::report_table(&args.glob, format)?);
    Ok(())
}

fn exists(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Config(format!("{} does not exist", path.display())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => a.config.as_deref().map_or(Ok(()), exists).and_then(|_| train(a)),
        Command::Eval(a) => exists(&a.checkpoint).and_then(|_| eval(a)),
        Command::Verify(a) => run_verify(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify) => ExitCode::from(1),
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
