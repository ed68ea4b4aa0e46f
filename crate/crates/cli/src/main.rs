use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use diffussm::data::{Dataset, DatasetKind, DatasetSpec};
use diffussm::flops::{default_lengths, flops_csv, flops_summary, flops_sweep};
use diffussm::model::{param_report, ModelConfig};
use diffussm::sample::{sample_checkpoint, SampleSettings};
use diffussm::train::{loss_windows, train, TrainConfig};
use diffussm::Error;

#[derive(Parser, Debug)]
#[command(
    name = "diffussm",
    version,
    about = "Attention-free diffusion with gated bidirectional SSM blocks"
)]
struct Cli {
    /// Upper bound on worker threads. The engine currently runs on one thread.
    #[arg(long, global = true, env = "DSSM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a synthetic class-conditional image set.
    GenData(GenDataArgs),
    /// Train a model on a generated data set.
    Train(TrainArgs),
    /// Draw images from a checkpoint as PGM files.
    Sample(SampleArgs),
    /// Per-block FLOP sweep comparing DiffuSSM and DiT.
    Flops(FlopsArgs),
    /// Run the fast invariant battery.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// TOML file with the dataset spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Small,
    Medium,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML file with `[model]` and `[train]` tables; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting point when no config file is given.
    #[arg(long, value_enum, default_value = "small")]
    preset: Preset,
    /// Data set written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for metrics and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    class_dropout: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    ratio: Option<usize>,
    #[arg(long)]
    state: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    diffusion_steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for the PGM files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Class to condition on; omitted means unconditional.
    #[arg(long)]
    class: Option<usize>,
    /// Classifier-free guidance weight; 1 disables the unconditional pass.
    #[arg(long, default_value_t = 1.0)]
    guidance: f64,
    /// Number of reverse steps (respaced when below the training T).
    #[arg(long, default_value_t = 250)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample with the live weights instead of the EMA weights.
    #[arg(long)]
    live: bool,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[arg(long, default_value_t = 1024)]
    d_model: usize,
    /// Weight of the FFT term.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Comma-separated sequence lengths; defaults to powers of two 256..16384.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print the parameter report for this model config (TOML).
    #[arg(long)]
    model_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => DatasetSpec::from_toml(&read_text(p)?)?,
        None => DatasetSpec {
            kind: DatasetKind::GaussianBlobs,
            height: 16,
            width: 16,
            num_classes: 2,
            samples_per_class: 512,
            seed: 0,
        },
    };
    if let Some(k) = &a.kind {
        spec.kind = k.parse()?;
    }
    spec.height = a.height.unwrap_or(spec.height);
    spec.width = a.width.unwrap_or(spec.width);
    spec.num_classes = a.num_classes.unwrap_or(spec.num_classes);
    spec.samples_per_class = a.samples_per_class.unwrap_or(spec.samples_per_class);
    spec.seed = a.seed.unwrap_or(spec.seed);
    let ds = Dataset::generate(&spec)?;
    ds.save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    info!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => match a.preset {
            Preset::Small => TrainConfig::desk_small(),
            Preset::Medium => TrainConfig {
                model: ModelConfig::medium(),
                ..TrainConfig::desk_small()
            },
        },
    };
    let t = &mut cfg.train;
    t.seed = a.seed.unwrap_or(t.seed);
    t.steps = a.steps.unwrap_or(t.steps);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.lr = a.lr.unwrap_or(t.lr);
    t.weight_decay = a.weight_decay.unwrap_or(t.weight_decay);
    t.ema_decay = a.ema_decay.unwrap_or(t.ema_decay);
    t.class_dropout = a.class_dropout.unwrap_or(t.class_dropout);
    t.checkpoint_every = a.checkpoint_every.unwrap_or(t.checkpoint_every);
    let m = &mut cfg.model;
    m.depth = a.depth.unwrap_or(m.depth);
    m.d_model = a.d_model.unwrap_or(m.d_model);
    m.ratio = a.ratio.unwrap_or(m.ratio);
    m.state = a.state.unwrap_or(m.state);
    m.patch = a.patch.unwrap_or(m.patch);
    m.height = a.height.unwrap_or(m.height);
    m.width = a.width.unwrap_or(m.width);
    m.num_classes = a.num_classes.unwrap_or(m.num_classes);
    m.diffusion_steps = a.diffusion_steps.unwrap_or(m.diffusion_steps);
    m.beta_start = a.beta_start.unwrap_or(m.beta_start);
    m.beta_end = a.beta_end.unwrap_or(m.beta_end);
    cfg.validate()?;

    let data = Dataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    cfg.check_dataset(&data)?;
    info!("parameters:\n{}", param_report(&cfg.model)?);
    let outcome = train(&cfg, &data, &a.out)?;
    if let Some((first, last)) = loss_windows(&outcome.stats, 100) {
        info!("loss_simple first-100 mean {first:.5}, last-100 mean {last:.5}");
    }
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let settings = SampleSettings {
        count: a.count,
        class: a.class,
        guidance_w: a.guidance,
        steps: a.steps,
        seed: a.seed,
        use_ema: !a.live,
    };
    for p in sample_checkpoint(&a.checkpoint, &settings, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn flops_cmd(a: FlopsArgs) -> Result<()> {
    let lengths = a.lengths.unwrap_or_else(default_lengths);
    let rows = flops_sweep(&lengths, a.d_model, a.alpha)?;
    let csv = flops_csv(&rows);
    match &a.out {
        Some(p) => std::fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    print!("{}", flops_summary(&rows, a.d_model));
    if let Some(p) = &a.model_config {
        println!("{}", param_report(&ModelConfig::from_toml(&read_text(p)?)?)?);
    }
    Ok(())
}

fn selfcheck_cmd(a: SelfcheckArgs) -> Result<bool> {
    let report = diffussm::selfcheck::run(a.seed);
    println!("{report}");
    Ok(report.all_passed())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("DSSM_THREADS must be at least 1".into()).into());
        }
        info!("thread cap {n}; running single-threaded");
    }
    match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Sample(a) => sample_cmd(a).map(|_| true),
        Command::Flops(a) => flops_cmd(a).map(|_| true),
        Command::Selfcheck(a) => selfcheck_cmd(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
