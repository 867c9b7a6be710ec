use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use layertrace::aggregation::{AggregationMode, AggregationPipeline, DEFAULT_PROPORTION};
use layertrace::cli::{self, RunConfig};
use layertrace::detectors::DetectorParams;
use layertrace::scorers::{ScorerConfig, ScorerKind, DEFAULT_N_PROJ, DEFAULT_SHRINKAGE};
use layertrace::trace::SynthConfig;
use layertrace::Error;

#[derive(Parser)]
#[command(name = "layertrace", version, about = "Layer-wise OOD score aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train / IN-test / OUT-test benchmark.
    Synth(SynthArgs),
    /// Fit a scorer and an aggregation pipeline on a training trace set.
    Fit(FitArgs),
    /// Set the decision threshold of a fitted pipeline.
    Calibrate {
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PROPORTION)]
        proportion: f64,
        /// Defaults to overwriting the input pipeline.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trace set with a calibrated pipeline and write a CSV.
    Score {
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the evaluation matrix described by a JSON config.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    class_count: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_in_test: Option<usize>,
    #[arg(long)]
    n_out_test: Option<usize>,
    #[arg(long)]
    informative_layer: Option<usize>,
    #[arg(long)]
    ood_shift: Option<f64>,
    #[arg(long)]
    in_class_separation: Option<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    scorer: ScorerKind,
    #[arg(long)]
    aggregator: AggregationMode,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_SHRINKAGE)]
    shrinkage: f64,
    #[arg(long, default_value_t = DEFAULT_N_PROJ)]
    n_proj: usize,
    #[arg(long)]
    exclude_logits: bool,
}

enum Failure {
    Usage(Error),
    Run(Error),
    AllFailed,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Json(_) => Failure::Usage(e),
            other => Failure::Run(other),
        }
    }
}

fn synth_config(a: &SynthArgs) -> SynthConfig {
    let mut cfg = SynthConfig::default();
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { cfg.$f = v; } )* };
    }
    set!(class_count, n_layers, dim, n_train, n_in_test, n_out_test, informative_layer, ood_shift, in_class_separation, noise_scale, seed);
    cfg
}

fn run(command: Command) -> Result<(), Failure> {
    cli::init_threads()?;
    match command {
        Command::Synth(a) => {
            let paths = cli::cmd_synth(&synth_config(&a), &a.out)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Fit(a) => {
            let scorer = ScorerConfig {
                kind: a.scorer,
                shrinkage: a.shrinkage,
                n_proj: a.n_proj,
                seed: a.seed,
                include_logits: !a.exclude_logits,
            };
            let pipeline = cli::cmd_fit(&a.train, scorer, a.aggregator, &DetectorParams::default(), a.seed)?;
            pipeline.save(&a.out)?;
            eprintln!("[layertrace] fitted {} -> {}", pipeline.descriptor(), a.out.display());
        }
        Command::Calibrate { pipeline, proportion, out } => {
            let mut p = AggregationPipeline::load(&pipeline)?;
            let gamma = cli::cmd_calibrate(&mut p, proportion)?;
            p.save(out.as_ref().unwrap_or(&pipeline))?;
            println!("{gamma}");
        }
        Command::Score { pipeline, data, out } => {
            let p = AggregationPipeline::load(&pipeline)?;
            let rows = cli::cmd_score(&p, &data)?;
            cli::write_scores_csv(&rows, &out)?;
            eprintln!("[layertrace] scored {} samples -> {}", rows.len(), out.display());
        }
        Command::Eval { config } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = cli::run_eval(&cfg)?;
            outcome.write(&cfg.output_dir)?;
            let failed = outcome.rows.iter().filter(|r| r.error.is_some()).count();
            eprintln!(
                "[layertrace] {} rows ({failed} failed) -> {}",
                outcome.rows.len(),
                cfg.output_dir.display()
            );
            if outcome.all_failed() {
                return Err(Failure::AllFailed);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::AllFailed) => {
            eprintln!("error: every combination failed");
            ExitCode::from(1)
        }
    }
}
