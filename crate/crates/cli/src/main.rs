use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ffn_lens::corpus::toy;
use ffn_lens::instrument::CaptureMode;
use ffn_lens::par::{self, Execution};
use ffn_lens::pipeline::{self, PipelineError, RunConfig};

#[derive(Parser)]
#[command(name = "ffn-lens", version, about = "Language specificity of feed-forward detectors")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Run directory, overriding `output_dir` from the configuration.
    #[arg(short, long, global = true, env = "FFNLENS_OUT_DIR")]
    out: Option<PathBuf>,

    /// Parallel corpus, overriding `corpus.path`.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,

    /// Global seed, overriding `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Maximum number of worker threads.
    #[arg(short, long, global = true)]
    jobs: Option<usize>,

    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the vocabulary, sample pairs and list their prefixes.
    Prepare,
    /// Train the language model.
    Train {
        /// Continue from the checkpoint and train state in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Record detector activations for every prefix.
    Capture {
        /// One forward pass per prefix instead of one per sentence.
        #[arg(long)]
        per_prefix: bool,
    },
    /// Per-layer detector set sizes and sparsity.
    Analyze,
    /// Language-identification probes.
    Probe,
    /// Markdown summary of a finished run.
    Report,
    /// Every stage in order.
    All,
    /// Print the effective configuration.
    Config,
    /// Write a template-generated Czech/English corpus.
    ToyCorpus {
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        /// Destination TSV file.
        #[arg(long)]
        output: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(corpus) = &cli.corpus {
        config.corpus.path = corpus.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(PipelineError::Config("--jobs must be positive".into()));
        }
        par::set_jobs(jobs).map_err(PipelineError::Config)?;
    }
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let config = load_config(cli)?;
    match &cli.command {
        Command::Prepare => {
            let m = pipeline::cmd_prepare(&config)?;
            println!(
                "sampled {} of {} pairs; {} prefixes in {}, {} in {}",
                m.sampled_pairs, m.corpus_pairs, m.prefixes_lang_a, config.lang_a, m.prefixes_lang_b, config.lang_b
            );
        }
        Command::Train { resume } => {
            let s = pipeline::cmd_train(&config, *resume, exec)?;
            println!(
                "trained {} steps; loss {:.4} -> {:.4}",
                s.step,
                s.initial_loss(10),
                s.final_loss(10)
            );
        }
        Command::Capture { per_prefix } => {
            let mode = if *per_prefix {
                CaptureMode::PerPrefix
            } else {
                CaptureMode::PerSentence
            };
            let h = pipeline::cmd_capture(&config, mode, exec)?;
            println!(
                "captured {} prefixes x {} layers x {} detectors",
                h.n_prefixes, h.n_layers, h.n_detectors
            );
        }
        Command::Analyze => {
            let p = pipeline::cmd_analyze(&config, exec)?;
            println!("wrote {} layer profiles", p.len());
        }
        Command::Probe => {
            let r = pipeline::cmd_probe(&config, exec)?;
            println!("probed {} layers", r.len());
        }
        Command::Report => print_claims(&pipeline::cmd_report(&config)?),
        Command::All => print_claims(&pipeline::cmd_all(&config, exec)?),
        Command::Config => {
            config.validate()?;
            print!("{}", config.to_toml());
        }
        Command::ToyCorpus { pairs, output } => {
            let text = toy::to_tsv(&toy::generate(*pairs, config.seed));
            std::fs::write(output, text).map_err(|source| PipelineError::Io {
                path: output.clone(),
                source,
            })?;
            println!("wrote {pairs} pairs to {}", output.display());
        }
    }
    Ok(())
}

fn print_claims(claims: &[pipeline::Claim]) {
    for c in claims {
        println!("{:<13} {}", c.status, c.title);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
