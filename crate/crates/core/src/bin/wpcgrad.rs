use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wpcgrad::config::{parse_config, ExperimentConfig};
use wpcgrad::runner;

#[derive(Parser)]
#[command(name = "wpcgrad", version, about = "Multitask gradient surgery experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every repeat of a config and write CSV logs plus summary.json.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Tabulate final losses of two or more summaries against the first.
    Compare {
        #[arg(num_args = 0..)]
        summaries: Vec<PathBuf>,
    },
    /// Parse and validate a config without training.
    Validate {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    repeats: Option<usize>,
}

impl Overrides {
    fn apply(&self, c: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.output {
            c.output = o.clone();
        }
        if let Some(r) = self.repeats {
            c.repeats = r;
        }
    }
}

fn load(path: &PathBuf, overrides: &Overrides) -> wpcgrad::Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let parsed = parse_config(&text)?;
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    let mut config = parsed.config;
    overrides.apply(&mut config);
    config.validate()?;
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, overrides } => load(&config, &overrides).and_then(|c| {
            let report = runner::run(&c)?;
            for run in &report.summary.runs {
                match (&run.final_losses, &run.diverged) {
                    (Some(l), _) => println!("seed {}: final losses {l:?}", run.seed),
                    (None, Some(d)) => eprintln!(
                        "seed {}: diverged at epoch {} iteration {} (task {}): {}",
                        run.seed, d.epoch, d.iteration, d.task, d.message
                    ),
                    (None, None) => {}
                }
            }
            println!("wrote {}", report.summary_path.display());
            Ok(report.exit_code() as u8)
        }),
        Command::Compare { summaries } => runner::compare(&summaries).map(|c| {
            print!("{}", runner::render_comparison(&c));
            0
        }),
        Command::Validate { config, overrides } => load(&config, &overrides).map(|_| {
            println!("{}: ok", config.display());
            0
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e @ wpcgrad::Error::Usage(_)) => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
