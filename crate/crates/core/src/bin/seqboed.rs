use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqboed::harness::{self, HarnessError, RunOptions};

#[derive(Parser)]
#[command(name = "seqboed", version, about = "Sequential Bayesian experimental design experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Override a config entry, e.g. `eig.j=20000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Replace `seeds.master`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replicate- and design-level parallelism.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment and write CSV tables and a manifest.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the oracle checks at the config's scale and print one line per check.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

fn options(common: &Common, out_dir: Option<PathBuf>) -> RunOptions {
    RunOptions {
        overrides: common.set.clone(),
        seed: common.seed,
        out_dir,
        threads: common.threads,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result: Result<i32, HarnessError> = match cli.command {
        Command::Run { common, out_dir } => {
            let opts = options(&common, out_dir);
            harness::run(&common.config, &opts).map(|art| {
                for f in &art.files {
                    println!("wrote {}", f.display());
                }
                0
            })
        }
        Command::Verify { common } => {
            let opts = options(&common, None);
            harness::load_config(&common.config, &opts.overrides_with_seed()).and_then(|(cfg, _)| {
                let report = harness::with_threads(opts.threads, || harness::verify(&cfg))?;
                print!("{}", report.render());
                Ok(report.exit_code())
            })
        }
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("seqboed: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
