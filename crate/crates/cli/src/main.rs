use std::process::ExitCode;

use clap::Parser;
use itfit_cli::{exit_code, run, Cli};

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ITFIT_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("ITFIT_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            anyhow::bail!("ITFIT_THREADS must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
