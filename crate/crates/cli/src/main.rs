mod args;
mod commands;
mod output;
mod pgm;

use clap::Parser;

use args::{Cli, Command};
use output::{Outcome, RunDir};

fn run(cli: &Cli) -> Outcome {
    let name = match &cli.command {
        Command::Train(_) => "train",
        Command::Generate(_) => "generate",
        Command::Interpolate(_) => "interpolate",
        Command::Map(_) => "map",
        Command::Augment(_) => "augment",
        Command::Evaluate(_) => "evaluate",
    };
    if cli.jobs == 0 {
        return Err(output::Failure::usage("--jobs must be >= 1"));
    }
    log::info!("{name}: root seed {}", cli.seed);
    let mut dir = RunDir::create(&cli.out, cli.force)?;
    let result = match &cli.command {
        Command::Train(a) => commands::train_cmd(cli, a, &mut dir),
        Command::Generate(a) => commands::generate_cmd(cli, a, &mut dir),
        Command::Interpolate(a) => commands::interpolate_cmd(cli, a, &mut dir),
        Command::Map(a) => commands::map_cmd(cli, a, &mut dir),
        Command::Augment(a) => commands::augment_cmd(cli, a, &mut dir),
        Command::Evaluate(a) => commands::evaluate_cmd(cli, a, &mut dir),
    };
    match result {
        Ok(config) => {
            for p in dir.finish(name, cli.seed, &config)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Err(e) => {
            dir.abandon();
            Err(e)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(&cli) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
