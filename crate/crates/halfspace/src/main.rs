use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use halfspace::checkpoint::write_json;
use halfspace::config::Config;
use halfspace::direct::write_checkpoint;
use halfspace::harness::{build_bundle, convergence_study, direct_run, study_grid, write_study};
use halfspace::{checks, Error};

#[derive(Parser)]
#[command(name = "halfspace", version, about = "Boundary-layer expansion and direct kinetic solver")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the expansion hierarchy and write the bundle checkpoint.
    Expand(Common),
    /// Run the direct solver for each configured eps and write checkpoints.
    Direct(Common),
    /// Convergence study: report.json and norms.csv.
    Study(Common),
    /// Run the invariant suites.
    Check(Common),
}

fn out_dir(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Expand(c) => {
            let cfg = Config::load(&c.config)?;
            let g = cfg.grid()?;
            let bundle = build_bundle(&cfg, &g)?;
            let dir = out_dir(&c, "bundle");
            bundle.save(&dir)?;
            println!("bundle up to order {} written to {}", bundle.order(), dir.display());
        }
        Command::Direct(c) => {
            let cfg = Config::load(&c.config)?;
            let g = cfg.grid()?;
            let bundle = build_bundle(&cfg, &g)?;
            let x = study_grid(&cfg)?;
            let dir = out_dir(&c, "direct");
            std::fs::create_dir_all(&dir)?;
            for &eps in &cfg.study.epsilons {
                let (run, _) = direct_run(&cfg, &g, &bundle, &x, eps)?;
                let path = dir.join(format!("eps_{eps}.bin"));
                write_checkpoint(&path, &run, run.times.len() - 1, &g, &cfg.model())?;
                write_json(&dir.join(format!("eps_{eps}.json")), &run.diag)?;
                println!("eps {eps}: {} steps, written to {}", run.diag.steps, path.display());
            }
        }
        Command::Study(c) => {
            let cfg = Config::load(&c.config)?;
            let (report, rows) = convergence_study(&cfg, &mut |m| eprintln!("{m}"))?;
            let dir = out_dir(&c, "results");
            write_study(&dir, &report, &rows)?;
            for f in &report.fits {
                println!("K={} {}: slope {:.3} (stderr {:.3})", f.k, f.norm, f.slope, f.stderr);
            }
        }
        Command::Check(c) => {
            let cfg = Config::load(&c.config)?;
            let results = checks::run_all(&cfg);
            let mut failed = 0;
            for r in &results {
                println!("{} {}: {}", if r.pass { "ok  " } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.pass);
            }
            if let Some(dir) = &c.out {
                std::fs::create_dir_all(dir)?;
                write_json(&dir.join("checks.json"), &results)?;
            }
            if failed > 0 {
                return Err(Error::Inconsistent(format!("{failed} check(s) failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
