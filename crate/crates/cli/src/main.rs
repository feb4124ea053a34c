use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acflow::experiment::{
    gen_mdp, load_generator_spec, run_experiment, sweep, validate_config, ExpResult, ExperimentConfig,
};
use acflow::analysis::Status;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "acflow", version, about = "Entropy-regularised actor-critic flow experiments")]
struct Cli {
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Replaces the generator seed (and the generator spec seed of `gen-mdp`).
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate one configuration and check its certificates.
    Run { config: PathBuf },
    /// Run every point of the config's parameter grid.
    Sweep { config: PathBuf },
    /// Parse the config and build the model without integrating.
    Validate { config: PathBuf },
    /// Sample an MDP from a generator spec and write it as an MDP file.
    GenMdp {
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>) -> ExpResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> ExpResult<u8> {
    let out_dir = cli.out_dir.as_deref();
    match &cli.cmd {
        Cmd::Run { config } => {
            let cfg = load(config, cli.seed_override)?;
            let out = run_experiment(&cfg, out_dir)?;
            for e in &out.report.entries {
                let tag = match e.status {
                    Status::Pass => "pass",
                    Status::Fail => "FAIL",
                    Status::NotApplicable => "n/a ",
                };
                println!("{tag} {:<24} margin={:e} t={}", e.name, e.margin, e.t_worst);
            }
            println!("config_hash={}", out.config_hash);
            Ok(out.exit_code as u8)
        }
        Cmd::Sweep { config } => {
            let cfg = load(config, cli.seed_override)?;
            let rows = sweep(&cfg, out_dir)?;
            let mut worst = 0;
            for r in &rows {
                println!(
                    "point {:>4}: exit={} pass={} fail={} n/a={}{}",
                    r.point.index,
                    r.exit_code,
                    r.n_pass,
                    r.n_fail,
                    r.n_not_applicable,
                    r.error.as_deref().map(|e| format!(" error: {e}")).unwrap_or_default()
                );
                // a configuration error in any point outranks a certificate failure
                worst = match (worst, r.exit_code) {
                    (1, _) | (_, 1) => 1,
                    (a, b) => a.max(b),
                };
            }
            Ok(worst as u8)
        }
        Cmd::Validate { config } => {
            let cfg = load(config, cli.seed_override)?;
            let c = validate_config(&cfg)?;
            println!("config ok (hash {})", cfg.hash());
            println!(
                "Gamma={:e} tau/Gamma={:e} eta0={} admissible={} small_gamma={}",
                c.gamma_const,
                c.tau / c.gamma_const,
                c.eta0,
                c.eta0_admissible_kl,
                c.small_gamma_flag
            );
            Ok(0)
        }
        Cmd::GenMdp { spec, output } => {
            let mut s = load_generator_spec(spec)?;
            if let Some(seed) = cli.seed_override {
                s.seed = seed;
            }
            let f = gen_mdp(&s, output)?;
            println!("wrote {} ({}x{})", output.display(), f.n_states, f.n_actions);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
