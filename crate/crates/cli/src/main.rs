use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedtta_core::attack::{AttackMode, AttackObjective};
use fedtta_core::harness::{
    emit_run, emit_sweep, gradcheck::run_gradcheck, run, selftest::run_selftest, sweep,
    ExperimentConfig, Formats, SweepAxis,
};
use fedtta_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fedtta", version, about = "Federated test-time adaptation poisoning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run one experiment per axis value and seed.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Number of consecutive seeds starting at the configured seed.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every registered loss.
    Gradcheck,
    /// Quick construction-level checks.
    Selftest,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long, default_value = "csv,json")]
    format: String,
    /// `key.path=value` override, repeatable.
    #[arg(long = "set")]
    set: Vec<String>,
}

impl Common {
    fn load(&self, path: &Path) -> Result<(ExperimentConfig, Formats, PathBuf)> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(m) = &self.mode {
            let m: AttackMode = parse_mode(m)?;
            overrides.push(format!("attack.mode=\"{}\"", mode_name(&m)));
        }
        if let Some(o) = &self.objective {
            let o: AttackObjective = o.parse()?;
            overrides.push(format!("attack.objective=\"{o}\""));
        }
        let cfg = ExperimentConfig::load(path, &overrides)?;
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, self.format.parse()?, out))
    }
}

fn parse_mode(s: &str) -> Result<AttackMode> {
    match s {
        "white-box" => Ok(AttackMode::WhiteBox),
        "grey-box" => Ok(AttackMode::GreyBox),
        other => Err(Error::Config(format!("unknown attack mode `{other}`"))),
    }
}

fn mode_name(m: &AttackMode) -> &'static str {
    match m {
        AttackMode::WhiteBox => "white-box",
        AttackMode::GreyBox => "grey-box",
    }
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, common } => {
            let (cfg, formats, out) = common.load(&config)?;
            let r = run(&cfg)?;
            emit_run(&out, &r, formats)?;
            let s = &r.summary;
            println!(
                "config {}  rounds {}  overall {:.4} (final {:.4})  source {:.4}  stealth {}",
                &s.config_hash[..12],
                s.rounds,
                s.mean_overall,
                s.final_overall,
                s.source_overall,
                if s.stealth.all_ok() { "ok" } else { "VIOLATED" }
            );
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Sweep {
            config,
            axis,
            values,
            seeds,
            common,
        } => {
            let (cfg, formats, out) = common.load(&config)?;
            let axis: SweepAxis = axis.parse()?;
            let r = sweep(&cfg, axis, &values, seeds)?;
            emit_sweep(&out, &r, formats)?;
            for (v, m) in r.values.iter().zip(&r.mean_by_value) {
                println!("{axis} = {v}: overall {m:.4}");
            }
            if let Some(v) = &r.verdict {
                println!("trend {:?}: {}", v.trend, if v.pass { "pass" } else { "fail" });
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Gradcheck => {
            let results = run_gradcheck()?;
            let mut ok = true;
            for r in &results {
                ok &= r.pass;
                println!(
                    "{:<6} {:<18} wrt {:<6} max rel err {:.2e}",
                    if r.pass { "ok" } else { "FAIL" },
                    r.loss,
                    r.wrt,
                    r.max_rel_err
                );
            }
            Ok(ok)
        }
        Command::Selftest => {
            let checks = run_selftest();
            let mut ok = true;
            for c in &checks {
                ok &= c.pass;
                println!("{:<6} {} {}", if c.pass { "ok" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        // a failed check is a numeric failure
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
