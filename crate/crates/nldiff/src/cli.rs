//! Command dispatch for the `nldiff` binary.

use std::path::PathBuf;

use crate::config::{parse_config, RunConfig};
use crate::error::{NldError, Result};
use crate::pipeline;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Stationary,
    Simulate,
    Omega,
    Verify,
    Report,
    Selftest,
}

impl Command {
    pub fn parse(s: &str) -> Result<Command> {
        match s {
            "stationary" => Ok(Command::Stationary),
            "simulate" => Ok(Command::Simulate),
            "omega" => Ok(Command::Omega),
            "verify" => Ok(Command::Verify),
            "report" => Ok(Command::Report),
            "selftest" => Ok(Command::Selftest),
            other => Err(NldError::Config(format!(
                "unknown command `{other}` (expected stationary, simulate, omega, verify, \
                 report, or selftest)"
            ))),
        }
    }
}

/// Parsed command line.
#[derive(Debug)]
pub struct Cli {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub threads: Option<usize>,
}

pub const USAGE: &str = "usage: nldiff <stationary|simulate|omega|verify|report|selftest> \
                         [--config <path>] [--output <dir>] [--threads N]";

pub fn parse_args(args: &[String]) -> Result<Cli> {
    if args.is_empty() {
        return Err(NldError::Config(format!("missing command\n{USAGE}")));
    }
    let command = Command::parse(&args[0])?;
    let mut config = None;
    let mut output = None;
    let mut threads = None;
    let mut it = args[1..].iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--config" => {
                let v = it
                    .next()
                    .ok_or_else(|| NldError::Config("--config needs a path".into()))?;
                config = Some(PathBuf::from(v));
            }
            "--output" => {
                let v = it
                    .next()
                    .ok_or_else(|| NldError::Config("--output needs a directory".into()))?;
                output = Some(PathBuf::from(v));
            }
            "--threads" => {
                let v = it
                    .next()
                    .ok_or_else(|| NldError::Config("--threads needs a count".into()))?;
                threads = Some(v.parse::<usize>().map_err(|_| {
                    NldError::Config(format!("--threads: `{v}` is not an integer"))
                })?);
            }
            other => {
                return Err(NldError::Config(format!("unknown flag `{other}`\n{USAGE}")));
            }
        }
    }
    Ok(Cli {
        command,
        config,
        output,
        threads,
    })
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => {
            if cli.command == Command::Selftest {
                RunConfig::default()
            } else {
                return Err(NldError::Config(format!(
                    "--config is required for this command\n{USAGE}"
                )));
            }
        }
    };
    if let Some(out) = &cli.output {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

/// Run a parsed command line; returns the process exit code
/// (0 pass, 1 criterion failure, 2 configuration/setup error).
pub fn dispatch(cli: &Cli) -> i32 {
    let cfg = match load_config(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if cfg.threads > 0 {
        // Later calls with an already-built pool keep the first setting.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    match run_command(cli, &cfg) {
        Ok(all_pass) => {
            if all_pass {
                0
            } else {
                1
            }
        }
        Err(e @ NldError::Config(_)) | Err(e @ NldError::Dependency { .. }) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run_command(cli: &Cli, cfg: &RunConfig) -> Result<bool> {
    let out = pipeline::output_dir(cfg);
    if cli.command != Command::Selftest {
        std::fs::create_dir_all(&out)?;
        std::fs::write(
            out.join("resolved.cfg"),
            crate::config::render_resolved(cfg),
        )?;
    }
    match cli.command {
        Command::Stationary => {
            let geo = pipeline::build_geometry(cfg)?;
            let profile = pipeline::run_stationary(cfg, &geo, Some(&out))?;
            println!(
                "stationary: residual {:.3e}; C* fit {:.5} / flux {:.5}",
                profile.residual,
                profile.cstar_fit(),
                profile.cstar_flux()
            );
            Ok(true)
        }
        Command::Simulate => {
            let geo = pipeline::build_geometry(cfg)?;
            // Track the conserved weighted mass when a profile snapshot is
            // already on disk.
            let phi_path = out.join("phi.nldf");
            let phi = if phi_path.exists() {
                let (f, _) = crate::snapshot::read_snapshot(&phi_path)?;
                if f.grid.as_ref() != geo.grid.as_ref() {
                    return Err(NldError::GridMismatch(
                        "phi.nldf was computed on a different grid".into(),
                    ));
                }
                Some(f)
            } else {
                None
            };
            let (state, metrics, _snaps) =
                pipeline::run_simulate_with_phi(cfg, &geo, phi.as_ref(), Some(&out))?;
            let last = metrics.rows.last().unwrap();
            println!(
                "simulate: reached t = {:.3} in {} steps; mass {:.6e}, sup {:.3e}",
                state.time, state.step_count, last.mass, last.sup_u
            );
            Ok(true)
        }
        Command::Omega => {
            let geo = pipeline::build_geometry(cfg)?;
            let rows = pipeline::run_omega(cfg, &geo, Some(&out))?;
            for r in &rows {
                println!(
                    "omega t = {:>8.2}: t^(N/2) sup|omega - Gamma| = {:.4e}, L1 = {:.8}",
                    r.t, r.gaussian_gap, r.l1_norm
                );
            }
            Ok(true)
        }
        Command::Verify => {
            let (rows, all_pass) = pipeline::verify(cfg, Some(&out))?;
            print_rows(&rows);
            println!(
                "verify: {} of {} criteria pass",
                rows.iter().filter(|r| r.pass).count(),
                rows.len()
            );
            Ok(all_pass)
        }
        Command::Report => {
            let (rows, all_pass) = pipeline::report_from_artifacts(cfg, &out)?;
            print_rows(&rows);
            Ok(all_pass)
        }
        Command::Selftest => {
            let (rows, all_pass) = pipeline::selftest()?;
            print_rows(&rows);
            println!(
                "selftest: {} of {} checks pass",
                rows.iter().filter(|r| r.pass).count(),
                rows.len()
            );
            Ok(all_pass)
        }
    }
}

fn print_rows(rows: &[pipeline::CriterionRow]) {
    for r in rows {
        println!(
            "[{}] {:<4} {}: measured {:.6e} (predicted {:.6e}, tol {:.3e}) {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.id,
            r.name,
            r.measured,
            r.predicted,
            r.tolerance,
            if r.note.is_empty() { "" } else { &r.note }
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags() {
        let cli = parse_args(&[
            "verify".into(),
            "--config".into(),
            "a.cfg".into(),
            "--threads".into(),
            "4".into(),
        ])
        .unwrap();
        assert_eq!(cli.command, Command::Verify);
        assert_eq!(cli.threads, Some(4));
    }

    #[test]
    fn rejects_unknown_command_and_flags() {
        assert!(parse_args(&["explode".into()]).is_err());
        assert!(parse_args(&["verify".into(), "--what".into()]).is_err());
    }
}
