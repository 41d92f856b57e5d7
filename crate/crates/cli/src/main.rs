//! `ic-lab` command-line front end.
//!
//! Exit status: 0 when every check passed, 1 when a check failed, 2 for
//! usage, configuration or input errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ic_lab::convergence::{linreg_gd_race, LrRule};
use ic_lab::infotheory::{correlation_scaling_check, theorem1_sweep, THEOREM_TOLERANCE};
use ic_lab::resnet::ResNet;
use ic_lab::trainer::{diagnose_zigzag, train, RunConfig};
use ic_lab::{Error, Rng};

const DEFAULT_OUT: &str = "ic-lab-out";

#[derive(Parser)]
#[command(name = "ic-lab", version, about = "IC-layer experiments and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory (the IC_LAB_OUT environment variable takes precedence).
    #[arg(long, default_value = DEFAULT_OUT)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network described by a config file.
    Train { config: PathBuf },
    /// Exact check that gating scales mutual information by p^2.
    #[command(name = "verify-theorem1")]
    VerifyTheorem1 {
        /// Keep probabilities, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        p: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Monte-Carlo check that gating scales correlation by p.
    #[command(name = "verify-correlation")]
    VerifyCorrelation {
        #[arg(long, value_delimiter = ',', required = true)]
        p: Vec<f64>,
        /// Planted correlations, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        c: Vec<f64>,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Sign coherence of per-sample weight gradients.
    #[command(name = "diagnose-zigzag")]
    DiagnoseZigzag { config: PathBuf },
    /// Gradient descent on whitened vs ill-conditioned least squares.
    #[command(name = "whiten-race")]
    WhitenRace {
        #[arg(long, default_value_t = 100.0)]
        kappa: f64,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// Required ratio of correlated to whitened iterations.
        #[arg(long, default_value_t = 10.0)]
        min_speedup: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Print and save the architecture summary of a config's network.
    #[command(name = "arch-dump")]
    ArchDump { config: PathBuf },
}

/// Outcome of a command that ran to completion.
struct Verdict {
    pass: bool,
    summary: String,
}

fn out_dir(configured: &Path) -> PathBuf {
    match std::env::var_os("IC_LAB_OUT").filter(|v| !v.is_empty()) {
        Some(dir) => PathBuf::from(dir),
        None => configured.to_path_buf(),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Error> {
    if !path.exists() {
        return Err(Error::Config(format!("config file {} does not exist", path.display())));
    }
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env_output();
    Ok(cfg)
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_csv(dir: &Path, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(name))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn verdict(pass: bool, command: &str, detail: String) -> Verdict {
    Verdict {
        pass,
        summary: format!("{} {command}: {detail}", if pass { "PASS" } else { "FAIL" }),
    }
}

fn cmd_train(config: &Path) -> Result<Verdict, Error> {
    let cfg = load_config(config)?;
    let outcome = match train(&cfg, &mut |r| {
        eprintln!(
            "epoch {:>3}  lr {:.1e}  train loss {:.4} acc {:.4}  test loss {:.4} acc {:.4}  ({} ms)",
            r.epoch, r.lr, r.train_loss, r.train_acc, r.test_loss, r.test_acc, r.wall_ms
        )
    }) {
        Ok(o) => o,
        Err(Error::NonFinite { epoch, batch, .. }) => {
            return Ok(verdict(
                false,
                "train",
                format!(
                    "non-finite loss at epoch {epoch}, batch {batch}; dump in {}",
                    cfg.output_dir.display()
                ),
            ))
        }
        Err(e) => return Err(e),
    };
    let last = outcome.records.last().expect("epochs >= 1");
    Ok(verdict(
        true,
        "train",
        format!(
            "{} epochs, final train acc {:.4}, test acc {:.4}, outputs in {}",
            outcome.records.len(),
            last.train_acc,
            last.test_acc,
            outcome.output_dir.display()
        ),
    ))
}

fn cmd_theorem1(p: &[f64], trials: usize, common: &Common) -> Result<Verdict, Error> {
    let dir = out_dir(&common.out);
    let reports = theorem1_sweep(&mut Rng::new(common.seed), trials, p)?;
    let failed = reports.iter().filter(|r| !r.pass).count();
    let worst = reports.iter().map(|r| r.mi_residual.max(r.entropy_residual)).fold(0.0, f64::max);
    write_json(&dir, "theorem1.json", &json!({ "command": "verify-theorem1", "seed": common.seed, "records": reports }))?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.p_keep.to_string(),
                r.mi_orig.to_string(),
                r.mi_gated.to_string(),
                r.mi_residual.to_string(),
                r.entropy_residual.to_string(),
                r.pass.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir,
        "theorem1.csv",
        &["p_keep", "mi_orig", "mi_gated", "mi_residual", "entropy_residual", "pass"],
        &rows,
    )?;
    Ok(verdict(
        failed == 0,
        "verify-theorem1",
        format!(
            "{}/{} records within {THEOREM_TOLERANCE:e} bits (worst residual {worst:.3e})",
            reports.len() - failed,
            reports.len()
        ),
    ))
}

fn cmd_correlation(p: &[f64], c: &[f64], samples: usize, common: &Common) -> Result<Verdict, Error> {
    let dir = out_dir(&common.out);
    let root = Rng::new(common.seed);
    let mut reports = Vec::new();
    for (i, &pk) in p.iter().enumerate() {
        for (j, &cv) in c.iter().enumerate() {
            let mut rng = root.child((i * c.len() + j) as u64);
            reports.push(correlation_scaling_check(&mut rng, pk, cv, samples)?);
        }
    }
    let within: Vec<bool> = reports.iter().map(|r| r.residual.abs() <= 3.0 * r.std_error).collect();
    let ok = within.iter().filter(|&&w| w).count();
    write_json(
        &dir,
        "correlation.json",
        &json!({ "command": "verify-correlation", "seed": common.seed, "records": reports, "within_3_se": within }),
    )?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .zip(&within)
        .map(|(r, w)| {
            vec![
                r.p_keep.to_string(),
                r.c_planted.to_string(),
                r.c_before.to_string(),
                r.c_after.to_string(),
                r.predicted.to_string(),
                r.residual.to_string(),
                r.std_error.to_string(),
                r.n_samples.to_string(),
                w.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir,
        "correlation.csv",
        &[
            "p_keep", "c_planted", "c_before", "c_after", "predicted", "residual", "std_error", "n_samples", "pass",
        ],
        &rows,
    )?;
    Ok(verdict(
        ok == reports.len(),
        "verify-correlation",
        format!("{ok}/{} gated correlations within 3 standard errors of p*c", reports.len()),
    ))
}

fn cmd_zigzag(config: &Path) -> Result<Verdict, Error> {
    let cfg = load_config(config)?;
    let dir = cfg.output_dir.clone();
    let report = diagnose_zigzag(&cfg)?;
    write_json(&dir, "zigzag.json", &json!({ "command": "diagnose-zigzag", "seed": cfg.seed, "report": report }))?;
    let row = |name: &str, fraction: f64, rows: usize| vec![name.to_string(), fraction.to_string(), rows.to_string()];
    write_csv(
        &dir,
        "zigzag.csv",
        &["probe", "coherent_fraction", "rows"],
        &[
            row("relu_fed", report.relu_fed.coherent_fraction, report.relu_fed.n_rows_measured),
            row("ic_fed", report.ic_fed.coherent_fraction, report.ic_fed.n_rows_measured),
            row("symmetric", report.symmetric.measured, report.symmetric.trials),
            row("network_head", report.network_head.coherent_fraction, report.network_head.n_rows_measured),
        ],
    )?;
    Ok(verdict(
        report.pass,
        "diagnose-zigzag",
        format!(
            "relu-fed {:.4}, ic-fed {:.4}, symmetric {:.4} vs {:.4} (3 sigma {:.4}), network head {:.4}",
            report.relu_fed.coherent_fraction,
            report.ic_fed.coherent_fraction,
            report.symmetric.measured,
            report.symmetric.expected,
            3.0 * report.symmetric.sigma,
            report.network_head.coherent_fraction
        ),
    ))
}

fn cmd_race(kappa: f64, dim: usize, tol: f64, min_speedup: f64, common: &Common) -> Result<Verdict, Error> {
    let dir = out_dir(&common.out);
    let report = linreg_gd_race(&mut Rng::new(common.seed), dim, kappa, tol, LrRule::InverseMaxEigenvalue)?;
    let speedup = report.correlated.iterations_to_tol as f64 / report.whitened.iterations_to_tol.max(1) as f64;
    let pass = speedup >= min_speedup;
    write_json(
        &dir,
        "whiten_race.json",
        &json!({ "command": "whiten-race", "seed": common.seed, "report": report, "speedup": speedup, "min_speedup": min_speedup, "pass": pass }),
    )?;
    let rows: Vec<Vec<String>> = [&report.whitened, &report.correlated]
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.kappa.to_string(),
                r.iterations_to_tol.to_string(),
                r.final_loss.to_string(),
                r.learning_rate.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir,
        "whiten_race.csv",
        &["design", "kappa", "iterations", "final_loss", "learning_rate"],
        &rows,
    )?;
    Ok(verdict(
        pass,
        "whiten-race",
        format!(
            "whitened {} vs correlated {} iterations (x{speedup:.1}, need x{min_speedup})",
            report.whitened.iterations_to_tol, report.correlated.iterations_to_tol
        ),
    ))
}

fn cmd_arch(config: &Path) -> Result<Verdict, Error> {
    let cfg = load_config(config)?;
    let mut spec = cfg.net.clone();
    let s = &cfg.data.synthetic;
    spec.in_channels = s.channels;
    let net = ResNet::<f32>::build(&spec, &mut Rng::new(cfg.seed))?;
    let summary = net.summary(&[1, s.channels, s.image_size, s.image_size])?;
    let value = serde_json::to_value(&summary)?;
    write_json(&cfg.output_dir, "arch.json", &value)?;
    let rows: Vec<Vec<String>> = summary
        .layers
        .iter()
        .map(|l| {
            vec![
                l.name.clone(),
                serde_json::to_value(l.kind).map(|v| v.as_str().unwrap_or_default().to_string()).unwrap_or_default(),
                l.output_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"),
                l.parameters.to_string(),
            ]
        })
        .collect();
    write_csv(&cfg.output_dir, "arch.csv", &["layer", "kind", "output_shape", "parameters"], &rows)?;
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(verdict(
        summary.weighted_layers == cfg.net.weighted_depth(),
        "arch-dump",
        format!(
            "{} weighted layers, {} parameters",
            summary.weighted_layers, summary.parameter_count
        ),
    ))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train { config } => cmd_train(config),
        Command::VerifyTheorem1 { p, trials, common } => cmd_theorem1(p, *trials, common),
        Command::VerifyCorrelation { p, c, samples, common } => cmd_correlation(p, c, *samples, common),
        Command::DiagnoseZigzag { config } => cmd_zigzag(config),
        Command::WhitenRace {
            kappa,
            dim,
            tol,
            min_speedup,
            common,
        } => cmd_race(*kappa, *dim, *tol, *min_speedup, common),
        Command::ArchDump { config } => cmd_arch(config),
    };
    match result {
        Ok(v) => {
            println!("{}", v.summary);
            ExitCode::from(if v.pass { 0 } else { 1 })
        }
        Err(e @ (Error::Divergence(_) | Error::NotConverged(_))) => {
            eprintln!("FAIL: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
