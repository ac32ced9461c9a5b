use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use poincare_core::build_measure;
use poincare_core::harness::{
    emit_outputs, evaluate, parse_model, run_sweep, summary_table, ModelContext, SweepConfig,
};
use poincare_core::model::check_assumptions;
use poincare_core::spectral::{read_density_csv, spectral_gap_from_samples};
use poincare_core::stein::{compute_ch, max_disagreement, rewrite_lipschitz, solve_stein};
use poincare_core::targets::{bounded_family, lipschitz_family};

#[derive(Parser)]
#[command(
    name = "poincare-lab",
    version,
    about = "Spectral-gap stability experiments for one-dimensional quotient diffusions"
)]
struct Cli {
    /// Model id: gaussian[:c_p], gamma:s,theta, sphere:d or quartic.
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    grid_size: Option<usize>,
    #[arg(long, global = true)]
    eps_steps: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// TOML sweep configuration; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the model and its assumption report.
    Model,
    /// Build the quotient measure and dump it to `measure.csv`.
    Measure,
    /// Solve the Stein equation for one target.
    Stein {
        #[arg(long, default_value = "id")]
        target: String,
    },
    /// Compute the Lipschitz Stein factor and write its profile.
    Ch,
    /// Spectral gap of a dumped density (columns `node` and `density`).
    Gap {
        #[arg(long)]
        density: PathBuf,
    },
    /// Evaluate one perturbation direction at one amplitude.
    Verify {
        #[arg(long, default_value = "cubic")]
        direction: String,
        /// Absolute amplitude; defaults to the direction's largest admissible one.
        #[arg(long, conflicts_with = "fraction")]
        eps: Option<f64>,
        /// Amplitude as a fraction of the largest admissible one.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Run the full ladder and write all reports.
    Sweep,
}

impl Cli {
    fn config(&self) -> Result<SweepConfig> {
        let mut c = match &self.config {
            Some(p) => SweepConfig::from_path(p).with_context(|| format!("loading {}", p.display()))?,
            None => SweepConfig::default(),
        };
        if let Some(m) = &self.model {
            c.model = m.clone();
        }
        if let Some(n) = self.grid_size {
            c.grid_size = n;
        }
        if let Some(k) = self.eps_steps {
            c.eps_steps = k;
        }
        if let Some(d) = &self.out_dir {
            c.out_dir = d.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let config = cli.config()?;
    let spec = parse_model(&config.model)?;
    match &cli.command {
        Command::Model => {
            let m = build_measure(&spec, config.grid_size)?;
            let assumptions = check_assumptions(&spec, m.nodes());
            println!("{spec:#?}");
            print_json(&json!({ "c_p": spec.c_p(), "assumptions": assumptions }))?;
        }
        Command::Measure => {
            let m = build_measure(&spec, config.grid_size)?;
            fs::create_dir_all(&config.out_dir)?;
            let path = config.out_dir.join("measure.csv");
            m.write_csv(&path)?;
            print_json(&json!({
                "model": config.model,
                "moments": m.moments,
                "density_sup": m.density_sup(),
                "written": path,
            }))?;
        }
        Command::Stein { target } => {
            let m = build_measure(&spec, config.grid_size)?;
            let (t, lipschitz) = match bounded_family().into_iter().find(|t| &t.label == target) {
                Some(t) => (t, false),
                None => (
                    lipschitz_family()
                        .into_iter()
                        .find(|t| &t.label == target)
                        .ok_or_else(|| anyhow!("unknown target {target:?}"))?,
                    true,
                ),
            };
            let sol = solve_stein(&m, &t)?;
            let mut out = json!({
                "target": sol.label,
                "mu_f": sol.mu_f,
                "residual_max": sol.residual_max,
                "residual_tolerance": sol.residual_tolerance(),
                "representation_gap": sol.representation_gap,
                "psi_at_zero": sol.psi[sol.nodes.partition_point(|&x| x < 0.0).min(sol.nodes.len() - 1)],
            });
            if lipschitz {
                out["lipschitz_form_disagreement"] = json!(max_disagreement(&sol, &rewrite_lipschitz(&m, &t)?));
            }
            print_json(&out)?;
        }
        Command::Ch => {
            let m = build_measure(&spec, config.grid_size)?;
            let ch = compute_ch(&m)?;
            fs::create_dir_all(&config.out_dir)?;
            let path = config.out_dir.join("ch_profile.csv");
            ch.write_csv(&path)?;
            print_json(&json!({
                "c_h": ch.c_h,
                "finite": ch.finite,
                "argmax": ch.argmax,
                "window_sups": ch.window_sups,
                "written": path,
            }))?;
        }
        Command::Gap { density } => {
            let (xs, ds, cdf) = read_density_csv(density)?;
            let r = spectral_gap_from_samples(&spec, &xs, &ds, cdf.as_deref())?;
            print_json(&json!({
                "lambda1": r.lambda1,
                "c_p_sharp": r.c_p_sharp,
                "grid_convergence": r.grid_convergence,
                "identity_correlation": r.identity_correlation,
            }))?;
        }
        Command::Verify {
            direction,
            eps,
            fraction,
        } => {
            let ctx = ModelContext::build(&config.model, config.grid_size, std::slice::from_ref(direction))?;
            let dir = ctx.direction(direction)?;
            let eps = match (eps, fraction) {
                (Some(e), _) => *e,
                (None, Some(f)) => f * dir.eps_max,
                (None, None) => dir.eps_max,
            };
            let report = evaluate(&ctx, dir, eps, &config)?;
            print_json(&serde_json::to_value(&report)?)?;
            return Ok(report.all_hold());
        }
        Command::Sweep => {
            let out = run_sweep(&config)?;
            emit_outputs(&out, &config.out_dir)?;
            print!("{}", summary_table(&out));
            return Ok(out.all_hold());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some inequalities do not hold");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
