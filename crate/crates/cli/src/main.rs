//! `nodecert`: learn, certify and control neural ODE models.
//!
//! Exit codes: 0 success, 1 usage or internal error, 2 configuration,
//! 3 file input/output, 4 training, 5 sector bounds, 6 certification
//! (including an infeasible certificate), 7 synthesis, 8 simulation,
//! 9 a verification check failed.

mod config;
mod pipeline;
mod report;
mod svg;

use clap::{Parser, Subcommand, ValueEnum};
use config::{ConfigError, PipelineConfig};
use nodecert::lmi_cert::CertOutcome;
use pipeline::{Ctx, Failure, Inputs, Stage};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "nodecert", version, about = "Contraction certificates and controllers for neural ODE models")]
struct Cli {
    /// Pipeline configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for data sampling, training and random initial conditions.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `repro`: train a fresh model instead of using the shipped weights.
    #[arg(long, global = true)]
    retrain: bool,
    /// Training data (JSON) instead of sampling.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Model (JSON) instead of training.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Sector bounds (JSON) instead of propagating them.
    #[arg(long, global = true)]
    bounds: Option<PathBuf>,
    /// Controller (JSON) instead of synthesizing one.
    #[arg(long, global = true)]
    controller: Option<PathBuf>,
    /// Certificate (JSON) for `verify`.
    #[arg(long, global = true)]
    certificate: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample training and validation data from the configured plant.
    GenData,
    /// Train a model and set its error bound from the validation data.
    Train,
    /// Compute layer sector bounds of the model's activations.
    Bounds,
    /// Search for a contraction certificate of the autonomous model.
    Certify,
    /// Synthesize a contracting state-feedback controller.
    Synthesize,
    /// Simulate the true plant under a controller from the configured starts.
    Simulate,
    /// Re-check a certificate or controller.
    Verify,
    /// Reproduce a shipped example end to end.
    Repro {
        #[arg(value_enum)]
        example: Example,
    },
    /// Plot trajectory CSVs (default: `traj_*.csv` in the output directory).
    Plot {
        files: Vec<PathBuf>,
        /// A `simulation.json` whose envelope is overlaid.
        #[arg(long)]
        simulation: Option<PathBuf>,
    },
    /// Full pipeline: train, bound, certify, and synthesize if certification fails.
    Run,
    /// Print the configuration JSON schema.
    Schema,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Example {
    Ex1,
    Ex2,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Bounds => "bounds",
            Command::Certify => "certify",
            Command::Synthesize => "synthesize",
            Command::Simulate => "simulate",
            Command::Verify => "verify",
            Command::Repro { example: Example::Ex1 } => "repro ex1",
            Command::Repro { example: Example::Ex2 } => "repro ex2",
            Command::Plot { .. } => "plot",
            Command::Run => "run",
            Command::Schema => "schema",
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    };
    cfg.map(|c| c.with_seed(cli.seed)).map_err(|e| match e {
        ConfigError::Io(m) => Failure::new(Stage::Io, m),
        ConfigError::Invalid(m) => Failure::new(Stage::Config, m),
    })
}

fn execute(ctx: &mut Ctx, command: &Command) -> Result<(), Failure> {
    match command {
        Command::GenData => pipeline::gen_data(ctx).map(drop),
        Command::Train => pipeline::train(ctx).map(drop),
        Command::Bounds => {
            let model = pipeline::model(ctx)?;
            pipeline::bounds(ctx, &model).map(drop)
        }
        Command::Certify => {
            let model = pipeline::model(ctx)?;
            let b = pipeline::bounds(ctx, &model)?;
            match pipeline::certify(ctx, &model, &b)? {
                CertOutcome::Certified(c) => {
                    ctx.report.check("certified", true, format!("γ = {:.4e}", c.gamma));
                    Ok(())
                }
                CertOutcome::Infeasible(inf) => {
                    ctx.report.check("certified", false, inf.message.clone());
                    Err(Failure::new(Stage::Certification, format!("contraction LMI infeasible: {}", inf.message)))
                }
            }
        }
        Command::Synthesize => {
            let model = pipeline::model(ctx)?;
            let g = ctx.cfg.plant().map_err(|e| Failure::new(Stage::Config, e))?.g;
            let b = pipeline::bounds(ctx, &model)?;
            pipeline::synthesize(ctx, &model, &g, &b).map(drop)
        }
        Command::Simulate => {
            let model = pipeline::model(ctx)?;
            let plant = ctx.cfg.plant().map_err(|e| Failure::new(Stage::Config, e))?;
            let spec = pipeline::controller(ctx, &model, &plant.g)?;
            let starts = pipeline::initial_conditions(ctx, &plant)?;
            let lp = pipeline::closed_loop(ctx, &plant, &model, &spec, &starts, "closed loop")?;
            ctx.report.check("envelope", lp.envelopes_pass, "to-equilibrium envelope on every trajectory");
            Ok(())
        }
        Command::Verify => {
            let model = pipeline::model(ctx)?;
            let b = pipeline::bounds(ctx, &model)?;
            if let Some(p) = ctx.inputs.certificate.clone() {
                let cert = pipeline::load_certificate(&p)?;
                pipeline::verify_certificate(ctx, &model, &b, &cert).map(drop)
            } else if ctx.inputs.controller.is_some() {
                let plant = ctx.cfg.plant().map_err(|e| Failure::new(Stage::Config, e))?;
                let spec = pipeline::controller(ctx, &model, &plant.g)?;
                pipeline::verify_controller(ctx, &model, &b, &spec).map(drop)
            } else {
                match pipeline::certify(ctx, &model, &b)? {
                    CertOutcome::Certified(cert) => pipeline::verify_certificate(ctx, &model, &b, &cert).map(drop),
                    CertOutcome::Infeasible(_) => {
                        let g = ctx.cfg.plant().map_err(|e| Failure::new(Stage::Config, e))?.g;
                        let spec = pipeline::synthesize(ctx, &model, &g, &b)?;
                        pipeline::verify_controller(ctx, &model, &b, &spec).map(drop)
                    }
                }
            }
        }
        Command::Repro { example } => pipeline::repro(ctx, if matches!(example, Example::Ex1) { "ex1" } else { "ex2" }),
        Command::Plot { files, simulation } => pipeline::plot(ctx, files, simulation.as_deref()),
        Command::Run => pipeline::run(ctx),
        Command::Schema => {
            print!("{}", config::SCHEMA);
            Ok(())
        }
    }
}

fn timing_json(timing: &[(String, f64)]) -> String {
    let mut map = serde_json::Map::new();
    for (stage, secs) in timing {
        let total = map.get(stage).and_then(|v| v.as_f64()).unwrap_or(0.0) + secs;
        map.insert(stage.clone(), serde_json::json!(total));
    }
    format!("{}\n", serde_json::to_string_pretty(&map).expect("timing serializes"))
}

fn write_outputs(ctx: &Ctx, failure: Option<&Failure>) -> Result<(), Failure> {
    if let Some(f) = failure {
        let body = serde_json::json!({ "stage": f.stage.name(), "code": f.stage.code(), "message": f.message });
        ctx.write("error.json", &format!("{}\n", serde_json::to_string_pretty(&body).expect("error serializes")))?;
    }
    if ctx.report.has_content() {
        let json = serde_json::to_string_pretty(&ctx.report.to_json()).expect("report serializes");
        ctx.write("report.json", &format!("{json}\n"))?;
        ctx.write("report.txt", &ctx.report.to_text())?;
    }
    ctx.write("timing.json", &timing_json(&ctx.timing))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if matches!(cli.command, Command::Schema) {
        print!("{}", config::SCHEMA);
        return ExitCode::SUCCESS;
    }

    let cfg = load_config(&cli);
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.as_ref().ok().and_then(|c| c.output_dir.clone().map(PathBuf::from)))
        .unwrap_or_else(|| PathBuf::from("out"));
    let failure_code = |f: &Failure| {
        eprintln!("error ({}): {}", f.stage.name(), f.message);
        ExitCode::from(f.stage.code())
    };
    if let Err(e) = std::fs::create_dir_all(&out) {
        return failure_code(&Failure::new(Stage::Io, format!("{}: {e}", out.display())));
    }
    let inputs = Inputs {
        data: cli.data.clone(),
        model: cli.model.clone(),
        bounds: cli.bounds.clone(),
        controller: cli.controller.clone(),
        certificate: cli.certificate.clone(),
        retrain: cli.retrain,
    };
    let mut ctx = match cfg {
        Ok(cfg) => Ctx::new(cfg, out, inputs, cli.command.name()),
        Err(f) => {
            let ctx = Ctx::new(PipelineConfig::default(), out, inputs, cli.command.name());
            let _ = write_outputs(&ctx, Some(&f));
            return failure_code(&f);
        }
    };

    let mut result = execute(&mut ctx, &cli.command);
    if let Err(f) = &result {
        ctx.report.fail(f.stage.name(), f.stage.code(), &f.message);
    } else if !ctx.report.pass() {
        let failed = ctx.report.failed_checks().join(", ");
        result = Err(Failure::new(Stage::Verification, format!("checks failed: {failed}")));
    }
    if let Err(f) = write_outputs(&ctx, result.as_ref().err()) {
        return failure_code(&f);
    }
    print!("{}", if ctx.report.has_content() { ctx.report.to_text() } else { String::new() });
    println!("outputs in {}", display(&ctx.out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => failure_code(&f),
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
