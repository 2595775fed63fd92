//! Pipeline stages shared by the subcommands. Upstream artifacts are read
//! from explicit paths when given and recomputed from the config otherwise.

use crate::config::PipelineConfig;
use crate::report::Report;
use crate::svg::{self, Envelope, Series};
use nodecert::dynamics_sim::{self, Plant, Trajectory};
use nodecert::fixtures::{self, ReferenceExample};
use nodecert::lmi_cert::{self, CertOutcome, ContractionCertificate, EnvelopeMode, EnvelopeParams};
use nodecert::lmi_solver;
use nodecert::nn_model::{self, Dataset, NodeModel};
use nodecert::numerics::{self, serde_mat, Mat, Vector};
use nodecert::sector::{self, SectorBounds};
use nodecert::synthesis::{self, ControllerSpec, CtrlForm};
use serde_json::{json, Value};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Failing stage, mapped one-to-one onto the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Bad command line or an unexpected internal error.
    Internal,
    Config,
    Io,
    Training,
    Bounds,
    Certification,
    Synthesis,
    Simulation,
    Verification,
}

impl Stage {
    pub fn code(self) -> u8 {
        match self {
            Stage::Internal => 1,
            Stage::Config => 2,
            Stage::Io => 3,
            Stage::Training => 4,
            Stage::Bounds => 5,
            Stage::Certification => 6,
            Stage::Synthesis => 7,
            Stage::Simulation => 8,
            Stage::Verification => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Internal => "internal",
            Stage::Config => "config",
            Stage::Io => "io",
            Stage::Training => "training",
            Stage::Bounds => "bounds",
            Stage::Certification => "certification",
            Stage::Synthesis => "synthesis",
            Stage::Simulation => "simulation",
            Stage::Verification => "verification",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub stage: Stage,
    pub message: String,
}

impl Failure {
    pub fn new(stage: Stage, message: impl Into<String>) -> Self {
        Self { stage, message: message.into() }
    }
}

fn fail<E: Display>(stage: Stage) -> impl Fn(E) -> Failure {
    move |e| Failure::new(stage, e.to_string())
}

/// Artifact paths supplied on the command line.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub bounds: Option<PathBuf>,
    pub controller: Option<PathBuf>,
    pub certificate: Option<PathBuf>,
    pub retrain: bool,
}

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub inputs: Inputs,
    pub report: Report,
    pub timing: Vec<(String, f64)>,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig, out: PathBuf, inputs: Inputs, command: &str) -> Self {
        Self { cfg, out, inputs, report: Report::new(command), timing: Vec::new() }
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), Failure> {
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|e| Failure::new(Stage::Io, format!("{}: {e}", path.display())))
    }

    fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).map_err(fail(Stage::Internal))?;
        text.push('\n');
        self.write(name, &text)
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T, Failure>) -> Result<T, Failure> {
        let start = Instant::now();
        let r = f(self);
        self.timing.push((stage.into(), start.elapsed().as_secs_f64()));
        r
    }

    fn plant(&self) -> Result<Plant, Failure> {
        self.cfg.plant().map_err(fail(Stage::Config))
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::new(Stage::Io, format!("{}: {e}", path.display())))
}

fn malformed<E: Display>(path: &Path) -> impl Fn(E) -> Failure + '_ {
    move |e| Failure::new(Stage::Io, format!("{}: {e}", path.display()))
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    serde_mat::to_rows(m)
}

fn vec_of(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Samples the training and validation sets from the configured plant.
pub fn gen_data(ctx: &mut Ctx) -> Result<(Dataset, Dataset), Failure> {
    ctx.timed("data", |ctx| {
        let plant = ctx.plant()?;
        let d = ctx.cfg.dataset.clone();
        let sample = |n, seed| {
            dynamics_sim::sample_dataset_with_noise(&plant, n, seed, d.noise_std).map_err(fail(Stage::Training))
        };
        let train = match &ctx.inputs.data {
            Some(p) => Dataset::from_json(&read(p)?).map_err(malformed(p))?,
            None => {
                let t = sample(d.train_samples, d.seed)?;
                ctx.write("data.json", &t.to_json())?;
                t
            }
        };
        let validation = sample(d.validation_samples, d.seed.wrapping_add(1))?;
        ctx.write("validation.json", &validation.to_json())?;
        ctx.report.stage(
            "data",
            json!({
                "source": if ctx.inputs.data.is_some() { "file" } else { "sampled" },
                "train_samples": train.len(),
                "validation_samples": validation.len(),
                "seed": d.seed,
                "noise_std": d.noise_std,
            }),
        );
        Ok((train, validation))
    })
}

fn fit(ctx: &mut Ctx, train: &Dataset, validation: &Dataset, dims: &[usize]) -> Result<NodeModel, Failure> {
    let cfg = ctx.cfg.training.train_config(ctx.cfg.dataset.seed);
    let margin = ctx.cfg.training.epsilon_margin;
    ctx.timed("training", |ctx| {
        let (mut model, report) = nn_model::train_node(train, dims, &cfg).map_err(fail(Stage::Training))?;
        let eps = nn_model::error_bound(&mut model, validation, margin).map_err(fail(Stage::Training))?;
        if !eps.is_finite() {
            return Err(Failure::new(Stage::Training, "validation residual is not finite"));
        }
        let train_stats = nn_model::residual_stats(&model, train).map_err(fail(Stage::Training))?;
        let val_stats = nn_model::residual_stats(&model, validation).map_err(fail(Stage::Training))?;
        ctx.write("model.json", &model.to_json())?;
        ctx.report.stage(
            "training",
            json!({
                "source": "trained",
                "dims": dims,
                "epochs": report.loss_history.len(),
                "final_loss": report.loss_history.last().copied(),
                "train_residual": train_stats,
                "validation_residual": val_stats,
                "epsilon_margin": margin,
                "epsilon": eps,
                "optimizer": cfg.optimizer,
                "schedule": cfg.schedule,
            }),
        );
        Ok(model)
    })
}

/// Samples data and trains a model with the configured architecture.
pub fn train(ctx: &mut Ctx) -> Result<NodeModel, Failure> {
    let (train, validation) = gen_data(ctx)?;
    let m = train.states.first().map_or(0, |x| x.len());
    let mut dims = vec![m];
    dims.extend(&ctx.cfg.training.hidden);
    dims.push(m);
    fit(ctx, &train, &validation, &dims)
}

/// The model from `--model`, or a freshly trained one.
pub fn model(ctx: &mut Ctx) -> Result<NodeModel, Failure> {
    match ctx.inputs.model.clone() {
        Some(p) => {
            let model = NodeModel::from_json(&read(&p)?).map_err(malformed(&p))?;
            ctx.report.stage(
                "training",
                json!({ "source": "file", "dims": model.net.dims(), "epsilon": model.epsilon }),
            );
            Ok(model)
        }
        None => train(ctx),
    }
}

fn bounds_summary(b: &SectorBounds) -> Value {
    json!(b
        .per_layer
        .iter()
        .map(|l| json!({ "alpha": l.alpha, "beta": l.beta }))
        .collect::<Vec<_>>())
}

/// Sector bounds from `--bounds`, the configured layer scalars, or interval
/// propagation over the model's box.
pub fn bounds(ctx: &mut Ctx, model: &NodeModel) -> Result<SectorBounds, Failure> {
    ctx.timed("bounds", |ctx| {
        let (b, source) = if let Some(p) = ctx.inputs.bounds.clone() {
            (serde_json::from_str::<SectorBounds>(&read(&p)?).map_err(malformed(&p))?, "file")
        } else if let Some(pairs) = &ctx.cfg.sector.layer_scalars {
            (SectorBounds::from_layer_scalars(&model.net, pairs).map_err(fail(Stage::Bounds))?, "layer_scalars")
        } else {
            let b = sector::propagate_sector_bounds(&model.net, &model.bounds.intervals()).map_err(fail(Stage::Bounds))?;
            (b, "propagated")
        };
        if b.layers() != model.net.hidden_layers() {
            return Err(Failure::new(
                Stage::Bounds,
                format!("{} sector layers for {} hidden layers", b.layers(), model.net.hidden_layers()),
            ));
        }
        ctx.write_json("bounds.json", &b)?;
        ctx.report.stage("bounds", json!({ "source": source, "layers": bounds_summary(&b) }));
        Ok(b)
    })
}

fn certificate_summary(c: &ContractionCertificate) -> Value {
    json!({
        "status": "certified",
        "P": rows(&c.p),
        "gamma": c.gamma,
        "mu": c.mu,
        "p_low": c.p_low,
        "p_up": c.p_up,
        "overshoot": c.overshoot(),
        "form": c.form,
        "convex_lambda_max": c.residuals.convex_lambda_max,
        "nonconvex_lambda_max": c.residuals.nonconvex_lambda_max,
    })
}

/// Runs the autonomous contraction LMI. An infeasible outcome is returned,
/// not raised; callers decide whether it is fatal.
pub fn certify(ctx: &mut Ctx, model: &NodeModel, b: &SectorBounds) -> Result<CertOutcome, Failure> {
    let opts = ctx.cfg.synthesis.solver.clone();
    ctx.timed("certification", |ctx| {
        let outcome = lmi_cert::certify(model, b, &opts).map_err(fail(Stage::Certification))?;
        match &outcome {
            CertOutcome::Certified(c) => {
                ctx.write("certificate.json", &format!("{}\n", c.to_json()))?;
                ctx.report.stage("certification", certificate_summary(c));
            }
            CertOutcome::Infeasible(inf) => {
                ctx.write_json("certification.json", &outcome)?;
                ctx.report.stage(
                    "certification",
                    json!({ "status": "infeasible", "phase1_value": inf.phase1_value, "message": inf.message }),
                );
            }
        }
        Ok(outcome)
    })
}

fn controller_summary(c: &ControllerSpec, source: &str) -> Value {
    json!({
        "source": source,
        "H": rows(&c.h),
        "W_umin": rows(&c.w_umin),
        "b_u": c.b_u,
        "S": rows(&c.s),
        "Y": rows(&c.y),
        "mu": c.mu,
        "gamma": c.gamma,
        "s_low": c.s_low,
        "s_up": c.s_up,
        "epsilon": c.epsilon,
        "radius": c.radius,
        "form": c.form,
        "plugin_lambda_max": c.plugin_lambda_max,
        "sweep_points": c.sweep_log.len(),
        "feasible_points": c.sweep_log.iter().filter(|p| p.status == lmi_solver::SolveStatus::Feasible).count(),
    })
}

/// Synthesizes a controller for `ẋ = f(x) + g u`.
pub fn synthesize(ctx: &mut Ctx, model: &NodeModel, g: &Mat, b: &SectorBounds) -> Result<ControllerSpec, Failure> {
    let opts = ctx.cfg.synthesis.clone();
    ctx.timed("synthesis", |ctx| {
        let spec = synthesis::synthesize(model, g, b, &opts).map_err(|e| {
            if let synthesis::SynthError::Infeasible { points } = &e {
                let _ = ctx.write_json("synthesis_sweep.json", points);
            }
            Failure::new(Stage::Synthesis, e.to_string())
        })?;
        ctx.write("controller.json", &format!("{}\n", spec.to_json()))?;
        ctx.report.stage("synthesis", controller_summary(&spec, "synthesized"));
        Ok(spec)
    })
}

/// The controller from `--controller`, or a fresh synthesis.
pub fn controller(ctx: &mut Ctx, model: &NodeModel, g: &Mat) -> Result<ControllerSpec, Failure> {
    match ctx.inputs.controller.clone() {
        Some(p) => {
            let spec = ControllerSpec::from_json(&read(&p)?).map_err(malformed(&p))?;
            ctx.report.stage("synthesis", controller_summary(&spec, "file"));
            Ok(spec)
        }
        None => {
            let b = bounds(ctx, model)?;
            synthesize(ctx, model, g, &b)
        }
    }
}

/// Configured initial conditions followed by uniform random draws.
pub fn initial_conditions(ctx: &Ctx, plant: &Plant) -> Result<Vec<Vector>, Failure> {
    let sim = &ctx.cfg.simulation;
    let mut starts: Vec<Vector> = sim.initial_conditions.iter().map(|c| Vector::from_column_slice(c)).collect();
    if sim.random_starts > 0 {
        let draws = dynamics_sim::sample_dataset(plant, sim.random_starts, sim.seed).map_err(fail(Stage::Simulation))?;
        starts.extend(draws.states);
    }
    if starts.is_empty() {
        return Err(Failure::new(Stage::Config, "no initial conditions: set simulation.initial_conditions or random_starts"));
    }
    Ok(starts)
}

pub struct LoopSummary {
    pub max_final_gap: f64,
    pub envelopes_pass: bool,
    pub any_exit: bool,
}

fn write_trajectories(ctx: &Ctx, trajs: &[Trajectory]) -> Result<Vec<String>, Failure> {
    let mut names = Vec::new();
    for (i, t) in trajs.iter().enumerate() {
        let name = format!("traj_{}.csv", i + 1);
        ctx.write(&name, &t.to_csv())?;
        names.push(name);
    }
    Ok(names)
}

fn max_final_gap(trajs: &[Trajectory]) -> f64 {
    let mut gap: f64 = 0.0;
    for (i, a) in trajs.iter().enumerate() {
        for b in &trajs[i + 1..] {
            gap = gap.max((a.last_state() - b.last_state()).norm());
        }
    }
    gap
}

/// Band `x* ± envelope(t)` for the largest initial distance.
fn envelope_band(trajs: &[Trajectory], x_star: &Vector, params: &EnvelopeParams, epsilon: f64) -> Envelope {
    let d0 = trajs.iter().map(|t| (&t.states[0] - x_star).norm()).fold(0.0, f64::max);
    let times = trajs.first().map(|t| t.times.clone()).unwrap_or_default();
    let width = times
        .iter()
        .map(|&t| lmi_cert::deviation_envelope(params, epsilon, d0, t, EnvelopeMode::ToEquilibrium))
        .collect();
    Envelope { center: vec_of(x_star), times, width }
}

/// Runs the true plant under `spec` from every start, checks each trajectory
/// against the to-equilibrium envelope and writes CSVs, `simulation.json`
/// and `figure.svg`.
pub fn closed_loop(
    ctx: &mut Ctx,
    plant: &Plant,
    model: &NodeModel,
    spec: &ControllerSpec,
    starts: &[Vector],
    title: &str,
) -> Result<LoopSummary, Failure> {
    let (h, horizon) = (ctx.cfg.simulation.step, ctx.cfg.simulation.horizon);
    ctx.timed("simulation", |ctx| {
        if plant.state_dim() != model.state_dim() || spec.g.shape() != plant.g.shape() {
            return Err(Failure::new(Stage::Config, "plant, model and controller dimensions disagree"));
        }
        let trajs = dynamics_sim::closed_loop_batch(plant, spec, &model.net, starts, horizon, h)
            .map_err(fail(Stage::Simulation))?;
        let names = write_trajectories(ctx, &trajs)?;
        let f = |x: &Vector| {
            let u = spec.control(&model.net, x).map_err(|e| dynamics_sim::SimError::Controller(e.to_string()))?;
            plant.actuated(x, &u)
        };
        let x_star = dynamics_sim::equilibrium_oracle(&f, trajs[0].last_state()).map_err(fail(Stage::Simulation))?;
        let params = spec.envelope();
        let reports: Vec<_> = trajs
            .iter()
            .map(|t| dynamics_sim::envelope_check(t, &x_star, &params, spec.epsilon))
            .collect();
        let decay = dynamics_sim::contraction_decay_test(&trajs, &params).map_err(fail(Stage::Simulation))?;
        let summary = LoopSummary {
            max_final_gap: max_final_gap(&trajs),
            envelopes_pass: reports.iter().all(|r| r.pass),
            any_exit: trajs.iter().any(|t| t.exited_box),
        };
        let per_traj: Vec<Value> = trajs
            .iter()
            .zip(&names)
            .zip(&reports)
            .map(|((t, name), r)| {
                json!({
                    "file": name,
                    "initial": vec_of(&t.states[0]),
                    "final": vec_of(t.last_state()),
                    "exited_box": t.exited_box,
                    "first_exit_time": t.first_exit.map(|k| t.times[k]),
                    "envelope": r,
                })
            })
            .collect();
        let body = json!({
            "mode": "closed_loop",
            "step": h,
            "horizon": horizon,
            "equilibrium": vec_of(&x_star),
            "envelope": { "c": params.c, "gamma": params.gamma, "epsilon": spec.epsilon,
                          "radius": params.radius(spec.epsilon, EnvelopeMode::ToEquilibrium) },
            "trajectories": per_traj,
            "max_final_gap": summary.max_final_gap,
            "envelopes_pass": summary.envelopes_pass,
            "any_exit": summary.any_exit,
            "pairwise_decay": decay,
        });
        ctx.write_json("simulation.json", &body)?;
        let series: Vec<Series> = trajs.iter().map(Series::from_trajectory).collect();
        let band = envelope_band(&trajs, &x_star, &params, spec.epsilon);
        ctx.write("figure.svg", &svg::plot_svg(&series, Some(&band), title))?;
        ctx.report.stage(
            "simulation",
            json!({
                "mode": "closed_loop",
                "trajectories": trajs.len(),
                "equilibrium": vec_of(&x_star),
                "max_final_gap": summary.max_final_gap,
                "envelopes_pass": summary.envelopes_pass,
                "worst_envelope_ratio": reports.iter().map(|r| r.worst_ratio).fold(0.0, f64::max),
                "any_exit": summary.any_exit,
                "pairwise_decay_pass": decay.pass,
            }),
        );
        Ok(summary)
    })
}

/// Simulates the certified model itself and runs the pairwise decay test.
pub fn certified_model_decay(ctx: &mut Ctx, model: &NodeModel, cert: &ContractionCertificate) -> Result<bool, Failure> {
    let (h, horizon) = (ctx.cfg.simulation.step, ctx.cfg.simulation.horizon);
    ctx.timed("simulation", |ctx| {
        let m = model.state_dim();
        let g = Mat::zeros(m, 1);
        let plant = dynamics_sim::node_plant(model.clone(), g).map_err(fail(Stage::Simulation))?;
        let starts = initial_conditions(ctx, &plant)?;
        let trajs: Vec<Trajectory> = starts
            .iter()
            .map(|x0| dynamics_sim::open_loop_simulate(&plant, x0, horizon, h))
            .collect::<Result<_, _>>()
            .map_err(fail(Stage::Simulation))?;
        let names = write_trajectories(ctx, &trajs)?;
        let decay = dynamics_sim::contraction_decay_test(&trajs, &cert.envelope()).map_err(fail(Stage::Simulation))?;
        let body = json!({
            "mode": "certified_model",
            "step": h,
            "horizon": horizon,
            "files": names,
            "envelope": cert.envelope(),
            "pairwise_decay": decay,
        });
        ctx.write_json("simulation.json", &body)?;
        let series: Vec<Series> = trajs.iter().map(Series::from_trajectory).collect();
        ctx.write("figure.svg", &svg::plot_svg(&series, None, "certified model"))?;
        ctx.report.stage(
            "simulation",
            json!({
                "mode": "certified_model",
                "trajectories": trajs.len(),
                "pairwise_decay_pass": decay.pass,
                "worst_decay_ratio": decay.worst_ratio,
            }),
        );
        Ok(decay.pass)
    })
}

/// Re-checks `p̲ I ⪯ P ⪯ p̄ I` and the non-convex condition of a certificate.
pub fn verify_certificate(ctx: &mut Ctx, model: &NodeModel, b: &SectorBounds, cert: &ContractionCertificate) -> Result<bool, Failure> {
    ctx.timed("verification", |ctx| {
        let r = lmi_cert::verify_certificate(model, b, cert, lmi_cert::PLUGIN_TOL).map_err(fail(Stage::Verification))?;
        let body = json!({ "artifact": "certificate", "tolerance": lmi_cert::PLUGIN_TOL, "report": r, "pass": r.pass });
        ctx.write_json("verification.json", &body)?;
        ctx.report.stage("verification", body);
        ctx.report.check(
            "certificate_verified",
            r.pass,
            format!("non-convex λ_max {:.3e}, bounds {}", r.nonconvex_lambda_max, r.lower_ok && r.upper_ok),
        );
        Ok(r.pass)
    })
}

/// Re-checks a controller: `s̲ I ⪯ S ⪯ s̄ I`, the cancellation weights, and
/// the non-convex closed-loop condition at `(S⁻¹, γ, H)`.
pub fn verify_controller(ctx: &mut Ctx, model: &NodeModel, b: &SectorBounds, spec: &ControllerSpec) -> Result<bool, Failure> {
    let tol = ctx.cfg.synthesis.verify_tol;
    ctx.timed("verification", |ctx| {
        let eig = numerics::sym_eig_bounds(&spec.s).map_err(fail(Stage::Verification))?;
        let s_ok = eig.lambda_min >= spec.s_low * (1.0 - 1e-9) - 1e-12 && eig.lambda_max <= spec.s_up * (1.0 + 1e-9) + 1e-12;
        let (w_umin, _) = synthesis::min_norm_cancellation(model.net.output_weight(), &spec.g).map_err(fail(Stage::Verification))?;
        let cancel_err = if w_umin.shape() == spec.w_umin.shape() { (&w_umin - &spec.w_umin).amax() } else { f64::INFINITY };
        let cancel_ok = cancel_err <= 1e-9 * (1.0 + w_umin.amax());
        let p = spec.s.clone().try_inverse().ok_or_else(|| Failure::new(Stage::Verification, "S is singular"))?;
        let lam = synthesis::assemble_ctrl_nonconvex(model, &spec.g, b, &p, spec.gamma, &spec.h)
            .map_err(fail(Stage::Verification))
            .and_then(|m| numerics::lambda_max(&m).map_err(fail(Stage::Verification)))?;
        let radius = synthesis::neighborhood_radius(spec.epsilon, spec.mu, spec.s_low, spec.s_up);
        let radius_ok = (radius - spec.radius).abs() <= 1e-12 * (1.0 + radius.abs());
        let pass = s_ok && cancel_ok && lam <= tol && radius_ok;
        let body = json!({
            "artifact": "controller",
            "tolerance": tol,
            "s_bounds_ok": s_ok,
            "s_eigen_range": [eig.lambda_min, eig.lambda_max],
            "cancellation_error": cancel_err,
            "nonconvex_lambda_max": lam,
            "radius_recomputed": radius,
            "radius_ok": radius_ok,
            "pass": pass,
        });
        ctx.write_json("verification.json", &body)?;
        ctx.report.stage("verification", body);
        ctx.report.check("controller_verified", pass, format!("non-convex λ_max {lam:.3e} (≤ {tol:.0e}), S bounds {s_ok}"));
        Ok(pass)
    })
}

pub fn load_certificate(path: &Path) -> Result<ContractionCertificate, Failure> {
    serde_json::from_str(&read(path)?).map_err(malformed(path))
}

/// The true plant with the input matrix the fixture controller assumes.
fn reference_plant(ex: &ReferenceExample) -> Result<Plant, Failure> {
    let plant = match ex.name {
        "ex1" => dynamics_sim::default_pendulum(),
        _ => dynamics_sim::default_vehicle(),
    };
    plant.with_input(ex.g.clone()).map_err(fail(Stage::Internal))
}

/// Maximum validation residual required of a retrained model.
pub const RETRAIN_RESIDUAL_TARGET: f64 = 0.01;
/// Radius required of the pendulum reproduction.
pub const EX1_RADIUS_TARGET: f64 = 0.05;
/// `μ` below which the vehicle reproduction counts as vanishing.
pub const EX2_MU_TARGET: f64 = 1e-6;

/// Plug-in of the printed `(S, Y, μ)` into the convex controller condition.
fn printed_plugin(ex: &ReferenceExample, sector: &[(f64, f64)]) -> Result<f64, Failure> {
    let sb = SectorBounds::from_layer_scalars(&ex.model.net, sector).map_err(fail(Stage::Internal))?;
    let s_low = numerics::sym_eig_bounds(&ex.printed_s).map_err(fail(Stage::Internal))?.lambda_min;
    let form = CtrlForm::default_for(ex.model.net.hidden_layers());
    let prob = synthesis::assemble_ctrl_convex(&ex.model, &ex.g, &sb, s_low, None, form).map_err(fail(Stage::Internal))?;
    let point = [
        ("S".to_string(), ex.printed_s.clone()),
        ("Y".to_string(), ex.printed_y.clone()),
        ("mu".to_string(), Mat::from_element(1, 1, ex.printed_mu)),
    ]
    .into_iter()
    .collect();
    let rep = lmi_solver::check_solution(&prob, &point, 0.0).map_err(fail(Stage::Internal))?;
    rep.residuals
        .iter()
        .find(|r| r.name == "closed_loop_contraction")
        .map(|r| r.lambda_max)
        .ok_or_else(|| Failure::new(Stage::Internal, "controller condition not found"))
}

/// Reproduces a shipped example: fixture weights (or a retrained model),
/// synthesis, and the closed loop on the true plant from the printed
/// initial conditions.
pub fn repro(ctx: &mut Ctx, name: &str) -> Result<(), Failure> {
    let ex = fixtures::by_name(name).ok_or_else(|| Failure::new(Stage::Config, format!("unknown example {name}")))?;
    let plant = reference_plant(&ex)?;
    let model = if ctx.inputs.retrain {
        let d = ctx.cfg.dataset.clone();
        let (train, validation) = ctx.timed("data", |ctx| {
            let s = |n, seed| dynamics_sim::sample_dataset(&plant, n, seed).map_err(fail(Stage::Training));
            let (t, v) = (s(d.train_samples, d.seed)?, s(d.validation_samples, d.seed.wrapping_add(1))?);
            ctx.write("data.json", &t.to_json())?;
            ctx.write("validation.json", &v.to_json())?;
            ctx.report.stage(
                "data",
                json!({ "source": "sampled", "train_samples": t.len(), "validation_samples": v.len(), "seed": d.seed }),
            );
            Ok((t, v))
        })?;
        let model = fit(ctx, &train, &validation, ex.model.net.dims())?;
        let max_res = nn_model::residual_stats(&model, &validation).map_err(fail(Stage::Training))?.max_norm;
        ctx.report.check(
            "validation_residual",
            max_res <= RETRAIN_RESIDUAL_TARGET,
            format!("max validation residual {max_res:.5} (≤ {RETRAIN_RESIDUAL_TARGET})"),
        );
        model
    } else {
        ctx.write("model.json", &ex.model.to_json())?;
        ctx.report.stage(
            "training",
            json!({ "source": "fixture", "dims": ex.model.net.dims(), "epsilon": ex.model.epsilon }),
        );
        ex.model.clone()
    };

    let b = bounds(ctx, &model)?;
    let spec = synthesize(ctx, &model, &ex.g, &b)?;
    ctx.report.check("synthesis_feasible", true, format!("form {:?}, μ = {:.4e}", spec.form, spec.mu));

    let starts: Vec<Vector> = ex.initial_conditions.iter().map(|c| Vector::from_column_slice(c)).collect();
    let title = format!("{name}: true plant under the synthesized controller");
    let lp = closed_loop(ctx, &plant, &model, &spec, &starts, &title)?;

    let s_inv = ex.printed_s.clone().try_inverse().ok_or_else(|| Failure::new(Stage::Internal, "printed S is singular"))?;
    let derived_h = &ex.printed_y * s_inv;
    let printed_eig = numerics::sym_eig_bounds(&ex.printed_s).map_err(fail(Stage::Internal))?;
    let eps = model.epsilon.unwrap_or(f64::NAN);
    let fixture_eps = ex.model.epsilon.unwrap_or(f64::NAN);
    let derived_radius =
        synthesis::neighborhood_radius(fixture_eps, ex.printed_mu, printed_eig.lambda_min, printed_eig.lambda_max);

    ctx.report.value("H", json!({ "printed": rows(&ex.printed_h), "derived": rows(&derived_h), "computed": rows(&spec.h) }));
    ctx.report.value("mu", json!({ "printed": ex.printed_mu, "computed": spec.mu }));
    ctx.report.value("gamma", json!({ "derived": printed_eig.lambda_min / ex.printed_mu, "computed": spec.gamma }));
    ctx.report.value(
        "radius",
        json!({ "printed": ex.printed_radius, "derived": derived_radius, "computed": spec.radius }),
    );
    ctx.report.value("epsilon", json!({ "fixture": fixture_eps, "computed": eps }));
    ctx.report.value(
        "sector",
        json!({
            "printed": ex.printed_sector.iter().map(|&(a, b)| json!([a, b])).collect::<Vec<_>>(),
            "computed": b.per_layer.iter().map(|l| json!([l.alpha, l.beta])).collect::<Vec<_>>(),
        }),
    );
    let mut plugin = json!({ "printed_sector": printed_plugin(&ex, &ex.printed_sector)? });
    if name == "ex1" {
        plugin["coefficient_alpha"] = json!(printed_plugin(&ex, &[(fixtures::EX1_COEFFICIENT_ALPHA, 1.0)])?);
    }
    ctx.report.value("printed_point_plugin_lambda_max", json!({ "derived": plugin }));

    if !ctx.inputs.retrain {
        ctx.report.check(
            "closed_loop_convergence",
            lp.max_final_gap <= 2.0 * spec.radius,
            format!("final pairwise gap {:.3e} (≤ 2 × radius {:.3e})", lp.max_final_gap, spec.radius),
        );
        ctx.report.check("envelope", lp.envelopes_pass, "to-equilibrium envelope on every trajectory");
        match name {
            "ex1" => ctx.report.check(
                "radius",
                spec.radius <= EX1_RADIUS_TARGET,
                format!("radius {:.5} (≤ {EX1_RADIUS_TARGET}, printed {})", spec.radius, ex.printed_radius),
            ),
            _ => ctx.report.check(
                "mu_vanishing",
                spec.mu < EX2_MU_TARGET,
                format!("μ = {:.4e} (< {EX2_MU_TARGET:.0e}, printed {:.4e})", spec.mu, ex.printed_mu),
            ),
        }
    }
    verify_controller(ctx, &model, &b, &spec)?;
    Ok(())
}

/// sample → train → ε → bounds → certify; if infeasible, synthesize and
/// simulate the closed loop; finally verify the produced artifact.
pub fn run(ctx: &mut Ctx) -> Result<(), Failure> {
    let model = model(ctx)?;
    let b = bounds(ctx, &model)?;
    match certify(ctx, &model, &b)? {
        CertOutcome::Certified(cert) => {
            ctx.report.check("certified", true, format!("γ = {:.4e}", cert.gamma));
            let decay = certified_model_decay(ctx, &model, &cert)?;
            ctx.report.check("contraction_decay", decay, "pairwise decay of the certified model");
            verify_certificate(ctx, &model, &b, &cert)?;
        }
        CertOutcome::Infeasible(_) => {
            let plant = ctx.plant()?;
            if plant.state_dim() != model.state_dim() {
                return Err(Failure::new(Stage::Config, "plant and model dimensions disagree"));
            }
            let spec = synthesize(ctx, &model, &plant.g, &b)?;
            let starts = initial_conditions(ctx, &plant)?;
            let lp = closed_loop(ctx, &plant, &model, &spec, &starts, "closed loop")?;
            ctx.report.check("envelope", lp.envelopes_pass, "to-equilibrium envelope on every trajectory");
            verify_controller(ctx, &model, &b, &spec)?;
        }
    }
    Ok(())
}

/// Plots trajectory CSVs, optionally with the envelope stored in a
/// `simulation.json`.
pub fn plot(ctx: &mut Ctx, files: &[PathBuf], simulation: Option<&Path>) -> Result<(), Failure> {
    let files: Vec<PathBuf> = if files.is_empty() {
        let mut found: Vec<(usize, PathBuf)> = std::fs::read_dir(&ctx.out)
            .map_err(|e| Failure::new(Stage::Io, format!("{}: {e}", ctx.out.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let n = p.file_name()?.to_str()?.strip_prefix("traj_")?.strip_suffix(".csv")?.parse().ok()?;
                Some((n, p))
            })
            .collect();
        found.sort();
        found.into_iter().map(|(_, p)| p).collect()
    } else {
        files.to_vec()
    };
    if files.is_empty() {
        return Err(Failure::new(Stage::Io, "no trajectory files to plot"));
    }
    let series: Vec<Series> = files
        .iter()
        .map(|p| read(p).and_then(|t| svg::parse_csv(&t).map_err(malformed(p))))
        .collect::<Result<_, _>>()?;
    let band = match simulation {
        None => None,
        Some(p) => {
            let v: Value = serde_json::from_str(&read(p)?).map_err(malformed(p))?;
            let get = |k: &str| v["envelope"][k].as_f64().ok_or_else(|| Failure::new(Stage::Io, format!("{}: envelope.{k} missing", p.display())));
            let center: Vec<f64> = serde_json::from_value(v["equilibrium"].clone()).map_err(malformed(p))?;
            let params = EnvelopeParams { c: get("c")?, gamma: get("gamma")? };
            let eps = get("epsilon")?;
            let d0 = series
                .iter()
                .map(|s| s.states[0].iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            let times = series[0].times.clone();
            let width = times
                .iter()
                .map(|&t| lmi_cert::deviation_envelope(&params, eps, d0, t, EnvelopeMode::ToEquilibrium))
                .collect();
            Some(Envelope { center, times, width })
        }
    };
    ctx.write("figure.svg", &svg::plot_svg(&series, band.as_ref(), "trajectories"))?;
    Ok(())
}
