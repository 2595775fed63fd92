//! Controller `u(x) = H x + W_u wᵏ(x) + b_u`: least-norm cancellation of the
//! network output, convex synthesis of `H`, and recovery of the rate and
//! the guaranteed neighbourhood radius.

use crate::lmi_cert::{bar_selectors, inner_width, nonconvex_condition, CertError, EnvelopeParams};
use crate::lmi_solver::{
    self, assemble_affine, AffineExpr, ExprBlock, LmiError, LmiProblem, SolveStatus, SolverOptions, VarDecl,
};
use crate::nn_model::{FeedforwardNet, NodeModel};
use crate::numerics::{self, serde_mat, Mat, NumericsError, Vector};
use crate::sector::{build_q_range, SectorBounds, SectorError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model has no error bound; estimate epsilon first")]
    MissingEpsilon,
    #[error("{0}")]
    Unsupported(String),
    #[error("no sweep point is feasible ({} points tried)", .points.len())]
    Infeasible { points: Vec<SweepPoint> },
    #[error("synthesized controller failed plug-in verification (λ_max {0:.3e})")]
    Verification(f64),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error(transparent)]
    Cert(#[from] CertError),
    #[error(transparent)]
    Lmi(#[from] LmiError),
    #[error(transparent)]
    Sector(#[from] SectorError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `W_umin = −g⁺ W_out` and the uncancelled remainder `W_min = (I − g g⁺) W_out`.
pub fn min_norm_cancellation(w_out: &Mat, g: &Mat) -> Result<(Mat, Mat), SynthError> {
    if w_out.nrows() != g.nrows() {
        return Err(SynthError::Shape(format!(
            "output weight has {} rows, input matrix has {}",
            w_out.nrows(),
            g.nrows()
        )));
    }
    let g_pinv = numerics::pinv(g);
    let w_umin = -(&g_pinv * w_out);
    let w_min = w_out + g * &w_umin;
    Ok((w_umin, w_min))
}

fn check_input_matrix(model: &NodeModel, g: &Mat) -> Result<(), SynthError> {
    if g.nrows() != model.state_dim() || g.ncols() == 0 {
        return Err(SynthError::Shape(format!(
            "input matrix is {}x{}, state dimension is {}",
            g.nrows(),
            g.ncols(),
            model.state_dim()
        )));
    }
    Ok(())
}

/// Non-convex closed-loop condition at `(P, γ, H)`: the autonomous
/// condition with `A ← A + gH` and `W^{k+1} ← W_min`.
pub fn assemble_ctrl_nonconvex(
    model: &NodeModel,
    g: &Mat,
    bounds: &SectorBounds,
    p: &Mat,
    gamma: f64,
    h: &Mat,
) -> Result<Mat, SynthError> {
    check_input_matrix(model, g)?;
    if h.shape() != (g.ncols(), model.state_dim()) {
        return Err(SynthError::Shape("gain H has the wrong shape".into()));
    }
    let (_, w_min) = min_norm_cancellation(model.net.output_weight(), g)?;
    let acl = &model.a + g * h;
    let top = acl.transpose() * p + p * &acl + p * gamma;
    Ok(nonconvex_condition(model, bounds, &top, &(p * w_min))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtrlForm {
    /// One hidden layer, 3×3 block condition.
    SingleLayer,
    /// Two hidden layers, 4×4 block reduction.
    TwoLayer,
    /// Any `k ≥ 2`, selector form.
    Multilayer,
}

impl CtrlForm {
    pub fn default_for(k: usize) -> Self {
        match k {
            1 => CtrlForm::SingleLayer,
            2 => CtrlForm::TwoLayer,
            _ => CtrlForm::Multilayer,
        }
    }
}

/// `2αβ/(β−α)²` and `(α+β)/(β−α)` of the single-layer condition.
pub fn single_layer_coefficients(alpha: f64, beta: f64) -> (f64, f64) {
    let gap = (beta - alpha).max(crate::sector::MIN_SECTOR_GAP);
    (2.0 * alpha * beta / (gap * gap), (alpha + beta) / gap)
}

/// `λ̲ = λ_min(Q¹₁ᵀ Q¹₂)`.
pub fn first_layer_lambda(net: &FeedforwardNet, bounds: &SectorBounds) -> Result<f64, SynthError> {
    let q = build_q_range(net, bounds, 1, 1)?;
    let m = q.q1.transpose() * &q.q2;
    Ok(numerics::sym_eig_bounds(&((&m + m.transpose()) * 0.5))?.lambda_min)
}

/// Convex synthesis condition in `(S, Y, μ)` for a fixed `s̲`, with
/// `s̲ I ⪯ S ⪯ s̄_cap I` and objective `μ`.
pub fn assemble_ctrl_convex(
    model: &NodeModel,
    g: &Mat,
    bounds: &SectorBounds,
    s_low: f64,
    s_up_cap: Option<f64>,
    form: CtrlForm,
) -> Result<LmiProblem, SynthError> {
    check_input_matrix(model, g)?;
    bounds.check_against(&model.net)?;
    if !(s_low > 0.0) || s_up_cap.is_some_and(|c| !(c >= s_low)) {
        return Err(SynthError::Shape(format!("invalid metric bounds s_low {s_low}, cap {s_up_cap:?}")));
    }
    let net = &model.net;
    let dims = net.dims();
    let (m, k, l) = (dims[0], net.hidden_layers(), g.ncols());
    let mk = dims[k];
    let ok = matches!(
        (form, k),
        (CtrlForm::SingleLayer, 1) | (CtrlForm::TwoLayer, 2) | (CtrlForm::Multilayer, 2..)
    );
    if !ok {
        return Err(SynthError::Unsupported(format!("{form:?} condition for {k} hidden layers")));
    }
    let (_, w_min) = min_norm_cancellation(net.output_weight(), g)?;

    let mut prob = LmiProblem::new();
    prob.add_variable(VarDecl::symmetric("S", m).bounded(Some(s_low), s_up_cap))?;
    prob.add_variable(VarDecl::rectangular("Y", l, m))?;
    prob.add_variable(VarDecl::scalar("mu"))?;
    let s = AffineExpr::var("S", m, m);
    let neg_mu = AffineExpr::scalar("mu", &-Mat::identity(m, m));
    // (AS + gY)ᵀ + AS + gY
    let closed = (s.left_mul(&model.a) + AffineExpr::product(g, "Y", &Mat::identity(m, m), false)).sym();

    let expr = match form {
        CtrlForm::SingleLayer => {
            let w1 = &net.weights()[0];
            let (alpha, beta) = (bounds.alpha(1), bounds.beta(1));
            let gap = bounds.gap(1);
            let (c1, c2) = single_layer_coefficients(alpha, beta);
            let r_bar = closed - AffineExpr::constant(&w_min * w_min.transpose() * c1);
            let r_tilde = AffineExpr::constant(&w_min * c2) + s.right_mul(&(w1.transpose() * gap));
            assemble_affine(&[
                vec![neg_mu.into(), s.clone().into(), ExprBlock::Zero],
                vec![ExprBlock::Mirror, r_bar.into(), r_tilde.into()],
                vec![ExprBlock::Zero, ExprBlock::Mirror, (Mat::identity(mk, mk) * -2.0).into()],
            ])?
        }
        CtrlForm::TwoLayer => {
            let lambda = first_layer_lambda(net, bounds)?;
            let q1 = build_q_range(net, bounds, 1, 1)?;
            let q2 = build_q_range(net, bounds, 2, 2)?;
            let m1 = dims[1];
            let r_bar = closed - s.clone() * (2.0 * s_low * lambda);
            let x_h1 = s.right_mul(&(&q1.q1 + &q1.q2).transpose());
            let h1h1 = (q2.q1.transpose() * &q2.q2) * -2.0 - Mat::identity(m1, m1) * 2.0;
            let h1h1 = (&h1h1 + h1h1.transpose()) * 0.5;
            let h1h2 = (&q2.q1 + &q2.q2).transpose();
            assemble_affine(&[
                vec![neg_mu.into(), s.clone().into(), ExprBlock::Zero, ExprBlock::Zero],
                vec![ExprBlock::Mirror, r_bar.into(), x_h1.into(), w_min.clone().into()],
                vec![ExprBlock::Zero, ExprBlock::Mirror, h1h1.into(), h1h2.into()],
                vec![ExprBlock::Zero, ExprBlock::Mirror, ExprBlock::Mirror, (Mat::identity(mk, mk) * -2.0).into()],
            ])?
        }
        CtrlForm::Multilayer => {
            let lambda = first_layer_lambda(net, bounds)?;
            let q1 = build_q_range(net, bounds, 1, 1)?;
            let qa = build_q_range(net, bounds, 2, k)?;
            let a = inner_width(dims);
            let first = assemble_affine(&[
                vec![neg_mu.into(), s.clone().into(), ExprBlock::Zero],
                vec![ExprBlock::Mirror, closed.into(), w_min.clone().into()],
                vec![ExprBlock::Zero, ExprBlock::Mirror, Mat::zeros(mk, mk).into()],
            ])?;
            let qa_cross = (qa.q1.transpose() * &qa.q2) * -2.0;
            let qa_cross = (&qa_cross + qa_cross.transpose()) * 0.5;
            let x_bar = assemble_affine(&[
                vec![(s.clone() * (-2.0 * s_low * lambda)).into(), ExprBlock::Zero],
                vec![ExprBlock::Zero, qa_cross.into()],
            ])?;
            let x_tilde = assemble_affine(&[
                vec![s.right_mul(&(&q1.q1 + &q1.q2).transpose()).into(), ExprBlock::Zero],
                vec![ExprBlock::Zero, (&qa.q1 + &qa.q2).transpose().into()],
            ])?;
            let rest = a + mk;
            let second = assemble_affine(&[
                vec![Mat::zeros(m, m).into(), ExprBlock::Zero, ExprBlock::Zero],
                vec![ExprBlock::Mirror, x_bar.into(), x_tilde.into()],
                vec![ExprBlock::Zero, ExprBlock::Mirror, (Mat::identity(rest, rest) * -2.0).into()],
            ])?;
            let (ub1, ub2) = bar_selectors(m, a, mk);
            first.left_mul(&ub1.transpose()).right_mul(&ub1) + second.left_mul(&ub2.transpose()).right_mul(&ub2)
        }
    };
    prob.add_constraint("closed_loop_contraction", expr)?;
    prob.minimize("mu", Mat::identity(1, 1))?;
    Ok(prob)
}

/// `4 ε μ / s̲ · √(s̄/s̲)`.
pub fn neighborhood_radius(epsilon: f64, mu: f64, s_low: f64, s_up: f64) -> f64 {
    4.0 * epsilon * mu / s_low * (s_up / s_low).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum BiasMode {
    Zero,
    /// Cancel the closed-loop constant term at `x = 0` (least squares through `g`).
    ShiftToOrigin,
    Custom(Vec<f64>),
}

impl Default for BiasMode {
    fn default() -> Self {
        BiasMode::Zero
    }
}

/// Returns `b_u` and the norm of the closed-loop constant term at `x = 0`
/// left after applying it (zero unless shift-to-origin cannot cancel exactly).
pub fn select_bias(net: &FeedforwardNet, g: &Mat, mode: &BiasMode) -> Result<(Vector, f64), SynthError> {
    let l = g.ncols();
    match mode {
        BiasMode::Zero => Ok((Vector::zeros(l), 0.0)),
        BiasMode::Custom(v) => {
            if v.len() != l {
                return Err(SynthError::Shape(format!("custom bias has length {}, expected {l}", v.len())));
            }
            Ok((Vector::from_column_slice(v), 0.0))
        }
        BiasMode::ShiftToOrigin => {
            if net.hidden_layers() != 1 {
                return Err(SynthError::Unsupported(
                    "shift-to-origin bias is only defined for one hidden layer".into(),
                ));
            }
            let (_, w_min) = min_norm_cancellation(net.output_weight(), g)?;
            let constant = &w_min * net.biases()[0].map(f64::tanh) + net.output_bias();
            let b_u = -(numerics::pinv(g) * &constant);
            let residual = (constant + g * &b_u).norm();
            if residual > 1e-12 {
                log::warn!("shift-to-origin bias leaves a constant term of norm {residual:.3e}");
            }
            Ok((b_u, residual))
        }
    }
}

/// One inner solve of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub s_low: f64,
    pub kappa: f64,
    pub status: SolveStatus,
    #[serde(with = "numerics::serde_float")]
    pub mu: f64,
    /// `μ/s̲ · √(s̄/s̲)` with `s̄ = λ_max(S)`; infinite when infeasible.
    #[serde(with = "numerics::serde_float")]
    pub objective: f64,
    #[serde(with = "numerics::serde_float")]
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisOptions {
    /// Log grid for `s̲`: `[min, max]` with `per_decade` points per decade.
    pub s_low_min: f64,
    pub s_low_max: f64,
    pub s_low_per_decade: usize,
    /// Cap on the condition ratio `s̄/s̲`.
    pub kappa_max: f64,
    /// Points per decade of the `κ ∈ [1, κ_max]` grid; 0 uses only `κ_max`.
    pub kappa_per_decade: usize,
    /// Golden-section refinement of `κ` around the best grid point.
    pub refine_iterations: usize,
    /// After the sweep, minimize `‖Y‖` subject to `μ ≤ (1 + gain_slack) μ*`; `None` skips.
    pub gain_slack: Option<f64>,
    pub form: Option<CtrlForm>,
    pub bias: BiasMode,
    pub solver: SolverOptions,
    pub verify_tol: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            s_low_min: 1e-2,
            s_low_max: 1e2,
            s_low_per_decade: 10,
            kappa_max: 1e3,
            kappa_per_decade: 4,
            refine_iterations: 12,
            gain_slack: Some(0.01),
            form: None,
            bias: BiasMode::Zero,
            solver: SolverOptions::default(),
            verify_tol: 1e-8,
        }
    }
}

fn log_grid(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    if per_decade == 0 || hi <= lo {
        return vec![hi];
    }
    let decades = (hi / lo).log10();
    let n = (decades * per_decade as f64).round().max(1.0) as usize;
    (0..=n).map(|i| lo * 10f64.powf(decades * i as f64 / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSpec {
    #[serde(rename = "H", with = "serde_mat")]
    pub h: Mat,
    #[serde(rename = "W_umin", with = "serde_mat")]
    pub w_umin: Mat,
    pub b_u: Vec<f64>,
    pub gamma: f64,
    pub radius: f64,
    #[serde(rename = "S", with = "serde_mat")]
    pub s: Mat,
    #[serde(rename = "Y", with = "serde_mat")]
    pub y: Mat,
    pub mu: f64,
    pub s_low: f64,
    pub s_up: f64,
    pub epsilon: f64,
    #[serde(with = "serde_mat")]
    pub g: Mat,
    pub form: CtrlForm,
    /// Largest eigenvalue of the non-convex condition at `(S⁻¹, γ, H)`.
    pub plugin_lambda_max: f64,
    pub sweep_log: Vec<SweepPoint>,
}

impl ControllerSpec {
    /// `u(x) = H x + W_umin wᵏ(x) + b_u`.
    pub fn control(&self, net: &FeedforwardNet, x: &Vector) -> Result<Vector, SynthError> {
        let wk = net
            .last_hidden(x)
            .map_err(|e| SynthError::Shape(e.to_string()))?;
        if self.w_umin.ncols() != wk.len() || self.h.ncols() != x.len() {
            return Err(SynthError::Shape("controller does not match the network".into()));
        }
        Ok(&self.h * x + &self.w_umin * wk + Vector::from_column_slice(&self.b_u))
    }

    pub fn envelope(&self) -> EnvelopeParams {
        EnvelopeParams {
            c: (self.s_up / self.s_low).sqrt(),
            gamma: self.gamma,
        }
    }

    /// `P = S⁻¹`.
    pub fn metric(&self) -> Mat {
        self.s.clone().try_inverse().expect("S is positive definite")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("controller serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

struct Solved {
    point: SweepPoint,
    s: Mat,
    y: Mat,
}

fn solve_point(
    model: &NodeModel,
    g: &Mat,
    bounds: &SectorBounds,
    form: CtrlForm,
    s_low: f64,
    kappa: f64,
    opts: &SolverOptions,
) -> Result<Solved, SynthError> {
    let prob = assemble_ctrl_convex(model, g, bounds, s_low, Some(kappa * s_low), form)?;
    let sol = lmi_solver::solve(&prob, opts)?;
    let s = sol.value("S").cloned().unwrap_or_else(|| Mat::zeros(0, 0));
    let y = sol.value("Y").cloned().unwrap_or_else(|| Mat::zeros(0, 0));
    let mu = sol.scalar("mu").unwrap_or(f64::NAN);
    let objective = if sol.is_feasible() {
        let s_up = numerics::sym_eig_bounds(&s)?.lambda_max;
        mu / s_low * (s_up / s_low).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(Solved {
        point: SweepPoint {
            s_low,
            kappa,
            status: sol.status,
            mu,
            objective,
            max_residual: sol.max_residual,
        },
        s,
        y,
    })
}

fn better(a: &SweepPoint, b: &SweepPoint) -> bool {
    (a.objective, a.mu, a.kappa) < (b.objective, b.mu, b.kappa)
}

/// Sweeps `(s̲, κ)`, minimizing `μ` at each point, and returns the point
/// with the smallest `μ/s̲·√(s̄/s̲)` as a verified controller.
pub fn synthesize(
    model: &NodeModel,
    g: &Mat,
    bounds: &SectorBounds,
    opts: &SynthesisOptions,
) -> Result<ControllerSpec, SynthError> {
    let epsilon = model.epsilon.ok_or(SynthError::MissingEpsilon)?;
    check_input_matrix(model, g)?;
    let form = opts.form.unwrap_or_else(|| CtrlForm::default_for(model.net.hidden_layers()));
    let s_grid = log_grid(opts.s_low_min, opts.s_low_max, opts.s_low_per_decade);
    let k_grid = log_grid(1.0, opts.kappa_max, opts.kappa_per_decade);
    let pairs: Vec<(f64, f64)> = s_grid
        .iter()
        .flat_map(|&s| k_grid.iter().map(move |&k| (s, k)))
        .collect();
    let solved: Vec<Solved> = pairs
        .par_iter()
        .map(|&(s, k)| solve_point(model, g, bounds, form, s, k, &opts.solver))
        .collect::<Result<_, _>>()?;
    let mut log: Vec<SweepPoint> = solved.iter().map(|s| s.point.clone()).collect();
    let mut best_idx = None;
    for (i, s) in solved.iter().enumerate() {
        if s.point.status == SolveStatus::Feasible && best_idx.map_or(true, |b: usize| better(&s.point, &solved[b].point)) {
            best_idx = Some(i);
        }
    }
    let Some(best_idx) = best_idx else {
        return Err(SynthError::Infeasible { points: log });
    };
    let mut best = solved.into_iter().nth(best_idx).expect("index in range");

    if opts.refine_iterations > 0 && k_grid.len() > 1 {
        let pos = k_grid.iter().position(|&k| k == best.point.kappa).unwrap_or(0);
        let lo = k_grid[pos.saturating_sub(1)].ln();
        let hi = k_grid[(pos + 1).min(k_grid.len() - 1)].ln();
        let s_low = best.point.s_low;
        let eval = |lk: f64| solve_point(model, g, bounds, form, s_low, lk.exp(), &opts.solver);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (lo, hi);
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let mut fc = eval(c)?;
        let mut fd = eval(d)?;
        for _ in 0..opts.refine_iterations {
            log.push(fc.point.clone());
            log.push(fd.point.clone());
            if fc.point.objective <= fd.point.objective {
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = eval(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = eval(d)?;
            }
        }
        for cand in [fc, fd] {
            if cand.point.status == SolveStatus::Feasible && better(&cand.point, &best.point) {
                best = cand;
            }
        }
    }

    let (mut s, mut y, mut mu) = (best.s.clone(), best.y.clone(), best.point.mu);
    if let Some(slack) = opts.gain_slack {
        if let Some((s2, y2, mu2)) = regularize_gain(model, g, bounds, form, &best.point, slack, &opts.solver)? {
            s = s2;
            y = y2;
            mu = mu2;
        }
    }
    let s = (&s + s.transpose()) * 0.5;
    let eig = numerics::sym_eig_bounds(&s)?;
    let s_low = best.point.s_low.min(eig.lambda_min);
    let s_up = eig.lambda_max;
    let s_inv = s.clone().try_inverse().ok_or_else(|| SynthError::Solver("S is singular".into()))?;
    let h = &y * &s_inv;
    let gamma = s_low / mu;
    let (w_umin, _) = min_norm_cancellation(model.net.output_weight(), g)?;
    let (b_u, _) = select_bias(&model.net, g, &opts.bias)?;
    let plug = numerics::lambda_max(&assemble_ctrl_nonconvex(model, g, bounds, &s_inv, gamma, &h)?)?;
    if plug > opts.verify_tol {
        return Err(SynthError::Verification(plug));
    }
    Ok(ControllerSpec {
        h,
        w_umin,
        b_u: b_u.iter().copied().collect(),
        gamma,
        radius: neighborhood_radius(epsilon, mu, s_low, s_up),
        s,
        y,
        mu,
        s_low,
        s_up,
        epsilon,
        g: g.clone(),
        form,
        plugin_lambda_max: plug,
        sweep_log: log,
    })
}

/// Minimizes `‖Y‖₂` at the chosen sweep point subject to `μ ≤ (1+slack) μ*`.
/// Returns `None` if the auxiliary problem does not solve cleanly.
fn regularize_gain(
    model: &NodeModel,
    g: &Mat,
    bounds: &SectorBounds,
    form: CtrlForm,
    point: &SweepPoint,
    slack: f64,
    opts: &SolverOptions,
) -> Result<Option<(Mat, Mat, f64)>, SynthError> {
    let m = model.state_dim();
    let l = g.ncols();
    let mut prob = assemble_ctrl_convex(model, g, bounds, point.s_low, Some(point.kappa * point.s_low), form)?;
    prob.objective.clear();
    if let Some(v) = prob.variables.iter_mut().find(|v| v.name == "mu") {
        v.upper = Some(point.mu * (1.0 + slack));
    }
    prob.add_variable(VarDecl::scalar("t"))?;
    let norm = assemble_affine(&[
        vec![AffineExpr::scalar("t", &-Mat::identity(l, l)).into(), AffineExpr::var("Y", l, m).into()],
        vec![ExprBlock::Mirror, (-Mat::identity(m, m)).into()],
    ])?;
    prob.add_constraint("gain_norm", norm)?;
    prob.minimize("t", Mat::identity(1, 1))?;
    let sol = lmi_solver::solve(&prob, opts)?;
    if !sol.is_feasible() {
        log::warn!("gain regularization skipped: {}", sol.message);
        return Ok(None);
    }
    Ok(Some((
        sol.value("S").expect("declared").clone(),
        sol.value("Y").expect("declared").clone(),
        sol.scalar("mu").expect("declared"),
    )))
}
