//! Contraction conditions for the autonomous model `ẋ = A x + Z(x)`:
//! assembly, certification, verification and deviation envelopes.

use crate::lmi_solver::{self, assemble_affine, AffineExpr, ExprBlock, LmiError, LmiProblem, SolverOptions, VarDecl};
use crate::nn_model::NodeModel;
use crate::numerics::{self, assemble_blocks, Block, Mat, NumericsError};
use crate::sector::{build_q_matrices, QPair, SectorBounds, SectorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Sector(#[from] SectorError),
    #[error(transparent)]
    Lmi(#[from] LmiError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("solver failure: {0}")]
    Solver(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertForm {
    SingleLayerConvex,
    MultilayerConvex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertResiduals {
    /// Largest eigenvalue of the solved convex condition.
    pub convex_lambda_max: f64,
    /// Largest eigenvalue of the non-convex condition at `(P, γ)`.
    pub nonconvex_lambda_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionCertificate {
    #[serde(rename = "P", with = "numerics::serde_mat")]
    pub p: Mat,
    pub gamma: f64,
    pub mu: f64,
    pub p_low: f64,
    pub p_up: f64,
    pub form: CertForm,
    pub residuals: CertResiduals,
}

impl ContractionCertificate {
    /// Overshoot constant `c = √(p̄/p̲)`.
    pub fn overshoot(&self) -> f64 {
        (self.p_up / self.p_low).sqrt()
    }

    pub fn envelope(&self) -> EnvelopeParams {
        EnvelopeParams {
            c: self.overshoot(),
            gamma: self.gamma,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }
}

/// `(U1, U2)` for a state of size `m`, `a = Σ_{i<k} m_i` inner hidden
/// neurons and `m_k` last-layer neurons. `U1` picks `(x, wᵏ)` out of
/// `(x, w¹…wᵏ⁻¹, wᵏ)`; `U2` duplicates the inner block.
pub fn selectors(m: usize, a: usize, mk: usize) -> (Mat, Mat) {
    let n = m + a + mk;
    let mut u1 = Mat::zeros(m + mk, n);
    for i in 0..m {
        u1[(i, i)] = 1.0;
    }
    for i in 0..mk {
        u1[(m + i, m + a + i)] = 1.0;
    }
    let mut u2 = Mat::zeros(m + 2 * a + mk, n);
    for i in 0..m {
        u2[(i, i)] = 1.0;
    }
    for i in 0..a {
        u2[(m + i, m + i)] = 1.0;
        u2[(m + a + i, m + i)] = 1.0;
    }
    for i in 0..mk {
        u2[(m + 2 * a + i, m + a + i)] = 1.0;
    }
    (u1, u2)
}

/// Inner hidden width `a = m_1 + … + m_{k−1}`.
pub(crate) fn inner_width(dims: &[usize]) -> usize {
    let k = dims.len() - 2;
    dims[1..k].iter().sum()
}

fn check_bounds(model: &NodeModel, bounds: &SectorBounds) -> Result<(), CertError> {
    bounds.check_against(&model.net)?;
    Ok(())
}

/// Dense non-convex condition with generic top-left block `top` (`m×m`) and
/// output coupling `coupling` (`m×m_k`):
///
/// * `k = 1`: `[[top − 2αβ W¹ᵀW¹, coupling + (α+β)W¹ᵀ], [•, −2I]]`;
/// * `k ≥ 2`: `U1ᵀ[[top, coupling], [•, 0]]U1 + U2ᵀ[[−2Q1ᵀQ2, Q1ᵀ+Q2ᵀ], [•, −2I]]U2`.
pub(crate) fn nonconvex_condition(
    model: &NodeModel,
    bounds: &SectorBounds,
    top: &Mat,
    coupling: &Mat,
) -> Result<Mat, CertError> {
    check_bounds(model, bounds)?;
    let dims = model.net.dims();
    let (m, k) = (dims[0], model.net.hidden_layers());
    let mk = dims[k];
    if top.shape() != (m, m) || coupling.shape() != (m, mk) {
        return Err(CertError::Shape("condition blocks do not match the model".into()));
    }
    if k == 1 {
        let w1 = &model.net.weights()[0];
        let (a, b) = (bounds.alpha(1), bounds.beta(1));
        let tl = top - w1.transpose() * w1 * (2.0 * a * b);
        let off = coupling + w1.transpose() * (a + b);
        return Ok(assemble_blocks(&[
            vec![Block::Dense(tl), Block::Dense(off)],
            vec![Block::Mirror, Block::Dense(Mat::identity(mk, mk) * -2.0)],
        ])?);
    }
    let q = build_q_matrices(&model.net, bounds)?;
    let a = inner_width(dims);
    let (u1, u2) = selectors(m, a, mk);
    let first = assemble_blocks(&[
        vec![Block::Dense(top.clone()), Block::Dense(coupling.clone())],
        vec![Block::Mirror, Block::Dense(Mat::zeros(mk, mk))],
    ])?;
    let second = lemma_block(&q);
    Ok(u1.transpose() * first * &u1 + u2.transpose() * second * &u2)
}

/// `[[−2Q1ᵀQ2, Q1ᵀ+Q2ᵀ], [•, −2I]]`.
pub fn lemma_block(q: &QPair) -> Mat {
    let rows = q.q1.nrows();
    let cross = (q.q1.transpose() * &q.q2) * -2.0;
    let cross = (&cross + cross.transpose()) * 0.5;
    let off = (&q.q1 + &q.q2).transpose();
    let mut out = Mat::zeros(cross.nrows() + rows, cross.ncols() + rows);
    let c = cross.nrows();
    out.view_mut((0, 0), cross.shape()).copy_from(&cross);
    out.view_mut((0, c), off.shape()).copy_from(&off);
    out.view_mut((c, 0), (rows, c)).copy_from(&off.transpose());
    out.view_mut((c, c), (rows, rows)).copy_from(&(Mat::identity(rows, rows) * -2.0));
    out
}

/// Non-convex contraction condition at `(P, γ)`; NSD means contractive.
pub fn assemble_cert_nonconvex(model: &NodeModel, bounds: &SectorBounds, p: &Mat, gamma: f64) -> Result<Mat, CertError> {
    let a = &model.a;
    let top = a.transpose() * p + p * a + p * gamma;
    let coupling = p * model.net.output_weight();
    nonconvex_condition(model, bounds, &top, &coupling)
}

/// Fixed normalization of the lower metric bound.
pub const P_LOW: f64 = 1.0;

/// Convex condition in `(P, μ)` with `P ⪰ p̲ I`, `p̲ = 1`, minimizing `μ`.
pub fn assemble_cert_convex(model: &NodeModel, bounds: &SectorBounds) -> Result<LmiProblem, CertError> {
    check_bounds(model, bounds)?;
    let dims = model.net.dims();
    let (m, k) = (dims[0], model.net.hidden_layers());
    let mk = dims[k];
    let mut prob = LmiProblem::new();
    prob.add_variable(VarDecl::symmetric("P", m).bounded(Some(P_LOW), None))?;
    prob.add_variable(VarDecl::scalar("mu"))?;
    let p = AffineExpr::var("P", m, m);
    let neg_mu = AffineExpr::scalar("mu", &-Mat::identity(m, m));
    let lyap = p.right_mul(&model.a).sym();
    let p_w = p.right_mul(model.net.output_weight());
    let expr = if k == 1 {
        let w1 = &model.net.weights()[0];
        let (a, b) = (bounds.alpha(1), bounds.beta(1));
        let mid = lyap - AffineExpr::constant(w1.transpose() * w1 * (2.0 * a * b));
        let l = p_w + AffineExpr::constant(w1.transpose() * (a + b));
        assemble_affine(&[
            vec![neg_mu.into(), p.into(), ExprBlock::Zero],
            vec![ExprBlock::Mirror, mid.into(), l.into()],
            vec![ExprBlock::Zero, ExprBlock::Mirror, (Mat::identity(mk, mk) * -2.0).into()],
        ])?
    } else {
        let q = build_q_matrices(&model.net, bounds)?;
        let a = inner_width(dims);
        let first = assemble_affine(&[
            vec![neg_mu.into(), p.into(), ExprBlock::Zero],
            vec![ExprBlock::Mirror, lyap.into(), p_w.into()],
            vec![ExprBlock::Zero, ExprBlock::Mirror, Mat::zeros(mk, mk).into()],
        ])?;
        let second = numerics::block_diag(&[Mat::zeros(m, m), lemma_block(&q)]);
        let (ub1, ub2) = bar_selectors(m, a, mk);
        first.left_mul(&ub1.transpose()).right_mul(&ub1) + AffineExpr::constant(ub2.transpose() * second * &ub2)
    };
    prob.add_constraint("contraction", expr)?;
    prob.minimize("mu", Mat::identity(1, 1))?;
    Ok(prob)
}

/// `Ū1 = diag(I, U1)`, `Ū2 = diag(I, U2)`.
pub fn bar_selectors(m: usize, a: usize, mk: usize) -> (Mat, Mat) {
    let (u1, u2) = selectors(m, a, mk);
    let id = Mat::identity(m, m);
    (numerics::block_diag(&[id.clone(), u1]), numerics::block_diag(&[id, u2]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Infeasibility {
    /// Optimal slack of the feasibility phase; positive means infeasible.
    pub phase1_value: Option<f64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum CertOutcome {
    Certified(ContractionCertificate),
    Infeasible(Infeasibility),
}

/// Plug-in tolerance for the non-convex re-check.
pub const PLUGIN_TOL: f64 = 1e-8;

/// Solves the convex condition, recovers `γ = p̲/μ` and `p̄ = λ_max(P)(1+1e-9)`,
/// and re-verifies the result against the non-convex condition.
pub fn certify(model: &NodeModel, bounds: &SectorBounds, opts: &SolverOptions) -> Result<CertOutcome, CertError> {
    let prob = assemble_cert_convex(model, bounds)?;
    let sol = lmi_solver::solve(&prob, opts)?;
    match sol.status {
        lmi_solver::SolveStatus::Infeasible => {
            return Ok(CertOutcome::Infeasible(Infeasibility {
                phase1_value: sol.phase1_value,
                message: sol.message,
            }))
        }
        lmi_solver::SolveStatus::NumericalFailure => return Err(CertError::Solver(sol.message)),
        lmi_solver::SolveStatus::Feasible => {}
    }
    let p = sol.value("P").expect("declared").clone();
    let p = (&p + p.transpose()) * 0.5;
    let mu = sol.scalar("mu").expect("declared");
    let eig = numerics::sym_eig_bounds(&p)?;
    let p_low = P_LOW.min(eig.lambda_min);
    let gamma = p_low / mu;
    let nonconvex = numerics::lambda_max(&assemble_cert_nonconvex(model, bounds, &p, gamma)?)?;
    let cert = ContractionCertificate {
        p,
        gamma,
        mu,
        p_low,
        p_up: eig.lambda_max * (1.0 + 1e-9),
        form: if model.net.hidden_layers() == 1 {
            CertForm::SingleLayerConvex
        } else {
            CertForm::MultilayerConvex
        },
        residuals: CertResiduals {
            convex_lambda_max: sol.max_residual,
            nonconvex_lambda_max: nonconvex,
        },
    };
    let report = verify_certificate(model, bounds, &cert, PLUGIN_TOL)?;
    if !report.pass {
        return Err(CertError::Solver(format!(
            "certificate failed re-verification (non-convex λ_max {:.3e})",
            report.nonconvex_lambda_max
        )));
    }
    Ok(CertOutcome::Certified(cert))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    /// `λ_min(P − p̲ I)`.
    pub lower_margin: f64,
    /// `λ_min(p̄ I − P)`.
    pub upper_margin: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
    pub nonconvex_lambda_max: f64,
    pub nonconvex_ok: bool,
    pub pass: bool,
}

/// Checks `p̲ I ⪯ P ⪯ p̄ I` (by Cholesky) and NSD of the non-convex condition.
pub fn verify_certificate(
    model: &NodeModel,
    bounds: &SectorBounds,
    cert: &ContractionCertificate,
    tol: f64,
) -> Result<VerifyReport, CertError> {
    let n = cert.p.nrows();
    let id = Mat::identity(n, n);
    let lower = &cert.p - &id * cert.p_low;
    let upper = &id * cert.p_up - &cert.p;
    // semidefinite bounds: shift by tol so equality passes
    let lower_ok = numerics::cholesky_pd(&(&lower + &id * tol.max(1e-12)))?.is_some();
    let upper_ok = numerics::cholesky_pd(&(&upper + &id * tol.max(1e-12)))?.is_some();
    let nonconvex_lambda_max = numerics::lambda_max(&assemble_cert_nonconvex(model, bounds, &cert.p, cert.gamma)?)?;
    let nonconvex_ok = nonconvex_lambda_max <= tol;
    Ok(VerifyReport {
        lower_margin: numerics::sym_eig_bounds(&lower)?.lambda_min,
        upper_margin: numerics::sym_eig_bounds(&upper)?.lambda_min,
        lower_ok,
        upper_ok,
        nonconvex_lambda_max,
        nonconvex_ok,
        pass: lower_ok && upper_ok && nonconvex_ok,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvelopeMode {
    BetweenTrajectories,
    ToEquilibrium,
}

impl EnvelopeMode {
    fn factor(self) -> f64 {
        match self {
            EnvelopeMode::BetweenTrajectories => 2.0,
            EnvelopeMode::ToEquilibrium => 4.0,
        }
    }
}

/// Constants of the exponential cone `c·e^{−γt/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeParams {
    pub c: f64,
    pub gamma: f64,
}

impl EnvelopeParams {
    /// Decay rate `γ/2`.
    pub fn rate(&self) -> f64 {
        self.gamma / 2.0
    }

    /// Asymptotic neighbourhood size `K ε/γ · c`.
    pub fn radius(&self, epsilon: f64, mode: EnvelopeMode) -> f64 {
        mode.factor() * epsilon / self.gamma * self.c
    }
}

/// `c·d0·e^{−γt/2} + K(ε/γ)c(1 − e^{−γt/2})`, `K = 2` between trajectories
/// and `K = 4` to the equilibrium.
pub fn deviation_envelope(params: &EnvelopeParams, epsilon: f64, d0: f64, t: f64, mode: EnvelopeMode) -> f64 {
    let decay = (-params.rate() * t).exp();
    params.c * d0 * decay + params.radius(epsilon, mode) * (1.0 - decay)
}
