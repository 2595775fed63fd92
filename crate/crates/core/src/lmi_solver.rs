//! Small dense semidefinite programs: affine matrix inequalities
//! `M_j(x) ⪯ 0` over matrix and scalar variables with a linear objective,
//! solved by a log-determinant barrier method.

use crate::numerics::{self, resolve_layout, serde_mat, Mat, NumericsError};
use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::ops::{Add, Mul, Neg, Sub};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmiError {
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("variable `{0}` declared twice")]
    DuplicateVariable(String),
    #[error("assignment is missing variable `{0}`")]
    MissingVariable(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("constraint `{0}` is not symmetric")]
    NotSymmetric(String),
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    Symmetric { n: usize },
    Rectangular { rows: usize, cols: usize },
    Scalar,
}

impl VarKind {
    pub fn shape(&self) -> (usize, usize) {
        match *self {
            VarKind::Symmetric { n } => (n, n),
            VarKind::Rectangular { rows, cols } => (rows, cols),
            VarKind::Scalar => (1, 1),
        }
    }

    /// Number of free coordinates.
    pub fn coords(&self) -> usize {
        match *self {
            VarKind::Symmetric { n } => n * (n + 1) / 2,
            VarKind::Rectangular { rows, cols } => rows * cols,
            VarKind::Scalar => 1,
        }
    }

    /// Matrix with coordinate `idx` set to `value` and all others zero.
    fn unit(&self, idx: usize, value: f64) -> Mat {
        let (r, c) = self.shape();
        let mut m = Mat::zeros(r, c);
        match *self {
            VarKind::Symmetric { n } => {
                let (i, j) = sym_coord(n, idx);
                m[(i, j)] = value;
                m[(j, i)] = value;
            }
            VarKind::Rectangular { cols, .. } => m[(idx / cols, idx % cols)] = value,
            VarKind::Scalar => m[(0, 0)] = value,
        }
        m
    }

    fn from_coords(&self, x: &[f64]) -> Mat {
        let (r, c) = self.shape();
        let mut m = Mat::zeros(r, c);
        for (idx, &v) in x.iter().enumerate() {
            m += self.unit(idx, v);
        }
        m
    }
}

/// Upper-triangle coordinate `idx` of an `n×n` symmetric matrix, row-major.
fn sym_coord(n: usize, mut idx: usize) -> (usize, usize) {
    for i in 0..n {
        let len = n - i;
        if idx < len {
            return (i, i + idx);
        }
        idx -= len;
    }
    unreachable!("coordinate out of range")
}

/// A decision variable. For symmetric variables the optional bounds are
/// eigenvalue bounds `lower·I ⪯ V ⪯ upper·I`; for scalars they are plain
/// bounds. Rectangular variables take no bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarDecl {
    pub name: String,
    pub kind: VarKind,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// Adds `V ≻ 0` (by the solve margin).
    pub positive_definite: bool,
}

impl VarDecl {
    fn plain(name: &str, kind: VarKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            lower: None,
            upper: None,
            positive_definite: false,
        }
    }

    pub fn symmetric(name: &str, n: usize) -> Self {
        Self::plain(name, VarKind::Symmetric { n })
    }

    pub fn rectangular(name: &str, rows: usize, cols: usize) -> Self {
        Self::plain(name, VarKind::Rectangular { rows, cols })
    }

    pub fn scalar(name: &str) -> Self {
        Self::plain(name, VarKind::Scalar)
    }

    pub fn bounded(mut self, lower: Option<f64>, upper: Option<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn positive_definite(mut self) -> Self {
        self.positive_definite = true;
        self
    }
}

/// One variable-linear part of an [`AffineExpr`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    /// `left · V · right`, or `left · Vᵀ · right` when `transposed`.
    Product {
        var: String,
        #[serde(with = "serde_mat")]
        left: Mat,
        #[serde(with = "serde_mat")]
        right: Mat,
        transposed: bool,
    },
    /// `v · coeff` for a scalar variable `v`.
    Scalar {
        var: String,
        #[serde(with = "serde_mat")]
        coeff: Mat,
    },
}

impl Term {
    fn var(&self) -> &str {
        match self {
            Term::Product { var, .. } | Term::Scalar { var, .. } => var,
        }
    }

    fn transpose(&self) -> Term {
        match self {
            Term::Product {
                var,
                left,
                right,
                transposed,
            } => Term::Product {
                var: var.clone(),
                left: right.transpose(),
                right: left.transpose(),
                transposed: !transposed,
            },
            Term::Scalar { var, coeff } => Term::Scalar {
                var: var.clone(),
                coeff: coeff.transpose(),
            },
        }
    }

    fn embed(&self, er: &Mat, ec_t: &Mat) -> Term {
        match self {
            Term::Product {
                var,
                left,
                right,
                transposed,
            } => Term::Product {
                var: var.clone(),
                left: er * left,
                right: right * ec_t,
                transposed: *transposed,
            },
            Term::Scalar { var, coeff } => Term::Scalar {
                var: var.clone(),
                coeff: er * coeff * ec_t,
            },
        }
    }

    fn eval(&self, value: &Mat) -> Mat {
        match self {
            Term::Product {
                left,
                right,
                transposed,
                ..
            } => {
                if *transposed {
                    left * value.transpose() * right
                } else {
                    left * value * right
                }
            }
            Term::Scalar { coeff, .. } => coeff * value[(0, 0)],
        }
    }

    fn check_shape(&self, rows: usize, cols: usize, kind: VarKind) -> Result<(), String> {
        let (vr, vc) = kind.shape();
        match self {
            Term::Product {
                left,
                right,
                transposed,
                var,
            } => {
                let (vr, vc) = if *transposed { (vc, vr) } else { (vr, vc) };
                if left.ncols() != vr || right.nrows() != vc || left.nrows() != rows || right.ncols() != cols {
                    return Err(format!(
                        "term in `{var}`: {}x{} · {vr}x{vc} · {}x{} does not give {rows}x{cols}",
                        left.nrows(),
                        left.ncols(),
                        right.nrows(),
                        right.ncols()
                    ));
                }
            }
            Term::Scalar { coeff, var } => {
                if kind != VarKind::Scalar {
                    return Err(format!("`{var}` used as a scalar"));
                }
                if coeff.shape() != (rows, cols) {
                    return Err(format!("scalar coefficient of `{var}` has the wrong shape"));
                }
            }
        }
        Ok(())
    }
}

/// Matrix-valued affine function of the decision variables.
///
/// Arithmetic operators panic on shape mismatch, like matrix arithmetic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineExpr {
    pub rows: usize,
    pub cols: usize,
    #[serde(with = "serde_mat")]
    pub constant: Mat,
    pub terms: Vec<Term>,
}

impl AffineExpr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(Mat::zeros(rows, cols))
    }

    pub fn constant(m: Mat) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            constant: m,
            terms: Vec::new(),
        }
    }

    /// The variable itself, of shape `rows×cols`.
    pub fn var(name: &str, rows: usize, cols: usize) -> Self {
        Self::product(&Mat::identity(rows, rows), name, &Mat::identity(cols, cols), false)
    }

    /// `left · V · right` (or with `Vᵀ`).
    pub fn product(left: &Mat, name: &str, right: &Mat, transposed: bool) -> Self {
        Self {
            rows: left.nrows(),
            cols: right.ncols(),
            constant: Mat::zeros(left.nrows(), right.ncols()),
            terms: vec![Term::Product {
                var: name.to_string(),
                left: left.clone(),
                right: right.clone(),
                transposed,
            }],
        }
    }

    /// `v · coeff` for a scalar variable.
    pub fn scalar(name: &str, coeff: &Mat) -> Self {
        Self {
            rows: coeff.nrows(),
            cols: coeff.ncols(),
            constant: Mat::zeros(coeff.nrows(), coeff.ncols()),
            terms: vec![Term::Scalar {
                var: name.to_string(),
                coeff: coeff.clone(),
            }],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn transpose(&self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            constant: self.constant.transpose(),
            terms: self.terms.iter().map(Term::transpose).collect(),
        }
    }

    /// `m · self`.
    pub fn left_mul(&self, m: &Mat) -> Self {
        assert_eq!(m.ncols(), self.rows, "left factor does not match expression rows");
        let id = Mat::identity(self.cols, self.cols);
        Self {
            rows: m.nrows(),
            cols: self.cols,
            constant: m * &self.constant,
            terms: self.terms.iter().map(|t| t.embed(m, &id)).collect(),
        }
    }

    /// `self · m`.
    pub fn right_mul(&self, m: &Mat) -> Self {
        assert_eq!(m.nrows(), self.cols, "right factor does not match expression columns");
        let id = Mat::identity(self.rows, self.rows);
        Self {
            rows: self.rows,
            cols: m.ncols(),
            constant: &self.constant * m,
            terms: self.terms.iter().map(|t| t.embed(&id, m)).collect(),
        }
    }

    /// `self + selfᵀ`.
    pub fn sym(&self) -> Self {
        self.clone() + self.transpose()
    }

    /// Evaluates at an assignment.
    pub fn eval(&self, assignment: &BTreeMap<String, Mat>) -> Result<Mat, LmiError> {
        let mut out = self.constant.clone();
        for t in &self.terms {
            let v = assignment
                .get(t.var())
                .ok_or_else(|| LmiError::MissingVariable(t.var().to_string()))?;
            let contrib = t.eval(v);
            if contrib.shape() != out.shape() {
                return Err(LmiError::Shape(format!("variable `{}` has the wrong shape", t.var())));
            }
            out += contrib;
        }
        Ok(out)
    }

    fn vars(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(Term::var)
    }
}

impl Add for AffineExpr {
    type Output = AffineExpr;
    fn add(mut self, rhs: AffineExpr) -> AffineExpr {
        assert_eq!(self.shape(), rhs.shape(), "affine expressions of different shapes");
        self.constant += rhs.constant;
        self.terms.extend(rhs.terms);
        self
    }
}

impl Neg for AffineExpr {
    type Output = AffineExpr;
    fn neg(self) -> AffineExpr {
        self * -1.0
    }
}

impl Sub for AffineExpr {
    type Output = AffineExpr;
    fn sub(self, rhs: AffineExpr) -> AffineExpr {
        self + (-rhs)
    }
}

impl Mul<f64> for AffineExpr {
    type Output = AffineExpr;
    fn mul(mut self, s: f64) -> AffineExpr {
        self.constant *= s;
        for t in &mut self.terms {
            match t {
                Term::Product { left, .. } => *left *= s,
                Term::Scalar { coeff, .. } => *coeff *= s,
            }
        }
        self
    }
}

impl From<Mat> for AffineExpr {
    fn from(m: Mat) -> Self {
        AffineExpr::constant(m)
    }
}

/// Cell of an affine block layout.
#[derive(Debug, Clone)]
pub enum ExprBlock {
    Expr(AffineExpr),
    Zero,
    /// Transpose of the opposite cell.
    Mirror,
}

impl From<AffineExpr> for ExprBlock {
    fn from(e: AffineExpr) -> Self {
        ExprBlock::Expr(e)
    }
}

impl From<Mat> for ExprBlock {
    fn from(m: Mat) -> Self {
        ExprBlock::Expr(AffineExpr::constant(m))
    }
}

fn embedding(total: usize, offset: usize, len: usize) -> Mat {
    let mut e = Mat::zeros(total, len);
    for i in 0..len {
        e[(offset + i, i)] = 1.0;
    }
    e
}

/// Block assembly of affine expressions, with the same layout rules as
/// [`numerics::assemble_blocks`].
pub fn assemble_affine(layout: &[Vec<ExprBlock>]) -> Result<AffineExpr, LmiError> {
    let shape_of = |i: usize, j: usize| match &layout[i][j] {
        ExprBlock::Expr(e) => Some(e.shape()),
        ExprBlock::Mirror => match layout.get(j).and_then(|r| r.get(i)) {
            Some(ExprBlock::Expr(e)) => Some((e.cols, e.rows)),
            _ => None,
        },
        ExprBlock::Zero => None,
    };
    let (heights, widths) = resolve_layout(layout, shape_of, |_, _| false)?;
    let total_r: usize = heights.iter().sum();
    let total_c: usize = widths.iter().sum();
    let mut out = AffineExpr::zeros(total_r, total_c);
    let mut r0 = 0;
    for (i, row) in layout.iter().enumerate() {
        let mut c0 = 0;
        for (j, cell) in row.iter().enumerate() {
            let source = match cell {
                ExprBlock::Expr(e) => Some(e.clone()),
                ExprBlock::Mirror => match &layout[j][i] {
                    ExprBlock::Expr(e) => Some(e.transpose()),
                    ExprBlock::Zero => None,
                    ExprBlock::Mirror => {
                        return Err(NumericsError::BlockLayout {
                            row: i,
                            col: j,
                            reason: "mirror of a mirror".into(),
                        }
                        .into())
                    }
                },
                ExprBlock::Zero => None,
            };
            if let Some(e) = source {
                let er = embedding(total_r, r0, heights[i]);
                let ec_t = embedding(total_c, c0, widths[j]).transpose();
                out.constant += &er * &e.constant * &ec_t;
                out.terms.extend(e.terms.iter().map(|t| t.embed(&er, &ec_t)));
            }
            c0 += widths[j];
        }
        r0 += heights[i];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub name: String,
    /// Required `expr ⪯ 0`.
    pub expr: AffineExpr,
}

/// Linear objective `Σ tr(Cᵀ V)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerm {
    pub var: String,
    #[serde(with = "serde_mat")]
    pub coeff: Mat,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LmiProblem {
    pub variables: Vec<VarDecl>,
    pub constraints: Vec<Constraint>,
    /// Minimized; empty for a pure feasibility problem.
    pub objective: Vec<ObjectiveTerm>,
}

impl LmiProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, decl: VarDecl) -> Result<(), LmiError> {
        if self.variables.iter().any(|v| v.name == decl.name) {
            return Err(LmiError::DuplicateVariable(decl.name));
        }
        if matches!(decl.kind, VarKind::Rectangular { .. }) && (decl.lower.is_some() || decl.upper.is_some()) {
            return Err(LmiError::InvalidOption(format!("bounds on rectangular `{}`", decl.name)));
        }
        self.variables.push(decl);
        Ok(())
    }

    /// Adds `expr ⪯ 0`.
    pub fn add_constraint(&mut self, name: &str, expr: AffineExpr) -> Result<(), LmiError> {
        if expr.rows != expr.cols {
            return Err(LmiError::Shape(format!(
                "constraint `{name}` is {}x{}",
                expr.rows, expr.cols
            )));
        }
        for t in &expr.terms {
            let decl = self.decl(t.var())?;
            t.check_shape(expr.rows, expr.cols, decl.kind).map_err(LmiError::Shape)?;
        }
        self.constraints.push(Constraint {
            name: name.to_string(),
            expr,
        });
        Ok(())
    }

    /// Adds `coeff`-weighted variable to the minimized objective.
    pub fn minimize(&mut self, var: &str, coeff: Mat) -> Result<(), LmiError> {
        let decl = self.decl(var)?;
        if coeff.shape() != decl.kind.shape() {
            return Err(LmiError::Shape(format!("objective coefficient of `{var}`")));
        }
        self.objective.push(ObjectiveTerm {
            var: var.to_string(),
            coeff,
        });
        Ok(())
    }

    pub fn decl(&self, name: &str) -> Result<&VarDecl, LmiError> {
        self.variables
            .iter()
            .find(|v| v.name == name)
            .ok_or_else(|| LmiError::UnknownVariable(name.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem serializes")
    }

    /// Declared constraints followed by those implied by variable bounds
    /// and definiteness flags.
    fn all_constraints(&self) -> Vec<Constraint> {
        let mut out = self.constraints.clone();
        for v in &self.variables {
            let (n, _) = v.kind.shape();
            let id = Mat::identity(n, n);
            let var = AffineExpr::var(&v.name, n, n);
            if v.positive_definite {
                out.push(Constraint {
                    name: format!("{}:pd", v.name),
                    expr: -var.clone(),
                });
            }
            if let Some(lo) = v.lower {
                out.push(Constraint {
                    name: format!("{}:lower", v.name),
                    expr: AffineExpr::constant(&id * lo) - var.clone(),
                });
            }
            if let Some(hi) = v.upper {
                out.push(Constraint {
                    name: format!("{}:upper", v.name),
                    expr: var.clone() - AffineExpr::constant(&id * hi),
                });
            }
        }
        out
    }

    fn objective_value(&self, assignment: &BTreeMap<String, Mat>) -> Result<f64, LmiError> {
        self.objective
            .iter()
            .map(|t| {
                assignment
                    .get(&t.var)
                    .map(|v| t.coeff.component_mul(v).sum())
                    .ok_or_else(|| LmiError::MissingVariable(t.var.clone()))
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResidual {
    pub name: String,
    pub lambda_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub residuals: Vec<ConstraintResidual>,
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Evaluates every constraint (including bound and definiteness
/// constraints) directly at `assignment` and reports its largest eigenvalue.
pub fn check_solution(problem: &LmiProblem, assignment: &BTreeMap<String, Mat>, tol: f64) -> Result<CheckReport, LmiError> {
    for v in &problem.variables {
        let m = assignment
            .get(&v.name)
            .ok_or_else(|| LmiError::MissingVariable(v.name.clone()))?;
        if m.shape() != v.kind.shape() {
            return Err(LmiError::Shape(format!("value of `{}` is {}x{}", v.name, m.nrows(), m.ncols())));
        }
    }
    let mut residuals = Vec::new();
    for c in problem.all_constraints() {
        let m = c.expr.eval(assignment)?;
        let sym = (&m + m.transpose()) * 0.5;
        residuals.push(ConstraintResidual {
            name: c.name,
            lambda_max: numerics::lambda_max(&sym)?,
        });
    }
    let max_residual = residuals.iter().map(|r| r.lambda_max).fold(f64::NEG_INFINITY, f64::max);
    Ok(CheckReport {
        pass: max_residual <= tol,
        residuals,
        max_residual,
        tolerance: tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Required distance inside the cone: `λ_max(M_j) ≤ −margin`.
    pub margin: f64,
    /// Newton decrement threshold.
    pub newton_tol: f64,
    pub barrier_growth: f64,
    /// Relative duality-gap target.
    pub gap_tol: f64,
    /// Coordinate box `|x_i| ≤ box_bound` keeping every problem bounded.
    pub box_bound: f64,
    pub max_newton_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            margin: 1e-9,
            newton_tol: 1e-10,
            barrier_growth: 10.0,
            gap_tol: 1e-9,
            box_bound: 1e6,
            max_newton_steps: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Feasible,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiSolution {
    pub status: SolveStatus,
    #[serde(serialize_with = "ser_assignment", deserialize_with = "de_assignment")]
    pub assignment: BTreeMap<String, Mat>,
    /// Largest `λ_max` over all constraints at the returned point.
    pub max_residual: f64,
    pub objective_value: f64,
    /// Optimal slack of the feasibility phase (scaled units); positive
    /// means no strictly feasible point exists.
    pub phase1_value: Option<f64>,
    pub newton_steps: usize,
    pub message: String,
}

fn ser_assignment<S: serde::Serializer>(a: &BTreeMap<String, Mat>, s: S) -> Result<S::Ok, S::Error> {
    let rows: BTreeMap<&String, Vec<Vec<f64>>> = a.iter().map(|(k, v)| (k, serde_mat::to_rows(v))).collect();
    rows.serialize(s)
}

fn de_assignment<'de, D: serde::Deserializer<'de>>(d: D) -> Result<BTreeMap<String, Mat>, D::Error> {
    let rows: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::deserialize(d)?;
    rows.into_iter()
        .map(|(k, v)| serde_mat::from_rows(v).map(|m| (k, m)))
        .collect()
}

impl LmiSolution {
    pub fn is_feasible(&self) -> bool {
        self.status == SolveStatus::Feasible
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solution serializes")
    }

    pub fn value(&self, name: &str) -> Option<&Mat> {
        self.assignment.get(name)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.assignment.get(name).map(|m| m[(0, 0)])
    }
}

/// `G(z) = F0 + Σ z_i F_i`, required `≺ 0`.
struct AffineMap {
    f0: Mat,
    fi: Vec<Mat>,
}

impl AffineMap {
    fn eval(&self, z: &[f64]) -> Mat {
        let mut g = self.f0.clone();
        for (f, &zi) in self.fi.iter().zip(z) {
            if zi != 0.0 {
                g += f * zi;
            }
        }
        g
    }
}

struct Barrier {
    maps: Vec<AffineMap>,
    /// Total barrier degree `Σ n_j`.
    degree: usize,
}

enum Center {
    Done(Vec<f64>),
    Stopped(Vec<f64>),
    Failed(String),
}

impl Barrier {
    /// `−Σ log det(−G_j(z))`, or `None` outside the domain.
    fn value(&self, z: &[f64]) -> Option<f64> {
        let mut total = 0.0;
        for m in &self.maps {
            let neg = -m.eval(z);
            let chol = Cholesky::new(neg)?;
            let l = chol.l_dirty();
            total -= 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
        }
        Some(total)
    }

    /// Minimizes `tau·cᵀz + barrier(z)` by damped Newton from a strictly
    /// feasible `z`. `stop` is checked after every step.
    fn center(
        &self,
        mut z: Vec<f64>,
        c: &[f64],
        tau: f64,
        opts: &SolverOptions,
        steps: &mut usize,
        stop: &dyn Fn(&[f64]) -> bool,
    ) -> Center {
        let n = z.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let f = |z: &[f64]| self.value(z).map(|b| tau * dot(c, z) + b);
        let Some(mut fz) = f(&z) else {
            return Center::Failed("centering started outside the domain".into());
        };
        for _ in 0..opts.max_newton_steps {
            let mut grad: Vec<f64> = c.iter().map(|ci| tau * ci).collect();
            let mut hess = Mat::zeros(n, n);
            for m in &self.maps {
                let Some(chol) = Cholesky::new(-m.eval(&z)) else {
                    return Center::Failed("iterate left the domain".into());
                };
                let w = chol.inverse();
                let wf: Vec<Mat> = m.fi.iter().map(|fi| &w * fi).collect();
                for i in 0..n {
                    grad[i] += wf[i].trace();
                    for k in 0..=i {
                        let h = wf[i].dot(&wf[k].transpose());
                        hess[(i, k)] += h;
                        if k != i {
                            hess[(k, i)] += h;
                        }
                    }
                }
            }
            if grad.iter().any(|g| !g.is_finite()) || hess.iter().any(|h| !h.is_finite()) {
                return Center::Failed("non-finite Newton system".into());
            }
            let g = nalgebra::DVector::from_column_slice(&grad);
            let scale = hess.diagonal().amax().max(1e-300);
            let mut reg = 0.0;
            let step = loop {
                let mut h = hess.clone();
                for i in 0..n {
                    h[(i, i)] += reg;
                }
                if let Some(ch) = Cholesky::new(h) {
                    break -ch.solve(&g);
                }
                reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
                if reg > scale {
                    return Center::Failed("singular Newton system".into());
                }
            };
            let decrement = -g.dot(&step);
            if decrement / 2.0 <= opts.newton_tol {
                return Center::Done(z);
            }
            let mut s = 1.0;
            let accepted = loop {
                let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, d)| a + s * d).collect();
                if let Some(ft) = f(&trial) {
                    if ft <= fz - 0.25 * s * decrement {
                        break Some((trial, ft));
                    }
                }
                s *= 0.5;
                if s < 1e-14 {
                    break None;
                }
            };
            *steps += 1;
            match accepted {
                // a damped step this close to the center is rounding noise
                Some(_) if s < 1.0 && decrement < 1e-6 => return Center::Done(z),
                Some((trial, ft)) => {
                    z = trial;
                    fz = ft;
                }
                // no further progress at working precision
                None => return Center::Done(z),
            }
            if stop(&z) {
                return Center::Stopped(z);
            }
        }
        Center::Done(z)
    }
}

struct Compiled {
    /// Declared constraints as `F0 + Σ x_i F_i` (unscaled).
    maps: Vec<AffineMap>,
    cost: Vec<f64>,
    layout: Vec<(String, VarKind, usize)>,
    dim: usize,
}

fn compile(problem: &LmiProblem) -> Result<Compiled, LmiError> {
    let mut layout = Vec::new();
    let mut offset = 0;
    for v in &problem.variables {
        layout.push((v.name.clone(), v.kind, offset));
        offset += v.kind.coords();
    }
    let dim = offset;
    let index: HashMap<&str, usize> = layout.iter().enumerate().map(|(i, l)| (l.0.as_str(), i)).collect();
    let zero_assignment: BTreeMap<String, Mat> = problem
        .variables
        .iter()
        .map(|v| {
            let (r, c) = v.kind.shape();
            (v.name.clone(), Mat::zeros(r, c))
        })
        .collect();
    let mut maps = Vec::new();
    for con in problem.all_constraints() {
        for var in con.expr.vars() {
            if !index.contains_key(var) {
                return Err(LmiError::UnknownVariable(var.to_string()));
            }
        }
        let f0 = con.expr.eval(&zero_assignment)?;
        let mut fi = vec![Mat::zeros(f0.nrows(), f0.ncols()); dim];
        for (name, kind, off) in &layout {
            if !con.expr.vars().any(|v| v == name) {
                continue;
            }
            for idx in 0..kind.coords() {
                let mut a = zero_assignment.clone();
                a.insert(name.clone(), kind.unit(idx, 1.0));
                fi[off + idx] = con.expr.eval(&a)? - &f0;
            }
        }
        let asym = std::iter::once(&f0)
            .chain(fi.iter())
            .map(|m| (m - m.transpose()).amax() / m.amax().max(1.0))
            .fold(0.0, f64::max);
        if asym > 1e-9 {
            return Err(LmiError::NotSymmetric(con.name));
        }
        let sym = |m: &Mat| (m + m.transpose()) * 0.5;
        maps.push(AffineMap {
            f0: sym(&f0),
            fi: fi.iter().map(sym).collect(),
        });
    }
    let mut cost = vec![0.0; dim];
    for t in &problem.objective {
        let (_, kind, off) = &layout[index[t.var.as_str()]];
        for idx in 0..kind.coords() {
            cost[off + idx] += t.coeff.component_mul(&kind.unit(idx, 1.0)).sum();
        }
    }
    Ok(Compiled {
        maps,
        cost,
        layout,
        dim,
    })
}

fn box_maps(dim: usize, extra: usize, bound: f64) -> Vec<AffineMap> {
    let total = dim + extra;
    let mut out = Vec::new();
    for i in 0..dim {
        for sign in [1.0, -1.0] {
            let mut fi = vec![Mat::zeros(1, 1); total];
            fi[i][(0, 0)] = sign;
            out.push(AffineMap {
                f0: Mat::from_element(1, 1, -bound),
                fi,
            });
        }
    }
    out
}

/// Solves `min cᵀx s.t. M_j(x) ⪯ −margin·I` (or only the constraints when
/// the objective is empty).
///
/// Phase I minimizes a common slack `t` with `M̃_j(x) ⪯ t·I`; phase II runs
/// the barrier method on the scaled constraints `M̃_j = (M_j + margin·I)/s_j`.
/// Pure feasibility problems run phase I to completion, which returns a
/// well-centred point.
pub fn solve(problem: &LmiProblem, opts: &SolverOptions) -> Result<LmiSolution, LmiError> {
    if !(opts.margin > 0.0) || !(opts.barrier_growth > 1.0) || !(opts.box_bound > 0.0) {
        return Err(LmiError::InvalidOption("margin, barrier growth and box bound must be positive".into()));
    }
    let comp = compile(problem)?;
    let dim = comp.dim;
    let scaled: Vec<AffineMap> = comp
        .maps
        .iter()
        .map(|m| {
            let size = m.f0.nrows();
            let s = m
                .fi
                .iter()
                .map(|f| f.norm())
                .fold(m.f0.norm(), f64::max);
            let s = if s > 0.0 { s } else { 1.0 };
            AffineMap {
                f0: (&m.f0 + Mat::identity(size, size) * opts.margin) / s,
                fi: m.fi.iter().map(|f| f / s).collect(),
            }
        })
        .collect();
    let mut steps = 0;
    let has_objective = comp.cost.iter().any(|c| *c != 0.0);

    // phase I over z = (x, t)
    let x0 = vec![0.0; dim];
    let worst = scaled
        .iter()
        .map(|m| numerics::lambda_max(&m.eval(&x0)))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut x = x0;
    let mut phase1_value = None;
    if worst >= 0.0 || !has_objective {
        let mut maps: Vec<AffineMap> = scaled
            .iter()
            .map(|m| {
                let size = m.f0.nrows();
                let mut fi = m.fi.clone();
                fi.push(-Mat::identity(size, size));
                AffineMap { f0: m.f0.clone(), fi }
            })
            .collect();
        maps.extend(box_maps(dim, 1, opts.box_bound));
        // t ≥ −1
        let mut fi = vec![Mat::zeros(1, 1); dim + 1];
        fi[dim][(0, 0)] = -1.0;
        maps.push(AffineMap {
            f0: Mat::from_element(1, 1, -1.0),
            fi,
        });
        let degree = maps.iter().map(|m| m.f0.nrows()).sum();
        let barrier = Barrier { maps, degree };
        let mut z = x.clone();
        z.push(worst.max(-0.5) + 1.0);
        let mut c = vec![0.0; dim + 1];
        c[dim] = 1.0;
        let mut tau = 1.0;
        let stop_early = |z: &[f64]| has_objective && z[dim] < 0.0;
        let mut converged = false;
        for _ in 0..60 {
            match barrier.center(z.clone(), &c, tau, opts, &mut steps, &stop_early) {
                Center::Done(nz) => z = nz,
                Center::Stopped(nz) => {
                    z = nz;
                    break;
                }
                Center::Failed(msg) => return Ok(failure(problem, &comp, &z[..dim], steps, msg)),
            }
            let gap = barrier.degree as f64 / tau;
            if z[dim] - gap > 0.0 {
                break;
            }
            if gap < opts.gap_tol {
                converged = true;
                break;
            }
            if !has_objective && z[dim] < -1.0 + 1e-6 {
                break;
            }
            tau *= opts.barrier_growth;
        }
        phase1_value = Some(z[dim]);
        if z[dim] >= 0.0 {
            let msg = if converged {
                "feasibility phase converged with nonnegative slack".to_string()
            } else {
                format!("feasibility slack bounded below by a positive value ({:.3e})", z[dim])
            };
            let mut sol = finish(problem, &comp, &z[..dim], SolveStatus::Infeasible, steps, msg)?;
            sol.phase1_value = phase1_value;
            return Ok(sol);
        }
        x = z[..dim].to_vec();
    }

    if has_objective {
        let mut maps = scaled;
        maps.extend(box_maps(dim, 0, opts.box_bound));
        let degree = maps.iter().map(|m| m.f0.nrows()).sum();
        let barrier = Barrier { maps, degree };
        let dot = |z: &[f64]| comp.cost.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
        let mut tau = 1.0;
        for _ in 0..80 {
            match barrier.center(x.clone(), &comp.cost, tau, opts, &mut steps, &|_| false) {
                Center::Done(nz) | Center::Stopped(nz) => x = nz,
                Center::Failed(msg) => return Ok(failure(problem, &comp, &x, steps, msg)),
            }
            let gap = barrier.degree as f64 / tau;
            if gap <= opts.gap_tol * dot(&x).abs().max(1.0) {
                break;
            }
            tau *= opts.barrier_growth;
        }
    }
    let mut sol = finish(problem, &comp, &x, SolveStatus::Feasible, steps, String::new())?;
    sol.phase1_value = phase1_value;
    if sol.max_residual > 0.0 {
        sol.status = SolveStatus::NumericalFailure;
        sol.message = format!("returned point violates a constraint by {:.3e}", sol.max_residual);
    }
    Ok(sol)
}

fn assignment_of(comp: &Compiled, x: &[f64]) -> BTreeMap<String, Mat> {
    comp.layout
        .iter()
        .map(|(name, kind, off)| (name.clone(), kind.from_coords(&x[*off..off + kind.coords()])))
        .collect()
}

fn finish(
    problem: &LmiProblem,
    comp: &Compiled,
    x: &[f64],
    status: SolveStatus,
    newton_steps: usize,
    message: String,
) -> Result<LmiSolution, LmiError> {
    let assignment = assignment_of(comp, x);
    let max_residual = comp
        .maps
        .iter()
        .map(|m| numerics::lambda_max(&m.eval(x)))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(LmiSolution {
        status,
        objective_value: problem.objective_value(&assignment)?,
        assignment,
        max_residual,
        phase1_value: None,
        newton_steps,
        message,
    })
}

fn failure(problem: &LmiProblem, comp: &Compiled, x: &[f64], steps: usize, msg: String) -> LmiSolution {
    let assignment = assignment_of(comp, x);
    LmiSolution {
        status: SolveStatus::NumericalFailure,
        objective_value: problem.objective_value(&assignment).unwrap_or(f64::NAN),
        assignment,
        max_residual: f64::NAN,
        phase1_value: None,
        newton_steps: steps,
        message: msg,
    }
}
