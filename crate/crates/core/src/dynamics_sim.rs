//! Ground-truth plants, fixed-step RK4 simulation and empirical checks of
//! the contraction and equilibrium-envelope guarantees.

use crate::lmi_cert::{deviation_envelope, EnvelopeMode, EnvelopeParams};
use crate::nn_model::{Dataset, FeedforwardNet, ModelError, NodeModel, StateBox};
use crate::numerics::{Mat, Vector};
use crate::synthesis::ControllerSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_HORIZON: f64 = 30.0;
/// Multiplicative slack on empirical bounds, absorbing integration error.
pub const REL_TOL: f64 = 1e-6;
pub const ABS_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("singular dynamics: {0}")]
    Singular(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("state became non-finite at t = {time}")]
    NonFinite { time: f64 },
    #[error("trajectories do not share a time grid")]
    GridMismatch,
    #[error("equilibrium search did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("controller: {0}")]
    Controller(String),
}

/// The drift `f` of a plant `ẋ = f(x) + g u`.
#[derive(Debug, Clone, PartialEq)]
pub enum Drift {
    /// `ẋ₁ = x₂`, `ẋ₂ = −(g/l) sin x₁ − (k/m) x₂`.
    Pendulum { mass: f64, length: f64, friction: f64, gravity: f64 },
    /// `ḋ = ν sin θ`, `θ̇ = −νκ cos θ / (1 − κ d)`.
    Vehicle { kappa: f64, nu: f64 },
    /// `ẋ = A x`.
    Linear(Mat),
    /// A learned model used as the plant.
    Node(Box<NodeModel>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    pub drift: Drift,
    pub g: Mat,
    pub bounds: StateBox,
}

impl Plant {
    pub fn state_dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn drift(&self, x: &Vector) -> Result<Vector, SimError> {
        if x.len() != self.state_dim() {
            return Err(SimError::Dimension(format!("state of length {} for a {}-state plant", x.len(), self.state_dim())));
        }
        match &self.drift {
            Drift::Pendulum { mass, length, friction, gravity } => Ok(Vector::from_column_slice(&[
                x[1],
                -(gravity / length) * x[0].sin() - (friction / mass) * x[1],
            ])),
            Drift::Vehicle { kappa, nu } => {
                let den = 1.0 - kappa * x[0];
                if den.abs() < 1e-12 {
                    return Err(SimError::Singular(format!("1 − κ d_e vanishes at d_e = {}", x[0])));
                }
                Ok(Vector::from_column_slice(&[nu * x[1].sin(), -nu * kappa * x[1].cos() / den]))
            }
            Drift::Linear(a) => Ok(a * x),
            Drift::Node(model) => Ok(model.vector_field(x)?),
        }
    }

    /// `f(x) + g u`.
    pub fn actuated(&self, x: &Vector, u: &Vector) -> Result<Vector, SimError> {
        if u.len() != self.input_dim() {
            return Err(SimError::Dimension(format!("input of length {} for {} actuators", u.len(), self.input_dim())));
        }
        Ok(self.drift(x)? + &self.g * u)
    }

    /// Same drift and box with a different input matrix.
    pub fn with_input(mut self, g: Mat) -> Result<Self, SimError> {
        if g.nrows() != self.state_dim() {
            return Err(SimError::Dimension(format!("g has {} rows for a {}-state plant", g.nrows(), self.state_dim())));
        }
        self.g = g;
        Ok(self)
    }

    pub fn with_box(mut self, bounds: StateBox) -> Result<Self, SimError> {
        if bounds.dim() != self.state_dim() {
            return Err(SimError::Dimension("box dimension differs from the plant".into()));
        }
        if let Drift::Vehicle { kappa, .. } = self.drift {
            check_vehicle_box(kappa, &bounds)?;
        }
        self.bounds = bounds;
        Ok(self)
    }
}

/// Pendulum on `[−2, 2]²` with `g = [0; 1/(m l²)]`.
pub fn pendulum_plant(mass: f64, length: f64, friction: f64, gravity: f64) -> Result<Plant, SimError> {
    if !(mass > 0.0 && length > 0.0 && gravity > 0.0 && friction >= 0.0) {
        return Err(SimError::InvalidParameter("pendulum needs m, l, g > 0 and k ≥ 0".into()));
    }
    Ok(Plant {
        drift: Drift::Pendulum { mass, length, friction, gravity },
        g: Mat::from_column_slice(2, 1, &[0.0, 1.0 / (mass * length * length)]),
        bounds: StateBox::symmetric(2, 2.0),
    })
}

/// `m = 0.15`, `l = 5`, `k = 0`, `g = 9.81`.
pub fn default_pendulum() -> Plant {
    pendulum_plant(0.15, 5.0, 0.0, 9.81).expect("default parameters are valid")
}

fn check_vehicle_box(kappa: f64, bounds: &StateBox) -> Result<(), SimError> {
    let worst = bounds.lo[0].abs().max(bounds.hi[0].abs());
    if kappa.abs() * worst >= 1.0 {
        return Err(SimError::Singular(format!("|κ d_e| reaches {} inside the box", kappa.abs() * worst)));
    }
    Ok(())
}

/// Path-following vehicle on `[−1, 1]²` with the turn rate as input.
pub fn vehicle_plant(kappa: f64, nu: f64) -> Result<Plant, SimError> {
    if !(kappa.is_finite() && nu.is_finite()) {
        return Err(SimError::InvalidParameter("κ and ν must be finite".into()));
    }
    let bounds = StateBox::symmetric(2, 1.0);
    check_vehicle_box(kappa, &bounds)?;
    Ok(Plant {
        drift: Drift::Vehicle { kappa, nu },
        g: Mat::from_column_slice(2, 1, &[0.0, 1.0]),
        bounds,
    })
}

pub fn default_vehicle() -> Plant {
    vehicle_plant(0.5, 1.0).expect("default parameters are valid")
}

/// `ẋ = A x + g u` on a symmetric box of half-width `radius`.
pub fn linear_plant(a: Mat, g: Mat, radius: f64) -> Result<Plant, SimError> {
    if !a.is_square() || !(radius > 0.0) {
        return Err(SimError::InvalidParameter("A must be square and the box non-empty".into()));
    }
    let bounds = StateBox::symmetric(a.nrows(), radius);
    Plant { drift: Drift::Linear(a), g: Mat::zeros(bounds.dim(), 0), bounds }.with_input(g)
}

pub fn node_plant(model: NodeModel, g: Mat) -> Result<Plant, SimError> {
    let bounds = model.bounds.clone();
    Plant { drift: Drift::Node(Box::new(model)), g: Mat::zeros(bounds.dim(), 0), bounds }.with_input(g)
}

/// `n` states uniform in the box with exact, noiseless derivatives `f(x)`.
pub fn sample_dataset(plant: &Plant, n: usize, seed: u64) -> Result<Dataset, SimError> {
    sample_dataset_with_noise(plant, n, seed, 0.0)
}

/// As [`sample_dataset`], adding Gaussian noise of standard deviation
/// `noise_std` to each derivative component.
pub fn sample_dataset_with_noise(plant: &Plant, n: usize, seed: u64, noise_std: f64) -> Result<Dataset, SimError> {
    if n == 0 {
        return Err(SimError::InvalidParameter("dataset needs at least one sample".into()));
    }
    let noise = Normal::new(0.0, noise_std)
        .map_err(|_| SimError::InvalidParameter(format!("noise level {noise_std}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(n);
    let mut derivatives = Vec::with_capacity(n);
    for _ in 0..n {
        let x = plant.bounds.sample(&mut rng);
        let mut dx = plant.drift(&x)?;
        if noise_std > 0.0 {
            dx.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        states.push(x);
        derivatives.push(dx);
    }
    Ok(Dataset::new(states, derivatives, plant.bounds.clone())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub inputs: Option<Vec<Vector>>,
    pub exited_box: bool,
    /// First sample outside the box, if any.
    pub first_exit: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> &Vector {
        self.states.last().expect("trajectories hold the initial state")
    }

    /// Number of leading samples inside the box.
    pub fn valid_len(&self) -> usize {
        self.first_exit.unwrap_or(self.len())
    }

    /// `t,x1,...,xm[,u1,...,ul]` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let m = self.states.first().map_or(0, |x| x.len());
        let l = self.inputs.as_ref().and_then(|u| u.first()).map_or(0, |u| u.len());
        let mut out = String::from("t");
        (1..=m).for_each(|i| write!(out, ",x{i}").unwrap());
        (1..=l).for_each(|i| write!(out, ",u{i}").unwrap());
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            write!(out, "{t:.16e}").unwrap();
            for v in self.states[k].iter() {
                write!(out, ",{v:.16e}").unwrap();
            }
            if let Some(inputs) = &self.inputs {
                for v in inputs[k].iter() {
                    write!(out, ",{v:.16e}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}

fn steps_for(t_end: f64, h: f64) -> Result<usize, SimError> {
    if !(h > 0.0 && h.is_finite()) || !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(SimError::InvalidParameter(format!("step {h} and horizon {t_end}")));
    }
    Ok((t_end / h).round() as usize)
}

fn integrate(
    f: &dyn Fn(&Vector) -> Result<Vector, SimError>,
    input: Option<&dyn Fn(&Vector) -> Result<Vector, SimError>>,
    x0: &Vector,
    t_end: f64,
    h: f64,
    bounds: Option<&StateBox>,
) -> Result<Trajectory, SimError> {
    let n = steps_for(t_end, h)?;
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut inputs = input.map(|_| Vec::with_capacity(n + 1));
    let mut first_exit = None;
    let mut x = x0.clone();
    for k in 0..=n {
        let t = k as f64 * h;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite { time: t });
        }
        if first_exit.is_none() && bounds.is_some_and(|b| !b.contains(&x)) {
            first_exit = Some(k);
        }
        if let (Some(u), Some(log)) = (input, inputs.as_mut()) {
            log.push(u(&x)?);
        }
        times.push(t);
        states.push(x.clone());
        if k == n {
            break;
        }
        let k1 = f(&x)?;
        let k2 = f(&(&x + &k1 * (h / 2.0)))?;
        let k3 = f(&(&x + &k2 * (h / 2.0)))?;
        let k4 = f(&(&x + &k3 * h))?;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    Ok(Trajectory { times, states, inputs, exited_box: first_exit.is_some(), first_exit })
}

/// Classical RK4 with constant step `h`. Leaving `bounds` is flagged, not
/// fatal.
pub fn rk4_simulate(
    f: &dyn Fn(&Vector) -> Result<Vector, SimError>,
    x0: &Vector,
    t_end: f64,
    h: f64,
    bounds: Option<&StateBox>,
) -> Result<Trajectory, SimError> {
    integrate(f, None, x0, t_end, h, bounds)
}

/// The true plant under `u = H x + W_umin wᵏ(x) + b_u`.
pub fn closed_loop_simulate(
    plant: &Plant,
    ctrl: &ControllerSpec,
    net: &FeedforwardNet,
    x0: &Vector,
    t_end: f64,
    h: f64,
) -> Result<Trajectory, SimError> {
    if ctrl.h.nrows() != plant.input_dim() || ctrl.h.ncols() != plant.state_dim() || net.state_dim() != plant.state_dim() {
        return Err(SimError::Dimension("controller does not match the plant".into()));
    }
    let u = |x: &Vector| ctrl.control(net, x).map_err(|e| SimError::Controller(e.to_string()));
    let f = |x: &Vector| plant.actuated(x, &u(x)?);
    integrate(&f, Some(&u), x0, t_end, h, Some(&plant.bounds))
}

/// The plant with zero input.
pub fn open_loop_simulate(plant: &Plant, x0: &Vector, t_end: f64, h: f64) -> Result<Trajectory, SimError> {
    let f = |x: &Vector| plant.drift(x);
    rk4_simulate(&f, x0, t_end, h, Some(&plant.bounds))
}

/// Closed-loop runs from several initial conditions, in input order.
pub fn closed_loop_batch(
    plant: &Plant,
    ctrl: &ControllerSpec,
    net: &FeedforwardNet,
    initial: &[Vector],
    t_end: f64,
    h: f64,
) -> Result<Vec<Trajectory>, SimError> {
    initial
        .par_iter()
        .map(|x0| closed_loop_simulate(plant, ctrl, net, x0, t_end, h))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub pairs: usize,
    pub samples_checked: usize,
    /// Largest `‖x₁(t) − x₂(t)‖ / (c e^{−rate t} ‖x₁(0) − x₂(0)‖)` seen.
    pub worst_ratio: f64,
    /// Smallest `bound − distance`; negative means a violation.
    #[serde(with = "crate::numerics::serde_float")]
    pub worst_margin: f64,
    /// Pairs in which a trajectory left the box.
    pub pairs_with_exit: usize,
    pub pass: bool,
}

/// Checks `‖x₁(t) − x₂(t)‖ ≤ c e^{−γt/2} ‖x₁(0) − x₂(0)‖` over all pairs
/// while both trajectories are in the box.
pub fn contraction_decay_test(trajectories: &[Trajectory], params: &EnvelopeParams) -> Result<DecayReport, SimError> {
    let Some(first) = trajectories.first() else {
        return Ok(DecayReport {
            pairs: 0,
            samples_checked: 0,
            worst_ratio: 0.0,
            worst_margin: f64::INFINITY,
            pairs_with_exit: 0,
            pass: true,
        });
    };
    if trajectories.iter().any(|t| t.times != first.times) {
        return Err(SimError::GridMismatch);
    }
    let mut report = DecayReport {
        pairs: 0,
        samples_checked: 0,
        worst_ratio: 0.0,
        worst_margin: f64::INFINITY,
        pairs_with_exit: 0,
        pass: true,
    };
    for (i, a) in trajectories.iter().enumerate() {
        for b in &trajectories[i + 1..] {
            report.pairs += 1;
            if a.exited_box || b.exited_box {
                report.pairs_with_exit += 1;
            }
            let d0 = (&a.states[0] - &b.states[0]).norm();
            for k in 0..a.valid_len().min(b.valid_len()) {
                let d = (&a.states[k] - &b.states[k]).norm();
                let cone = params.c * (-params.rate() * a.times[k]).exp() * d0;
                let bound = (1.0 + REL_TOL) * cone + ABS_TOL;
                report.samples_checked += 1;
                report.worst_margin = report.worst_margin.min(bound - d);
                if cone > 0.0 {
                    report.worst_ratio = report.worst_ratio.max(d / cone);
                }
                if d > bound {
                    report.pass = false;
                }
            }
        }
    }
    Ok(report)
}

/// Newton refinement of `f(x) = 0` from the endpoint of a long simulation
/// started at `x_seed`. Only for checking results; synthesis never sees it.
pub fn equilibrium_oracle(f: &dyn Fn(&Vector) -> Result<Vector, SimError>, x_seed: &Vector) -> Result<Vector, SimError> {
    const MAX_ITER: usize = 100;
    let mut x = match rk4_simulate(f, x_seed, 100.0, 1e-2, None) {
        Ok(traj) => traj.last_state().clone(),
        Err(_) => x_seed.clone(),
    };
    let m = x.len();
    let mut fx = f(&x)?;
    for _ in 0..MAX_ITER {
        if fx.norm() <= 1e-12 {
            return Ok(x);
        }
        let mut jac = Mat::zeros(m, m);
        for j in 0..m {
            let dh = 1e-6 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += dh;
            xm[j] -= dh;
            let col = (f(&xp)? - f(&xm)?) / (2.0 * dh);
            jac.set_column(j, &col);
        }
        let Some(dx) = jac.lu().solve(&(-&fx)) else {
            break;
        };
        // backtrack on the residual norm
        let mut s = 1.0;
        loop {
            let trial = &x + &dx * s;
            if let Ok(ft) = f(&trial) {
                if ft.norm() < fx.norm() || s < 1e-6 {
                    x = trial;
                    fx = ft;
                    break;
                }
            }
            s *= 0.5;
            if s < 1e-6 {
                break;
            }
        }
    }
    if fx.norm() <= 1e-12 {
        return Ok(x);
    }
    Err(SimError::NoConvergence { iterations: MAX_ITER, residual: fx.norm() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub samples_checked: usize,
    pub worst_ratio: f64,
    #[serde(with = "crate::numerics::serde_float")]
    pub worst_margin: f64,
    pub initial_distance: f64,
    pub terminal_distance: f64,
    /// Asymptotic envelope radius `4(ε/γ)c`.
    pub radius: f64,
    pub exited_box: bool,
    pub pass: bool,
}

/// Compares `‖x(t) − x*‖` with the to-equilibrium envelope while the
/// trajectory stays in the box.
pub fn envelope_check(traj: &Trajectory, x_star: &Vector, params: &EnvelopeParams, epsilon: f64) -> EnvelopeReport {
    let d0 = (&traj.states[0] - x_star).norm();
    let mut report = EnvelopeReport {
        samples_checked: 0,
        worst_ratio: 0.0,
        worst_margin: f64::INFINITY,
        initial_distance: d0,
        terminal_distance: (traj.last_state() - x_star).norm(),
        radius: params.radius(epsilon, EnvelopeMode::ToEquilibrium),
        exited_box: traj.exited_box,
        pass: true,
    };
    for k in 0..traj.valid_len() {
        let d = (&traj.states[k] - x_star).norm();
        let env = deviation_envelope(params, epsilon, d0, traj.times[k], EnvelopeMode::ToEquilibrium);
        let bound = (1.0 + REL_TOL) * env + ABS_TOL;
        report.samples_checked += 1;
        report.worst_margin = report.worst_margin.min(bound - d);
        if env > 0.0 {
            report.worst_ratio = report.worst_ratio.max(d / env);
        }
        if d > bound {
            report.pass = false;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn pendulum_drift_examples() {
        let p = default_pendulum();
        assert_eq!(p.drift(&v(&[0.0, 0.0])).unwrap(), v(&[0.0, 0.0]));
        let f = p.drift(&v(&[1.0, 0.0])).unwrap();
        assert_eq!(f[0], 0.0);
        assert_abs_diff_eq!(f[1], -1.962 * 1f64.sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(f[1], -1.6512, epsilon = 1e-3);
        assert_abs_diff_eq!(p.g[(1, 0)], 1.0 / 3.75, epsilon = 1e-15);
        assert!(pendulum_plant(0.0, 5.0, 0.0, 9.81).is_err());
    }

    #[test]
    fn pendulum_conserves_energy() {
        let p = default_pendulum();
        let energy = |x: &Vector| 0.5 * x[1] * x[1] + 1.962 * (1.0 - x[0].cos());
        let traj = open_loop_simulate(&p, &v(&[1.0, 1.0]), 10.0, 1e-3).unwrap();
        let e0 = energy(&traj.states[0]);
        for x in &traj.states {
            assert!((energy(x) - e0).abs() < 1e-9);
        }
    }

    #[test]
    fn vehicle_drift_examples() {
        let p = default_vehicle();
        assert_eq!(p.drift(&v(&[0.0, 0.0])).unwrap(), v(&[0.0, -0.5]));
        let f = p.drift(&v(&[0.0, 1.0])).unwrap();
        assert_abs_diff_eq!(f[0], 1f64.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], -0.5 * 1f64.cos(), epsilon = 1e-15);
        assert!(matches!(p.drift(&v(&[2.0, 0.0])), Err(SimError::Singular(_))));
        assert!(matches!(vehicle_plant(1.0, 1.0), Err(SimError::Singular(_))));
        assert!(default_vehicle().with_box(StateBox::symmetric(2, 2.0)).is_err());
    }

    #[test]
    fn linear_plant_is_exact() {
        let a = Mat::from_row_slice(2, 2, &[-1.0, 2.0, 0.0, -3.0]);
        let p = linear_plant(a.clone(), Mat::from_column_slice(2, 1, &[0.0, 1.0]), 1.0).unwrap();
        assert_eq!(p.drift(&v(&[1.0, 1.0])).unwrap(), v(&[1.0, -3.0]));
        assert_eq!(p.actuated(&v(&[1.0, 1.0]), &v(&[2.0])).unwrap(), v(&[1.0, -1.0]));
        assert!(linear_plant(Mat::zeros(2, 3), Mat::zeros(2, 1), 1.0).is_err());
    }

    #[test]
    fn dataset_is_exact_and_seeded() {
        let p = default_pendulum();
        let a = sample_dataset(&p, 1, 7).unwrap();
        let b = sample_dataset(&p, 1, 7).unwrap();
        assert_eq!(a, b);
        let d = sample_dataset(&p, 10_000, 1).unwrap();
        for (x, dx) in d.states.iter().zip(&d.derivatives) {
            assert_eq!(&p.drift(x).unwrap(), dx);
            assert!(p.bounds.contains(x));
        }
        // uniform on [−2, 2]: σ of the mean is 4/√12/√n
        let sigma = 4.0 / 12f64.sqrt() / 100.0;
        for j in 0..2 {
            let mean = d.states.iter().map(|x| x[j]).sum::<f64>() / 1e4;
            assert!(mean.abs() < 3.0 * sigma);
        }
        assert!(sample_dataset(&p, 0, 1).is_err());
        let noisy = sample_dataset_with_noise(&p, 5, 7, 0.1).unwrap();
        assert_ne!(noisy.derivatives, sample_dataset(&p, 5, 7).unwrap().derivatives);
    }

    #[test]
    fn rk4_basic_cases() {
        let zero = |_: &Vector| Ok(v(&[0.0, 0.0]));
        let traj = rk4_simulate(&zero, &v(&[1.0, 2.0]), 1.0, 0.1, None).unwrap();
        assert_eq!(traj.len(), 11);
        assert!(traj.states.iter().all(|x| x == &v(&[1.0, 2.0])));

        let decay = |x: &Vector| Ok(-x);
        let traj = rk4_simulate(&decay, &v(&[1.0]), 1.0, 1e-3, None).unwrap();
        assert_abs_diff_eq!(traj.last_state()[0], (-1f64).exp(), epsilon = 1e-8);
        assert_abs_diff_eq!(*traj.times.last().unwrap(), 1.0, epsilon = 1e-12);

        let osc = |x: &Vector| Ok(v(&[x[1], -x[0]]));
        let traj = rk4_simulate(&osc, &v(&[1.0, 0.0]), 10.0, 1e-3, None).unwrap();
        let e = traj.last_state().norm_squared();
        assert!((e - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let osc = |x: &Vector| Ok(v(&[x[1], -x[0]]));
        let err = |h: f64| {
            let traj = rk4_simulate(&osc, &v(&[1.0, 0.0]), 2.0, h, None).unwrap();
            (traj.last_state() - v(&[2f64.cos(), -2f64.sin()])).norm()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn rk4_flags_exit_and_aborts_on_blowup() {
        let grow = |x: &Vector| Ok(x.clone());
        let traj = rk4_simulate(&grow, &v(&[0.5]), 1.0, 1e-2, Some(&StateBox::symmetric(1, 1.0))).unwrap();
        assert!(traj.exited_box);
        let k = traj.first_exit.unwrap();
        assert!(traj.states[k][0] > 1.0 && traj.states[k - 1][0] <= 1.0);
        assert_eq!(traj.len(), 101);

        let blow = |x: &Vector| Ok(v(&[x[0] * x[0]]));
        assert!(matches!(
            rk4_simulate(&blow, &v(&[1.0]), 5.0, 1e-2, None),
            Err(SimError::NonFinite { .. })
        ));
        assert!(rk4_simulate(&grow, &v(&[1.0]), 1.0, 0.0, None).is_err());
    }

    #[test]
    fn decay_test_examples() {
        let decay = |x: &Vector| Ok(-x);
        let a = rk4_simulate(&decay, &v(&[1.0, 0.0]), 5.0, 1e-3, None).unwrap();
        let b = rk4_simulate(&decay, &v(&[-1.0, 0.5]), 5.0, 1e-3, None).unwrap();
        let exact = EnvelopeParams { c: 1.0, gamma: 2.0 };
        let same = contraction_decay_test(&[a.clone(), a.clone()], &exact).unwrap();
        assert!(same.pass);
        let r = contraction_decay_test(&[a.clone(), b.clone()], &exact).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.worst_ratio < 1.0 + 1e-9 && r.worst_ratio > 1.0 - 1e-9);

        let short = rk4_simulate(&decay, &v(&[1.0, 0.0]), 4.0, 1e-3, None).unwrap();
        assert_eq!(contraction_decay_test(&[a, short], &exact), Err(SimError::GridMismatch));

        let p = default_pendulum();
        let c = open_loop_simulate(&p, &v(&[1.0, 1.0]), 30.0, 1e-2).unwrap();
        let d = open_loop_simulate(&p, &v(&[0.5, -0.5]), 30.0, 1e-2).unwrap();
        let r = contraction_decay_test(&[c, d], &EnvelopeParams { c: 1.0, gamma: 0.2 }).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn oracle_finds_simple_equilibria() {
        let shifted = |x: &Vector| Ok(v(&[1.0 - x[0]]));
        let xs = equilibrium_oracle(&shifted, &v(&[0.0])).unwrap();
        assert_abs_diff_eq!(xs[0], 1.0, epsilon = 1e-12);

        let p = default_pendulum();
        let damped = |x: &Vector| Ok(p.drift(x)? + v(&[0.0, -x[0] - 2.0 * x[1]]));
        let xs = equilibrium_oracle(&damped, &v(&[1.0, 1.0])).unwrap();
        assert!(xs.norm() < 1e-10);
    }

    #[test]
    fn envelope_trivial_cases() {
        let decay = |x: &Vector| Ok(-x);
        let params = EnvelopeParams { c: 1.0, gamma: 2.0 };
        let at = rk4_simulate(&decay, &v(&[0.0]), 1.0, 1e-2, None).unwrap();
        let r = envelope_check(&at, &v(&[0.0]), &params, 0.1);
        assert!(r.pass);
        assert_eq!(r.initial_distance, 0.0);
        assert_abs_diff_eq!(r.radius, 0.2, epsilon = 1e-15);
        let traj = rk4_simulate(&decay, &v(&[1.0]), 3.0, 1e-3, None).unwrap();
        let cone = envelope_check(&traj, &v(&[0.0]), &params, 0.0);
        assert!(cone.pass && cone.worst_ratio < 1.0 + 1e-9);
        let tight = envelope_check(&traj, &v(&[0.0]), &EnvelopeParams { c: 1.0, gamma: 4.0 }, 0.0);
        assert!(!tight.pass);
    }

    #[test]
    fn csv_layout() {
        let decay = |x: &Vector| Ok(-x);
        let traj = rk4_simulate(&decay, &v(&[1.0, 2.0]), 0.002, 1e-3, None).unwrap();
        let csv = traj.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x1,x2");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0.0000000000000000e0,1.0000000000000000e0,2.0000000000000000e0");
        let back: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(back, traj.states[1][0]);
    }
}
