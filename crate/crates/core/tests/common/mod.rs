//! Randomized property checks shared by the property suite and the
//! acceptance target.
#![allow(dead_code)]

use nodecert::dynamics_sim::{self, Trajectory};
use nodecert::lmi_cert::{self, CertOutcome};
use nodecert::lmi_solver::SolverOptions;
use nodecert::nn_model::{backprop_grad, FeedforwardNet, NodeModel, StateBox};
use nodecert::numerics::{self, Mat, Vector};
use nodecert::sector::{build_q_matrices, propagate_sector_bounds};
use nodecert::synthesis::min_norm_cancellation;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, RngSeed, TestCaseError, TestRng, TestRunner};

pub const CASES: u32 = 128;

pub fn config() -> Config {
    Config { cases: CASES, failure_persistence: None, rng_seed: RngSeed::Fixed(0x5eed), ..Config::default() }
}

#[derive(Debug, Clone)]
pub struct NetCase {
    pub net: FeedforwardNet,
    pub bounds: StateBox,
}

fn mat(rows: usize, cols: usize, data: &[f64]) -> Mat {
    Mat::from_row_slice(rows, cols, data)
}

/// Random tanh network of depth 1–3 with its box.
pub fn net_case(max_weight: f64) -> impl Strategy<Value = NetCase> {
    (1usize..=3, prop::collection::vec(1usize..=4, 1..=3), 0.1f64..2.0)
        .prop_flat_map(move |(m, hidden, radius)| {
            let mut dims = vec![m];
            dims.extend(&hidden);
            dims.push(m);
            let n_w: usize = dims.windows(2).map(|d| d[0] * d[1]).sum();
            let n_b: usize = dims[1..].iter().sum();
            (
                Just(dims),
                prop::collection::vec(-max_weight..max_weight, n_w),
                prop::collection::vec(-1.0f64..1.0, n_b),
                Just(radius),
            )
        })
        .prop_map(|(dims, w, b, radius)| {
            let (mut wi, mut bi) = (0, 0);
            let mut weights = Vec::new();
            let mut biases = Vec::new();
            for d in dims.windows(2) {
                weights.push(mat(d[1], d[0], &w[wi..wi + d[0] * d[1]]));
                biases.push(Vector::from_column_slice(&b[bi..bi + d[1]]));
                wi += d[0] * d[1];
                bi += d[1];
            }
            NetCase {
                net: FeedforwardNet::new(weights, biases).unwrap(),
                bounds: StateBox::symmetric(dims[0], radius),
            }
        })
}

/// Point of the box from unit-cube coordinates.
pub fn point_in(bounds: &StateBox, u: &[f64]) -> Vector {
    Vector::from_fn(bounds.dim(), |i, _| bounds.lo[i] + u[i % u.len()] * (bounds.hi[i] - bounds.lo[i]))
}

pub fn unit_coords() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, 3)
}

/// `[Δw⁰; …; Δwᵏ⁻¹; Δw¹; …; Δwᵏ]` in the lemma block quadratic form.
pub fn lemma_form(case: &NetCase, u1: &[f64], u2: &[f64]) -> Result<(), TestCaseError> {
    let sb = propagate_sector_bounds(&case.net, &case.bounds.intervals()).unwrap();
    let q = build_q_matrices(&case.net, &sb).unwrap();
    let block = lmi_cert::lemma_block(&q);
    let a1 = case.net.activations(&point_in(&case.bounds, u1)).unwrap();
    let a2 = case.net.activations(&point_in(&case.bounds, u2)).unwrap();
    let k = case.net.hidden_layers();
    let diff: Vec<Vector> = a1.iter().zip(&a2).map(|(p, q)| p - q).collect();
    let mut v: Vec<f64> = Vec::new();
    diff[..k].iter().for_each(|d| v.extend(d.iter()));
    diff[1..=k].iter().for_each(|d| v.extend(d.iter()));
    let v = Vector::from_vec(v);
    let form = v.dot(&(&block * &v));
    prop_assert!(form >= -1e-10, "quadratic form {form}");
    Ok(())
}

/// Empirical slopes over 10⁵ random input pairs stay inside the per-neuron
/// bounds.
pub fn sector_soundness(case: &NetCase, seed: u64) -> Result<(), TestCaseError> {
    use rand::{Rng, SeedableRng};
    let sb = propagate_sector_bounds(&case.net, &case.bounds.intervals()).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let k = case.net.hidden_layers();
    let m = case.bounds.dim();
    for _ in 0..100_000 {
        let x1 = Vector::from_fn(m, |i, _| rng.gen_range(case.bounds.lo[i]..=case.bounds.hi[i]));
        let x2 = Vector::from_fn(m, |i, _| rng.gen_range(case.bounds.lo[i]..=case.bounds.hi[i]));
        let a1 = case.net.activations(&x1).unwrap();
        let a2 = case.net.activations(&x2).unwrap();
        for i in 0..k {
            let w = &case.net.weights()[i];
            let b = &case.net.biases()[i];
            let z1 = w * &a1[i] + b;
            let z2 = w * &a2[i] + b;
            for (j, &(alpha, beta)) in sb.per_layer[i].per_neuron.iter().enumerate() {
                let dz = z1[j] - z2[j];
                if dz.abs() < 1e-6 {
                    continue;
                }
                let slope = (z1[j].tanh() - z2[j].tanh()) / dz;
                prop_assert!(
                    slope >= alpha - 1e-9 && slope <= beta + 1e-9,
                    "layer {} neuron {j}: slope {slope} outside [{alpha}, {beta}]",
                    i + 1
                );
                prop_assert!(sb.per_layer[i].alpha <= alpha && sb.per_layer[i].beta >= beta);
            }
        }
    }
    Ok(())
}

fn rel_err(exact: f64, approx: f64) -> f64 {
    (exact - approx).abs() / exact.abs().max(approx.abs()).max(1e-6)
}

/// Every gradient entry against a five-point difference of the loss.
pub fn backprop_vs_fd(case: &NetCase, a_entries: &[f64], u: &[f64], xdot: &[f64]) -> Result<(), TestCaseError> {
    let m = case.bounds.dim();
    let a = Mat::from_fn(m, m, |i, j| a_entries[(i * m + j) % a_entries.len()]);
    let x = point_in(&case.bounds, u);
    let xdot = Vector::from_fn(m, |i, _| xdot[i % xdot.len()]);
    let (_, grad) = backprop_grad(&case.net, &a, &x, &xdot).unwrap();
    let weights = case.net.weights().to_vec();
    let biases = case.net.biases().to_vec();
    // loss with one parameter shifted by `d`
    let loss = |what: (usize, usize, usize), d: f64| {
        let (mut a, mut w, mut b) = (a.clone(), weights.clone(), biases.clone());
        match what {
            (0, _, idx) => a[idx] += d,
            (1, l, idx) => w[l][idx] += d,
            (_, l, idx) => b[l][idx] += d,
        }
        backprop_grad(&FeedforwardNet::new(w, b).unwrap(), &a, &x, &xdot).unwrap().0
    };
    let h = 1e-3;
    let check = |what: (usize, usize, usize), exact: f64| -> Result<(), TestCaseError> {
        let fd = (-loss(what, 2.0 * h) + 8.0 * loss(what, h) - 8.0 * loss(what, -h) + loss(what, -2.0 * h)) / (12.0 * h);
        let err = rel_err(exact, fd);
        prop_assert!(err <= 1e-5 || (exact - fd).abs() <= 1e-10, "{what:?}: backprop {exact}, fd {fd}");
        Ok(())
    };
    for idx in 0..m * m {
        check((0, 0, idx), grad.a[idx])?;
    }
    for l in 0..weights.len() {
        for idx in 0..weights[l].len() {
            check((1, l, idx), grad.weights[l][idx])?;
        }
        for idx in 0..biases[l].len() {
            check((2, l, idx), grad.biases[l][idx])?;
        }
    }
    Ok(())
}

/// Random matrices, rank deficient when `rank < min(rows, cols)`.
pub fn matrix_case() -> impl Strategy<Value = Mat> {
    (1usize..=6, 1usize..=6, 1usize..=6)
        .prop_flat_map(|(r, c, k)| {
            (
                Just((r, c, k)),
                prop::collection::vec(-3.0f64..3.0, r * k),
                prop::collection::vec(-3.0f64..3.0, k * c),
            )
        })
        .prop_map(|((r, c, k), left, right)| mat(r, k, &left) * mat(k, c, &right))
}

pub fn penrose(a: &Mat) -> Result<(), TestCaseError> {
    let ap = numerics::pinv(a);
    let scale = a.norm().max(1.0);
    let tol = 1e-9 * scale * scale.max(ap.norm());
    let e1 = (a * &ap * a - a).amax();
    let e2 = (&ap * a * &ap - &ap).amax();
    let aap = a * &ap;
    let apa = &ap * a;
    let e3 = (&aap - aap.transpose()).amax();
    let e4 = (&apa - apa.transpose()).amax();
    prop_assert!(e1 <= tol && e2 <= tol && e3 <= 1e-9 && e4 <= 1e-9, "Penrose residuals {e1} {e2} {e3} {e4}");
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ToyCase {
    pub model: NodeModel,
}

/// Stable linear part `−d I + skew` plus a small network.
pub fn certifiable_toy() -> impl Strategy<Value = ToyCase> {
    (net_case(0.4), 1.0f64..3.0, prop::collection::vec(-1.0f64..1.0, 9)).prop_map(|(case, d, skew)| {
        let m = case.bounds.dim();
        let s = Mat::from_fn(m, m, |i, j| skew[i * 3 + j]);
        let a = Mat::identity(m, m) * -d + (&s - s.transpose()) * 0.5;
        ToyCase { model: NodeModel::new(a, case.net, None, case.bounds).unwrap() }
    })
}

pub fn certificate_plugin(toy: &ToyCase) -> Result<(), TestCaseError> {
    let sb = propagate_sector_bounds(&toy.model.net, &toy.model.bounds.intervals()).unwrap();
    let outcome = lmi_cert::certify(&toy.model, &sb, &SolverOptions::default()).unwrap();
    let CertOutcome::Certified(cert) = outcome else {
        return Err(TestCaseError::reject("toy not certifiable"));
    };
    let m = lmi_cert::assemble_cert_nonconvex(&toy.model, &sb, &cert.p, cert.gamma).unwrap();
    let lam = numerics::lambda_max(&m).unwrap();
    prop_assert!(lam <= 1e-8, "non-convex condition λ_max {lam}");
    let low = numerics::sym_eig_bounds(&cert.p).unwrap();
    prop_assert!(low.lambda_min >= cert.p_low - 1e-8 && low.lambda_max <= cert.p_up);
    Ok(())
}

/// Pairs of model trajectories obey the certified exponential cone.
pub fn certified_decay(toy: &ToyCase, starts: &[Vec<f64>]) -> Result<(), TestCaseError> {
    let sb = propagate_sector_bounds(&toy.model.net, &toy.model.bounds.intervals()).unwrap();
    let CertOutcome::Certified(cert) = lmi_cert::certify(&toy.model, &sb, &SolverOptions::default()).unwrap() else {
        return Err(TestCaseError::reject("toy not certifiable"));
    };
    let m = toy.model.state_dim();
    let plant = dynamics_sim::node_plant(toy.model.clone(), Mat::zeros(m, 1)).unwrap();
    let trajs: Vec<Trajectory> = starts
        .iter()
        .map(|u| dynamics_sim::open_loop_simulate(&plant, &point_in(&plant.bounds, u), 3.0, 1e-2).unwrap())
        .collect();
    let report = dynamics_sim::contraction_decay_test(&trajs, &cert.envelope()).unwrap();
    prop_assert!(report.pass, "{report:?}");
    Ok(())
}

pub fn cancellation_case() -> impl Strategy<Value = (Mat, Mat, Mat)> {
    (1usize..=4, 1usize..=5, 1usize..=3)
        .prop_flat_map(|(m, n, l)| {
            let l = l.min(m);
            (
                Just((m, n, l)),
                prop::collection::vec(-3.0f64..3.0, m * n),
                prop::collection::vec(-3.0f64..3.0, m * l),
                prop::collection::vec(-1.0f64..1.0, l * n),
            )
        })
        .prop_map(|((m, n, l), w, g, d)| (mat(m, n, &w), mat(m, l, &g), mat(l, n, &d)))
}

/// `gᵀ W_min = 0` and no other input weight leaves a smaller remainder.
pub fn cancellation(w_out: &Mat, g: &Mat, perturb: &Mat) -> Result<(), TestCaseError> {
    let (w_umin, w_min) = min_norm_cancellation(w_out, g).unwrap();
    let scale = w_out.norm().max(1.0) * g.norm().max(1.0);
    let orth = (g.transpose() * &w_min).amax();
    prop_assert!(orth <= 1e-9 * scale, "gᵀW_min = {orth}");
    prop_assert!((w_out + g * &w_umin - &w_min).amax() <= 1e-12 * scale);
    let other = (w_out + g * (&w_umin + perturb)).norm();
    prop_assert!(other >= w_min.norm() - 1e-12 * scale, "{other} < {}", w_min.norm());
    Ok(())
}

/// Runs `check` over `CASES` generated values, returning the failure
/// message if any.
pub fn run_property<S: Strategy>(
    strategy: S,
    check: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<u32, String> {
    let mut runner = TestRunner::new_with_rng(config(), TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, check).map(|_| CASES).map_err(|e| e.to_string())
}
