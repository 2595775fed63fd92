//! Linear-plus-tanh-network drift models: evaluation, training and
//! residual bounds.
//!
//! The model is `ẋ ≈ A x + Z(x)` where `Z` is a feedforward network with
//! `k ≥ 1` tanh hidden layers and an affine output layer.

use crate::numerics::{Mat, Vector};
use crate::sector::Interval;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("network needs at least one hidden layer")]
    NoHiddenLayer,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {index} lies outside the state box")]
    OutsideBox { index: usize },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed model file: {0}")]
    Format(String),
}

/// Axis-aligned operating region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl StateBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, ModelError> {
        if lo.len() != hi.len() {
            return Err(ModelError::Dimension(format!(
                "box bounds have lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(ModelError::InvalidParameter("box needs finite lo <= hi".into()));
        }
        Ok(Self { lo, hi })
    }

    /// The box `[-r, r]^dim`.
    pub fn symmetric(dim: usize, r: f64) -> Self {
        Self {
            lo: vec![-r; dim],
            hi: vec![r; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &Vector) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    pub fn intervals(&self) -> Vec<Interval> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&lo, &hi)| Interval { lo, hi })
            .collect()
    }

    /// Uniform grid with `per_axis` points per coordinate (corners included).
    pub fn grid(&self, per_axis: usize) -> Vec<Vector> {
        let n = per_axis.max(2);
        let dim = self.dim();
        let total = n.pow(dim as u32);
        (0..total)
            .map(|mut idx| {
                Vector::from_fn(dim, |d, _| {
                    let i = idx % n;
                    idx /= n;
                    self.lo[d] + (self.hi[d] - self.lo[d]) * i as f64 / (n - 1) as f64
                })
            })
            .collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vector {
        Vector::from_fn(self.dim(), |d, _| {
            if self.hi[d] > self.lo[d] {
                rng.gen_range(self.lo[d]..=self.hi[d])
            } else {
                self.lo[d]
            }
        })
    }
}

/// tanh feedforward network `w⁰ = x`, `wⁱ⁺¹ = tanh(Wⁱ⁺¹wⁱ + bⁱ⁺¹)`,
/// `Z(x) = Wᵏ⁺¹wᵏ + bᵏ⁺¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedforwardNet {
    dims: Vec<usize>,
    weights: Vec<Mat>,
    biases: Vec<Vector>,
}

impl FeedforwardNet {
    pub fn new(weights: Vec<Mat>, biases: Vec<Vector>) -> Result<Self, ModelError> {
        if weights.len() < 2 {
            return Err(ModelError::NoHiddenLayer);
        }
        if weights.len() != biases.len() {
            return Err(ModelError::Dimension(format!(
                "{} weight matrices but {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        let mut dims = vec![weights[0].ncols()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *dims.last().unwrap() {
                return Err(ModelError::Dimension(format!(
                    "layer {} expects {} inputs, previous layer has {}",
                    i + 1,
                    w.ncols(),
                    dims.last().unwrap()
                )));
            }
            if b.len() != w.nrows() {
                return Err(ModelError::Dimension(format!(
                    "layer {} bias has length {}, expected {}",
                    i + 1,
                    b.len(),
                    w.nrows()
                )));
            }
            dims.push(w.nrows());
        }
        if dims[0] != *dims.last().unwrap() {
            return Err(ModelError::Dimension(format!(
                "input dimension {} differs from output dimension {}",
                dims[0],
                dims.last().unwrap()
            )));
        }
        Ok(Self {
            dims,
            weights,
            biases,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self, ModelError> {
        let weights = dims.windows(2).map(|w| Mat::zeros(w[1], w[0])).collect();
        let biases = dims[1..].iter().map(|&n| Vector::zeros(n)).collect();
        Self::new(weights, biases)
    }

    /// Uniform `±√(6/(fan_in+fan_out))` weights, zero biases.
    pub fn glorot<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self, ModelError> {
        let weights = dims
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Mat::from_fn(w[1], w[0], |_, _| rng.gen_range(-limit..=limit))
            })
            .collect();
        let biases = dims[1..].iter().map(|&n| Vector::zeros(n)).collect();
        Self::new(weights, biases)
    }

    /// Neuron counts `m_0, …, m_{k+1}`.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of hidden layers `k`.
    pub fn hidden_layers(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn state_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn weights(&self) -> &[Mat] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vector] {
        &self.biases
    }

    /// `Wᵏ⁺¹`.
    pub fn output_weight(&self) -> &Mat {
        self.weights.last().unwrap()
    }

    /// `bᵏ⁺¹`.
    pub fn output_bias(&self) -> &Vector {
        self.biases.last().unwrap()
    }

    fn check_input(&self, x: &Vector) -> Result<(), ModelError> {
        if x.len() != self.dims[0] {
            return Err(ModelError::Dimension(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.dims[0]
            )));
        }
        Ok(())
    }

    /// Hidden activations `w⁰ … wᵏ` (`w⁰ = x`).
    pub fn activations(&self, x: &Vector) -> Result<Vec<Vector>, ModelError> {
        self.check_input(x)?;
        let k = self.hidden_layers();
        let mut acts = Vec::with_capacity(k + 1);
        acts.push(x.clone());
        for i in 0..k {
            let pre = &self.weights[i] * &acts[i] + &self.biases[i];
            acts.push(pre.map(f64::tanh));
        }
        Ok(acts)
    }

    /// Output `Z(x)` together with every layer activation `w⁰ … wᵏ`.
    pub fn forward_with_activations(&self, x: &Vector) -> Result<(Vector, Vec<Vector>), ModelError> {
        let acts = self.activations(x)?;
        let z = self.output_weight() * acts.last().unwrap() + self.output_bias();
        Ok((z, acts))
    }

    pub fn output(&self, x: &Vector) -> Result<Vector, ModelError> {
        Ok(self.forward_with_activations(x)?.0)
    }

    /// Last hidden activation `wᵏ(x)`.
    pub fn last_hidden(&self, x: &Vector) -> Result<Vector, ModelError> {
        Ok(self.activations(x)?.pop().unwrap())
    }

    fn add_scaled(&mut self, grad: &Gradient, scale: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            *w += g * scale;
        }
        for (b, g) in self.biases.iter_mut().zip(&grad.biases) {
            *b += g * scale;
        }
    }
}

/// `ẋ ≈ A x + Z(x)` together with its residual bound.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeModel {
    pub a: Mat,
    pub net: FeedforwardNet,
    /// Uniform bound on `‖ẋ − A x − Z(x)‖` over `bounds`; `None` until estimated.
    pub epsilon: Option<f64>,
    pub bounds: StateBox,
}

impl NodeModel {
    pub fn new(a: Mat, net: FeedforwardNet, epsilon: Option<f64>, bounds: StateBox) -> Result<Self, ModelError> {
        let m = net.state_dim();
        if a.shape() != (m, m) {
            return Err(ModelError::Dimension(format!(
                "A is {}x{}, state dimension is {m}",
                a.nrows(),
                a.ncols()
            )));
        }
        if bounds.dim() != m {
            return Err(ModelError::Dimension(format!(
                "box has dimension {}, state dimension is {m}",
                bounds.dim()
            )));
        }
        if let Some(e) = epsilon {
            if !(e.is_finite() && e >= 0.0) {
                return Err(ModelError::InvalidParameter(format!("epsilon {e}")));
            }
        }
        Ok(Self {
            a,
            net,
            epsilon,
            bounds,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.net.state_dim()
    }

    /// `A x + Z(x)`.
    pub fn vector_field(&self, x: &Vector) -> Result<Vector, ModelError> {
        Ok(&self.a * x + self.net.output(x)?)
    }

    /// `ẋ − A x − Z(x)`.
    pub fn residual(&self, x: &Vector, xdot: &Vector) -> Result<Vector, ModelError> {
        if xdot.len() != self.state_dim() {
            return Err(ModelError::Dimension("derivative length".into()));
        }
        Ok(xdot - self.vector_field(x)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from(self)).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        file.try_into()
    }
}

/// On-disk model layout; matrices are flattened row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub state_dim: usize,
    pub dims: Vec<usize>,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub epsilon: Option<f64>,
    #[serde(rename = "box")]
    pub bounds: StateBox,
}

fn flatten(m: &Mat) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
        .collect()
}

impl From<&NodeModel> for ModelFile {
    fn from(m: &NodeModel) -> Self {
        Self {
            state_dim: m.state_dim(),
            dims: m.net.dims().to_vec(),
            a: flatten(&m.a),
            weights: m.net.weights().iter().map(flatten).collect(),
            biases: m.net.biases().iter().map(|b| b.iter().copied().collect()).collect(),
            epsilon: m.epsilon,
            bounds: m.bounds.clone(),
        }
    }
}

impl TryFrom<ModelFile> for NodeModel {
    type Error = ModelError;

    fn try_from(f: ModelFile) -> Result<Self, ModelError> {
        let n = f.state_dim;
        if f.a.len() != n * n {
            return Err(ModelError::Format(format!("A has {} entries, expected {}", f.a.len(), n * n)));
        }
        if f.dims.len() < 3 || f.weights.len() != f.dims.len() - 1 || f.biases.len() != f.dims.len() - 1 {
            return Err(ModelError::Format("dims, weights and biases disagree".into()));
        }
        let mut weights = Vec::new();
        for (i, w) in f.weights.iter().enumerate() {
            let (rows, cols) = (f.dims[i + 1], f.dims[i]);
            if w.len() != rows * cols {
                return Err(ModelError::Format(format!(
                    "weight {} has {} entries, expected {rows}x{cols}",
                    i + 1,
                    w.len()
                )));
            }
            weights.push(Mat::from_row_slice(rows, cols, w));
        }
        let biases = f.biases.iter().map(|b| Vector::from_column_slice(b)).collect();
        let net = FeedforwardNet::new(weights, biases)?;
        if net.state_dim() != n {
            return Err(ModelError::Format("state_dim disagrees with dims".into()));
        }
        NodeModel::new(Mat::from_row_slice(n, n, &f.a), net, f.epsilon, f.bounds)
    }
}

/// Sampled `(x, ẋ)` pairs from the operating box.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub states: Vec<Vector>,
    pub derivatives: Vec<Vector>,
    pub bounds: StateBox,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    states: Vec<Vec<f64>>,
    derivatives: Vec<Vec<f64>>,
    #[serde(rename = "box")]
    bounds: StateBox,
}

impl Dataset {
    pub fn new(states: Vec<Vector>, derivatives: Vec<Vector>, bounds: StateBox) -> Result<Self, ModelError> {
        if states.len() != derivatives.len() {
            return Err(ModelError::Dimension(format!(
                "{} states but {} derivatives",
                states.len(),
                derivatives.len()
            )));
        }
        for (i, (x, d)) in states.iter().zip(&derivatives).enumerate() {
            if d.len() != x.len() {
                return Err(ModelError::Dimension(format!("sample {i} has mismatched lengths")));
            }
            if !bounds.contains(x) {
                return Err(ModelError::OutsideBox { index: i });
            }
        }
        Ok(Self {
            states,
            derivatives,
            bounds,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn to_json(&self) -> String {
        let f = DatasetFile {
            states: self.states.iter().map(|v| v.iter().copied().collect()).collect(),
            derivatives: self.derivatives.iter().map(|v| v.iter().copied().collect()).collect(),
            bounds: self.bounds.clone(),
        };
        serde_json::to_string(&f).expect("dataset serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let f: DatasetFile = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        let conv = |v: Vec<Vec<f64>>| v.into_iter().map(Vector::from_vec).collect();
        Self::new(conv(f.states), conv(f.derivatives), f.bounds)
    }
}

/// Gradient of the squared residual with respect to `(A, W, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub a: Mat,
    pub weights: Vec<Mat>,
    pub biases: Vec<Vector>,
}

impl Gradient {
    fn zeros_like(a: &Mat, net: &FeedforwardNet) -> Self {
        Self {
            a: Mat::zeros(a.nrows(), a.ncols()),
            weights: net.weights.iter().map(|w| Mat::zeros(w.nrows(), w.ncols())).collect(),
            biases: net.biases.iter().map(|b| Vector::zeros(b.len())).collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradient) {
        self.a += &other.a;
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            *w += o;
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            *b += o;
        }
    }

    fn scale(&mut self, s: f64) {
        self.a *= s;
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    fn norm_sq(&self) -> f64 {
        self.a.norm_squared()
            + self.weights.iter().map(|w| w.norm_squared()).sum::<f64>()
            + self.biases.iter().map(|b| b.norm_squared()).sum::<f64>()
    }
}

/// Loss `½‖ẋ − A x − Z(x)‖²` and its exact gradient.
pub fn backprop_grad(net: &FeedforwardNet, a: &Mat, x: &Vector, xdot: &Vector) -> Result<(f64, Gradient), ModelError> {
    let m = net.state_dim();
    if a.shape() != (m, m) || xdot.len() != m {
        return Err(ModelError::Dimension("A or derivative does not match the network".into()));
    }
    let (z, acts) = net.forward_with_activations(x)?;
    let r = xdot - a * x - z;
    let loss = 0.5 * r.norm_squared();
    let k = net.hidden_layers();
    let mut grad = Gradient::zeros_like(a, net);
    // dL/dZ = -r
    let dz = -r;
    grad.a = &dz * x.transpose();
    grad.weights[k] = &dz * acts[k].transpose();
    grad.biases[k] = dz.clone();
    let mut upstream = net.weights[k].transpose() * &dz;
    for i in (0..k).rev() {
        // w^{i+1} = tanh(pre), dtanh = 1 - w²
        let delta = upstream.component_mul(&acts[i + 1].map(|w| 1.0 - w * w));
        grad.weights[i] = &delta * acts[i].transpose();
        grad.biases[i] = delta.clone();
        if i > 0 {
            upstream = net.weights[i].transpose() * &delta;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball gradient descent.
    #[default]
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base step size to 1% of it over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub schedule: StepSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5000,
            step_size: 1e-2,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
            optimizer: Optimizer::Momentum,
            schedule: StepSchedule::Constant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean squared residual over the training set after each epoch.
    pub loss_history: Vec<f64>,
}

struct OptimizerState {
    first: Gradient,
    second: Option<Gradient>,
    steps: i32,
}

/// Fits `(A, W, b)` to the dataset by mini-batch first-order descent on the
/// mean squared residual. Deterministic for a fixed seed.
pub fn train_node(data: &Dataset, dims: &[usize], cfg: &TrainConfig) -> Result<(NodeModel, TrainReport), ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let m = data.states[0].len();
    if dims.len() < 3 || dims[0] != m || *dims.last().unwrap() != m {
        return Err(ModelError::Dimension(format!(
            "architecture {dims:?} does not match state dimension {m}"
        )));
    }
    if cfg.batch_size == 0 || !(cfg.step_size >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(ModelError::InvalidParameter("batch size, step size or momentum".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = FeedforwardNet::glorot(dims, &mut rng)?;
    let limit = (3.0 / m as f64).sqrt();
    let mut a = Mat::from_fn(m, m, |_, _| rng.gen_range(-limit..=limit));

    let mut state = OptimizerState {
        first: Gradient::zeros_like(&a, &net),
        second: matches!(cfg.optimizer, Optimizer::Adam).then(|| Gradient::zeros_like(&a, &net)),
        steps: 0,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let lr = match cfg.schedule {
            StepSchedule::Constant => cfg.step_size,
            StepSchedule::Cosine => {
                let frac = epoch as f64 / cfg.epochs.max(1) as f64;
                cfg.step_size * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
            }
        };
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = Gradient::zeros_like(&a, &net);
            for &i in batch {
                let (_, g) = backprop_grad(&net, &a, &data.states[i], &data.derivatives[i])?;
                grad.add_assign(&g);
            }
            grad.scale(1.0 / batch.len() as f64);
            let step = optimizer_step(&mut state, &grad, cfg);
            a += &step.a * -lr;
            net.add_scaled(&step, -lr);
        }
        let mut loss = 0.0;
        for (x, d) in data.states.iter().zip(&data.derivatives) {
            let r = d - &a * x - net.output(x)?;
            loss += r.norm_squared();
        }
        loss /= data.len() as f64;
        if !loss.is_finite() {
            return Err(ModelError::Diverged { epoch, loss });
        }
        report.loss_history.push(loss);
    }
    let model = NodeModel::new(a, net, None, data.bounds.clone())?;
    Ok((model, report))
}

fn optimizer_step(state: &mut OptimizerState, grad: &Gradient, cfg: &TrainConfig) -> Gradient {
    match cfg.optimizer {
        Optimizer::Momentum => {
            state.first.scale(cfg.momentum);
            state.first.add_assign(grad);
            state.first.clone()
        }
        Optimizer::Adam => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            state.steps += 1;
            let second = state.second.as_mut().expect("adam state");
            let c1 = 1.0 - B1.powi(state.steps);
            let c2 = 1.0 - B2.powi(state.steps);
            let upd = |m: &mut f64, v: &mut f64, g: f64| {
                *m = B1 * *m + (1.0 - B1) * g;
                *v = B2 * *v + (1.0 - B2) * g * g;
                (*m / c1) / ((*v / c2).sqrt() + EPS)
            };
            let mut out = grad.clone();
            let zip_apply = |o: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
                for i in 0..g.len() {
                    o[i] = upd(&mut m[i], &mut v[i], g[i]);
                }
            };
            zip_apply(out.a.as_mut_slice(), state.first.a.as_mut_slice(), second.a.as_mut_slice(), grad.a.as_slice());
            for l in 0..grad.weights.len() {
                zip_apply(
                    out.weights[l].as_mut_slice(),
                    state.first.weights[l].as_mut_slice(),
                    second.weights[l].as_mut_slice(),
                    grad.weights[l].as_slice(),
                );
                zip_apply(
                    out.biases[l].as_mut_slice(),
                    state.first.biases[l].as_mut_slice(),
                    second.biases[l].as_mut_slice(),
                    grad.biases[l].as_slice(),
                );
            }
            out
        }
    }
}

/// Residual statistics of a model over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualStats {
    pub max_norm: f64,
    pub mean_norm: f64,
    pub mean_squared: f64,
}

pub fn residual_stats(model: &NodeModel, data: &Dataset) -> Result<ResidualStats, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut max_norm: f64 = 0.0;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for (x, d) in data.states.iter().zip(&data.derivatives) {
        let n = model.residual(x, d)?.norm();
        max_norm = max_norm.max(n);
        sum += n;
        sum_sq += n * n;
    }
    let len = data.len() as f64;
    Ok(ResidualStats {
        max_norm,
        mean_norm: sum / len,
        mean_squared: sum_sq / len,
    })
}

/// Sets `model.epsilon = margin · max ‖ẋ − A x − Z(x)‖` over the validation
/// set and returns it.
pub fn error_bound(model: &mut NodeModel, validation: &Dataset, margin: f64) -> Result<f64, ModelError> {
    if !(margin >= 1.0) {
        return Err(ModelError::InvalidParameter(format!("margin {margin} < 1")));
    }
    let stats = residual_stats(model, validation)?;
    let eps = margin * stats.max_norm;
    model.epsilon = Some(eps);
    Ok(eps)
}

/// Default safety factor applied by [`error_bound`] callers.
pub const DEFAULT_EPSILON_MARGIN: f64 = 1.25;

impl Gradient {
    /// Euclidean norm over all parameters.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_net(w1: f64, b1: f64, w2: f64, b2: f64) -> FeedforwardNet {
        FeedforwardNet::new(
            vec![Mat::from_element(1, 1, w1), Mat::from_element(1, 1, w2)],
            vec![Vector::from_element(1, b1), Vector::from_element(1, b2)],
        )
        .unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = FeedforwardNet::zeros(&[2, 4, 3, 2]).unwrap();
        let x = Vector::from_vec(vec![0.7, -1.3]);
        let (z, acts) = net.forward_with_activations(&x).unwrap();
        assert_eq!(z, Vector::zeros(2));
        assert_eq!(acts[0], x);
        assert!(acts[1..].iter().all(|a| a.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn scalar_identity_net() {
        let net = scalar_net(1.0, 0.0, 1.0, 0.0);
        let z = net.output(&Vector::from_element(1, 0.5)).unwrap();
        assert_abs_diff_eq!(z[0], 0.5f64.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(z[0], 0.46212, epsilon = 1e-5);
    }

    #[test]
    fn rejects_wrong_input_dimension() {
        let net = FeedforwardNet::zeros(&[2, 3, 2]).unwrap();
        assert!(matches!(
            net.forward_with_activations(&Vector::zeros(3)),
            Err(ModelError::Dimension(_))
        ));
        assert!(matches!(FeedforwardNet::zeros(&[2, 2]), Err(ModelError::NoHiddenLayer)));
    }

    #[test]
    fn zero_residual_has_zero_gradient() {
        let net = scalar_net(0.8, 0.1, -0.5, 0.2);
        let a = Mat::from_element(1, 1, -1.0);
        let x = Vector::from_element(1, 0.3);
        let xdot = &a * &x + net.output(&x).unwrap();
        let (loss, g) = backprop_grad(&net, &a, &x, &xdot).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn scalar_gradient_matches_hand_derivation() {
        // r = y - a x - (w2 tanh(w1 x + b1) + b2)
        let (w1, b1, w2, b2, av, x, y) = (0.8, 0.1, -0.5, 0.2, -1.0, 0.3, 0.9);
        let net = scalar_net(w1, b1, w2, b2);
        let a = Mat::from_element(1, 1, av);
        let (_, g) = backprop_grad(&net, &a, &Vector::from_element(1, x), &Vector::from_element(1, y)).unwrap();
        let t = (w1 * x + b1).tanh();
        let r = y - av * x - (w2 * t + b2);
        assert_abs_diff_eq!(g.a[(0, 0)], -r * x, epsilon = 1e-12);
        assert_abs_diff_eq!(g.weights[1][(0, 0)], -r * t, epsilon = 1e-12);
        assert_abs_diff_eq!(g.biases[1][0], -r, epsilon = 1e-12);
        assert_abs_diff_eq!(g.weights[0][(0, 0)], -r * w2 * (1.0 - t * t) * x, epsilon = 1e-12);
        assert_abs_diff_eq!(g.biases[0][0], -r * w2 * (1.0 - t * t), epsilon = 1e-12);
    }

    #[test]
    fn zero_step_leaves_parameters_unchanged() {
        let bounds = StateBox::symmetric(1, 1.0);
        let states: Vec<Vector> = (0..10).map(|i| Vector::from_element(1, -1.0 + 0.2 * i as f64)).collect();
        let derivs = states.iter().map(|x| x * -2.0).collect();
        let data = Dataset::new(states, derivs, bounds).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            step_size: 0.0,
            seed: 4,
            ..TrainConfig::default()
        };
        let (trained, _) = train_node(&data, &[1, 3, 1], &cfg).unwrap();
        let cfg0 = TrainConfig { epochs: 0, ..cfg };
        let (initial, _) = train_node(&data, &[1, 3, 1], &cfg0).unwrap();
        assert_eq!(trained, initial);
    }

    #[test]
    fn error_bound_examples() {
        let net = FeedforwardNet::zeros(&[2, 2, 2]).unwrap();
        let mut model = NodeModel::new(Mat::zeros(2, 2), net, None, StateBox::symmetric(2, 1.0)).unwrap();
        let x = Vector::from_vec(vec![0.1, 0.2]);
        let exact = Dataset::new(vec![x.clone()], vec![Vector::zeros(2)], StateBox::symmetric(2, 1.0)).unwrap();
        assert_eq!(error_bound(&mut model, &exact, 1.0).unwrap(), 0.0);
        let off = Dataset::new(
            vec![x],
            vec![Vector::from_vec(vec![0.003, 0.004])],
            StateBox::symmetric(2, 1.0),
        )
        .unwrap();
        assert_abs_diff_eq!(error_bound(&mut model, &off, 1.0).unwrap(), 0.005, epsilon = 1e-15);
        let eps = error_bound(&mut model, &off, 1.0).unwrap();
        assert_eq!(model.epsilon, Some(eps));
        let empty = Dataset::new(vec![], vec![], StateBox::symmetric(2, 1.0)).unwrap();
        assert!(matches!(error_bound(&mut model, &empty, 1.0), Err(ModelError::EmptyDataset)));
    }

    #[test]
    fn model_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = FeedforwardNet::glorot(&[2, 5, 4, 2], &mut rng).unwrap();
        let model = NodeModel::new(
            Mat::from_row_slice(2, 2, &[0.0, 1.0, -2.0, 0.5]),
            net,
            Some(0.01),
            StateBox::symmetric(2, 1.5),
        )
        .unwrap();
        let back = NodeModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);
    }
}
