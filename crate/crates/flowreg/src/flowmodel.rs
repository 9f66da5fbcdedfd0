//! Flow parameterizations and the optimization loop.
//!
//! Two interchangeable parameterizations produce the flow field: a direct
//! per-point displacement field, and a small fully-connected coordinate
//! network mapping position to flow whose structure acts as an implicit
//! regularizer. Both are fitted with Adam against the combined objective;
//! the losses are recomputed from the current flow on every iteration and
//! gradients are chained through the parameterization analytically.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{FlowField, PointCloud};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossEvaluator, SmoothKind};
use crate::normals::{build_descriptors, estimate_normals};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Direct,
    CoordNet,
}

/// One fully-connected layer, column-major weights.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Coordinate network: 3D position in, 3D flow out, ReLU between hidden
/// layers, linear output.
#[derive(Debug, Clone)]
pub struct CoordNet {
    layers: Vec<Layer>,
}

impl CoordNet {
    /// Uniform fan-in initialization, seeded.
    pub fn new(hidden_layers: usize, hidden_width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if hidden_layers > 0 && hidden_width == 0 {
            return Err(Error::InvalidConfig(
                "coordnet hidden width must be at least 1".into(),
            ));
        }
        let mut sizes = vec![3usize];
        sizes.extend(std::iter::repeat(hidden_width).take(hidden_layers));
        sizes.push(3);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weights: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            let bias: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            layers.push(Layer {
                weights: DMatrix::from_column_slice(fan_out, fan_in, &weights),
                bias: DVector::from_column_slice(&bias),
            });
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn forward_batch(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = input.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weights * &a;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            if l < last {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a
    }
}

/// Flow parameterization: a free displacement per point, or a coordinate
/// network evaluated at each source position.
#[derive(Debug, Clone)]
pub enum FlowModel {
    Direct(Vec<Vector3<f64>>),
    CoordNet(CoordNet),
}

impl FlowModel {
    /// Direct field initialized to zero flow.
    pub fn new_direct(n: usize) -> Self {
        FlowModel::Direct(vec![Vector3::zeros(); n])
    }

    pub fn new_coordnet(
        hidden_layers: usize,
        hidden_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(FlowModel::CoordNet(CoordNet::new(
            hidden_layers,
            hidden_width,
            rng,
        )?))
    }

    pub fn param_count(&self) -> usize {
        match self {
            FlowModel::Direct(params) => 3 * params.len(),
            FlowModel::CoordNet(net) => net
                .layers
                .iter()
                .map(|l| l.weights.len() + l.bias.len())
                .sum(),
        }
    }

    /// Canonical flat parameter order: per point xyz for the direct field;
    /// per layer column-major weights then bias for the network.
    pub fn params_flat(&self) -> Vec<f64> {
        match self {
            FlowModel::Direct(params) => params
                .iter()
                .flat_map(|v| [v.x, v.y, v.z])
                .collect(),
            FlowModel::CoordNet(net) => {
                let mut out = Vec::with_capacity(self.param_count());
                for layer in &net.layers {
                    out.extend_from_slice(layer.weights.as_slice());
                    out.extend_from_slice(layer.bias.as_slice());
                }
                out
            }
        }
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::LengthMismatch {
                context: "flat parameters",
                left: flat.len(),
                right: self.param_count(),
            });
        }
        match self {
            FlowModel::Direct(params) => {
                for (i, v) in params.iter_mut().enumerate() {
                    *v = Vector3::new(flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]);
                }
            }
            FlowModel::CoordNet(net) => {
                let mut offset = 0;
                for layer in &mut net.layers {
                    let w = layer.weights.len();
                    layer
                        .weights
                        .as_mut_slice()
                        .copy_from_slice(&flat[offset..offset + w]);
                    offset += w;
                    let b = layer.bias.len();
                    layer
                        .bias
                        .as_mut_slice()
                        .copy_from_slice(&flat[offset..offset + b]);
                    offset += b;
                }
            }
        }
        Ok(())
    }

    /// Evaluates the flow at every source point.
    pub fn forward(&self, source: &PointCloud) -> Result<FlowField> {
        match self {
            FlowModel::Direct(params) => {
                if params.len() != source.len() {
                    return Err(Error::LengthMismatch {
                        context: "direct flow parameters",
                        left: params.len(),
                        right: source.len(),
                    });
                }
                FlowField::new(params.clone())
            }
            FlowModel::CoordNet(net) => {
                let input =
                    DMatrix::from_fn(3, source.len(), |r, c| source.get(c)[r]);
                let out = net.forward_batch(&input);
                FlowField::new(
                    (0..source.len())
                        .map(|c| Vector3::new(out[(0, c)], out[(1, c)], out[(2, c)]))
                        .collect(),
                )
            }
        }
    }

    /// Chains a per-point flow gradient back to the parameters, returned in
    /// the canonical flat order. For the direct field this is the identity.
    pub fn backward(
        &self,
        source: &PointCloud,
        grad_flow: &[Vector3<f64>],
    ) -> Result<Vec<f64>> {
        if grad_flow.len() != source.len() {
            return Err(Error::LengthMismatch {
                context: "flow gradient",
                left: grad_flow.len(),
                right: source.len(),
            });
        }
        match self {
            FlowModel::Direct(params) => {
                if params.len() != source.len() {
                    return Err(Error::LengthMismatch {
                        context: "direct flow parameters",
                        left: params.len(),
                        right: source.len(),
                    });
                }
                Ok(grad_flow.iter().flat_map(|g| [g.x, g.y, g.z]).collect())
            }
            FlowModel::CoordNet(net) => {
                let n = source.len();
                let layer_count = net.layers.len();
                // Recompute the activation stack.
                let mut activations =
                    vec![DMatrix::from_fn(3, n, |r, c| source.get(c)[r])];
                for (l, layer) in net.layers.iter().enumerate() {
                    let mut z = &layer.weights * activations.last().unwrap();
                    for mut col in z.column_iter_mut() {
                        col += &layer.bias;
                    }
                    if l + 1 < layer_count {
                        z.apply(|v| *v = v.max(0.0));
                    }
                    activations.push(z);
                }

                let mut g = DMatrix::from_fn(3, n, |r, c| grad_flow[c][r]);
                let mut layer_grads: Vec<(DMatrix<f64>, DVector<f64>)> =
                    Vec::with_capacity(layer_count);
                for l in (0..layer_count).rev() {
                    let grad_w = &g * activations[l].transpose();
                    let grad_b = g.column_sum();
                    layer_grads.push((grad_w, grad_b));
                    if l > 0 {
                        let mut upstream = net.layers[l].weights.transpose() * &g;
                        // ReLU subgradient: a > 0 exactly where z > 0.
                        upstream.zip_apply(&activations[l], |u, a| {
                            if a <= 0.0 {
                                *u = 0.0;
                            }
                        });
                        g = upstream;
                    }
                }
                layer_grads.reverse();

                let mut flat = Vec::with_capacity(self.param_count());
                for (grad_w, grad_b) in &layer_grads {
                    flat.extend_from_slice(grad_w.as_slice());
                    flat.extend_from_slice(grad_b.as_slice());
                }
                Ok(flat)
            }
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.008,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators plus the per-iteration loss trace.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    params: AdamParams,
    pub history: Vec<f64>,
}

impl OptimState {
    pub fn new(param_count: usize, params: AdamParams) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            params,
            history: Vec::new(),
        }
    }

    pub fn iteration(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, theta: &mut [f64], grads: &[f64]) {
        assert_eq!(theta.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let AdamParams {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.params;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Stereo,
    Lidar,
}

/// Everything `fit` needs: stopping rule, optimizer, model choice, and the
/// loss weights and neighborhood sizes forwarded to the objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitConfig {
    pub preset: Preset,
    pub model: ModelKind,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub max_iters: usize,
    pub convergence_tol: f64,
    pub patience: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub alpha_surf: f64,
    pub alpha_cyc: f64,
    pub k: usize,
    pub k_n: usize,
    pub normal_scale: f64,
    pub cyc_refresh_every: usize,
    pub smooth_kind: SmoothKind,
}

impl FitConfig {
    /// Dense stereo-style clouds: wide neighborhoods, strong smoothness.
    pub fn stereo() -> Self {
        Self {
            preset: Preset::Stereo,
            alpha_surf: 10.0,
            alpha_cyc: 10.0,
            k: 32,
            ..Self::lidar()
        }
    }

    /// Sparse scan-style clouds: small neighborhoods, lighter surface
    /// weight.
    pub fn lidar() -> Self {
        Self {
            preset: Preset::Lidar,
            model: ModelKind::Direct,
            hidden_layers: 4,
            hidden_width: 64,
            max_iters: 2000,
            convergence_tol: 1e-5,
            patience: 30,
            seed: 0,
            learning_rate: 0.008,
            alpha_surf: 1.0,
            alpha_cyc: 10.0,
            k: 4,
            k_n: 5,
            normal_scale: 1.0,
            cyc_refresh_every: 1,
            smooth_kind: SmoothKind::Surf,
        }
    }

    pub fn from_preset(preset: Preset) -> Self {
        match preset {
            Preset::Stereo => Self::stereo(),
            Preset::Lidar => Self::lidar(),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha_surf: self.alpha_surf,
            alpha_cyc: self.alpha_cyc,
            k: self.k,
            smooth_kind: self.smooth_kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !self.convergence_tol.is_finite() || self.convergence_tol < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "convergence_tol must be finite and non-negative, got {}",
                self.convergence_tol
            )));
        }
        if self.patience < 1 {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.k_n < 3 {
            return Err(Error::InvalidConfig("k_n must be at least 3".into()));
        }
        if !self.normal_scale.is_finite() || self.normal_scale < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "normal_scale must be finite and non-negative, got {}",
                self.normal_scale
            )));
        }
        if self.cyc_refresh_every < 1 {
            return Err(Error::InvalidConfig(
                "cyc_refresh_every must be at least 1".into(),
            ));
        }
        if self.model == ModelKind::CoordNet && self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::InvalidConfig(
                "hidden_width must be at least 1".into(),
            ));
        }
        self.loss_config().validate()
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        Self::lidar()
    }
}

/// Per-iteration loss values.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossRecord {
    pub dist: f64,
    pub surf: f64,
    pub cyc: f64,
    pub total: f64,
}

/// Result of a fit: the flow at the best-scoring iterate plus the loss
/// trajectory.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub flow: FlowField,
    pub history: Vec<LossRecord>,
    pub best_iteration: usize,
    pub best_total: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Optimizes the flow between `source` and `target` under `cfg`.
///
/// Surface normals and descriptors of the source are computed once (they
/// depend only on the source geometry), as are the smoothness clusters.
/// Correspondences are refreshed every iteration and the cyclic clusters
/// every `cyc_refresh_every` iterations. Stops when the relative loss
/// improvement stays below `convergence_tol` for `patience` consecutive
/// iterations, or at `max_iters`; returns the flow of the lowest-loss
/// iterate.
pub fn fit(source: &PointCloud, target: &PointCloud, cfg: &FitConfig) -> Result<FitOutcome> {
    cfg.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = match cfg.model {
        ModelKind::Direct => FlowModel::new_direct(source.len()),
        ModelKind::CoordNet => {
            FlowModel::new_coordnet(cfg.hidden_layers, cfg.hidden_width, &mut rng)?
        }
    };

    let needs_descriptors = cfg.alpha_surf > 0.0 && cfg.smooth_kind == SmoothKind::Surf;
    let descriptors = if needs_descriptors {
        let normals = estimate_normals(source, cfg.k_n, Vector3::zeros())?;
        Some(build_descriptors(source, &normals, cfg.normal_scale)?)
    } else {
        None
    };
    let mut evaluator = LossEvaluator::new(
        source,
        target,
        descriptors.as_ref(),
        cfg.loss_config(),
        cfg.cyc_refresh_every,
    )?;

    let mut optim = OptimState::new(
        model.param_count(),
        AdamParams {
            learning_rate: cfg.learning_rate,
            ..AdamParams::default()
        },
    );

    let mut history = Vec::new();
    let mut best_flow: Option<FlowField> = None;
    let mut best_total = f64::INFINITY;
    let mut best_iteration = 0;
    let mut prev_total = f64::INFINITY;
    let mut stall = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;

    for iter in 0..cfg.max_iters {
        let flow = model.forward(source)?;
        let breakdown = evaluator.evaluate(&flow)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: iter,
                dist: breakdown.dist,
                surf: breakdown.surf,
                cyc: breakdown.cyc,
            });
        }
        history.push(LossRecord {
            dist: breakdown.dist,
            surf: breakdown.surf,
            cyc: breakdown.cyc,
            total: breakdown.total,
        });
        optim.history.push(breakdown.total);
        iterations = iter + 1;

        if breakdown.total < best_total {
            best_total = breakdown.total;
            best_iteration = iter;
            best_flow = Some(flow.clone());
        }

        if prev_total.is_finite() {
            let improvement = (prev_total - breakdown.total) / prev_total.abs().max(f64::MIN_POSITIVE);
            if improvement < cfg.convergence_tol {
                stall += 1;
            } else {
                stall = 0;
            }
            if stall >= cfg.patience {
                converged = true;
                break;
            }
        }
        prev_total = breakdown.total;

        let grads = model.backward(source, &breakdown.grad_total)?;
        let mut theta = model.params_flat();
        optim.step(&mut theta, &grads);
        model.set_params_flat(&theta)?;
    }

    Ok(FitOutcome {
        flow: best_flow.expect("at least one iteration ran"),
        history,
        best_iteration,
        best_total,
        iterations,
        converged,
    })
}
