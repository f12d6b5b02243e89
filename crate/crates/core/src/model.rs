//! The contact-transition predictor: a five-layer fully connected network
//! from `(s_t, i_t, u_[t..t+T-1])` to `(s_[t+1..t+T])`, with normalization
//! and sigmoid after every layer except the last.
//!
//! Forward, parameter-gradient, and input-gradient passes are written out
//! by hand so the control optimizer can backpropagate through the network
//! into the input sequence. Training uses batch statistics; the control
//! path always runs against the running statistics, because its inputs
//! arrive one sample at a time.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{
    CONTROL_STATE_DIM, HORIZON, LENGTH_SCALE_MM, LOADCELL_SCALE_N, NUM_MUSCLES, SENSOR_DIM,
    TENSION_SCALE_N,
};

/// Default epsilon inside the normalization denominator. Small enough that
/// normalized minibatches have variance 1 to well below 1e-6.
pub const BN_EPS: f64 = 1e-12;
/// Default momentum for the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;
/// Checkpoint container version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("input gradients are defined against running statistics; switch the model to inference mode")]
    TrainModeInputGradient,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
}

/// How `(s, i, u-sequence)` packs into the network input vector, and how the
/// output vector unpacks into a predicted sensor sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoLayout {
    pub sensor_dim: usize,
    pub control_dim: usize,
    pub num_muscles: usize,
    pub horizon: usize,
}

impl IoLayout {
    /// The artifact's layout: 13 + 8 + 4*10 = 61 in, 13*10 = 130 out.
    pub fn standard() -> Self {
        Self {
            sensor_dim: SENSOR_DIM,
            control_dim: CONTROL_STATE_DIM,
            num_muscles: NUM_MUSCLES,
            horizon: HORIZON,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sensor_dim + self.control_dim + self.num_muscles * self.horizon
    }

    pub fn output_dim(&self) -> usize {
        self.sensor_dim * self.horizon
    }

    /// Offset of the control-sequence block inside the input vector.
    pub fn u_offset(&self) -> usize {
        self.sensor_dim + self.control_dim
    }

    pub fn u_len(&self) -> usize {
        self.num_muscles * self.horizon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Inference,
}

/// One supervised example: packed input and the flattened target sequence,
/// both in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Per-layer normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn identity(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }
}

/// Gradients for every weight, bias, scale, and shift, in layer order.
#[derive(Debug, Clone)]
pub struct ParamGradients {
    pub d_weights: Vec<Array2<f64>>,
    pub d_biases: Vec<Array1<f64>>,
    pub d_gammas: Vec<Array1<f64>>,
    pub d_betas: Vec<Array1<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            epochs: 300,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

pub type TrainCurve = Vec<EpochStats>;

/// Mean squared error over all components.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64, ModelError> {
    if pred.len() != target.len() {
        return Err(ModelError::Shape {
            what: "mse operands",
            expected: target.len(),
            got: pred.len(),
        });
    }
    let n = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct ForwardCache {
    /// Activation entering affine layer i (index 0 is the network input).
    inputs: Vec<Array2<f64>>,
    /// Normalized pre-activations per hidden layer.
    zhats: Vec<Array2<f64>>,
    /// Sigmoid outputs per hidden layer.
    acts: Vec<Array2<f64>>,
    /// Statistics the normalization actually used.
    mus: Vec<Array1<f64>>,
    vars: Vec<Array1<f64>>,
    istds: Vec<Array1<f64>>,
    output: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct PredictiveModel {
    layout: IoLayout,
    sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    norms: Vec<BatchNorm>,
    bn_eps: f64,
    bn_momentum: f64,
    mode: Mode,
}

impl PredictiveModel {
    /// Seeded construction with the given hidden layer widths. Weights are
    /// uniform in +-1/sqrt(fan_in); biases start at zero.
    pub fn new(layout: IoLayout, hidden: &[usize], seed: u64) -> Self {
        assert!(!hidden.is_empty(), "at least one hidden layer");
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(layout.input_dim());
        sizes.extend_from_slice(hidden);
        sizes.push(layout.output_dim());

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6465_6c00_5eed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut norms = Vec::new();
        for i in 0..sizes.len() - 1 {
            let fan_in = sizes[i] as f64;
            let bound = fan_in.sqrt().recip();
            let w = Array2::from_shape_fn((sizes[i], sizes[i + 1]), |_| {
                rng.random_range(-bound..=bound)
            });
            weights.push(w);
            biases.push(Array1::zeros(sizes[i + 1]));
            if i < sizes.len() - 2 {
                norms.push(BatchNorm::identity(sizes[i + 1]));
            }
        }
        Self {
            layout,
            sizes,
            weights,
            biases,
            norms,
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
            mode: Mode::Inference,
        }
    }

    /// The artifact's network: 61 -> 100 -> 100 -> 100 -> 130.
    pub fn standard(seed: u64) -> Self {
        Self::new(IoLayout::standard(), &[100, 100, 100], seed)
    }

    pub fn layout(&self) -> &IoLayout {
        &self.layout
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn check_input(&self, len: usize) -> Result<(), ModelError> {
        if len != self.layout.input_dim() {
            return Err(ModelError::Shape {
                what: "model input",
                expected: self.layout.input_dim(),
                got: len,
            });
        }
        Ok(())
    }

    fn forward_cached(&self, x: &Array2<f64>, mode: Mode) -> ForwardCache {
        let n_aff = self.weights.len();
        let batch = x.nrows();
        let mut inputs = vec![x.clone()];
        let mut zhats = Vec::new();
        let mut acts = Vec::new();
        let mut mus = Vec::new();
        let mut vars = Vec::new();
        let mut istds = Vec::new();
        let mut a = x.clone();
        let mut output = Array2::zeros((batch, 0));
        for i in 0..n_aff {
            let z = a.dot(&self.weights[i]) + &self.biases[i];
            if i < n_aff - 1 {
                let (mu, var) = match mode {
                    Mode::Train => (
                        z.mean_axis(Axis(0)).expect("nonempty batch"),
                        z.var_axis(Axis(0), 0.0),
                    ),
                    Mode::Inference => (
                        self.norms[i].running_mean.clone(),
                        self.norms[i].running_var.clone(),
                    ),
                };
                let istd = var.mapv(|v| 1.0 / (v + self.bn_eps).sqrt());
                let zhat = (&z - &mu) * &istd;
                let zt = &zhat * &self.norms[i].gamma + &self.norms[i].beta;
                let act = zt.mapv(sigmoid);
                inputs.push(act.clone());
                zhats.push(zhat);
                acts.push(act.clone());
                mus.push(mu);
                vars.push(var);
                istds.push(istd);
                a = act;
            } else {
                output = z;
            }
        }
        ForwardCache {
            inputs,
            zhats,
            acts,
            mus,
            vars,
            istds,
            output,
        }
    }

    /// Forward pass for a batch, using the model's current mode.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        self.check_input(x.ncols())?;
        Ok(self.forward_cached(x, self.mode).output)
    }

    /// Forward pass for one sample. In train mode the sample is its own
    /// minibatch (batch statistics over a single row).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_input(x.len())?;
        let arr = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("shape");
        let out = self.forward_cached(&arr, self.mode).output;
        Ok(out.row(0).to_vec())
    }

    /// Training loss over a minibatch (batch statistics, as during training).
    pub fn batch_loss(&self, batch: &[TrainingPair]) -> Result<f64, ModelError> {
        let (x, t) = self.batch_matrices(batch)?;
        let cache = self.forward_cached(&x, Mode::Train);
        let d = (&cache.output - &t).mapv(|v| v * v);
        Ok(d.sum() / (t.nrows() * t.ncols()) as f64)
    }

    /// Inference loss over a dataset.
    pub fn dataset_loss(&self, set: &[TrainingPair]) -> Result<f64, ModelError> {
        let (x, t) = self.batch_matrices(set)?;
        let cache = self.forward_cached(&x, Mode::Inference);
        let d = (&cache.output - &t).mapv(|v| v * v);
        Ok(d.sum() / (t.nrows() * t.ncols()) as f64)
    }

    fn batch_matrices(
        &self,
        batch: &[TrainingPair],
    ) -> Result<(Array2<f64>, Array2<f64>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let in_dim = self.layout.input_dim();
        let out_dim = self.layout.output_dim();
        let mut x = Array2::zeros((batch.len(), in_dim));
        let mut t = Array2::zeros((batch.len(), out_dim));
        for (row, pair) in batch.iter().enumerate() {
            self.check_input(pair.x.len())?;
            if pair.y.len() != out_dim {
                return Err(ModelError::Shape {
                    what: "training target",
                    expected: out_dim,
                    got: pair.y.len(),
                });
            }
            x.row_mut(row).assign(&Array1::from_vec(pair.x.clone()));
            t.row_mut(row).assign(&Array1::from_vec(pair.y.clone()));
        }
        Ok((x, t))
    }

    /// Loss and parameter gradients of the mean-squared training loss over a
    /// minibatch, backpropagated through the batch statistics.
    pub fn grad_params(&self, batch: &[TrainingPair]) -> Result<(f64, ParamGradients), ModelError> {
        let (x, t) = self.batch_matrices(batch)?;
        let cache = self.forward_cached(&x, Mode::Train);
        Ok(self.backward(&cache, &t))
    }

    fn backward(&self, cache: &ForwardCache, targets: &Array2<f64>) -> (f64, ParamGradients) {
        let n_aff = self.weights.len();
        let batch = targets.nrows() as f64;
        let out_dim = targets.ncols() as f64;
        let resid = &cache.output - targets;
        let loss = resid.mapv(|v| v * v).sum() / (batch * out_dim);

        let mut d_weights: Vec<Array2<f64>> = Vec::with_capacity(n_aff);
        let mut d_biases: Vec<Array1<f64>> = Vec::with_capacity(n_aff);
        let mut d_gammas: Vec<Array1<f64>> = vec![Array1::zeros(0); n_aff - 1];
        let mut d_betas: Vec<Array1<f64>> = vec![Array1::zeros(0); n_aff - 1];

        let mut dz = resid * (2.0 / (batch * out_dim));
        for i in (0..n_aff).rev() {
            d_weights.push(cache.inputs[i].t().dot(&dz));
            d_biases.push(dz.sum_axis(Axis(0)));
            if i > 0 {
                let da = dz.dot(&self.weights[i].t());
                let act = &cache.acts[i - 1];
                let dzt = da * &act.mapv(|a| a * (1.0 - a));
                let zhat = &cache.zhats[i - 1];
                d_gammas[i - 1] = (&dzt * zhat).sum_axis(Axis(0));
                d_betas[i - 1] = dzt.sum_axis(Axis(0));
                let dzhat = dzt * &self.norms[i - 1].gamma;
                let sum_dzhat = dzhat.sum_axis(Axis(0));
                let sum_dzhat_zhat = (&dzhat * zhat).sum_axis(Axis(0));
                let istd = &cache.istds[i - 1];
                dz = (dzhat.mapv(|v| v * batch) - &sum_dzhat - zhat * &sum_dzhat_zhat)
                    * &istd.mapv(|v| v / batch);
            }
        }
        d_weights.reverse();
        d_biases.reverse();
        (
            loss,
            ParamGradients {
                d_weights,
                d_biases,
                d_gammas,
                d_betas,
            },
        )
    }

    /// Vector-Jacobian product: pull a gradient at the output back to the
    /// input. Only defined in inference mode, where normalization is a fixed
    /// per-feature affine map.
    pub fn grad_input(&self, x: &[f64], dl_dy: &[f64]) -> Result<Vec<f64>, ModelError> {
        if self.mode == Mode::Train {
            return Err(ModelError::TrainModeInputGradient);
        }
        self.check_input(x.len())?;
        if dl_dy.len() != self.layout.output_dim() {
            return Err(ModelError::Shape {
                what: "output gradient",
                expected: self.layout.output_dim(),
                got: dl_dy.len(),
            });
        }
        let arr = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("shape");
        let cache = self.forward_cached(&arr, Mode::Inference);

        let n_aff = self.weights.len();
        let mut dz = Array1::from_vec(dl_dy.to_vec());
        for i in (0..n_aff).rev() {
            let da = self.weights[i].dot(&dz);
            if i == 0 {
                return Ok(da.to_vec());
            }
            let act = cache.acts[i - 1].row(0);
            let istd = &cache.istds[i - 1];
            let gamma = &self.norms[i - 1].gamma;
            dz = Array1::from_shape_fn(act.len(), |j| {
                da[j] * act[j] * (1.0 - act[j]) * gamma[j] * istd[j]
            });
        }
        unreachable!("loop returns at i == 0")
    }

    fn update_running_stats(&mut self, mus: &[Array1<f64>], vars: &[Array1<f64>]) {
        let m = self.bn_momentum;
        for (norm, (mu, var)) in self.norms.iter_mut().zip(mus.iter().zip(vars)) {
            norm.running_mean = norm.running_mean.mapv(|v| v * (1.0 - m)) + &mu.mapv(|v| v * m);
            norm.running_var = norm.running_var.mapv(|v| v * (1.0 - m)) + &var.mapv(|v| v * m);
        }
    }

    /// Train with Adam on shuffled minibatches. Running statistics update
    /// once per minibatch; the model is left in inference mode. The returned
    /// curve has one entry per epoch: mean minibatch loss, and test loss
    /// against the running statistics when a test set is given.
    pub fn train(
        &mut self,
        train_set: &[TrainingPair],
        test_set: &[TrainingPair],
        cfg: &TrainConfig,
    ) -> Result<TrainCurve, ModelError> {
        if train_set.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00_5eed);
        let mut adam = AdamState::new(self);
        let mut curve = Vec::with_capacity(cfg.epochs);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        self.mode = Mode::Train;
        for _ in 0..cfg.epochs {
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let batch: Vec<TrainingPair> =
                    chunk.iter().map(|&i| train_set[i].clone()).collect();
                let (x, t) = self.batch_matrices(&batch)?;
                let cache = self.forward_cached(&x, Mode::Train);
                let (loss, grads) = self.backward(&cache, &t);
                self.update_running_stats(&cache.mus, &cache.vars);
                adam.step(self, &grads, cfg);
                epoch_loss += loss * chunk.len() as f64;
            }
            let train_loss = epoch_loss / train_set.len() as f64;
            let test_loss = if test_set.is_empty() {
                None
            } else {
                Some(self.dataset_loss(test_set)?)
            };
            curve.push(EpochStats {
                train_loss,
                test_loss,
            });
        }
        self.mode = Mode::Inference;
        Ok(curve)
    }

    /// All parameters flattened in a fixed order (weights, biases, scales,
    /// shifts). Used by the finite-difference checks.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for w in &self.weights {
            out.extend(w.iter());
        }
        for b in &self.biases {
            out.extend(b.iter());
        }
        for n in &self.norms {
            out.extend(n.gamma.iter());
        }
        for n in &self.norms {
            out.extend(n.beta.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        let mut it = params.iter();
        for w in &mut self.weights {
            for v in w.iter_mut() {
                *v = *it.next().expect("enough params");
            }
        }
        for b in &mut self.biases {
            for v in b.iter_mut() {
                *v = *it.next().expect("enough params");
            }
        }
        for n in &mut self.norms {
            for v in n.gamma.iter_mut() {
                *v = *it.next().expect("enough params");
            }
        }
        for n in &mut self.norms {
            for v in n.beta.iter_mut() {
                *v = *it.next().expect("enough params");
            }
        }
        assert!(it.next().is_none(), "too many params");
    }

    /// Gradients flattened in the same order as [`flat_params`].
    pub fn flatten_grads(grads: &ParamGradients) -> Vec<f64> {
        let mut out = Vec::new();
        for w in &grads.d_weights {
            out.extend(w.iter());
        }
        for b in &grads.d_biases {
            out.extend(b.iter());
        }
        for g in &grads.d_gammas {
            out.extend(g.iter());
        }
        for b in &grads.d_betas {
            out.extend(b.iter());
        }
        out
    }

    pub fn save(&self, path: &Path, training: Option<TrainConfig>) -> Result<(), ModelError> {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            layout: self.layout,
            sizes: self.sizes.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            norms: self.norms.clone(),
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
            scaling: ScalingConstants::current(),
            training,
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &ckpt)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        Self::from_checkpoint(ckpt)
    }

    fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, ModelError> {
        let fail = |msg: String| Err(ModelError::Checkpoint(msg));
        if ckpt.format_version != CHECKPOINT_VERSION {
            return fail(format!("unsupported version {}", ckpt.format_version));
        }
        if ckpt.scaling != ScalingConstants::current() {
            return fail("scaling constants do not match this build".into());
        }
        let n = ckpt.sizes.len();
        if n < 3 {
            return fail(format!("need at least one hidden layer, sizes {:?}", ckpt.sizes));
        }
        if ckpt.sizes[0] != ckpt.layout.input_dim() || ckpt.sizes[n - 1] != ckpt.layout.output_dim()
        {
            return fail(format!(
                "layer sizes {:?} disagree with layout ({} -> {})",
                ckpt.sizes,
                ckpt.layout.input_dim(),
                ckpt.layout.output_dim()
            ));
        }
        if ckpt.weights.len() != n - 1 || ckpt.biases.len() != n - 1 || ckpt.norms.len() != n - 2 {
            return fail("parameter list lengths disagree with layer sizes".into());
        }
        for i in 0..n - 1 {
            if ckpt.weights[i].shape() != [ckpt.sizes[i], ckpt.sizes[i + 1]] {
                return fail(format!("weight {i} has shape {:?}", ckpt.weights[i].shape()));
            }
            if ckpt.biases[i].len() != ckpt.sizes[i + 1] {
                return fail(format!("bias {i} has length {}", ckpt.biases[i].len()));
            }
        }
        for (i, norm) in ckpt.norms.iter().enumerate() {
            let d = ckpt.sizes[i + 1];
            if norm.gamma.len() != d
                || norm.beta.len() != d
                || norm.running_mean.len() != d
                || norm.running_var.len() != d
            {
                return fail(format!("normalization {i} dimensions disagree"));
            }
            if norm
                .running_var
                .iter()
                .any(|v| !v.is_finite() || *v <= 0.0)
            {
                return fail(format!("normalization {i} running variance must be positive"));
            }
            if norm.running_mean.iter().any(|v| !v.is_finite()) {
                return fail(format!("normalization {i} running mean must be finite"));
            }
        }
        Ok(Self {
            layout: ckpt.layout,
            sizes: ckpt.sizes,
            weights: ckpt.weights,
            biases: ckpt.biases,
            norms: ckpt.norms,
            bn_eps: ckpt.bn_eps,
            bn_momentum: ckpt.bn_momentum,
            mode: Mode::Inference,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScalingConstants {
    length_scale_mm: f64,
    loadcell_scale_n: f64,
    tension_scale_n: f64,
}

impl ScalingConstants {
    fn current() -> Self {
        Self {
            length_scale_mm: LENGTH_SCALE_MM,
            loadcell_scale_n: LOADCELL_SCALE_N,
            tension_scale_n: TENSION_SCALE_N,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    layout: IoLayout,
    sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    norms: Vec<BatchNorm>,
    bn_eps: f64,
    bn_momentum: f64,
    scaling: ScalingConstants,
    training: Option<TrainConfig>,
}

struct AdamState {
    m_weights: Vec<Array2<f64>>,
    v_weights: Vec<Array2<f64>>,
    m_biases: Vec<Array1<f64>>,
    v_biases: Vec<Array1<f64>>,
    m_gammas: Vec<Array1<f64>>,
    v_gammas: Vec<Array1<f64>>,
    m_betas: Vec<Array1<f64>>,
    v_betas: Vec<Array1<f64>>,
    step: u64,
}

impl AdamState {
    fn new(model: &PredictiveModel) -> Self {
        Self {
            m_weights: model.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v_weights: model.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            m_biases: model.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            v_biases: model.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            m_gammas: model.norms.iter().map(|n| Array1::zeros(n.gamma.len())).collect(),
            v_gammas: model.norms.iter().map(|n| Array1::zeros(n.gamma.len())).collect(),
            m_betas: model.norms.iter().map(|n| Array1::zeros(n.beta.len())).collect(),
            v_betas: model.norms.iter().map(|n| Array1::zeros(n.beta.len())).collect(),
            step: 0,
        }
    }

    fn step(&mut self, model: &mut PredictiveModel, grads: &ParamGradients, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        let lr = cfg.learning_rate;

        fn update_inplace(
            param: &mut f64,
            g: f64,
            m: &mut f64,
            v: &mut f64,
            cfg: &TrainConfig,
            bc1: f64,
            bc2: f64,
            lr: f64,
        ) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *param -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }

        for (i, w) in model.weights.iter_mut().enumerate() {
            for ((p, g), (m, v)) in w
                .iter_mut()
                .zip(grads.d_weights[i].iter())
                .zip(self.m_weights[i].iter_mut().zip(self.v_weights[i].iter_mut()))
            {
                update_inplace(p, *g, m, v, cfg, bc1, bc2, lr);
            }
        }
        for (i, b) in model.biases.iter_mut().enumerate() {
            for ((p, g), (m, v)) in b
                .iter_mut()
                .zip(grads.d_biases[i].iter())
                .zip(self.m_biases[i].iter_mut().zip(self.v_biases[i].iter_mut()))
            {
                update_inplace(p, *g, m, v, cfg, bc1, bc2, lr);
            }
        }
        for (i, n) in model.norms.iter_mut().enumerate() {
            for ((p, g), (m, v)) in n
                .gamma
                .iter_mut()
                .zip(grads.d_gammas[i].iter())
                .zip(self.m_gammas[i].iter_mut().zip(self.v_gammas[i].iter_mut()))
            {
                update_inplace(p, *g, m, v, cfg, bc1, bc2, lr);
            }
            for ((p, g), (m, v)) in n
                .beta
                .iter_mut()
                .zip(grads.d_betas[i].iter())
                .zip(self.m_betas[i].iter_mut().zip(self.v_betas[i].iter_mut()))
            {
                update_inplace(p, *g, m, v, cfg, bc1, bc2, lr);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_layout() -> IoLayout {
        // 1 sensor channel, no control state, 1 muscle, horizon 2:
        // input 1 + 0 + 2 = 3, output 1 * 2 = 2
        IoLayout {
            sensor_dim: 1,
            control_dim: 0,
            num_muscles: 1,
            horizon: 2,
        }
    }

    fn tiny_model(seed: u64) -> PredictiveModel {
        PredictiveModel::new(tiny_layout(), &[4, 4, 4], seed)
    }

    fn random_pairs(model: &PredictiveModel, count: usize, seed: u64) -> Vec<TrainingPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| TrainingPair {
                x: (0..model.layout().input_dim())
                    .map(|_| rng.random_range(-1.0..=1.0))
                    .collect(),
                y: (0..model.layout().output_dim())
                    .map(|_| rng.random_range(-1.0..=1.0))
                    .collect(),
            })
            .collect()
    }

    /// Relative error with an absolute floor, so near-zero gradients do not
    /// amplify finite-difference noise.
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    #[test]
    fn mse_basics() {
        let a = vec![1.0, 2.0, 3.0];
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let ones = vec![1.0; 130];
        let zeros = vec![0.0; 130];
        assert_eq!(mse_loss(&ones, &zeros).unwrap(), 1.0);
        assert!(mse_loss(&a, &zeros).is_err());
    }

    #[test]
    fn mse_matches_manual_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..130).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..130).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut acc = 0.0;
        for i in 0..130 {
            acc += (p[i] - t[i]) * (p[i] - t[i]);
        }
        let expected = acc / 130.0;
        assert!((mse_loss(&p, &t).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn bypassed_normalization_and_zero_weights_reduce_to_last_bias() {
        let mut model = PredictiveModel::standard(1);
        for w in &mut model.weights {
            w.fill(0.0);
        }
        for b in &mut model.biases {
            b.fill(0.0);
        }
        let last = model.biases.len() - 1;
        for (i, v) in model.biases[last].iter_mut().enumerate() {
            *v = 0.25 * i as f64;
        }
        model.set_mode(Mode::Inference);
        let x = vec![0.3; model.layout().input_dim()];
        let y = model.forward(&x).unwrap();
        // hidden activations are sigmoid(0) = 0.5, but zero last-layer
        // weights leave only the bias
        for (i, v) in y.iter().enumerate() {
            assert_eq!(*v, 0.25 * i as f64);
        }
    }

    #[test]
    fn inference_forward_is_deterministic() {
        let model = PredictiveModel::standard(3);
        let x: Vec<f64> = (0..61).map(|i| (i as f64) * 0.01 - 0.3).collect();
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_matches_independent_layerwise_evaluator() {
        // brute-force oracle: explicit loops, no ndarray
        let model = tiny_model(11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..=1.5)).collect();
            let got = model.forward(&x).unwrap();

            let mut act: Vec<f64> = x.clone();
            let n_aff = model.weights.len();
            for i in 0..n_aff {
                let w = &model.weights[i];
                let b = &model.biases[i];
                let mut z = vec![0.0; w.ncols()];
                for (col, zv) in z.iter_mut().enumerate() {
                    let mut acc = b[col];
                    for (row, a) in act.iter().enumerate() {
                        acc += a * w[[row, col]];
                    }
                    *zv = acc;
                }
                if i < n_aff - 1 {
                    let norm = &model.norms[i];
                    for (j, zv) in z.iter_mut().enumerate() {
                        let zhat = (*zv - norm.running_mean[j])
                            / (norm.running_var[j] + model.bn_eps).sqrt();
                        let zt = norm.gamma[j] * zhat + norm.beta[j];
                        *zv = 1.0 / (1.0 + (-zt).exp());
                    }
                }
                act = z;
            }
            for (g, e) in got.iter().zip(&act) {
                assert!((g - e).abs() < 1e-12, "forward {g} vs oracle {e}");
            }
        }
    }

    #[test]
    fn grad_params_zero_at_exact_fit() {
        // zero weights reduce the network to its last bias; setting that bias
        // to the target makes the loss an exact minimum
        let mut model = tiny_model(7);
        for w in &mut model.weights {
            w.fill(0.0);
        }
        for b in &mut model.biases {
            b.fill(0.0);
        }
        let last = model.biases.len() - 1;
        model.biases[last][0] = 0.4;
        model.biases[last][1] = -0.2;
        let pair = TrainingPair {
            x: vec![0.1, 0.2, 0.3],
            y: vec![0.4, -0.2],
        };
        let (loss, grads) = model.grad_params(&[pair]).unwrap();
        assert!(loss < 1e-30);
        let flat = PredictiveModel::flatten_grads(&grads);
        let max = flat.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(max < 1e-10, "max grad {max}");
    }

    #[test]
    fn grad_params_matches_central_differences() {
        let model = tiny_model(13);
        let batch = random_pairs(&model, 4, 21);
        let (_, grads) = model.grad_params(&batch).unwrap();
        let analytic = PredictiveModel::flatten_grads(&grads);

        let mut probe = tiny_model(13);
        let params = probe.flat_params();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for idx in 0..params.len() {
            let mut plus = params.clone();
            plus[idx] += h;
            probe.set_flat_params(&plus);
            let lp = probe.batch_loss(&batch).unwrap();
            let mut minus = params.clone();
            minus[idx] -= h;
            probe.set_flat_params(&minus);
            let lm = probe.batch_loss(&batch).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max(rel_err(analytic[idx], fd));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn doubling_residual_doubles_gradients() {
        let model = tiny_model(17);
        let x = vec![0.2, -0.4, 0.6];
        let y0 = model.forward(&x).unwrap();
        let r = [0.3, -0.5];
        let mk = |scale: f64| TrainingPair {
            x: x.clone(),
            y: vec![y0[0] - scale * r[0], y0[1] - scale * r[1]],
        };
        // train-mode output differs from y0, but the residual scaling is
        // linear all the same: g(2r) - g(0) = 2 (g(r) - g(0))
        let (_, g0) = model.grad_params(&[mk(0.0)]).unwrap();
        let (_, g1) = model.grad_params(&[mk(1.0)]).unwrap();
        let (_, g2) = model.grad_params(&[mk(2.0)]).unwrap();
        let f0 = PredictiveModel::flatten_grads(&g0);
        let f1 = PredictiveModel::flatten_grads(&g1);
        let f2 = PredictiveModel::flatten_grads(&g2);
        for i in 0..f0.len() {
            let lhs = f2[i] - f0[i];
            let rhs = 2.0 * (f1[i] - f0[i]);
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
        }
    }

    #[test]
    fn grad_input_zero_additive_and_matches_differences() {
        let model = tiny_model(19);
        let x = vec![0.5, -0.2, 0.9];
        let out_dim = model.layout().output_dim();

        let zero = model.grad_input(&x, &vec![0.0; out_dim]).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..out_dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let b: Vec<f64> = (0..out_dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let ga = model.grad_input(&x, &a).unwrap();
        let gb = model.grad_input(&x, &b).unwrap();
        let gs = model.grad_input(&x, &sum).unwrap();
        for i in 0..ga.len() {
            assert!((gs[i] - (ga[i] + gb[i])).abs() < 1e-10);
        }

        // central differences of the scalar dot(dl_dy, f(x))
        let h = 1e-5;
        let mut worst = 0.0f64;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let lp: f64 = model
                .forward(&xp)
                .unwrap()
                .iter()
                .zip(&a)
                .map(|(y, g)| y * g)
                .sum();
            let lm: f64 = model
                .forward(&xm)
                .unwrap()
                .iter()
                .zip(&a)
                .map(|(y, g)| y * g)
                .sum();
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max(rel_err(ga[idx], fd));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn grad_input_requires_inference_mode() {
        let mut model = tiny_model(23);
        model.set_mode(Mode::Train);
        let err = model.grad_input(&[0.0, 0.0, 0.0], &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, ModelError::TrainModeInputGradient));
    }

    #[test]
    fn normalized_minibatch_has_zero_mean_unit_variance() {
        let model = PredictiveModel::standard(29);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let batch = 10;
        let x = Array2::from_shape_fn((batch, 61), |_| rng.random_range(-1.0..=1.0));
        let cache = model.forward_cached(&x, Mode::Train);
        for zhat in &cache.zhats {
            let mu = zhat.mean_axis(Axis(0)).unwrap();
            let var = zhat.var_axis(Axis(0), 0.0);
            for m in mu.iter() {
                assert!(m.abs() < 1e-8, "mean {m}");
            }
            for v in var.iter() {
                assert!((v - 1.0).abs() < 1e-6, "var {v}");
            }
        }
    }

    #[test]
    fn training_memorizes_a_single_pair() {
        let mut model = tiny_model(37);
        let pair = TrainingPair {
            x: vec![0.4, -0.1, 0.7],
            y: vec![0.8, -0.3],
        };
        let cfg = TrainConfig {
            epochs: 1500,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let curve = model.train(&[pair.clone()], &[], &cfg).unwrap();
        let final_loss = curve.last().unwrap().train_loss;
        assert!(final_loss < 1e-3, "final train loss {final_loss}");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let layout = tiny_layout();
        let run = || {
            let mut model = PredictiveModel::new(layout, &[6, 6, 6], 41);
            let pairs = random_pairs(&model, 30, 43);
            let cfg = TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            };
            let curve = model
                .train(&pairs[..24], &pairs[24..], &cfg)
                .unwrap();
            (curve, model.flat_params())
        };
        let (c1, p1) = run();
        let (c2, p2) = run();
        assert_eq!(c1, c2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn training_rejects_empty_dataset() {
        let mut model = tiny_model(47);
        let err = model.train(&[], &[], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, ModelError::EmptyDataset));
    }

    #[test]
    fn checkpoint_round_trip_reproduces_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");

        let mut model = PredictiveModel::standard(53);
        let pairs = random_pairs(&model, 12, 59);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        model.train(&pairs, &[], &cfg).unwrap();
        model.save(&path, Some(cfg)).unwrap();

        let loaded = PredictiveModel::load(&path).unwrap();
        let x: Vec<f64> = (0..61).map(|i| 0.02 * i as f64 - 0.5).collect();
        let a = model.forward(&x).unwrap();
        let b = loaded.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_rejects_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = tiny_model(61);
        model.save(&path, None).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replace("\"sizes\":[3,4,4,4,2]", "\"sizes\":[3,4,4,4,5]");
        assert_ne!(text, tampered, "expected the sizes field to be present");
        std::fs::write(&path, tampered).unwrap();
        let err = PredictiveModel::load(&path).unwrap_err();
        assert!(matches!(err, ModelError::Checkpoint(_)), "{err}");
    }

    #[test]
    fn standard_model_has_five_layers_with_documented_sizes() {
        let model = PredictiveModel::standard(2);
        assert_eq!(model.sizes(), &[61, 100, 100, 100, 130]);
        assert_eq!(model.weights.len(), 4);
        assert_eq!(model.norms.len(), 3);
    }
}
