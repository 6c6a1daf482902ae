//! Synthetic regression task and a deep linear network with one LoRA adapter
//! per layer.
//!
//! Each client observes `y = (W* + h · H_i) x + ε` where `W* = W_base + Δ*`,
//! `W_base` is the end-to-end map of the pretrained layers, `H_i` is a
//! client-specific shift with the same Frobenius norm as `Δ*`, and `h` is the
//! heterogeneity knob. With `h = 0` every client samples from the same map.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lora::{init_adapter, LoraLayer};
use crate::seed;

/// Standard deviation of the observation noise `ε`.
pub const NOISE_STD: f64 = 0.01;

/// `‖Δ*‖_F` as a fraction of `‖W_base‖_F`.
pub const TRUTH_SHIFT: f64 = 0.5;

/// Row-aligned inputs (`count × n`) and targets (`count × m`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    targets: Matrix,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::contract(format!(
                "{} inputs but {} targets",
                inputs.rows(),
                targets.rows()
            )));
        }
        if inputs.rows() == 0 {
            return Err(Error::contract("dataset must not be empty"));
        }
        if !inputs.is_finite() || !targets.is_finite() {
            return Err(Error::contract("dataset entries must be finite"));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let gather = |m: &Matrix| {
            let mut data = Vec::with_capacity(indices.len() * m.cols());
            for &i in indices {
                data.extend_from_slice(m.row(i));
            }
            Matrix::new(indices.len(), m.cols(), data)
        };
        Dataset::new(gather(&self.inputs)?, gather(&self.targets)?)
    }
}

/// Shape and randomness of a synthetic federated task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// Output dimension of the end-to-end map.
    pub m: usize,
    /// Input dimension of the end-to-end map.
    pub n: usize,
    /// Number of layers. Hidden layers have width `m`.
    pub depth: usize,
    pub clients: usize,
    pub samples_per_client: usize,
    pub heterogeneity: f64,
    pub seed: u64,
}

impl TaskSpec {
    /// Layer widths `[n, m, ..., m]`, `depth + 1` entries.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.n)
            .chain(std::iter::repeat_n(self.m, self.depth))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.depth == 0 {
            return Err(Error::contract("task dims and depth must be positive"));
        }
        if self.clients == 0 {
            return Err(Error::contract("at least one client is required"));
        }
        if self.samples_per_client == 0 {
            return Err(Error::contract("samples_per_client must be positive"));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::contract(format!(
                "heterogeneity must lie in [0, 1], got {}",
                self.heterogeneity
            )));
        }
        Ok(())
    }
}

/// Generated task: pretrained layer weights, ground truth and client data.
#[derive(Debug, Clone)]
pub struct Task {
    /// `W0` for each layer; layer `l` maps width `l` to width `l + 1`.
    pub pretrained: Vec<Matrix>,
    /// End-to-end map of the pretrained layers.
    pub base_map: Matrix,
    /// Shared target map `W* = W_base + Δ*`.
    pub truth: Matrix,
    /// Map each client actually samples from.
    pub client_maps: Vec<Matrix>,
    pub datasets: Vec<Dataset>,
}

fn rescaled_normal(rows: usize, cols: usize, target_norm: f64, rng: &mut seed::SimRng) -> Matrix {
    let g = Matrix::random_normal(rows, cols, 1.0, rng);
    let norm = g.frobenius_norm();
    if norm == 0.0 {
        g
    } else {
        g.scale(target_norm / norm)
    }
}

pub fn make_task(spec: &TaskSpec) -> Result<Task> {
    spec.validate()?;
    let dims = spec.layer_dims();

    let pretrained: Vec<Matrix> = dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let mut rng = seed::rng(spec.seed, &[seed::PRETRAINED, l as u64]);
            Matrix::random_normal(w[1], w[0], 1.0 / (w[0] as f64).sqrt(), &mut rng)
        })
        .collect();

    let mut base_map = pretrained[0].clone();
    for w in &pretrained[1..] {
        base_map = w.matmul(&base_map)?;
    }

    let mut rng = seed::rng(spec.seed, &[seed::TRUTH]);
    let shift_norm = TRUTH_SHIFT * base_map.frobenius_norm();
    let delta = rescaled_normal(spec.m, spec.n, shift_norm, &mut rng);
    let truth = base_map.add(&delta)?;

    let mut client_maps = Vec::with_capacity(spec.clients);
    let mut datasets = Vec::with_capacity(spec.clients);
    for i in 0..spec.clients {
        let mut rng = seed::rng(spec.seed, &[seed::CLIENT_SHIFT, i as u64]);
        let shift = rescaled_normal(spec.m, spec.n, shift_norm, &mut rng);
        let mut map = truth.clone();
        map.add_scaled_in_place(spec.heterogeneity, &shift)?;

        let mut rng = seed::rng(spec.seed, &[seed::SAMPLES, i as u64]);
        let inputs = Matrix::random_normal(spec.samples_per_client, spec.n, 1.0, &mut rng);
        let noise = Matrix::random_normal(spec.samples_per_client, spec.m, NOISE_STD, &mut rng);
        let targets = inputs.matmul(&map.transpose())?.add(&noise)?;

        datasets.push(Dataset::new(inputs, targets)?);
        client_maps.push(map);
    }

    Ok(Task {
        pretrained,
        base_map,
        truth,
        client_maps,
        datasets,
    })
}

/// Local optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep every `A` fixed and train only `B` (FFA-LoRA).
    pub freeze_a: bool,
}

impl TrainConfig {
    fn validate(&self, data: &Dataset) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::contract("local_epochs must be positive"));
        }
        if self.batch_size == 0 || self.batch_size > data.len() {
            return Err(Error::contract(format!(
                "batch_size {} must lie in 1..={}",
                self.batch_size,
                data.len()
            )));
        }
        Ok(())
    }
}

/// Gradient of the loss with respect to one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub da: Matrix,
    pub db: Matrix,
}

/// Deep linear network `x ↦ W_L' ··· W_1' x` with LoRA-adapted layers and
/// mean-squared-error loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    layers: Vec<LoraLayer>,
}

impl ToyModel {
    pub fn new(layers: Vec<LoraLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("model needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            let (out_prev, _) = pair[0].shape();
            let (_, in_next) = pair[1].shape();
            if out_prev != in_next {
                return Err(Error::contract(format!(
                    "layer {l} outputs {out_prev} values but layer {} expects {in_next}",
                    l + 1
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Fresh adapters of rank `rank` on top of `pretrained`, one seed stream
    /// per layer so that every client built from the same seed is identical.
    pub fn from_pretrained(pretrained: &[Matrix], rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        let layers = pretrained
            .iter()
            .enumerate()
            .map(|(l, w0)| {
                let (m, n) = w0.shape();
                let adapter = init_adapter(m, n, rank, alpha, seed::derive(seed, &[seed::ADAPTER, l as u64]))?;
                LoraLayer::new(w0.clone(), adapter)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LoraLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LoraLayer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].shape().1
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].shape().0
    }

    pub fn effective_weights(&self) -> Vec<Matrix> {
        self.layers.iter().map(LoraLayer::effective_weight).collect()
    }

    /// Applies the network to a single input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                op: "forward",
                left: (self.in_dim(), 1),
                right: (x.len(), 1),
            });
        }
        let batch = Matrix::new(1, x.len(), x.to_vec())?;
        Ok(self.forward_batch(&batch)?.into_data())
    }

    /// Row-wise forward pass over a `batch × n` input block.
    pub fn forward_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut h = inputs.clone();
        for layer in &self.layers {
            h = h.matmul(&layer.effective_weight().transpose())?;
        }
        Ok(h)
    }

    /// Mean over samples and output coordinates of the squared error.
    pub fn loss(&self, data: &Dataset) -> Result<f64> {
        let pred = self.forward_batch(data.inputs())?;
        let diff = pred.sub(data.targets())?;
        Ok(diff.data().iter().map(|e| e * e).sum::<f64>() / diff.data().len() as f64)
    }

    /// Exact loss gradients for every adapter, plus the batch loss.
    ///
    /// With `G = ∂L/∂W'` for a layer, `∂L/∂B = s · G · Aᵀ` and
    /// `∂L/∂A = s · Bᵀ · G`. `W0` gets no gradient.
    pub fn grads(&self, batch: &Dataset) -> Result<(Vec<AdapterGrad>, f64)> {
        let weights = self.effective_weights();
        let mut acts = Vec::with_capacity(weights.len() + 1);
        acts.push(batch.inputs().clone());
        for w in &weights {
            let next = acts[acts.len() - 1].matmul(&w.transpose())?;
            acts.push(next);
        }

        let pred = &acts[acts.len() - 1];
        let diff = pred.sub(batch.targets())?;
        let count = diff.data().len() as f64;
        let loss = diff.data().iter().map(|e| e * e).sum::<f64>() / count;
        let mut delta = diff.scale(2.0 / count);

        let mut out = Vec::with_capacity(weights.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let g = delta.transpose().matmul(&acts[l])?;
            let ad = layer.adapter();
            let s = ad.scaling();
            let db = g.matmul(&ad.a().transpose())?.scale(s);
            let da = ad.b().transpose().matmul(&g)?.scale(s);
            out.push(AdapterGrad { da, db });
            if l > 0 {
                delta = delta.matmul(&weights[l])?;
            }
        }
        out.reverse();
        Ok((out, loss))
    }
}

/// Free-function form of [`ToyModel::forward`].
pub fn forward(model: &ToyModel, x: &[f64]) -> Result<Vec<f64>> {
    model.forward(x)
}

/// Free-function form of [`ToyModel::grads`], dropping the loss.
pub fn grads(model: &ToyModel, batch: &Dataset) -> Result<Vec<AdapterGrad>> {
    Ok(model.grads(batch)?.0)
}

/// Mini-batch SGD on the adapters for `cfg.local_epochs` passes over `data`.
///
/// Each epoch shuffles once with a stream derived from `cfg.seed` and then
/// walks the permutation in fixed strides of `batch_size` (the last batch may
/// be short). Returns the mean batch loss of every epoch. `W0` is never
/// touched.
pub fn local_train(model: &mut ToyModel, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate(data)?;
    if data.inputs().cols() != model.in_dim() || data.targets().cols() != model.out_dim() {
        return Err(Error::DimensionMismatch {
            op: "local_train",
            left: (model.in_dim(), model.out_dim()),
            right: (data.inputs().cols(), data.targets().cols()),
        });
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);
    for epoch in 0..cfg.local_epochs {
        let mut rng = seed::rng(cfg.seed, &[seed::SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);

        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(chunk)?;
            let (grads, loss) = model.grads(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch: epoch + 1, loss });
            }
            total += loss;
            batches += 1;
            if cfg.learning_rate == 0.0 {
                continue;
            }
            for (layer, g) in model.layers.iter_mut().zip(&grads) {
                let (a, b) = layer.adapter_mut().factors_mut();
                b.add_scaled_in_place(-cfg.learning_rate, &g.db)?;
                if !cfg.freeze_a {
                    a.add_scaled_in_place(-cfg.learning_rate, &g.da)?;
                }
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::Training {
                        epoch: epoch + 1,
                        loss: f64::NAN,
                    });
                }
            }
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(epoch_losses)
}
