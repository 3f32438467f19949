//! Training loop, evaluation and accuracy sweeps.

use std::time::Instant;

use hbnn_core::{DistPolicy, RngStream, SortHeuristic};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Result, TrainError};
use crate::network::{argmax, softmax_cross_entropy, Batch, MaskState, Mode, Network, ShadowWeights};
use crate::optim::{sgd_step, MaskRefresh, TrainConfig};
use crate::spec::{NetworkSpec, QuantSpec};

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub network: Network,
    pub weights: ShadowWeights,
    pub masks: MaskState,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn images_batch(images: &[f32], dims: [usize; 3], idx: &[usize]) -> Result<Batch> {
    let per: usize = dims.iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend(images[i * per..(i + 1) * per].iter().map(|&v| v as f64));
    }
    Batch::new(idx.len(), dims.to_vec(), data)
}

/// Trains `spec` from a seeded initialization. `on_batch` receives
/// `(epoch, batch_index, loss)` after each step.
pub fn train(
    spec: NetworkSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_batch: impl FnMut(usize, usize, f64),
) -> Result<TrainedModel> {
    if data.train_len() == 0 {
        return Err(TrainError::Dataset("empty training split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::InvalidNetwork("batch_size must be positive".into()));
    }
    let mut network = Network::new(spec)?;
    let root = RngStream::new(cfg.seed);
    let mut weights = network.init_weights(root.fork(1).next_u64());
    let mut velocity = weights.zeros_like();
    let mut masks = MaskState::new(network.spec().layers.len());
    let mut shuffle = root.fork(2);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let steps_per_epoch = data.train_len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step_cfg = cfg.clone();
    for epoch in 0..cfg.epochs {
        let order = shuffle.permutation(data.train_len());
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            masks.refresh = match cfg.mask_refresh {
                MaskRefresh::EveryForward => true,
                MaskRefresh::EveryEpoch => b == 0,
                MaskRefresh::FrozenAfterEpoch(k) => epoch <= k,
            };
            let batch = images_batch(&data.train_images, data.dims, idx)?;
            let labels: Vec<u8> = idx.iter().map(|&i| data.train_labels[i]).collect();
            let (logits, cache) = network.forward(&weights, &batch, &mut masks, Mode::Train)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            let grads = network.backward(&weights, &cache, &dlogits)?;
            network.update_running_stats(&cache);
            step_cfg.learning_rate = cfg.lr_at(epoch * steps_per_epoch + b, total_steps);
            sgd_step(&mut weights, &grads, &step_cfg, &mut velocity)?;
            on_batch(epoch, b, loss);
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(TrainedModel {
        network,
        weights,
        masks,
        epoch_losses,
    })
}

const EVAL_BATCH: usize = 250;

/// Top-1 accuracy in percent on the test split (eval-mode batch-norm).
/// Weight masks are recomputed from the final shadow weights unless the
/// schedule froze them.
pub fn evaluate(model: &TrainedModel, data: &Dataset, cfg: &TrainConfig, packed: bool) -> Result<f64> {
    if data.test_len() == 0 {
        return Err(TrainError::Dataset("empty test split".into()));
    }
    let mut masks = model.masks.clone();
    masks.refresh = !matches!(cfg.mask_refresh, MaskRefresh::FrozenAfterEpoch(_));
    let all: Vec<usize> = (0..data.test_len()).collect();
    let mut correct = 0usize;
    for idx in all.chunks(EVAL_BATCH) {
        let batch = images_batch(&data.test_images, data.dims, idx)?;
        let logits = if packed {
            model.network.forward_packed(&model.weights, &batch, &mut masks)?
        } else {
            model.network.forward(&model.weights, &batch, &mut masks, Mode::Eval)?.0
        };
        let k = logits.sample_len();
        for (s, &i) in idx.iter().enumerate() {
            if argmax(&logits.data[s * k..(s + 1) * k]) == data.test_labels[i] as usize {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / data.test_len() as f64)
}

/// Largest absolute difference between packed xnor-popcount logits and
/// dense logits over the first `n` test samples.
pub fn packed_divergence(model: &TrainedModel, data: &Dataset, n: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..n.min(data.test_len())).collect();
    let batch = images_batch(&data.test_images, data.dims, &idx)?;
    let mut masks = model.masks.clone();
    masks.refresh = true;
    let dense = model.network.forward(&model.weights, &batch, &mut masks, Mode::Eval)?.0;
    let packed = model.network.forward_packed(&model.weights, &batch, &mut masks)?;
    Ok(dense
        .data
        .iter()
        .zip(&packed.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Binarization applied at one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub enum Precision {
    Full,
    /// Per-value heterogeneous masks at the given average bitwidth.
    Hetero { bits: f64, heuristic: SortHeuristic, policy: DistPolicy },
    /// Homogeneous bitwidth per weight layer.
    LayerMix(Vec<u8>),
}

impl Precision {
    pub fn hetero(bits: f64) -> Self {
        Precision::Hetero {
            bits,
            heuristic: SortHeuristic::MiddleOut,
            policy: DistPolicy::Adjacent,
        }
    }

    pub fn quant(&self) -> Option<QuantSpec> {
        match self {
            Precision::Hetero { bits, heuristic, policy } => Some(
                QuantSpec::new(*bits)
                    .with_heuristic(*heuristic)
                    .with_policy(policy.clone()),
            ),
            _ => None,
        }
    }

    /// Average bits, `None` for full precision.
    pub fn bits(&self) -> Option<f64> {
        match self {
            Precision::Full => None,
            Precision::Hetero { bits, .. } => Some(*bits),
            Precision::LayerMix(b) => Some(b.iter().map(|&x| x as f64).sum::<f64>() / b.len() as f64),
        }
    }

    pub fn heuristic_label(&self) -> String {
        match self {
            Precision::Hetero { heuristic, .. } => heuristic.to_string(),
            Precision::Full => "-".into(),
            Precision::LayerMix(_) => "layer".into(),
        }
    }

    pub fn distribution_label(&self) -> String {
        match self {
            Precision::Full => "full".into(),
            Precision::Hetero { bits, policy, .. } => hbnn_core::bitalloc::dist_from_avg(*bits, policy)
                .map(|d| d.label())
                .unwrap_or_else(|_| policy.to_string()),
            Precision::LayerMix(b) => b.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub id: String,
    /// Input (activation) binarization.
    pub inputs: Precision,
    pub weights: Precision,
}

impl SweepPoint {
    pub fn weights_only(id: impl Into<String>, weights: Precision) -> Self {
        Self {
            id: id.into(),
            inputs: Precision::Full,
            weights,
        }
    }

    /// Network for this point built from a template. Layer-level mixes
    /// apply to weights only.
    pub fn apply(&self, template: &NetworkSpec) -> Result<NetworkSpec> {
        let spec = template.clone().quantized(self.inputs.quant(), self.weights.quant());
        match &self.weights {
            Precision::LayerMix(bits) => spec.with_layer_bits(bits),
            _ => Ok(spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub point_id: String,
    /// `"full"` or the average input bitwidth.
    pub m_bits: String,
    pub n_bits: String,
    pub heuristic: String,
    pub distribution: String,
    pub seed: u64,
    pub top1: f64,
    pub wall_seconds: f64,
}

fn bits_label(p: &Precision) -> String {
    p.bits().map_or_else(|| "full".into(), |b| format!("{b}"))
}

/// Trains one model per (point, seed) and reports test accuracy.
/// `on_done` sees each row and its trained model (for checkpoints).
pub fn run_sweep(
    data: &Dataset,
    template: &NetworkSpec,
    points: &[SweepPoint],
    seeds: &[u64],
    cfg: &TrainConfig,
    mut on_done: impl FnMut(&SweepRow, &TrainedModel),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(points.len() * seeds.len());
    for point in points {
        let spec = point.apply(template)?;
        for &seed in seeds {
            let start = Instant::now();
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            let model = train(spec.clone(), data, &run_cfg, |_, _, _| {})?;
            let top1 = evaluate(&model, data, &run_cfg, false)?;
            let row = SweepRow {
                point_id: point.id.clone(),
                m_bits: bits_label(&point.inputs),
                n_bits: bits_label(&point.weights),
                heuristic: point.weights.heuristic_label(),
                distribution: point.weights.distribution_label(),
                seed,
                top1,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            on_done(&row, &model);
            rows.push(row);
        }
    }
    Ok(rows)
}
