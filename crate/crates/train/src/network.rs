//! Layer execution: forward pass with on-the-fly binarization, backward pass
//! with straight-through gradients, and an xnor-popcount inference path.
//!
//! Activations are batches in row-major `[n, c, h, w]` (or `[n, f]`) order.
//! Weight layers keep full-precision shadow weights; every forward pass
//! binarizes a copy, never the shadow values.

use hbnn_core::binarize::{hetero_binarize, reconstruct};
use hbnn_core::bitalloc::generate_mask;
use hbnn_core::packed::{pack, xnor_matvec, PackedPlanes};
use hbnn_core::{BitMask, HeterogeneousBinaryTensor, RngStream, Tensor};

use crate::error::{Result, TrainError};
use crate::gemm::gemm;
use crate::spec::{LayerKind, NetworkSpec, QuantSpec};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
pub const SCALING_INIT: f64 = 0.01;

/// Full-precision trainable parameters, one flat array per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowWeights {
    pub tensors: Vec<Vec<f64>>,
}

impl ShadowWeights {
    pub fn zeros_like(&self) -> ShadowWeights {
        ShadowWeights {
            tensors: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }
}

pub type Gradients = ShadowWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm.
    Train,
    /// Running statistics in batch-norm.
    Eval,
}

/// Weight masks per layer, kept between forward passes so refresh policies
/// can reuse them.
#[derive(Debug, Clone, Default)]
pub struct MaskState {
    pub masks: Vec<Option<BitMask>>,
    /// Recompute every weight mask on the next forward pass.
    pub refresh: bool,
}

impl MaskState {
    pub fn new(layers: usize) -> Self {
        Self {
            masks: vec![None; layers],
            refresh: true,
        }
    }
}

/// A batch of activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    /// Per-sample dims.
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn new(n: usize, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let per: usize = dims.iter().product();
        if per * n != data.len() {
            return Err(TrainError::shape(
                "batch",
                format!("{n} samples of {dims:?} need {} values, got {}", per * n, data.len()),
            ));
        }
        Ok(Self { n, dims, data })
    }

    pub fn sample_len(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone)]
struct ConvGeometry {
    in_ch: usize,
    out_ch: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    kernel: usize,
    /// For output position `p` and patch row `r` (`c, ky, kx`), the input
    /// offset within a sample, or `None` for zero padding. Indexed
    /// `p * patch + r`.
    patch_index: Vec<Option<usize>>,
}

impl ConvGeometry {
    fn new(in_ch: usize, out_ch: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if in_h + 2 * padding < kernel || in_w + 2 * padding < kernel || stride == 0 {
            return Err(TrainError::InvalidNetwork(format!(
                "kernel {kernel} stride {stride} does not fit {in_h}x{in_w} input"
            )));
        }
        let out_h = (in_h + 2 * padding - kernel) / stride + 1;
        let out_w = (in_w + 2 * padding - kernel) / stride + 1;
        let patch = in_ch * kernel * kernel;
        let mut patch_index = Vec::with_capacity(out_h * out_w * patch);
        for oy in 0..out_h {
            for ox in 0..out_w {
                for c in 0..in_ch {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < in_h && (ix as usize) < in_w;
                            patch_index.push(inside.then(|| c * in_h * in_w + iy as usize * in_w + ix as usize));
                        }
                    }
                }
            }
        }
        Ok(Self {
            in_ch,
            out_ch,
            in_h,
            in_w,
            out_h,
            out_w,
            kernel,
            patch_index,
        })
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    /// `[patch, n * positions]` column matrix.
    fn im2col(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (p_count, patch, in_len) = (self.positions(), self.patch(), self.in_len());
        let cols_w = n * p_count;
        let mut cols = vec![0.0; patch * cols_w];
        for s in 0..n {
            let xs = &x[s * in_len..(s + 1) * in_len];
            for p in 0..p_count {
                let idx = &self.patch_index[p * patch..(p + 1) * patch];
                for (r, &src) in idx.iter().enumerate() {
                    if let Some(src) = src {
                        cols[r * cols_w + s * p_count + p] = xs[src];
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], n: usize) -> Vec<f64> {
        let (p_count, patch, in_len) = (self.positions(), self.patch(), self.in_len());
        let cols_w = n * p_count;
        let mut dx = vec![0.0; n * in_len];
        for s in 0..n {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            for p in 0..p_count {
                let idx = &self.patch_index[p * patch..(p + 1) * patch];
                for (r, &src) in idx.iter().enumerate() {
                    if let Some(src) = src {
                        dxs[src] += dcols[r * cols_w + s * p_count + p];
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
enum Plan {
    /// Dense convolution; pointwise layers use kernel 1.
    Conv(ConvGeometry),
    /// One `kernel × kernel` filter per channel.
    Depthwise(ConvGeometry),
    Dense { in_f: usize, out_f: usize },
    BatchNorm { channels: usize, spatial: usize },
    Relu,
    GlobalAvgPool { channels: usize, spatial: usize },
    ActivationBinarize,
    Scaling,
    Loss,
}

#[derive(Debug, Clone)]
struct LayerPlan {
    plan: Plan,
    in_dims: Vec<usize>,
    out_dims: Vec<usize>,
    /// Indices into [`ShadowWeights::tensors`].
    slots: Vec<usize>,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Weight {
        /// Pre-binarization input, kept only when the input was binarized.
        input_pre: Option<Vec<f64>>,
        /// im2col matrix (conv), per-channel columns (depthwise) or the
        /// effective input (dense).
        cols: Vec<f64>,
        w_eff: Vec<f64>,
    },
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        positive: Vec<bool>,
    },
    Passthrough,
    ActivationBinarize {
        input_pre: Vec<f64>,
    },
    Scaling {
        input: Vec<f64>,
    },
}

/// Everything `backward` needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n: usize,
    layers: Vec<Option<LayerCache>>,
    /// Per batch-norm layer: batch mean and variance (train mode).
    bn_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.n
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    plans: Vec<LayerPlan>,
    running: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

fn check_finite(data: &[f64], layer: usize, kind: &LayerKind) -> Result<()> {
    if data.iter().any(|x| !x.is_finite()) {
        return Err(TrainError::NumericFailure {
            layer: format!("{layer}:{}", kind.name()),
        });
    }
    Ok(())
}

/// Binarizes each sample of `x` independently.
fn binarize_samples(x: &[f64], n: usize, dims: &[usize], q: &QuantSpec) -> Result<Vec<f64>> {
    let per = x.len() / n;
    let mut out = Vec::with_capacity(x.len());
    for s in 0..n {
        let t = Tensor::new(dims.to_vec(), x[s * per..(s + 1) * per].to_vec())?;
        out.extend(binarize_sample(&t, q)?.reconstruct().into_data());
    }
    Ok(out)
}

fn binarize_sample(t: &Tensor, q: &QuantSpec) -> Result<HeterogeneousBinaryTensor> {
    let mask = generate_mask(t, q.bits, q.heuristic, &q.policy)?;
    Ok(hetero_binarize(t, &mask)?)
}

fn ste_mask_in_place(grad: &mut [f64], pre: &[f64]) {
    for (g, &x) in grad.iter_mut().zip(pre) {
        if x.abs() > 1.0 {
            *g = 0.0;
        }
    }
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut plans = Vec::with_capacity(spec.layers.len());
        let mut dims: Vec<usize> = spec.input.to_vec();
        let mut slot = 0usize;
        let mut running = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let bad = |msg: String| TrainError::InvalidNetwork(format!("layer {i} ({}): {msg}", layer.kind.name()));
            let spatial = |d: &[usize]| -> Result<(usize, usize, usize)> {
                match d {
                    [c, h, w] => Ok((*c, *h, *w)),
                    _ => Err(bad(format!("expects [c, h, w] input, got {d:?}"))),
                }
            };
            let (plan, out_dims, n_slots) = match layer.kind {
                LayerKind::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
                    let (c, h, w) = spatial(&dims)?;
                    if c != in_ch {
                        return Err(bad(format!("expects {in_ch} channels, got {c}")));
                    }
                    let g = ConvGeometry::new(in_ch, out_ch, h, w, kernel, stride, padding)?;
                    let out = vec![out_ch, g.out_h, g.out_w];
                    (Plan::Conv(g), out, 1)
                }
                LayerKind::PointwiseConv2d { in_ch, out_ch } => {
                    let (c, h, w) = spatial(&dims)?;
                    if c != in_ch {
                        return Err(bad(format!("expects {in_ch} channels, got {c}")));
                    }
                    let g = ConvGeometry::new(in_ch, out_ch, h, w, 1, 1, 0)?;
                    (Plan::Conv(g), vec![out_ch, h, w], 1)
                }
                LayerKind::DepthwiseConv2d { channels, kernel, stride, padding } => {
                    let (c, h, w) = spatial(&dims)?;
                    if c != channels {
                        return Err(bad(format!("expects {channels} channels, got {c}")));
                    }
                    // single-channel geometry applied per channel
                    let g = ConvGeometry::new(1, 1, h, w, kernel, stride, padding)?;
                    let out = vec![channels, g.out_h, g.out_w];
                    (Plan::Depthwise(g), out, 1)
                }
                LayerKind::Dense { in_features, out_features } => {
                    let f: usize = dims.iter().product();
                    if f != in_features {
                        return Err(bad(format!("expects {in_features} features, got {f}")));
                    }
                    (Plan::Dense { in_f: in_features, out_f: out_features }, vec![out_features], 1)
                }
                LayerKind::BatchNorm { channels } => {
                    if dims[0] != channels {
                        return Err(bad(format!("expects {channels} channels, got {}", dims[0])));
                    }
                    let spatial: usize = dims[1..].iter().product();
                    (Plan::BatchNorm { channels, spatial }, dims.clone(), 2)
                }
                LayerKind::Relu => (Plan::Relu, dims.clone(), 0),
                LayerKind::GlobalAvgPool => {
                    let (c, h, w) = spatial(&dims)?;
                    (Plan::GlobalAvgPool { channels: c, spatial: h * w }, vec![c], 0)
                }
                LayerKind::ActivationBinarize => (Plan::ActivationBinarize, dims.clone(), 0),
                LayerKind::Scaling => (Plan::Scaling, dims.clone(), 1),
                LayerKind::SoftmaxCrossEntropy => (Plan::Loss, dims.clone(), 0),
            };
            running.push(match plan {
                Plan::BatchNorm { channels, .. } => Some((vec![0.0; channels], vec![1.0; channels])),
                _ => None,
            });
            plans.push(LayerPlan {
                plan,
                in_dims: dims.clone(),
                out_dims: out_dims.clone(),
                slots: (slot..slot + n_slots).collect(),
            });
            slot += n_slots;
            dims = out_dims;
        }
        Ok(Self { spec, plans, running })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn output_dims(&self) -> &[usize] {
        &self.plans.last().expect("validated nonempty").in_dims
    }

    /// Seeded fan-in scaled uniform weights `U(-1/√fan_in, 1/√fan_in)`,
    /// batch-norm `γ = 1, β = 0`, scaling parameter [`SCALING_INIT`].
    pub fn init_weights(&self, seed: u64) -> ShadowWeights {
        let mut rng = RngStream::new(seed);
        let mut tensors = Vec::new();
        for (i, lp) in self.plans.iter().enumerate() {
            match &lp.plan {
                Plan::Conv(_) | Plan::Depthwise(_) | Plan::Dense { .. } => {
                    let count = self.spec.weight_count(i);
                    let fan_in = match &lp.plan {
                        Plan::Conv(g) => g.patch(),
                        Plan::Depthwise(g) => g.kernel * g.kernel,
                        Plan::Dense { in_f, .. } => *in_f,
                        _ => unreachable!(),
                    };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    tensors.push((0..count).map(|_| rng.uniform_range(-bound, bound)).collect());
                }
                Plan::BatchNorm { channels, .. } => {
                    tensors.push(vec![1.0; *channels]);
                    tensors.push(vec![0.0; *channels]);
                }
                Plan::Scaling => tensors.push(vec![SCALING_INIT]),
                _ => {}
            }
        }
        ShadowWeights { tensors }
    }

    /// Binarized weights of layer `layer` under its `weight_quant`, using and
    /// updating the mask cache.
    fn effective_weights(&self, layer: usize, shadow: &ShadowWeights, masks: &mut MaskState) -> Result<Option<HeterogeneousBinaryTensor>> {
        let Some(q) = &self.spec.layers[layer].weight_quant else {
            return Ok(None);
        };
        let w = &shadow.tensors[self.plans[layer].slots[0]];
        let t = Tensor::from_vec(w.clone());
        if masks.masks.len() != self.plans.len() {
            masks.masks = vec![None; self.plans.len()];
        }
        let mask = match (&masks.masks[layer], masks.refresh) {
            (Some(m), false) if m.len() == w.len() => m.clone(),
            _ => {
                let m = generate_mask(&t, q.bits, q.heuristic, &q.policy)?;
                masks.masks[layer] = Some(m.clone());
                m
            }
        };
        Ok(Some(hetero_binarize(&t, &mask)?))
    }

    /// Runs every layer up to (not including) the loss and returns the
    /// logits. In `Mode::Train` batch-norm uses batch statistics, which are
    /// returned in the cache for [`Network::update_running_stats`].
    pub fn forward(&self, shadow: &ShadowWeights, batch: &Batch, masks: &mut MaskState, mode: Mode) -> Result<(Batch, ForwardCache)> {
        self.forward_impl(shadow, batch, masks, mode, false)
    }

    /// Eval-mode forward where every layer that binarizes both its weights
    /// and its input (conv / pointwise / dense) runs on packed planes with
    /// xnor-popcount dot products.
    pub fn forward_packed(&self, shadow: &ShadowWeights, batch: &Batch, masks: &mut MaskState) -> Result<Batch> {
        Ok(self.forward_impl(shadow, batch, masks, Mode::Eval, true)?.0)
    }

    /// Layers that [`Network::forward_packed`] executes with xnor-popcount.
    pub fn packed_layers(&self) -> Vec<usize> {
        (0..self.plans.len())
            .filter(|&i| {
                let l = &self.spec.layers[i];
                l.weight_quant.is_some()
                    && l.input_quant.is_some()
                    && matches!(self.plans[i].plan, Plan::Conv(_) | Plan::Dense { .. })
            })
            .collect()
    }

    fn forward_impl(&self, shadow: &ShadowWeights, batch: &Batch, masks: &mut MaskState, mode: Mode, packed: bool) -> Result<(Batch, ForwardCache)> {
        if batch.dims != self.spec.input {
            return Err(TrainError::shape(
                "forward",
                format!("input dims {:?}, network expects {:?}", batch.dims, self.spec.input),
            ));
        }
        let n = batch.n;
        let packed_layers = if packed { self.packed_layers() } else { Vec::new() };
        let mut x = batch.data.clone();
        let mut caches = Vec::with_capacity(self.plans.len());
        let mut bn_stats = vec![None; self.plans.len()];
        for (i, lp) in self.plans.iter().enumerate() {
            let spec = &self.spec.layers[i];
            let (y, cache) = match &lp.plan {
                Plan::Loss => {
                    caches.push(None);
                    break;
                }
                Plan::Conv(_) | Plan::Depthwise(_) | Plan::Dense { .. } if packed_layers.contains(&i) => {
                    let y = self.packed_weight_layer(i, shadow, &x, n, masks)?;
                    (y, None)
                }
                Plan::Conv(_) | Plan::Depthwise(_) | Plan::Dense { .. } => {
                    let (input_pre, x_eff) = match &spec.input_quant {
                        Some(q) => {
                            let b = binarize_samples(&x, n, &lp.in_dims, q)?;
                            (Some(std::mem::take(&mut x)), b)
                        }
                        None => (None, std::mem::take(&mut x)),
                    };
                    let w_eff = match self.effective_weights(i, shadow, masks)? {
                        Some(h) => reconstruct(&h).into_data(),
                        None => shadow.tensors[lp.slots[0]].clone(),
                    };
                    let (y, cols) = weight_forward(&lp.plan, &x_eff, &w_eff, n);
                    (y, Some(LayerCache::Weight { input_pre, cols, w_eff }))
                }
                Plan::BatchNorm { channels, spatial } => {
                    let gamma = &shadow.tensors[lp.slots[0]];
                    let beta = &shadow.tensors[lp.slots[1]];
                    let (mean, var) = match mode {
                        Mode::Train => {
                            let stats = channel_stats(&x, n, *channels, *spatial);
                            bn_stats[i] = Some(stats.clone());
                            stats
                        }
                        Mode::Eval => self.running[i].clone().expect("batch-norm has running stats"),
                    };
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let mut xhat = x;
                    let mut y = vec![0.0; xhat.len()];
                    for s in 0..n {
                        for c in 0..*channels {
                            let off = (s * channels + c) * spatial;
                            for k in off..off + spatial {
                                xhat[k] = (xhat[k] - mean[c]) * inv_std[c];
                                y[k] = gamma[c] * xhat[k] + beta[c];
                            }
                        }
                    }
                    (y, Some(LayerCache::BatchNorm { xhat, inv_std }))
                }
                Plan::Relu => {
                    let positive: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
                    let y = x.iter().map(|&v| v.max(0.0)).collect();
                    (y, Some(LayerCache::Relu { positive }))
                }
                Plan::GlobalAvgPool { channels, spatial } => {
                    let mut y = vec![0.0; n * channels];
                    for (o, chunk) in y.iter_mut().zip(x.chunks_exact(*spatial)) {
                        *o = chunk.iter().sum::<f64>() / *spatial as f64;
                    }
                    (y, Some(LayerCache::Passthrough))
                }
                Plan::ActivationBinarize => {
                    let q = spec.input_quant.as_ref().expect("validated");
                    let y = binarize_samples(&x, n, &lp.in_dims, q)?;
                    (y, Some(LayerCache::ActivationBinarize { input_pre: std::mem::take(&mut x) }))
                }
                Plan::Scaling => {
                    let s = shadow.tensors[lp.slots[0]][0];
                    let y = x.iter().map(|&v| s * v).collect();
                    (y, Some(LayerCache::Scaling { input: std::mem::take(&mut x) }))
                }
            };
            check_finite(&y, i, &spec.kind)?;
            caches.push(cache);
            x = y;
        }
        masks.refresh = false;
        let logits = Batch::new(n, self.output_dims().to_vec(), x)?;
        Ok((
            logits,
            ForwardCache {
                n,
                layers: caches,
                bn_stats,
            },
        ))
    }

    fn packed_weight_layer(&self, i: usize, shadow: &ShadowWeights, x: &[f64], n: usize, masks: &mut MaskState) -> Result<Vec<f64>> {
        let lp = &self.plans[i];
        let q_in = self.spec.layers[i].input_quant.as_ref().expect("packed layers binarize inputs");
        let weights = self.effective_weights(i, shadow, masks)?.expect("packed layers binarize weights");
        let packed_w = pack(&weights);
        let in_len: usize = lp.in_dims.iter().product();
        let out_len: usize = lp.out_dims.iter().product();
        let mut y = vec![0.0; n * out_len];
        match &lp.plan {
            Plan::Conv(g) => {
                let patch = g.patch();
                let rows: Vec<PackedPlanes> = (0..g.out_ch)
                    .map(|o| packed_w.slice(o * patch, patch))
                    .collect::<hbnn_core::Result<_>>()?;
                let positions = g.positions();
                for s in 0..n {
                    let t = Tensor::new(lp.in_dims.clone(), x[s * in_len..(s + 1) * in_len].to_vec())?;
                    let a = pack(&binarize_sample(&t, q_in)?);
                    for p in 0..positions {
                        let cols = a.gather(&g.patch_index[p * patch..(p + 1) * patch])?;
                        let out = xnor_matvec(&rows, &cols)?;
                        for (o, v) in out.data().iter().enumerate() {
                            y[s * out_len + o * positions + p] = *v;
                        }
                    }
                }
            }
            Plan::Dense { in_f, out_f } => {
                let rows: Vec<PackedPlanes> = (0..*out_f)
                    .map(|o| packed_w.slice(o * in_f, *in_f))
                    .collect::<hbnn_core::Result<_>>()?;
                for s in 0..n {
                    let t = Tensor::new(lp.in_dims.clone(), x[s * in_len..(s + 1) * in_len].to_vec())?;
                    let a = pack(&binarize_sample(&t, q_in)?);
                    let out = xnor_matvec(&rows, &a)?;
                    y[s * out_f..(s + 1) * out_f].copy_from_slice(out.data());
                }
            }
            _ => unreachable!("packed path covers conv and dense layers"),
        }
        Ok(y)
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (run, stats) in self.running.iter_mut().zip(&cache.bn_stats) {
            if let (Some((rm, rv)), Some((bm, bv))) = (run.as_mut(), stats) {
                let m = cache.n as f64;
                for c in 0..rm.len() {
                    rm[c] = (1.0 - BN_MOMENTUM) * rm[c] + BN_MOMENTUM * bm[c];
                    // unbiased batch variance, as in common frameworks
                    let unbiased = if m > 1.0 { bv[c] * m / (m - 1.0) } else { bv[c] };
                    rv[c] = (1.0 - BN_MOMENTUM) * rv[c] + BN_MOMENTUM * unbiased;
                }
            }
        }
    }

    pub fn running_stats(&self) -> &[Option<(Vec<f64>, Vec<f64>)>] {
        &self.running
    }

    /// Gradients of the loss with respect to every shadow parameter, given
    /// `dlogits = ∂loss/∂logits`. Binarization nodes pass gradients
    /// straight through where the pre-binarization value satisfies `|x| ≤ 1`.
    pub fn backward(&self, shadow: &ShadowWeights, cache: &ForwardCache, dlogits: &[f64]) -> Result<Gradients> {
        let n = cache.n;
        let mut grads = shadow.zeros_like();
        let mut g = dlogits.to_vec();
        let last = self.plans.len() - 1;
        for i in (0..last).rev() {
            let lp = &self.plans[i];
            let name = || format!("{i}:{}", self.spec.layers[i].kind.name());
            let c = cache
                .layers
                .get(i)
                .and_then(|c| c.as_ref())
                .ok_or_else(|| TrainError::MissingCache(name()))?;
            g = match (&lp.plan, c) {
                (Plan::Conv(_) | Plan::Depthwise(_) | Plan::Dense { .. }, LayerCache::Weight { input_pre, cols, w_eff }) => {
                    let (mut dx, mut dw) = weight_backward(&lp.plan, &g, cols, w_eff, n);
                    if self.spec.layers[i].weight_quant.is_some() {
                        ste_mask_in_place(&mut dw, &shadow.tensors[lp.slots[0]]);
                    }
                    if let Some(pre) = input_pre {
                        ste_mask_in_place(&mut dx, pre);
                    }
                    grads.tensors[lp.slots[0]] = dw;
                    dx
                }
                (Plan::BatchNorm { channels, spatial }, LayerCache::BatchNorm { xhat, inv_std }) => {
                    let gamma = &shadow.tensors[lp.slots[0]];
                    let m = (n * spatial) as f64;
                    let mut dgamma = vec![0.0; *channels];
                    let mut dbeta = vec![0.0; *channels];
                    for s in 0..n {
                        for ch in 0..*channels {
                            let off = (s * channels + ch) * spatial;
                            for k in off..off + spatial {
                                dgamma[ch] += g[k] * xhat[k];
                                dbeta[ch] += g[k];
                            }
                        }
                    }
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..*channels {
                            let off = (s * channels + ch) * spatial;
                            let scale = gamma[ch] * inv_std[ch] / m;
                            for k in off..off + spatial {
                                dx[k] = scale * (m * g[k] - dbeta[ch] - xhat[k] * dgamma[ch]);
                            }
                        }
                    }
                    grads.tensors[lp.slots[0]] = dgamma;
                    grads.tensors[lp.slots[1]] = dbeta;
                    dx
                }
                (Plan::Relu, LayerCache::Relu { positive }) => g
                    .iter()
                    .zip(positive)
                    .map(|(&d, &p)| if p { d } else { 0.0 })
                    .collect(),
                (Plan::GlobalAvgPool { channels, spatial }, LayerCache::Passthrough) => {
                    let mut dx = vec![0.0; n * channels * spatial];
                    for (chunk, &d) in dx.chunks_exact_mut(*spatial).zip(&g) {
                        chunk.iter_mut().for_each(|v| *v = d / *spatial as f64);
                    }
                    dx
                }
                (Plan::ActivationBinarize, LayerCache::ActivationBinarize { input_pre }) => {
                    let mut dx = g;
                    ste_mask_in_place(&mut dx, input_pre);
                    dx
                }
                (Plan::Scaling, LayerCache::Scaling { input }) => {
                    let s = shadow.tensors[lp.slots[0]][0];
                    grads.tensors[lp.slots[0]] = vec![g.iter().zip(input).map(|(d, x)| d * x).sum()];
                    g.iter().map(|d| d * s).collect()
                }
                _ => return Err(TrainError::MissingCache(name())),
            };
        }
        Ok(grads)
    }
}

fn channel_stats(x: &[f64], n: usize, channels: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * spatial) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for s in 0..n {
        for c in 0..channels {
            let off = (s * channels + c) * spatial;
            mean[c] += x[off..off + spatial].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for s in 0..n {
        for c in 0..channels {
            let off = (s * channels + c) * spatial;
            var[c] += x[off..off + spatial].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

/// Returns `(output, cols)` where `cols` is whatever backward needs.
fn weight_forward(plan: &Plan, x: &[f64], w: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    match plan {
        Plan::Conv(g) => {
            let cols = g.im2col(x, n);
            let np = n * g.positions();
            let mut out = vec![0.0; g.out_ch * np];
            gemm(g.out_ch, g.patch(), np, 1.0, w, false, &cols, false, 0.0, &mut out);
            (channel_major_to_batch(&out, n, g.out_ch, g.positions()), cols)
        }
        Plan::Depthwise(g) => {
            // channels stacked: cols is [channels, kk, n*positions]
            let channels = w.len() / (g.kernel * g.kernel);
            let kk = g.kernel * g.kernel;
            let (in_plane, p) = (g.in_h * g.in_w, g.positions());
            let mut all_cols = Vec::with_capacity(channels * kk * n * p);
            let mut y = vec![0.0; n * channels * p];
            let mut plane = vec![0.0; n * in_plane];
            for c in 0..channels {
                for s in 0..n {
                    let src = (s * channels + c) * in_plane;
                    plane[s * in_plane..(s + 1) * in_plane].copy_from_slice(&x[src..src + in_plane]);
                }
                let cols = g.im2col(&plane, n);
                let mut out = vec![0.0; n * p];
                gemm(1, kk, n * p, 1.0, &w[c * kk..(c + 1) * kk], false, &cols, false, 0.0, &mut out);
                for s in 0..n {
                    y[(s * channels + c) * p..(s * channels + c + 1) * p].copy_from_slice(&out[s * p..(s + 1) * p]);
                }
                all_cols.extend(cols);
            }
            (y, all_cols)
        }
        Plan::Dense { in_f, out_f } => {
            let mut y = vec![0.0; n * out_f];
            gemm(n, *in_f, *out_f, 1.0, x, false, w, true, 0.0, &mut y);
            (y, x.to_vec())
        }
        _ => unreachable!(),
    }
}

/// Returns `(dx, dw)`.
fn weight_backward(plan: &Plan, dy: &[f64], cols: &[f64], w: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    match plan {
        Plan::Conv(g) => {
            let np = n * g.positions();
            let dy_mat = batch_to_channel_major(dy, n, g.out_ch, g.positions());
            let mut dw = vec![0.0; w.len()];
            gemm(g.out_ch, np, g.patch(), 1.0, &dy_mat, false, cols, true, 0.0, &mut dw);
            let mut dcols = vec![0.0; g.patch() * np];
            gemm(g.patch(), g.out_ch, np, 1.0, w, true, &dy_mat, false, 0.0, &mut dcols);
            (g.col2im(&dcols, n), dw)
        }
        Plan::Depthwise(g) => {
            let kk = g.kernel * g.kernel;
            let channels = w.len() / kk;
            let (in_plane, p) = (g.in_h * g.in_w, g.positions());
            let block = kk * n * p;
            let mut dw = vec![0.0; w.len()];
            let mut dx = vec![0.0; n * channels * in_plane];
            let mut dy_c = vec![0.0; n * p];
            for c in 0..channels {
                for s in 0..n {
                    dy_c[s * p..(s + 1) * p].copy_from_slice(&dy[(s * channels + c) * p..(s * channels + c + 1) * p]);
                }
                let cols = &cols[c * block..(c + 1) * block];
                gemm(1, n * p, kk, 1.0, &dy_c, false, cols, true, 0.0, &mut dw[c * kk..(c + 1) * kk]);
                let mut dcols = vec![0.0; block];
                gemm(kk, 1, n * p, 1.0, &w[c * kk..(c + 1) * kk], true, &dy_c, false, 0.0, &mut dcols);
                let dplane = g.col2im(&dcols, n);
                for s in 0..n {
                    let dst = (s * channels + c) * in_plane;
                    dx[dst..dst + in_plane].copy_from_slice(&dplane[s * in_plane..(s + 1) * in_plane]);
                }
            }
            (dx, dw)
        }
        Plan::Dense { in_f, out_f } => {
            let mut dw = vec![0.0; w.len()];
            gemm(*out_f, n, *in_f, 1.0, dy, true, cols, false, 0.0, &mut dw);
            let mut dx = vec![0.0; n * in_f];
            gemm(n, *out_f, *in_f, 1.0, dy, false, w, false, 0.0, &mut dx);
            (dx, dw)
        }
        _ => unreachable!(),
    }
}

/// `[c, n*p]` → `[n, c, p]`.
fn channel_major_to_batch(m: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for ch in 0..c {
        for s in 0..n {
            out[(s * c + ch) * p..(s * c + ch + 1) * p].copy_from_slice(&m[ch * n * p + s * p..ch * n * p + (s + 1) * p]);
        }
    }
    out
}

/// `[n, c, p]` → `[c, n*p]`.
fn batch_to_channel_major(b: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; b.len()];
    for ch in 0..c {
        for s in 0..n {
            out[ch * n * p + s * p..ch * n * p + (s + 1) * p].copy_from_slice(&b[(s * c + ch) * p..(s * c + ch + 1) * p]);
        }
    }
    out
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits.
pub fn softmax_cross_entropy(logits: &Batch, labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    let k = logits.sample_len();
    if labels.len() != logits.n {
        return Err(TrainError::shape("loss", format!("{} labels for {} samples", labels.len(), logits.n)));
    }
    let n = logits.n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.data.len()];
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits.data[s * k..(s + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label as usize];
        for j in 0..k {
            let p = (row[j] - log_z).exp();
            grad[s * k + j] = (p - if j == label as usize { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
