//! Classifier stack: an optional front layer over each data element, a
//! residual 1d-CNN over the retention-time axis, global average pooling and a
//! dense multi-label head, with hand-written reverse mode for every layer.
//!
//! Activations inside the CNN are `batch × channels × T`; the front layer
//! sees `batch × T × F` and its output feature axis becomes the channel axis.

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::bpl::{bpl_backward_bases, bpl_forward, BasisSet, ProjectionOutput};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor3;

/// Scales every element (last axis) to unit 2-norm; zero elements stay zero.
pub fn unit_vectorize(x: &Tensor3) -> Tensor3 {
    let mut out = x.clone();
    let [b, t, _] = x.shape();
    for bi in 0..b {
        for ti in 0..t {
            let lane = out.lane_mut(bi, ti);
            let norm = dot(lane, lane).sqrt();
            if norm > 0.0 {
                lane.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    out
}

/// Fully-connected layer `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    /// PyTorch-style uniform init in `±1/√in` for weights and bias.
    pub fn uniform(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mut rng = seeded(seed);
        let w = (0..in_dim * out_dim).map(|_| dist.sample(&mut rng)).collect();
        let bias = (0..out_dim).map(|_| dist.sample(&mut rng)).collect();
        Dense {
            weight: Matrix::from_vec(out_dim, in_dim, w).expect("sized"),
            bias,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (j, (o, b)) in out.iter_mut().zip(&self.bias).enumerate() {
            *o = b + dot(self.weight.row(j), x);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1dLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    /// `out × in × kernel`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1dLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel size must be odd, got {kernel_size}"
            )));
        }
        if weights.len() != out_channels * in_channels * kernel_size || bias.len() != out_channels
        {
            return Err(Error::shape("convolution parameter sizes do not match"));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("convolution parameters must be finite"));
        }
        Ok(Conv1dLayer {
            in_channels,
            out_channels,
            kernel_size,
            weights,
            bias,
        })
    }

    /// Normal init with standard deviation `gain · √(2 / (in · kernel))`, zero bias.
    pub fn he_normal(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        gain: f64,
        seed: u64,
    ) -> Result<Self> {
        let std = gain * (2.0 / (in_channels * kernel_size) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = seeded(seed);
        let weights = (0..out_channels * in_channels * kernel_size)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Conv1dLayer::new(
            in_channels,
            out_channels,
            kernel_size,
            weights,
            vec![0.0; out_channels],
        )
    }

    fn weight(&self, o: usize, i: usize, k: usize) -> f64 {
        self.weights[(o * self.in_channels + i) * self.kernel_size + k]
    }

    /// One sample: `x` is `in × T`, `out` is `out × T`.
    fn forward_item(&self, x: &[f64], out: &mut [f64], t_len: usize) {
        let pad = (self.kernel_size / 2) as isize;
        for o in 0..self.out_channels {
            let out_row = &mut out[o * t_len..(o + 1) * t_len];
            out_row.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let x_row = &x[i * t_len..(i + 1) * t_len];
                for k in 0..self.kernel_size {
                    let w = self.weight(o, i, k);
                    if w == 0.0 {
                        continue;
                    }
                    let shift = k as isize - pad;
                    let (dst, src) = shifted(out_row, x_row, shift);
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
    }

    /// Accumulates input, weight and bias gradients for one sample.
    fn backward_item(
        &self,
        x: &[f64],
        grad_out: &[f64],
        t_len: usize,
        grad_x: Option<&mut [f64]>,
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) {
        let pad = (self.kernel_size / 2) as isize;
        for o in 0..self.out_channels {
            let g_row = &grad_out[o * t_len..(o + 1) * t_len];
            grad_b[o] += g_row.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let x_row = &x[i * t_len..(i + 1) * t_len];
                for k in 0..self.kernel_size {
                    let shift = k as isize - pad;
                    let (g, xs) = shifted_ref(g_row, x_row, shift);
                    grad_w[(o * self.in_channels + i) * self.kernel_size + k] += dot(g, xs);
                }
            }
        }
        if let Some(grad_x) = grad_x {
            for o in 0..self.out_channels {
                let g_row = &grad_out[o * t_len..(o + 1) * t_len];
                for i in 0..self.in_channels {
                    let gx_row = &mut grad_x[i * t_len..(i + 1) * t_len];
                    for k in 0..self.kernel_size {
                        let w = self.weight(o, i, k);
                        if w == 0.0 {
                            continue;
                        }
                        let shift = k as isize - pad;
                        // out[t] reads x[t + shift], so x[s] feeds out[s - shift]
                        let (dst, src) = shifted(gx_row, g_row, -shift);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += w * s;
                        }
                    }
                }
            }
        }
    }
}

/// Aligns `dst[t]` with `src[t + shift]` over the valid range.
fn shifted<'a, 'b>(dst: &'a mut [f64], src: &'b [f64], shift: isize) -> (&'a mut [f64], &'b [f64]) {
    let n = dst.len();
    let s = shift.unsigned_abs().min(n);
    if shift >= 0 {
        (&mut dst[..n - s], &src[s..])
    } else {
        (&mut dst[s..], &src[..n - s])
    }
}

fn shifted_ref<'a, 'b>(a: &'a [f64], b: &'b [f64], shift: isize) -> (&'a [f64], &'b [f64]) {
    let n = a.len();
    let s = shift.unsigned_abs().min(n);
    if shift >= 0 {
        (&a[..n - s], &b[s..])
    } else {
        (&a[s..], &b[..n - s])
    }
}

/// Same-length 1-d cross-correlation with zero padding, plus bias.
pub fn conv1d_forward(x: &Tensor3, layer: &Conv1dLayer) -> Result<Tensor3> {
    let [batch, c_in, t_len] = x.shape();
    if c_in != layer.in_channels {
        return Err(Error::shape(format!(
            "convolution expects {} input channels, got {c_in}",
            layer.in_channels
        )));
    }
    if t_len == 0 {
        return Err(Error::invalid("convolution needs T ≥ 1"));
    }
    let mut out = Tensor3::zeros([batch, layer.out_channels, t_len]);
    for b in 0..batch {
        layer.forward_item(x.item(b), out.item_mut(b), t_len);
    }
    Ok(out)
}

/// `relu(conv2(relu(conv1(h))) + h)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv1: Conv1dLayer,
    pub conv2: Conv1dLayer,
}

impl ResidualBlock {
    pub fn new(conv1: Conv1dLayer, conv2: Conv1dLayer) -> Result<Self> {
        let c = conv1.in_channels;
        if conv1.out_channels != c || conv2.in_channels != c || conv2.out_channels != c {
            return Err(Error::shape(
                "residual block convolutions must keep the channel count",
            ));
        }
        Ok(ResidualBlock { conv1, conv2 })
    }

    pub fn forward(&self, h: &Tensor3) -> Result<Tensor3> {
        let mut a = conv1d_forward(h, &self.conv1)?;
        relu_in_place(a.as_mut_slice());
        let mut out = conv1d_forward(&a, &self.conv2)?;
        for (o, x) in out.as_mut_slice().iter_mut().zip(h.as_slice()) {
            *o = (*o + x).max(0.0);
        }
        Ok(out)
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontLayer {
    Identity,
    UnitVectorization,
    FullyConnected(Dense),
    Bpl(BasisSet),
}

impl FrontLayer {
    pub fn kind(&self) -> &'static str {
        match self {
            FrontLayer::Identity => "identity",
            FrontLayer::UnitVectorization => "unit_vectorization",
            FrontLayer::FullyConnected(_) => "fully_connected",
            FrontLayer::Bpl(_) => "bpl",
        }
    }

    pub fn input_dim(&self, f: usize) -> usize {
        match self {
            FrontLayer::FullyConnected(d) => d.in_dim(),
            FrontLayer::Bpl(b) => b.element_dim(),
            _ => f,
        }
    }

    pub fn output_dim(&self, f: usize) -> usize {
        match self {
            FrontLayer::FullyConnected(d) => d.out_dim(),
            FrontLayer::Bpl(b) => b.n_bases(),
            _ => f,
        }
    }

    /// Applies the front layer to a `batch × T × F` input.
    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        Ok(self.forward_cached(x)?.0)
    }

    fn forward_cached(&self, x: &Tensor3) -> Result<(Tensor3, FrontCache)> {
        let [b, t, f] = x.shape();
        match self {
            FrontLayer::Identity => Ok((x.clone(), FrontCache::None)),
            FrontLayer::UnitVectorization => Ok((unit_vectorize(x), FrontCache::None)),
            FrontLayer::FullyConnected(dense) => {
                if f != dense.in_dim() {
                    return Err(Error::shape(format!(
                        "fully-connected front expects F = {}, got {f}",
                        dense.in_dim()
                    )));
                }
                let mut out = Tensor3::zeros([b, t, dense.out_dim()]);
                for bi in 0..b {
                    for ti in 0..t {
                        dense.apply(x.lane(bi, ti), out.lane_mut(bi, ti));
                    }
                }
                Ok((out, FrontCache::Input(x.clone())))
            }
            FrontLayer::Bpl(bases) => {
                let proj = bpl_forward(x, bases)?;
                Ok((proj.coefficients.clone(), FrontCache::Projection(Box::new(proj))))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub blocks: usize,
    pub kernel_size: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            blocks: 8,
            kernel_size: 3,
            n_classes: 12,
        }
    }
}

impl ModelConfig {
    /// Stem plus two convolutions per residual block.
    pub fn conv_layer_count(&self) -> usize {
        1 + 2 * self.blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.blocks == 0 || self.n_classes == 0 {
            return Err(Error::invalid(
                "channels, blocks and n_classes must all be positive",
            ));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum FrontCache {
    None,
    Input(Tensor3),
    Projection(Box<ProjectionOutput>),
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Tensor3,
    hidden: Tensor3,
    output: Tensor3,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    front: FrontCache,
    stem_input: Tensor3,
    stem_output: Tensor3,
    blocks: Vec<BlockCache>,
    pooled: Matrix,
}

/// Per-parameter gradients in the order of [`ClassifierModel::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<(String, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }
}

/// Mean sigmoid binary cross-entropy and its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad_logits: Matrix,
}

impl LossValue {
    pub fn scaled(&self, factor: f64) -> LossValue {
        let mut grad = self.grad_logits.clone();
        grad.as_mut_slice().iter_mut().for_each(|g| *g *= factor);
        LossValue {
            value: self.value * factor,
            grad_logits: grad,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn bce_loss(logits: &Matrix, labels: &Matrix) -> Result<LossValue> {
    if logits.rows() != labels.rows() || logits.cols() != labels.cols() {
        return Err(Error::shape(format!(
            "logits {}x{} vs labels {}x{}",
            logits.rows(),
            logits.cols(),
            labels.rows(),
            labels.cols()
        )));
    }
    if let Some(bad) = labels.as_slice().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid(format!("labels must be 0 or 1, got {bad}")));
    }
    let count = logits.as_slice().len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for ((z, y), g) in logits
        .as_slice()
        .iter()
        .zip(labels.as_slice())
        .zip(grad.as_mut_slice())
    {
        value += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        *g = (sigmoid(*z) - y) / count;
    }
    Ok(LossValue {
        value: value / count,
        grad_logits: grad,
    })
}

/// Front layer, stem convolution, residual blocks, average pooling and a
/// dense head producing one logit per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub front: FrontLayer,
    pub stem: Conv1dLayer,
    pub blocks: Vec<ResidualBlock>,
    pub head: Dense,
    #[serde(skip)]
    cache: Option<Box<ForwardCache>>,
}

impl PartialEq for ClassifierModel {
    /// Compares configuration and parameters; cached activations are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.input_dim == other.input_dim
            && self.front == other.front
            && self.stem == other.stem
            && self.blocks == other.blocks
            && self.head == other.head
    }
}

impl ClassifierModel {
    /// Randomly initialized CNN behind the given front layer.
    ///
    /// Second convolutions of each block are scaled down by `1/√blocks` so the
    /// residual stream does not blow up without normalization layers.
    pub fn new(config: ModelConfig, input_dim: usize, front: FrontLayer, seed: u64) -> Result<Self> {
        config.validate()?;
        if front.input_dim(input_dim) != input_dim {
            return Err(Error::shape(format!(
                "front layer expects F = {}, model input is {input_dim}",
                front.input_dim(input_dim)
            )));
        }
        let c = config.channels;
        let k = config.kernel_size;
        let stem = Conv1dLayer::he_normal(front.output_dim(input_dim), c, k, 1.0, derive_seed(seed, 1))?;
        let residual_gain = 1.0 / (config.blocks as f64).sqrt();
        let blocks = (0..config.blocks)
            .map(|i| {
                let s = derive_seed(seed, 100 + i as u64);
                ResidualBlock::new(
                    Conv1dLayer::he_normal(c, c, k, 1.0, derive_seed(s, 1))?,
                    Conv1dLayer::he_normal(c, c, k, residual_gain, derive_seed(s, 2))?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let normal = Normal::new(0.0, (1.0 / c as f64).sqrt()).expect("positive std");
        let mut rng = seeded(derive_seed(seed, 2));
        let head_w = (0..config.n_classes * c).map(|_| normal.sample(&mut rng)).collect();
        let head = Dense {
            weight: Matrix::from_vec(config.n_classes, c, head_w)?,
            bias: vec![0.0; config.n_classes],
        };
        let model = ClassifierModel {
            config,
            input_dim,
            front,
            stem,
            blocks,
            head,
            cache: None,
        };
        assert_eq!(
            model.conv_layer_count(),
            config.conv_layer_count(),
            "model must have one stem and two convolutions per block"
        );
        Ok(model)
    }

    pub fn conv_layer_count(&self) -> usize {
        1 + 2 * self.blocks.len()
    }

    pub fn n_classes(&self) -> usize {
        self.head.out_dim()
    }

    /// Inference-only forward pass, `batch × T × F → batch × classes`.
    pub fn forward(&self, x: &Tensor3) -> Result<Matrix> {
        Ok(self.run(x, false)?.0)
    }

    /// Forward pass that keeps the activations for [`ClassifierModel::backward`].
    pub fn forward_train(&mut self, x: &Tensor3) -> Result<Matrix> {
        let (logits, cache) = self.run(x, true)?;
        self.cache = cache.map(Box::new);
        Ok(logits)
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        let [_, t, f] = x.shape();
        if f != self.input_dim {
            return Err(Error::shape(format!(
                "model expects element dimension {}, got {f}",
                self.input_dim
            )));
        }
        if t == 0 {
            return Err(Error::invalid("input needs T ≥ 1"));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor3, keep: bool) -> Result<(Matrix, Option<ForwardCache>)> {
        self.check_input(x)?;
        let [batch, t_len, _] = x.shape();
        let (front_out, front_cache) = self.front.forward_cached(x)?;
        let stem_input = front_out.transpose_inner();
        let mut h = conv1d_forward(&stem_input, &self.stem)?;
        relu_in_place(h.as_mut_slice());
        let stem_output = h.clone();

        let mut block_caches = Vec::with_capacity(if keep { self.blocks.len() } else { 0 });
        for block in &self.blocks {
            let mut hidden = conv1d_forward(&h, &block.conv1)?;
            relu_in_place(hidden.as_mut_slice());
            let mut out = conv1d_forward(&hidden, &block.conv2)?;
            for (o, x) in out.as_mut_slice().iter_mut().zip(h.as_slice()) {
                *o = (*o + x).max(0.0);
            }
            if keep {
                block_caches.push(BlockCache {
                    input: std::mem::replace(&mut h, out.clone()),
                    hidden,
                    output: out,
                });
            } else {
                h = out;
            }
        }

        let c = self.config.channels;
        let mut pooled = Matrix::zeros(batch, c);
        for b in 0..batch {
            for ch in 0..c {
                pooled[(b, ch)] = h.lane(b, ch).iter().sum::<f64>() / t_len as f64;
            }
        }
        let mut logits = Matrix::zeros(batch, self.n_classes());
        for b in 0..batch {
            self.head.apply(pooled.row(b), logits.row_mut(b));
        }
        if logits.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite logits".into()));
        }

        let cache = keep.then(|| ForwardCache {
            front: front_cache,
            stem_input,
            stem_output,
            blocks: block_caches,
            pooled,
        });
        Ok((logits, cache))
    }

    /// Reverse pass for the most recent [`ClassifierModel::forward_train`].
    pub fn backward(&mut self, loss: &LossValue) -> Result<Gradients> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a cached forward pass".into()))?;
        let g_logits = &loss.grad_logits;
        let batch = cache.pooled.rows();
        if g_logits.rows() != batch || g_logits.cols() != self.n_classes() {
            return Err(Error::shape("loss gradient does not match the cached batch"));
        }
        let c = self.config.channels;
        let t_len = cache.stem_output.shape()[2];

        // head
        let mut g_head_w = Matrix::zeros(self.n_classes(), c);
        let mut g_head_b = vec![0.0; self.n_classes()];
        let mut g_pooled = Matrix::zeros(batch, c);
        for b in 0..batch {
            for (j, &g) in g_logits.row(b).iter().enumerate() {
                g_head_b[j] += g;
                for (gw, p) in g_head_w.row_mut(j).iter_mut().zip(cache.pooled.row(b)) {
                    *gw += g * p;
                }
                for (gp, w) in g_pooled.row_mut(b).iter_mut().zip(self.head.weight.row(j)) {
                    *gp += g * w;
                }
            }
        }

        // average pool
        let mut g_h = Tensor3::zeros([batch, c, t_len]);
        for b in 0..batch {
            for ch in 0..c {
                let g = g_pooled[(b, ch)] / t_len as f64;
                g_h.lane_mut(b, ch).fill(g);
            }
        }

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut g_sum = g_h;
            for (g, o) in g_sum.as_mut_slice().iter_mut().zip(bc.output.as_slice()) {
                if *o <= 0.0 {
                    *g = 0.0;
                }
            }
            let mut g_w2 = vec![0.0; block.conv2.weights.len()];
            let mut g_b2 = vec![0.0; c];
            let mut g_hidden = Tensor3::zeros(bc.hidden.shape());
            for b in 0..batch {
                block.conv2.backward_item(
                    bc.hidden.item(b),
                    g_sum.item(b),
                    t_len,
                    Some(g_hidden.item_mut(b)),
                    &mut g_w2,
                    &mut g_b2,
                );
            }
            for (g, a) in g_hidden.as_mut_slice().iter_mut().zip(bc.hidden.as_slice()) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            let mut g_w1 = vec![0.0; block.conv1.weights.len()];
            let mut g_b1 = vec![0.0; c];
            // skip connection carries g_sum straight through
            let mut g_in = g_sum.clone();
            for b in 0..batch {
                block.conv1.backward_item(
                    bc.input.item(b),
                    g_hidden.item(b),
                    t_len,
                    Some(g_in.item_mut(b)),
                    &mut g_w1,
                    &mut g_b1,
                );
            }
            block_grads.push([g_w1, g_b1, g_w2, g_b2]);
            g_h = g_in;
        }
        block_grads.reverse();

        // stem
        for (g, o) in g_h.as_mut_slice().iter_mut().zip(cache.stem_output.as_slice()) {
            if *o <= 0.0 {
                *g = 0.0;
            }
        }
        let mut g_stem_w = vec![0.0; self.stem.weights.len()];
        let mut g_stem_b = vec![0.0; c];
        let needs_input_grad = matches!(
            self.front,
            FrontLayer::FullyConnected(_) | FrontLayer::Bpl(_)
        );
        let mut g_front_out = Tensor3::zeros(cache.stem_input.shape());
        for b in 0..batch {
            self.stem.backward_item(
                cache.stem_input.item(b),
                g_h.item(b),
                t_len,
                needs_input_grad.then(|| g_front_out.item_mut(b)),
                &mut g_stem_w,
                &mut g_stem_b,
            );
        }

        let mut grads = Vec::new();
        match (&self.front, &cache.front) {
            (FrontLayer::FullyConnected(dense), FrontCache::Input(x)) => {
                let g = g_front_out.transpose_inner();
                let [b_n, t_n, _] = g.shape();
                let mut g_w = Matrix::zeros(dense.out_dim(), dense.in_dim());
                let mut g_b = vec![0.0; dense.out_dim()];
                for b in 0..b_n {
                    for t in 0..t_n {
                        let xe = x.lane(b, t);
                        for (j, &gj) in g.lane(b, t).iter().enumerate() {
                            g_b[j] += gj;
                            if gj == 0.0 {
                                continue;
                            }
                            for (o, xi) in g_w.row_mut(j).iter_mut().zip(xe) {
                                *o += gj * xi;
                            }
                        }
                    }
                }
                grads.push(("front.weight".to_string(), g_w.into_vec()));
                grads.push(("front.bias".to_string(), g_b));
            }
            (FrontLayer::Bpl(_), FrontCache::Projection(proj)) => {
                let g = g_front_out.transpose_inner();
                let g_b = bpl_backward_bases(&g, proj)?;
                grads.push(("front.bases".to_string(), g_b.into_vec()));
            }
            (FrontLayer::Identity | FrontLayer::UnitVectorization, _) => {}
            _ => return Err(Error::State("front cache does not match front layer".into())),
        }
        grads.push(("stem.weight".to_string(), g_stem_w));
        grads.push(("stem.bias".to_string(), g_stem_b));
        for (i, [w1, b1, w2, b2]) in block_grads.into_iter().enumerate() {
            grads.push((format!("blocks.{i}.conv1.weight"), w1));
            grads.push((format!("blocks.{i}.conv1.bias"), b1));
            grads.push((format!("blocks.{i}.conv2.weight"), w2));
            grads.push((format!("blocks.{i}.conv2.bias"), b2));
        }
        grads.push(("head.weight".to_string(), g_head_w.into_vec()));
        grads.push(("head.bias".to_string(), g_head_b));
        Ok(Gradients { blocks: grads })
    }

    /// Named parameter blocks in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        match &self.front {
            FrontLayer::FullyConnected(d) => {
                out.push(("front.weight".into(), d.weight.as_slice()));
                out.push(("front.bias".into(), &d.bias));
            }
            FrontLayer::Bpl(b) => out.push(("front.bases".into(), b.bases().as_slice())),
            _ => {}
        }
        out.push(("stem.weight".into(), &self.stem.weights));
        out.push(("stem.bias".into(), &self.stem.bias));
        for (i, block) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.conv1.weight"), &block.conv1.weights));
            out.push((format!("blocks.{i}.conv1.bias"), &block.conv1.bias));
            out.push((format!("blocks.{i}.conv2.weight"), &block.conv2.weights));
            out.push((format!("blocks.{i}.conv2.bias"), &block.conv2.bias));
        }
        out.push(("head.weight".into(), self.head.weight.as_slice()));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.cache = None;
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        match &mut self.front {
            FrontLayer::FullyConnected(d) => {
                out.push(("front.weight".into(), d.weight.as_mut_slice()));
                out.push(("front.bias".into(), &mut d.bias));
            }
            FrontLayer::Bpl(b) => out.push(("front.bases".into(), b.bases_mut().as_mut_slice())),
            _ => {}
        }
        out.push(("stem.weight".into(), &mut self.stem.weights));
        out.push(("stem.bias".into(), &mut self.stem.bias));
        for (i, block) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.conv1.weight"), &mut block.conv1.weights));
            out.push((format!("blocks.{i}.conv1.bias"), &mut block.conv1.bias));
            out.push((format!("blocks.{i}.conv2.weight"), &mut block.conv2.weights));
            out.push((format!("blocks.{i}.conv2.bias"), &mut block.conv2.bias));
        }
        out.push(("head.weight".into(), self.head.weight.as_mut_slice()));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.len()).sum()
    }
}
