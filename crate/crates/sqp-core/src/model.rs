//! The fixed compact CNN for speech quality prediction: four 3x3 conv
//! layers (1-32-32-32-64 channels, same padding), 2x2 max pooling and
//! dropout after the first three, a global pool, and a 64-64-64-1 dense
//! head producing one scalar quality estimate.
//!
//! The graph exists in a float baseline flavor (ReLU, global max pool) and
//! a binarized flavor (Heaviside step activations in all conv layers,
//! global average pool), plus an optional binary-weight mode for the
//! convolutions. Forward is generic over f32/f64 so oracle tests can run
//! the identical code at higher precision.

pub mod checkpoint;
pub mod lowering;

use crate::error::{Result, SqpError};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub const KERNEL: usize = 3;
pub const CONV_CHANNELS: [(usize, usize); 4] = [(1, 32), (32, 32), (32, 32), (32, 64)];
pub const DENSE_DIMS: [(usize, usize); 3] = [(64, 64), (64, 64), (64, 1)];
pub const DROPOUT_P: f32 = 0.3;
/// Input geometry for 9 s of 16 kHz audio through the 40 ms / 20 ms frontend.
pub const REFERENCE_INPUT_HW: (usize, usize) = (449, 120);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActivationKind {
    ReLU,
    Heaviside,
    /// g(x) = x / (1 + beta*|x|); its exact derivative is the surrogate
    /// used in the Heaviside backward pass, which makes this mode the
    /// finite-difference-checkable twin of the binarized graph.
    RelaxedFastSigmoid(f32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    MaxPool2x2,
    GlobalMax,
    GlobalAvg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Bam,
    BamBinaryWeights,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Bam => "bam",
            Variant::BamBinaryWeights => "bam-binary-weights",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = SqpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "bam" => Ok(Variant::Bam),
            "bam-binary-weights" => Ok(Variant::BamBinaryWeights),
            other => Err(SqpError::InvalidArgument(format!(
                "unknown variant {other:?} (want baseline | bam | bam-binary-weights)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub act: ActivationKind,
    /// 2x2 max pool (floor on odd dims) after the activation.
    pub pool_after: bool,
    /// Inverted dropout applied after the pool, train mode only.
    pub dropout_after: Option<f32>,
    /// Forward uses sign(w) in place of w for this kernel.
    pub binary_weights: bool,
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub variant: Variant,
    pub convs: Vec<ConvSpec>,
    pub final_pool: PoolKind,
    /// (in, out) per dense layer; ReLU after all but the last.
    pub dense: Vec<(usize, usize)>,
}

impl ModelGraph {
    pub fn for_variant(variant: Variant) -> Self {
        let act = match variant {
            Variant::Baseline => ActivationKind::ReLU,
            Variant::Bam | Variant::BamBinaryWeights => ActivationKind::Heaviside,
        };
        let final_pool = match variant {
            Variant::Baseline => PoolKind::GlobalMax,
            Variant::Bam | Variant::BamBinaryWeights => PoolKind::GlobalAvg,
        };
        let binary_weights = variant == Variant::BamBinaryWeights;
        let convs = CONV_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| ConvSpec {
                cin,
                cout,
                act,
                pool_after: i < 3,
                dropout_after: if i < 3 { Some(DROPOUT_P) } else { None },
                binary_weights,
            })
            .collect();
        ModelGraph {
            variant,
            convs,
            final_pool,
            dense: DENSE_DIMS.to_vec(),
        }
    }

    /// Same weights, binarized execution: Heaviside activations in every
    /// conv layer and a global average pool. This is what "post-training
    /// binarization" of a trained baseline means.
    pub fn to_bam(&self) -> Self {
        let mut g = self.clone();
        g.variant = Variant::Bam;
        for c in &mut g.convs {
            c.act = ActivationKind::Heaviside;
        }
        g.final_pool = PoolKind::GlobalAvg;
        g
    }

    /// Swap every Heaviside for its relaxed fast-sigmoid twin.
    pub fn to_relaxed(&self, beta: f32) -> Self {
        let mut g = self.clone();
        for c in &mut g.convs {
            if c.act == ActivationKind::Heaviside {
                c.act = ActivationKind::RelaxedFastSigmoid(beta);
            }
        }
        g
    }
}

/// All trainable parameters. Kernels are [cout, cin, 3, 3], dense weights
/// [out, in], biases flat.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSetT<R> {
    pub conv_kernels: Vec<Tensor<R>>,
    pub conv_biases: Vec<Tensor<R>>,
    pub dense_weights: Vec<Tensor<R>>,
    pub dense_biases: Vec<Tensor<R>>,
}

pub type WeightSet = WeightSetT<f32>;

impl<R: Real> WeightSetT<R> {
    pub fn zeros_like_graph(g: &ModelGraph) -> Self {
        WeightSetT {
            conv_kernels: g
                .convs
                .iter()
                .map(|c| Tensor::from_vec(&[c.cout, c.cin, KERNEL, KERNEL], vec![R::ZERO; c.cout * c.cin * KERNEL * KERNEL]).unwrap())
                .collect(),
            conv_biases: g
                .convs
                .iter()
                .map(|c| Tensor::from_vec(&[c.cout], vec![R::ZERO; c.cout]).unwrap())
                .collect(),
            dense_weights: g
                .dense
                .iter()
                .map(|&(i, o)| Tensor::from_vec(&[o, i], vec![R::ZERO; i * o]).unwrap())
                .collect(),
            dense_biases: g
                .dense
                .iter()
                .map(|&(_, o)| Tensor::from_vec(&[o], vec![R::ZERO; o]).unwrap())
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// (name, tensor) pairs in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<R>)> {
        let mut out = Vec::new();
        for i in 0..self.conv_kernels.len() {
            out.push((format!("conv{}.kernel", i + 1), &self.conv_kernels[i]));
            out.push((format!("conv{}.bias", i + 1), &self.conv_biases[i]));
        }
        for i in 0..self.dense_weights.len() {
            out.push((format!("dense{}.weight", i + 1), &self.dense_weights[i]));
            out.push((format!("dense{}.bias", i + 1), &self.dense_biases[i]));
        }
        out
    }

    /// Mutable (name, tensor) pairs, same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<R>)> {
        let WeightSetT {
            conv_kernels,
            conv_biases,
            dense_weights,
            dense_biases,
        } = self;
        let mut out: Vec<(String, &mut Tensor<R>)> = Vec::new();
        for (i, (k, b)) in conv_kernels.iter_mut().zip(conv_biases.iter_mut()).enumerate() {
            out.push((format!("conv{}.kernel", i + 1), k));
            out.push((format!("conv{}.bias", i + 1), b));
        }
        for (i, (w, b)) in dense_weights
            .iter_mut()
            .zip(dense_biases.iter_mut())
            .enumerate()
        {
            out.push((format!("dense{}.weight", i + 1), w));
            out.push((format!("dense{}.bias", i + 1), b));
        }
        out
    }

    pub fn cast<S: Real>(&self) -> WeightSetT<S> {
        WeightSetT {
            conv_kernels: self.conv_kernels.iter().map(|t| t.cast()).collect(),
            conv_biases: self.conv_biases.iter().map(|t| t.cast()).collect(),
            dense_weights: self.dense_weights.iter().map(|t| t.cast()).collect(),
            dense_biases: self.dense_biases.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Build the graph for a variant and Kaiming-uniform initialized weights
/// (fan-in, zero biases), deterministic under `seed`.
pub fn build_dnsmos(variant: Variant, seed: u64) -> (ModelGraph, WeightSet) {
    let graph = ModelGraph::for_variant(variant);
    let mut weights = WeightSet::zeros_like_graph(&graph);
    let mut rng = Rng::seed_from_u64(seed);
    for (k, c) in weights.conv_kernels.iter_mut().zip(&graph.convs) {
        let fan_in = (c.cin * KERNEL * KERNEL) as f32;
        let bound = (6.0 / fan_in).sqrt();
        for w in k.data_mut() {
            *w = rng.range_f32(-bound, bound);
        }
    }
    for (w, &(fan_in, _)) in weights.dense_weights.iter_mut().zip(&graph.dense) {
        let bound = (6.0 / fan_in as f32).sqrt();
        for v in w.data_mut() {
            *v = rng.range_f32(-bound, bound);
        }
    }
    (graph, weights)
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Heaviside step: 0 for x < 0, 1 for x >= 0 (H(0) = 1).
pub fn heaviside<R: Real>(x: R) -> R {
    if x >= R::ZERO {
        R::ONE
    } else {
        R::ZERO
    }
}

/// Relaxed fast sigmoid g(x) = x / (1 + beta*|x|): odd, strictly increasing,
/// bounded in (-1/beta, 1/beta), with g'(x) = 1/(beta*|x| + 1)^2.
pub fn relaxed_fast_sigmoid<R: Real>(x: R, beta: R) -> R {
    x / (R::ONE + beta * x.abs())
}

fn apply_activation<R: Real>(kind: ActivationKind, data: &mut [R]) {
    match kind {
        ActivationKind::ReLU => {
            for v in data {
                if *v < R::ZERO {
                    *v = R::ZERO;
                }
            }
        }
        ActivationKind::Heaviside => {
            for v in data {
                *v = heaviside(*v);
            }
        }
        ActivationKind::RelaxedFastSigmoid(beta) => {
            let b = R::from_f32(beta);
            for v in data {
                *v = relaxed_fast_sigmoid(*v, b);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Layer kernels (shared with the trainer's backward pass)
// ---------------------------------------------------------------------------

/// 3x3 stride-1 zero-padding-1 convolution, CHW layout.
///
/// Per output pixel the taps accumulate in (cin, dr, dc) order with the
/// bias added last; the packed engine follows the same order so the two
/// paths agree bitwise on binary inputs.
pub fn conv3x3_same<R: Real>(
    input: &[R],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[R],
    bias: &[R],
    cout: usize,
    out: &mut [R],
) {
    assert_eq!(input.len(), cin * h * w);
    assert_eq!(kernel.len(), cout * cin * KERNEL * KERNEL);
    assert_eq!(out.len(), cout * h * w);
    for co in 0..cout {
        let out_plane = &mut out[co * h * w..(co + 1) * h * w];
        out_plane.fill(R::ZERO);
        for ci in 0..cin {
            let in_plane = &input[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * cin + ci) * KERNEL * KERNEL;
            for dr in 0..KERNEL {
                for r in 0..h {
                    let ir = r + dr;
                    if ir < 1 || ir > h {
                        continue;
                    }
                    let in_row = &in_plane[(ir - 1) * w..ir * w];
                    let out_row = &mut out_plane[r * w..(r + 1) * w];
                    for dc in 0..KERNEL {
                        let k = kernel[kbase + dr * KERNEL + dc];
                        match dc {
                            0 => {
                                for (o, &i) in out_row[1..].iter_mut().zip(&in_row[..w - 1]) {
                                    *o += k * i;
                                }
                            }
                            1 => {
                                for (o, &i) in out_row.iter_mut().zip(in_row) {
                                    *o += k * i;
                                }
                            }
                            _ => {
                                for (o, &i) in out_row[..w - 1].iter_mut().zip(&in_row[1..]) {
                                    *o += k * i;
                                }
                            }
                        }
                    }
                }
            }
        }
        let b = bias[co];
        for o in out_plane {
            *o += b;
        }
    }
}

/// 2x2 max pool with floor semantics on odd dims. Returns pooled values and
/// the winning offset (dr*2+dc, first maximum on ties) per output cell.
pub fn maxpool2x2<R: Real>(
    input: &[R],
    h: usize,
    w: usize,
    channels: usize,
) -> (Vec<R>, Vec<u8>, usize, usize) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![R::ZERO; channels * oh * ow];
    let mut arg = vec![0u8; channels * oh * ow];
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for r in 0..oh {
            for col in 0..ow {
                let mut best = plane[2 * r * w + 2 * col];
                let mut best_k = 0u8;
                for k in 1..4u8 {
                    let (dr, dc) = ((k / 2) as usize, (k % 2) as usize);
                    let v = plane[(2 * r + dr) * w + 2 * col + dc];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                out[c * oh * ow + r * ow + col] = best;
                arg[c * oh * ow + r * ow + col] = best_k;
            }
        }
    }
    (out, arg, oh, ow)
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Recycles the megabyte-scale per-sample buffers of the training loop so
/// repeated forward/backward passes stop paying allocator and page-fault
/// costs. Buffers handed out may hold stale data unless taken zeroed.
#[derive(Debug, Default)]
pub struct BufferPool<R> {
    free: Vec<Vec<R>>,
}

impl<R: Real> BufferPool<R> {
    pub fn new() -> Self {
        BufferPool { free: Vec::new() }
    }

    /// A buffer of exactly `n` elements with arbitrary contents.
    pub fn take(&mut self, n: usize) -> Vec<R> {
        let mut v = self.free.pop().unwrap_or_default();
        if v.len() > n {
            v.truncate(n);
        } else {
            v.resize(n, R::ZERO);
        }
        v
    }

    /// A zero-filled buffer of `n` elements.
    pub fn take_zeroed(&mut self, n: usize) -> Vec<R> {
        let mut v = self.take(n);
        v.fill(R::ZERO);
        v
    }

    pub fn put(&mut self, v: Vec<R>) {
        if v.capacity() > 0 {
            self.free.push(v);
        }
    }

    /// Return every float buffer of a spent cache to the pool.
    pub fn recycle(&mut self, cache: ForwardCache<R>) {
        let ForwardCache {
            conv_inputs,
            conv_preacts,
            dropout_masks,
            final_conv_act,
            ..
        } = cache;
        for v in conv_inputs.into_iter().chain(conv_preacts) {
            self.put(v);
        }
        for m in dropout_masks.into_iter().flatten() {
            self.put(m);
        }
        self.put(final_conv_act);
    }
}

/// Everything the backward pass needs, captured layer by layer.
#[derive(Clone, Debug)]
pub struct ForwardCache<R> {
    /// Input to each conv layer (post pool/dropout of the previous one).
    pub conv_inputs: Vec<Vec<R>>,
    pub conv_input_hw: Vec<(usize, usize)>,
    /// Preactivations of each conv layer.
    pub conv_preacts: Vec<Vec<R>>,
    /// Pool winner offsets for conv layers with pool_after.
    pub pool_argmax: Vec<Option<Vec<u8>>>,
    /// Inverted-dropout factors (0 or 1/keep) where dropout applied.
    pub dropout_masks: Vec<Option<Vec<R>>>,
    /// Post-activation map of the last conv layer and its geometry.
    pub final_conv_act: Vec<R>,
    pub final_conv_hw: (usize, usize),
    /// Winner index per channel for the global max pool.
    pub global_argmax: Option<Vec<usize>>,
    /// Pooled 64-vector feeding the dense head.
    pub pooled: Vec<R>,
    pub dense_inputs: Vec<Vec<R>>,
    pub dense_preacts: Vec<Vec<R>>,
    pub prediction: R,
}

/// Convolution kernel selection for the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvImpl {
    /// Per-tap accumulation order shared with the packed engine; the
    /// equivalence surface. Use this wherever results are compared against
    /// the bit-packed pipeline.
    Reference,
    /// im2col + GEMM lowering; much faster, a few ulps different. The
    /// training loop runs on this.
    Lowered,
}

/// Run the network on one spectrogram ([h, w] tensor). Dropout draws from
/// `rng` in train mode; eval mode needs no rng. Uses the reference
/// convolution; see [`forward_with`] for the training-time variant.
pub fn forward<R: Real>(
    graph: &ModelGraph,
    weights: &WeightSetT<R>,
    input: &Tensor<R>,
    mode: Mode,
    rng: Option<&mut Rng>,
) -> Result<(R, ForwardCache<R>)> {
    let (p, cache) = forward_impl(graph, weights, input, mode, rng, ConvImpl::Reference, true)?;
    Ok((p, cache.expect("cache requested")))
}

/// Forward with an explicit convolution implementation.
pub fn forward_with<R: Real>(
    graph: &ModelGraph,
    weights: &WeightSetT<R>,
    input: &Tensor<R>,
    mode: Mode,
    rng: Option<&mut Rng>,
    conv: ConvImpl,
) -> Result<(R, ForwardCache<R>)> {
    let (p, cache) = forward_impl(graph, weights, input, mode, rng, conv, true)?;
    Ok((p, cache.expect("cache requested")))
}

/// Prediction only (no backward cache): the cheap evaluation path.
pub fn predict<R: Real>(
    graph: &ModelGraph,
    weights: &WeightSetT<R>,
    input: &Tensor<R>,
) -> Result<R> {
    forward_impl(graph, weights, input, Mode::Eval, None, ConvImpl::Lowered, false)
        .map(|(p, _)| p)
}

fn forward_impl<R: Real>(
    graph: &ModelGraph,
    weights: &WeightSetT<R>,
    input: &Tensor<R>,
    mode: Mode,
    mut rng: Option<&mut Rng>,
    conv: ConvImpl,
    want_cache: bool,
) -> Result<(R, Option<ForwardCache<R>>)> {
    let (h0, w0) = match *input.shape() {
        [h, w] => (h, w),
        [1, h, w] => (h, w),
        ref s => {
            return Err(SqpError::ShapeMismatch(format!(
                "expected [h, w] input, got {s:?}"
            )))
        }
    };
    input.check_finite("input")?;
    if mode == Mode::Train && rng.is_none() {
        return Err(SqpError::InvalidArgument(
            "train-mode forward needs an rng for dropout".into(),
        ));
    }

    let mut cur: Vec<R> = input.data().to_vec();
    let mut col_scratch: Vec<R> = Vec::new();
    let (mut h, mut w) = (h0, w0);
    let mut cache = want_cache.then(|| ForwardCache {
        conv_inputs: Vec::with_capacity(graph.convs.len()),
        conv_input_hw: Vec::with_capacity(graph.convs.len()),
        conv_preacts: Vec::with_capacity(graph.convs.len()),
        pool_argmax: Vec::with_capacity(graph.convs.len()),
        dropout_masks: Vec::with_capacity(graph.convs.len()),
        final_conv_act: Vec::new(),
        final_conv_hw: (0, 0),
        global_argmax: None,
        pooled: Vec::new(),
        dense_inputs: Vec::new(),
        dense_preacts: Vec::new(),
        prediction: R::ZERO,
    });

    for (i, spec) in graph.convs.iter().enumerate() {
        if h == 0 || w == 0 {
            return Err(SqpError::ShapeMismatch(format!(
                "spatial dims collapsed to {h}x{w} before conv{}",
                i + 1
            )));
        }
        let kernel = effective_kernel(spec, &weights.conv_kernels[i]);
        let mut pre = vec![R::ZERO; spec.cout * h * w];
        match conv {
            ConvImpl::Reference => conv3x3_same(
                &cur,
                h,
                w,
                spec.cin,
                kernel.data(),
                weights.conv_biases[i].data(),
                spec.cout,
                &mut pre,
            ),
            ConvImpl::Lowered => lowering::conv3x3_same_lowered(
                &cur,
                h,
                w,
                spec.cin,
                kernel.data(),
                weights.conv_biases[i].data(),
                spec.cout,
                &mut pre,
                &mut col_scratch,
            ),
        }
        if let Some(c) = cache.as_mut() {
            // `cur` is no longer needed as an input; move it into the cache.
            c.conv_inputs.push(std::mem::take(&mut cur));
            c.conv_input_hw.push((h, w));
            c.conv_preacts.push(pre.clone());
        }

        apply_activation(spec.act, &mut pre);
        let mut act = pre;
        if i == graph.convs.len() - 1 {
            if let Some(c) = cache.as_mut() {
                c.final_conv_act = act.clone();
                c.final_conv_hw = (h, w);
            }
        }

        if spec.pool_after {
            let (pooled, arg, oh, ow) = maxpool2x2(&act, h, w, spec.cout);
            if let Some(c) = cache.as_mut() {
                c.pool_argmax.push(Some(arg));
            }
            act = pooled;
            h = oh;
            w = ow;
        } else if let Some(c) = cache.as_mut() {
            c.pool_argmax.push(None);
        }

        let mut stored_mask = None;
        if mode == Mode::Train {
            if let Some(p) = spec.dropout_after {
                let keep = 1.0 - p as f64;
                let scale = R::from_f64(1.0 / keep);
                let rng = rng.as_deref_mut().expect("checked above");
                let mask: Vec<R> = (0..act.len())
                    .map(|_| if rng.bernoulli(keep) { scale } else { R::ZERO })
                    .collect();
                for (a, &m) in act.iter_mut().zip(&mask) {
                    *a = *a * m;
                }
                stored_mask = Some(mask);
            }
        }
        if let Some(c) = cache.as_mut() {
            c.dropout_masks.push(stored_mask);
        }
        cur = act;
    }

    // Global pool over the final conv output.
    let channels = graph.convs.last().unwrap().cout;
    let area = h * w;
    let mut pooled = vec![R::ZERO; channels];
    match graph.final_pool {
        PoolKind::GlobalMax => {
            let mut argmax = vec![0usize; channels];
            for c in 0..channels {
                let plane = &cur[c * area..(c + 1) * area];
                let (mut bi, mut bv) = (0usize, plane[0]);
                for (j, &v) in plane.iter().enumerate().skip(1) {
                    if v > bv {
                        bv = v;
                        bi = j;
                    }
                }
                pooled[c] = bv;
                argmax[c] = bi;
            }
            if let Some(c) = cache.as_mut() {
                c.global_argmax = Some(argmax);
            }
        }
        PoolKind::GlobalAvg => {
            let denom = R::from_usize(area);
            for c in 0..channels {
                let mut acc = R::ZERO;
                for &v in &cur[c * area..(c + 1) * area] {
                    acc += v;
                }
                pooled[c] = acc / denom;
            }
        }
        PoolKind::MaxPool2x2 => {
            return Err(SqpError::InvalidArgument(
                "final pool must be global".into(),
            ))
        }
    }
    if let Some(c) = cache.as_mut() {
        c.pooled = pooled.clone();
    }

    // Dense head: ReLU after all but the last layer.
    let mut vec_in = pooled;
    for (li, &(din, dout)) in graph.dense.iter().enumerate() {
        debug_assert_eq!(vec_in.len(), din);
        let wmat = weights.dense_weights[li].data();
        let bias = weights.dense_biases[li].data();
        let mut pre = vec![R::ZERO; dout];
        for (o, p) in pre.iter_mut().enumerate() {
            let row = &wmat[o * din..(o + 1) * din];
            let mut acc = R::ZERO;
            for (&wv, &xv) in row.iter().zip(&vec_in) {
                acc += wv * xv;
            }
            *p = acc + bias[o];
        }
        if let Some(c) = cache.as_mut() {
            c.dense_inputs.push(std::mem::take(&mut vec_in));
            c.dense_preacts.push(pre.clone());
        }
        if li + 1 < graph.dense.len() {
            apply_activation(ActivationKind::ReLU, &mut pre);
        }
        vec_in = pre;
    }
    let prediction = vec_in[0];
    if let Some(c) = cache.as_mut() {
        c.prediction = prediction;
    }
    Ok((prediction, cache))
}

/// Kernel actually used in forward: sign(w) when the layer runs in
/// binary-weight mode, the float kernel otherwise.
pub fn effective_kernel<R: Real>(spec: &ConvSpec, kernel: &Tensor<R>) -> Tensor<R> {
    if spec.binary_weights {
        kernel.map(|w| if w >= R::ZERO { R::ONE } else { -R::ONE })
    } else {
        kernel.clone()
    }
}

// ---------------------------------------------------------------------------
// Architecture accounting
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCount {
    pub name: String,
    pub output_shape: (usize, usize, usize),
    pub params: u64,
    pub macs: u64,
    pub activations: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchCounts {
    pub input_hw: (usize, usize),
    pub rows: Vec<LayerCount>,
    pub total_params: u64,
    pub total_macs: u64,
    pub total_activations: u64,
}

/// Per-layer parameter / multiply-add / activation counts.
///
/// Multiply-add counts follow the torchinfo convention: every output
/// element of a layer costs one op per parameter that feeds it, bias
/// included, so a conv layer counts out_elems*(k*k*cin + 1) and a dense
/// layer out*(in + 1).
pub fn count_table1(graph: &ModelGraph, input_hw: (usize, usize)) -> ArchCounts {
    let (mut h, mut w) = input_hw;
    let mut rows = Vec::new();
    for (i, c) in graph.convs.iter().enumerate() {
        let out_elems = (h * w * c.cout) as u64;
        rows.push(LayerCount {
            name: format!("Conv2D-{} (3x3)", i + 1),
            output_shape: (h, w, c.cout),
            params: (KERNEL * KERNEL * c.cin * c.cout + c.cout) as u64,
            macs: out_elems * (KERNEL * KERNEL * c.cin + 1) as u64,
            activations: out_elems,
        });
        if c.pool_after {
            h /= 2;
            w /= 2;
        }
    }
    for (i, &(din, dout)) in graph.dense.iter().enumerate() {
        rows.push(LayerCount {
            name: format!("Dense-{}", i + 1),
            output_shape: (1, 1, dout),
            params: (din * dout + dout) as u64,
            macs: (dout * (din + 1)) as u64,
            activations: dout as u64,
        });
    }
    ArchCounts {
        input_hw,
        total_params: rows.iter().map(|r| r.params).sum(),
        total_macs: rows.iter().map(|r| r.macs).sum(),
        total_activations: rows.iter().map(|r| r.activations).sum(),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorF32;

    #[test]
    fn table1_counts_exact() {
        let g = ModelGraph::for_variant(Variant::Baseline);
        let t = count_table1(&g, REFERENCE_INPUT_HW);
        let params: Vec<u64> = t.rows.iter().map(|r| r.params).collect();
        assert_eq!(params, vec![320, 9_248, 9_248, 18_496, 4_160, 4_160, 65]);
        let macs: Vec<u64> = t.rows.iter().map(|r| r.macs).collect();
        assert_eq!(
            macs,
            vec![17_241_600, 124_293_120, 31_073_280, 15_536_640, 4_160, 4_160, 65]
        );
        let acts: Vec<u64> = t.rows.iter().map(|r| r.activations).collect();
        assert_eq!(
            acts,
            vec![1_724_160, 430_080, 107_520, 53_760, 64, 64, 1]
        );
        assert_eq!(t.total_params, 45_697);
        assert_eq!(t.total_macs, 188_153_025);
        assert_eq!(t.total_activations, 2_315_649);
        assert_eq!(t.rows[3].output_shape, (56, 15, 64));
        assert_eq!(t.rows[0].output_shape, (449, 120, 32));
        assert_eq!(t.rows[1].output_shape, (224, 60, 32));
        assert_eq!(t.rows[2].output_shape, (112, 30, 32));
    }

    #[test]
    fn param_count_matches_weight_set() {
        let (g, w) = build_dnsmos(Variant::Bam, 0);
        assert_eq!(w.param_count() as u64, count_table1(&g, REFERENCE_INPUT_HW).total_params);
        assert_eq!(w.param_count(), 45_697);
    }

    #[test]
    fn activation_values() {
        assert_eq!(heaviside(0.0f32), 1.0);
        assert_eq!(heaviside(-0.5f32), 0.0);
        assert_eq!(heaviside(3.0f32), 1.0);
        let g1 = relaxed_fast_sigmoid(1.0f64, 5.0);
        assert!((g1 - 1.0 / 6.0).abs() < 1e-12);
        // odd and bounded
        for &x in &[-10.0f64, -0.3, 0.0, 0.7, 25.0] {
            let g = relaxed_fast_sigmoid(x, 5.0);
            assert!((g + relaxed_fast_sigmoid(-x, 5.0)).abs() < 1e-15);
            assert!(g.abs() < 1.0);
            // sign agreement with heaviside
            assert_eq!(heaviside(x) == 1.0, g >= 0.0);
        }
    }

    #[test]
    fn zero_weights_zero_input_predicts_zero() {
        let g = ModelGraph::for_variant(Variant::Baseline);
        let w = WeightSet::zeros_like_graph(&g);
        let x = TensorF32::zeros(&[16, 20]);
        let (pred, _) = forward(&g, &w, &x, Mode::Eval, None).unwrap();
        assert_eq!(pred, 0.0);
    }

    #[test]
    fn nan_input_rejected() {
        let g = ModelGraph::for_variant(Variant::Baseline);
        let w = WeightSet::zeros_like_graph(&g);
        let mut x = TensorF32::zeros(&[16, 20]);
        x.data_mut()[5] = f32::NAN;
        assert!(forward(&g, &w, &x, Mode::Eval, None).is_err());
    }

    #[test]
    fn bam_conv_activations_binary() {
        let (g, w) = build_dnsmos(Variant::Bam, 3);
        let mut rng = Rng::seed_from_u64(4);
        let x = TensorF32::from_vec(
            &[24, 20],
            (0..24 * 20).map(|_| rng.range_f32(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let (_, cache) = forward(&g, &w, &x, Mode::Eval, None).unwrap();
        for (spec, pre) in g.convs.iter().zip(&cache.conv_preacts) {
            assert_eq!(spec.act, ActivationKind::Heaviside);
            for &p in pre {
                let a = heaviside(p);
                assert!(a == 0.0 || a == 1.0);
            }
        }
        // final conv post-activation map really is {0,1}
        assert!(cache.final_conv_act.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn maxpool_on_binary_equals_or_exhaustive() {
        for pattern in 0..16u32 {
            let vals: Vec<f32> = (0..4).map(|b| ((pattern >> b) & 1) as f32).collect();
            let (pooled, _, oh, ow) = maxpool2x2(&vals, 2, 2, 1);
            assert_eq!((oh, ow), (1, 1));
            let or = vals.iter().any(|&v| v == 1.0);
            assert_eq!(pooled[0] == 1.0, or, "pattern {pattern:04b}");
        }
    }

    #[test]
    fn maxpool_floors_odd_dims() {
        let input = vec![1.0f32; 5 * 7];
        let (_, _, oh, ow) = maxpool2x2(&input, 5, 7, 1);
        assert_eq!((oh, ow), (2, 3));
    }

    #[test]
    fn forward_matches_naive_nested_loops() {
        // Independent oracle: direct per-pixel triple loop conv, naive pools.
        fn naive_conv(
            x: &[f32],
            h: usize,
            w: usize,
            cin: usize,
            k: &[f32],
            b: &[f32],
            cout: usize,
        ) -> Vec<f32> {
            let mut out = vec![0.0f64; cout * h * w];
            for co in 0..cout {
                for r in 0..h {
                    for c in 0..w {
                        let mut acc = 0.0f64;
                        for ci in 0..cin {
                            for dr in 0..3usize {
                                for dc in 0..3usize {
                                    let rr = r as isize + dr as isize - 1;
                                    let cc = c as isize + dc as isize - 1;
                                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                        continue;
                                    }
                                    let xv = x[ci * h * w + rr as usize * w + cc as usize];
                                    let kv = k[((co * cin + ci) * 3 + dr) * 3 + dc];
                                    acc += (xv * kv) as f64;
                                }
                            }
                        }
                        out[co * h * w + r * w + c] = acc + b[co] as f64;
                    }
                }
            }
            out.into_iter().map(|v| v as f32).collect()
        }

        let (g, w) = build_dnsmos(Variant::Baseline, 9);
        let mut rng = Rng::seed_from_u64(10);
        let (h, wd) = (16, 20);
        let x: Vec<f32> = (0..h * wd).map(|_| rng.range_f32(-1.0, 1.0)).collect();

        // Naive full forward.
        let mut cur = x.clone();
        let (mut ch, mut cw) = (h, wd);
        for (i, spec) in g.convs.iter().enumerate() {
            let mut pre = naive_conv(
                &cur,
                ch,
                cw,
                spec.cin,
                w.conv_kernels[i].data(),
                w.conv_biases[i].data(),
                spec.cout,
            );
            for v in &mut pre {
                *v = v.max(0.0);
            }
            if spec.pool_after {
                let oh = ch / 2;
                let ow = cw / 2;
                let mut pooled = vec![0.0f32; spec.cout * oh * ow];
                for c in 0..spec.cout {
                    for r in 0..oh {
                        for cc in 0..ow {
                            let mut m = f32::NEG_INFINITY;
                            for dr in 0..2 {
                                for dc in 0..2 {
                                    m = m.max(pre[c * ch * cw + (2 * r + dr) * cw + 2 * cc + dc]);
                                }
                            }
                            pooled[c * oh * ow + r * ow + cc] = m;
                        }
                    }
                }
                cur = pooled;
                ch = oh;
                cw = ow;
            } else {
                cur = pre;
            }
        }
        let channels = g.convs.last().unwrap().cout;
        let area = ch * cw;
        let mut pooled = vec![0.0f32; channels];
        for c in 0..channels {
            pooled[c] = cur[c * area..(c + 1) * area]
                .iter()
                .fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        }
        let mut vecin = pooled;
        for (li, &(din, dout)) in g.dense.iter().enumerate() {
            let mut out = vec![0.0f32; dout];
            for o in 0..dout {
                let mut acc = 0.0f64;
                for i in 0..din {
                    acc += (w.dense_weights[li].data()[o * din + i] * vecin[i]) as f64;
                }
                out[o] = acc as f32 + w.dense_biases[li].data()[o];
            }
            if li + 1 < g.dense.len() {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            vecin = out;
        }
        let naive_pred = vecin[0];

        let xt = TensorF32::from_vec(&[h, wd], x).unwrap();
        let (pred, _) = forward(&g, &w, &xt, Mode::Eval, None).unwrap();
        assert!(
            (pred - naive_pred).abs() <= 1e-5,
            "forward {pred} vs naive {naive_pred}"
        );
    }

    #[test]
    fn channel_permutation_equivariance() {
        // Permuting conv4 output channels together with dense-1 input
        // columns must not change the prediction (global pool is
        // channel-wise).
        let (g, mut w) = build_dnsmos(Variant::Baseline, 21);
        let mut rng = Rng::seed_from_u64(22);
        let x = TensorF32::from_vec(
            &[16, 20],
            (0..16 * 20).map(|_| rng.range_f32(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let (before, _) = forward(&g, &w, &x, Mode::Eval, None).unwrap();

        let cout = g.convs[3].cout;
        let cin = g.convs[3].cin;
        let mut perm: Vec<usize> = (0..cout).collect();
        rng.shuffle(&mut perm);
        let k_old = w.conv_kernels[3].clone();
        let b_old = w.conv_biases[3].clone();
        let d_old = w.dense_weights[0].clone();
        for (new_c, &old_c) in perm.iter().enumerate() {
            let ksz = cin * 9;
            w.conv_kernels[3].data_mut()[new_c * ksz..(new_c + 1) * ksz]
                .copy_from_slice(&k_old.data()[old_c * ksz..(old_c + 1) * ksz]);
            w.conv_biases[3].data_mut()[new_c] = b_old.data()[old_c];
            let din = g.dense[0].0;
            for o in 0..g.dense[0].1 {
                w.dense_weights[0].data_mut()[o * din + new_c] = d_old.data()[o * din + old_c];
            }
        }
        let (after, _) = forward(&g, &w, &x, Mode::Eval, None).unwrap();
        assert!((before - after).abs() < 1e-5, "{before} vs {after}");
    }

    #[test]
    fn binary_weight_mode_uses_sign_kernel() {
        let (g, w) = build_dnsmos(Variant::BamBinaryWeights, 1);
        let eff = effective_kernel(&g.convs[0], &w.conv_kernels[0]);
        assert!(eff.data().iter().all(|&v| v == 1.0 || v == -1.0));
        // H(0) convention carries over: sign(0) = +1
        let z = TensorF32::zeros(&[2, 1, 3, 3]);
        let spec = &g.convs[0];
        let eff0 = effective_kernel(spec, &z);
        assert!(eff0.data().iter().all(|&v| v == 1.0));
    }
}
