//! Training: manual backpropagation through the fixed graph, surrogate
//! gradients for the Heaviside activations, straight-through binary
//! weights, Adam, a reduce-on-plateau learning rate schedule, and early
//! stopping.

use crate::error::{Result, SqpError};
use crate::model::{
    effective_kernel, forward_with, lowering, ActivationKind, ConvImpl, ForwardCache, Mode,
    ModelGraph, PoolKind, WeightSetT,
};
use crate::par::{ordered_map, Parallelism};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Real, TensorF32};

/// Hyperparameters. Defaults are the published recipe: batch 128,
/// lr 1e-3, up to 400 epochs, Adam(0.9, 0.999, 1e-8), lr x0.9 after 5
/// stagnant epochs, stop after 25 stagnant epochs, surrogate beta 5.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub max_epochs: usize,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub plateau_patience: usize,
    pub plateau_factor: f32,
    pub early_stop_patience: usize,
    pub surrogate_beta: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 1e-3,
            max_epochs: 400,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            plateau_patience: 5,
            plateau_factor: 0.9,
            early_stop_patience: 25,
            surrogate_beta: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(SqpError::InvalidArgument(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.surrogate_beta > 0.0) {
            return Err(SqpError::InvalidArgument(
                "lr and surrogate beta must be positive".into(),
            ));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(SqpError::InvalidArgument(
                "plateau_factor must be in (0, 1)".into(),
            ));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(SqpError::InvalidArgument(
                "patience values must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SurrogateSpec {
    pub beta: f32,
}

/// Surrogate derivative for the Heaviside step: 1 / (beta*|x| + 1)^2.
/// Equals the exact derivative of the relaxed fast sigmoid, so the same
/// backward pass serves both activation modes.
pub fn superspike_deriv<R: Real>(x: R, beta: R) -> R {
    let d = beta * x.abs() + R::ONE;
    R::ONE / (d * d)
}

/// Mean squared error.
pub fn mse_loss(preds: &[f32], targets: &[f32]) -> Result<f32> {
    if preds.is_empty() {
        return Err(SqpError::EmptyInput("mse over an empty batch".into()));
    }
    if preds.len() != targets.len() {
        return Err(SqpError::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let sum: f64 = preds
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let d = (p - t) as f64;
            d * d
        })
        .sum();
    Ok((sum / preds.len() as f64) as f32)
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

fn activation_deriv<R: Real>(kind: ActivationKind, pre: R, surrogate_beta: R) -> R {
    match kind {
        ActivationKind::ReLU => {
            if pre > R::ZERO {
                R::ONE
            } else {
                R::ZERO
            }
        }
        // Drop-in surrogate at the cached preactivation.
        ActivationKind::Heaviside => superspike_deriv(pre, surrogate_beta),
        ActivationKind::RelaxedFastSigmoid(beta) => superspike_deriv(pre, R::from_f32(beta)),
    }
}

/// Weight and bias gradients of the 3x3 same-pad convolution, via the same
/// im2col lowering as the forward pass:
/// d_kernel[cout x cin*9] += d_pre[cout x hw] * col(input)^T.
fn conv3x3_backward_weights<R: Real>(
    col: &[R],
    hw: usize,
    cin: usize,
    d_pre: &[R],
    cout: usize,
    d_kernel: &mut [R],
    d_bias: &mut [R],
) {
    let k = cin * lowering::TAPS;
    R::gemm(
        cout, hw, k,
        R::ONE,
        d_pre, hw as isize, 1,
        col, 1, hw as isize, // col transposed by swapping strides
        R::ONE,
        d_kernel, k as isize, 1,
    );
    for co in 0..cout {
        let mut db = R::ZERO;
        for &g in &d_pre[co * hw..(co + 1) * hw] {
            db += g;
        }
        d_bias[co] += db;
    }
}

/// Input gradient of the 3x3 same-pad convolution:
/// d_col[cin*9 x hw] = kernel^T * d_pre, scattered back with col2im.
fn conv3x3_backward_input<R: Real>(
    d_pre: &[R],
    h: usize,
    w: usize,
    cout: usize,
    kernel: &[R],
    cin: usize,
    d_input: &mut [R],
    d_col: &mut Vec<R>,
) {
    debug_assert_eq!(d_input.len(), cin * h * w);
    let hw = h * w;
    let k = cin * lowering::TAPS;
    let d_col = lowering::scratch(d_col, k * hw);
    R::gemm(
        k, cout, hw,
        R::ONE,
        kernel, 1, k as isize, // kernel transposed
        d_pre, hw as isize, 1,
        R::ZERO,
        d_col, hw as isize, 1,
    );
    for v in d_input.iter_mut() {
        *v = R::ZERO;
    }
    lowering::col2im_add(d_col, h, w, cin, d_input);
}

/// Backpropagate `d_pred` through the cached forward pass, accumulating
/// parameter gradients into `grads` (same layout as the weights).
///
/// Heaviside layers use the surrogate derivative at the cached
/// preactivation. Layers in binary-weight mode propagate through the sign
/// kernel and apply the straight-through estimator to the latent weights:
/// the pass-through gradient is clipped to zero outside |w| <= 1.
pub fn backward<R: Real>(
    graph: &ModelGraph,
    weights: &WeightSetT<R>,
    cache: &ForwardCache<R>,
    d_pred: R,
    surrogate: SurrogateSpec,
    grads: &mut WeightSetT<R>,
) -> Result<()> {
    let n_conv = graph.convs.len();
    if cache.conv_preacts.len() != n_conv
        || cache.dense_preacts.len() != graph.dense.len()
        || grads.conv_kernels.len() != n_conv
    {
        return Err(SqpError::ShapeMismatch(
            "cache does not match graph/gradient layout".into(),
        ));
    }
    let sbeta = R::from_f32(surrogate.beta);

    // Dense head.
    let mut upstream: Vec<R> = vec![d_pred];
    for li in (0..graph.dense.len()).rev() {
        let (din, dout) = graph.dense[li];
        let pre = &cache.dense_preacts[li];
        let x = &cache.dense_inputs[li];
        let mut d_pre = vec![R::ZERO; dout];
        let last = li + 1 == graph.dense.len();
        for o in 0..dout {
            let g = upstream[o];
            d_pre[o] = if last {
                g
            } else if pre[o] > R::ZERO {
                g
            } else {
                R::ZERO
            };
        }
        let wmat = weights.dense_weights[li].data();
        let gw = grads.dense_weights[li].data_mut();
        for o in 0..dout {
            let g = d_pre[o];
            for i in 0..din {
                gw[o * din + i] += g * x[i];
            }
            grads.dense_biases[li].data_mut()[o] += g;
        }
        let mut d_x = vec![R::ZERO; din];
        for o in 0..dout {
            let g = d_pre[o];
            let row = &wmat[o * din..(o + 1) * din];
            for (dx, &wv) in d_x.iter_mut().zip(row) {
                *dx += g * wv;
            }
        }
        upstream = d_x;
    }

    // Global pool.
    let (fh, fw) = cache.final_conv_hw;
    let area = fh * fw;
    let channels = graph.convs[n_conv - 1].cout;
    let mut d_act = vec![R::ZERO; channels * area];
    match graph.final_pool {
        PoolKind::GlobalMax => {
            let argmax = cache
                .global_argmax
                .as_ref()
                .ok_or_else(|| SqpError::ShapeMismatch("cache lacks global argmax".into()))?;
            for c in 0..channels {
                d_act[c * area + argmax[c]] += upstream[c];
            }
        }
        PoolKind::GlobalAvg => {
            let denom = R::from_usize(area);
            for c in 0..channels {
                let g = upstream[c] / denom;
                for v in &mut d_act[c * area..(c + 1) * area] {
                    *v += g;
                }
            }
        }
        PoolKind::MaxPool2x2 => {
            return Err(SqpError::InvalidArgument("final pool must be global".into()))
        }
    }

    // Conv stack, last to first. `d_act` holds the gradient wrt the
    // post-activation map of layer i (pre-pool).
    let mut col_scratch: Vec<R> = Vec::new();
    let mut d_col_scratch: Vec<R> = Vec::new();
    for i in (0..n_conv).rev() {
        let spec = &graph.convs[i];
        let (h, w) = cache.conv_input_hw[i];
        let pre = &cache.conv_preacts[i];

        let mut d_pre = d_act;
        for (g, &p) in d_pre.iter_mut().zip(pre) {
            *g = *g * activation_deriv(spec.act, p, sbeta);
        }

        // Recreate the lowered input patches for the weight gradient.
        let hw = h * w;
        let col = lowering::scratch(&mut col_scratch, spec.cin * lowering::TAPS * hw);
        lowering::im2col(&cache.conv_inputs[i], h, w, spec.cin, col);

        // Weight gradients (wrt the effective kernel first).
        if spec.binary_weights {
            let mut d_eff = vec![R::ZERO; weights.conv_kernels[i].len()];
            let mut d_bias_tmp = vec![R::ZERO; spec.cout];
            conv3x3_backward_weights(
                col,
                hw,
                spec.cin,
                &d_pre,
                spec.cout,
                &mut d_eff,
                &mut d_bias_tmp,
            );
            // Straight-through with |w| <= 1 clip.
            let latent = weights.conv_kernels[i].data();
            let gk = grads.conv_kernels[i].data_mut();
            for ((g, &d), &wv) in gk.iter_mut().zip(&d_eff).zip(latent) {
                if wv.abs() <= R::ONE {
                    *g += d;
                }
            }
            for (g, &d) in grads.conv_biases[i].data_mut().iter_mut().zip(&d_bias_tmp) {
                *g += d;
            }
        } else {
            conv3x3_backward_weights(
                col,
                hw,
                spec.cin,
                &d_pre,
                spec.cout,
                grads.conv_kernels[i].data_mut(),
                grads.conv_biases[i].data_mut(),
            );
        }

        if i == 0 {
            break;
        }

        // Input gradient, through the effective kernel.
        let kernel = effective_kernel(spec, &weights.conv_kernels[i]);
        let mut d_input = vec![R::ZERO; spec.cin * h * w];
        conv3x3_backward_input(
            &d_pre,
            h,
            w,
            spec.cout,
            kernel.data(),
            spec.cin,
            &mut d_input,
            &mut d_col_scratch,
        );

        // Undo the previous layer's dropout and pool to get the gradient
        // wrt its post-activation map.
        let prev = &graph.convs[i - 1];
        let mut g = d_input;
        if let Some(mask) = &cache.dropout_masks[i - 1] {
            for (v, &m) in g.iter_mut().zip(mask) {
                *v = *v * m;
            }
        }
        if prev.pool_after {
            let (ph, pw) = (h, w);
            let (uh, uw) = cache.conv_input_hw[i - 1];
            debug_assert_eq!((uh / 2, uw / 2), (ph, pw));
            let arg = cache.pool_argmax[i - 1]
                .as_ref()
                .ok_or_else(|| SqpError::ShapeMismatch("cache lacks pool argmax".into()))?;
            let mut up = vec![R::ZERO; prev.cout * uh * uw];
            for c in 0..prev.cout {
                for r in 0..ph {
                    for col in 0..pw {
                        let k = arg[c * ph * pw + r * pw + col];
                        let (dr, dc) = ((k / 2) as usize, (k % 2) as usize);
                        up[c * uh * uw + (2 * r + dr) * uw + 2 * col + dc] +=
                            g[c * ph * pw + r * pw + col];
                    }
                }
            }
            g = up;
        }
        d_act = g;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: WeightSetT<f32>,
    pub v: WeightSetT<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(graph: &ModelGraph) -> Self {
        AdamState {
            m: WeightSetT::zeros_like_graph(graph),
            v: WeightSetT::zeros_like_graph(graph),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects NaN gradients by parameter name.
pub fn adam_step(
    weights: &mut WeightSetT<f32>,
    grads: &WeightSetT<f32>,
    state: &mut AdamState,
    lr: f32,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads.tensors() {
        if g.data().iter().any(|v| v.is_nan()) {
            return Err(SqpError::NanGradient(name));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let b1 = cfg.adam_beta1 as f64;
    let b2 = cfg.adam_beta2 as f64;
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);

    let mut w_all = weights.tensors_mut();
    let mut m_all = state.m.tensors_mut();
    let mut v_all = state.v.tensors_mut();
    let g_all = grads.tensors();
    for idx in 0..g_all.len() {
        let g = g_all[idx].1.data();
        let w = w_all[idx].1.data_mut();
        let m = m_all[idx].1.data_mut();
        let v = v_all[idx].1.data_mut();
        for j in 0..g.len() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let mhat = mj / c1;
            let vhat = vj / c2;
            w[j] -= (lr as f64 * mhat / (vhat.sqrt() + cfg.adam_eps as f64)) as f32;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    pub train_mse: f32,
    pub val_mse: f32,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_weights: WeightSetT<f32>,
    pub best_epoch: usize,
    pub best_val_mse: f32,
    pub history: Vec<EpochStats>,
}

/// A labelled training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: TensorF32,
    pub label: f32,
}

// Samples per parallel gradient chunk. Fixed so the f32 reduction order
// (and therefore the result) is independent of thread count.
const GRAD_CHUNK: usize = 8;

fn accumulate_chunk(
    graph: &ModelGraph,
    weights: &WeightSetT<f32>,
    examples: &[&Example],
    idxs: &[usize],
    epoch: usize,
    batch_len: usize,
    cfg: &TrainConfig,
) -> Result<(WeightSetT<f32>, f64)> {
    let mut grads = WeightSetT::<f32>::zeros_like_graph(graph);
    let surrogate = SurrogateSpec {
        beta: cfg.surrogate_beta,
    };
    let mut sq_err = 0.0f64;
    for &idx in idxs {
        let ex = examples[idx];
        let mut rng = Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, idx as u64));
        let (pred, cache) = forward_with(
            graph,
            weights,
            &ex.input,
            Mode::Train,
            Some(&mut rng),
            ConvImpl::Lowered,
        )?;
        let err = pred - ex.label;
        sq_err += (err as f64) * (err as f64);
        let d_pred = 2.0 * err / batch_len as f32;
        backward(graph, weights, &cache, d_pred, surrogate, &mut grads)?;
    }
    Ok((grads, sq_err))
}

fn add_grads(into: &mut WeightSetT<f32>, from: &WeightSetT<f32>) {
    let mut dst = into.tensors_mut();
    let src = from.tensors();
    for idx in 0..src.len() {
        for (d, &s) in dst[idx].1.data_mut().iter_mut().zip(src[idx].1.data()) {
            *d += s;
        }
    }
}

/// Evaluate the graph on a batch of inputs in eval mode (no dropout, no
/// backward cache).
pub fn predict_batch(
    graph: &ModelGraph,
    weights: &WeightSetT<f32>,
    inputs: &[&TensorF32],
    par: Parallelism,
) -> Result<Vec<f32>> {
    ordered_map(par, inputs.len(), |i| crate::model::predict(graph, weights, inputs[i]))
        .into_iter()
        .collect()
}

/// Full training run. Minibatches are reshuffled each epoch (seeded); the
/// validation MSE drives the plateau schedule (lr x factor after
/// `plateau_patience` epochs without a new best) and early stopping (after
/// `early_stop_patience` epochs without a new best). Returns the weights
/// of the best validation epoch.
pub fn train(
    graph: &ModelGraph,
    init_weights: &WeightSetT<f32>,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    par: Parallelism,
) -> Result<TrainOutcome> {
    train_with_progress(graph, init_weights, train_set, val_set, cfg, par, |_| {})
}

/// [`train`] with a per-epoch callback (progress printing, live logging).
pub fn train_with_progress(
    graph: &ModelGraph,
    init_weights: &WeightSetT<f32>,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    par: Parallelism,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(SqpError::EmptyInput(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let examples: Vec<&Example> = train_set.iter().collect();
    let val_inputs: Vec<&TensorF32> = val_set.iter().map(|e| &e.input).collect();
    let val_labels: Vec<f32> = val_set.iter().map(|e| e.label).collect();

    let mut weights = init_weights.clone();
    // Center the regression head on the training-label mean when the bias
    // is still at its zero init; predictions then start near the label
    // distribution instead of zero, avoiding a violent first-epoch
    // transient through the global pool.
    {
        let head = weights.dense_biases.last_mut().expect("dense head");
        if head.data().iter().all(|&b| b == 0.0) {
            let mean = train_set.iter().map(|e| e.label as f64).sum::<f64>()
                / train_set.len() as f64;
            head.data_mut()[0] = mean as f32;
        }
    }
    let mut adam = AdamState::new(graph);
    let mut lr = cfg.lr;
    let mut history = Vec::new();
    let mut best_val = f32::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_weights = weights.clone();
    let mut plateau_ctr = 0usize;
    let mut stop_ctr = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut shuffle_rng =
            Rng::seed_from_u64(derive_seed(cfg.seed, 0x53485546, epoch as u64));
        shuffle_rng.shuffle(&mut order);

        let mut train_sq_err = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let chunks: Vec<&[usize]> = batch.chunks(GRAD_CHUNK).collect();
            let partials = ordered_map(par, chunks.len(), |ci| {
                accumulate_chunk(
                    graph,
                    &weights,
                    &examples,
                    chunks[ci],
                    epoch,
                    batch.len(),
                    cfg,
                )
            });
            let mut grads = WeightSetT::<f32>::zeros_like_graph(graph);
            for p in partials {
                let (g, sq) = p?;
                add_grads(&mut grads, &g);
                train_sq_err += sq;
            }
            adam_step(&mut weights, &grads, &mut adam, lr, cfg)?;
        }
        let train_mse = (train_sq_err / examples.len() as f64) as f32;

        let val_preds = predict_batch(graph, &weights, &val_inputs, par)?;
        let val_mse = mse_loss(&val_preds, &val_labels)?;
        let stats = EpochStats {
            epoch,
            lr,
            train_mse,
            val_mse,
        };
        history.push(stats);
        on_epoch(&stats);
        if !val_mse.is_finite() {
            return Err(SqpError::Diverged { epoch, history });
        }

        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best_weights = weights.clone();
            plateau_ctr = 0;
            stop_ctr = 0;
        } else {
            plateau_ctr += 1;
            stop_ctr += 1;
            if plateau_ctr >= cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                plateau_ctr = 0;
            }
            if stop_ctr >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best_weights,
        best_epoch,
        best_val_mse: best_val,
        history,
    })
}

/// Training history as CSV: epoch, lr, train_mse, val_mse.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,lr,train_mse,val_mse\n");
    for e in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.lr, e.train_mse, e.val_mse
        ));
    }
    out
}
