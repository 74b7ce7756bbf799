//! Post-training static 8-bit quantization.
//!
//! Activations: unsigned affine u8 grids whose ranges come from a 2,048-bin
//! histogram observer and a coarse-to-fine search for the (min, max) clip
//! that minimizes the L2 quantization error over the observed mass. Zero is
//! always exactly representable so zero padding stays lossless.
//!
//! Weights: symmetric signed i8 per output channel (zero point 0), scaled
//! from per-channel min/max observers. Biases are stored as i32 at
//! input_scale * weight_scale.

use crate::error::{Result, SqpError};
use crate::model::{self, ActivationKind, Mode, ModelGraph, WeightSet};
use crate::tensor::{TensorF32, TensorI8, TensorU8};

pub const HIST_BINS: usize = 2048;
pub const ACT_QMIN: i32 = 0;
pub const ACT_QMAX: i32 = 255;
/// Symmetric signed-8-bit grid for weights. The negative end is clamped to
/// -127 so the grid stays mirror-symmetric around the zero point.
pub const WEIGHT_QMAX: i32 = 127;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
}

impl QuantParams {
    /// Unsigned affine grid over [min, max], widened to include zero.
    pub fn affine_u8(min: f32, max: f32) -> QuantParams {
        let lo = min.min(0.0) as f64;
        let hi = max.max(0.0) as f64;
        if hi == lo {
            return QuantParams {
                scale: 1.0,
                zero_point: 0,
                qmin: ACT_QMIN,
                qmax: ACT_QMAX,
            };
        }
        let scale = (hi - lo) / (ACT_QMAX - ACT_QMIN) as f64;
        let zp = (-lo / scale).round_ties_even() as i32;
        QuantParams {
            scale: scale as f32,
            zero_point: zp.clamp(ACT_QMIN, ACT_QMAX),
            qmin: ACT_QMIN,
            qmax: ACT_QMAX,
        }
    }

    /// Symmetric signed grid with zero point 0; `amax` is the largest
    /// absolute value to represent.
    pub fn symmetric_i8(amax: f32) -> QuantParams {
        let scale = if amax > 0.0 {
            amax / WEIGHT_QMAX as f32
        } else {
            1.0
        };
        QuantParams {
            scale,
            zero_point: 0,
            qmin: -WEIGHT_QMAX,
            qmax: WEIGHT_QMAX,
        }
    }

    #[inline]
    pub fn quantize_value(&self, x: f32) -> i32 {
        let q = (x as f64 / self.scale as f64).round_ties_even() as i64 + self.zero_point as i64;
        q.clamp(self.qmin as i64, self.qmax as i64) as i32
    }

    #[inline]
    pub fn dequantize_value(&self, q: i32) -> f32 {
        ((q - self.zero_point) as f64 * self.scale as f64) as f32
    }
}

pub fn quantize_u8(x: &TensorF32, qp: &QuantParams) -> TensorU8 {
    debug_assert!(qp.qmin >= 0 && qp.qmax <= 255);
    let data = x.data().iter().map(|&v| qp.quantize_value(v) as u8).collect();
    TensorU8::from_vec(x.shape(), data).expect("same shape")
}

pub fn dequantize_u8(q: &TensorU8, qp: &QuantParams) -> TensorF32 {
    let data = q.data().iter().map(|&v| qp.dequantize_value(v as i32)).collect();
    TensorF32::from_vec(q.shape(), data).expect("same shape")
}

pub fn quantize_i8(x: &TensorF32, qp: &QuantParams) -> TensorI8 {
    debug_assert!(qp.qmin >= -128 && qp.qmax <= 127);
    let data = x.data().iter().map(|&v| qp.quantize_value(v) as i8).collect();
    TensorI8::from_vec(x.shape(), data).expect("same shape")
}

pub fn dequantize_i8(q: &TensorI8, qp: &QuantParams) -> TensorF32 {
    let data = q.data().iter().map(|&v| qp.dequantize_value(v as i32)).collect();
    TensorF32::from_vec(q.shape(), data).expect("same shape")
}

// ---------------------------------------------------------------------------
// Observers
// ---------------------------------------------------------------------------

/// Running 2,048-bin histogram over everything observed so far. When a new
/// batch widens the range, existing counts are redistributed onto the new
/// grid proportionally to bin overlap (count-exact).
#[derive(Clone, Debug)]
pub struct HistogramObserver {
    bins: Vec<u64>,
    min: f32,
    max: f32,
    total: u64,
}

impl Default for HistogramObserver {
    fn default() -> Self {
        Self::new()
    }
}

impl HistogramObserver {
    pub fn new() -> Self {
        HistogramObserver {
            bins: vec![0; HIST_BINS],
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
            total: 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn range(&self) -> (f32, f32) {
        (self.min, self.max)
    }

    pub fn bins(&self) -> &[u64] {
        &self.bins
    }

    fn bin_of(&self, x: f32) -> usize {
        let width = (self.max - self.min) as f64;
        if width <= 0.0 {
            return 0;
        }
        let i = ((x - self.min) as f64 / width * HIST_BINS as f64) as usize;
        i.min(HIST_BINS - 1)
    }

    pub fn observe(&mut self, values: &[f32]) {
        if values.is_empty() {
            return;
        }
        let mut bmin = f32::INFINITY;
        let mut bmax = f32::NEG_INFINITY;
        for &v in values {
            bmin = bmin.min(v);
            bmax = bmax.max(v);
        }
        let new_min = self.min.min(bmin);
        let new_max = self.max.max(bmax);
        if self.total > 0 && (new_min < self.min || new_max > self.max) {
            self.rebin(new_min, new_max);
        }
        self.min = new_min;
        self.max = new_max;
        for &v in values {
            let b = self.bin_of(v);
            self.bins[b] += 1;
        }
        self.total += values.len() as u64;
    }

    /// Move existing counts onto a histogram covering [new_min, new_max],
    /// splitting each old bin across the new bins it overlaps. Totals are
    /// preserved exactly.
    fn rebin(&mut self, new_min: f32, new_max: f32) {
        let old_bins = std::mem::replace(&mut self.bins, vec![0; HIST_BINS]);
        let (omin, omax) = (self.min as f64, self.max as f64);
        let (nmin, nmax) = (new_min as f64, new_max as f64);
        let owidth = omax - omin;
        let nwidth = nmax - nmin;
        if owidth <= 0.0 {
            // All old mass sat at a single point.
            let j = if nwidth <= 0.0 {
                0
            } else {
                (((omin - nmin) / nwidth * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
            };
            self.bins[j] = old_bins.iter().sum();
            return;
        }
        let obin = owidth / HIST_BINS as f64;
        let nbin = nwidth / HIST_BINS as f64;
        for (i, &c) in old_bins.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let a = omin + i as f64 * obin;
            let b = a + obin;
            let j_lo = (((a - nmin) / nbin) as usize).min(HIST_BINS - 1);
            let j_hi = (((b - nmin) / nbin) as usize).min(HIST_BINS - 1);
            if j_lo == j_hi {
                self.bins[j_lo] += c;
                continue;
            }
            let mut assigned = 0u64;
            let mut covered = 0.0f64;
            for j in j_lo..=j_hi {
                let lo = (nmin + j as f64 * nbin).max(a);
                let hi = (nmin + (j + 1) as f64 * nbin).min(b);
                covered += (hi - lo).max(0.0);
                let target = ((c as f64) * (covered / obin)).round() as u64;
                let target = target.min(c);
                self.bins[j] += target - assigned;
                assigned = target;
            }
            // Rounding drift lands in the last overlapped bin.
            self.bins[j_hi] += c - assigned;
        }
    }

    /// Quantization error of clipping to [lo, hi] (always including zero),
    /// measured as sum of count * (center - dequant(quant(center)))^2.
    /// This is the objective `range_search` minimizes.
    pub fn clip_error(&self, lo: f32, hi: f32) -> f64 {
        let qp = QuantParams::affine_u8(lo, hi);
        let (omin, omax) = (self.min as f64, self.max as f64);
        let obin = (omax - omin) / HIST_BINS as f64;
        let mut err = 0.0f64;
        for (i, &c) in self.bins.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let center = (omin + (i as f64 + 0.5) * obin) as f32;
            let dq = qp.dequantize_value(qp.quantize_value(center));
            let d = (center - dq) as f64;
            err += c as f64 * d * d;
        }
        err
    }

    /// Find the clip range minimizing the histogram quantization error by a
    /// coarse-to-fine shrink of each end in bin-sized steps. Never worse
    /// than the full observed range; ties prefer the wider range.
    pub fn range_search(&self) -> Result<(f32, f32)> {
        if self.total == 0 {
            return Err(SqpError::EmptyInput("histogram observer saw no data".into()));
        }
        if self.max <= self.min {
            let c = self.min;
            return Ok((c.min(0.0), c.max(0.0)));
        }
        let bin = (self.max as f64 - self.min as f64) / HIST_BINS as f64;
        let edge_lo = |shrink: usize| (self.min as f64 + shrink as f64 * bin) as f32;
        let edge_hi = |shrink: usize| (self.max as f64 - shrink as f64 * bin) as f32;
        // At least one bin must survive.
        let max_shrink = HIST_BINS - 1;

        let mut best = (0usize, 0usize);
        let mut best_err = self.clip_error(self.min, self.max);
        let mut radius = max_shrink;
        let mut step = HIST_BINS / 8;
        while step >= 1 {
            let (c_lo, c_hi) = best;
            let lo_from = c_lo.saturating_sub(radius);
            let lo_to = (c_lo + radius).min(max_shrink);
            let hi_from = c_hi.saturating_sub(radius);
            let hi_to = (c_hi + radius).min(max_shrink);
            let mut s_lo = lo_from;
            while s_lo <= lo_to {
                let mut s_hi = hi_from;
                while s_hi <= hi_to {
                    if s_lo + s_hi <= max_shrink {
                        let (lo, hi) = (edge_lo(s_lo), edge_hi(s_hi));
                        if hi > lo {
                            let err = self.clip_error(lo, hi);
                            let better = err < best_err
                                || (err == best_err && s_lo + s_hi < best.0 + best.1);
                            if better {
                                best_err = err;
                                best = (s_lo, s_hi);
                            }
                        }
                    }
                    s_hi += step;
                }
                s_lo += step;
            }
            radius = step;
            step /= 2;
        }
        Ok((edge_lo(best.0), edge_hi(best.1)))
    }
}

/// Running per-output-channel min/max of a weight tensor (channel = dim 0).
#[derive(Clone, Debug, Default)]
pub struct PerChannelObserver {
    pub mins: Vec<f32>,
    pub maxs: Vec<f32>,
}

impl PerChannelObserver {
    pub fn observe(&mut self, weights: &TensorF32) {
        let channels = weights.shape()[0];
        let per = weights.len() / channels.max(1);
        if self.mins.is_empty() {
            self.mins = vec![f32::INFINITY; channels];
            self.maxs = vec![f32::NEG_INFINITY; channels];
        }
        assert_eq!(self.mins.len(), channels);
        for c in 0..channels {
            for &v in &weights.data()[c * per..(c + 1) * per] {
                self.mins[c] = self.mins[c].min(v);
                self.maxs[c] = self.maxs[c].max(v);
            }
        }
    }

    pub fn qparams(&self) -> Vec<QuantParams> {
        self.mins
            .iter()
            .zip(&self.maxs)
            .map(|(&lo, &hi)| QuantParams::symmetric_i8(lo.abs().max(hi.abs())))
            .collect()
    }
}

/// Quantize a weight tensor per output channel (symmetric i8).
pub fn quantize_weights_per_channel(weights: &TensorF32) -> (TensorI8, Vec<QuantParams>) {
    let mut obs = PerChannelObserver::default();
    obs.observe(weights);
    let qps = obs.qparams();
    let channels = weights.shape()[0];
    let per = weights.len() / channels;
    let mut data = Vec::with_capacity(weights.len());
    for c in 0..channels {
        let qp = &qps[c];
        for &v in &weights.data()[c * per..(c + 1) * per] {
            data.push(qp.quantize_value(v) as i8);
        }
    }
    (
        TensorI8::from_vec(weights.shape(), data).expect("same shape"),
        qps,
    )
}

pub fn dequantize_weights_per_channel(q: &TensorI8, qps: &[QuantParams]) -> TensorF32 {
    let channels = q.shape()[0];
    let per = q.len() / channels;
    let mut data = Vec::with_capacity(q.len());
    for c in 0..channels {
        for &v in &q.data()[c * per..(c + 1) * per] {
            data.push(qps[c].dequantize_value(v as i32));
        }
    }
    TensorF32::from_vec(q.shape(), data).expect("same shape")
}

// ---------------------------------------------------------------------------
// Model-level calibration
// ---------------------------------------------------------------------------

/// Complete quantization parameter table for the fixed graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelQuantParams {
    pub input: QuantParams,
    /// Post-activation output grids of the four conv layers.
    pub conv_out: Vec<QuantParams>,
    /// Grid of the global-pool output vector.
    pub pool_out: QuantParams,
    /// Output grids of the dense layers (post-ReLU; last one linear).
    pub dense_out: Vec<QuantParams>,
    /// Per-output-channel symmetric weight grids.
    pub conv_w: Vec<Vec<QuantParams>>,
    pub dense_w: Vec<Vec<QuantParams>>,
}

/// Run the calibration set through the model, recording activation
/// histograms at the input and at every conv / pool / dense output, plus
/// per-channel weight ranges. Observer updates are sequential so the result
/// is a deterministic function of (weights, calibration order).
pub fn calibrate(
    graph: &ModelGraph,
    weights: &WeightSet,
    calib: &[&TensorF32],
) -> Result<ModelQuantParams> {
    if calib.is_empty() {
        return Err(SqpError::EmptyInput("calibration set is empty".into()));
    }
    let n_conv = graph.convs.len();
    let mut input_obs = HistogramObserver::new();
    let mut conv_obs: Vec<HistogramObserver> =
        (0..n_conv).map(|_| HistogramObserver::new()).collect();
    let mut pool_obs = HistogramObserver::new();
    let mut dense_obs: Vec<HistogramObserver> =
        (0..graph.dense.len()).map(|_| HistogramObserver::new()).collect();

    let mut postact_buf: Vec<f32> = Vec::new();
    for &x in calib {
        input_obs.observe(x.data());
        let (_, cache) = model::forward(graph, weights, x, Mode::Eval, None)?;
        for (i, spec) in graph.convs.iter().enumerate() {
            postact_buf.clear();
            postact_buf.extend(cache.conv_preacts[i].iter().map(|&p| match spec.act {
                ActivationKind::ReLU => p.max(0.0),
                ActivationKind::Heaviside => model::heaviside(p),
                ActivationKind::RelaxedFastSigmoid(beta) => {
                    model::relaxed_fast_sigmoid(p, beta)
                }
            }));
            conv_obs[i].observe(&postact_buf);
        }
        pool_obs.observe(&cache.pooled);
        for (li, pre) in cache.dense_preacts.iter().enumerate() {
            if li + 1 < graph.dense.len() {
                postact_buf.clear();
                postact_buf.extend(pre.iter().map(|&p| p.max(0.0)));
                dense_obs[li].observe(&postact_buf);
            } else {
                dense_obs[li].observe(pre);
            }
        }
    }

    let to_qp = |obs: &HistogramObserver| -> Result<QuantParams> {
        let (lo, hi) = obs.range_search()?;
        Ok(QuantParams::affine_u8(lo, hi))
    };

    Ok(ModelQuantParams {
        input: to_qp(&input_obs)?,
        conv_out: conv_obs.iter().map(to_qp).collect::<Result<_>>()?,
        pool_out: to_qp(&pool_obs)?,
        dense_out: dense_obs.iter().map(to_qp).collect::<Result<_>>()?,
        conv_w: weights
            .conv_kernels
            .iter()
            .map(|k| {
                let mut obs = PerChannelObserver::default();
                obs.observe(k);
                obs.qparams()
            })
            .collect(),
        dense_w: weights
            .dense_weights
            .iter()
            .map(|w| {
                let mut obs = PerChannelObserver::default();
                obs.observe(w);
                obs.qparams()
            })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Quantized model assembly
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct QuantizedLayer {
    /// i8 weights, per-output-channel symmetric.
    pub weights_q: TensorI8,
    pub w_qparams: Vec<QuantParams>,
    /// i32 biases at scale input_scale * weight_scale (per channel).
    pub bias_q: Vec<i32>,
    /// The input scale the biases were folded with.
    pub input_scale: f32,
}

/// All conv/dense layers quantized, plus the activation grids.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    pub params: ModelQuantParams,
    pub convs: Vec<QuantizedLayer>,
    pub dense: Vec<QuantizedLayer>,
}

fn quantize_layer(
    weights: &TensorF32,
    bias: &TensorF32,
    w_qparams: &[QuantParams],
    input_scale: f32,
) -> Result<QuantizedLayer> {
    let channels = weights.shape()[0];
    if w_qparams.len() != channels || bias.len() != channels {
        return Err(SqpError::ShapeMismatch(format!(
            "layer has {channels} output channels but {} weight grids / {} biases",
            w_qparams.len(),
            bias.len()
        )));
    }
    let per = weights.len() / channels;
    let mut data = Vec::with_capacity(weights.len());
    for c in 0..channels {
        for &v in &weights.data()[c * per..(c + 1) * per] {
            data.push(w_qparams[c].quantize_value(v) as i8);
        }
    }
    let bias_q = bias
        .data()
        .iter()
        .zip(w_qparams)
        .map(|(&b, qp)| {
            let s = input_scale as f64 * qp.scale as f64;
            (b as f64 / s).round_ties_even() as i32
        })
        .collect();
    Ok(QuantizedLayer {
        weights_q: TensorI8::from_vec(weights.shape(), data)?,
        w_qparams: w_qparams.to_vec(),
        bias_q,
        input_scale,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantPipeline {
    /// Binary activations: conv inputs after the first layer are exact
    /// {0,1} bits, so their effective input scale is 1.
    BamInt8,
    /// Conventional u8-activation pipeline: each layer consumes the
    /// previous layer's activation grid.
    DenseInt8,
}

/// Fold the calibration table into int8 weights and i32 biases for every
/// layer of the graph.
pub fn quantize_model(
    graph: &ModelGraph,
    weights: &WeightSet,
    params: &ModelQuantParams,
    pipeline: QuantPipeline,
) -> Result<QuantizedModel> {
    let n_conv = graph.convs.len();
    if params.conv_out.len() != n_conv
        || params.conv_w.len() != n_conv
        || params.dense_out.len() != graph.dense.len()
        || params.dense_w.len() != graph.dense.len()
    {
        return Err(SqpError::ShapeMismatch(
            "quantization table does not cover every layer".into(),
        ));
    }
    let mut convs = Vec::with_capacity(n_conv);
    for i in 0..n_conv {
        let input_scale = if i == 0 {
            params.input.scale
        } else {
            match pipeline {
                QuantPipeline::BamInt8 => 1.0,
                QuantPipeline::DenseInt8 => params.conv_out[i - 1].scale,
            }
        };
        convs.push(quantize_layer(
            &weights.conv_kernels[i],
            &weights.conv_biases[i],
            &params.conv_w[i],
            input_scale,
        )?);
    }
    let mut dense = Vec::with_capacity(graph.dense.len());
    for i in 0..graph.dense.len() {
        let input_scale = if i == 0 {
            params.pool_out.scale
        } else {
            params.dense_out[i - 1].scale
        };
        dense.push(quantize_layer(
            &weights.dense_weights[i],
            &weights.dense_biases[i],
            &params.dense_w[i],
            input_scale,
        )?);
    }
    Ok(QuantizedModel {
        params: params.clone(),
        convs,
        dense,
    })
}

// ---------------------------------------------------------------------------
// QNT1 byte section (appended to SQPW checkpoints)
// ---------------------------------------------------------------------------

pub const QNT1_MAGIC: &[u8; 4] = b"QNT1";

impl ModelQuantParams {
    pub fn to_qnt1_bytes(&self) -> Vec<u8> {
        fn push_qp(out: &mut Vec<u8>, qp: &QuantParams) {
            out.extend_from_slice(&qp.scale.to_le_bytes());
            out.extend_from_slice(&qp.zero_point.to_le_bytes());
            out.extend_from_slice(&qp.qmin.to_le_bytes());
            out.extend_from_slice(&qp.qmax.to_le_bytes());
        }
        fn push_vec(out: &mut Vec<u8>, qps: &[QuantParams]) {
            out.extend_from_slice(&(qps.len() as u32).to_le_bytes());
            for qp in qps {
                push_qp(out, qp);
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(QNT1_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        push_qp(&mut out, &self.input);
        push_vec(&mut out, &self.conv_out);
        push_qp(&mut out, &self.pool_out);
        push_vec(&mut out, &self.dense_out);
        out.extend_from_slice(&(self.conv_w.len() as u32).to_le_bytes());
        for per_channel in &self.conv_w {
            push_vec(&mut out, per_channel);
        }
        out.extend_from_slice(&(self.dense_w.len() as u32).to_le_bytes());
        for per_channel in &self.dense_w {
            push_vec(&mut out, per_channel);
        }
        out
    }

    pub fn from_qnt1_bytes(bytes: &[u8]) -> Result<ModelQuantParams> {
        struct R<'a>(&'a [u8], usize);
        impl R<'_> {
            fn take(&mut self, n: usize) -> Result<&[u8]> {
                if self.1 + n > self.0.len() {
                    return Err(SqpError::Format("truncated QNT1 section".into()));
                }
                let s = &self.0[self.1..self.1 + n];
                self.1 += n;
                Ok(s)
            }
            fn u32(&mut self) -> Result<u32> {
                Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
            }
            fn i32(&mut self) -> Result<i32> {
                Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
            }
            fn f32(&mut self) -> Result<f32> {
                Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
            }
            fn qp(&mut self) -> Result<QuantParams> {
                Ok(QuantParams {
                    scale: self.f32()?,
                    zero_point: self.i32()?,
                    qmin: self.i32()?,
                    qmax: self.i32()?,
                })
            }
            fn qp_vec(&mut self) -> Result<Vec<QuantParams>> {
                let n = self.u32()? as usize;
                (0..n).map(|_| self.qp()).collect()
            }
        }
        let mut r = R(bytes, 0);
        if r.take(4)? != QNT1_MAGIC {
            return Err(SqpError::Format("bad QNT1 magic".into()));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(SqpError::Format(format!("unsupported QNT1 version {version}")));
        }
        let input = r.qp()?;
        let conv_out = r.qp_vec()?;
        let pool_out = r.qp()?;
        let dense_out = r.qp_vec()?;
        let n_conv_w = r.u32()? as usize;
        let conv_w = (0..n_conv_w).map(|_| r.qp_vec()).collect::<Result<_>>()?;
        let n_dense_w = r.u32()? as usize;
        let dense_w = (0..n_dense_w).map(|_| r.qp_vec()).collect::<Result<_>>()?;
        Ok(ModelQuantParams {
            input,
            conv_out,
            pool_out,
            dense_out,
            conv_w,
            dense_w,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_dnsmos, Variant};
    use crate::rng::Rng;

    #[test]
    fn zero_tensor_quantizes_to_zero_point_and_back() {
        let qp = QuantParams::affine_u8(-1.5, 3.0);
        let x = TensorF32::zeros(&[4, 4]);
        let q = quantize_u8(&x, &qp);
        assert!(q.data().iter().all(|&v| v as i32 == qp.zero_point));
        let dq = dequantize_u8(&q, &qp);
        assert!(dq.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_example_on_tenth_grid() {
        let qp = QuantParams {
            scale: 0.1,
            zero_point: 0,
            qmin: -127,
            qmax: 127,
        };
        assert_eq!(qp.quantize_value(1.27), 13);
        assert!((qp.dequantize_value(13) - 1.3).abs() < 1e-6);
    }

    #[test]
    fn round_trip_error_within_half_scale() {
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..50 {
            let lo = rng.range_f32(-8.0, -0.1);
            let hi = rng.range_f32(0.1, 8.0);
            let qp = QuantParams::affine_u8(lo, hi);
            let in_lo = qp.scale * (qp.qmin - qp.zero_point) as f32;
            let in_hi = qp.scale * (qp.qmax - qp.zero_point) as f32;
            for _ in 0..200 {
                let x = rng.range_f32(in_lo, in_hi);
                let dq = qp.dequantize_value(qp.quantize_value(x));
                assert!(
                    (x - dq).abs() <= qp.scale / 2.0 + qp.scale * 1e-4,
                    "x={x} dq={dq} scale={}",
                    qp.scale
                );
            }
        }
    }

    #[test]
    fn quantize_idempotent_on_grid_points() {
        let qp = QuantParams::affine_u8(-2.0, 6.0);
        for q in (qp.qmin..=qp.qmax).step_by(7) {
            let x = qp.dequantize_value(q);
            assert_eq!(qp.quantize_value(x), q);
            let again = qp.dequantize_value(qp.quantize_value(x));
            assert_eq!(again, x);
        }
    }

    #[test]
    fn observer_counts_and_range() {
        let mut obs = HistogramObserver::new();
        obs.observe(&[0.5, 0.25, 0.75]);
        obs.observe(&[2.0, -1.0]);
        assert_eq!(obs.total(), 5);
        assert_eq!(obs.range(), (-1.0, 2.0));
        assert_eq!(obs.bins().iter().sum::<u64>(), 5);
    }

    #[test]
    fn constant_observer_collapses_to_zero_inclusive_range() {
        let mut obs = HistogramObserver::new();
        obs.observe(&[3.5; 64]);
        assert_eq!(obs.range_search().unwrap(), (0.0, 3.5));
        let mut obs = HistogramObserver::new();
        obs.observe(&[-2.0; 8]);
        assert_eq!(obs.range_search().unwrap(), (-2.0, 0.0));
    }

    #[test]
    fn empty_observer_rejected() {
        assert!(HistogramObserver::new().range_search().is_err());
    }

    #[test]
    fn outlier_gets_clipped() {
        // The L2 objective trades the outlier's squared clipping distance
        // against finer resolution for the bulk, so the bulk needs real
        // mass before the clip wins.
        let mut rng = Rng::seed_from_u64(5);
        let mut obs = HistogramObserver::new();
        obs.observe(&[100.0]);
        let mut chunk = vec![0.0f32; 500_000];
        for _ in 0..16 {
            for v in chunk.iter_mut() {
                *v = rng.next_f32();
            }
            obs.observe(&chunk);
        }
        let (lo, hi) = obs.range_search().unwrap();
        assert!(hi < 15.0, "outlier survived: max* = {hi}");
        assert!(lo <= 0.0);
        // the chosen clip must also beat the full range on the objective
        let full = obs.clip_error(0.0, 100.0);
        let clipped = obs.clip_error(lo, hi);
        assert!(clipped < full, "clip {clipped} vs full {full}");
    }

    #[test]
    fn search_never_worse_than_full_range() {
        let mut rng = Rng::seed_from_u64(6);
        for case in 0..50 {
            let mut obs = HistogramObserver::new();
            let n = 500 + rng.below(2000);
            let vals: Vec<f32> = (0..n)
                .map(|_| (rng.normal() * rng.range_f64(0.2, 3.0)) as f32)
                .collect();
            obs.observe(&vals);
            let (lo, hi) = obs.range_search().unwrap();
            let search_err = obs.clip_error(lo, hi);
            let (rmin, rmax) = obs.range();
            let full_err = obs.clip_error(rmin, rmax);
            assert!(
                search_err <= full_err,
                "case {case}: search {search_err} > full {full_err}"
            );
        }
    }

    #[test]
    fn rebin_preserves_total_count() {
        let mut rng = Rng::seed_from_u64(7);
        let mut obs = HistogramObserver::new();
        for _ in 0..20 {
            let n = 1 + rng.below(500);
            let center = rng.range_f32(-50.0, 50.0);
            let spread = rng.range_f32(0.01, 20.0);
            let vals: Vec<f32> = (0..n)
                .map(|_| center + spread * (rng.next_f32() - 0.5))
                .collect();
            obs.observe(&vals);
            assert_eq!(obs.bins().iter().sum::<u64>(), obs.total());
        }
    }

    #[test]
    fn per_channel_extrema_saturate_the_grid() {
        let (_, w) = build_dnsmos(Variant::Baseline, 11);
        for kernel in &w.conv_kernels {
            let (q, qps) = quantize_weights_per_channel(kernel);
            let channels = kernel.shape()[0];
            let per = kernel.len() / channels;
            for c in 0..channels {
                let ch = &q.data()[c * per..(c + 1) * per];
                let amax = ch.iter().map(|&v| (v as i32).abs()).max().unwrap();
                let constant = kernel.data()[c * per..(c + 1) * per]
                    .iter()
                    .all(|&v| v == 0.0);
                if !constant {
                    assert_eq!(amax, WEIGHT_QMAX, "channel {c}");
                }
                assert_eq!(qps[c].zero_point, 0);
            }
        }
    }

    #[test]
    fn dequantized_weights_close_to_originals() {
        let (_, w) = build_dnsmos(Variant::Baseline, 2);
        for kernel in &w.conv_kernels {
            let (q, qps) = quantize_weights_per_channel(kernel);
            let dq = dequantize_weights_per_channel(&q, &qps);
            let channels = kernel.shape()[0];
            let per = kernel.len() / channels;
            for c in 0..channels {
                let orig = &kernel.data()[c * per..(c + 1) * per];
                let deq = &dq.data()[c * per..(c + 1) * per];
                let amax = orig.iter().fold(0.0f32, |a, &b| a.max(b.abs()));
                for (&o, &d) in orig.iter().zip(deq) {
                    assert!(
                        (o - d).abs() <= amax * 2f32.powi(-7),
                        "channel {c}: {o} vs {d} (amax {amax})"
                    );
                }
            }
        }
    }

    #[test]
    fn quantize_already_on_grid_is_exact() {
        let qp = QuantParams::symmetric_i8(2.0);
        let xs: Vec<f32> = (-127..=127).map(|q| qp.dequantize_value(q)).collect();
        let t = TensorF32::from_vec(&[xs.len()], xs.clone()).unwrap();
        let q = quantize_i8(&t, &qp);
        let dq = dequantize_i8(&q, &qp);
        assert_eq!(dq.data(), &xs[..]);
    }

    fn tiny_calib_inputs(rng: &mut Rng, n: usize) -> Vec<TensorF32> {
        (0..n)
            .map(|_| {
                TensorF32::from_vec(
                    &[16, 20],
                    (0..16 * 20).map(|_| rng.range_f32(-8.0, 1.0)).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn single_sample_calibration_works() {
        let (g, w) = build_dnsmos(Variant::Baseline, 3);
        let mut rng = Rng::seed_from_u64(8);
        let inputs = tiny_calib_inputs(&mut rng, 1);
        let refs: Vec<&TensorF32> = inputs.iter().collect();
        let qp = calibrate(&g, &w, &refs).unwrap();
        assert!(qp.input.scale > 0.0);
        assert_eq!(qp.conv_out.len(), 4);
        assert_eq!(qp.dense_out.len(), 3);
    }

    #[test]
    fn calibration_deterministic() {
        let (g, w) = build_dnsmos(Variant::Bam, 4);
        let mut rng = Rng::seed_from_u64(9);
        let inputs = tiny_calib_inputs(&mut rng, 5);
        let refs: Vec<&TensorF32> = inputs.iter().collect();
        let a = calibrate(&g, &w, &refs).unwrap();
        let b = calibrate(&g, &w, &refs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bam_activation_observers_see_binary_grid() {
        let (g, w) = build_dnsmos(Variant::Bam, 5);
        let mut rng = Rng::seed_from_u64(10);
        let inputs = tiny_calib_inputs(&mut rng, 3);
        let refs: Vec<&TensorF32> = inputs.iter().collect();
        let qp = calibrate(&g, &w, &refs).unwrap();
        for (i, c) in qp.conv_out.iter().enumerate() {
            assert!((c.scale - 1.0 / 255.0).abs() < 1e-9, "conv{}: {}", i + 1, c.scale);
            assert_eq!(c.zero_point, 0);
            // both 0 and 1 land on the grid (up to f32 rounding)
            assert_eq!(c.dequantize_value(c.quantize_value(0.0)), 0.0);
            let one = c.dequantize_value(c.quantize_value(1.0));
            assert!((one - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_calibration_rejected() {
        let (g, w) = build_dnsmos(Variant::Baseline, 1);
        assert!(calibrate(&g, &w, &[]).is_err());
    }

    #[test]
    fn quantize_model_validates_table() {
        let (g, w) = build_dnsmos(Variant::Bam, 6);
        let mut rng = Rng::seed_from_u64(11);
        let inputs = tiny_calib_inputs(&mut rng, 2);
        let refs: Vec<&TensorF32> = inputs.iter().collect();
        let mut qp = calibrate(&g, &w, &refs).unwrap();
        assert!(quantize_model(&g, &w, &qp, QuantPipeline::BamInt8).is_ok());
        qp.conv_out.pop();
        assert!(quantize_model(&g, &w, &qp, QuantPipeline::BamInt8).is_err());
    }

    #[test]
    fn qnt1_round_trips() {
        let (g, w) = build_dnsmos(Variant::Bam, 7);
        let mut rng = Rng::seed_from_u64(12);
        let inputs = tiny_calib_inputs(&mut rng, 2);
        let refs: Vec<&TensorF32> = inputs.iter().collect();
        let qp = calibrate(&g, &w, &refs).unwrap();
        let bytes = qp.to_qnt1_bytes();
        let back = ModelQuantParams::from_qnt1_bytes(&bytes).unwrap();
        assert_eq!(qp, back);
        assert!(ModelQuantParams::from_qnt1_bytes(&bytes[..bytes.len() - 2]).is_err());
    }
}
