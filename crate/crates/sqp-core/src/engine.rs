//! Mixed-precision inference engine.
//!
//! Binary activation maps live bit-packed; convolutions over them become
//! masked accumulations (add the weight wherever the input bit is set;
//! int8 weights accumulate in i32), 2x2 max pooling becomes word-parallel
//! OR, and global average pooling becomes popcount / area. Only the first
//! convolution sees a dense input (the spectrogram, fp32 or quantized u8);
//! everything after it flows through packed maps until the dense head.

mod bitops;
pub mod report;

pub use report::{benchmark, memory_report, multiply_count, BenchRow, BenchSummary, MemoryReport};

use crate::error::{Result, SqpError};
use crate::model::{
    self, ActivationKind, Mode, ModelGraph, PoolKind, WeightSet, KERNEL,
};
use crate::quant::{quantize_u8, ModelQuantParams, QuantPipeline, QuantizedModel};
use crate::tensor::{BitTensor, TensorF32, TensorI32, TensorU8};

// ---------------------------------------------------------------------------
// Packed maps
// ---------------------------------------------------------------------------

/// One bit-packed binary map per channel, uniform spatial shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedFeatureMap {
    channels: Vec<BitTensor>,
    h: usize,
    w: usize,
}

impl PackedFeatureMap {
    pub fn new(channels: Vec<BitTensor>) -> Result<Self> {
        let (h, w) = match channels.first() {
            Some(c) => (c.rows(), c.cols()),
            None => (0, 0),
        };
        for (i, c) in channels.iter().enumerate() {
            if c.rows() != h || c.cols() != w {
                return Err(SqpError::ShapeMismatch(format!(
                    "channel {i} is {}x{}, expected {h}x{w}",
                    c.rows(),
                    c.cols()
                )));
            }
        }
        Ok(PackedFeatureMap { channels, h, w })
    }

    pub fn channels(&self) -> &[BitTensor] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// Dense {0,1} view, CHW.
    pub fn unpack(&self) -> TensorF32 {
        let mut data = Vec::with_capacity(self.channels.len() * self.h * self.w);
        for c in &self.channels {
            data.extend_from_slice(crate::tensor::unpack_bitmap(c).data());
        }
        TensorF32::from_vec(&[self.channels.len(), self.h, self.w], data).unwrap()
    }

    pub fn padding_clean(&self) -> bool {
        self.channels.iter().all(|c| c.padding_clean())
    }
}

/// Pack the sign bits of an fp32 preactivation map: bit = (x >= 0).
pub fn threshold_pack(pre: &TensorF32) -> Result<PackedFeatureMap> {
    let &[c, h, w] = pre.shape() else {
        return Err(SqpError::ShapeMismatch(format!(
            "expected [c, h, w] preactivations, got {:?}",
            pre.shape()
        )));
    };
    let data = pre.data();
    let mut channels = Vec::with_capacity(c);
    for ci in 0..c {
        channels.push(pack_plane(&data[ci * h * w..(ci + 1) * h * w], h, w, |v| {
            v >= 0.0
        }));
    }
    PackedFeatureMap::new(channels)
}

/// Same comparison on integer accumulators: bit = (acc >= 0). Used by the
/// int8 pipeline so binarization never round-trips through floats.
pub fn threshold_pack_i32(pre: &TensorI32) -> Result<PackedFeatureMap> {
    let &[c, h, w] = pre.shape() else {
        return Err(SqpError::ShapeMismatch(format!(
            "expected [c, h, w] accumulators, got {:?}",
            pre.shape()
        )));
    };
    let data = pre.data();
    let mut channels = Vec::with_capacity(c);
    for ci in 0..c {
        channels.push(pack_plane(&data[ci * h * w..(ci + 1) * h * w], h, w, |v| {
            v >= 0
        }));
    }
    PackedFeatureMap::new(channels)
}

fn pack_plane<T: Copy>(plane: &[T], h: usize, w: usize, bit: impl Fn(T) -> bool) -> BitTensor {
    let mut out = BitTensor::zeros(&[h, w]);
    let wpr = out.words_per_row();
    let mut row_words = vec![0u64; wpr];
    for r in 0..h {
        row_words.fill(0);
        for (c, &v) in plane[r * w..(r + 1) * w].iter().enumerate() {
            if bit(v) {
                row_words[c / 64] |= 1u64 << (c % 64);
            }
        }
        out.set_row_words(r, &row_words);
    }
    out
}

// ---------------------------------------------------------------------------
// Packed convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvBackend {
    /// Per output row, add the weight wherever the shifted input bit is set.
    Masked,
    /// Decompose |weight| into bit planes and tally set bits with word-wide
    /// bit-sliced counters. Identical results, different cost profile.
    BitPlane,
}

/// Precomputed column-shifted rows for every channel: dir in {-1, 0, +1}.
struct ShiftedRows {
    data: Vec<u64>,
    wpr: usize,
    h: usize,
}

impl ShiftedRows {
    fn build(input: &PackedFeatureMap) -> Self {
        let wpr = input
            .channels
            .first()
            .map(|c| c.words_per_row())
            .unwrap_or(0);
        let h = input.h;
        let mut data = vec![0u64; input.channels.len() * h * 3 * wpr];
        for (ci, ch) in input.channels.iter().enumerate() {
            let tail = ch.tail_mask();
            for r in 0..h {
                let src = ch.row_words(r);
                for (d, dir) in [(0usize, -1i32), (1, 0), (2, 1)] {
                    let base = ((ci * h + r) * 3 + d) * wpr;
                    shift_into(src, &mut data[base..base + wpr], dir, tail);
                }
            }
        }
        ShiftedRows { data, wpr, h }
    }

    /// Row `r` of channel `ci`, pre-shifted for kernel column `dc` (0..3).
    #[inline]
    fn row(&self, ci: usize, r: usize, dc: usize) -> &[u64] {
        // dc = 0 reads column c-1  => shift by +1 => slot 2
        // dc = 1 reads column c    => slot 1
        // dc = 2 reads column c+1  => shift by -1 => slot 0
        let slot = 2 - dc;
        let base = ((ci * self.h + r) * 3 + slot) * self.wpr;
        &self.data[base..base + self.wpr]
    }
}

fn shift_into(src: &[u64], dst: &mut [u64], dir: i32, tail_mask: u64) {
    bitops::shift_row(src, dst, dir, tail_mask);
}

/// fp32 weights x packed bits -> fp32 preactivations.
///
/// Per output pixel the set-bit taps accumulate in (cin, dr, dc) order and
/// the bias lands last, mirroring the dense reference convolution, so on
/// binary inputs the two produce identical f32 sums.
pub fn conv_bam_f32(
    input: &PackedFeatureMap,
    kernel: &TensorF32,
    bias: &[f32],
) -> Result<TensorF32> {
    let (cout, cin) = conv_dims(input, kernel.shape(), bias.len())?;
    let (h, w) = (input.h, input.w);
    let shifted = ShiftedRows::build(input);
    let k = kernel.data();
    let mut out = vec![0.0f32; cout * h * w];
    for co in 0..cout {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        for r in 0..h {
            let acc = &mut plane[r * w..(r + 1) * w];
            for ci in 0..cin {
                let kbase = (co * cin + ci) * KERNEL * KERNEL;
                for dr in 0..KERNEL {
                    let ir = r + dr;
                    if ir < 1 || ir > h {
                        continue;
                    }
                    for dc in 0..KERNEL {
                        let wv = k[kbase + dr * KERNEL + dc];
                        if wv == 0.0 {
                            continue;
                        }
                        for (kw, &word) in shifted.row(ci, ir - 1, dc).iter().enumerate() {
                            let mut bits = word;
                            while bits != 0 {
                                let j = bits.trailing_zeros() as usize;
                                acc[kw * 64 + j] += wv;
                                bits &= bits - 1;
                            }
                        }
                    }
                }
            }
            let b = bias[co];
            for a in acc.iter_mut() {
                *a += b;
            }
        }
    }
    TensorF32::from_vec(&[cout, h, w], out)
}

/// int8 weights x packed bits -> i32 accumulators
/// (sum of (q - zero_point) over set taps, plus the i32 bias).
///
/// Accumulators cannot overflow: |acc| <= 9*cin*127 + |bias|, far below
/// i32 range for every layer of this graph.
pub fn conv_bam_i8(
    input: &PackedFeatureMap,
    kernel_q: &crate::tensor::TensorI8,
    w_zero_points: &[i32],
    bias_q: &[i32],
    backend: ConvBackend,
) -> Result<TensorI32> {
    let (cout, cin) = conv_dims(input, kernel_q.shape(), bias_q.len())?;
    if w_zero_points.len() != cout {
        return Err(SqpError::ShapeMismatch(format!(
            "{} weight zero points for {cout} output channels",
            w_zero_points.len()
        )));
    }
    let (h, w) = (input.h, input.w);
    let shifted = ShiftedRows::build(input);
    let k = kernel_q.data();
    let mut out = vec![0i32; cout * h * w];
    match backend {
        ConvBackend::Masked => {
            for co in 0..cout {
                let zp = w_zero_points[co];
                let plane = &mut out[co * h * w..(co + 1) * h * w];
                for r in 0..h {
                    let acc = &mut plane[r * w..(r + 1) * w];
                    for ci in 0..cin {
                        let kbase = (co * cin + ci) * KERNEL * KERNEL;
                        for dr in 0..KERNEL {
                            let ir = r + dr;
                            if ir < 1 || ir > h {
                                continue;
                            }
                            for dc in 0..KERNEL {
                                let contrib = k[kbase + dr * KERNEL + dc] as i32 - zp;
                                if contrib == 0 {
                                    continue;
                                }
                                for (kw, &word) in
                                    shifted.row(ci, ir - 1, dc).iter().enumerate()
                                {
                                    let mut bits = word;
                                    while bits != 0 {
                                        let j = bits.trailing_zeros() as usize;
                                        acc[kw * 64 + j] += contrib;
                                        bits &= bits - 1;
                                    }
                                }
                            }
                        }
                    }
                    let b = bias_q[co];
                    for a in acc.iter_mut() {
                        *a += b;
                    }
                }
            }
        }
        ConvBackend::BitPlane => {
            conv_bam_i8_bitplane(input, &shifted, k, w_zero_points, bias_q, cout, cin, &mut out);
        }
    }
    TensorI32::from_vec(&[cout, h, w], out)
}

/// Bit-plane backend: for each weight-magnitude bit plane, tally the set
/// input taps per column with bit-sliced counters, then recombine as
/// acc = sum_p 2^p * (pos_count_p - neg_count_p).
#[allow(clippy::too_many_arguments)]
fn conv_bam_i8_bitplane(
    input: &PackedFeatureMap,
    shifted: &ShiftedRows,
    k: &[i8],
    w_zero_points: &[i32],
    bias_q: &[i32],
    cout: usize,
    cin: usize,
    out: &mut [i32],
) {
    let (h, w) = (input.h, input.w);
    let wpr = shifted.wpr;
    // Tap count per column <= 9*cin <= 288 < 2^9.
    const COUNT_PLANES: usize = 9;
    const MAG_PLANES: usize = 7;
    let mut pos: Vec<Vec<Vec<u64>>> =
        vec![vec![vec![0u64; wpr]; COUNT_PLANES]; MAG_PLANES];
    let mut neg = pos.clone();
    let mut tap_count: Vec<Vec<u64>> = vec![vec![0u64; wpr]; COUNT_PLANES];

    for co in 0..cout {
        let zp = w_zero_points[co];
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        for r in 0..h {
            for p in pos.iter_mut().chain(neg.iter_mut()) {
                for q in p.iter_mut() {
                    q.fill(0);
                }
            }
            if zp != 0 {
                for q in tap_count.iter_mut() {
                    q.fill(0);
                }
            }
            for ci in 0..cin {
                let kbase = (co * cin + ci) * KERNEL * KERNEL;
                for dr in 0..KERNEL {
                    let ir = r + dr;
                    if ir < 1 || ir > h {
                        continue;
                    }
                    for dc in 0..KERNEL {
                        let wq = k[kbase + dr * KERNEL + dc] as i32;
                        let row = shifted.row(ci, ir - 1, dc);
                        if zp != 0 {
                            bitops::bitslice_add(&mut tap_count, row);
                        }
                        if wq == 0 {
                            continue;
                        }
                        let mag = wq.unsigned_abs();
                        let sink = if wq > 0 { &mut pos } else { &mut neg };
                        for (p, planes) in sink.iter_mut().enumerate() {
                            if (mag >> p) & 1 == 1 {
                                bitops::bitslice_add(planes, row);
                            }
                        }
                    }
                }
            }
            let acc = &mut plane[r * w..(r + 1) * w];
            let b = bias_q[co];
            for a in acc.iter_mut() {
                *a = b;
            }
            for p in 0..MAG_PLANES {
                for q in 0..COUNT_PLANES {
                    let unit = 1i32 << (p + q);
                    for (kw, (&pw, &nw)) in pos[p][q].iter().zip(&neg[p][q]).enumerate() {
                        let mut bits = pw;
                        while bits != 0 {
                            let j = bits.trailing_zeros() as usize;
                            acc[kw * 64 + j] += unit;
                            bits &= bits - 1;
                        }
                        let mut bits = nw;
                        while bits != 0 {
                            let j = bits.trailing_zeros() as usize;
                            acc[kw * 64 + j] -= unit;
                            bits &= bits - 1;
                        }
                    }
                }
            }
            if zp != 0 {
                for q in 0..COUNT_PLANES {
                    let unit = (1i32 << q) * zp;
                    for (kw, &word) in tap_count[q].iter().enumerate() {
                        let mut bits = word;
                        while bits != 0 {
                            let j = bits.trailing_zeros() as usize;
                            acc[kw * 64 + j] -= unit;
                            bits &= bits - 1;
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(
    input: &PackedFeatureMap,
    kshape: &[usize],
    bias_len: usize,
) -> Result<(usize, usize)> {
    let &[cout, cin, kh, kw] = kshape else {
        return Err(SqpError::ShapeMismatch(format!(
            "kernel shape {kshape:?}, want [cout, cin, 3, 3]"
        )));
    };
    if kh != KERNEL || kw != KERNEL {
        return Err(SqpError::ShapeMismatch("only 3x3 kernels supported".into()));
    }
    if cin != input.n_channels() {
        return Err(SqpError::ShapeMismatch(format!(
            "kernel expects {cin} input channels, map has {}",
            input.n_channels()
        )));
    }
    if bias_len != cout {
        return Err(SqpError::ShapeMismatch(format!(
            "{bias_len} biases for {cout} output channels"
        )));
    }
    Ok((cout, cin))
}

/// Dense u8-input convolution with i32 accumulation: the first layer of
/// the int8 pipelines (and every layer of the conventional int8 engine).
pub fn conv3x3_same_u8(
    input: &TensorU8,
    zp_in: i32,
    kernel_q: &crate::tensor::TensorI8,
    bias_q: &[i32],
) -> Result<TensorI32> {
    let (cin_map, h, w) = match *input.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        ref s => {
            return Err(SqpError::ShapeMismatch(format!(
                "expected [c, h, w] u8 input, got {s:?}"
            )))
        }
    };
    let &[cout, cin, _, _] = kernel_q.shape() else {
        return Err(SqpError::ShapeMismatch("bad kernel shape".into()));
    };
    if cin != cin_map {
        return Err(SqpError::ShapeMismatch(format!(
            "kernel expects {cin} channels, input has {cin_map}"
        )));
    }
    // Centered input, i32.
    let xi: Vec<i32> = input.data().iter().map(|&q| q as i32 - zp_in).collect();
    let k = kernel_q.data();
    let mut out = vec![0i32; cout * h * w];
    for co in 0..cout {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        for ci in 0..cin {
            let in_plane = &xi[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * cin + ci) * KERNEL * KERNEL;
            for dr in 0..KERNEL {
                for r in 0..h {
                    let ir = r + dr;
                    if ir < 1 || ir > h {
                        continue;
                    }
                    let in_row = &in_plane[(ir - 1) * w..ir * w];
                    let out_row = &mut plane[r * w..(r + 1) * w];
                    for dc in 0..KERNEL {
                        let kv = k[kbase + dr * KERNEL + dc] as i32;
                        if kv == 0 {
                            continue;
                        }
                        match dc {
                            0 => {
                                for (o, &i) in out_row[1..].iter_mut().zip(&in_row[..w - 1]) {
                                    *o += kv * i;
                                }
                            }
                            1 => {
                                for (o, &i) in out_row.iter_mut().zip(in_row) {
                                    *o += kv * i;
                                }
                            }
                            _ => {
                                for (o, &i) in out_row[..w - 1].iter_mut().zip(&in_row[1..]) {
                                    *o += kv * i;
                                }
                            }
                        }
                    }
                }
            }
        }
        let b = bias_q[co];
        for o in plane.iter_mut() {
            *o += b;
        }
    }
    TensorI32::from_vec(&[cout, h, w], out)
}

// ---------------------------------------------------------------------------
// Packed pooling
// ---------------------------------------------------------------------------

/// 2x2 max pool on binary maps = 2x2 OR, word-parallel, floor on odd dims.
pub fn maxpool_or(input: &PackedFeatureMap) -> PackedFeatureMap {
    let oh = input.h / 2;
    let ow = input.w / 2;
    let mut channels = Vec::with_capacity(input.channels.len());
    for ch in &input.channels {
        let mut out = BitTensor::zeros(&[oh, ow]);
        let out_wpr = out.words_per_row();
        let mut merged = vec![0u64; ch.words_per_row()];
        let mut row = vec![0u64; out_wpr];
        for r in 0..oh {
            let a = ch.row_words(2 * r);
            let b = ch.row_words(2 * r + 1);
            for (m, (&x, &y)) in merged.iter_mut().zip(a.iter().zip(b)) {
                *m = x | y;
            }
            bitops::or_pairs_row(&merged, &mut row);
            out.set_row_words(r, &row);
        }
        channels.push(out);
    }
    PackedFeatureMap::new(channels).expect("uniform shapes by construction")
}

/// Global average pool: popcount / area per channel.
pub fn global_avg(input: &PackedFeatureMap) -> Vec<f32> {
    let area = (input.h * input.w) as f32;
    input
        .channels
        .iter()
        .map(|c| {
            if area == 0.0 {
                0.0
            } else {
                c.count_ones() as f32 / area
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Engines
// ---------------------------------------------------------------------------

pub trait InferenceEngine: Sync {
    fn name(&self) -> String;
    fn infer_one(&self, x: &TensorF32) -> Result<f32>;
}

/// Plain fp32 forward of the model graph (the dense reference).
pub struct Fp32Reference {
    pub graph: ModelGraph,
    pub weights: WeightSet,
}

impl InferenceEngine for Fp32Reference {
    fn name(&self) -> String {
        format!("fp32-{}", self.graph.variant.as_str())
    }
    fn infer_one(&self, x: &TensorF32) -> Result<f32> {
        model::forward(&self.graph, &self.weights, x, Mode::Eval, None).map(|(p, _)| p)
    }
}

/// The packed binary-activation engine, fp32 or int8 weights.
pub struct BamEngine {
    graph: ModelGraph,
    /// Effective fp32 weights (sign-folded when the graph was trained in
    /// binary-weight mode); also the dense head of the int8 pipeline
    /// unless `int8_head` is set.
    weights: WeightSet,
    quantized: Option<QuantizedModel>,
    backend: ConvBackend,
    int8_head: bool,
}

fn validate_bam_graph(graph: &ModelGraph) -> Result<()> {
    for (i, c) in graph.convs.iter().enumerate() {
        if c.act != ActivationKind::Heaviside {
            return Err(SqpError::InvalidArgument(format!(
                "conv{} activation is {:?}; the packed engine needs Heaviside",
                i + 1,
                c.act
            )));
        }
    }
    if graph.final_pool != PoolKind::GlobalAvg {
        return Err(SqpError::InvalidArgument(
            "binarized configurations must use global average pooling".into(),
        ));
    }
    Ok(())
}

impl BamEngine {
    /// fp32 weights, packed activations.
    pub fn fp32(graph: &ModelGraph, weights: &WeightSet) -> Result<Self> {
        validate_bam_graph(graph)?;
        let mut g = graph.clone();
        let mut w = weights.clone();
        for (i, spec) in g.convs.iter_mut().enumerate() {
            if spec.binary_weights {
                w.conv_kernels[i] = model::effective_kernel(spec, &w.conv_kernels[i]);
                spec.binary_weights = false;
            }
        }
        Ok(BamEngine {
            graph: g,
            weights: w,
            quantized: None,
            backend: ConvBackend::Masked,
            int8_head: false,
        })
    }

    /// int8 per-channel weights, packed activations, integer thresholds.
    pub fn int8(
        graph: &ModelGraph,
        weights: &WeightSet,
        params: &ModelQuantParams,
        backend: ConvBackend,
        int8_head: bool,
    ) -> Result<Self> {
        validate_bam_graph(graph)?;
        if graph.convs.iter().any(|c| c.binary_weights) {
            return Err(SqpError::InvalidArgument(
                "int8 quantization of binary-weight layers is not meaningful".into(),
            ));
        }
        let qm = crate::quant::quantize_model(graph, weights, params, QuantPipeline::BamInt8)?;
        Ok(BamEngine {
            graph: graph.clone(),
            weights: weights.clone(),
            quantized: Some(qm),
            backend,
            int8_head,
        })
    }

    pub fn describe(&self) -> String {
        match (&self.quantized, self.backend, self.int8_head) {
            (None, _, _) => "packed-fp32".to_string(),
            (Some(_), ConvBackend::Masked, false) => "packed-int8".to_string(),
            (Some(_), ConvBackend::BitPlane, false) => "packed-int8-bitplane".to_string(),
            (Some(_), ConvBackend::Masked, true) => "packed-int8+int8head".to_string(),
            (Some(_), ConvBackend::BitPlane, true) => "packed-int8-bitplane+int8head".to_string(),
        }
    }

    pub fn is_int8(&self) -> bool {
        self.quantized.is_some()
    }

    /// Run one inference, optionally collecting the per-layer binary maps
    /// (post-threshold, pre-pool).
    pub fn run(
        &self,
        x: &TensorF32,
        mut maps_out: Option<&mut Vec<PackedFeatureMap>>,
    ) -> Result<f32> {
        let &[h, w] = x.shape() else {
            return Err(SqpError::ShapeMismatch(format!(
                "expected [h, w] spectrogram, got {:?}",
                x.shape()
            )));
        };
        x.check_finite("input")?;
        if h == 0 || w == 0 {
            return Err(SqpError::ShapeMismatch("empty input".into()));
        }

        let mut packed: PackedFeatureMap;
        match &self.quantized {
            None => {
                // Dense fp32 first conv on the spectrogram.
                let spec0 = &self.graph.convs[0];
                let mut pre = vec![0.0f32; spec0.cout * h * w];
                model::conv3x3_same(
                    x.data(),
                    h,
                    w,
                    1,
                    self.weights.conv_kernels[0].data(),
                    self.weights.conv_biases[0].data(),
                    spec0.cout,
                    &mut pre,
                );
                let pre = TensorF32::from_vec(&[spec0.cout, h, w], pre)?;
                packed = threshold_pack(&pre)?;
                if let Some(m) = maps_out.as_deref_mut() {
                    m.push(packed.clone());
                }
                if spec0.pool_after {
                    packed = maxpool_or(&packed);
                }
                for i in 1..self.graph.convs.len() {
                    let spec = &self.graph.convs[i];
                    let pre = conv_bam_f32(
                        &packed,
                        &self.weights.conv_kernels[i],
                        self.weights.conv_biases[i].data(),
                    )?;
                    packed = threshold_pack(&pre)?;
                    if let Some(m) = maps_out.as_deref_mut() {
                        m.push(packed.clone());
                    }
                    if spec.pool_after {
                        packed = maxpool_or(&packed);
                    }
                }
            }
            Some(qm) => {
                // Quantized input, integer accumulation, integer thresholds.
                let qx = quantize_u8(x, &qm.params.input);
                let acc = conv3x3_same_u8(
                    &qx,
                    qm.params.input.zero_point,
                    &qm.convs[0].weights_q,
                    &qm.convs[0].bias_q,
                )?;
                packed = threshold_pack_i32(&acc)?;
                if let Some(m) = maps_out.as_deref_mut() {
                    m.push(packed.clone());
                }
                if self.graph.convs[0].pool_after {
                    packed = maxpool_or(&packed);
                }
                for i in 1..self.graph.convs.len() {
                    let spec = &self.graph.convs[i];
                    let ql = &qm.convs[i];
                    let zps: Vec<i32> = ql.w_qparams.iter().map(|q| q.zero_point).collect();
                    let acc = conv_bam_i8(
                        &packed,
                        &ql.weights_q,
                        &zps,
                        &ql.bias_q,
                        self.backend,
                    )?;
                    packed = threshold_pack_i32(&acc)?;
                    if let Some(m) = maps_out.as_deref_mut() {
                        m.push(packed.clone());
                    }
                    if spec.pool_after {
                        packed = maxpool_or(&packed);
                    }
                }
            }
        }

        let pooled = global_avg(&packed);
        if self.int8_head {
            let qm = self.quantized.as_ref().expect("int8 head implies int8 mode");
            Ok(dense_head_int8(qm, &pooled))
        } else {
            Ok(dense_head_f32(&self.graph, &self.weights, &pooled))
        }
    }

    /// The binary activation maps of each conv layer for one input.
    pub fn binary_maps(&self, x: &TensorF32) -> Result<Vec<PackedFeatureMap>> {
        let mut maps = Vec::with_capacity(self.graph.convs.len());
        self.run(x, Some(&mut maps))?;
        Ok(maps)
    }
}

impl InferenceEngine for BamEngine {
    fn name(&self) -> String {
        self.describe()
    }
    fn infer_one(&self, x: &TensorF32) -> Result<f32> {
        self.run(x, None)
    }
}

/// fp32 dense head, identical arithmetic to the model-graph forward.
fn dense_head_f32(graph: &ModelGraph, weights: &WeightSet, pooled: &[f32]) -> f32 {
    let mut cur = pooled.to_vec();
    for (li, &(din, dout)) in graph.dense.iter().enumerate() {
        let wmat = weights.dense_weights[li].data();
        let bias = weights.dense_biases[li].data();
        let mut next = vec![0.0f32; dout];
        for (o, nv) in next.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (&wv, &xv) in wmat[o * din..(o + 1) * din].iter().zip(&cur) {
                acc += wv * xv;
            }
            *nv = acc + bias[o];
            if li + 1 < graph.dense.len() && *nv < 0.0 {
                *nv = 0.0;
            }
        }
        cur = next;
    }
    cur[0]
}

/// int8 dense head: quantize the pooled vector, integer accumulate, requant
/// between layers, dequantize the final scalar.
fn dense_head_int8(qm: &QuantizedModel, pooled: &[f32]) -> f32 {
    let in_qp = qm.params.pool_out;
    let mut q_in: Vec<i32> = pooled.iter().map(|&v| in_qp.quantize_value(v)).collect();
    let mut zp_in = in_qp.zero_point;
    let mut s_in = in_qp.scale as f64;
    let n_dense = qm.dense.len();
    for li in 0..n_dense {
        let ql = &qm.dense[li];
        let dout = ql.bias_q.len();
        let din = q_in.len();
        let kq = ql.weights_q.data();
        let last = li + 1 == n_dense;
        if last {
            let mut acc = ql.bias_q[0] as i64;
            for (i, &q) in q_in.iter().enumerate() {
                acc += kq[i] as i64 * (q - zp_in) as i64;
            }
            return (acc as f64 * s_in * ql.w_qparams[0].scale as f64) as f32;
        }
        let out_qp = qm.params.dense_out[li];
        let mut q_out = vec![0i32; dout];
        for (o, qo) in q_out.iter_mut().enumerate() {
            let mut acc = ql.bias_q[o] as i64;
            for (i, &q) in q_in.iter().enumerate() {
                acc += kq[o * din + i] as i64 * (q - zp_in) as i64;
            }
            // ReLU on the integer accumulator, then requantize.
            let acc = acc.max(0);
            let m = s_in * ql.w_qparams[o].scale as f64 / out_qp.scale as f64;
            let q = (acc as f64 * m).round_ties_even() as i64 + out_qp.zero_point as i64;
            *qo = q.clamp(out_qp.qmin as i64, out_qp.qmax as i64) as i32;
        }
        q_in = q_out;
        zp_in = out_qp.zero_point;
        s_in = out_qp.scale as f64;
    }
    unreachable!("last dense layer returns directly")
}

/// Conventional whole-model int8 engine: u8 activation tensors everywhere
/// (binary maps, when present, ride the u8 grid), integer convolutions
/// with requantization between layers.
pub struct Int8DenseEngine {
    graph: ModelGraph,
    qm: QuantizedModel,
}

impl Int8DenseEngine {
    pub fn new(graph: &ModelGraph, weights: &WeightSet, params: &ModelQuantParams) -> Result<Self> {
        if graph.convs.iter().any(|c| c.binary_weights) {
            return Err(SqpError::InvalidArgument(
                "int8 quantization of binary-weight layers is not meaningful".into(),
            ));
        }
        let qm = crate::quant::quantize_model(graph, weights, params, QuantPipeline::DenseInt8)?;
        Ok(Int8DenseEngine {
            graph: graph.clone(),
            qm,
        })
    }
}

impl InferenceEngine for Int8DenseEngine {
    fn name(&self) -> String {
        format!("int8-dense-{}", self.graph.variant.as_str())
    }

    fn infer_one(&self, x: &TensorF32) -> Result<f32> {
        let &[h0, w0] = x.shape() else {
            return Err(SqpError::ShapeMismatch(format!(
                "expected [h, w] spectrogram, got {:?}",
                x.shape()
            )));
        };
        x.check_finite("input")?;
        let mut q_cur = quantize_u8(x, &self.qm.params.input);
        let mut zp_in = self.qm.params.input.zero_point;
        let (mut h, mut w) = (h0, w0);

        for (i, spec) in self.graph.convs.iter().enumerate() {
            let ql = &self.qm.convs[i];
            let acc = conv3x3_same_u8(&q_cur, zp_in, &ql.weights_q, &ql.bias_q)?;
            let out_qp = self.qm.params.conv_out[i];
            let mut q_data = vec![0u8; spec.cout * h * w];
            match spec.act {
                ActivationKind::ReLU => {
                    for co in 0..spec.cout {
                        let m = ql.input_scale as f64 * ql.w_qparams[co].scale as f64
                            / out_qp.scale as f64;
                        let plane = &acc.data()[co * h * w..(co + 1) * h * w];
                        let qp_out = &mut q_data[co * h * w..(co + 1) * h * w];
                        for (o, &a) in qp_out.iter_mut().zip(plane) {
                            let a = a.max(0);
                            let q = (a as f64 * m).round_ties_even() as i64
                                + out_qp.zero_point as i64;
                            *o = q.clamp(0, 255) as u8;
                        }
                    }
                }
                ActivationKind::Heaviside => {
                    // 1-bit activations wastefully held in u8 tensors.
                    let q_one = out_qp.quantize_value(1.0) as u8;
                    let q_zero = out_qp.quantize_value(0.0) as u8;
                    for (o, &a) in q_data.iter_mut().zip(acc.data()) {
                        *o = if a >= 0 { q_one } else { q_zero };
                    }
                }
                ActivationKind::RelaxedFastSigmoid(_) => {
                    return Err(SqpError::InvalidArgument(
                        "relaxed activation is a training-time tool; quantized inference \
                         supports ReLU and Heaviside"
                            .into(),
                    ))
                }
            }
            q_cur = TensorU8::from_vec(&[spec.cout, h, w], q_data)?;
            zp_in = out_qp.zero_point;
            if spec.pool_after {
                let (oh, ow) = (h / 2, w / 2);
                let mut pooled = vec![0u8; spec.cout * oh * ow];
                for c in 0..spec.cout {
                    let plane = &q_cur.data()[c * h * w..(c + 1) * h * w];
                    for r in 0..oh {
                        for col in 0..ow {
                            let mut m = 0u8;
                            for dr in 0..2 {
                                for dc in 0..2 {
                                    m = m.max(plane[(2 * r + dr) * w + 2 * col + dc]);
                                }
                            }
                            pooled[c * oh * ow + r * ow + col] = m;
                        }
                    }
                }
                q_cur = TensorU8::from_vec(&[spec.cout, oh, ow], pooled)?;
                h = oh;
                w = ow;
            }
        }

        // Global pool on the last conv grid, requantized onto the pool grid.
        let channels = self.graph.convs.last().unwrap().cout;
        let area = h * w;
        let conv_qp = self.qm.params.conv_out[self.graph.convs.len() - 1];
        let pooled_f: Vec<f32> = match self.graph.final_pool {
            PoolKind::GlobalMax => (0..channels)
                .map(|c| {
                    let m = q_cur.data()[c * area..(c + 1) * area]
                        .iter()
                        .copied()
                        .max()
                        .unwrap_or(0);
                    conv_qp.dequantize_value(m as i32)
                })
                .collect(),
            PoolKind::GlobalAvg => (0..channels)
                .map(|c| {
                    let sum: u64 = q_cur.data()[c * area..(c + 1) * area]
                        .iter()
                        .map(|&q| q as u64)
                        .sum();
                    let mean_q = sum as f64 / area as f64;
                    ((mean_q - conv_qp.zero_point as f64) * conv_qp.scale as f64) as f32
                })
                .collect(),
            PoolKind::MaxPool2x2 => {
                return Err(SqpError::InvalidArgument("final pool must be global".into()))
            }
        };
        Ok(dense_head_int8(&self.qm, &pooled_f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_dnsmos, Variant};
    use crate::rng::Rng;
    use crate::tensor::pack_bitmap;

    fn random_packed(rng: &mut Rng, c: usize, h: usize, w: usize, density: f64) -> PackedFeatureMap {
        let channels = (0..c)
            .map(|_| {
                let t = TensorF32::from_vec(
                    &[h, w],
                    (0..h * w)
                        .map(|_| if rng.bernoulli(density) { 1.0 } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                pack_bitmap(&t).unwrap()
            })
            .collect();
        PackedFeatureMap::new(channels).unwrap()
    }

    fn random_kernel_f32(rng: &mut Rng, cout: usize, cin: usize) -> TensorF32 {
        TensorF32::from_vec(
            &[cout, cin, 3, 3],
            (0..cout * cin * 9).map(|_| rng.range_f32(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    /// Independent oracle: dense 3x3 conv on the unpacked {0,1} map.
    fn naive_conv_on_bits(
        input: &PackedFeatureMap,
        kernel: &[f32],
        bias: &[f32],
        cout: usize,
    ) -> Vec<f32> {
        let (c, h, w) = (input.n_channels(), input.h(), input.w());
        let dense = input.unpack();
        let x = dense.data();
        let mut out = vec![0.0f32; cout * h * w];
        for co in 0..cout {
            for r in 0..h {
                for col in 0..w {
                    let mut acc = 0.0f32;
                    for ci in 0..c {
                        for dr in 0..3usize {
                            for dc in 0..3usize {
                                let rr = r as isize + dr as isize - 1;
                                let cc = col as isize + dc as isize - 1;
                                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                    continue;
                                }
                                if x[ci * h * w + rr as usize * w + cc as usize] == 1.0 {
                                    acc += kernel[((co * c + ci) * 3 + dr) * 3 + dc];
                                }
                            }
                        }
                    }
                    out[co * h * w + r * w + col] = acc + bias[co];
                }
            }
        }
        out
    }

    #[test]
    fn conv_bam_zero_input_gives_bias() {
        let input = PackedFeatureMap::new(vec![BitTensor::zeros(&[6, 9]); 2]).unwrap();
        let mut rng = Rng::seed_from_u64(1);
        let k = random_kernel_f32(&mut rng, 3, 2);
        let bias = [0.5f32, -1.0, 2.0];
        let out = conv_bam_f32(&input, &k, &bias).unwrap();
        for co in 0..3 {
            for &v in &out.data()[co * 54..(co + 1) * 54] {
                assert_eq!(v, bias[co]);
            }
        }
    }

    #[test]
    fn conv_bam_all_ones_interior_is_full_kernel_sum() {
        let ones = TensorF32::full(&[7, 10], 1.0);
        let ch = pack_bitmap(&ones).unwrap();
        let input = PackedFeatureMap::new(vec![ch]).unwrap();
        let mut rng = Rng::seed_from_u64(2);
        let k = random_kernel_f32(&mut rng, 1, 1);
        let bias = [0.25f32];
        let out = conv_bam_f32(&input, &k, &bias).unwrap();
        let ksum: f32 = k.data().iter().sum();
        // interior pixels see every tap
        for r in 1..6 {
            for c in 1..9 {
                let v = out.data()[r * 10 + c];
                assert!((v - (ksum + 0.25)).abs() < 1e-5, "({r},{c}): {v}");
            }
        }
    }

    #[test]
    fn conv_bam_f32_matches_dense_oracle() {
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (c, h, w) = (1 + rng.below(4), 3 + rng.below(12), 3 + rng.below(70));
            let cout = 1 + rng.below(5);
            let input = random_packed(&mut rng, c, h, w, 0.4);
            let k = random_kernel_f32(&mut rng, cout, c);
            let bias: Vec<f32> = (0..cout).map(|_| rng.range_f32(-1.0, 1.0)).collect();
            let got = conv_bam_f32(&input, &k, &bias).unwrap();
            let want = naive_conv_on_bits(&input, k.data(), &bias, cout);
            for (i, (&g, &n)) in got.data().iter().zip(&want).enumerate() {
                assert!((g - n).abs() <= 1e-5, "elem {i}: {g} vs {n}");
            }
        }
    }

    #[test]
    fn conv_bam_i8_masked_and_bitplane_agree_exactly() {
        let mut rng = Rng::seed_from_u64(4);
        for case in 0..15 {
            let (c, h, w) = (1 + rng.below(3), 2 + rng.below(10), 2 + rng.below(80));
            let cout = 1 + rng.below(4);
            let input = random_packed(&mut rng, c, h, w, 0.5);
            let k = crate::tensor::TensorI8::from_vec(
                &[cout, c, 3, 3],
                (0..cout * c * 9)
                    .map(|_| (rng.below(255) as i32 - 127) as i8)
                    .collect(),
            )
            .unwrap();
            let bias: Vec<i32> = (0..cout).map(|_| rng.below(2000) as i32 - 1000).collect();
            let zps = vec![0i32; cout];
            let a = conv_bam_i8(&input, &k, &zps, &bias, ConvBackend::Masked).unwrap();
            let b = conv_bam_i8(&input, &k, &zps, &bias, ConvBackend::BitPlane).unwrap();
            assert_eq!(a, b, "case {case}");
            // and with a nonzero weight zero point
            let zps: Vec<i32> = (0..cout).map(|_| rng.below(7) as i32 - 3).collect();
            let a = conv_bam_i8(&input, &k, &zps, &bias, ConvBackend::Masked).unwrap();
            let b = conv_bam_i8(&input, &k, &zps, &bias, ConvBackend::BitPlane).unwrap();
            assert_eq!(a, b, "case {case} with zero points");
        }
    }

    #[test]
    fn conv_bam_i8_matches_integer_oracle() {
        let mut rng = Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (c, h, w) = (1 + rng.below(3), 3 + rng.below(8), 3 + rng.below(40));
            let cout = 1 + rng.below(3);
            let input = random_packed(&mut rng, c, h, w, 0.5);
            let k = crate::tensor::TensorI8::from_vec(
                &[cout, c, 3, 3],
                (0..cout * c * 9)
                    .map(|_| (rng.below(255) as i32 - 127) as i8)
                    .collect(),
            )
            .unwrap();
            let bias: Vec<i32> = (0..cout).map(|_| rng.below(100) as i32 - 50).collect();
            let zps = vec![0i32; cout];
            let got = conv_bam_i8(&input, &k, &zps, &bias, ConvBackend::Masked).unwrap();
            // integer oracle over the unpacked map
            let dense = input.unpack();
            for co in 0..cout {
                for r in 0..h {
                    for col in 0..w {
                        let mut acc = bias[co];
                        for ci in 0..c {
                            for dr in 0..3usize {
                                for dc in 0..3usize {
                                    let rr = r as isize + dr as isize - 1;
                                    let cc = col as isize + dc as isize - 1;
                                    if rr < 0
                                        || cc < 0
                                        || rr >= h as isize
                                        || cc >= w as isize
                                    {
                                        continue;
                                    }
                                    if dense.data()[ci * h * w + rr as usize * w + cc as usize]
                                        == 1.0
                                    {
                                        acc += k.data()[((co * c + ci) * 3 + dr) * 3 + dc] as i32;
                                    }
                                }
                            }
                        }
                        assert_eq!(got.data()[co * h * w + r * w + col], acc);
                    }
                }
            }
        }
    }

    #[test]
    fn threshold_pack_conventions() {
        let pre = TensorF32::from_vec(&[1, 2, 3], vec![0.0, -0.0, -0.5, 1.5, f32::MIN_POSITIVE, -1e-20])
            .unwrap();
        let p = threshold_pack(&pre).unwrap();
        let bits = p.unpack();
        // x = 0 maps to 1 (and so does -0.0)
        assert_eq!(bits.data(), &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0]);

        let neg = TensorF32::full(&[2, 3, 3], -1.0);
        let p = threshold_pack(&neg).unwrap();
        assert_eq!(p.unpack().data().iter().sum::<f32>(), 0.0);
    }

    #[test]
    fn threshold_pack_matches_heaviside_then_pack() {
        let mut rng = Rng::seed_from_u64(6);
        let pre = TensorF32::from_vec(
            &[3, 9, 17],
            (0..3 * 9 * 17).map(|_| rng.range_f32(-2.0, 2.0)).collect(),
        )
        .unwrap();
        let fast = threshold_pack(&pre).unwrap();
        // reference path: heaviside to {0,1} then pack_bitmap per channel
        for c in 0..3 {
            let plane = TensorF32::from_vec(
                &[9, 17],
                pre.data()[c * 153..(c + 1) * 153]
                    .iter()
                    .map(|&v| crate::model::heaviside(v))
                    .collect(),
            )
            .unwrap();
            let want = pack_bitmap(&plane).unwrap();
            assert_eq!(fast.channels()[c], want);
        }
    }

    #[test]
    fn or_pool_equals_unpack_maxpool_pack() {
        let mut rng = Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (c, h, w) = (1 + rng.below(3), 2 + rng.below(13), 2 + rng.below(130));
            let input = random_packed(&mut rng, c, h, w, 0.3);
            let pooled = maxpool_or(&input);
            assert_eq!((pooled.h(), pooled.w()), (h / 2, w / 2));
            assert!(pooled.padding_clean());
            let dense = input.unpack();
            let (want, _, oh, ow) = crate::model::maxpool2x2(dense.data(), h, w, c);
            let got = pooled.unpack();
            assert_eq!(got.shape(), &[c, oh, ow]);
            assert_eq!(got.data(), &want[..]);
        }
    }

    #[test]
    fn or_pool_shape_449x120_to_224x60() {
        let input = PackedFeatureMap::new(vec![BitTensor::zeros(&[449, 120]); 1]).unwrap();
        let pooled = maxpool_or(&input);
        assert_eq!((pooled.h(), pooled.w()), (224, 60));
    }

    #[test]
    fn global_avg_exact() {
        let mut rng = Rng::seed_from_u64(8);
        let input = random_packed(&mut rng, 4, 21, 37, 0.37);
        let avgs = global_avg(&input);
        let dense = input.unpack();
        for (c, &got) in avgs.iter().enumerate() {
            let plane = &dense.data()[c * 21 * 37..(c + 1) * 21 * 37];
            let mean = plane.iter().sum::<f32>() / (21.0 * 37.0);
            assert_eq!(got, mean, "channel {c}");
        }
        // all ones / empty
        let ones = PackedFeatureMap::new(vec![pack_bitmap(&TensorF32::full(&[5, 5], 1.0)).unwrap()])
            .unwrap();
        assert_eq!(global_avg(&ones), vec![1.0]);
        let none = PackedFeatureMap::new(vec![BitTensor::zeros(&[5, 5])]).unwrap();
        assert_eq!(global_avg(&none), vec![0.0]);
    }

    #[test]
    fn fp32_engine_equals_bam_forward_exactly() {
        let (g, w) = build_dnsmos(Variant::Bam, 31);
        let engine = BamEngine::fp32(&g, &w).unwrap();
        let mut rng = Rng::seed_from_u64(32);
        for _ in 0..5 {
            let x = TensorF32::from_vec(
                &[24, 20],
                (0..24 * 20).map(|_| rng.range_f32(-2.0, 2.0)).collect(),
            )
            .unwrap();
            let (want, _) = model::forward(&g, &w, &x, Mode::Eval, None).unwrap();
            let got = engine.infer_one(&x).unwrap();
            assert!((got - want).abs() <= 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn engine_rejects_non_bam_graph() {
        let (g, w) = build_dnsmos(Variant::Baseline, 0);
        assert!(BamEngine::fp32(&g, &w).is_err());
        assert!(BamEngine::fp32(&g.to_bam(), &w).is_ok());
    }

    #[test]
    fn accumulators_cannot_overflow_in_this_graph() {
        // max |acc| per tap bound: 9 * cin * 127 + |bias|
        let (g, _) = build_dnsmos(Variant::Bam, 0);
        for spec in &g.convs {
            let bound = 9i64 * spec.cin as i64 * 127 + i32::MAX as i64 / 4;
            assert!(bound < i32::MAX as i64);
            assert!(9 * 32 * 127 < i32::MAX);
        }
    }
}
