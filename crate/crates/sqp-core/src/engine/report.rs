//! Analytic memory / multiplication accounting and the wall-clock
//! benchmark harness.

use std::time::Instant;

use crate::engine::InferenceEngine;
use crate::error::{Result, SqpError};
use crate::model::{count_table1, ModelGraph};
use crate::tensor::TensorF32;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryRow {
    pub name: String,
    pub bytes_fp32: u64,
    pub bytes_packed: u64,
}

/// Per-inference activation memory of the fp32 baseline vs the packed
/// pipeline: activations at 4 bytes vs 1 bit, input at 4 bytes vs 1 byte.
/// Weight footprints are reported alongside as context but excluded from
/// the ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReport {
    pub rows: Vec<MemoryRow>,
    pub total_fp32: u64,
    pub total_packed: u64,
    pub ratio: f64,
    pub weight_bytes_fp32: u64,
    pub weight_bytes_int8: u64,
}

pub fn memory_report(graph: &ModelGraph, input_hw: (usize, usize)) -> MemoryReport {
    let counts = count_table1(graph, input_hw);
    let mut rows = Vec::with_capacity(counts.rows.len() + 1);
    let input_elems = (input_hw.0 * input_hw.1) as u64;
    rows.push(MemoryRow {
        name: "Input".to_string(),
        bytes_fp32: input_elems * 4,
        bytes_packed: input_elems, // 8-bit spectrogram
    });
    for r in &counts.rows {
        rows.push(MemoryRow {
            name: r.name.clone(),
            bytes_fp32: r.activations * 4,
            bytes_packed: r.activations.div_ceil(8), // 1 bit per activation
        });
    }
    let total_fp32 = rows.iter().map(|r| r.bytes_fp32).sum();
    let total_packed: u64 = rows.iter().map(|r| r.bytes_packed).sum();
    MemoryReport {
        ratio: total_fp32 as f64 / total_packed as f64,
        rows,
        total_fp32,
        total_packed,
        weight_bytes_fp32: counts.total_params * 4,
        weight_bytes_int8: counts.total_params,
    }
}

impl MemoryReport {
    /// Plain-text rendering: one `layer,bytes_fp32,bytes_packed` row per
    /// layer plus totals and the ratio.
    pub fn render(&self) -> String {
        let mut out = String::from("layer,bytes_fp32,bytes_packed\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.name, r.bytes_fp32, r.bytes_packed));
        }
        out.push_str(&format!(
            "total,{},{}\n",
            self.total_fp32, self.total_packed
        ));
        out.push_str(&format!(
            "total_mb,{:.3},{:.3}\n",
            self.total_fp32 as f64 / 1e6,
            self.total_packed as f64 / 1e6
        ));
        out.push_str(&format!("ratio,{:.2}\n", self.ratio));
        out.push_str(&format!(
            "weights_context,{},{}\n",
            self.weight_bytes_fp32, self.weight_bytes_int8
        ));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiplyCount {
    /// Dense first-layer products (spectrogram x kernel taps).
    pub first_layer: u64,
    /// Binary-activation conv layers: masked accumulation, no products.
    pub binary_convs: u64,
    /// Dense head products.
    pub dense_head: u64,
    /// Global-average divisions (one per channel).
    pub pool_divisions: u64,
    pub total: u64,
}

/// Multiplications one packed-engine inference performs. Binary-activation
/// convolutions contribute none: taps are added where bits are set and the
/// Heaviside comparison happens on the raw accumulator.
pub fn multiply_count(graph: &ModelGraph, input_hw: (usize, usize)) -> MultiplyCount {
    let (h, w) = input_hw;
    let first = &graph.convs[0];
    let first_layer = (h * w * first.cout * 9 * first.cin) as u64;
    let dense_head: u64 = graph.dense.iter().map(|&(i, o)| (i * o) as u64).sum();
    let pool_divisions = graph.convs.last().unwrap().cout as u64;
    MultiplyCount {
        first_layer,
        binary_convs: 0,
        dense_head,
        pool_divisions,
        total: first_layer + dense_head + pool_divisions,
    }
}

// ---------------------------------------------------------------------------
// Benchmark harness
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub engine: String,
    pub run: usize,
    pub latency_us: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSummary {
    pub engine: String,
    pub runs: usize,
    pub median_us: f64,
    pub mad_us: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Time `n_runs` single inferences per engine (inputs cycled round-robin),
/// after at least 3 discarded warmup runs. Returns per-run rows and
/// median/MAD summaries.
pub fn benchmark(
    engines: &[&dyn InferenceEngine],
    inputs: &[TensorF32],
    n_runs: usize,
    warmup: usize,
) -> Result<(Vec<BenchRow>, Vec<BenchSummary>)> {
    if inputs.is_empty() {
        return Err(SqpError::EmptyInput("benchmark needs at least one input".into()));
    }
    if n_runs == 0 {
        return Err(SqpError::InvalidArgument("n_runs must be >= 1".into()));
    }
    let warmup = warmup.max(3);
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for engine in engines {
        let name = engine.name();
        for i in 0..warmup {
            std::hint::black_box(engine.infer_one(&inputs[i % inputs.len()])?);
        }
        let mut lat = Vec::with_capacity(n_runs);
        for run in 0..n_runs {
            let x = &inputs[run % inputs.len()];
            let t0 = Instant::now();
            std::hint::black_box(engine.infer_one(x)?);
            let us = t0.elapsed().as_secs_f64() * 1e6;
            lat.push(us);
            rows.push(BenchRow {
                engine: name.clone(),
                run,
                latency_us: us,
            });
        }
        let mut sorted = lat.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = median(&sorted);
        let mut dev: Vec<f64> = lat.iter().map(|&v| (v - med).abs()).collect();
        dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        summaries.push(BenchSummary {
            engine: name,
            runs: n_runs,
            median_us: med,
            mad_us: median(&dev),
        });
    }
    Ok((rows, summaries))
}

/// CSV rendering of per-run rows: engine,run,latency_us.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("engine,run,latency_us\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.3}\n", r.engine, r.run, r.latency_us));
    }
    out
}
