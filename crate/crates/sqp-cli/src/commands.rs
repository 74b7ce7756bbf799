//! CLI wiring: every subcommand is reproducible (same flags + seed =>
//! identical artifacts) and writes only to explicit output paths.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sqp_core::audio;
use sqp_core::dataset::{self, SampleRecord, SynthConfig};
use sqp_core::engine::{
    self, BamEngine, ConvBackend, Fp32Reference, InferenceEngine, Int8DenseEngine,
};
use sqp_core::eval::{self, CompareConfig};
use sqp_core::model::{self, checkpoint, Variant};
use sqp_core::par::Parallelism;
use sqp_core::quant;
use sqp_core::tensor::TensorF32;
use sqp_core::train::{self, Example, TrainConfig};

#[derive(Parser)]
#[command(
    name = "sqp",
    about = "Speech quality prediction with binary activation maps and int8 weights",
    version
)]
struct Cli {
    /// Worker threads for data-parallel stages (0 = all cores, 1 = sequential).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset creation, splitting, and WAV ingestion.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train a model variant.
    Train(TrainArgs),
    /// Record activation/weight quantization statistics on a dataset.
    Calibrate(CalibrateArgs),
    /// Produce a quantized checkpoint (calibrating first if needed).
    Quantize(QuantizeArgs),
    /// Run inference on WAV files or dataset records.
    Infer(InferArgs),
    /// Wall-clock latency of the fp32, int8-dense, and packed engines.
    Bench(BenchArgs),
    /// Analytic per-inference activation memory of fp32 vs packed execution.
    Memreport(MemreportArgs),
    /// Train and evaluate all quantization arms side by side.
    Compare(CompareArgs),
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Generate a synthetic tone-plus-noise dataset with SNR-derived labels.
    Synth(SynthArgs),
    /// Split a dataset into train/validation files.
    Split(SplitArgs),
    /// Build a dataset from a directory of WAV files and a path,label CSV.
    FromWav(FromWavArgs),
}

fn seed_default() -> u64 {
    std::env::var("SQP_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

#[derive(Args)]
struct SynthArgs {
    /// Number of samples.
    #[arg(long, short = 'n')]
    n: usize,
    #[arg(long, default_value_t = seed_default())]
    seed: u64,
    /// Segment length in seconds (3 s -> 149x120 input, 9 s -> 449x120).
    #[arg(long, default_value_t = 9.0)]
    segment_s: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    val_fraction: f64,
    #[arg(long, default_value_t = seed_default())]
    seed: u64,
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_val: PathBuf,
}

#[derive(Args)]
struct FromWavArgs {
    /// Directory the CSV paths are relative to.
    #[arg(long)]
    dir: PathBuf,
    /// CSV with columns path,label.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 9.0)]
    seg_seconds: f64,
    #[arg(long, default_value_t = 2.0)]
    stride_seconds: f64,
    /// Declared label range, e.g. -0.5:4.5 for PESQ-style labels.
    #[arg(long, default_value = "-0.5:4.5")]
    label_range: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// baseline | bam | bam-binary-weights
    #[arg(long, default_value = "baseline")]
    variant: String,
    /// Training dataset (SQPD).
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset; when absent, --val-fraction is split off --data.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    val_fraction: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 400)]
    epochs: usize,
    /// Surrogate steepness for Heaviside backward passes.
    #[arg(long, default_value_t = 5.0)]
    beta: f32,
    #[arg(long, default_value_t = 5)]
    plateau_patience: usize,
    #[arg(long, default_value_t = 0.9)]
    plateau_factor: f32,
    #[arg(long, default_value_t = 25)]
    early_stop_patience: usize,
    #[arg(long, default_value_t = seed_default())]
    seed: u64,
    /// Output checkpoint (SQPW).
    #[arg(long)]
    out: PathBuf,
    /// Optional training history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration dataset (SQPD); the leading --calib-fraction is used.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    calib_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Needed when the model has no calibration table yet.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    calib_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// fp32 | bam | bam-int8 | int8-dense
    #[arg(long, default_value = "bam")]
    engine: String,
    /// Use the bit-plane backend for packed int8 convolutions.
    #[arg(long, default_value_t = false)]
    bitplane: bool,
    /// Quantize the dense head too (packed int8 engine only).
    #[arg(long, default_value_t = false)]
    int8_head: bool,
    /// WAV file to score (framed into segments).
    #[arg(long)]
    wav: Option<PathBuf>,
    #[arg(long, default_value_t = 9.0)]
    seg_seconds: f64,
    #[arg(long, default_value_t = 2.0)]
    stride_seconds: f64,
    /// Dataset to score instead of a WAV file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Score only this record of --data.
    #[arg(long)]
    index: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint with a calibration table (see `sqp quantize`).
    #[arg(long)]
    model: PathBuf,
    /// Inputs: a dataset file, or synthetic ones when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic input count when --data is absent.
    #[arg(long, default_value_t = 4)]
    synth_inputs: usize,
    #[arg(long, default_value_t = 9.0)]
    segment_s: f64,
    #[arg(long, default_value_t = seed_default())]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    runs: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Latency CSV (engine,run,latency_us).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MemreportArgs {
    /// baseline | bam | bam-int8 (labelling only; the analytic model
    /// compares fp32 activations against 1-bit maps either way).
    #[arg(long, default_value = "bam-int8")]
    variant: String,
    #[arg(long, default_value_t = 9.0)]
    segment_s: f64,
}

#[derive(Args)]
struct CompareArgs {
    /// Training pool (SQPD); synthetic when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Test set (SQPD); required with --data.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 400)]
    n_test: usize,
    #[arg(long, default_value_t = 3.0)]
    segment_s: f64,
    /// Comma-separated training seeds, one run per seed.
    #[arg(long, default_value = "1,2")]
    seeds: String,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 5.0)]
    beta: f32,
    #[arg(long, default_value_t = seed_default())]
    seed: u64,
    #[arg(long, default_value_t = false)]
    include_binary_weights: bool,
    #[arg(long, default_value_t = false)]
    skip_full_int8: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let par = configure_threads(cli.threads);
    match dispatch(cli.command, par) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: usize) -> Parallelism {
    if threads == 1 {
        return Parallelism::Sequential;
    }
    if threads > 1 {
        // Ignore failure: the global pool can only be set once (tests).
        let _ = rayon_global(threads);
    }
    Parallelism::Rayon
}

#[cfg(feature = "parallel")]
fn rayon_global(threads: usize) -> Result<()> {
    sqp_core::rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| anyhow!("rayon pool: {e}"))
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(_threads: usize) -> Parallelism {
    Parallelism::Sequential
}

fn dispatch(cmd: Command, par: Parallelism) -> Result<()> {
    match cmd {
        Command::Dataset(DatasetCmd::Synth(a)) => cmd_synth(a, par),
        Command::Dataset(DatasetCmd::Split(a)) => cmd_split(a),
        Command::Dataset(DatasetCmd::FromWav(a)) => cmd_from_wav(a),
        Command::Train(a) => cmd_train(a, par),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Bench(a) => cmd_bench(a, par),
        Command::Memreport(a) => cmd_memreport(a),
        Command::Compare(a) => cmd_compare(a, par),
    }
}

fn cmd_synth(a: SynthArgs, par: Parallelism) -> Result<()> {
    let cfg = SynthConfig {
        n_samples: a.n,
        rng_seed: a.seed,
        segment_s: a.segment_s,
        ..SynthConfig::default()
    };
    let records = dataset::synth_generate(&cfg, par)?;
    dataset::write_dataset(&a.out, &records, dataset::SYNTH_LABEL_RANGE)?;
    println!(
        "wrote {} records ({}x{}) to {}",
        records.len(),
        records[0].spec.n_frames(),
        records[0].spec.n_mels(),
        a.out.display()
    );
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let (header, records) = dataset::read_dataset(&a.input)?;
    let (train, val) = dataset::split_records(&records, a.val_fraction, a.seed)?;
    let range = (header.label_min, header.label_max);
    dataset::write_dataset(&a.out_train, &train, range)?;
    dataset::write_dataset(&a.out_val, &val, range)?;
    println!(
        "split {} records into {} train / {} val",
        records.len(),
        train.len(),
        val.len()
    );
    Ok(())
}

fn cmd_from_wav(a: FromWavArgs) -> Result<()> {
    let (lo, hi) = a
        .label_range
        .split_once(':')
        .and_then(|(l, h)| Some((l.parse::<f32>().ok()?, h.parse::<f32>().ok()?)))
        .ok_or_else(|| anyhow!("--label-range expects min:max"))?;
    let csv = std::fs::read_to_string(&a.labels)
        .with_context(|| format!("reading {}", a.labels.display()))?;
    let entries: Vec<(PathBuf, f32)> = dataset::parse_label_csv(&csv)?
        .into_iter()
        .map(|(rel, label)| (a.dir.join(rel), label))
        .collect();
    if entries.is_empty() {
        bail!("label CSV holds no rows");
    }
    let (records, _groups) = dataset::records_from_wavs(&entries, a.seg_seconds, a.stride_seconds)?;
    dataset::write_dataset(&a.out, &records, (lo, hi))?;
    println!(
        "wrote {} records from {} clips to {}",
        records.len(),
        entries.len(),
        a.out.display()
    );
    Ok(())
}

fn load_examples(path: &Path) -> Result<Vec<Example>> {
    let (_, records) = dataset::read_dataset(path)?;
    Ok(records
        .into_iter()
        .map(|r| Example {
            input: r.spec.frames,
            label: r.label,
        })
        .collect())
}

fn cmd_train(a: TrainArgs, par: Parallelism) -> Result<()> {
    let variant: Variant = a.variant.parse()?;
    let all = load_examples(&a.data)?;
    let (train_set, val_set) = match &a.val {
        Some(p) => (all, load_examples(p)?),
        None => {
            let (ti, vi) =
                dataset::split_indices(all.len(), None, a.val_fraction, a.seed)?;
            (
                ti.into_iter().map(|i| all[i].clone()).collect::<Vec<_>>(),
                vi.into_iter().map(|i| all[i].clone()).collect::<Vec<_>>(),
            )
        }
    };
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        lr: a.lr,
        max_epochs: a.epochs,
        plateau_patience: a.plateau_patience,
        plateau_factor: a.plateau_factor,
        early_stop_patience: a.early_stop_patience,
        surrogate_beta: a.beta,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (graph, init) = model::build_dnsmos(variant, a.seed);
    println!(
        "training {} on {} samples ({} validation), up to {} epochs",
        variant.as_str(),
        train_set.len(),
        val_set.len(),
        cfg.max_epochs
    );
    let out = train::train_with_progress(&graph, &init, &train_set, &val_set, &cfg, par, |e| {
        use std::io::Write;
        println!(
            "epoch {:>3}  lr {:.6}  train_mse {:.5}  val_mse {:.5}",
            e.epoch, e.lr, e.train_mse, e.val_mse
        );
        let _ = std::io::stdout().flush();
    })?;
    println!(
        "best val_mse {:.5} at epoch {}",
        out.best_val_mse, out.best_epoch
    );
    checkpoint::save_checkpoint(&a.out, variant, &out.best_weights, None)?;
    println!("wrote checkpoint to {}", a.out.display());
    if let Some(h) = &a.history {
        std::fs::write(h, train::history_csv(&out.history))?;
        println!("wrote history to {}", h.display());
    }
    Ok(())
}

fn calibrate_from(
    model_path: &Path,
    data: &Path,
    calib_fraction: f64,
) -> Result<(Variant, model::ModelGraph, model::WeightSet, quant::ModelQuantParams)> {
    let (variant, graph, weights, _) = checkpoint::load_checkpoint(model_path)?;
    let examples = load_examples(data)?;
    let n = ((examples.len() as f64 * calib_fraction).ceil() as usize).clamp(1, examples.len());
    let inputs: Vec<&TensorF32> = examples[..n].iter().map(|e| &e.input).collect();
    let params = quant::calibrate(&graph, &weights, &inputs)?;
    println!("calibrated on {n} of {} records", examples.len());
    Ok((variant, graph, weights, params))
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let (variant, _, weights, params) = calibrate_from(&a.model, &a.data, a.calib_fraction)?;
    checkpoint::save_checkpoint(&a.out, variant, &weights, Some(&params))?;
    println!(
        "wrote calibrated checkpoint ({} + quantization table) to {}",
        variant.as_str(),
        a.out.display()
    );
    Ok(())
}

fn cmd_quantize(a: QuantizeArgs) -> Result<()> {
    let (variant, graph, weights, existing) = checkpoint::load_checkpoint(&a.model)?;
    let params = match existing {
        Some(p) => p,
        None => {
            let data = a.data.as_ref().ok_or_else(|| {
                anyhow!("model has no calibration table; pass --data to calibrate")
            })?;
            calibrate_from(&a.model, data, a.calib_fraction)?.3
        }
    };
    // Validate the table against the graph and summarize weight error.
    let qm = quant::quantize_model(&graph, &weights, &params, quant::QuantPipeline::BamInt8)?;
    println!("layer,max_abs_weight_error,scale_min,scale_max");
    for (i, (ql, kernel)) in qm.convs.iter().zip(&weights.conv_kernels).enumerate() {
        let dq = quant::dequantize_weights_per_channel(&ql.weights_q, &ql.w_qparams);
        let err = kernel
            .data()
            .iter()
            .zip(dq.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        let (smin, smax) = ql
            .w_qparams
            .iter()
            .fold((f32::INFINITY, 0.0f32), |(lo, hi), q| {
                (lo.min(q.scale), hi.max(q.scale))
            });
        println!("conv{},{err:.6},{smin:.6},{smax:.6}", i + 1);
    }
    checkpoint::save_checkpoint(&a.out, variant, &weights, Some(&params))?;
    println!("wrote quantized checkpoint to {}", a.out.display());
    Ok(())
}

enum AnyEngine {
    Ref(Fp32Reference),
    Bam(BamEngine),
    Int8Dense(Int8DenseEngine),
}

impl AnyEngine {
    fn as_dyn(&self) -> &dyn InferenceEngine {
        match self {
            AnyEngine::Ref(e) => e,
            AnyEngine::Bam(e) => e,
            AnyEngine::Int8Dense(e) => e,
        }
    }
}

fn build_engine(a: &InferArgs) -> Result<AnyEngine> {
    let (_, graph, weights, qparams) = checkpoint::load_checkpoint(&a.model)?;
    let backend = if a.bitplane {
        ConvBackend::BitPlane
    } else {
        ConvBackend::Masked
    };
    let need_q = || {
        qparams
            .clone()
            .ok_or_else(|| anyhow!("checkpoint has no quantization table; run `sqp quantize`"))
    };
    Ok(match a.engine.as_str() {
        "fp32" => AnyEngine::Ref(Fp32Reference { graph, weights }),
        "bam" => AnyEngine::Bam(BamEngine::fp32(&graph.to_bam(), &weights)?),
        "bam-int8" => AnyEngine::Bam(BamEngine::int8(
            &graph.to_bam(),
            &weights,
            &need_q()?,
            backend,
            a.int8_head,
        )?),
        "int8-dense" => AnyEngine::Int8Dense(Int8DenseEngine::new(&graph, &weights, &need_q()?)?),
        other => bail!("unknown engine {other:?} (want fp32 | bam | bam-int8 | int8-dense)"),
    })
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let engine = build_engine(&a)?;
    let engine = engine.as_dyn();
    println!("engine: {}", engine.name());
    match (&a.wav, &a.data) {
        (Some(wav), None) => {
            let wave = audio::load_wav(wav)?;
            let fb = audio::MelFilterbank::default_for(wave.sample_rate_hz)?;
            let mut segments = audio::frame_segments(&wave, a.seg_seconds, a.stride_seconds);
            if segments.is_empty() {
                segments.push(wave);
            }
            let mut sum = 0.0f64;
            for (i, seg) in segments.iter().enumerate() {
                let spec = audio::log_mel_spectrogram(seg, &fb)?;
                let pred = engine.infer_one(&spec.frames)?;
                println!("segment {i}: {pred:.4}");
                sum += pred as f64;
            }
            println!("mean: {:.4}", sum / segments.len() as f64);
        }
        (None, Some(data)) => {
            let (_, records) = dataset::read_dataset(data)?;
            let score = |i: usize, r: &SampleRecord| -> Result<()> {
                let pred = engine.infer_one(&r.spec.frames)?;
                println!("{i},{pred:.4},{:.4}", r.label);
                Ok(())
            };
            println!("index,prediction,label");
            match a.index {
                Some(i) => {
                    let r = records
                        .get(i)
                        .ok_or_else(|| anyhow!("index {i} out of range ({})", records.len()))?;
                    score(i, r)?;
                }
                None => {
                    for (i, r) in records.iter().enumerate() {
                        score(i, r)?;
                    }
                }
            }
        }
        _ => bail!("pass exactly one of --wav or --data"),
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs, par: Parallelism) -> Result<()> {
    let (_, graph, weights, qparams) = checkpoint::load_checkpoint(&a.model)?;
    let qparams = qparams
        .ok_or_else(|| anyhow!("benchmark needs a quantized checkpoint; run `sqp quantize`"))?;
    let inputs: Vec<TensorF32> = match &a.data {
        Some(p) => load_examples(p)?
            .into_iter()
            .take(a.synth_inputs.max(1))
            .map(|e| e.input)
            .collect(),
        None => {
            let cfg = SynthConfig {
                n_samples: a.synth_inputs.max(1),
                rng_seed: a.seed,
                segment_s: a.segment_s,
                ..SynthConfig::default()
            };
            dataset::synth_generate(&cfg, par)?
                .into_iter()
                .map(|r| r.spec.frames)
                .collect()
        }
    };
    let fp32 = Fp32Reference {
        graph: graph.clone(),
        weights: weights.clone(),
    };
    let int8_dense = Int8DenseEngine::new(&graph, &weights, &qparams)?;
    let bam_graph = graph.to_bam();
    let packed_f32 = BamEngine::fp32(&bam_graph, &weights)?;
    let packed_i8 = BamEngine::int8(&bam_graph, &weights, &qparams, ConvBackend::Masked, false)?;
    let packed_i8_bp =
        BamEngine::int8(&bam_graph, &weights, &qparams, ConvBackend::BitPlane, false)?;
    let engines: Vec<&dyn InferenceEngine> =
        vec![&fp32, &int8_dense, &packed_f32, &packed_i8, &packed_i8_bp];
    let (rows, summaries) = engine::benchmark(&engines, &inputs, a.runs, a.warmup)?;
    std::fs::write(&a.out, engine::report::bench_csv(&rows))?;
    println!("engine,runs,median_us,mad_us");
    for s in &summaries {
        println!("{},{},{:.1},{:.1}", s.engine, s.runs, s.median_us, s.mad_us);
    }
    println!("wrote per-run latencies to {}", a.out.display());
    Ok(())
}

fn cmd_memreport(a: MemreportArgs) -> Result<()> {
    let variant: Variant = match a.variant.as_str() {
        "bam-int8" => Variant::Bam,
        other => other.parse()?,
    };
    let graph = model::ModelGraph::for_variant(variant);
    let sr = audio::SAMPLE_RATE_HZ;
    let n = (a.segment_s * sr as f64).round() as usize;
    let t = audio::frame_count(n, audio::win_len(sr), audio::hop_len(sr))
        .ok_or_else(|| anyhow!("segment too short"))?;
    let report = engine::memory_report(&graph, (t, audio::N_MELS));
    print!("{}", report.render());
    println!(
        "fp32 activations {:.2} MB -> packed {:.2} MB, ratio {:.1}",
        report.total_fp32 as f64 / 1e6,
        report.total_packed as f64 / 1e6,
        report.ratio
    );
    Ok(())
}

fn cmd_compare(a: CompareArgs, par: Parallelism) -> Result<()> {
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| anyhow!("--seeds: {e}"))?;
    if seeds.is_empty() {
        bail!("--seeds must name at least one seed");
    }
    let cfg = CompareConfig {
        n_train: a.n_train,
        n_test: a.n_test,
        segment_s: a.segment_s,
        data_seed: a.seed,
        seeds,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        surrogate_beta: a.beta,
        include_full_int8: !a.skip_full_int8,
        include_binary_weights: a.include_binary_weights,
        verbose: true,
        par,
        ..CompareConfig::default()
    };
    let data = match (&a.data, &a.test_data) {
        (Some(train), Some(test)) => {
            let (_, records) = dataset::read_dataset(train)?;
            let (_, test_records) = dataset::read_dataset(test)?;
            eval::compare_data_from_records(records, test_records, cfg.val_fraction, cfg.data_seed)?
        }
        (None, None) => {
            println!(
                "generating synthetic data: {} train + {} test ({}s segments)",
                cfg.n_train, cfg.n_test, cfg.segment_s
            );
            eval::synth_compare_data(&cfg)?
        }
        _ => bail!("--data and --test-data must be given together"),
    };
    println!(
        "train {} / val {} / test {}",
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    let report = eval::run_comparison(&data, &cfg)?;
    report.write_files(&a.out_dir)?;
    print!("{}", report.summary_text());
    println!("wrote report files to {}", a.out_dir.display());
    if report.incomplete.is_some() {
        bail!("comparison incomplete");
    }
    Ok(())
}
