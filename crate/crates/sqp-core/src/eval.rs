//! Evaluation metrics and the four-way comparison harness: fp32 baseline,
//! post-training binarization of that baseline, binary-activation training
//! from scratch, and the binary-activation model with int8 weights, plus
//! optional whole-model int8 and binary-weight arms.

use std::fs;
use std::path::Path;

use crate::dataset::{self, SampleRecord, SynthConfig};
use crate::engine::{BamEngine, ConvBackend, Fp32Reference, InferenceEngine, Int8DenseEngine};
use crate::error::{Result, SqpError};
use crate::model::{build_dnsmos, Variant};
use crate::par::{ordered_map, Parallelism};
use crate::quant;
use crate::rng::derive_seed;
use crate::tensor::TensorF32;
use crate::train::{self, Example, TrainConfig};

/// Pearson correlation coefficient. Rejects zero-variance inputs rather
/// than silently returning 0.
pub fn pcc(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(SqpError::ShapeMismatch(format!(
            "{} vs {} samples",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(SqpError::InvalidArgument(
            "pcc needs at least 2 samples".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        let dx = a as f64 - mx;
        let dy = b as f64 - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(SqpError::ZeroVariance);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn pcc_or_degenerate(x: &[f32], y: &[f32]) -> Result<(f32, bool)> {
    match pcc(x, y) {
        Ok(v) => Ok((v as f32, false)),
        Err(SqpError::ZeroVariance) => Ok((0.0, true)),
        Err(e) => Err(e),
    }
}

/// Full-scale reference test PCC for this architecture on DNS2020-style
/// training (context only; desk-scale synthetic runs are not expected to
/// reproduce these numbers).
pub const FULL_SCALE_REFERENCE_PCC: &[(&str, f32, f32)] = &[
    ("baseline", 0.84, 0.03),
    ("ptq-binarized", 0.54, 0.02),
    ("bam-qat", 0.82, 0.02),
    ("binary-weights", 0.63, 0.05),
    ("bam-int8", 0.81, 0.01),
    ("full-int8", 0.83, 0.03),
];

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub variant: String,
    pub engine: String,
    pub seed: u64,
    pub n_samples: usize,
    pub mse: f32,
    pub pcc: f32,
    /// True when predictions had zero variance and the PCC is recorded as 0.
    pub degenerate: bool,
    /// (prediction, target) pairs for scatter plots.
    pub scatter: Vec<(f32, f32)>,
}

#[derive(Clone, Debug)]
pub struct ArmSummary {
    pub variant: String,
    pub engine: String,
    pub seeds: usize,
    pub mean_mse: f32,
    pub std_mse: Option<f32>,
    pub mean_pcc: f32,
    pub std_pcc: Option<f32>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmResult>,
    pub summary: Vec<ArmSummary>,
    /// Set when a training arm aborted; the report then covers only the
    /// arms that completed.
    pub incomplete: Option<String>,
}

#[derive(Clone, Debug)]
pub struct CompareConfig {
    /// Synthetic training pool (split 1 - val_fraction / val_fraction).
    pub n_train: usize,
    pub n_test: usize,
    /// Segment length in seconds; 3 s gives the reduced 149x120 input,
    /// 9 s the full 449x120.
    pub segment_s: f64,
    pub data_seed: u64,
    /// One full training per seed and variant.
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub surrogate_beta: f32,
    pub val_fraction: f64,
    /// Leading fraction of the training set used for calibration.
    pub calib_fraction: f64,
    pub include_full_int8: bool,
    pub include_binary_weights: bool,
    /// Print arm/epoch progress to stderr (report files are unaffected).
    pub verbose: bool,
    pub par: Parallelism,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            n_train: 2000,
            n_test: 400,
            segment_s: 3.0,
            data_seed: 7,
            seeds: vec![1, 2],
            epochs: 40,
            batch_size: 128,
            lr: 1e-3,
            surrogate_beta: 5.0,
            val_fraction: 0.05,
            calib_fraction: 0.2,
            include_full_int8: true,
            include_binary_weights: false,
            verbose: false,
            par: Parallelism::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CompareData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

fn to_examples(records: Vec<SampleRecord>) -> Vec<Example> {
    records
        .into_iter()
        .map(|r| Example {
            input: r.spec.frames,
            label: r.label,
        })
        .collect()
}

/// Generate the synthetic train/val/test pools (test drawn from an
/// independent seed stream).
pub fn synth_compare_data(cfg: &CompareConfig) -> Result<CompareData> {
    let train_cfg = SynthConfig {
        n_samples: cfg.n_train,
        rng_seed: derive_seed(cfg.data_seed, 0x54524149, 0),
        segment_s: cfg.segment_s,
        ..SynthConfig::default()
    };
    let test_cfg = SynthConfig {
        n_samples: cfg.n_test,
        rng_seed: derive_seed(cfg.data_seed, 0x54455354, 0),
        segment_s: cfg.segment_s,
        ..SynthConfig::default()
    };
    let pool = to_examples(dataset::synth_generate(&train_cfg, cfg.par)?);
    let test = to_examples(dataset::synth_generate(&test_cfg, cfg.par)?);
    let (train_idx, val_idx) =
        dataset::split_indices(pool.len(), None, cfg.val_fraction, cfg.data_seed)?;
    let train: Vec<Example> = train_idx.into_iter().map(|i| pool[i].clone()).collect();
    let val: Vec<Example> = val_idx.into_iter().map(|i| pool[i].clone()).collect();
    Ok(CompareData { train, val, test })
}

/// Build records from already-loaded examples (for `compare --data`).
pub fn compare_data_from_records(
    records: Vec<SampleRecord>,
    test_records: Vec<SampleRecord>,
    val_fraction: f64,
    seed: u64,
) -> Result<CompareData> {
    let pool = to_examples(records);
    let test = to_examples(test_records);
    let (train_idx, val_idx) = dataset::split_indices(pool.len(), None, val_fraction, seed)?;
    Ok(CompareData {
        train: train_idx.into_iter().map(|i| pool[i].clone()).collect(),
        val: val_idx.into_iter().map(|i| pool[i].clone()).collect(),
        test,
    })
}

fn evaluate_engine(
    engine: &dyn InferenceEngine,
    test: &[Example],
    par: Parallelism,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let preds: Result<Vec<f32>> = ordered_map(par, test.len(), |i| engine.infer_one(&test[i].input))
        .into_iter()
        .collect();
    let targets = test.iter().map(|e| e.label).collect();
    Ok((preds?, targets))
}

fn arm_result(
    variant: &str,
    engine: &dyn InferenceEngine,
    seed: u64,
    test: &[Example],
    par: Parallelism,
) -> Result<ArmResult> {
    let (preds, targets) = evaluate_engine(engine, test, par)?;
    let mse = train::mse_loss(&preds, &targets)?;
    let (p, degenerate) = pcc_or_degenerate(&preds, &targets)?;
    Ok(ArmResult {
        variant: variant.to_string(),
        engine: engine.name(),
        seed,
        n_samples: test.len(),
        mse,
        pcc: p,
        degenerate,
        scatter: preds.into_iter().zip(targets).collect(),
    })
}

fn summarize(arms: &[ArmResult]) -> Vec<ArmSummary> {
    let mut order: Vec<&str> = Vec::new();
    for a in arms {
        if !order.contains(&a.variant.as_str()) {
            order.push(&a.variant);
        }
    }
    order
        .iter()
        .map(|&v| {
            let group: Vec<&ArmResult> = arms.iter().filter(|a| a.variant == v).collect();
            let n = group.len();
            let mean = |f: &dyn Fn(&ArmResult) -> f32| -> f32 {
                group.iter().map(|a| f(a) as f64).sum::<f64>() as f32 / n as f32
            };
            let std = |f: &dyn Fn(&ArmResult) -> f32, m: f32| -> Option<f32> {
                if n < 2 {
                    None
                } else {
                    let var = group
                        .iter()
                        .map(|a| ((f(a) - m) as f64).powi(2))
                        .sum::<f64>()
                        / (n - 1) as f64;
                    Some(var.sqrt() as f32)
                }
            };
            let mean_mse = mean(&|a| a.mse);
            let mean_pcc = mean(&|a| a.pcc);
            ArmSummary {
                variant: v.to_string(),
                engine: group[0].engine.clone(),
                seeds: n,
                mean_mse,
                std_mse: std(&|a| a.mse, mean_mse),
                mean_pcc,
                std_pcc: std(&|a| a.pcc, mean_pcc),
            }
        })
        .collect()
}

/// Train and evaluate every arm of the comparison on the given data.
///
/// Per seed: the fp32 baseline and the binary-activation model are trained
/// from scratch; post-training binarization reuses the trained baseline
/// weights with Heaviside activations and average pooling; the int8 arm
/// calibrates on the leading `calib_fraction` of the training set and runs
/// the packed integer engine (its engine name is echoed in the report so a
/// silent fp32 fallback cannot pass).
pub fn run_comparison(data: &CompareData, cfg: &CompareConfig) -> Result<EvalReport> {
    if data.train.is_empty() || data.val.is_empty() || data.test.len() < 2 {
        return Err(SqpError::EmptyInput(
            "comparison needs train, val, and >= 2 test samples".into(),
        ));
    }
    let mut arms: Vec<ArmResult> = Vec::new();
    let mut incomplete = None;

    let n_calib = ((data.train.len() as f64 * cfg.calib_fraction).ceil() as usize)
        .clamp(1, data.train.len());
    let calib_inputs: Vec<&TensorF32> =
        data.train[..n_calib].iter().map(|e| &e.input).collect();

    let fit = |variant: Variant, seed: u64, tag: u64| -> Result<train::TrainOutcome> {
        let tcfg = TrainConfig {
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            max_epochs: cfg.epochs,
            surrogate_beta: cfg.surrogate_beta,
            seed: derive_seed(seed, 0x5452414e, tag),
            ..TrainConfig::default()
        };
        let (graph, init) = build_dnsmos(variant, derive_seed(seed, 0x494e4954, tag));
        if cfg.verbose {
            eprintln!("[compare] training {} (seed {seed})", variant.as_str());
        }
        let out = train::train_with_progress(
            &graph,
            &init,
            &data.train,
            &data.val,
            &tcfg,
            cfg.par,
            |e| {
                if cfg.verbose {
                    eprintln!(
                        "[compare]   epoch {:>3}  lr {:.6}  train_mse {:.5}  val_mse {:.5}",
                        e.epoch, e.lr, e.train_mse, e.val_mse
                    );
                }
            },
        )?;
        Ok(out)
    };

    'seeds: for &seed in &cfg.seeds {
        // fp32 baseline.
        let g_base = crate::model::ModelGraph::for_variant(Variant::Baseline);
        let base = match fit(Variant::Baseline, seed, 0) {
            Ok(out) => out,
            Err(e) => {
                incomplete = Some(format!("baseline training aborted (seed {seed}): {e}"));
                break 'seeds;
            }
        };
        let base_ref = Fp32Reference {
            graph: g_base.clone(),
            weights: base.best_weights.clone(),
        };
        arms.push(arm_result("baseline", &base_ref, seed, &data.test, cfg.par)?);

        // Post-training binarization of the trained baseline.
        let ptq_engine = BamEngine::fp32(&g_base.to_bam(), &base.best_weights)?;
        arms.push(arm_result(
            "ptq-binarized",
            &ptq_engine,
            seed,
            &data.test,
            cfg.par,
        )?);

        // Whole-model int8 of the trained baseline (context arm).
        if cfg.include_full_int8 {
            let params = quant::calibrate(&g_base, &base.best_weights, &calib_inputs)?;
            let full_int8 = Int8DenseEngine::new(&g_base, &base.best_weights, &params)?;
            arms.push(arm_result(
                "full-int8",
                &full_int8,
                seed,
                &data.test,
                cfg.par,
            )?);
        }

        // Binary activations trained from scratch with surrogate gradients.
        let g_bam = crate::model::ModelGraph::for_variant(Variant::Bam);
        let bam = match fit(Variant::Bam, seed, 1) {
            Ok(out) => out,
            Err(e) => {
                incomplete = Some(format!("bam training aborted (seed {seed}): {e}"));
                break 'seeds;
            }
        };
        let bam_engine = BamEngine::fp32(&g_bam, &bam.best_weights)?;
        arms.push(arm_result("bam-qat", &bam_engine, seed, &data.test, cfg.par)?);

        // int8 weights on top of the binary-activation model.
        let params = quant::calibrate(&g_bam, &bam.best_weights, &calib_inputs)?;
        let int8_engine = BamEngine::int8(
            &g_bam,
            &bam.best_weights,
            &params,
            ConvBackend::Masked,
            false,
        )?;
        debug_assert!(int8_engine.is_int8());
        arms.push(arm_result(
            "bam-int8",
            &int8_engine,
            seed,
            &data.test,
            cfg.par,
        )?);

        // Fully binarized convolutions (weights and activations).
        if cfg.include_binary_weights {
            let g_bw = crate::model::ModelGraph::for_variant(Variant::BamBinaryWeights);
            match fit(Variant::BamBinaryWeights, seed, 2) {
                Ok(out) => {
                    let engine = BamEngine::fp32(&g_bw, &out.best_weights)?;
                    arms.push(arm_result(
                        "binary-weights",
                        &engine,
                        seed,
                        &data.test,
                        cfg.par,
                    )?);
                }
                Err(e) => {
                    incomplete =
                        Some(format!("binary-weight training aborted (seed {seed}): {e}"));
                    break 'seeds;
                }
            }
        }
    }

    let summary = summarize(&arms);
    Ok(EvalReport {
        seeds: cfg.seeds.clone(),
        arms,
        summary,
        incomplete,
    })
}

impl EvalReport {
    pub fn arm_mean_pcc(&self, variant: &str) -> Option<f32> {
        self.summary
            .iter()
            .find(|s| s.variant == variant)
            .map(|s| s.mean_pcc)
    }

    /// Per-arm CSV: variant,engine,seed,n,mse,pcc,degenerate.
    pub fn report_csv(&self) -> String {
        let mut out = String::from("variant,engine,seed,n,mse,pcc,degenerate\n");
        for a in &self.arms {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                a.variant, a.engine, a.seed, a.n_samples, a.mse, a.pcc, a.degenerate
            ));
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "comparison over seeds {:?}{}\n",
            self.seeds,
            match &self.incomplete {
                Some(msg) => format!("  [INCOMPLETE: {msg}]"),
                None => String::new(),
            }
        ));
        for s in &self.summary {
            let fmt_std = |v: Option<f32>| match v {
                Some(s) => format!(" +/- {s:.4}"),
                None => String::new(),
            };
            out.push_str(&format!(
                "{:<16} engine={:<24} pcc={:.4}{}  mse={:.4}{}\n",
                s.variant,
                s.engine,
                s.mean_pcc,
                fmt_std(s.std_pcc),
                s.mean_mse,
                fmt_std(s.std_mse),
            ));
        }
        out.push_str("\nfull-scale reference PCC (context, not asserted):\n");
        for (name, mean, std) in FULL_SCALE_REFERENCE_PCC {
            out.push_str(&format!("{name:<16} {mean:.2} +/- {std:.2}\n"));
        }
        out
    }

    /// Write report.csv, summary.txt, and one scatter CSV per arm into a
    /// directory.
    pub fn write_files(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.report_csv())?;
        fs::write(dir.join("summary.txt"), self.summary_text())?;
        for a in &self.arms {
            let mut s = String::from("pred,target\n");
            for (p, t) in &a.scatter {
                s.push_str(&format!("{p},{t}\n"));
            }
            fs::write(
                dir.join(format!("scatter_{}_seed{}.csv", a.variant, a.seed)),
                s,
            )?;
        }
        Ok(())
    }
}
