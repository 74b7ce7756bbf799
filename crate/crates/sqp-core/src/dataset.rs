//! Bit-exact (spectrogram, label) storage, train/validation splitting, and
//! a deterministic synthetic generator for desk-scale experiments.
//!
//! File format "SQPD", little-endian:
//!   magic "SQPD", u32 version = 1, u64 count, u32 t_frames, u32 n_mels,
//!   f32 label_min, f32 label_max, then `count` records of
//!   (t_frames * n_mels f32 spectrogram values, f32 label).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::audio::{self, LogMelSpectrogram, MelFilterbank, Waveform};
use crate::error::{Result, SqpError};
use crate::par::{ordered_map, Parallelism};
use crate::rng::{derive_seed, Rng};
use crate::tensor::TensorF32;

pub const MAGIC: &[u8; 4] = b"SQPD";
pub const VERSION: u32 = 1;
/// Label range used when ingesting PESQ-style labels.
pub const PESQ_LABEL_RANGE: (f32, f32) = (-0.5, 4.5);

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub spec: LogMelSpectrogram,
    pub label: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetHeader {
    pub count: u64,
    pub t_frames: u32,
    pub n_mels: u32,
    pub label_min: f32,
    pub label_max: f32,
}

pub fn write_dataset(
    path: impl AsRef<Path>,
    records: &[SampleRecord],
    label_range: (f32, f32),
) -> Result<()> {
    let (t, m) = match records.first() {
        Some(r) => (r.spec.n_frames() as u32, r.spec.n_mels() as u32),
        None => (0, 0),
    };
    for (i, r) in records.iter().enumerate() {
        if r.spec.n_frames() as u32 != t || r.spec.n_mels() as u32 != m {
            return Err(SqpError::ShapeMismatch(format!(
                "record {i} is {}x{}, expected {t}x{m}",
                r.spec.n_frames(),
                r.spec.n_mels()
            )));
        }
        if r.label < label_range.0 || r.label > label_range.1 {
            return Err(SqpError::InvalidArgument(format!(
                "record {i} label {} outside declared range [{}, {}]",
                r.label, label_range.0, label_range.1
            )));
        }
    }
    let mut out = Vec::with_capacity(32 + records.len() * (t as usize * m as usize + 1) * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    out.extend_from_slice(&t.to_le_bytes());
    out.extend_from_slice(&m.to_le_bytes());
    out.extend_from_slice(&label_range.0.to_le_bytes());
    out.extend_from_slice(&label_range.1.to_le_bytes());
    for r in records {
        for &v in r.spec.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&r.label.to_le_bytes());
    }
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<SampleRecord>)> {
    let bytes = fs::read(path.as_ref())?;
    read_dataset_bytes(&bytes)
}

pub fn read_dataset_bytes(bytes: &[u8]) -> Result<(DatasetHeader, Vec<SampleRecord>)> {
    if bytes.len() < 32 {
        return Err(SqpError::Format("file shorter than SQPD header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(SqpError::Format("bad magic, not an SQPD file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(SqpError::Format(format!(
            "unsupported SQPD version {version}, want {VERSION}"
        )));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let t = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let m = u32::from_le_bytes(bytes[20..24].try_into().unwrap());
    let label_min = f32::from_le_bytes(bytes[24..28].try_into().unwrap());
    let label_max = f32::from_le_bytes(bytes[28..32].try_into().unwrap());
    let header = DatasetHeader {
        count,
        t_frames: t,
        n_mels: m,
        label_min,
        label_max,
    };
    let cells = t as usize * m as usize;
    let rec_bytes = (cells + 1) * 4;
    let expect = 32 + count as usize * rec_bytes;
    if bytes.len() != expect {
        return Err(SqpError::Format(format!(
            "payload is {} bytes, header implies {expect}",
            bytes.len()
        )));
    }
    let mut records = Vec::with_capacity(count as usize);
    let mut pos = 32;
    for _ in 0..count {
        let mut data = Vec::with_capacity(cells);
        for i in 0..cells {
            let at = pos + i * 4;
            data.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
        }
        let label = f32::from_le_bytes(bytes[pos + cells * 4..pos + cells * 4 + 4].try_into().unwrap());
        records.push(SampleRecord {
            spec: LogMelSpectrogram {
                frames: TensorF32::from_vec(&[t as usize, m as usize], data)?,
            },
            label,
        });
        pos += rec_bytes;
    }
    Ok((header, records))
}

/// Configuration of the synthetic speech-like dataset.
///
/// Each sample is a harmonic tone complex with a slow amplitude modulation,
/// mixed with white noise at an SNR drawn uniformly from `snr_range_db`,
/// then scaled to a random overall level. The label is a monotone
/// saturating map of the true SNR; the random level makes absolute energy
/// uninformative, so predicting it requires spectral contrasts.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub rng_seed: u64,
    pub segment_s: f64,
    pub snr_range_db: (f64, f64),
    pub f0_range_hz: (f64, f64),
    pub n_harmonics: usize,
    /// Per-sample peak level range in dBFS (log-uniform draw).
    pub level_range_dbfs: (f64, f64),
    pub label_fn: LabelFn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelFn {
    /// label = 1.0 + 3.5 * sigmoid(snr_db / 6)
    SnrSigmoid,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 100,
            rng_seed: 0,
            segment_s: 9.0,
            snr_range_db: (-5.0, 25.0),
            f0_range_hz: (100.0, 300.0),
            n_harmonics: 10,
            level_range_dbfs: (-27.0, -1.0),
            label_fn: LabelFn::SnrSigmoid,
        }
    }
}

pub fn synth_label(label_fn: LabelFn, snr_db: f64) -> f32 {
    match label_fn {
        LabelFn::SnrSigmoid => {
            let s = 1.0 / (1.0 + (-snr_db / 6.0).exp());
            (1.0 + 3.5 * s) as f32
        }
    }
}

pub const SYNTH_LABEL_RANGE: (f32, f32) = (1.0, 4.5);

fn synth_waveform(cfg: &SynthConfig, rng: &mut Rng) -> (Waveform, f64) {
    let sr = audio::SAMPLE_RATE_HZ;
    let n = (cfg.segment_s * sr as f64).round() as usize;
    let f0 = rng.range_f64(cfg.f0_range_hz.0, cfg.f0_range_hz.1);
    let snr_db = rng.range_f64(cfg.snr_range_db.0, cfg.snr_range_db.1);
    let am_rate = rng.range_f64(2.0, 5.0);
    let am_phase = rng.range_f64(0.0, std::f64::consts::TAU);
    let phases: Vec<f64> = (0..cfg.n_harmonics)
        .map(|_| rng.range_f64(0.0, std::f64::consts::TAU))
        .collect();

    let mut signal = vec![0.0f64; n];
    for (k, &phase) in phases.iter().enumerate() {
        let fk = f0 * (k + 1) as f64;
        if fk >= sr as f64 / 2.0 {
            break;
        }
        let amp = 1.0 / (k + 1) as f64;
        let step = std::f64::consts::TAU * fk / sr as f64;
        for (i, s) in signal.iter_mut().enumerate() {
            *s += amp * (step * i as f64 + phase).sin();
        }
    }
    // Syllabic-rate amplitude modulation.
    let am_step = std::f64::consts::TAU * am_rate / sr as f64;
    for (i, s) in signal.iter_mut().enumerate() {
        *s *= 0.6 + 0.4 * (am_step * i as f64 + am_phase).sin();
    }

    let sig_power: f64 = signal.iter().map(|s| s * s).sum::<f64>() / n as f64;
    let noise_power = sig_power / 10f64.powf(snr_db / 10.0);
    let noise_scale = noise_power.sqrt();
    let mut peak = 0.0f64;
    let mut mixed = vec![0.0f64; n];
    for (i, m) in mixed.iter_mut().enumerate() {
        *m = signal[i] + noise_scale * rng.normal();
        peak = peak.max(m.abs());
    }
    // Normalize the mix to a random per-sample level: absolute energy then
    // carries no SNR information.
    let level_db = rng.range_f64(cfg.level_range_dbfs.0, cfg.level_range_dbfs.1);
    let target_peak = 10f64.powf(level_db / 20.0);
    let gain = if peak > 0.0 { target_peak / peak } else { 1.0 };
    let samples: Vec<f32> = mixed.iter().map(|&m| (m * gain) as f32).collect();
    (
        Waveform {
            samples,
            sample_rate_hz: sr,
        },
        snr_db,
    )
}

/// Generate `cfg.n_samples` records. Each sample draws from its own seed
/// stream derived from `cfg.rng_seed` and its index, so output is identical
/// whether generation runs sequentially or fanned out.
pub fn synth_generate(cfg: &SynthConfig, par: Parallelism) -> Result<Vec<SampleRecord>> {
    if cfg.n_samples == 0 {
        return Err(SqpError::InvalidArgument("n_samples must be >= 1".into()));
    }
    let fb = MelFilterbank::default_for(audio::SAMPLE_RATE_HZ)?;
    let results = ordered_map(par, cfg.n_samples, |i| {
        let mut rng = Rng::seed_from_u64(derive_seed(cfg.rng_seed, 0x53594e54, i as u64));
        let (wave, snr_db) = synth_waveform(cfg, &mut rng);
        log_mel_spectrogram_record(cfg, &fb, &wave, snr_db)
    });
    results.into_iter().collect()
}

fn log_mel_spectrogram_record(
    cfg: &SynthConfig,
    fb: &MelFilterbank,
    wave: &Waveform,
    snr_db: f64,
) -> Result<SampleRecord> {
    let spec = audio::log_mel_spectrogram(wave, fb)?;
    Ok(SampleRecord {
        spec,
        label: synth_label(cfg.label_fn, snr_db),
    })
}

/// Split records into disjoint, exhaustive (train, validation) index sets.
/// When `groups` is given (e.g. one id per source clip), the split happens
/// at group granularity so no clip straddles the partition.
pub fn split_indices(
    n: usize,
    groups: Option<&[u64]>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(SqpError::InvalidArgument(
            "need at least 2 records to split".into(),
        ));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(SqpError::InvalidArgument(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    if let Some(g) = groups {
        if g.len() != n {
            return Err(SqpError::ShapeMismatch(format!(
                "{} group ids for {n} records",
                g.len()
            )));
        }
    }
    let mut rng = Rng::seed_from_u64(derive_seed(seed, 0x53504c54, 0));
    match groups {
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            let n_val = ((n as f64 * val_fraction).floor() as usize).max(1);
            let (val, train) = idx.split_at(n_val);
            let mut train = train.to_vec();
            let mut val = val.to_vec();
            train.sort_unstable();
            val.sort_unstable();
            Ok((train, val))
        }
        Some(groups) => {
            let mut uniq: Vec<u64> = groups.to_vec();
            uniq.sort_unstable();
            uniq.dedup();
            if uniq.len() < 2 {
                return Err(SqpError::InvalidArgument(
                    "grouped split needs at least 2 distinct groups".into(),
                ));
            }
            rng.shuffle(&mut uniq);
            let n_val_groups = ((uniq.len() as f64 * val_fraction).floor() as usize).max(1);
            let val_groups: std::collections::BTreeSet<u64> =
                uniq[..n_val_groups].iter().copied().collect();
            let mut train = Vec::new();
            let mut val = Vec::new();
            for (i, g) in groups.iter().enumerate() {
                if val_groups.contains(g) {
                    val.push(i);
                } else {
                    train.push(i);
                }
            }
            Ok((train, val))
        }
    }
}

pub fn split_records(
    records: &[SampleRecord],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    let (ti, vi) = split_indices(records.len(), None, val_fraction, seed)?;
    Ok((
        ti.into_iter().map(|i| records[i].clone()).collect(),
        vi.into_iter().map(|i| records[i].clone()).collect(),
    ))
}

/// Parse a `path,label` CSV. Lines starting with '#' and a `path,label`
/// header line are skipped.
pub fn parse_label_csv(text: &str) -> Result<Vec<(String, f32)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (path, label) = line.rsplit_once(',').ok_or_else(|| {
            SqpError::Format(format!("line {}: expected `path,label`", lineno + 1))
        })?;
        let label = label.trim();
        if lineno == 0 && label.eq_ignore_ascii_case("label") {
            continue;
        }
        let label: f32 = label.parse().map_err(|_| {
            SqpError::Format(format!("line {}: bad label {label:?}", lineno + 1))
        })?;
        out.push((path.trim().to_string(), label));
    }
    Ok(out)
}

/// Build records from WAV files: each clip is framed into `seg_s`-second
/// segments (stride `stride_s`) and every segment inherits the clip label.
/// Returns the records plus one group id per record (clip index).
pub fn records_from_wavs(
    entries: &[(std::path::PathBuf, f32)],
    seg_s: f64,
    stride_s: f64,
) -> Result<(Vec<SampleRecord>, Vec<u64>)> {
    let fb = MelFilterbank::default_for(audio::SAMPLE_RATE_HZ)?;
    let mut records = Vec::new();
    let mut groups = Vec::new();
    for (clip_id, (path, label)) in entries.iter().enumerate() {
        let wave = audio::load_wav(path)?;
        if wave.sample_rate_hz != audio::SAMPLE_RATE_HZ {
            return Err(SqpError::InvalidArgument(format!(
                "{}: sample rate {} Hz, expected {} (resampling is out of scope)",
                path.display(),
                wave.sample_rate_hz,
                audio::SAMPLE_RATE_HZ
            )));
        }
        let segs = audio::frame_segments(&wave, seg_s, stride_s);
        if segs.is_empty() {
            return Err(SqpError::InvalidArgument(format!(
                "{}: clip shorter than one {seg_s}-second segment",
                path.display()
            )));
        }
        for seg in &segs {
            records.push(SampleRecord {
                spec: audio::log_mel_spectrogram(seg, &fb)?,
                label: *label,
            });
            groups.push(clip_id as u64);
        }
    }
    Ok((records, groups))
}
