//! PCM audio to log-power Mel spectrograms.
//!
//! Fixed frontend: 16 kHz mono input, 40 ms Hann window, 20 ms hop,
//! 1024-point FFT, 120 HTK-style triangular Mel filters, log10(power + 1e-10).

mod wav;

pub use wav::{load_wav, write_wav};

use crate::error::{Result, SqpError};
use crate::tensor::TensorF32;
use rustfft::{num_complex::Complex, FftPlanner};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
pub const WIN_MS: usize = 40;
pub const HOP_MS: usize = 20;
pub const N_FFT: usize = 1024;
pub const N_MELS: usize = 120;
pub const LOG_EPS: f64 = 1e-10;

pub const fn win_len(sample_rate_hz: u32) -> usize {
    (sample_rate_hz as usize * WIN_MS) / 1000
}

pub const fn hop_len(sample_rate_hz: u32) -> usize {
    (sample_rate_hz as usize * HOP_MS) / 1000
}

/// Mono waveform, samples in [-1, 1].
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(SqpError::InvalidArgument("sample rate must be > 0".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(SqpError::NonFinite(format!("sample[{i}]")));
        }
        Ok(Waveform {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Triangular Mel filterbank on the HTK scale.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub n_fft: usize,
    pub n_mels: usize,
    pub sample_rate_hz: u32,
    pub f_min_hz: f32,
    pub f_max_hz: f32,
    /// n_mels × (n_fft/2 + 1) weights.
    pub weights: TensorF32,
    /// Per-filter [start, end) bin range with nonzero support.
    support: Vec<(usize, usize)>,
    centers_hz: Vec<f32>,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

pub fn build_mel_filterbank(
    sample_rate_hz: u32,
    n_fft: usize,
    n_mels: usize,
    f_min_hz: f32,
    f_max_hz: f32,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate_hz as f32 / 2.0;
    if n_mels == 0 {
        return Err(SqpError::InvalidArgument("n_mels must be >= 1".into()));
    }
    if !(f_min_hz >= 0.0 && f_min_hz < f_max_hz && f_max_hz <= nyquist) {
        return Err(SqpError::InvalidArgument(format!(
            "need 0 <= f_min < f_max <= {nyquist}, got [{f_min_hz}, {f_max_hz}]"
        )));
    }
    let n_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(f_min_hz as f64);
    let mel_hi = hz_to_mel(f_max_hz as f64);
    // n_mels + 2 edge frequencies, uniform on the Mel scale.
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sample_rate_hz as f64 / n_fft as f64;

    let mut weights = vec![0.0f32; n_mels * n_bins];
    let mut support = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        let mut lo = n_bins;
        let mut hi = 0;
        for k in 0..n_bins {
            let f = bin_hz(k);
            let w = if f > left && f < center {
                (f - left) / (center - left)
            } else if (f - center).abs() == 0.0 {
                1.0
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            if w > 0.0 {
                weights[m * n_bins + k] = w as f32;
                lo = lo.min(k);
                hi = hi.max(k + 1);
            }
        }
        if lo >= hi {
            return Err(SqpError::InvalidArgument(format!(
                "mel filter {m} has no positive weight; n_fft too small for this band layout"
            )));
        }
        support.push((lo, hi));
    }
    Ok(MelFilterbank {
        n_fft,
        n_mels,
        sample_rate_hz,
        f_min_hz,
        f_max_hz,
        weights: TensorF32::from_vec(&[n_mels, n_bins], weights)?,
        support,
        centers_hz: edges_hz[1..=n_mels].iter().map(|&f| f as f32).collect(),
    })
}

impl MelFilterbank {
    pub fn default_for(sample_rate_hz: u32) -> Result<Self> {
        build_mel_filterbank(
            sample_rate_hz,
            N_FFT,
            N_MELS,
            0.0,
            sample_rate_hz as f32 / 2.0,
        )
    }

    pub fn center_frequencies_hz(&self) -> &[f32] {
        &self.centers_hz
    }
}

/// T × n_mels log-power Mel spectrogram (40 ms window, 20 ms hop).
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    pub frames: TensorF32,
}

impl LogMelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        self.frames.shape()[1]
    }
}

pub fn frame_count(n_samples: usize, win: usize, hop: usize) -> Option<usize> {
    if n_samples < win {
        None
    } else {
        Some((n_samples - win) / hop + 1)
    }
}

pub fn log_mel_spectrogram(w: &Waveform, fb: &MelFilterbank) -> Result<LogMelSpectrogram> {
    if w.sample_rate_hz != fb.sample_rate_hz {
        return Err(SqpError::InvalidArgument(format!(
            "waveform at {} Hz but filterbank built for {} Hz",
            w.sample_rate_hz, fb.sample_rate_hz
        )));
    }
    let win = win_len(w.sample_rate_hz);
    let hop = hop_len(w.sample_rate_hz);
    let n_frames = frame_count(w.samples.len(), win, hop).ok_or_else(|| {
        SqpError::InvalidArgument(format!(
            "waveform of {} samples shorter than one {win}-sample window",
            w.samples.len()
        ))
    })?;
    let n_bins = fb.n_fft / 2 + 1;

    // Periodic Hann window, computed in f64.
    let hann: Vec<f64> = (0..win)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos()))
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fb.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); fb.n_fft];
    let mut power = vec![0.0f64; n_bins];
    let mut out = vec![0.0f32; n_frames * fb.n_mels];

    for t in 0..n_frames {
        let start = t * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < win {
                Complex::new(w.samples[start + i] as f64 * hann[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        let weights = fb.weights.data();
        for m in 0..fb.n_mels {
            let (lo, hi) = fb.support[m];
            let row = &weights[m * n_bins..(m + 1) * n_bins];
            let mut acc = 0.0f64;
            for k in lo..hi {
                acc += row[k] as f64 * power[k];
            }
            out[t * fb.n_mels + m] = (acc + LOG_EPS).log10() as f32;
        }
    }
    Ok(LogMelSpectrogram {
        frames: TensorF32::from_vec(&[n_frames, fb.n_mels], out)?,
    })
}

/// Cut a clip into full seg_s-second segments every stride_s seconds.
/// Clips shorter than one segment yield an empty list.
pub fn frame_segments(w: &Waveform, seg_s: f64, stride_s: f64) -> Vec<Waveform> {
    let seg = (seg_s * w.sample_rate_hz as f64).round() as usize;
    let stride = (stride_s * w.sample_rate_hz as f64).round() as usize;
    let mut out = Vec::new();
    if seg == 0 || stride == 0 || w.samples.len() < seg {
        return out;
    }
    let mut start = 0;
    while start + seg <= w.samples.len() {
        out.push(Waveform {
            samples: w.samples[start..start + seg].to_vec(),
            sample_rate_hz: w.sample_rate_hz,
        });
        start += stride;
    }
    out
}
